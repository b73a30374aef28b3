use alloc::vec;
use alloc::vec::Vec;

use libm::{atan2, cos, sin, sqrt};

use super::SimError;

/// Serial planar chain of revolute joints.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PlanarChain {
    pub base: [f64; 2],
    pub link_lengths: Vec<f64>,
    /// `(lower, upper)` per joint, radians.
    pub joint_limits: Vec<(f64, f64)>,
}

/// End-effector position and heading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EefPose {
    pub xy: [f64; 2],
    pub heading: f64,
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    atan2(sin(a), cos(a))
}

impl PlanarChain {
    pub fn dof(&self) -> usize {
        self.link_lengths.len()
    }

    pub fn reach(&self) -> f64 {
        self.link_lengths.iter().sum()
    }

    pub fn within_limits(&self, q: &[f64]) -> bool {
        q.len() == self.dof() && q.iter().zip(&self.joint_limits).all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    pub fn clamp(&self, q: &mut [f64]) {
        for (v, (lo, hi)) in q.iter_mut().zip(&self.joint_limits) {
            *v = v.clamp(*lo, *hi);
        }
    }

    /// Base, every intermediate joint, then the end effector.
    pub fn points(&self, q: &[f64]) -> Vec<[f64; 2]> {
        let mut pts = Vec::with_capacity(self.dof() + 1);
        let mut p = self.base;
        let mut theta = 0.0;
        pts.push(p);
        for (l, qi) in self.link_lengths.iter().zip(q) {
            theta += qi;
            p = [p[0] + l * cos(theta), p[1] + l * sin(theta)];
            pts.push(p);
        }
        pts
    }

    /// Forward kinematics without limit checks.
    pub fn fk_unchecked(&self, q: &[f64]) -> EefPose {
        let pts = self.points(q);
        EefPose {
            xy: pts[pts.len() - 1],
            heading: q.iter().sum(),
        }
    }

    pub fn fk(&self, q: &[f64]) -> Result<EefPose, SimError> {
        if !self.within_limits(q) {
            return Err(SimError::JointLimits);
        }
        Ok(self.fk_unchecked(q))
    }

    /// `2 x n` positional Jacobian, row-major.
    pub fn position_jacobian(&self, q: &[f64]) -> Vec<f64> {
        let n = self.dof();
        let pts = self.points(q);
        let eef = pts[n];
        let mut jac = vec![0.0; 2 * n];
        for i in 0..n {
            let r = [eef[0] - pts[i][0], eef[1] - pts[i][1]];
            jac[i] = -r[1];
            jac[n + i] = r[0];
        }
        jac
    }

    /// One resolved-rate move: positional target reached by damped
    /// pseudo-inverse Newton iterations, heading corrected in the null space
    /// of the positional task by at most `max_heading_step`.
    pub fn resolve(&self, q: &mut [f64], target_xy: [f64; 2], target_heading: f64, max_heading_step: f64) {
        let n = self.dof();
        let h_err = wrap_angle(target_heading - q.iter().sum::<f64>());
        let h_step = if h_err.abs() < 1e-12 {
            0.0
        } else {
            h_err.clamp(-max_heading_step, max_heading_step)
        };
        for iter in 0..30 {
            let pose = self.fk_unchecked(q);
            let e = [target_xy[0] - pose.xy[0], target_xy[1] - pose.xy[1]];
            let e_norm = sqrt(e[0] * e[0] + e[1] * e[1]);
            if e_norm < 1e-13 && (iter > 0 || h_step == 0.0) {
                break;
            }
            let jac = self.position_jacobian(q);
            // J J^T + lambda I (2x2), inverted in closed form.
            let lambda = 1e-9;
            let mut jjt = [0.0; 4];
            for r in 0..2 {
                for c in 0..2 {
                    jjt[r * 2 + c] = (0..n).map(|k| jac[r * n + k] * jac[c * n + k]).sum();
                }
            }
            jjt[0] += lambda;
            jjt[3] += lambda;
            let det = jjt[0] * jjt[3] - jjt[1] * jjt[2];
            if det.abs() < 1e-18 {
                break;
            }
            let inv = [jjt[3] / det, -jjt[1] / det, -jjt[2] / det, jjt[0] / det];
            // J^+ = J^T (J J^T)^-1, n x 2
            let pinv: Vec<f64> = (0..n)
                .flat_map(|k| {
                    let a = jac[k] * inv[0] + jac[n + k] * inv[2];
                    let b = jac[k] * inv[1] + jac[n + k] * inv[3];
                    [a, b]
                })
                .collect();
            let mut dq: Vec<f64> = (0..n).map(|k| pinv[2 * k] * e[0] + pinv[2 * k + 1] * e[1]).collect();
            if iter == 0 && h_step != 0.0 && n > 2 {
                // Null-space projection of the heading gradient (all ones).
                let jg = [(0..n).map(|k| jac[k]).sum::<f64>(), (0..n).map(|k| jac[n + k]).sum::<f64>()];
                let null: Vec<f64> = (0..n).map(|k| 1.0 - (pinv[2 * k] * jg[0] + pinv[2 * k + 1] * jg[1])).collect();
                let gain: f64 = null.iter().sum();
                if gain.abs() > 1e-9 {
                    for (d, v) in dq.iter_mut().zip(&null) {
                        *d += v * h_step / gain;
                    }
                }
            }
            for (qi, d) in q.iter_mut().zip(&dq) {
                *qi += d;
            }
            self.clamp(q);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::{FRAC_PI_2, PI};

    fn chain(lengths: &[f64]) -> PlanarChain {
        PlanarChain {
            base: [0.0, 0.0],
            link_lengths: lengths.to_vec(),
            joint_limits: vec![(-PI, PI); lengths.len()],
        }
    }

    #[test]
    fn fk_examples() {
        let c = chain(&[1.0, 1.0]);
        let p = c.fk(&[0.0, 0.0]).unwrap();
        assert_eq!((p.xy, p.heading), ([2.0, 0.0], 0.0));
        let p = c.fk(&[FRAC_PI_2, 0.0]).unwrap();
        assert!(p.xy[0].abs() < 1e-15 && (p.xy[1] - 2.0).abs() < 1e-15);
        assert_eq!(p.heading, FRAC_PI_2);
        let single = chain(&[0.7]);
        let p = single.fk(&[0.0]).unwrap();
        assert_eq!((p.xy, p.heading), ([0.7, 0.0], 0.0));
    }

    #[test]
    fn out_of_limit_joints_rejected() {
        let mut c = chain(&[1.0, 1.0]);
        c.joint_limits[1] = (-1.0, 1.0);
        assert_eq!(c.fk(&[0.0, 1.5]), Err(SimError::JointLimits));
        assert_eq!(c.fk(&[0.0]), Err(SimError::JointLimits));
    }

    #[test]
    fn analytic_jacobian_matches_finite_differences() {
        let c = chain(&[0.5, 0.4, 0.3, 0.2]);
        let q = [0.3, -0.7, 0.9, -0.2];
        let jac = c.position_jacobian(&q);
        let h = 1e-6;
        for k in 0..4 {
            let mut qp = q;
            let mut qm = q;
            qp[k] += h;
            qm[k] -= h;
            let (a, b) = (c.fk_unchecked(&qp).xy, c.fk_unchecked(&qm).xy);
            for r in 0..2 {
                let fd = (a[r] - b[r]) / (2.0 * h);
                assert!((fd - jac[r * 4 + k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn resolve_hits_position_and_moves_heading_in_null_space() {
        let c = chain(&[0.5, 0.4, 0.3]);
        let mut q = vec![1.2, -0.6, -0.4];
        let start = c.fk_unchecked(&q);
        let target = [start.xy[0] + 0.02, start.xy[1] - 0.01];
        c.resolve(&mut q, target, start.heading + 0.5, 0.05);
        let end = c.fk_unchecked(&q);
        assert!((end.xy[0] - target[0]).abs() < 1e-10 && (end.xy[1] - target[1]).abs() < 1e-10);
        assert!(end.heading > start.heading + 0.01);
    }

    #[test]
    fn resolve_at_current_pose_is_a_fixed_point() {
        let c = chain(&[0.6, 0.5]);
        let mut q = vec![1.0, -0.8];
        let p = c.fk_unchecked(&q);
        let before = q.clone();
        c.resolve(&mut q, p.xy, p.heading, 0.1);
        assert_eq!(q, before);
    }
}
