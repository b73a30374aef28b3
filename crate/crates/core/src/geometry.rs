//! Rotation matrices and the continuous 6D rotation codec used by the
//! aligned action space.

use libm::{acos, cos, sin, sqrt};

/// Norm threshold below which a 6D input is treated as degenerate.
pub const DEGENERATE_EPS: f64 = 1e-8;

const UNIT_AXIS_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("rotation axis must be unit length (|axis| = {norm})")]
    NonUnitAxis { norm: f64 },
    #[error("degenerate 6D rotation: {0}")]
    Degenerate(&'static str),
}

/// Proper rotation, stored row-major: `m[row][col]`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RotationMatrix {
    pub m: [[f64; 3]; 3],
}

/// First two columns of a rotation matrix, packed column-major:
/// `(c0.x, c0.y, c0.z, c1.x, c1.y, c1.z)`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Rot6D {
    pub v: [f64; 6],
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(a: [f64; 3]) -> f64 {
    sqrt(dot(a, a))
}

impl RotationMatrix {
    pub const IDENTITY: RotationMatrix = RotationMatrix {
        m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
    };

    pub fn col(&self, c: usize) -> [f64; 3] {
        [self.m[0][c], self.m[1][c], self.m[2][c]]
    }

    pub fn from_cols(c0: [f64; 3], c1: [f64; 3], c2: [f64; 3]) -> Self {
        RotationMatrix {
            m: [[c0[0], c1[0], c2[0]], [c0[1], c1[1], c2[1]], [c0[2], c1[2], c2[2]]],
        }
    }

    pub fn transpose(&self) -> Self {
        let mut m = [[0.0; 3]; 3];
        for (r, row) in m.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = self.m[c][r];
            }
        }
        RotationMatrix { m }
    }

    pub fn mul(&self, other: &RotationMatrix) -> Self {
        let mut m = [[0.0; 3]; 3];
        for (r, row) in m.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.m[r][k] * other.m[k][c]).sum();
            }
        }
        RotationMatrix { m }
    }

    pub fn determinant(&self) -> f64 {
        dot(self.col(0), cross(self.col(1), self.col(2)))
    }

    /// Rotation about +z by `heading`; planar headings lift to 3D this way.
    pub fn about_z(heading: f64) -> Self {
        let (s, c) = (sin(heading), cos(heading));
        RotationMatrix {
            m: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    /// Heading of a rotation about z (inverse of [`RotationMatrix::about_z`]).
    pub fn heading(&self) -> f64 {
        libm::atan2(self.m[1][0], self.m[0][0])
    }

    /// Columns orthonormal and determinant +1 within `tol`.
    pub fn is_proper(&self, tol: f64) -> bool {
        let cols = [self.col(0), self.col(1), self.col(2)];
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot(cols[i], cols[j]) - want).abs() > tol {
                    return false;
                }
            }
        }
        (self.determinant() - 1.0).abs() <= tol
    }
}

/// Rodrigues' formula.
pub fn rot_from_axis_angle(axis: [f64; 3], angle: f64) -> Result<RotationMatrix, GeometryError> {
    let n = norm(axis);
    if (n - 1.0).abs() > UNIT_AXIS_TOL {
        return Err(GeometryError::NonUnitAxis { norm: n });
    }
    let [x, y, z] = axis;
    let (s, c) = (sin(angle), cos(angle));
    let t = 1.0 - c;
    Ok(RotationMatrix {
        m: [
            [c + x * x * t, x * y * t - z * s, x * z * t + y * s],
            [y * x * t + z * s, c + y * y * t, y * z * t - x * s],
            [z * x * t - y * s, z * y * t + x * s, c + z * z * t],
        ],
    })
}

pub fn rot6d_encode(r: &RotationMatrix) -> Rot6D {
    let (a, b) = (r.col(0), r.col(1));
    Rot6D {
        v: [a[0], a[1], a[2], b[0], b[1], b[2]],
    }
}

/// Gram-Schmidt reconstruction of a proper rotation from two 3-vectors.
pub fn rot6d_decode(v: &Rot6D) -> Result<RotationMatrix, GeometryError> {
    if v.v.iter().any(|x| !x.is_finite()) {
        return Err(GeometryError::Degenerate("non-finite component"));
    }
    let a1 = [v.v[0], v.v[1], v.v[2]];
    let a2 = [v.v[3], v.v[4], v.v[5]];
    let n1 = norm(a1);
    if n1 <= DEGENERATE_EPS {
        return Err(GeometryError::Degenerate("first column has vanishing norm"));
    }
    let b1 = [a1[0] / n1, a1[1] / n1, a1[2] / n1];
    let p = dot(b1, a2);
    let u2 = [a2[0] - p * b1[0], a2[1] - p * b1[1], a2[2] - p * b1[2]];
    let n2 = norm(u2);
    // Scale the parallel test by |a2| so it is invariant to column scaling.
    if n2 <= DEGENERATE_EPS * norm(a2).max(1.0) || n2 <= DEGENERATE_EPS {
        return Err(GeometryError::Degenerate("second column parallel to the first"));
    }
    let b2 = [u2[0] / n2, u2[1] / n2, u2[2] / n2];
    let b3 = cross(b1, b2);
    Ok(RotationMatrix::from_cols(b1, b2, b3))
}

/// Geodesic angle between two rotations, in `[0, pi]`.
pub fn geodesic_dist(r1: &RotationMatrix, r2: &RotationMatrix) -> f64 {
    let rel = r1.transpose().mul(r2);
    let tr = rel.m[0][0] + rel.m[1][1] + rel.m[2][2];
    acos(((tr - 1.0) / 2.0).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::{FRAC_PI_2, PI};
    use proptest::prelude::*;

    const Z: [f64; 3] = [0.0, 0.0, 1.0];
    const X: [f64; 3] = [1.0, 0.0, 0.0];

    fn assert_mat(a: &RotationMatrix, b: [[f64; 3]; 3], tol: f64) {
        for r in 0..3 {
            for c in 0..3 {
                assert!((a.m[r][c] - b[r][c]).abs() < tol, "{a:?} vs {b:?}");
            }
        }
    }

    fn assert_vec6(a: &Rot6D, b: [f64; 6]) {
        for i in 0..6 {
            assert!((a.v[i] - b[i]).abs() < 1e-12, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn axis_angle_examples() {
        assert_mat(&rot_from_axis_angle(Z, 0.0).unwrap(), RotationMatrix::IDENTITY.m, 1e-15);
        assert_mat(
            &rot_from_axis_angle(Z, FRAC_PI_2).unwrap(),
            [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]],
            1e-15,
        );
        assert_mat(
            &rot_from_axis_angle(X, PI).unwrap(),
            [[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]],
            1e-15,
        );
    }

    #[test]
    fn non_unit_axis_rejected() {
        assert!(matches!(
            rot_from_axis_angle([0.0, 0.0, 2.0], 1.0),
            Err(GeometryError::NonUnitAxis { .. })
        ));
    }

    #[test]
    fn encode_examples() {
        assert_vec6(&rot6d_encode(&RotationMatrix::IDENTITY), [1., 0., 0., 0., 1., 0.]);
        assert_vec6(
            &rot6d_encode(&rot_from_axis_angle(Z, FRAC_PI_2).unwrap()),
            [0., 1., 0., -1., 0., 0.],
        );
        assert_vec6(
            &rot6d_encode(&rot_from_axis_angle(X, PI).unwrap()),
            [1., 0., 0., 0., -1., 0.],
        );
    }

    #[test]
    fn decode_examples() {
        let id = RotationMatrix::IDENTITY.m;
        assert_mat(&rot6d_decode(&Rot6D { v: [1., 0., 0., 0., 1., 0.] }).unwrap(), id, 1e-15);
        assert_mat(&rot6d_decode(&Rot6D { v: [2., 0., 0., 0., 3., 0.] }).unwrap(), id, 1e-15);
        assert_mat(&rot6d_decode(&Rot6D { v: [1., 0., 0., 1., 1., 0.] }).unwrap(), id, 1e-15);
    }

    #[test]
    fn degenerate_inputs_error_instead_of_nan() {
        for v in [
            [0.0; 6],
            [1e-10, 0., 0., 0., 1., 0.],
            [1., 0., 0., 3., 0., 0.],
            [1., 0., 0., 0., 0., 0.],
            [f64::NAN, 0., 0., 0., 1., 0.],
        ] {
            assert!(matches!(rot6d_decode(&Rot6D { v }), Err(GeometryError::Degenerate(_))), "{v:?}");
        }
    }

    #[test]
    fn geodesic_examples() {
        let r = rot_from_axis_angle([0.6, 0.0, 0.8], 0.7).unwrap();
        assert!(geodesic_dist(&r, &r).abs() < 1e-7);
        let id = RotationMatrix::IDENTITY;
        assert!((geodesic_dist(&id, &rot_from_axis_angle(Z, FRAC_PI_2).unwrap()) - FRAC_PI_2).abs() < 1e-12);
        assert!((geodesic_dist(&id, &rot_from_axis_angle(X, PI).unwrap()) - PI).abs() < 1e-12);
    }

    #[test]
    fn heading_round_trip_about_z() {
        for h in [-3.0, -1.2, 0.0, 0.4, 2.9] {
            let r = RotationMatrix::about_z(h);
            assert!((r.heading() - h).abs() < 1e-12);
            assert!(r.is_proper(1e-12));
        }
    }

    fn axis_angle() -> impl Strategy<Value = ([f64; 3], f64)> {
        (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0, -PI..PI)
            .prop_filter("non-zero axis", |(x, y, z, _)| x * x + y * y + z * z > 1e-3)
            .prop_map(|(x, y, z, a)| {
                let n = sqrt(x * x + y * y + z * z);
                ([x / n, y / n, z / n], a)
            })
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip((axis, angle) in axis_angle()) {
            let r = rot_from_axis_angle(axis, angle).unwrap();
            let back = rot6d_decode(&rot6d_encode(&r)).unwrap();
            for i in 0..3 { for j in 0..3 {
                prop_assert!((back.m[i][j] - r.m[i][j]).abs() < 1e-9);
            }}
        }

        #[test]
        fn decode_is_scale_invariant_and_proper(
            v in proptest::array::uniform6(-2.0f64..2.0),
            s1 in 0.01f64..100.0,
            s2 in 0.01f64..100.0,
        ) {
            let v = Rot6D { v };
            if let Ok(r) = rot6d_decode(&v) {
                prop_assert!(r.is_proper(1e-9));
                let scaled = Rot6D { v: [
                    v.v[0] * s1, v.v[1] * s1, v.v[2] * s1,
                    v.v[3] * s2, v.v[4] * s2, v.v[5] * s2,
                ]};
                let r2 = rot6d_decode(&scaled).unwrap();
                for i in 0..3 { for j in 0..3 {
                    prop_assert!((r2.m[i][j] - r.m[i][j]).abs() < 1e-9);
                }}
                // decode . encode . decode = decode
                let again = rot6d_decode(&rot6d_encode(&r)).unwrap();
                prop_assert!(again.m.iter().flatten().zip(r.m.iter().flatten()).all(|(a, b)| (a - b).abs() < 1e-12));
            }
        }
    }
}
