//! Flow-matching targets, loss and the Euler action generator.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::dataset::{ActionChunk, DomainNorm};
use crate::model::{ModelError, ModelInput, PolicyModel};
use crate::real::Real;

/// Weight of the gripper BCE term.
pub const LAMBDA_BCE: f64 = 0.1;
/// Euler steps used at inference.
pub const DEFAULT_STEPS: usize = 10;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FlowError {
    #[error("gripper label {0} is not binary")]
    NonBinaryLabel(f64),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// i.i.d. standard normal `K x cont_dim` block.
pub fn sample_noise<R: Rng + ?Sized>(rng: &mut R, k: usize, cont_dim: usize) -> Vec<f64> {
    (0..k * cont_dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// `(1 - t) A0 + t A`.
pub fn interpolate(a0: &[f64], a: &[f64], t: f64) -> Vec<f64> {
    assert_eq!(a0.len(), a.len(), "interpolate: shape mismatch");
    a0.iter().zip(a).map(|(x0, x1)| (1.0 - t) * x0 + t * x1).collect()
}

/// `A - A0`; the straight path's constant velocity.
pub fn target_velocity(a0: &[f64], a: &[f64]) -> Vec<f64> {
    assert_eq!(a0.len(), a.len(), "target_velocity: shape mismatch");
    a.iter().zip(a0).map(|(x1, x0)| x1 - x0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FmLoss {
    pub mse: f64,
    pub bce: f64,
    pub total: f64,
}

fn log_sigmoid(z: f64) -> f64 {
    // log(sigmoid(z)) without overflow.
    if z >= 0.0 {
        -libm::log1p(libm::exp(-z))
    } else {
        z - libm::log1p(libm::exp(z))
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + libm::exp(-z))
    } else {
        let e = libm::exp(z);
        e / (1.0 + e)
    }
}

/// Loss together with its gradient w.r.t. the predictions and logits.
#[derive(Debug, Clone, PartialEq)]
pub struct FmLossGrad {
    pub loss: FmLoss,
    pub d_pred: Vec<f64>,
    pub d_logits: Vec<f64>,
}

/// Mean squared error over continuous dims plus `lambda_bce` times the
/// mean binary cross-entropy over gripper logits.
pub fn fm_loss(pred_v: &[f64], target_v: &[f64], logits: &[f64], labels: &[f64], lambda_bce: f64) -> Result<FmLoss, FlowError> {
    fm_loss_grad(pred_v, target_v, logits, labels, lambda_bce).map(|g| g.loss)
}

pub fn fm_loss_grad(pred_v: &[f64], target_v: &[f64], logits: &[f64], labels: &[f64], lambda_bce: f64) -> Result<FmLossGrad, FlowError> {
    if pred_v.len() != target_v.len() || logits.len() != labels.len() {
        return Err(FlowError::Shape(format!(
            "pred {} vs target {}, logits {} vs labels {}",
            pred_v.len(),
            target_v.len(),
            logits.len(),
            labels.len()
        )));
    }
    if let Some(&y) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(FlowError::NonBinaryLabel(y));
    }
    if !pred_v.iter().chain(target_v).chain(logits).all(|v| v.is_finite()) {
        return Err(FlowError::NonFinite("loss inputs"));
    }
    let n = pred_v.len().max(1) as f64;
    let mut mse = 0.0;
    let mut d_pred = Vec::with_capacity(pred_v.len());
    for (p, t) in pred_v.iter().zip(target_v) {
        let e = p - t;
        mse += e * e;
        d_pred.push(2.0 * e / n);
    }
    mse /= n;
    let m = logits.len().max(1) as f64;
    let mut bce = 0.0;
    let mut d_logits = Vec::with_capacity(logits.len());
    for (z, y) in logits.iter().zip(labels) {
        bce -= y * log_sigmoid(*z) + (1.0 - y) * log_sigmoid(-*z);
        d_logits.push(lambda_bce * (sigmoid(*z) - y) / m);
    }
    bce /= m;
    Ok(FmLossGrad {
        loss: FmLoss {
            mse,
            bce,
            total: mse + lambda_bce * bce,
        },
        d_pred,
        d_logits,
    })
}

/// Euler integration from `t = 0` to `1` in `steps` steps. `field` maps
/// `(A_t, t)` to `(velocity, gripper logits)`; the logits of the last call
/// are returned with the final chunk.
pub fn euler_integrate<F>(a0: Vec<f64>, steps: usize, mut field: F) -> Result<(Vec<f64>, Vec<f64>), FlowError>
where
    F: FnMut(&[f64], f64) -> Result<(Vec<f64>, Vec<f64>), FlowError>,
{
    assert!(steps >= 1, "at least one integration step is required");
    let dt = 1.0 / steps as f64;
    let mut a = a0;
    let mut logits = Vec::new();
    for s in 0..steps {
        let (v, l) = field(&a, s as f64 * dt)?;
        if v.len() != a.len() {
            return Err(FlowError::Shape(format!("velocity has {} values, chunk {}", v.len(), a.len())));
        }
        if !v.iter().all(|x| x.is_finite()) {
            return Err(FlowError::NonFinite("velocity"));
        }
        for (x, dv) in a.iter_mut().zip(&v) {
            *x += dv * dt;
        }
        logits = l;
    }
    Ok((a, logits))
}

/// Observation-side inputs of the velocity field.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    /// Index into the model's domain registry.
    pub domain: usize,
    pub views: Vec<Vec<f64>>,
    pub proprio: Vec<f64>,
    pub task_id: usize,
}

impl Conditioning {
    pub fn to_input<T: Real>(&self, a_t: &[f64], t: f64) -> ModelInput<T> {
        let cv = |v: &[f64]| v.iter().map(|x| T::of(*x)).collect::<Vec<T>>();
        ModelInput {
            domain: self.domain,
            views: self.views.iter().map(|v| cv(v)).collect(),
            proprio: cv(&self.proprio),
            task_id: self.task_id,
            a_t: cv(a_t),
            t: T::of(t),
        }
    }
}

/// Normalized chunk and gripper decisions produced by the sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub cont: Vec<f64>,
    pub grip: Vec<u8>,
}

/// Euler generation for many conditionings at once, starting from the
/// given noise blocks. Outputs stay in normalized units.
pub fn generate_batch<T: Real>(
    model: &PolicyModel<T>,
    conds: &[Conditioning],
    noise: Vec<Vec<f64>>,
    steps: usize,
) -> Result<Vec<Generated>, FlowError> {
    assert!(steps >= 1, "at least one integration step is required");
    assert_eq!(conds.len(), noise.len());
    let dt = 1.0 / steps as f64;
    let mut a = noise;
    let mut logits: Vec<Vec<f64>> = vec![Vec::new(); conds.len()];
    for s in 0..steps {
        let t = s as f64 * dt;
        let inputs: Vec<ModelInput<T>> = conds.iter().zip(&a).map(|(c, x)| c.to_input(x, t)).collect();
        let (outs, _) = model.forward_batch(&inputs)?;
        for ((x, o), l) in a.iter_mut().zip(&outs).zip(logits.iter_mut()) {
            for (v, dv) in x.iter_mut().zip(&o.velocity) {
                *v += dv.as_f64() * dt;
            }
            if !x.iter().all(|v| v.is_finite()) {
                return Err(FlowError::NonFinite("velocity"));
            }
            *l = o.logits.iter().map(|z| z.as_f64()).collect();
        }
    }
    Ok(a
        .into_iter()
        .zip(logits)
        .map(|(cont, l)| Generated {
            cont,
            grip: l.iter().map(|z| u8::from(sigmoid(*z) > 0.5)).collect(),
        })
        .collect())
}

/// Samples one action chunk in the domain's native units.
pub fn generate<T: Real, R: Rng + ?Sized>(
    model: &PolicyModel<T>,
    cond: &Conditioning,
    norm: &DomainNorm,
    rng: &mut R,
    steps: usize,
) -> Result<ActionChunk, FlowError> {
    let hw = &model
        .domains
        .get(cond.domain)
        .ok_or_else(|| ModelError::UnknownDomain(format!("#{}", cond.domain)))?
        .hardware;
    let k = model.cfg.chunk_len;
    let a0 = sample_noise(rng, k, hw.cont_dim());
    let mut g = generate_batch(model, core::slice::from_ref(cond), vec![a0], steps)?.remove(0);
    norm.invert(&mut g.cont);
    Ok(ActionChunk::from_flat(&g.cont, &g.grip, k, hw.num_arms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn noise_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = sample_noise(&mut rng, 1000, 1000);
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / x.len() as f64;
        assert!(mean.abs() < 0.01);
        assert!((var - 1.0).abs() < 0.01);
        let a = sample_noise(&mut ChaCha8Rng::seed_from_u64(3), 4, 5);
        let b = sample_noise(&mut ChaCha8Rng::seed_from_u64(3), 4, 5);
        assert_eq!(a, b);
    }

    #[test]
    fn interpolation_and_target() {
        let a0 = [0.3, -1.0];
        let a = [2.0, 4.0];
        assert_eq!(interpolate(&a0, &a, 0.0), a0.to_vec());
        assert_eq!(interpolate(&a0, &a, 1.0), a.to_vec());
        assert_eq!(interpolate(&[0.0, 0.0], &a, 0.5), vec![1.0, 2.0]);
        assert_eq!(target_velocity(&a, &a), vec![0.0, 0.0]);
        assert_eq!(target_velocity(&[0.0, 0.0], &[1.0, 2.0]), vec![1.0, 2.0]);
    }

    #[test]
    fn loss_examples() {
        let l = fm_loss(&[1.0, 2.0], &[1.0, 2.0], &[20.0, -20.0], &[1.0, 0.0], LAMBDA_BCE).unwrap();
        assert!(l.total < 1e-8);
        let l = fm_loss(&[0.0, 0.0], &[1.0, 1.0], &[], &[], LAMBDA_BCE).unwrap();
        assert_eq!(l.mse, 1.0);
        let l = fm_loss(&[], &[], &[0.0, 0.0], &[1.0, 1.0], 1.0).unwrap();
        assert!((l.bce - core::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(fm_loss(&[], &[], &[0.0], &[0.5], 1.0), Err(FlowError::NonBinaryLabel(0.5)));
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let p = [0.3, -0.2, 1.5];
        let t = [0.1, 0.4, -1.0];
        let z = [0.7, -2.0];
        let y = [1.0, 0.0];
        let g = fm_loss_grad(&p, &t, &z, &y, 0.3).unwrap();
        let eps = 1e-6;
        for i in 0..3 {
            let mut a = p;
            let mut b = p;
            a[i] += eps;
            b[i] -= eps;
            let fd = (fm_loss(&a, &t, &z, &y, 0.3).unwrap().total - fm_loss(&b, &t, &z, &y, 0.3).unwrap().total) / (2.0 * eps);
            assert!((fd - g.d_pred[i]).abs() < 1e-8);
        }
        for i in 0..2 {
            let mut a = z;
            let mut b = z;
            a[i] += eps;
            b[i] -= eps;
            let fd = (fm_loss(&p, &t, &a, &y, 0.3).unwrap().total - fm_loss(&p, &t, &b, &y, 0.3).unwrap().total) / (2.0 * eps);
            assert!((fd - g.d_logits[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_loss_for_exact_target_at_any_t() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = sample_noise(&mut rng, 3, 4);
        let a0 = sample_noise(&mut rng, 3, 4);
        for t in [0.0, 0.3, 0.99] {
            let _ = interpolate(&a0, &a, t);
            let v = target_velocity(&a0, &a);
            assert_eq!(fm_loss(&v, &target_velocity(&a0, &a), &[], &[], LAMBDA_BCE).unwrap().total, 0.0);
        }
    }

    #[test]
    fn euler_with_constant_field_telescopes() {
        let a0 = vec![0.5, -1.0];
        let c = [0.25, 2.0];
        let mut prev = None;
        for s in [1, 2, 7, 10] {
            let (a, _) = euler_integrate(a0.clone(), s, |_, _| Ok((c.to_vec(), vec![]))).unwrap();
            assert!((a[0] - 0.75).abs() < 1e-12 && (a[1] - 1.0).abs() < 1e-12);
            if let Some(p) = prev.replace(a.clone()) {
                let p: Vec<f64> = p;
                assert!(p.iter().zip(&a).all(|(x, y)| (x - y).abs() < 1e-12));
            }
        }
        let (a, _) = euler_integrate(a0.clone(), 1, |x, t| Ok((x.iter().map(|v| v * 3.0 + t).collect(), vec![]))).unwrap();
        assert_eq!(a, vec![0.5 + 1.5, -1.0 - 3.0]);
    }

    #[test]
    fn linear_target_field_recovers_the_data_point() {
        // With a single data point A the exact field is (A - x) / (1 - t).
        let a = [0.7, -1.3];
        let a0 = vec![2.0, 0.1];
        for s in [1, 4, 10] {
            let (out, _) = euler_integrate(a0.clone(), s, |x, t| Ok((x.iter().zip(&a).map(|(xi, ai)| (ai - xi) / (1.0 - t)).collect(), vec![]))).unwrap();
            assert!((out[0] - a[0]).abs() < 1e-12 && (out[1] - a[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_velocity_is_an_error() {
        let r = euler_integrate(vec![0.0], 3, |_, _| Ok((vec![f64::NAN], vec![])));
        assert_eq!(r, Err(FlowError::NonFinite("velocity")));
    }

    #[test]
    fn gripper_decision_follows_logit_sign() {
        for z in [-5.0, -0.1, 0.1, 3.0] {
            for scale in [0.5, 1.0, 10.0] {
                assert_eq!(sigmoid(z * scale) > 0.5, z > 0.0);
            }
        }
    }
}
