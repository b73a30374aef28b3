use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::{DataError, DomainDataset};

pub const STD_FLOOR: f64 = 1e-6;

/// Mean and (population) standard deviation of each continuous action dim.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DomainNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl DomainNorm {
    /// Identity transform over `dim` values.
    pub fn identity(dim: usize) -> Self {
        DomainNorm {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn from_samples<'a, I>(samples: I, dim: usize) -> Result<Self, DataError>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut n = 0usize;
        let mut sum = vec![0.0; dim];
        let mut rows: Vec<&[f64]> = Vec::new();
        for s in samples {
            if s.len() != dim {
                return Err(DataError::Stats(format!("sample has dim {}, expected {dim}", s.len())));
            }
            for (acc, v) in sum.iter_mut().zip(s) {
                *acc += v;
            }
            rows.push(s);
            n += 1;
        }
        if n < 2 {
            return Err(DataError::Stats(format!("need at least 2 samples, got {n}")));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let mut var = vec![0.0; dim];
        for s in rows {
            for ((acc, v), m) in var.iter_mut().zip(s).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        let std = var
            .iter()
            .map(|v| libm::sqrt(v / n as f64).max(STD_FLOOR))
            .collect();
        Ok(DomainNorm { mean, std })
    }

    /// Normalizes a row-major block whose rows have this norm's width.
    pub fn apply(&self, x: &mut [f64]) {
        let d = self.mean.len();
        for (i, v) in x.iter_mut().enumerate() {
            *v = (*v - self.mean[i % d]) / self.std[i % d];
        }
    }

    pub fn invert(&self, x: &mut [f64]) {
        let d = self.mean.len();
        for (i, v) in x.iter_mut().enumerate() {
            *v = *v * self.std[i % d] + self.mean[i % d];
        }
    }
}

/// Per-domain continuous-action statistics. Gripper dims are never included.
#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NormStats {
    pub domains: BTreeMap<String, DomainNorm>,
}

impl NormStats {
    pub fn get(&self, domain: &str) -> Option<&DomainNorm> {
        self.domains.get(domain)
    }
}

/// Statistics over every aligned step of every episode, per domain.
pub fn compute_norm_stats(datasets: &[DomainDataset]) -> Result<NormStats, DataError> {
    let mut out = NormStats::default();
    for ds in datasets {
        let dim = ds.hardware.cont_dim();
        let rows: Vec<Vec<f64>> = ds
            .episodes
            .iter()
            .flat_map(|e| e.steps.iter())
            .filter_map(|s| s.action.as_ref().map(|a| a.continuous()))
            .collect();
        if rows.is_empty() {
            return Err(DataError::Stats(format!(
                "domain `{}` has no aligned samples",
                ds.hardware.domain_id
            )));
        }
        let norm = DomainNorm::from_samples(rows.iter().map(|r| r.as_slice()), dim)
            .map_err(|e| DataError::Stats(format!("domain `{}`: {e}", ds.hardware.domain_id)))?;
        out.domains.insert(ds.hardware.domain_id.clone(), norm);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_data_floors_std() {
        let rows = [[3.0], [3.0], [3.0]];
        let n = DomainNorm::from_samples(rows.iter().map(|r| r.as_slice()), 1).unwrap();
        assert_eq!(n.std[0], STD_FLOOR);
        let mut x = [3.0];
        n.apply(&mut x);
        assert_eq!(x[0], 0.0);
    }

    #[test]
    fn two_point_population_std() {
        let rows = [[0.0], [2.0]];
        let n = DomainNorm::from_samples(rows.iter().map(|r| r.as_slice()), 1).unwrap();
        assert_eq!((n.mean[0], n.std[0]), (1.0, 1.0));
        let mut x = [0.0, 2.0];
        n.apply(&mut x);
        assert_eq!(x, [-1.0, 1.0]);
    }

    #[test]
    fn too_few_samples_is_error() {
        let rows = [[1.0]];
        assert!(DomainNorm::from_samples(rows.iter().map(|r| r.as_slice()), 1).is_err());
        let none: [[f64; 1]; 0] = [];
        assert!(DomainNorm::from_samples(none.iter().map(|r| r.as_slice()), 1).is_err());
    }

    #[test]
    fn gripper_dims_are_untouched() {
        use crate::dataset::{ActionChunk, AlignedAction, ArmAction};
        use crate::geometry::Rot6D;
        let a = AlignedAction {
            arms: vec![ArmAction {
                xyz: [1.0, 2.0, 3.0],
                rot6d: Rot6D { v: [1., 0., 0., 0., 1., 0.] },
                gripper: 1,
            }],
        };
        let chunk = ActionChunk { anchors: vec![a.clone(), a] };
        let norm = DomainNorm {
            mean: vec![5.0; 9],
            std: vec![2.0; 9],
        };
        let mut cont = chunk.continuous();
        norm.apply(&mut cont);
        assert_eq!(chunk.grippers(), vec![1, 1]);
        assert_eq!(cont[0], -2.0);
    }

    proptest! {
        #[test]
        fn apply_then_invert_round_trips(
            rows in proptest::collection::vec(proptest::array::uniform3(-50.0f64..50.0), 2..20),
            x in proptest::array::uniform3(-100.0f64..100.0),
        ) {
            let n = DomainNorm::from_samples(rows.iter().map(|r| r.as_slice()), 3).unwrap();
            let mut y = x;
            n.apply(&mut y);
            n.invert(&mut y);
            for (a, b) in y.iter().zip(x) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
