use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::real::Real;

pub type ParamId = usize;

/// Learning-rate group of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum ParamGroup {
    Prompt,
    /// Observation encoders and embedding tables.
    Encoder,
    Rest,
}

/// Who a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Owner {
    Shared,
    /// Index into the model's domain registry.
    Domain(usize),
    /// Low-rank adapter attached to a shared weight.
    Adapter,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ParamInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub group: ParamGroup,
    pub decay: bool,
    pub owner: Owner,
}

impl ParamInfo {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// How a freshly created tensor is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal(0, std) truncated at two standard deviations.
    TruncNormal(f64),
    Normal(f64),
}

/// Flat list of named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    pub infos: Vec<ParamInfo>,
    pub data: Vec<Vec<T>>,
}

impl<T> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            infos: Vec::new(),
            data: Vec::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn add<R: Rng + ?Sized>(
        &mut self,
        name: String,
        rows: usize,
        cols: usize,
        group: ParamGroup,
        decay: bool,
        owner: Owner,
        init: Init,
        rng: &mut R,
    ) -> ParamId {
        let n = rows * cols;
        let data: Vec<T> = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::Normal(std) => (0..n)
                .map(|_| {
                    let z: f64 = rng.sample(StandardNormal);
                    T::of(std * z)
                })
                .collect(),
            Init::TruncNormal(std) => (0..n)
                .map(|_| loop {
                    let z: f64 = rng.sample(StandardNormal);
                    if z.abs() <= 2.0 {
                        break T::of(std * z);
                    }
                })
                .collect(),
        };
        self.infos.push(ParamInfo {
            name,
            rows,
            cols,
            group,
            decay,
            owner,
        });
        self.data.push(data);
        self.data.len() - 1
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.data[id]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.infos.iter().position(|i| i.name == name)
    }

    pub fn numel(&self) -> usize {
        self.infos.iter().map(|i| i.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            infos: self.infos.clone(),
            data: self
                .data
                .iter()
                .map(|v| v.iter().map(|x| U::of(x.as_f64())).collect())
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().flatten().all(|x| x.is_finite())
    }
}

/// Gradient buffers aligned with a [`ParamStore`]. Tensors whose `active`
/// flag is off are skipped by the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T> {
    pub data: Vec<Vec<T>>,
    pub active: Vec<bool>,
}

impl<T: Real> Grads<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Grads {
            data: store.data.iter().map(|v| vec![T::zero(); v.len()]).collect(),
            active: vec![true; store.len()],
        }
    }

    pub fn with_mask(store: &ParamStore<T>, active: Vec<bool>) -> Self {
        assert_eq!(active.len(), store.len());
        let mut g = Self::zeros_like(store);
        g.active = active;
        g
    }

    pub fn zero(&mut self) {
        for v in &mut self.data {
            v.iter_mut().for_each(|x| *x = T::zero());
        }
    }

    #[inline]
    pub fn wants(&self, id: ParamId) -> bool {
        self.active[id]
    }

    pub fn slot(&mut self, id: ParamId) -> Option<&mut [T]> {
        if self.active[id] {
            Some(&mut self.data[id])
        } else {
            None
        }
    }

    pub fn global_norm(&self) -> f64 {
        libm::sqrt(
            self.data
                .iter()
                .zip(&self.active)
                .filter(|(_, a)| **a)
                .flat_map(|(v, _)| v.iter())
                .map(|x| {
                    let f = x.as_f64();
                    f * f
                })
                .sum(),
        )
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.data {
            v.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn add_assign(&mut self, other: &Grads<T>) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }
}
