use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DataError, DomainDataset};

/// Sampling weight per data source.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MixtureSpec {
    pub entries: Vec<(String, f64)>,
}

impl MixtureSpec {
    pub fn new(entries: Vec<(String, f64)>) -> Result<Self, DataError> {
        let spec = MixtureSpec { entries };
        spec.validate()?;
        Ok(spec)
    }

    /// Equal weights over the given domains.
    pub fn uniform<S: AsRef<str>>(domains: &[S]) -> Result<Self, DataError> {
        let w = 1.0 / domains.len() as f64;
        let mut entries: Vec<(String, f64)> = domains.iter().map(|d| (String::from(d.as_ref()), w)).collect();
        // Absorb rounding so the weights sum to 1 within tolerance.
        let total: f64 = entries.iter().map(|e| e.1).sum();
        if let Some(last) = entries.last_mut() {
            last.1 += 1.0 - total;
        }
        Self::new(entries)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.entries.is_empty() {
            return Err(DataError::Config("mixture has no entries".into()));
        }
        for (i, (d, w)) in self.entries.iter().enumerate() {
            if !(*w > 0.0 && *w <= 1.0) {
                return Err(DataError::Config(format!("weight of `{d}` must lie in (0, 1], got {w}")));
            }
            if self.entries[..i].iter().any(|(o, _)| o == d) {
                return Err(DataError::Config(format!("domain `{d}` listed twice")));
            }
        }
        let total: f64 = self.entries.iter().map(|e| e.1).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(DataError::Config(format!("weights sum to {total}, expected 1")));
        }
        Ok(())
    }
}

/// One sampled training example location.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Draw {
    /// Index into the mixture's entries.
    pub entry: usize,
    /// Index into the `datasets` slice handed to the sampler.
    pub dataset: usize,
    pub episode: usize,
    pub step: usize,
}

/// i.i.d. weighted domain draws, then a uniform episode, then a uniform
/// start step.
#[derive(Debug, Clone)]
pub struct MixtureSampler {
    dataset_of_entry: Vec<usize>,
    episode_lens: Vec<Vec<usize>>,
    weights: WeightedIndex<f64>,
    rng: ChaCha8Rng,
}

impl MixtureSampler {
    pub fn new(mix: &MixtureSpec, datasets: &[DomainDataset], seed: u64) -> Result<Self, DataError> {
        Self::with_rng(mix, datasets, ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn with_rng(mix: &MixtureSpec, datasets: &[DomainDataset], rng: ChaCha8Rng) -> Result<Self, DataError> {
        mix.validate()?;
        let mut dataset_of_entry = Vec::with_capacity(mix.entries.len());
        let mut episode_lens = Vec::with_capacity(mix.entries.len());
        for (domain, _) in &mix.entries {
            let idx = datasets
                .iter()
                .position(|d| &d.hardware.domain_id == domain)
                .ok_or_else(|| DataError::Config(format!("no dataset for mixture domain `{domain}`")))?;
            let lens: Vec<usize> = datasets[idx].episodes.iter().map(|e| e.steps.len()).collect();
            if lens.is_empty() || lens.contains(&0) {
                return Err(DataError::Config(format!("dataset for `{domain}` has no usable episodes")));
            }
            dataset_of_entry.push(idx);
            episode_lens.push(lens);
        }
        let weights = WeightedIndex::new(mix.entries.iter().map(|e| e.1))
            .map_err(|e| DataError::Config(format!("invalid weights: {e}")))?;
        Ok(MixtureSampler {
            dataset_of_entry,
            episode_lens,
            weights,
            rng,
        })
    }

    pub fn draw(&mut self) -> Draw {
        let entry = self.weights.sample(&mut self.rng);
        let lens = &self.episode_lens[entry];
        let episode = self.rng.random_range(0..lens.len());
        let step = self.rng.random_range(0..lens[episode]);
        Draw {
            entry,
            dataset: self.dataset_of_entry[entry],
            episode,
            step,
        }
    }

    pub fn draw_batch(&mut self, n: usize) -> Vec<Draw> {
        (0..n).map(|_| self.draw()).collect()
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }
}

impl Iterator for MixtureSampler {
    type Item = Draw;

    fn next(&mut self) -> Option<Draw> {
        Some(self.draw())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Episode, EpisodeMeta, HardwareConfig, Step};
    use alloc::string::ToString;
    use alloc::vec;

    fn dataset(id: &str, episodes: usize, len: usize) -> DomainDataset {
        DomainDataset {
            hardware: HardwareConfig {
                domain_id: id.to_string(),
                embodiment_name: id.to_string(),
                num_arms: 1,
                dof: 2,
                proprio_dim: 0,
                control_freq_hz: 30.0,
                views: vec!["top".into()],
                view_dims: vec![0],
                description_text: String::new(),
            },
            episodes: (0..episodes)
                .map(|_| Episode {
                    domain_id: id.to_string(),
                    steps: (0..len)
                        .map(|_| Step {
                            obs: vec![vec![]],
                            proprio: vec![],
                            task_id: 0,
                            raw_action: vec![],
                            action: None,
                        })
                        .collect(),
                    meta: EpisodeMeta::default(),
                })
                .collect(),
        }
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(MixtureSpec::new(vec![("a".into(), 0.5), ("b".into(), 0.4)]).is_err());
        assert!(MixtureSpec::new(vec![("a".into(), 0.5), ("a".into(), 0.5)]).is_err());
        assert!(MixtureSpec::new(vec![("a".into(), 0.0), ("b".into(), 1.0)]).is_err());
        assert!(MixtureSpec::new(vec![]).is_err());
    }

    #[test]
    fn missing_dataset_is_config_error() {
        let mix = MixtureSpec::new(vec![("a".into(), 0.5), ("b".into(), 0.5)]).unwrap();
        let err = MixtureSampler::new(&mix, &[dataset("a", 1, 3)], 0).unwrap_err();
        assert!(matches!(err, DataError::Config(_)));
    }

    #[test]
    fn single_domain_always_drawn() {
        let mix = MixtureSpec::new(vec![("b".into(), 1.0)]).unwrap();
        let data = [dataset("a", 2, 3), dataset("b", 3, 5)];
        let mut s = MixtureSampler::new(&mix, &data, 7).unwrap();
        for d in s.draw_batch(1000) {
            assert_eq!(d.dataset, 1);
            assert!(d.episode < 3 && d.step < 5);
        }
    }

    #[test]
    fn same_seed_same_sequence() {
        let mix = MixtureSpec::uniform(&["a", "b"]).unwrap();
        let data = [dataset("a", 4, 9), dataset("b", 3, 5)];
        let a = MixtureSampler::new(&mix, &data, 11).unwrap().draw_batch(500);
        let b = MixtureSampler::new(&mix, &data, 11).unwrap().draw_batch(500);
        let c = MixtureSampler::new(&mix, &data, 12).unwrap().draw_batch(500);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn balanced_pair_passes_chi_square() {
        let mix = MixtureSpec::uniform(&["a", "b"]).unwrap();
        let data = [dataset("a", 1, 2), dataset("b", 1, 2)];
        let mut s = MixtureSampler::new(&mix, &data, 3).unwrap();
        let n = 100_000;
        let a = s.draw_batch(n).iter().filter(|d| d.entry == 0).count() as f64;
        let e = n as f64 / 2.0;
        let chi2 = (a - e).powi(2) / e + ((n as f64 - a) - e).powi(2) / e;
        // 0.999 quantile of chi-square with one degree of freedom.
        assert!(chi2 < 10.828, "chi2 = {chi2}");
    }

    #[test]
    fn batches_cover_expected_number_of_domains() {
        // E[distinct] >= D * (1 - (1 - w_min)^B), averaged over seeds.
        let ids = ["a", "b", "c", "d"];
        let mix = MixtureSpec::new(vec![
            ("a".into(), 0.55),
            ("b".into(), 0.25),
            ("c".into(), 0.15),
            ("d".into(), 0.05),
        ])
        .unwrap();
        let data: Vec<DomainDataset> = ids.iter().map(|i| dataset(i, 1, 2)).collect();
        let b = 16;
        let bound = 4.0 * (1.0 - (1.0f64 - 0.05).powi(b as i32));
        let mut total = 0.0;
        let seeds = 400;
        for seed in 0..seeds {
            let mut s = MixtureSampler::new(&mix, &data, seed).unwrap();
            let mut seen = [false; 4];
            for d in s.draw_batch(b) {
                seen[d.entry] = true;
            }
            total += seen.iter().filter(|x| **x).count() as f64;
        }
        assert!(total / seeds as f64 >= bound, "{} < {bound}", total / seeds as f64);
    }
}
