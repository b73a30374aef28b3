//! Experiment pipelines shared by the command line and the acceptance
//! suite: data generation, pretraining, ablations, adaptation, rollouts and
//! prompt analysis.

use std::path::{Path, PathBuf};

use embodiflow_core::adapt::{self, AdaptData, AdaptError, AdaptMode, AdaptOutcome};
use embodiflow_core::analysis::{cluster_report, AnalysisError, ClusterReport, SUITE_VIEW_PAIR};
use embodiflow_core::dataset::{compute_norm_stats, DataError, DomainDataset, DomainNorm, MixtureSpec, NormStats};
use embodiflow_core::model::{ModelError, PolicyModel, Variant};
use embodiflow_core::synthenv::{demo_dataset, held_out_embodiment, make_suite, suite_mixture, Embodiment, ExpertConfig, SimError};
use embodiflow_core::trainer::{split_holdout, strided_samples, validate, AdamW, MetricRow, TrainError, TrainState, Trainer, ValReport, ValSet};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, LoadOptions};
use crate::config::{ConfigError, ExperimentConfig};
use crate::episodes::{load_episodes, save_episodes, EpisodeFileError};
use crate::tables;

/// Error classes with fixed process exit codes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Config(_) => 2,
            Error::Data(_) => 3,
            Error::Numeric(_) => 4,
        }
    }
}

impl From<ConfigError> for Error {
    fn from(e: ConfigError) -> Self {
        Error::Config(e.to_string())
    }
}

impl From<EpisodeFileError> for Error {
    fn from(e: EpisodeFileError) -> Self {
        Error::Data(e.to_string())
    }
}

impl From<CheckpointError> for Error {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::ConfigMismatch { .. } | CheckpointError::NeedsMigration { .. } => Error::Config(e.to_string()),
            _ => Error::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for Error {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => Error::Numeric(e.to_string()),
            TrainError::Config(_) | TrainError::Model(_) => Error::Config(e.to_string()),
            TrainError::Data(_) | TrainError::Flow(_) => Error::Data(e.to_string()),
        }
    }
}

impl From<AdaptError> for Error {
    fn from(e: AdaptError) -> Self {
        match e {
            AdaptError::Train(t) => t.into(),
            other => Error::Config(other.to_string()),
        }
    }
}

impl From<ModelError> for Error {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::NonFinite { .. } => Error::Numeric(e.to_string()),
            _ => Error::Config(e.to_string()),
        }
    }
}

impl From<DataError> for Error {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Config(_) => Error::Config(e.to_string()),
            _ => Error::Data(e.to_string()),
        }
    }
}

impl From<SimError> for Error {
    fn from(e: SimError) -> Self {
        Error::Data(e.to_string())
    }
}

impl From<AnalysisError> for Error {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::MissingPair(_) => Error::Config(e.to_string()),
            _ => Error::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Data(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Data(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Data(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Suite description written by `gen-suite`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteManifest {
    pub seed: u64,
    pub domains: Vec<Embodiment>,
    pub held_out: Embodiment,
    pub mixture: MixtureSpec,
}

impl SuiteManifest {
    pub fn new(seed: u64) -> Result<Self> {
        let domains = make_suite(seed);
        let mixture = suite_mixture(&domains)?;
        Ok(SuiteManifest {
            seed,
            domains,
            held_out: held_out_embodiment(seed),
            mixture,
        })
    }

    pub fn all(&self) -> impl Iterator<Item = &Embodiment> {
        self.domains.iter().chain(std::iter::once(&self.held_out))
    }

    pub fn find(&self, domain_id: &str) -> Option<&Embodiment> {
        self.all().find(|e| e.hardware.domain_id == domain_id)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Train/validation splits of the pretraining domains, normalized with
/// statistics of the training split.
#[derive(Debug, Clone)]
pub struct SuiteData {
    pub manifest: SuiteManifest,
    pub train: Vec<DomainDataset>,
    pub val: Vec<DomainDataset>,
    pub norms: NormStats,
}

impl SuiteData {
    pub fn norm(&self, domain: &str) -> Result<&DomainNorm> {
        self.norms.get(domain).ok_or_else(|| Error::Data(format!("no statistics for `{domain}`")))
    }
}

/// `train + val` demonstrations of one embodiment, split at the end.
pub fn domain_data(e: &Embodiment, train: usize, val: usize, seed: u64) -> Result<(DomainDataset, DomainDataset)> {
    let ds = demo_dataset(e, train + val, seed, &ExpertConfig::default())?;
    Ok(split_holdout(&ds, val))
}

pub fn generate_suite_data(cfg: &ExperimentConfig) -> Result<SuiteData> {
    let manifest = SuiteManifest::new(cfg.suite_seed)?;
    let mut train = Vec::new();
    let mut val = Vec::new();
    for e in &manifest.domains {
        let (t, v) = domain_data(e, cfg.episodes_per_domain, cfg.val_episodes, cfg.data_seed)?;
        train.push(t);
        val.push(v);
    }
    let norms = compute_norm_stats(&train)?;
    Ok(SuiteData { manifest, train, val, norms })
}

/// Reads `<domain_id>.jsonl` for each suite domain from `dir` and splits
/// off `cfg.val_episodes` per domain.
pub fn load_suite_data(cfg: &ExperimentConfig, dir: &Path) -> Result<SuiteData> {
    let manifest_path = dir.join("manifest.json");
    let manifest = if manifest_path.exists() {
        SuiteManifest::load(&manifest_path)?
    } else {
        SuiteManifest::new(cfg.suite_seed)?
    };
    let mut train = Vec::new();
    let mut val = Vec::new();
    for e in &manifest.domains {
        let ds = load_episodes(&dir.join(format!("{}.jsonl", e.hardware.domain_id)))?;
        if ds.hardware != e.hardware {
            return Err(Error::Data(format!("episode file for `{}` does not match the manifest", e.hardware.domain_id)));
        }
        let (t, v) = split_holdout(&ds, cfg.val_episodes);
        train.push(t);
        val.push(v);
    }
    let norms = compute_norm_stats(&train)?;
    Ok(SuiteData { manifest, train, val, norms })
}

pub fn write_suite_data(dir: &Path, manifest: &SuiteManifest, sets: &[DomainDataset]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(manifest)?)?;
    for ds in sets {
        save_episodes(&dir.join(format!("{}.jsonl", ds.hardware.domain_id)), ds)?;
    }
    Ok(())
}

pub fn valsets(model: &PolicyModel<f32>, data: &SuiteData, cfg: &ExperimentConfig) -> Result<Vec<ValSet>> {
    data.val
        .iter()
        .map(|v| {
            let id = &v.hardware.domain_id;
            Ok(ValSet {
                name: id.clone(),
                samples: strided_samples(v, model.domain_index(id)?, data.norm(id)?, cfg.chunk, cfg.val_stride),
            })
        })
        .collect()
}

pub fn mixture(cfg: &ExperimentConfig, data: &SuiteData) -> Result<MixtureSpec> {
    if cfg.mixture.is_empty() {
        Ok(data.manifest.mixture.clone())
    } else {
        Ok(MixtureSpec::new(cfg.mixture.clone())?)
    }
}

pub struct PretrainRun {
    pub ckpt: Checkpoint,
    pub history: Vec<MetricRow>,
}

/// Trains from scratch, or continues `resume` up to `cfg.optim.iters`.
pub fn pretrain(cfg: &ExperimentConfig, data: &SuiteData, resume: Option<Checkpoint>) -> Result<PretrainRun> {
    let mix = mixture(cfg, data)?;
    let hws: Vec<_> = data.train.iter().map(|d| d.hardware.clone()).collect();
    let (model, opt, state) = match resume {
        Some(c) => {
            let opt = c.opt.unwrap_or_else(|| AdamW::new(&c.model.params));
            (c.model, opt, c.state.unwrap_or_else(|| TrainState::fresh(cfg.seed)))
        }
        None => {
            let m = PolicyModel::<f32>::init(&cfg.model, &hws, cfg.seed)?;
            let o = AdamW::new(&m.params);
            (m, o, TrainState::fresh(cfg.seed))
        }
    };
    let vs = valsets(&model, data, cfg)?;
    let norms: Vec<DomainNorm> = data.train.iter().map(|d| data.norm(&d.hardware.domain_id).cloned()).collect::<Result<_>>()?;
    let mut tr = Trainer::new(model, opt, cfg.optim.clone(), state, &mix, &data.train, norms, cfg.chunk)?;
    let mask = tr.all_trainable();
    tr.run(cfg.optim.iters, &vs, &mask, |_| 1.0)?;
    let history = tr.state.history.clone();
    Ok(PretrainRun {
        ckpt: Checkpoint {
            model: tr.model,
            opt: Some(tr.opt),
            optim: Some(cfg.optim.clone()),
            state: Some(tr.state),
            norms: data.norms.clone(),
            suite_seed: Some(cfg.suite_seed),
        },
        history,
    })
}

/// Final `mean` validation row of a run.
pub fn final_mean_l1(history: &[MetricRow]) -> Option<f64> {
    history.iter().rev().find(|r| r.domain == "mean").map(|r| r.val_l1)
}

pub fn write_pretrain_outputs(dir: &Path, cfg: &ExperimentConfig, run: &PretrainRun) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.json"), cfg.to_json())?;
    save_checkpoint(&dir.join("checkpoint.bin"), &run.ckpt)?;
    tables::write_metrics(&dir.join("metrics.csv"), &run.history)?;
    Ok(())
}

/// One ablation cell's file name.
pub fn cell_name(v: Variant, seed: u64) -> String {
    format!("{}_seed{seed}", v.name())
}

/// `variants x seeds` pretraining runs; cell `(v, s)` uses seed
/// `cfg.seed + s`. Each cell's metrics land in `<dir>/<cell>.csv`.
pub fn ablate(cfg: &ExperimentConfig, data: &SuiteData, variants: &[Variant], seeds: u64, dir: &Path) -> Result<Vec<(Variant, u64, f64)>> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.json"), cfg.to_json())?;
    let mut out = Vec::new();
    for &v in variants {
        for s in 0..seeds {
            let mut c = cfg.clone();
            c.model.variant = v;
            c.seed = cfg.seed + s;
            let run = pretrain(&c, data, None)?;
            tables::write_metrics(&dir.join(format!("{}.csv", cell_name(v, s))), &run.history)?;
            out.push((v, s, final_mean_l1(&run.history).unwrap_or(f64::NAN)));
        }
    }
    Ok(out)
}

/// Held-out embodiment data: training episodes, validation episodes and
/// their statistics.
pub struct TargetData {
    pub embodiment: Embodiment,
    pub train: DomainDataset,
    pub val: DomainDataset,
    pub norm: DomainNorm,
}

pub fn target_data(e: &Embodiment, cfg: &ExperimentConfig) -> Result<TargetData> {
    let (train, val) = domain_data(e, cfg.target_episodes, cfg.val_episodes, cfg.data_seed ^ 0x7a26)?;
    target_from_split(e, train, val)
}

/// Target data from a recorded dataset; the last `cfg.val_episodes`
/// episodes are held out.
pub fn target_from_dataset(e: &Embodiment, ds: &DomainDataset, cfg: &ExperimentConfig) -> Result<TargetData> {
    if ds.hardware != e.hardware {
        return Err(Error::Data(format!("episode file for `{}` does not match the manifest", e.hardware.domain_id)));
    }
    if ds.episodes.len() <= cfg.val_episodes {
        return Err(Error::Data(format!(
            "`{}` has {} episodes, need more than the {} held out for validation",
            e.hardware.domain_id,
            ds.episodes.len(),
            cfg.val_episodes
        )));
    }
    let (train, val) = split_holdout(ds, cfg.val_episodes);
    target_from_split(e, train, val)
}

fn target_from_split(e: &Embodiment, train: DomainDataset, val: DomainDataset) -> Result<TargetData> {
    let norm = compute_norm_stats(std::slice::from_ref(&train))?
        .get(&e.hardware.domain_id)
        .cloned()
        .ok_or_else(|| Error::Data("no statistics for the target".into()))?;
    Ok(TargetData {
        embodiment: e.clone(),
        train,
        val,
        norm,
    })
}

impl TargetData {
    pub fn adapt_data(&self, cfg: &ExperimentConfig) -> AdaptData<'_> {
        AdaptData {
            train: &self.train,
            norm: &self.norm,
            val: &self.val,
            chunk: cfg.chunk,
            val_stride: cfg.val_stride,
        }
    }
}

/// Adapts `ckpt` to the target under `mode`; with `rollouts` the success
/// rate is measured at every evaluation point.
pub fn run_adapt(ckpt: &Checkpoint, target: &TargetData, mode: AdaptMode, cfg: &ExperimentConfig, rollouts: bool, resume: bool) -> Result<(AdaptOutcome, Checkpoint)> {
    let e = &target.embodiment;
    let mut score = |m: &PolicyModel<f32>, d: usize| adapt::success_rate(m, d, e, &target.norm, cfg.chunk, &cfg.rollout);
    let hook: Option<adapt::SuccessHook<'_>> = if rollouts { Some(&mut score) } else { None };
    let out = adapt::adapt(ckpt.model.clone(), &target.adapt_data(cfg), mode, &cfg.adapt, &cfg.optim, resume, hook)?;
    let mut norms = ckpt.norms.clone();
    norms.domains.insert(e.hardware.domain_id.clone(), target.norm.clone());
    let adapted = Checkpoint {
        model: out.model.clone(),
        opt: None,
        optim: Some(cfg.optim.clone()),
        state: Some(out.state.clone()),
        norms,
        suite_seed: ckpt.suite_seed,
    };
    Ok((out, adapted))
}

/// Validation of every registered domain that has a file in `dir`.
pub fn validate_dir(ckpt: &Checkpoint, dir: &Path, stride: usize, steps: usize, seed: u64) -> Result<Vec<(String, ValReport)>> {
    let mut files: Vec<PathBuf> = if dir.is_file() {
        vec![dir.to_path_buf()]
    } else {
        std::fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.extension().is_some_and(|x| x == "jsonl")).collect()
    };
    files.sort();
    let mut out = Vec::new();
    for f in files {
        let ds = load_episodes(&f)?;
        let id = ds.hardware.domain_id.clone();
        let Ok(idx) = ckpt.model.domain_index(&id) else { continue };
        let norm = ckpt.norms.get(&id).ok_or_else(|| Error::Data(format!("checkpoint has no statistics for `{id}`")))?;
        let chunk = embodiflow_core::dataset::ChunkSpec {
            anchors: ckpt.model.cfg.chunk_len,
            ..Default::default()
        };
        let samples = strided_samples(&ds, idx, norm, chunk, stride);
        out.push((id, validate(&ckpt.model, &samples, steps, seed)?));
    }
    if out.is_empty() {
        return Err(Error::Data(format!("no episode files in {} match a registered domain", dir.display())));
    }
    Ok(out)
}

pub fn analyze(ckpt: &Checkpoint) -> Result<ClusterReport> {
    Ok(cluster_report(&ckpt.model, SUITE_VIEW_PAIR)?)
}

pub fn load(path: &Path, opts: &LoadOptions) -> Result<Checkpoint> {
    Ok(load_checkpoint(path, opts)?.ckpt)
}
