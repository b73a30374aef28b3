//! `embodiflow` subcommands.
//!
//! Exit codes: 0 success, 1 usage, 2 config, 3 data or IO, 4 numeric
//! failure. Without `--out`, outputs go to `$EMBODIFLOW_OUT/<subcommand>`
//! (default root `runs`).

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use embodiflow_core::adapt::AdaptMode;
use embodiflow_core::model::{Owner, Variant};
use serde::Serialize;

use crate::checkpoint::{load_checkpoint, param_digest, save_checkpoint, Checkpoint, LoadOptions};
use crate::config::ExperimentConfig;
use crate::episodes::load_episodes;
use crate::experiment::{self as ex, Error, Result, SuiteManifest};
use crate::tables;

pub const OUT_ENV: &str = "EMBODIFLOW_OUT";

#[derive(Debug, Parser)]
#[command(name = "embodiflow", version, about = "Cross-embodiment flow-matching policies on a synthetic arm suite")]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Write the suite manifest (hardware of every domain).
    GenSuite {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write scripted demonstrations, one episode file per domain.
    GenData {
        /// Manifest from gen-suite.
        #[arg(long)]
        suite: PathBuf,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain on the suite mixture.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory from gen-data; demonstrations are generated when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue a checkpoint up to the configured iteration count.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain every variant with several seeds.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma separated, e.g. shared_only,domain_heads,lang_prompt,soft_prompt.
        #[arg(long, value_delimiter = ',', default_value = "shared_only,domain_heads,hpt_proj,lang_prompt,soft_prompt")]
        variants: Vec<String>,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Validation l1 of a checkpoint on episode files.
    Validate {
        #[arg(long)]
        ckpt: PathBuf,
        /// An episode file or a directory of them.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 10)]
        stride: usize,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Adapt a pretrained checkpoint to a new embodiment.
    Adapt {
        #[arg(long)]
        ckpt: PathBuf,
        /// Domain id in the suite manifest, usually the held-out embodiment.
        #[arg(long)]
        domain: String,
        /// two_step, peft (= random), copy_nearest or full.
        #[arg(long, default_value = "two_step")]
        mode: String,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Manifest; regenerated from the checkpoint's suite seed when absent.
        #[arg(long)]
        suite: Option<PathBuf>,
        /// Directory holding `<domain>.jsonl`; generated when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Measure closed-loop success at every evaluation point.
        #[arg(long)]
        rollouts: bool,
        /// Continue a checkpoint that already holds the domain.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Closed-loop success rate of a checkpoint on one domain.
    RolloutEval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        domain: String,
        #[arg(long, default_value_t = 50)]
        episodes: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        suite: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Prompt distances, silhouette and the view-pair test.
    AnalyzePrompts {
        #[arg(long)]
        ckpt: PathBuf,
        /// Two domain ids that differ only in camera placement.
        #[arg(long, value_delimiter = ',', num_args = 2)]
        pair: Option<Vec<String>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summary table over every metrics and curve CSV below a directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses and runs; returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn out_dir(explicit: Option<PathBuf>, cfg: Option<&ExperimentConfig>, sub: &str) -> PathBuf {
    if let Some(p) = explicit {
        return p;
    }
    if let Some(root) = std::env::var_os(OUT_ENV) {
        return PathBuf::from(root).join(sub);
    }
    if let Some(d) = cfg.and_then(|c| c.out_dir.as_ref()) {
        return PathBuf::from(d).join(sub);
    }
    PathBuf::from("runs").join(sub)
}

fn config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) if !p.exists() => Err(Error::Data(format!("{}: no such file", p.display()))),
        Some(p) => Ok(ExperimentConfig::load(p)?),
        None => {
            let c = ExperimentConfig::default();
            c.validate()?;
            Ok(c)
        }
    }
}

fn read_ckpt(path: &Path) -> Result<Checkpoint> {
    Ok(load_checkpoint(path, &LoadOptions::default())?.ckpt)
}

/// Saves and reads back, so a zero exit means the file is loadable.
fn write_ckpt(path: &Path, ck: &Checkpoint) -> Result<()> {
    save_checkpoint(path, ck)?;
    read_ckpt(path).map(|_| ())
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(v)?)?;
    Ok(())
}

fn manifest(path: Option<&Path>, ck: &Checkpoint, cfg: &ExperimentConfig) -> Result<SuiteManifest> {
    match path {
        Some(p) => SuiteManifest::load(p),
        None => SuiteManifest::new(ck.suite_seed.unwrap_or(cfg.suite_seed)),
    }
}

fn suite_data(cfg: &ExperimentConfig, data: Option<&Path>) -> Result<ex::SuiteData> {
    match data {
        Some(d) => ex::load_suite_data(cfg, d),
        None => ex::generate_suite_data(cfg),
    }
}

pub fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenSuite { seed, out } => {
            let dir = out_dir(out, None, "suite");
            std::fs::create_dir_all(&dir)?;
            let m = SuiteManifest::new(seed)?;
            write_json(&dir.join("manifest.json"), &m)?;
            println!("{}", dir.join("manifest.json").display());
        }
        Cmd::GenData { suite, episodes, seed, out } => {
            if episodes == 0 {
                return Err(Error::Usage("--episodes must be at least 1".into()));
            }
            let m = SuiteManifest::load(&suite)?;
            let dir = out_dir(out, None, "data");
            let mut sets = Vec::new();
            for e in m.all() {
                sets.push(embodiflow_core::synthenv::demo_dataset(e, episodes, seed, &Default::default())?);
            }
            ex::write_suite_data(&dir, &m, &sets)?;
            for ds in &sets {
                load_episodes(&dir.join(format!("{}.jsonl", ds.hardware.domain_id)))?;
            }
            println!("{} domains x {episodes} episodes in {}", sets.len(), dir.display());
        }
        Cmd::Pretrain { config: c, data, resume, out } => {
            let cfg = config(c.as_deref())?;
            let dir = out_dir(out, Some(&cfg), "pretrain");
            let sd = suite_data(&cfg, data.as_deref())?;
            let prev = match resume {
                Some(p) => Some(
                    load_checkpoint(
                        &p,
                        &LoadOptions {
                            expect: Some(cfg.model.clone()),
                            ..Default::default()
                        },
                    )?
                    .ckpt,
                ),
                None => None,
            };
            let run = ex::pretrain(&cfg, &sd, prev)?;
            ex::write_pretrain_outputs(&dir, &cfg, &run)?;
            read_ckpt(&dir.join("checkpoint.bin"))?;
            tables::read_metrics(&dir.join("metrics.csv"))?;
            match ex::final_mean_l1(&run.history) {
                Some(l1) => println!("final mean val l1 {l1:.6}"),
                None => println!("no evaluation rows"),
            }
        }
        Cmd::Ablate { config: c, variants, seeds, data, out } => {
            let cfg = config(c.as_deref())?;
            let vs: Vec<Variant> = variants
                .iter()
                .map(|v| Variant::parse(v).ok_or_else(|| Error::Usage(format!("unknown variant `{v}`"))))
                .collect::<Result<_>>()?;
            if vs.is_empty() || seeds == 0 {
                return Err(Error::Usage("need at least one variant and one seed".into()));
            }
            let dir = out_dir(out, Some(&cfg), "ablate");
            let sd = suite_data(&cfg, data.as_deref())?;
            let cells = ex::ablate(&cfg, &sd, &vs, seeds, &dir)?;
            for (v, s, l1) in cells {
                println!("{} seed {s}: {l1:.6}", v.name());
            }
        }
        Cmd::Validate {
            ckpt,
            data,
            stride,
            steps,
            seed,
            out,
        } => {
            if stride == 0 || steps == 0 {
                return Err(Error::Usage("--stride and --steps must be at least 1".into()));
            }
            let ck = read_ckpt(&ckpt)?;
            let reports = ex::validate_dir(&ck, &data, stride, steps, seed)?;
            let dir = out_dir(out, None, "validate");
            std::fs::create_dir_all(&dir)?;
            #[derive(Serialize)]
            struct Row<'a> {
                domain: &'a str,
                val_l1: f64,
                val_l1_cont: f64,
                samples: usize,
            }
            let rows: Vec<Row> = reports
                .iter()
                .map(|(d, r)| Row {
                    domain: d,
                    val_l1: r.l1,
                    val_l1_cont: r.l1_cont,
                    samples: r.samples,
                })
                .collect();
            for r in &rows {
                println!("{} {:.6}", r.domain, r.val_l1);
            }
            tables::write_rows(std::fs::File::create(dir.join("validation.csv"))?, &["domain", "val_l1", "val_l1_cont", "samples"], &rows)?;
        }
        Cmd::Adapt {
            ckpt,
            domain,
            mode,
            config: c,
            suite,
            data,
            rollouts,
            resume,
            out,
        } => {
            let mode = AdaptMode::parse(&mode).ok_or_else(|| Error::Usage(format!("unknown mode `{mode}`")))?;
            let cfg = config(c.as_deref())?;
            let ck = read_ckpt(&ckpt)?;
            let m = manifest(suite.as_deref(), &ck, &cfg)?;
            let e = m.find(&domain).ok_or_else(|| Error::Config(format!("`{domain}` is not in the suite manifest")))?;
            let target = match data {
                Some(d) => ex::target_from_dataset(e, &load_episodes(&d.join(format!("{domain}.jsonl")))?, &cfg)?,
                None => ex::target_data(e, &cfg)?,
            };
            let dir = out_dir(out, Some(&cfg), &format!("adapt-{}", mode.name()));
            std::fs::create_dir_all(&dir)?;
            let backbone = |name: &str, o: Owner| o == Owner::Shared && !name.is_empty();
            let before = param_digest(&ck.model, backbone);
            let (outcome, adapted) = ex::run_adapt(&ck, &target, mode, &cfg, rollouts, resume)?;
            let after = param_digest(&adapted.model, backbone);
            std::fs::write(dir.join("config.json"), cfg.to_json())?;
            write_ckpt(&dir.join("checkpoint.bin"), &adapted)?;
            tables::write_curve(&dir.join("curve.csv"), &outcome.curve)?;
            write_json(&dir.join("trainable.json"), &outcome.trainable)?;
            #[derive(Serialize)]
            struct Digests {
                backbone_before: String,
                backbone_after: String,
                nearest: Option<String>,
            }
            write_json(
                &dir.join("digests.json"),
                &Digests {
                    backbone_before: before,
                    backbone_after: after,
                    nearest: outcome.nearest.map(|i| adapted.model.domains[i].id().to_string()),
                },
            )?;
            if let Some(last) = outcome.curve.last() {
                println!("{} iter {} val l1 {:.6}", mode.name(), last.iter, last.val_l1);
            }
        }
        Cmd::RolloutEval {
            ckpt,
            domain,
            episodes,
            config: c,
            suite,
            out,
        } => {
            let mut cfg = config(c.as_deref())?;
            cfg.rollout.episodes = episodes;
            let ck = read_ckpt(&ckpt)?;
            let m = manifest(suite.as_deref(), &ck, &cfg)?;
            let e = m.find(&domain).ok_or_else(|| Error::Config(format!("`{domain}` is not in the suite manifest")))?;
            let idx = ck.model.domain_index(&domain)?;
            let norm = ck.norms.get(&domain).ok_or_else(|| Error::Data(format!("checkpoint has no statistics for `{domain}`")))?;
            let chunk = embodiflow_core::dataset::ChunkSpec {
                anchors: ck.model.cfg.chunk_len,
                ..cfg.chunk
            };
            let rate = embodiflow_core::adapt::success_rate(&ck.model, idx, e, norm, chunk, &cfg.rollout);
            let dir = out_dir(out, Some(&cfg), "rollout-eval");
            std::fs::create_dir_all(&dir)?;
            #[derive(Serialize)]
            struct Rollouts<'a> {
                domain: &'a str,
                episodes: usize,
                success_rate: f64,
            }
            write_json(
                &dir.join("rollout.json"),
                &Rollouts {
                    domain: &domain,
                    episodes,
                    success_rate: rate,
                },
            )?;
            println!("{domain} success {rate:.3} over {episodes} episodes");
        }
        Cmd::AnalyzePrompts { ckpt, pair, out } => {
            let ck = read_ckpt(&ckpt)?;
            let report = match &pair {
                Some(p) => embodiflow_core::analysis::cluster_report(&ck.model, (&p[0], &p[1]))?,
                None => ex::analyze(&ck)?,
            };
            let dir = out_dir(out, None, "prompts");
            std::fs::create_dir_all(&dir)?;
            write_json(&dir.join("report.json"), &report)?;
            tables::write_distances(&dir, &report.distances)?;
            match report.silhouette.score() {
                Some(s) => println!("silhouette {s:.4}"),
                None => println!("silhouette not applicable"),
            }
            println!(
                "{} vs {}: {:.4} (median cross {:.4})",
                report.view_pair.pair.0, report.view_pair.pair.1, report.view_pair.paired_distance, report.view_pair.median_cross_distance
            );
        }
        Cmd::Report { dir, out } => {
            let rows = report_rows(&dir)?;
            let target = out.unwrap_or_else(|| dir.clone());
            std::fs::create_dir_all(&target)?;
            tables::write_rows(std::fs::File::create(target.join("summary.csv"))?, &SUMMARY_HEADER, &rows)?;
            println!("{} runs summarized in {}", rows.len(), target.join("summary.csv").display());
        }
    }
    Ok(())
}

pub const SUMMARY_HEADER: [&str; 5] = ["run", "kind", "final_iter", "final_val_l1", "final_success_rate"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub run: String,
    pub kind: String,
    pub final_iter: u64,
    pub final_val_l1: f64,
    pub final_success_rate: Option<f64>,
}

fn csv_files(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for e in std::fs::read_dir(dir)? {
        let p = e?.path();
        if p.is_dir() {
            csv_files(&p, out)?;
        } else if p.extension().is_some_and(|x| x == "csv") {
            out.push(p);
        }
    }
    Ok(())
}

/// Final row of every metrics or curve CSV below `dir`, by header.
pub fn report_rows(dir: &Path) -> Result<Vec<SummaryRow>> {
    if !dir.is_dir() {
        return Err(Error::Data(format!("{}: not a directory", dir.display())));
    }
    let mut files = Vec::new();
    csv_files(dir, &mut files)?;
    files.sort();
    let mut rows = Vec::new();
    for f in files {
        let head = csv::Reader::from_path(&f)?.headers()?.clone();
        let run = f.strip_prefix(dir).unwrap_or(&f).with_extension("").display().to_string();
        if head.iter().eq(tables::METRICS_HEADER.iter().copied()) {
            let m = tables::read_metrics(&f)?;
            if let Some(r) = m.iter().rev().find(|r| r.domain == "mean") {
                rows.push(SummaryRow {
                    run,
                    kind: "pretrain".into(),
                    final_iter: r.iter,
                    final_val_l1: r.val_l1,
                    final_success_rate: None,
                });
            }
        } else if head.iter().eq(tables::CURVE_HEADER.iter().copied()) {
            let c = tables::read_curve(&f)?;
            if let Some(r) = c.last() {
                rows.push(SummaryRow {
                    run,
                    kind: format!("adapt-{}", r.mode),
                    final_iter: r.iter,
                    final_val_l1: r.val_l1,
                    final_success_rate: r.success_rate,
                });
            }
        }
    }
    Ok(rows)
}
