//! Line-delimited episode files.
//!
//! ```text
//! {"kind":"header","schema":"v1","domain_id":..,"freq":..,"dims":{..},"views":[..],..}
//! {"kind":"episode","index":0,"steps":2,"meta":{..}}
//! {"kind":"step","t":0,"task_id":..,"obs":[[..]],"proprio":[..],"raw_action":[..],"action":..}
//! {"kind":"step","t":1,..}
//! ```
//!
//! Reals are written in shortest round-trip form, so finite values load
//! back bitwise.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use embodiflow_core::dataset::{AlignedAction, DomainDataset, Episode, EpisodeMeta, HardwareConfig, Step};
use serde::{Deserialize, Serialize};

pub const SCHEMA: &str = "v1";

#[derive(Debug, thiserror::Error)]
pub enum EpisodeFileError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Format { line: usize, msg: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Dims {
    proprio: usize,
    views: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema: String,
    domain_id: String,
    freq: f64,
    dims: Dims,
    views: Vec<String>,
    embodiment_name: String,
    num_arms: usize,
    dof: usize,
    description_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EpisodeHead {
    index: usize,
    steps: usize,
    meta: EpisodeMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepRecord {
    t: usize,
    task_id: u32,
    obs: Vec<Vec<f64>>,
    proprio: Vec<f64>,
    raw_action: Vec<f64>,
    action: Option<AlignedAction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Record {
    Header(Header),
    Episode(EpisodeHead),
    Step(StepRecord),
}

fn header_of(hw: &HardwareConfig) -> Header {
    Header {
        schema: SCHEMA.into(),
        domain_id: hw.domain_id.clone(),
        freq: hw.control_freq_hz,
        dims: Dims {
            proprio: hw.proprio_dim,
            views: hw.view_dims.clone(),
        },
        views: hw.views.clone(),
        embodiment_name: hw.embodiment_name.clone(),
        num_arms: hw.num_arms,
        dof: hw.dof,
        description_text: hw.description_text.clone(),
    }
}

fn hardware_of(h: Header) -> HardwareConfig {
    HardwareConfig {
        domain_id: h.domain_id,
        embodiment_name: h.embodiment_name,
        num_arms: h.num_arms,
        dof: h.dof,
        proprio_dim: h.dims.proprio,
        control_freq_hz: h.freq,
        views: h.views,
        view_dims: h.dims.views,
        description_text: h.description_text,
    }
}

fn line<W: Write>(w: &mut W, r: &Record) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, r)?;
    w.write_all(b"\n")
}

pub fn write_episodes<W: Write>(mut w: W, ds: &DomainDataset) -> std::io::Result<()> {
    line(&mut w, &Record::Header(header_of(&ds.hardware)))?;
    for (index, ep) in ds.episodes.iter().enumerate() {
        line(
            &mut w,
            &Record::Episode(EpisodeHead {
                index,
                steps: ep.steps.len(),
                meta: ep.meta.clone(),
            }),
        )?;
        for (t, s) in ep.steps.iter().enumerate() {
            line(
                &mut w,
                &Record::Step(StepRecord {
                    t,
                    task_id: s.task_id,
                    obs: s.obs.clone(),
                    proprio: s.proprio.clone(),
                    raw_action: s.raw_action.clone(),
                    action: s.action.clone(),
                }),
            )?;
        }
    }
    w.flush()
}

pub fn read_episodes<R: BufRead>(r: R) -> Result<DomainDataset, EpisodeFileError> {
    let err = |line: usize, msg: String| EpisodeFileError::Format { line, msg };
    let mut hw: Option<HardwareConfig> = None;
    let mut episodes: Vec<Episode> = Vec::new();
    // Steps still owed by the episode currently being read, and where it began.
    let mut owed = 0usize;
    let mut opened_at = 0usize;
    let mut last = 0usize;
    for (i, text) in r.lines().enumerate() {
        let n = i + 1;
        last = n;
        let text = text.map_err(|e| err(n, e.to_string()))?;
        if n == 1 {
            let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| err(n, format!("malformed header: {e}")))?;
            match v.get("schema").and_then(|s| s.as_str()) {
                Some(SCHEMA) => {}
                Some(other) => return Err(err(n, format!("unsupported schema version `{other}`, expected `{SCHEMA}`"))),
                None => return Err(err(n, "header has no schema version".into())),
            }
        }
        let rec: Record = serde_json::from_str(&text).map_err(|e| err(n, format!("malformed record: {e}")))?;
        match (rec, hw.as_ref()) {
            (Record::Header(h), None) => hw = Some(hardware_of(h)),
            (Record::Header(_), Some(_)) => return Err(err(n, "second header record".into())),
            (_, None) => return Err(err(n, "first record must be the header".into())),
            (Record::Episode(e), Some(h)) => {
                if owed > 0 {
                    return Err(err(n, format!("episode starting at line {opened_at} is missing {owed} step(s)")));
                }
                if e.index != episodes.len() {
                    return Err(err(n, format!("episode index {} out of order, expected {}", e.index, episodes.len())));
                }
                owed = e.steps;
                opened_at = n;
                episodes.push(Episode {
                    domain_id: h.domain_id.clone(),
                    steps: Vec::with_capacity(e.steps),
                    meta: e.meta,
                });
            }
            (Record::Step(s), Some(_)) => {
                let Some(ep) = episodes.last_mut().filter(|_| owed > 0) else {
                    return Err(err(n, "step record outside an episode".into()));
                };
                if s.t != ep.steps.len() {
                    return Err(err(n, format!("step index {} out of order, expected {}", s.t, ep.steps.len())));
                }
                ep.steps.push(Step {
                    obs: s.obs,
                    proprio: s.proprio,
                    task_id: s.task_id,
                    raw_action: s.raw_action,
                    action: s.action,
                });
                owed -= 1;
            }
        }
    }
    let Some(hardware) = hw else {
        return Err(err(1, "empty file".into()));
    };
    if owed > 0 {
        return Err(err(last, format!("truncated: episode starting at line {opened_at} is missing {owed} step(s)")));
    }
    Ok(DomainDataset { hardware, episodes })
}

pub fn save_episodes(path: &Path, ds: &DomainDataset) -> Result<(), EpisodeFileError> {
    let io = |source| EpisodeFileError::Io {
        path: path.display().to_string(),
        source,
    };
    let f = File::create(path).map_err(io)?;
    write_episodes(BufWriter::new(f), ds).map_err(io)
}

pub fn load_episodes(path: &Path) -> Result<DomainDataset, EpisodeFileError> {
    let f = File::open(path).map_err(|source| EpisodeFileError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_episodes(BufReader::new(f))
}
