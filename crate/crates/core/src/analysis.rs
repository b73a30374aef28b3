//! Geometry of the learned prompts: pairwise distances, cluster quality by
//! embodiment, and whether camera-only pairs land together.

use alloc::string::String;
use alloc::vec::Vec;

use crate::model::PolicyModel;
use crate::real::Real;

/// Mean-pooled prompt of one domain.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PromptSummary {
    pub domain_id: String,
    /// Embodiment name, the clustering label.
    pub label: String,
    pub mean: Vec<f64>,
}

pub fn summaries<T: Real>(model: &PolicyModel<T>) -> Vec<PromptSummary> {
    model
        .mean_prompts()
        .into_iter()
        .map(|(domain_id, label, mean)| PromptSummary { domain_id, label, mean })
        .collect()
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AnalysisError {
    #[error("need at least two prompts, found {0}")]
    TooFew(usize),
    #[error("prompt vectors have different lengths")]
    Ragged,
    #[error("domain `{0}` has no prompt")]
    MissingPair(String),
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DistanceMatrix {
    pub ids: Vec<String>,
    pub euclidean: Vec<Vec<f64>>,
    /// `1 - cos`; zero vectors are at distance 0 from each other and 1
    /// from anything else.
    pub cosine: Vec<Vec<f64>>,
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    libm::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = libm::sqrt(a.iter().map(|x| x * x).sum());
    let nb = libm::sqrt(b.iter().map(|x| x * x).sum());
    match (na > 0.0, nb > 0.0) {
        (true, true) => 1.0 - dot / (na * nb),
        (false, false) => 0.0,
        _ => 1.0,
    }
}

/// Symmetric by construction with an exactly zero diagonal.
pub fn prompt_distances(s: &[PromptSummary]) -> Result<DistanceMatrix, AnalysisError> {
    if s.len() < 2 {
        return Err(AnalysisError::TooFew(s.len()));
    }
    if s.iter().any(|p| p.mean.len() != s[0].mean.len()) {
        return Err(AnalysisError::Ragged);
    }
    let n = s.len();
    let mut e = alloc::vec![alloc::vec![0.0; n]; n];
    let mut c = e.clone();
    for i in 0..n {
        for j in i + 1..n {
            e[i][j] = euclid(&s[i].mean, &s[j].mean);
            e[j][i] = e[i][j];
            c[i][j] = cosine(&s[i].mean, &s[j].mean);
            c[j][i] = c[i][j];
        }
    }
    Ok(DistanceMatrix {
        ids: s.iter().map(|p| p.domain_id.clone()).collect(),
        euclidean: e,
        cosine: c,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Silhouette {
    Score(f64),
    /// Fewer than two labels, or every label is a singleton.
    NotApplicable,
}

impl Silhouette {
    pub fn score(self) -> Option<f64> {
        match self {
            Silhouette::Score(s) => Some(s),
            Silhouette::NotApplicable => None,
        }
    }
}

/// Mean silhouette under Euclidean distance. Singleton clusters score 0,
/// as do points whose intra and nearest-other distances are both zero.
pub fn silhouette<L: PartialEq>(points: &[Vec<f64>], labels: &[L]) -> Silhouette {
    assert_eq!(points.len(), labels.len(), "one label per point");
    let mut distinct: Vec<&L> = Vec::new();
    for l in labels {
        if !distinct.contains(&l) {
            distinct.push(l);
        }
    }
    let size = |l: &L| labels.iter().filter(|x| *x == l).count();
    if distinct.len() < 2 || distinct.iter().all(|l| size(l) < 2) {
        return Silhouette::NotApplicable;
    }
    let n = points.len();
    let mut total = 0.0;
    for i in 0..n {
        let own = size(&labels[i]);
        if own < 2 {
            continue;
        }
        let mean_to = |l: &L| {
            let (sum, cnt) = (0..n)
                .filter(|&j| j != i && labels[j] == *l)
                .fold((0.0, 0usize), |(s, c), j| (s + euclid(&points[i], &points[j]), c + 1));
            sum / cnt as f64
        };
        let a = mean_to(&labels[i]);
        let b = distinct
            .iter()
            .filter(|l| ***l != labels[i])
            .map(|l| mean_to(l))
            .fold(f64::INFINITY, f64::min);
        let den = a.max(b);
        if den > 0.0 {
            total += (b - a) / den;
        }
    }
    Silhouette::Score(total / n as f64)
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ViewPairReport {
    pub pair: (String, String),
    pub paired_distance: f64,
    /// Median Euclidean distance over domain pairs with different labels.
    pub median_cross_distance: f64,
    /// `paired_distance < median_cross_distance`.
    pub paired_closer: bool,
}

pub fn view_pair_test(s: &[PromptSummary], a: &str, b: &str) -> Result<ViewPairReport, AnalysisError> {
    let m = prompt_distances(s)?;
    let find = |id: &str| m.ids.iter().position(|x| x == id).ok_or_else(|| AnalysisError::MissingPair(id.into()));
    let (i, j) = (find(a)?, find(b)?);
    let mut cross = Vec::new();
    for x in 0..s.len() {
        for y in x + 1..s.len() {
            if s[x].label != s[y].label {
                cross.push(m.euclidean[x][y]);
            }
        }
    }
    cross.sort_by(f64::total_cmp);
    let median = match cross.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => cross[n / 2],
        n => 0.5 * (cross[n / 2 - 1] + cross[n / 2]),
    };
    let d = m.euclidean[i][j];
    Ok(ViewPairReport {
        pair: (a.into(), b.into()),
        paired_distance: d,
        median_cross_distance: median,
        paired_closer: d < median,
    })
}

/// The camera-only pair of the synthetic suite.
pub const SUITE_VIEW_PAIR: (&str, &str) = ("planar3-left", "planar3-right");

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClusterReport {
    pub summaries: Vec<PromptSummary>,
    pub distances: DistanceMatrix,
    pub silhouette: Silhouette,
    pub view_pair: ViewPairReport,
}

pub fn cluster_report<T: Real>(model: &PolicyModel<T>, pair: (&str, &str)) -> Result<ClusterReport, AnalysisError> {
    let s = summaries(model);
    let distances = prompt_distances(&s)?;
    let points: Vec<Vec<f64>> = s.iter().map(|p| p.mean.clone()).collect();
    let labels: Vec<&str> = s.iter().map(|p| p.label.as_str()).collect();
    let sil = silhouette(&points, &labels);
    let view_pair = view_pair_test(&s, pair.0, pair.1)?;
    Ok(ClusterReport {
        summaries: s,
        distances,
        silhouette: sil,
        view_pair,
    })
}
