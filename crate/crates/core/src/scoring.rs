//! Per-class feature statistics, spuriosity scores and within-class rankings.
//!
//! The spuriosity of image `x` for its class `c` is the mean z-score of its
//! activations over the spurious features `S(c)`, using the mean and
//! (population) standard deviation of each feature over the train images of
//! `c`. Scores are only comparable within one class.

use std::cmp::Ordering;
use std::io;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::SpuriositySpec;
use crate::tensor_store::{ActivationSet, Split};

/// Standard deviations below this are floored so constant features score 0
/// for in-class-mean images instead of dividing by zero.
pub const SIGMA_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("class {0} has no spurious features and cannot be ranked")]
    NoSpuriousFeatures(usize),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, ScoringError>;

/// Mean and population standard deviation of each feature per class,
/// computed over the train split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    /// C×D
    pub mean: Array2<f64>,
    /// C×D
    pub std: Array2<f64>,
    pub train_counts: Vec<usize>,
}

impl ClassStats {
    pub fn num_classes(&self) -> usize {
        self.mean.nrows()
    }

    pub fn num_features(&self) -> usize {
        self.mean.ncols()
    }

    pub fn z_score(&self, class: usize, feature: usize, activation: f64) -> f64 {
        (activation - self.mean[[class, feature]]) / self.std[[class, feature]].max(SIGMA_FLOOR)
    }
}

/// Single-pass (Welford) moments with f64 accumulation.
pub fn class_feature_stats(acts: &ActivationSet) -> Result<ClassStats> {
    let (c, d) = (acts.num_classes(), acts.num_features());
    let mut counts = vec![0usize; c];
    let mut mean = Array2::<f64>::zeros((c, d));
    let mut m2 = Array2::<f64>::zeros((c, d));
    for row in acts.rows_in_split(Split::Train) {
        let class = acts.record(row).label;
        counts[class] += 1;
        let n = counts[class] as f64;
        let x = acts.row(row);
        let mut mu = mean.row_mut(class);
        let mut acc = m2.row_mut(class);
        for i in 0..d {
            let v = f64::from(x[i]);
            let delta = v - mu[i];
            mu[i] += delta / n;
            acc[i] += delta * (v - mu[i]);
        }
    }
    if let Some(bad) = counts.iter().position(|&n| n < 2) {
        return Err(ScoringError::Precondition(format!(
            "class {bad} has {} train images; at least 2 are needed for a standard deviation",
            counts[bad]
        )));
    }
    let mut std = m2;
    for (class, mut row) in std.rows_mut().into_iter().enumerate() {
        let n = counts[class] as f64;
        row.mapv_inplace(|v| (v.max(0.0) / n).sqrt());
    }
    Ok(ClassStats {
        mean,
        std,
        train_counts: counts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredImage {
    pub image_id: String,
    pub class: usize,
    pub split: Split,
    pub score: f64,
}

/// Scores of every image whose class has at least one spurious feature.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SpuriosityScores {
    pub entries: Vec<ScoredImage>,
    /// Classes without spurious features; their images are not scored.
    pub skipped_classes: Vec<usize>,
}

impl SpuriosityScores {
    pub fn get(&self, image_id: &str) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.image_id == image_id)
            .map(|e| e.score)
    }

    pub fn scored_classes(&self) -> Vec<usize> {
        let mut classes: Vec<usize> = self.entries.iter().map(|e| e.class).collect();
        classes.sort_unstable();
        classes.dedup();
        classes
    }
}

pub fn spuriosity_scores(
    acts: &ActivationSet,
    spec: &SpuriositySpec,
    stats: &ClassStats,
) -> Result<SpuriosityScores> {
    let (c, d) = (acts.num_classes(), acts.num_features());
    if stats.num_classes() != c || stats.num_features() != d {
        return Err(ScoringError::Argument(format!(
            "stats are {}×{} but activations have {c} classes and {d} features",
            stats.num_classes(),
            stats.num_features()
        )));
    }
    for (&class, features) in &spec.classes {
        if class >= c {
            return Err(ScoringError::Argument(format!(
                "spec names class {class} but there are only {c} classes"
            )));
        }
        if let Some(&f) = features.iter().find(|&&f| f >= d) {
            return Err(ScoringError::Argument(format!(
                "spec names feature {f} for class {class} but there are only {d} features"
            )));
        }
    }
    let features_of: Vec<Vec<usize>> = (0..c)
        .map(|class| spec.features(class).collect())
        .collect();
    let skipped_classes = (0..c).filter(|&k| features_of[k].is_empty()).collect();
    let mut entries = Vec::new();
    for row in 0..acts.num_images() {
        let rec = acts.record(row);
        let features = &features_of[rec.label];
        if features.is_empty() {
            continue;
        }
        let x = acts.row(row);
        let total: f64 = features
            .iter()
            .map(|&i| stats.z_score(rec.label, i, f64::from(x[i])))
            .sum();
        entries.push(ScoredImage {
            image_id: rec.image_id.clone(),
            class: rec.label,
            split: rec.split,
            score: total / features.len() as f64,
        });
    }
    Ok(SpuriosityScores {
        entries,
        skipped_classes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedImage {
    pub image_id: String,
    pub score: f64,
}

/// Images of one class and split, most spurious first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpuriosityRanking {
    pub class: usize,
    pub split: Split,
    pub entries: Vec<RankedImage>,
}

impl SpuriosityRanking {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.image_id.as_str())
    }
}

/// Descending score; equal scores fall back to ascending image id.
pub fn ranking_order(a: &RankedImage, b: &RankedImage) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.image_id.cmp(&b.image_id))
}

pub fn rank_class(scores: &SpuriosityScores, class: usize, split: Split) -> Result<SpuriosityRanking> {
    if scores.skipped_classes.contains(&class) {
        return Err(ScoringError::NoSpuriousFeatures(class));
    }
    let mut entries: Vec<RankedImage> = scores
        .entries
        .iter()
        .filter(|e| e.class == class && e.split == split)
        .map(|e| RankedImage {
            image_id: e.image_id.clone(),
            score: e.score,
        })
        .collect();
    entries.sort_by(ranking_order);
    Ok(SpuriosityRanking {
        class,
        split,
        entries,
    })
}

/// Rankings of every scored class for one split, in class order.
pub fn rank_all(scores: &SpuriosityScores, split: Split) -> Vec<SpuriosityRanking> {
    scores
        .scored_classes()
        .into_iter()
        .filter_map(|c| rank_class(scores, c, split).ok())
        .filter(|r| !r.is_empty())
        .collect()
}

/// Top-k (most spurious first) and bottom-k (least spurious first) ids.
pub fn select_extremes(ranking: &SpuriosityRanking, k: usize) -> Result<(Vec<String>, Vec<String>)> {
    if k == 0 {
        return Err(ScoringError::Argument("k must be positive".into()));
    }
    let n = ranking.len();
    if 2 * k > n {
        return Err(ScoringError::Precondition(format!(
            "class {} has {n} {} images; need at least {} for k={k}",
            ranking.class,
            ranking.split,
            2 * k
        )));
    }
    let top = ranking.entries[..k]
        .iter()
        .map(|e| e.image_id.clone())
        .collect();
    let bottom = ranking.entries[n - k..]
        .iter()
        .rev()
        .map(|e| e.image_id.clone())
        .collect();
    Ok((top, bottom))
}

#[derive(Debug, Serialize, Deserialize)]
struct RankingRow {
    class: usize,
    rank: usize,
    image_id: String,
    score: f64,
}

/// CSV `class,rank,image_id,score`; rank starts at 1.
pub fn write_rankings_csv<W: io::Write>(rankings: &[SpuriosityRanking], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rankings {
        for (i, e) in r.entries.iter().enumerate() {
            w.serialize(RankingRow {
                class: r.class,
                rank: i + 1,
                image_id: e.image_id.clone(),
                score: e.score,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads rankings written by [`write_rankings_csv`]. Rows must be grouped by
/// class with consecutive ranks starting at 1.
pub fn read_rankings_csv<R: io::Read>(reader: R, split: Split) -> Result<Vec<SpuriosityRanking>> {
    let mut out: Vec<SpuriosityRanking> = Vec::new();
    for row in csv::Reader::from_reader(reader).deserialize() {
        let row: RankingRow = row?;
        let fresh = out.last().is_none_or(|r| r.class != row.class);
        if fresh {
            out.push(SpuriosityRanking {
                class: row.class,
                split,
                entries: Vec::new(),
            });
        }
        let ranking = out.last_mut().expect("pushed above");
        if row.rank != ranking.entries.len() + 1 {
            return Err(ScoringError::Argument(format!(
                "class {} rank {} out of sequence",
                row.class, row.rank
            )));
        }
        ranking.entries.push(RankedImage {
            image_id: row.image_id,
            score: row.score,
        });
    }
    Ok(out)
}
