//! Tuning subsets and linear-head training over cached activations.
//!
//! The objective is mean softmax cross-entropy plus `weight_decay / 2 ·
//! ‖W‖²` (bias unpenalised), minimised by full-batch gradient descent:
//! one step per epoch. Activations are read-only throughout; only head
//! parameters change.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bias_eval::{split_accuracy, spurious_gap, EvalError};
use crate::scoring::SpuriosityRanking;
use crate::tensor_store::{ActivationSet, HeadWeights, PredictionTable, Split};

#[derive(Debug, Error)]
pub enum TuningError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("missing prediction for {0} image(s)")]
    IncompletePredictions(usize),
    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize, trace: TuningTrace },
    #[error("gap monitor failed: {0}")]
    Monitor(#[from] EvalError),
}

pub type Result<T> = std::result::Result<T, TuningError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsetMode {
    LowSpuriosity,
    Random,
    Errors,
}

impl std::str::FromStr for SubsetMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "low_spuriosity" => Ok(SubsetMode::LowSpuriosity),
            "random" => Ok(SubsetMode::Random),
            "errors" => Ok(SubsetMode::Errors),
            other => Err(format!(
                "unknown subset mode {other:?} (expected low_spuriosity, random or errors)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningConfig {
    pub subset_mode: SubsetMode,
    pub images_per_class: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    /// Stop once the aggregate validation gap falls below this.
    pub early_stop_gap: f64,
    pub gap_k: usize,
    pub rng_seed: u64,
}

impl Default for TuningConfig {
    fn default() -> Self {
        Self {
            subset_mode: SubsetMode::LowSpuriosity,
            images_per_class: 100,
            learning_rate: 0.1,
            weight_decay: 0.003,
            max_epochs: 50,
            early_stop_gap: 0.05,
            gap_k: 10,
            rng_seed: 0,
        }
    }
}

impl TuningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.early_stop_gap > 0.0 && self.early_stop_gap < 1.0) {
            return Err(TuningError::Config(format!(
                "early_stop_gap must be in (0, 1), got {}",
                self.early_stop_gap
            )));
        }
        if self.images_per_class == 0 {
            return Err(TuningError::Config("images_per_class must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TuningError::Config(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(TuningError::Config(format!(
                "weight_decay must be finite and non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.max_epochs == 0 {
            return Err(TuningError::Config("max_epochs must be >= 1".into()));
        }
        if self.gap_k == 0 {
            return Err(TuningError::Config("gap_k must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningSubset {
    /// Manifest rows, grouped by class in ascending class order.
    pub rows: Vec<usize>,
    pub image_ids: Vec<String>,
    pub warnings: Vec<String>,
}

fn sample_rows(rows: &[usize], n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n >= rows.len() {
        return rows.to_vec();
    }
    let mut picked: Vec<usize> = sample(rng, rows.len(), n).into_iter().map(|i| rows[i]).collect();
    picked.sort_unstable();
    picked
}

/// Selects the tuning images of every class that has a train ranking.
///
/// - `low_spuriosity`: the last `images_per_class` entries of the ranking.
/// - `random`: a seeded uniform sample without replacement.
/// - `errors`: images `preds` misclassifies, subsampled to the quota when
///   there are more, padded with random correctly classified images when
///   there are fewer.
pub fn build_tuning_subset(
    rankings: &[SpuriosityRanking],
    acts: &ActivationSet,
    preds: Option<&PredictionTable>,
    config: &TuningConfig,
) -> Result<TuningSubset> {
    config.validate()?;
    if config.subset_mode == SubsetMode::Errors && preds.is_none() {
        return Err(TuningError::Argument(
            "errors mode needs a prediction table".into(),
        ));
    }
    let quota = config.images_per_class;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let by_class: BTreeMap<usize, &SpuriosityRanking> = rankings
        .iter()
        .filter(|r| r.split == Split::Train)
        .map(|r| (r.class, r))
        .collect();
    if by_class.is_empty() {
        return Err(TuningError::Argument("no train rankings supplied".into()));
    }
    let mut out = TuningSubset {
        rows: Vec::new(),
        image_ids: Vec::new(),
        warnings: Vec::new(),
    };
    for (&class, ranking) in &by_class {
        let class_rows = acts.rows_of(class, Split::Train);
        if class_rows.len() < quota {
            out.warnings.push(format!(
                "class {class} has {} train images, fewer than the quota of {quota}; using all",
                class_rows.len()
            ));
        }
        let picked: Vec<usize> = match config.subset_mode {
            SubsetMode::LowSpuriosity => {
                let n = ranking.len();
                ranking.entries[n.saturating_sub(quota)..]
                    .iter()
                    .map(|e| {
                        acts.row_of(&e.image_id).ok_or_else(|| {
                            TuningError::Argument(format!("ranked image {:?} not in manifest", e.image_id))
                        })
                    })
                    .collect::<Result<_>>()?
            }
            SubsetMode::Random => sample_rows(&class_rows, quota, &mut rng),
            SubsetMode::Errors => {
                let preds = preds.expect("checked above");
                let mut wrong = Vec::new();
                let mut right = Vec::new();
                let mut missing = 0;
                for &r in &class_rows {
                    match preds.get(&acts.record(r).image_id) {
                        Some(p) if p == class => right.push(r),
                        Some(_) => wrong.push(r),
                        None => missing += 1,
                    }
                }
                if missing > 0 {
                    return Err(TuningError::IncompletePredictions(missing));
                }
                if wrong.len() >= quota {
                    sample_rows(&wrong, quota, &mut rng)
                } else {
                    let pad = sample_rows(&right, quota - wrong.len(), &mut rng);
                    wrong.extend(pad);
                    wrong
                }
            }
        };
        out.image_ids
            .extend(picked.iter().map(|&r| acts.record(r).image_id.clone()));
        out.rows.extend(picked);
    }
    Ok(out)
}

/// Regularised softmax cross-entropy over a fixed set of activation rows.
#[derive(Debug, Clone)]
pub struct Objective {
    features: Array2<f64>,
    labels: Vec<usize>,
    num_classes: usize,
    weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradient {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Objective {
    pub fn new(acts: &ActivationSet, rows: &[usize], weight_decay: f64) -> Result<Self> {
        if rows.is_empty() {
            return Err(TuningError::Argument("training subset is empty".into()));
        }
        let d = acts.num_features();
        let mut features = Array2::<f64>::zeros((rows.len(), d));
        for (i, &r) in rows.iter().enumerate() {
            if r >= acts.num_images() {
                return Err(TuningError::Argument(format!("row {r} out of range")));
            }
            features
                .row_mut(i)
                .zip_mut_with(&acts.row(r), |o, &x| *o = f64::from(x));
        }
        let labels = rows.iter().map(|&r| acts.record(r).label).collect();
        Ok(Self {
            features,
            labels,
            num_classes: acts.num_classes(),
            weight_decay,
        })
    }

    pub fn from_parts(features: Array2<f64>, labels: Vec<usize>, num_classes: usize, weight_decay: f64) -> Self {
        assert_eq!(features.nrows(), labels.len());
        Self {
            features,
            labels,
            num_classes,
            weight_decay,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn check_head(&self, head: &HeadWeights) {
        assert_eq!(head.num_features(), self.features.ncols());
        assert_eq!(head.num_classes(), self.num_classes);
    }

    /// Row-wise log-softmax of the logits.
    fn log_probs(&self, head: &HeadWeights) -> Array2<f64> {
        let mut z = self.features.dot(&head.weights) + &head.bias;
        for mut row in z.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| v - lse);
        }
        z
    }

    fn penalty(&self, head: &HeadWeights) -> f64 {
        0.5 * self.weight_decay * head.weights.iter().map(|w| w * w).sum::<f64>()
    }

    pub fn loss(&self, head: &HeadWeights) -> f64 {
        self.check_head(head);
        let lp = self.log_probs(head);
        let nll: f64 = self
            .labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -lp[[i, y]])
            .sum();
        nll / self.len() as f64 + self.penalty(head)
    }

    pub fn loss_and_gradient(&self, head: &HeadWeights) -> (f64, HeadGradient) {
        self.check_head(head);
        let n = self.len() as f64;
        let lp = self.log_probs(head);
        let mut nll = 0.0;
        let mut residual = lp.mapv(f64::exp);
        for (i, &y) in self.labels.iter().enumerate() {
            nll -= lp[[i, y]];
            residual[[i, y]] -= 1.0;
        }
        residual /= n;
        let mut weights = self.features.t().dot(&residual);
        weights.scaled_add(self.weight_decay, &head.weights);
        let bias = residual.sum_axis(Axis(0));
        (nll / n + self.penalty(head), HeadGradient { weights, bias })
    }

    /// Upper bound on the Lipschitz constant of the gradient: the softmax
    /// Hessian has spectral norm at most 1/2, so half the mean squared norm
    /// of the bias-augmented rows plus the weight decay bounds the curvature.
    pub fn smoothness_bound(&self) -> f64 {
        let mean_sq = self
            .features
            .rows()
            .into_iter()
            .map(|r| 1.0 + r.dot(&r))
            .sum::<f64>()
            / self.len().max(1) as f64;
        0.5 * mean_sq + self.weight_decay
    }

    /// Step size at which full-batch gradient descent never increases the loss.
    pub fn safe_learning_rate(&self) -> f64 {
        1.0 / self.smoothness_bound()
    }

    pub fn accuracy(&self, head: &HeadWeights) -> f64 {
        let z = self.features.dot(&head.weights) + &head.bias;
        let correct = z
            .rows()
            .into_iter()
            .zip(&self.labels)
            .filter(|(row, &y)| {
                let mut best = 0;
                for c in 1..row.len() {
                    if row[c] > row[best] {
                        best = c;
                    }
                }
                best == y
            })
            .count();
        correct as f64 / self.len() as f64
    }
}

fn step(head: &mut HeadWeights, grad: &HeadGradient, lr: f64) {
    // w + (-0.0)·g can turn -0.0 into +0.0
    if lr == 0.0 {
        return;
    }
    head.weights.scaled_add(-lr, &grad.weights);
    head.bias.scaled_add(-lr, &grad.bias);
}

fn head_is_finite(head: &HeadWeights) -> bool {
    head.weights.iter().chain(head.bias.iter()).all(|v| v.is_finite())
}

/// What the gap monitor reports after each epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapCheck {
    pub gap: f64,
    pub val_accuracy: f64,
}

/// Monitor that predicts the validation images with the current head and
/// reports the aggregate spurious gap over `val_rankings` and the overall
/// validation accuracy.
pub fn val_gap_monitor<'a>(
    acts: &'a ActivationSet,
    val_rankings: &'a [SpuriosityRanking],
    k: usize,
) -> impl FnMut(&HeadWeights) -> std::result::Result<GapCheck, EvalError> + 'a {
    let val_rows = acts.rows_in_split(Split::Val);
    move |head| {
        let mut preds = PredictionTable::new("monitor");
        for &r in &val_rows {
            preds
                .entries
                .insert(acts.record(r).image_id.clone(), head.predict(acts.row(r)));
        }
        let report = spurious_gap(&preds, val_rankings, k)?;
        Ok(GapCheck {
            gap: report.mean_gap,
            val_accuracy: split_accuracy(&preds, acts, Split::Val)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    GapThreshold,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Training objective after this epoch's update.
    pub loss: f64,
    pub val_accuracy: f64,
    pub val_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningTrace {
    pub initial: Option<GapCheck>,
    pub initial_loss: f64,
    pub epochs: Vec<EpochRecord>,
    pub stop_reason: Option<StopReason>,
}

impl TuningTrace {
    pub fn final_gap(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.val_gap)
    }

    /// Fixed-width per-epoch table.
    pub fn table(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::from("epoch      loss   val_acc   val_gap\n");
        if let Some(init) = self.initial {
            let _ = writeln!(
                out,
                "{:>5}  {:>8.4}  {:>8.4}  {:>+8.4}",
                0, self.initial_loss, init.val_accuracy, init.gap
            );
        }
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{:>5}  {:>8.4}  {:>8.4}  {:>+8.4}",
                e.epoch, e.loss, e.val_accuracy, e.val_gap
            );
        }
        if let Some(reason) = self.stop_reason {
            let _ = writeln!(out, "stop: {reason:?}");
        }
        out
    }
}

/// Tunes `head_init` on `subset_rows` by full-batch gradient descent.
///
/// After every epoch `monitor` evaluates the current head; training stops
/// as soon as the reported gap is below `config.early_stop_gap` or after
/// `config.max_epochs`. The returned head is the one from the stopping
/// epoch.
pub fn tune_head<M>(
    acts: &ActivationSet,
    subset_rows: &[usize],
    head_init: &HeadWeights,
    config: &TuningConfig,
    mut monitor: M,
) -> Result<(HeadWeights, TuningTrace)>
where
    M: FnMut(&HeadWeights) -> std::result::Result<GapCheck, EvalError>,
{
    config.validate()?;
    if head_init.num_features() != acts.num_features() || head_init.num_classes() != acts.num_classes() {
        return Err(TuningError::Argument(format!(
            "head is {}×{} but activations need {}×{}",
            head_init.num_features(),
            head_init.num_classes(),
            acts.num_features(),
            acts.num_classes()
        )));
    }
    let objective = Objective::new(acts, subset_rows, config.weight_decay)?;
    let mut head = head_init.clone();
    let mut trace = TuningTrace {
        initial: Some(monitor(&head)?),
        initial_loss: objective.loss(&head),
        epochs: Vec::with_capacity(config.max_epochs),
        stop_reason: None,
    };
    for epoch in 1..=config.max_epochs {
        let (_, grad) = objective.loss_and_gradient(&head);
        step(&mut head, &grad, config.learning_rate);
        let loss = objective.loss(&head);
        if !loss.is_finite() || !head_is_finite(&head) {
            return Err(TuningError::Diverged { epoch, trace });
        }
        let check = monitor(&head)?;
        trace.epochs.push(EpochRecord {
            epoch,
            loss,
            val_accuracy: check.val_accuracy,
            val_gap: check.gap,
        });
        if check.gap < config.early_stop_gap {
            trace.stop_reason = Some(StopReason::GapThreshold);
            return Ok((head, trace));
        }
    }
    trace.stop_reason = Some(StopReason::MaxEpochs);
    Ok((head, trace))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            weight_decay: 0.003,
            epochs: 20,
        }
    }
}

/// Fits a fresh head from zero initialisation on the given rows.
pub fn fit_head(acts: &ActivationSet, rows: &[usize], config: &FitConfig) -> Result<HeadWeights> {
    if config.epochs == 0 || !(config.learning_rate > 0.0) {
        return Err(TuningError::Config(
            "fit needs a positive learning rate and at least one epoch".into(),
        ));
    }
    let objective = Objective::new(acts, rows, config.weight_decay)?;
    let mut head = HeadWeights::zeros(acts.num_features(), acts.num_classes());
    for epoch in 1..=config.epochs {
        let (_, grad) = objective.loss_and_gradient(&head);
        step(&mut head, &grad, config.learning_rate);
        if !head_is_finite(&head) {
            return Err(TuningError::Diverged {
                epoch,
                trace: TuningTrace {
                    initial: None,
                    initial_loss: f64::NAN,
                    epochs: vec![],
                    stop_reason: None,
                },
            });
        }
    }
    Ok(head)
}

/// Train rows of every class, in manifest order.
pub fn train_rows(acts: &ActivationSet) -> Vec<usize> {
    acts.rows_in_split(Split::Train)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_store::{DatasetManifest, ImageRecord};
    use ndarray::array;

    fn toy(points: &[([f32; 2], usize)]) -> ActivationSet {
        let manifest = DatasetManifest {
            name: "toy".into(),
            num_classes: 2,
            class_names: vec!["a".into(), "b".into()],
            images: points
                .iter()
                .enumerate()
                .map(|(i, (_, l))| ImageRecord {
                    image_id: format!("p{i}"),
                    label: *l,
                    split: Split::Train,
                    asset_path: None,
                })
                .collect(),
        };
        let flat: Vec<f32> = points.iter().flat_map(|(x, _)| x.to_vec()).collect();
        ActivationSet::new(manifest, Array2::from_shape_vec((points.len(), 2), flat).unwrap()).unwrap()
    }

    fn no_gap(_: &HeadWeights) -> std::result::Result<GapCheck, EvalError> {
        Ok(GapCheck {
            gap: 0.5,
            val_accuracy: 0.0,
        })
    }

    #[test]
    fn zero_learning_rate_is_bitwise_noop() {
        let acts = toy(&[([1.0, 0.0], 0), ([0.0, 1.0], 1)]);
        let init = HeadWeights::new(array![[0.3, -0.7], [1e-30, -0.0]], array![0.1, -0.2]).unwrap();
        let cfg = TuningConfig {
            learning_rate: 0.0,
            max_epochs: 5,
            ..Default::default()
        };
        let (head, trace) = tune_head(&acts, &[0, 1], &init, &cfg, no_gap).unwrap();
        assert!(head
            .weights
            .iter()
            .chain(head.bias.iter())
            .zip(init.weights.iter().chain(init.bias.iter()))
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(trace.epochs.len(), 5);
        assert_eq!(trace.stop_reason, Some(StopReason::MaxEpochs));
    }

    #[test]
    fn separable_toy_reaches_full_accuracy() {
        let acts = toy(&[
            ([2.0, 0.1], 0),
            ([1.5, -0.2], 0),
            ([1.8, 0.3], 0),
            ([-0.1, 2.0], 1),
            ([0.2, 1.7], 1),
            ([-0.3, 1.9], 1),
        ]);
        let rows: Vec<usize> = (0..6).collect();
        let head = fit_head(&acts, &rows, &FitConfig::default()).unwrap();
        let obj = Objective::new(&acts, &rows, 0.0).unwrap();
        assert_eq!(obj.accuracy(&head), 1.0);
    }

    #[test]
    fn early_stop_when_gap_below_threshold() {
        let acts = toy(&[([1.0, 0.0], 0), ([0.0, 1.0], 1)]);
        let init = HeadWeights::zeros(2, 2);
        let mut calls = 0;
        let cfg = TuningConfig::default();
        let (_, trace) = tune_head(&acts, &[0, 1], &init, &cfg, |_| {
            calls += 1;
            Ok(GapCheck {
                gap: if calls > 3 { 0.01 } else { 0.3 },
                val_accuracy: 0.9,
            })
        })
        .unwrap();
        assert_eq!(trace.stop_reason, Some(StopReason::GapThreshold));
        assert_eq!(trace.epochs.len(), 3);
        assert!(trace.final_gap().unwrap() < cfg.early_stop_gap);
    }

    #[test]
    fn divergence_is_reported_with_trace() {
        let acts = toy(&[([1e30, 0.0], 0), ([0.0, 1e30], 1)]);
        let cfg = TuningConfig {
            learning_rate: 1e300,
            ..Default::default()
        };
        let err = tune_head(&acts, &[0, 1], &HeadWeights::zeros(2, 2), &cfg, no_gap).unwrap_err();
        assert!(matches!(err, TuningError::Diverged { .. }));
    }

    #[test]
    fn empty_subset_rejected() {
        let acts = toy(&[([1.0, 0.0], 0), ([0.0, 1.0], 1)]);
        assert!(matches!(
            tune_head(&acts, &[], &HeadWeights::zeros(2, 2), &TuningConfig::default(), no_gap),
            Err(TuningError::Argument(_))
        ));
    }

    #[test]
    fn config_validation() {
        let bad = TuningConfig {
            early_stop_gap: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TuningConfig {
            images_per_class: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn fit_defaults() {
        let cfg = FitConfig::default();
        assert_eq!((cfg.learning_rate, cfg.weight_decay, cfg.epochs), (0.1, 0.003, 20));
    }
}
