//! Spurious gaps, effective robustness, cross-model gap correlation and
//! label-noise flagging.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scoring::{select_extremes, ScoringError, SpuriosityRanking};
use crate::tensor_store::{ActivationSet, PredictionTable, Split};

pub const DEFAULT_GAP_K: usize = 10;
pub const DEFAULT_NOISE_THRESHOLD: f64 = -0.20;
pub const DEFAULT_NOISE_DECILE: f64 = 0.10;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("missing predictions for {} image(s): {}", .0.len(), preview(.0))]
    IncompletePredictions(Vec<String>),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("degenerate fit: {0}")]
    DegenerateFit(String),
    #[error("correlation undefined: model {0:?} has zero variance of class-wise gaps")]
    UndefinedCorrelation(String),
    #[error("no ranking for class {0}")]
    MissingRanking(usize),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

fn preview(ids: &[String]) -> String {
    let mut s = ids.iter().take(10).cloned().collect::<Vec<_>>().join(", ");
    if ids.len() > 10 {
        s.push_str(", ...");
    }
    s
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Number of `ids` predicted as `class`. Missing ids are appended to
/// `missing` and count as neither right nor wrong.
fn correct_on(preds: &PredictionTable, ids: &[String], class: usize, missing: &mut Vec<String>) -> usize {
    let mut correct = 0usize;
    for id in ids {
        match preds.get(id) {
            Some(p) if p == class => correct += 1,
            Some(_) => {}
            None => missing.push(id.clone()),
        }
    }
    correct
}

/// Accuracy over every image of `split`.
pub fn split_accuracy(preds: &PredictionTable, acts: &ActivationSet, split: Split) -> Result<f64> {
    let rows = acts.rows_in_split(split);
    if rows.is_empty() {
        return Err(EvalError::Argument(format!("no {split} images")));
    }
    let mut missing = Vec::new();
    let mut correct = 0usize;
    for &r in &rows {
        let rec = acts.record(r);
        match preds.get(&rec.image_id) {
            Some(p) if p == rec.label => correct += 1,
            Some(_) => {}
            None => missing.push(rec.image_id.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(EvalError::IncompletePredictions(missing));
    }
    Ok(correct as f64 / rows.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassGap {
    pub class: usize,
    pub acc_top: f64,
    pub acc_bot: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpuriousGapReport {
    pub model_name: String,
    pub k: usize,
    pub classes: Vec<ClassGap>,
    /// Unweighted means over classes.
    pub mean_acc_top: f64,
    pub mean_acc_bot: f64,
    pub mean_gap: f64,
}

impl SpuriousGapReport {
    pub fn class_gap(&self, class: usize) -> Option<&ClassGap> {
        self.classes.iter().find(|g| g.class == class)
    }
}

/// Accuracy on the k most spurious minus accuracy on the k least spurious
/// images of every ranked class.
pub fn spurious_gap(
    preds: &PredictionTable,
    rankings: &[SpuriosityRanking],
    k: usize,
) -> Result<SpuriousGapReport> {
    if rankings.is_empty() {
        return Err(EvalError::Argument("no rankings".into()));
    }
    let mut missing = Vec::new();
    let mut classes = Vec::with_capacity(rankings.len());
    let (mut total_top, mut total_bot) = (0usize, 0usize);
    for r in rankings {
        let (top, bottom) = select_extremes(r, k)?;
        let n_top = correct_on(preds, &top, r.class, &mut missing);
        let n_bot = correct_on(preds, &bottom, r.class, &mut missing);
        total_top += n_top;
        total_bot += n_bot;
        let (acc_top, acc_bot) = (n_top as f64 / k as f64, n_bot as f64 / k as f64);
        classes.push(ClassGap {
            class: r.class,
            acc_top,
            acc_bot,
            gap: acc_top - acc_bot,
        });
    }
    if !missing.is_empty() {
        return Err(EvalError::IncompletePredictions(missing));
    }
    // every class contributes k images, so the means are exact ratios of counts
    let denom = (k * classes.len()) as f64;
    Ok(SpuriousGapReport {
        model_name: preds.model_name.clone(),
        k,
        mean_acc_top: total_top as f64 / denom,
        mean_acc_bot: total_bot as f64 / denom,
        mean_gap: (total_top as f64 - total_bot as f64) / denom,
        classes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResidual {
    pub model_name: String,
    pub acc_top: f64,
    pub acc_bot: f64,
    pub predicted_acc_bot: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectiveRobustnessReport {
    pub slope: f64,
    pub intercept: f64,
    pub models: Vec<ModelResidual>,
}

/// Least-squares line of aggregate low-spuriosity accuracy on aggregate
/// high-spuriosity accuracy; residuals measure effective robustness.
pub fn effective_robustness(reports: &[SpuriousGapReport]) -> Result<EffectiveRobustnessReport> {
    if reports.len() < 2 {
        return Err(EvalError::Argument(format!(
            "need at least 2 models, got {}",
            reports.len()
        )));
    }
    let xs: Vec<f64> = reports.iter().map(|r| r.mean_acc_top).collect();
    let ys: Vec<f64> = reports.iter().map(|r| r.mean_acc_bot).collect();
    if xs.iter().all(|&x| x == xs[0]) {
        return Err(EvalError::DegenerateFit(
            "every model has the same high-spuriosity accuracy".into(),
        ));
    }
    let n = xs.len() as f64;
    let x_mean = xs.iter().sum::<f64>() / n;
    let y_mean = ys.iter().sum::<f64>() / n;
    let (sxx, sxy) = xs.iter().zip(&ys).fold((0.0, 0.0), |(sxx, sxy), (&x, &y)| {
        let dx = x - x_mean;
        (sxx + dx * dx, sxy + dx * (y - y_mean))
    });
    let slope = sxy / sxx;
    let intercept = y_mean - slope * x_mean;
    let models = reports
        .iter()
        .map(|r| {
            let predicted = intercept + slope * r.mean_acc_top;
            ModelResidual {
                model_name: r.model_name.clone(),
                acc_top: r.mean_acc_top,
                acc_bot: r.mean_acc_bot,
                predicted_acc_bot: predicted,
                residual: r.mean_acc_bot - predicted,
            }
        })
        .collect();
    Ok(EffectiveRobustnessReport {
        slope,
        intercept,
        models,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapCorrelation {
    pub models: Vec<String>,
    pub classes: Vec<usize>,
    /// Pearson r between the class-wise gap vectors of two models.
    pub matrix: Vec<Vec<f64>>,
}

impl GapCorrelation {
    /// Mean over distinct model pairs.
    pub fn mean_off_diagonal(&self) -> f64 {
        let m = self.models.len();
        let mut sum = 0.0;
        for i in 0..m {
            for j in i + 1..m {
                sum += self.matrix[i][j];
            }
        }
        sum / (m * (m - 1) / 2) as f64
    }
}

/// Gap vectors aligned on the class order of the first report.
fn gap_vectors(reports: &[SpuriousGapReport]) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    let classes: Vec<usize> = reports[0].classes.iter().map(|g| g.class).collect();
    let vectors = reports
        .iter()
        .map(|r| {
            let by_class: BTreeMap<usize, f64> = r.classes.iter().map(|g| (g.class, g.gap)).collect();
            if by_class.len() != classes.len() {
                return Err(EvalError::Argument(format!(
                    "model {:?} covers {} classes, expected {}",
                    r.model_name,
                    by_class.len(),
                    classes.len()
                )));
            }
            classes
                .iter()
                .map(|c| {
                    by_class.get(c).copied().ok_or_else(|| {
                        EvalError::Argument(format!(
                            "model {:?} has no gap for class {c}",
                            r.model_name
                        ))
                    })
                })
                .collect()
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    Ok((classes, vectors))
}

fn standardized(v: &[f64]) -> Option<Vec<f64>> {
    if v.iter().all(|&x| x == v[0]) {
        return None;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let norm = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    Some(v.iter().map(|x| (x - mean) / norm).collect())
}

pub fn gap_correlation(reports: &[SpuriousGapReport]) -> Result<GapCorrelation> {
    if reports.len() < 2 {
        return Err(EvalError::Argument(format!(
            "need at least 2 models, got {}",
            reports.len()
        )));
    }
    let (classes, vectors) = gap_vectors(reports)?;
    if classes.len() < 3 {
        return Err(EvalError::Argument(format!(
            "need at least 3 classes, got {}",
            classes.len()
        )));
    }
    let unit: Vec<Vec<f64>> = vectors
        .iter()
        .zip(reports)
        .map(|(v, r)| {
            standardized(v).ok_or_else(|| EvalError::UndefinedCorrelation(r.model_name.clone()))
        })
        .collect::<Result<_>>()?;
    let m = reports.len();
    let mut matrix = vec![vec![0.0; m]; m];
    for i in 0..m {
        matrix[i][i] = 1.0;
        for j in i + 1..m {
            let r: f64 = unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum();
            let r = r.clamp(-1.0, 1.0);
            matrix[i][j] = r;
            matrix[j][i] = r;
        }
    }
    Ok(GapCorrelation {
        models: reports.iter().map(|r| r.model_name.clone()).collect(),
        classes,
        matrix,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapVariances {
    /// Sample variance over classes of the model-averaged class gap.
    pub across_classes: f64,
    /// Sample variance over models of the class-averaged gap.
    pub across_models: f64,
}

pub fn gap_variances(reports: &[SpuriousGapReport]) -> Result<GapVariances> {
    if reports.len() < 2 {
        return Err(EvalError::Argument("need at least 2 models".into()));
    }
    let (classes, vectors) = gap_vectors(reports)?;
    if classes.len() < 2 {
        return Err(EvalError::Argument("need at least 2 classes".into()));
    }
    let sample_var = |v: &[f64]| {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    };
    let per_class: Vec<f64> = (0..classes.len())
        .map(|c| vectors.iter().map(|v| v[c]).sum::<f64>() / vectors.len() as f64)
        .collect();
    let per_model: Vec<f64> = vectors
        .iter()
        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
        .collect();
    Ok(GapVariances {
        across_classes: sample_var(&per_class),
        across_models: sample_var(&per_model),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlaggedClass {
    pub class: usize,
    pub gap: f64,
    /// Most spurious first.
    pub image_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseFlagReport {
    pub model_name: String,
    pub gap_threshold: f64,
    pub decile: f64,
    pub classes: Vec<FlaggedClass>,
}

/// Number of images in the top `fraction` of a ranking of `n`; at least one.
pub fn fraction_count(n: usize, fraction: f64) -> usize {
    // the epsilon keeps 0.1 × 100 from rounding up to 11
    (((fraction * n as f64) - 1e-9).ceil() as usize).clamp(1, n.max(1))
}

/// Classes whose gap falls below `gap_threshold`, each with its top
/// `decile` most spurious images.
pub fn flag_label_noise(
    report: &SpuriousGapReport,
    rankings: &[SpuriosityRanking],
    gap_threshold: f64,
    decile: f64,
) -> Result<NoiseFlagReport> {
    if !(gap_threshold < 0.0) {
        return Err(EvalError::Argument(format!(
            "gap threshold must be negative, got {gap_threshold}"
        )));
    }
    if !(decile > 0.0 && decile <= 1.0) {
        return Err(EvalError::Argument(format!(
            "decile must be in (0, 1], got {decile}"
        )));
    }
    let mut classes = Vec::new();
    for g in report.classes.iter().filter(|g| g.gap < gap_threshold) {
        let ranking = rankings
            .iter()
            .find(|r| r.class == g.class)
            .ok_or(EvalError::MissingRanking(g.class))?;
        let n = fraction_count(ranking.len(), decile).min(ranking.len());
        classes.push(FlaggedClass {
            class: g.class,
            gap: g.gap,
            image_ids: ranking.entries[..n]
                .iter()
                .map(|e| e.image_id.clone())
                .collect(),
        });
    }
    Ok(NoiseFlagReport {
        model_name: report.model_name.clone(),
        gap_threshold,
        decile,
        classes,
    })
}

/// CSV `model,class,acc_top,acc_bot,gap` for any number of reports.
pub fn write_gap_csv<W: io::Write>(reports: &[SpuriousGapReport], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["model", "class", "acc_top", "acc_bot", "gap"])?;
    for r in reports {
        for g in &r.classes {
            w.write_record([
                r.model_name.clone(),
                g.class.to_string(),
                g.acc_top.to_string(),
                g.acc_bot.to_string(),
                g.gap.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_correlation_csv<W: io::Write>(corr: &GapCorrelation, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["model".to_string()];
    header.extend(corr.models.iter().cloned());
    w.write_record(&header)?;
    for (name, row) in corr.models.iter().zip(&corr.matrix) {
        let mut rec = vec![name.clone()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// One line per model: name, k, mean accuracies and mean gap.
pub fn summary_table(reports: &[SpuriousGapReport]) -> String {
    let width = reports
        .iter()
        .map(|r| r.model_name.len())
        .max()
        .unwrap_or(5)
        .max(5);
    let mut out = format!(
        "{:<width$}  {:>3}  {:>7}  {:>7}  {:>7}  {:>7}\n",
        "model", "k", "classes", "acc_top", "acc_bot", "gap"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:<width$}  {:>3}  {:>7}  {:>7.3}  {:>7.3}  {:>+7.3}",
            r.model_name,
            r.k,
            r.classes.len(),
            r.mean_acc_top,
            r.mean_acc_bot,
            r.mean_gap
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::RankedImage;

    fn ranking(class: usize, n: usize) -> SpuriosityRanking {
        SpuriosityRanking {
            class,
            split: Split::Val,
            entries: (0..n)
                .map(|i| RankedImage {
                    image_id: format!("c{class}_{i:03}"),
                    score: (n - i) as f64,
                })
                .collect(),
        }
    }

    fn report(name: &str, gaps: &[f64]) -> SpuriousGapReport {
        let classes: Vec<ClassGap> = gaps
            .iter()
            .enumerate()
            .map(|(c, &gap)| ClassGap {
                class: c,
                acc_top: 0.5 + gap / 2.0,
                acc_bot: 0.5 - gap / 2.0,
                gap,
            })
            .collect();
        let n = gaps.len() as f64;
        SpuriousGapReport {
            model_name: name.into(),
            k: 10,
            mean_acc_top: classes.iter().map(|g| g.acc_top).sum::<f64>() / n,
            mean_acc_bot: classes.iter().map(|g| g.acc_bot).sum::<f64>() / n,
            mean_gap: gaps.iter().sum::<f64>() / n,
            classes,
        }
    }

    fn point(name: &str, top: f64, bot: f64) -> SpuriousGapReport {
        SpuriousGapReport {
            model_name: name.into(),
            k: 10,
            classes: vec![],
            mean_acc_top: top,
            mean_acc_bot: bot,
            mean_gap: top - bot,
        }
    }

    #[test]
    fn nine_of_ten_top_seven_of_ten_bottom() {
        let r = ranking(0, 20);
        let mut preds = PredictionTable::new("m");
        for (i, e) in r.entries.iter().enumerate() {
            // wrong on rank 0 (top) and on the last three (bottom)
            let wrong = i == 0 || i >= 17;
            preds.entries.insert(e.image_id.clone(), usize::from(wrong));
        }
        let rep = spurious_gap(&preds, &[r], 10).unwrap();
        assert!((rep.classes[0].gap - 0.2).abs() < 1e-12);
        assert_eq!(rep.classes[0].acc_top, 0.9);
        assert_eq!(rep.classes[0].acc_bot, 0.7);
    }

    #[test]
    fn perfect_model_has_zero_gap() {
        let rs = vec![ranking(0, 25), ranking(1, 30)];
        let mut preds = PredictionTable::new("perfect");
        for r in &rs {
            for e in &r.entries {
                preds.entries.insert(e.image_id.clone(), r.class);
            }
        }
        let rep = spurious_gap(&preds, &rs, 10).unwrap();
        assert!(rep.classes.iter().all(|g| g.gap == 0.0));
        assert_eq!(rep.mean_gap, 0.0);
    }

    #[test]
    fn missing_predictions_are_listed() {
        let r = ranking(0, 20);
        let mut preds = PredictionTable::new("m");
        for e in r.entries.iter().skip(2) {
            preds.entries.insert(e.image_id.clone(), 0);
        }
        match spurious_gap(&preds, &[r], 10) {
            Err(EvalError::IncompletePredictions(ids)) => {
                assert_eq!(ids, vec!["c0_000", "c0_001"]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn two_point_fit_has_unit_slope() {
        let er = effective_robustness(&[point("a", 0.8, 0.6), point("b", 0.9, 0.7)]).unwrap();
        assert!((er.slope - 1.0).abs() < 1e-12);
        assert!(er.models.iter().all(|m| m.residual.abs() < 1e-12));
    }

    #[test]
    fn collinear_points_have_zero_residuals() {
        let er = effective_robustness(&[
            point("a", 0.5, 0.2),
            point("b", 0.7, 0.5),
            point("c", 0.9, 0.8),
        ])
        .unwrap();
        assert!((er.slope - 1.5).abs() < 1e-12);
        assert!(er.models.iter().all(|m| m.residual.abs() < 1e-12));
    }

    #[test]
    fn equal_acc_top_is_degenerate() {
        assert!(matches!(
            effective_robustness(&[point("a", 0.8, 0.6), point("b", 0.8, 0.7)]),
            Err(EvalError::DegenerateFit(_))
        ));
    }

    #[test]
    fn affine_and_negated_gaps() {
        let a = [0.1, 0.3, -0.2, 0.05];
        let b: Vec<f64> = a.iter().map(|g| 2.0 * g + 0.1).collect();
        let neg: Vec<f64> = a.iter().map(|g| -g).collect();
        let corr = gap_correlation(&[report("a", &a), report("b", &b), report("n", &neg)]).unwrap();
        assert!((corr.matrix[0][1] - 1.0).abs() < 1e-12);
        assert!((corr.matrix[0][2] + 1.0).abs() < 1e-12);
        assert_eq!(corr.matrix[1][1], 1.0);
    }

    #[test]
    fn zero_variance_model_is_named() {
        let err = gap_correlation(&[report("a", &[0.1, 0.2, 0.3]), report("flat", &[0.2; 3])])
            .unwrap_err();
        assert!(matches!(err, EvalError::UndefinedCorrelation(m) if m == "flat"));
    }

    #[test]
    fn flagging_uses_threshold_and_decile() {
        let mut rep = report("m", &[-0.54, 0.3]);
        rep.classes[0].class = 0;
        let rankings = vec![ranking(0, 100), ranking(1, 100)];
        let flags = flag_label_noise(&rep, &rankings, DEFAULT_NOISE_THRESHOLD, DEFAULT_NOISE_DECILE)
            .unwrap();
        assert_eq!(flags.classes.len(), 1);
        assert_eq!(flags.classes[0].class, 0);
        let expected: Vec<String> = (0..10).map(|i| format!("c0_{i:03}")).collect();
        assert_eq!(flags.classes[0].image_ids, expected);
    }

    #[test]
    fn flagging_needs_ranking() {
        let rep = report("m", &[-0.5]);
        assert!(matches!(
            flag_label_noise(&rep, &[], -0.2, 0.1),
            Err(EvalError::MissingRanking(0))
        ));
    }

    #[test]
    fn fraction_count_rounding() {
        assert_eq!(fraction_count(100, 0.1), 10);
        assert_eq!(fraction_count(30, 0.1), 3);
        assert_eq!(fraction_count(31, 0.1), 4);
        assert_eq!(fraction_count(5, 0.1), 1);
    }

    #[test]
    fn variances_split_class_and_model_effects() {
        let v = gap_variances(&[report("a", &[0.0, 0.4]), report("b", &[0.2, 0.6])]).unwrap();
        // class means 0.1, 0.5 -> var 0.08; model means 0.2, 0.4 -> var 0.02
        assert!((v.across_classes - 0.08).abs() < 1e-12);
        assert!((v.across_models - 0.02).abs() < 1e-12);
    }
}
