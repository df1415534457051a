use std::time::Instant;

use spuriosity::bias_eval::{flag_label_noise, spurious_gap, split_accuracy, DEFAULT_GAP_K};
use spuriosity::mitigation::{
    build_tuning_subset, fit_head, train_rows, tune_head, val_gap_monitor, FitConfig, StopReason,
    SubsetMode, TuningConfig,
};
use spuriosity::scoring::{class_feature_stats, rank_all, spuriosity_scores};
use spuriosity::synthetic::{collision, gaussian_pair, planted_bias, PlantedBiasConfig};
use spuriosity::tensor_store::{PredictionTable, Split};

#[test]
fn planted_bias_modes_separate() {
    let start = Instant::now();
    let fx = planted_bias(&PlantedBiasConfig::default()).unwrap();
    let generated = start.elapsed();
    let stats = class_feature_stats(&fx.acts).unwrap();
    let scores = spuriosity_scores(&fx.acts, &fx.spec, &stats).unwrap();
    let val = rank_all(&scores, Split::Val);
    let train = rank_all(&scores, Split::Train);
    let preds = PredictionTable::from_head("init", &fx.acts, &fx.head);
    let initial = spurious_gap(&preds, &val, DEFAULT_GAP_K).unwrap();
    let acc0 = split_accuracy(&preds, &fx.acts, Split::Val).unwrap();
    assert!(initial.mean_gap >= 0.20, "initial gap {}", initial.mean_gap);

    let run = |mode| {
        let cfg = TuningConfig {
            subset_mode: mode,
            ..TuningConfig::default()
        };
        let subset = build_tuning_subset(&train, &fx.acts, Some(&preds), &cfg).unwrap();
        let monitor = val_gap_monitor(&fx.acts, &val, cfg.gap_k);
        let (_, trace) = tune_head(&fx.acts, &subset.rows, &fx.head, &cfg, monitor).unwrap();
        let last = trace.epochs.last().unwrap();
        (last.val_gap, acc0 - last.val_accuracy, trace.stop_reason)
    };
    let (low_gap, low_drop, low_stop) = run(SubsetMode::LowSpuriosity);
    let (rnd_gap, _, _) = run(SubsetMode::Random);
    let (err_gap, err_drop, _) = run(SubsetMode::Errors);
    eprintln!(
        "generated in {generated:?}, total {:?}; initial {} acc {acc0}; low {low_gap} {low_drop}; random {rnd_gap}; errors {err_gap} {err_drop}",
        start.elapsed(),
        initial.mean_gap
    );
    assert!(low_gap < 0.05);
    assert_eq!(low_stop, Some(StopReason::GapThreshold));
    assert!(low_drop <= 0.03);
    assert!((rnd_gap - initial.mean_gap).abs() <= 0.05);
    assert!(err_gap > low_gap);
    assert!(err_drop > low_drop);
}

#[test]
fn collision_gives_negative_gap_for_second_class() {
    let fx = collision(200, 100, 7);
    let stats = class_feature_stats(&fx.acts).unwrap();
    let scores = spuriosity_scores(&fx.acts, &fx.spec, &stats).unwrap();
    let val = rank_all(&scores, Split::Val);
    let preds = PredictionTable::from_head("m", &fx.acts, &fx.head);
    let report = spurious_gap(&preds, &val, DEFAULT_GAP_K).unwrap();
    assert!(report.class_gap(0).unwrap().gap >= 0.0);
    assert!(report.class_gap(1).unwrap().gap < -0.2);
    let flags = flag_label_noise(&report, &val, -0.2, 0.1).unwrap();
    assert_eq!(flags.classes.len(), 1);
    assert_eq!(flags.classes[0].class, 1);
    let expected: Vec<String> = val[1].entries[..10].iter().map(|e| e.image_id.clone()).collect();
    assert_eq!(flags.classes[0].image_ids, expected);
}

#[test]
fn separated_gaussians_are_learned() {
    let acts = gaussian_pair(8, 200, 200, 3.0, 11);
    let head = fit_head(&acts, &train_rows(&acts), &FitConfig::default()).unwrap();
    let preds = PredictionTable::from_head("fit", &acts, &head);
    let acc = split_accuracy(&preds, &acts, Split::Val).unwrap();
    assert!(acc > 0.95, "val accuracy {acc}");
}
