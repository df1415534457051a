use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use serde::Serialize;
use spuriosity::bias_eval::split_accuracy;
use spuriosity::mitigation::{
    build_tuning_subset, fit_head, train_rows, tune_head, val_gap_monitor, FitConfig, SubsetMode,
    TuningConfig, TuningTrace,
};
use spuriosity::tensor_store::{ActivationSet, HeadWeights, PredictionTable, Split};

use crate::eval::rankings_for;
use crate::layout::{load_bundle, load_predictions, write_json, OutDir, SpecArgs};
use crate::DataArgs;

fn save_predictions(out: &OutDir, name: &str, acts: &ActivationSet, head: &HeadWeights) -> Result<PathBuf> {
    let dir = out.reports()?.join("predictions");
    fs::create_dir_all(&dir)?;
    let path = dir.join(format!("{name}.csv"));
    PredictionTable::from_head(name, acts, head).save_csv(&path)?;
    Ok(path)
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub spec: SpecArgs,
    /// Head to start from.
    #[arg(long)]
    pub head: PathBuf,
    /// low_spuriosity, random or errors.
    #[arg(long, default_value = "low_spuriosity")]
    pub mode: SubsetMode,
    #[arg(long, default_value_t = 100)]
    pub per_class: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.003)]
    pub wd: f64,
    #[arg(long, default_value_t = 50)]
    pub max_epochs: usize,
    /// Stop once the validation gap falls below this.
    #[arg(long, default_value_t = 0.05)]
    pub early_stop: f64,
    /// Images per extreme in the gap monitor.
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Predictions that define errors for `--mode errors`; the incoming
    /// head's own predictions by default.
    #[arg(long)]
    pub preds: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct TuningRun<'a> {
    config: &'a TuningConfig,
    num_images: usize,
    final_gap: Option<f64>,
    trace: &'a TuningTrace,
}

pub fn tune(out: &OutDir, seed: u64, args: &TuneArgs) -> Result<()> {
    let bundle = load_bundle(&args.data, None, Some(&args.head))?;
    let acts = &bundle.acts;
    let head = bundle.head.context("head missing after load")?;
    let spec = args.spec.resolve()?;
    let config = TuningConfig {
        subset_mode: args.mode,
        images_per_class: args.per_class,
        learning_rate: args.lr,
        weight_decay: args.wd,
        max_epochs: args.max_epochs,
        early_stop_gap: args.early_stop,
        gap_k: args.k,
        rng_seed: seed,
    };
    config.validate()?;
    let train = rankings_for(acts, &spec, Split::Train)?;
    let val = rankings_for(acts, &spec, Split::Val)?;
    let preds = match &args.preds {
        Some(p) => load_predictions(p, acts)?,
        None => PredictionTable::from_head("initial", acts, &head),
    };
    let subset = build_tuning_subset(&train, acts, Some(&preds), &config)?;
    let monitor = val_gap_monitor(acts, &val, config.gap_k);
    let (tuned, trace) = tune_head(acts, &subset.rows, &head, &config, monitor)?;

    let dir = out.reports()?;
    tuned.save(dir.join("tuned_head.sptf"))?;
    write_json(&dir.join("tuning_subset.json"), &subset.image_ids)?;
    write_json(
        &dir.join("tuning_trace.json"),
        &TuningRun {
            config: &config,
            num_images: subset.rows.len(),
            final_gap: trace.final_gap(),
            trace: &trace,
        },
    )?;
    save_predictions(out, "tuned", acts, &tuned)?;
    print!("{}", trace.table());
    Ok(())
}

#[derive(Debug, Args)]
pub struct FitHeadArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.003)]
    pub wd: f64,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
}

#[derive(Debug, Serialize)]
struct FitReport {
    config: FitConfig,
    train_accuracy: f64,
    val_accuracy: Option<f64>,
}

pub fn fit(out: &OutDir, args: &FitHeadArgs) -> Result<()> {
    let acts = load_bundle(&args.data, None, None)?.acts;
    let config = FitConfig {
        learning_rate: args.lr,
        weight_decay: args.wd,
        epochs: args.epochs,
    };
    let head = fit_head(&acts, &train_rows(&acts), &config)?;
    let dir = out.reports()?;
    head.save(dir.join("head.sptf"))?;
    let preds = PredictionTable::from_head("fit_head", &acts, &head);
    let train_accuracy = split_accuracy(&preds, &acts, Split::Train)?;
    let val_accuracy = if acts.rows_in_split(Split::Val).is_empty() {
        None
    } else {
        Some(split_accuracy(&preds, &acts, Split::Val)?)
    };
    save_predictions(out, "fit_head", &acts, &head)?;
    let report = FitReport {
        config,
        train_accuracy,
        val_accuracy,
    };
    write_json(&dir.join("fit_head.json"), &report)?;
    match report.val_accuracy {
        Some(v) => println!("train accuracy {train_accuracy:.4}, val accuracy {v:.4}"),
        None => println!("train accuracy {train_accuracy:.4}"),
    }
    Ok(())
}
