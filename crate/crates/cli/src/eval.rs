use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use spuriosity::bias_eval::{
    effective_robustness, flag_label_noise, gap_correlation, gap_variances, spurious_gap,
    summary_table, write_correlation_csv, write_gap_csv, SpuriousGapReport, DEFAULT_GAP_K,
    DEFAULT_NOISE_DECILE, DEFAULT_NOISE_THRESHOLD,
};
use spuriosity::scoring::{
    class_feature_stats, rank_all, read_rankings_csv, spuriosity_scores, write_rankings_csv,
    SpuriosityRanking,
};
use spuriosity::annotation::SpuriositySpec;
use spuriosity::tensor_store::{ActivationSet, HeadWeights, PredictionTable, Split};

use crate::layout::{load_acts, load_predictions, write_json, OutDir, SpecArgs};
use crate::DataArgs;

pub fn rankings_for(acts: &ActivationSet, spec: &SpuriositySpec, split: Split) -> Result<Vec<SpuriosityRanking>> {
    let stats = class_feature_stats(acts)?;
    let scores = spuriosity_scores(acts, spec, &stats)?;
    Ok(rank_all(&scores, split))
}

#[derive(Debug, Args)]
pub struct RankArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub spec: SpecArgs,
    /// Only this split; both by default.
    #[arg(long)]
    pub split: Option<Split>,
}

pub fn rank(out: &OutDir, args: &RankArgs) -> Result<()> {
    let acts = load_acts(&args.data)?;
    let spec = args.spec.resolve()?;
    let dir = out.rankings()?;
    let splits = match args.split {
        Some(s) => vec![s],
        None => vec![Split::Train, Split::Val],
    };
    for split in splits {
        let rankings = rankings_for(&acts, &spec, split)?;
        let path = dir.join(format!("{split}.csv"));
        let f = fs::File::create(&path).with_context(|| format!("writing {}", path.display()))?;
        write_rankings_csv(&rankings, f)?;
        let images: usize = rankings.iter().map(SpuriosityRanking::len).sum();
        println!("{split}: {} classes, {images} images -> {}", rankings.len(), path.display());
    }
    write_json(&dir.join("spec.json"), &spec)
}

#[derive(Debug, Args)]
pub struct GapArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub spec: SpecArgs,
    /// Validation rankings CSV written by `rank`; replaces the spec.
    #[arg(long, conflicts_with_all = ["spec", "tasks"])]
    pub rankings: Option<PathBuf>,
    /// Prediction tables `image_id,predicted_class`; the model is named by
    /// the file stem.
    #[arg(long = "preds")]
    pub preds: Vec<PathBuf>,
    /// Heads in the tensor format, evaluated as further models.
    #[arg(long = "head")]
    pub heads: Vec<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_GAP_K)]
    pub k: usize,
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned())
}

impl GapArgs {
    fn val_rankings(&self, acts: &ActivationSet) -> Result<Vec<SpuriosityRanking>> {
        match &self.rankings {
            Some(path) => {
                let f = fs::File::open(path).with_context(|| format!("reading {}", path.display()))?;
                let rankings = read_rankings_csv(f, Split::Val)?;
                for r in &rankings {
                    for id in r.ids() {
                        if acts.row_of(id).is_none() {
                            bail!("{}: image {id:?} is not in the manifest", path.display());
                        }
                    }
                }
                Ok(rankings)
            }
            None => rankings_for(acts, &self.spec.resolve()?, Split::Val),
        }
    }

    fn models(&self, acts: &ActivationSet) -> Result<Vec<PredictionTable>> {
        let mut models = Vec::new();
        for p in &self.preds {
            models.push(load_predictions(p, acts)?);
        }
        for p in &self.heads {
            let head = HeadWeights::load(p, acts.num_features())
                .with_context(|| format!("reading {}", p.display()))?;
            models.push(PredictionTable::from_head(&stem(p), acts, &head));
        }
        if models.is_empty() {
            bail!("no models: pass --preds or --head");
        }
        Ok(models)
    }

    /// Gap report per model, plus the rankings they were measured on.
    pub fn reports(&self) -> Result<(Vec<SpuriosityRanking>, Vec<SpuriousGapReport>)> {
        let acts = load_acts(&self.data)?;
        let rankings = self.val_rankings(&acts)?;
        let reports = self
            .models(&acts)?
            .iter()
            .map(|m| spurious_gap(m, &rankings, self.k))
            .collect::<Result<Vec<_>, _>>()?;
        Ok((rankings, reports))
    }
}

pub fn gap(out: &OutDir, args: &GapArgs) -> Result<()> {
    let (_, reports) = args.reports()?;
    let dir = out.reports()?;
    let f = fs::File::create(dir.join("gaps.csv"))?;
    write_gap_csv(&reports, f)?;
    write_json(&dir.join("gaps.json"), &reports)?;
    print!("{}", summary_table(&reports));
    Ok(())
}

pub fn effrob(out: &OutDir, args: &GapArgs) -> Result<()> {
    let (_, reports) = args.reports()?;
    let report = effective_robustness(&reports)?;
    write_json(&out.reports()?.join("effective_robustness.json"), &report)?;
    println!("acc_bot = {:.4} + {:.4} * acc_top", report.intercept, report.slope);
    for m in &report.models {
        println!("{:<24} {:>+8.4}", m.model_name, m.residual);
    }
    Ok(())
}

pub fn correlate(out: &OutDir, args: &GapArgs) -> Result<()> {
    let (_, reports) = args.reports()?;
    let corr = gap_correlation(&reports)?;
    let dir = out.reports()?;
    let f = fs::File::create(dir.join("gap_correlation.csv"))?;
    write_correlation_csv(&corr, f)?;
    write_json(&dir.join("gap_correlation.json"), &corr)?;
    let vars = gap_variances(&reports)?;
    write_json(&dir.join("gap_variances.json"), &vars)?;
    println!(
        "mean pairwise r {:.4}; variance across classes {:.5}, across models {:.5}",
        corr.mean_off_diagonal(),
        vars.across_classes,
        vars.across_models
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct FlagNoiseArgs {
    #[command(flatten)]
    pub gap: GapArgs,
    /// Classes with a gap below this are flagged.
    #[arg(long, default_value_t = DEFAULT_NOISE_THRESHOLD, allow_hyphen_values = true)]
    pub threshold: f64,
    /// Fraction of the most spurious images listed per flagged class.
    #[arg(long, default_value_t = DEFAULT_NOISE_DECILE)]
    pub decile: f64,
}

pub fn flag_noise(out: &OutDir, args: &FlagNoiseArgs) -> Result<()> {
    let (rankings, reports) = args.gap.reports()?;
    let flags = reports
        .iter()
        .map(|r| flag_label_noise(r, &rankings, args.threshold, args.decile))
        .collect::<Result<Vec<_>, _>>()?;
    write_json(&out.labels()?.join("noise_flags.json"), &flags)?;
    for f in &flags {
        for c in &f.classes {
            println!(
                "{}: class {} gap {:+.3}, {} images flagged",
                f.model_name,
                c.class,
                c.gap,
                c.image_ids.len()
            );
        }
    }
    Ok(())
}
