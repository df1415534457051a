use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use serde::Serialize;
use spuriosity::annotation::{core_features, SpuriositySpec};
use spuriosity::importance::{rows_by_activation, AnnotationTaskBundle};
use spuriosity::annotation::AnnotationStore;
use spuriosity::segmentation::{
    apply_corruption, consolidated_core_mask, core_crop, crop_image, feature_sensitivity,
    filter_spurious_region, load_rgb, mean_core_mask, soft_segmentation, ConsolidatedCoreMask,
    CorruptionKind, CropBox, SegmentationError, SoftSegmentation, DEFAULT_BLUR_RADIUS,
    DEFAULT_CROP_EXPAND, DEFAULT_CROP_THRESHOLD, DEFAULT_PATCH_SIZE, DEFAULT_SENSITIVITY_IMAGES,
};
use spuriosity::tensor_store::{ActivationSet, SpatialActivationSet, Split};

use crate::layout::{asset_root, load_bundle, load_predictions, write_json, OutDir};
use crate::DataArgs;

/// Core features per class: from a JSON file shaped like `spec.json`, or from the
/// core labels of the annotation store.
#[derive(Debug, Clone, Args)]
pub struct CoreArgs {
    /// Core feature sets as JSON `{"classes": {"<class>": [features]}}`.
    #[arg(long, conflicts_with = "tasks")]
    pub core: Option<PathBuf>,
    #[arg(long, requires = "log")]
    pub tasks: Option<PathBuf>,
    #[arg(long, requires = "tasks")]
    pub log: Option<PathBuf>,
}

impl CoreArgs {
    fn resolve(&self) -> Result<Option<BTreeMap<usize, BTreeSet<usize>>>> {
        if let Some(path) = &self.core {
            let spec = SpuriositySpec::load(path).with_context(|| format!("reading {}", path.display()))?;
            return Ok(Some(spec.classes));
        }
        if let (Some(tasks), Some(log)) = (&self.tasks, &self.log) {
            let bundle = AnnotationTaskBundle::load(tasks).with_context(|| format!("reading {}", tasks.display()))?;
            let store = AnnotationStore::open(bundle, log)?;
            return Ok(Some(core_features(&store.labels())));
        }
        Ok(None)
    }
}

/// Data plus the spatial maps segmentation needs.
#[derive(Debug, Args)]
pub struct SpatialArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub spatial: PathBuf,
    /// Mask side length for images without a readable asset.
    #[arg(long)]
    pub image_size: Option<usize>,
}

struct Spatial {
    acts: ActivationSet,
    maps: SpatialActivationSet,
    assets: PathBuf,
    fallback: Option<usize>,
}

impl Spatial {
    fn load(args: &SpatialArgs) -> Result<Self> {
        let bundle = load_bundle(&args.data, Some(&args.spatial), None)?;
        Ok(Self {
            acts: bundle.acts,
            maps: bundle.spatial.context("spatial maps missing after load")?,
            assets: asset_root(&args.data),
            fallback: args.image_size,
        })
    }

    fn asset(&self, row: usize) -> Option<PathBuf> {
        let rec = self.acts.record(row);
        rec.asset_path
            .as_ref()
            .map(|p| self.assets.join(p))
            .filter(|p| p.is_file())
    }

    /// (height, width) of the image's pixel grid.
    fn size(&self, row: usize) -> Result<(usize, usize)> {
        if let Some(path) = self.asset(row) {
            let (w, h) = image::image_dimensions(&path).with_context(|| format!("reading {}", path.display()))?;
            return Ok((h as usize, w as usize));
        }
        match self.fallback {
            Some(s) => Ok((s, s)),
            None => bail!(
                "image {:?} has no readable asset; pass --image-size",
                self.acts.record(row).image_id
            ),
        }
    }

    fn segmentation(&self, row: usize, feature: usize) -> Result<SoftSegmentation> {
        let (h, w) = self.size(row)?;
        let id = &self.acts.record(row).image_id;
        Ok(soft_segmentation(&self.maps, &self.acts, id, feature, h, w)?)
    }

    fn core_mask(&self, row: usize, features: &BTreeSet<usize>, combine: Combine) -> Result<ConsolidatedCoreMask> {
        let segs = features
            .iter()
            .map(|&f| self.segmentation(row, f))
            .collect::<Result<Vec<_>>>()?;
        Ok(match combine {
            Combine::Max => consolidated_core_mask(&segs)?,
            Combine::Mean => mean_core_mask(&segs)?,
        })
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Combine {
    Max,
    Mean,
}

#[derive(Debug, Args)]
pub struct CropArgs {
    #[command(flatten)]
    pub spatial: SpatialArgs,
    #[command(flatten)]
    pub core: CoreArgs,
    #[arg(long, default_value = "val")]
    pub split: Split,
    /// Only this class.
    #[arg(long)]
    pub class: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_CROP_THRESHOLD)]
    pub threshold: f32,
    #[arg(long, default_value_t = DEFAULT_CROP_EXPAND)]
    pub expand: f64,
    #[arg(long, value_enum, default_value = "max")]
    pub combine: Combine,
    /// Also write cropped PNGs.
    #[arg(long)]
    pub write_images: bool,
}

#[derive(Debug, Serialize)]
struct Skipped {
    image_id: String,
    reason: String,
}

pub fn crop(out: &OutDir, args: &CropArgs) -> Result<()> {
    let sp = Spatial::load(&args.spatial)?;
    let core = args
        .core
        .resolve()?
        .context("no core features given: pass --core or --tasks with --log")?;
    let dir = out.crops()?;
    let classes: Vec<usize> = match args.class {
        Some(c) if c < sp.acts.num_classes() => vec![c],
        Some(c) => bail!("class {c} out of range"),
        None => (0..sp.acts.num_classes()).collect(),
    };
    let mut crops = Vec::new();
    let mut skipped = Vec::new();
    for class in classes {
        let rows = sp.acts.rows_of(class, args.split);
        let Some(features) = core.get(&class).filter(|f| !f.is_empty()) else {
            skipped.extend(rows.iter().map(|&r| Skipped {
                image_id: sp.acts.record(r).image_id.clone(),
                reason: format!("class {class} has no core features"),
            }));
            continue;
        };
        for row in rows {
            let id = sp.acts.record(row).image_id.clone();
            let mask = sp.core_mask(row, features, args.combine)?;
            let bbox = match core_crop(&mask, args.threshold, args.expand) {
                Ok(b) => b,
                Err(e @ SegmentationError::EmptyCrop(_)) => {
                    skipped.push(Skipped {
                        image_id: id,
                        reason: e.to_string(),
                    });
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            if args.write_images {
                let path = sp
                    .asset(row)
                    .with_context(|| format!("image {id:?} has no readable asset to crop"))?;
                let cropped = crop_image(&load_rgb(&path)?, bbox);
                cropped.save(dir.join(format!("{id}.png")))?;
            }
            crops.push(CropBox::new(id, bbox));
        }
    }
    write_json(&dir.join("crops.json"), &crops)?;
    write_json(&dir.join("skipped.json"), &skipped)?;
    println!("{} crops, {} skipped", crops.len(), skipped.len());
    Ok(())
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KindArg {
    Gray,
    Blur,
    #[value(name = "patch_rotate")]
    PatchRotate,
}

#[derive(Debug, Args)]
pub struct CorruptArgs {
    #[command(flatten)]
    pub spatial: SpatialArgs,
    #[command(flatten)]
    pub core: CoreArgs,
    /// Spurious feature whose region is corrupted.
    #[arg(long)]
    pub feature: usize,
    /// Corrupt the top `--n` train images of this class by activation.
    #[arg(long, required_unless_present = "images")]
    pub class: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_SENSITIVITY_IMAGES)]
    pub n: usize,
    /// Explicit image ids instead of `--class`.
    #[arg(long = "image", conflicts_with = "class")]
    pub images: Vec<String>,
    #[arg(long, value_enum)]
    pub kind: KindArg,
    #[arg(long, default_value_t = DEFAULT_BLUR_RADIUS)]
    pub radius: u32,
    #[arg(long, default_value_t = DEFAULT_PATCH_SIZE)]
    pub patch_size: u32,
}

#[derive(Debug, Serialize)]
struct CorruptionIndex {
    corruption: CorruptionKind,
    feature: usize,
    core_filtered: bool,
    images: Vec<String>,
}

fn top_rows(acts: &ActivationSet, class: usize, feature: usize, n: usize) -> Result<Vec<usize>> {
    let rows = rows_by_activation(acts, class, feature)?;
    if rows.len() < n {
        bail!("class {class} has {} train images, fewer than n={n}", rows.len());
    }
    Ok(rows[..n].to_vec())
}

pub fn corrupt(out: &OutDir, seed: u64, args: &CorruptArgs) -> Result<()> {
    let sp = Spatial::load(&args.spatial)?;
    let core = args.core.resolve()?;
    let rows = match args.class {
        Some(class) => top_rows(&sp.acts, class, args.feature, args.n)?,
        None => args
            .images
            .iter()
            .map(|id| sp.acts.row_of(id).with_context(|| format!("unknown image {id:?}")))
            .collect::<Result<_>>()?,
    };
    let corruption = match args.kind {
        KindArg::Gray => CorruptionKind::Gray,
        KindArg::Blur => CorruptionKind::Blur { radius: args.radius },
        KindArg::PatchRotate => CorruptionKind::PatchRotate {
            patch_size: args.patch_size,
            seed,
        },
    };
    corruption.validate()?;
    let tag = match args.kind {
        KindArg::Gray => "gray",
        KindArg::Blur => "blur",
        KindArg::PatchRotate => "patch_rotate",
    };
    let dir = out.reports()?.join("corrupted").join(format!("{tag}_f{}", args.feature));
    fs::create_dir_all(&dir)?;
    let mut images = Vec::new();
    for (i, &row) in rows.iter().enumerate() {
        let rec = sp.acts.record(row);
        let path = sp
            .asset(row)
            .with_context(|| format!("image {:?} has no readable asset", rec.image_id))?;
        let image = load_rgb(&path)?;
        let mut mask = sp.segmentation(row, args.feature)?;
        if let Some(features) = core.as_ref().and_then(|c| c.get(&rec.label)).filter(|f| !f.is_empty()) {
            let core_mask = sp.core_mask(row, features, Combine::Max)?;
            mask = filter_spurious_region(&mask, &core_mask)?;
        }
        // one stream per image so patch orientations differ across images
        let kind = match corruption {
            CorruptionKind::PatchRotate { patch_size, seed } => CorruptionKind::PatchRotate {
                patch_size,
                seed: seed.wrapping_add(i as u64),
            },
            k => k,
        };
        apply_corruption(&image, &mask, kind)?.save(dir.join(format!("{}.png", rec.image_id)))?;
        images.push(rec.image_id.clone());
    }
    write_json(
        &dir.with_extension("json"),
        &CorruptionIndex {
            corruption,
            feature: args.feature,
            core_filtered: core.is_some(),
            images,
        },
    )?;
    println!("{} images -> {}", rows.len(), dir.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct SensitivityArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub clean: PathBuf,
    #[arg(long)]
    pub corrupted: PathBuf,
    #[arg(long)]
    pub class: usize,
    #[arg(long)]
    pub feature: usize,
    #[arg(long, default_value_t = DEFAULT_SENSITIVITY_IMAGES)]
    pub n: usize,
}

#[derive(Debug, Serialize)]
struct SensitivityOutput {
    class: usize,
    feature: usize,
    #[serde(flatten)]
    report: spuriosity::segmentation::SensitivityReport,
    images: Vec<String>,
}

pub fn sensitivity(out: &OutDir, args: &SensitivityArgs) -> Result<()> {
    let acts = load_bundle(&args.data, None, None)?.acts;
    let clean = load_predictions(&args.clean, &acts)?;
    let corrupted = load_predictions(&args.corrupted, &acts)?;
    let images: Vec<String> = top_rows(&acts, args.class, args.feature, args.n)?
        .into_iter()
        .map(|r| acts.record(r).image_id.clone())
        .collect();
    let report = feature_sensitivity(&clean, &corrupted, &images, &acts)?;
    println!(
        "class {} feature {}: clean {:.4}, corrupted {:.4}, drop {:+.4}",
        args.class, args.feature, report.acc_clean, report.acc_corrupted, report.drop
    );
    let path = out
        .reports()?
        .join(format!("sensitivity_c{}_f{}.json", args.class, args.feature));
    write_json(
        &path,
        &SensitivityOutput {
            class: args.class,
            feature: args.feature,
            report,
            images,
        },
    )
}
