use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Result;
use clap::{Args, ValueEnum};
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spuriosity::annotation::SpuriositySpec;
use spuriosity::synthetic::{collision, planted_bias, spatial_maps, PlantedBiasConfig};
use spuriosity::tensor_store::{write_tensor, ActivationSet, HeadWeights, TensorFile};

use crate::layout::write_json;

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Fixture {
    /// Ten classes whose head leans on a planted per-class cue.
    Planted,
    /// Two classes sharing one feature.
    Collision,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum)]
    pub kind: Fixture,
    /// Directory for manifest.json, activations.sptf, head.sptf, spec.json.
    #[arg(long)]
    pub dir: PathBuf,
    #[arg(long)]
    pub train_per_class: Option<usize>,
    #[arg(long)]
    pub val_per_class: Option<usize>,
    /// Also write spatial maps of this side length to spatial.sptf.
    #[arg(long)]
    pub spatial: Option<usize>,
    /// Also write a PNG asset of this side length per image.
    #[arg(long)]
    pub images: Option<u32>,
}

fn write_images(dir: &Path, acts: &ActivationSet, side: u32, seed: u64) -> Result<ActivationSet> {
    let image_dir = dir.join("images");
    fs::create_dir_all(&image_dir)?;
    let mut manifest = acts.manifest().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for rec in &mut manifest.images {
        let base = [(rec.label * 97 % 256) as f64, (rec.label * 53 % 256) as f64, 128.0];
        let tilt: f64 = rng.random_range(-1.0..1.0);
        let img = RgbImage::from_fn(side, side, |x, y| {
            let t = (f64::from(x) * tilt + f64::from(y)) / f64::from(side);
            Rgb(base.map(|b| (b + 60.0 * t).clamp(0.0, 255.0) as u8))
        });
        let rel = format!("images/{}.png", rec.image_id);
        img.save(dir.join(&rel))?;
        rec.asset_path = Some(rel);
    }
    Ok(ActivationSet::new(manifest, acts.matrix().clone())?)
}

pub fn synth(seed: u64, args: &SynthArgs) -> Result<()> {
    let (acts, head, spec): (ActivationSet, HeadWeights, SpuriositySpec) = match args.kind {
        Fixture::Planted => {
            let defaults = PlantedBiasConfig::default();
            let cfg = PlantedBiasConfig {
                train_per_class: args.train_per_class.unwrap_or(defaults.train_per_class),
                val_per_class: args.val_per_class.unwrap_or(defaults.val_per_class),
                seed,
                ..defaults
            };
            let fx = planted_bias(&cfg)?;
            (fx.acts, fx.head, fx.spec)
        }
        Fixture::Collision => {
            let fx = collision(
                args.train_per_class.unwrap_or(200),
                args.val_per_class.unwrap_or(100),
                seed,
            );
            (fx.acts, fx.head, fx.spec)
        }
    };
    fs::create_dir_all(&args.dir)?;
    let acts = match args.images {
        Some(side) => write_images(&args.dir, &acts, side, seed)?,
        None => acts,
    };
    acts.manifest().save(args.dir.join("manifest.json"))?;
    write_tensor(&TensorFile::from_matrix(acts.matrix())?, args.dir.join("activations.sptf"))?;
    head.save(args.dir.join("head.sptf"))?;
    write_json(&args.dir.join("spec.json"), &spec)?;
    if let Some(size) = args.spatial {
        let maps = spatial_maps(&acts, size, seed);
        let tensor = TensorFile::new(maps.shape().to_vec(), maps.iter().copied().collect())?;
        write_tensor(&tensor, args.dir.join("spatial.sptf"))?;
    }
    println!(
        "{} images, {} features, {} classes -> {}",
        acts.num_images(),
        acts.num_features(),
        acts.num_classes(),
        args.dir.display()
    );
    Ok(())
}
