//! Seeded synthetic datasets with known structure, used by the test suites
//! and the `synth` command.

use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::annotation::SpuriositySpec;
use crate::mitigation::{fit_head, train_rows, FitConfig, TuningError};
use crate::tensor_store::{ActivationSet, DatasetManifest, HeadWeights, ImageRecord, Split, StoreError};

/// Parameters of the planted-bias dataset.
///
/// Feature `c` is the core feature of class `c` and feature `C + c` its
/// spurious cue. Every image has Gaussian noise on every feature; images of
/// class `c` add `core_signal` to feature `c`. Exactly
/// `round(cue_fraction · n)` images per class and split carry their own cue
/// on feature `C + c`, with strength `cue_strength · (1 − cue_spread · u)`,
/// `u ~ U(0, 1)`. The remaining images instead carry the cue of another
/// class at strength `conflict_strength · cue_strength`; the `j`-th such
/// image of class `c` gets the cue of class `(c + 1 + j mod (C − 1)) mod C`.
/// The head is fit by plain gradient descent from zero on the train split
/// for `head_epochs` epochs, long enough to pick up the large-scale cues but
/// not the small-scale core features.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedBiasConfig {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub core_signal: f64,
    pub core_noise: f64,
    pub cue_strength: f64,
    pub cue_noise: f64,
    pub cue_spread: f64,
    pub cue_fraction: f64,
    pub conflict_strength: f64,
    pub head_epochs: usize,
    pub seed: u64,
}

impl Default for PlantedBiasConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            train_per_class: 400,
            val_per_class: 100,
            core_signal: 1.1,
            core_noise: 0.15,
            cue_strength: 12.0,
            cue_noise: 0.3,
            cue_spread: 0.9,
            cue_fraction: 0.9,
            conflict_strength: 0.8,
            head_epochs: 500,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlantedBias {
    pub acts: ActivationSet,
    pub head: HeadWeights,
    pub spec: SpuriositySpec,
    /// Per row: whether the image carries its own class's cue.
    pub has_cue: Vec<bool>,
}

pub fn image_id(split: Split, class: usize, index: usize) -> String {
    format!("{split}-c{class:02}-{index:04}")
}

fn class_names(n: usize) -> Vec<String> {
    (0..n).map(|c| format!("class_{c:02}")).collect()
}

fn normal(std: f64) -> Normal<f64> {
    Normal::new(0.0, std).expect("finite non-negative std")
}

pub fn planted_bias(cfg: &PlantedBiasConfig) -> Result<PlantedBias, TuningError> {
    let c_n = cfg.num_classes;
    let d = 2 * c_n;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (core_noise, cue_noise) = (normal(cfg.core_noise), normal(cfg.cue_noise));
    let mut records = Vec::new();
    let mut rows: Vec<Vec<f32>> = Vec::new();
    let mut has_cue = Vec::new();
    for (split, per_class) in [(Split::Train, cfg.train_per_class), (Split::Val, cfg.val_per_class)] {
        let with_cue = (cfg.cue_fraction * per_class as f64).round() as usize;
        for c in 0..c_n {
            let mut cue = vec![false; per_class];
            for i in rand::seq::index::sample(&mut rng, per_class, with_cue.min(per_class)) {
                cue[i] = true;
            }
            let mut conflicts = 0usize;
            for (i, &own) in cue.iter().enumerate() {
                let mut x: Vec<f64> = (0..d)
                    .map(|j| {
                        if j < c_n {
                            core_noise.sample(&mut rng)
                        } else {
                            cue_noise.sample(&mut rng)
                        }
                    })
                    .collect();
                x[c] += cfg.core_signal;
                let u: f64 = rng.random();
                if own {
                    x[c_n + c] += cfg.cue_strength * (1.0 - cfg.cue_spread * u);
                } else {
                    let other = (c + 1 + conflicts % (c_n - 1)) % c_n;
                    conflicts += 1;
                    x[c_n + other] += cfg.conflict_strength * cfg.cue_strength;
                }
                records.push(ImageRecord {
                    image_id: image_id(split, c, i),
                    label: c,
                    split,
                    asset_path: None,
                });
                rows.push(x.into_iter().map(|v| v as f32).collect());
                has_cue.push(own);
            }
        }
    }
    let manifest = DatasetManifest {
        name: "planted-bias".into(),
        num_classes: c_n,
        class_names: class_names(c_n),
        images: records,
    };
    let matrix = Array2::from_shape_vec((rows.len(), d), rows.concat()).expect("rows have d entries");
    let acts = ActivationSet::new(manifest, matrix).map_err(store_to_tuning)?;
    let fit = FitConfig {
        epochs: cfg.head_epochs,
        ..FitConfig::default()
    };
    let head = fit_head(&acts, &train_rows(&acts), &fit)?;
    let spec = SpuriositySpec::from_pairs((0..c_n).map(|c| (c, c_n + c)));
    Ok(PlantedBias {
        acts,
        head,
        spec,
        has_cue,
    })
}

fn store_to_tuning(e: StoreError) -> TuningError {
    TuningError::Argument(e.to_string())
}

/// Two classes where feature 0 is the core feature of class 0 and the
/// spurious feature of class 1.
///
/// Features: 0 shared, 1 core of class 1, 2 spurious cue of class 0. Class 0
/// images have feature 0 near 2 and a uniform cue on feature 2. Class 1
/// images have feature 1 near 1 and feature 0 uniform on [0, 2]. The head
/// scores class 0 by feature 0 (plus a small cue term) and class 1 by
/// feature 1, so class 1 images with a strong shared feature are predicted
/// as class 0.
#[derive(Debug, Clone)]
pub struct Collision {
    pub acts: ActivationSet,
    pub head: HeadWeights,
    pub spec: SpuriositySpec,
}

pub fn collision(train_per_class: usize, val_per_class: usize, seed: u64) -> Collision {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = normal(0.1);
    let mut records = Vec::new();
    let mut data = Vec::new();
    for (split, n) in [(Split::Train, train_per_class), (Split::Val, val_per_class)] {
        for c in 0..2 {
            for i in 0..n {
                let mut x = [noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng)];
                let u: f64 = rng.random();
                if c == 0 {
                    x[0] += 2.0;
                    x[2] += u;
                } else {
                    x[1] += 1.0;
                    x[0] += 2.0 * u;
                }
                records.push(ImageRecord {
                    image_id: image_id(split, c, i),
                    label: c,
                    split,
                    asset_path: None,
                });
                data.extend(x.map(|v| v as f32));
            }
        }
    }
    let manifest = DatasetManifest {
        name: "collision".into(),
        num_classes: 2,
        class_names: class_names(2),
        images: records,
    };
    let n = manifest.images.len();
    let acts = ActivationSet::new(manifest, Array2::from_shape_vec((n, 3), data).expect("3 features"))
        .expect("generated manifest is valid");
    let mut weights = Array2::zeros((3, 2));
    weights[[0, 0]] = 1.0;
    weights[[2, 0]] = 0.2;
    weights[[1, 1]] = 1.0;
    let head = HeadWeights::new(weights, ndarray::Array1::zeros(2)).expect("shapes agree");
    Collision {
        acts,
        head,
        spec: SpuriositySpec::from_pairs([(0, 2), (1, 0)]),
    }
}

/// Two Gaussian classes with means `±separation / 2` along every feature and
/// unit variance.
pub fn gaussian_pair(
    num_features: usize,
    per_class_train: usize,
    per_class_val: usize,
    separation: f64,
    seed: u64,
) -> ActivationSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = normal(1.0);
    let mut records = Vec::new();
    let mut data = Vec::new();
    for (split, n) in [(Split::Train, per_class_train), (Split::Val, per_class_val)] {
        for c in 0..2 {
            let mean = if c == 0 { -separation / 2.0 } else { separation / 2.0 };
            for i in 0..n {
                records.push(ImageRecord {
                    image_id: image_id(split, c, i),
                    label: c,
                    split,
                    asset_path: None,
                });
                data.extend((0..num_features).map(|_| (mean + noise.sample(&mut rng)) as f32));
            }
        }
    }
    let manifest = DatasetManifest {
        name: "gaussian-pair".into(),
        num_classes: 2,
        class_names: class_names(2),
        images: records,
    };
    let n = manifest.images.len();
    ActivationSet::new(manifest, Array2::from_shape_vec((n, num_features), data).expect("shape"))
        .expect("generated manifest is valid")
}

/// Uniform random labels and splits with every class guaranteed at least
/// two train images; activations are standard normal.
pub fn random_activations(
    num_images: usize,
    num_features: usize,
    num_classes: usize,
    seed: u64,
) -> ActivationSet {
    assert!(num_images >= 2 * num_classes, "need two train images per class");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = normal(1.0);
    let images = (0..num_images)
        .map(|i| {
            let (label, split) = if i < 2 * num_classes {
                (i % num_classes, Split::Train)
            } else {
                let split = if rng.random_bool(0.7) { Split::Train } else { Split::Val };
                (rng.random_range(0..num_classes), split)
            };
            ImageRecord {
                image_id: format!("img-{i:05}"),
                label,
                split,
                asset_path: None,
            }
        })
        .collect();
    let manifest = DatasetManifest {
        name: "random".into(),
        num_classes,
        class_names: class_names(num_classes),
        images,
    };
    let matrix = Array2::from_shape_simple_fn((num_images, num_features), || noise.sample(&mut rng) as f32);
    ActivationSet::new(manifest, matrix).expect("generated manifest is valid")
}

/// Spatial maps whose peak equals the image's pooled activation: one
/// Gaussian bump per (image, feature) at a seeded position.
pub fn spatial_maps(acts: &ActivationSet, size: usize, seed: u64) -> Array4<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d) = (acts.num_images(), acts.num_features());
    let mut maps = Array4::zeros((n, d, size, size));
    let width = (size as f64 / 4.0).max(0.5);
    for i in 0..n {
        for f in 0..d {
            let cy = rng.random_range(0.0..size as f64);
            let cx = rng.random_range(0.0..size as f64);
            let peak = f64::from(acts.matrix()[[i, f]]);
            for y in 0..size {
                for x in 0..size {
                    let r2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    maps[[i, f, y, x]] = (peak * (-r2 / (2.0 * width * width)).exp()) as f32;
                }
            }
        }
    }
    maps
}
