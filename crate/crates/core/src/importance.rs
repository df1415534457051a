//! Feature importance per (class, feature), top-k feature selection and
//! export of annotation tasks.
//!
//! Importance of feature `i` for class `c` is the mean train activation of
//! `i` over class `c` times the head weight connecting `i` to the logit of
//! `c`: the average contribution of the feature to that logit. The bias term
//! does not enter.

use std::cmp::Ordering;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor_store::{ActivationSet, HeadWeights, Split};

#[derive(Debug, Error)]
pub enum ImportanceError {
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("invalid argument: {0}")]
    Argument(String),
}

pub type Result<T> = std::result::Result<T, ImportanceError>;

/// C×D signed importance values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceTable {
    pub values: Array2<f64>,
}

pub fn feature_importance(acts: &ActivationSet, head: &HeadWeights) -> Result<ImportanceTable> {
    let (c, d) = (acts.num_classes(), acts.num_features());
    if head.num_features() != d || head.num_classes() != c {
        return Err(ImportanceError::Argument(format!(
            "head is {}×{} but activations need {d}×{c}",
            head.num_features(),
            head.num_classes()
        )));
    }
    let mut sums = Array2::<f64>::zeros((c, d));
    let mut counts = vec![0usize; c];
    for row in acts.rows_in_split(Split::Train) {
        let class = acts.record(row).label;
        counts[class] += 1;
        sums.row_mut(class)
            .zip_mut_with(&acts.row(row), |s, &x| *s += f64::from(x));
    }
    if let Some(empty) = counts.iter().position(|&n| n == 0) {
        return Err(ImportanceError::Precondition(format!(
            "class {empty} has no train images"
        )));
    }
    let mut values = sums;
    for (class, mut row) in values.rows_mut().into_iter().enumerate() {
        let n = counts[class] as f64;
        for (i, v) in row.iter_mut().enumerate() {
            *v = *v / n * head.weights[[i, class]];
        }
    }
    Ok(ImportanceTable { values })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSelection {
    pub k: usize,
    /// Per class, feature indices by descending importance.
    pub per_class: Vec<Vec<usize>>,
}

/// The k most important features of every class. Ties go to the smaller
/// feature index.
pub fn select_top_features(table: &ImportanceTable, k: usize) -> Result<FeatureSelection> {
    let d = table.values.ncols();
    if k == 0 || k > d {
        return Err(ImportanceError::Argument(format!(
            "k must be in 1..={d}, got {k}"
        )));
    }
    let per_class = table
        .values
        .rows()
        .into_iter()
        .map(|row| {
            let mut idx: Vec<usize> = (0..d).collect();
            idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            idx.truncate(k);
            idx
        })
        .collect();
    Ok(FeatureSelection { k, per_class })
}

fn by_activation_desc(acts: &ActivationSet, feature: usize) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| {
        acts.row(b)[feature]
            .total_cmp(&acts.row(a)[feature])
            .then_with(|| acts.record(a).image_id.cmp(&acts.record(b).image_id))
    }
}

/// Train rows of `class` sorted by descending activation on `feature`,
/// ties by image id.
pub fn rows_by_activation(acts: &ActivationSet, class: usize, feature: usize) -> Result<Vec<usize>> {
    if class >= acts.num_classes() || feature >= acts.num_features() {
        return Err(ImportanceError::Argument(format!(
            "class {class} / feature {feature} out of range"
        )));
    }
    let mut rows = acts.rows_of(class, Split::Train);
    rows.sort_by(by_activation_desc(acts, feature));
    Ok(rows)
}

pub fn top_activating_images(
    acts: &ActivationSet,
    class: usize,
    feature: usize,
    n: usize,
) -> Result<Vec<String>> {
    if n == 0 {
        return Err(ImportanceError::Argument("n must be positive".into()));
    }
    let rows = rows_by_activation(acts, class, feature)?;
    if rows.len() < n {
        return Err(ImportanceError::Precondition(format!(
            "class {class} has {} train images, fewer than n={n}",
            rows.len()
        )));
    }
    Ok(rows[..n]
        .iter()
        .map(|&r| acts.record(r).image_id.clone())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    CoreSpurious,
    Validation,
}

impl TaskKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::CoreSpurious => "core_spurious",
            TaskKind::Validation => "validation",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "core_spurious" => Ok(TaskKind::CoreSpurious),
            "validation" => Ok(TaskKind::Validation),
            other => Err(format!("unknown task type {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelItem {
    pub image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heatmap: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_attack: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskPanel {
    pub name: String,
    pub items: Vec<PanelItem>,
}

/// One unit of annotation work for a (class, feature) pair.
///
/// Core/spurious tasks carry a `visual_attribute` panel (top activating
/// images) and a `main_object` panel (class exemplars). Validation tasks
/// carry `highest`, `next` and `lowest` panels of five heatmaps each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub task_id: String,
    pub kind: TaskKind,
    pub class: usize,
    pub class_name: String,
    pub feature: usize,
    pub panels: Vec<TaskPanel>,
}

impl AnnotationTask {
    pub fn core_spurious_id(class: usize, feature: usize) -> String {
        format!("cs-{class}-{feature}")
    }

    pub fn validation_id(class: usize, feature: usize) -> String {
        format!("val-{class}-{feature}")
    }

    pub fn image_ids(&self) -> impl Iterator<Item = &str> {
        self.panels
            .iter()
            .flat_map(|p| p.items.iter().map(|i| i.image_id.as_str()))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotationTaskBundle {
    pub dataset: String,
    pub tasks: Vec<AnnotationTask>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl AnnotationTaskBundle {
    pub fn load(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(std::io::Error::other)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(path, text)
    }
}

#[derive(Debug, Clone)]
pub struct TaskExportConfig {
    /// Images per visual-attribute panel.
    pub top_n: usize,
    /// Fraction of the class (by activation) that validation panels draw from.
    pub validation_fraction: f64,
    pub seed: u64,
    /// Heatmaps are referenced as `{dir}/{image_id}_f{feature}.png`.
    pub heatmap_dir: Option<String>,
    pub attack_dir: Option<String>,
}

impl Default for TaskExportConfig {
    fn default() -> Self {
        Self {
            top_n: 5,
            validation_fraction: 0.2,
            seed: 0,
            heatmap_dir: None,
            attack_dir: None,
        }
    }
}

pub fn heatmap_file_name(image_id: &str, feature: usize) -> String {
    format!("{image_id}_f{feature}.png")
}

const VALIDATION_PANEL: usize = 5;

fn panel_item(acts: &ActivationSet, row: usize, feature: usize, cfg: &TaskExportConfig) -> PanelItem {
    let rec = acts.record(row);
    let asset = |dir: &Option<String>| {
        dir.as_ref()
            .map(|d| format!("{d}/{}", heatmap_file_name(&rec.image_id, feature)))
    };
    PanelItem {
        image_id: rec.image_id.clone(),
        image: rec.asset_path.clone(),
        heatmap: asset(&cfg.heatmap_dir),
        feature_attack: asset(&cfg.attack_dir),
    }
}

/// Panels for heatmap validation: from the top `fraction` of the class by
/// activation, the five lowest are one panel; ten more drawn at random from
/// the rest are split into the highest five and the next five.
pub fn validation_panels(
    acts: &ActivationSet,
    class: usize,
    feature: usize,
    fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<[Vec<usize>; 3]> {
    let rows = rows_by_activation(acts, class, feature)?;
    let needed = 3 * VALIDATION_PANEL;
    if rows.len() < needed {
        return Err(ImportanceError::Precondition(format!(
            "class {class} has {} train images; validation panels need {needed}",
            rows.len()
        )));
    }
    let pool_size = ((fraction * rows.len() as f64).ceil() as usize).clamp(needed, rows.len());
    let pool = &rows[..pool_size];
    let lowest = pool[pool_size - VALIDATION_PANEL..].to_vec();
    let mut rest = pool[..pool_size - VALIDATION_PANEL].to_vec();
    rest.shuffle(rng);
    let mut drawn = rest[..2 * VALIDATION_PANEL].to_vec();
    drawn.sort_by(by_activation_desc(acts, feature));
    let next = drawn.split_off(VALIDATION_PANEL);
    Ok([drawn, next, lowest])
}

/// Core/spurious and validation tasks for every selected (class, feature).
/// Main-object exemplars are the class's train images with the highest
/// logit for that class.
pub fn build_task_bundle(
    acts: &ActivationSet,
    head: &HeadWeights,
    selection: &FeatureSelection,
    cfg: &TaskExportConfig,
) -> Result<AnnotationTaskBundle> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut bundle = AnnotationTaskBundle {
        dataset: acts.manifest().name.clone(),
        ..Default::default()
    };
    for (class, features) in selection.per_class.iter().enumerate() {
        let class_name = acts.manifest().class_names[class].clone();
        let mut exemplars = acts.rows_of(class, Split::Train);
        let logit = |r: usize| head.logits(acts.row(r))[class];
        exemplars.sort_by(|&a, &b| {
            logit(b)
                .total_cmp(&logit(a))
                .then_with(|| acts.record(a).image_id.cmp(&acts.record(b).image_id))
        });
        exemplars.truncate(cfg.top_n);
        let main_object = TaskPanel {
            name: "main_object".into(),
            items: exemplars
                .iter()
                .map(|&r| PanelItem {
                    image_id: acts.record(r).image_id.clone(),
                    image: acts.record(r).asset_path.clone(),
                    heatmap: None,
                    feature_attack: None,
                })
                .collect(),
        };
        for &feature in features {
            let top = rows_by_activation(acts, class, feature)?;
            if top.len() < cfg.top_n {
                return Err(ImportanceError::Precondition(format!(
                    "class {class} has {} train images, fewer than n={}",
                    top.len(),
                    cfg.top_n
                )));
            }
            bundle.tasks.push(AnnotationTask {
                task_id: AnnotationTask::core_spurious_id(class, feature),
                kind: TaskKind::CoreSpurious,
                class,
                class_name: class_name.clone(),
                feature,
                panels: vec![
                    TaskPanel {
                        name: "visual_attribute".into(),
                        items: top[..cfg.top_n]
                            .iter()
                            .map(|&r| panel_item(acts, r, feature, cfg))
                            .collect(),
                    },
                    main_object.clone(),
                ],
            });
            match validation_panels(acts, class, feature, cfg.validation_fraction, &mut rng) {
                Ok(panels) => {
                    let names = ["highest", "next", "lowest"];
                    bundle.tasks.push(AnnotationTask {
                        task_id: AnnotationTask::validation_id(class, feature),
                        kind: TaskKind::Validation,
                        class,
                        class_name: class_name.clone(),
                        feature,
                        panels: names
                            .iter()
                            .zip(panels)
                            .map(|(name, rows)| TaskPanel {
                                name: name.to_string(),
                                items: rows
                                    .iter()
                                    .map(|&r| {
                                        let mut item = panel_item(acts, r, feature, cfg);
                                        item.feature_attack = None;
                                        item
                                    })
                                    .collect(),
                            })
                            .collect(),
                    });
                }
                Err(ImportanceError::Precondition(msg)) => bundle.notes.push(msg),
                Err(e) => return Err(e),
            }
        }
    }
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_store::{DatasetManifest, ImageRecord};
    use ndarray::array;

    fn acts(rows: &[(&str, usize, Split, Vec<f32>)], c: usize) -> ActivationSet {
        let d = rows[0].3.len();
        let manifest = DatasetManifest {
            name: "t".into(),
            num_classes: c,
            class_names: (0..c).map(|i| format!("c{i}")).collect(),
            images: rows
                .iter()
                .map(|(id, l, s, _)| ImageRecord {
                    image_id: id.to_string(),
                    label: *l,
                    split: *s,
                    asset_path: None,
                })
                .collect(),
        };
        let flat: Vec<f32> = rows.iter().flat_map(|r| r.3.clone()).collect();
        ActivationSet::new(manifest, Array2::from_shape_vec((rows.len(), d), flat).unwrap()).unwrap()
    }

    #[test]
    fn mean_times_weight() {
        let a = acts(
            &[
                ("a", 0, Split::Train, vec![1.0, 9.0]),
                ("b", 0, Split::Train, vec![3.0, 9.0]),
                // val rows never contribute
                ("v", 0, Split::Val, vec![100.0, 100.0]),
            ],
            1,
        );
        let head = HeadWeights::new(array![[0.5], [0.0]], array![3.0]).unwrap();
        let t = feature_importance(&a, &head).unwrap();
        assert_eq!(t.values[[0, 0]], 1.0);
        assert_eq!(t.values[[0, 1]], 0.0);
    }

    #[test]
    fn top_features_sort_and_tie_break() {
        let t = ImportanceTable {
            values: array![[0.1, 0.9, 0.5]],
        };
        assert_eq!(select_top_features(&t, 2).unwrap().per_class, vec![vec![1, 2]]);
        let t = ImportanceTable {
            values: array![[0.5, 0.5]],
        };
        assert_eq!(select_top_features(&t, 1).unwrap().per_class, vec![vec![0]]);
        assert!(select_top_features(&t, 3).is_err());
    }

    #[test]
    fn negative_importance_is_kept() {
        let t = ImportanceTable {
            values: array![[-0.3, -0.1]],
        };
        assert_eq!(select_top_features(&t, 2).unwrap().per_class, vec![vec![1, 0]]);
    }

    #[test]
    fn top_activating_sorted() {
        let a = acts(
            &[
                ("a", 0, Split::Train, vec![2.0]),
                ("b", 0, Split::Train, vec![5.0]),
                ("c", 0, Split::Train, vec![1.0]),
            ],
            1,
        );
        assert_eq!(top_activating_images(&a, 0, 0, 2).unwrap(), vec!["b", "a"]);
        assert_eq!(
            top_activating_images(&a, 0, 0, 3).unwrap(),
            vec!["b", "a", "c"]
        );
        assert!(matches!(
            top_activating_images(&a, 0, 0, 4),
            Err(ImportanceError::Precondition(_))
        ));
    }

    #[test]
    fn activation_ties_by_image_id() {
        let a = acts(
            &[
                ("z", 0, Split::Train, vec![1.0]),
                ("m", 0, Split::Train, vec![1.0]),
            ],
            1,
        );
        assert_eq!(top_activating_images(&a, 0, 0, 2).unwrap(), vec!["m", "z"]);
    }

    #[test]
    fn validation_panels_draw_from_top_fraction() {
        let rows: Vec<(String, usize, Split, Vec<f32>)> = (0..100)
            .map(|i| (format!("i{i:03}"), 0, Split::Train, vec![i as f32]))
            .collect();
        let borrowed: Vec<(&str, usize, Split, Vec<f32>)> = rows
            .iter()
            .map(|(id, l, s, v)| (id.as_str(), *l, *s, v.clone()))
            .collect();
        let a = acts(&borrowed, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let [high, next, low] = validation_panels(&a, 0, 0, 0.2, &mut rng).unwrap();
        // top 20% are activations 80..=99; the lowest five of those are 80..=84
        let act = |r: &usize| a.row(*r)[0];
        let mut low_vals: Vec<f32> = low.iter().map(act).collect();
        low_vals.sort_by(f32::total_cmp);
        assert_eq!(low_vals, vec![80.0, 81.0, 82.0, 83.0, 84.0]);
        assert!(high.iter().chain(&next).all(|r| act(r) >= 85.0));
        assert!(high.iter().map(act).fold(f32::INFINITY, f32::min)
            >= next.iter().map(act).fold(f32::NEG_INFINITY, f32::max));
    }
}
