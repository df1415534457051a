use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::Serialize;
use spuriosity::annotation::{AnnotationStore, SpuriositySpec};
use spuriosity::importance::AnnotationTaskBundle;
use spuriosity::tensor_store::{load_dataset, ActivationSet, DatasetBundle, PredictionTable, Split};

use crate::DataArgs;

/// Output root with its fixed subdirectories.
#[derive(Debug, Clone)]
pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn new(root: PathBuf) -> Self {
        Self { root }
    }

    fn sub(&self, name: &str) -> Result<PathBuf> {
        let dir = self.root.join(name);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }

    pub fn rankings(&self) -> Result<PathBuf> {
        self.sub("rankings")
    }

    pub fn reports(&self) -> Result<PathBuf> {
        self.sub("reports")
    }

    pub fn labels(&self) -> Result<PathBuf> {
        self.sub("labels")
    }

    pub fn crops(&self) -> Result<PathBuf> {
        self.sub("crops")
    }

    /// Default location of the task bundle written by `importance`.
    pub fn tasks_file(&self) -> PathBuf {
        self.root.join("labels").join("tasks.json")
    }

    /// Default location of the response log written by `serve`.
    pub fn log_file(&self) -> PathBuf {
        self.root.join("labels").join("responses.jsonl")
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn load_bundle(data: &DataArgs, spatial: Option<&Path>, head: Option<&Path>) -> Result<DatasetBundle> {
    load_dataset(&data.manifest, &data.activations, spatial, head).with_context(|| {
        format!(
            "loading {} with {}",
            data.manifest.display(),
            data.activations.display()
        )
    })
}

pub fn load_acts(data: &DataArgs) -> Result<ActivationSet> {
    Ok(load_bundle(data, None, None)?.acts)
}

/// Directory that relative asset paths in the manifest resolve against.
pub fn asset_root(data: &DataArgs) -> PathBuf {
    data.manifest
        .parent()
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

pub fn load_predictions(path: &Path, acts: &ActivationSet) -> Result<PredictionTable> {
    let table = PredictionTable::load_csv(path).with_context(|| format!("reading {}", path.display()))?;
    table.validate(acts.manifest())?;
    Ok(table)
}

/// Where S(c) comes from: a spec file, the annotation store, or both (store
/// labels applied on top of the file).
#[derive(Debug, Clone, Args)]
pub struct SpecArgs {
    /// Spurious feature sets as JSON `{"classes": {"<class>": [features]}}`.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Task bundle; with `--log`, aggregated labels refine the spec.
    #[arg(long, requires = "log")]
    pub tasks: Option<PathBuf>,
    /// Response log of the annotation store.
    #[arg(long, requires = "tasks")]
    pub log: Option<PathBuf>,
}

impl SpecArgs {
    pub fn store(&self) -> Result<Option<AnnotationStore>> {
        match (&self.tasks, &self.log) {
            (Some(tasks), Some(log)) => {
                let bundle = AnnotationTaskBundle::load(tasks)
                    .with_context(|| format!("reading {}", tasks.display()))?;
                Ok(Some(AnnotationStore::open(bundle, log)?))
            }
            _ => Ok(None),
        }
    }

    pub fn resolve(&self) -> Result<SpuriositySpec> {
        let base = match &self.spec {
            Some(p) => SpuriositySpec::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => SpuriositySpec::default(),
        };
        let spec = match self.store()? {
            Some(store) => base.with_labels(&store.labels()),
            None if self.spec.is_none() => bail!("no spurious features given: pass --spec or --tasks with --log"),
            None => base,
        };
        Ok(spec)
    }
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub spatial: Option<PathBuf>,
    #[arg(long)]
    pub head: Option<PathBuf>,
    /// Prediction tables to check against the manifest.
    #[arg(long = "preds")]
    pub preds: Vec<PathBuf>,
}

#[derive(Debug, Serialize)]
struct ClassCount {
    class: usize,
    name: String,
    train: usize,
    val: usize,
}

#[derive(Debug, Serialize)]
struct IngestReport {
    dataset: String,
    num_images: usize,
    num_features: usize,
    num_classes: usize,
    classes: Vec<ClassCount>,
    #[serde(skip_serializing_if = "Option::is_none")]
    spatial_map_size: Option<(usize, usize)>,
    head: bool,
    predictions: Vec<String>,
}

pub fn ingest(out: &OutDir, args: &IngestArgs) -> Result<()> {
    let bundle = load_bundle(&args.data, args.spatial.as_deref(), args.head.as_deref())?;
    let acts = &bundle.acts;
    let mut predictions = Vec::new();
    for p in &args.preds {
        predictions.push(load_predictions(p, acts)?.model_name);
    }
    let manifest = acts.manifest();
    let report = IngestReport {
        dataset: manifest.name.clone(),
        num_images: acts.num_images(),
        num_features: acts.num_features(),
        num_classes: acts.num_classes(),
        classes: (0..acts.num_classes())
            .map(|c| ClassCount {
                class: c,
                name: manifest.class_names[c].clone(),
                train: acts.rows_of(c, Split::Train).len(),
                val: acts.rows_of(c, Split::Val).len(),
            })
            .collect(),
        spatial_map_size: bundle.spatial.as_ref().map(|s| s.map_size()),
        head: bundle.head.is_some(),
        predictions,
    };
    let path = out.reports()?.join("ingest.json");
    write_json(&path, &report)?;
    println!(
        "{}: {} images, {} features, {} classes; ok",
        report.dataset, report.num_images, report.num_features, report.num_classes
    );
    Ok(())
}
