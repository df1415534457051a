use std::fs;
use std::io::Write as _;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use image::RgbImage;
use spuriosity::annotation::{AnnotationStore, SpuriositySpec};
use spuriosity::importance::{
    build_task_bundle, feature_importance, heatmap_file_name, select_top_features,
    AnnotationTaskBundle, TaskExportConfig,
};
use spuriosity::segmentation::{heatmap_overlay, load_rgb, soft_segmentation};
use spuriosity_server::{router, serve as serve_api, AppState, StaticDirs};

use crate::layout::{asset_root, load_bundle, write_json, OutDir};
use crate::DataArgs;

#[derive(Debug, Args)]
pub struct ImportanceArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub head: PathBuf,
    /// Features selected per class.
    #[arg(long, default_value_t = 5)]
    pub top_k: usize,
    /// Images per visual-attribute panel.
    #[arg(long, default_value_t = 5)]
    pub top_n: usize,
    #[arg(long, default_value_t = 0.2)]
    pub validation_fraction: f64,
    /// Asset-relative directory the tasks reference heatmaps in.
    #[arg(long)]
    pub heatmap_dir: Option<String>,
    /// Render heatmap overlays into `--heatmap-dir` from these spatial maps.
    #[arg(long, requires = "heatmap_dir")]
    pub spatial: Option<PathBuf>,
    /// Side length for heatmaps of images without a readable asset.
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
}

pub fn importance(out: &OutDir, seed: u64, args: &ImportanceArgs) -> Result<()> {
    let bundle = load_bundle(&args.data, args.spatial.as_deref(), Some(&args.head))?;
    let acts = &bundle.acts;
    let head = bundle.head.as_ref().context("head missing after load")?;
    let table = feature_importance(acts, head)?;
    let selection = select_top_features(&table, args.top_k)?;
    let cfg = TaskExportConfig {
        top_n: args.top_n,
        validation_fraction: args.validation_fraction,
        seed,
        heatmap_dir: args.heatmap_dir.clone(),
        attack_dir: None,
    };
    let tasks = build_task_bundle(acts, head, &selection, &cfg)?;

    let reports = out.reports()?;
    let mut csv = String::from("class,feature,importance\n");
    for ((class, feature), v) in table.values.indexed_iter() {
        csv.push_str(&format!("{class},{feature},{v}\n"));
    }
    fs::write(reports.join("importance.csv"), csv)?;
    write_json(&reports.join("top_features.json"), &selection)?;
    tasks
        .save(out.labels()?.join("tasks.json"))
        .context("writing task bundle")?;

    if let (Some(spatial), Some(dir)) = (&bundle.spatial, &args.heatmap_dir) {
        let root = asset_root(&args.data);
        let target = root.join(dir);
        fs::create_dir_all(&target)?;
        let mut written = std::collections::BTreeSet::new();
        for task in &tasks.tasks {
            for item in task.panels.iter().flat_map(|p| &p.items) {
                if item.heatmap.is_none() || !written.insert((item.image_id.clone(), task.feature)) {
                    continue;
                }
                let image = match item.image.as_ref().map(|p| root.join(p)).filter(|p| p.is_file()) {
                    Some(path) => load_rgb(path)?,
                    None => {
                        let side = args.image_size.with_context(|| {
                            format!("image {:?} has no readable asset; pass --image-size", item.image_id)
                        })? as u32;
                        RgbImage::new(side, side)
                    }
                };
                let (w, h) = image.dimensions();
                let seg = soft_segmentation(spatial, acts, &item.image_id, task.feature, h as usize, w as usize)?;
                heatmap_overlay(&image, &seg, args.alpha)?
                    .save(target.join(heatmap_file_name(&item.image_id, task.feature)))?;
            }
        }
        println!("{} heatmaps -> {}", written.len(), target.display());
    }
    for note in &tasks.notes {
        eprintln!("note: {note}");
    }
    println!(
        "{} classes x {} features, {} tasks",
        acts.num_classes(),
        args.top_k,
        tasks.tasks.len()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Task bundle; `<out>/labels/tasks.json` by default.
    #[arg(long)]
    pub tasks: Option<PathBuf>,
    /// Response log; `<out>/labels/responses.jsonl` by default.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Spurious features known before annotation.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Core/spurious responses that complete a task.
    #[arg(long, default_value_t = 5)]
    pub responses_per_task: usize,
    /// Served under `/assets`; the manifest's directory by default.
    #[arg(long)]
    pub assets: Option<PathBuf>,
    /// Built annotation UI, served at the root.
    #[arg(long)]
    pub ui: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
}

pub fn serve(out: &OutDir, args: &ServeArgs) -> Result<()> {
    let acts = load_bundle(&args.data, None, None)?.acts;
    let tasks_path = args.tasks.clone().unwrap_or_else(|| out.tasks_file());
    let bundle = AnnotationTaskBundle::load(&tasks_path)
        .with_context(|| format!("reading {}", tasks_path.display()))?;
    let log = match &args.log {
        Some(p) => p.clone(),
        None => {
            out.labels()?;
            out.log_file()
        }
    };
    let mut store = AnnotationStore::open(bundle, &log)?;
    store.set_responses_per_task(args.responses_per_task);
    let spec = match &args.spec {
        Some(p) => SpuriositySpec::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => SpuriositySpec::default(),
    };
    let state = AppState::new(store, acts, spec)?;
    let dirs = StaticDirs {
        assets: Some(args.assets.clone().unwrap_or_else(|| asset_root(&args.data))),
        ui: args.ui.clone(),
    };
    let app = router(state, &dirs);
    let runtime = tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(&args.addr)
            .await
            .with_context(|| format!("binding {}", args.addr))?;
        println!("listening on http://{}", listener.local_addr()?);
        std::io::stdout().flush()?;
        serve_api(listener, app).await?;
        Ok(())
    })
}
