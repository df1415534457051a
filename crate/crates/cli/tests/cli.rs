use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use serde_json::{json, Value};
use spuriosity::annotation::SpuriositySpec;
use spuriosity::scoring::{class_feature_stats, rank_all, spuriosity_scores};
use spuriosity::tensor_store::{load_dataset, Split};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_spuriosity"))
}

fn spuriosity(out: &Path, args: &[&str]) -> Output {
    bin().arg("--out").arg(out).args(args).output().unwrap()
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = spuriosity(out, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
}

impl Fixture {
    fn collision(extra: &[&str]) -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        let data = root.join("data");
        let mut args = vec!["synth", "--kind", "collision", "--dir", data.to_str().unwrap(), "--train-per-class", "40", "--val-per-class", "30"];
        args.extend_from_slice(extra);
        ok(&root.join("out"), &args);
        Self { _tmp: tmp, root, data }
    }

    fn out(&self) -> PathBuf {
        self.root.join("out")
    }

    fn path(&self, name: &str) -> String {
        self.data.join(name).to_str().unwrap().to_string()
    }

    /// `--manifest … --activations …` followed by `rest`.
    fn args<'a>(&'a self, cmd: &'a str, owned: &'a [String], rest: &[&'a str]) -> Vec<&'a str> {
        let mut v = vec![cmd, "--manifest", &owned[0], "--activations", &owned[1]];
        v.extend_from_slice(rest);
        v
    }

    fn data_paths(&self) -> [String; 4] {
        [
            self.path("manifest.json"),
            self.path("activations.sptf"),
            self.path("spec.json"),
            self.path("head.sptf"),
        ]
    }
}

#[test]
fn rank_matches_scoring_and_is_deterministic() {
    let fx = Fixture::collision(&[]);
    let p = fx.data_paths();
    ok(&fx.out(), &fx.args("rank", &p, &["--spec", &p[2]]));
    let first = std::fs::read(fx.out().join("rankings/val.csv")).unwrap();
    ok(&fx.out(), &fx.args("rank", &p, &["--spec", &p[2]]));
    assert_eq!(first, std::fs::read(fx.out().join("rankings/val.csv")).unwrap());

    let bundle = load_dataset(&p[0], &p[1], None, None).unwrap();
    let spec = SpuriositySpec::load(&p[2]).unwrap();
    let stats = class_feature_stats(&bundle.acts).unwrap();
    let scores = spuriosity_scores(&bundle.acts, &spec, &stats).unwrap();
    let mut expected = String::from("class,rank,image_id,score\n");
    for r in rank_all(&scores, Split::Val) {
        for (i, e) in r.entries.iter().enumerate() {
            expected.push_str(&format!("{},{},{},", r.class, i + 1, e.image_id));
            let written: f64 = String::from_utf8_lossy(&first)
                .lines()
                .find(|l| l.contains(&format!(",{},", e.image_id)))
                .and_then(|l| l.rsplit(',').next())
                .unwrap()
                .parse()
                .unwrap();
            assert_eq!(written, e.score);
            expected.push_str(&format!("{written:?}\n"));
        }
    }
    let ids = |s: &str| s.lines().map(|l| l.rsplitn(2, ',').nth(1).unwrap().to_string()).collect::<Vec<_>>();
    assert_eq!(ids(&String::from_utf8(first).unwrap()), ids(&expected));
    assert_eq!(json(fx.out().join("rankings/spec.json")), json(&p[2]));
}

#[test]
fn perfect_predictions_have_zero_gap() {
    let fx = Fixture::collision(&[]);
    let p = fx.data_paths();
    let manifest = json(&p[0]);
    let mut csv = String::from("image_id,predicted_class\n");
    for img in manifest["images"].as_array().unwrap() {
        csv.push_str(&format!("{},{}\n", img["image_id"].as_str().unwrap(), img["label"]));
    }
    let preds = fx.root.join("perfect.csv");
    std::fs::write(&preds, csv).unwrap();
    let stdout = ok(&fx.out(), &fx.args("gap", &p, &["--spec", &p[2], "--preds", preds.to_str().unwrap(), "--k", "10"]));
    assert!(stdout.contains("perfect"));
    let reports = json(fx.out().join("reports/gaps.json"));
    for g in reports[0]["classes"].as_array().unwrap() {
        assert_eq!(g["gap"], 0.0);
    }
    let csv = std::fs::read_to_string(fx.out().join("reports/gaps.csv")).unwrap();
    assert!(csv.starts_with("model,class,acc_top,acc_bot,gap\n"));
}

#[test]
fn gap_reads_rankings_csv() {
    let fx = Fixture::collision(&[]);
    let p = fx.data_paths();
    ok(&fx.out(), &fx.args("rank", &p, &["--spec", &p[2], "--split", "val"]));
    ok(&fx.out(), &fx.args("gap", &p, &["--spec", &p[2], "--head", &p[3]]));
    let from_spec = json(fx.out().join("reports/gaps.json"));
    let rankings = fx.out().join("rankings/val.csv");
    ok(&fx.out(), &fx.args("gap", &p, &["--rankings", rankings.to_str().unwrap(), "--head", &p[3]]));
    assert_eq!(from_spec, json(fx.out().join("reports/gaps.json")));
}

#[test]
fn model_comparisons() {
    let fx = Fixture::collision(&[]);
    let p = fx.data_paths();
    ok(&fx.out(), &fx.args("fit-head", &p, &[]));
    let fitted = fx.out().join("reports/head.sptf");
    let fit = json(fx.out().join("reports/fit_head.json"));
    assert!(fit["val_accuracy"].as_f64().unwrap() > 0.9);
    let heads = ["--spec", &p[2], "--head", &p[3], "--head", fitted.to_str().unwrap()];
    ok(&fx.out(), &fx.args("effrob", &p, &heads));
    let er = json(fx.out().join("reports/effective_robustness.json"));
    let sum: f64 = er["models"].as_array().unwrap().iter().map(|m| m["residual"].as_f64().unwrap()).sum();
    assert!(sum.abs() < 1e-12);
    let o = spuriosity(&fx.out(), &fx.args("correlate", &p, &heads));
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("at least 3 classes"));

    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("planted");
    let out = tmp.path().join("out");
    ok(&out, &["synth", "--kind", "planted", "--dir", data.to_str().unwrap(), "--train-per-class", "40", "--val-per-class", "20"]);
    let path = |n: &str| data.join(n).to_str().unwrap().to_string();
    let (m, a, s, h) = (path("manifest.json"), path("activations.sptf"), path("spec.json"), path("head.sptf"));
    ok(&out, &["correlate", "--manifest", &m, "--activations", &a, "--spec", &s, "--head", &h, "--head", &h]);
    let corr = json(out.join("reports/gap_correlation.json"));
    assert_eq!(corr["models"], json!(["head", "head"]));
}

#[test]
fn tune_writes_trace_with_stop_reason() {
    let fx = Fixture::collision(&[]);
    let p = fx.data_paths();
    let stdout = ok(
        &fx.out(),
        &fx.args("tune", &p, &["--spec", &p[2], "--head", &p[3], "--mode", "low_spuriosity", "--per-class", "20", "--early-stop", "0.05", "--max-epochs", "5"]),
    );
    assert!(stdout.starts_with("epoch"));
    let trace = json(fx.out().join("reports/tuning_trace.json"));
    assert!(["gap_threshold", "max_epochs"].contains(&trace["trace"]["stop_reason"].as_str().unwrap()));
    assert_eq!(trace["config"]["images_per_class"], 20);
    assert_eq!(trace["num_images"], 40);
    assert!(fx.out().join("reports/tuned_head.sptf").is_file());
    assert!(fx.out().join("reports/predictions/tuned.csv").is_file());
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    assert_eq!(spuriosity(&out, &["bogus"]).status.code(), Some(2));
    assert_eq!(spuriosity(&out, &["gap", "--k", "10"]).status.code(), Some(2));
    let o = spuriosity(&out, &["ingest", "--manifest", "missing.json", "--activations", "missing.sptf"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error: "));

    let fx = Fixture::collision(&[]);
    let p = fx.data_paths();
    let o = spuriosity(&fx.out(), &fx.args("tune", &p, &["--spec", &p[2], "--head", &p[3], "--early-stop", "1.5"]));
    assert_eq!(o.status.code(), Some(1));
    let o = spuriosity(&fx.out(), &fx.args("rank", &p, &[]));
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn output_dir_from_environment() {
    let fx = Fixture::collision(&[]);
    let p = fx.data_paths();
    let env_out = fx.root.join("env-out");
    let o = bin()
        .env("SPURIOSITY_OUT", &env_out)
        .args(fx.args("ingest", &p, &["--head", &p[3]]))
        .output()
        .unwrap();
    assert!(o.status.success());
    let report = json(env_out.join("reports/ingest.json"));
    assert_eq!(report["num_images"], 140);
    assert_eq!(report["classes"][1]["train"], 40);
}

fn vote_line(task: &str, worker: usize, answer: &str) -> String {
    json!({"type": "core_spurious", "task_id": task, "worker_id": format!("w{worker}"), "answer": answer, "confidence": 4}).to_string()
}

#[test]
fn labels_feed_back_into_rank() {
    let fx = Fixture::collision(&[]);
    let p = fx.data_paths();
    ok(&fx.out(), &fx.args("importance", &p, &["--head", &p[3], "--top-k", "2"]));
    let tasks = fx.out().join("labels/tasks.json");
    let bundle = json(&tasks);
    assert_eq!(bundle["tasks"].as_array().unwrap().len(), 8);
    assert!(fx.out().join("reports/importance.csv").is_file());
    assert_eq!(json(fx.out().join("reports/top_features.json"))["per_class"][1], json!([1, 0]));

    let log = fx.out().join("labels/responses.jsonl");
    let lines: Vec<String> = (0..5).map(|w| vote_line("cs-1-1", w, if w < 3 { "background" } else { "main_object" })).collect();
    std::fs::write(&log, lines.join("\n") + "\n").unwrap();
    let store = ["--spec", &p[2], "--tasks", tasks.to_str().unwrap(), "--log", log.to_str().unwrap()];
    ok(&fx.out(), &fx.args("rank", &p, &store));
    let spec: SpuriositySpec = serde_json::from_value(json(fx.out().join("rankings/spec.json"))).unwrap();
    assert_eq!(spec, SpuriositySpec::from_pairs([(0, 2), (1, 0), (1, 1)]));
}

#[test]
fn segmentation_commands() {
    let fx = Fixture::collision(&["--spatial", "7", "--images", "24"]);
    let p = fx.data_paths();
    let spatial = fx.path("spatial.sptf");
    ok(
        &fx.out(),
        &fx.args("importance", &p, &["--head", &p[3], "--top-k", "1", "--heatmap-dir", "heatmaps", "--spatial", &spatial]),
    );
    let bundle = json(fx.out().join("labels/tasks.json"));
    let heatmap = bundle["tasks"][0]["panels"][0]["items"][0]["heatmap"].as_str().unwrap();
    let overlay = image::open(fx.data.join(heatmap)).unwrap();
    assert_eq!((overlay.width(), overlay.height()), (24, 24));

    let core = fx.root.join("core.json");
    std::fs::write(&core, r#"{"classes": {"0": [0], "1": [1]}}"#).unwrap();
    let core = core.to_str().unwrap();
    ok(&fx.out(), &fx.args("crop", &p, &["--spatial", &spatial, "--core", core, "--write-images"]));
    let crops = json(fx.out().join("crops/crops.json"));
    let crops = crops.as_array().unwrap();
    assert_eq!(crops.len(), 60);
    for c in crops {
        let (x0, x1) = (c["x0"].as_u64().unwrap(), c["x1"].as_u64().unwrap());
        let (y0, y1) = (c["y0"].as_u64().unwrap(), c["y1"].as_u64().unwrap());
        assert!(x0 < x1 && x1 <= 24 && y0 < y1 && y1 <= 24);
        let img = image::open(fx.out().join(format!("crops/{}.png", c["image_id"].as_str().unwrap()))).unwrap();
        assert_eq!((img.width() as u64, img.height() as u64), (x1 - x0, y1 - y0));
    }

    ok(
        &fx.out(),
        &fx.args("corrupt", &p, &["--spatial", &spatial, "--core", core, "--feature", "2", "--class", "0", "--n", "4", "--kind", "gray"]),
    );
    let index = json(fx.out().join("reports/corrupted/gray_f2.json"));
    assert_eq!(index["corruption"], json!({"kind": "gray"}));
    for id in index["images"].as_array().unwrap() {
        let id = id.as_str().unwrap();
        let img = image::open(fx.out().join(format!("reports/corrupted/gray_f2/{id}.png"))).unwrap();
        assert_eq!(img.width(), 24);
    }

    let preds = fx.root.join("clean.csv");
    ok(&fx.out(), &fx.args("fit-head", &p, &[]));
    std::fs::copy(fx.out().join("reports/predictions/fit_head.csv"), &preds).unwrap();
    let preds = preds.to_str().unwrap();
    let stdout = ok(
        &fx.out(),
        &fx.args("sensitivity", &p, &["--clean", preds, "--corrupted", preds, "--class", "0", "--feature", "2", "--n", "10"]),
    );
    assert!(stdout.contains("drop +0.0000"));
    let report = json(fx.out().join("reports/sensitivity_c0_f2.json"));
    assert_eq!(report["drop"], 0.0);
    assert_eq!(report["images"].as_array().unwrap().len(), 10);
}

fn http(addr: &str, method: &str, path: &str, body: Option<&Value>) -> (u16, Value) {
    let mut stream = TcpStream::connect(addr).unwrap();
    let body = body.map(Value::to_string).unwrap_or_default();
    write!(
        stream,
        "{method} {path} HTTP/1.1\r\nHost: {addr}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )
    .unwrap();
    let mut raw = String::new();
    stream.read_to_string(&mut raw).unwrap();
    let status = raw[9..12].parse().unwrap();
    let (_, payload) = raw.split_once("\r\n\r\n").unwrap();
    (status, serde_json::from_str(payload).unwrap_or(Value::Null))
}

struct Server(std::process::Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn serve_round_trip() {
    let fx = Fixture::collision(&[]);
    let p = fx.data_paths();
    ok(&fx.out(), &fx.args("importance", &p, &["--head", &p[3], "--top-k", "2"]));
    let mut child = bin()
        .arg("--out")
        .arg(fx.out())
        .args(fx.args("serve", &p, &["--spec", &p[2], "--addr", "127.0.0.1:0"]))
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let stdout = child.stdout.take().unwrap();
    let server = Server(child);
    let mut line = String::new();
    BufReader::new(stdout).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on http://").unwrap().to_string();

    let (status, page) = http(&addr, "GET", "/tasks?type=core_spurious", None);
    assert_eq!(status, 200);
    assert_eq!(page["total"], 4);
    for w in 0..3 {
        let body = json!({"type": "core_spurious", "task_id": "cs-1-1", "worker_id": format!("w{w}"), "answer": "background", "confidence": 5});
        assert_eq!(http(&addr, "POST", "/tasks/cs-1-1/responses", Some(&body)).0, 201);
    }
    let (_, spec) = http(&addr, "GET", "/spec", None);
    assert_eq!(spec["classes"]["1"], json!([0, 1]));
    let (status, ranking) = http(&addr, "GET", "/rankings/1?k=3", None);
    assert_eq!(status, 200);
    assert_eq!(ranking["features"], json!([0, 1]));
    drop(server);

    let log = fx.out().join("labels/responses.jsonl");
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 3);
    let tasks = fx.out().join("labels/tasks.json");
    ok(&fx.out(), &fx.args("rank", &p, &["--spec", &p[2], "--tasks", tasks.to_str().unwrap(), "--log", log.to_str().unwrap(), "--split", "val"]));
    let csv = std::fs::read_to_string(fx.out().join("rankings/val.csv")).unwrap();
    let top: Vec<&str> = csv.lines().filter(|l| l.starts_with("1,")).take(3).map(|l| l.split(',').nth(2).unwrap()).collect();
    let served: Vec<&str> = ranking["top"].as_array().unwrap().iter().map(|e| e["image_id"].as_str().unwrap()).collect();
    assert_eq!(top, served);
}
