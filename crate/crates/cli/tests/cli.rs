use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
preset = "desk"
novel_classes = [2]

[detector]
stem_channels = 4
stage_channels = [4, 6, 6, 8]
fpn_channels = 4
head_hidden = 8
roi_size = 3
rpn_pre_nms = 64
rpn_post_nms = 16
resize = { shorter = 64.0, max_longer = 107.0 }

[train]
base_schedule = [[4, 0.01]]
finetune_schedule = [[3, 0.01]]
warmup_iters = 0
batch_size = 2
rpn_batch = 16
roi_batch = 8

[synthetic]
image_width = 64
image_height = 64
max_objects_per_image = 2
classes = [
  { name = "disk", shape = "disk", instances = 6, scales = [[14.0, 1.0], [28.0, 1.0]] },
  { name = "square", shape = "square", instances = 6, scales = [[14.0, 1.0], [28.0, 1.0]] },
  { name = "ring", shape = "ring", instances = 6, scales = [[14.0, 1.0], [28.0, 1.0]] },
]
"#;

struct Env {
    dir: tempfile::TempDir,
    config: PathBuf,
}

impl Env {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("tiny.toml");
        fs::write(&config, TINY).unwrap();
        Self { dir, config }
    }

    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_mpsr"))
            .arg("--quiet")
            .args(args)
            .arg("--config")
            .arg(&self.config)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }

    fn s(&self, p: &str) -> String {
        self.path(p).display().to_string()
    }
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn full_pipeline_runs() {
    let e = Env::new();
    e.ok(&["generate", "--out", &e.s("data"), "--seed", "3"]);
    e.ok(&["prepare", "--dataset", &e.s("data"), "--out", &e.s("shots"), "--k", "2", "--seed", "1"]);
    let prov = json(&e.path("shots/provenance.json"));
    assert_eq!(prov["instances_per_class"], serde_json::json!([2, 2, 2]));
    assert_eq!(prov["source_sha256"].as_str().unwrap().len(), 64);

    e.ok(&["train-base", "--dataset", &e.s("data"), "--out", &e.s("base")]);
    assert!(e.path("base/checkpoint/manifest.json").exists());
    assert_eq!(fs::read_to_string(e.path("base/train_log.jsonl")).unwrap().lines().count(), 5);

    e.ok(&[
        "finetune",
        "--checkpoint",
        &e.s("base/checkpoint"),
        "--dataset",
        &e.s("shots"),
        "--out",
        &e.s("ft"),
        "--mode",
        "mpsr",
        "--refine",
        "rpn",
    ]);
    let log = fs::read_to_string(e.path("ft/train_log.jsonl")).unwrap();
    let header: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(header["config"]["refine_rpn"], true);
    assert_eq!(header["config"]["refine_roi"], false);
    let snap = json(&e.path("ft/config.json"));
    assert_eq!(snap["experiment"]["train"]["mode"], "mpsr");

    e.ok(&["eval", "--checkpoint", &e.s("ft/checkpoint"), "--dataset", &e.s("data"), "--out", &e.s("eval")]);
    let report = json(&e.path("eval/report.json"));
    assert_eq!(report["per_class"].as_array().unwrap().len(), 3);
    let csv = fs::read_to_string(e.path("eval/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn analyze_scales_counts_every_instance() {
    let e = Env::new();
    e.ok(&["generate", "--out", &e.s("data")]);
    e.ok(&["analyze-scales", "--dataset", &e.s("data"), "--out", &e.s("hist"), "--bin-width", "8", "--max-scale", "64", "--chart"]);
    let csv = fs::read_to_string(e.path("hist/scale_histogram.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("class,bin_lo,bin_hi,count"));
    let total: usize = lines.map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(total, 18);
    assert!(fs::read_to_string(e.path("hist/scale_histogram.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn untrained_checkpoint_evaluates() {
    let e = Env::new();
    e.ok(&["generate", "--out", &e.s("data")]);
    let toml = TINY.replace("base_schedule = [[4, 0.01]]", "base_schedule = []");
    fs::write(&e.config, toml).unwrap();
    e.ok(&["train-base", "--dataset", &e.s("data"), "--out", &e.s("base")]);
    e.ok(&["eval", "--checkpoint", &e.s("base/checkpoint"), "--dataset", &e.s("data"), "--out", &e.s("eval")]);
    let report = json(&e.path("eval/report.json"));
    for c in report["per_class"].as_array().unwrap() {
        let ap = c["ap"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&ap));
    }
}

#[test]
fn same_seed_same_bytes() {
    let e = Env::new();
    e.ok(&["generate", "--out", &e.s("a"), "--seed", "9"]);
    e.ok(&["generate", "--out", &e.s("b"), "--seed", "9"]);
    let read = |d: &str| {
        let mut files: Vec<(String, Vec<u8>)> = Vec::new();
        for sub in ["", "images"] {
            for entry in fs::read_dir(e.path(d).join(sub)).unwrap() {
                let p = entry.unwrap().path();
                if p.is_file() && p.file_name().unwrap() != "config.json" {
                    files.push((p.file_name().unwrap().to_string_lossy().into(), fs::read(&p).unwrap()));
                }
            }
        }
        files.sort();
        files
    };
    let (a, b) = (read("a"), read("b"));
    assert!(a.len() > 1);
    assert_eq!(a, b);
}

#[test]
fn missing_inputs_are_usage_errors() {
    let e = Env::new();
    let cases: [&[&str]; 4] = [
        &["prepare", "--dataset", "/nonexistent", "--out", "x"],
        &["train-base", "--dataset", "/nonexistent", "--out", "x"],
        &["eval", "--checkpoint", "/nonexistent", "--dataset", "/nonexistent", "--out", "x"],
        &["train-base", "--dataset", "/nonexistent", "--out", "x", "--refine", "rpn", "--mode", "baseline_fpn"],
    ];
    for args in cases {
        let out = e.run(args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(!out.stderr.is_empty());
    }
}

#[test]
fn unknown_config_key_is_reported() {
    let e = Env::new();
    fs::write(&e.config, format!("{TINY}\n[extra]\nx = 1\n")).unwrap();
    let out = e.run(&["generate", "--out", &e.s("data")]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("extra"));
}
