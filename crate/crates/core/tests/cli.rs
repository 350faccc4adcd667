use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dsc_core::checkpoint::Checkpoint;
use dsc_core::experiment::{RunManifest, REPORTS_FILE};
use dsc_core::probe::ProbeReport;

const TINY: &str = "data.image_size=32\ndata.num_images=8\ndata.eval_images=4\n\
model.width=4\nmodel.depth=2\nmodel.output_stride=4\nmodel.embed_dim=8\n\
train.batch_size=4\ntrain.epochs=1\nqueue.instance=16\nqueue.dense=16\n\
kmeans.K=4\nproto.K=4\nprobe.train_images=8\nprobe.epochs=2\n";

fn dsc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsc"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

struct Fixture {
    dir: tempfile::TempDir,
    cfg: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("tiny.cfg");
        std::fs::write(&cfg, TINY).unwrap();
        Self { dir, cfg }
    }

    fn out(&self) -> String {
        self.dir.path().join("runs").display().to_string()
    }

    fn pretrain(&self, extra: &[&str]) -> Output {
        let cfg = self.cfg.display().to_string();
        let out = self.out();
        let mut args = vec!["pretrain", "--config", &cfg, "--out", &out];
        args.extend_from_slice(extra);
        dsc(&args)
    }
}

fn run_dir_of(o: &Output) -> PathBuf {
    PathBuf::from(stdout(o).trim())
}

fn ckpt_names(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("ckpt_"))
        .collect();
    v.sort();
    v
}

#[test]
fn pretrain_creates_complete_run_directory() {
    let f = Fixture::new();
    let o = f.pretrain(&["--set", "loss.strategy=km", "--seed", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = run_dir_of(&o);
    let name = run.file_name().unwrap().to_string_lossy().into_owned();
    assert!(name.starts_with("run_") && name.ends_with("_s5"), "{name}");
    let m = RunManifest::load(&run).unwrap();
    assert!(m.missing(&run).is_empty());
    assert_eq!(m.seed, 5);
    let c = m.config().unwrap();
    assert_eq!(c.loss.strategy.as_str(), "km");
    assert_eq!(c.resolved_text(), m.config);
    assert_eq!(ckpt_names(&run), vec!["ckpt_00000000", "ckpt_00000002"]);
    assert!(run.join("metrics.jsonl").exists());

    // Same config and seed map onto the same directory, which is never overwritten.
    let again = f.pretrain(&["--set", "loss.strategy=km", "--seed", "5"]);
    assert_eq!(again.status.code(), Some(1));
}

#[test]
fn unknown_key_is_named_with_exit_code_one() {
    let f = Fixture::new();
    let o = f.pretrain(&["--set", "loss.stratgy=km"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("loss.stratgy"), "{}", stderr(&o));
    assert!(!f.dir.path().join("runs").exists());

    let o = dsc(&["pretrain", "--bogus-flag"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn zero_epochs_yields_manifest_and_initial_checkpoint_only() {
    let f = Fixture::new();
    let o = f.pretrain(&["--set", "train.epochs=0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = run_dir_of(&o);
    assert_eq!(ckpt_names(&run), vec!["ckpt_00000000"]);
    assert!(run.join("manifest.json").exists());
    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 1, "header only");
}

#[test]
fn non_finite_loss_exits_two_and_keeps_partial_artifacts() {
    let f = Fixture::new();
    let o = f.pretrain(&["--set", "optim.lr=1e300", "--set", "train.epochs=3"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"), "{}", stderr(&o));
    let runs: Vec<_> = std::fs::read_dir(f.dir.path().join("runs")).unwrap().collect();
    assert_eq!(runs.len(), 1);
    let run = runs[0].as_ref().unwrap().path();
    assert!(run.join("ckpt_00000000").exists());
    assert!(run.join("metrics.jsonl").exists());
    assert!(!run.join("manifest.json").exists());
}

#[test]
fn probe_reports_are_deterministic_and_errors_are_classified() {
    let f = Fixture::new();
    let run = run_dir_of(&f.pretrain(&[]));
    let ckpt = run.join("ckpt_00000002");
    let ckpt_s = ckpt.display().to_string();
    for kind in ["pixel", "linear"] {
        let a = dsc(&["probe", &ckpt_s, "--kind", kind]);
        let b = dsc(&["probe", &ckpt_s, "--kind", kind]);
        assert!(a.status.success(), "{}", stderr(&a));
        assert_eq!(stdout(&a), stdout(&b));
        let r: ProbeReport = serde_json::from_str(&stdout(&a)).unwrap();
        let v = r.probe_miou.or(r.probe_accuracy).unwrap();
        assert!((0.0..=1.0).contains(&v));
        assert_eq!(r.checkpoint_step, 2);
    }
    assert_eq!(ProbeReport::read_all(&run.join(REPORTS_FILE)).unwrap().len(), 4);
    let m = RunManifest::load(&run).unwrap();
    assert_eq!(m.artifacts.reports, vec![PathBuf::from(REPORTS_FILE)]);

    let mut bytes = std::fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    let bad = f.dir.path().join("corrupt");
    std::fs::write(&bad, bytes).unwrap();
    let o = dsc(&["probe", &bad.display().to_string()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("checksum"), "{}", stderr(&o));

    let mut c = Checkpoint::load(&ckpt).unwrap();
    c.meta.format_version = 7;
    let v7 = f.dir.path().join("v7");
    std::fs::write(&v7, c.to_bytes()).unwrap();
    let o = dsc(&["probe", &v7.display().to_string()]);
    assert_ne!(o.status.code(), Some(0));
    let err = stderr(&o);
    assert!(err.contains("version 7") && err.contains("expected 1"), "{err}");

    let missing = f.dir.path().join("nope");
    let o = dsc(&["probe", &missing.display().to_string()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn ablate_sweep_heatmap_and_generate() {
    let f = Fixture::new();
    let cfg = f.cfg.display().to_string();
    let out = f.out();

    let o = dsc(&["ablate", "--config", &cfg, "--out", &out, "--strategies", "none,km,none"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("twice"), "{}", stderr(&o));

    let o = dsc(&["ablate", "--config", &cfg, "--out", &out, "--strategies", "none", "--seeds", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    assert_eq!(table.lines().count(), 2);
    assert!(table.lines().nth(1).unwrap().starts_with("none,"));

    let o = dsc(&[
        "sweep", "--config", &cfg, "--out", &out, "--set", "loss.strategy=km", "--k", "2", "--seeds", "1", "--jobs", "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = stdout(&o);
    assert!(csv.starts_with("K,probe_miou,wall_time\n2,"), "{csv}");
    let written: Vec<_> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("sweep_") || n.starts_with("ablation_"))
        .collect();
    assert_eq!(written.len(), 2, "{written:?}");

    let run = run_dir_of(&f.pretrain(&["--seed", "9"]));
    let ckpt = run.join("ckpt_00000002").display().to_string();
    let o = dsc(&["heatmap", &ckpt, "--image", "1", "--anchor", "3,4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let txt = run.join("heatmaps").join("img1_r3_c4.txt");
    let grid: Vec<Vec<f64>> = std::fs::read_to_string(&txt)
        .unwrap()
        .lines()
        .map(|l| l.split(' ').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(grid.len(), 8);
    assert!((grid[3][4] - 1.0).abs() < 1e-6);
    assert!(run.join("heatmaps").join("img1_r3_c4.png").exists());
    let o = dsc(&["heatmap", &ckpt, "--anchor", "8,0"]);
    assert_eq!(o.status.code(), Some(2));

    let o = dsc(&["generate", "--config", &cfg, "--out", &out]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = PathBuf::from(stdout(&o).trim());
    assert_eq!(std::fs::read_to_string(manifest).unwrap().lines().count(), 9);
}
