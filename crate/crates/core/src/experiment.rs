//! Run directories, manifests, and the multi-run experiments (strategy ablation
//! and K sweep) built on pretrain + probe.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::config::{SemanticStrategy, TrainConfig};
use crate::error::{DscError, Result};
use crate::probe::{linear_probe, median, pixel_probe, FrozenEncoder, ProbeReport, ProbeSettings};
use crate::synthdata::SyntheticSample;
use crate::trainer::{make_splits, Trainer, METRICS_FILE};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;
pub const REPORTS_FILE: &str = "reports.jsonl";

/// `run_<first 12 hex digits of the config hash>_s<seed>`.
pub fn run_id(config: &TrainConfig) -> String {
    format!("run_{}_s{}", &config.hash()[..12], config.seed)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub checkpoints: Vec<PathBuf>,
    pub metrics: PathBuf,
    pub reports: Vec<PathBuf>,
}

/// Everything needed to rebuild a run. Artifact paths are relative to the run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub run_id: String,
    pub created_unix: u64,
    pub seed: u64,
    pub config_hash: String,
    /// Every config key in `key=value` form.
    pub config: String,
    pub artifacts: Artifacts,
}

impl RunManifest {
    pub fn path(run_dir: &Path) -> PathBuf {
        run_dir.join(MANIFEST_FILE)
    }

    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = Self::path(run_dir);
        let text = std::fs::read_to_string(&path).map_err(|e| DscError::io(&path, 0, e))?;
        let m: RunManifest =
            serde_json::from_str(&text).map_err(|e| DscError::Input(format!("{}: {e}", path.display())))?;
        if m.format_version != MANIFEST_VERSION {
            return Err(DscError::Version {
                found: m.format_version,
                expected: MANIFEST_VERSION,
            });
        }
        Ok(m)
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        let path = Self::path(run_dir);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| DscError::io(&path, 0, e))
    }

    pub fn config(&self) -> Result<TrainConfig> {
        let mut c = TrainConfig::default();
        c.apply_text(&self.config)?;
        Ok(c)
    }

    /// Artifacts that the manifest lists but the directory lacks.
    pub fn missing(&self, run_dir: &Path) -> Vec<PathBuf> {
        let a = &self.artifacts;
        a.checkpoints
            .iter()
            .chain(std::iter::once(&a.metrics))
            .chain(&a.reports)
            .filter(|p| !run_dir.join(p).exists())
            .cloned()
            .collect()
    }

    pub fn final_checkpoint(&self, run_dir: &Path) -> Option<PathBuf> {
        self.artifacts.checkpoints.last().map(|p| run_dir.join(p))
    }
}

fn list_checkpoints(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(run_dir).map_err(|e| DscError::io(run_dir, 0, e))? {
        let entry = entry.map_err(|e| DscError::io(run_dir, 0, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with("ckpt_") && !name.ends_with(".tmp") {
            out.push(PathBuf::from(name));
        }
    }
    out.sort();
    Ok(out)
}

/// A finished pretraining run.
#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub run_dir: PathBuf,
    pub manifest: RunManifest,
    pub final_checkpoint: PathBuf,
    /// Seconds spent in the training loop.
    pub wall_time: f64,
}

/// Trains `config` into `<out_root>/<run_id>`. A directory that already exists
/// is never reused, so nothing is overwritten.
pub fn pretrain(config: &TrainConfig, out_root: &Path) -> Result<PretrainOutcome> {
    config.validate()?;
    for w in config.warnings() {
        log::warn!("{w}");
    }
    let id = run_id(config);
    let run_dir = out_root.join(&id);
    if run_dir.exists() {
        return Err(DscError::Config(format!(
            "run directory {} already exists; remove it or choose another --out",
            run_dir.display()
        )));
    }
    std::fs::create_dir_all(&run_dir).map_err(|e| DscError::io(&run_dir, 0, e))?;
    let trainer = Trainer::new(config.clone())?;
    let (train, _) = make_splits(config)?;
    log::info!("{id}: {} steps", config.total_steps());
    let fit = trainer.fit(&train, &run_dir, None)?;
    let wall_time = fit.records.last().map_or(0.0, |r| r.wall_time);
    let manifest = RunManifest {
        format_version: MANIFEST_VERSION,
        run_id: id,
        created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        seed: config.seed,
        config_hash: config.hash(),
        config: config.resolved_text(),
        artifacts: Artifacts {
            checkpoints: list_checkpoints(&run_dir)?,
            metrics: PathBuf::from(METRICS_FILE),
            reports: Vec::new(),
        },
    };
    manifest.save(&run_dir)?;
    Ok(PretrainOutcome {
        run_dir,
        manifest,
        final_checkpoint: fit.final_checkpoint,
        wall_time,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeKind {
    Linear,
    Pixel,
}

impl std::str::FromStr for ProbeKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "linear" => Ok(ProbeKind::Linear),
            "pixel" => Ok(ProbeKind::Pixel),
            _ => Err(format!("unknown probe kind `{s}` (expected linear or pixel)")),
        }
    }
}

/// Probe images: the first `probe.train_images` pretraining images, evaluated
/// on the held-out split.
fn probe_splits(config: &TrainConfig) -> Result<(Vec<SyntheticSample>, Vec<SyntheticSample>)> {
    let (mut train, eval) = make_splits(config)?;
    train.truncate(config.probe.train_images);
    Ok((train, eval))
}

/// Probes a loaded encoder without touching the filesystem.
pub fn probe_encoder(frozen: &FrozenEncoder, run_id: &str, kind: ProbeKind) -> Result<ProbeReport> {
    let (train, eval) = probe_splits(&frozen.config)?;
    let settings = ProbeSettings::from_config(&frozen.config);
    let mut report = ProbeReport::new(run_id, frozen);
    match kind {
        ProbeKind::Linear => report.probe_accuracy = Some(linear_probe(frozen, &train, &eval, settings, false)?),
        ProbeKind::Pixel => report.probe_miou = Some(pixel_probe(frozen, &train, &eval, settings)?),
    }
    Ok(report)
}

/// Probes `checkpoint` and appends the report next to it, registering the
/// report file in the run manifest when there is one.
pub fn probe_checkpoint(checkpoint: &Path, kind: ProbeKind) -> Result<ProbeReport> {
    let frozen = FrozenEncoder::load(checkpoint, None)?;
    let run_dir = checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut manifest = RunManifest::load(&run_dir).ok();
    let id = manifest.as_ref().map_or_else(|| run_id(&frozen.config), |m| m.run_id.clone());
    let report = probe_encoder(&frozen, &id, kind)?;
    report.append_to(&run_dir.join(REPORTS_FILE))?;
    if let Some(m) = manifest.as_mut() {
        let rel = PathBuf::from(REPORTS_FILE);
        if !m.artifacts.reports.contains(&rel) {
            m.artifacts.reports.push(rel);
            m.save(&run_dir)?;
        }
    }
    Ok(report)
}

/// Pixel-probe outcome of one pretraining run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub run_id: String,
    pub seed: u64,
    pub probe_miou: f64,
    pub wall_time: f64,
}

/// Pretrain + pixel probe; the report is stored in the run directory.
pub fn pretrain_and_probe(config: &TrainConfig, out_root: &Path) -> Result<RunResult> {
    let run = pretrain(config, out_root)?;
    let report = probe_checkpoint(&run.final_checkpoint, ProbeKind::Pixel)?;
    let miou = report.probe_miou.expect("pixel probe sets mIoU");
    log::info!("{}: mIoU {miou:.4}, {:.1}s", run.manifest.run_id, run.wall_time);
    Ok(RunResult {
        run_id: run.manifest.run_id,
        seed: config.seed,
        probe_miou: miou,
        wall_time: run.wall_time,
    })
}

/// Runs every config with at most `jobs` in flight. Results keep input order;
/// the first failure (in input order) is returned.
pub fn run_all(configs: &[TrainConfig], out_root: &Path, jobs: usize) -> Result<Vec<RunResult>> {
    let jobs = jobs.clamp(1, configs.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<RunResult>>>> = Mutex::new((0..configs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= configs.len() {
                    break;
                }
                let r = pretrain_and_probe(&configs[i], out_root);
                slots.lock().expect("no poisoned runs")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("no poisoned runs")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

fn with_seed(base: &TrainConfig, seed: u64) -> TrainConfig {
    let mut c = base.clone();
    c.seed_all(seed);
    c
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub strategy: SemanticStrategy,
    pub median_miou: f64,
    pub per_seed: Vec<f64>,
}

/// One pretrain + pixel probe per (strategy, seed); rows hold the median mIoU
/// and are sorted best first.
pub fn ablate(
    base: &TrainConfig,
    strategies: &[SemanticStrategy],
    seeds: &[u64],
    out_root: &Path,
    jobs: usize,
) -> Result<Vec<AblationRow>> {
    if strategies.is_empty() || seeds.is_empty() {
        return Err(DscError::Config("ablation needs at least one strategy and one seed".into()));
    }
    for (i, s) in strategies.iter().enumerate() {
        if strategies[..i].contains(s) {
            return Err(DscError::Config(format!("strategy `{s}` listed twice")));
        }
    }
    let mut configs = Vec::new();
    for &strategy in strategies {
        let mut c = base.clone();
        c.loss.strategy = strategy;
        c.validate()?;
        configs.extend(seeds.iter().map(|&s| with_seed(&c, s)));
    }
    let results = run_all(&configs, out_root, jobs)?;
    let mut rows: Vec<AblationRow> = strategies
        .iter()
        .zip(results.chunks(seeds.len()))
        .map(|(&strategy, runs)| {
            let per_seed: Vec<f64> = runs.iter().map(|r| r.probe_miou).collect();
            AblationRow {
                strategy,
                median_miou: median(&per_seed),
                per_seed,
            }
        })
        .collect();
    rows.sort_by(|a, b| b.median_miou.total_cmp(&a.median_miou));
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::from("strategy,median_miou,per_seed\n");
    for r in rows {
        let seeds: Vec<String> = r.per_seed.iter().map(|v| format!("{v:.6}")).collect();
        out.push_str(&format!("{},{:.6},{}\n", r.strategy, r.median_miou, seeds.join(" ")));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub k: usize,
    pub probe_miou: f64,
    pub wall_time: f64,
}

/// Sets the cluster count used by the strategy of `config`.
pub fn set_k(config: &mut TrainConfig, k: usize) -> Result<()> {
    match config.loss.strategy {
        SemanticStrategy::Km => config.kmeans.k = k,
        SemanticStrategy::Pm => config.proto.k = k,
        other => return Err(DscError::Config(format!("K sweep needs strategy km or pm, not {other}"))),
    }
    Ok(())
}

/// One pretrain + pixel probe per (K, seed). Rows follow `k_values` and hold
/// the median mIoU and median training wall time.
pub fn sweep_k(
    base: &TrainConfig,
    k_values: &[usize],
    seeds: &[u64],
    out_root: &Path,
    jobs: usize,
) -> Result<Vec<SweepRow>> {
    if k_values.is_empty() || seeds.is_empty() {
        return Err(DscError::Config("K sweep needs at least one K and one seed".into()));
    }
    let mut configs = Vec::new();
    for &k in k_values {
        let mut c = base.clone();
        set_k(&mut c, k)?;
        c.validate()?;
        configs.extend(seeds.iter().map(|&s| with_seed(&c, s)));
    }
    let results = run_all(&configs, out_root, jobs)?;
    Ok(k_values
        .iter()
        .zip(results.chunks(seeds.len()))
        .map(|(&k, runs)| {
            let miou: Vec<f64> = runs.iter().map(|r| r.probe_miou).collect();
            let wall: Vec<f64> = runs.iter().map(|r| r.wall_time).collect();
            SweepRow {
                k,
                probe_miou: median(&miou),
                wall_time: median(&wall),
            }
        })
        .collect())
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("K,probe_miou,wall_time\n");
    for r in rows {
        out.push_str(&format!("{},{:.6},{:.3}\n", r.k, r.probe_miou, r.wall_time));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainConfig {
        let mut c = TrainConfig::default();
        c.apply_text(
            "data.image_size=32\ndata.num_images=8\ndata.eval_images=4\n\
             model.width=4\nmodel.depth=2\nmodel.output_stride=4\nmodel.embed_dim=8\n\
             train.batch_size=4\ntrain.epochs=1\nqueue.instance=16\nqueue.dense=16\n\
             kmeans.K=4\nproto.K=4\nprobe.train_images=8\nprobe.epochs=2\n",
        )
        .unwrap();
        c
    }

    #[test]
    fn run_id_is_content_addressed() {
        let a = tiny();
        let mut b = tiny();
        b.seed_all(3);
        let id = run_id(&a);
        assert!(id.starts_with("run_") && id.ends_with("_s0"));
        assert_eq!(id.len(), "run_".len() + 12 + "_s0".len());
        assert_eq!(run_id(&b), id.replace("_s0", "_s3"));
    }

    #[test]
    fn pretrain_writes_complete_manifest_and_refuses_reuse() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny();
        let run = pretrain(&c, dir.path()).unwrap();
        let m = RunManifest::load(&run.run_dir).unwrap();
        assert_eq!(m, run.manifest);
        assert!(m.missing(&run.run_dir).is_empty());
        assert_eq!(m.artifacts.checkpoints.len(), 2);
        assert_eq!(m.config().unwrap().resolved_text(), c.resolved_text());
        assert!(matches!(pretrain(&c, dir.path()), Err(DscError::Config(_))));

        let report = probe_checkpoint(&run.final_checkpoint, ProbeKind::Pixel).unwrap();
        let again = probe_checkpoint(&run.final_checkpoint, ProbeKind::Pixel).unwrap();
        assert_eq!(report, again);
        let miou = report.probe_miou.unwrap();
        assert!((0.0..=1.0).contains(&miou));
        let m = RunManifest::load(&run.run_dir).unwrap();
        assert_eq!(m.artifacts.reports, vec![PathBuf::from(REPORTS_FILE)]);
        assert_eq!(ProbeReport::read_all(&run.run_dir.join(REPORTS_FILE)).unwrap().len(), 2);
    }

    #[test]
    fn ablate_rejects_duplicates_and_sorts() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny();
        let dup = [SemanticStrategy::None, SemanticStrategy::Km, SemanticStrategy::None];
        assert!(matches!(ablate(&c, &dup, &[0], dir.path(), 1), Err(DscError::Config(_))));

        let rows = ablate(&c, &[SemanticStrategy::None], &[0], dir.path(), 1).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].strategy, SemanticStrategy::None);
        assert_eq!(rows[0].per_seed.len(), 1);
        let table = ablation_table(&rows);
        assert!(table.starts_with("strategy,median_miou,per_seed\nnone,"));
    }

    #[test]
    fn sweep_single_row_and_determinism() {
        let mut c = tiny();
        c.loss.strategy = SemanticStrategy::Km;
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let a = sweep_k(&c, &[2], &[1], d1.path(), 1).unwrap();
        let b = sweep_k(&c, &[2], &[1], d2.path(), 2).unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].k, 2);
        assert_eq!(a[0].probe_miou, b[0].probe_miou);
        let csv = sweep_csv(&a);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("K,probe_miou,wall_time"));
        assert!(lines.next().unwrap().starts_with("2,"));
        assert!(lines.next().is_none());

        c.loss.strategy = SemanticStrategy::Ce;
        assert!(sweep_k(&c, &[2], &[1], d1.path(), 1).is_err());
    }

    #[test]
    fn concurrent_runs_keep_input_order() {
        let dir = tempfile::tempdir().unwrap();
        let configs: Vec<_> = [4u64, 5, 6].iter().map(|&s| with_seed(&tiny(), s)).collect();
        let r = run_all(&configs, dir.path(), 3).unwrap();
        assert_eq!(r.iter().map(|x| x.seed).collect::<Vec<_>>(), vec![4, 5, 6]);
    }
}
