//! Frozen-encoder evaluation: linear classification probe on global embeddings,
//! 1x1 segmentation probe on dense embeddings, mIoU and similarity heatmaps.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{SemanticStrategy, TrainConfig};
use crate::error::{DscError, Result};
use crate::model::{encode_dense, encode_global, Encoder, ParamSet};
use crate::rng::{stream_rng, STREAM_PROBE};
use crate::synthdata::export::image_to_rgb8;
use crate::synthdata::SyntheticSample;
use crate::trainer::restore_online;

/// Images encoded per forward pass.
const ENCODE_CHUNK: usize = 64;
const PROBE_BATCH: usize = 256;

/// Frozen encoder recovered from a checkpoint, with the config that trained it.
#[derive(Debug, Clone)]
pub struct FrozenEncoder {
    pub config: TrainConfig,
    pub encoder: Encoder,
    pub params: ParamSet,
    pub config_hash: String,
    pub step: u64,
}

impl FrozenEncoder {
    pub fn new(config: TrainConfig, params: ParamSet) -> Result<Self> {
        let encoder = Encoder::new(config.model.clone())?;
        encoder.layout().check_same_layout(&params)?;
        Ok(Self {
            config_hash: config.hash(),
            config,
            encoder,
            params,
            step: 0,
        })
    }

    /// Loads the online encoder. The embedded config must hash to the recorded
    /// value, and to `expected` when given.
    pub fn load(path: &Path, expected: Option<&TrainConfig>) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        let mut config = TrainConfig::default();
        config.apply_text(&ckpt.meta.config)?;
        let hash = config.hash();
        if hash != ckpt.meta.config_hash {
            return Err(DscError::ConfigMismatch {
                checkpoint: ckpt.meta.config_hash.clone(),
                config: hash,
            });
        }
        if let Some(exp) = expected {
            if exp.hash() != hash {
                return Err(DscError::ConfigMismatch {
                    checkpoint: hash,
                    config: exp.hash(),
                });
            }
        }
        let encoder = Encoder::new(config.model.clone())?;
        let params = restore_online(&ckpt, &encoder, path)?;
        Ok(Self {
            config,
            encoder,
            params,
            config_hash: hash,
            step: ckpt.meta.step,
        })
    }

    pub fn global(&self, samples: &[SyntheticSample]) -> Result<Array2<f64>> {
        let mut rows = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(ENCODE_CHUNK) {
            let imgs: Vec<_> = chunk.iter().map(|s| s.image.clone()).collect();
            rows.push(encode_global(&self.encoder, &self.params, &imgs)?);
        }
        concat_rows(rows, self.encoder.embed_dim())
    }

    /// Dense cells of every sample stacked image after image.
    pub fn dense(&self, samples: &[SyntheticSample]) -> Result<Array2<f64>> {
        let mut rows = Vec::new();
        for chunk in samples.chunks(ENCODE_CHUNK) {
            let imgs: Vec<_> = chunk.iter().map(|s| s.image.clone()).collect();
            for map in encode_dense(&self.encoder, &self.params, &imgs)? {
                rows.push(map.cells);
            }
        }
        concat_rows(rows, self.encoder.embed_dim())
    }
}

fn concat_rows(parts: Vec<Array2<f64>>, dim: usize) -> Result<Array2<f64>> {
    if parts.is_empty() {
        return Ok(Array2::zeros((0, dim)));
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| DscError::Shape(e.to_string()))
}

/// Multinomial logistic regression trained by SGD with momentum on
/// standardized features.
#[derive(Debug, Clone)]
pub struct LinearClassifier {
    mean: Array1<f64>,
    scale: Array1<f64>,
    weights: Array2<f64>,
    bias: Array1<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct ProbeSettings {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl ProbeSettings {
    pub fn from_config(c: &TrainConfig) -> Self {
        Self {
            epochs: c.probe.epochs,
            lr: c.probe.lr,
            seed: c.seed,
        }
    }
}

impl LinearClassifier {
    pub fn fit(x: ArrayView2<'_, f64>, y: &[usize], classes: usize, s: ProbeSettings) -> Result<Self> {
        if x.nrows() != y.len() || x.nrows() == 0 {
            return Err(DscError::Dataset(format!("{} feature rows for {} labels", x.nrows(), y.len())));
        }
        if let Some(&bad) = y.iter().find(|&&c| c >= classes) {
            return Err(DscError::Dataset(format!("label {bad} out of range for {classes} classes")));
        }
        let mean = x.mean_axis(Axis(0)).expect("rows");
        let scale = x.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-8 { 1.0 / s } else { 1.0 });
        let xs = (&x - &mean) * &scale;
        let d = x.ncols();
        let mut w = Array2::<f64>::zeros((d, classes));
        let mut b = Array1::<f64>::zeros(classes);
        let mut vw = w.clone();
        let mut vb = b.clone();
        let momentum = 0.9;
        let mut order: Vec<usize> = (0..x.nrows()).collect();
        for epoch in 0..s.epochs {
            order.shuffle(&mut stream_rng(s.seed, STREAM_PROBE, epoch as u64));
            for chunk in order.chunks(PROBE_BATCH) {
                let xb = xs.select(Axis(0), chunk);
                let mut p = xb.dot(&w) + &b;
                softmax_in_place(&mut p);
                for (r, &i) in chunk.iter().enumerate() {
                    p[[r, y[i]]] -= 1.0;
                }
                p /= chunk.len() as f64;
                let gw = xb.t().dot(&p);
                let gb = p.sum_axis(Axis(0));
                vw = &vw * momentum + &gw;
                vb = &vb * momentum + &gb;
                w.scaled_add(-s.lr, &vw);
                b.scaled_add(-s.lr, &vb);
            }
        }
        Ok(Self {
            mean,
            scale,
            weights: w,
            bias: b,
        })
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Vec<usize> {
        let logits = ((&x - &self.mean) * &self.scale).dot(&self.weights) + &self.bias;
        logits
            .rows()
            .into_iter()
            .map(|r| {
                let mut best = 0;
                for (j, &v) in r.iter().enumerate() {
                    if v > r[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

fn softmax_in_place(p: &mut Array2<f64>) {
    for mut row in p.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
}

/// Image-level label for the classification probe: the dominant foreground
/// class, shifted to start at 0.
fn image_label(s: &SyntheticSample) -> usize {
    s.dominant_class().max(1) as usize - 1
}

/// Held-out accuracy of a linear classifier on frozen global embeddings.
/// `shuffle_labels` permutes the training labels, giving the chance baseline.
pub fn linear_probe(
    frozen: &FrozenEncoder,
    train: &[SyntheticSample],
    eval: &[SyntheticSample],
    settings: ProbeSettings,
    shuffle_labels: bool,
) -> Result<f64> {
    if eval.is_empty() {
        return Err(DscError::Dataset("empty evaluation split".into()));
    }
    let classes = frozen.config.data.num_classes - 1;
    let mut y: Vec<usize> = train.iter().map(image_label).collect();
    for c in 0..classes {
        if !y.contains(&c) {
            return Err(DscError::Dataset(format!("class {} absent from the probe training split", c + 1)));
        }
    }
    if shuffle_labels {
        y.shuffle(&mut stream_rng(settings.seed, STREAM_PROBE, u64::MAX));
    }
    let before = frozen.params.fingerprint();
    let clf = LinearClassifier::fit(frozen.global(train)?.view(), &y, classes, settings)?;
    let pred = clf.predict(frozen.global(eval)?.view());
    debug_assert_eq!(before, frozen.params.fingerprint());
    let correct = pred.iter().zip(eval).filter(|(&p, s)| p == image_label(s)).count();
    Ok(correct as f64 / eval.len() as f64)
}

/// Majority label of every cell of an `grid x grid` partition; ties go to the lowest id.
pub fn downsample_mask(mask: &Array2<u8>, grid: usize) -> Result<Vec<u8>> {
    let (h, w) = mask.dim();
    if grid == 0 || grid > h || grid > w {
        return Err(DscError::Input(format!("cannot downsample a {h}x{w} mask to {grid}x{grid}")));
    }
    let mut out = Vec::with_capacity(grid * grid);
    let mut counts = [0usize; 256];
    for r in 0..grid {
        for c in 0..grid {
            counts.fill(0);
            for y in r * h / grid..(r + 1) * h / grid {
                for x in c * w / grid..(c + 1) * w / grid {
                    counts[mask[[y, x]] as usize] += 1;
                }
            }
            let mut best = 0;
            for k in 1..256 {
                if counts[k] > counts[best] {
                    best = k;
                }
            }
            out.push(best as u8);
        }
    }
    Ok(out)
}

/// Prediction label meaning "no prediction": counts against recall only.
pub const VOID: u8 = u8::MAX;

/// IoU of every class; `None` for classes absent from both `pred` and `gt`.
pub fn per_class_iou(pred: &[u8], gt: &[u8], num_classes: usize) -> Result<Vec<Option<f64>>> {
    if pred.len() != gt.len() {
        return Err(DscError::Shape(format!("{} predictions for {} labels", pred.len(), gt.len())));
    }
    if pred.is_empty() {
        return Err(DscError::Dataset("empty evaluation split".into()));
    }
    // Row = ground truth, column = prediction; the extra column collects VOID.
    let mut confusion = vec![vec![0usize; num_classes + 1]; num_classes];
    for (&p, &g) in pred.iter().zip(gt) {
        let col = if p == VOID { num_classes } else { p as usize };
        if col > num_classes || g as usize >= num_classes {
            return Err(DscError::Input(format!("label out of range for {num_classes} classes")));
        }
        confusion[g as usize][col] += 1;
    }
    Ok((0..num_classes)
        .map(|k| {
            let tp = confusion[k][k];
            let gt_k: usize = confusion[k].iter().sum();
            let pred_k: usize = confusion.iter().map(|row| row[k]).sum();
            let union = gt_k + pred_k - tp;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect())
}

/// Mean over classes present in `pred` or `gt` of `|pred ∩ gt| / |pred ∪ gt|`.
pub fn miou(pred: &[u8], gt: &[u8], num_classes: usize) -> Result<f64> {
    let ious: Vec<f64> = per_class_iou(pred, gt, num_classes)?.into_iter().flatten().collect();
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

/// mIoU of a 1x1 linear classifier on frozen dense embeddings against
/// majority-vote downsampled masks.
pub fn pixel_probe(
    frozen: &FrozenEncoder,
    train: &[SyntheticSample],
    eval: &[SyntheticSample],
    settings: ProbeSettings,
) -> Result<f64> {
    if eval.is_empty() {
        return Err(DscError::Dataset("empty evaluation split".into()));
    }
    let grid = frozen.encoder.grid_size();
    let classes = frozen.config.data.num_classes;
    let labels = |set: &[SyntheticSample]| -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(set.len() * grid * grid);
        for s in set {
            out.extend(downsample_mask(&s.mask, grid)?);
        }
        Ok(out)
    };
    let y_train: Vec<usize> = labels(train)?.into_iter().map(usize::from).collect();
    let clf = LinearClassifier::fit(frozen.dense(train)?.view(), &y_train, classes, settings)?;
    let pred: Vec<u8> = clf.predict(frozen.dense(eval)?.view()).into_iter().map(|p| p as u8).collect();
    miou(&pred, &labels(eval)?, classes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub run_id: String,
    pub strategy: SemanticStrategy,
    /// Cluster or prototype count of the strategy, when it has one.
    pub k: Option<usize>,
    pub probe_accuracy: Option<f64>,
    pub probe_miou: Option<f64>,
    pub seeds: Vec<u64>,
    pub config_hash: String,
    pub checkpoint_step: u64,
}

impl ProbeReport {
    pub fn new(run_id: &str, frozen: &FrozenEncoder) -> Self {
        let c = &frozen.config;
        let k = match c.loss.strategy {
            SemanticStrategy::Km => Some(c.kmeans.k),
            SemanticStrategy::Pm | SemanticStrategy::Ce => Some(c.proto.k),
            _ => None,
        };
        Self {
            run_id: run_id.to_string(),
            strategy: c.loss.strategy,
            k,
            probe_accuracy: None,
            probe_miou: None,
            seeds: vec![c.seed],
            config_hash: frozen.config_hash.clone(),
            checkpoint_step: frozen.step,
        }
    }

    /// Appends the report as one JSON line.
    pub fn append_to(&self, path: &Path) -> Result<()> {
        use std::io::Write;
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| DscError::io(path, self.checkpoint_step, e))?;
        writeln!(f, "{}", serde_json::to_string(self).expect("report serializes"))
            .map_err(|e| DscError::io(path, self.checkpoint_step, e))
    }

    pub fn read_all(path: &Path) -> Result<Vec<ProbeReport>> {
        let text = std::fs::read_to_string(path).map_err(|e| DscError::io(path, 0, e))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| DscError::Input(format!("{}: {e}", path.display()))))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Heatmap {
    pub grid: Array2<f64>,
    pub text_path: PathBuf,
    pub image_path: PathBuf,
}

/// Cosine similarity of every dense cell to `anchor` = (row, col).
pub fn similarity_grid(frozen: &FrozenEncoder, image: &ndarray::Array3<f64>, anchor: (usize, usize)) -> Result<Array2<f64>> {
    let s = frozen.encoder.grid_size();
    if anchor.0 >= s || anchor.1 >= s {
        return Err(DscError::Input(format!("anchor {anchor:?} outside the {s}x{s} grid")));
    }
    let map = encode_dense(&frozen.encoder, &frozen.params, std::slice::from_ref(image))?.remove(0);
    let a = map.cell(anchor.0, anchor.1).to_owned();
    let sims = map.cells.dot(&a).mapv(|v| v.clamp(-1.0, 1.0));
    Ok(sims.into_shape_with_order((s, s)).expect("square grid"))
}

/// Writes `<stem>.txt` (one grid row per line) and `<stem>.png` (overlay at image resolution).
pub fn emit_heatmap(
    frozen: &FrozenEncoder,
    image: &ndarray::Array3<f64>,
    anchor: (usize, usize),
    out_dir: &Path,
    stem: &str,
) -> Result<Heatmap> {
    let grid = similarity_grid(frozen, image, anchor)?;
    std::fs::create_dir_all(out_dir).map_err(|e| DscError::io(out_dir, 0, e))?;
    let text: String = grid
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(" ") + "\n")
        .collect();
    let text_path = out_dir.join(format!("{stem}.txt"));
    std::fs::write(&text_path, text).map_err(|e| DscError::io(&text_path, 0, e))?;

    let base = image_to_rgb8(image);
    let (w, h) = base.dimensions();
    let s = grid.nrows();
    let mut overlay = RgbImage::new(w, h);
    for (x, y, px) in overlay.enumerate_pixels_mut() {
        let v = grid[[(y as usize * s) / h as usize, (x as usize * s) / w as usize]];
        let heat = ((v + 1.0) / 2.0).clamp(0.0, 1.0);
        let color = [255.0 * heat, 64.0, 255.0 * (1.0 - heat)];
        let src = base.get_pixel(x, y).0;
        let mut out = [0u8; 3];
        for c in 0..3 {
            out[c] = (0.5 * src[c] as f64 + 0.5 * color[c]).round() as u8;
        }
        *px = Rgb(out);
    }
    let (ar, ac) = anchor;
    let cell_h = h as usize / s;
    let cell_w = w as usize / s;
    for y in ar * cell_h..(ar + 1) * cell_h {
        for x in ac * cell_w..(ac + 1) * cell_w {
            if y == ar * cell_h || x == ac * cell_w || y + 1 == (ar + 1) * cell_h || x + 1 == (ac + 1) * cell_w {
                overlay.put_pixel(x as u32, y as u32, Rgb([255, 255, 255]));
            }
        }
    }
    let image_path = out_dir.join(format!("{stem}.png"));
    overlay
        .save(&image_path)
        .map_err(|e| DscError::Image(format!("{}: {e}", image_path.display())))?;
    Ok(Heatmap {
        grid,
        text_path,
        image_path,
    })
}

/// Median of a non-empty sample; the mean of the middle pair for even sizes.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn miou_examples() {
        let gt = [0u8, 0, 1, 1, 2, 2];
        assert_eq!(miou(&gt, &gt, 3).unwrap(), 1.0);
        let disjoint = [1u8, 1, 2, 2, 0, 0];
        assert_eq!(miou(&disjoint, &gt, 3).unwrap(), 0.0);
        assert!(miou(&[], &[], 2).is_err());
        // Class 2 absent from both sides is excluded.
        assert_eq!(miou(&[0, 1], &[0, 1], 3).unwrap(), 1.0);
    }

    #[test]
    fn miou_half_coverage_toy() {
        // Each class region has 4 cells; half of each is predicted correctly and
        // the rest left without a prediction.
        let gt = [0u8, 0, 0, 0, 1, 1, 1, 1];
        let pred = [0u8, 0, VOID, VOID, 1, 1, VOID, VOID];
        let per = per_class_iou(&pred, &gt, 2).unwrap();
        assert_eq!(per, vec![Some(0.5), Some(0.5)]);
        assert_eq!(miou(&pred, &gt, 2).unwrap(), 0.5);
    }

    fn oracle_miou(pred: &[u8], gt: &[u8], classes: usize) -> f64 {
        let mut sum = 0.0;
        let mut n = 0;
        for k in 0..classes as u8 {
            let inter = pred.iter().zip(gt).filter(|(&p, &g)| p == k && g == k).count();
            let union = pred.iter().zip(gt).filter(|(&p, &g)| p == k || g == k).count();
            if union > 0 {
                sum += inter as f64 / union as f64;
                n += 1;
            }
        }
        sum / n as f64
    }

    proptest! {
        #[test]
        fn miou_matches_set_oracle(pairs in proptest::collection::vec((0u8..4, 0u8..4), 1..80)) {
            let pred: Vec<u8> = pairs.iter().map(|p| p.0).collect();
            let gt: Vec<u8> = pairs.iter().map(|p| p.1).collect();
            prop_assert_eq!(miou(&pred, &gt, 4).unwrap(), oracle_miou(&pred, &gt, 4));
        }
    }

    #[test]
    fn majority_downsampling() {
        let mut m = Array2::<u8>::zeros((4, 4));
        m[[0, 0]] = 2;
        m[[0, 1]] = 2;
        m[[1, 0]] = 2;
        m[[2, 2]] = 1;
        m[[2, 3]] = 3;
        m[[3, 2]] = 1;
        m[[3, 3]] = 3;
        // Top-left block: three 2s. Bottom-right: tie 1 vs 3 -> 1.
        assert_eq!(downsample_mask(&m, 2).unwrap(), vec![2, 0, 0, 1]);
        let half = Array2::from_shape_fn((2, 2), |(r, _)| if r == 0 { 3u8 } else { 1 });
        assert_eq!(downsample_mask(&half, 1).unwrap(), vec![1]);
        assert!(downsample_mask(&m, 5).is_err());
    }

    #[test]
    fn classifier_separates_clusters() {
        let x = ndarray::array![[0.0, 1.0], [0.1, 0.9], [1.0, 0.0], [0.9, 0.1]];
        let clf = LinearClassifier::fit(x.view(), &[0, 0, 1, 1], 2, ProbeSettings { epochs: 50, lr: 0.1, seed: 0 }).unwrap();
        assert_eq!(clf.predict(x.view()), vec![0, 0, 1, 1]);
        assert!(LinearClassifier::fit(x.view(), &[0, 0, 1], 2, ProbeSettings { epochs: 1, lr: 0.1, seed: 0 }).is_err());
    }

    #[test]
    fn median_values() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0]), 2.5);
    }
}
