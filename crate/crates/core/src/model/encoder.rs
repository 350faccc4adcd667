//! Convolutional backbone with a global MLP projector and a dense 1x1 projector.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layers::{
    affine, affine_backward, batch_norm, batch_norm_backward, batch_norm_fixed, col2im, global_avg_pool,
    global_avg_pool_backward, im2col, l2_normalize_rows, l2_normalize_rows_backward, relu, relu_backward,
    BatchNormCache, ConvGeom, FeatureMap,
};
use super::params::{IntoRowMajorVec, ParamKind, ParamSet, Tensor};
use crate::error::{DscError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_size: usize,
    /// Channels of the first stage; doubles at every later stride-2 stage.
    pub width: usize,
    pub depth: usize,
    /// Power of two; the first `log2(output_stride)` stages use stride 2.
    pub output_stride: usize,
    pub embed_dim: usize,
    /// Hidden width of the global MLP; 0 means the backbone width.
    pub global_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            width: 32,
            depth: 4,
            output_stride: 8,
            embed_dim: 32,
            global_hidden: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Stage {
    cin: usize,
    cout: usize,
    stride: usize,
    weight: usize,
    bias: usize,
    gamma: usize,
    beta: usize,
    running_mean: usize,
    running_var: usize,
}

#[derive(Debug, Clone, Copy)]
struct Head {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// Encoder architecture. Parameters live in a separate [`ParamSet`] so the
/// online and momentum copies share one description.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: ModelConfig,
    stages: Vec<Stage>,
    global: Head,
    dense: Head,
    layout: ParamSet,
}

/// Unit-norm embeddings for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    /// `batch x embed_dim`.
    pub global: Array2<f64>,
    /// `(batch * grid * grid) x embed_dim`, rows ordered by image, then row-major cells.
    pub dense: Array2<f64>,
    pub grid: usize,
}

impl EncoderOutput {
    pub fn batch(&self) -> usize {
        self.global.nrows()
    }

    pub fn cells_per_image(&self) -> usize {
        self.grid * self.grid
    }

    /// Dense map of image `b` as `(grid * grid) x embed_dim`.
    pub fn dense_map(&self, b: usize) -> ndarray::ArrayView2<'_, f64> {
        let p = self.cells_per_image();
        self.dense.slice(ndarray::s![b * p..(b + 1) * p, ..])
    }
}

struct StageCache {
    input_dims: (usize, usize, usize, usize),
    cols: Array2<f64>,
    norm: BatchNormCache,
    pre_relu: Array2<f64>,
}

/// Which statistics the normalization layers use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Statistics of the current batch (training, both encoders).
    Batch,
    /// Stored running statistics (evaluation).
    Running,
}

/// Per-stage batch means and variances seen by one training forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<Array1<f64>>,
    pub var: Vec<Array1<f64>>,
}

/// Blend factor of new batch statistics into the running statistics.
pub const RUNNING_STATS_MOMENTUM: f64 = 0.1;

struct HeadCache {
    input: Array2<f64>,
    pre_relu: Array2<f64>,
    hidden: Array2<f64>,
    out: Array2<f64>,
    norms: ndarray::Array1<f64>,
}

/// Intermediate values kept by [`Encoder::forward_train`] for the backward pass.
pub struct ForwardCache {
    stages: Vec<StageCache>,
    backbone_dims: (usize, usize, usize),
    global: HeadCache,
    dense: HeadCache,
}

impl ForwardCache {
    pub fn norm_stats(&self) -> NormStats {
        NormStats {
            mean: self.stages.iter().map(|s| s.norm.mean.clone()).collect(),
            var: self.stages.iter().map(|s| s.norm.var.clone()).collect(),
        }
    }
}

const CONV3: usize = 3;

impl Encoder {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let c = &config;
        if c.depth == 0 || c.width == 0 || c.embed_dim == 0 {
            return Err(DscError::Config("depth, width and embed_dim must be positive".into()));
        }
        if !c.output_stride.is_power_of_two() {
            return Err(DscError::Config("output_stride must be a power of two".into()));
        }
        let downs = c.output_stride.trailing_zeros() as usize;
        if downs > c.depth {
            return Err(DscError::Config(format!(
                "output_stride {} needs at least {downs} stages",
                c.output_stride
            )));
        }
        if c.input_size % c.output_stride != 0 || c.input_size / c.output_stride < 2 {
            return Err(DscError::Config(format!(
                "input_size {} must be a multiple of output_stride {} with a grid of at least 2",
                c.input_size, c.output_stride
            )));
        }
        let mut layout = ParamSet::default();
        let mut stages = Vec::with_capacity(c.depth);
        let mut cin = 3usize;
        let mut cout = c.width;
        for i in 0..c.depth {
            let stride = if i < downs { 2 } else { 1 };
            if i > 0 && stride == 2 {
                cout *= 2;
            }
            let weight = layout.push(
                format!("backbone.{i}.conv.weight"),
                ParamKind::Weight,
                Tensor::zeros(&[CONV3 * CONV3 * cin, cout]),
            );
            let bias = layout.push(format!("backbone.{i}.conv.bias"), ParamKind::Bias, Tensor::zeros(&[cout]));
            let gamma = layout.push(format!("backbone.{i}.norm.gamma"), ParamKind::Norm, Tensor::filled(&[cout], 1.0));
            let beta = layout.push(format!("backbone.{i}.norm.beta"), ParamKind::Norm, Tensor::zeros(&[cout]));
            let running_mean =
                layout.push(format!("backbone.{i}.norm.running_mean"), ParamKind::Stat, Tensor::zeros(&[cout]));
            let running_var =
                layout.push(format!("backbone.{i}.norm.running_var"), ParamKind::Stat, Tensor::filled(&[cout], 1.0));
            stages.push(Stage { cin, cout, stride, weight, bias, gamma, beta, running_mean, running_var });
            cin = cout;
        }
        let hidden = if c.global_hidden == 0 { cin } else { c.global_hidden };
        let d = c.embed_dim;
        let mut head = |prefix: &str, width: usize| -> Head {
            Head {
                w1: layout.push(format!("{prefix}.0.weight"), ParamKind::Weight, Tensor::zeros(&[cin, width])),
                b1: layout.push(format!("{prefix}.0.bias"), ParamKind::Bias, Tensor::zeros(&[width])),
                w2: layout.push(format!("{prefix}.1.weight"), ParamKind::Weight, Tensor::zeros(&[width, d])),
                b2: layout.push(format!("{prefix}.1.bias"), ParamKind::Bias, Tensor::zeros(&[d])),
            }
        };
        let global = head("global_projector", hidden);
        // Dense projector: two 1x1 convolutions with hidden width D.
        let dense = head("dense_projector", d);
        Ok(Self { config, stages, global, dense, layout })
    }

    pub fn grid_size(&self) -> usize {
        self.config.input_size / self.config.output_stride
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    /// Zero-valued parameter set with this encoder's names and shapes.
    pub fn layout(&self) -> &ParamSet {
        &self.layout
    }

    /// He-normal weights, unit norm scales, zero biases except the projector
    /// outputs, which get small noise so an all-dead hidden layer still maps to
    /// a direction.
    pub fn init_params(&self, rng: &mut impl Rng) -> ParamSet {
        let mut params = self.layout.clone();
        let out_bias = Normal::new(0.0, 0.01).expect("positive std");
        for (i, t) in params.tensors.iter_mut().enumerate() {
            if self.layout.kinds[i] == ParamKind::Weight {
                let fan_in = t.shape[0] as f64;
                let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
                t.data.iter_mut().for_each(|v| *v = normal.sample(rng));
            } else if i == self.global.b2 || i == self.dense.b2 {
                t.data.iter_mut().for_each(|v| *v = out_bias.sample(rng));
            }
        }
        params
    }

    /// Packs images (each `input_size x input_size x 3`) into one NHWC batch.
    pub fn batch_images<'a>(&self, images: impl IntoIterator<Item = &'a Array3<f64>>) -> Result<FeatureMap> {
        let n = self.config.input_size;
        let mut data = Vec::new();
        let mut count = 0usize;
        for img in images {
            if img.dim() != (n, n, 3) {
                return Err(DscError::Input(format!(
                    "expected {n}x{n}x3 image, got {:?}",
                    img.dim()
                )));
            }
            data.extend(img.iter().copied());
            count += 1;
        }
        if count == 0 {
            return Err(DscError::Input("empty image batch".into()));
        }
        let data = Array2::from_shape_vec((count * n * n, 3), data).expect("consistent length");
        Ok(FeatureMap::new(count, n, n, data))
    }

    fn check_params(&self, params: &ParamSet) -> Result<()> {
        self.layout.check_same_layout(params)
    }

    fn head_forward(head: Head, params: &ParamSet, input: Array2<f64>) -> HeadCache {
        let t = &params.tensors;
        let pre_relu = affine(&input.view(), &t[head.w1].view2(), &t[head.b1].view1());
        let hidden = relu(&pre_relu);
        let out = affine(&hidden.view(), &t[head.w2].view2(), &t[head.b2].view1());
        let (out, norms) = l2_normalize_rows(&out);
        HeadCache { input, pre_relu, hidden, out, norms }
    }

    fn head_backward(head: Head, params: &ParamSet, cache: &HeadCache, dout: &Array2<f64>, grads: &mut ParamSet) -> Array2<f64> {
        let t = &params.tensors;
        let dpre = l2_normalize_rows_backward(dout, &cache.out, &cache.norms);
        let (dhidden, dw2, db2) = affine_backward(&dpre, &cache.hidden.view(), &t[head.w2].view2(), true);
        let dpre1 = relu_backward(&dhidden.expect("requested"), &cache.pre_relu);
        let (dinput, dw1, db1) = affine_backward(&dpre1, &cache.input.view(), &t[head.w1].view2(), true);
        grads.tensors[head.w2].data = dw2.into_row_major_vec();
        grads.tensors[head.b2].data = db2.to_vec();
        grads.tensors[head.w1].data = dw1.into_row_major_vec();
        grads.tensors[head.b1].data = db1.to_vec();
        dinput.expect("requested")
    }

    fn run(
        &self,
        params: &ParamSet,
        input: FeatureMap,
        mode: NormMode,
        keep: bool,
    ) -> Result<(EncoderOutput, Option<ForwardCache>)> {
        self.check_params(params)?;
        if input.height != self.config.input_size || input.width != self.config.input_size || input.channels() != 3 {
            return Err(DscError::Input(format!(
                "expected {0}x{0}x3 inputs, got {1}x{2}x{3}",
                self.config.input_size,
                input.height,
                input.width,
                input.channels()
            )));
        }
        let t = &params.tensors;
        let mut x = input;
        let mut caches = Vec::with_capacity(if keep { self.stages.len() } else { 0 });
        for st in &self.stages {
            let g = ConvGeom { kernel: CONV3, stride: st.stride, pad: 1 };
            let (ho, wo) = (g.out_size(x.height), g.out_size(x.width));
            let cols = im2col(&x, g);
            let conv = affine(&cols.view(), &t[st.weight].view2(), &t[st.bias].view1());
            let (gamma, beta) = (t[st.gamma].view1(), t[st.beta].view1());
            let (normed, norm) = match mode {
                NormMode::Batch => {
                    let (y, c) = batch_norm(&conv, &gamma, &beta);
                    (y, Some(c))
                }
                NormMode::Running => (
                    batch_norm_fixed(&conv, &t[st.running_mean].view1(), &t[st.running_var].view1(), &gamma, &beta),
                    None,
                ),
            };
            let out = FeatureMap::new(x.batch, ho, wo, relu(&normed));
            if let (true, Some(norm)) = (keep, norm) {
                caches.push(StageCache {
                    input_dims: (x.batch, x.height, x.width, x.channels()),
                    cols,
                    norm,
                    pre_relu: normed,
                });
            }
            x = out;
        }
        let backbone_dims = (x.batch, x.height, x.width);
        let pooled = global_avg_pool(&x);
        let global = Self::head_forward(self.global, params, pooled);
        let dense = Self::head_forward(self.dense, params, x.data);
        let output = EncoderOutput {
            global: global.out.clone(),
            dense: dense.out.clone(),
            grid: backbone_dims.1,
        };
        let cache = keep.then_some(ForwardCache { stages: caches, backbone_dims, global, dense });
        Ok((output, cache))
    }

    /// Forward pass without saving intermediates: `Batch` for the momentum
    /// encoder during training, `Running` for evaluation.
    pub fn forward(&self, params: &ParamSet, input: FeatureMap, mode: NormMode) -> Result<EncoderOutput> {
        Ok(self.run(params, input, mode, false)?.0)
    }

    /// Batch-statistics forward pass that keeps what [`Encoder::backward`] needs.
    pub fn forward_train(&self, params: &ParamSet, input: FeatureMap) -> Result<(EncoderOutput, ForwardCache)> {
        let (out, cache) = self.run(params, input, NormMode::Batch, true)?;
        Ok((out, cache.expect("cache requested")))
    }

    /// `running <- (1 - momentum) * running + momentum * batch` for every stage.
    pub fn update_running_stats(&self, params: &mut ParamSet, stats: &NormStats, momentum: f64) -> Result<()> {
        self.check_params(params)?;
        if stats.mean.len() != self.stages.len() || stats.var.len() != self.stages.len() {
            return Err(DscError::Shape(format!(
                "statistics for {} stages, encoder has {}",
                stats.mean.len(),
                self.stages.len()
            )));
        }
        for (i, st) in self.stages.iter().enumerate() {
            for (idx, new) in [(st.running_mean, &stats.mean[i]), (st.running_var, &stats.var[i])] {
                if new.len() != st.cout {
                    return Err(DscError::Shape(format!("stage {i} statistics have {} channels", new.len())));
                }
                for (r, &b) in params.tensors[idx].data.iter_mut().zip(new) {
                    *r = (1.0 - momentum) * *r + momentum * b;
                }
            }
        }
        Ok(())
    }

    /// Parameter gradients given upstream gradients on the normalized outputs.
    /// A `None` upstream leaves the corresponding projector's gradients at zero.
    pub fn backward(
        &self,
        params: &ParamSet,
        cache: &ForwardCache,
        d_global: Option<&Array2<f64>>,
        d_dense: Option<&Array2<f64>>,
    ) -> ParamSet {
        let t = &params.tensors;
        let mut grads = self.layout.zeros_like();
        let (batch, h, w) = cache.backbone_dims;
        let cells = h * w;
        let channels = self.stages.last().expect("non-empty").cout;
        let mut dx = Array2::<f64>::zeros((batch * cells, channels));
        if let Some(dz) = d_global {
            let dpooled = Self::head_backward(self.global, params, &cache.global, dz, &mut grads);
            dx += &global_avg_pool_backward(&dpooled, batch, cells);
        }
        if let Some(dv) = d_dense {
            dx += &Self::head_backward(self.dense, params, &cache.dense, dv, &mut grads);
        }
        for (i, st) in self.stages.iter().enumerate().rev() {
            let sc = &cache.stages[i];
            let dnorm = relu_backward(&dx, &sc.pre_relu);
            let (dconv, dgamma, dbeta) = batch_norm_backward(&dnorm, &sc.norm, &t[st.gamma].view1());
            let need_dx = i > 0;
            let (dcols, dw, db) = affine_backward(&dconv, &sc.cols.view(), &t[st.weight].view2(), need_dx);
            grads.tensors[st.weight].data = dw.into_row_major_vec();
            grads.tensors[st.bias].data = db.to_vec();
            grads.tensors[st.gamma].data = dgamma.to_vec();
            grads.tensors[st.beta].data = dbeta.to_vec();
            if let Some(dcols) = dcols {
                let (b, hi, wi, ci) = sc.input_dims;
                debug_assert_eq!(ci, st.cin);
                let g = ConvGeom { kernel: CONV3, stride: st.stride, pad: 1 };
                dx = col2im(&dcols, b, hi, wi, ci, g).data;
            }
        }
        grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    fn tiny() -> Encoder {
        Encoder::new(ModelConfig {
            input_size: 8,
            width: 4,
            depth: 2,
            output_stride: 2,
            embed_dim: 3,
            global_hidden: 5,
        })
        .unwrap()
    }

    fn random_batch(enc: &Encoder, b: usize, seed: u64) -> FeatureMap {
        let n = enc.config.input_size;
        let mut rng = stream_rng(seed, 0, 0);
        FeatureMap::new(b, n, n, Array2::from_shape_fn((b * n * n, 3), |_| rng.gen::<f64>()))
    }

    #[test]
    fn outputs_are_unit_norm_and_shaped() {
        let enc = tiny();
        let params = enc.init_params(&mut stream_rng(1, 0, 0));
        let out = enc.forward(&params, random_batch(&enc, 3, 2), NormMode::Running).unwrap();
        assert_eq!(out.global.dim(), (3, 3));
        assert_eq!(out.dense.dim(), (3 * 16, 3));
        for row in out.global.rows().into_iter().chain(out.dense.rows()) {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let enc = tiny();
        let mut params = enc.init_params(&mut stream_rng(3, 0, 0));
        let input = random_batch(&enc, 2, 4);
        let mut rng = stream_rng(5, 0, 0);
        // Nonzero biases keep pre-activations away from the ReLU kink.
        for (i, t) in params.tensors.iter_mut().enumerate() {
            if matches!(params.kinds[i], ParamKind::Bias | ParamKind::Norm) {
                t.data.iter_mut().for_each(|v| *v += rng.gen_range(-0.5..0.5));
            }
        }
        let pz = Array2::from_shape_fn((2, 3), |_| rng.gen_range(-1.0..1.0));
        let pv = Array2::from_shape_fn((32, 3), |_| rng.gen_range(-1.0..1.0));
        let objective = |p: &ParamSet| {
            let out = enc.forward(p, input.clone(), NormMode::Batch).unwrap();
            (&out.global * &pz).sum() + (&out.dense * &pv).sum()
        };
        let (_, cache) = enc.forward_train(&params, input.clone()).unwrap();
        let grads = enc.backward(&params, &cache, Some(&pz), Some(&pv));
        let h = 1e-6;
        for ti in 0..params.len() {
            for &k in &[0usize, params.tensors[ti].data.len() / 2, params.tensors[ti].data.len() - 1] {
                let mut plus = params.clone();
                plus.tensors[ti].data[k] += h;
                let mut minus = params.clone();
                minus.tensors[ti].data[k] -= h;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                let an = grads.tensors[ti].data[k];
                assert!(
                    (fd - an).abs() <= 1e-5 * (1.0 + fd.abs()),
                    "{}[{k}]: fd {fd} analytic {an}",
                    params.names[ti]
                );
            }
        }
    }

    #[test]
    fn running_statistics_follow_batch_statistics() {
        let enc = tiny();
        let mut params = enc.init_params(&mut stream_rng(1, 0, 0));
        let input = random_batch(&enc, 3, 2);
        let (batch_out, cache) = enc.forward_train(&params, input.clone()).unwrap();
        let stats = cache.norm_stats();
        let before = params.clone();
        enc.update_running_stats(&mut params, &stats, 0.25).unwrap();
        for (i, name) in params.names.iter().enumerate() {
            let changed = params.tensors[i] != before.tensors[i];
            assert_eq!(changed, params.kinds[i] == ParamKind::Stat, "{name}");
        }
        // With running statistics equal to this batch's, both modes agree.
        enc.update_running_stats(&mut params, &stats, 1.0).unwrap();
        let fixed = enc.forward(&params, input, NormMode::Running).unwrap();
        assert!((&fixed.dense - &batch_out.dense).iter().all(|d| d.abs() < 1e-9));
        assert!((&fixed.global - &batch_out.global).iter().all(|d| d.abs() < 1e-9));
    }

    #[test]
    fn rejects_bad_shapes_and_configs() {
        let enc = tiny();
        let params = enc.init_params(&mut stream_rng(1, 0, 0));
        let wrong = FeatureMap::new(1, 6, 6, Array2::zeros((36, 3)));
        assert!(matches!(enc.forward(&params, wrong, NormMode::Batch), Err(DscError::Input(_))));
        let bad = ModelConfig { output_stride: 3, ..ModelConfig::default() };
        assert!(Encoder::new(bad).is_err());
        let bad = ModelConfig { input_size: 8, output_stride: 8, ..ModelConfig::default() };
        assert!(Encoder::new(bad).is_err());
    }
}
