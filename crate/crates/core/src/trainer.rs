//! Training loop: the three-granularity objective, optimizer and EMA updates,
//! queue maintenance, metrics logging and resumable checkpoints.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta, NamedArray, FORMAT_VERSION};
use crate::cluster::{
    align_centroids, ce_strategy_loss, km_loss, member_centroids, member_centroids_backward, minibatch_kmeans,
    swapped_prediction_loss, KmeansInit, PrototypeBank,
};
use crate::config::{SemanticStrategy, TrainConfig};
use crate::error::{DscError, Result};
use crate::losses::{instance_loss, neighbor_loss, pixel_loss, triplet_loss};
use crate::model::{momentum_update, Encoder, EncoderOutput, NormMode, NormStats, RUNNING_STATS_MOMENTUM, MomentumEncoderState, NegativeQueue, ParamSet, Tensor};
use crate::optim::{cosine_lr, Sgd};
use crate::rng::{stream_rng, STREAM_AUGMENT, STREAM_CLUSTER, STREAM_INIT, STREAM_SHUFFLE, STREAM_WARMUP};
use crate::similarity::{correspondence, discover_neighbors, Correspondence, NeighborSet};
use crate::synthdata::augment::{two_views, ViewPair};
use crate::synthdata::{generate_dataset, generate_sample, SyntheticSample};

pub const METRICS_SCHEMA_VERSION: u32 = 1;
pub const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub ins: f64,
    pub pix: f64,
    pub sem: f64,
}

impl LossWeights {
    pub fn from_config(c: &TrainConfig) -> Self {
        Self {
            ins: c.loss.w_ins,
            pix: c.loss.w_pix,
            sem: c.loss.w_sem,
        }
    }
}

/// Weighted sum of the three granularities.
pub fn total_loss(ins: f64, pix: f64, sem: f64, w: LossWeights) -> Result<f64> {
    for (what, v) in [("instance loss", ins), ("pixel loss", pix), ("semantic loss", sem)] {
        if !v.is_finite() {
            return Err(DscError::NonFinite { what: what.into(), step: 0 });
        }
    }
    Ok(w.ins * ins + w.pix * pix + w.sem * sem)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_ins: f64,
    pub loss_pix: f64,
    pub loss_sem: f64,
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsHeader {
    pub schema: String,
    pub version: u32,
    pub fields: Vec<String>,
}

impl MetricsHeader {
    pub fn current() -> Self {
        Self {
            schema: "dsc.metrics".into(),
            version: METRICS_SCHEMA_VERSION,
            fields: ["step", "epoch", "lr", "loss_total", "loss_ins", "loss_pix", "loss_sem", "wall_time"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }
}

/// Parses a metrics log, header line first.
pub fn read_metrics(path: &Path) -> Result<(MetricsHeader, Vec<MetricsRecord>)> {
    let file = File::open(path).map_err(|e| DscError::io(path, 0, e))?;
    let mut lines = BufReader::new(file).lines();
    let parse_err = |e: serde_json::Error| DscError::Input(format!("{}: {e}", path.display()));
    let header_line = lines
        .next()
        .ok_or_else(|| DscError::Input(format!("{}: empty metrics log", path.display())))?
        .map_err(|e| DscError::io(path, 0, e))?;
    let header: MetricsHeader = serde_json::from_str(&header_line).map_err(parse_err)?;
    let mut records = Vec::new();
    for line in lines {
        let line = line.map_err(|e| DscError::io(path, 0, e))?;
        if !line.trim().is_empty() {
            records.push(serde_json::from_str(&line).map_err(parse_err)?);
        }
    }
    Ok((header, records))
}

/// Everything that evolves during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Completed optimizer steps.
    pub step: u64,
    pub online: ParamSet,
    pub target: MomentumEncoderState,
    pub velocity: ParamSet,
    pub prototypes: Option<PrototypeBank>,
    pub proto_velocity: Option<Array2<f64>>,
    pub instance_queue: NegativeQueue,
    pub dense_queue: NegativeQueue,
}

fn param_arrays(prefix: &str, p: &ParamSet) -> Vec<NamedArray> {
    p.names
        .iter()
        .zip(&p.tensors)
        .map(|(n, t)| NamedArray {
            name: format!("{prefix}/{n}"),
            shape: t.shape.clone(),
            data: t.data.clone(),
        })
        .collect()
}

fn matrix_array(name: &str, m: ArrayView2<'_, f64>) -> NamedArray {
    NamedArray {
        name: name.into(),
        shape: vec![m.nrows(), m.ncols()],
        data: m.iter().copied().collect(),
    }
}

fn restore_params(ckpt: &Checkpoint, prefix: &str, layout: &ParamSet, path: &Path) -> Result<ParamSet> {
    let mut out = layout.zeros_like();
    for (name, t) in out.names.iter().zip(out.tensors.iter_mut()) {
        let key = format!("{prefix}/{name}");
        let a = ckpt.get(&key).ok_or_else(|| DscError::Corrupt {
            path: path.to_path_buf(),
            reason: format!("missing array {key}"),
        })?;
        if a.shape != t.shape {
            return Err(DscError::Shape(format!("{key}: checkpoint {:?} vs model {:?}", a.shape, t.shape)));
        }
        *t = Tensor {
            shape: a.shape.clone(),
            data: a.data.clone(),
        };
    }
    Ok(out)
}

fn restore_matrix(ckpt: &Checkpoint, name: &str, path: &Path) -> Result<Array2<f64>> {
    let a = ckpt.get(name).ok_or_else(|| DscError::Corrupt {
        path: path.to_path_buf(),
        reason: format!("missing array {name}"),
    })?;
    if a.shape.len() != 2 {
        return Err(DscError::Corrupt {
            path: path.to_path_buf(),
            reason: format!("{name} is not a matrix"),
        });
    }
    Array2::from_shape_vec((a.shape[0], a.shape[1]), a.data.clone()).map_err(|e| DscError::Corrupt {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Unit-normalized mean of each image's dense map; zero rows for degenerate maps.
fn pooled_dense(out: &EncoderOutput) -> Array2<f64> {
    let mut p = Array2::<f64>::zeros((out.batch(), out.dense.ncols()));
    for b in 0..out.batch() {
        let m = out.dense_map(b).mean_axis(Axis(0)).expect("cells");
        let n = m.dot(&m).sqrt();
        if n > 1e-12 {
            p.row_mut(b).assign(&(&m / n));
        }
    }
    p
}

fn push_nonzero(queue: &mut NegativeQueue, rows: &Array2<f64>) -> Result<()> {
    let keep: Vec<usize> = (0..rows.nrows()).filter(|&r| rows.row(r).iter().any(|&v| v != 0.0)).collect();
    queue.push(rows.select(Axis(0), &keep).view())
}

impl TrainState {
    pub fn init(encoder: &Encoder, config: &TrainConfig) -> Result<Self> {
        let online = encoder.init_params(&mut stream_rng(config.seed, STREAM_INIT, 0));
        let target = MomentumEncoderState::new(&online, config.train.ema)?;
        let velocity = online.zeros_like();
        let d = encoder.embed_dim();
        let prototypes = if config.loss.strategy.uses_prototypes() {
            Some(PrototypeBank::new(
                config.proto.k,
                d,
                config.proto.sinkhorn,
                config.proto.softmax_temp,
                config.seed,
            )?)
        } else {
            None
        };
        let proto_velocity = prototypes.as_ref().map(|b| Array2::zeros(b.prototypes.raw_dim()));
        Ok(Self {
            step: 0,
            online,
            target,
            velocity,
            prototypes,
            proto_velocity,
            instance_queue: NegativeQueue::new(config.queue.instance, d),
            dense_queue: NegativeQueue::new(config.queue.dense, d),
        })
    }

    pub fn to_checkpoint(&self, config: &TrainConfig) -> Checkpoint {
        let mut arrays = param_arrays("online", &self.online);
        arrays.extend(param_arrays("momentum", &self.target.params));
        arrays.extend(param_arrays("velocity", &self.velocity));
        if let (Some(bank), Some(vel)) = (&self.prototypes, &self.proto_velocity) {
            arrays.push(matrix_array("prototypes", bank.prototypes.view()));
            arrays.push(matrix_array("prototypes_velocity", vel.view()));
        }
        arrays.push(matrix_array("queue/instance", self.instance_queue.negatives().view()));
        arrays.push(matrix_array("queue/dense", self.dense_queue.negatives().view()));
        Checkpoint {
            meta: CheckpointMeta {
                format_version: FORMAT_VERSION,
                config_hash: config.hash(),
                step: self.step,
                seed: config.seed,
                config: config.resolved_text(),
                instance_queue_capacity: self.instance_queue.capacity(),
                dense_queue_capacity: self.dense_queue.capacity(),
            },
            arrays,
        }
    }

    /// Rebuilds the state; the checkpoint must come from the same config and seed.
    pub fn from_checkpoint(ckpt: &Checkpoint, encoder: &Encoder, config: &TrainConfig, path: &Path) -> Result<Self> {
        if ckpt.meta.config_hash != config.hash() || ckpt.meta.seed != config.seed {
            return Err(DscError::ConfigMismatch {
                checkpoint: format!("{} (seed {})", ckpt.meta.config_hash, ckpt.meta.seed),
                config: format!("{} (seed {})", config.hash(), config.seed),
            });
        }
        let layout = encoder.layout();
        let online = restore_params(ckpt, "online", layout, path)?;
        let target = MomentumEncoderState::new(&restore_params(ckpt, "momentum", layout, path)?, config.train.ema)?;
        let velocity = restore_params(ckpt, "velocity", layout, path)?;
        let (prototypes, proto_velocity) = if config.loss.strategy.uses_prototypes() {
            let protos = restore_matrix(ckpt, "prototypes", path)?;
            let vel = restore_matrix(ckpt, "prototypes_velocity", path)?;
            let bank = PrototypeBank {
                prototypes: protos,
                sinkhorn: config.proto.sinkhorn,
                softmax_temp: config.proto.softmax_temp,
            };
            (Some(bank), Some(vel))
        } else {
            (None, None)
        };
        let iq = restore_matrix(ckpt, "queue/instance", path)?;
        let dq = restore_matrix(ckpt, "queue/dense", path)?;
        Ok(Self {
            step: ckpt.meta.step,
            online,
            target,
            velocity,
            prototypes,
            proto_velocity,
            instance_queue: NegativeQueue::from_rows(ckpt.meta.instance_queue_capacity, iq.view())?,
            dense_queue: NegativeQueue::from_rows(ckpt.meta.dense_queue_capacity, dq.view())?,
        })
    }
}

/// Online encoder parameters stored in a checkpoint.
pub fn restore_online(ckpt: &Checkpoint, encoder: &Encoder, path: &Path) -> Result<ParamSet> {
    restore_params(ckpt, "online", encoder.layout(), path)
}

/// Pretraining images and the held-out probe images.
pub fn make_splits(config: &TrainConfig) -> Result<(Vec<SyntheticSample>, Vec<SyntheticSample>)> {
    let d = &config.data;
    let train = generate_dataset(d.num_images, d.num_classes, d.image_size, d.seed)?;
    let eval = (d.num_images..d.num_images + d.eval_images)
        .map(|id| generate_sample(id as u64, d.num_classes, d.image_size, d.seed))
        .collect::<Result<Vec<_>>>()?;
    Ok((train, eval))
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub records: Vec<MetricsRecord>,
    pub state: TrainState,
}

/// Intermediate gradients of one step, exposed for inspection in tests.
#[derive(Debug, Clone)]
pub struct StepGrads {
    pub params: ParamSet,
    pub prototypes: Option<Array2<f64>>,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub encoder: Encoder,
    sgd: Sgd,
}

/// Maps per-image indices onto flattened batch rows.
fn globalize(per_image: Vec<Vec<usize>>, cells: usize) -> Correspondence {
    per_image
        .into_iter()
        .enumerate()
        .flat_map(|(b, v)| v.into_iter().map(move |c| b * cells + c))
        .collect()
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        for w in config.warnings() {
            log::warn!("{w}");
        }
        let encoder = Encoder::new(config.model.clone())?;
        let sgd = Sgd {
            momentum: config.optim.momentum,
            nesterov: config.optim.nesterov,
            weight_decay: config.optim.weight_decay,
        };
        Ok(Self { config, encoder, sgd })
    }

    /// Fresh state with both queues filled by the momentum encoder from augmented
    /// training views, so the first steps already contrast against real negatives.
    pub fn init_state(&self, dataset: &[SyntheticSample]) -> Result<TrainState> {
        let mut state = TrainState::init(&self.encoder, &self.config)?;
        let need = state.instance_queue.capacity().max(state.dense_queue.capacity());
        if dataset.is_empty() || need == 0 {
            return Ok(state);
        }
        let seed = self.config.seed;
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut stream_rng(seed, STREAM_WARMUP, 0));
        let chunk = self.config.train.batch_size.max(1);
        let mut filled = 0;
        let mut stats: Option<NormStats> = None;
        let mut passes = 0.0;
        while filled < need {
            let n = chunk.min(need - filled);
            let views = (filled..filled + n)
                .map(|i| {
                    let mut rng = stream_rng(seed, STREAM_WARMUP, 1 + i as u64);
                    two_views(&dataset[order[i % order.len()]], &self.config.augment, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            let (out, cache) = self
                .encoder
                .forward_train(&state.target.params, self.encoder.batch_images(views.iter().map(|p| &p.view_b))?)?;
            state.instance_queue.push(out.global.view())?;
            push_nonzero(&mut state.dense_queue, &pooled_dense(&out))?;
            let s = cache.norm_stats();
            match stats.as_mut() {
                None => stats = Some(s),
                Some(acc) => {
                    for (a, b) in acc.mean.iter_mut().zip(&s.mean).chain(acc.var.iter_mut().zip(&s.var)) {
                        *a += b;
                    }
                }
            }
            passes += 1.0;
            filled += n;
        }
        // Running statistics start from the average over the fill passes.
        if let Some(mut acc) = stats {
            acc.mean.iter_mut().chain(acc.var.iter_mut()).for_each(|a| *a /= passes);
            self.encoder.update_running_stats(&mut state.online, &acc, 1.0)?;
            self.encoder.update_running_stats(&mut state.target.params, &acc, 1.0)?;
        }
        Ok(state)
    }

    /// Dataset indices of the batch consumed at `step`.
    pub fn batch_indices(&self, n_images: usize, step: u64) -> Vec<usize> {
        let spe = (n_images / self.config.train.batch_size).max(1) as u64;
        let epoch = step / spe;
        let pos = (step % spe) as usize;
        let mut perm: Vec<usize> = (0..n_images).collect();
        perm.shuffle(&mut stream_rng(self.config.seed, STREAM_SHUFFLE, epoch));
        let b = self.config.train.batch_size;
        perm[pos * b..(pos + 1) * b].to_vec()
    }

    /// Augmented view pairs for `step`; depends only on the seed and the step index.
    pub fn batch_views(&self, dataset: &[SyntheticSample], step: u64) -> Result<Vec<ViewPair>> {
        let b = self.config.train.batch_size as u64;
        self.batch_indices(dataset.len(), step)
            .into_iter()
            .enumerate()
            .map(|(j, idx)| {
                let mut rng = stream_rng(self.config.seed, STREAM_AUGMENT, step * b + j as u64);
                two_views(&dataset[idx], &self.config.augment, &mut rng)
            })
            .collect()
    }

    /// Losses and gradients of one batch without touching the state.
    pub fn compute(&self, state: &TrainState, batch: &[ViewPair]) -> Result<StepOutput> {
        let cfg = &self.config;
        let step = state.step;
        let nonfinite = |what: &str| DscError::NonFinite { what: what.into(), step: step + 1 };
        let weights = LossWeights::from_config(cfg);
        let (out_a, cache) = self
            .encoder
            .forward_train(&state.online, self.encoder.batch_images(batch.iter().map(|p| &p.view_a))?)?;
        let out_b = self.encoder.forward(
            &state.target.params,
            self.encoder.batch_images(batch.iter().map(|p| &p.view_b))?,
            NormMode::Batch,
        )?;
        let cells = out_a.cells_per_image();
        let nb = out_a.batch();

        let corr = globalize(
            (0..nb)
                .map(|b| correspondence(out_a.dense_map(b).dot(&out_b.dense_map(b).t()).view()))
                .collect::<Result<Vec<_>>>()?,
            cells,
        );
        let t = cfg.loss.temperature;
        let ins = instance_loss(
            out_a.global.view(),
            out_b.global.view(),
            state.instance_queue.negatives().view(),
            t.ins,
        )?;
        let dense_negs = state.dense_queue.negatives();
        let pix = pixel_loss(out_a.dense.view(), out_b.dense.view(), &corr, dense_negs.view(), t.pix)?;

        let mut proto_grad = None;
        let (sem_value, sem_grad) = match cfg.loss.strategy {
            SemanticStrategy::None => (0.0, None),
            SemanticStrategy::Neighbor | SemanticStrategy::Triplet => {
                let neighbors: NeighborSet = (0..nb)
                    .map(|b| discover_neighbors(out_a.dense_map(b), cfg.loss.neighbors))
                    .collect::<Result<Vec<_>>>()?
                    .into_iter()
                    .enumerate()
                    .flat_map(|(b, lists)| {
                        lists
                            .into_iter()
                            .map(move |l| l.into_iter().map(|j| b * cells + j).collect::<Vec<_>>())
                    })
                    .collect();
                let lg = if cfg.loss.strategy == SemanticStrategy::Neighbor {
                    neighbor_loss(out_a.dense.view(), out_b.dense.view(), &corr, &neighbors, dense_negs.view(), t.pix)?
                } else {
                    triplet_loss(
                        out_a.dense.view(),
                        out_b.dense.view(),
                        &corr,
                        &neighbors,
                        cfg.loss.margin,
                        cfg.loss.triplet_orientation,
                    )?
                };
                (lg.value, Some(lg.grad))
            }
            SemanticStrategy::Km => {
                let k = cfg.kmeans.k;
                let mut seed_a = stream_rng(cfg.seed, STREAM_CLUSTER, 2 * step);
                let mut seed_b = stream_rng(cfg.seed, STREAM_CLUSTER, 2 * step + 1);
                let km_a = minibatch_kmeans(
                    out_a.dense.view(),
                    k,
                    KmeansInit::Seed(seed_a.gen()),
                    cfg.kmeans.iters,
                )?;
                let km_b = minibatch_kmeans(
                    out_b.dense.view(),
                    k,
                    KmeansInit::Seed(seed_b.gen()),
                    cfg.kmeans.iters,
                )?;
                let pairing = align_centroids(km_a.centroids.vectors.view(), km_b.centroids.vectors.view())?;
                let (e_a, ccache) =
                    member_centroids(out_a.dense.view(), &km_a.assignment, km_a.centroids.vectors.view())?;
                let none = Array2::<f64>::zeros((0, e_a.ncols()));
                let lg = km_loss(e_a.view(), km_b.centroids.vectors.view(), &pairing, none.view(), t.km)?;
                (lg.value, Some(member_centroids_backward(&ccache, lg.grad.view())))
            }
            SemanticStrategy::Pm => {
                let bank = state.prototypes.as_ref().expect("prototype bank for pm");
                let q_a = bank.codes(out_a.dense.view())?;
                let q_b = bank.codes(out_b.dense.view())?;
                let v_b = out_b.dense.select(Axis(0), &corr);
                let q_b = q_b.select(Axis(0), &corr);
                let lg = swapped_prediction_loss(
                    out_a.dense.view(),
                    v_b.view(),
                    q_a.view(),
                    q_b.view(),
                    bank.prototypes.view(),
                    bank.softmax_temp,
                )?;
                proto_grad = Some(lg.grad_prototypes);
                (lg.value, Some(lg.grad_a))
            }
            SemanticStrategy::Ce => {
                let bank = state.prototypes.as_ref().expect("prototype bank for ce");
                let q_a = bank.codes(out_a.dense.view())?;
                let (lg, gc) =
                    ce_strategy_loss(out_a.dense.view(), bank.prototypes.view(), q_a.view(), bank.softmax_temp)?;
                proto_grad = Some(gc);
                (lg.value, Some(lg.grad))
            }
        };

        let loss_total = total_loss(ins.value, pix.value, sem_value, weights).map_err(|e| match e {
            DscError::NonFinite { what, .. } => DscError::NonFinite { what, step: step + 1 },
            other => other,
        })?;
        if !loss_total.is_finite() {
            return Err(nonfinite("total loss"));
        }

        let d_global = (weights.ins > 0.0).then(|| &ins.grad * weights.ins);
        let sem_active = weights.sem > 0.0 && sem_grad.is_some();
        let d_dense = if weights.pix > 0.0 || sem_active {
            let mut d = Array2::<f64>::zeros(out_a.dense.raw_dim());
            if weights.pix > 0.0 {
                d.scaled_add(weights.pix, &pix.grad);
            }
            if sem_active {
                d.scaled_add(weights.sem, sem_grad.as_ref().expect("checked"));
            }
            Some(d)
        } else {
            None
        };
        let grads = self.encoder.backward(&state.online, &cache, d_global.as_ref(), d_dense.as_ref());
        if !grads.all_finite() {
            return Err(nonfinite("gradient"));
        }
        let proto_grad = proto_grad.map(|g| if weights.sem > 0.0 { g * weights.sem } else { Array2::zeros(g.raw_dim()) });
        if proto_grad.as_ref().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(nonfinite("prototype gradient"));
        }

        let total_steps = cfg.total_steps().max(step + 1);
        let record = MetricsRecord {
            step: step + 1,
            epoch: step / cfg.steps_per_epoch().max(1),
            lr: cosine_lr(step, total_steps, cfg.optim.lr)?,
            loss_total,
            loss_ins: ins.value,
            loss_pix: pix.value,
            loss_sem: sem_value,
            wall_time: 0.0,
        };

        // Queue entries come from the momentum branch only.
        let pooled = pooled_dense(&out_b);
        Ok(StepOutput {
            record,
            grads: StepGrads {
                params: grads,
                prototypes: proto_grad,
            },
            queue_instance: out_b.global,
            queue_dense: pooled,
            norm_stats: cache.norm_stats(),
        })
    }

    /// One optimizer step: loss, SGD on online params and prototypes, EMA, queue pushes.
    /// On error the state is left untouched.
    pub fn train_step(&self, state: &mut TrainState, batch: &[ViewPair]) -> Result<MetricsRecord> {
        let out = self.compute(state, batch)?;
        let lr = out.record.lr;
        self.sgd.step(&mut state.online, &out.grads.params, &mut state.velocity, lr)?;
        self.encoder.update_running_stats(&mut state.online, &out.norm_stats, RUNNING_STATS_MOMENTUM)?;
        if let (Some(bank), Some(vel), Some(g)) =
            (state.prototypes.as_mut(), state.proto_velocity.as_mut(), out.grads.prototypes.as_ref())
        {
            if state.step >= self.config.proto.freeze_steps {
                self.sgd.step_matrix(bank.prototypes.view_mut(), g, vel, lr);
            }
            bank.renormalize();
        }
        momentum_update(&state.online, &mut state.target)?;
        state.instance_queue.push(out.queue_instance.view())?;
        push_nonzero(&mut state.dense_queue, &out.queue_dense)?;
        state.step += 1;
        Ok(out.record)
    }

    /// Runs the schedule from scratch or from `resume`, writing checkpoints and the
    /// metrics log into `out_dir`.
    pub fn fit(&self, dataset: &[SyntheticSample], out_dir: &Path, resume: Option<&Path>) -> Result<FitOutcome> {
        let cfg = &self.config;
        if dataset.len() < cfg.train.batch_size {
            return Err(DscError::Dataset(format!(
                "{} images cannot fill a batch of {}",
                dataset.len(),
                cfg.train.batch_size
            )));
        }
        std::fs::create_dir_all(out_dir).map_err(|e| DscError::io(out_dir, 0, e))?;
        let metrics_path = out_dir.join(METRICS_FILE);
        let total = cfg.total_steps();
        let (mut state, mut records, mut last_ckpt) = match resume {
            Some(path) => {
                let ckpt = Checkpoint::load(path)?;
                let state = TrainState::from_checkpoint(&ckpt, &self.encoder, cfg, path)?;
                let records = if metrics_path.exists() {
                    let (_, mut r) = read_metrics(&metrics_path)?;
                    r.retain(|m| m.step <= state.step);
                    r
                } else {
                    Vec::new()
                };
                (state, records, path.to_path_buf())
            }
            None => {
                let state = self.init_state(dataset)?;
                let path = state.to_checkpoint(cfg).save(out_dir)?;
                (state, Vec::new(), path)
            }
        };
        let mp = metrics_path.clone();
        let io_err = |step: u64| {
            let mp = mp.clone();
            move |e: std::io::Error| DscError::io(mp, step, e)
        };
        let mut writer = BufWriter::new(File::create(&metrics_path).map_err(io_err(state.step))?);
        let header = serde_json::to_string(&MetricsHeader::current()).expect("header serializes");
        writeln!(writer, "{header}").map_err(io_err(state.step))?;
        for r in &records {
            writeln!(writer, "{}", serde_json::to_string(r).expect("record serializes")).map_err(io_err(r.step))?;
        }
        let start = Instant::now();
        while state.step < total {
            let batch = self.batch_views(dataset, state.step)?;
            let result = self.train_step(&mut state, &batch);
            let mut record = match result {
                Ok(r) => r,
                Err(e) => {
                    writer.flush().map_err(io_err(state.step))?;
                    return Err(e);
                }
            };
            record.wall_time = start.elapsed().as_secs_f64();
            writeln!(writer, "{}", serde_json::to_string(&record).expect("record serializes"))
                .map_err(io_err(record.step))?;
            records.push(record);
            let every = cfg.train.checkpoint_every;
            if state.step == total || (every > 0 && state.step % every == 0) {
                writer.flush().map_err(io_err(state.step))?;
                last_ckpt = state.to_checkpoint(cfg).save(out_dir)?;
            }
        }
        writer.flush().map_err(io_err(state.step))?;
        Ok(FitOutcome {
            final_checkpoint: last_ckpt,
            metrics_path,
            records,
            state,
        })
    }
}

/// Result of [`Trainer::compute`].
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub record: MetricsRecord,
    pub grads: StepGrads,
    pub queue_instance: Array2<f64>,
    /// Pooled view-b dense embeddings, one row per image; all-zero rows are skipped.
    pub queue_dense: Array2<f64>,
    /// Batch statistics of the online pass, folded into the running statistics.
    pub norm_stats: NormStats,
}
