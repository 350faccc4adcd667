//! Training configuration: typed fields behind flat dotted keys.
//!
//! Files hold one `key=value` per line; `#` starts a comment. Unknown keys are
//! errors. The config hash covers every key except `seed`, so runs that differ
//! only by seed share a hash and are told apart by the seed suffix.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cluster::SinkhornConfig;
use crate::error::{DscError, Result};
use crate::losses::{Temperature, TripletOrientation};
use crate::model::ModelConfig;
use crate::synthdata::augment::AugmentConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SemanticStrategy {
    None,
    Neighbor,
    Triplet,
    Km,
    Pm,
    Ce,
}

impl SemanticStrategy {
    pub const ALL: [SemanticStrategy; 6] = [
        SemanticStrategy::None,
        SemanticStrategy::Neighbor,
        SemanticStrategy::Triplet,
        SemanticStrategy::Km,
        SemanticStrategy::Pm,
        SemanticStrategy::Ce,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SemanticStrategy::None => "none",
            SemanticStrategy::Neighbor => "neighbor",
            SemanticStrategy::Triplet => "triplet",
            SemanticStrategy::Km => "km",
            SemanticStrategy::Pm => "pm",
            SemanticStrategy::Ce => "ce",
        }
    }

    /// Strategies that train a prototype bank.
    pub fn uses_prototypes(self) -> bool {
        matches!(self, SemanticStrategy::Pm | SemanticStrategy::Ce)
    }
}

impl fmt::Display for SemanticStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SemanticStrategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| "expected one of none, neighbor, triplet, km, pm, ce".to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub num_images: usize,
    pub num_classes: usize,
    pub image_size: usize,
    /// Held-out images used only by the probes.
    pub eval_images: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub strategy: SemanticStrategy,
    pub w_ins: f64,
    pub w_pix: f64,
    pub w_sem: f64,
    pub temperature: Temperature,
    pub margin: f64,
    pub triplet_orientation: TripletOrientation,
    pub neighbors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmeansConfig {
    pub k: usize,
    pub iters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtoConfig {
    pub k: usize,
    pub sinkhorn: SinkhornConfig,
    pub softmax_temp: f64,
    pub freeze_steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Hard cap on optimizer steps; 0 means epochs decide.
    pub max_steps: u64,
    pub ema: f64,
    /// Checkpoint interval in steps; 0 writes only the initial and final checkpoints.
    pub checkpoint_every: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueConfig {
    pub instance: usize,
    pub dense: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub train_images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub augment: AugmentConfig,
    pub loss: LossConfig,
    pub kmeans: KmeansConfig,
    pub proto: ProtoConfig,
    pub optim: OptimConfig,
    pub train: ScheduleConfig,
    pub queue: QueueConfig,
    pub probe: ProbeConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let image_size = 64;
        Self {
            seed: 0,
            data: DataConfig {
                num_images: 2000,
                num_classes: 4,
                image_size,
                eval_images: 500,
                seed: 0,
            },
            model: ModelConfig {
                input_size: image_size,
                ..ModelConfig::default()
            },
            augment: AugmentConfig {
                output_size: image_size,
                ..AugmentConfig::default()
            },
            loss: LossConfig {
                strategy: SemanticStrategy::Pm,
                w_ins: 1.0,
                w_pix: 1.0,
                w_sem: 1.0,
                temperature: Temperature::default(),
                margin: 0.3,
                triplet_orientation: TripletOrientation::AsWritten,
                neighbors: 1,
            },
            kmeans: KmeansConfig { k: 100, iters: 10 },
            proto: ProtoConfig {
                k: 150,
                sinkhorn: SinkhornConfig::default(),
                softmax_temp: 0.1,
                freeze_steps: 0,
            },
            optim: OptimConfig {
                lr: 0.05,
                momentum: 0.9,
                nesterov: true,
                weight_decay: 1e-4,
            },
            train: ScheduleConfig {
                batch_size: 64,
                epochs: 50,
                max_steps: 0,
                ema: 0.99,
                checkpoint_every: 0,
            },
            queue: QueueConfig {
                instance: 4096,
                dense: 4096,
            },
            probe: ProbeConfig {
                epochs: 20,
                lr: 0.1,
                train_images: 500,
            },
        }
    }
}

/// Scalar types that can live behind a config key.
trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse::<$t>().map_err(|e| e.to_string())
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

plain_value!(usize, u64, bool, SemanticStrategy);

impl ConfigValue for f64 {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        let v: f64 = s.parse().map_err(|e: std::num::ParseFloatError| e.to_string())?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err("must be finite".into())
        }
    }
    fn render(&self) -> String {
        // Shortest round-trip representation.
        format!("{self:?}")
    }
}

impl ConfigValue for TripletOrientation {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        match s {
            "as_written" => Ok(TripletOrientation::AsWritten),
            "corrected" => Ok(TripletOrientation::Corrected),
            _ => Err("expected as_written or corrected".into()),
        }
    }
    fn render(&self) -> String {
        match self {
            TripletOrientation::AsWritten => "as_written".into(),
            TripletOrientation::Corrected => "corrected".into(),
        }
    }
}

macro_rules! config_keys {
    ($($key:literal => $($field:tt).+;)*) => {
        /// Every accepted key, in canonical order.
        pub const CONFIG_KEYS: &[&str] = &[$($key),*];

        impl TrainConfig {
            /// Sets one key from its textual value. Derived fields are refreshed.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let value = value.trim();
                match key {
                    $($key => {
                        self.$($field).+ = ConfigValue::parse_value(value).map_err(|reason| {
                            DscError::InvalidValue { key: key.to_string(), value: value.to_string(), reason }
                        })?;
                    })*
                    _ => return Err(DscError::UnknownKey(key.to_string())),
                }
                self.sync_derived();
                Ok(())
            }

            /// `(key, value)` for every key, in canonical order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$(($key, self.$($field).+.render())),*]
            }
        }
    };
}

config_keys! {
    "seed" => seed;
    "data.num_images" => data.num_images;
    "data.num_classes" => data.num_classes;
    "data.image_size" => data.image_size;
    "data.eval_images" => data.eval_images;
    "data.seed" => data.seed;
    "model.width" => model.width;
    "model.depth" => model.depth;
    "model.output_stride" => model.output_stride;
    "model.embed_dim" => model.embed_dim;
    "model.global_hidden" => model.global_hidden;
    "augment.crop_min" => augment.crop_scale_range.0;
    "augment.crop_max" => augment.crop_scale_range.1;
    "augment.flip_prob" => augment.flip_prob;
    "augment.grayscale_prob" => augment.grayscale_prob;
    "augment.jitter_prob" => augment.jitter_prob;
    "augment.jitter_strength" => augment.jitter_strength;
    "augment.blur_prob" => augment.blur_prob;
    "loss.strategy" => loss.strategy;
    "loss.w_ins" => loss.w_ins;
    "loss.w_pix" => loss.w_pix;
    "loss.w_sem" => loss.w_sem;
    "loss.tau_ins" => loss.temperature.ins;
    "loss.tau_pix" => loss.temperature.pix;
    "loss.tau_km" => loss.temperature.km;
    "loss.margin" => loss.margin;
    "loss.triplet_orientation" => loss.triplet_orientation;
    "neighbor.n" => loss.neighbors;
    "kmeans.K" => kmeans.k;
    "kmeans.iters" => kmeans.iters;
    "proto.K" => proto.k;
    "proto.epsilon" => proto.sinkhorn.epsilon;
    "proto.sinkhorn_iters" => proto.sinkhorn.iters;
    "proto.temp" => proto.softmax_temp;
    "proto.freeze_steps" => proto.freeze_steps;
    "optim.lr" => optim.lr;
    "optim.momentum" => optim.momentum;
    "optim.nesterov" => optim.nesterov;
    "optim.weight_decay" => optim.weight_decay;
    "train.batch_size" => train.batch_size;
    "train.epochs" => train.epochs;
    "train.max_steps" => train.max_steps;
    "train.ema" => train.ema;
    "train.checkpoint_every" => train.checkpoint_every;
    "queue.instance" => queue.instance;
    "queue.dense" => queue.dense;
    "probe.epochs" => probe.epochs;
    "probe.lr" => probe.lr;
    "probe.train_images" => probe.train_images;
}

impl TrainConfig {
    /// Values retained from the original large-scale recipe, for reference runs.
    pub fn paper_preset() -> Self {
        let mut c = Self::default();
        c.data.image_size = 224;
        c.model.width = 64;
        c.model.embed_dim = 128;
        c.optim.lr = 0.3;
        c.train.batch_size = 256;
        c.train.epochs = 200;
        c.queue.instance = 65536;
        c.queue.dense = 65536;
        c.sync_derived();
        c
    }

    fn sync_derived(&mut self) {
        self.model.input_size = self.data.image_size;
        self.augment.output_size = self.data.image_size;
    }

    pub fn seed_all(&mut self, seed: u64) {
        self.seed = seed;
        self.augment.seed = seed;
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.apply_assignment(line)
                .map_err(|e| match e {
                    DscError::Config(m) => DscError::Config(format!("line {}: {m}", lineno + 1)),
                    other => other,
                })?;
        }
        Ok(())
    }

    pub fn apply_assignment(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| DscError::Config(format!("expected key=value, got `{assignment}`")))?;
        self.set(key.trim(), value)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DscError::io(path, 0, e))?;
        let mut c = Self::default();
        c.apply_text(&text)?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, v: String, reason: &str| {
            Err(DscError::InvalidValue {
                key: key.into(),
                value: v,
                reason: reason.into(),
            })
        };
        let l = &self.loss;
        for (key, w) in [("loss.w_ins", l.w_ins), ("loss.w_pix", l.w_pix), ("loss.w_sem", l.w_sem)] {
            if w < 0.0 {
                return bad(key, w.render(), "weights must be non-negative");
            }
        }
        l.temperature.validate()?;
        if l.margin < 0.0 {
            return bad("loss.margin", l.margin.render(), "margin must be non-negative");
        }
        if !(self.optim.lr > 0.0) {
            return bad("optim.lr", self.optim.lr.render(), "learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.optim.momentum) {
            return bad("optim.momentum", self.optim.momentum.render(), "must be in [0, 1)");
        }
        if self.optim.weight_decay < 0.0 {
            return bad("optim.weight_decay", self.optim.weight_decay.render(), "must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.train.ema) {
            return bad("train.ema", self.train.ema.render(), "must be in [0, 1]");
        }
        if self.train.batch_size == 0 {
            return bad("train.batch_size", "0".into(), "must be at least 1");
        }
        if self.train.batch_size > self.data.num_images {
            return bad(
                "train.batch_size",
                self.train.batch_size.to_string(),
                "larger than the dataset",
            );
        }
        if !(self.proto.softmax_temp > 0.0) {
            return bad("proto.temp", self.proto.softmax_temp.render(), "must be positive");
        }
        if !(self.proto.sinkhorn.epsilon > 0.0) || self.proto.sinkhorn.iters == 0 {
            return Err(DscError::Config("proto.epsilon must be positive and proto.sinkhorn_iters >= 1".into()));
        }
        if self.proto.k == 0 || self.kmeans.k == 0 {
            return Err(DscError::Config("proto.K and kmeans.K must be at least 1".into()));
        }
        if self.probe.train_images == 0 || self.probe.train_images > self.data.num_images {
            return bad(
                "probe.train_images",
                self.probe.train_images.to_string(),
                "must be in 1..=data.num_images",
            );
        }
        if self.data.eval_images == 0 {
            return bad("data.eval_images", "0".into(), "the probes need held-out images");
        }
        if !(self.probe.lr > 0.0) {
            return bad("probe.lr", self.probe.lr.render(), "must be positive");
        }
        crate::synthdata::validate(self.data.num_images, self.data.num_classes, self.data.image_size)?;
        self.augment.validate()?;
        crate::model::Encoder::new(self.model.clone())?;
        let cells = {
            let g = self.data.image_size / self.model.output_stride;
            g * g
        };
        if l.strategy == SemanticStrategy::Km && self.kmeans.k > cells * self.train.batch_size {
            return bad("kmeans.K", self.kmeans.k.to_string(), "exceeds the pixels in a batch");
        }
        if matches!(l.strategy, SemanticStrategy::Neighbor | SemanticStrategy::Triplet) && l.neighbors >= cells {
            return bad("neighbor.n", l.neighbors.to_string(), "must be below the cells per image");
        }
        Ok(())
    }

    /// Configurations the ablations report as non-converging.
    pub fn warnings(&self) -> Vec<String> {
        let l = &self.loss;
        let sem = l.w_sem > 0.0 && l.strategy != SemanticStrategy::None;
        let mut out = Vec::new();
        if l.w_ins == 0.0 && l.w_pix > 0.0 && !sem {
            out.push("pixel-only objective: expected not to converge".to_string());
        }
        if l.w_ins == 0.0 && l.w_pix == 0.0 && sem {
            out.push("semantic-only objective: expected not to converge".to_string());
        }
        out
    }

    /// Canonical `key=value` lines for every key except `seed`, sorted by key.
    pub fn canonical_text(&self) -> String {
        let mut entries: Vec<_> = self.entries().into_iter().filter(|(k, _)| *k != "seed").collect();
        entries.sort();
        entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Every key, canonical order, seed included; parses back to an equal config.
    pub fn resolved_text(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_text().as_bytes()))
    }

    /// Optimizer steps per epoch; the last partial batch is dropped.
    pub fn steps_per_epoch(&self) -> u64 {
        (self.data.num_images / self.train.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        let by_epochs = self.steps_per_epoch() * self.train.epochs as u64;
        if self.train.max_steps > 0 {
            by_epochs.min(self.train.max_steps)
        } else {
            by_epochs
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_text_round_trips() {
        let mut c = TrainConfig::default();
        c.set("loss.strategy", "km").unwrap();
        c.set("loss.tau_pix", "0.15").unwrap();
        c.set("data.image_size", "32").unwrap();
        let mut back = TrainConfig::default();
        back.apply_text(&c.resolved_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.model.input_size, 32);
        assert_eq!(back.augment.output_size, 32);
        assert_eq!(CONFIG_KEYS.len(), c.entries().len());
    }

    #[test]
    fn unknown_key_is_named() {
        let mut c = TrainConfig::default();
        match c.apply_assignment("loss.stratgy=km") {
            Err(DscError::UnknownKey(k)) => assert_eq!(k, "loss.stratgy"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(c.set("loss.strategy", "kmeans"), Err(DscError::InvalidValue { .. })));
        assert!(matches!(c.set("optim.lr", "nan"), Err(DscError::InvalidValue { .. })));
        assert!(c.apply_text("seed 3").is_err());
    }

    #[test]
    fn comments_and_blank_lines() {
        let mut c = TrainConfig::default();
        c.apply_text("# desk run\n\nloss.strategy = ce  # inline\nkmeans.K=16\n").unwrap();
        assert_eq!(c.loss.strategy, SemanticStrategy::Ce);
        assert_eq!(c.kmeans.k, 16);
    }

    #[test]
    fn hash_ignores_seed_but_not_other_keys() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        b.seed_all(7);
        assert_eq!(a.hash(), b.hash());
        b.set("kmeans.K", "8").unwrap();
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn validation() {
        TrainConfig::default().validate().unwrap();
        TrainConfig::paper_preset().validate().unwrap();
        let mut c = TrainConfig::default();
        c.set("loss.w_sem", "-1").unwrap();
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.set("loss.margin", "-0.1").unwrap();
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.set("optim.lr", "0").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn warnings_for_single_granularity() {
        let mut c = TrainConfig::default();
        assert!(c.warnings().is_empty());
        c.set("loss.w_ins", "0").unwrap();
        c.set("loss.w_pix", "0").unwrap();
        assert_eq!(c.warnings().len(), 1);
        c.set("loss.w_pix", "1").unwrap();
        c.set("loss.strategy", "none").unwrap();
        assert_eq!(c.warnings().len(), 1);
    }

    #[test]
    fn step_counts() {
        let mut c = TrainConfig::default();
        c.set("data.num_images", "130").unwrap();
        c.set("train.batch_size", "64").unwrap();
        c.set("train.epochs", "3").unwrap();
        assert_eq!(c.steps_per_epoch(), 2);
        assert_eq!(c.total_steps(), 6);
        c.set("train.max_steps", "4").unwrap();
        assert_eq!(c.total_steps(), 4);
    }
}
