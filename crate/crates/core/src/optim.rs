//! SGD with (Nesterov) momentum and the cosine learning-rate schedule.

use ndarray::{Array2, ArrayViewMut2};

use crate::error::{DscError, Result};
use crate::model::{ParamKind, ParamSet};

/// `lr0 * 0.5 * (1 + cos(pi * step / total_steps))`.
pub fn cosine_lr(step: u64, total_steps: u64, lr0: f64) -> Result<f64> {
    if step > total_steps {
        return Err(DscError::Input(format!("step {step} beyond schedule of {total_steps} steps")));
    }
    if total_steps == 0 {
        return Ok(lr0);
    }
    let frac = step as f64 / total_steps as f64;
    Ok(lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
}

impl Sgd {
    /// One update of a flat slice. `decay` selects whether weight decay applies.
    fn update(&self, p: &mut [f64], g: &[f64], buf: &mut [f64], lr: f64, decay: bool) {
        let wd = if decay { self.weight_decay } else { 0.0 };
        for ((p, &g), b) in p.iter_mut().zip(g).zip(buf.iter_mut()) {
            let d = g + wd * *p;
            *b = self.momentum * *b + d;
            let step = if self.nesterov { d + self.momentum * *b } else { *b };
            *p -= lr * step;
        }
    }

    /// Updates every trainable tensor; only `Weight` tensors decay.
    pub fn step(&self, params: &mut ParamSet, grads: &ParamSet, velocity: &mut ParamSet, lr: f64) -> Result<()> {
        params.check_same_layout(grads)?;
        params.check_same_layout(velocity)?;
        for i in 0..params.len() {
            if params.kinds[i] == ParamKind::Stat {
                continue;
            }
            let decay = params.kinds[i] == ParamKind::Weight;
            self.update(
                &mut params.tensors[i].data,
                &grads.tensors[i].data,
                &mut velocity.tensors[i].data,
                lr,
                decay,
            );
        }
        Ok(())
    }

    /// Undecayed update of a standalone matrix such as the prototype bank.
    pub fn step_matrix(&self, param: ArrayViewMut2<'_, f64>, grad: &Array2<f64>, velocity: &mut Array2<f64>, lr: f64) {
        let mut param = param;
        let p = param.as_slice_mut().expect("standard layout");
        let g = grad.as_standard_layout();
        let v = velocity.as_slice_mut().expect("standard layout");
        self.update(p, g.as_slice().expect("standard layout"), v, lr, false);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Tensor;

    #[test]
    fn cosine_schedule_examples() {
        assert_eq!(cosine_lr(0, 100, 0.3).unwrap(), 0.3);
        assert!(cosine_lr(100, 100, 0.3).unwrap().abs() < 1e-15);
        assert!((cosine_lr(50, 100, 0.3).unwrap() - 0.15).abs() < 1e-15);
        assert!(cosine_lr(101, 100, 0.3).is_err());
    }

    fn single(kind: ParamKind, v: f64) -> ParamSet {
        let mut p = ParamSet::default();
        p.push("x", kind, Tensor::filled(&[1], v));
        p
    }

    #[test]
    fn nesterov_matches_hand_computation() {
        let sgd = Sgd { momentum: 0.9, nesterov: true, weight_decay: 0.1 };
        let mut p = single(ParamKind::Weight, 1.0);
        let mut v = p.zeros_like();
        let g = single(ParamKind::Weight, 0.5);
        sgd.step(&mut p, &g, &mut v, 0.1).unwrap();
        // d = 0.5 + 0.1 = 0.6, buf = 0.6, step = 0.6 + 0.54 = 1.14
        assert!((p.tensors[0].data[0] - (1.0 - 0.114)).abs() < 1e-15);
        assert!((v.tensors[0].data[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn norm_and_bias_skip_weight_decay() {
        let sgd = Sgd { momentum: 0.0, nesterov: false, weight_decay: 0.5 };
        for kind in [ParamKind::Norm, ParamKind::Bias] {
            let mut p = single(kind, 2.0);
            let mut v = p.zeros_like();
            sgd.step(&mut p, &single(kind, 0.0), &mut v, 1.0).unwrap();
            assert_eq!(p.tensors[0].data[0], 2.0);
        }
        let mut p = single(ParamKind::Weight, 2.0);
        let mut v = p.zeros_like();
        sgd.step(&mut p, &single(ParamKind::Weight, 0.0), &mut v, 1.0).unwrap();
        assert_eq!(p.tensors[0].data[0], 1.0);
        let mut p = single(ParamKind::Stat, 2.0);
        let mut v = p.zeros_like();
        sgd.step(&mut p, &single(ParamKind::Stat, 5.0), &mut v, 1.0).unwrap();
        assert_eq!(p.tensors[0].data[0], 2.0);
    }
}
