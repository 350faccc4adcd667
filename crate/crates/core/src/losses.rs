//! InfoNCE-family losses for instance, pixel and neighbor discrimination, plus
//! the pixel triplet loss.
//!
//! Embeddings are unit-norm, so similarities are plain dot products. Every loss
//! returns its gradient with respect to the online (view-a) embeddings only;
//! view-b rows and queue negatives are constants.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{DscError, Result};
use crate::similarity::{Correspondence, NeighborSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Temperature {
    pub ins: f64,
    pub pix: f64,
    pub km: f64,
}

impl Default for Temperature {
    fn default() -> Self {
        Self { ins: 0.2, pix: 0.2, km: 0.2 }
    }
}

impl Temperature {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [("ins", self.ins), ("pix", self.pix), ("km", self.km)] {
            check_tau(t).map_err(|_| DscError::Config(format!("temperature {name} must be positive, got {t}")))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TripletOrientation {
    /// `[s(a, b) - s(a, n) + margin]_+`
    AsWritten,
    /// `[s(a, n) - s(a, b) + margin]_+`
    Corrected,
}

/// Loss value with the gradient on the anchor rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Array2<f64>,
}

pub(crate) fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(DscError::Config(format!("temperature must be positive, got {tau}")))
    }
}

/// `-log(sum_pos e^l / sum_all e^l)` over logits, max-shifted. Writes d loss / d logit.
pub(crate) fn nce_kernel(pos: &[f64], neg: &[f64], dpos: &mut [f64], dneg: &mut [f64]) -> f64 {
    let m = pos
        .iter()
        .chain(neg)
        .fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
    let mut s_pos = 0.0;
    for (d, &l) in dpos.iter_mut().zip(pos) {
        *d = (l - m).exp();
        s_pos += *d;
    }
    let mut s_all = s_pos;
    for (d, &l) in dneg.iter_mut().zip(neg) {
        *d = (l - m).exp();
        s_all += *d;
    }
    for d in dpos.iter_mut() {
        *d = *d / s_all - *d / s_pos;
    }
    for d in dneg.iter_mut() {
        *d /= s_all;
    }
    s_all.ln() - s_pos.ln()
}

/// Single-positive InfoNCE on raw similarities.
pub fn info_nce(pos_sim: f64, neg_sims: &[f64], tau: f64) -> Result<f64> {
    check_tau(tau)?;
    let neg: Vec<f64> = neg_sims.iter().map(|s| s / tau).collect();
    let mut dneg = vec![0.0; neg.len()];
    Ok(nce_kernel(&[pos_sim / tau], &neg, &mut [0.0], &mut dneg))
}

fn check_dims(a: &ArrayView2<'_, f64>, b: &ArrayView2<'_, f64>, what: &str) -> Result<()> {
    if a.ncols() != b.ncols() {
        return Err(DscError::Shape(format!(
            "{what}: embedding dims differ ({} vs {})",
            a.ncols(),
            b.ncols()
        )));
    }
    Ok(())
}

/// Batch mean of InfoNCE between `z_a[i]` and `z_b[i]` against the queue rows.
pub fn instance_loss(
    z_a: ArrayView2<'_, f64>,
    z_b: ArrayView2<'_, f64>,
    negatives: ArrayView2<'_, f64>,
    tau: f64,
) -> Result<LossGrad> {
    if z_a.dim() != z_b.dim() {
        return Err(DscError::Shape(format!("z_a {:?} vs z_b {:?}", z_a.dim(), z_b.dim())));
    }
    let corr: Correspondence = (0..z_a.nrows()).collect();
    dense_nce(z_a, z_b, &corr, None, negatives, tau)
}

/// Mean over view-a cells of InfoNCE with the corresponding view-b cell as positive.
pub fn pixel_loss(
    v_a: ArrayView2<'_, f64>,
    v_b: ArrayView2<'_, f64>,
    corr: &Correspondence,
    negatives: ArrayView2<'_, f64>,
    tau: f64,
) -> Result<LossGrad> {
    dense_nce(v_a, v_b, corr, None, negatives, tau)
}

/// Pixel loss with the neighbor exponentials added to numerator and denominator.
pub fn neighbor_loss(
    v_a: ArrayView2<'_, f64>,
    v_b: ArrayView2<'_, f64>,
    corr: &Correspondence,
    neighbors: &NeighborSet,
    negatives: ArrayView2<'_, f64>,
    tau: f64,
) -> Result<LossGrad> {
    dense_nce(v_a, v_b, corr, Some(neighbors), negatives, tau)
}

fn validate_indices(
    v_a: &ArrayView2<'_, f64>,
    v_b: &ArrayView2<'_, f64>,
    corr: &Correspondence,
    neighbors: Option<&NeighborSet>,
) -> Result<()> {
    if corr.len() != v_a.nrows() {
        return Err(DscError::Input(format!(
            "correspondence has {} entries for {} anchors",
            corr.len(),
            v_a.nrows()
        )));
    }
    if let Some(&bad) = corr.iter().find(|&&c| c >= v_b.nrows()) {
        return Err(DscError::Input(format!(
            "correspondence index {bad} out of range for {} view-b rows",
            v_b.nrows()
        )));
    }
    if let Some(nb) = neighbors {
        if nb.len() != v_a.nrows() {
            return Err(DscError::Input(format!(
                "neighbor set has {} lists for {} anchors",
                nb.len(),
                v_a.nrows()
            )));
        }
        for (i, list) in nb.iter().enumerate() {
            if list.iter().any(|&j| j >= v_a.nrows() || j == i) {
                return Err(DscError::Input(format!("invalid neighbor list for anchor {i}: {list:?}")));
            }
        }
    }
    Ok(())
}

/// Shared kernel of the instance, pixel and neighbor losses.
fn dense_nce(
    v_a: ArrayView2<'_, f64>,
    v_b: ArrayView2<'_, f64>,
    corr: &Correspondence,
    neighbors: Option<&NeighborSet>,
    negatives: ArrayView2<'_, f64>,
    tau: f64,
) -> Result<LossGrad> {
    check_tau(tau)?;
    check_dims(&v_a, &v_b, "anchor/positive")?;
    if negatives.nrows() > 0 {
        check_dims(&v_a, &negatives, "anchor/negative")?;
    }
    validate_indices(&v_a, &v_b, corr, neighbors)?;
    let p = v_a.nrows();
    if p == 0 {
        return Ok(LossGrad { value: 0.0, grad: Array2::zeros(v_a.raw_dim()) });
    }
    let inv_tau = 1.0 / tau;
    let neg_logits = if negatives.nrows() > 0 {
        v_a.dot(&negatives.t()) * inv_tau
    } else {
        Array2::zeros((p, 0))
    };
    let mut dneg = Array2::<f64>::zeros(neg_logits.raw_dim());
    let mut grad = Array2::<f64>::zeros(v_a.raw_dim());
    let scale = 1.0 / p as f64;
    let mut total = 0.0;
    let mut pos = Vec::new();
    let mut dpos = Vec::new();
    for i in 0..p {
        let anchor = v_a.row(i);
        let positive = v_b.row(corr[i]);
        pos.clear();
        pos.push(anchor.dot(&positive) * inv_tau);
        let nbrs: &[usize] = neighbors.map(|n| n[i].as_slice()).unwrap_or(&[]);
        for &j in nbrs {
            pos.push(anchor.dot(&v_a.row(j)) * inv_tau);
        }
        dpos.clear();
        dpos.resize(pos.len(), 0.0);
        let neg_row = neg_logits.row(i);
        let mut dneg_row = dneg.row_mut(i);
        total += nce_kernel(
            &pos,
            neg_row.as_slice().expect("contiguous logits"),
            &mut dpos,
            dneg_row.as_slice_mut().expect("contiguous"),
        );
        let c = dpos[0] * inv_tau * scale;
        grad.row_mut(i).scaled_add(c, &positive);
        for (k, &j) in nbrs.iter().enumerate() {
            let c = dpos[k + 1] * inv_tau * scale;
            // Both ends of a neighbor pair are online embeddings.
            grad.row_mut(i).scaled_add(c, &v_a.row(j));
            grad.row_mut(j).scaled_add(c, &anchor);
        }
    }
    if negatives.nrows() > 0 {
        grad.scaled_add(inv_tau * scale, &dneg.dot(&negatives));
    }
    Ok(LossGrad { value: total * scale, grad })
}

/// Mean over cells of the hinge sum over each cell's neighbors.
pub fn triplet_loss(
    v_a: ArrayView2<'_, f64>,
    v_b: ArrayView2<'_, f64>,
    corr: &Correspondence,
    neighbors: &NeighborSet,
    margin: f64,
    orientation: TripletOrientation,
) -> Result<LossGrad> {
    if margin < 0.0 || !margin.is_finite() {
        return Err(DscError::Config(format!("margin must be non-negative, got {margin}")));
    }
    check_dims(&v_a, &v_b, "anchor/positive")?;
    validate_indices(&v_a, &v_b, corr, Some(neighbors))?;
    let p = v_a.nrows();
    let mut grad = Array2::<f64>::zeros(v_a.raw_dim());
    if p == 0 {
        return Ok(LossGrad { value: 0.0, grad });
    }
    let scale = 1.0 / p as f64;
    let sign = match orientation {
        TripletOrientation::AsWritten => 1.0,
        TripletOrientation::Corrected => -1.0,
    };
    let mut total = 0.0;
    for i in 0..p {
        let anchor = v_a.row(i);
        let positive = v_b.row(corr[i]);
        let s_ab = anchor.dot(&positive);
        for &j in &neighbors[i] {
            let neighbor = v_a.row(j);
            let s_an = anchor.dot(&neighbor);
            let h = sign * (s_ab - s_an) + margin;
            if h > 0.0 {
                total += h;
                let c = sign * scale;
                grad.row_mut(i).scaled_add(c, &positive);
                grad.row_mut(i).scaled_add(-c, &neighbor);
                grad.row_mut(j).scaled_add(-c, &anchor);
            }
        }
    }
    Ok(LossGrad { value: total * scale, grad })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn info_nce_examples() {
        assert_eq!(info_nce(1.0, &[], 0.2).unwrap(), 0.0);
        for &(s, tau) in &[(0.3, 0.2), (-0.7, 1.0), (1.0, 0.05)] {
            assert!((info_nce(s, &[s], tau).unwrap() - LN2).abs() < 1e-12);
        }
        // ln(1 + e^-5)
        let expected = (1.0 + (-5.0f64).exp()).ln();
        assert!((info_nce(1.0, &[0.0], 0.2).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.006715).abs() < 1e-6);
        assert!(matches!(info_nce(1.0, &[0.0], 0.0), Err(DscError::Config(_))));
        assert!(info_nce(1.0, &[0.0], -1.0).is_err());
    }

    #[test]
    fn info_nce_is_stable_for_tiny_temperatures() {
        let v = info_nce(1.0, &[0.999, -1.0], 1e-4).unwrap();
        assert!(v.is_finite() && v >= 0.0);
    }

    #[test]
    fn instance_loss_examples() {
        let z = array![[1.0, 0.0], [0.0, 1.0]];
        let empty = Array2::<f64>::zeros((0, 2));
        assert_eq!(instance_loss(z.view(), z.view(), empty.view(), 0.2).unwrap().value, 0.0);
        let one = array![[1.0, 0.0]];
        let neg = array![[0.0, 1.0]];
        let v = instance_loss(one.view(), one.view(), neg.view(), 0.2).unwrap().value;
        assert!((v - (1.0 + (-5.0f64).exp()).ln()).abs() < 1e-12);
        assert!(instance_loss(one.view(), z.view(), neg.view(), 0.2).is_err());
    }

    #[test]
    fn pixel_loss_examples() {
        let m = array![[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]];
        let empty = Array2::<f64>::zeros((0, 2));
        let id = vec![0, 1, 2];
        assert_eq!(pixel_loss(m.view(), m.view(), &id, empty.view(), 0.2).unwrap().value, 0.0);
        let one = array![[1.0, 0.0]];
        let v = pixel_loss(one.view(), one.view(), &vec![0], array![[0.0, 1.0]].view(), 0.2).unwrap().value;
        assert!((v - (1.0 + (-5.0f64).exp()).ln()).abs() < 1e-12);
        assert!(matches!(
            pixel_loss(one.view(), one.view(), &vec![3], empty.view(), 0.2),
            Err(DscError::Input(_))
        ));
    }

    #[test]
    fn neighbor_loss_examples() {
        // pos = 1, one neighbor with sim 1, no negatives -> 0.
        let a = array![[1.0, 0.0], [1.0, 0.0]];
        let empty = Array2::<f64>::zeros((0, 2));
        let nb: NeighborSet = vec![vec![1], vec![0]];
        let v = neighbor_loss(a.view(), a.view(), &vec![0, 1], &nb, empty.view(), 0.2).unwrap().value;
        assert_eq!(v, 0.0);
        // pos = 1, neighbor sim 1, neg = [0] -> -log(2e^5 / (2e^5 + 1)).
        let neg = array![[0.0, 1.0]];
        let v = neighbor_loss(a.view(), a.view(), &vec![0, 1], &nb, neg.view(), 0.2).unwrap().value;
        let e5 = 5.0f64.exp();
        let expected = -(2.0 * e5 / (2.0 * e5 + 1.0)).ln();
        assert!((v - expected).abs() < 1e-12);
        assert!((expected - 0.003364).abs() < 1e-6);
    }

    #[test]
    fn neighbor_loss_without_neighbors_is_pixel_loss() {
        let a = array![[0.6, 0.8], [1.0, 0.0], [0.0, -1.0]];
        let b = array![[0.8, 0.6], [0.0, 1.0], [-0.6, 0.8]];
        let negs = array![[1.0, 0.0], [0.28, 0.96]];
        let corr = vec![1, 0, 2];
        let nb: NeighborSet = vec![vec![]; 3];
        let px = pixel_loss(a.view(), b.view(), &corr, negs.view(), 0.2).unwrap();
        let nl = neighbor_loss(a.view(), b.view(), &corr, &nb, negs.view(), 0.2).unwrap();
        assert_eq!(px.value.to_bits(), nl.value.to_bits());
        assert_eq!(px.grad, nl.grad);
    }

    fn triplet_fixture() -> (Array2<f64>, Array2<f64>) {
        // s(a, b) = 0.9, s(a, n) = 0.5 for anchor 0 with neighbor 1.
        let a0 = [1.0, 0.0, 0.0];
        let n = [0.5, (1.0f64 - 0.25).sqrt(), 0.0];
        let b0 = [0.9, 0.0, (1.0f64 - 0.81).sqrt()];
        (array![a0, n], array![b0, n])
    }

    #[test]
    fn triplet_examples() {
        let (a, b) = triplet_fixture();
        let corr = vec![0, 1];
        let nb: NeighborSet = vec![vec![1], vec![]];
        let w = triplet_loss(a.view(), b.view(), &corr, &nb, 0.3, TripletOrientation::AsWritten).unwrap();
        // mean over the 2 cells of [0.9 - 0.5 + 0.3]_+ and an empty sum.
        assert!((w.value - 0.7 / 2.0).abs() < 1e-12);
        let c = triplet_loss(a.view(), b.view(), &corr, &nb, 0.3, TripletOrientation::Corrected).unwrap();
        assert_eq!(c.value, 0.0);
        assert!(matches!(
            triplet_loss(a.view(), b.view(), &corr, &nb, -0.1, TripletOrientation::AsWritten),
            Err(DscError::Config(_))
        ));
        let single = triplet_loss(
            a.slice(ndarray::s![0..1, ..]).view(),
            b.view(),
            &vec![0],
            &vec![vec![]],
            0.3,
            TripletOrientation::AsWritten,
        )
        .unwrap();
        assert_eq!(single.value, 0.0);
    }

    fn random_unit(rows: usize, dim: usize, seed: u64) -> Array2<f64> {
        use rand::Rng;
        let mut rng = crate::rng::stream_rng(seed, 0, 0);
        let mut x = Array2::<f64>::from_shape_fn((rows, dim), |_| rng.gen_range(-1.0..1.0));
        for mut r in x.rows_mut() {
            let n = r.iter().map(|v: &f64| v * v).sum::<f64>().sqrt();
            r /= n;
        }
        x
    }

    /// Scalar oracle of the neighbor loss written directly from the definition.
    fn neighbor_oracle(
        a: &Array2<f64>,
        b: &Array2<f64>,
        corr: &[usize],
        nb: &NeighborSet,
        negs: &Array2<f64>,
        tau: f64,
    ) -> f64 {
        let dot = |x: ndarray::ArrayView1<f64>, y: ndarray::ArrayView1<f64>| -> f64 {
            x.iter().zip(y.iter()).map(|(p, q)| p * q).sum()
        };
        let mut total = 0.0;
        for i in 0..a.nrows() {
            let mut num = (dot(a.row(i), b.row(corr[i])) / tau).exp();
            for &j in &nb[i] {
                num += (dot(a.row(i), a.row(j)) / tau).exp();
            }
            let mut den = num;
            for k in 0..negs.nrows() {
                den += (dot(a.row(i), negs.row(k)) / tau).exp();
            }
            total += -(num / den).ln();
        }
        total / a.nrows() as f64
    }

    #[test]
    fn neighbor_loss_matches_scalar_oracle() {
        let a = random_unit(12, 6, 10);
        let b = random_unit(12, 6, 11);
        let negs = random_unit(20, 6, 12);
        let corr: Vec<usize> = (0..12).map(|i| (i * 5) % 12).collect();
        let nb = crate::similarity::discover_neighbors(a.view(), 2).unwrap();
        let got = neighbor_loss(a.view(), b.view(), &corr, &nb, negs.view(), 0.2).unwrap().value;
        assert!((got - neighbor_oracle(&a, &b, &corr, &nb, &negs, 0.2)).abs() < 1e-9);
        let none: NeighborSet = vec![vec![]; 12];
        let got = pixel_loss(a.view(), b.view(), &corr, negs.view(), 0.2).unwrap().value;
        assert!((got - neighbor_oracle(&a, &b, &corr, &none, &negs, 0.2)).abs() < 1e-9);
    }

    fn check_grad(f: impl Fn(&Array2<f64>) -> LossGrad, x: &Array2<f64>) {
        let g = f(x).grad;
        let h = 1e-6;
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut xp = x.clone();
            xp[[r, c]] += h;
            let mut xm = x.clone();
            xm[[r, c]] -= h;
            let fd = (f(&xp).value - f(&xm).value) / (2.0 * h);
            assert!((fd - g[[r, c]]).abs() < 1e-6, "grad[{r},{c}] analytic {} fd {fd}", g[[r, c]]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let a = random_unit(6, 4, 20);
        let b = random_unit(6, 4, 21);
        let negs = random_unit(5, 4, 22);
        let corr = vec![1, 0, 3, 2, 5, 4];
        let nb: NeighborSet = vec![vec![1, 2], vec![0], vec![3], vec![], vec![5, 0], vec![4]];
        check_grad(|x| instance_loss(x.view(), b.view(), negs.view(), 0.3).unwrap(), &a);
        check_grad(|x| pixel_loss(x.view(), b.view(), &corr, negs.view(), 0.3).unwrap(), &a);
        check_grad(|x| neighbor_loss(x.view(), b.view(), &corr, &nb, negs.view(), 0.3).unwrap(), &a);
        for o in [TripletOrientation::AsWritten, TripletOrientation::Corrected] {
            check_grad(|x| triplet_loss(x.view(), b.view(), &corr, &nb, 0.3, o).unwrap(), &a);
        }
    }

    proptest::proptest! {
        #[test]
        fn info_nce_decreases_with_positive_similarity(
            s1 in -1.0f64..1.0, s2 in -1.0f64..1.0,
            negs in proptest::collection::vec(-1.0f64..1.0, 0..8),
            tau in 0.05f64..1.0,
        ) {
            let (lo, hi) = if s1 < s2 { (s1, s2) } else { (s2, s1) };
            let l_lo = info_nce(lo, &negs, tau).unwrap();
            let l_hi = info_nce(hi, &negs, tau).unwrap();
            proptest::prop_assert!(l_hi <= l_lo + 1e-12);
            proptest::prop_assert!(l_hi >= 0.0);
        }

        #[test]
        fn info_nce_increases_with_negative_similarity(
            pos in -1.0f64..1.0, n1 in -1.0f64..1.0, n2 in -1.0f64..1.0, tau in 0.05f64..1.0,
        ) {
            let (lo, hi) = if n1 < n2 { (n1, n2) } else { (n2, n1) };
            proptest::prop_assert!(info_nce(pos, &[hi], tau).unwrap() >= info_nce(pos, &[lo], tau).unwrap() - 1e-12);
        }

        #[test]
        fn neighbors_never_raise_the_pixel_loss(seed in 0u64..500, n in 1usize..4) {
            let a = random_unit(8, 4, seed);
            let b = random_unit(8, 4, seed + 1);
            let negs = random_unit(6, 4, seed + 2);
            let corr: Vec<usize> = (0..8).collect();
            let nb = crate::similarity::discover_neighbors(a.view(), n).unwrap();
            let px = pixel_loss(a.view(), b.view(), &corr, negs.view(), 0.2).unwrap().value;
            let nl = neighbor_loss(a.view(), b.view(), &corr, &nb, negs.view(), 0.2).unwrap().value;
            proptest::prop_assert!(nl <= px + 1e-12);
            proptest::prop_assert!(nl >= 0.0);
        }

        #[test]
        fn triplet_is_bounded(seed in 0u64..500, n in 0usize..4, margin in 0.0f64..1.0) {
            let a = random_unit(8, 4, seed);
            let b = random_unit(8, 4, seed + 3);
            let corr: Vec<usize> = (0..8).rev().collect();
            let nb = crate::similarity::discover_neighbors(a.view(), n).unwrap();
            for o in [TripletOrientation::AsWritten, TripletOrientation::Corrected] {
                let v = triplet_loss(a.view(), b.view(), &corr, &nb, margin, o).unwrap().value;
                proptest::prop_assert!(v >= 0.0);
                proptest::prop_assert!(v <= n as f64 * (2.0 + margin) + 1e-12);
            }
        }
    }
}
