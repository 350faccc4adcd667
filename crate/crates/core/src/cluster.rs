//! Cross-image semantic grouping: batch k-means with centroid alignment,
//! Sinkhorn codes over trainable prototypes, swapped prediction and the
//! single-view cross-entropy variant.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DscError, Result};
use crate::losses::{check_tau, nce_kernel, LossGrad};
use crate::rng::stream_rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Centroids {
    /// `K x D`, unit-norm rows.
    pub vectors: Array2<f64>,
    pub counts: Vec<usize>,
}

impl Centroids {
    pub fn k(&self) -> usize {
        self.vectors.nrows()
    }
}

#[derive(Debug, Clone)]
pub enum KmeansInit {
    Seed(u64),
    Given(Array2<f64>),
}

#[derive(Debug, Clone)]
pub struct KmeansResult {
    pub centroids: Centroids,
    pub assignment: Vec<usize>,
    /// Inertia after every assignment pass, the final one included.
    pub inertia_trace: Vec<f64>,
}

fn normalize_rows_in_place(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 1e-12 {
            row /= n;
        }
    }
}

fn argmax_row(row: ndarray::ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Independent seeded runs tried by [`KmeansInit::Seed`]; the lowest final inertia wins.
pub const KMEANS_RESTARTS: u64 = 3;

/// Greedy k-means++ seeding on cosine dissimilarity `1 - x.c`: each new center is
/// the best of `2 + ln K` sampled candidates by total remaining dissimilarity.
fn kmeans_pp(pixels: ArrayView2<'_, f64>, k: usize, seed: u64, run: u64) -> Array2<f64> {
    let p = pixels.nrows();
    let mut rng = stream_rng(seed, crate::rng::STREAM_CLUSTER, run);
    let trials = 2 + (k as f64).ln() as usize;
    let dissim = |i: usize, j: usize| (1.0 - pixels.row(i).dot(&pixels.row(j))).max(0.0);
    let mut chosen = Vec::with_capacity(k);
    chosen.push(rng.gen_range(0..p));
    let mut dist: Vec<f64> = (0..p).map(|i| dissim(i, chosen[0])).collect();
    while chosen.len() < k {
        let total: f64 = dist.iter().sum();
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        if total > 1e-12 {
            for _ in 0..trials {
                let mut target = rng.gen::<f64>() * total;
                let mut pick = p - 1;
                for (i, &d) in dist.iter().enumerate() {
                    if d > 0.0 && target < d {
                        pick = i;
                        break;
                    }
                    target -= d;
                }
                if chosen.contains(&pick) {
                    continue;
                }
                let next: Vec<f64> = (0..p).map(|i| dist[i].min(dissim(i, pick))).collect();
                let potential: f64 = next.iter().sum();
                if best.as_ref().map_or(true, |b| potential < b.0) {
                    best = Some((potential, pick, next));
                }
            }
        }
        let (pick, next) = match best {
            Some((_, pick, next)) => (pick, next),
            None => {
                // Remaining points coincide with chosen ones; take the first unused.
                let pick = (0..p).find(|i| !chosen.contains(i)).expect("p >= k");
                (pick, (0..p).map(|i| dist[i].min(dissim(i, pick))).collect())
            }
        };
        chosen.push(pick);
        dist = next;
    }
    let mut c = Array2::zeros((k, pixels.ncols()));
    for (r, &i) in chosen.iter().enumerate() {
        c.row_mut(r).assign(&pixels.row(i));
    }
    c
}

fn assign(pixels: ArrayView2<'_, f64>, centroids: &Array2<f64>) -> (Vec<usize>, f64) {
    let sim = pixels.dot(&centroids.t());
    let mut inertia = 0.0;
    let assignment = sim
        .rows()
        .into_iter()
        .map(|row| {
            let j = argmax_row(row);
            inertia += 1.0 - row[j];
            j
        })
        .collect();
    (assignment, inertia)
}

/// Lloyd iterations on cosine similarity over unit-norm pixel rows. A seed runs
/// [`KMEANS_RESTARTS`] greedy k-means++ starts and keeps the lowest final inertia.
pub fn minibatch_kmeans(pixels: ArrayView2<'_, f64>, k: usize, init: KmeansInit, iters: usize) -> Result<KmeansResult> {
    let p = pixels.nrows();
    if k == 0 || p < k {
        return Err(DscError::Config(format!("k-means needs 1 <= K <= P, got K={k}, P={p}")));
    }
    match init {
        KmeansInit::Seed(seed) => {
            let mut best: Option<KmeansResult> = None;
            for run in 0..KMEANS_RESTARTS {
                let r = lloyd(pixels, k, kmeans_pp(pixels, k, seed, run), iters);
                let better = best.as_ref().map_or(true, |b| {
                    r.inertia_trace.last().expect("trace") < b.inertia_trace.last().expect("trace")
                });
                if better {
                    best = Some(r);
                }
            }
            Ok(best.expect("at least one run"))
        }
        KmeansInit::Given(c) => {
            if c.dim() != (k, pixels.ncols()) {
                return Err(DscError::Shape(format!("initial centroids {:?}, expected ({k}, {})", c.dim(), pixels.ncols())));
            }
            Ok(lloyd(pixels, k, c, iters))
        }
    }
}

fn lloyd(pixels: ArrayView2<'_, f64>, k: usize, mut centroids: Array2<f64>, iters: usize) -> KmeansResult {
    let p = pixels.nrows();
    let mut trace = Vec::with_capacity(iters + 1);
    for _ in 0..iters {
        let (assignment, inertia) = assign(pixels, &centroids);
        trace.push(inertia);
        let mut sums = Array2::<f64>::zeros(centroids.raw_dim());
        let mut counts = vec![0usize; k];
        for (i, &c) in assignment.iter().enumerate() {
            sums.row_mut(c).scaled_add(1.0, &pixels.row(i));
            counts[c] += 1;
        }
        // Empty clusters take the worst-fitting pixels, one each.
        let empties: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
        if !empties.is_empty() {
            let mut fit: Vec<(f64, usize)> = (0..p)
                .map(|i| (pixels.row(i).dot(&centroids.row(assignment[i])), i))
                .collect();
            fit.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut donors = fit.into_iter().map(|(_, i)| i);
            for c in empties {
                let pick = donors.by_ref().find(|&i| counts[assignment[i]] > 1);
                match pick {
                    Some(i) => {
                        counts[assignment[i]] -= 1;
                        sums.row_mut(c).assign(&pixels.row(i));
                        counts[c] = 1;
                    }
                    None => sums.row_mut(c).assign(&centroids.row(c)),
                }
            }
        }
        normalize_rows_in_place(&mut sums);
        centroids = sums;
    }
    let (assignment, inertia) = assign(pixels, &centroids);
    trace.push(inertia);
    let mut counts = vec![0usize; k];
    for &c in &assignment {
        counts[c] += 1;
    }
    KmeansResult {
        centroids: Centroids { vectors: centroids, counts },
        assignment,
        inertia_trace: trace,
    }
}

/// `pairing[c]` is the view-b centroid matched to view-a centroid `c`; greedy
/// highest-similarity-first, ties to the lowest (a, b) index pair.
pub fn align_centroids(cent_a: ArrayView2<'_, f64>, cent_b: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
    if cent_a.dim() != cent_b.dim() {
        return Err(DscError::Shape(format!("centroid sets {:?} vs {:?}", cent_a.dim(), cent_b.dim())));
    }
    let k = cent_a.nrows();
    let sim = cent_a.dot(&cent_b.t());
    let mut pairs: Vec<(usize, usize)> = (0..k).flat_map(|a| (0..k).map(move |b| (a, b))).collect();
    pairs.sort_by(|&(a1, b1), &(a2, b2)| sim[[a2, b2]].total_cmp(&sim[[a1, b1]]).then((a1, b1).cmp(&(a2, b2))));
    let mut pairing = vec![usize::MAX; k];
    let mut used_b = vec![false; k];
    let mut left = k;
    for (a, b) in pairs {
        if left == 0 {
            break;
        }
        if pairing[a] == usize::MAX && !used_b[b] {
            pairing[a] = b;
            used_b[b] = true;
            left -= 1;
        }
    }
    Ok(pairing)
}

/// Saved state for backpropagating through `normalize(sum of members)`.
#[derive(Debug, Clone)]
pub struct CentroidCache {
    assignment: Vec<usize>,
    /// Norm of each member sum; zero marks a fallback centroid with no gradient.
    norms: Vec<f64>,
    centroids: Array2<f64>,
}

/// Unit-norm mean of the member rows of each cluster. Clusters without members
/// fall back to the supplied centroid and carry no gradient.
pub fn member_centroids(
    pixels: ArrayView2<'_, f64>,
    assignment: &[usize],
    fallback: ArrayView2<'_, f64>,
) -> Result<(Array2<f64>, CentroidCache)> {
    if assignment.len() != pixels.nrows() {
        return Err(DscError::Shape(format!("{} assignments for {} pixels", assignment.len(), pixels.nrows())));
    }
    let k = fallback.nrows();
    if let Some(&bad) = assignment.iter().find(|&&c| c >= k) {
        return Err(DscError::Input(format!("cluster index {bad} out of range for K={k}")));
    }
    let mut sums = Array2::<f64>::zeros((k, pixels.ncols()));
    for (i, &c) in assignment.iter().enumerate() {
        sums.row_mut(c).scaled_add(1.0, &pixels.row(i));
    }
    let mut norms = vec![0.0; k];
    for c in 0..k {
        let n = sums.row(c).dot(&sums.row(c)).sqrt();
        if n > 1e-12 {
            sums.row_mut(c).mapv_inplace(|v| v / n);
            norms[c] = n;
        } else {
            sums.row_mut(c).assign(&fallback.row(c));
        }
    }
    let cache = CentroidCache {
        assignment: assignment.to_vec(),
        norms,
        centroids: sums.clone(),
    };
    Ok((sums, cache))
}

pub fn member_centroids_backward(cache: &CentroidCache, d_centroids: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut d_sum = Array2::<f64>::zeros(d_centroids.raw_dim());
    for c in 0..cache.norms.len() {
        if cache.norms[c] == 0.0 {
            continue;
        }
        let e = cache.centroids.row(c);
        let g = d_centroids.row(c);
        let proj = g.dot(&e);
        let mut row = d_sum.row_mut(c);
        row.assign(&(&g - &(&e * proj)));
        row /= cache.norms[c];
    }
    let mut dx = Array2::<f64>::zeros((cache.assignment.len(), d_centroids.ncols()));
    for (i, &c) in cache.assignment.iter().enumerate() {
        dx.row_mut(i).assign(&d_sum.row(c));
    }
    dx
}

/// Mean InfoNCE over aligned centroid pairs. Negatives for centroid `c` are the
/// other paired view-b centroids plus any extra rows.
pub fn km_loss(
    cent_a: ArrayView2<'_, f64>,
    cent_b: ArrayView2<'_, f64>,
    pairing: &[usize],
    extra_negatives: ArrayView2<'_, f64>,
    tau: f64,
) -> Result<LossGrad> {
    check_tau(tau)?;
    let k = cent_a.nrows();
    if cent_b.dim() != cent_a.dim() || pairing.len() != k {
        return Err(DscError::Shape(format!(
            "centroids {:?} / {:?} with {} pairings",
            cent_a.dim(),
            cent_b.dim(),
            pairing.len()
        )));
    }
    let mut seen = vec![false; k];
    for &b in pairing {
        if b >= k || seen[b] {
            return Err(DscError::Input(format!("pairing {pairing:?} is not a permutation")));
        }
        seen[b] = true;
    }
    if extra_negatives.nrows() > 0 && extra_negatives.ncols() != cent_a.ncols() {
        return Err(DscError::Shape("negative dim differs from centroid dim".into()));
    }
    let mut grad = Array2::<f64>::zeros(cent_a.raw_dim());
    if k == 0 {
        return Ok(LossGrad { value: 0.0, grad });
    }
    let inv_tau = 1.0 / tau;
    let scale = 1.0 / k as f64;
    let to_b = cent_a.dot(&cent_b.t()) * inv_tau;
    let to_extra = if extra_negatives.nrows() > 0 {
        cent_a.dot(&extra_negatives.t()) * inv_tau
    } else {
        Array2::zeros((k, 0))
    };
    let mut total = 0.0;
    let mut neg = Vec::with_capacity(k - 1 + extra_negatives.nrows());
    let mut neg_rows = Vec::with_capacity(k - 1);
    for c in 0..k {
        neg.clear();
        neg_rows.clear();
        for (c2, &b) in pairing.iter().enumerate() {
            if c2 != c {
                neg.push(to_b[[c, b]]);
                neg_rows.push(b);
            }
        }
        neg.extend(to_extra.row(c).iter());
        let mut dpos = [0.0];
        let mut dneg = vec![0.0; neg.len()];
        total += nce_kernel(&[to_b[[c, pairing[c]]]], &neg, &mut dpos, &mut dneg);
        let mut g = grad.row_mut(c);
        g.scaled_add(dpos[0] * inv_tau * scale, &cent_b.row(pairing[c]));
        for (j, &b) in neg_rows.iter().enumerate() {
            g.scaled_add(dneg[j] * inv_tau * scale, &cent_b.row(b));
        }
        for (j, d) in dneg[neg_rows.len()..].iter().enumerate() {
            g.scaled_add(d * inv_tau * scale, &extra_negatives.row(j));
        }
    }
    Ok(LossGrad { value: total * scale, grad })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub iters: usize,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self { epsilon: 0.05, iters: 3 }
    }
}

/// Row-stochastic codes with approximately equal column mass `P / K`.
pub fn sinkhorn_codes(scores: ArrayView2<'_, f64>, cfg: SinkhornConfig) -> Result<Array2<f64>> {
    if !(cfg.epsilon > 0.0) || cfg.iters == 0 {
        return Err(DscError::Config(format!(
            "sinkhorn needs epsilon > 0 and iters >= 1, got {} / {}",
            cfg.epsilon, cfg.iters
        )));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(DscError::Domain("non-finite prototype scores".into()));
    }
    let (p, k) = scores.dim();
    if p == 0 || k == 0 {
        return Err(DscError::Shape("empty score matrix".into()));
    }
    let max = scores.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut q = scores.mapv(|v| ((v - max) / cfg.epsilon).exp());
    let total = q.sum();
    q /= total;
    for _ in 0..cfg.iters {
        let col = q.sum_axis(Axis(0));
        for mut row in q.rows_mut() {
            for (v, &s) in row.iter_mut().zip(col.iter()) {
                if s > 0.0 {
                    *v /= s * k as f64;
                }
            }
        }
        let row_sums = q.sum_axis(Axis(1));
        for (mut row, &s) in q.rows_mut().into_iter().zip(row_sums.iter()) {
            if s > 0.0 {
                row /= s * p as f64;
            }
        }
    }
    // Exact row normalization; the final column pass is the approximate one.
    for mut row in q.rows_mut() {
        let s = row.sum();
        if s > 0.0 {
            row /= s;
        } else {
            row.fill(1.0 / k as f64);
        }
    }
    Ok(q)
}

/// `-sum_k q^k log p^k` averaged over rows, with gradients for the embeddings and prototypes.
fn code_cross_entropy(
    v: ArrayView2<'_, f64>,
    q: ArrayView2<'_, f64>,
    prototypes: ArrayView2<'_, f64>,
    temp: f64,
) -> (f64, Array2<f64>, Array2<f64>) {
    let n = v.nrows();
    let logits = v.dot(&prototypes.t()) / temp;
    let mut value = 0.0;
    let mut dlogits = Array2::<f64>::zeros(logits.raw_dim());
    for i in 0..n {
        let row = logits.row(i);
        let m = row.fold(f64::NEG_INFINITY, |a, &x| a.max(x));
        let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
        let qsum: f64 = q.row(i).sum();
        for k in 0..row.len() {
            let qk = q[[i, k]];
            if qk != 0.0 {
                value -= qk * (row[k] - lse);
            }
            dlogits[[i, k]] = qsum * (row[k] - lse).exp() - qk;
        }
    }
    let scale = 1.0 / n.max(1) as f64;
    dlogits *= scale / temp;
    let dv = dlogits.dot(&prototypes);
    let dc = dlogits.t().dot(&v);
    (value * scale, dv, dc)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwappedLossGrad {
    pub value: f64,
    pub grad_a: Array2<f64>,
    pub grad_b: Array2<f64>,
    pub grad_prototypes: Array2<f64>,
}

fn check_codes(v: &ArrayView2<'_, f64>, q: &ArrayView2<'_, f64>, prototypes: &ArrayView2<'_, f64>) -> Result<()> {
    if v.ncols() != prototypes.ncols() {
        return Err(DscError::Shape(format!(
            "embedding dim {} vs prototype dim {}",
            v.ncols(),
            prototypes.ncols()
        )));
    }
    if q.dim() != (v.nrows(), prototypes.nrows()) {
        return Err(DscError::Shape(format!(
            "codes {:?}, expected ({}, {})",
            q.dim(),
            v.nrows(),
            prototypes.nrows()
        )));
    }
    Ok(())
}

/// `mean_i l(v_i^a, q_i^b) + l(v_i^b, q_i^a)`; rows of the two maps are paired by index.
/// Codes are constants.
pub fn swapped_prediction_loss(
    map_a: ArrayView2<'_, f64>,
    map_b: ArrayView2<'_, f64>,
    q_a: ArrayView2<'_, f64>,
    q_b: ArrayView2<'_, f64>,
    prototypes: ArrayView2<'_, f64>,
    softmax_temp: f64,
) -> Result<SwappedLossGrad> {
    check_tau(softmax_temp)?;
    if map_a.dim() != map_b.dim() {
        return Err(DscError::Shape(format!("maps {:?} vs {:?}", map_a.dim(), map_b.dim())));
    }
    check_codes(&map_a, &q_b, &prototypes)?;
    check_codes(&map_b, &q_a, &prototypes)?;
    let (la, ga, gca) = code_cross_entropy(map_a, q_b, prototypes, softmax_temp);
    let (lb, gb, gcb) = code_cross_entropy(map_b, q_a, prototypes, softmax_temp);
    Ok(SwappedLossGrad {
        value: la + lb,
        grad_a: ga,
        grad_b: gb,
        grad_prototypes: gca + gcb,
    })
}

/// Lowest-index argmax of every code row, as a one-hot matrix.
pub fn harden_codes(codes: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = Array2::zeros(codes.raw_dim());
    for (i, row) in codes.rows().into_iter().enumerate() {
        out[[i, argmax_row(row)]] = 1.0;
    }
    out
}

/// Cross-entropy between hardened same-view codes and the prototype softmax.
/// Returns the loss, the embedding gradient and the prototype gradient.
pub fn ce_strategy_loss(
    map: ArrayView2<'_, f64>,
    prototypes: ArrayView2<'_, f64>,
    codes: ArrayView2<'_, f64>,
    softmax_temp: f64,
) -> Result<(LossGrad, Array2<f64>)> {
    check_tau(softmax_temp)?;
    check_codes(&map, &codes, &prototypes)?;
    let hard = harden_codes(codes);
    let (value, grad, gc) = code_cross_entropy(map, hard.view(), prototypes, softmax_temp);
    Ok((LossGrad { value, grad }, gc))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    pub prototypes: Array2<f64>,
    pub sinkhorn: SinkhornConfig,
    pub softmax_temp: f64,
}

impl PrototypeBank {
    pub fn new(k: usize, dim: usize, sinkhorn: SinkhornConfig, softmax_temp: f64, seed: u64) -> Result<Self> {
        if k == 0 || dim == 0 {
            return Err(DscError::Config(format!("prototype bank needs K, D >= 1, got {k} x {dim}")));
        }
        check_tau(softmax_temp)?;
        let mut rng = stream_rng(seed, crate::rng::STREAM_INIT, 1 << 20);
        let normal = rand_distr::StandardNormal;
        let mut prototypes = Array2::from_shape_fn((k, dim), |_| rng.sample::<f64, _>(normal));
        normalize_rows_in_place(&mut prototypes);
        Ok(Self { prototypes, sinkhorn, softmax_temp })
    }

    pub fn k(&self) -> usize {
        self.prototypes.nrows()
    }

    pub fn codes(&self, map: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        sinkhorn_codes(map.dot(&self.prototypes.t()).view(), self.sinkhorn)
    }

    pub fn renormalize(&mut self) {
        normalize_rows_in_place(&mut self.prototypes);
    }
}

/// Column sums of a code matrix; handy for equipartition checks.
pub fn code_mass(codes: ArrayView2<'_, f64>) -> Array1<f64> {
    codes.sum_axis(Axis(0))
}
