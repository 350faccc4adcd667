//! Cosine similarity kernels, cross-view correspondence and within-view neighbors.
//!
//! Ties in every argmax / top-n selection go to the lowest index.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{DscError, Result};

/// Row `i` is the index of the most similar view-b cell for view-a cell `i`.
pub type Correspondence = Vec<usize>;

/// Per-cell neighbor indices into the same view, most similar first.
pub type NeighborSet = Vec<Vec<usize>>;

pub fn cosine(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(DscError::Shape(format!("{} vs {} dims", a.len(), b.len())));
    }
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(DscError::Domain("cosine of a zero vector".into()));
    }
    Ok((a.dot(&b) / (na * nb)).clamp(-1.0, 1.0))
}

fn normalized_rows(x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let norms = x.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if norms.iter().any(|&n| n == 0.0) {
        return Err(DscError::Domain("cosine of a zero vector".into()));
    }
    Ok(&x / &norms.insert_axis(Axis(1)))
}

/// `P x Q` matrix of cosines between the rows of `a` and the rows of `b`.
pub fn pairwise_similarity(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if a.ncols() != b.ncols() {
        return Err(DscError::Shape(format!(
            "embedding dims differ: {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    let an = normalized_rows(a)?;
    let bn = normalized_rows(b)?;
    Ok(an.dot(&bn.t()).mapv(|v| v.clamp(-1.0, 1.0)))
}

fn argmax_lowest(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

pub fn correspondence(sim: ArrayView2<'_, f64>) -> Result<Correspondence> {
    if sim.nrows() == 0 || sim.ncols() == 0 {
        return Err(DscError::Shape("empty similarity matrix".into()));
    }
    Ok(sim.rows().into_iter().map(argmax_lowest).collect())
}

/// Indices of the `n` largest entries of `row` excluding `skip`.
fn top_n_excluding(row: ArrayView1<'_, f64>, skip: usize, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).filter(|&j| j != skip).collect();
    idx.sort_by(|&x, &y| row[y].total_cmp(&row[x]).then(x.cmp(&y)));
    idx.truncate(n);
    idx
}

/// Top-`n` most similar cells of the same map for every cell, self excluded.
pub fn discover_neighbors(map: ArrayView2<'_, f64>, n_neighbors: usize) -> Result<NeighborSet> {
    let p = map.nrows();
    if n_neighbors >= p.max(1) {
        return Err(DscError::Config(format!(
            "n_neighbors must be below the {p} cells of the map, got {n_neighbors}"
        )));
    }
    if n_neighbors == 0 {
        return Ok(vec![Vec::new(); p]);
    }
    let sim = pairwise_similarity(map, map)?;
    Ok((0..p).map(|i| top_n_excluding(sim.row(i), i, n_neighbors)).collect())
}
