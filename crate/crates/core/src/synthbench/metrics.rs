use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{AtmError, Result};
use crate::numerics::Matrix;

/// Floor on the within-class spread.
pub const SPREAD_FLOOR: f64 = 1e-12;
/// Reported ratios are capped here.
pub const RATIO_CAP: f64 = 1e12;

/// Mean pairwise distance between class centroids divided by the mean
/// distance of each point to its own class centroid (Euclidean).
///
/// `points` holds one embedding per entry, all of equal length. Needs at
/// least two classes with at least two points each.
pub fn separation_ratio(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(AtmError::contract(format!(
            "{} embeddings but {} labels",
            points.len(),
            labels.len()
        )));
    }
    let dim = points.first().map_or(0, Vec::len);
    if points.iter().any(|p| p.len() != dim) {
        return Err(AtmError::contract("embeddings have differing lengths"));
    }
    let mut classes: BTreeMap<usize, Vec<&[f64]>> = BTreeMap::new();
    for (p, &l) in points.iter().zip(labels) {
        classes.entry(l).or_default().push(p);
    }
    if classes.len() < 2 {
        return Err(AtmError::contract("separation ratio needs at least two classes"));
    }
    if let Some((label, members)) = classes.iter().find(|(_, m)| m.len() < 2) {
        return Err(AtmError::contract(format!(
            "class {label} has {} point(s); at least two are required",
            members.len()
        )));
    }

    let centroids: Vec<Vec<f64>> = classes
        .values()
        .map(|members| {
            let mut c = vec![0.0; dim];
            for p in members {
                for (ci, pi) in c.iter_mut().zip(p.iter()) {
                    *ci += pi;
                }
            }
            c.iter_mut().for_each(|v| *v /= members.len() as f64);
            c
        })
        .collect();

    let mut between = 0.0;
    let mut pairs = 0usize;
    for a in 0..centroids.len() {
        for b in a + 1..centroids.len() {
            between += euclidean(&centroids[a], &centroids[b]);
            pairs += 1;
        }
    }
    between /= pairs as f64;

    let mut within = 0.0;
    for (members, c) in classes.values().zip(&centroids) {
        within += members.iter().map(|p| euclidean(p, c)).sum::<f64>();
    }
    within /= points.len() as f64;

    Ok((between / within.max(SPREAD_FLOOR)).min(RATIO_CAP))
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `1 − mean(|a − b|)` for structure maps with entries in `[0, 1]`.
pub fn struc_sim(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(AtmError::dim("struc_sim", a.shape(), b.shape()));
    }
    if a.data().is_empty() {
        return Err(AtmError::contract("struc_sim of empty maps"));
    }
    if a.data().iter().chain(b.data()).any(|v| !(0.0..=1.0).contains(v)) {
        return Err(AtmError::contract("struc_sim inputs must be normalised to [0, 1]"));
    }
    let mean = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.data().len() as f64;
    Ok(1.0 - mean)
}

/// Projects points onto their first two principal components.
///
/// Each axis is oriented so that its largest-magnitude loading is positive,
/// making the output independent of the eigensolver's sign choice.
pub fn pca_2d(points: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let n = points.len();
    let dim = points.first().map_or(0, Vec::len);
    if n == 0 || dim == 0 {
        return Err(AtmError::contract("pca of an empty point set"));
    }
    if points.iter().any(|p| p.len() != dim) {
        return Err(AtmError::contract("points have differing lengths"));
    }
    let mut mean = vec![0.0; dim];
    for p in points {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let centered = DMatrix::from_fn(n, dim, |r, c| points[r][c] - mean[c]);
    let cov = centered.transpose() * &centered / (n.max(2) - 1) as f64;
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let axes: Vec<Vec<f64>> = order
        .iter()
        .take(2)
        .map(|&k| {
            let col = eig.eigenvectors.column(k);
            let pivot = (0..dim)
                .max_by(|&a, &b| col[a].abs().total_cmp(&col[b].abs()).then(b.cmp(&a)))
                .unwrap_or(0);
            let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
            col.iter().map(|v| v * sign).collect()
        })
        .collect();

    Ok((0..n)
        .map(|r| {
            let mut xy = [0.0; 2];
            for (slot, axis) in xy.iter_mut().zip(&axes) {
                *slot = (0..dim).map(|c| centered[(r, c)] * axis[c]).sum();
            }
            xy
        })
        .collect())
}
