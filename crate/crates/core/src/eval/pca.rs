//! Principal component projection through an SVD of the centred data.

use nalgebra::DMatrix;
use ndarray::Array2;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    /// `N x components`.
    pub projection: Array2<f64>,
    /// `components x D`, unit rows.
    pub directions: Array2<f64>,
    /// Share of total variance per component, non-increasing.
    pub explained_variance_ratio: Vec<f64>,
    pub mean: Vec<f64>,
}

/// Relative singular-value cutoff below which a direction counts as absent.
const RANK_TOL: f64 = 1e-10;

/// Projects mean-centred rows onto the top `components` principal
/// directions. Each direction's sign makes its largest-magnitude loading
/// positive.
pub fn pca_features(x: &Array2<f64>, components: usize) -> Result<Pca> {
    let (n, d) = x.dim();
    if components == 0 || n <= components || d < components {
        return Err(Error::DegenerateInput(format!(
            "{components} components need more than {components} rows and at least {components} columns, got {n}x{d}"
        )));
    }
    let mean: Vec<f64> = (0..d).map(|j| x.column(j).sum() / n as f64).collect();
    let centred = DMatrix::from_fn(n, d, |i, j| x[[i, j]] - mean[j]);
    let svd = centred.clone().svd(false, true);
    let v_t = svd.v_t.as_ref().expect("right singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

    let total: f64 = svd.singular_values.iter().map(|s| s * s).sum();
    let largest = svd.singular_values[order[0]];
    let rank = order.iter().filter(|&&i| svd.singular_values[i] > RANK_TOL * largest.max(f64::MIN_POSITIVE)).count();
    if total == 0.0 || rank < components {
        return Err(Error::DegenerateInput(format!("centred data has rank {rank}, fewer than {components} components")));
    }

    let mut directions = Array2::zeros((components, d));
    let mut ratios = Vec::with_capacity(components);
    for (c, &i) in order.iter().take(components).enumerate() {
        let row = v_t.row(i);
        let pivot = (0..d).max_by(|&a, &b| row[a].abs().total_cmp(&row[b].abs())).unwrap();
        let sign = if row[pivot] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..d {
            directions[[c, j]] = sign * row[j];
        }
        ratios.push(svd.singular_values[i].powi(2) / total);
    }
    let projection = Array2::from_shape_fn((n, components), |(i, c)| {
        (0..d).map(|j| centred[(i, j)] * directions[[c, j]]).sum()
    });
    Ok(Pca { projection, directions, explained_variance_ratio: ratios, mean })
}
