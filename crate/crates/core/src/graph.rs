//! 4-neighbour affinity graph over the pixel lattice.
//!
//! Edge weights are negative exponential affinities between per-pixel
//! features, `A_ij = exp(-||F_i - F_j||^2 / (M mu))`; the implicit Laplacian
//! is `L = U - A` with `U` the diagonal degree matrix. Edges are stored once
//! per undirected pair in two arrays (right and down neighbours).

use crate::image::FeatureMap;
use crate::{Error, Result};

/// Undirected 4-neighbour graph with positive edge weights in `(0, 1]`.
#[derive(Debug, Clone)]
pub struct AffinityGraph {
    pub height: usize,
    pub width: usize,
    /// Edge `(i,j) -- (i,j+1)`, length `H * (W-1)`, index `i*(W-1) + j`.
    pub right_weights: Vec<f64>,
    /// Edge `(i,j) -- (i+1,j)`, length `(H-1) * W`, index `i*W + j`.
    pub down_weights: Vec<f64>,
}

impl AffinityGraph {
    pub fn n_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn n_edges(&self) -> usize {
        self.right_weights.len() + self.down_weights.len()
    }

    /// Weighted degree of every pixel (diagonal of `U`).
    pub fn degrees(&self) -> Vec<f64> {
        let (h, w) = (self.height, self.width);
        let mut deg = vec![0.0; h * w];
        for i in 0..h {
            for j in 0..w - 1 {
                let a = self.right_weights[i * (w - 1) + j];
                deg[i * w + j] += a;
                deg[i * w + j + 1] += a;
            }
        }
        for i in 0..h - 1 {
            for j in 0..w {
                let a = self.down_weights[i * w + j];
                deg[i * w + j] += a;
                deg[(i + 1) * w + j] += a;
            }
        }
        deg
    }

    /// Total incident weight per pixel, as a flat image; used by the
    /// `dump-graph` CLI output.
    pub fn incident_weight_image(&self) -> Vec<f64> {
        self.degrees()
    }
}

/// Learnable affinity scale, parametrized as `mu = exp(raw_mu)` so it stays
/// positive.
#[derive(Debug, Clone, Copy)]
pub struct AffinityScale {
    pub raw_mu: f64,
}

impl AffinityScale {
    pub fn new(raw_mu: f64) -> Self {
        Self { raw_mu }
    }

    pub fn mu(&self) -> f64 {
        self.raw_mu.exp()
    }
}

impl Default for AffinityScale {
    fn default() -> Self {
        Self { raw_mu: 0.0 }
    }
}

#[inline]
fn edge_sq_dist(f: &FeatureMap, p: usize, q: usize) -> f64 {
    let n = f.height * f.width;
    let mut d2 = 0.0;
    for c in 0..f.depth {
        let d = f.data[c * n + p] - f.data[c * n + q];
        d2 += d * d;
    }
    d2
}

/// Edge weights `A_ij = exp(-||F_i - F_j||^2 / (M mu))` for every lattice edge.
pub fn compute_affinities(f: &FeatureMap, scale: AffinityScale) -> Result<AffinityGraph> {
    if f.depth == 0 {
        return Err(Error::DimensionMismatch("feature depth must be >= 1".into()));
    }
    if !f.data.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("features".into()));
    }
    let (h, w) = (f.height, f.width);
    let inv = 1.0 / (f.depth as f64 * scale.mu());
    let mut right = vec![0.0; h * (w.saturating_sub(1))];
    let mut down = vec![0.0; (h.saturating_sub(1)) * w];
    for i in 0..h {
        for j in 0..w - 1 {
            let p = i * w + j;
            right[i * (w - 1) + j] = (-edge_sq_dist(f, p, p + 1) * inv).exp();
        }
    }
    for i in 0..h - 1 {
        for j in 0..w {
            let p = i * w + j;
            down[i * w + j] = (-edge_sq_dist(f, p, p + w) * inv).exp();
        }
    }
    Ok(AffinityGraph { height: h, width: w, right_weights: right, down_weights: down })
}

/// `L y` with `(L y)_i = sum_{j ~ i} A_ij (y_i - y_j)`.
pub fn laplacian_apply(g: &AffinityGraph, y: &[f64]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; g.n_pixels()];
    laplacian_apply_into(g, y, &mut out)?;
    Ok(out)
}

/// In-place variant; `out` is overwritten.
pub fn laplacian_apply_into(g: &AffinityGraph, y: &[f64], out: &mut [f64]) -> Result<()> {
    let (h, w) = (g.height, g.width);
    if y.len() != h * w || out.len() != h * w {
        return Err(Error::DimensionMismatch("laplacian vector length".into()));
    }
    out.fill(0.0);
    for i in 0..h {
        for j in 0..w - 1 {
            let p = i * w + j;
            let a = g.right_weights[i * (w - 1) + j];
            let d = a * (y[p] - y[p + 1]);
            out[p] += d;
            out[p + 1] -= d;
        }
    }
    for i in 0..h - 1 {
        for j in 0..w {
            let p = i * w + j;
            let a = g.down_weights[i * w + j];
            let d = a * (y[p] - y[p + w]);
            out[p] += d;
            out[p + w] -= d;
        }
    }
    Ok(())
}

/// Smoothness energy `sum_e A_e (y_i - y_j)^2 = y^T L y`.
pub fn smoothness_energy(g: &AffinityGraph, y: &[f64]) -> Result<f64> {
    let (h, w) = (g.height, g.width);
    if y.len() != h * w {
        return Err(Error::DimensionMismatch("energy vector length".into()));
    }
    let mut e = 0.0;
    for i in 0..h {
        for j in 0..w - 1 {
            let p = i * w + j;
            let d = y[p] - y[p + 1];
            e += g.right_weights[i * (w - 1) + j] * d * d;
        }
    }
    for i in 0..h - 1 {
        for j in 0..w {
            let p = i * w + j;
            let d = y[p] - y[p + w];
            e += g.down_weights[i * w + j] * d * d;
        }
    }
    Ok(e)
}

/// Gradients of the affinities with respect to features and `raw_mu`.
///
/// For edge `e = (i, j)` with weight `A_e` and squared feature distance `d2`:
/// `dA/dF_i = -2 A_e (F_i - F_j) / (M mu)` (negated for `F_j`) and
/// `dA/d raw_mu = A_e d2 / (M mu)`. Contributions are weighted by
/// `grad_right` / `grad_down` and accumulated.
pub fn affinity_backward(
    f: &FeatureMap,
    scale: AffinityScale,
    grad_right: &[f64],
    grad_down: &[f64],
) -> Result<(FeatureMap, f64)> {
    let (h, w) = (f.height, f.width);
    if grad_right.len() != h * (w - 1) || grad_down.len() != (h - 1) * w {
        return Err(Error::DimensionMismatch("edge gradient lengths".into()));
    }
    let n = h * w;
    let inv = 1.0 / (f.depth as f64 * scale.mu());
    let mut grad_f = FeatureMap::zeros(h, w, f.depth);
    let mut grad_raw_mu = 0.0;

    let accumulate = |p: usize, q: usize, g_out: f64, grad_f: &mut FeatureMap, grad_raw_mu: &mut f64| {
        let d2 = edge_sq_dist(f, p, q);
        let a = (-d2 * inv).exp();
        let common = -2.0 * a * inv * g_out;
        for c in 0..f.depth {
            let diff = f.data[c * n + p] - f.data[c * n + q];
            grad_f.data[c * n + p] += common * diff;
            grad_f.data[c * n + q] -= common * diff;
        }
        *grad_raw_mu += g_out * a * d2 * inv;
    };

    for i in 0..h {
        for j in 0..w - 1 {
            let p = i * w + j;
            accumulate(p, p + 1, grad_right[i * (w - 1) + j], &mut grad_f, &mut grad_raw_mu);
        }
    }
    for i in 0..h - 1 {
        for j in 0..w {
            let p = i * w + j;
            accumulate(p, p + w, grad_down[i * w + j], &mut grad_f, &mut grad_raw_mu);
        }
    }
    Ok((grad_f, grad_raw_mu))
}
