//! Exact gradients through the optimisation layer.
//!
//! By the implicit function theorem, the adjoint `g = dl/d(D^T s)` solves a
//! second system with the same SPD operator, `(lambda L + D^T D) g = dl/dy*`.
//! The gradient with respect to the Laplacian is the rank-one matrix
//! `-lambda g y*^T`, which is never materialized: only its values on the
//! 4-neighbour pattern are taken and folded into per-edge gradients via
//! `L = U - A`. For edge `e = (i, j)` this collapses to
//! `-lambda (g_i - g_j)(y*_i - y*_j)`.

use crate::downsample::{build_box_downsampler, DownsampleOperator};
use crate::graph::{compute_affinities, laplacian_apply, AffinityGraph, AffinityScale, affinity_backward};
use crate::image::{FeatureMap, SourceImage};
use crate::solver::{cg_solve, forward_solve, SystemOperator};
use crate::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Gradients produced by one backward pass through the layer.
#[derive(Debug, Clone)]
pub struct LayerGradients {
    /// Per-edge gradients aligned with `AffinityGraph::right_weights`.
    pub grad_right: Vec<f64>,
    /// Per-edge gradients aligned with `AffinityGraph::down_weights`.
    pub grad_down: Vec<f64>,
    /// Gradient with respect to the source values, `D g`.
    pub grad_source: Vec<f64>,
    /// Optional gradient of the regularisation weight, `-<g, L y*>`.
    pub grad_lambda: f64,
    /// The adjoint solve `g = dl/d(D^T s)`, retained for testing.
    pub adjoint: Vec<f64>,
    pub cg_iterations: usize,
}

/// Solve the adjoint system and map `dl/dy*` to edge, source and (optionally)
/// lambda gradients.
pub fn backward_solve(
    graph: &AffinityGraph,
    down: &DownsampleOperator,
    lambda: f64,
    y_star: &[f64],
    grad_y: &[f64],
    rel_tol: f64,
    max_iter: usize,
) -> Result<LayerGradients> {
    let op = SystemOperator::new(graph, down, lambda)?;
    let x0 = vec![0.0; op.n()];
    let (g, report) = cg_solve(&op, grad_y, &x0, rel_tol, max_iter)?;

    let (h, w) = (graph.height, graph.width);
    let mut grad_right = vec![0.0; h * (w - 1)];
    let mut grad_down = vec![0.0; (h - 1) * w];
    for i in 0..h {
        for j in 0..w - 1 {
            let p = i * w + j;
            grad_right[i * (w - 1) + j] = -lambda * (g[p] - g[p + 1]) * (y_star[p] - y_star[p + 1]);
        }
    }
    for i in 0..h - 1 {
        for j in 0..w {
            let p = i * w + j;
            grad_down[i * w + j] = -lambda * (g[p] - g[p + w]) * (y_star[p] - y_star[p + w]);
        }
    }

    let grad_source = down.apply(&g)?;
    let ly = laplacian_apply(graph, y_star)?;
    let grad_lambda = -g.iter().zip(&ly).map(|(a, b)| a * b).sum::<f64>();

    Ok(LayerGradients {
        grad_right,
        grad_down,
        grad_source,
        grad_lambda,
        adjoint: g,
        cg_iterations: report.iterations,
    })
}

/// Outcome of the finite-difference validation harness.
#[derive(Debug, Clone, Copy)]
pub struct GradcheckReport {
    pub max_rel_err_edges: f64,
    pub max_rel_err_mu: f64,
    pub max_rel_err_source: f64,
}

impl GradcheckReport {
    pub fn max(&self) -> f64 {
        self.max_rel_err_edges.max(self.max_rel_err_mu).max(self.max_rel_err_source)
    }

    pub fn passes(&self, bound: f64) -> bool {
        self.max() <= bound
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Build a random instance and compare `backward_solve` (plus
/// `affinity_backward` for `raw_mu`) against central finite differences for
/// every edge weight, `raw_mu` and every source entry. The loss is a random
/// linear functional `l(y) = <c, y>`, so finite differences only involve
/// rerunning the forward solve.
pub fn layer_gradcheck(seed: u64, height: usize, width: usize, k: usize, lambda: f64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = height * width;
    let m = 3usize;
    let features = FeatureMap::new(
        height,
        width,
        m,
        (0..n * m).map(|_| rng.gen_range(-0.8..0.8)).collect(),
    )?;
    let scale = AffinityScale::new(rng.gen_range(-0.3..0.3));
    let graph = compute_affinities(&features, scale)?;
    let down = build_box_downsampler(height, width, k, None)?;
    let s = SourceImage::all_valid(
        height / k,
        width / k,
        (0..n / (k * k)).map(|_| rng.gen_range(0.0..1.0)).collect(),
    )?;
    let c: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let tol = 1e-13;
    let iters = 100 * n;
    let loss_of = |graph: &AffinityGraph, s: &SourceImage| -> Result<f64> {
        let (y, _) = forward_solve(graph, &down, s, lambda, None, tol, iters)?;
        Ok(y.data.iter().zip(&c).map(|(a, b)| a * b).sum())
    };

    let (y_star, _) = forward_solve(&graph, &down, &s, lambda, None, tol, iters)?;
    let grads = backward_solve(&graph, &down, lambda, &y_star.data, &c, tol, iters)?;

    // fourth-order central differences keep truncation error well below
    // the pass bound
    let h_step = 1e-4;
    let fd4 = |lq: &mut dyn FnMut(f64) -> Result<f64>| -> Result<f64> {
        Ok((-lq(2.0 * h_step)? + 8.0 * lq(h_step)? - 8.0 * lq(-h_step)? + lq(-2.0 * h_step)?)
            / (12.0 * h_step))
    };

    let mut max_edges = 0.0f64;
    for (which, len) in [(0usize, graph.right_weights.len()), (1, graph.down_weights.len())] {
        for e in 0..len {
            let analytic = if which == 0 { grads.grad_right[e] } else { grads.grad_down[e] };
            let fd = fd4(&mut |d: f64| {
                let mut g = graph.clone();
                if which == 0 {
                    g.right_weights[e] += d;
                } else {
                    g.down_weights[e] += d;
                }
                loss_of(&g, &s)
            })?;
            max_edges = max_edges.max(rel_err(analytic, fd));
        }
    }

    // raw_mu: chain backward_solve's edge gradients through the affinities
    let (_, grad_raw_mu) = affinity_backward(&features, scale, &grads.grad_right, &grads.grad_down)?;
    let fd_mu = fd4(&mut |d: f64| {
        let g = compute_affinities(&features, AffinityScale::new(scale.raw_mu + d))?;
        loss_of(&g, &s)
    })?;
    let max_mu = rel_err(grad_raw_mu, fd_mu);

    let mut max_source = 0.0f64;
    for i in 0..s.data.len() {
        let fd = fd4(&mut |d: f64| {
            let mut sp = s.clone();
            sp.data[i] += d;
            loss_of(&graph, &sp)
        })?;
        max_source = max_source.max(rel_err(grads.grad_source[i], fd));
    }

    Ok(GradcheckReport {
        max_rel_err_edges: max_edges,
        max_rel_err_mu: max_mu,
        max_rel_err_source: max_source,
    })
}
