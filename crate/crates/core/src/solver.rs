//! Forward solve of the SPD system `(lambda L + D^T D) y = D^T s`.
//!
//! The operator is applied matrix-free; the production path is a Jacobi
//! preconditioned conjugate gradient, with a dense Cholesky solve as a
//! small-instance oracle.

use crate::downsample::DownsampleOperator;
use crate::graph::{laplacian_apply_into, AffinityGraph};
use crate::image::{bicubic_upsample, SourceImage, TargetImage};
use crate::{Error, Result};

pub const DEFAULT_REL_TOL: f64 = 1e-7;
pub const DENSE_ORACLE_MAX_PIXELS: usize = 4096;

pub fn default_max_iter(n_pixels: usize) -> usize {
    (10.0 * (n_pixels as f64).sqrt()).ceil() as usize
}

/// Matrix-free `lambda L + D^T D`.
pub struct SystemOperator<'a> {
    pub graph: &'a AffinityGraph,
    pub down: &'a DownsampleOperator,
    pub lambda: f64,
}

impl<'a> SystemOperator<'a> {
    pub fn new(graph: &'a AffinityGraph, down: &'a DownsampleOperator, lambda: f64) -> Result<Self> {
        if graph.n_pixels() != down.cols() {
            return Err(Error::DimensionMismatch("graph / downsampler size".into()));
        }
        Ok(Self { graph, down, lambda })
    }

    pub fn n(&self) -> usize {
        self.graph.n_pixels()
    }

    pub fn apply(&self, v: &[f64], out: &mut [f64]) -> Result<()> {
        laplacian_apply_into(self.graph, v, out)?;
        for o in out.iter_mut() {
            *o *= self.lambda;
        }
        let dv = self.down.apply(v)?;
        for (r, &dvr) in dv.iter().enumerate() {
            for e in self.down.indptr[r]..self.down.indptr[r + 1] {
                out[self.down.indices[e]] += self.down.weights[e] * dvr;
            }
        }
        Ok(())
    }

    /// Analytic diagonal `lambda * degree_i + (D^T D)_ii`, used as the Jacobi
    /// preconditioner.
    pub fn diagonal(&self) -> Vec<f64> {
        let mut diag = self.graph.degrees();
        for d in diag.iter_mut() {
            *d *= self.lambda;
        }
        for (d, g) in diag.iter_mut().zip(self.down.gram_diagonal()) {
            *d += g;
        }
        diag
    }
}

/// Outcome of a conjugate gradient run.
#[derive(Debug, Clone, Copy)]
pub struct CgReport {
    pub iterations: usize,
    pub final_residual_norm: f64,
    pub converged: bool,
}

/// Jacobi-preconditioned conjugate gradient for the system operator.
/// Converges when `||A x - rhs|| <= rel_tol * ||rhs||`; otherwise returns the
/// last iterate with `converged = false`.
pub fn cg_solve(
    op: &SystemOperator,
    rhs: &[f64],
    x0: &[f64],
    rel_tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, CgReport)> {
    let n = op.n();
    if rhs.len() != n || x0.len() != n {
        return Err(Error::DimensionMismatch("cg vector length".into()));
    }
    if rel_tol <= 0.0 {
        return Err(Error::InvalidArgument("rel_tol must be > 0".into()));
    }
    let diag = op.diagonal();
    let inv_diag: Vec<f64> = diag
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d } else { 1.0 })
        .collect();

    let b_norm = norm2(rhs);
    let threshold = rel_tol * b_norm;

    let mut x = x0.to_vec();
    let mut ax = vec![0.0; n];
    op.apply(&x, &mut ax)?;
    let mut r: Vec<f64> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let mut r_norm = norm2(&r);
    if r_norm <= threshold {
        return Ok((x, CgReport { iterations: 0, final_residual_norm: r_norm, converged: true }));
    }

    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(ri, di)| ri * di).collect();
    let mut p = z.clone();
    let mut rz: f64 = dot(&r, &z);
    let mut ap = vec![0.0; n];

    let mut iterations = 0;
    for _ in 0..max_iter {
        iterations += 1;
        op.apply(&p, &mut ap)?;
        let pap = dot(&p, &ap);
        if !pap.is_finite() || pap <= 0.0 {
            return Err(Error::NumericalBreakdown(format!("p^T A p = {pap}")));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        r_norm = norm2(&r);
        if !r_norm.is_finite() {
            return Err(Error::NumericalBreakdown("residual is not finite".into()));
        }
        if r_norm <= threshold {
            return Ok((x, CgReport { iterations, final_residual_norm: r_norm, converged: true }));
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Ok((x, CgReport { iterations, final_residual_norm: r_norm, converged: false }))
}

/// Solve `(lambda L + D^T D) y = D^T s` for the high-resolution target.
///
/// Invalid source pixels contribute nothing to the right-hand side (their
/// rows of `D` are empty when the operator was built from the matching mask).
/// The warm start defaults to the bicubic upsampling of the source. The
/// output mask marks pixels whose block has a valid source value.
pub fn forward_solve(
    graph: &AffinityGraph,
    down: &DownsampleOperator,
    s: &SourceImage,
    lambda: f64,
    warm_start: Option<&TargetImage>,
    rel_tol: f64,
    max_iter: usize,
) -> Result<(TargetImage, CgReport)> {
    if lambda <= 0.0 {
        return Err(Error::NonPositiveLambda(lambda));
    }
    if s.height != down.out_height || s.width != down.out_width {
        return Err(Error::DimensionMismatch("source / downsampler size".into()));
    }
    let op = SystemOperator::new(graph, down, lambda)?;

    let s_masked: Vec<f64> = s
        .data
        .iter()
        .zip(&s.valid)
        .map(|(&v, &ok)| if ok { v } else { 0.0 })
        .collect();
    let rhs = down.apply_transpose(&s_masked)?;

    let x0 = match warm_start {
        Some(t) => {
            if t.height != down.in_height || t.width != down.in_width {
                return Err(Error::DimensionMismatch("warm start size".into()));
            }
            t.data.clone()
        }
        None => bicubic_upsample(s, down.scale)?.data,
    };

    let (x, report) = cg_solve(&op, &rhs, &x0, rel_tol, max_iter)?;

    let row_valid = down.row_valid();
    let (h, w, k) = (down.in_height, down.in_width, down.scale);
    let mut valid = vec![false; h * w];
    for i in 0..h {
        for j in 0..w {
            let b = (i / k) * down.out_width + j / k;
            valid[i * w + j] = row_valid[b] && s.valid[b];
        }
    }
    Ok((TargetImage::new(h, w, x, valid)?, report))
}

/// Dense direct solve of the same system (test oracle). Materializes
/// `lambda L + D^T D` and factorizes via Cholesky; guarded to small sizes.
pub fn dense_oracle_solve(
    graph: &AffinityGraph,
    down: &DownsampleOperator,
    s: &SourceImage,
    lambda: f64,
) -> Result<Vec<f64>> {
    let n = graph.n_pixels();
    if n > DENSE_ORACLE_MAX_PIXELS {
        return Err(Error::SizeGuard(n, DENSE_ORACLE_MAX_PIXELS));
    }
    if lambda <= 0.0 {
        return Err(Error::NonPositiveLambda(lambda));
    }
    let (h, w) = (graph.height, graph.width);
    let mut a = vec![0.0; n * n];
    let mut add_edge = |p: usize, q: usize, wgt: f64| {
        a[p * n + p] += lambda * wgt;
        a[q * n + q] += lambda * wgt;
        a[p * n + q] -= lambda * wgt;
        a[q * n + p] -= lambda * wgt;
    };
    for i in 0..h {
        for j in 0..w - 1 {
            add_edge(i * w + j, i * w + j + 1, graph.right_weights[i * (w - 1) + j]);
        }
    }
    for i in 0..h - 1 {
        for j in 0..w {
            add_edge(i * w + j, (i + 1) * w + j, graph.down_weights[i * w + j]);
        }
    }
    // D^T D: within each row r, all pairs of entries
    for r in 0..down.rows() {
        for e1 in down.indptr[r]..down.indptr[r + 1] {
            for e2 in down.indptr[r]..down.indptr[r + 1] {
                a[down.indices[e1] * n + down.indices[e2]] += down.weights[e1] * down.weights[e2];
            }
        }
    }

    let s_masked: Vec<f64> = s
        .data
        .iter()
        .zip(&s.valid)
        .map(|(&v, &ok)| if ok { v } else { 0.0 })
        .collect();
    let mut b = down.apply_transpose(&s_masked)?;
    cholesky_solve_in_place(&mut a, n, &mut b)?;
    Ok(b)
}

/// In-place Cholesky factorization and solve for a dense SPD matrix.
fn cholesky_solve_in_place(a: &mut [f64], n: usize, b: &mut [f64]) -> Result<()> {
    // a = L L^T, lower triangle overwritten
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::NumericalBreakdown(format!("cholesky pivot {d} at {j}")));
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut v = a[i * n + j];
            for k in 0..j {
                v -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = v / d;
        }
    }
    // forward substitution L v = b
    for i in 0..n {
        let mut v = b[i];
        for k in 0..i {
            v -= a[i * n + k] * b[k];
        }
        b[i] = v / a[i * n + i];
    }
    // back substitution L^T x = v
    for i in (0..n).rev() {
        let mut v = b[i];
        for k in i + 1..n {
            v -= a[k * n + i] * b[k];
        }
        b[i] = v / a[i * n + i];
    }
    Ok(())
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::downsample::build_box_downsampler;
    use crate::graph::AffinityGraph;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_graph(rng: &mut ChaCha8Rng, h: usize, w: usize) -> AffinityGraph {
        AffinityGraph {
            height: h,
            width: w,
            right_weights: (0..h * (w - 1)).map(|_| rng.gen_range(0.05..1.0)).collect(),
            down_weights: (0..(h - 1) * w).map(|_| rng.gen_range(0.05..1.0)).collect(),
        }
    }

    #[test]
    fn identity_system_converges_immediately() {
        // k = 1 makes D the identity; lambda tiny so the operator ~ I
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random_graph(&mut rng, 3, 3);
        let d = build_box_downsampler(3, 3, 1, None).unwrap();
        let s_data: Vec<f64> = (0..9).map(|_| rng.gen_range(0.0..1.0)).collect();
        let s = SourceImage::all_valid(3, 3, s_data.clone()).unwrap();
        let (y, rep) = forward_solve(&g, &d, &s, 1e-12, None, 1e-10, 500).unwrap();
        assert!(rep.converged);
        for (a, b) in y.data.iter().zip(&s_data) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn constant_source_gives_constant_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &lambda in &[0.01, 0.1, 1.0, 100.0] {
            let g = random_graph(&mut rng, 4, 4);
            let d = build_box_downsampler(4, 4, 2, None).unwrap();
            let s = SourceImage::all_valid(2, 2, vec![3.0; 4]).unwrap();
            let (y, rep) = forward_solve(&g, &d, &s, lambda, None, 1e-10, 1000).unwrap();
            assert!(rep.converged);
            for &v in &y.data {
                assert!((v - 3.0).abs() <= 1e-10, "lambda={lambda} v={v}");
            }
        }
    }

    #[test]
    fn cg_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..10 {
            let g = random_graph(&mut rng, 4, 4);
            let d = build_box_downsampler(4, 4, 2, None).unwrap();
            let data: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..10.0)).collect();
            let s = SourceImage::all_valid(2, 2, data).unwrap();
            let (y, rep) = forward_solve(&g, &d, &s, 0.1, None, 1e-12, 2000).unwrap();
            assert!(rep.converged);
            let oracle = dense_oracle_solve(&g, &d, &s, 0.1).unwrap();
            let num: f64 = y.data.iter().zip(&oracle).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let den: f64 = oracle.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(num / den <= 1e-8, "trial {trial}: rel err {}", num / den);
        }
    }

    #[test]
    fn fidelity_improves_as_lambda_shrinks() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = random_graph(&mut rng, 8, 8);
        let d = build_box_downsampler(8, 8, 2, None).unwrap();
        let data: Vec<f64> = (0..16).map(|_| rng.gen_range(0.0..1.0)).collect();
        let s = SourceImage::all_valid(4, 4, data.clone()).unwrap();
        let mut prev = f64::INFINITY;
        for &lambda in &[1.0, 0.1, 0.01] {
            let (y, _) = forward_solve(&g, &d, &s, lambda, None, 1e-12, 5000).unwrap();
            let ds = d.apply(&y.data).unwrap();
            let err: f64 = ds.iter().zip(&data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            assert!(err < prev, "lambda={lambda}: {err} !< {prev}");
            prev = err;
        }
    }

    #[test]
    fn small_lambda_identity_limit() {
        // k = 1, lambda -> 0: solution approaches s
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = random_graph(&mut rng, 4, 4);
        let d = build_box_downsampler(4, 4, 1, None).unwrap();
        let data: Vec<f64> = (0..16).map(|_| rng.gen_range(0.0..1.0)).collect();
        let s = SourceImage::all_valid(4, 4, data.clone()).unwrap();
        let y = dense_oracle_solve(&g, &d, &s, 1e-8).unwrap();
        let max: f64 = y.iter().zip(&data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(max <= 1e-5, "{max}");
    }

    #[test]
    fn large_lambda_smoothing_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = random_graph(&mut rng, 8, 8);
        let d = build_box_downsampler(8, 8, 2, None).unwrap();
        let data: Vec<f64> = (0..16).map(|_| rng.gen_range(0.0..1.0)).collect();
        let s = SourceImage::all_valid(4, 4, data).unwrap();
        let variance = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64
        };
        let (y_hi, _) = forward_solve(&g, &d, &s, 1e6, None, 1e-12, 20000).unwrap();
        let (y_lo, _) = forward_solve(&g, &d, &s, 0.01, None, 1e-12, 20000).unwrap();
        assert!(variance(&y_hi.data) <= 1e-6 * variance(&y_lo.data));
    }

    #[test]
    fn lambda_zero_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = random_graph(&mut rng, 2, 2);
        let d = build_box_downsampler(2, 2, 2, None).unwrap();
        let s = SourceImage::all_valid(1, 1, vec![1.0]).unwrap();
        assert!(matches!(
            forward_solve(&g, &d, &s, 0.0, None, 1e-7, 100),
            Err(Error::NonPositiveLambda(_))
        ));
    }

    #[test]
    fn two_block_chain_closed_form() {
        // 1x4 lattice, k = 2: two source pixels, chain graph with unit
        // weights except a weak middle link. System assembled by hand.
        let g = AffinityGraph {
            height: 1,
            width: 4,
            right_weights: vec![1.0, 0.5, 1.0],
            down_weights: vec![],
        };
        // 1-row lattice: square blocks cannot tile it, so assemble the
        // two-pixel averaging rows by hand
        let d = DownsampleOperator {
            scale: 2,
            in_height: 1,
            in_width: 4,
            out_height: 1,
            out_width: 2,
            indptr: vec![0, 2, 4],
            indices: vec![0, 1, 2, 3],
            weights: vec![0.5; 4],
        };
        let s = SourceImage::all_valid(1, 2, vec![0.0, 1.0]).unwrap();
        let lambda = 0.1;
        let oracle = dense_oracle_solve(&g, &d, &s, lambda).unwrap();
        // independent check: solve the same 4x4 system via Gaussian
        // elimination on a hand-assembled matrix
        let mut m = [
            [lambda * 1.0 + 0.25, -lambda * 1.0 + 0.25, 0.0, 0.0],
            [-lambda * 1.0 + 0.25, lambda * 1.5 + 0.25, -lambda * 0.5, 0.0],
            [0.0, -lambda * 0.5, lambda * 1.5 + 0.25, -lambda * 1.0 + 0.25],
            [0.0, 0.0, -lambda * 1.0 + 0.25, lambda * 1.0 + 0.25],
        ];
        let mut rhs = [0.0, 0.0, 0.5, 0.5];
        // gaussian elimination with partial pivoting
        for col in 0..4 {
            let piv = (col..4).max_by(|&a, &b| m[a][col].abs().partial_cmp(&m[b][col].abs()).unwrap()).unwrap();
            m.swap(col, piv);
            rhs.swap(col, piv);
            for row in col + 1..4 {
                let f = m[row][col] / m[col][col];
                for c2 in col..4 {
                    m[row][c2] -= f * m[col][c2];
                }
                rhs[row] -= f * rhs[col];
            }
        }
        let mut x = [0.0; 4];
        for row in (0..4).rev() {
            let mut v = rhs[row];
            for c2 in row + 1..4 {
                v -= m[row][c2] * x[c2];
            }
            x[row] = v / m[row][row];
        }
        for i in 0..4 {
            assert!((oracle[i] - x[i]).abs() <= 1e-10, "{:?} vs {:?}", oracle, x);
        }
        // and CG agrees
        // default warm start upsamples by k in both dimensions, which does
        // not match this 1-row operator; supply one explicitly
        let ws = TargetImage::new(1, 4, vec![0.0; 4], vec![true; 4]).unwrap();
        let (y, _) = forward_solve(&g, &d, &s, lambda, Some(&ws), 1e-12, 1000).unwrap();
        for i in 0..4 {
            assert!((y.data[i] - x[i]).abs() <= 1e-8);
        }
    }

    #[test]
    fn invalid_source_blocks_diffuse_in() {
        let g = AffinityGraph {
            height: 2,
            width: 4,
            right_weights: vec![1.0; 6],
            down_weights: vec![1.0; 4],
        };
        let d = build_box_downsampler(2, 4, 2, None).unwrap();
        let s = SourceImage::new(1, 2, vec![5.0, 0.0], vec![true, false]).unwrap();
        // rhs only from the valid block; with empty... here D rows both
        // nonempty (mask applies to source validity, not target), the invalid
        // source contributes zero to the rhs but its block remains
        // constrained only through lambda L + D^T D. Build D from a target
        // mask to empty the row instead:
        let tmask = vec![true, true, false, false, true, true, false, false];
        let d2 = build_box_downsampler(2, 4, 2, Some(&tmask)).unwrap();
        let (y, rep) = forward_solve(&g, &d2, &s, 0.1, None, 1e-10, 1000).unwrap();
        assert!(rep.converged);
        // the unconstrained block takes values diffused from the valid one
        for &v in &y.data {
            assert!((v - 5.0).abs() <= 1e-6, "{v}");
        }
        // mask marks only the valid block's pixels
        assert!(y.valid[0] && y.valid[1] && !y.valid[2] && !y.valid[3]);
        let _ = d;
        let _ = s;
    }

    #[test]
    fn cg_report_consistency() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = random_graph(&mut rng, 6, 6);
        let d = build_box_downsampler(6, 6, 2, None).unwrap();
        let data: Vec<f64> = (0..9).map(|_| rng.gen_range(0.0..1.0)).collect();
        let s = SourceImage::all_valid(3, 3, data).unwrap();
        let rel_tol = 1e-9;
        let (_, rep) = forward_solve(&g, &d, &s, 0.1, None, rel_tol, 5000).unwrap();
        assert!(rep.converged);
        let s_norm: f64 = {
            let rhs = d.apply_transpose(&s.data).unwrap();
            rhs.iter().map(|v| v * v).sum::<f64>().sqrt()
        };
        assert!(rep.final_residual_norm <= rel_tol * s_norm);
    }
}
