//! Sparse box point-spread-function downsampling operator.
//!
//! Maps the flattened `H*W` target vector to the `h*w` source vector by
//! averaging each axis-aligned, non-overlapping `k x k` block. Rows are stored
//! in compressed form; each high-resolution pixel belongs to exactly one row.

use crate::image::SourceImage;
use crate::{Error, Result};

/// Row-stochastic averaging operator `D` of shape `(h*w) x (H*W)`.
#[derive(Debug, Clone)]
pub struct DownsampleOperator {
    pub scale: usize,
    pub in_height: usize,
    pub in_width: usize,
    pub out_height: usize,
    pub out_width: usize,
    /// CSR row pointers, length `out_height*out_width + 1`.
    pub indptr: Vec<usize>,
    /// High-resolution column indices, strictly increasing within each row.
    pub indices: Vec<usize>,
    /// Nonnegative weights; each nonempty row sums to 1.
    pub weights: Vec<f64>,
}

impl DownsampleOperator {
    pub fn rows(&self) -> usize {
        self.out_height * self.out_width
    }

    pub fn cols(&self) -> usize {
        self.in_height * self.in_width
    }

    /// True where the row is nonempty, i.e. the block held at least one
    /// valid high-resolution pixel.
    pub fn row_valid(&self) -> Vec<bool> {
        (0..self.rows())
            .map(|r| self.indptr[r + 1] > self.indptr[r])
            .collect()
    }

    /// `D y`: block averages of the high-resolution vector.
    pub fn apply(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.cols() {
            return Err(Error::DimensionMismatch(format!(
                "apply: expected {}, got {}",
                self.cols(),
                y.len()
            )));
        }
        let mut out = vec![0.0; self.rows()];
        for r in 0..self.rows() {
            let mut acc = 0.0;
            for e in self.indptr[r]..self.indptr[r + 1] {
                acc += self.weights[e] * y[self.indices[e]];
            }
            out[r] = acc;
        }
        Ok(out)
    }

    /// `D^T v`: scatter the low-resolution vector back onto the lattice.
    pub fn apply_transpose(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows() {
            return Err(Error::DimensionMismatch(format!(
                "apply_transpose: expected {}, got {}",
                self.rows(),
                v.len()
            )));
        }
        let mut out = vec![0.0; self.cols()];
        for (r, &vr) in v.iter().enumerate() {
            for e in self.indptr[r]..self.indptr[r + 1] {
                out[self.indices[e]] += self.weights[e] * vr;
            }
        }
        Ok(out)
    }

    /// Diagonal of `D^T D`. Each column appears in at most one row, so the
    /// entry is just the square of that pixel's weight.
    pub fn gram_diagonal(&self) -> Vec<f64> {
        let mut diag = vec![0.0; self.cols()];
        for e in 0..self.indices.len() {
            diag[self.indices[e]] += self.weights[e] * self.weights[e];
        }
        diag
    }

    /// Downsample a target: values averaged over valid block pixels, source
    /// pixel invalid when the whole block is invalid.
    pub fn downsample_target(&self, data: &[f64]) -> Result<SourceImage> {
        let vals = self.apply(data)?;
        let valid = self.row_valid();
        let clean: Vec<f64> = vals
            .iter()
            .zip(&valid)
            .map(|(&v, &ok)| if ok { v } else { 0.0 })
            .collect();
        SourceImage::new(self.out_height, self.out_width, clean, valid)
    }
}

/// Build the uniform box downsampler for an `H x W` target at scale `k`.
/// `target_valid`, when given, restricts each block average to its valid
/// pixels (weights `1/count`); fully invalid blocks get an empty row.
pub fn build_box_downsampler(
    height: usize,
    width: usize,
    k: usize,
    target_valid: Option<&[bool]>,
) -> Result<DownsampleOperator> {
    if k == 0 || height % k != 0 || width % k != 0 {
        return Err(Error::IncompatibleScale { k, h: height, w: width });
    }
    if let Some(m) = target_valid {
        if m.len() != height * width {
            return Err(Error::DimensionMismatch("target mask length".into()));
        }
    }
    let (out_h, out_w) = (height / k, width / k);
    let mut indptr = Vec::with_capacity(out_h * out_w + 1);
    let mut indices = Vec::new();
    let mut weights = Vec::new();
    indptr.push(0);
    let mut block = Vec::with_capacity(k * k);
    for bi in 0..out_h {
        for bj in 0..out_w {
            block.clear();
            for di in 0..k {
                for dj in 0..k {
                    let idx = (bi * k + di) * width + bj * k + dj;
                    if target_valid.map_or(true, |m| m[idx]) {
                        block.push(idx);
                    }
                }
            }
            if !block.is_empty() {
                let w = 1.0 / block.len() as f64;
                for &idx in &block {
                    indices.push(idx);
                    weights.push(w);
                }
            }
            indptr.push(indices.len());
        }
    }
    Ok(DownsampleOperator {
        scale: k,
        in_height: height,
        in_width: width,
        out_height: out_h,
        out_width: out_w,
        indptr,
        indices,
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Dense materialisation, used as the oracle.
    fn dense(d: &DownsampleOperator) -> Vec<Vec<f64>> {
        let mut m = vec![vec![0.0; d.cols()]; d.rows()];
        for r in 0..d.rows() {
            for e in d.indptr[r]..d.indptr[r + 1] {
                m[r][d.indices[e]] = d.weights[e];
            }
        }
        m
    }

    #[test]
    fn block_mean_2x2() {
        let d = build_box_downsampler(2, 2, 2, None).unwrap();
        let out = d.apply(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(out, vec![2.5]);
    }

    #[test]
    fn k1_is_identity() {
        let d = build_box_downsampler(3, 3, 1, None).unwrap();
        let y: Vec<f64> = (0..9).map(|i| i as f64).collect();
        assert_eq!(d.apply(&y).unwrap(), y);
    }

    #[test]
    fn masked_block_mean() {
        let valid = vec![true, true, true, false];
        let d = build_box_downsampler(2, 2, 2, Some(&valid)).unwrap();
        let out = d.apply(&[1.0, 2.0, 3.0, 99.0]).unwrap();
        assert!((out[0] - 2.0).abs() < 1e-15);
        for e in 0..3 {
            assert!((d.weights[e] - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn fully_invalid_block_gives_empty_row() {
        let valid = vec![false; 4];
        let d = build_box_downsampler(2, 2, 2, Some(&valid)).unwrap();
        assert_eq!(d.row_valid(), vec![false]);
        let s = d.downsample_target(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.valid, vec![false]);
    }

    #[test]
    fn incompatible_scale_errors() {
        assert!(matches!(
            build_box_downsampler(6, 6, 4, None),
            Err(Error::IncompatibleScale { .. })
        ));
    }

    #[test]
    fn row_stochastic_on_constants() {
        let d = build_box_downsampler(8, 8, 4, None).unwrap();
        let out = d.apply(&vec![1.0; 64]).unwrap();
        for v in out {
            assert!((v - 1.0).abs() <= 1e-14);
        }
    }

    #[test]
    fn matches_dense_oracle_and_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(h, w, k) in &[(4usize, 4usize, 2usize), (8, 8, 2), (8, 8, 4)] {
            let mask: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(0.85)).collect();
            let d = build_box_downsampler(h, w, k, Some(&mask)).unwrap();
            let m = dense(&d);
            let y: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..d.rows()).map(|_| rng.gen_range(-1.0..1.0)).collect();

            let got = d.apply(&y).unwrap();
            for r in 0..d.rows() {
                let want: f64 = (0..d.cols()).map(|c| m[r][c] * y[c]).sum();
                assert!((got[r] - want).abs() <= 1e-12);
            }

            // adjoint identity <Dy, v> = <y, D^T v>
            let lhs: f64 = got.iter().zip(&v).map(|(a, b)| a * b).sum();
            let dtv = d.apply_transpose(&v).unwrap();
            let rhs: f64 = y.iter().zip(&dtv).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() <= 1e-10);
        }
    }

    #[test]
    fn partition_property() {
        let d = build_box_downsampler(6, 6, 3, None).unwrap();
        let mut seen = vec![0usize; d.cols()];
        for &i in &d.indices {
            seen[i] += 1;
        }
        assert!(seen.iter().all(|&c| c == 1));
        // D^T D diagonal is (1/k^2)^2 everywhere in the all-valid case
        for v in d.gram_diagonal() {
            assert!((v - 1.0 / 81.0).abs() <= 1e-15);
        }
    }

    #[test]
    fn strictly_increasing_indices_per_row() {
        let mask: Vec<bool> = (0..64).map(|i| i % 5 != 0).collect();
        let d = build_box_downsampler(8, 8, 4, Some(&mask)).unwrap();
        for r in 0..d.rows() {
            let row = &d.indices[d.indptr[r]..d.indptr[r + 1]];
            assert!(row.windows(2).all(|p| p[0] < p[1]));
        }
    }
}
