//! Image value types, bicubic resampling and masked metrics.
//!
//! Multi-channel data is row-major planar: `index(c, i, j) = c*H*W + i*W + j`.
//! Depth values are stored in their raw file units (centimeters by convention;
//! the CLI `--depth-scale` flag rescales at load time). All types are immutable
//! values after construction and safe to share across threads.

use crate::{Error, Result};

/// High-resolution guide image, values in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct GuideImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Planar row-major, length `channels * height * width`.
    pub data: Vec<f64>,
}

impl GuideImage {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::DimensionMismatch("guide dimensions must be >= 1".into()));
        }
        if data.len() != height * width * channels {
            return Err(Error::DimensionMismatch(format!(
                "guide data length {} != {}x{}x{}",
                data.len(), channels, height, width
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("guide image".into()));
        }
        Ok(Self { height, width, channels, data })
    }

    #[inline]
    pub fn at(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[c * self.height * self.width + i * self.width + j]
    }
}

/// Low-resolution depth source with a per-pixel validity mask.
#[derive(Debug, Clone)]
pub struct SourceImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
    pub valid: Vec<bool>,
}

impl SourceImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if data.len() != height * width || valid.len() != height * width {
            return Err(Error::DimensionMismatch("source data/mask length".into()));
        }
        for (v, &ok) in data.iter().zip(&valid) {
            if ok && !(v.is_finite() && *v >= 0.0) {
                return Err(Error::NonFinite("source image has invalid valid-pixel values".into()));
            }
        }
        Ok(Self { height, width, data, valid })
    }

    pub fn all_valid(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        let valid = vec![true; height * width];
        Self::new(height, width, data, valid)
    }
}

/// High-resolution depth image (ground truth or reconstruction).
#[derive(Debug, Clone)]
pub struct TargetImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
    pub valid: Vec<bool>,
}

impl TargetImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if data.len() != height * width || valid.len() != height * width {
            return Err(Error::DimensionMismatch("target data/mask length".into()));
        }
        for (v, &ok) in data.iter().zip(&valid) {
            if ok && !v.is_finite() {
                return Err(Error::NonFinite("target image".into()));
            }
        }
        Ok(Self { height, width, data, valid })
    }

    pub fn all_valid(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        let valid = vec![true; height * width];
        Self::new(height, width, data, valid)
    }
}

/// Per-pixel feature tensor `F` of depth `M`, planar row-major.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, depth: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * depth {
            return Err(Error::DimensionMismatch("feature map length".into()));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("feature map".into()));
        }
        Ok(Self { height, width, depth, data })
    }

    pub fn zeros(height: usize, width: usize, depth: usize) -> Self {
        Self { height, width, depth, data: vec![0.0; height * width * depth] }
    }

    #[inline]
    pub fn at(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[c * self.height * self.width + i * self.width + j]
    }
}

/// Catmull-Rom cubic kernel (a = -0.5).
#[inline]
pub fn cubic_kernel(t: f64) -> f64 {
    let a = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a
    } else {
        0.0
    }
}

/// Replace invalid pixels by the value of the nearest valid pixel
/// (multi-source BFS over the 4-neighbour lattice). If no pixel is valid
/// the data is returned untouched.
fn infill_nearest(height: usize, width: usize, data: &[f64], valid: &[bool]) -> Vec<f64> {
    let n = height * width;
    let mut out = data.to_vec();
    let mut frontier: Vec<usize> = (0..n).filter(|&i| valid[i]).collect();
    if frontier.is_empty() || frontier.len() == n {
        return out;
    }
    let mut filled = valid.to_vec();
    let mut next = Vec::new();
    while !frontier.is_empty() {
        next.clear();
        for &p in &frontier {
            let (i, j) = (p / width, p % width);
            let mut push = |q: usize| {
                if !filled[q] {
                    filled[q] = true;
                    out[q] = out[p];
                    next.push(q);
                }
            };
            if j + 1 < width { push(p + 1); }
            if j > 0 { push(p - 1); }
            if i + 1 < height { push(p + width); }
            if i > 0 { push(p - width); }
        }
        std::mem::swap(&mut frontier, &mut next);
    }
    out
}

/// Bicubic upsampling by an integer factor `k`, with pixel-center alignment
/// and edge clamping. Invalid source pixels are in-filled from their nearest
/// valid neighbour before interpolation; the output mask is the
/// nearest-neighbour upsampling of the source mask.
pub fn bicubic_upsample(src: &SourceImage, k: usize) -> Result<TargetImage> {
    if k == 0 {
        return Err(Error::InvalidArgument("upsampling factor must be >= 1".into()));
    }
    let (h, w) = (src.height, src.width);
    let (out_h, out_w) = (h * k, w * k);
    let filled = infill_nearest(h, w, &src.data, &src.valid);

    let mut data = vec![0.0; out_h * out_w];
    let mut wx = [0.0f64; 4];
    let mut wy = [0.0f64; 4];
    for oi in 0..out_h {
        let y = (oi as f64 + 0.5) / k as f64 - 0.5;
        let i0 = y.floor() as isize;
        for t in 0..4 {
            wy[t] = cubic_kernel(y - (i0 - 1 + t as isize) as f64);
        }
        for oj in 0..out_w {
            let x = (oj as f64 + 0.5) / k as f64 - 0.5;
            let j0 = x.floor() as isize;
            for t in 0..4 {
                wx[t] = cubic_kernel(x - (j0 - 1 + t as isize) as f64);
            }
            let mut acc = 0.0;
            for (ti, &wyt) in wy.iter().enumerate() {
                let si = (i0 - 1 + ti as isize).clamp(0, h as isize - 1) as usize;
                let row = &filled[si * w..(si + 1) * w];
                let mut line = 0.0;
                for (tj, &wxt) in wx.iter().enumerate() {
                    let sj = (j0 - 1 + tj as isize).clamp(0, w as isize - 1) as usize;
                    line += wxt * row[sj];
                }
                acc += wyt * line;
            }
            data[oi * out_w + oj] = acc;
        }
    }

    let mut valid = vec![false; out_h * out_w];
    for oi in 0..out_h {
        for oj in 0..out_w {
            valid[oi * out_w + oj] = src.valid[(oi / k) * w + oj / k];
        }
    }
    TargetImage::new(out_h, out_w, data, valid)
}

fn joint_valid_iter<'a>(
    pred: &'a TargetImage,
    gt: &'a TargetImage,
) -> Result<impl Iterator<Item = (f64, f64)> + 'a> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(Error::DimensionMismatch("metric images differ in size".into()));
    }
    Ok(pred
        .data
        .iter()
        .zip(&gt.data)
        .zip(pred.valid.iter().zip(&gt.valid))
        .filter(|(_, (&pv, &gv))| pv && gv)
        .map(|((&p, &g), _)| (p, g)))
}

/// Mean squared error over pixels valid in both masks.
pub fn masked_mse(pred: &TargetImage, gt: &TargetImage) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, g) in joint_valid_iter(pred, gt)? {
        sum += (p - g) * (p - g);
        n += 1;
    }
    if n == 0 {
        return Err(Error::NoValidPixels);
    }
    Ok(sum / n as f64)
}

/// Mean absolute error over pixels valid in both masks.
pub fn masked_mae(pred: &TargetImage, gt: &TargetImage) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, g) in joint_valid_iter(pred, gt)? {
        sum += (p - g).abs();
        n += 1;
    }
    if n == 0 {
        return Err(Error::NoValidPixels);
    }
    Ok(sum / n as f64)
}
