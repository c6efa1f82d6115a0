//! Per-pixel feature extraction.
//!
//! Two modes: the colour baseline (standardized guide channels plus the
//! bicubic-upsampled source) and a small trainable convolutional network with
//! hand-written reverse-mode differentiation. Convolutions are 3x3,
//! zero-padded, stride 1; ReLU between layers, no activation on the output.

use std::path::Path;

use crate::image::{FeatureMap, GuideImage, TargetImage};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STANDARDIZE_EPS: f64 = 1e-8;
const PARAMS_MAGIC: &[u8; 4] = b"GSRF";
const PARAMS_VERSION: u32 = 1;

/// Network architecture: channel widths of the hidden layers and the output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub hidden: Vec<usize>,
    pub out_channels: usize,
}

impl ConvSpec {
    /// Default extractor for a `c`-channel guide: input `c + 1` (guide plus
    /// upsampled source), hidden widths `[32, 32, 32]`, output depth 16.
    pub fn default_for_guide(guide_channels: usize) -> Self {
        Self { in_channels: guide_channels + 1, hidden: vec![32, 32, 32], out_channels: 16 }
    }

    /// Output widths of each conv layer, in order.
    pub fn layer_widths(&self) -> Vec<usize> {
        let mut v = self.hidden.clone();
        v.push(self.out_channels);
        v
    }
}

/// One 3x3 convolution layer. Weight layout: `w[((o*in + i)*3 + dy)*3 + dx]`.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl ConvLayer {
    fn zeros(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            weights: vec![0.0; out_channels * in_channels * 9],
            biases: vec![0.0; out_channels],
        }
    }
}

/// All trainable state: conv layers plus the affinity scale `raw_mu`.
#[derive(Debug, Clone)]
pub struct ConvNetParams {
    pub spec: ConvSpec,
    pub layers: Vec<ConvLayer>,
    pub raw_mu: f64,
}

impl ConvNetParams {
    /// Kaiming-uniform fan-in initialization with a seedable RNG; biases
    /// start at zero and `raw_mu` at 0 (`mu = 1`).
    pub fn init(spec: ConvSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut in_c = spec.in_channels;
        for out_c in spec.layer_widths() {
            let mut layer = ConvLayer::zeros(in_c, out_c);
            let bound = (6.0 / (in_c as f64 * 9.0)).sqrt();
            for w in layer.weights.iter_mut() {
                *w = rng.gen_range(-bound..bound);
            }
            layers.push(layer);
            in_c = out_c;
        }
        Self { spec, layers, raw_mu: 0.0 }
    }

    /// Parameter-free variant used by the colour baseline: only `raw_mu`.
    pub fn colour_only() -> Self {
        Self {
            spec: ConvSpec { in_channels: 0, hidden: vec![], out_channels: 0 },
            layers: vec![],
            raw_mu: 0.0,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for l in out.layers.iter_mut() {
            l.weights.fill(0.0);
            l.biases.fill(0.0);
        }
        out.raw_mu = 0.0;
        out
    }

    pub fn n_params(&self) -> usize {
        1 + self
            .layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum::<usize>()
    }

    /// Flatten into `out` (cleared first): layer weights then biases in
    /// order, `raw_mu` last.
    pub fn write_flat(&self, out: &mut Vec<f64>) {
        out.clear();
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.biases);
        }
        out.push(self.raw_mu);
    }

    pub fn read_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::DimensionMismatch("flat parameter length".into()));
        }
        let mut pos = 0;
        for l in self.layers.iter_mut() {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[pos..pos + nw]);
            pos += nw;
            let nb = l.biases.len();
            l.biases.copy_from_slice(&flat[pos..pos + nb]);
            pos += nb;
        }
        self.raw_mu = flat[pos];
        Ok(())
    }

    /// Versioned binary blob: magic, version, in_channels, layer count and
    /// widths (u32 LE), then all weights/biases as f32 LE in flat order,
    /// `raw_mu` appended.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(PARAMS_MAGIC);
        buf.extend_from_slice(&PARAMS_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.spec.in_channels as u32).to_le_bytes());
        let widths = self.spec.layer_widths();
        buf.extend_from_slice(&(widths.len() as u32).to_le_bytes());
        for w in &widths {
            buf.extend_from_slice(&(*w as u32).to_le_bytes());
        }
        let mut flat = Vec::new();
        self.write_flat(&mut flat);
        for v in flat {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path)?;
        let take4 = |pos: usize| -> Result<[u8; 4]> {
            buf.get(pos..pos + 4)
                .and_then(|s| s.try_into().ok())
                .ok_or_else(|| Error::InvalidParamsFile("truncated".into()))
        };
        if &take4(0)? != PARAMS_MAGIC {
            return Err(Error::InvalidParamsFile("bad magic".into()));
        }
        let version = u32::from_le_bytes(take4(4)?);
        if version != PARAMS_VERSION {
            return Err(Error::InvalidParamsFile(format!("unsupported version {version}")));
        }
        let in_channels = u32::from_le_bytes(take4(8)?) as usize;
        let n_layers = u32::from_le_bytes(take4(12)?) as usize;
        let mut widths = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            widths.push(u32::from_le_bytes(take4(16 + 4 * i)?) as usize);
        }
        let spec = ConvSpec {
            in_channels,
            hidden: widths[..widths.len().saturating_sub(1)].to_vec(),
            out_channels: widths.last().copied().unwrap_or(0),
        };
        let mut params = ConvNetParams {
            layers: {
                let mut layers = Vec::new();
                let mut in_c = in_channels;
                for &out_c in &widths {
                    layers.push(ConvLayer::zeros(in_c, out_c));
                    in_c = out_c;
                }
                layers
            },
            spec,
            raw_mu: 0.0,
        };
        let base = 16 + 4 * n_layers;
        let n = params.n_params();
        if buf.len() != base + 4 * n {
            return Err(Error::InvalidParamsFile(format!(
                "payload length {} != {}",
                buf.len() - base.min(buf.len()),
                4 * n
            )));
        }
        let mut flat = Vec::with_capacity(n);
        for i in 0..n {
            flat.push(f32::from_le_bytes(take4(base + 4 * i)?) as f64);
        }
        params.read_flat(&flat)?;
        Ok(params)
    }
}

/// Standardize each channel to zero mean and unit variance over the patch;
/// channels with variance below the guard map to zeros.
fn standardize_channel(data: &mut [f64]) {
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var <= STANDARDIZE_EPS {
        data.fill(0.0);
    } else {
        let inv = 1.0 / var.sqrt();
        for v in data.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
}

/// Stack the guide channels and the upsampled source into `C + 1`
/// standardized planes; this is both the colour baseline feature map and the
/// network input.
pub fn assemble_input(guide: &GuideImage, s_up: &TargetImage) -> Result<FeatureMap> {
    if guide.height != s_up.height || guide.width != s_up.width {
        return Err(Error::DimensionMismatch("guide / upsampled source size".into()));
    }
    let n = guide.height * guide.width;
    let c = guide.channels;
    let mut data = Vec::with_capacity((c + 1) * n);
    data.extend_from_slice(&guide.data);
    data.extend_from_slice(&s_up.data);
    for ch in 0..c + 1 {
        standardize_channel(&mut data[ch * n..(ch + 1) * n]);
    }
    FeatureMap::new(guide.height, guide.width, c + 1, data)
}

/// Colour-baseline features: the standardized input stack itself.
pub fn colour_features(guide: &GuideImage, s_up: &TargetImage) -> Result<FeatureMap> {
    assemble_input(guide, s_up)
}

/// Activations retained by the forward pass for the backward pass: the input
/// of each layer and each layer's pre-activation output.
pub struct ActivationTape {
    inputs: Vec<FeatureMap>,
    pre_activations: Vec<FeatureMap>,
}

fn conv3x3_forward(layer: &ConvLayer, x: &FeatureMap) -> FeatureMap {
    let (h, w) = (x.height, x.width);
    let n = h * w;
    let mut out = FeatureMap::zeros(h, w, layer.out_channels);
    for o in 0..layer.out_channels {
        let plane = &mut out.data[o * n..(o + 1) * n];
        plane.fill(layer.biases[o]);
        for i in 0..layer.in_channels {
            let input = &x.data[i * n..(i + 1) * n];
            let wbase = (o * layer.in_channels + i) * 9;
            for dy in 0..3usize {
                for dx in 0..3usize {
                    let wgt = layer.weights[wbase + dy * 3 + dx];
                    if wgt == 0.0 {
                        continue;
                    }
                    let (oy, ox) = (dy as isize - 1, dx as isize - 1);
                    let y0 = (-oy).max(0) as usize;
                    let y1 = (h as isize - oy).min(h as isize) as usize;
                    let x0 = (-ox).max(0) as usize;
                    let x1 = (w as isize - ox).min(w as isize) as usize;
                    for y in y0..y1 {
                        let src_row = ((y as isize + oy) as usize) * w;
                        let dst_row = y * w;
                        for xx in x0..x1 {
                            plane[dst_row + xx] += wgt * input[src_row + (xx as isize + ox) as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient w.r.t. layer input: correlation with the flipped kernel.
fn conv3x3_backward_input(layer: &ConvLayer, grad_out: &FeatureMap) -> FeatureMap {
    let (h, w) = (grad_out.height, grad_out.width);
    let n = h * w;
    let mut grad_in = FeatureMap::zeros(h, w, layer.in_channels);
    for o in 0..layer.out_channels {
        let gout = &grad_out.data[o * n..(o + 1) * n];
        for i in 0..layer.in_channels {
            let gin = &mut grad_in.data[i * n..(i + 1) * n];
            let wbase = (o * layer.in_channels + i) * 9;
            for dy in 0..3usize {
                for dx in 0..3usize {
                    let wgt = layer.weights[wbase + dy * 3 + dx];
                    if wgt == 0.0 {
                        continue;
                    }
                    let (oy, ox) = (dy as isize - 1, dx as isize - 1);
                    let y0 = (-oy).max(0) as usize;
                    let y1 = (h as isize - oy).min(h as isize) as usize;
                    let x0 = (-ox).max(0) as usize;
                    let x1 = (w as isize - ox).min(w as isize) as usize;
                    for y in y0..y1 {
                        let in_row = ((y as isize + oy) as usize) * w;
                        let out_row = y * w;
                        for xx in x0..x1 {
                            gin[in_row + (xx as isize + ox) as usize] += wgt * gout[out_row + xx];
                        }
                    }
                }
            }
        }
    }
    grad_in
}

fn conv3x3_backward_params(x: &FeatureMap, grad_out: &FeatureMap, grad_layer: &mut ConvLayer) {
    let (h, w) = (x.height, x.width);
    let n = h * w;
    for o in 0..grad_layer.out_channels {
        let gout = &grad_out.data[o * n..(o + 1) * n];
        grad_layer.biases[o] += gout.iter().sum::<f64>();
        for i in 0..grad_layer.in_channels {
            let input = &x.data[i * n..(i + 1) * n];
            let wbase = (o * grad_layer.in_channels + i) * 9;
            for dy in 0..3usize {
                for dx in 0..3usize {
                    let (oy, ox) = (dy as isize - 1, dx as isize - 1);
                    let y0 = (-oy).max(0) as usize;
                    let y1 = (h as isize - oy).min(h as isize) as usize;
                    let x0 = (-ox).max(0) as usize;
                    let x1 = (w as isize - ox).min(w as isize) as usize;
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let in_row = ((y as isize + oy) as usize) * w;
                        let out_row = y * w;
                        for xx in x0..x1 {
                            acc += gout[out_row + xx] * input[in_row + (xx as isize + ox) as usize];
                        }
                    }
                    grad_layer.weights[wbase + dy * 3 + dx] += acc;
                }
            }
        }
    }
}

/// Deterministic forward pass; returns the feature map and the tape needed by
/// `net_backward`. Errors with `Divergence` on non-finite activations.
pub fn net_forward(params: &ConvNetParams, input: &FeatureMap) -> Result<(FeatureMap, ActivationTape)> {
    if params.layers.is_empty() {
        return Err(Error::InvalidArgument("network has no layers".into()));
    }
    if input.depth != params.spec.in_channels {
        return Err(Error::DimensionMismatch(format!(
            "net input depth {} != {}",
            input.depth, params.spec.in_channels
        )));
    }
    let mut inputs = Vec::with_capacity(params.layers.len());
    let mut pre_activations = Vec::with_capacity(params.layers.len());
    let mut x = input.clone();
    let last = params.layers.len() - 1;
    for (li, layer) in params.layers.iter().enumerate() {
        let z = conv3x3_forward(layer, &x);
        if !z.data.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence);
        }
        inputs.push(x);
        pre_activations.push(z.clone());
        x = if li < last {
            let mut a = z;
            for v in a.data.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            a
        } else {
            z
        };
    }
    Ok((x, ActivationTape { inputs, pre_activations }))
}

/// Reverse-mode gradients for every kernel and bias. The returned structure
/// mirrors `params`; its `raw_mu` slot is left at zero (the affinity module
/// owns that gradient).
pub fn net_backward(
    params: &ConvNetParams,
    tape: &ActivationTape,
    grad_f: &FeatureMap,
) -> Result<ConvNetParams> {
    if tape.inputs.len() != params.layers.len() {
        return Err(Error::DimensionMismatch("tape does not match network".into()));
    }
    let mut grads = params.zeros_like();
    let mut grad_out = grad_f.clone();
    for li in (0..params.layers.len()).rev() {
        conv3x3_backward_params(&tape.inputs[li], &grad_out, &mut grads.layers[li]);
        if li > 0 {
            let mut gin = conv3x3_backward_input(&params.layers[li], &grad_out);
            // ReLU gate from the previous layer's pre-activation
            for (g, &z) in gin.data.iter_mut().zip(&tape.pre_activations[li - 1].data) {
                if z <= 0.0 {
                    *g = 0.0;
                }
            }
            grad_out = gin;
        }
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::SourceImage;

    fn small_spec() -> ConvSpec {
        ConvSpec { in_channels: 2, hidden: vec![4, 4], out_channels: 3 }
    }

    fn random_input(seed: u64, h: usize, w: usize, c: usize) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::new(h, w, c, (0..h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn colour_features_constant_inputs_are_zeroed() {
        let g = GuideImage::new(2, 2, 3, vec![0.5; 12]).unwrap();
        let s = TargetImage::all_valid(2, 2, vec![7.0; 4]).unwrap();
        let f = colour_features(&g, &s).unwrap();
        assert_eq!(f.depth, 4);
        assert!(f.data.iter().all(|&v| v == 0.0));
        // all-equal features -> all affinities 1
        let graph = crate::graph::compute_affinities(&f, Default::default()).unwrap();
        assert!(graph.right_weights.iter().chain(&graph.down_weights).all(|&a| a == 1.0));
    }

    #[test]
    fn colour_features_channel_count() {
        let g = GuideImage::new(2, 3, 3, vec![0.1; 18]).unwrap();
        let src = SourceImage::all_valid(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let up = crate::image::bicubic_upsample(&src, 1).unwrap();
        let f = colour_features(&g, &up).unwrap();
        assert_eq!(f.depth, 4);
        // standardized: zero mean, unit variance on the non-constant channel
        let n = 6;
        let last = &f.data[3 * n..4 * n];
        let mean: f64 = last.iter().sum::<f64>() / n as f64;
        let var: f64 = last.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() <= 1e-12 && (var - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn zero_net_outputs_zero() {
        let spec = small_spec();
        let params = ConvNetParams::init(spec.clone(), 0).zeros_like();
        let x = random_input(1, 4, 4, 2);
        let (f, _) = net_forward(&params, &x).unwrap();
        assert!(f.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let spec = ConvSpec { in_channels: 1, hidden: vec![], out_channels: 1 };
        let mut params = ConvNetParams::init(spec, 0).zeros_like();
        params.layers[0].weights[4] = 1.0; // center tap
        let x = random_input(2, 3, 5, 1);
        let (f, _) = net_forward(&params, &x).unwrap();
        for (a, b) in f.data.iter().zip(&x.data) {
            assert!((a - b).abs() <= 1e-15);
        }
    }

    #[test]
    fn one_layer_linear_gradient_closed_form() {
        // single linear layer: dL/dw[dy][dx] = sum_yx gout[y][x] * in[y+dy-1][x+dx-1]
        let spec = ConvSpec { in_channels: 1, hidden: vec![], out_channels: 1 };
        let params = ConvNetParams::init(spec, 3);
        let x = random_input(4, 5, 5, 1);
        let (_, tape) = net_forward(&params, &x).unwrap();
        let gout = random_input(5, 5, 5, 1);
        let grads = net_backward(&params, &tape, &gout).unwrap();
        for dy in 0..3isize {
            for dx in 0..3isize {
                let mut want = 0.0;
                for y in 0..5isize {
                    for xx in 0..5isize {
                        let (sy, sx) = (y + dy - 1, xx + dx - 1);
                        if sy >= 0 && sy < 5 && sx >= 0 && sx < 5 {
                            want += gout.at(0, y as usize, xx as usize) * x.at(0, sy as usize, sx as usize);
                        }
                    }
                }
                let got = grads.layers[0].weights[(dy * 3 + dx) as usize];
                assert!((want - got).abs() <= 1e-12);
            }
        }
        assert!((grads.layers[0].biases[0] - gout.data.iter().sum::<f64>()).abs() <= 1e-12);
    }

    #[test]
    fn full_net_gradients_match_finite_differences() {
        let spec = small_spec();
        let mut params = ConvNetParams::init(spec, 7);
        let x = random_input(8, 6, 6, 2);
        let c = random_input(9, 6, 6, 3); // random linear functional on F
        let loss = |p: &ConvNetParams| -> f64 {
            let (f, _) = net_forward(p, &x).unwrap();
            f.data.iter().zip(&c.data).map(|(a, b)| a * b).sum()
        };
        let (_, tape) = net_forward(&params, &x).unwrap();
        let analytic = net_backward(&params, &tape, &c).unwrap();
        let mut flat = Vec::new();
        params.write_flat(&mut flat);
        let mut aflat = Vec::new();
        analytic.write_flat(&mut aflat);
        let h = 1e-4;
        for idx in 0..flat.len() - 1 {
            // skip raw_mu (last slot, not a net parameter)
            let orig = flat[idx];
            flat[idx] = orig + h;
            params.read_flat(&flat).unwrap();
            let lp = loss(&params);
            flat[idx] = orig - h;
            params.read_flat(&flat).unwrap();
            let lm = loss(&params);
            flat[idx] = orig;
            params.read_flat(&flat).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let a = aflat[idx];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            assert!(rel <= 1e-5, "param {idx}: {a} vs {fd}");
        }
    }

    #[test]
    fn translation_equivariance_interior() {
        let params = ConvNetParams::init(small_spec(), 11);
        let x = random_input(12, 8, 8, 2);
        // shift input right by one pixel
        let n = 64;
        let mut shifted = FeatureMap::zeros(8, 8, 2);
        for ch in 0..2 {
            for y in 0..8 {
                for xx in 1..8 {
                    shifted.data[ch * n + y * 8 + xx] = x.data[ch * n + y * 8 + xx - 1];
                }
            }
        }
        let (f, _) = net_forward(&params, &x).unwrap();
        let (fs, _) = net_forward(&params, &shifted).unwrap();
        // compare away from borders (receptive field margin)
        let margin = 4;
        for ch in 0..3 {
            for y in margin..8 - margin {
                for xx in margin..8 - margin {
                    let a = f.at(ch, y, xx - 1);
                    let b = fs.at(ch, y, xx);
                    assert!((a - b).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn params_blob_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("params.bin");
        let mut params = ConvNetParams::init(small_spec(), 42);
        params.raw_mu = -0.25;
        params.save(&p).unwrap();
        let loaded = ConvNetParams::load(&p).unwrap();
        assert_eq!(loaded.spec, params.spec);
        assert!((loaded.raw_mu - params.raw_mu).abs() <= 1e-6);
        for (la, lb) in params.layers.iter().zip(&loaded.layers) {
            for (a, b) in la.weights.iter().zip(&lb.weights) {
                assert!((a - b).abs() <= 1e-6); // f32 storage
            }
        }
    }

    #[test]
    fn bad_params_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.bin");
        std::fs::write(&p, b"NOPE").unwrap();
        assert!(matches!(ConvNetParams::load(&p), Err(Error::InvalidParamsFile(_))));
    }
}
