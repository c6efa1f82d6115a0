//! End-to-end training of the feature extractor and affinity scale.
//!
//! Each step runs: features -> affinities -> forward solve -> masked loss ->
//! adjoint solve -> affinity backward -> network backward -> global-norm
//! clipping -> Adam. Sources are synthesized on the fly from the ground-truth
//! targets through the box downsampler, matching the evaluation protocol.

use crate::backward::backward_solve;
use crate::downsample::build_box_downsampler;
use crate::features::{assemble_input, net_backward, net_forward, ConvNetParams, ConvSpec};
use crate::graph::{affinity_backward, compute_affinities, AffinityScale};
use crate::image::{bicubic_upsample, GuideImage, TargetImage};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    L1,
    Mse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureMode {
    /// Raw standardized colour channels; only `raw_mu` is trainable.
    Colour,
    /// Small convolutional extractor; all parameters trainable.
    Learned,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub scale: usize,
    pub lambda: f64,
    pub loss: LossKind,
    pub feature_mode: FeatureMode,
    pub learning_rate: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every_epochs: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip_norm: f64,
    pub patch_size: usize,
    pub flip: bool,
    pub rotate: bool,
    pub seed: u64,
    pub cg_rel_tol: f64,
    pub cg_max_iter: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            scale: 8,
            lambda: 0.1,
            loss: LossKind::L1,
            feature_mode: FeatureMode::Learned,
            learning_rate: 1e-4,
            lr_decay_factor: 0.9,
            lr_decay_every_epochs: 10,
            batch_size: 8,
            epochs: 100,
            clip_norm: 1.0,
            patch_size: 256,
            flip: true,
            rotate: false,
            seed: 0,
            cg_rel_tol: 1e-7,
            cg_max_iter: 0, // 0 = derive from patch size
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.scale == 0 || self.patch_size % self.scale != 0 {
            return Err(Error::IncompatibleScale {
                k: self.scale,
                h: self.patch_size,
                w: self.patch_size,
            });
        }
        if self.learning_rate <= 0.0 || self.lr_decay_factor <= 0.0 || self.clip_norm <= 0.0 {
            return Err(Error::InvalidArgument("rates must be positive".into()));
        }
        Ok(())
    }

    fn max_iter(&self) -> usize {
        if self.cg_max_iter > 0 {
            self.cg_max_iter
        } else {
            crate::solver::default_max_iter(self.patch_size * self.patch_size)
        }
    }
}

/// One training image: guide plus ground-truth high-resolution target.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub guide: GuideImage,
    pub gt: TargetImage,
}

/// Masked L1 / MSE loss and its gradient with respect to the prediction.
/// The gradient is a full `H*W` vector, zero at pixels outside the joint
/// mask; the L1 subgradient at zero is 0.
pub fn masked_loss(
    kind: LossKind,
    pred: &TargetImage,
    gt: &TargetImage,
) -> Result<(f64, Vec<f64>)> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(Error::DimensionMismatch("loss images differ in size".into()));
    }
    let n_pix = pred.data.len();
    let mut grad = vec![0.0; n_pix];
    let mut n_valid = 0usize;
    for i in 0..n_pix {
        if pred.valid[i] && gt.valid[i] {
            n_valid += 1;
        }
    }
    if n_valid == 0 {
        return Err(Error::NoValidPixels);
    }
    let inv = 1.0 / n_valid as f64;
    let mut loss = 0.0;
    for i in 0..n_pix {
        if !(pred.valid[i] && gt.valid[i]) {
            continue;
        }
        let d = pred.data[i] - gt.data[i];
        match kind {
            LossKind::Mse => {
                loss += d * d * inv;
                grad[i] = 2.0 * d * inv;
            }
            LossKind::L1 => {
                loss += d.abs() * inv;
                grad[i] = d.signum() * inv * if d == 0.0 { 0.0 } else { 1.0 };
            }
        }
    }
    Ok((loss, grad))
}

/// Adam moment state over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: usize,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }
}

/// One bias-corrected Adam update (beta1 = 0.9, beta2 = 0.999, eps = 1e-8).
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64], lr: f64) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    state.step += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.step as i32);
    for i in 0..params.len() {
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * grads[i];
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * grads[i] * grads[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

/// Global l2-norm clipping; returns the pre-clip norm.
pub fn clip_gradients(grads: &mut [f64], clip_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > clip_norm {
        let s = clip_norm / norm;
        for g in grads.iter_mut() {
            *g *= s;
        }
    }
    norm
}

/// Random crop (aligned to the `k` grid), optional horizontal flip and
/// optional rotation (nearest-neighbour, out-of-frame pixels invalidated).
pub fn augment(
    sample: &TrainSample,
    patch_size: usize,
    k: usize,
    flip: bool,
    rotate: bool,
    rng: &mut ChaCha8Rng,
) -> Result<TrainSample> {
    let (h, w) = (sample.gt.height, sample.gt.width);
    if h < patch_size || w < patch_size {
        return Err(Error::DimensionMismatch(format!(
            "image {h}x{w} smaller than patch {patch_size}"
        )));
    }
    let max_i = (h - patch_size) / k;
    let max_j = (w - patch_size) / k;
    let i0 = k * if max_i > 0 { rng.gen_range(0..=max_i) } else { 0 };
    let j0 = k * if max_j > 0 { rng.gen_range(0..=max_j) } else { 0 };
    let do_flip = flip && rng.gen_bool(0.5);
    let angle = if rotate {
        rng.gen_range(-15.0f64..15.0) * std::f64::consts::PI / 180.0
    } else {
        0.0
    };

    let p = patch_size;
    let n = p * p;
    let c = sample.guide.channels;
    let gn = h * w;
    let mut gdata = vec![0.0; c * n];
    let mut tdata = vec![0.0; n];
    let mut tvalid = vec![false; n];

    let center = (p as f64 - 1.0) / 2.0;
    let (sin_a, cos_a) = angle.sin_cos();
    for y in 0..p {
        for x in 0..p {
            // destination -> source coordinates inside the patch
            let (mut py, mut px) = (y as f64, x as f64);
            if angle != 0.0 {
                let (dy, dx) = (py - center, px - center);
                py = center + cos_a * dy - sin_a * dx;
                px = center + sin_a * dy + cos_a * dx;
            }
            let (ry, rx) = (py.round(), px.round());
            if ry < 0.0 || rx < 0.0 || ry >= p as f64 || rx >= p as f64 {
                continue; // stays invalid
            }
            let mut sy = i0 + ry as usize;
            let mut sx = j0 + rx as usize;
            if do_flip {
                sx = j0 + (p - 1 - rx as usize);
            }
            sy = sy.min(h - 1);
            sx = sx.min(w - 1);
            let di = y * p + x;
            let si = sy * w + sx;
            tdata[di] = sample.gt.data[si];
            tvalid[di] = sample.gt.valid[si];
            for ch in 0..c {
                gdata[ch * n + di] = sample.guide.data[ch * gn + si];
            }
        }
    }
    Ok(TrainSample {
        guide: GuideImage::new(p, p, c, gdata)?,
        gt: TargetImage::new(p, p, tdata, tvalid)?,
    })
}

/// One line of the plain-text training log:
/// `epoch=<e> step=<s> loss=<l> grad_norm=<g> cg_iters=<n>`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub cg_iters: usize,
}

impl std::fmt::Display for LogRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "epoch={} step={} loss={:.17e} grad_norm={:.17e} cg_iters={}",
            self.epoch, self.step, self.loss, self.grad_norm, self.cg_iters
        )
    }
}

/// Forward pass shared by training and inference: features, graph, solve.
/// Returns the prediction, the per-batch bookkeeping needed for backward.
struct StepState {
    features: crate::image::FeatureMap,
    tape: Option<crate::features::ActivationTape>,
    graph: crate::graph::AffinityGraph,
    pred: TargetImage,
    cg_iters: usize,
}

fn run_forward(
    params: &ConvNetParams,
    mode: FeatureMode,
    guide: &GuideImage,
    gt: &TargetImage,
    cfg: &TrainConfig,
) -> Result<(StepState, crate::downsample::DownsampleOperator, crate::image::SourceImage)> {
    let down = build_box_downsampler(gt.height, gt.width, cfg.scale, Some(&gt.valid))?;
    let source = down.downsample_target(&gt.data)?;
    let s_up = bicubic_upsample(&source, cfg.scale)?;
    let input = assemble_input(guide, &s_up)?;
    let (features, tape) = match mode {
        FeatureMode::Colour => (input, None),
        FeatureMode::Learned => {
            let (f, t) = net_forward(params, &input)?;
            (f, Some(t))
        }
    };
    let graph = compute_affinities(&features, AffinityScale::new(params.raw_mu))?;
    let (pred, report) = forward_solve_with(cfg, &graph, &down, &source, Some(&s_up))?;
    Ok((
        StepState { features, tape, graph, pred, cg_iters: report.iterations },
        down,
        source,
    ))
}

fn forward_solve_with(
    cfg: &TrainConfig,
    graph: &crate::graph::AffinityGraph,
    down: &crate::downsample::DownsampleOperator,
    source: &crate::image::SourceImage,
    warm: Option<&TargetImage>,
) -> Result<(TargetImage, crate::solver::CgReport)> {
    crate::solver::forward_solve(graph, down, source, cfg.lambda, warm, cfg.cg_rel_tol, cfg.max_iter())
}

/// Full training loop. Deterministic given the seed. Returns the final
/// parameters and the per-step log.
pub fn train(cfg: &TrainConfig, dataset: &[TrainSample]) -> Result<(ConvNetParams, Vec<LogRecord>)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = match cfg.feature_mode {
        FeatureMode::Colour => ConvNetParams::colour_only(),
        FeatureMode::Learned => {
            ConvNetParams::init(ConvSpec::default_for_guide(dataset[0].guide.channels), cfg.seed)
        }
    };
    let n_params = params.n_params();
    let mut adam = AdamState::new(n_params);
    let mut lr = cfg.learning_rate;
    let mut log = Vec::new();
    let mut step = 0usize;
    let mut flat = Vec::with_capacity(n_params);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        // Fisher-Yates with the run RNG keeps the trajectory seed-determined
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut grad_flat = vec![0.0; n_params];
            let mut batch_loss = 0.0;
            let mut batch_iters = 0usize;
            for &idx in chunk {
                let sample = augment(
                    &dataset[idx],
                    cfg.patch_size.min(dataset[idx].gt.height).min(dataset[idx].gt.width),
                    cfg.scale,
                    cfg.flip,
                    cfg.rotate,
                    &mut rng,
                )?;
                let (st, down, _source) =
                    run_forward(&params, cfg.feature_mode, &sample.guide, &sample.gt, cfg)?;
                let (loss, grad_y) = masked_loss(cfg.loss, &st.pred, &sample.gt)?;
                if !loss.is_finite() {
                    return Err(Error::NumericalBreakdown(format!("loss = {loss}")));
                }
                batch_loss += loss;
                batch_iters += st.cg_iters;

                let lg = backward_solve(
                    &st.graph,
                    &down,
                    cfg.lambda,
                    &st.pred.data,
                    &grad_y,
                    cfg.cg_rel_tol,
                    cfg.max_iter(),
                )?;
                let (grad_f, grad_raw_mu) = affinity_backward(
                    &st.features,
                    AffinityScale::new(params.raw_mu),
                    &lg.grad_right,
                    &lg.grad_down,
                )?;
                match (cfg.feature_mode, &st.tape) {
                    (FeatureMode::Learned, Some(tape)) => {
                        let mut g = net_backward(&params, tape, &grad_f)?;
                        g.raw_mu = grad_raw_mu;
                        g.write_flat(&mut flat);
                        for (acc, v) in grad_flat.iter_mut().zip(&flat) {
                            *acc += v / chunk.len() as f64;
                        }
                    }
                    _ => {
                        grad_flat[n_params - 1] += grad_raw_mu / chunk.len() as f64;
                    }
                }
            }
            batch_loss /= chunk.len() as f64;

            let grad_norm = clip_gradients(&mut grad_flat, cfg.clip_norm);
            params.write_flat(&mut flat);
            adam_step(&mut adam, &mut flat, &grad_flat, lr);
            params.read_flat(&flat)?;

            step += 1;
            log.push(LogRecord {
                epoch,
                step,
                loss: batch_loss,
                grad_norm,
                cg_iters: batch_iters / chunk.len(),
            });
        }
        if cfg.lr_decay_every_epochs > 0 && (epoch + 1) % cfg.lr_decay_every_epochs == 0 {
            lr *= cfg.lr_decay_factor;
        }
    }
    Ok((params, log))
}
