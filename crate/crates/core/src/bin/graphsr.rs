//! Command-line surface for the graph-regularised super-resolution pipeline.
//!
//! Subcommands: `solve`, `train`, `eval`, `downsample`, `gradcheck`,
//! `dump-graph`. Exit codes: 0 success, 2 bad arguments, 3 I/O failure,
//! 4 numerical failure, 5 gradcheck bound exceeded.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use graphsr::features::{assemble_input, colour_features, net_forward, ConvNetParams};
use graphsr::graph::{compute_affinities, AffinityScale};
use graphsr::image::{bicubic_upsample, masked_mae, masked_mse, GuideImage, SourceImage, TargetImage};
use graphsr::io;
use graphsr::solver::{default_max_iter, forward_solve, DEFAULT_REL_TOL};
use graphsr::train::{train, FeatureMode, LossKind, TrainConfig, TrainSample};
use graphsr::Error;

const EXIT_BAD_ARGS: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;
const EXIT_GRADCHECK: u8 = 5;

#[derive(Parser)]
#[command(name = "graphsr", version, about = "Guided super-resolution via learned graph regularisation")]
struct Cli {
    /// Plain-text config file with flat `key = value` entries mirroring
    /// flags. Precedence: flag > config file > default.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Upsample a low-resolution source guided by a high-resolution image.
    Solve(SolveArgs),
    /// Train the feature extractor and affinity scale on a dataset split.
    Train(TrainArgs),
    /// Evaluate masked MSE/MAE over a dataset split.
    Eval(EvalArgs),
    /// Synthesize a low-resolution source from a high-resolution depth map.
    Downsample(DownsampleArgs),
    /// Finite-difference validation of the optimisation-layer gradients.
    Gradcheck(GradcheckArgs),
    /// Write the per-pixel total incident affinity as a PFM image.
    DumpGraph(DumpGraphArgs),
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long)]
    guide: PathBuf,
    #[arg(long)]
    source: PathBuf,
    /// Optional source validity mask (PGM, 0 = invalid).
    #[arg(long)]
    source_mask: Option<PathBuf>,
    #[arg(long)]
    scale: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    /// Feature mode: `colour` or `learned`.
    #[arg(long, default_value = "colour")]
    features: String,
    /// Parameter blob for `--features learned`.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Multiply raw source units by this factor at load time.
    #[arg(long)]
    depth_scale: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    /// Also write the total incident affinity per pixel as a PFM.
    #[arg(long)]
    dump_graph: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory: `{id}.guide.ppm`, `{id}.depth.pfm`,
    /// optional `{id}.mask.pgm`.
    #[arg(long)]
    dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    scale: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_decay_factor: Option<f64>,
    #[arg(long)]
    lr_decay_every: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// `l1` or `mse`.
    #[arg(long)]
    loss: Option<String>,
    /// `colour` or `learned`.
    #[arg(long)]
    features: Option<String>,
    #[arg(long)]
    rotate: bool,
    #[arg(long)]
    no_flip: bool,
    /// Write the per-step log to this file as well as stdout.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    dir: PathBuf,
    #[arg(long)]
    scale: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long, default_value = "colour")]
    features: String,
    #[arg(long)]
    params: Option<PathBuf>,
}

#[derive(Args)]
struct DownsampleArgs {
    /// High-resolution depth input (PFM or PGM).
    #[arg(long)]
    input: PathBuf,
    /// Optional validity mask for the input.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    scale: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    out_mask: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    size: usize,
    #[arg(long)]
    scale: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Maximum allowed relative error.
    #[arg(long, default_value_t = 1e-5)]
    bound: f64,
}

#[derive(Args)]
struct DumpGraphArgs {
    #[arg(long)]
    guide: PathBuf,
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    scale: Option<usize>,
    #[arg(long, default_value = "colour")]
    features: String,
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Flat `key = value` config file; `#` starts a comment.
fn load_config(path: &Path) -> Result<HashMap<String, String>, Error> {
    let text = std::fs::read_to_string(path)?;
    let mut map = HashMap::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::InvalidArgument(format!(
                "{}:{}: expected key = value",
                path.display(),
                ln + 1
            )));
        };
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

struct Settings {
    config: HashMap<String, String>,
}

impl Settings {
    fn get<T: std::str::FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T, Error> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.config.get(key) {
            Some(s) => s
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("config key '{key}': bad value '{s}'"))),
            None => Ok(default),
        }
    }
}

fn warn_unusual_scale(k: usize) {
    if !matches!(k, 1 | 4 | 8 | 16) {
        eprintln!("warning: scale {k} is outside the usual set {{1, 4, 8, 16}}");
    }
}

fn parse_feature_mode(s: &str) -> Result<FeatureMode, Error> {
    match s {
        "colour" | "color" => Ok(FeatureMode::Colour),
        "learned" => Ok(FeatureMode::Learned),
        other => Err(Error::InvalidArgument(format!(
            "unknown feature mode '{other}' (expected colour|learned)"
        ))),
    }
}

/// Load depth by extension: `.pfm` float or `.pgm` 16-bit integer.
fn load_depth(path: &Path, depth_scale: f64) -> Result<SourceImage, Error> {
    let is_pfm = path
        .extension()
        .map_or(false, |e| e.eq_ignore_ascii_case("pfm"));
    let mut s = if is_pfm {
        let t = io::load_depth_pfm(path)?;
        SourceImage::new(t.height, t.width, t.data, t.valid)?
    } else {
        io::load_depth_pgm(path)?
    };
    if depth_scale != 1.0 {
        for v in s.data.iter_mut() {
            *v *= depth_scale;
        }
    }
    Ok(s)
}

fn apply_mask(s: &mut SourceImage, mask_path: &Path) -> Result<(), Error> {
    let (h, w, m) = io::load_mask_pgm(mask_path)?;
    if h != s.height || w != s.width {
        return Err(Error::DimensionMismatch("mask size".into()));
    }
    for (v, ok) in s.valid.iter_mut().zip(&m) {
        *v = *v && *ok;
    }
    Ok(())
}

fn build_features(
    mode: FeatureMode,
    params_path: Option<&Path>,
    guide: &GuideImage,
    s_up: &TargetImage,
) -> Result<(graphsr::image::FeatureMap, f64), Error> {
    match mode {
        FeatureMode::Colour => Ok((colour_features(guide, s_up)?, 0.0)),
        FeatureMode::Learned => {
            let path = params_path.ok_or_else(|| {
                Error::InvalidArgument("--features learned requires --params".into())
            })?;
            let params = ConvNetParams::load(path)?;
            let input = assemble_input(guide, s_up)?;
            let (f, _) = net_forward(&params, &input)?;
            Ok((f, params.raw_mu))
        }
    }
}

fn cmd_solve(a: SolveArgs, st: &Settings) -> Result<(), Error> {
    let k = st.get(a.scale, "scale", 8)?;
    let lambda = st.get(a.lambda, "lambda", 0.1)?;
    let depth_scale = st.get(a.depth_scale, "depth_scale", 1.0)?;
    warn_unusual_scale(k);
    let guide = io::load_guide_ppm(&a.guide)?;
    let mut source = load_depth(&a.source, depth_scale)?;
    if let Some(m) = &a.source_mask {
        apply_mask(&mut source, m)?;
    }
    if guide.height != source.height * k || guide.width != source.width * k {
        return Err(Error::DimensionMismatch(format!(
            "guide {}x{} vs source {}x{} at scale {k}",
            guide.height, guide.width, source.height, source.width
        )));
    }
    let tol = st.get(a.tol, "tol", DEFAULT_REL_TOL)?;
    let max_iter = st.get(a.max_iter, "max_iter", default_max_iter(guide.height * guide.width))?;

    let s_up = bicubic_upsample(&source, k)?;
    let mode = parse_feature_mode(&a.features)?;
    let (features, raw_mu) = build_features(mode, a.params.as_deref(), &guide, &s_up)?;
    let graph = compute_affinities(&features, AffinityScale::new(raw_mu))?;

    // target-side validity comes from expanding the source mask
    let mut tvalid = vec![false; guide.height * guide.width];
    for i in 0..guide.height {
        for j in 0..guide.width {
            tvalid[i * guide.width + j] = source.valid[(i / k) * source.width + j / k];
        }
    }
    let down = graphsr::build_box_downsampler(guide.height, guide.width, k, Some(&tvalid))?;
    let (y, report) = forward_solve(&graph, &down, &source, lambda, Some(&s_up), tol, max_iter)?;

    io::save_pfm(&a.out, y.height, y.width, &y.data)?;
    if let Some(p) = &a.dump_graph {
        io::save_pfm(p, graph.height, graph.width, &graph.incident_weight_image())?;
    }
    println!(
        "cg: iterations={} residual={:.3e} converged={}",
        report.iterations, report.final_residual_norm, report.converged
    );
    Ok(())
}

/// Dataset ids from `{id}.guide.ppm` files in a directory.
fn dataset_ids(dir: &Path) -> Result<Vec<String>, Error> {
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_suffix(".guide.ppm") {
            ids.push(id.to_string());
        }
    }
    ids.sort();
    if ids.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no '*.guide.ppm' files in {}",
            dir.display()
        )));
    }
    Ok(ids)
}

fn load_dataset(dir: &Path) -> Result<Vec<TrainSample>, Error> {
    let mut samples = Vec::new();
    for id in dataset_ids(dir)? {
        let guide = io::load_guide_ppm(&dir.join(format!("{id}.guide.ppm")))?;
        let mut gt = io::load_depth_pfm(&dir.join(format!("{id}.depth.pfm")))?;
        let mask_path = dir.join(format!("{id}.mask.pgm"));
        if mask_path.exists() {
            let (h, w, m) = io::load_mask_pgm(&mask_path)?;
            if h != gt.height || w != gt.width {
                return Err(Error::DimensionMismatch(format!("{id}: mask size")));
            }
            for (v, ok) in gt.valid.iter_mut().zip(&m) {
                *v = *v && *ok;
            }
        }
        samples.push(TrainSample { guide, gt });
    }
    Ok(samples)
}

fn cmd_train(a: TrainArgs, st: &Settings) -> Result<(), Error> {
    let defaults = TrainConfig::default();
    let loss = match st.get(a.loss, "loss", "l1".to_string())?.as_str() {
        "l1" => LossKind::L1,
        "mse" => LossKind::Mse,
        other => return Err(Error::InvalidArgument(format!("unknown loss '{other}'"))),
    };
    let feature_mode = parse_feature_mode(&st.get(a.features, "features", "learned".to_string())?)?;
    let cfg = TrainConfig {
        scale: st.get(a.scale, "scale", defaults.scale)?,
        lambda: st.get(a.lambda, "lambda", defaults.lambda)?,
        loss,
        feature_mode,
        learning_rate: st.get(a.lr, "lr", defaults.learning_rate)?,
        lr_decay_factor: st.get(a.lr_decay_factor, "lr_decay_factor", defaults.lr_decay_factor)?,
        lr_decay_every_epochs: st.get(a.lr_decay_every, "lr_decay_every", defaults.lr_decay_every_epochs)?,
        batch_size: st.get(a.batch_size, "batch_size", defaults.batch_size)?,
        epochs: st.get(a.epochs, "epochs", defaults.epochs)?,
        clip_norm: st.get(a.clip_norm, "clip_norm", defaults.clip_norm)?,
        patch_size: st.get(a.patch_size, "patch_size", defaults.patch_size)?,
        flip: !a.no_flip,
        rotate: a.rotate,
        seed: st.get(a.seed, "seed", defaults.seed)?,
        cg_rel_tol: defaults.cg_rel_tol,
        cg_max_iter: 0,
    };
    warn_unusual_scale(cfg.scale);
    let dataset = load_dataset(&a.dir)?;
    let (params, log) = train(&cfg, &dataset)?;
    let mut log_text = String::new();
    for rec in &log {
        let line = rec.to_string();
        println!("{line}");
        log_text.push_str(&line);
        log_text.push('\n');
    }
    if let Some(p) = &a.log {
        std::fs::write(p, log_text)?;
    }
    params.save(&a.out)?;
    println!("saved parameters to {}", a.out.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs, st: &Settings) -> Result<(), Error> {
    let k = st.get(a.scale, "scale", 8)?;
    let lambda = st.get(a.lambda, "lambda", 0.1)?;
    let tol = st.get(a.tol, "tol", DEFAULT_REL_TOL)?;
    warn_unusual_scale(k);
    let mode = parse_feature_mode(&a.features)?;
    let dataset = load_dataset(&a.dir)?;
    let ids = dataset_ids(&a.dir)?;
    let mut sum_mse = 0.0;
    let mut sum_mae = 0.0;
    for (id, sample) in ids.iter().zip(&dataset) {
        let down = graphsr::build_box_downsampler(sample.gt.height, sample.gt.width, k, Some(&sample.gt.valid))?;
        let source = down.downsample_target(&sample.gt.data)?;
        let s_up = bicubic_upsample(&source, k)?;
        let (features, raw_mu) = build_features(mode, a.params.as_deref(), &sample.guide, &s_up)?;
        let graph = compute_affinities(&features, AffinityScale::new(raw_mu))?;
        let max_iter = default_max_iter(sample.gt.height * sample.gt.width);
        let (y, _) = forward_solve(&graph, &down, &source, lambda, Some(&s_up), tol, max_iter)?;
        let mse = masked_mse(&y, &sample.gt)?;
        let mae = masked_mae(&y, &sample.gt)?;
        println!("{id}: x{k} MSE={mse:.6} MAE={mae:.6}");
        sum_mse += mse;
        sum_mae += mae;
    }
    let n = dataset.len() as f64;
    println!("mean: x{k} MSE={:.6} MAE={:.6}", sum_mse / n, sum_mae / n);
    Ok(())
}

fn cmd_downsample(a: DownsampleArgs, st: &Settings) -> Result<(), Error> {
    let k = st.get(a.scale, "scale", 8)?;
    let mut hi = load_depth(&a.input, 1.0)?;
    if let Some(m) = &a.mask {
        apply_mask(&mut hi, m)?;
    }
    let down = graphsr::build_box_downsampler(hi.height, hi.width, k, Some(&hi.valid))?;
    let s = down.downsample_target(&hi.data)?;
    io::save_pfm(&a.out, s.height, s.width, &s.data)?;
    if let Some(p) = &a.out_mask {
        io::save_mask_pgm(p, s.height, s.width, &s.valid)?;
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs, st: &Settings) -> Result<bool, Error> {
    let k = st.get(a.scale, "scale", 2)?;
    let lambda = st.get(a.lambda, "lambda", 0.1)?;
    let rep = graphsr::layer_gradcheck(a.seed, a.size, a.size, k, lambda)?;
    println!(
        "gradcheck: edges={:.3e} raw_mu={:.3e} source={:.3e} bound={:.3e}",
        rep.max_rel_err_edges, rep.max_rel_err_mu, rep.max_rel_err_source, a.bound
    );
    Ok(rep.passes(a.bound))
}

fn cmd_dump_graph(a: DumpGraphArgs, st: &Settings) -> Result<(), Error> {
    let k = st.get(a.scale, "scale", 8)?;
    let guide = io::load_guide_ppm(&a.guide)?;
    let source = load_depth(&a.source, 1.0)?;
    let s_up = bicubic_upsample(&source, k)?;
    let mode = parse_feature_mode(&a.features)?;
    let (features, raw_mu) = build_features(mode, a.params.as_deref(), &guide, &s_up)?;
    let graph = compute_affinities(&features, AffinityScale::new(raw_mu))?;
    io::save_pfm(&a.out, graph.height, graph.width, &graph.incident_weight_image())?;
    Ok(())
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Io(_)
        | Error::MalformedHeader(_)
        | Error::TruncatedPayload { .. }
        | Error::UnsupportedMaxval(_)
        | Error::InvalidParamsFile(_) => EXIT_IO,
        Error::NumericalBreakdown(_) | Error::Divergence | Error::NonFinite(_) => EXIT_NUMERICAL,
        _ => EXIT_BAD_ARGS,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config = match &cli.config {
        Some(p) => match load_config(p) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(EXIT_IO);
            }
        },
        None => HashMap::new(),
    };
    let st = Settings { config };
    let outcome = match cli.command {
        Command::Solve(a) => cmd_solve(a, &st),
        Command::Train(a) => cmd_train(a, &st),
        Command::Eval(a) => cmd_eval(a, &st),
        Command::Downsample(a) => cmd_downsample(a, &st),
        Command::DumpGraph(a) => cmd_dump_graph(a, &st),
        Command::Gradcheck(a) => {
            return match cmd_gradcheck(a, &st) {
                Ok(true) => ExitCode::SUCCESS,
                Ok(false) => ExitCode::from(EXIT_GRADCHECK),
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(exit_code_for(&e))
                }
            };
        }
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
