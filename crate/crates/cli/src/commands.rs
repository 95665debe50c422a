use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::time::Instant;

use depthformer::checkpoint::Checkpoint;
use depthformer::config::{ModelConfig, Preset, RunConfig};
use depthformer::data::{
    load_manifest, load_rgb, synthetic_dataset, write_depth_png, write_pfm, write_preview_png, DepthEncoding, DepthMap,
    Sample,
};
use depthformer::eval::{evaluate, CropRule, EvalOptions};
use depthformer::model::{init_params, predict};
use depthformer::train::{fit, grad_check, load_params, TrainState, CHECKPOINT_FILE};
use depthformer::{Error, Tensor};

use crate::{BenchArgs, ConfigArgs, DataArgs, EvalArgs, GradcheckArgs, InferArgs, InitConfigArgs, TrainArgs};

pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

type CliResult<T = ()> = Result<T, CliError>;

fn usage(msg: impl Display) -> CliError {
    CliError { code: 1, message: msg.to_string() }
}

fn data(msg: impl Display) -> CliError {
    CliError { code: 2, message: msg.to_string() }
}

/// Shape and config problems are the caller's fault; divergence has its own
/// code; everything else is about the data on disk.
fn classify(e: Error) -> CliError {
    let code = match e {
        Error::Config(_) | Error::Shape(_) | Error::Json(_) | Error::Invalid { .. } => 1,
        Error::NanAbort { .. } | Error::NonFiniteGradient { .. } => 3,
        _ => 2,
    };
    CliError { code, message: e.to_string() }
}

pub fn check_threads(value: Option<&str>) -> CliResult {
    match value {
        None => Ok(()),
        Some(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(()),
            _ => Err(usage(format!("DEPTHFORMER_THREADS must be a positive integer, got `{v}`"))),
        },
    }
}

fn load_config(args: &ConfigArgs, fallback_dir: Option<&Path>, default: Option<Preset>) -> CliResult<RunConfig> {
    let from_dir = fallback_dir.map(|d| d.join(CONFIG_FILE)).filter(|p| p.is_file());
    let mut cfg = match (&args.config, from_dir, default) {
        (Some(p), _, _) => RunConfig::load(p).map_err(|e| usage(format!("cannot load config: {e}")))?,
        (None, Some(p), _) => RunConfig::load(&p).map_err(|e| usage(format!("cannot load config: {e}")))?,
        (None, None, Some(preset)) => RunConfig::preset(preset),
        (None, None, None) => return Err(usage("no --config given")),
    };
    for o in &args.overrides {
        cfg.set(o).map_err(classify)?;
    }
    Ok(cfg)
}

fn parse_size(s: &str) -> CliResult<(usize, usize)> {
    let bad = || usage(format!("size `{s}` is not HxW"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?))
}

fn parse_synthetic(s: &str) -> CliResult<usize> {
    let n = s.strip_prefix("n=").and_then(|n| n.parse::<usize>().ok());
    n.filter(|&n| n > 0).ok_or_else(|| usage(format!("--synthetic expects n=<N> with N > 0, got `{s}`")))
}

fn load_data(args: &DataArgs, cfg: &RunConfig, seed: u64) -> CliResult<Vec<Sample>> {
    match (&args.manifest, &args.synthetic) {
        (Some(m), _) => {
            let enc: DepthEncoding = args.dataset.parse().map_err(classify)?;
            load_manifest(m, enc).map_err(data)
        }
        (None, Some(arg)) => {
            let n = parse_synthetic(arg)?;
            let (h, w) = match &args.image_size {
                Some(s) => parse_size(s)?,
                None => (cfg.train.crop_h, cfg.train.crop_w),
            };
            synthetic_dataset(n, h, w, seed, cfg.model.d_min, cfg.model.d_max).map_err(classify)
        }
        (None, None) => Err(usage("give --manifest <file> or --synthetic n=<N>")),
    }
}

/// Checkpoint file plus the directory to look for a saved config in.
fn resolve_checkpoint(path: &Path) -> (PathBuf, Option<PathBuf>) {
    if path.is_dir() {
        (path.join(CHECKPOINT_FILE), Some(path.to_path_buf()))
    } else {
        (path.to_path_buf(), path.parent().map(Path::to_path_buf))
    }
}

fn load_model(ckpt: &Path, cfg_args: &ConfigArgs) -> CliResult<(RunConfig, depthformer::ParamStore<f32>)> {
    let (file, dir) = resolve_checkpoint(ckpt);
    let cfg = load_config(cfg_args, dir.as_deref(), None)?;
    let c = Checkpoint::load(&file).map_err(|e| data(format!("cannot load checkpoint: {e}")))?;
    let params = load_params(&c, &cfg.model)
        .map_err(|e| usage(format!("checkpoint does not match the configuration: {e}")))?;
    Ok((cfg, params))
}

fn create_dir(dir: &Path) -> CliResult {
    std::fs::create_dir_all(dir).map_err(|e| data(format!("cannot create {}: {e}", dir.display())))
}

pub fn init_config(a: InitConfigArgs) -> CliResult {
    let preset: Preset = a.preset.parse().map_err(classify)?;
    RunConfig::preset(preset).save(&a.out).map_err(classify)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

pub fn train(a: TrainArgs) -> CliResult {
    let mut cfg = load_config(&a.config, None, None)?;
    if let Some(s) = a.steps {
        cfg.train.total_steps = s;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    cfg.validate(cfg.train.crop_h, cfg.train.crop_w).map_err(classify)?;
    let samples = load_data(&a.data, &cfg, cfg.train.seed)?;
    create_dir(&a.out)?;
    cfg.save(&a.out.join(CONFIG_FILE)).map_err(classify)?;
    let state = if a.resume {
        let c = Checkpoint::load(&a.out.join(CHECKPOINT_FILE)).map_err(|e| data(format!("cannot resume: {e}")))?;
        TrainState::from_checkpoint(&c, &cfg.model).map_err(classify)?
    } else {
        TrainState::new(&cfg.model, cfg.train.seed)
    };
    let total = cfg.train.total_steps;
    let every = (total / 20).max(1);
    let t0 = Instant::now();
    let report = fit(state, &cfg.model, &cfg.train, &samples, Some(&a.out), |row| {
        if row.step % every == 0 || row.step == total {
            println!(
                "step {}/{total} lr={:.3e} silog={:.5} chamfer={:.5} total={:.5} ({:.1}s)",
                row.step,
                row.lr,
                row.loss.silog,
                row.loss.chamfer,
                row.loss.total,
                t0.elapsed().as_secs_f64()
            );
        }
    })
    .map_err(classify)?;
    match report.log.last() {
        Some(r) => println!(
            "final step {}: silog={} chamfer={} total={} valid_pixels={}",
            r.step, r.loss.silog, r.loss.chamfer, r.loss.total, r.loss.n_valid_pixels
        ),
        None => println!("no steps run"),
    }
    println!("checkpoint: {}", a.out.join(CHECKPOINT_FILE).display());
    Ok(())
}

pub fn eval(a: EvalArgs) -> CliResult {
    let (cfg, params) = load_model(&a.checkpoint, &a.config)?;
    let samples = load_data(&a.data, &cfg, a.seed)?;
    let crop: CropRule = a.crop.parse().map_err(classify)?;
    let chunk = if a.data.manifest.is_some() { 1 } else { 8 };
    let opts = EvalOptions { crop, cap: a.cap, chunk };
    let result = evaluate(&params, &cfg.model, &samples, &opts).map_err(classify)?;

    create_dir(&a.out)?;
    let path = a.out.join("metrics.csv");
    let write = || -> Result<(), Box<dyn std::error::Error>> {
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["image", "rmse", "rel", "delta1", "delta2", "delta3", "n_pixels"])?;
        let rows = result.per_image.iter().map(|(id, r)| (id.as_str(), r));
        for (id, r) in rows.chain(std::iter::once(("aggregate", &result.aggregate))) {
            w.write_record([
                id.to_string(),
                r.rmse.to_string(),
                r.rel.to_string(),
                r.delta1.to_string(),
                r.delta2.to_string(),
                r.delta3.to_string(),
                r.n_pixels.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    };
    write().map_err(|e| data(format!("cannot write {}: {e}", path.display())))?;

    println!("{:<28} {:>9} {:>9} {:>8} {:>8} {:>8}", "image", "RMSE", "REL", "δ1", "δ2", "δ3");
    for (id, r) in &result.per_image {
        let short = if id.len() > 28 { &id[id.len() - 28..] } else { id.as_str() };
        println!("{short:<28} {:>9.4} {:>9.4} {:>8.4} {:>8.4} {:>8.4}", r.rmse, r.rel, r.delta1, r.delta2, r.delta3);
    }
    let m = &result.aggregate;
    println!("{:<28} {:>9.4} {:>9.4} {:>8.4} {:>8.4} {:>8.4}", "mean", m.rmse, m.rel, m.delta1, m.delta2, m.delta3);
    println!("metrics: {}", path.display());
    Ok(())
}

/// Edge-replicates a `[3, h, w]` image to `[3, ph, pw]`.
fn pad_image(img: &Tensor<f32>, ph: usize, pw: usize) -> Tensor<f32> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let src = img.data();
    let mut out = Vec::with_capacity(3 * ph * pw);
    for c in 0..3 {
        for y in 0..ph {
            let row = (c * h + y.min(h - 1)) * w;
            out.extend((0..pw).map(|x| src[row + x.min(w - 1)]));
        }
    }
    Tensor::from_vec(&[3, ph, pw], out).expect("sizes match")
}

pub fn infer(a: InferArgs) -> CliResult {
    let (cfg, params) = load_model(&a.checkpoint, &a.config)?;
    let enc: DepthEncoding = a.dataset.parse().map_err(classify)?;
    create_dir(&a.out)?;
    for path in &a.images {
        let img = load_rgb(path).map_err(data)?;
        let (h, w) = (img.shape()[1], img.shape()[2]);
        let (ph, pw) = (h.div_ceil(32) * 32, w.div_ceil(32) * 32);
        if (ph, pw) != (h, w) && !a.pad {
            return Err(usage(format!(
                "{}: {h}x{w} is not divisible by 32; pass --pad to pad to {ph}x{pw} and crop the result back",
                path.display()
            )));
        }
        let input = if a.pad { pad_image(&img, ph, pw) } else { img };
        let input = input.reshape(&[1, 3, ph, pw]).expect("same length");
        let pred = predict(&params, &cfg.model, &input).map_err(classify)?;
        let full = pred.depth.data();
        let depth: Vec<f64> = (0..h).flat_map(|y| (0..w).map(move |x| full[y * pw + x] as f64)).collect();

        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
        let png = a.out.join(format!("{stem}_depth.png"));
        let map = DepthMap::from_values(h, w, depth.clone(), enc.cap()).map_err(classify)?;
        write_depth_png(&png, &map, enc).map_err(data)?;
        if a.pfm {
            let vals: Vec<f32> = depth.iter().map(|&v| v as f32).collect();
            write_pfm(&a.out.join(format!("{stem}_depth.pfm")), h, w, &vals).map_err(data)?;
        }
        if a.preview {
            write_preview_png(&a.out.join(format!("{stem}_preview.png")), &depth, h, w, cfg.model.d_min, cfg.model.d_max)
                .map_err(data)?;
        }
        let (lo, hi) = depth.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), &v| (l.min(v), u.max(v)));
        println!("{} -> {} ({h}x{w}, depth {lo:.3}..{hi:.3} m)", path.display(), png.display());
    }
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> CliResult {
    let cfg = load_config(&a.config, None, Some(Preset::Tiny))?;
    let t0 = Instant::now();
    let report = grad_check(&cfg.model, &cfg.train, a.size, a.samples, a.step, a.tol, a.seed).map_err(classify)?;
    println!("{report} ({:.1}s)", t0.elapsed().as_secs_f64());
    if report.passed() {
        println!("gradient check passed");
        Ok(())
    } else {
        let worst = report.worst.as_deref().unwrap_or("?");
        Err(CliError { code: 4, message: format!("gradient check failed: worst entry {worst}") })
    }
}

pub fn bench(a: BenchArgs) -> CliResult {
    if a.iters == 0 {
        return Err(usage("--iters must be at least 1"));
    }
    let (h, w) = parse_size(&a.size)?;
    println!("{:<8} {:>14} {:>14}", "preset", "parameters", "forward_ms");
    for name in &a.presets {
        let model = ModelConfig::by_name(name).map_err(classify)?;
        let problems = model.violations(h, w);
        if !problems.is_empty() {
            return Err(usage(problems.join("; ")));
        }
        let params = init_params::<f32>(&model, a.seed);
        let n = h * w;
        let input = Tensor::from_vec(&[1, 3, h, w], (0..3 * n).map(|i| ((i * 7919) % 1000) as f32 / 1000.0).collect())
            .expect("sizes match");
        let mut total = 0.0;
        for _ in 0..a.iters {
            let t = Instant::now();
            predict(&params, &model, &input).map_err(classify)?;
            total += t.elapsed().as_secs_f64();
        }
        println!("{name:<8} {:>14} {:>14.2}", params.num_scalars(), 1e3 * total / a.iters as f64);
    }
    Ok(())
}
