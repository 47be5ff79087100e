use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::config::{Precision, RunConfig};
use super::{Cli, Command, EXIT_OK, EXIT_VERIFY};
use crate::attention::{vf_forward, VfMode, VfParams, NAIVE_MAX_HW};
use crate::autograd::Fault;
use crate::error::{Error, Result};
use crate::network::{build_network, forward, summarize, REFERENCE_GFLOPS, REFERENCE_PARAMS};
use crate::nn::bilinear_resize;
use crate::tensor::{Float, Init, Tensor};
use crate::train::data::{load_dataset_with, read_image, Split};
use crate::train::trainer::{evaluate, train_loop, METRICS_HEADER, THRESHOLD};
use crate::verify::{gradcheck, GRAD_TOLERANCE};
use crate::weights::{load_weights, save_weights};

pub const WEIGHTS_FILE: &str = "weights.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const RESOLVED_FILE: &str = "config.resolved";

pub(super) fn dispatch(cli: &Cli, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> Result<i32> {
    let run_dir = match &cli.command {
        Command::Eval(a) => a.run.as_deref(),
        Command::Predict(a) => a.run.as_deref(),
        _ => None,
    };
    let cfg = resolve(cli, run_dir)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {} worker threads: {e}", cfg.threads)))?;
    pool.install(|| match &cli.command {
        Command::Train(_) => by_precision!(cfg.precision, cmd_train(&cfg, out)),
        Command::Eval(a) => {
            let weights = weights_path(a.weights.as_deref(), a.run.as_deref())?;
            by_precision!(cfg.precision, cmd_eval(&cfg, &weights, a.split, out))
        }
        Command::Predict(a) => {
            let weights = weights_path(a.weights.as_deref(), a.run.as_deref())?;
            by_precision!(cfg.precision, cmd_predict(&cfg, &weights, &a.input, &a.output, out))
        }
        Command::Summary => cmd_summary(&cfg, out),
        Command::BenchAttn(a) => cmd_bench(&cfg, a, out),
        Command::Gradcheck(a) => cmd_gradcheck(&cfg, a, out, err),
    })
}

macro_rules! by_precision {
    ($p:expr, $name:ident($($arg:expr),*)) => {
        match $p {
            Precision::F32 => $name::<f32>($($arg),*),
            Precision::F64 => $name::<f64>($($arg),*),
        }
    };
}
use by_precision;

/// Defaults, then the run's snapshot, the config file, `--set` pairs and
/// finally the dedicated flags; later sources win.
fn resolve(cli: &Cli, run_dir: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(dir) = run_dir {
        let path = dir.join(RESOLVED_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        cfg.apply_text(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    }
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        cfg.apply_text(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    }
    for pair in &cli.overrides {
        cfg.apply_override(pair)?;
    }
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    if let Some(p) = cli.precision {
        cfg.precision = p;
    }
    match &cli.command {
        Command::Train(a) => {
            if let Some(d) = &a.data {
                cfg.data_root = Some(d.clone());
            }
            if let Some(d) = &a.run_dir {
                cfg.run_dir = d.clone();
            }
            if let Some(e) = a.epochs {
                cfg.train.epochs = e;
            }
            if let Some(b) = a.batch_size {
                cfg.train.batch_size = b;
            }
        }
        Command::Eval(a) => {
            if let Some(d) = &a.data {
                cfg.data_root = Some(d.clone());
            }
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn weights_path(explicit: Option<&Path>, run: Option<&Path>) -> Result<PathBuf> {
    match (explicit, run) {
        (Some(p), _) => Ok(p.to_path_buf()),
        (None, Some(dir)) => Ok(dir.join(WEIGHTS_FILE)),
        (None, None) => Err(Error::Config("pass --weights or --run".into())),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn io_out(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn cmd_train<T: Float>(cfg: &RunConfig, out: &mut (dyn Write + Send)) -> Result<i32> {
    let root = cfg.resolve_data_root()?;
    let data = load_dataset_with::<T>(&root, cfg.train_ratio, cfg.train.seed, cfg.net.input_size, cfg.norm.as_ref())?;
    fs::create_dir_all(&cfg.run_dir).map_err(|e| Error::io(&cfg.run_dir, e))?;
    let mut resolved = cfg.clone();
    resolved.data_root = Some(root);
    resolved.norm = Some(data.norm.clone());
    let resolved_path = cfg.run_dir.join(RESOLVED_FILE);
    fs::write(&resolved_path, resolved.render()).map_err(|e| Error::io(&resolved_path, e))?;

    let metrics_path = cfg.run_dir.join(METRICS_FILE);
    let mut metrics = create(&metrics_path)?;
    writeln!(metrics, "{METRICS_HEADER}").map_err(|e| Error::io(&metrics_path, e))?;
    let init = build_network::<T>(&cfg.net, cfg.train.seed)?;
    let outcome = train_loop(&cfg.net, &cfg.train, init, &data.train, &data.val, |row, _| {
        writeln!(metrics, "{}", row.csv_row()).map_err(|e| Error::io(&metrics_path, e))?;
        writeln!(
            out,
            "epoch={} lr={:e} train_loss={:.6} val_miou={:.4}",
            row.epoch, row.lr, row.train_loss, row.val.miou
        )
        .map_err(io_out)
    })?;
    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
    let weights_path = cfg.run_dir.join(WEIGHTS_FILE);
    save_weights(&outcome.best, &weights_path)?;
    let best_miou = outcome.log.get(outcome.best_epoch).map_or(0.0, |r| r.val.miou);
    writeln!(
        out,
        "best_epoch={} best_val_miou={best_miou:.4} steps={} run_dir={}",
        outcome.best_epoch,
        outcome.steps,
        cfg.run_dir.display()
    )
    .map_err(io_out)?;
    Ok(EXIT_OK)
}

fn cmd_eval<T: Float>(cfg: &RunConfig, weights: &Path, split: Split, out: &mut (dyn Write + Send)) -> Result<i32> {
    let w = load_weights::<T>(weights)?;
    let root = cfg.resolve_data_root()?;
    let data = load_dataset_with::<T>(&root, cfg.train_ratio, cfg.train.seed, cfg.net.input_size, cfg.norm.as_ref())?;
    let samples = data.split(split);
    if samples.is_empty() {
        return Err(Error::Dataset(format!("the {split} split of {} is empty", root.display())));
    }
    let report = evaluate(&w, &cfg.net, samples)?;
    writeln!(out, "split={split} images={}", samples.len()).map_err(io_out)?;
    for (name, v) in report.named() {
        writeln!(out, "{name}={:.2}", 100.0 * v).map_err(io_out)?;
    }
    Ok(EXIT_OK)
}

fn cmd_predict<T: Float>(cfg: &RunConfig, weights: &Path, input: &Path, output: &Path, out: &mut (dyn Write + Send)) -> Result<i32> {
    let w = load_weights::<T>(weights)?;
    let norm = cfg.norm.as_ref().ok_or_else(|| {
        Error::Config("prediction needs norm_mean and norm_std; pass --run or a run's config.resolved".into())
    })?;
    let original = read_image::<T>(input, None)?;
    let (_, h, wd) = original.dims3()?;
    let size = cfg.net.input_size;
    let x = norm.apply(&read_image::<T>(input, Some(size))?)?;
    let prob = forward(&w, &cfg.net, &x.reshape(&[1, 3, size, size])?)?;
    let prob = if (h, wd) == (size, size) { prob } else { bilinear_resize(&prob, h, wd)? };
    let bytes: Vec<u8> = prob.data().iter().map(|&p| if p.f64() > THRESHOLD { 255 } else { 0 }).collect();
    let fg = bytes.iter().filter(|&&b| b == 255).count();
    let img = image::GrayImage::from_raw(wd as u32, h as u32, bytes)
        .ok_or_else(|| Error::Contract("mask buffer does not match its dimensions".into()))?;
    img.save(output)
        .map_err(|e| Error::io(output, std::io::Error::other(e.to_string())))?;
    writeln!(out, "output={} width={wd} height={h} foreground_pixels={fg}", output.display()).map_err(io_out)?;
    Ok(EXIT_OK)
}

fn cmd_summary(cfg: &RunConfig, out: &mut (dyn Write + Send)) -> Result<i32> {
    let w = build_network::<f32>(&cfg.net, cfg.train.seed)?;
    let s = summarize(&cfg.net, &w)?;
    let mut lines = vec![
        format!("params={}", s.total_params),
        format!("flops={}", s.flops),
        format!("gflops={:.6}", s.gflops()),
        format!("input_size={}", cfg.net.input_size),
        format!("reference_params={}", REFERENCE_PARAMS),
        format!("reference_gflops={REFERENCE_GFLOPS}"),
        "stage,params,flops".to_string(),
    ];
    lines.extend(s.stages.iter().map(|st| format!("{},{},{}", st.name, st.params, st.flops)));
    for l in lines {
        writeln!(out, "{l}").map_err(io_out)?;
    }
    Ok(EXIT_OK)
}

/// Median of the samples, which must be non-empty.
fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn cmd_bench(cfg: &RunConfig, a: &super::BenchArgs, out: &mut (dyn Write + Send)) -> Result<i32> {
    if a.repeats < 3 {
        return Err(Error::Config(format!("repeats must be >= 3, got {}", a.repeats)));
    }
    if a.sizes.is_empty() || a.channels == 0 || a.heads == 0 || a.d == 0 {
        return Err(Error::Config("sizes, channels, heads and d must be non-empty and positive".into()));
    }
    let mut sides = Vec::with_capacity(a.sizes.len());
    for &hw in &a.sizes {
        let side = (hw as f64).sqrt().round() as usize;
        if side == 0 || side * side != hw {
            return Err(Error::Config(format!("size {hw} is not a positive perfect square")));
        }
        if a.mode == VfMode::Naive && hw > NAIVE_MAX_HW {
            return Err(Error::ResourceLimit(format!(
                "naive mode materialises an HW×HW matrix and is limited to HW <= {NAIVE_MAX_HW}, got {hw}"
            )));
        }
        sides.push(side);
    }
    let params = VfParams::<f32>::init(a.channels, a.heads, a.d, cfg.train.seed)?;
    let mut csv = csv::Writer::from_writer(&mut *out);
    let csv_err = |e: csv::Error| Error::io("<stdout>", std::io::Error::other(e.to_string()));
    csv.write_record(["mode", "hw", "channels", "heads", "d", "median_ms", "flops"]).map_err(csv_err)?;
    for (&hw, &side) in a.sizes.iter().zip(&sides) {
        let x = Tensor::<f32>::random(&[a.channels, side, side], cfg.train.seed.wrapping_add(hw as u64), Init::Normal(1.0))?;
        vf_forward(&x, &params, a.mode)?;
        let mut times = Vec::with_capacity(a.repeats);
        for _ in 0..a.repeats {
            let t = Instant::now();
            std::hint::black_box(vf_forward(&x, &params, a.mode)?);
            times.push(t.elapsed().as_secs_f64() * 1e3);
        }
        let flops = crate::network::vf_flops(a.channels, side, side, a.heads, a.d, a.mode);
        csv.write_record([
            a.mode.to_string(),
            hw.to_string(),
            a.channels.to_string(),
            a.heads.to_string(),
            a.d.to_string(),
            format!("{:.4}", median(times)),
            flops.to_string(),
        ])
        .map_err(csv_err)?;
    }
    csv.flush().map_err(io_out)?;
    Ok(EXIT_OK)
}

fn cmd_gradcheck(cfg: &RunConfig, a: &super::GradcheckArgs, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> Result<i32> {
    if !(a.eps > 0.0 && a.eps.is_finite()) {
        return Err(Error::Config(format!("eps must be positive, got {}", a.eps)));
    }
    let fault = if a.fault { Fault::SigmoidSlope } else { Fault::None };
    let report = gradcheck(a.target, a.eps, cfg.train.seed, fault)?;
    for g in &report.groups {
        writeln!(out, "group={} coords={} max_rel_error={:.3e}", g.name, g.coords, g.max_rel_error).map_err(io_out)?;
    }
    let worst = report.worst().map_or("-", |g| g.name.as_str());
    let status = if report.passed() { "pass" } else { "fail" };
    writeln!(
        out,
        "target={} eps={:e} max_rel_error={:.3e} tolerance={GRAD_TOLERANCE:e} worst={worst} status={status}",
        report.target,
        report.eps,
        report.max_rel_error()
    )
    .map_err(io_out)?;
    if report.passed() {
        Ok(EXIT_OK)
    } else {
        let _ = writeln!(
            err,
            "gradient check failed: {worst} has relative error {:.3e} > {GRAD_TOLERANCE:e}",
            report.max_rel_error()
        );
        Ok(EXIT_VERIFY)
    }
}
