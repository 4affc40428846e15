use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use fanet_core::bench::{run_bench, BenchConfig};
use fanet_core::degrade::{make_pairs, DegradeParams, DepthMode};
use fanet_core::fanet::{count_flops, load_weights, save_weights, NetworkConfig, NetworkWeights, PARAM_BUDGET};
use fanet_core::imageio::{read_image, write_image, ImageFormat};
use fanet_core::metrics::{mse, ImageQuality, QualityReport};
use fanet_core::trainer::{alpha_sweep, default_alphas, desk_run, DeskConfig, TrainConfig};
use fanet_core::{Error, Result, Scalar, Tensor};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::{
    BenchArgs, Cli, Command, DegradeArgs, DepthModeArg, EnhanceArgs, FormatArg, MetricsArgs, ParamsArgs, SweepArgs,
    TrainArgs,
};

pub fn run(cli: &Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Enhance(a) => enhance(cli, a),
        Command::Metrics(a) => metrics(cli, a),
        Command::Train(a) => train(cli, a),
        Command::Bench(a) => bench(cli, a),
        Command::Degrade(a) => degrade(cli, a),
        Command::Params(a) => params(cli, a),
        Command::Sweep(a) => sweep(cli, a),
    }
}

fn print_json(v: &impl Serialize) -> Result<()> {
    let s = serde_json::to_string_pretty(v).map_err(std::io::Error::from)?;
    println!("{s}");
    Ok(())
}

fn weights_or_default(path: Option<&Path>, seed: u64) -> Result<NetworkWeights<f32>> {
    match path {
        Some(p) => load_weights(p),
        None => NetworkWeights::seeded(NetworkConfig::default(), seed),
    }
}

fn enhance_one<T: Scalar>(weights: &NetworkWeights<T>, input: &Path, out_dir: &Path) -> Result<PathBuf> {
    let image: Tensor<T> = read_image(input)?;
    let out = weights.forward(&image)?;
    let format = ImageFormat::from_path(input).unwrap_or(ImageFormat::Png);
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    let dest = out_dir.join(format!("{stem}.{}", format.extension()));
    write_image(&dest, &out)?;
    Ok(dest)
}

fn enhance_all<T: Scalar>(cli: &Cli, weights: &NetworkWeights<T>, a: &EnhanceArgs) -> Vec<(PathBuf, Result<PathBuf>)> {
    if cli.strict {
        // Sequential so the first failure stops the batch.
        let mut done = Vec::new();
        for input in &a.inputs {
            let r = enhance_one(weights, input, &a.out_dir);
            let failed = r.is_err();
            done.push((input.clone(), r));
            if failed {
                break;
            }
        }
        done
    } else {
        a.inputs
            .par_iter()
            .map(|input| (input.clone(), enhance_one(weights, input, &a.out_dir)))
            .collect()
    }
}

fn enhance(cli: &Cli, a: &EnhanceArgs) -> Result<ExitCode> {
    let mut weights = weights_or_default(a.weights.as_deref(), a.seed)?;
    if let Some(alpha) = a.alpha {
        weights.set_alpha(alpha)?;
    }
    fs::create_dir_all(&a.out_dir)?;
    let results = if cli.f64 {
        enhance_all(cli, &weights.cast::<f64>(), a)
    } else {
        enhance_all(cli, &weights, a)
    };
    let mut failures = 0;
    let mut rows = Vec::new();
    for (input, r) in &results {
        match r {
            Ok(dest) => rows.push(json!({"input": input, "output": dest})),
            Err(e) => {
                failures += 1;
                eprintln!("error: {e}");
                rows.push(json!({"input": input, "error": e.to_string()}));
            }
        }
    }
    if cli.json {
        print_json(&json!({"results": rows, "failures": failures}))?;
    } else {
        println!(
            "enhanced {} of {} images into {}",
            results.len() - failures,
            a.inputs.len(),
            a.out_dir.display()
        );
    }
    Ok(if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && ImageFormat::from_path(p).is_some())
        .collect();
    files.sort();
    Ok(files)
}

fn metrics(cli: &Cli, a: &MetricsArgs) -> Result<ExitCode> {
    let files = image_files(&a.test_dir)?;
    if files.is_empty() {
        eprintln!("warning: no PNG/PPM images in {}", a.test_dir.display());
    }
    let mut images = Vec::new();
    let mut skipped = Vec::new();
    for path in &files {
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        let test: Tensor<f64> = read_image(path)?;
        let reference = match &a.reference {
            Some(dir) => {
                let counterpart = dir.join(&name);
                if !counterpart.is_file() {
                    skipped.push(name);
                    continue;
                }
                Some(read_image::<f64>(&counterpart)?)
            }
            None => None,
        };
        images.push(ImageQuality::evaluate(name, &test, reference.as_ref())?);
    }
    let mut report = QualityReport::new(images);
    report.skipped = skipped;
    if cli.json {
        print_json(&report)?;
    } else {
        for q in &report.images {
            let fr = match (q.psnr, q.ssim) {
                (Some(p), Some(s)) => format!("psnr {p:8.3}  ssim {s:.4}  "),
                _ => String::new(),
            };
            println!("{:<24} {fr}uciqe {:.4}  uiqm {:.4}", q.name, q.uciqe, q.uiqm);
        }
        for (k, s) in &report.aggregate {
            println!("mean {k:<6} {:.6} (sd {:.6}, n {})", s.mean, s.stddev, s.count);
        }
        for s in &report.skipped {
            eprintln!("skipped {s}: no reference counterpart");
        }
    }
    Ok(if cli.strict && !report.skipped.is_empty() {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    })
}

fn train_config(a: &TrainArgs) -> TrainConfig {
    let base = if a.full_scale {
        TrainConfig::full_scale()
    } else {
        TrainConfig::default()
    };
    TrainConfig {
        steps: a.steps,
        batch_size: if a.full_scale { base.batch_size } else { a.batch_size },
        lr_max: a.lr_max,
        base_lr: a.base_lr.unwrap_or(a.lr_max / 10.0),
        lr_period: a.lr_period,
        betas: (a.beta1, a.beta2),
        crop: if a.full_scale { base.crop } else { a.crop },
        hflip: !a.no_flip,
        rotate: !a.no_rotate,
        seed: a.seed,
        network: NetworkConfig {
            alpha: a.alpha,
            ..NetworkConfig::default()
        },
        ..base
    }
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<ExitCode> {
    let desk = DeskConfig {
        pairs: a.pairs,
        size: a.size,
        holdout: a.holdout,
        degrade: DegradeParams::default(),
        train: train_config(a),
    };
    let mut log: Option<BufWriter<File>> = a.log.as_ref().map(File::create).transpose()?.map(BufWriter::new);
    let sink = log.as_mut().map(|w| w as &mut dyn Write);
    let (weights, evaluation, final_loss) = if cli.f64 {
        let r = desk_run::<f64>(&desk, sink)?;
        (
            r.result.weights.cast::<f32>(),
            r.evaluation,
            r.result.log.last().map(|l| l.loss),
        )
    } else {
        let r = desk_run::<f32>(&desk, sink)?;
        (r.result.weights, r.evaluation, r.result.log.last().map(|l| l.loss))
    };
    save_weights(&weights, &a.out)?;
    let summary = json!({
        "final": true,
        "steps": a.steps,
        "final_loss": final_loss,
        "psnr_degraded": evaluation.psnr_degraded,
        "psnr_enhanced": evaluation.psnr_enhanced,
        "psnr_gain": evaluation.psnr_gain(),
        "ssim_degraded": evaluation.ssim_degraded,
        "ssim_enhanced": evaluation.ssim_enhanced,
        "ssim_gain": evaluation.ssim_gain(),
        "weights": a.out,
    });
    if let Some(w) = log.as_mut() {
        writeln!(w, "{summary}")?;
        w.flush()?;
    }
    if cli.json {
        print_json(&summary)?;
    } else {
        println!(
            "held-out PSNR {:.3} -> {:.3} dB (gain {:+.3}), SSIM {:.4} -> {:.4}; weights written to {}",
            evaluation.psnr_degraded,
            evaluation.psnr_enhanced,
            evaluation.psnr_gain(),
            evaluation.ssim_degraded,
            evaluation.ssim_enhanced,
            a.out.display()
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn bench(cli: &Cli, a: &BenchArgs) -> Result<ExitCode> {
    let weights = weights_or_default(a.weights.as_deref(), a.seed)?;
    let cfg = BenchConfig {
        height: a.height,
        width: a.width,
        warmup: a.warmup as usize,
        iters: a.iters as usize,
        threads: cli.threads.max(1),
    };
    let report = if cli.f64 {
        run_bench(&weights.cast::<f64>(), &cfg)?
    } else {
        run_bench(&weights, &cfg)?
    };
    if cli.json {
        print_json(&report)?;
    } else {
        println!(
            "{}x{}: median {:.4}s (min {:.4}s, mean {:.4}s), {:.2} FPS, {:.3} GFLOPs, {} params, {} thread(s)",
            report.width,
            report.height,
            report.median_s,
            report.min_s,
            report.mean_s,
            report.fps,
            report.gflops,
            report.params,
            report.threads
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn degrade(cli: &Cli, a: &DegradeArgs) -> Result<ExitCode> {
    let params = DegradeParams {
        beta: [a.beta[0], a.beta[1], a.beta[2]],
        background: [a.background[0], a.background[1], a.background[2]],
        depth_mode: match a.depth_mode {
            DepthModeArg::Constant => DepthMode::Constant,
            DepthModeArg::VerticalRamp => DepthMode::VerticalRamp,
        },
        depth_range: [a.depth_min, a.depth_max],
        seed: a.seed,
    };
    let pairs = make_pairs::<f64>(a.count, a.size, &params, a.seed)?;
    let ext = match a.format {
        FormatArg::Png => "png",
        FormatArg::Ppm => "ppm",
    };
    let (clean_dir, degraded_dir) = (a.out_dir.join("clean"), a.out_dir.join("degraded"));
    fs::create_dir_all(&clean_dir)?;
    fs::create_dir_all(&degraded_dir)?;
    let mut entries = Vec::new();
    let mut psnr_sum = 0.0;
    for (i, p) in pairs.iter().enumerate() {
        let name = format!("{i:04}.{ext}");
        write_image(clean_dir.join(&name), &p.clean)?;
        write_image(degraded_dir.join(&name), &p.degraded)?;
        // Baseline on the stored 8-bit files, as `metrics` will see them.
        let clean: Tensor<f64> = read_image(clean_dir.join(&name))?;
        let degraded: Tensor<f64> = read_image(degraded_dir.join(&name))?;
        let psnr = fanet_core::metrics::psnr_from_mse(mse(&clean, &degraded)?);
        psnr_sum += psnr;
        entries.push(json!({"name": name, "depth": p.depth, "psnr": psnr}));
    }
    let baseline = psnr_sum / pairs.len() as f64;
    let manifest = json!({
        "seed": a.seed,
        "count": a.count,
        "size": a.size,
        "params": params,
        "baseline_psnr": baseline,
        "pairs": entries,
    });
    let text = serde_json::to_string_pretty(&manifest).map_err(std::io::Error::from)?;
    fs::write(a.out_dir.join("manifest.json"), text + "\n")?;
    if cli.json {
        print_json(&manifest)?;
    } else {
        println!(
            "wrote {} pairs to {} (mean degraded PSNR {baseline:.3} dB)",
            a.count,
            a.out_dir.display()
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn params(cli: &Cli, a: &ParamsArgs) -> Result<ExitCode> {
    let weights = weights_or_default(a.weights.as_deref(), 0)?;
    let blocks = weights.block_counts();
    let total = weights.param_count();
    let within = PARAM_BUDGET.contains(&total);
    if cli.json {
        print_json(&json!({
            "blocks": blocks,
            "total": total,
            "channels": weights.channels(),
            "alpha": weights.alpha(),
            "budget": [PARAM_BUDGET.start(), PARAM_BUDGET.end()],
            "within_budget": within,
            "gflops_720p": count_flops(&weights, 720, 1280).total() / 1e9,
        }))?;
    } else {
        for b in &blocks {
            println!("{:<12} {:>6}", b.block, b.params);
        }
        println!("{:<12} {:>6}", "total", total);
    }
    if a.enforce_budget && !within {
        eprintln!(
            "error: {total} parameters outside the {}..={} budget",
            PARAM_BUDGET.start(),
            PARAM_BUDGET.end()
        );
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn sweep(cli: &Cli, a: &SweepArgs) -> Result<ExitCode> {
    let alphas = if a.alphas.is_empty() {
        default_alphas()
    } else {
        a.alphas.clone()
    };
    if let Some(bad) = alphas.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Config(format!("alpha {bad} outside [0, 1]")));
    }
    let mut cfg = DeskConfig::default();
    cfg.train.steps = a.steps;
    cfg.train.seed = a.seed;
    let rows = alpha_sweep(&cfg, &alphas)?;
    if cli.json {
        print_json(&rows)?;
    } else {
        println!("{:>5}  {:>9}  {:>9}  {:>8}", "alpha", "psnr", "gain", "ssim");
        for r in &rows {
            println!(
                "{:>5.2}  {:>9.3}  {:>+9.3}  {:>8.4}",
                r.alpha,
                r.evaluation.psnr_enhanced,
                r.evaluation.psnr_gain(),
                r.evaluation.ssim_enhanced
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}
