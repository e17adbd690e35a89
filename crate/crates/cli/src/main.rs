//! Operator-facing pipeline: data generation, corruption, initial training,
//! EM runs, sampling, evaluation, and plots. Every command is deterministic
//! given the same config and seed, writes under the run directory, and
//! leaves a machine-readable manifest next to its outputs.

mod config;
mod plot;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use config::{DatasetKind, Overrides, RunConfig, Task};
use emdiff::data::{evaluate_sets, gen_gmm, gen_toyimages, Dataset};
use emdiff::em::{init_state, load_checkpoint, run_em_from, save_checkpoint, EMState};
use emdiff::ops::{corrupt, ForwardOperator, Observation, ObservationSet};
use emdiff::rng::{derive, stream};
use emdiff::sampler::{sample_prior, SamplerConfig};
use emdiff::score::{GaussianPrior, GmmPrior};
use emdiff::trainer::TrainReport;
use plot::{line_chart, Series, PALETTE};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "emdiff", version, about = "EM training of diffusion priors from corrupted observations")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct Common {
    /// Run configuration (TOML)
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the train/init/test splits
    GenData(Common),
    /// Corrupt the train split into observations
    Corrupt(Common),
    /// Train the initial score model on the clean init split
    InitTrain(Common),
    /// Run the EM loop (runs any missing earlier stage first)
    EmRun(Common),
    /// Draw unconditional samples from a checkpointed model
    Sample {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to sample from (default: the final EM checkpoint)
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Number of samples
        #[arg(long, default_value_t = 256)]
        count: usize,
    },
    /// PSNR and sliced-Wasserstein between two sample containers
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Reconstruction / sample container
        #[arg(long)]
        recon: PathBuf,
        /// Reference container
        #[arg(long)]
        reference: PathBuf,
    },
    /// Render metrics and loss curves as SVG
    Plot(Common),
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli) {
        eprintln!("error: {}: {:#}", category_of(&e), e);
        std::process::exit(1);
    }
}

fn category_of(e: &anyhow::Error) -> &'static str {
    if let Some(err) = e.downcast_ref::<emdiff::Error>() {
        err.category()
    } else if e.downcast_ref::<std::io::Error>().is_some() {
        "io"
    } else {
        // remaining failures are config/content problems (toml parse,
        // validation bails, missing stages)
        "config-invalid"
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData(c) => {
            let cfg = RunConfig::load(&c.config, &c.overrides)?;
            cmd_gen_data(&cfg)?;
        }
        Cmd::Corrupt(c) => {
            let cfg = RunConfig::load(&c.config, &c.overrides)?;
            cmd_corrupt(&cfg)?;
        }
        Cmd::InitTrain(c) => {
            let cfg = RunConfig::load(&c.config, &c.overrides)?;
            cmd_init_train(&cfg)?;
        }
        Cmd::EmRun(c) => {
            let cfg = RunConfig::load(&c.config, &c.overrides)?;
            cmd_em_run(&cfg)?;
        }
        Cmd::Sample { common, ckpt, count } => {
            let cfg = RunConfig::load(&common.config, &common.overrides)?;
            cmd_sample(&cfg, ckpt.as_deref(), count)?;
        }
        Cmd::Evaluate { common, recon, reference } => {
            let cfg = RunConfig::load(&common.config, &common.overrides)?;
            cmd_evaluate(&cfg, &recon, &reference)?;
        }
        Cmd::Plot(c) => {
            let cfg = RunConfig::load(&c.config, &c.overrides)?;
            cmd_plot(&cfg)?;
        }
    }
    Ok(())
}

fn write_manifest(dir: &Path, command: &str, files: &[String]) -> Result<()> {
    #[derive(serde::Serialize)]
    struct CommandManifest<'a> {
        format: &'a str,
        command: &'a str,
        created_unix: u64,
        files: &'a [String],
    }
    std::fs::create_dir_all(dir)?;
    let m = CommandManifest {
        format: "emdiff-command",
        command,
        created_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        files,
    };
    std::fs::write(dir.join("manifest.toml"), toml::to_string(&m)?)?;
    Ok(())
}

fn cmd_gen_data(cfg: &RunConfig) -> Result<()> {
    let dir = cfg.run_dir();
    cfg.echo(&dir)?;
    let d = &cfg.dataset;
    let total = d.n_train + d.n_init + d.n_test;
    let full = match d.kind {
        DatasetKind::Toyimage => {
            gen_toyimages(d.height, d.width, d.family, total, cfg.run.seed)?
        }
        DatasetKind::Gmm2d => {
            let sep = d.gmm_separation;
            let var = d.gmm_var;
            let cov = vec![var, 0.0, 0.0, var];
            let prior = GmmPrior::new(vec![
                (0.5, GaussianPrior::new(vec![-sep, 0.0], cov.clone())?),
                (0.5, GaussianPrior::new(vec![sep, 0.0], cov)?),
            ])?;
            gen_gmm(&prior, total, cfg.run.seed)
        }
    };
    let (train, rest) = full.split_front(d.n_train);
    let (init, test) = rest.split_front(d.n_init);
    train.save(&dir.join("data/train"))?;
    init.save(&dir.join("data/init"))?;
    test.save(&dir.join("data/test"))?;
    println!(
        "wrote data/train ({}), data/init ({}), data/test ({}) under {}",
        train.len(),
        init.len(),
        test.len(),
        dir.display()
    );
    Ok(())
}

fn cmd_corrupt(cfg: &RunConfig) -> Result<()> {
    let dir = cfg.run_dir();
    cfg.echo(&dir)?;
    let train = Dataset::load(&dir.join("data/train"))
        .context("loading data/train (run gen-data first)")?;
    let set = build_observations(cfg, &train)?;
    set.save(&dir.join("observations"))?;
    println!(
        "wrote observations ({} items, task {:?}, sigma {}, mask resamples {})",
        set.len(),
        cfg.run.task,
        cfg.obs_sigma(),
        set.mask_resamples
    );
    Ok(())
}

fn build_observations(cfg: &RunConfig, train: &Dataset) -> Result<ObservationSet> {
    let sigma = cfg.obs_sigma();
    let seed = cfg.run.seed;
    let shape = train.item_shape.clone();
    let n = train.len();
    let mut items = Vec::with_capacity(n);
    let mut mask_resamples = 0u64;
    let mut blur_sigma = None;

    let shared_op = match cfg.run.task {
        Task::Denoise => Some(ForwardOperator::identity(&shape)),
        Task::Deblur => {
            if shape.len() != 2 {
                bail!("deblur needs an image dataset");
            }
            blur_sigma = Some(cfg.operator.sigma_blur);
            Some(ForwardOperator::blur(&shape, cfg.operator.kernel_size, cfg.operator.sigma_blur)?)
        }
        Task::Inpaint => None,
    };

    for i in 0..n {
        let op = match &shared_op {
            Some(op) => op.clone(),
            None => {
                let (op, used) =
                    ForwardOperator::mask(&shape, cfg.operator.keep_prob, derive(seed, "mask-item", i as u64))?;
                mask_resamples += used - 1;
                op
            }
        };
        let mut rng = stream(seed, "obs-noise", i as u64);
        let y = corrupt(train.samples.row(i), &op, sigma, &mut rng)?;
        items.push(Observation { y, op, sigma });
    }
    Ok(ObservationSet {
        items,
        ground_truth: Some(train.samples.clone()),
        seed,
        kind: format!("{:?}", cfg.run.task).to_lowercase(),
        blur_sigma,
        mask_resamples,
    })
}

fn train_loss_csv(report: &TrainReport) -> String {
    let mut out = String::from("epoch,mean_loss\n");
    for (i, l) in report.epoch_loss.iter().enumerate() {
        out.push_str(&format!("{},{}\n", i + 1, l));
    }
    out
}

fn cmd_init_train(cfg: &RunConfig) -> Result<()> {
    let dir = cfg.run_dir();
    cfg.echo(&dir)?;
    let init = Dataset::load(&dir.join("data/init"))
        .context("loading data/init (run gen-data first)")?;
    let (state, report) = init_state(&cfg.core(), &init.samples)?;
    let out = dir.join("init");
    save_checkpoint(&state, &out.join("model.ckpt"))?;
    std::fs::write(out.join("loss.csv"), train_loss_csv(&report))?;
    write_manifest(&out, "init-train", &["model.ckpt".into(), "loss.csv".into()])?;
    println!(
        "initial model trained on {} clean samples ({} epochs, final loss {:.4})",
        init.len(),
        report.epoch_loss.len(),
        report.epoch_loss.last().unwrap()
    );
    Ok(())
}

fn cmd_em_run(cfg: &RunConfig) -> Result<()> {
    let dir = cfg.run_dir();
    cfg.echo(&dir)?;

    if Dataset::load(&dir.join("data/train")).is_err() {
        println!("data/ missing, generating it first");
        cmd_gen_data(cfg)?;
    }
    if ObservationSet::load(&dir.join("observations")).is_err() {
        println!("observations/ missing, corrupting the train split first");
        cmd_corrupt(cfg)?;
    }
    let observations = ObservationSet::load(&dir.join("observations"))?;

    let init_ckpt = dir.join("init/model.ckpt");
    let state = if init_ckpt.exists() {
        let mut state = load_checkpoint(&init_ckpt)?;
        let core = cfg.core();
        if state.config.model != core.model || state.config.schedule != core.schedule {
            bail!(
                "init checkpoint was trained with a different model/schedule config; \
                 re-run init-train or align the config"
            );
        }
        state.config = core;
        state
    } else {
        println!("init/model.ckpt missing, training the initial model first");
        cmd_init_train(cfg)?;
        load_checkpoint(&init_ckpt)?
    };

    let out = dir.join("em");
    std::fs::create_dir_all(&out)?;
    let final_state = run_em_from(state, &observations, Some(&out))?;
    write_manifest(&out, "em-run", &["metrics.csv".into(), "checkpoints".into()])?;

    if let Some(last) = final_state.metrics.last() {
        println!(
            "EM finished: {} iterations, final lambda* {}, mean data loss {:.4}{}",
            final_state.iteration,
            last.lambda_star,
            last.mean_data_loss,
            last.psnr_mean.map(|p| format!(", PSNR {p:.2} dB")).unwrap_or_default()
        );
    } else {
        println!("EM finished with zero iterations (initial model returned unchanged)");
    }
    println!("metrics: {}", out.join("metrics.csv").display());
    Ok(())
}

fn cmd_sample(cfg: &RunConfig, ckpt: Option<&Path>, count: usize) -> Result<()> {
    if count == 0 {
        bail!("sample count must be >= 1");
    }
    let dir = cfg.run_dir();
    cfg.echo(&dir)?;
    let default_ckpt = dir.join("em/checkpoints/final.ckpt");
    let path = ckpt.unwrap_or(&default_ckpt);
    let state: EMState = load_checkpoint(path)?;
    let model = state.eval_model()?;
    let schedule = state.config.schedule.build()?;
    let sampler_cfg = SamplerConfig {
        lambda: 0.0,
        sigma: 1.0,
        steps: state.config.sampler.steps,
        seed: derive(cfg.run.seed, "sample-cmd", 0),
    };
    let samples = sample_prior(&model, count, &schedule, &sampler_cfg)?;
    let ds = Dataset {
        samples,
        item_shape: if cfg.dataset.kind == DatasetKind::Toyimage {
            vec![cfg.dataset.height, cfg.dataset.width]
        } else {
            vec![2]
        },
        kind: "samples".into(),
        seed: cfg.run.seed,
    };
    ds.save(&dir.join("samples"))?;
    println!("wrote {} unconditional samples from {} to samples/", count, path.display());
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig, recon: &Path, reference: &Path) -> Result<()> {
    let dir = cfg.run_dir();
    cfg.echo(&dir)?;
    let a = Dataset::load(recon).with_context(|| format!("loading {}", recon.display()))?;
    let b = Dataset::load(reference)
        .with_context(|| format!("loading {}", reference.display()))?;
    if a.dim() != b.dim() {
        bail!("sample sets have different dimensions ({} vs {})", a.dim(), b.dim());
    }

    let report =
        evaluate_sets(&a.samples, &b.samples, 1.0, 128, derive(cfg.run.seed, "eval-swd", 0))?;
    let mut lines = vec!["metric,value".to_string()];
    if let Some(mean) = report.psnr_mean {
        let infinite = report.psnr.iter().filter(|p| !p.is_finite()).count();
        lines.push(format!("psnr_mean_db,{mean}"));
        lines.push(format!("psnr_infinite_pairs,{infinite}"));
    }
    lines.push(format!("swd,{}", report.swd));

    let out = dir.join("eval");
    std::fs::create_dir_all(&out)?;
    let csv = lines.join("\n") + "\n";
    std::fs::write(out.join("report.csv"), &csv)?;
    let mut files = vec!["report.csv".to_string()];
    if !report.psnr.is_empty() {
        let mut per_item = String::from("item,psnr_db\n");
        for (i, p) in report.psnr.iter().enumerate() {
            per_item.push_str(&format!("{i},{p}\n"));
        }
        std::fs::write(out.join("psnr.csv"), per_item)?;
        files.push("psnr.csv".into());
    }
    write_manifest(&out, "evaluate", &files)?;
    print!("{csv}");
    Ok(())
}

fn parse_metrics_csv(text: &str) -> Result<Vec<Vec<String>>> {
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        rows.push(line.split(',').map(str::to_string).collect());
    }
    Ok(rows)
}

fn cmd_plot(cfg: &RunConfig) -> Result<()> {
    let dir = cfg.run_dir();
    cfg.echo(&dir)?;
    let out = dir.join("plots");
    std::fs::create_dir_all(&out)?;
    let mut written = Vec::new();

    let metrics_path = dir.join("em/metrics.csv");
    if metrics_path.exists() {
        let rows = parse_metrics_csv(&std::fs::read_to_string(&metrics_path)?)?;
        let col = |i: usize| -> Vec<(f64, f64)> {
            rows.iter()
                .filter_map(|r| {
                    let x: f64 = r.first()?.parse().ok()?;
                    let y: f64 = r.get(i)?.parse().ok()?;
                    Some((x, y))
                })
                .collect()
        };
        let charts: [(&str, &str, usize, &str); 4] = [
            ("lambda.svg", "selected lambda", 2, "lambda*"),
            ("loss.svg", "mean E-step data loss", 3, "||y - A(x0)||^2"),
            ("psnr.svg", "reconstruction PSNR", 4, "dB"),
            ("swd.svg", "sliced-Wasserstein to ground truth", 5, "SWD"),
        ];
        for (file, title, idx, ylabel) in charts {
            let pts = col(idx);
            if pts.is_empty() {
                continue;
            }
            let svg = line_chart(
                title,
                "EM iteration",
                ylabel,
                &[Series { label: title.into(), color: PALETTE[0], points: pts }],
            );
            std::fs::write(out.join(file), svg)?;
            written.push(file.to_string());
        }
    }

    let init_loss = dir.join("init/loss.csv");
    if init_loss.exists() {
        let rows = parse_metrics_csv(&std::fs::read_to_string(&init_loss)?)?;
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .filter_map(|r| Some((r.first()?.parse().ok()?, r.get(1)?.parse().ok()?)))
            .collect();
        if !pts.is_empty() {
            let svg = line_chart(
                "initial training loss",
                "epoch",
                "mean DSM loss",
                &[Series { label: "train".into(), color: PALETTE[1], points: pts }],
            );
            std::fs::write(out.join("init_loss.svg"), svg)?;
            written.push("init_loss.svg".into());
        }
    }

    if written.is_empty() {
        bail!("nothing to plot: no em/metrics.csv or init/loss.csv under {}", dir.display());
    }
    write_manifest(&out, "plot", &written)?;
    println!("wrote {} chart(s) under {}", written.len(), out.display());
    Ok(())
}
