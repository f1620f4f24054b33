use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use nz_core::checkpoint::{Checkpoint, OptimizerState};
use nz_core::config::Config;
use nz_core::data::{load_collection, load_image, DepthProvider};
use nz_core::evaluation::{evaluate as run_evaluation, EvalSource};
use nz_core::generation::{rollout_autopilot, rollout_plan};
use nz_core::image::RgbdImage;
use nz_core::synthetic::{synthetic_collection, synthetic_views};
use nz_core::training::Trainer;
use nz_core::trajectory::TrajectoryPlan;

use crate::{ConfigArgs, EvaluateArgs, GenerateArgs, Mode};

/// Bad flags or configuration; exits with code 1.
#[derive(Debug)]
pub struct UsageError(nz_core::Error);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

impl std::error::Error for UsageError {}

fn usage<T>(r: nz_core::Result<T>) -> Result<T> {
    r.map_err(|e| UsageError(e).into())
}

/// Eval scenes are drawn from a stream disjoint from the training scenes.
const EVAL_SCENE_SALT: u64 = 0x5EED_E7A1;

/// Layer `base` with the file, overrides and `NZ_SEED`, then validate.
fn layered(mut base: Config, args: &ConfigArgs, extra: &[String]) -> Result<Config> {
    if let Some(f) = &args.config {
        usage(base.merge_file(f))?;
    }
    usage(base.apply_overrides(&args.overrides))?;
    usage(base.apply_overrides(extra))?;
    if let Ok(seed) = std::env::var("NZ_SEED") {
        usage(base.apply_overrides(&[format!("run.seed={seed}")]))?;
    }
    usage(base.validate())?;
    Ok(base)
}

fn run_dir(cfg: &Config) -> PathBuf {
    Path::new(&cfg.run.output_dir).join(&cfg.run.name)
}

/// Config stored in a checkpoint, layered with this invocation's settings.
fn checkpoint_config(ck: &Checkpoint, args: &ConfigArgs, extra: &[String]) -> Result<Config> {
    let base: Config = serde_json::from_value(ck.config.clone()).context("checkpoint carries an unreadable config")?;
    let cfg = layered(base, args, extra)?;
    if cfg.refiner_config()? != ck.state.config {
        return Err(UsageError(nz_core::Error::Config(
            "model settings differ from the checkpoint's (data.image_size / model.*)".into(),
        ))
        .into());
    }
    Ok(cfg)
}

fn load_dataset(cfg: &Config) -> Result<Vec<RgbdImage>> {
    if cfg.is_synthetic() {
        return Ok(synthetic_collection(cfg.data.synthetic_count, cfg.data.image_size, cfg.run.seed)?);
    }
    let provider = cfg.depth_provider()?;
    let c = load_collection(Path::new(&cfg.data.source), cfg.data.image_size, &provider, cfg.run.seed)?;
    log::info!("loaded {} images from {} ({} skipped)", c.items.len(), cfg.data.source, c.warnings.len());
    Ok(c.items)
}

pub fn train(args: &ConfigArgs, resume: Option<&Path>) -> Result<()> {
    let (cfg, mut trainer) = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let cfg = checkpoint_config(&ck, args, &[])?;
            let Some(OptimizerState { refiner, disc }) = ck.optim else {
                bail!("{} has no optimizer state and cannot be resumed", path.display());
            };
            log::info!("resuming from {} at step {}", path.display(), ck.state.step);
            (cfg.clone(), Trainer::from_parts(cfg.training_config(), ck.state, refiner, disc)?)
        }
        None => {
            let cfg = layered(Config::default(), args, &[])?;
            let t = Trainer::new(cfg.training_config(), cfg.refiner_config()?)?;
            (cfg, t)
        }
    };
    let dataset = load_dataset(&cfg)?;
    let dir = run_dir(&cfg);
    let ck_dir = dir.join("checkpoints");
    fs::create_dir_all(&ck_dir).with_context(|| format!("creating {}", ck_dir.display()))?;
    fs::write(dir.join("config.toml"), cfg.to_flat_toml())?;
    let metrics_path = dir.join("metrics.jsonl");
    let mut metrics = if resume.is_some() {
        OpenOptions::new().create(true).append(true).open(&metrics_path)?
    } else {
        File::create(&metrics_path)?
    };

    let echo = cfg.to_json();
    let interval = cfg.training.checkpoint_interval;
    let total = cfg.training.total_steps;
    let save = |t: &Trainer| -> nz_core::Result<()> {
        let ck = Checkpoint {
            state: t.state.clone(),
            optim: Some(OptimizerState {
                refiner: t.opt_refiner.clone(),
                disc: t.opt_disc.clone(),
            }),
            config: echo.clone(),
        };
        ck.save(ck_dir.join(format!("step_{:08}.nzck", t.step())))?;
        ck.save(ck_dir.join("latest.nzck"))
    };
    log::info!("training {} from step {} to {total} in {}", cfg.run.name, trainer.step(), dir.display());
    trainer.train(&dataset, |t, report| {
        writeln!(metrics, "{}", report.to_json_line()?)?;
        let step = t.step();
        if step % interval == 0 || step == total {
            save(t)?;
        }
        if step % 10 == 0 || step == total {
            let rec = report.cyclic_rec().map(|r| format!("{r:.5}")).unwrap_or_default();
            log::info!("step {step}/{total} T_max={} rec={rec}", report.t_max_current);
        }
        Ok(())
    })?;
    // a resume at or past total_steps runs nothing but still leaves a checkpoint
    save(&trainer)?;
    metrics.flush()?;
    log::info!("done; checkpoints in {}", ck_dir.display());
    Ok(())
}

pub fn generate(a: &GenerateArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let mut extra = Vec::new();
    if a.no_sky_correction {
        extra.push("sky.correction=false".to_string());
    }
    let cfg = checkpoint_config(&ck, &a.cfg, &extra)?;
    let size = cfg.data.image_size;
    let start = match (&a.input, a.scene) {
        (Some(path), _) => {
            let provider = match (&a.disparity, cfg.depth_provider()?) {
                (Some(_), _) => None,
                // generated scenes carry their own depth; plain photos fall back to a plane
                (None, DepthProvider::Synthetic) => Some(DepthProvider::ConstantPlane {
                    disparity: cfg.data.constant_disparity,
                }),
                (None, p) => Some(p),
            };
            match provider {
                Some(p) => load_image(path, size, &p).with_context(|| format!("reading {}", path.display()))?,
                None => {
                    let disp = a.disparity.as_ref().unwrap();
                    let img = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
                    let d = fs::read(disp).with_context(|| format!("reading {}", disp.display()))?;
                    nz_core::data::decode_image(&img, Some(&d), size, cfg.data.constant_disparity)?
                }
            }
        }
        (None, Some(i)) => synthetic_collection(i + 1, size, cfg.run.seed)?.remove(i),
        (None, None) => unreachable!("clap requires --input or --scene"),
    };
    let gen = cfg.generation_config();
    let seed = a.seed.unwrap_or(cfg.run.seed);
    let rollout = match a.mode {
        Mode::Autopilot => {
            let n = a.steps.unwrap_or(cfg.generate.steps);
            if n == 0 {
                return Err(UsageError(nz_core::Error::Config("--steps must be >= 1".into())).into());
            }
            rollout_autopilot(&ck.state, &start, n, &gen, seed)?
        }
        Mode::TrajectoryFile => {
            let path = a.trajectory.as_ref().expect("clap requires --trajectory");
            let mut plan = TrajectoryPlan::load(path).with_context(|| format!("trajectory file {}", path.display()))?;
            if let Some(n) = a.steps {
                if n == 0 || n > plan.len() {
                    bail!("--steps {n} is outside 1..={} for {}", plan.len(), path.display());
                }
                plan.steps.truncate(n);
                plan.provenance.truncate(n);
            }
            rollout_plan(&ck.state, &start, &plan, &gen, seed)?
        }
    };
    let out = a.out.clone().unwrap_or_else(|| run_dir(&cfg).join("frames"));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    for (i, f) in rollout.frames.iter().enumerate() {
        f.save_png(out.join(format!("{i:06}.png")))?;
    }
    rollout.plan.save(out.join("trajectory.json"))?;
    log::info!("wrote {} frames to {}", rollout.frames.len(), out.display());
    Ok(())
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let flags = [
        ("evaluate.window", a.window),
        ("evaluate.scenes", a.scenes),
        ("evaluate.short_length", a.short_length),
        ("evaluate.long_length", a.long_length),
        ("evaluate.fid_length", a.fid_length),
    ];
    let extra: Vec<String> = flags.iter().filter_map(|(k, v)| v.map(|v| format!("{k}={v}"))).collect();
    let cfg = checkpoint_config(&ck, &a.cfg, &extra)?;
    let protocol = cfg.evaluation_protocol();
    let gen = cfg.generation_config();
    let n = cfg.evaluate.scenes;
    let report = if cfg.is_synthetic() {
        let views = synthetic_views(n, cfg.data.image_size, cfg.run.seed ^ EVAL_SCENE_SALT);
        run_evaluation(&ck.state, EvalSource::Synthetic(&views), &protocol, &gen, cfg.to_json())?
    } else {
        let mut imgs = load_dataset(&cfg)?;
        imgs.truncate(n);
        run_evaluation(&ck.state, EvalSource::Images(&imgs), &protocol, &gen, cfg.to_json())?
    };
    let out = a.out.clone().unwrap_or_else(|| run_dir(&cfg).join("report.json"));
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(&out, serde_json::to_string_pretty(&report)?)?;
    log::info!(
        "psnr {:.3} ssim {:.4} perceptual {:.4} fid {:.3} kid {:.4} style {:.5}; report at {}",
        report.psnr,
        report.ssim,
        report.perceptual,
        report.fid,
        report.kid,
        report.style,
        out.display()
    );
    Ok(())
}

pub fn serve(checkpoint: &Path, args: &ConfigArgs, bind: Option<String>) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let cfg = checkpoint_config(&ck, args, &[])?;
    let gallery = load_dataset(&cfg)?;
    let f = &cfg.flight;
    let flight = nz_flight::FlightConfig {
        bounds: nz_flight::ControlBounds {
            max_forward: f.max_forward,
            max_lateral: f.max_lateral,
            max_yaw_deg: f.max_yaw_deg,
            max_pitch_deg: f.max_pitch_deg,
        },
        generation: cfg.generation_config(),
        upload_disparity: cfg.data.constant_disparity,
        default_seed: cfg.run.seed,
    };
    let addr = bind.unwrap_or_else(|| f.bind.clone());
    let state = nz_flight::AppState::new(ck.state, gallery, flight);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr).await.with_context(|| format!("binding {addr}"))?;
        log::info!("serving on http://{}", listener.local_addr()?);
        nz_flight::serve(listener, state).await?;
        Ok(())
    })
}
