use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use classwise_adapt::augment::fill_sample_holes;
use classwise_adapt::checkpoint::Checkpoint;
use classwise_adapt::datamodel::{
    generate_toy_sample, read_label_png, write_label_png, write_manifest, write_sample, Dataset, Domain, Sample,
};
use classwise_adapt::discbank::BankKind;
use classwise_adapt::fusion::{
    backproject, default_palette, parse_trajectory, trajectory_to_text, CameraIntrinsics, FramePose, LabeledPointMap,
};
use classwise_adapt::segnet::{Role, SegNet};
use classwise_adapt::trainer::{evaluate_predictions, predict_samples, Adapter, Pretrainer, TrainLog};
use log::info;
use serde_json::json;

use crate::config::{AdaptMode, RunConfig};

/// Index offsets keeping the three toy splits disjoint.
pub const TARGET_OFFSET: u64 = 10_000;
pub const EVAL_OFFSET: u64 = 20_000;

/// Per-frame camera advance of the toy fly-through, meters.
pub const TOY_STEP: f64 = 0.05;

const TOY_STAMP: &str = "toy.json";

type Net = SegNet<f32>;

/// Record of one finished command.
pub struct Outcome {
    pub command: &'static str,
    pub artifacts: Vec<PathBuf>,
}

/// Write `run.json` after every other artifact exists.
pub fn write_run_json(cfg: &RunConfig, outcome: &Outcome) -> Result<PathBuf> {
    let path = cfg.out_dir().join("run.json");
    let doc = json!({
        "command": outcome.command,
        "config": cfg,
        "artifacts": outcome.artifacts.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
    });
    fs::write(&path, serde_json::to_string_pretty(&doc)? + "\n")?;
    Ok(path)
}

fn write_text(path: PathBuf, text: &str, artifacts: &mut Vec<PathBuf>) -> Result<()> {
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    artifacts.push(path);
    Ok(())
}

fn save_ck(path: PathBuf, ck: &Checkpoint<f32>, artifacts: &mut Vec<PathBuf>) -> Result<()> {
    ck.save(&path).with_context(|| format!("writing {}", path.display()))?;
    artifacts.push(path);
    Ok(())
}

fn write_logs(out: &Path, stem: &str, log: &TrainLog, artifacts: &mut Vec<PathBuf>) -> Result<()> {
    write_text(out.join(format!("{stem}_log.csv")), &log.to_csv(), artifacts)?;
    write_text(out.join(format!("{stem}_timing.csv")), &log.timing_csv(), artifacts)
}

/// Straight-line camera path over the evaluation frames.
pub fn toy_trajectory(frames: usize) -> Vec<(u64, FramePose)> {
    (0..frames as u64)
        .map(|i| (i, FramePose::translation([i as f64 * TOY_STEP, 0.0, 0.0])))
        .collect()
}

pub fn toy_intrinsics(height: usize, width: usize) -> Result<CameraIntrinsics> {
    let f = width.max(height) as f64;
    Ok(CameraIntrinsics::new(f, f, (width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0)?)
}

fn write_split(root: &Path, samples: &[Sample]) -> Result<()> {
    for s in samples {
        write_sample(root, s)?;
    }
    let entries: Vec<_> = samples.iter().map(|s| (s.id.clone(), s.domain)).collect();
    write_manifest(root, &entries)?;
    Ok(())
}

pub fn gen_toy(cfg: &RunConfig) -> Result<Outcome> {
    let toy = cfg.toy()?;
    let root = cfg.resolved_data_root();
    let eval_root = cfg.resolved_eval_root();
    let stamp = json!({
        "toy": toy,
        "samples": cfg.toy_samples,
        "eval_samples": cfg.toy_eval_samples,
        "eval_root": eval_root,
    });
    let stamp_path = root.join(TOY_STAMP);
    let cached = fs::read_to_string(&stamp_path)
        .ok()
        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
        .is_some_and(|v| v == stamp);
    if cached {
        info!("reusing toy dataset at {}", root.display());
    } else {
        let make = |domain, offset: u64, n: usize| -> Result<Vec<Sample>> {
            (0..n as u64)
                .map(|i| Ok(generate_toy_sample(&toy, domain, offset + i)?))
                .collect()
        };
        let mut train = make(Domain::Synthetic, 0, cfg.toy_samples)?;
        train.extend(make(Domain::Real, TARGET_OFFSET, cfg.toy_samples)?);
        write_split(&root, &train)?;
        let eval = make(Domain::Real, EVAL_OFFSET, cfg.toy_eval_samples)?;
        write_split(&eval_root, &eval)?;
        fs::write(eval_root.join("trajectory.txt"), trajectory_to_text(&toy_trajectory(eval.len())))?;
        fs::write(eval_root.join("intrinsics.txt"), toy_intrinsics(toy.height, toy.width)?.to_text())?;
        fs::write(&stamp_path, serde_json::to_string_pretty(&stamp)?)?;
        info!("wrote {} training and {} evaluation samples", train.len(), eval.len());
    }
    fs::create_dir_all(cfg.out_dir())?;
    Ok(Outcome {
        command: "gen-toy",
        artifacts: vec![root, eval_root],
    })
}

/// Synthetic and real samples of the training dataset.
fn load_domains(cfg: &RunConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let ds = Dataset::open(cfg.dataset_spec(cfg.resolved_data_root()))?;
    let (source, target): (Vec<_>, Vec<_>) = ds.load_all()?.into_iter().partition(|s| s.domain == Domain::Synthetic);
    info!("loaded {} synthetic and {} real samples", source.len(), target.len());
    Ok((source, target))
}

fn load_net(path: &Path) -> Result<Net> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(Net::from_checkpoint(&ck)?)
}

pub fn pretrain(cfg: &RunConfig) -> Result<Outcome> {
    let train = cfg.train()?;
    let (source, _) = load_domains(cfg)?;
    let out = cfg.out_dir();
    fs::create_dir_all(&out)?;
    let state = out.join("pretrain_state.ckpt");
    let mut p = if cfg.resume && state.exists() {
        let ck = Checkpoint::load(&state)?;
        Pretrainer::resume(train.clone(), cfg.segnet(), &source, &ck)?
    } else {
        Pretrainer::new(train.clone(), cfg.segnet(), &source)?
    };
    let mut artifacts = Vec::new();
    while !p.is_done() {
        let loss = p.step()?;
        let it = p.iteration() as usize;
        if it.is_multiple_of(50) {
            info!("pretrain {it}/{} L_seg {loss:.4}", train.pretrain_iterations);
        }
        if train.checkpoint_every > 0 && it.is_multiple_of(train.checkpoint_every) {
            p.checkpoint()?.save(&state)?;
        }
    }
    if train.checkpoint_every > 0 {
        save_ck(state, &p.checkpoint()?, &mut artifacts)?;
    }
    let log = std::mem::take(&mut p.log);
    write_logs(&out, "pretrain", &log, &mut artifacts)?;
    save_ck(out.join("cnn_c.ckpt"), &p.into_net().to_checkpoint()?, &mut artifacts)?;
    Ok(Outcome {
        command: "pretrain",
        artifacts,
    })
}

pub fn adapt(cfg: &RunConfig) -> Result<Outcome> {
    let cfg = cfg.resolve();
    let train = cfg.train()?;
    let cnn_c = load_net(Path::new(&cfg.init))?;
    if cnn_c.role() != Role::CnnC {
        bail!("{} does not hold a source-trained network", cfg.init);
    }
    let out = cfg.out_dir();
    fs::create_dir_all(&out)?;
    let mut artifacts = Vec::new();
    let kind = match cfg.mode {
        AdaptMode::None => {
            save_ck(out.join("cnn_r.ckpt"), &cnn_c.clone_as(Role::CnnR).to_checkpoint()?, &mut artifacts)?;
            return Ok(Outcome {
                command: "adapt",
                artifacts,
            });
        }
        AdaptMode::Classwise => BankKind::ClassWise,
        AdaptMode::Single => BankKind::Single,
    };
    let (source, target) = load_domains(&cfg)?;
    let state = out.join("adapt_state.ckpt");
    let mut a = if cfg.resume && state.exists() {
        let ck = Checkpoint::load(&state)?;
        Adapter::resume(train.clone(), &cnn_c, &source, &target, kind, cfg.disc(), &ck)?
    } else {
        Adapter::new(train.clone(), &cnn_c, &source, &target, kind, cfg.disc())?
    };
    while !a.is_done() {
        a.step()?;
        let it = a.iteration() as usize;
        if it.is_multiple_of(50) {
            info!("adapt {it}/{}", train.adapt_iterations);
        }
        if train.checkpoint_every > 0 && it.is_multiple_of(train.checkpoint_every) {
            a.checkpoint()?.save(&state)?;
        }
    }
    save_ck(state, &a.checkpoint()?, &mut artifacts)?;
    let (cnn_r, _, log) = a.into_parts();
    write_logs(&out, "adapt", &log, &mut artifacts)?;
    save_ck(out.join("cnn_r.ckpt"), &cnn_r.to_checkpoint()?, &mut artifacts)?;
    Ok(Outcome {
        command: "adapt",
        artifacts,
    })
}

pub fn eval(cfg: &RunConfig) -> Result<Outcome> {
    let cfg = cfg.resolve();
    let train = cfg.train()?;
    let net = load_net(Path::new(&cfg.checkpoint))?;
    let ds = Dataset::open(cfg.dataset_spec(PathBuf::from(&cfg.eval_root)))?;
    let samples = ds.load_all()?;
    let preds = predict_samples(&net, &samples, &train)?;
    let report = evaluate_predictions(&preds, &samples, cfg.class_count, cfg.ignore_index, cfg.mean_mode)?;
    info!("PA {:.4} MPA {:.4} MIoU {:.4}", report.pa, report.mpa, report.miou);
    let out = cfg.out_dir();
    fs::create_dir_all(&out)?;
    let pred_dir = PathBuf::from(&cfg.predictions);
    for (s, p) in samples.iter().zip(&preds) {
        write_label_png(&pred_dir.join(format!("{}.png", s.id)), p)?;
    }
    let mut artifacts = vec![pred_dir];
    write_text(out.join("metrics.json"), &(report.to_json()? + "\n"), &mut artifacts)?;
    Ok(Outcome {
        command: "eval",
        artifacts,
    })
}

pub fn fuse(cfg: &RunConfig) -> Result<Outcome> {
    let cfg = cfg.resolve();
    let frames = Dataset::open(cfg.dataset_spec(PathBuf::from(&cfg.frames)))?;
    let k = CameraIntrinsics::parse(&fs::read_to_string(&cfg.intrinsics).with_context(|| cfg.intrinsics.clone())?)?;
    let poses = parse_trajectory(&fs::read_to_string(&cfg.trajectory).with_context(|| cfg.trajectory.clone())?)?;
    let params = cfg.fusion();
    let mut map = LabeledPointMap::new(params.clone())?;
    for (frame, pose) in &poses {
        let index = *frame as usize;
        if index >= frames.len() {
            bail!("trajectory frame {frame} but only {} frames on disk", frames.len());
        }
        let mut sample = frames.load(index)?;
        fill_sample_holes(&mut sample)?;
        let label = read_label_png(&Path::new(&cfg.predictions).join(format!("{}.png", sample.id)))?;
        let points = backproject(&label, &sample.depth, &k, pose, params.max_range, params.ignore)?;
        map.vote_update(&points, *frame)?;
    }
    info!("fused {} frames into {} voxels", poses.len(), map.len());
    let out = cfg.out_dir();
    fs::create_dir_all(&out)?;
    let ply = out.join("fused.ply");
    map.export_ply(&ply, &default_palette(cfg.class_count))?;
    Ok(Outcome {
        command: "fuse",
        artifacts: vec![ply],
    })
}
