use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dtx_core::losses::{LossValues, LossWeights};
use dtx_core::{DriveTransformer, Preset};
use dtx_harness::bench::{bench, write_bench};
use dtx_harness::checkpoint;
use dtx_harness::data::{build_dataset, frame_order, scenario_set, DatasetSpec};
use dtx_harness::eval::{
    evaluate_closed_loop, evaluate_open_loop, evaluate_robust, write_reports, ExpertPolicy, MetricReport, ModelPolicy,
    Observation, Policy, RobustSetup, ZeroPolicy,
};
use dtx_harness::Trainer;
use dtx_simworld::{default_cameras, generate_clip, Clip, Family, Scenario};

use crate::config::{CliConfig, ConfigError, EvalSettings};

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn generate(families: &[Family], count: usize, seed: u64, out: &Path) -> Result<()> {
    if families.is_empty() {
        bail!(ConfigError("no scenario families".into()));
    }
    create_dir(out)?;
    for (i, scn) in scenario_set(families, count, seed).iter().enumerate() {
        let path = out.join(format!("scenario_{i:04}.json"));
        std::fs::write(&path, serde_json::to_vec_pretty(scn)?).with_context(|| format!("writing {}", path.display()))?;
    }
    eprintln!("wrote {count} scenarios to {}", out.display());
    Ok(())
}

/// Scenario files written by `generate`, in file-name order.
pub fn read_scenarios(dir: &Path) -> Result<Vec<Scenario>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "json"));
    paths.sort();
    if paths.is_empty() {
        bail!("no scenario files in {}", dir.display());
    }
    paths
        .iter()
        .map(|p| {
            let text = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_slice(&text).with_context(|| format!("parsing {}", p.display()))
        })
        .collect()
}

fn training_clips(cfg: &CliConfig, trainer: &Trainer) -> Result<Vec<Clip>> {
    let spec = cfg.world()?;
    let dir = cfg.raw("world", "scenario_dir");
    if dir.is_empty() {
        return Ok(build_dataset(&spec, &trainer.model.cfg)?);
    }
    read_scenarios(Path::new(dir))?
        .into_iter()
        .map(|scn| {
            let range = spec.clip_start..spec.clip_start + spec.frames_per_clip;
            Ok(generate_clip(scn, range, default_cameras(spec.image_size), &trainer.model.cfg)?)
        })
        .collect()
}

pub fn train(cfg: &CliConfig, out: &Path, resume: Option<&Path>) -> Result<()> {
    let mut trainer = match resume {
        Some(p) => checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => Trainer::new(cfg.model()?, cfg.train()?, LossWeights::default())?,
    };
    let log_every: usize = cfg.get("train", "log_every")?;
    let clips = training_clips(cfg, &trainer)?;
    let total = trainer.cfg.total_steps(frame_order(&clips).len());
    create_dir(out)?;
    let start = trainer.step;
    eprintln!(
        "training {} layers x {} hidden, {} parameters, steps {start}..{total}",
        trainer.model.cfg.num_layers,
        trainer.model.cfg.hidden,
        trainer.model.store.iter().map(|(_, _, t)| t.data().len()).sum::<usize>()
    );
    let curve = trainer.train_until(&clips, total, |s, v: &LossValues| {
        if log_every > 0 && (s % log_every == 0 || s + 1 == total) {
            eprintln!("step {s} loss {:.4}", v.total);
        }
    })?;
    let curve_path = out.join("loss_curve.csv");
    let mut w = std::io::BufWriter::new(std::fs::File::create(&curve_path)?);
    writeln!(w, "{}", LossValues::CSV_HEADER)?;
    for (i, v) in curve.iter().enumerate() {
        writeln!(w, "{}", v.csv_row(start + i))?;
    }
    w.flush()?;
    let ckpt = out.join("checkpoint.dtxf");
    checkpoint::save(&ckpt, &trainer)?;
    eprintln!("wrote {} and {}", ckpt.display(), curve_path.display());
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum EvalMode {
    Open,
    Closed,
    Robust,
}

enum AnyPolicy<'m> {
    Model(ModelPolicy<'m>),
    Expert(ExpertPolicy),
    Zero(ZeroPolicy),
}

impl Policy for AnyPolicy<'_> {
    fn uses_sensors(&self) -> bool {
        match self {
            AnyPolicy::Model(p) => p.uses_sensors(),
            AnyPolicy::Expert(p) => p.uses_sensors(),
            AnyPolicy::Zero(p) => p.uses_sensors(),
        }
    }

    fn plan(&mut self, obs: &Observation<'_>) -> dtx_harness::Result<Vec<[f64; 2]>> {
        match self {
            AnyPolicy::Model(p) => p.plan(obs),
            AnyPolicy::Expert(p) => p.plan(obs),
            AnyPolicy::Zero(p) => p.plan(obs),
        }
    }
}

fn eval_scenarios(ev: &EvalSettings) -> Vec<Scenario> {
    scenario_set(&ev.families, ev.scenarios, ev.seed)
        .into_iter()
        .map(|mut s| {
            s.steps = ev.episode_steps.min(s.steps);
            s.with_expert_goal()
        })
        .collect()
}

fn eval_clips(cfg: &CliConfig, ev: &EvalSettings, model: &DriveTransformer) -> Result<Vec<Clip>> {
    let world = cfg.world()?;
    let spec = DatasetSpec {
        families: ev.families.clone(),
        clips: ev.clips,
        seed: ev.seed,
        ..world
    };
    if spec.clips == 0 {
        return Ok(Vec::new());
    }
    Ok(build_dataset(&spec, &model.cfg)?)
}

pub fn eval(cfg: &CliConfig, checkpoint_path: Option<&Path>, mode: EvalMode, out: &Path) -> Result<()> {
    let ev = cfg.eval()?;
    let image_size: usize = cfg.get("world", "image_size")?;
    let model = match checkpoint_path {
        Some(p) => Some(checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?.model),
        None => None,
    };
    if model.is_none() && (ev.policy == "model" || mode == EvalMode::Open) {
        bail!(ConfigError("--checkpoint is required for the model policy and open-loop mode".into()));
    }
    let horizon = model.as_ref().map_or(6, |m| m.cfg.plan_horizon);
    let make_policy = || match ev.policy.as_str() {
        "expert" => AnyPolicy::Expert(ExpertPolicy { horizon }),
        "zero" => AnyPolicy::Zero(ZeroPolicy { horizon }),
        _ => AnyPolicy::Model(ModelPolicy::new(model.as_ref().expect("checked above"))),
    };
    create_dir(out)?;
    match mode {
        EvalMode::Open => {
            let m = model.as_ref().expect("checked above");
            let (metrics, preds) = evaluate_open_loop(m, &eval_clips(cfg, &ev, m)?)?;
            let report = MetricReport {
                condition: "clean".into(),
                open: Some(metrics),
                closed: None,
            };
            write_reports(&out.join("metrics.csv"), std::slice::from_ref(&report))?;
            dtx_simworld::io::write_jsonl(&out.join("predictions.jsonl"), &preds)?;
            println!("{}\n{}", MetricReport::CSV_HEADER, report.csv_row());
        }
        EvalMode::Closed => {
            let closed = evaluate_closed_loop(&eval_scenarios(&ev), make_policy, image_size, None)?;
            dtx_simworld::io::write_jsonl(&out.join("episodes.jsonl"), &closed.episodes)?;
            let report = MetricReport {
                condition: "clean".into(),
                open: None,
                closed: Some(closed),
            };
            write_reports(&out.join("metrics.csv"), std::slice::from_ref(&report))?;
            println!("{}\n{}", MetricReport::CSV_HEADER, report.csv_row());
        }
        EvalMode::Robust => {
            let clips = match &model {
                Some(m) => eval_clips(cfg, &ev, m)?,
                None => Vec::new(),
            };
            let scenarios = eval_scenarios(&ev);
            let reports = evaluate_robust(&RobustSetup {
                model: model.as_ref(),
                clips: &clips,
                scenarios: &scenarios,
                make_policy,
                image_size,
                intensity: ev.intensity,
                seed: ev.perturb_seed,
            })?;
            write_reports(&out.join("robust.csv"), &reports)?;
            println!("{}", MetricReport::CSV_HEADER);
            for r in &reports {
                println!("{}", r.csv_row());
            }
        }
    }
    Ok(())
}

pub fn bench_presets(cfg: &CliConfig, presets: &[Preset], out: Option<&Path>) -> Result<()> {
    let bc = cfg.bench()?;
    let mut rows = Vec::new();
    for &p in presets {
        let mut c = cfg.clone();
        c.set_key("model", "preset", p.name())?;
        let model_cfg = c.model()?;
        eprintln!("benchmarking {} ({} layers x {} hidden)", p.name(), model_cfg.num_layers, model_cfg.hidden);
        rows.push(bench(p.name(), &model_cfg, &bc)?);
    }
    println!("{}", dtx_harness::bench::BenchRow::CSV_HEADER);
    for r in &rows {
        println!("{}", r.csv_row());
    }
    if let Some(path) = out {
        write_bench(path, &rows)?;
    }
    Ok(())
}
