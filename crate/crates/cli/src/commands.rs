use crate::ConfigArgs;
use anyhow::{Context, Result};
use serde::Serialize;
use std::fs;
use std::path::{Path, PathBuf};
use vsda::checkpoint::Checkpoint;
use vsda::config::RunConfig;
use vsda::dataset::{load_dataset, write_dataset};
use vsda::trainer::{prepare_data, run_training, Mode, TrainData, Trainer};

pub const CONFIG_ECHO: &str = "run_config.toml";

fn resolve(args: &ConfigArgs) -> Result<RunConfig> {
    Ok(match &args.config {
        Some(p) => RunConfig::load(p, &args.overrides)?,
        None => RunConfig::parse("", &args.overrides)?,
    })
}

fn echo(cfg: &RunConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let p = dir.join(CONFIG_ECHO);
    fs::write(&p, cfg.to_toml()).with_context(|| format!("writing {}", p.display()))
}

pub fn generate(args: &ConfigArgs) -> Result<()> {
    let cfg = resolve(args)?;
    let spec = cfg.benchmark_spec();
    let bench = spec.generate()?;
    let spec_json = serde_json::to_value(&spec)?;
    for (dir, clips) in [
        (cfg.source_dir(), &bench.source),
        (cfg.target_dir(), &bench.target),
        (cfg.eval_dir(), &bench.target_eval),
    ] {
        write_dataset(clips, &dir, Some(spec_json.clone()))?;
        println!("wrote {} clips to {}", clips.len(), dir.display());
    }
    echo(&cfg, &cfg.data_dir)
}

fn load_data(cfg: &RunConfig) -> Result<TrainData> {
    let data = TrainData {
        source: load_dataset(&cfg.source_dir())?,
        target: load_dataset(&cfg.target_dir())?,
        eval: load_dataset(&cfg.eval_dir())?,
    };
    Ok(prepare_data(&cfg.train_config(), data)?)
}

pub fn train(args: &ConfigArgs, resume: Option<PathBuf>) -> Result<()> {
    let cfg = resolve(args)?;
    let data = load_data(&cfg)?;
    echo(&cfg, &cfg.out_dir)?;
    let mut opts = cfg.run_options();
    opts.resume_from = resume;
    let s = run_training(&cfg.train_config(), &data, &opts)?;
    println!(
        "mode {}: target mIoU {:.4}, temporal consistency {:.4}",
        cfg.mode, s.last_eval.miou, s.last_eval.temporal_consistency
    );
    println!("checkpoint {}", s.final_checkpoint.display());
    Ok(())
}

pub fn eval(checkpoint: &Path, data: &Path, out: Option<&Path>, feature_stride: usize) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let clips = load_dataset(data)?;
    let clips = prepare_data(
        &ck.config,
        TrainData {
            eval: clips,
            ..TrainData::default()
        },
    )?
    .eval;
    let trainer = Trainer::new(ck.config.clone())?;
    let stride = (feature_stride > 0).then_some(feature_stride);
    let report = trainer.evaluate(&ck.state.gen, &clips, stride)?;
    let table = report.to_table(&[]);
    print!("{table}");
    if let Some(dir) = out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
        fs::write(dir.join("report.txt"), &table)?;
        fs::write(dir.join("train_config.json"), serde_json::to_string_pretty(&ck.config)?)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct AblationRow {
    mode: Mode,
    seeds: Vec<u64>,
    miou: f64,
    temporal_consistency: f64,
    sigma2_intra: Option<f64>,
    per_seed_miou: Vec<f64>,
}

pub fn ablate(args: &ConfigArgs, modes: &[String], seeds: &[u64]) -> Result<()> {
    let cfg = resolve(args)?;
    let modes = modes.iter().map(|m| m.parse::<Mode>()).collect::<Result<Vec<_>, _>>()?;
    let seeds = if seeds.is_empty() { vec![cfg.seed] } else { seeds.to_vec() };
    let data = load_data(&cfg)?;
    echo(&cfg, &cfg.out_dir)?;
    let mut rows = Vec::new();
    for &mode in &modes {
        let mut mious = Vec::new();
        let mut tcs = Vec::new();
        let mut intras = Vec::new();
        for &seed in &seeds {
            let run = RunConfig {
                mode,
                seed,
                data_seed: seed,
                out_dir: cfg.out_dir.join(format!("{mode}_seed{seed}")),
                ..cfg.clone()
            };
            echo(&run, &run.out_dir)?;
            let s = run_training(&run.train_config(), &data, &run.run_options())?;
            eprintln!("{mode} seed {seed}: mIoU {:.4}", s.last_eval.miou);
            mious.push(s.last_eval.miou);
            tcs.push(s.last_eval.temporal_consistency);
            intras.extend(s.last_eval.sigma2_intra);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        rows.push(AblationRow {
            mode,
            seeds: seeds.clone(),
            miou: mean(&mious),
            temporal_consistency: mean(&tcs),
            sigma2_intra: (intras.len() == seeds.len()).then(|| mean(&intras)),
            per_seed_miou: mious,
        });
    }
    let mut table = String::from("| mode | mIoU | temporal consistency |\n|---|---|---|\n");
    for r in &rows {
        table.push_str(&format!(
            "| {} | {:.2} | {:.2} |\n",
            r.mode,
            100.0 * r.miou,
            100.0 * r.temporal_consistency
        ));
    }
    print!("{table}");
    fs::write(cfg.out_dir.join("ablation.md"), &table)?;
    fs::write(cfg.out_dir.join("ablation.json"), serde_json::to_string_pretty(&rows)?)?;
    Ok(())
}
