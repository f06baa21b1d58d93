use std::fs;
use std::path::Path;

use serde::Deserialize;

use hoi_core::bt::{fluency_csv, sweep, sweep_with, ModelPredictor, Scenario};
use hoi_core::data::class_counts;
use hoi_core::eval::{evaluate_predictions, EvalConfig, EvalMode};
use hoi_core::model::{HoiModel, ModelConfig};
use hoi_core::pipeline::{
    bench, generate_dataset, load_clips, load_predictions, load_weights, predict_clips, save_clips, save_predictions,
    save_weights, with_generated_classes, BenchConfig, GenConfig, SyntheticBackbone,
};
use hoi_core::train::{loss_curve_csv, train_detection, train_hydra, FitOptions, LossConfig, OptimizerConfig, TrainSet};
use hoi_core::{Error, Result};

use crate::{
    BenchArgs, Cli, Command, EvalArgs, GenDataArgs, InferArgs, Mode, PredictorKind, SimulateArgs, Stage, TrainArgs,
};

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    model: Option<ModelConfig>,
    optimizer: Option<OptimizerConfig>,
    loss: Option<LossConfig>,
    data: Option<GenConfig>,
    scenario: Option<Scenario>,
    eval: Option<EvalConfig>,
    bench: Option<BenchConfig>,
}

fn read_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        message: format!("{}: {e}", path.display()),
    })
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("reports serialise") + "\n"
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = read_config(cli.config.as_deref())?;
    match &cli.command {
        Command::GenData(a) => gen_data(a, cfg, cli.seed),
        Command::Train(a) => train(a, cfg, cli.seed),
        Command::Infer(a) => infer(a, cli.seed),
        Command::Eval(a) => eval(a, cfg),
        Command::Bench(a) => bench_cmd(a, cfg, cli.seed),
        Command::Simulate(a) => simulate(a, cfg, cli.seed),
    }
}

fn gen_data(a: &GenDataArgs, cfg: FileConfig, seed: u64) -> Result<()> {
    let mut g = cfg.data.unwrap_or_default();
    g.seed = seed;
    if let Some(c) = a.clips {
        g.clips = c;
    }
    if let Some(f) = a.frames {
        g.frames = f;
    }
    let clips = generate_dataset(&g)?;
    save_clips(&a.out, &clips)?;
    println!("wrote {} clips to {}", clips.len(), a.out.display());
    Ok(())
}

fn loss_config(cfg: Option<LossConfig>, clips: &[hoi_core::data::ClipRecord], model: &ModelConfig) -> Result<LossConfig> {
    Ok(LossConfig {
        class_counts: class_counts(clips, model)?,
        ..cfg.unwrap_or_default()
    })
}

fn train(a: &TrainArgs, cfg: FileConfig, seed: u64) -> Result<()> {
    let clips = load_clips(&a.data)?;
    let mut opt = cfg.optimizer.unwrap_or_default();
    opt.seed = seed;
    if let Some(e) = a.epochs {
        opt.epochs = e;
    }
    if let Some(lr) = a.lr {
        opt.peak_lr = lr;
    }
    let fit = FitOptions {
        target_map: a.target_map,
        ..Default::default()
    };
    let source = SyntheticBackbone { seed };
    let (model, curve) = match a.stage {
        Stage::Detection => {
            let mut model = match &a.init {
                Some(p) => load_weights(p)?,
                None => {
                    let mc = cfg.model.unwrap_or_else(|| with_generated_classes(ModelConfig::default()));
                    HoiModel::new(ModelConfig { horizons: vec![0], ..mc }, seed)?
                }
            };
            let set = TrainSet::prepare(&model, &clips, &source)?;
            let loss = loss_config(cfg.loss, &clips, &model.config)?;
            let curve = train_detection(&mut model, &set, &loss, &opt, &fit)?;
            (model, curve)
        }
        Stage::Hydra => {
            let detection = a.init.as_deref().map(load_weights).transpose()?;
            let shape = match &detection {
                Some(d) => d.clone().with_horizons(a.horizons.clone(), seed)?,
                None => HoiModel::new(
                    ModelConfig {
                        horizons: a.horizons.clone(),
                        ..with_generated_classes(ModelConfig::default())
                    },
                    seed,
                )?,
            };
            let set = TrainSet::prepare(&shape, &clips, &source)?;
            let loss = loss_config(cfg.loss, &clips, &shape.config)?;
            train_hydra(detection.as_ref(), &set, &a.horizons, &loss, &opt, &fit)?
        }
    };
    save_weights(&model, &a.out)?;
    if let Some(p) = &a.curve {
        write(p, &loss_curve_csv(&curve))?;
    }
    if let Some(last) = curve.last() {
        println!(
            "trained {} epochs; final loss {:.5}, train mAP {:.4}; wrote {}",
            curve.len(),
            last.loss,
            last.train_map,
            a.out.display()
        );
    }
    Ok(())
}

fn infer(a: &InferArgs, seed: u64) -> Result<()> {
    let model = load_weights(&a.weights)?;
    let clips = load_clips(&a.data)?;
    let preds = predict_clips(&model, &clips, &SyntheticBackbone { seed }, &a.horizons, a.threshold)?;
    save_predictions(&a.out, &preds)?;
    println!("wrote {} pair predictions to {}", preds.len(), a.out.display());
    Ok(())
}

fn eval(a: &EvalArgs, cfg: FileConfig) -> Result<()> {
    let mut ec = cfg.eval.unwrap_or_default();
    if let Some(i) = a.iou {
        ec.iou_threshold = i;
    }
    if let Some(k) = a.topk {
        ec.top_k = k;
    }
    if let Some(m) = a.mode {
        ec.mode = match m {
            Mode::Oracle => EvalMode::Oracle,
            Mode::Detection => EvalMode::Detection,
        };
    }
    let model_cfg = match &a.weights {
        Some(p) => load_weights(p)?.config,
        None => cfg.model.unwrap_or_else(|| with_generated_classes(ModelConfig::default())),
    };
    let preds = load_predictions(&a.predictions)?;
    let gt = load_clips(&a.data)?;
    let detected = a.detected.as_deref().map(load_clips).transpose()?;
    let report = evaluate_predictions(&preds, &gt, detected.as_deref(), &model_cfg, a.tau, &ec)?;
    let json = to_json(&report);
    match &a.out {
        Some(p) => {
            write(p, &json)?;
            let map = report.map_full.map_or("n/a".to_string(), |m| format!("{m:.4}"));
            println!("map_full {map}; wrote {}", p.display());
        }
        None => print!("{json}"),
    }
    Ok(())
}

fn bench_cmd(a: &BenchArgs, cfg: FileConfig, seed: u64) -> Result<()> {
    let model = match &a.weights {
        Some(p) => load_weights(p)?,
        None => {
            let mc = cfg.model.unwrap_or_else(|| with_generated_classes(ModelConfig::default()));
            HoiModel::new(ModelConfig { horizons: a.horizons.clone(), ..mc }, seed)?
        }
    };
    let mut bc = cfg.bench.unwrap_or_default();
    if !a.pairs.is_empty() {
        bc.pair_counts = a.pairs.clone();
    }
    if let Some(r) = a.repeats {
        bc.repeats = r;
    }
    if let Some(w) = a.warmup {
        bc.warmup = w;
    }
    let result = bench(&model, &bc, seed)?;
    let json = to_json(&result);
    match &a.out {
        Some(p) => {
            write(p, &json)?;
            match &result.fit {
                Some(f) => println!("slope {:.4} ms/pair, intercept {:.3} ms, r2 {:.4}", f.slope, f.intercept, f.r2),
                None => println!("single pair count; no fit"),
            }
        }
        None => print!("{json}"),
    }
    Ok(())
}

fn simulate(a: &SimulateArgs, cfg: FileConfig, seed: u64) -> Result<()> {
    let base = cfg.scenario.unwrap_or_default();
    let cells = match a.predictor {
        PredictorKind::Scripted => sweep(&base, &a.thresholds, &a.taus, a.episodes, seed)?,
        PredictorKind::Model => {
            let path = a
                .weights
                .as_deref()
                .ok_or_else(|| Error::Config("the model predictor needs --weights".into()))?;
            let model = load_weights(path)?;
            sweep_with(&base, &a.thresholds, &a.taus, a.episodes, seed, |sc| {
                ModelPredictor::new(model.clone(), seed, sc.tau_a)
            })?
        }
    };
    let csv = fluency_csv(&cells);
    match &a.out {
        Some(p) => {
            write(p, &csv)?;
            println!("wrote {} fluency cells to {}", cells.len(), p.display());
        }
        None => print!("{csv}"),
    }
    if let Some(p) = &a.report {
        write(p, &to_json(&cells))?;
    }
    Ok(())
}
