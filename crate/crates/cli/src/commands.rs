use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use cimnas_core::analysis::run_study;
use cimnas_core::arch::{Activation, ArchitectureSpec};
use cimnas_core::eval::evaluate_distribution;
use cimnas_core::nas::{self, ChildConfig, ControllerConfig, SearchConfig, SearchSpace};
use cimnas_core::nn::{read_checkpoint, write_checkpoint, Model};
use cimnas_core::noise::{derive_seed, DEFAULT_SIGMA};
use cimnas_core::report::{AnalysisFile, EvalFile, Summary};
use cimnas_core::train::TrainConfig;

use crate::datasets;
use crate::{
    ActivationArg, AnalyzeArgs, Cli, EvalArgs, Preset, ReportArgs, RunRecord, SearchArgs, SpacePreset, TrainArgs,
};

const INIT: u64 = 0x494e_4954;
const SHUFFLE: u64 = 0x5348_5546;
const TRAIN_NOISE: u64 = 0x544e_4f49;
const ANALYZE_NOISE: u64 = 0x414e_4f49;
const EVAL_NOISE: u64 = 0x454e_4f49;

/// `model.cimw` -> `model.cimw<suffix>`
fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<(Model, PathBuf)> {
    let arch_path = sidecar(path, ".arch.json");
    let arch = ArchitectureSpec::load(&arch_path)?;
    let model = Model::new(arch.build()?, read_checkpoint(path)?)?;
    Ok((model, arch_path))
}

fn check_compatible(model: &Model, shape: [usize; 3], classes: usize) -> Result<()> {
    if model.net.input_shape() != shape || model.net.classes() != classes {
        bail!(cimnas_core::Error::Shape(format!(
            "model expects input {:?} with {} classes, dataset has {:?} with {}",
            model.net.input_shape(),
            model.net.classes(),
            shape,
            classes
        )));
    }
    Ok(())
}

pub fn train(cli: &Cli, a: &TrainArgs) -> Result<RunRecord> {
    let seeds = BTreeMap::from([
        ("init".to_string(), derive_seed(cli.seed, INIT)),
        ("shuffle".to_string(), derive_seed(cli.seed, SHUFFLE)),
        ("train_noise".to_string(), derive_seed(cli.seed, TRAIN_NOISE)),
    ]);
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        noise: a.noise.spec(0.0, seeds["train_noise"])?,
        quantize: !a.no_quantize,
        seed: seeds["shuffle"],
    };
    cfg.validate()?;
    let data = datasets::load(&cli.data_dir, &a.data, true)?;
    let train_set = data.train.as_ref().expect("training split requested");
    let (shape, classes) = (train_set.image_shape(), train_set.classes());
    let mut inputs = data.files.clone();
    let arch = match &a.arch {
        Some(p) => {
            inputs.push(p.clone());
            ArchitectureSpec::load(p)?
        }
        None => {
            let activation = match a.activation {
                ActivationArg::Relu => Activation::Relu,
                ActivationArg::Sigmoid => Activation::Sigmoid,
            };
            match a.preset {
                Preset::Mlp => ArchitectureSpec::mlp(shape, a.width.unwrap_or(64), classes, activation),
                Preset::Cnn => ArchitectureSpec {
                    activation,
                    ..ArchitectureSpec::small_cnn(shape, a.width.unwrap_or(8), classes)
                },
            }
        }
    };
    let mut model = Model::init(arch.build()?, seeds["init"]);
    check_compatible(&model, shape, classes)?;
    let report = cimnas_core::train::train(&mut model, train_set, &cfg, Some(&data.test))?;

    create_parent(&a.out)?;
    write_checkpoint(&a.out, &model.params)?;
    let arch_path = sidecar(&a.out, ".arch.json");
    arch.save(&arch_path)?;
    let log_path = sidecar(&a.out, ".train.json");
    write_json(
        &log_path,
        &serde_json::json!({ "dataset": data.description, "train_examples": train_set.len(), "config": cfg, "report": report }),
    )?;
    let last = report.epochs.last().expect("at least one epoch");
    println!(
        "trained {} epochs on {} examples: loss {:.4}, test accuracy {:.4}, skipped batches {}",
        a.epochs,
        train_set.len(),
        last.loss,
        last.clean_accuracy,
        report.state.skipped_batches
    );
    Ok(RunRecord {
        primary: a.out.clone(),
        inputs,
        outputs: vec![a.out.clone(), arch_path, log_path],
        volatile: vec![],
        seeds,
        noise: Some(cfg.noise),
        resolved: serde_json::to_value(a)?,
    })
}

pub fn analyze(cli: &Cli, a: &AnalyzeArgs) -> Result<RunRecord> {
    let (model, arch_path) = load_model(&a.model)?;
    let data = datasets::load(&cli.data_dir, &a.data, false)?;
    check_compatible(&model, data.test.image_shape(), data.test.classes())?;
    if a.input_index >= data.test.len() {
        bail!(cimnas_core::Error::InvalidArgument(format!(
            "input index {} outside the {}-example test set",
            a.input_index,
            data.test.len()
        )));
    }
    let input = data.test.image_tensor(a.input_index)?;
    let seed = derive_seed(cli.seed, ANALYZE_NOISE);
    let spec = a.noise.spec(DEFAULT_SIGMA, seed)?;
    let w_exp = model.net.effective_params(&model.params);
    let report = run_study(
        &model.net,
        &w_exp,
        &input,
        a.input_index,
        &spec,
        a.samples,
        a.bins,
        a.domain.into(),
    )?;

    create_parent(&a.out)?;
    let mut outputs = vec![a.out.clone()];
    if let Some(h) = &a.histograms {
        create_parent(h)?;
        std::fs::write(h, report.histogram_table()).with_context(|| format!("writing {}", h.display()))?;
        outputs.push(h.clone());
    }
    println!(
        "{} samples, {} bins: mean chi2 {}, mean mse {}, degenerate elements {}",
        a.samples,
        a.bins,
        report.mean_chi_square.map_or("-".into(), |v| format!("{v:.3e}")),
        report.mean_mse.map_or("-".into(), |v| format!("{v:.3e}")),
        report.degenerate_elements
    );
    write_json(
        &a.out,
        &AnalysisFile {
            model: a.model.display().to_string(),
            report,
        },
    )?;
    let mut inputs = data.files;
    inputs.extend([a.model.clone(), arch_path]);
    Ok(RunRecord {
        primary: a.out.clone(),
        inputs,
        outputs,
        volatile: vec![],
        seeds: BTreeMap::from([("noise".to_string(), seed)]),
        noise: Some(spec),
        resolved: serde_json::to_value(a)?,
    })
}

pub fn eval(cli: &Cli, a: &EvalArgs) -> Result<RunRecord> {
    let (model, arch_path) = load_model(&a.model)?;
    let data = datasets::load(&cli.data_dir, &a.data, false)?;
    check_compatible(&model, data.test.image_shape(), data.test.classes())?;
    let seed = derive_seed(cli.seed, EVAL_NOISE);
    let spec = a.noise.spec(DEFAULT_SIGMA, seed)?;
    let dist = evaluate_distribution(&model.net, &model.params, &data.test, &spec, a.samples)?;
    println!(
        "clean {:.4}  mean {:.4}  p95min {:.4}  max {:.4}  (K={}, sigma={})",
        dist.clean_accuracy, dist.mean, dist.p95min, dist.max, dist.k, spec.sigma
    );
    create_parent(&a.out)?;
    write_json(
        &a.out,
        &EvalFile {
            model: a.model.display().to_string(),
            dataset: data.description.clone(),
            test_examples: data.test.len(),
            distribution: dist,
        },
    )?;
    let mut inputs = data.files;
    inputs.extend([a.model.clone(), arch_path]);
    Ok(RunRecord {
        primary: a.out.clone(),
        inputs,
        outputs: vec![a.out.clone()],
        volatile: vec![],
        seeds: BTreeMap::from([("noise".to_string(), seed)]),
        noise: Some(spec),
        resolved: serde_json::to_value(a)?,
    })
}

pub fn search(cli: &Cli, a: &SearchArgs) -> Result<RunRecord> {
    let data = datasets::load(&cli.data_dir, &a.data, true)?;
    let train_set = data.train.as_ref().expect("training split requested");
    let mut inputs = data.files.clone();
    let space = match &a.space {
        Some(p) => {
            inputs.push(p.clone());
            SearchSpace::load(p)?
        }
        None => match a.space_preset {
            SpacePreset::Standard => SearchSpace::standard(),
            SpacePreset::Micro => SearchSpace::micro(),
        },
    };
    let noise = a.noise.spec(DEFAULT_SIGMA, 0)?;
    let cfg = SearchConfig {
        episodes: a.episodes,
        child: ChildConfig {
            epochs: a.child_epochs,
            batch_size: a.batch_size,
            lr: a.lr,
        },
        samples: a.samples,
        statistic: a.statistic.into(),
        mu: noise.mu,
        sigma: noise.sigma,
        seed: cli.seed,
        repeat_limit: a.repeat_limit,
        controller: ControllerConfig::default(),
    };
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let history_path = a.out_dir.join("history.ndjson");
    let timings_path = a.out_dir.join("timings.ndjson");
    let open = |p: &Path| {
        File::create(p)
            .map(BufWriter::new)
            .with_context(|| format!("creating {}", p.display()))
    };
    let mut history = open(&history_path)?;
    let mut timings = open(&timings_path)?;
    let mut on_episode = |r: &nas::EpisodeRecord| -> cimnas_core::Result<()> {
        let io = |e: std::io::Error| cimnas_core::Error::Io {
            path: history_path.clone(),
            source: e,
        };
        writeln!(history, "{}", serde_json::to_string(r)?)
            .and_then(|_| history.flush())
            .map_err(io)?;
        let t = serde_json::json!({ "episode": r.episode, "wall_time_s": r.wall_time_s });
        writeln!(timings, "{t}").and_then(|_| timings.flush()).map_err(io)?;
        Ok(())
    };
    let result = if a.random {
        nas::run_random_search(&space, &cfg, train_set, &data.test, &mut on_episode)?
    } else {
        nas::run_search(&space, &cfg, train_set, &data.test, &mut on_episode)?
    };

    let best_path = a.out_dir.join("best_arch.json");
    result.best.architecture.save(&best_path)?;
    let summary_path = a.out_dir.join("summary.json");
    write_json(
        &summary_path,
        &serde_json::json!({
            "space": space,
            "config": cfg,
            "strategy": if a.random { "random" } else { "controller" },
            "episodes": result.history.len(),
            "termination": result.termination,
            "best_episode": result.best.episode,
            "best_reward": result.best.reward,
            "best_tokens": result.best.tokens,
            "total_train_batches": result.history.iter().map(|r| r.train_batches).sum::<u64>(),
        }),
    )?;
    let mut outputs = vec![history_path, best_path, summary_path];
    if let Some(c) = &result.controller {
        let p = a.out_dir.join("controller.json");
        write_json(&p, c)?;
        outputs.push(p);
    }
    println!(
        "{} episodes ({:?}); best reward {:.4} at episode {}",
        result.history.len(),
        result.termination,
        result.best.reward,
        result.best.episode
    );
    Ok(RunRecord {
        primary: a.out_dir.clone(),
        inputs,
        outputs,
        volatile: vec![timings_path],
        seeds: BTreeMap::new(),
        noise: Some(noise),
        resolved: serde_json::to_value(a)?,
    })
}

pub fn report(a: &ReportArgs) -> Result<Option<RunRecord>> {
    let paths: Vec<&Path> = a.files.iter().map(PathBuf::as_path).collect();
    let summary = Summary::from_files(&paths)?;
    let text = summary.render();
    print!("{text}");
    let mut outputs = Vec::new();
    if let Some(out) = &a.out {
        create_parent(out)?;
        std::fs::write(out, &text).with_context(|| format!("writing {}", out.display()))?;
        outputs.push(out.clone());
    }
    if let Some(json) = &a.json {
        create_parent(json)?;
        write_json(json, &summary)?;
        outputs.push(json.clone());
    }
    let Some(primary) = outputs.first().cloned() else {
        return Ok(None);
    };
    Ok(Some(RunRecord {
        primary,
        inputs: a.files.clone(),
        outputs,
        volatile: vec![],
        seeds: BTreeMap::new(),
        noise: None,
        resolved: serde_json::to_value(a)?,
    }))
}
