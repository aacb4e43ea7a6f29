use std::path::{Path, PathBuf};

use czsl_core::data::{
    self, load_manifest, load_samples, DatasetManifest, LabelSpace, Sample, Split, SyntheticConfig,
};
use czsl_core::error::{Error, Result};
use czsl_core::evaluation::{
    evaluate_model, write_text, EvalReport, Evaluation, SweepMode, WeightLog,
};
use czsl_core::model::{FeatureBank, Model};
use czsl_core::plot;
use czsl_core::training::{build_model, train, Checkpoint, TrainConfig, TrainData};

use crate::run::RunDir;
use crate::{
    AblateArgs, Cli, Command, ConfigArgs, EvalArgs, GenDataArgs, PlotWeightsArgs, SweepArgs,
};

pub fn dispatch(cli: &Cli, args: &[String]) -> Result<()> {
    let root = &cli.output_root;
    match &cli.command {
        Command::GenData(a) => gen_data(root, args, a),
        Command::Train(a) => train_cmd(root, args, &a.cfg),
        Command::Eval(a) => eval_cmd(root, args, a),
        Command::Ablate(a) => ablate(root, args, a),
        Command::Sweep(a) => sweep(root, args, a),
        Command::PlotWeights(a) => plot_weights(root, args, a),
    }
}

fn start(
    root: &Path,
    command: &str,
    args: &[String],
    seed: u64,
    config: serde_json::Value,
) -> Result<RunDir> {
    let run = RunDir::create(root, command)?;
    run.write_header(command, args, seed, &config)?;
    println!("run directory: {}", run.path.display());
    Ok(run)
}

fn gen_data(root: &Path, args: &[String], a: &GenDataArgs) -> Result<()> {
    let cfg = SyntheticConfig {
        n_attrs: a.attrs,
        n_objs: a.objs,
        seen_fraction: a.seen_fraction,
        images_per_pair: a.images_per_pair,
        image_size: a.image_size,
        seed: a.seed,
    };
    let run = start(root, "gen-data", args, a.seed, serde_json::to_value(&cfg)?)?;
    let out = a.out.clone().unwrap_or_else(|| run.file("data"));
    let m = data::generate_synthetic(&cfg, &out)?;
    println!("dataset: {} ({} images)", out.display(), m.records.len());
    run.finish()
}

/// Resolves the effective training config from the flag layers.
pub fn resolve_config(a: &ConfigArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::from_file(p)?,
        None => TrainConfig::default(),
    };
    let mut named: Vec<(&str, String)> = Vec::new();
    let mut opt = |k: &'static str, v: Option<String>| {
        if let Some(v) = v {
            named.push((k, v));
        }
    };
    opt("strategy", a.agg_strategy.clone());
    opt("pooling", a.pooling.clone());
    opt("focus", a.focus_loss.clone());
    opt("detach_maps", a.detach_maps.then(|| "true".into()));
    opt(
        "freeze_node_init",
        a.freeze_node_init.then(|| "true".into()),
    );
    opt("fuse", a.fuse.clone());
    opt("grid", a.grid.map(|v| v.to_string()));
    opt("alpha", a.alpha.map(|v| v.to_string()));
    opt("tau", a.tau.map(|v| v.to_string()));
    opt("epochs", a.epochs.map(|v| v.to_string()));
    opt("lr", a.lr.map(|v| v.to_string()));
    opt("batch_size", a.batch_size.map(|v| v.to_string()));
    opt("seed", a.seed.map(|v| v.to_string()));
    opt("levels", a.levels.clone());
    for (k, v) in named {
        cfg.set(k, &v)?;
    }
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Decoded splits of a dataset.
pub struct Dataset {
    pub label_space: LabelSpace,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    pub image_size: usize,
}

fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("manifest.tsv")
    } else {
        p.to_path_buf()
    }
}

fn split_samples(m: &DatasetManifest, ls: &LabelSpace, split: Split) -> Result<Vec<Sample>> {
    if m.has_split(split) {
        load_samples(m, ls, split)
    } else {
        Ok(Vec::new())
    }
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let (ls, m) = load_manifest(manifest_path(path))?;
    let train = split_samples(&m, &ls, Split::Train)?;
    let val = split_samples(&m, &ls, Split::Val)?;
    let test = split_samples(&m, &ls, Split::Test)?;
    let image_size = train
        .iter()
        .chain(&val)
        .chain(&test)
        .map(|s| s.image.dim())
        .next()
        .map(|(_, h, w)| {
            if h == w {
                Ok(h)
            } else {
                Err(Error::Validation(format!(
                    "images must be square, got {h}×{w}"
                )))
            }
        })
        .ok_or_else(|| Error::Validation("dataset has no images".into()))??;
    Ok(Dataset {
        label_space: ls,
        train,
        val,
        test,
        image_size,
    })
}

fn bank(model: &Model, samples: &[Sample]) -> Result<Option<FeatureBank>> {
    if samples.is_empty() {
        Ok(None)
    } else {
        FeatureBank::build(&model.backbone, samples).map(Some)
    }
}

/// Trains on the train split (selecting by validation HM when a val split
/// exists) and evaluates the selected model on test, or val without test.
fn train_and_evaluate(
    cfg: &TrainConfig,
    ds: &Dataset,
    out_dir: Option<&Path>,
) -> Result<(Model, Evaluation)> {
    ds.label_space.require_unseen()?;
    let model = build_model(cfg, &ds.label_space, ds.image_size)?;
    let train_bank = bank(&model, &ds.train)?
        .ok_or_else(|| Error::Validation("training split is empty".into()))?;
    let val_bank = bank(&model, &ds.val)?;
    let test_bank = bank(&model, &ds.test)?;
    let outcome = train(
        model,
        cfg,
        TrainData {
            train: &train_bank,
            val: val_bank.as_ref(),
        },
        out_dir,
    )?;
    let best = outcome.best.to_model()?;
    let eval_bank = test_bank
        .as_ref()
        .or(val_bank.as_ref())
        .ok_or_else(|| Error::Validation("dataset has neither a test nor a val split".into()))?;
    let ev = evaluate_model(
        &best,
        eval_bank,
        cfg.sweep_mode(),
        cfg.eval_batch_size,
        cfg.alpha,
    )?;
    Ok((best, ev))
}

fn write_evaluation(run: &RunDir, ev: &Evaluation) -> Result<()> {
    run.write("report.json", &ev.fused.to_json()?)?;
    run.write("report_composition.json", &ev.composition_only.to_json()?)?;
    run.write("curve.csv", &ev.fused.curve.to_csv())?;
    run.write("weights.csv", &ev.weights.to_csv())
}

fn print_report(label: &str, r: &EvalReport) {
    println!(
        "{label}: S={:.4} U={:.4} AUC={:.4} HM={:.4}",
        r.s, r.u, r.auc, r.hm
    );
}

fn train_cmd(root: &Path, args: &[String], a: &ConfigArgs) -> Result<()> {
    let cfg = resolve_config(a)?;
    let ds = load_dataset(&a.data)?;
    let run = start(root, "train", args, cfg.seed, serde_json::to_value(&cfg)?)?;
    run.write("config.txt", &cfg.to_text())?;
    let (_, ev) = train_and_evaluate(&cfg, &ds, Some(&run.path))?;
    write_evaluation(&run, &ev)?;
    print_report("fused", &ev.fused);
    print_report("composition only", &ev.composition_only);
    run.finish()
}

fn evaluate_checkpoint(
    path: &Path,
    data: &Path,
    split: &str,
    grid: Option<usize>,
) -> Result<(Checkpoint, Evaluation)> {
    let ckpt = Checkpoint::load(path)?;
    let model = ckpt.to_model()?;
    let ds = load_dataset(data)?;
    if ds.label_space != model.label_space {
        return Err(Error::Validation(
            "dataset label space differs from the checkpoint's".into(),
        ));
    }
    let samples = match split.parse::<Split>()? {
        Split::Train => &ds.train,
        Split::Val => &ds.val,
        Split::Test => &ds.test,
    };
    let b = bank(&model, samples)?
        .ok_or_else(|| Error::Validation(format!("split {split} is empty")))?;
    let mode = match grid.unwrap_or(ckpt.train_config.grid) {
        0 => SweepMode::Exact,
        k => SweepMode::Grid(k),
    };
    let ev = evaluate_model(
        &model,
        &b,
        mode,
        ckpt.train_config.eval_batch_size,
        ckpt.train_config.alpha,
    )?;
    Ok((ckpt, ev))
}

fn eval_cmd(root: &Path, args: &[String], a: &EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let run = start(
        root,
        "eval",
        args,
        ckpt.train_config.seed,
        serde_json::to_value(&ckpt.train_config)?,
    )?;
    let (_, ev) = evaluate_checkpoint(&a.checkpoint, &a.data, &a.split, a.grid)?;
    write_evaluation(&run, &ev)?;
    print_report("fused", &ev.fused);
    print_report("composition only", &ev.composition_only);
    run.finish()
}

fn list<T>(text: &str, what: &str, parse: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    let items: Vec<T> = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(parse)
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(Error::Validation(format!("{what} list is empty")));
    }
    Ok(items)
}

/// One ablation cell.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub strategy: String,
    pub pooling: String,
    pub focus: bool,
    pub levels: Vec<usize>,
}

pub fn ablation_cells(a: &AblateArgs) -> Result<Vec<Cell>> {
    let strategies = list(&a.strategies, "strategy", |s| {
        s.parse::<czsl_core::mfa::AggregationStrategy>()
            .map(|v| v.to_string())
    })?;
    let poolings = list(&a.poolings, "pooling", |s| {
        s.parse::<czsl_core::pooling::PoolingKind>()
            .map(|v| v.to_string())
    })?;
    let focus = list(&a.focus_modes, "focus", |s| match s {
        "on" => Ok(true),
        "off" => Ok(false),
        other => Err(Error::Validation(format!(
            "focus mode must be on or off, got `{other}`"
        ))),
    })?;
    let mut level_sets = Vec::new();
    for set in a
        .level_sets
        .split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
    {
        level_sets.push(list(set, "level", |s| {
            s.parse::<usize>()
                .map_err(|e| Error::Validation(format!("bad level `{s}`: {e}")))
        })?);
    }
    if level_sets.is_empty() {
        return Err(Error::Validation("no level sets given".into()));
    }
    let mut cells = Vec::new();
    for s in &strategies {
        for p in &poolings {
            for &f in &focus {
                for l in &level_sets {
                    cells.push(Cell {
                        strategy: s.clone(),
                        pooling: p.clone(),
                        focus: f,
                        levels: l.clone(),
                    });
                }
            }
        }
    }
    Ok(cells)
}

fn levels_text(l: &[usize]) -> String {
    l.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

fn ablate(root: &Path, args: &[String], a: &AblateArgs) -> Result<()> {
    let base = resolve_config(&a.cfg)?;
    let cells = ablation_cells(a)?;
    let ds = load_dataset(&a.cfg.data)?;
    let run = start(
        root,
        "ablate",
        args,
        base.seed,
        serde_json::to_value(&base)?,
    )?;
    let mut csv = String::from("cell,strategy,pooling,focus,levels,seed,S,U,AUC,HM\n");
    for (i, c) in cells.iter().enumerate() {
        let mut cfg = base.clone();
        cfg.set("strategy", &c.strategy)?;
        cfg.set("pooling", &c.pooling)?;
        cfg.focus = c.focus;
        cfg.levels = c.levels.clone();
        cfg.seed = base.seed + i as u64;
        let (_, ev) = train_and_evaluate(&cfg, &ds, None)?;
        let r = &ev.fused;
        let row = format!(
            "{i},{},{},{},{},{},{},{},{},{}\n",
            c.strategy,
            c.pooling,
            if c.focus { "on" } else { "off" },
            levels_text(&c.levels),
            cfg.seed,
            r.s,
            r.u,
            r.auc,
            r.hm
        );
        print!("{row}");
        csv.push_str(&row);
        run.write(&format!("cells/{i}/report.json"), &r.to_json()?)?;
    }
    run.write("ablate.csv", &csv)?;
    run.finish()
}

fn sweep(root: &Path, args: &[String], a: &SweepArgs) -> Result<()> {
    let base = resolve_config(&a.cfg)?;
    let values = list(&a.values, "value", |s| {
        s.parse::<f64>()
            .map_err(|e| Error::Validation(format!("bad value `{s}`: {e}")))
    })?;
    let mut cfgs = Vec::new();
    for (i, v) in values.iter().enumerate() {
        let mut cfg = base.clone();
        cfg.set(&a.param, &v.to_string())?;
        cfg.seed = base.seed + i as u64;
        cfg.validate()?;
        cfgs.push(cfg);
    }
    let ds = load_dataset(&a.cfg.data)?;
    let run = start(root, "sweep", args, base.seed, serde_json::to_value(&base)?)?;
    let mut csv = format!("{},seed,S,U,AUC,HM\n", a.param);
    let (mut hm, mut auc) = (Vec::new(), Vec::new());
    for (v, cfg) in values.iter().zip(&cfgs) {
        let (_, ev) = train_and_evaluate(cfg, &ds, None)?;
        let r = &ev.fused;
        let row = format!("{v},{},{},{},{},{}\n", cfg.seed, r.s, r.u, r.auc, r.hm);
        print!("{row}");
        csv.push_str(&row);
        hm.push((*v, r.hm));
        auc.push((*v, r.auc));
    }
    run.write("sweep.csv", &csv)?;
    plot::line_png(&[hm, auc], &run.file("sweep.png"))?;
    run.finish()
}

fn plot_weights(root: &Path, args: &[String], a: &PlotWeightsArgs) -> Result<()> {
    let run = start(
        root,
        "plot-weights",
        args,
        0,
        serde_json::json!({ "split": a.split }),
    )?;
    let log = match (&a.log, &a.checkpoint, &a.data) {
        (Some(p), _, _) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            WeightLog::parse_csv(&text)?
        }
        (None, Some(c), Some(d)) => {
            let (_, ev) = evaluate_checkpoint(c, d, &a.split, None)?;
            write_text(&run.file("weights.csv"), &ev.weights.to_csv())?;
            ev.weights
        }
        _ => {
            return Err(Error::Validation(
                "give --log, or --checkpoint with --data".into(),
            ))
        }
    };
    let pts = plot::plot_weights(&log, &run.path, "weights_scatter")?;
    println!("{} points", pts.len());
    run.finish()
}
