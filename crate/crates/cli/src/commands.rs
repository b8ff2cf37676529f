use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use locpred::abstraction::{
    prepare_dataset, read_dataset, write_dataset, DatasetHeader, DatasetParams, GridSpec, PrepareParams, RegionScaling,
    Sample,
};
use locpred::evalkit::{
    bench as run_bench, comparison_csv, comparison_table, evaluate_model, split_dataset, HoPredictor, MetricsReport,
    SplitSpec, SplitUnit, DEFAULT_BENCH_PREDICTIONS,
};
use locpred::fedsim::{partition_users, run_rounds, FedConfig, RoundConfig, Weighting};
use locpred::models::{fit, predict_cell, ArchConfig, Model, TrainConfig, Variant};
use locpred::trajkit::{generate_synthetic, parse_trajectories, write_trajectories, Mode, SessionParams, SynthConfig};
use serde_json::json;

use crate::error::{CliError, Result};
use crate::output::{io_err, sidecar, Ctx, OUTPUT_DIR_ENV};
use crate::settings::Settings;
use crate::{BenchArgs, Cli, Command, EvalArgs, GenArgs, ModelArgs, PredictArgs, PreprocessArgs, TrainArgs, TrainFlArgs};

pub fn run(cli: Cli) -> Result<()> {
    let mut settings = Settings::load(cli.config.as_deref())?;
    let jobs = settings.get("jobs", cli.jobs, 1usize)?;
    if jobs == 0 {
        return Err(CliError::invalid("--jobs must be at least 1"));
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
        log::debug!("thread pool already configured: {e}");
    }
    let out_dir = cli
        .output_dir
        .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    let mut ctx = Ctx::new(settings, out_dir, jobs);
    match cli.command {
        Command::Gen(a) => gen(a, &mut ctx),
        Command::Preprocess(a) => preprocess(a, &mut ctx),
        Command::Train(a) => train(a, &mut ctx),
        Command::TrainFl(a) => train_fl(a, &mut ctx),
        Command::Eval(a) => eval(a, &mut ctx),
        Command::Predict(a) => predict(a, &mut ctx),
        Command::Bench(a) => bench(a, &mut ctx),
    }
}

fn parse_flag<T>(key: &str, raw: Option<String>) -> Result<Option<T>>
where
    T: FromStr,
    T::Err: std::fmt::Display,
{
    raw.map(|r| r.parse::<T>().map_err(|e| CliError::invalid(format!("--{key} '{r}': {e}")))).transpose()
}

fn split_unit(s: &str) -> Result<SplitUnit> {
    match s {
        "sample" => Ok(SplitUnit::Sample),
        "user" => Ok(SplitUnit::User),
        other => Err(CliError::invalid(format!("split unit must be sample or user, got '{other}'"))),
    }
}

fn on_off(key: &str, s: &str) -> Result<bool> {
    match s {
        "on" | "true" | "yes" => Ok(true),
        "off" | "false" | "no" => Ok(false),
        other => Err(CliError::invalid(format!("--{key} must be on or off, got '{other}'"))),
    }
}

fn presets(preset: &str, variant: Variant, header: &DatasetHeader, seed: u64) -> Result<(ArchConfig, TrainConfig)> {
    let (m, k) = (header.m(), header.k());
    match preset {
        "desk" => Ok((ArchConfig::desk(variant, m, k, seed), TrainConfig::desk(seed))),
        "full" => Ok((ArchConfig::full(variant, m, k, seed), TrainConfig::full(seed))),
        other => Err(CliError::invalid(format!("preset must be desk or full, got '{other}'"))),
    }
}

fn load_dataset(ctx: &mut Ctx, path: &Path) -> Result<(DatasetHeader, Vec<Sample>)> {
    let r = ctx.open_input(path)?;
    let (header, samples) = read_dataset(r).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    if samples.is_empty() {
        return Err(CliError::invalid(format!("{}: dataset has no samples", path.display())));
    }
    Ok((header, samples))
}

fn load_model(ctx: &mut Ctx, path: &Path, header: &DatasetHeader) -> Result<Model> {
    let r = ctx.open_input(path)?;
    let model = Model::load(r).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    if model.arch.k != header.k() || model.arch.m != header.m() {
        return Err(CliError::invalid(format!(
            "{} expects k = {}, M = {} but the dataset has k = {}, M = {}",
            path.display(),
            model.arch.k,
            model.arch.m,
            header.k(),
            header.m()
        )));
    }
    Ok(model)
}

fn save_model(ctx: &mut Ctx, model: &Model, path: &Path) -> Result<()> {
    let mut w = ctx.create(path)?;
    model.save(&mut w)?;
    w.flush().map_err(io_err(path))
}

fn write_csv<T: serde::Serialize>(ctx: &mut Ctx, path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::invalid(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::invalid(e.to_string()))?;
    ctx.write_text(path, &String::from_utf8_lossy(&bytes))
}

fn gen(a: GenArgs, ctx: &mut Ctx) -> Result<()> {
    let s = &mut ctx.settings;
    let d = SynthConfig::default();
    let cfg = SynthConfig {
        n_users: s.get("users", a.users, d.n_users)?,
        duration_minutes: s.get("minutes", a.minutes, d.duration_minutes)?,
        seed: s.get("seed", a.seed, d.seed)?,
        grid_block_m: s.get("block", a.block, d.grid_block_m)?,
        v_mean: s.get("v-mean", a.v_mean, d.v_mean)?,
        v_sd: s.get("v-sd", a.v_sd, d.v_sd)?,
        n_anchors_per_user: s.get("anchors", a.anchors, d.n_anchors_per_user)?,
        max_dwell_minutes: s.get("max-dwell", a.max_dwell, d.max_dwell_minutes)?,
        city_blocks: s.get("city-blocks", a.city_blocks, d.city_blocks)?,
        ..d
    };
    let out = s.get("out", a.out, PathBuf::from("synthetic.csv"))?;
    let out = ctx.output_path(&out)?;
    let points = generate_synthetic(&cfg)?;
    let mut w = ctx.create(&out)?;
    write_trajectories(&mut w, &points)?;
    w.flush().map_err(io_err(&out))?;
    println!("wrote {} points for {} users to {}", points.len(), cfg.n_users, out.display());
    let summary = json!({ "points": points.len(), "users": cfg.n_users, "v_max": cfg.v_max() });
    ctx.finish("gen", &out, Some(cfg.seed), summary)
}

fn preprocess(a: PreprocessArgs, ctx: &mut Ctx) -> Result<()> {
    let s = &mut ctx.settings;
    let input: PathBuf = s.require("input", a.input)?;
    let mode = s.get("mode", parse_flag::<Mode>("mode", a.mode)?, Mode::Walk)?;
    let cell = s.get("cell-size", a.cell_size, 20.0)?;
    let region = s.get("region", a.region, 200.0)?;
    let seq_len = s.get("seq-len", a.seq_len, 9usize)?;
    let horizon = s.get("horizon", a.horizon, 1u32)?;
    let bound = s.get("bound", a.bound, SynthConfig::default().v_max())?;
    let keep_still = s.get("keep-standing-still", a.keep_standing_still, false)?;
    let raw = s.get("raw-counts", a.raw_counts, false)?;
    let history_fraction = s.get("history-fraction", a.history_fraction, 0.75)?;
    let interval = s.get("interval", a.interval, 60i64)?;
    let gap = s.get("gap", a.gap, 180i64)?;
    let out = s.get("out", a.out, PathBuf::from("dataset.bin"))?;
    let params = PrepareParams {
        dataset: DatasetParams {
            spec: GridSpec::new(cell, region)?,
            seq_len_locations: seq_len,
            horizon,
            bound_m: bound,
            drop_standing_still: !keep_still,
            scaling: if raw { RegionScaling::RawCounts } else { RegionScaling::MaxNormalized },
        },
        session: SessionParams { interval_s: interval, gap_threshold_s: gap },
        history_fraction,
    };
    params.validate()?;
    let out = ctx.output_path(&out)?;
    let tracks = parse_trajectories(ctx.open_input(&input)?, mode)?;
    let prepared = prepare_dataset(&tracks, mode, &params)?;
    let samples = &prepared.built.samples;
    if samples.is_empty() {
        return Err(CliError::invalid(format!(
            "no samples produced from {} users ({:?})",
            tracks.len(),
            prepared.built.stats
        )));
    }
    let mut w = ctx.create(&out)?;
    write_dataset(&mut w, &params.dataset, &prepared.built.stats, samples)?;
    w.flush().map_err(io_err(&out))?;
    let m = params.dataset.spec.m;
    println!("wrote {} samples (k = {}, M = {m}) to {}", samples.len(), params.dataset.k(), out.display());
    let summary = json!({
        "samples": samples.len(),
        "users": tracks.len(),
        "m": m,
        "k": params.dataset.k(),
        "stats": prepared.built.stats,
        "anchor": { "lat": prepared.anchor.lat, "lon": prepared.anchor.lon },
    });
    ctx.finish("preprocess", &out, None, summary)
}

struct Common {
    preset: String,
    seed: u64,
    split_seed: u64,
    lr: Option<f64>,
}

fn common(s: &mut Settings, a: ModelArgs) -> Result<Common> {
    Ok(Common {
        preset: s.get("preset", a.preset, "desk".to_string())?,
        seed: s.get("seed", a.seed, 0)?,
        split_seed: s.get("split-seed", a.split_seed, 0)?,
        lr: s.opt("lr", a.lr)?,
    })
}

fn train(a: TrainArgs, ctx: &mut Ctx) -> Result<()> {
    let s = &mut ctx.settings;
    let data: PathBuf = s.require("data", a.data)?;
    let variant = s.get("model", parse_flag::<Variant>("model", a.model)?, Variant::Fglp)?;
    let c = common(s, a.common)?;
    let unit = split_unit(&s.get("split-unit", a.split_unit, "sample".to_string())?)?;
    let epochs = s.opt("epochs", a.epochs)?;
    let patience = s.opt("patience", a.patience)?;
    let batch = s.opt("batch-size", a.batch_size)?;
    let out = s.get("out", a.out, PathBuf::from("model.ckpt"))?;
    let out = ctx.output_path(&out)?;

    let (header, samples) = load_dataset(ctx, &data)?;
    let (arch, mut tc) = presets(&c.preset, variant, &header, c.seed)?;
    tc.max_epochs = epochs.unwrap_or(tc.max_epochs);
    tc.patience = patience.unwrap_or(tc.patience);
    tc.batch_size = batch.unwrap_or(tc.batch_size);
    tc.lr = c.lr.unwrap_or(tc.lr);
    let split = split_dataset(&samples, &SplitSpec::four_one_one(unit, c.split_seed))?;
    let mut model = Model::build(&arch)?;
    let history = fit(&mut model, &split.train, &split.val, &tc)?;
    let report = evaluate_model(&model, &split.test)?;

    save_model(ctx, &model, &out)?;
    write_csv(ctx, &sidecar(&out, "history.csv"), &history.epochs)?;
    let sizes = json!({ "unit": unit, "seed": c.split_seed, "train": split.train.len(), "val": split.val.len(), "test": split.test.len() });
    let full = json!({ "test": report, "history": history, "split": sizes, "arch": arch, "train": tc });
    ctx.write_json(&sidecar(&out, "report.json"), &full)?;
    print!("{}", comparison_table(std::slice::from_ref(&report)));
    println!("best epoch {:?} of {}; model saved to {}", history.best_epoch, history.epochs.len(), out.display());
    let summary = json!({ "test_accuracy": report.accuracy, "test_loss": report.loss, "best_epoch": history.best_epoch });
    ctx.finish("train", &out, Some(c.seed), summary)
}

fn train_fl(a: TrainFlArgs, ctx: &mut Ctx) -> Result<()> {
    let s = &mut ctx.settings;
    let data: PathBuf = s.require("data", a.data)?;
    let augment = on_off("augment", &s.get("augment", a.augment, "on".to_string())?)?;
    let c = common(s, a.common)?;
    let d = RoundConfig::desk();
    let rounds = s.get("rounds", a.rounds, 10usize)?;
    let clients = s.get("clients-per-round", a.clients_per_round, d.clients_per_round)?;
    let local_epochs = s.get("local-epochs", a.local_epochs, d.local_epochs)?;
    let local_batch = s.get("local-batch-size", a.local_batch_size, d.local_batch_size)?;
    let aug_samples = s.get("aug-samples", a.aug_samples, d.augmentation_samples_per_client)?;
    let aug_fraction = s.get("aug-user-fraction", a.aug_user_fraction, 0.05)?;
    let max_steps = s.get("max-local-steps", a.max_local_steps, 0usize)?;
    let drop_stragglers = s.get("drop-stragglers", a.drop_stragglers, false)?;
    let persist = s.get("persist-optimizer", a.persist_optimizer, false)?;
    let weighting = match s.get("weighting", a.weighting, "sample-count".to_string())?.as_str() {
        "sample-count" | "sample_count" => Weighting::SampleCount,
        "uniform" => Weighting::Uniform,
        other => return Err(CliError::invalid(format!("weighting must be sample-count or uniform, got '{other}'"))),
    };
    let out = s.get("out", a.out, PathBuf::from("fl_model.ckpt"))?;
    let out = ctx.output_path(&out)?;

    let (header, samples) = load_dataset(ctx, &data)?;
    let (arch, pretrain) = presets(&c.preset, Variant::Fglp, &header, c.seed)?;
    let lr = c.lr.unwrap_or(d.lr);
    let cfg = FedConfig {
        rounds,
        round: RoundConfig {
            clients_per_round: clients,
            local_epochs,
            local_batch_size: local_batch,
            augmentation_samples_per_client: aug_samples,
            lr,
            max_local_steps: (max_steps > 0).then_some(max_steps),
            drop_stragglers,
            persist_client_optimizer: persist,
            weighting,
        },
        augmentation: augment,
        pretrain: TrainConfig { lr, ..pretrain },
        seed: c.seed,
    };
    let (mut fed, partition) = partition_users(&samples, aug_fraction, c.split_seed)?;
    if augment && partition.augmentation_users.is_empty() {
        return Err(CliError::invalid(format!(
            "--aug-user-fraction {aug_fraction} of {} users leaves no augmentation users; raise it or pass --augment off",
            partition.client_users + partition.validation_users + partition.test_users
        )));
    }
    let outcome = run_rounds(&arch, &mut fed, &cfg, ctx.jobs)?;
    let final_report = evaluate_model(&outcome.model, &fed.test)?;

    save_model(ctx, &outcome.model, &out)?;
    let rows: Vec<_> = outcome
        .history
        .iter()
        .map(|r| {
            json!({
                "round": r.round,
                "selected": r.selected.len(),
                "skipped": r.skipped.len(),
                "samples": r.sample_counts.iter().sum::<usize>(),
                "mean_client_loss": r.mean_client_loss,
                "test_loss": r.test_loss,
                "test_accuracy": r.test_accuracy,
                "test_weighted_f1": r.test_weighted_f1,
            })
        })
        .collect();
    let rows: Vec<RoundRow> = rows.into_iter().map(|v| serde_json::from_value(v).expect("round row")).collect();
    write_csv(ctx, &sidecar(&out, "rounds.csv"), &rows)?;
    let report = json!({
        "augmentation": augment,
        "partition": partition,
        "initial": outcome.initial,
        "rounds": outcome.history,
        "best_round": outcome.best_round,
        "final": final_report,
        "audit": outcome.audit,
        "pretrain": outcome.pretrain_history,
        "config": cfg,
        "arch": arch,
    });
    ctx.write_json(&sidecar(&out, "report.json"), &report)?;
    let timings: Vec<f64> = outcome.history.iter().map(|r| r.wall_time_s).collect();
    let tpath = sidecar(&out, "timings.json");
    std::fs::write(&tpath, json!({ "round_wall_time_s": timings }).to_string() + "\n").map_err(io_err(&tpath))?;

    for r in &outcome.history {
        println!("round {:>3}: test accuracy {:.4}", r.round, r.test_accuracy);
    }
    println!(
        "augmentation {}; best round {:?}; test accuracy {:.4}; model saved to {}",
        if augment { "on" } else { "off" },
        outcome.best_round,
        final_report.accuracy,
        out.display()
    );
    if outcome.audit.violations > 0 {
        return Err(CliError::invalid(format!("leakage audit found {} test samples in client inputs", outcome.audit.violations)));
    }
    let summary = json!({ "best_round": outcome.best_round, "test_accuracy": final_report.accuracy, "audit": outcome.audit });
    ctx.finish("train-fl", &out, Some(c.seed), summary)
}

#[derive(serde::Serialize, serde::Deserialize)]
struct RoundRow {
    round: usize,
    selected: usize,
    skipped: usize,
    samples: usize,
    mean_client_loss: Option<f64>,
    test_loss: Option<f64>,
    test_accuracy: f64,
    test_weighted_f1: f64,
}

fn eval(a: EvalArgs, ctx: &mut Ctx) -> Result<()> {
    let s = &mut ctx.settings;
    let data: PathBuf = s.require("data", a.data)?;
    let ho = s.get("ho", a.ho, false)?;
    let on = s.get("on", a.on, "test".to_string())?;
    let split_seed = s.get("split-seed", a.split_seed, 0)?;
    let unit = split_unit(&s.get("split-unit", a.split_unit, "sample".to_string())?)?;
    let seed = s.get("seed", a.seed, 0)?;
    let model_files: Vec<PathBuf> = s
        .list("model-file", a.model_files.iter().map(|p| p.display().to_string()).collect())?
        .into_iter()
        .map(PathBuf::from)
        .collect();
    let out = s.get("out", a.out, PathBuf::from("eval.json"))?;
    let out = ctx.output_path(&out)?;
    if model_files.is_empty() && !ho {
        return Err(CliError::invalid("nothing to evaluate: pass --model-file and/or --ho"));
    }

    let (header, samples) = load_dataset(ctx, &data)?;
    let set = match on.as_str() {
        "test" => split_dataset(&samples, &SplitSpec::four_one_one(unit, split_seed))?.test,
        "all" => samples,
        other => return Err(CliError::invalid(format!("--on must be test or all, got '{other}'"))),
    };
    let mut reports: Vec<MetricsReport> = Vec::new();
    for path in &model_files {
        let model = load_model(ctx, path, &header)?;
        reports.push(evaluate_model(&model, &set)?);
    }
    if ho {
        reports.push(evaluate_model(&HoPredictor { m: header.m(), seed }, &set)?);
    }
    ctx.write_json(&out, &reports)?;
    ctx.write_text(&sidecar(&out, "csv"), &comparison_csv(&reports)?)?;
    print!("{}", comparison_table(&reports));
    let summary = json!({ "samples": set.len(), "predictors": reports.iter().map(|r| r.predictor.clone()).collect::<Vec<_>>() });
    ctx.finish("eval", &out, Some(seed), summary)
}

fn predict(a: PredictArgs, ctx: &mut Ctx) -> Result<()> {
    let s = &mut ctx.settings;
    let model_file: PathBuf = s.require("model-file", a.model_file)?;
    let data: PathBuf = s.require("data", a.data)?;
    let index = s.get("index", a.index, 0usize)?;
    let out = s.get("out", a.out, PathBuf::from("prediction.json"))?;
    let out = ctx.output_path(&out)?;
    let (header, samples) = load_dataset(ctx, &data)?;
    let model = load_model(ctx, &model_file, &header)?;
    let sample = samples
        .get(index)
        .ok_or_else(|| CliError::invalid(format!("index {index} out of range for {} samples", samples.len())))?;
    let (cell, probs) = predict_cell(&model, &sample.sequence, &sample.region)?;
    let m = header.m();
    let grid: Vec<&[f64]> = probs.chunks(m).collect();
    let result = json!({
        "index": index,
        "user_id": sample.user_id,
        "cell": cell,
        "row": cell / m,
        "col": cell % m,
        "probability": probs[cell],
        "truth": sample.label.class_index,
        "grid": grid,
    });
    ctx.write_json(&out, &result)?;
    println!("sample {index}: cell {cell} (row {}, col {}) with probability {:.4}", cell / m, cell % m, probs[cell]);
    ctx.finish("predict", &out, None, json!({ "cell": cell }))
}

fn bench(a: BenchArgs, ctx: &mut Ctx) -> Result<()> {
    let s = &mut ctx.settings;
    let model_file: PathBuf = s.require("model-file", a.model_file)?;
    let data: PathBuf = s.require("data", a.data)?;
    let n = s.get("n", a.n, DEFAULT_BENCH_PREDICTIONS)?;
    let batch = s.get("batch-size", a.batch_size, 32usize)?;
    let out = s.get("out", a.out, PathBuf::from("bench.json"))?;
    let out = ctx.output_path(&out)?;
    let (header, samples) = load_dataset(ctx, &data)?;
    let model = load_model(ctx, &model_file, &header)?;
    let report = run_bench(&model, &samples, n, batch)?;
    ctx.write_json(&out, &report)?;
    let p = &report.prediction;
    println!(
        "{} predictions: mean {:.3} ms, sd {:.3} ms, p95 {:.3} ms (min {:.3}, max {:.3}); training epoch on {} samples: {:.2} ms",
        p.n, p.mean_ms, p.sd_ms, p.p95_ms, p.min_ms, p.max_ms, report.train_batch_size, report.train_epoch.mean_ms
    );
    ctx.finish("bench", &out, None, json!({ "n": n, "batch_size": report.train_batch_size }))
}
