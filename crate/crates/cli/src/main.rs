mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::Rng;
use serde_json::json;
use speechtx_core::adapt::{AdaptConfig, Adapter};
use speechtx_core::beam::BeamDecoder;
use speechtx_core::config::RunConfig;
use speechtx_core::data::{Split, Trial};
use speechtx_core::eval::{evaluate, EvalReport};
use speechtx_core::flops::{analytic_macs, flops_report, instrumented_macs};
use speechtx_core::lm::NGramModel;
use speechtx_core::model::{read_checkpoint, write_checkpoint, CheckpointMeta, DecoderModel};
use speechtx_core::rng::{stream, Domain};
use speechtx_core::synth::{generate, load_dataset, save_dataset, split_days, DatasetBundle};
use speechtx_core::train::train;

use report::{error_record, Report};

#[derive(Parser)]
#[command(
    name = "speechtx",
    version,
    about = "Streaming phoneme decoder: data, training, decoding and test-time adaptation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
struct Common {
    /// TOML run configuration; the desk-scale defaults apply without one.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Report directory; `<command>.jsonl` is appended there.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `paths.dataset`.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Overrides `paths.checkpoint`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Do not echo report lines to stdout.
    #[arg(long)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multi-session dataset.
    GenData(Common),
    /// Train a model on the training days and keep the best-validation checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Overrides `train.epochs`.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Decode a split with the beam search and report error rates.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Decode the held-out days with and without test-time adaptation.
    Adapt {
        #[command(flatten)]
        common: Common,
        /// Overrides `adapt.z`.
        #[arg(long)]
        z: Option<usize>,
        /// Also run the copy-count sweep over 1, 4, 16 and 64.
        #[arg(long)]
        z_sweep: bool,
    },
    /// Parameter count, FLOPs and per-chunk forward latency.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1000)]
        chunks: usize,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    /// Every trial of the held-out days.
    Heldout,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Adapt { .. } => "adapt",
            Command::Bench { .. } => "bench",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::GenData(c) => c,
            Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::Adapt { common, .. }
            | Command::Bench { common, .. } => common,
        }
    }
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    seed_override: Option<u64>,
}

impl Ctx {
    fn new(c: &Common) -> Result<Self> {
        let mut cfg = match &c.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
            None => RunConfig::desk(),
        };
        if let Some(s) = c.seed {
            cfg.seed = s;
        }
        if let Some(p) = &c.dataset {
            cfg.paths.dataset = p.clone();
        }
        if let Some(p) = &c.checkpoint {
            cfg.paths.checkpoint = p.clone();
        }
        let out = c.out.clone().unwrap_or_else(|| cfg.paths.reports.clone());
        Ok(Ctx {
            cfg,
            out,
            seed_override: c.seed,
        })
    }

    fn report(&self, command: &'static str, quiet: bool) -> Result<Report> {
        Report::open(command, &self.out, !quiet)
    }

    fn dataset(&self, report: &mut Report) -> Result<DatasetBundle> {
        let path = &self.cfg.paths.dataset;
        let loaded = load_dataset(path, Some(&self.cfg.data)).with_context(|| format!("loading dataset {}", path.display()))?;
        if let Some(w) = loaded.warning {
            eprintln!("warning: {w}");
            report.emit("warning", json!({ "message": w }))?;
        }
        Ok(loaded.bundle)
    }

    fn checkpoint(&self, bundle: &DatasetBundle) -> Result<DecoderModel> {
        let path = &self.cfg.paths.checkpoint;
        let (model, _) = read_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
        compatible(&model, bundle)?;
        Ok(model)
    }
}

fn compatible(model: &DecoderModel, bundle: &DatasetBundle) -> Result<()> {
    let m = model.config();
    ensure!(
        m.vocab_size == bundle.alphabet.vocab_size(),
        "checkpoint emits {} labels but the dataset alphabet has {}",
        m.vocab_size,
        bundle.alphabet.vocab_size()
    );
    ensure!(
        m.channels == bundle.config.channels,
        "checkpoint expects {} channels but the dataset has {}",
        m.channels,
        bundle.config.channels
    );
    Ok(())
}

fn language_model(cfg: &RunConfig, bundle: &DatasetBundle) -> Result<NGramModel> {
    Ok(NGramModel::train(&bundle.corpus, cfg.decode.lm_order, 0.75)?)
}

fn gen_data(ctx: &Ctx, report: &mut Report) -> Result<()> {
    let mut data = ctx.cfg.data.clone();
    if let Some(s) = ctx.seed_override {
        data.seed = s;
    }
    let bundle = generate(&data)?;
    let path = &ctx.cfg.paths.dataset;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    save_dataset(path, &bundle).with_context(|| format!("writing {}", path.display()))?;
    let count = |s| bundle.split(s).count();
    report.emit(
        "dataset",
        json!({
            "path": path,
            "config_hash": bundle.config_hash,
            "sessions": bundle.sessions(),
            "trials": bundle.trials.len(),
            "train": count(Split::Train),
            "val": count(Split::Val),
            "test": count(Split::Test),
            "corpus_sentences": bundle.corpus.len(),
            "lexicon_words": bundle.lexicon.len(),
        }),
    )
}

fn train_cmd(ctx: &Ctx, report: &mut Report, epochs: Option<usize>) -> Result<()> {
    let cfg = &ctx.cfg;
    let bundle = ctx.dataset(report)?;
    let days = split_days(&bundle, cfg.days.train, 0)?;
    let pick = |s: Split| days.train.iter().filter(|t| t.split == s).cloned().collect::<Vec<_>>();
    let (train_set, val_set) = (pick(Split::Train), pick(Split::Val));
    let mut tc = cfg.train.clone();
    if let Some(e) = epochs {
        tc.epochs = e;
        tc.lr_drop_epoch = tc.lr_drop_epoch.min(e.saturating_sub(1));
    }
    let model = DecoderModel::new(cfg.model.clone(), cfg.seed)?;
    compatible(&model, &bundle)?;
    report.emit(
        "start",
        json!({
            "train_trials": train_set.len(),
            "val_trials": val_set.len(),
            "parameters": model.num_params(),
            "train": tc,
            "seed": cfg.seed,
        }),
    )?;
    let mut emit_err = None;
    let outcome = train(
        model,
        &train_set,
        &val_set,
        &tc,
        &cfg.augment,
        cfg.seed,
        bundle.alphabet.sil(),
        |rec| {
            if let Err(e) = report.emit("epoch", rec) {
                emit_err.get_or_insert(e);
            }
        },
    )?;
    if let Some(e) = emit_err {
        return Err(e);
    }
    let path = &cfg.paths.checkpoint;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let meta = CheckpointMeta {
        seed: cfg.seed,
        epoch: outcome.records.len() as u64,
    };
    let chosen = if outcome.best_val_per.is_finite() {
        &outcome.best
    } else {
        &outcome.last
    };
    write_checkpoint(path, chosen, meta).with_context(|| format!("writing {}", path.display()))?;
    report.emit(
        "summary",
        json!({
            "checkpoint": path,
            "epochs_run": outcome.records.len(),
            "best_epoch": outcome.best_epoch,
            "best_val_per": outcome.best_val_per,
            "dropped_trials": outcome.dropped_trials,
            "diverged_at": outcome.diverged_at,
        }),
    )?;
    if let Some(at) = outcome.diverged_at {
        bail!("training diverged at epoch {at}; kept the checkpoint from before the non-finite loss");
    }
    Ok(())
}

fn emit_eval(report: &mut Report, r: &EvalReport, extra: serde_json::Value) -> Result<()> {
    let mut body = json!({
        "trials": r.trials,
        "wer": r.wer,
        "per": r.per,
        "greedy_wer": r.greedy_wer,
        "words": r.words,
        "phonemes": r.phonemes,
        "per_session": r.per_session,
        "confusion": r.confusion,
    });
    if let (Some(b), serde_json::Value::Object(e)) = (body.as_object_mut(), extra) {
        b.extend(e);
    }
    report.emit("summary", body)?;
    for row in &r.rows {
        report.emit("trial", row)?;
    }
    Ok(())
}

fn eval_cmd(ctx: &Ctx, report: &mut Report, split: SplitArg) -> Result<()> {
    let cfg = &ctx.cfg;
    let bundle = ctx.dataset(report)?;
    let model = ctx.checkpoint(&bundle)?;
    let lm = language_model(cfg, &bundle)?;
    let dec = BeamDecoder::new(&bundle.alphabet, &bundle.lexicon, &lm, cfg.decode.clone())?;
    let days = split_days(&bundle, cfg.days.train, cfg.days.heldout)?;
    let trials: Vec<Trial> = match split {
        SplitArg::Heldout => days.heldout.values().flatten().cloned().collect(),
        SplitArg::Train => days.train.iter().filter(|t| t.split == Split::Train).cloned().collect(),
        SplitArg::Val => days.train.iter().filter(|t| t.split == Split::Val).cloned().collect(),
        SplitArg::Test => days.train.iter().filter(|t| t.split == Split::Test).cloned().collect(),
    };
    ensure!(!trials.is_empty(), "split {split:?} has no trials");
    let r = evaluate(&model, &trials, &dec, &bundle.alphabet, &bundle.lexicon, &cfg.augment)?;
    emit_eval(report, &r, json!({ "split": format!("{split:?}").to_lowercase() }))
}

fn adapt_cmd(ctx: &Ctx, report: &mut Report, z: Option<usize>, z_sweep: bool) -> Result<()> {
    let cfg = &ctx.cfg;
    let bundle = ctx.dataset(report)?;
    let start = ctx.checkpoint(&bundle)?;
    let lm = language_model(cfg, &bundle)?;
    let dec = BeamDecoder::new(&bundle.alphabet, &bundle.lexicon, &lm, cfg.decode.clone())?;
    let days = split_days(&bundle, cfg.days.train, cfg.days.heldout)?;
    ensure!(!days.heldout.is_empty(), "no held-out days configured");
    let mut acfg = cfg.adapt.clone();
    if let Some(z) = z {
        acfg.z = z;
    }
    acfg.validate(&start)?;

    let mut unadapted = BTreeMap::new();
    for (s, trials) in &days.heldout {
        let r = evaluate(&start, trials, &dec, &bundle.alphabet, &bundle.lexicon, &cfg.augment)?;
        unadapted.insert(*s, r.wer);
    }

    let run = |z: usize, report: &mut Report, per_trial: bool| -> Result<(DecoderModel, BTreeMap<usize, f64>)> {
        let mut model = start.clone();
        let mut adapter = Adapter::new(AdaptConfig { z, ..acfg.clone() }, cfg.seed);
        let mut wers = BTreeMap::new();
        for (s, trials) in &days.heldout {
            let r = adapter.adapt_session(&mut model, trials, &dec)?;
            if per_trial {
                for rec in &r.records {
                    report.emit("trial", rec)?;
                }
            }
            wers.insert(*s, r.wer);
        }
        Ok((model, wers))
    };

    let (adapted_model, adapted) = run(acfg.z, report, true)?;
    for (s, wer) in &adapted {
        report.emit(
            "day",
            json!({ "session": s, "z": acfg.z, "wer_unadapted": unadapted[s], "wer_adapted": wer }),
        )?;
    }
    let path = ctx.out.join("adapted.ckpt");
    write_checkpoint(&path, &adapted_model, CheckpointMeta { seed: cfg.seed, epoch: 0 })?;
    report.emit("summary", json!({ "adapted_checkpoint": path, "z": acfg.z }))?;

    if z_sweep {
        for z in [1, 4, 16, 64] {
            let (_, wers) = run(z, report, false)?;
            let mean = wers.values().sum::<f64>() / wers.len() as f64;
            report.emit("z_sweep", json!({ "z": z, "per_session": wers, "mean_wer": mean }))?;
        }
    }
    Ok(())
}

fn bench_cmd(ctx: &Ctx, report: &mut Report, chunks: usize) -> Result<()> {
    let cfg = &ctx.cfg;
    let model = if ctx.cfg.paths.checkpoint.exists() {
        read_checkpoint(&cfg.paths.checkpoint)?.0
    } else {
        DecoderModel::new(cfg.model.clone(), cfg.seed)?
    };
    let mc = model.config().clone();
    let flops = flops_report(&mc, cfg.data.bin_ms, 10.0)?;
    let l = flops.patches.min(mc.max_patches);
    let counted = instrumented_macs(&model, l, cfg.seed)?;
    let analytic = analytic_macs(&mc, l);
    report.emit("flops", &flops)?;
    report.emit(
        "mac_check",
        json!({ "patches": l, "analytic": analytic, "instrumented": counted, "equal": analytic == counted }),
    )?;

    ensure!(chunks > 0, "--chunks must be positive");
    let chunk_bins = (100 / cfg.data.bin_ms).max(1);
    let chunk_patches = (chunk_bins / mc.patch_bins).max(1);
    let pd = mc.patch_dim();
    let mut rng = stream(cfg.seed, Domain::Bench, 0, 1);
    let total_patches = mc.max_patches;
    let stream_data: Vec<f64> = (0..total_patches * pd).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut times = Vec::with_capacity(chunks);
    for i in 0..chunks {
        let len = ((i * chunk_patches) % total_patches + chunk_patches).min(total_patches);
        let t0 = Instant::now();
        let logits = model.logits(&stream_data[..len * pd])?;
        times.push(t0.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(logits);
    }
    let n = times.len() as f64;
    let mean = times.iter().sum::<f64>() / n;
    let sd = (times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
    report.emit(
        "latency",
        json!({
            "chunk_ms": chunk_bins * cfg.data.bin_ms,
            "chunks": chunks,
            "context": "full causal prefix, no caching",
            "mean_ms": mean,
            "sd_ms": sd,
        }),
    )?;
    report.emit("params", json!({ "parameters": model.num_params() }))
}

fn run(cli: &Cli) -> Result<()> {
    let common = cli.command.common();
    let ctx = Ctx::new(common)?;
    let mut report = ctx.report(cli.command.name(), common.quiet)?;
    match &cli.command {
        Command::GenData(_) => gen_data(&ctx, &mut report)?,
        Command::Train { epochs, .. } => train_cmd(&ctx, &mut report, *epochs)?,
        Command::Eval { split, .. } => eval_cmd(&ctx, &mut report, *split)?,
        Command::Adapt { z, z_sweep, .. } => adapt_cmd(&ctx, &mut report, *z, *z_sweep)?,
        Command::Bench { chunks, .. } => bench_cmd(&ctx, &mut report, *chunks)?,
    }
    report.finish()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = error_record(cli.command.name(), &e);
            println!("{record}");
            let out = cli.command.common().out.clone();
            if let Some(dir) = out.as_deref().filter(|d| Path::new(d).is_dir()) {
                if let Ok(mut r) = Report::open(cli.command.name(), dir, false) {
                    let _ = r.emit("error", json!({ "message": e.to_string() }));
                    let _ = r.finish();
                }
            }
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
