//! Command-line surface.
//!
//! Five subcommands tie the pipeline together: `plan` (cost table and budget
//! partition), `warmup` (source-domain pre-training), `adapt` (target
//! adaptation; requires a warmup checkpoint), `eval` (per-budget accuracy
//! table from an adaptation checkpoint), and `gradcheck` (quantizer
//! finite-difference suite). Every subcommand reads one config file; the
//! `RTFQ_SEED` environment variable overrides the config seed.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 numeric failure
//! (non-finite value during training), 3 gradient-check failure.
//!
//! Artifacts land in `--out` (default `.`): `plan.csv`/`plan.json`,
//! `warmup.ckpt` + `warmup_metrics.jsonl`, `adapt.ckpt` +
//! `adapt_metrics.jsonl`, `eval.csv`/`eval.json`. Metric files are
//! append-only JSON-lines, one independently parseable object per line; in
//! strict mode they contain no wall-clock fields, so equal seeds produce
//! byte-identical streams.

use std::ffi::OsString;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::adapt::{evaluate, steps_per_epoch, Phase, StepMetrics, TrainerState};
use crate::budget::{enumerate_configs, partition_budgets, select_subnets, BudgetAxis};
use crate::config::{OptimizerChoice, RunConfig};
use crate::data::{generate_pair, load_dataset, DomainDataset};
use crate::error::{Error, Result};
use crate::io::checkpoint::{load_trainer, save_trainer};
use crate::numerics::optim::Optimizer;
use crate::quant::gradcheck_suite;
use crate::supernet::{build_supernet, Domain};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;
pub const EXIT_GRADCHECK: i32 = 3;

/// Number of random points per bit-width in the `gradcheck` sweep.
const GRADCHECK_POINTS: usize = 1000;
/// Relative tolerance for the `gradcheck` sweep.
const GRADCHECK_TOL: f64 = 1e-3;

#[derive(Debug, Parser)]
#[command(
    name = "rtfq",
    version,
    about = "Switchable quantized networks with retraining-free domain adaptation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Run configuration file (flat key = value lines).
    #[arg(long)]
    pub config: PathBuf,
    /// Directory for artifacts; created if missing.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Checkpoint to resume from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Fully deterministic mode: no wall-clock fields in metrics.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Enumerate subnet costs and partition the budget range.
    Plan(CommonArgs),
    /// Train the supernet on labeled source data.
    Warmup(CommonArgs),
    /// Adapt to unlabeled target data (needs --resume with a warmup
    /// checkpoint).
    Adapt(CommonArgs),
    /// Per-budget accuracy table and subnet selection (needs --resume with
    /// an adaptation checkpoint).
    Eval(CommonArgs),
    /// Finite-difference check of the quantizer gradients.
    Gradcheck(CommonArgs),
}

/// Entry point for the binary: parse `std::env` args, run, return the exit
/// code.
pub fn main_from_env() -> i32 {
    run_cli(std::env::args_os())
}

/// Parse and execute; never panics on bad input.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NonFinite { .. } => EXIT_NUMERIC,
                _ => EXIT_USAGE,
            }
        }
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::Plan(a) => {
            let cfg = setup(&a)?;
            cmd_plan(&cfg, &a.out)?;
            Ok(EXIT_OK)
        }
        Command::Warmup(a) => {
            let cfg = setup(&a)?;
            cmd_warmup(&cfg, &a.out, a.resume.as_deref())?;
            Ok(EXIT_OK)
        }
        Command::Adapt(a) => {
            let cfg = setup(&a)?;
            cmd_adapt(&cfg, &a.out, a.resume.as_deref())?;
            Ok(EXIT_OK)
        }
        Command::Eval(a) => {
            let cfg = setup(&a)?;
            cmd_eval(&cfg, &a.out, a.resume.as_deref())?;
            Ok(EXIT_OK)
        }
        Command::Gradcheck(a) => {
            let cfg = setup(&a)?;
            cmd_gradcheck(&cfg)
        }
    }
}

/// Load the config, fold in the --strict flag and the RTFQ_SEED override,
/// and make sure the output directory exists.
fn setup(a: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&a.config)?;
    if a.strict {
        cfg.strict = true;
    }
    if let Ok(v) = std::env::var("RTFQ_SEED") {
        cfg.seed = v.trim().parse().map_err(|_| {
            Error::Config(format!("RTFQ_SEED must be an unsigned integer, got {v:?}"))
        })?;
    }
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    Ok(cfg)
}

fn make_optimizer(choice: OptimizerChoice) -> Optimizer {
    match choice {
        OptimizerChoice::Sgd { momentum } => Optimizer::sgd(momentum as f32),
        OptimizerChoice::Adam { beta1, beta2, eps } => {
            Optimizer::adam(beta1 as f32, beta2 as f32, eps as f32)
        }
    }
}

fn make_trainer(cfg: &RunConfig) -> Result<TrainerState> {
    let net = build_supernet(&cfg.arch, &cfg.space, cfg.unsigned_range, cfg.seed)?;
    TrainerState::new(
        net,
        cfg.weights,
        cfg.sampling,
        cfg.k_random,
        cfg.ema,
        cfg.lr,
        make_optimizer(cfg.optimizer),
        cfg.seed,
    )
}

/// Source dataset, target dataset, and target labels when known (generated
/// data keeps them aside for evaluation; loaded data may or may not carry
/// them).
fn prepare_data(cfg: &RunConfig) -> Result<(DomainDataset, DomainDataset, Option<Vec<u32>>)> {
    if let (Some(sp), Some(tp)) = (&cfg.source_path, &cfg.target_path) {
        let src = load_dataset(sp, Domain::Source)?;
        let tgt = load_dataset(tp, Domain::Target)?;
        let labels = tgt.labels.clone();
        Ok((src, tgt, labels))
    } else {
        let (src, tgt, labels) = generate_pair(
            cfg.classes as u32,
            cfg.source_size,
            cfg.target_size,
            &cfg.shift,
            cfg.seed,
        )?;
        Ok((src, tgt, Some(labels)))
    }
}

/// Reject checkpoints built for a different architecture or search space.
fn check_compat(cfg: &RunConfig, state: &TrainerState) -> Result<()> {
    if state.student.arch != cfg.arch {
        return Err(Error::Config(
            "checkpoint architecture disagrees with the config".into(),
        ));
    }
    if state.student.space != cfg.space {
        return Err(Error::Config(
            "checkpoint configuration space disagrees with the config".into(),
        ));
    }
    if state.student.unsigned_range != cfg.unsigned_range {
        return Err(Error::Config(
            "checkpoint activation code range disagrees with the config".into(),
        ));
    }
    Ok(())
}

/// Append-only JSON-lines metrics stream.
struct MetricsWriter {
    file: std::fs::File,
    strict: bool,
    last: Instant,
}

impl MetricsWriter {
    fn open(path: &Path, strict: bool) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(MetricsWriter {
            file,
            strict,
            last: Instant::now(),
        })
    }

    fn write_step(&mut self, m: &StepMetrics) -> Result<()> {
        let mut m = m.clone();
        if !self.strict {
            m.wall_ms = Some(self.last.elapsed().as_millis() as u64);
        }
        self.last = Instant::now();
        let line = serde_json::to_string(&m)
            .map_err(|e| Error::invalid(format!("metrics encode: {e}")))?;
        writeln!(self.file, "{line}").map_err(|e| Error::io("metrics stream", e))
    }

    fn write_value(&mut self, v: &serde_json::Value) -> Result<()> {
        writeln!(self.file, "{v}").map_err(|e| Error::io("metrics stream", e))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    crate::io::write_file(path, text.as_bytes())
}

fn fp32_bitops_ratio(bits: u32) -> f64 {
    (bits * bits) as f64 / 1024.0
}

/// Cost table + budget partition written as CSV and JSON.
pub fn cmd_plan(cfg: &RunConfig, out: &Path) -> Result<()> {
    let costs = enumerate_configs(&cfg.arch, &cfg.space)?;
    let plan = partition_budgets(&costs, cfg.budget_intervals, BudgetAxis::Macs)?;

    let mut csv = String::from("width,resolution,bits,macs,bitops,fp32_bitops_ratio\n");
    for c in &plan.costs {
        csv.push_str(&format!(
            "{:.2},{},{},{},{},{}\n",
            c.config.width,
            c.config.resolution,
            c.config.bits,
            c.macs,
            c.bitops,
            fp32_bitops_ratio(c.config.bits)
        ));
    }
    write_text(&out.join("plan.csv"), &csv)?;

    let json = serde_json::json!({
        "axis": "macs",
        "configs": plan.costs.iter().map(|c| serde_json::json!({
            "width": c.config.width,
            "resolution": c.config.resolution,
            "bits": c.config.bits,
            "macs": c.macs,
            "bitops": c.bitops,
            "fp32_bitops_ratio": fp32_bitops_ratio(c.config.bits),
        })).collect::<Vec<_>>(),
        "budgets": plan.entries.iter().map(|e| serde_json::json!({
            "interval": e.interval,
            "budget": e.budget,
            "admissible": e.admissible.len(),
        })).collect::<Vec<_>>(),
    });
    let mut text = serde_json::to_string_pretty(&json)
        .map_err(|e| Error::invalid(format!("plan encode: {e}")))?;
    text.push('\n');
    write_text(&out.join("plan.json"), &text)?;

    println!(
        "{} configurations, {} budget intervals on the MACs axis",
        plan.costs.len(),
        plan.entries.len()
    );
    Ok(())
}

/// Warmup phase: labeled source training of every sampled subnet.
pub fn cmd_warmup(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<()> {
    let (src, _tgt, _) = prepare_data(cfg)?;
    let mut state = match resume {
        Some(p) => {
            let s = load_trainer(p)?;
            check_compat(cfg, &s)?;
            s
        }
        None => make_trainer(cfg)?,
    };
    let ckpt = out.join("warmup.ckpt");
    let mut metrics = MetricsWriter::open(&out.join("warmup_metrics.jsonl"), cfg.strict)?;
    let spe = steps_per_epoch(src.len(), cfg.batch) as u64;
    let every = cfg.checkpoint_every;
    let ckpt_for_sink = ckpt.clone();
    let mut sink = |st: &TrainerState, m: &StepMetrics| -> Result<()> {
        metrics.write_step(m)?;
        if every > 0 && st.phase_step.is_multiple_of(every * spe) {
            save_trainer(&ckpt_for_sink, st)?;
        }
        Ok(())
    };
    state.run_warmup(&src, cfg.warmup_epochs, cfg.batch, &mut sink)?;
    save_trainer(&ckpt, &state)?;
    println!(
        "warmup complete after {} steps; checkpoint at {}",
        state.phase_step,
        ckpt.display()
    );
    Ok(())
}

/// Adaptation phase: distillation, pseudo-labels, and information
/// maximization on unlabeled target data.
pub fn cmd_adapt(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<()> {
    let p = resume
        .ok_or_else(|| Error::Config("adapt requires --resume with a warmup checkpoint".into()))?;
    let (src, tgt, tgt_labels) = prepare_data(cfg)?;
    let mut state = load_trainer(p)?;
    check_compat(cfg, &state)?;
    if !state.warmup_done {
        return Err(Error::Config(
            "the checkpoint has not completed warmup; run warmup first".into(),
        ));
    }
    if cfg.eval_every > 0 && tgt_labels.is_none() {
        return Err(Error::Config(
            "eval_every needs target labels (generated data or a labeled target file)".into(),
        ));
    }

    let ckpt = out.join("adapt.ckpt");
    let mut metrics = MetricsWriter::open(&out.join("adapt_metrics.jsonl"), cfg.strict)?;
    let spe =
        steps_per_epoch(src.len(), cfg.batch).min(steps_per_epoch(tgt.len(), cfg.batch)) as u64;
    let every = cfg.checkpoint_every;
    let eval_every = cfg.eval_every;
    let configs = cfg.space.configs();
    let batch = cfg.batch;
    let ckpt_for_sink = ckpt.clone();
    let tgt_ref = &tgt;
    let labels_ref = &tgt_labels;
    let mut sink = move |st: &TrainerState, m: &StepMetrics| -> Result<()> {
        metrics.write_step(m)?;
        let at_epoch_end = st.phase_step.is_multiple_of(spe);
        if every > 0 && at_epoch_end && st.phase_step.is_multiple_of(every * spe) {
            save_trainer(&ckpt_for_sink, st)?;
        }
        if eval_every > 0 && at_epoch_end && st.phase_step.is_multiple_of(eval_every * spe) {
            let labels = labels_ref.as_ref().expect("checked before the run");
            let epoch = st.phase_step / spe;
            for c in &configs {
                let acc = evaluate(&st.student, tgt_ref, labels, c, Domain::Target, batch)?;
                metrics.write_value(&serde_json::json!({
                    "phase": "eval",
                    "epoch": epoch,
                    "width": c.width,
                    "resolution": c.resolution,
                    "bits": c.bits,
                    "domain": "target",
                    "accuracy": acc,
                }))?;
            }
        }
        Ok(())
    };
    state.run_adapt(&src, &tgt, cfg.adapt_epochs, cfg.batch, &mut sink)?;
    drop(sink);
    save_trainer(&ckpt, &state)?;
    println!(
        "adaptation complete after {} steps; checkpoint at {}",
        state.phase_step,
        ckpt.display()
    );
    Ok(())
}

/// Accuracy per configuration, budget partition, and the selected subnet per
/// budget interval.
pub fn cmd_eval(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<()> {
    let p = resume.ok_or_else(|| {
        Error::Config("eval requires --resume with an adaptation checkpoint".into())
    })?;
    let state = load_trainer(p)?;
    check_compat(cfg, &state)?;
    if !state.warmup_done || state.phase != Phase::Adapt {
        return Err(Error::Config(
            "evaluation requires an adaptation checkpoint; run adapt first".into(),
        ));
    }
    let (_src, tgt, labels) = prepare_data(cfg)?;
    let labels = labels.ok_or_else(|| {
        Error::Config("evaluation needs target labels (generated data or a labeled file)".into())
    })?;

    let costs = enumerate_configs(&cfg.arch, &cfg.space)?;
    let mut plan = partition_budgets(&costs, cfg.budget_intervals, BudgetAxis::Macs)?;
    let mut accs = Vec::with_capacity(plan.costs.len());
    for c in &plan.costs {
        accs.push(evaluate(
            &state.student,
            &tgt,
            &labels,
            &c.config,
            Domain::Target,
            cfg.batch,
        )?);
    }
    select_subnets(&mut plan, &|i| accs[i])?;

    let mut csv = String::from("width,resolution,bits,macs,bitops,target_accuracy\n");
    for (c, acc) in plan.costs.iter().zip(&accs) {
        csv.push_str(&format!(
            "{:.2},{},{},{},{},{}\n",
            c.config.width, c.config.resolution, c.config.bits, c.macs, c.bitops, acc
        ));
    }
    write_text(&out.join("eval.csv"), &csv)?;

    let json = serde_json::json!({
        "axis": "macs",
        "budgets": plan.entries.iter().map(|e| {
            let selected = e.selected.map(|i| {
                let c = &plan.costs[i];
                serde_json::json!({
                    "width": c.config.width,
                    "resolution": c.config.resolution,
                    "bits": c.config.bits,
                    "macs": c.macs,
                    "bitops": c.bitops,
                    "accuracy": accs[i],
                })
            });
            serde_json::json!({
                "interval": e.interval,
                "budget": e.budget,
                "admissible": e.admissible.len(),
                "selected": selected,
            })
        }).collect::<Vec<_>>(),
    });
    let mut text = serde_json::to_string_pretty(&json)
        .map_err(|e| Error::invalid(format!("eval encode: {e}")))?;
    text.push('\n');
    write_text(&out.join("eval.json"), &text)?;

    for e in &plan.entries {
        match e.selected {
            Some(i) => {
                let c = &plan.costs[i];
                println!(
                    "interval {}: budget {} MACs -> width {:.2} resolution {} bits {} (accuracy {:.4})",
                    e.interval, e.budget, c.config.width, c.config.resolution, c.config.bits,
                    accs[i]
                );
            }
            None => println!(
                "interval {}: budget {} MACs -> no admissible configuration",
                e.interval, e.budget
            ),
        }
    }
    Ok(())
}

/// Quantizer gradient sweep; returns the process exit code.
pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<i32> {
    let start = Instant::now();
    let reports = gradcheck_suite(
        &cfg.space.bits,
        cfg.unsigned_range,
        GRADCHECK_POINTS,
        GRADCHECK_TOL,
        cfg.seed,
    )?;
    let mut ok = true;
    for r in &reports {
        println!(
            "bits {}: {} points per range, max grad_v rel err {:.3e}, max grad_s rel err {:.3e}: {}",
            r.bits,
            r.points,
            r.max_rel_v,
            r.max_rel_s,
            if r.passed() { "ok" } else { "FAIL" }
        );
        for f in &r.failures {
            println!("  {f}");
        }
        ok &= r.passed();
    }
    if !cfg.strict {
        println!("gradcheck finished in {} ms", start.elapsed().as_millis());
    }
    Ok(if ok { EXIT_OK } else { EXIT_GRADCHECK })
}
