//! Run configuration.
//!
//! A run is described by a flat `key = value` text file: one assignment per
//! line, `#` starts a comment, blank lines are ignored. Every key is typed,
//! has a documented default, and unknown or duplicate keys are rejected with
//! the offending line, so a config file never fails silently.
//!
//! A `preset` key may name a bundle of hyperparameters (search space, loss
//! weights, learning rate, batch size) recorded from the published full-scale
//! configurations; it is applied first, and any other key in the file then
//! overrides the preset value regardless of line order.
//!
//! | key                | type        | default      |
//! |--------------------|-------------|--------------|
//! | preset             | name        | desk         |
//! | arch               | name        | desk3        |
//! | classes            | int (2..=4) | 4            |
//! | widths             | f64 list    | 1.0,0.75,0.5 |
//! | resolutions        | int list    | 32,24,16     |
//! | bits               | int list    | 8,6,4        |
//! | unsigned_range     | full/narrow | full         |
//! | sampling           | name        | sandwichq    |
//! | single_bit         | int         | (unset)      |
//! | k_random           | int         | 2            |
//! | lambda_cls         | f64         | 1.0          |
//! | lambda_rd          | f64         | 1.0          |
//! | lambda_pl          | f64         | 1.0          |
//! | lambda_im          | f64         | 1.0          |
//! | tau_pl             | f64         | 0.9          |
//! | disable_im         | bool        | false        |
//! | ema                | f64         | 0.96         |
//! | warmup_epochs      | int         | 2            |
//! | adapt_epochs       | int         | 6            |
//! | batch              | int         | 16           |
//! | lr                 | f64         | 0.05         |
//! | optimizer          | sgd/adam    | sgd          |
//! | momentum           | f64         | 0.9          |
//! | beta1              | f64         | 0.9          |
//! | beta2              | f64         | 0.999        |
//! | adam_eps           | f64         | 1e-8         |
//! | seed               | u64         | 0            |
//! | strict             | bool        | false        |
//! | source_size        | int         | 512          |
//! | target_size        | int         | 512          |
//! | shift_brightness   | f64         | 0.3          |
//! | shift_contrast     | f64         | 0.6          |
//! | shift_noise        | f64         | 0.1          |
//! | shift_texture_freq | f64         | 3.0          |
//! | shift_texture_amp  | f64         | 0.15         |
//! | source_path        | path        | (unset)      |
//! | target_path        | path        | (unset)      |
//! | budget_intervals   | int         | 8            |
//! | eval_every         | int         | 0            |
//! | checkpoint_every   | int         | 0            |
//!
//! `sampling` is one of `sandwichq`, `per-bit-sandwich`, or `single-bit`
//! (which requires `single_bit` to name a bit-width from `bits`).
//! `eval_every` / `checkpoint_every` count epochs; 0 means "only at the end
//! of the phase". When `source_path`/`target_path` are both set the run
//! loads those dataset files instead of generating synthetic data, and the
//! `classes`/`*_size`/`shift_*` keys are ignored.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use crate::adapt::{LossWeights, SamplingMode};
use crate::data::ShiftSpec;
use crate::error::{Error, Result};
use crate::quant::UnsignedRange;
use crate::supernet::arch::{ArchSpec, ConfigSpace};

/// Optimizer selection; the concrete state lives in the numerics module.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerChoice {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

/// A fully resolved run description.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub arch: ArchSpec,
    pub space: ConfigSpace,
    pub unsigned_range: UnsignedRange,
    pub sampling: SamplingMode,
    pub k_random: usize,
    pub weights: LossWeights,
    pub ema: f64,
    pub warmup_epochs: u64,
    pub adapt_epochs: u64,
    pub batch: usize,
    pub lr: f64,
    pub optimizer: OptimizerChoice,
    pub seed: u64,
    pub strict: bool,
    pub classes: usize,
    pub source_size: usize,
    pub target_size: usize,
    pub shift: ShiftSpec,
    pub source_path: Option<PathBuf>,
    pub target_path: Option<PathBuf>,
    pub budget_intervals: usize,
    pub eval_every: u64,
    pub checkpoint_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            arch: ArchSpec::desk3(4),
            space: ConfigSpace::desk(),
            unsigned_range: UnsignedRange::Full,
            sampling: SamplingMode::SandwichQ,
            k_random: 2,
            weights: LossWeights::desk_defaults(),
            ema: 0.96,
            warmup_epochs: 2,
            adapt_epochs: 6,
            batch: 16,
            lr: 0.05,
            optimizer: OptimizerChoice::Sgd { momentum: 0.9 },
            seed: 0,
            strict: false,
            classes: 4,
            source_size: 512,
            target_size: 512,
            shift: ShiftSpec::default_shift(),
            source_path: None,
            target_path: None,
            budget_intervals: 8,
            eval_every: 0,
            checkpoint_every: 0,
        }
    }
}

fn apply_preset(cfg: &mut RunConfig, name: &str) -> Result<()> {
    match name {
        "desk" => {}
        "office31" | "officehome" | "domainnet" => {
            cfg.space = ConfigSpace::full_scale();
            cfg.batch = 128;
            cfg.weights.tau_pl = 0.9;
            cfg.weights.lambda_rd = 1.0;
            match name {
                "office31" => {
                    cfg.weights.lambda_cls = 1.0;
                    cfg.lr = 2e-4;
                }
                "officehome" => {
                    cfg.weights.lambda_cls = 15.0;
                    cfg.lr = 2e-4;
                }
                _ => {
                    cfg.weights.lambda_cls = 64.0;
                    cfg.weights.lambda_rd = 0.5;
                    cfg.weights.tau_pl = 0.4;
                    cfg.lr = 3e-5;
                }
            }
        }
        other => {
            return Err(Error::invalid(format!(
                "unknown preset {other:?} (expected desk, office31, officehome, or domainnet)"
            )))
        }
    }
    Ok(())
}

struct Line<'a> {
    number: usize,
    offset: u64,
    key: &'a str,
    value: &'a str,
}

fn split_lines<'a>(text: &'a str, path: &Path) -> Result<Vec<Line<'a>>> {
    let mut lines = Vec::new();
    let mut offset = 0u64;
    let mut seen = HashSet::new();
    for (idx, raw) in text.split('\n').enumerate() {
        let line_offset = offset;
        offset += raw.len() as u64 + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let (key, value) = body.split_once('=').ok_or_else(|| {
            Error::parse(
                path,
                line_offset,
                format!("line {}: expected `key = value`, got {body:?}", idx + 1),
            )
        })?;
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() {
            return Err(Error::parse(
                path,
                line_offset,
                format!("line {}: empty key", idx + 1),
            ));
        }
        if !seen.insert(key.to_string()) {
            return Err(Error::parse(
                path,
                line_offset,
                format!("line {}: duplicate key {key:?}", idx + 1),
            ));
        }
        lines.push(Line {
            number: idx + 1,
            offset: line_offset,
            key,
            value,
        });
    }
    Ok(lines)
}

fn expect<T, E>(
    path: &Path,
    line: &Line<'_>,
    what: &str,
    parsed: std::result::Result<T, E>,
) -> Result<T> {
    parsed.map_err(|_| {
        Error::parse(
            path,
            line.offset,
            format!(
                "line {}: key {:?} expects {what}, got {:?}",
                line.number, line.key, line.value
            ),
        )
    })
}

fn parse_bool(path: &Path, line: &Line<'_>) -> Result<bool> {
    match line.value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => expect::<bool, &str>(path, line, "true or false", Err("bad")),
    }
}

fn parse_list<T: std::str::FromStr>(path: &Path, line: &Line<'_>, what: &str) -> Result<Vec<T>> {
    line.value
        .split(',')
        .map(|item| expect(path, line, what, item.trim().parse::<T>()))
        .collect()
}

impl RunConfig {
    /// Parse a config file body. `path` is used only for error reporting.
    pub fn parse(text: &str, path: &Path) -> Result<RunConfig> {
        let lines = split_lines(text, path)?;
        let mut cfg = RunConfig::default();

        // The preset seeds the defaults, so it applies before every other
        // key no matter where it appears in the file.
        for line in &lines {
            if line.key == "preset" {
                apply_preset(&mut cfg, line.value)
                    .map_err(|e| Error::parse(path, line.offset, format!("{e}")))?;
            }
        }

        let mut single_bit: Option<u32> = None;
        let mut sampling_name: Option<&str> = None;
        let mut disable_im = false;
        for line in &lines {
            match line.key {
                "preset" => {}
                "arch" => {
                    if line.value != "desk3" {
                        return Err(Error::parse(
                            path,
                            line.offset,
                            format!(
                                "line {}: unknown architecture {:?} (expected desk3)",
                                line.number, line.value
                            ),
                        ));
                    }
                }
                "classes" => cfg.classes = expect(path, line, "an integer", line.value.parse())?,
                "widths" => cfg.space.widths = parse_list(path, line, "a number list")?,
                "resolutions" => cfg.space.resolutions = parse_list(path, line, "an integer list")?,
                "bits" => cfg.space.bits = parse_list(path, line, "an integer list")?,
                "unsigned_range" => {
                    cfg.unsigned_range = match line.value {
                        "full" => UnsignedRange::Full,
                        "narrow" => UnsignedRange::Narrow,
                        _ => return Err(Error::parse(
                            path,
                            line.offset,
                            format!(
                                "line {}: key \"unsigned_range\" expects full or narrow, got {:?}",
                                line.number, line.value
                            ),
                        )),
                    }
                }
                "sampling" => sampling_name = Some(line.value),
                "single_bit" => {
                    single_bit = Some(expect(path, line, "an integer", line.value.parse())?)
                }
                "k_random" => cfg.k_random = expect(path, line, "an integer", line.value.parse())?,
                "lambda_cls" => {
                    cfg.weights.lambda_cls = expect(path, line, "a number", line.value.parse())?
                }
                "lambda_rd" => {
                    cfg.weights.lambda_rd = expect(path, line, "a number", line.value.parse())?
                }
                "lambda_pl" => {
                    cfg.weights.lambda_pl = expect(path, line, "a number", line.value.parse())?
                }
                "lambda_im" => {
                    cfg.weights.lambda_im = expect(path, line, "a number", line.value.parse())?
                }
                "tau_pl" => {
                    cfg.weights.tau_pl = expect(path, line, "a number", line.value.parse())?
                }
                "disable_im" => disable_im = parse_bool(path, line)?,
                "ema" => cfg.ema = expect(path, line, "a number", line.value.parse())?,
                "warmup_epochs" => {
                    cfg.warmup_epochs = expect(path, line, "an integer", line.value.parse())?
                }
                "adapt_epochs" => {
                    cfg.adapt_epochs = expect(path, line, "an integer", line.value.parse())?
                }
                "batch" => cfg.batch = expect(path, line, "an integer", line.value.parse())?,
                "lr" => cfg.lr = expect(path, line, "a number", line.value.parse())?,
                "optimizer" => {
                    cfg.optimizer = match line.value {
                        "sgd" => OptimizerChoice::Sgd { momentum: 0.9 },
                        "adam" => OptimizerChoice::Adam {
                            beta1: 0.9,
                            beta2: 0.999,
                            eps: 1e-8,
                        },
                        _ => {
                            return Err(Error::parse(
                                path,
                                line.offset,
                                format!(
                                    "line {}: key \"optimizer\" expects sgd or adam, got {:?}",
                                    line.number, line.value
                                ),
                            ))
                        }
                    }
                }
                "momentum" => {
                    let m: f64 = expect(path, line, "a number", line.value.parse())?;
                    if let OptimizerChoice::Sgd { momentum } = &mut cfg.optimizer {
                        *momentum = m;
                    }
                }
                "beta1" => {
                    let v: f64 = expect(path, line, "a number", line.value.parse())?;
                    if let OptimizerChoice::Adam { beta1, .. } = &mut cfg.optimizer {
                        *beta1 = v;
                    }
                }
                "beta2" => {
                    let v: f64 = expect(path, line, "a number", line.value.parse())?;
                    if let OptimizerChoice::Adam { beta2, .. } = &mut cfg.optimizer {
                        *beta2 = v;
                    }
                }
                "adam_eps" => {
                    let v: f64 = expect(path, line, "a number", line.value.parse())?;
                    if let OptimizerChoice::Adam { eps, .. } = &mut cfg.optimizer {
                        *eps = v;
                    }
                }
                "seed" => cfg.seed = expect(path, line, "an integer", line.value.parse())?,
                "strict" => cfg.strict = parse_bool(path, line)?,
                "source_size" => {
                    cfg.source_size = expect(path, line, "an integer", line.value.parse())?
                }
                "target_size" => {
                    cfg.target_size = expect(path, line, "an integer", line.value.parse())?
                }
                "shift_brightness" => {
                    cfg.shift.brightness = expect(path, line, "a number", line.value.parse())?
                }
                "shift_contrast" => {
                    cfg.shift.contrast = expect(path, line, "a number", line.value.parse())?
                }
                "shift_noise" => {
                    cfg.shift.noise_sigma = expect(path, line, "a number", line.value.parse())?
                }
                "shift_texture_freq" => {
                    cfg.shift.texture_freq = expect(path, line, "a number", line.value.parse())?
                }
                "shift_texture_amp" => {
                    cfg.shift.texture_amp = expect(path, line, "a number", line.value.parse())?
                }
                "source_path" => cfg.source_path = Some(PathBuf::from(line.value)),
                "target_path" => cfg.target_path = Some(PathBuf::from(line.value)),
                "budget_intervals" => {
                    cfg.budget_intervals = expect(path, line, "an integer", line.value.parse())?
                }
                "eval_every" => {
                    cfg.eval_every = expect(path, line, "an integer", line.value.parse())?
                }
                "checkpoint_every" => {
                    cfg.checkpoint_every = expect(path, line, "an integer", line.value.parse())?
                }
                other => {
                    return Err(Error::parse(
                        path,
                        line.offset,
                        format!("line {}: unknown key {other:?}", line.number),
                    ))
                }
            }
        }

        cfg.arch = ArchSpec::desk3(cfg.classes);
        cfg.sampling = match sampling_name {
            None | Some("sandwichq") => SamplingMode::SandwichQ,
            Some("per-bit-sandwich") => SamplingMode::PerBitSandwich,
            Some("single-bit") => {
                let bits = single_bit.ok_or_else(|| {
                    Error::invalid("sampling = single-bit requires the single_bit key")
                })?;
                SamplingMode::SingleBit(bits)
            }
            Some(other) => {
                return Err(Error::invalid(format!(
                    "unknown sampling mode {other:?} (expected sandwichq, per-bit-sandwich, or single-bit)"
                )))
            }
        };
        if single_bit.is_some() && !matches!(cfg.sampling, SamplingMode::SingleBit(_)) {
            return Err(Error::invalid(
                "the single_bit key is only meaningful with sampling = single-bit",
            ));
        }
        if disable_im {
            cfg.weights.lambda_im = 0.0;
        }

        cfg.validate()?;
        Ok(cfg)
    }

    /// Read and parse a config file.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let bytes = crate::io::read_file(path)?;
        let text = String::from_utf8(bytes)
            .map_err(|e| Error::parse(path, e.utf8_error().valid_up_to() as u64, "not UTF-8"))?;
        Self::parse(&text, path)
    }

    /// Cross-field checks shared by the parser and programmatic construction.
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.space.validate()?;
        self.weights.validate()?;
        if !(2..=4).contains(&self.classes) {
            return Err(Error::invalid(format!(
                "classes must lie in 2..=4, got {}",
                self.classes
            )));
        }
        if self.arch.num_classes != self.classes {
            return Err(Error::invalid(
                "architecture class count disagrees with the classes key",
            ));
        }
        if !(0.0..=1.0).contains(&self.ema) {
            return Err(Error::invalid(format!(
                "ema must lie in [0,1], got {}",
                self.ema
            )));
        }
        if self.batch == 0 {
            return Err(Error::invalid("batch must be positive"));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::invalid(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if let SamplingMode::SingleBit(bits) = self.sampling {
            self.space.bits_index(bits).map_err(|_| {
                Error::invalid(format!("single_bit = {bits} is not in the bits list"))
            })?;
        }
        match self.optimizer {
            OptimizerChoice::Sgd { momentum } => {
                if !(0.0..1.0).contains(&momentum) {
                    return Err(Error::invalid(format!(
                        "momentum must lie in [0,1), got {momentum}"
                    )));
                }
            }
            OptimizerChoice::Adam { beta1, beta2, eps } => {
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                    return Err(Error::invalid(format!(
                        "adam betas must lie in [0,1), got ({beta1}, {beta2})"
                    )));
                }
                if !eps.is_finite() || eps <= 0.0 {
                    return Err(Error::invalid(format!(
                        "adam_eps must be positive, got {eps}"
                    )));
                }
            }
        }
        if self.source_path.is_some() != self.target_path.is_some() {
            return Err(Error::invalid(
                "source_path and target_path must be set together",
            ));
        }
        if self.source_path.is_none() {
            if self.source_size == 0 || self.target_size == 0 {
                return Err(Error::invalid("dataset sizes must be positive"));
            }
            self.shift.validate()?;
        }
        if self.budget_intervals == 0 {
            return Err(Error::invalid("budget_intervals must be positive"));
        }
        Ok(())
    }
}
