//! The switchable quantized classifier.
//!
//! One set of full-size weights serves every (width, resolution, bit-width)
//! configuration: widths execute prefix channel slices, resolutions resize
//! the input, and each bit-width has its own learned quantizer steps. Batch
//! norm is domain-specific and per-width (bit-widths and resolutions share
//! banks). All forwards run through the autodiff tape; evaluation uses a
//! throwaway tape and never mutates the network, so `&self` forwards are
//! safe to run concurrently.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::Tensor;
use crate::quant::{self, QuantBounds, UnsignedRange};

use super::arch::{channels_at, ArchSpec, ConfigSpace, ConvBlockSpec, SubnetConfig};
use super::params::{ParamId, ParamStore};

/// Running-statistics update rate for batch norm.
pub const BN_MOMENTUM: f32 = 0.1;
/// Variance floor inside batch norm.
pub const BN_EPS: f32 = 1e-5;

/// Data domain selecting the batch-norm bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub const COUNT: usize = 2;

    pub fn index(self) -> usize {
        match self {
            Domain::Source => 0,
            Domain::Target => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

/// How batch norm treats statistics during a forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and report them for running-stat
    /// updates.
    Train,
    /// Normalize with batch statistics but leave running statistics alone
    /// (used for teacher forwards on unlabeled data).
    TrainNoUpdate,
    /// Normalize with stored running statistics; errors on banks that have
    /// never seen data.
    Eval,
}

/// One batch-norm bank: affine parameters plus running statistics for a
/// single (domain, width) key.
#[derive(Debug, Clone)]
pub struct BnBank {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    /// Whether the running statistics have ever been updated (or imported).
    pub initialized: bool,
}

/// Quantizer state of one conv layer: a (signed weight, unsigned activation)
/// step pair per bit-width, with gradient scales fixed at initialization.
#[derive(Debug, Clone)]
pub struct LayerQuant {
    pub weight_steps: Vec<ParamId>,
    pub weight_bounds: Vec<QuantBounds>,
    pub weight_gscale: Vec<f32>,
    pub act_steps: Vec<ParamId>,
    pub act_bounds: Vec<QuantBounds>,
    pub act_gscale: Vec<f32>,
}

/// One conv/BN/ReLU block with its quantizers and BN banks.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub spec: ConvBlockSpec,
    pub base_in: usize,
    pub weight: ParamId,
    pub quant: LayerQuant,
    /// Indexed `domain.index() * |W| + width_index`.
    pub banks: Vec<BnBank>,
}

impl ConvBlock {
    pub fn bank_index(&self, widths: usize, domain: Domain, wi: usize) -> usize {
        domain.index() * widths + wi
    }
}

/// The linear classifier head; weights are quantized, inputs and logits are
/// not.
#[derive(Debug, Clone)]
pub struct Head {
    pub weight: ParamId,
    pub bias: ParamId,
    pub weight_steps: Vec<ParamId>,
    pub weight_bounds: Vec<QuantBounds>,
    pub weight_gscale: Vec<f32>,
}

/// Interns parameters as tape leaves so a parameter used by several subnet
/// forwards within one step maps to a single leaf and its gradients
/// accumulate.
pub struct ParamBinder {
    vars: Vec<Option<Var>>,
}

impl ParamBinder {
    pub fn new(store: &ParamStore) -> Self {
        ParamBinder {
            vars: vec![None; store.len()],
        }
    }

    pub fn bind(&mut self, tape: &mut Tape, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(v) = self.vars[id.index()] {
            return Ok(v);
        }
        let v = tape.leaf(store.get(id).clone())?;
        self.vars[id.index()] = Some(v);
        Ok(v)
    }

    /// Every parameter bound so far, as (parameter index, tape variable).
    pub fn bound(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|var| (i, var)))
    }
}

/// Deferred running-statistics update from one train-mode BN application.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub block: usize,
    pub bank: usize,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub count: usize,
}

/// Settings of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardCtx {
    pub domain: Domain,
    pub mode: BnMode,
    /// When false, quantizers are bypassed entirely (plain float forward).
    pub quantize: bool,
}

/// Tape variables of interest from one forward.
pub struct ForwardTrace {
    /// The (possibly quantized) input of each conv, in block order.
    pub conv_inputs: Vec<Var>,
    pub logits: Var,
}

/// The switchable quantized network.
#[derive(Clone)]
pub struct Supernet {
    pub arch: ArchSpec,
    pub space: ConfigSpace,
    pub unsigned_range: UnsignedRange,
    pub params: ParamStore,
    pub blocks: Vec<ConvBlock>,
    pub head: Head,
}

fn he_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("std is finite and positive");
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| dist.sample(rng) as f32).collect();
    Tensor::new(shape, data).expect("shape matches generated data")
}

/// Build a freshly initialized supernet.
///
/// Weights use He fan-in initialization from a seeded generator; quantizer
/// steps are initialized from those weights; every (domain, width) BN bank
/// starts with identity affine parameters and unset running statistics.
pub fn build_supernet(
    arch: &ArchSpec,
    space: &ConfigSpace,
    unsigned_range: UnsignedRange,
    seed: u64,
) -> Result<Supernet> {
    arch.validate()?;
    space.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let mut blocks = Vec::with_capacity(arch.blocks.len());

    for (i, spec) in arch.blocks.iter().enumerate() {
        let base_in = arch.base_in(i);
        let fan_in = base_in * spec.kernel * spec.kernel;
        let w = he_tensor(
            &mut rng,
            vec![spec.base_out, base_in, spec.kernel, spec.kernel],
            fan_in,
        );
        let weight = params.add(format!("block{i}.weight"), w);

        let mut banks = Vec::with_capacity(Domain::COUNT * space.widths.len());
        for domain in [Domain::Source, Domain::Target] {
            for &width in &space.widths {
                let ch = channels_at(spec.base_out, width);
                let prefix = format!("block{i}.bn.{}.w{width:.2}", domain.name());
                let gamma = params.add(format!("{prefix}.gamma"), Tensor::full(vec![ch], 1.0));
                let beta = params.add(format!("{prefix}.beta"), Tensor::zeros(vec![ch]));
                banks.push(BnBank {
                    gamma,
                    beta,
                    running_mean: vec![0.0; ch],
                    running_var: vec![1.0; ch],
                    initialized: false,
                });
            }
        }

        let weight_data = params.get(weight).data().to_vec();
        let quant = build_layer_quant(
            &mut params,
            &format!("block{i}"),
            weight_data,
            &space.bits,
            unsigned_range,
        )?;
        blocks.push(ConvBlock {
            spec: *spec,
            base_in,
            weight,
            quant,
            banks,
        });
    }

    let features = arch.last_base_out();
    let hw = he_tensor(&mut rng, vec![arch.num_classes, features], features);
    let head_weight = params.add("head.weight", hw);
    let head_bias = params.add("head.bias", Tensor::zeros(vec![arch.num_classes]));
    let mut weight_steps = Vec::new();
    let mut weight_bounds = Vec::new();
    let mut weight_gscale = Vec::new();
    for &bits in &space.bits {
        let bounds = QuantBounds::signed(bits)?;
        let data = params.get(head_weight).data();
        let step = quant::init_step(data, bounds)?;
        let gscale = quant::grad_scale(data.len(), bounds)?;
        weight_steps.push(params.add(format!("head.wq.b{bits}.step"), Tensor::scalar(step)));
        weight_bounds.push(bounds);
        weight_gscale.push(gscale);
    }
    let head = Head {
        weight: head_weight,
        bias: head_bias,
        weight_steps,
        weight_bounds,
        weight_gscale,
    };

    Ok(Supernet {
        arch: arch.clone(),
        space: space.clone(),
        unsigned_range,
        params,
        blocks,
        head,
    })
}

fn build_layer_quant(
    params: &mut ParamStore,
    prefix: &str,
    weight_data: Vec<f32>,
    bits_axis: &[u32],
    unsigned_range: UnsignedRange,
) -> Result<LayerQuant> {
    let mut q = LayerQuant {
        weight_steps: Vec::new(),
        weight_bounds: Vec::new(),
        weight_gscale: Vec::new(),
        act_steps: Vec::new(),
        act_bounds: Vec::new(),
        act_gscale: Vec::new(),
    };
    for &bits in bits_axis {
        let wb = QuantBounds::signed(bits)?;
        let ab = QuantBounds::unsigned(bits, unsigned_range)?;
        let ws = quant::init_step(&weight_data, wb)?;
        let as_ = quant::init_step(&weight_data, ab)?;
        q.weight_steps
            .push(params.add(format!("{prefix}.wq.b{bits}.step"), Tensor::scalar(ws)));
        q.weight_bounds.push(wb);
        q.weight_gscale
            .push(quant::grad_scale(weight_data.len(), wb)?);
        q.act_steps
            .push(params.add(format!("{prefix}.aq.b{bits}.step"), Tensor::scalar(as_)));
        q.act_bounds.push(ab);
        q.act_gscale.push(quant::grad_scale(weight_data.len(), ab)?);
    }
    Ok(q)
}

impl Supernet {
    /// Number of width options.
    pub fn width_count(&self) -> usize {
        self.space.widths.len()
    }

    /// Parameter count of the width-1.0 view: conv weights, head weight and
    /// bias, and one domain's width-1.0 BN affine parameters — what a plain
    /// non-switchable network of the same architecture would hold.
    pub fn plain_view_param_count(&self) -> usize {
        let mut total = 0;
        for b in &self.blocks {
            total += self.params.get(b.weight).numel();
            let bank = &b.banks[b.bank_index(self.width_count(), Domain::Source, 0)];
            total += self.params.get(bank.gamma).numel();
            total += self.params.get(bank.beta).numel();
        }
        total += self.params.get(self.head.weight).numel();
        total += self.params.get(self.head.bias).numel();
        total
    }

    fn check_input(&self, x: &Tensor, config: &SubnetConfig) -> Result<()> {
        self.space.check(config)?;
        let s = x.shape();
        if s.len() != 4 || s[1] != self.arch.in_channels {
            return Err(Error::shape(
                "Supernet::forward",
                format!("[N, {}, r, r] input", self.arch.in_channels),
                format!("{s:?}"),
            ));
        }
        if s[2] != config.resolution as usize || s[3] != config.resolution as usize {
            return Err(Error::shape(
                "Supernet::forward",
                format!("spatial size {0}x{0} for {config}", config.resolution),
                format!("{}x{}", s[2], s[3]),
            ));
        }
        Ok(())
    }

    /// Record one subnet forward on the tape and return the variables of
    /// interest. Train-mode BN statistics are appended to `bn_updates` for
    /// the caller to apply via [`Supernet::apply_bn_updates`].
    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        binder: &mut ParamBinder,
        x: &Tensor,
        config: &SubnetConfig,
        ctx: ForwardCtx,
        bn_updates: &mut Vec<BnUpdate>,
    ) -> Result<ForwardTrace> {
        self.check_input(x, config)?;
        let wi = self.space.width_index(config.width)?;
        let qi = self.space.bits_index(config.bits)?;
        let widths = self.width_count();

        let mut cur = tape.leaf(x.clone())?;
        let mut conv_inputs = Vec::with_capacity(self.blocks.len());
        for (bi, block) in self.blocks.iter().enumerate() {
            let in_c = if bi == 0 {
                self.arch.in_channels
            } else {
                channels_at(block.base_in, config.width)
            };
            let out_c = channels_at(block.spec.base_out, config.width);

            if ctx.quantize {
                let step = binder.bind(tape, &self.params, block.quant.act_steps[qi])?;
                cur = tape.lsq_quantize(
                    cur,
                    step,
                    block.quant.act_bounds[qi],
                    block.quant.act_gscale[qi],
                )?;
            }
            conv_inputs.push(cur);

            let w_full = binder.bind(tape, &self.params, block.weight)?;
            let full_shape = self.params.get(block.weight).shape();
            let mut w_use = if out_c == full_shape[0] && in_c == full_shape[1] {
                w_full
            } else {
                tape.slice_oi(w_full, out_c, in_c)?
            };
            if ctx.quantize {
                let step = binder.bind(tape, &self.params, block.quant.weight_steps[qi])?;
                w_use = tape.lsq_quantize(
                    w_use,
                    step,
                    block.quant.weight_bounds[qi],
                    block.quant.weight_gscale[qi],
                )?;
            }
            cur = tape.conv2d(cur, w_use, block.spec.stride, block.spec.pad)?;

            let bank_idx = block.bank_index(widths, ctx.domain, wi);
            let bank = &block.banks[bank_idx];
            let gamma = binder.bind(tape, &self.params, bank.gamma)?;
            let beta = binder.bind(tape, &self.params, bank.beta)?;
            cur = match ctx.mode {
                BnMode::Train | BnMode::TrainNoUpdate => {
                    let (v, stats) = tape.batch_norm_train(cur, gamma, beta, BN_EPS)?;
                    if ctx.mode == BnMode::Train {
                        bn_updates.push(BnUpdate {
                            block: bi,
                            bank: bank_idx,
                            mean: stats.mean,
                            var: stats.var,
                            count: stats.count,
                        });
                    }
                    v
                }
                BnMode::Eval => {
                    if !bank.initialized {
                        return Err(Error::invalid(format!(
                            "BN bank (block {bi}, {}, w{:.2}) has no running statistics; \
                             train or import weights first",
                            ctx.domain.name(),
                            config.width
                        )));
                    }
                    tape.batch_norm_eval(
                        cur,
                        gamma,
                        beta,
                        &bank.running_mean,
                        &bank.running_var,
                        BN_EPS,
                    )?
                }
            };
            cur = tape.relu(cur)?;
        }

        cur = tape.global_avg_pool(cur)?;
        let features = channels_at(self.arch.last_base_out(), config.width);
        let hw_full = binder.bind(tape, &self.params, self.head.weight)?;
        let full_features = self.params.get(self.head.weight).shape()[1];
        let mut hw = if features == full_features {
            hw_full
        } else {
            tape.slice_cols(hw_full, features)?
        };
        if ctx.quantize {
            let step = binder.bind(tape, &self.params, self.head.weight_steps[qi])?;
            hw = tape.lsq_quantize(
                hw,
                step,
                self.head.weight_bounds[qi],
                self.head.weight_gscale[qi],
            )?;
        }
        let bias = binder.bind(tape, &self.params, self.head.bias)?;
        let logits = tape.linear(cur, hw, bias)?;
        Ok(ForwardTrace {
            conv_inputs,
            logits,
        })
    }

    /// Record one subnet forward and return its logits variable.
    pub fn forward_taped(
        &self,
        tape: &mut Tape,
        binder: &mut ParamBinder,
        x: &Tensor,
        config: &SubnetConfig,
        ctx: ForwardCtx,
        bn_updates: &mut Vec<BnUpdate>,
    ) -> Result<Var> {
        Ok(self
            .forward_traced(tape, binder, x, config, ctx, bn_updates)?
            .logits)
    }

    /// Gradient-free forward returning logits. `mode` must be
    /// [`BnMode::Eval`] or [`BnMode::TrainNoUpdate`]; the network is never
    /// mutated.
    pub fn forward_eval(
        &self,
        x: &Tensor,
        config: &SubnetConfig,
        domain: Domain,
        mode: BnMode,
        quantize: bool,
    ) -> Result<Tensor> {
        if mode == BnMode::Train {
            return Err(Error::invalid(
                "forward_eval cannot update running statistics; use a taped forward",
            ));
        }
        let mut tape = Tape::new();
        let mut binder = ParamBinder::new(&self.params);
        let mut updates = Vec::new();
        let logits = self.forward_taped(
            &mut tape,
            &mut binder,
            x,
            config,
            ForwardCtx {
                domain,
                mode,
                quantize,
            },
            &mut updates,
        )?;
        Ok(tape.value(logits).clone())
    }

    /// Fold collected batch statistics into running statistics
    /// (`running = (1 - m) * running + m * batch`, unbiased variance).
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) -> Result<()> {
        for u in updates {
            let bank = &mut self.blocks[u.block].banks[u.bank];
            if bank.running_mean.len() != u.mean.len() {
                return Err(Error::shape(
                    "apply_bn_updates",
                    format!("{} channels", bank.running_mean.len()),
                    format!("{}", u.mean.len()),
                ));
            }
            if u.count < 2 {
                return Err(Error::invalid(
                    "batch norm running update needs at least 2 values per channel",
                ));
            }
            let correction = u.count as f64 / (u.count - 1) as f64;
            for c in 0..bank.running_mean.len() {
                bank.running_mean[c] =
                    (1.0 - BN_MOMENTUM) * bank.running_mean[c] + BN_MOMENTUM * u.mean[c];
                let unbiased = (u.var[c] as f64 * correction) as f32;
                bank.running_var[c] =
                    (1.0 - BN_MOMENTUM) * bank.running_var[c] + BN_MOMENTUM * unbiased;
            }
            bank.initialized = true;
        }
        Ok(())
    }

    /// Copy BN running statistics (and initialized flags) from a structurally
    /// identical network.
    pub fn copy_bn_running_from(&mut self, other: &Supernet) -> Result<()> {
        if self.blocks.len() != other.blocks.len() {
            return Err(Error::shape(
                "copy_bn_running_from",
                format!("{} blocks", self.blocks.len()),
                format!("{}", other.blocks.len()),
            ));
        }
        for (dst, src) in self.blocks.iter_mut().zip(&other.blocks) {
            if dst.banks.len() != src.banks.len() {
                return Err(Error::shape(
                    "copy_bn_running_from",
                    format!("{} banks", dst.banks.len()),
                    format!("{}", src.banks.len()),
                ));
            }
            for (db, sb) in dst.banks.iter_mut().zip(&src.banks) {
                if db.running_mean.len() != sb.running_mean.len() {
                    return Err(Error::shape(
                        "copy_bn_running_from",
                        format!("{} channels", db.running_mean.len()),
                        format!("{}", sb.running_mean.len()),
                    ));
                }
                db.running_mean.copy_from_slice(&sb.running_mean);
                db.running_var.copy_from_slice(&sb.running_var);
                db.initialized = sb.initialized;
            }
        }
        Ok(())
    }

    /// Copy the source-domain BN banks (affine parameters, running
    /// statistics) onto the target-domain banks of the same widths.
    pub fn copy_source_banks_to_target(&mut self) -> Result<()> {
        let widths = self.width_count();
        for bi in 0..self.blocks.len() {
            for wi in 0..widths {
                let src_idx = self.blocks[bi].bank_index(widths, Domain::Source, wi);
                let dst_idx = self.blocks[bi].bank_index(widths, Domain::Target, wi);
                let (src_gamma, src_beta) = {
                    let b = &self.blocks[bi].banks[src_idx];
                    (b.gamma, b.beta)
                };
                let (dst_gamma, dst_beta) = {
                    let b = &self.blocks[bi].banks[dst_idx];
                    (b.gamma, b.beta)
                };
                let gv = self.params.get(src_gamma).clone();
                let bv = self.params.get(src_beta).clone();
                self.params
                    .get_mut(dst_gamma)
                    .data_mut()
                    .copy_from_slice(gv.data());
                self.params
                    .get_mut(dst_beta)
                    .data_mut()
                    .copy_from_slice(bv.data());
                let (mean, var, init) = {
                    let b = &self.blocks[bi].banks[src_idx];
                    (b.running_mean.clone(), b.running_var.clone(), b.initialized)
                };
                let dst = &mut self.blocks[bi].banks[dst_idx];
                dst.running_mean = mean;
                dst.running_var = var;
                dst.initialized = init;
            }
        }
        Ok(())
    }

    /// Clamp every quantizer step to the positivity floor. Called after each
    /// optimizer update.
    pub fn clamp_quant_steps(&mut self) {
        let mut step_ids: Vec<ParamId> = Vec::new();
        for b in &self.blocks {
            step_ids.extend_from_slice(&b.quant.weight_steps);
            step_ids.extend_from_slice(&b.quant.act_steps);
        }
        step_ids.extend_from_slice(&self.head.weight_steps);
        for id in step_ids {
            let v = self.params.get_mut(id);
            for s in v.data_mut() {
                if *s < quant::STEP_MIN {
                    *s = quant::STEP_MIN;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_input(n: usize, r: usize, seed: u64) -> Tensor {
        let mut s = seed;
        let mut next = move || {
            s = s
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((s >> 40) as f32 / (1u64 << 24) as f32).clamp(0.0, 1.0)
        };
        let data: Vec<f32> = (0..n * 3 * r * r).map(|_| next()).collect();
        Tensor::new(vec![n, 3, r, r], data).unwrap()
    }

    fn desk_net(seed: u64) -> Supernet {
        build_supernet(
            &ArchSpec::desk3(4),
            &ConfigSpace::desk(),
            UnsignedRange::Full,
            seed,
        )
        .unwrap()
    }

    #[test]
    fn construction_counts() {
        let net = desk_net(7);
        // Per conv layer: one quantizer pair per bit-width.
        for b in &net.blocks {
            assert_eq!(b.quant.weight_steps.len(), 3);
            assert_eq!(b.quant.act_steps.len(), 3);
            // 2 domains x 3 widths BN banks.
            assert_eq!(b.banks.len(), 6);
        }
        assert_eq!(net.head.weight_steps.len(), 3);
    }

    #[test]
    fn same_seed_same_weights() {
        let a = desk_net(123);
        let b = desk_net(123);
        for (ia, ib) in a.params.ids().zip(b.params.ids()) {
            let ta = a.params.get(ia);
            let tb = b.params.get(ib);
            assert_eq!(ta.data(), tb.data(), "{}", a.params.name(ia));
        }
        let c = desk_net(124);
        let w0 = a.params.get(a.blocks[0].weight);
        let w0c = c.params.get(c.blocks[0].weight);
        assert_ne!(w0.data(), w0c.data());
    }

    #[test]
    fn plain_view_param_count_matches_hand_count() {
        // Independent count for the desk architecture at width 1.0:
        //   conv: 32*3*9 + 64*32*9 + 128*64*9 = 864 + 18432 + 73728
        //   head: 128*4 + 4
        //   BN affine: 2*(32 + 64 + 128)
        let net = desk_net(1);
        assert_eq!(net.plain_view_param_count(), 93_988);
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let net = desk_net(5);
        let x = small_input(4, 32, 99);
        let cfg = SubnetConfig {
            width: 1.0,
            resolution: 32,
            bits: 8,
        };
        let a = net
            .forward_eval(&x, &cfg, Domain::Source, BnMode::TrainNoUpdate, true)
            .unwrap();
        assert_eq!(a.shape(), &[4, 4]);
        let b = net
            .forward_eval(&x, &cfg, Domain::Source, BnMode::TrainNoUpdate, true)
            .unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn every_config_runs_and_is_finite() {
        let net = desk_net(11);
        for cfg in net.space.configs() {
            let x = small_input(2, cfg.resolution as usize, 3);
            let y = net
                .forward_eval(&x, &cfg, Domain::Source, BnMode::TrainNoUpdate, true)
                .unwrap();
            y.check_finite("logits").unwrap();
            assert_eq!(y.shape(), &[2, net.arch.num_classes]);
        }
    }

    #[test]
    fn resolution_mismatch_rejected() {
        let net = desk_net(3);
        let x = small_input(1, 32, 1);
        let cfg = SubnetConfig {
            width: 1.0,
            resolution: 24,
            bits: 8,
        };
        assert!(net
            .forward_eval(&x, &cfg, Domain::Source, BnMode::TrainNoUpdate, true)
            .is_err());
    }

    #[test]
    fn unknown_config_rejected() {
        let net = desk_net(3);
        let x = small_input(1, 32, 1);
        let cfg = SubnetConfig {
            width: 0.9,
            resolution: 32,
            bits: 8,
        };
        assert!(net
            .forward_eval(&x, &cfg, Domain::Source, BnMode::TrainNoUpdate, true)
            .is_err());
    }

    #[test]
    fn eval_mode_requires_seen_statistics() {
        let net = desk_net(3);
        let x = small_input(1, 32, 1);
        let cfg = net.space.largest();
        let err = net
            .forward_eval(&x, &cfg, Domain::Source, BnMode::Eval, true)
            .unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("running statistics"), "got: {msg}");
    }

    #[test]
    fn train_updates_only_the_used_bank() {
        let mut net = desk_net(17);
        let x = small_input(4, 32, 5);
        let cfg = net.space.largest();
        let before: Vec<Vec<f32>> = net.blocks[0]
            .banks
            .iter()
            .map(|b| b.running_mean.clone())
            .collect();

        let mut tape = Tape::new();
        let mut binder = ParamBinder::new(&net.params);
        let mut updates = Vec::new();
        net.forward_taped(
            &mut tape,
            &mut binder,
            &x,
            &cfg,
            ForwardCtx {
                domain: Domain::Target,
                mode: BnMode::Train,
                quantize: true,
            },
            &mut updates,
        )
        .unwrap();
        assert_eq!(updates.len(), net.blocks.len());
        net.apply_bn_updates(&updates).unwrap();

        let widths = net.width_count();
        let used = net.blocks[0].bank_index(widths, Domain::Target, 0);
        for (i, bank) in net.blocks[0].banks.iter().enumerate() {
            if i == used {
                assert!(bank.initialized);
                assert_ne!(bank.running_mean, before[i]);
            } else {
                assert!(!bank.initialized);
                assert_eq!(bank.running_mean, before[i], "bank {i} must be untouched");
            }
        }
    }

    #[test]
    fn no_update_mode_never_mutates() {
        let net = desk_net(19);
        let x = small_input(4, 32, 5);
        let cfg = net.space.largest();
        let mut tape = Tape::new();
        let mut binder = ParamBinder::new(&net.params);
        let mut updates = Vec::new();
        net.forward_taped(
            &mut tape,
            &mut binder,
            &x,
            &cfg,
            ForwardCtx {
                domain: Domain::Target,
                mode: BnMode::TrainNoUpdate,
                quantize: true,
            },
            &mut updates,
        )
        .unwrap();
        assert!(updates.is_empty());
    }

    #[test]
    fn quantization_error_shrinks_with_bits() {
        // The gap between quantized and plain logits must scale down with
        // the quantizer grain: more bits, smaller gap. The absolute bounds
        // are recorded measurements on this fixed seed; freshly initialized
        // steps over-cover (they shrink during training), so the 8-bit gap
        // here is an upper bound on the trained-network gap.
        let net = desk_net(23);
        let x = small_input(8, 32, 77);
        let plain = net
            .forward_eval(
                &x,
                &net.space.largest(),
                Domain::Source,
                BnMode::TrainNoUpdate,
                false,
            )
            .unwrap();
        let mut gaps = Vec::new();
        for &bits in &[8u32, 6, 4] {
            let cfg = SubnetConfig {
                width: 1.0,
                resolution: 32,
                bits,
            };
            let q = net
                .forward_eval(&x, &cfg, Domain::Source, BnMode::TrainNoUpdate, true)
                .unwrap();
            gaps.push(q.max_abs_diff(&plain).unwrap());
        }
        println!("logit gaps vs plain at q=8,6,4: {gaps:?}");
        assert!(
            gaps[0] < gaps[2],
            "8-bit must be closer than 4-bit: {gaps:?}"
        );
        assert!(gaps[0] < 0.15, "8-bit gap {}", gaps[0]);
    }

    #[test]
    fn conv_inputs_are_integer_step_multiples() {
        let net = desk_net(29);
        let cfg = SubnetConfig {
            width: 0.75,
            resolution: 24,
            bits: 4,
        };
        let x = small_input(2, 24, 13);
        let mut tape = Tape::new();
        let mut binder = ParamBinder::new(&net.params);
        let mut updates = Vec::new();
        let trace = net
            .forward_traced(
                &mut tape,
                &mut binder,
                &x,
                &cfg,
                ForwardCtx {
                    domain: Domain::Source,
                    mode: BnMode::TrainNoUpdate,
                    quantize: true,
                },
                &mut updates,
            )
            .unwrap();
        let qi = net.space.bits_index(4).unwrap();
        for (bi, &var) in trace.conv_inputs.iter().enumerate() {
            let step = net
                .params
                .get(net.blocks[bi].quant.act_steps[qi])
                .item()
                .unwrap();
            for &v in tape.value(var).data() {
                let k = (v as f64 / step as f64).round();
                let dist = (v as f64 - k * step as f64).abs();
                assert!(
                    dist <= (k.abs().max(1.0)) * step as f64 * 1e-6,
                    "block {bi}: {v} is not a multiple of step {step}"
                );
            }
        }
    }

    #[test]
    fn prefix_nesting_of_sliced_weights() {
        // The weight slice used at a smaller width must be the leading
        // sub-block of the slice used at a larger width.
        let net = desk_net(31);
        let mut tape = Tape::new();
        let w_full = tape
            .leaf(net.params.get(net.blocks[1].weight).clone())
            .unwrap();
        let (o_a, i_a) = (channels_at(64, 0.5), channels_at(32, 0.5));
        let (o_b, i_b) = (channels_at(64, 0.75), channels_at(32, 0.75));
        assert!(o_a < o_b && i_a < i_b);
        let small = tape.slice_oi(w_full, o_a, i_a).unwrap();
        let big = tape.slice_oi(w_full, o_b, i_b).unwrap();
        let k = net.blocks[1].spec.kernel;
        let small_v = tape.value(small).clone();
        let big_v = tape.value(big);
        for o in 0..o_a {
            for i in 0..i_a {
                for ky in 0..k {
                    for kx in 0..k {
                        let s = small_v.data()[((o * i_a + i) * k + ky) * k + kx];
                        let b = big_v.data()[((o * i_b + i) * k + ky) * k + kx];
                        assert_eq!(s, b, "slices disagree at ({o},{i},{ky},{kx})");
                    }
                }
            }
        }
    }

    #[test]
    fn source_bank_copy_to_target() {
        let mut net = desk_net(37);
        // Train the source banks once so they hold real statistics.
        let x = small_input(4, 32, 5);
        let cfg = net.space.largest();
        let mut tape = Tape::new();
        let mut binder = ParamBinder::new(&net.params);
        let mut updates = Vec::new();
        net.forward_taped(
            &mut tape,
            &mut binder,
            &x,
            &cfg,
            ForwardCtx {
                domain: Domain::Source,
                mode: BnMode::Train,
                quantize: true,
            },
            &mut updates,
        )
        .unwrap();
        net.apply_bn_updates(&updates).unwrap();
        net.copy_source_banks_to_target().unwrap();
        let widths = net.width_count();
        for b in &net.blocks {
            let s = &b.banks[b.bank_index(widths, Domain::Source, 0)];
            let t = &b.banks[b.bank_index(widths, Domain::Target, 0)];
            assert_eq!(s.running_mean, t.running_mean);
            assert_eq!(s.running_var, t.running_var);
            assert_eq!(s.initialized, t.initialized);
        }
    }

    #[test]
    fn step_clamp_enforces_floor() {
        let mut net = desk_net(41);
        let id = net.blocks[0].quant.weight_steps[0];
        net.params.get_mut(id).data_mut()[0] = 1e-12;
        net.clamp_quant_steps();
        assert_eq!(net.params.get(id).item().unwrap(), quant::STEP_MIN);
    }
}
