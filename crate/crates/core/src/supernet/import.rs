//! Exchange with plain (non-switchable, unquantized) networks.
//!
//! A [`PlainWeights`] bundle holds exactly what a conventional float
//! classifier of the same architecture would hold: one weight tensor and one
//! batch-norm state per conv block, plus the head. Exporting takes the
//! width-1.0 view of a supernet; importing seeds a fresh supernet from a
//! plain checkpoint, copying BN state into every (domain, width) bank prefix
//! and re-deriving quantizer steps from the imported weights.

use crate::error::{Error, Result};
use crate::numerics::kernels;
use crate::numerics::Tensor;
use crate::quant;

use super::arch::ArchSpec;
use super::net::{Domain, Supernet, BN_EPS};

/// Batch-norm state of one plain layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PlainBn {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
}

/// One plain conv block: full-width weight plus its batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct PlainConv {
    pub weight: Tensor,
    pub bn: PlainBn,
}

/// A complete plain float classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct PlainWeights {
    pub arch: ArchSpec,
    pub convs: Vec<PlainConv>,
    pub head_weight: Tensor,
    pub head_bias: Vec<f32>,
}

impl PlainWeights {
    /// Forward pass of the plain network (eval-mode BN, no quantization),
    /// built directly on the compute kernels. The width-1.0 unquantized view
    /// of a supernet holding the same values produces bit-identical logits.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if self.convs.len() != self.arch.blocks.len() {
            return Err(Error::shape(
                "PlainWeights::forward",
                format!("{} conv blocks", self.arch.blocks.len()),
                format!("{}", self.convs.len()),
            ));
        }
        let mut cur = x.clone();
        for (spec, conv) in self.arch.blocks.iter().zip(&self.convs) {
            cur = kernels::conv2d_forward(&cur, &conv.weight, spec.stride, spec.pad)?;
            let inv_std: Vec<f32> = conv
                .bn
                .running_var
                .iter()
                .map(|&v| 1.0 / (v + BN_EPS).sqrt())
                .collect();
            cur = kernels::bn_apply(
                &cur,
                &conv.bn.running_mean,
                &inv_std,
                &conv.bn.gamma,
                &conv.bn.beta,
            )?;
            cur = kernels::relu_forward(&cur);
        }
        cur = kernels::global_avg_pool_forward(&cur)?;
        let bias = Tensor::new(vec![self.head_bias.len()], self.head_bias.clone())?;
        kernels::linear_forward(&cur, &self.head_weight, &bias)
    }
}

/// Extract the width-1.0 view of a supernet as a plain network, taking BN
/// state from the given domain's full-width bank.
pub fn export_plain(net: &Supernet, domain: Domain) -> Result<PlainWeights> {
    let widths = net.width_count();
    let mut convs = Vec::with_capacity(net.blocks.len());
    for (bi, block) in net.blocks.iter().enumerate() {
        let bank = &block.banks[block.bank_index(widths, domain, 0)];
        if !bank.initialized {
            return Err(Error::invalid(format!(
                "cannot export: BN bank (block {bi}, {}, w1.00) has no running statistics",
                domain.name()
            )));
        }
        convs.push(PlainConv {
            weight: net.params.get(block.weight).clone(),
            bn: PlainBn {
                gamma: net.params.get(bank.gamma).data().to_vec(),
                beta: net.params.get(bank.beta).data().to_vec(),
                running_mean: bank.running_mean.clone(),
                running_var: bank.running_var.clone(),
            },
        });
    }
    Ok(PlainWeights {
        arch: net.arch.clone(),
        convs,
        head_weight: net.params.get(net.head.weight).clone(),
        head_bias: net.params.get(net.head.bias).data().to_vec(),
    })
}

/// Load plain weights into a supernet.
///
/// Conv and head weights replace the full tensors; every (domain, width) BN
/// bank takes the leading channels of the plain BN state; quantizer steps are
/// re-initialized from the imported weights.
pub fn import_plain(net: &mut Supernet, plain: &PlainWeights) -> Result<()> {
    if plain.convs.len() != net.blocks.len() {
        return Err(Error::shape(
            "import_plain",
            format!("{} conv blocks", net.blocks.len()),
            format!("{}", plain.convs.len()),
        ));
    }
    for (bi, (block, conv)) in net.blocks.iter().zip(&plain.convs).enumerate() {
        let expect = net.params.get(block.weight).shape();
        if conv.weight.shape() != expect {
            return Err(Error::shape(
                "import_plain",
                format!("block {bi} weight {expect:?}"),
                format!("{:?}", conv.weight.shape()),
            ));
        }
        let ch = block.spec.base_out;
        for (name, len) in [
            ("gamma", conv.bn.gamma.len()),
            ("beta", conv.bn.beta.len()),
            ("running_mean", conv.bn.running_mean.len()),
            ("running_var", conv.bn.running_var.len()),
        ] {
            if len != ch {
                return Err(Error::shape(
                    "import_plain",
                    format!("block {bi} bn.{name} with {ch} channels"),
                    format!("{len}"),
                ));
            }
        }
    }
    let expect = net.params.get(net.head.weight).shape();
    if plain.head_weight.shape() != expect {
        return Err(Error::shape(
            "import_plain (head weight)",
            format!("{expect:?}"),
            format!("{:?}", plain.head_weight.shape()),
        ));
    }
    if plain.head_bias.len() != net.arch.num_classes {
        return Err(Error::shape(
            "import_plain (head bias)",
            format!("{} classes", net.arch.num_classes),
            format!("{}", plain.head_bias.len()),
        ));
    }

    for (block, conv) in net.blocks.iter_mut().zip(&plain.convs) {
        net.params
            .get_mut(block.weight)
            .data_mut()
            .copy_from_slice(conv.weight.data());
        for bank in &mut block.banks {
            let ch = bank.running_mean.len();
            net.params
                .get_mut(bank.gamma)
                .data_mut()
                .copy_from_slice(&conv.bn.gamma[..ch]);
            net.params
                .get_mut(bank.beta)
                .data_mut()
                .copy_from_slice(&conv.bn.beta[..ch]);
            bank.running_mean
                .copy_from_slice(&conv.bn.running_mean[..ch]);
            bank.running_var.copy_from_slice(&conv.bn.running_var[..ch]);
            bank.initialized = true;
        }
    }
    net.params
        .get_mut(net.head.weight)
        .data_mut()
        .copy_from_slice(plain.head_weight.data());
    net.params
        .get_mut(net.head.bias)
        .data_mut()
        .copy_from_slice(&plain.head_bias);

    reinit_quant_steps(net)?;
    derive_act_steps(net, plain)
}

/// Abramowitz–Stegun 7.1.26 rational approximation of erf (absolute error
/// below 1.5e-7), enough precision for a step-size heuristic.
fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    sign * (1.0 - poly * (-x * x).exp())
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Mean of `max(0, Y)` for `Y ~ N(mu, sigma^2)`.
fn relu_mean(mu: f64, sigma: f64) -> f64 {
    if sigma < 1e-12 {
        return mu.max(0.0);
    }
    mu * normal_cdf(mu / sigma) + sigma * normal_pdf(mu / sigma)
}

/// Derive activation quantizer steps from the imported batch-norm
/// parameters.
///
/// The construction-time formula estimates activation scale from weight
/// statistics, which is only a placeholder until training adjusts the steps;
/// an imported network runs without training, so the steps must fit the
/// activations immediately. Block 0 quantizes the input image, assumed unit
/// range, so its step spans [0, 1] over the full code range. Every later
/// block quantizes the previous block's output, which after batch norm is
/// approximately N(beta_c, gamma_c^2) per channel and rectified, so the
/// usual `2 * mean|v| / sqrt(upper)` rule applies with the closed-form
/// rectified-Gaussian mean.
fn derive_act_steps(net: &mut Supernet, plain: &PlainWeights) -> Result<()> {
    for bi in 0..net.blocks.len() {
        for qi in 0..net.space.bits.len() {
            let ab = net.blocks[bi].quant.act_bounds[qi];
            let step = if bi == 0 {
                1.0 / ab.upper as f64
            } else {
                let bn = &plain.convs[bi - 1].bn;
                let mut acc = 0.0f64;
                for (g, b) in bn.gamma.iter().zip(&bn.beta) {
                    acc += relu_mean(*b as f64, (*g as f64).abs());
                }
                let mean_abs = acc / bn.gamma.len() as f64;
                2.0 * mean_abs / (ab.upper as f64).sqrt()
            };
            let step = if step.is_finite() && step > 0.0 {
                step as f32
            } else {
                quant::STEP_INIT_FALLBACK
            };
            let id = net.blocks[bi].quant.act_steps[qi];
            net.params.get_mut(id).data_mut()[0] = step;
        }
    }
    Ok(())
}

/// Recompute every quantizer step from the current weight values, as done at
/// construction time.
pub fn reinit_quant_steps(net: &mut Supernet) -> Result<()> {
    for bi in 0..net.blocks.len() {
        let weight_data = net.params.get(net.blocks[bi].weight).data().to_vec();
        for qi in 0..net.space.bits.len() {
            let wb = net.blocks[bi].quant.weight_bounds[qi];
            let ab = net.blocks[bi].quant.act_bounds[qi];
            let ws = quant::init_step(&weight_data, wb)?;
            let as_ = quant::init_step(&weight_data, ab)?;
            let ws_id = net.blocks[bi].quant.weight_steps[qi];
            let as_id = net.blocks[bi].quant.act_steps[qi];
            net.params.get_mut(ws_id).data_mut()[0] = ws;
            net.params.get_mut(as_id).data_mut()[0] = as_;
        }
    }
    let head_data = net.params.get(net.head.weight).data().to_vec();
    for qi in 0..net.space.bits.len() {
        let hb = net.head.weight_bounds[qi];
        let hs = quant::init_step(&head_data, hb)?;
        let id = net.head.weight_steps[qi];
        net.params.get_mut(id).data_mut()[0] = hs;
    }
    Ok(())
}
