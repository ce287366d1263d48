//! Compute-cost model and budget planning over the configuration grid.
//!
//! Costs are exact integers: MACs from the standard conv cost model and
//! BitOPs as MACs weighted by the squared bit-width. Budgets partition the
//! cost range into equal intervals; per budget, the best-measured
//! configuration among those that fit is selected.

use crate::error::{Error, Result};
use crate::numerics::kernels::conv_out_size;
use crate::supernet::arch::{channels_at, ArchSpec, ConfigSpace, SubnetConfig};

/// Cost axis used for budget partitioning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BudgetAxis {
    /// Partition on multiply-accumulate counts.
    #[default]
    Macs,
    /// Partition on bit operations.
    Bitops,
}

/// Exact per-configuration cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConfigCost {
    pub config: SubnetConfig,
    pub macs: u64,
    pub bitops: u64,
}

impl ConfigCost {
    pub fn on_axis(&self, axis: BudgetAxis) -> u64 {
        match axis {
            BudgetAxis::Macs => self.macs,
            BudgetAxis::Bitops => self.bitops,
        }
    }
}

/// Multiply-accumulate count of one forward pass at a configuration.
///
/// Each conv contributes `C_in * C_out * K^2 * H_out * W_out` with channel
/// counts width-scaled and spatial sizes propagated from the input
/// resolution; pooling is free; the linear head contributes
/// `features * classes`.
pub fn macs_of(arch: &ArchSpec, config: &SubnetConfig) -> Result<u64> {
    arch.validate()?;
    if config.resolution == 0 {
        return Err(Error::invalid("resolution must be positive"));
    }
    let mut h = config.resolution as usize;
    let mut w = config.resolution as usize;
    let mut total: u64 = 0;
    for (i, b) in arch.blocks.iter().enumerate() {
        let c_in = if i == 0 {
            arch.in_channels
        } else {
            channels_at(arch.base_in(i), config.width)
        };
        let c_out = channels_at(b.base_out, config.width);
        h = conv_out_size(h, b.kernel, b.stride, b.pad)?;
        w = conv_out_size(w, b.kernel, b.stride, b.pad)?;
        total += (c_in * c_out * b.kernel * b.kernel * h * w) as u64;
    }
    let features = channels_at(arch.last_base_out(), config.width);
    total += (features * arch.num_classes) as u64;
    Ok(total)
}

/// BitOPs of a MAC count at a uniform bit-width: `macs * bits * bits`.
pub fn bitops_of(macs: u64, bits: u32) -> u64 {
    macs * bits as u64 * bits as u64
}

/// Cost of every configuration, sorted ascending by BitOPs with ties broken
/// by (bits, width, resolution) ascending.
pub fn enumerate_configs(arch: &ArchSpec, space: &ConfigSpace) -> Result<Vec<ConfigCost>> {
    space.validate()?;
    let mut costs = Vec::new();
    for config in space.configs() {
        let macs = macs_of(arch, &config)?;
        costs.push(ConfigCost {
            config,
            macs,
            bitops: bitops_of(macs, config.bits),
        });
    }
    costs.sort_by(|a, b| {
        a.bitops
            .cmp(&b.bitops)
            .then(a.config.bits.cmp(&b.config.bits))
            .then(a.config.width.partial_cmp(&b.config.width).unwrap())
            .then(a.config.resolution.cmp(&b.config.resolution))
    });
    Ok(costs)
}

/// One budget interval of a plan.
#[derive(Debug, Clone)]
pub struct BudgetEntry {
    /// 1-based interval index.
    pub interval: usize,
    /// Inclusive cost threshold on the partition axis.
    pub budget: u64,
    /// Indices into the plan's cost table, ascending.
    pub admissible: Vec<usize>,
    /// Index of the selected configuration, once accuracies are known.
    pub selected: Option<usize>,
}

/// Budgets partitioning the cost range, with admissible sets and (after
/// [`select_subnets`]) the chosen configuration per budget.
#[derive(Debug, Clone)]
pub struct BudgetPlan {
    pub axis: BudgetAxis,
    pub costs: Vec<ConfigCost>,
    pub entries: Vec<BudgetEntry>,
}

/// Split the cost range into `n` equal intervals on `axis`.
///
/// Thresholds are `b_i = min + i * (max - min) / n` for `i = 1..=n`; the last
/// threshold equals the maximum cost exactly, so every configuration is
/// admissible under it.
pub fn partition_budgets(costs: &[ConfigCost], n: usize, axis: BudgetAxis) -> Result<BudgetPlan> {
    if n == 0 {
        return Err(Error::invalid("interval count must be at least 1"));
    }
    if costs.is_empty() {
        return Err(Error::invalid("cannot partition an empty cost table"));
    }
    let min = costs.iter().map(|c| c.on_axis(axis)).min().unwrap();
    let max = costs.iter().map(|c| c.on_axis(axis)).max().unwrap();
    let span = (max - min) as f64;
    let mut entries = Vec::with_capacity(n);
    for i in 1..=n {
        // Integer costs make `cost <= t` equivalent to `cost <= floor(t)`,
        // so flooring the real-valued threshold preserves admissibility.
        let budget = if i == n {
            max
        } else {
            min + (span * i as f64 / n as f64).floor() as u64
        };
        let admissible: Vec<usize> = costs
            .iter()
            .enumerate()
            .filter(|(_, c)| c.on_axis(axis) <= budget)
            .map(|(idx, _)| idx)
            .collect();
        entries.push(BudgetEntry {
            interval: i,
            budget,
            admissible,
            selected: None,
        });
    }
    Ok(BudgetPlan {
        axis,
        costs: costs.to_vec(),
        entries,
    })
}

/// Fill in the selected configuration per budget: the admissible config with
/// the highest accuracy, ties broken by lower BitOPs.
///
/// `accuracy_of` maps an index into the plan's cost table to measured
/// accuracy. Budgets with an empty admissible set stay unselected.
pub fn select_subnets(plan: &mut BudgetPlan, accuracy_of: &dyn Fn(usize) -> f64) -> Result<()> {
    for entry in &mut plan.entries {
        let mut best: Option<(usize, f64, u64)> = None;
        for &idx in &entry.admissible {
            let acc = accuracy_of(idx);
            if !acc.is_finite() {
                return Err(Error::invalid(format!(
                    "non-finite accuracy {acc} for configuration {}",
                    plan.costs[idx].config
                )));
            }
            let bits = plan.costs[idx].bitops;
            let better = match best {
                None => true,
                Some((_, bacc, bbits)) => acc > bacc || (acc == bacc && bits < bbits),
            };
            if better {
                best = Some((idx, acc, bits));
            }
        }
        entry.selected = best.map(|(idx, _, _)| idx);
    }
    Ok(())
}
