//! Reverse-mode automatic differentiation over a recorded operation tape.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Operations
//! append nodes and return [`Var`] handles; [`Tape::backward`] walks the
//! nodes in reverse, accumulating gradients additively so a leaf used by
//! several branches (a shared weight forwarded through multiple subnets)
//! collects contributions from all of them. Loss operations compute their
//! logit gradient eagerly at record time; backward only scales it by the
//! upstream value.

use super::functional;
use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};
use crate::quant::{self, QuantBounds};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Batch statistics produced by a train-mode batch-norm application, for the
/// caller to fold into running statistics.
#[derive(Debug, Clone)]
pub struct BnBatchStats {
    /// Per-channel batch mean.
    pub mean: Vec<f32>,
    /// Per-channel biased batch variance.
    pub var: Vec<f32>,
    /// Values per channel (batch times spatial size).
    pub count: usize,
}

enum BackOp {
    Leaf,
    /// Prefix slice of a conv weight `[O,I,K,K] -> [o,i,K,K]`.
    SliceOi {
        src: Var,
    },
    /// Prefix-column slice of a matrix `[R,C] -> [R,c]`.
    SliceCols {
        src: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f32>,
        inv_std: Vec<f32>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f32>,
        inv_std: Vec<f32>,
    },
    Relu {
        x: Var,
    },
    GlobalAvgPool {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    LsqQuant {
        x: Var,
        step: Var,
        bounds: QuantBounds,
        grad_scale: f32,
    },
    /// Any scalar loss whose gradient w.r.t. the logits was computed at
    /// record time.
    LossWithGrad {
        logits: Var,
        dlogits: Tensor,
    },
    SumAll {
        x: Var,
    },
    WeightedSum {
        terms: Vec<(Var, f32)>,
    },
}

struct Node {
    value: Tensor,
    op: BackOp,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a variable; `None` when no gradient flowed to it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

/// Recorded forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a recorded variable.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: BackOp, context: &str) -> Result<Var> {
        value.check_finite(context)?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Record an input or parameter value.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, BackOp::Leaf, "leaf")
    }

    /// Prefix slice of a conv weight: keep the first `out_c` output and
    /// `in_c` input channels.
    pub fn slice_oi(&mut self, w: Var, out_c: usize, in_c: usize) -> Result<Var> {
        let src = self.value(w);
        let s = src.shape();
        if s.len() != 4 {
            return Err(Error::shape("slice_oi", "OIKK weight", format!("{s:?}")));
        }
        let (o_full, i_full, k) = (s[0], s[1], s[2]);
        if out_c == 0 || in_c == 0 || out_c > o_full || in_c > i_full {
            return Err(Error::invalid(format!(
                "slice_oi: requested [{out_c},{in_c}] from [{o_full},{i_full}]"
            )));
        }
        let kk = k * k;
        let mut data = vec![0.0f32; out_c * in_c * kk];
        for o in 0..out_c {
            for i in 0..in_c {
                let src_base = (o * i_full + i) * kk;
                let dst_base = (o * in_c + i) * kk;
                data[dst_base..dst_base + kk].copy_from_slice(&src.data()[src_base..src_base + kk]);
            }
        }
        let value = Tensor::new(vec![out_c, in_c, k, k], data)?;
        self.push(value, BackOp::SliceOi { src: w }, "slice_oi")
    }

    /// Prefix-column slice of a matrix: keep the first `cols` columns.
    pub fn slice_cols(&mut self, m: Var, cols: usize) -> Result<Var> {
        let src = self.value(m);
        let s = src.shape();
        if s.len() != 2 {
            return Err(Error::shape("slice_cols", "[R,C] matrix", format!("{s:?}")));
        }
        let (r_full, c_full) = (s[0], s[1]);
        if cols == 0 || cols > c_full {
            return Err(Error::invalid(format!(
                "slice_cols: requested {cols} of {c_full} columns"
            )));
        }
        let mut data = vec![0.0f32; r_full * cols];
        for r in 0..r_full {
            data[r * cols..(r + 1) * cols]
                .copy_from_slice(&src.data()[r * c_full..r * c_full + cols]);
        }
        let value = Tensor::new(vec![r_full, cols], data)?;
        self.push(value, BackOp::SliceCols { src: m }, "slice_cols")
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let value = kernels::conv2d_forward(self.value(x), self.value(w), stride, pad)?;
        self.push(value, BackOp::Conv2d { x, w, stride, pad }, "conv2d")
    }

    /// Train-mode batch norm: normalizes with the batch statistics and
    /// returns them so the caller can update running estimates.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f32,
    ) -> Result<(Var, BnBatchStats)> {
        let xv = self.value(x);
        let (mean, var) = kernels::batch_stats(xv)?;
        let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let value = kernels::bn_apply(
            xv,
            &mean,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
        )?;
        let s = xv.shape();
        let count = s[0] * s[2] * s[3];
        let stats = BnBatchStats {
            mean: mean.clone(),
            var,
            count,
        };
        let v = self.push(
            value,
            BackOp::BatchNormTrain {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            },
            "batch_norm_train",
        )?;
        Ok((v, stats))
    }

    /// Eval-mode batch norm with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f32],
        var: &[f32],
        eps: f32,
    ) -> Result<Var> {
        let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let value = kernels::bn_apply(
            self.value(x),
            mean,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
        )?;
        self.push(
            value,
            BackOp::BatchNormEval {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                inv_std,
            },
            "batch_norm_eval",
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = kernels::relu_forward(self.value(x));
        self.push(value, BackOp::Relu { x }, "relu")
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let value = kernels::global_avg_pool_forward(self.value(x))?;
        self.push(value, BackOp::GlobalAvgPool { x }, "global_avg_pool")
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let value = kernels::linear_forward(self.value(x), self.value(w), self.value(b))?;
        self.push(value, BackOp::Linear { x, w, b }, "linear")
    }

    /// Fake-quantize a tensor with a learned step size.
    pub fn lsq_quantize(
        &mut self,
        x: Var,
        step: Var,
        bounds: QuantBounds,
        grad_scale: f32,
    ) -> Result<Var> {
        let step_val = self.value(step).item()?;
        let value = quant::quantize_tensor(self.value(x), step_val, bounds)?;
        self.push(
            value,
            BackOp::LsqQuant {
                x,
                step,
                bounds,
                grad_scale,
            },
            "lsq_quantize",
        )
    }

    /// Mean cross-entropy of logits against hard labels.
    pub fn cross_entropy_mean(&mut self, logits: Var, labels: &[u32]) -> Result<Var> {
        let (loss, dlogits) = functional::cross_entropy_hard(self.value(logits), labels)?;
        self.push(
            Tensor::scalar(loss as f32),
            BackOp::LossWithGrad { logits, dlogits },
            "cross_entropy_mean",
        )
    }

    /// Mean KL divergence from fixed reference distributions to the logits.
    pub fn kl_from_reference(&mut self, ref_probs: &Tensor, logits: Var) -> Result<Var> {
        let (loss, dlogits) = functional::kl_from_reference(ref_probs, self.value(logits))?;
        self.push(
            Tensor::scalar(loss as f32),
            BackOp::LossWithGrad { logits, dlogits },
            "kl_from_reference",
        )
    }

    /// Confidence-gated pseudo-label loss; also reports how many rows passed
    /// the gate.
    pub fn pseudo_label(
        &mut self,
        gate_probs: &Tensor,
        logits: Var,
        tau: f32,
    ) -> Result<(Var, usize)> {
        let (loss, dlogits, confident) =
            functional::pseudo_label_loss(gate_probs, self.value(logits), tau)?;
        let v = self.push(
            Tensor::scalar(loss as f32),
            BackOp::LossWithGrad { logits, dlogits },
            "pseudo_label",
        )?;
        Ok((v, confident))
    }

    /// Information-maximization loss over a batch of logits.
    pub fn info_max(&mut self, logits: Var) -> Result<Var> {
        let (loss, dlogits) = functional::info_max_loss(self.value(logits))?;
        self.push(
            Tensor::scalar(loss as f32),
            BackOp::LossWithGrad { logits, dlogits },
            "info_max",
        )
    }

    /// Sum of all elements (deterministic, index order).
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        self.push(Tensor::scalar(s as f32), BackOp::SumAll { x }, "sum_all")
    }

    /// Weighted sum of scalar terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, f32)]) -> Result<Var> {
        let mut acc = 0.0f64;
        for &(v, w) in terms {
            acc += self.value(v).item()? as f64 * w as f64;
        }
        self.push(
            Tensor::scalar(acc as f32),
            BackOp::WeightedSum {
                terms: terms.to_vec(),
            },
            "weighted_sum",
        )
    }

    /// Reverse sweep from a scalar root. Returns per-variable gradients.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            return Err(Error::shape(
                "Tape::backward",
                "scalar root",
                format!("{:?}", self.value(root).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));

        for idx in (0..self.nodes.len()).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            match &self.nodes[idx].op {
                BackOp::Leaf => {
                    grads[idx] = Some(dy);
                    continue;
                }
                BackOp::SliceOi { src } => {
                    let full = self.value(*src).shape().to_vec();
                    let (i_full, k) = (full[1], full[2]);
                    let ds = dy.shape();
                    let (o, i) = (ds[0], ds[1]);
                    let kk = k * k;
                    let mut dw = Tensor::zeros(full);
                    for oo in 0..o {
                        for ii in 0..i {
                            let src_base = (oo * i + ii) * kk;
                            let dst_base = (oo * i_full + ii) * kk;
                            dw.data_mut()[dst_base..dst_base + kk]
                                .copy_from_slice(&dy.data()[src_base..src_base + kk]);
                        }
                    }
                    add_grad(&mut grads, *src, dw)?;
                }
                BackOp::SliceCols { src } => {
                    let full = self.value(*src).shape().to_vec();
                    let (r_full, c_full) = (full[0], full[1]);
                    let cols = dy.shape()[1];
                    let mut dm = Tensor::zeros(full);
                    for r in 0..r_full {
                        dm.data_mut()[r * c_full..r * c_full + cols]
                            .copy_from_slice(&dy.data()[r * cols..(r + 1) * cols]);
                    }
                    add_grad(&mut grads, *src, dm)?;
                }
                BackOp::Conv2d { x, w, stride, pad } => {
                    let (dx, dw) = kernels::conv2d_backward(
                        self.value(*x),
                        self.value(*w),
                        &dy,
                        *stride,
                        *pad,
                    )?;
                    add_grad(&mut grads, *x, dx)?;
                    add_grad(&mut grads, *w, dw)?;
                }
                BackOp::BatchNormTrain {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                } => {
                    let (dx, dgamma, dbeta) = kernels::bn_train_backward(
                        self.value(*x),
                        &dy,
                        mean,
                        inv_std,
                        self.value(*gamma).data(),
                    )?;
                    add_grad(&mut grads, *x, dx)?;
                    add_grad(&mut grads, *gamma, Tensor::new(vec![dgamma.len()], dgamma)?)?;
                    add_grad(&mut grads, *beta, Tensor::new(vec![dbeta.len()], dbeta)?)?;
                }
                BackOp::BatchNormEval {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                } => {
                    let (dx, dgamma, dbeta) = kernels::bn_eval_backward(
                        self.value(*x),
                        &dy,
                        mean,
                        inv_std,
                        self.value(*gamma).data(),
                    )?;
                    add_grad(&mut grads, *x, dx)?;
                    add_grad(&mut grads, *gamma, Tensor::new(vec![dgamma.len()], dgamma)?)?;
                    add_grad(&mut grads, *beta, Tensor::new(vec![dbeta.len()], dbeta)?)?;
                }
                BackOp::Relu { x } => {
                    let dx = kernels::relu_backward(self.value(*x), &dy);
                    add_grad(&mut grads, *x, dx)?;
                }
                BackOp::GlobalAvgPool { x } => {
                    let dx = kernels::global_avg_pool_backward(self.value(*x).shape(), &dy)?;
                    add_grad(&mut grads, *x, dx)?;
                }
                BackOp::Linear { x, w, b } => {
                    let (dx, dw, db) =
                        kernels::linear_backward(self.value(*x), self.value(*w), &dy)?;
                    add_grad(&mut grads, *x, dx)?;
                    add_grad(&mut grads, *w, dw)?;
                    add_grad(&mut grads, *b, db)?;
                }
                BackOp::LsqQuant {
                    x,
                    step,
                    bounds,
                    grad_scale,
                } => {
                    let step_val = self.value(*step).item()?;
                    let (dx, dstep) =
                        quant::lsq_backward(self.value(*x), step_val, *bounds, *grad_scale, &dy)?;
                    add_grad(&mut grads, *x, dx)?;
                    add_grad(&mut grads, *step, Tensor::scalar(dstep))?;
                }
                BackOp::LossWithGrad { logits, dlogits } => {
                    let upstream = dy.item()?;
                    let mut dl = dlogits.clone();
                    if upstream != 1.0 {
                        for v in dl.data_mut() {
                            *v *= upstream;
                        }
                    }
                    add_grad(&mut grads, *logits, dl)?;
                }
                BackOp::SumAll { x } => {
                    let upstream = dy.item()?;
                    let dx = Tensor::full(self.value(*x).shape().to_vec(), upstream);
                    add_grad(&mut grads, *x, dx)?;
                }
                BackOp::WeightedSum { terms } => {
                    let upstream = dy.item()?;
                    for &(v, w) in terms {
                        add_grad(&mut grads, v, Tensor::scalar(upstream * w))?;
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn add_grad(grads: &mut [Option<Tensor>], v: Var, delta: Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => {
            if existing.shape() != delta.shape() {
                return Err(Error::shape(
                    "add_grad",
                    format!("{:?}", existing.shape()),
                    format!("{:?}", delta.shape()),
                ));
            }
            for (a, b) in existing.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: &mut u64) -> f32 {
        *seed = seed
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        ((*seed >> 33) as f32 / (1u64 << 31) as f32) - 0.5
    }

    fn rand_tensor(shape: Vec<usize>, seed: &mut u64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| lcg(seed)).collect()).unwrap()
    }

    /// FD-check the gradient of `build`'s scalar output against each input.
    fn check_grads(inputs: &[Tensor], build: &dyn Fn(&mut Tape, &[Var]) -> Var, h: f32, tol: f64) {
        let eval = |vals: &[Tensor]| -> f64 {
            let mut tape = Tape::new();
            let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone()).unwrap()).collect();
            let out = build(&mut tape, &vars);
            tape.value(out).item().unwrap() as f64
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| tape.leaf(t.clone()).unwrap())
            .collect();
        let out = build(&mut tape, &vars);
        let grads = tape.backward(out).unwrap();
        for (vi, input) in inputs.iter().enumerate() {
            let analytic = grads
                .get(vars[vi])
                .unwrap_or_else(|| panic!("no grad for input {vi}"));
            for i in 0..input.numel() {
                let mut plus = inputs.to_vec();
                plus[vi].data_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[vi].data_mut()[i] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h as f64);
                let a = analytic.data()[i] as f64;
                let err = (a - numeric).abs() / numeric.abs().max(1e-2);
                assert!(
                    err < tol,
                    "input {vi} grad[{i}]: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn conv_chain_grads_match_fd() {
        let mut seed = 7u64;
        let x = rand_tensor(vec![2, 2, 5, 5], &mut seed);
        let w = rand_tensor(vec![3, 2, 3, 3], &mut seed);
        check_grads(
            &[x, w],
            &|tape, v| {
                let y = tape.conv2d(v[0], v[1], 2, 1).unwrap();
                tape.sum_all(y).unwrap()
            },
            1e-2,
            2e-2,
        );
    }

    #[test]
    fn bn_train_grads_match_fd() {
        let mut seed = 11u64;
        let x = rand_tensor(vec![3, 2, 4, 4], &mut seed);
        let gamma = Tensor::new(vec![2], vec![1.2, 0.8]).unwrap();
        let beta = Tensor::new(vec![2], vec![0.1, -0.2]).unwrap();
        // The sum of a normalized field is constant in x, so scalarize
        // through pool + linear, which is smooth (finite differences would
        // step across relu kinks on normalized data).
        let hw = rand_tensor(vec![3, 2], &mut seed);
        let hb = rand_tensor(vec![3], &mut seed);
        check_grads(
            &[x, gamma, beta],
            &|tape, v| {
                let (y, _) = tape.batch_norm_train(v[0], v[1], v[2], 1e-5).unwrap();
                let g = tape.global_avg_pool(y).unwrap();
                let w = tape.leaf(hw.clone()).unwrap();
                let b = tape.leaf(hb.clone()).unwrap();
                let o = tape.linear(g, w, b).unwrap();
                tape.sum_all(o).unwrap()
            },
            1e-2,
            3e-2,
        );
    }

    #[test]
    fn bn_eval_grads_match_fd() {
        let mut seed = 17u64;
        let x = rand_tensor(vec![2, 2, 3, 3], &mut seed);
        let gamma = Tensor::new(vec![2], vec![1.1, 0.9]).unwrap();
        let beta = Tensor::new(vec![2], vec![0.0, 0.3]).unwrap();
        let mean = [0.1f32, -0.2];
        let var = [0.5f32, 1.5];
        check_grads(
            &[x, gamma, beta],
            &|tape, v| {
                let y = tape
                    .batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)
                    .unwrap();
                let r = tape.relu(y).unwrap();
                tape.sum_all(r).unwrap()
            },
            1e-2,
            2e-2,
        );
    }

    #[test]
    fn full_block_with_loss_grads_match_fd() {
        let mut seed = 23u64;
        let x = rand_tensor(vec![2, 2, 5, 5], &mut seed);
        let w = rand_tensor(vec![4, 2, 3, 3], &mut seed);
        let gamma = Tensor::full(vec![4], 1.0);
        // Shift the normalized field well above zero so finite differences
        // never step across a relu kink; relu still checks the routing.
        let beta = Tensor::full(vec![4], 2.5);
        let hw = rand_tensor(vec![3, 4], &mut seed);
        let hb = rand_tensor(vec![3], &mut seed);
        let labels = [0u32, 2];
        check_grads(
            &[x, w, gamma, beta, hw, hb],
            &|tape, v| {
                let c = tape.conv2d(v[0], v[1], 2, 1).unwrap();
                let (b, _) = tape.batch_norm_train(c, v[2], v[3], 1e-5).unwrap();
                let r = tape.relu(b).unwrap();
                let g = tape.global_avg_pool(r).unwrap();
                let logits = tape.linear(g, v[4], v[5]).unwrap();
                tape.cross_entropy_mean(logits, &labels).unwrap()
            },
            1e-2,
            3e-2,
        );
    }

    #[test]
    fn slices_route_grads_into_prefix_blocks() {
        let mut seed = 31u64;
        let w = rand_tensor(vec![4, 3, 3, 3], &mut seed);
        let x = rand_tensor(vec![1, 2, 4, 4], &mut seed);
        let mut tape = Tape::new();
        let wv = tape.leaf(w.clone()).unwrap();
        let xv = tape.leaf(x).unwrap();
        let ws = tape.slice_oi(wv, 2, 2).unwrap();
        assert_eq!(tape.value(ws).shape(), &[2, 2, 3, 3]);
        let y = tape.conv2d(xv, ws, 1, 1).unwrap();
        let loss = tape.sum_all(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        let dw = grads.get(wv).unwrap();
        assert_eq!(dw.shape(), &[4, 3, 3, 3]);
        // Gradient lands only in the [0..2, 0..2] prefix block.
        for o in 0..4 {
            for i in 0..3 {
                let base = (o * 3 + i) * 9;
                let blk = &dw.data()[base..base + 9];
                if o < 2 && i < 2 {
                    assert!(blk.iter().any(|&v| v != 0.0), "expected grad at {o},{i}");
                } else {
                    assert!(blk.iter().all(|&v| v == 0.0), "unexpected grad at {o},{i}");
                }
            }
        }
    }

    #[test]
    fn slice_cols_grads_are_prefix_only() {
        let mut seed = 37u64;
        let m = rand_tensor(vec![3, 5], &mut seed);
        let x = rand_tensor(vec![2, 2], &mut seed);
        let b = Tensor::zeros(vec![3]);
        let mut tape = Tape::new();
        let mv = tape.leaf(m).unwrap();
        let xv = tape.leaf(x).unwrap();
        let bv = tape.leaf(b).unwrap();
        let ms = tape.slice_cols(mv, 2).unwrap();
        let y = tape.linear(xv, ms, bv).unwrap();
        let loss = tape.sum_all(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        let dm = grads.get(mv).unwrap();
        for r in 0..3 {
            for c in 0..5 {
                let g = dm.data()[r * 5 + c];
                if c < 2 {
                    assert!(g != 0.0);
                } else {
                    assert_eq!(g, 0.0);
                }
            }
        }
    }

    #[test]
    fn shared_leaf_accumulates_over_branches() {
        // f(w) = sum(conv(x1, w)) + sum(conv(x2, w)): dw is the sum of both
        // branch gradients.
        let mut seed = 41u64;
        let w = rand_tensor(vec![2, 1, 3, 3], &mut seed);
        let x1 = rand_tensor(vec![1, 1, 4, 4], &mut seed);
        let x2 = rand_tensor(vec![1, 1, 4, 4], &mut seed);

        let branch = |x: &Tensor, w: &Tensor| -> Tensor {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone()).unwrap();
            let wv = tape.leaf(w.clone()).unwrap();
            let y = tape.conv2d(xv, wv, 1, 1).unwrap();
            let s = tape.sum_all(y).unwrap();
            let g = tape.backward(s).unwrap();
            g.get(wv).unwrap().clone()
        };
        let g1 = branch(&x1, &w);
        let g2 = branch(&x2, &w);

        let mut tape = Tape::new();
        let wv = tape.leaf(w).unwrap();
        let x1v = tape.leaf(x1).unwrap();
        let x2v = tape.leaf(x2).unwrap();
        let y1 = tape.conv2d(x1v, wv, 1, 1).unwrap();
        let y2 = tape.conv2d(x2v, wv, 1, 1).unwrap();
        let s1 = tape.sum_all(y1).unwrap();
        let s2 = tape.sum_all(y2).unwrap();
        let total = tape.weighted_sum(&[(s1, 1.0), (s2, 1.0)]).unwrap();
        let grads = tape.backward(total).unwrap();
        let both = grads.get(wv).unwrap();
        for i in 0..both.numel() {
            let want = g1.data()[i] + g2.data()[i];
            assert!((both.data()[i] - want).abs() < 1e-5);
        }
    }

    #[test]
    fn weighted_sum_scales_upstream() {
        let mut seed = 43u64;
        let logits = rand_tensor(vec![2, 3], &mut seed);
        let labels = [1u32, 0];
        let mut tape = Tape::new();
        let lv = tape.leaf(logits.clone()).unwrap();
        let ce = tape.cross_entropy_mean(lv, &labels).unwrap();
        let total = tape.weighted_sum(&[(ce, 2.5)]).unwrap();
        let grads = tape.backward(total).unwrap();
        let g = grads.get(lv).unwrap();
        let (_, base) = functional::cross_entropy_hard(&logits, &labels).unwrap();
        for i in 0..g.numel() {
            assert!((g.data()[i] - 2.5 * base.data()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_weight_term_contributes_exactly_zero() {
        let mut seed = 47u64;
        let logits = rand_tensor(vec![2, 3], &mut seed);
        let mut tape = Tape::new();
        let lv = tape.leaf(logits).unwrap();
        let ce = tape.cross_entropy_mean(lv, &[1, 0]).unwrap();
        let im = tape.info_max(lv).unwrap();
        let only_ce = tape.weighted_sum(&[(ce, 1.0), (im, 0.0)]).unwrap();
        let grads = tape.backward(only_ce).unwrap();
        let g = grads.get(lv).unwrap().clone();

        let mut tape2 = Tape::new();
        let lv2 = tape2.leaf(tape.value(lv).clone()).unwrap();
        let ce2 = tape2.cross_entropy_mean(lv2, &[1, 0]).unwrap();
        let grads2 = tape2.backward(ce2).unwrap();
        let g2 = grads2.get(lv2).unwrap();
        assert_eq!(g.data(), g2.data());
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::zeros(vec![2, 2])).unwrap();
        assert!(tape.backward(v).is_err());
    }

    #[test]
    fn non_finite_forward_is_rejected() {
        let mut tape = Tape::new();
        let x = tape
            .leaf(Tensor::new(vec![1, 2], vec![1.0e38, 1.0e38]).unwrap())
            .unwrap();
        let w = tape
            .leaf(Tensor::new(vec![1, 2], vec![1.0e38, 1.0e38]).unwrap())
            .unwrap();
        let b = tape.leaf(Tensor::zeros(vec![1])).unwrap();
        // 1e38 * 1e38 overflows f32 -> forward must error, not propagate inf.
        assert!(tape.linear(x, w, b).is_err());
    }
}
