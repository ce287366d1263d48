//! Pure functions for classification heads: softmax, entropies, losses and
//! the learning-rate schedule.
//!
//! Losses return the scalar value together with the analytic gradient with
//! respect to the logits, so the tape ops and the finite-difference checks
//! exercise the same arithmetic. Internals accumulate in `f64` and store back
//! to `f32`.

use super::Tensor;
use crate::error::{Error, Result};

/// Tolerance for "rows are probability distributions" validation.
pub const PROB_SUM_TOL: f64 = 1e-5;

fn rows_of(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() != 2 || s[0] == 0 || s[1] == 0 {
        return Err(Error::shape(op, "[rows, classes]", format!("{s:?}")));
    }
    Ok((s[0], s[1]))
}

/// Check every row is a probability distribution: entries non-negative and
/// summing to 1 within [`PROB_SUM_TOL`].
pub fn validate_prob_rows(probs: &Tensor, context: &str) -> Result<()> {
    let (n, c) = rows_of(probs, "validate_prob_rows")?;
    for r in 0..n {
        let row = &probs.data()[r * c..(r + 1) * c];
        let mut sum = 0.0f64;
        for &p in row {
            if p < 0.0 || p.is_nan() {
                return Err(Error::invalid(format!(
                    "{context}: row {r} has negative probability {p}"
                )));
            }
            sum += p as f64;
        }
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::invalid(format!(
                "{context}: row {r} sums to {sum}, expected 1 within {PROB_SUM_TOL}"
            )));
        }
    }
    Ok(())
}

fn softmax64(row: &[f32]) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let mut out: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

fn log_softmax64(row: &[f32]) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let log_sum = row
        .iter()
        .map(|&v| (v as f64 - max).exp())
        .sum::<f64>()
        .ln();
    row.iter().map(|&v| v as f64 - max - log_sum).collect()
}

/// Row-wise softmax of a `[N, C]` logit matrix.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let (n, c) = rows_of(logits, "softmax_rows")?;
    let mut out = vec![0.0f32; n * c];
    for r in 0..n {
        let q = softmax64(&logits.data()[r * c..(r + 1) * c]);
        for (dst, v) in out[r * c..(r + 1) * c].iter_mut().zip(q) {
            *dst = v as f32;
        }
    }
    Tensor::new(vec![n, c], out)
}

/// Row-wise log-softmax of a `[N, C]` logit matrix.
pub fn log_softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let (n, c) = rows_of(logits, "log_softmax_rows")?;
    let mut out = vec![0.0f32; n * c];
    for r in 0..n {
        let ls = log_softmax64(&logits.data()[r * c..(r + 1) * c]);
        for (dst, v) in out[r * c..(r + 1) * c].iter_mut().zip(ls) {
            *dst = v as f32;
        }
    }
    Tensor::new(vec![n, c], out)
}

/// Shannon entropy of one probability row, in nats; `0 ln 0 = 0`.
pub fn entropy_row(row: &[f32]) -> f64 {
    let mut h = 0.0f64;
    for &p in row {
        let p = p as f64;
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    h
}

/// Index of the row maximum; first occurrence wins ties.
pub fn argmax_row(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Number of rows whose argmax equals the label.
pub fn count_correct(logits: &Tensor, labels: &[u32]) -> Result<usize> {
    let (n, c) = rows_of(logits, "count_correct")?;
    if labels.len() != n {
        return Err(Error::shape(
            "count_correct",
            format!("{n} labels"),
            format!("{}", labels.len()),
        ));
    }
    let mut correct = 0;
    for (r, &y) in labels.iter().enumerate() {
        if argmax_row(&logits.data()[r * c..(r + 1) * c]) == y as usize {
            correct += 1;
        }
    }
    Ok(correct)
}

/// Mean cross-entropy against hard labels; returns the loss and its gradient
/// with respect to the logits.
pub fn cross_entropy_hard(logits: &Tensor, labels: &[u32]) -> Result<(f64, Tensor)> {
    let (n, c) = rows_of(logits, "cross_entropy_hard")?;
    if labels.len() != n {
        return Err(Error::shape(
            "cross_entropy_hard",
            format!("{n} labels"),
            format!("{}", labels.len()),
        ));
    }
    let mut loss = 0.0f64;
    let mut grad = vec![0.0f32; n * c];
    let inv_n = 1.0 / n as f64;
    for (r, &y) in labels.iter().enumerate() {
        let y = y as usize;
        if y >= c {
            return Err(Error::invalid(format!(
                "label {y} out of range for {c} classes"
            )));
        }
        let row = &logits.data()[r * c..(r + 1) * c];
        let ls = log_softmax64(row);
        loss -= ls[y];
        for j in 0..c {
            let q = ls[j].exp();
            let onehot = if j == y { 1.0 } else { 0.0 };
            grad[r * c + j] = ((q - onehot) * inv_n) as f32;
        }
    }
    Ok((loss * inv_n, Tensor::new(vec![n, c], grad)?))
}

/// Mean cross-entropy against soft targets: `-(1/N) sum_i sum_j p_ij ls_ij`.
pub fn cross_entropy_soft(target_probs: &Tensor, logits: &Tensor) -> Result<(f64, Tensor)> {
    let (n, c) = rows_of(logits, "cross_entropy_soft")?;
    if target_probs.shape() != logits.shape() {
        return Err(Error::shape(
            "cross_entropy_soft",
            format!("{:?}", logits.shape()),
            format!("{:?}", target_probs.shape()),
        ));
    }
    validate_prob_rows(target_probs, "cross_entropy_soft targets")?;
    let mut loss = 0.0f64;
    let mut grad = vec![0.0f32; n * c];
    let inv_n = 1.0 / n as f64;
    for r in 0..n {
        let p = &target_probs.data()[r * c..(r + 1) * c];
        let ls = log_softmax64(&logits.data()[r * c..(r + 1) * c]);
        let psum: f64 = p.iter().map(|&v| v as f64).sum();
        for j in 0..c {
            loss -= p[j] as f64 * ls[j];
            let q = ls[j].exp();
            grad[r * c + j] = ((q * psum - p[j] as f64) * inv_n) as f32;
        }
    }
    Ok((loss * inv_n, Tensor::new(vec![n, c], grad)?))
}

/// Mean KL divergence `KL(p || softmax(logits))` from fixed reference
/// distributions `p` to the distribution implied by the logits.
pub fn kl_from_reference(ref_probs: &Tensor, logits: &Tensor) -> Result<(f64, Tensor)> {
    let (n, c) = rows_of(logits, "kl_from_reference")?;
    if ref_probs.shape() != logits.shape() {
        return Err(Error::shape(
            "kl_from_reference",
            format!("{:?}", logits.shape()),
            format!("{:?}", ref_probs.shape()),
        ));
    }
    validate_prob_rows(ref_probs, "kl_from_reference reference")?;
    let mut loss = 0.0f64;
    let mut grad = vec![0.0f32; n * c];
    let inv_n = 1.0 / n as f64;
    for r in 0..n {
        let p = &ref_probs.data()[r * c..(r + 1) * c];
        let ls = log_softmax64(&logits.data()[r * c..(r + 1) * c]);
        let psum: f64 = p.iter().map(|&v| v as f64).sum();
        for j in 0..c {
            let pj = p[j] as f64;
            if pj > 0.0 {
                loss += pj * (pj.ln() - ls[j]);
            }
            let q = ls[j].exp();
            grad[r * c + j] = ((q * psum - pj) * inv_n) as f32;
        }
    }
    Ok((loss * inv_n, Tensor::new(vec![n, c], grad)?))
}

/// Confidence-gated pseudo-label cross-entropy.
///
/// Labels come from the row argmax of `gate_probs`; a row participates only
/// when its max probability reaches `tau`. The mean is taken over all rows,
/// so gated-out rows contribute exactly zero loss and zero gradient. Returns
/// `(loss, dlogits, confident_rows)`.
pub fn pseudo_label_loss(
    gate_probs: &Tensor,
    logits: &Tensor,
    tau: f32,
) -> Result<(f64, Tensor, usize)> {
    let (n, c) = rows_of(logits, "pseudo_label_loss")?;
    if gate_probs.shape() != logits.shape() {
        return Err(Error::shape(
            "pseudo_label_loss",
            format!("{:?}", logits.shape()),
            format!("{:?}", gate_probs.shape()),
        ));
    }
    validate_prob_rows(gate_probs, "pseudo_label gate")?;
    let mut loss = 0.0f64;
    let mut grad = vec![0.0f32; n * c];
    let mut confident = 0usize;
    let inv_n = 1.0 / n as f64;
    for r in 0..n {
        let p = &gate_probs.data()[r * c..(r + 1) * c];
        let y = argmax_row(p);
        if p[y] < tau {
            continue;
        }
        confident += 1;
        let row = &logits.data()[r * c..(r + 1) * c];
        let ls = log_softmax64(row);
        loss -= ls[y];
        for j in 0..c {
            let q = ls[j].exp();
            let onehot = if j == y { 1.0 } else { 0.0 };
            grad[r * c + j] = ((q - onehot) * inv_n) as f32;
        }
    }
    Ok((loss * inv_n, Tensor::new(vec![n, c], grad)?, confident))
}

/// Information-maximization loss over a batch of logits:
/// mean per-row entropy minus the entropy of the batch-mean distribution.
/// Minimizing it makes individual predictions confident while keeping the
/// batch marginal diverse.
pub fn info_max_loss(logits: &Tensor) -> Result<(f64, Tensor)> {
    let (n, c) = rows_of(logits, "info_max_loss")?;
    let inv_n = 1.0 / n as f64;
    let mut q = vec![0.0f64; n * c];
    let mut marginal = vec![0.0f64; c];
    let mut mean_entropy = 0.0f64;
    let mut row_entropy = vec![0.0f64; n];
    for r in 0..n {
        let sm = softmax64(&logits.data()[r * c..(r + 1) * c]);
        let mut h = 0.0f64;
        for j in 0..c {
            let p = sm[j];
            q[r * c + j] = p;
            marginal[j] += p * inv_n;
            if p > 0.0 {
                h -= p * p.ln();
            }
        }
        row_entropy[r] = h;
        mean_entropy += h * inv_n;
    }
    let mut marginal_entropy = 0.0f64;
    let log_marginal: Vec<f64> = marginal
        .iter()
        .map(|&m| if m > 0.0 { m.ln() } else { 0.0 })
        .collect();
    for j in 0..c {
        if marginal[j] > 0.0 {
            marginal_entropy -= marginal[j] * log_marginal[j];
        }
    }
    let loss = mean_entropy - marginal_entropy;

    let mut grad = vec![0.0f32; n * c];
    for r in 0..n {
        // d(mean entropy)/dz_rj = -(1/N) q_rj (ln q_rj + H_r)
        // d(marginal entropy)/dz_rj = -(1/N) q_rj (ln m_j - sum_k q_rk ln m_k)
        let mut dot = 0.0f64;
        for k in 0..c {
            dot += q[r * c + k] * log_marginal[k];
        }
        for j in 0..c {
            let p = q[r * c + j];
            let lnp = if p > 0.0 { p.ln() } else { 0.0 };
            let d_mean = -inv_n * p * (lnp + row_entropy[r]);
            let d_marg = -inv_n * p * (log_marginal[j] - dot);
            grad[r * c + j] = (d_mean - d_marg) as f32;
        }
    }
    Ok((loss, Tensor::new(vec![n, c], grad)?))
}

/// Cosine-annealed learning rate: starts at `base` for `step = 0` and decays
/// to zero at `step = total`.
pub fn cosine_lr(base: f64, step: u64, total: u64) -> f64 {
    if total == 0 || step >= total {
        return 0.0;
    }
    let t = step as f64 / total as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f32>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    /// Central finite differences of `f` with respect to `x`.
    fn fd_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Vec<f64> {
        let h = 1e-4f32;
        let mut g = vec![0.0f64; x.numel()];
        for (i, gi) in g.iter_mut().enumerate() {
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            *gi = (f(&plus) - f(&minus)) / (2.0 * h as f64);
        }
        g
    }

    fn assert_grad_close(analytic: &Tensor, numeric: &[f64], tol: f64) {
        for (i, (&a, &n)) in analytic.data().iter().zip(numeric).enumerate() {
            let denom = n.abs().max(1.0);
            assert!(
                ((a as f64 - n) / denom).abs() < tol,
                "grad[{i}]: analytic {a} vs numeric {n}"
            );
        }
    }

    #[test]
    fn softmax_uniform_and_known() {
        let s = softmax_rows(&t(vec![1, 2], vec![0.0, 0.0])).unwrap();
        assert!((s.data()[0] - 0.5).abs() < 1e-7);
        // logits (ln 2, 0) -> (2/3, 1/3)
        let s = softmax_rows(&t(vec![1, 2], vec![2.0f32.ln(), 0.0])).unwrap();
        assert!((s.data()[0] - 2.0 / 3.0).abs() < 1e-6);
        assert!((s.data()[1] - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_is_shift_invariant_and_stable() {
        let a = softmax_rows(&t(vec![1, 3], vec![1.0, 2.0, 3.0])).unwrap();
        let b = softmax_rows(&t(vec![1, 3], vec![101.0, 102.0, 103.0])).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-6);
        let big = softmax_rows(&t(vec![1, 2], vec![1000.0, 0.0])).unwrap();
        big.check_finite("softmax big").unwrap();
        assert!((big.data()[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_c() {
        let logits = Tensor::zeros(vec![3, 4]);
        let (loss, _) = cross_entropy_hard(&logits, &[0, 1, 3]).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-7);
    }

    #[test]
    fn cross_entropy_grad_matches_fd() {
        let logits = t(vec![2, 3], vec![0.3, -1.2, 0.8, 2.0, 0.1, -0.5]);
        let labels = [2u32, 0];
        let (_, g) = cross_entropy_hard(&logits, &labels).unwrap();
        let num = fd_grad(&logits, &|x| cross_entropy_hard(x, &labels).unwrap().0);
        assert_grad_close(&g, &num, 1e-3);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let logits = Tensor::zeros(vec![1, 3]);
        assert!(cross_entropy_hard(&logits, &[3]).is_err());
    }

    #[test]
    fn soft_ce_equals_hard_ce_on_onehot() {
        let logits = t(vec![2, 3], vec![0.3, -1.2, 0.8, 2.0, 0.1, -0.5]);
        let onehot = t(vec![2, 3], vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        let (hard, gh) = cross_entropy_hard(&logits, &[2, 0]).unwrap();
        let (soft, gs) = cross_entropy_soft(&onehot, &logits).unwrap();
        assert!((hard - soft).abs() < 1e-9);
        assert!(gh.max_abs_diff(&gs).unwrap() < 1e-7);
    }

    #[test]
    fn kl_zero_for_matching_distributions() {
        let logits = t(vec![1, 3], vec![0.5, -0.2, 1.1]);
        let p = softmax_rows(&logits).unwrap();
        let (loss, grad) = kl_from_reference(&p, &logits).unwrap();
        assert!(loss.abs() < 1e-6);
        // f32 reference probs round-trip: gradient is near zero, not exact.
        assert!(grad.data().iter().all(|&g| g.abs() < 1e-6));
    }

    #[test]
    fn kl_grad_matches_fd() {
        let p = t(vec![2, 3], vec![0.7, 0.2, 0.1, 0.1, 0.1, 0.8]);
        let logits = t(vec![2, 3], vec![0.3, -1.2, 0.8, 2.0, 0.1, -0.5]);
        let (_, g) = kl_from_reference(&p, &logits).unwrap();
        let num = fd_grad(&logits, &|x| kl_from_reference(&p, x).unwrap().0);
        assert_grad_close(&g, &num, 1e-3);
    }

    #[test]
    fn kl_is_nonnegative_and_validates_reference() {
        let p = t(vec![1, 3], vec![0.7, 0.2, 0.1]);
        let logits = t(vec![1, 3], vec![1.0, 0.0, -1.0]);
        let (loss, _) = kl_from_reference(&p, &logits).unwrap();
        assert!(loss >= 0.0);
        let bad = t(vec![1, 3], vec![0.7, 0.2, 0.4]);
        assert!(kl_from_reference(&bad, &logits).is_err());
    }

    #[test]
    fn pseudo_label_gate_zeroes_everything_above_max_conf() {
        let gate = t(vec![2, 3], vec![0.5, 0.3, 0.2, 0.4, 0.35, 0.25]);
        let logits = t(vec![2, 3], vec![0.3, -1.2, 0.8, 2.0, 0.1, -0.5]);
        let (loss, grad, n) = pseudo_label_loss(&gate, &logits, 0.9).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(n, 0);
        assert!(grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn pseudo_label_tau_zero_is_ce_on_argmax() {
        let gate = t(vec![2, 3], vec![0.5, 0.3, 0.2, 0.1, 0.2, 0.7]);
        let logits = t(vec![2, 3], vec![0.3, -1.2, 0.8, 2.0, 0.1, -0.5]);
        let (pl, gp, n) = pseudo_label_loss(&gate, &logits, 0.0).unwrap();
        let (ce, gc) = cross_entropy_hard(&logits, &[0, 2]).unwrap();
        assert_eq!(n, 2);
        assert!((pl - ce).abs() < 1e-9);
        assert!(gp.max_abs_diff(&gc).unwrap() < 1e-7);
    }

    #[test]
    fn pseudo_label_partial_gate_means_over_all_rows() {
        // Only row 0 passes the gate; loss is still divided by N = 2.
        let gate = t(vec![2, 2], vec![0.95, 0.05, 0.6, 0.4]);
        let logits = t(vec![2, 2], vec![1.0, -1.0, 0.5, 0.5]);
        let (loss, grad, n) = pseudo_label_loss(&gate, &logits, 0.9).unwrap();
        assert_eq!(n, 1);
        let expected = -log_softmax64(&[1.0f32, -1.0])[0] / 2.0;
        assert!((loss - expected).abs() < 1e-9);
        assert_eq!(&grad.data()[2..], &[0.0, 0.0]);
    }

    #[test]
    fn info_max_zero_when_rows_identical() {
        let logits = t(vec![3, 4], [0.5, -0.2, 1.1, 0.0].repeat(3));
        let (loss, _) = info_max_loss(&logits).unwrap();
        assert!(loss.abs() < 1e-9);
    }

    #[test]
    fn info_max_negative_for_confident_diverse_batch() {
        // Two sharply opposite rows: mean entropy ~ 0, marginal ~ uniform.
        let logits = t(vec![2, 2], vec![8.0, -8.0, -8.0, 8.0]);
        let (loss, _) = info_max_loss(&logits).unwrap();
        assert!((loss + 2.0f64.ln()).abs() < 1e-3);
    }

    #[test]
    fn info_max_grad_matches_fd() {
        let logits = t(
            vec![3, 3],
            vec![0.3, -1.2, 0.8, 2.0, 0.1, -0.5, 0.0, 0.4, -0.9],
        );
        let (_, g) = info_max_loss(&logits).unwrap();
        let num = fd_grad(&logits, &|x| info_max_loss(x).unwrap().0);
        assert_grad_close(&g, &num, 1e-3);
    }

    #[test]
    fn cosine_schedule_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0.1, 0, 100), 0.1);
        assert!((cosine_lr(0.1, 50, 100) - 0.05).abs() < 1e-12);
        assert_eq!(cosine_lr(0.1, 100, 100), 0.0);
        assert_eq!(cosine_lr(0.1, 150, 100), 0.0);
        assert_eq!(cosine_lr(0.1, 0, 0), 0.0);
    }

    #[test]
    fn entropy_and_argmax_edge_cases() {
        assert_eq!(entropy_row(&[1.0, 0.0]), 0.0);
        assert!((entropy_row(&[0.5, 0.5]) - 2.0f64.ln()).abs() < 1e-9);
        assert_eq!(argmax_row(&[0.2, 0.5, 0.5]), 1); // first max wins
    }

    #[test]
    fn count_correct_counts() {
        let logits = t(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 2.0, -1.0]);
        assert_eq!(count_correct(&logits, &[0, 1, 1]).unwrap(), 2);
    }

    #[test]
    fn prob_validation_rejects_bad_rows() {
        let ok = t(vec![1, 2], vec![0.5, 0.5]);
        validate_prob_rows(&ok, "test").unwrap();
        let neg = t(vec![1, 2], vec![-0.1, 1.1]);
        assert!(validate_prob_rows(&neg, "test").is_err());
        let off = t(vec![1, 2], vec![0.5, 0.6]);
        assert!(validate_prob_rows(&off, "test").is_err());
    }
}
