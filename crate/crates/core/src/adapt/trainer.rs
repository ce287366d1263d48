//! The training loop: warmup on source, teacher-student adaptation on
//! source + target, EMA teacher maintenance, and evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::budget::{bitops_of, macs_of};
use crate::data::DomainDataset;
use crate::error::{Error, Result};
use crate::numerics::functional::{self, cosine_lr};
use crate::numerics::optim::Optimizer;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::Tensor;
use crate::supernet::net::{BnMode, Domain, ForwardCtx, ParamBinder};
use crate::supernet::resize::resize_input;
use crate::supernet::{SubnetConfig, Supernet};

use super::sampling::{sample_step_configs, SampledConfig, SamplingMode};
use super::{LossWeights, Phase, StepMetrics};

/// Default EMA momentum for the teacher.
pub const EMA_MOMENTUM_DEFAULT: f64 = 0.96;
/// Default number of random sandwich slots per step.
pub const K_RANDOM_DEFAULT: usize = 2;

/// All mutable training state. One instance owns both networks; everything
/// needed to resume bit-exactly lives here (and is checkpointable).
pub struct TrainerState {
    pub student: Supernet,
    pub teacher: Supernet,
    /// EMA momentum λ: teacher ← λ·teacher + (1−λ)·student.
    pub ema_momentum: f64,
    pub weights: LossWeights,
    pub optimizer: Optimizer,
    pub mode: SamplingMode,
    /// Random sandwich slots per step (K).
    pub k_random: usize,
    pub base_lr: f64,
    /// Steps completed within the current phase; drives the cosine schedule.
    pub phase_step: u64,
    /// Cosine horizon of the current phase.
    pub phase_total: u64,
    pub phase: Phase,
    /// Steps completed across all phases.
    pub global_step: u64,
    pub warmup_done: bool,
    /// Subnet-sampling randomness; epoch shuffles use seeds derived from
    /// `seed` instead, so they can be recomputed on resume.
    pub rng: ChaCha8Rng,
    pub seed: u64,
}

impl TrainerState {
    #[allow(clippy::too_many_arguments)] // one argument per run-config knob
    pub fn new(
        student: Supernet,
        weights: LossWeights,
        mode: SamplingMode,
        k_random: usize,
        ema_momentum: f64,
        base_lr: f64,
        optimizer: Optimizer,
        seed: u64,
    ) -> Result<Self> {
        weights.validate()?;
        if !(0.0..=1.0).contains(&ema_momentum) {
            return Err(Error::invalid(format!(
                "EMA momentum must lie in [0,1], got {ema_momentum}"
            )));
        }
        if !base_lr.is_finite() || base_lr <= 0.0 {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {base_lr}"
            )));
        }
        if let SamplingMode::SingleBit(bits) = mode {
            student.space.bits_index(bits)?;
        }
        let teacher = student.clone();
        Ok(TrainerState {
            student,
            teacher,
            ema_momentum,
            weights,
            optimizer,
            mode,
            k_random,
            base_lr,
            phase_step: 0,
            phase_total: 0,
            phase: Phase::Warmup,
            global_step: 0,
            warmup_done: false,
            rng: ChaCha8Rng::seed_from_u64(mix64(seed)),
            seed,
        })
    }

    /// Learning rate the next step will use.
    pub fn current_lr(&self) -> f64 {
        cosine_lr(self.base_lr, self.phase_step, self.phase_total)
    }

    /// One warmup step: supervised classification over the sampled sandwich,
    /// source data only. No teacher update.
    pub fn warmup_step(&mut self, src_images: &Tensor, src_labels: &[u32]) -> Result<StepMetrics> {
        let gated = LossWeights {
            lambda_rd: 0.0,
            lambda_pl: 0.0,
            lambda_im: 0.0,
            ..self.weights
        };
        self.step_impl(src_images, src_labels, None, &gated, false, Phase::Warmup)
    }

    /// One adaptation step over a labeled source batch and an unlabeled
    /// target batch.
    pub fn train_step(
        &mut self,
        src_images: &Tensor,
        src_labels: &[u32],
        tgt_images: &Tensor,
    ) -> Result<StepMetrics> {
        if !self.warmup_done {
            return Err(Error::invalid(
                "adaptation requires a completed warmup (teacher not initialized)",
            ));
        }
        let weights = self.weights;
        self.step_impl(
            src_images,
            src_labels,
            Some(tgt_images),
            &weights,
            true,
            Phase::Adapt,
        )
    }

    fn step_impl(
        &mut self,
        src_images: &Tensor,
        src_labels: &[u32],
        tgt_images: Option<&Tensor>,
        w: &LossWeights,
        update_teacher: bool,
        phase: Phase,
    ) -> Result<StepMetrics> {
        let sampled =
            sample_step_configs(&self.student.space, self.mode, self.k_random, &mut self.rng)?;
        let lr = self.current_lr();

        let mut tape = Tape::new();
        let mut binder = ParamBinder::new(&self.student.params);
        let mut bn_updates = Vec::new();

        // Supervised term: mean cross-entropy over every sampled subnet.
        let mut cls_terms: Vec<(Var, f32)> = Vec::with_capacity(sampled.len());
        let per_cfg = 1.0 / sampled.len() as f32;
        for sc in &sampled {
            let x = resize_input(src_images, sc.config.resolution)?;
            let logits = self.student.forward_taped(
                &mut tape,
                &mut binder,
                &x,
                &sc.config,
                ForwardCtx {
                    domain: Domain::Source,
                    mode: BnMode::Train,
                    quantize: true,
                },
                &mut bn_updates,
            )?;
            let ce = tape.cross_entropy_mean(logits, src_labels)?;
            cls_terms.push((ce, per_cfg));
        }
        let l_cls_var = tape.weighted_sum(&cls_terms)?;
        let l_cls = tape.value(l_cls_var).item()? as f64;

        let mut terms: Vec<(Var, f32)> = vec![(l_cls_var, w.lambda_cls as f32)];
        let mut l_rd = 0.0f64;
        let mut l_pl = 0.0f64;
        let mut l_im = 0.0f64;
        let mut pl_confident = 0u64;

        if let Some(tgt) = tgt_images {
            let order = cost_order(&self.student, &sampled)?;
            let smallest = sampled[order[0]].config;
            let supernet = sampled[*order.last().expect("non-empty sample")].config;
            let intermediate = sampled[order[(order.len() - 1) / 2]].config;

            if w.lambda_rd > 0.0 {
                // Teacher guidance: supernet output teaches the intermediate
                // subnet, intermediate teaches the smallest. Teacher forwards
                // use batch statistics but never store them.
                let x_super = resize_input(tgt, supernet.resolution)?;
                let x_inter = resize_input(tgt, intermediate.resolution)?;
                let x_small = resize_input(tgt, smallest.resolution)?;
                let tea_super = functional::softmax_rows(&self.teacher.forward_eval(
                    &x_super,
                    &supernet,
                    Domain::Target,
                    BnMode::TrainNoUpdate,
                    true,
                )?)?;
                let tea_inter = functional::softmax_rows(&self.teacher.forward_eval(
                    &x_inter,
                    &intermediate,
                    Domain::Target,
                    BnMode::TrainNoUpdate,
                    true,
                )?)?;
                let stu_inter = self.student.forward_taped(
                    &mut tape,
                    &mut binder,
                    &x_inter,
                    &intermediate,
                    ForwardCtx {
                        domain: Domain::Target,
                        mode: BnMode::Train,
                        quantize: true,
                    },
                    &mut bn_updates,
                )?;
                let stu_small = self.student.forward_taped(
                    &mut tape,
                    &mut binder,
                    &x_small,
                    &smallest,
                    ForwardCtx {
                        domain: Domain::Target,
                        mode: BnMode::Train,
                        quantize: true,
                    },
                    &mut bn_updates,
                )?;
                let kl_a = tape.kl_from_reference(&tea_super, stu_inter)?;
                let kl_b = tape.kl_from_reference(&tea_inter, stu_small)?;
                l_rd = tape.value(kl_a).item()? as f64 + tape.value(kl_b).item()? as f64;
                terms.push((kl_a, w.lambda_rd as f32));
                terms.push((kl_b, w.lambda_rd as f32));
            }

            if w.lambda_pl > 0.0 || w.lambda_im > 0.0 {
                let x_super = resize_input(tgt, supernet.resolution)?;
                let stu_super = self.student.forward_taped(
                    &mut tape,
                    &mut binder,
                    &x_super,
                    &supernet,
                    ForwardCtx {
                        domain: Domain::Target,
                        mode: BnMode::Train,
                        quantize: true,
                    },
                    &mut bn_updates,
                )?;
                if w.lambda_pl > 0.0 {
                    let gate = functional::softmax_rows(tape.value(stu_super))?;
                    let (pl, confident) = tape.pseudo_label(&gate, stu_super, w.tau_pl as f32)?;
                    l_pl = tape.value(pl).item()? as f64;
                    pl_confident = confident as u64;
                    terms.push((pl, w.lambda_pl as f32));
                }
                if w.lambda_im > 0.0 {
                    let im = tape.info_max(stu_super)?;
                    l_im = tape.value(im).item()? as f64;
                    terms.push((im, w.lambda_im as f32));
                }
            }
        }

        let total = tape.weighted_sum(&terms)?;
        let mut grads = tape.backward(total)?;
        for (pidx, var) in binder.bound().collect::<Vec<_>>() {
            if let Some(g) = grads.take(var) {
                let param = self.student.params.by_index_mut(pidx)?;
                self.optimizer
                    .step(pidx, param.data_mut(), g.data(), lr as f32)?;
            }
        }
        self.student.clamp_quant_steps();
        self.student.apply_bn_updates(&bn_updates)?;
        if update_teacher {
            ema_update(&mut self.teacher, &self.student, self.ema_momentum)?;
        }

        self.phase_step += 1;
        self.global_step += 1;

        let l_total =
            w.lambda_cls * l_cls + w.lambda_rd * l_rd + w.lambda_pl * l_pl + w.lambda_im * l_im;
        Ok(StepMetrics {
            phase: phase.name().to_string(),
            step: self.global_step,
            epoch: 0,
            lr,
            l_cls,
            l_rd,
            l_pl,
            l_im,
            l_total,
            pl_confident,
            wall_ms: None,
        })
    }

    /// Warmup phase: `epochs` passes over the labeled source set. At the end
    /// the teacher becomes a bit-exact copy of the student and the target
    /// batch-norm banks are seeded from the source banks.
    pub fn run_warmup(
        &mut self,
        source: &DomainDataset,
        epochs: u64,
        batch: usize,
        sink: &mut dyn FnMut(&TrainerState, &StepMetrics) -> Result<()>,
    ) -> Result<()> {
        if source.is_empty() {
            return Err(Error::invalid("warmup needs a non-empty source dataset"));
        }
        if source.labels.is_none() {
            return Err(Error::invalid("warmup needs a labeled source dataset"));
        }
        if batch == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        self.enter_phase(Phase::Warmup);
        let spe = steps_per_epoch(source.len(), batch) as u64;
        self.phase_total = epochs * spe;

        while self.phase_step < self.phase_total {
            let epoch = self.phase_step / spe;
            let skip = (self.phase_step % spe) as usize;
            let order = epoch_order(source.len(), self.seed, Phase::Warmup, epoch, 0);
            for chunk in chunks(&order, batch).into_iter().skip(skip) {
                let images = source.gather(&chunk)?;
                let labels = source.gather_labels(&chunk)?;
                let mut m = self.warmup_step(&images, &labels)?;
                m.epoch = epoch;
                sink(self, &m)?;
                if self.phase_step >= self.phase_total {
                    break;
                }
            }
        }

        if !self.warmup_done {
            self.student.copy_source_banks_to_target()?;
            self.teacher = self.student.clone();
            self.warmup_done = true;
        }
        Ok(())
    }

    /// Adaptation phase: `epochs` passes pairing source and target batches.
    pub fn run_adapt(
        &mut self,
        source: &DomainDataset,
        target: &DomainDataset,
        epochs: u64,
        batch: usize,
        sink: &mut dyn FnMut(&TrainerState, &StepMetrics) -> Result<()>,
    ) -> Result<()> {
        if !self.warmup_done {
            return Err(Error::invalid(
                "adaptation requires a completed warmup (run warmup first)",
            ));
        }
        if source.is_empty() || target.is_empty() {
            return Err(Error::invalid("adaptation needs non-empty datasets"));
        }
        if source.labels.is_none() {
            return Err(Error::invalid("adaptation needs a labeled source dataset"));
        }
        if batch == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        self.enter_phase(Phase::Adapt);
        let spe =
            steps_per_epoch(source.len(), batch).min(steps_per_epoch(target.len(), batch)) as u64;
        self.phase_total = epochs * spe;

        while self.phase_step < self.phase_total {
            let epoch = self.phase_step / spe;
            let skip = (self.phase_step % spe) as usize;
            let src_order = epoch_order(source.len(), self.seed, Phase::Adapt, epoch, 0);
            let tgt_order = epoch_order(target.len(), self.seed, Phase::Adapt, epoch, 1);
            let src_chunks = chunks(&src_order, batch);
            let tgt_chunks = chunks(&tgt_order, batch);
            let pairs = src_chunks.len().min(tgt_chunks.len()).min(spe as usize);
            for i in skip..pairs {
                let images = source.gather(&src_chunks[i])?;
                let labels = source.gather_labels(&src_chunks[i])?;
                let tgt_images = target.gather(&tgt_chunks[i])?;
                let mut m = self.train_step(&images, &labels, &tgt_images)?;
                m.epoch = epoch;
                sink(self, &m)?;
                if self.phase_step >= self.phase_total {
                    break;
                }
            }
        }
        Ok(())
    }

    fn enter_phase(&mut self, phase: Phase) {
        if self.phase != phase {
            self.phase = phase;
            self.phase_step = 0;
        }
    }
}

/// Exponential moving average: `teacher ← λ·teacher + (1−λ)·student` for all
/// learnable parameters, then batch-norm running statistics copied from the
/// student. `λ = 1` leaves teacher parameters bit-for-bit unchanged.
pub fn ema_update(teacher: &mut Supernet, student: &Supernet, lambda: f64) -> Result<()> {
    if teacher.params.len() != student.params.len() {
        return Err(Error::shape(
            "ema_update",
            format!("{} parameters", teacher.params.len()),
            format!("{}", student.params.len()),
        ));
    }
    if lambda != 1.0 {
        for idx in 0..teacher.params.len() {
            let s = student.params.by_index(idx)?.1.data().to_vec();
            let (_, t) = teacher.params.by_index(idx)?;
            if t.numel() != s.len() {
                return Err(Error::shape(
                    "ema_update",
                    format!("parameter {idx} with {} values", t.numel()),
                    format!("{}", s.len()),
                ));
            }
            let t = teacher.params.by_index_mut(idx)?;
            for (tv, sv) in t.data_mut().iter_mut().zip(&s) {
                *tv = (lambda * (*tv as f64) + (1.0 - lambda) * (*sv as f64)) as f32;
            }
        }
    }
    teacher.copy_bn_running_from(student)
}

/// Top-1 accuracy of a network on a labeled view of a dataset, in eval mode
/// with quantizers active.
pub fn evaluate(
    net: &Supernet,
    dataset: &DomainDataset,
    labels: &[u32],
    config: &SubnetConfig,
    domain: Domain,
    batch: usize,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    if labels.len() != dataset.len() {
        return Err(Error::shape(
            "evaluate",
            format!("{} labels", dataset.len()),
            format!("{}", labels.len()),
        ));
    }
    if batch == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut correct = 0usize;
    let mut seen = 0usize;
    let all: Vec<usize> = (0..dataset.len()).collect();
    for chunk in all.chunks(batch) {
        let images = dataset.gather(chunk)?;
        let x = resize_input(&images, config.resolution)?;
        let logits = net.forward_eval(&x, config, domain, BnMode::Eval, true)?;
        let batch_labels: Vec<u32> = chunk.iter().map(|&i| labels[i]).collect();
        correct += functional::count_correct(&logits, &batch_labels)?;
        seen += chunk.len();
    }
    Ok(correct as f64 / seen as f64)
}

/// Sampled-config indices sorted by ascending bit-operation cost (ties by
/// bits, width, resolution, then sample position).
fn cost_order(net: &Supernet, sampled: &[SampledConfig]) -> Result<Vec<usize>> {
    let mut keyed: Vec<(u64, u32, u64, u32, usize)> = Vec::with_capacity(sampled.len());
    for (i, sc) in sampled.iter().enumerate() {
        let macs = macs_of(&net.arch, &sc.config)?;
        keyed.push((
            bitops_of(macs, sc.config.bits),
            sc.config.bits,
            sc.config.width.to_bits(),
            sc.config.resolution,
            i,
        ));
    }
    keyed.sort();
    Ok(keyed.into_iter().map(|k| k.4).collect())
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic shuffled index order for one epoch, recomputable on resume.
fn epoch_order(n: usize, seed: u64, phase: Phase, epoch: u64, role: u64) -> Vec<usize> {
    let salt = mix64(seed ^ mix64(((phase.as_u32() as u64) << 48) | (role << 40) | epoch));
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(salt);
    order.shuffle(&mut rng);
    order
}

/// Full batches per epoch; a dataset smaller than the batch size yields one
/// short batch.
pub fn steps_per_epoch(n: usize, batch: usize) -> usize {
    (n / batch).max(1)
}

fn chunks(order: &[usize], batch: usize) -> Vec<Vec<usize>> {
    let full = order.len() / batch;
    if full == 0 {
        return vec![order.to_vec()];
    }
    (0..full)
        .map(|i| order[i * batch..(i + 1) * batch].to_vec())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_pair, ShiftSpec};
    use crate::quant::UnsignedRange;
    use crate::supernet::arch::{ArchSpec, ConfigSpace};
    use crate::supernet::build_supernet;

    fn tiny_state(seed: u64) -> TrainerState {
        let net = build_supernet(
            &ArchSpec::desk3(4),
            &ConfigSpace::desk(),
            UnsignedRange::Full,
            seed,
        )
        .unwrap();
        TrainerState::new(
            net,
            LossWeights::desk_defaults(),
            SamplingMode::SandwichQ,
            K_RANDOM_DEFAULT,
            EMA_MOMENTUM_DEFAULT,
            0.01,
            Optimizer::sgd(0.9),
            seed,
        )
        .unwrap()
    }

    fn tiny_data(n: usize, seed: u64) -> (DomainDataset, DomainDataset, Vec<u32>) {
        generate_pair(4, n, n, &ShiftSpec::default_shift(), seed).unwrap()
    }

    fn null_sink() -> impl FnMut(&TrainerState, &StepMetrics) -> Result<()> {
        |_: &TrainerState, _: &StepMetrics| Ok(())
    }

    #[test]
    fn ema_direct_substitution() {
        let mut state = tiny_state(1);
        // Force a known scalar on both sides and check one update.
        let id = state.student.blocks[0].quant.weight_steps[0];
        state.teacher.params.get_mut(id).data_mut()[0] = 1.0;
        state.student.params.get_mut(id).data_mut()[0] = 0.0;
        ema_update(&mut state.teacher, &state.student, 0.96).unwrap();
        let got = state.teacher.params.get(id).item().unwrap();
        assert!((got - 0.96).abs() < 1e-7, "got {got}");
    }

    #[test]
    fn ema_identity_at_lambda_one() {
        let mut state = tiny_state(2);
        // Make teacher differ from student first.
        for idx in 0..state.teacher.params.len() {
            for v in state.teacher.params.by_index_mut(idx).unwrap().data_mut() {
                *v += 0.125;
            }
        }
        let before: Vec<Vec<f32>> = (0..state.teacher.params.len())
            .map(|i| state.teacher.params.by_index(i).unwrap().1.data().to_vec())
            .collect();
        ema_update(&mut state.teacher, &state.student, 1.0).unwrap();
        for (i, prev) in before.iter().enumerate() {
            assert_eq!(
                state.teacher.params.by_index(i).unwrap().1.data(),
                &prev[..],
                "parameter {i} must be bit-identical"
            );
        }
    }

    #[test]
    fn ema_decay_is_geometric() {
        let mut a = tiny_state(3);
        let b = tiny_state(4); // different init = frozen student
        a.teacher = a.student.clone();
        let student = b.student;

        let diff_norm = |tea: &Supernet, stu: &Supernet| -> f64 {
            let mut sum = 0.0f64;
            for i in 0..tea.params.len() {
                let t = tea.params.by_index(i).unwrap().1.data();
                let s = stu.params.by_index(i).unwrap().1.data();
                for (tv, sv) in t.iter().zip(s) {
                    sum += ((tv - sv) as f64).powi(2);
                }
            }
            sum.sqrt()
        };

        let d0 = diff_norm(&a.teacher, &student);
        assert!(d0 > 0.0);
        for t in 1..=10u32 {
            ema_update(&mut a.teacher, &student, 0.96).unwrap();
            let dt = diff_norm(&a.teacher, &student);
            let expect = d0 * 0.96f64.powi(t as i32);
            let rel = (dt - expect).abs() / expect;
            assert!(
                rel < 1e-6,
                "step {t}: decay {dt} vs {expect} (rel {rel:.2e})"
            );
        }
    }

    #[test]
    fn ema_copies_bn_running_statistics() {
        let mut state = tiny_state(5);
        let (src, _, _) = tiny_data(16, 7);
        state.run_warmup(&src, 1, 8, &mut null_sink()).unwrap();
        // Drift the student's running stats, then check EMA syncs them.
        state.student.blocks[0].banks[0].running_mean[0] += 5.0;
        ema_update(&mut state.teacher, &state.student, 0.96).unwrap();
        assert_eq!(
            state.teacher.blocks[0].banks[0].running_mean[0],
            state.student.blocks[0].banks[0].running_mean[0]
        );
    }

    #[test]
    fn warmup_copies_teacher_and_seeds_target_banks() {
        let mut state = tiny_state(6);
        let (src, _, _) = tiny_data(16, 8);
        state.run_warmup(&src, 1, 8, &mut null_sink()).unwrap();
        assert!(state.warmup_done);
        for i in 0..state.student.params.len() {
            assert_eq!(
                state.student.params.by_index(i).unwrap().1.data(),
                state.teacher.params.by_index(i).unwrap().1.data(),
                "teacher must be a bit-exact copy after warmup"
            );
        }
        let widths = state.student.width_count();
        for block in &state.student.blocks {
            let s = &block.banks[block.bank_index(widths, Domain::Source, 0)];
            let t = &block.banks[block.bank_index(widths, Domain::Target, 0)];
            assert_eq!(s.running_mean, t.running_mean);
            assert!(t.initialized);
        }
    }

    #[test]
    fn warmup_with_zero_epochs_still_copies() {
        let mut state = tiny_state(7);
        let (src, tgt, _) = tiny_data(16, 9);
        state.run_warmup(&src, 0, 8, &mut null_sink()).unwrap();
        assert!(state.warmup_done);
        // The pipeline still runs: one adaptation step works. Target banks
        // came from the source copy, which is uninitialized at 0 epochs, but
        // train-mode forwards use batch statistics, so this must succeed.
        let src_b = src.gather(&[0, 1, 2, 3]).unwrap();
        let lab_b = src.gather_labels(&[0, 1, 2, 3]).unwrap();
        let tgt_b = tgt.gather(&[0, 1, 2, 3]).unwrap();
        state.phase = Phase::Adapt;
        state.phase_total = 10;
        state.phase_step = 0;
        state.train_step(&src_b, &lab_b, &tgt_b).unwrap();
    }

    #[test]
    fn warmup_rejects_unlabeled_data_and_zero_batches() {
        let mut state = tiny_state(8);
        let (src, tgt, _) = tiny_data(8, 10);
        assert!(state.run_warmup(&tgt, 1, 4, &mut null_sink()).is_err());
        assert!(state.run_warmup(&src, 1, 0, &mut null_sink()).is_err());
    }

    #[test]
    fn source_loss_decreases_over_warmup() {
        let mut state = tiny_state(9);
        let (src, _, _) = tiny_data(64, 11);
        let mut first_epoch = Vec::new();
        let mut last_epoch = Vec::new();
        let epochs = 4u64;
        let mut sink = |_: &TrainerState, m: &StepMetrics| {
            if m.epoch == 0 {
                first_epoch.push(m.l_cls);
            } else if m.epoch == epochs - 1 {
                last_epoch.push(m.l_cls);
            }
            Ok(())
        };
        state.run_warmup(&src, epochs, 16, &mut sink).unwrap();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(
            mean(&last_epoch) <= mean(&first_epoch),
            "warmup loss must not increase: {} -> {}",
            mean(&first_epoch),
            mean(&last_epoch)
        );
    }

    #[test]
    fn adapt_requires_warmup() {
        let mut state = tiny_state(10);
        let (src, tgt, _) = tiny_data(8, 12);
        assert!(state.run_adapt(&src, &tgt, 1, 4, &mut null_sink()).is_err());
        let src_b = src.gather(&[0, 1]).unwrap();
        let lab_b = src.gather_labels(&[0, 1]).unwrap();
        let tgt_b = tgt.gather(&[0, 1]).unwrap();
        assert!(state.train_step(&src_b, &lab_b, &tgt_b).is_err());
    }

    #[test]
    fn loss_total_decomposes_into_terms() {
        let mut state = tiny_state(11);
        let (src, tgt, _) = tiny_data(16, 13);
        state.run_warmup(&src, 1, 8, &mut null_sink()).unwrap();
        state.phase = Phase::Adapt;
        state.phase_step = 0;
        state.phase_total = 4;
        let src_b = src.gather(&(0..8).collect::<Vec<_>>()).unwrap();
        let lab_b = src.gather_labels(&(0..8).collect::<Vec<_>>()).unwrap();
        let tgt_b = tgt.gather(&(0..8).collect::<Vec<_>>()).unwrap();
        let m = state.train_step(&src_b, &lab_b, &tgt_b).unwrap();
        let w = state.weights;
        let recombined = w.lambda_cls * m.l_cls
            + w.lambda_rd * m.l_rd
            + w.lambda_pl * m.l_pl
            + w.lambda_im * m.l_im;
        assert!(
            (m.l_total - recombined).abs() <= 1e-6,
            "total {} vs recombined {}",
            m.l_total,
            recombined
        );
    }

    #[test]
    fn gated_out_target_has_no_gradient_effect() {
        // With every target term disabled, two different target batches must
        // produce bit-identical parameter updates.
        let make = || {
            let mut s = tiny_state(12);
            s.weights.lambda_rd = 0.0;
            s.weights.lambda_pl = 0.0;
            s.weights.lambda_im = 0.0;
            s
        };
        let (src, tgt, _) = tiny_data(16, 14);
        let src_b = src.gather(&(0..8).collect::<Vec<_>>()).unwrap();
        let lab_b = src.gather_labels(&(0..8).collect::<Vec<_>>()).unwrap();
        let tgt_a = tgt.gather(&(0..8).collect::<Vec<_>>()).unwrap();
        let tgt_b = tgt.gather(&(8..16).collect::<Vec<_>>()).unwrap();

        let mut s1 = make();
        s1.run_warmup(&src, 1, 8, &mut null_sink()).unwrap();
        s1.phase = Phase::Adapt;
        s1.phase_step = 0;
        s1.phase_total = 4;
        let mut s2 = make();
        s2.run_warmup(&src, 1, 8, &mut null_sink()).unwrap();
        s2.phase = Phase::Adapt;
        s2.phase_step = 0;
        s2.phase_total = 4;

        s1.train_step(&src_b, &lab_b, &tgt_a).unwrap();
        s2.train_step(&src_b, &lab_b, &tgt_b).unwrap();
        for i in 0..s1.student.params.len() {
            assert_eq!(
                s1.student.params.by_index(i).unwrap().1.data(),
                s2.student.params.by_index(i).unwrap().1.data(),
                "parameter {i} must not depend on the target batch"
            );
        }
    }

    #[test]
    fn teacher_follows_the_ema_formula_through_train_step() {
        let mut state = tiny_state(13);
        let (src, tgt, _) = tiny_data(16, 15);
        state.run_warmup(&src, 1, 8, &mut null_sink()).unwrap();
        state.phase = Phase::Adapt;
        state.phase_step = 0;
        state.phase_total = 4;

        let tea_before: Vec<Vec<f32>> = (0..state.teacher.params.len())
            .map(|i| state.teacher.params.by_index(i).unwrap().1.data().to_vec())
            .collect();
        let src_b = src.gather(&(0..8).collect::<Vec<_>>()).unwrap();
        let lab_b = src.gather_labels(&(0..8).collect::<Vec<_>>()).unwrap();
        let tgt_b = tgt.gather(&(0..8).collect::<Vec<_>>()).unwrap();
        state.train_step(&src_b, &lab_b, &tgt_b).unwrap();

        let lambda = state.ema_momentum;
        for (i, before) in tea_before.iter().enumerate() {
            let tea = state.teacher.params.by_index(i).unwrap().1.data();
            let stu = state.student.params.by_index(i).unwrap().1.data();
            for (j, (&t, &s)) in tea.iter().zip(stu).enumerate() {
                let expect = lambda * before[j] as f64 + (1.0 - lambda) * s as f64;
                assert!(
                    (t as f64 - expect).abs() <= 1e-7 * expect.abs().max(1.0),
                    "param {i}[{j}]: {t} vs {expect}"
                );
            }
        }
    }

    #[test]
    fn evaluation_is_deterministic_and_near_chance_untrained() {
        // One near-zero-lr warmup epoch collects BN statistics while leaving
        // the network effectively untrained.
        let (src, _, _) = tiny_data(200, 16);
        let mut state = tiny_state(14);
        state.base_lr = 1e-12;
        state.run_warmup(&src, 1, 50, &mut null_sink()).unwrap();
        let labels = src.labels.clone().unwrap();
        let cfg = state.student.space.largest();
        let a = evaluate(&state.student, &src, &labels, &cfg, Domain::Source, 64).unwrap();
        let b = evaluate(&state.student, &src, &labels, &cfg, Domain::Source, 64).unwrap();
        assert_eq!(a, b);
        assert!(
            (a - 0.25).abs() < 0.15,
            "untrained accuracy {a} should be near chance (0.25)"
        );
    }

    #[test]
    fn epoch_order_is_stable_and_complete() {
        let a = epoch_order(10, 5, Phase::Adapt, 3, 0);
        let b = epoch_order(10, 5, Phase::Adapt, 3, 0);
        assert_eq!(a, b);
        let c = epoch_order(10, 5, Phase::Adapt, 4, 0);
        assert_ne!(a, c);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn chunking_drops_ragged_tails_but_never_everything() {
        let order: Vec<usize> = (0..10).collect();
        let c = chunks(&order, 4);
        assert_eq!(c.len(), 2);
        assert_eq!(c[0].len(), 4);
        let short = chunks(&order[..3], 8);
        assert_eq!(short.len(), 1);
        assert_eq!(short[0].len(), 3);
    }
}
