//! Checkpoint container.
//!
//! One magic (`RTFQCK1\0`), two payload kinds: a full trainer snapshot
//! (student, teacher, optimizer, RNG position, counters — everything needed
//! to resume training bit-exactly) and a plain-network weight bundle for
//! exchange with non-switchable models. All primitives little-endian; floats
//! round-trip bit-exactly.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapt::{LossWeights, Phase, SamplingMode, TrainerState};
use crate::error::{Error, Result};
use crate::numerics::optim::{Adam, AdamSlot, Optimizer, Sgd};
use crate::numerics::Tensor;
use crate::quant::UnsignedRange;
use crate::supernet::arch::{ArchSpec, ConfigSpace, ConvBlockSpec};
use crate::supernet::import::{PlainBn, PlainConv, PlainWeights};
use crate::supernet::{build_supernet, Supernet};

use super::{read_file, write_file, ByteReader, ByteWriter};

const CHECKPOINT_MAGIC: &[u8; 8] = b"RTFQCK1\0";
const CHECKPOINT_VERSION: u32 = 1;

/// Payload discriminator following the version field.
pub const KIND_TRAINER: u32 = 1;
/// Plain-network payload.
pub const KIND_PLAIN: u32 = 2;

fn write_tensor(w: &mut ByteWriter, t: &Tensor) {
    w.write_u32(t.shape().len() as u32);
    for &d in t.shape() {
        w.write_u32(d as u32);
    }
    w.write_f32_slice(t.data());
}

fn read_tensor(r: &mut ByteReader) -> Result<Tensor> {
    let ndim = r.read_u32()? as usize;
    let mut shape = Vec::with_capacity(ndim);
    let mut numel = 1usize;
    for _ in 0..ndim {
        let d = r.read_u32()? as usize;
        numel = numel
            .checked_mul(d)
            .ok_or_else(|| Error::invalid("tensor shape overflows"))?;
        shape.push(d);
    }
    let data = r.read_f32_vec(numel)?;
    Tensor::new(shape, data)
}

fn write_f32_vec(w: &mut ByteWriter, v: &[f32]) {
    w.write_u64(v.len() as u64);
    w.write_f32_slice(v);
}

fn read_f32_len_vec(r: &mut ByteReader) -> Result<Vec<f32>> {
    let n = r.read_u64()? as usize;
    r.read_f32_vec(n)
}

fn write_arch(w: &mut ByteWriter, arch: &ArchSpec) {
    w.write_u32(arch.in_channels as u32);
    w.write_u32(arch.num_classes as u32);
    w.write_u32(arch.blocks.len() as u32);
    for b in &arch.blocks {
        w.write_u32(b.base_out as u32);
        w.write_u32(b.kernel as u32);
        w.write_u32(b.stride as u32);
        w.write_u32(b.pad as u32);
    }
}

fn read_arch(r: &mut ByteReader) -> Result<ArchSpec> {
    let in_channels = r.read_u32()? as usize;
    let num_classes = r.read_u32()? as usize;
    let n = r.read_u32()? as usize;
    let mut blocks = Vec::with_capacity(n);
    for _ in 0..n {
        blocks.push(ConvBlockSpec {
            base_out: r.read_u32()? as usize,
            kernel: r.read_u32()? as usize,
            stride: r.read_u32()? as usize,
            pad: r.read_u32()? as usize,
        });
    }
    let arch = ArchSpec {
        in_channels,
        blocks,
        num_classes,
    };
    arch.validate()?;
    Ok(arch)
}

fn write_space(w: &mut ByteWriter, space: &ConfigSpace, range: UnsignedRange) {
    w.write_u32(space.widths.len() as u32);
    for &v in &space.widths {
        w.write_f64(v);
    }
    w.write_u32(space.resolutions.len() as u32);
    for &v in &space.resolutions {
        w.write_u32(v);
    }
    w.write_u32(space.bits.len() as u32);
    for &v in &space.bits {
        w.write_u32(v);
    }
    w.write_u32(match range {
        UnsignedRange::Full => 0,
        UnsignedRange::Narrow => 1,
    });
}

fn read_space(r: &mut ByteReader) -> Result<(ConfigSpace, UnsignedRange)> {
    let nw = r.read_u32()? as usize;
    let mut widths = Vec::with_capacity(nw);
    for _ in 0..nw {
        widths.push(r.read_f64()?);
    }
    let nr = r.read_u32()? as usize;
    let mut resolutions = Vec::with_capacity(nr);
    for _ in 0..nr {
        resolutions.push(r.read_u32()?);
    }
    let nq = r.read_u32()? as usize;
    let mut bits = Vec::with_capacity(nq);
    for _ in 0..nq {
        bits.push(r.read_u32()?);
    }
    let space = ConfigSpace {
        widths,
        resolutions,
        bits,
    };
    space.validate()?;
    let range = match r.read_u32()? {
        0 => UnsignedRange::Full,
        1 => UnsignedRange::Narrow,
        other => {
            return Err(Error::invalid(format!(
                "unknown unsigned-range tag {other}"
            )))
        }
    };
    Ok((space, range))
}

fn write_params(w: &mut ByteWriter, net: &Supernet) {
    w.write_u64(net.params.len() as u64);
    for (_, name, value) in net.params.iter() {
        w.write_string(name);
        write_tensor(w, value);
    }
}

fn read_params_into(r: &mut ByteReader, net: &mut Supernet) -> Result<()> {
    let count = r.read_u64()? as usize;
    if count != net.params.len() {
        return Err(Error::invalid(format!(
            "checkpoint holds {count} parameters, the architecture needs {}",
            net.params.len()
        )));
    }
    for idx in 0..count {
        let name = r.read_string()?;
        let value = read_tensor(r)?;
        let (expect_name, expect) = net.params.by_index(idx)?;
        if name != expect_name {
            return Err(Error::invalid(format!(
                "checkpoint parameter {idx} is named {name:?}, expected {expect_name:?}"
            )));
        }
        if value.shape() != expect.shape() {
            return Err(Error::invalid(format!(
                "checkpoint parameter {name:?} has shape {:?}, expected {:?}",
                value.shape(),
                expect.shape()
            )));
        }
        net.params
            .by_index_mut(idx)?
            .data_mut()
            .copy_from_slice(value.data());
    }
    Ok(())
}

fn write_banks(w: &mut ByteWriter, net: &Supernet) {
    w.write_u64(net.blocks.len() as u64);
    for block in &net.blocks {
        w.write_u64(block.banks.len() as u64);
        for bank in &block.banks {
            write_f32_vec(w, &bank.running_mean);
            write_f32_vec(w, &bank.running_var);
            w.write_u32(bank.initialized as u32);
        }
    }
}

fn read_banks_into(r: &mut ByteReader, net: &mut Supernet) -> Result<()> {
    let nb = r.read_u64()? as usize;
    if nb != net.blocks.len() {
        return Err(Error::invalid(format!(
            "checkpoint holds {nb} blocks of BN banks, expected {}",
            net.blocks.len()
        )));
    }
    for block in &mut net.blocks {
        let n = r.read_u64()? as usize;
        if n != block.banks.len() {
            return Err(Error::invalid(format!(
                "checkpoint holds {n} BN banks for a block, expected {}",
                block.banks.len()
            )));
        }
        for bank in &mut block.banks {
            let mean = read_f32_len_vec(r)?;
            let var = read_f32_len_vec(r)?;
            if mean.len() != bank.running_mean.len() || var.len() != bank.running_var.len() {
                return Err(Error::invalid(format!(
                    "BN bank channel count mismatch: checkpoint {}, expected {}",
                    mean.len(),
                    bank.running_mean.len()
                )));
            }
            bank.running_mean = mean;
            bank.running_var = var;
            bank.initialized = match r.read_u32()? {
                0 => false,
                1 => true,
                other => {
                    return Err(Error::invalid(format!(
                        "BN initialized flag must be 0 or 1, got {other}"
                    )))
                }
            };
        }
    }
    Ok(())
}

fn write_optimizer(w: &mut ByteWriter, opt: &Optimizer) {
    match opt {
        Optimizer::Sgd(s) => {
            w.write_u32(0);
            w.write_f32(s.momentum);
            w.write_u64(s.buffers.len() as u64);
            for buf in &s.buffers {
                match buf {
                    None => w.write_u32(0),
                    Some(v) => {
                        w.write_u32(1);
                        write_f32_vec(w, v);
                    }
                }
            }
        }
        Optimizer::Adam(a) => {
            w.write_u32(1);
            w.write_f32(a.beta1);
            w.write_f32(a.beta2);
            w.write_f32(a.eps);
            w.write_u64(a.slots.len() as u64);
            for slot in &a.slots {
                match slot {
                    None => w.write_u32(0),
                    Some(s) => {
                        w.write_u32(1);
                        w.write_u64(s.t);
                        write_f32_vec(w, &s.m);
                        write_f32_vec(w, &s.v);
                    }
                }
            }
        }
    }
}

fn read_optimizer(r: &mut ByteReader) -> Result<Optimizer> {
    match r.read_u32()? {
        0 => {
            let momentum = r.read_f32()?;
            let n = r.read_u64()? as usize;
            let mut buffers = Vec::with_capacity(n);
            for _ in 0..n {
                buffers.push(match r.read_u32()? {
                    0 => None,
                    1 => Some(read_f32_len_vec(r)?),
                    other => {
                        return Err(Error::invalid(format!(
                            "optimizer slot flag must be 0 or 1, got {other}"
                        )))
                    }
                });
            }
            Ok(Optimizer::Sgd(Sgd { momentum, buffers }))
        }
        1 => {
            let beta1 = r.read_f32()?;
            let beta2 = r.read_f32()?;
            let eps = r.read_f32()?;
            let n = r.read_u64()? as usize;
            let mut slots = Vec::with_capacity(n);
            for _ in 0..n {
                slots.push(match r.read_u32()? {
                    0 => None,
                    1 => {
                        let t = r.read_u64()?;
                        let m = read_f32_len_vec(r)?;
                        let v = read_f32_len_vec(r)?;
                        Some(AdamSlot { m, v, t })
                    }
                    other => {
                        return Err(Error::invalid(format!(
                            "optimizer slot flag must be 0 or 1, got {other}"
                        )))
                    }
                });
            }
            Ok(Optimizer::Adam(Adam {
                beta1,
                beta2,
                eps,
                slots,
            }))
        }
        other => Err(Error::invalid(format!("unknown optimizer tag {other}"))),
    }
}

fn mode_tag(mode: SamplingMode) -> (u32, u32) {
    match mode {
        SamplingMode::SandwichQ => (0, 0),
        SamplingMode::PerBitSandwich => (1, 0),
        SamplingMode::SingleBit(q) => (2, q),
    }
}

fn mode_from_tag(tag: u32, bits: u32) -> Result<SamplingMode> {
    match tag {
        0 => Ok(SamplingMode::SandwichQ),
        1 => Ok(SamplingMode::PerBitSandwich),
        2 => Ok(SamplingMode::SingleBit(bits)),
        other => Err(Error::invalid(format!("unknown sampling-mode tag {other}"))),
    }
}

/// Serialize the complete trainer state.
pub fn save_trainer(path: &Path, state: &TrainerState) -> Result<()> {
    let mut w = ByteWriter::new();
    w.write_magic(CHECKPOINT_MAGIC);
    w.write_u32(CHECKPOINT_VERSION);
    w.write_u32(KIND_TRAINER);

    write_arch(&mut w, &state.student.arch);
    write_space(&mut w, &state.student.space, state.student.unsigned_range);

    let (tag, bits) = mode_tag(state.mode);
    w.write_u32(tag);
    w.write_u32(bits);
    w.write_u64(state.k_random as u64);
    w.write_f64(state.ema_momentum);
    w.write_f64(state.weights.lambda_cls);
    w.write_f64(state.weights.lambda_rd);
    w.write_f64(state.weights.lambda_pl);
    w.write_f64(state.weights.lambda_im);
    w.write_f64(state.weights.tau_pl);
    w.write_f64(state.base_lr);
    w.write_u32(state.phase.as_u32());
    w.write_u64(state.phase_step);
    w.write_u64(state.phase_total);
    w.write_u64(state.global_step);
    w.write_u32(state.warmup_done as u32);
    w.write_u64(state.seed);

    let rng_seed = state.rng.get_seed();
    for &b in &rng_seed {
        w.write_u32(b as u32);
    }
    let pos = state.rng.get_word_pos();
    w.write_u64(pos as u64);
    w.write_u64((pos >> 64) as u64);

    write_optimizer(&mut w, &state.optimizer);
    write_params(&mut w, &state.student);
    write_params(&mut w, &state.teacher);
    write_banks(&mut w, &state.student);
    write_banks(&mut w, &state.teacher);

    write_file(path, &w.into_bytes())
}

/// Restore a trainer snapshot saved by [`save_trainer`].
pub fn load_trainer(path: &Path) -> Result<TrainerState> {
    let bytes = read_file(path)?;
    let mut r = ByteReader::new(&bytes, path);
    r.expect_magic(CHECKPOINT_MAGIC)?;
    let version = r.read_u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::parse(
            path,
            r.offset() - 4,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let kind = r.read_u32()?;
    if kind != KIND_TRAINER {
        return Err(Error::parse(
            path,
            r.offset() - 4,
            format!("checkpoint kind {kind} is not a trainer snapshot (kind {KIND_TRAINER})"),
        ));
    }

    let arch = read_arch(&mut r)?;
    let (space, range) = read_space(&mut r)?;

    let mode_tag_v = r.read_u32()?;
    let mode_bits = r.read_u32()?;
    let mode = mode_from_tag(mode_tag_v, mode_bits)?;
    let k_random = r.read_u64()? as usize;
    let ema = r.read_f64()?;
    let weights = LossWeights {
        lambda_cls: r.read_f64()?,
        lambda_rd: r.read_f64()?,
        lambda_pl: r.read_f64()?,
        lambda_im: r.read_f64()?,
        tau_pl: r.read_f64()?,
    };
    let base_lr = r.read_f64()?;
    let phase = Phase::from_u32(r.read_u32()?)?;
    let phase_step = r.read_u64()?;
    let phase_total = r.read_u64()?;
    let global_step = r.read_u64()?;
    let warmup_done = match r.read_u32()? {
        0 => false,
        1 => true,
        other => {
            return Err(Error::invalid(format!(
                "warmup flag must be 0 or 1, got {other}"
            )))
        }
    };
    let seed = r.read_u64()?;

    let mut rng_seed = [0u8; 32];
    for b in rng_seed.iter_mut() {
        let v = r.read_u32()?;
        if v > u8::MAX as u32 {
            return Err(Error::invalid(format!("rng seed byte out of range: {v}")));
        }
        *b = v as u8;
    }
    let pos_lo = r.read_u64()? as u128;
    let pos_hi = r.read_u64()? as u128;
    let mut rng = ChaCha8Rng::from_seed(rng_seed);
    rng.set_word_pos(pos_lo | (pos_hi << 64));

    let optimizer = read_optimizer(&mut r)?;

    // Rebuild the structural skeleton, then overwrite every value from the
    // file; the name/shape checks guard against layout drift.
    let skeleton = build_supernet(&arch, &space, range, 0)?;
    let mut state = TrainerState::new(
        skeleton, weights, mode, k_random, ema, base_lr, optimizer, seed,
    )?;
    read_params_into(&mut r, &mut state.student)?;
    read_params_into(&mut r, &mut state.teacher)?;
    read_banks_into(&mut r, &mut state.student)?;
    read_banks_into(&mut r, &mut state.teacher)?;
    r.finish()?;

    state.phase = phase;
    state.phase_step = phase_step;
    state.phase_total = phase_total;
    state.global_step = global_step;
    state.warmup_done = warmup_done;
    state.rng = rng;
    Ok(state)
}

/// Serialize a plain-network weight bundle.
pub fn save_plain(path: &Path, plain: &PlainWeights) -> Result<()> {
    let mut w = ByteWriter::new();
    w.write_magic(CHECKPOINT_MAGIC);
    w.write_u32(CHECKPOINT_VERSION);
    w.write_u32(KIND_PLAIN);
    write_arch(&mut w, &plain.arch);
    w.write_u64(plain.convs.len() as u64);
    for conv in &plain.convs {
        write_tensor(&mut w, &conv.weight);
        write_f32_vec(&mut w, &conv.bn.gamma);
        write_f32_vec(&mut w, &conv.bn.beta);
        write_f32_vec(&mut w, &conv.bn.running_mean);
        write_f32_vec(&mut w, &conv.bn.running_var);
    }
    write_tensor(&mut w, &plain.head_weight);
    write_f32_vec(&mut w, &plain.head_bias);
    write_file(path, &w.into_bytes())
}

/// Restore a plain-network bundle saved by [`save_plain`].
pub fn load_plain(path: &Path) -> Result<PlainWeights> {
    let bytes = read_file(path)?;
    let mut r = ByteReader::new(&bytes, path);
    r.expect_magic(CHECKPOINT_MAGIC)?;
    let version = r.read_u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::parse(
            path,
            r.offset() - 4,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let kind = r.read_u32()?;
    if kind != KIND_PLAIN {
        return Err(Error::parse(
            path,
            r.offset() - 4,
            format!("checkpoint kind {kind} is not a plain network (kind {KIND_PLAIN})"),
        ));
    }
    let arch = read_arch(&mut r)?;
    let n = r.read_u64()? as usize;
    let mut convs = Vec::with_capacity(n);
    for _ in 0..n {
        let weight = read_tensor(&mut r)?;
        let bn = PlainBn {
            gamma: read_f32_len_vec(&mut r)?,
            beta: read_f32_len_vec(&mut r)?,
            running_mean: read_f32_len_vec(&mut r)?,
            running_var: read_f32_len_vec(&mut r)?,
        };
        convs.push(PlainConv { weight, bn });
    }
    let head_weight = read_tensor(&mut r)?;
    let head_bias = read_f32_len_vec(&mut r)?;
    r.finish()?;
    Ok(PlainWeights {
        arch,
        convs,
        head_weight,
        head_bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapt::StepMetrics;
    use crate::data::{generate_pair, ShiftSpec};
    use crate::supernet::export_plain;
    use crate::supernet::net::Domain;

    fn make_state(seed: u64) -> TrainerState {
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
            2,
            0.96,
            0.01,
            Optimizer::sgd(0.9),
            seed,
        )
        .unwrap()
    }

    fn null_sink() -> impl FnMut(&TrainerState, &StepMetrics) -> crate::Result<()> {
        |_: &TrainerState, _: &StepMetrics| Ok(())
    }

    fn assert_states_equal(a: &TrainerState, b: &TrainerState) {
        assert_eq!(a.phase, b.phase);
        assert_eq!(a.phase_step, b.phase_step);
        assert_eq!(a.phase_total, b.phase_total);
        assert_eq!(a.global_step, b.global_step);
        assert_eq!(a.warmup_done, b.warmup_done);
        assert_eq!(a.seed, b.seed);
        assert_eq!(a.rng.get_seed(), b.rng.get_seed());
        assert_eq!(a.rng.get_word_pos(), b.rng.get_word_pos());
        for i in 0..a.student.params.len() {
            assert_eq!(
                a.student.params.by_index(i).unwrap().1.data(),
                b.student.params.by_index(i).unwrap().1.data(),
                "student parameter {i}"
            );
            assert_eq!(
                a.teacher.params.by_index(i).unwrap().1.data(),
                b.teacher.params.by_index(i).unwrap().1.data(),
                "teacher parameter {i}"
            );
        }
        for (ba, bb) in a.student.blocks.iter().zip(&b.student.blocks) {
            for (ka, kb) in ba.banks.iter().zip(&bb.banks) {
                assert_eq!(ka.running_mean, kb.running_mean);
                assert_eq!(ka.running_var, kb.running_var);
                assert_eq!(ka.initialized, kb.initialized);
            }
        }
    }

    #[test]
    fn trainer_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let (src, tgt, _) = generate_pair(4, 24, 24, &ShiftSpec::default_shift(), 3).unwrap();
        let mut state = make_state(1);
        state.run_warmup(&src, 1, 8, &mut null_sink()).unwrap();
        state.run_adapt(&src, &tgt, 1, 8, &mut null_sink()).unwrap();

        let p = dir.path().join("trainer.ckpt");
        save_trainer(&p, &state).unwrap();
        let loaded = load_trainer(&p).unwrap();
        assert_states_equal(&state, &loaded);
    }

    #[test]
    fn resumed_training_matches_uninterrupted() {
        let dir = tempfile::tempdir().unwrap();
        let (src, tgt, _) = generate_pair(4, 32, 32, &ShiftSpec::default_shift(), 5).unwrap();

        // Uninterrupted: warmup + 2 adapt epochs.
        let mut full = make_state(9);
        full.run_warmup(&src, 1, 8, &mut null_sink()).unwrap();
        full.run_adapt(&src, &tgt, 2, 8, &mut null_sink()).unwrap();

        // Interrupted twin: abort the same two-epoch run from the metrics
        // sink halfway through (so the cosine horizon matches), checkpoint,
        // reload, and let the resumed state finish the remaining steps.
        let mut half = make_state(9);
        half.run_warmup(&src, 1, 8, &mut null_sink()).unwrap();
        let spe: u64 = 4; // 32 samples / batch 8
        let mut stop = |state: &TrainerState, _: &StepMetrics| -> crate::Result<()> {
            if state.phase_step >= spe {
                Err(Error::invalid("interrupt"))
            } else {
                Ok(())
            }
        };
        assert!(half.run_adapt(&src, &tgt, 2, 8, &mut stop).is_err());
        assert_eq!(half.phase_step, spe);

        let p = dir.path().join("mid.ckpt");
        save_trainer(&p, &half).unwrap();
        let mut resumed = load_trainer(&p).unwrap();
        resumed
            .run_adapt(&src, &tgt, 2, 8, &mut null_sink())
            .unwrap();

        assert_states_equal(&full, &resumed);
    }

    #[test]
    fn plain_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let (src, _, _) = generate_pair(4, 16, 16, &ShiftSpec::none(), 7).unwrap();
        let mut state = make_state(2);
        state.run_warmup(&src, 1, 8, &mut null_sink()).unwrap();
        let plain = export_plain(&state.student, Domain::Source).unwrap();

        let p = dir.path().join("plain.ckpt");
        save_plain(&p, &plain).unwrap();
        let loaded = load_plain(&p).unwrap();
        assert_eq!(loaded, plain);
    }

    #[test]
    fn kind_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (src, _, _) = generate_pair(4, 16, 16, &ShiftSpec::none(), 7).unwrap();
        let mut state = make_state(3);
        state.run_warmup(&src, 1, 8, &mut null_sink()).unwrap();

        let p = dir.path().join("trainer.ckpt");
        save_trainer(&p, &state).unwrap();
        let err = load_plain(&p).unwrap_err();
        assert!(format!("{err}").contains("kind"));

        let plain = export_plain(&state.student, Domain::Source).unwrap();
        let p2 = dir.path().join("plain.ckpt");
        save_plain(&p2, &plain).unwrap();
        assert!(load_trainer(&p2).is_err());
    }

    #[test]
    fn corrupted_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (src, _, _) = generate_pair(4, 16, 16, &ShiftSpec::none(), 7).unwrap();
        let mut state = make_state(4);
        state.run_warmup(&src, 1, 8, &mut null_sink()).unwrap();
        let p = dir.path().join("trainer.ckpt");
        save_trainer(&p, &state).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        let cut = bytes.len() / 3;
        bytes.truncate(cut);
        std::fs::write(&p, &bytes).unwrap();
        assert!(load_trainer(&p).is_err());

        std::fs::write(&p, b"RTFQDS1\0junk").unwrap();
        assert!(matches!(load_trainer(&p), Err(Error::Parse { .. })));
    }
}
