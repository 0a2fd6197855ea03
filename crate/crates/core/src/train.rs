//! Autoregressive training: relative-L2 rollout losses built on the
//! tape, Adam with a halving learning-rate schedule, per-epoch seeded
//! shuffling keyed by (seed, epoch) so an interrupted run resumes
//! bit-exactly, and a binary checkpoint format carrying parameters and
//! optimizer moments.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Normalizer, Series};
use crate::model::{ModelConfig, OperatorModel};
use crate::rng::Rng;
use crate::tensor::{Dtype, GradientSet, NodeId, Scalar, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{0}")]
    Format(String),
}

pub type TrainResult<T> = std::result::Result<T, TrainError>;

fn default_batch() -> usize {
    8
}
fn default_lr0() -> f64 {
    1e-3
}
fn default_halve() -> usize {
    25
}
fn default_rollout() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr0")]
    pub lr0: f64,
    #[serde(default = "default_halve")]
    pub halve_every: usize,
    /// Number of autoregressive steps the loss covers.
    #[serde(default = "default_rollout")]
    pub rollout_steps: usize,
    /// Cut gradients between rollout steps (ablation switch).
    #[serde(default)]
    pub detach_rollout: bool,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> TrainResult<()> {
        if self.batch_size == 0 || self.halve_every == 0 || self.rollout_steps == 0 {
            return Err(TrainError::Format(
                "batch_size, halve_every, rollout_steps must be positive".into(),
            ));
        }
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return Err(TrainError::Format("lr0 must be a positive finite number".into()));
        }
        Ok(())
    }
}

/// Stepped halving schedule.
pub fn lr_at(tc: &TrainConfig, epoch: usize) -> f64 {
    tc.lr0 * 0.5f64.powi((epoch / tc.halve_every) as i32)
}

/// Relative L2 distance node: |pred - target|_2 / |target|_2. The
/// target enters as a constant; a zero-norm target is an error.
pub fn rl2_loss_tape(tape: &mut Tape, pred: NodeId, target: &Tensor) -> TrainResult<NodeId> {
    let tnorm = target.real_data().iter().map(|v| v * v).sum::<f64>().sqrt();
    if tnorm == 0.0 {
        return Err(TrainError::Numeric("relative L2 against a zero-norm target".into()));
    }
    let t = tape.constant(target.clone());
    let d = tape.sub(pred, t)?;
    let sq = tape.mul(d, d)?;
    let s = tape.reduce_sum(sq)?;
    let n = tape.sqrt(s)?;
    Ok(tape.scalar_mul(n, Scalar::Real(1.0 / tnorm))?)
}

/// Sum of per-step relative L2 errors over an n-step rollout, built on
/// one tape so gradients flow through the whole autoregressive chain
/// (unless detached).
pub fn rollout_loss_tape(
    tape: &mut Tape,
    model: &OperatorModel,
    params: &[NodeId],
    history: NodeId,
    targets: &Tensor,
    detach: bool,
) -> TrainResult<NodeId> {
    let n = targets.shape()[0];
    let (h, w) = (targets.shape()[1], targets.shape()[2]);
    let preds = model.rollout_tape(tape, params, history, n, detach)?;
    let mut total: Option<NodeId> = None;
    for (i, &pred) in preds.iter().enumerate() {
        let frame = Tensor::real(
            &[1, h, w],
            targets.real_data()[i * h * w..(i + 1) * h * w].to_vec(),
        )?;
        let li = rl2_loss_tape(tape, pred, &frame)?;
        total = Some(match total {
            None => li,
            Some(acc) => tape.add(acc, li)?,
        });
    }
    Ok(total.expect("rollout has at least one step"))
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Component-wise Adam with bias correction; complex parameters are
/// treated as pairs of real components.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(params: &[Tensor]) -> Adam {
        Adam {
            m: params.iter().map(|p| vec![0.0; p.component_count()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.component_count()]).collect(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, model: &mut OperatorModel, grads: &GradientSet, lr: f64) -> TrainResult<()> {
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        let mut updated = Vec::with_capacity(model.params().len());
        for (slot, p) in model.params().iter().enumerate() {
            let mut p = p.clone();
            if let Some(g) = grads.get(slot) {
                let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
                for c in 0..p.component_count() {
                    let gc = g.component(c);
                    m[c] = BETA1 * m[c] + (1.0 - BETA1) * gc;
                    v[c] = BETA2 * v[c] + (1.0 - BETA2) * gc * gc;
                    let mhat = m[c] / bc1;
                    let vhat = v[c] / bc2;
                    p.set_component(c, p.component(c) - lr * mhat / (vhat.sqrt() + ADAM_EPS));
                }
            }
            updated.push(p);
        }
        model.set_params(updated)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// `epoch,train_loss,val_loss` CSV.
pub fn write_loss_csv(path: &Path, logs: &[EpochLog]) -> TrainResult<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "epoch,train_loss,val_loss")?;
    for l in logs {
        writeln!(out, "{},{},{}", l.epoch, l.train_loss, l.val_loss)?;
    }
    out.flush()?;
    Ok(())
}

/// Mean rollout loss over a set of windows without building gradients.
pub fn evaluate_loss(
    model: &OperatorModel,
    series: &Series,
    windows: &[usize],
    rollout_steps: usize,
) -> TrainResult<f64> {
    if windows.is_empty() {
        return Err(TrainError::Format("no windows to evaluate".into()));
    }
    let k = model.config.history_k;
    // Parallel over windows, summed in window order so the result does
    // not depend on the thread count.
    let losses: Vec<TrainResult<f64>> = windows
        .par_iter()
        .map(|&start| {
            let mut tape = Tape::new();
            let params = model.bind(&mut tape);
            let hist = tape.constant(series.stack(start, k)?);
            let targets = series.stack(start + k, rollout_steps)?;
            let loss = rollout_loss_tape(&mut tape, model, &params, hist, &targets, true)?;
            Ok(tape.value(loss).real_data()[0])
        })
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / windows.len() as f64)
}

/// Runs epochs [start_epoch, tc.epochs). The series must already be
/// normalized. On a non-finite loss or gradient the run aborts with a
/// diagnostic checkpoint at `diag_path` (when given) and a numeric
/// error naming the epoch and window batch.
#[allow(clippy::too_many_arguments)]
pub fn run_training(
    model: &mut OperatorModel,
    adam: &mut Adam,
    series: &Series,
    train_windows: &[usize],
    val_windows: &[usize],
    tc: &TrainConfig,
    start_epoch: usize,
    normalizer: Option<Normalizer>,
    diag_path: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> TrainResult<Vec<EpochLog>> {
    tc.validate()?;
    if train_windows.is_empty() {
        return Err(TrainError::Format("no training windows".into()));
    }
    let k = model.config.history_k;
    let n = tc.rollout_steps;
    let mut logs = Vec::new();

    for epoch in start_epoch..tc.epochs {
        let lr = lr_at(tc, epoch);
        let mut order: Vec<usize> = train_windows.to_vec();
        let mut rng = Rng::stream(tc.seed, &format!("epoch-shuffle-{epoch}"));
        for i in (1..order.len()).rev() {
            let j = rng.below(i + 1);
            order.swap(i, j);
        }

        let mut epoch_loss = 0.0;
        for (batch_idx, batch) in order.chunks(tc.batch_size).enumerate() {
            // Per-sample tapes in parallel; the gradient fold below runs
            // in window order so results are thread-count independent.
            let results: Vec<TrainResult<(f64, GradientSet)>> = batch
                .par_iter()
                .map(|&start| {
                    let mut tape = Tape::new();
                    let params = model.bind(&mut tape);
                    let hist = tape.constant(series.stack(start, k)?);
                    let targets = series.stack(start + k, n)?;
                    let loss = rollout_loss_tape(
                        &mut tape, model, &params, hist, &targets, tc.detach_rollout,
                    )?;
                    let loss_val = tape.value(loss).real_data()[0];
                    if !loss_val.is_finite() {
                        return Err(TrainError::Numeric(format!("loss is {loss_val}")));
                    }
                    let grads = tape.backward(loss, None)?;
                    Ok((loss_val, grads))
                })
                .collect();

            let mut accum = GradientSet::new(model.params().len());
            let mut abort: Option<String> = None;
            for (result, &start) in results.into_iter().zip(batch) {
                match result {
                    Ok((loss_val, grads)) => {
                        epoch_loss += loss_val;
                        accum.accumulate(&grads);
                    }
                    // Overflow inside the forward pass surfaces as a
                    // non-finite tensor; treat it like a blown-up loss.
                    Err(TrainError::Tensor(TensorError::NonFinite { context })) => {
                        abort = Some(format!("{context} at epoch {epoch}, window {start}"));
                        break;
                    }
                    Err(TrainError::Numeric(why)) => {
                        abort = Some(format!("{why} at epoch {epoch}, window {start}"));
                        break;
                    }
                    Err(other) => return Err(other),
                }
            }
            if abort.is_none() {
                accum.scale(1.0 / batch.len() as f64);
                if !accum.all_finite() {
                    abort = Some(format!("non-finite gradient at epoch {epoch}, batch {batch_idx}"));
                }
            }
            if let Some(why) = abort {
                if let Some(p) = diag_path {
                    save_checkpoint(p, model, adam, tc, normalizer, epoch)?;
                }
                return Err(TrainError::Numeric(why));
            }
            adam.step(model, &accum, lr)?;
        }

        let train_loss = epoch_loss / order.len() as f64;
        let val_loss = if val_windows.is_empty() {
            f64::NAN
        } else {
            evaluate_loss(model, series, val_windows, n)?
        };
        let log = EpochLog { epoch, train_loss, val_loss };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AOC1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    model: ModelConfig,
    grid_h: usize,
    grid_w: usize,
    train: TrainConfig,
    normalizer: Option<Normalizer>,
    epoch: usize,
    adam_step: u64,
    n_params: usize,
}

/// Binary checkpoint: magic, version, length-prefixed JSON header, then
/// per parameter slot its name, dtype, shape, raw f64 components and the
/// two Adam moment vectors. Everything little-endian; the round trip is
/// bit-exact.
pub fn save_checkpoint(
    path: &Path,
    model: &OperatorModel,
    adam: &Adam,
    tc: &TrainConfig,
    normalizer: Option<Normalizer>,
    epoch: usize,
) -> TrainResult<()> {
    let header = CheckpointHeader {
        model: model.config.clone(),
        grid_h: model.grid_h,
        grid_w: model.grid_w,
        train: tc.clone(),
        normalizer,
        epoch,
        adam_step: adam.step,
        n_params: model.params().len(),
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| TrainError::Format(format!("header encode: {e}")))?;

    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(header_json.len() as u64).to_le_bytes())?;
    out.write_all(&header_json)?;

    for (slot, p) in model.params().iter().enumerate() {
        let name = &model.param_names()[slot];
        out.write_all(&(name.len() as u64).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&[match p.dtype() {
            Dtype::Real => 0u8,
            Dtype::Complex => 1u8,
        }])?;
        out.write_all(&(p.shape().len() as u64).to_le_bytes())?;
        for &d in p.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for c in 0..p.component_count() {
            out.write_all(&p.component(c).to_le_bytes())?;
        }
        for &m in &adam.m[slot] {
            out.write_all(&m.to_le_bytes())?;
        }
        for &v in &adam.v[slot] {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub struct LoadedCheckpoint {
    pub model: OperatorModel,
    pub adam: Adam,
    pub train: TrainConfig,
    pub normalizer: Option<Normalizer>,
    pub epoch: usize,
}

// A checkpoint that fails to parse is bad data on disk, not a bad setting,
// so these surface as DataError and callers can classify them accordingly.
fn corrupt(msg: impl Into<String>) -> TrainError {
    TrainError::Data(DataError::Format(msg.into()))
}

pub fn load_checkpoint(path: &Path) -> TrainResult<LoadedCheckpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| corrupt("truncated checkpoint: magic"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(corrupt(format!("bad checkpoint magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(format!("unsupported checkpoint version {version}")));
    }
    let hlen = read_u64(&mut r)? as usize;
    let mut hbuf = vec![0u8; hlen];
    r.read_exact(&mut hbuf).map_err(|_| corrupt("truncated checkpoint: header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&hbuf).map_err(|e| corrupt(format!("header decode: {e}")))?;

    // Rebuild the skeleton, then overwrite every slot from the blocks.
    let mut model = OperatorModel::new(header.model.clone(), header.grid_h, header.grid_w, 0)?;
    if model.params().len() != header.n_params {
        return Err(corrupt(format!(
            "checkpoint declares {} parameter blocks, model has {}",
            header.n_params,
            model.params().len()
        )));
    }
    let mut adam = Adam::new(model.params());
    adam.step = header.adam_step;

    for slot in 0..header.n_params {
        let nlen = read_u64(&mut r)? as usize;
        let mut nbuf = vec![0u8; nlen];
        r.read_exact(&mut nbuf).map_err(|_| corrupt("truncated checkpoint: block name"))?;
        let name =
            String::from_utf8(nbuf).map_err(|_| corrupt("parameter name is not utf-8"))?;
        if name != model.param_names()[slot] {
            return Err(corrupt(format!(
                "parameter block {slot} is named {name}, expected {}",
                model.param_names()[slot]
            )));
        }
        let mut dtype_byte = [0u8; 1];
        r.read_exact(&mut dtype_byte).map_err(|_| corrupt("truncated checkpoint: dtype"))?;
        let dtype = match dtype_byte[0] {
            0 => Dtype::Real,
            1 => Dtype::Complex,
            o => return Err(corrupt(format!("bad dtype byte {o}"))),
        };
        let rank = read_u64(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let ncomp = numel * if dtype == Dtype::Complex { 2 } else { 1 };
        let mut comps = Vec::with_capacity(ncomp);
        for _ in 0..ncomp {
            comps.push(read_f64(&mut r)?);
        }
        let tensor = match dtype {
            Dtype::Real => Tensor::real(&shape, comps.clone())?,
            Dtype::Complex => Tensor::complex(
                &shape,
                comps.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect(),
            )?,
        };
        model.set_param(slot, tensor)?;
        for c in 0..ncomp {
            adam.m[slot][c] = read_f64(&mut r)?;
        }
        for c in 0..ncomp {
            adam.v[slot][c] = read_f64(&mut r)?;
        }
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(corrupt("trailing bytes after checkpoint blocks"));
    }
    Ok(LoadedCheckpoint {
        model,
        adam,
        train: header.train,
        normalizer: header.normalizer,
        epoch: header.epoch,
    })
}

fn read_u32(r: &mut impl Read) -> TrainResult<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| corrupt("truncated checkpoint"))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> TrainResult<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| corrupt("truncated checkpoint"))?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> TrainResult<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| corrupt("truncated checkpoint"))?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Flavor;
    use crate::synth;

    fn tiny_model(flavor: Flavor, h: usize, w: usize, seed: u64) -> OperatorModel {
        let config = ModelConfig {
            flavor,
            history_k: 3,
            modes: 2,
            width: 2,
            n_layers: 1,
            projection_hidden: 3,
            append_coords: false,
            activation: crate::model::Activation::SplitGelu,
        };
        OperatorModel::new(config, h, w, seed).unwrap()
    }

    fn toy_series(h: usize, w: usize, t: usize) -> Series {
        let mut cfg = synth::urban_toy();
        cfg.h = h;
        cfg.w = w;
        let n = h * w;
        cfg.vel_row = vec![0.4; n];
        cfg.vel_col = vec![-0.3; n];
        cfg.init = vec![0.0; n];
        cfg.sources = vec![
            synth::SourceSpec { i: h / 3, j: w / 3, base: 1.0, amp: 0.6, phase: 0.0 },
            synth::SourceSpec { i: 2 * h / 3, j: 2 * w / 3, base: 0.6, amp: 0.5, phase: 9.0 },
        ];
        cfg.georef = None;
        let series = synth::generate(&cfg, t).unwrap();
        let nrm = Normalizer::fit(series.values.iter().copied()).unwrap();
        nrm.apply_series(&series).unwrap()
    }

    fn default_tc(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 4,
            lr0: 5e-3,
            halve_every: 25,
            rollout_steps: 2,
            detach_rollout: false,
            seed: 5,
        }
    }

    #[test]
    fn rl2_matches_hand_computation_and_rejects_zero_targets() {
        let pred = Tensor::real(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let target = Tensor::real(&[1, 2, 2], vec![1.5, 2.0, 2.0, 6.0]).unwrap();
        let mut tape = Tape::new();
        let p = tape.constant(pred.clone());
        let l = rl2_loss_tape(&mut tape, p, &target).unwrap();
        let got = tape.value(l).real_data()[0];
        let num = (0.25f64 + 0.0 + 1.0 + 4.0).sqrt();
        let den = (2.25f64 + 4.0 + 4.0 + 36.0).sqrt();
        assert!((got - num / den).abs() < 1e-14);

        let zero = Tensor::zeros(Dtype::Real, &[1, 2, 2]);
        let mut tape2 = Tape::new();
        let p2 = tape2.constant(pred);
        assert!(matches!(rl2_loss_tape(&mut tape2, p2, &zero), Err(TrainError::Numeric(_))));
    }

    #[test]
    fn rl2_gradient_matches_finite_differences() {
        let mut rng = Rng::from_seed(21);
        let base: Vec<f64> = (0..12).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let target = Tensor::real(&[1, 3, 4], (0..12).map(|_| rng.uniform(0.5, 2.0)).collect()).unwrap();

        let loss_of = |data: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let p = tape.param(0, Tensor::real(&[1, 3, 4], data.to_vec()).unwrap());
            let l = rl2_loss_tape(&mut tape, p, &target).unwrap();
            tape.value(l).real_data()[0]
        };
        let mut tape = Tape::new();
        let p = tape.param(0, Tensor::real(&[1, 3, 4], base.clone()).unwrap());
        let l = rl2_loss_tape(&mut tape, p, &target).unwrap();
        let grads = tape.backward(l, None).unwrap();
        let g = grads.get(0).unwrap();
        for c in 0..12 {
            let mut plus = base.clone();
            plus[c] += 1e-6;
            let mut minus = base.clone();
            minus[c] -= 1e-6;
            let numeric = (loss_of(&plus) - loss_of(&minus)) / 2e-6;
            assert!(
                (g.component(c) - numeric).abs() / numeric.abs().max(1.0) < 1e-6,
                "component {c}: {} vs {numeric}",
                g.component(c)
            );
        }
    }

    #[test]
    fn rollout_loss_agrees_with_eager_per_step_errors() {
        let series = toy_series(8, 8, 20);
        let model = tiny_model(Flavor::Fno, 8, 8, 3);
        let hist = series.stack(0, 3).unwrap();
        let targets = series.stack(3, 4).unwrap();

        let mut tape = Tape::new();
        let params = model.bind(&mut tape);
        let h = tape.constant(hist.clone());
        let loss = rollout_loss_tape(&mut tape, &model, &params, h, &targets, false).unwrap();
        let got = tape.value(loss).real_data()[0];

        let preds = model.rollout(&hist, 4).unwrap();
        let mut want = 0.0;
        for i in 0..4 {
            let num: f64 = (0..64)
                .map(|k| (preds.real_data()[i * 64 + k] - targets.real_data()[i * 64 + k]).powi(2))
                .sum::<f64>()
                .sqrt();
            let den: f64 = (0..64).map(|k| targets.real_data()[i * 64 + k].powi(2)).sum::<f64>().sqrt();
            want += num / den;
        }
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn detaching_the_rollout_changes_gradients_not_the_loss() {
        let series = toy_series(8, 8, 20);
        let model = tiny_model(Flavor::Fno, 8, 8, 7);
        let hist = series.stack(1, 3).unwrap();
        let targets = series.stack(4, 3).unwrap();

        let run = |detach: bool| -> (f64, GradientSet) {
            let mut tape = Tape::new();
            let params = model.bind(&mut tape);
            let h = tape.constant(hist.clone());
            let loss = rollout_loss_tape(&mut tape, &model, &params, h, &targets, detach).unwrap();
            let v = tape.value(loss).real_data()[0];
            (v, tape.backward(loss, None).unwrap())
        };
        let (full_loss, full_grads) = run(false);
        let (detached_loss, detached_grads) = run(true);
        assert!((full_loss - detached_loss).abs() < 1e-12, "values must agree");

        let mut differs = false;
        for slot in 0..model.params().len() {
            let (a, b) = (full_grads.get(slot).unwrap(), detached_grads.get(slot).unwrap());
            for c in 0..a.component_count() {
                if (a.component(c) - b.component(c)).abs() > 1e-12 {
                    differs = true;
                }
            }
        }
        assert!(differs, "gradient chain through the rollout appears dead");
    }

    #[test]
    fn learning_rate_schedule_halves_stepwise() {
        let tc = TrainConfig { halve_every: 10, lr0: 1e-3, ..default_tc(1) };
        assert_eq!(lr_at(&tc, 0), 1e-3);
        assert_eq!(lr_at(&tc, 9), 1e-3);
        assert_eq!(lr_at(&tc, 10), 5e-4);
        assert_eq!(lr_at(&tc, 25), 2.5e-4);
    }

    #[test]
    fn adam_single_step_matches_reference_formula() {
        let mut model = tiny_model(Flavor::Fno, 8, 8, 1);
        let before: Vec<Tensor> = model.params().to_vec();
        // A linear scalar loss 0.5*(sum of all components) has constant
        // gradient 0.5 in every component of every slot.
        let mut tape = Tape::new();
        let ids = model.bind(&mut tape);
        let mut total: Option<NodeId> = None;
        for (&id, p) in ids.iter().zip(model.params()) {
            let flat = tape.reshape(id, &[p.numel()]).unwrap();
            let s = tape.reduce_sum(flat).unwrap();
            let s = match p.dtype() {
                Dtype::Real => tape.scalar_mul(s, Scalar::Real(0.5)).unwrap(),
                // Real part of (0.5+0.5i)*conj-sum picks 0.5 for both parts.
                Dtype::Complex => {
                    let re = tape.real_part(s).unwrap();
                    let im = tape.imag_part(s).unwrap();
                    let sum = tape.add(re, im).unwrap();
                    tape.scalar_mul(sum, Scalar::Real(0.5)).unwrap()
                }
            };
            total = Some(match total {
                None => s,
                Some(t) => tape.add(t, s).unwrap(),
            });
        }
        let grads = tape.backward(total.unwrap(), None).unwrap();

        let mut adam = Adam::new(model.params());
        adam.step(&mut model, &grads, 1e-2).unwrap();
        // First step with constant gradient g: mhat = g, vhat = g^2,
        // update = lr * g / (|g| + eps) = lr * sign(g) (up to eps).
        for (slot, p) in model.params().iter().enumerate() {
            for c in 0..p.component_count() {
                let g = grads.get(slot).unwrap().component(c);
                let want = before[slot].component(c) - 1e-2 * g / (g.abs() + ADAM_EPS);
                assert!(
                    (p.component(c) - want).abs() < 1e-12,
                    "slot {slot} comp {c}: {} vs {want}",
                    p.component(c)
                );
            }
        }
    }

    #[test]
    fn training_reduces_loss_on_a_small_problem() {
        let series = toy_series(8, 8, 30);
        let windows: Vec<usize> = (0..12).collect();
        let (train_w, val_w) = (&windows[..9], &windows[9..]);
        let mut model = tiny_model(Flavor::Fno, 8, 8, 9);
        let mut adam = Adam::new(model.params());
        let tc = default_tc(25);

        let before = evaluate_loss(&model, &series, train_w, tc.rollout_steps).unwrap();
        let logs = run_training(
            &mut model, &mut adam, &series, train_w, val_w, &tc, 0, None, None, |_| {},
        )
        .unwrap();
        assert_eq!(logs.len(), 25);
        let after = evaluate_loss(&model, &series, train_w, tc.rollout_steps).unwrap();
        assert!(
            after < 0.5 * before,
            "training did not reduce loss: {before} -> {after}"
        );
        assert!(logs.iter().all(|l| l.val_loss.is_finite()));
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostic_checkpoint() {
        let series = toy_series(8, 8, 20);
        let mut model = tiny_model(Flavor::Fno, 8, 8, 2);
        // Poison one parameter so the forward pass overflows.
        let slot = model.slot_of("proj2.w").unwrap();
        let shape = model.params()[slot].shape().to_vec();
        let mut poisoned = Tensor::zeros(Dtype::Real, &shape);
        for c in 0..poisoned.component_count() {
            poisoned.set_component(c, 1e308);
        }
        model.set_param(slot, poisoned).unwrap();
        let mut adam = Adam::new(model.params());
        let tc = default_tc(2);
        let dir = tempfile::tempdir().unwrap();
        let diag = dir.path().join("diag.aoc");
        let err = run_training(
            &mut model,
            &mut adam,
            &series,
            &[0, 1, 2],
            &[],
            &tc,
            0,
            None,
            Some(&diag),
            |_| {},
        );
        assert!(matches!(err, Err(TrainError::Numeric(_))), "expected numeric abort");
        assert!(diag.exists(), "diagnostic checkpoint missing");
        let loaded = load_checkpoint(&diag).unwrap();
        assert_eq!(loaded.epoch, 0);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let series = toy_series(8, 8, 22);
        let mut model = tiny_model(Flavor::Cono, 8, 8, 4);
        let mut adam = Adam::new(model.params());
        let tc = default_tc(3);
        run_training(&mut model, &mut adam, &series, &[0, 1, 2, 3], &[4], &tc, 0, None, None, |_| {})
            .unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.aoc");
        let nrm = Normalizer { vmin: -1.25, vmax: 3.5 };
        save_checkpoint(&path, &model, &adam, &tc, Some(nrm), 3).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.epoch, 3);
        assert_eq!(loaded.train, tc);
        assert_eq!(loaded.normalizer, Some(nrm));
        assert_eq!(loaded.model.config, model.config);
        assert_eq!(loaded.adam, adam);
        for (a, b) in loaded.model.params().iter().zip(model.params()) {
            assert_eq!(a, b, "parameters must round-trip bit-exactly");
        }

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, bytes).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn resume_from_checkpoint_is_bit_exact() {
        let series = toy_series(8, 8, 25);
        let windows: Vec<usize> = (0..8).collect();
        let tc = default_tc(6);

        let mut straight = tiny_model(Flavor::Fno, 8, 8, 6);
        let mut adam1 = Adam::new(straight.params());
        let logs_straight = run_training(
            &mut straight, &mut adam1, &series, &windows, &[], &tc, 0, None, None, |_| {},
        )
        .unwrap();

        let mut half = tiny_model(Flavor::Fno, 8, 8, 6);
        let mut adam2 = Adam::new(half.params());
        let mut tc_half = tc.clone();
        tc_half.epochs = 3;
        let mut logs_resumed = run_training(
            &mut half, &mut adam2, &series, &windows, &[], &tc_half, 0, None, None, |_| {},
        )
        .unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("half.aoc");
        save_checkpoint(&path, &half, &adam2, &tc, None, 3).unwrap();
        let mut loaded = load_checkpoint(&path).unwrap();
        let tail = run_training(
            &mut loaded.model,
            &mut loaded.adam,
            &series,
            &windows,
            &[],
            &tc,
            loaded.epoch,
            None,
            None,
            |_| {},
        )
        .unwrap();
        logs_resumed.extend(tail);

        assert_eq!(logs_straight.len(), logs_resumed.len());
        for (a, b) in logs_straight.iter().zip(&logs_resumed) {
            assert_eq!(a.epoch, b.epoch);
            assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits(), "epoch {}", a.epoch);
        }
        for (a, b) in straight.params().iter().zip(loaded.model.params()) {
            assert_eq!(a, b, "resumed parameters differ");
        }
    }

    #[test]
    fn loss_csv_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        write_loss_csv(
            &path,
            &[
                EpochLog { epoch: 0, train_loss: 0.5, val_loss: 0.625 },
                EpochLog { epoch: 1, train_loss: 0.25, val_loss: 0.5 },
            ],
        )
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "epoch,train_loss,val_loss\n0,0.5,0.625\n1,0.25,0.5\n");
    }
}
