//! Rectified flow: straight-path targets, Euler sampling and training.

use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::TFeat;
use crate::params::{ParamId, ParamStore};
use crate::perception::{decode_action_chunk, ActionChunk};
use crate::policy::{pack_batch, prepare, unpack_batch, Model, Observation, PreparedObs, ACTION_SIG};
use crate::so3::{IrrepSeq, Signature};
use crate::tape::{Tape, Var};

/// Standard normal coefficients for every channel, degree and frame.
pub fn sample_source<R: Rng + ?Sized>(sig: Signature, len: usize, rng: &mut R) -> IrrepSeq {
    IrrepSeq::random(sig, len, rng)
}

/// One training tuple on the straight path from `x0` to `a`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowPathSample {
    pub x0: IrrepSeq,
    pub a: IrrepSeq,
    pub t: f64,
    pub x_t: IrrepSeq,
    pub v_star: IrrepSeq,
}

pub fn make_path_sample(x0: IrrepSeq, a: IrrepSeq, t: f64) -> Result<FlowPathSample> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Validation(format!("flow time {t} outside [0, 1]")));
    }
    let x_t = x0.scale(1.0 - t).axpy(t, &a)?;
    let v_star = a.sub(&x0)?;
    Ok(FlowPathSample { x0, a, t, x_t, v_star })
}

/// A time-dependent vector field on packed sequences.
pub trait VelocityField {
    fn velocity(&self, x: &IrrepSeq, t: f64) -> Result<IrrepSeq>;
}

impl<F> VelocityField for F
where
    F: Fn(&IrrepSeq, f64) -> Result<IrrepSeq>,
{
    fn velocity(&self, x: &IrrepSeq, t: f64) -> Result<IrrepSeq> {
        self(x, t)
    }
}

/// The field `v(x, t) = c`.
#[derive(Clone, Debug)]
pub struct ConstantVelocity(pub IrrepSeq);

impl VelocityField for ConstantVelocity {
    fn velocity(&self, _x: &IrrepSeq, _t: f64) -> Result<IrrepSeq> {
        Ok(self.0.clone())
    }
}

/// `x <- x + v(x, k/N) / N` for `k = 0..N`.
pub fn euler_integrate<F: VelocityField + ?Sized>(field: &F, x0: &IrrepSeq, steps: usize) -> Result<IrrepSeq> {
    if steps == 0 {
        return Err(Error::Validation("Euler integration needs at least one step".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut x = x0.clone();
    for k in 0..steps {
        let v = field.velocity(&x, k as f64 * dt)?;
        x = x.axpy(dt, &v)?;
    }
    Ok(x)
}

/// Mean squared error over every coefficient between `pred` and `target`.
pub fn mse_tape(tape: &mut Tape, pred: &TFeat, target: &IrrepSeq) -> Var {
    let total = target.num_coefficients() as f64;
    let mut terms = Vec::with_capacity(3);
    for l in 0..3 {
        let Some(p) = pred.blocks[l] else { continue };
        let tgt = tape.constant(target.block(l).clone());
        let diff = tape.sub(p, tgt);
        let ms = tape.mean_square(diff);
        let n = target.block(l).len() as f64;
        terms.push(tape.scale(ms, n / total));
    }
    tape.sum(&terms)
}

/// Value-level loss of an arbitrary field over a set of path samples.
pub fn rf_loss_field<F: VelocityField + ?Sized>(field: &F, samples: &[FlowPathSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Validation("empty batch".into()));
    }
    let mut acc = 0.0;
    let mut count = 0usize;
    for s in samples {
        let v = field.velocity(&s.x_t, s.t)?;
        acc += v.sub(&s.v_star)?.sq_norm();
        count += s.v_star.num_coefficients();
    }
    Ok(acc / count as f64)
}

/// Loss and gradient per parameter.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub loss: f64,
    pub grads: Vec<Option<Array2<f64>>>,
}

impl LossGrad {
    pub fn grad_norm(&self) -> f64 {
        self.grads.iter().flatten().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt()
    }
}

/// Rectified-flow loss of `model` on a batch, with gradients.
pub fn rf_loss(
    model: &Model,
    store: &ParamStore,
    obs: &[&PreparedObs],
    samples: &[FlowPathSample],
) -> Result<LossGrad> {
    if samples.is_empty() || samples.len() != obs.len() {
        return Err(Error::Validation(format!("{} observations for {} samples", obs.len(), samples.len())));
    }
    let xs: Vec<IrrepSeq> = samples.iter().map(|s| s.x_t.clone()).collect();
    let vs: Vec<IrrepSeq> = samples.iter().map(|s| s.v_star.clone()).collect();
    let ts: Vec<f64> = samples.iter().map(|s| s.t).collect();
    let (x, v) = (pack_batch(&xs)?, pack_batch(&vs)?);

    let mut tape = Tape::with_params(store);
    let cond = model.encode(&mut tape, obs)?;
    let xv = TFeat::from_seq(&mut tape, &x, false);
    let pred = model.velocity(&mut tape, &cond, &xv, &ts)?;
    let loss = mse_tape(&mut tape, &pred, &v);
    let value = tape.value(loss)[[0, 0]];
    if !value.is_finite() {
        return Err(Error::Training(format!("non-finite loss {value} in the forward pass")));
    }
    let g = tape.backward(loss);
    let mut grads = vec![None; store.len()];
    for (id, var) in tape.param_leaves() {
        grads[id.index()] = g.get(var).cloned();
    }
    Ok(LossGrad { loss: value, grads })
}

/// Draws one chunk per observation by Euler integration from the given sources.
pub fn sample_from_sources(
    model: &Model,
    store: &ParamStore,
    obs: &[&PreparedObs],
    sources: &[IrrepSeq],
    steps: usize,
) -> Result<Vec<IrrepSeq>> {
    let cond = model.condition(store, obs)?;
    let x0 = pack_batch(sources)?;
    let field = |x: &IrrepSeq, t: f64| model.velocity_value(store, &cond, x, t);
    let out = euler_integrate(&field, &x0, steps)?;
    Ok(unpack_batch(&out, model.horizon()))
}

/// Seconds spent computing the conditioning and integrating the flow for one batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerTiming {
    pub condition: f64,
    pub integrate: f64,
}

/// Times the two halves of [`sample_from_sources`] with the caller's clock,
/// averaged over `reps` repetitions. `now` returns seconds.
pub fn time_sampler(
    model: &Model,
    store: &ParamStore,
    obs: &[&PreparedObs],
    sources: &[IrrepSeq],
    steps: usize,
    reps: usize,
    now: &dyn Fn() -> f64,
) -> Result<SamplerTiming> {
    if reps == 0 {
        return Err(Error::Validation("timing needs at least one repetition".into()));
    }
    let x0 = pack_batch(sources)?;
    let (mut condition, mut integrate) = (0.0, 0.0);
    for _ in 0..reps {
        let t0 = now();
        let cond = model.condition(store, obs)?;
        let t1 = now();
        let field = |x: &IrrepSeq, t: f64| model.velocity_value(store, &cond, x, t);
        std::hint::black_box(euler_integrate(&field, &x0, steps)?);
        let t2 = now();
        condition += t1 - t0;
        integrate += t2 - t1;
    }
    Ok(SamplerTiming { condition: condition / reps as f64, integrate: integrate / reps as f64 })
}

/// Samples one action chunk per observation; `rngs[i]` drives the source of chunk `i`.
pub fn sample_actions(
    model: &Model,
    store: &ParamStore,
    obs: &[Observation],
    rngs: &mut [ChaCha8Rng],
    steps: usize,
) -> Result<Vec<ActionChunk>> {
    let prepared = obs.iter().map(prepare).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&PreparedObs> = prepared.iter().collect();
    let sources: Vec<IrrepSeq> = rngs.iter_mut().map(|r| sample_source(ACTION_SIG, model.horizon(), r)).collect();
    let seqs = sample_from_sources(model, store, &refs, &sources, steps)?;
    seqs.iter().zip(&prepared).map(|(s, p)| decode_action_chunk(s, &p.centroid)).collect()
}

/// Single-observation sampler.
pub fn euler_sample(
    model: &Model,
    store: &ParamStore,
    obs: &Observation,
    steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ActionChunk> {
    let mut rngs = [rng.clone()];
    let out = sample_actions(model, store, std::slice::from_ref(obs), &mut rngs, steps)?;
    *rng = rngs[0].clone();
    Ok(out.into_iter().next().expect("one chunk"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub ema_decay: f64,
    pub horizon: usize,
    pub sampler_steps: usize,
    pub seed: u64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub warmup_steps: usize,
    /// Size of the fixed probe set used for the per-epoch loss.
    pub probe_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 64,
            epochs: 100,
            ema_decay: 0.95,
            horizon: 16,
            sampler_steps: 10,
            seed: 0,
            weight_decay: 1e-6,
            grad_clip: 1.0,
            warmup_steps: 0,
            probe_size: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = !(self.lr >= 0.0 && self.lr.is_finite())
            || self.batch_size == 0
            || self.epochs == 0
            || !(0.0..1.0).contains(&self.ema_decay)
            || self.horizon == 0
            || self.sampler_steps == 0;
        if bad {
            return Err(Error::Config(format!("invalid training configuration {self:?}")));
        }
        Ok(())
    }
}

/// One training example: a prepared observation and the expert chunk
/// embedded relative to the observation centroid.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub obs: PreparedObs,
    pub target: IrrepSeq,
}

/// Per-epoch training record. Contains no timing, so logs from equal
/// seeds are identical.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    /// Mean minibatch loss over the epoch.
    pub loss: f64,
    /// Loss on the fixed probe set after the epoch.
    pub probe_loss: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamStore,
    pub ema: ParamStore,
    pub records: Vec<EpochRecord>,
    /// Wall-clock seconds per epoch.
    pub epoch_seconds: Vec<f64>,
}

/// AdamW with bias correction and decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Array2<f64>> = store.ids().map(|id| Array2::zeros(store.value(id).dim())).collect();
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Array2<f64>>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let id = ParamId::from_index(i);
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| *m = b1 * *m + (1.0 - b1) * g);
            ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let decay = 1.0 - lr * self.weight_decay;
            ndarray::Zip::from(store.value_mut(id)).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p = *p * decay - lr * (m / bc1) / ((v / bc2).sqrt() + eps);
            });
        }
    }
}

/// Cosine decay from `base` to zero after a linear warmup.
pub fn cosine_lr(base: f64, step: usize, total: usize, warmup: usize) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// `shadow <- d * shadow + (1 - d) * params`, written as `shadow + (1 - d) (params - shadow)`.
pub fn ema_update(shadow: &mut ParamStore, params: &ParamStore, decay: f64) {
    for id in params.ids() {
        ndarray::Zip::from(shadow.value_mut(id))
            .and(params.value(id))
            .for_each(|s, &p| *s += (1.0 - decay) * (p - *s));
    }
}

fn path_batch(data: &[TrainSample], idx: &[usize], rng: &mut ChaCha8Rng) -> Result<Vec<FlowPathSample>> {
    idx.iter()
        .map(|&i| {
            let a = data[i].target.clone();
            let x0 = sample_source(a.signature(), a.len(), rng);
            let t: f64 = rng.random_range(0.0..1.0);
            make_path_sample(x0, a, t)
        })
        .collect()
}

fn batch_loss(model: &Model, store: &ParamStore, data: &[TrainSample], idx: &[usize], samples: &[FlowPathSample]) -> Result<f64> {
    let obs: Vec<&PreparedObs> = idx.iter().map(|&i| &data[i].obs).collect();
    let xs: Vec<IrrepSeq> = samples.iter().map(|s| s.x_t.clone()).collect();
    let ts: Vec<f64> = samples.iter().map(|s| s.t).collect();
    let vs: Vec<IrrepSeq> = samples.iter().map(|s| s.v_star.clone()).collect();
    let mut tape = Tape::with_params(store);
    let cond = model.encode(&mut tape, &obs)?;
    let xv = TFeat::from_seq(&mut tape, &pack_batch(&xs)?, false);
    let pred = model.velocity(&mut tape, &cond, &xv, &ts)?;
    let loss = mse_tape(&mut tape, &pred, &pack_batch(&vs)?);
    Ok(tape.value(loss)[[0, 0]])
}

/// Loss on a fixed set of (sample, source, time) triples.
pub struct Probe {
    idx: Vec<usize>,
    samples: Vec<FlowPathSample>,
    batch: usize,
}

impl Probe {
    pub fn new(data: &[TrainSample], size: usize, batch: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15);
        let idx: Vec<usize> = (0..size.max(1)).map(|k| k % data.len()).collect();
        let samples = path_batch(data, &idx, &mut rng)?;
        Ok(Probe { idx, samples, batch: batch.max(1) })
    }

    pub fn loss(&self, model: &Model, store: &ParamStore, data: &[TrainSample]) -> Result<f64> {
        let mut acc = 0.0;
        for (ci, cs) in self.idx.chunks(self.batch).zip(self.samples.chunks(self.batch)) {
            acc += batch_loss(model, store, data, ci, cs)? * ci.len() as f64;
        }
        Ok(acc / self.idx.len() as f64)
    }
}

/// Minibatch training with AdamW, a cosine schedule and an EMA shadow.
///
/// `on_epoch` sees every record as it is produced.
pub fn train(
    model: &Model,
    init: ParamStore,
    data: &[TrainSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init;
    let mut ema = params.clone();
    let mut opt = AdamW::new(&params, cfg.weight_decay);
    let probe = Probe::new(data, cfg.probe_size.min(data.len().max(cfg.batch_size)), cfg.batch_size, cfg.seed)?;
    let batch = cfg.batch_size.min(data.len());
    let steps_per_epoch = data.len().div_ceil(batch);
    let total = steps_per_epoch * cfg.epochs;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut epoch_seconds = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let (mut loss_acc, mut gn_acc, mut lr) = (0.0, 0.0, 0.0);
        for k in 0..steps_per_epoch {
            let idx: Vec<usize> = (0..batch).map(|j| order[(k * batch + j) % order.len()]).collect();
            let samples = path_batch(data, &idx, &mut rng)?;
            let obs: Vec<&PreparedObs> = idx.iter().map(|&i| &data[i].obs).collect();
            let mut lg = rf_loss(model, &params, &obs, &samples)?;
            let gn = lg.grad_norm();
            if !lg.loss.is_finite() || lg.loss > 1e6 || !gn.is_finite() {
                return Err(Error::Training(format!(
                    "diverged at epoch {epoch}, step {step}: loss {}, gradient norm {gn}",
                    lg.loss
                )));
            }
            if cfg.grad_clip > 0.0 && gn > cfg.grad_clip {
                let s = cfg.grad_clip / gn;
                lg.grads.iter_mut().flatten().for_each(|g| g.mapv_inplace(|x| x * s));
            }
            lr = cosine_lr(cfg.lr, step, total, cfg.warmup_steps);
            opt.step(&mut params, &lg.grads, lr);
            ema_update(&mut ema, &params, cfg.ema_decay);
            loss_acc += lg.loss;
            gn_acc += gn;
            step += 1;
        }
        let record = EpochRecord {
            epoch,
            step,
            lr,
            loss: loss_acc / steps_per_epoch as f64,
            probe_loss: probe.loss(model, &params, data)?,
            grad_norm: gn_acc / steps_per_epoch as f64,
        };
        log::debug!("epoch {epoch}: loss {:.5} probe {:.5}", record.loss, record.probe_loss);
        on_epoch(&record);
        records.push(record);
        epoch_seconds.push(started.elapsed().as_secs_f64());
    }
    Ok(TrainOutcome { params, ema, records, epoch_seconds })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sig = Signature::new(1, 3, 0);
        let x0 = sample_source(sig, 4, &mut rng);
        let a = sample_source(sig, 4, &mut rng);
        assert_eq!(make_path_sample(x0.clone(), a.clone(), 0.0).unwrap().x_t, x0);
        assert_eq!(make_path_sample(x0.clone(), a.clone(), 1.0).unwrap().x_t, a);
        assert!(make_path_sample(x0, a, 1.5).is_err());
    }

    #[test]
    fn constant_field_is_integrated_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sig = Signature::new(1, 3, 0);
        let x0 = sample_source(sig, 4, &mut rng);
        let c = sample_source(sig, 4, &mut rng);
        for n in [1, 3, 10] {
            let x = euler_integrate(&ConstantVelocity(c.clone()), &x0, n).unwrap();
            assert!(x.max_abs_diff(&x0.add(&c).unwrap()) < 1e-14);
        }
    }

    #[test]
    fn ema_geometric_recursion() {
        let mut p = ParamStore::new();
        p.insert_filled("w", (1, 1), 2.0);
        let mut shadow = ParamStore::new();
        shadow.insert_filled("w", (1, 1), -1.0);
        let d: f64 = 0.95;
        for _ in 0..7 {
            ema_update(&mut shadow, &p, d);
        }
        let expect = 2.0 * (1.0 - d.powi(7)) + (-1.0) * d.powi(7);
        assert!((shadow.get("w").unwrap()[[0, 0]] - expect).abs() < 1e-14);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1.0, 0, 100, 0), 1.0);
        assert!(cosine_lr(1.0, 100, 100, 0).abs() < 1e-15);
        assert!((cosine_lr(1.0, 0, 100, 10) - 0.1).abs() < 1e-15);
    }
}
