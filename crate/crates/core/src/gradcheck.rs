//! Central finite-difference checks of the reverse-mode gradients.
//!
//! Each check builds a layer on a tape, contracts its outputs with fixed
//! random weights into a scalar, and compares the analytic gradient of every
//! input coefficient and every parameter against `(L(x+h) - L(x-h)) / 2h`.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::Fem;
use crate::nn::{efilm_tape, gate, EquiLinear, EquiUNet, Init, TFeat, TemporalConv, UNetConfig};
use crate::params::{ParamId, ParamStore};
use crate::so3::Signature;
use crate::tape::{Padding, Tape, Var};

pub const FD_STEP: f64 = 1e-5;

/// Every operation [`grad_check`] knows by name.
pub const OPS: &[&str] = &["equi_linear", "gate", "efilm", "efilm_affine", "temporal_conv", "fem_fuse", "time_ops", "equi_unet"];

/// Outcome of one check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub op: String,
    /// Largest per-tensor `max|analytic - numeric| / max(max|numeric|, 1e-6)`.
    pub max_rel_error: f64,
    /// Name of the tensor where the largest error occurred.
    pub worst: String,
    /// Number of coefficients compared.
    pub checked: usize,
}

fn randn(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || StandardNormal.sample(rng))
}

type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Vec<Var>> + 'a;

fn contract(tape: &mut Tape, outs: &[Var], weights: &[Array2<f64>]) -> Var {
    let terms: Vec<Var> = outs.iter().zip(weights).map(|(&o, w)| tape.weighted_sum(o, w.clone())).collect();
    tape.sum(&terms)
}

fn loss_value(store: &ParamStore, inputs: &[Array2<f64>], build: &Build, weights: &[Array2<f64>]) -> Result<f64> {
    let mut tape = Tape::with_params(store);
    let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
    let outs = build(&mut tape, &vars)?;
    let l = contract(&mut tape, &outs, weights);
    Ok(tape.value(l)[[0, 0]])
}

fn tensor_error(analytic: &Array2<f64>, numeric: &Array2<f64>) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-6);
    analytic.iter().zip(numeric).fold(0.0f64, |m, (a, n)| m.max((a - n).abs())) / scale
}

/// Checks `build` with respect to `inputs` and every parameter it reads from `store`.
pub fn grad_check(
    op: &str,
    store: &ParamStore,
    inputs: &[Array2<f64>],
    build: &Build,
    step: f64,
    seed: u64,
) -> Result<GradReport> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Validation(format!("finite-difference step must be positive, got {step}")));
    }
    let mut tape = Tape::with_params(store);
    let vars: Vec<Var> = inputs.iter().map(|x| tape.input(x.clone())).collect();
    let outs = build(&mut tape, &vars)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights: Vec<Array2<f64>> = outs.iter().map(|&o| randn(&mut rng, tape.shape(o))).collect();
    let l = contract(&mut tape, &outs, &weights);
    let grads = tape.backward(l);

    let mut worst = (0.0, String::from("none"));
    let mut checked = 0;
    let mut record = |name: String, analytic: &Array2<f64>, numeric: &Array2<f64>| {
        let e = tensor_error(analytic, numeric);
        if e > worst.0 || worst.1 == "none" {
            worst = (e, name);
        }
    };

    for (i, (x, &v)) in inputs.iter().zip(&vars).enumerate() {
        let analytic = grads.get(v).cloned().unwrap_or_else(|| Array2::zeros(x.dim()));
        let mut numeric = Array2::zeros(x.dim());
        let mut probe = inputs.to_vec();
        for idx in ndarray::indices(x.dim()) {
            let (r, c) = idx;
            probe[i][[r, c]] = x[[r, c]] + step;
            let up = loss_value(store, &probe, build, &weights)?;
            probe[i][[r, c]] = x[[r, c]] - step;
            let down = loss_value(store, &probe, build, &weights)?;
            probe[i][[r, c]] = x[[r, c]];
            numeric[[r, c]] = (up - down) / (2.0 * step);
        }
        checked += x.len();
        record(format!("input{i}"), &analytic, &numeric);
    }

    let leaves: Vec<(ParamId, Var)> = tape.param_leaves().collect();
    let mut probe = store.clone();
    for (id, v) in leaves {
        let base = store.value(id).clone();
        let analytic = grads.get(v).cloned().unwrap_or_else(|| Array2::zeros(base.dim()));
        let mut numeric = Array2::zeros(base.dim());
        for (r, c) in ndarray::indices(base.dim()) {
            probe.value_mut(id)[[r, c]] = base[[r, c]] + step;
            let up = loss_value(&probe, inputs, build, &weights)?;
            probe.value_mut(id)[[r, c]] = base[[r, c]] - step;
            let down = loss_value(&probe, inputs, build, &weights)?;
            probe.value_mut(id)[[r, c]] = base[[r, c]];
            numeric[[r, c]] = (up - down) / (2.0 * step);
        }
        checked += base.len();
        record(store.key(id).to_string(), &analytic, &numeric);
    }
    Ok(GradReport { op: op.to_string(), max_rel_error: worst.0, worst: worst.1, checked })
}

fn feature_inputs(rng: &mut ChaCha8Rng, sig: Signature, npos: usize) -> Vec<Array2<f64>> {
    (0..3).map(|l| randn(rng, (sig.0[l], npos * (2 * l + 1)))).collect()
}

fn tfeat(vars: &[Var], sig: Signature, npos: usize) -> TFeat {
    let mut blocks = [None; 3];
    for l in 0..3 {
        if sig.0[l] > 0 {
            blocks[l] = Some(vars[l]);
        }
    }
    TFeat { blocks, npos }
}

fn outputs(f: &TFeat) -> Vec<Var> {
    f.blocks.iter().flatten().copied().collect()
}

/// Runs the named check on small random inputs with the default step.
pub fn run(op: &str, seed: u64) -> Result<GradReport> {
    run_with_step(op, seed, FD_STEP)
}

pub fn run_with_step(op: &str, seed: u64, step: f64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    match op {
        "equi_linear" => {
            let (sin, sout, npos) = (Signature([3, 2, 2]), Signature([2, 3, 1]), 2);
            let lin = EquiLinear::new(&mut store, "lin", sin, sout, Some(0.0), Init::Normal { gain: 1.0 }, &mut rng);
            let inputs = feature_inputs(&mut rng, sin, npos);
            // Random bias so the bias gradient is exercised away from zero.
            store.value_mut(store.id("lin.bias").expect("bias")).assign(&randn(&mut rng, (sout.0[0], 1)));
            let build = move |t: &mut Tape, v: &[Var]| Ok(outputs(&lin.forward(t, &tfeat(v, sin, npos))));
            grad_check(op, &store, &inputs, &build, step, seed)
        }
        "gate" => {
            let (sig, npos) = (Signature([6, 2, 2]), 3);
            let inputs = feature_inputs(&mut rng, sig, npos);
            let build = move |t: &mut Tape, v: &[Var]| Ok(outputs(&gate(t, &tfeat(v, sig, npos))?));
            grad_check(op, &store, &inputs, &build, step, seed)
        }
        "efilm" | "efilm_affine" => {
            let affine = op == "efilm_affine";
            let (sig, npos) = (Signature([3, 2, 2]), 2);
            let mut inputs = feature_inputs(&mut rng, sig, npos);
            inputs.extend(feature_inputs(&mut rng, sig, npos));
            inputs.extend(feature_inputs(&mut rng, sig, npos));
            let build = move |t: &mut Tape, v: &[Var]| {
                let (h, g, b) = (tfeat(&v[0..3], sig, npos), tfeat(&v[3..6], sig, npos), tfeat(&v[6..9], sig, npos));
                Ok(outputs(&efilm_tape(t, &h, &g, &b, affine)))
            };
            grad_check(op, &store, &inputs, &build, step, seed)
        }
        "temporal_conv" => {
            let (sin, sout, len) = (Signature([2, 2, 1]), Signature([3, 1, 2]), 5);
            let replicate = TemporalConv::new(&mut store, "rep", sin, sout, 2, Padding::Replicate, true, &mut rng);
            let zero = TemporalConv::new(&mut store, "zero", sin, sout, 1, Padding::Zero, false, &mut rng);
            let inputs = feature_inputs(&mut rng, sin, 2 * len);
            let build = move |t: &mut Tape, v: &[Var]| {
                let x = tfeat(v, sin, 2 * len);
                let mut out = outputs(&replicate.forward(t, &x, len));
                out.extend(outputs(&zero.forward(t, &x, len)));
                Ok(out)
            };
            grad_check(op, &store, &inputs, &build, step, seed)
        }
        "time_ops" => {
            let (sig, len, batch) = (Signature([2, 1, 1]), 4, 2);
            let inputs = feature_inputs(&mut rng, sig, batch * len);
            let build = move |t: &mut Tape, v: &[Var]| {
                let x = tfeat(v, sig, batch * len);
                let pooled = x.time_pool(t, 2, len);
                let up = pooled.time_repeat(t, 2, len / 2);
                let shifted = x.time_shift(t, 1, len, Padding::Replicate);
                let mut out = outputs(&up);
                out.extend(outputs(&shifted));
                Ok(out)
            };
            grad_check(op, &store, &inputs, &build, step, seed)
        }
        "fem_fuse" => {
            let (sin, sout, npos, n_tok, d_img) = (Signature([3, 2, 1]), Signature([4, 2, 1]), 2, 3, 4);
            let fem = Fem::new(&mut store, "fem", sin, d_img, 3, sout, &mut rng);
            let mut inputs = feature_inputs(&mut rng, sin, npos);
            inputs.push(randn(&mut rng, (npos * n_tok, d_img)));
            let build = move |t: &mut Tape, v: &[Var]| Ok(outputs(&fem.forward(t, &tfeat(&v[0..3], sin, npos), v[3])));
            grad_check(op, &store, &inputs, &build, step, seed)
        }
        "equi_unet" => {
            let cfg = UNetConfig {
                horizon: 4,
                action_sig: Signature([1, 2, 0]),
                cond_sig: Signature([2, 1, 1]),
                time_dim: 2,
                widths: vec![Signature([2, 1, 1]), Signature([2, 2, 1])],
                radius: 1,
                factor: 2,
                padding: Padding::Replicate,
                pos_channels: 1,
                zero_head: false,
            };
            let (asig, csig, h) = (cfg.action_sig, cfg.cond_sig, cfg.horizon);
            let net = EquiUNet::new(&mut store, "u", cfg, &mut rng)?;
            let mut inputs = feature_inputs(&mut rng, asig, h);
            inputs.extend(feature_inputs(&mut rng, csig, 1));
            let build = move |t: &mut Tape, v: &[Var]| {
                let x = tfeat(&v[0..3], asig, h);
                let c = tfeat(&v[3..6], csig, 1);
                Ok(outputs(&net.forward(t, &x, &[0.37], &c)?))
            };
            grad_check(op, &store, &inputs, &build, step, seed)
        }
        _ => Err(Error::Validation(format!("unknown operation '{op}' (known: {})", OPS.join(", ")))),
    }
}
