//! Numeric conformance checks: group laws of the Wigner blocks and
//! `f(D x) = D f(x)` for every layer and for whole policies.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bench::{sample_scene, Env, Task};
use crate::error::{Error, Result};
use crate::flow::{sample_from_sources, sample_source};
use crate::fusion::{fem_fuse, FemParams, ImageTokens};
use crate::nn::{
    efilm, equi_linear, gated_nonlinearity, spherical_temporal_conv, EquiLinearParams, EquiUNet, TemporalConvParams,
    UNetConfig, EFILM_EPS,
};
use crate::params::ParamStore;
use crate::perception::decode_action_chunk;
use crate::policy::{prepare, Model, Observation, PreparedObs, ACTION_SIG};
use crate::so3::{
    apply_rotation, apply_rotation_seq, eval_real_sh, random_rotation, wigner_blocks, IrrepFeature, IrrepSeq,
    Rotation, Signature, WignerBlocks, L_MAX,
};
use crate::tape::Padding;

/// Every check [`run_check`] knows, in report order.
pub const CHECKS: &[&str] =
    &["wigner", "sh", "equi_linear", "gate", "temporal_conv", "efilm", "efilm_identity", "fem_fuse", "equi_unet"];

/// Largest violation seen over `cases` random draws.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub check: String,
    pub cases: usize,
    pub max_violation: f64,
    pub tolerance: f64,
    /// `true` when the violation is relative to the output norm.
    pub relative: bool,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_violation <= self.tolerance
    }
}

/// Default tolerance of each named check.
pub fn tolerance(check: &str) -> f64 {
    match check {
        "wigner" | "sh" | "efilm_identity" | "efilm" | "gate" => 1e-8,
        "policy_chunk" => 1e-5,
        _ => 1e-6,
    }
}

fn frob(blocks: &[Array2<f64>]) -> f64 {
    blocks.iter().flat_map(|b| b.iter()).map(|x| x * x).sum::<f64>().sqrt()
}

fn rel_diff(a: &[Array2<f64>], b: &[Array2<f64>]) -> f64 {
    let diff: Vec<Array2<f64>> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    frob(&diff) / frob(b).max(1e-12)
}

/// `|f(Dx) - D f(x)| / |D f(x)|` in the Frobenius norm over all blocks.
pub fn feature_violation(lhs: &IrrepFeature, rhs: &IrrepFeature) -> f64 {
    rel_diff(lhs.blocks(), rhs.blocks())
}

pub fn seq_violation(lhs: &IrrepSeq, rhs: &IrrepSeq) -> f64 {
    rel_diff(lhs.blocks(), rhs.blocks())
}

fn max_abs(a: &Array2<f64>) -> f64 {
    a.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn draw(rng: &mut ChaCha8Rng) -> (Rotation, WignerBlocks) {
    let r = random_rotation(rng);
    let d = wigner_blocks(&r, L_MAX).expect("lmax is supported");
    (r, d)
}

fn unit_vector(rng: &mut ChaCha8Rng) -> nalgebra::Vector3<f64> {
    loop {
        let v = nalgebra::Vector3::from_fn(|_, _| StandardNormal.sample(rng));
        let n: f64 = v.norm();
        if n > 1e-6 {
            return v / n;
        }
    }
}

/// Orthogonality, composition and inverse of every block, as absolute entry errors.
fn wigner_laws(rng: &mut ChaCha8Rng) -> f64 {
    let (r1, d1) = draw(rng);
    let (r2, d2) = draw(rng);
    let d12 = wigner_blocks(&r1.compose(&r2), L_MAX).expect("supported");
    let dinv = wigner_blocks(&r1.inverse(), L_MAX).expect("supported");
    let mut worst = 0.0f64;
    for l in 0..=L_MAX {
        let (a, b) = (d1.block(l).unwrap(), d2.block(l).unwrap());
        let eye = Array2::<f64>::eye(a.nrows());
        worst = worst.max(max_abs(&(a.t().dot(a) - &eye)));
        worst = worst.max(max_abs(&(a.dot(b) - d12.block(l).unwrap())));
        worst = worst.max(max_abs(&(dinv.block(l).unwrap() - &a.t())));
    }
    worst
}

/// `Y(R r) = D(R) Y(r)` and `Y(R^-1 r) = D(R)^T Y(r)` per degree, as absolute entry error.
fn sh_law(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (r, d) = draw(rng);
    let dir = unit_vector(rng);
    let mut worst = 0.0f64;
    for l in 0..=L_MAX {
        let y = ndarray::Array1::from(eval_real_sh(l, &dir)?);
        let dl = d.block(l).unwrap();
        let fwd = eval_real_sh(l, &r.apply(&dir))?;
        let back = eval_real_sh(l, &r.inverse().apply(&dir))?;
        worst = fwd.iter().zip(dl.dot(&y).iter()).fold(worst, |m, (a, b)| m.max((a - b).abs()));
        worst = back.iter().zip(dl.t().dot(&y).iter()).fold(worst, |m, (a, b)| m.max((a - b).abs()));
    }
    Ok(worst)
}

/// Each step of the EFiLM rotation chain, as absolute errors: the inner
/// products and norms are invariant, and the assembled output is `D` times
/// the unrotated one.
fn efilm_chain(rng: &mut ChaCha8Rng) -> Result<f64> {
    let sig = Signature::new(3, 3, 3);
    let (h, g, b) = (IrrepFeature::random(sig, rng), IrrepFeature::random(sig, rng), IrrepFeature::random(sig, rng));
    let (_, d) = draw(rng);
    let rot = |f: &IrrepFeature| apply_rotation(f, &d);
    let (hr, gr, br) = (rot(&h)?, rot(&g)?, rot(&b)?);
    let mut worst = 0.0f64;
    let mut manual = IrrepFeature::zeros(sig);
    for l in 0..3 {
        for c in 0..sig.0[l] {
            let (hv, gv) = (h.block(l).row(c), g.block(l).row(c));
            let (hrv, grv) = (hr.block(l).row(c), gr.block(l).row(c));
            let dot = gv.dot(&hv);
            let dot_r = grv.dot(&hrv);
            let (n, n_r) = (hv.dot(&hv).sqrt(), hrv.dot(&hrv).sqrt());
            worst = worst.max((dot - dot_r).abs()).max((n - n_r).abs());
            let row = &hrv * (dot_r / n_r.max(EFILM_EPS)) + br.block(l).row(c);
            manual.block_mut(l).row_mut(c).assign(&row);
        }
    }
    let rhs = rot(&efilm(&h, &g, &b)?)?;
    let lhs = efilm(&hr, &gr, &br)?;
    Ok(worst.max(manual.max_abs_diff(&rhs)).max(lhs.max_abs_diff(&rhs)))
}

fn small_unet() -> UNetConfig {
    UNetConfig {
        horizon: 8,
        action_sig: ACTION_SIG,
        cond_sig: Signature::new(6, 4, 2),
        time_dim: 4,
        widths: vec![Signature::new(6, 3, 2), Signature::new(8, 4, 2), Signature::new(8, 4, 3)],
        radius: 2,
        factor: 2,
        padding: Padding::Replicate,
        pos_channels: 2,
        zero_head: false,
    }
}

/// Runs one named check over `cases` random draws.
pub fn run_check(check: &str, cases: usize, seed: u64) -> Result<CheckReport> {
    if cases == 0 {
        return Err(Error::Validation("an equivariance check needs at least one case".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let relative = !matches!(check, "wigner" | "sh" | "efilm_identity");
    let unet = if check == "equi_unet" {
        let mut store = ParamStore::new();
        let net = EquiUNet::new(&mut store, "u", small_unet(), &mut rng)?;
        Some((net, store))
    } else {
        None
    };
    for _ in 0..cases {
        let v = match check {
            "wigner" => wigner_laws(&mut rng),
            "sh" => sh_law(&mut rng)?,
            "efilm_identity" => efilm_chain(&mut rng)?,
            "equi_linear" => {
                let (sin, sout) = (Signature::new(4, 3, 2), Signature::new(3, 5, 2));
                let p = EquiLinearParams::random(sin, sout, true, &mut rng);
                let f = IrrepFeature::random(sin, &mut rng);
                let (_, d) = draw(&mut rng);
                feature_violation(&equi_linear(&apply_rotation(&f, &d)?, &p)?, &apply_rotation(&equi_linear(&f, &p)?, &d)?)
            }
            "gate" => {
                let f = IrrepFeature::random(Signature::new(7, 3, 2), &mut rng);
                let (_, d) = draw(&mut rng);
                let lhs = gated_nonlinearity(&apply_rotation(&f, &d)?)?;
                feature_violation(&lhs, &apply_rotation(&gated_nonlinearity(&f)?, &d)?)
            }
            "efilm" => {
                let sig = Signature::new(3, 3, 2);
                let f: Vec<IrrepFeature> = (0..3).map(|_| IrrepFeature::random(sig, &mut rng)).collect();
                let (_, d) = draw(&mut rng);
                let r: Vec<IrrepFeature> = f.iter().map(|x| apply_rotation(x, &d)).collect::<Result<_>>()?;
                feature_violation(&efilm(&r[0], &r[1], &r[2])?, &apply_rotation(&efilm(&f[0], &f[1], &f[2])?, &d)?)
            }
            "temporal_conv" => {
                let (sin, sout) = (Signature::new(3, 2, 2), Signature::new(2, 3, 1));
                let pad = if rng.random::<bool>() { Padding::Replicate } else { Padding::Zero };
                let p = TemporalConvParams::random(sin, sout, 2, pad, &mut rng);
                let s = IrrepSeq::random(sin, 6, &mut rng);
                let (_, d) = draw(&mut rng);
                let lhs = spherical_temporal_conv(&apply_rotation_seq(&s, &d)?, &p)?;
                seq_violation(&lhs, &apply_rotation_seq(&spherical_temporal_conv(&s, &p)?, &d)?)
            }
            "fem_fuse" => {
                let (sin, sout) = (Signature::new(5, 3, 2), Signature::new(4, 3, 2));
                let p = FemParams::random(sin, 6, 4, sout, &mut rng);
                let tokens =
                    ImageTokens::new(Array2::from_shape_simple_fn((4, 6), || StandardNormal.sample(&mut rng)))?;
                let f = IrrepFeature::random(sin, &mut rng);
                let (_, d) = draw(&mut rng);
                let lhs = fem_fuse(&apply_rotation(&f, &d)?, &tokens, &p)?;
                feature_violation(&lhs, &apply_rotation(&fem_fuse(&f, &tokens, &p)?, &d)?)
            }
            "equi_unet" => {
                let (net, store) = unet.as_ref().expect("built above");
                let x = IrrepSeq::random(net.cfg.action_sig, net.cfg.horizon, &mut rng);
                let c = IrrepFeature::random(net.cfg.cond_sig, &mut rng);
                let t = rng.random::<f64>();
                let (_, d) = draw(&mut rng);
                let lhs = net.forward_value(store, &apply_rotation_seq(&x, &d)?, t, &apply_rotation(&c, &d)?)?;
                seq_violation(&lhs, &apply_rotation_seq(&net.forward_value(store, &x, t, &c)?, &d)?)
            }
            _ => return Err(Error::Validation(format!("unknown check '{check}' (known: {})", CHECKS.join(", ")))),
        };
        if v.is_nan() {
            return Err(Error::Validation(format!("check {check} produced NaN")));
        }
        worst = worst.max(v);
    }
    Ok(CheckReport { check: check.to_string(), cases, max_violation: worst, tolerance: tolerance(check), relative })
}

/// A canonical pick-place observation and its copy with every 3-D quantity
/// rotated by `r` about the origin. With `live_image` the rotated copy keeps
/// its own rendering; otherwise it reuses the canonical image.
pub fn observation_pair(r: &Rotation, live_image: bool, rng: &mut ChaCha8Rng) -> (Observation, Observation) {
    let scene = sample_scene(Task::PickPlace, rng);
    let obs = Env::new(scene.clone()).observe();
    let mut rotated = Env::new(scene.rotated(r)).observe();
    if !live_image {
        rotated.image = obs.image.clone();
    }
    (obs, rotated)
}

/// Velocity-field equivariance of a whole policy: observation encoder,
/// fusion and U-Net together, on toy-bench observations.
pub fn policy_velocity_check(
    model: &Model,
    store: &ParamStore,
    cases: usize,
    live_image: bool,
    seed: u64,
) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let (r, d) = draw(&mut rng);
        let (obs, obs_r) = observation_pair(&r, live_image, &mut rng);
        let (p, p_r) = (prepare(&obs)?, prepare(&obs_r)?);
        let x = IrrepSeq::random(ACTION_SIG, model.horizon(), &mut rng);
        let t = rng.random::<f64>();
        let cond = model.condition(store, &[&p])?;
        let cond_r = model.condition(store, &[&p_r])?;
        let rhs = apply_rotation_seq(&model.velocity_value(store, &cond, &x, t)?, &d)?;
        let lhs = model.velocity_value(store, &cond_r, &apply_rotation_seq(&x, &d)?, t)?;
        worst = worst.max(seq_violation(&lhs, &rhs));
    }
    Ok(CheckReport { check: "policy".into(), cases, max_violation: worst, tolerance: tolerance("policy"), relative: true })
}

/// Sampler equivariance: a rotated scene with a rotated source sample yields
/// the rotated action chunk. Positions are compared in the world frame,
/// relative to the largest position norm; rotation columns absolutely.
pub fn policy_chunk_check(
    model: &Model,
    store: &ParamStore,
    cases: usize,
    steps: usize,
    live_image: bool,
    seed: u64,
) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let (r, d) = draw(&mut rng);
        let (obs, obs_r) = observation_pair(&r, live_image, &mut rng);
        let (p, p_r): (PreparedObs, PreparedObs) = (prepare(&obs)?, prepare(&obs_r)?);
        let x0 = sample_source(ACTION_SIG, model.horizon(), &mut rng);
        let x0_r = apply_rotation_seq(&x0, &d)?;
        let a = &sample_from_sources(model, store, &[&p], &[x0], steps)?[0];
        let a_r = &sample_from_sources(model, store, &[&p_r], &[x0_r], steps)?[0];
        let chunk = decode_action_chunk(a, &p.centroid)?.rotated(&r);
        let chunk_r = decode_action_chunk(a_r, &p_r.centroid)?;
        let scale = chunk.steps.iter().map(|s| s.position.norm()).fold(1e-12, f64::max);
        for (u, v) in chunk_r.steps.iter().zip(&chunk.steps) {
            worst = worst
                .max((u.position - v.position).norm() / scale)
                .max((u.rot_a - v.rot_a).norm())
                .max((u.rot_b - v.rot_b).norm())
                .max((u.gripper - v.gripper).abs());
        }
    }
    Ok(CheckReport {
        check: "policy_chunk".into(),
        cases,
        max_violation: worst,
        tolerance: tolerance("policy_chunk"),
        relative: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_layer_check_passes() {
        for c in CHECKS {
            let r = run_check(c, 20, 3).unwrap();
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn unknown_check_and_zero_cases_are_rejected() {
        assert!(run_check("nope", 1, 0).is_err());
        assert!(run_check("gate", 0, 0).is_err());
    }
}
