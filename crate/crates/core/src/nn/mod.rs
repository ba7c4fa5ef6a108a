//! Equivariant building blocks on the autodiff tape.
//!
//! Features on the tape are [`TFeat`] values: up to three packed blocks (one
//! per degree) of shape `channels x (positions * (2l+1))`. A position is one
//! (batch element, timestep) pair. Empty degrees are `None`.
//!
//! Every op here acts on the channel axis only, or scales whole
//! `(2l+1)`-groups by invariant scalars, so it commutes with the Wigner
//! action on the coefficient axis.

mod layers;
mod unet;

pub use layers::{EquiLinear, EquiLinearParams, Init, TemporalConv, TemporalConvParams};
pub use unet::{EquiUNet, UNetConfig};
pub(crate) use layers::{conv_vars, linear_vars};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::so3::{degree_dim, IrrepFeature, IrrepSeq, Signature};
use crate::tape::{Padding, Tape, Var};

/// Norm floor used by [`efilm`].
pub const EFILM_EPS: f64 = 1e-8;

/// Packed irrep feature living on a tape.
#[derive(Clone, Copy, Debug)]
pub struct TFeat {
    pub blocks: [Option<Var>; 3],
    pub npos: usize,
}

impl TFeat {
    fn from_arrays(tape: &mut Tape, blocks: &[Array2<f64>; 3], npos: usize, tracked: bool) -> TFeat {
        let blocks = std::array::from_fn(|l| {
            let b = &blocks[l];
            (b.nrows() > 0).then(|| if tracked { tape.input(b.clone()) } else { tape.constant(b.clone()) })
        });
        TFeat { blocks, npos }
    }

    pub fn constant(tape: &mut Tape, blocks: &[Array2<f64>; 3], npos: usize) -> TFeat {
        Self::from_arrays(tape, blocks, npos, false)
    }

    pub fn input(tape: &mut Tape, blocks: &[Array2<f64>; 3], npos: usize) -> TFeat {
        Self::from_arrays(tape, blocks, npos, true)
    }

    pub fn from_feature(tape: &mut Tape, f: &IrrepFeature, tracked: bool) -> TFeat {
        Self::from_arrays(tape, f.blocks(), 1, tracked)
    }

    pub fn from_seq(tape: &mut Tape, s: &IrrepSeq, tracked: bool) -> TFeat {
        Self::from_arrays(tape, s.blocks(), s.len(), tracked)
    }

    /// Scalar-only feature from a `channels x positions` matrix.
    pub fn scalars(v: Var, npos: usize) -> TFeat {
        TFeat { blocks: [Some(v), None, None], npos }
    }

    pub fn signature(&self, tape: &Tape) -> Signature {
        Signature(std::array::from_fn(|l| self.blocks[l].map_or(0, |v| tape.shape(v).0)))
    }

    pub fn values(&self, tape: &Tape) -> [Array2<f64>; 3] {
        std::array::from_fn(|l| match self.blocks[l] {
            Some(v) => tape.value(v).clone(),
            None => Array2::zeros((0, self.npos * degree_dim(l))),
        })
    }

    pub fn to_feature(&self, tape: &Tape) -> IrrepFeature {
        IrrepFeature::new(self.values(tape)).expect("tape feature has consistent widths")
    }

    pub fn to_seq(&self, tape: &Tape) -> IrrepSeq {
        IrrepSeq::new(self.values(tape), self.npos).expect("tape feature has consistent widths")
    }

    /// Per-degree channel concatenation.
    pub fn concat(&self, tape: &mut Tape, other: &TFeat) -> TFeat {
        assert_eq!(self.npos, other.npos, "concat: position counts differ");
        let blocks = std::array::from_fn(|l| match (self.blocks[l], other.blocks[l]) {
            (Some(a), Some(b)) => Some(tape.concat_rows(&[a, b])),
            (a, b) => a.or(b),
        });
        TFeat { blocks, npos: self.npos }
    }

    pub fn add(&self, tape: &mut Tape, other: &TFeat) -> TFeat {
        assert_eq!(self.npos, other.npos, "add: position counts differ");
        let blocks = std::array::from_fn(|l| match (self.blocks[l], other.blocks[l]) {
            (Some(a), Some(b)) => Some(tape.add(a, b)),
            (a, b) => a.or(b),
        });
        TFeat { blocks, npos: self.npos }
    }

    /// Repeats every position `reps` times (broadcast over time).
    pub fn tile(&self, tape: &mut Tape, reps: usize) -> TFeat {
        let blocks = std::array::from_fn(|l| self.blocks[l].map(|v| tape.tile(v, reps, degree_dim(l))));
        TFeat { blocks, npos: self.npos * reps }
    }

    pub fn time_shift(&self, tape: &mut Tape, lag: usize, len: usize, pad: Padding) -> TFeat {
        let blocks =
            std::array::from_fn(|l| self.blocks[l].map(|v| tape.time_shift(v, lag, len, degree_dim(l), pad)));
        TFeat { blocks, npos: self.npos }
    }

    pub fn time_pool(&self, tape: &mut Tape, factor: usize, len: usize) -> TFeat {
        let blocks =
            std::array::from_fn(|l| self.blocks[l].map(|v| tape.time_pool(v, factor, len, degree_dim(l))));
        TFeat { blocks, npos: self.npos / factor }
    }

    pub fn time_repeat(&self, tape: &mut Tape, factor: usize, len: usize) -> TFeat {
        let blocks =
            std::array::from_fn(|l| self.blocks[l].map(|v| tape.time_repeat(v, factor, len, degree_dim(l))));
        TFeat { blocks, npos: self.npos * factor }
    }
}

/// Norm gating. The last `c1 + c2` scalar channels are gates: the first `c1`
/// of them scale the degree-1 channels and the rest the degree-2 channels
/// through a sigmoid. Remaining scalars go through SiLU.
pub fn gate(tape: &mut Tape, x: &TFeat) -> Result<TFeat> {
    let sig = x.signature(tape);
    let g = sig.gate_count();
    if sig.0[0] < g {
        return Err(Error::Config(format!(
            "gated nonlinearity needs {g} gate scalars but the input {sig} has {}",
            sig.0[0]
        )));
    }
    let keep = sig.0[0] - g;
    let mut out = TFeat { blocks: [None; 3], npos: x.npos };
    if let Some(l0) = x.blocks[0] {
        if keep > 0 {
            let s = tape.slice_rows(l0, 0, keep);
            out.blocks[0] = Some(tape.silu(s));
        }
        let mut offset = keep;
        for l in 1..3 {
            let (c, Some(b)) = (sig.0[l], x.blocks[l]) else { continue };
            let raw = tape.slice_rows(l0, offset, c);
            let gates = tape.sigmoid(raw);
            out.blocks[l] = Some(tape.group_scale(b, gates, degree_dim(l)));
            offset += c;
        }
    }
    Ok(out)
}

/// Equivariant FiLM: `(gamma . h) h / max(|h|, eps) + beta` per channel and
/// position, for every degree. With `affine_scalars` the degree-0 block uses
/// the plain affine map `gamma * h + beta` instead.
pub fn efilm_tape(tape: &mut Tape, h: &TFeat, gamma: &TFeat, beta: &TFeat, affine_scalars: bool) -> TFeat {
    let mut out = TFeat { blocks: [None; 3], npos: h.npos };
    for l in 0..3 {
        let (Some(hb), Some(gb), Some(bb)) = (h.blocks[l], gamma.blocks[l], beta.blocks[l]) else { continue };
        let scaled = if l == 0 && affine_scalars {
            tape.mul(hb, gb)
        } else {
            let w = degree_dim(l);
            let dot = tape.group_dot(gb, hb, w);
            let norm = tape.group_norm(hb, w, EFILM_EPS);
            let coef = tape.div(dot, norm);
            tape.group_scale(hb, coef, w)
        };
        out.blocks[l] = Some(tape.add(scaled, bb));
    }
    out
}

fn check_same_shape(a: &IrrepFeature, b: &IrrepFeature, what: &str) -> Result<()> {
    if a.signature() != b.signature() {
        return Err(Error::Shape(format!("efilm: {what} has signature {} but h has {}", b.signature(), a.signature())));
    }
    Ok(())
}

/// Value-level equivariant FiLM applied to every degree (see [`efilm_tape`]).
pub fn efilm(h: &IrrepFeature, gamma: &IrrepFeature, beta: &IrrepFeature) -> Result<IrrepFeature> {
    check_same_shape(h, gamma, "gamma")?;
    check_same_shape(h, beta, "beta")?;
    let mut tape = Tape::new();
    let (th, tg, tb) = (
        TFeat::from_feature(&mut tape, h, false),
        TFeat::from_feature(&mut tape, gamma, false),
        TFeat::from_feature(&mut tape, beta, false),
    );
    let out = efilm_tape(&mut tape, &th, &tg, &tb, false);
    Ok(out.to_feature(&tape))
}

/// Value-level gated nonlinearity (see [`gate`]).
pub fn gated_nonlinearity(f: &IrrepFeature) -> Result<IrrepFeature> {
    let mut tape = Tape::new();
    let x = TFeat::from_feature(&mut tape, f, false);
    let out = gate(&mut tape, &x)?;
    Ok(out.to_feature(&tape))
}

/// Value-level per-degree channel mixing.
pub fn equi_linear(f: &IrrepFeature, p: &EquiLinearParams) -> Result<IrrepFeature> {
    p.check_input(f.signature())?;
    let mut tape = Tape::new();
    let x = TFeat::from_feature(&mut tape, f, false);
    let (w, b) = p.to_tape(&mut tape, false);
    let out = linear_vars(&mut tape, &x, &w, b, p.out_signature());
    Ok(out.to_feature(&tape))
}

/// Value-level temporal convolution over a feature sequence.
pub fn spherical_temporal_conv(seq: &IrrepSeq, p: &TemporalConvParams) -> Result<IrrepSeq> {
    if seq.is_empty() {
        return Err(Error::Shape("temporal convolution of an empty sequence".into()));
    }
    p.check_input(seq.signature())?;
    let mut tape = Tape::new();
    let x = TFeat::from_seq(&mut tape, seq, false);
    let (w, b) = p.to_tape(&mut tape, false);
    let out = conv_vars(&mut tape, &x, &w, b, p.out_signature(), seq.len(), p.padding);
    Ok(out.to_seq(&tape))
}

/// Sinusoidal flow-time features: `dim/2` sines followed by `dim/2` cosines
/// at frequencies `(pi/2) 2^k`. An odd `dim` gets one extra cosine.
pub fn time_embedding_values(t: f64, dim: usize) -> Vec<f64> {
    let t = if (0.0..=1.0).contains(&t) {
        t
    } else {
        log::warn!("flow time {t} outside [0, 1]; clamping");
        t.clamp(0.0, 1.0)
    };
    let half = dim / 2;
    let n_cos = dim - half;
    let freq = |k: usize| std::f64::consts::FRAC_PI_2 * 2f64.powi(k as i32);
    let mut out = Vec::with_capacity(dim);
    out.extend((0..half).map(|k| (freq(k) * t).sin()));
    out.extend((0..n_cos).map(|k| (freq(k) * t).cos()));
    out
}

/// [`time_embedding_values`] as a scalar-only feature.
pub fn time_embedding(t: f64, dim: usize) -> IrrepFeature {
    IrrepFeature::scalars(&time_embedding_values(t, dim))
}

/// Time features for a batch: `dim x batch`.
pub fn time_embedding_batch(ts: &[f64], dim: usize) -> Array2<f64> {
    let mut out = Array2::zeros((dim, ts.len()));
    for (j, &t) in ts.iter().enumerate() {
        for (i, v) in time_embedding_values(t, dim).into_iter().enumerate() {
            out[[i, j]] = v;
        }
    }
    out
}
