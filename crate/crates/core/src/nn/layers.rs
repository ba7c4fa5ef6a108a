use ndarray::Array2;
use rand::Rng;

use super::TFeat;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::so3::{degree_dim, Signature};
use crate::tape::{Padding, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with std `gain / sqrt(fan_in)`.
    Normal { gain: f64 },
    Zero,
}

fn init_weight<R: Rng + ?Sized>(
    store: &mut ParamStore,
    key: String,
    shape: (usize, usize),
    fan_in: usize,
    init: Init,
    rng: &mut R,
) -> ParamId {
    match init {
        Init::Normal { gain } => store.insert_normal(key, shape, gain / (fan_in.max(1) as f64).sqrt(), rng),
        Init::Zero => store.insert_zeros(key, shape),
    }
}

/// Weights of a per-degree channel mixing: `weights[l]` is `out_l x in_l`.
#[derive(Clone, Debug, PartialEq)]
pub struct EquiLinearParams {
    pub weights: [Array2<f64>; 3],
    /// Optional `out_0 x 1` bias on the scalar block.
    pub bias: Option<Array2<f64>>,
}

impl EquiLinearParams {
    pub fn identity(sig: Signature) -> Self {
        EquiLinearParams { weights: std::array::from_fn(|l| Array2::eye(sig.0[l])), bias: None }
    }

    pub fn random<R: Rng + ?Sized>(input: Signature, output: Signature, bias: bool, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let layer = EquiLinear::new(&mut store, "p", input, output, bias.then_some(0.0), Init::Normal { gain: 1.0 }, rng);
        let mut p = layer.params(&store);
        if let Some(b) = &mut p.bias {
            b.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        }
        p
    }

    pub fn in_signature(&self) -> Signature {
        Signature(std::array::from_fn(|l| self.weights[l].ncols()))
    }

    pub fn out_signature(&self) -> Signature {
        Signature(std::array::from_fn(|l| self.weights[l].nrows()))
    }

    pub(crate) fn check_input(&self, sig: Signature) -> Result<()> {
        if sig != self.in_signature() {
            return Err(Error::SignatureMismatch(format!(
                "layer expects {} but got {sig}",
                self.in_signature()
            )));
        }
        Ok(())
    }

    pub(crate) fn to_tape(&self, tape: &mut Tape, tracked: bool) -> ([Option<Var>; 3], Option<Var>) {
        let mut leaf = |a: &Array2<f64>| {
            (!a.is_empty()).then(|| if tracked { tape.input(a.clone()) } else { tape.constant(a.clone()) })
        };
        let w = std::array::from_fn(|l| leaf(&self.weights[l]));
        let b = self.bias.as_ref().and_then(&mut leaf);
        (w, b)
    }
}

pub(crate) fn linear_vars(
    tape: &mut Tape,
    x: &TFeat,
    w: &[Option<Var>; 3],
    bias: Option<Var>,
    out_sig: Signature,
) -> TFeat {
    let blocks = std::array::from_fn(|l| {
        let out_c = out_sig.0[l];
        if out_c == 0 {
            return None;
        }
        let y = match (w[l], x.blocks[l]) {
            (Some(w), Some(b)) => tape.matmul(w, b),
            _ => tape.constant(Array2::zeros((out_c, x.npos * degree_dim(l)))),
        };
        match (l, bias) {
            (0, Some(b)) => Some(tape.add_col(y, b)),
            _ => Some(y),
        }
    });
    TFeat { blocks, npos: x.npos }
}

/// Per-degree channel mixing with parameters held in a [`ParamStore`].
///
/// Keys: `{prefix}.l{l}` for `W_l` and `{prefix}.bias` for the scalar bias.
#[derive(Clone, Debug)]
pub struct EquiLinear {
    pub in_sig: Signature,
    pub out_sig: Signature,
    w: [Option<ParamId>; 3],
    bias: Option<ParamId>,
}

impl EquiLinear {
    /// `bias` gives the initial value of the scalar bias, if one is wanted.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        in_sig: Signature,
        out_sig: Signature,
        bias: Option<f64>,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let w = std::array::from_fn(|l| {
            let (o, i) = (out_sig.0[l], in_sig.0[l]);
            (o > 0 && i > 0).then(|| init_weight(store, format!("{prefix}.l{l}"), (o, i), i, init, rng))
        });
        let bias = bias.filter(|_| out_sig.0[0] > 0).map(|v| store.insert_filled(format!("{prefix}.bias"), (out_sig.0[0], 1), v));
        EquiLinear { in_sig, out_sig, w, bias }
    }

    pub fn forward(&self, tape: &mut Tape, x: &TFeat) -> TFeat {
        debug_assert_eq!(x.signature(tape), self.in_sig);
        let w = self.w.map(|id| id.map(|id| tape.param(id)));
        let b = self.bias.map(|id| tape.param(id));
        linear_vars(tape, x, &w, b, self.out_sig)
    }

    pub fn params(&self, store: &ParamStore) -> EquiLinearParams {
        EquiLinearParams {
            weights: std::array::from_fn(|l| match self.w[l] {
                Some(id) => store.value(id).clone(),
                None => Array2::zeros((self.out_sig.0[l], self.in_sig.0[l])),
            }),
            bias: self.bias.map(|id| store.value(id).clone()),
        }
    }
}

/// Temporal convolution weights: `weights[l][j]` is the `out_l x in_l`
/// mixing applied at lag `j`. There is no coefficient (`m`) index.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalConvParams {
    pub weights: [Vec<Array2<f64>>; 3],
    pub bias: Option<Array2<f64>>,
    pub padding: Padding,
}

impl TemporalConvParams {
    pub fn radius(&self) -> usize {
        self.weights[0].len().saturating_sub(1)
    }

    pub fn random<R: Rng + ?Sized>(
        input: Signature,
        output: Signature,
        radius: usize,
        padding: Padding,
        rng: &mut R,
    ) -> Self {
        let mut store = ParamStore::new();
        let layer = TemporalConv::new(&mut store, "p", input, output, radius, padding, true, rng);
        layer.params(&store)
    }

    pub fn in_signature(&self) -> Signature {
        Signature(std::array::from_fn(|l| self.weights[l].first().map_or(0, |w| w.ncols())))
    }

    pub fn out_signature(&self) -> Signature {
        Signature(std::array::from_fn(|l| self.weights[l].first().map_or(0, |w| w.nrows())))
    }

    pub(crate) fn check_input(&self, sig: Signature) -> Result<()> {
        if self.weights.iter().any(|w| w.len() != self.radius() + 1) {
            return Err(Error::Config("every degree needs one weight per lag".into()));
        }
        if sig != self.in_signature() {
            return Err(Error::SignatureMismatch(format!(
                "temporal conv expects {} but got {sig}",
                self.in_signature()
            )));
        }
        Ok(())
    }

    pub(crate) fn to_tape(&self, tape: &mut Tape, tracked: bool) -> ([Vec<Option<Var>>; 3], Option<Var>) {
        let mut leaf = |a: &Array2<f64>| {
            (!a.is_empty()).then(|| if tracked { tape.input(a.clone()) } else { tape.constant(a.clone()) })
        };
        let w = std::array::from_fn(|l| self.weights[l].iter().map(&mut leaf).collect());
        let b = self.bias.as_ref().and_then(&mut leaf);
        (w, b)
    }
}

pub(crate) fn conv_vars(
    tape: &mut Tape,
    x: &TFeat,
    w: &[Vec<Option<Var>>; 3],
    bias: Option<Var>,
    out_sig: Signature,
    len: usize,
    pad: Padding,
) -> TFeat {
    let blocks = std::array::from_fn(|l| {
        let out_c = out_sig.0[l];
        if out_c == 0 {
            return None;
        }
        let dl = degree_dim(l);
        let mut terms = Vec::with_capacity(w[l].len());
        if let Some(xb) = x.blocks[l] {
            for (lag, wj) in w[l].iter().enumerate() {
                let Some(wj) = *wj else { continue };
                let shifted = if lag == 0 { xb } else { tape.time_shift(xb, lag, len, dl, pad) };
                terms.push(tape.matmul(wj, shifted));
            }
        }
        let y = match terms.len() {
            0 => tape.constant(Array2::zeros((out_c, x.npos * dl))),
            1 => terms[0],
            _ => tape.sum(&terms),
        };
        match (l, bias) {
            (0, Some(b)) => Some(tape.add_col(y, b)),
            _ => Some(y),
        }
    });
    TFeat { blocks, npos: x.npos }
}

/// Temporal convolution `out_l(t) = sum_j W_{l,j} x_l(t - j)`, `j = 0..=radius`.
///
/// Keys: `{prefix}.l{l}.lag{j}` and `{prefix}.bias`.
#[derive(Clone, Debug)]
pub struct TemporalConv {
    pub in_sig: Signature,
    pub out_sig: Signature,
    pub radius: usize,
    pub padding: Padding,
    w: [Vec<Option<ParamId>>; 3],
    bias: Option<ParamId>,
}

impl TemporalConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        in_sig: Signature,
        out_sig: Signature,
        radius: usize,
        padding: Padding,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = std::array::from_fn(|l| {
            let (o, i) = (out_sig.0[l], in_sig.0[l]);
            (0..=radius)
                .map(|j| {
                    (o > 0 && i > 0).then(|| {
                        let key = format!("{prefix}.l{l}.lag{j}");
                        init_weight(store, key, (o, i), i * (radius + 1), Init::Normal { gain: 1.0 }, rng)
                    })
                })
                .collect()
        });
        let bias = (bias && out_sig.0[0] > 0).then(|| store.insert_zeros(format!("{prefix}.bias"), (out_sig.0[0], 1)));
        TemporalConv { in_sig, out_sig, radius, padding, w, bias }
    }

    /// `x` holds `npos / len` sequences of `len` frames each.
    pub fn forward(&self, tape: &mut Tape, x: &TFeat, len: usize) -> TFeat {
        let w = std::array::from_fn(|l| self.w[l].iter().map(|id| id.map(|id| tape.param(id))).collect());
        let b = self.bias.map(|id| tape.param(id));
        conv_vars(tape, x, &w, b, self.out_sig, len, self.padding)
    }

    pub fn params(&self, store: &ParamStore) -> TemporalConvParams {
        TemporalConvParams {
            weights: std::array::from_fn(|l| {
                self.w[l]
                    .iter()
                    .map(|id| match id {
                        Some(id) => store.value(*id).clone(),
                        None => Array2::zeros((self.out_sig.0[l], self.in_sig.0[l])),
                    })
                    .collect()
            }),
            bias: self.bias.map(|id| store.value(id).clone()),
            padding: self.padding,
        }
    }
}
