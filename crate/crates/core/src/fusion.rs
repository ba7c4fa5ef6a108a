//! Image-to-point-cloud feature enhancement.
//!
//! Image tokens are rotation invariant, so they may only touch the scalar
//! block. The scalar block of the cloud feature is used as the attention
//! query over the image tokens; a learned gate blends the attended vector
//! with the original scalars, and an equivariant linear map mixes the result
//! with the untouched higher-degree blocks.

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{EquiLinear, EquiLinearParams, Init, TFeat};
use crate::params::{ParamId, ParamStore};
use crate::so3::{IrrepFeature, Signature};
use crate::tape::{Tape, Var};

/// Invariant image features, one row per token.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTokens(Array2<f64>);

impl ImageTokens {
    pub fn new(tokens: Array2<f64>) -> Result<Self> {
        if tokens.nrows() == 0 {
            return Err(Error::Validation("image tokens need at least one row".into()));
        }
        if tokens.iter().any(|x| !x.is_finite()) {
            return Err(Error::Validation("image tokens contain non-finite entries".into()));
        }
        Ok(ImageTokens(tokens))
    }

    pub fn tokens(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn n_tokens(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }
}

/// Plain-value parameters of the fusion block.
#[derive(Clone, Debug, PartialEq)]
pub struct FemParams {
    /// `c0 x d_att`
    pub query: Array2<f64>,
    /// `d_img x d_att`
    pub key: Array2<f64>,
    /// `d_img x c0`
    pub value: Array2<f64>,
    /// `2 c0 x c0`, acting on `[attended | original]`.
    pub gate_w: Array2<f64>,
    /// `1 x c0`
    pub gate_b: Array2<f64>,
    pub proj: EquiLinearParams,
}

impl FemParams {
    pub fn random<R: Rng + ?Sized>(input: Signature, d_img: usize, d_att: usize, output: Signature, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let fem = Fem::new(&mut store, "fem", input, d_img, d_att, output, rng);
        let mut p = fem.params(&store);
        p.gate_b.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        p
    }

    pub fn scalar_channels(&self) -> usize {
        self.query.nrows()
    }

    fn check(&self, c0: usize, d_img: usize) -> Result<()> {
        let d_att = self.query.ncols();
        let ok = self.query.nrows() == c0
            && self.key.dim() == (d_img, d_att)
            && self.value.dim() == (d_img, c0)
            && self.gate_w.dim() == (2 * c0, c0)
            && self.gate_b.dim() == (1, c0);
        if !ok {
            return Err(Error::Shape(format!(
                "fusion parameters do not fit {c0} scalar channels and {d_img}-dimensional image tokens"
            )));
        }
        Ok(())
    }
}

/// Scaled dot-product attention of `queries` (rows) against `tokens`,
/// computed within each of `segments` equal row groups.
pub(crate) fn attention_vars(
    tape: &mut Tape,
    queries: Var,
    tokens: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    segments: usize,
) -> Var {
    let d_att = tape.shape(wq).1;
    let q = tape.matmul(queries, wq);
    let k = tape.matmul(tokens, wk);
    let v = tape.matmul(tokens, wv);
    let scores = tape.segment_scores(q, k, segments);
    let scores = tape.scale(scores, 1.0 / (d_att as f64).sqrt());
    let p = tape.softmax_rows(scores);
    tape.segment_mix(p, v, segments)
}

/// `g * attended + (1 - g) * original` with `g = sigmoid([attended | original] W + b)`.
pub(crate) fn gate_vars(tape: &mut Tape, attended: Var, original: Var, w: Var, b: Var) -> Var {
    let cat = tape.concat_cols(&[attended, original]);
    let logits = tape.matmul(cat, w);
    let logits = tape.add_row(logits, b);
    let g = tape.sigmoid(logits);
    let diff = tape.sub(attended, original);
    let mixed = tape.mul(g, diff);
    tape.add(original, mixed)
}

/// Attention of query rows `f0` (`nq x c0`) over image tokens; output has the shape of `f0`.
pub fn cross_attention(f0: &Array2<f64>, img: &ImageTokens, p: &FemParams) -> Result<Array2<f64>> {
    p.check(f0.ncols(), img.dim())?;
    let mut tape = Tape::new();
    let q = tape.constant(f0.clone());
    let t = tape.constant(img.tokens().clone());
    let (wq, wk, wv) = (tape.constant(p.query.clone()), tape.constant(p.key.clone()), tape.constant(p.value.clone()));
    let out = attention_vars(&mut tape, q, t, wq, wk, wv, 1);
    Ok(tape.value(out).clone())
}

/// Gated blend of attended and original scalar rows.
pub fn gate(attended: &Array2<f64>, original: &Array2<f64>, p: &FemParams) -> Result<Array2<f64>> {
    if attended.dim() != original.dim() {
        return Err(Error::Shape(format!("gate inputs {:?} and {:?} differ", attended.dim(), original.dim())));
    }
    if p.gate_w.dim() != (2 * original.ncols(), original.ncols()) || p.gate_b.dim() != (1, original.ncols()) {
        return Err(Error::Shape("gate head does not match the scalar width".into()));
    }
    let mut tape = Tape::new();
    let a = tape.constant(attended.clone());
    let o = tape.constant(original.clone());
    let (w, b) = (tape.constant(p.gate_w.clone()), tape.constant(p.gate_b.clone()));
    let out = gate_vars(&mut tape, a, o, w, b);
    Ok(tape.value(out).clone())
}

/// Fuses image tokens into the scalar block of `f`, then projects.
pub fn fem_fuse(f: &IrrepFeature, img: &ImageTokens, p: &FemParams) -> Result<IrrepFeature> {
    let sig = f.signature();
    if sig.0[0] == 0 {
        return Err(Error::SignatureMismatch("fusion needs a non-empty scalar block".into()));
    }
    p.check(sig.0[0], img.dim())?;
    p.proj.check_input(sig)?;
    let mut tape = Tape::new();
    let x = TFeat::from_feature(&mut tape, f, false);
    let tokens = tape.constant(img.tokens().clone());
    let vars = FemVars {
        query: tape.constant(p.query.clone()),
        key: tape.constant(p.key.clone()),
        value: tape.constant(p.value.clone()),
        gate_w: tape.constant(p.gate_w.clone()),
        gate_b: tape.constant(p.gate_b.clone()),
    };
    let (w, b) = p.proj.to_tape(&mut tape, false);
    let mixed = fuse_scalars(&mut tape, &x, tokens, &vars);
    let out = crate::nn::linear_vars(&mut tape, &mixed, &w, b, p.proj.out_signature());
    Ok(out.to_feature(&tape))
}

struct FemVars {
    query: Var,
    key: Var,
    value: Var,
    gate_w: Var,
    gate_b: Var,
}

/// Replaces the scalar block of `x` (one position per segment) by the gated
/// attention output. `tokens` stacks the tokens of every segment.
fn fuse_scalars(tape: &mut Tape, x: &TFeat, tokens: Var, v: &FemVars) -> TFeat {
    let l0 = x.blocks[0].expect("scalar block checked by caller");
    let rows = tape.transpose(l0);
    let att = attention_vars(tape, rows, tokens, v.query, v.key, v.value, x.npos);
    let mixed = gate_vars(tape, att, rows, v.gate_w, v.gate_b);
    let back = tape.transpose(mixed);
    TFeat { blocks: [Some(back), x.blocks[1], x.blocks[2]], npos: x.npos }
}

/// Fusion block with stored parameters.
///
/// Keys: `{prefix}.query`, `.key`, `.value`, `.gate_w`, `.gate_b`, `.proj.*`.
#[derive(Clone, Debug)]
pub struct Fem {
    pub in_sig: Signature,
    pub out_sig: Signature,
    query: ParamId,
    key: ParamId,
    value: ParamId,
    gate_w: ParamId,
    gate_b: ParamId,
    proj: EquiLinear,
}

impl Fem {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        in_sig: Signature,
        d_img: usize,
        d_att: usize,
        out_sig: Signature,
        rng: &mut R,
    ) -> Self {
        let c0 = in_sig.0[0];
        let query = store.insert_normal(format!("{prefix}.query"), (c0, d_att), 1.0 / (c0 as f64).sqrt(), rng);
        let key = store.insert_normal(format!("{prefix}.key"), (d_img, d_att), 1.0 / (d_img as f64).sqrt(), rng);
        let value = store.insert_normal(format!("{prefix}.value"), (d_img, c0), 1.0 / (d_img as f64).sqrt(), rng);
        let gate_w = store.insert_normal(format!("{prefix}.gate_w"), (2 * c0, c0), 0.5 / (2.0 * c0 as f64).sqrt(), rng);
        let gate_b = store.insert_filled(format!("{prefix}.gate_b"), (1, c0), -1.0);
        let proj = EquiLinear::new(store, &format!("{prefix}.proj"), in_sig, out_sig, Some(0.0), Init::Normal { gain: 1.0 }, rng);
        Fem { in_sig, out_sig, query, key, value, gate_w, gate_b, proj }
    }

    /// `tokens` stacks `x.npos` groups of image tokens (`(npos * n) x d_img`).
    pub fn forward(&self, tape: &mut Tape, x: &TFeat, tokens: Var) -> TFeat {
        let vars = FemVars {
            query: tape.param(self.query),
            key: tape.param(self.key),
            value: tape.param(self.value),
            gate_w: tape.param(self.gate_w),
            gate_b: tape.param(self.gate_b),
        };
        let mixed = fuse_scalars(tape, x, tokens, &vars);
        self.proj.forward(tape, &mixed)
    }

    pub fn params(&self, store: &ParamStore) -> FemParams {
        FemParams {
            query: store.value(self.query).clone(),
            key: store.value(self.key).clone(),
            value: store.value(self.value).clone(),
            gate_w: store.value(self.gate_w).clone(),
            gate_b: store.value(self.gate_b).clone(),
            proj: self.proj.params(store),
        }
    }
}
