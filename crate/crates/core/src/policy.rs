//! Velocity networks conditioned on observations.
//!
//! Two variants share one interface: the equivariant model (cloud encoder,
//! image tokens fused into the scalar block, temporal U-Net) and an
//! unconstrained MLP over flattened coordinates.

use nalgebra::Vector3;
use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::Fem;
use crate::nn::{time_embedding_batch, EquiLinear, EquiUNet, Init, TFeat, UNetConfig};
use crate::params::{ParamId, ParamStore};
use crate::perception::{
    cloud_expansion, embed_proprio, normalize_cloud, pool_image, CloudEncoder, Image, ImageEncoder, PointCloud,
    ProprioState, N_IMAGE_TOKENS, POSITION_SCALE, PROPRIO_SIG,
};
use crate::so3::{degree_dim, IrrepFeature, IrrepSeq, Signature};
use crate::tape::{Padding, Tape, Var};

/// Signature of one action frame: gripper scalar, position and two rotation columns.
pub const ACTION_SIG: Signature = PROPRIO_SIG;

/// Everything the policy observes at one control step.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub cloud: PointCloud,
    pub image: Image,
    pub proprio: ProprioState,
}

/// Parameter-free preprocessing of one observation.
#[derive(Clone, Debug)]
pub struct PreparedObs {
    pub centroid: Vector3<f64>,
    pub expansion: IrrepFeature,
    pub pooled: Array2<f64>,
    pub proprio: IrrepFeature,
    /// Centred, scaled point coordinates followed by colors, then the proprio embedding.
    pub flat: Vec<f64>,
}

pub fn prepare(obs: &Observation) -> Result<PreparedObs> {
    let (centered, centroid) = normalize_cloud(&obs.cloud);
    let expansion = cloud_expansion(&centered);
    let pooled = pool_image(&obs.image)?;
    let proprio = embed_proprio(&obs.proprio, &centroid)?;
    let mut flat = Vec::with_capacity(centered.len() * 6 + PROPRIO_SIG.dim());
    for p in &centered.points {
        flat.extend((p * POSITION_SCALE).iter());
    }
    for c in &centered.colors {
        flat.extend(c.iter());
    }
    flat.extend(proprio.flatten());
    Ok(PreparedObs { centroid, expansion, pooled, proprio, flat })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquiPolicyConfig {
    pub horizon: usize,
    pub cloud_sig: Signature,
    pub fused_sig: Signature,
    pub fusion: bool,
    pub image_dim: usize,
    pub attention_dim: usize,
    pub invariant_channels: usize,
    pub time_dim: usize,
    pub widths: Vec<Signature>,
    pub radius: usize,
    pub factor: usize,
    pub padding: Padding,
    pub pos_channels: usize,
    pub zero_head: bool,
}

impl Default for EquiPolicyConfig {
    fn default() -> Self {
        EquiPolicyConfig {
            horizon: 16,
            cloud_sig: Signature::new(16, 8, 4),
            fused_sig: Signature::new(24, 12, 4),
            fusion: true,
            image_dim: 16,
            attention_dim: 16,
            invariant_channels: 12,
            time_dim: 16,
            widths: vec![Signature::new(16, 8, 4), Signature::new(24, 12, 6), Signature::new(32, 16, 8)],
            radius: 2,
            factor: 2,
            padding: Padding::Replicate,
            pos_channels: 3,
            zero_head: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpPolicyConfig {
    pub horizon: usize,
    pub n_points: usize,
    pub hidden: usize,
    pub layers: usize,
    pub image_dim: usize,
    pub time_dim: usize,
    pub zero_head: bool,
}

impl Default for MlpPolicyConfig {
    fn default() -> Self {
        MlpPolicyConfig { horizon: 16, n_points: 40, hidden: 256, layers: 2, image_dim: 16, time_dim: 16, zero_head: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelConfig {
    Equivariant(EquiPolicyConfig),
    MlpBaseline(MlpPolicyConfig),
}

impl ModelConfig {
    pub fn horizon(&self) -> usize {
        match self {
            ModelConfig::Equivariant(c) => c.horizon,
            ModelConfig::MlpBaseline(c) => c.horizon,
        }
    }
}

/// Observation conditioning on a tape.
#[derive(Clone, Copy, Debug)]
pub enum TapeCond {
    Equi(TFeat),
    Flat(Var),
}

/// Observation conditioning detached from any tape.
#[derive(Clone, Debug)]
pub enum CondValues {
    Equi([Array2<f64>; 3], usize),
    Flat(Array2<f64>),
}

impl TapeCond {
    pub fn values(&self, tape: &Tape) -> CondValues {
        match self {
            TapeCond::Equi(f) => CondValues::Equi(f.values(tape), f.npos),
            TapeCond::Flat(v) => CondValues::Flat(tape.value(*v).clone()),
        }
    }
}

impl CondValues {
    pub fn to_tape(&self, tape: &mut Tape) -> TapeCond {
        match self {
            CondValues::Equi(b, n) => TapeCond::Equi(TFeat::constant(tape, b, *n)),
            CondValues::Flat(a) => TapeCond::Flat(tape.constant(a.clone())),
        }
    }

    pub fn batch(&self) -> usize {
        match self {
            CondValues::Equi(_, n) => *n,
            CondValues::Flat(a) => a.ncols(),
        }
    }
}

/// Stacks features of several positions side by side.
pub(crate) fn stack_features<'a>(fs: impl Iterator<Item = &'a IrrepFeature>) -> [Array2<f64>; 3] {
    let fs: Vec<&IrrepFeature> = fs.collect();
    std::array::from_fn(|l| {
        let views: Vec<_> = fs.iter().map(|f| f.block(l).view()).collect();
        ndarray::concatenate(Axis(1), &views).expect("features share a signature")
    })
}

/// Concatenates sequences along time into one packed batch.
pub fn pack_batch(seqs: &[IrrepSeq]) -> Result<IrrepSeq> {
    let first = seqs.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
    let blocks = std::array::from_fn(|l| {
        let views: Vec<_> = seqs.iter().map(|s| s.block(l).view()).collect();
        ndarray::concatenate(Axis(1), &views).expect("sequences share a signature")
    });
    IrrepSeq::new(blocks, first.len() * seqs.len())
}

/// Splits a packed batch into sequences of `len` frames.
pub fn unpack_batch(seq: &IrrepSeq, len: usize) -> Vec<IrrepSeq> {
    let n = seq.len() / len;
    (0..n)
        .map(|b| {
            let blocks = std::array::from_fn(|l| {
                let w = degree_dim(l) * len;
                seq.block(l).slice(ndarray::s![.., b * w..(b + 1) * w]).to_owned()
            });
            IrrepSeq::new(blocks, len).expect("slice widths match")
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct EquiPolicy {
    pub cfg: EquiPolicyConfig,
    cloud: CloudEncoder,
    image: Option<ImageEncoder>,
    fem: Option<Fem>,
    invariants: Option<EquiLinear>,
    unet: EquiUNet,
}

impl EquiPolicy {
    pub fn new(store: &mut ParamStore, cfg: EquiPolicyConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let cloud = CloudEncoder::new(store, "cloud", cfg.cloud_sig, rng);
        let joined = cfg.cloud_sig.concat(&PROPRIO_SIG);
        let (image, fem, fused) = if cfg.fusion {
            let image = ImageEncoder::new(store, "image", cfg.image_dim, rng);
            let fem = Fem::new(store, "fem", joined, cfg.image_dim, cfg.attention_dim, cfg.fused_sig, rng);
            (Some(image), Some(fem), cfg.fused_sig)
        } else {
            (None, None, joined)
        };
        let invariants = (cfg.invariant_channels > 0 && fused.0[1] > 0).then(|| {
            let out = Signature::new(0, cfg.invariant_channels, 0);
            EquiLinear::new(store, "invariants", Signature::new(0, fused.0[1], 0), out, None, Init::Normal { gain: 1.0 }, rng)
        });
        let n_inv = invariants.as_ref().map_or(0, |_| cfg.invariant_channels);
        let ucfg = UNetConfig {
            horizon: cfg.horizon,
            action_sig: ACTION_SIG,
            cond_sig: fused.concat(&Signature::new(n_inv, 0, 0)),
            time_dim: cfg.time_dim,
            widths: cfg.widths.clone(),
            radius: cfg.radius,
            factor: cfg.factor,
            padding: cfg.padding,
            pos_channels: cfg.pos_channels,
            zero_head: cfg.zero_head,
        };
        let unet = EquiUNet::new(store, "unet", ucfg, rng)?;
        Ok(EquiPolicy { cfg, cloud, image, fem, invariants, unet })
    }

    pub fn unet(&self) -> &EquiUNet {
        &self.unet
    }

    /// Observation feature on the tape, one position per batch element.
    pub fn encode(&self, tape: &mut Tape, obs: &[&PreparedObs]) -> Result<TFeat> {
        let b = obs.len();
        let exp = TFeat::constant(tape, &stack_features(obs.iter().map(|o| &o.expansion)), b);
        let cloud = self.cloud.forward(tape, &exp)?;
        let prop = TFeat::constant(tape, &stack_features(obs.iter().map(|o| &o.proprio)), b);
        let joined = cloud.concat(tape, &prop);
        let fused = match (&self.image, &self.fem) {
            (Some(image), Some(fem)) => {
                let views: Vec<_> = obs.iter().map(|o| o.pooled.view()).collect();
                let pooled = tape.constant(ndarray::concatenate(Axis(0), &views).expect("same patch width"));
                let tokens = image.forward(tape, pooled);
                fem.forward(tape, &joined, tokens)
            }
            _ => joined,
        };
        Ok(match (&self.invariants, fused.blocks[1]) {
            (Some(inv), Some(l1)) => {
                let v = inv.forward(tape, &TFeat { blocks: [None, Some(l1), None], npos: b });
                let norms = tape.group_norm(v.blocks[1].expect("invariant channels"), 3, 1e-6);
                fused.concat(tape, &TFeat::scalars(norms, b))
            }
            _ => fused,
        })
    }
}

#[derive(Clone, Debug)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

impl Dense {
    fn new(store: &mut ParamStore, prefix: &str, input: usize, output: usize, zero: bool, rng: &mut ChaCha8Rng) -> Self {
        let w = if zero {
            store.insert_zeros(format!("{prefix}.w"), (output, input))
        } else {
            store.insert_normal(format!("{prefix}.w"), (output, input), 1.0 / (input as f64).sqrt(), rng)
        };
        let b = store.insert_zeros(format!("{prefix}.b"), (output, 1));
        Dense { w, b }
    }

    fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let (w, b) = (tape.param(self.w), tape.param(self.b));
        let y = tape.matmul(w, x);
        tape.add_col(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct MlpPolicy {
    pub cfg: MlpPolicyConfig,
    image: ImageEncoder,
    layers: Vec<Dense>,
}

impl MlpPolicy {
    fn obs_dim(cfg: &MlpPolicyConfig) -> usize {
        cfg.n_points * 6 + PROPRIO_SIG.dim() + N_IMAGE_TOKENS * cfg.image_dim
    }

    fn action_dim(cfg: &MlpPolicyConfig) -> usize {
        cfg.horizon * ACTION_SIG.dim()
    }

    pub fn new(store: &mut ParamStore, cfg: MlpPolicyConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        if cfg.layers == 0 || cfg.hidden == 0 {
            return Err(Error::Config("the MLP needs at least one hidden layer".into()));
        }
        let image = ImageEncoder::new(store, "image", cfg.image_dim, rng);
        let mut input = Self::obs_dim(&cfg) + cfg.time_dim + Self::action_dim(&cfg);
        let mut layers = Vec::new();
        for i in 0..cfg.layers {
            layers.push(Dense::new(store, &format!("mlp.fc{i}"), input, cfg.hidden, false, rng));
            input = cfg.hidden;
        }
        layers.push(Dense::new(store, "mlp.out", input, Self::action_dim(&cfg), cfg.zero_head, rng));
        Ok(MlpPolicy { cfg, image, layers })
    }

    pub fn encode(&self, tape: &mut Tape, obs: &[&PreparedObs]) -> Result<Var> {
        let b = obs.len();
        let d = self.cfg.n_points * 6 + PROPRIO_SIG.dim();
        if let Some(o) = obs.iter().find(|o| o.flat.len() != d) {
            return Err(Error::Shape(format!(
                "the MLP was built for {} points but got an observation with {} flat values (expected {d})",
                self.cfg.n_points,
                o.flat.len()
            )));
        }
        let flat = Array2::from_shape_fn((d, b), |(i, j)| obs[j].flat[i]);
        let flat = tape.constant(flat);
        let views: Vec<_> = obs.iter().map(|o| o.pooled.view()).collect();
        let pooled = tape.constant(ndarray::concatenate(Axis(0), &views).expect("same patch width"));
        let tokens = self.image.forward(tape, pooled);
        let k = self.cfg.image_dim;
        let rows = N_IMAGE_TOKENS * k;
        let mut index = vec![0; rows * b];
        for kk in 0..N_IMAGE_TOKENS {
            for dd in 0..k {
                for j in 0..b {
                    index[(kk * k + dd) * b + j] = (j * N_IMAGE_TOKENS + kk) * k + dd;
                }
            }
        }
        let tok = tape.gather(tokens, index, (rows, b));
        Ok(tape.concat_rows(&[flat, tok]))
    }

    fn velocity(&self, tape: &mut Tape, cond: Var, x: &TFeat, t: &[f64]) -> Result<TFeat> {
        let (b, h) = (t.len(), self.cfg.horizon);
        if x.npos != b * h {
            return Err(Error::Shape(format!("MLP got {} positions for batch {b} x horizon {h}", x.npos)));
        }
        let (Some(l0), Some(l1)) = (x.blocks[0], x.blocks[1]) else {
            return Err(Error::SignatureMismatch("MLP input lacks action channels".into()));
        };
        let bh = b * h;
        let idx0: Vec<usize> = (0..h).flat_map(|tt| (0..b).map(move |j| j * h + tt)).collect();
        let x0 = tape.gather(l0, idx0, (h, b));
        let mut idx1 = vec![0; 9 * h * b];
        for tt in 0..h {
            for i in 0..3 {
                for m in 0..3 {
                    for j in 0..b {
                        idx1[((tt * 3 + i) * 3 + m) * b + j] = i * bh * 3 + (j * h + tt) * 3 + m;
                    }
                }
            }
        }
        let x1 = tape.gather(l1, idx1, (9 * h, b));
        let temb = tape.constant(time_embedding_batch(t, self.cfg.time_dim));
        let mut z = tape.concat_rows(&[cond, temb, x0, x1]);
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            z = layer.forward(tape, z);
            if i < last {
                z = tape.silu(z);
            }
        }
        let back0: Vec<usize> = (0..bh).map(|p| (p % h) * b + p / h).collect();
        let y0 = tape.gather(z, back0, (1, bh));
        let mut back1 = vec![0; 3 * bh * 3];
        for i in 0..3 {
            for p in 0..bh {
                let (j, tt) = (p / h, p % h);
                for m in 0..3 {
                    back1[i * bh * 3 + p * 3 + m] = (h + (tt * 3 + i) * 3 + m) * b + j;
                }
            }
        }
        let y1 = tape.gather(z, back1, (3, bh * 3));
        Ok(TFeat { blocks: [Some(y0), Some(y1), None], npos: bh })
    }
}

/// A velocity network of either kind.
#[derive(Clone, Debug)]
pub enum Model {
    Equivariant(EquiPolicy),
    MlpBaseline(MlpPolicy),
}

impl Model {
    /// Builds the network and its freshly initialised parameters.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<(Model, ParamStore)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let model = match cfg {
            ModelConfig::Equivariant(c) => Model::Equivariant(EquiPolicy::new(&mut store, c.clone(), &mut rng)?),
            ModelConfig::MlpBaseline(c) => Model::MlpBaseline(MlpPolicy::new(&mut store, c.clone(), &mut rng)?),
        };
        Ok((model, store))
    }

    pub fn horizon(&self) -> usize {
        match self {
            Model::Equivariant(p) => p.cfg.horizon,
            Model::MlpBaseline(p) => p.cfg.horizon,
        }
    }

    pub fn is_equivariant(&self) -> bool {
        matches!(self, Model::Equivariant(_))
    }

    pub fn encode(&self, tape: &mut Tape, obs: &[&PreparedObs]) -> Result<TapeCond> {
        Ok(match self {
            Model::Equivariant(p) => TapeCond::Equi(p.encode(tape, obs)?),
            Model::MlpBaseline(p) => TapeCond::Flat(p.encode(tape, obs)?),
        })
    }

    /// Batched velocity for packed noisy chunks `x` at flow times `t`.
    pub fn velocity(&self, tape: &mut Tape, cond: &TapeCond, x: &TFeat, t: &[f64]) -> Result<TFeat> {
        match (self, cond) {
            (Model::Equivariant(p), TapeCond::Equi(c)) => p.unet.forward(tape, x, t, c),
            (Model::MlpBaseline(p), TapeCond::Flat(c)) => p.velocity(tape, *c, x, t),
            _ => Err(Error::Config("conditioning does not match the model kind".into())),
        }
    }

    /// Conditioning values for a batch of observations.
    pub fn condition(&self, store: &ParamStore, obs: &[&PreparedObs]) -> Result<CondValues> {
        let mut tape = Tape::with_params(store);
        let c = self.encode(&mut tape, obs)?;
        Ok(c.values(&tape))
    }

    /// Velocity on plain values; `x` packs `cond.batch()` chunks.
    pub fn velocity_value(&self, store: &ParamStore, cond: &CondValues, x: &IrrepSeq, t: f64) -> Result<IrrepSeq> {
        let b = cond.batch();
        let mut tape = Tape::with_params(store);
        let c = cond.to_tape(&mut tape);
        let xv = TFeat::from_seq(&mut tape, x, false);
        let out = self.velocity(&mut tape, &c, &xv, &vec![t; b])?;
        Ok(out.to_seq(&tape))
    }
}
