//! Observation types and the toy encoders that map them onto irreps.
//!
//! Positions enter the network centred on the point-cloud centroid and
//! multiplied by [`POSITION_SCALE`], so a 10 cm offset becomes a unit-length
//! degree-1 coefficient vector.

use nalgebra::Vector3;
use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::fusion::ImageTokens;
use crate::nn::{gate, EquiLinear, EquiLinearParams, Init, TFeat};
use crate::params::{ParamId, ParamStore};
use crate::so3::{gram_schmidt, l1_to_vector, solid_harmonics, vector_to_l1, IrrepFeature, IrrepSeq, Rotation, Signature};
use crate::tape::{Tape, Var};

/// Metres to network units.
pub const POSITION_SCALE: f64 = 10.0;
/// Outer radius of the radial shells (m).
pub const WORKSPACE_RADIUS: f64 = 0.3;
pub const N_SHELLS: usize = 8;
/// Weights per point: a constant channel followed by r, g, b.
pub const COLOR_CHANNELS: usize = 4;
pub const IMAGE_SIZE: usize = 32;
pub const N_IMAGE_TOKENS: usize = 4;
/// Pooled values per quadrant: 4 x 4 cells x 3 colors.
pub const PATCH_FEATURES: usize = 48;

/// Signature of the raw per-cloud expansion fed to the cloud encoder.
pub const fn expansion_signature() -> Signature {
    let c = COLOR_CHANNELS * N_SHELLS;
    Signature::new(c, c, c)
}

/// Signature of [`embed_proprio`]: gripper scalar, then position and two rotation columns.
pub const PROPRIO_SIG: Signature = Signature::new(1, 3, 0);

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub colors: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>, colors: Vec<[f64; 3]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Validation("point cloud is empty".into()));
        }
        if points.len() != colors.len() {
            return Err(Error::Validation(format!("{} points but {} colors", points.len(), colors.len())));
        }
        if points.iter().any(|p| !p.iter().all(|x| x.is_finite())) {
            return Err(Error::Validation("point cloud has non-finite coordinates".into()));
        }
        Ok(PointCloud { points, colors })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Vector3<f64> {
        self.points.iter().sum::<Vector3<f64>>() / self.points.len() as f64
    }

    pub fn rotated(&self, r: &Rotation) -> PointCloud {
        PointCloud { points: self.points.iter().map(|p| r.apply(p)).collect(), colors: self.colors.clone() }
    }

    pub fn translated(&self, t: &Vector3<f64>) -> PointCloud {
        PointCloud { points: self.points.iter().map(|p| p + t).collect(), colors: self.colors.clone() }
    }
}

/// Subtracts the mean point. Returns the centred cloud and the centroid.
pub fn normalize_cloud(pc: &PointCloud) -> (PointCloud, Vector3<f64>) {
    let c = pc.centroid();
    (pc.translated(&-c), c)
}

fn shell(k: usize, r: f64) -> f64 {
    let sigma = WORKSPACE_RADIUS / (N_SHELLS - 1) as f64;
    let mu = k as f64 * sigma;
    (-0.5 * ((r - mu) / sigma).powi(2)).exp()
}

/// Sum over points of `color x shell(|p|) x solid_harmonic_l(p)`.
///
/// Channel `c * N_SHELLS + k` pairs color weight `c` with shell `k`. Solid
/// harmonics carry a factor `|p|^l`, so a point at the origin contributes
/// nothing to the degree-1 and degree-2 blocks.
pub fn cloud_expansion(centered: &PointCloud) -> IrrepFeature {
    let mut f = IrrepFeature::zeros(expansion_signature());
    for (p, col) in centered.points.iter().zip(&centered.colors) {
        let r = p.norm();
        let q = p * POSITION_SCALE;
        let weights = [1.0, col[0], col[1], col[2]];
        let sh: Vec<Vec<f64>> = (0..3).map(|l| solid_harmonics(l, &q).expect("degree within range")).collect();
        for (c, wc) in weights.iter().enumerate() {
            for k in 0..N_SHELLS {
                let w = wc * shell(k, r);
                if w == 0.0 {
                    continue;
                }
                for (l, coeffs) in sh.iter().enumerate() {
                    let mut row = f.block_mut(l).row_mut(c * N_SHELLS + k);
                    for (m, y) in coeffs.iter().enumerate() {
                        row[m] += w * y;
                    }
                }
            }
        }
    }
    f
}

/// Equivariant cloud encoder: fixed expansion, one equivariant linear map and a gated nonlinearity.
#[derive(Clone, Debug)]
pub struct CloudEncoder {
    pub out_sig: Signature,
    lin: EquiLinear,
}

impl CloudEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, out_sig: Signature, rng: &mut R) -> Self {
        let pre = Signature::new(out_sig.0[0] + out_sig.gate_count(), out_sig.0[1], out_sig.0[2]);
        let lin = EquiLinear::new(store, prefix, expansion_signature(), pre, Some(0.0), Init::Normal { gain: 1.0 }, rng);
        CloudEncoder { out_sig, lin }
    }

    /// `expansion` holds one [`cloud_expansion`] per position.
    pub fn forward(&self, tape: &mut Tape, expansion: &TFeat) -> Result<TFeat> {
        let pre = self.lin.forward(tape, expansion);
        gate(tape, &pre)
    }

    pub fn params(&self, store: &ParamStore) -> EquiLinearParams {
        self.lin.params(store)
    }
}

/// Encodes an already centred cloud with explicit encoder weights.
pub fn encode_point_cloud(centered: &PointCloud, p: &EquiLinearParams) -> Result<IrrepFeature> {
    let pre = crate::nn::equi_linear(&cloud_expansion(centered), p)?;
    crate::nn::gated_nonlinearity(&pre)
}

/// An `h x w x 3` image with values in `[0, 1]`, row-major, channel last.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn zeros(height: usize, width: usize) -> Self {
        Image { height, width, data: vec![0.0; height * width * 3] }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * 3 + c] = v;
    }
}

/// Average-pools each image quadrant into `4 x 4` cells, giving one
/// [`PATCH_FEATURES`]-vector per quadrant in the order top-left, top-right,
/// bottom-left, bottom-right.
pub fn pool_image(img: &Image) -> Result<Array2<f64>> {
    if img.height != IMAGE_SIZE || img.width != IMAGE_SIZE || img.data.len() != IMAGE_SIZE * IMAGE_SIZE * 3 {
        return Err(Error::Validation(format!(
            "images must be {IMAGE_SIZE}x{IMAGE_SIZE}x3, got {}x{} with {} values",
            img.height,
            img.width,
            img.data.len()
        )));
    }
    let half = IMAGE_SIZE / 2;
    let cell = half / 4;
    let norm = 1.0 / (cell * cell) as f64;
    let mut out = Array2::zeros((N_IMAGE_TOKENS, PATCH_FEATURES));
    for q in 0..N_IMAGE_TOKENS {
        let (y0, x0) = ((q / 2) * half, (q % 2) * half);
        for cy in 0..4 {
            for cx in 0..4 {
                for c in 0..3 {
                    let mut acc = 0.0;
                    for dy in 0..cell {
                        for dx in 0..cell {
                            acc += img.get(y0 + cy * cell + dy, x0 + cx * cell + dx, c) as f64;
                        }
                    }
                    out[[q, (cy * 4 + cx) * 3 + c]] = acc * norm;
                }
            }
        }
    }
    Ok(out)
}

/// Dense map from pooled patches to tokens: `tokens = pooled W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEncoderParams {
    /// `PATCH_FEATURES x d`
    pub w: Array2<f64>,
    /// `1 x d`
    pub b: Array2<f64>,
}

pub fn encode_image(img: &Image, p: &ImageEncoderParams) -> Result<ImageTokens> {
    let pooled = pool_image(img)?;
    ImageTokens::new(pooled.dot(&p.w) + &p.b)
}

/// Image encoder with stored parameters. Keys: `{prefix}.w`, `{prefix}.b`.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub dim: usize,
    w: ParamId,
    b: ParamId,
}

impl ImageEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut R) -> Self {
        let w = store.insert_normal(format!("{prefix}.w"), (PATCH_FEATURES, dim), 1.0 / (PATCH_FEATURES as f64).sqrt(), rng);
        let b = store.insert_zeros(format!("{prefix}.b"), (1, dim));
        ImageEncoder { dim, w, b }
    }

    /// `pooled` stacks [`pool_image`] outputs of every batch element.
    pub fn forward(&self, tape: &mut Tape, pooled: Var) -> Var {
        let (w, b) = (tape.param(self.w), tape.param(self.b));
        let t = tape.matmul(pooled, w);
        tape.add_row(t, b)
    }

    pub fn params(&self, store: &ParamStore) -> ImageEncoderParams {
        ImageEncoderParams { w: store.value(self.w).clone(), b: store.value(self.b).clone() }
    }
}

/// End-effector state: position, first two rotation columns, gripper opening command.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProprioState {
    pub position: Vector3<f64>,
    pub rot_a: Vector3<f64>,
    pub rot_b: Vector3<f64>,
    pub gripper: f64,
}

impl ProprioState {
    pub fn from_rotation(position: Vector3<f64>, rot: &Rotation, gripper: f64) -> Self {
        ProprioState { position, rot_a: rot.column(0), rot_b: rot.column(1), gripper }
    }

    pub fn rotation(&self) -> Result<Rotation> {
        Rotation::from_two_columns(&self.rot_a, &self.rot_b)
    }

    /// Rotates position and orientation about the origin.
    pub fn rotated(&self, r: &Rotation) -> Self {
        ProprioState { position: r.apply(&self.position), rot_a: r.apply(&self.rot_a), rot_b: r.apply(&self.rot_b), gripper: self.gripper }
    }
}

/// Fixed-horizon sequence of end-effector targets.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionChunk {
    pub steps: Vec<ProprioState>,
}

impl ActionChunk {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn rotated(&self, r: &Rotation) -> Self {
        ActionChunk { steps: self.steps.iter().map(|s| s.rotated(r)).collect() }
    }
}

/// Gripper as one scalar; centred scaled position and both rotation columns as degree-1 channels.
pub fn embed_proprio(s: &ProprioState, centroid: &Vector3<f64>) -> Result<IrrepFeature> {
    gram_schmidt(&s.rot_a, &s.rot_b)?;
    let mut f = IrrepFeature::zeros(PROPRIO_SIG);
    f.block_mut(0)[[0, 0]] = s.gripper;
    let rows = [(s.position - centroid) * POSITION_SCALE, s.rot_a, s.rot_b];
    for (i, v) in rows.iter().enumerate() {
        let c = vector_to_l1(v);
        for m in 0..3 {
            f.block_mut(1)[[i, m]] = c[m];
        }
    }
    Ok(f)
}

pub fn embed_action_chunk(a: &ActionChunk, centroid: &Vector3<f64>) -> Result<IrrepSeq> {
    let frames = a.steps.iter().map(|s| embed_proprio(s, centroid)).collect::<Result<Vec<_>>>()?;
    IrrepSeq::from_frames(&frames)
}

/// Left inverse of [`embed_action_chunk`]. Rotation columns are
/// re-orthonormalised; a degenerate pair is passed through unchanged, so
/// [`ProprioState::rotation`] reports it to whoever executes the action.
pub fn decode_action_chunk(f: &IrrepSeq, centroid: &Vector3<f64>) -> Result<ActionChunk> {
    let sig = f.signature();
    if sig.0[0] < PROPRIO_SIG.0[0] || sig.0[1] < PROPRIO_SIG.0[1] {
        return Err(Error::SignatureMismatch(format!("cannot decode actions from {sig}")));
    }
    let (b0, b1) = (f.block(0), f.block(1));
    let steps = (0..f.len())
        .map(|t| {
            let col = |i: usize| l1_to_vector(&[b1[[i, 3 * t]], b1[[i, 3 * t + 1]], b1[[i, 3 * t + 2]]]);
            let (a, b) = (col(1), col(2));
            let (rot_a, rot_b) = gram_schmidt(&a, &b).unwrap_or((a, b));
            ProprioState { position: col(0) / POSITION_SCALE + centroid, rot_a, rot_b, gripper: b0[[0, t]] }
        })
        .collect();
    Ok(ActionChunk { steps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::so3::random_rotation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_point_normalises_to_origin() {
        let p = Vector3::new(0.1, -0.2, 0.3);
        let pc = PointCloud::new(vec![p], vec![[1.0, 0.0, 0.0]]).unwrap();
        let (c, centroid) = normalize_cloud(&pc);
        assert_eq!(c.points[0], Vector3::zeros());
        assert_eq!(centroid, p);
        let f = cloud_expansion(&c);
        assert!(f.block(1).iter().chain(f.block(2).iter()).all(|&x| x == 0.0));
    }

    #[test]
    fn proprio_zero_vectors_fail_gram_schmidt() {
        let s = ProprioState { position: Vector3::zeros(), rot_a: Vector3::zeros(), rot_b: Vector3::zeros(), gripper: 0.5 };
        assert!(embed_proprio(&s, &Vector3::zeros()).is_err());
    }

    #[test]
    fn proprio_layout() {
        let s = ProprioState { position: Vector3::zeros(), rot_a: Vector3::x(), rot_b: Vector3::y(), gripper: 0.5 };
        let f = embed_proprio(&s, &Vector3::zeros()).unwrap();
        assert_eq!(f.block(0)[[0, 0]], 0.5);
        assert!(f.block(1).row(0).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn wrong_image_size() {
        assert!(pool_image(&Image::zeros(16, 16)).is_err());
    }

    #[test]
    fn zero_chunk_decodes_to_centroid() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = random_rotation(&mut rng);
        let mut seq = IrrepSeq::zeros(PROPRIO_SIG, 3);
        for t in 0..3 {
            for (i, v) in [r.column(0), r.column(1)].iter().enumerate() {
                let c = vector_to_l1(v);
                for m in 0..3 {
                    seq.block_mut(1)[[i + 1, 3 * t + m]] = c[m];
                }
            }
        }
        let c = Vector3::new(0.3, 0.1, -0.2);
        let a = decode_action_chunk(&seq, &c).unwrap();
        assert!(a.steps.iter().all(|s| (s.position - c).norm() < 1e-15));
    }
}
