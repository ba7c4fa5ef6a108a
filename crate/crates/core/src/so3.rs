//! Rotations, real spherical harmonics, Wigner-D blocks and irrep features.
//!
//! Conventions, fixed once for the whole crate:
//!
//! * Real spherical harmonics are ordered by `m = -l..=l`. For `l = 1` this is
//!   the Cartesian order `(y, z, x)`, so a 3-vector `v` is stored as the
//!   coefficient vector `P v` with `P` the cyclic permutation `xyz -> yzx`.
//! * Wigner blocks act on the left: `Y_l(R r) = D_l(R) Y_l(r)`, equivalently
//!   `Y_l(R^-1 r) = D_l(R)^T Y_l(r)`. With this side `D(R1 R2) = D(R1) D(R2)`,
//!   and rotating a point cloud by `R` maps its coefficients by `D(R)`.
//! * Feature blocks are stored as `channels x (2l+1)` matrices, one row per
//!   channel, so the action on a block is `B -> B D^T`.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Highest degree supported by the closed-form constructions.
pub const L_MAX: usize = 2;

/// Number of coefficients of degree `l`.
#[inline]
pub const fn degree_dim(l: usize) -> usize {
    2 * l + 1
}

const ORTHO_TOL: f64 = 1e-12;

/// A proper rotation matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Validates orthogonality and unit determinant.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        let err = (m.transpose() * m - Matrix3::identity()).abs().max();
        if err > ORTHO_TOL {
            return Err(Error::Validation(format!(
                "matrix is not orthogonal (max |R^T R - I| = {err:e})"
            )));
        }
        let det = m.determinant();
        if (det - 1.0).abs() > ORTHO_TOL {
            return Err(Error::Validation(format!("determinant {det} is not +1")));
        }
        Ok(Rotation(m))
    }

    /// Rodrigues rotation about a unit axis.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Result<Self> {
        let n = axis.norm();
        if !(1.0 - 1e-9..=1.0 + 1e-9).contains(&n) {
            return Err(Error::Validation(format!("rotation axis has norm {n}, expected 1")));
        }
        let k = Matrix3::new(
            0.0, -axis.z, axis.y, //
            axis.z, 0.0, -axis.x, //
            -axis.y, axis.x, 0.0,
        );
        let m = Matrix3::identity() + k * angle.sin() + k * k * (1.0 - angle.cos());
        Ok(Rotation(m))
    }

    /// Rotation about the z axis.
    pub fn about_z(angle: f64) -> Self {
        Self::from_axis_angle(Vector3::z(), angle).expect("unit axis")
    }

    pub fn about_y(angle: f64) -> Self {
        Self::from_axis_angle(Vector3::y(), angle).expect("unit axis")
    }

    pub fn about_x(angle: f64) -> Self {
        Self::from_axis_angle(Vector3::x(), angle).expect("unit axis")
    }

    /// Rotation with the given first two columns, completed by Gram-Schmidt
    /// and a cross product.
    pub fn from_two_columns(a: &Vector3<f64>, b: &Vector3<f64>) -> Result<Self> {
        let (c0, c1) = gram_schmidt(a, b)?;
        let c2 = c0.cross(&c1);
        Ok(Rotation(Matrix3::from_columns(&[c0, c1, c2])))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn column(&self, i: usize) -> Vector3<f64> {
        self.0.column(i).into_owned()
    }

    pub fn inverse(&self) -> Self {
        Rotation(self.0.transpose())
    }

    /// `self * other` (apply `other` first).
    pub fn compose(&self, other: &Rotation) -> Self {
        Rotation(self.0 * other.0)
    }

    pub fn apply(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }
}

/// Orthonormalizes two vectors. Fails if they are (nearly) degenerate.
pub fn gram_schmidt(a: &Vector3<f64>, b: &Vector3<f64>) -> Result<(Vector3<f64>, Vector3<f64>)> {
    const DEGENERATE: f64 = 1e-9;
    let na = a.norm();
    if !(na > DEGENERATE) {
        return Err(Error::Validation("first rotation column is degenerate".into()));
    }
    let c0 = a / na;
    let b_perp = b - c0 * c0.dot(b);
    let nb = b_perp.norm();
    if !(nb > DEGENERATE) {
        return Err(Error::Validation("second rotation column is degenerate".into()));
    }
    Ok((c0, b_perp / nb))
}

/// Haar-uniform rotation from a uniform unit quaternion.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Rotation {
    let u1: f64 = rng.random();
    let u2: f64 = rng.random();
    let u3: f64 = rng.random();
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let (x, y) = (a * (2.0 * PI * u2).sin(), a * (2.0 * PI * u2).cos());
    let (z, w) = (b * (2.0 * PI * u3).sin(), b * (2.0 * PI * u3).cos());
    let m = Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - z * w),
        2.0 * (x * z + y * w),
        2.0 * (x * y + z * w),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - x * w),
        2.0 * (x * z - y * w),
        2.0 * (y * z + x * w),
        1.0 - 2.0 * (x * x + y * y),
    );
    Rotation(m)
}

const Y0: f64 = 0.282_094_791_773_878_14; // 1 / (2 sqrt(pi))

fn y1_norm() -> f64 {
    (3.0 / (4.0 * PI)).sqrt()
}

fn y2_norm() -> f64 {
    (15.0 / PI).sqrt() / (2.0 * std::f64::consts::SQRT_2)
}

/// Cartesian (x, y, z) -> degree-1 coefficient order (y, z, x).
pub fn vector_to_l1(v: &Vector3<f64>) -> [f64; 3] {
    [v.y, v.z, v.x]
}

/// Inverse of [`vector_to_l1`].
pub fn l1_to_vector(c: &[f64]) -> Vector3<f64> {
    Vector3::new(c[2], c[0], c[1])
}

/// Solid harmonics `|v|^l Y_l(v / |v|)`, valid for any vector including zero.
pub fn solid_harmonics(degree: usize, v: &Vector3<f64>) -> Result<Vec<f64>> {
    let (x, y, z) = (v.x, v.y, v.z);
    match degree {
        0 => Ok(vec![Y0]),
        1 => {
            let c = y1_norm();
            Ok(vec![c * y, c * z, c * x])
        }
        2 => {
            let c = y2_norm();
            let r2 = std::f64::consts::SQRT_2;
            Ok(vec![
                c * r2 * x * y,
                c * r2 * y * z,
                c * (2.0 * z * z - x * x - y * y) / 6f64.sqrt(),
                c * r2 * x * z,
                c * (x * x - y * y) / r2,
            ])
        }
        d => Err(Error::UnsupportedDegree { degree: d, max: L_MAX }),
    }
}

/// Real spherical harmonics of the given degree at a unit direction.
pub fn eval_real_sh(degree: usize, direction: &Vector3<f64>) -> Result<Vec<f64>> {
    if degree > L_MAX {
        return Err(Error::UnsupportedDegree { degree, max: L_MAX });
    }
    let n = direction.norm();
    if (n - 1.0).abs() > 1e-9 {
        return Err(Error::Validation(format!("direction has norm {n}, expected 1")));
    }
    solid_harmonics(degree, direction)
}

/// Frobenius-orthonormal basis of traceless symmetric 3x3 matrices matching
/// the degree-2 harmonic order.
fn quadrupole_basis() -> [Matrix3<f64>; 5] {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let s6 = 6f64.sqrt();
    [
        Matrix3::new(0.0, h, 0.0, h, 0.0, 0.0, 0.0, 0.0, 0.0),
        Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, h, 0.0, h, 0.0),
        Matrix3::new(-1.0 / s6, 0.0, 0.0, 0.0, -1.0 / s6, 0.0, 0.0, 0.0, 2.0 / s6),
        Matrix3::new(0.0, 0.0, h, 0.0, 0.0, 0.0, h, 0.0, 0.0),
        Matrix3::new(h, 0.0, 0.0, 0.0, -h, 0.0, 0.0, 0.0, 0.0),
    ]
}

/// Block-diagonal representation `{D_l(R)}` for `l <= lmax`.
#[derive(Clone, Debug, PartialEq)]
pub struct WignerBlocks {
    blocks: Vec<Array2<f64>>,
}

impl WignerBlocks {
    pub fn lmax(&self) -> usize {
        self.blocks.len() - 1
    }

    pub fn block(&self, l: usize) -> Option<&Array2<f64>> {
        self.blocks.get(l)
    }

    pub fn identity(lmax: usize) -> Self {
        WignerBlocks { blocks: (0..=lmax).map(|l| Array2::eye(degree_dim(l))).collect() }
    }
}

/// Closed-form Wigner blocks: `D_1` is `R` in `(y, z, x)` order, `D_2` is the
/// induced action on traceless symmetric matrices.
pub fn wigner_blocks(rotation: &Rotation, lmax: usize) -> Result<WignerBlocks> {
    if lmax > L_MAX {
        return Err(Error::UnsupportedDegree { degree: lmax, max: L_MAX });
    }
    let r = rotation.matrix();
    let mut blocks = vec![Array2::from_elem((1, 1), 1.0)];
    if lmax >= 1 {
        const PERM: [usize; 3] = [1, 2, 0];
        blocks.push(Array2::from_shape_fn((3, 3), |(i, j)| r[(PERM[i], PERM[j])]));
    }
    if lmax >= 2 {
        let basis = quadrupole_basis();
        let rotated: Vec<Matrix3<f64>> = basis.iter().map(|s| r * s * r.transpose()).collect();
        blocks.push(Array2::from_shape_fn((5, 5), |(m, n)| basis[m].component_mul(&rotated[n]).sum()));
    }
    Ok(WignerBlocks { blocks })
}

/// Channel counts per degree `[c0, c1, c2]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Signature(pub [usize; 3]);

impl Signature {
    pub const fn new(c0: usize, c1: usize, c2: usize) -> Self {
        Signature([c0, c1, c2])
    }

    #[inline]
    pub fn channels(&self, l: usize) -> usize {
        self.0[l]
    }

    /// Coefficients per position.
    pub fn dim(&self) -> usize {
        (0..3).map(|l| self.0[l] * degree_dim(l)).sum()
    }

    pub fn concat(&self, other: &Signature) -> Signature {
        Signature([self.0[0] + other.0[0], self.0[1] + other.0[1], self.0[2] + other.0[2]])
    }

    pub fn max_degree(&self) -> Option<usize> {
        (0..3).rev().find(|&l| self.0[l] > 0)
    }

    /// Number of gate scalars needed to gate every `l > 0` channel.
    pub fn gate_count(&self) -> usize {
        self.0[1] + self.0[2]
    }
}

impl std::fmt::Display for Signature {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x0e+{}x1+{}x2", self.0[0], self.0[1], self.0[2])
    }
}

fn check_blocks(blocks: &[Array2<f64>; 3], positions: usize) -> Result<()> {
    for (l, b) in blocks.iter().enumerate() {
        if b.ncols() != positions * degree_dim(l) {
            return Err(Error::Shape(format!(
                "degree-{l} block has {} columns, expected {}",
                b.ncols(),
                positions * degree_dim(l)
            )));
        }
    }
    Ok(())
}

/// Rotates a packed block of shape `(channels, positions * (2l+1))`.
fn rotate_block(block: &Array2<f64>, d: &Array2<f64>) -> Array2<f64> {
    let w = d.nrows();
    let (c, cols) = block.dim();
    if c == 0 || cols == 0 {
        return block.clone();
    }
    let flat = block
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((c * cols / w, w))
        .expect("contiguous block");
    flat.dot(&d.t()).into_shape_with_order((c, cols)).expect("same size")
}

fn check_coverage(sig: &Signature, d: &WignerBlocks) -> Result<()> {
    if let Some(l) = sig.max_degree() {
        if l > d.lmax() {
            return Err(Error::SignatureMismatch(format!(
                "feature has degree {l} but Wigner blocks stop at {}",
                d.lmax()
            )));
        }
    }
    Ok(())
}

/// A single equivariant feature: one `channels x (2l+1)` block per degree.
#[derive(Clone, Debug, PartialEq)]
pub struct IrrepFeature {
    blocks: [Array2<f64>; 3],
}

impl IrrepFeature {
    pub fn new(blocks: [Array2<f64>; 3]) -> Result<Self> {
        check_blocks(&blocks, 1)?;
        Ok(IrrepFeature { blocks })
    }

    pub fn zeros(sig: Signature) -> Self {
        IrrepFeature { blocks: std::array::from_fn(|l| Array2::zeros((sig.0[l], degree_dim(l)))) }
    }

    pub fn random<R: Rng + ?Sized>(sig: Signature, rng: &mut R) -> Self {
        IrrepFeature { blocks: std::array::from_fn(|l| random_block(sig.0[l], degree_dim(l), rng)) }
    }

    /// Scalar-only feature from a vector of invariants.
    pub fn scalars(values: &[f64]) -> Self {
        let mut f = IrrepFeature::zeros(Signature::new(values.len(), 0, 0));
        f.blocks[0].column_mut(0).assign(&ndarray::ArrayView1::from(values));
        f
    }

    pub fn signature(&self) -> Signature {
        Signature(std::array::from_fn(|l| self.blocks[l].nrows()))
    }

    pub fn block(&self, l: usize) -> &Array2<f64> {
        &self.blocks[l]
    }

    pub fn block_mut(&mut self, l: usize) -> &mut Array2<f64> {
        &mut self.blocks[l]
    }

    pub fn blocks(&self) -> &[Array2<f64>; 3] {
        &self.blocks
    }

    pub fn into_blocks(self) -> [Array2<f64>; 3] {
        self.blocks
    }

    /// Per-degree channel concatenation.
    pub fn concat(&self, other: &IrrepFeature) -> IrrepFeature {
        IrrepFeature { blocks: std::array::from_fn(|l| concat_rows(&self.blocks[l], &other.blocks[l])) }
    }

    pub fn add(&self, other: &IrrepFeature) -> Result<IrrepFeature> {
        same_signature(self.signature(), other.signature())?;
        Ok(IrrepFeature { blocks: std::array::from_fn(|l| &self.blocks[l] + &other.blocks[l]) })
    }

    pub fn scale(&self, s: f64) -> IrrepFeature {
        IrrepFeature { blocks: std::array::from_fn(|l| &self.blocks[l] * s) }
    }

    pub fn norm(&self) -> f64 {
        self.blocks.iter().map(|b| b.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt()
    }

    /// Maximum absolute coefficient difference.
    pub fn max_abs_diff(&self, other: &IrrepFeature) -> f64 {
        max_abs_diff(&self.blocks, &other.blocks)
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.blocks.iter().flat_map(|b| b.iter().copied()).collect()
    }
}

/// Applies `D` to every channel of every degree.
pub fn apply_rotation(f: &IrrepFeature, d: &WignerBlocks) -> Result<IrrepFeature> {
    check_coverage(&f.signature(), d)?;
    Ok(IrrepFeature { blocks: rotate_blocks(&f.blocks, d) })
}

fn rotate_blocks(blocks: &[Array2<f64>; 3], d: &WignerBlocks) -> [Array2<f64>; 3] {
    std::array::from_fn(|l| {
        if l == 0 || blocks[l].nrows() == 0 {
            blocks[l].clone()
        } else {
            rotate_block(&blocks[l], d.block(l).expect("coverage checked"))
        }
    })
}

/// A time-indexed sequence of irrep features, packed per degree as
/// `channels x (len * (2l+1))` with column `t * (2l+1) + m`.
#[derive(Clone, Debug, PartialEq)]
pub struct IrrepSeq {
    blocks: [Array2<f64>; 3],
    len: usize,
}

impl IrrepSeq {
    pub fn new(blocks: [Array2<f64>; 3], len: usize) -> Result<Self> {
        check_blocks(&blocks, len)?;
        Ok(IrrepSeq { blocks, len })
    }

    pub fn zeros(sig: Signature, len: usize) -> Self {
        IrrepSeq { blocks: std::array::from_fn(|l| Array2::zeros((sig.0[l], len * degree_dim(l)))), len }
    }

    /// i.i.d. standard normal coefficients.
    pub fn random<R: Rng + ?Sized>(sig: Signature, len: usize, rng: &mut R) -> Self {
        IrrepSeq { blocks: std::array::from_fn(|l| random_block(sig.0[l], len * degree_dim(l), rng)), len }
    }

    pub fn from_frames(frames: &[IrrepFeature]) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Shape("empty feature sequence".into()))?;
        let sig = first.signature();
        let mut seq = IrrepSeq::zeros(sig, frames.len());
        for (t, f) in frames.iter().enumerate() {
            same_signature(sig, f.signature())?;
            for l in 0..3 {
                let w = degree_dim(l);
                seq.blocks[l].slice_mut(s![.., t * w..(t + 1) * w]).assign(&f.blocks[l]);
            }
        }
        Ok(seq)
    }

    pub fn frame(&self, t: usize) -> IrrepFeature {
        IrrepFeature {
            blocks: std::array::from_fn(|l| {
                let w = degree_dim(l);
                self.blocks[l].slice(s![.., t * w..(t + 1) * w]).to_owned()
            }),
        }
    }

    pub fn frames(&self) -> Vec<IrrepFeature> {
        (0..self.len).map(|t| self.frame(t)).collect()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn signature(&self) -> Signature {
        Signature(std::array::from_fn(|l| self.blocks[l].nrows()))
    }

    pub fn block(&self, l: usize) -> &Array2<f64> {
        &self.blocks[l]
    }

    pub fn block_mut(&mut self, l: usize) -> &mut Array2<f64> {
        &mut self.blocks[l]
    }

    pub fn blocks(&self) -> &[Array2<f64>; 3] {
        &self.blocks
    }

    pub fn add(&self, other: &IrrepSeq) -> Result<IrrepSeq> {
        self.check_compatible(other)?;
        Ok(IrrepSeq { blocks: std::array::from_fn(|l| &self.blocks[l] + &other.blocks[l]), len: self.len })
    }

    pub fn sub(&self, other: &IrrepSeq) -> Result<IrrepSeq> {
        self.check_compatible(other)?;
        Ok(IrrepSeq { blocks: std::array::from_fn(|l| &self.blocks[l] - &other.blocks[l]), len: self.len })
    }

    /// `self + s * other`
    pub fn axpy(&self, s: f64, other: &IrrepSeq) -> Result<IrrepSeq> {
        self.check_compatible(other)?;
        Ok(IrrepSeq {
            blocks: std::array::from_fn(|l| &self.blocks[l] + &(&other.blocks[l] * s)),
            len: self.len,
        })
    }

    pub fn scale(&self, s: f64) -> IrrepSeq {
        IrrepSeq { blocks: std::array::from_fn(|l| &self.blocks[l] * s), len: self.len }
    }

    pub fn norm(&self) -> f64 {
        self.sq_norm().sqrt()
    }

    pub fn sq_norm(&self) -> f64 {
        self.blocks.iter().map(|b| b.iter().map(|x| x * x).sum::<f64>()).sum()
    }

    pub fn max_abs_diff(&self, other: &IrrepSeq) -> f64 {
        max_abs_diff(&self.blocks, &other.blocks)
    }

    /// Number of scalar coefficients.
    pub fn num_coefficients(&self) -> usize {
        self.blocks.iter().map(|b| b.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.blocks.iter().flat_map(|b| b.iter().copied()).collect()
    }

    fn check_compatible(&self, other: &IrrepSeq) -> Result<()> {
        same_signature(self.signature(), other.signature())?;
        if self.len != other.len {
            return Err(Error::Shape(format!("sequence lengths {} and {} differ", self.len, other.len)));
        }
        Ok(())
    }
}

/// Rotates every frame of a sequence by the same `D`.
pub fn apply_rotation_seq(f: &IrrepSeq, d: &WignerBlocks) -> Result<IrrepSeq> {
    check_coverage(&f.signature(), d)?;
    Ok(IrrepSeq { blocks: rotate_blocks(&f.blocks, d), len: f.len })
}

pub(crate) fn same_signature(a: Signature, b: Signature) -> Result<()> {
    if a != b {
        return Err(Error::SignatureMismatch(format!("{a} vs {b}")));
    }
    Ok(())
}

fn random_block<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

pub(crate) fn concat_rows(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    if a.nrows() == 0 {
        return b.clone();
    }
    if b.nrows() == 0 {
        return a.clone();
    }
    ndarray::concatenate(Axis(0), &[a.view(), b.view()]).expect("matching column counts")
}

fn max_abs_diff(a: &[Array2<f64>; 3], b: &[Array2<f64>; 3]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            if x.dim() != y.dim() {
                return f64::INFINITY;
            }
            x.iter().zip(y.iter()).fold(0.0f64, |m, (p, q)| m.max((p - q).abs()))
        })
        .fold(0.0, f64::max)
}

/// Relative difference `max|a-b| / max(max|b|, floor)` over packed blocks.
pub fn relative_error(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    let num = a.iter().zip(b.iter()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let den = b.iter().fold(0.0f64, |m, y| m.max(y.abs())).max(1e-12);
    num / den
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn approx_mat(a: &Matrix3<f64>, b: &Matrix3<f64>, tol: f64) -> bool {
        (a - b).abs().max() < tol
    }

    #[test]
    fn zero_angle_is_identity() {
        let r = Rotation::from_axis_angle(Vector3::z(), 0.0).unwrap();
        assert!(approx_mat(r.matrix(), &Matrix3::identity(), 1e-15));
    }

    #[test]
    fn quarter_turn_about_z() {
        let r = Rotation::from_axis_angle(Vector3::z(), PI / 2.0).unwrap();
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!(approx_mat(r.matrix(), &expected, 1e-15));
    }

    #[test]
    fn half_turn_about_x() {
        let r = Rotation::from_axis_angle(Vector3::x(), PI).unwrap();
        let expected = Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0));
        assert!(approx_mat(r.matrix(), &expected, 1e-15));
    }

    #[test]
    fn non_unit_axis_rejected() {
        assert!(matches!(
            Rotation::from_axis_angle(Vector3::new(0.0, 0.0, 2.0), 1.0),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn random_rotation_is_deterministic_and_valid() {
        let a = random_rotation(&mut ChaCha8Rng::seed_from_u64(5));
        let b = random_rotation(&mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let r = random_rotation(&mut rng);
            assert!(Rotation::from_matrix(*r.matrix()).is_ok());
        }
    }

    #[test]
    fn haar_mean_trace_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let n = 10_000;
        let mean = (0..n).map(|_| random_rotation(&mut rng).trace()).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.05, "mean trace {mean}");
    }

    #[test]
    fn l0_constant() {
        let y = eval_real_sh(0, &Vector3::new(0.6, 0.0, 0.8)).unwrap();
        assert!((y[0] - 0.282_094_8).abs() < 1e-7);
    }

    #[test]
    fn l1_along_z_has_single_component() {
        let y = eval_real_sh(1, &Vector3::z()).unwrap();
        assert_eq!(y[0], 0.0);
        assert_eq!(y[2], 0.0);
        assert!((y[1] - y1_norm()).abs() < 1e-15);
    }

    #[test]
    fn degree_three_unsupported() {
        assert!(matches!(
            eval_real_sh(3, &Vector3::z()),
            Err(Error::UnsupportedDegree { degree: 3, .. })
        ));
        assert!(matches!(
            wigner_blocks(&Rotation::identity(), 3),
            Err(Error::UnsupportedDegree { .. })
        ));
    }

    #[test]
    fn identity_blocks() {
        let d = wigner_blocks(&Rotation::identity(), 2).unwrap();
        for l in 0..=2 {
            let e = Array2::<f64>::eye(degree_dim(l));
            let diff = (d.block(l).unwrap() - &e).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
            assert!(diff < 1e-15);
        }
    }

    #[test]
    fn scalar_feature_unchanged_by_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = IrrepFeature::random(Signature::new(4, 0, 0), &mut rng);
        let d = wigner_blocks(&random_rotation(&mut rng), 2).unwrap();
        assert_eq!(apply_rotation(&f, &d).unwrap(), f);
    }

    #[test]
    fn missing_degree_is_signature_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = IrrepFeature::random(Signature::new(1, 1, 1), &mut rng);
        let d = wigner_blocks(&random_rotation(&mut rng), 1).unwrap();
        assert!(matches!(apply_rotation(&f, &d), Err(Error::SignatureMismatch(_))));
    }

    #[test]
    fn seq_frames_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let seq = IrrepSeq::random(Signature::new(2, 3, 1), 5, &mut rng);
        let back = IrrepSeq::from_frames(&seq.frames()).unwrap();
        assert_eq!(back, seq);
    }

    #[test]
    fn gram_schmidt_rejects_parallel() {
        let a = Vector3::new(1.0, 0.0, 0.0);
        assert!(gram_schmidt(&a, &(a * 2.0)).is_err());
        assert!(gram_schmidt(&Vector3::zeros(), &a).is_err());
    }
}
