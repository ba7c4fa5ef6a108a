//! Minimal reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles; calling
//! [`Tape::backward`] on a `1x1` output walks the record in reverse and
//! accumulates vector-Jacobian products. Only nodes that depend on a
//! parameter or a tracked input carry gradients.
//!
//! Several ops work on "grouped" columns: a matrix whose columns are split
//! into consecutive groups of width `w` (the `2l+1` coefficients of one
//! position). Time-aware ops additionally see the groups as `segments x len`
//! positions (batch elements times timesteps).

use ndarray::{s, Array2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Out-of-range timesteps repeat the first frame.
    Replicate,
    /// Out-of-range timesteps are zero.
    Zero,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddCol(Var, Var),
    AddRow(Var, Var),
    Sigmoid(Var),
    Silu(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GroupDot(Var, Var, usize),
    GroupNorm { a: Var, w: usize, eps: f64 },
    GroupScale(Var, Var, usize),
    Tile { a: Var, reps: usize, w: usize },
    TimeShift { a: Var, lag: usize, len: usize, w: usize, pad: Padding },
    TimePool { a: Var, factor: usize, len: usize, w: usize },
    TimeRepeat { a: Var, factor: usize, len: usize, w: usize },
    SegmentScores { q: Var, k: Var, segments: usize },
    SegmentMix { p: Var, v: Var, segments: usize },
    SoftmaxRows(Var),
    MeanSquare(Var),
    WeightedSum(Var, Array2<f64>),
    Sum(Vec<Var>),
    Gather(Var, Vec<usize>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    tracked: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }
}

pub struct Tape<'p> {
    nodes: Vec<Node>,
    params: Option<&'p ParamStore>,
    param_vars: Vec<Option<Var>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Tape::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), params: None, param_vars: Vec::new() }
    }

    /// A tape that can materialize parameters from `store` on demand.
    pub fn with_params(store: &'p ParamStore) -> Self {
        Tape { nodes: Vec::with_capacity(512), params: Some(store), param_vars: vec![None; store.len()] }
    }

    fn push(&mut self, value: Array2<f64>, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Untracked leaf.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Tracked leaf (gradients are reported for it).
    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf for a stored parameter, created once per tape.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let store = self.params.expect("tape was created without a parameter store");
        let v = self.push(store.value(id).clone(), Op::Leaf, true);
        self.param_vars[id.index()] = Some(v);
        v
    }

    /// Parameters touched by this tape and their leaf variables.
    pub fn param_leaves(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.param_vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId::from_index(i), v)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let t = self.tracked(&[a, b]);
        self.push(value, Op::MatMul(a, b), t)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().as_standard_layout().into_owned();
        let t = self.tracked(&[a]);
        self.push(value, Op::Transpose(a), t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let t = self.tracked(&[a, b]);
        self.push(value, Op::Add(a, b), t)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let t = self.tracked(&[a, b]);
        self.push(value, Op::Sub(a, b), t)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let t = self.tracked(&[a, b]);
        self.push(value, Op::Mul(a, b), t)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) / self.value(b);
        let t = self.tracked(&[a, b]);
        self.push(value, Op::Div(a, b), t)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a) * s;
        let t = self.tracked(&[a]);
        self.push(value, Op::Scale(a, s), t)
    }

    /// Adds a `rows x 1` column to every column of `a`.
    pub fn add_col(&mut self, a: Var, col: Var) -> Var {
        assert_eq!(self.shape(col), (self.shape(a).0, 1), "add_col: bias shape");
        let value = self.value(a) + self.value(col);
        let t = self.tracked(&[a, col]);
        self.push(value, Op::AddCol(a, col), t)
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row), (1, self.shape(a).1), "add_row: bias shape");
        let value = self.value(a) + self.value(row);
        let t = self.tracked(&[a, row]);
        self.push(value, Op::AddRow(a, row), t)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        let t = self.tracked(&[a]);
        self.push(value, Op::Sigmoid(a), t)
    }

    /// `x * sigmoid(x)`
    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * sigmoid(x));
        let t = self.tracked(&[a]);
        self.push(value, Op::Silu(a), t)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        let t = self.tracked(parts);
        self.push(value, Op::ConcatRows(parts.to_vec()), t)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, n: usize) -> Var {
        let value = self.value(a).slice(s![start..start + n, ..]).to_owned();
        let t = self.tracked(&[a]);
        self.push(value, Op::SliceRows(a, start), t)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let t = self.tracked(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), t)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, n: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + n]).to_owned();
        let t = self.tracked(&[a]);
        self.push(value, Op::SliceCols(a, start), t)
    }

    /// Per-group dot products: `(r, g*w) x (r, g*w) -> (r, g)`.
    pub fn group_dot(&mut self, a: Var, b: Var, w: usize) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.dim(), vb.dim(), "group_dot: shapes differ");
        let (r, c) = va.dim();
        let mut out = Array2::zeros((r, c / w));
        for i in 0..r {
            for g in 0..c / w {
                let mut acc = 0.0;
                for m in 0..w {
                    acc += va[[i, g * w + m]] * vb[[i, g * w + m]];
                }
                out[[i, g]] = acc;
            }
        }
        let t = self.tracked(&[a, b]);
        self.push(out, Op::GroupDot(a, b, w), t)
    }

    /// Per-group Euclidean norm floored at `eps`.
    pub fn group_norm(&mut self, a: Var, w: usize, eps: f64) -> Var {
        let va = self.value(a);
        let (r, c) = va.dim();
        let out = Array2::from_shape_fn((r, c / w), |(i, g)| {
            let sq: f64 = (0..w).map(|m| va[[i, g * w + m]].powi(2)).sum();
            sq.sqrt().max(eps)
        });
        let t = self.tracked(&[a]);
        self.push(out, Op::GroupNorm { a, w, eps }, t)
    }

    /// Multiplies every group of `a` by the matching entry of `scales`.
    pub fn group_scale(&mut self, a: Var, scales: Var, w: usize) -> Var {
        let (va, vs) = (self.value(a), self.value(scales));
        let (r, c) = va.dim();
        assert_eq!(vs.dim(), (r, c / w), "group_scale: scale shape");
        let out = Array2::from_shape_fn((r, c), |(i, j)| va[[i, j]] * vs[[i, j / w]]);
        let t = self.tracked(&[a, scales]);
        self.push(out, Op::GroupScale(a, scales, w), t)
    }

    /// Repeats each group `reps` times: `(r, n*w) -> (r, n*reps*w)`.
    pub fn tile(&mut self, a: Var, reps: usize, w: usize) -> Var {
        let va = self.value(a);
        let (r, c) = va.dim();
        let n = c / w;
        let out = Array2::from_shape_fn((r, n * reps * w), |(i, j)| {
            let g = j / w / reps;
            va[[i, g * w + j % w]]
        });
        let t = self.tracked(&[a]);
        self.push(out, Op::Tile { a, reps, w }, t)
    }

    /// Delays every segment of `len` frames by `lag` frames.
    pub fn time_shift(&mut self, a: Var, lag: usize, len: usize, w: usize, pad: Padding) -> Var {
        let va = self.value(a);
        let (r, c) = va.dim();
        assert_eq!(c % (len * w), 0, "time_shift: columns not a multiple of len*w");
        let mut out = Array2::zeros((r, c));
        for seg in 0..c / (len * w) {
            for t in 0..len {
                let src = match (t.checked_sub(lag), pad) {
                    (Some(s), _) => s,
                    (None, Padding::Replicate) => 0,
                    (None, Padding::Zero) => continue,
                };
                let (dst0, src0) = ((seg * len + t) * w, (seg * len + src) * w);
                out.slice_mut(s![.., dst0..dst0 + w]).assign(&va.slice(s![.., src0..src0 + w]));
            }
        }
        let t = self.tracked(&[a]);
        self.push(out, Op::TimeShift { a, lag, len, w, pad }, t)
    }

    /// Average pooling by `factor` along time.
    pub fn time_pool(&mut self, a: Var, factor: usize, len: usize, w: usize) -> Var {
        let va = self.value(a);
        let (r, c) = va.dim();
        assert_eq!(len % factor, 0, "time_pool: length not divisible");
        let segs = c / (len * w);
        let out_len = len / factor;
        let mut out = Array2::zeros((r, segs * out_len * w));
        for seg in 0..segs {
            for t in 0..out_len {
                let dst0 = (seg * out_len + t) * w;
                for k in 0..factor {
                    let src0 = (seg * len + t * factor + k) * w;
                    let mut dst = out.slice_mut(s![.., dst0..dst0 + w]);
                    dst.scaled_add(1.0 / factor as f64, &va.slice(s![.., src0..src0 + w]));
                }
            }
        }
        let t = self.tracked(&[a]);
        self.push(out, Op::TimePool { a, factor, len, w }, t)
    }

    /// Nearest-neighbour upsampling by `factor` along time; `len` is the input length.
    pub fn time_repeat(&mut self, a: Var, factor: usize, len: usize, w: usize) -> Var {
        let va = self.value(a);
        let (r, c) = va.dim();
        let segs = c / (len * w);
        let out_len = len * factor;
        let out = Array2::from_shape_fn((r, segs * out_len * w), |(i, j)| {
            let pos = j / w;
            let (seg, t) = (pos / out_len, pos % out_len);
            va[[i, (seg * len + t / factor) * w + j % w]]
        });
        let t = self.tracked(&[a]);
        self.push(out, Op::TimeRepeat { a, factor, len, w }, t)
    }

    /// Attention scores within segments: `q` is `(S*nq, d)`, `k` is `(S*n, d)`,
    /// result `(S*nq, n)` with row `i` of segment `s` dotted against that
    /// segment's keys.
    pub fn segment_scores(&mut self, q: Var, k: Var, segments: usize) -> Var {
        let (vq, vk) = (self.value(q), self.value(k));
        let (nq, n) = (vq.nrows() / segments, vk.nrows() / segments);
        let mut out = Array2::zeros((segments * nq, n));
        for seg in 0..segments {
            let qs = vq.slice(s![seg * nq..(seg + 1) * nq, ..]);
            let ks = vk.slice(s![seg * n..(seg + 1) * n, ..]);
            out.slice_mut(s![seg * nq..(seg + 1) * nq, ..]).assign(&qs.dot(&ks.t()));
        }
        let t = self.tracked(&[q, k]);
        self.push(out, Op::SegmentScores { q, k, segments }, t)
    }

    /// Weighted sums within segments: `p` is `(S*nq, n)`, `v` is `(S*n, d)`.
    pub fn segment_mix(&mut self, p: Var, v: Var, segments: usize) -> Var {
        let (vp, vv) = (self.value(p), self.value(v));
        let (nq, n) = (vp.nrows() / segments, vv.nrows() / segments);
        let mut out = Array2::zeros((segments * nq, vv.ncols()));
        for seg in 0..segments {
            let ps = vp.slice(s![seg * nq..(seg + 1) * nq, ..]);
            let vs = vv.slice(s![seg * n..(seg + 1) * n, ..]);
            out.slice_mut(s![seg * nq..(seg + 1) * nq, ..]).assign(&ps.dot(&vs));
        }
        let t = self.tracked(&[p, v]);
        self.push(out, Op::SegmentMix { p, v, segments }, t)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        let t = self.tracked(&[a]);
        self.push(out, Op::SoftmaxRows(a), t)
    }

    /// Mean of squared entries, as a `1x1` value.
    pub fn mean_square(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let m = va.iter().map(|x| x * x).sum::<f64>() / va.len().max(1) as f64;
        let t = self.tracked(&[a]);
        self.push(Array2::from_elem((1, 1), m), Op::MeanSquare(a), t)
    }

    /// `sum(a .* weights)` as a `1x1` value.
    pub fn weighted_sum(&mut self, a: Var, weights: Array2<f64>) -> Var {
        assert_eq!(self.shape(a), weights.dim(), "weighted_sum: shape");
        let m = (self.value(a) * &weights).sum();
        let t = self.tracked(&[a]);
        self.push(Array2::from_elem((1, 1), m), Op::WeightedSum(a, weights), t)
    }

    /// Sum of same-shaped terms.
    pub fn sum(&mut self, parts: &[Var]) -> Var {
        let mut value = self.value(parts[0]).clone();
        for p in &parts[1..] {
            value += self.value(*p);
        }
        let t = self.tracked(parts);
        self.push(value, Op::Sum(parts.to_vec()), t)
    }

    /// Output of the given shape whose row-major entry `i` is the row-major
    /// entry `index[i]` of `a`.
    pub fn gather(&mut self, a: Var, index: Vec<usize>, shape: (usize, usize)) -> Var {
        assert_eq!(index.len(), shape.0 * shape.1, "gather: index length");
        let va = self.value(a);
        let c = va.ncols();
        let out = Array2::from_shape_fn(shape, |(i, j)| {
            let k = index[i * shape.1 + j];
            va[[k / c, k % c]]
        });
        let t = self.tracked(&[a]);
        self.push(out, Op::Gather(a, index), t)
    }

    /// Reverse pass seeded with `d out = 1`; `out` must be `1x1`.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.shape(out), (1, 1), "backward needs a scalar output");
        self.backward_with(out, Array2::from_elem((1, 1), 1.0))
    }

    /// Reverse pass with an explicit output cotangent.
    pub fn backward_with(&self, out: Var, seed: Array2<f64>) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(seed);
        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, value: &Array2<f64>, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.nodes[a.0].tracked {
                    self.accumulate(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.nodes[b.0].tracked {
                    self.accumulate(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.t().to_owned()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                self.accumulate(grads, *a, g * self.value(*b));
                self.accumulate(grads, *b, g * self.value(*a));
            }
            Op::Div(a, b) => {
                let vb = self.value(*b);
                self.accumulate(grads, *a, g / vb);
                if self.nodes[b.0].tracked {
                    let mut gb = g * value;
                    gb /= vb;
                    self.accumulate(grads, *b, -gb);
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g * *s),
            Op::AddCol(a, col) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *col, g.sum_axis(Axis(1)).insert_axis(Axis(1)));
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Sigmoid(a) => {
                let mut ga = g.clone();
                Zip::from(&mut ga).and(value).for_each(|d, &s| *d *= s * (1.0 - s));
                self.accumulate(grads, *a, ga);
            }
            Op::Silu(a) => {
                let mut ga = g.clone();
                Zip::from(&mut ga).and(self.value(*a)).for_each(|d, &x| {
                    let s = sigmoid(x);
                    *d *= s + x * s * (1.0 - s);
                });
                self.accumulate(grads, *a, ga);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let n = self.shape(*p).0;
                    self.accumulate(grads, *p, g.slice(s![start..start + n, ..]).to_owned());
                    start += n;
                }
            }
            Op::SliceRows(a, start) => {
                let mut ga = Array2::zeros(self.shape(*a));
                ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                self.accumulate(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let n = self.shape(*p).1;
                    self.accumulate(grads, *p, g.slice(s![.., start..start + n]).to_owned());
                    start += n;
                }
            }
            Op::SliceCols(a, start) => {
                let mut ga = Array2::zeros(self.shape(*a));
                ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                self.accumulate(grads, *a, ga);
            }
            Op::GroupDot(a, b, w) => {
                let expand = |v: &Array2<f64>| {
                    Array2::from_shape_fn((v.nrows(), v.ncols()), |(i, j)| g[[i, j / w]] * v[[i, j]])
                };
                if self.nodes[a.0].tracked {
                    self.accumulate(grads, *a, expand(self.value(*b)));
                }
                if self.nodes[b.0].tracked {
                    self.accumulate(grads, *b, expand(self.value(*a)));
                }
            }
            Op::GroupNorm { a, w, eps } => {
                let va = self.value(*a);
                let ga = Array2::from_shape_fn(va.dim(), |(i, j)| {
                    let n = value[[i, j / w]];
                    let raw: f64 = (0..*w).map(|m| va[[i, (j / w) * w + m]].powi(2)).sum::<f64>().sqrt();
                    if raw > *eps {
                        g[[i, j / w]] * va[[i, j]] / n
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *a, ga);
            }
            Op::GroupScale(a, sc, w) => {
                let (va, vs) = (self.value(*a), self.value(*sc));
                if self.nodes[a.0].tracked {
                    let ga = Array2::from_shape_fn(va.dim(), |(i, j)| g[[i, j]] * vs[[i, j / w]]);
                    self.accumulate(grads, *a, ga);
                }
                if self.nodes[sc.0].tracked {
                    let gs = Array2::from_shape_fn(vs.dim(), |(i, k)| {
                        (0..*w).map(|m| g[[i, k * w + m]] * va[[i, k * w + m]]).sum()
                    });
                    self.accumulate(grads, *sc, gs);
                }
            }
            Op::Tile { a, reps, w } => {
                let (r, c) = self.shape(*a);
                let mut ga = Array2::zeros((r, c));
                for j in 0..g.ncols() {
                    let src = (j / w / reps) * w + j % w;
                    let mut col = ga.column_mut(src);
                    col += &g.column(j);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::TimeShift { a, lag, len, w, pad } => {
                let (r, c) = self.shape(*a);
                let mut ga = Array2::zeros((r, c));
                for seg in 0..c / (len * w) {
                    for t in 0..*len {
                        let src = match (t.checked_sub(*lag), pad) {
                            (Some(s), _) => s,
                            (None, Padding::Replicate) => 0,
                            (None, Padding::Zero) => continue,
                        };
                        let (dst0, src0) = ((seg * len + t) * w, (seg * len + src) * w);
                        let mut tgt = ga.slice_mut(s![.., src0..src0 + w]);
                        tgt += &g.slice(s![.., dst0..dst0 + w]);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::TimePool { a, factor, len, w } => {
                let (r, c) = self.shape(*a);
                let mut ga = Array2::zeros((r, c));
                let out_len = len / factor;
                for seg in 0..c / (len * w) {
                    for t in 0..out_len {
                        let dst0 = (seg * out_len + t) * w;
                        for k in 0..*factor {
                            let src0 = (seg * len + t * factor + k) * w;
                            ga.slice_mut(s![.., src0..src0 + w])
                                .scaled_add(1.0 / *factor as f64, &g.slice(s![.., dst0..dst0 + w]));
                        }
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::TimeRepeat { a, factor, len, w } => {
                let (r, c) = self.shape(*a);
                let mut ga = Array2::zeros((r, c));
                let out_len = len * factor;
                for j in 0..g.ncols() {
                    let pos = j / w;
                    let (seg, t) = (pos / out_len, pos % out_len);
                    let src = (seg * len + t / factor) * w + j % w;
                    let mut col = ga.column_mut(src);
                    col += &g.column(j);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SegmentScores { q, k, segments } => {
                let (vq, vk) = (self.value(*q), self.value(*k));
                let (nq, n) = (vq.nrows() / segments, vk.nrows() / segments);
                let mut gq = Array2::zeros(vq.dim());
                let mut gk = Array2::zeros(vk.dim());
                for seg in 0..*segments {
                    let gs = g.slice(s![seg * nq..(seg + 1) * nq, ..]);
                    let qs = vq.slice(s![seg * nq..(seg + 1) * nq, ..]);
                    let ks = vk.slice(s![seg * n..(seg + 1) * n, ..]);
                    gq.slice_mut(s![seg * nq..(seg + 1) * nq, ..]).assign(&gs.dot(&ks));
                    gk.slice_mut(s![seg * n..(seg + 1) * n, ..]).assign(&gs.t().dot(&qs));
                }
                self.accumulate(grads, *q, gq);
                self.accumulate(grads, *k, gk);
            }
            Op::SegmentMix { p, v, segments } => {
                let (vp, vv) = (self.value(*p), self.value(*v));
                let (nq, n) = (vp.nrows() / segments, vv.nrows() / segments);
                let mut gp = Array2::zeros(vp.dim());
                let mut gv = Array2::zeros(vv.dim());
                for seg in 0..*segments {
                    let gs = g.slice(s![seg * nq..(seg + 1) * nq, ..]);
                    let ps = vp.slice(s![seg * nq..(seg + 1) * nq, ..]);
                    let vs = vv.slice(s![seg * n..(seg + 1) * n, ..]);
                    gp.slice_mut(s![seg * nq..(seg + 1) * nq, ..]).assign(&gs.dot(&vs.t()));
                    gv.slice_mut(s![seg * n..(seg + 1) * n, ..]).assign(&ps.t().dot(&gs));
                }
                self.accumulate(grads, *p, gp);
                self.accumulate(grads, *v, gv);
            }
            Op::SoftmaxRows(a) => {
                let mut ga = Array2::zeros(value.dim());
                for ((mut out, s), d) in ga.rows_mut().into_iter().zip(value.rows()).zip(g.rows()) {
                    let dot: f64 = s.iter().zip(d.iter()).map(|(x, y)| x * y).sum();
                    Zip::from(&mut out).and(&s).and(&d).for_each(|o, &si, &di| *o = si * (di - dot));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::MeanSquare(a) => {
                let va = self.value(*a);
                let k = 2.0 * g[[0, 0]] / va.len().max(1) as f64;
                self.accumulate(grads, *a, va * k);
            }
            Op::WeightedSum(a, wts) => self.accumulate(grads, *a, wts * g[[0, 0]]),
            Op::Gather(a, index) => {
                let (r, c) = self.shape(*a);
                let mut ga = Array2::zeros((r, c));
                for (i, gi) in g.iter().enumerate() {
                    let k = index[i];
                    ga[[k / c, k % c]] += gi;
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Sum(parts) => {
                for p in parts {
                    self.accumulate(grads, *p, g.clone());
                }
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Central finite differences of `f` w.r.t. every entry of every input.
    fn check<F>(inputs: Vec<Array2<f64>>, f: F) -> f64
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.input(x.clone())).collect();
        let out = f(&mut tape, &vars);
        let weights = rand_mat(&mut rng, tape.shape(out).0, tape.shape(out).1);
        let loss = tape.weighted_sum(out, weights.clone());
        let grads = tape.backward(loss);

        let eval = |xs: &[Array2<f64>]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
            let o = f(&mut t, &vs);
            (t.value(o) * &weights).sum()
        };
        let h = 1e-6;
        let mut worst = 0.0f64;
        for (k, x) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Array2::zeros(x.dim()));
            let mut numeric = Array2::zeros(x.dim());
            for idx in 0..x.len() {
                let mut plus = inputs.clone();
                let mut minus = inputs.clone();
                plus[k].as_slice_mut().unwrap()[idx] += h;
                minus[k].as_slice_mut().unwrap()[idx] -= h;
                numeric.as_slice_mut().unwrap()[idx] = (eval(&plus) - eval(&minus)) / (2.0 * h);
            }
            let scale = numeric.iter().fold(1e-8f64, |m, v| m.max(v.abs()));
            let err = (&analytic - &numeric).iter().fold(0.0f64, |m, v| m.max(v.abs())) / scale;
            worst = worst.max(err);
        }
        worst
    }

    #[test]
    fn matmul_and_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = check(vec![rand_mat(&mut rng, 3, 4), rand_mat(&mut rng, 4, 2)], |t, v| {
            let m = t.matmul(v[0], v[1]);
            t.transpose(m)
        });
        assert!(e < 1e-7, "{e}");
    }

    #[test]
    fn elementwise_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_mat(&mut rng, 3, 4);
        let b = rand_mat(&mut rng, 3, 4).mapv(|x| x + 3.0);
        let e = check(vec![a, b], |t, v| {
            let p = t.mul(v[0], v[1]);
            let q = t.div(p, v[1]);
            let r = t.div(v[0], v[1]);
            let s = t.sub(q, r);
            let u = t.add(s, p);
            let sg = t.sigmoid(u);
            let sl = t.silu(v[0]);
            let sc = t.scale(sl, -1.5);
            t.sum(&[sg, sc, p])
        });
        assert!(e < 1e-6, "{e}");
    }

    #[test]
    fn broadcasts_and_slices() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = check(
            vec![rand_mat(&mut rng, 3, 6), rand_mat(&mut rng, 3, 1), rand_mat(&mut rng, 1, 6)],
            |t, v| {
                let a = t.add_col(v[0], v[1]);
                let b = t.add_row(a, v[2]);
                let top = t.slice_rows(b, 0, 2);
                let bot = t.slice_rows(b, 1, 2);
                let c = t.concat_rows(&[top, bot]);
                let l = t.slice_cols(c, 1, 3);
                let r = t.slice_cols(c, 3, 3);
                t.concat_cols(&[r, l])
            },
        );
        assert!(e < 1e-7, "{e}");
    }

    #[test]
    fn grouped_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let e = check(
            vec![rand_mat(&mut rng, 2, 12), rand_mat(&mut rng, 2, 12), rand_mat(&mut rng, 2, 3)],
            |t, v| {
                let d = t.group_dot(v[0], v[1], 3);
                let n = t.group_norm(v[0], 3, 1e-8);
                let c = t.div(d, n);
                let s = t.group_scale(v[0], c, 3);
                let tl = t.tile(v[2], 4, 3);
                t.add(s, tl)
            },
        );
        assert!(e < 1e-6, "{e}");
    }

    #[test]
    fn temporal_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // 2 segments x 4 frames x width 3
        let e = check(vec![rand_mat(&mut rng, 2, 24)], |t, v| {
            let a = t.time_shift(v[0], 1, 4, 3, Padding::Replicate);
            let b = t.time_shift(v[0], 2, 4, 3, Padding::Zero);
            let p = t.time_pool(a, 2, 4, 3);
            let r = t.time_repeat(p, 2, 2, 3);
            t.sum(&[r, b])
        });
        assert!(e < 1e-7, "{e}");
    }

    #[test]
    fn attention_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let e = check(
            vec![rand_mat(&mut rng, 4, 3), rand_mat(&mut rng, 6, 3), rand_mat(&mut rng, 6, 2)],
            |t, v| {
                let sc = t.segment_scores(v[0], v[1], 2);
                let p = t.softmax_rows(sc);
                t.segment_mix(p, v[2], 2)
            },
        );
        assert!(e < 1e-6, "{e}");
    }

    #[test]
    fn gather_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let e = check(vec![rand_mat(&mut rng, 2, 3)], |t, v| {
            let idx = vec![5, 0, 0, 3, 2, 1, 4, 4];
            t.gather(v[0], idx, (4, 2))
        });
        assert!(e < 1e-7, "{e}");
    }

    #[test]
    fn mean_square_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let e = check(vec![rand_mat(&mut rng, 3, 3)], |t, v| t.mean_square(v[0]));
        assert!(e < 1e-7, "{e}");
    }

    #[test]
    fn time_shift_replicate_values() {
        let mut t = Tape::new();
        let a = t.constant(Array2::from_shape_vec((1, 4), vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let s = t.time_shift(a, 1, 4, 1, Padding::Replicate);
        assert_eq!(t.value(s).as_slice().unwrap(), &[1.0, 1.0, 2.0, 3.0]);
        let z = t.time_shift(a, 1, 4, 1, Padding::Zero);
        assert_eq!(t.value(z).as_slice().unwrap(), &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn untracked_branches_get_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Array2::ones((2, 2)));
        let x = t.input(Array2::ones((2, 2)));
        let y = t.mul(c, x);
        let l = t.mean_square(y);
        let g = t.backward(l);
        assert!(g.get(c).is_none());
        assert!(g.get(x).is_some());
    }
}
