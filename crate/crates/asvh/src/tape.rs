//! Reverse-mode automatic differentiation over dense f64 matrices.
//!
//! A [`Tape`] records a computation graph node by node. Forward values are
//! computed eagerly at construction; [`Tape::backward`] propagates gradients
//! from one or more seed nodes back to every parameter leaf.
//!
//! Two non-standard primitives carry the training semantics of this crate:
//! [`Tape::hard_topk_ste`] (hard top-k selection forward, soft-probability
//! gradient backward) and [`Tape::grl`] (identity forward, negated gradient
//! backward).

use ndarray::{Array2, Axis};

pub type Mat = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

// Some payload fields (the AddScalar constant, the TopK count) are read only
// through the Debug formatting used in non-finite diagnostics.
#[allow(dead_code)]
#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(usize),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// x: n×d plus a 1×d row broadcast over rows.
    AddRow(NodeId, NodeId),
    /// x: n×d times an n×1 column broadcast over columns.
    MulCol(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    Gelu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        shift: NodeId,
        eps: f64,
    },
    SoftmaxRows(NodeId),
    NormalizeRows {
        x: NodeId,
        eps: f64,
    },
    GatherRows {
        x: NodeId,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceCols {
        x: NodeId,
        start: usize,
        end: usize,
    },
    MeanRows(NodeId),
    SumCols(NodeId),
    SumAll(NodeId),
    /// Same data, new dimensions (row-major order preserved).
    Reshape(NodeId),
    /// n×1 column of individually addressed entries x[(r, c)].
    GatherElems {
        x: NodeId,
        idx: Vec<(usize, usize)>,
    },
    /// Block-diagonal a·bᵀ: per block t, a_t (rows_a×k) times b_tᵀ (k×rows_b).
    BlockMatMulNT {
        a: NodeId,
        b: NodeId,
        rows_a: usize,
        rows_b: usize,
    },
    /// Block-diagonal p·v: per block t, p_t (rows_p×rows_v) times v_t (rows_v×d).
    BlockMatMulNN {
        p: NodeId,
        v: NodeId,
        rows_p: usize,
        rows_v: usize,
    },
    /// Mean over each consecutive `group` rows; one output row per group.
    GroupMeanRows {
        x: NodeId,
        group: usize,
    },
    /// sign forward (sign(0) = +1), identity backward.
    SignSte(NodeId),
    /// Per-row multi-hot top-k forward, identity backward.
    HardTopK {
        p: NodeId,
        k: usize,
    },
    /// Gradient reversal: identity forward, -1 backward.
    Grl(NodeId),
}

struct Node {
    value: Mat,
    op: Op,
}

/// Recorded computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by a backward pass.
pub struct Gradients {
    node_grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn node(&self, id: NodeId) -> Option<&Mat> {
        self.node_grads[id.0].as_ref()
    }
}

/// Skip the direct-loop matmul above this many multiply-adds; at larger sizes
/// the cache-blocked library kernel wins.
const DIRECT_MATMUL_LIMIT: usize = 1 << 16;

/// a (m×k) · b (k×n). ndarray's general matmul packs both operands before
/// multiplying, which dominates runtime at the small sizes recorded on the
/// tape, so small contiguous inputs take a direct loop instead.
fn dot_nn(a: &Mat, b: &Mat) -> Mat {
    let (m, k) = a.dim();
    let n = b.ncols();
    let (sa, sb) = match (a.as_slice(), b.as_slice()) {
        (Some(sa), Some(sb)) if m * n * k <= DIRECT_MATMUL_LIMIT => (sa, sb),
        _ => return a.dot(b),
    };
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &sa[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &sb[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Mat::from_shape_vec((m, n), out).expect("matmul output shape")
}

/// a (m×k) · bᵀ where b is n×k: each output entry is a dot of two rows.
fn dot_nt(a: &Mat, b: &Mat) -> Mat {
    let (m, k) = a.dim();
    let n = b.nrows();
    let (sa, sb) = match (a.as_slice(), b.as_slice()) {
        (Some(sa), Some(sb)) if m * n * k <= DIRECT_MATMUL_LIMIT => (sa, sb),
        _ => return a.dot(&b.t()),
    };
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &sa[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &sb[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Mat::from_shape_vec((m, n), out).expect("matmul output shape")
}

/// aᵀ · b where a is k×m and b is k×n: accumulate rank-one row updates.
fn dot_tn(a: &Mat, b: &Mat) -> Mat {
    let (k, m) = a.dim();
    let n = b.ncols();
    let (sa, sb) = match (a.as_slice(), b.as_slice()) {
        (Some(sa), Some(sb)) if m * n * k <= DIRECT_MATMUL_LIMIT => (sa, sb),
        _ => return a.t().dot(b),
    };
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &sa[p * m..(p + 1) * m];
        let brow = &sb[p * n..(p + 1) * n];
        for (i, &api) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += api * bv;
            }
        }
    }
    Mat::from_shape_vec((m, n), out).expect("matmul output shape")
}

fn std_slice(m: &Mat) -> &[f64] {
    m.as_slice().expect("tape matrices are row-major contiguous")
}

/// Block-diagonal a·bᵀ: a is (nb·ra × k), b is (nb·rb × k); out (nb·ra × rb).
fn block_nt(a: &Mat, b: &Mat, ra: usize, rb: usize) -> Mat {
    let k = a.ncols();
    let nb = a.nrows() / ra;
    assert_eq!(a.nrows(), nb * ra, "block rows must divide evenly");
    assert_eq!(b.dim(), (nb * rb, k), "block operand shape mismatch");
    let (sa, sb) = (std_slice(a), std_slice(b));
    let mut out = vec![0.0; nb * ra * rb];
    for t in 0..nb {
        for i in 0..ra {
            let arow = &sa[(t * ra + i) * k..][..k];
            let orow = &mut out[(t * ra + i) * rb..][..rb];
            for (j, o) in orow.iter_mut().enumerate() {
                let brow = &sb[(t * rb + j) * k..][..k];
                *o = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            }
        }
    }
    Mat::from_shape_vec((nb * ra, rb), out).expect("block matmul shape")
}

/// Block-diagonal p·v: p is (nb·rp × rv), v is (nb·rv × d); out (nb·rp × d).
fn block_nn(p: &Mat, v: &Mat, rp: usize, rv: usize) -> Mat {
    let d = v.ncols();
    let nb = p.nrows() / rp;
    assert_eq!(p.dim(), (nb * rp, rv), "block operand shape mismatch");
    assert_eq!(v.nrows(), nb * rv, "block rows must divide evenly");
    let (sp, sv) = (std_slice(p), std_slice(v));
    let mut out = vec![0.0; nb * rp * d];
    for t in 0..nb {
        for i in 0..rp {
            let prow = &sp[(t * rp + i) * rv..][..rv];
            let orow = &mut out[(t * rp + i) * d..][..d];
            for (j, &pij) in prow.iter().enumerate() {
                let vrow = &sv[(t * rv + j) * d..][..d];
                for (o, &vv) in orow.iter_mut().zip(vrow) {
                    *o += pij * vv;
                }
            }
        }
    }
    Mat::from_shape_vec((nb * rp, d), out).expect("block matmul shape")
}

/// Block-diagonal xᵀ·y: x is (nb·r × c1), y is (nb·r × c2); out (nb·c1 × c2).
fn block_tn(x: &Mat, y: &Mat, r: usize) -> Mat {
    let c1 = x.ncols();
    let c2 = y.ncols();
    let nb = x.nrows() / r;
    assert_eq!(x.nrows(), nb * r, "block rows must divide evenly");
    assert_eq!(y.nrows(), nb * r, "block operand shape mismatch");
    let (sx, sy) = (std_slice(x), std_slice(y));
    let mut out = vec![0.0; nb * c1 * c2];
    for t in 0..nb {
        for p in 0..r {
            let xrow = &sx[(t * r + p) * c1..][..c1];
            let yrow = &sy[(t * r + p) * c2..][..c2];
            for (i, &xv) in xrow.iter().enumerate() {
                let orow = &mut out[(t * c1 + i) * c2..][..c2];
                for (o, &yv) in orow.iter_mut().zip(yrow) {
                    *o += xv * yv;
                }
            }
        }
    }
    Mat::from_shape_vec((nb * c1, c2), out).expect("block matmul shape")
}

// Tanh approximation of GELU, evaluated through the identity
// 0.5 * (1 + tanh(u)) = sigmoid(2u); one exp is cheaper than libm's tanh.
fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    x * sigmoid_scalar(2.0 * u)
}

fn gelu_grad_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let s = sigmoid_scalar(2.0 * u); // = 0.5 * (1 + tanh(u))
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    // 0.5 * (1 + tanh) + 0.5 * x * (1 - tanh^2) * du, with 1 - tanh^2 = 4s(1-s)
    s + 2.0 * x * s * (1.0 - s) * du
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Indices of the k largest entries of a probability row, ties broken by
/// lower index first. Returned sorted ascending.
pub fn top_k_indices(p: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap().then(a.cmp(&b)));
    let mut picked: Vec<usize> = order.into_iter().take(k).collect();
    picked.sort_unstable();
    picked
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Mat, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Constant)
    }

    /// Leaf tied to parameter slot `slot`; gradients accumulate under that slot.
    pub fn param(&mut self, slot: usize, value: Mat) -> NodeId {
        self.push(value, Op::Param(slot))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = dot_nn(&self.nodes[a.0].value, &self.nodes[b.0].value);
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.t().to_owned();
        self.push(v, Op::Transpose(x))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a, b))
    }

    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> NodeId {
        let r = self.nodes[row.0].value.row(0).to_owned();
        let v = &self.nodes[x.0].value + &r;
        self.push(v, Op::AddRow(x, row))
    }

    pub fn mul_col(&mut self, x: NodeId, col: NodeId) -> NodeId {
        let c = self.nodes[col.0].value.column(0).to_owned();
        let v = &self.nodes[x.0].value * &c.insert_axis(Axis(1));
        self.push(v, Op::MulCol(x, col))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let v = &self.nodes[x.0].value * s;
        self.push(v, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: NodeId, s: f64) -> NodeId {
        let v = &self.nodes[x.0].value + s;
        self.push(v, Op::AddScalar(x, s))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.mapv(gelu_scalar);
        self.push(v, Op::Gelu(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.mapv(f64::tanh);
        self.push(v, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.mapv(sigmoid_scalar);
        self.push(v, Op::Sigmoid(x))
    }

    /// Row-wise layer norm with learned 1×d gain and shift.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, shift: NodeId, eps: f64) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let g = self.nodes[gain.0].value.row(0).to_owned();
        let s = self.nodes[shift.0].value.row(0).to_owned();
        let d = xv.ncols() as f64;
        let mut v = Mat::zeros(xv.raw_dim());
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / d;
            let var = row.mapv(|e| (e - mean) * (e - mean)).sum() / d;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..row.len() {
                v[[i, j]] = (row[j] - mean) * inv * g[j] + s[j];
            }
        }
        self.push(v, Op::LayerNorm { x, gain, shift, eps })
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let mut v = xv.clone();
        for mut row in v.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|e| (e - m).exp());
            let s = row.sum();
            row.mapv_inplace(|e| e / s);
        }
        self.push(v, Op::SoftmaxRows(x))
    }

    /// Row-wise x / (||x|| + eps).
    pub fn normalize_rows(&mut self, x: NodeId, eps: f64) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let mut v = xv.clone();
        for mut row in v.rows_mut() {
            let n = row.mapv(|e| e * e).sum().sqrt() + eps;
            row.mapv_inplace(|e| e / n);
        }
        self.push(v, Op::NormalizeRows { x, eps })
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let mut v = Mat::zeros((idx.len(), xv.ncols()));
        for (out, &i) in idx.iter().enumerate() {
            v.row_mut(out).assign(&xv.row(i));
        }
        self.push(v, Op::GatherRows { x, idx: idx.to_vec() })
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|id| self.nodes[id.0].value.view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows shape mismatch");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|id| self.nodes[id.0].value.view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols shape mismatch");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> NodeId {
        let v = self.nodes[x.0]
            .value
            .slice(ndarray::s![.., start..end])
            .to_owned();
        self.push(v, Op::SliceCols { x, start, end })
    }

    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let n = xv.nrows() as f64;
        let v = xv.sum_axis(Axis(0)).insert_axis(Axis(0)) / n;
        self.push(v, Op::MeanRows(x))
    }

    pub fn sum_cols(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::SumCols(x))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let v = Mat::from_elem((1, 1), self.nodes[x.0].value.sum());
        self.push(v, Op::SumAll(x))
    }

    /// Same entries, new (rows, cols); row-major order preserved.
    pub fn reshape(&mut self, x: NodeId, rows: usize, cols: usize) -> NodeId {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.len(), rows * cols, "reshape must preserve the entry count");
        let v = xv
            .to_shape((rows, cols))
            .expect("reshape")
            .to_owned();
        self.push(v, Op::Reshape(x))
    }

    /// n×1 column of entries x[(r, c)] in `idx` order; backward scatter-adds.
    pub fn gather_elems(&mut self, x: NodeId, idx: &[(usize, usize)]) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let mut v = Mat::zeros((idx.len(), 1));
        for (out, &(r, c)) in idx.iter().enumerate() {
            v[[out, 0]] = xv[[r, c]];
        }
        self.push(v, Op::GatherElems { x, idx: idx.to_vec() })
    }

    /// Block-diagonal a·bᵀ over aligned blocks of `rows_a` and `rows_b` rows.
    pub fn block_matmul_nt(
        &mut self,
        a: NodeId,
        b: NodeId,
        rows_a: usize,
        rows_b: usize,
    ) -> NodeId {
        let v = block_nt(&self.nodes[a.0].value, &self.nodes[b.0].value, rows_a, rows_b);
        self.push(v, Op::BlockMatMulNT { a, b, rows_a, rows_b })
    }

    /// Block-diagonal p·v over aligned blocks of `rows_p` and `rows_v` rows.
    pub fn block_matmul_nn(
        &mut self,
        p: NodeId,
        v: NodeId,
        rows_p: usize,
        rows_v: usize,
    ) -> NodeId {
        let out = block_nn(&self.nodes[p.0].value, &self.nodes[v.0].value, rows_p, rows_v);
        self.push(out, Op::BlockMatMulNN { p, v, rows_p, rows_v })
    }

    /// Mean over each consecutive `group` rows; one output row per group.
    pub fn group_mean_rows(&mut self, x: NodeId, group: usize) -> NodeId {
        let xv = &self.nodes[x.0].value;
        assert!(group > 0 && xv.nrows() % group == 0, "group must divide row count");
        let nb = xv.nrows() / group;
        let mut v = Mat::zeros((nb, xv.ncols()));
        for t in 0..nb {
            for r in 0..group {
                let row = xv.row(t * group + r);
                let mut acc = v.row_mut(t);
                acc += &row;
            }
        }
        v /= group as f64;
        self.push(v, Op::GroupMeanRows { x, group })
    }

    pub fn sign_ste(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.mapv(|e| if e >= 0.0 { 1.0 } else { -1.0 });
        self.push(v, Op::SignSte(x))
    }

    /// Per row, the multi-hot indicator of the k largest entries (ties to
    /// lower index); backward passes the gradient through unchanged, as if
    /// the output had been `p` itself.
    pub fn hard_topk_ste(&mut self, p: NodeId, k: usize) -> NodeId {
        let pv = &self.nodes[p.0].value;
        let mut v = Mat::zeros(pv.raw_dim());
        for (r, row) in pv.rows().into_iter().enumerate() {
            let row: Vec<f64> = row.to_vec();
            for i in top_k_indices(&row, k) {
                v[[r, i]] = 1.0;
            }
        }
        self.push(v, Op::HardTopK { p, k })
    }

    pub fn grl(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.clone();
        self.push(v, Op::Grl(x))
    }

    /// First node (in insertion order) holding a non-finite value, with a
    /// short op description. Used for NaN diagnostics.
    pub fn first_non_finite(&self) -> Option<(NodeId, String)> {
        for (i, n) in self.nodes.iter().enumerate() {
            if n.value.iter().any(|v| !v.is_finite()) {
                return Some((NodeId(i), format!("{:?}", n.op)));
            }
        }
        None
    }

    /// Backward pass from the given seed gradients. Multiple seeds may be
    /// supplied; their contributions accumulate.
    pub fn backward(&self, seeds: &[(NodeId, Mat)]) -> Gradients {
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        for (id, g) in seeds {
            assert_eq!(
                g.dim(),
                self.nodes[id.0].value.dim(),
                "seed gradient shape mismatch"
            );
            match &mut grads[id.0] {
                Some(acc) => *acc += g,
                slot => *slot = Some(g.clone()),
            }
        }

        let accumulate = |grads: &mut Vec<Option<Mat>>, id: NodeId, g: Mat| {
            match &mut grads[id.0] {
                Some(acc) => *acc += &g,
                slot => *slot = Some(g),
            }
        };

        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant | Op::Param(_) => {
                    grads[i] = Some(g); // restore leaf gradient
                }
                Op::MatMul(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    accumulate(&mut grads, *a, dot_nt(&g, bv));
                    accumulate(&mut grads, *b, dot_tn(av, &g));
                }
                Op::Transpose(x) => accumulate(&mut grads, *x, g.t().to_owned()),
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, -g);
                }
                Op::Mul(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    accumulate(&mut grads, *a, &g * bv);
                    accumulate(&mut grads, *b, &g * av);
                }
                Op::AddRow(x, row) => {
                    accumulate(&mut grads, *x, g.clone());
                    let rg = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *row, rg);
                }
                Op::MulCol(x, col) => {
                    let xv = &self.nodes[x.0].value;
                    let cv = self.nodes[col.0].value.column(0).to_owned();
                    let gx = &g * &cv.clone().insert_axis(Axis(1));
                    accumulate(&mut grads, *x, gx);
                    let gc = (&g * xv).sum_axis(Axis(1)).insert_axis(Axis(1));
                    accumulate(&mut grads, *col, gc);
                }
                Op::Scale(x, s) => accumulate(&mut grads, *x, &g * *s),
                Op::AddScalar(x, _) => accumulate(&mut grads, *x, g),
                Op::Gelu(x) => {
                    let d = self.nodes[x.0].value.mapv(gelu_grad_scalar);
                    accumulate(&mut grads, *x, &g * &d);
                }
                Op::Tanh(x) => {
                    let d = node.value.mapv(|y| 1.0 - y * y);
                    accumulate(&mut grads, *x, &g * &d);
                }
                Op::Sigmoid(x) => {
                    let d = node.value.mapv(|y| y * (1.0 - y));
                    accumulate(&mut grads, *x, &g * &d);
                }
                Op::LayerNorm { x, gain, shift, eps } => {
                    let xv = &self.nodes[x.0].value;
                    let gv = self.nodes[gain.0].value.row(0).to_owned();
                    let d = xv.ncols() as f64;
                    let mut gx = Mat::zeros(xv.raw_dim());
                    let mut ggain = Mat::zeros((1, xv.ncols()));
                    let mut gshift = Mat::zeros((1, xv.ncols()));
                    for (r, row) in xv.rows().into_iter().enumerate() {
                        let mean = row.sum() / d;
                        let var = row.mapv(|e| (e - mean) * (e - mean)).sum() / d;
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|&e| (e - mean) * inv).collect();
                        let gy: Vec<f64> = g.row(r).to_vec();
                        let gxhat: Vec<f64> =
                            gy.iter().zip(&gv).map(|(a, b)| a * b).collect();
                        let mean_gxhat: f64 = gxhat.iter().sum::<f64>() / d;
                        let mean_gxhat_xhat: f64 =
                            gxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d;
                        for j in 0..xhat.len() {
                            gx[[r, j]] =
                                (gxhat[j] - mean_gxhat - xhat[j] * mean_gxhat_xhat) * inv;
                            ggain[[0, j]] += gy[j] * xhat[j];
                            gshift[[0, j]] += gy[j];
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *gain, ggain);
                    accumulate(&mut grads, *shift, gshift);
                }
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let mut gx = Mat::zeros(y.raw_dim());
                    for r in 0..y.nrows() {
                        let dot: f64 = y
                            .row(r)
                            .iter()
                            .zip(g.row(r).iter())
                            .map(|(a, b)| a * b)
                            .sum();
                        for j in 0..y.ncols() {
                            gx[[r, j]] = y[[r, j]] * (g[[r, j]] - dot);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::NormalizeRows { x, eps } => {
                    let xv = &self.nodes[x.0].value;
                    let mut gx = Mat::zeros(xv.raw_dim());
                    for r in 0..xv.nrows() {
                        let row = xv.row(r);
                        let rnorm = row.mapv(|e| e * e).sum().sqrt();
                        let n = rnorm + eps;
                        if rnorm < 1e-300 {
                            for j in 0..row.len() {
                                gx[[r, j]] = g[[r, j]] / n;
                            }
                        } else {
                            let xdotg: f64 = row
                                .iter()
                                .zip(g.row(r).iter())
                                .map(|(a, b)| a * b)
                                .sum();
                            for j in 0..row.len() {
                                gx[[r, j]] =
                                    g[[r, j]] / n - row[j] * xdotg / (rnorm * n * n);
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::GatherRows { x, idx } => {
                    let xv = &self.nodes[x.0].value;
                    let mut gx = Mat::zeros(xv.raw_dim());
                    for (out, &src) in idx.iter().enumerate() {
                        let mut row = gx.row_mut(src);
                        row += &g.row(out);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.nodes[p.0].value.nrows();
                        let gp = g.slice(ndarray::s![offset..offset + n, ..]).to_owned();
                        accumulate(&mut grads, *p, gp);
                        offset += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.nodes[p.0].value.ncols();
                        let gp = g.slice(ndarray::s![.., offset..offset + n]).to_owned();
                        accumulate(&mut grads, *p, gp);
                        offset += n;
                    }
                }
                Op::SliceCols { x, start, end } => {
                    let xv = &self.nodes[x.0].value;
                    let mut gx = Mat::zeros(xv.raw_dim());
                    gx.slice_mut(ndarray::s![.., *start..*end]).assign(&g);
                    accumulate(&mut grads, *x, gx);
                }
                Op::MeanRows(x) => {
                    let xv = &self.nodes[x.0].value;
                    let n = xv.nrows() as f64;
                    let mut gx = Mat::zeros(xv.raw_dim());
                    for mut row in gx.rows_mut() {
                        row.assign(&(&g.row(0) / n));
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::SumCols(x) => {
                    let xv = &self.nodes[x.0].value;
                    let mut gx = Mat::zeros(xv.raw_dim());
                    for r in 0..xv.nrows() {
                        let gr = g[[r, 0]];
                        gx.row_mut(r).fill(gr);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::SumAll(x) => {
                    let xv = &self.nodes[x.0].value;
                    let gx = Mat::from_elem(xv.raw_dim(), g[[0, 0]]);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Reshape(x) => {
                    let dim = self.nodes[x.0].value.raw_dim();
                    let gx = g.to_shape(dim).expect("reshape gradient").to_owned();
                    accumulate(&mut grads, *x, gx);
                }
                Op::GatherElems { x, idx } => {
                    let mut gx = Mat::zeros(self.nodes[x.0].value.raw_dim());
                    for (out, &(r, c)) in idx.iter().enumerate() {
                        gx[[r, c]] += g[[out, 0]];
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::BlockMatMulNT { a, b, rows_a, rows_b } => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    // per block: ga = g·b, gb = gᵀ·a
                    accumulate(&mut grads, *a, block_nn(&g, bv, *rows_a, *rows_b));
                    accumulate(&mut grads, *b, block_tn(&g, av, *rows_a));
                }
                Op::BlockMatMulNN { p, v, rows_p, rows_v } => {
                    let pv = &self.nodes[p.0].value;
                    let vv = &self.nodes[v.0].value;
                    // per block: gp = g·vᵀ, gv = pᵀ·g
                    accumulate(&mut grads, *p, block_nt(&g, vv, *rows_p, *rows_v));
                    accumulate(&mut grads, *v, block_tn(pv, &g, *rows_p));
                }
                Op::GroupMeanRows { x, group } => {
                    let xv = &self.nodes[x.0].value;
                    let mut gx = Mat::zeros(xv.raw_dim());
                    for t in 0..g.nrows() {
                        let src = &g.row(t) / *group as f64;
                        for r in 0..*group {
                            gx.row_mut(t * group + r).assign(&src);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::SignSte(x) => accumulate(&mut grads, *x, g),
                Op::HardTopK { p, .. } => accumulate(&mut grads, *p, g),
                Op::Grl(x) => accumulate(&mut grads, *x, -g),
            }
        }

        Gradients { node_grads: grads }
    }

    /// Gradients per parameter slot. Slots absent from the graph (or with no
    /// gradient) are omitted.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(usize, Mat)> {
        let mut out = Vec::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if let Op::Param(slot) = n.op {
                if let Some(g) = &grads.node_grads[i] {
                    out.push((slot, g.clone()));
                }
            }
        }
        out
    }
}
