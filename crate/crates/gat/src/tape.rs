//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A `Tape` records one forward computation per sample; `backward` walks the
//! node list in reverse and accumulates gradients. Every operation reduces in
//! a fixed sequential order, so results are bitwise reproducible regardless of
//! the caller's threading. The op set is exactly what the gaze model needs; it
//! is not a general tensor library.

use std::rc::Rc;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data mismatch");
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let len = shape.iter().product();
        Tensor { shape, data: vec![0.0; len] }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor { shape: vec![1], data: vec![v] }
    }

    /// Rows×cols view of the two trailing dimensions, leading dims flattened.
    fn rows_cols(&self) -> (usize, usize) {
        let nd = self.shape.len();
        assert!(nd >= 2, "need at least 2 dims");
        let cols = self.shape[nd - 1];
        (self.data.len() / cols, cols)
    }
}

/// Row-major matrix multiply C = alpha·op(A)·op(B) + beta·C via dgemm.
/// Logical dims are m×k times k×n; a transposed operand is stored (k×m) or
/// (n×k) row-major.
#[allow(clippy::too_many_arguments)]
fn mm(
    c: &mut [f64],
    beta: f64,
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub type VarId = usize;

enum Op {
    Leaf { param: Option<usize> },
    /// (m×k)·(k×n)
    Matmul { a: VarId, b: VarId },
    /// Batched (g,m,k)·(g,k,n), or (g,m,k)·(g,n,k)ᵀ when `trans_b`.
    Bmm { a: VarId, b: VarId, trans_b: bool },
    /// (r×c) + broadcast row (c)
    AddRowBias { x: VarId, bias: VarId },
    Add { x: VarId, y: VarId },
    Scale { x: VarId, c: f64 },
    /// Row gather: out[i] = x[idx[i]]. A permutation idx makes this a shuffle.
    GatherRows { x: VarId, idx: Rc<Vec<usize>> },
    SliceCols { x: VarId, from: usize, width: usize },
    ConcatCols { xs: Vec<VarId> },
    /// View input as `in_shape`, permute axes by `perm`.
    Permute { x: VarId, in_shape: Vec<usize>, perm: Vec<usize> },
    /// Softmax over the last dimension.
    Softmax { x: VarId },
    /// Relative-position bias matrix per head: out[h,i,j] =
    /// spatial[h, sidx[i·m+j]] + temporal[h, tidx[i·m+j]], shape (heads,m,m).
    RelBias { spatial: VarId, temporal: VarId, sidx: Rc<Vec<usize>>, tidx: Rc<Vec<usize>>, heads: usize, m: usize },
    /// scores (windows,heads,m,m) + bias (heads,m,m) broadcast over windows,
    /// plus an optional constant additive mask (windows,m,m) broadcast over heads.
    AddBiasMask { scores: VarId, bias: VarId, windows: usize, heads: usize, m: usize },
    /// Per-row mean/variance normalization with learned gain/shift.
    LayerNorm { x: VarId, gain: VarId, shift: VarId },
    Gelu { x: VarId },
    /// (r×c) → (r/group × c): mean over `group` consecutive rows.
    GroupMeanRows { x: VarId, group: usize },
    /// Rows of 3 scaled to unit norm; near-zero rows fall back to (0,0,-1)
    /// with zero gradient.
    NormalizeRows { x: VarId },
    /// Weighted angular loss in degrees against constant unit targets.
    AngularLoss { pred: VarId, gt: Rc<Vec<f64>>, weights: Rc<Vec<f64>> },
    /// Planar angular loss on (x,y) of one prediction row against a constant
    /// unit 2D direction; near-axis rows take a fixed flat penalty.
    PlanarLossXY { pred: VarId, v: [f64; 2], row: usize },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    op: Op,
}

/// Numerically safe cosine clamp for the differentiable angular losses.
pub const LOSS_COS_CLAMP: f64 = 1e-7;
/// In-plane norm below which the planar loss switches to its flat penalty.
pub const PLANAR_EPS: f64 = 1e-6;
/// Flat penalty (degrees) for near-axis predictions under the planar loss.
pub const PLANAR_PENALTY_DEG: f64 = 90.0;

pub const RAD_TO_DEG: f64 = 180.0 / std::f64::consts::PI;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> VarId {
        self.nodes.push(Node { value, grad: None, needs_grad, op });
        self.nodes.len() - 1
    }

    fn needs(&self, v: VarId) -> bool {
        self.nodes[v].needs_grad
    }

    pub fn value(&self, v: VarId) -> &Tensor {
        &self.nodes[v].value
    }

    pub fn grad(&self, v: VarId) -> Option<&[f64]> {
        self.nodes[v].grad.as_deref()
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> VarId {
        self.push(t, Op::Leaf { param: None }, false)
    }

    /// Trainable input tagged with the caller's parameter index.
    pub fn param(&mut self, t: Tensor, param: usize) -> VarId {
        self.push(t, Op::Leaf { param: Some(param) }, true)
    }

    /// (param index, gradient) for every parameter leaf that received one.
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.nodes.iter().filter_map(|n| match (&n.op, &n.grad) {
            (Op::Leaf { param: Some(p) }, Some(g)) => Some((*p, g.as_slice())),
            _ => None,
        })
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let (m, ka) = self.nodes[a].value.rows_cols();
        let (kb, n) = self.nodes[b].value.rows_cols();
        assert_eq!(ka, kb, "matmul inner dims");
        let mut out = vec![0.0; m * n];
        mm(&mut out, 0.0, m, ka, n, &self.nodes[a].value.data, false, &self.nodes[b].value.data, false);
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(vec![m, n], out), Op::Matmul { a, b }, needs)
    }

    pub fn bmm(&mut self, a: VarId, b: VarId, trans_b: bool) -> VarId {
        let ash = &self.nodes[a].value.shape;
        let bsh = &self.nodes[b].value.shape;
        assert_eq!(ash.len(), 3, "bmm lhs rank");
        assert_eq!(bsh.len(), 3, "bmm rhs rank");
        let (g, m, k) = (ash[0], ash[1], ash[2]);
        let (n, kb) = if trans_b { (bsh[1], bsh[2]) } else { (bsh[2], bsh[1]) };
        assert_eq!(bsh[0], g, "bmm groups");
        assert_eq!(k, kb, "bmm inner dims");
        let mut out = vec![0.0; g * m * n];
        for i in 0..g {
            mm(
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
                m,
                k,
                n,
                &self.nodes[a].value.data[i * m * k..(i + 1) * m * k],
                false,
                &self.nodes[b].value.data[i * k * n..(i + 1) * k * n],
                trans_b,
            );
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(vec![g, m, n], out), Op::Bmm { a, b, trans_b }, needs)
    }

    pub fn add_row_bias(&mut self, x: VarId, bias: VarId) -> VarId {
        let (r, c) = self.nodes[x].value.rows_cols();
        assert_eq!(self.nodes[bias].value.data.len(), c, "bias width");
        let mut out = self.nodes[x].value.data.clone();
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] += self.nodes[bias].value.data[j];
            }
        }
        let shape = self.nodes[x].value.shape.clone();
        let needs = self.needs(x) || self.needs(bias);
        self.push(Tensor::new(shape, out), Op::AddRowBias { x, bias }, needs)
    }

    pub fn add(&mut self, x: VarId, y: VarId) -> VarId {
        assert_eq!(self.nodes[x].value.shape, self.nodes[y].value.shape, "add shapes");
        let out: Vec<f64> = self.nodes[x]
            .value
            .data
            .iter()
            .zip(&self.nodes[y].value.data)
            .map(|(a, b)| a + b)
            .collect();
        let shape = self.nodes[x].value.shape.clone();
        let needs = self.needs(x) || self.needs(y);
        self.push(Tensor::new(shape, out), Op::Add { x, y }, needs)
    }

    pub fn scale(&mut self, x: VarId, c: f64) -> VarId {
        let out: Vec<f64> = self.nodes[x].value.data.iter().map(|v| v * c).collect();
        let shape = self.nodes[x].value.shape.clone();
        let needs = self.needs(x);
        self.push(Tensor::new(shape, out), Op::Scale { x, c }, needs)
    }

    pub fn gather_rows(&mut self, x: VarId, idx: Rc<Vec<usize>>) -> VarId {
        let (r, c) = self.nodes[x].value.rows_cols();
        let mut out = vec![0.0; idx.len() * c];
        for (i, &src) in idx.iter().enumerate() {
            assert!(src < r, "gather index");
            out[i * c..(i + 1) * c].copy_from_slice(&self.nodes[x].value.data[src * c..(src + 1) * c]);
        }
        let needs = self.needs(x);
        self.push(Tensor::new(vec![idx.len(), c], out), Op::GatherRows { x, idx }, needs)
    }

    pub fn slice_cols(&mut self, x: VarId, from: usize, width: usize) -> VarId {
        let (r, c) = self.nodes[x].value.rows_cols();
        assert!(from + width <= c, "slice bounds");
        let mut out = vec![0.0; r * width];
        for i in 0..r {
            out[i * width..(i + 1) * width]
                .copy_from_slice(&self.nodes[x].value.data[i * c + from..i * c + from + width]);
        }
        let needs = self.needs(x);
        self.push(Tensor::new(vec![r, width], out), Op::SliceCols { x, from, width }, needs)
    }

    pub fn concat_cols(&mut self, xs: Vec<VarId>) -> VarId {
        assert!(!xs.is_empty());
        let r = self.nodes[xs[0]].value.rows_cols().0;
        let total: usize = xs.iter().map(|&v| self.nodes[v].value.rows_cols().1).sum();
        let mut out = vec![0.0; r * total];
        let mut at = 0;
        for &v in &xs {
            let (rv, cv) = self.nodes[v].value.rows_cols();
            assert_eq!(rv, r, "concat rows");
            for i in 0..r {
                out[i * total + at..i * total + at + cv]
                    .copy_from_slice(&self.nodes[v].value.data[i * cv..(i + 1) * cv]);
            }
            at += cv;
        }
        let needs = xs.iter().any(|&v| self.needs(v));
        self.push(Tensor::new(vec![r, total], out), Op::ConcatCols { xs }, needs)
    }

    pub fn permute(&mut self, x: VarId, in_shape: Vec<usize>, perm: Vec<usize>, out_shape: Vec<usize>) -> VarId {
        let data = permute_data(&self.nodes[x].value.data, &in_shape, &perm);
        assert_eq!(out_shape.iter().product::<usize>(), data.len(), "permute out shape");
        let needs = self.needs(x);
        self.push(Tensor::new(out_shape, data), Op::Permute { x, in_shape, perm }, needs)
    }

    /// Metadata-only reshape (identity permutation).
    pub fn reshape(&mut self, x: VarId, out_shape: Vec<usize>) -> VarId {
        let in_shape = self.nodes[x].value.shape.clone();
        let perm: Vec<usize> = (0..in_shape.len()).collect();
        self.permute(x, in_shape, perm, out_shape)
    }

    pub fn softmax(&mut self, x: VarId) -> VarId {
        let (r, c) = self.nodes[x].value.rows_cols();
        let mut out = self.nodes[x].value.data.clone();
        for i in 0..r {
            softmax_row(&mut out[i * c..(i + 1) * c]);
        }
        let shape = self.nodes[x].value.shape.clone();
        let needs = self.needs(x);
        self.push(Tensor::new(shape, out), Op::Softmax { x }, needs)
    }

    pub fn rel_bias(
        &mut self,
        spatial: VarId,
        temporal: VarId,
        sidx: Rc<Vec<usize>>,
        tidx: Rc<Vec<usize>>,
        heads: usize,
        m: usize,
    ) -> VarId {
        assert_eq!(sidx.len(), m * m);
        assert_eq!(tidx.len(), m * m);
        let s_len = self.nodes[spatial].value.data.len() / heads;
        let t_len = self.nodes[temporal].value.data.len() / heads;
        let mut out = vec![0.0; heads * m * m];
        for h in 0..heads {
            let srow = &self.nodes[spatial].value.data[h * s_len..(h + 1) * s_len];
            let trow = &self.nodes[temporal].value.data[h * t_len..(h + 1) * t_len];
            for ij in 0..m * m {
                out[h * m * m + ij] = srow[sidx[ij]] + trow[tidx[ij]];
            }
        }
        let needs = self.needs(spatial) || self.needs(temporal);
        self.push(
            Tensor::new(vec![heads, m, m], out),
            Op::RelBias { spatial, temporal, sidx, tidx, heads, m },
            needs,
        )
    }

    pub fn add_bias_mask(
        &mut self,
        scores: VarId,
        bias: VarId,
        mask: Option<Rc<Vec<f64>>>,
        windows: usize,
        heads: usize,
        m: usize,
    ) -> VarId {
        assert_eq!(self.nodes[scores].value.data.len(), windows * heads * m * m);
        assert_eq!(self.nodes[bias].value.data.len(), heads * m * m);
        if let Some(mk) = &mask {
            assert_eq!(mk.len(), windows * m * m);
        }
        let mut out = self.nodes[scores].value.data.clone();
        for w in 0..windows {
            for h in 0..heads {
                let base = (w * heads + h) * m * m;
                for ij in 0..m * m {
                    out[base + ij] += self.nodes[bias].value.data[h * m * m + ij];
                    if let Some(mk) = &mask {
                        out[base + ij] += mk[w * m * m + ij];
                    }
                }
            }
        }
        let shape = self.nodes[scores].value.shape.clone();
        let needs = self.needs(scores) || self.needs(bias);
        self.push(
            Tensor::new(shape, out),
            Op::AddBiasMask { scores, bias, windows, heads, m },
            needs,
        )
    }

    pub fn layer_norm(&mut self, x: VarId, gain: VarId, shift: VarId) -> VarId {
        let (r, c) = self.nodes[x].value.rows_cols();
        assert_eq!(self.nodes[gain].value.data.len(), c);
        assert_eq!(self.nodes[shift].value.data.len(), c);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &self.nodes[x].value.data[i * c..(i + 1) * c];
            let (mean, inv) = row_mean_inv_std(row);
            for j in 0..c {
                out[i * c + j] =
                    (row[j] - mean) * inv * self.nodes[gain].value.data[j] + self.nodes[shift].value.data[j];
            }
        }
        let shape = self.nodes[x].value.shape.clone();
        let needs = self.needs(x) || self.needs(gain) || self.needs(shift);
        self.push(Tensor::new(shape, out), Op::LayerNorm { x, gain, shift }, needs)
    }

    pub fn gelu(&mut self, x: VarId) -> VarId {
        let out: Vec<f64> = self.nodes[x].value.data.iter().map(|&v| gelu(v)).collect();
        let shape = self.nodes[x].value.shape.clone();
        let needs = self.needs(x);
        self.push(Tensor::new(shape, out), Op::Gelu { x }, needs)
    }

    pub fn group_mean_rows(&mut self, x: VarId, group: usize) -> VarId {
        let (r, c) = self.nodes[x].value.rows_cols();
        assert!(group > 0 && r % group == 0, "group size divides rows");
        let rout = r / group;
        let mut out = vec![0.0; rout * c];
        for i in 0..rout {
            for g in 0..group {
                let row = &self.nodes[x].value.data[(i * group + g) * c..(i * group + g + 1) * c];
                for j in 0..c {
                    out[i * c + j] += row[j];
                }
            }
            for j in 0..c {
                out[i * c + j] /= group as f64;
            }
        }
        let needs = self.needs(x);
        self.push(Tensor::new(vec![rout, c], out), Op::GroupMeanRows { x, group }, needs)
    }

    pub fn normalize_rows(&mut self, x: VarId) -> VarId {
        let (r, c) = self.nodes[x].value.rows_cols();
        assert_eq!(c, 3, "normalize_rows expects 3-wide rows");
        let mut out = vec![0.0; r * 3];
        for i in 0..r {
            let row = &self.nodes[x].value.data[i * 3..(i + 1) * 3];
            let n = (row[0] * row[0] + row[1] * row[1] + row[2] * row[2]).sqrt();
            if n <= 1e-12 {
                out[i * 3] = 0.0;
                out[i * 3 + 1] = 0.0;
                out[i * 3 + 2] = -1.0;
            } else {
                out[i * 3] = row[0] / n;
                out[i * 3 + 1] = row[1] / n;
                out[i * 3 + 2] = row[2] / n;
            }
        }
        let needs = self.needs(x);
        self.push(Tensor::new(vec![r, 3], out), Op::NormalizeRows { x }, needs)
    }

    pub fn angular_loss(&mut self, pred: VarId, gt: Rc<Vec<f64>>, weights: Rc<Vec<f64>>) -> VarId {
        let (r, c) = self.nodes[pred].value.rows_cols();
        assert_eq!(c, 3);
        assert_eq!(gt.len(), r * 3, "target rows");
        assert_eq!(weights.len(), r, "weight per row");
        let mut loss = 0.0;
        for i in 0..r {
            let p = &self.nodes[pred].value.data[i * 3..(i + 1) * 3];
            let g = &gt[i * 3..(i + 1) * 3];
            let dot = (p[0] * g[0] + p[1] * g[1] + p[2] * g[2]).clamp(-1.0 + LOSS_COS_CLAMP, 1.0 - LOSS_COS_CLAMP);
            loss += weights[i] * RAD_TO_DEG * dot.acos();
        }
        let needs = self.needs(pred);
        self.push(Tensor::scalar(loss), Op::AngularLoss { pred, gt, weights }, needs)
    }

    pub fn planar_loss_xy(&mut self, pred: VarId, v: [f64; 2], row: usize) -> VarId {
        let (r, c) = self.nodes[pred].value.rows_cols();
        assert_eq!(c, 3);
        assert!(row < r, "loss row in range");
        let p = &self.nodes[pred].value.data[row * 3..row * 3 + 3];
        let n = p[0].hypot(p[1]);
        let loss = if n <= PLANAR_EPS {
            PLANAR_PENALTY_DEG
        } else {
            let cos = ((p[0] * v[0] + p[1] * v[1]) / n).clamp(-1.0 + LOSS_COS_CLAMP, 1.0 - LOSS_COS_CLAMP);
            RAD_TO_DEG * cos.acos()
        };
        let needs = self.needs(pred);
        self.push(Tensor::scalar(loss), Op::PlanarLossXY { pred, v, row }, needs)
    }

    fn grad_buf(&mut self, v: VarId) -> &mut Vec<f64> {
        let len = self.nodes[v].value.data.len();
        self.nodes[v].grad.get_or_insert_with(|| vec![0.0; len])
    }

    /// Backpropagates from a scalar root; gradients accumulate at parameter
    /// leaves in fixed reverse-node order.
    pub fn backward(&mut self, root: VarId) {
        assert_eq!(self.nodes[root].value.data.len(), 1, "backward needs a scalar root");
        self.grad_buf(root)[0] = 1.0;
        for v in (0..=root).rev() {
            if !self.nodes[v].needs_grad || self.nodes[v].grad.is_none() {
                continue;
            }
            let gout = self.nodes[v].grad.take().unwrap();
            self.step_backward(v, &gout);
            self.nodes[v].grad = Some(gout);
        }
    }

    fn step_backward(&mut self, v: VarId, gout: &[f64]) {
        // Ops reference only earlier nodes, so split_at_mut is avoidable by
        // cloning the cheap metadata and indexing values read-only.
        match &self.nodes[v].op {
            Op::Leaf { .. } => {}
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = self.nodes[a].value.rows_cols();
                let n = self.nodes[b].value.rows_cols().1;
                if self.needs(a) {
                    let bdat = self.nodes[b].value.data.clone();
                    mm(self.grad_buf(a), 1.0, m, n, k, gout, false, &bdat, true);
                }
                if self.needs(b) {
                    let adat = self.nodes[a].value.data.clone();
                    mm(self.grad_buf(b), 1.0, k, m, n, &adat, true, gout, false);
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (a, b, trans_b) = (*a, *b, *trans_b);
                let ash = self.nodes[a].value.shape.clone();
                let (g, m, k) = (ash[0], ash[1], ash[2]);
                let n = gout.len() / (g * m);
                if self.needs(a) {
                    // dA = dC·B (or dC·Bᵀᵀ = dC·B_stored when trans_b).
                    let bdat = self.nodes[b].value.data.clone();
                    let ga = self.grad_buf(a);
                    for i in 0..g {
                        mm(
                            &mut ga[i * m * k..(i + 1) * m * k],
                            1.0,
                            m,
                            n,
                            k,
                            &gout[i * m * n..(i + 1) * m * n],
                            false,
                            &bdat[i * n * k..(i + 1) * n * k],
                            !trans_b,
                        );
                    }
                }
                if self.needs(b) {
                    let adat = self.nodes[a].value.data.clone();
                    let gb = self.grad_buf(b);
                    for i in 0..g {
                        let (go, ad) = (&gout[i * m * n..(i + 1) * m * n], &adat[i * m * k..(i + 1) * m * k]);
                        if trans_b {
                            // B stored (n×k): dB = dCᵀ·A.
                            mm(&mut gb[i * n * k..(i + 1) * n * k], 1.0, n, m, k, go, true, ad, false);
                        } else {
                            // B stored (k×n): dB = Aᵀ·dC.
                            mm(&mut gb[i * k * n..(i + 1) * k * n], 1.0, k, m, n, ad, true, go, false);
                        }
                    }
                }
            }
            Op::AddRowBias { x, bias } => {
                let (x, bias) = (*x, *bias);
                let c = self.nodes[bias].value.data.len();
                if self.needs(x) {
                    let gx = self.grad_buf(x);
                    for (g, go) in gx.iter_mut().zip(gout) {
                        *g += go;
                    }
                }
                if self.needs(bias) {
                    let gb = self.grad_buf(bias);
                    for (i, go) in gout.iter().enumerate() {
                        gb[i % c] += go;
                    }
                }
            }
            Op::Add { x, y } => {
                let (x, y) = (*x, *y);
                for t in [x, y] {
                    if self.needs(t) {
                        let gt = self.grad_buf(t);
                        for (g, go) in gt.iter_mut().zip(gout) {
                            *g += go;
                        }
                    }
                }
            }
            Op::Scale { x, c } => {
                let (x, c) = (*x, *c);
                if self.needs(x) {
                    let gx = self.grad_buf(x);
                    for (g, go) in gx.iter_mut().zip(gout) {
                        *g += go * c;
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let (x, idx) = (*x, idx.clone());
                if self.needs(x) {
                    let c = self.nodes[x].value.rows_cols().1;
                    let gx = self.grad_buf(x);
                    for (i, &src) in idx.iter().enumerate() {
                        for j in 0..c {
                            gx[src * c + j] += gout[i * c + j];
                        }
                    }
                }
            }
            Op::SliceCols { x, from, width } => {
                let (x, from, width) = (*x, *from, *width);
                if self.needs(x) {
                    let c = self.nodes[x].value.rows_cols().1;
                    let r = gout.len() / width;
                    let gx = self.grad_buf(x);
                    for i in 0..r {
                        for j in 0..width {
                            gx[i * c + from + j] += gout[i * width + j];
                        }
                    }
                }
            }
            Op::ConcatCols { xs } => {
                let xs = xs.clone();
                let total: usize = xs.iter().map(|&t| self.nodes[t].value.rows_cols().1).sum();
                let r = gout.len() / total;
                let mut at = 0;
                for &t in &xs {
                    let cv = self.nodes[t].value.rows_cols().1;
                    if self.needs(t) {
                        let gt = self.grad_buf(t);
                        for i in 0..r {
                            for j in 0..cv {
                                gt[i * cv + j] += gout[i * total + at + j];
                            }
                        }
                    }
                    at += cv;
                }
            }
            Op::Permute { x, in_shape, perm, .. } => {
                let (x, in_shape, perm) = (*x, in_shape.clone(), perm.clone());
                if self.needs(x) {
                    // Gradient flows through the inverse permutation.
                    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let back = permute_data(gout, &out_shape, &inv);
                    let gx = self.grad_buf(x);
                    for (g, b) in gx.iter_mut().zip(&back) {
                        *g += b;
                    }
                }
            }
            Op::Softmax { x } => {
                let x = *x;
                if self.needs(x) {
                    let (r, c) = self.nodes[v].value.rows_cols();
                    let p = self.nodes[v].value.data.clone();
                    let gx = self.grad_buf(x);
                    for i in 0..r {
                        let prow = &p[i * c..(i + 1) * c];
                        let grow = &gout[i * c..(i + 1) * c];
                        let dot: f64 = prow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[i * c + j] += prow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::RelBias { spatial, temporal, sidx, tidx, heads, m } => {
                let (spatial, temporal, heads, m) = (*spatial, *temporal, *heads, *m);
                let (sidx, tidx) = (sidx.clone(), tidx.clone());
                let s_len = self.nodes[spatial].value.data.len() / heads;
                let t_len = self.nodes[temporal].value.data.len() / heads;
                if self.needs(spatial) {
                    let gs = self.grad_buf(spatial);
                    for h in 0..heads {
                        for ij in 0..m * m {
                            gs[h * s_len + sidx[ij]] += gout[h * m * m + ij];
                        }
                    }
                }
                if self.needs(temporal) {
                    let gt = self.grad_buf(temporal);
                    for h in 0..heads {
                        for ij in 0..m * m {
                            gt[h * t_len + tidx[ij]] += gout[h * m * m + ij];
                        }
                    }
                }
            }
            Op::AddBiasMask { scores, bias, windows, heads, m, .. } => {
                let (scores, bias, windows, heads, m) = (*scores, *bias, *windows, *heads, *m);
                if self.needs(scores) {
                    let gs = self.grad_buf(scores);
                    for (g, go) in gs.iter_mut().zip(gout) {
                        *g += go;
                    }
                }
                if self.needs(bias) {
                    let gb = self.grad_buf(bias);
                    for w in 0..windows {
                        for h in 0..heads {
                            let base = (w * heads + h) * m * m;
                            for ij in 0..m * m {
                                gb[h * m * m + ij] += gout[base + ij];
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, shift } => {
                let (x, gain, shift) = (*x, *gain, *shift);
                let (r, c) = self.nodes[x].value.rows_cols();
                let xdat = self.nodes[x].value.data.clone();
                let gdat = self.nodes[gain].value.data.clone();
                for i in 0..r {
                    let row = &xdat[i * c..(i + 1) * c];
                    let grow = &gout[i * c..(i + 1) * c];
                    let (mean, inv) = row_mean_inv_std(row);
                    if self.needs(gain) {
                        let gg = self.grad_buf(gain);
                        for j in 0..c {
                            gg[j] += grow[j] * (row[j] - mean) * inv;
                        }
                    }
                    if self.needs(shift) {
                        let gs = self.grad_buf(shift);
                        for j in 0..c {
                            gs[j] += grow[j];
                        }
                    }
                    if self.needs(x) {
                        let mut sum_dg = 0.0;
                        let mut sum_dgx = 0.0;
                        for j in 0..c {
                            let dg = grow[j] * gdat[j];
                            sum_dg += dg;
                            sum_dgx += dg * (row[j] - mean) * inv;
                        }
                        let cf = c as f64;
                        let gx = self.grad_buf(x);
                        for j in 0..c {
                            let dg = grow[j] * gdat[j];
                            let xh = (row[j] - mean) * inv;
                            gx[i * c + j] += inv * (dg - sum_dg / cf - xh * sum_dgx / cf);
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                let x = *x;
                if self.needs(x) {
                    let xdat = self.nodes[x].value.data.clone();
                    let gx = self.grad_buf(x);
                    for (i, &v) in xdat.iter().enumerate() {
                        gx[i] += gout[i] * gelu_deriv(v);
                    }
                }
            }
            Op::GroupMeanRows { x, group } => {
                let (x, group) = (*x, *group);
                if self.needs(x) {
                    let c = self.nodes[x].value.rows_cols().1;
                    let scale = 1.0 / group as f64;
                    let gx = self.grad_buf(x);
                    let rout = gout.len() / c;
                    for i in 0..rout {
                        for g in 0..group {
                            for j in 0..c {
                                gx[(i * group + g) * c + j] += gout[i * c + j] * scale;
                            }
                        }
                    }
                }
            }
            Op::NormalizeRows { x } => {
                let x = *x;
                if self.needs(x) {
                    let xdat = self.nodes[x].value.data.clone();
                    let ydat = self.nodes[v].value.data.clone();
                    let r = xdat.len() / 3;
                    let gx = self.grad_buf(x);
                    for i in 0..r {
                        let xr = &xdat[i * 3..(i + 1) * 3];
                        let n = (xr[0] * xr[0] + xr[1] * xr[1] + xr[2] * xr[2]).sqrt();
                        if n <= 1e-12 {
                            continue; // fallback row: flat, no gradient
                        }
                        let y = &ydat[i * 3..(i + 1) * 3];
                        let go = &gout[i * 3..(i + 1) * 3];
                        let ydot = y[0] * go[0] + y[1] * go[1] + y[2] * go[2];
                        for j in 0..3 {
                            gx[i * 3 + j] += (go[j] - y[j] * ydot) / n;
                        }
                    }
                }
            }
            Op::AngularLoss { pred, gt, weights } => {
                let (pred, gt, weights) = (*pred, gt.clone(), weights.clone());
                if self.needs(pred) {
                    let pdat = self.nodes[pred].value.data.clone();
                    let r = pdat.len() / 3;
                    let gp = self.grad_buf(pred);
                    for i in 0..r {
                        let p = &pdat[i * 3..(i + 1) * 3];
                        let g = &gt[i * 3..(i + 1) * 3];
                        let dot = p[0] * g[0] + p[1] * g[1] + p[2] * g[2];
                        if dot <= -1.0 + LOSS_COS_CLAMP || dot >= 1.0 - LOSS_COS_CLAMP {
                            continue; // clamped: flat
                        }
                        let ddot = -weights[i] * RAD_TO_DEG / (1.0 - dot * dot).sqrt() * gout[0];
                        for j in 0..3 {
                            gp[i * 3 + j] += ddot * g[j];
                        }
                    }
                }
            }
            Op::PlanarLossXY { pred, v: vdir, row } => {
                let (pred, vdir, row) = (*pred, *vdir, *row);
                if self.needs(pred) {
                    let pdat = self.nodes[pred].value.data.clone();
                    let p = &pdat[row * 3..row * 3 + 3];
                    let n = p[0].hypot(p[1]);
                    let gp = self.grad_buf(pred);
                    if n > PLANAR_EPS {
                        let dot = p[0] * vdir[0] + p[1] * vdir[1];
                        let cos = dot / n;
                        if cos > -1.0 + LOSS_COS_CLAMP && cos < 1.0 - LOSS_COS_CLAMP {
                            let dcos = -RAD_TO_DEG / (1.0 - cos * cos).sqrt() * gout[0];
                            // d(cos)/dp = v/n − p·dot/n³ over the (x,y) block.
                            for j in 0..2 {
                                gp[row * 3 + j] += dcos * (vdir[j] / n - p[j] * dot / (n * n * n));
                            }
                        }
                    }
                }
            }
        }
    }
}

fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        // Fully masked rows cannot occur (self-attention is never masked);
        // keep the output defined anyway.
        let u = 1.0 / row.len() as f64;
        row.fill(u);
        return;
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn row_mean_inv_std(row: &[f64]) -> (f64, f64) {
    let c = row.len() as f64;
    let mean = row.iter().sum::<f64>() / c;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
    (mean, 1.0 / (var + crate::patchify::LAYERNORM_EPS).sqrt())
}

const GELU_A: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_B: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_A * (x + GELU_B * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_A * (x + GELU_B * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_A * (1.0 + 3.0 * GELU_B * x * x)
}

fn permute_data(data: &[f64], in_shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let nd = in_shape.len();
    assert_eq!(perm.len(), nd);
    let mut in_strides = vec![1usize; nd];
    for d in (0..nd.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * in_shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let mut out = vec![0.0; data.len()];
    let mut idx = vec![0usize; nd];
    for slot in out.iter_mut() {
        let mut src = 0;
        for d in 0..nd {
            src += idx[d] * in_strides[perm[d]];
        }
        *slot = data[src];
        for d in (0..nd).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}
