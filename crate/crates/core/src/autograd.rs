//! Minimal reverse-mode differentiation over matrices.
//!
//! A [`Tape`] records matrix-valued nodes in creation order; `backward` walks
//! it in reverse. Only the operations the encoder, depth stack and fusion
//! module need are provided. Rows are tokens (or spatial locations) and
//! columns are channels; several images are stacked along the rows in blocks
//! of equal length.

use crate::fusion_loss::{gelu, gelu_grad, sigmoid};
use crate::numerics::{matmul_nn_acc, matmul_nt_acc, matmul_tn_acc, DenseMatrix, Scalar};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    /// `a · wᵀ`
    MatMulNt(Var, Var),
    Add(Var, Var),
    /// Adds a `1 × n` row to every row.
    AddRow(Var, Var),
    /// Adds a `block × n` matrix to each consecutive block of rows.
    AddBlocks(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: DenseMatrix<T>,
        rstd: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seq: usize,
        heads: usize,
        /// Softmax probabilities, one `seq × seq` matrix per (image, head).
        probs: Vec<DenseMatrix<T>>,
    },
    ConcatCols(Var, Var),
    Unfold3x3 {
        x: Var,
        grid_h: usize,
        grid_w: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: DenseMatrix<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients indexed by [`Var`]; `None` where no gradient flowed.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<DenseMatrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&DenseMatrix<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<DenseMatrix<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &DenseMatrix<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: DenseMatrix<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: DenseMatrix<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul_nt(&mut self, a: Var, w: Var) -> Var {
        let value = self
            .value(a)
            .matmul_nt(self.value(w))
            .expect("matmul_nt shape");
        let rg = self.rg(&[a, w]);
        self.push(value, Op::MatMulNt(a, w), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b)).expect("add shape");
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.rows(), 1, "bias must be a row");
        assert_eq!(b.cols(), self.value(a).cols(), "bias width");
        let mut value = self.value(a).clone();
        let brow = b.row(0).to_vec();
        for i in 0..value.rows() {
            for (x, &bb) in value.row_mut(i).iter_mut().zip(&brow) {
                *x = *x + bb;
            }
        }
        let rg = self.rg(&[a, bias]);
        self.push(value, Op::AddRow(a, bias), rg)
    }

    pub fn add_blocks(&mut self, a: Var, block: Var) -> Var {
        let blk = self.value(block);
        let (br, bc) = blk.shape();
        let av = self.value(a);
        assert_eq!(av.cols(), bc, "block width");
        assert_eq!(av.rows() % br, 0, "rows not a multiple of block");
        let mut value = av.clone();
        for i in 0..value.rows() {
            let src = blk.row(i % br).to_vec();
            for (x, b) in value.row_mut(i).iter_mut().zip(src) {
                *x = *x + b;
            }
        }
        let rg = self.rg(&[a, block]);
        self.push(value, Op::AddBlocks(a, block), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).hadamard(self.value(b)).expect("mul shape");
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).scale(s);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let rg = self.rg(&[a]);
        self.push(value, Op::Gelu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(value, Op::Sigmoid(a), rg)
    }

    /// Row-wise layer norm with `1 × n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = self.value(gamma).row(0).to_vec();
        let b = self.value(beta).row(0).to_vec();
        let n = T::from_count(cols);
        let eps = T::lit(LAYER_NORM_EPS);
        let mut xhat = DenseMatrix::zeros(rows, cols);
        let mut out = DenseMatrix::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for i in 0..rows {
            let row = xv.row(i);
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) / n;
            let var = row
                .iter()
                .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
                / n;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for j in 0..cols {
                let xh = (row[j] - mean) * r;
                xhat.set(i, j, xh);
                out.set(i, j, xh * g[j] + b[j]);
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Multi-head softmax attention. `q`, `k`, `v` are `(images · seq) × d`;
    /// head `h` uses columns `h·d/heads .. (h+1)·d/heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq: usize, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = qv.shape();
        assert_eq!(kv.shape(), (rows, d));
        assert_eq!(vv.shape(), (rows, d));
        assert_eq!(rows % seq, 0, "rows not a multiple of sequence length");
        assert_eq!(d % heads, 0, "width not divisible by heads");
        let dh = d / heads;
        let scale = T::one() / T::from_count(dh).sqrt();
        let images = rows / seq;
        let mut out = DenseMatrix::zeros(rows, d);
        let mut probs = Vec::with_capacity(images * heads);
        for img in 0..images {
            let r0 = img * seq;
            for h in 0..heads {
                let c0 = h * dh;
                let qh = qv.block(r0, c0, seq, dh);
                let kh = kv.block(r0, c0, seq, dh);
                let vh = vv.block(r0, c0, seq, dh);
                let mut p = DenseMatrix::zeros(seq, seq);
                matmul_nt_acc(&qh, &kh, &mut p);
                for i in 0..seq {
                    let prow = p.row_mut(i);
                    let maxv = prow.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
                    let mut z = T::zero();
                    for pj in prow.iter_mut() {
                        *pj = ((*pj - maxv) * scale).exp();
                        z = z + *pj;
                    }
                    let inv = T::one() / z;
                    for pj in prow.iter_mut() {
                        *pj = *pj * inv;
                    }
                }
                let mut oh = DenseMatrix::zeros(seq, dh);
                matmul_nn_acc(&p, &vh, &mut oh);
                for i in 0..seq {
                    out.row_mut(r0 + i)[c0..c0 + dh].copy_from_slice(oh.row(i));
                }
                probs.push(p);
            }
        }
        let rg = self.rg(&[q, k, v]);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                seq,
                heads,
                probs,
            },
            rg,
        )
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.rows(), bv.rows(), "concat rows");
        let (ca, cb) = (av.cols(), bv.cols());
        let mut out = DenseMatrix::zeros(av.rows(), ca + cb);
        for i in 0..av.rows() {
            let row = out.row_mut(i);
            row[..ca].copy_from_slice(av.row(i));
            row[ca..].copy_from_slice(bv.row(i));
        }
        let rg = self.rg(&[a, b]);
        self.push(out, Op::ConcatCols(a, b), rg)
    }

    /// 3×3 zero-padded neighbourhood gather over `grid_h × grid_w` grids
    /// stacked along the rows: `(images · h · w) × c → (images · h · w) × 9c`.
    pub fn unfold3x3(&mut self, x: Var, grid_h: usize, grid_w: usize) -> Var {
        let xv = self.value(x);
        let (rows, c) = xv.shape();
        let cells = grid_h * grid_w;
        assert_eq!(rows % cells, 0, "rows not a multiple of grid size");
        let mut out = DenseMatrix::zeros(rows, 9 * c);
        for img in 0..rows / cells {
            for y in 0..grid_h {
                for xx in 0..grid_w {
                    let dst = img * cells + y * grid_w + xx;
                    for (slot, (dy, dx)) in NEIGHBOURS.iter().enumerate() {
                        let (sy, sx) = (y as isize + dy, xx as isize + dx);
                        if sy < 0 || sx < 0 || sy >= grid_h as isize || sx >= grid_w as isize {
                            continue;
                        }
                        let src = img * cells + sy as usize * grid_w + sx as usize;
                        out.row_mut(dst)[slot * c..(slot + 1) * c].copy_from_slice(xv.row(src));
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::Unfold3x3 { x, grid_h, grid_w }, rg)
    }

    /// Reverse pass from `root`, seeded with `seed` (same shape as the root).
    pub fn backward(&self, root: Var, seed: DenseMatrix<T>) -> Gradients<T> {
        assert_eq!(seed.shape(), self.value(root).shape(), "seed shape");
        let mut grads: Vec<Option<DenseMatrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(
        &self,
        grads: &mut [Option<DenseMatrix<T>>],
        v: Var,
        f: impl FnOnce(&mut DenseMatrix<T>),
    ) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            let (r, c) = self.nodes[v.0].value.shape();
            *slot = Some(DenseMatrix::zeros(r, c));
        }
        f(slot.as_mut().expect("just initialised"));
    }

    fn propagate(&self, node: &Node<T>, g: &DenseMatrix<T>, grads: &mut [Option<DenseMatrix<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMulNt(a, w) => {
                let (av, wv) = (self.value(*a), self.value(*w));
                // y = a wᵀ: da = g w, dw = gᵀ a
                self.accumulate(grads, *a, |ga| matmul_nn_acc(g, wv, ga));
                self.accumulate(grads, *w, |gw| matmul_tn_acc(g, av, gw));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| ga.axpy(T::one(), g));
                self.accumulate(grads, *b, |gb| gb.axpy(T::one(), g));
            }
            Op::AddRow(a, bias) => {
                self.accumulate(grads, *a, |ga| ga.axpy(T::one(), g));
                self.accumulate(grads, *bias, |gb| {
                    let row = gb.row_mut(0);
                    for i in 0..g.rows() {
                        for (b, &x) in row.iter_mut().zip(g.row(i)) {
                            *b = *b + x;
                        }
                    }
                });
            }
            Op::AddBlocks(a, block) => {
                self.accumulate(grads, *a, |ga| ga.axpy(T::one(), g));
                self.accumulate(grads, *block, |gb| {
                    let br = gb.rows();
                    for i in 0..g.rows() {
                        for (b, &x) in gb.row_mut(i % br).iter_mut().zip(g.row(i)) {
                            *b = *b + x;
                        }
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, |ga| {
                    for ((o, &gi), &bi) in ga.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *o = *o + gi * bi;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for ((o, &gi), &ai) in gb.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *o = *o + gi * ai;
                    }
                });
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, |ga| ga.axpy(*s, g));
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                self.accumulate(grads, *a, |ga| {
                    for ((o, &gi), &x) in ga.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *o = *o + gi * gelu_grad(x);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let yv = &node.value;
                self.accumulate(grads, *a, |ga| {
                    for ((o, &gi), &y) in ga.data_mut().iter_mut().zip(g.data()).zip(yv.data()) {
                        *o = *o + gi * y * (T::one() - y);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gam = self.value(*gamma).row(0).to_vec();
                let cols = xhat.cols();
                let n = T::from_count(cols);
                self.accumulate(grads, *gamma, |gg| {
                    let row = gg.row_mut(0);
                    for i in 0..g.rows() {
                        for j in 0..cols {
                            row[j] = row[j] + g.get(i, j) * xhat.get(i, j);
                        }
                    }
                });
                self.accumulate(grads, *beta, |gb| {
                    let row = gb.row_mut(0);
                    for i in 0..g.rows() {
                        for (b, &x) in row.iter_mut().zip(g.row(i)) {
                            *b = *b + x;
                        }
                    }
                });
                self.accumulate(grads, *x, |gx| {
                    let mut dxhat = vec![T::zero(); cols];
                    for i in 0..g.rows() {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..cols {
                            dxhat[j] = g.get(i, j) * gam[j];
                            m1 = m1 + dxhat[j];
                            m2 = m2 + dxhat[j] * xhat.get(i, j);
                        }
                        m1 = m1 / n;
                        m2 = m2 / n;
                        let r = rstd[i];
                        let out = gx.row_mut(i);
                        for j in 0..cols {
                            out[j] = out[j] + r * (dxhat[j] - m1 - xhat.get(i, j) * m2);
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                seq,
                heads,
                probs,
            } => self.attention_backward(g, *q, *k, *v, *seq, *heads, probs, grads),
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols();
                self.accumulate(grads, *a, |ga| {
                    for i in 0..g.rows() {
                        for (o, &x) in ga.row_mut(i).iter_mut().zip(&g.row(i)[..ca]) {
                            *o = *o + x;
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..g.rows() {
                        for (o, &x) in gb.row_mut(i).iter_mut().zip(&g.row(i)[ca..]) {
                            *o = *o + x;
                        }
                    }
                });
            }
            Op::Unfold3x3 { x, grid_h, grid_w } => {
                let (gh, gw) = (*grid_h, *grid_w);
                let c = self.value(*x).cols();
                let cells = gh * gw;
                self.accumulate(grads, *x, |gx| {
                    for img in 0..g.rows() / cells {
                        for y in 0..gh {
                            for xx in 0..gw {
                                let dst = img * cells + y * gw + xx;
                                for (slot, (dy, dx)) in NEIGHBOURS.iter().enumerate() {
                                    let (sy, sx) = (y as isize + dy, xx as isize + dx);
                                    if sy < 0 || sx < 0 || sy >= gh as isize || sx >= gw as isize {
                                        continue;
                                    }
                                    let src = img * cells + sy as usize * gw + sx as usize;
                                    let gsrc = &g.row(dst)[slot * c..(slot + 1) * c];
                                    for (o, &v) in gx.row_mut(src).iter_mut().zip(gsrc) {
                                        *o = *o + v;
                                    }
                                }
                            }
                        }
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &DenseMatrix<T>,
        q: Var,
        k: Var,
        v: Var,
        seq: usize,
        heads: usize,
        probs: &[DenseMatrix<T>],
        grads: &mut [Option<DenseMatrix<T>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = qv.shape();
        let dh = d / heads;
        let scale = T::one() / T::from_count(dh).sqrt();
        let mut dq = DenseMatrix::zeros(rows, d);
        let mut dk = DenseMatrix::zeros(rows, d);
        let mut dv = DenseMatrix::zeros(rows, d);
        for img in 0..rows / seq {
            let r0 = img * seq;
            for h in 0..heads {
                let c0 = h * dh;
                let p = &probs[img * heads + h];
                let gh = g.block(r0, c0, seq, dh);
                let qh = qv.block(r0, c0, seq, dh);
                let kh = kv.block(r0, c0, seq, dh);
                let vh = vv.block(r0, c0, seq, dh);
                // dP = dO Vᵀ ; dS = P ⊙ (dP − rowsum(dP ⊙ P)) · scale
                let mut ds = DenseMatrix::zeros(seq, seq);
                matmul_nt_acc(&gh, &vh, &mut ds);
                for i in 0..seq {
                    let prow = p.row(i);
                    let srow = ds.row_mut(i);
                    let dot_pd = srow.iter().zip(prow).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                    for (sj, &pj) in srow.iter_mut().zip(prow) {
                        *sj = pj * (*sj - dot_pd) * scale;
                    }
                }
                let mut dvh = DenseMatrix::zeros(seq, dh);
                matmul_tn_acc(p, &gh, &mut dvh);
                let mut dqh = DenseMatrix::zeros(seq, dh);
                matmul_nn_acc(&ds, &kh, &mut dqh);
                let mut dkh = DenseMatrix::zeros(seq, dh);
                matmul_tn_acc(&ds, &qh, &mut dkh);
                for i in 0..seq {
                    dq.row_mut(r0 + i)[c0..c0 + dh].copy_from_slice(dqh.row(i));
                    dk.row_mut(r0 + i)[c0..c0 + dh].copy_from_slice(dkh.row(i));
                    dv.row_mut(r0 + i)[c0..c0 + dh].copy_from_slice(dvh.row(i));
                }
            }
        }
        self.accumulate(grads, q, |gq| gq.axpy(T::one(), &dq));
        self.accumulate(grads, k, |gk| gk.axpy(T::one(), &dk));
        self.accumulate(grads, v, |gv| gv.axpy(T::one(), &dv));
    }
}

/// Row-major 3×3 neighbourhood offsets `(dy, dx)`.
const NEIGHBOURS: [(isize, isize); 9] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 0),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

#[cfg(test)]
mod tests {
    use super::*;

    type M = DenseMatrix<f64>;

    fn rnd(rows: usize, cols: usize, seed: u64) -> M {
        let mut s = seed.wrapping_add(0x9E3779B97F4A7C15);
        M::from_fn(rows, cols, |_, _| {
            s = s
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    /// Checks d(Σ w ⊙ f(inputs)) against central differences for every input
    /// entry. `build` must create the leaves in the order given.
    fn grad_check(inputs: Vec<M>, build: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone(), true)).collect();
        let out = build(&mut tape, &vars);
        let (r, c) = tape.value(out).shape();
        let weights = rnd(r, c, 99);
        let grads = tape.backward(out, weights.clone());
        let objective = |ins: &[M]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = ins.iter().map(|m| t.leaf(m.clone(), false)).collect();
            let o = build(&mut t, &vs);
            t.value(o)
                .hadamard(&weights)
                .unwrap()
                .data()
                .iter()
                .sum::<f64>()
        };
        let h = 1e-5;
        for (idx, input) in inputs.iter().enumerate() {
            let g = grads.get(vars[idx]).expect("gradient present");
            for e in 0..input.data().len() {
                let mut plus = inputs.clone();
                plus[idx].data_mut()[e] += h;
                let mut minus = inputs.clone();
                minus[idx].data_mut()[e] -= h;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                let an = g.data()[e];
                let err = (fd - an).abs() / (fd.abs().max(an.abs()).max(1e-6));
                assert!(
                    err < 1e-5 || (fd - an).abs() < 1e-8,
                    "input {idx} entry {e}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn matmul_add_row_and_scale() {
        grad_check(vec![rnd(3, 4, 1), rnd(2, 4, 2), rnd(1, 2, 3)], |t, v| {
            let y = t.matmul_nt(v[0], v[1]);
            let y = t.add_row(y, v[2]);
            t.scale(y, 1.7)
        });
    }

    #[test]
    fn elementwise_ops() {
        grad_check(vec![rnd(3, 3, 4), rnd(3, 3, 5)], |t, v| {
            let a = t.gelu(v[0]);
            let b = t.sigmoid(v[1]);
            let m = t.mul(a, b);
            t.add(m, v[0])
        });
    }

    #[test]
    fn layer_norm_gradients() {
        grad_check(vec![rnd(4, 6, 6), rnd(1, 6, 7), rnd(1, 6, 8)], |t, v| {
            t.layer_norm(v[0], v[1], v[2])
        });
    }

    #[test]
    fn attention_gradients() {
        grad_check(vec![rnd(6, 4, 9), rnd(6, 4, 10), rnd(6, 4, 11)], |t, v| {
            t.attention(v[0], v[1], v[2], 3, 2)
        });
    }

    #[test]
    fn concat_unfold_add_blocks() {
        grad_check(vec![rnd(8, 2, 12), rnd(8, 1, 13), rnd(4, 3, 14)], |t, v| {
            let c = t.concat_cols(v[0], v[1]);
            let c = t.add_blocks(c, v[2]);
            t.unfold3x3(c, 2, 2)
        });
    }

    #[test]
    fn unfold_centre_slot_is_identity() {
        let x = rnd(9, 2, 15);
        let mut t = Tape::new();
        let v = t.leaf(x.clone(), false);
        let u = t.unfold3x3(v, 3, 3);
        let uv = t.value(u);
        for i in 0..9 {
            assert_eq!(&uv.row(i)[8..10], x.row(i));
        }
        // Top-left cell has no upper-left neighbour.
        assert_eq!(&uv.row(0)[0..2], &[0.0, 0.0]);
    }

    #[test]
    fn attention_rows_are_probabilities() {
        let mut t = Tape::new();
        let q = t.leaf(rnd(4, 4, 1), false);
        let k = t.leaf(rnd(4, 4, 2), false);
        // V = identity-like columns so the output rows are the probabilities.
        let v = t.leaf(M::identity(4), false);
        let o = t.attention(q, k, v, 4, 1);
        for i in 0..4 {
            let s: f64 = t.value(o).row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn no_grad_for_frozen_leaves() {
        let mut t = Tape::new();
        let a = t.leaf(rnd(2, 3, 1), false);
        let w = t.leaf(rnd(2, 3, 2), true);
        let y = t.matmul_nt(a, w);
        let g = t.backward(y, M::from_fn(2, 2, |_, _| 1.0));
        assert!(g.get(a).is_none());
        assert!(g.get(w).is_some());
    }
}
