//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation eagerly; [`Tape::backward`] walks it in
//! reverse. Nodes whose inputs carry no gradient are never visited on the way
//! back, so frozen networks evaluated on a tape cost one forward pass only.

use alloc::vec;
use alloc::vec::Vec;

use crate::real::{gemm, MatView, Real};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub fn out_size(&self, h: usize) -> usize {
        (h + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Affine(Var, F),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    Upsample2(Var),
    Silu(Var),
    ChannelBias {
        x: Var,
        e: Var,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ChannelNorm {
        x: Var,
        eps: F,
    },
    Mse(Var, Var),
    Mean(Var),
    DotConst(Var, Tensor<F>),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Gradient buffers produced by [`Tape::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Operation recorder.
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// A leaf that gradients flow into.
    pub fn param(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor<F>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self
            .value(a)
            .add(self.value(b))
            .expect("add: shape mismatch");
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self
            .value(a)
            .sub(self.value(b))
            .expect("sub: shape mismatch");
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self
            .value(a)
            .zip_map(self.value(b), |x, y| x * y)
            .expect("mul: shape mismatch");
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, k: F) -> Var {
        let v = self.value(a).scale(k);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, k), rg)
    }

    /// `a * x + b` elementwise.
    pub fn affine(&mut self, x: Var, a: F, b: F) -> Var {
        let v = self.value(x).map(|v| a * v + b);
        let rg = self.rg(x);
        self.push(v, Op::Affine(x, a), rg)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul shapes {sa:?} {sb:?}"
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(&[m, n]);
        gemm(
            F::one(),
            self.value(a).data(),
            MatView::row_major(m, k),
            self.value(b).data(),
            MatView::row_major(k, n),
            F::zero(),
            out.data_mut(),
            MatView::row_major(m, n),
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    /// `x [n, in] . w[out, in]^T + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (sx, sw) = (self.value(x).shape(), self.value(w).shape());
        assert!(
            sx.len() == 2 && sw.len() == 2 && sx[1] == sw[1],
            "linear shapes {sx:?} {sw:?}"
        );
        let (n, i, o) = (sx[0], sx[1], sw[0]);
        let mut out = Tensor::zeros(&[n, o]);
        if let Some(b) = b {
            let bias = self.value(b).data();
            assert_eq!(bias.len(), o);
            for row in out.data_mut().chunks_mut(o) {
                row.copy_from_slice(bias);
            }
        }
        gemm(
            F::one(),
            self.value(x).data(),
            MatView::row_major(n, i),
            self.value(w).data(),
            MatView::row_major(o, i).transposed(),
            F::one(),
            out.data_mut(),
            MatView::row_major(n, o),
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(out, Op::Linear { x, w, b }, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self
            .value(a)
            .clone()
            .reshape(shape)
            .expect("reshape: element count");
        let rg = self.rg(a);
        self.push(v, Op::Reshape(a), rg)
    }

    /// 2-D convolution of `x [n, ci, h, w]` with `w` holding `co * ci * k * k`
    /// elements laid out as `[co, ci, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Var {
        let (n, ci, h, wd) = self.value(x).dims4();
        let kk = ci * spec.kernel * spec.kernel;
        let wlen = self.value(w).len();
        assert!(
            wlen.is_multiple_of(kk),
            "conv2d weight size {wlen} vs fan-in {kk}"
        );
        let co = wlen / kk;
        let (ho, wo) = (spec.out_size(h), spec.out_size(wd));
        let p = ho * wo;
        let mut out = Tensor::zeros(&[n, co, ho, wo]);
        if let Some(b) = b {
            let bias = self.value(b).data();
            assert_eq!(bias.len(), co);
            for img in out.data_mut().chunks_mut(co * p) {
                for (c, plane) in img.chunks_mut(p).enumerate() {
                    plane.fill(bias[c]);
                }
            }
        }
        let mut col = vec![F::zero(); kk * p];
        let xd = self.value(x).data();
        let wdata = self.value(w).data();
        for (img, dst) in out.data_mut().chunks_mut(co * p).enumerate() {
            im2col(
                &xd[img * ci * h * wd..(img + 1) * ci * h * wd],
                ci,
                h,
                wd,
                spec,
                &mut col,
            );
            gemm(
                F::one(),
                wdata,
                MatView::row_major(co, kk),
                &col,
                MatView::row_major(kk, p),
                F::one(),
                dst,
                MatView::row_major(co, p),
            );
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(out, Op::Conv2d { x, w, b, spec }, rg)
    }

    /// Nearest-neighbour 2x spatial upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let src = self.value(x).data();
        let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
        let dst = out.data_mut();
        for plane in 0..n * c {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            let d = &mut dst[plane * 4 * h * w..(plane + 1) * 4 * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    d[y * 2 * w + xx] = s[(y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::Upsample2(x), rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a * sigmoid(a));
        let rg = self.rg(x);
        self.push(v, Op::Silu(x), rg)
    }

    /// `x [n, c, h, w] + e [n, c]` broadcast over space.
    pub fn channel_bias(&mut self, x: Var, e: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(
            self.value(e).shape(),
            &[n, c],
            "channel_bias embedding shape"
        );
        let mut out = self.value(x).clone();
        let ed = self.value(e).data();
        for (idx, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
            let b = ed[idx];
            plane.iter_mut().for_each(|v| *v += b);
        }
        let rg = self.rg(x) || self.rg(e);
        self.push(out, Op::ChannelBias { x, e }, rg)
    }

    /// Row gather from `table [k, d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let s = self.value(table).shape();
        assert_eq!(s.len(), 2);
        let d = s[1];
        let td = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let out = Tensor::from_vec(&[ids.len(), d], data).expect("embedding");
        let rg = self.rg(table);
        self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    /// Unit-normalises each pixel's channel vector: `x / sqrt(sum_c x^2 + eps)`.
    pub fn channel_norm(&mut self, x: Var, eps: F) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let p = h * w;
        let mut out = self.value(x).clone();
        let d = out.data_mut();
        for img in 0..n {
            let base = img * c * p;
            for q in 0..p {
                let mut ss = eps;
                for ch in 0..c {
                    let v = d[base + ch * p + q];
                    ss += v * v;
                }
                let r = ss.sqrt();
                for ch in 0..c {
                    d[base + ch * p + q] /= r;
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::ChannelNorm { x, eps }, rg)
    }

    /// Mean squared difference, a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mse shapes");
        let s: F = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let v = Tensor::scalar(s / F::c(va.len() as f64));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mse(a, b), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        let rg = self.rg(a);
        self.push(v, Op::Mean(a), rg)
    }

    /// `sum(a * c)` with `c` treated as a constant.
    pub fn dot_const(&mut self, a: Var, c: Tensor<F>) -> Var {
        let v = Tensor::scalar(self.value(a).dot(&c).expect("dot_const shapes"));
        let rg = self.rg(a);
        self.push(v, Op::DotConst(a, c), rg)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<F> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Gradients { grads };
        }
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), F::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.axpy(F::one(), &g).expect("gradient shape"),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node<F>, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.scale(-F::one()));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y).unwrap();
                    self.acc(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = g.zip_map(self.value(*a), |x, y| x * y).unwrap();
                    self.acc(grads, *b, gb);
                }
            }
            Op::Scale(a, k) | Op::Affine(a, k) => self.acc(grads, *a, g.scale(*k)),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.rg(*a) {
                    let mut ga = Tensor::zeros(&[m, k]);
                    gemm(
                        F::one(),
                        g.data(),
                        MatView::row_major(m, n),
                        vb.data(),
                        MatView::row_major(k, n).transposed(),
                        F::zero(),
                        ga.data_mut(),
                        MatView::row_major(m, k),
                    );
                    self.acc(grads, *a, ga);
                }
                if self.rg(*b) {
                    let mut gb = Tensor::zeros(&[k, n]);
                    gemm(
                        F::one(),
                        va.data(),
                        MatView::row_major(m, k).transposed(),
                        g.data(),
                        MatView::row_major(m, n),
                        F::zero(),
                        gb.data_mut(),
                        MatView::row_major(k, n),
                    );
                    self.acc(grads, *b, gb);
                }
            }
            Op::Linear { x, w, b } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (n, i, o) = (vx.shape()[0], vx.shape()[1], vw.shape()[0]);
                if self.rg(*x) {
                    let mut gx = Tensor::zeros(&[n, i]);
                    gemm(
                        F::one(),
                        g.data(),
                        MatView::row_major(n, o),
                        vw.data(),
                        MatView::row_major(o, i),
                        F::zero(),
                        gx.data_mut(),
                        MatView::row_major(n, i),
                    );
                    self.acc(grads, *x, gx);
                }
                if self.rg(*w) {
                    let mut gw = Tensor::zeros(&[o, i]);
                    gemm(
                        F::one(),
                        g.data(),
                        MatView::row_major(n, o).transposed(),
                        vx.data(),
                        MatView::row_major(n, i),
                        F::zero(),
                        gw.data_mut(),
                        MatView::row_major(o, i),
                    );
                    self.acc(grads, *w, gw);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut gb = Tensor::zeros(&[o]);
                        for row in g.data().chunks(o) {
                            for (acc, &v) in gb.data_mut().iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        self.acc(grads, *b, gb);
                    }
                }
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.acc(grads, *a, g.clone().reshape(&shape).unwrap());
            }
            Op::Conv2d { x, w, b, spec } => self.conv2d_backward(*x, *w, *b, *spec, g, grads),
            Op::Upsample2(x) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let mut gx = Tensor::zeros(&[n, c, h, w]);
                let src = g.data();
                let dst = gx.data_mut();
                for plane in 0..n * c {
                    let s = &src[plane * 4 * h * w..(plane + 1) * 4 * h * w];
                    let d = &mut dst[plane * h * w..(plane + 1) * h * w];
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            d[(y / 2) * w + xx / 2] += s[y * 2 * w + xx];
                        }
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::Silu(x) => {
                let gx = self
                    .value(*x)
                    .zip_map(g, |a, gy| {
                        let s = sigmoid(a);
                        gy * s * (F::one() + a * (F::one() - s))
                    })
                    .unwrap();
                self.acc(grads, *x, gx);
            }
            Op::ChannelBias { x, e } => {
                self.acc(grads, *x, g.clone());
                if self.rg(*e) {
                    let (n, c, h, w) = g.dims4();
                    let sums: Vec<F> = g
                        .data()
                        .chunks(h * w)
                        .map(|pl| pl.iter().copied().sum())
                        .collect();
                    self.acc(grads, *e, Tensor::from_vec(&[n, c], sums).unwrap());
                }
            }
            Op::Embedding { table, ids } => {
                let s = self.value(*table).shape();
                let d = s[1];
                let mut gt = Tensor::zeros(s);
                for (row, &i) in ids.iter().enumerate() {
                    let src = &g.data()[row * d..(row + 1) * d];
                    for (acc, &v) in gt.data_mut()[i * d..(i + 1) * d].iter_mut().zip(src) {
                        *acc += v;
                    }
                }
                self.acc(grads, *table, gt);
            }
            Op::ChannelNorm { x, eps } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let p = h * w;
                let xv = self.value(*x).data();
                let yv = node.value.data();
                let mut gx = Tensor::zeros(&[n, c, h, w]);
                let gd = g.data();
                let out = gx.data_mut();
                for img in 0..n {
                    let base = img * c * p;
                    for q in 0..p {
                        let mut ss = *eps;
                        let mut gy_dot_y = F::zero();
                        for ch in 0..c {
                            let i = base + ch * p + q;
                            ss += xv[i] * xv[i];
                            gy_dot_y += gd[i] * yv[i];
                        }
                        let r = ss.sqrt();
                        for ch in 0..c {
                            let i = base + ch * p + q;
                            out[i] = (gd[i] - yv[i] * gy_dot_y) / r;
                        }
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::Mse(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let k = F::c(2.0) * g.data()[0] / F::c(va.len() as f64);
                let diff = va.zip_map(vb, |x, y| (x - y) * k).unwrap();
                if self.rg(*b) {
                    self.acc(grads, *b, diff.scale(-F::one()));
                }
                self.acc(grads, *a, diff);
            }
            Op::Mean(a) => {
                let va = self.value(*a);
                let k = g.data()[0] / F::c(va.len() as f64);
                self.acc(grads, *a, Tensor::full(va.shape(), k));
            }
            Op::DotConst(a, c) => self.acc(grads, *a, c.scale(g.data()[0])),
        }
    }

    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
        g: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
    ) {
        let (n, ci, h, wd) = self.value(x).dims4();
        let (_, co, ho, wo) = g.dims4();
        let p = ho * wo;
        let kk = ci * spec.kernel * spec.kernel;
        let xd = self.value(x).data();
        let wdata = self.value(w).data();
        let need_x = self.rg(x);
        let need_w = self.rg(w);
        if let Some(b) = b {
            if self.rg(b) {
                let mut gb = Tensor::zeros(&[co]);
                for img in g.data().chunks(co * p) {
                    for (c, plane) in img.chunks(p).enumerate() {
                        gb.data_mut()[c] += plane.iter().copied().sum::<F>();
                    }
                }
                self.acc(grads, b, gb);
            }
        }
        if !need_x && !need_w {
            return;
        }
        let mut gw = if need_w {
            Some(Tensor::zeros(self.value(w).shape()))
        } else {
            None
        };
        let mut gx = if need_x {
            Some(Tensor::zeros(&[n, ci, h, wd]))
        } else {
            None
        };
        let mut col = vec![F::zero(); kk * p];
        for img in 0..n {
            let gimg = &g.data()[img * co * p..(img + 1) * co * p];
            if let Some(gw) = gw.as_mut() {
                im2col(
                    &xd[img * ci * h * wd..(img + 1) * ci * h * wd],
                    ci,
                    h,
                    wd,
                    spec,
                    &mut col,
                );
                gemm(
                    F::one(),
                    gimg,
                    MatView::row_major(co, p),
                    &col,
                    MatView::row_major(kk, p).transposed(),
                    F::one(),
                    gw.data_mut(),
                    MatView::row_major(co, kk),
                );
            }
            if let Some(gx) = gx.as_mut() {
                gemm(
                    F::one(),
                    wdata,
                    MatView::row_major(co, kk).transposed(),
                    gimg,
                    MatView::row_major(co, p),
                    F::zero(),
                    &mut col,
                    MatView::row_major(kk, p),
                );
                col2im(
                    &col,
                    ci,
                    h,
                    wd,
                    spec,
                    &mut gx.data_mut()[img * ci * h * wd..(img + 1) * ci * h * wd],
                );
            }
        }
        if let Some(gw) = gw {
            self.acc(grads, w, gw);
        }
        if let Some(gx) = gx {
            self.acc(grads, x, gx);
        }
    }
}

#[inline]
fn sigmoid<F: Real>(a: F) -> F {
    F::one() / (F::one() + (-a).exp())
}

fn im2col<F: Real>(x: &[F], ci: usize, h: usize, w: usize, spec: ConvSpec, col: &mut [F]) {
    let k = spec.kernel;
    let (ho, wo) = (spec.out_size(h), spec.out_size(w));
    let p = ho * wo;
    for c in 0..ci {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((c * k + ky) * k + kx) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(F::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            F::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<F: Real>(col: &[F], ci: usize, h: usize, w: usize, spec: ConvSpec, x: &mut [F]) {
    let k = spec.kernel;
    let (ho, wo) = (spec.out_size(h), spec.out_size(w));
    let p = ho * wo;
    for c in 0..ci {
        let plane = &mut x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((c * k + ky) * k + kx) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    /// Central-difference check of d(loss)/d(leaf) for a closure-built graph.
    fn check(build: impl Fn(&mut Tape<f64>, &[Var]) -> Var, inputs: &[Tensor<f64>]) -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let loss = build(&mut tape, &vars);
        let grads = tape.backward(loss);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (k, inp) in inputs.iter().enumerate() {
            let analytic = grads
                .get(vars[k])
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(inp.shape()));
            for i in 0..inp.len() {
                let eval = |delta: f64| {
                    let mut t2 = Tape::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, t)| {
                            let mut t = t.clone();
                            if j == k {
                                t.data_mut()[i] += delta;
                            }
                            t2.param(t)
                        })
                        .collect();
                    let l = build(&mut t2, &vs);
                    t2.value(l).data()[0]
                };
                let num = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.data()[i];
                let err = (a - num).abs() / (a.abs().max(num.abs()).max(1e-3));
                worst = worst.max(err);
            }
        }
        worst
    }

    fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::randn(shape, 1.0, &mut seeded(seed))
    }

    #[test]
    fn conv_matches_direct_loop() {
        let x = rand(&[2, 3, 5, 6], 1);
        let w = rand(&[4, 3, 3, 3], 2);
        let b = rand(&[4], 3);
        for spec in [
            ConvSpec {
                kernel: 3,
                stride: 1,
                pad: 1,
            },
            ConvSpec {
                kernel: 3,
                stride: 2,
                pad: 1,
            },
        ] {
            let mut tape = Tape::new();
            let (xv, wv, bv) = (
                tape.constant(x.clone()),
                tape.constant(w.clone()),
                tape.constant(b.clone()),
            );
            let y = tape.conv2d(xv, wv, Some(bv), spec);
            let out = tape.value(y);
            let (n, co, ho, wo) = out.dims4();
            for img in 0..n {
                for o in 0..co {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut acc = b.data()[o];
                            for c in 0..3 {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let iy = (oy * spec.stride + ky) as isize - 1;
                                        let ix = (ox * spec.stride + kx) as isize - 1;
                                        if iy < 0 || ix < 0 || iy >= 5 || ix >= 6 {
                                            continue;
                                        }
                                        acc += x.data()
                                            [((img * 3 + c) * 5 + iy as usize) * 6 + ix as usize]
                                            * w.data()[((o * 3 + c) * 3 + ky) * 3 + kx];
                                    }
                                }
                            }
                            let got = out.data()[((img * co + o) * ho + oy) * wo + ox];
                            assert!((got - acc).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn conv_and_pointwise_gradients() {
        let err = check(
            |t, v| {
                let y = t.conv2d(
                    v[0],
                    v[1],
                    Some(v[2]),
                    ConvSpec {
                        kernel: 3,
                        stride: 2,
                        pad: 1,
                    },
                );
                let y = t.silu(y);
                let y = t.upsample2(y);
                let y = t.channel_norm(y, 1e-3);
                let z = t.constant(Tensor::full(t.value(y).shape(), 0.3));
                t.mse(y, z)
            },
            &[
                rand(&[2, 2, 4, 4], 4),
                rand(&[3, 2, 3, 3], 5),
                rand(&[3], 6),
            ],
        );
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn linear_matmul_embedding_gradients() {
        let err = check(
            |t, v| {
                let e = t.embedding(v[3], &[1, 0, 1]);
                let h = t.linear(v[0], v[1], Some(v[2]));
                let h = t.add(h, e);
                let m = t.matmul(h, v[4]);
                let m = t.scale(m, 0.7);
                let m = t.affine(m, -1.3, 0.2);
                let s = t.mul(m, m);
                t.mean(s)
            },
            &[
                rand(&[3, 4], 7),
                rand(&[5, 4], 8),
                rand(&[5], 9),
                rand(&[2, 5], 10),
                rand(&[5, 2], 11),
            ],
        );
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn channel_bias_and_dot_const_gradients() {
        let c = rand(&[2, 3, 2, 2], 12);
        let err = check(
            move |t, v| {
                let y = t.channel_bias(v[0], v[1]);
                let y = t.sub(y, v[0]);
                let y = t.add(y, v[0]);
                let y = t.reshape(y, &[2, 12]);
                let y = t.reshape(y, &[2, 3, 2, 2]);
                t.dot_const(y, c.clone())
            },
            &[rand(&[2, 3, 2, 2], 13), rand(&[2, 3], 14)],
        );
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::scalar(2.0));
        let b = tape.param(Tensor::scalar(3.0));
        let c = tape.mul(a, b);
        let g = tape.backward(c);
        assert!(g.get(a).is_none());
        assert_eq!(g.get(b).unwrap().data()[0], 2.0);
    }
}
