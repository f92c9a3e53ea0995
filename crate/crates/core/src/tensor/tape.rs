use super::gemm::{gemm, Layout};
use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Layer-norm epsilon used by every normalization in the crate.
pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_COEFF: f64 = 0.044_715;
// sqrt(2 / pi)
const GELU_SCALE: f64 = 0.797_884_560_802_865_4;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRow { a: Var, row: Var },
    Scale { a: Var, c: T },
    Reshape { a: Var },
    Permute { a: Var, axes: Vec<usize> },
    Softmax { a: Var },
    LogSoftmax { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu { a: Var },
    Embedding { table: Var, ids: Vec<usize> },
    Sum { a: Var },
    Mean { a: Var },
    Clip { a: Var, lo: T, hi: T },
    Maximum { a: Var, b: Var },
    StraightThrough { a: Var, pass: Vec<bool> },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Define-by-run recording of one forward computation.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and the backward sweep walks it in reverse exactly once.
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self { nodes: Vec::new() }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    /// Gradient of the loss with respect to `v`; `None` when `v` does not
    /// require gradients or is unreachable from the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn elementwise_pair<T: Float>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn permute_data<T: Float>(src: &[T], shape: &[usize], axes: &[usize]) -> (Vec<T>, Vec<usize>) {
    let nd = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut in_strides = vec![1usize; nd];
    for d in (0..nd.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; nd];
    for _ in 0..src.len() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(src[off]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

fn softmax_rows<T: Float>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (row, o) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (oi, &xi) in o.iter_mut().zip(row) {
            *oi = (xi - max).exp();
            sum += *oi;
        }
        let inv = T::one() / sum;
        o.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

fn gelu<T: Float>(x: T) -> T {
    let half = T::lit(0.5);
    let inner = T::lit(GELU_SCALE) * (x + T::lit(GELU_COEFF) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Float>(x: T) -> T {
    let half = T::lit(0.5);
    let inner = T::lit(GELU_SCALE) * (x + T::lit(GELU_COEFF) * x * x * x);
    let t = inner.tanh();
    half * (T::one() + t)
        + half * x * (T::one() - t * t) * T::lit(GELU_SCALE) * (T::one() + T::lit(3.0 * GELU_COEFF) * x * x)
}

fn accumulate<T: Float>(slot: &mut Option<Tensor<T>>, shape: &[usize], delta: &[T]) {
    match slot {
        Some(g) => g.data_mut().iter_mut().zip(delta).for_each(|(g, &d)| *g += d),
        None => *slot = Some(Tensor { shape: shape.to_vec(), data: delta.to_vec() }),
    }
}

fn accumulate_owned<T: Float>(slot: &mut Option<Tensor<T>>, shape: &[usize], delta: Vec<T>) {
    match slot {
        Some(g) => g.data_mut().iter_mut().zip(&delta).for_each(|(g, &d)| *g += d),
        None => *slot = Some(Tensor { shape: shape.to_vec(), data: delta }),
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// `a[..., k] · b[k, n] -> [..., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.shape().len() != 2 || av.shape().is_empty() || av.last_dim() != bv.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let k = av.last_dim();
        let n = bv.shape()[1];
        let m = av.numel() / k.max(1);
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, av.data(), Layout::row_major(k), bv.data(), Layout::row_major(n), T::zero(), &mut out);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let rg = self.tracked(&[a, b]);
        Ok(self.push(Tensor { shape, data: out }, rg, Op::MatMul { a, b }))
    }

    /// Batched `a[n, m, k] · b[n, k, p]`, or `a · b^T` with `b[n, p, k]` when
    /// `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let bad = || Error::shape("batch_matmul", format!("{:?} x {:?} (trans_b={trans_b})", av.shape(), bv.shape()));
        if av.shape().len() != 3 || bv.shape().len() != 3 || av.shape()[0] != bv.shape()[0] {
            return Err(bad());
        }
        let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let (p, kb) = if trans_b {
            (bv.shape()[1], bv.shape()[2])
        } else {
            (bv.shape()[2], bv.shape()[1])
        };
        if kb != k {
            return Err(bad());
        }
        let mut out = vec![T::zero(); batch * m * p];
        let lb = if trans_b { Layout::transposed(k) } else { Layout::row_major(p) };
        for i in 0..batch {
            gemm(
                m,
                k,
                p,
                &av.data()[i * m * k..(i + 1) * m * k],
                Layout::row_major(k),
                &bv.data()[i * k * p..(i + 1) * k * p],
                lb,
                T::zero(),
                &mut out[i * m * p..(i + 1) * m * p],
            );
        }
        let rg = self.tracked(&[a, b]);
        Ok(self.push(Tensor { shape: vec![batch, m, p], data: out }, rg, Op::BatchMatMul { a, b, trans_b }))
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, mk: impl FnOnce(Var, Var) -> Op<T>) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        elementwise_pair(op, av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = av.shape().to_vec();
        let rg = self.tracked(&[a, b]);
        Ok(self.push(Tensor { shape, data }, rg, mk(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("maximum", a, b, T::max, |a, b| Op::Maximum { a, b })
    }

    /// Broadcast-adds a vector along the trailing dimension.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        let n = av.last_dim();
        if rv.numel() != n || av.shape().is_empty() {
            return Err(Error::shape("add_row", format!("{:?} + {:?}", av.shape(), rv.shape())));
        }
        let mut data = av.data().to_vec();
        for chunk in data.chunks_mut(n) {
            chunk.iter_mut().zip(rv.data()).for_each(|(x, &r)| *x += r);
        }
        let shape = av.shape().to_vec();
        let rg = self.tracked(&[a, row]);
        Ok(self.push(Tensor { shape, data }, rg, Op::AddRow { a, row }))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x * c);
        let rg = self.tracked(&[a]);
        self.push(value, rg, Op::Scale { a, c })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.tracked(&[a]);
        Ok(self.push(value, rg, Op::Reshape { a }))
    }

    /// Generalized transpose; `axes[i]` names the input axis placed at output
    /// position `i`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let nd = av.shape().len();
        let mut seen = vec![false; nd];
        let valid = axes.len() == nd && axes.iter().all(|&x| x < nd && !std::mem::replace(&mut seen[x], true));
        if !valid {
            return Err(Error::shape("permute", format!("axes {axes:?} for shape {:?}", av.shape())));
        }
        let (data, shape) = permute_data(av.data(), av.shape(), axes);
        let rg = self.tracked(&[a]);
        Ok(self.push(Tensor { shape, data }, rg, Op::Permute { a, axes: axes.to_vec() }))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let nd = self.value(a).shape().len();
        if nd < 2 {
            return Err(Error::shape("transpose", format!("rank {nd} < 2")));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(a, &axes)
    }

    /// Softmax over the trailing dimension.
    pub fn softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let value = Tensor { shape: av.shape().to_vec(), data: softmax_rows(av.data(), av.last_dim()) };
        let rg = self.tracked(&[a]);
        self.push(value, rg, Op::Softmax { a })
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let cols = av.last_dim();
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(cols) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let value = Tensor { shape: av.shape().to_vec(), data };
        let rg = self.tracked(&[a]);
        self.push(value, rg, Op::LogSoftmax { a })
    }

    /// Layer normalization over the trailing dimension with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let n = xv.last_dim();
        if gv.numel() != n || bv.numel() != n {
            return Err(Error::shape(
                "layer_norm",
                format!("input {:?}, gamma {:?}, beta {:?}", xv.shape(), gv.shape(), bv.shape()),
            ));
        }
        let rows = xv.numel() / n.max(1);
        let nf = T::from_usize(n).unwrap();
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let rs = T::one() / (var + T::lit(LAYER_NORM_EPS)).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.tracked(&[x, gamma, beta]);
        Ok(self.push(Tensor { shape, data: out }, rg, Op::LayerNorm { x, gamma, beta, xhat, rstd }))
    }

    /// GELU, tanh approximation with the 0.044715 cubic coefficient.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let rg = self.tracked(&[a]);
        self.push(value, rg, Op::Gelu { a })
    }

    /// Gathers rows of `table[v, d]` -> `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.shape().len() != 2 {
            return Err(Error::shape("embedding", format!("table must be 2-D, got {:?}", tv.shape())));
        }
        let (v, d) = (tv.shape()[0], tv.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::shape("embedding", format!("id {bad} out of range for table {:?}", tv.shape())));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&tv.data()[i * d..(i + 1) * d]);
        }
        let rg = self.tracked(&[table]);
        Ok(self.push(Tensor { shape: vec![ids.len(), d], data }, rg, Op::Embedding { table, ids: ids.to_vec() }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let rg = self.tracked(&[a]);
        self.push(Tensor::scalar(s), rg, Op::Sum { a })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let s = av.data().iter().copied().sum::<T>() / T::from_usize(av.numel().max(1)).unwrap();
        let rg = self.tracked(&[a]);
        self.push(Tensor::scalar(s), rg, Op::Mean { a })
    }

    /// Elementwise clamp to `[lo, hi]`; gradient flows only strictly inside.
    pub fn clip(&mut self, a: Var, lo: T, hi: T) -> Var {
        let value = self.value(a).map(|x| x.max(lo).min(hi));
        let rg = self.tracked(&[a]);
        self.push(value, rg, Op::Clip { a, lo, hi })
    }

    /// Replaces the value of `a` by `forward` while routing the upstream
    /// gradient to `a` unchanged wherever `pass` is set and zeroing it
    /// elsewhere. This is the hook every quantizer uses for its
    /// straight-through estimator.
    pub fn straight_through(&mut self, a: Var, forward: Tensor<T>, pass: Vec<bool>) -> Result<Var> {
        let av = self.value(a);
        if av.shape() != forward.shape() || pass.len() != forward.numel() {
            return Err(Error::shape(
                "straight_through",
                format!("input {:?}, forward {:?}, mask {}", av.shape(), forward.shape(), pass.len()),
            ));
        }
        let rg = self.tracked(&[a]);
        Ok(self.push(forward, rg, Op::StraightThrough { a, pass }))
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes;
        if loss.0 >= nodes.len() {
            return Err(Error::Invalid("loss variable is not on this tape".into()));
        }
        if !nodes[loss.0].value.is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", nodes[loss.0].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor { shape: nodes[loss.0].value.shape().to_vec(), data: vec![T::one()] });

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let needs = |v: Var| nodes[v.0].requires_grad;
            let val = |v: Var| &nodes[v.0].value;
            let gd = g.data();
            match &node.op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let (av, bv) = (val(*a), val(*b));
                    let k = av.last_dim();
                    let n = bv.shape()[1];
                    let m = av.numel() / k.max(1);
                    if needs(*a) {
                        let mut da = vec![T::zero(); m * k];
                        gemm(m, n, k, gd, Layout::row_major(n), bv.data(), Layout::transposed(n), T::zero(), &mut da);
                        accumulate_owned(&mut grads[a.0], av.shape(), da);
                    }
                    if needs(*b) {
                        let mut db = vec![T::zero(); k * n];
                        gemm(k, m, n, av.data(), Layout::transposed(k), gd, Layout::row_major(n), T::zero(), &mut db);
                        accumulate_owned(&mut grads[b.0], bv.shape(), db);
                    }
                }
                Op::BatchMatMul { a, b, trans_b } => {
                    let (av, bv) = (val(*a), val(*b));
                    let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                    let p = node.value.shape()[2];
                    let (mk, kp, mp) = (m * k, k * p, m * p);
                    if needs(*a) {
                        let mut da = vec![T::zero(); batch * mk];
                        // dA = dC · B^T   (B stored k x p, or p x k when trans_b)
                        let lb = if *trans_b { Layout::row_major(k) } else { Layout::transposed(p) };
                        for i in 0..batch {
                            gemm(m, p, k, &gd[i * mp..(i + 1) * mp], Layout::row_major(p), &bv.data()[i * kp..(i + 1) * kp], lb, T::zero(), &mut da[i * mk..(i + 1) * mk]);
                        }
                        accumulate_owned(&mut grads[a.0], av.shape(), da);
                    }
                    if needs(*b) {
                        let mut db = vec![T::zero(); batch * kp];
                        for i in 0..batch {
                            let gi = &gd[i * mp..(i + 1) * mp];
                            let ai = &av.data()[i * mk..(i + 1) * mk];
                            let out = &mut db[i * kp..(i + 1) * kp];
                            if *trans_b {
                                // dB[p, k] = dC^T · A
                                gemm(p, m, k, gi, Layout::transposed(p), ai, Layout::row_major(k), T::zero(), out);
                            } else {
                                // dB[k, p] = A^T · dC
                                gemm(k, m, p, ai, Layout::transposed(k), gi, Layout::row_major(p), T::zero(), out);
                            }
                        }
                        accumulate_owned(&mut grads[b.0], bv.shape(), db);
                    }
                }
                Op::Add { a, b } => {
                    if needs(*a) {
                        accumulate(&mut grads[a.0], g.shape(), gd);
                    }
                    if needs(*b) {
                        accumulate(&mut grads[b.0], g.shape(), gd);
                    }
                }
                Op::Sub { a, b } => {
                    if needs(*a) {
                        accumulate(&mut grads[a.0], g.shape(), gd);
                    }
                    if needs(*b) {
                        let neg: Vec<T> = gd.iter().map(|&x| -x).collect();
                        accumulate_owned(&mut grads[b.0], g.shape(), neg);
                    }
                }
                Op::Mul { a, b } => {
                    if needs(*a) {
                        let d = gd.iter().zip(val(*b).data()).map(|(&g, &y)| g * y).collect();
                        accumulate_owned(&mut grads[a.0], g.shape(), d);
                    }
                    if needs(*b) {
                        let d = gd.iter().zip(val(*a).data()).map(|(&g, &x)| g * x).collect();
                        accumulate_owned(&mut grads[b.0], g.shape(), d);
                    }
                }
                Op::Maximum { a, b } => {
                    let (av, bv) = (val(*a).data(), val(*b).data());
                    if needs(*a) {
                        let d = gd.iter().zip(av.iter().zip(bv)).map(|(g, (x, y))| if x >= y { *g } else { T::zero() }).collect();
                        accumulate_owned(&mut grads[a.0], g.shape(), d);
                    }
                    if needs(*b) {
                        let d = gd.iter().zip(av.iter().zip(bv)).map(|(g, (x, y))| if x < y { *g } else { T::zero() }).collect();
                        accumulate_owned(&mut grads[b.0], g.shape(), d);
                    }
                }
                Op::AddRow { a, row } => {
                    if needs(*a) {
                        accumulate(&mut grads[a.0], g.shape(), gd);
                    }
                    if needs(*row) {
                        let n = g.last_dim();
                        let mut d = vec![T::zero(); n];
                        for chunk in gd.chunks(n) {
                            d.iter_mut().zip(chunk).for_each(|(d, &g)| *d += g);
                        }
                        accumulate_owned(&mut grads[row.0], val(*row).shape(), d);
                    }
                }
                Op::Scale { a, c } => {
                    let d = gd.iter().map(|&g| g * *c).collect();
                    accumulate_owned(&mut grads[a.0], val(*a).shape(), d);
                }
                Op::Reshape { a } => {
                    accumulate(&mut grads[a.0], val(*a).shape(), gd);
                }
                Op::Permute { a, axes } => {
                    let mut inverse = vec![0; axes.len()];
                    for (i, &ax) in axes.iter().enumerate() {
                        inverse[ax] = i;
                    }
                    let (d, _) = permute_data(gd, g.shape(), &inverse);
                    accumulate_owned(&mut grads[a.0], val(*a).shape(), d);
                }
                Op::Softmax { a } => {
                    let y = node.value.data();
                    let cols = node.value.last_dim();
                    let mut d = vec![T::zero(); y.len()];
                    for ((yr, gr), dr) in y.chunks(cols).zip(gd.chunks(cols)).zip(d.chunks_mut(cols)) {
                        let dot: T = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                        for j in 0..cols {
                            dr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate_owned(&mut grads[a.0], val(*a).shape(), d);
                }
                Op::LogSoftmax { a } => {
                    let y = node.value.data();
                    let cols = node.value.last_dim();
                    let mut d = vec![T::zero(); y.len()];
                    for ((yr, gr), dr) in y.chunks(cols).zip(gd.chunks(cols)).zip(d.chunks_mut(cols)) {
                        let total: T = gr.iter().copied().sum();
                        for j in 0..cols {
                            dr[j] = gr[j] - yr[j].exp() * total;
                        }
                    }
                    accumulate_owned(&mut grads[a.0], val(*a).shape(), d);
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let n = g.last_dim();
                    let gam = val(*gamma).data();
                    if needs(*x) {
                        let mut d = vec![T::zero(); gd.len()];
                        for (r, &rs) in rstd.iter().enumerate() {
                            let gr = &gd[r * n..(r + 1) * n];
                            let hr = &xhat[r * n..(r + 1) * n];
                            let mut sum_dh = T::zero();
                            let mut sum_dh_h = T::zero();
                            for j in 0..n {
                                let dh = gr[j] * gam[j];
                                sum_dh += dh;
                                sum_dh_h += dh * hr[j];
                            }
                            let inv_n = T::one() / T::from_usize(n).unwrap();
                            for j in 0..n {
                                let dh = gr[j] * gam[j];
                                d[r * n + j] = rs * (dh - inv_n * sum_dh - hr[j] * inv_n * sum_dh_h);
                            }
                        }
                        accumulate_owned(&mut grads[x.0], g.shape(), d);
                    }
                    if needs(*gamma) {
                        let mut d = vec![T::zero(); n];
                        for (gr, hr) in gd.chunks(n).zip(xhat.chunks(n)) {
                            for j in 0..n {
                                d[j] += gr[j] * hr[j];
                            }
                        }
                        accumulate_owned(&mut grads[gamma.0], val(*gamma).shape(), d);
                    }
                    if needs(*beta) {
                        let mut d = vec![T::zero(); n];
                        for gr in gd.chunks(n) {
                            d.iter_mut().zip(gr).for_each(|(d, &g)| *d += g);
                        }
                        accumulate_owned(&mut grads[beta.0], val(*beta).shape(), d);
                    }
                }
                Op::Gelu { a } => {
                    let d = gd.iter().zip(val(*a).data()).map(|(&g, &x)| g * gelu_grad(x)).collect();
                    accumulate_owned(&mut grads[a.0], g.shape(), d);
                }
                Op::Embedding { table, ids } => {
                    let tv = val(*table);
                    let dim = tv.shape()[1];
                    let mut d = vec![T::zero(); tv.numel()];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..dim {
                            d[id * dim + j] += gd[r * dim + j];
                        }
                    }
                    accumulate_owned(&mut grads[table.0], tv.shape(), d);
                }
                Op::Sum { a } => {
                    let av = val(*a);
                    accumulate_owned(&mut grads[a.0], av.shape(), vec![gd[0]; av.numel()]);
                }
                Op::Mean { a } => {
                    let av = val(*a);
                    let v = gd[0] / T::from_usize(av.numel().max(1)).unwrap();
                    accumulate_owned(&mut grads[a.0], av.shape(), vec![v; av.numel()]);
                }
                Op::Clip { a, lo, hi } => {
                    let d = gd
                        .iter()
                        .zip(val(*a).data())
                        .map(|(g, &x)| if x > *lo && x < *hi { *g } else { T::zero() })
                        .collect();
                    accumulate_owned(&mut grads[a.0], g.shape(), d);
                }
                Op::StraightThrough { a, pass } => {
                    let d = gd.iter().zip(pass).map(|(g, &p)| if p { *g } else { T::zero() }).collect();
                    accumulate_owned(&mut grads[a.0], g.shape(), d);
                }
            }
            grads[i] = Some(g);
        }
        // Only keep gradients the caller can observe meaningfully: tracked nodes.
        for (slot, node) in grads.iter_mut().zip(&nodes) {
            if !node.requires_grad {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }
}
