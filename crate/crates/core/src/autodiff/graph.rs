//! Reverse-mode differentiation over a recorded operation tape.
//!
//! Operations execute eagerly and append one node each; `backward` walks the
//! tape once in reverse execution order, accumulating (summing) gradients
//! into parents. Nodes only reference earlier nodes, so the tape is acyclic
//! by construction.

use crate::error::{Error, Result};

use super::tensor::{gemm_into, Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Spatial padding behavior for convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    /// Out-of-range taps read zero (planar maps).
    Zero,
    /// Out-of-range taps wrap modulo the extent (toroidal maps).
    Circular,
}

/// Variance floor inside layer normalization's square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

enum Op<T: Scalar> {
    Leaf,
    Matmul { a: Var, b: Var },
    BatchMatmul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Relu { x: Var },
    Sigmoid { x: Var },
    Softmax { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, normed: Tensor<T>, inv_std: Vec<T> },
    Scale { x: Var, c: T },
    SwapLast2 { x: Var },
    Reshape { x: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Sum { x: Var },
    MaskedSse { pred: Var, target: Var, mask: Var },
    Conv2d { x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize, mode: PadMode },
    AvgPool { x: Var, k: usize },
    ChannelMax { x: Var, argmax: Vec<u32> },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded forward computation plus gradient slots.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
}

/// Splits a shape into (row count, last-axis length).
fn rows_of(shape: &[usize]) -> (usize, usize) {
    let n = *shape.last().expect("tensor rank >= 1");
    (shape.iter().product::<usize>() / n, n)
}

/// Interprets a rank-3-or-4 shape as (batch, channels, height, width).
fn as_bchw(shape: &[usize]) -> Option<(usize, usize, usize, usize)> {
    match shape.len() {
        3 => Some((1, shape[0], shape[1], shape[2])),
        4 => Some((shape[0], shape[1], shape[2], shape[3])),
        _ => None,
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated by the last `backward`, if the node got one.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    // ---- primitives ------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(&[m, n]);
        gemm_into(
            self.value(a).data(),
            m,
            k,
            false,
            self.value(b).data(),
            k,
            n,
            false,
            T::zero(),
            out.data_mut(),
        );
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Matmul { a, b }, needs))
    }

    /// Batched matrix product over the leading axis: (B,m,k)·(B,k,n), or
    /// (B,m,k)·(B,n,k)ᵀ when `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(mismatch("batch_matmul", sa, sb));
        }
        let (bt, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = Tensor::zeros(&[bt, m, n]);
        for i in 0..bt {
            let av = &self.value(a).data()[i * m * k..(i + 1) * m * k];
            let (b_rows, b_cols) = if trans_b { (n, k) } else { (k, n) };
            let bv = &self.value(b).data()[i * b_rows * b_cols..(i + 1) * b_rows * b_cols];
            gemm_into(
                av,
                m,
                k,
                false,
                bv,
                b_rows,
                b_cols,
                trans_b,
                T::zero(),
                &mut out.data_mut()[i * m * n..(i + 1) * m * n],
            );
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::BatchMatmul { a, b, trans_b }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(mismatch("add", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add { a, b }, needs))
    }

    /// Adds a length-n bias along the last axis, broadcast over all
    /// positions (leading axes).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.value(x).shape().to_vec();
        let sb = self.value(bias).shape();
        if sb.len() != 1 || sb[0] != *sx.last().unwrap_or(&0) {
            return Err(mismatch("add_bias", &sx, sb));
        }
        let (rows, n) = rows_of(&sx);
        let mut out = self.value(x).clone();
        {
            let bv = self.nodes[bias.0].value.data().to_vec();
            let od = out.data_mut();
            for r in 0..rows {
                for j in 0..n {
                    od[r * n + j] += bv[j];
                }
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(out, Op::AddBias { x, bias }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            if *v < T::zero() {
                *v = T::zero();
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::Relu { x }, needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v = T::one() / (T::one() + (-*v).exp());
        }
        let needs = self.needs(x);
        self.push(out, Op::Sigmoid { x }, needs)
    }

    /// Softmax along the last axis, numerically stabilized.
    pub fn softmax(&mut self, x: Var) -> Var {
        let (rows, n) = rows_of(self.value(x).shape());
        let mut out = self.value(x).clone();
        let od = out.data_mut();
        for r in 0..rows {
            let row = &mut od[r * n..(r + 1) * n];
            let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::Softmax { x }, needs)
    }

    /// Layer normalization along the last axis with learnable gain and bias.
    /// Uses population variance with a fixed epsilon inside the square root.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let sx = self.value(x).shape().to_vec();
        let n = *sx.last().unwrap_or(&0);
        if self.value(gain).shape() != [n] || self.value(bias).shape() != [n] {
            return Err(mismatch("layer_norm", &sx, self.value(gain).shape()));
        }
        let (rows, _) = rows_of(&sx);
        let eps = T::of_f64(LAYER_NORM_EPS);
        let inv_n = T::one() / T::of_f64(n as f64);
        let mut normed = Tensor::zeros(&sx);
        let mut inv_std = vec![T::zero(); rows];
        {
            let xd = self.value(x).data();
            let nd = normed.data_mut();
            for r in 0..rows {
                let row = &xd[r * n..(r + 1) * n];
                let mean = row.iter().cloned().sum::<T>() * inv_n;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
                let is = T::one() / (var + eps).sqrt();
                inv_std[r] = is;
                for j in 0..n {
                    nd[r * n + j] = (row[j] - mean) * is;
                }
            }
        }
        let mut out = normed.clone();
        {
            let gv = self.value(gain).data().to_vec();
            let bv = self.value(bias).data().to_vec();
            let od = out.data_mut();
            for r in 0..rows {
                for j in 0..n {
                    od[r * n + j] = od[r * n + j] * gv[j] + bv[j];
                }
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, normed, inv_std }, needs))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v *= c;
        }
        let needs = self.needs(x);
        self.push(out, Op::Scale { x, c }, needs)
    }

    /// Swaps the last two axes (plain transpose for rank-2 tensors).
    pub fn swap_last2(&mut self, x: Var) -> Result<Var> {
        let sx = self.value(x).shape().to_vec();
        if sx.len() < 2 {
            return Err(mismatch("swap_last2", &sx, &[]));
        }
        let out = swap_last2_tensor(self.value(x));
        let needs = self.needs(x);
        Ok(self.push(out, Op::SwapLast2 { x }, needs))
    }

    /// 2-D matrix transpose.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let sx = self.value(x).shape();
        if sx.len() != 2 {
            return Err(mismatch("transpose", sx, &[]));
        }
        self.swap_last2(x)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Reshape { x }, needs))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        let first = self.value(parts[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::Contract(format!(
                "concat axis {axis} out of range for rank {}",
                first.len()
            )));
        }
        let mut axis_total = 0;
        for p in parts {
            let s = self.value(*p).shape();
            if s.len() != first.len()
                || s.iter().zip(first.iter()).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(mismatch("concat", &first, s));
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Tensor::zeros(&out_shape);
        {
            let od = out.data_mut();
            let mut offset = 0;
            for p in parts {
                let pv = &self.nodes[p.0].value;
                let pa = pv.shape()[axis];
                let block = pa * inner;
                for o in 0..outer {
                    let dst = o * axis_total * inner + offset * inner;
                    od[dst..dst + block].copy_from_slice(&pv.data()[o * block..(o + 1) * block]);
                }
                offset += pa;
            }
        }
        let needs = parts.iter().any(|p| self.needs(*p));
        Ok(self.push(out, Op::Concat { parts: parts.to_vec(), axis }, needs))
    }

    /// Sum of every element, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().cloned().sum::<T>();
        let needs = self.needs(x);
        self.push(Tensor::scalar(total), Op::Sum { x }, needs)
    }

    /// Σ mask·(pred − target)², unnormalized.
    pub fn masked_sse(&mut self, pred: Var, target: Var, mask: Var) -> Result<Var> {
        let sp = self.value(pred).shape().to_vec();
        if self.value(target).shape() != sp.as_slice() {
            return Err(mismatch("masked_sse", &sp, self.value(target).shape()));
        }
        if self.value(mask).shape() != sp.as_slice() {
            return Err(mismatch("masked_sse", &sp, self.value(mask).shape()));
        }
        let mut total = T::zero();
        {
            let (pd, td, md) =
                (self.value(pred).data(), self.value(target).data(), self.value(mask).data());
            for i in 0..pd.len() {
                let d = pd[i] - td[i];
                total += md[i] * d * d;
            }
        }
        let needs = self.needs(pred) || self.needs(target) || self.needs(mask);
        Ok(self.push(Tensor::scalar(total), Op::MaskedSse { pred, target, mask }, needs))
    }

    /// Mean-squared error over the masked-in cells:
    /// Σ mask·(pred − target)² / Σ mask. The gradient is exactly zero at
    /// masked-out cells. An all-zero mask is a contract violation.
    pub fn masked_mse(&mut self, pred: Var, target: Var, mask: Var) -> Result<Var> {
        let count = self.value(mask).data().iter().cloned().sum::<T>();
        if count <= T::zero() {
            return Err(Error::Contract("masked_mse requires a mask with at least one one".into()));
        }
        let sse = self.masked_sse(pred, target, mask)?;
        Ok(self.scale(sse, T::one() / count))
    }

    /// 2-D convolution over (B,C,H,W) or (C,H,W) input with an
    /// (Out,C,kh,kw) kernel, optional per-channel bias, and zero or
    /// circular padding.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        mode: PadMode,
    ) -> Result<Var> {
        let sx = self.value(x).shape().to_vec();
        let sw = self.value(w).shape().to_vec();
        let Some((b, c_in, h, wd)) = as_bchw(&sx) else {
            return Err(mismatch("conv2d", &sx, &sw));
        };
        if sw.len() != 4 || sw[1] != c_in || stride == 0 {
            return Err(mismatch("conv2d", &sx, &sw));
        }
        let (c_out, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(mismatch("conv2d", &sx, &sw));
        }
        if let Some(bv) = bias {
            if self.value(bv).shape() != [c_out] {
                return Err(mismatch("conv2d bias", self.value(bv).shape(), &[c_out]));
            }
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let out_shape: Vec<usize> = if sx.len() == 3 {
            vec![c_out, ho, wo]
        } else {
            vec![b, c_out, ho, wo]
        };
        let mut out = Tensor::zeros(&out_shape);
        let patch = c_in * kh * kw;
        let mut cols = vec![T::zero(); patch * ho * wo];
        for i in 0..b {
            let xb = &self.value(x).data()[i * c_in * h * wd..(i + 1) * c_in * h * wd];
            im2col(xb, c_in, h, wd, kh, kw, stride, pad, mode, &mut cols);
            gemm_into(
                self.value(w).data(),
                c_out,
                patch,
                false,
                &cols,
                patch,
                ho * wo,
                false,
                T::zero(),
                &mut out.data_mut()[i * c_out * ho * wo..(i + 1) * c_out * ho * wo],
            );
        }
        if let Some(bv) = bias {
            let bd = self.value(bv).data().to_vec();
            let od = out.data_mut();
            for i in 0..b {
                for co in 0..c_out {
                    let base = (i * c_out + co) * ho * wo;
                    for v in &mut od[base..base + ho * wo] {
                        *v += bd[co];
                    }
                }
            }
        }
        let needs =
            self.needs(x) || self.needs(w) || bias.map_or(false, |bv| self.needs(bv));
        Ok(self.push(out, Op::Conv2d { x, w, bias, stride, pad, mode }, needs))
    }

    /// Non-overlapping k×k average pooling; spatial extents must divide by k.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let sx = self.value(x).shape().to_vec();
        let Some((b, c, h, w)) = as_bchw(&sx) else {
            return Err(mismatch("avg_pool", &sx, &[k]));
        };
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::Contract(format!(
                "avg_pool window {k} must divide spatial extents {h}x{w}"
            )));
        }
        let (ho, wo) = (h / k, w / k);
        let out_shape: Vec<usize> =
            if sx.len() == 3 { vec![c, ho, wo] } else { vec![b, c, ho, wo] };
        let mut out = Tensor::zeros(&out_shape);
        let inv = T::one() / T::of_f64((k * k) as f64);
        {
            let xd = self.value(x).data();
            let od = out.data_mut();
            for bc in 0..b * c {
                let src = &xd[bc * h * w..(bc + 1) * h * w];
                let dst = &mut od[bc * ho * wo..(bc + 1) * ho * wo];
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut s = T::zero();
                        for dh in 0..k {
                            for dw in 0..k {
                                s += src[(oh * k + dh) * w + ow * k + dw];
                            }
                        }
                        dst[oh * wo + ow] = s * inv;
                    }
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(out, Op::AvgPool { x, k }, needs))
    }

    /// Maximum over the channel axis of (B,C,H,W) (or (C,H,W)); keeps a
    /// singleton channel. Ties resolve to the lowest channel index.
    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        let sx = self.value(x).shape().to_vec();
        let Some((b, c, h, w)) = as_bchw(&sx) else {
            return Err(mismatch("channel_max", &sx, &[]));
        };
        let out_shape: Vec<usize> = if sx.len() == 3 { vec![1, h, w] } else { vec![b, 1, h, w] };
        let mut out = Tensor::zeros(&out_shape);
        let mut argmax = vec![0u32; b * h * w];
        {
            let xd = self.value(x).data();
            let od = out.data_mut();
            for i in 0..b {
                for p in 0..h * w {
                    let mut best = xd[i * c * h * w + p];
                    let mut best_c = 0u32;
                    for ch in 1..c {
                        let v = xd[(i * c + ch) * h * w + p];
                        if v > best {
                            best = v;
                            best_c = ch as u32;
                        }
                    }
                    od[i * h * w + p] = best;
                    argmax[i * h * w + p] = best_c;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(out, Op::ChannelMax { x, argmax }, needs))
    }

    // ---- backward --------------------------------------------------------

    /// Reverse pass from a scalar loss. Gradients of earlier backward calls
    /// on this graph are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(dy) = self.grads[i].take() else { continue };
            self.backward_node(i, &dy);
            self.grads[i] = Some(dy);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&[Node<T>], &mut Tensor<T>)) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let mut g = self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape()));
        f(&self.nodes, &mut g);
        self.grads[v.0] = Some(g);
    }

    fn backward_node(&mut self, i: usize, dy: &Tensor<T>) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = {
                    let s = self.nodes[a.0].value.shape();
                    (s[0], s[1])
                };
                let n = self.nodes[b.0].value.shape()[1];
                self.acc(a, |nodes, g| {
                    gemm_into(
                        dy.data(),
                        m,
                        n,
                        false,
                        nodes[b.0].value.data(),
                        k,
                        n,
                        true,
                        T::one(),
                        g.data_mut(),
                    );
                });
                self.acc(b, |nodes, g| {
                    gemm_into(
                        nodes[a.0].value.data(),
                        m,
                        k,
                        true,
                        dy.data(),
                        m,
                        n,
                        false,
                        T::one(),
                        g.data_mut(),
                    );
                });
            }
            Op::BatchMatmul { a, b, trans_b } => {
                let (a, b, trans_b) = (*a, *b, *trans_b);
                let (bt, m, k) = {
                    let s = self.nodes[a.0].value.shape();
                    (s[0], s[1], s[2])
                };
                let n = dy.shape()[2];
                self.acc(a, |nodes, g| {
                    for i in 0..bt {
                        let dyb = &dy.data()[i * m * n..(i + 1) * m * n];
                        let (br, bc) = if trans_b { (n, k) } else { (k, n) };
                        let bv = &nodes[b.0].value.data()[i * br * bc..(i + 1) * br * bc];
                        // dA = dY·Bᵀ, or dY·B when B entered transposed.
                        gemm_into(
                            dyb,
                            m,
                            n,
                            false,
                            bv,
                            br,
                            bc,
                            !trans_b,
                            T::one(),
                            &mut g.data_mut()[i * m * k..(i + 1) * m * k],
                        );
                    }
                });
                self.acc(b, |nodes, g| {
                    for i in 0..bt {
                        let dyb = &dy.data()[i * m * n..(i + 1) * m * n];
                        let av = &nodes[a.0].value.data()[i * m * k..(i + 1) * m * k];
                        if trans_b {
                            // dB = dYᵀ·A with B stored as (n,k).
                            gemm_into(
                                dyb,
                                m,
                                n,
                                true,
                                av,
                                m,
                                k,
                                false,
                                T::one(),
                                &mut g.data_mut()[i * n * k..(i + 1) * n * k],
                            );
                        } else {
                            // dB = Aᵀ·dY with B stored as (k,n).
                            gemm_into(
                                av,
                                m,
                                k,
                                true,
                                dyb,
                                m,
                                n,
                                false,
                                T::one(),
                                &mut g.data_mut()[i * k * n..(i + 1) * k * n],
                            );
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.acc(a, |_, g| g.add_assign(dy));
                self.acc(b, |_, g| g.add_assign(dy));
            }
            Op::AddBias { x, bias } => {
                let (x, bias) = (*x, *bias);
                let (rows, n) = rows_of(dy.shape());
                self.acc(x, |_, g| g.add_assign(dy));
                self.acc(bias, |_, g| {
                    let gd = g.data_mut();
                    for r in 0..rows {
                        for j in 0..n {
                            gd[j] += dy.data()[r * n + j];
                        }
                    }
                });
            }
            Op::Relu { x } => {
                let (x, i) = (*x, i);
                self.acc(x, |nodes, g| {
                    let y = nodes[i].value.data();
                    let gd = g.data_mut();
                    for j in 0..gd.len() {
                        if y[j] > T::zero() {
                            gd[j] += dy.data()[j];
                        }
                    }
                });
            }
            Op::Sigmoid { x } => {
                let (x, i) = (*x, i);
                self.acc(x, |nodes, g| {
                    let y = nodes[i].value.data();
                    let gd = g.data_mut();
                    for j in 0..gd.len() {
                        gd[j] += dy.data()[j] * y[j] * (T::one() - y[j]);
                    }
                });
            }
            Op::Softmax { x } => {
                let (x, i) = (*x, i);
                let (rows, n) = rows_of(dy.shape());
                self.acc(x, |nodes, g| {
                    let y = nodes[i].value.data();
                    let gd = g.data_mut();
                    for r in 0..rows {
                        let yr = &y[r * n..(r + 1) * n];
                        let dyr = &dy.data()[r * n..(r + 1) * n];
                        let dot =
                            yr.iter().zip(dyr.iter()).map(|(&a, &b)| a * b).sum::<T>();
                        for j in 0..n {
                            gd[r * n + j] += yr[j] * (dyr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, normed, inv_std } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let normed = normed.clone();
                let inv_std = inv_std.clone();
                let (rows, n) = rows_of(dy.shape());
                let inv_n = T::one() / T::of_f64(n as f64);
                self.acc(bias, |_, g| {
                    let gd = g.data_mut();
                    for r in 0..rows {
                        for j in 0..n {
                            gd[j] += dy.data()[r * n + j];
                        }
                    }
                });
                self.acc(gain, |_, g| {
                    let gd = g.data_mut();
                    for r in 0..rows {
                        for j in 0..n {
                            gd[j] += dy.data()[r * n + j] * normed.data()[r * n + j];
                        }
                    }
                });
                self.acc(x, |nodes, g| {
                    let gv = nodes[gain.0].value.data();
                    let gd = g.data_mut();
                    for r in 0..rows {
                        let nr = &normed.data()[r * n..(r + 1) * n];
                        let dyr = &dy.data()[r * n..(r + 1) * n];
                        let mut mean_dxh = T::zero();
                        let mut mean_dxh_xh = T::zero();
                        for j in 0..n {
                            let dxh = dyr[j] * gv[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * nr[j];
                        }
                        mean_dxh *= inv_n;
                        mean_dxh_xh *= inv_n;
                        for j in 0..n {
                            let dxh = dyr[j] * gv[j];
                            gd[r * n + j] +=
                                inv_std[r] * (dxh - mean_dxh - nr[j] * mean_dxh_xh);
                        }
                    }
                });
            }
            Op::Scale { x, c } => {
                let (x, c) = (*x, *c);
                self.acc(x, |_, g| g.scaled_add_assign(dy, c));
            }
            Op::SwapLast2 { x } => {
                let x = *x;
                let swapped = swap_last2_tensor(dy);
                self.acc(x, |_, g| g.add_assign(&swapped));
            }
            Op::Reshape { x } => {
                let x = *x;
                self.acc(x, |_, g| {
                    let gd = g.data_mut();
                    for (a, b) in gd.iter_mut().zip(dy.data().iter()) {
                        *a += *b;
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let parts = parts.clone();
                let axis = *axis;
                let out_shape = dy.shape().to_vec();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let axis_total = out_shape[axis];
                let mut offset = 0;
                for p in parts {
                    let pa = self.nodes[p.0].value.shape()[axis];
                    let block = pa * inner;
                    let start = offset;
                    self.acc(p, |_, g| {
                        let gd = g.data_mut();
                        for o in 0..outer {
                            let src = o * axis_total * inner + start * inner;
                            for j in 0..block {
                                gd[o * block + j] += dy.data()[src + j];
                            }
                        }
                    });
                    offset += pa;
                }
            }
            Op::Sum { x } => {
                let x = *x;
                let s = dy.item();
                self.acc(x, |_, g| {
                    for v in g.data_mut() {
                        *v += s;
                    }
                });
            }
            Op::MaskedSse { pred, target, mask } => {
                let (pred, target, mask) = (*pred, *target, *mask);
                let s = dy.item();
                let two = T::of_f64(2.0);
                self.acc(pred, |nodes, g| {
                    let (pd, td, md) = (
                        nodes[pred.0].value.data(),
                        nodes[target.0].value.data(),
                        nodes[mask.0].value.data(),
                    );
                    let gd = g.data_mut();
                    for j in 0..gd.len() {
                        gd[j] += s * two * md[j] * (pd[j] - td[j]);
                    }
                });
                self.acc(target, |nodes, g| {
                    let (pd, td, md) = (
                        nodes[pred.0].value.data(),
                        nodes[target.0].value.data(),
                        nodes[mask.0].value.data(),
                    );
                    let gd = g.data_mut();
                    for j in 0..gd.len() {
                        gd[j] -= s * two * md[j] * (pd[j] - td[j]);
                    }
                });
                self.acc(mask, |nodes, g| {
                    let (pd, td) =
                        (nodes[pred.0].value.data(), nodes[target.0].value.data());
                    let gd = g.data_mut();
                    for j in 0..gd.len() {
                        let d = pd[j] - td[j];
                        gd[j] += s * d * d;
                    }
                });
            }
            Op::Conv2d { x, w, bias, stride, pad, mode } => {
                let (x, w, bias) = (*x, *w, *bias);
                let (stride, pad, mode) = (*stride, *pad, *mode);
                let sx = self.nodes[x.0].value.shape().to_vec();
                let (b, c_in, h, wd) = as_bchw(&sx).expect("validated");
                let sw = self.nodes[w.0].value.shape().to_vec();
                let (c_out, kh, kw) = (sw[0], sw[2], sw[3]);
                let ho = (h + 2 * pad - kh) / stride + 1;
                let wo = (wd + 2 * pad - kw) / stride + 1;
                let patch = c_in * kh * kw;
                let mut cols = vec![T::zero(); patch * ho * wo];

                if self.nodes[w.0].needs_grad {
                    self.acc(w, |nodes, g| {
                        let xd = nodes[x.0].value.data();
                        for i in 0..b {
                            let xb = &xd[i * c_in * h * wd..(i + 1) * c_in * h * wd];
                            im2col(xb, c_in, h, wd, kh, kw, stride, pad, mode, &mut cols);
                            let dyb = &dy.data()[i * c_out * ho * wo..(i + 1) * c_out * ho * wo];
                            gemm_into(
                                dyb,
                                c_out,
                                ho * wo,
                                false,
                                &cols,
                                patch,
                                ho * wo,
                                true,
                                T::one(),
                                g.data_mut(),
                            );
                        }
                    });
                }
                if self.nodes[x.0].needs_grad {
                    let mut dcols = vec![T::zero(); patch * ho * wo];
                    self.acc(x, |nodes, g| {
                        let wv = nodes[w.0].value.data();
                        for i in 0..b {
                            let dyb = &dy.data()[i * c_out * ho * wo..(i + 1) * c_out * ho * wo];
                            gemm_into(
                                wv,
                                c_out,
                                patch,
                                true,
                                dyb,
                                c_out,
                                ho * wo,
                                false,
                                T::zero(),
                                &mut dcols,
                            );
                            col2im_acc(
                                &dcols,
                                c_in,
                                h,
                                wd,
                                kh,
                                kw,
                                stride,
                                pad,
                                mode,
                                &mut g.data_mut()[i * c_in * h * wd..(i + 1) * c_in * h * wd],
                            );
                        }
                    });
                }
                if let Some(bv) = bias {
                    self.acc(bv, |_, g| {
                        let gd = g.data_mut();
                        for i in 0..b {
                            for co in 0..c_out {
                                let base = (i * c_out + co) * ho * wo;
                                gd[co] += dy.data()[base..base + ho * wo]
                                    .iter()
                                    .cloned()
                                    .sum::<T>();
                            }
                        }
                    });
                }
            }
            Op::AvgPool { x, k } => {
                let (x, k) = (*x, *k);
                let sx = self.nodes[x.0].value.shape().to_vec();
                let (b, c, h, w) = as_bchw(&sx).expect("validated");
                let (ho, wo) = (h / k, w / k);
                let inv = T::one() / T::of_f64((k * k) as f64);
                self.acc(x, |_, g| {
                    let gd = g.data_mut();
                    for bc in 0..b * c {
                        for oh in 0..ho {
                            for ow in 0..wo {
                                let d = dy.data()[bc * ho * wo + oh * wo + ow] * inv;
                                for dh in 0..k {
                                    for dw in 0..k {
                                        gd[bc * h * w + (oh * k + dh) * w + ow * k + dw] += d;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::ChannelMax { x, argmax } => {
                let x = *x;
                let argmax = argmax.clone();
                let sx = self.nodes[x.0].value.shape().to_vec();
                let (b, c, h, w) = as_bchw(&sx).expect("validated");
                self.acc(x, |_, g| {
                    let gd = g.data_mut();
                    for i in 0..b {
                        for p in 0..h * w {
                            let ch = argmax[i * h * w + p] as usize;
                            gd[(i * c + ch) * h * w + p] += dy.data()[i * h * w + p];
                        }
                    }
                });
            }
        }
    }
}

fn swap_last2_tensor<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let shape = t.shape();
    let rank = shape.len();
    let (a, b) = (shape[rank - 2], shape[rank - 1]);
    let batch: usize = shape[..rank - 2].iter().product();
    let mut out_shape = shape.to_vec();
    out_shape.swap(rank - 2, rank - 1);
    let mut out = Tensor::zeros(&out_shape);
    {
        let src = t.data();
        let dst = out.data_mut();
        for i in 0..batch {
            let so = i * a * b;
            for r in 0..a {
                for c in 0..b {
                    dst[so + c * a + r] = src[so + r * b + c];
                }
            }
        }
    }
    out
}

/// Gathers kh×kw patches of a (C,H,W) image into a (C·kh·kw, Ho·Wo) matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    mode: PadMode,
    cols: &mut [T],
) {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut row = 0;
    for c in 0..c_in {
        for ki in 0..kh {
            for kj in 0..kw {
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                row += 1;
                for oh in 0..ho {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    for ow in 0..wo {
                        let iw = (ow * stride + kj) as isize - pad as isize;
                        dst[oh * wo + ow] = match mode {
                            PadMode::Zero => {
                                if ih < 0 || ih >= h as isize || iw < 0 || iw >= w as isize {
                                    T::zero()
                                } else {
                                    x[c * h * w + ih as usize * w + iw as usize]
                                }
                            }
                            PadMode::Circular => {
                                let ihm = ih.rem_euclid(h as isize) as usize;
                                let iwm = iw.rem_euclid(w as isize) as usize;
                                x[c * h * w + ihm * w + iwm]
                            }
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add inverse of [`im2col`].
#[allow(clippy::too_many_arguments)]
fn col2im_acc<T: Scalar>(
    cols: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    mode: PadMode,
    out: &mut [T],
) {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut row = 0;
    for c in 0..c_in {
        for ki in 0..kh {
            for kj in 0..kw {
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                row += 1;
                for oh in 0..ho {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    for ow in 0..wo {
                        let iw = (ow * stride + kj) as isize - pad as isize;
                        match mode {
                            PadMode::Zero => {
                                if ih < 0 || ih >= h as isize || iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                out[c * h * w + ih as usize * w + iw as usize] +=
                                    src[oh * wo + ow];
                            }
                            PadMode::Circular => {
                                let ihm = ih.rem_euclid(h as isize) as usize;
                                let iwm = iw.rem_euclid(w as isize) as usize;
                                out[c * h * w + ihm * w + iwm] += src[oh * wo + ow];
                            }
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

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn relu_forward_and_backward() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t64(&[2], &[-1.0, 2.0]), true);
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t64(&[2], &[0.0, 0.0]), false);
        let y = g.softmax(x);
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_two_point_row() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t64(&[1, 2], &[1.0, 3.0]), false);
        let gain = g.leaf(t64(&[2], &[1.0, 1.0]), false);
        let bias = g.leaf(t64(&[2], &[0.0, 0.0]), false);
        let y = g.layer_norm(x, gain, bias).unwrap();
        // (x−μ)/σ with population variance 1 (epsilon shifts it slightly).
        assert!((g.value(y).data()[0] + 1.0).abs() < 1e-4);
        assert!((g.value(y).data()[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn fan_out_gradients_sum() {
        // y = sum(x + x); dy/dx should be 2 everywhere.
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t64(&[3], &[1.0, -2.0, 0.5]), true);
        let y = g.add(x, x).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn masked_mse_examples() {
        let mut g = Graph::<f64>::new();
        let pred = g.leaf(t64(&[2, 2], &[3.0, 0.0, 0.0, 0.0]), true);
        let target = g.constant(t64(&[2, 2], &[1.0, 9.0, 9.0, 9.0]));
        let mask = g.constant(t64(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
        let loss = g.masked_mse(pred, target, mask).unwrap();
        assert_eq!(g.value(loss).item(), 4.0);
        g.backward(loss).unwrap();
        let grad = g.grad(pred).unwrap();
        assert_eq!(grad.data()[1], 0.0);
        assert_eq!(grad.data()[2], 0.0);
        assert_eq!(grad.data()[3], 0.0);
        assert_eq!(grad.data()[0], 4.0); // 2·(3−1)/1

        // Perfect prediction has zero loss.
        let mut g2 = Graph::<f64>::new();
        let p = g2.leaf(t64(&[2], &[1.0, 2.0]), false);
        let t = g2.constant(t64(&[2], &[1.0, 2.0]));
        let m = g2.constant(t64(&[2], &[1.0, 1.0]));
        let l = g2.masked_mse(p, t, m).unwrap();
        assert_eq!(g2.value(l).item(), 0.0);

        // All-zero mask violates the contract.
        let mut g3 = Graph::<f64>::new();
        let p = g3.leaf(t64(&[2], &[1.0, 2.0]), false);
        let t = g3.constant(t64(&[2], &[1.0, 2.0]));
        let m = g3.constant(t64(&[2], &[0.0, 0.0]));
        assert!(g3.masked_mse(p, t, m).is_err());
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::zeros(&[2, 3]), false);
        let b = g.leaf(Tensor::zeros(&[2, 3]), false);
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "message should carry shapes: {msg}");
    }

    #[test]
    fn concat_and_split_gradients() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(t64(&[1, 2], &[1.0, 2.0]), true);
        let b = g.leaf(t64(&[1, 2], &[3.0, 4.0]), true);
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).shape(), &[1, 4]);
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(g.grad(b).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn conv1x1_equals_per_position_linear() {
        let mut g = Graph::<f64>::new();
        // 2 input channels, 2x2 spatial, 1 output channel.
        let x = g.leaf(t64(&[2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]), false);
        let w = g.leaf(t64(&[1, 2, 1, 1], &[10.0, 100.0]), false);
        let y = g.conv2d(x, w, None, 1, 0, PadMode::Zero).unwrap();
        assert_eq!(g.value(y).data(), &[510.0, 620.0, 730.0, 840.0]);
    }

    #[test]
    fn circular_conv_wraps() {
        let mut g = Graph::<f64>::new();
        // 1x3x3 input, 3x3 sum kernel, circular padding: every output cell
        // sees the whole (wrapped) map, so all outputs equal the total sum.
        let x = g.leaf(
            t64(&[1, 3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]),
            false,
        );
        let w = g.leaf(Tensor::full(&[1, 1, 3, 3], 1.0), false);
        let y = g.conv2d(x, w, None, 1, 1, PadMode::Circular).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 45.0));
    }

    proptest::proptest! {
        #[test]
        fn softmax_rows_are_distributions(
            data in proptest::collection::vec(-30.0f64..30.0, 12)
        ) {
            let mut g = Graph::<f64>::new();
            let x = g.leaf(Tensor::from_vec(&[3, 4], data).unwrap(), false);
            let y = g.softmax(x);
            for r in 0..3 {
                let row = &g.value(y).data()[r * 4..(r + 1) * 4];
                proptest::prop_assert!(row.iter().all(|&v| v >= 0.0));
                let sum: f64 = row.iter().sum();
                proptest::prop_assert!((sum - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn layer_norm_output_is_standardized(
            data in proptest::collection::vec(-5.0f64..5.0, 16)
        ) {
            // The mean property needs only nonzero spread; the variance
            // property needs input variance ≳ 1 so the 1e-5 epsilon inside
            // the square root stays below the tolerance.
            let spread_ok = data.chunks(8).all(|row| {
                let max = row.iter().cloned().fold(f64::MIN, f64::max);
                let min = row.iter().cloned().fold(f64::MAX, f64::min);
                max - min > 1e-3
            });
            proptest::prop_assume!(spread_ok);
            let var_of = |row: &[f64]| {
                let mean: f64 = row.iter().sum::<f64>() / row.len() as f64;
                row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / row.len() as f64
            };
            let mut g = Graph::<f64>::new();
            let x = g.leaf(Tensor::from_vec(&[2, 8], data.clone()).unwrap(), false);
            let gain = g.leaf(Tensor::full(&[8], 1.0), false);
            let bias = g.leaf(Tensor::zeros(&[8]), false);
            let y = g.layer_norm(x, gain, bias).unwrap();
            for r in 0..2 {
                let row = &g.value(y).data()[r * 8..(r + 1) * 8];
                let mean: f64 = row.iter().sum::<f64>() / 8.0;
                proptest::prop_assert!(mean.abs() < 1e-6, "mean {}", mean);
                if var_of(&data[r * 8..(r + 1) * 8]) >= 1.0 {
                    let var = var_of(row);
                    proptest::prop_assert!((var - 1.0).abs() < 1e-5, "variance {}", var);
                }
            }
        }
    }

    #[test]
    fn avg_pool_and_channel_max() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t64(&[1, 2, 2], &[1.0, 3.0, 5.0, 7.0]), false);
        let y = g.avg_pool(x, 2).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);

        let q = g.leaf(t64(&[2, 1, 2], &[1.0, 9.0, 5.0, 2.0]), true);
        let v = g.channel_max(q).unwrap();
        assert_eq!(g.value(v).shape(), &[1, 1, 2]);
        assert_eq!(g.value(v).data(), &[5.0, 9.0]);
        let s = g.sum(v);
        g.backward(s).unwrap();
        assert_eq!(g.grad(q).unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);
    }
}
