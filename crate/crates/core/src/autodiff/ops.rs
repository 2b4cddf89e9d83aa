//! Forward definitions and backward rules of every tape operation.

use super::scalar::{gemm, View};
use super::{invalid, mismatch, Result, Scalar, Tape, Tensor, Var};

pub(crate) enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        tb: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
    },
    MagPool {
        x: Var,
        argmax: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Gelu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    AddBroadcast {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        blocks: Vec<usize>,
    },
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    Patchify {
        x: Var,
        patch_len: usize,
        stride: usize,
        count: usize,
    },
    Mean {
        x: Var,
    },
    Mse {
        pred: Var,
        target: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn accumulate<'g, T: Scalar>(grads: &'g mut [Option<Vec<T>>], v: Var, len: usize) -> &'g mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

/// Copies `src` (shape `shape`) into the layout obtained by permuting axes.
fn permute_data<T: Scalar>(src: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total = src.len();
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return out;
    }
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    let last = rank - 1;
    loop {
        // innermost axis as a tight loop
        let s = strides[last];
        for j in 0..out_shape[last] {
            out.push(src[offset + j * s]);
        }
        // advance the outer counters
        let mut d = last;
        loop {
            if d == 0 {
                return out;
            }
            d -= 1;
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Tape<T> {
    fn matmul_impl(&mut self, a: Var, b: Var, tb: bool, batched: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let op = if batched { "bmm" } else { "matmul" };
        let rank = if batched { 3 } else { 2 };
        if sa.len() != rank || sb.len() != rank {
            return Err(mismatch(op, format!("{sa:?} x {sb:?}")));
        }
        let (batch, m, k) = if batched { (sa[0], sa[1], sa[2]) } else { (1, sa[0], sa[1]) };
        let (bb, kb, n) = match (batched, tb) {
            (true, false) => (sb[0], sb[1], sb[2]),
            (true, true) => (sb[0], sb[2], sb[1]),
            (false, false) => (1, sb[0], sb[1]),
            (false, true) => (1, sb[1], sb[0]),
        };
        if bb != batch || kb != k {
            return Err(mismatch(op, format!("{sa:?} x {sb:?} (transpose_b = {tb})")));
        }
        let mut out = vec![T::zero(); batch * m * n];
        {
            let av = &self.value(a).data;
            let bv = &self.value(b).data;
            let vb = if tb { View::row_major(k).t() } else { View::row_major(n) };
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    &av[i * m * k..(i + 1) * m * k],
                    View::row_major(k),
                    &bv[i * k * n..(i + 1) * k * n],
                    vb,
                    T::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                    View::row_major(n),
                );
            }
        }
        let shape = if batched { vec![batch, m, n] } else { vec![m, n] };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::MatMul {
                a,
                b,
                tb,
                batch,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    /// `[m, k] x [k, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, false)
    }

    /// Batched `[B, m, k] x [B, k, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, true)
    }

    /// Batched `a bᵀ`: `[B, m, k] x [B, n, k] -> [B, m, n]`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true, true)
    }

    /// Cross-correlation of `x: [R, Cin, T]` with `w: [Cout, Cin, K]` plus
    /// bias `b: [Cout]`, zero-padded so the output keeps length `T`.
    /// Tap `k` reads input position `t + k - (K - 1) / 2`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let sb = self.shape(b).to_vec();
        if sx.len() != 3 || sw.len() != 3 || sw[1] != sx[1] || sb != [sw[0]] || sw[2] == 0 {
            return Err(mismatch("conv1d", format!("x {sx:?}, w {sw:?}, b {sb:?}")));
        }
        let (rows, cin, len) = (sx[0], sx[1], sx[2]);
        let (cout, taps) = (sw[0], sw[2]);
        let pad = (taps - 1) / 2;
        let xv = &self.value(x).data;
        let wv = &self.value(w).data;
        let bv = &self.value(b).data;
        let mut out = vec![T::zero(); rows * cout * len];
        for r in 0..rows {
            for o in 0..cout {
                let y = &mut out[(r * cout + o) * len..(r * cout + o + 1) * len];
                y.iter_mut().for_each(|v| *v = bv[o]);
                for i in 0..cin {
                    let xs = &xv[(r * cin + i) * len..(r * cin + i + 1) * len];
                    for k in 0..taps {
                        let wk = wv[(o * cin + i) * taps + k];
                        // y[t] += wk * x[t + k - pad] for 0 <= t + k - pad < len
                        let lo = pad.saturating_sub(k);
                        let hi = (len + pad).saturating_sub(k).min(len);
                        for t in lo..hi {
                            y[t] += wk * xs[t + k - pad];
                        }
                    }
                }
            }
        }
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(
            Tensor {
                shape: vec![rows, cout, len],
                data: out,
            },
            Op::Conv1d { x, w, b },
            rg,
        ))
    }

    /// Pools the last axis, keeping in each window the element of largest
    /// magnitude with its sign. Windows are centred (`(window - 1) / 2` to the
    /// left) at positions `0, stride, 2 stride, ...`; positions outside the
    /// input are skipped. Ties go to the earliest index.
    pub fn magnitude_maxpool1d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.is_empty() || window == 0 || stride == 0 {
            return Err(invalid(
                "magnitude_maxpool1d",
                format!("shape {sx:?}, window {window}, stride {stride}"),
            ));
        }
        let len = *sx.last().unwrap();
        let rows: usize = sx[..sx.len() - 1].iter().product();
        let out_len = if len == 0 { 0 } else { (len - 1) / stride + 1 };
        let left = (window - 1) / 2;
        let xv = &self.value(x).data;
        let mut out = Vec::with_capacity(rows * out_len);
        let mut argmax = Vec::with_capacity(rows * out_len);
        for r in 0..rows {
            let base = r * len;
            for o in 0..out_len {
                let centre = o * stride;
                let start = centre.saturating_sub(left);
                let end = (centre + window - left).min(len);
                let mut best = start;
                for t in start + 1..end {
                    if xv[base + t].abs() > xv[base + best].abs() {
                        best = t;
                    }
                }
                out.push(xv[base + best]);
                argmax.push(base + best);
            }
        }
        let mut shape = sx;
        *shape.last_mut().unwrap() = out_len;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor { shape, data: out }, Op::MagPool { x, argmax }, rg))
    }

    /// Normalizes over the last axis, then applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(invalid("layer_norm", format!("eps must be positive, got {eps}")));
        }
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| mismatch("layer_norm", "scalar input"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(mismatch(
                "layer_norm",
                format!("x {sx:?}, gamma {:?}, beta {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let rows = self.value(x).numel() / d.max(1);
        let xv = &self.value(x).data;
        let gv = &self.value(gamma).data;
        let bv = &self.value(beta).data;
        let inv_d = T::of(1.0 / d as f64);
        let eps = T::of(eps);
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            Tensor { shape: sx, data: out },
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() {
            return Err(invalid("softmax", format!("axis {axis} for shape {sx:?}")));
        }
        let (outer, len, inner) = split_axis(&sx, axis);
        let xv = &self.value(x).data;
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| xv[at(j)]).fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for j in 0..len {
                    let e = (xv[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[at(j)] /= sum;
                }
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor { shape: sx, data: out },
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let c = T::of(GELU_C);
        let a = T::of(GELU_A);
        let half = T::of(0.5);
        let value = self.value(x);
        let data = value
            .data
            .iter()
            .map(|&v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()))
            .collect();
        let shape = value.shape.clone();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor { shape, data }, Op::Gelu { x }, rg))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(
                name,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let av = self.value(a);
        let bv = self.value(b);
        Ok(Tensor {
            shape: av.shape.clone(),
            data: av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect(),
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Mul { a, b }, rg))
    }

    /// `a + b` where the shape of `b` is a trailing suffix of the shape of
    /// `a`; `b` is repeated over the leading axes (biases, positional tables).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != sb[..] {
            return Err(mismatch("add_broadcast", format!("{sa:?} + {sb:?}")));
        }
        let av = &self.value(a).data;
        let bv = &self.value(b).data;
        let period = bv.len().max(1);
        let data = av
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % period])
            .collect();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor { shape: sa, data }, Op::AddBroadcast { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let value = self.value(x);
        let t = Tensor {
            shape: value.shape.clone(),
            data: value.data.iter().map(|&v| v * c).collect(),
        };
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::Scale { x, c }, rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .map(|&v| self.shape(v).to_vec())
            .ok_or_else(|| invalid("concat", "no inputs"))?;
        if axis >= first.len() {
            return Err(invalid("concat", format!("axis {axis} for shape {first:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(mismatch("concat", format!("{first:?} vs {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let blocks: Vec<usize> = inputs.iter().map(|&v| self.shape(v)[axis] * inner).collect();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &blk) in inputs.iter().zip(&blocks) {
                data.extend_from_slice(&self.value(v).data[o * blk..(o + 1) * blk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.any_grad(inputs);
        Ok(self.push(
            Tensor { shape, data },
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                blocks,
            },
            rg,
        ))
    }

    /// Output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let mut seen = vec![false; sx.len()];
        let valid = axes.len() == sx.len()
            && axes.iter().all(|&a| a < sx.len() && !std::mem::replace(&mut seen[a], true));
        if !valid {
            return Err(invalid("permute", format!("axes {axes:?} for shape {sx:?}")));
        }
        let data = permute_data(&self.value(x).data, &sx, axes);
        let shape = axes.iter().map(|&a| sx[a]).collect();
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor { shape, data },
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, x: Var, a: usize, b: usize) -> Result<Var> {
        let mut axes: Vec<usize> = (0..self.shape(x).len()).collect();
        if a >= axes.len() || b >= axes.len() {
            return Err(invalid("transpose", format!("axes {a}, {b}")));
        }
        axes.swap(a, b);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(mismatch(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(x)),
            ));
        }
        let data = self.value(x).data.clone();
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor {
                shape: shape.to_vec(),
                data,
            },
            Op::Reshape { x },
            rg,
        ))
    }

    /// Cuts `count` patches of `patch_len` steps at offsets `0, stride, ...`
    /// from `x: [R, C, T]`, giving `[R, count, C * patch_len]` with each patch
    /// flattened channel-major. Steps past the end repeat the last time step.
    pub fn patchify(&mut self, x: Var, patch_len: usize, stride: usize, count: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || sx[2] == 0 || patch_len == 0 || stride == 0 {
            return Err(invalid(
                "patchify",
                format!("shape {sx:?}, patch {patch_len}, stride {stride}"),
            ));
        }
        let (rows, ch, len) = (sx[0], sx[1], sx[2]);
        let xv = &self.value(x).data;
        let width = ch * patch_len;
        let mut data = Vec::with_capacity(rows * count * width);
        for r in 0..rows {
            for k in 0..count {
                for c in 0..ch {
                    let base = (r * ch + c) * len;
                    for p in 0..patch_len {
                        data.push(xv[base + (k * stride + p).min(len - 1)]);
                    }
                }
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor {
                shape: vec![rows, count, width],
                data,
            },
            Op::Patchify {
                x,
                patch_len,
                stride,
                count,
            },
            rg,
        ))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.numel() == 0 {
            return Err(invalid("mean", "empty tensor"));
        }
        let m = v.data.iter().copied().sum::<T>() / T::of(v.numel() as f64);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::scalar(m), Op::Mean { x }, rg))
    }

    /// Mean squared error between same-shaped tensors.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(mismatch(
                "mse_loss",
                format!("{:?} vs {:?}", self.shape(pred), self.shape(target)),
            ));
        }
        let p = &self.value(pred).data;
        let t = &self.value(target).data;
        if p.is_empty() {
            return Err(invalid("mse_loss", "empty tensor"));
        }
        let sum = p.iter().zip(t).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>();
        let loss = sum / T::of(p.len() as f64);
        let rg = self.any_grad(&[pred, target]);
        Ok(self.push(Tensor::scalar(loss), Op::Mse { pred, target }, rg))
    }

    /// Multiplies by a fixed mask (entries `0` or `1 / (1 - rate)`).
    pub fn dropout_mask(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        if mask.len() != self.value(x).numel() {
            return Err(mismatch("dropout", format!("mask {} for {:?}", mask.len(), self.shape(x))));
        }
        let value = self.value(x);
        let t = Tensor {
            shape: value.shape.clone(),
            data: value.data.iter().zip(&mask).map(|(&v, &m)| v * m).collect(),
        };
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::Dropout { x, mask }, rg))
    }

    /// Propagates the output gradient `g` of node `i` into its inputs.
    pub(super) fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let wants = |v: &Var| self.nodes[v.0].requires_grad;
        let numel = |v: &Var| self.nodes[v.0].value.numel();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                tb,
                batch,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let va = View::row_major(k);
                let vb = if *tb { View::row_major(k).t() } else { View::row_major(n) };
                let vc = View::row_major(n);
                if wants(a) {
                    let bv = &self.value(*b).data;
                    let ga = accumulate(grads, *a, numel(a));
                    for i in 0..*batch {
                        // dA = dC Bᵀ
                        gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            &g[i * m * n..(i + 1) * m * n],
                            vc,
                            &bv[i * k * n..(i + 1) * k * n],
                            vb.t(),
                            T::one(),
                            &mut ga[i * m * k..(i + 1) * m * k],
                            va,
                        );
                    }
                }
                if wants(b) {
                    let av = &self.value(*a).data;
                    let gb = accumulate(grads, *b, numel(b));
                    for i in 0..*batch {
                        // dB = Aᵀ dC, written through B's view
                        gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            &av[i * m * k..(i + 1) * m * k],
                            va.t(),
                            &g[i * m * n..(i + 1) * m * n],
                            vc,
                            T::one(),
                            &mut gb[i * k * n..(i + 1) * k * n],
                            vb,
                        );
                    }
                }
            }
            Op::Conv1d { x, w, b } => {
                let sx = self.shape(*x);
                let sw = self.shape(*w);
                let (rows, cin, len) = (sx[0], sx[1], sx[2]);
                let (cout, taps) = (sw[0], sw[2]);
                let pad = (taps - 1) / 2;
                let xv = &self.value(*x).data;
                let wv = &self.value(*w).data;
                if wants(b) {
                    let gb = accumulate(grads, *b, cout);
                    for r in 0..rows {
                        for o in 0..cout {
                            gb[o] += g[(r * cout + o) * len..(r * cout + o + 1) * len]
                                .iter()
                                .copied()
                                .sum::<T>();
                        }
                    }
                }
                if wants(w) {
                    let gw = accumulate(grads, *w, numel(w));
                    for r in 0..rows {
                        for o in 0..cout {
                            let gy = &g[(r * cout + o) * len..(r * cout + o + 1) * len];
                            for i in 0..cin {
                                let xs = &xv[(r * cin + i) * len..(r * cin + i + 1) * len];
                                for k in 0..taps {
                                    let lo = pad.saturating_sub(k);
                                    let hi = (len + pad).saturating_sub(k).min(len);
                                    let mut acc = T::zero();
                                    for t in lo..hi {
                                        acc += gy[t] * xs[t + k - pad];
                                    }
                                    gw[(o * cin + i) * taps + k] += acc;
                                }
                            }
                        }
                    }
                }
                if wants(x) {
                    let gx = accumulate(grads, *x, numel(x));
                    for r in 0..rows {
                        for o in 0..cout {
                            let gy = &g[(r * cout + o) * len..(r * cout + o + 1) * len];
                            for i in 0..cin {
                                let gxs = &mut gx[(r * cin + i) * len..(r * cin + i + 1) * len];
                                for k in 0..taps {
                                    let wk = wv[(o * cin + i) * taps + k];
                                    let lo = pad.saturating_sub(k);
                                    let hi = (len + pad).saturating_sub(k).min(len);
                                    for t in lo..hi {
                                        gxs[t + k - pad] += wk * gy[t];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::MagPool { x, argmax } => {
                if wants(x) {
                    let gx = accumulate(grads, *x, numel(x));
                    for (&src, &gv) in argmax.iter().zip(g) {
                        gx[src] += gv;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.shape(*gamma)[0];
                let rows = rstd.len();
                if wants(beta) {
                    let gb = accumulate(grads, *beta, d);
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                }
                if wants(gamma) {
                    let gg = accumulate(grads, *gamma, d);
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if wants(x) {
                    let gv = &self.value(*gamma).data;
                    let gx = accumulate(grads, *x, numel(x));
                    let inv_d = T::of(1.0 / d as f64);
                    for r in 0..rows {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..d {
                            let dh = g[r * d + j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[r * d + j];
                        }
                        mean_dh *= inv_d;
                        mean_dh_h *= inv_d;
                        for j in 0..d {
                            let dh = g[r * d + j] * gv[j];
                            gx[r * d + j] += rstd[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                if wants(x) {
                    let y = &node.value.data;
                    let gx = accumulate(grads, *x, numel(x));
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let dot = (0..*len).map(|j| g[at(j)] * y[at(j)]).sum::<T>();
                            for j in 0..*len {
                                gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                if wants(x) {
                    let c = T::of(GELU_C);
                    let a = T::of(GELU_A);
                    let half = T::of(0.5);
                    let three = T::of(3.0);
                    let xv = &self.value(*x).data;
                    let gx = accumulate(grads, *x, numel(x));
                    for ((gxi, &v), &gi) in gx.iter_mut().zip(xv).zip(g) {
                        let th = (c * (v + a * v * v * v)).tanh();
                        let d = half * (T::one() + th)
                            + half * v * (T::one() - th * th) * c * (T::one() + three * a * v * v);
                        *gxi += gi * d;
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if wants(v) {
                        let gv = accumulate(grads, *v, g.len());
                        gv.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::Sub { a, b } => {
                if wants(a) {
                    let ga = accumulate(grads, *a, g.len());
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
                if wants(b) {
                    let gb = accumulate(grads, *b, g.len());
                    gb.iter_mut().zip(g).for_each(|(x, &y)| *x -= y);
                }
            }
            Op::Mul { a, b } => {
                if wants(a) {
                    let bv = &self.value(*b).data;
                    let ga = accumulate(grads, *a, g.len());
                    for ((x, &gi), &o) in ga.iter_mut().zip(g).zip(bv) {
                        *x += gi * o;
                    }
                }
                if wants(b) {
                    let av = &self.value(*a).data;
                    let gb = accumulate(grads, *b, g.len());
                    for ((x, &gi), &o) in gb.iter_mut().zip(g).zip(av) {
                        *x += gi * o;
                    }
                }
            }
            Op::AddBroadcast { a, b } => {
                if wants(a) {
                    let ga = accumulate(grads, *a, g.len());
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
                if wants(b) {
                    let period = numel(b).max(1);
                    let gb = accumulate(grads, *b, numel(b));
                    for chunk in g.chunks(period) {
                        gb.iter_mut().zip(chunk).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::Scale { x, c } => {
                if wants(x) {
                    let gx = accumulate(grads, *x, g.len());
                    gx.iter_mut().zip(g).for_each(|(v, &y)| *v += y * *c);
                }
            }
            Op::Concat {
                inputs,
                outer,
                blocks,
            } => {
                let total: usize = blocks.iter().sum();
                let mut start = 0;
                for (v, &blk) in inputs.iter().zip(blocks) {
                    if wants(v) {
                        let gv = accumulate(grads, *v, outer * blk);
                        for o in 0..*outer {
                            let src = &g[o * total + start..o * total + start + blk];
                            gv[o * blk..(o + 1) * blk]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(x, &y)| *x += y);
                        }
                    }
                    start += blk;
                }
            }
            Op::Permute { x, axes } => {
                if wants(x) {
                    let mut inverse = vec![0; axes.len()];
                    for (i, &a) in axes.iter().enumerate() {
                        inverse[a] = i;
                    }
                    let back = permute_data(g, &node.value.shape, &inverse);
                    let gx = accumulate(grads, *x, g.len());
                    gx.iter_mut().zip(&back).for_each(|(v, &y)| *v += y);
                }
            }
            Op::Reshape { x } => {
                if wants(x) {
                    let gx = accumulate(grads, *x, g.len());
                    gx.iter_mut().zip(g).for_each(|(v, &y)| *v += y);
                }
            }
            Op::Patchify {
                x,
                patch_len,
                stride,
                count,
            } => {
                if wants(x) {
                    let sx = self.shape(*x);
                    let (rows, ch, len) = (sx[0], sx[1], sx[2]);
                    let gx = accumulate(grads, *x, numel(x));
                    let mut it = g.iter();
                    for r in 0..rows {
                        for k in 0..*count {
                            for c in 0..ch {
                                let base = (r * ch + c) * len;
                                for p in 0..*patch_len {
                                    gx[base + (k * stride + p).min(len - 1)] += *it.next().unwrap();
                                }
                            }
                        }
                    }
                }
            }
            Op::Mean { x } => {
                if wants(x) {
                    let n = numel(x);
                    let share = g[0] / T::of(n as f64);
                    let gx = accumulate(grads, *x, n);
                    gx.iter_mut().for_each(|v| *v += share);
                }
            }
            Op::Mse { pred, target } => {
                let p = &self.value(*pred).data;
                let t = &self.value(*target).data;
                let scale = g[0] * T::of(2.0 / p.len() as f64);
                if wants(pred) {
                    let gp = accumulate(grads, *pred, p.len());
                    for ((v, &a), &b) in gp.iter_mut().zip(p).zip(t) {
                        *v += scale * (a - b);
                    }
                }
                if wants(target) {
                    let gt = accumulate(grads, *target, t.len());
                    for ((v, &a), &b) in gt.iter_mut().zip(p).zip(t) {
                        *v -= scale * (a - b);
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if wants(x) {
                    let gx = accumulate(grads, *x, g.len());
                    for ((v, &gi), &m) in gx.iter_mut().zip(g).zip(mask) {
                        *v += gi * m;
                    }
                }
            }
        }
    }
}
