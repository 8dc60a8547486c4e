//! Differentiable primitives. Forward values are computed eagerly; each op
//! registers an adjoint closure when any input is tracked.
//!
//! Broadcasting is restricted to a trailing-shape rule: the right operand of a
//! binary op must have a shape equal to the left operand's shape or to a
//! suffix of it. Anything else needs an explicit reshape.

use super::Tensor;
use crate::error::{PilotError, Result};

const ACOS_CLAMP: f64 = 1e-7;

fn suffix_broadcast(lhs: &[usize], rhs: &[usize]) -> Option<usize> {
    if rhs.len() > lhs.len() {
        return None;
    }
    if &lhs[lhs.len() - rhs.len()..] != rhs {
        return None;
    }
    Some(lhs[..lhs.len() - rhs.len()].iter().product())
}

/// out[i] += a[i] for matching lengths.
fn axpy(out: &mut [f64], a: &[f64]) {
    for (o, v) in out.iter_mut().zip(a.iter()) {
        *o += v;
    }
}

/// out[i] += s * a[i] for matching lengths.
fn axpy_scaled(out: &mut [f64], s: f64, a: &[f64]) {
    for (o, v) in out.iter_mut().zip(a.iter()) {
        *o += s * v;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four independent accumulators so the FP adds pipeline
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let (x, y) = (&a[4 * i..4 * i + 4], &b[4 * i..4 * i + 4]);
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for i in 4 * chunks..a.len() {
        tail += a[i] * b[i];
    }
    acc[0] + acc[1] + acc[2] + acc[3] + tail
}

// Accumulating matrix-multiply kernels: C += op(A) * op(B).
fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..p * n + n];
            let crow = &mut c[i * n..i * n + n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    // A is m×k, B is n×k, C += A·Bᵀ (m×n)
    for i in 0..m {
        let arow = &a[i * k..i * k + k];
        for j in 0..n {
            let brow = &b[j * k..j * k + k];
            let mut acc = 0.0;
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            c[i * n + j] += acc;
        }
    }
}

fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    // A is k×m, B is k×n, C += Aᵀ·B (m×n)
    for p in 0..k {
        let arow = &a[p * m..p * m + m];
        let brow = &b[p * n..p * n + n];
        for i in 0..m {
            let av = arow[i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..i * n + n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

fn binary(lhs: &Tensor, rhs: &Tensor, op: BinOp) -> Result<Tensor> {
    let repeats = suffix_broadcast(lhs.shape(), rhs.shape()).ok_or_else(|| {
        PilotError::invalid(format!(
            "operand shapes {:?} and {:?} do not conform",
            lhs.shape(),
            rhs.shape()
        ))
    })?;
    let a = lhs.data();
    let b = rhs.data();
    let block = b.len();
    let mut out = Vec::with_capacity(a.len());
    for r in 0..repeats {
        let ab = &a[r * block..(r + 1) * block];
        for (x, y) in ab.iter().zip(b.iter()) {
            out.push(match op {
                BinOp::Add => x + y,
                BinOp::Sub => x - y,
                BinOp::Mul => x * y,
                BinOp::Div => x / y,
            });
        }
    }
    let a_saved: Vec<f64>;
    let b_saved: Vec<f64>;
    match op {
        BinOp::Mul | BinOp::Div => {
            a_saved = a.clone();
            b_saved = b.clone();
        }
        _ => {
            a_saved = Vec::new();
            b_saved = Vec::new();
        }
    }
    drop(a);
    drop(b);
    let shape = lhs.shape().to_vec();
    Ok(Tensor::from_op(
        shape,
        out,
        vec![lhs.clone(), rhs.clone()],
        Box::new(move |g, parents, store| {
            let (lhs, rhs) = (&parents[0], &parents[1]);
            if lhs.track() {
                let gl = store.entry(lhs);
                match op {
                    BinOp::Add | BinOp::Sub => axpy(gl, g),
                    BinOp::Mul => {
                        for (i, gi) in g.iter().enumerate() {
                            gl[i] += gi * b_saved[i % block];
                        }
                    }
                    BinOp::Div => {
                        for (i, gi) in g.iter().enumerate() {
                            gl[i] += gi / b_saved[i % block];
                        }
                    }
                }
            }
            if rhs.track() {
                let gr = store.entry(rhs);
                for r in 0..repeats {
                    let gs = &g[r * block..(r + 1) * block];
                    match op {
                        BinOp::Add => axpy(gr, gs),
                        BinOp::Sub => {
                            for (o, v) in gr.iter_mut().zip(gs.iter()) {
                                *o -= v;
                            }
                        }
                        BinOp::Mul => {
                            for j in 0..block {
                                gr[j] += gs[j] * a_saved[r * block + j];
                            }
                        }
                        BinOp::Div => {
                            for j in 0..block {
                                let bj = b_saved[j];
                                gr[j] -= gs[j] * a_saved[r * block + j] / (bj * bj);
                            }
                        }
                    }
                }
            }
        }),
    ))
}

fn unary(
    t: &Tensor,
    f: impl Fn(f64) -> f64,
    dfdx: impl Fn(f64, f64) -> f64 + 'static,
) -> Tensor {
    let x = t.to_vec();
    let y: Vec<f64> = x.iter().map(|&v| f(v)).collect();
    let y_saved = y.clone();
    Tensor::from_op(
        t.shape().to_vec(),
        y,
        vec![t.clone()],
        Box::new(move |g, parents, store| {
            if parents[0].track() {
                let gp = store.entry(&parents[0]);
                for i in 0..g.len() {
                    gp[i] += g[i] * dfdx(x[i], y_saved[i]);
                }
            }
        }),
    )
}

impl Tensor {
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        binary(self, rhs, BinOp::Add)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        binary(self, rhs, BinOp::Sub)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        binary(self, rhs, BinOp::Mul)
    }

    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        binary(self, rhs, BinOp::Div)
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        unary(self, |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        unary(self, |x| x + c, |_, _| 1.0)
    }

    pub fn relu(&self) -> Tensor {
        unary(
            self,
            |x| if x > 0.0 { x } else { 0.0 },
            |x, _| if x > 0.0 { 1.0 } else { 0.0 },
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        unary(
            self,
            |x| 1.0 / (1.0 + (-x).exp()),
            |_, y| y * (1.0 - y),
        )
    }

    pub fn exp(&self) -> Tensor {
        unary(self, f64::exp, |_, y| y)
    }

    pub fn log(&self) -> Tensor {
        unary(self, f64::ln, |x, _| 1.0 / x)
    }

    pub fn sin(&self) -> Tensor {
        unary(self, f64::sin, |x, _| x.cos())
    }

    pub fn cos(&self) -> Tensor {
        unary(self, f64::cos, |x, _| -x.sin())
    }

    /// acos with the argument clamped to the open interval; the gradient is
    /// zero where the clamp is active.
    pub fn acos(&self) -> Tensor {
        unary(
            self,
            |x| x.clamp(-1.0 + ACOS_CLAMP, 1.0 - ACOS_CLAMP).acos(),
            |x, _| {
                if x <= -1.0 + ACOS_CLAMP || x >= 1.0 - ACOS_CLAMP {
                    0.0
                } else {
                    -1.0 / (1.0 - x * x).sqrt()
                }
            },
        )
    }

    pub fn clamp_values(&self, lo: f64, hi: f64) -> Tensor {
        unary(
            self,
            move |x| x.clamp(lo, hi),
            move |x, _| if x < lo || x > hi { 0.0 } else { 1.0 },
        )
    }

    pub fn sum(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        Tensor::from_op(
            vec![1],
            vec![s],
            vec![self.clone()],
            Box::new(|g, parents, store| {
                if parents[0].track() {
                    let gp = store.entry(&parents[0]);
                    for v in gp.iter_mut() {
                        *v += g[0];
                    }
                }
            }),
        )
    }

    pub fn mean(&self) -> Tensor {
        let n = self.len() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        let expect: usize = shape.iter().product();
        if expect != self.len() {
            return Err(PilotError::invalid(format!(
                "cannot reshape {:?} into {:?}",
                self.shape(),
                shape
            )));
        }
        Ok(Tensor::from_op(
            shape,
            self.to_vec(),
            vec![self.clone()],
            Box::new(|g, parents, store| {
                if parents[0].track() {
                    axpy(store.entry(&parents[0]), g);
                }
            }),
        ))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let nd = self.shape().len();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(PilotError::invalid(format!(
                "invalid permutation {:?} for rank {}",
                axes, nd
            )));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape()[a]).collect();
        let data = permute_raw(&self.data(), self.shape(), axes);
        let mut inverse = vec![0usize; nd];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let gshape = out_shape.clone();
        Ok(Tensor::from_op(
            out_shape,
            data,
            vec![self.clone()],
            Box::new(move |g, parents, store| {
                if parents[0].track() {
                    let back = permute_raw(g, &gshape, &inverse);
                    axpy(store.entry(&parents[0]), &back);
                }
            }),
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.shape().len() != 2 {
            return Err(PilotError::invalid("transpose expects a 2-D tensor"));
        }
        self.permute(&[1, 0])
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(PilotError::invalid(format!(
                "slice axis {} range {}..{} out of bounds for {:?}",
                axis,
                start,
                start + len,
                shape
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let axis_len = shape[axis];
        let mut out = Vec::with_capacity(outer * len * inner);
        {
            let d = self.data();
            for o in 0..outer {
                let base = o * axis_len * inner + start * inner;
                out.extend_from_slice(&d[base..base + len * inner]);
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            Box::new(move |g, parents, store| {
                if parents[0].track() {
                    let gp = store.entry(&parents[0]);
                    for o in 0..outer {
                        let base = o * axis_len * inner + start * inner;
                        axpy(&mut gp[base..base + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                    }
                }
            }),
        ))
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (a_sh, b_sh) = (self.shape(), rhs.shape());
        if a_sh.len() != 2 || b_sh.len() != 2 || a_sh[1] != b_sh[0] {
            return Err(PilotError::invalid(format!(
                "matmul shapes {:?} x {:?} do not conform",
                a_sh, b_sh
            )));
        }
        let (m, k, n) = (a_sh[0], a_sh[1], b_sh[1]);
        let mut out = vec![0.0; m * n];
        mm_nn(&self.data(), &rhs.data(), m, k, n, &mut out);
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g, parents, store| {
                let (a, b) = (&parents[0], &parents[1]);
                if a.track() {
                    let bd = b.to_vec();
                    mm_nt(g, &bd, m, n, k, store.entry(a));
                }
                if b.track() {
                    let ad = a.to_vec();
                    mm_tn(&ad, g, k, m, n, store.entry(b));
                }
            }),
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Tensor {
        let d = *self.shape().last().expect("softmax needs rank >= 1");
        let x = self.to_vec();
        let mut y = vec![0.0; x.len()];
        for row in 0..x.len() / d {
            let xs = &x[row * d..(row + 1) * d];
            let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..d {
                let e = (xs[j] - m).exp();
                y[row * d + j] = e;
                z += e;
            }
            for j in 0..d {
                y[row * d + j] /= z;
            }
        }
        let y_saved = y.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            y,
            vec![self.clone()],
            Box::new(move |g, parents, store| {
                if parents[0].track() {
                    let gp = store.entry(&parents[0]);
                    for row in 0..g.len() / d {
                        let ys = &y_saved[row * d..(row + 1) * d];
                        let gs = &g[row * d..(row + 1) * d];
                        let dot: f64 = ys.iter().zip(gs.iter()).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            gp[row * d + j] += ys[j] * (gs[j] - dot);
                        }
                    }
                }
            }),
        )
    }

    /// Layer normalization over the last axis with learnable gain and bias.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let d = *self.shape().last().ok_or_else(|| PilotError::invalid("layer_norm needs rank >= 1"))?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(PilotError::invalid(format!(
                "layer_norm gain/bias must have shape [{}]",
                d
            )));
        }
        let x = self.to_vec();
        let gm = gamma.to_vec();
        let bt = beta.to_vec();
        let rows = x.len() / d;
        let mut y = vec![0.0; x.len()];
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let xs = &x[r * d..(r + 1) * d];
            let mu = xs.iter().sum::<f64>() / d as f64;
            let var = xs.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (xs[j] - mu) * is;
                xhat[r * d + j] = h;
                y[r * d + j] = gm[j] * h + bt[j];
            }
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            y,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, parents, store| {
                let rows = g.len() / d;
                if parents[1].track() {
                    let gg = store.entry(&parents[1]);
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if parents[2].track() {
                    let gb = store.entry(&parents[2]);
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                }
                if parents[0].track() {
                    let gx = store.entry(&parents[0]);
                    for r in 0..rows {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = g[r * d + j] * gm[j];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[r * d + j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            let dh = g[r * d + j] * gm[j];
                            gx[r * d + j] +=
                                inv_std[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h);
                        }
                    }
                }
            }),
        ))
    }

    /// 2-D convolution, stride 1, same padding. Input `[C_in, H, W]`,
    /// weight `[C_out, C_in, kh, kw]`, bias `[C_out]`.
    pub fn conv2d(&self, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let xs = self.shape();
        let ws = weight.shape();
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || bias.shape() != [ws[0]] {
            return Err(PilotError::invalid(format!(
                "conv2d shapes input {:?}, weight {:?}, bias {:?} do not conform",
                xs,
                ws,
                bias.shape()
            )));
        }
        let (cin, h, w) = (xs[0], xs[1], xs[2]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        let (ph, pw) = (kh / 2, kw / 2);
        let x = self.to_vec();
        let wt = weight.to_vec();
        let b = bias.to_vec();
        let mut out = vec![0.0; cout * h * w];
        for co in 0..cout {
            let ob = co * h * w;
            out[ob..ob + h * w].fill(b[co]);
            for ci in 0..cin {
                let ib = ci * h * w;
                for ki in 0..kh {
                    for kj in 0..kw {
                        let wv = wt[((co * cin + ci) * kh + ki) * kw + kj];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ow0, ow1) = conv_col_range(w, kj, pw);
                        for oh in 0..h {
                            let ih = oh + ki;
                            if ih < ph || ih - ph >= h {
                                continue;
                            }
                            let ih = ih - ph;
                            let irow = ib + ih * w + ow0 + kj - pw;
                            let orow = ob + oh * w + ow0;
                            let n = ow1 - ow0;
                            axpy_scaled(&mut out[orow..orow + n], wv, &x[irow..irow + n]);
                        }
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            vec![cout, h, w],
            out,
            vec![self.clone(), weight.clone(), bias.clone()],
            Box::new(move |g, parents, store| {
                if parents[2].track() {
                    let gb = store.entry(&parents[2]);
                    for co in 0..cout {
                        gb[co] += g[co * h * w..(co + 1) * h * w].iter().sum::<f64>();
                    }
                }
                if parents[1].track() {
                    let gw = store.entry(&parents[1]);
                    for co in 0..cout {
                        let ob = co * h * w;
                        for ci in 0..cin {
                            let ib = ci * h * w;
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let (ow0, ow1) = conv_col_range(w, kj, pw);
                                    let n = ow1 - ow0;
                                    let mut acc = 0.0;
                                    for oh in 0..h {
                                        let ih = oh + ki;
                                        if ih < ph || ih - ph >= h {
                                            continue;
                                        }
                                        let ih = ih - ph;
                                        let irow = ib + ih * w + ow0 + kj - pw;
                                        let orow = ob + oh * w + ow0;
                                        acc += dot(&g[orow..orow + n], &x[irow..irow + n]);
                                    }
                                    gw[((co * cin + ci) * kh + ki) * kw + kj] += acc;
                                }
                            }
                        }
                    }
                }
                if parents[0].track() {
                    let gx = store.entry(&parents[0]);
                    for co in 0..cout {
                        let ob = co * h * w;
                        for ci in 0..cin {
                            let ib = ci * h * w;
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let wv = wt[((co * cin + ci) * kh + ki) * kw + kj];
                                    if wv == 0.0 {
                                        continue;
                                    }
                                    let (ow0, ow1) = conv_col_range(w, kj, pw);
                                    let n = ow1 - ow0;
                                    for oh in 0..h {
                                        let ih = oh + ki;
                                        if ih < ph || ih - ph >= h {
                                            continue;
                                        }
                                        let ih = ih - ph;
                                        let irow = ib + ih * w + ow0 + kj - pw;
                                        let orow = ob + oh * w + ow0;
                                        axpy_scaled(&mut gx[irow..irow + n], wv, &g[orow..orow + n]);
                                    }
                                }
                            }
                        }
                    }
                }
            }),
        ))
    }

    /// Max pooling over `[C, H, W]` with stride equal to the kernel.
    pub fn max_pool2d(&self, kh: usize, kw: usize) -> Result<Tensor> {
        let xs = self.shape();
        if xs.len() != 3 || kh == 0 || kw == 0 {
            return Err(PilotError::invalid("max_pool2d expects a [C,H,W] tensor"));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let (oh, ow) = (h / kh, w / kw);
        if oh == 0 || ow == 0 {
            return Err(PilotError::invalid("max_pool2d kernel larger than input"));
        }
        let x = self.data();
        let mut out = vec![0.0; c * oh * ow];
        let mut argmax = vec![0usize; c * oh * ow];
        for ci in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for di in 0..kh {
                        for dj in 0..kw {
                            let idx = ci * h * w + (i * kh + di) * w + j * kw + dj;
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[ci * oh * ow + i * ow + j] = best;
                    argmax[ci * oh * ow + i * ow + j] = best_idx;
                }
            }
        }
        drop(x);
        Ok(Tensor::from_op(
            vec![c, oh, ow],
            out,
            vec![self.clone()],
            Box::new(move |g, parents, store| {
                if parents[0].track() {
                    let gp = store.entry(&parents[0]);
                    for (o, &src) in argmax.iter().enumerate() {
                        gp[src] += g[o];
                    }
                }
            }),
        ))
    }

    /// Batch normalization over the spatial axes of a `[C, H, W]` tensor.
    ///
    /// In training mode the per-channel statistics of this input are used and
    /// returned so the caller can maintain running estimates; in eval mode the
    /// supplied running statistics are used and treated as constants.
    pub fn batch_norm2d(
        &self,
        gamma: &Tensor,
        beta: &Tensor,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
        train: bool,
    ) -> Result<(Tensor, Option<(Vec<f64>, Vec<f64>)>)> {
        let xs = self.shape();
        if xs.len() != 3 {
            return Err(PilotError::invalid("batch_norm2d expects a [C,H,W] tensor"));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        if gamma.shape() != [c] || beta.shape() != [c] || running_mean.len() != c || running_var.len() != c {
            return Err(PilotError::invalid("batch_norm2d parameter shapes do not match channels"));
        }
        let m = (h * w) as f64;
        let x = self.to_vec();
        let gm = gamma.to_vec();
        let bt = beta.to_vec();
        let (mean, var): (Vec<f64>, Vec<f64>) = if train {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ci in 0..c {
                let xs = &x[ci * h * w..(ci + 1) * h * w];
                let mu = xs.iter().sum::<f64>() / m;
                mean[ci] = mu;
                var[ci] = xs.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m;
            }
            (mean, var)
        } else {
            (running_mean.to_vec(), running_var.to_vec())
        };
        let mut y = vec![0.0; x.len()];
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; c];
        for ci in 0..c {
            let is = 1.0 / (var[ci] + eps).sqrt();
            inv_std[ci] = is;
            for i in 0..h * w {
                let idx = ci * h * w + i;
                let hx = (x[idx] - mean[ci]) * is;
                xhat[idx] = hx;
                y[idx] = gm[ci] * hx + bt[ci];
            }
        }
        let stats = if train {
            Some((mean.clone(), var.clone()))
        } else {
            None
        };
        let out = Tensor::from_op(
            vec![c, h, w],
            y,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, parents, store| {
                if parents[1].track() {
                    let gg = store.entry(&parents[1]);
                    for ci in 0..c {
                        let mut acc = 0.0;
                        for i in 0..h * w {
                            acc += g[ci * h * w + i] * xhat[ci * h * w + i];
                        }
                        gg[ci] += acc;
                    }
                }
                if parents[2].track() {
                    let gb = store.entry(&parents[2]);
                    for ci in 0..c {
                        gb[ci] += g[ci * h * w..(ci + 1) * h * w].iter().sum::<f64>();
                    }
                }
                if parents[0].track() {
                    let gx = store.entry(&parents[0]);
                    for ci in 0..c {
                        let scale = gm[ci] * inv_std[ci];
                        if train {
                            let mut mean_dy = 0.0;
                            let mut mean_dy_h = 0.0;
                            for i in 0..h * w {
                                let idx = ci * h * w + i;
                                mean_dy += g[idx];
                                mean_dy_h += g[idx] * xhat[idx];
                            }
                            mean_dy /= m;
                            mean_dy_h /= m;
                            for i in 0..h * w {
                                let idx = ci * h * w + i;
                                gx[idx] += scale * (g[idx] - mean_dy - xhat[idx] * mean_dy_h);
                            }
                        } else {
                            for i in 0..h * w {
                                let idx = ci * h * w + i;
                                gx[idx] += scale * g[idx];
                            }
                        }
                    }
                }
            }),
        );
        Ok((out, stats))
    }

    /// Closed-form inverse of a single 2x2 matrix via det/adjugate.
    pub fn inverse2x2(&self) -> Result<Tensor> {
        if self.shape() != [2, 2] {
            return Err(PilotError::invalid("inverse2x2 expects shape [2,2]"));
        }
        let x = self.to_vec();
        let det = x[0] * x[3] - x[1] * x[2];
        if det.abs() < 1e-12 {
            return Err(PilotError::SingularMatrix(format!(
                "2x2 determinant {:e} below threshold",
                det
            )));
        }
        let inv = vec![x[3] / det, -x[1] / det, -x[2] / det, x[0] / det];
        let inv_saved = inv.clone();
        Ok(Tensor::from_op(
            vec![2, 2],
            inv,
            vec![self.clone()],
            Box::new(move |g, parents, store| {
                if parents[0].track() {
                    // dA = -A⁻ᵀ G A⁻ᵀ
                    let it = [inv_saved[0], inv_saved[2], inv_saved[1], inv_saved[3]];
                    let mut tmp = [0.0; 4];
                    mm_nn(&it, g, 2, 2, 2, &mut tmp);
                    let mut da = [0.0; 4];
                    mm_nn(&tmp, &it, 2, 2, 2, &mut da);
                    let gp = store.entry(&parents[0]);
                    for i in 0..4 {
                        gp[i] -= da[i];
                    }
                }
            }),
        ))
    }

    pub fn det2x2(&self) -> Result<Tensor> {
        if self.shape() != [2, 2] {
            return Err(PilotError::invalid("det2x2 expects shape [2,2]"));
        }
        let x = self.to_vec();
        let det = x[0] * x[3] - x[1] * x[2];
        Ok(Tensor::from_op(
            vec![1],
            vec![det],
            vec![self.clone()],
            Box::new(move |g, parents, store| {
                if parents[0].track() {
                    let gp = store.entry(&parents[0]);
                    gp[0] += g[0] * x[3];
                    gp[1] -= g[0] * x[2];
                    gp[2] -= g[0] * x[1];
                    gp[3] += g[0] * x[0];
                }
            }),
        ))
    }

    pub fn trace2x2(&self) -> Result<Tensor> {
        if self.shape() != [2, 2] {
            return Err(PilotError::invalid("trace2x2 expects shape [2,2]"));
        }
        let x = self.data();
        let tr = x[0] + x[3];
        drop(x);
        Ok(Tensor::from_op(
            vec![1],
            vec![tr],
            vec![self.clone()],
            Box::new(|g, parents, store| {
                if parents[0].track() {
                    let gp = store.entry(&parents[0]);
                    gp[0] += g[0];
                    gp[3] += g[0];
                }
            }),
        ))
    }
}

#[inline]
fn conv_col_range(w: usize, kj: usize, pw: usize) -> (usize, usize) {
    // Valid output columns ow such that 0 <= ow + kj - pw < w.
    let ow0 = pw.saturating_sub(kj);
    let ow1 = (w + pw - kj).min(w);
    (ow0, ow1)
}

fn permute_raw(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd - 1).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let total = data.len();
    let mut out = vec![0.0; total];
    let mut idx = vec![0usize; nd];
    for slot in out.iter_mut() {
        let mut src = 0;
        for (i, &a) in axes.iter().enumerate() {
            src += idx[i] * in_strides[a];
        }
        *slot = data[src];
        for i in (0..nd).rev() {
            idx[i] += 1;
            if idx[i] < out_shape[i] {
                break;
            }
            idx[i] = 0;
        }
    }
    out
}

/// Concatenate tensors along `axis`. All other extents must agree.
pub fn concat(tensors: &[Tensor], axis: usize) -> Result<Tensor> {
    if tensors.is_empty() {
        return Err(PilotError::invalid("concat of zero tensors"));
    }
    let base = tensors[0].shape().to_vec();
    if axis >= base.len() {
        return Err(PilotError::invalid("concat axis out of range"));
    }
    let mut axis_total = 0;
    for t in tensors {
        let s = t.shape();
        if s.len() != base.len()
            || s.iter().zip(base.iter()).enumerate().any(|(i, (a, b))| i != axis && a != b)
        {
            return Err(PilotError::invalid(format!(
                "concat shapes {:?} and {:?} incompatible on axis {}",
                base, s, axis
            )));
        }
        axis_total += s[axis];
    }
    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();
    let mut out_shape = base.clone();
    out_shape[axis] = axis_total;
    let mut out = Vec::with_capacity(outer * axis_total * inner);
    for o in 0..outer {
        for t in tensors {
            let alen = t.shape()[axis];
            let d = t.data();
            out.extend_from_slice(&d[o * alen * inner..(o + 1) * alen * inner]);
        }
    }
    let axis_lens: Vec<usize> = tensors.iter().map(|t| t.shape()[axis]).collect();
    Ok(Tensor::from_op(
        out_shape,
        out,
        tensors.to_vec(),
        Box::new(move |g, parents, store| {
            for o in 0..outer {
                let mut offset = o * axis_total * inner;
                for (p, &alen) in parents.iter().zip(axis_lens.iter()) {
                    let block = alen * inner;
                    if p.track() {
                        let gp = store.entry(p);
                        axpy(&mut gp[o * block..(o + 1) * block], &g[offset..offset + block]);
                    }
                    offset += block;
                }
            }
        }),
    ))
}
