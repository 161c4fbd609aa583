//! Differentiable tensor operations.
//!
//! Every op validates shapes up front and, when any input requires
//! gradients, records a VJP closure on the result node. Matrix products use
//! a k-outer/j-inner kernel over row-major buffers; both operands of every
//! product are laid out so the inner loop runs over contiguous memory.

use crate::error::{DpmError, Result};

use super::tensor::{Scalar, Tensor};

/// c[m,n] (+)= a[m,k] @ b[k,n], all row-major.
pub(crate) fn matmul_raw<F: Scalar>(
    a: &[F],
    b: &[F],
    c: &mut [F],
    m: usize,
    k: usize,
    n: usize,
    accumulate: bool,
) {
    if !accumulate {
        c.iter_mut().for_each(|v| *v = F::zero());
    }
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        let cr = &mut c[i * n..(i + 1) * n];
        for (p, &av) in ar.iter().enumerate() {
            let br = &b[p * n..(p + 1) * n];
            for j in 0..n {
                cr[j] += av * br[j];
            }
        }
    }
}

pub(crate) fn transpose_raw<F: Scalar>(a: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn shape_err(op: &'static str, details: String) -> DpmError {
    DpmError::Shape { op, details }
}

fn acc<F: Scalar>(dst: &mut [F], src: &[F]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

impl<F: Scalar> Tensor<F> {
    /// Elementwise sum. The right side may be a trailing-shape broadcast
    /// (e.g. `[n, d] + [d]`), repeated over the leading dimensions.
    pub fn add(&self, rhs: &Tensor<F>) -> Result<Tensor<F>> {
        let (ls, rs) = (self.shape().to_vec(), rhs.shape().to_vec());
        let suffix = ls.len() >= rs.len() && ls[ls.len() - rs.len()..] == rs[..];
        if !suffix {
            return Err(shape_err(
                "add",
                format!("lhs {ls:?} incompatible with rhs {rs:?}"),
            ));
        }
        let rn: usize = rs.iter().product();
        let data = {
            let a = self.data();
            let b = rhs.data();
            let mut out = a.clone();
            for (chunk, _) in out.chunks_mut(rn).zip(0..) {
                acc(chunk, &b);
            }
            out
        };
        Ok(Tensor::from_op(
            ls,
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g, _out, parents| {
                if parents[0].requires_grad() {
                    acc(&mut parents[0].grad_buf(), g);
                }
                if parents[1].requires_grad() {
                    let mut gb = parents[1].grad_buf();
                    for chunk in g.chunks(rn) {
                        acc(&mut gb, chunk);
                    }
                }
            }),
        ))
    }

    /// Multiply every element by a constant.
    pub fn scale(&self, c: F) -> Tensor<F> {
        let data: Vec<F> = self.data().iter().map(|&v| v * c).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, _out, parents| {
                if parents[0].requires_grad() {
                    let mut gb = parents[0].grad_buf();
                    for (d, &gv) in gb.iter_mut().zip(g) {
                        *d += gv * c;
                    }
                }
            }),
        )
    }

    /// Matrix product: `[m,k]@[k,n]` or batched `[b,m,k]@[b,k,n]`.
    pub fn matmul(&self, rhs: &Tensor<F>) -> Result<Tensor<F>> {
        let (ls, rs) = (self.shape().to_vec(), rhs.shape().to_vec());
        let (batch, m, k, n) = match (ls.len(), rs.len()) {
            (2, 2) if ls[1] == rs[0] => (1, ls[0], ls[1], rs[1]),
            (3, 3) if ls[0] == rs[0] && ls[2] == rs[1] => (ls[0], ls[1], ls[2], rs[2]),
            _ => {
                return Err(shape_err(
                    "matmul",
                    format!("lhs {ls:?} incompatible with rhs {rs:?}"),
                ))
            }
        };
        let mut data = vec![F::zero(); batch * m * n];
        {
            let a = self.data();
            let b = rhs.data();
            for bi in 0..batch {
                matmul_raw(
                    &a[bi * m * k..(bi + 1) * m * k],
                    &b[bi * k * n..(bi + 1) * k * n],
                    &mut data[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                    false,
                );
            }
        }
        let out_shape = if ls.len() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        Ok(Tensor::from_op(
            out_shape,
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g, _out, parents| {
                let (a, b) = (&parents[0], &parents[1]);
                if a.requires_grad() {
                    // dA = dC @ B^T
                    let bd = b.data();
                    let mut ga = a.grad_buf();
                    for bi in 0..batch {
                        let bt = transpose_raw(&bd[bi * k * n..(bi + 1) * k * n], k, n);
                        matmul_raw(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &bt,
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                            true,
                        );
                    }
                }
                if b.requires_grad() {
                    // dB = A^T @ dC
                    let ad = a.data();
                    let mut gb = b.grad_buf();
                    for bi in 0..batch {
                        let at = transpose_raw(&ad[bi * m * k..(bi + 1) * m * k], m, k);
                        matmul_raw(
                            &at,
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut gb[bi * k * n..(bi + 1) * k * n],
                            k,
                            m,
                            n,
                            true,
                        );
                    }
                }
            }),
        ))
    }

    pub fn relu(&self) -> Tensor<F> {
        let data: Vec<F> = self
            .data()
            .iter()
            .map(|&v| if v > F::zero() { v } else { F::zero() })
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, _out, parents| {
                if parents[0].requires_grad() {
                    let x = parents[0].to_vec();
                    let mut gb = parents[0].grad_buf();
                    for i in 0..x.len() {
                        if x[i] > F::zero() {
                            gb[i] += g[i];
                        }
                    }
                }
            }),
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor<F> {
        let c = F::from_f64((2.0 / std::f64::consts::PI).sqrt());
        let k = F::from_f64(0.044715);
        let half = F::from_f64(0.5);
        let data: Vec<F> = self
            .data()
            .iter()
            .map(|&x| half * x * (F::one() + (c * (x + k * x * x * x)).tanh()))
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, _out, parents| {
                if parents[0].requires_grad() {
                    let x = parents[0].to_vec();
                    let mut gb = parents[0].grad_buf();
                    let three = F::from_f64(3.0);
                    for i in 0..x.len() {
                        let xi = x[i];
                        let u = c * (xi + k * xi * xi * xi);
                        let t = u.tanh();
                        let du = c * (F::one() + three * k * xi * xi);
                        let d = half * (F::one() + t) + half * xi * (F::one() - t * t) * du;
                        gb[i] += g[i] * d;
                    }
                }
            }),
        )
    }

    pub fn tanh_act(&self) -> Tensor<F> {
        let data: Vec<F> = self.data().iter().map(|&v| v.tanh()).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, out, parents| {
                if parents[0].requires_grad() {
                    let mut gb = parents[0].grad_buf();
                    for i in 0..out.len() {
                        gb[i] += g[i] * (F::one() - out[i] * out[i]);
                    }
                }
            }),
        )
    }

    /// Layer normalization over the last dimension with affine terms.
    pub fn layer_norm(&self, gamma: &Tensor<F>, beta: &Tensor<F>, eps: F) -> Result<Tensor<F>> {
        let shape = self.shape().to_vec();
        let d = *shape.last().ok_or_else(|| {
            shape_err("layer_norm", "input must have at least one dim".into())
        })?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "affine shapes {:?}/{:?} do not match feature dim {d}",
                    gamma.shape(),
                    beta.shape()
                ),
            ));
        }
        let rows = self.numel() / d;
        let mut data = vec![F::zero(); self.numel()];
        {
            let x = self.data();
            let gm = gamma.data();
            let bt = beta.data();
            let dn = F::from_f64(d as f64);
            for r in 0..rows {
                let xr = &x[r * d..(r + 1) * d];
                let mean = xr.iter().copied().sum::<F>() / dn;
                let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / dn;
                let s = (var + eps).sqrt();
                let out = &mut data[r * d..(r + 1) * d];
                for j in 0..d {
                    out[j] = (xr[j] - mean) / s * gm[j] + bt[j];
                }
            }
        }
        Ok(Tensor::from_op(
            shape,
            data,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, _out, parents| {
                let (x, gamma, beta) = (&parents[0], &parents[1], &parents[2]);
                let xd = x.data();
                let gd = gamma.data();
                let dn = F::from_f64(d as f64);
                for r in 0..rows {
                    let xr = &xd[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let mean = xr.iter().copied().sum::<F>() / dn;
                    let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / dn;
                    let s = (var + eps).sqrt();
                    let xhat: Vec<F> = xr.iter().map(|&v| (v - mean) / s).collect();
                    if gamma.requires_grad() {
                        let mut gg = gamma.grad_buf();
                        for j in 0..d {
                            gg[j] += gr[j] * xhat[j];
                        }
                    }
                    if beta.requires_grad() {
                        let mut gb = beta.grad_buf();
                        for j in 0..d {
                            gb[j] += gr[j];
                        }
                    }
                    if x.requires_grad() {
                        let dxhat: Vec<F> = (0..d).map(|j| gr[j] * gd[j]).collect();
                        let m1 = dxhat.iter().copied().sum::<F>() / dn;
                        let m2 = dxhat
                            .iter()
                            .zip(&xhat)
                            .map(|(&a, &b)| a * b)
                            .sum::<F>()
                            / dn;
                        let mut gx = x.grad_buf();
                        let gxr = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            gxr[j] += (dxhat[j] - m1 - xhat[j] * m2) / s;
                        }
                    }
                }
            }),
        ))
    }

    /// Softmax over the last dimension, numerically stabilized.
    pub fn softmax_rows(&self) -> Tensor<F> {
        let shape = self.shape().to_vec();
        let d = *shape.last().expect("softmax input has a last dim");
        let rows = self.numel() / d;
        let mut data = vec![F::zero(); self.numel()];
        {
            let x = self.data();
            for r in 0..rows {
                let xr = &x[r * d..(r + 1) * d];
                let m = xr.iter().copied().fold(F::neg_infinity(), F::max);
                let out = &mut data[r * d..(r + 1) * d];
                let mut sum = F::zero();
                for j in 0..d {
                    out[j] = (xr[j] - m).exp();
                    sum += out[j];
                }
                for v in out.iter_mut() {
                    *v = *v / sum;
                }
            }
        }
        Tensor::from_op(
            shape,
            data,
            vec![self.clone()],
            Box::new(move |g, out, parents| {
                if parents[0].requires_grad() {
                    let mut gx = parents[0].grad_buf();
                    for r in 0..rows {
                        let p = &out[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dot = p.iter().zip(gr).map(|(&a, &b)| a * b).sum::<F>();
                        let gxr = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            gxr[j] += p[j] * (gr[j] - dot);
                        }
                    }
                }
            }),
        )
    }

    /// Row lookup: `self` is a `[v, d]` table, result is `[ids.len(), d]`.
    pub fn embedding(&self, ids: &[usize]) -> Result<Tensor<F>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(shape_err(
                "embedding",
                format!("table must be 2-d, got {shape:?}"),
            ));
        }
        let (v, d) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(DpmError::IndexRange {
                context: "embedding",
                index: bad,
                bound: v,
            });
        }
        let mut data = vec![F::zero(); ids.len() * d];
        {
            let t = self.data();
            for (row, &id) in ids.iter().enumerate() {
                data[row * d..(row + 1) * d].copy_from_slice(&t[id * d..(id + 1) * d]);
            }
        }
        let ids_owned = ids.to_vec();
        Ok(Tensor::from_op(
            vec![ids.len(), d],
            data,
            vec![self.clone()],
            Box::new(move |g, _out, parents| {
                if parents[0].requires_grad() {
                    let mut gt = parents[0].grad_buf();
                    for (row, &id) in ids_owned.iter().enumerate() {
                        acc(&mut gt[id * d..(id + 1) * d], &g[row * d..(row + 1) * d]);
                    }
                }
            }),
        ))
    }

    /// Concatenate along the first (time) axis; trailing dims must agree.
    pub fn concat_time(parts: &[Tensor<F>]) -> Result<Tensor<F>> {
        if parts.is_empty() {
            return Err(shape_err("concat_time", "no inputs".into()));
        }
        let tail = parts[0].shape()[1..].to_vec();
        let mut rows = 0usize;
        for p in parts {
            if p.shape().len() != tail.len() + 1 || p.shape()[1..] != tail[..] {
                return Err(shape_err(
                    "concat_time",
                    format!("shape {:?} does not match trailing dims {tail:?}", p.shape()),
                ));
            }
            rows += p.shape()[0];
        }
        let chunk: usize = tail.iter().product();
        let mut data = Vec::with_capacity(rows * chunk);
        for p in parts {
            data.extend_from_slice(&p.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[0] * chunk).collect();
        Ok(Tensor::from_op(
            shape,
            data,
            parts.to_vec(),
            Box::new(move |g, _out, parents| {
                let mut off = 0;
                for (p, &len) in parents.iter().zip(&sizes) {
                    if p.requires_grad() {
                        acc(&mut p.grad_buf(), &g[off..off + len]);
                    }
                    off += len;
                }
            }),
        ))
    }

    /// 2-d transpose.
    pub fn transpose2(&self) -> Result<Tensor<F>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(shape_err("transpose2", format!("need 2-d, got {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let data = transpose_raw(&self.data(), m, n);
        Ok(Tensor::from_op(
            vec![n, m],
            data,
            vec![self.clone()],
            Box::new(move |g, _out, parents| {
                if parents[0].requires_grad() {
                    let gt = transpose_raw(g, n, m);
                    acc(&mut parents[0].grad_buf(), &gt);
                }
            }),
        ))
    }

    /// Batched transpose of the last two dims: `[b, m, n] -> [b, n, m]`.
    pub fn transpose_last2(&self) -> Result<Tensor<F>> {
        let s = self.shape();
        if s.len() != 3 {
            return Err(shape_err("transpose_last2", format!("need 3-d, got {s:?}")));
        }
        let (b, m, n) = (s[0], s[1], s[2]);
        let mut data = vec![F::zero(); b * m * n];
        {
            let x = self.data();
            for bi in 0..b {
                let src = &x[bi * m * n..(bi + 1) * m * n];
                let dst = &mut data[bi * m * n..(bi + 1) * m * n];
                for i in 0..m {
                    for j in 0..n {
                        dst[j * m + i] = src[i * n + j];
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            vec![b, n, m],
            data,
            vec![self.clone()],
            Box::new(move |g, _out, parents| {
                if parents[0].requires_grad() {
                    let mut gx = parents[0].grad_buf();
                    for bi in 0..b {
                        let gsrc = &g[bi * m * n..(bi + 1) * m * n];
                        let gdst = &mut gx[bi * m * n..(bi + 1) * m * n];
                        for i in 0..m {
                            for j in 0..n {
                                gdst[i * n + j] += gsrc[j * m + i];
                            }
                        }
                    }
                }
            }),
        ))
    }

    /// `[n, d] -> [heads, n, d/heads]`.
    pub fn split_heads(&self, heads: usize) -> Result<Tensor<F>> {
        let s = self.shape();
        if s.len() != 2 || s[1] % heads != 0 {
            return Err(shape_err(
                "split_heads",
                format!("shape {s:?} not divisible into {heads} heads"),
            ));
        }
        let (n, d) = (s[0], s[1]);
        let dh = d / heads;
        let mut data = vec![F::zero(); n * d];
        {
            let x = self.data();
            for h in 0..heads {
                for i in 0..n {
                    let src = &x[i * d + h * dh..i * d + (h + 1) * dh];
                    data[(h * n + i) * dh..(h * n + i + 1) * dh].copy_from_slice(src);
                }
            }
        }
        Ok(Tensor::from_op(
            vec![heads, n, dh],
            data,
            vec![self.clone()],
            Box::new(move |g, _out, parents| {
                if parents[0].requires_grad() {
                    let mut gx = parents[0].grad_buf();
                    for h in 0..heads {
                        for i in 0..n {
                            let src = &g[(h * n + i) * dh..(h * n + i + 1) * dh];
                            acc(&mut gx[i * d + h * dh..i * d + (h + 1) * dh], src);
                        }
                    }
                }
            }),
        ))
    }

    /// `[heads, n, dh] -> [n, heads*dh]`.
    pub fn merge_heads(&self) -> Result<Tensor<F>> {
        let s = self.shape();
        if s.len() != 3 {
            return Err(shape_err("merge_heads", format!("need 3-d, got {s:?}")));
        }
        let (heads, n, dh) = (s[0], s[1], s[2]);
        let d = heads * dh;
        let mut data = vec![F::zero(); n * d];
        {
            let x = self.data();
            for h in 0..heads {
                for i in 0..n {
                    let src = &x[(h * n + i) * dh..(h * n + i + 1) * dh];
                    data[i * d + h * dh..i * d + (h + 1) * dh].copy_from_slice(src);
                }
            }
        }
        Ok(Tensor::from_op(
            vec![n, d],
            data,
            vec![self.clone()],
            Box::new(move |g, _out, parents| {
                if parents[0].requires_grad() {
                    let mut gx = parents[0].grad_buf();
                    for h in 0..heads {
                        for i in 0..n {
                            let src = &g[i * d + h * dh..i * d + (h + 1) * dh];
                            acc(&mut gx[(h * n + i) * dh..(h * n + i + 1) * dh], src);
                        }
                    }
                }
            }),
        ))
    }

    /// Copy of rows `[start, end)` of a 2-d tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor<F>> {
        let s = self.shape();
        if s.len() != 2 || start >= end || end > s[0] {
            return Err(shape_err(
                "slice_rows",
                format!("rows [{start}, {end}) invalid for shape {s:?}"),
            ));
        }
        let d = s[1];
        let data = self.data()[start * d..end * d].to_vec();
        Ok(Tensor::from_op(
            vec![end - start, d],
            data,
            vec![self.clone()],
            Box::new(move |g, _out, parents| {
                if parents[0].requires_grad() {
                    let mut gx = parents[0].grad_buf();
                    acc(&mut gx[start * d..end * d], g);
                }
            }),
        ))
    }

    /// Single row of a 2-d tensor as a 1-d tensor.
    pub fn row(&self, index: usize) -> Result<Tensor<F>> {
        let s = self.shape();
        if s.len() != 2 || index >= s[0] {
            return Err(shape_err(
                "row",
                format!("row {index} invalid for shape {s:?}"),
            ));
        }
        let d = s[1];
        let data = self.data()[index * d..(index + 1) * d].to_vec();
        Ok(Tensor::from_op(
            vec![d],
            data,
            vec![self.clone()],
            Box::new(move |g, _out, parents| {
                if parents[0].requires_grad() {
                    let mut gx = parents[0].grad_buf();
                    acc(&mut gx[index * d..(index + 1) * d], g);
                }
            }),
        ))
    }

    /// Gather entries of a 1-d tensor.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor<F>> {
        let s = self.shape();
        if s.len() != 1 {
            return Err(shape_err("gather", format!("need 1-d, got {s:?}")));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= s[0]) {
            return Err(DpmError::IndexRange {
                context: "gather",
                index: bad,
                bound: s[0],
            });
        }
        let data: Vec<F> = {
            let x = self.data();
            indices.iter().map(|&i| x[i]).collect()
        };
        let idx = indices.to_vec();
        Ok(Tensor::from_op(
            vec![indices.len()],
            data,
            vec![self.clone()],
            Box::new(move |g, _out, parents| {
                if parents[0].requires_grad() {
                    let mut gx = parents[0].grad_buf();
                    for (j, &i) in idx.iter().enumerate() {
                        gx[i] += g[j];
                    }
                }
            }),
        ))
    }

    /// `-log softmax(self)[target]` for 1-d logits.
    pub fn cross_entropy(&self, target: usize) -> Result<Tensor<F>> {
        let s = self.shape();
        if s.len() != 1 {
            return Err(shape_err("cross_entropy", format!("need 1-d, got {s:?}")));
        }
        let v = s[0];
        if target >= v {
            return Err(DpmError::IndexRange {
                context: "cross_entropy",
                index: target,
                bound: v,
            });
        }
        let loss = {
            let x = self.data();
            let m = x.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = m + x.iter().map(|&xi| (xi - m).exp()).sum::<F>().ln();
            lse - x[target]
        };
        Ok(Tensor::from_op(
            vec![1],
            vec![loss],
            vec![self.clone()],
            Box::new(move |g, _out, parents| {
                if parents[0].requires_grad() {
                    let x = parents[0].to_vec();
                    let m = x.iter().copied().fold(F::neg_infinity(), F::max);
                    let sum: F = x.iter().map(|&xi| (xi - m).exp()).sum();
                    let mut gx = parents[0].grad_buf();
                    for i in 0..v {
                        let p = (x[i] - m).exp() / sum;
                        let delta = if i == target { F::one() } else { F::zero() };
                        gx[i] += g[0] * (p - delta);
                    }
                }
            }),
        ))
    }

    /// Mean next-token cross entropy over the rows of `[n, v]` logits.
    pub fn cross_entropy_rows(&self, targets: &[usize]) -> Result<Tensor<F>> {
        let s = self.shape();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(shape_err(
                "cross_entropy_rows",
                format!("logits {s:?} vs {} targets", targets.len()),
            ));
        }
        let (n, v) = (s[0], s[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(DpmError::IndexRange {
                context: "cross_entropy_rows",
                index: bad,
                bound: v,
            });
        }
        let loss = {
            let x = self.data();
            let mut total = F::zero();
            for (r, &t) in targets.iter().enumerate() {
                let xr = &x[r * v..(r + 1) * v];
                let m = xr.iter().copied().fold(F::neg_infinity(), F::max);
                let lse = m + xr.iter().map(|&xi| (xi - m).exp()).sum::<F>().ln();
                total += lse - xr[t];
            }
            total / F::from_f64(n as f64)
        };
        let tg = targets.to_vec();
        Ok(Tensor::from_op(
            vec![1],
            vec![loss],
            vec![self.clone()],
            Box::new(move |g, _out, parents| {
                if parents[0].requires_grad() {
                    let x = parents[0].to_vec();
                    let mut gx = parents[0].grad_buf();
                    let inv_n = F::one() / F::from_f64(n as f64);
                    for (r, &t) in tg.iter().enumerate() {
                        let xr = &x[r * v..(r + 1) * v];
                        let m = xr.iter().copied().fold(F::neg_infinity(), F::max);
                        let sum: F = xr.iter().map(|&xi| (xi - m).exp()).sum();
                        let gxr = &mut gx[r * v..(r + 1) * v];
                        for i in 0..v {
                            let p = (xr[i] - m).exp() / sum;
                            let delta = if i == t { F::one() } else { F::zero() };
                            gxr[i] += g[0] * inv_n * (p - delta);
                        }
                    }
                }
            }),
        ))
    }

    /// Mean over the first `valid` rows of a 2-d tensor.
    pub fn mean_rows(&self, valid: usize) -> Result<Tensor<F>> {
        let s = self.shape();
        if s.len() != 2 || valid == 0 || valid > s[0] {
            return Err(shape_err(
                "mean_rows",
                format!("valid {valid} invalid for shape {s:?}"),
            ));
        }
        let d = s[1];
        let inv = F::one() / F::from_f64(valid as f64);
        let mut data = vec![F::zero(); d];
        {
            let x = self.data();
            for r in 0..valid {
                for j in 0..d {
                    data[j] += x[r * d + j] * inv;
                }
            }
        }
        Ok(Tensor::from_op(
            vec![d],
            data,
            vec![self.clone()],
            Box::new(move |g, _out, parents| {
                if parents[0].requires_grad() {
                    let mut gx = parents[0].grad_buf();
                    for r in 0..valid {
                        for j in 0..d {
                            gx[r * d + j] += g[j] * inv;
                        }
                    }
                }
            }),
        ))
    }

    /// Sum of all elements as a scalar.
    pub fn sum_all(&self) -> Tensor<F> {
        let total: F = self.data().iter().copied().sum();
        Tensor::from_op(
            vec![1],
            vec![total],
            vec![self.clone()],
            Box::new(move |g, _out, parents| {
                if parents[0].requires_grad() {
                    let mut gx = parents[0].grad_buf();
                    for v in gx.iter_mut() {
                        *v += g[0];
                    }
                }
            }),
        )
    }
}
