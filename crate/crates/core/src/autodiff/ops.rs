//! Forward and vector-Jacobian rules for the primitive set.

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Op {
    Leaf,
    MatMul,
    Add,
    Mul,
    Scale(f64),
    Transpose,
    Softmax,
    LayerNorm,
    Gelu,
    Relu,
    /// inputs: table `[V, d]`, indices (integer-valued, any shape)
    Embedding,
    Reshape(Vec<usize>),
    Concat(usize),
    Slice { axis: usize, start: usize, len: usize },
    /// `None` reduces everything to a scalar.
    Mean(Option<usize>),
    /// inputs: logits `[n, C]`, targets `[n]`; mean over rows.
    CrossEntropy,
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Transpose => "transpose",
            Op::Softmax => "softmax",
            Op::LayerNorm => "layer_norm",
            Op::Gelu => "gelu",
            Op::Relu => "relu",
            Op::Embedding => "embedding",
            Op::Reshape(_) => "reshape",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::Mean(_) => "mean",
            Op::CrossEntropy => "cross_entropy",
        }
    }
}

/// `c = alpha * a(m×k) · b(k×n) + beta * c` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass buffers whose extents cover the given dims and
    // strides; `c` is row-major m×n and does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

enum MatMulKind {
    /// `a` flattened to `[rows, k]`, `b` is `[k, n]`.
    Flat { rows: usize, k: usize, n: usize },
    Batched { batch: usize, m: usize, k: usize, n: usize },
}

fn matmul_kind(a: &[usize], b: &[usize]) -> Result<MatMulKind> {
    let bad = || {
        Error::shape(
            "matmul",
            "[.., m, k] x [k, n] or [B, m, k] x [B, k, n]",
            format!("{a:?} x {b:?}"),
        )
    };
    if a.len() < 2 {
        return Err(bad());
    }
    let k = a[a.len() - 1];
    match b.len() {
        2 if b[0] == k => Ok(MatMulKind::Flat {
            rows: numel(&a[..a.len() - 1]),
            k,
            n: b[1],
        }),
        3 if a.len() == 3 && a[0] == b[0] && b[1] == k => Ok(MatMulKind::Batched {
            batch: a[0],
            m: a[1],
            k,
            n: b[2],
        }),
        _ => Err(bad()),
    }
}

/// `b` must equal a suffix of `a`; returns the broadcast block size.
fn suffix_block(op: &'static str, a: &[usize], b: &[usize]) -> Result<usize> {
    if b.len() > a.len() || a[a.len() - b.len()..] != *b {
        return Err(Error::shape(
            op,
            format!("rhs a suffix of {a:?}"),
            format!("{b:?}"),
        ));
    }
    Ok(numel(b))
}

fn last_dim(op: &'static str, shape: &[usize]) -> Result<usize> {
    shape
        .last()
        .copied()
        .ok_or_else(|| Error::shape(op, "rank >= 1", "scalar"))
}

fn as_index(op: &'static str, v: f64, bound: usize) -> Result<usize> {
    if v < 0.0 || v.fract() != 0.0 || v as usize >= bound {
        return Err(Error::shape(op, format!("integer index < {bound}"), v));
    }
    Ok(v as usize)
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub(crate) fn softmax_rows(data: &mut [f64], width: usize) {
    for row in data.chunks_mut(width) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

pub(crate) fn forward(op: &Op, xs: &[&Tensor]) -> Result<Tensor> {
    let out = match op {
        Op::Leaf => unreachable!("leaves are not evaluated"),
        Op::MatMul => {
            let (a, b) = (xs[0], xs[1]);
            match matmul_kind(a.shape(), b.shape())? {
                MatMulKind::Flat { rows, k, n } => {
                    let mut c = vec![0.0; rows * n];
                    gemm(rows, k, n, a.data(), k, 1, b.data(), n, 1, 0.0, &mut c);
                    let mut shape = a.shape()[..a.shape().len() - 1].to_vec();
                    shape.push(n);
                    Tensor::from_parts(shape, c)
                }
                MatMulKind::Batched { batch, m, k, n } => {
                    let mut c = vec![0.0; batch * m * n];
                    for i in 0..batch {
                        gemm(
                            m,
                            k,
                            n,
                            &a.data()[i * m * k..],
                            k,
                            1,
                            &b.data()[i * k * n..],
                            n,
                            1,
                            0.0,
                            &mut c[i * m * n..],
                        );
                    }
                    Tensor::from_parts(vec![batch, m, n], c)
                }
            }
        }
        Op::Add | Op::Mul => {
            let (a, b) = (xs[0], xs[1]);
            let name = op.name();
            let block = suffix_block(name, a.shape(), b.shape())?;
            let bd = b.data();
            let mut out = a.data().to_vec();
            for chunk in out.chunks_mut(block) {
                if matches!(op, Op::Add) {
                    chunk.iter_mut().zip(bd).for_each(|(o, y)| *o += y);
                } else {
                    chunk.iter_mut().zip(bd).for_each(|(o, y)| *o *= y);
                }
            }
            Tensor::from_parts(a.shape().to_vec(), out)
        }
        Op::Scale(c) => Tensor::from_parts(
            xs[0].shape().to_vec(),
            xs[0].data().iter().map(|x| c * x).collect(),
        ),
        Op::Transpose => {
            let a = xs[0];
            let s = a.shape();
            if s.len() < 2 {
                return Err(Error::shape("transpose", "rank >= 2", format!("{s:?}")));
            }
            let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
            let mut out = vec![0.0; a.len()];
            for (src, dst) in a.data().chunks(r * c).zip(out.chunks_mut(r * c)) {
                for i in 0..r {
                    for j in 0..c {
                        dst[j * r + i] = src[i * c + j];
                    }
                }
            }
            let mut shape = s.to_vec();
            let n = shape.len();
            shape.swap(n - 2, n - 1);
            Tensor::from_parts(shape, out)
        }
        Op::Softmax => {
            let w = last_dim("softmax", xs[0].shape())?;
            let mut out = xs[0].data().to_vec();
            softmax_rows(&mut out, w);
            Tensor::from_parts(xs[0].shape().to_vec(), out)
        }
        Op::LayerNorm => {
            let w = last_dim("layer_norm", xs[0].shape())?;
            let mut out = xs[0].data().to_vec();
            for row in out.chunks_mut(w) {
                let mean = row.iter().sum::<f64>() / w as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
                let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                row.iter_mut().for_each(|v| *v = (*v - mean) * rstd);
            }
            Tensor::from_parts(xs[0].shape().to_vec(), out)
        }
        Op::Gelu => Tensor::from_parts(
            xs[0].shape().to_vec(),
            xs[0].data().iter().map(|&x| gelu(x)).collect(),
        ),
        Op::Relu => Tensor::from_parts(
            xs[0].shape().to_vec(),
            xs[0].data().iter().map(|&x| x.max(0.0)).collect(),
        ),
        Op::Embedding => {
            let (table, idx) = (xs[0], xs[1]);
            if table.shape().len() != 2 {
                return Err(Error::shape("embedding", "table [V, d]", format!("{:?}", table.shape())));
            }
            let (v, d) = (table.shape()[0], table.shape()[1]);
            let mut out = Vec::with_capacity(idx.len() * d);
            for &i in idx.data() {
                let i = as_index("embedding", i, v)?;
                out.extend_from_slice(&table.data()[i * d..(i + 1) * d]);
            }
            let mut shape = idx.shape().to_vec();
            shape.push(d);
            Tensor::from_parts(shape, out)
        }
        Op::Reshape(shape) => {
            if numel(shape) != xs[0].len() || shape.iter().any(|&d| d == 0) {
                return Err(Error::shape(
                    "reshape",
                    format!("{} elements", xs[0].len()),
                    format!("{shape:?}"),
                ));
            }
            Tensor::from_parts(shape.clone(), xs[0].data().to_vec())
        }
        Op::Concat(axis) => {
            let axis = *axis;
            let first = xs[0].shape();
            if axis >= first.len() {
                return Err(Error::shape("concat", format!("axis < {}", first.len()), axis));
            }
            let mut total = 0;
            for x in xs {
                let s = x.shape();
                let compatible = s.len() == first.len()
                    && s.iter()
                        .zip(first)
                        .enumerate()
                        .all(|(i, (a, b))| i == axis || a == b);
                if !compatible {
                    return Err(Error::shape(
                        "concat",
                        format!("{first:?} except axis {axis}"),
                        format!("{s:?}"),
                    ));
                }
                total += s[axis];
            }
            let (outer, _, inner) = axis_split(first, axis);
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for x in xs {
                    let w = x.shape()[axis] * inner;
                    out.extend_from_slice(&x.data()[o * w..(o + 1) * w]);
                }
            }
            let mut shape = first.to_vec();
            shape[axis] = total;
            Tensor::from_parts(shape, out)
        }
        Op::Slice { axis, start, len } => {
            let s = xs[0].shape();
            if *axis >= s.len() || *len == 0 || start + len > s[*axis] {
                return Err(Error::shape(
                    "slice",
                    format!("range within {s:?} on axis {axis}"),
                    format!("{start}..{}", start + len),
                ));
            }
            let (outer, mid, inner) = axis_split(s, *axis);
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = o * mid * inner;
                out.extend_from_slice(&xs[0].data()[base + start * inner..base + (start + len) * inner]);
            }
            let mut shape = s.to_vec();
            shape[*axis] = *len;
            Tensor::from_parts(shape, out)
        }
        Op::Mean(None) => {
            let x = xs[0];
            Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64)
        }
        Op::Mean(Some(axis)) => {
            let s = xs[0].shape();
            if *axis >= s.len() {
                return Err(Error::shape("mean", format!("axis < {}", s.len()), axis));
            }
            let (outer, mid, inner) = axis_split(s, *axis);
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for m in 0..mid {
                    let src = &xs[0].data()[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                    out[o * inner..(o + 1) * inner]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(a, b)| *a += b);
                }
            }
            out.iter_mut().for_each(|v| *v /= mid as f64);
            let mut shape = s.to_vec();
            shape.remove(*axis);
            Tensor::from_parts(shape, out)
        }
        Op::CrossEntropy => {
            let (logits, targets) = (xs[0], xs[1]);
            let s = logits.shape();
            if s.len() != 2 || targets.shape() != [s[0]] {
                return Err(Error::shape(
                    "cross_entropy",
                    "logits [n, C] with targets [n]",
                    format!("{s:?} / {:?}", targets.shape()),
                ));
            }
            let c = s[1];
            let mut total = 0.0;
            for (row, &t) in logits.data().chunks(c).zip(targets.data()) {
                let t = as_index("cross_entropy", t, c)?;
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                total += lse - row[t];
            }
            Tensor::scalar(total / s[0] as f64)
        }
    };
    Ok(out)
}

/// Gradients with respect to each input given the output cotangent `g`.
/// Entries for inputs that do not need a gradient are `None`.
pub(crate) fn backward(
    op: &Op,
    xs: &[&Tensor],
    out: &Tensor,
    g: &[f64],
    needs: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; xs.len()];
    match op {
        Op::Leaf => {}
        Op::MatMul => {
            let (a, b) = (xs[0], xs[1]);
            let kind = matmul_kind(a.shape(), b.shape()).expect("validated in forward");
            match kind {
                MatMulKind::Flat { rows, k, n } => {
                    if needs[0] {
                        // dA = G · Bᵀ
                        let mut da = vec![0.0; rows * k];
                        gemm(rows, n, k, g, n, 1, b.data(), 1, n, 0.0, &mut da);
                        grads[0] = Some(da);
                    }
                    if needs[1] {
                        // dB = Aᵀ · G
                        let mut db = vec![0.0; k * n];
                        gemm(k, rows, n, a.data(), 1, k, g, n, 1, 0.0, &mut db);
                        grads[1] = Some(db);
                    }
                }
                MatMulKind::Batched { batch, m, k, n } => {
                    if needs[0] {
                        let mut da = vec![0.0; batch * m * k];
                        for i in 0..batch {
                            gemm(
                                m,
                                n,
                                k,
                                &g[i * m * n..],
                                n,
                                1,
                                &b.data()[i * k * n..],
                                1,
                                n,
                                0.0,
                                &mut da[i * m * k..],
                            );
                        }
                        grads[0] = Some(da);
                    }
                    if needs[1] {
                        let mut db = vec![0.0; batch * k * n];
                        for i in 0..batch {
                            gemm(
                                k,
                                m,
                                n,
                                &a.data()[i * m * k..],
                                1,
                                k,
                                &g[i * m * n..],
                                n,
                                1,
                                0.0,
                                &mut db[i * k * n..],
                            );
                        }
                        grads[1] = Some(db);
                    }
                }
            }
        }
        Op::Add => {
            if needs[0] {
                grads[0] = Some(g.to_vec());
            }
            if needs[1] {
                let block = xs[1].len();
                let mut db = vec![0.0; block];
                for chunk in g.chunks(block) {
                    db.iter_mut().zip(chunk).for_each(|(d, v)| *d += v);
                }
                grads[1] = Some(db);
            }
        }
        Op::Mul => {
            let (a, b) = (xs[0], xs[1]);
            let block = b.len();
            if needs[0] {
                let mut da = g.to_vec();
                for chunk in da.chunks_mut(block) {
                    chunk.iter_mut().zip(b.data()).for_each(|(d, y)| *d *= y);
                }
                grads[0] = Some(da);
            }
            if needs[1] {
                let mut db = vec![0.0; block];
                for (gc, ac) in g.chunks(block).zip(a.data().chunks(block)) {
                    for ((d, gv), av) in db.iter_mut().zip(gc).zip(ac) {
                        *d += gv * av;
                    }
                }
                grads[1] = Some(db);
            }
        }
        Op::Scale(c) => grads[0] = Some(g.iter().map(|v| c * v).collect()),
        Op::Transpose => {
            // transpose of the cotangent, using the output's layout
            let s = out.shape();
            let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
            let mut d = vec![0.0; g.len()];
            for (src, dst) in g.chunks(r * c).zip(d.chunks_mut(r * c)) {
                for i in 0..r {
                    for j in 0..c {
                        dst[j * r + i] = src[i * c + j];
                    }
                }
            }
            grads[0] = Some(d);
        }
        Op::Softmax => {
            let w = *out.shape().last().unwrap();
            let mut d = vec![0.0; g.len()];
            for ((dr, yr), gr) in d.chunks_mut(w).zip(out.data().chunks(w)).zip(g.chunks(w)) {
                let dot: f64 = yr.iter().zip(gr).map(|(y, gv)| y * gv).sum();
                for ((dv, y), gv) in dr.iter_mut().zip(yr).zip(gr) {
                    *dv = y * (gv - dot);
                }
            }
            grads[0] = Some(d);
        }
        Op::LayerNorm => {
            let x = xs[0];
            let w = *x.shape().last().unwrap();
            let wf = w as f64;
            let mut d = vec![0.0; g.len()];
            for ((dr, xr), (yr, gr)) in d
                .chunks_mut(w)
                .zip(x.data().chunks(w))
                .zip(out.data().chunks(w).zip(g.chunks(w)))
            {
                let mean = xr.iter().sum::<f64>() / wf;
                let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / wf;
                let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                let g_mean = gr.iter().sum::<f64>() / wf;
                let gy_mean = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / wf;
                for ((dv, gv), y) in dr.iter_mut().zip(gr).zip(yr) {
                    *dv = rstd * (gv - g_mean - y * gy_mean);
                }
            }
            grads[0] = Some(d);
        }
        Op::Gelu => {
            grads[0] = Some(
                g.iter()
                    .zip(xs[0].data())
                    .map(|(gv, &x)| gv * gelu_grad(x))
                    .collect(),
            )
        }
        Op::Relu => {
            grads[0] = Some(
                g.iter()
                    .zip(xs[0].data())
                    .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                    .collect(),
            )
        }
        Op::Embedding => {
            if needs[0] {
                let table = xs[0];
                let d = table.shape()[1];
                let mut dt = vec![0.0; table.len()];
                for (&i, gr) in xs[1].data().iter().zip(g.chunks(d)) {
                    let i = i as usize;
                    dt[i * d..(i + 1) * d]
                        .iter_mut()
                        .zip(gr)
                        .for_each(|(a, b)| *a += b);
                }
                grads[0] = Some(dt);
            }
        }
        Op::Reshape(_) => grads[0] = Some(g.to_vec()),
        Op::Concat(axis) => {
            let first = xs[0].shape();
            let (outer, _, inner) = axis_split(first, *axis);
            let total: usize = xs.iter().map(|x| x.shape()[*axis]).sum::<usize>() * inner;
            let mut offset = 0;
            for (i, x) in xs.iter().enumerate() {
                let w = x.shape()[*axis] * inner;
                if needs[i] {
                    let mut d = Vec::with_capacity(x.len());
                    for o in 0..outer {
                        d.extend_from_slice(&g[o * total + offset..o * total + offset + w]);
                    }
                    grads[i] = Some(d);
                }
                offset += w;
            }
        }
        Op::Slice { axis, start, len } => {
            let s = xs[0].shape();
            let (outer, mid, inner) = axis_split(s, *axis);
            let mut d = vec![0.0; xs[0].len()];
            for o in 0..outer {
                let base = o * mid * inner + start * inner;
                d[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            grads[0] = Some(d);
        }
        Op::Mean(None) => {
            let n = xs[0].len();
            grads[0] = Some(vec![g[0] / n as f64; n]);
        }
        Op::Mean(Some(axis)) => {
            let s = xs[0].shape();
            let (outer, mid, inner) = axis_split(s, *axis);
            let mut d = vec![0.0; xs[0].len()];
            for o in 0..outer {
                let gr = &g[o * inner..(o + 1) * inner];
                for m in 0..mid {
                    d[(o * mid + m) * inner..(o * mid + m + 1) * inner]
                        .iter_mut()
                        .zip(gr)
                        .for_each(|(a, b)| *a = b / mid as f64);
                }
            }
            grads[0] = Some(d);
        }
        Op::CrossEntropy => {
            if needs[0] {
                let logits = xs[0];
                let (n, c) = (logits.shape()[0], logits.shape()[1]);
                let mut d = logits.data().to_vec();
                softmax_rows(&mut d, c);
                for (row, &t) in d.chunks_mut(c).zip(xs[1].data()) {
                    row[t as usize] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= g[0] / n as f64);
                }
                grads[0] = Some(d);
            }
        }
    }
    grads
}
