use super::{Op, Result, Tensor, TensorError, Unary, LAYER_NORM_EPS};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn mismatch(node: usize, op: &Op, detail: String) -> TensorError {
    TensorError::ShapeMismatch {
        node,
        op: op.kind(),
        detail,
    }
}

fn raw(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    debug_assert_eq!(shape.iter().product::<usize>(), data.len());
    Tensor {
        shape,
        data,
        requires_grad: false,
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// `outer x axis_len x inner` decomposition around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn last_axis(t: &Tensor) -> (usize, usize) {
    let k = t.shape.last().copied().unwrap_or(1);
    let rows = if k == 0 { 0 } else { t.data.len() / k };
    (rows, k)
}

/// C = A B for row-major `a: [n,k]`, `b: [k,m]`, accumulated into `c`.
fn gemm(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let crow = &mut c[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
}

/// C += A Bᵀ for `a: [n,k]`, `b: [m,k]`.
fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            c[i * m + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// C += Aᵀ B for `a: [k,n]`, `b: [k,m]`.
fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    for p in 0..k {
        let brow = &b[p * m..(p + 1) * m];
        for i in 0..n {
            let api = a[p * n + i];
            if api == 0.0 {
                continue;
            }
            let crow = &mut c[i * m..(i + 1) * m];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += api * bj;
            }
        }
    }
}

struct MatmulDims {
    batch: usize,
    n: usize,
    k: usize,
    m: usize,
}

fn matmul_dims(a: &Tensor, b: &Tensor) -> std::result::Result<MatmulDims, String> {
    match (a.shape.as_slice(), b.shape.as_slice()) {
        (&[n, k], &[k2, m]) if k == k2 => Ok(MatmulDims { batch: 1, n, k, m }),
        (&[ba, n, k], &[bb, k2, m]) if ba == bb && k == k2 => Ok(MatmulDims { batch: ba, n, k, m }),
        (sa, sb) => Err(format!("cannot multiply {sa:?} by {sb:?}")),
    }
}

fn permute_data(t: &Tensor, axes: &[usize]) -> Tensor {
    let rank = t.shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| t.shape[a]).collect();
    let in_strides = strides(&t.shape);
    let mut out = vec![0.0; t.data.len()];
    let mut idx = vec![0usize; rank];
    for slot in out.iter_mut() {
        let src: usize = (0..rank).map(|d| idx[d] * in_strides[axes[d]]).sum();
        *slot = t.data[src];
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    raw(out_shape, out)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

pub(super) fn forward(op: &Op, ins: &[&Tensor], node: usize) -> Result<Tensor> {
    match op {
        Op::Leaf { .. } => unreachable!("leaves are not recomputed"),
        Op::Add(..) | Op::Sub(..) | Op::Mul(..) => {
            let (a, b) = (ins[0], ins[1]);
            if a.shape != b.shape {
                return Err(mismatch(node, op, format!("{:?} vs {:?}", a.shape, b.shape)));
            }
            let f: fn(f64, f64) -> f64 = match op {
                Op::Add(..) => |x, y| x + y,
                Op::Sub(..) => |x, y| x - y,
                _ => |x, y| x * y,
            };
            let data = a.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect();
            Ok(raw(a.shape.clone(), data))
        }
        Op::Scale(_, c) => Ok(raw(
            ins[0].shape.clone(),
            ins[0].data.iter().map(|x| c * x).collect(),
        )),
        Op::MatMul(..) => {
            let (a, b) = (ins[0], ins[1]);
            let d = matmul_dims(a, b).map_err(|e| mismatch(node, op, e))?;
            let mut out = vec![0.0; d.batch * d.n * d.m];
            for bi in 0..d.batch {
                gemm(
                    &a.data[bi * d.n * d.k..(bi + 1) * d.n * d.k],
                    &b.data[bi * d.k * d.m..(bi + 1) * d.k * d.m],
                    &mut out[bi * d.n * d.m..(bi + 1) * d.n * d.m],
                    d.n,
                    d.k,
                    d.m,
                );
            }
            let shape = if a.shape.len() == 2 {
                vec![d.n, d.m]
            } else {
                vec![d.batch, d.n, d.m]
            };
            Ok(raw(shape, out))
        }
        Op::Permute(_, axes) => {
            let t = ins[0];
            let mut seen = vec![false; t.shape.len()];
            let valid = axes.len() == t.shape.len()
                && axes.iter().all(|&a| a < seen.len() && !std::mem::replace(&mut seen[a], true));
            if !valid {
                return Err(mismatch(
                    node,
                    op,
                    format!("axes {axes:?} are not a permutation for rank {}", t.shape.len()),
                ));
            }
            Ok(permute_data(t, axes))
        }
        Op::Reshape(_, shape) => {
            let t = ins[0];
            if shape.iter().product::<usize>() != t.data.len() {
                return Err(mismatch(node, op, format!("{:?} -> {shape:?}", t.shape)));
            }
            Ok(raw(shape.clone(), t.data.clone()))
        }
        Op::Slice {
            axis, start, end, ..
        } => {
            let t = ins[0];
            if *axis >= t.shape.len() || start > end || *end > t.shape[*axis] {
                return Err(mismatch(
                    node,
                    op,
                    format!("range {start}..{end} on axis {axis} of {:?}", t.shape),
                ));
            }
            let (outer, len, inner) = split_axis(&t.shape, *axis);
            let w = end - start;
            let mut data = Vec::with_capacity(outer * w * inner);
            for o in 0..outer {
                let base = o * len * inner;
                data.extend_from_slice(&t.data[base + start * inner..base + end * inner]);
            }
            let mut shape = t.shape.clone();
            shape[*axis] = w;
            Ok(raw(shape, data))
        }
        Op::Concat(_, axis) => {
            let first = ins
                .first()
                .ok_or_else(|| mismatch(node, op, "no inputs".to_string()))?;
            let rank = first.shape.len();
            if *axis >= rank {
                return Err(mismatch(node, op, format!("axis {axis} for rank {rank}")));
            }
            for t in ins {
                let compatible = t.shape.len() == rank
                    && (0..rank).all(|d| d == *axis || t.shape[d] == first.shape[d]);
                if !compatible {
                    return Err(mismatch(node, op, format!("{:?} vs {:?}", first.shape, t.shape)));
                }
            }
            let (outer, _, inner) = split_axis(&first.shape, *axis);
            let total: usize = ins.iter().map(|t| t.shape[*axis]).sum();
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for t in ins {
                    let chunk = t.shape[*axis] * inner;
                    data.extend_from_slice(&t.data[o * chunk..(o + 1) * chunk]);
                }
            }
            let mut shape = first.shape.clone();
            shape[*axis] = total;
            Ok(raw(shape, data))
        }
        Op::Tile(_, n) => {
            let t = ins[0];
            let mut shape = vec![*n];
            shape.extend_from_slice(&t.shape);
            let mut data = Vec::with_capacity(n * t.data.len());
            for _ in 0..*n {
                data.extend_from_slice(&t.data);
            }
            Ok(raw(shape, data))
        }
        Op::ExpandLast(_, k) => {
            let t = ins[0];
            let mut shape = t.shape.clone();
            shape.push(*k);
            let data = t
                .data
                .iter()
                .flat_map(|&x| std::iter::repeat_n(x, *k))
                .collect();
            Ok(raw(shape, data))
        }
        Op::Sum(_) => Ok(raw(vec![], vec![ins[0].data.iter().sum()])),
        Op::SumLast(_) => {
            let t = ins[0];
            if t.shape.is_empty() {
                return Err(mismatch(node, op, "scalar has no last axis".to_string()));
            }
            let (rows, k) = last_axis(t);
            let data = (0..rows).map(|r| t.data[r * k..(r + 1) * k].iter().sum()).collect();
            Ok(raw(t.shape[..t.shape.len() - 1].to_vec(), data))
        }
        Op::FrobSq(_) => Ok(raw(vec![], vec![ins[0].data.iter().map(|x| x * x).sum()])),
        Op::Softmax(_) => {
            let t = ins[0];
            if t.shape.is_empty() {
                return Err(mismatch(node, op, "scalar has no last axis".to_string()));
            }
            let (rows, k) = last_axis(t);
            let mut data = vec![0.0; t.data.len()];
            for r in 0..rows {
                let row = &t.data[r * k..(r + 1) * k];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let out = &mut data[r * k..(r + 1) * k];
                let mut total = 0.0;
                for (o, x) in out.iter_mut().zip(row) {
                    *o = (x - max).exp();
                    total += *o;
                }
                out.iter_mut().for_each(|o| *o /= total);
            }
            Ok(raw(t.shape.clone(), data))
        }
        Op::LayerNorm(_) => {
            let t = ins[0];
            if t.shape.is_empty() {
                return Err(mismatch(node, op, "scalar has no last axis".to_string()));
            }
            let (rows, k) = last_axis(t);
            let mut data = vec![0.0; t.data.len()];
            for r in 0..rows {
                let row = &t.data[r * k..(r + 1) * k];
                let mean = row.iter().sum::<f64>() / k as f64;
                let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / k as f64;
                let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                for (o, x) in data[r * k..(r + 1) * k].iter_mut().zip(row) {
                    *o = (x - mean) * inv;
                }
            }
            Ok(raw(t.shape.clone(), data))
        }
        Op::Unary(_, kind) => {
            let t = ins[0];
            let f: fn(f64) -> f64 = match kind {
                Unary::Gelu => gelu,
                Unary::Sqrt => |x| x.max(0.0).sqrt(),
                Unary::Rsqrt => |x| 1.0 / x.sqrt(),
            };
            Ok(raw(t.shape.clone(), t.data.iter().map(|&x| f(x)).collect()))
        }
    }
}

/// Vector-Jacobian products, one per input, in input order.
pub(super) fn backward(op: &Op, ins: &[&Tensor], out: &Tensor, g: &Tensor) -> Vec<Tensor> {
    match op {
        Op::Leaf { .. } => Vec::new(),
        Op::Add(..) => vec![g.clone(), g.clone()],
        Op::Sub(..) => vec![
            g.clone(),
            raw(g.shape.clone(), g.data.iter().map(|x| -x).collect()),
        ],
        Op::Mul(..) => {
            let (a, b) = (ins[0], ins[1]);
            let ga = g.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
            let gb = g.data.iter().zip(&a.data).map(|(x, y)| x * y).collect();
            vec![raw(a.shape.clone(), ga), raw(b.shape.clone(), gb)]
        }
        Op::Scale(_, c) => vec![raw(g.shape.clone(), g.data.iter().map(|x| c * x).collect())],
        Op::MatMul(..) => {
            let (a, b) = (ins[0], ins[1]);
            let d = matmul_dims(a, b).expect("validated in forward");
            let mut ga = vec![0.0; a.data.len()];
            let mut gb = vec![0.0; b.data.len()];
            for bi in 0..d.batch {
                let gs = &g.data[bi * d.n * d.m..(bi + 1) * d.n * d.m];
                let asl = &a.data[bi * d.n * d.k..(bi + 1) * d.n * d.k];
                let bsl = &b.data[bi * d.k * d.m..(bi + 1) * d.k * d.m];
                gemm_nt(gs, bsl, &mut ga[bi * d.n * d.k..(bi + 1) * d.n * d.k], d.n, d.m, d.k);
                gemm_tn(asl, gs, &mut gb[bi * d.k * d.m..(bi + 1) * d.k * d.m], d.k, d.n, d.m);
            }
            vec![raw(a.shape.clone(), ga), raw(b.shape.clone(), gb)]
        }
        Op::Permute(_, axes) => {
            let mut inverse = vec![0; axes.len()];
            for (i, &a) in axes.iter().enumerate() {
                inverse[a] = i;
            }
            vec![permute_data(g, &inverse)]
        }
        Op::Reshape(..) => vec![raw(ins[0].shape.clone(), g.data.clone())],
        Op::Slice {
            axis, start, end, ..
        } => {
            let t = ins[0];
            let (outer, len, inner) = split_axis(&t.shape, *axis);
            let w = end - start;
            let mut data = vec![0.0; t.data.len()];
            for o in 0..outer {
                let dst = o * len * inner + start * inner;
                data[dst..dst + w * inner].copy_from_slice(&g.data[o * w * inner..(o + 1) * w * inner]);
            }
            vec![raw(t.shape.clone(), data)]
        }
        Op::Concat(_, axis) => {
            let (outer, total, inner) = split_axis(&out.shape, *axis);
            let mut offset = 0;
            ins.iter()
                .map(|t| {
                    let w = t.shape[*axis];
                    let mut data = Vec::with_capacity(t.data.len());
                    for o in 0..outer {
                        let src = o * total * inner + offset * inner;
                        data.extend_from_slice(&g.data[src..src + w * inner]);
                    }
                    offset += w;
                    raw(t.shape.clone(), data)
                })
                .collect()
        }
        Op::Tile(_, n) => {
            let t = ins[0];
            let len = t.data.len();
            let mut data = vec![0.0; len];
            for r in 0..*n {
                for (d, x) in data.iter_mut().zip(&g.data[r * len..(r + 1) * len]) {
                    *d += x;
                }
            }
            vec![raw(t.shape.clone(), data)]
        }
        Op::ExpandLast(_, k) => {
            let t = ins[0];
            let data = if *k == 0 {
                vec![0.0; t.data.len()]
            } else {
                g.data.chunks(*k).map(|c| c.iter().sum()).collect()
            };
            vec![raw(t.shape.clone(), data)]
        }
        Op::Sum(_) => vec![Tensor::full(ins[0].shape.clone(), g.data[0])],
        Op::SumLast(_) => {
            let t = ins[0];
            let (_, k) = last_axis(t);
            let data = g.data.iter().flat_map(|&x| std::iter::repeat_n(x, k)).collect();
            vec![raw(t.shape.clone(), data)]
        }
        Op::FrobSq(_) => {
            let s = 2.0 * g.data[0];
            vec![raw(
                ins[0].shape.clone(),
                ins[0].data.iter().map(|x| s * x).collect(),
            )]
        }
        Op::Softmax(_) => {
            let (rows, k) = last_axis(out);
            let mut data = vec![0.0; out.data.len()];
            for r in 0..rows {
                let y = &out.data[r * k..(r + 1) * k];
                let gy = &g.data[r * k..(r + 1) * k];
                let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                for ((d, yi), gi) in data[r * k..(r + 1) * k].iter_mut().zip(y).zip(gy) {
                    *d = yi * (gi - dot);
                }
            }
            vec![raw(out.shape.clone(), data)]
        }
        Op::LayerNorm(_) => {
            let t = ins[0];
            let (rows, k) = last_axis(t);
            let kf = k as f64;
            let mut data = vec![0.0; t.data.len()];
            for r in 0..rows {
                let x = &t.data[r * k..(r + 1) * k];
                let mean = x.iter().sum::<f64>() / kf;
                let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / kf;
                let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                let xhat = &out.data[r * k..(r + 1) * k];
                let gy = &g.data[r * k..(r + 1) * k];
                let g_mean = gy.iter().sum::<f64>() / kf;
                let gx_mean = gy.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / kf;
                for ((d, gi), xi) in data[r * k..(r + 1) * k].iter_mut().zip(gy).zip(xhat) {
                    *d = inv * (gi - g_mean - xi * gx_mean);
                }
            }
            vec![raw(t.shape.clone(), data)]
        }
        Op::Unary(_, kind) => {
            let t = ins[0];
            let data = match kind {
                Unary::Gelu => t
                    .data
                    .iter()
                    .zip(&g.data)
                    .map(|(&x, gi)| gi * gelu_grad(x))
                    .collect(),
                Unary::Sqrt => out
                    .data
                    .iter()
                    .zip(&g.data)
                    .map(|(&y, gi)| if y > 0.0 { gi * 0.5 / y } else { 0.0 })
                    .collect(),
                Unary::Rsqrt => out
                    .data
                    .iter()
                    .zip(&g.data)
                    .map(|(&y, gi)| gi * -0.5 * y * y * y)
                    .collect(),
            };
            vec![raw(t.shape.clone(), data)]
        }
    }
}
