use super::tape::Node;
use super::{split_axis, Tensor, Var};
use crate::error::{OclipError, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
const NORM_FLOOR: f64 = 1e-12;

pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    DivScalar(usize, usize),
    Relu(usize),
    Gelu(usize),
    Reshape(usize),
    Transpose(usize),
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Narrow {
        src: usize,
        axis: usize,
        start: usize,
    },
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
    Matmul(usize, usize),
    Softmax {
        src: usize,
        axis: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Mean {
        src: usize,
        axis: usize,
    },
    Sum(usize),
    L2Normalize {
        src: usize,
        axis: usize,
        norms: Vec<f64>,
    },
}

impl Op {
    pub fn parents(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) | DivScalar(a, b) | Matmul(a, b) => {
                vec![*a, *b]
            }
            Scale(a, _) | Relu(a) | Gelu(a) | Reshape(a) | Transpose(a) | Sum(a) => vec![*a],
            Concat { parts, .. } => parts.clone(),
            Narrow { src, .. } | Softmax { src, .. } | Mean { src, .. } => vec![*src],
            L2Normalize { src, .. } => vec![*src],
            Gather { table, .. } => vec![*table],
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    pub fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Leaf => "leaf",
            Add(..) => "add",
            Sub(..) => "sub",
            Mul(..) => "mul",
            AddRow(..) => "add_row",
            Scale(..) => "scale",
            DivScalar(..) => "div_scalar",
            Relu(..) => "relu",
            Gelu(..) => "gelu",
            Reshape(..) => "reshape",
            Transpose(..) => "transpose",
            Concat { .. } => "concat",
            Narrow { .. } => "narrow",
            Gather { .. } => "embedding_gather",
            Matmul(..) => "matmul",
            Softmax { .. } => "softmax",
            LayerNorm { .. } => "layer_norm",
            CrossEntropy { .. } => "cross_entropy",
            Mean { .. } => "mean",
            Sum(..) => "sum",
            L2Normalize { .. } => "l2_normalize",
        }
    }
}

// ---------------------------------------------------------------------------
// Kernels shared by forward and backward passes.

/// `a[m,k] · b[k,n]`. Zero entries of `a` are skipped, so a row of the output
/// depends only on the matching row of `a` and on `b`.
pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
    out
}

/// `a[m,k] · b[n,k]ᵀ`.
fn matmul_bt_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * n + j] = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a[m,k]ᵀ · b[m,n]`.
fn matmul_at_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for (kk, &aik) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let out_row = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
    out
}

fn transpose_kernel(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn softmax_kernel(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * len + a) * inner + i;
            let max = (0..len).map(|a| x[at(a)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for a in 0..len {
                let e = (x[at(a)] - max).exp();
                out[at(a)] = e;
                sum += e;
            }
            for a in 0..len {
                out[at(a)] /= sum;
            }
        }
    }
    out
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape.to_vec();
    s.remove(axis);
    if s.is_empty() {
        s.push(1);
    }
    s
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(OclipError::Index {
            op,
            index: axis,
            bound: shape.len(),
        });
    }
    Ok(())
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(OclipError::Dimension {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn same_tape(a: &Var, b: &Var) -> Result<()> {
    if !a.tape().same_as(b.tape()) {
        return Err(OclipError::Contract("operands on different tapes".into()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Recording API.

impl Var {
    fn record(&self, value: Tensor, op: Op, extra: &[&Var]) -> Var {
        let rg = self.requires_grad() || extra.iter().any(|v| v.requires_grad());
        self.tape().push(value, op, rg)
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        same_tape(self, other)?;
        let (a, b) = (self.value(), other.value());
        same_shape("add", &a, &b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.record(out, Op::Add(self.id(), other.id()), &[other]))
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        same_tape(self, other)?;
        let (a, b) = (self.value(), other.value());
        same_shape("sub", &a, &b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.record(out, Op::Sub(self.id(), other.id()), &[other]))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var) -> Result<Var> {
        same_tape(self, other)?;
        let (a, b) = (self.value(), other.value());
        same_shape("mul", &a, &b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.record(out, Op::Mul(self.id(), other.id()), &[other]))
    }

    /// Adds a `[d]` bias to every trailing-axis slice of `self`.
    pub fn add_row(&self, bias: &Var) -> Result<Var> {
        same_tape(self, bias)?;
        let (a, b) = (self.value(), bias.value());
        let d = *a.shape().last().unwrap_or(&0);
        if b.numel() != d {
            return Err(OclipError::Dimension {
                op: "add_row",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data = a
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(b.data()).map(|(x, y)| x + y))
            .collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.record(out, Op::AddRow(self.id(), bias.id()), &[bias]))
    }

    pub fn scale(&self, c: f64) -> Var {
        let a = self.value();
        let out = Tensor {
            shape: a.shape().to_vec(),
            data: a.data().iter().map(|x| x * c).collect(),
        };
        self.record(out, Op::Scale(self.id(), c), &[])
    }

    /// Divides every entry by the one-element `divisor`.
    pub fn div_scalar(&self, divisor: &Var) -> Result<Var> {
        same_tape(self, divisor)?;
        let (a, s) = (self.value(), divisor.value());
        if !s.is_scalar() {
            return Err(OclipError::Dimension {
                op: "div_scalar",
                lhs: a.shape().to_vec(),
                rhs: s.shape().to_vec(),
            });
        }
        let s = s.item();
        let out = Tensor {
            shape: a.shape().to_vec(),
            data: a.data().iter().map(|x| x / s).collect(),
        };
        Ok(self.record(out, Op::DivScalar(self.id(), divisor.id()), &[divisor]))
    }

    pub fn relu(&self) -> Var {
        let a = self.value();
        let out = Tensor {
            shape: a.shape().to_vec(),
            data: a.data().iter().map(|&x| x.max(0.0)).collect(),
        };
        self.record(out, Op::Relu(self.id()), &[])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var {
        let a = self.value();
        let out = Tensor {
            shape: a.shape().to_vec(),
            data: a.data().iter().map(|&x| gelu(x)).collect(),
        };
        self.record(out, Op::Gelu(self.id()), &[])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let a = self.value();
        let out =
            Tensor::new(shape.to_vec(), a.data().to_vec()).map_err(|_| OclipError::Dimension {
                op: "reshape",
                lhs: a.shape().to_vec(),
                rhs: shape.to_vec(),
            })?;
        Ok(self.record(out, Op::Reshape(self.id()), &[]))
    }

    /// Transpose of a rank-2 var.
    pub fn transpose(&self) -> Result<Var> {
        let a = self.value();
        if a.rank() != 2 {
            return Err(OclipError::Dimension {
                op: "transpose",
                lhs: a.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (a.shape()[0], a.shape()[1]);
        let out = Tensor {
            shape: vec![c, r],
            data: transpose_kernel(a.data(), r, c),
        };
        Ok(self.record(out, Op::Transpose(self.id()), &[]))
    }

    /// Concatenates `parts` along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| OclipError::Contract("concat of zero parts".into()))?;
        for p in &parts[1..] {
            same_tape(first, p)?;
        }
        let values: Vec<_> = parts.iter().map(Var::value).collect();
        let base = values[0].shape().to_vec();
        check_axis("concat", &base, axis)?;
        for v in &values[1..] {
            let s = v.shape();
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(OclipError::Dimension {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
        }
        let total: usize = values.iter().map(|v| v.shape()[axis]).sum();
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in &values {
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor { shape, data };
        let refs: Vec<&Var> = parts[1..].iter().collect();
        Ok(first.record(
            out,
            Op::Concat {
                parts: parts.iter().map(Var::id).collect(),
                axis,
            },
            &refs,
        ))
    }

    /// The slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var> {
        let a = self.value();
        check_axis("narrow", a.shape(), axis)?;
        let (outer, full, inner) = split_axis(a.shape(), axis);
        if len == 0 || start + len > full {
            return Err(OclipError::Index {
                op: "narrow",
                index: start + len,
                bound: full + 1,
            });
        }
        let mut shape = a.shape().to_vec();
        shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * full + start) * inner;
            data.extend_from_slice(&a.data()[from..from + len * inner]);
        }
        let out = Tensor { shape, data };
        Ok(self.record(
            out,
            Op::Narrow {
                src: self.id(),
                axis,
                start,
            },
            &[],
        ))
    }

    /// Rows `ids` of a `[V, d]` table, as `[ids.len(), d]`.
    pub fn embedding_gather(&self, ids: &[usize]) -> Result<Var> {
        let t = self.value();
        if t.rank() != 2 {
            return Err(OclipError::Dimension {
                op: "embedding_gather",
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(OclipError::Index {
                    op: "embedding_gather",
                    index: id,
                    bound: v,
                });
            }
            data.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.record(
            out,
            Op::Gather {
                table: self.id(),
                ids: ids.to_vec(),
            },
            &[],
        ))
    }

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        same_tape(self, other)?;
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(OclipError::Dimension {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let out = Tensor {
            shape: vec![m, n],
            data: matmul_kernel(a.data(), b.data(), m, k, n),
        };
        Ok(self.record(out, Op::Matmul(self.id(), other.id()), &[other]))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var> {
        let a = self.value();
        check_axis("softmax", a.shape(), axis)?;
        let out = Tensor {
            shape: a.shape().to_vec(),
            data: softmax_kernel(a.data(), a.shape(), axis),
        };
        Ok(self.record(
            out,
            Op::Softmax {
                src: self.id(),
                axis,
            },
            &[],
        ))
    }

    /// Normalizes each last-axis slice to zero mean and unit variance, then
    /// applies `gain` and `bias` (both `[d]`).
    pub fn layer_norm(&self, gain: &Var, bias: &Var, eps: f64) -> Result<Var> {
        same_tape(self, gain)?;
        same_tape(self, bias)?;
        let (x, g, b) = (self.value(), gain.value(), bias.value());
        let d = *x.shape().last().unwrap_or(&0);
        if g.numel() != d || b.numel() != d {
            return Err(OclipError::Dimension {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let rows = x.numel() / d;
        let mut xhat = vec![0.0; x.numel()];
        let mut rstd = vec![0.0; rows];
        let mut data = vec![0.0; x.numel()];
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..d {
                let h = (row[j] - mean) * s;
                xhat[r * d + j] = h;
                data[r * d + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let out = Tensor {
            shape: x.shape().to_vec(),
            data,
        };
        Ok(self.record(
            out,
            Op::LayerNorm {
                x: self.id(),
                gain: gain.id(),
                bias: bias.id(),
                xhat,
                rstd,
            },
            &[gain, bias],
        ))
    }

    /// Mean over rows of `log-sum-exp(logits_i) - logits_i[target_i]`.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Var> {
        let x = self.value();
        if x.rank() != 2 || x.shape()[0] != targets.len() || targets.is_empty() {
            return Err(OclipError::Dimension {
                op: "cross_entropy",
                lhs: x.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let (n, v) = (x.shape()[0], x.shape()[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(OclipError::Index {
                op: "cross_entropy",
                index: bad,
                bound: v,
            });
        }
        let probs = softmax_kernel(x.data(), x.shape(), 1);
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &x.data()[i * v..(i + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let out = Tensor::scalar(total / n as f64);
        Ok(self.record(
            out,
            Op::CrossEntropy {
                logits: self.id(),
                targets: targets.to_vec(),
                probs,
            },
            &[],
        ))
    }

    /// Mean along `axis`; the axis is removed from the shape.
    pub fn mean(&self, axis: usize) -> Result<Var> {
        let a = self.value();
        check_axis("mean", a.shape(), axis)?;
        let (outer, len, inner) = split_axis(a.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for aa in 0..len {
                for i in 0..inner {
                    data[o * inner + i] += a.data()[(o * len + aa) * inner + i];
                }
            }
        }
        data.iter_mut().for_each(|v| *v /= len as f64);
        let out = Tensor {
            shape: reduced_shape(a.shape(), axis),
            data,
        };
        Ok(self.record(
            out,
            Op::Mean {
                src: self.id(),
                axis,
            },
            &[],
        ))
    }

    /// Sum of all entries, as a one-element var.
    pub fn sum(&self) -> Var {
        let a = self.value();
        let out = Tensor::scalar(a.data().iter().sum());
        self.record(out, Op::Sum(self.id()), &[])
    }

    /// Scales each slice along `axis` to unit Euclidean norm.
    pub fn l2_normalize(&self, axis: usize) -> Result<Var> {
        let a = self.value();
        check_axis("l2_normalize", a.shape(), axis)?;
        let (outer, len, inner) = split_axis(a.shape(), axis);
        let mut norms = vec![0.0; outer * inner];
        let mut data = vec![0.0; a.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let n = (0..len)
                    .map(|k| a.data()[at(k)] * a.data()[at(k)])
                    .sum::<f64>()
                    .sqrt()
                    .max(NORM_FLOOR);
                norms[o * inner + i] = n;
                for k in 0..len {
                    data[at(k)] = a.data()[at(k)] / n;
                }
            }
        }
        let out = Tensor {
            shape: a.shape().to_vec(),
            data,
        };
        Ok(self.record(
            out,
            Op::L2Normalize {
                src: self.id(),
                axis,
                norms,
            },
            &[],
        ))
    }
}

// ---------------------------------------------------------------------------
// Backward rules.

/// Gradient contributions of one node to its parents. Parents that do not
/// require gradients are skipped.
pub(crate) fn backward_rule(
    op: &Op,
    out: &Tensor,
    g: &[f64],
    nodes: &[Node],
) -> Vec<(usize, Vec<f64>)> {
    let val = |id: usize| &*nodes[id].value;
    let wants = |id: usize| nodes[id].requires_grad;
    let mut res = Vec::new();
    let mut emit = |id: usize, f: &mut dyn FnMut() -> Vec<f64>| {
        if wants(id) {
            res.push((id, f()));
        }
    };
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            emit(*a, &mut || g.to_vec());
            emit(*b, &mut || g.to_vec());
        }
        Op::Sub(a, b) => {
            emit(*a, &mut || g.to_vec());
            emit(*b, &mut || g.iter().map(|v| -v).collect());
        }
        Op::Mul(a, b) => {
            emit(*a, &mut || {
                g.iter().zip(val(*b).data()).map(|(x, y)| x * y).collect()
            });
            emit(*b, &mut || {
                g.iter().zip(val(*a).data()).map(|(x, y)| x * y).collect()
            });
        }
        Op::AddRow(a, b) => {
            emit(*a, &mut || g.to_vec());
            emit(*b, &mut || {
                let d = val(*b).numel();
                let mut acc = vec![0.0; d];
                for row in g.chunks(d) {
                    acc.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                }
                acc
            });
        }
        Op::Scale(a, c) => emit(*a, &mut || g.iter().map(|v| v * c).collect()),
        Op::DivScalar(a, s) => {
            let sv = val(*s).item();
            emit(*a, &mut || g.iter().map(|v| v / sv).collect());
            emit(*s, &mut || {
                let dot: f64 = g.iter().zip(out.data()).map(|(x, y)| x * y).sum();
                vec![-dot / sv]
            });
        }
        Op::Relu(a) => emit(*a, &mut || {
            g.iter()
                .zip(val(*a).data())
                .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                .collect()
        }),
        Op::Gelu(a) => emit(*a, &mut || {
            g.iter()
                .zip(val(*a).data())
                .map(|(gv, &x)| gv * gelu_grad(x))
                .collect()
        }),
        Op::Reshape(a) => emit(*a, &mut || g.to_vec()),
        Op::Transpose(a) => emit(*a, &mut || {
            let s = out.shape();
            transpose_kernel(g, s[0], s[1])
        }),
        Op::Concat { parts, axis } => {
            let (outer, _, inner) = split_axis(out.shape(), *axis);
            let total = out.shape()[*axis];
            let mut offset = 0;
            for &p in parts {
                let len = val(p).shape()[*axis];
                emit(p, &mut || {
                    let mut d = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let from = (o * total + offset) * inner;
                        d.extend_from_slice(&g[from..from + len * inner]);
                    }
                    d
                });
                offset += len;
            }
        }
        Op::Narrow { src, axis, start } => emit(*src, &mut || {
            let src_shape = val(*src).shape();
            let (outer, full, inner) = split_axis(src_shape, *axis);
            let len = out.shape()[*axis];
            let mut d = vec![0.0; val(*src).numel()];
            for o in 0..outer {
                let to = (o * full + start) * inner;
                let from = o * len * inner;
                d[to..to + len * inner].copy_from_slice(&g[from..from + len * inner]);
            }
            d
        }),
        Op::Gather { table, ids } => emit(*table, &mut || {
            let t = val(*table);
            let d = t.shape()[1];
            let mut acc = vec![0.0; t.numel()];
            for (r, &id) in ids.iter().enumerate() {
                acc[id * d..(id + 1) * d]
                    .iter_mut()
                    .zip(&g[r * d..(r + 1) * d])
                    .for_each(|(s, v)| *s += v);
            }
            acc
        }),
        Op::Matmul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            emit(*a, &mut || matmul_bt_kernel(g, bv.data(), m, n, k));
            emit(*b, &mut || matmul_at_kernel(av.data(), g, m, k, n));
        }
        Op::Softmax { src, axis } => emit(*src, &mut || {
            let (outer, len, inner) = split_axis(out.shape(), *axis);
            let y = out.data();
            let mut d = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |a: usize| (o * len + a) * inner + i;
                    let dot: f64 = (0..len).map(|a| g[at(a)] * y[at(a)]).sum();
                    for a in 0..len {
                        d[at(a)] = y[at(a)] * (g[at(a)] - dot);
                    }
                }
            }
            d
        }),
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let gv = val(*gain).data();
            let d = gv.len();
            emit(*x, &mut || {
                let mut dx = vec![0.0; xhat.len()];
                for (r, &s) in rstd.iter().enumerate() {
                    let span = r * d..(r + 1) * d;
                    let (gr, hr) = (&g[span.clone()], &xhat[span.clone()]);
                    let dh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                    let mean_dh = dh.iter().sum::<f64>() / d as f64;
                    let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dx[r * d + j] = s * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                dx
            });
            emit(*gain, &mut || {
                let mut acc = vec![0.0; d];
                for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        acc[j] += gr[j] * hr[j];
                    }
                }
                acc
            });
            emit(*bias, &mut || {
                let mut acc = vec![0.0; d];
                for gr in g.chunks(d) {
                    acc.iter_mut().zip(gr).for_each(|(s, v)| *s += v);
                }
                acc
            });
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => emit(*logits, &mut || {
            let n = targets.len();
            let v = probs.len() / n;
            let scale = g[0] / n as f64;
            let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
            for (i, &t) in targets.iter().enumerate() {
                d[i * v + t] -= scale;
            }
            d
        }),
        Op::Mean { src, axis } => emit(*src, &mut || {
            let (outer, len, inner) = split_axis(val(*src).shape(), *axis);
            let mut d = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for a in 0..len {
                    for i in 0..inner {
                        d[(o * len + a) * inner + i] = g[o * inner + i] / len as f64;
                    }
                }
            }
            d
        }),
        Op::Sum(a) => emit(*a, &mut || vec![g[0]; val(*a).numel()]),
        Op::L2Normalize { src, axis, norms } => emit(*src, &mut || {
            let (outer, len, inner) = split_axis(out.shape(), *axis);
            let y = out.data();
            let mut d = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * len + k) * inner + i;
                    let dot: f64 = (0..len).map(|k| y[at(k)] * g[at(k)]).sum();
                    let n = norms[o * inner + i];
                    for k in 0..len {
                        d[at(k)] = (g[at(k)] - y[at(k)] * dot) / n;
                    }
                }
            }
            d
        }),
    }
    res
}
