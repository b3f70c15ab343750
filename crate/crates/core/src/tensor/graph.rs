use rand::Rng as _;

use super::rng::Rng;
use super::Tensor;
use crate::error::{shape_err, Error, Result};

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddBias(usize, usize),
    AddConst(usize),
    MatMul(MatMulSpec),
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu(usize),
    Gelu(usize),
    Dropout {
        x: usize,
        mask: Vec<f64>,
    },
    Reshape(usize),
    Permute {
        x: usize,
        perm: Vec<usize>,
    },
    ConcatRows(Vec<usize>),
    NllGather {
        logp: usize,
        targets: Vec<usize>,
        weights: Vec<f64>,
    },
    Sum(usize),
    KlStudentTeacher {
        logits: usize,
        student_logp: Vec<f64>,
        teacher_logp: Vec<f64>,
        weights: Vec<f64>,
        row_kl: Vec<f64>,
    },
    KlTeacherStudent {
        logits: usize,
        student_p: Vec<f64>,
        teacher_p: Vec<f64>,
        weights: Vec<f64>,
    },
}

#[derive(Debug, Clone, Copy)]
struct MatMulSpec {
    a: usize,
    b: usize,
    groups: usize,
    m: usize,
    k: usize,
    n: usize,
    trans_b: bool,
    b_shared: bool,
}

/// A recorded computation. Nodes are appended in evaluation order, so the
/// node index is a valid topological order for the backward sweep.
#[derive(Debug, Default)]
pub struct Graph {
    values: Vec<Tensor>,
    grads: Vec<Option<Vec<f64>>>,
    requires: Vec<bool>,
    ops: Vec<Op>,
}

/// Row-major strides for `dgemm`: (row stride, column stride).
type Strides = (isize, isize);

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: Strides,
    b: &[f64],
    sb: Strides,
    c: &mut [f64],
    c_row_stride: usize,
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= (m - 1) * c_row_stride + n);
    // SAFETY: the callers pass slices whose extents cover the strided
    // m x k, k x n and m x n views described by the stride arguments.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0,
            sa.1,
            b.as_ptr(),
            sb.0,
            sb.1,
            beta,
            c.as_mut_ptr(),
            c_row_stride as isize,
            1,
        );
    }
}

fn row_softmax(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn row_log_softmax(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For each output position of `permute`, the input offset it reads from.
fn permute_source_offsets(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let n: usize = shape.iter().product();
    let mut offsets = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..n {
        let off: usize = idx
            .iter()
            .zip(perm)
            .map(|(&i, &p)| i * in_strides[p])
            .sum();
        offsets.push(off);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    offsets
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires: bool) -> Var {
        self.values.push(value);
        self.grads.push(None);
        self.requires.push(requires);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    /// The single value of a scalar node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.values[v.0].data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn req(&self, vars: &[usize]) -> bool {
        vars.iter().any(|&i| self.requires[i])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let va = &self.values[a.0];
        let vb = &self.values[b.0];
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor {
            shape: va.shape().to_vec(),
            data,
        }
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let va = &self.values[a.0];
        Tensor {
            shape: va.shape().to_vec(),
            data: va.data().iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        let r = self.req(&[a.0, b.0]);
        Ok(self.push(out, Op::Add(a.0, b.0), r))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        let r = self.req(&[a.0, b.0]);
        Ok(self.push(out, Op::Sub(a.0, b.0), r))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        let r = self.req(&[a.0, b.0]);
        Ok(self.push(out, Op::Mul(a.0, b.0), r))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.map(a, |x| x * factor);
        let r = self.requires[a.0];
        self.push(out, Op::Scale(a.0, factor), r)
    }

    /// `x + bias` with `bias` broadcast over every row of the last dimension.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.values[x.0].last_dim();
        if self.shape(bias) != [n] {
            return Err(shape_err(
                "add_bias",
                format!("x {:?} with bias {:?}", self.shape(x), self.shape(bias)),
            ));
        }
        let b = self.values[bias.0].data();
        let vx = &self.values[x.0];
        let data = vx
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(v, c)| v + c))
            .collect();
        let out = Tensor {
            shape: vx.shape().to_vec(),
            data,
        };
        let r = self.req(&[x.0, bias.0]);
        Ok(self.push(out, Op::AddBias(x.0, bias.0), r))
    }

    /// `x + c` for a constant tensor `c` of identical shape (e.g. an
    /// additive attention mask).
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(shape_err(
                "add_const",
                format!("{:?} vs {:?}", self.shape(x), c.shape()),
            ));
        }
        let vx = &self.values[x.0];
        let data = vx.data().iter().zip(c.data()).map(|(a, b)| a + b).collect();
        let out = Tensor {
            shape: vx.shape().to_vec(),
            data,
        };
        let r = self.requires[x.0];
        Ok(self.push(out, Op::AddConst(x.0), r))
    }

    fn matmul_impl(&mut self, spec: MatMulSpec, out_shape: Vec<usize>) -> Var {
        let MatMulSpec {
            a,
            b,
            groups,
            m,
            k,
            n,
            trans_b,
            b_shared,
        } = spec;
        let mut out = vec![0.0; groups * m * n];
        let va = self.values[a].data();
        let vb = self.values[b].data();
        let b_size = k * n;
        let sb = if trans_b {
            (1, k as isize)
        } else {
            (n as isize, 1)
        };
        for g in 0..groups {
            let boff = if b_shared { 0 } else { g * b_size };
            gemm(
                m,
                k,
                n,
                &va[g * m * k..],
                (k as isize, 1),
                &vb[boff..],
                sb,
                &mut out[g * m * n..],
                n,
                0.0,
            );
        }
        let r = self.req(&[a, b]);
        self.push(
            Tensor {
                shape: out_shape,
                data: out,
            },
            Op::MatMul(spec),
            r,
        )
    }

    /// `a [.., k] x b [k, n] -> [.., n]`; leading dimensions of `a` are
    /// flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_2d("matmul", a, b, false)
    }

    /// `a [.., k] x b^T` where `b` is stored as `[n, k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_2d("matmul_t", a, b, true)
    }

    fn matmul_2d(&mut self, op: &'static str, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.is_empty() || sb.len() != 2 {
            return Err(shape_err(op, format!("{sa:?} x {sb:?}")));
        }
        let k = *sa.last().unwrap();
        let (bk, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != bk {
            return Err(shape_err(op, format!("{sa:?} x {sb:?}")));
        }
        let m = self.values[a.0].len() / k.max(1);
        let mut out_shape = sa.clone();
        *out_shape.last_mut().unwrap() = n;
        Ok(self.matmul_impl(
            MatMulSpec {
                a: a.0,
                b: b.0,
                groups: 1,
                m,
                k,
                n,
                trans_b,
                b_shared: true,
            },
            out_shape,
        ))
    }

    /// Batched `a [g, m, k] x b [g, k, n] -> [g, m, n]`, or `b [g, n, k]`
    /// transposed when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err("bmm", format!("{sa:?} x {sb:?}")));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let (bk, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != bk {
            return Err(shape_err("bmm", format!("{sa:?} x {sb:?}")));
        }
        Ok(self.matmul_impl(
            MatMulSpec {
                a: a.0,
                b: b.0,
                groups: g,
                m,
                k,
                n,
                trans_b,
                b_shared: false,
            },
            vec![g, m, n],
        ))
    }

    /// Gathers rows of a `[vocab, dim]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(shape_err("embedding", format!("table {st:?}")));
        }
        let (vocab, dim) = (st[0], st[1]);
        let t = self.values[table.0].data();
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(Error::TokenOutOfRange { id, vocab });
            }
            data.extend_from_slice(&t[id * dim..(id + 1) * dim]);
        }
        let out = Tensor {
            shape: vec![ids.len(), dim],
            data,
        };
        let r = self.requires[table.0];
        Ok(self.push(
            out,
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
            r,
        ))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let vx = &self.values[x.0];
        let n = vx.last_dim();
        let mut data = vec![0.0; vx.len()];
        for (row, out) in vx.data().chunks(n).zip(data.chunks_mut(n)) {
            row_softmax(row, out);
        }
        let out = Tensor {
            shape: vx.shape().to_vec(),
            data,
        };
        let r = self.requires[x.0];
        self.push(out, Op::Softmax(x.0), r)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let vx = &self.values[x.0];
        let n = vx.last_dim();
        let mut data = vec![0.0; vx.len()];
        for (row, out) in vx.data().chunks(n).zip(data.chunks_mut(n)) {
            row_log_softmax(row, out);
        }
        let out = Tensor {
            shape: vx.shape().to_vec(),
            data,
        };
        let r = self.requires[x.0];
        self.push(out, Op::LogSoftmax(x.0), r)
    }

    /// Layer normalization over the last dimension. Constant rows normalize
    /// to zero (before the affine transform) because of the epsilon term.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let n = self.values[x.0].last_dim();
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "x {:?}, gamma {:?}, beta {:?}",
                    self.shape(x),
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let vx = &self.values[x.0];
        let g = self.values[gamma.0].data();
        let b = self.values[beta.0].data();
        let rows = vx.len() / n;
        let mut xhat = vec![0.0; vx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut data = vec![0.0; vx.len()];
        for r in 0..rows {
            let row = &vx.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                data[r * n + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor {
            shape: vx.shape().to_vec(),
            data,
        };
        let r = self.req(&[x.0, gamma.0, beta.0]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
            },
            r,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.map(x, |v| v.max(0.0));
        let r = self.requires[x.0];
        self.push(out, Op::Relu(x.0), r)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.map(x, gelu);
        let r = self.requires[x.0];
        self.push(out, Op::Gelu(x.0), r)
    }

    /// Inverted dropout. Rate 0 returns `x` itself.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut Rng) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let n = self.values[x.0].len();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let vx = &self.values[x.0];
        let out = Tensor {
            shape: vx.shape().to_vec(),
            data: vx.data().iter().zip(&mask).map(|(a, m)| a * m).collect(),
        };
        let r = self.requires[x.0];
        self.push(out, Op::Dropout { x: x.0, mask }, r)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.values[x.0].len() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(x)),
            ));
        }
        let out = self.values[x.0].clone().reshaped(shape.to_vec());
        let r = self.requires[x.0];
        Ok(self.push(out, Op::Reshape(x.0), r))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len()) {
            return Err(shape_err("permute", format!("{shape:?} by {perm:?}")));
        }
        for &p in perm {
            if std::mem::replace(&mut seen[p], true) {
                return Err(shape_err("permute", format!("{shape:?} by {perm:?}")));
            }
        }
        let src = permute_source_offsets(&shape, perm);
        let vx = self.values[x.0].data();
        let data = src.iter().map(|&o| vx[o]).collect();
        let out = Tensor {
            shape: perm.iter().map(|&p| shape[p]).collect(),
            data,
        };
        let r = self.requires[x.0];
        Ok(self.push(
            out,
            Op::Permute {
                x: x.0,
                perm: perm.to_vec(),
            },
            r,
        ))
    }

    /// Stacks 2-d tensors with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty("concat input"))?;
        let cols = self.values[first.0].last_dim();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let s = self.shape(*p);
            if s.len() != 2 || s[1] != cols {
                return Err(shape_err(
                    "concat",
                    format!("part {s:?} with {cols} columns"),
                ));
            }
            rows += s[0];
            data.extend_from_slice(self.values[p.0].data());
        }
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let r = self.req(&idx);
        Ok(self.push(
            Tensor {
                shape: vec![rows, cols],
                data,
            },
            Op::ConcatRows(idx),
            r,
        ))
    }

    /// `-sum_r weights[r] * logp[r, targets[r]]` over a `[rows, vocab]`
    /// log-probability matrix.
    pub fn nll_gather(&mut self, logp: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let vocab = self.values[logp.0].last_dim();
        let rows = self.values[logp.0].len() / vocab.max(1);
        if targets.len() != rows || weights.len() != rows {
            return Err(shape_err(
                "nll_gather",
                format!(
                    "{rows} rows, {} targets, {} weights",
                    targets.len(),
                    weights.len()
                ),
            ));
        }
        let lp = self.values[logp.0].data();
        let mut total = 0.0;
        for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            if t >= vocab {
                return Err(Error::TokenOutOfRange { id: t, vocab });
            }
            if w != 0.0 {
                total -= w * lp[r * vocab + t];
            }
        }
        let r = self.requires[logp.0];
        Ok(self.push(
            Tensor::scalar(total),
            Op::NllGather {
                logp: logp.0,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            r,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.values[x.0].data().iter().sum();
        let r = self.requires[x.0];
        self.push(Tensor::scalar(total), Op::Sum(x.0), r)
    }

    fn check_rows(&self, op: &'static str, logits: Var, other: &[f64], weights: &[f64]) -> Result<(usize, usize)> {
        let v = self.values[logits.0].last_dim();
        let rows = self.values[logits.0].len() / v.max(1);
        if other.len() != rows * v || weights.len() != rows {
            return Err(shape_err(
                op,
                format!(
                    "logits {:?}, teacher {} values, {} weights",
                    self.shape(logits),
                    other.len(),
                    weights.len()
                ),
            ));
        }
        Ok((rows, v))
    }

    /// `sum_r w_r KL(softmax(logits_r) || teacher_r)`: the student is the
    /// first argument. Gradients vanish exactly where the student's
    /// log-probabilities equal the teacher's.
    pub fn kl_student_teacher(&mut self, logits: Var, teacher_logp: &[f64], weights: &[f64]) -> Result<Var> {
        let (rows, v) = self.check_rows("kl_student_teacher", logits, teacher_logp, weights)?;
        let lg = self.values[logits.0].data();
        let mut student_logp = vec![0.0; rows * v];
        let mut row_kl = vec![0.0; rows];
        let mut total = 0.0;
        for r in 0..rows {
            let out = &mut student_logp[r * v..(r + 1) * v];
            row_log_softmax(&lg[r * v..(r + 1) * v], out);
            let t = &teacher_logp[r * v..(r + 1) * v];
            let kl: f64 = out.iter().zip(t).map(|(&s, &tt)| s.exp() * (s - tt)).sum();
            row_kl[r] = kl;
            total += weights[r] * kl;
        }
        let r = self.requires[logits.0];
        Ok(self.push(
            Tensor::scalar(total),
            Op::KlStudentTeacher {
                logits: logits.0,
                student_logp,
                teacher_logp: teacher_logp.to_vec(),
                weights: weights.to_vec(),
                row_kl,
            },
            r,
        ))
    }

    /// `sum_r w_r KL(teacher_r || softmax(logits_r))`, with the teacher given
    /// as log-probabilities.
    pub fn kl_teacher_student(&mut self, logits: Var, teacher_logp: &[f64], weights: &[f64]) -> Result<Var> {
        let (rows, v) = self.check_rows("kl_teacher_student", logits, teacher_logp, weights)?;
        let lg = self.values[logits.0].data();
        let mut student_p = vec![0.0; rows * v];
        let teacher_p: Vec<f64> = teacher_logp.iter().map(|l| l.exp()).collect();
        let mut total = 0.0;
        let mut lp = vec![0.0; v];
        for r in 0..rows {
            row_log_softmax(&lg[r * v..(r + 1) * v], &mut lp);
            let mut kl = 0.0;
            for j in 0..v {
                let tp = teacher_p[r * v + j];
                student_p[r * v + j] = lp[j].exp();
                if tp > 0.0 {
                    kl += tp * (teacher_logp[r * v + j] - lp[j]);
                }
            }
            total += weights[r] * kl;
        }
        let r = self.requires[logits.0];
        Ok(self.push(
            Tensor::scalar(total),
            Op::KlTeacherStudent {
                logits: logits.0,
                student_p,
                teacher_p,
                weights: weights.to_vec(),
            },
            r,
        ))
    }

    /// Back-propagates from a scalar node. Leaf gradients accumulate across
    /// calls; intermediate gradients are cleared afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.values[loss.0];
        if lv.len() != 1 || lv.shape().iter().any(|&d| d != 1) {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        if !self.requires[loss.0] {
            return Ok(());
        }
        self.grads[loss.0].get_or_insert_with(|| vec![0.0])[0] += 1.0;
        for i in (0..=loss.0).rev() {
            if !self.requires[i] || matches!(self.ops[i], Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let Graph {
            values,
            grads,
            requires,
            ops,
        } = self;
        let values: &[Tensor] = values;
        macro_rules! with_grad {
            ($j:expr, |$d:ident| $body:block) => {{
                let j = $j;
                if requires[j] {
                    let len = values[j].len();
                    let $d: &mut Vec<f64> = grads[j].get_or_insert_with(|| vec![0.0; len]);
                    $body
                }
            }};
        }
        match &ops[i] {
            Op::Leaf => {}
            Op::Add(a, b) => {
                with_grad!(*a, |d| {
                    d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                });
                with_grad!(*b, |d| {
                    d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                });
            }
            Op::Sub(a, b) => {
                with_grad!(*a, |d| {
                    d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                });
                with_grad!(*b, |d| {
                    d.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (values[*a].data(), values[*b].data());
                with_grad!(*a, |d| {
                    for k in 0..g.len() {
                        d[k] += g[k] * vb[k];
                    }
                });
                with_grad!(*b, |d| {
                    for k in 0..g.len() {
                        d[k] += g[k] * va[k];
                    }
                });
            }
            Op::Scale(a, f) => {
                with_grad!(*a, |d| {
                    d.iter_mut().zip(g).for_each(|(x, y)| *x += f * y);
                });
            }
            Op::AddBias(x, b) => {
                with_grad!(*x, |d| {
                    d.iter_mut().zip(g).for_each(|(p, q)| *p += q);
                });
                with_grad!(*b, |d| {
                    let n = d.len();
                    for row in g.chunks(n) {
                        d.iter_mut().zip(row).for_each(|(p, q)| *p += q);
                    }
                });
            }
            Op::AddConst(x) | Op::Reshape(x) => {
                with_grad!(*x, |d| {
                    d.iter_mut().zip(g).for_each(|(p, q)| *p += q);
                });
            }
            Op::MatMul(spec) => {
                let MatMulSpec {
                    a,
                    b,
                    groups,
                    m,
                    k,
                    n,
                    trans_b,
                    b_shared,
                } = *spec;
                let (va, vb) = (values[a].data(), values[b].data());
                let b_size = k * n;
                with_grad!(a, |d| {
                    // dA = dC . op(B)^T
                    let s = if trans_b {
                        (k as isize, 1)
                    } else {
                        (1, n as isize)
                    };
                    for grp in 0..groups {
                        let boff = if b_shared { 0 } else { grp * b_size };
                        gemm(
                            m,
                            n,
                            k,
                            &g[grp * m * n..],
                            (n as isize, 1),
                            &vb[boff..],
                            s,
                            &mut d[grp * m * k..],
                            k,
                            1.0,
                        );
                    }
                });
                with_grad!(b, |d| {
                    for grp in 0..groups {
                        let boff = if b_shared { 0 } else { grp * b_size };
                        if trans_b {
                            // dB [n, k] = dC^T . A
                            gemm(
                                n,
                                m,
                                k,
                                &g[grp * m * n..],
                                (1, n as isize),
                                &va[grp * m * k..],
                                (k as isize, 1),
                                &mut d[boff..],
                                k,
                                1.0,
                            );
                        } else {
                            // dB [k, n] = A^T . dC
                            gemm(
                                k,
                                m,
                                n,
                                &va[grp * m * k..],
                                (1, k as isize),
                                &g[grp * m * n..],
                                (n as isize, 1),
                                &mut d[boff..],
                                n,
                                1.0,
                            );
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                with_grad!(*table, |d| {
                    let dim = values[*table].last_dim();
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &g[r * dim..(r + 1) * dim];
                        d[id * dim..(id + 1) * dim]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(p, q)| *p += q);
                    }
                });
            }
            Op::Softmax(x) => {
                let y = values[i].data();
                let n = values[i].last_dim();
                with_grad!(*x, |d| {
                    for ((dr, yr), gr) in d.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let y = values[i].data();
                let n = values[i].last_dim();
                with_grad!(*x, |d| {
                    for ((dr, yr), gr) in d.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let s: f64 = gr.iter().sum();
                        for j in 0..n {
                            dr[j] += gr[j] - yr[j].exp() * s;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = values[i].last_dim();
                let gm = values[*gamma].data();
                with_grad!(*gamma, |d| {
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            d[j] += gr[j] * hr[j];
                        }
                    }
                });
                with_grad!(*beta, |d| {
                    for gr in g.chunks(n) {
                        d.iter_mut().zip(gr).for_each(|(p, q)| *p += q);
                    }
                });
                with_grad!(*x, |d| {
                    let nf = n as f64;
                    for (r, ((dr, gr), hr)) in d
                        .chunks_mut(n)
                        .zip(g.chunks(n))
                        .zip(xhat.chunks(n))
                        .enumerate()
                    {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..n {
                            let dh = gr[j] * gm[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hr[j];
                        }
                        let is = inv_std[r];
                        for j in 0..n {
                            let dh = gr[j] * gm[j];
                            dr[j] += is / nf * (nf * dh - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let vx = values[*x].data();
                with_grad!(*x, |d| {
                    for k in 0..g.len() {
                        if vx[k] > 0.0 {
                            d[k] += g[k];
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let vx = values[*x].data();
                with_grad!(*x, |d| {
                    for k in 0..g.len() {
                        d[k] += g[k] * gelu_grad(vx[k]);
                    }
                });
            }
            Op::Dropout { x, mask } => {
                with_grad!(*x, |d| {
                    for k in 0..g.len() {
                        d[k] += g[k] * mask[k];
                    }
                });
            }
            Op::Permute { x, perm } => {
                let src = permute_source_offsets(values[*x].shape(), perm);
                with_grad!(*x, |d| {
                    for (k, &o) in src.iter().enumerate() {
                        d[o] += g[k];
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = values[p].len();
                    with_grad!(p, |d| {
                        d.iter_mut()
                            .zip(&g[off..off + len])
                            .for_each(|(a, b)| *a += b);
                    });
                    off += len;
                }
            }
            Op::NllGather {
                logp,
                targets,
                weights,
            } => {
                let v = values[*logp].last_dim();
                with_grad!(*logp, |d| {
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        d[r * v + t] -= g[0] * w;
                    }
                });
            }
            Op::Sum(x) => {
                with_grad!(*x, |d| {
                    d.iter_mut().for_each(|p| *p += g[0]);
                });
            }
            Op::KlStudentTeacher {
                logits,
                student_logp,
                teacher_logp,
                weights,
                row_kl,
            } => {
                let v = values[*logits].last_dim();
                with_grad!(*logits, |d| {
                    for (r, &w) in weights.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        for j in 0..v {
                            let s = student_logp[r * v + j];
                            let t = teacher_logp[r * v + j];
                            d[r * v + j] += g[0] * w * s.exp() * (s - t - row_kl[r]);
                        }
                    }
                });
            }
            Op::KlTeacherStudent {
                logits,
                student_p,
                teacher_p,
                weights,
            } => {
                let v = values[*logits].last_dim();
                with_grad!(*logits, |d| {
                    for (r, &w) in weights.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        for j in 0..v {
                            d[r * v + j] += g[0] * w * (student_p[r * v + j] - teacher_p[r * v + j]);
                        }
                    }
                });
            }
        }
    }
}
