use super::{gemm, log_sigmoid_scalar, rows_cols, sigmoid_scalar, Scalar, Tensor};
use crate::error::{LlipError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Linear {
        a: Var,
        w: Var,
        bias: Var,
    },
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        a_shared: bool,
        b_shared: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddBroadcast {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    MulConst {
        a: Var,
        c: Vec<T>,
    },
    Scale {
        a: Var,
        c: T,
    },
    ScaleByVar {
        a: Var,
        s: Var,
    },
    AddScalarVar {
        a: Var,
        s: Var,
    },
    Exp {
        a: Var,
    },
    Gelu {
        a: Var,
        slope: Vec<T>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax {
        a: Var,
        tau: T,
    },
    LogSoftmax {
        a: Var,
    },
    L2Normalize {
        a: Var,
        norms: Vec<T>,
    },
    LogSigmoid {
        a: Var,
    },
    Sum {
        a: Var,
    },
    MeanAxis {
        a: Var,
        pre: usize,
        len: usize,
        post: usize,
    },
    Permute {
        a: Var,
        axes: Vec<usize>,
    },
    Reshape {
        a: Var,
    },
    SliceAxis {
        a: Var,
        pre: usize,
        extent: usize,
        start: usize,
        len: usize,
        post: usize,
    },
    Concat {
        a: Var,
        b: Var,
        pre: usize,
        la: usize,
        lb: usize,
        post: usize,
    },
    RepeatAxis {
        a: Var,
        pre: usize,
        n: usize,
        post: usize,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    PairwiseDot {
        z: Var,
        t: Var,
        ni: usize,
        nt: usize,
        d: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Append-only record of primitive applications.
///
/// Nodes are pushed in evaluation order, so every node's inputs precede it and
/// a reverse sweep visits each node once.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    macs: u64,
}

/// Leaf gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, numel: usize) -> Vec<T> {
        self.get(v)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![T::zero(); numel])
    }
}

fn check_finite<T: Scalar>(name: &str, data: &[T]) -> Result<()> {
    // x·0 is NaN exactly for non-finite x; lane-wise sums vectorize
    const LANES: usize = 16;
    let mut acc = [T::zero(); LANES];
    let chunks = data.chunks_exact(LANES);
    let tail = chunks.remainder();
    for c in chunks {
        for (a, &x) in acc.iter_mut().zip(c) {
            *a = *a + x * T::zero();
        }
    }
    if acc.iter().chain(tail).all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(LlipError::Numeric(name.to_string()))
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let pre = shape[..axis].iter().product();
    let post = shape[axis + 1..].iter().product();
    (pre, shape[axis], post)
}

fn permute_data<T: Copy>(src: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let nd = shape.len();
    let n = src.len();
    if nd == 0 || n == 0 {
        return src.to_vec();
    }
    let mut strides = vec![1usize; nd];
    for i in (0..nd - 1).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let step: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let inner = out_shape[nd - 1];
    let inner_step = step[nd - 1];
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    let outer = n / inner;
    for _ in 0..outer {
        if inner_step == 1 {
            out.extend_from_slice(&src[off..off + inner]);
        } else {
            let mut o = off;
            for _ in 0..inner {
                out.push(src[o]);
                o += inner_step;
            }
        }
        let mut d = nd - 1;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            off += step[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= step[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

/// Adds `src` into a gradient slot, taking a copy when the slot is empty.
fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, src: &[T]) {
    match slot {
        Some(d) => d.iter_mut().zip(src).for_each(|(d, s)| *d = *d + *s),
        None => *slot = Some(src.to_vec()),
    }
}

fn accumulate_owned<T: Scalar>(slot: &mut Option<Vec<T>>, src: Vec<T>) {
    match slot {
        Some(d) => d.iter_mut().zip(&src).for_each(|(d, s)| *d = *d + *s),
        None => *slot = Some(src),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), macs: 0 }
    }

    /// Multiply-adds performed by forward products so far.
    pub fn multiply_adds(&self) -> u64 {
        self.macs
    }

    fn count_macs(&mut self, n: usize) {
        self.macs += n as u64;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, name: &str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        check_finite(name, value.data())?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    fn out(&self, shape: &[usize], data: Vec<T>, inputs: &[Var]) -> Tensor<T> {
        let mut t = Tensor::new(shape, data).expect("op output shape");
        t.requires_grad = inputs.iter().any(|&v| self.needs(v));
        t
    }

    /// Records an input. Its gradient is tracked iff `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<T>) -> Result<Var> {
        let mut value = value;
        value.grad = None;
        self.push("leaf", value, Op::Leaf)
    }

    /// Records an input that never receives gradient.
    pub fn constant(&mut self, mut value: Tensor<T>) -> Result<Var> {
        value.requires_grad = false;
        self.leaf(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// `a[..., k] · b[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(LlipError::Dimension(format!(
                "matmul {:?} · {:?}",
                sa, sb
            )));
        }
        let (rows, k) = rows_cols(&sa);
        let n = sb[1];
        let mut out = vec![T::zero(); rows * n];
        gemm(rows, k, n, self.data(a), false, self.data(b), false, &mut out, false);
        self.count_macs(rows * k * n);
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        let value = self.out(&shape, out, &[a, b]);
        self.push("matmul", value, Op::MatMul { a, b })
    }

    /// `a[..., k] · w[k, n] + bias[n]`.
    pub fn linear(&mut self, a: Var, w: Var, bias: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sw = self.shape(w).to_vec();
        if sa.is_empty() || sw.len() != 2 || sa[sa.len() - 1] != sw[0] || self.shape(bias) != [sw[1]] {
            return Err(LlipError::Dimension(format!(
                "linear {:?} · {:?} + {:?}",
                sa,
                sw,
                self.shape(bias)
            )));
        }
        let (rows, k) = rows_cols(&sa);
        let n = sw[1];
        let mut out = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            out.extend_from_slice(self.data(bias));
        }
        gemm(rows, k, n, self.data(a), false, self.data(w), false, &mut out, true);
        self.count_macs(rows * k * n);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let value = self.out(&shape, out, &[a, w, bias]);
        self.push("linear", value, Op::Linear { a, w, bias })
    }

    /// Batched matmul over a leading axis. A 2-D operand is shared by every batch.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let bad = || LlipError::Dimension(format!("bmm {:?} · {:?} (trans_b={})", sa, sb, trans_b));
        if !(2..=3).contains(&sa.len()) || !(2..=3).contains(&sb.len()) {
            return Err(bad());
        }
        let a_shared = sa.len() == 2;
        let b_shared = sb.len() == 2;
        let batch = match (a_shared, b_shared) {
            (true, true) => 1,
            (true, false) => sb[0],
            (false, true) => sa[0],
            (false, false) if sa[0] == sb[0] => sa[0],
            _ => return Err(bad()),
        };
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if kb != k {
            return Err(bad());
        }
        let mut out = vec![T::zero(); batch * m * n];
        {
            let ad = self.data(a);
            let bd = self.data(b);
            for bi in 0..batch {
                let ao = if a_shared { 0 } else { bi * m * k };
                let bo = if b_shared { 0 } else { bi * k * n };
                gemm(
                    m,
                    k,
                    n,
                    &ad[ao..ao + m * k],
                    false,
                    &bd[bo..bo + k * n],
                    trans_b,
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    false,
                );
            }
        }
        self.count_macs(batch * m * k * n);
        let value = self.out(&[batch, m, n], out, &[a, b]);
        self.push(
            "bmm",
            value,
            Op::Bmm {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
                a_shared,
                b_shared,
            },
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(LlipError::Dimension(format!(
                "add {:?} + {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| *x + *y)
            .collect();
        let value = self.out(&self.shape(a).to_vec(), out, &[a, b]);
        self.push("add", value, Op::Add { a, b })
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s (bias / positional add).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(LlipError::Dimension(format!(
                "broadcast add {:?} + {:?}",
                sa, sb
            )));
        }
        let bd = self.data(b);
        let mut out = self.data(a).to_vec();
        for chunk in out.chunks_mut(bd.len()) {
            chunk.iter_mut().zip(bd).for_each(|(x, y)| *x = *x + *y);
        }
        let value = self.out(&sa, out, &[a, b]);
        self.push("add_broadcast", value, Op::AddBroadcast { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(LlipError::Dimension(format!(
                "mul {:?} * {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| *x * *y)
            .collect();
        let value = self.out(&self.shape(a).to_vec(), out, &[a, b]);
        self.push("mul", value, Op::Mul { a, b })
    }

    /// Elementwise product with a constant of the same length.
    pub fn mul_const(&mut self, a: Var, c: Vec<T>) -> Result<Var> {
        if c.len() != self.value(a).numel() {
            return Err(LlipError::Dimension(format!(
                "mul_const length {} vs {:?}",
                c.len(),
                self.shape(a)
            )));
        }
        let out: Vec<T> = self.data(a).iter().zip(&c).map(|(x, y)| *x * *y).collect();
        let value = self.out(&self.shape(a).to_vec(), out, &[a]);
        self.push("mul_const", value, Op::MulConst { a, c })
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out: Vec<T> = self.data(a).iter().map(|x| *x * c).collect();
        let value = self.out(&self.shape(a).to_vec(), out, &[a]);
        self.push("scale", value, Op::Scale { a, c })
    }

    /// `a * s` for a one-element `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(LlipError::Dimension("scale_by expects a scalar".into()));
        }
        let sv = self.data(s)[0];
        let out: Vec<T> = self.data(a).iter().map(|x| *x * sv).collect();
        let value = self.out(&self.shape(a).to_vec(), out, &[a, s]);
        self.push("scale_by", value, Op::ScaleByVar { a, s })
    }

    /// `a + s` for a one-element `s`.
    pub fn add_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(LlipError::Dimension("add_scalar expects a scalar".into()));
        }
        let sv = self.data(s)[0];
        let out: Vec<T> = self.data(a).iter().map(|x| *x + sv).collect();
        let value = self.out(&self.shape(a).to_vec(), out, &[a, s]);
        self.push("add_scalar", value, Op::AddScalarVar { a, s })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out: Vec<T> = self.data(a).iter().map(|x| x.exp()).collect();
        let value = self.out(&self.shape(a).to_vec(), out, &[a]);
        self.push("exp", value, Op::Exp { a })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let xd = self.data(a);
        let mut out = vec![T::zero(); xd.len()];
        let mut slope = vec![T::zero(); xd.len()];
        T::gelu_slice(xd, &mut out, &mut slope);
        let value = self.out(&self.shape(a).to_vec(), out, &[a]);
        self.push("gelu", value, Op::Gelu { a, slope })
    }

    /// Per-vector standardization over the last axis followed by `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (rows, d) = rows_cols(&shape);
        if shape.is_empty() || self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(LlipError::Dimension(format!(
                "layer_norm over {:?} with gain {:?} bias {:?}",
                shape,
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let eps = T::lit(1e-5);
        let dn = T::from_usize(d).unwrap();
        let xd = self.data(x);
        let g = self.data(gain);
        let bv = self.data(bias);
        let mut out = vec![T::zero(); rows * d];
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mu = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|v| (*v - mu) * (*v - mu)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            let o = &mut out[r * d..(r + 1) * d];
            for c in 0..d {
                o[c] = (row[c] - mu) * rs * g[c] + bv[c];
            }
            mean.push(mu);
            rstd.push(rs);
        }
        let value = self.out(&shape, out, &[x, gain, bias]);
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            },
        )
    }

    /// Softmax over the last axis of `tau · logits`.
    ///
    /// With `causal`, the trailing two axes are a square `[query, key]` grid and
    /// keys after the query position get zero weight.
    pub fn softmax(&mut self, a: Var, tau: T, causal: bool) -> Result<Var> {
        if !(tau > T::zero()) || !tau.is_finite() {
            return Err(LlipError::Parameter(format!("softmax temperature must be > 0, got {}", tau)));
        }
        let shape = self.shape(a).to_vec();
        let (rows, d) = rows_cols(&shape);
        if shape.is_empty() || d == 0 {
            return Err(LlipError::Dimension(format!("softmax over {:?}", shape)));
        }
        let q = if causal {
            if shape.len() < 2 || shape[shape.len() - 2] != d {
                return Err(LlipError::Dimension(format!("causal softmax needs square trailing axes, got {:?}", shape)));
            }
            d
        } else {
            1
        };
        let xd = self.data(a);
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let limit = if causal { r % q + 1 } else { d };
            let row = &xd[r * d..r * d + limit];
            let mx = row.iter().fold(T::neg_infinity(), |m, v| m.max(tau * *v));
            let o = &mut out[r * d..r * d + limit];
            for (oc, xc) in o.iter_mut().zip(row) {
                *oc = tau * *xc - mx;
            }
            T::exp_in_place(o);
            let total: T = o.iter().copied().sum();
            for oc in o.iter_mut() {
                *oc = *oc / total;
            }
        }
        let value = self.out(&shape, out, &[a]);
        self.push("softmax", value, Op::Softmax { a, tau })
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (rows, d) = rows_cols(&shape);
        let xd = self.data(a);
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mx = row.iter().fold(T::neg_infinity(), |m, v| m.max(*v));
            let lse = mx + row.iter().map(|v| (*v - mx).exp()).sum::<T>().ln();
            for c in 0..d {
                out[r * d + c] = row[c] - lse;
            }
        }
        let value = self.out(&shape, out, &[a]);
        self.push("log_softmax", value, Op::LogSoftmax { a })
    }

    /// Scales every last-axis vector to unit L2 norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (rows, d) = rows_cols(&shape);
        let xd = self.data(a);
        let mut out = vec![T::zero(); rows * d];
        let mut norms = Vec::with_capacity(rows);
        let floor = T::lit(1e-12);
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let nrm = row.iter().map(|v| *v * *v).sum::<T>().sqrt();
            if !(nrm > floor) {
                return Err(LlipError::DegenerateInput(format!(
                    "vector {} has norm {} (≤ 1e-12)",
                    r, nrm
                )));
            }
            for c in 0..d {
                out[r * d + c] = row[c] / nrm;
            }
            norms.push(nrm);
        }
        let value = self.out(&shape, out, &[a]);
        self.push("l2_normalize", value, Op::L2Normalize { a, norms })
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        let out: Vec<T> = self.data(a).iter().map(|&x| log_sigmoid_scalar(x)).collect();
        let value = self.out(&self.shape(a).to_vec(), out, &[a]);
        self.push("log_sigmoid", value, Op::LogSigmoid { a })
    }

    /// Sum of all elements as a 0-d tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().copied().sum::<T>();
        let value = self.out(&[], vec![s], &[a]);
        self.push("sum", value, Op::Sum { a })
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(LlipError::Dimension(format!("mean over axis {} of {:?}", axis, shape)));
        }
        let (pre, len, post) = axis_split(&shape, axis);
        let xd = self.data(a);
        let inv = T::one() / T::from_usize(len).unwrap();
        let mut out = vec![T::zero(); pre * post];
        for p in 0..pre {
            let o = &mut out[p * post..(p + 1) * post];
            for l in 0..len {
                let src = &xd[(p * len + l) * post..(p * len + l + 1) * post];
                for (oc, s) in o.iter_mut().zip(src) {
                    *oc = *oc + *s;
                }
            }
            o.iter_mut().for_each(|v| *v = *v * inv);
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let value = self.out(&out_shape, out, &[a]);
        self.push("mean_axis", value, Op::MeanAxis { a, pre, len, post })
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&x| x >= shape.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(LlipError::Dimension(format!("permute {:?} by {:?}", shape, axes)));
        }
        let out = permute_data(self.data(a), &shape, axes);
        let out_shape: Vec<usize> = axes.iter().map(|&x| shape[x]).collect();
        let value = self.out(&out_shape, out, &[a]);
        self.push("permute", value, Op::Permute { a, axes: axes.to_vec() })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(LlipError::Dimension(format!(
                "reshape {:?} into {:?}",
                self.shape(a),
                shape
            )));
        }
        let mut value = self.value(a).view(shape);
        value.requires_grad = self.needs(a);
        self.nodes.push(Node { value, op: Op::Reshape { a } });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `[start, start+len)` along `axis`.
    pub fn slice_axis(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(LlipError::Dimension(format!(
                "slice {}..{} on axis {} of {:?}",
                start,
                start + len,
                axis,
                shape
            )));
        }
        let (pre, extent, post) = axis_split(&shape, axis);
        let xd = self.data(a);
        let mut out = Vec::with_capacity(pre * len * post);
        for p in 0..pre {
            let base = (p * extent + start) * post;
            out.extend_from_slice(&xd[base..base + len * post]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let value = self.out(&out_shape, out, &[a]);
        self.push(
            "slice_axis",
            value,
            Op::SliceAxis {
                a,
                pre,
                extent,
                start,
                len,
                post,
            },
        )
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa.iter().zip(&sb).enumerate().all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(LlipError::Dimension(format!(
                "concat {:?} with {:?} on axis {}",
                sa, sb, axis
            )));
        }
        let (pre, la, post) = axis_split(&sa, axis);
        let lb = sb[axis];
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(pre * (la + lb) * post);
        for p in 0..pre {
            out.extend_from_slice(&ad[p * la * post..(p + 1) * la * post]);
            out.extend_from_slice(&bd[p * lb * post..(p + 1) * lb * post]);
        }
        let mut out_shape = sa.clone();
        out_shape[axis] = la + lb;
        let value = self.out(&out_shape, out, &[a, b]);
        self.push(
            "concat",
            value,
            Op::Concat {
                a,
                b,
                pre,
                la,
                lb,
                post,
            },
        )
    }

    /// Inserts a new axis at `axis` holding `n` copies.
    pub fn repeat_axis(&mut self, a: Var, axis: usize, n: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis > shape.len() {
            return Err(LlipError::Dimension(format!("repeat at axis {} of {:?}", axis, shape)));
        }
        let pre: usize = shape[..axis].iter().product();
        let post: usize = shape[axis..].iter().product();
        let xd = self.data(a);
        let mut out = Vec::with_capacity(pre * n * post);
        for p in 0..pre {
            for _ in 0..n {
                out.extend_from_slice(&xd[p * post..(p + 1) * post]);
            }
        }
        let mut out_shape = shape.clone();
        out_shape.insert(axis, n);
        let value = self.out(&out_shape, out, &[a]);
        self.push("repeat_axis", value, Op::RepeatAxis { a, pre, n, post })
    }

    /// Rows of a 2-D `table` selected by `ids`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(LlipError::Dimension(format!("gather from {:?}", shape)));
        }
        let (r, d) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= r) {
            return Err(LlipError::Dimension(format!("row {} out of {} rows", bad, r)));
        }
        let td = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let value = self.out(&[ids.len(), d], out, &[table]);
        self.push(
            "gather_rows",
            value,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// `out[i, j] = z[i, j, :] · t[j, :]`.
    pub fn pairwise_dot(&mut self, z: Var, t: Var) -> Result<Var> {
        let sz = self.shape(z).to_vec();
        let st = self.shape(t).to_vec();
        if sz.len() != 3 || st.len() != 2 || sz[1] != st[0] || sz[2] != st[1] {
            return Err(LlipError::Dimension(format!(
                "pairwise dot of {:?} with {:?}",
                sz, st
            )));
        }
        let (ni, nt, d) = (sz[0], sz[1], sz[2]);
        let (zd, td) = (self.data(z), self.data(t));
        let mut out = vec![T::zero(); ni * nt];
        for i in 0..ni {
            for j in 0..nt {
                let zr = &zd[(i * nt + j) * d..(i * nt + j + 1) * d];
                let tr = &td[j * d..(j + 1) * d];
                out[i * nt + j] = zr.iter().zip(tr).map(|(x, y)| *x * *y).sum();
            }
        }
        self.count_macs(ni * nt * d);
        let value = self.out(&[ni, nt], out, &[z, t]);
        self.push("pairwise_dot", value, Op::PairwiseDot { z, t, ni, nt, d })
    }

    /// Reverse sweep from a one-element `loss`. Gradients are retained for
    /// leaves only.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(LlipError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].value.requires_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match self.nodes[idx].op {
                Op::Leaf => grads[idx] = Some(g),
                // a reshape hands its gradient through unchanged
                Op::Reshape { a } if grads[a.0].is_none() => grads[a.0] = Some(g),
                _ => self.backprop_node(idx, &g, &mut grads),
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        // Accumulation buffer for an input that needs gradient.
        macro_rules! buf {
            ($v:expr) => {{
                let v: Var = $v;
                let n = self.nodes[v.0].value.numel();
                grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::Linear { a, w, bias } => {
                let (rows, k) = rows_cols(self.shape(*a));
                let n = self.shape(*w)[1];
                if self.needs(*a) {
                    gemm(rows, n, k, g, false, self.data(*w), true, buf!(*a), true);
                }
                if self.needs(*w) {
                    gemm(k, rows, n, self.data(*a), true, g, false, buf!(*w), true);
                }
                if self.needs(*bias) {
                    let db = buf!(*bias);
                    for row in g.chunks_exact(n) {
                        db.iter_mut().zip(row).for_each(|(d, s)| *d = *d + *s);
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (rows, k) = rows_cols(self.shape(*a));
                let n = self.shape(*b)[1];
                if self.needs(*a) {
                    let bd = self.data(*b);
                    gemm(rows, n, k, g, false, bd, true, buf!(*a), true);
                }
                if self.needs(*b) {
                    let ad = self.data(*a);
                    gemm(k, rows, n, ad, true, g, false, buf!(*b), true);
                }
            }
            Op::Bmm {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
                a_shared,
                b_shared,
            } => {
                let (m, k, n) = (*m, *k, *n);
                if self.needs(*a) {
                    let bd = self.data(*b);
                    let da = buf!(*a);
                    for bi in 0..*batch {
                        let ao = if *a_shared { 0 } else { bi * m * k };
                        let bo = if *b_shared { 0 } else { bi * k * n };
                        gemm(
                            m,
                            n,
                            k,
                            &g[bi * m * n..(bi + 1) * m * n],
                            false,
                            &bd[bo..bo + k * n],
                            !*trans_b,
                            &mut da[ao..ao + m * k],
                            true,
                        );
                    }
                }
                if self.needs(*b) {
                    let ad = self.data(*a);
                    let db = buf!(*b);
                    for bi in 0..*batch {
                        let ao = if *a_shared { 0 } else { bi * m * k };
                        let bo = if *b_shared { 0 } else { bi * k * n };
                        let gb = &g[bi * m * n..(bi + 1) * m * n];
                        if *trans_b {
                            gemm(n, m, k, gb, true, &ad[ao..ao + m * k], false, &mut db[bo..bo + k * n], true);
                        } else {
                            gemm(k, m, n, &ad[ao..ao + m * k], true, gb, false, &mut db[bo..bo + k * n], true);
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        accumulate(&mut grads[v.0], g);
                    }
                }
            }
            Op::AddBroadcast { a, b } => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], g);
                }
                if self.needs(*b) {
                    let db = buf!(*b);
                    let period = db.len();
                    for chunk in g.chunks(period) {
                        db.iter_mut().zip(chunk).for_each(|(d, s)| *d = *d + *s);
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let bd = self.data(*b);
                    buf!(*a)
                        .iter_mut()
                        .zip(g.iter().zip(bd))
                        .for_each(|(d, (s, o))| *d = *d + *s * *o);
                }
                if self.needs(*b) {
                    let ad = self.data(*a);
                    buf!(*b)
                        .iter_mut()
                        .zip(g.iter().zip(ad))
                        .for_each(|(d, (s, o))| *d = *d + *s * *o);
                }
            }
            Op::MulConst { a, c } => {
                if self.needs(*a) {
                    buf!(*a)
                        .iter_mut()
                        .zip(g.iter().zip(c))
                        .for_each(|(d, (s, o))| *d = *d + *s * *o);
                }
            }
            Op::Scale { a, c } => {
                if self.needs(*a) {
                    buf!(*a).iter_mut().zip(g).for_each(|(d, s)| *d = *d + *s * *c);
                }
            }
            Op::ScaleByVar { a, s } => {
                let sv = self.data(*s)[0];
                if self.needs(*a) {
                    buf!(*a).iter_mut().zip(g).for_each(|(d, gs)| *d = *d + *gs * sv);
                }
                if self.needs(*s) {
                    let ad = self.data(*a);
                    let total: T = g.iter().zip(ad).map(|(x, y)| *x * *y).sum();
                    let ds = buf!(*s);
                    ds[0] = ds[0] + total;
                }
            }
            Op::AddScalarVar { a, s } => {
                if self.needs(*a) {
                    buf!(*a).iter_mut().zip(g).for_each(|(d, gs)| *d = *d + *gs);
                }
                if self.needs(*s) {
                    let total: T = g.iter().copied().sum();
                    let ds = buf!(*s);
                    ds[0] = ds[0] + total;
                }
            }
            Op::Exp { a } => {
                if self.needs(*a) {
                    buf!(*a)
                        .iter_mut()
                        .zip(g.iter().zip(y))
                        .for_each(|(d, (s, e))| *d = *d + *s * *e);
                }
            }
            Op::Gelu { a, slope } => {
                if self.needs(*a) {
                    buf!(*a)
                        .iter_mut()
                        .zip(g.iter().zip(slope))
                        .for_each(|(d, (s, k))| *d = *d + *s * *k);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let (rows, d) = rows_cols(self.shape(*x));
                let xd = self.data(*x);
                let gv = self.data(*gain);
                let dn = T::from_usize(d).unwrap();
                let (need_g, need_b, need_x) = (self.needs(*gain), self.needs(*bias), self.needs(*x));
                let mut dg = need_g.then(|| grads[gain.0].take().unwrap_or_else(|| vec![T::zero(); d]));
                let mut db = need_b.then(|| grads[bias.0].take().unwrap_or_else(|| vec![T::zero(); d]));
                let mut dx = need_x.then(|| grads[x.0].take().unwrap_or_else(|| vec![T::zero(); rows * d]));
                let mut xhat = vec![T::zero(); d];
                let mut dxhat = vec![T::zero(); d];
                for r in 0..rows {
                    let (xr, gr) = (&xd[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                    for c in 0..d {
                        xhat[c] = (xr[c] - mean[r]) * rstd[r];
                    }
                    if let Some(dg) = dg.as_mut() {
                        for c in 0..d {
                            dg[c] = dg[c] + gr[c] * xhat[c];
                        }
                    }
                    if let Some(db) = db.as_mut() {
                        for c in 0..d {
                            db[c] = db[c] + gr[c];
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for c in 0..d {
                            dxhat[c] = gr[c] * gv[c];
                            s1 = s1 + dxhat[c];
                            s2 = s2 + dxhat[c] * xhat[c];
                        }
                        s1 = s1 / dn;
                        s2 = s2 / dn;
                        let dr = &mut dx[r * d..(r + 1) * d];
                        for c in 0..d {
                            dr[c] = dr[c] + rstd[r] * (dxhat[c] - s1 - xhat[c] * s2);
                        }
                    }
                }
                grads[gain.0] = dg.or(grads[gain.0].take());
                grads[bias.0] = db.or(grads[bias.0].take());
                grads[x.0] = dx.or(grads[x.0].take());
            }
            Op::Softmax { a, tau } => {
                if self.needs(*a) {
                    let (rows, d) = rows_cols(self.shape(*a));
                    let da = buf!(*a);
                    for r in 0..rows {
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: T = yr.iter().zip(gr).map(|(p, q)| *p * *q).sum();
                        for c in 0..d {
                            da[r * d + c] = da[r * d + c] + *tau * yr[c] * (gr[c] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax { a } => {
                if self.needs(*a) {
                    let (rows, d) = rows_cols(self.shape(*a));
                    let da = buf!(*a);
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let total: T = gr.iter().copied().sum();
                        for c in 0..d {
                            da[r * d + c] = da[r * d + c] + gr[c] - y[r * d + c].exp() * total;
                        }
                    }
                }
            }
            Op::L2Normalize { a, norms } => {
                if self.needs(*a) {
                    let (rows, d) = rows_cols(self.shape(*a));
                    let da = buf!(*a);
                    for r in 0..rows {
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: T = yr.iter().zip(gr).map(|(p, q)| *p * *q).sum();
                        for c in 0..d {
                            da[r * d + c] = da[r * d + c] + (gr[c] - yr[c] * dot) / norms[r];
                        }
                    }
                }
            }
            Op::LogSigmoid { a } => {
                if self.needs(*a) {
                    let xd = self.data(*a);
                    buf!(*a)
                        .iter_mut()
                        .zip(g.iter().zip(xd))
                        .for_each(|(d, (s, x))| *d = *d + *s * sigmoid_scalar(-*x));
                }
            }
            Op::Sum { a } => {
                if self.needs(*a) {
                    let g0 = g[0];
                    buf!(*a).iter_mut().for_each(|d| *d = *d + g0);
                }
            }
            Op::MeanAxis { a, pre, len, post } => {
                if self.needs(*a) {
                    let inv = T::one() / T::from_usize(*len).unwrap();
                    let da = buf!(*a);
                    for p in 0..*pre {
                        let gs = &g[p * post..(p + 1) * post];
                        for l in 0..*len {
                            let dst = &mut da[(p * len + l) * post..(p * len + l + 1) * post];
                            dst.iter_mut().zip(gs).for_each(|(d, s)| *d = *d + *s * inv);
                        }
                    }
                }
            }
            Op::Permute { a, axes } => {
                if self.needs(*a) {
                    let mut inv = vec![0usize; axes.len()];
                    for (i, &ax) in axes.iter().enumerate() {
                        inv[ax] = i;
                    }
                    let back = permute_data(g, node.value.shape(), &inv);
                    accumulate_owned(&mut grads[a.0], back);
                }
            }
            Op::Reshape { a } => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], g);
                }
            }
            Op::SliceAxis {
                a,
                pre,
                extent,
                start,
                len,
                post,
            } => {
                if self.needs(*a) {
                    let da = buf!(*a);
                    for p in 0..*pre {
                        let base = (p * extent + start) * post;
                        let src = &g[p * len * post..(p + 1) * len * post];
                        da[base..base + len * post]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, s)| *d = *d + *s);
                    }
                }
            }
            Op::Concat {
                a,
                b,
                pre,
                la,
                lb,
                post,
            } => {
                let w = (la + lb) * post;
                if self.needs(*a) {
                    let da = buf!(*a);
                    for p in 0..*pre {
                        da[p * la * post..(p + 1) * la * post]
                            .iter_mut()
                            .zip(&g[p * w..p * w + la * post])
                            .for_each(|(d, s)| *d = *d + *s);
                    }
                }
                if self.needs(*b) {
                    let db = buf!(*b);
                    for p in 0..*pre {
                        db[p * lb * post..(p + 1) * lb * post]
                            .iter_mut()
                            .zip(&g[p * w + la * post..(p + 1) * w])
                            .for_each(|(d, s)| *d = *d + *s);
                    }
                }
            }
            Op::RepeatAxis { a, pre, n, post } => {
                if self.needs(*a) {
                    let da = buf!(*a);
                    for p in 0..*pre {
                        let dst = &mut da[p * post..(p + 1) * post];
                        for r in 0..*n {
                            let src = &g[(p * n + r) * post..(p * n + r + 1) * post];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d = *d + *s);
                        }
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                if self.needs(*table) {
                    let d = self.shape(*table)[1];
                    let dt = buf!(*table);
                    for (row, &i) in ids.iter().enumerate() {
                        dt[i * d..(i + 1) * d]
                            .iter_mut()
                            .zip(&g[row * d..(row + 1) * d])
                            .for_each(|(dd, s)| *dd = *dd + *s);
                    }
                }
            }
            Op::PairwiseDot { z, t, ni, nt, d } => {
                let (ni, nt, d) = (*ni, *nt, *d);
                if self.needs(*z) {
                    let td = self.data(*t);
                    let dz = buf!(*z);
                    for i in 0..ni {
                        for j in 0..nt {
                            let s = g[i * nt + j];
                            let dst = &mut dz[(i * nt + j) * d..(i * nt + j + 1) * d];
                            dst.iter_mut()
                                .zip(&td[j * d..(j + 1) * d])
                                .for_each(|(dd, tv)| *dd = *dd + s * *tv);
                        }
                    }
                }
                if self.needs(*t) {
                    let zd = self.data(*z);
                    let dt = buf!(*t);
                    for i in 0..ni {
                        for j in 0..nt {
                            let s = g[i * nt + j];
                            let src = &zd[(i * nt + j) * d..(i * nt + j + 1) * d];
                            dt[j * d..(j + 1) * d]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(dd, zv)| *dd = *dd + s * *zv);
                        }
                    }
                }
            }
        }
    }
}
