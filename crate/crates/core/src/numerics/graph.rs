//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node to the tape, so node order is already a
//! topological order. `backward` walks the tape once in reverse.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Matmul(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        groups: usize,
    },
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Concat(Vec<Var>),
    Sum(Var),
    Mean(Var),
    Max(Var, usize),
    Softmax(Var),
    Reshape(Var),
    Transpose(Var),
    Gather(Var, Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Record of executed primitive ops. Confined to the thread that builds it.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    /// Accumulated gradients of gradient-carrying leaves, indexed like `nodes`.
    leaf_grads: Vec<Option<Vec<f64>>>,
}

fn check_finite(op: &'static str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `c[m×n] = a[m×k] · b[k×n]`, accumulated into `c`.
fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

fn transpose2(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
struct ConvDims {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k_h: usize,
    k_w: usize,
    stride: usize,
    groups: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvDims {
    fn in_per_group(&self) -> usize {
        self.c_in / self.groups
    }
    fn out_per_group(&self) -> usize {
        self.c_out / self.groups
    }
}

/// Unfolds group `grp` of `input` into a `(cig·kh·kw) × plane` matrix.
fn im2col(input: &[f64], d: &ConvDims, grp: usize) -> Vec<f64> {
    let plane = d.h_out * d.w_out;
    let cig = d.in_per_group();
    let mut cols = vec![0.0; cig * d.k_h * d.k_w * plane];
    for ci in 0..cig {
        let c = grp * cig + ci;
        for ky in 0..d.k_h {
            for kx in 0..d.k_w {
                let r = (ci * d.k_h + ky) * d.k_w + kx;
                let dst = &mut cols[r * plane..(r + 1) * plane];
                for oy in 0..d.h_out {
                    let src = (c * d.h + oy * d.stride + ky) * d.w + kx;
                    let drow = &mut dst[oy * d.w_out..(oy + 1) * d.w_out];
                    for (ox, v) in drow.iter_mut().enumerate() {
                        *v = input[src + ox * d.stride];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds an unfolded gradient of group `grp` back onto `d_input`.
fn col2im_acc(cols: &[f64], d: &ConvDims, grp: usize, d_input: &mut [f64]) {
    let plane = d.h_out * d.w_out;
    let cig = d.in_per_group();
    for ci in 0..cig {
        let c = grp * cig + ci;
        for ky in 0..d.k_h {
            for kx in 0..d.k_w {
                let r = (ci * d.k_h + ky) * d.k_w + kx;
                let src = &cols[r * plane..(r + 1) * plane];
                for oy in 0..d.h_out {
                    let dst = (c * d.h + oy * d.stride + ky) * d.w + kx;
                    let srow = &src[oy * d.w_out..(oy + 1) * d.w_out];
                    for (ox, v) in srow.iter().enumerate() {
                        d_input[dst + ox * d.stride] += v;
                    }
                }
            }
        }
    }
}

fn conv_forward(input: &[f64], kernel: &[f64], bias: Option<&[f64]>, d: &ConvDims) -> Vec<f64> {
    let plane = d.h_out * d.w_out;
    let mut out = vec![0.0; d.c_out * plane];
    if let Some(b) = bias {
        for (o, dst) in out.chunks_mut(plane).enumerate() {
            dst.iter_mut().for_each(|v| *v = b[o]);
        }
    }
    let (opg, ckk) = (d.out_per_group(), d.in_per_group() * d.k_h * d.k_w);
    for grp in 0..d.groups {
        let cols = im2col(input, d, grp);
        let k = &kernel[grp * opg * ckk..(grp + 1) * opg * ckk];
        let dst = &mut out[grp * opg * plane..(grp + 1) * opg * plane];
        gemm_acc(k, &cols, dst, opg, ckk, plane);
    }
    out
}

fn conv_backward(
    input: &[f64],
    kernel: &[f64],
    d_out: &[f64],
    d: &ConvDims,
    mut d_input: Option<&mut [f64]>,
    mut d_kernel: Option<&mut [f64]>,
    d_bias: Option<&mut [f64]>,
) {
    let plane = d.h_out * d.w_out;
    if let Some(db) = d_bias {
        for (o, go) in d_out.chunks(plane).enumerate() {
            db[o] += go.iter().sum::<f64>();
        }
    }
    let (opg, ckk) = (d.out_per_group(), d.in_per_group() * d.k_h * d.k_w);
    for grp in 0..d.groups {
        let go = &d_out[grp * opg * plane..(grp + 1) * opg * plane];
        if let Some(dk) = d_kernel.as_deref_mut() {
            let cols_t = transpose2(&im2col(input, d, grp), ckk, plane);
            let dst = &mut dk[grp * opg * ckk..(grp + 1) * opg * ckk];
            gemm_acc(go, &cols_t, dst, opg, plane, ckk);
        }
        if let Some(di) = d_input.as_deref_mut() {
            let k_t = transpose2(&kernel[grp * opg * ckk..(grp + 1) * opg * ckk], opg, ckk);
            let mut dcols = vec![0.0; ckk * plane];
            gemm_acc(&k_t, go, &mut dcols, ckk, opg, plane);
            col2im_acc(&dcols, d, grp, di);
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf. It carries gradient iff `t` does.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a gradient-carrying leaf regardless of `t`'s flag.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Constant, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.push(Vec::new(), vec![value], Op::Constant, false)
    }

    pub fn vector(&mut self, values: Vec<f64>) -> Result<Var> {
        check_finite("vector", &values)?;
        if values.is_empty() {
            return Err(Error::Empty { op: "vector" });
        }
        let n = values.len();
        Ok(self.push(vec![n], values, Op::Constant, false))
    }

    /// Copy of `v` that no gradient flows through.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = self.node(v);
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn item(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(&n.shape, n.value.clone()).expect("graph values are validated on creation")
    }

    /// Accumulated gradient of a gradient-carrying leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn binary_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (na, nb) = (self.value(a).len(), self.value(b).len());
        if sa == sb || nb == 1 {
            Ok(sa.to_vec())
        } else if na == 1 {
            Ok(sb.to_vec())
        } else {
            Err(Error::shape(op, format!("{sa:?} vs {sb:?}")))
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let shape = self.binary_shape(name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let n = va.len().max(vb.len());
        let value: Vec<f64> = (0..n)
            .map(|i| f(va[i % va.len()], vb[i % vb.len()]))
            .collect();
        check_finite(name, &value)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let value: Vec<f64> = self.value(a).iter().map(|&x| f(x)).collect();
        check_finite(name, &value)?;
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(shape, value, op, rg))
    }

    /// `c · a` for a constant `c`.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, |x| c * x, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("offset", a, |x| x + c, Op::Offset(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(
            "sigmoid",
            a,
            |x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            },
            Op::Sigmoid(a),
        )
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    /// `|a|` as `relu(a) + relu(-a)`.
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let pos = self.relu(a)?;
        let na = self.neg(a)?;
        let neg = self.relu(na)?;
        self.add(pos, neg)
    }

    /// `log(1 + e^a)` evaluated as `max(a, 0) + log(1 + e^{-|a|})`.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let hinge = self.relu(a)?;
        let mag = self.abs(a)?;
        let nm = self.neg(mag)?;
        let e = self.exp(nm)?;
        let e1 = self.offset(e, 1.0)?;
        let tail = self.log(e1)?;
        self.add(hinge, tail)
    }

    /// Elementwise `min(a, b)` as `a - relu(a - b)`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let r = self.relu(d)?;
        self.sub(a, r)
    }

    /// Elementwise `max(a, b)` as `b + relu(a - b)`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let r = self.relu(d)?;
        self.add(b, r)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut value = vec![0.0; m * n];
        gemm_acc(self.value(a), self.value(b), &mut value, m, k, n);
        check_finite("matmul", &value)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], value, Op::Matmul(a, b), rg))
    }

    fn conv_dims(&self, input: Var, kernel: Var, stride: usize, groups: usize) -> Result<ConvDims> {
        let (si, sk) = (self.shape(input), self.shape(kernel));
        if si.len() != 3 || sk.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("expected CHW input and OCKK kernel, got {si:?} and {sk:?}"),
            ));
        }
        if stride == 0 || groups == 0 {
            return Err(Error::shape("conv2d", "stride and groups must be positive"));
        }
        let (c_in, h, w) = (si[0], si[1], si[2]);
        let (c_out, cig, k_h, k_w) = (sk[0], sk[1], sk[2], sk[3]);
        if c_in % groups != 0 || c_out % groups != 0 || cig * groups != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("channels: input {c_in}, kernel {sk:?}, groups {groups}"),
            ));
        }
        if k_h > h || k_w > w {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {k_h}x{k_w} larger than input {h}x{w}"),
            ));
        }
        Ok(ConvDims {
            c_in,
            h,
            w,
            c_out,
            k_h,
            k_w,
            stride,
            groups,
            h_out: (h - k_h) / stride + 1,
            w_out: (w - k_w) / stride + 1,
        })
    }

    /// Valid (unpadded) 2-D convolution of a `C×H×W` input with an
    /// `O×(C/groups)×K×K` kernel. Output extent is `(in - k) / stride + 1`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        groups: usize,
    ) -> Result<Var> {
        let d = self.conv_dims(input, kernel, stride, groups)?;
        if let Some(b) = bias {
            if self.value(b).len() != d.c_out {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias of {} for {} outputs", self.value(b).len(), d.c_out),
                ));
            }
        }
        let value = conv_forward(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            &d,
        );
        check_finite("conv2d", &value)?;
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(
            vec![d.c_out, d.h_out, d.w_out],
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                groups,
            },
            rg,
        ))
    }

    /// Concatenation along the leading axis. Scalars count as length-1 vectors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty { op: "concat" });
        }
        let norm = |s: &[usize]| -> Vec<usize> {
            if s.is_empty() {
                vec![1]
            } else {
                s.to_vec()
            }
        };
        let first = norm(self.shape(parts[0]));
        let mut lead = 0;
        let mut value = Vec::new();
        for &p in parts {
            let s = norm(self.shape(p));
            if s[1..] != first[1..] {
                return Err(Error::shape("concat", format!("{first:?} vs {s:?}")));
            }
            lead += s[0];
            value.extend_from_slice(self.value(p));
        }
        let mut shape = first;
        shape[0] = lead;
        let rg = self.rg(parts);
        Ok(self.push(shape, value, Op::Concat(parts.to_vec()), rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).iter().sum();
        check_finite("sum", &[s])?;
        let rg = self.rg(&[a]);
        Ok(self.push(Vec::new(), vec![s], Op::Sum(a), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        check_finite("mean", &[m])?;
        let rg = self.rg(&[a]);
        Ok(self.push(Vec::new(), vec![m], Op::Mean(a), rg))
    }

    /// Maximum over all elements. Gradient flows to the first maximal element.
    pub fn max(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let mut best = 0;
        for (i, &x) in v.iter().enumerate() {
            if x > v[best] {
                best = i;
            }
        }
        let m = v[best];
        let rg = self.rg(&[a]);
        Ok(self.push(Vec::new(), vec![m], Op::Max(a, best), rg))
    }

    /// Softmax along the last axis, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let v = self.value(a);
        check_finite("softmax", v)?;
        let n = *shape.last().unwrap_or(&1);
        let mut value = vec![0.0; v.len()];
        for (src, dst) in v.chunks(n).zip(value.chunks_mut(n)) {
            let m = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (s - m).exp();
                z += *d;
            }
            dst.iter_mut().for_each(|d| *d /= z);
        }
        check_finite("softmax", &value)?;
        let rg = self.rg(&[a]);
        Ok(self.push(shape, value, Op::Softmax(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(a)),
            ));
        }
        let value = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(a), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("transpose", format!("expected 2-D, got {s:?}")));
        }
        let value = transpose2(self.value(a), s[0], s[1]);
        let rg = self.rg(&[a]);
        Ok(self.push(vec![s[1], s[0]], value, Op::Transpose(a), rg))
    }

    /// Selects flat positions of `a` into a 1-D tensor.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        if indices.is_empty() {
            return Err(Error::Empty { op: "gather" });
        }
        let v = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= v.len()) {
            return Err(Error::shape(
                "gather",
                format!("index {bad} out of range {}", v.len()),
            ));
        }
        let value: Vec<f64> = indices.iter().map(|&i| v[i]).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(
            vec![indices.len()],
            value,
            Op::Gather(a, indices.to_vec()),
            rg,
        ))
    }

    /// Reverse-mode pass from a scalar `loss`. Leaf gradients accumulate
    /// across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = self.node(loss);
        if root.value.len() != 1 {
            return Err(Error::NotScalar(root.shape.clone()));
        }
        if !root.requires_grad {
            return Err(Error::Detached);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let nodes = &self.nodes;
            let mut send = |v: Var, delta: Vec<f64>| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                match grads[v.0].as_mut() {
                    Some(acc) => add_into(acc, &delta),
                    None => grads[v.0] = Some(delta),
                }
            };
            let val = |v: Var| -> &[f64] { &nodes[v.0].value };
            // Reduces a broadcast gradient back onto an operand of length `n`.
            let fit = |delta: Vec<f64>, n: usize| -> Vec<f64> {
                if delta.len() == n {
                    delta
                } else {
                    vec![delta.iter().sum()]
                }
            };
            match &node.op {
                Op::Leaf => {
                    match self.leaf_grads[idx].as_mut() {
                        Some(acc) => add_into(acc, &g),
                        None => self.leaf_grads[idx] = Some(g),
                    }
                }
                Op::Constant => {}
                Op::Add(a, b) => {
                    let (na, nb) = (val(*a).len(), val(*b).len());
                    send(*a, fit(g.clone(), na));
                    send(*b, fit(g, nb));
                }
                Op::Sub(a, b) => {
                    let (na, nb) = (val(*a).len(), val(*b).len());
                    send(*a, fit(g.clone(), na));
                    send(*b, fit(g.iter().map(|x| -x).collect(), nb));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let da: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| gi * vb[i % vb.len()])
                        .collect();
                    let db: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| gi * va[i % va.len()])
                        .collect();
                    let (na, nb) = (va.len(), vb.len());
                    send(*a, fit(da, na));
                    send(*b, fit(db, nb));
                }
                Op::Div(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let da: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| gi / vb[i % vb.len()])
                        .collect();
                    let db: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| {
                            let y = vb[i % vb.len()];
                            -gi * va[i % va.len()] / (y * y)
                        })
                        .collect();
                    let (na, nb) = (va.len(), vb.len());
                    send(*a, fit(da, na));
                    send(*b, fit(db, nb));
                }
                Op::Scale(a, c) => send(*a, g.iter().map(|x| c * x).collect()),
                Op::Offset(a) => send(*a, g),
                Op::Matmul(a, b) => {
                    let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    if nodes[a.0].requires_grad {
                        let bt = transpose2(val(*b), k, n);
                        let mut da = vec![0.0; m * k];
                        gemm_acc(&g, &bt, &mut da, m, n, k);
                        send(*a, da);
                    }
                    if nodes[b.0].requires_grad {
                        let at = transpose2(val(*a), m, k);
                        let mut db = vec![0.0; k * n];
                        gemm_acc(&at, &g, &mut db, k, m, n);
                        send(*b, db);
                    }
                }
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    stride,
                    groups,
                } => {
                    let si = &nodes[input.0].shape;
                    let sk = &nodes[kernel.0].shape;
                    let d = ConvDims {
                        c_in: si[0],
                        h: si[1],
                        w: si[2],
                        c_out: sk[0],
                        k_h: sk[2],
                        k_w: sk[3],
                        stride: *stride,
                        groups: *groups,
                        h_out: node.shape[1],
                        w_out: node.shape[2],
                    };
                    let mut di =
                        nodes[input.0].requires_grad.then(|| vec![0.0; val(*input).len()]);
                    let mut dk =
                        nodes[kernel.0].requires_grad.then(|| vec![0.0; val(*kernel).len()]);
                    let mut db = bias
                        .filter(|b| nodes[b.0].requires_grad)
                        .map(|b| vec![0.0; val(b).len()]);
                    conv_backward(
                        val(*input),
                        val(*kernel),
                        &g,
                        &d,
                        di.as_deref_mut(),
                        dk.as_deref_mut(),
                        db.as_deref_mut(),
                    );
                    if let Some(di) = di {
                        send(*input, di);
                    }
                    if let Some(dk) = dk {
                        send(*kernel, dk);
                    }
                    if let (Some(b), Some(db)) = (bias, db) {
                        send(*b, db);
                    }
                }
                Op::Relu(a) => {
                    let va = val(*a);
                    send(
                        *a,
                        g.iter()
                            .zip(va)
                            .map(|(gi, x)| if *x > 0.0 { *gi } else { 0.0 })
                            .collect(),
                    );
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    send(*a, g.iter().zip(y).map(|(gi, s)| gi * s * (1.0 - s)).collect());
                }
                Op::Exp(a) => {
                    let y = &node.value;
                    send(*a, g.iter().zip(y).map(|(gi, e)| gi * e).collect());
                }
                Op::Log(a) => {
                    let va = val(*a);
                    send(*a, g.iter().zip(va).map(|(gi, x)| gi / x).collect());
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = val(*p).len();
                        send(*p, g[off..off + n].to_vec());
                        off += n;
                    }
                }
                Op::Sum(a) => send(*a, vec![g[0]; val(*a).len()]),
                Op::Mean(a) => {
                    let n = val(*a).len();
                    send(*a, vec![g[0] / n as f64; n]);
                }
                Op::Max(a, best) => {
                    let mut d = vec![0.0; val(*a).len()];
                    d[*best] = g[0];
                    send(*a, d);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let n = *node.shape.last().unwrap_or(&1);
                    let mut d = vec![0.0; y.len()];
                    for ((yr, gr), dr) in y.chunks(n).zip(g.chunks(n)).zip(d.chunks_mut(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((dv, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *dv = yv * (gv - dot);
                        }
                    }
                    send(*a, d);
                }
                Op::Reshape(a) => send(*a, g),
                Op::Transpose(a) => {
                    let s = &node.shape;
                    send(*a, transpose2(&g, s[0], s[1]));
                }
                Op::Gather(a, indices) => {
                    let mut d = vec![0.0; val(*a).len()];
                    for (gi, &i) in g.iter().zip(indices) {
                        d[i] += gi;
                    }
                    send(*a, d);
                }
            }
        }
        Ok(())
    }
}

/// Softmax of a plain vector, outside any graph.
pub fn softmax(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::Empty { op: "softmax" });
    }
    check_finite("softmax", values)?;
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = values.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / z).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        assert_eq!(softmax(&[-7.25]).unwrap(), vec![1.0]);
        let s = softmax(&[1.0, 2.0, 3.0]).unwrap();
        // e^{k}/(e+e^2+e^3) evaluated independently
        let z = 1f64.exp() + 2f64.exp() + 3f64.exp();
        for (k, v) in s.iter().enumerate() {
            assert_abs_diff_eq!(*v, ((k + 1) as f64).exp() / z, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(s[0], 0.0900, epsilon = 5e-5);
        assert_abs_diff_eq!(s[1], 0.2447, epsilon = 5e-5);
        assert_abs_diff_eq!(s[2], 0.6652, epsilon = 5e-5);
        assert!(softmax(&[]).is_err());
        assert!(softmax(&[1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn softmax_large_inputs_stay_finite() {
        let s = softmax(&[1000.0, 1000.0, -1000.0]).unwrap();
        assert_abs_diff_eq!(s[0], 0.5, epsilon = 1e-15);
        assert!(s[2] >= 0.0);
    }

    #[test]
    fn square_and_product_rules() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);

        let mut g = Graph::new();
        let x = g.param(&Tensor::scalar(2.0));
        let y = g.param(&Tensor::scalar(5.0));
        let z = g.mul(x, y).unwrap();
        g.backward(z).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[5.0]);
        assert_eq!(g.grad(y).unwrap(), &[2.0]);
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let mut g = Graph::new();
        let v = g.param(&Tensor::from_vec(vec![0.3, -1.2, 2.0, 0.0]).unwrap());
        let s = g.softmax(v).unwrap();
        let t = g.sum(s).unwrap();
        g.backward(t).unwrap();
        for d in g.grad(v).unwrap() {
            assert_abs_diff_eq!(*d, 0.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[12.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::from_vec(vec![1.0, 2.0]).unwrap());
        assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));
        let c = g.scalar(4.0);
        let d = g.mul(c, c).unwrap();
        assert!(matches!(g.backward(d), Err(Error::Detached)));
    }

    #[test]
    fn log_of_zero_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::scalar(0.0));
        assert!(matches!(g.log(x), Err(Error::NonFinite { .. })));
        let big = g.scalar(800.0);
        assert!(g.exp(big).is_err());
    }

    #[test]
    fn conv2d_examples() {
        let mut g = Graph::new();
        let input = g.constant(&Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let ones = g.constant(&Tensor::new(&[1, 1, 2, 2], vec![1.0; 4]).unwrap());
        let out = g.conv2d(input, ones, None, 1, 1).unwrap();
        assert_eq!(g.shape(out), &[1, 1, 1]);
        assert_eq!(g.value(out), &[10.0]);

        let ident = g.constant(&Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap());
        let same = g.conv2d(input, ident, None, 1, 1).unwrap();
        assert_eq!(g.value(same), g.value(input));

        let big = g.constant(&Tensor::zeros(&[2, 8, 8]));
        let k = g.constant(&Tensor::zeros(&[5, 2, 3, 3]));
        let o = g.conv2d(big, k, None, 1, 1).unwrap();
        assert_eq!(g.shape(o), &[5, 6, 6]);
        let o2 = g.conv2d(big, k, None, 2, 1).unwrap();
        assert_eq!(g.shape(o2), &[5, 3, 3]);

        let wrong = g.constant(&Tensor::zeros(&[5, 3, 3, 3]));
        assert!(g.conv2d(big, wrong, None, 1, 1).is_err());
        let huge = g.constant(&Tensor::zeros(&[1, 2, 9, 9]));
        assert!(g.conv2d(big, huge, None, 1, 1).is_err());
    }

    #[test]
    fn max_routes_gradient_to_first_maximum() {
        let mut g = Graph::new();
        let v = g.param(&Tensor::from_vec(vec![1.0, 3.0, 3.0, 0.0]).unwrap());
        let m = g.max(v).unwrap();
        assert_eq!(g.item(m), 3.0);
        g.backward(m).unwrap();
        assert_eq!(g.grad(v).unwrap(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn scalar_broadcast_gradients_sum() {
        let mut g = Graph::new();
        let v = g.param(&Tensor::from_vec(vec![1.0, 2.0, 3.0]).unwrap());
        let s = g.param(&Tensor::scalar(2.0));
        let p = g.mul(v, s).unwrap();
        let t = g.sum(p).unwrap();
        g.backward(t).unwrap();
        assert_eq!(g.grad(s).unwrap(), &[6.0]);
        assert_eq!(g.grad(v).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::scalar(3.0));
        let d = g.detach(x);
        let y = g.mul(x, d).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0]);
    }
}
