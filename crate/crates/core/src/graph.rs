//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every op applied during one forward pass. Calling
//! [`Graph::backward`] walks the tape in reverse and returns the gradient of a
//! scalar root with respect to every parameter and every grad-requiring input
//! leaf that the root depends on. Parameters pulled in through
//! [`Graph::param`] are cached, so a weight used at several sites (or across
//! several iterations) is a single leaf whose gradient sums every use.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Softmax { x: Var, axis: usize },
    MaskedSoftmax { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    InstanceNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Conv2d { x: Var, k: Var, geom: ConvGeom, cols: Option<Vec<f64>> },
    Upsample { x: Var, factor: usize },
    Reshape(Var),
    Transpose(Var),
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, rows: Vec<(usize, usize)>, probs: Vec<f64> },
    NllProbs { probs: Var, rows: Vec<(usize, usize)>, floor: f64 },
    RowNormalize { x: Var, sums: Vec<f64> },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// One forward recording.
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    record: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Smallest probability fed to `ln` in [`Graph::nll_probs`].
pub const PROB_FLOOR: f64 = 1e-12;

impl Graph {
    /// A recording graph: backward is available.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            record: true,
        }
    }

    /// Forward-only graph: nothing requires grad and no backward caches are
    /// kept.
    pub fn inference() -> Self {
        Graph {
            record: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Parameters referenced by this graph, in first-use order.
    pub fn params_used(&self) -> Vec<ParamId> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Param(id) => Some(id),
                _ => None,
            })
            .collect()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad: requires_grad && self.record,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by [`Graph::backward`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// The leaf for parameter `id`, created on first use.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: Arc::clone(&store.get(id).value),
            op: Op::Param(id),
            requires_grad: self.record,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    fn matrix_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::shape(format!("{what} needs a matrix, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, true)
    }

    fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (ar, ac) = self.matrix_dims(a, "matmul")?;
        let (br, bc) = self.matrix_dims(b, "matmul")?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            ta,
            self.value(b).data(),
            tb,
            &mut out,
            false,
        );
        kernels::count_macs((m * k * n) as u64);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b, ta, tb }, rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: shapes differ {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::from_parts(x.shape().to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let x = self.value(a);
        Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&p| f(p)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let t = self.zip_map(a, b, |p, q| p + q);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let t = self.zip_map(a, b, |p, q| p - q);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let t = self.zip_map(a, b, |p, q| p * q);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// `x[..×n] + b[n]`, broadcasting `b` over every row.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if self.shape(b) != [n] {
            return Err(Error::shape(format!(
                "row bias {:?} does not match last dim of {:?}",
                self.shape(b),
                self.shape(x)
            )));
        }
        let bias = self.value(b).data().to_vec();
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(n) {
            for (v, bv) in row.iter_mut().zip(&bias) {
                *v += bv;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(t, Op::AddRowBias(x, b), rg))
    }

    /// `x[C×H×W] + b[C]` per channel.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 || self.shape(b) != [s[0]] {
            return Err(Error::shape(format!(
                "channel bias {:?} does not match {:?}",
                self.shape(b),
                s
            )));
        }
        let hw = s[1] * s[2];
        let bias = self.value(b).data().to_vec();
        let mut t = self.value(x).clone();
        for (plane, bv) in t.data_mut().chunks_mut(hw).zip(&bias) {
            for v in plane {
                *v += bv;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(t, Op::AddChannelBias(x, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.map(x, |p| p * c);
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, c), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.map(x, |p| p.max(0.0));
        let rg = self.rg(x);
        self.push(t, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.map(x, sigmoid);
        let rg = self.rg(x);
        self.push(t, Op::Sigmoid(x), rg)
    }

    /// Softmax along `axis` with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::arg(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let (pre, len, post) = split_axis(&shape, axis);
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for p in 0..pre {
            for q in 0..post {
                kernels::softmax_strided(xv.data(), &mut out, p * len * post + q, len, post);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { x, axis }, rg))
    }

    /// Row softmax of a matrix where entries with `keep[r*cols + c] == false`
    /// are excluded (their probability is exactly zero and they take no part
    /// in the max or the normalizer).
    pub fn masked_softmax(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(x, "masked_softmax")?;
        if keep.len() != rows * cols {
            return Err(Error::shape(format!(
                "mask of {} entries for {rows}x{cols} scores",
                keep.len()
            )));
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let k = &keep[r * cols..(r + 1) * cols];
            if !k.iter().any(|&k| k) {
                return Err(Error::Contract(format!("attention row {r} is fully masked")));
            }
            let max = row
                .iter()
                .zip(k)
                .filter(|(_, &k)| k)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out[r * cols..(r + 1) * cols];
            let mut sum = 0.0;
            for c in 0..cols {
                if k[c] {
                    o[c] = (row[c] - max).exp();
                    sum += o[c];
                }
            }
            for v in o.iter_mut() {
                *v /= sum;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![rows, cols], out), Op::MaskedSoftmax { x }, rg))
    }

    /// Normalizes each row over the last axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let c = self.value(x).cols();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(format!(
                "layer_norm affine {:?}/{:?} vs last dim {c}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let rows = self.value(x).rows();
        let (out, xhat, rstd) = normalize_groups(
            self.value(x).data(),
            rows,
            c,
            eps,
            self.value(gamma).data(),
            self.value(beta).data(),
            false,
        );
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat: if rg { xhat } else { Vec::new() },
                rstd,
            },
            rg,
        ))
    }

    /// Per-channel normalization of a `C×H×W` map over its spatial extent.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || self.shape(gamma) != [s[0]] || self.shape(beta) != [s[0]] {
            return Err(Error::shape(format!(
                "instance_norm affine {:?} vs input {s:?}",
                self.shape(gamma)
            )));
        }
        let (out, xhat, rstd) = normalize_groups(
            self.value(x).data(),
            s[0],
            s[1] * s[2],
            eps,
            self.value(gamma).data(),
            self.value(beta).data(),
            true,
        );
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::from_parts(s, out),
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat: if rg { xhat } else { Vec::new() },
                rstd,
            },
            rg,
        ))
    }

    /// Cross-correlation of `x[C_in×H×W]` with `k[C_out×C_in×kh×kw]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        if xs.len() != 3 || ks.len() != 4 || ks[1] != xs[0] {
            return Err(Error::shape(format!("conv2d input {xs:?} vs kernel {ks:?}")));
        }
        if ks[2].is_multiple_of(2) || ks[3].is_multiple_of(2) {
            return Err(Error::shape(format!("conv2d kernel extents must be odd, got {ks:?}")));
        }
        if !(1..=2).contains(&stride) {
            return Err(Error::arg(format!("conv2d stride must be 1 or 2, got {stride}")));
        }
        let (ho, wo) = match (
            kernels::conv_out_dim(xs[1], ks[2], stride, pad),
            kernels::conv_out_dim(xs[2], ks[3], stride, pad),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::shape(format!(
                    "conv2d output would be empty: input {xs:?}, kernel {ks:?}, stride {stride}, pad {pad}"
                )))
            }
        };
        let geom = ConvGeom {
            c_in: xs[0],
            h: xs[1],
            w: xs[2],
            kh: ks[2],
            kw: ks[3],
            stride,
            pad,
            ho,
            wo,
        };
        let c_out = ks[0];
        let npix = ho * wo;
        let mut out = vec![0.0; c_out * npix];
        let cols = if geom.is_pointwise() {
            None
        } else {
            Some(kernels::im2col(self.value(x).data(), &geom))
        };
        {
            let b = cols.as_deref().unwrap_or(self.value(x).data());
            kernels::gemm(
                c_out,
                geom.patch(),
                npix,
                self.value(k).data(),
                false,
                b,
                false,
                &mut out,
                false,
            );
        }
        kernels::count_macs((c_out * geom.patch() * npix) as u64);
        let rg = self.rg(x) || self.rg(k);
        let cols = if self.rg(k) { cols } else { None };
        Ok(self.push(
            Tensor::from_parts(vec![c_out, ho, wo], out),
            Op::Conv2d { x, k, geom, cols },
            rg,
        ))
    }

    /// Nearest-neighbour upsampling of a `C×H×W` map.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(Error::arg("upsample factor must be >= 1"));
        }
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::shape(format!("upsample needs C×H×W, got {s:?}")));
        }
        let data = kernels::upsample_nearest(self.value(x).data(), s[0], s[1], s[2], factor);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![s[0], s[1] * factor, s[2] * factor], data),
            Op::Upsample { x, factor },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).transpose()?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Transpose(x), rg))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| Error::arg("concat of nothing"))?).to_vec();
        if axis >= first.len() {
            return Err(Error::arg(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape(format!("concat: {s:?} incompatible with {first:?}")));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (pre, _, post) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(pre * total * post);
        for p in 0..pre {
            for &v in xs {
                let len = self.shape(v)[axis];
                let d = self.value(v).data();
                out.extend_from_slice(&d[p * len * post..(p + 1) * len * post]);
            }
        }
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat { xs: xs.to_vec(), axis }, rg))
    }

    /// Elements `start..start+len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::shape(format!(
                "slice {start}..{} on axis {axis} of {s:?}",
                start + len
            )));
        }
        let (pre, full, post) = split_axis(&s, axis);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(pre * len * post);
        for p in 0..pre {
            let base = p * full * post + start * post;
            out.extend_from_slice(&d[base..base + len * post]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Slice { x, axis, start }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(t, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = Tensor::scalar(v.sum() / v.len() as f64);
        let rg = self.rg(x);
        self.push(t, Op::Mean(x), rg)
    }

    /// Mean over unmasked rows of `−log softmax(logits)[t, target_t]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let rows = self.check_targets(logits, targets, mask)?;
        let lv = self.value(logits);
        let d = lv.cols();
        let mut probs = vec![0.0; rows.len() * d];
        let mut total = 0.0;
        for (i, &(r, t)) in rows.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[t];
            for (p, v) in probs[i * d..(i + 1) * d].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        let loss = total / rows.len() as f64;
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, rows, probs }, rg))
    }

    /// Mean over unmasked rows of `−ln max(p[t, target_t], PROB_FLOOR)` for a
    /// matrix of probabilities.
    pub fn nll_probs(&mut self, probs: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let rows = self.check_targets(probs, targets, mask)?;
        let pv = self.value(probs);
        let total: f64 = rows.iter().map(|&(r, t)| -pv.row(r)[t].max(PROB_FLOOR).ln()).sum();
        let loss = total / rows.len() as f64;
        let rg = self.rg(probs);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::NllProbs { probs, rows, floor: PROB_FLOOR },
            rg,
        ))
    }

    fn check_targets(&self, x: Var, targets: &[usize], mask: &[bool]) -> Result<Vec<(usize, usize)>> {
        let (t, d) = self.matrix_dims(x, "classification loss")?;
        if targets.len() != t || mask.len() != t {
            return Err(Error::shape(format!(
                "{} targets / {} mask entries for {t} rows",
                targets.len(),
                mask.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&c| c >= d) {
            return Err(Error::arg(format!("target class {bad} out of range [0, {d})")));
        }
        let rows: Vec<_> = (0..t).filter(|&r| mask[r]).map(|r| (r, targets[r])).collect();
        if rows.is_empty() {
            return Err(Error::arg("loss mask selects no rows"));
        }
        Ok(rows)
    }

    /// Divides every row (last axis) by its sum.
    pub fn row_normalize(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let c = v.cols();
        let sums: Vec<f64> = v.data().chunks(c).map(|r| r.iter().sum()).collect();
        let mut t = v.clone();
        for (row, s) in t.data_mut().chunks_mut(c).zip(&sums) {
            for e in row {
                *e /= s;
            }
        }
        let rg = self.rg(x);
        self.push(t, Op::RowNormalize { x, sums }, rg)
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::arg(format!(
                "backward root must be a scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        if !self.record {
            return Err(Error::Contract("backward on an inference graph".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(self.shape(root)));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf | Op::Param(_) => {
                    grads[i] = Some(dy);
                }
                op => self.backprop(op, &node.value, dy, &mut grads),
            }
        }
        let mut params = Vec::new();
        let mut inputs = HashMap::new();
        for (i, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            match self.nodes[i].op {
                Op::Param(id) => params.push((id, g)),
                Op::Leaf => {
                    inputs.insert(Var(i), g);
                }
                _ => {}
            }
        }
        Ok(Gradients { params, inputs })
    }

    /// Backward pass whose parameter gradients are added into `store`.
    pub fn backward_into(&self, root: Var, store: &mut ParamStore) -> Result<Gradients> {
        let g = self.backward(root)?;
        g.accumulate_into(store);
        Ok(g)
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_data(&self, grads: &mut [Option<Tensor>], v: Var, g: Vec<f64>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign_data(&g),
            slot @ None => *slot = Some(Tensor::from_parts(self.shape(v).to_vec(), g)),
        }
    }

    fn backprop(&self, op: &Op, y: &Tensor, dy: Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            &Op::MatMul { a, b, ta, tb } => {
                let (ar, ac) = (self.shape(a)[0], self.shape(a)[1]);
                let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
                let n = y.shape()[1];
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if self.rg(a) {
                    let mut da = vec![0.0; m * k];
                    if ta {
                        kernels::gemm(k, n, m, bv, tb, dy.data(), true, &mut da, false);
                    } else {
                        kernels::gemm(m, n, k, dy.data(), false, bv, !tb, &mut da, false);
                    }
                    self.acc_data(grads, a, da);
                }
                if self.rg(b) {
                    let mut db = vec![0.0; k * n];
                    if tb {
                        kernels::gemm(n, m, k, dy.data(), true, av, ta, &mut db, false);
                    } else {
                        kernels::gemm(k, m, n, av, !ta, dy.data(), false, &mut db, false);
                    }
                    self.acc_data(grads, b, db);
                }
            }
            &Op::Add(a, b) => {
                if self.rg(a) && self.rg(b) {
                    self.acc(grads, a, dy.clone());
                    self.acc(grads, b, dy);
                } else if self.rg(a) {
                    self.acc(grads, a, dy);
                } else {
                    self.acc(grads, b, dy);
                }
            }
            &Op::Sub(a, b) => {
                if self.rg(b) {
                    let neg = dy.data().iter().map(|v| -v).collect();
                    self.acc_data(grads, b, neg);
                }
                self.acc(grads, a, dy);
            }
            &Op::Mul(a, b) => {
                if self.rg(a) {
                    let g = mul_data(dy.data(), self.value(b).data());
                    self.acc_data(grads, a, g);
                }
                if self.rg(b) {
                    let g = mul_data(dy.data(), self.value(a).data());
                    self.acc_data(grads, b, g);
                }
            }
            &Op::AddRowBias(x, b) => {
                if self.rg(b) {
                    let n = dy.cols();
                    let mut gb = vec![0.0; n];
                    for row in dy.data().chunks(n) {
                        for (g, v) in gb.iter_mut().zip(row) {
                            *g += v;
                        }
                    }
                    self.acc_data(grads, b, gb);
                }
                self.acc(grads, x, dy);
            }
            &Op::AddChannelBias(x, b) => {
                if self.rg(b) {
                    let s = dy.shape();
                    let gb = dy.data().chunks(s[1] * s[2]).map(|p| p.iter().sum()).collect();
                    self.acc_data(grads, b, gb);
                }
                self.acc(grads, x, dy);
            }
            &Op::Scale(x, c) => {
                let g = dy.data().iter().map(|v| v * c).collect();
                self.acc_data(grads, x, g);
            }
            &Op::Relu(x) => {
                let g = dy
                    .data()
                    .iter()
                    .zip(self.value(x).data())
                    .map(|(&d, &v)| if v > 0.0 { d } else { 0.0 })
                    .collect();
                self.acc_data(grads, x, g);
            }
            &Op::Sigmoid(x) => {
                let g = dy
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&d, &s)| d * s * (1.0 - s))
                    .collect();
                self.acc_data(grads, x, g);
            }
            &Op::Softmax { x, axis } => {
                let (pre, len, post) = split_axis(y.shape(), axis);
                let (yd, dd) = (y.data(), dy.data());
                let mut g = vec![0.0; yd.len()];
                for p in 0..pre {
                    for q in 0..post {
                        let base = p * len * post + q;
                        let dot: f64 = (0..len).map(|i| yd[base + i * post] * dd[base + i * post]).sum();
                        for i in 0..len {
                            let o = base + i * post;
                            g[o] = yd[o] * (dd[o] - dot);
                        }
                    }
                }
                self.acc_data(grads, x, g);
            }
            &Op::MaskedSoftmax { x } => {
                let c = y.cols();
                let mut g = vec![0.0; y.len()];
                for ((gr, yr), dr) in g.chunks_mut(c).zip(y.data().chunks(c)).zip(dy.data().chunks(c)) {
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &dv) in gr.iter_mut().zip(yr).zip(dr) {
                        *o = yv * (dv - dot);
                    }
                }
                self.acc_data(grads, x, g);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let c = y.cols();
                let rows = y.rows();
                self.norm_backward(*x, *gamma, *beta, xhat, rstd, rows, c, false, &dy, grads);
            }
            Op::InstanceNorm { x, gamma, beta, xhat, rstd } => {
                let s = y.shape();
                self.norm_backward(*x, *gamma, *beta, xhat, rstd, s[0], s[1] * s[2], true, &dy, grads);
            }
            Op::Conv2d { x, k, geom, cols } => {
                let c_out = y.shape()[0];
                let npix = geom.ho * geom.wo;
                let patch = geom.patch();
                if self.rg(*k) {
                    let b = cols.as_deref().unwrap_or(self.value(*x).data());
                    let mut dk = vec![0.0; c_out * patch];
                    kernels::gemm(c_out, npix, patch, dy.data(), false, b, true, &mut dk, false);
                    self.acc_data(grads, *k, dk);
                }
                if self.rg(*x) {
                    let mut dcols = vec![0.0; patch * npix];
                    kernels::gemm(
                        patch,
                        c_out,
                        npix,
                        self.value(*k).data(),
                        true,
                        dy.data(),
                        false,
                        &mut dcols,
                        false,
                    );
                    if geom.is_pointwise() {
                        self.acc_data(grads, *x, dcols);
                    } else {
                        let mut dx = vec![0.0; geom.c_in * geom.h * geom.w];
                        kernels::col2im(&dcols, geom, &mut dx);
                        self.acc_data(grads, *x, dx);
                    }
                }
            }
            &Op::Upsample { x, factor } => {
                let s = self.shape(x);
                let g = kernels::upsample_nearest_backward(dy.data(), s[0], s[1], s[2], factor);
                self.acc_data(grads, x, g);
            }
            &Op::Reshape(x) => {
                self.acc_data(grads, x, dy.into_data());
            }
            &Op::Transpose(x) => {
                let (m, n) = (dy.shape()[0], dy.shape()[1]);
                let g = crate::tensor::transpose_data(dy.data(), m, n);
                self.acc_data(grads, x, g);
            }
            Op::Concat { xs, axis } => {
                let (pre, total, post) = split_axis(y.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let len = self.shape(v)[*axis];
                    if self.rg(v) {
                        let mut g = Vec::with_capacity(pre * len * post);
                        for p in 0..pre {
                            let base = (p * total + offset) * post;
                            g.extend_from_slice(&dy.data()[base..base + len * post]);
                        }
                        self.acc_data(grads, v, g);
                    }
                    offset += len;
                }
            }
            &Op::Slice { x, axis, start } => {
                let xs = self.shape(x);
                let (pre, full, post) = split_axis(xs, axis);
                let len = y.shape()[axis];
                let mut g = vec![0.0; self.value(x).len()];
                for p in 0..pre {
                    let base = p * full * post + start * post;
                    g[base..base + len * post]
                        .copy_from_slice(&dy.data()[p * len * post..(p + 1) * len * post]);
                }
                self.acc_data(grads, x, g);
            }
            &Op::Sum(x) => {
                let d = dy.item();
                self.acc(grads, x, Tensor::full(self.shape(x), d));
            }
            &Op::Mean(x) => {
                let n = self.value(x).len() as f64;
                let d = dy.item() / n;
                self.acc(grads, x, Tensor::full(self.shape(x), d));
            }
            Op::CrossEntropy { logits, rows, probs } => {
                let d = self.value(*logits).cols();
                let scale = dy.item() / rows.len() as f64;
                let mut g = vec![0.0; self.value(*logits).len()];
                for (i, &(r, t)) in rows.iter().enumerate() {
                    let gr = &mut g[r * d..(r + 1) * d];
                    for (o, p) in gr.iter_mut().zip(&probs[i * d..(i + 1) * d]) {
                        *o = p * scale;
                    }
                    gr[t] -= scale;
                }
                self.acc_data(grads, *logits, g);
            }
            Op::NllProbs { probs, rows, floor } => {
                let pv = self.value(*probs);
                let d = pv.cols();
                let scale = dy.item() / rows.len() as f64;
                let mut g = vec![0.0; pv.len()];
                for &(r, t) in rows {
                    let p = pv.row(r)[t];
                    if p > *floor {
                        g[r * d + t] -= scale / p;
                    }
                }
                self.acc_data(grads, *probs, g);
            }
            Op::RowNormalize { x, sums } => {
                let c = y.cols();
                let mut g = vec![0.0; y.len()];
                for (r, ((gr, yr), dr)) in g
                    .chunks_mut(c)
                    .zip(y.data().chunks(c))
                    .zip(dy.data().chunks(c))
                    .enumerate()
                {
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for (o, &dv) in gr.iter_mut().zip(dr) {
                        *o = (dv - dot) / sums[r];
                    }
                }
                self.acc_data(grads, *x, g);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn norm_backward(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: &[f64],
        rstd: &[f64],
        groups: usize,
        n: usize,
        per_group_affine: bool,
        dy: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let gam = self.value(gamma).data();
        let dyd = dy.data();
        let affine_len = if per_group_affine { groups } else { n };
        if self.rg(gamma) || self.rg(beta) {
            let mut dg = vec![0.0; affine_len];
            let mut db = vec![0.0; affine_len];
            for r in 0..groups {
                for i in 0..n {
                    let o = r * n + i;
                    let a = if per_group_affine { r } else { i };
                    dg[a] += dyd[o] * xhat[o];
                    db[a] += dyd[o];
                }
            }
            self.acc_data(grads, gamma, dg);
            self.acc_data(grads, beta, db);
        }
        if self.rg(x) {
            let mut dx = vec![0.0; groups * n];
            let nf = n as f64;
            for r in 0..groups {
                let mut mean_d = 0.0;
                let mut mean_dx = 0.0;
                for i in 0..n {
                    let o = r * n + i;
                    let gv = if per_group_affine { gam[r] } else { gam[i] };
                    let d = dyd[o] * gv;
                    mean_d += d;
                    mean_dx += d * xhat[o];
                }
                mean_d /= nf;
                mean_dx /= nf;
                for i in 0..n {
                    let o = r * n + i;
                    let gv = if per_group_affine { gam[r] } else { gam[i] };
                    let d = dyd[o] * gv;
                    dx[o] = rstd[r] * (d - mean_d - xhat[o] * mean_dx);
                }
            }
            self.acc_data(grads, x, dx);
        }
    }
}

/// Gradients produced by one backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    params: Vec<(ParamId, Tensor)>,
    inputs: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    pub fn params(&self) -> &[(ParamId, Tensor)] {
        &self.params
    }

    pub fn input(&self, v: Var) -> Option<&Tensor> {
        self.inputs.get(&v)
    }

    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (id, g) in &self.params {
            store.accumulate_grad(*id, g);
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn mul_data(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

/// `(prod(shape[..axis]), shape[axis], prod(shape[axis+1..]))`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let pre = shape[..axis].iter().product();
    let post = shape[axis + 1..].iter().product();
    (pre, shape[axis], post)
}

/// Normalizes `groups` contiguous runs of `n` values. Returns
/// `(output, xhat, rstd)`.
#[allow(clippy::too_many_arguments)]
fn normalize_groups(
    x: &[f64],
    groups: usize,
    n: usize,
    eps: f64,
    gamma: &[f64],
    beta: &[f64],
    per_group_affine: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; groups * n];
    let mut xhat = vec![0.0; groups * n];
    let mut rstd = vec![0.0; groups];
    for r in 0..groups {
        let row = &x[r * n..(r + 1) * n];
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let rs = 1.0 / (var + eps).sqrt();
        rstd[r] = rs;
        for i in 0..n {
            let h = (row[i] - mean) * rs;
            xhat[r * n + i] = h;
            let (g, b) = if per_group_affine {
                (gamma[r], beta[r])
            } else {
                (gamma[i], beta[i])
            };
            out[r * n + i] = h * g + b;
        }
    }
    (out, xhat, rstd)
}
