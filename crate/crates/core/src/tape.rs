//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its forward value to a [`Tape`];
//! nodes are stored in creation order, which is already a topological order,
//! so [`Tape::backward`] is a single reverse sweep that visits each node once.
//! Leaf gradients persist across sweeps and accumulate until
//! [`Tape::zero_grad`] is called.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, Error, Result};
use crate::kernels::{col2im_acc, gemm_nn, gemm_nt, gemm_tn, im2col, ConvGeometry};
use crate::tensor::{check_finite, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which elements share a mean and variance in [`Tape::standardize`].
///
/// Inputs are viewed as `N × C × S` where `S` is the product of trailing axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatAxes {
    /// One statistic per channel over batch and space (batch norm).
    Channel,
    /// One statistic per sample over channels and space (layer norm).
    Sample,
    /// One statistic per sample and channel over space (instance norm).
    SampleChannel,
    /// One statistic per sample and channel group (group norm).
    SampleGroup { groups: usize },
}

impl StatAxes {
    pub(crate) fn group_count(self, n: usize, c: usize) -> usize {
        match self {
            StatAxes::Channel => c,
            StatAxes::Sample => n,
            StatAxes::SampleChannel => n * c,
            StatAxes::SampleGroup { groups } => n * groups,
        }
    }

    pub(crate) fn group_of(self, n: usize, ch: usize, c: usize) -> usize {
        match self {
            StatAxes::Channel => ch,
            StatAxes::Sample => n,
            StatAxes::SampleChannel => n * c + ch,
            StatAxes::SampleGroup { groups } => n * groups + ch / (c / groups),
        }
    }
}

/// Per-group statistics produced by [`Tape::standardize`].
#[derive(Debug, Clone, PartialEq)]
pub struct GroupStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Conv2d { input: Var, kernel: Var, bias: Option<Var>, geom: ConvGeometry, cols: Option<Vec<f64>> },
    ChannelAffine { x: Var, scale: Option<Var>, shift: Option<Var> },
    Standardize { x: Var, axes: StatAxes, inv_std: Vec<f64> },
    Relu { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    Square { x: Var },
    Sum { x: Var },
    Reshape { x: Var },
    MomentPool { x: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf; zeros if nothing has flowed into it.
    pub fn grad(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        node.grad.clone().unwrap_or_else(|| Tensor::zeros(node.value.shape()))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        check_finite(name, value.data())?;
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, grad: None, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(dim_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    /// Matrix product of `m×k` and `k×n` operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err("matmul", format!("{sa:?} × {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b }, &[a, b])
    }

    /// Cross-correlation of `N×C×H×W` input with `O×C×kh×kw` kernels, plus an optional per-output-channel bias.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let si = self.value(input).shape().to_vec();
        let sk = self.value(kernel).shape().to_vec();
        if si.len() != 4 || sk.len() != 4 || si[1] != sk[1] {
            return Err(dim_err("conv2d", format!("input {si:?}, kernel {sk:?}")));
        }
        if stride == 0 {
            return Err(dim_err("conv2d", "stride must be positive".into()));
        }
        let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
        let (o, kh, kw) = (sk[0], sk[2], sk[3]);
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(dim_err(
                "conv2d",
                format!("kernel {kh}×{kw} exceeds padded input {}×{}", h + 2 * padding, w + 2 * padding),
            ));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [o] {
                return Err(dim_err("conv2d", format!("bias {:?} for {o} outputs", self.value(b).shape())));
            }
        }
        let geom = ConvGeometry {
            channels: c,
            height: h,
            width: w,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        };
        let (patch, out_len) = (geom.patch_len(), geom.out_len());
        let keep_cols = self.requires_grad(kernel);
        let mut cols_all = if keep_cols { vec![0.0; n * patch * out_len] } else { Vec::new() };
        let mut scratch = vec![0.0; patch * out_len];
        let mut out = vec![0.0; n * o * out_len];
        let x = self.value(input).data();
        let k = self.value(kernel).data();
        for s in 0..n {
            let cols = if keep_cols { &mut cols_all[s * patch * out_len..(s + 1) * patch * out_len] } else { &mut scratch[..] };
            im2col(&geom, &x[s * c * h * w..(s + 1) * c * h * w], cols);
            let dst = &mut out[s * o * out_len..(s + 1) * o * out_len];
            if let Some(b) = bias {
                for (oc, &bv) in self.value(b).data().iter().enumerate() {
                    dst[oc * out_len..(oc + 1) * out_len].fill(bv);
                }
            }
            gemm_nn(k, cols, dst, o, patch, out_len);
        }
        let value = Tensor::from_parts(vec![n, o, geom.out_h, geom.out_w], out);
        let cols = keep_cols.then_some(cols_all);
        let mut parents = vec![input, kernel];
        parents.extend(bias);
        self.push("conv2d", value, Op::Conv2d { input, kernel, bias, geom, cols }, &parents)
    }

    /// `y[n,c,…] = scale[c]·x[n,c,…] + shift[c]` for inputs of rank ≥ 2 with channels on axis 1.
    pub fn channel_affine(&mut self, x: Var, scale: Option<Var>, shift: Option<Var>) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() < 2 {
            return Err(dim_err("channel_affine", format!("input rank {} < 2", shape.len())));
        }
        let c = shape[1];
        for v in [scale, shift].into_iter().flatten() {
            if self.value(v).shape() != [c] {
                return Err(dim_err(
                    "channel_affine",
                    format!("parameter {:?} for {c} channels", self.value(v).shape()),
                ));
            }
        }
        let inner: usize = shape[2..].iter().product();
        let src = self.value(x).data();
        let sc = scale.map(|v| self.value(v).data());
        let sh = shift.map(|v| self.value(v).data());
        let mut out = Vec::with_capacity(src.len());
        for (i, chunk) in src.chunks(inner).enumerate() {
            let ch = i % c;
            let g = sc.map_or(1.0, |s| s[ch]);
            let b = sh.map_or(0.0, |s| s[ch]);
            out.extend(chunk.iter().map(|&v| g * v + b));
        }
        let parents: Vec<Var> = [Some(x), scale, shift].into_iter().flatten().collect();
        self.push("channel_affine", Tensor::from_parts(shape, out), Op::ChannelAffine { x, scale, shift }, &parents)
    }

    /// Subtracts the mean and divides by `sqrt(var + eps)` within each statistic group.
    ///
    /// Returns the standardized node and the batch statistics it used.
    pub fn standardize(&mut self, x: Var, axes: StatAxes, eps: f64) -> Result<(Var, GroupStats)> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() < 2 {
            return Err(dim_err("standardize", format!("input rank {} < 2", shape.len())));
        }
        let (n, c) = (shape[0], shape[1]);
        if let StatAxes::SampleGroup { groups } = axes {
            if groups == 0 || c % groups != 0 {
                return Err(dim_err("standardize", format!("{c} channels not divisible into {groups} groups")));
            }
        }
        let s: usize = shape[2..].iter().product();
        let groups = axes.group_count(n, c);
        let data = self.value(x).data();
        let mut sum = vec![0.0; groups];
        let mut count = vec![0usize; groups];
        for ni in 0..n {
            for ch in 0..c {
                let g = axes.group_of(ni, ch, c);
                let base = (ni * c + ch) * s;
                sum[g] += data[base..base + s].iter().sum::<f64>();
                count[g] += s;
            }
        }
        let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, &k)| s / k as f64).collect();
        let mut sq = vec![0.0; groups];
        for ni in 0..n {
            for ch in 0..c {
                let g = axes.group_of(ni, ch, c);
                let base = (ni * c + ch) * s;
                let m = mean[g];
                sq[g] += data[base..base + s].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
            }
        }
        let var: Vec<f64> = sq.iter().zip(&count).map(|(q, &k)| q / k as f64).collect();
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + eps)).collect();
        let mut out = vec![0.0; data.len()];
        for ni in 0..n {
            for ch in 0..c {
                let g = axes.group_of(ni, ch, c);
                let base = (ni * c + ch) * s;
                let (m, is) = (mean[g], inv_std[g]);
                for (o, &v) in out[base..base + s].iter_mut().zip(&data[base..base + s]) {
                    *o = (v - m) * is;
                }
            }
        }
        let stats = GroupStats { mean, var };
        let var_out = self.push("standardize", Tensor::from_parts(shape, out), Op::Standardize { x, axes, inv_std }, &[x])?;
        Ok((var_out, stats))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let out: Vec<f64> = v.data().iter().map(|&e| if e > 0.0 { e } else { 0.0 }).collect();
        let shape = v.shape().to_vec();
        self.push("relu", Tensor::from_parts(shape, out), Op::Relu { x }, &[x])
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let out: Vec<f64> = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(name, Tensor::from_parts(shape, out), op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let v = self.value(x);
        let out: Vec<f64> = v.data().iter().map(|&e| e * factor).collect();
        let shape = v.shape().to_vec();
        self.push("scale", Tensor::from_parts(shape, out), Op::Scale { x, factor }, &[x])
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let out: Vec<f64> = v.data().iter().map(|&e| e * e).collect();
        let shape = v.shape().to_vec();
        self.push("square", Tensor::from_parts(shape, out), Op::Square { x }, &[x])
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: f64 = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(total), Op::Sum { x }, &[x])
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let d = self.sub(pred, target)?;
        let sq = self.square(d)?;
        self.mean(sq)
    }

    /// Arithmetic mean of equally shaped nodes, summed left to right.
    pub fn mean_of(&mut self, items: &[Var]) -> Result<Var> {
        let (&first, rest) = items.split_first().ok_or_else(|| Error::Contract("mean_of needs at least one input".into()))?;
        let mut acc = first;
        for &v in rest {
            acc = self.add(acc, v)?;
        }
        self.scale(acc, 1.0 / items.len() as f64)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        self.push("reshape", value, Op::Reshape { x }, &[x])
    }

    /// Pools `N×C×H×W` features into `N×3C`: per channel, the spatial mean
    /// followed by the means weighted by horizontal and vertical pixel
    /// coordinates in `(-1, 1)`.
    pub fn moment_pool(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 4 {
            return Err(dim_err("moment_pool", format!("expected N×C×H×W, got {shape:?}")));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let (us, vs) = (coords(w), coords(h));
        let s = (h * w) as f64;
        let data = self.value(x).data();
        let mut out = vec![0.0; n * 3 * c];
        for ni in 0..n {
            for ch in 0..c {
                let plane = &data[(ni * c + ch) * h * w..(ni * c + ch + 1) * h * w];
                let (mut m0, mut mu, mut mv) = (0.0, 0.0, 0.0);
                for (yi, row) in plane.chunks(w).enumerate() {
                    for (xi, &val) in row.iter().enumerate() {
                        m0 += val;
                        mu += val * us[xi];
                        mv += val * vs[yi];
                    }
                }
                let base = ni * 3 * c;
                out[base + ch] = m0 / s;
                out[base + c + ch] = mu / s;
                out[base + 2 * c + ch] = mv / s;
            }
        }
        self.push("moment_pool", Tensor::from_parts(vec![n, 3 * c], out), Op::MomentPool { x }, &[x])
    }

    /// Propagates `d loss / d node` from a scalar `loss` to every leaf that requires gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).shape() != [1] {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss of shape [1], got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut adj)?;
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) -> Result<()> {
        if matches!(self.nodes[i].op, Op::Leaf) {
            check_finite("backward", g)?;
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(t) => t.data_mut().iter_mut().zip(g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(Tensor::from_parts(node.value.shape().to_vec(), g.to_vec())),
            }
            return Ok(());
        }
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].requires_grad;
        match &nodes[i].op {
            Op::Leaf => unreachable!("leaves handled above"),
            Op::MatMul { a, b } => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if needs(*a) {
                    let da = acc(adj, *a, m * k);
                    gemm_nt(g, nodes[b.0].value.data(), da, m, n, k);
                }
                if needs(*b) {
                    let db = acc(adj, *b, k * n);
                    gemm_tn(nodes[a.0].value.data(), g, db, k, m, n);
                }
            }
            Op::Conv2d { input, kernel, bias, geom, cols } => {
                let o = nodes[kernel.0].value.shape()[0];
                let (patch, out_len) = (geom.patch_len(), geom.out_len());
                let n = nodes[input.0].value.shape()[0];
                let img = geom.channels * geom.height * geom.width;
                if let Some(b) = bias.filter(|b| needs(*b)) {
                    let db = acc(adj, b, o);
                    for s in 0..n {
                        for (oc, d) in db.iter_mut().enumerate() {
                            let base = (s * o + oc) * out_len;
                            *d += g[base..base + out_len].iter().sum::<f64>();
                        }
                    }
                }
                if needs(*kernel) {
                    let cols = cols.as_ref().ok_or_else(|| Error::Contract("conv2d patches missing".into()))?;
                    let dk = acc(adj, *kernel, o * patch);
                    for s in 0..n {
                        gemm_nt(
                            &g[s * o * out_len..(s + 1) * o * out_len],
                            &cols[s * patch * out_len..(s + 1) * patch * out_len],
                            dk,
                            o,
                            out_len,
                            patch,
                        );
                    }
                }
                if needs(*input) {
                    let kdata = nodes[kernel.0].value.data();
                    let mut dcols = vec![0.0; patch * out_len];
                    let dx = acc(adj, *input, n * img);
                    for s in 0..n {
                        dcols.fill(0.0);
                        gemm_tn(kdata, &g[s * o * out_len..(s + 1) * o * out_len], &mut dcols, patch, o, out_len);
                        col2im_acc(geom, &dcols, &mut dx[s * img..(s + 1) * img]);
                    }
                }
            }
            Op::ChannelAffine { x, scale, shift } => {
                let shape = nodes[x.0].value.shape();
                let c = shape[1];
                let inner: usize = shape[2..].iter().product();
                let xd = nodes[x.0].value.data();
                if needs(*x) {
                    let sc = scale.map(|v| nodes[v.0].value.data());
                    let dx = acc(adj, *x, xd.len());
                    for (i, (dchunk, gchunk)) in dx.chunks_mut(inner).zip(g.chunks(inner)).enumerate() {
                        let s = sc.map_or(1.0, |s| s[i % c]);
                        dchunk.iter_mut().zip(gchunk).for_each(|(d, gv)| *d += s * gv);
                    }
                }
                if let Some(s) = scale.filter(|s| needs(*s)) {
                    let ds = acc(adj, s, c);
                    for (i, (xchunk, gchunk)) in xd.chunks(inner).zip(g.chunks(inner)).enumerate() {
                        ds[i % c] += xchunk.iter().zip(gchunk).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                if let Some(b) = shift.filter(|b| needs(*b)) {
                    let db = acc(adj, b, c);
                    for (i, gchunk) in g.chunks(inner).enumerate() {
                        db[i % c] += gchunk.iter().sum::<f64>();
                    }
                }
            }
            Op::Standardize { x, axes, inv_std } => {
                let shape = nodes[x.0].value.shape();
                let (n, c) = (shape[0], shape[1]);
                let s: usize = shape[2..].iter().product();
                let xhat = nodes[i].value.data();
                let groups = inv_std.len();
                let mut mean_g = vec![0.0; groups];
                let mut mean_gx = vec![0.0; groups];
                let mut count = vec![0usize; groups];
                for ni in 0..n {
                    for ch in 0..c {
                        let grp = axes.group_of(ni, ch, c);
                        let base = (ni * c + ch) * s;
                        for j in base..base + s {
                            mean_g[grp] += g[j];
                            mean_gx[grp] += g[j] * xhat[j];
                        }
                        count[grp] += s;
                    }
                }
                for grp in 0..groups {
                    mean_g[grp] /= count[grp] as f64;
                    mean_gx[grp] /= count[grp] as f64;
                }
                let dx = acc(adj, *x, xhat.len());
                for ni in 0..n {
                    for ch in 0..c {
                        let grp = axes.group_of(ni, ch, c);
                        let base = (ni * c + ch) * s;
                        for j in base..base + s {
                            dx[j] += inv_std[grp] * (g[j] - mean_g[grp] - xhat[j] * mean_gx[grp]);
                        }
                    }
                }
            }
            Op::Relu { x } => {
                let xd = nodes[x.0].value.data();
                let dx = acc(adj, *x, xd.len());
                for ((d, &xv), &gv) in dx.iter_mut().zip(xd).zip(g) {
                    if xv > 0.0 {
                        *d += gv;
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if needs(v) {
                        acc(adj, v, g.len()).iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
                    }
                }
            }
            Op::Sub { a, b } => {
                if needs(*a) {
                    acc(adj, *a, g.len()).iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
                }
                if needs(*b) {
                    acc(adj, *b, g.len()).iter_mut().zip(g).for_each(|(d, gv)| *d -= gv);
                }
            }
            Op::Mul { a, b } => {
                if needs(*a) {
                    let bd = nodes[b.0].value.data();
                    acc(adj, *a, g.len()).iter_mut().zip(g).zip(bd).for_each(|((d, gv), bv)| *d += gv * bv);
                }
                if needs(*b) {
                    let ad = nodes[a.0].value.data();
                    acc(adj, *b, g.len()).iter_mut().zip(g).zip(ad).for_each(|((d, gv), av)| *d += gv * av);
                }
            }
            Op::Scale { x, factor } => {
                acc(adj, *x, g.len()).iter_mut().zip(g).for_each(|(d, gv)| *d += gv * factor);
            }
            Op::Square { x } => {
                let xd = nodes[x.0].value.data();
                acc(adj, *x, g.len()).iter_mut().zip(g).zip(xd).for_each(|((d, gv), xv)| *d += 2.0 * xv * gv);
            }
            Op::Sum { x } => {
                let n = nodes[x.0].value.numel();
                acc(adj, *x, n).iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Reshape { x } => {
                acc(adj, *x, g.len()).iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
            }
            Op::MomentPool { x } => {
                let shape = nodes[x.0].value.shape();
                let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let (us, vs) = (coords(w), coords(h));
                let s = (h * w) as f64;
                let dx = acc(adj, *x, n * c * h * w);
                for ni in 0..n {
                    for ch in 0..c {
                        let base = ni * 3 * c;
                        let (g0, gu, gv) = (g[base + ch] / s, g[base + c + ch] / s, g[base + 2 * c + ch] / s);
                        let plane = &mut dx[(ni * c + ch) * h * w..(ni * c + ch + 1) * h * w];
                        for (yi, row) in plane.chunks_mut(w).enumerate() {
                            for (xi, d) in row.iter_mut().enumerate() {
                                *d += g0 + gu * us[xi] + gv * vs[yi];
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn acc(adj: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    adj[v.0].get_or_insert_with(|| vec![0.0; len])
}

/// Pixel-centre coordinates spanning `(-1, 1)`.
fn coords(len: usize) -> Vec<f64> {
    (0..len).map(|i| (2 * i + 1) as f64 / len as f64 - 1.0).collect()
}
