use super::kernels::{self, ConvGeom, Dims, NormStats};
use super::{Scalar, Tensor};
use crate::error::{Result, TabsError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Sum(Var),
    Reshape(Var),
    Transpose(Var),
    Conv3d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose3d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: NormStats<T>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<T>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul(Var, Var),
    ConcatChannels(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ChannelMean(Var),
    ScaleChannels {
        x: Var,
        gate: Var,
    },
    MseLoss {
        pred: Var,
        target: Tensor<T>,
        mask: Option<Vec<bool>>,
        count: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Dynamic tape: every operation appends a node, and [`Tape::backward`]
/// walks the nodes in reverse, summing gradients at fan-out.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn spatial_dims(shape: &[usize]) -> Dims {
    [shape[1], shape[2], shape[3]]
}

fn shape_err(op: &str, msg: impl std::fmt::Display) -> TabsError {
    TabsError::config(format!("{op}: {msg}"))
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that does not track gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("shapes {:?} and {:?} differ", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let rg = self.requires_grad(x);
        self.push(out, Op::Scale(x, factor), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.requires_grad(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        let rg = self.requires_grad(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.requires_grad(x);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.rank() != 2 {
            return Err(shape_err("transpose", format!("expected rank 2, got {:?}", v.shape())));
        }
        let (r, c) = (v.shape()[0], v.shape()[1]);
        let out = Tensor::new(vec![c, r], kernels::transpose(v.data(), r, c))?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    /// 3-D convolution of `x: [C_in, D, H, W]` with `w: [C_out, C_in, k, k, k]`.
    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 4 {
            return Err(shape_err("conv3d", format!("input must be [C,D,H,W], got {xs:?}")));
        }
        if ws.len() != 5 || ws[2] != ws[3] || ws[3] != ws[4] {
            return Err(shape_err(
                "conv3d",
                format!("weight must be [C_out,C_in,k,k,k], got {ws:?}"),
            ));
        }
        if ws[1] != xs[0] {
            return Err(shape_err(
                "conv3d",
                format!("input channel dim is {} but weight expects {}", xs[0], ws[1]),
            ));
        }
        if !(1..=2).contains(&stride) {
            return Err(shape_err("conv3d", format!("stride must be 1 or 2, got {stride}")));
        }
        let (c_out, c_in, k) = (ws[0], ws[1], ws[2]);
        let mut out_dims = [0; 3];
        for (axis, (o, &len)) in out_dims.iter_mut().zip(&xs[1..]).enumerate() {
            *o = kernels::conv_out_len(len, k, stride, padding).ok_or_else(|| {
                shape_err(
                    "conv3d",
                    format!(
                        "spatial dim {} has extent {len}, too small for kernel {k} with padding {padding}",
                        axis + 1
                    ),
                )
            })?;
        }
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(shape_err(
                    "conv3d",
                    format!("bias must be [{c_out}], got {:?}", self.shape(b)),
                ));
            }
        }
        let geom = ConvGeom {
            k,
            stride,
            pad: padding,
        };
        let mut out = self.bias_filled(b, c_out, out_dims);
        kernels::correlate(
            self.value(x).data(),
            spatial_dims(xs),
            c_in,
            self.value(w).data(),
            c_out,
            geom,
            out.data_mut(),
            out_dims,
        );
        let rg = self.any_grad(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(out, Op::Conv3d { x, w, b, geom }, rg))
    }

    /// Transposed 3-D convolution of `x: [C_in, D, H, W]` with
    /// `w: [C_in, C_out, k, k, k]`, no padding. Spatial extents become `(D-1)·stride + k`.
    pub fn conv_transpose3d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
    ) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 4 {
            return Err(shape_err(
                "conv_transpose3d",
                format!("input must be [C,D,H,W], got {xs:?}"),
            ));
        }
        if ws.len() != 5 || ws[2] != ws[3] || ws[3] != ws[4] {
            return Err(shape_err(
                "conv_transpose3d",
                format!("weight must be [C_in,C_out,k,k,k], got {ws:?}"),
            ));
        }
        if ws[0] != xs[0] {
            return Err(shape_err(
                "conv_transpose3d",
                format!("input channel dim is {} but weight expects {}", xs[0], ws[0]),
            ));
        }
        if stride == 0 {
            return Err(shape_err("conv_transpose3d", "stride must be positive"));
        }
        let (c_in, c_out, k) = (ws[0], ws[1], ws[2]);
        let out_dims = [
            (xs[1] - 1) * stride + k,
            (xs[2] - 1) * stride + k,
            (xs[3] - 1) * stride + k,
        ];
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(shape_err(
                    "conv_transpose3d",
                    format!("bias must be [{c_out}], got {:?}", self.shape(b)),
                ));
            }
        }
        let geom = ConvGeom { k, stride, pad: 0 };
        let mut out = self.bias_filled(b, c_out, out_dims);
        kernels::scatter(
            self.value(x).data(),
            spatial_dims(xs),
            c_in,
            self.value(w).data(),
            c_out,
            geom,
            out.data_mut(),
            out_dims,
        );
        let rg = self.any_grad(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(out, Op::ConvTranspose3d { x, w, b, geom }, rg))
    }

    fn bias_filled(&self, b: Option<Var>, channels: usize, dims: Dims) -> Tensor<T> {
        let vol = kernels::volume(dims);
        let mut out = Tensor::zeros(&[channels, dims[0], dims[1], dims[2]]);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (c, chunk) in out.data_mut().chunks_mut(vol).enumerate() {
                chunk.fill(bias[c]);
            }
        }
        out
    }

    /// Group normalization of `x: [C, ...]` with per-channel affine `gamma`, `beta`.
    pub fn group_norm(
        &mut self,
        x: Var,
        groups: usize,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() < 2 {
            return Err(shape_err("group_norm", format!("input must be [C,...], got {xs:?}")));
        }
        let c = xs[0];
        if groups == 0 || c % groups != 0 {
            return Err(shape_err(
                "group_norm",
                format!("{c} channels are not divisible into {groups} groups"),
            ));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err("group_norm", format!("gamma and beta must be [{c}]")));
        }
        if eps <= T::zero() {
            return Err(shape_err("group_norm", "eps must be positive"));
        }
        let mut out = Tensor::zeros(xs);
        let stats = kernels::group_norm_forward(
            self.value(x).data(),
            c,
            groups,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
            out.data_mut(),
        );
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
            rg,
        ))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let xs = self.shape(x);
        let d = *xs
            .last()
            .ok_or_else(|| shape_err("layer_norm", "input must have rank >= 1"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err("layer_norm", format!("gamma and beta must be [{d}]")));
        }
        let mut out = Tensor::zeros(xs);
        let stats = kernels::layer_norm_forward(
            self.value(x).data(),
            d,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
            out.data_mut(),
        );
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            },
            rg,
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x);
        if axis >= xs.len() {
            return Err(shape_err(
                "softmax",
                format!("axis {axis} out of bounds for shape {xs:?}"),
            ));
        }
        let (outer, len, inner) = kernels::split_axis(xs, axis);
        let mut out = Tensor::zeros(xs);
        kernels::softmax_forward(self.value(x).data(), outer, len, inner, out.data_mut());
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::Softmax { x, axis }, rg))
    }

    /// `x[n, d_in] · w[d_in, d_out] + b[d_out]`
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(shape_err(
                "linear",
                format!("cannot apply weight {ws:?} to input {xs:?}"),
            ));
        }
        let (n, din, dout) = (xs[0], ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(shape_err(
                    "linear",
                    format!("bias must be [{dout}], got {:?}", self.shape(b)),
                ));
            }
        }
        let mut out = match b {
            Some(b) => {
                let bias = self.value(b).data();
                Tensor::from_fn(&[n, dout], |i| bias[i % dout])
            }
            None => Tensor::zeros(&[n, dout]),
        };
        kernels::matmul_acc(
            self.value(x).data(),
            self.value(w).data(),
            n,
            din,
            dout,
            out.data_mut(),
        );
        let rg = self.any_grad(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err(
                "matmul",
                format!("incompatible shapes {sa:?} and {sb:?}"),
            ));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(&[n, m]);
        kernels::matmul_acc(
            self.value(a).data(),
            self.value(b).data(),
            n,
            k,
            m,
            out.data_mut(),
        );
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// Concatenation along the leading (channel) axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat_channels", "nothing to concatenate"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut channels = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(shape_err(
                    "concat_channels",
                    format!("trailing shape {:?} differs from {tail:?}", &s[1..]),
                ));
            }
            channels += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![channels];
        shape.extend_from_slice(&tail);
        let out = Tensor::new(shape, data)?;
        let rg = self.any_grad(parts);
        Ok(self.push(out, Op::ConcatChannels(parts.to_vec()), rg))
    }

    /// Columns `start..start+len` of a `[n, m]` matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 2 || start + len > xs[1] || len == 0 {
            return Err(shape_err(
                "slice_cols",
                format!("columns {start}..{} out of range for {xs:?}", start + len),
            ));
        }
        let (n, m) = (xs[0], xs[1]);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * len);
        for r in 0..n {
            data.extend_from_slice(&src[r * m + start..r * m + start + len]);
        }
        let out = Tensor::new(vec![n, len], data)?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    /// Concatenation of `[n, m_i]` matrices along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat_cols", "nothing to concatenate"))?;
        let n = self.shape(*first)[0];
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != n {
                return Err(shape_err("concat_cols", format!("part {s:?} does not have {n} rows")));
            }
            total += s[1];
        }
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            for &p in parts {
                let m = self.shape(p)[1];
                data.extend_from_slice(&self.value(p).data()[r * m..(r + 1) * m]);
            }
        }
        let out = Tensor::new(vec![n, total], data)?;
        let rg = self.any_grad(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Global average over everything but the leading axis, as a `[1, C]` row.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.rank() < 2 {
            return Err(shape_err("channel_mean", format!("input must be [C,...], got {:?}", v.shape())));
        }
        let c = v.shape()[0];
        let per = v.numel() / c;
        let inv = T::one() / T::from_f64(per as f64);
        let data = (0..c).map(|ch| v.channel(ch).iter().copied().sum::<T>() * inv).collect();
        let out = Tensor::new(vec![1, c], data)?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::ChannelMean(x), rg))
    }

    /// Multiplies channel `c` of `x: [C, ...]` by `gate[c]`.
    pub fn scale_channels(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (v, g) = (self.value(x), self.value(gate));
        let c = v.shape()[0];
        if g.numel() != c {
            return Err(shape_err(
                "scale_channels",
                format!("gate has {} entries for {c} channels", g.numel()),
            ));
        }
        let per = v.numel() / c;
        let gd = g.data();
        let data = v
            .data()
            .iter()
            .enumerate()
            .map(|(i, &val)| val * gd[i / per])
            .collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x, gate]);
        Ok(self.push(out, Op::ScaleChannels { x, gate }, rg))
    }

    /// Mean squared error between `pred: [C, ...]` and a constant target,
    /// averaged over masked positions times channels. `mask` covers the
    /// non-channel positions; `None` means every position counts.
    pub fn mse_loss(&mut self, pred: Var, target: &Tensor<T>, mask: Option<&[bool]>) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(shape_err(
                "mse_loss",
                format!("prediction {:?} vs target {:?}", p.shape(), target.shape()),
            ));
        }
        let c = p.shape().first().copied().unwrap_or(1);
        let per = p.numel() / c;
        if let Some(m) = mask {
            if m.len() != per {
                return Err(shape_err(
                    "mse_loss",
                    format!("mask has {} entries, expected {per}", m.len()),
                ));
            }
        }
        let active = mask.map_or(per, |m| m.iter().filter(|&&b| b).count());
        if active == 0 {
            return Err(TabsError::data("mse_loss: mask selects no voxels"));
        }
        let count = active * c;
        let mut acc = 0.0f64;
        for (i, (&a, &b)) in p.data().iter().zip(target.data()).enumerate() {
            if mask.is_none_or(|m| m[i % per]) {
                let d = (a - b).as_f64();
                acc += d * d;
            }
        }
        let out = Tensor::scalar(T::from_f64(acc / count as f64));
        let rg = self.requires_grad(pred);
        Ok(self.push(
            out,
            Op::MseLoss {
                pred,
                target: target.clone(),
                mask: mask.map(<[bool]>::to_vec),
                count,
            },
            rg,
        ))
    }

    /// Reverse pass from a single-element `loss`. The tape is left intact.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(TabsError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn buf<'a>(&self, grads: &'a mut [Option<Tensor<T>>], v: Var) -> Option<&'a mut [T]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        slot.as_mut().map(Tensor::data_mut)
    }

    fn propagate(&self, op: &Op<T>, out: &Tensor<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(buf) = self.buf(grads, v) {
                        buf.iter_mut().zip(gd).for_each(|(d, &s)| *d += s);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(buf) = self.buf(grads, *a) {
                    for i in 0..buf.len() {
                        buf[i] += gd[i] * vb[i];
                    }
                }
                if let Some(buf) = self.buf(grads, *b) {
                    for i in 0..buf.len() {
                        buf[i] += gd[i] * va[i];
                    }
                }
            }
            Op::Scale(x, f) => {
                if let Some(buf) = self.buf(grads, *x) {
                    buf.iter_mut().zip(gd).for_each(|(d, &s)| *d += s * *f);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                if let Some(buf) = self.buf(grads, *x) {
                    for i in 0..buf.len() {
                        if xv[i] > T::zero() {
                            buf[i] += gd[i];
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = out.data();
                if let Some(buf) = self.buf(grads, *x) {
                    for i in 0..buf.len() {
                        buf[i] += gd[i] * y[i] * (T::one() - y[i]);
                    }
                }
            }
            Op::Sum(x) => {
                let s = gd[0];
                if let Some(buf) = self.buf(grads, *x) {
                    buf.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::Reshape(x) => {
                if let Some(buf) = self.buf(grads, *x) {
                    buf.iter_mut().zip(gd).for_each(|(d, &s)| *d += s);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                let back = kernels::transpose(gd, r, c);
                if let Some(buf) = self.buf(grads, *x) {
                    buf.iter_mut().zip(&back).for_each(|(d, &s)| *d += s);
                }
            }
            Op::Conv3d { x, w, b, geom } => {
                let xs = self.shape(*x).to_vec();
                let ws = self.shape(*w).to_vec();
                let g_dims = spatial_dims(out.shape());
                let (c_out, c_in) = (ws[0], ws[1]);
                if let Some(buf) = self.buf(grads, *x) {
                    kernels::scatter(
                        gd,
                        g_dims,
                        c_out,
                        self.value(*w).data(),
                        c_in,
                        *geom,
                        buf,
                        spatial_dims(&xs),
                    );
                }
                if let Some(buf) = self.buf(grads, *w) {
                    kernels::weight_grad(
                        gd,
                        g_dims,
                        c_out,
                        self.value(*x).data(),
                        spatial_dims(&xs),
                        c_in,
                        *geom,
                        buf,
                    );
                }
                if let Some(b) = b {
                    self.bias_grad(grads, *b, gd, c_out);
                }
            }
            Op::ConvTranspose3d { x, w, b, geom } => {
                let xs = self.shape(*x).to_vec();
                let ws = self.shape(*w).to_vec();
                let g_dims = spatial_dims(out.shape());
                let (c_in, c_out) = (ws[0], ws[1]);
                if let Some(buf) = self.buf(grads, *x) {
                    kernels::correlate(
                        gd,
                        g_dims,
                        c_out,
                        self.value(*w).data(),
                        c_in,
                        *geom,
                        buf,
                        spatial_dims(&xs),
                    );
                }
                if let Some(buf) = self.buf(grads, *w) {
                    kernels::weight_grad(
                        self.value(*x).data(),
                        spatial_dims(&xs),
                        c_in,
                        gd,
                        g_dims,
                        c_out,
                        *geom,
                        buf,
                    );
                }
                if let Some(b) = b {
                    self.bias_grad(grads, *b, gd, c_out);
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            } => {
                let c = self.shape(*x)[0];
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let mut dx = self.buf(grads, *x).map(|b| b.to_vec());
                let mut dg = self.buf(grads, *gamma).map(|b| b.to_vec());
                let mut db = self.buf(grads, *beta).map(|b| b.to_vec());
                kernels::group_norm_backward(
                    xv,
                    gd,
                    c,
                    *groups,
                    gv,
                    stats,
                    dx.as_deref_mut(),
                    dg.as_deref_mut(),
                    db.as_deref_mut(),
                );
                self.store(grads, *x, dx);
                self.store(grads, *gamma, dg);
                self.store(grads, *beta, db);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let d = *self.shape(*x).last().unwrap_or(&1);
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let mut dx = self.buf(grads, *x).map(|b| b.to_vec());
                let mut dg = self.buf(grads, *gamma).map(|b| b.to_vec());
                let mut db = self.buf(grads, *beta).map(|b| b.to_vec());
                kernels::layer_norm_backward(
                    xv,
                    gd,
                    d,
                    gv,
                    stats,
                    dx.as_deref_mut(),
                    dg.as_deref_mut(),
                    db.as_deref_mut(),
                );
                self.store(grads, *x, dx);
                self.store(grads, *gamma, dg);
                self.store(grads, *beta, db);
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = kernels::split_axis(out.shape(), *axis);
                if let Some(buf) = self.buf(grads, *x) {
                    kernels::softmax_backward(out.data(), gd, outer, len, inner, buf);
                }
            }
            Op::Linear { x, w, b } => {
                let (n, din) = (self.shape(*x)[0], self.shape(*x)[1]);
                let dout = self.shape(*w)[1];
                if let Some(buf) = self.buf(grads, *x) {
                    kernels::matmul_bt_acc(gd, self.value(*w).data(), n, dout, din, buf);
                }
                if let Some(buf) = self.buf(grads, *w) {
                    kernels::matmul_at_acc(self.value(*x).data(), gd, n, din, dout, buf);
                }
                if let Some(b) = b {
                    if let Some(buf) = self.buf(grads, *b) {
                        for row in gd.chunks(dout) {
                            buf.iter_mut().zip(row).for_each(|(d, &s)| *d += s);
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (n, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let m = self.shape(*b)[1];
                if let Some(buf) = self.buf(grads, *a) {
                    kernels::matmul_bt_acc(gd, self.value(*b).data(), n, m, k, buf);
                }
                if let Some(buf) = self.buf(grads, *b) {
                    kernels::matmul_at_acc(self.value(*a).data(), gd, n, k, m, buf);
                }
            }
            Op::ConcatChannels(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if let Some(buf) = self.buf(grads, p) {
                        buf.iter_mut()
                            .zip(&gd[offset..offset + len])
                            .for_each(|(d, &s)| *d += s);
                    }
                    offset += len;
                }
            }
            Op::SliceCols { x, start } => {
                let m = self.shape(*x)[1];
                let len = out.shape()[1];
                if let Some(buf) = self.buf(grads, *x) {
                    for (r, row) in gd.chunks(len).enumerate() {
                        buf[r * m + start..r * m + start + len]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(d, &s)| *d += s);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.shape()[1];
                let mut col = 0;
                for &p in parts {
                    let m = self.shape(p)[1];
                    if let Some(buf) = self.buf(grads, p) {
                        for (r, row) in buf.chunks_mut(m).enumerate() {
                            row.iter_mut()
                                .zip(&gd[r * total + col..r * total + col + m])
                                .for_each(|(d, &s)| *d += s);
                        }
                    }
                    col += m;
                }
            }
            Op::ChannelMean(x) => {
                let v = self.value(*x);
                let per = v.numel() / v.shape()[0];
                let inv = T::one() / T::from_f64(per as f64);
                if let Some(buf) = self.buf(grads, *x) {
                    for (c, chunk) in buf.chunks_mut(per).enumerate() {
                        let s = gd[c] * inv;
                        chunk.iter_mut().for_each(|d| *d += s);
                    }
                }
            }
            Op::ScaleChannels { x, gate } => {
                let xv = self.value(*x).data();
                let gv = self.value(*gate).data();
                let per = xv.len() / gv.len();
                if let Some(buf) = self.buf(grads, *x) {
                    for i in 0..buf.len() {
                        buf[i] += gd[i] * gv[i / per];
                    }
                }
                if let Some(buf) = self.buf(grads, *gate) {
                    for (c, d) in buf.iter_mut().enumerate() {
                        let mut acc = T::zero();
                        for i in c * per..(c + 1) * per {
                            acc += gd[i] * xv[i];
                        }
                        *d += acc;
                    }
                }
            }
            Op::MseLoss {
                pred,
                target,
                mask,
                count,
            } => {
                let pv = self.value(*pred).data();
                let per = pv.len() / target.shape().first().copied().unwrap_or(1);
                let scale = gd[0] * T::from_f64(2.0 / *count as f64);
                if let Some(buf) = self.buf(grads, *pred) {
                    for i in 0..buf.len() {
                        if mask.as_ref().is_none_or(|m| m[i % per]) {
                            buf[i] += scale * (pv[i] - target.data()[i]);
                        }
                    }
                }
            }
        }
    }

    fn bias_grad(&self, grads: &mut [Option<Tensor<T>>], b: Var, gd: &[T], channels: usize) {
        let per = gd.len() / channels;
        if let Some(buf) = self.buf(grads, b) {
            for (c, d) in buf.iter_mut().enumerate() {
                *d += gd[c * per..(c + 1) * per].iter().copied().sum::<T>();
            }
        }
    }

    fn store(&self, grads: &mut [Option<Tensor<T>>], v: Var, data: Option<Vec<T>>) {
        if let Some(data) = data {
            if let Some(buf) = self.buf(grads, v) {
                buf.copy_from_slice(&data);
            }
        }
    }
}

/// Gradients produced by one reverse pass, indexed by [`Var`]. Only leaves
/// that require gradients keep an entry.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_conv_reproduces_input() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..27).map(|i| i as f64 * 0.5 - 3.0).collect();
        let x = tape.constant(t(&[1, 3, 3, 3], &data));
        let w = tape.constant(t(&[1, 1, 1, 1, 1], &[1.0]));
        let b = tape.constant(t(&[1], &[0.0]));
        let y = tape.conv3d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
    }

    #[test]
    fn strided_box_filter_sums_windows() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[1, 4, 4, 4], 1.0));
        let w = tape.constant(Tensor::full(&[1, 1, 2, 2, 2], 1.0));
        let b = tape.constant(t(&[1], &[0.0]));
        let y = tape.conv3d(x, w, Some(b), 2, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 2, 2]);
        assert!(tape.value(y).data().iter().all(|&v| v == 8.0));
    }

    #[test]
    fn zero_input_gives_bias() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[2, 3, 3, 3]));
        let w = tape.constant(Tensor::full(&[2, 2, 3, 3, 3], 0.7));
        let b = tape.constant(t(&[2], &[1.5, -2.0]));
        let y = tape.conv3d(x, w, Some(b), 1, 1).unwrap();
        let v = tape.value(y);
        assert!(v.channel(0).iter().all(|&x| x == 1.5));
        assert!(v.channel(1).iter().all(|&x| x == -2.0));

        let wt = tape.constant(Tensor::full(&[2, 2, 2, 2, 2], 0.3));
        let y = tape.conv_transpose3d(x, wt, Some(b), 2).unwrap();
        assert_eq!(tape.shape(y), &[2, 6, 6, 6]);
        assert!(tape.value(y).channel(1).iter().all(|&x| x == -2.0));
    }

    #[test]
    fn conv_reports_offending_dimension() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[3, 4, 4, 4]));
        let w = tape.constant(Tensor::zeros(&[1, 2, 3, 3, 3]));
        let err = tape.conv3d(x, w, None, 1, 1).unwrap_err().to_string();
        assert!(err.contains("channel dim is 3"), "{err}");
        let x = tape.constant(Tensor::zeros(&[2, 4, 1, 4]));
        let err = tape.conv3d(x, w, None, 1, 0).unwrap_err().to_string();
        assert!(err.contains("spatial dim 2"), "{err}");
    }

    #[test]
    fn single_voxel_transpose_broadcast() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 1, 1, 1], &[2.5]));
        let w = tape.constant(Tensor::full(&[1, 1, 2, 2, 2], 1.0));
        let y = tape.conv_transpose3d(x, w, None, 2).unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 2, 2]);
        assert!(tape.value(y).data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn group_norm_edge_cases() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[4, 2, 2, 2], 3.0));
        let g = tape.constant(Tensor::full(&[4], 1.0));
        let b0 = tape.constant(Tensor::zeros(&[4]));
        let b5 = tape.constant(Tensor::full(&[4], 5.0));
        let y = tape.group_norm(x, 2, g, b0, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        let y = tape.group_norm(x, 2, g, b5, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 5.0));
        assert!(tape.group_norm(x, 3, g, b0, 1e-5).is_err());
    }

    #[test]
    fn softmax_symmetry_and_shift() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        let a = tape.constant(t(&[2, 3], &[0.1, -2.0, 3.0, 1.0, 1.5, -0.5]));
        let shifted = tape.constant(t(&[2, 3], &[100.1, 98.0, 103.0, -9.0, -8.5, -10.5]));
        let ya = tape.softmax(a, 1).unwrap();
        let yb = tape.softmax(shifted, 1).unwrap();
        assert!(tape.value(ya).max_abs_diff(tape.value(yb)) < 1e-12);
        assert!(tape.softmax(a, 2).is_err());
    }

    #[test]
    fn small_building_blocks() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let zero = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.linear(x, eye, Some(zero)).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
        let y = tape.matmul(x, eye).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
        let r = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(r);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn backward_simple_derivatives() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 0.5]), true);
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let xx = tape.mul(x, x).unwrap();
        let s = tape.sum(xx);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);

        // fan-out sums contributions
        let y = tape.add(x, x).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(tape.backward(x), Err(TabsError::Usage(_))));
    }

    #[test]
    fn mse_loss_constant_offset() {
        let mut tape = Tape::<f64>::new();
        let target = Tensor::from_fn(&[3, 2, 2, 2], |i| i as f64 * 0.1);
        let pred = tape.leaf(target.map(|v| v + 0.25), true);
        let l = tape.mse_loss(pred, &target, None).unwrap();
        assert!((tape.value(l).item() - 0.0625).abs() < 1e-15);
        let same = tape.leaf(target.clone(), true);
        let l = tape.mse_loss(same, &target, None).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let mask = vec![false; 8];
        assert!(tape.mse_loss(pred, &target, Some(&mask)).is_err());
    }
}
