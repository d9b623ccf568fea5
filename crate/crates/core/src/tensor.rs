//! Dense activations and the direct (reference) convolution kernels.
//!
//! All tensors are row-major `h -> w -> c`: the channel axis is innermost, so
//! element `(i, j, ch)` lives at `(i * w + j) * c + ch`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorShape {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl TensorShape {
    pub fn new(h: usize, w: usize, c: usize) -> Result<Self> {
        let shape = Self { h, w, c };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        if self.h == 0 || self.w == 0 || self.c == 0 {
            return Err(Error::ShapeMismatch(format!(
                "every dimension must be >= 1, got {self}"
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.h * self.w * self.c
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, ch: usize) -> usize {
        (i * self.w + j) * self.c + ch
    }
}

impl std::fmt::Display for TensorShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.h, self.w, self.c)
    }
}

/// Size class of one activation element for memory accounting.
///
/// This never changes arithmetic: kernels always compute in the tensor's
/// scalar type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum ElemKind {
    #[default]
    Real32,
    Half16,
    Byte8,
}

impl ElemKind {
    pub fn from_bytes(bytes: u32) -> Result<Self> {
        match bytes {
            4 => Ok(ElemKind::Real32),
            2 => Ok(ElemKind::Half16),
            1 => Ok(ElemKind::Byte8),
            other => Err(Error::InvalidBudget(format!(
                "element size must be 1, 2 or 4 bytes, got {other}"
            ))),
        }
    }

    #[inline]
    pub fn bytes(self) -> u64 {
        match self {
            ElemKind::Real32 => 4,
            ElemKind::Half16 => 2,
            ElemKind::Byte8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: TensorShape,
    elem: ElemKind,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: TensorShape) -> Self {
        Self {
            shape,
            elem: ElemKind::default(),
            data: vec![T::zero(); shape.len()],
        }
    }

    pub fn filled(shape: TensorShape, value: T) -> Self {
        Self {
            shape,
            elem: ElemKind::default(),
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: TensorShape, data: Vec<T>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.len() {
            return Err(Error::ShapeMismatch(format!(
                "{shape} needs {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch("tensor values must be finite".into()));
        }
        Ok(Self {
            shape,
            elem: ElemKind::default(),
            data,
        })
    }

    pub fn from_fn(shape: TensorShape, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for i in 0..shape.h {
            for j in 0..shape.w {
                for ch in 0..shape.c {
                    data.push(f(i, j, ch));
                }
            }
        }
        Self {
            shape,
            elem: ElemKind::default(),
            data,
        }
    }

    pub fn with_elem(mut self, elem: ElemKind) -> Self {
        self.elem = elem;
        self
    }

    #[inline]
    pub fn shape(&self) -> TensorShape {
        self.shape
    }

    #[inline]
    pub fn elem(&self) -> ElemKind {
        self.elem
    }

    /// Bytes this tensor occupies under its accounting element kind.
    pub fn accounted_bytes(&self) -> u64 {
        self.shape.len() as u64 * self.elem.bytes()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, ch: usize) -> T {
        self.data[self.shape.index(i, j, ch)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, ch: usize, v: T) {
        let idx = self.shape.index(i, j, ch);
        self.data[idx] = v;
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            elem: self.elem,
            data: self.data.iter().map(|v| U::from_real(v.as_f64())).collect(),
        }
    }

    /// Copy of the `h x w` window starting at `(row0, col0)`, all channels.
    pub fn crop(&self, row0: usize, col0: usize, h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 || row0 + h > self.shape.h || col0 + w > self.shape.w {
            return Err(Error::ShapeMismatch(format!(
                "window {h}x{w} at ({row0},{col0}) is outside {}",
                self.shape
            )));
        }
        let shape = TensorShape { h, w, c: self.shape.c };
        let row_len = w * self.shape.c;
        let mut data = Vec::with_capacity(shape.len());
        for i in row0..row0 + h {
            let start = self.shape.index(i, col0, 0);
            data.extend_from_slice(&self.data[start..start + row_len]);
        }
        Ok(Self {
            shape,
            elem: self.elem,
            data,
        })
    }
}

/// `floor((d + 2p - k) / s) + 1`, or `None` when the window does not fit.
#[inline]
pub fn conv_out_dim(d: usize, k: usize, p: usize, s: usize) -> Option<usize> {
    if s == 0 || k == 0 || d + 2 * p < k {
        return None;
    }
    Some((d + 2 * p - k) / s + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvParams {
    pub k_h: usize,
    pub k_w: usize,
    pub s: usize,
    pub p_h: usize,
    pub p_w: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl ConvParams {
    pub fn output_shape(&self, input: TensorShape) -> Result<TensorShape> {
        if input.c != self.c_in {
            return Err(Error::ShapeMismatch(format!(
                "conv expects {} input channels, got {input}",
                self.c_in
            )));
        }
        if self.c_out == 0 {
            return Err(Error::EmptyOutput("c_out must be >= 1".into()));
        }
        let h = conv_out_dim(input.h, self.k_h, self.p_h, self.s);
        let w = conv_out_dim(input.w, self.k_w, self.p_w, self.s);
        match (h, w) {
            (Some(h), Some(w)) => Ok(TensorShape { h, w, c: self.c_out }),
            _ => Err(Error::EmptyOutput(format!(
                "{}x{} kernel, stride {}, padding ({}, {}) on {input}",
                self.k_h, self.k_w, self.s, self.p_h, self.p_w
            ))),
        }
    }
}

/// Full convolution weights, layout `[k_h][k_w][c_in][c_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel<T> {
    pub k_h: usize,
    pub k_w: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> ConvKernel<T> {
    pub fn new(k_h: usize, k_w: usize, c_in: usize, c_out: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != k_h * k_w * c_in * c_out {
            return Err(Error::ShapeMismatch(format!(
                "conv kernel {k_h}x{k_w}x{c_in}x{c_out} needs {} values, got {}",
                k_h * k_w * c_in * c_out,
                data.len()
            )));
        }
        Ok(Self { k_h, k_w, c_in, c_out, data })
    }

    #[inline]
    pub fn at(&self, kh: usize, kw: usize, ci: usize, co: usize) -> T {
        self.data[((kh * self.k_w + kw) * self.c_in + ci) * self.c_out + co]
    }
}

/// 1x1 convolution weights, layout `[c_in][c_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointwiseKernel<T> {
    pub c_in: usize,
    pub c_out: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> PointwiseKernel<T> {
    pub fn new(c_in: usize, c_out: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != c_in * c_out {
            return Err(Error::ShapeMismatch(format!(
                "pointwise kernel {c_in}x{c_out} needs {} values, got {}",
                c_in * c_out,
                data.len()
            )));
        }
        Ok(Self { c_in, c_out, data })
    }

    pub fn identity(c: usize) -> Self {
        let mut data = vec![T::zero(); c * c];
        for i in 0..c {
            data[i * c + i] = T::one();
        }
        Self { c_in: c, c_out: c, data }
    }

    #[inline]
    pub fn at(&self, ci: usize, co: usize) -> T {
        self.data[ci * self.c_out + co]
    }

    pub fn as_conv(&self) -> ConvKernel<T> {
        ConvKernel {
            k_h: 1,
            k_w: 1,
            c_in: self.c_in,
            c_out: self.c_out,
            data: self.data.clone(),
        }
    }
}

/// One spatial filter per channel, layout `[c][k_h][k_w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthwiseKernel<T> {
    pub c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> DepthwiseKernel<T> {
    pub fn new(c: usize, k_h: usize, k_w: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != c * k_h * k_w {
            return Err(Error::ShapeMismatch(format!(
                "depthwise kernel {c}x{k_h}x{k_w} needs {} values, got {}",
                c * k_h * k_w,
                data.len()
            )));
        }
        Ok(Self { c, k_h, k_w, data })
    }

    #[inline]
    pub fn at(&self, ch: usize, kh: usize, kw: usize) -> T {
        self.data[(ch * self.k_h + kh) * self.k_w + kw]
    }

    /// The filters of one channel, row-major `[k_h][k_w]`.
    #[inline]
    pub fn channel(&self, ch: usize) -> &[T] {
        let n = self.k_h * self.k_w;
        &self.data[ch * n..(ch + 1) * n]
    }

    /// Equivalent full kernel with every cross-channel tap zeroed.
    pub fn to_block_diagonal(&self) -> ConvKernel<T> {
        let mut data = vec![T::zero(); self.k_h * self.k_w * self.c * self.c];
        for kh in 0..self.k_h {
            for kw in 0..self.k_w {
                for ch in 0..self.c {
                    data[((kh * self.k_w + kw) * self.c + ch) * self.c + ch] = self.at(ch, kh, kw);
                }
            }
        }
        ConvKernel {
            k_h: self.k_h,
            k_w: self.k_w,
            c_in: self.c,
            c_out: self.c,
            data,
        }
    }
}

/// Direct convolution over raw `h -> w -> c` buffers with zero padding.
///
/// This is the six-loop reference every optimized path is checked against.
pub(crate) fn conv2d_direct<T: Scalar>(
    x: &[T],
    in_shape: TensorShape,
    kernel: &ConvKernel<T>,
    params: &ConvParams,
    out: &mut [T],
    out_shape: TensorShape,
) {
    let (ph, pw) = (params.p_h as isize, params.p_w as isize);
    for oi in 0..out_shape.h {
        for oj in 0..out_shape.w {
            for co in 0..params.c_out {
                let mut acc = T::zero();
                for kh in 0..params.k_h {
                    let ii = (oi * params.s + kh) as isize - ph;
                    if ii < 0 || ii >= in_shape.h as isize {
                        continue;
                    }
                    for kw in 0..params.k_w {
                        let jj = (oj * params.s + kw) as isize - pw;
                        if jj < 0 || jj >= in_shape.w as isize {
                            continue;
                        }
                        let base = in_shape.index(ii as usize, jj as usize, 0);
                        for ci in 0..params.c_in {
                            acc += x[base + ci] * kernel.at(kh, kw, ci, co);
                        }
                    }
                }
                out[out_shape.index(oi, oj, co)] = acc;
            }
        }
    }
}

fn check_kernel_matches<T>(kernel: &ConvKernel<T>, params: &ConvParams) -> Result<()> {
    if kernel.k_h != params.k_h
        || kernel.k_w != params.k_w
        || kernel.c_in != params.c_in
        || kernel.c_out != params.c_out
    {
        return Err(Error::ShapeMismatch(format!(
            "kernel {}x{}x{}x{} does not match params {}x{}x{}x{}",
            kernel.k_h,
            kernel.k_w,
            kernel.c_in,
            kernel.c_out,
            params.k_h,
            params.k_w,
            params.c_in,
            params.c_out
        )));
    }
    Ok(())
}

/// Reference convolution: no algorithmic shortcuts, zero padding, no bias.
pub fn conv2d_naive<T: Scalar>(
    x: &Tensor<T>,
    kernel: &ConvKernel<T>,
    params: &ConvParams,
) -> Result<Tensor<T>> {
    check_kernel_matches(kernel, params)?;
    let out_shape = params.output_shape(x.shape())?;
    let mut out = Tensor::zeros(out_shape).with_elem(x.elem());
    conv2d_direct(x.data(), x.shape(), kernel, params, out.data_mut(), out_shape);
    Ok(out)
}

/// 1x1 convolution. Accumulates over input channels in index order, the same
/// order [`conv2d_naive`] uses for a 1x1 kernel, so the two agree exactly.
pub fn pointwise_conv<T: Scalar>(x: &Tensor<T>, kernel: &PointwiseKernel<T>) -> Result<Tensor<T>> {
    let shape = x.shape();
    if kernel.c_in != shape.c {
        return Err(Error::ShapeMismatch(format!(
            "pointwise kernel expects {} channels, input is {shape}",
            kernel.c_in
        )));
    }
    let out_shape = TensorShape { c: kernel.c_out, ..shape };
    let mut out = Tensor::zeros(out_shape).with_elem(x.elem());
    let src = x.data();
    let dst = out.data_mut();
    for (px, pixel) in src.chunks_exact(shape.c).enumerate() {
        let row = &mut dst[px * kernel.c_out..(px + 1) * kernel.c_out];
        for (co, slot) in row.iter_mut().enumerate() {
            let mut acc = T::zero();
            for (ci, &v) in pixel.iter().enumerate() {
                acc += v * kernel.at(ci, co);
            }
            *slot = acc;
        }
    }
    Ok(out)
}

pub fn depthwise_conv<T: Scalar>(
    x: &Tensor<T>,
    kernel: &DepthwiseKernel<T>,
    s: usize,
    p_h: usize,
    p_w: usize,
) -> Result<Tensor<T>> {
    let shape = x.shape();
    if kernel.c != shape.c {
        return Err(Error::ShapeMismatch(format!(
            "depthwise kernel has {} channels, input is {shape}",
            kernel.c
        )));
    }
    let (h_o, w_o) = match (
        conv_out_dim(shape.h, kernel.k_h, p_h, s),
        conv_out_dim(shape.w, kernel.k_w, p_w, s),
    ) {
        (Some(h), Some(w)) => (h, w),
        _ => {
            return Err(Error::EmptyOutput(format!(
                "depthwise {}x{} stride {s} on {shape}",
                kernel.k_h, kernel.k_w
            )))
        }
    };
    let out_shape = TensorShape { h: h_o, w: w_o, c: shape.c };
    let mut out = Tensor::zeros(out_shape).with_elem(x.elem());
    let src = x.data();
    for oi in 0..h_o {
        for oj in 0..w_o {
            for ch in 0..shape.c {
                let taps = kernel.channel(ch);
                let mut acc = T::zero();
                for kh in 0..kernel.k_h {
                    let ii = (oi * s + kh) as isize - p_h as isize;
                    if ii < 0 || ii >= shape.h as isize {
                        continue;
                    }
                    for kw in 0..kernel.k_w {
                        let jj = (oj * s + kw) as isize - p_w as isize;
                        if jj < 0 || jj >= shape.w as isize {
                            continue;
                        }
                        acc += src[shape.index(ii as usize, jj as usize, ch)]
                            * taps[kh * kernel.k_w + kw];
                    }
                }
                out.data_mut()[out_shape.index(oi, oj, ch)] = acc;
            }
        }
    }
    Ok(out)
}

#[inline]
pub fn relu6<T: Scalar>(v: T) -> T {
    let six = T::from_real(6.0);
    v.max(T::zero()).min(six)
}

/// Per-channel `scale * x + bias`, optionally clamped to `[0, 6]`.
pub fn channel_affine_relu6<T: Scalar>(
    x: &Tensor<T>,
    scale: &[T],
    bias: &[T],
    apply_relu6: bool,
) -> Result<Tensor<T>> {
    let c = x.shape().c;
    if scale.len() != c || bias.len() != c {
        return Err(Error::ShapeMismatch(format!(
            "affine params have lengths {}/{}, tensor has {c} channels",
            scale.len(),
            bias.len()
        )));
    }
    let mut out = x.clone();
    for pixel in out.data_mut().chunks_exact_mut(c) {
        for ((v, &a), &b) in pixel.iter_mut().zip(scale).zip(bias) {
            let y = a * *v + b;
            *v = if apply_relu6 { relu6(y) } else { y };
        }
    }
    Ok(out)
}
