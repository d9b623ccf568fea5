//! Inverted-residual bottleneck: point-wise expansion, 3x3 depth-wise,
//! linear point-wise reduction, optional skip connection.
//!
//! Two execution orders are provided. [`bottleneck_standard`] materializes
//! every stage in full. [`bottleneck_reordered`] walks the expanded channels
//! one at a time: each channel is expanded, filtered depth-wise and
//! immediately folded into the block output, so only two single-channel
//! planes ever exist besides the block input and output.

use serde::{Deserialize, Serialize};

use crate::arena::{Arena, Frame};
use crate::error::{Error, Result};
use crate::planner::{BottleneckFootprint, ExecMode};
use crate::scalar::Scalar;
use crate::tensor::{
    channel_affine_relu6, conv_out_dim, depthwise_conv, pointwise_conv, relu6, DepthwiseKernel,
    PointwiseKernel, Tensor, TensorShape,
};

pub const DW_KERNEL: usize = 3;
pub const DW_PADDING: usize = 1;

/// Presence of a per-channel scale/bias after a stage, and whether it is
/// followed by ReLU6.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageAffine {
    pub relu6: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BottleneckSpec {
    pub c_in: usize,
    pub t: usize,
    pub s: usize,
    pub c_out: usize,
    pub residual: bool,
    pub expand_affine: Option<StageAffine>,
    pub dw_affine: Option<StageAffine>,
}

impl BottleneckSpec {
    /// Width of the expanded representation, `t * c_in`.
    #[inline]
    pub fn expanded(&self) -> usize {
        self.t * self.c_in
    }

    fn dw_out_dims(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        Some((
            conv_out_dim(h, DW_KERNEL, DW_PADDING, self.s)?,
            conv_out_dim(w, DW_KERNEL, DW_PADDING, self.s)?,
        ))
    }

    /// Output shape for `input`, checking the spec against it (including
    /// residual legality).
    pub fn output_shape(&self, input: TensorShape) -> Result<TensorShape> {
        self.validate_alone()?;
        input.validate()?;
        if input.c != self.c_in {
            return Err(Error::ShapeMismatch(format!(
                "bottleneck expects {} input channels, got {input}",
                self.c_in
            )));
        }
        let (h, w) = self.dw_out_dims(input.h, input.w).ok_or_else(|| {
            Error::EmptyOutput(format!("depth-wise stride {} on {input}", self.s))
        })?;
        let out = TensorShape { h, w, c: self.c_out };
        if self.residual && out != input {
            return Err(Error::InvalidBottleneck(format!(
                "residual needs matching shapes, but {input} maps to {out} (stride {})",
                self.s
            )));
        }
        Ok(out)
    }

    fn validate_alone(&self) -> Result<()> {
        if self.c_in == 0 || self.c_out == 0 {
            return Err(Error::InvalidBottleneck("channel counts must be >= 1".into()));
        }
        if self.t == 0 {
            return Err(Error::InvalidBottleneck("expansion ratio must be >= 1".into()));
        }
        if !matches!(self.s, 1 | 2) {
            return Err(Error::InvalidBottleneck(format!(
                "depth-wise stride must be 1 or 2, got {}",
                self.s
            )));
        }
        Ok(())
    }

    /// Number of scalar weights this block carries.
    pub fn weight_count(&self) -> usize {
        let n = self.expanded();
        let affine = 2 * n * (usize::from(self.expand_affine.is_some()) + usize::from(self.dw_affine.is_some()));
        n * self.c_in + n * DW_KERNEL * DW_KERNEL + self.c_out * n + affine
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineParams<T> {
    pub scale: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> AffineParams<T> {
    pub fn identity(c: usize) -> Self {
        Self {
            scale: vec![T::one(); c],
            bias: vec![T::zero(); c],
        }
    }

    fn cast<U: Scalar>(&self) -> AffineParams<U> {
        AffineParams {
            scale: self.scale.iter().map(|v| U::from_real(v.as_f64())).collect(),
            bias: self.bias.iter().map(|v| U::from_real(v.as_f64())).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BottleneckWeights<T> {
    /// Expansion filters, `[t*c_in][c_in]`: row `n` produces expanded channel `n`.
    pub expand: Vec<T>,
    /// Depth-wise filters, `[t*c_in][3][3]`.
    pub dw: DepthwiseKernel<T>,
    /// Reduction filters, `[c_out][t*c_in]`.
    pub reduce: Vec<T>,
    pub expand_affine: Option<AffineParams<T>>,
    pub dw_affine: Option<AffineParams<T>>,
}

impl<T: Scalar> BottleneckWeights<T> {
    pub fn zeros(spec: &BottleneckSpec) -> Self {
        let n = spec.expanded();
        Self {
            expand: vec![T::zero(); n * spec.c_in],
            dw: DepthwiseKernel {
                c: n,
                k_h: DW_KERNEL,
                k_w: DW_KERNEL,
                data: vec![T::zero(); n * DW_KERNEL * DW_KERNEL],
            },
            reduce: vec![T::zero(); spec.c_out * n],
            expand_affine: spec.expand_affine.map(|_| AffineParams::identity(n)),
            dw_affine: spec.dw_affine.map(|_| AffineParams::identity(n)),
        }
    }

    pub fn check(&self, spec: &BottleneckSpec) -> Result<()> {
        let n = spec.expanded();
        let bad = |what: &str| Err(Error::ShapeMismatch(format!("bottleneck weights: {what}")));
        if self.expand.len() != n * spec.c_in {
            return bad("expand length");
        }
        if self.dw.c != n || self.dw.k_h != DW_KERNEL || self.dw.k_w != DW_KERNEL
            || self.dw.data.len() != n * DW_KERNEL * DW_KERNEL
        {
            return bad("depth-wise kernel dims");
        }
        if self.reduce.len() != spec.c_out * n {
            return bad("reduce length");
        }
        for (present, params, name) in [
            (spec.expand_affine.is_some(), &self.expand_affine, "expand affine"),
            (spec.dw_affine.is_some(), &self.dw_affine, "depth-wise affine"),
        ] {
            match params {
                Some(p) if present && p.scale.len() == n && p.bias.len() == n => {}
                None if !present => {}
                _ => return bad(name),
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> BottleneckWeights<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::from_real(x.as_f64())).collect::<Vec<U>>();
        BottleneckWeights {
            expand: conv(&self.expand),
            dw: DepthwiseKernel {
                c: self.dw.c,
                k_h: self.dw.k_h,
                k_w: self.dw.k_w,
                data: conv(&self.dw.data),
            },
            reduce: conv(&self.reduce),
            expand_affine: self.expand_affine.as_ref().map(AffineParams::cast),
            dw_affine: self.dw_affine.as_ref().map(AffineParams::cast),
        }
    }

    /// Expansion weights as a `[c_in][t*c_in]` point-wise kernel.
    fn expand_kernel(&self, spec: &BottleneckSpec) -> PointwiseKernel<T> {
        let n = spec.expanded();
        let mut data = vec![T::zero(); spec.c_in * n];
        for e in 0..n {
            for ci in 0..spec.c_in {
                data[ci * n + e] = self.expand[e * spec.c_in + ci];
            }
        }
        PointwiseKernel { c_in: spec.c_in, c_out: n, data }
    }

    /// Reduction weights as a `[t*c_in][c_out]` point-wise kernel.
    fn reduce_kernel(&self, spec: &BottleneckSpec) -> PointwiseKernel<T> {
        let n = spec.expanded();
        let mut data = vec![T::zero(); n * spec.c_out];
        for o in 0..spec.c_out {
            for e in 0..n {
                data[e * spec.c_out + o] = self.reduce[o * n + e];
            }
        }
        PointwiseKernel { c_in: n, c_out: spec.c_out, data }
    }
}

/// All three stages at full width, then the skip connection.
pub fn bottleneck_standard<T: Scalar>(
    x: &Tensor<T>,
    spec: &BottleneckSpec,
    w: &BottleneckWeights<T>,
) -> Result<Tensor<T>> {
    let out_shape = spec.output_shape(x.shape())?;
    w.check(spec)?;

    let mut y = pointwise_conv(x, &w.expand_kernel(spec))?;
    if let (Some(a), Some(p)) = (spec.expand_affine, &w.expand_affine) {
        y = channel_affine_relu6(&y, &p.scale, &p.bias, a.relu6)?;
    }
    y = depthwise_conv(&y, &w.dw, spec.s, DW_PADDING, DW_PADDING)?;
    if let (Some(a), Some(p)) = (spec.dw_affine, &w.dw_affine) {
        y = channel_affine_relu6(&y, &p.scale, &p.bias, a.relu6)?;
    }
    let mut out = pointwise_conv(&y, &w.reduce_kernel(spec))?;
    debug_assert_eq!(out.shape(), out_shape);
    if spec.residual {
        for (o, &v) in out.data_mut().iter_mut().zip(x.data()) {
            *o += v;
        }
    }
    Ok(out)
}

/// Channel-at-a-time execution through `arena`.
///
/// The input is copied into the arena, processed, and the result copied
/// back out; the arena returns to its entry cursor. Its high-water mark
/// rises by exactly the reordered footprint of the block.
pub fn bottleneck_reordered<T: Scalar>(
    x: &Tensor<T>,
    spec: &BottleneckSpec,
    w: &BottleneckWeights<T>,
    arena: &mut Arena<T>,
) -> Result<Tensor<T>> {
    let in_shape = x.shape();
    let out_shape = spec.output_shape(in_shape)?;
    w.check(spec)?;

    let input = arena.alloc(in_shape.len())?;
    arena.slice_mut(input)?.copy_from_slice(x.data());
    let output = match reordered_in_arena(arena, input, in_shape, spec, w) {
        Ok(f) => f,
        Err(e) => {
            arena.free(input)?;
            return Err(e);
        }
    };
    let data = arena.slice(output)?.to_vec();
    arena.free(output)?;
    arena.free(input)?;
    Tensor::from_vec(out_shape, data).map(|t| t.with_elem(x.elem()))
}

/// Runs the reordered block on an input already resident in `arena`
/// (`input` must be the top frame). Returns the output frame, allocated
/// directly above the input; the input stays live.
pub(crate) fn reordered_in_arena<T: Scalar>(
    arena: &mut Arena<T>,
    input: Frame,
    in_shape: TensorShape,
    spec: &BottleneckSpec,
    w: &BottleneckWeights<T>,
) -> Result<Frame> {
    let out_shape = spec.output_shape(in_shape)?;
    let n_expanded = spec.expanded();
    let plane_in = in_shape.plane();
    let plane_out = out_shape.plane();

    let output = arena.alloc(out_shape.len())?;
    for n in 0..n_expanded {
        let expanded = match arena.alloc(plane_in) {
            Ok(f) => f,
            Err(e) => {
                arena.free(output)?;
                return Err(e);
            }
        };
        let filtered = match arena.alloc(plane_out) {
            Ok(f) => f,
            Err(e) => {
                arena.free(expanded)?;
                arena.free(output)?;
                return Err(e);
            }
        };
        {
            let [x, out, exp, filt] = arena.slices_mut([input, output, expanded, filtered])?;

            let row = &w.expand[n * spec.c_in..(n + 1) * spec.c_in];
            expand_channel(x, spec.c_in, row, exp);
            if let (Some(a), Some(p)) = (spec.expand_affine, &w.expand_affine) {
                affine_plane(exp, p.scale[n], p.bias[n], a.relu6);
            }

            depthwise_plane(exp, in_shape.h, in_shape.w, w.dw.channel(n), spec.s, filt, out_shape.w);
            if let (Some(a), Some(p)) = (spec.dw_affine, &w.dw_affine) {
                affine_plane(filt, p.scale[n], p.bias[n], a.relu6);
            }

            accumulate_reduction(filt, &w.reduce, n, n_expanded, spec.c_out, out);
        }
        arena.free(filtered)?;
        arena.free(expanded)?;
    }

    if spec.residual {
        let [x, out] = arena.slices_mut([input, output])?;
        for (o, &v) in out.iter_mut().zip(x.iter()) {
            *o += v;
        }
    }
    Ok(output)
}

/// `plane[p] = sum_ci x[p, ci] * row[ci]`.
fn expand_channel<T: Scalar>(x: &[T], c_in: usize, row: &[T], plane: &mut [T]) {
    for (dst, pixel) in plane.iter_mut().zip(x.chunks_exact(c_in)) {
        let mut acc = T::zero();
        for (&v, &k) in pixel.iter().zip(row) {
            acc += v * k;
        }
        *dst = acc;
    }
}

fn affine_plane<T: Scalar>(plane: &mut [T], scale: T, bias: T, clamp: bool) {
    for v in plane.iter_mut() {
        let y = scale * *v + bias;
        *v = if clamp { relu6(y) } else { y };
    }
}

fn depthwise_plane<T: Scalar>(
    src: &[T],
    h: usize,
    w: usize,
    taps: &[T],
    s: usize,
    dst: &mut [T],
    w_out: usize,
) {
    let pad = DW_PADDING as isize;
    for (idx, out) in dst.iter_mut().enumerate() {
        let (oi, oj) = (idx / w_out, idx % w_out);
        let mut acc = T::zero();
        for kh in 0..DW_KERNEL {
            let ii = (oi * s + kh) as isize - pad;
            if ii < 0 || ii >= h as isize {
                continue;
            }
            let src_row = &src[ii as usize * w..(ii as usize + 1) * w];
            for kw in 0..DW_KERNEL {
                let jj = (oj * s + kw) as isize - pad;
                if jj < 0 || jj >= w as isize {
                    continue;
                }
                acc += src_row[jj as usize] * taps[kh * DW_KERNEL + kw];
            }
        }
        *out = acc;
    }
}

/// `out[p, o] += plane[p] * reduce[o][n]`.
fn accumulate_reduction<T: Scalar>(
    plane: &[T],
    reduce: &[T],
    n: usize,
    n_expanded: usize,
    c_out: usize,
    out: &mut [T],
) {
    for (&v, pixel) in plane.iter().zip(out.chunks_exact_mut(c_out)) {
        for (o, dst) in pixel.iter_mut().enumerate() {
            *dst += v * reduce[o * n_expanded + n];
        }
    }
}

/// Activation footprint of one block in elements, for either execution order.
pub fn bottleneck_footprint(
    spec: &BottleneckSpec,
    in_shape: TensorShape,
    mode: ExecMode,
) -> Result<BottleneckFootprint> {
    let out = spec.output_shape(in_shape)?;
    let overflow = || Error::Overflow(format!("bottleneck footprint on {in_shape}"));
    let mul = |a: usize, b: usize| (a as u64).checked_mul(b as u64).ok_or_else(overflow);

    let input = mul(in_shape.plane(), in_shape.c)?;
    let output = mul(out.plane(), out.c)?;
    let n = spec.expanded();
    let total_elements = match mode {
        ExecMode::Reordered => [input, in_shape.plane() as u64, out.plane() as u64, output]
            .iter()
            .try_fold(0u64, |acc, &v| acc.checked_add(v))
            .ok_or_else(overflow)?,
        ExecMode::Standard => {
            let expanded = mul(in_shape.plane(), n)?;
            let filtered = mul(out.plane(), n)?;
            let stages = [
                input.checked_add(expanded),
                expanded.checked_add(filtered),
                filtered.checked_add(output),
            ];
            stages
                .into_iter()
                .try_fold(0u64, |acc, v| v.map(|v| acc.max(v)))
                .ok_or_else(overflow)?
        }
    };
    Ok(BottleneckFootprint {
        mode,
        h_i: in_shape.h,
        w_i: in_shape.w,
        c_i: in_shape.c,
        h_p: in_shape.h,
        w_p: in_shape.w,
        h_d: out.h,
        w_d: out.w,
        h_o: out.h,
        w_o: out.w,
        c_o: out.c,
        total_elements,
    })
}
