//! Whole-network description: segmentation layout, one op chain per patch
//! tunnel, and the summation head.

use crate::bottleneck::{AffineParams, BottleneckSpec, BottleneckWeights, StageAffine};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::segmentation::PatchLayout;
use crate::tensor::{ConvKernel, ConvParams, TensorShape};

/// Optional first convolution of a tunnel. Input channels come from the
/// patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StemSpec {
    pub k_h: usize,
    pub k_w: usize,
    pub s: usize,
    pub p_h: usize,
    pub p_w: usize,
    pub c_out: usize,
    pub affine: Option<StageAffine>,
}

impl StemSpec {
    pub fn params(&self, c_in: usize) -> ConvParams {
        ConvParams {
            k_h: self.k_h,
            k_w: self.k_w,
            s: self.s,
            p_h: self.p_h,
            p_w: self.p_w,
            c_in,
            c_out: self.c_out,
        }
    }

    pub fn weight_count(&self, c_in: usize) -> usize {
        self.k_h * self.k_w * c_in * self.c_out + self.affine.map_or(0, |_| 2 * self.c_out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct TunnelSpec {
    pub stem: Option<StemSpec>,
    pub bottlenecks: Vec<BottleneckSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Stem(ConvParams),
    Bottleneck(BottleneckSpec),
}

/// One op of a tunnel with its resolved shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OpStep {
    pub index: usize,
    pub kind: OpKind,
    pub in_shape: TensorShape,
    pub out_shape: TensorShape,
}

impl OpStep {
    pub fn label(&self) -> String {
        match self.kind {
            OpKind::Stem(_) => "stem".to_string(),
            OpKind::Bottleneck(_) => format!("bottleneck {}", self.index),
        }
    }
}

impl TunnelSpec {
    /// Type-checks the chain from `input` and returns every op with shapes.
    pub fn walk(&self, input: TensorShape) -> Result<Vec<OpStep>> {
        input.validate()?;
        if self.stem.is_none() && self.bottlenecks.is_empty() {
            return Err(Error::InvalidNetwork("a tunnel needs at least one op".into()));
        }
        let mut steps = Vec::with_capacity(self.bottlenecks.len() + 1);
        let mut shape = input;
        if let Some(stem) = &self.stem {
            let params = stem.params(shape.c);
            let out = params.output_shape(shape)?;
            steps.push(OpStep { index: 0, kind: OpKind::Stem(params), in_shape: shape, out_shape: out });
            shape = out;
        }
        for (i, b) in self.bottlenecks.iter().enumerate() {
            if b.c_in != shape.c {
                return Err(Error::InvalidNetwork(format!(
                    "bottleneck {i} declares {} input channels but receives {shape}",
                    b.c_in
                )));
            }
            let out = b.output_shape(shape)?;
            steps.push(OpStep {
                index: i,
                kind: OpKind::Bottleneck(*b),
                in_shape: shape,
                out_shape: out,
            });
            shape = out;
        }
        Ok(steps)
    }

    pub fn output_shape(&self, input: TensorShape) -> Result<TensorShape> {
        Ok(self.walk(input)?.last().map(|s| s.out_shape).unwrap_or(input))
    }

    pub fn weight_count(&self, c_in: usize) -> usize {
        self.stem.map_or(0, |s| s.weight_count(c_in))
            + self.bottlenecks.iter().map(BottleneckSpec::weight_count).sum::<usize>()
    }

    /// Builds a chain, filling in each bottleneck's input channel count.
    pub fn chain(input_c: usize, stem: Option<StemSpec>, blocks: &[BlockConfig]) -> Self {
        let mut c = stem.map_or(input_c, |s| s.c_out);
        let bottlenecks = blocks
            .iter()
            .map(|b| {
                let spec = BottleneckSpec {
                    c_in: c,
                    t: b.t,
                    s: b.s,
                    c_out: b.c_out,
                    residual: b.residual,
                    expand_affine: b.expand_affine,
                    dw_affine: b.dw_affine,
                };
                c = b.c_out;
                spec
            })
            .collect();
        Self { stem, bottlenecks }
    }
}

/// A bottleneck without its input width, as written in model documents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockConfig {
    pub t: usize,
    pub s: usize,
    pub c_out: usize,
    pub residual: bool,
    pub expand_affine: Option<StageAffine>,
    pub dw_affine: Option<StageAffine>,
}

impl From<&BottleneckSpec> for BlockConfig {
    fn from(b: &BottleneckSpec) -> Self {
        Self {
            t: b.t,
            s: b.s,
            c_out: b.c_out,
            residual: b.residual,
            expand_affine: b.expand_affine,
            dw_affine: b.dw_affine,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct HeadSpec {
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct NetworkSpec {
    pub input: TensorShape,
    pub layout: PatchLayout,
    /// One entry per patch: grid patches in row-major order, then the
    /// central patch when the layout has one.
    pub tunnels: Vec<TunnelSpec>,
    pub head: HeadSpec,
}

impl NetworkSpec {
    pub fn patch_shape(&self) -> Result<TensorShape> {
        self.layout.patch_shape(self.input)
    }

    /// Checks every invariant; returns the common final channel count.
    pub fn validate(&self) -> Result<usize> {
        self.input.validate()?;
        let patch = self.patch_shape()?;
        if self.tunnels.len() != self.layout.patch_count() {
            return Err(Error::InvalidNetwork(format!(
                "layout yields {} patches but {} tunnels are declared",
                self.layout.patch_count(),
                self.tunnels.len()
            )));
        }
        if self.head.classes == 0 {
            return Err(Error::InvalidNetwork("head needs at least one class".into()));
        }
        let mut c_final = None;
        for (i, tunnel) in self.tunnels.iter().enumerate() {
            let out = tunnel
                .output_shape(patch)
                .map_err(|e| Error::InvalidNetwork(format!("tunnel {i}: {e}")))?;
            match c_final {
                None => c_final = Some(out.c),
                Some(c) if c != out.c => {
                    return Err(Error::InvalidNetwork(format!(
                        "tunnel {i} ends with {} channels, tunnel 0 with {c}",
                        out.c
                    )))
                }
                _ => {}
            }
        }
        c_final.ok_or_else(|| Error::InvalidNetwork("no tunnels".into()))
    }

    pub fn c_final(&self) -> Result<usize> {
        self.validate()
    }

    /// Total scalar weights across all tunnels and the head.
    pub fn weight_count(&self) -> Result<usize> {
        let c_final = self.validate()?;
        let tunnels: usize = self.tunnels.iter().map(|t| t.weight_count(self.input.c)).sum();
        Ok(tunnels + c_final * self.head.classes)
    }

    /// The same network with the central patch and its tunnel removed.
    pub fn without_central(&self) -> Self {
        let mut out = self.clone();
        if out.layout.central {
            out.layout.central = false;
            out.tunnels.pop();
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StemWeights<T> {
    pub kernel: ConvKernel<T>,
    pub affine: Option<AffineParams<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TunnelWeights<T> {
    pub stem: Option<StemWeights<T>>,
    pub bottlenecks: Vec<BottleneckWeights<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkWeights<T> {
    pub tunnels: Vec<TunnelWeights<T>>,
    /// Head weights, `[c_final][classes]`.
    pub fc: Vec<T>,
}

impl<T: Scalar> TunnelWeights<T> {
    pub fn zeros(spec: &TunnelSpec, c_in: usize) -> Self {
        Self {
            stem: spec.stem.map(|s| StemWeights {
                kernel: ConvKernel {
                    k_h: s.k_h,
                    k_w: s.k_w,
                    c_in,
                    c_out: s.c_out,
                    data: vec![T::zero(); s.k_h * s.k_w * c_in * s.c_out],
                },
                affine: s.affine.map(|_| AffineParams::identity(s.c_out)),
            }),
            bottlenecks: spec.bottlenecks.iter().map(BottleneckWeights::zeros).collect(),
        }
    }

    pub fn check(&self, spec: &TunnelSpec, c_in: usize) -> Result<()> {
        match (&spec.stem, &self.stem) {
            (None, None) => {}
            (Some(s), Some(w)) => {
                let k = &w.kernel;
                if k.k_h != s.k_h || k.k_w != s.k_w || k.c_in != c_in || k.c_out != s.c_out
                    || k.data.len() != s.k_h * s.k_w * c_in * s.c_out
                {
                    return Err(Error::ShapeMismatch("stem kernel dims".into()));
                }
                match (&s.affine, &w.affine) {
                    (None, None) => {}
                    (Some(_), Some(p)) if p.scale.len() == s.c_out && p.bias.len() == s.c_out => {}
                    _ => return Err(Error::ShapeMismatch("stem affine".into())),
                }
            }
            _ => return Err(Error::ShapeMismatch("stem presence".into())),
        }
        if spec.bottlenecks.len() != self.bottlenecks.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} bottleneck specs but {} weight sets",
                spec.bottlenecks.len(),
                self.bottlenecks.len()
            )));
        }
        for (b, w) in spec.bottlenecks.iter().zip(&self.bottlenecks) {
            w.check(b)?;
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> TunnelWeights<U> {
        TunnelWeights {
            stem: self.stem.as_ref().map(|s| StemWeights {
                kernel: ConvKernel {
                    k_h: s.kernel.k_h,
                    k_w: s.kernel.k_w,
                    c_in: s.kernel.c_in,
                    c_out: s.kernel.c_out,
                    data: s.kernel.data.iter().map(|v| U::from_real(v.as_f64())).collect(),
                },
                affine: s.affine.as_ref().map(|a| AffineParams {
                    scale: a.scale.iter().map(|v| U::from_real(v.as_f64())).collect(),
                    bias: a.bias.iter().map(|v| U::from_real(v.as_f64())).collect(),
                }),
            }),
            bottlenecks: self.bottlenecks.iter().map(BottleneckWeights::cast).collect(),
        }
    }
}

impl<T: Scalar> NetworkWeights<T> {
    pub fn zeros(spec: &NetworkSpec) -> Result<Self> {
        let c_final = spec.validate()?;
        Ok(Self {
            tunnels: spec
                .tunnels
                .iter()
                .map(|t| TunnelWeights::zeros(t, spec.input.c))
                .collect(),
            fc: vec![T::zero(); c_final * spec.head.classes],
        })
    }

    pub fn check(&self, spec: &NetworkSpec) -> Result<()> {
        let c_final = spec.validate()?;
        if self.tunnels.len() != spec.tunnels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} tunnels declared, {} weight sets",
                spec.tunnels.len(),
                self.tunnels.len()
            )));
        }
        for (i, (t, w)) in spec.tunnels.iter().zip(&self.tunnels).enumerate() {
            w.check(t, spec.input.c)
                .map_err(|e| Error::ShapeMismatch(format!("tunnel {i}: {e}")))?;
        }
        if self.fc.len() != c_final * spec.head.classes {
            return Err(Error::ShapeMismatch(format!(
                "head expects {}x{} weights, got {}",
                c_final,
                spec.head.classes,
                self.fc.len()
            )));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> NetworkWeights<U> {
        NetworkWeights {
            tunnels: self.tunnels.iter().map(TunnelWeights::cast).collect(),
            fc: self.fc.iter().map(|v| U::from_real(v.as_f64())).collect(),
        }
    }
}
