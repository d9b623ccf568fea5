//! Seeded generators for inputs, weights and small random networks.
//!
//! Everything here is deterministic for a given RNG state, which is what
//! the equivalence checks, property tests and golden fixtures rely on.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::bottleneck::{AffineParams, BottleneckSpec, BottleneckWeights, StageAffine, DW_KERNEL};
use crate::network::{BlockConfig, HeadSpec, NetworkSpec, NetworkWeights, StemSpec, TunnelSpec, TunnelWeights, StemWeights};
use crate::scalar::Scalar;
use crate::segmentation::PatchLayout;
use crate::tensor::{ConvKernel, DepthwiseKernel, Tensor, TensorShape};

fn normals<T: Scalar, R: Rng + ?Sized>(n: usize, std: f64, rng: &mut R) -> Vec<T> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::from_real(z * std)
        })
        .collect()
}

pub fn normal_tensor<T: Scalar, R: Rng + ?Sized>(shape: TensorShape, rng: &mut R) -> Tensor<T> {
    Tensor::from_vec(shape, normals(shape.len(), 1.0, rng)).expect("sized to shape")
}

/// Uniform `[0, 1)` image, the range PNM loading produces.
pub fn unit_image<T: Scalar, R: Rng + ?Sized>(shape: TensorShape, rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape, |_, _, _| T::from_real(rng.gen::<f64>()))
}

fn scaled_bottleneck_weights<T: Scalar, R: Rng + ?Sized>(
    spec: &BottleneckSpec,
    fan_in_scaling: bool,
    rng: &mut R,
) -> BottleneckWeights<T> {
    let n = spec.expanded();
    let std = |fan_in: usize| if fan_in_scaling { 1.0 / (fan_in as f64).sqrt() } else { 1.0 };
    let expand = normals(n * spec.c_in, std(spec.c_in), rng);
    let dw = normals(n * DW_KERNEL * DW_KERNEL, std(DW_KERNEL * DW_KERNEL), rng);
    let reduce = normals(spec.c_out * n, std(n), rng);
    let mut affine = |present: Option<StageAffine>| {
        present.map(|_| {
            let scale = if fan_in_scaling {
                normals::<f64, _>(n, 0.1, rng).into_iter().map(|v| T::from_real(1.0 + v)).collect()
            } else {
                normals(n, 1.0, rng)
            };
            AffineParams { scale, bias: normals(n, if fan_in_scaling { 0.1 } else { 1.0 }, rng) }
        })
    };
    let expand_affine = affine(spec.expand_affine);
    let dw_affine = affine(spec.dw_affine);
    BottleneckWeights {
        expand,
        dw: DepthwiseKernel { c: n, k_h: DW_KERNEL, k_w: DW_KERNEL, data: dw },
        reduce,
        expand_affine,
        dw_affine,
    }
}

/// Every weight drawn from a standard normal.
pub fn bottleneck_weights<T: Scalar, R: Rng + ?Sized>(spec: &BottleneckSpec, rng: &mut R) -> BottleneckWeights<T> {
    scaled_bottleneck_weights(spec, false, rng)
}

/// Fan-in scaled normal weights for a whole network, keeping activations
/// in a moderate range through deep tunnels.
pub fn network_weights<T: Scalar, R: Rng + ?Sized>(net: &NetworkSpec, rng: &mut R) -> NetworkWeights<T> {
    let c_final = net.validate().expect("network must be valid");
    let tunnels = net
        .tunnels
        .iter()
        .map(|t| TunnelWeights {
            stem: t.stem.map(|s| {
                let fan_in = s.k_h * s.k_w * net.input.c;
                StemWeights {
                    kernel: ConvKernel {
                        k_h: s.k_h,
                        k_w: s.k_w,
                        c_in: net.input.c,
                        c_out: s.c_out,
                        data: normals(fan_in * s.c_out, 1.0 / (fan_in as f64).sqrt(), rng),
                    },
                    affine: s.affine.map(|_| AffineParams {
                        scale: vec![T::one(); s.c_out],
                        bias: normals(s.c_out, 0.1, rng),
                    }),
                }
            }),
            bottlenecks: t
                .bottlenecks
                .iter()
                .map(|b| scaled_bottleneck_weights(b, true, rng))
                .collect(),
        })
        .collect();
    let fc = normals(c_final * net.head.classes, 1.0 / (c_final as f64).sqrt(), rng);
    NetworkWeights { tunnels, fc }
}

/// Bounds for [`random_network`].
#[derive(Debug, Clone, Copy)]
pub struct NetLimits {
    pub max_side: usize,
    pub max_channels: usize,
    pub max_bottlenecks: usize,
    pub max_t: usize,
    pub max_classes: usize,
}

impl Default for NetLimits {
    fn default() -> Self {
        Self {
            max_side: 64,
            max_channels: 8,
            max_bottlenecks: 4,
            max_t: 6,
            max_classes: 10,
        }
    }
}

fn maybe_affine<R: Rng + ?Sized>(rng: &mut R) -> Option<StageAffine> {
    rng.gen_bool(0.5).then(|| StageAffine { relu6: rng.gen_bool(0.7) })
}

fn random_tunnel<R: Rng + ?Sized>(
    patch: TensorShape,
    c_final: usize,
    limits: &NetLimits,
    rng: &mut R,
) -> TunnelSpec {
    let stem = rng.gen_bool(0.6).then(|| {
        let k = if rng.gen_bool(0.5) { 3 } else { 1 };
        let p = if k == 3 && rng.gen_bool(0.7) { 1 } else { 0 };
        StemSpec {
            k_h: k,
            k_w: k,
            s: rng.gen_range(1..=2),
            p_h: p,
            p_w: p,
            c_out: rng.gen_range(1..=limits.max_channels),
            affine: rng.gen_bool(0.5).then_some(StageAffine { relu6: true }),
        }
    });
    let depth = rng.gen_range(1..=limits.max_bottlenecks);
    let mut c = stem.map_or(patch.c, |s| s.c_out);
    let blocks: Vec<BlockConfig> = (0..depth)
        .map(|i| {
            let c_out = if i + 1 == depth { c_final } else { rng.gen_range(1..=limits.max_channels) };
            let s = rng.gen_range(1..=2);
            let residual = s == 1 && c_out == c && rng.gen_bool(0.7);
            c = c_out;
            BlockConfig {
                t: rng.gen_range(1..=limits.max_t),
                s,
                c_out,
                residual,
                expand_affine: maybe_affine(rng),
                dw_affine: maybe_affine(rng),
            }
        })
        .collect();
    TunnelSpec::chain(patch.c, stem, &blocks)
}

/// A random valid network: `k` of 1 or 4, optional central patch, one
/// independently drawn op chain per tunnel ending at a shared width.
pub fn random_network<R: Rng + ?Sized>(limits: &NetLimits, rng: &mut R) -> NetworkSpec {
    let grid = rng.gen_range(1..=2usize);
    let max_cell = limits.max_side / grid;
    let (cell_h, cell_w) = (rng.gen_range(4..=max_cell), rng.gen_range(4..=max_cell));
    let margin = |cell: usize, rng: &mut R| if grid == 1 { 0 } else { rng.gen_range(0..=cell.min(8)) };
    let layout = PatchLayout {
        k: grid * grid,
        m_h: margin(cell_h, rng),
        m_w: margin(cell_w, rng),
        central: grid > 1 && rng.gen_bool(0.5),
    };
    let input = TensorShape {
        h: grid * cell_h,
        w: grid * cell_w,
        c: rng.gen_range(1..=limits.max_channels),
    };
    let patch = layout.patch_shape(input).expect("margin fits by construction");
    let c_final = rng.gen_range(1..=limits.max_channels);
    let tunnels = (0..layout.patch_count())
        .map(|_| random_tunnel(patch, c_final, limits, rng))
        .collect();
    let net = NetworkSpec {
        input,
        layout,
        tunnels,
        head: HeadSpec { classes: rng.gen_range(1..=limits.max_classes) },
    };
    debug_assert!(net.validate().is_ok());
    net
}

/// Small fixed network used by the command-line defaults and fixtures:
/// 32x32x3 input, four 20x20 patches plus a central one, a stride-2 stem and
/// three bottlenecks per tunnel.
pub fn toy_network() -> NetworkSpec {
    let relu = Some(StageAffine { relu6: true });
    let stem = StemSpec { k_h: 3, k_w: 3, s: 2, p_h: 1, p_w: 1, c_out: 8, affine: relu };
    let block = |t, s, c_out, residual| BlockConfig {
        t,
        s,
        c_out,
        residual,
        expand_affine: relu,
        dw_affine: relu,
    };
    let tunnel = TunnelSpec::chain(
        3,
        Some(stem),
        &[block(6, 1, 8, true), block(6, 2, 16, false), block(4, 1, 16, true)],
    );
    let layout = PatchLayout { k: 4, m_h: 4, m_w: 4, central: true };
    NetworkSpec {
        input: TensorShape { h: 32, w: 32, c: 3 },
        layout,
        tunnels: vec![tunnel; layout.patch_count()],
        head: HeadSpec { classes: 10 },
    }
}
