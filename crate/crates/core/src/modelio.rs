//! On-disk formats: JSON network documents, little-endian weight blobs and
//! binary PGM/PPM images.
//!
//! Weight blob layout:
//!
//! ```text
//! "PTNW" | version: u16 LE | tunnel count: u16 LE
//! per tunnel:
//!   stem (if any): kernel [k_h][k_w][c_in][c_out], then scale[c_out], bias[c_out] if affine
//!   per bottleneck: expand [t*c_in][c_in], dw [t*c_in][3][3], reduce [c_out][t*c_in],
//!                   expand scale/bias, dw scale/bias (each when present)
//! head: fc [c_final][classes]
//! ```
//!
//! Every value is an `f32` in little-endian byte order, with no padding.

use serde::{Deserialize, Serialize};

use crate::bottleneck::{AffineParams, BottleneckSpec, BottleneckWeights, StageAffine, DW_KERNEL};
use crate::error::{Error, Result};
use crate::network::{
    BlockConfig, HeadSpec, NetworkSpec, NetworkWeights, StemSpec, StemWeights, TunnelSpec, TunnelWeights,
};
use crate::scalar::Scalar;
use crate::segmentation::PatchLayout;
use crate::tensor::{ConvKernel, DepthwiseKernel, Tensor, TensorShape};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"PTNW";
pub const WEIGHTS_VERSION: u16 = 1;
const HEADER_LEN: usize = 8;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ShapeDoc {
    h: usize,
    w: usize,
    c: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StemDoc {
    k_h: usize,
    k_w: usize,
    s: usize,
    p_h: usize,
    p_w: usize,
    c_out: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    affine: Option<StageAffine>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlockDoc {
    t: usize,
    s: usize,
    c_out: usize,
    #[serde(default)]
    residual: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    expand_affine: Option<StageAffine>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dw_affine: Option<StageAffine>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TunnelDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stem: Option<StemDoc>,
    bottlenecks: Vec<BlockDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeadDoc {
    classes: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecDoc {
    input: ShapeDoc,
    layout: PatchLayout,
    tunnels: Vec<TunnelDoc>,
    head: HeadDoc,
}

/// Parses and validates a network document.
pub fn load_spec(bytes: &[u8]) -> Result<NetworkSpec> {
    let doc: SpecDoc = serde_json::from_slice(bytes).map_err(|e| Error::Parse {
        line: e.line(),
        column: e.column(),
        msg: e.to_string(),
    })?;
    let input = TensorShape::new(doc.input.h, doc.input.w, doc.input.c)?;
    let tunnels = doc
        .tunnels
        .iter()
        .map(|t| {
            let stem = t.stem.as_ref().map(|s| StemSpec {
                k_h: s.k_h,
                k_w: s.k_w,
                s: s.s,
                p_h: s.p_h,
                p_w: s.p_w,
                c_out: s.c_out,
                affine: s.affine,
            });
            let blocks: Vec<BlockConfig> = t
                .bottlenecks
                .iter()
                .map(|b| BlockConfig {
                    t: b.t,
                    s: b.s,
                    c_out: b.c_out,
                    residual: b.residual,
                    expand_affine: b.expand_affine,
                    dw_affine: b.dw_affine,
                })
                .collect();
            TunnelSpec::chain(input.c, stem, &blocks)
        })
        .collect();
    let net = NetworkSpec {
        input,
        layout: doc.layout,
        tunnels,
        head: HeadSpec { classes: doc.head.classes },
    };
    net.validate()?;
    Ok(net)
}

/// Canonical document text: sorted keys, no insignificant whitespace,
/// absent optional fields omitted.
pub fn serialize_spec(net: &NetworkSpec) -> String {
    let doc = SpecDoc {
        input: ShapeDoc { h: net.input.h, w: net.input.w, c: net.input.c },
        layout: net.layout,
        tunnels: net
            .tunnels
            .iter()
            .map(|t| TunnelDoc {
                stem: t.stem.map(|s| StemDoc {
                    k_h: s.k_h,
                    k_w: s.k_w,
                    s: s.s,
                    p_h: s.p_h,
                    p_w: s.p_w,
                    c_out: s.c_out,
                    affine: s.affine,
                }),
                bottlenecks: t
                    .bottlenecks
                    .iter()
                    .map(|b| BlockDoc {
                        t: b.t,
                        s: b.s,
                        c_out: b.c_out,
                        residual: b.residual,
                        expand_affine: b.expand_affine,
                        dw_affine: b.dw_affine,
                    })
                    .collect(),
            })
            .collect(),
        head: HeadDoc { classes: net.head.classes },
    };
    // serde_json's Value map is ordered by key, which gives the canonical order
    let value = serde_json::to_value(&doc).expect("document is plain data");
    serde_json::to_string(&value).expect("value serializes")
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FragmentDoc {
    input: ShapeDoc,
    bottleneck: BlockDoc,
}

/// Parses a single-bottleneck document:
/// `{"input": {"h", "w", "c"}, "bottleneck": {"t", "s", "c_out", ...}}`.
/// The block's input width is taken from `input.c`.
pub fn load_bottleneck_fragment(bytes: &[u8]) -> Result<(BottleneckSpec, TensorShape)> {
    let doc: FragmentDoc = serde_json::from_slice(bytes).map_err(|e| Error::Parse {
        line: e.line(),
        column: e.column(),
        msg: e.to_string(),
    })?;
    let input = TensorShape::new(doc.input.h, doc.input.w, doc.input.c)?;
    let b = doc.bottleneck;
    let spec = BottleneckSpec {
        c_in: input.c,
        t: b.t,
        s: b.s,
        c_out: b.c_out,
        residual: b.residual,
        expand_affine: b.expand_affine,
        dw_affine: b.dw_affine,
    };
    spec.output_shape(input)?;
    Ok((spec, input))
}

/// Exact blob size for `net`.
pub fn weights_len(net: &NetworkSpec) -> Result<usize> {
    Ok(HEADER_LEN + 4 * net.weight_count()?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Vec<f32> {
        let out = self.bytes[self.pos..self.pos + 4 * n]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        self.pos += 4 * n;
        out
    }

    fn affine(&mut self, present: bool, n: usize) -> Option<AffineParams<f32>> {
        present.then(|| AffineParams { scale: self.take(n), bias: self.take(n) })
    }
}

/// Binds a weight blob to `net`. Either the whole blob loads or nothing does.
pub fn load_weights(bytes: &[u8], net: &NetworkSpec) -> Result<NetworkWeights<f32>> {
    let expected = weights_len(net)?;
    if bytes.len() >= 4 && &bytes[..4] != WEIGHTS_MAGIC {
        return Err(Error::Format(format!("bad magic {:?}, expected \"PTNW\"", &bytes[..4])));
    }
    if bytes.len() >= 6 {
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != WEIGHTS_VERSION {
            return Err(Error::Format(format!(
                "unsupported weights version {version}, expected {WEIGHTS_VERSION}"
            )));
        }
    }
    if bytes.len() >= HEADER_LEN {
        let tunnels = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
        if tunnels != net.tunnels.len() {
            return Err(Error::Format(format!(
                "blob holds {tunnels} tunnels, network declares {}",
                net.tunnels.len()
            )));
        }
    }
    if bytes.len() != expected {
        return Err(Error::WeightsLength { expected, actual: bytes.len() });
    }

    let mut r = Reader { bytes, pos: HEADER_LEN };
    let c_in = net.input.c;
    let mut tunnels = Vec::with_capacity(net.tunnels.len());
    for t in &net.tunnels {
        let stem = t.stem.map(|s| StemWeights {
            kernel: ConvKernel {
                k_h: s.k_h,
                k_w: s.k_w,
                c_in,
                c_out: s.c_out,
                data: r.take(s.k_h * s.k_w * c_in * s.c_out),
            },
            affine: r.affine(s.affine.is_some(), s.c_out),
        });
        let bottlenecks = t
            .bottlenecks
            .iter()
            .map(|b| {
                let n = b.expanded();
                BottleneckWeights {
                    expand: r.take(n * b.c_in),
                    dw: DepthwiseKernel {
                        c: n,
                        k_h: DW_KERNEL,
                        k_w: DW_KERNEL,
                        data: r.take(n * DW_KERNEL * DW_KERNEL),
                    },
                    reduce: r.take(b.c_out * n),
                    expand_affine: r.affine(b.expand_affine.is_some(), n),
                    dw_affine: r.affine(b.dw_affine.is_some(), n),
                }
            })
            .collect();
        tunnels.push(TunnelWeights { stem, bottlenecks });
    }
    let c_final = net.c_final()?;
    let fc = r.take(c_final * net.head.classes);
    debug_assert_eq!(r.pos, bytes.len());
    let weights = NetworkWeights { tunnels, fc };
    if weights.tunnels.iter().flat_map(all_values).chain(weights.fc.iter().copied()).any(|v| !v.is_finite()) {
        return Err(Error::Format("weights contain non-finite values".into()));
    }
    Ok(weights)
}

fn all_values(t: &TunnelWeights<f32>) -> Vec<f32> {
    let mut out = Vec::new();
    if let Some(s) = &t.stem {
        out.extend(&s.kernel.data);
        if let Some(a) = &s.affine {
            out.extend(&a.scale);
            out.extend(&a.bias);
        }
    }
    for b in &t.bottlenecks {
        out.extend(&b.expand);
        out.extend(&b.dw.data);
        out.extend(&b.reduce);
        for a in [&b.expand_affine, &b.dw_affine].into_iter().flatten() {
            out.extend(&a.scale);
            out.extend(&a.bias);
        }
    }
    out
}

pub fn save_weights<T: Scalar>(weights: &NetworkWeights<T>, net: &NetworkSpec) -> Result<Vec<u8>> {
    weights.check(net)?;
    let tunnels = u16::try_from(net.tunnels.len())
        .map_err(|_| Error::Format("too many tunnels for the blob header".into()))?;
    let mut out = Vec::with_capacity(weights_len(net)?);
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    out.extend_from_slice(&tunnels.to_le_bytes());
    let put = |out: &mut Vec<u8>, v: &[T]| {
        for x in v {
            out.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
    };
    let put_affine = |out: &mut Vec<u8>, a: &Option<AffineParams<T>>| {
        if let Some(a) = a {
            put(out, &a.scale);
            put(out, &a.bias);
        }
    };
    for t in &weights.tunnels {
        if let Some(s) = &t.stem {
            put(&mut out, &s.kernel.data);
            put_affine(&mut out, &s.affine);
        }
        for b in &t.bottlenecks {
            put(&mut out, &b.expand);
            put(&mut out, &b.dw.data);
            put(&mut out, &b.reduce);
            put_affine(&mut out, &b.expand_affine);
            put_affine(&mut out, &b.dw_affine);
        }
    }
    put(&mut out, &weights.fc);
    Ok(out)
}

struct PnmHeader {
    channels: usize,
    width: usize,
    height: usize,
    data_start: usize,
}

fn parse_pnm_header(bytes: &[u8]) -> Result<PnmHeader> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(Error::Image("unsupported magic, expected P5 or P6".into())),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments before each field
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while !matches!(bytes.get(pos), None | Some(b'\n') | Some(b'\r')) {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::Image("header ends early".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Image(format!("malformed header at byte {start}")));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Image("header value out of range".into()))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Image("missing whitespace after maxval".into()));
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Image(format!("maxval {maxval} unsupported, only 255")));
    }
    if width == 0 || height == 0 {
        return Err(Error::Image("zero image dimension".into()));
    }
    Ok(PnmHeader { channels, width, height, data_start: pos + 1 })
}

/// Binary PGM (one channel) or PPM (RGB), values scaled to `[0, 1]`.
pub fn load_image_pnm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let hdr = parse_pnm_header(bytes)?;
    let shape = TensorShape::new(hdr.height, hdr.width, hdr.channels)?;
    let pixels = bytes.get(hdr.data_start..hdr.data_start + shape.len()).ok_or_else(|| {
        Error::Image(format!(
            "truncated pixel data: need {} bytes, have {}",
            shape.len(),
            bytes.len().saturating_sub(hdr.data_start)
        ))
    })?;
    let data = pixels.iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::from_vec(shape, data)
}

/// Writes P5 (1 channel) or P6 (3 channels), rounding `v * 255` and clamping.
pub fn save_image_pnm<T: Scalar>(image: &Tensor<T>) -> Result<Vec<u8>> {
    let s = image.shape();
    let magic = match s.c {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::Image(format!("cannot write {c}-channel image as PNM"))),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", s.w, s.h).into_bytes();
    out.extend(
        image
            .data()
            .iter()
            .map(|v| (v.as_f64() * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    const MINIMAL: &str = r#"{"input":{"h":8,"w":8,"c":4},"layout":{"k":1,"m_h":0,"m_w":0,"central":false},
        "tunnels":[{"bottlenecks":[{"t":6,"s":1,"c_out":4,"residual":true}]}],"head":{"classes":3}}"#;

    #[test]
    fn minimal_document_loads() {
        let net = load_spec(MINIMAL.as_bytes()).unwrap();
        assert_eq!(net.tunnels.len(), 1);
        assert_eq!(net.tunnels[0].bottlenecks[0].c_in, 4);
    }

    #[test]
    fn non_square_k_rejected() {
        let doc = MINIMAL.replace("\"k\":1", "\"k\":3");
        assert!(matches!(load_spec(doc.as_bytes()), Err(Error::InvalidLayout(_))));
    }

    #[test]
    fn strided_residual_rejected() {
        let doc = MINIMAL.replace("\"s\":1", "\"s\":2");
        let err = load_spec(doc.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("residual"), "{err}");
    }

    #[test]
    fn parse_error_is_positioned() {
        let doc = "{\n  \"input\": {\"h\": 8,,}\n}";
        match load_spec(doc.as_bytes()) {
            Err(Error::Parse { line, column, .. }) => {
                assert_eq!(line, 2);
                assert!(column > 0);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            load_spec(MINIMAL.replace("\"t\":6", "\"t\":6,\"dw_kernel\":5").as_bytes()),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn canonical_form_is_sorted_and_compact() {
        let net = load_spec(MINIMAL.as_bytes()).unwrap();
        let text = serialize_spec(&net);
        assert_eq!(
            text,
            r#"{"head":{"classes":3},"input":{"c":4,"h":8,"w":8},"layout":{"central":false,"k":1,"m_h":0,"m_w":0},"tunnels":[{"bottlenecks":[{"c_out":4,"residual":true,"s":1,"t":6}]}]}"#
        );
        assert_eq!(serialize_spec(&load_spec(text.as_bytes()).unwrap()), text);
    }

    #[test]
    fn zero_blob_loads() {
        let net = synth::toy_network();
        let mut blob = vec![0u8; weights_len(&net).unwrap()];
        blob[..4].copy_from_slice(WEIGHTS_MAGIC);
        blob[4..6].copy_from_slice(&1u16.to_le_bytes());
        blob[6..8].copy_from_slice(&5u16.to_le_bytes());
        let w = load_weights(&blob, &net).unwrap();
        assert!(w.fc.iter().all(|&v| v == 0.0));
        assert_eq!(save_weights(&w, &net).unwrap(), blob);
    }

    #[test]
    fn blob_errors() {
        let net = synth::toy_network();
        let w = NetworkWeights::<f32>::zeros(&net).unwrap();
        let blob = save_weights(&w, &net).unwrap();

        let short = &blob[..blob.len() - 1];
        match load_weights(short, &net) {
            Err(Error::WeightsLength { expected, actual }) => {
                assert_eq!(expected, blob.len());
                assert_eq!(actual, blob.len() - 1);
            }
            other => panic!("unexpected {other:?}"),
        }
        let mut bad_magic = blob.clone();
        bad_magic[0] = b'X';
        assert!(matches!(load_weights(&bad_magic, &net), Err(Error::Format(_))));
        let mut bad_version = blob.clone();
        bad_version[4] = 2;
        assert!(matches!(load_weights(&bad_version, &net), Err(Error::Format(_))));
        let mut nan = blob.clone();
        let end = nan.len();
        nan[end - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(load_weights(&nan, &net).is_err());
    }

    #[test]
    fn pgm_scaling() {
        let mut bytes = b"P5\n2 2\n255\n".to_vec();
        bytes.extend([0, 255, 0, 255]);
        let t = load_image_pnm(&bytes).unwrap();
        assert_eq!(t.shape(), TensorShape { h: 2, w: 2, c: 1 });
        assert_eq!(t.data(), &[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(save_image_pnm(&t).unwrap(), bytes);
    }

    #[test]
    fn ppm_channel_order() {
        let mut bytes = b"P6 # comment\n3 1 255\n".to_vec();
        bytes.extend([255, 0, 0, 0, 255, 0, 0, 0, 255]);
        let t = load_image_pnm(&bytes).unwrap();
        assert_eq!(t.shape(), TensorShape { h: 1, w: 3, c: 3 });
        assert_eq!(t.get(0, 0, 0), 1.0);
        assert_eq!(t.get(0, 1, 1), 1.0);
        assert_eq!(t.get(0, 2, 2), 1.0);
        assert_eq!(t.get(0, 2, 0), 0.0);
    }

    #[test]
    fn pnm_errors() {
        assert!(load_image_pnm(b"P5\n2 2\n65535\n\0\0\0\0\0\0\0\0").is_err());
        assert!(load_image_pnm(b"P3\n1 1\n255\n1 2 3").is_err());
        assert!(load_image_pnm(b"P5\n2 x\n255\n").is_err());
        assert!(load_image_pnm(b"P5\n2 2\n255\n\0\0\0").is_err());
        assert!(load_image_pnm(b"P6\n2 2").is_err());
    }

    #[test]
    fn bottleneck_fragment() {
        let doc = r#"{"input":{"h":6,"w":6,"c":3},"bottleneck":{"t":4,"s":2,"c_out":5,"dw_affine":{"relu6":true}}}"#;
        let (spec, shape) = load_bottleneck_fragment(doc.as_bytes()).unwrap();
        assert_eq!((spec.c_in, spec.expanded(), spec.c_out), (3, 12, 5));
        assert!(!spec.residual && spec.expand_affine.is_none() && spec.dw_affine.is_some());
        assert_eq!(shape, TensorShape { h: 6, w: 6, c: 3 });
        let bad = doc.replace("\"s\":2,\"c_out\":5", "\"s\":2,\"c_out\":3,\"residual\":true");
        assert!(load_bottleneck_fragment(bad.as_bytes()).is_err());
    }
}
