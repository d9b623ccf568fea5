use patchtunnel::tensor::{
    conv2d_naive, conv_out_dim, depthwise_conv, pointwise_conv, ConvKernel, ConvParams, DepthwiseKernel,
    PointwiseKernel,
};
use patchtunnel::{Tensor, TensorShape};
use proptest::prelude::*;

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n)
}

fn conv_case() -> impl Strategy<Value = (TensorShape, ConvParams)> {
    (1usize..7, 1usize..7, 1usize..4, 1usize..4, 1usize..4, 1usize..3, 0usize..2, 1usize..4)
        .prop_filter_map("output must be non-empty", |(h, w, c, k_h, k_w, s, p, c_out)| {
            let shape = TensorShape { h, w, c };
            let params = ConvParams { k_h, k_w, s, p_h: p, p_w: p, c_in: c, c_out };
            params.output_shape(shape).ok().map(|_| (shape, params))
        })
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(1e-300f64, |m, v| m.max(v.abs()));
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_is_linear(
        (shape, params) in conv_case(),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
        seed in values(7 * 7 * 3 * 2 + 4 * 4 * 3 * 4),
    ) {
        let n = shape.len();
        let kn = params.k_h * params.k_w * params.c_in * params.c_out;
        let x1 = Tensor::from_vec(shape, seed[..n].to_vec()).unwrap();
        let x2 = Tensor::from_vec(shape, seed[n..2 * n].to_vec()).unwrap();
        let kernel = ConvKernel::new(params.k_h, params.k_w, params.c_in, params.c_out, seed[2 * n..2 * n + kn].to_vec()).unwrap();
        let mix = Tensor::from_vec(shape, x1.data().iter().zip(x2.data()).map(|(p, q)| a * p + b * q).collect()).unwrap();
        let lhs = conv2d_naive(&mix, &kernel, &params).unwrap();
        let y1 = conv2d_naive(&x1, &kernel, &params).unwrap();
        let y2 = conv2d_naive(&x2, &kernel, &params).unwrap();
        let rhs: Vec<f64> = y1.data().iter().zip(y2.data()).map(|(p, q)| a * p + b * q).collect();
        prop_assert!(max_rel(lhs.data(), &rhs) <= 1e-6);
    }

    #[test]
    fn output_shape_formula((shape, params) in conv_case()) {
        let kernel = ConvKernel::new(params.k_h, params.k_w, params.c_in, params.c_out,
            vec![0.0f64; params.k_h * params.k_w * params.c_in * params.c_out]).unwrap();
        let y = conv2d_naive(&Tensor::<f64>::zeros(shape), &kernel, &params).unwrap();
        let expect = |d: usize, k: usize, p: usize| (d + 2 * p - k) / params.s + 1;
        prop_assert_eq!(y.shape().h, expect(shape.h, params.k_h, params.p_h));
        prop_assert_eq!(y.shape().w, expect(shape.w, params.k_w, params.p_w));
        prop_assert_eq!(y.shape().c, params.c_out);
    }

    #[test]
    fn pointwise_equals_one_by_one_naive(h in 1usize..6, w in 1usize..6, c_in in 1usize..6, c_out in 1usize..6, seed in values(5 * 5 * 5 + 25)) {
        let shape = TensorShape { h, w, c: c_in };
        let x = Tensor::from_vec(shape, seed[..shape.len()].to_vec()).unwrap();
        let k = PointwiseKernel::new(c_in, c_out, seed[shape.len()..shape.len() + c_in * c_out].to_vec()).unwrap();
        let params = ConvParams { k_h: 1, k_w: 1, s: 1, p_h: 0, p_w: 0, c_in, c_out };
        let oracle = conv2d_naive(&x, &k.as_conv(), &params).unwrap();
        let fast = pointwise_conv(&x, &k).unwrap();
        prop_assert_eq!(fast.data(), oracle.data());
    }

    #[test]
    fn depthwise_channels_are_independent(
        h in 1usize..7, w in 1usize..7, c in 2usize..5, s in 1usize..3,
        target in 0usize..4, other in 0usize..4, bump in -5.0f64..5.0,
        seed in values(6 * 6 * 4 + 36),
    ) {
        let (target, other) = (target % c, other % c);
        prop_assume!(target != other);
        let shape = TensorShape { h, w, c };
        let x = Tensor::from_vec(shape, seed[..shape.len()].to_vec()).unwrap();
        let k = DepthwiseKernel::new(c, 3, 3, seed[shape.len()..shape.len() + 9 * c].to_vec()).unwrap();
        let mut perturbed = x.clone();
        for i in 0..h {
            for j in 0..w {
                let v = perturbed.get(i, j, other);
                perturbed.set(i, j, other, v + bump);
            }
        }
        let a = depthwise_conv(&x, &k, s, 1, 1).unwrap();
        let b = depthwise_conv(&perturbed, &k, s, 1, 1).unwrap();
        let out = a.shape();
        for i in 0..out.h {
            for j in 0..out.w {
                prop_assert_eq!(a.get(i, j, target), b.get(i, j, target));
            }
        }
    }

    #[test]
    fn out_dim_matches_floor_rule(d in 1usize..300, k in 1usize..12, p in 0usize..6, s in 1usize..5) {
        match conv_out_dim(d, k, p, s) {
            Some(o) => {
                prop_assert!(d + 2 * p >= k);
                prop_assert_eq!(o, ((d + 2 * p - k) as f64 / s as f64).floor() as usize + 1);
            }
            None => prop_assert!(d + 2 * p < k),
        }
    }
}

#[test]
fn depthwise_equals_block_diagonal_naive() {
    let shape = TensorShape { h: 8, w: 8, c: 4 };
    let x = Tensor::from_fn(shape, |i, j, c| ((i * 31 + j * 7 + c * 3) % 17) as f64 / 8.0 - 1.0);
    let taps: Vec<f64> = (0..36).map(|i| ((i * 13) % 11) as f64 / 5.0 - 1.0).collect();
    let k = DepthwiseKernel::new(4, 3, 3, taps).unwrap();
    let params = ConvParams { k_h: 3, k_w: 3, s: 1, p_h: 1, p_w: 1, c_in: 4, c_out: 4 };
    let oracle = conv2d_naive(&x, &k.to_block_diagonal(), &params).unwrap();
    let fast = depthwise_conv(&x, &k, 1, 1, 1).unwrap();
    assert!(max_rel(fast.data(), oracle.data()) <= 1e-12);
}
