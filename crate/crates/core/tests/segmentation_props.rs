use patchtunnel::{extract_patches, patch_area_ratio, plan_regions, PatchLayout, PatchRegion, Tensor, TensorShape};
use proptest::prelude::*;

/// Writes every grid patch back at its offset, checking that overlapping
/// pixels agree, and returns the reassembled image.
fn reassemble(shape: TensorShape, regions: &[PatchRegion], patches: &[Tensor<f64>]) -> Tensor<f64> {
    let mut out = Tensor::filled(shape, -1.0);
    let mut written = vec![false; shape.h * shape.w];
    for (r, p) in regions.iter().zip(patches).filter(|(r, _)| !r.is_central()) {
        for i in 0..r.height {
            for j in 0..r.width {
                let (gi, gj) = (r.row0 + i, r.col0 + j);
                for c in 0..shape.c {
                    let v = p.get(i, j, c);
                    if written[gi * shape.w + gj] {
                        assert_eq!(out.get(gi, gj, c), v, "overlap disagreement");
                    }
                    out.set(gi, gj, c, v);
                }
                written[gi * shape.w + gj] = true;
            }
        }
    }
    assert!(written.iter().all(|&w| w), "grid does not cover the image");
    out
}

fn layout_case() -> impl Strategy<Value = (TensorShape, PatchLayout)> {
    (1usize..5, 2usize..12, 2usize..12, 1usize..4, 0usize..12, 0usize..12, any::<bool>())
        .prop_filter_map("margins must fit", |(g, cell_h, cell_w, c, m_h, m_w, central)| {
            let shape = TensorShape { h: g * cell_h, w: g * cell_w, c };
            let layout = PatchLayout { k: g * g, m_h, m_w, central };
            plan_regions(shape, &layout).ok().map(|_| (shape, layout))
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn grid_patches_reassemble_exactly((shape, layout) in layout_case()) {
        let image = Tensor::from_fn(shape, |i, j, c| (i * 1000 + j * 10 + c) as f64);
        let regions = plan_regions(shape, &layout).unwrap();
        prop_assert_eq!(regions.len(), layout.k + usize::from(layout.central));
        let patches = extract_patches(&image, &regions).unwrap();
        for (r, p) in regions.iter().zip(&patches) {
            prop_assert_eq!(p.shape(), TensorShape { h: shape.h / layout.grid_side().unwrap() + layout.m_h,
                w: shape.w / layout.grid_side().unwrap() + layout.m_w, c: shape.c });
            prop_assert!(r.row0 + r.height <= shape.h && r.col0 + r.width <= shape.w);
        }
        if layout.central {
            let central = regions.last().unwrap();
            prop_assert_eq!((central.height, central.width), (regions[0].height, regions[0].width));
            prop_assert_eq!(central.row0, (shape.h - central.height) / 2);
        }
        prop_assert_eq!(reassemble(shape, &regions, &patches), image);
    }

    #[test]
    fn two_by_two_overlap_is_twice_margin(cell_h in 1usize..40, cell_w in 1usize..40, m_h in 0usize..40, m_w in 0usize..40) {
        prop_assume!(m_h <= cell_h && m_w <= cell_w);
        let shape = TensorShape { h: 2 * cell_h, w: 2 * cell_w, c: 2 };
        let layout = PatchLayout { k: 4, m_h, m_w, central: false };
        let r = plan_regions(shape, &layout).unwrap();
        // horizontal neighbours (0,0)-(0,1); vertical neighbours (0,0)-(1,0)
        prop_assert_eq!(r[0].col0 + r[0].width - r[1].col0, 2 * m_w);
        prop_assert_eq!(r[0].row0 + r[0].height - r[2].row0, 2 * m_h);

        let image = Tensor::from_fn(shape, |i, j, c| (i * 97 + j * 13 + c) as f64);
        let p = extract_patches(&image, &r).unwrap();
        for i in 0..r[0].height {
            for k in 0..2 * m_w {
                for c in 0..2 {
                    prop_assert_eq!(p[0].get(i, r[1].col0 + k, c), p[1].get(i, k, c));
                }
            }
        }
    }

    #[test]
    fn area_ratio_closed_form(g in 1usize..6, cell in 1usize..200, m in 0usize..200) {
        let h = (g * cell) as f64;
        let k = (g * g) as f64;
        let m = m as f64;
        let closed = patch_area_ratio(h, k, m).unwrap();
        let geometric = (h / k.sqrt() + m).powi(2) / (h * h);
        prop_assert!((closed - geometric).abs() <= 1e-12 * geometric);
    }
}

#[test]
fn whole_image_region_is_identity() {
    let shape = TensorShape { h: 6, w: 5, c: 3 };
    let image = Tensor::from_fn(shape, |i, j, c| (i + 2 * j + 3 * c) as f32);
    let regions = plan_regions(shape, &PatchLayout::whole_image()).unwrap();
    assert_eq!(extract_patches(&image, &regions).unwrap(), vec![image]);
}

#[test]
fn imagenet_patches_and_overlap_band() {
    let shape = TensorShape { h: 224, w: 224, c: 3 };
    let image = Tensor::from_fn(shape, |i, j, c| ((i * 224 + j) * 3 + c) as f32);
    let layout = PatchLayout { k: 4, m_h: 18, m_w: 18, central: true };
    let regions = plan_regions(shape, &layout).unwrap();
    let patches = extract_patches(&image, &regions).unwrap();
    assert_eq!(patches.len(), 5);
    assert!(patches.iter().all(|p| p.shape() == TensorShape { h: 130, w: 130, c: 3 }));
    // 36-column band shared by the two top patches
    assert_eq!(130 - 94, 36);
    for i in 0..130 {
        for k in 0..36 {
            assert_eq!(patches[0].get(i, 94 + k, 1), patches[1].get(i, k, 1));
        }
    }
}
