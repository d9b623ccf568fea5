//! Input segmentation: a `sqrt(k) x sqrt(k)` grid of equally sized patches
//! that overlap their neighbours, plus an optional centred patch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorShape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchLayout {
    pub k: usize,
    pub m_h: usize,
    pub m_w: usize,
    pub central: bool,
}

impl PatchLayout {
    pub fn whole_image() -> Self {
        Self { k: 1, m_h: 0, m_w: 0, central: false }
    }

    /// Patches per side of the grid.
    pub fn grid_side(&self) -> Result<usize> {
        if self.k == 0 {
            return Err(Error::InvalidLayout("k must be >= 1".into()));
        }
        let g = integer_sqrt(self.k);
        if g * g != self.k {
            return Err(Error::InvalidLayout(format!(
                "k = {} is not a perfect square",
                self.k
            )));
        }
        Ok(g)
    }

    pub fn patch_count(&self) -> usize {
        self.k + usize::from(self.central)
    }

    /// Extent of every patch (grid and central) for an image of `image` size.
    pub fn patch_shape(&self, image: TensorShape) -> Result<TensorShape> {
        let g = self.grid_side()?;
        let h = axis_patch_len(image.h, g, self.m_h, "height")?;
        let w = axis_patch_len(image.w, g, self.m_w, "width")?;
        Ok(TensorShape { h, w, c: image.c })
    }
}

fn integer_sqrt(n: usize) -> usize {
    let mut r = (n as f64).sqrt() as usize;
    while r * r > n {
        r -= 1;
    }
    while (r + 1) * (r + 1) <= n {
        r += 1;
    }
    r
}

fn axis_patch_len(d: usize, g: usize, m: usize, axis: &str) -> Result<usize> {
    if !d.is_multiple_of(g) {
        return Err(Error::InvalidLayout(format!(
            "image {axis} {d} is not divisible by {g}"
        )));
    }
    let cell = d / g;
    if cell + m > d {
        return Err(Error::InvalidLayout(format!(
            "{axis} margin {m} makes the patch ({}) larger than the image ({d})",
            cell + m
        )));
    }
    if g >= 3 && m.div_ceil(2) > cell {
        return Err(Error::InvalidLayout(format!(
            "{axis} margin {m} exceeds twice the cell size {cell}"
        )));
    }
    Ok(cell + m)
}

/// Start offsets of the `g` patches along one axis of length `d`.
///
/// Each patch is its cell grown by `m` toward the image interior. Edge
/// cells grow inward only; interior cells grow `ceil(m/2)` toward the start
/// and `floor(m/2)` toward the end.
fn axis_starts(d: usize, g: usize, m: usize) -> Vec<usize> {
    let cell = d / g;
    (0..g)
        .map(|i| {
            if i == 0 {
                0
            } else if i == g - 1 {
                d - cell - m
            } else {
                i * cell - m.div_ceil(2)
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PatchRegion {
    pub row0: usize,
    pub col0: usize,
    pub height: usize,
    pub width: usize,
    /// Grid coordinates `(row, col)`; `None` for the central patch.
    pub grid: Option<(usize, usize)>,
}

impl PatchRegion {
    pub fn is_central(&self) -> bool {
        self.grid.is_none()
    }

    /// File-friendly name: `patch_r{r}_c{c}` or `patch_central`.
    pub fn name(&self) -> String {
        match self.grid {
            Some((r, c)) => format!("patch_r{r}_c{c}"),
            None => "patch_central".to_string(),
        }
    }
}

/// Regions in grid row-major order, followed by the central patch if enabled.
pub fn plan_regions(image: TensorShape, layout: &PatchLayout) -> Result<Vec<PatchRegion>> {
    image.validate()?;
    let g = layout.grid_side()?;
    let patch = layout.patch_shape(image)?;
    let rows = axis_starts(image.h, g, layout.m_h);
    let cols = axis_starts(image.w, g, layout.m_w);

    let mut regions = Vec::with_capacity(layout.patch_count());
    for (r, &row0) in rows.iter().enumerate() {
        for (c, &col0) in cols.iter().enumerate() {
            regions.push(PatchRegion {
                row0,
                col0,
                height: patch.h,
                width: patch.w,
                grid: Some((r, c)),
            });
        }
    }
    if layout.central {
        regions.push(PatchRegion {
            row0: (image.h - patch.h) / 2,
            col0: (image.w - patch.w) / 2,
            height: patch.h,
            width: patch.w,
            grid: None,
        });
    }
    Ok(regions)
}

pub fn extract_patches<T: Scalar>(image: &Tensor<T>, regions: &[PatchRegion]) -> Result<Vec<Tensor<T>>> {
    regions
        .iter()
        .map(|r| image.crop(r.row0, r.col0, r.height, r.width))
        .collect()
}

/// Patch area over image area for a square image with equal margins:
/// `1/k + 2m/(h sqrt(k)) + m^2/h^2`.
pub fn patch_area_ratio<T: Scalar>(h: T, k: T, m_h: T) -> Result<T> {
    if h.is_nan() || h <= T::zero() {
        return Err(Error::InvalidLayout("image size must be positive".into()));
    }
    if k.is_nan() || k < T::one() {
        return Err(Error::InvalidLayout("k must be >= 1".into()));
    }
    let two = T::one() + T::one();
    Ok(T::one() / k + two * m_h / (h * k.sqrt()) + m_h * m_h / (h * h))
}
