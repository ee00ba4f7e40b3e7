//! Axis-aligned boxes and the point-in-box predicate shared by every module.
//!
//! Box corners and point coordinates are stored as `f32` (the on-disk
//! precision); all predicates widen to `f64` first, where the subtraction of
//! two `f32` values is exact, so membership never depends on rounding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = [f32; 3];

/// Smallest extent assigned to a tight box along a degenerate axis.
pub const MIN_EXTENT: f32 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox3D {
    pub center: Point3,
    /// Full extents along x, y, z.
    pub dims: Point3,
    pub category: i32,
}

impl BBox3D {
    pub fn new(center: Point3, dims: Point3, category: i32) -> Result<Self> {
        if center.iter().chain(dims.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Validation("box has non-finite center or dims".into()));
        }
        if dims.iter().any(|&d| d <= 0.0) {
            return Err(Error::Validation(format!(
                "box dims must be strictly positive, got {dims:?}"
            )));
        }
        Ok(Self {
            center,
            dims,
            category,
        })
    }

    /// Tightest `f32` box that contains every point under [`BBox3D::contains`].
    ///
    /// Returns `None` for an empty point set.
    pub fn tight<'a>(points: impl IntoIterator<Item = &'a Point3>, category: i32) -> Option<Self> {
        let mut lo = [f32::INFINITY; 3];
        let mut hi = [f32::NEG_INFINITY; 3];
        let mut any = false;
        for p in points {
            any = true;
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        if !any {
            return None;
        }
        let mut center = [0f32; 3];
        let mut dims = [0f32; 3];
        for a in 0..3 {
            let c = ((lo[a] as f64 + hi[a] as f64) / 2.0) as f32;
            let need = 2.0 * (hi[a] as f64 - c as f64).max(c as f64 - lo[a] as f64);
            let mut d = (need as f32).max(MIN_EXTENT);
            while (d as f64) < need {
                d = next_up(d);
            }
            center[a] = c;
            dims[a] = d;
        }
        Some(Self {
            center,
            dims,
            category,
        })
    }

    /// Closed-boundary membership: `|p - center| <= dims / 2` on every axis.
    #[inline]
    pub fn contains(&self, p: &Point3) -> bool {
        (0..3).all(|a| (p[a] as f64 - self.center[a] as f64).abs() <= self.dims[a] as f64 / 2.0)
    }

    pub fn min(&self) -> [f64; 3] {
        std::array::from_fn(|a| self.center[a] as f64 - self.dims[a] as f64 / 2.0)
    }

    pub fn max(&self) -> [f64; 3] {
        std::array::from_fn(|a| self.center[a] as f64 + self.dims[a] as f64 / 2.0)
    }

    pub fn volume(&self) -> f64 {
        self.dims.iter().map(|&d| d as f64).product()
    }

    /// Box-level intersection with closed faces (touching boxes intersect).
    pub fn intersects(&self, other: &BBox3D) -> bool {
        (0..3).all(|a| {
            (self.center[a] as f64 - other.center[a] as f64).abs()
                <= (self.dims[a] as f64 + other.dims[a] as f64) / 2.0
        })
    }

    /// Membership in this box grown by `margin` on every face.
    pub fn contains_dilated(&self, p: &Point3, margin: f64) -> bool {
        (0..3).all(|a| {
            (p[a] as f64 - self.center[a] as f64).abs() <= self.dims[a] as f64 / 2.0 + margin
        })
    }

    pub fn center_distance(&self, other: &BBox3D) -> f64 {
        (0..3)
            .map(|a| {
                let d = self.center[a] as f64 - other.center[a] as f64;
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }
}

fn next_up(x: f32) -> f32 {
    if x.is_nan() || x == f32::INFINITY {
        return x;
    }
    if x == 0.0 {
        return f32::from_bits(1);
    }
    let bits = x.to_bits();
    if x > 0.0 {
        f32::from_bits(bits + 1)
    } else {
        f32::from_bits(bits - 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn corner_point_is_inside() {
        let b = BBox3D::new([0.0; 3], [2.0, 2.0, 2.0], 0).unwrap();
        assert!(b.contains(&[1.0, 1.0, 1.0]));
        assert!(b.contains(&[-1.0, 1.0, -1.0]));
        assert!(!b.contains(&[1.0001, 0.0, 0.0]));
    }

    #[test]
    fn rejects_non_positive_dims() {
        assert!(BBox3D::new([0.0; 3], [1.0, 0.0, 1.0], 0).is_err());
        assert!(BBox3D::new([0.0; 3], [1.0, f32::NAN, 1.0], 0).is_err());
    }

    #[test]
    fn touching_boxes_intersect() {
        let a = BBox3D::new([0.0; 3], [1.0; 3], 0).unwrap();
        let b = BBox3D::new([1.0, 0.0, 0.0], [1.0; 3], 0).unwrap();
        let c = BBox3D::new([1.01, 0.0, 0.0], [1.0; 3], 0).unwrap();
        assert!(a.intersects(&b));
        assert!(!a.intersects(&c));
    }

    #[test]
    fn single_point_tight_box_has_min_extent() {
        let b = BBox3D::tight([[0.5f32, 0.5, 0.5]].iter(), 3).unwrap();
        assert_eq!(b.dims, [MIN_EXTENT; 3]);
        assert!(b.contains(&[0.5, 0.5, 0.5]));
        assert!(BBox3D::tight(std::iter::empty(), 0).is_none());
    }

    proptest! {
        #[test]
        fn tight_box_contains_all_points(
            pts in prop::collection::vec(prop::array::uniform3(-50.0f32..50.0), 1..40)
        ) {
            let b = BBox3D::tight(pts.iter(), 0).unwrap();
            for p in &pts {
                prop_assert!(b.contains(p));
            }
        }
    }
}
