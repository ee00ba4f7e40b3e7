//! Scene-level data types: point clouds, superpoints, boxes and label sets.

use std::collections::HashMap;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::geometry::{BBox3D, Point3};

/// Default superpoint voxel edge in meters.
pub const DEFAULT_SUPERPOINT_VOXEL: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<Point3>,
    /// RGB in `[0, 1]`.
    pub colors: Vec<Point3>,
}

impl PointCloud {
    pub fn new(positions: Vec<Point3>, colors: Vec<Point3>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::Validation("point cloud must have at least one point".into()));
        }
        if positions.len() != colors.len() {
            return Err(Error::Shape(format!(
                "positions has {} rows but colors has {}",
                positions.len(),
                colors.len()
            )));
        }
        if let Some(i) = positions.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::Validation(format!("non-finite coordinate at point {i}")));
        }
        if let Some(i) = colors
            .iter()
            .position(|c| c.iter().any(|v| !(0.0..=1.0).contains(v)))
        {
            return Err(Error::Validation(format!("color outside [0, 1] at point {i}")));
        }
        Ok(Self { positions, colors })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> (Vec<Point3>, Vec<Point3>) {
        (
            indices.iter().map(|&i| self.positions[i]).collect(),
            indices.iter().map(|&i| self.colors[i]).collect(),
        )
    }
}

/// Maps each point to a superpoint id in `[0, P)`; every id has a member.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SuperpointPartition {
    assignment: Vec<u32>,
    count: usize,
}

impl SuperpointPartition {
    pub fn new(assignment: Vec<u32>) -> Result<Self> {
        let count = assignment.iter().map(|&s| s as usize + 1).max().unwrap_or(0);
        let mut seen = vec![false; count];
        for &s in &assignment {
            seen[s as usize] = true;
        }
        if let Some(empty) = seen.iter().position(|s| !s) {
            return Err(Error::Validation(format!("superpoint {empty} has no member points")));
        }
        Ok(Self { assignment, count })
    }

    /// Uniform voxel-grid clustering; ids follow first appearance in point order.
    pub fn from_voxel_grid(positions: &[Point3], edge: f64) -> Self {
        assert!(edge > 0.0, "voxel edge must be positive");
        let mut ids: HashMap<[i64; 3], u32> = HashMap::new();
        let assignment = positions
            .iter()
            .map(|p| {
                let key = voxel_key(p, edge);
                let next = ids.len() as u32;
                *ids.entry(key).or_insert(next)
            })
            .collect();
        Self {
            assignment,
            count: ids.len(),
        }
    }

    pub fn assignment(&self) -> &[u32] {
        &self.assignment
    }

    pub fn num_points(&self) -> usize {
        self.assignment.len()
    }

    pub fn num_superpoints(&self) -> usize {
        self.count
    }

    /// Member point indices per superpoint, each list sorted ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.count];
        for (i, &s) in self.assignment.iter().enumerate() {
            out[s as usize].push(i);
        }
        out
    }
}

pub fn voxel_key(p: &Point3, edge: f64) -> [i64; 3] {
    std::array::from_fn(|a| (p[a] as f64 / edge).floor() as i64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: String,
    pub cloud: PointCloud,
    pub boxes: Vec<BBox3D>,
    pub superpoints: SuperpointPartition,
    /// Ground-truth instance per point; `-1` is background, otherwise a box index.
    pub gt_instance: Option<Vec<i32>>,
}

impl Scene {
    pub fn new(
        id: impl Into<String>,
        cloud: PointCloud,
        boxes: Vec<BBox3D>,
        superpoints: SuperpointPartition,
        gt_instance: Option<Vec<i32>>,
    ) -> Result<Self> {
        let n = cloud.len();
        if superpoints.num_points() != n {
            return Err(Error::Shape(format!(
                "superpoint assignment has {} entries for {n} points",
                superpoints.num_points()
            )));
        }
        if let Some(gt) = &gt_instance {
            if gt.len() != n {
                return Err(Error::Shape(format!("gt_instance has {} entries for {n} points", gt.len())));
            }
            let k = boxes.len() as i32;
            if let Some(bad) = gt.iter().find(|&&g| g < -1 || g >= k) {
                return Err(Error::Validation(format!(
                    "gt_instance value {bad} outside {{-1}} u [0, {k})"
                )));
            }
        }
        for b in &boxes {
            BBox3D::new(b.center, b.dims, b.category)?;
        }
        Ok(Self {
            id: id.into(),
            cloud,
            boxes,
            superpoints,
            gt_instance,
        })
    }

    pub fn num_points(&self) -> usize {
        self.cloud.len()
    }

    /// For each point, the indices of boxes containing it (ascending).
    pub fn box_membership(&self) -> Vec<Vec<usize>> {
        self.cloud
            .positions
            .iter()
            .map(|p| {
                self.boxes
                    .iter()
                    .enumerate()
                    .filter(|(_, b)| b.contains(p))
                    .map(|(k, _)| k)
                    .collect()
            })
            .collect()
    }
}

/// Soft per-instance masks over a scene's points.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelSet {
    pub scene_id: String,
    /// K x N, values in `[0, 1]`.
    pub masks: Array2<f32>,
    /// K x N; true where the value came from unambiguous box membership.
    pub determinate: Array2<bool>,
    pub categories: Vec<i32>,
}

impl PseudoLabelSet {
    pub fn new(
        scene_id: impl Into<String>,
        masks: Array2<f32>,
        determinate: Array2<bool>,
        categories: Vec<i32>,
    ) -> Result<Self> {
        if masks.dim() != determinate.dim() {
            return Err(Error::Shape(format!(
                "masks {:?} vs determinate {:?}",
                masks.dim(),
                determinate.dim()
            )));
        }
        if masks.nrows() != categories.len() {
            return Err(Error::Shape(format!(
                "{} mask rows but {} categories",
                masks.nrows(),
                categories.len()
            )));
        }
        for (v, &d) in masks.iter().zip(determinate.iter()) {
            if !(0.0..=1.0).contains(v) {
                return Err(Error::Validation(format!("mask value {v} outside [0, 1]")));
            }
            if d && *v != 0.0 && *v != 1.0 {
                return Err(Error::Validation(format!("determinate entry has soft value {v}")));
            }
        }
        Ok(Self {
            scene_id: scene_id.into(),
            masks,
            determinate,
            categories,
        })
    }

    pub fn num_instances(&self) -> usize {
        self.masks.nrows()
    }

    pub fn num_points(&self) -> usize {
        self.masks.ncols()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cloud_validation() {
        assert!(PointCloud::new(vec![], vec![]).is_err());
        assert!(PointCloud::new(vec![[0.0; 3]], vec![]).is_err());
        assert!(PointCloud::new(vec![[f32::NAN, 0.0, 0.0]], vec![[0.0; 3]]).is_err());
        assert!(PointCloud::new(vec![[0.0; 3]], vec![[1.5, 0.0, 0.0]]).is_err());
        assert!(PointCloud::new(vec![[0.0; 3]], vec![[1.0, 0.0, 0.0]]).is_ok());
    }

    #[test]
    fn superpoints_must_be_dense() {
        assert!(SuperpointPartition::new(vec![0, 2]).is_err());
        let sp = SuperpointPartition::new(vec![1, 0, 1]).unwrap();
        assert_eq!(sp.num_superpoints(), 2);
        assert_eq!(sp.members(), vec![vec![1], vec![0, 2]]);
    }

    #[test]
    fn voxel_grid_groups_nearby_points() {
        let pts = [[0.01f32, 0.01, 0.01], [0.2, 0.0, 0.0], [0.02, 0.03, 0.04], [-0.01, 0.0, 0.0]];
        let sp = SuperpointPartition::from_voxel_grid(&pts, 0.05);
        assert_eq!(sp.assignment(), &[0, 1, 0, 2]);
        assert_eq!(sp.num_superpoints(), 3);
    }

    #[test]
    fn gt_instance_range_checked() {
        let cloud = PointCloud::new(vec![[0.0; 3]], vec![[0.0; 3]]).unwrap();
        let sp = SuperpointPartition::new(vec![0]).unwrap();
        let b = BBox3D::new([0.0; 3], [1.0; 3], 0).unwrap();
        assert!(Scene::new("s", cloud.clone(), vec![b], sp.clone(), Some(vec![1])).is_err());
        assert!(Scene::new("s", cloud, vec![b], sp, Some(vec![0])).is_ok());
    }

    #[test]
    fn label_set_determinate_values_are_hard() {
        let masks = Array2::from_shape_vec((1, 2), vec![0.3f32, 1.0]).unwrap();
        let det = Array2::from_shape_vec((1, 2), vec![true, true]).unwrap();
        assert!(PseudoLabelSet::new("s", masks.clone(), det, vec![0]).is_err());
        let det = Array2::from_shape_vec((1, 2), vec![false, true]).unwrap();
        assert!(PseudoLabelSet::new("s", masks, det, vec![0]).is_ok());
    }
}
