//! Scene and label-set files.

use std::path::Path;

use ndarray::Array2;

use crate::container::{ArrayReader, ArrayWriter};
use crate::error::{Error, Result};
use crate::geometry::BBox3D;
use crate::scene::{PointCloud, PseudoLabelSet, Scene, SuperpointPartition};

pub const SCENE_KIND: &str = "saformer-scene";
pub const LABEL_KIND: &str = "saformer-labels";

pub(crate) fn write_scene_arrays(w: &mut ArrayWriter, scene: &Scene) {
    let n = scene.num_points();
    let k = scene.boxes.len();
    w.meta("scene_id", scene.id.clone());
    w.points("positions", &scene.cloud.positions);
    w.points("colors", &scene.cloud.colors);
    w.i32s(
        "superpoint",
        vec![n],
        scene.superpoints.assignment().iter().map(|&s| s as i32),
    );
    if let Some(gt) = &scene.gt_instance {
        w.i32s("gt_instance", vec![n], gt.iter().copied());
    }
    w.f32s("box_center", vec![k, 3], scene.boxes.iter().flat_map(|b| b.center));
    w.f32s("box_dims", vec![k, 3], scene.boxes.iter().flat_map(|b| b.dims));
    w.i32s("box_category", vec![k], scene.boxes.iter().map(|b| b.category));
}

pub(crate) fn read_scene_arrays(r: &ArrayReader) -> Result<Scene> {
    let id = r.meta("scene_id")?.to_string();
    let positions = r.points("positions")?;
    let colors = r.points("colors")?;
    let n = positions.len();
    if colors.len() != n {
        return Err(Error::parse("colors", format!("expected {n} rows, found {}", colors.len())));
    }
    let superpoint = r.i32_vec("superpoint", Some(n))?;
    if superpoint.iter().any(|&s| s < 0) {
        return Err(Error::parse("superpoint", "negative superpoint id"));
    }
    let superpoints = SuperpointPartition::new(superpoint.into_iter().map(|s| s as u32).collect())
        .map_err(|e| Error::parse("superpoint", e.to_string()))?;
    let gt_instance = if r.has("gt_instance") {
        Some(r.i32_vec("gt_instance", Some(n))?)
    } else {
        None
    };
    let centers = r.points("box_center")?;
    let dims = r.points("box_dims")?;
    let k = centers.len();
    if dims.len() != k {
        return Err(Error::parse("box_dims", format!("expected {k} rows, found {}", dims.len())));
    }
    let cats = r.i32_vec("box_category", Some(k))?;
    let boxes = centers
        .into_iter()
        .zip(dims)
        .zip(cats)
        .map(|((c, d), cat)| BBox3D::new(c, d, cat).map_err(|e| Error::parse("box_dims", e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let cloud = PointCloud::new(positions, colors)?;
    Scene::new(id, cloud, boxes, superpoints, gt_instance)
}

pub fn save_scene(scene: &Scene, path: &Path) -> Result<()> {
    let mut w = ArrayWriter::new(SCENE_KIND);
    write_scene_arrays(&mut w, scene);
    w.write(path)
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    let r = ArrayReader::open(path, SCENE_KIND)?;
    read_scene_arrays(&r)
}

pub fn save_labels(labels: &PseudoLabelSet, path: &Path) -> Result<()> {
    let (k, n) = labels.masks.dim();
    let mut w = ArrayWriter::new(LABEL_KIND);
    w.meta("scene_id", labels.scene_id.clone());
    w.f32s("masks", vec![k, n], labels.masks.iter().copied());
    w.u8s("determinate", vec![k, n], labels.determinate.iter().map(|&d| d as u8));
    w.i32s("categories", vec![k], labels.categories.iter().copied());
    w.write(path)
}

pub fn load_labels(path: &Path) -> Result<PseudoLabelSet> {
    let r = ArrayReader::open(path, LABEL_KIND)?;
    let scene_id = r.meta("scene_id")?.to_string();
    let (shape, masks) = r.f32s("masks")?;
    if shape.len() != 2 {
        return Err(Error::parse("masks", format!("expected rank 2, found {shape:?}")));
    }
    let (k, n) = (shape[0], shape[1]);
    let (dshape, det) = r.u8s("determinate")?;
    if dshape != shape {
        return Err(Error::parse("determinate", format!("shape {dshape:?} != masks {shape:?}")));
    }
    let categories = r.i32_vec("categories", Some(k))?;
    let masks = Array2::from_shape_vec((k, n), masks).map_err(|e| Error::parse("masks", e.to_string()))?;
    let determinate = Array2::from_shape_vec((k, n), det.into_iter().map(|d| d != 0).collect())
        .map_err(|e| Error::parse("determinate", e.to_string()))?;
    PseudoLabelSet::new(scene_id, masks, determinate, categories)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_point_scene() -> Scene {
        let cloud = PointCloud::new(vec![[0.5, 0.5, 0.5]], vec![[0.2, 0.3, 0.4]]).unwrap();
        let b = BBox3D::new([0.0; 3], [1.0; 3], 2).unwrap();
        Scene::new("tiny", cloud, vec![b], SuperpointPartition::new(vec![0]).unwrap(), None).unwrap()
    }

    #[test]
    fn minimal_scene_loads_with_corner_point_inside() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.scene");
        save_scene(&one_point_scene(), &path).unwrap();
        let s = load_scene(&path).unwrap();
        assert_eq!(s.num_points(), 1);
        assert_eq!(s.boxes.len(), 1);
        assert_eq!(s.box_membership(), vec![vec![0]]);
        assert_eq!(s, one_point_scene());
    }

    #[test]
    fn nan_coordinate_is_a_validation_error() {
        let mut w = ArrayWriter::new(SCENE_KIND);
        w.meta("scene_id", "bad");
        w.points("positions", &[[f32::NAN, 0.0, 0.0]]);
        w.points("colors", &[[0.0; 3]]);
        w.i32s("superpoint", vec![1], [0]);
        w.f32s("box_center", vec![0, 3], []);
        w.f32s("box_dims", vec![0, 3], []);
        w.i32s("box_category", vec![0], []);
        let r = ArrayReader::from_bytes(w.to_bytes().unwrap(), SCENE_KIND).unwrap();
        assert!(matches!(read_scene_arrays(&r), Err(Error::Validation(_))));
    }

    #[test]
    fn malformed_field_is_named() {
        let mut w = ArrayWriter::new(SCENE_KIND);
        w.meta("scene_id", "bad");
        w.points("positions", &[[0.0; 3]]);
        w.points("colors", &[[0.0; 3]]);
        w.i32s("superpoint", vec![2], [0, 0]);
        let r = ArrayReader::from_bytes(w.to_bytes().unwrap(), SCENE_KIND).unwrap();
        let err = read_scene_arrays(&r).unwrap_err().to_string();
        assert!(err.contains("superpoint"), "{err}");
    }

    #[test]
    fn empty_label_set_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.labels");
        let labels = PseudoLabelSet::new(
            "s",
            Array2::zeros((0, 5)),
            Array2::from_elem((0, 5), false),
            vec![],
        )
        .unwrap();
        save_labels(&labels, &path).unwrap();
        assert_eq!(load_labels(&path).unwrap(), labels);
    }

    #[test]
    fn hard_labels_keep_determinate_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hard.labels");
        let masks = Array2::from_shape_vec((2, 3), vec![1.0f32, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let det = Array2::from_elem((2, 3), true);
        let labels = PseudoLabelSet::new("s", masks, det, vec![3, 1]).unwrap();
        save_labels(&labels, &path).unwrap();
        assert_eq!(load_labels(&path).unwrap(), labels);
    }

    #[test]
    fn missing_directory_error_names_path() {
        let labels = PseudoLabelSet::new("s", Array2::zeros((0, 1)), Array2::from_elem((0, 1), false), vec![])
            .unwrap();
        let err = save_labels(&labels, Path::new("/nonexistent/dir/x.labels")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/dir/x.labels"));
    }
}
