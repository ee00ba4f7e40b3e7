//! Determinate / indeterminate regions of overlapping box pairs, the
//! non-overlapping object bank, and the smaller-box assignment baseline.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{ArrayReader, ArrayWriter};
use crate::error::{Error, Result};
use crate::geometry::{BBox3D, Point3};
use crate::io::{read_scene_arrays, write_scene_arrays};
use crate::scene::{PointCloud, Scene, SuperpointPartition};

pub const DEFAULT_CROP_MARGIN: f64 = 0.1;
pub const SAMPLE_KIND: &str = "saformer-sample";
pub const BANK_KIND: &str = "saformer-bank";

/// Label of an overlap point: first box, second box, or background.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RegionLabel {
    A,
    B,
    Background,
}

impl RegionLabel {
    pub fn code(self) -> i32 {
        match self {
            RegionLabel::A => 0,
            RegionLabel::B => 1,
            RegionLabel::Background => 2,
        }
    }

    pub fn from_code(code: i32) -> Option<Self> {
        match code {
            0 => Some(RegionLabel::A),
            1 => Some(RegionLabel::B),
            2 => Some(RegionLabel::Background),
            _ => None,
        }
    }

    /// Label of a point whose instance id is `gt`, relative to the pair `(a, b)`.
    pub fn from_instance(gt: i32, a: usize, b: usize) -> Self {
        if gt >= 0 && gt as usize == a {
            RegionLabel::A
        } else if gt >= 0 && gt as usize == b {
            RegionLabel::B
        } else {
            RegionLabel::Background
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OverlapSample {
    pub scene_id: String,
    pub box_pair: (usize, usize),
    /// Points only in box `a`.
    pub s1: Vec<usize>,
    /// Points only in box `b`.
    pub s2: Vec<usize>,
    /// Points in both boxes.
    pub s3: Vec<usize>,
    /// Points in neither box but inside the crop envelope.
    pub background: Vec<usize>,
    /// Ground truth aligned with `s3`, when known.
    pub gt_region3: Option<Vec<RegionLabel>>,
}

impl OverlapSample {
    /// All crop points in ascending index order.
    pub fn envelope(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self
            .s1
            .iter()
            .chain(&self.s2)
            .chain(&self.s3)
            .chain(&self.background)
            .copied()
            .collect();
        all.sort_unstable();
        all
    }
}

/// One sample per unordered box pair with a non-empty point-level intersection.
pub fn extract_overlap_samples(scene: &Scene, margin: f64) -> Vec<OverlapSample> {
    let membership = scene.box_membership();
    let k = scene.boxes.len();
    let mut out = Vec::new();
    for a in 0..k {
        for b in a + 1..k {
            let (ba, bb) = (&scene.boxes[a], &scene.boxes[b]);
            if !ba.intersects(bb) {
                continue;
            }
            let mut sample = OverlapSample {
                scene_id: scene.id.clone(),
                box_pair: (a, b),
                s1: Vec::new(),
                s2: Vec::new(),
                s3: Vec::new(),
                background: Vec::new(),
                gt_region3: None,
            };
            for (i, boxes) in membership.iter().enumerate() {
                let in_a = boxes.binary_search(&a).is_ok();
                let in_b = boxes.binary_search(&b).is_ok();
                match (in_a, in_b) {
                    (true, true) => sample.s3.push(i),
                    (true, false) => sample.s1.push(i),
                    (false, true) => sample.s2.push(i),
                    (false, false) => {
                        let p = &scene.cloud.positions[i];
                        if ba.contains_dilated(p, margin) || bb.contains_dilated(p, margin) {
                            sample.background.push(i);
                        }
                    }
                }
            }
            if sample.s3.is_empty() {
                continue;
            }
            if let Some(gt) = &scene.gt_instance {
                sample.gt_region3 = Some(
                    sample
                        .s3
                        .iter()
                        .map(|&i| RegionLabel::from_instance(gt[i], a, b))
                        .collect(),
                );
            }
            out.push(sample);
        }
    }
    out
}

/// Labels every S3 point with the smaller-volume box; ties go to box `a`.
pub fn smaller_box_assign(sample: &OverlapSample, scene: &Scene) -> Vec<RegionLabel> {
    let (a, b) = sample.box_pair;
    let label = if scene.boxes[b].volume() < scene.boxes[a].volume() {
        RegionLabel::B
    } else {
        RegionLabel::A
    };
    vec![label; sample.s3.len()]
}

/// Where a [`SampleRecord`] came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleOrigin {
    Real,
    Simulated,
}

impl SampleOrigin {
    fn as_str(self) -> &'static str {
        match self {
            SampleOrigin::Real => "real",
            SampleOrigin::Simulated => "simulated",
        }
    }
}

/// A self-contained overlap sample: a two-box crop scene plus regions indexed
/// into it. Box 0 is the pair's `a`, box 1 is `b`; crop ground truth uses
/// `0`/`1` for the pair and `-1` for everything else.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub scene: Scene,
    pub sample: OverlapSample,
    pub origin: SampleOrigin,
    /// Box indices of the pair in the source scene.
    pub source_pair: (usize, usize),
}

impl SampleRecord {
    /// Crops `sample` out of `scene` into a standalone record.
    pub fn crop(scene: &Scene, sample: &OverlapSample) -> Result<Self> {
        if sample.scene_id != scene.id {
            return Err(Error::Mismatch(format!(
                "sample belongs to `{}`, not `{}`",
                sample.scene_id, scene.id
            )));
        }
        let envelope = sample.envelope();
        if envelope.last().is_some_and(|&i| i >= scene.num_points()) {
            return Err(Error::Mismatch("sample index outside scene".into()));
        }
        let local: HashMap<usize, usize> = envelope.iter().enumerate().map(|(l, &g)| (g, l)).collect();
        let (positions, colors) = scene.cloud.subset(&envelope);
        let mut sp_ids: HashMap<u32, u32> = HashMap::new();
        let assignment = envelope
            .iter()
            .map(|&g| {
                let s = scene.superpoints.assignment()[g];
                let next = sp_ids.len() as u32;
                *sp_ids.entry(s).or_insert(next)
            })
            .collect();
        let (a, b) = sample.box_pair;
        let gt = scene.gt_instance.as_ref().map(|gt| {
            envelope
                .iter()
                .map(|&g| match RegionLabel::from_instance(gt[g], a, b) {
                    RegionLabel::A => 0,
                    RegionLabel::B => 1,
                    RegionLabel::Background => -1,
                })
                .collect()
        });
        let crop_scene = Scene::new(
            format!("{}#{}-{}", scene.id, a, b),
            PointCloud::new(positions, colors)?,
            vec![scene.boxes[a], scene.boxes[b]],
            SuperpointPartition::new(assignment)?,
            gt,
        )?;
        let map = |v: &[usize]| v.iter().map(|g| local[g]).collect::<Vec<_>>();
        let local_sample = OverlapSample {
            scene_id: crop_scene.id.clone(),
            box_pair: (0, 1),
            s1: map(&sample.s1),
            s2: map(&sample.s2),
            s3: map(&sample.s3),
            background: map(&sample.background),
            gt_region3: sample.gt_region3.clone(),
        };
        Ok(Self {
            scene: crop_scene,
            sample: local_sample,
            origin: SampleOrigin::Real,
            source_pair: (a, b),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = ArrayWriter::new(SAMPLE_KIND);
        write_scene_arrays(&mut w, &self.scene);
        w.meta("origin", self.origin.as_str());
        w.meta("source_pair", format!("{},{}", self.source_pair.0, self.source_pair.1));
        w.indices("region_s1", &self.sample.s1);
        w.indices("region_s2", &self.sample.s2);
        w.indices("region_s3", &self.sample.s3);
        w.indices("background", &self.sample.background);
        if let Some(gt) = &self.sample.gt_region3 {
            w.i32s("gt_region3", vec![gt.len()], gt.iter().map(|l| l.code()));
        }
        w.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r = ArrayReader::open(path, SAMPLE_KIND)?;
        let scene = read_scene_arrays(&r)?;
        if scene.boxes.len() != 2 {
            return Err(Error::parse("box_center", "a sample file holds exactly two boxes"));
        }
        let origin = match r.meta("origin")? {
            "real" => SampleOrigin::Real,
            "simulated" => SampleOrigin::Simulated,
            other => return Err(Error::parse("origin", format!("unknown origin `{other}`"))),
        };
        let source_pair = r
            .meta("source_pair")?
            .split_once(',')
            .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)))
            .ok_or_else(|| Error::parse("source_pair", "expected `a,b`"))?;
        let n = scene.num_points();
        let s3 = r.index_vec("region_s3", n)?;
        let gt_region3 = if r.has("gt_region3") {
            let codes = r.i32_vec("gt_region3", Some(s3.len()))?;
            Some(
                codes
                    .into_iter()
                    .map(|c| RegionLabel::from_code(c).ok_or_else(|| Error::parse("gt_region3", format!("bad label {c}"))))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        let sample = OverlapSample {
            scene_id: scene.id.clone(),
            box_pair: (0, 1),
            s1: r.index_vec("region_s1", n)?,
            s2: r.index_vec("region_s2", n)?,
            s3,
            background: r.index_vec("background", n)?,
            gt_region3,
        };
        Ok(Self {
            scene,
            sample,
            origin,
            source_pair,
        })
    }

    pub fn box_a(&self) -> &BBox3D {
        &self.scene.boxes[0]
    }

    pub fn box_b(&self) -> &BBox3D {
        &self.scene.boxes[1]
    }
}

/// An isolated object: points inside a box that touches no other box.
#[derive(Clone, Debug, PartialEq)]
pub struct BankObject {
    pub positions: Vec<Point3>,
    pub colors: Vec<Point3>,
    pub category: i32,
    pub bbox: BBox3D,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ObjectBank {
    pub objects: Vec<BankObject>,
}

impl ObjectBank {
    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    /// Object indices grouped by category.
    pub fn by_category(&self) -> HashMap<i32, Vec<usize>> {
        let mut out: HashMap<i32, Vec<usize>> = HashMap::new();
        for (i, o) in self.objects.iter().enumerate() {
            out.entry(o.category).or_default().push(i);
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = ArrayWriter::new(BANK_KIND);
        let positions: Vec<Point3> = self.objects.iter().flat_map(|o| o.positions.iter().copied()).collect();
        let colors: Vec<Point3> = self.objects.iter().flat_map(|o| o.colors.iter().copied()).collect();
        let mut offsets = vec![0i32];
        for o in &self.objects {
            offsets.push(offsets.last().unwrap() + o.positions.len() as i32);
        }
        let m = self.objects.len();
        w.points("positions", &positions);
        w.points("colors", &colors);
        w.i32s("object_offsets", vec![m + 1], offsets);
        w.i32s("category", vec![m], self.objects.iter().map(|o| o.category));
        w.f32s("box_center", vec![m, 3], self.objects.iter().flat_map(|o| o.bbox.center));
        w.f32s("box_dims", vec![m, 3], self.objects.iter().flat_map(|o| o.bbox.dims));
        w.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r = ArrayReader::open(path, BANK_KIND)?;
        let positions = r.points("positions")?;
        let colors = r.points("colors")?;
        if colors.len() != positions.len() {
            return Err(Error::parse("colors", "row count differs from positions"));
        }
        let categories = r.i32_vec("category", None)?;
        let m = categories.len();
        let offsets = r.i32_vec("object_offsets", Some(m + 1))?;
        let centers = r.points("box_center")?;
        let dims = r.points("box_dims")?;
        if centers.len() != m || dims.len() != m {
            return Err(Error::parse("box_center", format!("expected {m} boxes")));
        }
        let mut objects = Vec::with_capacity(m);
        for i in 0..m {
            let (lo, hi) = (offsets[i], offsets[i + 1]);
            if lo < 0 || hi < lo || hi as usize > positions.len() {
                return Err(Error::parse("object_offsets", format!("bad range {lo}..{hi}")));
            }
            let range = lo as usize..hi as usize;
            objects.push(BankObject {
                positions: positions[range.clone()].to_vec(),
                colors: colors[range].to_vec(),
                category: categories[i],
                bbox: BBox3D::new(centers[i], dims[i], categories[i])
                    .map_err(|e| Error::parse("box_dims", e.to_string()))?,
            });
        }
        Ok(Self { objects })
    }
}

/// Objects whose boxes intersect no other box of their scene.
pub fn extract_object_bank(scenes: &[Scene]) -> ObjectBank {
    let mut objects = Vec::new();
    for scene in scenes {
        for (k, bk) in scene.boxes.iter().enumerate() {
            let isolated = scene
                .boxes
                .iter()
                .enumerate()
                .all(|(j, bj)| j == k || !bk.intersects(bj));
            if !isolated {
                continue;
            }
            let idx: Vec<usize> = (0..scene.num_points())
                .filter(|&i| bk.contains(&scene.cloud.positions[i]))
                .collect();
            if idx.is_empty() {
                continue;
            }
            let (positions, colors) = scene.cloud.subset(&idx);
            let bbox = BBox3D::tight(positions.iter(), bk.category).expect("non-empty");
            objects.push(BankObject {
                positions,
                colors,
                category: bk.category,
                bbox,
            });
        }
    }
    ObjectBank { objects }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene_with(points: Vec<Point3>, boxes: Vec<BBox3D>, gt: Option<Vec<i32>>) -> Scene {
        let n = points.len();
        let cloud = PointCloud::new(points, vec![[0.5; 3]; n]).unwrap();
        let sp = SuperpointPartition::new((0..n as u32).collect()).unwrap();
        Scene::new("t", cloud, boxes, sp, gt).unwrap()
    }

    fn cube(c: Point3, d: f32, cat: i32) -> BBox3D {
        BBox3D::new(c, [d; 3], cat).unwrap()
    }

    #[test]
    fn disjoint_boxes_give_no_samples() {
        let s = scene_with(
            vec![[0.0; 3], [5.0, 0.0, 0.0]],
            vec![cube([0.0; 3], 1.0, 0), cube([5.0, 0.0, 0.0], 1.0, 0)],
            None,
        );
        assert!(extract_overlap_samples(&s, DEFAULT_CROP_MARGIN).is_empty());
    }

    #[test]
    fn identical_boxes_put_everything_in_s3() {
        let pts = vec![[0.1, 0.0, 0.0], [-0.2, 0.3, 0.1], [0.4, -0.4, 0.4]];
        let s = scene_with(pts, vec![cube([0.0; 3], 1.0, 0), cube([0.0; 3], 1.0, 1)], None);
        let samples = extract_overlap_samples(&s, DEFAULT_CROP_MARGIN);
        assert_eq!(samples.len(), 1);
        assert!(samples[0].s1.is_empty() && samples[0].s2.is_empty());
        assert_eq!(samples[0].s3, vec![0, 1, 2]);
    }

    #[test]
    fn box_overlap_without_points_is_dropped() {
        let s = scene_with(
            vec![[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]],
            vec![cube([-0.6, 0.0, 0.0], 1.0, 0), cube([0.6, 0.0, 0.0], 1.0, 0)],
            None,
        );
        assert!(extract_overlap_samples(&s, DEFAULT_CROP_MARGIN).is_empty());
    }

    #[test]
    fn regions_and_gt_are_split() {
        let pts = vec![
            [-0.8, 0.0, 0.0], // only a
            [0.0, 0.0, 0.0],  // both
            [0.8, 0.0, 0.0],  // only b
            [1.05, 0.0, 0.0], // margin
            [3.0, 0.0, 0.0],  // outside
        ];
        let s = scene_with(
            pts,
            vec![cube([-0.5, 0.0, 0.0], 1.0, 0), cube([0.5, 0.0, 0.0], 1.0, 1)],
            Some(vec![0, 1, 1, -1, -1]),
        );
        let samples = extract_overlap_samples(&s, 0.1);
        let x = &samples[0];
        assert_eq!((x.s1.clone(), x.s2.clone(), x.s3.clone()), (vec![0], vec![2], vec![1]));
        assert_eq!(x.background, vec![3]);
        assert_eq!(x.gt_region3, Some(vec![RegionLabel::B]));
    }

    #[test]
    fn smaller_box_rule_and_tie() {
        let pts = vec![[0.0; 3]];
        let s = scene_with(
            pts.clone(),
            vec![
                BBox3D::new([0.0; 3], [1.0, 1.0, 1.0], 0).unwrap(),
                BBox3D::new([0.0; 3], [2.0, 1.0, 1.0], 0).unwrap(),
            ],
            None,
        );
        let x = &extract_overlap_samples(&s, 0.1)[0];
        assert_eq!(smaller_box_assign(x, &s), vec![RegionLabel::A]);
        let s = scene_with(
            pts,
            vec![
                BBox3D::new([0.0; 3], [2.0, 1.0, 1.0], 0).unwrap(),
                BBox3D::new([0.0; 3], [1.0, 2.0, 1.0], 0).unwrap(),
            ],
            None,
        );
        let x = &extract_overlap_samples(&s, 0.1)[0];
        assert_eq!(smaller_box_assign(x, &s), vec![RegionLabel::A]);
    }

    #[test]
    fn bank_takes_only_isolated_boxes() {
        let s = scene_with(
            vec![[0.0; 3], [0.4, 0.0, 0.0], [5.0, 0.0, 0.0], [9.0, 0.0, 0.0]],
            vec![
                cube([0.0; 3], 1.0, 0),
                cube([0.5, 0.0, 0.0], 1.0, 1),
                cube([5.0, 0.0, 0.0], 1.0, 2),
            ],
            None,
        );
        let bank = extract_object_bank(&[s]);
        assert_eq!(bank.len(), 1);
        assert_eq!(bank.objects[0].positions, vec![[5.0, 0.0, 0.0]]);
        assert_eq!(bank.objects[0].category, 2);
    }

    #[test]
    fn all_overlapping_gives_empty_bank() {
        let s = scene_with(
            vec![[0.0; 3]],
            vec![cube([0.0; 3], 1.0, 0), cube([0.5, 0.0, 0.0], 1.0, 1)],
            None,
        );
        assert!(extract_object_bank(&[s]).is_empty());
    }

    #[test]
    fn crop_round_trips_through_file() {
        let pts = vec![[-0.8, 0.0, 0.0], [0.0, 0.0, 0.0], [0.8, 0.0, 0.0], [3.0, 0.0, 0.0]];
        let s = scene_with(
            pts,
            vec![cube([-0.5, 0.0, 0.0], 1.0, 4), cube([0.5, 0.0, 0.0], 1.0, 5)],
            Some(vec![0, 0, 1, -1]),
        );
        let x = &extract_overlap_samples(&s, 0.1)[0];
        let rec = SampleRecord::crop(&s, x).unwrap();
        assert_eq!(rec.scene.num_points(), 3);
        assert_eq!(rec.sample.s3, vec![1]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.sample");
        rec.save(&path).unwrap();
        assert_eq!(SampleRecord::load(&path).unwrap(), rec);
    }
}
