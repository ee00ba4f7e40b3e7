//! Deterministic desk-scale worlds with per-point ground truth.
//!
//! Objects are parametric solids (cuboids, cylinders, L-shapes, arches)
//! sampled on their visible surfaces, placed on a flat desk. A configurable
//! share of objects is placed so that its box intersects a neighbour's box
//! while the point sets stay collision free.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox3D, Point3};
use crate::rng::{stream, Rng};
use crate::scene::{voxel_key, PointCloud, Scene, SuperpointPartition};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Cuboid,
    Cylinder,
    LShape,
    Arch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub name: String,
    pub shape: ShapeKind,
    /// Extents (x, y, z) lower and upper bounds in meters.
    pub size_min: [f64; 3],
    pub size_max: [f64; 3],
    /// Base hue in `[0, 1)`.
    pub hue: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub num_scenes: usize,
    pub objects_per_scene: [usize; 2],
    /// Target share of objects whose box intersects another box.
    pub overlap_fraction: f64,
    pub points_per_object: [usize; 2],
    pub desk_size: [f64; 2],
    /// Desk points per square meter.
    pub floor_density: f64,
    pub noise_sigma: f64,
    pub superpoint_voxel: f64,
    pub collision_voxel: f64,
    pub placement_retries: usize,
    pub categories: Vec<CategorySpec>,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_scenes: 50,
            objects_per_scene: [4, 7],
            overlap_fraction: 0.4,
            points_per_object: [80, 200],
            desk_size: [1.6, 1.1],
            floor_density: 400.0,
            noise_sigma: 0.005,
            superpoint_voxel: crate::scene::DEFAULT_SUPERPOINT_VOXEL,
            collision_voxel: 0.03,
            placement_retries: 200,
            categories: default_categories(),
            seed: 0,
        }
    }
}

pub fn default_categories() -> Vec<CategorySpec> {
    vec![
        CategorySpec {
            name: "box".into(),
            shape: ShapeKind::Cuboid,
            size_min: [0.08, 0.08, 0.05],
            size_max: [0.25, 0.2, 0.2],
            hue: 0.0,
        },
        CategorySpec {
            name: "can".into(),
            shape: ShapeKind::Cylinder,
            size_min: [0.06, 0.06, 0.08],
            size_max: [0.12, 0.12, 0.2],
            hue: 0.33,
        },
        CategorySpec {
            name: "corner".into(),
            shape: ShapeKind::LShape,
            size_min: [0.15, 0.15, 0.06],
            size_max: [0.3, 0.3, 0.15],
            hue: 0.6,
        },
        CategorySpec {
            name: "stand".into(),
            shape: ShapeKind::Arch,
            size_min: [0.25, 0.15, 0.1],
            size_max: [0.45, 0.25, 0.18],
            hue: 0.13,
        },
    ]
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.overlap_fraction) {
            return Err(Error::Config("overlap_fraction must lie in [0, 1]".into()));
        }
        if self.objects_per_scene[0] == 0 || self.objects_per_scene[0] > self.objects_per_scene[1] {
            return Err(Error::Config("objects_per_scene must be a non-empty range".into()));
        }
        if self.points_per_object[0] == 0 || self.points_per_object[0] > self.points_per_object[1] {
            return Err(Error::Config("points_per_object must be a non-empty range".into()));
        }
        if self.categories.is_empty() {
            return Err(Error::Config("at least one category is required".into()));
        }
        if self.superpoint_voxel <= 0.0 || self.collision_voxel <= 0.0 || self.noise_sigma < 0.0 {
            return Err(Error::Config("voxel sizes must be positive and noise non-negative".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::parse("world config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A planar or curved surface patch in object-local coordinates.
#[derive(Clone, Copy, Debug)]
enum Patch {
    /// Parallelogram `origin + s*u + t*v`, `s, t` in `[0, 1]`.
    Rect { origin: [f64; 3], u: [f64; 3], v: [f64; 3] },
    CylinderSide { center: [f64; 2], radius: f64, height: f64 },
    Disk { center: [f64; 2], radius: f64, z: f64 },
}

impl Patch {
    fn area(&self) -> f64 {
        match *self {
            Patch::Rect { u, v, .. } => {
                let c = [
                    u[1] * v[2] - u[2] * v[1],
                    u[2] * v[0] - u[0] * v[2],
                    u[0] * v[1] - u[1] * v[0],
                ];
                (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt()
            }
            Patch::CylinderSide { radius, height, .. } => 2.0 * std::f64::consts::PI * radius * height,
            Patch::Disk { radius, .. } => std::f64::consts::PI * radius * radius,
        }
    }

    fn sample(&self, rng: &mut Rng) -> [f64; 3] {
        match *self {
            Patch::Rect { origin, u, v } => {
                let (s, t): (f64, f64) = (rng.random(), rng.random());
                std::array::from_fn(|a| origin[a] + s * u[a] + t * v[a])
            }
            Patch::CylinderSide { center, radius, height } => {
                let th = rng.random::<f64>() * std::f64::consts::TAU;
                [center[0] + radius * th.cos(), center[1] + radius * th.sin(), rng.random::<f64>() * height]
            }
            Patch::Disk { center, radius, z } => {
                let r = radius * rng.random::<f64>().sqrt();
                let th = rng.random::<f64>() * std::f64::consts::TAU;
                [center[0] + r * th.cos(), center[1] + r * th.sin(), z]
            }
        }
    }
}

fn rect_xy(x0: f64, y0: f64, x1: f64, y1: f64, z: f64) -> Patch {
    Patch::Rect {
        origin: [x0, y0, z],
        u: [x1 - x0, 0.0, 0.0],
        v: [0.0, y1 - y0, 0.0],
    }
}

fn wall_x(x: f64, y0: f64, y1: f64, z0: f64, z1: f64) -> Patch {
    Patch::Rect {
        origin: [x, y0, z0],
        u: [0.0, y1 - y0, 0.0],
        v: [0.0, 0.0, z1 - z0],
    }
}

fn wall_y(y: f64, x0: f64, x1: f64, z0: f64, z1: f64) -> Patch {
    Patch::Rect {
        origin: [x0, y, z0],
        u: [x1 - x0, 0.0, 0.0],
        v: [0.0, 0.0, z1 - z0],
    }
}

/// A sized shape instance in local coordinates: footprint `[0,w] x [0,d]`,
/// resting on `z = 0`. Bottom faces are never sampled (they face the desk).
#[derive(Clone, Debug)]
struct ShapeInstance {
    kind: ShapeKind,
    size: [f64; 3],
    /// L-shape notch fraction or arch slab thickness.
    param: f64,
    mirror: [bool; 2],
}

impl ShapeInstance {
    fn patches(&self) -> Vec<Patch> {
        let [w, d, h] = self.size;
        match self.kind {
            ShapeKind::Cuboid => vec![
                rect_xy(0.0, 0.0, w, d, h),
                wall_x(0.0, 0.0, d, 0.0, h),
                wall_x(w, 0.0, d, 0.0, h),
                wall_y(0.0, 0.0, w, 0.0, h),
                wall_y(d, 0.0, w, 0.0, h),
            ],
            ShapeKind::Cylinder => {
                let r = w.min(d) / 2.0;
                let c = [w / 2.0, d / 2.0];
                vec![
                    Patch::CylinderSide { center: c, radius: r, height: h },
                    Patch::Disk { center: c, radius: r, z: h },
                ]
            }
            ShapeKind::LShape => {
                let (xn, yn) = (w * (1.0 - self.param), d * (1.0 - self.param));
                vec![
                    rect_xy(0.0, 0.0, w, yn, h),
                    rect_xy(0.0, yn, xn, d, h),
                    wall_x(0.0, 0.0, d, 0.0, h),
                    wall_y(0.0, 0.0, w, 0.0, h),
                    wall_x(w, 0.0, yn, 0.0, h),
                    wall_y(d, 0.0, xn, 0.0, h),
                    wall_y(yn, xn, w, 0.0, h),
                    wall_x(xn, yn, d, 0.0, h),
                ]
            }
            ShapeKind::Arch => {
                let t = self.param;
                vec![
                    rect_xy(0.0, 0.0, w, d, h),
                    rect_xy(t, 0.0, w - t, d, h - t),
                    wall_x(0.0, 0.0, d, 0.0, h),
                    wall_x(w, 0.0, d, 0.0, h),
                    wall_x(t, 0.0, d, 0.0, h - t),
                    wall_x(w - t, 0.0, d, 0.0, h - t),
                    wall_y(0.0, 0.0, w, h - t, h),
                    wall_y(d, 0.0, w, h - t, h),
                ]
            }
        }
    }

    /// Whether local `(x, y)` lies under solid material (hidden desk).
    fn covers_xy(&self, x: f64, y: f64) -> bool {
        let [w, d, _] = self.size;
        let (x, y) = self.unmirror(x, y);
        if !(0.0..=w).contains(&x) || !(0.0..=d).contains(&y) {
            return false;
        }
        match self.kind {
            ShapeKind::Cuboid => true,
            ShapeKind::Cylinder => {
                let r = w.min(d) / 2.0;
                (x - w / 2.0).powi(2) + (y - d / 2.0).powi(2) <= r * r
            }
            ShapeKind::LShape => !(x > w * (1.0 - self.param) && y > d * (1.0 - self.param)),
            ShapeKind::Arch => x <= self.param || x >= w - self.param,
        }
    }

    fn unmirror(&self, x: f64, y: f64) -> (f64, f64) {
        let [w, d, _] = self.size;
        (
            if self.mirror[0] { w - x } else { x },
            if self.mirror[1] { d - y } else { y },
        )
    }

    fn sample_points(&self, count: usize, rng: &mut Rng) -> Vec<[f64; 3]> {
        let patches = self.patches();
        let areas: Vec<f64> = patches.iter().map(Patch::area).collect();
        let total: f64 = areas.iter().sum();
        let [w, d, _] = self.size;
        (0..count)
            .map(|_| {
                let mut pick = rng.random::<f64>() * total;
                let mut idx = patches.len() - 1;
                for (i, a) in areas.iter().enumerate() {
                    if pick < *a {
                        idx = i;
                        break;
                    }
                    pick -= a;
                }
                let mut p = patches[idx].sample(rng);
                if self.mirror[0] {
                    p[0] = w - p[0];
                }
                if self.mirror[1] {
                    p[1] = d - p[1];
                }
                p
            })
            .collect()
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

struct PlacedObject {
    shape: ShapeInstance,
    /// Local-to-world offset of the footprint's min corner.
    origin: [f64; 2],
    points: Vec<Point3>,
    colors: Vec<Point3>,
    bbox: BBox3D,
    voxels: HashSet<[i64; 3]>,
}

impl PlacedObject {
    fn covers_xy(&self, x: f64, y: f64) -> bool {
        self.shape.covers_xy(x - self.origin[0], y - self.origin[1])
    }
}

fn to_point(p: [f64; 3]) -> Point3 {
    [p[0] as f32, p[1] as f32, p[2] as f32]
}

fn clamp_color(c: [f64; 3]) -> Point3 {
    [c[0].clamp(0.0, 1.0) as f32, c[1].clamp(0.0, 1.0) as f32, c[2].clamp(0.0, 1.0) as f32]
}

struct ObjectDraft {
    shape: ShapeInstance,
    local: Vec<[f64; 3]>,
    colors: Vec<Point3>,
    category: i32,
}

fn draft_object(cfg: &WorldConfig, rng: &mut Rng) -> ObjectDraft {
    let category = rng.random_range(0..cfg.categories.len());
    let spec = &cfg.categories[category];
    let size: [f64; 3] = std::array::from_fn(|a| rng.random_range(spec.size_min[a]..=spec.size_max[a]));
    let param = match spec.shape {
        ShapeKind::LShape => rng.random_range(0.45..0.6),
        ShapeKind::Arch => 0.02f64.min(size[0] / 4.0),
        _ => 0.0,
    };
    let shape = ShapeInstance {
        kind: spec.shape,
        size,
        param,
        mirror: [rng.random(), rng.random()],
    };
    let count = rng.random_range(cfg.points_per_object[0]..=cfg.points_per_object[1]);
    let noise = Normal::new(0.0, cfg.noise_sigma.max(1e-12)).unwrap();
    let local = shape
        .sample_points(count, rng)
        .into_iter()
        .map(|p| std::array::from_fn(|a| p[a] + if cfg.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 }))
        .collect();
    let hue = spec.hue + rng.random_range(-0.04..0.04);
    let sat = rng.random_range(0.6..0.9);
    let val = rng.random_range(0.5..0.9);
    let base = hsv_to_rgb(hue, sat, val);
    let color_noise = Normal::new(0.0, 0.03).unwrap();
    let colors = (0..count)
        .map(|_| clamp_color(std::array::from_fn(|a| base[a] + color_noise.sample(rng))))
        .collect();
    ObjectDraft {
        shape,
        local,
        colors,
        category: category as i32,
    }
}

fn place(draft: &ObjectDraft, origin: [f64; 2], voxel: f64) -> PlacedObject {
    let points: Vec<Point3> = draft
        .local
        .iter()
        .map(|p| to_point([p[0] + origin[0], p[1] + origin[1], p[2]]))
        .collect();
    let bbox = BBox3D::tight(points.iter(), draft.category).expect("objects have points");
    let voxels = points.iter().map(|p| voxel_key(p, voxel)).collect();
    PlacedObject {
        shape: draft.shape.clone(),
        origin,
        points,
        colors: draft.colors.clone(),
        bbox,
        voxels,
    }
}

fn on_desk(obj: &PlacedObject, desk: [f64; 2]) -> bool {
    let (lo, hi) = (obj.bbox.min(), obj.bbox.max());
    lo[0] >= 0.0 && lo[1] >= 0.0 && hi[0] <= desk[0] && hi[1] <= desk[1]
}

fn collides(a: &PlacedObject, b: &PlacedObject) -> bool {
    a.voxels.iter().any(|v| b.voxels.contains(v))
}

fn try_isolated(draft: &ObjectDraft, placed: &[PlacedObject], cfg: &WorldConfig, rng: &mut Rng) -> Option<PlacedObject> {
    let [w, d, _] = draft.shape.size;
    for _ in 0..cfg.placement_retries {
        if w >= cfg.desk_size[0] || d >= cfg.desk_size[1] {
            return None;
        }
        let origin = [
            rng.random_range(0.02..(cfg.desk_size[0] - w - 0.02).max(0.021)),
            rng.random_range(0.02..(cfg.desk_size[1] - d - 0.02).max(0.021)),
        ];
        let obj = place(draft, origin, cfg.collision_voxel);
        if !on_desk(&obj, cfg.desk_size) {
            continue;
        }
        let clear = placed.iter().all(|o| {
            let mut grown = o.bbox;
            grown.dims = grown.dims.map(|v| v + 0.04);
            !grown.intersects(&obj.bbox)
        });
        if clear {
            return Some(obj);
        }
    }
    None
}

fn try_overlapping(
    draft: &ObjectDraft,
    target: usize,
    placed: &[PlacedObject],
    cfg: &WorldConfig,
    rng: &mut Rng,
) -> Option<PlacedObject> {
    let t = &placed[target];
    let [w, d, _] = draft.shape.size;
    let (tlo, thi) = (t.bbox.min(), t.bbox.max());
    for _ in 0..cfg.placement_retries {
        // Pick the draft's footprint min corner so the boxes overlap in XY.
        let ox = rng.random_range((tlo[0] - w + 0.005)..(thi[0] - 0.005));
        let oy = rng.random_range((tlo[1] - d + 0.005)..(thi[1] - 0.005));
        let obj = place(draft, [ox, oy], cfg.collision_voxel);
        if !on_desk(&obj, cfg.desk_size) || !obj.bbox.intersects(&t.bbox) {
            continue;
        }
        if placed.iter().any(|o| collides(o, &obj)) {
            continue;
        }
        let others_clear = placed
            .iter()
            .enumerate()
            .all(|(i, o)| i == target || !o.bbox.intersects(&obj.bbox));
        if others_clear {
            return Some(obj);
        }
    }
    None
}

fn generate_scene(cfg: &WorldConfig, index: usize) -> Result<Scene> {
    let mut rng = stream(cfg.seed, index as u64);
    let n_objects = rng.random_range(cfg.objects_per_scene[0]..=cfg.objects_per_scene[1]);
    let desired = (cfg.overlap_fraction * n_objects as f64).round() as usize;
    let mut placed: Vec<PlacedObject> = Vec::new();
    let mut overlapped: Vec<bool> = Vec::new();
    for _ in 0..n_objects {
        let draft = draft_object(cfg, &mut rng);
        let have = overlapped.iter().filter(|&&o| o).count();
        let mut result = None;
        if !placed.is_empty() && have < desired {
            let mut candidates: Vec<usize> = (0..placed.len()).filter(|&i| !overlapped[i]).collect();
            if candidates.is_empty() || have + 2 > desired + 1 {
                candidates = (0..placed.len()).collect();
            }
            let target = *candidates.choose(&mut rng).expect("non-empty");
            if let Some(obj) = try_overlapping(&draft, target, &placed, cfg, &mut rng) {
                overlapped[target] = true;
                result = Some((obj, true));
            }
        }
        if result.is_none() {
            let obj = try_isolated(&draft, &placed, cfg, &mut rng).ok_or_else(|| {
                Error::Placement(format!(
                    "scene {index}: no free desk area for a {:?} object after {} tries",
                    draft.shape.kind, cfg.placement_retries
                ))
            })?;
            result = Some((obj, false));
        }
        let (obj, ov) = result.expect("set above");
        placed.push(obj);
        overlapped.push(ov);
    }

    let mut positions = Vec::new();
    let mut colors = Vec::new();
    let mut gt = Vec::new();
    for (k, o) in placed.iter().enumerate() {
        positions.extend_from_slice(&o.points);
        colors.extend_from_slice(&o.colors);
        gt.extend(std::iter::repeat_n(k as i32, o.points.len()));
    }
    let area = cfg.desk_size[0] * cfg.desk_size[1];
    let n_floor = if cfg.floor_density > 0.0 {
        Poisson::new(cfg.floor_density * area).unwrap().sample(&mut rng) as usize
    } else {
        0
    };
    let z_noise = Normal::new(0.0, cfg.noise_sigma.max(1e-12)).unwrap();
    let desk_color = [0.55, 0.5, 0.45];
    let color_noise = Normal::new(0.0, 0.03).unwrap();
    for _ in 0..n_floor {
        let x = rng.random::<f64>() * cfg.desk_size[0];
        let y = rng.random::<f64>() * cfg.desk_size[1];
        let z = if cfg.noise_sigma > 0.0 { z_noise.sample(&mut rng) } else { 0.0 };
        let c = clamp_color(std::array::from_fn(|a| desk_color[a] + color_noise.sample(&mut rng)));
        if placed.iter().any(|o| o.covers_xy(x, y)) {
            continue;
        }
        positions.push(to_point([x, y, z]));
        colors.push(c);
        gt.push(-1);
    }
    let boxes = placed.iter().map(|o| o.bbox).collect();
    let superpoints = SuperpointPartition::from_voxel_grid(&positions, cfg.superpoint_voxel);
    Scene::new(
        format!("world{:016x}_{index:04}", cfg.seed),
        PointCloud::new(positions, colors)?,
        boxes,
        superpoints,
        Some(gt),
    )
}

/// Generates `cfg.num_scenes` scenes; scene `i` depends only on `(seed, i)`.
pub fn generate_world(cfg: &WorldConfig) -> Result<Vec<Scene>> {
    cfg.validate()?;
    (0..cfg.num_scenes).map(|i| generate_scene(cfg, i)).collect()
}

/// Share of boxes that intersect at least one other box in their scene.
pub fn achieved_overlap_fraction(scenes: &[Scene]) -> f64 {
    let mut total = 0usize;
    let mut hit = 0usize;
    for s in scenes {
        for (i, b) in s.boxes.iter().enumerate() {
            total += 1;
            if s.boxes.iter().enumerate().any(|(j, o)| i != j && b.intersects(o)) {
                hit += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> WorldConfig {
        WorldConfig {
            num_scenes: 4,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn seed_determinism() {
        assert_eq!(generate_world(&small(3)).unwrap(), generate_world(&small(3)).unwrap());
        assert_ne!(generate_world(&small(3)).unwrap(), generate_world(&small(4)).unwrap());
    }

    #[test]
    fn zero_overlap_has_no_intersecting_boxes() {
        let cfg = WorldConfig {
            overlap_fraction: 0.0,
            num_scenes: 6,
            ..small(1)
        };
        let world = generate_world(&cfg).unwrap();
        assert_eq!(achieved_overlap_fraction(&world), 0.0);
    }

    #[test]
    fn surface_patches_have_positive_area() {
        for kind in [ShapeKind::Cuboid, ShapeKind::Cylinder, ShapeKind::LShape, ShapeKind::Arch] {
            let s = ShapeInstance {
                kind,
                size: [0.2, 0.1, 0.1],
                param: if kind == ShapeKind::LShape { 0.5 } else { 0.02 },
                mirror: [false, false],
            };
            assert!(s.patches().iter().all(|p| p.area() > 0.0), "{kind:?}");
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = WorldConfig {
            overlap_fraction: 1.5,
            ..Default::default()
        };
        assert!(matches!(generate_world(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn hsv_primaries() {
        let r = hsv_to_rgb(0.0, 1.0, 1.0);
        assert!((r[0] - 1.0).abs() < 1e-12 && r[1].abs() < 1e-12);
    }
}
