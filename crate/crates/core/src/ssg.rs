//! Simulated sample generation: class-pair / distance statistics harvested
//! from real overlap samples, then physically plausible synthetic overlap
//! samples composed from isolated objects.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::seq::IndexedRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox3D, Point3};
use crate::overlap::{BankObject, ObjectBank, OverlapSample, RegionLabel, SampleOrigin, SampleRecord};
use crate::rng::{stream, Rng};
use crate::scene::{voxel_key, PointCloud, Scene, SuperpointPartition, DEFAULT_SUPERPOINT_VOXEL};

/// Bound on pair redraws when the drawn categories are missing from the bank.
pub const MAX_PAIR_REDRAWS: usize = 1000;
/// Bound on truncated-normal redraws for a single distance.
pub const MAX_DISTANCE_REDRAWS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairStat {
    pub n: usize,
    /// Mean center-to-center distance (m).
    pub mean: f64,
    /// Sample standard deviation (m); zero when `n <= 1`.
    pub std: f64,
}

/// Per unordered category pair statistics; keys are stored as `(min, max)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairStats {
    pairs: BTreeMap<(i32, i32), PairStat>,
}

#[derive(Serialize, Deserialize)]
struct PairStatEntry {
    a: i32,
    b: i32,
    #[serde(flatten)]
    stat: PairStat,
}

pub fn pair_key(a: i32, b: i32) -> (i32, i32) {
    (a.min(b), a.max(b))
}

impl PairStats {
    pub fn get(&self, a: i32, b: i32) -> Option<&PairStat> {
        self.pairs.get(&pair_key(a, b))
    }

    pub fn insert(&mut self, a: i32, b: i32, stat: PairStat) {
        self.pairs.insert(pair_key(a, b), stat);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(i32, i32), &PairStat)> {
        self.pairs.iter()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn to_json(&self) -> String {
        let entries: Vec<PairStatEntry> = self
            .pairs
            .iter()
            .map(|(&(a, b), &stat)| PairStatEntry { a, b, stat })
            .collect();
        serde_json::to_string_pretty(&entries).expect("plain data serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let entries: Vec<PairStatEntry> =
            serde_json::from_str(text).map_err(|e| Error::parse("pair stats", e.to_string()))?;
        let mut out = Self::default();
        for e in entries {
            if e.stat.std < 0.0 || (e.stat.n <= 1 && e.stat.std != 0.0) {
                return Err(Error::parse("std", format!("invalid std for pair ({}, {})", e.a, e.b)));
            }
            out.insert(e.a, e.b, e.stat);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Count, mean and sample std of box-center distances per category pair.
pub fn harvest_stats<'a>(items: impl IntoIterator<Item = (&'a OverlapSample, &'a Scene)>) -> PairStats {
    let mut dists: BTreeMap<(i32, i32), Vec<f64>> = BTreeMap::new();
    for (sample, scene) in items {
        let (a, b) = sample.box_pair;
        let (ba, bb) = (&scene.boxes[a], &scene.boxes[b]);
        dists
            .entry(pair_key(ba.category, bb.category))
            .or_default()
            .push(ba.center_distance(bb));
    }
    let mut stats = PairStats::default();
    for (key, d) in dists {
        let n = d.len();
        let mean = d.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        stats.pairs.insert(key, PairStat { n, mean, std });
    }
    stats
}

pub fn harvest_from_records(records: &[SampleRecord]) -> PairStats {
    harvest_stats(records.iter().map(|r| (&r.sample, &r.scene)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Distance draws per object pair before the pair is rejected.
    pub retry_limit: usize,
    /// Floor points per square meter.
    pub floor_point_rate: f64,
    pub floor_margin: f64,
    pub gravity_eps: f64,
    pub collision_voxel: f64,
    pub superpoint_voxel: f64,
    pub gravity: bool,
    pub collision: bool,
    pub background: bool,
    /// Object pairs tried per requested sample before giving up.
    pub max_pairs_per_sample: usize,
    pub rng_seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            retry_limit: 8,
            floor_point_rate: 400.0,
            floor_margin: 0.2,
            gravity_eps: 0.005,
            collision_voxel: 0.03,
            superpoint_voxel: DEFAULT_SUPERPOINT_VOXEL,
            gravity: true,
            collision: true,
            background: true,
            max_pairs_per_sample: 500,
            rng_seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.retry_limit == 0 {
            return Err(Error::Config("retry_limit must be at least 1".into()));
        }
        let distances = [self.floor_margin, self.gravity_eps, self.collision_voxel, self.superpoint_voxel];
        if distances.iter().any(|&d| !(d > 0.0)) || self.floor_point_rate < 0.0 {
            return Err(Error::Config("distances must be positive and the floor rate non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairDraw {
    /// Bank objects in random order; `categories` is the statistics key.
    pub a: usize,
    pub b: usize,
    pub categories: (i32, i32),
    pub distance: f64,
    pub stat: PairStat,
}

/// Truncated normal draw `d ~ N(mean, std) | d > 0`; `std = 0` returns `mean`.
pub fn sample_distance(stat: &PairStat, rng: &mut Rng) -> Result<f64> {
    if stat.std == 0.0 {
        return if stat.mean > 0.0 {
            Ok(stat.mean)
        } else {
            Err(Error::Exhausted(format!("degenerate distance distribution with mean {}", stat.mean)))
        };
    }
    let normal = Normal::new(stat.mean, stat.std).map_err(|e| Error::Config(e.to_string()))?;
    for _ in 0..MAX_DISTANCE_REDRAWS {
        let d = normal.sample(rng);
        if d > 0.0 {
            return Ok(d);
        }
    }
    Err(Error::Exhausted("no positive distance in truncated normal draws".into()))
}

/// Draws a category pair with probability proportional to `n`, one object
/// per category uniformly from the bank, and a target distance.
pub fn sample_pair(stats: &PairStats, by_category: &HashMap<i32, Vec<usize>>, rng: &mut Rng) -> Result<PairDraw> {
    let keys: Vec<(&(i32, i32), &PairStat)> = stats.pairs.iter().filter(|(_, s)| s.n > 0).collect();
    if keys.is_empty() {
        return Err(Error::Exhausted("pair statistics are empty".into()));
    }
    let available = |c: i32| by_category.get(&c).is_some_and(|v| !v.is_empty());
    if !keys.iter().any(|(&(a, b), _)| available(a) && available(b)) {
        return Err(Error::Exhausted("no category pair is present in the object bank".into()));
    }
    let weights = WeightedIndex::new(keys.iter().map(|(_, s)| s.n as f64)).expect("positive weights");
    for _ in 0..MAX_PAIR_REDRAWS {
        let (&(ca, cb), stat) = keys[weights.sample(rng)];
        if !(available(ca) && available(cb)) {
            continue;
        }
        let mut a = *by_category[&ca].choose(rng).expect("non-empty");
        let mut b = *by_category[&cb].choose(rng).expect("non-empty");
        if rng.random::<bool>() {
            std::mem::swap(&mut a, &mut b);
        }
        let distance = sample_distance(stat, rng)?;
        return Ok(PairDraw {
            a,
            b,
            categories: (ca, cb),
            distance,
            stat: *stat,
        });
    }
    Err(Error::Exhausted(format!("no satisfiable pair after {MAX_PAIR_REDRAWS} draws")))
}

/// Two objects being arranged, in `f64` world coordinates.
#[derive(Clone, Debug)]
pub struct SampleInProgress {
    pub a: Vec<[f64; 3]>,
    pub b: Vec<[f64; 3]>,
}

fn min_z(pts: &[[f64; 3]]) -> f64 {
    pts.iter().map(|p| p[2]).fold(f64::INFINITY, f64::min)
}

fn shift(pts: &mut [[f64; 3]], by: [f64; 3]) {
    for p in pts {
        for a in 0..3 {
            p[a] += by[a];
        }
    }
}

impl SampleInProgress {
    pub fn floor_z(&self) -> f64 {
        min_z(&self.a).min(min_z(&self.b))
    }
}

/// Drops each object onto the joint floor plane; returns the plane height.
pub fn apply_gravity(s: &mut SampleInProgress) -> f64 {
    let floor = s.floor_z();
    let da = floor - min_z(&s.a);
    let db = floor - min_z(&s.b);
    shift(&mut s.a, [0.0, 0.0, da]);
    shift(&mut s.b, [0.0, 0.0, db]);
    floor
}

fn voxels_f32(pts: &[Point3], edge: f64) -> HashSet<[i64; 3]> {
    pts.iter().map(|p| voxel_key(p, edge)).collect()
}

fn rounded(pts: &[[f64; 3]]) -> Vec<Point3> {
    pts.iter().map(|p| [p[0] as f32, p[1] as f32, p[2] as f32]).collect()
}

/// True when some voxel of edge `voxel` holds points of both objects.
pub fn resolve_collision(s: &SampleInProgress, voxel: f64) -> bool {
    co_occupied(&rounded(&s.a), &rounded(&s.b), voxel)
}

pub fn co_occupied(a: &[Point3], b: &[Point3], voxel: f64) -> bool {
    let va = voxels_f32(a, voxel);
    b.iter().any(|p| va.contains(&voxel_key(p, voxel)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RejectReason {
    Collision,
    EmptyOverlap,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub attempts: usize,
    pub collisions: usize,
    pub empty_overlaps: usize,
    pub last: RejectReason,
}

/// An accepted arrangement before background points are added.
#[derive(Clone, Debug)]
pub struct Arrangement {
    pub objects: SampleInProgress,
    pub attempts: usize,
    pub collisions: usize,
    pub empty_overlaps: usize,
}

fn centered(obj: &BankObject) -> Vec<[f64; 3]> {
    let c = obj.bbox.center;
    obj.positions
        .iter()
        .map(|p| std::array::from_fn(|a| p[a] as f64 - c[a] as f64))
        .collect()
}

/// Aligns both object centers, shifts `b` by `d` along a random horizontal
/// axis, then applies gravity and the collision check. Each failure draws a
/// fresh distance from `resample`; after `retry_limit` attempts the pair is
/// rejected.
pub fn arrange(
    a: &BankObject,
    b: &BankObject,
    d: f64,
    mut resample: impl FnMut(&mut Rng) -> Result<f64>,
    cfg: &SimConfig,
    rng: &mut Rng,
) -> Result<std::result::Result<Arrangement, Rejection>> {
    let base_a = centered(a);
    let base_b = centered(b);
    let mut d = d;
    let (mut collisions, mut empty) = (0, 0);
    let mut last = RejectReason::EmptyOverlap;
    for attempt in 1..=cfg.retry_limit {
        if attempt > 1 {
            d = resample(rng)?;
        }
        let axis = rng.random_range(0..4usize);
        let dir = match axis {
            0 => [d, 0.0, 0.0],
            1 => [-d, 0.0, 0.0],
            2 => [0.0, d, 0.0],
            _ => [0.0, -d, 0.0],
        };
        let mut s = SampleInProgress {
            a: base_a.clone(),
            b: base_b.clone(),
        };
        shift(&mut s.b, dir);
        if cfg.gravity {
            apply_gravity(&mut s);
        }
        if cfg.collision && resolve_collision(&s, cfg.collision_voxel) {
            collisions += 1;
            last = RejectReason::Collision;
            continue;
        }
        let (ra, rb) = (rounded(&s.a), rounded(&s.b));
        let box_a = BBox3D::tight(ra.iter(), 0).expect("non-empty");
        let box_b = BBox3D::tight(rb.iter(), 0).expect("non-empty");
        let overlap = ra.iter().chain(rb.iter()).any(|p| box_a.contains(p) && box_b.contains(p));
        if !overlap {
            empty += 1;
            last = RejectReason::EmptyOverlap;
            continue;
        }
        return Ok(Ok(Arrangement {
            objects: s,
            attempts: attempt,
            collisions,
            empty_overlaps: empty,
        }));
    }
    Ok(Err(Rejection {
        attempts: cfg.retry_limit,
        collisions,
        empty_overlaps: empty,
        last,
    }))
}

pub const FLOOR_COLOR: [f64; 3] = [0.55, 0.5, 0.45];

/// Uniform floor points on the joint floor plane over the union of both
/// objects' XY footprints dilated by `floor_margin`.
pub fn add_background(boxes: [&BBox3D; 2], floor_z: f64, cfg: &SimConfig, rng: &mut Rng) -> Vec<([f64; 3], Point3)> {
    if cfg.floor_point_rate <= 0.0 {
        return Vec::new();
    }
    let m = cfg.floor_margin;
    let rects: Vec<[f64; 4]> = boxes
        .iter()
        .map(|b| {
            let (lo, hi) = (b.min(), b.max());
            [lo[0] - m, lo[1] - m, hi[0] + m, hi[1] + m]
        })
        .collect();
    let lo = [rects[0][0].min(rects[1][0]), rects[0][1].min(rects[1][1])];
    let hi = [rects[0][2].max(rects[1][2]), rects[0][3].max(rects[1][3])];
    let area = (hi[0] - lo[0]) * (hi[1] - lo[1]);
    let count = Poisson::new(cfg.floor_point_rate * area).unwrap().sample(rng) as usize;
    let noise = Normal::new(0.0, 0.03).unwrap();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let x = lo[0] + rng.random::<f64>() * (hi[0] - lo[0]);
        let y = lo[1] + rng.random::<f64>() * (hi[1] - lo[1]);
        let color: [f64; 3] = std::array::from_fn(|a| FLOOR_COLOR[a] + noise.sample(rng));
        if rects.iter().any(|r| x >= r[0] && x <= r[2] && y >= r[1] && y <= r[3]) {
            out.push(([x, y, floor_z], color.map(|c| c.clamp(0.0, 1.0) as f32)));
        }
    }
    out
}

/// Full composition of one simulated sample from an accepted arrangement.
pub fn finish_sample(
    arrangement: &Arrangement,
    a: &BankObject,
    b: &BankObject,
    cfg: &SimConfig,
    id: String,
    source_pair: (usize, usize),
    rng: &mut Rng,
) -> Result<SampleRecord> {
    let s = &arrangement.objects;
    let (ra, rb) = (rounded(&s.a), rounded(&s.b));
    let box_a = BBox3D::tight(ra.iter(), a.category).expect("non-empty");
    let box_b = BBox3D::tight(rb.iter(), b.category).expect("non-empty");
    let floor = if cfg.background {
        add_background([&box_a, &box_b], s.floor_z(), cfg, rng)
    } else {
        Vec::new()
    };
    let mut positions: Vec<Point3> = ra;
    positions.extend_from_slice(&rb);
    let mut colors: Vec<Point3> = a.colors.clone();
    colors.extend_from_slice(&b.colors);
    let mut gt: Vec<i32> = vec![0; a.positions.len()];
    gt.extend(std::iter::repeat_n(1, b.positions.len()));
    for (p, c) in &floor {
        positions.push([p[0] as f32, p[1] as f32, p[2] as f32]);
        colors.push(*c);
        gt.push(-1);
    }
    let mut sample = OverlapSample {
        scene_id: id.clone(),
        box_pair: (0, 1),
        s1: Vec::new(),
        s2: Vec::new(),
        s3: Vec::new(),
        background: Vec::new(),
        gt_region3: None,
    };
    let mut gt3 = Vec::new();
    for (i, p) in positions.iter().enumerate() {
        let (in_a, in_b) = (box_a.contains(p), box_b.contains(p));
        if gt[i] < 0 {
            if in_a && in_b {
                sample.s3.push(i);
                gt3.push(RegionLabel::Background);
            } else {
                sample.background.push(i);
            }
            continue;
        }
        match (in_a, in_b) {
            (true, true) => {
                sample.s3.push(i);
                gt3.push(if gt[i] == 0 { RegionLabel::A } else { RegionLabel::B });
            }
            (true, false) => sample.s1.push(i),
            (false, true) => sample.s2.push(i),
            (false, false) => sample.background.push(i),
        }
    }
    sample.gt_region3 = Some(gt3);
    let superpoints = SuperpointPartition::from_voxel_grid(&positions, cfg.superpoint_voxel);
    let scene = Scene::new(id, PointCloud::new(positions, colors)?, vec![box_a, box_b], superpoints, Some(gt))?;
    Ok(SampleRecord {
        scene,
        sample,
        origin: SampleOrigin::Simulated,
        source_pair,
    })
}

/// Composes one simulated sample, or reports the rejection after
/// `retry_limit` distance draws.
pub fn compose_sample(
    a: &BankObject,
    b: &BankObject,
    d: f64,
    stat: &PairStat,
    cfg: &SimConfig,
    rng: &mut Rng,
    id: String,
    source_pair: (usize, usize),
) -> Result<std::result::Result<SampleRecord, Rejection>> {
    let arrangement = arrange(a, b, d, |r| sample_distance(stat, r), cfg, rng)?;
    match arrangement {
        Ok(arr) => Ok(Ok(finish_sample(&arr, a, b, cfg, id, source_pair, rng)?)),
        Err(rej) => Ok(Err(rej)),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SimManifest {
    pub requested: usize,
    pub accepted: usize,
    pub rejected_pairs: usize,
    pub distance_draws: usize,
    pub collision_retries: usize,
    pub empty_overlap_retries: usize,
    pub config: Option<SimConfig>,
}

/// Generates `count` samples; sample `i` uses its own stream `(seed, i)`.
pub fn generate_corpus(
    stats: &PairStats,
    bank: &ObjectBank,
    count: usize,
    cfg: &SimConfig,
) -> Result<(Vec<SampleRecord>, SimManifest)> {
    cfg.validate()?;
    let by_category = bank.by_category();
    let mut manifest = SimManifest {
        requested: count,
        config: Some(cfg.clone()),
        ..Default::default()
    };
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = stream(cfg.rng_seed, i as u64);
        let mut done = false;
        for _ in 0..cfg.max_pairs_per_sample {
            let draw = sample_pair(stats, &by_category, &mut rng)?;
            let (oa, ob) = (&bank.objects[draw.a], &bank.objects[draw.b]);
            let id = format!("sim{:016x}_{i:06}", cfg.rng_seed);
            match compose_sample(oa, ob, draw.distance, &draw.stat, cfg, &mut rng, id, (draw.a, draw.b))? {
                Ok(rec) => {
                    manifest.accepted += 1;
                    out.push(rec);
                    done = true;
                }
                Err(rej) => {
                    manifest.rejected_pairs += 1;
                    manifest.distance_draws += rej.attempts;
                    manifest.collision_retries += rej.collisions;
                    manifest.empty_overlap_retries += rej.empty_overlaps;
                }
            }
            if done {
                break;
            }
        }
        if !done {
            return Err(Error::Exhausted(format!(
                "sample {i}: every one of {} object pairs was rejected",
                cfg.max_pairs_per_sample
            )));
        }
    }
    Ok((out, manifest))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlausibilityReport {
    /// Largest gap between an object's lowest point and the floor plane.
    pub max_floor_gap: f64,
    pub floating_ok: bool,
    /// Voxels holding points of both objects at half the collision voxel.
    pub shared_voxels: usize,
    pub collision_ok: bool,
    pub s3_nonempty: bool,
    pub background_points: usize,
    pub background_ok: bool,
}

impl PlausibilityReport {
    pub fn passed(&self) -> bool {
        self.floating_ok && self.collision_ok && self.s3_nonempty && self.background_ok
    }
}

/// Re-checks a simulated sample from its ground truth alone.
pub fn verify_plausibility(rec: &SampleRecord, cfg: &SimConfig) -> PlausibilityReport {
    let gt = rec.scene.gt_instance.as_deref().unwrap_or(&[]);
    let pos = &rec.scene.cloud.positions;
    let pick = |k: i32| -> Vec<Point3> { pos.iter().zip(gt).filter(|(_, &g)| g == k).map(|(p, _)| *p).collect() };
    let (a, b) = (pick(0), pick(1));
    let low = |v: &[Point3]| v.iter().map(|p| p[2] as f64).fold(f64::INFINITY, f64::min);
    let floor = low(&a).min(low(&b));
    let max_floor_gap = (low(&a) - floor).max(low(&b) - floor);
    let fine = cfg.collision_voxel / 2.0;
    let va = voxels_f32(&a, fine);
    let vb = voxels_f32(&b, fine);
    let shared_voxels = va.intersection(&vb).count();
    let background_points = gt.iter().filter(|&&g| g < 0).count();
    PlausibilityReport {
        max_floor_gap,
        floating_ok: max_floor_gap < cfg.gravity_eps,
        shared_voxels,
        collision_ok: shared_voxels == 0,
        s3_nonempty: !rec.sample.s3.is_empty(),
        background_points,
        background_ok: !(cfg.background && cfg.floor_point_rate > 0.0) || background_points > 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox3D;

    fn cube_object(center: [f32; 3], side: f32, step: f32, category: i32) -> BankObject {
        let n = (side / step).round() as i32;
        let mut positions = Vec::new();
        for i in 0..=n {
            for j in 0..=n {
                for k in 0..=n {
                    let on_surface = [i, j, k].iter().any(|&v| v == 0 || v == n);
                    if on_surface {
                        positions.push([
                            center[0] - side / 2.0 + i as f32 * step,
                            center[1] - side / 2.0 + j as f32 * step,
                            center[2] - side / 2.0 + k as f32 * step,
                        ]);
                    }
                }
            }
        }
        let colors = vec![[0.5; 3]; positions.len()];
        let bbox = BBox3D::tight(positions.iter(), category).unwrap();
        BankObject {
            positions,
            colors,
            category,
            bbox,
        }
    }

    fn stat(n: usize, mean: f64, std: f64) -> PairStat {
        PairStat { n, mean, std }
    }

    #[test]
    fn single_pair_stats() {
        let mut s = PairStats::default();
        s.insert(2, 1, stat(1, 1.0, 0.0));
        assert_eq!(s.get(1, 2), s.get(2, 1));
        let back = PairStats::from_json(&s.to_json()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn json_rejects_std_for_single_sample() {
        let text = r#"[{"a":0,"b":1,"n":1,"mean":1.0,"std":0.5}]"#;
        assert!(PairStats::from_json(text).is_err());
    }

    #[test]
    fn zero_std_gives_exact_mean() {
        let mut rng = stream(1, 0);
        assert_eq!(sample_distance(&stat(3, 0.7, 0.0), &mut rng).unwrap(), 0.7);
    }

    #[test]
    fn truncated_draws_are_positive() {
        let mut rng = stream(1, 0);
        for _ in 0..500 {
            assert!(sample_distance(&stat(3, 0.01, 0.5), &mut rng).unwrap() > 0.0);
        }
    }

    #[test]
    fn single_pair_type_always_drawn() {
        let mut stats = PairStats::default();
        stats.insert(0, 1, stat(4, 0.5, 0.1));
        let by_cat = HashMap::from([(0, vec![0, 1]), (1, vec![2])]);
        let mut rng = stream(3, 0);
        for _ in 0..100 {
            let d = sample_pair(&stats, &by_cat, &mut rng).unwrap();
            assert_eq!(d.categories, (0, 1));
            assert!(d.a == 2 || d.b == 2);
        }
    }

    #[test]
    fn missing_categories_exhaust() {
        let mut stats = PairStats::default();
        stats.insert(0, 1, stat(4, 0.5, 0.1));
        let by_cat = HashMap::from([(0, vec![0])]);
        let mut rng = stream(3, 0);
        assert!(matches!(sample_pair(&stats, &by_cat, &mut rng), Err(Error::Exhausted(_))));
        assert!(matches!(
            sample_pair(&PairStats::default(), &by_cat, &mut rng),
            Err(Error::Exhausted(_))
        ));
    }

    #[test]
    fn gravity_drops_floating_object() {
        let mut s = SampleInProgress {
            a: vec![[0.0, 0.0, 0.0], [0.0, 0.0, 1.0]],
            b: vec![[1.0, 0.0, 0.5], [1.0, 0.0, 0.7]],
        };
        let floor = apply_gravity(&mut s);
        assert_eq!(floor, 0.0);
        assert_eq!(s.a[0][2], 0.0);
        assert_eq!(s.b[0][2], 0.0);
        assert!((s.b[1][2] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn collision_detection() {
        let a = vec![[0.0, 0.0, 0.0]];
        let far = SampleInProgress { a: a.clone(), b: vec![[0.1, 0.0, 0.0]] };
        let same = SampleInProgress { a: a.clone(), b: a };
        assert!(!resolve_collision(&far, 0.03));
        assert!(resolve_collision(&same, 0.03));
    }

    #[test]
    fn identical_cubes_fully_overlap_without_constraints() {
        let obj = cube_object([0.0; 3], 0.2, 0.05, 0);
        let cfg = SimConfig {
            gravity: false,
            collision: false,
            background: false,
            ..Default::default()
        };
        let mut rng = stream(0, 0);
        let st = stat(1, 0.0, 0.0);
        let rec = compose_sample(&obj, &obj, 0.0, &st, &cfg, &mut rng, "t".into(), (0, 0))
            .unwrap()
            .unwrap();
        assert!(rec.sample.s1.is_empty() && rec.sample.s2.is_empty());
        assert_eq!(rec.sample.s3.len(), 2 * obj.positions.len());
    }

    #[test]
    fn impossible_distance_rejected_after_retry_limit() {
        let obj = cube_object([0.0; 3], 0.2, 0.05, 0);
        let cfg = SimConfig::default();
        let st = stat(5, 5.0, 0.0);
        let mut rng = stream(0, 0);
        let mut draws = 0;
        let res = arrange(
            &obj,
            &obj,
            5.0,
            |r| {
                draws += 1;
                sample_distance(&st, r)
            },
            &cfg,
            &mut rng,
        )
        .unwrap();
        let rej = res.unwrap_err();
        assert_eq!(rej.attempts, 8);
        assert_eq!(rej.empty_overlaps, 8);
        assert_eq!(draws, 7, "first attempt uses the provided distance");
    }

    #[test]
    fn no_floor_points_at_zero_rate() {
        let cfg = SimConfig {
            floor_point_rate: 0.0,
            ..Default::default()
        };
        let b = BBox3D::new([0.0; 3], [1.0; 3], 0).unwrap();
        let mut rng = stream(0, 0);
        assert!(add_background([&b, &b], 0.0, &cfg, &mut rng).is_empty());
    }

    #[test]
    fn floor_points_lie_on_plane() {
        let cfg = SimConfig::default();
        let b = BBox3D::new([0.0, 0.0, 0.2], [0.5, 0.4, 0.4], 0).unwrap();
        let mut rng = stream(0, 0);
        let pts = add_background([&b, &b], 0.0, &cfg, &mut rng);
        assert!(!pts.is_empty());
        assert!(pts.iter().all(|(p, _)| p[2].abs() < cfg.gravity_eps));
    }

    #[test]
    fn hand_built_violations_are_reported() {
        let cfg = SimConfig::default();
        let obj = cube_object([0.0; 3], 0.2, 0.05, 0);
        let off = SimConfig {
            gravity: false,
            collision: false,
            background: false,
            ..Default::default()
        };
        let mut rng = stream(0, 0);
        let st = stat(1, 0.1, 0.0);
        // Same cube shifted along x and lifted: floating and interpenetrating.
        let mut lifted = obj.clone();
        for p in &mut lifted.positions {
            p[2] += 0.3;
        }
        lifted.bbox = BBox3D::tight(lifted.positions.iter(), 0).unwrap();
        let arr = Arrangement {
            objects: SampleInProgress {
                a: obj.positions.iter().map(|p| p.map(f64::from)).collect(),
                b: lifted.positions.iter().map(|p| p.map(|v| v as f64)).collect(),
            },
            attempts: 1,
            collisions: 0,
            empty_overlaps: 0,
        };
        let rec = finish_sample(&arr, &obj, &lifted, &off, "f".into(), (0, 0), &mut rng).unwrap();
        let rep = verify_plausibility(&rec, &cfg);
        assert!(!rep.floating_ok);
        let rec = compose_sample(&obj, &obj, 0.05, &st, &off, &mut rng, "c".into(), (0, 0))
            .unwrap()
            .unwrap();
        let rep = verify_plausibility(&rec, &cfg);
        assert!(!rep.collision_ok);
        assert!(rep.floating_ok);
    }
}
