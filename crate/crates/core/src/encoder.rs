//! Point and superpoint feature extraction.

use std::collections::HashMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::nn::{Bound, Linear, ParamId, ParamStore};
use crate::rng::Rng;
use crate::{Error, Result};

pub const INPUT_DIM: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderPreset {
    Toy,
    Paper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub preset: EncoderPreset,
    pub channels: usize,
    /// Cell edge of the toy preset's neighborhood context.
    pub context_voxel: f64,
    /// Finest voxel edge of the paper preset.
    pub voxel: f64,
    pub levels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            preset: EncoderPreset::Toy,
            channels: 32,
            context_voxel: 0.1,
            voxel: 0.02,
            levels: 3,
        }
    }
}

impl EncoderConfig {
    pub fn paper() -> Self {
        Self {
            preset: EncoderPreset::Paper,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config("encoder channels must be positive".into()));
        }
        if !(self.context_voxel > 0.0 && self.voxel > 0.0) {
            return Err(Error::Config("encoder voxel sizes must be positive".into()));
        }
        if self.levels == 0 {
            return Err(Error::Config("encoder needs at least one level".into()));
        }
        Ok(())
    }
}

/// Rows of the superpoint feature matrix owned by each region.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RegionSplit {
    pub s1: Vec<usize>,
    pub s2: Vec<usize>,
    pub s3: Vec<usize>,
}

/// Per-point encoder input: centered coordinates and colors.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderInput {
    pub features: Array2<f64>,
    pub superpoint: Vec<usize>,
    pub num_superpoints: usize,
}

impl EncoderInput {
    pub fn new(positions: &[[f64; 3]], colors: &[[f64; 3]], superpoint: Vec<usize>) -> Result<Self> {
        let n = positions.len();
        if n == 0 {
            return Err(Error::Validation("encoder input has no points".into()));
        }
        if colors.len() != n || superpoint.len() != n {
            return Err(Error::Validation(format!(
                "encoder input lengths differ: {n} positions, {} colors, {} superpoint ids",
                colors.len(),
                superpoint.len()
            )));
        }
        let num_superpoints = superpoint.iter().max().map_or(0, |m| m + 1);
        let mut seen = vec![false; num_superpoints];
        for &s in &superpoint {
            seen[s] = true;
        }
        if let Some(empty) = seen.iter().position(|s| !s) {
            return Err(Error::Validation(format!("superpoint {empty} has no member points")));
        }
        let mut centroid = [0.0f64; 3];
        for p in positions {
            for k in 0..3 {
                centroid[k] += p[k];
            }
        }
        for c in &mut centroid {
            *c /= n as f64;
        }
        let features = Array2::from_shape_fn((n, INPUT_DIM), |(i, j)| {
            if j < 3 {
                positions[i][j] - centroid[j]
            } else {
                colors[i][j - 3]
            }
        });
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("encoder input is not finite".into()));
        }
        Ok(Self {
            features,
            superpoint,
            num_superpoints,
        })
    }

    pub fn num_points(&self) -> usize {
        self.features.nrows()
    }

    fn coords(&self) -> Vec<[f64; 3]> {
        self.features
            .rows()
            .into_iter()
            .map(|r| [r[0], r[1], r[2]])
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub point_features: Array2<f64>,
    pub superpoint_features: Array2<f64>,
    pub region_split: RegionSplit,
}

/// Dense ids of the cells of edge `edge` containing each point, in order of
/// first appearance.
fn cell_ids(coords: &[[f64; 3]], edge: f64) -> (Vec<usize>, Vec<[i64; 3]>) {
    let mut map = HashMap::new();
    let mut keys = Vec::new();
    let ids = coords
        .iter()
        .map(|p| {
            let key = [0, 1, 2].map(|k| (p[k] / edge).floor() as i64);
            *map.entry(key).or_insert_with(|| {
                keys.push(key);
                keys.len() - 1
            })
        })
        .collect();
    (ids, keys)
}

#[derive(Clone, Debug)]
struct ToyEncoder {
    embed: Linear,
    mix: Linear,
    out: Linear,
}

/// One resolution of the sparse voxel hierarchy.
struct VoxelLevel {
    count: usize,
    /// For each of the 27 offsets, the neighbor voxel of every voxel.
    neighbors: Vec<Vec<Option<usize>>>,
    /// Parent voxel at the next coarser level.
    parent: Vec<usize>,
    keys: Vec<[i64; 3]>,
}

fn neighbor_table(keys: &[[i64; 3]]) -> Vec<Vec<Option<usize>>> {
    let index: HashMap<[i64; 3], usize> = keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
    let mut table = Vec::with_capacity(27);
    for dx in -1..=1 {
        for dy in -1..=1 {
            for dz in -1..=1 {
                table.push(
                    keys.iter()
                        .map(|k| index.get(&[k[0] + dx, k[1] + dy, k[2] + dz]).copied())
                        .collect(),
                );
            }
        }
    }
    table
}

fn build_hierarchy(coords: &[[f64; 3]], voxel: f64, levels: usize) -> (Vec<usize>, Vec<VoxelLevel>) {
    let (point_to_voxel, keys) = cell_ids(coords, voxel);
    let mut out: Vec<VoxelLevel> = Vec::with_capacity(levels);
    let mut keys = keys;
    for l in 0..levels {
        let neighbors = neighbor_table(&keys);
        let mut parent = Vec::new();
        let mut next_keys = Vec::new();
        if l + 1 < levels {
            let mut map = HashMap::new();
            for k in &keys {
                let pk = k.map(|c| c.div_euclid(2));
                let id = *map.entry(pk).or_insert_with(|| {
                    next_keys.push(pk);
                    next_keys.len() - 1
                });
                parent.push(id);
            }
        }
        out.push(VoxelLevel {
            count: keys.len(),
            neighbors,
            parent,
            keys: std::mem::take(&mut keys),
        });
        keys = next_keys;
    }
    (point_to_voxel, out)
}

/// Submanifold sparse convolution over the 27-neighborhood.
#[derive(Clone, Copy, Debug)]
struct SparseConv {
    w: ParamId,
    b: ParamId,
}

impl SparseConv {
    fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let lin = Linear::new(store, name, 27 * fan_in, fan_out, rng);
        Self { w: lin.w, b: lin.b }
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, level: &VoxelLevel) -> Var {
        let gathered: Vec<Var> = level.neighbors.iter().map(|n| tape.rows_opt(x, n)).collect();
        let stacked = tape.concat_cols(&gathered);
        let y = tape.matmul(stacked, p.var(self.w));
        tape.add_row(y, p.var(self.b))
    }
}

#[derive(Clone, Debug)]
struct UNetEncoder {
    stem: SparseConv,
    down: Vec<SparseConv>,
    up: Vec<Linear>,
    out: Linear,
}

#[derive(Clone, Debug)]
enum Backbone {
    Toy(ToyEncoder),
    Paper(UNetEncoder),
}

/// Feature extractor registered under the `encoder.` parameter prefix.
#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
    backbone: Backbone,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let backbone = match cfg.preset {
            EncoderPreset::Toy => Backbone::Toy(ToyEncoder {
                embed: Linear::new(store, "encoder.embed", INPUT_DIM, c, rng),
                mix: Linear::new(store, "encoder.mix", 3 * c, c, rng),
                out: Linear::new(store, "encoder.out", c, c, rng),
            }),
            EncoderPreset::Paper => {
                let stem = SparseConv::new(store, "encoder.stem", INPUT_DIM, c, rng);
                let down = (0..cfg.levels)
                    .map(|l| SparseConv::new(store, &format!("encoder.block{l}"), c, c, rng))
                    .collect();
                let up = (0..cfg.levels - 1)
                    .map(|l| Linear::new(store, &format!("encoder.up{l}"), 2 * c, c, rng))
                    .collect();
                let out = Linear::new(store, "encoder.out", c, c, rng);
                Backbone::Paper(UNetEncoder { stem, down, up, out })
            }
        };
        Ok(Self {
            cfg: cfg.clone(),
            backbone,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Returns `(F, F_sup)` as tape variables.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, input: &EncoderInput) -> (Var, Var) {
        let x = tape.constant(input.features.clone());
        let f = match &self.backbone {
            Backbone::Toy(t) => {
                let (cells, keys) = cell_ids(&input.coords(), self.cfg.context_voxel);
                let h = t.embed.forward(tape, p, x);
                let h = tape.relu(h);
                let sp = tape.segment_mean(h, &input.superpoint, input.num_superpoints);
                let sp = tape.rows(sp, &input.superpoint);
                let cell = tape.segment_mean(h, &cells, keys.len());
                let cell = tape.rows(cell, &cells);
                let cat = tape.concat_cols(&[h, sp, cell]);
                let h2 = t.mix.forward(tape, p, cat);
                let h2 = tape.relu(h2);
                t.out.forward(tape, p, h2)
            }
            Backbone::Paper(u) => {
                let (p2v, levels) = build_hierarchy(&input.coords(), self.cfg.voxel, self.cfg.levels);
                let v0 = tape.segment_mean(x, &p2v, levels[0].count);
                let s = u.stem.forward(tape, p, v0, &levels[0]);
                let mut h = tape.relu(s);
                let mut skips = Vec::with_capacity(levels.len());
                for (l, level) in levels.iter().enumerate() {
                    if l > 0 {
                        let prev = &levels[l - 1];
                        h = tape.segment_mean(h, &prev.parent, level.count);
                    }
                    let y = u.down[l].forward(tape, p, h, level);
                    h = tape.relu(y);
                    skips.push(h);
                }
                for l in (0..levels.len() - 1).rev() {
                    let up = tape.rows(h, &levels[l].parent);
                    let cat = tape.concat_cols(&[skips[l], up]);
                    let y = u.up[l].forward(tape, p, cat);
                    h = tape.relu(y);
                }
                let per_point = tape.rows(h, &p2v);
                u.out.forward(tape, p, per_point)
            }
        };
        let f_sup = tape.segment_mean(f, &input.superpoint, input.num_superpoints);
        (f, f_sup)
    }

    pub fn encode(&self, store: &ParamStore, input: &EncoderInput, region_split: RegionSplit) -> FeatureSet {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let (f, f_sup) = self.forward(&mut tape, &p, input);
        FeatureSet {
            point_features: tape.value(f).clone(),
            superpoint_features: tape.value(f_sup).clone(),
            region_split,
        }
    }
}

#[doc(hidden)]
pub fn voxel_keys(coords: &[[f64; 3]], voxel: f64, levels: usize) -> Vec<Vec<[i64; 3]>> {
    build_hierarchy(coords, voxel, levels).1.into_iter().map(|l| l.keys).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn random_input(n: usize, sps: usize, rng: &mut Rng) -> EncoderInput {
        let pos: Vec<[f64; 3]> = (0..n)
            .map(|_| [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(0.0..0.3)])
            .collect();
        let col: Vec<[f64; 3]> = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let sp: Vec<usize> = (0..n).map(|i| i % sps).collect();
        EncoderInput::new(&pos, &col, sp).unwrap()
    }

    #[test]
    fn pooling_is_average() {
        for cfg in [EncoderConfig::default(), EncoderConfig::paper()] {
            let mut rng = crate::rng::stream(3, 0);
            let mut store = ParamStore::new();
            let enc = Encoder::new(&mut store, &cfg, &mut rng).unwrap();
            let input = random_input(40, 7, &mut rng);
            let fs = enc.encode(&store, &input, RegionSplit::default());
            assert_eq!(fs.point_features.ncols(), 32);
            for s in 0..7 {
                let members: Vec<usize> = (0..40).filter(|i| i % 7 == s).collect();
                for c in 0..32 {
                    let mean = members.iter().map(|&i| fs.point_features[[i, c]]).sum::<f64>() / members.len() as f64;
                    assert!((mean - fs.superpoint_features[[s, c]]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn translation_does_not_change_features() {
        let mut rng = crate::rng::stream(4, 0);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, &EncoderConfig::default(), &mut rng).unwrap();
        let pos: Vec<[f64; 3]> = (0..20).map(|i| [i as f64 * 0.013, 0.02 * (i % 3) as f64, 0.01]).collect();
        let col = vec![[0.5, 0.2, 0.1]; 20];
        let sp: Vec<usize> = (0..20).map(|i| i / 5).collect();
        let a = EncoderInput::new(&pos, &col, sp.clone()).unwrap();
        let moved: Vec<[f64; 3]> = pos.iter().map(|p| [p[0] + 0.5, p[1] - 0.25, p[2] + 1.0]).collect();
        let b = EncoderInput::new(&moved, &col, sp).unwrap();
        let fa = enc.encode(&store, &a, RegionSplit::default());
        let fb = enc.encode(&store, &b, RegionSplit::default());
        let diff = (&fa.point_features - &fb.point_features).mapv(f64::abs).fold(0.0f64, |m, &x| m.max(x));
        assert!(diff < 1e-9, "{diff}");
    }

    #[test]
    fn empty_superpoint_is_rejected() {
        let r = EncoderInput::new(&[[0.0; 3], [1.0; 3]], &[[0.0; 3], [0.0; 3]], vec![0, 2]);
        assert!(matches!(r, Err(Error::Validation(_))));
    }

    #[test]
    fn hierarchy_coarsens() {
        let coords: Vec<[f64; 3]> = (0..50).map(|i| [i as f64 * 0.01, 0.0, 0.0]).collect();
        let keys = voxel_keys(&coords, 0.02, 3);
        assert_eq!(keys[0].len(), 25);
        assert_eq!(keys[1].len(), 13);
        assert_eq!(keys[2].len(), 7);
    }
}
