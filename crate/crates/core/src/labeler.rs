//! The pseudo-labeler: encoder + decoder, sample preparation, prediction and
//! checkpoints.

use std::collections::HashMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tape;
use crate::container::{ArrayReader, ArrayWriter};
use crate::decoder::{output_from, resolve_label, DecoderConfig, DecoderOutput, DecoderVars, LgaDecoder};
use crate::encoder::{Encoder, EncoderConfig, EncoderInput, RegionSplit};
use crate::nn::{sigmoid, Adam, Bound, ParamStore};
use crate::overlap::{RegionLabel, SampleRecord};
use crate::{Error, Result};

pub const CHECKPOINT_KIND: &str = "saformer-checkpoint";

/// A sample prepared for the labeler: only the points of S1, S2 and S3, with
/// superpoints split by region and numbered S1 first, then S2, then S3.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelerSample {
    pub id: String,
    pub input: EncoderInput,
    pub split: RegionSplit,
    /// Column of each S3 point (in `sample.s3` order) among the S3 superpoints.
    pub s3_point_superpoint: Vec<usize>,
    /// Category of box a and box b.
    pub categories: [i32; 2],
    /// Majority ground-truth label of every superpoint, when known.
    pub superpoint_gt: Option<Vec<RegionLabel>>,
    /// Ground truth of each S3 point, when known.
    pub s3_gt: Option<Vec<RegionLabel>>,
}

impl LabelerSample {
    pub fn from_record(rec: &SampleRecord) -> Result<Self> {
        let sample = &rec.sample;
        let scene = &rec.scene;
        if scene.boxes.len() < 2 || sample.box_pair != (0, 1) {
            return Err(Error::Mismatch(format!("record `{}` is not a two-box crop", scene.id)));
        }
        let point_gt: Option<Vec<RegionLabel>> = match (&scene.gt_instance, &sample.gt_region3) {
            (Some(gt), _) => Some(gt.iter().map(|&g| RegionLabel::from_instance(g, 0, 1)).collect()),
            (None, Some(g3)) => {
                let mut v = vec![RegionLabel::Background; scene.num_points()];
                sample.s1.iter().for_each(|&i| v[i] = RegionLabel::A);
                sample.s2.iter().for_each(|&i| v[i] = RegionLabel::B);
                sample.s3.iter().zip(g3).for_each(|(&i, &l)| v[i] = l);
                Some(v)
            }
            (None, None) => None,
        };
        let assignment = scene.superpoints.assignment();
        let mut positions = Vec::new();
        let mut colors = Vec::new();
        let mut sp_of_point = Vec::new();
        let mut ids: HashMap<(u32, usize), usize> = HashMap::new();
        let mut votes: Vec<[usize; 3]> = Vec::new();
        let mut split = RegionSplit::default();
        let mut s3_point_superpoint = Vec::with_capacity(sample.s3.len());
        for (r, region) in [&sample.s1, &sample.s2, &sample.s3].into_iter().enumerate() {
            for &i in region {
                let next = ids.len();
                let id = *ids.entry((assignment[i], r)).or_insert(next);
                if id == next {
                    votes.push([0; 3]);
                    match r {
                        0 => split.s1.push(id),
                        1 => split.s2.push(id),
                        _ => split.s3.push(id),
                    }
                }
                if r == 2 {
                    s3_point_superpoint.push(id - split.s1.len() - split.s2.len());
                }
                if let Some(gt) = &point_gt {
                    votes[id][gt[i].code() as usize] += 1;
                }
                positions.push(scene.cloud.positions[i].map(f64::from));
                colors.push(scene.cloud.colors[i].map(f64::from));
                sp_of_point.push(id);
            }
        }
        let input = EncoderInput::new(&positions, &colors, sp_of_point)?;
        let superpoint_gt = point_gt.as_ref().map(|_| votes.iter().map(|v| majority(*v)).collect());
        let s3_gt = point_gt.map(|gt| sample.s3.iter().map(|&i| gt[i]).collect());
        Ok(Self {
            id: scene.id.clone(),
            input,
            split,
            s3_point_superpoint,
            categories: [scene.boxes[0].category, scene.boxes[1].category],
            superpoint_gt,
            s3_gt,
        })
    }

    pub fn num_superpoints(&self) -> usize {
        self.input.num_superpoints
    }

    /// Instance targets over all superpoints from the ground truth.
    pub fn mask_targets(&self) -> Option<Array2<f64>> {
        let gt = self.superpoint_gt.as_ref()?;
        Some(Array2::from_shape_fn((2, gt.len()), |(i, j)| {
            let want = if i == 0 { RegionLabel::A } else { RegionLabel::B };
            if gt[j] == want {
                1.0
            } else {
                0.0
            }
        }))
    }

    pub fn class_targets(&self, num_categories: usize) -> Result<[usize; 2]> {
        let conv = |c: i32| {
            usize::try_from(c)
                .ok()
                .filter(|&c| c < num_categories)
                .ok_or_else(|| Error::Validation(format!("category {c} outside [0, {num_categories})")))
        };
        Ok([conv(self.categories[0])?, conv(self.categories[1])?])
    }
}

/// Most frequent label; ties prefer A, then B.
fn majority(votes: [usize; 3]) -> RegionLabel {
    let mut best = 0;
    for k in 1..3 {
        if votes[k] > votes[best] {
            best = k;
        }
    }
    RegionLabel::from_code(best as i32).expect("valid code")
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelerConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub init_seed: u64,
}

impl LabelerConfig {
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 over every parameter's name, shape and value bits.
pub fn param_hash(params: &ParamStore) -> String {
    let mut h = Sha256::new();
    for (name, v) in params.names().iter().zip(params.values()) {
        h.update(name.as_bytes());
        h.update((v.nrows() as u64).to_le_bytes());
        h.update((v.ncols() as u64).to_le_bytes());
        for x in v.iter() {
            h.update(x.to_bits().to_le_bytes());
        }
    }
    hex(&h.finalize())
}

/// Network architecture; parameter values live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Labeler {
    pub cfg: LabelerConfig,
    pub encoder: Encoder,
    pub decoder: LgaDecoder,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub output: DecoderOutput,
    /// Decision of each S3 superpoint.
    pub superpoint_labels: Vec<RegionLabel>,
    /// Decision of each S3 point, in `sample.s3` order.
    pub point_labels: Vec<RegionLabel>,
    /// Sigmoid confidences of each S3 point for instances a and b.
    pub point_confidence: Array2<f64>,
}

impl Labeler {
    /// Builds the architecture and freshly initialized parameters.
    pub fn new(cfg: &LabelerConfig) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let mut rng = crate::rng::stream(crate::rng::derive_seed(cfg.init_seed, "labeler-init"), 0);
        if cfg.decoder.channels != cfg.encoder.channels {
            return Err(Error::Config(format!(
                "encoder has {} channels but decoder expects {}",
                cfg.encoder.channels, cfg.decoder.channels
            )));
        }
        let encoder = Encoder::new(&mut store, &cfg.encoder, &mut rng)?;
        let decoder = LgaDecoder::new(&mut store, &cfg.decoder, &mut rng)?;
        Ok((
            Self {
                cfg: cfg.clone(),
                encoder,
                decoder,
            },
            store,
        ))
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, sample: &LabelerSample) -> DecoderVars {
        let (_, f_sup) = self.encoder.forward(tape, p, &sample.input);
        self.decoder.forward(tape, p, f_sup, &sample.split)
    }

    /// Mask logits over all superpoints and class logits, without gradients.
    pub fn logits(&self, params: &ParamStore, sample: &LabelerSample) -> (Array2<f64>, Array2<f64>) {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape);
        let vars = self.forward(&mut tape, &p, sample);
        (tape.value(vars.mask_logits).clone(), tape.value(vars.class_logits).clone())
    }

    pub fn predict(&self, params: &ParamStore, sample: &LabelerSample) -> Prediction {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape);
        let vars = self.forward(&mut tape, &p, sample);
        let output = output_from(&tape, &vars, &sample.split);
        let superpoint_labels: Vec<RegionLabel> = output
            .mask_logits
            .columns()
            .into_iter()
            .map(|c| resolve_label(c[0], c[1]))
            .collect();
        let point_labels = sample.s3_point_superpoint.iter().map(|&c| superpoint_labels[c]).collect();
        let point_confidence = Array2::from_shape_fn((2, sample.s3_point_superpoint.len()), |(i, j)| {
            sigmoid(output.mask_logits[[i, sample.s3_point_superpoint[j]]])
        });
        Prediction {
            output,
            superpoint_labels,
            point_labels,
            point_confidence,
        }
    }
}

/// Everything needed to resume or deploy a labeler.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: LabelerConfig,
    pub params: ParamStore,
    pub optimizer: Adam,
    pub step: u64,
    pub phase: String,
    pub rng_seed: u64,
    pub rng_index: u64,
}

impl Checkpoint {
    pub fn fresh(config: &LabelerConfig) -> Result<(Labeler, Self)> {
        let (labeler, params) = Labeler::new(config)?;
        let optimizer = Adam::new(&params);
        Ok((
            labeler,
            Self {
                config: config.clone(),
                params,
                optimizer,
                step: 0,
                phase: "init".into(),
                rng_seed: 0,
                rng_index: 0,
            },
        ))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = ArrayWriter::new(CHECKPOINT_KIND);
        let config = serde_json::to_string(&self.config).map_err(|e| Error::parse("config", e.to_string()))?;
        w.meta("config", config)
            .meta("config_hash", self.config.hash())
            .meta("step", self.step.to_string())
            .meta("phase", self.phase.clone())
            .meta("rng_seed", self.rng_seed.to_string())
            .meta("rng_index", self.rng_index.to_string())
            .meta("optimizer_step", self.optimizer.step.to_string());
        for (i, (name, v)) in self.params.names().iter().zip(self.params.values()).enumerate() {
            let shape = vec![v.nrows(), v.ncols()];
            w.f64s(name, shape.clone(), v.iter().copied());
            w.f64s(&format!("optimizer.m.{name}"), shape.clone(), self.optimizer.m[i].iter().copied());
            w.f64s(&format!("optimizer.v.{name}"), shape, self.optimizer.v[i].iter().copied());
        }
        w.write(path)
    }

    pub fn load(path: &Path) -> Result<(Labeler, Self)> {
        let r = ArrayReader::open(path, CHECKPOINT_KIND)?;
        let config: LabelerConfig =
            serde_json::from_str(r.meta("config")?).map_err(|e| Error::parse("config", e.to_string()))?;
        if r.meta("config_hash")? != config.hash() {
            return Err(Error::parse("config_hash", "does not match the stored config"));
        }
        let num = |key: &str| -> Result<u64> {
            r.meta(key)?.parse().map_err(|e: std::num::ParseIntError| Error::parse(key, e.to_string()))
        };
        let (labeler, mut params) = Labeler::new(&config)?;
        let mut optimizer = Adam::new(&params);
        optimizer.step = num("optimizer_step")?;
        let names = params.names().to_vec();
        for (i, name) in names.iter().enumerate() {
            let dim = params.values()[i].dim();
            let read = |n: &str| -> Result<Array2<f64>> {
                let (shape, data) = r.f64s(n)?;
                if shape != [dim.0, dim.1] {
                    return Err(Error::Shape(format!("{n}: stored {shape:?}, expected [{}, {}]", dim.0, dim.1)));
                }
                Array2::from_shape_vec(dim, data).map_err(|e| Error::Shape(format!("{n}: {e}")))
            };
            params.values_mut()[i] = read(name)?;
            optimizer.m[i] = read(&format!("optimizer.m.{name}"))?;
            optimizer.v[i] = read(&format!("optimizer.v.{name}"))?;
        }
        if !params.all_finite() {
            return Err(Error::Validation("checkpoint parameters are not finite".into()));
        }
        Ok((
            labeler,
            Self {
                config,
                params,
                optimizer,
                step: num("step")?,
                phase: r.meta("phase")?.to_string(),
                rng_seed: num("rng_seed")?,
                rng_index: num("rng_index")?,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn majority_tie_order() {
        assert_eq!(majority([1, 1, 1]), RegionLabel::A);
        assert_eq!(majority([0, 2, 2]), RegionLabel::B);
        assert_eq!(majority([0, 1, 2]), RegionLabel::Background);
    }

    #[test]
    fn checkpoint_round_trip() {
        let (_, mut ck) = Checkpoint::fresh(&LabelerConfig::default()).unwrap();
        ck.step = 17;
        ck.optimizer.m[0][[0, 0]] = 0.25;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.safetensors");
        ck.save(&path).unwrap();
        let (_, back) = Checkpoint::load(&path).unwrap();
        assert_eq!(back.params, ck.params);
        assert_eq!(back.optimizer, ck.optimizer);
        assert_eq!(back.step, 17);
        assert_eq!(param_hash(&back.params), param_hash(&ck.params));
    }
}
