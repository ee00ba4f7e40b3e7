//! Pseudo-label quality metric, baselines, scene-level label fusion and the
//! benchmark table.

use std::collections::HashMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::labeler::{Labeler, LabelerSample};
use crate::nn::ParamStore;
use crate::overlap::{smaller_box_assign, OverlapSample, RegionLabel, SampleRecord};
use crate::scene::{PseudoLabelSet, Scene};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MAccReport {
    /// Accuracy of every sample; `None` for samples with nothing to score.
    pub per_sample: Vec<Option<f64>>,
    pub macc: f64,
    pub scored: usize,
    pub excluded: usize,
}

/// Unweighted mean over samples of per-point accuracy. In binary mode only
/// points whose ground truth is A or B are scored.
pub fn compute_macc(predictions: &[Vec<RegionLabel>], gt: &[Vec<RegionLabel>], binary: bool) -> Result<MAccReport> {
    if predictions.len() != gt.len() {
        return Err(Error::Mismatch(format!(
            "{} predicted samples vs {} ground-truth samples",
            predictions.len(),
            gt.len()
        )));
    }
    let mut per_sample = Vec::with_capacity(gt.len());
    for (i, (p, g)) in predictions.iter().zip(gt).enumerate() {
        if p.len() != g.len() {
            return Err(Error::Mismatch(format!("sample {i}: {} predictions vs {} labels", p.len(), g.len())));
        }
        let mut total = 0usize;
        let mut correct = 0usize;
        for (a, b) in p.iter().zip(g) {
            if binary && *b == RegionLabel::Background {
                continue;
            }
            total += 1;
            if a == b {
                correct += 1;
            }
        }
        if total == 0 {
            log::warn!("sample {i} has no scorable overlap points; excluded from mAcc");
            per_sample.push(None);
        } else {
            per_sample.push(Some(correct as f64 / total as f64));
        }
    }
    let scored: Vec<f64> = per_sample.iter().flatten().copied().collect();
    let macc = if scored.is_empty() {
        0.0
    } else {
        scored.iter().sum::<f64>() / scored.len() as f64
    };
    Ok(MAccReport {
        scored: scored.len(),
        excluded: per_sample.len() - scored.len(),
        per_sample,
        macc,
    })
}

/// A way of labeling the overlap points of a sample.
pub trait LabelMethod {
    fn name(&self) -> String;
    fn predict(&self, record: &SampleRecord) -> Result<Vec<RegionLabel>>;
}

/// Every overlap point goes to the smaller box.
pub struct SmallerBox;

impl LabelMethod for SmallerBox {
    fn name(&self) -> String {
        "smaller-box".into()
    }

    fn predict(&self, record: &SampleRecord) -> Result<Vec<RegionLabel>> {
        Ok(smaller_box_assign(&record.sample, &record.scene))
    }
}

/// One fixed label for every overlap point.
pub struct MajorityClass {
    pub label: RegionLabel,
}

impl MajorityClass {
    /// Most frequent overlap label of a labeled corpus; ties prefer A, then B.
    pub fn fit(corpus: &[SampleRecord]) -> Self {
        let mut counts = [0usize; 3];
        for r in corpus {
            for l in r.sample.gt_region3.iter().flatten() {
                counts[l.code() as usize] += 1;
            }
        }
        let mut best = 0;
        for k in 1..3 {
            if counts[k] > counts[best] {
                best = k;
            }
        }
        Self {
            label: RegionLabel::from_code(best as i32).expect("valid code"),
        }
    }
}

impl LabelMethod for MajorityClass {
    fn name(&self) -> String {
        "majority-class".into()
    }

    fn predict(&self, record: &SampleRecord) -> Result<Vec<RegionLabel>> {
        Ok(vec![self.label; record.sample.s3.len()])
    }
}

/// Ground-truth majority label of each sample; an upper bound for labelers
/// that assign one label per sample.
pub struct OracleMajority;

impl LabelMethod for OracleMajority {
    fn name(&self) -> String {
        "oracle-majority".into()
    }

    fn predict(&self, record: &SampleRecord) -> Result<Vec<RegionLabel>> {
        let gt = record
            .sample
            .gt_region3
            .as_ref()
            .ok_or_else(|| Error::Validation(format!("`{}` has no overlap ground truth", record.scene.id)))?;
        let mut counts = [0usize; 3];
        for l in gt {
            counts[l.code() as usize] += 1;
        }
        let mut best = 0;
        for k in 1..3 {
            if counts[k] > counts[best] {
                best = k;
            }
        }
        Ok(vec![RegionLabel::from_code(best as i32).expect("valid code"); gt.len()])
    }
}

/// A trained labeler.
pub struct Learned<'a> {
    pub name: String,
    pub labeler: &'a Labeler,
    pub params: &'a ParamStore,
}

impl LabelMethod for Learned<'_> {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn predict(&self, record: &SampleRecord) -> Result<Vec<RegionLabel>> {
        let sample = LabelerSample::from_record(record)?;
        Ok(self.labeler.predict(self.params, &sample).point_labels)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub method: String,
    pub macc: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkTable {
    pub binary: bool,
    pub rows: Vec<BenchmarkRow>,
}

impl BenchmarkTable {
    pub fn get(&self, method: &str) -> Option<&BenchmarkRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
        let mut out = format!(
            "{:<width$}  {:>7}  {:>7}\n",
            "Method",
            if self.binary { "mAcc(2)" } else { "mAcc" },
            "samples"
        );
        out.push_str(&format!("{}\n", "-".repeat(width + 18)));
        for r in &self.rows {
            out.push_str(&format!("{:<width$}  {:>7.2}  {:>7}\n", r.method, 100.0 * r.macc, r.samples));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }

    /// Writes `<stem>.txt` and `<stem>.json`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let txt = dir.join(format!("{stem}.txt"));
        std::fs::write(&txt, self.to_text()).map_err(|e| Error::io(&txt, e))?;
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&json, self.to_json()).map_err(|e| Error::io(&json, e))
    }
}

/// Scores every method on the overlap points of `dataset`.
pub fn run_benchmark(methods: &[&dyn LabelMethod], dataset: &[SampleRecord], binary: bool) -> Result<BenchmarkTable> {
    let gt: Vec<Vec<RegionLabel>> = dataset
        .iter()
        .map(|r| {
            r.sample
                .gt_region3
                .clone()
                .ok_or_else(|| Error::Validation(format!("`{}` has no overlap ground truth", r.scene.id)))
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(methods.len());
    for m in methods {
        let preds = dataset.iter().map(|r| m.predict(r)).collect::<Result<Vec<_>>>()?;
        let report = compute_macc(&preds, &gt, binary)?;
        rows.push(BenchmarkRow {
            method: m.name(),
            macc: report.macc,
            samples: report.scored,
        });
    }
    Ok(BenchmarkTable { binary, rows })
}

/// Labeler output for one pair, aligned with `sample.s3`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairPrediction {
    pub labels: Vec<RegionLabel>,
    /// Sigmoid confidences for boxes a and b, 2×|S3|.
    pub confidence: Array2<f64>,
}

/// Scene-level soft masks from box membership plus per-pair predictions.
pub fn fuse_predictions(scene: &Scene, samples: &[OverlapSample], predictions: &[PairPrediction]) -> Result<PseudoLabelSet> {
    if samples.len() != predictions.len() {
        return Err(Error::Mismatch(format!(
            "{} samples but {} predictions",
            samples.len(),
            predictions.len()
        )));
    }
    let k = scene.boxes.len();
    let n = scene.num_points();
    let membership = scene.box_membership();
    let mut masks = Array2::<f32>::zeros((k, n));
    let mut determinate = Array2::from_elem((k, n), true);
    for (p, boxes) in membership.iter().enumerate() {
        if boxes.len() == 1 {
            masks[[boxes[0], p]] = 1.0;
        } else if boxes.len() > 1 {
            for &b in boxes {
                determinate[[b, p]] = false;
            }
        }
    }
    let mut votes: HashMap<usize, Vec<f64>> = HashMap::new();
    for (sample, pred) in samples.iter().zip(predictions) {
        if sample.scene_id != scene.id {
            return Err(Error::Mismatch(format!(
                "sample of `{}` given for scene `{}`",
                sample.scene_id, scene.id
            )));
        }
        if pred.labels.len() != sample.s3.len() || pred.confidence.dim() != (2, sample.s3.len()) {
            return Err(Error::Mismatch(format!(
                "prediction for pair {:?} does not cover its {} overlap points",
                sample.box_pair,
                sample.s3.len()
            )));
        }
        let (a, b) = sample.box_pair;
        for (j, &p) in sample.s3.iter().enumerate() {
            if p >= n {
                return Err(Error::Mismatch(format!("point {p} outside scene `{}`", scene.id)));
            }
            let (pa, pb) = (pred.confidence[[0, j]], pred.confidence[[1, j]]);
            let (ca, cb) = match pred.labels[j] {
                RegionLabel::A => (pa, pb.min(1.0 - pa)),
                RegionLabel::B => (pa.min(1.0 - pb), pb),
                RegionLabel::Background => (0.0, 0.0),
            };
            let v = votes.entry(p).or_insert_with(|| vec![0.0; k]);
            v[a] = v[a].max(ca);
            v[b] = v[b].max(cb);
        }
    }
    for (p, mut v) in votes {
        let top = (0..k).max_by(|&x, &y| v[x].total_cmp(&v[y]).then(y.cmp(&x))).expect("k > 0");
        if v[top] > 0.5 {
            let cap = 1.0 - v[top];
            for (i, c) in v.iter_mut().enumerate() {
                if i != top {
                    *c = c.min(cap);
                }
            }
        }
        for (i, c) in v.iter().enumerate() {
            if !determinate[[i, p]] {
                masks[[i, p]] = *c as f32;
            }
        }
    }
    PseudoLabelSet::new(
        scene.id.clone(),
        masks,
        determinate,
        scene.boxes.iter().map(|b| b.category).collect(),
    )
}

/// Pseudo-labels for a whole scene using a trained labeler on each pair.
pub fn label_scene(scene: &Scene, samples: &[OverlapSample], labeler: &Labeler, params: &ParamStore) -> Result<PseudoLabelSet> {
    let mut preds = Vec::with_capacity(samples.len());
    for s in samples {
        let rec = SampleRecord::crop(scene, s)?;
        let ls = LabelerSample::from_record(&rec)?;
        let p = labeler.predict(params, &ls);
        preds.push(PairPrediction {
            labels: p.point_labels,
            confidence: p.point_confidence,
        });
    }
    fuse_predictions(scene, samples, &preds)
}

/// Labels recovered from soft masks by thresholding at 0.5.
pub fn threshold_labels(labels: &PseudoLabelSet, sample: &OverlapSample) -> Vec<RegionLabel> {
    let (a, b) = sample.box_pair;
    sample
        .s3
        .iter()
        .map(|&p| {
            let (ma, mb) = (labels.masks[[a, p]], labels.masks[[b, p]]);
            if ma > 0.5 && ma >= mb {
                RegionLabel::A
            } else if mb > 0.5 {
                RegionLabel::B
            } else {
                RegionLabel::Background
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use RegionLabel::*;

    #[test]
    fn all_correct_is_one() {
        let gt = vec![vec![A, B, Background], vec![B]];
        assert_eq!(compute_macc(&gt, &gt, false).unwrap().macc, 1.0);
    }

    #[test]
    fn sample_average_not_point_weighted() {
        let gt = vec![vec![A; 10], vec![B; 1000]];
        let pred = vec![vec![A; 10], vec![A; 1000]];
        assert_eq!(compute_macc(&pred, &gt, false).unwrap().macc, 0.5);
    }

    #[test]
    fn empty_samples_are_excluded() {
        let gt = vec![vec![], vec![A, A]];
        let pred = vec![vec![], vec![A, B]];
        let r = compute_macc(&pred, &gt, false).unwrap();
        assert_eq!(r.macc, 0.5);
        assert_eq!(r.excluded, 1);
        assert_eq!(r.per_sample[0], None);
    }

    #[test]
    fn binary_mode_skips_background_truth() {
        let gt = vec![vec![A, Background, B]];
        let pred = vec![vec![A, A, A]];
        assert_eq!(compute_macc(&pred, &gt, true).unwrap().macc, 0.5);
        assert!((compute_macc(&pred, &gt, false).unwrap().macc - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(matches!(compute_macc(&[vec![A]], &[vec![A, B]], false), Err(Error::Mismatch(_))));
    }
}
