//! Pretraining on simulated samples and Mean-Teacher fine-tuning.

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::labeler::{param_hash, Labeler, LabelerSample};
use crate::losses::{cross_entropy, loss_sim, loss_sup, loss_total_real, loss_unsup, LossWeights, MetricsRecord};
use crate::nn::{clip_global_norm, cosine_lr, Adam, ParamStore};
use crate::rng::{derive_seed, stream, Rng};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub flip: bool,
    pub flip_p: f64,
    pub jitter_sigma: f64,
    pub elastic: bool,
    pub elastic_granularity: f64,
    pub elastic_magnitude: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip: true,
            flip_p: 0.5,
            jitter_sigma: 0.01,
            elastic: true,
            elastic_granularity: 0.2,
            elastic_magnitude: 0.04,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            flip: false,
            jitter_sigma: 0.0,
            elastic: false,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub sim_epochs: usize,
    pub sim_batch: usize,
    pub real_epochs: usize,
    pub real_batch: usize,
    pub ema_decay: f64,
    pub lr: f64,
    pub finetune_lr: f64,
    pub cosine: bool,
    pub grad_clip: Option<f64>,
    pub weights: LossWeights,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            sim_epochs: 100,
            sim_batch: 64,
            real_epochs: 5,
            real_batch: 64,
            ema_decay: 0.999,
            lr: 1e-3,
            finetune_lr: 1e-3,
            cosine: true,
            grad_clip: Some(10.0),
            weights: LossWeights::default(),
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ema_decay >= 0.0 && self.ema_decay <= 1.0) {
            return Err(Error::Config(format!("ema_decay must lie in [0, 1], got {}", self.ema_decay)));
        }
        if self.sim_epochs == 0 || self.real_epochs == 0 || self.sim_batch == 0 || self.real_batch == 0 {
            return Err(Error::Config("epochs and batch sizes must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.finetune_lr >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        self.weights.validate()
    }

    fn lr_at(&self, base: f64, step: u64, total: u64) -> f64 {
        if self.cosine {
            cosine_lr(base, step, total)
        } else {
            base
        }
    }
}

/// Coordinate-only augmentation; superpoints and regions are unchanged.
pub fn augment(sample: &LabelerSample, cfg: &AugmentConfig, rng: &mut Rng) -> LabelerSample {
    let mut out = sample.clone();
    let f = &mut out.input.features;
    if cfg.flip {
        for axis in 0..2 {
            if rng.random::<f64>() < cfg.flip_p {
                f.column_mut(axis).mapv_inplace(|v| -v);
            }
        }
    }
    if cfg.jitter_sigma > 0.0 {
        let n = Normal::new(0.0, cfg.jitter_sigma).expect("finite sigma");
        f.slice_mut(s![.., 0..3]).mapv_inplace(|v| v + n.sample(rng));
    }
    if cfg.elastic && cfg.elastic_magnitude > 0.0 {
        elastic(f, cfg.elastic_granularity, cfg.elastic_magnitude, rng);
    }
    out
}

/// Adds a smooth random displacement field sampled on a lattice of spacing
/// `granularity`, box-blurred and trilinearly interpolated.
fn elastic(f: &mut Array2<f64>, granularity: f64, magnitude: f64, rng: &mut Rng) {
    let n = f.nrows();
    if n == 0 {
        return;
    }
    let mut lo = [f64::INFINITY; 3];
    for r in f.rows() {
        for k in 0..3 {
            lo[k] = lo[k].min(r[k]);
        }
    }
    let mut hi = [f64::NEG_INFINITY; 3];
    for r in f.rows() {
        for k in 0..3 {
            hi[k] = hi[k].max(r[k]);
        }
    }
    let dims: [usize; 3] = [0, 1, 2].map(|k| ((hi[k] - lo[k]) / granularity).floor() as usize + 4);
    let origin = [0, 1, 2].map(|k| lo[k] - granularity);
    let len = dims[0] * dims[1] * dims[2];
    let at = |i: usize, j: usize, k: usize| (i * dims[1] + j) * dims[2] + k;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let noise: Vec<[f64; 3]> = (0..len)
        .map(|_| [normal.sample(rng), normal.sample(rng), normal.sample(rng)])
        .collect();
    let mut smooth = vec![[0.0f64; 3]; len];
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                let mut acc = [0.0; 3];
                let mut cnt = 0.0;
                for di in i.saturating_sub(1)..=(i + 1).min(dims[0] - 1) {
                    for dj in j.saturating_sub(1)..=(j + 1).min(dims[1] - 1) {
                        for dk in k.saturating_sub(1)..=(k + 1).min(dims[2] - 1) {
                            let v = noise[at(di, dj, dk)];
                            for c in 0..3 {
                                acc[c] += v[c];
                            }
                            cnt += 1.0;
                        }
                    }
                }
                smooth[at(i, j, k)] = acc.map(|a| a / cnt);
            }
        }
    }
    for mut r in f.rows_mut() {
        let g = [0, 1, 2].map(|k| (r[k] - origin[k]) / granularity);
        let base = g.map(|x| x.floor() as usize);
        let t = [0, 1, 2].map(|k| g[k] - base[k] as f64);
        let mut d = [0.0; 3];
        for corner in 0..8 {
            let o = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
            let w: f64 = (0..3).map(|k| if o[k] == 1 { t[k] } else { 1.0 - t[k] }).product();
            let v = smooth[at(base[0] + o[0], base[1] + o[1], base[2] + o[2])];
            for c in 0..3 {
                d[c] += w * v[c];
            }
        }
        for c in 0..3 {
            r[c] += magnitude * d[c];
        }
    }
}

/// `teacher ← α·teacher + (1−α)·student` for every parameter.
pub fn ema_update(teacher: &mut ParamStore, student: &ParamStore, alpha: f64) -> Result<()> {
    if teacher.names() != student.names() {
        return Err(Error::Shape("teacher and student have different parameter sets".into()));
    }
    for (name, (t, s)) in teacher.names().to_vec().iter().zip(teacher.values_mut().iter_mut().zip(student.values())) {
        if t.dim() != s.dim() {
            return Err(Error::Shape(format!("{name}: teacher {:?} vs student {:?}", t.dim(), s.dim())));
        }
        ndarray::Zip::from(t).and(s).for_each(|t, &s| *t = alpha * *t + (1.0 - alpha) * s);
    }
    Ok(())
}

/// Accumulated loss and gradients for one batch.
struct Batch {
    grads: Vec<Array2<f64>>,
    record: MetricsRecord,
}

impl Batch {
    fn new(params: &ParamStore, phase: &str, step: u64) -> Self {
        Self {
            grads: params.values().iter().map(|v| Array2::zeros(v.dim())).collect(),
            record: MetricsRecord {
                phase: phase.into(),
                step,
                total: 0.0,
                l_cls: 0.0,
                l_sup: 0.0,
                l_unsup: 0.0,
                coverage: 0.0,
                lr: 0.0,
            },
        }
    }

    fn finish(&mut self, n: usize) {
        let n = n as f64;
        let r = &mut self.record;
        r.total /= n;
        r.l_cls /= n;
        r.l_sup /= n;
        r.l_unsup /= n;
        r.coverage /= n;
    }
}

fn apply_step(
    params: &mut ParamStore,
    adam: &mut Adam,
    batch: &mut Batch,
    lr: f64,
    clip: Option<f64>,
    step: u64,
) -> Result<()> {
    if !batch.record.total.is_finite() {
        return Err(Error::Divergence {
            step: step as usize,
            detail: format!("loss is {} ({:?})", batch.record.total, batch.record),
        });
    }
    if batch.grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
        return Err(Error::Divergence {
            step: step as usize,
            detail: "non-finite gradient".into(),
        });
    }
    if let Some(c) = clip {
        clip_global_norm(&mut batch.grads, c);
    }
    adam.update(params, &batch.grads, lr);
    batch.record.lr = lr;
    if !params.all_finite() {
        return Err(Error::Divergence {
            step: step as usize,
            detail: "non-finite parameters after update".into(),
        });
    }
    Ok(())
}

fn add_grads(acc: &mut [Array2<f64>], grads: Vec<Array2<f64>>, scale: f64) {
    for (a, g) in acc.iter_mut().zip(grads) {
        a.scaled_add(scale, &g);
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamStore,
    pub optimizer: Adam,
    pub metrics: Vec<MetricsRecord>,
    pub steps: u64,
}

/// Simulated-sample loss and its parameter gradients for one sample.
pub fn sim_sample_gradients(
    labeler: &Labeler,
    params: &ParamStore,
    sample: &LabelerSample,
    w: &LossWeights,
) -> Result<(crate::losses::LossOutput, Vec<Array2<f64>>)> {
    let targets = sample
        .mask_targets()
        .ok_or_else(|| Error::Validation(format!("sample `{}` has no ground truth", sample.id)))?;
    let classes = sample.class_targets(labeler.cfg.decoder.num_categories)?;
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let vars = labeler.forward(&mut tape, &p, sample);
    let out = loss_sim(tape.value(vars.mask_logits), &targets, tape.value(vars.class_logits), classes, w);
    let g = tape.backward(&[(vars.mask_logits, out.grad_mask.clone()), (vars.class_logits, out.grad_class.clone())]);
    Ok((out, p.gradients(&g, params)))
}

/// Trains `params` on simulated samples with full supervision.
pub fn pretrain(labeler: &Labeler, params: ParamStore, corpus: &[LabelerSample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Validation("simulated corpus is empty".into()));
    }
    let mut params = params;
    let mut adam = Adam::new(&params);
    let per_epoch = corpus.len().div_ceil(cfg.sim_batch) as u64;
    let total = per_epoch * cfg.sim_epochs as u64;
    let seed = derive_seed(cfg.seed, "pretrain-order");
    let mut metrics = Vec::with_capacity(total as usize);
    let mut step = 0u64;
    for epoch in 0..cfg.sim_epochs {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(&mut stream(seed, epoch as u64));
        for chunk in order.chunks(cfg.sim_batch) {
            let mut batch = Batch::new(&params, "pretrain", step);
            for &i in chunk {
                let (out, grads) = sim_sample_gradients(labeler, &params, &corpus[i], &cfg.weights)?;
                add_grads(&mut batch.grads, grads, 1.0 / chunk.len() as f64);
                batch.record.total += out.total;
                batch.record.l_cls += out.cls;
                batch.record.l_sup += cfg.weights.lambda_bce * out.bce + cfg.weights.lambda_dice * out.dice;
            }
            batch.finish(chunk.len());
            let lr = cfg.lr_at(cfg.lr, step, total);
            apply_step(&mut params, &mut adam, &mut batch, lr, cfg.grad_clip, step)?;
            log::debug!("pretrain step {step}: loss {:.5}", batch.record.total);
            metrics.push(batch.record);
            step += 1;
        }
    }
    Ok(TrainOutcome {
        params,
        optimizer: adam,
        metrics,
        steps: step,
    })
}

/// State visible to a fine-tuning observer after every EMA update.
pub struct StepEvent<'a> {
    pub step: u64,
    pub teacher: &'a ParamStore,
    pub student: &'a ParamStore,
    pub record: &'a MetricsRecord,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub teacher: ParamStore,
    pub student: ParamStore,
    pub optimizer: Adam,
    pub metrics: Vec<MetricsRecord>,
    pub steps: u64,
}

/// Real-sample loss terms and student gradients for one sample.
pub fn real_sample_gradients(
    labeler: &Labeler,
    teacher: &ParamStore,
    student: &ParamStore,
    original: &LabelerSample,
    augmented: &LabelerSample,
    w: &LossWeights,
) -> Result<(MetricsRecord, Vec<Array2<f64>>)> {
    let classes = original.class_targets(labeler.cfg.decoder.num_categories)?;
    let n12 = original.split.s1.len() + original.split.s2.len();
    let (teacher_logits, _) = labeler.logits(teacher, original);
    let mut tape = Tape::new();
    let p = student.bind(&mut tape);
    let vars = labeler.forward(&mut tape, &p, augmented);
    let logits = tape.value(vars.mask_logits);
    let sup = loss_sup(&logits.slice(s![.., ..n12]).to_owned(), original.split.s1.len(), w);
    let unsup = loss_unsup(
        &logits.slice(s![.., n12..]).to_owned(),
        &teacher_logits.slice(s![.., n12..]).to_owned(),
        w,
    );
    let (cls, gcls) = cross_entropy(tape.value(vars.class_logits), &classes);
    let mut grad = Array2::zeros(logits.dim());
    grad.slice_mut(s![.., ..n12]).assign(&sup.grad);
    grad.slice_mut(s![.., n12..]).assign(&unsup.term.grad);
    let g = tape.backward(&[(vars.mask_logits, grad), (vars.class_logits, gcls * w.lambda_cls)]);
    let record = MetricsRecord {
        phase: "finetune".into(),
        step: 0,
        total: loss_total_real(cls, sup.total, unsup.term.total, w),
        l_cls: cls,
        l_sup: sup.total,
        l_unsup: unsup.term.total,
        coverage: unsup.coverage,
        lr: 0.0,
    };
    Ok((record, p.gradients(&g, student)))
}

/// Mean-Teacher fine-tuning starting from `init` for both teacher and
/// student. Returns the final teacher.
pub fn finetune_smt(
    labeler: &Labeler,
    init: &ParamStore,
    real: &[LabelerSample],
    cfg: &TrainConfig,
    mut observer: impl FnMut(&StepEvent),
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if real.is_empty() {
        return Err(Error::Validation("no real samples to fine-tune on".into()));
    }
    let mut teacher = init.clone();
    let mut student = init.clone();
    let mut adam = Adam::new(&student);
    let per_epoch = real.len().div_ceil(cfg.real_batch) as u64;
    let total = per_epoch * cfg.real_epochs as u64;
    let order_seed = derive_seed(cfg.seed, "finetune-order");
    let aug_seed = derive_seed(cfg.seed, "finetune-augment");
    let mut metrics = Vec::with_capacity(total as usize);
    let mut step = 0u64;
    for epoch in 0..cfg.real_epochs {
        let mut order: Vec<usize> = (0..real.len()).collect();
        order.shuffle(&mut stream(order_seed, epoch as u64));
        for chunk in order.chunks(cfg.real_batch) {
            let teacher_hash = param_hash(&teacher);
            let mut batch = Batch::new(&student, "finetune", step);
            for (slot, &i) in chunk.iter().enumerate() {
                let mut rng = stream(aug_seed, step * cfg.real_batch as u64 + slot as u64);
                let aug = augment(&real[i], &cfg.augment, &mut rng);
                let (rec, grads) = real_sample_gradients(labeler, &teacher, &student, &real[i], &aug, &cfg.weights)?;
                add_grads(&mut batch.grads, grads, 1.0 / chunk.len() as f64);
                batch.record.total += rec.total;
                batch.record.l_cls += rec.l_cls;
                batch.record.l_sup += rec.l_sup;
                batch.record.l_unsup += rec.l_unsup;
                batch.record.coverage += rec.coverage;
            }
            batch.finish(chunk.len());
            let lr = cfg.lr_at(cfg.finetune_lr, step, total);
            apply_step(&mut student, &mut adam, &mut batch, lr, cfg.grad_clip, step)?;
            if param_hash(&teacher) != teacher_hash {
                return Err(Error::Validation(format!("teacher parameters changed outside the EMA update at step {step}")));
            }
            ema_update(&mut teacher, &student, cfg.ema_decay)?;
            observer(&StepEvent {
                step,
                teacher: &teacher,
                student: &student,
                record: &batch.record,
            });
            metrics.push(batch.record);
            step += 1;
        }
    }
    Ok(FinetuneOutcome {
        teacher,
        student,
        optimizer: adam,
        metrics,
        steps: step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn ema_one_step() {
        let mut t = ParamStore::new();
        t.add("x", array![[1.0]]);
        let mut s = ParamStore::new();
        s.add("x", array![[0.0]]);
        ema_update(&mut t, &s, 0.99).unwrap();
        assert_eq!(t.values()[0][[0, 0]], 0.99);
        let before = t.clone();
        ema_update(&mut t, &s, 1.0).unwrap();
        assert_eq!(t, before);
        ema_update(&mut t, &s, 0.0).unwrap();
        assert_eq!(t, s);
    }

    #[test]
    fn ema_rejects_shape_mismatch() {
        let mut t = ParamStore::new();
        t.add("x", array![[1.0, 2.0]]);
        let mut s = ParamStore::new();
        s.add("x", array![[0.0]]);
        assert!(matches!(ema_update(&mut t, &s, 0.5), Err(Error::Shape(_))));
    }
}
