//! Two-query local/global attention decoder with mask and class heads.

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoder::{FeatureSet, RegionSplit};
use crate::nn::{sigmoid, AttentionLayer, Bound, Linear, ParamId, ParamStore};
use crate::overlap::RegionLabel;
use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub channels: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub local_layers: usize,
    pub global_layers: usize,
    pub rounds: usize,
    pub num_categories: usize,
    pub query_init_std: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            heads: 1,
            ffn_hidden: 64,
            local_layers: 1,
            global_layers: 1,
            rounds: 1,
            num_categories: 4,
            query_init_std: 0.02,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.ffn_hidden == 0 {
            return Err(Error::Config("decoder widths must be positive".into()));
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "{} channels cannot be split into {} heads",
                self.channels, self.heads
            )));
        }
        if self.rounds == 0 || self.local_layers + self.global_layers == 0 {
            return Err(Error::Config("decoder needs at least one attention layer".into()));
        }
        if self.num_categories == 0 {
            return Err(Error::Config("num_categories must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Round {
    pub local: Vec<AttentionLayer>,
    pub global: Vec<AttentionLayer>,
}

/// Decoder registered under the `decoder.` parameter prefix.
#[derive(Clone, Debug)]
pub struct LgaDecoder {
    pub cfg: DecoderConfig,
    pub q1: ParamId,
    pub q2: ParamId,
    pub rounds: Vec<Round>,
    pub class_head: Linear,
}

/// Tape handles produced by one decoder pass.
#[derive(Clone, Copy, Debug)]
pub struct DecoderVars {
    /// Updated queries, 2×C.
    pub queries: Var,
    /// Contextual superpoint features in S1, S2, S3 order.
    pub context: Var,
    /// Query/feature dot products, 2 × (|S1|+|S2|+|S3|), same column order.
    pub mask_logits: Var,
    pub class_logits: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderOutput {
    /// 2×|S3| logits.
    pub mask_logits: Array2<f64>,
    pub m1: Vec<bool>,
    pub m2: Vec<bool>,
    pub class_logits: Array2<f64>,
    pub queries: Array2<f64>,
}

impl DecoderOutput {
    pub fn labels(&self) -> Vec<RegionLabel> {
        self.mask_logits
            .columns()
            .into_iter()
            .map(|c| resolve_label(c[0], c[1]))
            .collect()
    }
}

/// Per-superpoint decision: sigmoid threshold at 0.5 per instance, larger
/// confidence when both fire (ties to A), background when neither does.
pub fn resolve_label(logit_a: f64, logit_b: f64) -> RegionLabel {
    let (pa, pb) = (sigmoid(logit_a), sigmoid(logit_b));
    match (pa > 0.5, pb > 0.5) {
        (true, true) if pb > pa => RegionLabel::B,
        (true, _) => RegionLabel::A,
        (false, true) => RegionLabel::B,
        (false, false) => RegionLabel::Background,
    }
}

/// Dot-product masks of `queries` (2×C) against `features` (n×C).
pub fn predict_masks(queries: &Array2<f64>, features: &Array2<f64>) -> (Array2<f64>, Vec<bool>, Vec<bool>) {
    let logits = queries.dot(&features.t());
    let m1 = logits.row(0).iter().map(|&l| sigmoid(l) > 0.5).collect();
    let m2 = logits.row(1).iter().map(|&l| sigmoid(l) > 0.5).collect();
    (logits, m1, m2)
}

impl LgaDecoder {
    pub fn new(store: &mut ParamStore, cfg: &DecoderConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let normal = rand_distr::Normal::new(0.0, cfg.query_init_std)
            .map_err(|e| Error::Config(format!("query_init_std: {e}")))?;
        let query = |rng: &mut Rng| {
            use rand_distr::Distribution;
            Array2::from_shape_fn((1, c), |_| normal.sample(rng))
        };
        let q1 = store.add("decoder.query1", query(rng));
        let q2 = store.add("decoder.query2", query(rng));
        let rounds = (0..cfg.rounds)
            .map(|r| {
                let mut layer = |kind: &str, i: usize, rng: &mut Rng| {
                    AttentionLayer::new(store, &format!("decoder.round{r}.{kind}{i}"), c, cfg.heads, cfg.ffn_hidden, rng)
                };
                let local = (0..cfg.local_layers).map(|i| layer("local", i, rng)).collect();
                let global = (0..cfg.global_layers).map(|i| layer("global", i, rng)).collect();
                Round { local, global }
            })
            .collect();
        let class_head = Linear::new(store, "decoder.class_head", c, cfg.num_categories + 1, rng);
        Ok(Self {
            cfg: cfg.clone(),
            q1,
            q2,
            rounds,
            class_head,
        })
    }

    /// Runs the shared local layers separately on `[f1; q1]` and `[f2; q2]`.
    pub fn local_structure_attention(
        &self,
        tape: &mut Tape,
        p: &Bound,
        round: usize,
        regions: [Var; 2],
        queries: [Var; 2],
    ) -> (Var, Var) {
        let run = |tape: &mut Tape, f: Var, q: Var| {
            let mut x = tape.concat_rows(&[f, q]);
            for layer in &self.rounds[round].local {
                x = layer.forward(tape, p, x);
            }
            x
        };
        let v1 = run(tape, regions[0], queries[0]);
        let v2 = run(tape, regions[1], queries[1]);
        (v1, v2)
    }

    /// Joint attention over `[v1; v2; f3]`. Returns the updated queries and
    /// the contextual non-query rows in S1, S2, S3 order.
    pub fn global_context_attention(&self, tape: &mut Tape, p: &Bound, round: usize, v1: Var, v2: Var, f3: Var) -> (Var, Var) {
        let n1 = tape.value(v1).nrows() - 1;
        let n2 = tape.value(v2).nrows() - 1;
        let n3 = tape.value(f3).nrows();
        let mut x = tape.concat_rows(&[v1, v2, f3]);
        for layer in &self.rounds[round].global {
            x = layer.forward(tape, p, x);
        }
        let qrows = [n1, n1 + 1 + n2];
        let rest: Vec<usize> = (0..n1).chain(n1 + 1..n1 + 1 + n2).chain(n1 + n2 + 2..n1 + n2 + 2 + n3).collect();
        let queries = tape.rows(x, &qrows);
        let context = tape.rows(x, &rest);
        (queries, context)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, f_sup: Var, split: &RegionSplit) -> DecoderVars {
        let (n1, n2) = (split.s1.len(), split.s2.len());
        let mut f1 = tape.rows(f_sup, &split.s1);
        let mut f2 = tape.rows(f_sup, &split.s2);
        let mut f3 = tape.rows(f_sup, &split.s3);
        let mut q1 = p.var(self.q1);
        let mut q2 = p.var(self.q2);
        let mut out = None;
        for round in 0..self.rounds.len() {
            let (v1, v2) = self.local_structure_attention(tape, p, round, [f1, f2], [q1, q2]);
            let (queries, context) = self.global_context_attention(tape, p, round, v1, v2, f3);
            out = Some((queries, context));
            if round + 1 < self.rounds.len() {
                let all: Vec<usize> = (0..n1).collect();
                f1 = tape.rows(context, &all);
                let all: Vec<usize> = (n1..n1 + n2).collect();
                f2 = tape.rows(context, &all);
                let all: Vec<usize> = (n1 + n2..n1 + n2 + split.s3.len()).collect();
                f3 = tape.rows(context, &all);
                q1 = tape.rows(queries, &[0]);
                q2 = tape.rows(queries, &[1]);
            }
        }
        let (queries, context) = out.expect("at least one round");
        let mask_logits = tape.matmul_bt(queries, context);
        let class_logits = self.class_head.forward(tape, p, queries);
        DecoderVars {
            queries,
            context,
            mask_logits,
            class_logits,
        }
    }

    pub fn decode(&self, store: &ParamStore, features: &FeatureSet) -> DecoderOutput {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let f_sup = tape.leaf(features.superpoint_features.clone());
        let vars = self.forward(&mut tape, &p, f_sup, &features.region_split);
        output_from(&tape, &vars, &features.region_split)
    }
}

/// Extracts the S3 part of a decoder pass.
pub fn output_from(tape: &Tape, vars: &DecoderVars, split: &RegionSplit) -> DecoderOutput {
    let logits = tape.value(vars.mask_logits);
    let start = split.s1.len() + split.s2.len();
    let mask_logits = logits.slice(s![.., start..]).to_owned();
    let m1 = mask_logits.row(0).iter().map(|&l| sigmoid(l) > 0.5).collect();
    let m2 = mask_logits.row(1).iter().map(|&l| sigmoid(l) > 0.5).collect();
    DecoderOutput {
        mask_logits,
        m1,
        m2,
        class_logits: tape.value(vars.class_logits).clone(),
        queries: tape.value(vars.queries).clone(),
    }
}
