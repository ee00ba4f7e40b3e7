//! End-to-end driver shared by the command line and the benchmark: world
//! generation, sample extraction, simulation, training and evaluation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::eval::{run_benchmark, BenchmarkTable, LabelMethod, Learned, MajorityClass, OracleMajority, SmallerBox};
use crate::io::{load_scene, save_scene};
use crate::labeler::{Labeler, LabelerConfig, LabelerSample};
use crate::losses::MetricsRecord;
use crate::nn::ParamStore;
use crate::overlap::{extract_object_bank, extract_overlap_samples, SampleRecord, DEFAULT_CROP_MARGIN};
use crate::rng::derive_seed;
use crate::scene::Scene;
use crate::ssg::{generate_corpus, harvest_from_records, SimConfig, SimManifest};
use crate::synth::{generate_world, WorldConfig};
use crate::trainer::{finetune_smt, pretrain, StepEvent, TrainConfig};
use crate::{Error, Result};

pub const FILE_EXT: &str = "safetensors";

/// Sorted paths of the container files in `dir`.
pub fn list_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == FILE_EXT) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
        .collect()
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn save_scenes(dir: &Path, scenes: &[Scene]) -> Result<()> {
    create_dir(dir)?;
    for s in scenes {
        save_scene(s, &dir.join(format!("{}.{FILE_EXT}", file_stem(&s.id))))?;
    }
    Ok(())
}

pub fn load_scenes(dir: &Path) -> Result<Vec<Scene>> {
    list_files(dir)?.iter().map(|p| load_scene(p)).collect()
}

pub fn save_records(dir: &Path, records: &[SampleRecord]) -> Result<()> {
    create_dir(dir)?;
    for r in records {
        r.save(&dir.join(format!("{}.{FILE_EXT}", file_stem(&r.scene.id))))?;
    }
    Ok(())
}

pub fn load_records(dir: &Path) -> Result<Vec<SampleRecord>> {
    list_files(dir)?.iter().map(|p| SampleRecord::load(p)).collect()
}

/// Crops every overlap sample of every scene.
pub fn crop_samples(scenes: &[Scene], margin: f64) -> Result<Vec<SampleRecord>> {
    let mut out = Vec::new();
    for s in scenes {
        for sample in extract_overlap_samples(s, margin) {
            out.push(SampleRecord::crop(s, &sample)?);
        }
    }
    Ok(out)
}

pub fn prepare(records: &[SampleRecord]) -> Result<Vec<LabelerSample>> {
    records.iter().map(LabelerSample::from_record).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// The world; the last `eval_scenes` scenes are held out for evaluation.
    pub world: WorldConfig,
    pub eval_scenes: usize,
    pub crop_margin: f64,
    pub sim: SimConfig,
    pub sim_samples: usize,
    pub labeler: LabelerConfig,
    pub train: TrainConfig,
    pub binary: bool,
    pub no_ssg_baseline: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig {
                num_scenes: 60,
                ..WorldConfig::default()
            },
            eval_scenes: 10,
            crop_margin: DEFAULT_CROP_MARGIN,
            sim: SimConfig::default(),
            sim_samples: 2000,
            labeler: LabelerConfig::default(),
            train: TrainConfig::default(),
            binary: false,
            no_ssg_baseline: true,
        }
    }
}

impl PipelineConfig {
    /// Derives every stage's seed from one value.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.world.seed = seed;
        self.sim.rng_seed = derive_seed(seed, "sim");
        self.labeler.init_seed = derive_seed(seed, "init");
        self.train.seed = derive_seed(seed, "train");
        self
    }
}

/// Data shared by every training run of the benchmark.
pub struct BenchmarkData {
    pub train_scenes: Vec<Scene>,
    pub train_records: Vec<SampleRecord>,
    pub eval_records: Vec<SampleRecord>,
    pub sim_records: Vec<SampleRecord>,
    pub manifest: SimManifest,
}

impl BenchmarkData {
    pub fn build(cfg: &PipelineConfig) -> Result<Self> {
        if cfg.eval_scenes >= cfg.world.num_scenes {
            return Err(Error::Config(format!(
                "{} held-out scenes leave nothing to train on in a {}-scene world",
                cfg.eval_scenes, cfg.world.num_scenes
            )));
        }
        let mut scenes = generate_world(&cfg.world)?;
        let eval_scenes = scenes.split_off(cfg.world.num_scenes - cfg.eval_scenes);
        let train_records = crop_samples(&scenes, cfg.crop_margin)?;
        let eval_records = crop_samples(&eval_scenes, cfg.crop_margin)?;
        let stats = harvest_from_records(&train_records);
        let bank = extract_object_bank(&scenes);
        let (sim_records, manifest) = generate_corpus(&stats, &bank, cfg.sim_samples, &cfg.sim)?;
        Ok(Self {
            train_scenes: scenes,
            train_records,
            eval_records,
            sim_records,
            manifest,
        })
    }
}

pub struct PipelineRun {
    pub table: BenchmarkTable,
    pub labeler: Labeler,
    pub pretrained: ParamStore,
    pub teacher: ParamStore,
    pub teacher_no_ssg: Option<ParamStore>,
    pub pretrain_metrics: Vec<MetricsRecord>,
    pub finetune_metrics: Vec<MetricsRecord>,
    pub manifest: SimManifest,
}

/// Pretrains on simulated samples, fine-tunes with and without the
/// simulated initialization, and scores all methods on the held-out scenes.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineRun> {
    let data = BenchmarkData::build(cfg)?;
    run_on(cfg, &data)
}

pub fn run_on(cfg: &PipelineConfig, data: &BenchmarkData) -> Result<PipelineRun> {
    let (labeler, init) = Labeler::new(&cfg.labeler)?;
    let sim = prepare(&data.sim_records)?;
    let real = prepare(&data.train_records)?;
    log::info!(
        "{} simulated, {} real training, {} evaluation samples",
        sim.len(),
        real.len(),
        data.eval_records.len()
    );
    let pre = pretrain(&labeler, init.clone(), &sim, &cfg.train)?;
    let ft = finetune_smt(&labeler, &pre.params, &real, &cfg.train, |_: &StepEvent| {})?;
    let no_ssg = if cfg.no_ssg_baseline {
        Some(finetune_smt(&labeler, &init, &real, &cfg.train, |_: &StepEvent| {})?.teacher)
    } else {
        None
    };
    let majority = MajorityClass::fit(&data.sim_records);
    let saformer = Learned {
        name: "saformer".into(),
        labeler: &labeler,
        params: &ft.teacher,
    };
    let mut methods: Vec<&dyn LabelMethod> = vec![&SmallerBox, &majority, &OracleMajority, &saformer];
    let no_ssg_method = no_ssg.as_ref().map(|p| Learned {
        name: "saformer-no-ssg".into(),
        labeler: &labeler,
        params: p,
    });
    if let Some(m) = &no_ssg_method {
        methods.push(m);
    }
    let table = run_benchmark(&methods, &data.eval_records, cfg.binary)?;
    let mut finetune_metrics = ft.metrics;
    for m in &mut finetune_metrics {
        m.phase = "finetune".into();
    }
    Ok(PipelineRun {
        table,
        pretrained: pre.params,
        teacher: ft.teacher,
        teacher_no_ssg: no_ssg,
        pretrain_metrics: pre.metrics,
        finetune_metrics,
        manifest: data.manifest.clone(),
        labeler,
    })
}
