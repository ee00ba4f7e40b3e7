use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use saformer::eval::{label_scene, run_benchmark, LabelMethod, Learned, MajorityClass, OracleMajority, SmallerBox};
use saformer::io::save_labels;
use saformer::labeler::{Checkpoint, Labeler, LabelerConfig};
use saformer::losses::{write_metrics, MetricsRecord};
use saformer::overlap::{extract_object_bank, extract_overlap_samples, ObjectBank, DEFAULT_CROP_MARGIN};
use saformer::pipeline::{crop_samples, file_stem, load_records, load_scenes, prepare, run_pipeline, save_records, save_scenes, PipelineConfig, FILE_EXT};
use saformer::plot::{bar_chart, line_chart};
use saformer::ssg::{generate_corpus, harvest_from_records, PairStats, SimConfig};
use saformer::synth::{generate_world, WorldConfig};
use saformer::trainer::{finetune_smt, pretrain, StepEvent, TrainConfig};

type CliResult<T = ()> = std::result::Result<T, Box<dyn std::error::Error>>;

#[derive(Parser)]
#[command(name = "saformer", version, about = "Point-level pseudo-labels from box annotations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world of annotated scenes.
    Synth {
        /// World configuration (JSON); defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Crop one sample file per overlapping box pair.
    Extract {
        #[arg(long)]
        scene_dir: PathBuf,
        #[arg(long, default_value_t = DEFAULT_CROP_MARGIN)]
        margin: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Collect pair statistics and the object bank from real data.
    Harvest {
        #[arg(long)]
        sample_dir: PathBuf,
        #[arg(long)]
        scene_dir: PathBuf,
        #[arg(long)]
        stats: PathBuf,
        #[arg(long)]
        bank: PathBuf,
    },
    /// Generate simulated overlap samples.
    GenSim(GenSimArgs),
    /// Train the labeler on simulated samples.
    Pretrain {
        #[arg(long)]
        sim_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
        /// Labeler architecture (JSON).
        #[arg(long)]
        labeler_config: Option<PathBuf>,
    },
    /// Fine-tune on real overlap samples with the mean teacher.
    Finetune {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        real_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Start from fresh parameters instead of the checkpoint's.
        #[arg(long)]
        no_ssg_init: bool,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Score labeling methods on a directory of real samples.
    Eval {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "smaller-box,saformer")]
        methods: Vec<String>,
        /// Simulated corpus used to fit the majority-class baseline.
        #[arg(long)]
        sim_dir: Option<PathBuf>,
        /// Score only points whose ground truth is one of the two boxes.
        #[arg(long)]
        binary: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write an SVG bar chart of mAcc here.
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Write fused per-scene pseudo-labels.
    Label {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scene_dir: PathBuf,
        #[arg(long, default_value_t = DEFAULT_CROP_MARGIN)]
        margin: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the whole pipeline on a synthetic world and print the benchmark.
    Benchmark {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        plot: bool,
    },
}

#[derive(Args)]
struct GenSimArgs {
    #[arg(long)]
    stats: PathBuf,
    #[arg(long)]
    bank: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Simulation configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    no_gravity: bool,
    #[arg(long)]
    no_collision: bool,
    #[arg(long)]
    no_background: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Training configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Metrics log; defaults to the checkpoint path with a .metrics.jsonl suffix.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Write an SVG loss curve here.
    #[arg(long)]
    plot: Option<PathBuf>,
}

impl TrainArgs {
    fn load(&self) -> CliResult<TrainConfig> {
        let mut cfg: TrainConfig = load_json(self.config.as_deref())?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn finish(&self, ckpt: &Path, title: &str, metrics: &[MetricsRecord]) -> CliResult {
        let path = self.metrics.clone().unwrap_or_else(|| ckpt.with_extension("metrics.jsonl"));
        write_metrics(&path, metrics)?;
        if let Some(plot) = &self.plot {
            write_text(plot, &loss_chart(title, metrics))?;
        }
        Ok(())
    }
}

fn load_json<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            Ok(serde_json::from_str(&text).map_err(|e| format!("{}: {e}", p.display()))?)
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult {
    write_text(path, &serde_json::to_string_pretty(value)?)
}

fn write_text(path: &Path, text: &str) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(())
}

fn loss_chart(title: &str, metrics: &[MetricsRecord]) -> String {
    let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for m in metrics {
        let pos = match series.iter().position(|(name, _)| *name == m.phase) {
            Some(i) => i,
            None => {
                series.push((m.phase.clone(), Vec::new()));
                series.len() - 1
            }
        };
        series[pos].1.push((m.step as f64, m.total));
    }
    line_chart(title, "step", &series)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> CliResult {
    match command {
        Command::Synth { config, seed, out } => {
            let mut cfg = match &config {
                Some(p) => WorldConfig::load(p)?,
                None => WorldConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let scenes = generate_world(&cfg)?;
            save_scenes(&out, &scenes)?;
            println!("wrote {} scenes to {}", scenes.len(), out.display());
        }
        Command::Extract { scene_dir, margin, out } => {
            let scenes = load_scenes(&scene_dir)?;
            let records = crop_samples(&scenes, margin)?;
            save_records(&out, &records)?;
            println!("wrote {} samples from {} scenes to {}", records.len(), scenes.len(), out.display());
        }
        Command::Harvest {
            sample_dir,
            scene_dir,
            stats,
            bank,
        } => {
            let records = load_records(&sample_dir)?;
            let pair_stats = harvest_from_records(&records);
            pair_stats.save(&stats)?;
            let object_bank = extract_object_bank(&load_scenes(&scene_dir)?);
            object_bank.save(&bank)?;
            println!("{} pair types, {} bank objects", pair_stats.len(), object_bank.len());
        }
        Command::GenSim(args) => {
            let mut cfg: SimConfig = load_json(args.config.as_deref())?;
            cfg.rng_seed = args.seed;
            cfg.gravity &= !args.no_gravity;
            cfg.collision &= !args.no_collision;
            cfg.background &= !args.no_background;
            let stats = PairStats::load(&args.stats)?;
            let bank = ObjectBank::load(&args.bank)?;
            let (records, manifest) = generate_corpus(&stats, &bank, args.count, &cfg)?;
            save_records(&args.out, &records)?;
            write_json(&args.out.join("manifest.json"), &manifest)?;
            println!(
                "accepted {} of {} requested; {} pairs rejected after {} distance draws",
                manifest.accepted, manifest.requested, manifest.rejected_pairs, manifest.distance_draws
            );
        }
        Command::Pretrain {
            sim_dir,
            out,
            train,
            labeler_config,
        } => {
            let cfg = train.load()?;
            let lcfg: LabelerConfig = load_json(labeler_config.as_deref())?;
            let (labeler, mut ckpt) = Checkpoint::fresh(&lcfg)?;
            let corpus = prepare(&load_records(&sim_dir)?)?;
            let outcome = pretrain(&labeler, ckpt.params, &corpus, &cfg)?;
            ckpt.params = outcome.params;
            ckpt.optimizer = outcome.optimizer;
            ckpt.step = outcome.steps;
            ckpt.phase = "pretrain".into();
            ckpt.rng_seed = cfg.seed;
            ckpt.save(&out)?;
            train.finish(&out, "pretraining loss", &outcome.metrics)?;
            println!("{} steps on {} samples; wrote {}", outcome.steps, corpus.len(), out.display());
        }
        Command::Finetune {
            ckpt,
            real_dir,
            out,
            no_ssg_init,
            train,
        } => {
            let cfg = train.load()?;
            let (labeler, mut state) = Checkpoint::load(&ckpt)?;
            let init = if no_ssg_init { Labeler::new(&state.config)?.1 } else { state.params.clone() };
            let real = prepare(&load_records(&real_dir)?)?;
            let outcome = finetune_smt(&labeler, &init, &real, &cfg, |ev: &StepEvent| {
                log::debug!("step {} total {:.4}", ev.step, ev.record.total)
            })?;
            state.params = outcome.teacher;
            state.optimizer = outcome.optimizer;
            state.step = outcome.steps;
            state.phase = "finetune".into();
            state.rng_seed = cfg.seed;
            state.save(&out)?;
            train.finish(&out, "fine-tuning loss", &outcome.metrics)?;
            println!("{} steps on {} samples; wrote {}", outcome.steps, real.len(), out.display());
        }
        Command::Eval {
            ckpt,
            dataset,
            methods,
            sim_dir,
            binary,
            out,
            plot,
        } => {
            let records = load_records(&dataset)?;
            let loaded = ckpt.as_deref().map(Checkpoint::load).transpose()?;
            let majority = match &sim_dir {
                Some(d) => Some(MajorityClass::fit(&load_records(d)?)),
                None => None,
            };
            let learned = loaded.as_ref().map(|(labeler, state)| Learned {
                name: "saformer".into(),
                labeler,
                params: &state.params,
            });
            let mut chosen: Vec<&dyn LabelMethod> = Vec::new();
            for m in &methods {
                match m.as_str() {
                    "smaller-box" => chosen.push(&SmallerBox),
                    "oracle-majority" => chosen.push(&OracleMajority),
                    "majority-class" => chosen.push(majority.as_ref().ok_or("majority-class needs --sim-dir")?),
                    "saformer" => chosen.push(learned.as_ref().ok_or("saformer needs --ckpt")?),
                    other => return Err(format!("unknown method `{other}`").into()),
                }
            }
            let table = run_benchmark(&chosen, &records, binary)?;
            print!("{}", table.to_text());
            if let Some(dir) = &out {
                table.save(dir, "benchmark")?;
            }
            if let Some(p) = &plot {
                let bars: Vec<(String, f64)> = table.rows.iter().map(|r| (r.method.clone(), r.macc)).collect();
                write_text(p, &bar_chart("mAcc", &bars))?;
            }
        }
        Command::Label {
            ckpt,
            scene_dir,
            margin,
            out,
        } => {
            let (labeler, state) = Checkpoint::load(&ckpt)?;
            std::fs::create_dir_all(&out)?;
            let scenes = load_scenes(&scene_dir)?;
            for scene in &scenes {
                let samples = extract_overlap_samples(scene, margin);
                let labels = label_scene(scene, &samples, &labeler, &state.params)?;
                save_labels(&labels, &out.join(format!("{}.{FILE_EXT}", file_stem(&scene.id))))?;
            }
            println!("labeled {} scenes into {}", scenes.len(), out.display());
        }
        Command::Benchmark { config, seed, out, plot } => {
            let mut cfg: PipelineConfig = load_json(config.as_deref())?;
            if let Some(s) = seed {
                cfg = cfg.with_seed(s);
            }
            let run = run_pipeline(&cfg)?;
            print!("{}", run.table.to_text());
            run.table.save(&out, "benchmark")?;
            write_json(&out.join("manifest.json"), &run.manifest)?;
            let mut metrics = run.pretrain_metrics.clone();
            metrics.extend(run.finetune_metrics.iter().cloned());
            write_metrics(&out.join("metrics.jsonl"), &metrics)?;
            if plot {
                let bars: Vec<(String, f64)> = run.table.rows.iter().map(|r| (r.method.clone(), r.macc)).collect();
                write_text(&out.join("macc.svg"), &bar_chart("mAcc", &bars))?;
                write_text(&out.join("pretrain_loss.svg"), &loss_chart("pretraining loss", &run.pretrain_metrics))?;
                write_text(&out.join("finetune_loss.svg"), &loss_chart("fine-tuning loss", &run.finetune_metrics))?;
            }
        }
    }
    Ok(())
}
