//! `geoorder`: synthetic data, training, evaluation, inference-cost
//! benchmark and exports for holistic instance order prediction.
//!
//! Exit codes: 0 success, 2 invalid configuration or arguments, 3 bad input
//! data, 1 anything else.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use geoorder_core::baselines::{train_pairwise, PairwiseModel};
use geoorder_core::harness::bench::{bench, DEFAULT_SIZES};
use geoorder_core::harness::data::{generate_split, load_split, write_dataset, Split};
use geoorder_core::harness::eval::align_to_ground_truth;
use geoorder_core::harness::vqa::{to_jsonl, vqa_export};
use geoorder_core::harness::{
    evaluate, train, BackboneKind, ExperimentConfig, HeadPredictor, Heuristic, HeuristicPredictor, OrderModel,
    PairwisePredictor, Predictor,
};
use geoorder_core::metrics::MetricsReport;
use geoorder_core::order::annotation::Prediction;
use geoorder_core::order::dot::to_dot;
use geoorder_core::order::SceneAnnotation;
use geoorder_core::synth::{SceneSample, ANNOTATION_FILE};
use geoorder_core::{Error, Result};

#[derive(Parser)]
#[command(name = "geoorder", version, about = "Holistic occlusion and depth order prediction")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Experiment config (JSON); defaults to the desk profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in profile used when no config file is given.
    #[arg(long, global = true, default_value = "desk")]
    profile: String,
    /// Seed for data generation, initialization and batch sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 gives fully sequential execution.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Method {
    Holistic,
    YAxis,
    Area,
    Pairwise,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train/val/test splits into --out.
    GenData,
    /// Train the order model (or the pairwise baseline) and write a
    /// checkpoint plus the training log into --out.
    Train {
        /// Dataset written by gen-data; generated in memory when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Override the number of training iterations.
        #[arg(long)]
        iterations: Option<usize>,
        /// Train the pairwise baseline instead of the holistic model.
        #[arg(long)]
        pairwise: bool,
    },
    /// Evaluate predictors on a split and write metrics.json into --out.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Holistic model checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Pairwise baseline checkpoint.
        #[arg(long)]
        pairwise: Option<PathBuf>,
        /// Methods to evaluate; defaults to every method whose model is given
        /// plus both heuristics.
        #[arg(long, value_enum, value_delimiter = ',')]
        methods: Vec<Method>,
    },
    /// Predict the orders of one scene directory and write the annotation
    /// with a predictions section and a DOT graph into --out.
    Predict {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, value_enum, default_value = "holistic")]
        method: Method,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        pairwise: Option<PathBuf>,
    },
    /// Forward-pass count, wall time and peak memory of holistic against
    /// pairwise inference as the instance count grows.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SIZES.to_vec())]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        pairwise: Option<PathBuf>,
    },
    /// Write the order graph of a scene annotation as Graphviz DOT.
    ExportGraph {
        #[arg(long)]
        scene: PathBuf,
        /// Draw the predictions section instead of the ground truth.
        #[arg(long)]
        predicted: bool,
    },
    /// Write yes/no prompts for every ordered pair as JSONL.
    VqaExport {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Validation(_) | Error::Capacity { .. } | Error::Input(_) => 2,
        Error::Data(_) | Error::Io { .. } | Error::Json(_) => 3,
        _ => 1,
    }
}

fn load_config(g: &Global) -> Result<ExperimentConfig> {
    let cfg = match &g.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::profile(&g.profile)?,
    };
    Ok(match g.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::Data(format!("cannot create {}: {e}", p.display())))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        create_dir(dir)?;
    }
    std::fs::write(path, text).map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn splits(cfg: &ExperimentConfig, data: Option<&Path>, want: &[Split]) -> Result<Vec<Vec<SceneSample>>> {
    want.iter()
        .map(|&s| match data {
            Some(d) => load_split(d, s),
            None => generate_split(&cfg.data, s),
        })
        .collect()
}

fn heuristic(m: Method) -> Option<Heuristic> {
    match m {
        Method::YAxis => Some(Heuristic::YAxis),
        Method::Area => Some(Heuristic::Area),
        _ => None,
    }
}

/// Models needed by the requested methods, loaded once.
struct Models {
    holistic: Option<OrderModel>,
    pairwise: Option<PairwiseModel>,
    cfg: ExperimentConfig,
}

impl Models {
    fn load(cfg: ExperimentConfig, checkpoint: Option<&Path>, pairwise: Option<&Path>) -> Result<Self> {
        Ok(Models {
            holistic: checkpoint.map(OrderModel::load).transpose()?,
            pairwise: pairwise.map(PairwiseModel::load).transpose()?,
            cfg,
        })
    }

    fn predictor(&self, m: Method) -> Result<Box<dyn Predictor + '_>> {
        let oracle = match &self.holistic {
            Some(h) if h.config.backbone.kind == BackboneKind::Oracle => h.config.backbone.oracle,
            _ => self.cfg.model.backbone.oracle,
        };
        if let Some(h) = heuristic(m) {
            return Ok(Box::new(HeuristicPredictor { heuristic: h, oracle }));
        }
        match m {
            Method::Holistic => {
                let model = self
                    .holistic
                    .as_ref()
                    .ok_or_else(|| Error::Input("the holistic method needs --checkpoint".into()))?;
                Ok(Box::new(HeadPredictor {
                    model,
                    coherent_depth: self.cfg.eval.coherent_depth,
                }))
            }
            _ => {
                let p = self
                    .pairwise
                    .as_ref()
                    .ok_or_else(|| Error::Input("the pairwise method needs --pairwise".into()))?;
                Ok(Box::new(PairwisePredictor {
                    net: &p.net,
                    store: &p.store,
                    oracle,
                }))
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(t) = cli.global.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let cfg = load_config(&cli.global)?;
    let out = cli.global.out.as_path();
    match cli.command {
        Command::GenData => {
            create_dir(out)?;
            write_dataset(out, &cfg.data)?;
            eprintln!(
                "wrote {} train, {} val, {} test scenes to {}",
                cfg.data.train,
                cfg.data.val,
                cfg.data.test,
                out.display()
            );
        }
        Command::Train {
            data,
            iterations,
            pairwise,
        } => {
            let mut cfg = cfg;
            if let Some(it) = iterations {
                if pairwise {
                    cfg.pairwise.train.iterations = it;
                } else {
                    cfg.train.iterations = it;
                }
            }
            cfg.validate()?;
            create_dir(out)?;
            write(&out.join("config.json"), &cfg.to_json())?;
            if pairwise {
                let [tr] = <[_; 1]>::try_from(splits(&cfg, data.as_deref(), &[Split::Train])?).expect("one split");
                let mut m = PairwiseModel::new(cfg.pairwise.net.clone(), cfg.model.init_seed)?;
                let losses = train_pairwise(&m.net, &mut m.store, &tr, &cfg.pairwise.train)?;
                m.save(out.join("pairwise"))?;
                write(&out.join("pairwise_log.json"), &to_json(&losses))?;
                eprintln!("pairwise loss {:.4} -> {:.4}", losses[0], losses[losses.len() - 1]);
            } else {
                let [tr, va] =
                    <[_; 2]>::try_from(splits(&cfg, data.as_deref(), &[Split::Train, Split::Val])?).expect("two splits");
                let outcome = train(&cfg, &tr, &va, &mut |l| eprintln!("{l}"))?;
                let mut meta = serde_json::Map::new();
                meta.insert("best_step".into(), outcome.log.best_step.into());
                outcome.model.save(out.join("checkpoint"), meta)?;
                write(&out.join("train_log.json"), &to_json(&outcome.log))?;
                eprintln!("kept step {}; checkpoint in {}", outcome.log.best_step, out.join("checkpoint").display());
            }
        }
        Command::Eval {
            data,
            split,
            checkpoint,
            pairwise,
            methods,
        } => {
            let methods = if methods.is_empty() {
                let mut m = Vec::new();
                if checkpoint.is_some() {
                    m.push(Method::Holistic);
                }
                if pairwise.is_some() {
                    m.push(Method::Pairwise);
                }
                m.extend([Method::YAxis, Method::Area]);
                m
            } else {
                methods
            };
            let models = Models::load(cfg, checkpoint.as_deref(), pairwise.as_deref())?;
            let samples = load_split(&data, split.into())?;
            let mut reports = Vec::new();
            for m in methods {
                let p = models.predictor(m)?;
                reports.push(evaluate(&samples, p.as_ref(), models.cfg.eval.aggregation)?);
            }
            write(&out.join("metrics.json"), &to_json(&reports))?;
            print!("{}", MetricsReport::table(&reports.iter().collect::<Vec<_>>()));
        }
        Command::Predict {
            scene,
            method,
            checkpoint,
            pairwise,
        } => {
            let models = Models::load(cfg, checkpoint.as_deref(), pairwise.as_deref())?;
            let sample = SceneSample::load(&scene)?;
            let p = models.predictor(method)?;
            let pred = p.predict(&sample)?;
            let gt: Vec<_> = geoorder_core::backbone::coarse_masks(&sample);
            let (occlusion, depth) = align_to_ground_truth(&pred, &gt)?;
            let mut ann = sample.annotation();
            ann.prediction = Some(Prediction {
                method: p.name(),
                occlusion: occlusion.clone(),
                depth: depth.clone(),
            });
            ann.image.path = scene.join(&ann.image.path).to_string_lossy().into_owned();
            create_dir(&out)?;
            ann.save(out.join(ANNOTATION_FILE))?;
            let labels: Vec<String> = ann.instances.iter().map(|i| i.category.clone()).collect();
            write(&out.join("order.dot"), &to_dot(&labels, occlusion.as_ref(), depth.as_ref()))?;
            eprintln!("wrote {} and order.dot to {}", ANNOTATION_FILE, out.display());
        }
        Command::Bench {
            sizes,
            repeats,
            checkpoint,
            pairwise,
        } => {
            let holistic = match checkpoint {
                Some(c) => OrderModel::load(c)?,
                None => {
                    let mut m = cfg.model.clone();
                    let largest = sizes.iter().copied().max().unwrap_or(2);
                    m.backbone.oracle.queries = m.backbone.oracle.queries.max(largest);
                    OrderModel::new(m)?
                }
            };
            let pw = match pairwise {
                Some(p) => PairwiseModel::load(p)?,
                None => PairwiseModel::new(cfg.pairwise.net.clone(), cfg.model.init_seed)?,
            };
            let report = bench(&holistic, (&pw.net, &pw.store), &sizes, repeats, cfg.data.seed)?;
            write(&out.join("bench.json"), &to_json(&report))?;
            print!("{}", report.table());
        }
        Command::ExportGraph { scene, predicted } => {
            let path = if scene.is_dir() { scene.join(ANNOTATION_FILE) } else { scene };
            let ann = SceneAnnotation::load(&path)?;
            let labels: Vec<String> = ann.instances.iter().map(|i| i.category.clone()).collect();
            let dot = if predicted {
                let p = ann
                    .prediction
                    .as_ref()
                    .ok_or_else(|| Error::Data(format!("{} has no predictions section", path.display())))?;
                to_dot(&labels, p.occlusion.as_ref(), p.depth.as_ref())
            } else {
                to_dot(&labels, Some(&ann.occlusion), Some(&ann.depth))
            };
            write(&out.join("order.dot"), &dot)?;
        }
        Command::VqaExport { data, split } => {
            let split: Split = split.into();
            let samples = load_split(&data, split)?;
            let mut records = Vec::new();
            for (k, s) in samples.iter().enumerate() {
                let image = format!("{}/scene_{k:05}/{}", split.name(), s.annotation().image.path);
                records.extend(vqa_export(&s.annotation(), &image)?);
            }
            write(&out.join("vqa.jsonl"), &to_jsonl(&records))?;
            eprintln!("wrote {} prompts", records.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
