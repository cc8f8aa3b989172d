use std::path::PathBuf;

use deepdrl::calibration::CalibrationReport;
use deepdrl::data::{
    generate_gaussian_shift, load_csv, write_csv, CsvSchema, Dataset, Domain, GaussianShiftSpec,
};
use deepdrl::drl::{train_end_to_end, train_erm, Prediction, RatioMode, Trained};
use deepdrl::experiment::{compare_calibration, labels_of, predict_dataset, Checkpoint, SeedPlan};
use deepdrl::ratio_baselines::{plugin_csv, run_plugin_detailed, PluginOptions};
use deepdrl::selftrain::{run_drst, DrstOptions};
use deepdrl::ssl::{run_drssl, SslConfig, SslOptions};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{DataSpec, ExperimentConfig, SslVariant};
use crate::error::CliError;
use crate::output::{jsonl, predictions_csv, reliability_csv, ModelReport, PredictionSet, RunDir};

pub const TOOL: &str = "deepdrl";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Generate the synthetic shift and score the Bayes predictor with true ratios.
    Simulate,
    /// Joint robust classifier and domain classifier training.
    TrainDrl,
    /// Source-only softmax baseline.
    TrainErm,
    /// Robust self-training with class-balanced pseudo-labels.
    Drst,
    /// Robust consistency training on the unlabeled target.
    Drssl,
    /// Kernel density plug-in ratios over a bandwidth grid.
    PluginSim,
    /// ERM, temperature-scaled ERM and robust learning side by side.
    Calibrate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::TrainDrl => "train-drl",
            Command::TrainErm => "train-erm",
            Command::Drst => "drst",
            Command::Drssl => "drssl",
            Command::PluginSim => "plugin-sim",
            Command::Calibrate => "calibrate",
        }
    }
}

#[derive(Debug, Serialize)]
struct Report<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    name: &'a str,
    seed: u64,
    seeds: SeedPlan,
    config: &'a ExperimentConfig,
    models: Vec<ModelReport>,
    #[serde(skip_serializing_if = "serde_json::Map::is_empty")]
    extra: serde_json::Map<String, serde_json::Value>,
}

/// Flag values that take precedence over the config file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

/// The config after overrides, with every seed field set from the seed plan.
pub fn resolve(mut cfg: ExperimentConfig, overrides: &Overrides) -> Result<(ExperimentConfig, SeedPlan, PathBuf), CliError> {
    if let Some(seed) = overrides.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &overrides.out {
        cfg.output = Some(out.clone());
    }
    let out = cfg
        .output
        .clone()
        .ok_or_else(|| CliError::Config("output: no output directory given (set it or pass --out)".into()))?;
    let seeds = SeedPlan::new(cfg.seed);
    cfg.train.seed = seeds.shuffle;
    cfg.ssl.augmentation.seed = seeds.augment;
    if let DataSpec::Gaussian(g) = &mut cfg.data {
        g.seed = seeds.data;
    }
    cfg.validate()?;
    Ok((cfg, seeds, out))
}

struct Loaded {
    source: Dataset,
    target: Dataset,
    target_labels: Option<Vec<usize>>,
}

fn load(cfg: &ExperimentConfig) -> Result<Loaded, CliError> {
    match &cfg.data {
        DataSpec::Gaussian(g) => {
            let d = generate_gaussian_shift(g)?;
            Ok(Loaded {
                target_labels: Some(labels_of(&d.target)?),
                source: d.source,
                target: d.target,
            })
        }
        DataSpec::Csv(c) => {
            let source = load_csv(
                &c.source,
                CsvSchema {
                    has_label: true,
                    domain: Domain::Source,
                    class_count: c.class_count,
                },
            )?;
            let target = load_csv(
                &c.target,
                CsvSchema {
                    has_label: c.target_labeled,
                    domain: Domain::Target,
                    class_count: Some(source.class_count()),
                },
            )?;
            if source.dim() != target.dim() {
                return Err(CliError::Config(format!(
                    "data: source has {} features but target has {}",
                    source.dim(),
                    target.dim()
                )));
            }
            Ok(Loaded {
                target_labels: target.labels(),
                source,
                target,
            })
        }
    }
}

fn gaussian(cfg: &ExperimentConfig, command: Command) -> Result<&GaussianShiftSpec, CliError> {
    match &cfg.data {
        DataSpec::Gaussian(g) => Ok(g),
        DataSpec::Csv(_) => Err(CliError::Config(format!(
            "data.kind: {} needs the gaussian generator",
            command.name()
        ))),
    }
}

/// Everything one command produces before it is written out.
struct Outcome {
    metrics: String,
    models: Vec<ModelReport>,
    sets: Vec<OwnedSet>,
    extra: serde_json::Map<String, serde_json::Value>,
    files: Vec<(String, String)>,
    datasets: Vec<(String, Dataset)>,
}

struct OwnedSet {
    model: String,
    predictions: Vec<Prediction>,
    labels: Option<Vec<usize>>,
    ratios: Vec<f64>,
}

impl Outcome {
    fn new(metrics: String) -> Self {
        Self {
            metrics,
            models: Vec::new(),
            sets: Vec::new(),
            extra: serde_json::Map::new(),
            files: Vec::new(),
            datasets: Vec::new(),
        }
    }

    /// Scores `predictions` and records them under `name`.
    fn add(
        &mut self,
        name: &str,
        evaluated_on: &str,
        predictions: Vec<Prediction>,
        labels: &[usize],
        ratios: Vec<f64>,
        bins: usize,
    ) -> Result<(), CliError> {
        let class_count = predictions.first().map_or(0, |p| p.probs.len());
        let report = CalibrationReport::evaluate(&predictions, labels, bins)?;
        self.models.push(ModelReport {
            name: name.to_string(),
            class_count,
            evaluated_on: evaluated_on.to_string(),
            report,
        });
        self.sets.push(OwnedSet {
            model: name.to_string(),
            predictions,
            labels: Some(labels.to_vec()),
            ratios,
        });
        Ok(())
    }

    /// Scores a trained model on the labeled target, or on the source when the target has no labels.
    fn add_trained(
        &mut self,
        name: &str,
        trained: &Trained,
        mode: RatioMode,
        data: &Loaded,
        bins: usize,
    ) -> Result<(), CliError> {
        let (preds, ratios) = predict_dataset(&trained.clf, &trained.dom, mode, &data.target)?;
        match &data.target_labels {
            Some(labels) => self.add(name, "target", preds, labels, ratios, bins),
            None => {
                // Keep unlabeled target predictions, score on the source.
                self.sets.push(OwnedSet {
                    model: format!("{name}@target"),
                    predictions: preds,
                    labels: None,
                    ratios,
                });
                let (sp, sr) = predict_dataset(&trained.clf, &trained.dom, mode, &data.source)?;
                self.add(name, "source", sp, &labels_of(&data.source)?, sr, bins)
            }
        }
    }

    fn checkpoint(&mut self, trained: &Trained, cfg: &ExperimentConfig) -> Result<(), CliError> {
        let ck = Checkpoint {
            classifier: trained.clf.clone(),
            domain: trained.dom.clone(),
            train: cfg.train.clone(),
        };
        self.files.push(("model.json".into(), ck.to_json()?));
        Ok(())
    }
}

fn ssl_config(cfg: &ExperimentConfig) -> SslConfig {
    let s = &cfg.ssl;
    SslConfig {
        threshold: s.threshold,
        unlabeled_batch: s.unlabeled_batch.unwrap_or(cfg.train.batch_size),
        loss_weight: s.loss_weight,
        augmentation: s.augmentation,
        base: cfg.train.clone(),
    }
}

fn execute(command: Command, cfg: &ExperimentConfig, seeds: SeedPlan) -> Result<Outcome, CliError> {
    let bins = cfg.calibration.bins;
    let model = &cfg.model;
    match command {
        Command::Simulate => {
            let spec = gaussian(cfg, command)?;
            let d = generate_gaussian_shift(spec)?;
            let labels = labels_of(&d.target)?;
            let mut preds = Vec::with_capacity(d.target.len());
            let mut ratios = Vec::with_capacity(d.target.len());
            for s in d.target.samples() {
                let p = spec.label_probability(&s.features);
                preds.push(Prediction {
                    probs: vec![1.0 - p, p],
                    log_partition: 0.0,
                });
                ratios.push(d.true_ratio.ratio(&s.features));
            }
            let mean_ratio = ratios.iter().sum::<f64>() / ratios.len() as f64;
            let summary = serde_json::json!({
                "n_source": d.source.len(),
                "n_target": d.target.len(),
                "mean_target_true_ratio": mean_ratio,
            });
            let mut out = Outcome::new(jsonl(&[summary])?);
            out.add("bayes", "target", preds, &labels, ratios, bins)?;
            out.datasets.push(("source.csv".into(), d.source));
            out.datasets.push(("target.csv".into(), d.target));
            Ok(out)
        }
        Command::TrainDrl | Command::TrainErm => {
            let data = load(cfg)?;
            let (clf, dom) = model.build(data.source.dim(), data.source.class_count(), seeds.init)?;
            let (name, trained, mode) = if command == Command::TrainDrl {
                let t = train_end_to_end(&data.source, &data.target.without_labels(), clf, dom, &cfg.train)?;
                ("drl", t, RatioMode::Learned)
            } else {
                ("erm", train_erm(&data.source, clf, &cfg.train)?, RatioMode::Fixed(1.0))
            };
            let mut out = Outcome::new(jsonl(&trained.history)?);
            out.add_trained(name, &trained, mode, &data, bins)?;
            out.checkpoint(&trained, cfg)?;
            Ok(out)
        }
        Command::Drst => {
            let data = load(cfg)?;
            let (clf, dom) = model.build(data.source.dim(), data.source.class_count(), seeds.init)?;
            let opts = DrstOptions {
                ece_bins: bins,
                ..DrstOptions::new(model.r)
            };
            let res = run_drst(
                &data.source,
                &data.target.without_labels(),
                &cfg.schedule,
                &cfg.train,
                opts,
                clf,
                dom,
                data.target_labels.as_deref(),
            )?;
            let mut out = Outcome::new(jsonl(&res.rounds)?);
            out.add_trained("drst", &res.trained, opts.ratios, &data, bins)?;
            out.checkpoint(&res.trained, cfg)?;
            Ok(out)
        }
        Command::Drssl => {
            let data = load(cfg)?;
            let labeled = match cfg.ssl.labeled_per_class {
                Some(k) => data
                    .source
                    .sample_per_class(k, &mut ChaCha8Rng::seed_from_u64(seeds.split))?,
                None => data.source.clone(),
            };
            let (clf, dom) = model.build(labeled.dim(), labeled.class_count(), seeds.init)?;
            let (name, opts) = match cfg.ssl.variant {
                SslVariant::Robust => ("drssl", SslOptions::robust(model.r)),
                SslVariant::Softmax => ("softmax_ssl", SslOptions::softmax()),
            };
            let res = run_drssl(
                &labeled,
                &data.target.without_labels(),
                &ssl_config(cfg),
                opts,
                clf,
                dom,
                data.target_labels.as_deref(),
            )?;
            let mut out = Outcome::new(jsonl(&res.history)?);
            out.add_trained(name, &res.trained, opts.ratios, &data, bins)?;
            out.checkpoint(&res.trained, cfg)?;
            Ok(out)
        }
        Command::PluginSim => {
            let spec = gaussian(cfg, command)?;
            let opts = PluginOptions {
                train_fraction: cfg.plugin.train_fraction,
                ridge: cfg.plugin.ridge,
                bounds: model.bounds()?,
            };
            let run = run_plugin_detailed(spec, &cfg.plugin.bandwidths, &opts)?;
            let labels = labels_of(&run.target)?;
            let mut out = Outcome::new(jsonl(&run.rows)?);
            for ((row, preds), ratios) in run.rows.iter().zip(run.predictions).zip(run.ratios) {
                out.add(&format!("plugin_h{}", row.h), "target", preds, &labels, ratios, bins)?;
            }
            out.files.push(("plugin.csv".into(), plugin_csv(&run.rows)));
            Ok(out)
        }
        Command::Calibrate => {
            let data = load(cfg)?;
            let labels = data.target_labels.clone().ok_or_else(|| {
                CliError::Config("data.target_labeled: calibrate needs target labels".into())
            })?;
            let (held, fit) = data.source.split(
                cfg.calibration.held_out_fraction,
                &mut ChaCha8Rng::seed_from_u64(seeds.split),
            );
            let c = compare_calibration(&fit, &held, &data.target, model, &cfg.train, seeds.init)?;
            let n = data.target.len();
            let mut out = Outcome::new(jsonl(&c.drl_model.history)?);
            out.add("erm", "target", c.erm, &labels, vec![1.0; n], bins)?;
            out.add("ts", "target", c.ts, &labels, vec![1.0; n], bins)?;
            out.add("drl", "target", c.drl, &labels, c.drl_ratios, bins)?;
            out.extra.insert("temperature".into(), c.temperature.into());
            out.checkpoint(&c.drl_model, cfg)?;
            Ok(out)
        }
    }
}

/// Runs `command` and writes its outputs. Returns the written paths.
pub fn run(command: Command, cfg: ExperimentConfig, overrides: &Overrides) -> Result<Vec<PathBuf>, CliError> {
    let (cfg, seeds, out_dir) = resolve(cfg, overrides)?;
    let mut dir = RunDir::open(&out_dir)?;
    let outcome = execute(command, &cfg, seeds)?;

    let name = cfg.name.clone().unwrap_or_else(|| command.name().to_string());
    let report = Report {
        tool: TOOL,
        version: VERSION,
        command: command.name(),
        name: &name,
        seed: cfg.seed,
        seeds,
        config: &cfg,
        models: outcome.models,
        extra: outcome.extra,
    };
    dir.write("metrics.jsonl", &outcome.metrics)?;
    dir.write("report.json", serde_json::to_string_pretty(&report)? + "\n")?;
    let bins: Vec<(&str, &[_])> = report
        .models
        .iter()
        .map(|m| (m.name.as_str(), m.report.bins.as_slice()))
        .collect();
    dir.write("reliability.csv", reliability_csv(&bins))?;
    let sets: Vec<PredictionSet<'_>> = outcome
        .sets
        .iter()
        .map(|s| PredictionSet {
            model: &s.model,
            predictions: &s.predictions,
            labels: s.labels.as_deref(),
            ratios: &s.ratios,
        })
        .collect();
    dir.write("predictions.csv", predictions_csv(&sets))?;
    for (file, body) in &outcome.files {
        dir.write(file, body)?;
    }
    for (file, data) in &outcome.datasets {
        write_csv(data, dir.stage(file))?;
    }
    dir.commit()
}
