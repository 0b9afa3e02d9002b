//! Command-line interface: `synth`, `pretrain`, `train`, `predict`, `evaluate`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{synth_clusters, synth_generate, Dataset, NoiseMode, SynthConfig};
use crate::dml::PretrainHistory;
use crate::error::{Error, Result};
use crate::eval::{self, EvalPair, QpMetric, Report};
use crate::gp::{PredictiveDistribution, SurvivalDenominator};
use crate::model::{self, CheckpointKind, EpochLog, Model};
use crate::Prng;

#[derive(Debug, Parser)]
#[command(name = "dkaft", version, about = "Deep kernel accelerated failure time models")]
pub struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort as JSON Lines.
    Synth(SynthArgs),
    /// Metric-learning pretraining of the encoder alone.
    Pretrain(PretrainArgs),
    /// Train encoder and head end to end.
    Train(TrainArgs),
    /// Write one predictive distribution per record.
    Predict(PredictArgs),
    /// Score predictions against observed times.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Total records generated; validation and test files are carved from them.
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    #[arg(long, default_value_t = 6)]
    pub n_sta: usize,
    #[arg(long, default_value_t = 4)]
    pub n_seq: usize,
    #[arg(long, default_value_t = 1)]
    pub t_min: usize,
    #[arg(long, default_value_t = 20)]
    pub t_max: usize,
    /// homoscedastic | heteroscedastic
    #[arg(long, default_value = "homoscedastic")]
    pub noise: String,
    #[arg(long, default_value_t = 0.3)]
    pub noise_sd: f64,
    #[arg(long, default_value_t = 0.0)]
    pub censor_frac: f64,
    /// Three separated groups instead of the regression task.
    #[arg(long)]
    pub clusters: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, requires = "val_frac")]
    pub val_out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    pub val_frac: f64,
    #[arg(long, requires = "test_frac")]
    pub test_out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    pub test_frac: f64,
}

/// Run-configuration overrides. Every key of the config file has a flag of
/// the same name.
#[derive(Debug, Clone, Default, Args)]
pub struct RunFlags {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<String>,
    /// exact | svgp | ppgp | linear
    #[arg(long)]
    pub head: Option<String>,
    /// none | dml
    #[arg(long)]
    pub pretrain: Option<String>,
    /// Use σ_f + σ_obs as the survival scale instead of √(σ_f² + σ_obs²).
    #[arg(long)]
    pub sd_sum_survival: bool,
    #[arg(long)]
    pub n_sta_repr: Option<String>,
    #[arg(long)]
    pub n_seq_emb: Option<String>,
    #[arg(long)]
    pub n_seq_repr: Option<String>,
    #[arg(long)]
    pub num_inducing: Option<String>,
    #[arg(long)]
    pub learning_rate: Option<String>,
    #[arg(long)]
    pub epochs: Option<String>,
    #[arg(long)]
    pub batch_size: Option<String>,
    #[arg(long)]
    pub dml_bins: Option<String>,
    #[arg(long)]
    pub dml_margin: Option<String>,
    #[arg(long)]
    pub dml_patience: Option<String>,
    #[arg(long)]
    pub dml_max_epochs: Option<String>,
    #[arg(long)]
    pub dml_batch_size: Option<String>,
    #[arg(long)]
    pub dml_learning_rate: Option<String>,
    #[arg(long)]
    pub dropout_rate: Option<String>,
    #[arg(long)]
    pub survival_denominator: Option<String>,
    #[arg(long)]
    pub max_exact_n: Option<String>,
}

impl RunFlags {
    /// Config file (or defaults) with flags applied on top.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let overrides = [
            ("seed", &self.seed),
            ("head", &self.head),
            ("pretrain", &self.pretrain),
            ("n_sta_repr", &self.n_sta_repr),
            ("n_seq_emb", &self.n_seq_emb),
            ("n_seq_repr", &self.n_seq_repr),
            ("num_inducing", &self.num_inducing),
            ("learning_rate", &self.learning_rate),
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("dml_bins", &self.dml_bins),
            ("dml_margin", &self.dml_margin),
            ("dml_patience", &self.dml_patience),
            ("dml_max_epochs", &self.dml_max_epochs),
            ("dml_batch_size", &self.dml_batch_size),
            ("dml_learning_rate", &self.dml_learning_rate),
            ("dropout_rate", &self.dropout_rate),
            ("survival_denominator", &self.survival_denominator),
            ("max_exact_n", &self.max_exact_n),
        ];
        for (key, value) in overrides {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        if self.sd_sum_survival {
            cfg.survival_denominator = SurvivalDenominator::SdSum;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    /// Encoder-only checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// MAP@R history CSV (default: next to the checkpoint).
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunFlags,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch CSV log (default: next to the checkpoint).
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Start from a pretrained encoder instead of a random one.
    #[arg(long)]
    pub encoder_checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunFlags,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Monte Carlo dropout predictions (linear head).
    #[arg(long)]
    pub mc_dropout: bool,
    #[arg(long, default_value_t = eval::DEFAULT_MC_PASSES)]
    pub passes: usize,
    #[arg(long, default_value_t = eval::DEFAULT_MC_DROPOUT_RATE)]
    pub dropout_rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// JSON report (default: next to the predictions).
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Quantile-performance CSV.
    #[arg(long)]
    pub qp: Option<PathBuf>,
    /// Residual ECDF CSV.
    #[arg(long)]
    pub ecdf: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub quantiles: usize,
}

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub id: String,
    pub mu: f64,
    pub sigma_f2: f64,
    pub sigma_obs2: f64,
    pub z_hat: f64,
}

impl PredictionRow {
    pub fn distribution(&self) -> PredictiveDistribution {
        PredictiveDistribution::new(self.mu, self.sigma_f2, self.sigma_obs2)
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_stem().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(Error::create(path)?))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Pretrain(a) => cmd_pretrain(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::Evaluate(a) => cmd_evaluate(&a).map(|_| ()),
    }
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let data = if a.clusters {
        synth_clusters(a.n, a.n_sta, a.n_seq, a.seed)?
    } else {
        let noise = match a.noise.as_str() {
            "homoscedastic" => NoiseMode::Homoscedastic,
            "heteroscedastic" => NoiseMode::Heteroscedastic,
            other => {
                return Err(Error::Config(format!(
                    "unknown noise mode {other:?} (expected homoscedastic|heteroscedastic)"
                )))
            }
        };
        let cfg = SynthConfig {
            n: a.n,
            n_sta: a.n_sta,
            n_seq: a.n_seq,
            t_min: a.t_min,
            t_max: a.t_max,
            noise,
            censor_frac: a.censor_frac,
            noise_sd: a.noise_sd,
        };
        synth_generate(&cfg, a.seed)?
    };
    let fracs = [
        if a.val_out.is_some() { a.val_frac } else { 0.0 },
        if a.test_out.is_some() { a.test_frac } else { 0.0 },
    ];
    if fracs.iter().any(|f| !(0.0..1.0).contains(f)) || fracs[0] + fracs[1] >= 1.0 {
        return Err(Error::Config(format!("invalid val/test fractions {fracs:?}")));
    }
    let n = data.len();
    let n_val = (fracs[0] * n as f64).round() as usize;
    let n_test = (fracs[1] * n as f64).round() as usize;
    let n_train = n - n_val - n_test;
    if n_train == 0 {
        return Err(Error::Config("no records left for the training file".into()));
    }
    let range = |lo: usize, hi: usize| data.subset(&(lo..hi).collect::<Vec<_>>());
    range(0, n_train).write_jsonl(&a.out)?;
    if let Some(p) = &a.val_out {
        range(n_train, n_train + n_val).write_jsonl(p)?;
    }
    if let Some(p) = &a.test_out {
        range(n_train + n_val, n).write_jsonl(p)?;
    }
    Ok(())
}

pub fn write_history_csv(path: &Path, h: &PretrainHistory) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "epoch,train_loss,val_map_at_r")?;
    writeln!(w, "0,,{}", h.initial_map_at_r)?;
    for e in &h.epochs {
        writeln!(w, "{},{},{}", e.epoch, e.train_loss, e.val_map_at_r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_training_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "epoch,train_loss,val_loglik,wall_ms")?;
    for e in log {
        writeln!(w, "{},{},{},{:.3}", e.epoch, e.train_loss, e.val_loglik, e.wall_ms)?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_pretrain(a: &PretrainArgs) -> Result<()> {
    let cfg = a.run.resolve()?;
    let train = Dataset::load_jsonl(&a.train)?;
    let val = Dataset::load_jsonl(&a.val)?;
    let (model, history) = model::pretrain_encoder(&cfg, &train, &val)?;
    model.save(&a.out, CheckpointKind::Encoder)?;
    let hist = a.history.clone().unwrap_or_else(|| sibling(&a.out, ".map_at_r.csv"));
    write_history_csv(&hist, &history)?;
    log::info!(
        "best epoch {} with validation MAP@R {:.4}",
        history.best_epoch,
        history.best_map_at_r
    );
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = a.run.resolve()?;
    let train = Dataset::load_jsonl(&a.train)?;
    let val = Dataset::load_jsonl(&a.val)?;
    let init = a.encoder_checkpoint.as_ref().map(Model::load).transpose()?;
    let out = model::train(&cfg, &train, &val, init.as_ref())?;
    out.model.save(&a.out, CheckpointKind::Model)?;
    let log_path = a.log.clone().unwrap_or_else(|| sibling(&a.out, ".log.csv"));
    write_training_log(&log_path, &out.log)?;
    if let Some(h) = &out.pretrain {
        write_history_csv(&sibling(&a.out, ".map_at_r.csv"), h)?;
    }
    log::info!("kept epoch {}", out.best_epoch);
    Ok(())
}

pub fn cmd_predict(a: &PredictArgs) -> Result<()> {
    let model = Model::load(&a.checkpoint)?;
    let data = Dataset::load_jsonl(&a.data)?;
    let preds = if a.mc_dropout {
        let mut rng = Prng::seed_from_u64(a.seed);
        eval::mc_dropout_predict(&model, &data.records, a.passes, a.dropout_rate, &mut rng)?
    } else {
        model.predict(&data.records)?
    };
    write_predictions(&a.out, &data, &preds)
}

pub fn write_predictions(path: &Path, data: &Dataset, preds: &[PredictiveDistribution]) -> Result<()> {
    let mut w = create(path)?;
    for (r, p) in data.records.iter().zip(preds) {
        let row = PredictionRow {
            id: r.id.clone(),
            mu: p.mu,
            sigma_f2: p.sigma_f2,
            sigma_obs2: p.sigma_obs2,
            z_hat: eval::point_prediction(p),
        };
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(Error::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(rows)
}

/// Align predictions with records by id; any id present on one side only is
/// an error.
pub fn pair_up(data: &Dataset, rows: &[PredictionRow]) -> Result<Vec<EvalPair>> {
    let by_id: HashMap<&str, &PredictionRow> = rows.iter().map(|r| (r.id.as_str(), r)).collect();
    let missing: Vec<&str> = data
        .records
        .iter()
        .map(|r| r.id.as_str())
        .filter(|id| !by_id.contains_key(id))
        .collect();
    let known: HashMap<&str, ()> = data.records.iter().map(|r| (r.id.as_str(), ())).collect();
    let extra: Vec<&str> = rows
        .iter()
        .map(|r| r.id.as_str())
        .filter(|id| !known.contains_key(id))
        .collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(Error::Data(format!(
            "prediction ids do not match data ids; missing predictions: {missing:?}; unknown ids: {extra:?}"
        )));
    }
    Ok(data
        .records
        .iter()
        .map(|r| EvalPair::new(r, &by_id[r.id.as_str()].distribution()))
        .collect())
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<Report> {
    let data = Dataset::load_jsonl(&a.data)?;
    let rows = read_predictions(&a.predictions)?;
    let pairs = pair_up(&data, &rows)?;
    let report = Report::compute(&pairs)?;
    let mad_curve = eval::qp_curve(&pairs, a.quantiles, QpMetric::Mad)?;
    let rmse_curve = eval::qp_curve(&pairs, a.quantiles, QpMetric::Rmse)?;
    let (ecdf, _) = eval::residual_ecdf_ks(&pairs)?;

    let report_path = a.report.clone().unwrap_or_else(|| sibling(&a.predictions, ".report.json"));
    let mut w = create(&report_path)?;
    serde_json::to_writer_pretty(&mut w, &report)?;
    w.write_all(b"\n")?;
    w.flush()?;

    let mut w = create(&a.qp.clone().unwrap_or_else(|| sibling(&a.predictions, ".qp.csv")))?;
    writeln!(w, "q,mad_q,rmse_q,n_q")?;
    for (m, r) in mad_curve.points.iter().zip(&rmse_curve.points) {
        writeln!(w, "{},{},{},{}", m.q, m.value, r.value, m.n)?;
    }
    w.flush()?;

    let mut w = create(&a.ecdf.clone().unwrap_or_else(|| sibling(&a.predictions, ".ecdf.csv")))?;
    writeln!(w, "residual,ecdf,normal_cdf")?;
    for p in &ecdf {
        writeln!(w, "{},{},{}", p.residual, p.ecdf, p.normal_cdf)?;
    }
    w.flush()?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(report)
}
