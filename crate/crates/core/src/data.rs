//! Patient records, JSON Lines ingestion, splits and synthetic cohorts.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

/// Generator-side truth kept next to synthetic records for oracle checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Noise-free mean of log time.
    pub mean: f64,
    /// Standard deviation of the log-time noise.
    pub sd: f64,
    /// Log of the event time before censoring.
    pub log_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: String,
    #[serde(rename = "static")]
    pub static_features: Vec<f64>,
    pub sequence: Vec<Vec<f64>>,
    /// Time to event or censoring, in days.
    pub time: f64,
    /// `true` when the event was observed, `false` when right-censored.
    #[serde(with = "event_flag")]
    pub event: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<GroundTruth>,
}

mod event_flag {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(u8::from(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        match serde_json::Value::deserialize(d)? {
            serde_json::Value::Bool(b) => Ok(b),
            serde_json::Value::Number(n) if n.as_u64() == Some(1) => Ok(true),
            serde_json::Value::Number(n) if n.as_u64() == Some(0) => Ok(false),
            other => Err(de::Error::custom(format!("event must be 0 or 1, got {other}"))),
        }
    }
}

impl PatientRecord {
    pub fn log_time(&self) -> f64 {
        self.time.ln()
    }

    pub fn seq_len(&self) -> usize {
        self.sequence.len()
    }

    pub fn validate(&self, n_sta: usize, n_seq: usize) -> Result<()> {
        let fail = |msg: String| Err(Error::Data(format!("record {:?}: {msg}", self.id)));
        if !(self.time > 0.0) || !self.time.is_finite() {
            return fail(format!("time must be positive, got {}", self.time));
        }
        if self.static_features.len() != n_sta {
            return fail(format!(
                "expected {n_sta} static features, got {}",
                self.static_features.len()
            ));
        }
        if self.sequence.is_empty() {
            return fail("sequence must have at least one row".into());
        }
        if let Some(row) = self.sequence.iter().find(|r| r.len() != n_seq) {
            return fail(format!("expected {n_seq} sequential features, got {}", row.len()));
        }
        let finite = self.static_features.iter().all(|v| v.is_finite())
            && self.sequence.iter().flatten().all(|v| v.is_finite());
        if !finite {
            return fail("non-finite feature value".into());
        }
        Ok(())
    }
}

/// Per-feature mean and standard deviation, computed on training records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub static_mean: Vec<f64>,
    pub static_std: Vec<f64>,
    pub seq_mean: Vec<f64>,
    pub seq_std: Vec<f64>,
}

const STD_FLOOR: f64 = 1e-8;

fn mean_std<'a>(dim: usize, rows: impl Iterator<Item = &'a [f64]>) -> (Vec<f64>, Vec<f64>) {
    let mut n = 0usize;
    let mut mean = vec![0.0; dim];
    let mut m2 = vec![0.0; dim];
    for row in rows {
        n += 1;
        for (k, &x) in row.iter().enumerate() {
            let delta = x - mean[k];
            mean[k] += delta / n as f64;
            m2[k] += delta * (x - mean[k]);
        }
    }
    let std = m2
        .iter()
        .map(|s| if n > 0 { (s / n as f64).sqrt() } else { 0.0 })
        .collect();
    (mean, std)
}

impl Standardization {
    pub fn fit(records: &[PatientRecord], n_sta: usize, n_seq: usize) -> Self {
        let (static_mean, static_std) =
            mean_std(n_sta, records.iter().map(|r| r.static_features.as_slice()));
        let (seq_mean, seq_std) = mean_std(
            n_seq,
            records.iter().flat_map(|r| r.sequence.iter().map(Vec::as_slice)),
        );
        Standardization {
            static_mean,
            static_std,
            seq_mean,
            seq_std,
        }
    }

    pub fn apply(&self, record: &PatientRecord) -> PatientRecord {
        let z = |x: f64, m: f64, s: f64| (x - m) / s.max(STD_FLOOR);
        let mut out = record.clone();
        for (k, x) in out.static_features.iter_mut().enumerate() {
            *x = z(*x, self.static_mean[k], self.static_std[k]);
        }
        for row in &mut out.sequence {
            for (k, x) in row.iter_mut().enumerate() {
                *x = z(*x, self.seq_mean[k], self.seq_std[k]);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<PatientRecord>,
    pub n_sta: usize,
    pub n_seq: usize,
}

impl Dataset {
    /// Validates dimensions and times against the first record.
    pub fn new(records: Vec<PatientRecord>) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| Error::Data("empty dataset".into()))?;
        let n_sta = first.static_features.len();
        let n_seq = first.sequence.first().map_or(0, Vec::len);
        if n_sta == 0 || n_seq == 0 {
            return Err(Error::Data(format!(
                "record {:?}: static and sequential feature dimensions must be at least 1",
                first.id
            )));
        }
        for r in &records {
            r.validate(n_sta, n_seq)?;
        }
        Ok(Dataset {
            records,
            n_sta,
            n_seq,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn subset(&self, index: &[usize]) -> Dataset {
        Dataset {
            records: index.iter().map(|&i| self.records[i].clone()).collect(),
            n_sta: self.n_sta,
            n_seq: self.n_seq,
        }
    }

    pub fn log_times(&self) -> Vec<f64> {
        self.records.iter().map(PatientRecord::log_time).collect()
    }

    pub fn standardization(&self) -> Standardization {
        Standardization::fit(&self.records, self.n_sta, self.n_seq)
    }

    /// Standardize with statistics computed elsewhere (normally the training split).
    pub fn standardize(&self, stats: &Standardization) -> Dataset {
        Dataset {
            records: self.records.iter().map(|r| stats.apply(r)).collect(),
            n_sta: self.n_sta,
            n_seq: self.n_seq,
        }
    }

    pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let reader = BufReader::new(Error::open(path)?);
        let mut records = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: PatientRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })?;
            records.push(rec);
        }
        Dataset::new(records)
    }

    /// One record per line. Floats use the shortest representation that
    /// parses back to the identical `f64`.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = BufWriter::new(Error::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Held-out test indices plus `k` cross-validation folds over the rest.
#[derive(Debug, Clone, PartialEq)]
pub struct Folds {
    pub test: Vec<usize>,
    pub folds: Vec<Vec<usize>>,
}

impl Folds {
    /// `(train, validation)` indices for rotation `k`.
    pub fn train_val(&self, k: usize) -> (Vec<usize>, Vec<usize>) {
        let train = self
            .folds
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != k)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        (train, self.folds[k].clone())
    }
}

pub fn split(n: usize, test_frac: f64, k_folds: usize, seed: u64) -> Result<Folds> {
    if !(test_frac > 0.0 && test_frac < 1.0) {
        return Err(Error::Config(format!("test_frac must be in (0,1), got {test_frac}")));
    }
    if k_folds < 2 {
        return Err(Error::Config(format!("k_folds must be at least 2, got {k_folds}")));
    }
    let n_test = ((n as f64) * test_frac).round() as usize;
    if n_test == 0 || n - n_test.min(n) < k_folds {
        return Err(Error::Data(format!(
            "dataset of {n} records too small for test_frac {test_frac} and {k_folds} folds"
        )));
    }
    let mut index: Vec<usize> = (0..n).collect();
    index.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = index[..n_test].to_vec();
    let rest = &index[n_test..];
    let folds = (0..k_folds)
        .map(|k| rest.iter().skip(k).step_by(k_folds).copied().collect())
        .collect();
    Ok(Folds { test, folds })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseMode {
    Homoscedastic,
    Heteroscedastic,
}

/// Synthetic longitudinal cohort generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub n_sta: usize,
    pub n_seq: usize,
    pub t_min: usize,
    pub t_max: usize,
    pub noise: NoiseMode,
    pub censor_frac: f64,
    /// Noise level of the homoscedastic mode.
    pub noise_sd: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 2000,
            n_sta: 6,
            n_seq: 4,
            t_min: 1,
            t_max: 20,
            noise: NoiseMode::Homoscedastic,
            censor_frac: 0.0,
            noise_sd: 0.3,
        }
    }
}

/// Index of the static feature that drives heteroscedastic noise.
pub const NOISE_FEATURE: usize = 0;
const AR_COEF: f64 = 0.8;
const LATENT_DRIVERS: usize = 2;
const BASE_LOG_TIME: f64 = 5.0;

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n == 0 || self.n_sta == 0 || self.n_seq == 0 {
            return bad("n, n_sta and n_seq must be at least 1".into());
        }
        if self.t_min == 0 || self.t_min > self.t_max {
            return bad(format!("invalid sequence length range [{}, {}]", self.t_min, self.t_max));
        }
        if !(0.0..1.0).contains(&self.censor_frac) {
            return bad(format!("censor_frac must be in [0,1), got {}", self.censor_frac));
        }
        if !(self.noise_sd > 0.0) {
            return bad(format!("noise_sd must be positive, got {}", self.noise_sd));
        }
        Ok(())
    }

    /// Standard deviation of the log-time noise for a static vector.
    pub fn noise_level(&self, x_sta: &[f64]) -> f64 {
        match self.noise {
            NoiseMode::Homoscedastic => self.noise_sd,
            NoiseMode::Heteroscedastic => stats::softplus(1.5 * x_sta[NOISE_FEATURE] - 0.5),
        }
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Fixed weights of the true mean function, drawn once per seed.
struct MeanFunction {
    w_static: Vec<f64>,
    w_seq: Vec<f64>,
    loading: Vec<Vec<f64>>,
}

impl MeanFunction {
    fn draw(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Self {
        let s_sta = 0.6 / (cfg.n_sta as f64).sqrt();
        let s_seq = 1.0 / (cfg.n_seq as f64).sqrt();
        MeanFunction {
            w_static: (0..cfg.n_sta).map(|_| s_sta * normal(rng)).collect(),
            w_seq: (0..cfg.n_seq).map(|_| s_seq * normal(rng)).collect(),
            loading: (0..cfg.n_seq)
                .map(|_| (0..LATENT_DRIVERS).map(|_| normal(rng)).collect())
                .collect(),
        }
    }

    fn eval(&self, x_sta: &[f64], seq: &[Vec<f64>]) -> f64 {
        let lin: f64 = self.w_static.iter().zip(x_sta).map(|(w, x)| w * x).sum();
        let t = seq.len() as f64;
        let seq_term: f64 = self
            .w_seq
            .iter()
            .enumerate()
            .map(|(k, w)| w * seq.iter().map(|row| row[k].tanh()).sum::<f64>() / t)
            .sum();
        let wave = 0.5 * x_sta[x_sta.len() - 1].sin();
        BASE_LOG_TIME + lin + seq_term + wave
    }
}

fn ar_sequence(cfg: &SynthConfig, mf: &MeanFunction, len: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let innov = (1.0 - AR_COEF * AR_COEF).sqrt();
    let mut state: Vec<f64> = (0..LATENT_DRIVERS).map(|_| normal(rng)).collect();
    let mut seq = Vec::with_capacity(len);
    for _ in 0..len {
        let row = (0..cfg.n_seq)
            .map(|k| {
                let l: f64 = mf.loading[k].iter().zip(&state).map(|(a, s)| a * s).sum();
                l + 0.1 * normal(rng)
            })
            .collect();
        seq.push(row);
        for s in &mut state {
            *s = AR_COEF * *s + innov * normal(rng);
        }
    }
    seq
}

/// Generate a synthetic cohort. Static features are standard normal,
/// sequences follow a per-record AR(1) latent driver through a fixed
/// loading matrix, and log time is a nonlinear function of both plus
/// Gaussian noise.
pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mf = MeanFunction::draw(cfg, &mut rng);
    let mut records = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let x_sta: Vec<f64> = (0..cfg.n_sta).map(|_| normal(&mut rng)).collect();
        let len = rng.random_range(cfg.t_min..=cfg.t_max);
        let sequence = ar_sequence(cfg, &mf, len, &mut rng);
        let mean = mf.eval(&x_sta, &sequence);
        let sd = cfg.noise_level(&x_sta);
        let log_time = mean + sd * normal(&mut rng);
        let mut time = log_time.exp();
        let mut event = true;
        if rng.random::<f64>() < cfg.censor_frac {
            time *= rng.random::<f64>().max(f64::MIN_POSITIVE);
            event = false;
        }
        records.push(PatientRecord {
            id: format!("p{i:05}"),
            static_features: x_sta,
            sequence,
            time,
            event,
            truth: Some(GroundTruth { mean, sd, log_time }),
        });
    }
    Dataset::new(records)
}

/// Three well-separated groups for metric-learning checks. The group shows
/// in static feature 0 (centres 10 within-group sd apart) and is buried
/// among standard-normal distractors; log times differ by group.
pub fn synth_clusters(n: usize, n_sta: usize, n_seq: usize, seed: u64) -> Result<Dataset> {
    if n < 3 || n_sta < 1 || n_seq < 1 {
        return Err(Error::Config("clusters need n >= 3 and positive dimensions".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let within = 0.1;
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let group = i % 3;
        let centre = group as f64 - 1.0;
        let mut x_sta: Vec<f64> = (0..n_sta).map(|_| normal(&mut rng)).collect();
        x_sta[0] = centre + within * normal(&mut rng);
        let len = rng.random_range(1..=10);
        let sequence = (0..len)
            .map(|_| (0..n_seq).map(|_| normal(&mut rng)).collect())
            .collect();
        let mean = 4.0 + 1.5 * group as f64;
        let log_time = mean + 0.05 * normal(&mut rng);
        records.push(PatientRecord {
            id: format!("c{i:05}"),
            static_features: x_sta,
            sequence,
            time: log_time.exp(),
            event: true,
            truth: Some(GroundTruth {
                mean,
                sd: 0.05,
                log_time,
            }),
        });
    }
    Dataset::new(records)
}
