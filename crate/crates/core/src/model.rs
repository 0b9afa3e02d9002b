//! End-to-end model: standardization, encoder, head, training loop and
//! checkpoints.

use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParameterStore, Tape, Tensor};
use crate::config::{PretrainMode, RunConfig};
use crate::data::{Dataset, PatientRecord, Standardization};
use crate::dml::{self, PretrainHistory};
use crate::encoder::{self, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::gp::{self, HeadKind, Hyper, LinearAftHead, PredictiveDistribution, SurvivalDenominator};
use crate::stats::{gaussian_logpdf, log_ndtr};
use crate::Prng;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Frozen latent vectors and centered log times of the observed training
/// records, kept for exact-GP prediction.
pub const EXACT_H: &str = "exact.h_train";
pub const EXACT_Y: &str = "exact.y_train";

/// Records encoded per tape when predicting.
const PREDICT_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: RunConfig,
    pub encoder: EncoderConfig,
    pub standardization: Standardization,
    /// Mean training log time, subtracted from targets before the head.
    pub target_offset: f64,
    pub store: ParameterStore,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loglik: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub pretrain: Option<PretrainHistory>,
}

/// Censoring-aware log-likelihood of one log time under a prediction.
pub fn record_loglik(y: f64, event: bool, pred: &PredictiveDistribution, denominator: SurvivalDenominator) -> f64 {
    if event {
        gaussian_logpdf(y, pred.mu, pred.variance())
    } else {
        log_ndtr((pred.mu - y) / denominator.scale(pred.sigma_f2, pred.sigma_obs2))
    }
}

impl Model {
    /// Fresh encoder and head parameters. Inducing inputs are placeholders
    /// until [`Model::init_inducing`] is called.
    pub fn init(
        config: &RunConfig,
        n_sta: usize,
        n_seq: usize,
        standardization: Standardization,
        target_offset: f64,
        rng: &mut Prng,
    ) -> Result<Model> {
        config.validate()?;
        let enc = config.encoder(n_sta, n_seq);
        let mut store = ParameterStore::new();
        encoder::init_params(&enc, &mut store, rng)?;
        let d = enc.latent_dim();
        gp::init_kernel_params(&mut store, d)?;
        match config.head {
            HeadKind::Linear => gp::insert_linear_params(&mut store, d)?,
            HeadKind::Svgp | HeadKind::Ppgp => gp::insert_sparse_params(&mut store, config.num_inducing, d)?,
            HeadKind::Exact => {}
        }
        Ok(Model {
            config: config.clone(),
            encoder: enc,
            standardization,
            target_offset,
            store,
        })
    }

    pub fn head(&self) -> HeadKind {
        self.config.head
    }

    /// Copy encoder weights from another model with the same encoder shape.
    pub fn copy_encoder_from(&mut self, other: &Model) -> Result<()> {
        if (other.encoder.n_sta_repr, other.encoder.n_seq_emb, other.encoder.n_seq_repr)
            != (self.encoder.n_sta_repr, self.encoder.n_seq_emb, self.encoder.n_seq_repr)
        {
            return Err(Error::Config(format!(
                "encoder checkpoint shape {:?} does not match config {:?}",
                other.encoder, self.encoder
            )));
        }
        for name in encoder::param_names() {
            self.store.set(&name, other.store.get(&name)?.clone())?;
        }
        Ok(())
    }

    fn check_dims(&self, records: &[PatientRecord]) -> Result<()> {
        for r in records {
            r.validate(self.encoder.n_sta, self.encoder.n_seq)?;
        }
        Ok(())
    }

    /// Latent vectors of already standardized records, without dropout.
    pub fn latent_standardized(&self, records: &[PatientRecord]) -> Result<Tensor> {
        let d = self.encoder.latent_dim();
        let mut data = Vec::with_capacity(records.len() * d);
        for chunk in records.chunks(PREDICT_CHUNK) {
            let refs: Vec<&PatientRecord> = chunk.iter().collect();
            data.extend(encoder::encode(&self.encoder, &self.store, &refs)?.into_data());
        }
        Tensor::new(records.len(), d, data)
    }

    fn head_predict(&self, h: &Tensor) -> Result<Vec<PredictiveDistribution>> {
        let mut preds = match self.config.head {
            HeadKind::Linear => gp::linear_predict(&self.store, h)?,
            HeadKind::Svgp | HeadKind::Ppgp => gp::svgp_predict(&self.store, h)?,
            HeadKind::Exact => {
                let y = self.store.get(EXACT_Y)?.data().to_vec();
                gp::exact_gp_predict(self.store.get(EXACT_H)?, &y, h, &Hyper::from_store(&self.store)?)?
            }
        };
        for p in &mut preds {
            p.mu += self.target_offset;
        }
        Ok(preds)
    }

    pub fn predict_standardized(&self, records: &[PatientRecord]) -> Result<Vec<PredictiveDistribution>> {
        if records.is_empty() {
            return Ok(Vec::new());
        }
        self.head_predict(&self.latent_standardized(records)?)
    }

    /// Predictive distributions over log time for raw (unstandardized) records.
    pub fn predict(&self, records: &[PatientRecord]) -> Result<Vec<PredictiveDistribution>> {
        self.check_dims(records)?;
        let std: Vec<PatientRecord> = records.iter().map(|r| self.standardization.apply(r)).collect();
        self.predict_standardized(&std)
    }

    /// Monte Carlo dropout for the linear head: `passes` stochastic forward
    /// passes at dropout `rate`. `μ` is the mean of the per-pass means and
    /// `σ_f²` their variance.
    pub fn predict_mc_dropout(
        &self,
        records: &[PatientRecord],
        passes: usize,
        rate: f64,
        rng: &mut Prng,
    ) -> Result<Vec<PredictiveDistribution>> {
        if self.config.head != HeadKind::Linear {
            return Err(Error::Config(format!(
                "MC dropout applies to the linear head, checkpoint head is {}",
                self.config.head
            )));
        }
        if passes < 2 {
            return Err(Error::Config(format!("MC dropout needs at least 2 passes, got {passes}")));
        }
        let enc = EncoderConfig {
            dropout_rate: rate,
            ..self.encoder
        };
        enc.validate()?;
        self.check_dims(records)?;
        let std: Vec<PatientRecord> = records.iter().map(|r| self.standardization.apply(r)).collect();
        let n = std.len();
        let mut means = vec![Vec::with_capacity(passes); n];
        let mut noise2 = 0.0;
        for _ in 0..passes {
            let mut at = 0;
            for chunk in std.chunks(PREDICT_CHUNK) {
                let refs: Vec<&PatientRecord> = chunk.iter().collect();
                let tape = Tape::new();
                let bound = self.store.bind(&tape);
                let h = Encoder::bind(&enc, &tape, &bound)?.encode_batch(&refs, Some(&mut *rng))?;
                let head = LinearAftHead::bind(&bound)?;
                noise2 = head.noise_var.item();
                for &m in head.mean(h)?.value().data() {
                    means[at].push(m);
                    at += 1;
                }
            }
        }
        let p = passes as f64;
        Ok(means
            .iter()
            .map(|m| {
                // shifted by the first pass so identical passes give exactly 0
                let d: Vec<f64> = m.iter().map(|x| x - m[0]).collect();
                let mean = d.iter().sum::<f64>() / p;
                let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / p;
                PredictiveDistribution::new(m[0] + mean + self.target_offset, var, noise2)
            })
            .collect())
    }

    /// Draw inducing inputs from `pool` (standardized) and set `q` to the prior.
    pub fn init_inducing(&mut self, pool: &[PatientRecord], rng: &mut Prng) -> Result<()> {
        let refs: Vec<&PatientRecord> = pool.iter().collect();
        let m = self.config.num_inducing;
        gp::init_inducing(&refs, &self.encoder, &mut self.store, m, rng)
    }

    /// Re-encode the observed training records for exact-GP prediction.
    pub fn refresh_exact_train_set(&mut self, train: &[PatientRecord]) -> Result<()> {
        let observed: Vec<PatientRecord> = train.iter().filter(|r| r.event).cloned().collect();
        if observed.is_empty() {
            return Err(Error::Data("exact head needs at least one observed event".into()));
        }
        let h = self.latent_standardized(&observed)?;
        let y = Tensor::column(
            &observed
                .iter()
                .map(|r| r.log_time() - self.target_offset)
                .collect::<Vec<_>>(),
        );
        for (name, value) in [(EXACT_H, h), (EXACT_Y, y)] {
            if self.store.contains(name) {
                self.store.set(name, value)?;
            } else {
                self.store.insert(name, value)?;
                self.store.set_trainable(name, false)?;
            }
        }
        Ok(())
    }

    /// Mean censoring-aware log-likelihood of standardized records.
    pub fn mean_loglik_standardized(&self, records: &[PatientRecord]) -> Result<f64> {
        let preds = self.predict_standardized(records)?;
        let total: f64 = records
            .iter()
            .zip(&preds)
            .map(|(r, p)| record_loglik(r.log_time(), r.event, p, self.config.survival_denominator))
            .sum();
        Ok(total / records.len() as f64)
    }

    pub fn to_checkpoint(&self, kind: CheckpointKind) -> Checkpoint {
        let params = self
            .store
            .iter()
            .filter(|(name, _)| kind == CheckpointKind::Model || name.starts_with("enc."))
            .map(|(name, t)| NamedArray {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                trainable: self.store.is_trainable(name).unwrap_or(true),
                data: t.data().to_vec(),
            })
            .collect();
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            kind,
            config: self.config.clone(),
            encoder: self.encoder,
            standardization: self.standardization.clone(),
            target_offset: self.target_offset,
            params,
            rng: RngSummary {
                seed: self.config.seed,
                optimizer_steps: self.store.step_count(),
            },
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Model> {
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ck.format_version
            )));
        }
        ck.encoder.validate()?;
        let mut store = ParameterStore::new();
        for a in ck.params {
            let t = Tensor::from_shape(&a.shape, a.data)
                .map_err(|e| Error::Data(format!("checkpoint array {:?}: {e}", a.name)))?;
            store.insert(a.name.as_str(), t)?;
            store.set_trainable(&a.name, a.trainable)?;
        }
        Ok(Model {
            config: ck.config,
            encoder: ck.encoder,
            standardization: ck.standardization,
            target_offset: ck.target_offset,
            store,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>, kind: CheckpointKind) -> Result<()> {
        let path = path.as_ref();
        let mut w = BufWriter::new(Error::create(path)?);
        serde_json::to_writer(&mut w, &self.to_checkpoint(kind))?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Model> {
        let path = path.as_ref();
        let ck: Checkpoint = serde_json::from_reader(BufReader::new(Error::open(path)?))
            .map_err(|e| Error::Data(format!("{}: not a checkpoint: {e}", path.display())))?;
        Model::from_checkpoint(ck)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    /// Encoder and head.
    Model,
    /// Encoder weights only, as written by pretraining.
    Encoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RngSummary {
    pub seed: u64,
    pub optimizer_steps: u64,
}

/// Self-describing JSON checkpoint. Floats are written in the shortest form
/// that parses back to the same `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub config: RunConfig,
    pub encoder: EncoderConfig,
    pub standardization: Standardization,
    pub target_offset: f64,
    pub params: Vec<NamedArray>,
    pub rng: RngSummary,
}

fn prepare(config: &RunConfig, train: &Dataset, val: &Dataset) -> Result<(Dataset, Dataset, Model, Prng)> {
    config.validate()?;
    if (val.n_sta, val.n_seq) != (train.n_sta, train.n_seq) {
        return Err(Error::Data(format!(
            "validation dims ({}, {}) differ from training dims ({}, {})",
            val.n_sta, val.n_seq, train.n_sta, train.n_seq
        )));
    }
    let stats = train.standardization();
    let tr = train.standardize(&stats);
    let va = val.standardize(&stats);
    let y = tr.log_times();
    let offset = y.iter().sum::<f64>() / y.len() as f64;
    let mut rng = Prng::seed_from_u64(config.seed);
    let model = Model::init(config, train.n_sta, train.n_seq, stats, offset, &mut rng)?;
    Ok((tr, va, model, rng))
}

/// Metric-learning pretraining alone; returns an encoder-only model.
pub fn pretrain_encoder(config: &RunConfig, train: &Dataset, val: &Dataset) -> Result<(Model, PretrainHistory)> {
    let (tr, va, mut model, mut rng) = prepare(config, train, val)?;
    let history = dml::pretrain(&model.encoder, &mut model.store, &tr.records, &va.records, &config.dml(), &mut rng)?;
    Ok((model, history))
}

/// Train encoder and head end to end, keeping the parameters of the epoch
/// with the best validation log-likelihood. `init_encoder` replaces both the
/// random encoder initialization and any configured pretraining.
pub fn train(config: &RunConfig, train: &Dataset, val: &Dataset, init_encoder: Option<&Model>) -> Result<TrainOutcome> {
    let (tr, va, mut model, mut rng) = prepare(config, train, val)?;
    let n = tr.len();
    if config.head == HeadKind::Exact && n > config.max_exact_n {
        return Err(Error::Config(format!(
            "exact GP head refuses {n} training records (limit {}): cost grows as O(n^3); use svgp or ppgp",
            config.max_exact_n
        )));
    }
    let mut pretrain = None;
    if let Some(src) = init_encoder {
        model.copy_encoder_from(src)?;
    } else if config.pretrain == PretrainMode::Dml {
        let h = dml::pretrain(&model.encoder, &mut model.store, &tr.records, &va.records, &config.dml(), &mut rng)?;
        log::info!(
            "pretraining kept epoch {} (val MAP@R {:.4} from {:.4})",
            h.best_epoch,
            h.best_map_at_r,
            h.initial_map_at_r
        );
        pretrain = Some(h);
    }
    if config.head.is_sparse() {
        if config.num_inducing > n {
            return Err(Error::Config(format!(
                "num_inducing {} exceeds the {n} training records",
                config.num_inducing
            )));
        }
        model.init_inducing(&tr.records, &mut rng)?;
    }

    let y: Vec<f64> = tr.records.iter().map(|r| r.log_time() - model.target_offset).collect();
    let events: Vec<bool> = tr.records.iter().map(|r| r.event).collect();
    let batch_size = if config.head == HeadKind::Exact { n } else { config.batch_size.min(n) };
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ParameterStore)> = None;

    for epoch in 1..=config.epochs {
        let start = Instant::now();
        if config.head != HeadKind::Exact {
            order.shuffle(&mut rng);
        }
        let mut loss_total = 0.0;
        for batch in order.chunks(batch_size) {
            let records: Vec<&PatientRecord> = batch.iter().map(|&i| &tr.records[i]).collect();
            let yb: Vec<f64> = batch.iter().map(|&i| y[i]).collect();
            let eb: Vec<bool> = batch.iter().map(|&i| events[i]).collect();
            let tape = Tape::new();
            let bound = model.store.bind(&tape);
            let h = Encoder::bind(&model.encoder, &tape, &bound)?.encode_batch(&records, Some(&mut rng))?;
            let loss = gp::censored_objective(config.head, &bound, h, &yb, &eb, n, config.survival_denominator)?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::domain("train", format!("non-finite loss at epoch {epoch}")));
            }
            let grads = bound.gradients(&tape.backward(loss)?);
            model.store.adam_step(&grads, config.learning_rate)?;
            // sparse objectives are already scaled to the full training set
            loss_total += if config.head.is_sparse() {
                value * batch.len() as f64 / n as f64
            } else {
                value
            };
        }
        if config.head == HeadKind::Exact {
            model.refresh_exact_train_set(&tr.records)?;
        }
        let val_loglik = model.mean_loglik_standardized(&va.records)?;
        let entry = EpochLog {
            epoch,
            train_loss: loss_total / n as f64,
            val_loglik,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        log::info!(
            "epoch {epoch}: train_loss {:.5} val_loglik {:.5}",
            entry.train_loss,
            entry.val_loglik
        );
        log.push(entry);
        let improved = match &best {
            None => true,
            Some((b, _, _)) => val_loglik.is_finite() && val_loglik > *b,
        };
        if improved {
            best = Some((val_loglik, epoch, model.store.clone()));
        }
    }
    let (_, best_epoch, store) = best.ok_or_else(|| Error::Config("epochs must be positive".into()))?;
    model.store = store;
    model.store.reset_optimizer();
    Ok(TrainOutcome {
        model,
        log,
        best_epoch,
        pretrain,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthConfig};

    fn tiny_config(head: HeadKind) -> RunConfig {
        RunConfig {
            head,
            n_sta_repr: 2,
            n_seq_emb: 3,
            n_seq_repr: 4,
            num_inducing: 8,
            epochs: 3,
            batch_size: 16,
            seed: 5,
            ..RunConfig::default()
        }
    }

    fn tiny_data(n: usize, seed: u64) -> Dataset {
        let cfg = SynthConfig {
            n,
            n_sta: 3,
            n_seq: 2,
            t_max: 5,
            censor_frac: 0.3,
            ..SynthConfig::default()
        };
        synth_generate(&cfg, seed).unwrap()
    }

    #[test]
    fn every_head_trains_and_round_trips() {
        let train_set = tiny_data(40, 1);
        let val_set = tiny_data(15, 2);
        let dir = tempfile::tempdir().unwrap();
        for head in [HeadKind::Linear, HeadKind::Svgp, HeadKind::Ppgp, HeadKind::Exact] {
            let out = train(&tiny_config(head), &train_set, &val_set, None).unwrap();
            assert_eq!(out.log.len(), 3);
            let before = out.model.predict(&val_set.records).unwrap();
            assert!(before.iter().all(|p| p.mu.is_finite() && p.sigma_f2 >= 0.0 && p.sigma_obs2 > 0.0));
            let path = dir.path().join(format!("{head}.json"));
            out.model.save(&path, CheckpointKind::Model).unwrap();
            let loaded = Model::load(&path).unwrap();
            assert_eq!(loaded.store, {
                let mut s = out.model.store.clone();
                s.reset_optimizer();
                s
            });
            let after = loaded.predict(&val_set.records).unwrap();
            for (a, b) in before.iter().zip(&after) {
                assert_eq!(a.mu.to_bits(), b.mu.to_bits());
                assert_eq!(a.sigma_f2.to_bits(), b.sigma_f2.to_bits());
            }
        }
    }

    #[test]
    fn exact_head_guard() {
        let cfg = RunConfig {
            max_exact_n: 10,
            ..tiny_config(HeadKind::Exact)
        };
        let err = train(&cfg, &tiny_data(20, 1), &tiny_data(5, 2), None).unwrap_err();
        assert!(err.to_string().contains("O(n^3)"), "{err}");
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn mc_dropout_rate_zero_is_deterministic() {
        let out = train(&tiny_config(HeadKind::Linear), &tiny_data(30, 1), &tiny_data(10, 2), None).unwrap();
        let test = tiny_data(6, 3);
        let mut rng = Prng::seed_from_u64(1);
        let mc = out.model.predict_mc_dropout(&test.records, 5, 0.0, &mut rng).unwrap();
        let plain = out.model.predict(&test.records).unwrap();
        for (a, b) in mc.iter().zip(&plain) {
            assert_eq!(a.sigma_f2, 0.0);
            assert!((a.mu - b.mu).abs() < 1e-12);
        }
        let mc = out.model.predict_mc_dropout(&test.records, 5, 0.2, &mut rng).unwrap();
        assert!(mc.iter().all(|p| p.sigma_f2 > 0.0));
    }
}
