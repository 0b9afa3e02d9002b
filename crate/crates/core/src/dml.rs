//! Metric-learning pretraining of the encoder on histogram-bin pseudo-classes.

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, ParameterStore, Tape, Tensor, Var};
use crate::data::PatientRecord;
use crate::encoder::{self, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::stats::quantile_linear;
use crate::Prng;

/// Equal-frequency histogram over log targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinLabeler {
    /// The `B - 1` interior cut points, strictly ascending.
    pub edges: Vec<f64>,
}

impl BinLabeler {
    pub fn num_bins(&self) -> usize {
        self.edges.len() + 1
    }

    /// Bin of `y`: the number of edges at or below it.
    pub fn label(&self, y: f64) -> usize {
        self.edges.partition_point(|&e| e <= y)
    }
}

/// Fit `bins` equal-frequency bins and label every target.
pub fn bin_targets(y_log: &[f64], bins: usize) -> Result<(BinLabeler, Vec<usize>)> {
    if bins < 2 {
        return Err(Error::Config(format!("need at least 2 bins, got {bins}")));
    }
    let mut sorted = y_log.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    let too_few = || {
        Error::Data(format!(
            "{} distinct target values cannot fill {bins} equal-frequency bins; use fewer bins",
            distinct.len()
        ))
    };
    if distinct.len() < bins {
        return Err(too_few());
    }
    let edges: Vec<f64> = (1..bins)
        .map(|k| quantile_linear(&sorted, k as f64 / bins as f64))
        .collect();
    let labeler = BinLabeler { edges };
    let labels: Vec<usize> = y_log.iter().map(|&y| labeler.label(y)).collect();
    let mut counts = vec![0usize; bins];
    for &l in &labels {
        counts[l] += 1;
    }
    if labeler.edges.windows(2).any(|w| w[0] >= w[1]) || counts.contains(&0) {
        return Err(too_few());
    }
    Ok((labeler, labels))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// One triplet per ordered anchor-positive pair in `batch`, with a negative
/// drawn uniformly from the batch members of other classes.
pub fn mine_triplets(labels: &[usize], batch: &[usize], rng: &mut Prng) -> Vec<Triplet> {
    let mut out = Vec::new();
    for &a in batch {
        let negatives: Vec<usize> = batch
            .iter()
            .copied()
            .filter(|&j| labels[j] != labels[a])
            .collect();
        if negatives.is_empty() {
            continue;
        }
        for &p in batch {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            if let Some(&n) = negatives.choose(rng) {
                out.push(Triplet {
                    anchor: a,
                    positive: p,
                    negative: n,
                });
            }
        }
    }
    out
}

fn row_distance<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    a.sub(b)?.square()?.sum_axis(Axis::Cols)?.sqrt()
}

/// Mean over rows of `max(0, d(A,P) - d(A,N) + margin)` with Euclidean `d`.
pub fn triplet_loss<'t>(anchor: Var<'t>, positive: Var<'t>, negative: Var<'t>, margin: f64) -> Result<Var<'t>> {
    if margin < 0.0 {
        return Err(Error::Config(format!("triplet margin must be >= 0, got {margin}")));
    }
    row_distance(anchor, positive)?
        .sub(row_distance(anchor, negative)?)?
        .offset(margin)?
        .relu()?
        .mean()
}

/// Mean average precision at R over all queries whose class has another member.
pub fn map_at_r(embeddings: &Tensor, labels: &[usize]) -> Result<f64> {
    let n = embeddings.rows();
    if n < 2 || labels.len() != n {
        return Err(Error::Contract(format!(
            "map_at_r needs at least 2 labelled embeddings, got {n} rows and {} labels",
            labels.len()
        )));
    }
    let sq = |i: usize, j: usize| -> f64 {
        embeddings
            .row_slice(i)
            .iter()
            .zip(embeddings.row_slice(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    };
    let mut total = 0.0;
    let mut queries = 0usize;
    for q in 0..n {
        let r = labels.iter().enumerate().filter(|&(j, &l)| j != q && l == labels[q]).count();
        if r == 0 {
            continue;
        }
        let mut others: Vec<(f64, usize)> = (0..n).filter(|&j| j != q).map(|j| (sq(q, j), j)).collect();
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut hits = 0usize;
        let mut ap = 0.0;
        for (i, &(_, j)) in others.iter().take(r).enumerate() {
            if labels[j] == labels[q] {
                hits += 1;
                ap += hits as f64 / (i + 1) as f64;
            }
        }
        total += ap / r as f64;
        queries += 1;
    }
    if queries == 0 {
        return Err(Error::Contract("map_at_r: no class has two members".into()));
    }
    Ok(total / queries as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DmlConfig {
    pub bins: usize,
    pub margin: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
}

impl Default for DmlConfig {
    fn default() -> Self {
        DmlConfig {
            bins: 10,
            margin: 0.2,
            batch_size: 64,
            patience: 10,
            max_epochs: 200,
            learning_rate: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_map_at_r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainHistory {
    /// Validation MAP@R before the first update.
    pub initial_map_at_r: f64,
    pub epochs: Vec<PretrainEpoch>,
    /// Epoch whose parameters were kept; 0 means the initial weights.
    pub best_epoch: usize,
    pub best_map_at_r: f64,
}

fn val_map(cfg: &EncoderConfig, store: &ParameterStore, val: &[&PatientRecord], labels: &[usize]) -> Result<f64> {
    map_at_r(&encoder::encode(cfg, store, val)?, labels)
}

/// Minimize the triplet loss over the encoder parameters in `store`, keeping
/// the parameters of the epoch with the best validation MAP@R. Training stops
/// once `patience` epochs pass without improvement. Optimizer moments are
/// reset on return.
pub fn pretrain(
    enc: &EncoderConfig,
    store: &mut ParameterStore,
    train: &[PatientRecord],
    val: &[PatientRecord],
    cfg: &DmlConfig,
    rng: &mut Prng,
) -> Result<PretrainHistory> {
    if cfg.batch_size < 2 || cfg.max_epochs == 0 {
        return Err(Error::Config(format!(
            "pretraining needs batch_size >= 2 and max_epochs >= 1: {cfg:?}"
        )));
    }
    let y_train: Vec<f64> = train.iter().map(PatientRecord::log_time).collect();
    let (labeler, labels) = bin_targets(&y_train, cfg.bins)?;
    let val_refs: Vec<&PatientRecord> = val.iter().collect();
    let val_labels: Vec<usize> = val.iter().map(|r| labeler.label(r.log_time())).collect();

    let initial = val_map(enc, store, &val_refs, &val_labels)?;
    let mut history = PretrainHistory {
        initial_map_at_r: initial,
        epochs: Vec::new(),
        best_epoch: 0,
        best_map_at_r: initial,
    };
    let mut best_store = store.clone();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut since_best = 0usize;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(rng);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let triplets = mine_triplets(&labels, batch, rng);
            if triplets.is_empty() {
                continue;
            }
            let pos_of = |i: usize| batch.iter().position(|&b| b == i).unwrap_or(0);
            let records: Vec<&PatientRecord> = batch.iter().map(|&i| &train[i]).collect();
            let tape = Tape::new();
            let bound = store.bind(&tape);
            let encoder = Encoder::bind(enc, &tape, &bound)?;
            let h = encoder.encode_batch(&records, Some(rng))?;
            let pick = |f: fn(&Triplet) -> usize| -> Vec<usize> { triplets.iter().map(|t| pos_of(f(t))).collect() };
            let loss = triplet_loss(
                h.select_rows(&pick(|t| t.anchor))?,
                h.select_rows(&pick(|t| t.positive))?,
                h.select_rows(&pick(|t| t.negative))?,
                cfg.margin,
            )?;
            let grads = bound.gradients(&tape.backward(loss)?);
            store.adam_step(&grads, cfg.learning_rate)?;
            loss_sum += loss.item();
            batches += 1;
        }
        let map = val_map(enc, store, &val_refs, &val_labels)?;
        history.epochs.push(PretrainEpoch {
            epoch,
            train_loss: if batches > 0 { loss_sum / batches as f64 } else { 0.0 },
            val_map_at_r: map,
        });
        log::debug!("pretrain epoch {epoch}: val MAP@R {map:.4}");
        if map > history.best_map_at_r {
            history.best_map_at_r = map;
            history.best_epoch = epoch;
            best_store = store.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > cfg.patience {
                break;
            }
        }
    }
    *store = best_store;
    store.reset_optimizer();
    Ok(history)
}
