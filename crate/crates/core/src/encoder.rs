//! Static embedding plus GRU over the embedded sequence, concatenated into
//! one latent vector per record.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, Bound, ParameterStore, Tape, Tensor, Var};
use crate::data::PatientRecord;
use crate::error::{Error, Result};
use crate::Prng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_sta: usize,
    pub n_seq: usize,
    pub n_sta_repr: usize,
    pub n_seq_emb: usize,
    pub n_seq_repr: usize,
    pub dropout_rate: f64,
}

impl EncoderConfig {
    /// Latent sizes used for the progression-free-survival cohort (4, 32, 128).
    pub fn pfs(n_sta: usize, n_seq: usize) -> Self {
        EncoderConfig {
            n_sta,
            n_seq,
            n_sta_repr: 4,
            n_seq_emb: 32,
            n_seq_repr: 128,
            dropout_rate: 0.0,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.n_sta_repr + self.n_seq_repr
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.n_sta,
            self.n_seq,
            self.n_sta_repr,
            self.n_seq_emb,
            self.n_seq_repr,
        ];
        if dims.contains(&0) {
            return Err(Error::Config(format!("encoder dimensions must be >= 1: {self:?}")));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must be in [0,1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

const GATES: [&str; 3] = ["r", "z", "n"];

/// Names of every encoder parameter in the store.
pub fn param_names() -> Vec<String> {
    let mut names = vec!["enc.static".to_string(), "enc.seq_emb".to_string()];
    for g in GATES {
        names.push(format!("enc.w_{g}"));
        names.push(format!("enc.u_{g}"));
        names.push(format!("enc.b_{g}"));
    }
    names
}

fn uniform_init(rows: usize, cols: usize, fan_in: usize, rng: &mut Prng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
}

/// Insert freshly initialized encoder weights: uniform(±1/√fan_in), zero biases.
pub fn init_params(cfg: &EncoderConfig, store: &mut ParameterStore, rng: &mut Prng) -> Result<()> {
    cfg.validate()?;
    let (emb, hid) = (cfg.n_seq_emb, cfg.n_seq_repr);
    store.insert("enc.static", uniform_init(cfg.n_sta_repr, cfg.n_sta, cfg.n_sta, rng))?;
    store.insert("enc.seq_emb", uniform_init(cfg.n_seq, emb, cfg.n_seq, rng))?;
    for g in GATES {
        store.insert(format!("enc.w_{g}"), uniform_init(emb, hid, emb, rng))?;
        store.insert(format!("enc.u_{g}"), uniform_init(hid, hid, hid, rng))?;
        store.insert(format!("enc.b_{g}"), Tensor::zeros(1, hid))?;
    }
    Ok(())
}

/// Inverted dropout: keep with probability `1 - rate`, scale survivors.
pub fn dropout_mask(rows: usize, cols: usize, rate: f64, rng: &mut Prng) -> Tensor {
    let keep = 1.0 - rate;
    Tensor::from_fn(rows, cols, |_, _| {
        if rng.random::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    })
}

struct Gru<'t> {
    w: [Var<'t>; 3],
    u: [Var<'t>; 3],
    b: [Var<'t>; 3],
}

impl<'t> Gru<'t> {
    fn bind(bound: &Bound<'t>) -> Result<Self> {
        let get = |p: &str| -> Result<[Var<'t>; 3]> {
            Ok([
                bound.get(&format!("enc.{p}_r"))?,
                bound.get(&format!("enc.{p}_z"))?,
                bound.get(&format!("enc.{p}_n"))?,
            ])
        };
        Ok(Gru {
            w: get("w")?,
            u: get("u")?,
            b: get("b")?,
        })
    }
}

/// Encoder bound to one tape.
pub struct Encoder<'t> {
    cfg: EncoderConfig,
    tape: &'t Tape,
    static_w: Var<'t>,
    seq_w: Var<'t>,
    gru: Gru<'t>,
}

impl<'t> Encoder<'t> {
    pub fn bind(cfg: &EncoderConfig, tape: &'t Tape, bound: &Bound<'t>) -> Result<Self> {
        Ok(Encoder {
            cfg: *cfg,
            tape,
            static_w: bound.get("enc.static")?,
            seq_w: bound.get("enc.seq_emb")?,
            gru: Gru::bind(bound)?,
        })
    }

    /// `tanh(X A^T)` for a batch of static rows `X` (b x n_sta).
    pub fn embed_static(&self, x_sta: Var<'t>) -> Result<Var<'t>> {
        if x_sta.dims().1 != self.cfg.n_sta {
            return Err(Error::Shape {
                op: "embed_static",
                lhs: x_sta.dims(),
                rhs: (x_sta.dims().0, self.cfg.n_sta),
            });
        }
        x_sta.matmul(self.static_w.t()?)?.tanh()
    }

    /// Rowwise `tanh(X B)` for sequence rows `X` (t x n_seq).
    pub fn embed_sequence(&self, x_seq: Var<'t>) -> Result<Var<'t>> {
        let (t, k) = x_seq.dims();
        if t == 0 {
            return Err(Error::Data("empty sequence".into()));
        }
        if k != self.cfg.n_seq {
            return Err(Error::Shape {
                op: "embed_sequence",
                lhs: (t, k),
                rhs: (t, self.cfg.n_seq),
            });
        }
        x_seq.matmul(self.seq_w)?.tanh()
    }

    /// Run the GRU over step-major stacked inputs (`steps * batch` rows) and
    /// return each record's hidden state after its own last step.
    /// `lengths[i]` is the number of valid steps of record `i`.
    pub fn gru_forward(&self, x_emb: Var<'t>, lengths: &[usize]) -> Result<Var<'t>> {
        let b = lengths.len();
        let hid = self.cfg.n_seq_repr;
        let steps = lengths.iter().copied().max().unwrap_or(0);
        if b == 0 || steps == 0 || lengths.contains(&0) {
            return Err(Error::Data("gru_forward needs non-empty sequences".into()));
        }
        if x_emb.dims() != (steps * b, self.cfg.n_seq_emb) {
            return Err(Error::Shape {
                op: "gru_forward",
                lhs: x_emb.dims(),
                rhs: (steps * b, self.cfg.n_seq_emb),
            });
        }
        let g = &self.gru;
        let proj: Vec<Var<'t>> = g
            .w
            .iter()
            .map(|w| x_emb.matmul(*w))
            .collect::<Result<_>>()?;
        let mut h = self.tape.constant(Tensor::zeros(b, hid));
        let mut first = true;
        for t in 0..steps {
            let rows = t * b..(t + 1) * b;
            let xz = proj[1].slice(rows.clone(), 0..hid)?;
            let xn = proj[2].slice(rows, 0..hid)?;
            let (z, n) = if first {
                // h_0 = 0 drops every recurrent product
                (xz.add(g.b[1])?.sigmoid()?, xn.add(g.b[2])?.tanh()?)
            } else {
                let xr = proj[0].slice(t * b..(t + 1) * b, 0..hid)?;
                let r = xr.add(h.matmul(g.u[0])?)?.add(g.b[0])?.sigmoid()?;
                let z = xz.add(h.matmul(g.u[1])?)?.add(g.b[1])?.sigmoid()?;
                let n = xn.add(r.mul(h)?.matmul(g.u[2])?)?.add(g.b[2])?.tanh()?;
                (z, n)
            };
            // (1 - z) n + z h = n + z (h - n)
            let h_new = n.add(z.mul(h.sub(n)?)?)?;
            h = if lengths.iter().all(|&l| l > t) {
                h_new
            } else {
                let mask = Tensor::from_fn(b, 1, |i, _| if lengths[i] > t { 1.0 } else { 0.0 });
                let mask = self.tape.constant(mask);
                h.add(mask.mul(h_new.sub(h)?)?)?
            };
            first = false;
        }
        Ok(h)
    }

    /// Latent vectors for a batch of records (`b x latent_dim`). With `dropout`
    /// set and a positive rate, inverted-dropout masks are applied to both
    /// embedding outputs and to the concatenated result.
    pub fn encode_batch(
        &self,
        records: &[&PatientRecord],
        mut dropout: Option<&mut Prng>,
    ) -> Result<Var<'t>> {
        let b = records.len();
        if b == 0 {
            return Err(Error::Data("encode_batch: no records".into()));
        }
        let cfg = &self.cfg;
        let lengths: Vec<usize> = records.iter().map(|r| r.seq_len()).collect();
        if let Some(r) = records.iter().find(|r| r.sequence.is_empty()) {
            return Err(Error::Data(format!("record {:?}: empty sequence", r.id)));
        }
        let steps = lengths.iter().copied().max().unwrap_or(0);
        let mut x_sta = Vec::with_capacity(b * cfg.n_sta);
        for r in records {
            if r.static_features.len() != cfg.n_sta {
                return Err(Error::Data(format!(
                    "record {:?}: expected {} static features, got {}",
                    r.id,
                    cfg.n_sta,
                    r.static_features.len()
                )));
            }
            x_sta.extend_from_slice(&r.static_features);
        }
        let mut x_seq = vec![0.0; steps * b * cfg.n_seq];
        for (i, r) in records.iter().enumerate() {
            for (t, row) in r.sequence.iter().enumerate() {
                if row.len() != cfg.n_seq {
                    return Err(Error::Data(format!(
                        "record {:?}: expected {} sequential features, got {}",
                        r.id,
                        cfg.n_seq,
                        row.len()
                    )));
                }
                let at = (t * b + i) * cfg.n_seq;
                x_seq[at..at + cfg.n_seq].copy_from_slice(row);
            }
        }
        let rate = cfg.dropout_rate;
        let mut drop = |v: Var<'t>| -> Result<Var<'t>> {
            match dropout.as_deref_mut() {
                Some(rng) if rate > 0.0 => {
                    let (r, c) = v.dims();
                    v.mul(self.tape.constant(dropout_mask(r, c, rate, rng)))
                }
                _ => Ok(v),
            }
        };
        let x_sta = self.tape.constant(Tensor::new(b, cfg.n_sta, x_sta)?);
        let h_sta = drop(self.embed_static(x_sta)?)?;
        let x_seq = self.tape.constant(Tensor::new(steps * b, cfg.n_seq, x_seq)?);
        let emb = drop(self.embed_sequence(x_seq)?)?;
        let h_seq = self.gru_forward(emb, &lengths)?;
        drop(Var::concat(&[h_sta, h_seq], Axis::Cols)?)
    }
}

/// Encode records with frozen parameters, without dropout.
pub fn encode(cfg: &EncoderConfig, store: &ParameterStore, records: &[&PatientRecord]) -> Result<Tensor> {
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let enc = Encoder::bind(cfg, &tape, &bound)?;
    let h = enc.encode_batch(records, None)?;
    Ok((*h.value()).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn cfg() -> EncoderConfig {
        EncoderConfig {
            n_sta: 3,
            n_seq: 2,
            n_sta_repr: 2,
            n_seq_emb: 4,
            n_seq_repr: 5,
            dropout_rate: 0.0,
        }
    }

    fn record(t: usize) -> PatientRecord {
        PatientRecord {
            id: format!("r{t}"),
            static_features: vec![0.3, -1.0, 2.0],
            sequence: (0..t).map(|k| vec![0.1 * k as f64, -0.5]).collect(),
            time: 10.0,
            event: true,
            truth: None,
        }
    }

    fn store(cfg: &EncoderConfig) -> ParameterStore {
        let mut s = ParameterStore::new();
        init_params(cfg, &mut s, &mut Prng::seed_from_u64(0)).unwrap();
        s
    }

    #[test]
    fn zero_static_weights_give_zero() {
        let c = cfg();
        let mut s = store(&c);
        s.set("enc.static", Tensor::zeros(2, 3)).unwrap();
        let h = encode(&c, &s, &[&record(3)]).unwrap();
        assert_eq!(&h.data()[..2], &[0.0, 0.0]);
    }

    #[test]
    fn static_embedding_scalar() {
        let c = EncoderConfig {
            n_sta: 1,
            n_sta_repr: 1,
            ..cfg()
        };
        let mut s = store(&c);
        s.set("enc.static", Tensor::scalar(1.0)).unwrap();
        let tape = Tape::new();
        let b = s.bind(&tape);
        let e = Encoder::bind(&c, &tape, &b).unwrap();
        let h = e.embed_static(tape.constant(Tensor::scalar(0.5))).unwrap();
        assert!((h.item() - 0.5f64.tanh()).abs() < 1e-15);
        assert!((h.item() - 0.4621).abs() < 1e-4);
    }

    #[test]
    fn sequence_embedding_shape_and_identity() {
        let c = EncoderConfig {
            n_seq: 2,
            n_seq_emb: 2,
            ..cfg()
        };
        let mut s = store(&c);
        s.set("enc.seq_emb", Tensor::eye(2)).unwrap();
        let tape = Tape::new();
        let b = s.bind(&tape);
        let e = Encoder::bind(&c, &tape, &b).unwrap();
        let x = tape.constant(Tensor::row(&[0.3, -0.7]));
        let out = e.embed_sequence(x).unwrap().value();
        assert_eq!(out.data(), &[0.3f64.tanh(), (-0.7f64).tanh()]);
        let empty = tape.constant(Tensor::zeros(0, 2));
        assert!(e.embed_sequence(empty).is_err());
    }

    #[test]
    fn zero_gru_weights_keep_state_zero() {
        let c = cfg();
        let mut s = store(&c);
        for name in param_names().iter().filter(|n| n.starts_with("enc.w_") || n.starts_with("enc.u_")) {
            let d = s.get(name).unwrap().dims();
            s.set(name, Tensor::zeros(d.0, d.1)).unwrap();
        }
        let h = encode(&c, &s, &[&record(7)]).unwrap();
        assert!(h.data()[2..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_update_gate_holds_initial_state() {
        let c = cfg();
        let mut s = store(&c);
        s.set("enc.b_z", Tensor::full(1, 5, 50.0)).unwrap();
        let h = encode(&c, &s, &[&record(1)]).unwrap();
        assert!(h.data()[2..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn batched_matches_single_and_lengths_vary() {
        let c = cfg();
        let s = store(&c);
        let recs: Vec<_> = [1, 4, 2, 9].iter().map(|&t| record(t)).collect();
        let refs: Vec<_> = recs.iter().collect();
        let batch = encode(&c, &s, &refs).unwrap();
        assert_eq!(batch.dims(), (4, c.latent_dim()));
        for (i, r) in recs.iter().enumerate() {
            let single = encode(&c, &s, &[r]).unwrap();
            for (a, b) in single.data().iter().zip(batch.row_slice(i)) {
                assert!((a - b).abs() < 1e-14);
            }
        }
        assert!(batch.data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn dims_mismatch_reported() {
        let c = cfg();
        let s = store(&c);
        let mut r = record(2);
        r.static_features.pop();
        assert!(matches!(encode(&c, &s, &[&r]), Err(Error::Data(_))));
    }

    #[test]
    fn pfs_latent_dim() {
        assert_eq!(EncoderConfig::pfs(10, 5).latent_dim(), 132);
    }
}
