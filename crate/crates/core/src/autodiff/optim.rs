use indexmap::IndexMap;
use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
struct Parameter {
    value: Tensor,
    trainable: bool,
    moments: Option<(Tensor, Tensor)>,
}

/// Named parameters plus Adam state. Iteration order is insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    params: IndexMap<String, Parameter>,
    step: u64,
}

/// Gradients keyed by parameter name.
pub type GradMap = IndexMap<String, Tensor>;

impl ParameterStore {
    pub fn new() -> Self {
        ParameterStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Contract(format!("parameter {name:?} already exists")));
        }
        self.params.insert(
            name,
            Parameter {
                value,
                trainable: true,
                moments: None,
            },
        );
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))
    }

    /// Replace a value, keeping its shape. Resets that parameter's moments.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))?;
        if p.value.dims() != value.dims() {
            return Err(Error::Shape {
                op: "set_parameter",
                lhs: p.value.dims(),
                rhs: value.dims(),
            });
        }
        p.value = value;
        p.moments = None;
        Ok(())
    }

    /// Frozen parameters are bound as constants and never updated.
    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))?
            .trainable = trainable;
        Ok(())
    }

    pub fn is_trainable(&self, name: &str) -> Result<bool> {
        self.params
            .get(name)
            .map(|p| p.trainable)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Drop optimizer state, e.g. between pretraining and fine-tuning.
    pub fn reset_optimizer(&mut self) {
        self.step = 0;
        for p in self.params.values_mut() {
            p.moments = None;
        }
    }

    /// Record every parameter on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        let vars = self
            .params
            .iter()
            .map(|(k, p)| {
                let v = if p.trainable {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                };
                (k.clone(), (v, p.trainable))
            })
            .collect();
        Bound { vars }
    }

    /// One Adam update (β1 = 0.9, β2 = 0.999, ε = 1e-8). Parameters absent
    /// from `grads` are left untouched.
    pub fn adam_step(&mut self, grads: &GradMap, lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        for (name, g) in grads {
            let p = self
                .params
                .get(name)
                .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter {name:?}")))?;
            if p.value.dims() != g.dims() {
                return Err(Error::Shape {
                    op: "adam_step",
                    lhs: p.value.dims(),
                    rhs: g.dims(),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for (name, g) in grads {
            let p = &mut self.params[name.as_str()];
            if !p.trainable {
                continue;
            }
            let (r, c) = g.dims();
            let (m, v) = p
                .moments
                .get_or_insert_with(|| (Tensor::zeros(r, c), Tensor::zeros(r, c)));
            let values = p.value.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (k, &gk) in g.data().iter().enumerate() {
                md[k] = BETA1 * md[k] + (1.0 - BETA1) * gk;
                vd[k] = BETA2 * vd[k] + (1.0 - BETA2) * gk * gk;
                let mhat = md[k] / c1;
                let vhat = vd[k] / c2;
                values[k] -= lr * mhat / (vhat.sqrt() + EPS);
            }
        }
        Ok(())
    }
}

/// Parameters recorded on one tape.
pub struct Bound<'t> {
    vars: IndexMap<String, (Var<'t>, bool)>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.vars
            .get(name)
            .map(|(v, _)| *v)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))
    }

    /// Gradients of the trainable parameters.
    pub fn gradients(&self, grads: &Gradients) -> GradMap {
        self.vars
            .iter()
            .filter(|(_, (_, trainable))| *trainable)
            .map(|(k, (v, _))| (k.clone(), grads.get(*v)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(x: f64) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("x", Tensor::scalar(x)).unwrap();
        s
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = scalar_store(1.0);
        assert!(s.insert("x", Tensor::scalar(2.0)).is_err());
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = scalar_store(1.5);
        let g: GradMap = [("x".to_string(), Tensor::scalar(0.0))].into_iter().collect();
        s.adam_step(&g, 0.1).unwrap();
        assert_eq!(s.get("x").unwrap().item(), 1.5);
        assert_eq!(s.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = scalar_store(0.0);
        let g: GradMap = [("x".to_string(), Tensor::scalar(1.0))].into_iter().collect();
        s.adam_step(&g, 0.1).unwrap();
        // m̂ = v̂ = 1, so the step is lr / (1 + ε)
        let want = -0.1 / (1.0 + 1e-8);
        assert!((s.get("x").unwrap().item() - want).abs() < 1e-15);
        s.adam_step(&g, 0.1).unwrap();
        assert!(s.get("x").unwrap().item() < want);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let mut s = scalar_store(0.0);
        let g: GradMap = [("x".to_string(), Tensor::zeros(2, 1))].into_iter().collect();
        assert!(matches!(s.adam_step(&g, 0.1), Err(Error::Shape { .. })));
        assert_eq!(s.step_count(), 0);
    }

    #[test]
    fn frozen_parameters_are_constants() {
        let mut s = scalar_store(2.0);
        s.set_trainable("x", false).unwrap();
        let tape = Tape::new();
        let b = s.bind(&tape);
        let y = b.get("x").unwrap().square().unwrap();
        let g = tape.backward(y).unwrap();
        assert!(b.gradients(&g).is_empty());
    }
}
