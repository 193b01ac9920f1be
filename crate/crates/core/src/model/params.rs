use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Tensor, Var};

use super::plan::{ArchPlan, Init};
use super::ModelError;

/// Parameter path to tensor. One instance backs every branch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn init(plan: &ArchPlan, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = plan
            .param_specs()
            .into_iter()
            .map(|spec| {
                let t = match spec.init {
                    Init::Conv { fan_in } => {
                        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
                        Tensor::from_fn(&spec.shape, |_| normal.sample(&mut rng))
                    }
                    Init::Dense { fan_in } => {
                        let bound = 1.0 / (fan_in as f64).sqrt();
                        Tensor::from_fn(&spec.shape, |_| rng.gen_range(-bound..bound))
                    }
                    Init::Zeros => Tensor::zeros(&spec.shape),
                    Init::Ones => Tensor::full(&spec.shape, 1.0),
                    Init::Values(v) => Tensor::from_fn(&spec.shape, |i| v.get(i).copied().unwrap_or(0.0)),
                };
                (spec.name, t)
            })
            .collect();
        Self { tensors }
    }

    /// Checks that every tensor the plan needs is present with the right shape.
    pub fn validate(&self, plan: &ArchPlan) -> Result<(), ModelError> {
        for spec in plan.param_specs() {
            let t = self
                .tensors
                .get(&spec.name)
                .ok_or_else(|| ModelError::MissingParam(spec.name.clone()))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(ModelError::ParamShape {
                    name: spec.name,
                    expected: spec.shape,
                    got: t.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Records every tensor on `tape`, as trainable leaves or as constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundParams<'t> {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let v = if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
                (k.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }
}

/// Parameters recorded on a tape.
#[derive(Clone, Debug)]
pub struct BoundParams<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> BoundParams<'t> {
    /// Wraps variables that are already on a tape.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var<'t>)>) -> Self {
        Self {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var<'t>, ModelError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var<'t>)> {
        self.vars.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArchConfig;

    #[test]
    fn init_is_seeded() {
        let plan = ArchPlan::resolve(&ArchConfig::desk_small()).unwrap();
        let a = ModelParams::init(&plan, 3);
        let b = ModelParams::init(&plan, 3);
        let c = ModelParams::init(&plan, 4);
        assert_eq!(a, b);
        assert_ne!(a, c);
        a.validate(&plan).unwrap();
        assert_eq!(a.num_scalars(), plan.num_params());
    }

    #[test]
    fn validate_names_missing_and_misshaped() {
        let plan = ArchPlan::resolve(&ArchConfig::desk_small()).unwrap();
        let mut p = ModelParams::init(&plan, 0);
        p.insert("stem.weight", Tensor::zeros(&[1]));
        assert!(matches!(p.validate(&plan), Err(ModelError::ParamShape { name, .. }) if name == "stem.weight"));
        p.tensors.remove("stem.weight");
        assert!(matches!(p.validate(&plan), Err(ModelError::MissingParam(n)) if n == "stem.weight"));
    }
}
