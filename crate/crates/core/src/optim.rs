//! Adam with explicit, checkpointable moment buffers.

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{ParamStore, TensorRecord};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

pub struct Adam {
    lr: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

/// Plain-data optimizer state, in parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<TensorRecord>,
    pub v: Vec<TensorRecord>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64) -> Result<Self> {
        let zeros = || -> Result<Vec<Tensor>> { params.vars().map(|v| Ok(v.as_tensor().zeros_like()?)).collect() };
        Ok(Self { lr, step: 0, m: zeros()?, v: zeros()? })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update of every parameter that has a gradient in `grads`.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for (i, var) in params.vars().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let m = ((&self.m[i] * BETA1)? + (g * (1.0 - BETA1))?)?;
            let v = ((&self.v[i] * BETA2)? + (g.sqr()? * (1.0 - BETA2))?)?;
            let update = (&m / c1)?.div(&((&v / c2)?.sqrt()? + EPSILON)?)?;
            var.set(&(var.as_tensor() - (update * self.lr)?)?)?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }

    pub fn state(&self, params: &ParamStore) -> Result<AdamState> {
        let dump = |ts: &[Tensor]| -> Result<Vec<TensorRecord>> {
            params
                .names()
                .zip(ts)
                .map(|(name, t)| {
                    Ok(TensorRecord {
                        name: name.to_string(),
                        dims: t.dims().to_vec(),
                        values: t.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1()?,
                    })
                })
                .collect()
        };
        Ok(AdamState { step: self.step, m: dump(&self.m)?, v: dump(&self.v)? })
    }

    pub fn load_state(&mut self, params: &ParamStore, state: &AdamState) -> Result<()> {
        let load = |recs: &[TensorRecord], which: &str| -> Result<Vec<Tensor>> {
            if recs.len() != params.len() {
                return Err(Error::ConfigMismatch(vec![format!(
                    "optimizer {which} has {} entries, network has {} parameters",
                    recs.len(),
                    params.len()
                )]));
            }
            params
                .entries()
                .iter()
                .zip(recs)
                .map(|((name, var), r)| {
                    if *name != r.name || var.dims() != r.dims.as_slice() {
                        return Err(Error::ConfigMismatch(vec![format!("optimizer {which} entry `{}` does not match `{name}`", r.name)]));
                    }
                    Ok(Tensor::from_slice(&r.values, var.shape(), params.device())?.to_dtype(params.dtype())?)
                })
                .collect()
        };
        self.m = load(&state.m, "m")?;
        self.v = load(&state.v, "v")?;
        self.step = state.step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use rand::SeedableRng;

    fn quadratic_store() -> ParamStore {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new(DType::F64, Device::Cpu);
        s.normal(&mut rng, "x", 3).unwrap();
        s
    }

    fn grads(s: &ParamStore) -> GradStore {
        let x = s.vars().next().unwrap().as_tensor();
        x.sqr().unwrap().sum_all().unwrap().backward().unwrap()
    }

    #[test]
    fn first_step_moves_each_coordinate_by_lr() {
        // With bias correction the first update is lr * g / (|g| + eps).
        let s = quadratic_store();
        let before = s.values(0).unwrap();
        let mut opt = Adam::new(&s, 0.1).unwrap();
        opt.step(&s, &grads(&s)).unwrap();
        for (a, b) in before.iter().zip(s.values(0).unwrap()) {
            let g = 2.0 * a;
            let expected = a - 0.1 * g / (g.abs() + EPSILON);
            assert!((b - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_untouched() {
        let s = quadratic_store();
        let before = s.values(0).unwrap();
        let mut opt = Adam::new(&s, 0.0).unwrap();
        for _ in 0..3 {
            opt.step(&s, &grads(&s)).unwrap();
        }
        assert_eq!(before, s.values(0).unwrap());
    }

    #[test]
    fn minimizes_a_quadratic() {
        let s = quadratic_store();
        let mut opt = Adam::new(&s, 0.05).unwrap();
        for _ in 0..500 {
            opt.step(&s, &grads(&s)).unwrap();
        }
        assert!(s.values(0).unwrap().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn state_round_trip_continues_identically() {
        let a = quadratic_store();
        let b = quadratic_store();
        let mut oa = Adam::new(&a, 0.05).unwrap();
        for _ in 0..3 {
            oa.step(&a, &grads(&a)).unwrap();
        }
        b.load_records(&a.records().unwrap()).unwrap();
        let mut ob = Adam::new(&b, 0.05).unwrap();
        ob.load_state(&b, &oa.state(&a).unwrap()).unwrap();
        oa.step(&a, &grads(&a)).unwrap();
        ob.step(&b, &grads(&b)).unwrap();
        assert_eq!(a.values(0).unwrap(), b.values(0).unwrap());
        assert_eq!(oa.state(&a).unwrap(), ob.state(&b).unwrap());
    }
}
