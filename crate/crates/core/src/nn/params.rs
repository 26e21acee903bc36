use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Named trainable tensors in creation order. The order is part of the
/// checkpoint format, so networks must register parameters deterministically.
#[derive(Debug, Clone)]
pub struct ParamStore {
    dtype: DType,
    device: Device,
    entries: Vec<(String, Var)>,
}

/// Plain-data copy of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device) -> Self {
        Self { dtype, device, entries: Vec::new() }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn push(&mut self, name: &str, t: Tensor) -> Result<Var> {
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(Error::Config(vec![format!("duplicate parameter name `{name}`")]));
        }
        let var = Var::from_tensor(&t)?;
        self.entries.push((name.to_string(), var.clone()));
        Ok(var)
    }

    /// Standard-normal initialization.
    pub fn normal(&mut self, rng: &mut impl Rng, name: &str, shape: impl Into<Shape>) -> Result<Var> {
        let shape: Shape = shape.into();
        let values: Vec<f64> = (0..shape.elem_count()).map(|_| rng.sample(StandardNormal)).collect();
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        self.push(name, t)
    }

    pub fn constant(&mut self, name: &str, len: usize, value: f64) -> Result<Var> {
        let t = Tensor::full(value, len, &self.device)?.to_dtype(self.dtype)?;
        self.push(name, t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn vars(&self) -> impl Iterator<Item = &Var> {
        self.entries.iter().map(|(_, v)| v)
    }

    pub fn entries(&self) -> &[(String, Var)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    /// Flattened values of the `i`-th parameter.
    pub fn values(&self, i: usize) -> Result<Vec<f64>> {
        Ok(self.entries[i].1.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1()?)
    }

    pub fn set_values(&self, i: usize, values: &[f64]) -> Result<()> {
        let var = &self.entries[i].1;
        let t = Tensor::from_slice(values, var.shape(), &self.device)?.to_dtype(self.dtype)?;
        var.set(&t)?;
        Ok(())
    }

    pub fn records(&self) -> Result<Vec<TensorRecord>> {
        (0..self.entries.len())
            .map(|i| {
                Ok(TensorRecord {
                    name: self.entries[i].0.clone(),
                    dims: self.entries[i].1.dims().to_vec(),
                    values: self.values(i)?,
                })
            })
            .collect()
    }

    /// Overwrites every parameter from `records`, which must match this store's
    /// names and shapes in order.
    pub fn load_records(&self, records: &[TensorRecord]) -> Result<()> {
        if records.len() != self.entries.len() {
            return Err(Error::ConfigMismatch(vec![format!(
                "parameter count: checkpoint has {}, network has {}",
                records.len(),
                self.entries.len()
            )]));
        }
        let mut problems = Vec::new();
        for ((name, var), rec) in self.entries.iter().zip(records) {
            if *name != rec.name || var.dims() != rec.dims.as_slice() {
                problems.push(format!("`{name}` {:?} vs checkpoint `{}` {:?}", var.dims(), rec.name, rec.dims));
            }
        }
        if !problems.is_empty() {
            return Err(Error::ConfigMismatch(problems));
        }
        for (i, rec) in records.iter().enumerate() {
            self.set_values(i, &rec.values)?;
        }
        Ok(())
    }

    /// Euclidean norm of all gradients present in `grads`.
    pub fn grad_norm(&self, grads: &GradStore) -> Result<f64> {
        let mut sq = 0f64;
        for var in self.vars() {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
            }
        }
        Ok(sq.sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn store(seed: u64) -> ParamStore {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new(DType::F32, Device::Cpu);
        s.normal(&mut rng, "a", (3, 2)).unwrap();
        s.constant("b", 4, 0.5).unwrap();
        s
    }

    #[test]
    fn initialization_is_seeded() {
        assert_eq!(store(1).records().unwrap(), store(1).records().unwrap());
        assert_ne!(store(1).records().unwrap(), store(2).records().unwrap());
    }

    #[test]
    fn records_round_trip() {
        let a = store(1);
        let b = store(2);
        b.load_records(&a.records().unwrap()).unwrap();
        assert_eq!(a.records().unwrap(), b.records().unwrap());
    }

    #[test]
    fn mismatched_records_are_rejected() {
        let a = store(1);
        let mut recs = a.records().unwrap();
        recs[0].dims = vec![2, 3];
        assert!(matches!(a.load_records(&recs), Err(Error::ConfigMismatch(_))));
        assert!(a.load_records(&recs[..1]).is_err());
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = store(0);
        assert!(s.constant("a", 1, 0.0).is_err());
    }
}
