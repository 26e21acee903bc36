//! Central finite-difference oracle for backpropagated parameter gradients.

use candle_core::backprop::GradStore;
use rand::Rng;

use super::ParamStore;
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheck {
    /// `|a − n| / max(|a|, |n|)`, with `floor` guarding values at rounding level.
    pub fn relative_error(&self, floor: f64) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(floor)
    }
}

/// One element of every tensor, then uniform draws over all elements until
/// `count` positions are chosen. Positions are `(tensor, element)`.
pub fn sample_positions(store: &ParamStore, count: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    let sizes: Vec<usize> = store.vars().map(|v| v.elem_count()).collect();
    let total: usize = sizes.iter().sum();
    let mut out: Vec<(usize, usize)> = sizes.iter().enumerate().map(|(i, n)| (i, rng.random_range(0..*n))).collect();
    while out.len() < count {
        let mut k = rng.random_range(0..total);
        let mut i = 0;
        while k >= sizes[i] {
            k -= sizes[i];
            i += 1;
        }
        if !out.contains(&(i, k)) {
            out.push((i, k));
        }
    }
    out
}

/// Compares `grads` with `(f(θ + h) − f(θ − h)) / 2h` at each position.
/// Parameters are restored after every probe.
pub fn check_gradients(
    store: &ParamStore,
    grads: &GradStore,
    positions: &[(usize, usize)],
    h: f64,
    mut f: impl FnMut() -> Result<f64>,
) -> Result<Vec<GradCheck>> {
    let mut out = Vec::with_capacity(positions.len());
    for &(i, j) in positions {
        let (name, var) = &store.entries()[i];
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?[j],
            None => 0.0,
        };
        let orig = store.values(i)?;
        let mut probe = orig.clone();
        probe[j] = orig[j] + h;
        store.set_values(i, &probe)?;
        let up = f()?;
        probe[j] = orig[j] - h;
        store.set_values(i, &probe)?;
        let down = f()?;
        store.set_values(i, &orig)?;
        out.push(GradCheck { name: name.clone(), index: j, analytic, numeric: (up - down) / (2.0 * h) });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use rand::SeedableRng;

    #[test]
    fn detects_correct_and_wrong_gradients() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new(DType::F64, Device::Cpu);
        s.normal(&mut rng, "x", 4).unwrap();
        let loss = |s: &ParamStore| s.vars().next().unwrap().as_tensor().powf(3.0).unwrap().sum_all().unwrap();
        let grads = loss(&s).backward().unwrap();
        let pos = sample_positions(&s, 4, &mut rng);
        assert_eq!(pos.len(), 4);
        let checks = check_gradients(&s, &grads, &pos, 1e-5, || Ok(loss(&s).to_scalar::<f64>()?)).unwrap();
        assert!(checks.iter().all(|c| c.relative_error(1e-9) < 1e-6), "{checks:?}");

        // Gradients of a different function must be flagged.
        let wrong = s.vars().next().unwrap().as_tensor().sqr().unwrap().sum_all().unwrap().backward().unwrap();
        let checks = check_gradients(&s, &wrong, &pos, 1e-5, || Ok(loss(&s).to_scalar::<f64>()?)).unwrap();
        assert!(checks.iter().any(|c| c.relative_error(1e-9) > 1e-2));
    }
}
