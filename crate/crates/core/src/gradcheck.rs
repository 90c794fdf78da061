//! Central-difference gradient checking.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Loss value plus analytic gradients for (at least) the checked parameters.
pub type LossAndGrads = (f64, BTreeMap<String, Tensor<f64>>);

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub step: f64,
    /// Check at most this many coordinates per tensor (seeded sample); `None` checks all.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck { step: 1e-5, max_coords: None, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub per_param: BTreeMap<String, f64>,
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

impl GradCheck {
    pub fn with_step(step: f64) -> Self {
        GradCheck { step, ..Default::default() }
    }

    /// Max over the named parameters of
    /// `|analytic − central| / max(|analytic|, |central|, 1e−12)`.
    pub fn run<F>(&self, f: F, point: &ParamStore<f64>, names: &[String]) -> Result<GradCheckReport>
    where
        F: Fn(&ParamStore<f64>) -> Result<LossAndGrads>,
    {
        if !(self.step > 0.0) {
            return Err(invalid("grad_check step must be positive"));
        }
        let (v0, analytic) = f(point)?;
        let (v1, _) = f(point)?;
        if v0.to_bits() != v1.to_bits() {
            return Err(Error::NonDeterministic((v0 - v1).abs()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            per_param: BTreeMap::new(),
            worst: None,
            coords_checked: 0,
        };
        let mut probe = point.clone();
        for name in names {
            let base = point.require(name)?.clone();
            let grad = analytic
                .get(name)
                .ok_or_else(|| invalid(format!("no analytic gradient for `{name}`")))?;
            let coords: Vec<usize> = match self.max_coords {
                Some(k) if k < base.len() => {
                    let mut c = sample(&mut rng, base.len(), k).into_vec();
                    c.sort_unstable();
                    c
                }
                _ => (0..base.len()).collect(),
            };
            let mut worst_here = 0.0f64;
            for &i in &coords {
                let x = base.data()[i];
                probe.get_mut(name).unwrap().data_mut()[i] = x + self.step;
                let (fp, _) = f(&probe)?;
                probe.get_mut(name).unwrap().data_mut()[i] = x - self.step;
                let (fm, _) = f(&probe)?;
                probe.get_mut(name).unwrap().data_mut()[i] = x;
                let numeric = (fp - fm) / (2.0 * self.step);
                let err = rel_error(grad.data()[i], numeric);
                if err > worst_here {
                    worst_here = err;
                }
                if err > report.max_rel_error {
                    report.max_rel_error = err;
                    report.worst = Some((name.clone(), i));
                }
                report.coords_checked += 1;
            }
            report.per_param.insert(name.clone(), worst_here);
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Tape;
    use std::collections::BTreeSet;

    fn sum_squares(p: &ParamStore<f64>) -> Result<LossAndGrads> {
        let trainable: BTreeSet<String> = ["x".to_string()].into();
        let mut tape = Tape::new(p, &trainable);
        let x = tape.p("x")?;
        let sq = tape.graph.mul(x, x)?;
        let s = tape.graph.sum_all(sq);
        let v = tape.graph.value(s).item();
        Ok((v, tape.gradients(s)?))
    }

    #[test]
    fn quadratic_is_exact() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap());
        let r = GradCheck::with_step(1e-5).run(sum_squares, &p, &["x".into()]).unwrap();
        assert!(r.max_rel_error < 1e-8, "{}", r.max_rel_error);
        assert_eq!(r.coords_checked, 3);
    }

    #[test]
    fn nondeterminism_detected() {
        use std::cell::Cell;
        let calls = Cell::new(0u32);
        let f = |p: &ParamStore<f64>| {
            calls.set(calls.get() + 1);
            let (v, g) = sum_squares(p)?;
            Ok((v + calls.get() as f64, g))
        };
        let mut p = ParamStore::new();
        p.insert("x", Tensor::from_f64(&[1], &[1.0]).unwrap());
        let err = GradCheck::default().run(f, &p, &["x".into()]).unwrap_err();
        assert!(matches!(err, Error::NonDeterministic(_)));
    }

    #[test]
    fn bad_step_rejected() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::from_f64(&[1], &[1.0]).unwrap());
        assert!(GradCheck::with_step(0.0).run(sum_squares, &p, &["x".into()]).is_err());
    }
}
