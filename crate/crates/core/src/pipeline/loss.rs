//! Composite loss assembly.

use crate::error::{Error, Result};
use crate::lattice::{assert_same_shape, MaskLattice};

/// The five loss terms, in weight order.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub gaussian: f64,
    pub bernoulli: f64,
    pub kl_gaussian: f64,
    pub kl_bernoulli: f64,
    pub scc: f64,
}

impl LossParts {
    pub fn as_array(&self) -> [f64; 5] {
        [self.gaussian, self.bernoulli, self.kl_gaussian, self.kl_bernoulli, self.scc]
    }
}

const PART_NAMES: [&str; 5] = ["L_G", "L_B", "L_KLG", "L_KLB", "L_SCC"];

/// Spatial coherence term: mean squared error between the mask and the
/// conditioner's full-resolution projection.
pub fn scc_loss(x0: &MaskLattice, scc_out: &MaskLattice) -> f64 {
    assert_same_shape(x0, scc_out);
    let n = x0.len() as f64;
    x0.as_slice()
        .iter()
        .zip(scc_out.as_slice())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<f64>()
        / n
}

/// Weighted combination of the five terms. A non-finite part aborts with a
/// numerical error naming the offending term.
pub fn total_loss(parts: &LossParts, lambdas: &[f64; 5]) -> Result<f64> {
    let arr = parts.as_array();
    for (value, name) in arr.iter().zip(PART_NAMES) {
        if !value.is_finite() {
            return Err(Error::Numeric(format!("loss term {name} is not finite ({value})")));
        }
    }
    Ok(arr.iter().zip(lambdas).map(|(p, l)| l * p).sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scc_examples() {
        let x0 = MaskLattice::from_vec(2, 2, vec![1.0, 0.0, 1.0, 1.0]);
        assert_eq!(scc_loss(&x0, &x0), 0.0);
        let half = MaskLattice::filled(2, 2, 0.5);
        assert!((scc_loss(&x0, &half) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn scc_matches_brute_force() {
        let mut rng = crate::rng::substream(71, crate::rng::STREAM_DATA);
        use rand::Rng;
        let x0 = MaskLattice::from_fn(3, 3, |_, _| if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 });
        let p = MaskLattice::from_fn(3, 3, |_, _| rng.random());
        let mut acc = 0.0;
        for i in 0..9 {
            let d = x0.as_slice()[i] - p.as_slice()[i];
            acc += d * d;
        }
        assert!((scc_loss(&x0, &p) - acc / 9.0).abs() < 1e-15);
    }

    #[test]
    fn total_zero_and_published_weighting() {
        let zero = LossParts::default();
        let defaults = [1.0, 1.0, 0.01, 0.01, 0.1];
        assert_eq!(total_loss(&zero, &defaults).unwrap(), 0.0);
        let ones = LossParts {
            gaussian: 1.0,
            bernoulli: 1.0,
            kl_gaussian: 1.0,
            kl_bernoulli: 1.0,
            scc: 1.0,
        };
        assert!((total_loss(&ones, &defaults).unwrap() - 2.12).abs() < 1e-15);
    }

    #[test]
    fn base_ablation_drops_regularizers() {
        let parts = LossParts {
            gaussian: 0.3,
            bernoulli: 0.7,
            kl_gaussian: 5.0,
            kl_bernoulli: 5.0,
            scc: 5.0,
        };
        let base = [1.0, 1.0, 0.0, 0.0, 0.0];
        assert!((total_loss(&parts, &base).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn non_finite_part_names_term() {
        let parts = LossParts { kl_bernoulli: f64::NAN, ..Default::default() };
        let err = total_loss(&parts, &[1.0; 5]).unwrap_err();
        assert!(err.to_string().contains("L_KLB"), "got: {err}");
    }
}
