//! The HardConcrete distribution over [0, 1].
//!
//! A BinaryConcrete sample `s = σ((log u − log(1−u) + log α)/β)` is stretched
//! to `s̄ = s·(1+2ε) − ε` on (−ε, 1+ε) and rectified with `min(1, max(0, s̄))`.
//! The rectification puts point masses at 0 and 1.

use crate::error::{Error, Result};
use crate::numcore::kernels::sigmoid;
use crate::numcore::{Graph, Real, Var};

/// Temperature `beta` and stretch magnitude `eps` (support is (−eps, 1+eps)).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HardConcreteParams {
    pub beta: f64,
    pub eps: f64,
}

impl Default for HardConcreteParams {
    fn default() -> Self {
        Self {
            beta: 2.0 / 3.0,
            eps: 0.1,
        }
    }
}

impl HardConcreteParams {
    pub fn new(beta: f64, eps: f64) -> Result<Self> {
        let p = Self { beta, eps };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("temperature beta must be > 0, got {}", self.beta)));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::Config(format!("stretch eps must be > 0, got {}", self.eps)));
        }
        Ok(())
    }

    /// `β·log(ε/(1+ε))`, the shift shared by both closed forms.
    fn boundary_shift(&self) -> f64 {
        self.beta * (self.eps / (1.0 + self.eps)).ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateSample {
    /// BinaryConcrete draw in (0, 1).
    pub s: f64,
    /// Stretched value in (−eps, 1+eps).
    pub s_bar: f64,
    /// Rectified gate in [0, 1].
    pub g: f64,
}

/// Logistic noise `log u − log(1−u)`.
pub fn logistic_noise(u: f64) -> Result<f64> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::Domain(format!("uniform draw {u} must lie strictly inside (0, 1)")));
    }
    Ok(u.ln() - (-u).ln_1p())
}

pub fn sample_gate(log_alpha: f64, params: &HardConcreteParams, u: f64) -> Result<GateSample> {
    let noise = logistic_noise(u)?;
    let s = sigmoid((noise + log_alpha) / params.beta);
    let s_bar = s * (1.0 + 2.0 * params.eps) - params.eps;
    Ok(GateSample {
        s,
        s_bar,
        g: s_bar.clamp(0.0, 1.0),
    })
}

/// `P(g = 0) = σ(β·log(ε/(1+ε)) − log α)`
pub fn prob_zero(log_alpha: f64, params: &HardConcreteParams) -> f64 {
    sigmoid(params.boundary_shift() - log_alpha)
}

/// `P(g = 1) = σ(log α + β·log(ε/(1+ε)))`: the stretched sample exceeds 1 iff
/// `s > (1+ε)/(1+2ε)`, whose logit is `−log(ε/(1+ε))`.
pub fn prob_one(log_alpha: f64, params: &HardConcreteParams) -> f64 {
    sigmoid(log_alpha + params.boundary_shift())
}

/// Probability that the gate is open (non-zero).
pub fn prob_open(log_alpha: f64, params: &HardConcreteParams) -> f64 {
    sigmoid(log_alpha - params.boundary_shift())
}

/// Deterministic test-time gate `min(1, max(0, σ(log α)(1+2ε) − ε))`.
pub fn expected_gate(log_alpha: f64, params: &HardConcreteParams) -> f64 {
    (sigmoid(log_alpha) * (1.0 + 2.0 * params.eps) - params.eps).clamp(0.0, 1.0)
}

/// Expected number of open gates, `Σ 1 − P(gᵢ = 0)`.
pub fn expected_l0(log_alphas: &[f64], params: &HardConcreteParams) -> f64 {
    log_alphas.iter().map(|&la| prob_open(la, params)).sum()
}

/// Derivative of [`expected_l0`] with respect to each `log α`.
pub fn expected_l0_grad(log_alphas: &[f64], params: &HardConcreteParams) -> Vec<f64> {
    log_alphas
        .iter()
        .map(|&la| {
            let p = prob_open(la, params);
            p * (1.0 - p)
        })
        .collect()
}

/// Tracked gate sampling: `log_alpha` is an `N×1` (or length-N) node, `noise`
/// holds one uniform draw per position. Returns the rectified gates.
pub fn sample_gates_tracked<T: Real>(
    g: &mut Graph<T>,
    log_alpha: Var,
    noise: &[f64],
    params: &HardConcreteParams,
) -> Result<Var> {
    let n = g.value(log_alpha).numel();
    if noise.len() != n {
        return Err(Error::shape("gate noise", &[n], &[noise.len()]));
    }
    let logistic: Vec<T> = noise
        .iter()
        .map(|&u| logistic_noise(u).map(T::lit))
        .collect::<Result<_>>()?;
    let shape = g.shape(log_alpha).to_vec();
    let noise_var = g.constant(crate::numcore::Tensor::new(&shape, logistic)?);
    let z = g.add(log_alpha, noise_var)?;
    let z = g.scale(z, T::lit(1.0 / params.beta))?;
    let s = g.sigmoid(z)?;
    let s = g.scale(s, T::lit(1.0 + 2.0 * params.eps))?;
    let s_bar = g.add_scalar(s, T::lit(-params.eps))?;
    g.clamp(s_bar, T::zero(), T::one())
}

/// Tracked expected L0 penalty over the positions of `log_alpha`.
pub fn expected_l0_tracked<T: Real>(
    g: &mut Graph<T>,
    log_alpha: Var,
    params: &HardConcreteParams,
) -> Result<Var> {
    let shifted = g.add_scalar(log_alpha, T::lit(-params.boundary_shift()))?;
    let open = g.sigmoid(shifted)?;
    g.sum(open)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{RngState, Tensor};
    use proptest::prelude::*;

    const P: HardConcreteParams = HardConcreteParams {
        beta: 2.0 / 3.0,
        eps: 0.1,
    };

    #[test]
    fn midpoint_sample() {
        let s = sample_gate(0.0, &P, 0.5).unwrap();
        assert!((s.s - 0.5).abs() < 1e-15);
        assert!((s.s_bar - 0.5).abs() < 1e-15);
        assert!((s.g - 0.5).abs() < 1e-15);
    }

    #[test]
    fn low_noise_sample_is_rectified_to_zero() {
        let s = sample_gate(0.0, &P, 0.01).unwrap();
        // 50-digit reference: s = 1.01416014743e-3, s̄ = −0.0987830078231
        assert!((s.s - 1.014_160_147_434_658e-3).abs() < 1e-15);
        assert!((s.s_bar + 0.098_783_007_823_078_41).abs() < 1e-14);
        assert_eq!(s.g, 0.0);
    }

    #[test]
    fn boundary_draws_are_domain_errors() {
        assert!(matches!(sample_gate(0.0, &P, 0.0), Err(Error::Domain(_))));
        assert!(matches!(sample_gate(0.0, &P, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn tiny_stretch_never_rectifies() {
        let p = HardConcreteParams::new(2.0 / 3.0, 1e-12).unwrap();
        let mut rng = RngState::new(3);
        for _ in 0..1000 {
            let s = sample_gate(0.0, &p, rng.uniform_open()).unwrap();
            assert!(s.g > 0.0 && s.g < 1.0);
        }
    }

    #[test]
    fn closed_form_zero_probability() {
        // σ((2/3)·ln(1/11)), 50-digit reference 0.168177816008309589...
        assert!((prob_zero(0.0, &P) - 0.168_177_816_008_309_59).abs() < 1e-15);
        assert!(prob_zero(50.0, &P) < 1e-20);
        assert!(prob_zero(-50.0, &P) > 1.0 - 1e-15);
    }

    #[test]
    fn closed_form_matches_monte_carlo() {
        let mut rng = RngState::new(2024);
        let n = 100_000;
        let zeros = (0..n)
            .filter(|_| sample_gate(0.0, &P, rng.uniform_open()).unwrap().g == 0.0)
            .count();
        assert!((zeros as f64 / n as f64 - prob_zero(0.0, &P)).abs() < 0.01);
    }

    #[test]
    fn one_probability_mirrors_zero_probability() {
        for la in [-3.0, -0.5, 0.0, 1.7] {
            assert!((prob_one(la, &P) - prob_zero(-la, &P)).abs() < 1e-15);
        }
        let mut rng = RngState::new(77);
        let n = 100_000;
        let ones = (0..n)
            .filter(|_| sample_gate(2.0, &P, rng.uniform_open()).unwrap().g == 1.0)
            .count();
        assert!((ones as f64 / n as f64 - prob_one(2.0, &P)).abs() < 0.01);
    }

    #[test]
    fn expected_gate_examples() {
        assert!((expected_gate(0.0, &P) - 0.5).abs() < 1e-15);
        assert_eq!(expected_gate(-10.0, &P), 0.0);
        assert_eq!(expected_gate(10.0, &P), 1.0);
    }

    #[test]
    fn expected_gate_saturation_thresholds() {
        let lo = P.eps / (1.0 + 2.0 * P.eps);
        let hi = (1.0 + P.eps) / (1.0 + 2.0 * P.eps);
        let logit = |p: f64| (p / (1.0 - p)).ln();
        assert_eq!(expected_gate(logit(lo) - 1e-9, &P), 0.0);
        assert!(expected_gate(logit(lo) + 1e-6, &P) > 0.0);
        assert_eq!(expected_gate(logit(hi) + 1e-9, &P), 1.0);
        assert!(expected_gate(logit(hi) - 1e-6, &P) < 1.0);
    }

    #[test]
    fn expected_l0_examples() {
        assert_eq!(expected_l0(&[], &P), 0.0);
        // 3·(1 − 0.16817781600830959) = 2.4954665519750712
        assert!((expected_l0(&[0.0; 3], &P) - 2.495_466_551_975_071_2).abs() < 1e-14);
    }

    #[test]
    fn expected_l0_gradient_matches_central_differences() {
        let las = [-1.3, 0.0, 0.4, 2.2];
        let grad = expected_l0_grad(&las, &P);
        let h = 1e-5;
        for i in 0..las.len() {
            let mut up = las;
            up[i] += h;
            let mut dn = las;
            dn[i] -= h;
            let fd = (expected_l0(&up, &P) - expected_l0(&dn, &P)) / (2.0 * h);
            assert!((grad[i] - fd).abs() / fd.abs() < 1e-6, "{} vs {}", grad[i], fd);
        }
    }

    #[test]
    fn tracked_forms_agree_with_scalar_forms() {
        let las = vec![-1.0, 0.25, 3.0];
        let noise = vec![0.2, 0.7, 0.05];
        let mut g = Graph::<f64>::new(true);
        let la = g.param(&Tensor::new(&[3, 1], las.clone()).unwrap());
        let gates = sample_gates_tracked(&mut g, la, &noise, &P).unwrap();
        for i in 0..3 {
            let want = sample_gate(las[i], &P, noise[i]).unwrap().g;
            assert!((g.value(gates).data()[i] - want).abs() < 1e-15);
        }
        let l0 = expected_l0_tracked(&mut g, la, &P).unwrap();
        assert!((g.value(l0).data()[0] - expected_l0(&las, &P)).abs() < 1e-14);
        let grads = g.backward(l0).unwrap();
        let want = expected_l0_grad(&las, &P);
        for i in 0..3 {
            assert!((grads.get(la).unwrap()[i] - want[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(HardConcreteParams::new(0.0, 0.1).is_err());
        assert!(HardConcreteParams::new(0.5, -0.1).is_err());
    }

    proptest! {
        #[test]
        fn prob_zero_strictly_decreasing(a in -8.0f64..8.0, delta in 1e-3f64..4.0) {
            prop_assert!(prob_zero(a + delta, &P) < prob_zero(a, &P));
        }

        #[test]
        fn expected_gate_nondecreasing(a in -12.0f64..12.0, delta in 0.0f64..4.0) {
            prop_assert!(expected_gate(a + delta, &P) >= expected_gate(a, &P));
        }

        #[test]
        fn samples_stay_in_support(a in -10.0f64..10.0, u in 1e-9f64..(1.0 - 1e-9)) {
            let s = sample_gate(a, &P, u).unwrap();
            prop_assert!((0.0..=1.0).contains(&s.g));
            prop_assert!(s.s > 0.0 && s.s < 1.0 || s.s == 0.0 || s.s == 1.0);
            prop_assert!((s.g - s.s_bar.clamp(0.0, 1.0)).abs() == 0.0);
            if s.s_bar > 0.0 && s.s_bar < 1.0 {
                prop_assert!(s.g > 0.0 && s.g < 1.0);
            }
        }
    }
}
