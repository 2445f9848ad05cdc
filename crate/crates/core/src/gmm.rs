//! Gaussian-mixture data distribution with closed-form marginal scores.
//!
//! Under the variance-preserving forward process, component k of the mixture
//! diffuses to N(√ᾱ_t μ_k, (ᾱ_t σ_k² + 1 − ᾱ_t) I), so the marginal p_t is again
//! an isotropic mixture and its score is available exactly.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::image::{Image, ScoreField, Shape};
use crate::rng::{Purpose, SampleSeed};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    shape: Shape,
    weights: Vec<f64>,
    templates: Vec<Image>,
    sigma0: Vec<f64>,
}

/// Mean and isotropic variance of one diffused component.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentMarginal {
    pub mean: Image,
    pub variance: f64,
}

impl GmmModel {
    pub fn new(templates: Vec<Image>, weights: Vec<f64>, sigma0: Vec<f64>) -> Result<Self> {
        let k = templates.len();
        if k == 0 {
            return Err(Error::Config("mixture needs at least one component".into()));
        }
        if weights.len() != k || sigma0.len() != k {
            return Err(Error::Config(format!(
                "{k} templates but {} weights and {} sigmas",
                weights.len(),
                sigma0.len()
            )));
        }
        let shape = templates[0].shape();
        if let Some(t) = templates.iter().find(|t| t.shape() != shape) {
            return Err(Error::Config(format!(
                "template shapes differ: {shape} vs {}",
                t.shape()
            )));
        }
        if weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::Config("mixture weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("mixture weights sum to {total}, not 1")));
        }
        if sigma0.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(Error::Config("sigma0 must be finite and non-negative".into()));
        }
        if templates.iter().any(|t| !t.is_finite()) {
            return Err(Error::Config("templates must be finite".into()));
        }
        Ok(Self {
            shape,
            weights,
            templates,
            sigma0,
        })
    }

    /// Normalizes `weights` before construction.
    pub fn with_unnormalized_weights(
        templates: Vec<Image>,
        weights: Vec<f64>,
        sigma0: Vec<f64>,
    ) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::Config("mixture weights must be positive".into()));
        }
        Self::new(templates, weights.iter().map(|w| w / total).collect(), sigma0)
    }

    /// 16×16 single-channel mixture of four structured templates with σ0 = 0.05.
    pub fn desk_default() -> Self {
        let templates = default_templates(16, 16);
        Self::new(templates, vec![0.25; 4], vec![0.05; 4]).expect("default model is valid")
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn n_components(&self) -> usize {
        self.templates.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn templates(&self) -> &[Image] {
        &self.templates
    }

    pub fn sigma0(&self) -> &[f64] {
        &self.sigma0
    }

    pub fn marginal_params_at(&self, alpha_bar: f64) -> Vec<ComponentMarginal> {
        let sa = alpha_bar.sqrt();
        self.templates
            .iter()
            .zip(&self.sigma0)
            .map(|(mu, s)| ComponentMarginal {
                mean: mu.scale(sa),
                variance: alpha_bar * s * s + (1.0 - alpha_bar),
            })
            .collect()
    }

    pub fn marginal_params(&self, sched: &NoiseSchedule, t: u32) -> Result<Vec<ComponentMarginal>> {
        Ok(self.marginal_params_at(sched.alpha_bar(t)?))
    }

    /// Per-component log(w_k · N(x; √ᾱ μ_k, v_k I)).
    fn component_log_densities(&self, x: &Image, alpha_bar: f64) -> Vec<f64> {
        let sa = alpha_bar.sqrt();
        let d = self.shape.len() as f64;
        self.templates
            .iter()
            .zip(&self.sigma0)
            .zip(&self.weights)
            .map(|((mu, s), w)| {
                let v = alpha_bar * s * s + (1.0 - alpha_bar);
                let sq: f64 = x
                    .data()
                    .iter()
                    .zip(mu.data())
                    .map(|(xi, mi)| {
                        let r = xi - sa * mi;
                        r * r
                    })
                    .sum();
                w.ln() - sq / (2.0 * v) - 0.5 * d * (2.0 * std::f64::consts::PI * v).ln()
            })
            .collect()
    }

    /// Posterior component probabilities r_k(x) at noise level ᾱ.
    pub fn responsibilities_at(&self, x: &Image, alpha_bar: f64) -> Result<Vec<f64>> {
        self.shape.check(&x.shape())?;
        if !x.is_finite() {
            return Err(Error::Numeric("non-finite input to score".into()));
        }
        Ok(softmax(&self.component_log_densities(x, alpha_bar)))
    }

    /// ∇ₓ log p_t(x) at noise level ᾱ.
    pub fn score_at(&self, x: &Image, alpha_bar: f64) -> Result<ScoreField> {
        let resp = self.responsibilities_at(x, alpha_bar)?;
        let sa = alpha_bar.sqrt();
        let mut out = Image::zeros(self.shape);
        for ((mu, s), r) in self.templates.iter().zip(&self.sigma0).zip(&resp) {
            if *r == 0.0 {
                continue;
            }
            let coef = r / (alpha_bar * s * s + (1.0 - alpha_bar));
            for ((o, xi), mi) in out.data_mut().iter_mut().zip(x.data()).zip(mu.data()) {
                *o += coef * (sa * mi - xi);
            }
        }
        if !out.is_finite() {
            return Err(Error::Numeric("score evaluated to non-finite values".into()));
        }
        Ok(out)
    }

    pub fn true_score(&self, sched: &NoiseSchedule, x: &Image, t: u32) -> Result<ScoreField> {
        self.score_at(x, sched.alpha_bar(t)?)
    }

    /// −log p₀(x) under the clean mixture.
    pub fn nll(&self, x: &Image) -> Result<f64> {
        self.shape.check(&x.shape())?;
        if self.sigma0.iter().any(|s| *s <= 0.0) {
            return Err(Error::Numeric("clean density undefined for sigma0 = 0".into()));
        }
        Ok(-log_sum_exp(&self.component_log_densities(x, 1.0)))
    }

    /// Index of the component with the highest clean-data responsibility.
    pub fn dominant_component(&self, x: &Image) -> usize {
        let lds = self.component_log_densities(x, 1.0);
        argmax(&lds)
    }

    /// Draws `n` i.i.d. clean samples.
    pub fn sample_data(&self, n: usize, seed: SampleSeed) -> Vec<Image> {
        let mut rng = seed.stream(0, Purpose::DataSample);
        (0..n)
            .map(|_| {
                let u: f64 = rng.random();
                let k = pick(&self.weights, u);
                let s = self.sigma0[k];
                self.templates[k].map(|m| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + s * z
                })
            })
            .collect()
    }
}

fn pick(weights: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| {
            if x > best.1 {
                (i, x)
            } else {
                best
            }
        })
        .0
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(v);
    v.iter().map(|x| (x - lse).exp()).collect()
}

/// Checkerboard, horizontal gradient, centered disk and horizontal stripes, valued in [−1, 1].
pub fn default_templates(h: usize, w: usize) -> Vec<Image> {
    let shape = Shape::new(1, h, w);
    let build = |f: &dyn Fn(usize, usize) -> f64| {
        let mut img = Image::zeros(shape);
        for r in 0..h {
            for c in 0..w {
                img.set(0, r, c, f(r, c));
            }
        }
        img
    };
    let sign = |b: bool| if b { 1.0 } else { -1.0 };
    let (cr, cc) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let radius = h.min(w) as f64 * 5.0 / 16.0;
    vec![
        build(&|r, c| sign((r / 4 + c / 4) % 2 == 0)),
        build(&|_, c| -1.0 + 2.0 * c as f64 / (w.max(2) - 1) as f64),
        build(&|r, c| {
            let d2 = (r as f64 - cr).powi(2) + (c as f64 - cc).powi(2);
            sign(d2 <= radius * radius)
        }),
        build(&|r, _| sign((r / 2) % 2 == 0)),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::NoiseSchedule;
    use approx::assert_relative_eq;

    fn single(mu: Image, sigma: f64) -> GmmModel {
        GmmModel::new(vec![mu], vec![1.0], vec![sigma]).unwrap()
    }

    #[test]
    fn marginal_endpoints() {
        let m = GmmModel::desk_default();
        let p = m.marginal_params_at(1.0);
        assert_eq!(p[0].mean, m.templates()[0]);
        assert_relative_eq!(p[0].variance, 0.0025, epsilon = 1e-15);
        let p = m.marginal_params_at(1e-300);
        assert!(p[2].mean.data().iter().all(|v| v.abs() < 1e-140));
        assert_relative_eq!(p[2].variance, 1.0, epsilon = 1e-12);
        let unit = single(m.templates()[1].clone(), 1.0);
        for ab in [0.9, 0.3, 0.01] {
            assert_relative_eq!(unit.marginal_params_at(ab)[0].variance, 1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn score_vanishes_at_single_gaussian_mode() {
        let sched = NoiseSchedule::default_linear();
        let mu = default_templates(16, 16).remove(2);
        let m = single(mu.clone(), 0.05);
        let ab = sched.alpha_bar(300).unwrap();
        let s = m.true_score(&sched, &mu.scale(ab.sqrt()), 300).unwrap();
        assert!(s.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn symmetric_pair_has_zero_score_at_origin() {
        let mu = default_templates(8, 8).remove(0);
        let m = GmmModel::new(vec![mu.clone(), mu.scale(-1.0)], vec![0.5, 0.5], vec![0.1, 0.1])
            .unwrap();
        let s = m.score_at(&Image::zeros(mu.shape()), 0.4).unwrap();
        assert!(s.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn unit_variance_single_component_is_affine() {
        let mu = default_templates(16, 16).remove(1);
        let m = single(mu.clone(), 1.0);
        let x = Image::filled(mu.shape(), 0.3);
        let ab: f64 = 0.37;
        let s = m.score_at(&x, ab).unwrap();
        for ((si, xi), mi) in s.data().iter().zip(x.data()).zip(mu.data()) {
            assert_relative_eq!(*si, ab.sqrt() * mi - xi, epsilon = 1e-15);
        }
    }

    #[test]
    fn responsibilities_sum_to_one() {
        let m = GmmModel::desk_default();
        let x = Image::filled(m.shape(), 0.2);
        for ab in [1e-4, 0.05, 0.5, 0.999] {
            let r = m.responsibilities_at(&x, ab).unwrap();
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_input_rejected() {
        let m = GmmModel::desk_default();
        let mut x = Image::zeros(m.shape());
        x.set(0, 0, 0, f64::NAN);
        assert!(matches!(m.score_at(&x, 0.5), Err(Error::Numeric(_))));
    }

    #[test]
    fn zero_sigma_samples_equal_template() {
        let mu = default_templates(16, 16).remove(3);
        let m = single(mu.clone(), 0.0);
        let xs = m.sample_data(5, SampleSeed::new(1, 0));
        assert!(xs.iter().all(|x| *x == mu));
    }

    #[test]
    fn sampling_is_deterministic() {
        let m = GmmModel::desk_default();
        let a = m.sample_data(20, SampleSeed::new(9, 1));
        let b = m.sample_data(20, SampleSeed::new(9, 1));
        assert_eq!(a, b);
    }

    #[test]
    fn empirical_component_frequencies() {
        // Binomial std at n = 1e4, p = 0.3 is 0.0046; ±0.02 is > 4 sigma.
        let t = default_templates(16, 16);
        let m = GmmModel::new(vec![t[0].clone(), t[3].clone()], vec![0.3, 0.7], vec![0.05; 2])
            .unwrap();
        let xs = m.sample_data(10_000, SampleSeed::new(3, 0));
        let first = xs.iter().filter(|x| m.dominant_component(x) == 0).count();
        let freq = first as f64 / 1e4;
        assert!((freq - 0.3).abs() < 0.02, "freq {freq}");
    }

    #[test]
    fn single_component_nll_is_gaussian() {
        let mu = default_templates(4, 4).remove(0);
        let m = single(mu.clone(), 0.5);
        let x = mu.map(|v| v + 0.1);
        let d = 16.0;
        let expect = 16.0 * 0.01 / (2.0 * 0.25) + 0.5 * d * (2.0 * std::f64::consts::PI * 0.25).ln();
        assert_relative_eq!(m.nll(&x).unwrap(), expect, epsilon = 1e-10);
    }

    #[test]
    fn nll_increases_far_from_templates() {
        let m = GmmModel::desk_default();
        let mut prev = m.nll(&m.templates()[0]).unwrap();
        for shift in [0.5, 1.0, 2.0, 4.0] {
            let x = m.templates()[0].map(|v| v + shift + 3.0);
            let cur = m.nll(&x).unwrap();
            assert!(cur > prev);
            prev = cur;
        }
    }

    #[test]
    fn rejects_inconsistent_models() {
        let t = default_templates(4, 4);
        assert!(GmmModel::new(t.clone(), vec![0.5, 0.5], vec![0.1; 4]).is_err());
        assert!(GmmModel::new(t.clone(), vec![0.3; 4], vec![0.1; 4]).is_err());
        assert!(GmmModel::new(
            vec![t[0].clone(), Image::zeros(Shape::new(1, 2, 2))],
            vec![0.5, 0.5],
            vec![0.1; 2]
        )
        .is_err());
    }
}
