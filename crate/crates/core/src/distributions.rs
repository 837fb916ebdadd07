//! Stick-breaking IBP machinery: Kumaraswamy/Beta sticks, Bernoulli and
//! Concrete gates, Discrete and Gumbel-Softmax winner indicators, and the KL
//! terms between posteriors and priors.
//!
//! Scalar functions take explicit uniform noise so they are deterministic
//! maps; the `*_var` variants build the same computation on a [`Graph`] so
//! gradients flow into the distribution parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{clamp_noise, NOISE_EPS};
use crate::special::{self, EULER_GAMMA};
use crate::tensor::{Graph, Tensor, Var};

/// Default number of series terms for the Kumaraswamy-Beta KL.
pub const KL_SERIES_TERMS: usize = 10;

/// Relaxation temperature, strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(value: f64) -> Result<Self> {
        if value > 0.0 && value.is_finite() {
            Ok(Temperature(value))
        } else {
            Err(Error::contract(format!("temperature must be > 0, got {value}")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(NOISE_EPS, 1.0 - NOISE_EPS)
}

/// Inverse-CDF draw from Kumaraswamy(a, b).
pub fn sample_kumaraswamy(a: f64, b: f64, u: f64) -> f64 {
    let u = clamp_noise(u);
    (1.0 - (1.0 - u).powf(1.0 / b)).powf(1.0 / a)
}

/// Inverse-CDF draw `u^(1/alpha)` from the Beta(alpha, 1) stick prior.
pub fn sample_beta_prior(alpha: f64, u: f64) -> f64 {
    clamp_noise(u).powf(1.0 / alpha)
}

/// Prefix products `pi_k = u_1 * ... * u_k`.
pub fn stick_breaking(u: &[f64]) -> Vec<f64> {
    u.iter()
        .scan(1.0, |acc, &v| {
            *acc *= v;
            Some(*acc)
        })
        .collect()
}

pub fn gumbel(u: f64) -> f64 {
    -(-clamp_noise(u).ln()).ln()
}

/// Relaxed one-hot sample `softmax((logits + g) / tau)`.
pub fn sample_gumbel_softmax(logits: &[f64], tau: Temperature, noise: &[f64]) -> Result<Vec<f64>> {
    if logits.len() != noise.len() {
        return Err(Error::dim(format!(
            "{} logits but {} noise values",
            logits.len(),
            noise.len()
        )));
    }
    let t = Tensor::vector(
        logits
            .iter()
            .zip(noise)
            .map(|(&l, &u)| (l + gumbel(u)) / tau.value())
            .collect(),
    );
    Ok(t.softmax_last().into_data())
}

/// Logistic noise `log u - log(1 - u)`.
pub fn logistic(u: f64) -> f64 {
    let u = clamp_noise(u);
    u.ln() - (1.0 - u).ln()
}

/// Relaxed Bernoulli draw `sigmoid((logit + log u - log(1-u)) / tau)`.
pub fn sample_binary_concrete(gate_logit: f64, tau: Temperature, noise: f64) -> f64 {
    special::sigmoid((gate_logit + logistic(noise)) / tau.value())
}

/// Index drawn by inverting the categorical CDF at `noise`.
pub fn sample_discrete_index(probs: &[f64], noise: f64) -> Result<usize> {
    if probs.is_empty() {
        return Err(Error::contract("sample_discrete on an empty vector"));
    }
    if let Some(i) = probs.iter().position(|&p| p < 0.0 || p.is_nan()) {
        return Err(Error::contract(format!(
            "negative probability {} at index {i}",
            probs[i]
        )));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::contract(format!("probabilities sum to {total}")));
    }
    let mut cdf = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        cdf += p;
        if noise < cdf {
            return Ok(i);
        }
    }
    // noise landed in the rounding slack above the last cumulative value
    Ok(probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1))
}

/// One-hot categorical draw.
pub fn sample_discrete(probs: &[f64], noise: f64) -> Result<Vec<f64>> {
    let k = sample_discrete_index(probs, noise)?;
    let mut out = vec![0.0; probs.len()];
    out[k] = 1.0;
    Ok(out)
}

/// KL(q || Uniform(U)) with `0 log 0 = 0`.
pub fn kl_discrete_uniform(q: &[f64]) -> f64 {
    let log_u = (q.len() as f64).ln();
    q.iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * (p.ln() + log_u))
        .sum()
}

/// KL(Bernoulli(q) || Bernoulli(p)) with both clamped into the noise band.
pub fn kl_bernoulli(q_prob: f64, p_prob: f64) -> f64 {
    let (q, p) = (clamp_prob(q_prob), clamp_prob(p_prob));
    q * (q / p).ln() + (1.0 - q) * ((1.0 - q) / (1.0 - p)).ln()
}

/// Beta function via log-gamma.
fn beta_fn(x: f64, y: f64) -> f64 {
    (ln_gamma(x) + ln_gamma(y) - ln_gamma(x + y)).exp()
}

/// Lanczos approximation (g = 7, n = 9), accurate to ~1e-15 for x > 0.
fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let t = x + 7.5;
    let series = COEF[1..]
        .iter()
        .enumerate()
        .fold(COEF[0], |acc, (i, c)| acc + c / (x + i as f64 + 1.0));
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + series.ln()
}

/// KL(Kumaraswamy(a, b) || Beta(alpha, beta)) truncated after `n_terms` series terms.
fn kl_kumaraswamy_beta_general(a: f64, b: f64, alpha: f64, beta: f64, n_terms: usize) -> f64 {
    let psi_term = -EULER_GAMMA - special::digamma(b) - 1.0 / b;
    let log_beta_prior = ln_gamma(alpha) + ln_gamma(beta) - ln_gamma(alpha + beta);
    let series: f64 = (1..=n_terms)
        .map(|m| {
            let m = m as f64;
            beta_fn(m / a, b) / (m + a * b)
        })
        .sum();
    ((a - alpha) / a) * psi_term + (a * b).ln() + log_beta_prior - (b - 1.0) / b
        + (beta - 1.0) * b * series
}

/// KL(Kumaraswamy(a, b) || Beta(alpha, 1)).
///
/// With a unit second prior parameter the series coefficient vanishes, so the
/// result does not depend on `n_terms`; it is kept for the general form.
pub fn kl_kumaraswamy_beta(a: f64, b: f64, alpha: f64, n_terms: usize) -> Result<f64> {
    if !(a > 0.0 && b > 0.0 && alpha > 0.0) || n_terms == 0 {
        return Err(Error::contract(format!(
            "kl_kumaraswamy_beta needs positive a, b, alpha and n_terms >= 1 (got {a}, {b}, {alpha}, {n_terms})"
        )));
    }
    Ok(kl_kumaraswamy_beta_general(a, b, alpha, 1.0, n_terms))
}

// ---- graph versions --------------------------------------------------------

/// `log v` for a reparameterized Kumaraswamy(a, b) draw, elementwise over
/// positive `a`, `b` with matching noise.
pub fn kumaraswamy_log_rsample_var(g: &mut Graph, a: Var, b: Var, noise: &[f64]) -> Result<Var> {
    let c = Tensor::new(
        g.shape(b).to_vec(),
        noise.iter().map(|&u| (1.0 - clamp_noise(u)).ln()).collect(),
    )?;
    let c = g.constant(c);
    let inv_b = g.pow(b, -1.0)?;
    let t = g.mul(c, inv_b)?;
    let log_base = g.log1m_exp(t)?;
    let inv_a = g.pow(a, -1.0)?;
    g.mul(log_base, inv_a)
}

pub fn kumaraswamy_rsample_var(g: &mut Graph, a: Var, b: Var, noise: &[f64]) -> Result<Var> {
    let lv = kumaraswamy_log_rsample_var(g, a, b, noise)?;
    Ok(g.exp(lv))
}

/// `log pi_k` from log stick lengths along the last axis.
pub fn log_stick_breaking_var(g: &mut Graph, log_v: Var) -> Var {
    g.cumsum(log_v)
}

/// Relaxed one-hot over the last axis of `logits`.
pub fn gumbel_softmax_var(g: &mut Graph, logits: Var, tau: Temperature, noise: &Tensor) -> Result<Var> {
    let perturbed = gumbel_perturb(g, logits, noise)?;
    let scaled = g.scale(perturbed, 1.0 / tau.value());
    Ok(g.softmax(scaled))
}

/// `logits + g` with Gumbel noise built from `noise`.
pub fn gumbel_perturb(g: &mut Graph, logits: Var, noise: &Tensor) -> Result<Var> {
    let gn = g.constant(noise.map(gumbel));
    g.add(logits, gn)
}

/// Relaxed Bernoulli draw for every entry of `gate_logit`.
pub fn binary_concrete_var(g: &mut Graph, gate_logit: Var, tau: Temperature, noise: &Tensor) -> Result<Var> {
    let perturbed = logistic_perturb(g, gate_logit, noise)?;
    let scaled = g.scale(perturbed, 1.0 / tau.value());
    Ok(g.sigmoid(scaled))
}

pub fn logistic_perturb(g: &mut Graph, gate_logit: Var, noise: &Tensor) -> Result<Var> {
    let ln = g.constant(noise.map(logistic));
    g.add(gate_logit, ln)
}

/// Summed KL(Bernoulli(q) || Bernoulli(p)) with broadcasting between `q` and `p`.
pub fn kl_bernoulli_var(g: &mut Graph, q: Var, p: Var) -> Result<Var> {
    let (lo, hi) = (NOISE_EPS, 1.0 - NOISE_EPS);
    let q = g.clamp(q, lo, hi);
    let p = g.clamp(p, lo, hi);
    let log_q = g.log(q)?;
    let log_p = g.log(p)?;
    let q1 = g.one_minus(q);
    let p1 = g.one_minus(p);
    let log_q1 = g.log(q1)?;
    let log_p1 = g.log(p1)?;
    let d0 = g.sub(log_q, log_p)?;
    let d1 = g.sub(log_q1, log_p1)?;
    let t0 = g.mul(q, d0)?;
    let t1 = g.mul(q1, d1)?;
    let total = g.add(t0, t1)?;
    Ok(g.sum(total))
}

/// Summed KL(softmax(logits) || Uniform) over every slice of the last axis.
pub fn kl_discrete_uniform_var(g: &mut Graph, logits: Var) -> Result<Var> {
    let u = *g.shape(logits).last().unwrap_or(&1) as f64;
    let q = g.softmax(logits);
    let log_q = g.log_softmax(logits);
    let shifted = g.affine(log_q, 1.0, u.ln());
    let terms = g.mul(q, shifted)?;
    Ok(g.sum(terms))
}

/// Summed KL(Kumaraswamy(a, b) || Beta(alpha, 1)) over stick vectors `a`, `b`.
pub fn kl_kumaraswamy_beta_var(g: &mut Graph, a: Var, b: Var, alpha: f64) -> Result<Var> {
    // ((a - alpha)/a) * (-gamma - psi(b) - 1/b) + log a + log b - log alpha - (b-1)/b
    let inv_a = g.pow(a, -1.0)?;
    let inv_b = g.pow(b, -1.0)?;
    let ratio = g.scale(inv_a, -alpha);
    let ratio = g.affine(ratio, 1.0, 1.0);
    let psi = g.digamma(b);
    let psi_sum = g.add(psi, inv_b)?;
    let psi_term = g.affine(psi_sum, -1.0, -EULER_GAMMA);
    let first = g.mul(ratio, psi_term)?;
    let log_a = g.log(a)?;
    let log_b = g.log(b)?;
    let logs = g.add(log_a, log_b)?;
    // -(b-1)/b = 1/b - 1
    let tail = g.affine(inv_b, 1.0, -1.0 - alpha.ln());
    let s = g.add(first, logs)?;
    let s = g.add(s, tail)?;
    Ok(g.sum(s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn tau(v: f64) -> Temperature {
        Temperature::new(v).unwrap()
    }

    #[test]
    fn temperature_must_be_positive() {
        assert!(Temperature::new(0.0).is_err());
        assert!(Temperature::new(-1.0).is_err());
        assert!(Temperature::new(f64::NAN).is_err());
    }

    #[test]
    fn kumaraswamy_inverse_cdf_examples() {
        assert!((sample_kumaraswamy(1.0, 1.0, 0.3) - 0.3).abs() < 1e-15);
        assert!((sample_kumaraswamy(2.0, 1.0, 0.25) - 0.5).abs() < 1e-15);
        let lo = sample_kumaraswamy(2.0, 3.0, 0.0);
        let hi = sample_kumaraswamy(2.0, 3.0, 1.0);
        assert!(lo > 0.0 && hi < 1.0);
    }

    #[test]
    fn beta_prior_examples() {
        assert!((sample_beta_prior(1.0, 0.7) - 0.7).abs() < 1e-15);
        assert!(sample_beta_prior(2.0, 1.0 - 1e-12) > 0.999_999);
        let mut r = rng::stream(11, 0);
        let n = 100_000;
        let mean = (0..n).map(|_| sample_beta_prior(2.0, r.gen())).sum::<f64>() / n as f64;
        assert!((mean - 2.0 / 3.0).abs() / (2.0 / 3.0) < 0.01, "mean {mean}");
    }

    #[test]
    fn stick_breaking_examples() {
        assert_eq!(stick_breaking(&[0.5, 0.5, 0.5]), vec![0.5, 0.25, 0.125]);
        assert!(stick_breaking(&[]).is_empty());
        let near = stick_breaking(&[1.0 - 1e-9; 5]);
        assert!(near.iter().all(|&p| (p - 1.0).abs() < 1e-8));
    }

    #[test]
    fn gumbel_softmax_examples() {
        let s = sample_gumbel_softmax(&[10.0, -10.0], tau(0.1), &[0.5, 0.5]).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-4 && s[1] < 1e-4);
        let s = sample_gumbel_softmax(&[0.3; 4], tau(0.7), &[0.42; 4]).unwrap();
        assert!(s.iter().all(|&p| (p - 0.25).abs() < 1e-15));
        assert!(sample_gumbel_softmax(&[0.0], tau(1.0), &[0.1, 0.2]).is_err());
    }

    #[test]
    fn binary_concrete_examples() {
        for t in [0.1, 1.0, 5.0] {
            assert!((sample_binary_concrete(0.0, tau(t), 0.5) - 0.5).abs() < 1e-15);
        }
        assert!(sample_binary_concrete(20.0, tau(0.5), 0.5) > 1.0 - 1e-12);
    }

    #[test]
    fn discrete_examples() {
        assert_eq!(sample_discrete(&[1.0, 0.0], 0.99).unwrap(), vec![1.0, 0.0]);
        assert_eq!(sample_discrete(&[0.5, 0.5], 0.25).unwrap(), vec![1.0, 0.0]);
        assert_eq!(sample_discrete(&[0.5, 0.5], 0.75).unwrap(), vec![0.0, 1.0]);
        assert!(matches!(
            sample_discrete(&[1.2, -0.2], 0.5),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn discrete_frequencies_match_probabilities() {
        let probs = [0.2, 0.5, 0.3];
        let mut counts = [0usize; 3];
        let mut r = rng::stream(5, 0);
        let n = 100_000;
        for _ in 0..n {
            counts[sample_discrete_index(&probs, r.gen()).unwrap()] += 1;
        }
        let tv: f64 = counts
            .iter()
            .zip(&probs)
            .map(|(&c, &p)| (c as f64 / n as f64 - p).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.01, "tv {tv}");
    }

    #[test]
    fn kl_discrete_uniform_examples() {
        assert!(kl_discrete_uniform(&[0.25; 4]).abs() < 1e-15);
        assert!((kl_discrete_uniform(&[1.0, 0.0]) - 2f64.ln()).abs() < 1e-15);
        let mut r = rng::stream(3, 0);
        for _ in 0..1000 {
            let raw: Vec<f64> = (0..5).map(|_| r.gen::<f64>()).collect();
            let s: f64 = raw.iter().sum();
            let q: Vec<f64> = raw.iter().map(|v| v / s).collect();
            let kl = kl_discrete_uniform(&q);
            assert!((-1e-12..=5f64.ln() + 1e-12).contains(&kl));
        }
    }

    #[test]
    fn kl_bernoulli_examples() {
        assert!(kl_bernoulli(0.3, 0.3).abs() < 1e-15);
        let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((kl_bernoulli(0.5, 0.25) - expected).abs() < 1e-15);
        assert!((kl_bernoulli(0.5, 0.25) - 0.1438).abs() < 1e-4);
    }

    #[test]
    fn kl_kumaraswamy_uniform_case_is_zero() {
        assert!(kl_kumaraswamy_beta(1.0, 1.0, 1.0, 10).unwrap().abs() < 1e-14);
        assert!(kl_kumaraswamy_beta(0.0, 1.0, 1.0, 10).is_err());
        assert!(kl_kumaraswamy_beta(1.0, 1.0, 1.0, 0).is_err());
    }

    #[test]
    fn kl_kumaraswamy_truncation_is_stable() {
        let grid = [0.5, 1.0, 2.0, 3.5, 5.0];
        for &a in &grid {
            for &b in &grid {
                for &al in &grid {
                    let k10 = kl_kumaraswamy_beta(a, b, al, 10).unwrap();
                    let k50 = kl_kumaraswamy_beta(a, b, al, 50).unwrap();
                    assert!((k10 - k50).abs() < 1e-3);
                    assert!(k10 >= -1e-9, "KL({a},{b}||{al}) = {k10}");
                }
            }
        }
    }

    #[test]
    fn general_series_converges_for_non_unit_prior() {
        // Beta(2, 3) prior exercises the series; more terms must settle.
        let k10 = kl_kumaraswamy_beta_general(2.0, 2.0, 2.0, 3.0, 10);
        let k200 = kl_kumaraswamy_beta_general(2.0, 2.0, 2.0, 3.0, 200);
        let k400 = kl_kumaraswamy_beta_general(2.0, 2.0, 2.0, 3.0, 400);
        assert!((k200 - k400).abs() < 2e-4, "{k10} {k200} {k400}");
        assert!((k200 - k400).abs() < (k10 - k200).abs() / 100.0);
    }

    #[test]
    fn ln_gamma_known_values() {
        assert!(ln_gamma(1.0).abs() < 1e-14);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-14);
        assert!((ln_gamma(10.0) - 362_880f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn graph_kl_matches_scalar() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::vector(vec![0.5, 2.0, 5.0]));
        let b = g.leaf(Tensor::vector(vec![3.0, 0.7, 1.0]));
        let kl = kl_kumaraswamy_beta_var(&mut g, a, b, 2.0).unwrap();
        let scalar: f64 = [(0.5, 3.0), (2.0, 0.7), (5.0, 1.0)]
            .iter()
            .map(|&(a, b)| kl_kumaraswamy_beta(a, b, 2.0, 10).unwrap())
            .sum();
        assert!((g.value(kl).item().unwrap() - scalar).abs() < 1e-12);
    }

    #[test]
    fn graph_samplers_match_scalar() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::vector(vec![2.0, 0.7]));
        let b = g.leaf(Tensor::vector(vec![3.0, 1.5]));
        let noise = [0.3, 0.8];
        let v = kumaraswamy_rsample_var(&mut g, a, b, &noise).unwrap();
        assert!((g.value(v).data()[0] - sample_kumaraswamy(2.0, 3.0, 0.3)).abs() < 1e-14);
        assert!((g.value(v).data()[1] - sample_kumaraswamy(0.7, 1.5, 0.8)).abs() < 1e-14);

        let logit = g.leaf(Tensor::vector(vec![0.4]));
        let z = binary_concrete_var(&mut g, logit, tau(0.5), &Tensor::vector(vec![0.2])).unwrap();
        assert!((g.value(z).data()[0] - sample_binary_concrete(0.4, tau(0.5), 0.2)).abs() < 1e-15);

        let q = g.leaf(Tensor::vector(vec![0.5]));
        let p = g.constant(Tensor::vector(vec![0.25]));
        let kl = kl_bernoulli_var(&mut g, q, p).unwrap();
        assert!((g.value(kl).item().unwrap() - kl_bernoulli(0.5, 0.25)).abs() < 1e-15);
    }
}
