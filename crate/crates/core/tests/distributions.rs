use proptest::prelude::*;
use rand::Rng;
use sblwta_core::distributions::*;
use sblwta_core::rng::{self, clamp_noise};
use sblwta_core::special::{logit, sigmoid};
use sblwta_core::{Graph, Tensor};
use statrs::function::gamma::{gamma, ln_gamma};

const N: usize = 100_000;

fn tau(v: f64) -> Temperature {
    Temperature::new(v).unwrap()
}

/// `E[X^k]` for Kumaraswamy(a, b): `b B(1 + k/a, b)`.
fn kuma_moment(a: f64, b: f64, k: f64) -> f64 {
    b * gamma(1.0 + k / a) * gamma(b) / gamma(1.0 + k / a + b)
}

#[test]
fn kumaraswamy_moments_match_analytic() {
    let mut r = rng::stream(1, 0);
    let (a, b) = (2.0, 3.0);
    let xs: Vec<f64> = (0..N).map(|_| sample_kumaraswamy(a, b, r.gen())).collect();
    let m1 = xs.iter().sum::<f64>() / N as f64;
    let m2 = xs.iter().map(|x| x * x).sum::<f64>() / N as f64;
    let (e1, e2) = (kuma_moment(a, b, 1.0), kuma_moment(a, b, 2.0));
    assert!((m1 - e1).abs() / e1 < 0.01, "mean {m1} vs {e1}");
    assert!((m2 - e2).abs() / e2 < 0.01, "second moment {m2} vs {e2}");
}

#[test]
fn beta_prior_mean() {
    let mut r = rng::stream(2, 0);
    let m = (0..N).map(|_| sample_beta_prior(2.0, r.gen())).sum::<f64>() / N as f64;
    assert!((m - 2.0 / 3.0).abs() / (2.0 / 3.0) < 0.01, "{m}");
}

#[test]
fn gumbel_softmax_argmax_frequencies() {
    let mut r = rng::stream(3, 0);
    let logits = [1.0, 0.0];
    let mut counts = [0usize; 2];
    for _ in 0..N {
        let s = sample_gumbel_softmax(&logits, tau(0.5), &[r.gen(), r.gen()]).unwrap();
        counts[if s[1] > s[0] { 1 } else { 0 }] += 1;
    }
    let p0 = 1.0 / (1.0 + (-1.0f64).exp());
    let tv = (counts[0] as f64 / N as f64 - p0).abs();
    assert!(tv < 0.02, "tv {tv}");
}

#[test]
fn low_temperature_concrete_mean_approaches_bernoulli() {
    let mut r = rng::stream(4, 0);
    let m = (0..N)
        .map(|_| sample_binary_concrete(logit(0.3), tau(0.1), r.gen()))
        .sum::<f64>()
        / N as f64;
    assert!((m - 0.3).abs() < 0.02, "{m}");
}

#[test]
fn bernoulli_kl_matches_monte_carlo() {
    let mut r = rng::stream(5, 0);
    for &(q, p) in &[(0.5, 0.25), (0.9, 0.3), (0.2, 0.6)] {
        let mc = (0..N)
            .map(|_| {
                if r.gen::<f64>() < q {
                    (q / p).ln()
                } else {
                    ((1.0 - q) / (1.0 - p)).ln()
                }
            })
            .sum::<f64>()
            / N as f64;
        let kl = kl_bernoulli(q, p);
        assert!((kl - mc).abs() < 0.01, "q={q} p={p}: {kl} vs {mc}");
    }
}

fn kuma_log_density(a: f64, b: f64, x: f64) -> f64 {
    a.ln() + b.ln() + (a - 1.0) * x.ln() + (b - 1.0) * (-x.powf(a)).ln_1p()
}

fn beta_alpha_log_density(alpha: f64, x: f64) -> f64 {
    // Beta(alpha, 1): alpha x^(alpha - 1); ln B(alpha, 1) = -ln alpha
    -(ln_gamma(alpha) + ln_gamma(1.0) - ln_gamma(alpha + 1.0)) + (alpha - 1.0) * x.ln()
}

/// `E_q[log q - log p]` over 10^6 stratified inverse-CDF draws of q.
fn kuma_kl_monte_carlo(a: f64, b: f64, alpha: f64) -> f64 {
    let n = 1_000_000;
    let mut total = 0.0;
    for i in 0..n {
        let u = (i as f64 + 0.5) / n as f64;
        // sample with u in place of 1 - u keeps x away from 0 and 1 symmetrically
        let x = (-((u.ln()) / b).exp_m1()).powf(1.0 / a);
        if x > 0.0 && x < 1.0 {
            total += kuma_log_density(a, b, x) - beta_alpha_log_density(alpha, x);
        }
    }
    total / n as f64
}

#[test]
fn kumaraswamy_beta_kl_matches_monte_carlo_grid() {
    let grid = [0.5, 1.0, 2.0, 5.0];
    for &a in &grid {
        for &b in &grid {
            for &alpha in &grid {
                let kl = kl_kumaraswamy_beta(a, b, alpha, KL_SERIES_TERMS).unwrap();
                let mc = kuma_kl_monte_carlo(a, b, alpha);
                assert!((kl - mc).abs() < 0.02, "a={a} b={b} alpha={alpha}: {kl} vs {mc}");
            }
        }
    }
}

#[test]
fn kumaraswamy_beta_kl_two_two_one() {
    let kl = kl_kumaraswamy_beta(2.0, 2.0, 1.0, 10).unwrap();
    let mut r = rng::stream(6, 0);
    let n = 1_000_000;
    let mc = (0..n)
        .map(|_| {
            let x = sample_kumaraswamy(2.0, 2.0, r.gen());
            kuma_log_density(2.0, 2.0, x) - beta_alpha_log_density(1.0, x)
        })
        .sum::<f64>()
        / n as f64;
    assert!((kl - mc).abs() < 0.02, "{kl} vs {mc}");
}

#[test]
fn gumbel_softmax_low_temperature_limit() {
    let mut r = rng::stream(7, 0);
    for _ in 0..1000 {
        let logits: Vec<f64> = (0..4).map(|_| r.gen_range(-3.0..3.0)).collect();
        let noise: Vec<f64> = (0..4).map(|_| r.gen()).collect();
        let perturbed: Vec<f64> = logits.iter().zip(&noise).map(|(l, &u)| l + gumbel(u)).collect();
        let mut sorted = perturbed.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        if sorted[0] - sorted[1] < 0.1 {
            continue;
        }
        let s = sample_gumbel_softmax(&logits, tau(0.01), &noise).unwrap();
        let best = sblwta_core::tensor::argmax(&perturbed);
        assert!(s[best] > 0.999, "{s:?}");
    }
}

fn fd(f: &dyn Fn(f64) -> f64, x: f64) -> f64 {
    let h = 1e-5;
    (f(x + h) - f(x - h)) / (2.0 * h)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn stick_breaking_matches_prefix_products(u in prop::collection::vec(1e-3f64..0.999, 0..12)) {
        let pi = stick_breaking(&u);
        prop_assert_eq!(pi.len(), u.len());
        let mut prod = 1.0;
        for k in 0..u.len() {
            prod *= u[k];
            prop_assert!((pi[k] - prod).abs() <= 1e-12);
            prop_assert!(pi[k] > 0.0);
            if k > 0 {
                prop_assert!(pi[k] <= pi[k - 1]);
            }
        }
    }

    #[test]
    fn kl_terms_are_nonnegative(
        q in 0.0f64..=1.0, p in 0.0f64..=1.0,
        a in 0.05f64..20.0, b in 0.05f64..20.0, alpha in 0.05f64..20.0,
        simplex in prop::collection::vec(0.0f64..1.0, 2..6),
    ) {
        prop_assert!(kl_bernoulli(q, p) >= -1e-9);
        prop_assert!(kl_kumaraswamy_beta(a, b, alpha, KL_SERIES_TERMS).unwrap() >= -1e-9);
        let s: f64 = simplex.iter().sum();
        prop_assume!(s > 1e-9);
        let qv: Vec<f64> = simplex.iter().map(|v| v / s).collect();
        let kl = kl_discrete_uniform(&qv);
        prop_assert!(kl >= -1e-9);
        prop_assert!(kl <= (qv.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn kl_truncation_is_stable(a in 0.5f64..5.0, b in 0.5f64..5.0, alpha in 0.5f64..5.0) {
        let k10 = kl_kumaraswamy_beta(a, b, alpha, 10).unwrap();
        let k50 = kl_kumaraswamy_beta(a, b, alpha, 50).unwrap();
        prop_assert!((k10 - k50).abs() < 1e-3);
    }

    #[test]
    fn reparameterized_samplers_match_finite_differences(
        a in 0.3f64..5.0, b in 0.3f64..5.0, u in 0.01f64..0.99,
        l0 in -3.0f64..3.0, l1 in -3.0f64..3.0, u2 in 0.01f64..0.99, t in 0.2f64..2.0,
    ) {
        // Kumaraswamy wrt a and b
        let mut g = Graph::new();
        let av = g.leaf(Tensor::vector(vec![a]));
        let bv = g.leaf(Tensor::vector(vec![b]));
        let s = kumaraswamy_rsample_var(&mut g, av, bv, &[u]).unwrap();
        let loss = g.sum(s);
        prop_assert!((g.value(loss).item().unwrap() - sample_kumaraswamy(a, b, u)).abs() < 1e-12);
        let grads = g.backward(loss).unwrap();
        let da = fd(&|x| sample_kumaraswamy(x, b, u), a);
        let db = fd(&|x| sample_kumaraswamy(a, x, u), b);
        prop_assert!(rel(grads.wrt(av).data()[0], da) < 1e-4);
        prop_assert!(rel(grads.wrt(bv).data()[0], db) < 1e-4);

        // Gumbel-Softmax wrt the first logit, through the first output
        let noise = Tensor::vector(vec![u, u2]);
        let mut g = Graph::new();
        let lv = g.leaf(Tensor::vector(vec![l0, l1]));
        let s = gumbel_softmax_var(&mut g, lv, tau(t), &noise).unwrap();
        let w = g.constant(Tensor::vector(vec![1.0, 0.0]));
        let p = g.mul(s, w).unwrap();
        let loss = g.sum(p);
        let gl = g.backward(loss).unwrap().wrt(lv);
        let num = fd(&|x| sample_gumbel_softmax(&[x, l1], tau(t), &[u, u2]).unwrap()[0], l0);
        prop_assert!(rel(gl.data()[0], num) < 1e-4);

        // binary Concrete wrt the gate logit
        let mut g = Graph::new();
        let zv = g.leaf(Tensor::vector(vec![l0]));
        let z = binary_concrete_var(&mut g, zv, tau(t), &Tensor::vector(vec![u])).unwrap();
        let loss = g.sum(z);
        let gz = g.backward(loss).unwrap().wrt(zv);
        let num = fd(&|x| sample_binary_concrete(x, tau(t), u), l0);
        prop_assert!(rel(gz.data()[0], num) < 1e-4);
    }
}

#[test]
fn concrete_symmetry_and_saturation() {
    for t in [0.1, 1.0, 5.0] {
        assert_eq!(sample_binary_concrete(0.0, tau(t), 0.5), 0.5);
    }
    assert!(sample_binary_concrete(20.0, tau(0.5), 0.5) > 1.0 - 1e-12);
    assert!((sigmoid(logit(0.3)) - 0.3).abs() < 1e-15);
    assert_eq!(clamp_noise(0.0), 1e-6);
}
