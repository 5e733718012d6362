use super::*;
use crate::dists::{closed_form_eig, Beta, Prior, PriorBlock};
use crate::env::{ConjugateGaussianTask, DesignSpace, LikelihoodModel};
use crate::History;

/// `θ ~ Beta(1, 1)`, `y ~ Bernoulli(θ)`; the design is ignored.
#[derive(Debug)]
struct Coin {
    prior: Prior,
    design: DesignSpace,
}

impl Coin {
    fn env(t: usize) -> Environment {
        let m = Coin {
            prior: Prior::new(vec![PriorBlock::Beta(Beta::new(1.0, 1.0).unwrap())]),
            design: DesignSpace::Box {
                lo: vec![0.0],
                hi: vec![1.0],
            },
        };
        Environment::new(m, t).unwrap()
    }
}

impl LikelihoodModel for Coin {
    fn name(&self) -> &'static str {
        "coin"
    }
    fn prior(&self) -> &Prior {
        &self.prior
    }
    fn design_space(&self) -> &DesignSpace {
        &self.design
    }
    fn outcome_dim(&self) -> usize {
        1
    }
    fn simulate(&self, theta: &[f64], _d: &[f64], rng: &mut Rng) -> Vec<f64> {
        vec![if rng.uniform() < theta[0] { 1.0 } else { 0.0 }]
    }
    fn log_lik(&self, y: &[f64], theta: &[f64], _d: &[f64]) -> f64 {
        if y[0] > 0.5 {
            theta[0].ln()
        } else {
            (1.0 - theta[0]).ln()
        }
    }
    fn feature_dim(&self) -> usize {
        1
    }
    fn features(&self, _d: &[f64], y: &[f64], out: &mut Vec<f64>) {
        out.push(y[0]);
    }
}

/// Mutual information between a uniform coin bias and two flips, by
/// enumerating the four outcome sequences.
fn two_flip_eig() -> f64 {
    // P(00) = P(11) = 1/3, P(01) = P(10) = 1/6; E[h(θ)] = 1/2 per flip.
    let joint = [1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0];
    let h: f64 = joint.iter().map(|p: &f64| -p * p.ln()).sum();
    h - 1.0
}

fn gaussian(k: usize, s0: f64, s: f64, t: usize) -> (Environment, ConjugateGaussianTask) {
    let task = ConjugateGaussianTask::new(k, 0.0, s0, s).unwrap();
    (Environment::new(task.clone(), t).unwrap(), task)
}

#[test]
fn coin_enumeration_matches_both_bounds() {
    let env = Coin::env(2);
    let truth = two_flip_eig();
    assert!((truth - 0.329_66).abs() < 1e-4);
    let r = rollout_policy(&env, &RandomPolicy, &Rng::new(1), 20_000).unwrap();
    let lo = spce(&r, &env, 1000, &Rng::new(2)).unwrap();
    let hi = snmc(&r, &env, 1000, &Rng::new(2)).unwrap();
    for rep in [&lo, &hi] {
        assert!((rep.value - truth).abs() < 4.0 * rep.stderr + 5e-3, "{rep:?} vs {truth}");
    }
    assert!(lo.value <= hi.value);
}

#[test]
fn spce_is_zero_without_contrasts() {
    let (env, _) = gaussian(3, 1.0, 1.0, 4);
    let r = rollout_policy(&env, &RandomPolicy, &Rng::new(0), 50).unwrap();
    let rep = spce(&r, &env, 0, &Rng::new(1)).unwrap();
    assert_eq!(rep.value, 0.0);
    assert_eq!(rep.stderr, 0.0);
    assert!(snmc(&r, &env, 0, &Rng::new(1)).is_err());
}

#[test]
fn spce_never_exceeds_its_ceiling() {
    // near-noiseless outcomes push every sample against log(L + 1)
    let (env, _) = gaussian(10, 4.0, 1e-4, 3);
    let r = rollout_policy(&env, &RandomPolicy, &Rng::new(0), 200).unwrap();
    for l in [1, 7, 100] {
        let rep = spce(&r, &env, l, &Rng::new(3)).unwrap();
        let cap = ((l + 1) as f64).ln();
        assert!(rep.value <= cap, "{} > {cap}", rep.value);
        assert!(rep.value > cap - 1e-6);
    }
}

#[test]
fn bounds_bracket_closed_form_on_batch_means() {
    let (env, _) = gaussian(10, 1.0, 1.0, 1);
    let truth = closed_form_eig(10, 1.0, 1.0, 1);
    let r = rollout_policy(&env, &RandomPolicy, &Rng::new(4), 4000).unwrap();
    let lo = spce(&r, &env, 64, &Rng::new(5)).unwrap();
    let hi = snmc(&r, &env, 64, &Rng::new(5)).unwrap();
    assert!(lo.value <= hi.value);
    assert!(lo.value < truth + 3.0 * lo.stderr);
    assert!(hi.value > truth - 3.0 * hi.stderr);
}

#[test]
fn per_sample_ordering_follows_mean_contrast_likelihood() {
    let (env, _) = gaussian(2, 1.0, 0.5, 2);
    let r = rollout_policy(&env, &RandomPolicy, &Rng::new(6), 300).unwrap();
    let l = 9;
    let (lo, hi) = contrastive_samples(&r, &env, l, &Rng::new(7), 4).unwrap();
    let terms = contrastive_terms(&r, &env, l, &Rng::new(7), 4).unwrap();
    let (off_lo, off_hi) = (((l + 1) as f64).ln(), (l as f64).ln());
    for ((a, b), (ll0, acc)) in lo.iter().zip(&hi).zip(&terms) {
        let mean_contrast = acc.value() - off_hi;
        let gap = (b + off_hi) - (a + off_lo);
        assert_eq!(gap >= -1e-12, *ll0 >= mean_contrast - 1e-12);
    }
}

#[test]
fn chunking_and_worker_layout_do_not_change_results() {
    let (env, _) = gaussian(3, 1.0, 1.0, 3);
    let r = rollout_policy(&env, &RandomPolicy, &Rng::new(8), 64).unwrap();
    let a = contrastive_samples(&r, &env, 50, &Rng::new(9), 7).unwrap();
    let b = contrastive_samples(&r, &env, 50, &Rng::new(9), 50).unwrap();
    for (x, y) in a.0.iter().zip(&b.0) {
        assert!((x - y).abs() < 1e-12);
    }
    let small = rollout_policy(&env, &RandomPolicy, &Rng::new(8), 10).unwrap();
    assert_eq!(small.rollouts[..], r.rollouts[..10]);
}

#[test]
fn scee_with_exact_posterior_is_unbiased() {
    let (env, task) = gaussian(10, 1.0, 1.0, 2);
    let truth = closed_form_eig(10, 1.0, 1.0, 2);
    let r = rollout_policy(&env, &RandomPolicy, &Rng::new(10), 4000).unwrap();
    let q = AnalyticGaussianPosterior::new(task.prior_gaussian().clone(), 1.0);
    let rep = scee(&r, &q, env.prior().entropy(), &env, 10).unwrap();
    assert!((rep.value - truth).abs() < 4.0 * rep.stderr, "{rep:?} vs {truth}");
    assert_eq!(rep.excluded, 0);
    let blind = scee(&r, &PriorProposal(env.prior().clone()), env.prior().entropy(), &env, 10).unwrap();
    assert!(blind.value.abs() < 4.0 * blind.stderr);
    let wide = scee(&r, &q.clone().inflated(4.0), env.prior().entropy(), &env, 10).unwrap();
    assert!(wide.value < rep.value);
}

#[test]
fn sace_reductions() {
    let (env, task) = gaussian(3, 2.0, 1.0, 3);
    let r = rollout_policy(&env, &RandomPolicy, &Rng::new(11), 200).unwrap();
    let q = AnalyticGaussianPosterior::new(task.prior_gaussian().clone(), 1.0).inflated(1.5);
    let lq = cross_entropy_terms(&r, &q).unwrap();
    let s0 = sace_samples(&r, &q, &env, 0, &Rng::new(1), 16).unwrap();
    for ((s, lqi), ro) in s0.iter().zip(&lq).zip(&r.rollouts) {
        assert!((s - (lqi - env.prior().log_prob(&ro.theta))).abs() < 1e-9);
    }
    // exact posterior: every importance weight equals the evidence
    let exact = AnalyticGaussianPosterior::new(task.prior_gaussian().clone(), 1.0);
    let lq = cross_entropy_terms(&r, &exact).unwrap();
    let s = sace_samples(&r, &exact, &env, 25, &Rng::new(2), 16).unwrap();
    for ((s, lqi), ro) in s.iter().zip(&lq).zip(&r.rollouts) {
        assert!((s - (lqi - env.prior().log_prob(&ro.theta))).abs() < 1e-8);
    }
    // prior proposal recovers sPCE on the same draws
    let prior = PriorProposal(env.prior().clone());
    let a = sace_samples(&r, &prior, &env, 40, &Rng::new(3), DEFAULT_CHUNK).unwrap();
    let (b, _) = contrastive_samples(&r, &env, 40, &Rng::new(3), DEFAULT_CHUNK).unwrap();
    let off = (41f64).ln();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - (y + off)).abs() < 1e-9, "{x} vs {}", y + off);
    }
}

#[test]
fn implicit_environment_is_refused() {
    let (env, _) = gaussian(2, 1.0, 1.0, 2);
    let r = rollout_policy(&env, &RandomPolicy, &Rng::new(0), 4).unwrap();
    let imp = env.clone().implicit();
    assert!(matches!(spce(&r, &imp, 4, &Rng::new(0)), Err(Error::Capability(_))));
    assert!(matches!(snmc(&r, &imp, 4, &Rng::new(0)), Err(Error::Capability(_))));
}

#[test]
fn constant_policy_designs_are_clamped_and_counted() {
    let (env, _) = gaussian(2, 1.0, 1.0, 3);
    let r = rollout_policy(&env, &ConstantPolicy(vec![5.0]), &Rng::new(0), 4).unwrap();
    assert_eq!(r.clamped, 12);
    assert!(r.rollouts.iter().all(|ro| ro.history.designs().iter().all(|d| d[0] == 1.0)));
    assert!(rollout_policy(&env, &ConstantPolicy(vec![0.0, 0.0]), &Rng::new(0), 4).is_err());
    let h = History::new();
    assert!(h.is_empty());
}

#[test]
fn stderr_shrinks_at_root_n() {
    let (env, _) = gaussian(4, 1.0, 1.0, 1);
    let truth = closed_form_eig(4, 1.0, 1.0, 1);
    let rows = convergence_sweep(&[250, 1000, 4000], 3, truth, &Rng::new(12), |n, rng| {
        let r = rollout_policy(&env, &RandomPolicy, &rng.split(0), n)?;
        spce(&r, &env, 128, &rng.split(1))
    })
    .unwrap();
    let slope = stderr_slope(&rows);
    assert!((slope + 0.5).abs() < 0.1, "slope {slope}");
}

#[test]
fn report_serialises_with_expected_header() {
    let (env, _) = gaussian(2, 1.0, 1.0, 1);
    let r = rollout_policy(&env, &RandomPolicy, &Rng::new(0), 8).unwrap();
    let rep = spce(&r, &env, 4, &Rng::new(0)).unwrap();
    let mut w = csv::Writer::from_writer(vec![]);
    w.serialize(&rep).unwrap();
    let s = String::from_utf8(w.into_inner().unwrap()).unwrap();
    assert!(s.starts_with("estimator,env,T,L,n,seed,value,stderr,excluded,wall_ms\n"), "{s}");
}
