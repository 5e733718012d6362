use sedkit::dists::{closed_form_eig, IsotropicGaussian};
use sedkit::env::{ConjugateGaussianTask, Environment, SourceLocationTask};
use sedkit::estimators::{rollout_policy, scee, AnalyticGaussianPosterior, FlowProposal, Proposal, RandomPolicy, RolloutSet};
use sedkit::flows::{fit_posterior, FitSettings, FlowConfig};
use sedkit::{History, Rng};

fn small_flow() -> FlowConfig {
    FlowConfig {
        layers: 4,
        hidden: vec![32, 32],
        ..FlowConfig::default()
    }
}

fn pairs(ro: &RolloutSet) -> (Vec<Vec<f64>>, Vec<History>) {
    ro.rollouts.iter().map(|r| (r.theta.clone(), r.history.clone())).unzip()
}

fn mean_nll(q: &dyn Proposal, ro: &RolloutSet) -> f64 {
    let ts: Vec<&[f64]> = ro.rollouts.iter().map(|r| r.theta.as_slice()).collect();
    let hs: Vec<&History> = ro.rollouts.iter().map(|r| &r.history).collect();
    -q.log_q(&ts, &hs).unwrap().iter().sum::<f64>() / ts.len() as f64
}

#[test]
fn flow_learns_the_conjugate_posterior() {
    let (k, s0, s, t) = (2, 1.0, 1.0, 3);
    let env = Environment::new(ConjugateGaussianTask::new(k, 0.0, s0, s).unwrap(), t).unwrap();
    let train = rollout_policy(&env, &RandomPolicy, &Rng::new(1), 6_000).unwrap();
    let (thetas, hists) = pairs(&train);
    let settings = FitSettings {
        epochs: 15,
        ..FitSettings::default()
    };
    let (net, store, trace) = fit_posterior(&env, &small_flow(), &thetas, &hists, &settings, &mut Rng::new(2)).unwrap();
    assert!(trace.holdout[trace.best_epoch] < trace.holdout[0]);

    let test = rollout_policy(&env, &RandomPolicy, &Rng::new(3), 4_000).unwrap();
    let flow = FlowProposal {
        net: &net,
        store: &store,
        env: &env,
        floor: None,
    };
    let exact = AnalyticGaussianPosterior::new(IsotropicGaussian::new(vec![0.0; k], s0).unwrap(), s);
    // E[KL(p || q)] = held-out NLL gap, which cannot be negative beyond noise
    let gap = mean_nll(&flow, &test) - mean_nll(&exact, &test);
    assert!((-0.05..0.15).contains(&gap), "NLL gap {gap}");

    let r = scee(&test, &flow, env.prior().entropy(), &env, 0).unwrap();
    let truth = closed_form_eig(k, s0, s, t);
    assert!(r.value <= truth + 3.0 * r.stderr, "{} vs {truth}", r.value);
    assert!(r.value >= truth - 0.15, "{} vs {truth}", r.value);
}

#[test]
fn held_out_loss_falls_on_source_location() {
    let env = Environment::new(SourceLocationTask::default(), 2).unwrap();
    let ro = rollout_policy(&env, &RandomPolicy, &Rng::new(4), 3_000).unwrap();
    let (thetas, hists) = pairs(&ro);
    let settings = FitSettings {
        epochs: 20,
        batch: 64,
        ..FitSettings::default()
    };
    let (_, _, trace) = fit_posterior(&env, &small_flow(), &thetas, &hists, &settings, &mut Rng::new(5)).unwrap();
    assert_eq!(trace.holdout.len(), 20);
    assert!(trace.holdout.iter().all(|v| v.is_finite()));
    let best = trace.holdout[trace.best_epoch];
    assert!(best < trace.holdout[0] - 0.1, "{:?}", trace.holdout);
    // a useful posterior beats the prior
    assert!(best < env.prior().entropy(), "{best} vs {}", env.prior().entropy());
}
