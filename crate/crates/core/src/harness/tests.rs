use std::path::Path;

use super::*;
use crate::dists::{closed_form_eig, conjugate_posterior, IsotropicGaussian};
use crate::env::{ConjugateGaussianTask, Environment, SourceLocationTask};
use crate::error::Error;
use crate::estimators::AnalyticGaussianPosterior;
use crate::history::History;
use crate::math::mean_stderr;

fn parse(text: &str) -> ExperimentConfig {
    ExperimentConfig::from_toml(text).unwrap()
}

const TINY_TRAINER: &str = r#"
[trainer]
iterations = 4
horizon = 2
batch_size = 8
rollouts_per_iter = 4
updates_per_iter = 1
policy_hidden = [8]
critic_hidden = [8]
action_embed_dim = 4
eval_every = 0.5
eval_rollouts = 8
eval_l = 20
buffer_size = 100

[trainer.flow]
layers = 2
hidden = [8]
embed_dim = 4
encoder_hidden = 8
heads = 2
"#;

#[test]
fn unknown_keys_are_rejected_at_every_level() {
    for text in ["bogus = 1", "[env]\nbogus = 1", "[estimator]\nl = 5", "[trainer]\nbogus = 1", "[table1.flow_fit]\nx = 1"] {
        assert!(ExperimentConfig::from_toml(text).is_err(), "{text}");
    }
    assert_eq!(parse("").estimator.l, 10_000);
}

#[test]
fn trainer_overrides_sit_on_environment_defaults() {
    let cfg = parse("[env]\nname = \"prey_population\"\n[trainer]\ngamma = 0.5");
    let t = cfg.trainer().unwrap();
    assert_eq!(t.gamma, 0.5);
    assert_eq!(t.tau, 1e-2);
    assert_eq!(t.critic_lr, 1e-3);
    assert!(ExperimentConfig::from_toml("[trainer]\ngamma = 2.0").is_err());
}

#[test]
fn environment_variables_override_config_keys() {
    let vars = [
        ("SEDKIT_ESTIMATOR__L", "123"),
        ("SEDKIT_TRAINER__GAMMA", "0.25"),
        ("SEDKIT_SEEDS", "[4, 5]"),
        ("SEDKIT_ENV__NAME", "ces"),
        ("OTHER_THING", "x"),
    ]
    .map(|(k, v)| (k.to_string(), v.to_string()));
    let cfg = ExperimentConfig::default().with_env_overrides(vars).unwrap();
    assert_eq!(cfg.estimator.l, 123);
    assert_eq!(cfg.seeds, vec![4, 5]);
    assert_eq!(cfg.env.name, "ces");
    assert_eq!(cfg.trainer().unwrap().gamma, 0.25);
    let bad = [("SEDKIT_ESTIMATOR__NOPE".to_string(), "1".to_string())];
    assert!(ExperimentConfig::default().with_env_overrides(bad).is_err());
}

#[test]
fn config_round_trips_through_toml() {
    let cfg = parse(TINY_TRAINER);
    let again = parse(&cfg.to_toml().unwrap());
    assert_eq!(cfg, again);
}

fn dumped_value(tree: &toml::Table, path: &[&str]) -> f64 {
    let mut node = tree;
    for p in &path[..path.len() - 1] {
        node = node[*p].as_table().unwrap();
    }
    match &node[path[path.len() - 1]] {
        toml::Value::Integer(i) => *i as f64,
        toml::Value::Float(f) => *f,
        other => panic!("{other:?}"),
    }
}

#[test]
fn dumped_defaults_carry_the_reference_hyperparameters() {
    let text = dump_defaults().unwrap();
    let cfg: toml::Table = toml::from_str(&text).unwrap();
    for (path, want) in [
        (&["env", "source", "n_sources"][..], 2.0),
        (&["env", "source", "k"], 2.0),
        (&["env", "source", "b"], 0.1),
        (&["env", "source", "m"], 1e-4),
        (&["env", "source", "sigma"], 0.5),
        (&["env", "source", "bound"], 4.0),
        (&["env", "ces", "k"], 3.0),
        (&["env", "ces", "tau"], 0.005),
        (&["env", "ces", "eps"], 2f64.powi(-22)),
        (&["env", "ces", "max_amount"], 100.0),
        (&["env", "ces", "log_u_mean"], 1.0),
        (&["env", "ces", "log_u_sd"], 3.0),
        (&["env", "prey", "duration"], 24.0),
        (&["env", "prey", "max_population"], 300.0),
        (&["env", "prey", "log_mean"], -1.4),
        (&["env", "prey", "log_sd"], 1.35),
        (&["estimator", "n"], 1000.0),
    ] {
        assert_eq!(dumped_value(&cfg, path), want, "{path:?}");
    }
    // per-environment trainer tables are appended as comments
    let commented = |env: &str| -> toml::Table {
        let start = text.find(&format!("env.name = \"{env}\"")).unwrap();
        let block: String = text[start..]
            .lines()
            .skip(1)
            .take_while(|l| l.starts_with('#'))
            .map(|l| format!("{}\n", l.trim_start_matches("# ")))
            .collect();
        toml::from_str(&block).unwrap()
    };
    for (env, iters, horizon, gamma, tau, plr, clr, buf) in [
        ("source_location", 1e5, 30.0, 0.9, 1e-3, 1e-4, 3e-4, 1e7),
        ("ces", 1e5, 10.0, 0.9, 5e-3, 3e-4, 3e-4, 1e7),
        ("prey_population", 2e4, 10.0, 0.95, 1e-2, 1e-4, 1e-3, 1e6),
    ] {
        let t = commented(env);
        for (k, want) in [
            ("iterations", iters),
            ("horizon", horizon),
            ("gamma", gamma),
            ("tau", tau),
            ("policy_lr", plr),
            ("critic_lr", clr),
            ("buffer_size", buf),
            ("ensemble", 2.0),
        ] {
            assert_eq!(dumped_value(&t, &[k]), want, "{env}.{k}");
        }
        assert_eq!(dumped_value(&t, &["flow", "layers"]), 6.0);
        assert_eq!(dumped_value(&t, &["flow", "heads"]), 8.0);
        assert_eq!(t["flow"]["hidden"].as_array().unwrap().len(), 2);
        assert_eq!(t["flow"]["hidden"][0].as_integer(), Some(128));
    }
}

#[test]
fn invalid_triples_are_skipped_with_a_reason() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = parse("[table1]\nestimators = [\"spce\", \"snmc\", \"scee\", \"sace\"]\nL = [0, 20]\nn = 50");
    cfg.table1.tasks = vec![
        ConjugateTask { k: 2, prior_var: 1.0, sigma: 1.0 },
        ConjugateTask { k: 2, prior_var: -1.0, sigma: 1.0 },
        ConjugateTask { k: 0, prior_var: 1.0, sigma: 1.0 },
    ];
    let out = cmd_estimate(&cfg, dir.path()).unwrap();
    assert_eq!(out.skipped.len(), 2);
    assert!(out.skipped[0].reason.contains("prior variance"));
    // spce at two L, snmc at L = 20 only, scee once, sace at two L
    assert_eq!(out.rows.len(), 6);
    let text = std::fs::read_to_string(&out.path).unwrap();
    assert!(text.starts_with("k,prior_var,sigma,true_eig,estimator,L,n,seed,value,stderr,excluded,ceiling,wall_ms\n"));
    assert!(dir.path().join("table1_skipped.csv").exists());
    for r in &out.rows {
        assert_eq!(r.true_eig, closed_form_eig(2, 1.0, 1.0, 10));
        if r.estimator == "spce" {
            assert!(r.value <= r.ceiling.unwrap() + 1e-12);
        }
        assert_eq!(r.wall_ms, None);
    }
}

#[test]
fn analytic_rows_need_no_trained_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = parse("[table1]\nestimators = []\nn = 2000");
    cfg.table1.tasks.truncate(1);
    let out = cmd_estimate(&cfg, dir.path()).unwrap();
    assert_eq!(out.rows.len(), 1);
    let r = &out.rows[0];
    assert_eq!(r.estimator, "scee");
    assert!((r.value - r.true_eig).abs() < 4.0 * r.stderr, "{r:?}");
}

#[test]
fn unknown_estimators_are_configuration_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse("[table1]\nestimators = [\"pce\"]");
    assert!(matches!(cmd_estimate(&cfg, dir.path()), Err(Error::Config(_))));
}

fn conjugate_cfg(extra: &str) -> ExperimentConfig {
    parse(&format!(
        "[env]\nname = \"conjugate_gaussian\"\nhorizon = 4\n[env.conjugate]\nk = 2\nprior_var = 1.0\nsigma = 0.5\n{extra}"
    ))
}

#[test]
fn random_policy_curve_follows_the_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = conjugate_cfg("[estimator]\nname = \"scee\"\nn = 4000");
    let (path, rows) = cmd_eval(&cfg, dir.path()).unwrap();
    assert_eq!(rows.len(), 5);
    assert_eq!((rows[0].value, rows[0].stderr), (0.0, 0.0));
    for r in &rows[1..] {
        let truth = closed_form_eig(2, 1.0, 0.5, r.t);
        assert!((r.value - truth).abs() < 4.0 * r.stderr, "{r:?} vs {truth}");
    }
    for w in rows.windows(2) {
        assert!(w[1].value >= w[0].value - 2.0 * (w[0].stderr + w[1].stderr));
    }
    let text = std::fs::read_to_string(path).unwrap();
    assert!(text.starts_with("t,estimator,L,n,value,stderr\n0,scee,,4000,0.0,0.0\n"), "{text}");
}

#[test]
fn curve_with_contrastive_estimators() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = conjugate_cfg("[estimator]\nname = \"spce\"\nL = 200\nn = 100");
    let (_, rows) = cmd_eval(&cfg, dir.path()).unwrap();
    assert_eq!(rows[0].l, Some(200));
    assert!(rows.iter().all(|r| r.value <= (201f64).ln() + 1e-12));
    let src = parse("[estimator]\nname = \"scee\"\nn = 10\n[trainer]\nhorizon = 2");
    assert!(matches!(cmd_eval(&src, dir.path()), Err(Error::Config(_))));
}

fn source_env() -> Environment {
    Environment::new(SourceLocationTask::new(2, 2, 0.1, 1e-4, 0.5, 4.0).unwrap(), 3).unwrap()
}

#[test]
fn history_files_parse_with_line_numbers() {
    let env = source_env();
    let p = Path::new("h.txt");
    let h = parse_history("# env: source_location\n\n0.5 -1.0  2.25\n# note\n1 1 0.1\n", p, &env).unwrap();
    assert_eq!(h.designs(), &[vec![0.5, -1.0], vec![1.0, 1.0]]);
    assert_eq!(h.outcomes(), &[vec![2.25], vec![0.1]]);
    assert_eq!(parse_history("source_location\n", p, &env).unwrap().len(), 0);
    assert!(parse_history("env = \"source_location\"\n0 0 1\n", p, &env).is_ok());

    let line_of = |text: &str| match parse_history(text, p, &env) {
        Err(Error::Parse { line, .. }) => line,
        other => panic!("{other:?}"),
    };
    assert_eq!(line_of(""), 1);
    assert_eq!(line_of("ces\n"), 1);
    assert_eq!(line_of("source_location\n0 0 1\n0 x 1\n"), 3);
    assert_eq!(line_of("source_location\n0 0 1 2\n"), 2);
    assert_eq!(line_of("source_location\n\n9 0 1\n"), 3);
    assert_eq!(line_of("source_location\n0 0 nan\n"), 2);
    assert_eq!(line_of("source_location\n0 0 1\n0 0 1\n0 0 1\n0 0 1\n"), 5);
}

#[test]
fn analytic_posterior_samples_centre_on_the_conjugate_mean() {
    let dir = tempfile::tempdir().unwrap();
    let hist = dir.path().join("h.txt");
    std::fs::write(&hist, "conjugate_gaussian\n0 1.0 2.0\n0 0.5 1.5\n").unwrap();
    let mut cfg = conjugate_cfg("");
    cfg.posterior.analytic = true;
    cfg.posterior.history_file = Some(hist);
    cfg.posterior.n = 5000;
    let out = cmd_posterior(&cfg, dir.path()).unwrap();
    let prior = IsotropicGaussian::new(vec![0.0; 2], 1.0).unwrap();
    let post = conjugate_posterior(&prior, 0.5, &[vec![1.0, 2.0], vec![0.5, 1.5]]).unwrap();
    for i in 0..2 {
        let xs: Vec<f64> = out.samples.iter().map(|s| s[i]).collect();
        let (m, se) = mean_stderr(&xs);
        assert!((m - post.mean()[i]).abs() < 4.0 * se, "{m} vs {}", post.mean()[i]);
    }
    for (s, lq) in out.samples.iter().zip(&out.log_q) {
        assert!((lq - post.log_prob(s)).abs() < 1e-10);
    }
    let text = std::fs::read_to_string(&out.path).unwrap();
    assert!(text.starts_with("theta_0,theta_1,log_q\n"));
    assert_eq!(text.lines().count(), 5001);
}

#[test]
fn zero_samples_write_a_header_only_file() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = conjugate_cfg("");
    cfg.posterior.analytic = true;
    cfg.posterior.n = 0;
    let out = cmd_posterior(&cfg, dir.path()).unwrap();
    assert_eq!(std::fs::read_to_string(out.path).unwrap(), "theta_0,theta_1,log_q\n");
}

#[test]
fn posterior_without_a_source_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(cmd_posterior(&conjugate_cfg(""), dir.path()), Err(Error::Config(_))));
    let mut src = parse("");
    src.posterior.analytic = true;
    assert!(matches!(cmd_posterior(&src, dir.path()), Err(Error::Config(_))));
}

#[test]
fn symmetry_statistic_is_zero_for_an_exchangeable_proposal() {
    // an isotropic Gaussian centred at zero is invariant to swapping sources
    let task = ConjugateGaussianTask::new(4, 0.0, 1.0, 1.0).unwrap();
    let env = Environment::new(task, 1).unwrap();
    let q = AnalyticGaussianPosterior::new(IsotropicGaussian::new(vec![0.0; 4], 1.0).unwrap(), 1.0);
    let h = History::new();
    let mut rng = crate::Rng::new(1);
    let s = crate::estimators::Proposal::sample(&q, &h, 200, &mut rng).unwrap();
    let refs: Vec<&[f64]> = s.iter().map(Vec::as_slice).collect();
    let lq = crate::estimators::Proposal::log_q(&q, &refs, &vec![&h; 200]).unwrap();
    let rep = symmetry_diagnostic(&q, &h, &s, &lq, 2).unwrap().unwrap();
    assert!(rep.mean_abs_diff < 1e-12 && rep.within_band);
    assert_eq!(env.theta_dim(), 4);
    assert!(symmetry_diagnostic(&q, &h, &s, &lq, 3).unwrap().is_none());
}

#[test]
fn manifests_rerun_to_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = parse("[table1]\nn = 30\nL = [10]\nestimators = [\"spce\", \"snmc\"]");
    cfg.table1.tasks.truncate(2);
    cfg.out_dir = dir.path().join("a");
    let m = run(Command::Estimate, &cfg).unwrap();
    assert!(m.input_hash.starts_with("sha256:"));
    let loaded = RunManifest::load(&dir.path().join("a").join(MANIFEST_FILE)).unwrap();
    assert_eq!(loaded, m);
    let m2 = loaded.rerun(Some(&dir.path().join("b"))).unwrap();
    assert_eq!(m2.input_hash, m.input_hash);
    let a = std::fs::read(dir.path().join("a/table1.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b/table1.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn manifest_detects_changed_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let hist = dir.path().join("h.txt");
    std::fs::write(&hist, "conjugate_gaussian\n0 1 1\n").unwrap();
    let mut cfg = conjugate_cfg("");
    cfg.posterior.analytic = true;
    cfg.posterior.n = 3;
    cfg.posterior.history_file = Some(hist.clone());
    cfg.out_dir = dir.path().join("p");
    let m = run(Command::Posterior, &cfg).unwrap();
    std::fs::write(&hist, "conjugate_gaussian\n0 1 2\n").unwrap();
    assert!(matches!(m.rerun(None), Err(Error::Config(_))));
}

#[test]
fn training_writes_per_seed_runs_and_rejects_foreign_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = conjugate_cfg(TINY_TRAINER);
    cfg.seeds = vec![1, 2];
    cfg.workers = 2;
    cfg.out_dir = dir.path().to_path_buf();
    let m = run(Command::Train, &cfg).unwrap();
    assert_eq!(m.outputs.len(), 4);
    for p in &m.outputs {
        assert!(p.exists(), "{p:?}");
    }
    let log1 = std::fs::read(dir.path().join("seed_1/train_log.csv")).unwrap();
    run(Command::Train, &cfg).unwrap();
    assert_eq!(log1, std::fs::read(dir.path().join("seed_1/train_log.csv")).unwrap());

    // the checkpoint drives eval and posterior sampling
    let mut ev = cfg.clone();
    ev.eval.checkpoint = Some(dir.path().join("seed_1/checkpoint.bin"));
    ev.estimator = EstimatorConfig { name: "scee".into(), l: 0, n: 16 };
    let (_, rows) = cmd_eval(&ev, &dir.path().join("eval")).unwrap();
    assert_eq!(rows.len(), 5);
    assert!(rows.iter().all(|r| r.value.is_finite()));
    let mut post = cfg.clone();
    post.posterior.checkpoint = ev.eval.checkpoint.clone();
    post.posterior.n = 7;
    assert_eq!(cmd_posterior(&post, &dir.path().join("post")).unwrap().samples.len(), 7);

    let mut foreign = parse(TINY_TRAINER);
    foreign.eval.checkpoint = ev.eval.checkpoint.clone();
    assert!(matches!(cmd_eval(&foreign, &dir.path().join("x")), Err(Error::Config(_))));
}

#[test]
fn ablation_labels_every_row() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = conjugate_cfg(TINY_TRAINER);
    cfg.seeds = vec![3, 4];
    let (path, rows) = cmd_ablate(&cfg, dir.path()).unwrap();
    assert_eq!(rows.len(), 4 * 2 * 4);
    let mut csv = csv::Reader::from_path(path).unwrap();
    let header = csv.headers().unwrap().clone();
    assert_eq!(&header[0], "variant");
    assert_eq!(&header[1], "seed");
    let mut n = 0;
    for rec in csv.records() {
        let rec = rec.unwrap();
        assert!(["full", "no_target", "no_fixed_initial", "neither"].contains(&&rec[0]));
        n += 1;
    }
    assert_eq!(n, 32);
    for v in &cfg.ablation.variants {
        for s in &cfg.seeds {
            let p = dir.path().join(&v.label).join(format!("seed_{s}/train_log.csv"));
            let text = std::fs::read_to_string(p).unwrap();
            let iters: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').nth(2).unwrap()).collect();
            assert_eq!(iters, ["0", "1", "2", "3"]);
            assert!(text.lines().skip(1).all(|l| l.starts_with(&format!("{},{s},", v.label))));
        }
    }
}
