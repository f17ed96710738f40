use std::collections::BTreeMap;

use rtrl_core::diagnostics::convergence_detector;
use rtrl_core::harness::*;
use rtrl_core::rtrl::TrialRecord;

fn short(name: &str, horizon: i64) -> ExperimentConfig {
    canned(name).unwrap().with_overrides([("horizon", toml::Value::Integer(horizon))]).unwrap()
}

#[test]
fn cycling_vs_iid_writes_one_csv_per_arm_and_seed() {
    let root = tempfile::tempdir().unwrap();
    let cfg = short("cycling_vs_iid", 3000);
    let summary = run_experiment(&cfg, root.path()).unwrap();
    assert_eq!(summary.trial_files.len(), 16);
    let csvs = walk(&summary.dir).into_iter().filter(|p| p.extension().is_some_and(|e| e == "csv")).count();
    assert_eq!(csvs, 17, "16 trials plus summary.csv");

    // Summary rows recomputed from the trial files.
    let text = std::fs::read_to_string(summary.dir.join("summary.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(SUMMARY_HEADER));
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let path = summary.dir.join(f[0]).join(format!("{}.csv", f[1]));
        let rec = TrialRecord::from_csv(&std::fs::read(path).unwrap()).unwrap();
        assert_eq!(f[4].parse::<f64>().unwrap(), rec.rows.last().unwrap().theta_dist);
        let conv = convergence_detector(&rec, cfg.convergence.tol, cfg.convergence.window);
        assert_eq!(f[2] == "1", matches!(conv, rtrl_core::diagnostics::Convergence::Converged { .. }));
        assert_eq!(f[5].is_empty(), rec.abort_t.is_none());
    }
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn outputs_are_deterministic_and_independent_of_parallelism() {
    let cfg = short("adam_beta2", 2000);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let sa = run_experiment(&cfg, a.path()).unwrap();
    run_experiment(&cfg, b.path()).unwrap();
    for f in &sa.trial_files {
        let rel = f.strip_prefix(a.path()).unwrap();
        assert_eq!(std::fs::read(f).unwrap(), std::fs::read(b.path().join(rel)).unwrap());
    }
    // One trial at a time on this thread gives the same bytes.
    for (arm, acfg) in cfg.resolve_arms().unwrap() {
        for &seed in &acfg.seeds {
            let bytes = run_trial(&acfg, seed).unwrap().to_csv().unwrap();
            let path = sa.dir.join(arm.as_deref().unwrap()).join(format!("{seed}.csv"));
            assert_eq!(bytes, std::fs::read(path).unwrap());
        }
    }
}

#[test]
fn invalid_exponents_are_config_errors_without_force() {
    let cfg = canned("cycling_vs_iid").unwrap().with_overrides([("schedule.b", toml::Value::Float(0.4))]).unwrap();
    let root = tempfile::tempdir().unwrap();
    let err = run_experiment(&cfg, root.path()).unwrap_err();
    assert!(err.is_config(), "{err}");
    assert!(err.to_string().contains("must be < b"), "{err}");
}

#[test]
fn sweep_row_counts() {
    let root = tempfile::tempdir().unwrap();
    let rows = run_sweep(&short("sweep_b_sampling", 300), root.path()).unwrap();
    assert_eq!(rows.len(), 8);
    assert!(rows.iter().all(|r| r.error.is_none()));
    let text = std::fs::read_to_string(root.path().join("sweep_b_sampling/sweep.csv")).unwrap();
    assert_eq!(text.lines().count(), 9);
    assert!(text.starts_with("arm,sampling,schedule.b,seeds,mean_final_dist,converged_fraction,error"));

    let rows = run_sweep(&short("adam_beta2", 3000), root.path()).unwrap();
    assert_eq!(rows.len(), 2);
    assert_ne!(rows[0].mean_final_dist, rows[1].mean_final_dist);

    let rows = run_sweep(&short("sweep_tbptt", 2000), root.path()).unwrap();
    assert_eq!(rows.len(), 3);
    let failed: Vec<_> = rows.iter().filter(|r| r.error.is_some()).collect();
    assert_eq!(failed.len(), 1, "only the fixed-length point violates the exponent rule");
    assert_eq!(failed[0].point[0].1, "L=1");
}

#[test]
fn cli_grid_entries_extend_the_sweep() {
    let cfg = canned("rnn").unwrap();
    let out = apply_cli(&cfg, &["schedule.gamma=0.5".into()], &["schedule.b=[0.6, 0.8]".into(), "sampling=iid".into()]).unwrap();
    assert_eq!(out.schedule.gamma, 0.5);
    let mut expected = BTreeMap::new();
    expected.insert("schedule.b".to_string(), vec![toml::Value::Float(0.6), toml::Value::Float(0.8)]);
    expected.insert("sampling".to_string(), vec![toml::Value::String("iid".into())]);
    assert_eq!(out.sweep, expected);
}
