mod common;

use std::time::Instant;

use common::*;
use oprisk::marginals::MarginalModel;
use rand::{Rng, SeedableRng};
use sha2::{Digest, Sha256};
use tempfile::tempdir;

fn fitted(dir: &std::path::Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let input = dir.join("losses.csv");
    write_synthetic(&input, 600, 11);
    let out = dir.join("fit");
    let o = run_in(&out, &["fit", "--input", input.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    (input, out.join("model.json"))
}

#[test]
fn fit_writes_seven_margins_one_alpha_and_is_byte_stable() {
    let dir = tempdir().unwrap();
    let (input, model) = fitted(dir.path());
    let doc = json(&model);
    assert_eq!(doc["schema"], "oprisk.cli.model/1");
    assert_eq!(doc["config"]["input"], input.to_str().unwrap());
    assert_eq!(doc["config"]["k_method"], "pot");
    assert_eq!(doc["model"]["d"], 7);
    assert_eq!(doc["model"]["K"].as_array().unwrap().len(), 7);
    assert!(doc["model"]["alpha"].as_f64().unwrap() > 1.0);
    assert_eq!(doc["ks_p_values"].as_array().unwrap().len(), 7);
    let files = files_in(model.parent().unwrap());
    for j in 1..=7 {
        assert!(files.contains(&format!("qq_{j}.csv")), "{files:?}");
    }
    let qq = csv_rows(&model.parent().unwrap().join("qq_1.csv"));
    assert!(qq.len() > 20);

    let again = dir.path().join("again");
    let o = run_in(&again, &["fit", "--input", input.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(std::fs::read(&model).unwrap(), std::fs::read(again.join("model.json")).unwrap());
}

#[test]
fn missing_input_is_a_validation_error_naming_the_path() {
    let dir = tempdir().unwrap();
    let out = dir.path().join("out");
    let o = run_in(&out, &["fit", "--input", "/no/such/losses.csv"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/no/such/losses.csv"));
    assert!(files_in(&out).is_empty());
}

#[test]
fn invalid_settings_write_nothing() {
    let dir = tempdir().unwrap();
    let out = dir.path().join("out");
    let o = run_in(&out, &["simulate", "--m", "10", "--k-grid", "0,5"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run_in(&out, &["simulate", "--m", "10", "--scenario", "9"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run_in(&out, &["simulate", "--threads", "0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(files_in(&out).is_empty());
}

#[test]
fn risk_report_has_three_levels_per_unit_and_model_hash() {
    let dir = tempdir().unwrap();
    let (input, model) = fitted(dir.path());
    let out = dir.path().join("risk");
    let o = run_in(&out, &["risk", "--input", input.to_str().unwrap(), "--model", model.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(&out.join("report.csv"));
    // 8 business lines plus the system row, at each of three levels
    assert_eq!(rows.len(), 3 * 9);
    for unit in 1..=8 {
        let n = rows.iter().filter(|r| r[0] == unit.to_string()).count();
        assert_eq!(n, 3);
    }
    let doc = json(&out.join("report.json"));
    assert_eq!(doc["report"]["cote_defined"], true);
    let gammas: Vec<f64> = doc["report"]["levels"].as_array().unwrap().iter().map(|l| l["gamma"].as_f64().unwrap()).collect();
    assert_eq!(gammas, vec![0.05, 0.01, 0.001]);
    let hash = hex_of(&std::fs::read(&model).unwrap());
    assert_eq!(doc["report"]["provenance"]["model_hash"], hash.as_str());
    assert!(doc["config"]["k"].as_str().is_some());
    for f in ["curve_system_root.csv", "curve_unit_root.csv", "curve_allocation.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

fn hex_of(b: &[u8]) -> String {
    Sha256::digest(b).iter().map(|x| format!("{x:02x}")).collect()
}

#[test]
fn allocation_shares_sum_to_one() {
    let dir = tempdir().unwrap();
    let (input, model) = fitted(dir.path());
    let out = dir.path().join("alloc");
    let o = run_in(&out, &["allocate", "--input", input.to_str().unwrap(), "--model", model.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let doc = json(&out.join("allocation.json"));
    let total: f64 = doc["allocation"]["units"].as_array().unwrap().iter().map(|u| u["share"].as_f64().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-9, "{total}");
}

#[test]
fn format_flag_selects_encoding() {
    let dir = tempdir().unwrap();
    let (input, model) = fitted(dir.path());
    let out = dir.path().join("csv_only");
    let args = ["risk", "--input", input.to_str().unwrap(), "--model", model.to_str().unwrap(), "--format", "csv"];
    assert!(run_in(&out, &args).status.success());
    let files = files_in(&out);
    assert!(files.contains(&"report.csv".to_string()));
    assert!(!files.contains(&"report.json".to_string()));
}

#[test]
fn infinite_mean_model_omits_cote() {
    let dir = tempdir().unwrap();
    let input = dir.path().join("losses.csv");
    write_synthetic(&input, 300, 3);
    let m = MarginalModel::from_constants(0.8, vec![1e4; 7]).unwrap();
    let model = dir.path().join("model.json");
    std::fs::write(&model, m.to_json().unwrap()).unwrap();
    let out = dir.path().join("risk");
    let o = run_in(&out, &["risk", "--input", input.to_str().unwrap(), "--model", model.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let doc = json(&out.join("report.json"));
    assert_eq!(doc["report"]["cote_defined"], false);
    assert!(!doc["report"]["notes"].as_array().unwrap().is_empty());
    for level in doc["report"]["levels"].as_array().unwrap() {
        assert!(level["system_cote"].is_null());
    }
    assert!(!out.join("curve_allocation.csv").exists());
}

#[test]
fn identity_curve_near_independence_reference_for_small_k() {
    let dir = tempdir().unwrap();
    let (input, model) = fitted(dir.path());
    let out = dir.path().join("risk");
    let o = run_in(
        &out,
        &["risk", "--input", input.to_str().unwrap(), "--model", model.to_str().unwrap(), "--network", "identity", "--k-grid", "10:60:10"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(&out.join("curve_system_root.csv"));
    let mut rel: Vec<f64> = rows
        .iter()
        .map(|r| (r[1].parse::<f64>().unwrap() / r[2].parse::<f64>().unwrap() - 1.0).abs())
        .collect();
    rel.sort_by(f64::total_cmp);
    assert!(rel[rel.len() / 2] < 0.2, "{rel:?}");
}

#[test]
fn bounds_bracket_and_order() {
    let dir = tempdir().unwrap();
    let (input, model) = fitted(dir.path());
    let out = dir.path().join("bounds");
    let o = run_in(&out, &["bounds", "--input", input.to_str().unwrap(), "--model", model.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let doc = json(&out.join("bounds.json"));
    assert_eq!(doc["config"]["network"], "empirical");
    for r in doc["bounds"].as_array().unwrap() {
        assert!(r["c_ind"].as_f64().unwrap() <= r["c_dep"].as_f64().unwrap() * (1.0 + 1e-12));
    }
}

#[test]
fn simulate_smoke_is_fast_and_repeatable() {
    let dir = tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let t = Instant::now();
    let o = run_in(&a, &["simulate", "--scenario", "1", "--m", "10", "--seed", "5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(t.elapsed().as_secs() < 60);
    assert!(run_in(&b, &["simulate", "--scenario", "1", "--m", "10", "--seed", "5", "--threads", "2"]).status.success());
    for f in ["study.csv", "study_summary.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let doc = json(&a.join("study_summary.json"));
    assert_eq!(doc["config"]["seed"], "5");
    assert_eq!(doc["config"]["n"], "1000");
}

#[test]
fn simulate_defaults_cover_500_replications_and_20_k_values() {
    let dir = tempdir().unwrap();
    let out = dir.path().join("sim");
    let o = run_in(&out, &["simulate", "--scenario", "1", "--seed", "42"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let doc = json(&out.join("study_summary.json"));
    assert_eq!(doc["config"]["m"], "500");
    let ok = doc["replications_ok"].as_u64().unwrap() as usize;
    assert!(ok >= 475);
    let rows = csv_rows(&out.join("study.csv"));
    let mut ks: Vec<usize> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    ks.sort();
    ks.dedup();
    assert_eq!(ks.len(), 20);
    assert_eq!((ks[0], ks[19]), (10, 200));
    // system, three unit roots and three allocations per k and replication
    assert_eq!(rows.len(), ok * 20 * 7);
}

#[test]
fn missing_seed_is_chosen_and_recorded() {
    let dir = tempdir().unwrap();
    let out = dir.path().join("sim");
    let o = run_in(&out, &["simulate", "--m", "4", "--k-grid", "50"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let doc = json(&out.join("study_summary.json"));
    assert!(doc["config"]["seed"].as_str().unwrap().parse::<u64>().is_ok());
}

#[test]
fn failure_budget_exceeded_exits_4() {
    let dir = tempdir().unwrap();
    let out = dir.path().join("sim");
    // with 120 observations most threshold scans find too few exceedances
    let o = run_in(&out, &["simulate", "--m", "20", "--n", "120", "--k-grid", "10", "--failure-budget", "0", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(files_in(&out).is_empty());
}

fn write_matrix(path: &std::path::Path, rows: &[Vec<f64>]) {
    let w = rows[0].len();
    let mut s: String = (0..w).map(|j| format!("c{j}")).collect::<Vec<_>>().join(",");
    s.push('\n');
    for r in rows {
        s.push_str(&r.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","));
        s.push('\n');
    }
    std::fs::write(path, s).unwrap();
}

#[test]
fn independence_test_outputs() {
    let dir = tempdir().unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
    let u: Vec<Vec<f64>> = (0..60).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect();
    let v: Vec<Vec<f64>> = (0..60).map(|_| vec![rng.random::<f64>()]).collect();
    let (up, vp) = (dir.path().join("u.csv"), dir.path().join("v.csv"));
    write_matrix(&up, &u);
    write_matrix(&vp, &v);

    let out = dir.path().join("indep");
    let o = run_in(&out, &["test-independence", "--u", up.to_str().unwrap(), "--v", vp.to_str().unwrap(), "--seed", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let doc = json(&out.join("independence.json"));
    for key in ["statistic", "p_value", "n_permutations", "seed", "method"] {
        assert!(!doc[key].is_null(), "{key}");
    }
    assert_eq!(doc["n_permutations"], 199);

    let same = dir.path().join("same");
    let o = run_in(&same, &["test-independence", "--u", up.to_str().unwrap(), "--v", up.to_str().unwrap(), "--seed", "3"]);
    assert!(o.status.success());
    assert_eq!(json(&same.join("independence.json"))["p_value"].as_f64().unwrap(), 1.0 / 200.0);

    let short = dir.path().join("short.csv");
    write_matrix(&short, &u[..10]);
    let out = dir.path().join("short");
    let o = run_in(&out, &["test-independence", "--u", short.to_str().unwrap(), "--v", short.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(files_in(&out).is_empty());
}

#[test]
fn independence_test_on_loss_panel() {
    let dir = tempdir().unwrap();
    let input = dir.path().join("losses.csv");
    write_synthetic(&input, 150, 21);
    let out = dir.path().join("indep");
    let o = run_in(&out, &["test-independence", "--input", input.to_str().unwrap(), "--seed", "8", "--permutations", "99"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let doc = json(&out.join("independence.json"));
    assert_eq!(doc["n_observations"], 150);
    let p = doc["p_value"].as_f64().unwrap();
    assert!(p > 0.0 && p <= 1.0);
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# smoke\nscenario = 1\nm = 3\nk_grid = 40,20\nseed = 17\n").unwrap();
    let out = dir.path().join("sim");
    let o = run_in(&out, &["simulate", "--config", cfg.to_str().unwrap(), "--seed", "18"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let doc = json(&out.join("study_summary.json"));
    assert_eq!(doc["config"]["seed"], "18");
    assert_eq!(doc["config"]["m"], "3");
    assert_eq!(doc["config"]["k_grid"], "40,20");
    let head = std::fs::read_to_string(out.join("study.csv")).unwrap();
    assert!(head.starts_with("# schema: oprisk.cli.study/1\n"));
    assert!(head.contains("# seed = 18\n"));

    std::fs::write(&cfg, "colour = blue\n").unwrap();
    let o = run_in(&dir.path().join("bad"), &["simulate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}
