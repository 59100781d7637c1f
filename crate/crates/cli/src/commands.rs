use std::path::Path;

use ndarray::Array2;
use serde::Serialize;
use serde_json::{json, Value};

use oprisk::ingest::{aggregate_weekly, fraction_matrices, parse_loss_csv, FractionMatrix, WeeklyPanel};
use oprisk::marginals::{fit_marginal_model, KMethod, MarginalModel, MarginalOptions};
use oprisk::risk::{self, BoundSet, RiskConstants, Target};
use oprisk::seed::child_rng;
use oprisk::sim::{self, NetworkMode, StudyConfig};
use oprisk::spectral::{identity_network, scale_sample, DiscreteSpectralMeasure, RadialRanking};
use oprisk::stats::{self, DEFAULT_PERMUTATIONS};

use crate::config::Settings;
use crate::error::CliError;
use crate::output::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Json,
    Csv,
    Both,
}

impl Format {
    fn json(self) -> bool {
        self != Format::Csv
    }
    fn csv(self) -> bool {
        self != Format::Json
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Fit,
    Risk,
    Allocate,
    Bounds,
    Simulate,
    TestIndependence,
}

pub fn run(cmd: Command, s: &mut Settings, format: Format) -> Result<Vec<Artifact>, CliError> {
    match cmd {
        Command::Fit => fit(s),
        Command::Risk => risk_cmd(s, format, false),
        Command::Allocate => risk_cmd(s, format, true),
        Command::Bounds => bounds(s, format),
        Command::Simulate => simulate(s),
        Command::TestIndependence => test_independence(s),
    }
}

const GAMMA_DEFAULT: &str = "0.05,0.01,0.001";
const NETWORK_STREAM: u64 = 2;

fn gammas(s: &mut Settings) -> Result<Vec<f64>, CliError> {
    let g = s.f64_list("gammas", GAMMA_DEFAULT)?;
    if let Some(bad) = g.iter().find(|g| !(**g > 0.0 && **g < 1.0)) {
        return Err(CliError::Validation(format!("gammas: {bad} is not in (0, 1)")));
    }
    Ok(g)
}

fn load_panel(s: &mut Settings) -> Result<WeeklyPanel, CliError> {
    let path = s.input_path("input")?;
    let rule = s.week_rule()?;
    let floor = s.reporting_floor()?;
    let parsed = parse_loss_csv(&path, floor).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    Ok(aggregate_weekly(&parsed.records, rule)?)
}

/// Model from a `model.json` written by `fit`, or a bare model document.
fn load_model(s: &mut Settings) -> Result<(MarginalModel, String), CliError> {
    let path = s.input_path("model")?;
    let bytes = std::fs::read(&path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    let bad = |e: String| CliError::Validation(format!("{}: {e}", path.display()));
    let doc: Value = serde_json::from_slice(&bytes).map_err(|e| bad(e.to_string()))?;
    let inner = match doc.get("model") {
        Some(m) if doc.get("schema").and_then(Value::as_str) == Some(MODEL_FILE_SCHEMA) => m.clone(),
        _ => doc,
    };
    let model = MarginalModel::from_json(&inner.to_string()).map_err(|e| bad(e.to_string()))?;
    Ok((model, sha256_hex(&bytes)))
}

fn read_network_file(path: &Path) -> Result<Vec<FractionMatrix>, CliError> {
    let bad = |e: String| CliError::Validation(format!("{}: {e}", path.display()));
    let text = std::fs::read_to_string(path).map_err(|e| bad(e.to_string()))?;
    let raw: Vec<Vec<Vec<f64>>> = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    raw.into_iter()
        .map(|rows| {
            let q = rows.len();
            let d = rows.first().map(Vec::len).unwrap_or(0);
            if rows.iter().any(|r| r.len() != d) {
                return Err(bad("ragged network matrix".into()));
            }
            let a = Array2::from_shape_vec((q, d), rows.concat()).map_err(|e| bad(e.to_string()))?;
            FractionMatrix::new(a).map_err(|e| bad(e.to_string()))
        })
        .collect()
}

/// Network mode from settings; `default` is used when `network` is unset.
fn network_mode(s: &mut Settings, default: &str, panel: Option<&WeeklyPanel>) -> Result<NetworkMode, CliError> {
    let mode = s.string("network", default);
    match mode.as_str() {
        "identity" => Ok(NetworkMode::Identity),
        "homogeneous" => {
            let p: f64 = s.parsed("network_p", "0.8")?;
            let q: usize = s.parsed("network_q", "8")?;
            let count: usize = s.parsed("network_count", "100")?;
            if !(p > 0.0 && p < 1.0) || q == 0 || count == 0 {
                return Err(CliError::Validation(
                    "homogeneous network needs network_p in (0,1), network_q >= 1, network_count >= 1".into(),
                ));
            }
            Ok(NetworkMode::Homogeneous { p, q, count })
        }
        "empirical" => {
            let matrices = match (s.optional_input_path("networks")?, panel) {
                (Some(p), _) => read_network_file(&p)?,
                (None, Some(panel)) => fraction_matrices(panel),
                (None, None) => {
                    return Err(CliError::Validation("network = empirical needs `networks` or `input`".into()))
                }
            };
            if matrices.is_empty() {
                return Err(CliError::Validation("no network matrices available".into()));
            }
            Ok(NetworkMode::Empirical { matrices })
        }
        other => Err(CliError::Validation(format!(
            "network {other:?}: expected empirical, identity or homogeneous"
        ))),
    }
}

fn check_network_dim(mode: &NetworkMode, d: usize) -> Result<(), CliError> {
    if let NetworkMode::Empirical { matrices } = mode {
        let q = matrices[0].entries().nrows();
        if matrices.iter().any(|m| m.entries().dim() != (q, d)) {
            return Err(CliError::Validation(format!("every network matrix must be {q} x {d}")));
        }
    }
    Ok(())
}

fn draw_networks(mode: &NetworkMode, d: usize, seed: Option<u64>) -> Vec<Array2<f64>> {
    match mode {
        NetworkMode::Identity => vec![identity_network(d)],
        NetworkMode::Empirical { matrices } => matrices.iter().map(|m| m.entries().clone()).collect(),
        NetworkMode::Homogeneous { p, q, count } => {
            let mut rng = child_rng(seed.unwrap_or(0), NETWORK_STREAM, 0);
            (0..*count)
                .map(|_| sim::sample_homogeneous_network_with(*p, *q, d, &mut rng).into_inner())
                .collect()
        }
    }
}

fn fit(s: &mut Settings) -> Result<Vec<Artifact>, CliError> {
    let panel = load_panel(s)?;
    let k_method: KMethod = s.parsed("k_method", "pot")?;
    let opts = MarginalOptions { k_method, ..MarginalOptions::default() };
    let model = fit_marginal_model(&panel, &opts)?;
    let config = s.resolved().clone();

    let x = panel.et_observations();
    let ks: Vec<f64> = model.margins.iter().map(|m| m.ks.p_value).collect();
    let mut out = vec![json_fields(
        "model.json",
        MODEL_FILE_SCHEMA,
        &config,
        vec![
            ("model", serde_json::to_value(&model).map_err(|e| CliError::Numerical(e.to_string()))?),
            ("ks_p_values", json!(ks)),
        ],
    )?];
    for (j, params) in model.per_margin.iter().enumerate() {
        let u = model.margins[j].threshold;
        let mut tail: Vec<f64> = x.column(j).iter().copied().filter(|v| *v > u).collect();
        tail.sort_by(f64::total_cmp);
        let n = tail.len() as f64;
        let mut body = String::from("p,theoretical,empirical\n");
        for (i, v) in tail.iter().enumerate() {
            let p = (i as f64 + 0.5) / n;
            body.push_str(&format!("{p},{},{v}\n", u + params.excess_quantile(p)));
        }
        out.push(csv_artifact(&format!("qq_{}.csv", j + 1), QQ_FILE_SCHEMA, &config, &body));
    }
    Ok(out)
}

#[derive(Serialize)]
struct UnitAllocation {
    unit: usize,
    ca: f64,
    share: f64,
}

#[derive(Serialize)]
struct Allocation {
    alpha: f64,
    defined: bool,
    system_root: f64,
    units: Vec<UnitAllocation>,
    notes: Vec<String>,
}

fn allocation_of(c: &RiskConstants) -> Allocation {
    let system_root = c.c_system.powf(1.0 / c.alpha);
    match &c.ca {
        Some(ca) => Allocation {
            alpha: c.alpha,
            defined: true,
            system_root,
            units: ca
                .iter()
                .enumerate()
                .map(|(i, v)| UnitAllocation { unit: i + 1, ca: *v, share: v / system_root })
                .collect(),
            notes: Vec::new(),
        },
        None => Allocation {
            alpha: c.alpha,
            defined: false,
            system_root,
            units: Vec::new(),
            notes: vec![format!("alpha = {} <= 1: allocation requires a finite mean", c.alpha)],
        },
    }
}

fn risk_cmd(s: &mut Settings, format: Format, allocation_focus: bool) -> Result<Vec<Artifact>, CliError> {
    let (model, hash) = load_model(s)?;
    let panel = load_panel(s)?;
    let mode = network_mode(s, "empirical", Some(&panel))?;
    let d = model.d;
    check_network_dim(&mode, d)?;
    let seed = match mode {
        NetworkMode::Homogeneous { .. } => Some(s.seed()?),
        _ => None,
    };
    let gammas = gammas(s)?;
    let x = panel.et_observations();
    if x.ncols() != d {
        return Err(CliError::Validation(format!("model has {d} margins, input has {}", x.ncols())));
    }
    let scaled = scale_sample(x.view(), &model)?;
    let ranking = RadialRanking::new(&scaled);
    let nn = ranking.n_nonzero();
    if nn < 2 {
        return Err(CliError::Validation("fewer than two nonzero observations".into()));
    }
    let k = match s.optional_parsed::<usize>("k")? {
        Some(k) => k,
        None => {
            let k = (nn / 10).clamp(1, nn - 1);
            s.record("k", k);
            k
        }
    };
    if k == 0 || k >= nn {
        return Err(CliError::Validation(format!("k = {k} must lie in 1..{nn}")));
    }
    let grid: Vec<usize> = s.k_grid("10:200:10")?.into_iter().filter(|g| *g < nn).collect();
    let config = s.resolved().clone();

    let networks = draw_networks(&mode, d, seed);
    let alpha = model.alpha;
    let method = model.k_method.to_string();
    let constants = risk::estimate_constants(&ranking.angular_set(k)?, &networks, alpha, &method)?;
    let bounds: BoundSet = risk::bound_set(&model.k, alpha, &networks)?;
    let mut report = risk::build_report(&model, &constants, &gammas, Some(bounds.clone()))?;
    report.provenance.model_hash = Some(hash);
    report.provenance.seeds = seed.into_iter().collect();

    let mut out = Vec::new();
    if format.json() {
        out.push(json_artifact("report.json", RISK_FILE_SCHEMA, &config, "report", &report)?);
    }
    if format.csv() {
        out.push(csv_artifact("report.csv", RISK_FILE_SCHEMA, &config, &report.to_csv()));
    }

    let curve: Vec<RiskConstants> = grid
        .iter()
        .map(|&kk| risk::estimate_constants(&ranking.angular_set(kk)?, &networks, alpha, &method))
        .collect::<oprisk::Result<_>>()?;
    let root = |c: f64| c.powf(1.0 / alpha);
    let points: Vec<(usize, f64)> = grid.iter().zip(&curve).map(|(k, c)| (*k, root(c.c_system))).collect();
    out.push(csv_artifact(
        "curve_system_root.csv",
        CURVE_FILE_SCHEMA,
        &config,
        &risk::curve_csv(&points, Some(root(bounds.system.0))),
    ));
    let mut body = String::from("k,unit,estimate,reference\n");
    for (kk, c) in grid.iter().zip(&curve) {
        for (i, v) in c.c_unit.iter().enumerate() {
            body.push_str(&format!("{kk},{},{},{}\n", i + 1, root(*v), root(bounds.units[i].0)));
        }
    }
    out.push(csv_artifact("curve_unit_root.csv", CURVE_FILE_SCHEMA, &config, &body));
    if alpha > 1.0 {
        let axes = DiscreteSpectralMeasure::axes(&model.k);
        let q = networks[0].nrows();
        let reference: Vec<f64> = (0..q)
            .map(|i| risk::theoretical_allocation(&axes, &networks, alpha, i))
            .collect::<oprisk::Result<_>>()?;
        let mut body = String::from("k,unit,estimate,reference\n");
        for (kk, c) in grid.iter().zip(&curve) {
            for (i, v) in c.ca.iter().flatten().enumerate() {
                body.push_str(&format!("{kk},{},{v},{}\n", i + 1, reference[i]));
            }
        }
        out.push(csv_artifact("curve_allocation.csv", CURVE_FILE_SCHEMA, &config, &body));
    }

    if allocation_focus {
        let alloc = allocation_of(&constants);
        if format.json() {
            out.push(json_artifact("allocation.json", ALLOCATION_FILE_SCHEMA, &config, "allocation", &alloc)?);
        }
        if format.csv() {
            let mut body = String::from("unit,ca,share\n");
            for u in &alloc.units {
                body.push_str(&format!("{},{},{}\n", u.unit, u.ca, u.share));
            }
            out.push(csv_artifact("allocation.csv", ALLOCATION_FILE_SCHEMA, &config, &body));
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct BoundRow {
    target: String,
    gamma: f64,
    c_ind: f64,
    c_dep: f64,
    var_ind: f64,
    var_dep: f64,
}

fn bounds(s: &mut Settings, format: Format) -> Result<Vec<Artifact>, CliError> {
    let (model, hash) = load_model(s)?;
    let panel = if s.is_set("input") { Some(load_panel(s)?) } else { None };
    let default = if panel.is_some() || s.is_set("networks") { "empirical" } else { "identity" };
    let mode = network_mode(s, default, panel.as_ref())?;
    check_network_dim(&mode, model.d)?;
    let seed = match mode {
        NetworkMode::Homogeneous { .. } => Some(s.seed()?),
        _ => None,
    };
    let gammas = gammas(s)?;
    let config = s.resolved().clone();

    let networks = draw_networks(&mode, model.d, seed);
    let alpha = model.alpha;
    let mut targets = vec![("system".to_string(), Target::System)];
    targets.extend((0..networks[0].nrows()).map(|i| ((i + 1).to_string(), Target::Unit(i))));
    let mut rows = Vec::new();
    for (label, t) in targets {
        let (c_ind, c_dep) = risk::bounds_constants(&model.k, alpha, &networks, t)?;
        for &g in &gammas {
            rows.push(BoundRow {
                target: label.clone(),
                gamma: g,
                c_ind,
                c_dep,
                var_ind: risk::var_asym(c_ind, alpha, g)?,
                var_dep: risk::var_asym(c_dep, alpha, g)?,
            });
        }
    }
    let mut out = Vec::new();
    if format.json() {
        out.push(json_fields(
            "bounds.json",
            BOUNDS_FILE_SCHEMA,
            &config,
            vec![
                ("alpha", json!(alpha)),
                ("model_hash", json!(hash)),
                (
                    "ordering",
                    json!(if alpha > 1.0 { "c_ind <= c_dep" } else if alpha < 1.0 { "c_dep <= c_ind" } else { "c_ind = c_dep" }),
                ),
                ("bounds", serde_json::to_value(&rows).map_err(|e| CliError::Numerical(e.to_string()))?),
            ],
        )?);
    }
    if format.csv() {
        let mut body = String::from("target,gamma,c_ind,c_dep,var_ind,var_dep\n");
        for r in &rows {
            body.push_str(&format!("{},{},{},{},{},{}\n", r.target, r.gamma, r.c_ind, r.c_dep, r.var_ind, r.var_dep));
        }
        out.push(csv_artifact("bounds.csv", BOUNDS_FILE_SCHEMA, &config, &body));
    }
    Ok(out)
}

#[derive(Serialize)]
struct Spread {
    median: f64,
    q1: f64,
    q3: f64,
}

fn spread(v: &[f64]) -> Option<Spread> {
    (!v.is_empty()).then(|| Spread { median: sim::quantile(v, 0.5), q1: sim::quantile(v, 0.25), q3: sim::quantile(v, 0.75) })
}

fn simulate(s: &mut Settings) -> Result<Vec<Artifact>, CliError> {
    let scenario: u8 = s.parsed("scenario", "1")?;
    let spec = match scenario {
        1 => sim::scenario1_spec(),
        2 => sim::scenario2_spec(),
        other => return Err(CliError::Validation(format!("scenario {other}: expected 1 or 2"))),
    };
    let n: usize = s.parsed("n", "1000")?;
    let m: usize = s.parsed("m", "500")?;
    let k_grid = s.k_grid("200:10:10")?;
    let k_method: KMethod = s.parsed("k_method", "mvr")?;
    let mode = network_mode(s, if scenario == 1 { "identity" } else { "homogeneous" }, None)?;
    check_network_dim(&mode, spec.d())?;
    let failure_budget: f64 = s.parsed("failure_budget", "0.05")?;
    if !(0.0..=1.0).contains(&failure_budget) {
        return Err(CliError::Validation(format!("failure_budget {failure_budget} is not in [0, 1]")));
    }
    let seed = s.seed()?;
    let config = s.resolved().clone();

    let mut study = StudyConfig::new(spec, mode, seed);
    study.n = n;
    study.m = m;
    study.k_grid = k_grid;
    study.k_method = k_method;
    study.failure_budget = failure_budget;
    study.validate()?;
    let result = sim::run_study(&study)?;

    let summary = json_fields(
        "study_summary.json",
        STUDY_FILE_SCHEMA,
        &config,
        vec![
            ("replications_ok", json!(result.replications.len())),
            ("failures", serde_json::to_value(&result.failures).map_err(|e| CliError::Numerical(e.to_string()))?),
            ("alpha", serde_json::to_value(spread(&result.alphas)).map_err(|e| CliError::Numerical(e.to_string()))?),
            ("true_k", json!(study.spec.tail_constants())),
            ("cells", serde_json::to_value(result.summary()).map_err(|e| CliError::Numerical(e.to_string()))?),
        ],
    )?;
    Ok(vec![csv_artifact("study.csv", STUDY_FILE_SCHEMA, &config, &result.to_long_csv()), summary])
}

fn read_numeric_csv(path: &Path) -> Result<Array2<f64>, CliError> {
    let bad = |e: String| CliError::Validation(format!("{}: {e}", path.display()));
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path).map_err(|e| bad(e.to_string()))?;
    let mut data = Vec::new();
    let mut width = None;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let row: Vec<f64> = rec
            .iter()
            .map(|f| f.trim().parse::<f64>().map_err(|_| bad(format!("row {}: {f:?} is not a number", i + 1))))
            .collect::<Result<_, _>>()?;
        if *width.get_or_insert(row.len()) != row.len() {
            return Err(bad(format!("row {} has {} fields", i + 1, row.len())));
        }
        data.extend(row);
    }
    let w = width.unwrap_or(0);
    let n = data.len().checked_div(w).unwrap_or(0);
    Array2::from_shape_vec((n, w), data).map_err(|e| bad(e.to_string()))
}

fn test_independence(s: &mut Settings) -> Result<Vec<Artifact>, CliError> {
    let (u, v) = if s.is_set("u") || s.is_set("v") {
        let u = read_numeric_csv(&s.input_path("u")?)?;
        let v = read_numeric_csv(&s.input_path("v")?)?;
        (u, v)
    } else {
        let panel = load_panel(s)?;
        let u = panel.et_observations();
        let mats = fraction_matrices(&panel);
        let w = mats.first().map(|m| m.entries().len()).unwrap_or(0);
        let mut v = Array2::zeros((mats.len(), w));
        for (r, m) in mats.iter().enumerate() {
            v.row_mut(r).iter_mut().zip(m.entries().iter()).for_each(|(a, b)| *a = *b);
        }
        (u, v)
    };
    let n_perm: usize = s.parsed("permutations", &DEFAULT_PERMUTATIONS.to_string())?;
    if n_perm == 0 {
        return Err(CliError::Validation("permutations must be positive".into()));
    }
    let seed = s.seed()?;
    let config = s.resolved().clone();
    let t = stats::independence_test(u.view(), v.view(), n_perm, seed)?;
    Ok(vec![json_fields(
        "independence.json",
        TEST_FILE_SCHEMA,
        &config,
        vec![
            ("statistic", json!(t.statistic)),
            ("p_value", json!(t.p_value)),
            ("n_permutations", json!(t.n_resamples)),
            ("seed", json!(t.seed)),
            ("method", json!(t.method)),
            ("n_observations", json!(u.nrows())),
        ],
    )?])
}
