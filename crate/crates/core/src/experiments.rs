//! Baseline allocators and parameter sweeps.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::game::{solve_game, EquilibriumReport};
use crate::model::MarketParams;
use crate::scenario::{generate_scenario, substream, unit_f64, Scenario, ScenarioConfig, STREAM_RAS};
use crate::stage1::Stage1Config;

pub const CSV_SCHEMA: &str = "fogmarket.sweep/1";

/// Fraction of adjacent pairs that must move in the expected direction.
pub const TREND_THRESHOLD: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeOutcome {
    pub scheme: String,
    pub mec_compute: f64,
    pub rsu_compute: f64,
    /// `k f_e^2`.
    pub energy: f64,
    /// `k_e f_e^2`.
    pub energy_cost: f64,
    pub feasible: bool,
}

impl SchemeOutcome {
    fn new(scheme: String, mec: f64, rsu: f64, feasible: bool, params: &MarketParams) -> Self {
        Self {
            scheme,
            mec_compute: mec,
            rsu_compute: rsu,
            energy: params.capacitance * mec * mec,
            energy_cost: params.k_e() * mec * mec,
            feasible,
        }
    }
}

/// The mechanism's own allocation at equilibrium.
pub fn mechanism_outcome(scenario: &Scenario, report: &EquilibriumReport) -> SchemeOutcome {
    let d = &report.decisions;
    SchemeOutcome::new(
        "mechanism".into(),
        d.mec_own_compute,
        d.purchased,
        report.diagnostics.supply_feasible,
        &scenario.params,
    )
}

fn pool_capacity(scenario: &Scenario) -> f64 {
    scenario.population.total() * scenario.params.f_v_max
}

/// Random allocation: each user's equilibrium demand is split between MEC
/// compute and pooled vehicle compute at a uniform random ratio. Overflow of
/// either side spills to the other; demand neither can absorb makes the run
/// infeasible.
pub fn run_ras(scenario: &Scenario, report: &EquilibriumReport, seed: u64) -> SchemeOutcome {
    let mut rng = substream(seed, STREAM_RAS);
    let (cap_mec, cap_rsu) = (scenario.params.f_e_max, pool_capacity(scenario));
    let (mut mec, mut rsu, mut feasible) = (0.0, 0.0, true);
    for &f in &report.decisions.user_quantities {
        if f <= 0.0 {
            continue;
        }
        let share = unit_f64(&mut rng);
        let mut to_mec = share * f;
        let mut to_rsu = f - to_mec;
        let mec_room = (cap_mec - mec).max(0.0);
        if to_mec > mec_room {
            to_rsu += to_mec - mec_room;
            to_mec = mec_room;
        }
        let rsu_room = (cap_rsu - rsu).max(0.0);
        if to_rsu > rsu_room {
            let spill = to_rsu - rsu_room;
            to_rsu = rsu_room;
            let more = spill.min((cap_mec - mec - to_mec).max(0.0));
            to_mec += more;
            feasible &= spill - more <= 1e-9;
        }
        mec += to_mec;
        rsu += to_rsu;
    }
    SchemeOutcome::new("ras".into(), mec, rsu, feasible, &scenario.params)
}

/// Uniform allocation: every user gets `f_rsu_av` of pooled compute and
/// `f_mec_av` of MEC compute.
pub fn run_uas(scenario: &Scenario, f_rsu_av: f64, f_mec_av: f64) -> SchemeOutcome {
    let n = scenario.users.len() as f64;
    let (mec, rsu) = (n * f_mec_av, n * f_rsu_av);
    let tol = 1e-9;
    let feasible = mec <= scenario.params.f_e_max * (1.0 + tol) && rsu <= pool_capacity(scenario) * (1.0 + tol);
    SchemeOutcome::new(format!("uas_{f_rsu_av}_{f_mec_av}"), mec, rsu, feasible, &scenario.params)
}

/// The four UAS grant pairs `(f_RSU_av, f_MEC_av)`.
pub const UAS_VARIANTS: [(f64, f64); 4] = [(0.08, 2.8), (0.08, 3.0), (0.1, 2.8), (0.1, 3.0)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepVariable {
    N,
    #[serde(rename = "a")]
    EnergyCost,
    #[serde(rename = "seed")]
    Seed,
}

impl SweepVariable {
    pub fn label(self) -> &'static str {
        match self {
            SweepVariable::N => "N",
            SweepVariable::EnergyCost => "a",
            SweepVariable::Seed => "seed",
        }
    }
}

fn one_variable<'de, D: Deserializer<'de>>(de: D) -> std::result::Result<SweepVariable, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(SweepVariable),
        Many(Vec<SweepVariable>),
    }
    match OneOrMany::deserialize(de)? {
        OneOrMany::One(v) => Ok(v),
        OneOrMany::Many(v) if v.len() == 1 => Ok(v[0]),
        OneOrMany::Many(v) => Err(serde::de::Error::custom(format!(
            "one sweep variable at a time, got {}",
            v.len()
        ))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    #[serde(deserialize_with = "one_variable")]
    pub variable: SweepVariable,
    pub values: Vec<f64>,
    #[serde(default = "one")]
    pub replications: usize,
    #[serde(default)]
    pub config: ScenarioConfig,
    #[serde(default)]
    pub solver: Stage1Config,
}

fn one() -> usize {
    1
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::invalid("values", "sweep needs at least one value"));
        }
        if self.replications == 0 {
            return Err(Error::invalid("replications", "must be >= 1"));
        }
        for &v in &self.values {
            let ok = match self.variable {
                SweepVariable::N => v >= 1.0 && v.fract() == 0.0,
                SweepVariable::EnergyCost => v.is_finite() && v >= 0.0,
                SweepVariable::Seed => v >= 0.0 && v.fract() == 0.0,
            };
            if !ok {
                return Err(Error::invalid("values", format!("{v} is not a valid {}", self.variable.label())));
            }
        }
        self.solver.validate()
    }

    /// Scenario config for one row. Replication `r` offsets the seed by `r`.
    pub fn config_for(&self, value: f64, replication: usize) -> ScenarioConfig {
        let mut cfg = self.config.clone();
        match self.variable {
            SweepVariable::N => cfg.n = value as usize,
            SweepVariable::EnergyCost => cfg.params = cfg.params.with_energy_cost(value),
            SweepVariable::Seed => cfg.seed = value as u64,
        }
        cfg.seed += replication as u64;
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub replication: usize,
    pub seed: u64,
    pub n: usize,
    pub a: f64,
    pub ok: bool,
    pub error: Option<String>,
    pub converged: bool,
    pub iterations: usize,
    pub rsu_price: f64,
    pub mec_price: f64,
    pub u_rsu: f64,
    pub u_mec: f64,
    pub offload_count: usize,
    pub mec_compute: f64,
    pub purchased: f64,
    pub mec_energy: f64,
    pub energy_cost: f64,
    pub ras_energy: f64,
    /// Energies of [`UAS_VARIANTS`] in order.
    pub uas_energy: Vec<f64>,
    pub uas_feasible: Vec<bool>,
    pub resources: Vec<f64>,
    /// `theta_m p_m`.
    pub payments: Vec<f64>,
}

fn run_row(spec: &SweepSpec, value: f64, replication: usize) -> SweepRow {
    let cfg = spec.config_for(value, replication);
    let mut row = SweepRow {
        value,
        replication,
        seed: cfg.seed,
        n: cfg.n,
        a: cfg.params.energy_cost_server,
        ok: false,
        error: None,
        converged: false,
        iterations: 0,
        rsu_price: 0.0,
        mec_price: 0.0,
        u_rsu: 0.0,
        u_mec: 0.0,
        offload_count: 0,
        mec_compute: 0.0,
        purchased: 0.0,
        mec_energy: 0.0,
        energy_cost: 0.0,
        ras_energy: 0.0,
        uas_energy: Vec::new(),
        uas_feasible: Vec::new(),
        resources: Vec::new(),
        payments: Vec::new(),
    };
    let solved = generate_scenario(&cfg).and_then(|mut scenario| {
        scenario.solver = spec.solver.clone();
        solve_game(&scenario).map(|r| (scenario, r))
    });
    match solved {
        Err(e) => row.error = Some(e.to_string()),
        Ok((scenario, report)) => {
            let ras = run_ras(&scenario, &report, cfg.seed);
            let uas: Vec<SchemeOutcome> = UAS_VARIANTS.iter().map(|&(r, m)| run_uas(&scenario, r, m)).collect();
            let d = &report.decisions;
            row.ok = true;
            row.converged = report.converged;
            row.iterations = report.diagnostics.stage1_iterations;
            row.rsu_price = d.rsu_price;
            row.mec_price = d.mec_price;
            row.u_rsu = report.utilities.rsu;
            row.u_mec = report.utilities.mec;
            row.offload_count = report.offload_count;
            row.mec_compute = d.mec_own_compute;
            row.purchased = d.purchased;
            row.mec_energy = report.mec_energy;
            row.energy_cost = report.energy_cost;
            row.ras_energy = ras.energy;
            row.uas_energy = uas.iter().map(|u| u.energy).collect();
            row.uas_feasible = uas.iter().map(|u| u.feasible).collect();
            row.payments = scenario
                .population
                .types
                .iter()
                .zip(&report.menu.rents)
                .map(|(t, p)| t * p)
                .collect();
            row.resources = report.menu.resources.clone();
        }
    }
    row
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResults {
    pub variable: SweepVariable,
    pub replications: usize,
    pub rows: Vec<SweepRow>,
}

impl SweepResults {
    pub fn success_fraction(&self) -> f64 {
        self.rows.iter().filter(|r| r.ok).count() as f64 / self.rows.len().max(1) as f64
    }

    /// Rows of one replication in value order.
    pub fn series(&self, replication: usize) -> Vec<&SweepRow> {
        self.rows.iter().filter(|r| r.replication == replication).collect()
    }
}

/// One row per `(value, replication)` in spec order. Failed rows carry the
/// error and the sweep goes on.
pub fn run_sweep(spec: &SweepSpec) -> Result<SweepResults> {
    spec.validate()?;
    let jobs: Vec<(f64, usize)> = (0..spec.replications)
        .flat_map(|r| spec.values.iter().map(move |&v| (v, r)))
        .collect();
    let rows = jobs.par_iter().map(|&(v, r)| run_row(spec, v, r)).collect();
    Ok(SweepResults {
        variable: spec.variable,
        replications: spec.replications,
        rows,
    })
}

fn join(values: &[f64]) -> String {
    values.iter().map(f64::to_string).collect::<Vec<_>>().join(";")
}

pub const CSV_COLUMNS: [&str; 24] = [
    "schema",
    "variable",
    "value",
    "replication",
    "seed",
    "n",
    "a",
    "ok",
    "error",
    "converged",
    "iterations",
    "rsu_price",
    "mec_price",
    "u_rsu",
    "u_mec",
    "offload_count",
    "mec_compute",
    "purchased",
    "mec_energy",
    "energy_cost",
    "ras_energy",
    "uas_energy",
    "resources",
    "payments",
];

/// Tidy CSV with a fixed column order; list columns are `;`-separated.
pub fn write_csv(results: &SweepResults, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::invalid("csv", e.to_string());
    w.write_record(CSV_COLUMNS).map_err(io)?;
    for r in &results.rows {
        w.write_record([
            CSV_SCHEMA.to_string(),
            results.variable.label().to_string(),
            r.value.to_string(),
            r.replication.to_string(),
            r.seed.to_string(),
            r.n.to_string(),
            r.a.to_string(),
            r.ok.to_string(),
            r.error.clone().unwrap_or_default(),
            r.converged.to_string(),
            r.iterations.to_string(),
            r.rsu_price.to_string(),
            r.mec_price.to_string(),
            r.u_rsu.to_string(),
            r.u_mec.to_string(),
            r.offload_count.to_string(),
            r.mec_compute.to_string(),
            r.purchased.to_string(),
            r.mec_energy.to_string(),
            r.energy_cost.to_string(),
            r.ras_energy.to_string(),
            join(&r.uas_energy),
            join(&r.resources),
            join(&r.payments),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::invalid("csv", e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Nondecreasing,
    Nonincreasing,
}

/// Share of adjacent pairs, pooled over series, that move in `direction`
/// (ties count as agreeing). Pairs with a failed row are skipped.
pub fn monotone_fraction(series: &[Vec<Option<f64>>], direction: Direction) -> f64 {
    let (mut good, mut total) = (0usize, 0usize);
    for s in series {
        for w in s.windows(2) {
            if let (Some(a), Some(b)) = (w[0], w[1]) {
                total += 1;
                let ok = match direction {
                    Direction::Nondecreasing => b >= a,
                    Direction::Nonincreasing => b <= a,
                };
                good += ok as usize;
            }
        }
    }
    if total == 0 {
        1.0
    } else {
        good as f64 / total as f64
    }
}

fn metric_series(results: &SweepResults, metric: impl Fn(&SweepRow) -> f64) -> Vec<Vec<Option<f64>>> {
    (0..results.replications)
        .map(|r| {
            results
                .series(r)
                .iter()
                .map(|row| row.ok.then(|| metric(row)))
                .collect()
        })
        .collect()
}

fn figure(results: &SweepResults, metric: impl Fn(&SweepRow) -> f64 + Copy, direction: Direction) -> Value {
    let series = metric_series(results, metric);
    let x: Vec<f64> = results.series(0).iter().map(|r| r.value).collect();
    let mean: Vec<Option<f64>> = (0..x.len())
        .map(|i| {
            let vals: Vec<f64> = series.iter().filter_map(|s| s[i]).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        })
        .collect();
    let fraction = monotone_fraction(&series, direction);
    json!({
        "x": x,
        "mean": mean,
        "series": series,
        "trend": {
            "direction": direction,
            "monotone_fraction": fraction,
            "threshold": TREND_THRESHOLD,
            "holds": fraction >= TREND_THRESHOLD,
        }
    })
}

/// Plot-ready data keyed by figure analog.
pub fn plotdata(results: &SweepResults) -> Value {
    let mut out = serde_json::Map::new();
    out.insert("variable".into(), json!(results.variable.label()));
    match results.variable {
        SweepVariable::N => {
            out.insert("fig6_rsu_vs_N".into(), figure(results, |r| r.u_rsu, Direction::Nondecreasing));
            out.insert("fig7_mec_vs_N".into(), figure(results, |r| r.u_mec, Direction::Nondecreasing));
        }
        SweepVariable::EnergyCost => {
            out.insert("fig8_energy_vs_a".into(), figure(results, |r| r.mec_energy, Direction::Nonincreasing));
            out.insert(
                "fig9_offload_vs_a".into(),
                figure(results, |r| r.offload_count as f64, Direction::Nonincreasing),
            );
        }
        SweepVariable::Seed => {}
    }
    let mut schemes = serde_json::Map::new();
    schemes.insert("mechanism".into(), figure(results, |r| r.mec_energy, Direction::Nondecreasing)["mean"].clone());
    schemes.insert("ras".into(), figure(results, |r| r.ras_energy, Direction::Nondecreasing)["mean"].clone());
    for (i, (rsu, mec)) in UAS_VARIANTS.iter().enumerate() {
        let mean = figure(results, move |r| r.uas_energy.get(i).copied().unwrap_or(f64::NAN), Direction::Nondecreasing)["mean"].clone();
        schemes.insert(format!("uas_{rsu}_{mec}"), mean);
    }
    let dominated = results
        .rows
        .iter()
        .filter(|r| r.ok)
        .all(|r| r.mec_energy <= r.ras_energy && r.uas_energy.iter().all(|&u| r.mec_energy <= u));
    out.insert(
        "fig10_energy_schemes".into(),
        json!({
            "x": results.series(0).iter().map(|r| r.value).collect::<Vec<_>>(),
            "schemes": schemes,
            "mechanism_lowest": dominated,
        }),
    );
    Value::Object(out)
}
