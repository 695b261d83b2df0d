//! Backward induction over the three stages and the equilibrium report.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{
    mec_utility, vehicle_utility, ContractMenu, StageDecisions, UserProfile,
};
use crate::scenario::{generate_scenario, Scenario, ScenarioConfig};
use crate::stage1::{solve_stage1, verify_contract_feasibility, RsuSubproblem, Stage1Config};
use crate::stage2::{solve_stage2, sort_users, CapacityCase, SortedMarket};
use crate::stage3::best_response;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utilities {
    /// In scenario user order.
    pub users: Vec<f64>,
    pub mec: f64,
    pub rsu: f64,
    /// Per vehicle of each type.
    pub vehicle_types: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSummary {
    pub k: usize,
    pub c: f64,
    pub rsu_utility: f64,
    pub converged: bool,
    pub iterations: usize,
    pub supply_feasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub selected_k: usize,
    pub stage1_converged: bool,
    pub stage1_iterations: usize,
    pub raw_rsu_utility: f64,
    pub capacity_case: Option<CapacityCase>,
    /// Own compute is at `f_e_max` at the chosen price.
    pub own_compute_capped: bool,
    /// The capacity case assumed over the price range agrees with the
    /// solution.
    pub case_consistent: bool,
    /// `sum l_m f_m - f_RSU`.
    pub c3_gap: f64,
    pub supply_feasible: bool,
    pub clearing_residual: f64,
    pub ir1_gap: f64,
    pub max_ldic_gap: f64,
    pub ic_violations: usize,
    pub ir_violations: usize,
    /// Stage-2 active prefix length at the chosen price.
    pub active_k: usize,
    /// Users the Stage-2 prefix counts as active but who do not offload at
    /// `p*`, or vice versa.
    pub prefix_mismatches: Vec<u32>,
    pub mec_utility_nonneg: bool,
    pub candidates: Vec<CandidateSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumReport {
    pub user_ids: Vec<u32>,
    pub decisions: StageDecisions,
    pub menu: ContractMenu,
    pub utilities: Utilities,
    pub offload_count: usize,
    /// Physical energy `k f_e^2`.
    pub mec_energy: f64,
    /// `k_e f_e^2 = a k f_e^2`.
    pub energy_cost: f64,
    pub converged: bool,
    pub flags: Vec<String>,
    pub diagnostics: Diagnostics,
    pub scenario_digest: String,
}

/// SHA-256 of the scenario's JSON with keys sorted.
pub fn scenario_digest(scenario: &Scenario) -> String {
    let value = serde_json::to_value(scenario).expect("scenario serialises");
    let bytes = serde_json::to_vec(&value).expect("value serialises");
    hex::encode(Sha256::digest(&bytes))
}

fn profiles(scenario: &Scenario) -> Result<Vec<UserProfile>> {
    scenario
        .users
        .iter()
        .map(|u| UserProfile::new(u, &scenario.params))
        .collect()
}

fn zero_trade(scenario: &Scenario, users: &[UserProfile]) -> EquilibriumReport {
    let m = scenario.population.len();
    let n = users.len();
    EquilibriumReport {
        user_ids: users.iter().map(|u| u.id).collect(),
        decisions: StageDecisions {
            user_quantities: vec![0.0; n],
            indicators: vec![false; n],
            ..StageDecisions::default()
        },
        menu: ContractMenu::zeros(m),
        utilities: Utilities {
            users: vec![0.0; n],
            mec: 0.0,
            rsu: 0.0,
            vehicle_types: vec![0.0; m],
        },
        offload_count: 0,
        mec_energy: 0.0,
        energy_cost: 0.0,
        converged: true,
        flags: vec!["all_users_never_offload".into()],
        diagnostics: Diagnostics {
            selected_k: 0,
            stage1_converged: true,
            stage1_iterations: 0,
            raw_rsu_utility: 0.0,
            capacity_case: None,
            own_compute_capped: false,
            case_consistent: true,
            c3_gap: 0.0,
            supply_feasible: true,
            clearing_residual: 0.0,
            ir1_gap: 0.0,
            max_ldic_gap: 0.0,
            ic_violations: 0,
            ir_violations: 0,
            active_k: 0,
            prefix_mismatches: Vec::new(),
            mec_utility_nonneg: true,
            candidates: Vec::new(),
        },
        scenario_digest: scenario_digest(scenario),
    }
}

/// Solve the slot: RSU price and contract, then MEC pricing at that price,
/// then user purchases at the MEC price. A non-converged Stage 1 still yields
/// a report, flagged `not_converged`.
pub fn solve_game(scenario: &Scenario) -> Result<EquilibriumReport> {
    scenario.validate()?;
    let params = &scenario.params;
    let pop = &scenario.population;
    let users = profiles(scenario)?;
    let market = match sort_users(&users, params) {
        Ok(m) => m,
        Err(Error::AllUsersNeverOffload) => return Ok(zero_trade(scenario, &users)),
        Err(e) => return Err(e),
    };

    let stage1 = solve_stage1(&market, pop, params, &scenario.solver)?;
    let chosen = stage1.selected();
    let stage2 = solve_stage2(stage1.c, &market, params)?;
    let responses = users
        .iter()
        .map(|u| best_response(u, stage2.p_star, params))
        .collect::<Result<Vec<_>>>()?;

    let decisions = StageDecisions {
        rsu_price: stage1.c,
        mec_price: stage2.p_star,
        mec_own_compute: stage2.f_e_star,
        purchased: stage2.f_rsu_star,
        user_quantities: responses.iter().map(|r| r.f_star).collect(),
        indicators: responses.iter().map(|r| r.chi).collect(),
    };
    let menu = stage1.menu.clone();
    let feas = verify_contract_feasibility(&menu, pop, params);
    let mec = mec_utility(&decisions, params);
    let rsu = stage1.c * stage2.f_rsu_star - menu.payment(pop);
    let offload_count = responses.iter().filter(|r| r.chi).count();

    let active: Vec<u32> = market.ordering[..stage2.active_k].to_vec();
    let mut prefix_mismatches: Vec<u32> = responses
        .iter()
        .filter(|r| r.chi != active.contains(&r.user_id))
        .map(|r| r.user_id)
        .collect();
    prefix_mismatches.sort_unstable();

    let knee = 2.0 * params.k_e() * params.f_e_max;
    let own_compute_capped = stage1.c >= knee;
    let case_consistent = match stage1.case {
        CapacityCase::AllOwnCapacity => !own_compute_capped,
        CapacityCase::CapacityClamped | CapacityCase::Mixed => true,
    };
    let c3_gap = menu.supply(pop) - stage2.f_rsu_star;
    let supply_feasible = c3_gap >= -1e-9 * stage2.f_rsu_star.max(1.0);

    let mut flags = Vec::new();
    if !stage1.converged {
        flags.push("not_converged".to_string());
    }
    if !supply_feasible {
        flags.push("supply_infeasible".to_string());
    }
    if !prefix_mismatches.is_empty() || offload_count != stage2.active_k {
        flags.push("prefix_inconsistent".to_string());
    }
    if !feas.is_feasible() {
        flags.push("contract_infeasible".to_string());
    }
    if mec < 0.0 {
        flags.push("mec_utility_negative".to_string());
    }
    if !case_consistent {
        flags.push("capacity_case_mismatch".to_string());
    }

    let report = EquilibriumReport {
        user_ids: users.iter().map(|u| u.id).collect(),
        offload_count,
        mec_energy: params.capacitance * stage2.f_e_star * stage2.f_e_star,
        energy_cost: params.k_e() * stage2.f_e_star * stage2.f_e_star,
        converged: stage1.converged,
        utilities: Utilities {
            users: responses.iter().map(|r| r.utility).collect(),
            mec,
            rsu,
            vehicle_types: (0..pop.len())
                .map(|m| vehicle_utility(pop.types[m], menu.resources[m], menu.rents[m], params))
                .collect(),
        },
        diagnostics: Diagnostics {
            selected_k: stage1.selected_k,
            stage1_converged: stage1.converged,
            stage1_iterations: chosen.iterations,
            raw_rsu_utility: chosen.raw_rsu_utility,
            capacity_case: Some(stage1.case),
            own_compute_capped,
            case_consistent,
            c3_gap,
            supply_feasible,
            clearing_residual: decisions.clearing_residual(),
            ir1_gap: feas.ir1_gap,
            max_ldic_gap: feas.max_ldic_gap(),
            ic_violations: feas.ic_violations.len(),
            ir_violations: feas.ir_violations.len(),
            active_k: stage2.active_k,
            prefix_mismatches,
            mec_utility_nonneg: mec >= 0.0,
            candidates: stage1
                .candidates
                .iter()
                .map(|r| CandidateSummary {
                    k: r.interval_k,
                    c: r.c,
                    rsu_utility: r.rsu_utility,
                    converged: r.converged,
                    iterations: r.iterations,
                    supply_feasible: r.supply_feasible(),
                })
                .collect(),
        },
        decisions,
        menu,
        flags,
        scenario_digest: scenario_digest(scenario),
    };
    log::info!(
        "equilibrium: c = {:.6}, p = {:.6}, {} of {} users offload",
        report.decisions.rsu_price,
        report.decisions.mec_price,
        report.offload_count,
        report.user_ids.len()
    );
    Ok(report)
}

pub const SUMMARY_SCHEMA: &str = "fogmarket.summary/1";

pub const SUMMARY_COLUMNS: [&str; 15] = [
    "schema",
    "scenario_digest",
    "converged",
    "rsu_price",
    "mec_price",
    "mec_own_compute",
    "purchased",
    "offload_count",
    "u_rsu",
    "u_mec",
    "mec_energy",
    "energy_cost",
    "selected_k",
    "iterations",
    "flags",
];

/// One-row CSV digest of a report.
pub fn write_summary_csv(report: &EquilibriumReport, out: impl std::io::Write) -> Result<()> {
    let io = |e: csv::Error| Error::invalid("csv", e.to_string());
    let d = &report.decisions;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SUMMARY_COLUMNS).map_err(io)?;
    w.write_record([
        SUMMARY_SCHEMA.to_string(),
        report.scenario_digest.clone(),
        report.converged.to_string(),
        d.rsu_price.to_string(),
        d.mec_price.to_string(),
        d.mec_own_compute.to_string(),
        d.purchased.to_string(),
        report.offload_count.to_string(),
        report.utilities.rsu.to_string(),
        report.utilities.mec.to_string(),
        report.mec_energy.to_string(),
        report.energy_cost.to_string(),
        report.diagnostics.selected_k.to_string(),
        report.diagnostics.stage1_iterations.to_string(),
        report.flags.join(";"),
    ])
    .map_err(io)?;
    w.flush().map_err(|e| Error::invalid("csv", e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub size: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    /// Sort plus a Stage-2 solve at every interval midpoint, per N.
    pub stage2: Vec<ScalingRow>,
    pub stage2_slope: f64,
    /// Seconds per Stage-1 iteration, per M.
    pub stage1: Vec<ScalingRow>,
    pub stage1_slope: f64,
}

/// Least-squares slope of `ln seconds` against `ln size`.
pub fn loglog_slope(rows: &[ScalingRow]) -> f64 {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| ((r.size as f64).ln(), r.seconds.max(1e-12).ln()))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// Run `work` until at least `budget` seconds have passed; mean seconds per
/// run.
fn time_per_run(budget: f64, mut work: impl FnMut()) -> f64 {
    let start = Instant::now();
    let mut runs = 0u32;
    while runs == 0 || start.elapsed().as_secs_f64() < budget {
        work();
        runs += 1;
    }
    start.elapsed().as_secs_f64() / runs as f64
}

fn stage2_sweep(users: &[UserProfile], scenario: &Scenario) -> Result<f64> {
    let market: SortedMarket = sort_users(users, &scenario.params)?;
    let mut acc = 0.0;
    for k in 1..=market.len() {
        if let Some((lo, hi)) = market.price_interval(k) {
            let c = if lo > 0.0 { 0.5 * (lo + hi) } else { 0.5 * hi };
            acc += solve_stage2(c, &market, &scenario.params)?.p_star;
        }
    }
    Ok(acc)
}

pub fn scaling_smoke(n_list: &[usize], m_list: &[usize]) -> Result<ScalingReport> {
    let mut stage2 = Vec::new();
    for &n in n_list {
        let scenario = generate_scenario(&ScenarioConfig {
            n,
            ..ScenarioConfig::default()
        })?;
        let users = profiles(&scenario)?;
        stage2_sweep(&users, &scenario)?;
        let seconds = time_per_run(0.05, || {
            std::hint::black_box(stage2_sweep(&users, &scenario).ok());
        });
        stage2.push(ScalingRow { size: n, seconds });
    }

    const ITERS: usize = 2_000;
    let config = Stage1Config {
        max_iters: ITERS,
        eps: 1e-300,
        ..Stage1Config::default()
    };
    let mut stage1 = Vec::new();
    for &m in m_list {
        let scenario = generate_scenario(&ScenarioConfig {
            n: 10,
            m,
            ..ScenarioConfig::default()
        })?;
        let users = profiles(&scenario)?;
        let market = sort_users(&users, &scenario.params)?;
        let k = market.len();
        RsuSubproblem::new(k, &market, &scenario.params)
            .ok_or_else(|| Error::invalid("N", "last price interval is empty"))?;
        let seconds = time_per_run(0.05, || {
            let out = crate::stage1::solve_subproblem_k(k, &market, &scenario.population, &scenario.params, &config);
            std::hint::black_box(out.is_ok());
        });
        stage1.push(ScalingRow {
            size: m,
            seconds: seconds / ITERS as f64,
        });
    }

    Ok(ScalingReport {
        stage2_slope: loglog_slope(&stage2),
        stage1_slope: loglog_slope(&stage1),
        stage2,
        stage1,
    })
}
