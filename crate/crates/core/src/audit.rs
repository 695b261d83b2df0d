//! Oracle audit of one small scenario.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MarketParams, UserProfile};
use crate::oracle::{finite_diff_check, grid_contract, grid_stage2, kkt_check_stage2, mec_utility_at, GridSpec};
use crate::scenario::Scenario;
use crate::stage1::{solve_stage1, verify_contract_feasibility, ContractDesign, MultiplierState, RsuSubproblem};
use crate::stage2::{solve_stage2, OwnCompute, SortedMarket, Stage2Solution};

pub const MAX_USERS: usize = 8;
pub const MAX_TYPES: usize = 3;

pub const STAGE2_TOL: f64 = 1e-4;
pub const KKT_TOL: f64 = 1e-8;
pub const GRADIENT_TOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditCheck {
    pub name: String,
    pub passed: bool,
    /// Worst observed error for the check.
    pub value: f64,
    pub tolerance: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub passed: bool,
    pub checks: Vec<AuditCheck>,
}

pub type Stage2Solver<'a> = dyn Fn(f64, &SortedMarket, &MarketParams) -> Result<Stage2Solution> + 'a;

pub fn run_audit(scenario: &Scenario, force: bool) -> Result<AuditReport> {
    run_audit_with(scenario, force, &solve_stage2)
}

/// Prices at which the Stage-2 closed form is compared: the midpoint and the
/// upper quarter point of each nonempty interval where the MEC server buys.
fn probe_prices(market: &SortedMarket, params: &MarketParams) -> Vec<f64> {
    let own = OwnCompute::new(params);
    let mut out = Vec::new();
    for k in 1..=market.len() {
        if let Some((lo, hi)) = market.price_interval(k) {
            for c in [0.5 * (lo + hi), lo + 0.75 * (hi - lo)] {
                if c > 0.0 && market.prefix_demand(k, c) >= own.at(c) {
                    out.push(c);
                }
            }
        }
    }
    out
}

/// Audit with a caller-supplied Stage-2 solver, so a corrupted solver can be
/// shown to fail.
pub fn run_audit_with(scenario: &Scenario, force: bool, stage2: &Stage2Solver<'_>) -> Result<AuditReport> {
    scenario.validate()?;
    let (n, m) = (scenario.users.len(), scenario.population.len());
    if !force && (n > MAX_USERS || m > MAX_TYPES) {
        return Err(Error::invalid(
            "scenario",
            format!(
                "audit grids need N <= {MAX_USERS} and M <= {MAX_TYPES} (got N = {n}, M = {m}); \
                 shrink the scenario or pass --force"
            ),
        ));
    }
    let params = &scenario.params;
    let pop = &scenario.population;
    let users: Vec<UserProfile> = scenario
        .users
        .iter()
        .map(|u| UserProfile::new(u, params))
        .collect::<Result<_>>()?;
    let market = crate::stage2::sort_users(&users, params)?;
    let prices = probe_prices(&market, params);
    let mut checks = Vec::new();

    // Stage 2 against the price/compute grid, and KKT at each solution
    let (mut worst_gap, mut worst_kkt) = (0.0f64, 0.0f64);
    let mut kkt_points = 0;
    for &c in &prices {
        let sol = stage2(c, &market, params)?;
        let (u_closed, _) = mec_utility_at(&users, sol.p_star, sol.f_e_star, c, params);
        let grid = grid_stage2(c, &users, params, GridSpec::default());
        let gap = (grid.u_best - u_closed) / grid.u_best.abs().max(1e-12);
        worst_gap = worst_gap.max(gap);

        if sol.active_k > 0 && sol.f_rsu_star > 0.0 {
            let active: Vec<UserProfile> = market.ordering[..sol.active_k]
                .iter()
                .map(|id| users.iter().find(|u| u.id == *id).expect("sorted ids come from users").clone())
                .collect();
            let kkt = kkt_check_stage2(&sol, &active, params);
            worst_kkt = worst_kkt.max(kkt.max_abs());
            if !kkt.interior_branch() {
                worst_kkt = f64::INFINITY;
            }
            kkt_points += 1;
        }
    }
    checks.push(AuditCheck {
        name: "stage2_grid".into(),
        passed: worst_gap <= STAGE2_TOL,
        value: worst_gap,
        tolerance: STAGE2_TOL,
        detail: format!("{} prices probed", prices.len()),
    });
    checks.push(AuditCheck {
        name: "stage2_kkt".into(),
        passed: worst_kkt < KKT_TOL,
        value: worst_kkt,
        tolerance: KKT_TOL,
        detail: format!("{kkt_points} interior solutions"),
    });

    // Stage 1 and the contract
    let stage1 = solve_stage1(&market, pop, params, &scenario.solver)?;
    let feas = verify_contract_feasibility(&stage1.menu, pop, params);
    checks.push(AuditCheck {
        name: "contract_feasibility".into(),
        passed: feas.is_feasible() && feas.ir1_active() && feas.ldic_active(),
        value: feas.ir1_gap.abs().max(feas.max_ldic_gap()),
        tolerance: crate::stage1::ACTIVE_TOL,
        detail: format!(
            "{} IR and {} IC violations",
            feas.ir_violations.len(),
            feas.ic_violations.len()
        ),
    });

    if m <= MAX_TYPES {
        let own = OwnCompute::new(params);
        let f_points = match m {
            1 => 2001,
            2 => 201,
            _ => 41,
        };
        let mut best: Option<(f64, f64)> = None;
        for k in 1..=market.len() {
            let Some(interval) = market.price_interval(k) else {
                continue;
            };
            let purchase = |c: f64| market.prefix_demand(k, c) - own.at(c);
            if let Some(g) = grid_contract(pop, params, interval, purchase, f_points, 2001) {
                if best.is_none_or(|b| g.rsu_utility > b.0) {
                    best = Some((g.rsu_utility, g.slack()));
                }
            }
        }
        let (grid_u, slack) = best.unwrap_or((0.0, 0.0));
        let shortfall = grid_u - stage1.rsu_utility;
        checks.push(AuditCheck {
            name: "contract_grid".into(),
            passed: shortfall <= slack,
            value: shortfall,
            tolerance: slack,
            detail: format!("solver {:.6} vs grid {:.6}", stage1.rsu_utility, grid_u),
        });
    }

    // dL/dc against central differences at each interval midpoint
    let design = ContractDesign::new(pop, params)?;
    let state = MultiplierState::new(pop, params, scenario.solver.step_q)?;
    let menu = design.menu(state.eta);
    let mut worst_grad = 0.0f64;
    for k in 1..=market.len() {
        if let Some(problem) = RsuSubproblem::new(k, &market, params) {
            let c = problem.midpoint();
            let f = |x: &[f64]| problem.lagrangian(x[0], &menu, &state, pop, params.k_v());
            let h = 1e-6 * c;
            worst_grad = worst_grad.max(finite_diff_check(f, &[problem.lagrangian_dc(c, &state)], &[c], h));
        }
    }
    checks.push(AuditCheck {
        name: "lagrangian_gradient".into(),
        passed: worst_grad < GRADIENT_TOL,
        value: worst_grad,
        tolerance: GRADIENT_TOL,
        detail: "central differences at interval midpoints".into(),
    });

    Ok(AuditReport {
        passed: checks.iter().all(|c| c.passed),
        checks,
    })
}
