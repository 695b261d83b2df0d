//! RSU contract design and pricing.
//!
//! For a fixed active prefix `k` the RSU sells `D(c) = L_k(c) - own(c)` GHz to
//! the MEC server at price `c` and must pool at least that much from vehicles
//! through a screening contract. With type-1 IR and every downward-adjacent IC
//! constraint binding, rents follow from the resources, and the resources are
//! linear in the supply multiplier `eta` until they hit `f_v_max`. The solver
//! runs projected gradient steps on `c` and projected subgradient steps on the
//! multipliers with step `q / sqrt(l)`, one subproblem per nonempty price
//! interval, and keeps the interval with the largest RSU utility.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{vehicle_utility, ContractMenu, MarketParams, VehiclePopulation};
use crate::stage2::{capacity_case, CapacityCase, OwnCompute, SortedMarket};

/// Slack allowed on IR/IC inequalities.
pub const FEASIBILITY_TOL: f64 = 1e-9;
/// Tolerance for constraints that should hold with equality.
pub const ACTIVE_TOL: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Config {
    /// `q` in the step rule `q / sqrt(l)`.
    pub step_q: f64,
    /// Relative change of the RSU utility that counts as settled.
    pub eps: f64,
    /// Consecutive settled iterations required to stop.
    pub patience: usize,
    pub max_iters: usize,
    /// Keep every RSU utility iterate in the result.
    pub record_trace: bool,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            step_q: 0.05,
            eps: 1e-6,
            patience: 10,
            max_iters: 50_000,
            record_trace: false,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_q.is_finite() && self.step_q > 0.0) {
            return Err(Error::invalid("step_q", "must be > 0"));
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::invalid("eps", "must be > 0"));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters", "must be >= 1"));
        }
        Ok(())
    }
}

/// `mu_2..mu_M` from `mu_M = l_M`, `mu_m = mu_{m+1} theta_{m+1} / theta_m + l_m`.
pub fn mu_recursion(pop: &VehiclePopulation) -> Result<Vec<f64>> {
    let m = pop.len();
    if m < 2 {
        return Err(Error::TooFewTypes(m));
    }
    let (theta, l) = (&pop.types, &pop.counts);
    // mu[i] holds mu_{i+2}
    let mut mu = vec![0.0; m - 1];
    mu[m - 2] = l[m - 1];
    for idx in (1..m - 1).rev() {
        mu[idx - 1] = mu[idx] * theta[idx + 1] / theta[idx] + l[idx];
    }
    Ok(mu)
}

/// Per-type resource gains: the unclamped contract is `f_m = gain_m * eta`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContractDesign {
    pub gains: Vec<f64>,
    pub mu: Vec<f64>,
    types: Vec<f64>,
    k_v: f64,
    f_v_max: f64,
}

fn ratio_or_zero(num: f64, den: f64) -> f64 {
    if num == 0.0 {
        0.0
    } else {
        num / den
    }
}

impl ContractDesign {
    pub fn new(pop: &VehiclePopulation, params: &MarketParams) -> Result<Self> {
        let k_v = params.k_v();
        if k_v <= 0.0 {
            return Err(Error::FreeVehicleEnergy);
        }
        let m = pop.len();
        let (theta, l) = (&pop.types, &pop.counts);
        let mut gains = vec![0.0; m];
        let mu = if m >= 2 { mu_recursion(pop)? } else { Vec::new() };
        if m >= 2 {
            gains[0] = ratio_or_zero(
                l[0],
                2.0 * k_v * (l[0] + mu[0] * (theta[1] - theta[0]) / theta[0]),
            );
            for idx in 1..m - 1 {
                // mu_m - mu_{m+1} with m = idx + 1
                gains[idx] = ratio_or_zero(l[idx], 2.0 * k_v * (mu[idx - 1] - mu[idx]));
            }
        }
        gains[m - 1] = 1.0 / (2.0 * k_v);
        Ok(Self {
            gains,
            mu,
            types: pop.types.clone(),
            k_v,
            f_v_max: params.f_v_max,
        })
    }

    pub fn resources(&self, eta: f64) -> Vec<f64> {
        self.gains
            .iter()
            .map(|g| (g * eta).clamp(0.0, self.f_v_max))
            .collect()
    }

    pub fn menu(&self, eta: f64) -> ContractMenu {
        let resources = self.resources(eta);
        let rents = chain_rents(&resources, &self.types, self.k_v);
        ContractMenu { resources, rents }
    }

    /// Smallest `eta` whose contract pools exactly `target`, or `None` if the
    /// population cannot supply it even at `f_v_max`.
    pub fn eta_for_supply(&self, target: f64, pop: &VehiclePopulation) -> Option<f64> {
        if target <= 0.0 {
            return Some(0.0);
        }
        // supply(eta) = sum_m l_m min(g_m eta, f_v_max) is piecewise linear
        let mut kinks: Vec<(f64, f64)> = self
            .gains
            .iter()
            .zip(&pop.counts)
            .filter(|(g, l)| **g > 0.0 && **l > 0.0)
            .map(|(g, l)| (self.f_v_max / g, l * g))
            .collect();
        kinks.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut slope: f64 = kinks.iter().map(|k| k.1).sum();
        let (mut eta, mut supply) = (0.0, 0.0);
        for (kink, weight) in kinks {
            let at_kink = supply + slope * (kink - eta);
            if at_kink >= target {
                return Some(eta + (target - supply) / slope);
            }
            eta = kink;
            supply = at_kink;
            slope -= weight;
        }
        None
    }

    /// `eta` at which every type is at `f_v_max`.
    pub fn saturation_eta(&self) -> f64 {
        self.gains
            .iter()
            .filter(|g| **g > 0.0)
            .map(|g| self.f_v_max / g)
            .fold(0.0, f64::max)
    }
}

/// Rents with type-1 IR and all downward-adjacent IC constraints binding.
pub fn chain_rents(resources: &[f64], types: &[f64], k_v: f64) -> Vec<f64> {
    let mut rents = Vec::with_capacity(resources.len());
    let (mut prev_p, mut prev_f) = (0.0, 0.0);
    for (f, theta) in resources.iter().zip(types) {
        let p = prev_p + k_v * (f * f - prev_f * prev_f) / theta;
        rents.push(p);
        prev_p = p;
        prev_f = *f;
    }
    rents
}

/// Contract for a given supply multiplier, clamped to `[0, f_v_max]`.
pub fn contract_from_eta(
    eta: f64,
    mu: &[f64],
    pop: &VehiclePopulation,
    params: &MarketParams,
) -> Result<ContractMenu> {
    let design = ContractDesign::new(pop, params)?;
    if pop.len() >= 2 && design.mu.len() == mu.len() {
        let same = design.mu.iter().zip(mu).all(|(a, b)| (a - b).abs() <= 1e-12 * a.abs().max(1.0));
        if !same {
            return Err(Error::invalid("mu", "does not match the population recursion"));
        }
    } else if pop.len() >= 2 {
        return Err(Error::LengthMismatch {
            expected: pop.len() - 1,
            found: mu.len(),
        });
    }
    Ok(design.menu(eta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiplierState {
    pub eta: f64,
    pub beta: f64,
    pub gamma: f64,
    pub mu: Vec<f64>,
    pub iteration: usize,
    pub step_q: f64,
}

impl MultiplierState {
    pub fn new(pop: &VehiclePopulation, params: &MarketParams, step_q: f64) -> Result<Self> {
        let mu = if pop.len() >= 2 { mu_recursion(pop)? } else { Vec::new() };
        let gamma = match mu.first() {
            Some(mu2) => -pop.counts[0] - mu2 * pop.types[1] / pop.types[0],
            None => -pop.counts[0],
        };
        Ok(Self {
            eta: 2.0 * params.k_v() * params.f_v_max * 0.1,
            beta: 0.0,
            gamma,
            mu,
            iteration: 1,
            step_q,
        })
    }

    pub fn step(&self) -> f64 {
        self.step_q / (self.iteration.max(1) as f64).sqrt()
    }
}

/// Projected subgradient step on `eta` (supply) and `beta` (nonnegative
/// purchase). `own` is the MEC's own compute at `c`.
pub fn update_multipliers(
    state: &MultiplierState,
    c: f64,
    l_k: f64,
    own: f64,
    menu: &ContractMenu,
    pop: &VehiclePopulation,
) -> MultiplierState {
    let step = state.step();
    let supply_gap = l_k - own - menu.supply(pop);
    let purchase_gap = c * own - c * l_k;
    MultiplierState {
        eta: (state.eta + step * supply_gap).max(0.0),
        beta: (state.beta + step * purchase_gap).max(0.0),
        iteration: state.iteration + 1,
        ..state.clone()
    }
}

/// The RSU problem restricted to one active prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct RsuSubproblem {
    pub k: usize,
    pub lower: f64,
    pub upper: f64,
    pub prefix_tau: f64,
    pub prefix_delta: f64,
    pub own: OwnCompute,
    pub last: bool,
}

impl RsuSubproblem {
    pub fn new(k: usize, market: &SortedMarket, params: &MarketParams) -> Option<Self> {
        let (lower, upper) = market.price_interval(k)?;
        Some(Self {
            k,
            lower,
            upper,
            prefix_tau: market.prefix_tau[k - 1],
            prefix_delta: market.prefix_delta[k - 1],
            own: OwnCompute::new(params),
            last: k == market.len(),
        })
    }

    pub fn demand(&self, c: f64) -> f64 {
        (self.prefix_tau * self.prefix_delta / c).sqrt() - self.prefix_delta
    }

    pub fn demand_slope(&self, c: f64) -> f64 {
        -0.5 * (self.prefix_tau * self.prefix_delta).sqrt() * c.powf(-1.5)
    }

    /// Signed purchase `L_k(c) - own(c)`.
    pub fn purchase(&self, c: f64) -> f64 {
        self.demand(c) - self.own.at(c)
    }

    fn purchase_slope(&self, c: f64) -> f64 {
        self.demand_slope(c) - self.own.slope(c)
    }

    /// Closed projection box that keeps `c` inside the half-open interval.
    pub fn bounds(&self) -> (f64, f64) {
        let margin = 1e-9 * self.upper;
        let lo = if self.last { margin } else { self.lower };
        (lo, self.upper - margin)
    }

    pub fn midpoint(&self) -> f64 {
        let (lo, hi) = self.bounds();
        0.5 * (lo + hi)
    }

    pub fn rsu_utility(&self, c: f64, menu: &ContractMenu, pop: &VehiclePopulation) -> f64 {
        c * self.purchase(c).max(0.0) - menu.payment(pop)
    }

    /// Lagrangian of the minimisation form, generalised to the capped own
    /// compute.
    pub fn lagrangian(
        &self,
        c: f64,
        menu: &ContractMenu,
        state: &MultiplierState,
        pop: &VehiclePopulation,
        k_v: f64,
    ) -> f64 {
        let (theta, f, p) = (&pop.types, &menu.resources, &menu.rents);
        let purchase = self.purchase(c);
        let mut value = menu.payment(pop) - c * purchase;
        value += state.gamma * (theta[0] * p[0] - k_v * f[0] * f[0]);
        value += state.beta * (-c * purchase);
        for m in 1..pop.len() {
            let mu = state.mu[m - 1];
            value += mu * (theta[m] * (p[m - 1] - p[m]) - k_v * (f[m - 1] * f[m - 1] - f[m] * f[m]));
        }
        value + state.eta * (purchase - menu.supply(pop))
    }

    /// `dL/dc` including the dependence through `L_k(c)` and `own(c)`.
    pub fn lagrangian_dc(&self, c: f64, state: &MultiplierState) -> f64 {
        let purchase = self.purchase(c);
        let slope = self.purchase_slope(c);
        -(1.0 + state.beta) * (purchase + c * slope) + state.eta * slope
    }
}

/// Projected gradient step on the RSU price.
pub fn update_price_c(state: &MultiplierState, c_prev: f64, problem: &RsuSubproblem) -> f64 {
    let (lo, hi) = problem.bounds();
    (c_prev - state.step() * problem.lagrangian_dc(c_prev, state)).clamp(lo, hi)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubproblemResiduals {
    pub ldic_gaps: Vec<f64>,
    pub ir1_gap: f64,
    /// `sum l_m f_m - f_RSU`; negative means the pool is short.
    pub c3_gap: f64,
    /// `L_k(c) - own(c)`; negative means no purchase is possible.
    pub c11_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubproblemResult {
    pub interval_k: usize,
    pub lower: f64,
    pub upper: f64,
    pub c: f64,
    pub menu: ContractMenu,
    pub rsu_utility: f64,
    /// RSU utility at the last iterate, before the supply multiplier is
    /// re-solved to clear the pool exactly.
    pub raw_rsu_utility: f64,
    pub eta: f64,
    pub beta: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Some resource sits at `f_v_max`.
    pub clamped: bool,
    pub residuals: SubproblemResiduals,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<f64>>,
}

impl SubproblemResult {
    pub fn supply_feasible(&self) -> bool {
        self.residuals.c3_gap >= -FEASIBILITY_TOL * self.residuals.c3_gap.abs().max(1.0)
    }
}

pub fn solve_subproblem_k(
    k: usize,
    market: &SortedMarket,
    pop: &VehiclePopulation,
    params: &MarketParams,
    config: &Stage1Config,
) -> Result<SubproblemResult> {
    config.validate()?;
    let problem = RsuSubproblem::new(k, market, params)
        .ok_or_else(|| Error::invalid("k", format!("price interval for k = {k} is empty")))?;
    let design = ContractDesign::new(pop, params)?;
    let mut state = MultiplierState::new(pop, params, config.step_q)?;
    let mut c = problem.midpoint();

    let mut trace = config.record_trace.then(Vec::new);
    let mut prev_u: Option<f64> = None;
    let mut streak = 0;
    let mut converged = false;
    let mut iterations = 0;
    let mut raw_u = 0.0;

    while iterations < config.max_iters {
        iterations += 1;
        let menu = design.menu(state.eta);
        c = update_price_c(&state, c, &problem);
        raw_u = problem.rsu_utility(c, &menu, pop);
        if let Some(t) = trace.as_mut() {
            t.push(raw_u);
        }
        state = update_multipliers(&state, c, problem.demand(c), problem.own.at(c), &menu, pop);

        if let Some(prev) = prev_u {
            if (raw_u - prev).abs() / prev.abs().max(1.0) < config.eps {
                streak += 1;
            } else {
                streak = 0;
            }
        }
        prev_u = Some(raw_u);
        if streak >= config.patience {
            converged = true;
            break;
        }
    }

    // clear the pool exactly at the final price
    let purchase = problem.purchase(c).max(0.0);
    let eta = design
        .eta_for_supply(purchase, pop)
        .unwrap_or_else(|| design.saturation_eta());
    let menu = design.menu(eta);
    let report = verify_contract_feasibility(&menu, pop, params);
    let result = SubproblemResult {
        interval_k: k,
        lower: problem.lower,
        upper: problem.upper,
        c,
        rsu_utility: problem.rsu_utility(c, &menu, pop),
        raw_rsu_utility: raw_u,
        eta,
        beta: state.beta,
        converged,
        iterations,
        clamped: menu.resources.iter().any(|&f| f >= params.f_v_max),
        residuals: SubproblemResiduals {
            ldic_gaps: report.ldic_gaps.clone(),
            ir1_gap: report.ir1_gap,
            c3_gap: menu.supply(pop) - purchase,
            c11_gap: problem.purchase(c),
        },
        menu,
        trace,
    };
    if converged {
        Ok(result)
    } else {
        Err(Error::NotConverged(Box::new(result)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Outcome {
    pub menu: ContractMenu,
    pub c: f64,
    pub selected_k: usize,
    pub rsu_utility: f64,
    pub converged: bool,
    pub case: CapacityCase,
    pub candidates: Vec<SubproblemResult>,
}

impl Stage1Outcome {
    pub fn selected(&self) -> &SubproblemResult {
        self.candidates
            .iter()
            .find(|r| r.interval_k == self.selected_k)
            .expect("selected candidate is in the audit")
    }
}

pub fn solve_stage1(
    market: &SortedMarket,
    pop: &VehiclePopulation,
    params: &MarketParams,
    config: &Stage1Config,
) -> Result<Stage1Outcome> {
    if market.is_empty() {
        return Err(Error::AllUsersNeverOffload);
    }
    config.validate()?;
    ContractDesign::new(pop, params)?;

    let ks: Vec<usize> = (1..=market.len())
        .rev()
        .filter(|&k| market.price_interval(k).is_some())
        .collect();
    let candidates: Vec<SubproblemResult> = ks
        .par_iter()
        .map(|&k| match solve_subproblem_k(k, market, pop, params, config) {
            Ok(r) => Ok(r),
            Err(Error::NotConverged(r)) => Ok(*r),
            Err(e) => Err(e),
        })
        .collect::<Result<_>>()?;

    let any_feasible = candidates.iter().any(SubproblemResult::supply_feasible);
    let mut best: Option<&SubproblemResult> = None;
    for cand in &candidates {
        if any_feasible && !cand.supply_feasible() {
            continue;
        }
        if best.is_none_or(|b| cand.rsu_utility > b.rsu_utility) {
            best = Some(cand);
        }
    }
    let best = best.expect("price interval of k = N is never empty");
    log::debug!(
        "stage 1 picked k = {} at c = {} (U_RSU = {}) out of {} intervals",
        best.interval_k,
        best.c,
        best.rsu_utility,
        candidates.len()
    );

    Ok(Stage1Outcome {
        menu: best.menu.clone(),
        c: best.c,
        selected_k: best.interval_k,
        rsu_utility: best.rsu_utility,
        converged: best.converged,
        case: capacity_case(market, params),
        candidates: candidates.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcViolation {
    /// Vehicle type (1-based).
    pub vehicle: usize,
    /// Item it would rather take (1-based).
    pub item: usize,
    pub slack: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    /// `theta_m p_m - k_v f_m^2` per type.
    pub ir_slacks: Vec<f64>,
    pub ir_violations: Vec<usize>,
    pub ic_violations: Vec<IcViolation>,
    pub ir1_gap: f64,
    /// Own-item minus next-lower-item utility for types 2..M.
    pub ldic_gaps: Vec<f64>,
    /// Own-item minus next-higher-item utility for types 1..M-1.
    pub luic_slacks: Vec<f64>,
}

impl FeasibilityReport {
    pub fn is_feasible(&self) -> bool {
        self.ir_violations.is_empty() && self.ic_violations.is_empty()
    }

    pub fn ir1_active(&self) -> bool {
        self.ir1_gap.abs() < ACTIVE_TOL
    }

    pub fn ldic_active(&self) -> bool {
        self.ldic_gaps.iter().all(|g| g.abs() < ACTIVE_TOL)
    }

    pub fn max_ldic_gap(&self) -> f64 {
        self.ldic_gaps.iter().fold(0.0, |a, g| a.max(g.abs()))
    }
}

pub fn verify_contract_feasibility(
    menu: &ContractMenu,
    pop: &VehiclePopulation,
    params: &MarketParams,
) -> FeasibilityReport {
    let m = pop.len().min(menu.len());
    let value = |vehicle: usize, item: usize| {
        vehicle_utility(
            pop.types[vehicle],
            menu.resources[item],
            menu.rents[item],
            params,
        )
    };
    let ir_slacks: Vec<f64> = (0..m).map(|i| value(i, i)).collect();
    let ir_violations = (0..m)
        .filter(|&i| ir_slacks[i] < -FEASIBILITY_TOL)
        .map(|i| i + 1)
        .collect();
    let mut ic_violations = Vec::new();
    for i in 0..m {
        for j in (0..m).filter(|&j| j != i) {
            let slack = ir_slacks[i] - value(i, j);
            if slack < -FEASIBILITY_TOL {
                ic_violations.push(IcViolation {
                    vehicle: i + 1,
                    item: j + 1,
                    slack,
                });
            }
        }
    }
    FeasibilityReport {
        ir1_gap: ir_slacks.first().copied().unwrap_or(0.0),
        ldic_gaps: (1..m).map(|i| ir_slacks[i] - value(i, i - 1)).collect(),
        luic_slacks: (0..m.saturating_sub(1)).map(|i| ir_slacks[i] - value(i, i + 1)).collect(),
        ir_slacks,
        ir_violations,
        ic_violations,
    }
}
