//! Brute-force and numerical cross-checks for the closed-form solvers.
//!
//! Nothing here calls the Stage-2 or Stage-1 solvers. Grids share only the
//! utility formulas in [`crate::model`] and the per-user response of
//! [`crate::stage3`], so agreement is evidence rather than tautology.

use serde::{Deserialize, Serialize};

use crate::model::{user_utility, vehicle_utility, ContractMenu, MarketParams, UserProfile, VehiclePopulation};
use crate::stage2::Stage2Solution;
use crate::stage3::{best_response, participation_cutoff};

/// Maximise `f` over a uniform grid on `[lo, hi]`, then repeatedly zoom into
/// the neighbourhood of the best point. Ties go to the lowest index.
pub fn zoom_max(f: impl Fn(f64) -> f64, lo: f64, hi: f64, points: usize, rounds: usize) -> (f64, f64) {
    let points = points.max(2);
    let (mut lo, mut hi) = (lo, hi);
    let (mut best_x, mut best_v) = (lo, f(lo));
    for _ in 0..rounds.max(1) {
        let step = (hi - lo) / (points - 1) as f64;
        for i in 0..points {
            let x = lo + step * i as f64;
            let v = f(x);
            if v > best_v {
                best_x = x;
                best_v = v;
            }
        }
        let (new_lo, new_hi) = ((best_x - step).max(lo), (best_x + step).min(hi));
        if new_hi - new_lo <= 0.0 {
            break;
        }
        lo = new_lo;
        hi = new_hi;
    }
    (best_x, best_v)
}

/// Exhaustive maximum of the user utility over `{0} U (f_thresh, f_hi]` with
/// `f_hi = max(10 f_thresh, 2 tau / p)`.
pub fn grid_best_response(user: &UserProfile, p: f64, params: &MarketParams, resolution: usize) -> (f64, f64) {
    let zero = (0.0, 0.0);
    let Some(thresh) = user.offload_threshold.finite() else {
        return zero;
    };
    let hi = (10.0 * thresh).max(2.0 * user.tau / p);
    let n = resolution.max(10_000);
    let step = (hi - thresh) / n as f64;
    let mut best = zero;
    for i in 1..=n {
        let f = thresh + step * i as f64;
        let u = user_utility(user, f, p, params);
        if u > best.1 {
            best = (f, u);
        }
    }
    best
}

/// MEC utility evaluated with every user's own Stage-3 choice and the RSU purchase
/// set by clearing. Returns `(utility, total demand)`.
pub fn mec_utility_at(users: &[UserProfile], p: f64, f_e: f64, c: f64, params: &MarketParams) -> (f64, f64) {
    let demand: f64 = users
        .iter()
        .map(|u| best_response(u, p, params).map(|r| r.f_star).unwrap_or(0.0))
        .sum();
    let purchase = (demand - f_e).max(0.0);
    (p * demand - params.k_e() * f_e * f_e - c * purchase, demand)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridStage2 {
    pub p_best: f64,
    pub fe_best: f64,
    pub u_best: f64,
    /// Offload decisions at `p_best`, in input order.
    pub chi: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub points: usize,
    pub rounds: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { points: 200, rounds: 6 }
    }
}

/// Grid search over `(p, f_e)`. The price axis is split at the users'
/// participation cutoffs, where the objective jumps; within each piece the
/// grid zooms towards the best point. Participation is never assumed to be a
/// prefix.
pub fn grid_stage2(c: f64, users: &[UserProfile], params: &MarketParams, grid: GridSpec) -> GridStage2 {
    let mut cuts: Vec<f64> = users.iter().filter_map(|u| participation_cutoff(u, params)).collect();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();

    let inner = |p: f64| {
        let (_, demand) = mec_utility_at(users, p, 0.0, c, params);
        let cap = params.f_e_max.min(demand);
        let (fe, u) = zoom_max(|fe| mec_utility_at(users, p, fe, c, params).0, 0.0, cap, 41, grid.rounds + 4);
        (fe, u)
    };

    let mut best = (cuts.last().copied().unwrap_or(1.0), 0.0, 0.0);
    let mut lo = 0.0;
    for &hi in &cuts {
        // stay strictly inside (lo, hi): at p = hi that user leaves
        let margin = 1e-12 * hi;
        let (a, b) = (lo + margin, hi - margin);
        if b > a {
            let (p, u) = zoom_max(|p| inner(p).1, a, b, grid.points, grid.rounds);
            if u > best.2 {
                best = (p, inner(p).0, u);
            }
        }
        lo = hi;
    }

    let chi = users
        .iter()
        .map(|u| best_response(u, best.0, params).map(|r| r.chi).unwrap_or(false))
        .collect();
    GridStage2 {
        p_best: best.0,
        fe_best: best.1,
        u_best: best.2,
        chi,
    }
}

/// Rents with type-1 IR and every downward-adjacent IC binding, written out
/// from the utility definition rather than shared with the solver.
fn binding_rents(resources: &[f64], pop: &VehiclePopulation, params: &MarketParams) -> Vec<f64> {
    let mut rents: Vec<f64> = Vec::with_capacity(resources.len());
    for (m, &f) in resources.iter().enumerate() {
        let theta = pop.types[m];
        // theta p_m - k_v f_m^2 = theta p_{m-1} - k_v f_{m-1}^2, or = 0 for m = 1
        let outside = match m {
            0 => 0.0,
            _ => vehicle_utility(theta, resources[m - 1], rents[m - 1], params),
        };
        rents.push((outside + params.k_v() * f * f) / theta);
    }
    rents
}

fn ir_ic_feasible(menu: &ContractMenu, pop: &VehiclePopulation, params: &MarketParams) -> bool {
    let m = pop.len();
    (0..m).all(|i| {
        let own = vehicle_utility(pop.types[i], menu.resources[i], menu.rents[i], params);
        own >= -1e-9
            && (0..m).all(|j| own >= vehicle_utility(pop.types[i], menu.resources[j], menu.rents[j], params) - 1e-9)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridContract {
    pub menu: ContractMenu,
    pub c: f64,
    pub rsu_utility: f64,
    /// Grid spacing in the resource and price axes.
    pub f_step: f64,
    pub c_step: f64,
    /// Number of IR/IC-feasible resource tuples on the grid.
    pub feasible_menus: usize,
}

impl GridContract {
    /// Every grid menu is a feasible continuous menu, so a correct solver can
    /// only lose to the grid by its own convergence error.
    pub fn slack(&self) -> f64 {
        1e-4 * self.rsu_utility.abs().max(1.0)
    }
}

/// Best IR/IC-feasible contract and RSU price on a grid. `interval` is the
/// half-open price range `[lo, hi)`; `purchase(c)` is what the MEC server buys
/// at `c`. Returns `None` when no grid point can supply the purchase.
pub fn grid_contract(
    pop: &VehiclePopulation,
    params: &MarketParams,
    interval: (f64, f64),
    purchase: impl Fn(f64) -> f64,
    f_points: usize,
    c_points: usize,
) -> Option<GridContract> {
    let m = pop.len();
    assert!(m <= 3, "grid_contract enumerates at most three types");
    let f_points = f_points.max(2);
    let f_step = params.f_v_max / (f_points - 1) as f64;

    // all resource tuples, then keep the feasible ones
    let mut menus: Vec<(f64, f64, ContractMenu)> = Vec::new();
    let total = f_points.pow(m as u32);
    for code in 0..total {
        let mut rest = code;
        let resources: Vec<f64> = (0..m)
            .map(|_| {
                let idx = rest % f_points;
                rest /= f_points;
                idx as f64 * f_step
            })
            .collect();
        let rents = binding_rents(&resources, pop, params);
        let menu = ContractMenu { resources, rents };
        if ir_ic_feasible(&menu, pop, params) {
            menus.push((menu.supply(pop), menu.payment(pop), menu));
        }
    }
    if menus.is_empty() {
        return None;
    }
    menus.sort_by(|a, b| a.0.total_cmp(&b.0));
    // suffix minimum of cost: cheapest menu with supply >= s
    let mut cheapest = vec![menus.len() - 1; menus.len()];
    for i in (0..menus.len() - 1).rev() {
        let j = cheapest[i + 1];
        cheapest[i] = if menus[i].1 <= menus[j].1 { i } else { j };
    }

    let (lo, hi) = interval;
    let c_points = c_points.max(2);
    let top = hi * (1.0 - 1e-9);
    let c_step = (top - lo) / (c_points - 1) as f64;
    let mut best: Option<(f64, usize, f64)> = None;
    for i in 0..c_points {
        let c = lo + c_step * i as f64;
        if c <= 0.0 {
            continue;
        }
        let need = purchase(c).max(0.0);
        let first = menus.partition_point(|row| row.0 < need - 1e-12);
        if first == menus.len() {
            continue;
        }
        let idx = cheapest[first];
        let u = c * need - menus[idx].1;
        if best.is_none_or(|b| u > b.2) {
            best = Some((c, idx, u));
        }
    }
    let (c, idx, u) = best?;
    Some(GridContract {
        menu: menus[idx].2.clone(),
        c,
        rsu_utility: u,
        f_step,
        c_step,
        feasible_menus: menus.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KktResiduals {
    /// Residuals relative to the scale of each equation.
    pub stat_p: f64,
    pub stat_fe: f64,
    pub stat_frsu: f64,
    /// `f_e + f_RSU - demand`.
    pub primal_c9: f64,
    /// `gamma (f_e - f_e_max)`, `zeta p`, `xi f_e`, `nu f_RSU`, `alpha * primal_c9`.
    pub complementary: Vec<f64>,
    pub alpha: f64,
    pub gamma: f64,
    pub zeta: f64,
    pub xi: f64,
    pub nu: f64,
}

impl KktResiduals {
    pub fn max_abs(&self) -> f64 {
        [self.stat_p, self.stat_fe, self.stat_frsu]
            .iter()
            .chain(&self.complementary)
            .fold(0.0, |a, r| a.max(r.abs()))
    }

    pub fn interior_branch(&self) -> bool {
        self.zeta == 0.0 && self.xi == 0.0 && self.nu == 0.0
    }
}

/// Reconstruct the multipliers of the MEC problem at a proposed solution and
/// report the first-order residuals. `users` are the participants; their
/// price sensitivity `S` and local offset `D` enter `dL/dp = alpha S / p^2 - D`.
pub fn kkt_residuals(
    p: f64,
    f_e: f64,
    f_rsu: f64,
    c: f64,
    participants: &[UserProfile],
    params: &MarketParams,
) -> KktResiduals {
    let s: f64 = participants.iter().map(|u| u.tau).sum();
    let d: f64 = participants.iter().map(|u| params.delta * u.local_rate).sum();
    let demand = s / p - d;
    let k_e = params.k_e();
    let at_cap = f_e >= params.f_e_max;

    let (alpha, gamma, nu) = if f_rsu > 0.0 {
        let gamma = if at_cap { c - 2.0 * k_e * f_e } else { 0.0 };
        (c, gamma, 0.0)
    } else {
        let alpha = 2.0 * k_e * f_e;
        (alpha, 0.0, c - alpha)
    };
    let (zeta, xi) = (0.0, 0.0);
    let primal_c9 = f_e + f_rsu - demand;

    KktResiduals {
        stat_p: (alpha * s / (p * p) - d + zeta) / d.max(f64::MIN_POSITIVE),
        stat_fe: (alpha - 2.0 * k_e * f_e - gamma + xi) / c.max(f64::MIN_POSITIVE),
        stat_frsu: (c - alpha - nu) / c.max(f64::MIN_POSITIVE),
        complementary: vec![
            gamma * (f_e - params.f_e_max),
            zeta * p,
            xi * f_e,
            nu * f_rsu,
            alpha * primal_c9,
        ],
        primal_c9,
        alpha,
        gamma,
        zeta,
        xi,
        nu,
    }
}

/// [`kkt_residuals`] at a Stage-2 solution. `participants` are the users the
/// solution claims are active.
pub fn kkt_check_stage2(
    solution: &Stage2Solution,
    participants: &[UserProfile],
    params: &MarketParams,
) -> KktResiduals {
    kkt_residuals(
        solution.p_star,
        solution.f_e_star,
        solution.f_rsu_star,
        solution.c,
        participants,
        params,
    )
}

/// Largest relative gap between `grad` and central differences of `f` at
/// `point` with step `h`.
pub fn finite_diff_check(f: impl Fn(&[f64]) -> f64, grad: &[f64], point: &[f64], h: f64) -> f64 {
    let mut worst: f64 = 0.0;
    let mut x = point.to_vec();
    for (i, &g) in grad.iter().enumerate() {
        let x0 = x[i];
        x[i] = x0 + h;
        let up = f(&x);
        x[i] = x0 - h;
        let down = f(&x);
        x[i] = x0;
        let fd = (up - down) / (2.0 * h);
        let scale = g.abs().max(fd.abs()).max(1e-300);
        worst = worst.max((g - fd).abs() / scale);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::UserSpec;
    use approx::assert_relative_eq;

    fn user(id: u32, cycles: f64, data: f64, t_max: f64) -> UserProfile {
        let spec = UserSpec {
            id,
            cycles,
            data_size: data,
            max_latency: t_max,
            local_rate: 1.0,
            upload_rate: 1.0,
        };
        UserProfile::new(&spec, &MarketParams::default()).unwrap()
    }

    #[test]
    fn grid_best_response_examples() {
        let params = MarketParams::default();
        let u = user(0, 1.0, 0.5, 1.0);
        let (f, _) = grid_best_response(&u, 25.0, &params, 1_000_000);
        assert!((f - 3.0).abs() < 1e-4);

        // past (1 + x) ln(1 + x) / x times the cutoff, x = f_thresh / f_l = 2
        let (f, v) = grid_best_response(&u, 60.0, &params, 10_000);
        assert_eq!((f, v), (0.0, 0.0));
    }

    #[test]
    fn grid_best_response_just_below_cutoff_beats_staying_local() {
        // the utility at f_thresh+ exceeds u(0) = 0 for prices a bit above
        // the cutoff, so the grid picks f_thresh+ where the closed form says 0
        let params = MarketParams::default();
        let u = user(0, 1.0, 0.5, 1.0);
        let cut = participation_cutoff(&u, &params).unwrap();
        let (f, v) = grid_best_response(&u, cut * 1.05, &params, 100_000);
        assert!(f > 2.0 && f < 2.01);
        assert!(v > 0.0);
    }

    #[test]
    fn grid_stage2_worked_single_user() {
        // tau = 100, f_l = 1, k_e = 0.6: p* = sqrt(c * 100) = 10 at c = 1
        let params = MarketParams::default();
        let users = vec![user(0, 1.0, 0.05, 1.0)];
        let g = grid_stage2(1.0, &users, &params, GridSpec::default());
        assert!((g.p_best - 10.0).abs() < 0.01);
        assert!(g.chi[0]);
    }

    #[test]
    fn grid_stage2_above_top_threshold_serves_from_own_compute() {
        // T_1 = 100/9; above it nothing is bought from the RSU, but the MEC
        // still profits by serving the user entirely from its own capacity
        let params = MarketParams::default();
        let users = vec![user(0, 1.0, 0.5, 1.0)];
        let g = grid_stage2(1e4, &users, &params, GridSpec::default());
        assert!(g.u_best > 0.0);
        let (_, demand) = mec_utility_at(&users, g.p_best, 0.0, 1e4, &params);
        assert!((g.fe_best - demand).abs() < 1e-6 * demand);

        let tiny = MarketParams {
            f_e_max: 1e-9,
            ..MarketParams::default()
        };
        let g = grid_stage2(1e4, &users, &tiny, GridSpec::default());
        assert!(g.u_best < 1e-6);
    }

    #[test]
    fn binding_rents_reproduce_two_type_example() {
        let params = MarketParams::default().with_energy_cost(100.0);
        let pop = VehiclePopulation::new(vec![1.0, 2.0], vec![1.0, 1.0]).unwrap();
        let rents = binding_rents(&[0.5, 1.0], &pop, &params);
        assert_relative_eq!(rents[0], 0.25);
        assert_relative_eq!(rents[1], 0.625);
    }

    #[test]
    fn grid_contract_single_type_reduction() {
        // one type, l = 10, k_v = 1, purchase(c) = 10 - c on [0, 10):
        // U = c (10 - c) - 10 * (10 - c)^2 / 100 / theta with f = (10 - c) / 10
        let params = MarketParams::default().with_energy_cost(100.0);
        let pop = VehiclePopulation::new(vec![1.0], vec![10.0]).unwrap();
        let g = grid_contract(&pop, &params, (0.0, 10.0), |c| 10.0 - c, 401, 2001).unwrap();
        let exact = (0..=100_000)
            .map(|i| {
                let c = 10.0 * i as f64 / 100_000.0;
                let f = (10.0 - c) / 10.0;
                c * (10.0 - c) - 10.0 * f * f
            })
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(g.rsu_utility <= exact + 1e-9);
        // the grid only loses by discretisation, here well under 0.1%
        assert!(exact - g.rsu_utility <= 1e-3 * exact);
    }

    #[test]
    fn grid_contract_reports_unreachable_purchase() {
        let params = MarketParams::default();
        let pop = VehiclePopulation::new(vec![1.0, 2.0], vec![1.0, 1.0]).unwrap();
        assert!(grid_contract(&pop, &params, (1.0, 2.0), |_| 100.0, 11, 11).is_none());
    }

    #[test]
    fn kkt_interior_worked_example() {
        let params = MarketParams::default();
        let users = vec![user(0, 1.0, 0.05, 1.0)];
        // c = 1: p = 10, f_e = 1/1.2, demand = 9
        let f_e = 1.0 / 1.2;
        let r = kkt_residuals(10.0, f_e, 9.0 - f_e, 1.0, &users, &params);
        assert!(r.max_abs() < 1e-10, "{r:?}");
        assert!(r.interior_branch());
    }

    #[test]
    fn kkt_capacity_clamp_branch() {
        let params = MarketParams {
            f_e_max: 0.5,
            ..MarketParams::default()
        };
        let users = vec![user(0, 1.0, 0.05, 1.0)];
        let r = kkt_residuals(10.0, 0.5, 8.5, 1.0, &users, &params);
        assert_relative_eq!(r.gamma, 1.0 - 1.2 * 0.5);
        assert!(r.gamma >= 0.0);
        assert!(r.max_abs() < 1e-10);
    }

    #[test]
    fn kkt_purchase_clamp_branch() {
        // own compute exceeds demand, so nothing is bought and the supply constraint is slack
        let params = MarketParams::default();
        let users = vec![user(0, 1.0, 0.05, 1.0)];
        let c = 30.0;
        let p = (c * 100.0_f64).sqrt();
        let f_e = c / 1.2;
        let r = kkt_residuals(p, f_e, 0.0, c, &users, &params);
        assert!(r.nu >= 0.0);
        assert!(r.primal_c9 > 0.0);
        assert!(r.complementary[4].abs() > 1.0);
    }

    #[test]
    fn finite_diff_examples() {
        let quad = |x: &[f64]| 3.0 * x[0] * x[0] - 2.0 * x[0] * x[1] + x[1];
        let at = [0.7, -1.3];
        let grad = [6.0 * at[0] - 2.0 * at[1], -2.0 * at[0] + 1.0];
        assert!(finite_diff_check(quad, &grad, &at, 1e-4) < 1e-10);

        let cubic = |x: &[f64]| x[0].powi(3);
        let errors: Vec<f64> = [1e-1, 1e-2, 1e-3]
            .iter()
            .map(|&h| finite_diff_check(cubic, &[3.0], &[1.0], h))
            .collect();
        assert!(errors[0] > errors[1] && errors[1] > errors[2]);
    }

    #[test]
    fn zoom_max_finds_interior_peak() {
        let (x, v) = zoom_max(|x| -(x - 0.3141).powi(2), 0.0, 1.0, 50, 8);
        assert!((x - 0.3141).abs() < 1e-9);
        assert!(v <= 0.0);
    }
}
