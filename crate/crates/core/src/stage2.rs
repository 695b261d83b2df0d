//! MEC server pricing: given the RSU price `c`, choose the user price, own
//! compute and RSU purchase.
//!
//! Users are ordered by descending participation cutoff, so the participants
//! at any price form a prefix of that order. For a prefix of length `k` the
//! optimal price is `q_k(c) = sqrt(c * S_k / D_k)` where `S_k` is the prefix sum
//! of `tau` and `D_k = delta * sum f_l`. User `k` stays in while
//! `q_k(c) < cutoff_k`, i.e. while `c < T_k = cutoff_k^2 * D_k / S_k`.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_nonneg, Error, Result};
use crate::model::{MarketParams, UserProfile};
use crate::stage3::participation_cutoff;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SortedMarket {
    /// User ids by descending cutoff, ties by ascending id.
    pub ordering: Vec<u32>,
    pub cutoffs: Vec<f64>,
    pub prefix_tau: Vec<f64>,
    pub prefix_delta: Vec<f64>,
    pub thresholds: Vec<f64>,
    pub never_offload_ids: Vec<u32>,
}

pub fn sort_users(users: &[UserProfile], params: &MarketParams) -> Result<SortedMarket> {
    let mut rows: Vec<(f64, &UserProfile)> = Vec::with_capacity(users.len());
    let mut never_offload_ids = Vec::new();
    for u in users {
        match participation_cutoff(u, params) {
            Some(cut) => rows.push((cut, u)),
            None => never_offload_ids.push(u.id),
        }
    }
    if rows.is_empty() {
        return Err(Error::AllUsersNeverOffload);
    }
    rows.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.id.cmp(&b.1.id)));
    never_offload_ids.sort_unstable();

    let n = rows.len();
    let mut ordering = Vec::with_capacity(n);
    let mut cutoffs = Vec::with_capacity(n);
    let mut prefix_tau = Vec::with_capacity(n);
    let mut prefix_delta = Vec::with_capacity(n);
    let mut thresholds = Vec::with_capacity(n);
    let (mut s, mut d) = (0.0, 0.0);
    for (cut, u) in rows {
        s += u.tau;
        d += params.delta * u.local_rate;
        ordering.push(u.id);
        cutoffs.push(cut);
        prefix_tau.push(s);
        prefix_delta.push(d);
        thresholds.push(cut * cut * d / s);
    }

    Ok(SortedMarket {
        ordering,
        cutoffs,
        prefix_tau,
        prefix_delta,
        thresholds,
        never_offload_ids,
    })
}

impl SortedMarket {
    /// Number of users that can ever offload.
    pub fn len(&self) -> usize {
        self.ordering.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ordering.is_empty()
    }

    fn check_k(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.len() {
            Err(Error::IndexOutOfRange {
                index: k,
                len: self.len(),
            })
        } else {
            Ok(())
        }
    }

    /// `T_k`, 1-based.
    pub fn participation_threshold(&self, k: usize) -> Result<f64> {
        self.check_k(k)?;
        Ok(self.thresholds[k - 1])
    }

    /// Optimal price for the prefix of length `k`.
    pub fn prefix_price(&self, k: usize, c: f64) -> f64 {
        (c * self.prefix_tau[k - 1] / self.prefix_delta[k - 1]).sqrt()
    }

    /// Total prefix demand at the prefix price, `sqrt(S_k D_k / c) - D_k`.
    pub fn prefix_demand(&self, k: usize, c: f64) -> f64 {
        let (s, d) = (self.prefix_tau[k - 1], self.prefix_delta[k - 1]);
        (s * d / c).sqrt() - d
    }

    /// `d/dc` of [`Self::prefix_demand`].
    pub fn prefix_demand_slope(&self, k: usize, c: f64) -> f64 {
        let (s, d) = (self.prefix_tau[k - 1], self.prefix_delta[k - 1]);
        -0.5 * (s * d).sqrt() * c.powf(-1.5)
    }

    /// Largest `k` with `c < T_k`, or 0 when nobody participates.
    pub fn active_set(&self, c: f64) -> usize {
        (1..=self.len())
            .rev()
            .find(|&k| c < self.thresholds[k - 1])
            .unwrap_or(0)
    }

    /// RSU prices at which exactly the first `k` users participate:
    /// `[max_{j>k} T_j, T_k)`, with lower end 0 (open) for `k = N`.
    /// `None` when the interval is empty.
    pub fn price_interval(&self, k: usize) -> Option<(f64, f64)> {
        if k == 0 || k > self.len() {
            return None;
        }
        let upper = self.thresholds[k - 1];
        let lower = self.thresholds[k..].iter().copied().fold(0.0, f64::max);
        (lower < upper).then_some((lower, upper))
    }

    /// Largest threshold; at or above it no user participates.
    pub fn top_threshold(&self) -> f64 {
        self.thresholds.iter().copied().fold(0.0, f64::max)
    }

    pub fn last_threshold(&self) -> f64 {
        *self.thresholds.last().expect("non-empty market")
    }
}

/// Which branch of the MEC capacity split applies over the price range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CapacityCase {
    /// `2 k_e f_e_max >= T_1`: own compute never hits capacity.
    AllOwnCapacity,
    /// `2 k_e f_e_max <= T_N`: own compute is capped for most prices.
    CapacityClamped,
    /// Capacity binds inside the threshold range.
    Mixed,
}

pub fn capacity_case(market: &SortedMarket, params: &MarketParams) -> CapacityCase {
    let knee = 2.0 * params.k_e() * params.f_e_max;
    if knee >= market.top_threshold() {
        CapacityCase::AllOwnCapacity
    } else if knee <= market.last_threshold() {
        CapacityCase::CapacityClamped
    } else {
        CapacityCase::Mixed
    }
}

/// MEC own-compute policy `min(c / 2k_e, f_e_max)` and its slope in `c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OwnCompute {
    pub k_e: f64,
    pub f_e_max: f64,
}

impl OwnCompute {
    pub fn new(params: &MarketParams) -> Self {
        Self {
            k_e: params.k_e(),
            f_e_max: params.f_e_max,
        }
    }

    pub fn at(&self, c: f64) -> f64 {
        if self.k_e > 0.0 {
            (c / (2.0 * self.k_e)).min(self.f_e_max)
        } else {
            self.f_e_max
        }
    }

    pub fn slope(&self, c: f64) -> f64 {
        if self.k_e > 0.0 && c / (2.0 * self.k_e) < self.f_e_max {
            1.0 / (2.0 * self.k_e)
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Solution {
    pub c: f64,
    pub p_star: f64,
    pub f_e_star: f64,
    pub f_rsu_star: f64,
    pub active_k: usize,
    pub case: CapacityCase,
    /// Prefix demand at `p_star` (sum of the participants' purchases).
    pub demand: f64,
    /// `f_e + f_RSU - demand`; nonzero only when the RSU purchase clamps at 0.
    pub clearing_residual: f64,
}

pub fn solve_stage2(c: f64, market: &SortedMarket, params: &MarketParams) -> Result<Stage2Solution> {
    ensure_nonneg("c", c)?;
    let case = capacity_case(market, params);
    let k = market.active_set(c);
    if k == 0 {
        // nobody buys at any price the MEC would set; quote the top cutoff
        return Ok(Stage2Solution {
            c,
            p_star: market.cutoffs[0],
            f_e_star: 0.0,
            f_rsu_star: 0.0,
            active_k: 0,
            case,
            demand: 0.0,
            clearing_residual: 0.0,
        });
    }
    if c == 0.0 {
        return Err(Error::DegenerateZeroPrice { active: k });
    }

    let p_star = market.prefix_price(k, c);
    let f_e_star = OwnCompute::new(params).at(c);
    let demand = market.prefix_demand(k, c);
    let f_rsu_star = (demand - f_e_star).max(0.0);
    Ok(Stage2Solution {
        c,
        p_star,
        f_e_star,
        f_rsu_star,
        active_k: k,
        case,
        demand,
        clearing_residual: f_e_star + f_rsu_star - demand,
    })
}
