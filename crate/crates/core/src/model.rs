//! Domain types and the utility, delay and threshold formulas shared by every
//! stage solver and oracle.
//!
//! Units: compute in GHz (cycles in gigacycles), data in megabits, rates in
//! Mbit/s, time in seconds, vehicle types in hours. Money is dimensionless;
//! `p` and `c` are money per GHz, contract rents `p_m` are money per hour.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_nonneg, ensure_positive, Error, Result};

/// Raw task description of one mobile user, as stored in scenario files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserSpec {
    pub id: u32,
    /// Task size in gigacycles.
    pub cycles: f64,
    /// Input size in megabits.
    pub data_size: f64,
    /// Latency tolerance in seconds.
    pub max_latency: f64,
    /// Local CPU rate in GHz.
    pub local_rate: f64,
    /// Uplink rate in Mbit/s.
    pub upload_rate: f64,
}

/// Quantity above which offloading beats local execution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffloadThreshold {
    Finite(f64),
    /// Uploading alone takes at least as long as running locally.
    NeverOffload,
}

impl OffloadThreshold {
    pub fn finite(self) -> Option<f64> {
        match self {
            OffloadThreshold::Finite(v) => Some(v),
            OffloadThreshold::NeverOffload => None,
        }
    }
}

/// A user with derived latency sensitivity and offload threshold.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UserProfile {
    pub id: u32,
    pub cycles: f64,
    pub data_size: f64,
    pub max_latency: f64,
    pub local_rate: f64,
    pub upload_rate: f64,
    /// `C / t_max`.
    pub tau: f64,
    pub offload_threshold: OffloadThreshold,
}

impl UserProfile {
    pub fn new(spec: &UserSpec, params: &MarketParams) -> Result<Self> {
        ensure_positive("cycles", spec.cycles)?;
        ensure_positive("data_size", spec.data_size)?;
        ensure_positive("max_latency", spec.max_latency)?;
        ensure_positive("local_rate", spec.local_rate)?;
        ensure_positive("upload_rate", spec.upload_rate)?;

        let local = spec.cycles / spec.local_rate;
        let upload = spec.data_size / spec.upload_rate;
        let offload_threshold = if local <= upload {
            OffloadThreshold::NeverOffload
        } else {
            OffloadThreshold::Finite(spec.cycles / (local - upload))
        };

        Ok(Self {
            id: spec.id,
            cycles: spec.cycles,
            data_size: spec.data_size,
            max_latency: spec.max_latency,
            local_rate: spec.local_rate,
            upload_rate: spec.upload_rate,
            tau: params.big_c / spec.max_latency,
            offload_threshold,
        })
    }

    pub fn spec(&self) -> UserSpec {
        UserSpec {
            id: self.id,
            cycles: self.cycles,
            data_size: self.data_size,
            max_latency: self.max_latency,
            local_rate: self.local_rate,
            upload_rate: self.upload_rate,
        }
    }

    pub fn upload_time(&self) -> f64 {
        self.data_size / self.upload_rate
    }
}

/// Global market constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketParams {
    /// Offset inside the user log utility, `>= 1`.
    pub delta: f64,
    /// Scale of user latency sensitivity.
    pub big_c: f64,
    /// Unit energy cost of the MEC server (`e`).
    pub energy_cost_server: f64,
    /// Unit energy cost of vehicles (`e_v`).
    pub energy_cost_vehicle: f64,
    /// Effective switched capacitance `k`.
    pub capacitance: f64,
    /// MEC compute capacity in GHz.
    pub f_e_max: f64,
    /// Per-vehicle leasable compute in GHz.
    pub f_v_max: f64,
}

impl Default for MarketParams {
    fn default() -> Self {
        Self {
            delta: 1.0,
            big_c: 100.0,
            energy_cost_server: 60.0,
            energy_cost_vehicle: 60.0,
            capacitance: 1e-2,
            f_e_max: 300.0,
            f_v_max: 1.0,
        }
    }
}

impl MarketParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta.is_finite() && self.delta >= 1.0) {
            return Err(Error::invalid("delta", format!("must be >= 1, got {}", self.delta)));
        }
        ensure_positive("big_c", self.big_c)?;
        ensure_nonneg("energy_cost_server", self.energy_cost_server)?;
        ensure_nonneg("energy_cost_vehicle", self.energy_cost_vehicle)?;
        ensure_positive("capacitance", self.capacitance)?;
        ensure_positive("f_e_max", self.f_e_max)?;
        ensure_positive("f_v_max", self.f_v_max)?;
        Ok(())
    }

    /// Sets `e = e_v = a`.
    pub fn with_energy_cost(mut self, a: f64) -> Self {
        self.energy_cost_server = a;
        self.energy_cost_vehicle = a;
        self
    }

    pub fn k_e(&self) -> f64 {
        self.energy_cost_server * self.capacitance
    }

    pub fn k_v(&self) -> f64 {
        self.energy_cost_vehicle * self.capacitance
    }
}

/// Discretised vehicle types (remaining stay, hours) and per-type counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehiclePopulation {
    pub types: Vec<f64>,
    pub counts: Vec<f64>,
}

impl VehiclePopulation {
    pub fn new(types: Vec<f64>, counts: Vec<f64>) -> Result<Self> {
        let pop = Self { types, counts };
        pop.validate()?;
        Ok(pop)
    }

    pub fn validate(&self) -> Result<()> {
        if self.types.is_empty() {
            return Err(Error::invalid("types", "at least one vehicle type is required"));
        }
        if self.types.len() != self.counts.len() {
            return Err(Error::LengthMismatch {
                expected: self.types.len(),
                found: self.counts.len(),
            });
        }
        for &theta in &self.types {
            ensure_positive("types", theta)?;
        }
        for &l in &self.counts {
            ensure_nonneg("counts", l)?;
        }
        if self.types.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::invalid("types", "must be sorted ascending"));
        }
        ensure_positive("total vehicles", self.total())?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }
}

/// One item per vehicle type: leased compute and per-hour rent.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ContractMenu {
    pub resources: Vec<f64>,
    pub rents: Vec<f64>,
}

impl ContractMenu {
    pub fn zeros(m: usize) -> Self {
        Self {
            resources: vec![0.0; m],
            rents: vec![0.0; m],
        }
    }

    pub fn len(&self) -> usize {
        self.resources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.resources.is_empty()
    }

    /// Total compute the RSU pools from the population, `sum l_m f_m`.
    pub fn supply(&self, pop: &VehiclePopulation) -> f64 {
        pop.counts
            .iter()
            .zip(&self.resources)
            .map(|(l, f)| l * f)
            .sum()
    }

    /// Total rent the RSU pays, `sum l_m theta_m p_m`.
    pub fn payment(&self, pop: &VehiclePopulation) -> f64 {
        pop.counts
            .iter()
            .zip(&pop.types)
            .zip(&self.rents)
            .map(|((l, theta), p)| l * theta * p)
            .sum()
    }
}

/// Decisions of all stages for one market slot.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StageDecisions {
    pub rsu_price: f64,
    pub mec_price: f64,
    pub mec_own_compute: f64,
    pub purchased: f64,
    pub user_quantities: Vec<f64>,
    pub indicators: Vec<bool>,
}

impl StageDecisions {
    pub fn total_demand(&self) -> f64 {
        self.user_quantities.iter().sum()
    }

    /// `f_e + f_RSU - sum f_i`.
    pub fn clearing_residual(&self) -> f64 {
        self.mec_own_compute + self.purchased - self.total_demand()
    }
}

pub fn local_completion_time(user: &UserProfile) -> f64 {
    user.cycles / user.local_rate
}

pub fn offload_completion_time(user: &UserProfile, f: f64) -> Result<f64> {
    ensure_positive("f_i", f)?;
    Ok(user.upload_time() + user.cycles / f)
}

pub fn user_utility(user: &UserProfile, f: f64, p: f64, params: &MarketParams) -> f64 {
    user.tau * (f / user.local_rate + params.delta).ln() - p * f
}

pub fn mec_utility(decisions: &StageDecisions, params: &MarketParams) -> f64 {
    decisions.mec_price * decisions.total_demand()
        - params.k_e() * decisions.mec_own_compute * decisions.mec_own_compute
        - decisions.rsu_price * decisions.purchased
}

pub fn rsu_utility(c: f64, f_rsu: f64, menu: &ContractMenu, pop: &VehiclePopulation) -> Result<f64> {
    if menu.resources.len() != pop.len() || menu.rents.len() != pop.len() {
        return Err(Error::LengthMismatch {
            expected: pop.len(),
            found: menu.resources.len().min(menu.rents.len()),
        });
    }
    Ok(c * f_rsu - menu.payment(pop))
}

pub fn vehicle_utility(theta: f64, resource: f64, rent: f64, params: &MarketParams) -> f64 {
    theta * rent - params.k_v() * resource * resource
}
