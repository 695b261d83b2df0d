//! Reproducible scenarios: random user tasks and a vehicle population
//! discretised from a stay-time distribution.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_nonneg, ensure_positive, Error, Result};
use crate::model::{MarketParams, UserSpec, VehiclePopulation};
use crate::stage1::Stage1Config;

pub const SCHEMA_VERSION: &str = "fogmarket.scenario/1";
pub const RNG_ALGORITHM: &str = "chacha20";

/// Named substreams of the manifest seed.
pub const STREAM_SCENARIO: u64 = 1;
pub const STREAM_RAS: u64 = 2;

/// Generator for substream `stream` of `seed`.
pub fn substream(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Uniform draw in `[0, 1)` from the top 53 bits.
pub fn unit_f64(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

pub fn uniform_in(rng: &mut impl RngCore, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * unit_f64(rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum StayFamily {
    /// Rate per hour.
    Exponential { rate: f64 },
    Uniform { lo: f64, hi: f64 },
    /// Histogram with `edges.len() == weights.len() + 1`; mass is spread
    /// uniformly inside each bin.
    Empirical { edges: Vec<f64>, weights: Vec<f64> },
}

/// Distribution of a vehicle's total stay (hours) and the stay already
/// observed by the RSU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StayTimeModel {
    #[serde(flatten)]
    pub family: StayFamily,
    #[serde(default)]
    pub observed_elapsed: f64,
}

impl Default for StayTimeModel {
    fn default() -> Self {
        Self {
            family: StayFamily::Exponential { rate: 0.5 },
            observed_elapsed: 0.0,
        }
    }
}

impl StayTimeModel {
    pub fn validate(&self) -> Result<()> {
        ensure_nonneg("observed_elapsed", self.observed_elapsed)?;
        match &self.family {
            StayFamily::Exponential { rate } => ensure_positive("rate", *rate),
            StayFamily::Uniform { lo, hi } => {
                ensure_nonneg("lo", *lo)?;
                if !(hi > lo) {
                    return Err(Error::invalid("hi", "must exceed lo"));
                }
                Ok(())
            }
            StayFamily::Empirical { edges, weights } => {
                if edges.len() != weights.len() + 1 {
                    return Err(Error::LengthMismatch {
                        expected: weights.len() + 1,
                        found: edges.len(),
                    });
                }
                if edges.windows(2).any(|w| !(w[1] > w[0])) || edges[0] < 0.0 {
                    return Err(Error::invalid("edges", "must be nonnegative and strictly increasing"));
                }
                for &w in weights {
                    ensure_nonneg("weights", w)?;
                }
                ensure_positive("total weight", weights.iter().sum())
            }
        }
    }

    /// `1 - F(t)`.
    pub fn survival(&self, t: f64) -> f64 {
        match &self.family {
            StayFamily::Exponential { rate } => (-rate * t.max(0.0)).exp(),
            StayFamily::Uniform { lo, hi } => 1.0 - ((t - lo) / (hi - lo)).clamp(0.0, 1.0),
            StayFamily::Empirical { edges, weights } => {
                let total: f64 = weights.iter().sum();
                let mut below = 0.0;
                for (i, w) in weights.iter().enumerate() {
                    let (a, b) = (edges[i], edges[i + 1]);
                    if t >= b {
                        below += w;
                    } else if t > a {
                        below += w * (t - a) / (b - a);
                    }
                }
                (1.0 - below / total).max(0.0)
            }
        }
    }
}

/// `P(stay >= theta_v + elapsed | stay >= elapsed)`.
pub fn continue_stay_probability(model: &StayTimeModel, theta_v: f64) -> Result<f64> {
    ensure_nonneg("theta_v", theta_v)?;
    let elapsed = model.observed_elapsed;
    let base = model.survival(elapsed);
    if base <= 0.0 {
        return Err(Error::SupportExhausted { elapsed });
    }
    if let StayFamily::Exponential { rate } = model.family {
        return Ok((-rate * theta_v).exp());
    }
    Ok(model.survival(theta_v + elapsed) / base)
}

/// Types `theta_m = m t / 60` hours and their probabilities. Type `m` gets the
/// conditional mass of remaining stays in `[theta_m, theta_{m+1})`, the last
/// type the whole tail; stays shorter than `theta_1` are not offered a
/// contract.
pub fn discretize_types(model: &StayTimeModel, m: usize, interval_minutes: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if m == 0 {
        return Err(Error::invalid("M", "must be >= 1"));
    }
    ensure_positive("type_interval_minutes", interval_minutes)?;
    model.validate()?;
    let types: Vec<f64> = (1..=m).map(|i| i as f64 * interval_minutes / 60.0).collect();
    let survive = types
        .iter()
        .map(|&t| continue_stay_probability(model, t))
        .collect::<Result<Vec<_>>>()?;
    let mut mass: Vec<f64> = (0..m)
        .map(|i| if i + 1 < m { survive[i] - survive[i + 1] } else { survive[i] })
        .map(|v| v.max(0.0))
        .collect();
    let total: f64 = mass.iter().sum();
    if total <= 0.0 {
        return Err(Error::invalid("stay model", "no mass at or beyond the first type"));
    }
    mass.iter_mut().for_each(|v| *v /= total);
    Ok((types, mass))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub n: usize,
    pub m: usize,
    /// Total number of vehicles `L`.
    pub vehicles: f64,
    pub seed: u64,
    /// Seconds.
    pub t_max_range: (f64, f64),
    /// Gigacycles.
    pub cycles_range: (f64, f64),
    /// Megabits.
    pub data_range: (f64, f64),
    /// Mbit/s.
    pub rate_range: (f64, f64),
    /// GHz.
    pub local_rate: f64,
    pub type_interval_minutes: f64,
    pub params: MarketParams,
    pub stay: StayTimeModel,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n: 100,
            m: 10,
            vehicles: 1000.0,
            seed: 42,
            t_max_range: (0.5, 2.0),
            cycles_range: (0.5, 1.5),
            data_range: (0.2, 1.0),
            rate_range: (2.0, 10.0),
            local_rate: 1.0,
            type_interval_minutes: 20.0,
            params: MarketParams::default(),
            stay: StayTimeModel::default(),
        }
    }
}

fn check_range(name: &'static str, (lo, hi): (f64, f64)) -> Result<()> {
    ensure_positive(name, lo)?;
    if !(hi.is_finite() && hi >= lo) {
        return Err(Error::invalid(name, format!("empty range ({lo}, {hi})")));
    }
    Ok(())
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::invalid("N", "must be >= 1"));
        }
        if self.m == 0 {
            return Err(Error::invalid("M", "must be >= 1"));
        }
        ensure_positive("vehicles", self.vehicles)?;
        check_range("t_max_range", self.t_max_range)?;
        check_range("cycles_range", self.cycles_range)?;
        check_range("data_range", self.data_range)?;
        check_range("rate_range", self.rate_range)?;
        ensure_positive("local_rate", self.local_rate)?;
        self.params.validate()?;
        self.stay.validate()
    }
}

/// Everything a solve needs, as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub schema_version: String,
    pub rng_algorithm: String,
    pub seed: u64,
    pub params: MarketParams,
    pub users: Vec<UserSpec>,
    pub population: VehiclePopulation,
    #[serde(default)]
    pub solver: Stage1Config,
}

impl Scenario {
    pub fn new(params: MarketParams, users: Vec<UserSpec>, population: VehiclePopulation) -> Self {
        Self {
            schema_version: SCHEMA_VERSION.to_string(),
            rng_algorithm: RNG_ALGORITHM.to_string(),
            seed: 0,
            params,
            users,
            population,
            solver: Stage1Config::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.population.validate()?;
        self.solver.validate()?;
        if self.users.is_empty() {
            return Err(Error::invalid("users", "at least one user is required"));
        }
        Ok(())
    }
}

/// Users are drawn one after another from the scenario substream, so a
/// smaller `n` with the same seed yields a prefix of the same users.
pub fn generate_scenario(config: &ScenarioConfig) -> Result<Scenario> {
    config.validate()?;
    let mut rng = substream(config.seed, STREAM_SCENARIO);
    let users = (0..config.n)
        .map(|i| UserSpec {
            id: i as u32,
            max_latency: uniform_in(&mut rng, config.t_max_range),
            cycles: uniform_in(&mut rng, config.cycles_range),
            data_size: uniform_in(&mut rng, config.data_range),
            upload_rate: uniform_in(&mut rng, config.rate_range),
            local_rate: config.local_rate,
        })
        .collect();
    let (types, probs) = discretize_types(&config.stay, config.m, config.type_interval_minutes)?;
    let counts = probs.iter().map(|f| f * config.vehicles).collect();
    let population = VehiclePopulation::new(types, counts)?;
    Ok(Scenario {
        seed: config.seed,
        ..Scenario::new(config.params.clone(), users, population)
    })
}
