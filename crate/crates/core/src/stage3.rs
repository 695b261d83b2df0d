//! Users' best responses to the MEC price.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_positive, Result};
use crate::model::{user_utility, MarketParams, UserProfile};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UserResponse {
    pub user_id: u32,
    pub chi: bool,
    pub f_star: f64,
    pub utility: f64,
}

/// Price below which the user offloads, `tau / (f_l * delta + f_thresh)`.
/// `None` for users that never offload.
pub fn participation_cutoff(user: &UserProfile, params: &MarketParams) -> Option<f64> {
    let thresh = user.offload_threshold.finite()?;
    Some(user.tau / (user.local_rate * params.delta + thresh))
}

/// Optimal purchase at MEC price `p`. A price equal to the cutoff resolves to
/// not offloading.
pub fn best_response(user: &UserProfile, p: f64, params: &MarketParams) -> Result<UserResponse> {
    ensure_positive("p", p)?;
    let offload = participation_cutoff(user, params).is_some_and(|cut| p < cut);
    let f_star = if offload {
        user.tau / p - user.local_rate * params.delta
    } else {
        0.0
    };
    Ok(UserResponse {
        user_id: user.id,
        chi: offload,
        f_star,
        utility: user_utility(user, f_star, p, params),
    })
}
