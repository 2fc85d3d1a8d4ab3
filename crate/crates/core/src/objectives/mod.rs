//! Pretraining example construction and losses.

mod duett;
mod ebcl;
mod ocp;
mod strats;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

pub use duett::{
    bin_observations, duett_loss, duett_make_example, DuettColumns, DuettConfig, DuettModel,
    FeatureGrid, ImputationExample,
};
pub use ebcl::{
    clip_loss_value, ebcl_batch_loss, ebcl_clip_loss, ebcl_epoch_batches, ebcl_projections,
    sample_ebcl_batch, ContrastiveBatch,
};
pub use ocp::{ocp_layout, ocp_loss, ocp_make_example, OcpExample, MIN_HALF};
pub use strats::{
    forecast_targets, strats_loss, strats_make_example, strats_predict, ForecastExample,
    MAX_ATTEMPTS, MIN_INPUTS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Ebcl,
    Ocp,
    Strats,
    Duett,
}

impl Objective {
    pub const ALL: [Objective; 4] = [Objective::Ebcl, Objective::Ocp, Objective::Strats, Objective::Duett];

    pub fn as_str(self) -> &'static str {
        match self {
            Objective::Ebcl => "ebcl",
            Objective::Ocp => "ocp",
            Objective::Strats => "strats",
            Objective::Duett => "duett",
        }
    }

    /// Epochs without validation improvement before stopping.
    pub fn default_patience(self) -> usize {
        match self {
            Objective::Ocp | Objective::Duett => 10,
            Objective::Ebcl | Objective::Strats => 3,
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Objective::ALL
            .into_iter()
            .find(|o| o.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown objective {s:?}; expected ebcl, ocp, strats or duett")))
    }
}
