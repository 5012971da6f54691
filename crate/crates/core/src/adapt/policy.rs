use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Which parameters keep training after the first stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    /// Everything keeps training; no adapters (plain sequential fine-tuning).
    None,
    /// Update MLPs frozen; perception and the current domain's adapter train.
    #[default]
    Ncadapt,
    /// The finest level is frozen; the others keep training.
    Fl,
    /// The coarsest level is frozen; the others keep training.
    Fh,
    /// Only the perception convolutions keep training.
    Fc,
    /// One adapter shared by all domains; only it keeps training.
    Sa,
}

/// Whether perception convolutions are shared or copied per domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerceptionScope {
    #[default]
    Shared,
    PerDomain,
}

/// How domain adapters are allocated under a policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterMode {
    Off,
    PerDomain,
    Shared,
}

impl FreezePolicy {
    pub const ALL: [FreezePolicy; 6] = [
        FreezePolicy::None,
        FreezePolicy::Ncadapt,
        FreezePolicy::Fl,
        FreezePolicy::Fh,
        FreezePolicy::Fc,
        FreezePolicy::Sa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FreezePolicy::None => "none",
            FreezePolicy::Ncadapt => "ncadapt",
            FreezePolicy::Fl => "fl",
            FreezePolicy::Fh => "fh",
            FreezePolicy::Fc => "fc",
            FreezePolicy::Sa => "sa",
        }
    }

    pub fn adapter_mode(self) -> AdapterMode {
        match self {
            FreezePolicy::Ncadapt => AdapterMode::PerDomain,
            FreezePolicy::Sa => AdapterMode::Shared,
            _ => AdapterMode::Off,
        }
    }
}

impl fmt::Display for FreezePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FreezePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let lower = s.to_ascii_lowercase();
        let lower = lower.strip_prefix("nca_").unwrap_or(&lower);
        FreezePolicy::ALL
            .into_iter()
            .find(|p| p.name() == lower || (lower == "sequential" && *p == FreezePolicy::None))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown freeze policy '{s}'")))
    }
}

impl fmt::Display for PerceptionScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PerceptionScope::Shared => "shared",
            PerceptionScope::PerDomain => "per_domain",
        })
    }
}

impl FromStr for PerceptionScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "shared" => Ok(PerceptionScope::Shared),
            "per_domain" => Ok(PerceptionScope::PerDomain),
            _ => Err(Error::InvalidArgument(format!("unknown perception scope '{s}'"))),
        }
    }
}
