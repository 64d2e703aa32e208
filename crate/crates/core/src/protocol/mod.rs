//! Scaling protocols: the DRRS mechanisms and the baselines they are
//! compared against.

mod checkpoint;
mod epoch;
mod reroute;
mod schedule;
mod subscale;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{merge_with_checkpoint, InjectionPlan};
pub use epoch::{Epoch, EpochTable};
pub use reroute::RerouteBuffer;
pub use schedule::{next_message, SchedulingConfig, Selection};
pub use subscale::{Subscale, SubscalePhase};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolChoice {
    StopRestart,
    AllAtOnce,
    #[serde(alias = "fluid_otfs")]
    Fluid,
    FetchOnDemand,
    Unbound,
    Drrs,
}

impl ProtocolChoice {
    pub const ALL: [ProtocolChoice; 6] = [
        ProtocolChoice::StopRestart,
        ProtocolChoice::AllAtOnce,
        ProtocolChoice::Fluid,
        ProtocolChoice::FetchOnDemand,
        ProtocolChoice::Unbound,
        ProtocolChoice::Drrs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProtocolChoice::StopRestart => "stop_restart",
            ProtocolChoice::AllAtOnce => "all_at_once",
            ProtocolChoice::Fluid => "fluid",
            ProtocolChoice::FetchOnDemand => "fetch_on_demand",
            ProtocolChoice::Unbound => "unbound",
            ProtocolChoice::Drrs => "drrs",
        }
    }

    /// Whether outputs of a run under this protocol can be trusted.
    pub fn is_authoritative(self) -> bool {
        self != ProtocolChoice::Unbound
    }

    /// Record scheduling is on by default only for DRRS.
    pub fn schedules_by_default(self) -> bool {
        self == ProtocolChoice::Drrs
    }
}

impl fmt::Display for ProtocolChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProtocolChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Ok(match norm.as_str() {
            "stop_restart" | "stop" | "restart" => ProtocolChoice::StopRestart,
            "all_at_once" | "allatonce" => ProtocolChoice::AllAtOnce,
            "fluid" | "fluid_otfs" | "otfs" => ProtocolChoice::Fluid,
            "fetch_on_demand" | "fod" | "fetch" => ProtocolChoice::FetchOnDemand,
            "unbound" => ProtocolChoice::Unbound,
            "drrs" => ProtocolChoice::Drrs,
            _ => return Err(Error::Config(format!("unknown protocol `{s}`"))),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_parse_back() {
        for p in ProtocolChoice::ALL {
            assert_eq!(p.name().parse::<ProtocolChoice>().unwrap(), p);
        }
        assert_eq!(
            "fluid-otfs".parse::<ProtocolChoice>().unwrap(),
            ProtocolChoice::Fluid
        );
        assert!("megaphone".parse::<ProtocolChoice>().is_err());
    }

    #[test]
    fn only_unbound_is_non_authoritative() {
        let bad: Vec<_> = ProtocolChoice::ALL
            .into_iter()
            .filter(|p| !p.is_authoritative())
            .collect();
        assert_eq!(bad, vec![ProtocolChoice::Unbound]);
    }
}
