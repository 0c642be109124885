//! Named aggregation strategies: a component mask paired with an aggregation rule.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{Component, ComponentMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggRule {
    #[serde(alias = "avg", alias = "fedavg")]
    Average,
    #[serde(alias = "fedmedian")]
    Median,
}

impl AggRule {
    pub const ALL: [AggRule; 2] = [AggRule::Average, AggRule::Median];

    pub fn as_str(self) -> &'static str {
        match self {
            AggRule::Average => "FedAvg",
            AggRule::Median => "FedMedian",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            AggRule::Average => 0,
            AggRule::Median => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(AggRule::Average),
            1 => Some(AggRule::Median),
            _ => None,
        }
    }
}

impl fmt::Display for AggRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error)]
#[error("unknown strategy `{input}`; valid names: {}", valid_names().join(", "))]
pub struct UnknownStrategy {
    pub input: String,
}

impl FromStr for AggRule {
    type Err = UnknownStrategy;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "avg" | "average" | "fedavg" => Ok(AggRule::Average),
            "median" | "fedmedian" => Ok(AggRule::Median),
            _ => Err(UnknownStrategy { input: s.to_string() }),
        }
    }
}

/// The seven component masks in the order of the communication-savings table.
pub const NAMED_MASKS: [(&str, u8); 7] = [
    ("FA", 0b111),
    ("FedBackbone", 0b001),
    ("FedNeck", 0b010),
    ("FedHead", 0b100),
    ("FedNeckHead", 0b110),
    ("FedBackboneHead", 0b101),
    ("FedBackboneNeck", 0b011),
];

fn valid_names() -> Vec<&'static str> {
    NAMED_MASKS.iter().map(|(n, _)| *n).collect()
}

pub fn mask_name(mask: ComponentMask) -> Option<&'static str> {
    NAMED_MASKS
        .iter()
        .find(|(_, bits)| *bits == mask.bits())
        .map(|(n, _)| *n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Strategy {
    pub components: ComponentMask,
    pub rule: AggRule,
}

impl Strategy {
    /// Returns `None` for an empty mask.
    pub fn new(components: ComponentMask, rule: AggRule) -> Option<Self> {
        (!components.is_empty()).then_some(Self { components, rule })
    }

    pub fn full(rule: AggRule) -> Self {
        Self {
            components: ComponentMask::ALL,
            rule,
        }
    }

    pub fn only(component: Component, rule: AggRule) -> Self {
        Self {
            components: ComponentMask::of(&[component]),
            rule,
        }
    }

    /// All 14 strategies: seven masks for each rule.
    pub fn all() -> Vec<Strategy> {
        AggRule::ALL
            .into_iter()
            .flat_map(|rule| {
                NAMED_MASKS.iter().map(move |(_, bits)| Strategy {
                    components: ComponentMask::from_bits(*bits).unwrap(),
                    rule,
                })
            })
            .collect()
    }

    pub fn mask_name(&self) -> &'static str {
        mask_name(self.components).expect("non-empty masks are all named")
    }

    pub fn is_full(&self) -> bool {
        self.components == ComponentMask::ALL
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.mask_name(), self.rule)
    }
}

/// Parses `Name` (FedAvg implied) or `Name:rule`, e.g. `FedNeck:median`.
impl FromStr for Strategy {
    type Err = UnknownStrategy;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, rule) = match s.split_once(':') {
            Some((n, r)) => (n, r.parse::<AggRule>().map_err(|_| UnknownStrategy { input: s.into() })?),
            None => (s, AggRule::Average),
        };
        let name = name.trim();
        let bits = if name.eq_ignore_ascii_case("fullaggregation") {
            Some(0b111)
        } else {
            NAMED_MASKS
                .iter()
                .find(|(n, _)| n.eq_ignore_ascii_case(name))
                .map(|(_, b)| *b)
        };
        bits.map(|b| Strategy {
            components: ComponentMask::from_bits(b).unwrap(),
            rule,
        })
        .ok_or_else(|| UnknownStrategy { input: s.to_string() })
    }
}

impl Serialize for Strategy {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Strategy {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
