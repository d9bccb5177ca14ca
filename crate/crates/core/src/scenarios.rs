//! Scenario files shipped with the crate, addressable by name.

use crate::config::{parse_scenario, Scenario};
use crate::error::ConfigError;

pub const BUILTIN: &[(&str, &str)] = &[
    ("fig8-burst", include_str!("../scenarios/fig8-burst.toml")),
    ("buffer-choke", include_str!("../scenarios/buffer-choke.toml")),
    ("buffer-choke-solo", include_str!("../scenarios/buffer-choke-solo.toml")),
    ("isolation", include_str!("../scenarios/isolation.toml")),
    ("isolation-low", include_str!("../scenarios/isolation-low.toml")),
    ("isolation-high", include_str!("../scenarios/isolation-high.toml")),
    ("two-queue-slow-burst", include_str!("../scenarios/two-queue-slow-burst.toml")),
    ("two-queue-fast-burst", include_str!("../scenarios/two-queue-fast-burst.toml")),
    ("steady-backlog", include_str!("../scenarios/steady-backlog.toml")),
];

pub fn names() -> impl Iterator<Item = &'static str> {
    BUILTIN.iter().map(|(n, _)| *n)
}

pub fn source(name: &str) -> Option<&'static str> {
    BUILTIN.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

/// Parses a built-in scenario. `None` if no scenario has that name.
pub fn builtin(name: &str) -> Option<Result<Scenario, ConfigError>> {
    source(name).map(|s| parse_scenario(s, None))
}
