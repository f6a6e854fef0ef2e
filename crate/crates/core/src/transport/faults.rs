// Copyright (c) The bftorder Authors
// SPDX-License-Identifier: Apache-2.0

//! Scripted faults for the simulator.
//!
//! Text grammar, one directive per line, `#` starts a comment. Times take
//! an `ms` or `s` suffix.
//!
//! ```text
//! crash <node> <time>
//! partition <ep,ep,...> <from> <until>
//! byzantine <node> equivocate-propose|alter-block|mute
//! crash-after-propose <node> <instance> <node,node,...>
//! loss <probability>
//! ```

use std::collections::BTreeSet;
use std::time::Duration;

use super::latency::parse_endpoint;
use super::EndpointId;
use crate::crypto::NodeId;
use crate::error::ConfigError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Behavior {
    /// As leader, sends a different batch to odd-numbered replicas.
    EquivocatePropose,
    /// Alters the content of every block it disseminates (re-signed).
    AlterBlock,
    /// Sends nothing.
    Mute,
}

impl std::str::FromStr for Behavior {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "equivocate-propose" => Ok(Self::EquivocatePropose),
            "alter-block" => Ok(Self::AlterBlock),
            "mute" => Ok(Self::Mute),
            other => Err(format!("unknown behavior {other:?}")),
        }
    }
}

impl std::fmt::Display for Behavior {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::EquivocatePropose => "equivocate-propose",
            Self::AlterBlock => "alter-block",
            Self::Mute => "mute",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Directive {
    Crash {
        node: EndpointId,
        at: Duration,
    },
    Partition {
        group: BTreeSet<EndpointId>,
        from: Duration,
        until: Duration,
    },
    Byzantine {
        node: NodeId,
        behavior: Behavior,
    },
    /// The node sends its PROPOSE (and WRITE) for `instance` only to `reach`, then crashes.
    CrashAfterPropose {
        node: NodeId,
        instance: u64,
        reach: BTreeSet<NodeId>,
    },
    Loss {
        probability: f64,
    },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FaultScript {
    pub directives: Vec<Directive>,
}

fn parse_time(s: &str) -> Option<Duration> {
    if let Some(v) = s.strip_suffix("ms") {
        return v
            .parse::<f64>()
            .ok()
            .filter(|v| *v >= 0.0)
            .map(|v| Duration::from_secs_f64(v / 1000.0));
    }
    let v = s.strip_suffix('s').unwrap_or(s);
    v.parse::<f64>().ok().filter(|v| *v >= 0.0).map(Duration::from_secs_f64)
}

fn parse_set(s: &str) -> Option<BTreeSet<EndpointId>> {
    s.split(',').filter(|t| !t.is_empty()).map(parse_endpoint).collect()
}

impl FaultScript {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn push(&mut self, d: Directive) -> &mut Self {
        self.directives.push(d);
        self
    }

    pub fn is_empty(&self) -> bool {
        self.directives.is_empty()
    }

    /// Nodes that are crashed or Byzantine at some point.
    pub fn faulty(&self) -> BTreeSet<EndpointId> {
        self.directives
            .iter()
            .filter_map(|d| match d {
                Directive::Crash { node, .. } => Some(*node),
                Directive::Byzantine { node, .. } | Directive::CrashAfterPropose { node, .. } => Some(*node),
                _ => None,
            })
            .collect()
    }

    pub fn byzantine(&self) -> BTreeSet<NodeId> {
        self.directives
            .iter()
            .filter_map(|d| match d {
                Directive::Byzantine { node, .. } => Some(*node),
                _ => None,
            })
            .collect()
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut script = Self::none();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let err = |reason: String| ConfigError::Parse { line, reason };
            let toks: Vec<&str> = raw.split('#').next().unwrap_or("").split_whitespace().collect();
            let node = |s: &str| parse_endpoint(s).ok_or_else(|| err(format!("bad endpoint {s}")));
            let time = |s: &str| parse_time(s).ok_or_else(|| err(format!("bad time {s}")));
            let set = |s: &str| parse_set(s).ok_or_else(|| err(format!("bad endpoint list {s}")));
            let d = match toks.as_slice() {
                [] => continue,
                ["crash", n, t] => Directive::Crash {
                    node: node(n)?,
                    at: time(t)?,
                },
                ["partition", g, a, b] => {
                    let (from, until) = (time(a)?, time(b)?);
                    if until < from {
                        return Err(err("partition ends before it starts".into()));
                    }
                    Directive::Partition {
                        group: set(g)?,
                        from,
                        until,
                    }
                }
                ["byzantine", n, b] => Directive::Byzantine {
                    node: node(n)?,
                    behavior: b.parse().map_err(err)?,
                },
                ["crash-after-propose", n, i, reach] => Directive::CrashAfterPropose {
                    node: node(n)?,
                    instance: i.parse().map_err(|_| err(format!("bad instance {i}")))?,
                    reach: set(reach)?,
                },
                ["loss", p] => {
                    let probability: f64 = p.parse().map_err(|_| err(format!("bad probability {p}")))?;
                    if !(0.0..=1.0).contains(&probability) {
                        return Err(err("probability outside [0, 1]".into()));
                    }
                    Directive::Loss { probability }
                }
                _ => return Err(err(format!("unrecognised directive: {}", raw.trim()))),
            };
            script.directives.push(d);
        }
        Ok(script)
    }
}
