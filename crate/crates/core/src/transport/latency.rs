// Copyright (c) The bftorder Authors
// SPDX-License-Identifier: Apache-2.0

//! One-way latency model for the simulator.
//!
//! Text grammar, one directive per line, `#` starts a comment:
//!
//! ```text
//! site <name>
//! latency <from-site> <to-site> <mean-ms> [jitter-ms]
//! symmetric <site-a> <site-b> <mean-ms> [jitter-ms]
//! place <endpoint> <site>          # endpoint: n<id> or f<index>
//! default <mean-ms> [jitter-ms]
//! ```

use std::collections::BTreeMap;
use std::time::Duration;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{frontend_endpoint, EndpointId};
use crate::error::ConfigError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub mean_ms: f64,
    pub jitter_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyMatrix {
    sites: Vec<String>,
    cells: BTreeMap<(usize, usize), Cell>,
    placement: BTreeMap<EndpointId, usize>,
    default: Cell,
}

pub fn parse_endpoint(tok: &str) -> Option<EndpointId> {
    if let Some(rest) = tok.strip_prefix('f') {
        return rest.parse::<usize>().ok().map(frontend_endpoint);
    }
    tok.strip_prefix('n').unwrap_or(tok).parse().ok()
}

impl LatencyMatrix {
    /// Every pair of endpoints at `mean_ms` with `jitter_ms` standard deviation.
    pub fn uniform(mean_ms: f64, jitter_ms: f64) -> Self {
        Self {
            sites: Vec::new(),
            cells: BTreeMap::new(),
            placement: BTreeMap::new(),
            default: Cell { mean_ms, jitter_ms },
        }
    }

    pub fn sites(&self) -> &[String] {
        &self.sites
    }

    pub fn site_of(&self, ep: EndpointId) -> Option<&str> {
        self.placement.get(&ep).map(|i| self.sites[*i].as_str())
    }

    fn site_index(&self, name: &str) -> Option<usize> {
        self.sites.iter().position(|s| s == name)
    }

    pub fn add_site(&mut self, name: &str) -> usize {
        match self.site_index(name) {
            Some(i) => i,
            None => {
                self.sites.push(name.to_string());
                self.sites.len() - 1
            }
        }
    }

    pub fn set(&mut self, from: &str, to: &str, mean_ms: f64, jitter_ms: f64) {
        let (a, b) = (self.add_site(from), self.add_site(to));
        self.cells.insert((a, b), Cell { mean_ms, jitter_ms });
    }

    pub fn set_symmetric(&mut self, a: &str, b: &str, mean_ms: f64, jitter_ms: f64) {
        self.set(a, b, mean_ms, jitter_ms);
        self.set(b, a, mean_ms, jitter_ms);
    }

    pub fn place(&mut self, ep: EndpointId, site: &str) {
        let i = self.add_site(site);
        self.placement.insert(ep, i);
    }

    pub fn cell(&self, from: EndpointId, to: EndpointId) -> Cell {
        match (self.placement.get(&from), self.placement.get(&to)) {
            (Some(a), Some(b)) => self.cells.get(&(*a, *b)).copied().unwrap_or(self.default),
            _ => self.default,
        }
    }

    /// Truncated-normal one-way delay for a message from `from` to `to`.
    pub fn sample<R: Rng + ?Sized>(&self, from: EndpointId, to: EndpointId, rng: &mut R) -> Duration {
        let c = self.cell(from, to);
        if c.jitter_ms <= 0.0 {
            return Duration::from_secs_f64(c.mean_ms.max(0.0) / 1000.0);
        }
        let normal = Normal::new(c.mean_ms, c.jitter_ms).expect("jitter is positive");
        for _ in 0..16 {
            let v = normal.sample(rng);
            if v >= 0.0 {
                return Duration::from_secs_f64(v / 1000.0);
            }
        }
        Duration::ZERO
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut m = Self::uniform(0.0, 0.0);
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let toks: Vec<&str> = raw.split('#').next().unwrap_or("").split_whitespace().collect();
            let err = |reason: &str| ConfigError::Parse {
                line,
                reason: reason.to_string(),
            };
            let num = |s: &str| -> Result<f64, ConfigError> {
                let v: f64 = s.parse().map_err(|_| err(&format!("not a number: {s}")))?;
                if v < 0.0 || !v.is_finite() {
                    return Err(err("latencies must be non-negative"));
                }
                Ok(v)
            };
            let jitter = |t: Option<&&str>| t.map(|s| num(s)).transpose().map(|j| j.unwrap_or(0.0));
            match toks.as_slice() {
                [] => {}
                ["site", name] => {
                    m.add_site(name);
                }
                ["latency", a, b, mean, rest @ ..] if rest.len() <= 1 => {
                    let j = jitter(rest.first())?;
                    m.set(a, b, num(mean)?, j);
                }
                ["symmetric", a, b, mean, rest @ ..] if rest.len() <= 1 => {
                    let j = jitter(rest.first())?;
                    m.set_symmetric(a, b, num(mean)?, j);
                }
                ["place", ep, site] => {
                    let ep = parse_endpoint(ep).ok_or_else(|| err(&format!("bad endpoint {ep}")))?;
                    m.place(ep, site);
                }
                ["default", mean, rest @ ..] if rest.len() <= 1 => {
                    m.default = Cell {
                        mean_ms: num(mean)?,
                        jitter_ms: jitter(rest.first())?,
                    };
                }
                _ => return Err(err(&format!("unrecognised directive: {}", raw.trim()))),
            }
        }
        Ok(m)
    }

    /// Five replica sites plus Canada for a frontend. The figures are
    /// approximate public inter-region delays, illustrative only and not
    /// measurements.
    pub fn wan_default() -> Self {
        Self::parse(WAN_DEFAULT).expect("built-in matrix parses")
    }
}

pub const WAN_DEFAULT: &str = "\
# Illustrative one-way delays in ms (mean, jitter); not measured.
site Oregon
site Ireland
site Sydney
site SaoPaulo
site Virginia
site Canada
default 0.5 0.1
symmetric Oregon Oregon 0.5 0.1
symmetric Ireland Ireland 0.5 0.1
symmetric Sydney Sydney 0.5 0.1
symmetric SaoPaulo SaoPaulo 0.5 0.1
symmetric Virginia Virginia 0.5 0.1
symmetric Canada Canada 0.5 0.1
symmetric Oregon Ireland 62 3
symmetric Oregon Sydney 70 3.5
symmetric Oregon SaoPaulo 90 4.5
symmetric Oregon Virginia 35 2
symmetric Oregon Canada 32 2
symmetric Ireland Sydney 130 6.5
symmetric Ireland SaoPaulo 92 4.5
symmetric Ireland Virginia 38 2
symmetric Ireland Canada 40 2
symmetric Sydney SaoPaulo 155 7.5
symmetric Sydney Virginia 100 5
symmetric Sydney Canada 105 5
symmetric SaoPaulo Virginia 58 3
symmetric SaoPaulo Canada 62 3
symmetric Virginia Canada 8 0.5
place n0 Oregon
place n1 Ireland
place n2 Sydney
place n3 SaoPaulo
place n4 Virginia
place f0 Canada
place f1 Oregon
place f2 Virginia
place f3 SaoPaulo
";
