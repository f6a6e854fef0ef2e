// Copyright (c) The bftorder Authors
// SPDX-License-Identifier: Apache-2.0

//! Plain-text deployment file.
//!
//! One `key = value` pair per line, `#` starts a comment. Node and frontend
//! lines take space-separated `field=value` items:
//!
//! ```text
//! n = 4
//! f = 1
//! delta = 0
//! mode = classic
//! batch_limit = 400
//! batch_timeout_ms = 5
//! block_size = 10
//! node = id=0 host=127.0.0.1 port=7000 weight=1 pubkey=keys/n0.pub
//! frontend = index=0 host=127.0.0.1 port=7100
//! ```

use std::collections::BTreeMap;
use std::net::{SocketAddr, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use crate::consensus::{ClusterConfig, Mode};
use crate::crypto::{KeyPair, NodeId, PublicKey, PublicKeyDirectory};
use crate::error::ConfigError;
use crate::frontend::{FrontendConfig, FrontendMode};
use crate::node::{NodeConfig, DEFAULT_BLOCK_SIZE, DEFAULT_CHECKPOINT_PERIOD, DEFAULT_FLUSH_TIMEOUT};
use crate::transport::{frontend_endpoint, EndpointId};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeEntry {
    pub id: NodeId,
    pub host: String,
    pub port: u16,
    pub weight: Option<u32>,
    pub pubkey: Option<PathBuf>,
    pub secret: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrontendEntry {
    pub index: usize,
    pub host: String,
    pub port: u16,
}

#[derive(Debug, Clone)]
pub struct Deployment {
    pub cluster: ClusterConfig,
    pub nodes: Vec<NodeEntry>,
    pub frontends: Vec<FrontendEntry>,
    pub block_size: usize,
    pub flush_timeout: Duration,
    pub signing_workers: usize,
    pub checkpoint_period: u64,
    pub checkpoint_dir: Option<PathBuf>,
    pub frontend_mode: FrontendMode,
    pub stall_timeout: Duration,
    /// Derive keys from this seed instead of reading key files.
    pub key_seed: Option<u64>,
    /// Directory relative paths are resolved against.
    pub base: PathBuf,
}

fn fields(line: usize, value: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    value
        .split_whitespace()
        .map(|item| {
            item.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| ConfigError::Parse {
                    line,
                    reason: format!("expected field=value, got {item:?}"),
                })
        })
        .collect()
}

fn num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T, ConfigError> {
    v.parse().map_err(|_| ConfigError::Parse {
        line,
        reason: format!("{key}: not a valid number: {v:?}"),
    })
}

impl Deployment {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base)
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut scalars: BTreeMap<String, (usize, String)> = BTreeMap::new();
        let mut nodes = Vec::new();
        let mut frontends = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body.split_once('=').ok_or_else(|| ConfigError::Parse {
                line,
                reason: "expected key = value".into(),
            })?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "node" => {
                    let mut f = fields(line, value)?;
                    let mut take = |k: &str| {
                        f.remove(k).ok_or_else(|| ConfigError::Parse {
                            line,
                            reason: format!("node entry lacks {k}"),
                        })
                    };
                    let entry = NodeEntry {
                        id: num(line, "id", &take("id")?)?,
                        host: take("host")?,
                        port: num(line, "port", &take("port")?)?,
                        weight: f.remove("weight").map(|w| num(line, "weight", &w)).transpose()?,
                        pubkey: f.remove("pubkey").map(PathBuf::from),
                        secret: f.remove("secret").map(PathBuf::from),
                    };
                    if let Some(k) = f.keys().next() {
                        return Err(ConfigError::Parse {
                            line,
                            reason: format!("unknown node field {k:?}"),
                        });
                    }
                    nodes.push(entry);
                }
                "frontend" => {
                    let mut f = fields(line, value)?;
                    let mut take = |k: &str| {
                        f.remove(k).ok_or_else(|| ConfigError::Parse {
                            line,
                            reason: format!("frontend entry lacks {k}"),
                        })
                    };
                    frontends.push(FrontendEntry {
                        index: num(line, "index", &take("index")?)?,
                        host: take("host")?,
                        port: num(line, "port", &take("port")?)?,
                    });
                }
                _ => {
                    if scalars.insert(key.to_string(), (line, value.to_string())).is_some() {
                        return Err(ConfigError::Parse {
                            line,
                            reason: format!("duplicate key {key}"),
                        });
                    }
                }
            }
        }

        let mut get = |k: &str| scalars.remove(k);
        let n: Option<usize> = get("n").map(|(l, v)| num(l, "n", &v)).transpose()?;
        let f: usize = get("f").map(|(l, v)| num(l, "f", &v)).transpose()?.unwrap_or(1);
        let delta: Option<usize> = get("delta").map(|(l, v)| num(l, "delta", &v)).transpose()?;
        let mode: Mode = match get("mode") {
            Some((line, v)) => v.parse().map_err(|e: ConfigError| ConfigError::Parse {
                line,
                reason: e.to_string(),
            })?,
            None => Mode::Classic,
        };
        let n = match (n, delta) {
            (Some(n), _) => n,
            (None, Some(d)) => 3 * f + 1 + d,
            (None, None) if !nodes.is_empty() => nodes.len(),
            (None, None) => 3 * f + 1,
        };
        if let Some(d) = delta {
            if n != 3 * f + 1 + d {
                return Err(ConfigError::Invalid(format!(
                    "n={n} differs from 3f+1+delta={}",
                    3 * f + 1 + d
                )));
            }
        }
        let mut cluster = match mode {
            Mode::Classic => ClusterConfig::classic(n, f)?,
            Mode::Wheat => {
                let delta = n
                    .checked_sub(3 * f + 1)
                    .ok_or_else(|| ConfigError::Invalid(format!("n={n} < 3f+1")))?;
                ClusterConfig::wheat_default(f, delta)?
            }
        };
        if nodes.iter().any(|e| e.weight.is_some()) {
            cluster.weights = nodes.iter().map(|e| (e.id, e.weight.unwrap_or(1))).collect();
        }
        if let Some((l, v)) = get("batch_limit") {
            cluster.batch_limit = num(l, "batch_limit", &v)?;
        }
        if let Some((l, v)) = get("batch_timeout_ms") {
            cluster.batch_timeout = Duration::from_millis(num(l, "batch_timeout_ms", &v)?);
        }
        if let Some((l, v)) = get("suspicion_timeout_ms") {
            cluster.suspicion_timeout = Duration::from_millis(num(l, "suspicion_timeout_ms", &v)?);
        }
        cluster.validate()?;
        if !nodes.is_empty() {
            let mut ids: Vec<NodeId> = nodes.iter().map(|e| e.id).collect();
            ids.sort_unstable();
            if ids != (0..n as NodeId).collect::<Vec<_>>() {
                return Err(ConfigError::Invalid(format!(
                    "node entries must be ids 0..{n} exactly once"
                )));
            }
        }

        let ms = |e: Option<(usize, String)>, key: &str, default: Duration| -> Result<Duration, ConfigError> {
            e.map(|(l, v)| num::<u64>(l, key, &v).map(Duration::from_millis))
                .transpose()
                .map(|d| d.unwrap_or(default))
        };
        let d = Self {
            block_size: get("block_size")
                .map(|(l, v)| num(l, "block_size", &v))
                .transpose()?
                .unwrap_or(DEFAULT_BLOCK_SIZE),
            flush_timeout: ms(get("flush_timeout_ms"), "flush_timeout_ms", DEFAULT_FLUSH_TIMEOUT)?,
            signing_workers: get("signing_workers")
                .map(|(l, v)| num(l, "signing_workers", &v))
                .transpose()?
                .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |p| p.get())),
            checkpoint_period: get("checkpoint_period")
                .map(|(l, v)| num(l, "checkpoint_period", &v))
                .transpose()?
                .unwrap_or(DEFAULT_CHECKPOINT_PERIOD),
            checkpoint_dir: get("checkpoint_dir").map(|(_, v)| PathBuf::from(v)),
            frontend_mode: match get("frontend_mode") {
                Some((line, v)) => v.parse().map_err(|reason| ConfigError::Parse { line, reason })?,
                None => FrontendMode::Match2f1,
            },
            stall_timeout: ms(get("stall_timeout_ms"), "stall_timeout_ms", Duration::from_secs(5))?,
            key_seed: get("key_seed").map(|(l, v)| num(l, "key_seed", &v)).transpose()?,
            cluster,
            nodes,
            frontends,
            base: base.to_path_buf(),
        };
        if d.block_size == 0 || d.signing_workers == 0 {
            return Err(ConfigError::Invalid(
                "block_size and signing_workers must be positive".into(),
            ));
        }
        if let Some((key, (line, _))) = scalars.into_iter().next() {
            return Err(ConfigError::Parse {
                line,
                reason: format!("unknown key {key}"),
            });
        }
        Ok(d)
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    /// Public keys from `key_seed` if set, else from each node's `pubkey` file.
    pub fn directory(&self) -> Result<PublicKeyDirectory, ConfigError> {
        if let Some(seed) = self.key_seed {
            return Ok(PublicKeyDirectory::derived(seed, self.cluster.n).1);
        }
        let mut dir = PublicKeyDirectory::new();
        for e in &self.nodes {
            let path = e
                .pubkey
                .as_ref()
                .ok_or_else(|| ConfigError::Invalid(format!("node {} has no pubkey and no key_seed is set", e.id)))?;
            let key = PublicKey::read_file(&self.resolve(path))
                .map_err(|err| ConfigError::Invalid(format!("node {} public key: {err}", e.id)))?;
            dir.insert(e.id, key);
        }
        Ok(dir)
    }

    pub fn signing_key(&self, node: NodeId) -> Result<KeyPair, ConfigError> {
        if let Some(seed) = self.key_seed {
            return Ok(KeyPair::derive(seed, node));
        }
        let e = self
            .nodes
            .iter()
            .find(|e| e.id == node)
            .ok_or_else(|| ConfigError::Invalid(format!("no entry for node {node}")))?;
        let path = e
            .secret
            .as_ref()
            .ok_or_else(|| ConfigError::Invalid(format!("node {node} has no secret and no key_seed is set")))?;
        KeyPair::read_secret_file(&self.resolve(path))
            .map_err(|err| ConfigError::Invalid(format!("node {node} secret key: {err}")))
    }

    /// Socket addresses of every node and frontend.
    pub fn peers(&self) -> Result<BTreeMap<EndpointId, SocketAddr>, ConfigError> {
        let resolve = |host: &str, port: u16| -> Result<SocketAddr, ConfigError> {
            (host, port)
                .to_socket_addrs()?
                .next()
                .ok_or_else(|| ConfigError::Invalid(format!("{host}:{port} does not resolve")))
        };
        let mut out = BTreeMap::new();
        for e in &self.nodes {
            out.insert(e.id, resolve(&e.host, e.port)?);
        }
        for e in &self.frontends {
            out.insert(frontend_endpoint(e.index), resolve(&e.host, e.port)?);
        }
        Ok(out)
    }

    pub fn node_config(&self, id: NodeId) -> Result<NodeConfig, ConfigError> {
        let key = Arc::new(self.signing_key(id)?);
        let mut cfg = NodeConfig::new(id, Arc::new(self.cluster.clone()), key);
        cfg.block_size = self.block_size;
        cfg.flush_timeout = self.flush_timeout;
        cfg.signing_workers = self.signing_workers;
        cfg.checkpoint_period = self.checkpoint_period;
        cfg.checkpoint_dir = self
            .checkpoint_dir
            .as_ref()
            .map(|d| self.resolve(d).join(format!("n{id}")));
        cfg.frontends = self.frontends.iter().map(|e| frontend_endpoint(e.index)).collect();
        Ok(cfg)
    }

    pub fn frontend_config(&self) -> Result<FrontendConfig, ConfigError> {
        let mut cfg = FrontendConfig::new(self.frontend_mode, self.cluster.n, self.cluster.f);
        cfg.keys = Some(Arc::new(self.directory()?));
        cfg.stall_timeout = self.stall_timeout;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
# five replicas
n = 5
f = 1
delta = 1
mode = wheat
batch_timeout_ms = 2
block_size = 100
signing_workers = 2
key_seed = 9
frontend_mode = verify-f1
node = id=0 host=127.0.0.1 port=7000 weight=2
node = id=1 host=127.0.0.1 port=7001 weight=2
node = id=2 host=127.0.0.1 port=7002 weight=1
node = id=3 host=127.0.0.1 port=7003 weight=1
node = id=4 host=127.0.0.1 port=7004 weight=1
frontend = index=0 host=127.0.0.1 port=7100
";

    #[test]
    fn parses_a_full_file() {
        let d = Deployment::parse(SAMPLE, Path::new(".")).unwrap();
        assert_eq!(d.cluster.n, 5);
        assert_eq!(d.cluster.mode, Mode::Wheat);
        assert_eq!(d.cluster.threshold(), 5);
        assert_eq!(d.cluster.batch_timeout, Duration::from_millis(2));
        assert_eq!(d.block_size, 100);
        assert_eq!(d.frontend_mode, FrontendMode::VerifyF1);
        assert_eq!(d.peers().unwrap().len(), 6);
        assert_eq!(d.directory().unwrap().len(), 5);
        let cfg = d.node_config(3).unwrap();
        assert_eq!(cfg.frontends.len(), 1);
    }

    #[test]
    fn rejects_bad_input_with_line_numbers() {
        let e = Deployment::parse("n = 4\nf = x\n", Path::new(".")).unwrap_err();
        assert!(matches!(e, ConfigError::Parse { line: 2, .. }), "{e}");
        let e = Deployment::parse("n = 4\nwhatever = 1\n", Path::new(".")).unwrap_err();
        assert!(matches!(e, ConfigError::Parse { line: 2, .. }), "{e}");
        assert!(Deployment::parse("n = 3\nf = 1\n", Path::new(".")).is_err());
        assert!(Deployment::parse("n = 4\nn = 4\n", Path::new(".")).is_err());
        let bad_weights = SAMPLE.replace("port=7002 weight=1", "port=7002 weight=2");
        assert!(Deployment::parse(&bad_weights, Path::new(".")).is_err());
    }

    #[test]
    fn reads_key_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut text = String::from("n = 4\nf = 1\n");
        for i in 0..4u16 {
            let k = KeyPair::derive(77, i);
            k.write_files(&dir.path().join(format!("n{i}"))).unwrap();
            text += &format!(
                "node = id={i} host=localhost port={} pubkey=n{i}.pub secret=n{i}.key\n",
                7000 + i
            );
        }
        let path = dir.path().join("cluster.conf");
        std::fs::write(&path, text).unwrap();
        let d = Deployment::load(&path).unwrap();
        let dirk = d.directory().unwrap();
        let k2 = d.signing_key(2).unwrap();
        assert_eq!(dirk.get(2).unwrap().to_bytes(), k2.public_key_bytes());
    }
}
