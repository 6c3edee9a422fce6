//! Run configuration: built-in defaults, then a `key = value` file, then
//! `RMF_*` environment variables, then command-line flags.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use sha2::{Digest, Sha256};

pub const ENV_PREFIX: &str = "RMF_";

/// Every recognised key: name, default, help.
pub const KEYS: &[(&str, Option<&str>, &str)] = &[
    (
        "images",
        None,
        "directory of gallery images named <id>.<ext>",
    ),
    (
        "tensors",
        None,
        "directory of feature tensors <id>/<size>.rmtf",
    ),
    (
        "model",
        None,
        "ONNX backbone; without it images go through the stub network",
    ),
    (
        "channels",
        Some("1024"),
        "channel count of the ONNX backbone output",
    ),
    (
        "stride",
        Some("16"),
        "spatial stride of the ONNX backbone output",
    ),
    (
        "stub_channels",
        Some("128"),
        "channel count of the stub network",
    ),
    ("stub_seed", Some("0"), "weight seed of the stub network"),
    (
        "resolutions",
        Some("160,224,320"),
        "input sizes in pixels, comma separated",
    ),
    (
        "pooling",
        Some("smac"),
        "regional pooling: mac, sum or smac",
    ),
    ("scales", Some("4"), "region grid scales"),
    (
        "attention",
        Some("true"),
        "weight regions by dictionary IDF",
    ),
    ("k", Some("1024"), "dictionary size"),
    ("kmeans_iters", Some("50"), "maximum Lloyd iterations"),
    (
        "kmeans_max_points",
        Some("0"),
        "cap on regional descriptors fed to k-means (0 = none)",
    ),
    ("dim", Some("256"), "whitened descriptor dimension"),
    (
        "sample",
        Some("30000"),
        "gallery images sampled to fit whitening and the dictionary",
    ),
    ("seed", Some("0"), "seed for sampling and k-means"),
    ("jobs", Some("0"), "worker threads (0 = all cores)"),
    (
        "models",
        None,
        "directory holding whitening.rmpw and dictionary.rmdc",
    ),
    ("index", None, "gallery descriptor file (.rmds)"),
    (
        "queries",
        None,
        "query descriptor file (.rmds); defaults to the gallery",
    ),
    (
        "gt",
        None,
        "ground truth CSV with columns query_id,relevant_id",
    ),
    ("topk", Some("100"), "ranking depth and MAP cutoff"),
    (
        "exclude_self",
        Some("true"),
        "drop each query's own gallery entry from its ranking",
    ),
    (
        "methods",
        Some("all"),
        "ablation variants: `all` or a comma list such as `R-MAC,mr+smac+ura`",
    ),
    ("rankings", None, "rankings TSV for the contact sheet"),
    ("limit", Some("50"), "queries shown on the contact sheet"),
    (
        "groups",
        Some("20"),
        "synthetic gallery: number of near-duplicate groups",
    ),
    (
        "per_group",
        Some("10"),
        "synthetic gallery: images per group",
    ),
    (
        "size",
        Some("192"),
        "synthetic gallery: image side in pixels",
    ),
    ("out", None, "output path"),
    ("force", Some("false"), "overwrite existing outputs"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Default,
    File,
    Env,
    Flag,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    values: BTreeMap<String, (String, Source)>,
}

fn known(key: &str) -> bool {
    KEYS.iter().any(|(k, _, _)| *k == key)
}

/// Parse `key = value` lines; `#` starts a comment.
pub fn parse_config_file(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("line {}: expected `key = value`, got `{raw}`", n + 1))?;
        let key = k.trim().replace('-', "_");
        if !known(&key) {
            bail!("line {}: unknown key `{}`", n + 1, k.trim());
        }
        out.push((key, v.trim().to_owned()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn defaults() -> Self {
        let values = KEYS
            .iter()
            .filter_map(|(k, d, _)| d.map(|d| (k.to_string(), (d.to_owned(), Source::Default))))
            .collect();
        Self { values }
    }

    /// Layer a config file, environment and flags over the defaults.
    pub fn resolve<E>(file: Option<&Path>, env: E, flags: &[(String, String)]) -> Result<Self>
    where
        E: IntoIterator<Item = (String, String)>,
    {
        let mut cfg = Self::defaults();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("cannot read config file {}", path.display()))?;
            let pairs =
                parse_config_file(&text).with_context(|| format!("in {}", path.display()))?;
            for (k, v) in pairs {
                cfg.set(&k, v, Source::File)?;
            }
        }
        for (k, v) in env {
            if let Some(rest) = k.strip_prefix(ENV_PREFIX) {
                let key = rest.to_ascii_lowercase();
                if known(&key) {
                    cfg.set(&key, v, Source::Env)?;
                } else {
                    log::warn!("ignoring unknown environment variable {k}");
                }
            }
        }
        for (k, v) in flags {
            cfg.set(k, v.clone(), Source::Flag)?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>, source: Source) -> Result<()> {
        if !known(key) {
            bail!("unknown configuration key `{key}`");
        }
        self.values.insert(key.to_owned(), (value.into(), source));
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values
            .get(key)
            .map(|(v, _)| v.as_str())
            .filter(|v| !v.is_empty())
    }

    pub fn source(&self, key: &str) -> Option<Source> {
        self.values.get(key).map(|(_, s)| *s)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| {
            anyhow!(
                "missing `{key}` (flag --{}, or {ENV_PREFIX}{})",
                key.replace('_', "-"),
                key.to_ascii_uppercase()
            )
        })
    }

    pub fn parse<T>(&self, key: &str) -> Result<T>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        let raw = self.require(key)?;
        raw.parse::<T>()
            .map_err(|e| anyhow!("invalid `{key}` value `{raw}`: {e}"))
    }

    pub fn path(&self, key: &str) -> Result<PathBuf> {
        self.require(key).map(PathBuf::from)
    }

    pub fn flag(&self, key: &str) -> Result<bool> {
        match self.require(key)?.to_ascii_lowercase().as_str() {
            "1" | "true" | "yes" | "on" => Ok(true),
            "0" | "false" | "no" | "off" => Ok(false),
            other => bail!("invalid `{key}` value `{other}`: expected true or false"),
        }
    }

    /// Worker count with 0 meaning every available core.
    pub fn jobs(&self) -> Result<usize> {
        let jobs: usize = self.parse("jobs")?;
        Ok(if jobs == 0 {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        } else {
            jobs
        })
    }

    /// Sorted `key = value` lines of every set key, excluding `jobs`,
    /// `force` and `out`, which do not affect results.
    pub fn snapshot(&self) -> String {
        let mut s = String::new();
        for (k, (v, _)) in &self.values {
            if matches!(k.as_str(), "jobs" | "force" | "out") || v.is_empty() {
                continue;
            }
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// SHA-256 of [`snapshot`](Self::snapshot), hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.snapshot().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Write the snapshot followed by its hash, for provenance of outputs.
    pub fn write_snapshot(&self, path: &Path, command: &str) -> Result<()> {
        let text = format!(
            "# rmac {command}\n{}config_hash = {}\n",
            self.snapshot(),
            self.hash()
        );
        std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
    }
}
