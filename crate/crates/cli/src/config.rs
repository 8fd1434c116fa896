//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default; unknown keys and repeated keys are errors.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

/// `(key, default, description)` for every accepted key, in echo order.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "42", "master seed for every random stream"),
    ("demo", "planning", "planning | contemplation | future"),
    ("out.dir", "out", "directory receiving all outputs"),
    ("registry.root", "", "registry directory; empty keeps it in memory"),
    ("registry.endpoint", "", "host:port of a registry server"),
    ("gan.noise_dim", "8", "noise vector width shared by all generators"),
    ("gan.hidden", "32,32", "hidden widths of local generators and discriminators"),
    ("gan.batch", "64", "minibatch size"),
    ("gan.steps", "3000", "local generator steps"),
    ("gan.lr_g", "0.001", "generator learning rate"),
    ("gan.lr_d", "0.001", "discriminator learning rate"),
    ("gan.beta1", "0.5", "Adam beta1"),
    ("gan.d_steps", "1", "discriminator steps per generator step"),
    ("gan.samples", "4000", "local training set size"),
    ("fusion.hidden", "32,32", "hidden widths inside fusion networks"),
    ("fusion.steps", "3000", "fusion generator steps"),
    ("fusion.lr", "0.001", "learning rate for both fusion players"),
    ("fusion.samples", "4000", "paired training set size"),
    ("fusion.warm_start", "false", "start the trainable slot from the uploaded client model"),
    ("cascade.R", "10", "refresh interval in rounds"),
    ("cascade.rounds", "30", "stage-2 rounds"),
    ("cascade.steps_per_round", "100", "stage-2 generator steps per round"),
    ("cascade.client_steps", "0", "extra local steps client 1 trains and uploads before each refresh"),
    ("eval.samples", "2000", "generated rows used for evaluation"),
    ("eval.bandwidth", "1.0", "RBF bandwidth for mmd2"),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Demo {
    Planning,
    Contemplation,
    Future,
}

impl FromStr for Demo {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "planning" => Ok(Demo::Planning),
            "contemplation" => Ok(Demo::Contemplation),
            "future" => Ok(Demo::Future),
            other => bail!("unknown demo {other:?}"),
        }
    }
}

impl fmt::Display for Demo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Demo::Planning => "planning",
            Demo::Contemplation => "contemplation",
            Demo::Future => "future",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GanSettings {
    pub noise_dim: usize,
    pub hidden: Vec<usize>,
    pub batch: usize,
    pub steps: usize,
    pub lr_g: f32,
    pub lr_d: f32,
    pub beta1: f64,
    pub d_steps: usize,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionSettings {
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub lr: f32,
    pub samples: usize,
    pub warm_start: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CascadeSettings {
    pub refresh_interval: usize,
    pub rounds: usize,
    pub steps_per_round: usize,
    pub client_steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    pub samples: usize,
    pub bandwidth: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub demo: Demo,
    pub out_dir: PathBuf,
    pub registry_root: Option<PathBuf>,
    pub registry_endpoint: Option<String>,
    pub gan: GanSettings,
    pub fusion: FusionSettings,
    pub cascade: CascadeSettings,
    pub eval: EvalSettings,
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_pairs(std::iter::empty::<(&str, &str)>()).expect("defaults parse")
    }
}

fn lookup(key: &str) -> Option<&'static str> {
    KEYS.iter().find(|(k, _, _)| *k == key).map(|(k, _, _)| *k)
}

fn parse<T: FromStr>(values: &BTreeMap<&'static str, String>, key: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    let raw = &values[key];
    raw.parse()
        .map_err(|e| anyhow!("config key {key}: cannot parse {raw:?}: {e}"))
}

fn parse_list(values: &BTreeMap<&'static str, String>, key: &str) -> Result<Vec<usize>> {
    let raw = &values[key];
    let list = raw
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| anyhow!("config key {key}: cannot parse {raw:?}: {e}"))?;
    if list.iter().any(|&w| w == 0) {
        bail!("config key {key}: widths must be positive");
    }
    Ok(list)
}

fn positive(v: usize, key: &str) -> Result<usize> {
    if v == 0 {
        bail!("config key {key}: must be at least 1");
    }
    Ok(v)
}

fn non_empty(s: &str) -> Option<&str> {
    Some(s.trim()).filter(|s| !s.is_empty())
}

impl RunConfig {
    /// Parses config text. `origin` labels errors.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{origin}:{}: expected key = value", n + 1))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut seen = BTreeMap::new();
        for (k, _) in &pairs {
            if seen.insert(k.clone(), ()).is_some() {
                bail!("{origin}: config key {k} given twice");
            }
        }
        Self::from_pairs(pairs).with_context(|| format!("in {origin}"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Defaults overridden by `pairs`, later pairs winning.
    pub fn from_pairs<K: AsRef<str>, V: AsRef<str>>(pairs: impl IntoIterator<Item = (K, V)>) -> Result<Self> {
        let mut values: BTreeMap<&'static str, String> =
            KEYS.iter().map(|(k, d, _)| (*k, d.to_string())).collect();
        for (k, v) in pairs {
            let k = k.as_ref().trim();
            let key = lookup(k).ok_or_else(|| anyhow!("unknown config key {k:?}"))?;
            values.insert(key, v.as_ref().trim().to_string());
        }
        Self::build(values)
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| anyhow!("override {assignment:?} is not key=value"))?;
        let key = lookup(k.trim()).ok_or_else(|| anyhow!("unknown config key {:?}", k.trim()))?;
        let mut values = self.values.clone();
        values.insert(key, v.trim().to_string());
        *self = Self::build(values)?;
        Ok(())
    }

    fn build(values: BTreeMap<&'static str, String>) -> Result<Self> {
        let v = &values;
        let gan = GanSettings {
            noise_dim: positive(parse(v, "gan.noise_dim")?, "gan.noise_dim")?,
            hidden: parse_list(v, "gan.hidden")?,
            batch: positive(parse(v, "gan.batch")?, "gan.batch")?,
            steps: parse(v, "gan.steps")?,
            lr_g: parse(v, "gan.lr_g")?,
            lr_d: parse(v, "gan.lr_d")?,
            beta1: parse(v, "gan.beta1")?,
            d_steps: positive(parse(v, "gan.d_steps")?, "gan.d_steps")?,
            samples: positive(parse(v, "gan.samples")?, "gan.samples")?,
        };
        let fusion = FusionSettings {
            hidden: parse_list(v, "fusion.hidden")?,
            steps: parse(v, "fusion.steps")?,
            lr: parse(v, "fusion.lr")?,
            samples: positive(parse(v, "fusion.samples")?, "fusion.samples")?,
            warm_start: parse(v, "fusion.warm_start")?,
        };
        let cascade = CascadeSettings {
            refresh_interval: positive(parse(v, "cascade.R")?, "cascade.R")?,
            rounds: positive(parse(v, "cascade.rounds")?, "cascade.rounds")?,
            steps_per_round: parse(v, "cascade.steps_per_round")?,
            client_steps: parse(v, "cascade.client_steps")?,
        };
        let eval = EvalSettings {
            samples: positive(parse(v, "eval.samples")?, "eval.samples")?,
            bandwidth: parse(v, "eval.bandwidth")?,
        };
        if !(eval.bandwidth > 0.0) {
            bail!("config key eval.bandwidth: must be positive");
        }
        Ok(Self {
            seed: parse(v, "seed")?,
            demo: parse(v, "demo")?,
            out_dir: PathBuf::from(&v["out.dir"]),
            registry_root: non_empty(&v["registry.root"]).map(PathBuf::from),
            registry_endpoint: non_empty(&v["registry.endpoint"]).map(str::to_string),
            gan,
            fusion,
            cascade,
            eval,
            values,
        })
    }

    /// Effective configuration, one `key = value` line per key.
    pub fn resolved(&self) -> String {
        KEYS.iter()
            .map(|(k, _, _)| format!("{k} = {}\n", self.values[k]))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_resolved() {
        let c = RunConfig::default();
        assert_eq!(c.seed, 42);
        assert_eq!(c.demo, Demo::Planning);
        assert_eq!(c.registry_root, None);
        assert_eq!(c.gan.hidden, vec![32, 32]);
        assert_eq!(RunConfig::parse(&c.resolved(), "echo").unwrap(), c);
    }

    #[test]
    fn overrides_and_comments() {
        let c = RunConfig::parse("# run\nseed = 7\n\ndemo=future\ncascade.R = 5\nregistry.endpoint = 127.0.0.1:9\n", "t")
            .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.demo, Demo::Future);
        assert_eq!(c.cascade.refresh_interval, 5);
        assert_eq!(c.registry_endpoint.as_deref(), Some("127.0.0.1:9"));
    }

    #[test]
    fn unknown_key_is_named() {
        let e = RunConfig::parse("seed = 1\ngan.lr = 0.1\n", "t").unwrap_err();
        assert!(format!("{e:#}").contains("gan.lr"));
    }

    #[test]
    fn bad_value_names_key() {
        let e = RunConfig::parse("gan.hidden = 32,x\n", "t").unwrap_err();
        assert!(format!("{e:#}").contains("gan.hidden"));
        assert!(RunConfig::parse("cascade.R = 0\n", "t").is_err());
        assert!(RunConfig::parse("demo = dream\n", "t").is_err());
    }

    #[test]
    fn duplicates_and_garbage_rejected() {
        assert!(RunConfig::parse("seed = 1\nseed = 2\n", "t").is_err());
        assert!(RunConfig::parse("seed\n", "t").is_err());
    }

    #[test]
    fn set_applies_one_override() {
        let mut c = RunConfig::default();
        c.set("fusion.steps=10").unwrap();
        assert_eq!(c.fusion.steps, 10);
        assert!(c.resolved().contains("fusion.steps = 10\n"));
        assert!(c.set("nope=1").is_err());
        assert_eq!(c.fusion.steps, 10);
    }
}
