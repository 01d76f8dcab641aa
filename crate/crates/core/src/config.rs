//! Flat `key=value` configuration text.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::head::{lambda_preset, SadlrConfig, UpdateMode};

/// Parsed `key=value` lines. `#` starts a comment; blank lines are ignored.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvMap(BTreeMap<String, String>);

impl KvMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected key=value, got {raw:?}",
                    lineno + 1
                ))
            })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            if map.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!(
                    "line {}: duplicate key {k:?}",
                    lineno + 1
                )));
            }
        }
        Ok(Self(map))
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.0.insert(key.to_string(), value.to_string());
    }

    fn take<V: FromStr>(&mut self, key: &str) -> Result<Option<V>> {
        match self.0.remove(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("bad value {v:?} for key {key:?}"))),
        }
    }

    fn finish(self) -> Result<()> {
        match self.0.keys().next() {
            None => Ok(()),
            Some(k) => Err(Error::Config(format!("unknown key {k:?}"))),
        }
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.0 {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Parses `8,32` or `[8,32]`.
pub fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>> {
    let s = s.trim().trim_start_matches('[').trim_end_matches(']');
    if s.trim().is_empty() {
        return Ok(vec![]);
    }
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad list entry {p:?}")))
        })
        .collect()
}

impl SadlrConfig {
    pub fn write_kv(&self, kv: &mut KvMap) {
        kv.set("iterations", self.iterations);
        kv.set("channels", self.channels);
        kv.set("lang_channels", self.lang_channels);
        kv.set("structure", join(&self.structure));
        kv.set("lambdas", join(&self.lambdas));
        kv.set("update_mode", self.update_mode);
        kv.set("ln_eps", self.ln_eps);
    }

    fn take_kv(kv: &mut KvMap) -> Result<Self> {
        let iterations = kv.take("iterations")?.unwrap_or(3);
        let mut cfg = SadlrConfig::desk(iterations);
        if let Some(c) = kv.take("channels")? {
            cfg.channels = c;
        }
        if let Some(c) = kv.take("lang_channels")? {
            cfg.lang_channels = c;
        }
        if let Some(s) = kv.take::<String>("structure")? {
            cfg.structure = parse_list(&s)?;
        }
        match kv.take::<String>("lambdas")? {
            None => {}
            Some(s) if s == "preset" => cfg.lambdas = lambda_preset(iterations),
            Some(s) => cfg.lambdas = parse_list(&s)?,
        }
        if let Some(m) = kv.take::<UpdateMode>("update_mode")? {
            cfg.update_mode = m;
        }
        if let Some(e) = kv.take("ln_eps")? {
            cfg.ln_eps = e;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv_text(&self) -> String {
        let mut kv = KvMap::default();
        self.write_kv(&mut kv);
        kv.render()
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut kv = KvMap::parse(text)?;
        let cfg = Self::take_kv(&mut kv)?;
        kv.finish()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub model: SadlrConfig,
    pub train_data: Option<PathBuf>,
    pub val_data: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 15,
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 1e-2,
            poly_power: 0.9,
            model: SadlrConfig::desk(3),
            train_data: None,
            val_data: None,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub const MANIFEST: &'static str = "config.txt";

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if self.lr.is_nan() || self.lr <= 0.0 || self.weight_decay < 0.0 || self.poly_power < 0.0 {
            return Err(Error::Config(format!(
                "bad optimizer settings lr={} weight_decay={} poly_power={}",
                self.lr, self.weight_decay, self.poly_power
            )));
        }
        self.model.validate()
    }

    pub fn to_kv_text(&self) -> String {
        let mut kv = KvMap::default();
        kv.set("seed", self.seed);
        kv.set("epochs", self.epochs);
        kv.set("batch_size", self.batch_size);
        kv.set("lr", self.lr);
        kv.set("weight_decay", self.weight_decay);
        kv.set("poly_power", self.poly_power);
        self.model.write_kv(&mut kv);
        if let Some(p) = &self.train_data {
            kv.set("train_data", p.display());
        }
        if let Some(p) = &self.val_data {
            kv.set("val_data", p.display());
        }
        kv.set("out_dir", self.out_dir.display());
        kv.render()
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut kv = KvMap::parse(text)?;
        let d = RunConfig::default();
        let cfg = RunConfig {
            seed: kv.take("seed")?.unwrap_or(d.seed),
            epochs: kv.take("epochs")?.unwrap_or(d.epochs),
            batch_size: kv.take("batch_size")?.unwrap_or(d.batch_size),
            lr: kv.take("lr")?.unwrap_or(d.lr),
            weight_decay: kv.take("weight_decay")?.unwrap_or(d.weight_decay),
            poly_power: kv.take("poly_power")?.unwrap_or(d.poly_power),
            model: SadlrConfig::take_kv(&mut kv)?,
            train_data: kv.take::<String>("train_data")?.map(PathBuf::from),
            val_data: kv.take::<String>("val_data")?.map(PathBuf::from),
            out_dir: kv
                .take::<String>("out_dir")?
                .map(PathBuf::from)
                .unwrap_or(d.out_dir),
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_kv_text(&text)
    }

    /// Switches the iteration count and picks the matching loss-weight preset.
    pub fn with_iterations(mut self, n: usize) -> Self {
        self.model.iterations = n;
        self.model.lambdas = lambda_preset(n);
        self
    }
}
