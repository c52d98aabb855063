//! Plain-text `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Lists are comma
//! separated. Keys not consumed by the reader are reported as errors, so a
//! typo never silently falls back to a default.

use std::collections::BTreeMap;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use celeste_mini_core::sky::{Prior, TypePrior, COLOR_COUNT};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| anyhow!("line {}: expected key = value", n + 1))?;
            let k = k.trim().to_string();
            if k.is_empty() {
                bail!("line {}: empty key", n + 1);
            }
            if entries.insert(k.clone(), v.trim().to_string()).is_some() {
                bail!("line {}: duplicate key {k}", n + 1);
            }
        }
        Ok(Self { entries })
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    /// Remove and parse `key` if present.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|e| anyhow!("{key} = {v}: {e}")),
        }
    }

    /// Overwrite `slot` with `key`'s value when present.
    pub fn apply<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }

    pub fn take_list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(v) => parse_list(&v).map(Some).with_context(|| format!("{key} = {v}")),
        }
    }

    /// Fail if any key was not consumed.
    pub fn finish(self) -> Result<()> {
        if let Some(k) = self.entries.keys().next() {
            bail!("unknown configuration key {k:?}");
        }
        Ok(())
    }
}

pub fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(|x| x.trim().parse().map_err(|e| anyhow!("{x:?}: {e}")))
        .collect()
}

fn colors(kv: &mut KeyValues, key: &str, slot: &mut [f64; COLOR_COUNT]) -> Result<()> {
    if let Some(v) = kv.take_list::<f64>(key)? {
        *slot = v.try_into().map_err(|v: Vec<f64>| anyhow!("{key}: expected {COLOR_COUNT} values, got {}", v.len()))?;
    }
    Ok(())
}

fn type_prior(kv: &mut KeyValues, prefix: &str, t: &mut TypePrior) -> Result<()> {
    kv.apply(&format!("{prefix}.log_flux_mean"), &mut t.log_flux_mean)?;
    kv.apply(&format!("{prefix}.log_flux_var"), &mut t.log_flux_var)?;
    colors(kv, &format!("{prefix}.color_mean"), &mut t.color_mean)?;
    colors(kv, &format!("{prefix}.color_var"), &mut t.color_var)
}

/// A prior from `p_star`, `star.*` and `galaxy.*` keys, missing ones taken
/// from the defaults.
pub fn prior_from(kv: &mut KeyValues) -> Result<Prior> {
    let mut p = Prior::default();
    kv.apply("p_star", &mut p.p_star)?;
    type_prior(kv, "star", &mut p.star)?;
    type_prior(kv, "galaxy", &mut p.galaxy)?;
    p.validate().context("invalid prior")?;
    Ok(p)
}

pub fn read_prior(path: &std::path::Path) -> Result<Prior> {
    let mut kv = KeyValues::read(path)?;
    let p = prior_from(&mut kv)?;
    kv.finish()?;
    Ok(p)
}

pub fn format_prior(p: &Prior) -> String {
    let list = |v: &[f64; COLOR_COUNT]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ");
    let mut s = format!("p_star = {}\n", p.p_star);
    for (name, t) in [("star", &p.star), ("galaxy", &p.galaxy)] {
        s += &format!("{name}.log_flux_mean = {}\n", t.log_flux_mean);
        s += &format!("{name}.log_flux_var = {}\n", t.log_flux_var);
        s += &format!("{name}.color_mean = {}\n", list(&t.color_mean));
        s += &format!("{name}.color_var = {}\n", list(&t.color_var));
    }
    s
}
