//! Plain `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are the field
//! names of [`DistillConfig`] and the flattened fields of [`TeacherConfig`];
//! unknown keys are errors. Lists are comma separated.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::teacher::TeacherConfig;

pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
        let k = k.trim();
        if out.insert(k.to_string(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key '{k}'", no + 1)));
        }
    }
    Ok(out)
}

fn value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("key '{key}': cannot parse '{v}'")))
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| value(key, x.trim())).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// A config that round-trips through `key = value` text.
pub trait KvConfig: Default {
    fn pairs(&self) -> Vec<(&'static str, String)>;
    fn set(&mut self, key: &str, value: &str) -> Result<()>;

    /// Defaults overridden by the given map.
    fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut c = Self::default();
        for (k, v) in map {
            c.set(k, v)?;
        }
        Ok(c)
    }

    fn from_kv(text: &str) -> Result<Self> {
        Self::from_map(&parse_kv(text)?)
    }

    /// Every key, defaults included.
    fn to_kv(&self) -> String {
        self.pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

impl KvConfig for DistillConfig {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("k", self.k.to_string()),
            ("mu", self.mu.to_string()),
            ("lambda_adv", self.lambda_adv.to_string()),
            ("w_min", self.w_min.to_string()),
            ("w_max", self.w_max.to_string()),
            ("phases", self.phases.to_string()),
            ("batch", self.batch.to_string()),
            ("iters", self.iters.to_string()),
            ("lr", self.lr.to_string()),
            ("huber_c", self.huber_c.to_string()),
            ("seed", self.seed.to_string()),
            ("log_every", self.log_every.to_string()),
        ]
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "k" => self.k = value(key, v)?,
            "mu" => self.mu = value(key, v)?,
            "lambda_adv" => self.lambda_adv = value(key, v)?,
            "w_min" => self.w_min = value(key, v)?,
            "w_max" => self.w_max = value(key, v)?,
            "phases" => self.phases = value(key, v)?,
            "batch" => self.batch = value(key, v)?,
            "iters" => self.iters = value(key, v)?,
            "lr" => self.lr = value(key, v)?,
            "huber_c" => self.huber_c = value(key, v)?,
            "seed" => self.seed = value(key, v)?,
            "log_every" => self.log_every = value(key, v)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }
}

impl KvConfig for TeacherConfig {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("steps", self.schedule.steps.to_string()),
            ("beta_min", self.schedule.beta_min.to_string()),
            ("beta_max", self.schedule.beta_max.to_string()),
            ("classes", self.classes.to_string()),
            ("train_samples", self.train_samples.to_string()),
            ("jitter", self.jitter.to_string()),
            ("latent_dim", self.autoencoder.latent_dim.to_string()),
            ("ae_hidden", join(&self.autoencoder.hidden)),
            ("ae_iters", self.autoencoder.iters.to_string()),
            ("ae_batch", self.autoencoder.batch.to_string()),
            ("ae_lr", self.autoencoder.lr.to_string()),
            ("eps_iters", self.eps.iters.to_string()),
            ("eps_batch", self.eps.batch.to_string()),
            ("eps_lr", self.eps.lr.to_string()),
            ("p_drop", self.eps.p_drop.to_string()),
            ("oracle_iters", self.oracle_iters.to_string()),
            ("eval_omega", self.eval_omega.to_string()),
            ("eval_samples", self.eval_samples.to_string()),
            ("gate_fid", self.gate_fid.to_string()),
        ]
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "steps" => self.schedule.steps = value(key, v)?,
            "beta_min" => self.schedule.beta_min = value(key, v)?,
            "beta_max" => self.schedule.beta_max = value(key, v)?,
            "classes" => self.classes = value(key, v)?,
            "train_samples" => self.train_samples = value(key, v)?,
            "jitter" => self.jitter = value(key, v)?,
            "latent_dim" => self.autoencoder.latent_dim = value(key, v)?,
            "ae_hidden" => self.autoencoder.hidden = list(key, v)?,
            "ae_iters" => self.autoencoder.iters = value(key, v)?,
            "ae_batch" => self.autoencoder.batch = value(key, v)?,
            "ae_lr" => self.autoencoder.lr = value(key, v)?,
            "eps_iters" => self.eps.iters = value(key, v)?,
            "eps_batch" => self.eps.batch = value(key, v)?,
            "eps_lr" => self.eps.lr = value(key, v)?,
            "p_drop" => self.eps.p_drop = value(key, v)?,
            "oracle_iters" => self.oracle_iters = value(key, v)?,
            "eval_omega" => self.eval_omega = value(key, v)?,
            "eval_samples" => self.eval_samples = value(key, v)?,
            "gate_fid" => self.gate_fid = value(key, v)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }
}

/// Comma-separated list of numbers, as used on the command line.
pub fn parse_list<T: FromStr>(what: &str, v: &str) -> Result<Vec<T>> {
    let out: Vec<T> = list(what, v)?;
    if out.is_empty() {
        return Err(Error::Config(format!("{what}: empty list")));
    }
    Ok(out)
}
