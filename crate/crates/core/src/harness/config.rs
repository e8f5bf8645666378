//! Run configuration and its flat `section.key = value` text format.
//!
//! One assignment per line; `#` starts a comment. Unknown keys are errors.
//! Every key is optional and falls back to the defaults below.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::denoiser::default_tap_index;
use crate::error::{Error, Result};
use crate::process::{NoiseProcess, ProcessKind};
use crate::repulsor::RepulsorParams;

use super::data::DatasetKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regularizer {
    None,
    InBatch,
    Repulsor,
}

impl Regularizer {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "inbatch" => Ok(Self::InBatch),
            "repulsor" => Ok(Self::Repulsor),
            other => Err(Error::Config(format!("unknown regularizer '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::InBatch => "inbatch",
            Self::Repulsor => "repulsor",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProcessConfig {
    pub kind: ProcessKind,
    pub ddpm_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl ProcessConfig {
    pub fn build(&self) -> Result<NoiseProcess> {
        match self.kind {
            ProcessKind::FlowMatching => Ok(NoiseProcess::flow_matching()),
            ProcessKind::Ddpm => NoiseProcess::linear_beta_schedule(self.ddpm_steps, self.beta_min, self.beta_max),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub blocks: usize,
    pub hidden: usize,
    pub tap_index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    pub every: usize,
    pub n_samples: usize,
    pub n_projections: usize,
    /// When false the wallclock column is written as 0 so logs are byte-reproducible.
    pub record_wallclock: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetKind,
    pub n_train: usize,
    pub process: ProcessConfig,
    pub model: ModelConfig,
    pub regularizer: Regularizer,
    pub repulsor: RepulsorParams,
    pub optim: OptimConfig,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub guidance_w: f64,
    pub drop_prob: f64,
    pub sampler_steps: usize,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Gauss8,
            n_train: 20_000,
            process: ProcessConfig { kind: ProcessKind::FlowMatching, ddpm_steps: 1000, beta_min: 1e-4, beta_max: 0.02 },
            model: ModelConfig { blocks: 6, hidden: 128, tap_index: default_tap_index(6) },
            regularizer: Regularizer::Repulsor,
            repulsor: RepulsorParams::default(),
            optim: OptimConfig { lr: 1e-4, beta1: 0.9, beta2: 0.95, weight_decay: 0.0, eps: 1e-8 },
            batch_size: 128,
            steps: 20_000,
            seed: 0,
            guidance_w: 1.5,
            drop_prob: 0.1,
            sampler_steps: 250,
            eval: EvalConfig { every: 1000, n_samples: 512, n_projections: 64, record_wallclock: true },
        }
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("bad value '{v}' for {key}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean '{v}' for {key}"))),
    }
}

/// Split text into `key -> value`, rejecting malformed and duplicate lines.
pub fn parse_assignments(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected 'section.key = value'", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || v.is_empty() {
            return Err(Error::Config(format!("line {}: empty key or value", n + 1)));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {k}", n + 1)));
        }
    }
    Ok(out)
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let kv = parse_assignments(text)?;
        let mut c = Self::default();
        let mut tap_given = false;
        for (k, v) in &kv {
            let v = v.as_str();
            match k.as_str() {
                "data.name" => c.dataset = DatasetKind::parse(v)?,
                "data.n_train" => c.n_train = parse_num(k, v)?,
                "process.kind" => c.process.kind = ProcessKind::parse(v)?,
                "process.T" => c.process.ddpm_steps = parse_num(k, v)?,
                "process.beta_min" => c.process.beta_min = parse_num(k, v)?,
                "process.beta_max" => c.process.beta_max = parse_num(k, v)?,
                "model.blocks" => c.model.blocks = parse_num(k, v)?,
                "model.hidden" => c.model.hidden = parse_num(k, v)?,
                "model.tap_index" => {
                    c.model.tap_index = parse_num(k, v)?;
                    tap_given = true;
                }
                "regularizer.kind" => c.regularizer = Regularizer::parse(v)?,
                "repulsor.tau" => c.repulsor.tau = parse_num(k, v)?,
                "repulsor.gamma" => c.repulsor.gamma = parse_num(k, v)?,
                "repulsor.K" => c.repulsor.bank_size = parse_num(k, v)?,
                "repulsor.D" => c.repulsor.proj_dim = parse_num(k, v)?,
                "optim.lr" => c.optim.lr = parse_num(k, v)?,
                "optim.beta1" => c.optim.beta1 = parse_num(k, v)?,
                "optim.beta2" => c.optim.beta2 = parse_num(k, v)?,
                "optim.weight_decay" => c.optim.weight_decay = parse_num(k, v)?,
                "optim.eps" => c.optim.eps = parse_num(k, v)?,
                "train.batch_size" => c.batch_size = parse_num(k, v)?,
                "train.steps" => c.steps = parse_num(k, v)?,
                "train.seed" => c.seed = parse_num(k, v)?,
                "cfg.guidance_w" => c.guidance_w = parse_num(k, v)?,
                "cfg.drop_prob" => c.drop_prob = parse_num(k, v)?,
                "sampler.steps" => c.sampler_steps = parse_num(k, v)?,
                "eval.every" => c.eval.every = parse_num(k, v)?,
                "eval.n_samples" => c.eval.n_samples = parse_num(k, v)?,
                "eval.n_projections" => c.eval.n_projections = parse_num(k, v)?,
                "eval.wallclock" => c.eval.record_wallclock = parse_bool(k, v)?,
                other => return Err(Error::Config(format!("unknown key '{other}'"))),
            }
        }
        if !tap_given {
            c.model.tap_index = default_tap_index(c.model.blocks);
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Canonical text form; `from_text(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("data.name", self.dataset.name().into());
        put("data.n_train", self.n_train.to_string());
        put("process.kind", self.process.kind.name().into());
        put("process.T", self.process.ddpm_steps.to_string());
        put("process.beta_min", self.process.beta_min.to_string());
        put("process.beta_max", self.process.beta_max.to_string());
        put("model.blocks", self.model.blocks.to_string());
        put("model.hidden", self.model.hidden.to_string());
        put("model.tap_index", self.model.tap_index.to_string());
        put("regularizer.kind", self.regularizer.name().into());
        put("repulsor.tau", self.repulsor.tau.to_string());
        put("repulsor.gamma", self.repulsor.gamma.to_string());
        put("repulsor.K", self.repulsor.bank_size.to_string());
        put("repulsor.D", self.repulsor.proj_dim.to_string());
        put("optim.lr", self.optim.lr.to_string());
        put("optim.beta1", self.optim.beta1.to_string());
        put("optim.beta2", self.optim.beta2.to_string());
        put("optim.weight_decay", self.optim.weight_decay.to_string());
        put("optim.eps", self.optim.eps.to_string());
        put("train.batch_size", self.batch_size.to_string());
        put("train.steps", self.steps.to_string());
        put("train.seed", self.seed.to_string());
        put("cfg.guidance_w", self.guidance_w.to_string());
        put("cfg.drop_prob", self.drop_prob.to_string());
        put("sampler.steps", self.sampler_steps.to_string());
        put("eval.every", self.eval.every.to_string());
        put("eval.n_samples", self.eval.n_samples.to_string());
        put("eval.n_projections", self.eval.n_projections.to_string());
        put("eval.wallclock", self.eval.record_wallclock.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.batch_size < 1 || self.steps < 1 || self.n_train < 1 {
            return err("batch_size, steps and n_train must be >= 1".into());
        }
        if self.model.blocks < 1 || self.model.hidden < 2 || !self.model.hidden.is_multiple_of(2) {
            return err("model needs >= 1 block and an even hidden size".into());
        }
        if self.model.tap_index < 1 || self.model.tap_index > self.model.blocks {
            return err(format!("tap_index {} outside 1..={}", self.model.tap_index, self.model.blocks));
        }
        self.repulsor.validate()?;
        if self.regularizer == Regularizer::Repulsor && self.repulsor.bank_size < self.batch_size {
            return err(format!(
                "bank size K = {} is smaller than the batch size {}",
                self.repulsor.bank_size, self.batch_size
            ));
        }
        if self.regularizer == Regularizer::InBatch && self.batch_size < 2 {
            return err("in-batch dispersion needs batch_size >= 2".into());
        }
        let o = &self.optim;
        if !(o.lr > 0.0) || !(o.eps > 0.0) || !(o.weight_decay >= 0.0) {
            return err("lr and eps must be positive, weight_decay non-negative".into());
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return err("optimizer betas must lie in [0, 1)".into());
        }
        if !(0.0..1.0).contains(&self.drop_prob) {
            return err(format!("drop_prob {} outside [0, 1)", self.drop_prob));
        }
        if !(self.guidance_w >= 0.0) {
            return err("guidance weight must be >= 0".into());
        }
        if self.sampler_steps < 1 {
            return err("sampler.steps must be >= 1".into());
        }
        if self.process.kind == ProcessKind::Ddpm {
            self.process.build()?;
            if self.sampler_steps > self.process.ddpm_steps {
                return err("sampler.steps exceeds process.T".into());
            }
        }
        if self.eval.every < 1 || self.eval.n_samples < 2 || self.eval.n_projections < 1 {
            return err("eval.every >= 1, eval.n_samples >= 2, eval.n_projections >= 1 required".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_text(&c.to_text()).unwrap(), c);
        assert_eq!(RunConfig::from_text("").unwrap(), c);
    }

    #[test]
    fn parses_comments_and_overrides() {
        let c = RunConfig::from_text(
            "# toy run\n data.name = moons \nmodel.blocks = 9 # deeper\nrepulsor.K=256\ntrain.batch_size = 64\n",
        )
        .unwrap();
        assert_eq!(c.dataset, DatasetKind::Moons);
        assert_eq!(c.model.blocks, 9);
        assert_eq!(c.model.tap_index, 6);
        assert_eq!(c.repulsor.bank_size, 256);
    }

    #[test]
    fn rejects_bank_smaller_than_batch() {
        let e = RunConfig::from_text("repulsor.K = 64\ntrain.batch_size = 128").unwrap_err();
        assert!(matches!(e, Error::Config(_)));
        assert!(RunConfig::from_text("repulsor.K = 64\ntrain.batch_size = 128\nregularizer.kind = none").is_ok());
    }

    #[test]
    fn rejects_malformed_input() {
        for bad in [
            "nonsense",
            "data.name = ",
            "data.unknown = 3",
            "model.blocks = x",
            "model.tap_index = 7",
            "optim.lr = 0",
            "repulsor.tau = -1",
            "data.name = gauss8\ndata.name = moons",
            "cfg.drop_prob = 1.0",
        ] {
            assert!(matches!(RunConfig::from_text(bad), Err(Error::Config(_))), "{bad}");
        }
    }
}
