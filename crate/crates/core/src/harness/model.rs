//! A trained model bundle: network, projection head, process and data scaling.

use crate::denoiser::{Denoiser, DenoiserShape};
use crate::error::{Error, Result};
use crate::process::{NoiseProcess, ProcessKind};
use crate::repulsor::ProjectionHead;
use crate::rng::{normals, streams, Seed, StreamRng};
use crate::sampler::{sample_from, SamplerConfig};
use crate::tensor::Tensor;

use super::checkpoint::Checkpoint;
use super::data::Standardizer;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub denoiser: Denoiser,
    pub head: ProjectionHead,
    pub process: NoiseProcess,
    pub scaler: Standardizer,
    pub steps_trained: usize,
}

fn vector(v: Vec<f64>) -> Tensor {
    let n = v.len();
    Tensor::new(vec![n], v).expect("non-empty vector")
}

fn as_usize(x: f64, what: &str) -> Result<usize> {
    if x >= 0.0 && x.fract() == 0.0 && x < 1e15 {
        Ok(x as usize)
    } else {
        Err(Error::Format(format!("{what} is not a count: {x}")))
    }
}

impl TrainedModel {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let s = &self.denoiser.shape;
        let mut ck = Checkpoint::new();
        let meta_model = vec![s.data_dim, s.hidden, s.blocks, s.tap_index, s.n_classes];
        let push = |ck: &mut Checkpoint, n: &str, t: Tensor| ck.push(n, t).expect("unique names");
        push(&mut ck, "meta.model", vector(meta_model.into_iter().map(|v| v as f64).collect()));
        let (kind, big_t, bmin, bmax) = match self.process.kind() {
            ProcessKind::FlowMatching => (0.0, 0.0, 0.0, 0.0),
            ProcessKind::Ddpm => {
                let b = self.process.betas();
                (1.0, b.len() as f64, b[0], b[b.len() - 1])
            }
        };
        push(&mut ck, "meta.process", vector(vec![kind, big_t, bmin, bmax]));
        push(&mut ck, "meta.steps", Tensor::scalar(self.steps_trained as f64));
        push(&mut ck, "data.mean", vector(self.scaler.mean.clone()));
        push(&mut ck, "data.std", vector(self.scaler.std.clone()));
        if self.process.kind() == ProcessKind::Ddpm {
            push(&mut ck, "process.betas", vector(self.process.betas().to_vec()));
        }
        for (name, t) in self.denoiser.params() {
            push(&mut ck, &format!("denoiser.{name}"), t.clone());
        }
        push(&mut ck, "head.weight", self.head.weight.clone());
        push(&mut ck, "head.bias", self.head.bias.clone());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let m = ck.require("meta.model")?.data();
        if m.len() != 5 {
            return Err(Error::Format("meta.model must hold 5 values".into()));
        }
        let shape = DenoiserShape {
            data_dim: as_usize(m[0], "data_dim")?,
            hidden: as_usize(m[1], "hidden")?,
            blocks: as_usize(m[2], "blocks")?,
            tap_index: as_usize(m[3], "tap_index")?,
            n_classes: as_usize(m[4], "n_classes")?,
        };
        shape.validate().map_err(|e| Error::Format(format!("meta.model: {e}")))?;
        let mut denoiser = Denoiser::init(shape, &mut Seed(0).stream(streams::INIT))?;
        let names: Vec<String> = denoiser.params().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(denoiser.params_mut()) {
            let t = ck.require(&format!("denoiser.{name}"))?;
            if t.shape() != slot.shape() {
                return Err(Error::Format(format!("{name}: shape {:?}, expected {:?}", t.shape(), slot.shape())));
            }
            *slot = t.clone();
        }
        let p = ck.require("meta.process")?.data();
        let process = match p.first().copied() {
            Some(0.0) => NoiseProcess::flow_matching(),
            Some(1.0) => NoiseProcess::from_betas(ck.require("process.betas")?.data().to_vec())?,
            _ => return Err(Error::Format("meta.process has an unknown kind".into())),
        };
        let weight = ck.require("head.weight")?.clone();
        let bias = ck.require("head.bias")?.clone();
        let (hin, hout) = weight.dims2()?;
        if hin != shape.hidden || bias.shape() != [hout] {
            return Err(Error::Format("projection head shape does not fit the model".into()));
        }
        let mean = ck.require("data.mean")?.data().to_vec();
        let std = ck.require("data.std")?.data().to_vec();
        if mean.len() != shape.data_dim || std.len() != shape.data_dim {
            return Err(Error::Format("data scaling does not fit the model".into()));
        }
        Ok(Self {
            denoiser,
            head: ProjectionHead { weight, bias },
            process,
            scaler: Standardizer { mean, std },
            steps_trained: as_usize(ck.require("meta.steps")?.item()?, "meta.steps")?,
        })
    }

    pub fn data_dim(&self) -> usize {
        self.denoiser.shape.data_dim
    }

    pub fn n_classes(&self) -> usize {
        self.denoiser.shape.n_classes
    }

    /// Integrate caller-provided noise and map the result back to data space.
    pub fn generate_from(&self, cfg: &SamplerConfig, noise: Tensor, classes: &[usize]) -> Result<Tensor> {
        let x = sample_from(&self.denoiser, &self.process, cfg, noise, classes)?;
        self.scaler.inverse(&x)
    }

    /// `n` samples in data space; noise comes from the sampler stream of `seed`.
    pub fn generate(&self, cfg: &SamplerConfig, classes: &[usize], seed: u64) -> Result<Tensor> {
        let mut rng: StreamRng = Seed(seed).stream(streams::SAMPLER);
        let n = classes.len();
        if n == 0 {
            return Err(Error::Precondition("nothing to sample".into()));
        }
        let noise = Tensor::matrix(n, self.data_dim(), normals(&mut rng, n * self.data_dim()))?;
        self.generate_from(cfg, noise, classes)
    }
}
