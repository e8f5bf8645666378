//! Block-structured conditional MLP with a feature tap.
//!
//! `in_proj(x) + time_emb(t) + class_emb[c]` enters a stack of residual
//! blocks `h + fc2(silu(fc1(h)))`; `out_proj` maps the last hidden state back
//! to data space. The hidden state right after block `tap_index` (1-based,
//! post-residual) is exposed for the dispersive regularizer.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::normals;
use crate::tensor::{Tape, Tensor, Var};

/// Init std of every linear weight except `out_proj`.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `in × out`.
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn gaussian(fan_in: usize, fan_out: usize, std: f64, rng: &mut impl Rng) -> Self {
        let w = normals(rng, fan_in * fan_out).into_iter().map(|v| v * std).collect();
        Self {
            weight: Tensor::matrix(fan_in, fan_out, w).expect("linear shape"),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self { weight: Tensor::zeros(&[fan_in, fan_out]), bias: Tensor::zeros(&[fan_out]) }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> LinearVars {
        LinearVars {
            weight: tape.leaf(self.weight.clone(), trainable),
            bias: tape.leaf(self.bias.clone(), trainable),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl LinearVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.weight)?;
        tape.add_row(y, self.bias)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Architecture hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenoiserShape {
    pub data_dim: usize,
    pub hidden: usize,
    pub blocks: usize,
    /// 1-based block after which features are tapped.
    pub tap_index: usize,
    /// Data classes; one extra null class is appended for guidance.
    pub n_classes: usize,
}

impl DenoiserShape {
    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 || self.blocks == 0 {
            return Err(Error::Config("data_dim and blocks must be positive".into()));
        }
        if self.hidden == 0 || !self.hidden.is_multiple_of(2) {
            return Err(Error::Config(format!("hidden size {} must be even and positive", self.hidden)));
        }
        if self.tap_index < 1 || self.tap_index > self.blocks {
            return Err(Error::Config(format!(
                "tap_index {} outside 1..={}",
                self.tap_index, self.blocks
            )));
        }
        Ok(())
    }
}

/// Default tap: two thirds of the way through the stack.
pub fn default_tap_index(blocks: usize) -> usize {
    ((2.0 * blocks as f64 / 3.0).round() as usize).clamp(1, blocks.max(1))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    pub shape: DenoiserShape,
    pub in_proj: Linear,
    pub blocks: Vec<Block>,
    pub out_proj: Linear,
    /// `(n_classes + 1) × hidden`; the last row is the null class.
    pub class_embed: Tensor,
}

/// Parameters of a [`Denoiser`] bound to one tape.
#[derive(Clone, Debug)]
pub struct DenoiserVars {
    in_proj: LinearVars,
    blocks: Vec<(LinearVars, LinearVars)>,
    out_proj: LinearVars,
    class_embed: Var,
}

impl DenoiserVars {
    /// Trainable leaves in [`Denoiser::params`] order.
    pub fn leaves(&self) -> Vec<Var> {
        let mut v = vec![self.in_proj.weight, self.in_proj.bias];
        for (a, b) in &self.blocks {
            v.extend([a.weight, a.bias, b.weight, b.bias]);
        }
        v.extend([self.out_proj.weight, self.out_proj.bias, self.class_embed]);
        v
    }
}

/// Hidden state after the tapped block, plus what is needed to finish the pass.
#[derive(Clone, Copy, Debug)]
pub struct Tapped {
    pub h_tap: Var,
}

impl Denoiser {
    /// Gaussian(0, 0.02) linears and class table, zero `out_proj`.
    pub fn init(shape: DenoiserShape, rng: &mut impl Rng) -> Result<Self> {
        shape.validate()?;
        let h = shape.hidden;
        let in_proj = Linear::gaussian(shape.data_dim, h, INIT_STD, rng);
        let blocks = (0..shape.blocks)
            .map(|_| Block {
                fc1: Linear::gaussian(h, h, INIT_STD, rng),
                fc2: Linear::gaussian(h, h, INIT_STD, rng),
            })
            .collect();
        let table = normals(rng, (shape.n_classes + 1) * h).into_iter().map(|v| v * INIT_STD).collect();
        Ok(Self {
            shape,
            in_proj,
            blocks,
            out_proj: Linear::zeros(h, shape.data_dim),
            class_embed: Tensor::matrix(shape.n_classes + 1, h, table)?,
        })
    }

    pub fn null_class(&self) -> usize {
        self.shape.n_classes
    }

    /// Named parameters in a fixed order.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = vec![
            ("in_proj.weight".to_string(), &self.in_proj.weight),
            ("in_proj.bias".to_string(), &self.in_proj.bias),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            v.push((format!("blocks.{i}.fc1.weight"), &b.fc1.weight));
            v.push((format!("blocks.{i}.fc1.bias"), &b.fc1.bias));
            v.push((format!("blocks.{i}.fc2.weight"), &b.fc2.weight));
            v.push((format!("blocks.{i}.fc2.bias"), &b.fc2.bias));
        }
        v.push(("out_proj.weight".to_string(), &self.out_proj.weight));
        v.push(("out_proj.bias".to_string(), &self.out_proj.bias));
        v.push(("class_embed".to_string(), &self.class_embed));
        v
    }

    /// Mutable parameters, same order as [`Denoiser::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.in_proj.weight, &mut self.in_proj.bias];
        for b in &mut self.blocks {
            v.extend([&mut b.fc1.weight, &mut b.fc1.bias, &mut b.fc2.weight, &mut b.fc2.bias]);
        }
        v.extend([&mut self.out_proj.weight, &mut self.out_proj.bias, &mut self.class_embed]);
        v
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> DenoiserVars {
        DenoiserVars {
            in_proj: self.in_proj.bind(tape, trainable),
            blocks: self.blocks.iter().map(|b| (b.fc1.bind(tape, trainable), b.fc2.bind(tape, trainable))).collect(),
            out_proj: self.out_proj.bind(tape, trainable),
            class_embed: tape.leaf(self.class_embed.clone(), trainable),
        }
    }

    fn stem(&self, tape: &mut Tape, vars: &DenoiserVars, xt: Var, t: &[f64], c: &[usize]) -> Result<Var> {
        let (b, d) = tape.value(xt).dims2()?;
        if d != self.shape.data_dim {
            return Err(Error::dim("denoiser", format!("input dim {d}, model dim {}", self.shape.data_dim)));
        }
        if t.len() != b || c.len() != b {
            return Err(Error::dim("denoiser", format!("{b} rows, {} times, {} classes", t.len(), c.len())));
        }
        if let Some(bad) = c.iter().find(|&&k| k > self.null_class()) {
            return Err(Error::Index(format!("class id {bad} (null class is {})", self.null_class())));
        }
        let h = self.shape.hidden;
        let mut temb = Vec::with_capacity(b * h);
        for &ti in t {
            temb.extend(timestep_embedding(ti, h)?);
        }
        let temb = tape.constant(Tensor::matrix(b, h, temb)?);
        let x = vars.in_proj.forward(tape, xt)?;
        let x = tape.add(x, temb)?;
        let cemb = tape.gather_rows(vars.class_embed, c)?;
        tape.add(x, cemb)
    }

    fn run_blocks(&self, tape: &mut Tape, vars: &DenoiserVars, mut h: Var, range: std::ops::Range<usize>) -> Result<Var> {
        for (fc1, fc2) in &vars.blocks[range] {
            let a = fc1.forward(tape, h)?;
            let a = tape.silu(a);
            let a = fc2.forward(tape, a)?;
            h = tape.add(h, a)?;
        }
        Ok(h)
    }

    /// Blocks `1..=tap_index`.
    pub fn forward_to_tap(&self, tape: &mut Tape, vars: &DenoiserVars, xt: Var, t: &[f64], c: &[usize]) -> Result<Tapped> {
        let h = self.stem(tape, vars, xt, t, c)?;
        let h_tap = self.run_blocks(tape, vars, h, 0..self.shape.tap_index)?;
        Ok(Tapped { h_tap })
    }

    /// Remaining blocks and the output projection.
    pub fn forward_from_tap(&self, tape: &mut Tape, vars: &DenoiserVars, tapped: Tapped) -> Result<Var> {
        let h = self.run_blocks(tape, vars, tapped.h_tap, self.shape.tap_index..self.shape.blocks)?;
        vars.out_proj.forward(tape, h)
    }

    /// Full pass returning `(prediction, tapped hidden state)`.
    pub fn forward_with_tap(&self, tape: &mut Tape, vars: &DenoiserVars, xt: Var, t: &[f64], c: &[usize]) -> Result<(Var, Var)> {
        let tapped = self.forward_to_tap(tape, vars, xt, t, c)?;
        let pred = self.forward_from_tap(tape, vars, tapped)?;
        Ok((pred, tapped.h_tap))
    }

    /// Value-only prediction.
    pub fn predict(&self, xt: &Tensor, t: &[f64], c: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(xt.clone());
        let (pred, _) = self.forward_with_tap(&mut tape, &vars, x, t, c)?;
        Ok(tape.value(pred).clone())
    }

    /// Value-only tapped features.
    pub fn tap_features(&self, xt: &Tensor, t: &[f64], c: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(xt.clone());
        let tapped = self.forward_to_tap(&mut tape, &vars, x, t, c)?;
        Ok(tape.value(tapped.h_tap).clone())
    }
}

/// Interleaved `[sin(t·f_0), cos(t·f_0), sin(t·f_1), ...]` with
/// `f_i = 10000^(-i / (H/2))`, i.e. periods spanning `2π·[1, 10⁴]`.
pub fn timestep_embedding(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::Config(format!("timestep embedding size {dim} must be even")));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let (s, c) = (t * freq).sin_cos();
        out.push(s);
        out.push(c);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{streams, Seed};

    fn shape(blocks: usize, tap: usize) -> DenoiserShape {
        DenoiserShape { data_dim: 2, hidden: 16, blocks, tap_index: tap, n_classes: 3 }
    }

    #[test]
    fn embedding_at_zero_and_determinism() {
        let e = timestep_embedding(0.0, 8).unwrap();
        for pair in e.chunks(2) {
            assert_eq!(pair, &[0.0, 1.0]);
        }
        assert_eq!(timestep_embedding(0.3, 8).unwrap(), timestep_embedding(0.3, 8).unwrap());
        assert_ne!(timestep_embedding(0.1, 8).unwrap(), timestep_embedding(0.9, 8).unwrap());
        assert!(matches!(timestep_embedding(0.0, 7), Err(Error::Config(_))));
    }

    #[test]
    fn default_tap_is_two_thirds() {
        assert_eq!(default_tap_index(6), 4);
        assert_eq!(default_tap_index(12), 8);
        assert_eq!(default_tap_index(1), 1);
    }

    #[test]
    fn shape_validation() {
        assert!(shape(6, 0).validate().is_err());
        assert!(shape(6, 7).validate().is_err());
        assert!(shape(6, 6).validate().is_ok());
    }

    #[test]
    fn zero_out_proj_predicts_zero() {
        let net = Denoiser::init(shape(3, 2), &mut Seed(1).stream(streams::INIT)).unwrap();
        let x = Tensor::matrix(2, 2, vec![0.3, -1.2, 4.0, 0.5]).unwrap();
        let p = net.predict(&x, &[10.0, 900.0], &[0, 3]).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn boundary_tap_is_last_hidden_state() {
        let mut net = Denoiser::init(shape(3, 3), &mut Seed(2).stream(streams::INIT)).unwrap();
        // With an identity-like out_proj the prediction exposes the last hidden state.
        let mut w = Tensor::zeros(&[16, 2]);
        w.data_mut()[0] = 1.0; // h[0] -> out[0]
        w.data_mut()[3] = 1.0; // h[1] -> out[1]
        net.out_proj.weight = w;
        let x = Tensor::matrix(1, 2, vec![0.7, -0.1]).unwrap();
        let h = net.tap_features(&x, &[5.0], &[1]).unwrap();
        let p = net.predict(&x, &[5.0], &[1]).unwrap();
        assert_eq!(p.data(), &h.data()[0..2]);
    }

    #[test]
    fn invalid_class_is_index_error() {
        let net = Denoiser::init(shape(2, 1), &mut Seed(1).stream(streams::INIT)).unwrap();
        let x = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        assert!(matches!(net.predict(&x, &[0.0], &[4]), Err(Error::Index(_))));
        assert!(net.predict(&x, &[0.0], &[net.null_class()]).is_ok());
    }

    #[test]
    fn residual_blocks_near_identity_at_init() {
        let sh = DenoiserShape { data_dim: 2, hidden: 128, blocks: 6, tap_index: 4, n_classes: 8 };
        let net = Denoiser::init(sh, &mut Seed(5).stream(streams::INIT)).unwrap();
        let mut rng = Seed(5).stream(streams::EVAL);
        let x = Tensor::matrix(32, 2, normals(&mut rng, 64)).unwrap();
        let t: Vec<f64> = (0..32).map(|i| i as f64 * 30.0).collect();
        let c: Vec<usize> = (0..32).map(|i| i % 9).collect();
        let mut tape = Tape::new();
        let vars = net.bind(&mut tape, false);
        let xv = tape.constant(x);
        let mut h = net.stem(&mut tape, &vars, xv, &t, &c).unwrap();
        for i in 0..6 {
            let next = net.run_blocks(&mut tape, &vars, h, i..i + 1).unwrap();
            let (a, b) = (tape.value(h), tape.value(next));
            let diff: f64 = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
            let base: f64 = a.data().iter().map(|p| p * p).sum::<f64>().sqrt();
            assert!(diff < 0.1 * base, "block {i}: {diff} vs {base}");
            h = next;
        }
    }

    #[test]
    fn params_and_leaves_align() {
        let net = Denoiser::init(shape(2, 1), &mut Seed(1).stream(streams::INIT)).unwrap();
        let mut tape = Tape::new();
        let vars = net.bind(&mut tape, true);
        let leaves = vars.leaves();
        let params = net.params();
        assert_eq!(leaves.len(), params.len());
        for (v, (_, p)) in leaves.iter().zip(&params) {
            assert_eq!(tape.value(*v), *p);
        }
    }
}
