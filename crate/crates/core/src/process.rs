//! Noise processes: forward corruption and the regression target.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Scale applied to flow-matching times before they reach the network, so
/// both processes feed the timestep embedding values on a `[0, 1000]` scale.
pub const FM_TIME_SCALE: f64 = 1000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProcessKind {
    FlowMatching,
    Ddpm,
}

impl ProcessKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "flow-matching" | "fm" => Ok(Self::FlowMatching),
            "ddpm" => Ok(Self::Ddpm),
            other => Err(Error::Config(format!("unknown process '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::FlowMatching => "flow-matching",
            Self::Ddpm => "ddpm",
        }
    }
}

/// A forward noising process.
///
/// For `Ddpm`, `betas[s - 1]` is `β_s` and `alpha_bars[t]` is
/// `Π_{s≤t} (1 - β_s)` with `alpha_bars[0] = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseProcess {
    kind: ProcessKind,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// One corrupted training batch.
#[derive(Clone, Debug)]
pub struct Corrupted {
    pub xt: Tensor,
    pub target: Tensor,
    /// Time fed to the network, one per row.
    pub model_time: Vec<f64>,
}

impl NoiseProcess {
    pub fn flow_matching() -> Self {
        Self { kind: ProcessKind::FlowMatching, betas: Vec::new(), alpha_bars: Vec::new() }
    }

    /// DDPM with `β_t` linearly spaced on `[beta_min, beta_max]` for `t = 1..=T`.
    pub fn linear_beta_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps < 1 {
            return Err(Error::Config("ddpm needs T >= 1".into()));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Config("every beta must lie in (0, 1)".into()));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { kind: ProcessKind::Ddpm, betas, alpha_bars })
    }

    pub fn kind(&self) -> ProcessKind {
        self.kind
    }

    /// Number of discrete steps `T` (ddpm only; 0 for flow matching).
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars
            .get(t)
            .copied()
            .ok_or_else(|| Error::Index(format!("timestep {t} outside 0..={}", self.steps())))
    }

    /// `√ᾱ_t · x0 + √(1 - ᾱ_t) · eps` for `1 <= t <= T`.
    pub fn ddpm_forward(&self, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        if self.kind != ProcessKind::Ddpm {
            return Err(Error::Config("ddpm_forward on a flow-matching process".into()));
        }
        if t < 1 || t > self.steps() {
            return Err(Error::Index(format!("timestep {t} outside 1..={}", self.steps())));
        }
        ddpm_mix(x0, eps, self.alpha_bars[t])
    }

    /// Draw per-row times, corrupt `x0` with `eps`, and return the regression
    /// target: velocity `eps - x0` for flow matching, `eps` for ddpm.
    pub fn corrupt(&self, x0: &Tensor, eps: &Tensor, rng: &mut impl Rng) -> Result<Corrupted> {
        let (b, d) = x0.dims2()?;
        if eps.shape() != x0.shape() {
            return Err(Error::dim("corrupt", format!("{:?} vs {:?}", x0.shape(), eps.shape())));
        }
        let mut xt = Vec::with_capacity(b * d);
        let mut target = Vec::with_capacity(b * d);
        let mut model_time = Vec::with_capacity(b);
        for r in 0..b {
            let (x, e) = (x0.row(r), eps.row(r));
            match self.kind {
                ProcessKind::FlowMatching => {
                    let t: f64 = rng.random();
                    for (a, n) in x.iter().zip(e) {
                        xt.push((1.0 - t) * a + t * n);
                        target.push(n - a);
                    }
                    model_time.push(t * FM_TIME_SCALE);
                }
                ProcessKind::Ddpm => {
                    let t = rng.random_range(1..=self.steps());
                    let ab = self.alpha_bars[t];
                    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
                    for (a, n) in x.iter().zip(e) {
                        xt.push(sa * a + sn * n);
                        target.push(*n);
                    }
                    model_time.push(t as f64);
                }
            }
        }
        Ok(Corrupted {
            xt: Tensor::matrix(b, d, xt)?,
            target: Tensor::matrix(b, d, target)?,
            model_time,
        })
    }

    /// Continuous ddpm time for a noise-to-signal ratio `σ = √((1-ᾱ)/ᾱ)`,
    /// linearly interpolated between the integer steps.
    pub fn ddpm_time_for_sigma(&self, sigma: f64) -> f64 {
        let sig = |t: usize| ((1.0 - self.alpha_bars[t]) / self.alpha_bars[t]).sqrt();
        if sigma <= 0.0 {
            return 0.0;
        }
        let last = self.steps();
        if sigma >= sig(last) {
            return last as f64;
        }
        // σ(t) is strictly increasing, so bisect for the bracketing steps.
        let (mut lo, mut hi) = (0usize, last);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if sig(mid) <= sigma {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let (s0, s1) = (sig(lo), sig(hi));
        lo as f64 + (sigma - s0) / (s1 - s0)
    }

    pub fn ddpm_sigma(&self, t: usize) -> f64 {
        let ab = self.alpha_bars[t];
        ((1.0 - ab) / ab).sqrt()
    }
}

fn ddpm_mix(x0: &Tensor, eps: &Tensor, ab: f64) -> Result<Tensor> {
    if eps.shape() != x0.shape() {
        return Err(Error::dim("ddpm_forward", format!("{:?} vs {:?}", x0.shape(), eps.shape())));
    }
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0.data().iter().zip(eps.data()).map(|(a, n)| sa * a + sn * n).collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// `x_t = (1 - t)·x0 + t·eps` and the constant velocity `eps - x0`.
pub fn fm_interpolant(x0: &Tensor, eps: &Tensor, t: f64) -> Result<(Tensor, Tensor)> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("flow-matching time {t} outside [0, 1]")));
    }
    if eps.shape() != x0.shape() {
        return Err(Error::dim("fm_interpolant", format!("{:?} vs {:?}", x0.shape(), eps.shape())));
    }
    let xt = x0.data().iter().zip(eps.data()).map(|(a, n)| (1.0 - t) * a + t * n).collect();
    let v = x0.data().iter().zip(eps.data()).map(|(a, n)| n - a).collect();
    Ok((Tensor::new(x0.shape().to_vec(), xt)?, Tensor::new(x0.shape().to_vec(), v)?))
}

/// Mean squared error over every element.
pub fn diff_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    if tape.value(pred).shape() != tape.value(target).shape() {
        return Err(Error::dim(
            "diff_loss",
            format!("{:?} vs {:?}", tape.value(pred).shape(), tape.value(target).shape()),
        ));
    }
    let d = tape.sub(pred, target)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq))
}
