//! Deterministic Heun ODE sampling with classifier-free guidance.

use rand::Rng;

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::process::{NoiseProcess, ProcessKind, FM_TIME_SCALE};
use crate::rng::normals;
use crate::tensor::Tensor;

/// Anything that predicts the regression target from `(x_t, t, class)`.
pub trait ConditionalModel {
    fn predict(&self, xt: &Tensor, model_time: &[f64], classes: &[usize]) -> Result<Tensor>;
    fn null_class(&self) -> usize;
}

impl ConditionalModel for Denoiser {
    fn predict(&self, xt: &Tensor, model_time: &[f64], classes: &[usize]) -> Result<Tensor> {
        Denoiser::predict(self, xt, model_time, classes)
    }

    fn null_class(&self) -> usize {
        Denoiser::null_class(self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance_w: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 250, guidance_w: 1.5 }
    }
}

/// `u + w·(cond - u)` with `u` the null-class prediction.
///
/// `w = 1` returns the conditional prediction and `w = 0` the unconditional
/// one without evaluating the other branch.
pub fn cfg_predict(net: &impl ConditionalModel, xt: &Tensor, t: &[f64], classes: &[usize], w: f64) -> Result<Tensor> {
    if w == 1.0 {
        return net.predict(xt, t, classes);
    }
    let null = vec![net.null_class(); classes.len()];
    let uncond = net.predict(xt, t, &null)?;
    if w == 0.0 {
        return Ok(uncond);
    }
    let cond = net.predict(xt, t, classes)?;
    Ok(guide(&uncond, &cond, w))
}

/// Combine precomputed branches.
pub fn guide(uncond: &Tensor, cond: &Tensor, w: f64) -> Tensor {
    let data = uncond.data().iter().zip(cond.data()).map(|(u, c)| u + w * (c - u)).collect();
    Tensor::new(uncond.shape().to_vec(), data).expect("matching branch shapes")
}

/// Two-stage Heun over consecutive grid points: Euler predictor, trapezoid
/// corrector. Every interval, the last included, takes a full Heun step.
pub fn heun_integrate(mut field: impl FnMut(&Tensor, f64) -> Result<Tensor>, x_init: Tensor, grid: &[f64]) -> Result<Tensor> {
    if grid.len() < 2 {
        return Err(Error::Config("time grid needs at least two points".into()));
    }
    let increasing = grid[1] > grid[0];
    let monotone = grid.windows(2).all(|w| if increasing { w[1] > w[0] } else { w[1] < w[0] });
    if !monotone {
        return Err(Error::Config("time grid must be strictly monotone".into()));
    }
    let mut x = x_init;
    for w in grid.windows(2) {
        let (t0, t1) = (w[0], w[1]);
        let h = t1 - t0;
        let k1 = field(&x, t0)?;
        let pred = axpy(&x, h, &k1);
        let k2 = field(&pred, t1)?;
        let data = x
            .data()
            .iter()
            .zip(k1.data())
            .zip(k2.data())
            .map(|((xi, a), b)| xi + 0.5 * h * (a + b))
            .collect();
        x = Tensor::new(x.shape().to_vec(), data)?;
    }
    Ok(x)
}

fn axpy(x: &Tensor, h: f64, k: &Tensor) -> Tensor {
    let data = x.data().iter().zip(k.data()).map(|(a, b)| a + h * b).collect();
    Tensor::new(x.shape().to_vec(), data).expect("field keeps shape")
}

/// Integration grid from the noise end to the data end with `steps` intervals.
///
/// Flow matching: `t` from 1 down to 0. DDPM: integer timesteps from `T`
/// down to 0.
pub fn time_grid(process: &NoiseProcess, steps: usize) -> Result<Vec<f64>> {
    if steps < 1 {
        return Err(Error::Config("sampler needs at least one step".into()));
    }
    match process.kind() {
        ProcessKind::FlowMatching => Ok((0..=steps).map(|k| 1.0 - k as f64 / steps as f64).collect()),
        ProcessKind::Ddpm => {
            let big_t = process.steps();
            if steps > big_t {
                return Err(Error::Config(format!("{steps} sampler steps exceed T = {big_t}")));
            }
            Ok((0..=steps)
                .map(|k| (big_t as f64 * (1.0 - k as f64 / steps as f64)).round())
                .collect())
        }
    }
}

/// Integrate from the given noise points to data space.
pub fn sample_from(
    net: &impl ConditionalModel,
    process: &NoiseProcess,
    cfg: &SamplerConfig,
    x_init: Tensor,
    classes: &[usize],
) -> Result<Tensor> {
    let n = x_init.dims2()?.0;
    if classes.len() != n {
        return Err(Error::dim("sample", format!("{n} points, {} classes", classes.len())));
    }
    let grid = time_grid(process, cfg.steps)?;
    match process.kind() {
        ProcessKind::FlowMatching => heun_integrate(
            |x, t| cfg_predict(net, x, &vec![t * FM_TIME_SCALE; n], classes, cfg.guidance_w),
            x_init,
            &grid,
        ),
        ProcessKind::Ddpm => {
            // Probability-flow ODE in the scaled variable y = x/√ᾱ, which
            // moves with velocity ε̂ as σ = √((1-ᾱ)/ᾱ) decreases to zero.
            let sigmas: Vec<f64> = grid.iter().map(|&t| process.ddpm_sigma(t as usize)).collect();
            let scale0 = process.alpha_bar(grid[0] as usize)?.sqrt();
            let y0 = x_init.map(|v| v / scale0);
            heun_integrate(
                |y, sigma| {
                    let a = 1.0 / (1.0 + sigma * sigma).sqrt();
                    let t = process.ddpm_time_for_sigma(sigma);
                    cfg_predict(net, &y.map(|v| v * a), &vec![t; n], classes, cfg.guidance_w)
                },
                y0,
                &sigmas,
            )
        }
    }
}

/// Draw `n` standard Gaussian starting points and integrate them.
pub fn sample(
    net: &impl ConditionalModel,
    process: &NoiseProcess,
    cfg: &SamplerConfig,
    data_dim: usize,
    classes: &[usize],
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let n = classes.len();
    if n == 0 {
        return Err(Error::Precondition("nothing to sample".into()));
    }
    let x = Tensor::matrix(n, data_dim, normals(rng, n * data_dim))?;
    sample_from(net, process, cfg, x, classes)
}
