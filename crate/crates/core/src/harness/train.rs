//! The training loop.
//!
//! Per step: forward to the tap, project, enqueue into the bank, dispersive
//! loss against the bank, finish the forward pass, diffusion loss, weighted
//! sum, backward, optimizer update.

use std::time::Instant;

use rand::{Rng, SeedableRng};

use crate::denoiser::{Denoiser, DenoiserShape};
use crate::error::{Error, Result};
use crate::metrics::{dispersion_diagnostic, energy_distance, mode_coverage, sliced_wasserstein, SampleSet};
use crate::process::{diff_loss, NoiseProcess};
use crate::repulsor::{dispersive_loss_bank, dispersive_loss_inbatch, project, total_loss, MemoryBank, ProjectionHead};
use crate::rng::{normals, streams, Seed, StreamRng};
use crate::sampler::SamplerConfig;
use crate::tensor::{Tape, Tensor, Var};

use super::checkpoint::Checkpoint;
use super::config::{Regularizer, RunConfig};
use super::data::{draw_dataset, make_dataset, Standardizer};
use super::model::TrainedModel;
use super::optim::{optimizer_step, AdamState};
use super::runlog::{LogRow, RunLog};

/// Observable milestones inside one step, in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepEvent {
    TapFeature,
    Projection,
    Enqueue,
    DispersiveLoss,
    Prediction,
    DiffusionLoss,
    TotalLoss,
    Backward,
    OptimizerStep,
}

/// What backward did to the bank, recorded only while probing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BankProbe {
    pub grad_max_abs: f64,
    pub bytes_unchanged: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss_diff: f64,
    pub loss_disp: f64,
    pub loss_total: f64,
    pub bank_probe: Option<BankProbe>,
}

struct Batch {
    xt: Tensor,
    target: Tensor,
    model_time: Vec<f64>,
    classes: Vec<usize>,
}

/// Fixed evaluation inputs, drawn once per run from the eval stream.
struct EvalContext {
    reference: SampleSet,
    noise: Tensor,
    classes: Vec<usize>,
    probe: Batch,
    metric_seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics {
    pub swd: f64,
    pub energy_dist: f64,
    pub mean_pairwise_cos: f64,
    pub uniformity: f64,
    pub modes_covered: usize,
}

pub struct Trainer {
    cfg: RunConfig,
    process: NoiseProcess,
    net: Denoiser,
    head: ProjectionHead,
    bank: Option<MemoryBank>,
    adam: AdamState,
    train_x: Tensor,
    train_y: Vec<usize>,
    scaler: Standardizer,
    batch_rng: StreamRng,
    eval: EvalContext,
    step: usize,
    probe_bank: bool,
}

fn rows(x: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let d = x.dims2()?.1;
    let mut out = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        out.extend_from_slice(x.row(i));
    }
    Tensor::matrix(idx.len(), d, out)
}

fn draw_batch(
    process: &NoiseProcess,
    x: &Tensor,
    y: &[usize],
    b: usize,
    drop: Option<(f64, usize)>,
    rng: &mut StreamRng,
) -> Result<Batch> {
    let n = y.len();
    let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..n)).collect();
    let x0 = rows(x, &idx)?;
    let d = x0.dims2()?.1;
    let eps = Tensor::matrix(b, d, normals(rng, b * d))?;
    let c = process.corrupt(&x0, &eps, rng)?;
    let mut classes: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
    if let Some((p, null)) = drop {
        for k in classes.iter_mut() {
            if rng.random::<f64>() < p {
                *k = null;
            }
        }
    }
    Ok(Batch { xt: c.xt, target: c.target, model_time: c.model_time, classes })
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let seed = Seed(cfg.seed);
        let process = cfg.process.build()?;
        let data = make_dataset(cfg.dataset, cfg.n_train, cfg.seed, true)?;
        let scaler = Standardizer::fit(&data.points)?;
        let train_x = scaler.forward(&data.points)?;
        let train_y = data.labels.expect("labelled training set");

        let n_classes = cfg.dataset.n_classes();
        let shape = DenoiserShape {
            data_dim: cfg.dataset.data_dim(),
            hidden: cfg.model.hidden,
            blocks: cfg.model.blocks,
            tap_index: cfg.model.tap_index,
            n_classes,
        };
        let mut init = seed.stream(streams::INIT);
        let net = Denoiser::init(shape, &mut init)?;
        let head = ProjectionHead::init(cfg.model.hidden, cfg.repulsor.proj_dim, &mut init);
        let bank = match cfg.regularizer {
            Regularizer::Repulsor => Some(MemoryBank::new(cfg.repulsor.bank_size, cfg.repulsor.proj_dim)?),
            _ => None,
        };

        let mut er = seed.stream(streams::EVAL);
        let reference = draw_dataset(cfg.dataset, cfg.eval.n_samples, &mut er)?;
        let ns = cfg.eval.n_samples;
        let d = shape.data_dim;
        let noise = Tensor::matrix(ns, d, normals(&mut er, ns * d))?;
        let classes = (0..ns).map(|i| i % n_classes).collect();
        let probe = draw_batch(&process, &train_x, &train_y, cfg.batch_size, None, &mut er)?;
        let metric_seed = er.random();

        let mut t = Self {
            adam: AdamState { step: 0, m: Vec::new(), v: Vec::new() },
            cfg,
            process,
            net,
            head,
            bank,
            train_x,
            train_y,
            scaler,
            batch_rng: seed.stream(streams::BATCH),
            eval: EvalContext { reference, noise, classes, probe, metric_seed },
            step: 0,
            probe_bank: false,
        };
        t.adam = AdamState::new(&t.all_params_mut());
        Ok(t)
    }

    fn all_params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.net.params_mut();
        v.extend(self.head.params_mut());
        v
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn denoiser(&self) -> &Denoiser {
        &self.net
    }

    pub fn head(&self) -> &ProjectionHead {
        &self.head
    }

    pub fn bank(&self) -> Option<&MemoryBank> {
        self.bank.as_ref()
    }

    /// Record bank gradients and bytes around every backward pass.
    pub fn set_bank_probe(&mut self, on: bool) {
        self.probe_bank = on;
    }

    pub fn step(&mut self) -> Result<StepStats> {
        self.step_observed(&mut |_| {})
    }

    pub fn step_observed(&mut self, obs: &mut dyn FnMut(StepEvent)) -> Result<StepStats> {
        let cfg = &self.cfg;
        let dropout = Some((cfg.drop_prob, self.net.null_class()));
        let batch = draw_batch(&self.process, &self.train_x, &self.train_y, cfg.batch_size, dropout, &mut self.batch_rng)?;

        let mut tape = Tape::new();
        let vars = self.net.bind(&mut tape, true);
        let xt = tape.constant(batch.xt);
        let tapped = self.net.forward_to_tap(&mut tape, &vars, xt, &batch.model_time, &batch.classes)?;
        obs(StepEvent::TapFeature);

        let mut head_vars = None;
        let mut bank_var = None;
        let mut l_disp: Option<Var> = None;
        if cfg.regularizer != Regularizer::None {
            let hv = self.head.bind(&mut tape, true);
            let z = project(&mut tape, &self.head, &hv, tapped.h_tap)?;
            head_vars = Some(hv);
            obs(StepEvent::Projection);
            l_disp = Some(match self.bank.as_mut() {
                Some(bank) => {
                    bank.enqueue(tape.value(z))?;
                    obs(StepEvent::Enqueue);
                    let m = bank.leaf(&mut tape, self.probe_bank)?;
                    bank_var = Some(m);
                    dispersive_loss_bank(&mut tape, z, m, cfg.repulsor.tau)?
                }
                None => dispersive_loss_inbatch(&mut tape, z, cfg.repulsor.tau)?,
            });
            obs(StepEvent::DispersiveLoss);
        }

        let pred = self.net.forward_from_tap(&mut tape, &vars, tapped)?;
        obs(StepEvent::Prediction);
        let target = tape.constant(batch.target);
        let l_diff = diff_loss(&mut tape, pred, target)?;
        obs(StepEvent::DiffusionLoss);
        let total = match l_disp {
            Some(ld) => total_loss(&mut tape, l_diff, ld, cfg.repulsor.gamma)?,
            None => l_diff,
        };
        obs(StepEvent::TotalLoss);

        let before: Option<Vec<u64>> = match (&self.bank, self.probe_bank) {
            (Some(b), true) => Some(b.raw_slots().iter().map(|v| v.to_bits()).collect()),
            _ => None,
        };
        tape.backward(total)?;
        obs(StepEvent::Backward);
        let bank_probe = match (before, bank_var, &self.bank) {
            (Some(before), Some(m), Some(b)) => Some(BankProbe {
                grad_max_abs: tape.grad(m).map(|g| g.max_abs()).unwrap_or(f64::NAN),
                bytes_unchanged: b.raw_slots().iter().map(|v| v.to_bits()).eq(before),
            }),
            _ => None,
        };

        let mut leaves = vars.leaves();
        if let Some(hv) = head_vars {
            leaves.extend([hv.weight, hv.bias]);
        }
        let mut grads: Vec<Tensor> = leaves
            .iter()
            .map(|&v| tape.grad(v).cloned().ok_or_else(|| Error::Precondition("missing gradient".into())))
            .collect::<Result<_>>()?;
        if head_vars.is_none() {
            grads.push(Tensor::zeros(self.head.weight.shape()));
            grads.push(Tensor::zeros(self.head.bias.shape()));
        }
        let stats = StepStats {
            loss_diff: tape.value(l_diff).item()?,
            loss_disp: l_disp.map(|v| tape.value(v).item()).transpose()?.unwrap_or(0.0),
            loss_total: tape.value(total).item()?,
            bank_probe,
        };
        drop(tape);

        let optim = self.cfg.optim;
        let mut adam = std::mem::replace(&mut self.adam, AdamState { step: 0, m: Vec::new(), v: Vec::new() });
        let grad_refs: Vec<&Tensor> = grads.iter().collect();
        let res = optimizer_step(&mut self.all_params_mut(), &grad_refs, &mut adam, &optim);
        self.adam = adam;
        res?;
        obs(StepEvent::OptimizerStep);
        self.step += 1;
        Ok(stats)
    }

    /// Forward-only losses on the fixed probe batch, as if it were the next step.
    pub fn probe_losses(&self) -> Result<(f64, f64, f64)> {
        let p = &self.eval.probe;
        let mut tape = Tape::new();
        let vars = self.net.bind(&mut tape, false);
        let xt = tape.constant(p.xt.clone());
        let (pred, h) = self.net.forward_with_tap(&mut tape, &vars, xt, &p.model_time, &p.classes)?;
        let target = tape.constant(p.target.clone());
        let l_diff = diff_loss(&mut tape, pred, target)?;
        let l_diff = tape.value(l_diff).item()?;
        let tau = self.cfg.repulsor.tau;
        let l_disp = match self.cfg.regularizer {
            Regularizer::None => 0.0,
            reg => {
                let hv = self.head.bind(&mut tape, false);
                let z = project(&mut tape, &self.head, &hv, h)?;
                let v = if reg == Regularizer::Repulsor {
                    let mut bank = self.bank.clone().expect("repulsor bank");
                    bank.enqueue(tape.value(z))?;
                    let m = bank.leaf(&mut tape, false)?;
                    dispersive_loss_bank(&mut tape, z, m, tau)?
                } else {
                    dispersive_loss_inbatch(&mut tape, z, tau)?
                };
                tape.value(v).item()?
            }
        };
        let gamma = if self.cfg.regularizer == Regularizer::None { 0.0 } else { self.cfg.repulsor.gamma };
        Ok((l_diff, l_disp, l_diff + gamma * l_disp))
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig { steps: self.cfg.sampler_steps, guidance_w: self.cfg.guidance_w }
    }

    pub fn evaluate(&self) -> Result<EvalMetrics> {
        let e = &self.eval;
        let model = self.snapshot();
        let x = model.generate_from(&self.sampler_config(), e.noise.clone(), &e.classes)?;
        let samples = SampleSet::new(x, Some(e.classes.clone()))?;
        let mut mrng = StreamRng::seed_from_u64(e.metric_seed);
        let swd = sliced_wasserstein(&samples, &e.reference, self.cfg.eval.n_projections, &mut mrng)?;
        let energy_dist = energy_distance(&samples, &e.reference)?;
        let modes_covered = match self.cfg.dataset.modes() {
            Some((centers, radius)) => mode_coverage(&samples, &centers, radius)?.covered,
            None => 0,
        };
        let h = self.net.tap_features(&e.probe.xt, &e.probe.model_time, &e.probe.classes)?;
        let disp = dispersion_diagnostic(&self.head.project_values(&h)?)?;
        Ok(EvalMetrics {
            swd,
            energy_dist,
            mean_pairwise_cos: disp.mean_pairwise_cos,
            uniformity: disp.uniformity,
            modes_covered,
        })
    }

    /// Copy of the current parameters as a self-contained model.
    pub fn snapshot(&self) -> TrainedModel {
        TrainedModel {
            denoiser: self.net.clone(),
            head: self.head.clone(),
            process: self.process.clone(),
            scaler: self.scaler.clone(),
            steps_trained: self.step,
        }
    }
}

pub struct TrainOutput {
    pub model: TrainedModel,
    pub log: RunLog,
    pub checkpoint: Checkpoint,
}

pub fn train(cfg: RunConfig) -> Result<TrainOutput> {
    train_with(cfg, |_| {})
}

/// Train, calling `on_row` after each logged row.
pub fn train_with(cfg: RunConfig, mut on_row: impl FnMut(&LogRow)) -> Result<TrainOutput> {
    let mut tr = Trainer::new(cfg)?;
    let cfg = tr.config().clone();
    let start = Instant::now();
    let clock = |s: &Instant| if cfg.eval.record_wallclock { s.elapsed().as_secs_f64() } else { 0.0 };
    let mut log = RunLog::new();

    let row = |step: usize, losses: (f64, f64, f64), m: EvalMetrics, wall: f64| LogRow {
        step,
        loss_diff: losses.0,
        loss_disp: losses.1,
        loss_total: losses.2,
        swd: m.swd,
        energy_dist: m.energy_dist,
        mean_pairwise_cos: m.mean_pairwise_cos,
        uniformity: m.uniformity,
        modes_covered: m.modes_covered,
        wallclock_seconds: wall,
    };

    let r0 = row(0, tr.probe_losses()?, tr.evaluate()?, clock(&start));
    on_row(&r0);
    log.push(r0)?;

    let mut acc = (0.0, 0.0, 0.0);
    let mut count = 0usize;
    for s in 1..=cfg.steps {
        let st = tr.step()?;
        acc.0 += st.loss_diff;
        acc.1 += st.loss_disp;
        acc.2 += st.loss_total;
        count += 1;
        if s % cfg.eval.every == 0 || s == cfg.steps {
            let n = count as f64;
            let r = row(s, (acc.0 / n, acc.1 / n, acc.2 / n), tr.evaluate()?, clock(&start));
            on_row(&r);
            log.push(r)?;
            acc = (0.0, 0.0, 0.0);
            count = 0;
        }
    }
    let model = tr.snapshot();
    let checkpoint = model.to_checkpoint();
    Ok(TrainOutput { model, log, checkpoint })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(reg: Regularizer) -> RunConfig {
        let mut c = RunConfig::from_text(
            "model.hidden = 16\nmodel.blocks = 3\ntrain.batch_size = 16\nrepulsor.K = 64\nrepulsor.D = 8\n\
             train.steps = 30\neval.every = 10\neval.n_samples = 64\neval.n_projections = 8\n\
             sampler.steps = 4\ndata.n_train = 256\neval.wallclock = false\noptim.lr = 0.01",
        )
        .unwrap();
        c.regularizer = reg;
        c
    }

    #[test]
    fn event_order_per_step() {
        use StepEvent::*;
        let mut tr = Trainer::new(tiny(Regularizer::Repulsor)).unwrap();
        for _ in 0..3 {
            let mut ev = Vec::new();
            tr.step_observed(&mut |e| ev.push(e)).unwrap();
            assert_eq!(
                ev,
                [TapFeature, Projection, Enqueue, DispersiveLoss, Prediction, DiffusionLoss, TotalLoss, Backward, OptimizerStep]
            );
        }
        let mut tr = Trainer::new(tiny(Regularizer::None)).unwrap();
        let mut ev = Vec::new();
        tr.step_observed(&mut |e| ev.push(e)).unwrap();
        assert_eq!(ev, [TapFeature, Prediction, DiffusionLoss, TotalLoss, Backward, OptimizerStep]);
    }

    #[test]
    fn bank_receives_no_gradient() {
        let mut tr = Trainer::new(tiny(Regularizer::Repulsor)).unwrap();
        tr.set_bank_probe(true);
        for _ in 0..6 {
            let p = tr.step().unwrap().bank_probe.unwrap();
            assert_eq!(p.grad_max_abs, 0.0);
            assert!(p.bytes_unchanged);
        }
    }

    #[test]
    fn losses_are_bounded() {
        let out = train(tiny(Regularizer::Repulsor)).unwrap();
        for r in out.log.rows() {
            assert!(r.loss_disp <= 1e-12 && r.loss_disp >= -4.0 / 0.5 - 1e-12, "{}", r.loss_disp);
            assert!(r.loss_diff > 0.0);
        }
        assert_eq!(out.log.rows().iter().map(|r| r.step).collect::<Vec<_>>(), [0, 10, 20, 30]);
    }

    #[test]
    fn zero_weight_is_transparent() {
        let mut c = tiny(Regularizer::Repulsor);
        c.repulsor.gamma = 0.0;
        let a = train(c).unwrap();
        let b = train(tiny(Regularizer::None)).unwrap();
        let da: Vec<u64> = a.log.rows().iter().map(|r| r.loss_diff.to_bits()).collect();
        let db: Vec<u64> = b.log.rows().iter().map(|r| r.loss_diff.to_bits()).collect();
        assert_eq!(da, db);
        assert_eq!(a.model.denoiser, b.model.denoiser);
    }

    #[test]
    fn rejects_small_bank_before_training() {
        let mut c = tiny(Regularizer::Repulsor);
        c.repulsor.bank_size = 8;
        assert!(matches!(Trainer::new(c), Err(Error::Config(_))));
    }
}
