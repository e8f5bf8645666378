//! Finite-difference checks of every differentiable operation.

use rand::{Rng, SeedableRng};

use crate::denoiser::{Denoiser, DenoiserShape};
use crate::error::Result;
use crate::process::diff_loss;
use crate::repulsor::{dispersive_loss_bank, dispersive_loss_inbatch, project, total_loss, ProjectionHead};
use crate::rng::{normals, StreamRng};
use crate::tensor::{central_difference, normwise_rel_err, GradCheck, Tape, Tensor, Var};

pub const ATOMIC_TOL: f64 = 1e-6;
pub const NETWORK_TOL: f64 = 1e-5;
pub const FD_STEP: f64 = 1e-6;

type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

fn uniform(rng: &mut StreamRng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("non-empty shape")
}

fn unit_rows(rng: &mut StreamRng, n: usize, d: usize) -> Tensor {
    let mut v = normals(rng, n * d);
    for r in v.chunks_mut(d) {
        let s = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        r.iter_mut().for_each(|x| *x /= s);
    }
    Tensor::matrix(n, d, v).expect("bank shape")
}

/// Contract a non-scalar output with fixed weights so every entry is tested.
fn scalarize(tape: &mut Tape, out: Var) -> Result<Var> {
    let v = tape.value(out);
    if v.is_scalar() {
        return Ok(out);
    }
    let shape = v.shape().to_vec();
    let mut rng = StreamRng::seed_from_u64(shape.iter().product::<usize>() as u64);
    let w = tape.constant(uniform(&mut rng, &shape, -1.0, 1.0));
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

fn eval(build: &Build, inputs: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let s = scalarize(&mut tape, out)?;
    tape.value(s).item()
}

/// Compare autodiff against central differences for every input in `wrt`.
fn check(name: &str, inputs: Vec<Tensor>, wrt: &[usize], tol: f64, build: &Build) -> Result<GradCheck> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().enumerate().map(|(i, t)| tape.leaf(t.clone(), wrt.contains(&i))).collect();
    let out = build(&mut tape, &vars)?;
    let s = scalarize(&mut tape, out)?;
    tape.backward(s)?;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for &i in wrt {
        analytic.extend_from_slice(tape.grad(vars[i]).expect("requires grad").data());
        let mut err = None;
        let fd = central_difference(
            |x| {
                let mut probe = inputs.clone();
                probe[i] = x.clone();
                eval(build, &probe).unwrap_or_else(|e| {
                    err = Some(e);
                    f64::NAN
                })
            },
            &inputs[i],
            FD_STEP,
        );
        if let Some(e) = err {
            return Err(e);
        }
        numeric.extend_from_slice(fd.data());
    }
    Ok(GradCheck { name: name.to_string(), rel_err: normwise_rel_err(&analytic, &numeric), tol })
}

fn full_network(rng: &mut StreamRng) -> Result<GradCheck> {
    let shape = DenoiserShape { data_dim: 2, hidden: 16, blocks: 6, tap_index: 4, n_classes: 3 };
    let mut net = Denoiser::init(shape, rng)?;
    // a zero output layer would hide every upstream gradient
    net.out_proj.weight = uniform(rng, &[16, 2], -0.5, 0.5);
    for p in net.params_mut() {
        let noise = uniform(rng, p.shape(), -0.2, 0.2);
        p.data_mut().iter_mut().zip(noise.data()).for_each(|(a, b)| *a += b);
    }
    let head = ProjectionHead::init(16, 8, rng);
    let b = 6;
    let xt = uniform(rng, &[b, 2], -2.0, 2.0);
    let target = uniform(rng, &[b, 2], -1.0, 1.0);
    let t: Vec<f64> = (0..b).map(|_| rng.random_range(0.0..1000.0)).collect();
    let c: Vec<usize> = (0..b).map(|i| i % 4).collect();
    let bank = unit_rows(rng, 20, 8);

    let loss = |net: &Denoiser, head: &ProjectionHead, tape: &mut Tape, trainable: bool| -> Result<(Var, Vec<Var>)> {
        let vars = net.bind(tape, trainable);
        let hv = head.bind(tape, trainable);
        let x = tape.constant(xt.clone());
        let (pred, h) = net.forward_with_tap(tape, &vars, x, &t, &c)?;
        let z = project(tape, head, &hv, h)?;
        let m = tape.constant(bank.clone());
        let ld = dispersive_loss_bank(tape, z, m, 0.5)?;
        let y = tape.constant(target.clone());
        let lf = diff_loss(tape, pred, y)?;
        let mut leaves = vars.leaves();
        leaves.extend([hv.weight, hv.bias]);
        Ok((total_loss(tape, lf, ld, 0.25)?, leaves))
    };

    let mut tape = Tape::new();
    let (l, leaves) = loss(&net, &head, &mut tape, true)?;
    tape.backward(l)?;
    let mut analytic = Vec::new();
    for v in &leaves {
        analytic.extend_from_slice(tape.grad(*v).expect("trainable").data());
    }

    let n_net = net.params().len();
    let mut numeric = Vec::new();
    for k in 0..leaves.len() {
        let base = if k < n_net { net.params()[k].1.clone() } else if k == n_net { head.weight.clone() } else { head.bias.clone() };
        let fd = central_difference(
            |x| {
                let mut n2 = net.clone();
                let mut h2 = head.clone();
                if k < n_net {
                    *n2.params_mut()[k] = x.clone();
                } else {
                    *h2.params_mut()[k - n_net] = x.clone();
                }
                let mut tape = Tape::new();
                match loss(&n2, &h2, &mut tape, false) {
                    Ok((l, _)) => tape.value(l).data()[0],
                    Err(_) => f64::NAN,
                }
            },
            &base,
            FD_STEP,
        );
        numeric.extend_from_slice(fd.data());
    }
    Ok(GradCheck {
        name: "denoiser_6_blocks".into(),
        rel_err: normwise_rel_err(&analytic, &numeric),
        tol: NETWORK_TOL,
    })
}

/// Run every check with inputs drawn from `seed`.
pub fn run_grad_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = StreamRng::seed_from_u64(seed);
    let r = &mut rng;
    let a = ATOMIC_TOL;
    let mut out = Vec::new();

    out.push(check("matmul", vec![uniform(r, &[4, 3], -1.0, 1.0), uniform(r, &[3, 5], -1.0, 1.0)], &[0, 1], a, &|t, v| {
        t.matmul(v[0], v[1])
    })?);
    let pair = |r: &mut StreamRng| vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0)];
    out.push(check("add", pair(r), &[0, 1], a, &|t, v| t.add(v[0], v[1]))?);
    out.push(check("sub", pair(r), &[0, 1], a, &|t, v| t.sub(v[0], v[1]))?);
    out.push(check("mul", pair(r), &[0, 1], a, &|t, v| t.mul(v[0], v[1]))?);
    out.push(check(
        "mul_scalar_broadcast",
        vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[], -1.0, 1.0)],
        &[0, 1],
        a,
        &|t, v| t.mul(v[0], v[1]),
    )?);
    out.push(check(
        "add_scalar_broadcast",
        vec![uniform(r, &[], -1.0, 1.0), uniform(r, &[2, 5], -1.0, 1.0)],
        &[0, 1],
        a,
        &|t, v| t.add(v[0], v[1]),
    )?);
    let one = |r: &mut StreamRng| vec![uniform(r, &[3, 4], -2.0, 2.0)];
    out.push(check("neg", one(r), &[0], a, &|t, v| Ok(t.neg(v[0])))?);
    out.push(check("exp", one(r), &[0], a, &|t, v| Ok(t.exp(v[0])))?);
    out.push(check("log", vec![uniform(r, &[3, 4], 0.5, 2.0)], &[0], a, &|t, v| t.log(v[0]))?);
    out.push(check("silu", one(r), &[0], a, &|t, v| Ok(t.silu(v[0])))?);
    out.push(check("scale", one(r), &[0], a, &|t, v| Ok(t.scale(v[0], -1.7)))?);
    out.push(check("shift", one(r), &[0], a, &|t, v| Ok(t.shift(v[0], 0.3)))?);
    out.push(check("add_row", vec![uniform(r, &[4, 3], -1.0, 1.0), uniform(r, &[3], -1.0, 1.0)], &[0, 1], a, &|t, v| {
        t.add_row(v[0], v[1])
    })?);
    out.push(check("gather_rows", vec![uniform(r, &[5, 3], -1.0, 1.0)], &[0], a, &|t, v| {
        t.gather_rows(v[0], &[0, 2, 2, 4, 1])
    })?);
    out.push(check("sum", one(r), &[0], a, &|t, v| Ok(t.sum(v[0])))?);
    out.push(check("mean", one(r), &[0], a, &|t, v| Ok(t.mean(v[0])))?);
    out.push(check("reshape", vec![uniform(r, &[2, 3, 4], -1.0, 1.0)], &[0], a, &|t, v| t.reshape(v[0], vec![6, 4]))?);
    out.push(check("l2_normalize_rows", vec![uniform(r, &[5, 4], -1.0, 1.0)], &[0], a, &|t, v| {
        t.l2_normalize_rows(v[0])
    })?);
    out.push(check(
        "pairwise_sqdist",
        vec![uniform(r, &[4, 3], -1.0, 1.0), uniform(r, &[6, 3], -1.0, 1.0)],
        &[0],
        a,
        &|t, v| t.pairwise_sqdist(v[0], v[1]),
    )?);
    out.push(check("pairwise_sqdist_self", vec![uniform(r, &[5, 3], -1.0, 1.0)], &[0], a, &|t, v| {
        t.pairwise_sqdist_self(v[0])
    })?);
    out.push(check(
        "sqdist_log_mean_exp",
        vec![uniform(r, &[4, 3], -1.0, 1.0), uniform(r, &[7, 3], -1.0, 1.0)],
        &[0],
        a,
        &|t, v| t.sqdist_log_mean_exp(v[0], v[1], -1.3),
    )?);
    out.push(check("log_mean_exp", vec![uniform(r, &[4, 6], -3.0, 3.0)], &[0], a, &|t, v| Ok(t.log_mean_exp(v[0])))?);

    let head_in = |r: &mut StreamRng| {
        vec![uniform(r, &[4, 2, 3], -1.0, 1.0), uniform(r, &[6, 5], -1.0, 1.0), uniform(r, &[5], -0.5, 0.5)]
    };
    out.push(check("projection", head_in(r), &[0, 1, 2], a, &|t, v| {
        let head = ProjectionHead { weight: t.value(v[1]).clone(), bias: t.value(v[2]).clone() };
        project(t, &head, &crate::repulsor::HeadVars { weight: v[1], bias: v[2] }, v[0])
    })?);

    let bank = unit_rows(r, 12, 5);
    out.push(check("dispersive_loss_bank", vec![uniform(r, &[4, 5], -1.0, 1.0), bank], &[0], a, &|t, v| {
        let z = t.l2_normalize_rows(v[0])?;
        dispersive_loss_bank(t, z, v[1], 0.5)
    })?);
    out.push(check("dispersive_loss_inbatch", vec![uniform(r, &[5, 4], -1.0, 1.0)], &[0], a, &|t, v| {
        let z = t.l2_normalize_rows(v[0])?;
        dispersive_loss_inbatch(t, z, 0.5)
    })?);
    out.push(check(
        "diff_loss",
        vec![uniform(r, &[4, 2], -1.0, 1.0), uniform(r, &[4, 2], -1.0, 1.0)],
        &[0],
        a,
        &|t, v| diff_loss(t, v[0], v[1]),
    )?);
    out.push(check(
        "total_loss",
        vec![uniform(r, &[], 0.0, 1.0), uniform(r, &[], -2.0, 0.0)],
        &[0, 1],
        a,
        &|t, v| total_loss(t, v[0], v[1], 0.25),
    )?);

    out.push(full_network(r)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let checks = run_grad_suite(7).unwrap();
        assert!(checks.len() > 20);
        for c in &checks {
            assert!(c.passed(), "{} rel err {:e}", c.name, c.rel_err);
        }
    }
}
