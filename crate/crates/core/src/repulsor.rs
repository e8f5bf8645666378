//! Projection head, FIFO memory bank and the dispersive objectives.
//!
//! The bank-based loss for a batch of projections `z` against the bank
//! entries `m` is
//!
//! ```text
//! L = log( 1/(B·K) · Σ_i Σ_k exp(-||z_i - sg(m_k)||² / τ) )
//! ```
//!
//! where `sg` cuts the gradient. The training loop enqueues the current
//! batch before evaluating it, so the batch always sees itself among the
//! negatives.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::normals;
use crate::tensor::{Tape, Tensor, Var};

/// Row-norm tolerance for values entering the bank.
pub const UNIT_TOL: f64 = 1e-9;

/// Dispersion hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RepulsorParams {
    pub tau: f64,
    pub gamma: f64,
    /// Bank capacity.
    pub bank_size: usize,
    /// Projection dimension.
    pub proj_dim: usize,
}

impl Default for RepulsorParams {
    fn default() -> Self {
        Self { tau: 0.5, gamma: 0.25, bank_size: 4096, proj_dim: 32 }
    }
}

impl RepulsorParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::Config(format!("gamma must be non-negative, got {}", self.gamma)));
        }
        if self.bank_size < 1 || self.proj_dim < 1 {
            return Err(Error::Config("bank size and projection dim must be >= 1".into()));
        }
        Ok(())
    }
}

/// Single linear layer followed by row-wise L2 normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead {
    /// `in_dim × D`.
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub weight: Var,
    pub bias: Var,
}

impl ProjectionHead {
    /// Gaussian weights with std `1/√in_dim`, zero bias.
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let std = 1.0 / (in_dim as f64).sqrt();
        let w = normals(rng, in_dim * out_dim).into_iter().map(|v| v * std).collect();
        Self {
            weight: Tensor::matrix(in_dim, out_dim, w).expect("head shape"),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> HeadVars {
        HeadVars {
            weight: tape.leaf(self.weight.clone(), trainable),
            bias: tape.leaf(self.bias.clone(), trainable),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }

    /// Value-only projection.
    pub fn project_values(&self, h: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let h = tape.constant(h.clone());
        let z = project(&mut tape, self, &vars, h)?;
        Ok(tape.value(z).clone())
    }
}

/// `z_i = normalize(W · flatten(h_i) + b)` for `h` of shape `B×H` or `B×P×H`.
pub fn project(tape: &mut Tape, head: &ProjectionHead, vars: &HeadVars, h: Var) -> Result<Var> {
    let shape = tape.value(h).shape().to_vec();
    let flat = match shape[..] {
        [_, _] => h,
        [b, ..] if shape.len() > 2 => tape.reshape(h, vec![b, shape[1..].iter().product()])?,
        _ => return Err(Error::dim("project", format!("features of shape {shape:?}"))),
    };
    let per_sample = tape.value(flat).shape()[1];
    if per_sample != head.in_dim() {
        return Err(Error::dim("project", format!("{per_sample} features, head expects {}", head.in_dim())));
    }
    let y = tape.matmul(flat, vars.weight)?;
    let y = tape.add_row(y, vars.bias)?;
    tape.l2_normalize_rows(y)
}

/// FIFO queue of `K` unit-norm negatives.
///
/// Slots are stored contiguously; `head` is the next slot to overwrite. While
/// the bank is filling, the valid slots are exactly `0..filled`.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    capacity: usize,
    dim: usize,
    slots: Vec<f64>,
    head: usize,
    filled: usize,
}

impl MemoryBank {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity < 1 || dim < 1 {
            return Err(Error::Config("memory bank needs K >= 1 and D >= 1".into()));
        }
        Ok(Self { capacity, dim, slots: vec![0.0; capacity * dim], head: 0, filled: 0 })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn head(&self) -> usize {
        self.head
    }

    pub fn filled(&self) -> usize {
        self.filled
    }

    pub fn is_empty(&self) -> bool {
        self.filled == 0
    }

    /// Floats held for negatives; always `K·D`.
    pub fn memory_floats(&self) -> usize {
        self.slots.len()
    }

    /// Raw slot storage, including unfilled slots.
    pub fn raw_slots(&self) -> &[f64] {
        &self.slots
    }

    /// Replace the `B` oldest entries with the rows of `z`, in order.
    pub fn enqueue(&mut self, z: &Tensor) -> Result<()> {
        let (b, d) = z.dims2()?;
        if d != self.dim {
            return Err(Error::dim("bank_enqueue", format!("rows of dim {d}, bank dim {}", self.dim)));
        }
        if b > self.capacity {
            return Err(Error::Config(format!("batch of {b} exceeds bank capacity {}", self.capacity)));
        }
        for r in 0..b {
            let n = z.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            if (n - 1.0).abs() > UNIT_TOL {
                return Err(Error::Precondition(format!("bank row {r} has norm {n}")));
            }
        }
        for r in 0..b {
            let at = self.head * d;
            self.slots[at..at + d].copy_from_slice(z.row(r));
            self.head = (self.head + 1) % self.capacity;
        }
        self.filled = (self.filled + b).min(self.capacity);
        Ok(())
    }

    /// Valid entries as a `filled × D` matrix in slot order.
    pub fn entries(&self) -> Result<Tensor> {
        if self.filled == 0 {
            return Err(Error::Precondition("memory bank is empty".into()));
        }
        Tensor::matrix(self.filled, self.dim, self.slots[..self.filled * self.dim].to_vec())
    }

    /// Valid entries, oldest first.
    pub fn oldest_first(&self) -> Vec<Vec<f64>> {
        let start = if self.filled < self.capacity { 0 } else { self.head };
        (0..self.filled)
            .map(|i| {
                let s = (start + i) % self.capacity;
                self.slots[s * self.dim..(s + 1) * self.dim].to_vec()
            })
            .collect()
    }

    /// Record the valid entries on `tape` as a leaf.
    ///
    /// `requires_grad` exists so tests can observe that no gradient ever
    /// reaches the bank; the training loop passes `false` unless probing.
    pub fn leaf(&self, tape: &mut Tape, requires_grad: bool) -> Result<Var> {
        Ok(tape.leaf(self.entries()?, requires_grad))
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 {
        Ok(())
    } else {
        Err(Error::Precondition(format!("temperature must be positive, got {tau}")))
    }
}

/// `log mean_{i,k} exp(-||z_i - sg(m_k)||² / τ)` against bank entries `bank`.
pub fn dispersive_loss_bank(tape: &mut Tape, z: Var, bank: Var, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let negatives = tape.detach(bank);
    tape.sqdist_log_mean_exp(z, negatives, -1.0 / tau)
}

/// `log mean_{i,j} exp(-||z_i - z_j||² / τ)` over all ordered pairs of the
/// batch, self-pairs included.
pub fn dispersive_loss_inbatch(tape: &mut Tape, z: Var, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let b = tape.value(z).dims2()?.0;
    if b < 2 {
        return Err(Error::Precondition(format!("in-batch dispersion needs B >= 2, got {b}")));
    }
    let d = tape.pairwise_sqdist_self(z)?;
    let logits = tape.scale(d, -1.0 / tau);
    Ok(tape.log_mean_exp(logits))
}

/// `l_diff + γ · l_disp`.
pub fn total_loss(tape: &mut Tape, l_diff: Var, l_disp: Var, gamma: f64) -> Result<Var> {
    if !(gamma >= 0.0) {
        return Err(Error::Precondition(format!("loss weight must be >= 0, got {gamma}")));
    }
    let w = tape.scale(l_disp, gamma);
    tape.add(l_diff, w)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Per-sample InfoNCE logits: `(positive, negatives)` with entries
/// `cos(z_i, ·) / τ`.
pub fn infonce_logits(z: &Tensor, z_pos: &Tensor, negatives: &Tensor, tau: f64) -> Result<Vec<(f64, Vec<f64>)>> {
    check_tau(tau)?;
    let (b, d) = z.dims2()?;
    let (n, dn) = negatives.dims2()?;
    if z_pos.shape() != z.shape() || dn != d {
        return Err(Error::dim("infonce", format!("{:?}, {:?}, {:?}", z.shape(), z_pos.shape(), negatives.shape())));
    }
    if n == 0 {
        return Err(Error::Precondition("InfoNCE needs at least one negative".into()));
    }
    Ok((0..b)
        .map(|i| {
            let pos = cosine(z.row(i), z_pos.row(i)) / tau;
            let negs = (0..n).map(|j| cosine(z.row(i), negatives.row(j)) / tau).collect();
            (pos, negs)
        })
        .collect())
}

/// InfoNCE with cosine similarity, positive included in the denominator.
pub fn infonce_reference(z: &Tensor, z_pos: &Tensor, negatives: &Tensor, tau: f64) -> Result<f64> {
    let logits = infonce_logits(z, z_pos, negatives, tau)?;
    let b = logits.len() as f64;
    Ok(logits
        .iter()
        .map(|(pos, negs)| {
            let denom: f64 = pos.exp() + negs.iter().map(|v| v.exp()).sum::<f64>();
            -(pos - denom.ln())
        })
        .sum::<f64>()
        / b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{streams, Seed};
    use proptest::prelude::*;

    fn unit_rows(rng: &mut impl Rng, b: usize, d: usize) -> Tensor {
        let mut t = Tensor::matrix(b, d, normals(rng, b * d)).unwrap();
        for r in t.data_mut().chunks_exact_mut(d) {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter_mut().for_each(|v| *v /= n);
        }
        t
    }

    fn bank_from(rows: &[Vec<f64>], capacity: usize) -> MemoryBank {
        let mut bank = MemoryBank::new(capacity, rows[0].len()).unwrap();
        bank.enqueue(&Tensor::from_rows(rows)).unwrap();
        bank
    }

    fn bank_loss(z: &Tensor, bank: &MemoryBank, tau: f64) -> f64 {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let m = bank.leaf(&mut tape, false).unwrap();
        let l = dispersive_loss_bank(&mut tape, zv, m, tau).unwrap();
        tape.value(l).item().unwrap()
    }

    fn inbatch_loss(z: &Tensor, tau: f64) -> Result<f64> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let l = dispersive_loss_inbatch(&mut tape, zv, tau)?;
        tape.value(l).item()
    }

    /// Plain double loop.
    fn brute_loss(z: &Tensor, m: &Tensor, tau: f64) -> f64 {
        let (b, d) = z.dims2().unwrap();
        let k = m.dims2().unwrap().0;
        let mut acc = 0.0;
        for i in 0..b {
            for j in 0..k {
                let mut s = 0.0;
                for c in 0..d {
                    s += (z.row(i)[c] - m.row(j)[c]).powi(2);
                }
                acc += (-s / tau).exp();
            }
        }
        (acc / (b * k) as f64).ln()
    }

    const E1: [f64; 2] = [1.0, 0.0];
    const E2: [f64; 2] = [0.0, 1.0];

    #[test]
    fn bank_loss_anchors() {
        let z = Tensor::from_rows(&[E1.to_vec()]);
        assert_eq!(bank_loss(&z, &bank_from(&[E1.to_vec()], 4), 0.5), 0.0);
        assert!((bank_loss(&z, &bank_from(&[E2.to_vec()], 4), 0.5) + 4.0).abs() < 1e-14);
        let z = Tensor::from_rows(&[E1.to_vec(), E2.to_vec()]);
        let expect = ((2.0 + 2.0 * (-2.0f64).exp()) / 4.0).ln();
        assert!((expect + 0.566_219).abs() < 1e-6);
        let got = bank_loss(&z, &bank_from(&[E1.to_vec(), E2.to_vec()], 2), 1.0);
        assert!((got - expect).abs() < 1e-14);
        assert!((got - brute_loss(&z, &z, 1.0)).abs() < 1e-14);
    }

    #[test]
    fn inbatch_loss_anchors() {
        let z = Tensor::from_rows(&[E1.to_vec(), E2.to_vec()]);
        let expect = ((2.0 + 2.0 * (-2.0f64).exp()) / 4.0).ln();
        assert!((inbatch_loss(&z, 1.0).unwrap() - expect).abs() < 1e-14);
        let same = Tensor::from_rows(&vec![vec![0.6, 0.8]; 3]);
        assert_eq!(inbatch_loss(&same, 0.5).unwrap(), 0.0);
        assert!(matches!(inbatch_loss(&Tensor::from_rows(&[E1.to_vec()]), 1.0), Err(Error::Precondition(_))));
    }

    #[test]
    fn separating_a_coincident_pair_lowers_inbatch_loss() {
        let c = vec![0.0, 0.0, 1.0];
        let before = Tensor::from_rows(&[E1.iter().copied().chain([0.0]).collect(), c.clone(), c.clone()]);
        let a = 0.3f64;
        let moved = vec![a.sin(), 0.0, a.cos()];
        let after = Tensor::from_rows(&[E1.iter().copied().chain([0.0]).collect(), c, moved]);
        assert!(inbatch_loss(&after, 0.5).unwrap() < inbatch_loss(&before, 0.5).unwrap());
    }

    #[test]
    fn empty_bank_and_bad_tau_are_precondition_errors() {
        let bank = MemoryBank::new(4, 2).unwrap();
        let mut tape = Tape::new();
        assert!(matches!(bank.leaf(&mut tape, false), Err(Error::Precondition(_))));
        let z = tape.constant(Tensor::from_rows(&[E1.to_vec()]));
        let m = tape.constant(Tensor::from_rows(&[E2.to_vec()]));
        assert!(matches!(dispersive_loss_bank(&mut tape, z, m, 0.0), Err(Error::Precondition(_))));
    }

    #[test]
    fn fifo_replaces_oldest() {
        let rows: Vec<Vec<f64>> = (0..6).map(|i| vec![(i as f64).cos(), (i as f64).sin()]).collect();
        let mut bank = bank_from(&rows[0..4], 4);
        assert_eq!(bank.filled(), 4);
        assert_eq!(bank.oldest_first(), rows[0..4].to_vec());
        bank.enqueue(&Tensor::from_rows(&rows[4..6])).unwrap();
        assert_eq!(bank.oldest_first(), rows[2..6].to_vec());
        assert_eq!(bank.head(), 2);
    }

    #[test]
    fn enqueue_rejects_oversized_or_unnormalized() {
        let mut bank = MemoryBank::new(2, 2).unwrap();
        let three = Tensor::from_rows(&[E1.to_vec(), E2.to_vec(), E1.to_vec()]);
        assert!(matches!(bank.enqueue(&three), Err(Error::Config(_))));
        assert!(matches!(bank.enqueue(&Tensor::from_rows(&[vec![2.0, 0.0]])), Err(Error::Precondition(_))));
        assert!(bank.enqueue(&Tensor::from_rows(&[vec![1.0, 0.0, 0.0]])).is_err());
    }

    #[test]
    fn memory_is_capacity_times_dim() {
        let mut bank = MemoryBank::new(64, 8).unwrap();
        let mut rng = Seed(1).stream(streams::EVAL);
        for b in [1, 8, 32] {
            bank.enqueue(&unit_rows(&mut rng, b, 8)).unwrap();
            assert_eq!(bank.memory_floats(), 64 * 8);
        }
    }

    #[test]
    fn identity_head_passes_unit_features_through() {
        let mut head = ProjectionHead::init(4, 4, &mut Seed(0).stream(streams::INIT));
        head.weight = Tensor::eye(4);
        let h = Tensor::from_rows(&[vec![0.5, 0.5, 0.5, 0.5], vec![0.0, 0.0, 1.0, 0.0]]);
        let z = head.project_values(&h).unwrap();
        assert_eq!(z, h);
    }

    #[test]
    fn head_output_is_unit_norm_and_flattens_patches() {
        let mut rng = Seed(4).stream(streams::INIT);
        let head = ProjectionHead::init(6, 3, &mut rng);
        let h = Tensor::new(vec![5, 2, 3], normals(&mut rng, 30)).unwrap();
        let z = head.project_values(&h).unwrap();
        assert_eq!(z.shape(), &[5, 3]);
        for r in 0..5 {
            let n = z.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
        assert!(head.project_values(&Tensor::zeros(&[5, 4])).is_err());
    }

    #[test]
    fn total_loss_weighting() {
        let eval = |d: f64, p: f64, g: f64| {
            let mut tape = Tape::new();
            let a = tape.constant(Tensor::scalar(d));
            let b = tape.constant(Tensor::scalar(p));
            let l = total_loss(&mut tape, a, b, g).unwrap();
            tape.value(l).item().unwrap()
        };
        assert_eq!(eval(1.3, -2.0, 0.0), 1.3);
        assert_eq!(eval(1.3, 0.0, 0.25), 1.3);
        assert_eq!(eval(1.0, -4.0, 0.25), 0.0);
    }

    #[test]
    fn infonce_anchors() {
        let z = Tensor::from_rows(&[vec![0.6, 0.8]]);
        for tau in [0.1, 0.5, 2.0] {
            let l = infonce_reference(&z, &z, &z, tau).unwrap();
            assert!((l - 2f64.ln()).abs() < 1e-12);
        }
        let lg = infonce_logits(&z, &z, &z, 1.0).unwrap();
        assert!((lg[0].0 - 1.0).abs() < 1e-15);
        let empty_ok = infonce_reference(&z, &z, &Tensor::zeros(&[1, 3]), 1.0);
        assert!(empty_ok.is_err());
    }

    #[test]
    fn infonce_temperature_divides_logits() {
        let mut rng = Seed(9).stream(streams::EVAL);
        let z = unit_rows(&mut rng, 3, 4);
        let p = unit_rows(&mut rng, 3, 4);
        let n = unit_rows(&mut rng, 5, 4);
        let a = infonce_logits(&z, &p, &n, 0.5).unwrap();
        let b = infonce_logits(&z, &p, &n, 1.5).unwrap();
        for ((pa, na), (pb, nb)) in a.iter().zip(&b) {
            assert!((pa / 3.0 - pb).abs() < 1e-14);
            for (x, y) in na.iter().zip(nb) {
                assert!((x / 3.0 - y).abs() < 1e-14);
            }
        }
    }

    /// With `z_pos = z` on the unit sphere, InfoNCE at temperature `τ/2`
    /// equals `log(1 + K·exp(L_disp(τ)))`: the bank loss is the repulsion
    /// half of InfoNCE written with squared distances.
    #[test]
    fn bank_loss_is_infonce_repulsion_term() {
        let mut rng = Seed(21).stream(streams::EVAL);
        for _ in 0..20 {
            let z = unit_rows(&mut rng, 1, 6);
            let m = unit_rows(&mut rng, 7, 6);
            let mut bank = MemoryBank::new(7, 6).unwrap();
            bank.enqueue(&m).unwrap();
            let tau = 0.5;
            let ld = bank_loss(&z, &bank, tau);
            let nce = infonce_reference(&z, &z, &m, tau / 2.0).unwrap();
            assert!((nce - (1.0 + 7.0 * ld.exp()).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn repulsion_pushes_away_from_negative() {
        // B = K = 1: dL/dz = -(2/τ)(z - m) for L = -||z - m||²/τ.
        let z = Tensor::from_rows(&[vec![0.8, 0.6]]);
        let m = Tensor::from_rows(&[vec![1.0, 0.0]]);
        let tau = 0.5;
        let mut tape = Tape::new();
        let zv = tape.param(z.clone());
        let mv = tape.param(m.clone());
        let l = dispersive_loss_bank(&mut tape, zv, mv, tau).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(zv).unwrap().data().to_vec();
        let diff = [z.data()[0] - m.data()[0], z.data()[1] - m.data()[1]];
        for c in 0..2 {
            assert!((g[c] + 2.0 / tau * diff[c]).abs() < 1e-14);
        }
        // Gradient descent moves z along -g, i.e. along +(z - m).
        assert!(-(g[0] * diff[0] + g[1] * diff[1]) > 0.0);
        assert_eq!(tape.grad(mv).unwrap().max_abs(), 0.0);
    }

    proptest! {
        #[test]
        fn bank_loss_bounded_and_matches_loop(b in 1usize..6, k in 1usize..40, d in 1usize..10, seed in any::<u64>()) {
            let mut rng = Seed(seed).stream(streams::EVAL);
            let z = unit_rows(&mut rng, b, d);
            let m = unit_rows(&mut rng, k, d);
            let mut bank = MemoryBank::new(k, d).unwrap();
            bank.enqueue(&m).unwrap();
            for tau in [0.25, 0.5, 1.0] {
                let l = bank_loss(&z, &bank, tau);
                prop_assert!(l <= 1e-12 && l >= -4.0 / tau - 1e-12);
                prop_assert!((l - brute_loss(&z, &m, tau)).abs() < 1e-10);
            }
        }

        #[test]
        fn bank_of_current_batch_equals_inbatch(b in 2usize..9, d in 1usize..8, seed in any::<u64>()) {
            let mut rng = Seed(seed).stream(streams::EVAL);
            let z = unit_rows(&mut rng, b, d);
            let mut bank = MemoryBank::new(b, d).unwrap();
            bank.enqueue(&z).unwrap();
            let l1 = bank_loss(&z, &bank, 0.5);
            let l2 = inbatch_loss(&z, 0.5).unwrap();
            prop_assert!((l1 - l2).abs() < 1e-10);
        }
    }
}
