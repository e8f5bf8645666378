//! Toy 2-D datasets and per-dimension standardization.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{Error, Result};
use crate::metrics::SampleSet;
use crate::rng::{normal, streams, Seed};
use crate::tensor::Tensor;

pub const GAUSS8_STD: f64 = 0.05;
pub const GAUSS8_RADIUS: f64 = 1.0;
pub const MOONS_NOISE: f64 = 0.05;
pub const RINGS_NOISE: f64 = 0.04;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Gauss8,
    Checkerboard,
    Moons,
    Rings,
}

impl DatasetKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gauss8" => Ok(Self::Gauss8),
            "checkerboard" => Ok(Self::Checkerboard),
            "moons" => Ok(Self::Moons),
            "rings" => Ok(Self::Rings),
            other => Err(Error::Config(format!("unknown dataset '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Gauss8 => "gauss8",
            Self::Checkerboard => "checkerboard",
            Self::Moons => "moons",
            Self::Rings => "rings",
        }
    }

    pub fn n_classes(self) -> usize {
        match self {
            Self::Gauss8 | Self::Checkerboard => 8,
            Self::Moons => 2,
            Self::Rings => 4,
        }
    }

    pub fn data_dim(self) -> usize {
        2
    }

    /// Mode centers and the coverage radius, for datasets with point-like modes.
    pub fn modes(self) -> Option<(Vec<Vec<f64>>, f64)> {
        match self {
            Self::Gauss8 => Some(((0..8).map(gauss8_center).collect(), 3.0 * GAUSS8_STD)),
            _ => None,
        }
    }
}

pub fn gauss8_center(k: usize) -> Vec<f64> {
    let a = 2.0 * PI * k as f64 / 8.0;
    vec![GAUSS8_RADIUS * a.cos(), GAUSS8_RADIUS * a.sin()]
}

/// The eight dark cells of a 4x4 board on [-2, 2]^2, as lower-left corners.
fn checker_cells() -> Vec<(f64, f64)> {
    let mut cells = Vec::with_capacity(8);
    for cy in -2i32..2 {
        for cx in -2i32..2 {
            if (cx + cy).rem_euclid(2) == 0 {
                cells.push((cx as f64, cy as f64));
            }
        }
    }
    cells
}

fn draw(kind: DatasetKind, label: usize, rng: &mut impl Rng) -> [f64; 2] {
    match kind {
        DatasetKind::Gauss8 => {
            let c = gauss8_center(label);
            [c[0] + GAUSS8_STD * normal(rng), c[1] + GAUSS8_STD * normal(rng)]
        }
        DatasetKind::Checkerboard => {
            let (x, y) = checker_cells()[label];
            [x + rng.random::<f64>(), y + rng.random::<f64>()]
        }
        DatasetKind::Moons => {
            let th = PI * rng.random::<f64>();
            let (x, y) = if label == 0 { (th.cos(), th.sin()) } else { (1.0 - th.cos(), 0.5 - th.sin()) };
            let x = x + MOONS_NOISE * normal(rng);
            let y = y + MOONS_NOISE * normal(rng);
            // [-1, 2] x [-0.5, 1] onto [-2, 2] x [-1, 1]
            [(x - 0.5) * 4.0 / 3.0, (y - 0.25) * 4.0 / 3.0]
        }
        DatasetKind::Rings => {
            let r = 0.45 * (label as f64 + 1.0);
            let th = 2.0 * PI * rng.random::<f64>();
            [r * th.cos() + RINGS_NOISE * normal(rng), r * th.sin() + RINGS_NOISE * normal(rng)]
        }
    }
}

/// Stratified draw: point `i` belongs to class `i mod n_classes`.
pub fn make_dataset(kind: DatasetKind, n: usize, seed: u64, with_labels: bool) -> Result<SampleSet> {
    if n == 0 {
        return Err(Error::Config("dataset size must be >= 1".into()));
    }
    let mut rng = Seed(seed).stream(streams::DATASET);
    let k = kind.n_classes();
    let mut pts = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let p = draw(kind, i % k, &mut rng);
        pts.extend_from_slice(&p);
        labels.push(i % k);
    }
    SampleSet::new(Tensor::new(vec![n, 2], pts)?, with_labels.then_some(labels))
}

/// Same as `make_dataset` but reading from a caller-supplied generator.
pub fn draw_dataset(kind: DatasetKind, n: usize, rng: &mut impl Rng) -> Result<SampleSet> {
    let k = kind.n_classes();
    let mut pts = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        pts.extend_from_slice(&draw(kind, i % k, rng));
        labels.push(i % k);
    }
    SampleSet::new(Tensor::new(vec![n, 2], pts)?, Some(labels))
}

/// Per-dimension affine map to zero mean and unit variance.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Tensor) -> Result<Self> {
        let (n, d) = x.dims2()?;
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                let e = x.row(i)[j] - mean[j];
                var[j] += e * e;
            }
        }
        let std = var.iter().map(|v| (v / n as f64).sqrt().max(1e-12)).collect();
        Ok(Self { mean, std })
    }

    pub fn identity(d: usize) -> Self {
        Self { mean: vec![0.0; d], std: vec![1.0; d] }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.apply(x, |v, m, s| (v - m) / s)
    }

    pub fn inverse(&self, x: &Tensor) -> Result<Tensor> {
        self.apply(x, |v, m, s| v * s + m)
    }

    fn apply(&self, x: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor> {
        let (n, d) = x.dims2()?;
        if d != self.mean.len() {
            return Err(Error::dim("standardize", format!("data dim {d} vs {}", self.mean.len())));
        }
        let mut out = x.data().to_vec();
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] = f(out[i * d + j], self.mean[j], self.std[j]);
            }
        }
        Tensor::new(vec![n, d], out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stratified_labels_and_determinism() {
        let a = make_dataset(DatasetKind::Gauss8, 8000, 3, true).unwrap();
        let labels = a.labels.as_ref().unwrap();
        for k in 0..8 {
            assert_eq!(labels.iter().filter(|&&l| l == k).count(), 1000);
        }
        let b = make_dataset(DatasetKind::Gauss8, 8000, 3, true).unwrap();
        assert_eq!(a.points, b.points);
        let c = make_dataset(DatasetKind::Gauss8, 8000, 4, true).unwrap();
        assert_ne!(a.points, c.points);
    }

    #[test]
    fn gauss8_mode_means_near_centers() {
        let n = 8000;
        let s = make_dataset(DatasetKind::Gauss8, n, 11, true).unwrap();
        let labels = s.labels.unwrap();
        let bound = 3.0 * GAUSS8_STD / ((n / 8) as f64).sqrt();
        for k in 0..8 {
            let c = gauss8_center(k);
            let mut m = [0.0; 2];
            let mut cnt = 0.0;
            for (i, &l) in labels.iter().enumerate() {
                if l == k {
                    m[0] += s.points.row(i)[0];
                    m[1] += s.points.row(i)[1];
                    cnt += 1.0;
                }
            }
            for j in 0..2 {
                assert!((m[j] / cnt - c[j]).abs() < bound, "mode {k} dim {j}");
            }
        }
    }

    #[test]
    fn all_datasets_stay_in_box() {
        for kind in [DatasetKind::Checkerboard, DatasetKind::Moons, DatasetKind::Rings, DatasetKind::Gauss8] {
            let s = make_dataset(kind, 4000, 0, false).unwrap();
            assert!(s.points.max_abs() < 2.3, "{}", kind.name());
            assert!(s.points.max_abs() > 0.9, "{}", kind.name());
        }
    }

    #[test]
    fn checkerboard_points_fall_on_dark_cells() {
        let s = make_dataset(DatasetKind::Checkerboard, 2000, 1, true).unwrap();
        for i in 0..s.len() {
            let p = s.points.row(i);
            let parity = (p[0].floor() as i64 + p[1].floor() as i64).rem_euclid(2);
            assert_eq!(parity, 0);
        }
    }

    #[test]
    fn unknown_name_is_config_error() {
        assert!(matches!(DatasetKind::parse("spirals"), Err(Error::Config(_))));
    }

    #[test]
    fn standardizer_round_trip() {
        let s = make_dataset(DatasetKind::Moons, 1000, 2, false).unwrap();
        let st = Standardizer::fit(&s.points).unwrap();
        let z = st.forward(&s.points).unwrap();
        let again = Standardizer::fit(&z).unwrap();
        for j in 0..2 {
            assert!(again.mean[j].abs() < 1e-12);
            assert!((again.std[j] - 1.0).abs() < 1e-12);
        }
        let back = st.inverse(&z).unwrap();
        for (a, b) in back.data().iter().zip(s.points.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
