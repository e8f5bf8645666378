//! Sample-quality and representation-dispersion diagnostics for 2-D toys.

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::normals;
use crate::tensor::Tensor;

/// A set of points with optional class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub points: Tensor,
    pub labels: Option<Vec<usize>>,
}

impl SampleSet {
    pub fn new(points: Tensor, labels: Option<Vec<usize>>) -> Result<Self> {
        let (n, _) = points.dims2()?;
        if points.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Precondition("sample set holds non-finite values".into()));
        }
        if labels.as_ref().is_some_and(|l| l.len() != n) {
            return Err(Error::dim("sample_set", "label count differs from point count"));
        }
        Ok(Self { points, labels })
    }

    pub fn unlabeled(points: Tensor) -> Result<Self> {
        Self::new(points, None)
    }

    pub fn len(&self) -> usize {
        self.points.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.shape()[1]
    }
}

/// Unit directions in `dim` dimensions, Gaussian then normalized.
pub fn random_directions(dim: usize, n: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| loop {
            let v = normals(rng, dim);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect()
}

/// 2-Wasserstein distance between two equal-size 1-D empirical measures.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    (a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

/// Mean 1-D W₂ over the given directions.
///
/// Sets of unequal size are compared after subsampling the larger one
/// without replacement to the smaller size.
pub fn sliced_wasserstein_with_directions(a: &SampleSet, b: &SampleSet, dirs: &[Vec<f64>], rng: &mut impl Rng) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Precondition("sliced Wasserstein of an empty set".into()));
    }
    if a.dim() != b.dim() {
        return Err(Error::dim("sliced_wasserstein", format!("dims {} vs {}", a.dim(), b.dim())));
    }
    if dirs.is_empty() {
        return Err(Error::Precondition("need at least one projection".into()));
    }
    let n = a.len().min(b.len());
    let pick = |s: &SampleSet, rng: &mut dyn rand::RngCore| -> Vec<usize> {
        if s.len() == n {
            (0..n).collect()
        } else {
            let mut idx = index::sample(rng, s.len(), n).into_vec();
            idx.sort_unstable();
            idx
        }
    };
    // Subsample whichever set is larger; the other keeps every point.
    let (ia, ib) = if a.len() >= b.len() {
        let ia = pick(a, rng);
        (ia, (0..n).collect())
    } else {
        let ib = pick(b, rng);
        ((0..n).collect(), ib)
    };
    let project = |s: &SampleSet, idx: &[usize], dir: &[f64]| -> Vec<f64> {
        idx.iter().map(|&i| s.points.row(i).iter().zip(dir).map(|(x, d)| x * d).sum()).collect()
    };
    let total: f64 = dirs.iter().map(|d| wasserstein_1d(&project(a, &ia, d), &project(b, &ib, d))).sum();
    Ok(total / dirs.len() as f64)
}

/// Sliced Wasserstein distance with `n_projections` random directions.
pub fn sliced_wasserstein(a: &SampleSet, b: &SampleSet, n_projections: usize, rng: &mut impl Rng) -> Result<f64> {
    if n_projections < 1 {
        return Err(Error::Precondition("need at least one projection".into()));
    }
    if a.dim() != b.dim() {
        return Err(Error::dim("sliced_wasserstein", format!("dims {} vs {}", a.dim(), b.dim())));
    }
    let dirs = random_directions(a.dim(), n_projections, rng);
    sliced_wasserstein_with_directions(a, b, &dirs, rng)
}

fn mean_pair_distance(a: &Tensor, b: &Tensor) -> f64 {
    let (na, nb) = (a.shape()[0], b.shape()[0]);
    let mut s = 0.0;
    for i in 0..na {
        for j in 0..nb {
            s += a.row(i).iter().zip(b.row(j)).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        }
    }
    s / (na * nb) as f64
}

/// `2·E||X - Y|| - E||X - X'|| - E||Y - Y'||` with all-pairs means.
pub fn energy_distance(a: &SampleSet, b: &SampleSet) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Precondition("energy distance of an empty set".into()));
    }
    if a.dim() != b.dim() {
        return Err(Error::dim("energy_distance", format!("dims {} vs {}", a.dim(), b.dim())));
    }
    let xy = mean_pair_distance(&a.points, &b.points);
    let xx = mean_pair_distance(&a.points, &a.points);
    let yy = mean_pair_distance(&b.points, &b.points);
    Ok(2.0 * xy - xx - yy)
}

/// Dispersion of a batch of unit vectors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dispersion {
    /// Mean cosine over ordered pairs `i ≠ j`.
    pub mean_pairwise_cos: f64,
    /// `log mean_{i≠j} exp(-||z_i - z_j||²)`.
    pub uniformity: f64,
}

pub fn dispersion_diagnostic(z: &Tensor) -> Result<Dispersion> {
    let (b, _) = z.dims2()?;
    if b < 2 {
        return Err(Error::Precondition(format!("dispersion needs B >= 2, got {b}")));
    }
    let norms: Vec<f64> = (0..b).map(|i| z.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let (mut cos, mut unif) = (0.0, 0.0);
    for i in 0..b {
        for j in 0..b {
            if i == j {
                continue;
            }
            let (zi, zj) = (z.row(i), z.row(j));
            let dot: f64 = zi.iter().zip(zj).map(|(x, y)| x * y).sum();
            cos += dot / (norms[i] * norms[j]);
            let d2: f64 = zi.iter().zip(zj).map(|(x, y)| (x - y).powi(2)).sum();
            unif += (-d2).exp();
        }
    }
    let pairs = (b * (b - 1)) as f64;
    Ok(Dispersion { mean_pairwise_cos: cos / pairs, uniformity: (unif / pairs).ln() })
}

/// Mode coverage against known centers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Coverage {
    /// Centers with at least one sample within `radius`.
    pub covered: usize,
    /// Fraction of samples within `radius` of some center.
    pub high_quality_fraction: f64,
}

pub fn mode_coverage(samples: &SampleSet, centers: &[Vec<f64>], radius: f64) -> Result<Coverage> {
    if centers.is_empty() {
        return Err(Error::Config("mode coverage needs at least one center".into()));
    }
    if !(radius > 0.0) {
        return Err(Error::Config(format!("coverage radius must be positive, got {radius}")));
    }
    let r2 = radius * radius;
    let mut hit = vec![false; centers.len()];
    let mut good = 0usize;
    for i in 0..samples.len() {
        let p = samples.points.row(i);
        let mut near = false;
        for (c, center) in centers.iter().enumerate() {
            let d2: f64 = p.iter().zip(center).map(|(x, y)| (x - y).powi(2)).sum();
            if d2 <= r2 {
                hit[c] = true;
                near = true;
            }
        }
        good += usize::from(near);
    }
    let frac = if samples.is_empty() { 0.0 } else { good as f64 / samples.len() as f64 };
    Ok(Coverage { covered: hit.iter().filter(|&&h| h).count(), high_quality_fraction: frac })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{streams, Seed};
    use proptest::prelude::*;

    fn set(rows: &[Vec<f64>]) -> SampleSet {
        SampleSet::unlabeled(Tensor::from_rows(rows)).unwrap()
    }

    fn random_set(seed: u64, n: usize, d: usize) -> SampleSet {
        let mut rng = Seed(seed).stream(streams::EVAL);
        SampleSet::unlabeled(Tensor::matrix(n, d, normals(&mut rng, n * d)).unwrap()).unwrap()
    }

    #[test]
    fn swd_identity_and_translation() {
        let a = random_set(1, 50, 2);
        let mut rng = Seed(0).stream(streams::EVAL);
        assert_eq!(sliced_wasserstein(&a, &a, 16, &mut rng).unwrap(), 0.0);
        let p = set(&vec![vec![0.0]; 5]);
        let q = set(&vec![vec![3.0]; 5]);
        assert!((sliced_wasserstein(&p, &q, 8, &mut rng).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn swd_fixed_direction_equals_brute_force_1d() {
        let a = random_set(2, 40, 2);
        let b = random_set(3, 40, 2);
        let dir = vec![0.6, 0.8];
        let mut rng = Seed(0).stream(streams::EVAL);
        let got = sliced_wasserstein_with_directions(&a, &b, std::slice::from_ref(&dir), &mut rng).unwrap();
        // Brute force: W₂ between equal-size 1-D sets is attained by the
        // monotone coupling; enumerate it via rank matching by repeated minima.
        let proj = |s: &SampleSet| -> Vec<f64> { (0..s.len()).map(|i| s.points.row(i)[0] * 0.6 + s.points.row(i)[1] * 0.8).collect() };
        let (mut pa, mut pb) = (proj(&a), proj(&b));
        let mut acc = 0.0;
        while !pa.is_empty() {
            let ia = (0..pa.len()).min_by(|&i, &j| pa[i].total_cmp(&pa[j])).unwrap();
            let ib = (0..pb.len()).min_by(|&i, &j| pb[i].total_cmp(&pb[j])).unwrap();
            acc += (pa.swap_remove(ia) - pb.swap_remove(ib)).powi(2);
        }
        assert!((got - (acc / 40.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn swd_errors() {
        let a = random_set(2, 4, 2);
        let e = random_set(2, 4, 3);
        let mut rng = Seed(0).stream(streams::EVAL);
        assert!(sliced_wasserstein(&a, &e, 4, &mut rng).is_err());
        assert!(sliced_wasserstein(&a, &a, 0, &mut rng).is_err());
    }

    #[test]
    fn energy_distance_cases() {
        let a = random_set(5, 12, 2);
        assert!(energy_distance(&a, &a).unwrap().abs() < 1e-12);
        let x = set(&[vec![1.0, 2.0]]);
        let y = set(&[vec![4.0, 6.0]]);
        assert!((energy_distance(&x, &y).unwrap() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn dispersion_cases() {
        let same = Tensor::from_rows(&vec![vec![0.6, 0.8]; 4]);
        let d = dispersion_diagnostic(&same).unwrap();
        assert!((d.mean_pairwise_cos - 1.0).abs() < 1e-15);
        assert_eq!(d.uniformity, 0.0);
        let ortho = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let d = dispersion_diagnostic(&ortho).unwrap();
        assert_eq!(d.mean_pairwise_cos, 0.0);
        assert!((d.uniformity + 2.0).abs() < 1e-15);
        assert!(dispersion_diagnostic(&Tensor::from_rows(&[vec![1.0, 0.0]])).is_err());
    }

    #[test]
    fn separating_a_pair_lowers_uniformity() {
        let before = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]]);
        let after = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-0.6, 0.8]]);
        assert!(dispersion_diagnostic(&after).unwrap().uniformity < dispersion_diagnostic(&before).unwrap().uniformity);
    }

    #[test]
    fn coverage_cases() {
        let centers: Vec<Vec<f64>> = (0..8)
            .map(|k| {
                let a = k as f64 * std::f64::consts::TAU / 8.0;
                vec![a.cos(), a.sin()]
            })
            .collect();
        let c = mode_coverage(&set(&centers), &centers, 0.1).unwrap();
        assert_eq!((c.covered, c.high_quality_fraction), (8, 1.0));
        let c = mode_coverage(&set(&vec![centers[3].clone(); 10]), &centers, 0.1).unwrap();
        assert_eq!(c.covered, 1);
        let far = set(&[vec![5.0, 5.0], vec![-4.0, 3.0]]);
        assert_eq!(mode_coverage(&far, &centers, 0.1).unwrap().high_quality_fraction, 0.0);
        assert!(mode_coverage(&far, &[], 0.1).is_err());
        assert!(mode_coverage(&far, &centers, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn swd_symmetric(sa in 0u64..1000, sb in 0u64..1000, na in 2usize..30, nb in 2usize..30) {
            let a = random_set(sa, na, 2);
            let b = random_set(sb + 5000, nb, 2);
            let ab = sliced_wasserstein(&a, &b, 8, &mut Seed(1).stream(streams::EVAL)).unwrap();
            let ba = sliced_wasserstein(&b, &a, 8, &mut Seed(1).stream(streams::EVAL)).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
        }

        #[test]
        fn energy_nonnegative_and_matches_definition(sa in 0u64..1000, na in 1usize..12, nb in 1usize..12) {
            let a = random_set(sa, na, 3);
            let b = random_set(sa + 7, nb, 3);
            let e = energy_distance(&a, &b).unwrap();
            prop_assert!(e >= -1e-12);
            let dist = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            let mut xy = 0.0;
            for i in 0..na { for j in 0..nb { xy += dist(a.points.row(i), b.points.row(j)); } }
            let mut xx = 0.0;
            for i in 0..na { for j in 0..na { xx += dist(a.points.row(i), a.points.row(j)); } }
            let mut yy = 0.0;
            for i in 0..nb { for j in 0..nb { yy += dist(b.points.row(i), b.points.row(j)); } }
            let brute = 2.0 * xy / (na * nb) as f64 - xx / (na * na) as f64 - yy / (nb * nb) as f64;
            prop_assert!((e - brute).abs() < 1e-12);
        }

        #[test]
        fn dispersion_matches_brute_force(seed in 0u64..1000, b in 2usize..10, d in 1usize..6) {
            let mut rng = Seed(seed).stream(streams::EVAL);
            let mut z = Tensor::matrix(b, d, normals(&mut rng, b * d)).unwrap();
            for r in z.data_mut().chunks_exact_mut(d) {
                let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                r.iter_mut().for_each(|v| *v /= n);
            }
            let got = dispersion_diagnostic(&z).unwrap();
            let (mut c, mut u, mut n) = (0.0, 0.0, 0.0);
            for i in 0..b {
                for j in 0..b {
                    if i != j {
                        let dot: f64 = (0..d).map(|k| z.row(i)[k] * z.row(j)[k]).sum();
                        c += dot;
                        u += (-(0..d).map(|k| (z.row(i)[k] - z.row(j)[k]).powi(2)).sum::<f64>()).exp();
                        n += 1.0;
                    }
                }
            }
            prop_assert!((got.mean_pairwise_cos - c / n).abs() < 1e-12);
            prop_assert!((got.uniformity - (u / n).ln()).abs() < 1e-12);
        }
    }
}
