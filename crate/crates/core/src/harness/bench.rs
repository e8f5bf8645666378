//! Memory-bank size sweep.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};

use super::config::{Regularizer, RunConfig};
use super::train::train;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub bank_size: usize,
    pub batch_size: usize,
    /// Final sliced Wasserstein distance per seed, in seed order.
    pub swd: Vec<f64>,
    pub median_swd: f64,
    pub median_mean_pairwise_cos: f64,
    pub median_loss_disp: f64,
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn parse_k_list(s: &str) -> Result<Vec<usize>> {
    let ks: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| Error::Config(format!("bad K value '{p}'"))))
        .collect::<Result<_>>()?;
    if ks.is_empty() {
        return Err(Error::Config("empty K list".into()));
    }
    Ok(ks)
}

/// Train the repulsor regularizer once per `(K, seed)` pair; seeds run from
/// `base.seed` upwards. Sweep points run concurrently.
pub fn bench_negatives(base: &RunConfig, ks: &[usize], n_seeds: usize) -> Result<Vec<BenchRow>> {
    if n_seeds == 0 {
        return Err(Error::Config("need at least one seed".into()));
    }
    let mut jobs = Vec::new();
    for &k in ks {
        for s in 0..n_seeds {
            let mut c = base.clone();
            c.regularizer = Regularizer::Repulsor;
            c.repulsor.bank_size = k;
            c.seed = base.seed + s as u64;
            c.validate()?;
            jobs.push(c);
        }
    }
    let finals = jobs
        .into_par_iter()
        .map(|c| {
            let out = train(c)?;
            let r = *out.log.last().expect("at least one row");
            Ok((r.swd, r.mean_pairwise_cos, r.loss_disp))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ks
        .iter()
        .zip(finals.chunks(n_seeds))
        .map(|(&k, f)| {
            let swd: Vec<f64> = f.iter().map(|x| x.0).collect();
            BenchRow {
                bank_size: k,
                batch_size: base.batch_size,
                median_swd: median(&swd),
                median_mean_pairwise_cos: median(&f.iter().map(|x| x.1).collect::<Vec<_>>()),
                median_loss_disp: median(&f.iter().map(|x| x.2).collect::<Vec<_>>()),
                swd,
            }
        })
        .collect())
}

pub const TABLE_HEADER: &str = "batch_size,K,seeds,median_swd,min_swd,max_swd,median_mean_pairwise_cos,median_loss_disp";

pub fn format_table(rows: &[BenchRow]) -> String {
    let mut s = String::from(TABLE_HEADER);
    s.push('\n');
    for r in rows {
        let lo = r.swd.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = r.swd.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.batch_size,
            r.bank_size,
            r.swd.len(),
            r.median_swd,
            lo,
            hi,
            r.median_mean_pairwise_cos,
            r.median_loss_disp
        );
    }
    s
}

/// True when some interior K is no worse than both ends of the sweep.
pub fn has_interior_optimum(rows: &[BenchRow]) -> bool {
    if rows.len() < 3 {
        return false;
    }
    let first = rows[0].median_swd;
    let last = rows[rows.len() - 1].median_swd;
    rows[1..rows.len() - 1].iter().any(|r| r.median_swd <= first && r.median_swd <= last)
}
