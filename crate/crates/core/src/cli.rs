//! Command-line front end.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::error::{Error, Result};
use crate::harness::bench::{bench_negatives, format_table, parse_k_list};
use crate::harness::data::draw_dataset;
use crate::harness::gradsuite::run_grad_suite;
use crate::harness::{train_with, Checkpoint, RunConfig, TrainedModel};
use crate::metrics::{energy_distance, mode_coverage, sliced_wasserstein, SampleSet};
use crate::rng::{streams, Seed};
use crate::sampler::SamplerConfig;
use crate::tensor::Tensor;

#[derive(Parser, Debug)]
#[command(name = "repulsor", version, about = "Toy diffusion training with a dispersive memory-bank regularizer")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train from a config file; writes metrics.csv, model.ckpt and config.txt.
    Train {
        config: PathBuf,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Suppress per-row progress on stderr.
        #[arg(long)]
        quiet: bool,
    },
    /// Draw samples from a checkpoint into a CSV file.
    Sample {
        checkpoint: PathBuf,
        #[arg(long)]
        n: usize,
        /// Class id, or `null` for unconditional samples. Defaults to cycling through all classes.
        #[arg(long)]
        class: Option<String>,
        #[arg(long, default_value_t = 1.5)]
        w: f64,
        #[arg(long, default_value_t = 250)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare a samples file with reference data described by a config.
    Eval { samples: PathBuf, reference_config: PathBuf },
    /// Run the finite-difference gradient suite.
    CheckGrad {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Re-train across memory-bank sizes and print a comparison table.
    BenchNegatives {
        config: PathBuf,
        #[arg(long = "K-list", value_name = "K,K,...")]
        k_list: String,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parse `argv` (including the program name), run, and return the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn execute(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Train { config, out, quiet } => {
            let cfg = RunConfig::load(&config)?;
            std::fs::create_dir_all(&out)?;
            let res = train_with(cfg.clone(), |r| {
                if !quiet {
                    eprintln!("step {:>7}  loss {:.5}  swd {:.5}  cos {:.4}", r.step, r.loss_total, r.swd, r.mean_pairwise_cos);
                }
            })?;
            res.log.save(&out.join("metrics.csv"))?;
            res.checkpoint.save(&out.join("model.ckpt"))?;
            std::fs::write(out.join("config.txt"), cfg.to_text())?;
            Ok(0)
        }
        Command::Sample { checkpoint, n, class, w, steps, out, seed } => {
            let model = TrainedModel::from_checkpoint(&Checkpoint::load(&checkpoint)?)?;
            let classes = sample_classes(&model, n, class.as_deref())?;
            let x = model.generate(&SamplerConfig { steps, guidance_w: w }, &classes, seed)?;
            let labelled = class.as_deref() != Some("null");
            std::fs::write(&out, samples_csv(&x, labelled.then_some(&classes[..])))?;
            Ok(0)
        }
        Command::Eval { samples, reference_config } => {
            let cfg = RunConfig::load(&reference_config)?;
            let set = read_samples(&samples)?;
            let mut er = Seed(cfg.seed).stream(streams::EVAL);
            let reference = draw_dataset(cfg.dataset, cfg.eval.n_samples, &mut er)?;
            let swd = sliced_wasserstein(&set, &reference, cfg.eval.n_projections, &mut er)?;
            let ed = energy_distance(&set, &reference)?;
            let (covered, hq) = match cfg.dataset.modes() {
                Some((centers, radius)) => {
                    let c = mode_coverage(&set, &centers, radius)?;
                    (c.covered, c.high_quality_fraction)
                }
                None => (0, f64::NAN),
            };
            println!("swd,energy_dist,modes_covered,high_quality_fraction");
            println!("{swd},{ed},{covered},{hq}");
            Ok(0)
        }
        Command::CheckGrad { seed } => {
            let checks = run_grad_suite(seed)?;
            let mut ok = true;
            for c in &checks {
                ok &= c.passed();
                println!("{:<26} rel_err {:<12.3e} tol {:<8.0e} {}", c.name, c.rel_err, c.tol, if c.passed() { "PASS" } else { "FAIL" });
            }
            Ok(if ok { 0 } else { 1 })
        }
        Command::BenchNegatives { config, k_list, seeds, out } => {
            let cfg = RunConfig::load(&config)?;
            let ks = parse_k_list(&k_list)?;
            let table = format_table(&bench_negatives(&cfg, &ks, seeds)?);
            print!("{table}");
            if let Some(p) = out {
                std::fs::write(p, &table)?;
            }
            Ok(0)
        }
    }
}

fn sample_classes(model: &TrainedModel, n: usize, class: Option<&str>) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::Config("--n must be >= 1".into()));
    }
    let k = model.n_classes();
    match class {
        None => Ok((0..n).map(|i| i % k).collect()),
        Some("null") => Ok(vec![model.denoiser.null_class(); n]),
        Some(s) => {
            let c: usize = s.parse().map_err(|_| Error::Config(format!("bad class '{s}'")))?;
            if c >= k {
                return Err(Error::Config(format!("class {c} outside 0..{k}")));
            }
            Ok(vec![c; n])
        }
    }
}

/// Header `x0,x1[,label]` followed by one row per sample.
pub fn samples_csv(x: &Tensor, labels: Option<&[usize]>) -> String {
    let (n, d) = x.dims2().expect("sample matrix");
    let mut s = (0..d).map(|j| format!("x{j}")).collect::<Vec<_>>().join(",");
    if labels.is_some() {
        s.push_str(",label");
    }
    s.push('\n');
    for i in 0..n {
        let row = x.row(i).iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
        s.push_str(&row);
        if let Some(l) = labels {
            let _ = write!(s, ",{}", l[i]);
        }
        s.push('\n');
    }
    s
}

/// Read a samples file written by `sample`; a label column is optional.
pub fn read_samples(path: &Path) -> Result<SampleSet> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| Error::Format("empty samples file".into()))?.split(',').collect();
    let labelled = header.last() == Some(&"label");
    let d = header.len() - labelled as usize;
    if d == 0 {
        return Err(Error::Format("samples file has no coordinate columns".into()));
    }
    let mut pts = Vec::new();
    let mut labels = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != header.len() {
            return Err(Error::Format(format!("row {}: {} fields, expected {}", n + 1, f.len(), header.len())));
        }
        for v in &f[..d] {
            pts.push(v.trim().parse::<f64>().map_err(|_| Error::Format(format!("row {}: bad number '{v}'", n + 1)))?);
        }
        if labelled {
            labels.push(f[d].trim().parse::<usize>().map_err(|_| Error::Format(format!("row {}: bad label", n + 1)))?);
        }
    }
    if pts.is_empty() {
        return Err(Error::Format("samples file has no rows".into()));
    }
    let n = pts.len() / d;
    SampleSet::new(Tensor::matrix(n, d, pts)?, labelled.then_some(labels))
}
