use std::path::Path;

use repulsor::cli::{read_samples, run};
use repulsor::harness::RunLog;

const TINY: &str = "model.hidden = 16\nmodel.blocks = 3\ntrain.batch_size = 16\nrepulsor.K = 64\nrepulsor.D = 8\n\
                    train.steps = 20\neval.every = 10\neval.n_samples = 64\neval.n_projections = 8\n\
                    sampler.steps = 4\ndata.n_train = 256\neval.wallclock = false\n";

fn cli(args: &[&str]) -> i32 {
    run(std::iter::once("repulsor").chain(args.iter().copied()))
}

fn write_cfg(dir: &Path, body: &str) -> String {
    let p = dir.join("run.cfg");
    std::fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn train_sample_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), TINY);
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    assert_eq!(cli(&["train", &cfg, "--out", out_s, "--quiet"]), 0);
    let log = RunLog::from_csv(&std::fs::read_to_string(out.join("metrics.csv")).unwrap()).unwrap();
    assert_eq!(log.rows().len(), 3);
    assert!(out.join("model.ckpt").exists());
    assert!(out.join("config.txt").exists());

    let ckpt = out.join("model.ckpt");
    let ck = ckpt.to_str().unwrap();
    let s1 = dir.path().join("a.csv");
    let s2 = dir.path().join("b.csv");
    for s in [&s1, &s2] {
        let args = ["sample", ck, "--n", "40", "--w", "1.5", "--steps", "5", "--seed", "3", "--out", s.to_str().unwrap()];
        assert_eq!(cli(&args), 0);
    }
    let a = std::fs::read(&s1).unwrap();
    assert_eq!(a, std::fs::read(&s2).unwrap());
    assert!(a.starts_with(b"x0,x1,label\n"));
    let set = read_samples(&s1).unwrap();
    assert_eq!(set.len(), 40);
    assert_eq!(set.labels.as_ref().unwrap()[9], 1);

    let s3 = dir.path().join("c.csv");
    let args = ["sample", ck, "--n", "5", "--class", "null", "--steps", "2", "--out", s3.to_str().unwrap()];
    assert_eq!(cli(&args), 0);
    assert!(std::fs::read_to_string(&s3).unwrap().starts_with("x0,x1\n"));
    let args = ["sample", ck, "--n", "5", "--class", "3", "--steps", "2", "--out", s3.to_str().unwrap()];
    assert_eq!(cli(&args), 0);
    assert!(read_samples(&s3).unwrap().labels.unwrap().iter().all(|&l| l == 3));

    assert_eq!(cli(&["eval", s1.to_str().unwrap(), &cfg]), 0);
}

#[test]
fn bench_negatives_emits_one_row_per_k() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), &TINY.replace("train.steps = 20", "train.steps = 4"));
    let table = dir.path().join("table.csv");
    let code = cli(&["bench-negatives", &cfg, "--K-list", "16,32,64", "--seeds", "1", "--out", table.to_str().unwrap()]);
    assert_eq!(code, 0);
    let text = std::fs::read_to_string(table).unwrap();
    let ks: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(ks, ["16", "32", "64"]);
}

#[test]
fn failures_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cli(&["frobnicate"]), 2);
    assert_eq!(cli(&["train"]), 2);
    assert_eq!(cli(&["sample", "x.ckpt", "--n", "3", "--bogus", "1", "--out", "y"]), 2);
    assert_eq!(cli(&["train", "/nonexistent/run.cfg"]), 1);
    let bad = write_cfg(dir.path(), "repulsor.K = 8\ntrain.batch_size = 16\n");
    assert_eq!(cli(&["train", &bad, "--out", dir.path().join("r").to_str().unwrap()]), 1);
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"RPLS1 not really").unwrap();
    assert_eq!(cli(&["sample", junk.to_str().unwrap(), "--n", "2", "--out", "o.csv"]), 1);
}

#[test]
fn check_grad_passes() {
    assert_eq!(cli(&["check-grad"]), 0);
}
