use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use repulsor_ffi::*;

const TINY: &str = "model.hidden = 8\nmodel.blocks = 2\ntrain.batch_size = 8\nrepulsor.K = 32\nrepulsor.D = 4\n\
                    train.steps = 6\neval.every = 3\neval.n_samples = 16\neval.n_projections = 4\n\
                    sampler.steps = 3\ndata.n_train = 64\neval.wallclock = false\n";

fn last_error() -> String {
    unsafe { CStr::from_ptr(rpl_last_error()) }.to_string_lossy().into_owned()
}

fn config(text: &str) -> *mut RplConfig {
    let c = CString::new(text).unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { rpl_config_parse(c.as_ptr(), &mut cfg) }, RplStatus::Ok);
    cfg
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(rpl_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn config_errors_map_to_codes() {
    let bad = CString::new("repulsor.K = 4\ntrain.batch_size = 8").unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { rpl_config_parse(bad.as_ptr(), &mut cfg) }, RplStatus::Config);
    assert!(cfg.is_null());
    assert!(last_error().contains("bank size"));
    assert_eq!(unsafe { rpl_config_parse(ptr::null(), &mut cfg) }, RplStatus::NullPointer);
    let ok = CString::new("").unwrap();
    assert_eq!(unsafe { rpl_config_parse(ok.as_ptr(), ptr::null_mut()) }, RplStatus::NullPointer);
    let missing = CString::new("/nonexistent/run.cfg").unwrap();
    assert_eq!(unsafe { rpl_config_load(missing.as_ptr(), &mut cfg) }, RplStatus::Io);
}

#[test]
fn trainer_steps_snapshot_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(TINY);
    assert_eq!(unsafe { rpl_config_batch_size(cfg) }, 8);
    let mut tr = ptr::null_mut();
    unsafe {
        assert_eq!(rpl_trainer_new(cfg, &mut tr), RplStatus::Ok);
        let mut st = RplStepStats::default();
        for _ in 0..3 {
            assert_eq!(rpl_trainer_step(tr, &mut st), RplStatus::Ok);
            assert!(st.loss_diff > 0.0 && st.loss_disp <= 0.0);
            assert!((st.loss_total - (st.loss_diff + 0.25 * st.loss_disp)).abs() < 1e-12);
        }
        assert_eq!(rpl_trainer_step(tr, ptr::null_mut()), RplStatus::Ok);
        assert_eq!(rpl_trainer_steps_done(tr), 4);

        let mut model = ptr::null_mut();
        assert_eq!(rpl_trainer_snapshot(tr, &mut model), RplStatus::Ok);
        assert_eq!(rpl_model_data_dim(model), 2);
        assert_eq!(rpl_model_n_classes(model), 8);

        let path = CString::new(dir.path().join("m.ckpt").to_str().unwrap()).unwrap();
        assert_eq!(rpl_model_save(model, path.as_ptr()), RplStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(rpl_model_load(path.as_ptr(), &mut loaded), RplStatus::Ok);

        let mut a = vec![0.0; 20];
        let mut b = vec![0.0; 20];
        assert_eq!(rpl_model_sample(model, 10, RPL_CLASS_CYCLE, 1.5, 4, 9, a.as_mut_ptr(), a.len()), RplStatus::Ok);
        assert_eq!(rpl_model_sample(loaded, 10, RPL_CLASS_CYCLE, 1.5, 4, 9, b.as_mut_ptr(), b.len()), RplStatus::Ok);
        assert_eq!(a, b);
        assert_eq!(
            rpl_model_sample(model, 10, RPL_CLASS_NULL, 1.0, 4, 9, a.as_mut_ptr(), 19),
            RplStatus::BufferTooSmall
        );
        assert_eq!(rpl_model_sample(model, 10, 8, 1.0, 4, 9, a.as_mut_ptr(), 20), RplStatus::Index);

        rpl_model_free(loaded);
        rpl_model_free(model);
        rpl_trainer_free(tr);
        rpl_config_free(cfg);
    }
}

#[test]
fn full_training_writes_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(TINY);
    let m = CString::new(dir.path().join("metrics.csv").to_str().unwrap()).unwrap();
    let c = CString::new(dir.path().join("model.ckpt").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { rpl_train(cfg, m.as_ptr(), c.as_ptr()) }, RplStatus::Ok);
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(std::fs::read(dir.path().join("model.ckpt")).unwrap().starts_with(b"RPLS1"));
    unsafe { rpl_config_free(cfg) };
}

#[test]
fn bank_fifo_and_losses() {
    unsafe {
        let mut bank = ptr::null_mut();
        assert_eq!(rpl_bank_new(3, 2, &mut bank), RplStatus::Ok);
        assert_eq!(rpl_bank_len(bank), 0);
        let rows = [1.0, 0.0, 0.0, 1.0];
        assert_eq!(rpl_bank_enqueue(bank, rows.as_ptr(), 2), RplStatus::Ok);
        let more = [-1.0, 0.0, 0.0, -1.0];
        assert_eq!(rpl_bank_enqueue(bank, more.as_ptr(), 2), RplStatus::Ok);
        assert_eq!(rpl_bank_len(bank), 3);
        let mut out = [0.0; 6];
        assert_eq!(rpl_bank_entries(bank, out.as_mut_ptr(), 6), RplStatus::Ok);
        assert_eq!(out, [0.0, 1.0, -1.0, 0.0, 0.0, -1.0]);
        let not_unit = [2.0, 0.0];
        assert_eq!(rpl_bank_enqueue(bank, not_unit.as_ptr(), 1), RplStatus::Precondition);

        // coincident query and bank: loss 0 with zero gradient
        let mut one = ptr::null_mut();
        assert_eq!(rpl_bank_new(1, 2, &mut one), RplStatus::Ok);
        let z = [0.0, 1.0];
        assert_eq!(rpl_bank_enqueue(one, z.as_ptr(), 1), RplStatus::Ok);
        let mut loss = f64::NAN;
        let mut grad = [f64::NAN; 2];
        assert_eq!(rpl_dispersive_loss_bank(z.as_ptr(), 1, one, 0.5, &mut loss, grad.as_mut_ptr()), RplStatus::Ok);
        assert_eq!(loss, 0.0);
        assert_eq!(grad, [0.0, 0.0]);

        // orthonormal pair in-batch at tau = 0.5: log((2 + 2e^-4) / 4)
        let pair = [1.0, 0.0, 0.0, 1.0];
        assert_eq!(rpl_dispersive_loss_inbatch(pair.as_ptr(), 2, 2, 0.5, &mut loss, ptr::null_mut()), RplStatus::Ok);
        assert!((loss - ((1.0 + (-4.0f64).exp()) / 2.0).ln()).abs() < 1e-15);
        assert_eq!(rpl_dispersive_loss_inbatch(pair.as_ptr(), 1, 2, 0.5, &mut loss, ptr::null_mut()), RplStatus::Precondition);
        assert_eq!(rpl_dispersive_loss_bank(pair.as_ptr(), 2, one, 0.0, &mut loss, ptr::null_mut()), RplStatus::Precondition);
        assert_eq!(rpl_dispersive_loss_bank(pair.as_ptr(), 2, one, 0.5, ptr::null_mut(), ptr::null_mut()), RplStatus::NullPointer);

        rpl_bank_free(one);
        rpl_bank_free(bank);
        rpl_bank_free(ptr::null_mut());
    }
}

#[test]
fn header_declares_every_export() {
    let root = env!("CARGO_MANIFEST_DIR");
    let header = std::fs::read_to_string(format!("{root}/include/repulsor.h")).unwrap();
    let src = std::fs::read_to_string(format!("{root}/src/lib.rs")).unwrap();
    let exports: Vec<&str> = src
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() > 20);
    for name in exports {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
    for ty in ["typedef struct RplConfig RplConfig;", "typedef struct RplBank RplBank;", "RPL_STATUS_OK = 0"] {
        assert!(header.contains(ty), "{ty}");
    }
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let root = env!("CARGO_MANIFEST_DIR");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    std::fs::write(&src, "#include \"repulsor.h\"\nint main(void) { return rpl_version() == 0; }\n").unwrap();
    for (compiler, lang) in [("cc", "c"), ("c++", "c++")] {
        let status = Command::new(compiler)
            .args(["-fsyntax-only", "-Wall", "-Wextra", "-Werror", "-x", lang])
            .arg(format!("-I{root}/include"))
            .arg(&src)
            .status();
        match status {
            Ok(s) => assert!(s.success(), "{compiler} rejected the header"),
            Err(_) => eprintln!("{compiler} not found; skipping"),
        }
    }
}
