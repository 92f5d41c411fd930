use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use sparsepanel_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(sp_last_error_message()) }.to_string_lossy().into_owned()
}

fn values(panel: *const SpPanel) -> Vec<f64> {
    let len = unsafe { sp_panel_rows(panel) * sp_panel_cols(panel) };
    let mut buf = vec![0.0; len];
    assert_eq!(unsafe { sp_panel_copy_values(panel, buf.as_mut_ptr(), len) }, SpStatus::Ok);
    buf
}

fn panel_from(values: &[f64], rows: usize, cols: usize) -> *mut SpPanel {
    let mut out = ptr::null_mut();
    let status = unsafe { sp_panel_from_values(values.as_ptr(), rows, cols, 2000, &mut out) };
    assert_eq!(status, SpStatus::Ok, "{}", last_error());
    out
}

#[test]
fn version_matches_crate() {
    let v = unsafe { CStr::from_ptr(sp_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn panel_round_trips_values_and_missing_cells() {
    let v = [1.0, f64::NAN, 3.0, 4.0, 5.0, f64::NAN];
    let p = panel_from(&v, 2, 3);
    unsafe {
        assert_eq!((sp_panel_rows(p), sp_panel_cols(p), sp_panel_observed_count(p)), (2, 3, 4));
    }
    let back = values(p);
    for (a, b) in v.iter().zip(&back) {
        assert!(a == b || (a.is_nan() && b.is_nan()));
    }
    unsafe { sp_panel_free(p) };
}

#[test]
fn csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("p.csv").to_str().unwrap()).unwrap();
    let p = panel_from(&[1.5, f64::NAN, 2.5, 3.5], 2, 2);
    let mut q = ptr::null_mut();
    unsafe {
        assert_eq!(sp_panel_write_csv(p, path.as_ptr()), SpStatus::Ok);
        assert_eq!(sp_panel_read_csv(path.as_ptr(), &mut q), SpStatus::Ok, "{}", last_error());
    }
    assert_eq!(values(q)[3], 3.5);
    assert!(values(q)[1].is_nan());
    unsafe {
        sp_panel_free(p);
        sp_panel_free(q);
    }
}

#[test]
fn errors_are_reported_not_raised() {
    let mut out = ptr::null_mut();
    unsafe {
        assert_eq!(sp_impute(ptr::null(), SpImputeMethod::Mean, 0, &mut out), SpStatus::NullPointer);
        assert!(last_error().contains("panel"));
        assert!(out.is_null());

        let missing = CString::new("/definitely/not/here.csv").unwrap();
        assert_eq!(sp_panel_read_csv(missing.as_ptr(), &mut out), SpStatus::Compute);

        let bad = [0xffu8, 0xfe, 0];
        assert_eq!(sp_panel_read_csv(bad.as_ptr().cast(), &mut out), SpStatus::Utf8);

        // a row with nothing observed cannot be completed
        let p = panel_from(&[1.0, 2.0, f64::NAN, f64::NAN], 2, 2);
        assert_eq!(sp_impute(p, SpImputeMethod::SoftImpute, 0, &mut out), SpStatus::Compute);
        assert!(!last_error().is_empty());
        let mut buf = [0.0; 3];
        assert_eq!(sp_panel_copy_values(p, buf.as_mut_ptr(), 3), SpStatus::InvalidArgument);
        sp_panel_free(p);

        // success clears the message
        assert_eq!(sp_simulate_lowrank(2, 2000, 2009, 1, 0.0, 1, &mut out), SpStatus::Ok);
        assert_eq!(last_error(), "");
        sp_panel_free(out);
    }
}

#[test]
fn simulate_mask_and_impute() {
    let mut full = ptr::null_mut();
    let mut masked = ptr::null_mut();
    let mut soft = ptr::null_mut();
    let mut mean = ptr::null_mut();
    unsafe {
        assert_eq!(sp_simulate_lowrank(10, 1991, 2020, 2, 0.01, 4, &mut full), SpStatus::Ok);
        assert_eq!(sp_inject_missing(full, SpMechanism::Mcar, 0.3, 5, &mut masked), SpStatus::Ok);
        let n = sp_panel_rows(full) * sp_panel_cols(full);
        assert!(sp_panel_observed_count(masked) < n);
        assert_eq!(sp_impute(masked, SpImputeMethod::SoftImpute, 0, &mut soft), SpStatus::Ok);
        assert_eq!(sp_impute(masked, SpImputeMethod::Mean, 0, &mut mean), SpStatus::Ok);
        assert_eq!(sp_panel_observed_count(soft), n);
    }
    let (t, m) = (values(full), values(masked));
    let err = |c: &[f64]| -> f64 {
        t.iter().zip(&m).zip(c).filter(|((_, m), _)| m.is_nan()).map(|((t, _), c)| (t - c).powi(2)).sum()
    };
    assert!(err(&values(soft)) < err(&values(mean)) / 10.0);
    unsafe {
        for p in [full, masked, soft, mean] {
            sp_panel_free(p);
        }
    }
}

#[test]
fn bhm_posterior_through_handles() {
    let (mut y, mut x, mut post) = (ptr::null_mut(), ptr::null_mut(), ptr::null_mut());
    unsafe {
        assert_eq!(sp_simulate_hierarchical(12, 10, 2, &mut y, &mut x), SpStatus::Ok);
        let covs = [x as *const SpPanel];
        assert_eq!(sp_bhm_fit(y, covs.as_ptr(), 1, SpBhmMethod::Mcmc, 2, &mut post), SpStatus::Ok, "{}", last_error());
        let len = sp_posterior_len(post);
        let names: Vec<String> =
            (0..len).map(|i| CStr::from_ptr(sp_posterior_name(post, i)).to_string_lossy().into_owned()).collect();
        assert_eq!(&names[..2], ["beta0", "beta1"]);
        assert!(names.last().unwrap() == "sigma");
        assert!(sp_posterior_name(post, len).is_null());

        let mut s = SpParamSummary { mean: 0.0, sd: 0.0, q05: 0.0, q50: 0.0, q95: 0.0, rhat: 0.0, ess: 0.0 };
        assert_eq!(sp_posterior_get(post, 1, &mut s), SpStatus::Ok);
        // true slope is 2
        assert!((s.mean - 2.0).abs() < 4.0 * s.sd, "{s:?}");
        assert!(s.rhat < 1.05 && s.ess > 100.0);
        assert_eq!(sp_posterior_get(post, len, &mut s), SpStatus::InvalidArgument);
        sp_posterior_free(post);
        sp_panel_free(x);
        sp_panel_free(y);
    }
}

#[test]
fn lasso_drops_an_inert_predictor() {
    // y depends on columns 0 and 2 only
    let (n, p) = (120, 3);
    let x: Vec<f64> = (0..n * p).map(|i| ((i * 7919) % 1000) as f64 / 500.0 - 1.0 + ((i % 13) as f64).sin()).collect();
    let y: Vec<f64> = (0..n).map(|i| 3.0 * x[i * p] - 2.0 * x[i * p + 2] + 0.01 * ((i * 31) % 17) as f64).collect();
    let mut beta = vec![0.0; p];
    let (mut intercept, mut lambda) = (0.0, 0.0);
    let status = unsafe {
        sp_lasso_cv(x.as_ptr(), n, p, y.as_ptr(), 5, true, 1, beta.as_mut_ptr(), &mut intercept, &mut lambda)
    };
    assert_eq!(status, SpStatus::Ok, "{}", last_error());
    assert!(lambda > 0.0);
    assert!(beta[0] > 0.0 && beta[2] < 0.0);
    assert_eq!(beta[1], 0.0);
}

#[test]
fn factor_fit_writes_loadings() {
    let (n, p, k) = (400, 4, 1);
    let lam = [0.9, 0.8, 0.7, -0.6];
    let y: Vec<f64> = (0..n)
        .flat_map(|i| {
            let f = ((i as f64) * 0.618).sin() * 1.7;
            (0..p).map(move |j| lam[j] * f + 0.2 * ((i * (j + 3)) as f64 * 1.3).cos())
        })
        .collect();
    let (mut load, mut uniq, mut ll) = (vec![0.0; p * k], vec![0.0; p], 0.0);
    let status = unsafe { sp_factor_fit(y.as_ptr(), n, p, k, 0, load.as_mut_ptr(), uniq.as_mut_ptr(), &mut ll) };
    assert_eq!(status, SpStatus::Ok, "{}", last_error());
    let dot: f64 = load.iter().zip(&lam).map(|(a, b)| a * b).sum();
    let cos = dot.abs() / (load.iter().map(|a| a * a).sum::<f64>().sqrt() * lam.iter().map(|a| a * a).sum::<f64>().sqrt());
    assert!(cos > 0.95, "{load:?}");
    assert!(uniq.iter().all(|&u| u > 0.0) && ll.is_finite());
    let bad = unsafe { sp_factor_fit(y.as_ptr(), n, p, p, 0, load.as_mut_ptr(), uniq.as_mut_ptr(), &mut ll) };
    assert_eq!(bad, SpStatus::Compute);
}

/// `target/<profile>` for the running test binary.
fn profile_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_generated_header() {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let lib_dir = profile_dir();
    if !lib_dir.join("libsparsepanel_ffi.so").exists() && !lib_dir.join("libsparsepanel_ffi.dylib").exists() {
        panic!("shared library not found in {}", lib_dir.display());
    }
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let tmp = tempfile::tempdir().unwrap();
    let exe = tmp.path().join("smoke");
    let build = Command::new(&cc)
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg(manifest.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg("-L")
        .arg(&lib_dir)
        .arg(format!("-Wl,-rpath,{}", lib_dir.display()))
        .arg("-lsparsepanel_ffi")
        .arg("-lm")
        .arg("-o")
        .arg(&exe)
        .output()
        .expect("C compiler");
    assert!(build.status.success(), "{}", String::from_utf8_lossy(&build.stderr));
    let run = Command::new(&exe).output().unwrap();
    assert!(run.status.success(), "{}{}", String::from_utf8_lossy(&run.stdout), String::from_utf8_lossy(&run.stderr));
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), "ok");
}
