use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use tdcr_ffi::*;

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = tdcr_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn config(toml: &str) -> *mut TdcrConfig {
    let mut cfg = ptr::null_mut();
    let text = cstr(toml);
    assert_eq!(unsafe { tdcr_config_from_toml(text.as_ptr(), &mut cfg) }, TdcrStatus::Ok);
    cfg
}

const STILL: &str = "[disturbance]\nsigma_x = 0.0\nsigma_y = 0.0\n";

#[test]
fn kinematics_and_buffer_sizing() {
    let cfg = config(STILL);
    let mut disks = 0;
    let mut x = [0.0; TDCR_ACTUATORS];
    unsafe {
        assert_eq!(tdcr_config_disk_count(cfg, &mut disks), TdcrStatus::Ok);
        assert_eq!(tdcr_config_initial_state(cfg, x.as_mut_ptr()), TdcrStatus::Ok);
        let mut n = 0;
        let mut small = [0.0; 3];
        let s = tdcr_forward_kinematics(cfg, x.as_ptr(), small.as_mut_ptr(), 1, &mut n);
        assert_eq!(s, TdcrStatus::BufferTooSmall);
        assert_eq!(n, disks);
        let mut pts = vec![0.0; 3 * n];
        assert_eq!(tdcr_forward_kinematics(cfg, x.as_ptr(), pts.as_mut_ptr(), n, &mut n), TdcrStatus::Ok);
        // straight robot along +z
        let tip = &pts[3 * (n - 1)..];
        assert!(tip[0].abs() < 1e-9 && tip[1].abs() < 1e-9 && tip[2] > 0.0);

        x[0] = f64::NAN;
        let s = tdcr_forward_kinematics(cfg, x.as_ptr(), pts.as_mut_ptr(), n, &mut n);
        assert_eq!(s, TdcrStatus::InvalidState);
        assert!(!last_error().is_empty());
        tdcr_config_free(cfg);
    }
}

#[test]
fn null_and_bad_arguments() {
    unsafe {
        let mut out = TdcrDistance::default();
        let p = [0.0; 3];
        assert_eq!(tdcr_zone_distance(ptr::null(), p.as_ptr(), &mut out), TdcrStatus::NullPointer);
        assert!(last_error().contains("zone"));
        let mut cfg = ptr::null_mut();
        assert_eq!(tdcr_config_from_toml(ptr::null(), &mut cfg), TdcrStatus::NullPointer);
        let bad = cstr("rate = -1.0");
        assert_eq!(tdcr_config_from_toml(bad.as_ptr(), &mut cfg), TdcrStatus::InvalidConfig);
        assert!(cfg.is_null());
        let bad = cstr("rate = ");
        assert_ne!(tdcr_config_from_toml(bad.as_ptr(), &mut cfg), TdcrStatus::Ok);
        let missing = cstr("/nonexistent/zone.obj");
        let mut zone = ptr::null_mut();
        assert_ne!(tdcr_zone_load(missing.as_ptr(), &mut zone), TdcrStatus::Ok);
        assert!(zone.is_null());

        // success clears the previous message
        let cfg = config("");
        assert!(tdcr_last_error().is_null());

        let mut mpc = ptr::null_mut();
        assert_eq!(tdcr_mpc_new(cfg, ptr::null(), &mut mpc), TdcrStatus::Ok);
        let nan = [f64::NAN, 0.0, 0.0];
        let mut step = std::mem::MaybeUninit::<TdcrMpcStep>::uninit();
        assert_eq!(tdcr_mpc_step(mpc, nan.as_ptr(), step.as_mut_ptr()), TdcrStatus::InvalidArgument);
        tdcr_mpc_free(mpc);
        tdcr_config_free(cfg);
        tdcr_config_free(ptr::null_mut());
        tdcr_mpc_free(ptr::null_mut());
        tdcr_zone_free(ptr::null_mut());
        tdcr_sim_free(ptr::null_mut());
    }
}

#[test]
fn zone_from_arrays_matches_file() {
    #[rustfmt::skip]
    let v = [
        0.0, 0.0, 0.0,  1.0, 0.0, 0.0,  1.0, 1.0, 0.0,  0.0, 1.0, 0.0,
        0.0, 0.0, 1.0,  1.0, 0.0, 1.0,  1.0, 1.0, 1.0,  0.0, 1.0, 1.0,
    ];
    #[rustfmt::skip]
    let t: [u32; 36] = [
        0, 2, 1,  0, 3, 2,  4, 5, 6,  4, 6, 7,  0, 1, 5,  0, 5, 4,
        1, 2, 6,  1, 6, 5,  2, 3, 7,  2, 7, 6,  3, 0, 4,  3, 4, 7,
    ];
    unsafe {
        let mut zone = ptr::null_mut();
        assert_eq!(tdcr_zone_from_mesh(v.as_ptr(), 8, t.as_ptr(), 12, &mut zone), TdcrStatus::Ok);
        let p = [0.3, 0.5, 0.5];
        let mut d = TdcrDistance::default();
        assert_eq!(tdcr_zone_distance(zone, p.as_ptr(), &mut d), TdcrStatus::Ok);
        assert!((d.distance - 0.3).abs() < 1e-12);
        assert!((d.gradient[0] - 1.0).abs() < 1e-12);
        tdcr_zone_free(zone);

        // an open mesh is rejected
        let mut zone = ptr::null_mut();
        let s = tdcr_zone_from_mesh(v.as_ptr(), 8, t.as_ptr(), 11, &mut zone);
        assert_eq!(s, TdcrStatus::MeshInvalid);
        assert!(zone.is_null());
    }
}

#[test]
fn mpc_and_simulation_track_a_target() {
    let cfg = config(&format!("{STILL}[mpc]\ns = 0.1\n"));
    let target = [20.0, 10.0, 190.0];
    unsafe {
        let mut mpc = ptr::null_mut();
        assert_eq!(tdcr_mpc_new(cfg, ptr::null(), &mut mpc), TdcrStatus::Ok);
        let mut step = std::mem::MaybeUninit::<TdcrMpcStep>::uninit();
        assert_eq!(tdcr_mpc_step(mpc, target.as_ptr(), step.as_mut_ptr()), TdcrStatus::Ok);
        let step = step.assume_init();
        assert_eq!(step.status, TdcrSolverStatus::Optimal);
        assert!(step.input.iter().any(|u| u.abs() > 1e-6));
        assert_eq!(tdcr_mpc_reset(mpc), TdcrStatus::Ok);
        tdcr_mpc_free(mpc);

        let mut sim = ptr::null_mut();
        assert_eq!(tdcr_sim_new(cfg, &mut sim), TdcrStatus::Ok);
        let mut tick = std::mem::MaybeUninit::<TdcrTick>::uninit();
        let mut last = f64::INFINITY;
        for i in 0..300 {
            assert_eq!(tdcr_sim_step(sim, target.as_ptr(), tick.as_mut_ptr()), TdcrStatus::Ok);
            let t = tick.assume_init_ref();
            assert_eq!(t.tick, i);
            assert_eq!(t.faulted, 0);
            last = t.error_measured;
        }
        assert!(last < 2.0, "final error {last}");
        let mut x = [0.0; TDCR_ACTUATORS];
        assert_eq!(tdcr_sim_state(sim, x.as_mut_ptr()), TdcrStatus::Ok);
        assert!(x.iter().all(|v| v.is_finite()));

        // no target: errors are NaN
        assert_eq!(tdcr_sim_step(sim, ptr::null(), tick.as_mut_ptr()), TdcrStatus::Ok);
        assert!(tick.assume_init_ref().error_measured.is_nan());
        tdcr_sim_free(sim);
        tdcr_config_free(cfg);
    }
}

#[test]
fn infeasible_start_is_reported() {
    let mesh = repo().join("meshes/box.obj");
    let cfg = config(&format!("safety_margin = 45.0\nmesh = {:?}\n", mesh.to_str().unwrap()));
    unsafe {
        let path = cstr(mesh.to_str().unwrap());
        let mut zone = ptr::null_mut();
        assert_eq!(tdcr_zone_load(path.as_ptr(), &mut zone), TdcrStatus::Ok);
        let mut mpc = ptr::null_mut();
        assert_eq!(tdcr_mpc_new(cfg, zone, &mut mpc), TdcrStatus::Ok);
        tdcr_zone_free(zone);
        let mut step = std::mem::MaybeUninit::<TdcrMpcStep>::uninit();
        assert_eq!(tdcr_mpc_step(mpc, ptr::null(), step.as_mut_ptr()), TdcrStatus::Infeasible);
        tdcr_mpc_free(mpc);

        let mut sim = ptr::null_mut();
        assert_eq!(tdcr_sim_new(cfg, &mut sim), TdcrStatus::Ok);
        let mut tick = std::mem::MaybeUninit::<TdcrTick>::uninit();
        assert_eq!(tdcr_sim_step(sim, ptr::null(), tick.as_mut_ptr()), TdcrStatus::Ok);
        let t = tick.assume_init();
        assert_eq!(t.faulted, 1);
        assert_eq!(t.status, TdcrSolverStatus::Infeasible);
        assert!(t.input.iter().all(|u| *u == 0.0));
        tdcr_sim_free(sim);
        tdcr_config_free(cfg);
    }
}

#[test]
fn errors_are_per_thread() {
    unsafe {
        let mut d = TdcrDistance::default();
        assert_eq!(tdcr_zone_distance(ptr::null(), ptr::null(), &mut d), TdcrStatus::NullPointer);
    }
    std::thread::spawn(|| assert!(tdcr_last_error().is_null())).join().unwrap();
    assert!(!last_error().is_empty());
}

#[test]
fn header_is_current_and_compiles_from_c() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = std::fs::read_to_string(dir.join("include/tdcr.h")).unwrap();
    for name in [
        "tdcr_last_error",
        "tdcr_config_load",
        "tdcr_forward_kinematics",
        "tdcr_zone_distance",
        "tdcr_mpc_step",
        "tdcr_sim_step",
        "typedef struct TdcrSimulation TdcrSimulation;",
        "#define TDCR_ACTUATORS 12",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }

    let Ok(_) = Command::new("cc").arg("--version").output() else {
        eprintln!("no C compiler, skipping the C build");
        return;
    };
    // target/<profile>/deps/abi-xxxx -> target/<profile>
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().unwrap().parent().unwrap();
    let lib = profile_dir.join("libtdcr_ffi.a");
    assert!(lib.exists(), "{} not built", lib.display());
    let tmp = std::env::temp_dir().join(format!("tdcr_smoke_{}", std::process::id()));
    let status = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(dir.join("include"))
        .arg(dir.join("tests/c/smoke.c"))
        .arg(&lib)
        .args(["-lm", "-lpthread", "-ldl"])
        .arg("-o")
        .arg(&tmp)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&tmp).arg(repo().join("meshes/box.obj")).output().unwrap();
    let _ = std::fs::remove_file(&tmp);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let fields: Vec<&str> = stdout.split_whitespace().collect();
    assert_eq!(fields[0], env!("CARGO_PKG_VERSION"));
    // box floor is at z = -20
    let d: f64 = fields[3].parse().unwrap();
    assert!((d - 20.0).abs() < 1e-9, "{stdout}");
}
