use fic_teleop_ffi::*;
use std::ffi::{CStr, CString};
use std::ptr;

fn last_error() -> String {
    let p = fic_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn axis_handle_matches_the_library_controller() {
    use fic_teleop::fic::{
        fic_wrench, AxisErrorState, AxisFicState, FicParams, DEFAULT_VEL_EPSILON,
    };
    let params = FicParams::calibrate(20.0, 0.1, 200.0, 2.0).unwrap();
    let mut axis = ptr::null_mut();
    unsafe {
        assert_eq!(
            fic_axis_new(20.0, 0.1, 200.0, 2.0, &mut axis),
            FicStatus::Ok
        );
        let mut state = AxisFicState::default();
        let mut out = FicAxisOutput::default();
        for k in 0..2000 {
            let t = k as f64 * 1e-3;
            let (err, vel) = (0.3 * (3.0 * t).sin(), 0.9 * (3.0 * t).cos());
            assert_eq!(fic_axis_step(axis, err, vel, &mut out), FicStatus::Ok);
            let (o, next) = fic_wrench(
                AxisErrorState::new(err, vel),
                &state,
                &params,
                DEFAULT_VEL_EPSILON,
            );
            state = next;
            assert_eq!(out.force, o.force);
            assert_eq!(out.phase, o.phase.as_index());
            assert_eq!(out.stored_energy, state.stored_energy);
        }
        let mut bound = 0.0;
        assert_eq!(fic_axis_force_bound(axis, &mut bound), FicStatus::Ok);
        assert_eq!(bound, params.force_bound());
        assert_eq!(fic_axis_reset(axis), FicStatus::Ok);
        assert_eq!(fic_axis_step(axis, 0.0, 0.0, &mut out), FicStatus::Ok);
        assert_eq!(out.force, 0.0);
        fic_axis_free(axis);
    }
}

#[test]
fn failures_report_codes_and_messages() {
    let mut axis = ptr::null_mut();
    unsafe {
        assert_eq!(
            fic_axis_new(-1.0, 0.1, 200.0, 2.0, &mut axis),
            FicStatus::InvalidArgument
        );
        assert!(axis.is_null());
        assert!(last_error().contains("w_max"));
        assert_eq!(
            fic_axis_new(20.0, 0.1, 200.0, 2.0, ptr::null_mut()),
            FicStatus::NullPointer
        );
        assert_eq!(
            fic_axis_step(ptr::null_mut(), 0.0, 0.0, ptr::null_mut()),
            FicStatus::NullPointer
        );

        let mut sim = ptr::null_mut();
        let bad = CString::new("{\"dt\": 1}").unwrap();
        assert_eq!(
            fic_sim_new(bad.as_ptr(), &mut sim),
            FicStatus::InvalidConfig
        );
        assert!(sim.is_null());
        assert_eq!(fic_sim_new(ptr::null(), &mut sim), FicStatus::Ok);
        assert_eq!(
            fic_sim_set_channels(sim, -1.0, 100.0),
            FicStatus::InvalidArgument
        );
        let cmd = FicCommand {
            master_err: [f64::NAN, 0.0],
            ..FicCommand::default()
        };
        assert_eq!(fic_sim_set_command(sim, &cmd), FicStatus::InvalidArgument);
        let mut needed = 0;
        assert_eq!(
            fic_sim_snapshot_json(sim, ptr::null_mut(), 0, &mut needed),
            FicStatus::BufferTooSmall
        );
        assert!(needed > 10);
        fic_sim_free(sim);
        fic_axis_free(ptr::null_mut());
        fic_sim_free(ptr::null_mut());
    }
}

#[test]
fn simulation_handle_runs_and_writes_its_log() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.csv");
    let mut cfg = fic_teleop::simulation::SimConfig::nominal();
    cfg.duration = 0.5;
    let json = CString::new(cfg.to_json()).unwrap();
    let mut sim = ptr::null_mut();
    unsafe {
        assert_eq!(fic_sim_new(json.as_ptr(), &mut sim), FicStatus::Ok);
        let cmd = FicCommand {
            master_err: [0.02, 0.0],
            master_held: true,
            gripper_held: true,
            ..FicCommand::default()
        };
        assert_eq!(fic_sim_set_command(sim, &cmd), FicStatus::Ok);
        let mut finished = false;
        assert_eq!(fic_sim_step(sim, 1000, &mut finished), FicStatus::Ok);
        assert!(!finished);
        let mut t = 0.0;
        assert_eq!(fic_sim_time(sim, &mut t), FicStatus::Ok);
        assert!((t - 0.1).abs() < 1e-12);

        let mut needed = 0;
        fic_sim_snapshot_json(sim, ptr::null_mut(), 0, &mut needed);
        let mut buf = vec![0 as std::ffi::c_char; needed];
        assert_eq!(
            fic_sim_snapshot_json(sim, buf.as_mut_ptr(), buf.len(), &mut needed),
            FicStatus::Ok
        );
        let snap: serde_json::Value =
            serde_json::from_str(CStr::from_ptr(buf.as_ptr()).to_str().unwrap()).unwrap();
        assert_eq!(snap["tick"], 1000);
        assert_eq!(snap["gripper_held"], true);

        assert_eq!(fic_sim_step(sim, u64::MAX, &mut finished), FicStatus::Ok);
        assert!(finished);
        let p = CString::new(path.to_str().unwrap()).unwrap();
        assert_eq!(fic_sim_finish(sim, p.as_ptr()), FicStatus::Ok);
    }
    let log = fic_teleop::experiment_log::LogTable::from_path(&path).unwrap();
    assert_eq!(log.len(), 500);
    let max_x_d = log
        .column("xd_master_0")
        .unwrap()
        .iter()
        .cloned()
        .fold(f64::MIN, f64::max);
    assert!(max_x_d > cfg_x0(&log) + 0.005);
}

fn cfg_x0(log: &fic_teleop::experiment_log::LogTable) -> f64 {
    log.column("xd_master_0").unwrap()[0]
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(fic_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

/// Compiles and runs a C program against the generated header and the
/// shared library.
#[test]
fn header_links_from_c() {
    let Ok(cc) = which_cc() else {
        eprintln!("no C compiler on PATH; header check skipped");
        return;
    };
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR"));
    let exe = std::env::current_exe().unwrap();
    let lib_dir = exe.parent().unwrap().parent().unwrap();
    assert!(
        lib_dir.join("libfic_teleop_ffi.so").exists()
            || lib_dir.join("libfic_teleop_ffi.dylib").exists()
    );
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"
#include "fic_teleop.h"
#include <stdio.h>
int main(void) {
    FicAxis *axis = NULL;
    FicAxisOutput out;
    if (fic_axis_new(20.0, 0.1, 200.0, 2.0, &axis) != FIC_STATUS_OK) return 1;
    if (fic_axis_step(axis, 0.05, 0.0, &out) != FIC_STATUS_OK) return 2;
    fic_axis_free(axis);
    if (fic_axis_new(0.0, 0.1, 200.0, 2.0, &axis) != FIC_STATUS_INVALID_ARGUMENT) return 3;
    if (fic_last_error_message() == NULL) return 4;
    FicSimulation *sim = NULL;
    if (fic_sim_new(NULL, &sim) != FIC_STATUS_OK) return 5;
    bool done = false;
    if (fic_sim_step(sim, 100, &done) != FIC_STATUS_OK) return 6;
    if (fic_sim_finish(sim, NULL) != FIC_STATUS_OK) return 7;
    printf("%.12f\n", out.force);
    return 0;
}
"#,
    )
    .unwrap();
    let bin = dir.path().join("main");
    let status = std::process::Command::new(cc)
        .arg(&src)
        .arg("-I")
        .arg(root.join("include"))
        .arg("-L")
        .arg(lib_dir)
        .arg(format!("-Wl,-rpath,{}", lib_dir.display()))
        .arg("-lfic_teleop_ffi")
        .arg("-o")
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success());
    let out = std::process::Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    let force: f64 = String::from_utf8(out.stdout)
        .unwrap()
        .trim()
        .parse()
        .unwrap();
    assert!(force > 0.0);
}

fn which_cc() -> Result<String, ()> {
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    match std::process::Command::new(&cc).arg("--version").output() {
        Ok(o) if o.status.success() => Ok(cc),
        _ => Err(()),
    }
}
