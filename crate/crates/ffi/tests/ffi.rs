use std::ffi::{c_char, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use flowplan_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    let n = unsafe { fp_last_error(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n.min(255)].iter().map(|&c| c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

#[test]
fn codebook_roundtrip_and_errors() {
    let mut cb = ptr::null_mut();
    assert_eq!(unsafe { fp_codebook_new(-8.0, 8.0, 0.1, &mut cb) }, FpStatus::Ok);
    assert_eq!(unsafe { fp_codebook_size(cb) }, 161);
    let mut id = 0u32;
    assert_eq!(unsafe { fp_codebook_quantize(cb, 0.04, true, &mut id) }, FpStatus::Ok);
    assert_eq!(id, 80);
    let mut v = f64::NAN;
    assert_eq!(unsafe { fp_codebook_dequantize(cb, id, &mut v) }, FpStatus::Ok);
    assert!(v.abs() < 1e-12);
    assert_eq!(unsafe { fp_codebook_quantize(cb, 9.0, true, &mut id) }, FpStatus::OutOfRange);
    assert!(last_error().contains("outside codebook range"));
    assert_eq!(unsafe { fp_codebook_dequantize(cb, 161, &mut v) }, FpStatus::OutOfRange);
    assert_eq!(unsafe { fp_codebook_quantize(cb, 0.0, true, ptr::null_mut()) }, FpStatus::NullPointer);
    unsafe { fp_codebook_free(cb) };

    let mut bad = ptr::null_mut();
    assert_eq!(unsafe { fp_codebook_new(1.0, 0.0, 0.1, &mut bad) }, FpStatus::InvalidArgument);
    assert!(bad.is_null());
    assert_eq!(unsafe { fp_codebook_size(ptr::null()) }, 0);
}

#[test]
fn scene_scoring_matches_core() {
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { fp_scene_generate(5, 1, &mut s) }, FpStatus::Ok);
    let mut wps = [0.0; 2 * FP_WAYPOINTS];
    assert_eq!(unsafe { fp_scene_expert(s, wps.as_mut_ptr()) }, FpStatus::Ok);
    let mut r = FpReward::default();
    assert_eq!(unsafe { fp_scene_score(s, wps.as_ptr(), 5.0, 5.0, 2.0, &mut r) }, FpStatus::Ok);
    let scene = flowplan::sim::generate_scene(5, flowplan::sim::Difficulty::Medium);
    let b = flowplan::sim::score_waypoints(&scene, &scene.expert, &Default::default()).unwrap();
    assert_eq!(r.reward, b.reward);
    assert_eq!((r.nc, r.dac, r.ttc, r.comfort), (1.0, 1.0, 1.0, 1.0));
    assert_eq!(unsafe { fp_scene_score(s, wps.as_ptr(), -1.0, 5.0, 2.0, &mut r) }, FpStatus::InvalidArgument);
    let mut ego = [0.0; 5];
    let mut cmd = 9u32;
    assert_eq!(unsafe { fp_scene_ego(s, ego.as_mut_ptr(), &mut cmd) }, FpStatus::Ok);
    assert_eq!(ego[3], scene.ego0.v);
    assert_eq!(cmd as usize, scene.command.index());
    unsafe { fp_scene_free(s) };
    assert_eq!(unsafe { fp_scene_generate(5, 3, &mut s) }, FpStatus::InvalidArgument);
    assert_eq!(unsafe { fp_scene_expert(ptr::null(), wps.as_mut_ptr()) }, FpStatus::NullPointer);
}

fn write_policy(dir: &Path) -> PathBuf {
    use flowplan::codebook::CodebookSpec;
    use flowplan::embedding::EmbeddingTable;
    use flowplan::net::{Arch, PolicyParams};
    let arch = Arch { hidden: 16, d_in: 4, ..Arch::desk() };
    let table = EmbeddingTable::random(161, 4, 0);
    let p = PolicyParams::init(arch, CodebookSpec::desk(), &table, 1).unwrap();
    let path = dir.join("p.wamfnet");
    p.save(&path).unwrap();
    path
}

#[test]
fn policy_sampling_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(write_policy(dir.path()).to_str().unwrap()).unwrap();
    let mut p = ptr::null_mut();
    assert_eq!(unsafe { fp_policy_load(path.as_ptr(), &mut p) }, FpStatus::Ok);
    let ego = [0.0, 0.0, 0.0, 1.0, 0.0];
    let mut a = [0u32; FP_TOKENS];
    let mut b = [0u32; FP_TOKENS];
    let mut w = [0.0; 2 * FP_WAYPOINTS];
    assert_eq!(unsafe { fp_policy_sample(p, 1, ego.as_ptr(), 5, 42, a.as_mut_ptr(), w.as_mut_ptr()) }, FpStatus::Ok);
    assert_eq!(unsafe { fp_policy_sample(p, 1, ego.as_ptr(), 5, 42, b.as_mut_ptr(), ptr::null_mut()) }, FpStatus::Ok);
    assert_eq!(a, b);
    assert!(a.iter().all(|&t| t < 161));
    assert!((w[0] - (-8.0 + 0.1 * a[0] as f64)).abs() < 1e-9);
    assert_eq!(unsafe { fp_policy_sample(p, 7, ego.as_ptr(), 5, 42, a.as_mut_ptr(), ptr::null_mut()) }, FpStatus::InvalidArgument);
    assert_eq!(unsafe { fp_policy_sample(p, 1, ego.as_ptr(), 0, 42, a.as_mut_ptr(), ptr::null_mut()) }, FpStatus::InvalidArgument);
    unsafe { fp_policy_free(p) };

    let missing = CString::new(dir.path().join("none.wamfnet").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { fp_policy_load(missing.as_ptr(), &mut p) }, FpStatus::Io);
    let junk = dir.path().join("junk.wamfnet");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { fp_policy_load(junk.as_ptr(), &mut p) }, FpStatus::Checkpoint);
    assert_eq!(unsafe { fp_policy_load(ptr::null(), &mut p) }, FpStatus::NullPointer);
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/flowplan.h")).unwrap();
    for name in [
        "fp_last_error",
        "fp_codebook_new",
        "fp_codebook_free",
        "fp_codebook_quantize",
        "fp_policy_load",
        "fp_policy_sample",
        "fp_scene_generate",
        "fp_scene_score",
        "typedef struct FpPolicy FpPolicy;",
        "FP_STATUS_OUT_OF_RANGE = 3",
        "#define FP_TOKENS 16",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}

/// Compiles a small C program against the header and the static library.
#[test]
fn c_program_links_and_runs() {
    let tmp = PathBuf::from(env!("CARGO_TARGET_TMPDIR"));
    let profile_dir = tmp.parent().unwrap().join(if cfg!(debug_assertions) { "debug" } else { "release" });
    let lib = profile_dir.join("libflowplan_ffi.a");
    if !lib.exists() || Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping: static library or C compiler unavailable");
        return;
    }
    let src = tmp.join("ffi_smoke.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include "flowplan.h"
int main(void) {
    FpCodebook *cb = NULL;
    if (fp_codebook_new(-8.0, 8.0, 0.1, &cb) != FP_STATUS_OK) return 1;
    uint32_t id = 0;
    if (fp_codebook_quantize(cb, 1.0, true, &id) != FP_STATUS_OK || id != 90) return 2;
    if (fp_codebook_quantize(cb, 100.0, true, &id) != FP_STATUS_OUT_OF_RANGE) return 3;
    char msg[128];
    fp_last_error(msg, sizeof msg);
    fp_codebook_free(cb);
    FpScene *s = NULL;
    if (fp_scene_generate(3, 2, &s) != FP_STATUS_OK) return 4;
    double wps[2 * FP_WAYPOINTS];
    fp_scene_expert(s, wps);
    FpReward r;
    if (fp_scene_score(s, wps, 5, 5, 2, &r) != FP_STATUS_OK || r.nc != 1.0) return 5;
    fp_scene_free(s);
    printf("%s\n", msg);
    return 0;
}
"#,
    )
    .unwrap();
    let exe = tmp.join("ffi_smoke");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(Path::new(env!("CARGO_MANIFEST_DIR")).join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "C program exited with {:?}", out.status);
    assert!(String::from_utf8_lossy(&out.stdout).contains("outside codebook range"));
}
