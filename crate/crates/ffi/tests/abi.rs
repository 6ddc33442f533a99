use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use headfit::deform::{lbs_pose, Camera};
use headfit::mesh::vertex_normals;
use headfit::model::FrameParams;
use headfit::raster::{rasterize, Scene};
use headfit::rig::Rig;
use headfit::toolkit::synth::{toy_model, SynthConfig};
use headfit::transfer::{encode, predict_offsets, NetArch, NeutralIdentity, TransferNet};
use headfit_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(hf_last_error()) }.to_string_lossy().into_owned()
}

fn check(s: HfStatus) {
    assert_eq!(s, HfStatus::Ok, "{}", last_error());
}

struct Fixture {
    model: *mut HfModel,
    rig: *mut HfRig,
    core: Rig,
}

impl Drop for Fixture {
    fn drop(&mut self) {
        unsafe {
            hf_rig_free(self.rig);
            hf_model_free(self.model);
        }
    }
}

fn fixture() -> Fixture {
    let mut model = ptr::null_mut();
    let mut rig = ptr::null_mut();
    unsafe {
        check(hf_model_toy(&mut model));
        let mut kb = 0;
        check(hf_model_dims(model, ptr::null_mut(), &mut kb, ptr::null_mut(), ptr::null_mut()));
        let beta: Vec<f64> = (0..kb).map(|i| 0.1 * i as f64 - 0.2).collect();
        check(hf_rig_new(model, beta.as_ptr(), kb, 1, true, &mut rig));
        let core = Rig::new(toy_model(&SynthConfig::default()).unwrap(), beta, 1, true).unwrap();
        Fixture { model, rig, core }
    }
}

fn pose() -> HfPose {
    HfPose { omega: [0.2, 0.0, 0.0], global_rot: [0.05, -0.1, 0.02], global_trans: [0.0, 0.0, 0.7] }
}

fn posed_through_abi(f: &Fixture, psi: &[f64]) -> Vec<f64> {
    let n = f.core.n_dense();
    let mut out = vec![0.0; 3 * n];
    unsafe {
        check(hf_rig_pose(f.rig, psi.as_ptr(), psi.len(), &pose(), ptr::null(), ptr::null(), ptr::null_mut(), out.as_mut_ptr(), 3 * n));
    }
    out
}

#[test]
fn pose_matches_library() {
    let f = fixture();
    let (mut n, mut nf, mut k) = (0, 0, 0);
    unsafe { check(hf_rig_dims(f.rig, &mut n, &mut nf, &mut k)) };
    assert_eq!((n, nf, k), (f.core.n_dense(), f.core.topo.faces.len(), f.core.k_psi()));
    let psi: Vec<f64> = (0..k).map(|i| 0.3 * (i as f64).sin()).collect();
    let got = posed_through_abi(&f, &psi);
    let p = pose();
    let frame = FrameParams { psi: psi.clone(), omega: p.omega, global_rot: p.global_rot, global_trans: p.global_trans };
    let want = lbs_pose(&f.core.topo, &f.core.model.joints, f.core.model.jaw, &f.core.dense_canonical(&psi).unwrap(), &frame).unwrap();
    let want: Vec<f64> = want.iter().flat_map(|v| [v.x, v.y, v.z]).collect();
    assert_eq!(got, want);
}

#[test]
fn dynamic_field_is_masked() {
    let f = fixture();
    let n = f.core.n_dense();
    let k = f.core.k_psi();
    let psi = vec![0.0; k];
    let field = vec![1e-3; 3 * n];
    let mut with = vec![0.0; 3 * n];
    let mut plain = vec![0.0; 3 * n];
    let mut mask = vec![0u8; n];
    unsafe {
        check(hf_rig_facial_mask(f.rig, mask.as_mut_ptr(), n));
    }
    assert_eq!(unsafe { hf_rig_pose(f.rig, psi.as_ptr(), k, &pose(), ptr::null(), field.as_ptr(), with.as_mut_ptr(), ptr::null_mut(), 0) }, HfStatus::BadArgument);
    let mut posed = vec![0.0; 3 * n];
    unsafe {
        check(hf_rig_pose(f.rig, psi.as_ptr(), k, &pose(), ptr::null(), field.as_ptr(), with.as_mut_ptr(), posed.as_mut_ptr(), 3 * n));
        check(hf_rig_pose(f.rig, psi.as_ptr(), k, &pose(), ptr::null(), ptr::null(), plain.as_mut_ptr(), posed.as_mut_ptr(), 3 * n));
    }
    assert!(mask.contains(&1) && mask.contains(&0));
    for v in 0..n {
        for c in 0..3 {
            let d = with[3 * v + c] - plain[3 * v + c];
            if mask[v] == 0 {
                assert_eq!(d, 0.0);
            } else {
                assert!((d - 1e-3).abs() < 1e-15);
            }
        }
    }
}

fn camera() -> HfCamera {
    let c = SynthConfig { width: 48, height: 40, ..Default::default() }.camera();
    HfCamera { fx: c.fx, fy: c.fy, cx: c.cx, cy: c.cy, width: 48, height: 40, rotation: c.rotation, translation: c.translation }
}

#[test]
fn rasterize_matches_library() {
    let f = fixture();
    let k = f.core.k_psi();
    let posed = posed_through_abi(&f, &vec![0.0; k]);
    let nf = f.core.topo.faces.len();
    let mut faces = vec![0u32; 3 * nf];
    unsafe { check(hf_rig_faces(f.rig, faces.as_mut_ptr(), faces.len())) };
    let cam = camera();
    let mut buf = ptr::null_mut();
    unsafe { check(hf_rasterize(posed.as_ptr(), f.core.n_dense(), faces.as_ptr(), nf, &cam, &mut buf)) };
    let (mut w, mut h) = (0, 0);
    let mut normal = vec![0.0; 3 * 48 * 40];
    let mut depth = vec![0.0; 48 * 40];
    let mut ids = vec![0i64; 48 * 40];
    unsafe {
        check(hf_buffers_read(buf, &mut w, &mut h, normal.as_mut_ptr(), depth.as_mut_ptr(), ids.as_mut_ptr()));
        hf_buffers_free(buf);
    }
    assert_eq!((w, h), (48, 40));

    let pos: Vec<_> = posed.chunks(3).map(|c| headfit::geom::Vec3::new(c[0], c[1], c[2])).collect();
    let (normals, _) = vertex_normals(&pos, &f.core.topo.faces);
    let core_cam: Camera = SynthConfig { width: 48, height: 40, ..Default::default() }.camera();
    let want = rasterize(&Scene { positions: &pos, faces: &f.core.topo.faces, normals: &normals, camera: &core_cam }).unwrap();
    assert_eq!(depth, want.depth);
    assert_eq!(ids, want.face_id);
    assert!(ids.iter().any(|&i| i >= 0));
    let wn: Vec<f64> = want.normal.iter().flat_map(|v| [v.x, v.y, v.z]).collect();
    assert_eq!(normal, wn);
}

#[test]
fn net_round_trip_through_file() {
    let f = fixture();
    let k = f.core.k_psi();
    let arch = NetArch { encoder_hidden: vec![8], geo_hidden: vec![8], d_code: 4 };
    let mut net = TransferNet::new(k, &arch, 3).unwrap();
    for l in net.geo.layers.iter_mut() {
        l.w.mapv_inplace(|x| x + 0.05);
    }
    let net = net.quantized();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.hhm");
    net.to_hhm().save(&path).unwrap();

    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    unsafe { check(hf_net_load(c.as_ptr(), &mut h)) };
    let (mut kp, mut d) = (0, 0);
    unsafe { check(hf_net_dims(h, &mut kp, &mut d)) };
    assert_eq!((kp, d), (k, 4));

    let psi: Vec<f64> = (0..2 * k).map(|i| 0.1 * i as f64).collect();
    let omega = [0.1, 0.0, 0.0, 0.2, 0.0, 0.0];
    let mut codes = vec![0.0; 2 * d];
    unsafe { check(hf_encode(h, psi.as_ptr(), omega.as_ptr(), 2, codes.as_mut_ptr())) };
    let seq = vec![psi[..k].to_vec(), psi[k..].to_vec()];
    let want = encode(&net, &seq, &[[0.1, 0.0, 0.0], [0.2, 0.0, 0.0]]).unwrap();
    assert_eq!(codes, want.iter().copied().collect::<Vec<_>>());

    let neutral = f.core.neutral_dense().unwrap();
    let normals = f.core.neutral_normals().unwrap();
    let mask: Vec<u8> = f.core.facial_mask().iter().map(|&m| m as u8).collect();
    let n = neutral.len();
    let flat = |v: &[headfit::geom::Vec3]| v.iter().flat_map(|p| [p.x, p.y, p.z]).collect::<Vec<f64>>();
    let mut offsets = vec![0.0; 3 * n];
    unsafe { check(hf_predict(h, flat(&neutral).as_ptr(), flat(&normals).as_ptr(), mask.as_ptr(), n, codes.as_ptr(), d, offsets.as_mut_ptr())) };
    let id = NeutralIdentity::new(neutral, normals, f.core.facial_mask().to_vec()).unwrap();
    let want = predict_offsets(&net, &id, want.row(0)).unwrap();
    assert_eq!(offsets, flat(&want));
    assert!(offsets.iter().any(|&x| x != 0.0));
    unsafe { hf_net_free(h) };
}

#[test]
fn errors_carry_codes_and_messages() {
    let f = fixture();
    let mut h = ptr::null_mut();
    let missing = CString::new("/nonexistent/model.hhm").unwrap();
    assert_eq!(unsafe { hf_model_load(missing.as_ptr(), &mut h) }, HfStatus::Io);
    assert!(last_error().contains("/nonexistent/model.hhm"));
    assert!(h.is_null());

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.hhm");
    std::fs::write(&junk, b"not a model").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { hf_net_load(junk.as_ptr(), &mut ptr::null_mut()) }, HfStatus::Format);

    assert_eq!(unsafe { hf_model_load(ptr::null(), &mut h) }, HfStatus::BadArgument);
    assert_eq!(unsafe { hf_rig_dims(ptr::null(), ptr::null_mut(), ptr::null_mut(), ptr::null_mut()) }, HfStatus::BadArgument);
    assert!(last_error().contains("null"));
    assert_eq!(unsafe { hf_rig_new(f.model, ptr::null(), 0, 1, true, &mut ptr::null_mut()) }, HfStatus::Invalid);

    let k = f.core.k_psi();
    let n = f.core.n_dense();
    let psi = vec![0.0; k];
    let mut out = vec![0.0; 3 * n];
    let behind = HfPose { omega: [0.0; 3], global_rot: [0.0; 3], global_trans: [0.0, 0.0, -1.0] };
    unsafe { check(hf_rig_pose(f.rig, psi.as_ptr(), k, &behind, ptr::null(), ptr::null(), ptr::null_mut(), out.as_mut_ptr(), 3 * n)) };
    let nf = f.core.topo.faces.len();
    let mut faces = vec![0u32; 3 * nf];
    unsafe { check(hf_rig_faces(f.rig, faces.as_mut_ptr(), faces.len())) };
    let s = unsafe { hf_rasterize(out.as_ptr(), n, faces.as_ptr(), nf, &camera(), &mut ptr::null_mut()) };
    assert_eq!(s, HfStatus::Numerical, "{}", last_error());
    faces[0] = n as u32;
    let s = unsafe { hf_rasterize(out.as_ptr(), n, faces.as_ptr(), nf, &camera(), &mut ptr::null_mut()) };
    assert_eq!(s, HfStatus::BadArgument);

    unsafe { check(hf_rig_dims(f.rig, ptr::null_mut(), ptr::null_mut(), ptr::null_mut())) };
    assert_eq!(last_error(), "");
    unsafe {
        hf_model_free(ptr::null_mut());
        hf_net_free(ptr::null_mut());
    }
}

#[test]
fn version_matches_crate() {
    let v = unsafe { CStr::from_ptr(hf_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/headfit.h");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        format!(
            "#include \"{header}\"\nint main(void) {{ HfModel *m = 0; HfStatus s = hf_model_toy(&m); hf_model_free(m); return s == HF_STATUS_OK ? 0 : 1; }}\n"
        ),
    )
    .unwrap();
    for (compiler, lang) in [("cc", "c"), ("c++", "c++")] {
        let out = Command::new(compiler).args(["-fsyntax-only", "-Wall", "-Werror", "-x", lang]).arg(&src).output();
        let out = out.unwrap_or_else(|e| panic!("{compiler}: {e}"));
        assert!(out.status.success(), "{compiler}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn c_program_links_and_runs() {
    let deps = std::env::current_exe().unwrap().parent().unwrap().to_path_buf();
    let lib_dir = deps.parent().unwrap();
    assert!(lib_dir.join("libheadfit_ffi.so").exists(), "shared library not built in {}", lib_dir.display());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include "headfit.h"
int main(void) {
    HfModel *m = NULL;
    HfRig *r = NULL;
    size_t kb = 0, n = 0;
    if (hf_model_toy(&m) != HF_STATUS_OK) return 1;
    if (hf_model_dims(m, NULL, &kb, NULL, NULL) != HF_STATUS_OK) return 2;
    double beta[64] = {0};
    if (hf_rig_new(m, beta, kb, 1, true, &r) != HF_STATUS_OK) return 3;
    if (hf_rig_dims(r, &n, NULL, NULL) != HF_STATUS_OK || n == 0) return 4;
    if (hf_rig_dims(NULL, &n, NULL, NULL) != HF_STATUS_BAD_ARGUMENT) return 5;
    printf("%zu %s\n", n, hf_last_error());
    hf_rig_free(r);
    hf_model_free(m);
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("main");
    let out = Command::new("cc")
        .arg(&src)
        .arg(format!("-I{}/include", env!("CARGO_MANIFEST_DIR")))
        .arg(format!("-L{}", lib_dir.display()))
        .args(["-lheadfit_ffi", "-o"])
        .arg(&exe)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&exe).env("LD_LIBRARY_PATH", lib_dir).output().unwrap();
    assert!(run.status.success(), "exit {:?}", run.status);
    assert!(String::from_utf8_lossy(&run.stdout).contains("rig is null"));
}
