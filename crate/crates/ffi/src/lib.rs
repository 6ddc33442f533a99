//! C ABI over the headfit library.
//!
//! Objects cross the boundary as opaque handles created by `hf_*_new` or
//! `hf_*_load` and released with the matching `hf_*_free`. Every fallible call
//! returns an [`HfStatus`]; on failure [`hf_last_error`] describes it. Arrays
//! are flat, row-major `double` buffers owned by the caller.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use headfit::deform::{lbs_pose, Camera, DetailFields};
use headfit::geom::Vec3;
use headfit::hhm::HhmFile;
use headfit::mesh::vertex_normals;
use headfit::model::{FrameParams, HeadModel};
use headfit::raster::{rasterize, RenderBuffers, Scene};
use headfit::rig::Rig;
use headfit::toolkit::synth::{toy_model, SynthConfig};
use headfit::transfer::{encode, predict_offsets, NeutralIdentity, TransferNet};
use headfit::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HfStatus {
    Ok = 0,
    /// Null pointer or a length that does not match the object.
    BadArgument = 1,
    /// Input rejected by validation.
    Invalid = 2,
    Numerical = 3,
    Io = 4,
    /// Malformed file contents.
    Format = 5,
    /// Internal panic caught at the boundary.
    Panic = 6,
}

pub struct HfModel(HeadModel);
pub struct HfRig(Rig);
pub struct HfBuffers(RenderBuffers);
pub struct HfNet(TransferNet);

/// Pinhole camera; rotation is world-to-camera axis-angle.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct HfCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
}

impl From<&HfCamera> for Camera {
    fn from(c: &HfCamera) -> Self {
        Camera {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width as usize,
            height: c.height as usize,
            rotation: c.rotation,
            translation: c.translation,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Fail(HfStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let code = match &e {
            _ if e.is_numerical() => HfStatus::Numerical,
            Error::Io { .. } => HfStatus::Io,
            Error::Format { .. } | Error::Json { .. } => HfStatus::Format,
            _ => HfStatus::Invalid,
        };
        Fail(code, e.to_string())
    }
}

fn bad(msg: impl Into<String>) -> Fail {
    Fail(HfStatus::BadArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> HfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            HfStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(&msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            HfStatus::Panic
        }
    }
}

unsafe fn obj<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| bad(format!("{what} is null")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(bad(format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(bad(format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn out<T>(p: *mut *mut T, value: T) -> Result<(), Fail> {
    if p.is_null() {
        return Err(bad("output handle pointer is null"));
    }
    *p = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn path(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(bad("path is null"));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| bad("path is not UTF-8"))?;
    Ok(PathBuf::from(s))
}

fn vec3s(flat: &[f64]) -> Vec<Vec3> {
    flat.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect()
}

fn write3(dst: &mut [f64], src: &[Vec3]) {
    for (d, s) in dst.chunks_exact_mut(3).zip(src) {
        d.copy_from_slice(s.as_slice());
    }
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn hf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn hf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hf_model_load(path_: *const c_char, out_: *mut *mut HfModel) -> HfStatus {
    guard(|| {
        let p = path(path_)?;
        let m = HeadModel::from_hhm(&HhmFile::load(&p)?)?;
        out(out_, HfModel(m))
    })
}

/// The procedural test head used by the synthetic scenes.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hf_model_toy(out_: *mut *mut HfModel) -> HfStatus {
    guard(|| {
        let m = toy_model(&SynthConfig::default())?;
        out(out_, HfModel(m))
    })
}

/// # Safety
/// `model` must come from `hf_model_*` and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn hf_model_free(model: *mut HfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle; output pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn hf_model_dims(model: *const HfModel, n_vertices: *mut usize, k_beta: *mut usize, k_psi: *mut usize, n_joints: *mut usize) -> HfStatus {
    guard(|| {
        let m = &obj(model, "model")?.0;
        for (p, v) in [(n_vertices, m.n_vertices()), (k_beta, m.k_beta()), (k_psi, m.k_psi()), (n_joints, m.n_joints())] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Builds the dense rig for one identity. The model handle is not consumed.
///
/// # Safety
/// `beta` must hold `n_beta` doubles.
#[no_mangle]
pub unsafe extern "C" fn hf_rig_new(model: *const HfModel, beta: *const f64, n_beta: usize, levels: u32, dilate_facial: bool, out_: *mut *mut HfRig) -> HfStatus {
    guard(|| {
        let m = &obj(model, "model")?.0;
        let b = slice(beta, n_beta, "beta")?.to_vec();
        let rig = Rig::new(m.clone(), b, levels as usize, dilate_facial)?;
        out(out_, HfRig(rig))
    })
}

/// # Safety
/// `rig` must come from `hf_rig_new` and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn hf_rig_free(rig: *mut HfRig) {
    if !rig.is_null() {
        drop(Box::from_raw(rig));
    }
}

/// # Safety
/// `rig` must be a live handle; output pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn hf_rig_dims(rig: *const HfRig, n_dense: *mut usize, n_faces: *mut usize, k_psi: *mut usize) -> HfStatus {
    guard(|| {
        let r = &obj(rig, "rig")?.0;
        for (p, v) in [(n_dense, r.n_dense()), (n_faces, r.topo.faces.len()), (k_psi, r.k_psi())] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Dense triangles as `3 * n_faces` vertex indices.
///
/// # Safety
/// `faces` must have room for `len` entries.
#[no_mangle]
pub unsafe extern "C" fn hf_rig_faces(rig: *const HfRig, faces: *mut u32, len: usize) -> HfStatus {
    guard(|| {
        let r = &obj(rig, "rig")?.0;
        if len != 3 * r.topo.faces.len() {
            return Err(bad(format!("faces buffer holds {len}, need {}", 3 * r.topo.faces.len())));
        }
        let dst = slice_mut(faces, len, "faces")?;
        for (d, f) in dst.chunks_exact_mut(3).zip(&r.topo.faces) {
            for k in 0..3 {
                d[k] = f[k] as u32;
            }
        }
        Ok(())
    })
}

/// 1 for facial dense vertices, 0 elsewhere.
///
/// # Safety
/// `mask` must have room for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn hf_rig_facial_mask(rig: *const HfRig, mask: *mut u8, len: usize) -> HfStatus {
    guard(|| {
        let r = &obj(rig, "rig")?.0;
        if len != r.n_dense() {
            return Err(bad(format!("mask buffer holds {len}, need {}", r.n_dense())));
        }
        for (d, &m) in slice_mut(mask, len, "mask")?.iter_mut().zip(r.facial_mask()) {
            *d = m as u8;
        }
        Ok(())
    })
}

/// Per-frame pose.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct HfPose {
    pub omega: [f64; 3],
    pub global_rot: [f64; 3],
    pub global_trans: [f64; 3],
}

/// Canonical mesh for `psi` plus the offset fields, posed by skinning.
/// `static_field` and `dynamic_field` hold `3 * n_dense` doubles or are null
/// for zero; the dynamic field is masked to the facial region.
///
/// # Safety
/// Every non-null buffer must have the stated length.
#[no_mangle]
pub unsafe extern "C" fn hf_rig_pose(
    rig: *const HfRig,
    psi: *const f64,
    k_psi: usize,
    pose: *const HfPose,
    static_field: *const f64,
    dynamic_field: *const f64,
    canonical_out: *mut f64,
    posed_out: *mut f64,
    len: usize,
) -> HfStatus {
    guard(|| {
        let r = &obj(rig, "rig")?.0;
        let pose = obj(pose, "pose")?;
        let n = r.n_dense();
        if len != 3 * n {
            return Err(bad(format!("mesh buffers hold {len}, need {}", 3 * n)));
        }
        let frame = FrameParams { psi: slice(psi, k_psi, "psi")?.to_vec(), omega: pose.omega, global_rot: pose.global_rot, global_trans: pose.global_trans };
        let mut fields = DetailFields::zeros(n, 1, r.facial_mask().to_vec());
        if !static_field.is_null() {
            fields.static_field = vec3s(slice(static_field, len, "static field")?);
        }
        if !dynamic_field.is_null() {
            fields.set_dynamic(0, vec3s(slice(dynamic_field, len, "dynamic field")?))?;
        }
        let canon = fields.compose(&r.dense_canonical(&frame.psi)?, 0)?;
        let posed = lbs_pose(&r.topo, &r.model.joints, r.model.jaw, &canon, &frame)?;
        if !canonical_out.is_null() {
            write3(slice_mut(canonical_out, len, "canonical output")?, &canon);
        }
        write3(slice_mut(posed_out, len, "posed output")?, &posed);
        Ok(())
    })
}

/// Rasterizes a mesh with smooth vertex normals.
///
/// # Safety
/// `positions` holds `3 * n_vertices` doubles, `faces` holds `3 * n_faces` indices.
#[no_mangle]
pub unsafe extern "C" fn hf_rasterize(
    positions: *const f64,
    n_vertices: usize,
    faces: *const u32,
    n_faces: usize,
    camera: *const HfCamera,
    out_: *mut *mut HfBuffers,
) -> HfStatus {
    guard(|| {
        let cam: Camera = obj(camera, "camera")?.into();
        let pos = vec3s(slice(positions, 3 * n_vertices, "positions")?);
        let f = slice(faces, 3 * n_faces, "faces")?;
        let tris: Vec<[usize; 3]> = f.chunks_exact(3).map(|t| [t[0] as usize, t[1] as usize, t[2] as usize]).collect();
        if tris.iter().flatten().any(|&v| v >= n_vertices) {
            return Err(bad("face index out of range"));
        }
        let (normals, _) = vertex_normals(&pos, &tris);
        let buffers = rasterize(&Scene { positions: &pos, faces: &tris, normals: &normals, camera: &cam })?;
        out(out_, HfBuffers(buffers))
    })
}

/// # Safety
/// `buffers` must come from `hf_rasterize` and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn hf_buffers_free(buffers: *mut HfBuffers) {
    if !buffers.is_null() {
        drop(Box::from_raw(buffers));
    }
}

/// Copies the buffers out; each pointer may be null to skip it. Sizes are
/// `3 * w * h` for normals and `w * h` for the others, row-major from the top.
/// Uncovered pixels have zero normal, infinite depth and face id -1.
///
/// # Safety
/// Non-null pointers must have the sizes above.
#[no_mangle]
pub unsafe extern "C" fn hf_buffers_read(buffers: *const HfBuffers, width: *mut u32, height: *mut u32, normal: *mut f64, depth: *mut f64, face_id: *mut i64) -> HfStatus {
    guard(|| {
        let b = &obj(buffers, "buffers")?.0;
        let n = b.len();
        if !width.is_null() {
            *width = b.width as u32;
        }
        if !height.is_null() {
            *height = b.height as u32;
        }
        if !normal.is_null() {
            write3(slice_mut(normal, 3 * n, "normal")?, &b.normal);
        }
        if !depth.is_null() {
            slice_mut(depth, n, "depth")?.copy_from_slice(&b.depth);
        }
        if !face_id.is_null() {
            slice_mut(face_id, n, "face id")?.copy_from_slice(&b.face_id);
        }
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hf_net_load(path_: *const c_char, out_: *mut *mut HfNet) -> HfStatus {
    guard(|| {
        let p = path(path_)?;
        let net = TransferNet::from_hhm(&HhmFile::load(&p)?)?;
        out(out_, HfNet(net))
    })
}

/// # Safety
/// `net` must come from `hf_net_load` and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn hf_net_free(net: *mut HfNet) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// # Safety
/// `net` must be a live handle; output pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn hf_net_dims(net: *const HfNet, k_psi: *mut usize, d_code: *mut usize) -> HfStatus {
    guard(|| {
        let n = &obj(net, "net")?.0;
        if !k_psi.is_null() {
            *k_psi = n.k_psi();
        }
        if !d_code.is_null() {
            *d_code = n.d_code;
        }
        Ok(())
    })
}

/// Codes for `frames` rows of `psi` (`frames * k_psi`) and `omega` (`frames * 3`)
/// into `codes` (`frames * d_code`).
///
/// # Safety
/// Buffers must have the sizes above.
#[no_mangle]
pub unsafe extern "C" fn hf_encode(net: *const HfNet, psi: *const f64, omega: *const f64, frames: usize, codes: *mut f64) -> HfStatus {
    guard(|| {
        let n = &obj(net, "net")?.0;
        let k = n.k_psi();
        let p = slice(psi, frames * k, "psi")?;
        let o = slice(omega, frames * 3, "omega")?;
        let psi_seq: Vec<Vec<f64>> = (0..frames).map(|f| p[f * k..(f + 1) * k].to_vec()).collect();
        let om: Vec<[f64; 3]> = o.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let q = encode(n, &psi_seq, &om)?;
        let dst = slice_mut(codes, frames * n.d_code, "codes")?;
        for (d, s) in dst.iter_mut().zip(q.iter()) {
            *d = *s;
        }
        Ok(())
    })
}

/// Offsets for one code over a neutral identity of `n` vertices.
/// `positions`, `normals` and `offsets` hold `3 * n` doubles, `mask` holds
/// `n` bytes (nonzero = facial), `code` holds `d_code` doubles.
///
/// # Safety
/// Buffers must have the sizes above.
#[no_mangle]
pub unsafe extern "C" fn hf_predict(
    net: *const HfNet,
    positions: *const f64,
    normals: *const f64,
    mask: *const u8,
    n: usize,
    code: *const f64,
    d_code: usize,
    offsets: *mut f64,
) -> HfStatus {
    guard(|| {
        let net = &obj(net, "net")?.0;
        let id = NeutralIdentity::new(
            vec3s(slice(positions, 3 * n, "positions")?),
            vec3s(slice(normals, 3 * n, "normals")?),
            slice(mask, n, "mask")?.iter().map(|&m| m != 0).collect(),
        )?;
        let q = ndarray::ArrayView1::from(slice(code, d_code, "code")?);
        let d = predict_offsets(net, &id, q)?;
        write3(slice_mut(offsets, 3 * n, "offsets")?, &d);
        Ok(())
    })
}
