//! Deterministic software rasterizer for normal and depth buffers, with the
//! adjoint needed to push buffer gradients back onto vertices.
//!
//! Pixel `(x, y)` samples the ray through the pixel center `(x + 0.5, y + 0.5)`:
//! `d = ((x + 0.5 - cx) / fx, (y + 0.5 - cy) / fy, 1)` in camera space. For a
//! triangle with camera-space corners `p0, p1, p2`,
//!
//! ```text
//! c_j = d . (p_{j+1} x p_{j+2}),   C = c_0 + c_1 + c_2,   V = det(p0, p1, p2)
//! b_j = c_j / C                    (perspective-correct barycentrics)
//! z   = V / C                      (camera-space depth of the hit)
//! ```
//!
//! The pixel is covered when every `b_j >= 0`. Triangles whose outward normal
//! points away from the camera are culled. Rows are independent, so the
//! output does not depend on the number of workers.

use rayon::prelude::*;

use crate::deform::{Camera, MIN_DEPTH};
use crate::error::{Error, Result};
use crate::geom::Vec3;

/// Screen-space triangles smaller than this (in px²) are skipped.
pub const MIN_SCREEN_AREA: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct RenderBuffers {
    pub width: usize,
    pub height: usize,
    /// Camera-space unit normals, zero where uncovered.
    pub normal: Vec<Vec3>,
    /// Camera-space depth, `+inf` where uncovered.
    pub depth: Vec<f64>,
    pub coverage: Vec<bool>,
    /// Winning face, `-1` where uncovered.
    pub face_id: Vec<i64>,
    pub bary: Vec<[f64; 3]>,
    pub n_faces: usize,
}

impl RenderBuffers {
    pub fn empty(width: usize, height: usize, n_faces: usize) -> Self {
        let n = width * height;
        RenderBuffers {
            width,
            height,
            normal: vec![Vec3::zeros(); n],
            depth: vec![f64::INFINITY; n],
            coverage: vec![false; n],
            face_id: vec![-1; n],
            bary: vec![[0.0; 3]; n],
            n_faces,
        }
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn covered_count(&self) -> usize {
        self.coverage.iter().filter(|&&c| c).count()
    }
}

/// A posed mesh in world space, seen through a camera.
#[derive(Debug, Clone, Copy)]
pub struct Scene<'a> {
    pub positions: &'a [Vec3],
    pub faces: &'a [[usize; 3]],
    /// World-space unit vertex normals.
    pub normals: &'a [Vec3],
    pub camera: &'a Camera,
}

/// Vertex-space gradients produced by [`rasterize_adjoint`] (world space).
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGrad {
    pub positions: Vec<Vec3>,
    pub normals: Vec<Vec3>,
}

struct FaceSetup {
    id: usize,
    // e_j = p_{j+1} x p_{j+2}
    e: [Vec3; 3],
    volume: f64,
    x0: usize,
    x1: usize,
}

fn camera_space(scene: &Scene) -> Result<(Vec<Vec3>, Vec<Vec3>)> {
    let cam = scene.camera;
    cam.validate()?;
    let r = cam.rotation_matrix();
    let pc = cam.to_camera(scene.positions);
    let nc = scene.normals.iter().map(|n| r * n).collect();
    Ok((pc, nc))
}

/// Pixel index range `[lo, hi]` whose centers fall within `[min, max]`.
fn pixel_span(min: f64, max: f64, size: usize) -> Option<(usize, usize)> {
    let lo = (min - 0.5).ceil().max(0.0);
    let hi = (max - 0.5).floor().min(size as f64 - 1.0);
    if !(lo <= hi) {
        return None;
    }
    Some((lo as usize, hi as usize))
}

#[inline]
fn pixel_ray(cam: &Camera, x: usize, y: usize) -> Vec3 {
    Vec3::new(
        (x as f64 + 0.5 - cam.cx) / cam.fx,
        (y as f64 + 0.5 - cam.cy) / cam.fy,
        1.0,
    )
}

fn setup_faces(scene: &Scene, pc: &[Vec3]) -> Result<Vec<Vec<FaceSetup>>> {
    let cam = scene.camera;
    let (w, h) = (cam.width, cam.height);
    let mut rows: Vec<Vec<FaceSetup>> = (0..h).map(|_| Vec::new()).collect();
    for (fi, f) in scene.faces.iter().enumerate() {
        if f.iter().any(|&i| i >= pc.len()) {
            return Err(Error::invalid(format!("face {fi} indexes past {} vertices", pc.len())));
        }
        let p = [pc[f[0]], pc[f[1]], pc[f[2]]];
        if let Some(k) = (0..3).find(|&k| !(p[k].z > MIN_DEPTH)) {
            return Err(Error::BehindCamera { index: f[k], z: p[k].z });
        }
        let n = (p[1] - p[0]).cross(&(p[2] - p[0]));
        if n.dot(&p[0]) >= 0.0 {
            continue;
        }
        let s: Vec<[f64; 2]> = p
            .iter()
            .map(|q| [cam.fx * q.x / q.z + cam.cx, cam.fy * q.y / q.z + cam.cy])
            .collect();
        let area = 0.5 * ((s[1][0] - s[0][0]) * (s[2][1] - s[0][1]) - (s[2][0] - s[0][0]) * (s[1][1] - s[0][1]));
        if !(area.abs() >= MIN_SCREEN_AREA) {
            continue;
        }
        let (minx, maxx) = (s[0][0].min(s[1][0]).min(s[2][0]), s[0][0].max(s[1][0]).max(s[2][0]));
        let (miny, maxy) = (s[0][1].min(s[1][1]).min(s[2][1]), s[0][1].max(s[1][1]).max(s[2][1]));
        let (Some((x0, x1)), Some((y0, y1))) = (pixel_span(minx, maxx, w), pixel_span(miny, maxy, h)) else {
            continue;
        };
        let e = [p[1].cross(&p[2]), p[2].cross(&p[0]), p[0].cross(&p[1])];
        let volume = p[0].dot(&e[0]);
        for row in rows.iter_mut().take(y1 + 1).skip(y0) {
            row.push(FaceSetup { id: fi, e, volume, x0, x1 });
        }
    }
    Ok(rows)
}

/// Barycentrics and depth of the hit of ray `d`, or `None` when outside.
#[inline]
fn hit(face: &FaceSetup, d: &Vec3) -> Option<([f64; 3], f64)> {
    let c = [d.dot(&face.e[0]), d.dot(&face.e[1]), d.dot(&face.e[2])];
    let total = c[0] + c[1] + c[2];
    if total == 0.0 {
        return None;
    }
    let b = [c[0] / total, c[1] / total, c[2] / total];
    if b.iter().any(|&x| !(x >= 0.0)) {
        return None;
    }
    let z = face.volume / total;
    if !(z > 0.0) {
        return None;
    }
    Some((b, z))
}

struct RowOut {
    normal: Vec<Vec3>,
    depth: Vec<f64>,
    face_id: Vec<i64>,
    bary: Vec<[f64; 3]>,
}

pub fn rasterize(scene: &Scene) -> Result<RenderBuffers> {
    let cam = scene.camera;
    if scene.positions.len() != scene.normals.len() {
        return Err(Error::dim("vertex normals", scene.positions.len(), scene.normals.len()));
    }
    let (pc, nc) = camera_space(scene)?;
    let (w, h) = (cam.width, cam.height);
    let rows = setup_faces(scene, &pc)?;
    let outs: Vec<RowOut> = rows
        .par_iter()
        .enumerate()
        .map(|(y, faces)| {
            let mut out = RowOut {
                normal: vec![Vec3::zeros(); w],
                depth: vec![f64::INFINITY; w],
                face_id: vec![-1; w],
                bary: vec![[0.0; 3]; w],
            };
            for x in 0..w {
                let d = pixel_ray(cam, x, y);
                for face in faces.iter().filter(|f| f.x0 <= x && x <= f.x1) {
                    if let Some((b, z)) = hit(face, &d) {
                        // faces arrive in ascending id order, so ties keep the lower id
                        if z < out.depth[x] {
                            out.depth[x] = z;
                            out.face_id[x] = face.id as i64;
                            out.bary[x] = b;
                        }
                    }
                }
                if out.face_id[x] >= 0 {
                    let f = &scene.faces[out.face_id[x] as usize];
                    let b = out.bary[x];
                    let m = nc[f[0]] * b[0] + nc[f[1]] * b[1] + nc[f[2]] * b[2];
                    let len = m.norm();
                    out.normal[x] = if len > 0.0 { m / len } else { Vec3::zeros() };
                }
            }
            out
        })
        .collect();

    let mut buf = RenderBuffers::empty(w, h, scene.faces.len());
    for (y, row) in outs.into_iter().enumerate() {
        let r = y * w..(y + 1) * w;
        buf.normal[r.clone()].copy_from_slice(&row.normal);
        buf.depth[r.clone()].copy_from_slice(&row.depth);
        buf.face_id[r.clone()].copy_from_slice(&row.face_id);
        buf.bary[r.clone()].copy_from_slice(&row.bary);
        for x in 0..w {
            buf.coverage[y * w + x] = row.face_id[x] >= 0;
        }
    }
    Ok(buf)
}

/// Backward pass of [`rasterize`] at fixed coverage and face assignment.
///
/// `grad_normal` and `grad_depth` are per-pixel gradients of a scalar with
/// respect to the normal and depth buffers; uncovered pixels are ignored.
pub fn rasterize_adjoint(scene: &Scene, buffers: &RenderBuffers, grad_normal: &[Vec3], grad_depth: &[f64]) -> Result<SceneGrad> {
    let cam = scene.camera;
    if buffers.n_faces != scene.faces.len() {
        return Err(Error::invalid(format!(
            "buffers were rendered from {} faces, scene has {}",
            buffers.n_faces,
            scene.faces.len()
        )));
    }
    if buffers.width != cam.width || buffers.height != cam.height {
        return Err(Error::invalid("buffer resolution does not match the camera"));
    }
    let n_px = buffers.len();
    if grad_normal.len() != n_px || grad_depth.len() != n_px {
        return Err(Error::dim("buffer gradients", n_px, grad_normal.len().min(grad_depth.len())));
    }
    let (pc, nc) = camera_space(scene)?;
    let w = cam.width;

    // (face, gradient on camera-space corners, gradient on camera-space corner normals)
    type Contribution = (usize, [Vec3; 3], [Vec3; 3]);
    let per_row: Vec<Vec<Contribution>> = (0..cam.height)
        .into_par_iter()
        .map(|y| {
            let mut out = Vec::new();
            for x in 0..w {
                let i = y * w + x;
                let fid = buffers.face_id[i];
                if fid < 0 {
                    continue;
                }
                let gz = grad_depth[i];
                let gn = grad_normal[i];
                if gz == 0.0 && gn == Vec3::zeros() {
                    continue;
                }
                let f = scene.faces[fid as usize];
                let p = [pc[f[0]], pc[f[1]], pc[f[2]]];
                let n = [nc[f[0]], nc[f[1]], nc[f[2]]];
                let (gp, gnrm) = pixel_grad(&pixel_ray(cam, x, y), &p, &n, gz, &gn);
                out.push((fid as usize, gp, gnrm));
            }
            out
        })
        .collect();

    let mut g_pos = vec![Vec3::zeros(); pc.len()];
    let mut g_nrm = vec![Vec3::zeros(); pc.len()];
    for row in per_row {
        for (fid, gp, gn) in row {
            let f = scene.faces[fid];
            for k in 0..3 {
                g_pos[f[k]] += gp[k];
                g_nrm[f[k]] += gn[k];
            }
        }
    }
    let rt = cam.rotation_matrix().transpose();
    Ok(SceneGrad {
        positions: g_pos.iter().map(|g| rt * g).collect(),
        normals: g_nrm.iter().map(|g| rt * g).collect(),
    })
}

/// Reverse-mode derivative of one pixel's `(depth, normal)` with respect to the
/// camera-space corners and corner normals of its winning triangle.
fn pixel_grad(d: &Vec3, p: &[Vec3; 3], n: &[Vec3; 3], gz: f64, gn: &Vec3) -> ([Vec3; 3], [Vec3; 3]) {
    let e = [p[1].cross(&p[2]), p[2].cross(&p[0]), p[0].cross(&p[1])];
    let c = [d.dot(&e[0]), d.dot(&e[1]), d.dot(&e[2])];
    let total = c[0] + c[1] + c[2];
    let volume = p[0].dot(&e[0]);
    let b = [c[0] / total, c[1] / total, c[2] / total];
    let z = volume / total;

    let mut g_b = [0.0; 3];
    let mut nrm = [Vec3::zeros(); 3];
    if *gn != Vec3::zeros() {
        let m = n[0] * b[0] + n[1] * b[1] + n[2] * b[2];
        let len = m.norm();
        if len > 0.0 {
            let u = m / len;
            let g_m = (gn - u * u.dot(gn)) / len;
            for k in 0..3 {
                g_b[k] = n[k].dot(&g_m);
                nrm[k] = g_m * b[k];
            }
        }
    }
    // b_k = c_k / C,  z = V / C
    let sb: f64 = (0..3).map(|k| g_b[k] * b[k]).sum();
    let g_volume = gz / total;
    let g_c: [f64; 3] = std::array::from_fn(|k| (g_b[k] - sb) / total - gz * z / total);

    let mut pos = [Vec3::zeros(); 3];
    for j in 0..3 {
        let (j1, j2) = ((j + 1) % 3, (j + 2) % 3);
        // dV/dp_j = p_{j+1} x p_{j+2}; c_{j+1} = d.(p_{j+2} x p_j); c_{j+2} = d.(p_j x p_{j+1})
        pos[j] = e[j] * g_volume + d.cross(&p[j2]) * g_c[j1] + p[j1].cross(d) * g_c[j2];
    }
    (pos, nrm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::v3;

    fn cam(size: usize) -> Camera {
        Camera {
            fx: size as f64,
            fy: size as f64,
            cx: size as f64 / 2.0,
            cy: size as f64 / 2.0,
            width: size,
            height: size,
            rotation: [0.0; 3],
            translation: [0.0; 3],
        }
    }

    /// Camera-facing triangle (outward normal -z) at constant depth.
    fn facing_triangle(z: f64, s: f64) -> Vec<Vec3> {
        vec![v3(-s, -s, z), v3(-s, s, z), v3(s, 0.0, z)]
    }

    fn flat_normals(n: usize) -> Vec<Vec3> {
        vec![v3(0.0, 0.0, -1.0); n]
    }

    #[test]
    fn fronto_parallel_triangle() {
        let c = cam(64);
        // small triangle around pixel (32, 32)'s center at z = 2
        let center = v3((32.5 - 32.0) / 64.0 * 2.0, (32.5 - 32.0) / 64.0 * 2.0, 2.0);
        let s = 0.02;
        let pos: Vec<Vec3> = facing_triangle(0.0, s).iter().map(|p| p + center).collect();
        let faces = [[0, 1, 2]];
        let normals = flat_normals(3);
        let buf = rasterize(&Scene { positions: &pos, faces: &faces, normals: &normals, camera: &c }).unwrap();
        let i = 32 * 64 + 32;
        assert!(buf.coverage[i]);
        assert_eq!(buf.depth[i], 2.0);
        assert_eq!(buf.normal[i], v3(0.0, 0.0, -1.0));
        // ring of pixels three away is empty
        for dy in -3i64..=3 {
            for dx in -3i64..=3 {
                if dx.abs() == 3 || dy.abs() == 3 {
                    let j = ((32 + dy) * 64 + 32 + dx) as usize;
                    assert!(!buf.coverage[j]);
                }
            }
        }
    }

    #[test]
    fn empty_mesh_is_background() {
        let c = cam(16);
        let buf = rasterize(&Scene { positions: &[], faces: &[], normals: &[], camera: &c }).unwrap();
        assert!(buf.coverage.iter().all(|&x| !x));
        assert!(buf.depth.iter().all(|d| *d == f64::INFINITY));
        assert!(buf.face_id.iter().all(|&f| f == -1));
    }

    #[test]
    fn back_faces_are_culled() {
        let c = cam(32);
        let mut pos = facing_triangle(1.0, 0.3);
        pos.swap(1, 2);
        let normals = flat_normals(3);
        let buf = rasterize(&Scene { positions: &pos, faces: &[[0, 1, 2]], normals: &normals, camera: &c }).unwrap();
        assert_eq!(buf.covered_count(), 0);
    }

    #[test]
    fn nearer_triangle_wins() {
        let c = cam(32);
        let mut pos = facing_triangle(2.0, 0.6);
        pos.extend(facing_triangle(1.0, 0.3));
        let normals = flat_normals(6);
        let faces = [[0, 1, 2], [3, 4, 5]];
        let buf = rasterize(&Scene { positions: &pos, faces: &faces, normals: &normals, camera: &c }).unwrap();
        let mut both = 0;
        for i in 0..buf.len() {
            if buf.face_id[i] == 1 {
                both += 1;
                assert!((buf.depth[i] - 1.0).abs() < 1e-12);
            }
        }
        assert!(both > 10);
    }

    #[test]
    fn behind_camera_is_an_error() {
        let c = cam(16);
        let pos = facing_triangle(-1.0, 0.3);
        let normals = flat_normals(3);
        let err = rasterize(&Scene { positions: &pos, faces: &[[0, 1, 2]], normals: &normals, camera: &c }).unwrap_err();
        assert!(matches!(err, Error::BehindCamera { index: 0, .. }));
    }

    #[test]
    fn depth_gradient_equals_barycentrics_for_fronto_parallel() {
        let c = cam(32);
        let pos = facing_triangle(1.5, 0.5);
        let normals = flat_normals(3);
        let faces = [[0, 1, 2]];
        let scene = Scene { positions: &pos, faces: &faces, normals: &normals, camera: &c };
        let buf = rasterize(&scene).unwrap();
        let i = (0..buf.len()).find(|&i| buf.coverage[i] && buf.bary[i].iter().all(|&b| b > 0.1)).unwrap();
        let mut gd = vec![0.0; buf.len()];
        gd[i] = 1.0;
        let g = rasterize_adjoint(&scene, &buf, &vec![Vec3::zeros(); buf.len()], &gd).unwrap();
        for k in 0..3 {
            assert!((g.positions[k].z - buf.bary[i][k]).abs() < 1e-12);
            assert!(g.positions[k].x.abs() < 1e-12 && g.positions[k].y.abs() < 1e-12);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let c = cam(16);
        let pos = facing_triangle(1.0, 0.4);
        let normals = flat_normals(3);
        let faces = [[0, 1, 2]];
        let scene = Scene { positions: &pos, faces: &faces, normals: &normals, camera: &c };
        let buf = rasterize(&scene).unwrap();
        let g = rasterize_adjoint(&scene, &buf, &vec![Vec3::zeros(); buf.len()], &vec![0.0; buf.len()]).unwrap();
        assert!(g.positions.iter().chain(&g.normals).all(|v| *v == Vec3::zeros()));
    }

    #[test]
    fn mismatched_scene_is_rejected() {
        let c = cam(16);
        let pos = facing_triangle(1.0, 0.4);
        let normals = flat_normals(3);
        let faces = [[0, 1, 2]];
        let scene = Scene { positions: &pos, faces: &faces, normals: &normals, camera: &c };
        let buf = rasterize(&scene).unwrap();
        let other = Scene { faces: &[], ..scene };
        assert!(rasterize_adjoint(&other, &buf, &vec![Vec3::zeros(); 256], &vec![0.0; 256]).is_err());
    }
}
