//! Detail-field composition, linear blend skinning and pinhole projection.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::geom::{is_finite3, rodrigues, rodrigues_jacobian, Affine, Mat3, Vec3};
use crate::mesh::DenseTopology;
use crate::model::{FrameParams, Joint};

/// Static offset field plus one facial-only dynamic field per frame.
///
/// Dynamic fields can only be written through [`DetailFields::set_dynamic`]
/// and [`DetailFields::dynamic_mut_with`], both of which zero every vertex
/// outside the facial mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DetailFields {
    pub static_field: Vec<Vec3>,
    dynamic: Vec<Vec<Vec3>>,
    mask: Vec<bool>,
}

impl DetailFields {
    pub fn zeros(n_dense: usize, frames: usize, facial_mask: Vec<bool>) -> Self {
        assert_eq!(facial_mask.len(), n_dense);
        DetailFields {
            static_field: vec![Vec3::zeros(); n_dense],
            dynamic: vec![vec![Vec3::zeros(); n_dense]; frames],
            mask: facial_mask,
        }
    }

    pub fn n_dense(&self) -> usize {
        self.static_field.len()
    }

    pub fn frames(&self) -> usize {
        self.dynamic.len()
    }

    pub fn facial_mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn dynamic(&self, i: usize) -> &[Vec3] {
        &self.dynamic[i]
    }

    pub fn dynamic_all(&self) -> &[Vec<Vec3>] {
        &self.dynamic
    }

    pub fn set_dynamic(&mut self, i: usize, mut field: Vec<Vec3>) -> Result<()> {
        if i >= self.frames() {
            return Err(Error::invalid(format!("frame {i} out of range for {} frames", self.frames())));
        }
        check_len("dynamic field", self.n_dense(), field.len())?;
        if field.iter().any(|v| !is_finite3(v)) {
            return Err(Error::numerical(format!("dynamic field {i} is not finite")));
        }
        apply_mask(&mut field, &self.mask);
        self.dynamic[i] = field;
        Ok(())
    }

    /// Mutates a dynamic field in place, re-applying the mask afterwards.
    pub fn dynamic_mut_with<R>(&mut self, i: usize, f: impl FnOnce(&mut [Vec3]) -> R) -> R {
        let r = f(&mut self.dynamic[i]);
        apply_mask(&mut self.dynamic[i], &self.mask);
        r
    }

    pub fn push_frame(&mut self, field: Vec<Vec3>) -> Result<()> {
        self.dynamic.push(vec![Vec3::zeros(); self.n_dense()]);
        let i = self.frames() - 1;
        self.set_dynamic(i, field)
    }

    /// `V^s + static + dynamic(i)`
    pub fn compose(&self, dense: &[Vec3], i: usize) -> Result<Vec<Vec3>> {
        if i >= self.frames() {
            return Err(Error::invalid(format!("frame {i} out of range for {} frames", self.frames())));
        }
        check_len("dense canonical mesh", self.n_dense(), dense.len())?;
        Ok(dense
            .iter()
            .zip(&self.static_field)
            .zip(&self.dynamic[i])
            .map(|((v, g), f)| v + g + f)
            .collect())
    }

    /// Per-vertex mean of the dynamic fields over frames.
    /// Moves `s` times the temporal mean of the dynamic fields into the static field.
    /// Every composed frame is unchanged up to rounding.
    pub fn shift_mean(&mut self, s: f64) {
        let mean = self.temporal_mean();
        for (g, m) in self.static_field.iter_mut().zip(&mean) {
            *g += m * s;
        }
        for i in 0..self.frames() {
            self.dynamic_mut_with(i, |d| {
                for (v, m) in d.iter_mut().zip(&mean) {
                    *v -= m * s;
                }
            });
        }
    }

    pub fn temporal_mean(&self) -> Vec<Vec3> {
        let mut mean = vec![Vec3::zeros(); self.n_dense()];
        for f in &self.dynamic {
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v;
            }
        }
        let n = self.frames().max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }
}

fn apply_mask(field: &mut [Vec3], mask: &[bool]) {
    for (v, &m) in field.iter_mut().zip(mask) {
        if !m {
            *v = Vec3::zeros();
        }
    }
}

/// Pinhole camera. Extrinsics map world to camera; the camera looks down +z.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World-to-camera rotation, axis-angle.
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
}

/// Points closer than this to the image plane are rejected.
pub const MIN_DEPTH: f64 = 1e-6;

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.fx.is_finite() || !self.fy.is_finite() {
            return Err(Error::invalid("camera focal lengths must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("camera image size must be at least 1x1"));
        }
        if !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(Error::invalid("camera principal point is not finite"));
        }
        Ok(())
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        rodrigues(&Vec3::from(self.rotation))
    }

    pub fn to_camera(&self, p: &[Vec3]) -> Vec<Vec3> {
        let r = self.rotation_matrix();
        let t = Vec3::from(self.translation);
        p.iter().map(|x| r * x + t).collect()
    }

    /// Same intrinsics at a different resolution; the principal point scales with it.
    pub fn resized(&self, width: usize, height: usize) -> Camera {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Camera {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
            ..self.clone()
        }
    }
}

/// Projects world points to continuous pixel coordinates.
pub fn project(points: &[Vec3], cam: &Camera) -> Result<Vec<[f64; 2]>> {
    let cp = cam.to_camera(points);
    cp.iter()
        .enumerate()
        .map(|(i, p)| {
            if !(p.z > MIN_DEPTH) {
                return Err(Error::BehindCamera { index: i, z: p.z });
            }
            Ok([cam.fx * p.x / p.z + cam.cx, cam.fy * p.y / p.z + cam.cy])
        })
        .collect()
}

/// Adjoint of [`project`]: pixel-space gradients to world-space gradients.
pub fn project_adjoint(points: &[Vec3], cam: &Camera, grad_uv: &[[f64; 2]]) -> Vec<Vec3> {
    let r = cam.rotation_matrix();
    let rt = r.transpose();
    let cp = cam.to_camera(points);
    cp.iter()
        .zip(grad_uv)
        .map(|(p, g)| {
            let iz = 1.0 / p.z;
            let gc = Vec3::new(
                g[0] * cam.fx * iz,
                g[1] * cam.fy * iz,
                -(g[0] * cam.fx * p.x + g[1] * cam.fy * p.y) * iz * iz,
            );
            rt * gc
        })
        .collect()
}

/// Per-joint local rotations for a frame: root from `global_rot`, jaw from `omega`.
pub fn joint_rotations(joints: &[Joint], jaw: usize, frame: &FrameParams) -> Vec<Vec3> {
    joints
        .iter()
        .enumerate()
        .map(|(j, joint)| {
            if joint.parent.is_none() {
                frame.global_rot_vec()
            } else if j == jaw {
                frame.omega_vec()
            } else {
                Vec3::zeros()
            }
        })
        .collect()
}

/// Parents before children.
pub fn topological_order(joints: &[Joint]) -> Vec<usize> {
    let mut order = Vec::with_capacity(joints.len());
    let mut placed = vec![false; joints.len()];
    while order.len() < joints.len() {
        let before = order.len();
        for (j, joint) in joints.iter().enumerate() {
            if !placed[j] && joint.parent.is_none_or(|p| placed[p]) {
                placed[j] = true;
                order.push(j);
            }
        }
        assert!(order.len() > before, "joint graph has a cycle");
    }
    order
}

/// Skinning transforms of every joint: `T_j = T_parent ∘ L_j` with
/// `L_j(x) = R_j (x - r_j) + r_j (+ t for the root)`.
pub fn forward_kinematics(joints: &[Joint], rotations: &[Vec3], root_trans: &Vec3) -> Result<Vec<Affine>> {
    let mut out = vec![Affine::identity(); joints.len()];
    for j in topological_order(joints) {
        let joint = &joints[j];
        let r = rodrigues(&rotations[j]);
        let mut local = Affine { a: r, b: joint.rest - r * joint.rest };
        if joint.parent.is_none() {
            local.b += root_trans;
        }
        let t = match joint.parent {
            Some(p) => out[p].compose(&local),
            None => local,
        };
        if !t.is_finite() {
            return Err(Error::numerical(format!("non-finite transform for joint `{}`", joint.name)));
        }
        out[j] = t;
    }
    Ok(out)
}

/// Per-vertex blended transforms from dense skin weights.
pub fn blend_transforms(topo: &DenseTopology, transforms: &[Affine]) -> Vec<Affine> {
    (0..topo.n_dense())
        .map(|v| {
            let mut a = Mat3::zeros();
            let mut b = Vec3::zeros();
            for (w, t) in topo.weight_row(v).iter().zip(transforms) {
                if *w != 0.0 {
                    a += t.a * *w;
                    b += t.b * *w;
                }
            }
            Affine { a, b }
        })
        .collect()
}

/// Poses a canonical dense mesh with linear blend skinning.
pub fn lbs_pose(topo: &DenseTopology, joints: &[Joint], jaw: usize, canonical: &[Vec3], frame: &FrameParams) -> Result<Vec<Vec3>> {
    check_len("canonical mesh", topo.n_dense(), canonical.len())?;
    let rots = joint_rotations(joints, jaw, frame);
    let transforms = forward_kinematics(joints, &rots, &frame.global_trans_vec())?;
    let blended = blend_transforms(topo, &transforms);
    Ok(blended.iter().zip(canonical).map(|(t, v)| t.apply(v)).collect())
}

/// Gradients produced by [`lbs_adjoint`].
#[derive(Debug, Clone)]
pub struct LbsGrad {
    pub canonical: Vec<Vec3>,
    /// Per joint, gradient with respect to its local axis-angle rotation.
    pub rotations: Vec<Vec3>,
    pub root_trans: Vec3,
}

/// Adjoint of [`lbs_pose`] with respect to canonical vertices, joint rotations
/// and root translation.
pub fn lbs_adjoint(
    topo: &DenseTopology,
    joints: &[Joint],
    jaw: usize,
    canonical: &[Vec3],
    frame: &FrameParams,
    grad_posed: &[Vec3],
) -> Result<LbsGrad> {
    let nj = joints.len();
    let rots = joint_rotations(joints, jaw, frame);
    let transforms = forward_kinematics(joints, &rots, &frame.global_trans_vec())?;
    let blended = blend_transforms(topo, &transforms);

    let canonical_grad: Vec<Vec3> = blended.iter().zip(grad_posed).map(|(t, g)| t.a.transpose() * g).collect();

    // gradients of the joint skinning transforms
    let mut ga = vec![Mat3::zeros(); nj];
    let mut gb = vec![Vec3::zeros(); nj];
    for (v, (x, g)) in canonical.iter().zip(grad_posed).enumerate() {
        if *g == Vec3::zeros() {
            continue;
        }
        let outer = g * x.transpose();
        for (j, &w) in topo.weight_row(v).iter().enumerate() {
            if w != 0.0 {
                ga[j] += outer * w;
                gb[j] += g * w;
            }
        }
    }

    // reverse pass through T_j = T_p ∘ L_j, L_j(x) = R_j x + c_j
    let mut grad_rot = vec![Vec3::zeros(); nj];
    let mut root_trans = Vec3::zeros();
    for &j in topological_order(joints).iter().rev() {
        let joint = &joints[j];
        let (r, dr) = rodrigues_jacobian(&rots[j]);
        let (pa, c) = match joint.parent {
            Some(p) => (transforms[p].a, joint.rest - r * joint.rest),
            None => (Mat3::identity(), joint.rest - r * joint.rest + frame.global_trans_vec()),
        };
        // A_j = A_p R_j, b_j = A_p c_j + b_p
        let mut g_r = pa.transpose() * ga[j];
        let g_c = pa.transpose() * gb[j];
        g_r -= g_c * joint.rest.transpose();
        for k in 0..3 {
            grad_rot[j][k] = g_r.component_mul(&dr[k]).sum();
        }
        match joint.parent {
            Some(p) => {
                let ga_j = ga[j];
                let gb_j = gb[j];
                ga[p] += ga_j * r.transpose() + gb_j * c.transpose();
                gb[p] += gb_j;
            }
            None => root_trans += g_c,
        }
    }
    Ok(LbsGrad {
        canonical: canonical_grad,
        rotations: grad_rot,
        root_trans,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::v3;
    use nalgebra::Matrix4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_joints() -> Vec<Joint> {
        vec![
            Joint { name: "root".into(), parent: None, rest: v3(0.0, 0.1, 0.0) },
            Joint { name: "jaw".into(), parent: Some(0), rest: v3(0.0, 0.03, -0.02) },
        ]
    }

    fn frame(psi: usize, omega: Vec3, rot: Vec3, trans: Vec3) -> FrameParams {
        FrameParams { psi: vec![0.0; psi], omega: omega.into(), global_rot: rot.into(), global_trans: trans.into() }
    }

    /// Topology whose dense vertices are the given points with explicit weights.
    fn point_topo(points: &[Vec3], weights: &[[f64; 2]]) -> DenseTopology {
        let n = points.len();
        let faces: Vec<[usize; 3]> = (0..n).map(|i| [i, (i + 1) % n, (i + 2) % n]).collect();
        DenseTopology {
            n_coarse: n,
            coarse_faces: faces.clone(),
            laplacian: crate::mesh::Laplacian::from_faces(n, &faces),
            faces,
            bary: (0..n).map(|i| crate::mesh::BaryRow { face: i, weights: [1.0, 0.0, 0.0] }).collect(),
            skin_weights: weights.iter().flatten().copied().collect(),
            n_joints: 2,
            facial_mask: vec![false; n],
        }
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
        (0..n).map(|_| v3(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1))).collect()
    }

    fn homogeneous(w: &Vec3, about: &Vec3, t: &Vec3) -> Matrix4<f64> {
        let r = rodrigues(w);
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        let b = about - r * about + t;
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&b);
        m
    }

    #[test]
    fn compose_adds_fields() {
        let mask = vec![true, false, true];
        let mut f = DetailFields::zeros(3, 2, mask);
        let base = vec![v3(1.0, 2.0, 3.0); 3];
        assert_eq!(f.compose(&base, 1).unwrap(), base);
        f.static_field = vec![v3(0.0, 0.0, 0.25); 3];
        let out = f.compose(&base, 0).unwrap();
        assert!(out.iter().all(|v| *v == v3(1.0, 2.0, 3.25)));
        f.set_dynamic(1, vec![v3(1.0, 1.0, 1.0); 3]).unwrap();
        let out = f.compose(&base, 1).unwrap();
        assert_eq!(out[0], v3(2.0, 3.0, 4.25));
        assert_eq!(out[1], v3(1.0, 2.0, 3.25));
        assert!(f.compose(&base, 2).is_err());
    }

    #[test]
    fn dynamic_writes_are_masked() {
        let mut f = DetailFields::zeros(4, 1, vec![true, false, false, true]);
        f.dynamic_mut_with(0, |d| d.iter_mut().for_each(|v| *v = v3(1.0, 1.0, 1.0)));
        assert_eq!(f.dynamic(0)[1], Vec3::zeros());
        assert_eq!(f.dynamic(0)[3], v3(1.0, 1.0, 1.0));
    }

    #[test]
    fn identity_pose_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = random_points(&mut rng, 20);
        let w: Vec<[f64; 2]> = (0..20).map(|_| { let a: f64 = rng.random(); [a, 1.0 - a] }).collect();
        let topo = point_topo(&pts, &w);
        let posed = lbs_pose(&topo, &two_joints(), 1, &pts, &frame(0, Vec3::zeros(), Vec3::zeros(), Vec3::zeros())).unwrap();
        for (a, b) in posed.iter().zip(&pts) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn root_motion_is_rigid() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = random_points(&mut rng, 10);
        let topo = point_topo(&pts, &[[1.0, 0.0]; 10]);
        let joints = two_joints();
        let (w, t) = (v3(0.2, -0.4, 0.1), v3(0.01, 0.3, 0.5));
        let posed = lbs_pose(&topo, &joints, 1, &pts, &frame(0, v3(0.3, 0.0, 0.0), w, t)).unwrap();
        let r = rodrigues(&w);
        for (p, v) in posed.iter().zip(&pts) {
            let expect = r * (v - joints[0].rest) + joints[0].rest + t;
            assert!((p - expect).norm() < 1e-12);
        }
    }

    #[test]
    fn half_jaw_vertex_blends_two_rigid_maps() {
        let joints = two_joints();
        let v = v3(0.02, 0.05, -0.06);
        let topo = point_topo(&[v, v, v], &[[0.5, 0.5]; 3]);
        let omega = v3(0.3, 0.0, 0.0);
        let posed = lbs_pose(&topo, &joints, 1, &[v, v, v], &frame(0, omega, Vec3::zeros(), Vec3::zeros())).unwrap();
        let r = rodrigues(&omega);
        let jaw_map = r * (v - joints[1].rest) + joints[1].rest;
        let expect = (v + jaw_map) * 0.5;
        assert!((posed[0] - expect).norm() < 1e-15);
    }

    #[test]
    fn fk_chain_matches_homogeneous_products() {
        let joints = two_joints();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let rots = [random_points(&mut rng, 1)[0] * 20.0, random_points(&mut rng, 1)[0] * 20.0];
            let t = random_points(&mut rng, 1)[0];
            let fk = forward_kinematics(&joints, &rots, &t).unwrap();
            let m_root = homogeneous(&rots[0], &joints[0].rest, &t);
            let m_jaw = m_root * homogeneous(&rots[1], &joints[1].rest, &Vec3::zeros());
            for (aff, m) in fk.iter().zip([m_root, m_jaw]) {
                let a: Mat3 = m.fixed_view::<3, 3>(0, 0).into();
                let b: Vec3 = m.fixed_view::<3, 1>(0, 3).into();
                assert!((aff.a - a).norm() < 1e-10 && (aff.b - b).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn lbs_commutes_with_rigid_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts = random_points(&mut rng, 30);
        let w: Vec<[f64; 2]> = (0..30).map(|_| { let a: f64 = rng.random(); [a, 1.0 - a] }).collect();
        let topo = point_topo(&pts, &w);
        let joints = two_joints();
        let omega = v3(0.25, 0.05, -0.02);
        let (rw, t) = (v3(-0.3, 0.5, 0.2), v3(0.0, 0.1, 0.6));
        let moved = lbs_pose(&topo, &joints, 1, &pts, &frame(0, omega, rw, t)).unwrap();
        let still = lbs_pose(&topo, &joints, 1, &pts, &frame(0, omega, Vec3::zeros(), Vec3::zeros())).unwrap();
        let r = rodrigues(&rw);
        for (m, s) in moved.iter().zip(&still) {
            let expect = r * (s - joints[0].rest) + joints[0].rest + t;
            assert!((m - expect).norm() < 1e-9);
        }
    }

    #[test]
    fn lbs_adjoint_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts = random_points(&mut rng, 12);
        let w: Vec<[f64; 2]> = (0..12).map(|_| { let a: f64 = rng.random(); [a, 1.0 - a] }).collect();
        let topo = point_topo(&pts, &w);
        let joints = two_joints();
        let g = random_points(&mut rng, 12);
        let base = frame(0, v3(0.31, -0.12, 0.05), v3(0.1, 0.2, -0.3), v3(0.01, 0.02, 0.5));
        let obj = |pts: &[Vec3], f: &FrameParams| -> f64 {
            lbs_pose(&topo, &joints, 1, pts, f).unwrap().iter().zip(&g).map(|(a, b)| a.dot(b)).sum()
        };
        let adj = lbs_adjoint(&topo, &joints, 1, &pts, &base, &g).unwrap();
        let h = 1e-6;
        for k in 0..3 {
            let mut fp = base.clone();
            let mut fm = base.clone();
            fp.omega[k] += h;
            fm.omega[k] -= h;
            let fd = (obj(&pts, &fp) - obj(&pts, &fm)) / (2.0 * h);
            assert!((fd - adj.rotations[1][k]).abs() < 1e-9, "omega {k}: {fd} vs {}", adj.rotations[1][k]);
            let mut fp = base.clone();
            let mut fm = base.clone();
            fp.global_rot[k] += h;
            fm.global_rot[k] -= h;
            let fd = (obj(&pts, &fp) - obj(&pts, &fm)) / (2.0 * h);
            assert!((fd - adj.rotations[0][k]).abs() < 1e-9);
            let mut fp = base.clone();
            let mut fm = base.clone();
            fp.global_trans[k] += h;
            fm.global_trans[k] -= h;
            let fd = (obj(&pts, &fp) - obj(&pts, &fm)) / (2.0 * h);
            assert!((fd - adj.root_trans[k]).abs() < 1e-9);
            let mut pp = pts.clone();
            let mut pm = pts.clone();
            pp[3][k] += h;
            pm[3][k] -= h;
            let fd = (obj(&pp, &base) - obj(&pm, &base)) / (2.0 * h);
            assert!((fd - adj.canonical[3][k]).abs() < 1e-9);
        }
    }

    #[test]
    fn projection_examples() {
        let cam = Camera { fx: 1.0, fy: 1.0, cx: 0.0, cy: 0.0, width: 1, height: 1, rotation: [0.0; 3], translation: [0.0; 3] };
        assert_eq!(project(&[v3(0.0, 0.0, 1.0)], &cam).unwrap(), vec![[0.0, 0.0]]);
        let cam = Camera { fx: 100.0, fy: 100.0, cx: 32.0, cy: 32.0, width: 64, height: 64, ..cam };
        assert_eq!(project(&[v3(1.0, 2.0, 2.0)], &cam).unwrap(), vec![[82.0, 132.0]]);
        let p = v3(0.3, -0.7, 1.9);
        let a = project(&[p], &cam).unwrap()[0];
        for s in [0.01, 0.5, 3.0, 1e4] {
            let b = project(&[p * s], &cam).unwrap()[0];
            assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9);
        }
        let err = project(&[v3(0.0, 0.0, 1.0), v3(0.0, 0.0, -1.0)], &cam).unwrap_err();
        assert!(matches!(err, Error::BehindCamera { index: 1, .. }));
    }

    #[test]
    fn projection_adjoint_matches_finite_differences() {
        let cam = Camera { fx: 300.0, fy: 280.0, cx: 64.0, cy: 60.0, width: 128, height: 128, rotation: [0.1, -0.2, 0.05], translation: [0.0, 0.0, 0.5] };
        let p = vec![v3(0.03, -0.05, 0.1)];
        let g = [[0.7, -1.3]];
        let adj = project_adjoint(&p, &cam, &g);
        let h = 1e-7;
        for k in 0..3 {
            let mut pp = p.clone();
            let mut pm = p.clone();
            pp[0][k] += h;
            pm[0][k] -= h;
            let a = project(&pp, &cam).unwrap()[0];
            let b = project(&pm, &cam).unwrap()[0];
            let fd = ((a[0] - b[0]) * g[0][0] + (a[1] - b[1]) * g[0][1]) / (2.0 * h);
            assert!((fd - adj[0][k]).abs() < 1e-5 * fd.abs().max(1.0));
        }
    }
}
