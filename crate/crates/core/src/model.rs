//! Blendshape + skinning parametric head model.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::geom::{is_finite3, normalize_axis_angle, Vec3};
use crate::hhm::HhmFile;

pub const MODEL_KIND: &str = "head-model";

#[derive(Debug, Clone, PartialEq)]
pub struct Joint {
    pub name: String,
    pub parent: Option<usize>,
    pub rest: Vec3,
}

/// Linear map from a coefficient vector to per-vertex displacements.
///
/// Stored row-major with `3 * n_vertices` rows and `dim` columns; row `3v + c`
/// holds coordinate `c` of vertex `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Basis {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Basis {
    pub fn zeros(n_vertices: usize, dim: usize) -> Self {
        Basis {
            dim,
            data: vec![0.0; 3 * n_vertices * dim],
        }
    }

    pub fn rows(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.dim..(r + 1) * self.dim]
    }

    /// Displacement of vertex `v` under coefficients `coeffs`.
    #[inline]
    pub fn displacement(&self, v: usize, coeffs: &[f64]) -> Vec3 {
        let mut out = Vec3::zeros();
        for c in 0..3 {
            out[c] = self
                .row(3 * v + c)
                .iter()
                .zip(coeffs)
                .map(|(b, x)| b * x)
                .sum();
        }
        out
    }

    /// Accumulates `basis^T g` for vertex `v` into `out`.
    #[inline]
    pub fn accumulate_transpose(&self, v: usize, g: &Vec3, out: &mut [f64]) {
        for c in 0..3 {
            for (o, b) in out.iter_mut().zip(self.row(3 * v + c)) {
                *o += b * g[c];
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadModel {
    pub template: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    pub shape_basis: Basis,
    pub expr_basis: Basis,
    pub joints: Vec<Joint>,
    pub jaw: usize,
    /// `n_vertices x n_joints`, row-major.
    pub skin_weights: Vec<f64>,
    pub head_selector: Vec<usize>,
    pub landmark_indices: Vec<usize>,
    pub facial_labels: Vec<bool>,
}

/// Per-frame articulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameParams {
    pub psi: Vec<f64>,
    pub omega: [f64; 3],
    pub global_rot: [f64; 3],
    pub global_trans: [f64; 3],
}

impl FrameParams {
    pub fn neutral(k_psi: usize) -> Self {
        FrameParams {
            psi: vec![0.0; k_psi],
            omega: [0.0; 3],
            global_rot: [0.0; 3],
            global_trans: [0.0; 3],
        }
    }

    pub fn omega_vec(&self) -> Vec3 {
        Vec3::from(self.omega)
    }

    pub fn global_rot_vec(&self) -> Vec3 {
        Vec3::from(self.global_rot)
    }

    pub fn global_trans_vec(&self) -> Vec3 {
        Vec3::from(self.global_trans)
    }

    /// Checks finiteness and wraps axis-angle vectors into the open ball of radius pi.
    pub fn normalized(mut self) -> Result<Self> {
        let all = self
            .psi
            .iter()
            .chain(&self.omega)
            .chain(&self.global_rot)
            .chain(&self.global_trans);
        if all.into_iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("frame parameters contain a non-finite value"));
        }
        self.omega = normalize_axis_angle(&self.omega_vec()).into();
        self.global_rot = normalize_axis_angle(&self.global_rot_vec()).into();
        Ok(self)
    }
}

impl HeadModel {
    pub fn n_vertices(&self) -> usize {
        self.template.len()
    }

    pub fn n_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn k_beta(&self) -> usize {
        self.shape_basis.dim
    }

    pub fn k_psi(&self) -> usize {
        self.expr_basis.dim
    }

    pub fn root(&self) -> usize {
        self.joints
            .iter()
            .position(|j| j.parent.is_none())
            .expect("validated model has a root")
    }

    pub fn weight_row(&self, v: usize) -> &[f64] {
        let j = self.n_joints();
        &self.skin_weights[v * j..(v + 1) * j]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_vertices();
        let nj = self.n_joints();
        if n == 0 {
            return Err(Error::invalid("model has no vertices"));
        }
        if self.template.iter().any(|v| !is_finite3(v)) {
            return Err(Error::invalid("template contains non-finite positions"));
        }
        for (name, b) in [("shape_basis", &self.shape_basis), ("expr_basis", &self.expr_basis)] {
            if b.data.len() != 3 * n * b.dim {
                return Err(Error::invalid(format!(
                    "{name} must have {} rows of width {}, has {} values",
                    3 * n,
                    b.dim,
                    b.data.len()
                )));
            }
            if b.data.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid(format!("{name} contains non-finite values")));
            }
        }
        for (fi, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&i| i >= n) {
                return Err(Error::invalid(format!("face {fi} indexes past {n} vertices")));
            }
        }
        if let Some(&bad) = self.landmark_indices.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(format!("landmark index {bad} out of range")));
        }
        if let Some(&bad) = self.head_selector.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(format!("head selector index {bad} out of range")));
        }
        let mut seen = vec![false; n];
        for &i in &self.head_selector {
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::invalid(format!("head selector repeats vertex {i}")));
            }
        }
        if let Some(&l) = self.landmark_indices.iter().find(|&&l| !seen[l]) {
            return Err(Error::invalid(format!("landmark vertex {l} is outside the head selector")));
        }
        check_len("facial_labels", n, self.facial_labels.len())?;
        check_len("skin_weights", n * nj, self.skin_weights.len())?;
        for v in 0..n {
            let row = self.weight_row(v);
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&w| w < 0.0 || !w.is_finite()) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!("skin weights of vertex {v} are not convex")));
            }
        }
        // joint tree: exactly one root, parents acyclic
        let roots = self.joints.iter().filter(|j| j.parent.is_none()).count();
        if roots != 1 {
            return Err(Error::invalid(format!("joint graph has {roots} roots, expected 1")));
        }
        for (ji, j) in self.joints.iter().enumerate() {
            let mut cur = j.parent;
            let mut steps = 0;
            while let Some(p) = cur {
                if p >= nj || steps > nj {
                    return Err(Error::invalid(format!("joint `{}` has an invalid ancestry", j.name)));
                }
                cur = self.joints[p].parent;
                steps += 1;
            }
            if !is_finite3(&j.rest) {
                return Err(Error::invalid(format!("joint {ji} rest position is not finite")));
            }
        }
        if self.jaw >= nj {
            return Err(Error::invalid("jaw joint index out of range"));
        }
        Ok(())
    }

    /// Map from full-model vertex index to position within the head subset.
    pub fn selector_inverse(&self) -> Vec<Option<usize>> {
        let mut inv = vec![None; self.n_vertices()];
        for (k, &v) in self.head_selector.iter().enumerate() {
            inv[v] = Some(k);
        }
        inv
    }

    /// Faces whose three vertices lie in the head subset, re-indexed into it.
    pub fn selected_faces(&self) -> Vec<[usize; 3]> {
        let inv = self.selector_inverse();
        self.faces
            .iter()
            .filter_map(|f| Some([inv[f[0]]?, inv[f[1]]?, inv[f[2]]?]))
            .collect()
    }

    /// Landmark positions within the head subset.
    pub fn selected_landmarks(&self) -> Vec<usize> {
        let inv = self.selector_inverse();
        self.landmark_indices
            .iter()
            .map(|&l| inv[l].expect("validated landmark inside selector"))
            .collect()
    }

    /// Skin weights restricted to the head subset (`|P| x J`).
    pub fn selected_skin_weights(&self) -> Vec<f64> {
        self.head_selector
            .iter()
            .flat_map(|&v| self.weight_row(v).iter().copied())
            .collect()
    }

    pub fn selected_facial_labels(&self) -> Vec<bool> {
        self.head_selector.iter().map(|&v| self.facial_labels[v]).collect()
    }

    /// Coarse head mesh `(template + S beta + E psi)` restricted to the head subset.
    pub fn coarse_mesh(&self, beta: &[f64], psi: &[f64]) -> Result<Vec<Vec3>> {
        check_len("beta", self.k_beta(), beta.len())?;
        check_len("psi", self.k_psi(), psi.len())?;
        Ok(self
            .head_selector
            .iter()
            .map(|&v| {
                self.template[v]
                    + self.shape_basis.displacement(v, beta)
                    + self.expr_basis.displacement(v, psi)
            })
            .collect())
    }

    /// Adjoint of `coarse_mesh` with respect to `psi`.
    pub fn coarse_mesh_psi_adjoint(&self, grad: &[Vec3], out: &mut [f64]) {
        for (g, &v) in grad.iter().zip(&self.head_selector) {
            self.expr_basis.accumulate_transpose(v, g, out);
        }
    }

    pub fn to_hhm(&self) -> HhmFile {
        let n = self.n_vertices();
        let nj = self.n_joints();
        let mut f = HhmFile::new(MODEL_KIND);
        f.set_meta("k_beta", self.k_beta());
        f.set_meta("k_psi", self.k_psi());
        f.set_meta("jaw", self.jaw);
        let names: Vec<&str> = self.joints.iter().map(|j| j.name.as_str()).collect();
        f.set_meta("joint_names", names.join(","));
        f.push_f64("template", &[n, 3], self.template.iter().flat_map(|v| v.iter().copied()));
        f.push_i32(
            "faces",
            &[self.faces.len(), 3],
            self.faces.iter().flatten().map(|&i| i as i32).collect(),
        );
        f.push_f64("shape_basis", &[3 * n, self.k_beta()], self.shape_basis.data.iter().copied());
        f.push_f64("expr_basis", &[3 * n, self.k_psi()], self.expr_basis.data.iter().copied());
        f.push_f64("joint_rest", &[nj, 3], self.joints.iter().flat_map(|j| j.rest.iter().copied()));
        f.push_i32(
            "joint_parent",
            &[nj],
            self.joints.iter().map(|j| j.parent.map_or(-1, |p| p as i32)).collect(),
        );
        f.push_f64("skin_weights", &[n, nj], self.skin_weights.iter().copied());
        f.push_i32(
            "head_selector",
            &[self.head_selector.len()],
            self.head_selector.iter().map(|&i| i as i32).collect(),
        );
        f.push_i32(
            "landmark_indices",
            &[self.landmark_indices.len()],
            self.landmark_indices.iter().map(|&i| i as i32).collect(),
        );
        f.push_i32("facial_labels", &[n], self.facial_labels.iter().map(|&b| b as i32).collect());
        f
    }

    pub fn from_hhm(f: &HhmFile) -> Result<Self> {
        f.expect_kind(MODEL_KIND)?;
        let k_beta: usize = f.meta_parse("k_beta")?;
        let k_psi: usize = f.meta_parse("k_psi")?;
        let jaw: usize = f.meta_parse("jaw")?;
        let names: Vec<String> = f.meta("joint_names")?.split(',').map(str::to_string).collect();

        let (_, t) = f.f64s("template")?;
        let template: Vec<Vec3> = t.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect();
        let n = template.len();
        let idx = |name: &str| -> Result<Vec<usize>> {
            let (_, raw) = f.i32s(name)?;
            raw.iter()
                .map(|&i| usize::try_from(i).map_err(|_| Error::invalid(format!("negative index in `{name}`"))))
                .collect()
        };
        let faces: Vec<[usize; 3]> = idx("faces")?.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let (_, shape) = f.f64s("shape_basis")?;
        let (_, expr) = f.f64s("expr_basis")?;
        let (_, rest) = f.f64s("joint_rest")?;
        let (_, parents) = f.i32s("joint_parent")?;
        check_len("joint_names", parents.len(), names.len())?;
        let joints = names
            .into_iter()
            .zip(parents)
            .zip(rest.chunks_exact(3))
            .map(|((name, &p), r)| Joint {
                name,
                parent: usize::try_from(p).ok(),
                rest: Vec3::new(r[0], r[1], r[2]),
            })
            .collect::<Vec<_>>();
        let (_, mut skin_weights) = f.f64s("skin_weights")?;
        // rows are renormalized after the f32 round trip
        let nj = joints.len();
        if nj > 0 {
            for row in skin_weights.chunks_mut(nj) {
                let s: f64 = row.iter().sum();
                if s > 0.0 {
                    row.iter_mut().for_each(|w| *w /= s);
                }
            }
        }
        let (_, labels) = f.i32s("facial_labels")?;
        let model = HeadModel {
            template,
            faces,
            shape_basis: Basis { dim: k_beta, data: shape },
            expr_basis: Basis { dim: k_psi, data: expr },
            joints,
            jaw,
            skin_weights,
            head_selector: idx("head_selector")?,
            landmark_indices: idx("landmark_indices")?,
            facial_labels: labels.iter().map(|&b| b != 0).collect(),
        };
        check_len("facial_labels", n, model.facial_labels.len())?;
        model.validate()?;
        Ok(model)
    }

    /// The same model after an f32 round trip, i.e. exactly what a saved file reloads as.
    pub fn quantized(&self) -> Result<Self> {
        Self::from_hhm(&self.to_hhm())
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Four-vertex tetrahedron with two joints and random bases.
    pub fn tiny_model(seed: u64) -> HeadModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let template = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(0.0, 0.0, 1.0),
        ];
        let n = template.len();
        let mut basis = |dim: usize| Basis {
            dim,
            data: (0..3 * n * dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        let shape_basis = basis(3);
        let expr_basis = basis(2);
        HeadModel {
            template,
            faces: vec![[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]],
            shape_basis,
            expr_basis,
            joints: vec![
                Joint { name: "root".into(), parent: None, rest: Vec3::zeros() },
                Joint { name: "jaw".into(), parent: Some(0), rest: Vec3::new(0.0, 0.5, 0.0) },
            ],
            jaw: 1,
            skin_weights: vec![1.0, 0.0, 0.5, 0.5, 0.0, 1.0, 1.0, 0.0],
            head_selector: vec![0, 1, 2, 3],
            landmark_indices: vec![1, 3],
            facial_labels: vec![false, true, true, false],
        }
    }

    #[allow(clippy::needless_range_loop)]
    fn brute_force(m: &HeadModel, beta: &[f64], psi: &[f64]) -> Vec<Vec3> {
        let mut out = Vec::new();
        for &v in &m.head_selector {
            let mut p = m.template[v];
            for c in 0..3 {
                for k in 0..beta.len() {
                    p[c] += m.shape_basis.data[(3 * v + c) * m.k_beta() + k] * beta[k];
                }
                for k in 0..psi.len() {
                    p[c] += m.expr_basis.data[(3 * v + c) * m.k_psi() + k] * psi[k];
                }
            }
            out.push(p);
        }
        out
    }

    #[test]
    fn zero_coefficients_return_template() {
        let m = tiny_model(1);
        let v = m.coarse_mesh(&[0.0; 3], &[0.0; 2]).unwrap();
        assert_eq!(v, m.template);
    }

    #[test]
    fn unit_beta_adds_one_basis_column() {
        let m = tiny_model(2);
        let v = m.coarse_mesh(&[1.0, 0.0, 0.0], &[0.0; 2]).unwrap();
        for (i, p) in v.iter().enumerate() {
            for c in 0..3 {
                let col = m.shape_basis.data[(3 * i + c) * 3];
                assert_eq!(p[c], m.template[i][c] + col);
            }
        }
    }

    #[test]
    fn matches_naive_summation() {
        let m = tiny_model(3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let beta: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let psi: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
            let fast = m.coarse_mesh(&beta, &psi).unwrap();
            let slow = brute_force(&m, &beta, &psi);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn linearity_in_beta() {
        let m = tiny_model(4);
        let b1 = [0.3, -1.2, 0.7];
        let b2 = [1.1, 0.4, -0.5];
        let (a, b) = (0.7, -1.9);
        let mix: Vec<f64> = b1.iter().zip(&b2).map(|(x, y)| a * x + b * y).collect();
        let lhs = m.coarse_mesh(&mix, &[0.0; 2]).unwrap();
        let m1 = m.coarse_mesh(&b1, &[0.0; 2]).unwrap();
        let m2 = m.coarse_mesh(&b2, &[0.0; 2]).unwrap();
        let m0 = m.coarse_mesh(&[0.0; 3], &[0.0; 2]).unwrap();
        for i in 0..lhs.len() {
            let rhs = m1[i] * a + m2[i] * b - m0[i] * (a + b - 1.0);
            assert!((lhs[i] - rhs).norm() < 1e-9);
        }
    }

    #[test]
    fn repeated_calls_are_bit_identical() {
        let m = tiny_model(5);
        let beta = [0.1, 0.2, 0.3];
        assert_eq!(m.coarse_mesh(&beta, &[0.0; 2]).unwrap(), m.coarse_mesh(&beta, &[0.0; 2]).unwrap());
    }

    #[test]
    fn dimension_mismatch_names_the_vector() {
        let m = tiny_model(6);
        let err = m.coarse_mesh(&[0.0; 2], &[0.0; 2]).unwrap_err().to_string();
        assert!(err.contains("beta"), "{err}");
        let err = m.coarse_mesh(&[0.0; 3], &[0.0; 5]).unwrap_err().to_string();
        assert!(err.contains("psi"), "{err}");
    }

    #[test]
    fn validation_catches_bad_models() {
        let mut m = tiny_model(7);
        m.skin_weights[0] = 0.9;
        assert!(m.validate().is_err());
        let mut m = tiny_model(7);
        m.joints[0].parent = Some(1);
        assert!(m.validate().is_err());
        let mut m = tiny_model(7);
        m.faces[0][1] = 17;
        assert!(m.validate().is_err());
        let mut m = tiny_model(7);
        m.landmark_indices.push(4);
        assert!(m.validate().is_err());
    }

    #[test]
    fn hhm_round_trip_reproduces_quantized_model() {
        let m = tiny_model(8);
        let q = m.quantized().unwrap();
        let again = q.quantized().unwrap();
        assert_eq!(q, again);
        assert_eq!(q.joints[1].name, "jaw");
        assert_eq!(q.faces, m.faces);
    }

    #[test]
    fn psi_adjoint_matches_transpose() {
        let m = tiny_model(9);
        let g: Vec<Vec3> = (0..4).map(|i| Vec3::new(i as f64, 1.0, -0.5)).collect();
        let mut out = vec![0.0; 2];
        m.coarse_mesh_psi_adjoint(&g, &mut out);
        // <E psi, g> = <psi, E^T g> for psi = e_k
        for k in 0..2 {
            let mut psi = [0.0; 2];
            psi[k] = 1.0;
            let disp = m.coarse_mesh(&[0.0; 3], &psi).unwrap();
            let dot: f64 = disp.iter().zip(&m.template).zip(&g).map(|((d, t), g)| (d - t).dot(g)).sum();
            assert!((dot - out[k]).abs() < 1e-12);
        }
    }
}
