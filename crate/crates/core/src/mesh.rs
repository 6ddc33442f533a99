//! Dense topology construction and per-vertex mesh operators.

use std::collections::HashMap;

use crate::error::{check_len, Error, Result};
use crate::geom::Vec3;

/// One row of the barycentric operator: a coarse face and weights over its corners.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaryRow {
    pub face: usize,
    pub weights: [f64; 3],
}

/// Uniform umbrella Laplacian in compressed row form.
///
/// `(L x)_i = (1/deg_i) * sum_{j in N(i)} (x_j - x_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Laplacian {
    pub offsets: Vec<usize>,
    pub neighbors: Vec<usize>,
}

impl Laplacian {
    pub fn from_faces(n: usize, faces: &[[usize; 3]]) -> Self {
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
        for f in faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                adj[a].push(b);
                adj[b].push(a);
            }
        }
        let mut offsets = Vec::with_capacity(n + 1);
        let mut neighbors = Vec::new();
        offsets.push(0);
        for mut row in adj {
            row.sort_unstable();
            row.dedup();
            neighbors.extend(row);
            offsets.push(neighbors.len());
        }
        Laplacian { offsets, neighbors }
    }

    pub fn n(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn neighbors_of(&self, i: usize) -> &[usize] {
        &self.neighbors[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn apply(&self, x: &[Vec3]) -> Vec<Vec3> {
        (0..self.n())
            .map(|i| {
                let nb = self.neighbors_of(i);
                if nb.is_empty() {
                    return Vec3::zeros();
                }
                let mut acc = Vec3::zeros();
                for &j in nb {
                    acc += x[j] - x[i];
                }
                acc / nb.len() as f64
            })
            .collect()
    }

    /// `L^T y`
    pub fn apply_transpose(&self, y: &[Vec3]) -> Vec<Vec3> {
        let mut out = vec![Vec3::zeros(); self.n()];
        for i in 0..self.n() {
            let nb = self.neighbors_of(i);
            if nb.is_empty() {
                continue;
            }
            let s = y[i] / nb.len() as f64;
            for &j in nb {
                out[j] += s;
                out[i] -= s;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseTopology {
    pub n_coarse: usize,
    pub coarse_faces: Vec<[usize; 3]>,
    pub faces: Vec<[usize; 3]>,
    pub bary: Vec<BaryRow>,
    /// `n_dense x n_joints`, row-major; empty until skin weights are interpolated.
    pub skin_weights: Vec<f64>,
    pub n_joints: usize,
    pub facial_mask: Vec<bool>,
    pub laplacian: Laplacian,
}

fn edge_key(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

fn lerp_bary(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1]), 0.5 * (a[2] + b[2])]
}

/// Builds the dense topology by `levels` rounds of 1-to-4 midpoint subdivision.
///
/// Dense vertices `0..n_coarse` are the coarse vertices. Midpoints are appended
/// in face order, edges `(0,1), (1,2), (2,0)` within each face. Every dense
/// vertex records its barycentric coordinates in one original coarse face.
pub fn build_upsampler(coarse_faces: &[[usize; 3]], coarse_positions: &[Vec3], levels: usize) -> Result<DenseTopology> {
    let n_coarse = coarse_positions.len();
    if levels == 0 {
        return Err(Error::invalid("subdivision levels must be at least 1"));
    }
    if coarse_faces.is_empty() {
        return Err(Error::invalid("coarse mesh has no faces"));
    }
    let mut edge_use: HashMap<(usize, usize), usize> = HashMap::new();
    for (fi, f) in coarse_faces.iter().enumerate() {
        if f.iter().any(|&i| i >= n_coarse) {
            return Err(Error::invalid(format!("coarse face {fi} indexes past {n_coarse} vertices")));
        }
        if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
            return Err(Error::invalid(format!("coarse face {fi} repeats a vertex")));
        }
        for k in 0..3 {
            let key = edge_key(f[k], f[(k + 1) % 3]);
            let c = edge_use.entry(key).or_insert(0);
            *c += 1;
            if *c > 2 {
                return Err(Error::NonManifold(key.0, key.1));
            }
        }
    }

    let mut bary: Vec<Option<BaryRow>> = vec![None; n_coarse];
    for (fi, f) in coarse_faces.iter().enumerate() {
        for k in 0..3 {
            if bary[f[k]].is_none() {
                let mut w = [0.0; 3];
                w[k] = 1.0;
                bary[f[k]] = Some(BaryRow { face: fi, weights: w });
            }
        }
    }
    if let Some(v) = bary.iter().position(Option::is_none) {
        return Err(Error::invalid(format!("coarse vertex {v} belongs to no face")));
    }
    let mut bary: Vec<BaryRow> = bary.into_iter().map(Option::unwrap).collect();

    // each working face: dense corner ids, source coarse face, corner barycentrics
    struct Work {
        v: [usize; 3],
        src: usize,
        b: [[f64; 3]; 3],
    }
    let mut work: Vec<Work> = coarse_faces
        .iter()
        .enumerate()
        .map(|(fi, f)| Work {
            v: *f,
            src: fi,
            b: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        })
        .collect();

    for _ in 0..levels {
        let mut mids: HashMap<(usize, usize), usize> = HashMap::new();
        let mut next = Vec::with_capacity(work.len() * 4);
        for w in &work {
            let mut m = [0usize; 3];
            let mut mb = [[0.0; 3]; 3];
            for k in 0..3 {
                let (a, b) = (k, (k + 1) % 3);
                mb[k] = lerp_bary(&w.b[a], &w.b[b]);
                let key = edge_key(w.v[a], w.v[b]);
                m[k] = *mids.entry(key).or_insert_with(|| {
                    bary.push(BaryRow { face: w.src, weights: mb[k] });
                    bary.len() - 1
                });
            }
            // m[0] on (0,1), m[1] on (1,2), m[2] on (2,0)
            let [v0, v1, v2] = w.v;
            let [b0, b1, b2] = w.b;
            next.push(Work { v: [v0, m[0], m[2]], src: w.src, b: [b0, mb[0], mb[2]] });
            next.push(Work { v: [m[0], v1, m[1]], src: w.src, b: [mb[0], b1, mb[1]] });
            next.push(Work { v: [m[2], m[1], v2], src: w.src, b: [mb[2], mb[1], b2] });
            next.push(Work { v: [m[0], m[1], m[2]], src: w.src, b: [mb[0], mb[1], mb[2]] });
        }
        work = next;
    }

    let faces: Vec<[usize; 3]> = work.iter().map(|w| w.v).collect();
    let n_dense = bary.len();
    Ok(DenseTopology {
        n_coarse,
        coarse_faces: coarse_faces.to_vec(),
        laplacian: Laplacian::from_faces(n_dense, &faces),
        faces,
        bary,
        skin_weights: Vec::new(),
        n_joints: 0,
        facial_mask: vec![false; n_dense],
    })
}

impl DenseTopology {
    pub fn n_dense(&self) -> usize {
        self.bary.len()
    }

    /// `B x` for a coarse field with `d` values per vertex (row-major).
    pub fn apply_barycentric(&self, coarse: &[f64], d: usize) -> Result<Vec<f64>> {
        if d == 0 || !coarse.len().is_multiple_of(d) {
            return Err(Error::invalid(format!("field of {} values is not a multiple of width {d}", coarse.len())));
        }
        check_len("coarse field rows", self.n_coarse, coarse.len() / d)?;
        let mut out = vec![0.0; self.n_dense() * d];
        for (row, o) in self.bary.iter().zip(out.chunks_exact_mut(d)) {
            let f = &self.coarse_faces[row.face];
            for k in 0..3 {
                let w = row.weights[k];
                if w == 0.0 {
                    continue;
                }
                let src = &coarse[f[k] * d..(f[k] + 1) * d];
                for (x, s) in o.iter_mut().zip(src) {
                    *x += w * s;
                }
            }
        }
        Ok(out)
    }

    pub fn upsample_positions(&self, coarse: &[Vec3]) -> Result<Vec<Vec3>> {
        check_len("coarse positions", self.n_coarse, coarse.len())?;
        Ok(self
            .bary
            .iter()
            .map(|row| {
                let f = &self.coarse_faces[row.face];
                let mut p = Vec3::zeros();
                for k in 0..3 {
                    if row.weights[k] != 0.0 {
                        p += coarse[f[k]] * row.weights[k];
                    }
                }
                p
            })
            .collect())
    }

    /// `B^T g`: pulls a dense per-vertex gradient back to the coarse vertices.
    pub fn upsample_adjoint(&self, grad: &[Vec3]) -> Vec<Vec3> {
        let mut out = vec![Vec3::zeros(); self.n_coarse];
        for (row, g) in self.bary.iter().zip(grad) {
            let f = &self.coarse_faces[row.face];
            for k in 0..3 {
                if row.weights[k] != 0.0 {
                    out[f[k]] += g * row.weights[k];
                }
            }
        }
        out
    }

    /// Interpolates coarse skin weights (`n_coarse x n_joints`) onto the dense vertices.
    pub fn set_skin_weights(&mut self, coarse_weights: &[f64], n_joints: usize) -> Result<()> {
        let mut w = self.apply_barycentric(coarse_weights, n_joints)?;
        for row in w.chunks_exact_mut(n_joints) {
            row.iter_mut().for_each(|x| *x = x.max(0.0));
        }
        self.skin_weights = w;
        self.n_joints = n_joints;
        Ok(())
    }

    pub fn weight_row(&self, v: usize) -> &[f64] {
        &self.skin_weights[v * self.n_joints..(v + 1) * self.n_joints]
    }

    /// A dense vertex is facial iff its barycentric support touches a facial coarse vertex.
    pub fn mark_facial(&self, coarse_labels: &[bool]) -> Result<Vec<bool>> {
        check_len("facial labels", self.n_coarse, coarse_labels.len())?;
        Ok(self
            .bary
            .iter()
            .map(|row| {
                let f = &self.coarse_faces[row.face];
                (0..3).any(|k| row.weights[k] > 0.0 && coarse_labels[f[k]])
            })
            .collect())
    }

    /// Grows a vertex mask by one ring of dense neighbors.
    pub fn dilate(&self, mask: &[bool]) -> Vec<bool> {
        (0..self.n_dense())
            .map(|i| mask[i] || self.laplacian.neighbors_of(i).iter().any(|&j| mask[j]))
            .collect()
    }

    pub fn set_facial_mask(&mut self, coarse_labels: &[bool], dilate: bool) -> Result<()> {
        let mut mask = self.mark_facial(coarse_labels)?;
        if dilate {
            mask = self.dilate(&mask);
        }
        self.facial_mask = mask;
        Ok(())
    }
}

/// Area-weighted unit vertex normals plus the list of vertices without any incident face.
pub fn vertex_normals(positions: &[Vec3], faces: &[[usize; 3]]) -> (Vec<Vec3>, Vec<usize>) {
    let sums = normal_sums(positions, faces);
    let mut isolated = Vec::new();
    let normals = sums
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let n = s.norm();
            if n > 0.0 {
                s / n
            } else {
                isolated.push(i);
                Vec3::zeros()
            }
        })
        .collect();
    (normals, isolated)
}

/// Unnormalized sums of face cross products, accumulated in ascending face order.
pub fn normal_sums(positions: &[Vec3], faces: &[[usize; 3]]) -> Vec<Vec3> {
    let mut acc = vec![Vec3::zeros(); positions.len()];
    for f in faces {
        let (p0, p1, p2) = (positions[f[0]], positions[f[1]], positions[f[2]]);
        let c = (p1 - p0).cross(&(p2 - p0));
        for &i in f {
            acc[i] += c;
        }
    }
    acc
}

/// Adjoint of `vertex_normals`: maps a gradient on unit normals to positions.
pub fn vertex_normals_adjoint(positions: &[Vec3], faces: &[[usize; 3]], grad_normals: &[Vec3]) -> Vec<Vec3> {
    let sums = normal_sums(positions, faces);
    let grad_sums: Vec<Vec3> = sums
        .iter()
        .zip(grad_normals)
        .map(|(s, g)| {
            let len = s.norm();
            if len == 0.0 {
                return Vec3::zeros();
            }
            let n = s / len;
            (g - n * n.dot(g)) / len
        })
        .collect();
    let mut out = vec![Vec3::zeros(); positions.len()];
    for f in faces {
        let (p0, p1, p2) = (positions[f[0]], positions[f[1]], positions[f[2]]);
        let gc = grad_sums[f[0]] + grad_sums[f[1]] + grad_sums[f[2]];
        if gc == Vec3::zeros() {
            continue;
        }
        // c = (p1 - p0) x (p2 - p0) = p0 x p1 + p1 x p2 + p2 x p0
        out[f[0]] += (p1 - p2).cross(&gc);
        out[f[1]] += (p2 - p0).cross(&gc);
        out[f[2]] += (p0 - p1).cross(&gc);
    }
    out
}

/// Unit sphere triangulated as a latitude/longitude grid with two pole vertices.
///
/// Faces are counterclockwise seen from outside.
pub fn uv_sphere(rings: usize, segments: usize) -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let mut pos = vec![Vec3::new(0.0, -1.0, 0.0)];
    for r in 1..=rings {
        let theta = std::f64::consts::PI * r as f64 / (rings + 1) as f64;
        for s in 0..segments {
            let phi = 2.0 * std::f64::consts::PI * s as f64 / segments as f64;
            pos.push(Vec3::new(theta.sin() * phi.cos(), -theta.cos(), theta.sin() * phi.sin()));
        }
    }
    pos.push(Vec3::new(0.0, 1.0, 0.0));
    let south = 0;
    let north = pos.len() - 1;
    let at = |r: usize, s: usize| 1 + (r - 1) * segments + (s % segments);
    let mut faces = Vec::new();
    for s in 0..segments {
        faces.push([south, at(1, s), at(1, s + 1)]);
    }
    for r in 1..rings {
        for s in 0..segments {
            let (a, b, c, d) = (at(r, s), at(r, s + 1), at(r + 1, s), at(r + 1, s + 1));
            faces.push([a, c, b]);
            faces.push([b, c, d]);
        }
    }
    for s in 0..segments {
        faces.push([north, at(rings, s + 1), at(rings, s)]);
    }
    // orient outward
    for f in &mut faces {
        let (p0, p1, p2) = (pos[f[0]], pos[f[1]], pos[f[2]]);
        let c = (p1 - p0).cross(&(p2 - p0));
        if c.dot(&(p0 + p1 + p2)) < 0.0 {
            f.swap(1, 2);
        }
    }
    (pos, faces)
}
