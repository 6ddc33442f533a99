//! A head model bound to one identity's shape coefficients and a dense topology.

use crate::error::{check_len, Result};
use crate::geom::Vec3;
use crate::mesh::{build_upsampler, vertex_normals, DenseTopology};
use crate::model::HeadModel;

#[derive(Debug, Clone)]
pub struct Rig {
    pub model: HeadModel,
    pub beta: Vec<f64>,
    pub topo: DenseTopology,
    /// Dense indices of the landmark vertices.
    pub landmarks: Vec<usize>,
}

impl Rig {
    pub fn new(model: HeadModel, beta: Vec<f64>, levels: usize, dilate_facial: bool) -> Result<Self> {
        model.validate()?;
        check_len("beta", model.k_beta(), beta.len())?;
        let faces = model.selected_faces();
        let neutral = model.coarse_mesh(&beta, &vec![0.0; model.k_psi()])?;
        let mut topo = build_upsampler(&faces, &neutral, levels)?;
        topo.set_skin_weights(&model.selected_skin_weights(), model.n_joints())?;
        topo.set_facial_mask(&model.selected_facial_labels(), dilate_facial)?;
        // coarse vertices keep their subset index as dense index
        let landmarks = model.selected_landmarks();
        Ok(Rig { model, beta, topo, landmarks })
    }

    pub fn n_dense(&self) -> usize {
        self.topo.n_dense()
    }

    pub fn k_psi(&self) -> usize {
        self.model.k_psi()
    }

    pub fn facial_mask(&self) -> &[bool] {
        &self.topo.facial_mask
    }

    pub fn coarse(&self, psi: &[f64]) -> Result<Vec<Vec3>> {
        self.model.coarse_mesh(&self.beta, psi)
    }

    /// Dense canonical mesh `B(M(beta, psi))`.
    pub fn dense_canonical(&self, psi: &[f64]) -> Result<Vec<Vec3>> {
        self.topo.upsample_positions(&self.coarse(psi)?)
    }

    pub fn neutral_dense(&self) -> Result<Vec<Vec3>> {
        self.dense_canonical(&vec![0.0; self.k_psi()])
    }

    /// Outward unit normals of the dense neutral mesh.
    pub fn neutral_normals(&self) -> Result<Vec<Vec3>> {
        Ok(vertex_normals(&self.neutral_dense()?, &self.topo.faces).0)
    }
}
