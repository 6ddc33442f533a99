//! Cross-identity application and control-map export.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::net::{encode, predict_offsets, NeutralIdentity, TransferNet};
use crate::deform::{lbs_pose, Camera, DetailFields};
use crate::error::{check_len, Error, Result};
use crate::geom::Vec3;
use crate::mesh::vertex_normals;
use crate::model::FrameParams;
use crate::raster::{rasterize, Scene};
use crate::rig::Rig;
use crate::toolkit::io::{write_json, write_pfm, Image};

pub const CONTROL_MANIFEST: &str = "control.json";

/// A fitted identity: rig with its shape coefficients plus the static field.
#[derive(Debug, Clone)]
pub struct Subject {
    pub rig: Rig,
    pub static_field: Vec<Vec3>,
}

impl Subject {
    pub fn new(rig: Rig, static_field: Vec<Vec3>) -> Result<Self> {
        check_len("static field", rig.n_dense(), static_field.len())?;
        Ok(Subject { rig, static_field })
    }

    pub fn identity(&self) -> Result<NeutralIdentity> {
        NeutralIdentity::from_rig(&self.rig, &self.static_field)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApplyReport {
    pub frames: usize,
    /// The net can only predict zero offsets.
    pub degenerate: bool,
    pub max_offset: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Transferred {
    pub codes: Array2<f64>,
    /// Predicted offsets, already masked.
    pub fields: DetailFields,
    pub detailed: Vec<Vec<Vec3>>,
    pub posed: Vec<Vec<Vec3>>,
    pub report: ApplyReport,
}

/// Drives `target` with another sequence's expression, jaw and global pose.
pub fn apply_transfer(net: &TransferNet, target: &Subject, driving: &[FrameParams]) -> Result<Transferred> {
    net.validate()?;
    let identity = target.identity()?;
    let rig = &target.rig;
    let psi: Vec<Vec<f64>> = driving.iter().map(|f| f.psi.clone()).collect();
    let omega: Vec<[f64; 3]> = driving.iter().map(|f| f.omega).collect();
    let codes = encode(net, &psi, &omega)?;
    let mut fields = DetailFields::zeros(rig.n_dense(), driving.len(), rig.facial_mask().to_vec());
    fields.static_field = target.static_field.clone();
    let mut detailed = Vec::with_capacity(driving.len());
    let mut posed = Vec::with_capacity(driving.len());
    let mut max_offset: f64 = 0.0;
    for (i, frame) in driving.iter().enumerate() {
        let mut run = || -> Result<(Vec<Vec3>, Vec<Vec3>)> {
            let offsets = predict_offsets(net, &identity, codes.row(i))?;
            max_offset = offsets.iter().fold(max_offset, |m, d| m.max(d.norm()));
            fields.set_dynamic(i, offsets)?;
            let dense = rig.dense_canonical(&frame.psi)?;
            let canon = fields.compose(&dense, i)?;
            let p = lbs_pose(&rig.topo, &rig.model.joints, rig.model.jaw, &canon, frame)?;
            Ok((canon, p))
        };
        let (c, p) = run().map_err(|e| e.in_frame(i))?;
        detailed.push(c);
        posed.push(p);
    }
    let degenerate = net.is_degenerate() || max_offset == 0.0;
    let mut warnings = Vec::new();
    if degenerate {
        let msg = "offsets degenerate: the transfer net predicts zero everywhere".to_string();
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let report = ApplyReport { frames: driving.len(), degenerate, max_offset, warnings };
    Ok(Transferred { codes, fields, detailed, posed, report })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlFrame {
    pub index: usize,
    pub file: String,
}

/// Index written next to the maps. Normal maps are 3-channel PFM in camera
/// space; uncovered pixels hold `f32::MAX`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlManifest {
    pub width: usize,
    pub height: usize,
    pub reference: String,
    pub frames: Vec<ControlFrame>,
}

fn render_normals(positions: &[Vec3], faces: &[[usize; 3]], camera: &Camera) -> Result<Image> {
    let (normals, _) = vertex_normals(positions, faces);
    let buffers = rasterize(&Scene { positions, faces, normals: &normals, camera })?;
    Ok(Image::from_normals(&buffers))
}

/// Reference map of the neutral identity shifted by `reference_translation`
/// (no rotation, no skinning) and one driving map per posed mesh.
pub fn render_control(
    identity: &NeutralIdentity,
    faces: &[[usize; 3]],
    posed: &[Vec<Vec3>],
    camera: &Camera,
    reference_translation: [f64; 3],
) -> Result<(Image, Vec<Image>)> {
    camera.validate()?;
    if posed.is_empty() {
        return Err(Error::invalid("control export needs at least one frame"));
    }
    let t = Vec3::from(reference_translation);
    let reference: Vec<Vec3> = identity.positions.iter().map(|p| p + t).collect();
    let reference = render_normals(&reference, faces, camera)?;
    let driving = posed
        .iter()
        .enumerate()
        .map(|(i, mesh)| {
            check_len("posed mesh", identity.n(), mesh.len()).and_then(|_| render_normals(mesh, faces, camera)).map_err(|e| e.in_frame(i))
        })
        .collect::<Result<_>>()?;
    Ok((reference, driving))
}

pub fn export_control(
    identity: &NeutralIdentity,
    faces: &[[usize; 3]],
    posed: &[Vec<Vec3>],
    camera: &Camera,
    reference_translation: [f64; 3],
    dir: &Path,
) -> Result<(ControlManifest, Image, Vec<Image>)> {
    let (reference, driving) = render_control(identity, faces, posed, camera, reference_translation)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = ControlManifest {
        width: camera.width,
        height: camera.height,
        reference: "reference.pfm".into(),
        frames: (0..driving.len()).map(|i| ControlFrame { index: i, file: format!("driving_{i:04}.pfm") }).collect(),
    };
    write_pfm(&dir.join(&manifest.reference), &reference)?;
    for (f, img) in manifest.frames.iter().zip(&driving) {
        write_pfm(&dir.join(&f.file), img)?;
    }
    write_json(&dir.join(CONTROL_MANIFEST), &manifest)?;
    Ok((manifest, reference, driving))
}
