//! Supervision and regularization terms and their weighted total.
//!
//! All aggregations over landmarks, pixels, vertices and frames are means.

use serde::{Deserialize, Serialize};

use crate::deform::DetailFields;
use crate::error::{check_len, Error, Result};
use crate::geom::Vec3;
use crate::mesh::Laplacian;
use crate::raster::RenderBuffers;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_ldmk: f64,
    pub lambda_normal: f64,
    pub lambda_depth: f64,
    pub lambda_exp: f64,
    pub lambda_dis_f: f64,
    pub lambda_dis_g: f64,
    pub lambda_dis_g_facial_boost: f64,
    pub lambda_lap: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_ldmk: 1.0,
            lambda_normal: 0.1,
            lambda_depth: 0.1,
            lambda_exp: 1e-3,
            lambda_dis_f: 1e-2,
            lambda_dis_g: 1e-3,
            lambda_dis_g_facial_boost: 10.0,
            lambda_lap: 1.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        LossWeights {
            lambda_ldmk: 0.0,
            lambda_normal: 0.0,
            lambda_depth: 0.0,
            lambda_exp: 0.0,
            lambda_dis_f: 0.0,
            lambda_dis_g: 0.0,
            lambda_dis_g_facial_boost: 0.0,
            lambda_lap: 0.0,
        }
    }

    fn entries(&self) -> [(&'static str, f64); 8] {
        [
            ("lambda_ldmk", self.lambda_ldmk),
            ("lambda_normal", self.lambda_normal),
            ("lambda_depth", self.lambda_depth),
            ("lambda_exp", self.lambda_exp),
            ("lambda_dis_f", self.lambda_dis_f),
            ("lambda_dis_g", self.lambda_dis_g),
            ("lambda_dis_g_facial_boost", self.lambda_dis_g_facial_boost),
            ("lambda_lap", self.lambda_lap),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.entries() {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("weight {name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Per-frame targets.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisionFrame {
    pub landmarks: Vec<[f64; 2]>,
    pub landmark_valid: Vec<bool>,
    pub width: usize,
    pub height: usize,
    pub normal: Vec<Vec3>,
    pub normal_valid: Vec<bool>,
    pub depth: Vec<f64>,
    pub depth_valid: Vec<bool>,
}

impl SupervisionFrame {
    /// Targets taken verbatim from a rendering: valid wherever it is covered.
    pub fn from_render(buffers: &RenderBuffers, landmarks: Vec<[f64; 2]>) -> Self {
        SupervisionFrame {
            landmark_valid: vec![true; landmarks.len()],
            landmarks,
            width: buffers.width,
            height: buffers.height,
            normal: buffers.normal.clone(),
            normal_valid: buffers.coverage.clone(),
            depth: buffers.depth.iter().map(|&d| if d.is_finite() { d } else { 0.0 }).collect(),
            depth_valid: buffers.coverage.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.width * self.height;
        check_len("landmark validity flags", self.landmarks.len(), self.landmark_valid.len())?;
        check_len("target normal pixels", n, self.normal.len())?;
        check_len("target normal mask", n, self.normal_valid.len())?;
        check_len("target depth pixels", n, self.depth.len())?;
        check_len("target depth mask", n, self.depth_valid.len())?;
        for (i, (v, &ok)) in self.normal.iter().zip(&self.normal_valid).enumerate() {
            if ok && (v.norm() - 1.0).abs() > 1e-3 {
                return Err(Error::invalid(format!("target normal at pixel {i} is not unit length")));
            }
        }
        for (i, (d, &ok)) in self.depth.iter().zip(&self.depth_valid).enumerate() {
            if ok && !d.is_finite() {
                return Err(Error::invalid(format!("target depth at pixel {i} is not finite")));
            }
        }
        Ok(())
    }
}

/// Mean squared pixel distance over valid landmarks, with its gradient on the projections.
pub fn landmark_loss(projected: &[[f64; 2]], targets: &[[f64; 2]], valid: &[bool]) -> Result<(f64, Vec<[f64; 2]>)> {
    check_len("landmark targets", projected.len(), targets.len())?;
    check_len("landmark validity flags", projected.len(), valid.len())?;
    let k = valid.iter().filter(|&&v| v).count();
    if k == 0 {
        return Err(Error::invalid("no valid landmarks"));
    }
    let scale = 1.0 / k as f64;
    let mut loss = 0.0;
    let grad = projected
        .iter()
        .zip(targets)
        .zip(valid)
        .map(|((p, t), &ok)| {
            if !ok {
                return [0.0; 2];
            }
            let r = [p[0] - t[0], p[1] - t[1]];
            loss += r[0] * r[0] + r[1] * r[1];
            [2.0 * r[0] * scale, 2.0 * r[1] * scale]
        })
        .collect();
    Ok((loss * scale, grad))
}

#[inline]
fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLoss {
    pub normal: f64,
    pub depth: f64,
    pub grad_normal: Vec<Vec3>,
    pub grad_depth: Vec<f64>,
    pub normal_pixels: usize,
    pub depth_pixels: usize,
}

impl DenseLoss {
    /// True when either term had no pixel to average over.
    pub fn empty_overlap(&self) -> bool {
        self.normal_pixels == 0 || self.depth_pixels == 0
    }
}

/// Masked L1 errors of the rendered buffers against the targets.
///
/// The normal term sums the absolute error over the three channels of a pixel.
/// Pixels flagged in `exclude` are left out of both terms.
pub fn dense_losses(buffers: &RenderBuffers, target: &SupervisionFrame, exclude: Option<&[bool]>) -> Result<DenseLoss> {
    if buffers.width != target.width || buffers.height != target.height {
        return Err(Error::invalid(format!(
            "render is {}x{}, targets are {}x{}",
            buffers.width, buffers.height, target.width, target.height
        )));
    }
    let n = buffers.len();
    if let Some(ex) = exclude {
        check_len("exclusion mask", n, ex.len())?;
    }
    let keep = |i: usize| buffers.coverage[i] && exclude.is_none_or(|ex| !ex[i]);
    let n_idx: Vec<usize> = (0..n).filter(|&i| keep(i) && target.normal_valid[i]).collect();
    let d_idx: Vec<usize> = (0..n).filter(|&i| keep(i) && target.depth_valid[i]).collect();

    let mut out = DenseLoss {
        normal: 0.0,
        depth: 0.0,
        grad_normal: vec![Vec3::zeros(); n],
        grad_depth: vec![0.0; n],
        normal_pixels: n_idx.len(),
        depth_pixels: d_idx.len(),
    };
    if !n_idx.is_empty() {
        let s = 1.0 / n_idx.len() as f64;
        for &i in &n_idx {
            let r = buffers.normal[i] - target.normal[i];
            out.normal += r.x.abs() + r.y.abs() + r.z.abs();
            out.grad_normal[i] = r.map(sign0) * s;
        }
        out.normal *= s;
    }
    if !d_idx.is_empty() {
        let s = 1.0 / d_idx.len() as f64;
        for &i in &d_idx {
            let r = buffers.depth[i] - target.depth[i];
            out.depth += r.abs();
            out.grad_depth[i] = sign0(r) * s;
        }
        out.depth *= s;
    }
    Ok(out)
}

pub fn exp_prior(psi: &[f64]) -> f64 {
    psi.iter().map(|x| x * x).sum()
}

pub fn exp_prior_grad(psi: &[f64]) -> Vec<f64> {
    psi.iter().map(|x| 2.0 * x).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Regularizers {
    /// Already weighted by the displacement weights.
    pub dis: f64,
    /// Unweighted Laplacian smoothness.
    pub lap: f64,
    /// Gradient of `dis + lambda_lap * lap` on the static field.
    pub grad_static: Vec<Vec3>,
    /// Gradient of `dis + lambda_lap * lap` on each dynamic field.
    pub grad_dynamic: Vec<Vec<Vec3>>,
}

/// Displacement-magnitude penalty and Laplacian smoothness on both fields.
pub fn detail_regularizers(fields: &DetailFields, laplacian: &Laplacian, w: &LossWeights) -> Result<Regularizers> {
    let n = fields.n_dense();
    check_len("laplacian rows", n, laplacian.n())?;
    let inv_n = 1.0 / n as f64;
    let frames = fields.frames();
    let inv_f = if frames > 0 { 1.0 / frames as f64 } else { 0.0 };
    let mask = fields.facial_mask();

    let lap_term = |field: &[Vec3], scale: f64, grad: &mut [Vec3]| -> f64 {
        let l = laplacian.apply(field);
        let value: f64 = l.iter().map(|v| v.norm_squared()).sum::<f64>() * inv_n;
        if w.lambda_lap != 0.0 {
            let lt = laplacian.apply_transpose(&l);
            for (g, v) in grad.iter_mut().zip(&lt) {
                *g += v * (2.0 * inv_n * scale * w.lambda_lap);
            }
        }
        value * scale
    };

    let mut grad_static = vec![Vec3::zeros(); n];
    let mut dis = 0.0;
    for (v, (d, g)) in fields.static_field.iter().zip(grad_static.iter_mut()).enumerate() {
        let s = if mask[v] { w.lambda_dis_g_facial_boost } else { 1.0 };
        dis += w.lambda_dis_g * s * d.norm_squared() * inv_n;
        *g = d * (2.0 * w.lambda_dis_g * s * inv_n);
    }
    let mut lap = lap_term(&fields.static_field, 1.0, &mut grad_static);

    let mut grad_dynamic = Vec::with_capacity(frames);
    for i in 0..frames {
        let field = fields.dynamic(i);
        let mut g: Vec<Vec3> = field.iter().map(|d| d * (2.0 * w.lambda_dis_f * inv_n * inv_f)).collect();
        dis += w.lambda_dis_f * inv_f * inv_n * field.iter().map(|d| d.norm_squared()).sum::<f64>();
        lap += lap_term(field, inv_f, &mut g);
        grad_dynamic.push(g);
    }
    Ok(Regularizers { dis, lap, grad_static, grad_dynamic })
}

/// Unweighted per-frame data and prior terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FrameTerms {
    pub ldmk: f64,
    pub normal: f64,
    pub depth: f64,
    pub exp: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Frame means of the unweighted per-frame terms.
    pub ldmk: f64,
    pub normal: f64,
    pub depth: f64,
    pub exp: f64,
    /// Weighted displacement penalty.
    pub dis: f64,
    /// Unweighted Laplacian term.
    pub lap: f64,
    pub total: f64,
}

/// Weighted total of per-frame terms and field regularizers.
pub fn total_loss(frames: &[FrameTerms], dis: f64, lap: f64, w: &LossWeights) -> Result<LossBreakdown> {
    let names = ["ldmk", "normal", "depth", "exp"];
    for (i, t) in frames.iter().enumerate() {
        for (name, v) in names.iter().zip([t.ldmk, t.normal, t.depth, t.exp]) {
            if !v.is_finite() {
                return Err(Error::numerical(format!("loss term `{name}` is {v} at frame {i}")));
            }
        }
    }
    for (name, v) in [("dis", dis), ("lap", lap)] {
        if !v.is_finite() {
            return Err(Error::numerical(format!("loss term `{name}` is {v}")));
        }
    }
    let inv_f = if frames.is_empty() { 0.0 } else { 1.0 / frames.len() as f64 };
    let mean = |f: fn(&FrameTerms) -> f64| frames.iter().map(f).sum::<f64>() * inv_f;
    let mut b = LossBreakdown {
        ldmk: mean(|t| t.ldmk),
        normal: mean(|t| t.normal),
        depth: mean(|t| t.depth),
        exp: mean(|t| t.exp),
        dis,
        lap,
        total: 0.0,
    };
    b.total = w.lambda_ldmk * b.ldmk
        + w.lambda_normal * b.normal
        + w.lambda_depth * b.depth
        + w.lambda_exp * b.exp
        + b.dis
        + w.lambda_lap * b.lap;
    Ok(b)
}
