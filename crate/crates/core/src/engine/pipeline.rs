//! Static forward pipeline for one frame and its reverse pass.
//!
//! ```text
//! coarse_mesh -> upsample -> compose_detail -> skinning -+-> landmark_projection -> landmark_loss
//!                                                         +-> vertex_normals -> rasterize -> dense_loss
//! psi -> expression_prior
//! ```
//!
//! Each stage is listed in [`FORWARD_STAGES`] and must have an entry in
//! [`ADJOINT_REGISTRY`]; [`check_adjoint_registry`] enforces this before a fit.

use rayon::prelude::*;

use crate::deform::{lbs_adjoint, lbs_pose, project, project_adjoint, Camera, DetailFields};
use crate::error::{check_len, Error, Result};
use crate::geom::Vec3;
use crate::mesh::{vertex_normals, vertex_normals_adjoint};
use crate::model::FrameParams;
use crate::objective::{
    dense_losses, detail_regularizers, exp_prior, exp_prior_grad, landmark_loss, total_loss, FrameTerms, LossBreakdown,
    LossWeights, SupervisionFrame,
};
use crate::raster::{rasterize, rasterize_adjoint, RenderBuffers, Scene};
use crate::rig::Rig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    CoarseMesh,
    Upsample,
    ComposeDetail,
    Skinning,
    LandmarkProjection,
    LandmarkLoss,
    VertexNormals,
    Rasterize,
    DenseLoss,
    ExpressionPrior,
    DetailRegularizers,
}

pub const FORWARD_STAGES: [Stage; 11] = [
    Stage::CoarseMesh,
    Stage::Upsample,
    Stage::ComposeDetail,
    Stage::Skinning,
    Stage::LandmarkProjection,
    Stage::LandmarkLoss,
    Stage::VertexNormals,
    Stage::Rasterize,
    Stage::DenseLoss,
    Stage::ExpressionPrior,
    Stage::DetailRegularizers,
];

/// Stage and the function implementing its adjoint.
pub const ADJOINT_REGISTRY: [(Stage, &str); 11] = [
    (Stage::CoarseMesh, "HeadModel::coarse_mesh_psi_adjoint"),
    (Stage::Upsample, "DenseTopology::upsample_adjoint"),
    (Stage::ComposeDetail, "identity on each summand"),
    (Stage::Skinning, "deform::lbs_adjoint"),
    (Stage::LandmarkProjection, "deform::project_adjoint"),
    (Stage::LandmarkLoss, "objective::landmark_loss"),
    (Stage::VertexNormals, "mesh::vertex_normals_adjoint"),
    (Stage::Rasterize, "raster::rasterize_adjoint"),
    (Stage::DenseLoss, "objective::dense_losses"),
    (Stage::ExpressionPrior, "objective::exp_prior_grad"),
    (Stage::DetailRegularizers, "objective::detail_regularizers"),
];

pub fn check_adjoint_registry() -> Result<()> {
    for stage in FORWARD_STAGES {
        if !ADJOINT_REGISTRY.iter().any(|(s, _)| *s == stage) {
            return Err(Error::invalid(format!("forward stage {stage:?} has no registered adjoint")));
        }
    }
    Ok(())
}

/// Everything the fit holds fixed.
#[derive(Debug, Clone)]
pub struct FitProblem {
    pub rig: Rig,
    pub camera: Camera,
    /// Tracked per-frame parameters; global pose is taken from here verbatim.
    pub priors: Vec<FrameParams>,
    pub targets: Vec<SupervisionFrame>,
    pub weights: LossWeights,
}

impl FitProblem {
    pub fn frames(&self) -> usize {
        self.priors.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.priors.is_empty() {
            return Err(Error::invalid("a fit needs at least one frame"));
        }
        check_len("supervision frames", self.priors.len(), self.targets.len())?;
        self.camera.validate()?;
        self.weights.validate()?;
        for (i, (p, t)) in self.priors.iter().zip(&self.targets).enumerate() {
            check_len(&format!("psi of frame {i}"), self.rig.k_psi(), p.psi.len())?;
            check_len(&format!("landmarks of frame {i}"), self.rig.landmarks.len(), t.landmarks.len())?;
            if t.width != self.camera.width || t.height != self.camera.height {
                return Err(Error::invalid(format!(
                    "targets of frame {i} are {}x{}, camera renders {}x{}",
                    t.width, t.height, self.camera.width, self.camera.height
                )));
            }
            t.validate()?;
        }
        Ok(())
    }
}

/// The optimized variables.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub psi: Vec<Vec<f64>>,
    pub omega: Vec<Vec3>,
    pub fields: DetailFields,
}

impl Params {
    pub fn frame(&self, problem: &FitProblem, i: usize) -> FrameParams {
        FrameParams {
            psi: self.psi[i].clone(),
            omega: self.omega[i].into(),
            ..problem.priors[i].clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub psi: Vec<Vec<f64>>,
    pub omega: Vec<Vec3>,
    pub static_field: Vec<Vec3>,
    pub dynamic: Vec<Vec<Vec3>>,
}

impl Gradients {
    /// First non-finite block, if any.
    pub fn non_finite_block(&self) -> Option<&'static str> {
        let bad3 = |v: &Vec3| !(v.x.is_finite() && v.y.is_finite() && v.z.is_finite());
        if self.psi.iter().flatten().any(|x| !x.is_finite()) {
            return Some("psi");
        }
        if self.omega.iter().any(bad3) {
            return Some("omega");
        }
        if self.static_field.iter().any(bad3) {
            return Some("static_field");
        }
        if self.dynamic.iter().flatten().any(bad3) {
            return Some("dynamic_field");
        }
        None
    }
}

/// Forward intermediates of one frame.
#[derive(Debug, Clone)]
pub struct FrameForward {
    pub frame: FrameParams,
    pub detailed: Vec<Vec3>,
    pub posed: Vec<Vec3>,
    pub normals: Vec<Vec3>,
    pub buffers: RenderBuffers,
    pub landmarks_uv: Vec<[f64; 2]>,
}

pub fn forward_frame(problem: &FitProblem, params: &Params, i: usize) -> Result<FrameForward> {
    forward(&problem.rig, &problem.camera, params.frame(problem, i), &params.fields, i)
}

/// Forward pass of frame `i` for explicit articulation and fields.
pub fn forward(rig: &Rig, camera: &Camera, frame: FrameParams, fields: &DetailFields, i: usize) -> Result<FrameForward> {
    let dense = rig.dense_canonical(&frame.psi)?;
    let detailed = fields.compose(&dense, i)?;
    let posed = lbs_pose(&rig.topo, &rig.model.joints, rig.model.jaw, &detailed, &frame)?;
    let lm: Vec<Vec3> = rig.landmarks.iter().map(|&l| posed[l]).collect();
    let landmarks_uv = project(&lm, camera)?;
    let (normals, _) = vertex_normals(&posed, &rig.topo.faces);
    let buffers = rasterize(&Scene {
        positions: &posed,
        faces: &rig.topo.faces,
        normals: &normals,
        camera,
    })?;
    Ok(FrameForward { frame, detailed, posed, normals, buffers, landmarks_uv })
}

struct FrameEval {
    terms: FrameTerms,
    empty_overlap: bool,
    grad_psi: Vec<f64>,
    grad_omega: Vec3,
    grad_detailed: Vec<Vec3>,
}

fn frame_eval(problem: &FitProblem, params: &Params, i: usize, exclude: Option<&[bool]>) -> Result<FrameEval> {
    let rig = &problem.rig;
    let w = &problem.weights;
    let inv_f = 1.0 / problem.frames() as f64;
    let target = &problem.targets[i];
    let fwd = forward_frame(problem, params, i)?;

    let (ldmk, g_uv) = landmark_loss(&fwd.landmarks_uv, &target.landmarks, &target.landmark_valid)?;
    let dense = dense_losses(&fwd.buffers, target, exclude)?;
    let exp = exp_prior(&fwd.frame.psi);
    let terms = FrameTerms { ldmk, normal: dense.normal, depth: dense.depth, exp };

    // reverse pass
    let mut g_posed = vec![Vec3::zeros(); fwd.posed.len()];
    let s_ldmk = w.lambda_ldmk * inv_f;
    if s_ldmk != 0.0 {
        let lm: Vec<Vec3> = rig.landmarks.iter().map(|&l| fwd.posed[l]).collect();
        let g_uv: Vec<[f64; 2]> = g_uv.iter().map(|g| [g[0] * s_ldmk, g[1] * s_ldmk]).collect();
        for (&l, g) in rig.landmarks.iter().zip(project_adjoint(&lm, &problem.camera, &g_uv)) {
            g_posed[l] += g;
        }
    }
    let (s_n, s_d) = (w.lambda_normal * inv_f, w.lambda_depth * inv_f);
    if s_n != 0.0 || s_d != 0.0 {
        let gn: Vec<Vec3> = dense.grad_normal.iter().map(|g| g * s_n).collect();
        let gd: Vec<f64> = dense.grad_depth.iter().map(|g| g * s_d).collect();
        let scene = Scene {
            positions: &fwd.posed,
            faces: &rig.topo.faces,
            normals: &fwd.normals,
            camera: &problem.camera,
        };
        let sg = rasterize_adjoint(&scene, &fwd.buffers, &gn, &gd)?;
        let g_from_normals = vertex_normals_adjoint(&fwd.posed, &rig.topo.faces, &sg.normals);
        for ((g, a), b) in g_posed.iter_mut().zip(&sg.positions).zip(&g_from_normals) {
            *g += a + b;
        }
    }
    let lbs = lbs_adjoint(&rig.topo, &rig.model.joints, rig.model.jaw, &fwd.detailed, &fwd.frame, &g_posed)?;
    let g_coarse = rig.topo.upsample_adjoint(&lbs.canonical);
    let mut grad_psi = vec![0.0; rig.k_psi()];
    rig.model.coarse_mesh_psi_adjoint(&g_coarse, &mut grad_psi);
    let s_exp = w.lambda_exp * inv_f;
    for (g, p) in grad_psi.iter_mut().zip(exp_prior_grad(&fwd.frame.psi)) {
        *g += s_exp * p;
    }
    Ok(FrameEval {
        terms,
        empty_overlap: dense.empty_overlap(),
        grad_psi,
        grad_omega: lbs.rotations[rig.model.jaw],
        grad_detailed: lbs.canonical,
    })
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub breakdown: LossBreakdown,
    pub frame_terms: Vec<FrameTerms>,
    pub grads: Gradients,
    /// Frames whose dense terms had no overlapping pixels.
    pub empty_overlap_frames: usize,
}

/// Total loss and gradients for every block. Frames run in parallel and are
/// reduced in frame order.
pub fn evaluate(problem: &FitProblem, params: &Params, exclude: Option<&[Vec<bool>]>) -> Result<Evaluation> {
    let n_frames = problem.frames();
    let evals: Vec<FrameEval> = (0..n_frames)
        .into_par_iter()
        .map(|i| frame_eval(problem, params, i, exclude.map(|e| e[i].as_slice())))
        .collect::<Result<_>>()?;
    let reg = detail_regularizers(&params.fields, &problem.rig.topo.laplacian, &problem.weights)?;
    let frame_terms: Vec<FrameTerms> = evals.iter().map(|e| e.terms).collect();
    let breakdown = total_loss(&frame_terms, reg.dis, reg.lap, &problem.weights)?;

    let mask = problem.rig.facial_mask();
    let mut static_field = reg.grad_static;
    let mut dynamic = reg.grad_dynamic;
    for (e, dyn_g) in evals.iter().zip(dynamic.iter_mut()) {
        for (v, g) in e.grad_detailed.iter().enumerate() {
            static_field[v] += g;
            if mask[v] {
                dyn_g[v] += g;
            }
        }
    }
    for d in dynamic.iter_mut() {
        for (v, g) in d.iter_mut().enumerate() {
            if !mask[v] {
                *g = Vec3::zeros();
            }
        }
    }
    let grads = Gradients {
        psi: evals.iter().map(|e| e.grad_psi.clone()).collect(),
        omega: evals.iter().map(|e| e.grad_omega).collect(),
        static_field,
        dynamic,
    };
    Ok(Evaluation {
        breakdown,
        empty_overlap_frames: evals.iter().filter(|e| e.empty_overlap).count(),
        frame_terms,
        grads,
    })
}

/// Total loss only.
pub fn loss_value(problem: &FitProblem, params: &Params, exclude: Option<&[Vec<bool>]>) -> Result<f64> {
    Ok(evaluate(problem, params, exclude)?.breakdown.total)
}
