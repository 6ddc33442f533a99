//! Procedural toy head, ground-truth detail fields and rendered targets.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::io::{self, Image, LandmarkRow};
use crate::deform::{Camera, DetailFields};
use crate::engine::pipeline::{forward, FitProblem};
use crate::error::{check_len, Error, Result};
use crate::geom::{v3, Vec3};
use crate::hhm::HhmFile;
use crate::mesh::uv_sphere;
use crate::model::{Basis, FrameParams, HeadModel, Joint};
use crate::objective::{LossWeights, SupervisionFrame};
use crate::rig::Rig;

pub const FIELDS_KIND: &str = "detail-fields";

/// Head semi-axes in meters (x right, y down, z away from the camera).
const SEMI_AXES: [f64; 3] = [0.075, 0.1, 0.09];
const FACE_CONE_DEG: f64 = 40.0;
pub const K_BETA: usize = 8;
pub const K_PSI: usize = 6;
const N_LANDMARKS: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub levels: usize,
    pub rings: usize,
    pub segments: usize,
    pub dilate_facial: bool,
    /// Peak of the static bump along the normal, meters.
    pub bump_amplitude: f64,
    /// Angular width of the bump, radians.
    pub bump_sigma: f64,
    /// Peak of the facial dynamics along the normal, meters.
    pub dynamic_amplitude: f64,
    /// Spatial frequency of the facial dynamics over the unit sphere.
    pub dynamic_frequency: f64,
    pub psi_amplitude: f64,
    pub jaw_amplitude: f64,
    pub head_pitch: f64,
    pub distance: f64,
    /// Tracked-prior perturbation of ψ and ω.
    pub prior_psi_noise: f64,
    pub prior_omega_noise: f64,
    pub noise_landmark: f64,
    pub noise_normal: f64,
    pub noise_depth: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            frames: 8,
            width: 128,
            height: 128,
            seed: 0,
            levels: 2,
            rings: 15,
            segments: 20,
            dilate_facial: false,
            bump_amplitude: 0.006,
            bump_sigma: 0.1,
            dynamic_amplitude: 0.001,
            dynamic_frequency: 25.0,
            psi_amplitude: 0.15,
            jaw_amplitude: 0.08,
            head_pitch: 0.25,
            distance: 0.7,
            prior_psi_noise: 0.15,
            prior_omega_noise: 0.02,
            noise_landmark: 0.5,
            noise_normal: 0.01,
            noise_depth: 0.001,
        }
    }
}

impl SynthConfig {
    pub fn noiseless(mut self) -> Self {
        self.noise_landmark = 0.0;
        self.noise_normal = 0.0;
        self.noise_depth = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::invalid("synthetic scenes need at least one frame"));
        }
        if self.width < 8 || self.height < 8 {
            return Err(Error::invalid("synthetic images must be at least 8x8"));
        }
        if self.rings < 3 || self.segments < 4 {
            return Err(Error::invalid("sphere needs at least 3 rings and 4 segments"));
        }
        if self.levels == 0 {
            return Err(Error::invalid("subdivision levels must be at least 1"));
        }
        let nonneg = [
            self.bump_amplitude,
            self.dynamic_amplitude,
            self.psi_amplitude,
            self.jaw_amplitude,
            self.prior_psi_noise,
            self.prior_omega_noise,
            self.noise_landmark,
            self.noise_normal,
            self.noise_depth,
        ];
        if nonneg.iter().any(|x| !x.is_finite() || *x < 0.0) || !(self.bump_sigma > 0.0) || !(self.distance > 0.3) {
            return Err(Error::invalid("synthetic amplitudes and noise levels must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn camera(&self) -> Camera {
        let f = 375.0 * self.width as f64 / 128.0;
        Camera {
            fx: f,
            fy: f,
            cx: self.width as f64 / 2.0,
            cy: self.height as f64 / 2.0,
            width: self.width,
            height: self.height,
            rotation: [0.0; 3],
            translation: [0.0; 3],
        }
    }
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn face_axis() -> Vec3 {
    v3(0.0, 0.2, -1.0).normalize()
}

/// 80 degrees above the face axis, in the sagittal plane.
fn bump_axis() -> Vec3 {
    let f = face_axis();
    let e = f.y.atan2(-f.z) - 80f64.to_radians();
    v3(0.0, e.sin(), -e.cos())
}

/// Weight in [0, 1], 1 at the face center, 0 outside the facial cone.
fn face_weight(u: &Vec3) -> f64 {
    let c = u.dot(&face_axis());
    let c0 = FACE_CONE_DEG.to_radians().cos();
    smoothstep((c - c0) / (1.0 - c0))
}

/// Toy head model: a subdivided ellipsoid with root and jaw joints.
pub fn toy_model(cfg: &SynthConfig) -> Result<HeadModel> {
    let (units, faces) = uv_sphere(cfg.rings, cfg.segments);
    let n = units.len();
    let axes = Vec3::from(SEMI_AXES);
    let template: Vec<Vec3> = units.iter().map(|u| u.component_mul(&axes)).collect();

    let mut shape = Basis::zeros(n, K_BETA);
    let mut expr = Basis::zeros(n, K_PSI);
    for (v, u) in units.iter().enumerate() {
        let polys = [1.0, u.x, u.y, u.z, u.x * u.y, u.y * u.z, u.x * u.z, u.x * u.x - u.z * u.z];
        let w = face_weight(u);
        let ex = [
            u * 0.004 * w,
            Vec3::x() * (0.004 * w * u.x),
            Vec3::y() * (0.004 * w * u.y),
            Vec3::z() * (0.004 * w * u.y),
            u * (0.004 * w * u.x * u.y * 4.0),
            Vec3::y() * (0.004 * w * (3.0 * u.x).sin()),
        ];
        for c in 0..3 {
            for (k, p) in polys.iter().enumerate() {
                shape.data[(3 * v + c) * K_BETA + k] = 0.006 * p * u[c];
            }
            for (k, d) in ex.iter().enumerate() {
                expr.data[(3 * v + c) * K_PSI + k] = d[c];
            }
        }
    }

    let joints = vec![
        Joint { name: "neck".into(), parent: None, rest: v3(0.0, 0.09, 0.01) },
        Joint { name: "jaw".into(), parent: Some(0), rest: v3(0.0, 0.01, 0.01) },
    ];
    let mut skin = Vec::with_capacity(2 * n);
    for u in &units {
        let wj = smoothstep((u.y - 0.05) / 0.45) * smoothstep((0.2 - u.z) / 0.6);
        skin.extend([1.0 - wj, wj]);
    }
    let facial_labels: Vec<bool> = units.iter().map(|u| face_weight(u) > 0.0).collect();

    // landmarks: evenly spaced among vertices well inside the face
    let inner: Vec<usize> = (0..n)
        .filter(|&v| units[v].dot(&face_axis()) > 30f64.to_radians().cos())
        .collect();
    if inner.len() < N_LANDMARKS {
        return Err(Error::invalid("sphere too coarse to place landmarks"));
    }
    let landmark_indices: Vec<usize> = (0..N_LANDMARKS).map(|k| inner[k * inner.len() / N_LANDMARKS]).collect();

    let model = HeadModel {
        template,
        faces,
        shape_basis: shape,
        expr_basis: expr,
        joints,
        jaw: 1,
        skin_weights: skin,
        head_selector: (0..n).collect(),
        landmark_indices,
        facial_labels,
    };
    model.validate()?;
    // what is written to disk is what is rendered
    model.quantized()
}

#[derive(Debug, Clone)]
pub struct SynthScene {
    pub config: SynthConfig,
    pub rig: Rig,
    pub camera: Camera,
    pub gt_frames: Vec<FrameParams>,
    pub priors: Vec<FrameParams>,
    pub gt_fields: DetailFields,
    pub targets: Vec<SupervisionFrame>,
}

/// Builds the scene, rendering targets from the ground truth through the fitting pipeline.
pub fn generate(cfg: &SynthConfig) -> Result<SynthScene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let std = |s: f64| Normal::new(0.0, s).map_err(|e| Error::invalid(e.to_string()));
    let unit = std(1.0)?;

    let model = toy_model(cfg)?;
    let beta: Vec<f64> = (0..K_BETA).map(|_| (0.7 * unit.sample(&mut rng)) as f32 as f64).collect();
    let rig = Rig::new(model, beta, cfg.levels, cfg.dilate_facial)?;
    let camera = cfg.camera();
    let f = cfg.frames;

    let gt_frames: Vec<FrameParams> = (0..f)
        .map(|i| {
            let th = 2.0 * std::f64::consts::PI * i as f64 / f as f64;
            FrameParams {
                psi: (0..K_PSI)
                    .map(|k| cfg.psi_amplitude * (th * (1 + k % 2) as f64 + k as f64).sin())
                    .collect(),
                omega: [cfg.jaw_amplitude * 0.5 * (1.0 + th.sin()), 0.0, 0.0],
                global_rot: [cfg.head_pitch + 0.03 * th.sin(), 0.05 * th.cos(), 0.0],
                global_trans: [0.005 * th.sin(), 0.0, cfg.distance],
            }
        })
        .collect();
    let psi_noise = std(cfg.prior_psi_noise.max(f64::MIN_POSITIVE))?;
    let om_noise = std(cfg.prior_omega_noise.max(f64::MIN_POSITIVE))?;
    let priors: Vec<FrameParams> = gt_frames
        .iter()
        .map(|g| {
            let mut p = g.clone();
            for x in &mut p.psi {
                *x += if cfg.prior_psi_noise > 0.0 { psi_noise.sample(&mut rng) } else { 0.0 };
            }
            for x in &mut p.omega {
                *x += if cfg.prior_omega_noise > 0.0 { om_noise.sample(&mut rng) } else { 0.0 };
            }
            p
        })
        .collect();

    // ground-truth fields along the neutral normals
    let normals = rig.neutral_normals()?;
    let neutral = rig.neutral_dense()?;
    let mask = rig.facial_mask().to_vec();
    let n = rig.n_dense();
    let axes = Vec3::from(SEMI_AXES);
    let dirs: Vec<Vec3> = neutral
        .iter()
        .map(|p| {
            // undo the shape offsets roughly: direction from the center
            p.component_div(&axes).normalize()
        })
        .collect();
    let b = bump_axis();
    let mut fields = DetailFields::zeros(n, 0, mask.clone());
    for v in 0..n {
        if !mask[v] {
            let ang = dirs[v].dot(&b).clamp(-1.0, 1.0).acos();
            let g = (-ang * ang / (2.0 * cfg.bump_sigma * cfg.bump_sigma)).exp();
            fields.static_field[v] = normals[v] * (cfg.bump_amplitude * g);
        }
    }
    let mut dynamic: Vec<Vec<Vec3>> = (0..f)
        .map(|i| {
            let th = 2.0 * std::f64::consts::PI * i as f64 / f as f64;
            (0..n)
                .map(|v| {
                    if !mask[v] {
                        return Vec3::zeros();
                    }
                    let u = dirs[v];
                    let phase = cfg.dynamic_frequency * (0.8 * u.x + 0.6 * u.y);
                    normals[v] * (cfg.dynamic_amplitude * face_weight(&u) * (th + phase).sin())
                })
                .collect()
        })
        .collect();
    for v in 0..n {
        let mean = dynamic.iter().map(|d| d[v]).sum::<Vec3>() / f as f64;
        for d in dynamic.iter_mut() {
            d[v] -= mean;
        }
    }
    for d in dynamic {
        fields.push_frame(d)?;
    }

    let ln = std(cfg.noise_landmark.max(f64::MIN_POSITIVE))?;
    let nn = std(cfg.noise_normal.max(f64::MIN_POSITIVE))?;
    let dn = std(cfg.noise_depth.max(f64::MIN_POSITIVE))?;
    let mut targets = Vec::with_capacity(f);
    for (i, g) in gt_frames.iter().enumerate() {
        let fwd = forward(&rig, &camera, g.clone(), &fields, i)?;
        let mut t = SupervisionFrame::from_render(&fwd.buffers, fwd.landmarks_uv.clone());
        if cfg.noise_landmark > 0.0 {
            for l in &mut t.landmarks {
                l[0] += ln.sample(&mut rng);
                l[1] += ln.sample(&mut rng);
            }
        }
        for p in 0..t.normal.len() {
            if !t.normal_valid[p] {
                continue;
            }
            if cfg.noise_normal > 0.0 {
                let e = v3(nn.sample(&mut rng), nn.sample(&mut rng), nn.sample(&mut rng));
                t.normal[p] = (t.normal[p] + e).normalize();
            }
            if cfg.noise_depth > 0.0 {
                t.depth[p] += dn.sample(&mut rng);
            }
        }
        targets.push(t);
    }
    Ok(SynthScene { config: cfg.clone(), rig, camera, gt_frames, priors, gt_fields: fields, targets })
}

impl SynthScene {
    pub fn problem(&self, weights: LossWeights) -> FitProblem {
        FitProblem {
            rig: self.rig.clone(),
            camera: self.camera.clone(),
            priors: self.priors.clone(),
            targets: self.targets.clone(),
            weights,
        }
    }

    /// Dense vertices where the ground-truth static bump exceeds 1% of its peak.
    pub fn bump_support(&self) -> Vec<usize> {
        let peak = self.gt_fields.static_field.iter().map(|d| d.norm()).fold(0.0, f64::max);
        (0..self.rig.n_dense())
            .filter(|&v| self.gt_fields.static_field[v].norm() > 0.01 * peak)
            .collect()
    }

    /// Canonical ground-truth mesh of frame `i`, before posing.
    pub fn gt_canonical(&self, i: usize) -> Result<Vec<Vec3>> {
        let dense = self.rig.dense_canonical(&self.gt_frames[i].psi)?;
        self.gt_fields.compose(&dense, i)
    }

    pub fn gt_posed(&self, i: usize) -> Result<Vec<Vec3>> {
        Ok(forward(&self.rig, &self.camera, self.gt_frames[i].clone(), &self.gt_fields, i)?.posed)
    }
}

pub fn fields_to_hhm(fields: &DetailFields) -> HhmFile {
    let n = fields.n_dense();
    let mut f = HhmFile::new(FIELDS_KIND);
    f.push_f64("static_field", &[n, 3], fields.static_field.iter().flat_map(|p| [p.x, p.y, p.z]));
    f.push_f64(
        "dynamic_field",
        &[fields.frames(), n, 3],
        fields.dynamic_all().iter().flatten().flat_map(|p| [p.x, p.y, p.z]),
    );
    f.push_i32("facial_mask", &[n], fields.facial_mask().iter().map(|&m| m as i32).collect());
    f
}

pub fn fields_from_hhm(f: &HhmFile) -> Result<DetailFields> {
    f.expect_kind(FIELDS_KIND)?;
    let (_, mask) = f.i32s("facial_mask")?;
    let mask: Vec<bool> = mask.iter().map(|&m| m != 0).collect();
    let n = mask.len();
    let (_, st) = f.f64s("static_field")?;
    let (dshape, dy) = f.f64s("dynamic_field")?;
    check_len("static field values", 3 * n, st.len())?;
    if dshape.len() != 3 || dshape[1] != n || dshape[2] != 3 {
        return Err(Error::format("hhm", "dynamic field must be frames x n x 3"));
    }
    let to3 = |s: &[f64]| -> Vec<Vec3> { s.chunks_exact(3).map(|c| v3(c[0], c[1], c[2])).collect() };
    let mut fields = DetailFields::zeros(n, 0, mask);
    fields.static_field = to3(&st);
    for chunk in dy.chunks_exact(3 * n) {
        fields.push_frame(to3(chunk))?;
    }
    Ok(fields)
}

/// Sum of squared static-field norms.
pub fn static_energy(fields: &DetailFields) -> f64 {
    fields.static_field.iter().map(|d| d.norm_squared()).sum()
}

pub fn dynamic_energy(fields: &DetailFields) -> f64 {
    fields.dynamic_all().iter().flatten().map(|d| d.norm_squared()).sum()
}

/// On-disk description of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub beta: Vec<f64>,
    pub camera: Camera,
    pub levels: usize,
    pub dilate_facial: bool,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameFiles {
    pub normal: String,
    pub depth: String,
    pub mask: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config_hash: String,
    pub config: SynthConfig,
    pub gt_static_energy: f64,
    pub gt_dynamic_energy: f64,
    pub gt_frames: Vec<FrameParams>,
    pub model: String,
    pub scene: String,
    pub priors: String,
    pub landmarks: String,
    pub gt_fields: String,
    pub frames: Vec<FrameFiles>,
}

pub const MANIFEST: &str = "manifest.json";

/// Writes model, scene, priors, landmarks, target maps, ground truth and manifest into `dir`.
pub fn write_dataset(scene: &SynthScene, dir: &Path, config_hash: &str) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cfg = &scene.config;
    scene.rig.model.to_hhm().save(&dir.join("model.hhm"))?;
    io::write_json(
        &dir.join("scene.json"),
        &SceneFile {
            beta: scene.rig.beta.clone(),
            camera: scene.camera.clone(),
            levels: cfg.levels,
            dilate_facial: cfg.dilate_facial,
            frames: cfg.frames,
        },
    )?;
    io::write_json(&dir.join("priors.json"), &scene.priors)?;
    let rows: Vec<LandmarkRow> = scene
        .targets
        .iter()
        .enumerate()
        .flat_map(|(frame, t)| {
            t.landmarks.iter().zip(&t.landmark_valid).enumerate().map(move |(id, (l, &valid))| LandmarkRow {
                frame,
                landmark_id: id,
                u: l[0],
                v: l[1],
                valid,
            })
        })
        .collect();
    io::write_landmarks(&dir.join("landmarks.csv"), &rows)?;
    fields_to_hhm(&scene.gt_fields).save(&dir.join("gt_fields.hhm"))?;

    let mut frames = Vec::new();
    for (i, t) in scene.targets.iter().enumerate() {
        let names = FrameFiles {
            normal: format!("normal_{i:04}.pfm"),
            depth: format!("depth_{i:04}.pfm"),
            mask: format!("mask_{i:04}.pgm"),
        };
        let normal = Image::new(t.width, t.height, 3, t.normal.iter().flat_map(|n| [n.x as f32, n.y as f32, n.z as f32]).collect())?;
        let depth = Image::new(
            t.width,
            t.height,
            1,
            t.depth.iter().zip(&t.depth_valid).map(|(&d, &ok)| if ok { d as f32 } else { f32::MAX }).collect(),
        )?;
        io::write_pfm(&dir.join(&names.normal), &normal)?;
        io::write_pfm(&dir.join(&names.depth), &depth)?;
        io::write_pgm(&dir.join(&names.mask), t.width, t.height, &io::mask_to_pgm(&t.normal_valid))?;
        frames.push(names);
    }
    // energies of the stored (32-bit) fields
    let stored = fields_from_hhm(&fields_to_hhm(&scene.gt_fields))?;
    let manifest = Manifest {
        seed: cfg.seed,
        config_hash: config_hash.to_string(),
        config: cfg.clone(),
        gt_static_energy: static_energy(&stored),
        gt_dynamic_energy: dynamic_energy(&stored),
        gt_frames: scene.gt_frames.clone(),
        model: "model.hhm".into(),
        scene: "scene.json".into(),
        priors: "priors.json".into(),
        landmarks: "landmarks.csv".into(),
        gt_fields: "gt_fields.hhm".into(),
        frames,
    };
    io::write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

/// A dataset read back from disk.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub rig: Rig,
    pub camera: Camera,
    pub priors: Vec<FrameParams>,
    pub targets: Vec<SupervisionFrame>,
}

impl Dataset {
    pub fn problem(&self, weights: LossWeights) -> FitProblem {
        FitProblem {
            rig: self.rig.clone(),
            camera: self.camera.clone(),
            priors: self.priors.clone(),
            targets: self.targets.clone(),
            weights,
        }
    }

    pub fn gt_fields(&self, dir: &Path) -> Result<DetailFields> {
        fields_from_hhm(&HhmFile::load(&dir.join(&self.manifest.gt_fields))?)
    }
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: Manifest = io::read_json(&dir.join(MANIFEST))?;
    let model = HeadModel::from_hhm(&HhmFile::load(&dir.join(&manifest.model))?)?;
    let scene: SceneFile = io::read_json(&dir.join(&manifest.scene))?;
    let priors: Vec<FrameParams> = io::read_json(&dir.join(&manifest.priors))?;
    check_len("prior frames", scene.frames, priors.len())?;
    check_len("target frames", scene.frames, manifest.frames.len())?;
    let rig = Rig::new(model, scene.beta, scene.levels, scene.dilate_facial)?;
    let n_lm = rig.landmarks.len();
    let rows = io::read_landmarks(&dir.join(&manifest.landmarks))?;
    let mut landmarks = vec![vec![[0.0; 2]; n_lm]; scene.frames];
    let mut valid = vec![vec![false; n_lm]; scene.frames];
    for r in rows {
        if r.frame >= scene.frames || r.landmark_id >= n_lm {
            return Err(Error::invalid(format!("landmark row ({}, {}) out of range", r.frame, r.landmark_id)));
        }
        landmarks[r.frame][r.landmark_id] = [r.u, r.v];
        valid[r.frame][r.landmark_id] = r.valid;
    }
    let cam = &scene.camera;
    let mut targets = Vec::with_capacity(scene.frames);
    for (i, names) in manifest.frames.iter().enumerate() {
        let normal = io::read_pfm(&dir.join(&names.normal))?;
        let depth = io::read_pfm(&dir.join(&names.depth))?;
        let (mw, mh, mask) = io::read_pgm(&dir.join(&names.mask))?;
        let dims_ok = |w: usize, h: usize| w == cam.width && h == cam.height;
        if !dims_ok(normal.width, normal.height) || !dims_ok(depth.width, depth.height) || !dims_ok(mw, mh) || normal.channels != 3 || depth.channels != 1 {
            return Err(Error::invalid(format!("target maps of frame {i} do not match the camera")));
        }
        let n_pix = cam.width * cam.height;
        let mask: Vec<bool> = mask.iter().map(|&m| m > 127).collect();
        let t = SupervisionFrame {
            landmarks: std::mem::take(&mut landmarks[i]),
            landmark_valid: std::mem::take(&mut valid[i]),
            width: cam.width,
            height: cam.height,
            normal: (0..n_pix).map(|p| normal.pixel3(p)).collect(),
            normal_valid: mask.clone(),
            depth: depth.data.iter().map(|&d| if d < f32::MAX { d as f64 } else { 0.0 }).collect(),
            depth_valid: mask.iter().zip(&depth.data).map(|(&m, &d)| m && d < f32::MAX).collect(),
        };
        t.validate()?;
        targets.push(t);
    }
    Ok(Dataset { manifest, rig, camera: scene.camera, priors, targets })
}
