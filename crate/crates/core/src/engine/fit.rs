//! Sequence fitting: initialization, blockwise Adam loop, report.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::adam::{cosine_scale, Adam, AdamConfig};
use super::pipeline::{check_adjoint_registry, evaluate, FitProblem, Gradients, Params};
use crate::deform::DetailFields;
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::hhm::HhmFile;
use crate::objective::{detail_regularizers, LossBreakdown};

pub const CHECKPOINT_KIND: &str = "fit-checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub iters: usize,
    pub lr_fields: f64,
    pub lr_psi: f64,
    pub lr_omega: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Learning rates follow a cosine from 1 down to this fraction.
    pub final_lr_ratio: f64,
    pub optimize_omega: bool,
    /// Steps at the start during which only ψ and ω move.
    pub field_warmup: usize,
    /// Initial outward offset of the static field on non-facial vertices, meters.
    pub static_prior_magnitude: f64,
    /// Relative change of the window-20 mean loss below which the run counts as converged.
    pub converge_tol: f64,
    pub log_every: usize,
    /// After each field step, minimize the regularizers along the direction that
    /// moves the temporal mean of the dynamic fields into the static field.
    pub recenter_dynamic: bool,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            iters: 600,
            lr_fields: 1e-4,
            lr_psi: 1e-2,
            lr_omega: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            final_lr_ratio: 0.01,
            optimize_omega: true,
            field_warmup: 150,
            static_prior_magnitude: 1e-4,
            converge_tol: 1e-4,
            log_every: 0,
            recenter_dynamic: true,
        }
    }
}

impl Schedule {
    pub fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig { lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }

    pub fn field_adam(&self) -> AdamConfig {
        self.adam(self.lr_fields)
    }

    pub fn validate(&self) -> Result<()> {
        self.field_adam().validate("fields")?;
        self.adam(self.lr_psi).validate("psi")?;
        self.adam(self.lr_omega).validate("omega")?;
        if !(0.0..=1.0).contains(&self.final_lr_ratio) {
            return Err(Error::invalid("final_lr_ratio must lie in [0, 1]"));
        }
        if !self.static_prior_magnitude.is_finite() || self.static_prior_magnitude < 0.0 {
            return Err(Error::invalid("static_prior_magnitude must be finite and non-negative"));
        }
        Ok(())
    }

    /// Learning-rate multiplier at step `t`.
    pub fn lr_scale(&self, t: usize) -> f64 {
        cosine_scale(t, self.iters, self.final_lr_ratio)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitState {
    pub params: Params,
    pub adam_psi: Adam,
    pub adam_omega: Adam,
    pub adam_static: Adam,
    pub adam_dynamic: Adam,
    pub iteration: usize,
    pub seed: u64,
}

fn flat3(v: &[Vec3]) -> Vec<f64> {
    v.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
}

fn unflat3(x: &[f64], out: &mut [Vec3]) {
    for (o, c) in out.iter_mut().zip(x.chunks_exact(3)) {
        *o = Vec3::new(c[0], c[1], c[2]);
    }
}

impl FitState {
    /// Tracked ψ/ω, zero dynamic fields, static field pushed outward off the face.
    pub fn init(problem: &FitProblem, schedule: &Schedule, seed: u64) -> Result<Self> {
        let rig = &problem.rig;
        let n = rig.n_dense();
        let frames = problem.frames();
        let mut fields = DetailFields::zeros(n, frames, rig.facial_mask().to_vec());
        if schedule.static_prior_magnitude > 0.0 {
            let normals = rig.neutral_normals()?;
            for (v, d) in fields.static_field.iter_mut().enumerate() {
                if !rig.facial_mask()[v] {
                    *d = normals[v] * schedule.static_prior_magnitude;
                }
            }
        }
        let params = Params {
            psi: problem.priors.iter().map(|p| p.psi.clone()).collect(),
            omega: problem.priors.iter().map(|p| p.omega_vec()).collect(),
            fields,
        };
        let k = rig.k_psi();
        Ok(FitState {
            adam_psi: Adam::new(schedule.adam(schedule.lr_psi), frames * k),
            adam_omega: Adam::new(schedule.adam(schedule.lr_omega), frames * 3),
            adam_static: Adam::new(schedule.field_adam(), n * 3),
            adam_dynamic: Adam::new(schedule.field_adam(), frames * n * 3),
            params,
            iteration: 0,
            seed,
        })
    }

    /// One Adam update of the optimized blocks; Δ_f is re-masked afterward.
    pub fn step(&mut self, g: &Gradients, lr_scale: f64, optimize_omega: bool, optimize_fields: bool) -> Result<()> {
        if let Some(block) = g.non_finite_block() {
            return Err(Error::numerical(format!("non-finite gradient in block `{block}`")));
        }
        let p = &mut self.params;
        let mut psi: Vec<f64> = p.psi.concat();
        self.adam_psi.step(&mut psi, &g.psi.concat(), lr_scale);
        for (dst, src) in p.psi.iter_mut().zip(psi.chunks_exact(g.psi[0].len().max(1))) {
            dst.copy_from_slice(src);
        }
        if optimize_omega {
            let mut om = flat3(&p.omega);
            self.adam_omega.step(&mut om, &flat3(&g.omega), lr_scale);
            unflat3(&om, &mut p.omega);
        }
        if !optimize_fields {
            self.iteration += 1;
            return Ok(());
        }
        let mut st = flat3(&p.fields.static_field);
        self.adam_static.step(&mut st, &flat3(&g.static_field), lr_scale);
        unflat3(&st, &mut p.fields.static_field);

        let n3 = p.fields.n_dense() * 3;
        let mut dy: Vec<f64> = p.fields.dynamic_all().iter().flat_map(|d| flat3(d)).collect();
        let gd: Vec<f64> = g.dynamic.iter().flat_map(|d| flat3(d)).collect();
        self.adam_dynamic.step(&mut dy, &gd, lr_scale);
        for (i, chunk) in dy.chunks_exact(n3).enumerate() {
            p.fields.dynamic_mut_with(i, |d| unflat3(chunk, d));
        }
        self.iteration += 1;
        Ok(())
    }

    pub fn to_hhm(&self) -> HhmFile {
        let p = &self.params;
        let frames = p.psi.len();
        let k = p.psi.first().map_or(0, Vec::len);
        let n = p.fields.n_dense();
        let mut f = HhmFile::new(CHECKPOINT_KIND);
        f.set_meta("iteration", self.iteration);
        f.set_meta("seed", self.seed);
        f.push_f64("psi", &[frames, k], p.psi.concat());
        f.push_f64("omega", &[frames, 3], flat3(&p.omega));
        f.push_f64("static_field", &[n, 3], flat3(&p.fields.static_field));
        let dy: Vec<f64> = p.fields.dynamic_all().iter().flat_map(|d| flat3(d)).collect();
        f.push_f64("dynamic_field", &[frames, n, 3], dy);
        f.push_i32("facial_mask", &[n], p.fields.facial_mask().iter().map(|&m| m as i32).collect());
        f
    }
}

/// Reads a checkpoint back into parameters (moment buffers are not stored).
pub fn params_from_hhm(f: &HhmFile) -> Result<Params> {
    f.expect_kind(CHECKPOINT_KIND)?;
    let (psi_shape, psi) = f.f64s("psi")?;
    let (dyn_shape, dy) = f.f64s("dynamic_field")?;
    if psi_shape.len() != 2 || dyn_shape.len() != 3 || dyn_shape[0] != psi_shape[0] {
        return Err(Error::format("hhm", "inconsistent checkpoint shapes"));
    }
    let (frames, k, n) = (psi_shape[0], psi_shape[1], dyn_shape[1]);
    let (_, omega) = f.f64s("omega")?;
    let (_, st) = f.f64s("static_field")?;
    let mask: Vec<bool> = f.i32s("facial_mask")?.1.iter().map(|&m| m != 0).collect();
    if omega.len() != frames * 3 || st.len() != n * 3 || mask.len() != n {
        return Err(Error::format("hhm", "inconsistent checkpoint shapes"));
    }
    let mut fields = DetailFields::zeros(n, 0, mask);
    unflat3(&st, &mut fields.static_field);
    for chunk in dy.chunks_exact(n * 3) {
        let mut d = vec![Vec3::zeros(); n];
        unflat3(chunk, &mut d);
        fields.push_frame(d)?;
    }
    let mut om = vec![Vec3::zeros(); frames];
    unflat3(&omega, &mut om);
    Ok(Params {
        psi: if k == 0 { vec![Vec::new(); frames] } else { psi.chunks_exact(k).map(<[f64]>::to_vec).collect() },
        omega: om,
        fields,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisentanglementStats {
    /// RMS over vertices of |Δ_g|.
    pub static_rms: f64,
    pub static_max: f64,
    /// RMS over vertices and frames of |Δ_f|.
    pub dynamic_rms: f64,
    /// RMS and max over vertices of the temporal mean of Δ_f.
    pub dynamic_mean_rms: f64,
    pub dynamic_mean_max: f64,
    /// Largest |Δ_f| component off the facial mask; always 0.
    pub dynamic_off_mask_max: f64,
}

impl DisentanglementStats {
    pub fn of(fields: &DetailFields) -> Self {
        let n = fields.n_dense().max(1) as f64;
        let rms = |v: &[Vec3]| (v.iter().map(|x| x.norm_squared()).sum::<f64>() / n).sqrt();
        let max = |v: &[Vec3]| v.iter().map(|x| x.norm()).fold(0.0, f64::max);
        let frames = fields.frames();
        let mean = fields.temporal_mean();
        let dyn_ms: f64 = fields.dynamic_all().iter().map(|d| rms(d).powi(2)).sum::<f64>() / frames.max(1) as f64;
        let mask = fields.facial_mask();
        let off = fields
            .dynamic_all()
            .iter()
            .flat_map(|d| d.iter().enumerate().filter(|(v, _)| !mask[*v]).map(|(_, x)| x.amax()))
            .fold(0.0, f64::max);
        DisentanglementStats {
            static_rms: rms(&fields.static_field),
            static_max: max(&fields.static_field),
            dynamic_rms: dyn_ms.sqrt(),
            dynamic_mean_rms: rms(&mean),
            dynamic_mean_max: max(&mean),
            dynamic_off_mask_max: off,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub seed: u64,
    pub iterations: usize,
    /// Loss at the parameters each step started from.
    pub history: Vec<LossBreakdown>,
    pub initial: LossBreakdown,
    pub final_terms: LossBreakdown,
    pub converged: bool,
    pub aborted: Option<String>,
    pub empty_overlap_frames: usize,
    pub disentanglement: DisentanglementStats,
    pub wall_clock_s: f64,
}

impl FitReport {
    /// Hash of everything except wall-clock time.
    pub fn digest(&self) -> String {
        let mut r = self.clone();
        r.wall_clock_s = 0.0;
        let json = serde_json::to_vec(&r).expect("report serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn loss_reduction(&self) -> f64 {
        if self.initial.total > 0.0 {
            1.0 - self.final_terms.total / self.initial.total
        } else {
            0.0
        }
    }

    /// Trailing mean over `window` entries of the total loss history.
    pub fn smoothed_history(&self, window: usize) -> Vec<f64> {
        let totals: Vec<f64> = self.history.iter().map(|b| b.total).collect();
        smoothed(&totals, window)
    }
}

pub fn smoothed(x: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    if x.len() < w {
        return Vec::new();
    }
    x.windows(w).map(|s| s.iter().sum::<f64>() / w as f64).collect()
}

const DIVERGENCE_FACTOR: f64 = 1e3;
const DIVERGENCE_PATIENCE: usize = 50;

/// Runs Adam on the total loss from the standard initialization.
pub fn fit_sequence(problem: &FitProblem, schedule: &Schedule, seed: u64) -> Result<(FitState, FitReport)> {
    let state = FitState::init(problem, schedule, seed)?;
    fit_from(problem, schedule, state)
}

/// Runs Adam from a given state.
/// The data terms only see `static + dynamic(i)`, so shifting the temporal mean
/// between the fields changes nothing but the regularizers, which are quadratic
/// in the shift. Three evaluations give the exact minimizer.
pub fn recenter(problem: &FitProblem, fields: &mut DetailFields) -> Result<f64> {
    let lap = &problem.rig.topo.laplacian;
    let w = &problem.weights;
    let energy = |s: f64| -> Result<f64> {
        let mut f = fields.clone();
        f.shift_mean(s);
        let r = detail_regularizers(&f, lap, w)?;
        Ok(r.dis + w.lambda_lap * r.lap)
    };
    let (r0, rh, r1) = (energy(0.0)?, energy(0.5)?, energy(1.0)?);
    let curv = 2.0 * (r1 - 2.0 * rh + r0);
    if curv <= 0.0 || !curv.is_finite() {
        return Ok(0.0);
    }
    let slope = 4.0 * rh - 3.0 * r0 - r1;
    let s = (-slope / curv).clamp(0.0, 1.0);
    if s > 0.0 && energy(s)? < r0 {
        fields.shift_mean(s);
        Ok(s)
    } else {
        Ok(0.0)
    }
}

pub fn fit_from(problem: &FitProblem, schedule: &Schedule, mut state: FitState) -> Result<(FitState, FitReport)> {
    check_adjoint_registry()?;
    problem.validate()?;
    schedule.validate()?;
    let start = Instant::now();
    let mut history = Vec::with_capacity(schedule.iters);
    let mut above = 0usize;
    let mut aborted = None;
    let mut initial: Option<LossBreakdown> = None;
    for t in 0..schedule.iters {
        let eval = match evaluate(problem, &state.params, None) {
            Ok(e) => e,
            Err(e) if e.is_numerical() => {
                aborted = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        };
        let total = eval.breakdown.total;
        let init_total = initial.get_or_insert(eval.breakdown).total;
        history.push(eval.breakdown);
        if schedule.log_every > 0 && t % schedule.log_every == 0 {
            log::info!("iter {t}: total {total:.6e}");
        }
        above = if total > DIVERGENCE_FACTOR * init_total { above + 1 } else { 0 };
        if above >= DIVERGENCE_PATIENCE {
            aborted = Some(format!("diverged: loss above {DIVERGENCE_FACTOR}x initial for {DIVERGENCE_PATIENCE} iterations"));
            break;
        }
        let fields_on = t >= schedule.field_warmup;
        if let Err(e) = state.step(&eval.grads, schedule.lr_scale(t), schedule.optimize_omega, fields_on) {
            aborted = Some(e.to_string());
            break;
        }
        if fields_on && schedule.recenter_dynamic {
            recenter(problem, &mut state.params.fields)?;
        }
    }
    let final_eval = evaluate(problem, &state.params, None);
    let (final_terms, empty) = match final_eval {
        Ok(e) => (e.breakdown, e.empty_overlap_frames),
        Err(e) if e.is_numerical() => {
            aborted.get_or_insert(e.to_string());
            (LossBreakdown { total: f64::NAN, ..Default::default() }, 0)
        }
        Err(e) => return Err(e),
    };
    let initial = initial.unwrap_or(final_terms);
    let totals: Vec<f64> = history.iter().map(|b| b.total).collect();
    let converged = aborted.is_none() && {
        let s = smoothed(&totals, 20);
        match (s.len() >= 21).then(|| (s[s.len() - 21], s[s.len() - 1])) {
            Some((a, b)) => (a - b).abs() <= schedule.converge_tol * a.abs().max(f64::MIN_POSITIVE),
            None => false,
        }
    };
    let report = FitReport {
        seed: state.seed,
        iterations: history.len(),
        history,
        initial,
        final_terms,
        converged,
        aborted,
        empty_overlap_frames: empty,
        disentanglement: DisentanglementStats::of(&state.params.fields),
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    Ok((state, report))
}
