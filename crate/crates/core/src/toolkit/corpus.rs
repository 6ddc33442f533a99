//! Multi-identity corpus for the transfer module, with offsets produced by a
//! known linear teacher instead of by fitting.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::synth::{toy_model, SynthConfig, K_BETA};
use crate::error::{Error, Result};
use crate::geom::{Mat3, Vec3};
use crate::model::FrameParams;
use crate::rig::Rig;
use crate::transfer::{NeutralIdentity, Subject, TransferDataset, TransferSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub identities: usize,
    pub frames: usize,
    pub levels: usize,
    pub seed: u64,
    /// Standard deviation of the shape coefficients.
    pub beta_scale: f64,
    pub psi_scale: f64,
    pub omega_scale: f64,
    /// Typical offset size, meters.
    pub amplitude: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig { identities: 4, frames: 16, levels: 1, seed: 0, beta_scale: 2.0, psi_scale: 0.5, omega_scale: 0.05, amplitude: 1e-3 }
    }
}

/// Drives are centered per identity. `Δ_v = amplitude * Σ_k c_k (A_k p_v / RADIUS + b_k)` on facial vertices, with
/// `c = ψ ‖ ω`. Linear in position for fixed drive and in drive for fixed
/// position, zero at the neutral drive.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearTeacher {
    pub a: Vec<Mat3>,
    pub b: Vec<Vec3>,
    pub amplitude: f64,
}

impl LinearTeacher {
    pub const RADIUS: f64 = 0.1;

    pub fn random(n_drive: usize, amplitude: f64, rng: &mut ChaCha8Rng) -> Self {
        let s = 1.0 / (n_drive as f64).sqrt();
        let mut g = || -> f64 { StandardNormal.sample(rng) };
        let a = (0..n_drive).map(|_| Mat3::from_fn(|_, _| s * g())).collect();
        let b = (0..n_drive).map(|_| Vec3::new(s * g(), s * g(), s * g())).collect();
        LinearTeacher { a, b, amplitude }
    }

    pub fn offsets(&self, id: &NeutralIdentity, psi: &[f64], omega: &[f64; 3]) -> Result<Vec<Vec3>> {
        let c: Vec<f64> = psi.iter().chain(omega).copied().collect();
        if c.len() != self.a.len() {
            return Err(Error::dim("teacher drive", self.a.len(), c.len()));
        }
        Ok(id
            .positions
            .iter()
            .zip(&id.mask)
            .map(|(p, &m)| {
                if !m {
                    return Vec3::zeros();
                }
                let ph = p / Self::RADIUS;
                c.iter().zip(self.a.iter().zip(&self.b)).map(|(ck, (a, b))| (a * ph + b) * *ck).sum::<Vec3>() * self.amplitude
            })
            .collect())
    }
}

#[derive(Debug, Clone)]
pub struct TeacherCorpus {
    pub config: CorpusConfig,
    pub subjects: Vec<Subject>,
    pub sequences: Vec<Vec<FrameParams>>,
    pub teacher: LinearTeacher,
    pub dataset: TransferDataset,
}

pub fn teacher_corpus(cfg: &CorpusConfig) -> Result<TeacherCorpus> {
    if cfg.identities == 0 || cfg.frames == 0 {
        return Err(Error::invalid("corpus needs at least one identity and one frame"));
    }
    let synth = SynthConfig { levels: cfg.levels, seed: cfg.seed, ..SynthConfig::default() };
    let model = toy_model(&synth)?;
    let k_psi = model.k_psi();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let teacher = LinearTeacher::random(k_psi + 3, cfg.amplitude, &mut rng);
    let mut g = move || -> f64 { StandardNormal.sample(&mut rng) };
    let mut subjects = Vec::new();
    let mut sequences = Vec::new();
    let mut identities = Vec::new();
    let mut samples = Vec::new();
    for k in 0..cfg.identities {
        let beta: Vec<f64> = (0..K_BETA).map(|_| cfg.beta_scale * g()).collect();
        let rig = Rig::new(model.clone(), beta, cfg.levels, false)?;
        let n = rig.n_dense();
        let subject = Subject::new(rig, vec![Vec3::zeros(); n])?;
        let id = subject.identity()?;
        let mut drives: Vec<Vec<f64>> = (0..cfg.frames)
            .map(|_| (0..k_psi + 3).map(|c| if c < k_psi { cfg.psi_scale } else { cfg.omega_scale } * g()).collect())
            .collect();
        // zero temporal mean per identity, so the teacher offsets are zero-mean too
        for c in 0..k_psi + 3 {
            let mean = drives.iter().map(|d| d[c]).sum::<f64>() / cfg.frames as f64;
            drives.iter_mut().for_each(|d| d[c] -= mean);
        }
        let mut seq = Vec::new();
        for d in drives {
            let psi = d[..k_psi].to_vec();
            let omega = [d[k_psi], d[k_psi + 1], d[k_psi + 2]];
            let offsets = teacher.offsets(&id, &psi, &omega)?;
            seq.push(FrameParams { psi: psi.clone(), omega, global_rot: [0.0; 3], global_trans: [0.0, 0.0, synth.distance] });
            samples.push(TransferSample { identity: k, psi, omega, offsets });
        }
        identities.push(id);
        subjects.push(subject);
        sequences.push(seq);
    }
    Ok(TeacherCorpus { config: cfg.clone(), subjects, sequences, teacher, dataset: TransferDataset { identities, samples } })
}
