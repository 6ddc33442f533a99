//! Run configuration and the operations behind each CLI subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::corpus::{teacher_corpus, CorpusConfig};
use super::io::{self, Image};
use super::synth::{generate, read_dataset, write_dataset, Dataset, Manifest, SynthConfig};
use crate::engine::{fit_sequence, gradcheck, params_from_hhm, FitReport, FitState, GradcheckConfig, GradcheckReport, Params, Schedule};
use crate::engine::pipeline::forward;
use crate::error::{Error, Result};
use crate::hhm::HhmFile;
use crate::model::FrameParams;
use crate::objective::LossWeights;
use crate::transfer::{
    apply_transfer, export_control, train_transfer, ApplyReport, ControlManifest, Subject, TrainConfig, TrainReport, TransferDataset, TransferNet,
    TransferSample,
};

pub const RUN_FILE: &str = "run.json";
pub const CHECKPOINT: &str = "checkpoint.hhm";
pub const FIT_REPORT: &str = "fit_report.json";
pub const NET_FILE: &str = "net.hhm";
pub const TRAIN_REPORT: &str = "train_report.json";
pub const APPLY_REPORT: &str = "apply_report.json";
pub const THREADS_VAR: &str = "HEADFIT_THREADS";

/// Everything numerical a run depends on. Paths come from the command line.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Copied into every sub-config that takes a seed.
    pub seed: u64,
    pub synth: SynthConfig,
    pub weights: LossWeights,
    pub schedule: Schedule,
    pub gradcheck: GradcheckConfig,
    pub corpus: CorpusConfig,
    pub transfer: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        io::read_json(path)
    }

    /// Pushes `seed` down into the sub-configs.
    pub fn resolved(mut self) -> Self {
        self.synth.seed = self.seed;
        self.gradcheck.seed = self.seed;
        self.corpus.seed = self.seed;
        self.transfer.seed = self.seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.weights.validate()?;
        self.schedule.validate()?;
        self.gradcheck.validate()?;
        self.transfer.validate()
    }

    /// SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(&json))
}

/// Written next to every set of artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: Vec<PathBuf>,
    pub config: RunConfig,
}

fn record(out: &Path, command: &str, cfg: &RunConfig, inputs: &[&Path]) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let rec = RunRecord {
        command: command.into(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        inputs: inputs.iter().map(|p| p.to_path_buf()).collect(),
        config: cfg.clone(),
    };
    io::write_json(&out.join(RUN_FILE), &rec)
}

/// Sizes the global worker pool from `HEADFIT_THREADS` (unset or 0 = one per core).
/// Returns the worker count in effect.
pub fn init_threads() -> Result<usize> {
    let n = match std::env::var(THREADS_VAR) {
        Ok(s) => s.trim().parse::<usize>().map_err(|_| Error::invalid(format!("{THREADS_VAR} must be a non-negative integer, got `{s}`")))?,
        Err(_) => 0,
    };
    // a pool built earlier in the process stays in place
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(rayon::current_num_threads())
}

pub fn run_synth(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let scene = generate(&cfg.synth)?;
    let manifest = write_dataset(&scene, out, &cfg.hash())?;
    record(out, "synth", cfg, &[])?;
    Ok(manifest)
}

/// Recorded in the fit output so later steps can find the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRun {
    pub config_hash: String,
    pub seed: u64,
    pub data: PathBuf,
    pub digest: String,
    pub report: FitReport,
}

pub fn run_fit(cfg: &RunConfig, data: &Path, out: &Path) -> Result<FitRun> {
    cfg.validate()?;
    let ds = read_dataset(data)?;
    let problem = ds.problem(cfg.weights);
    let (state, report) = fit_sequence(&problem, &cfg.schedule, cfg.seed)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut ck = state.to_hhm();
    ck.set_meta("config_hash", cfg.hash());
    ck.save(&out.join(CHECKPOINT))?;
    let data_abs = std::fs::canonicalize(data).map_err(|e| Error::io(data, e))?;
    let run = FitRun { config_hash: cfg.hash(), seed: cfg.seed, data: data_abs, digest: report.digest(), report };
    io::write_json(&out.join(FIT_REPORT), &run)?;
    record(out, "fit", cfg, &[data])?;
    Ok(run)
}

/// A finished fit: its dataset, fitted parameters, and the identity they define.
pub struct FittedRun {
    pub dataset: Dataset,
    pub params: Params,
    pub subject: Subject,
}

pub fn load_fit(fit_dir: &Path) -> Result<FittedRun> {
    let run: FitRun = io::read_json(&fit_dir.join(FIT_REPORT))?;
    let dataset = read_dataset(&run.data)?;
    let params = params_from_hhm(&HhmFile::load(&fit_dir.join(CHECKPOINT))?)?;
    if params.fields.n_dense() != dataset.rig.n_dense() || params.psi.len() != dataset.priors.len() {
        return Err(Error::invalid(format!("{}: checkpoint does not match its dataset", fit_dir.display())));
    }
    let subject = Subject::new(dataset.rig.clone(), params.fields.static_field.clone())?;
    Ok(FittedRun { dataset, params, subject })
}

impl FittedRun {
    /// Fitted expression and jaw with the dataset's global pose.
    pub fn frames(&self) -> Vec<FrameParams> {
        self.dataset
            .priors
            .iter()
            .enumerate()
            .map(|(i, p)| FrameParams { psi: self.params.psi[i].clone(), omega: self.params.omega[i].into(), ..p.clone() })
            .collect()
    }
}

/// Starting point of a fit, or a saved checkpoint when given.
pub fn run_gradcheck(cfg: &RunConfig, data: &Path, checkpoint: Option<&Path>) -> Result<GradcheckReport> {
    cfg.validate()?;
    let ds = read_dataset(data)?;
    let problem = ds.problem(cfg.weights);
    let params = match checkpoint {
        Some(p) => params_from_hhm(&HhmFile::load(p)?)?,
        None => FitState::init(&problem, &cfg.schedule, cfg.seed)?.params,
    };
    gradcheck(&problem, &params, &cfg.gradcheck)
}

/// Trains on fitted runs, or on the synthetic teacher corpus when `fits` is empty.
pub fn run_transfer_train(cfg: &RunConfig, fits: &[PathBuf], out: &Path) -> Result<TrainReport> {
    cfg.validate()?;
    let mut train_cfg = cfg.transfer.clone();
    let data = if fits.is_empty() {
        // with no split given, the corpus's last identity is held out
        if train_cfg.validation_identities.is_empty() && cfg.corpus.identities >= 3 {
            train_cfg.validation_identities = vec![cfg.corpus.identities - 1];
        }
        teacher_corpus(&cfg.corpus)?.dataset
    } else {
        let mut identities = Vec::new();
        let mut samples = Vec::new();
        for (k, dir) in fits.iter().enumerate() {
            let run = load_fit(dir)?;
            identities.push(run.subject.identity()?);
            for (i, f) in run.frames().into_iter().enumerate() {
                samples.push(TransferSample { identity: k, psi: f.psi, omega: f.omega, offsets: run.params.fields.dynamic(i).to_vec() });
            }
        }
        TransferDataset { identities, samples }
    };
    let (net, report) = train_transfer(&data, &train_cfg)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut f = net.to_hhm();
    f.set_meta("config_hash", cfg.hash());
    f.set_meta("seed", cfg.seed);
    f.save(&out.join(NET_FILE))?;
    io::write_json(&out.join(TRAIN_REPORT), &report)?;
    let inputs: Vec<&Path> = fits.iter().map(PathBuf::as_path).collect();
    record(out, "transfer-train", cfg, &inputs)?;
    Ok(report)
}

fn load_net(path: &Path) -> Result<TransferNet> {
    TransferNet::from_hhm(&HhmFile::load(path)?)
}

/// Drives the target fit with the driving fit's sequence; writes one posed OBJ per frame.
pub fn run_transfer_apply(cfg: &RunConfig, net: &Path, target: &Path, driving: &Path, out: &Path) -> Result<ApplyReport> {
    let netw = load_net(net)?;
    let t = load_fit(target)?;
    let d = load_fit(driving)?;
    let res = apply_transfer(&netw, &t.subject, &d.frames())?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for (i, mesh) in res.posed.iter().enumerate() {
        io::write_obj(&out.join(format!("posed_{i:04}.obj")), mesh, &t.subject.rig.topo.faces)?;
    }
    io::write_json(&out.join(APPLY_REPORT), &res.report)?;
    record(out, "transfer-apply", cfg, &[net, target, driving])?;
    Ok(res.report)
}

/// Transfer followed by the reference and driving normal maps, in the target's camera.
pub fn run_export_control(cfg: &RunConfig, net: &Path, target: &Path, driving: &Path, out: &Path) -> Result<ControlManifest> {
    let netw = load_net(net)?;
    let t = load_fit(target)?;
    let d = load_fit(driving)?;
    let res = apply_transfer(&netw, &t.subject, &d.frames())?;
    let id = t.subject.identity()?;
    let reference_t = t.dataset.priors.first().map_or([0.0, 0.0, cfg.synth.distance], |p| p.global_trans);
    let (manifest, _, _) = export_control(&id, &t.subject.rig.topo.faces, &res.posed, &t.dataset.camera, reference_t, out)?;
    record(out, "export-control", cfg, &[net, target, driving])?;
    Ok(manifest)
}

/// Renders every frame of a dataset from its priors, or from a checkpoint:
/// normal and depth PFM, coverage PGM and posed OBJ.
pub fn run_render(cfg: &RunConfig, data: &Path, checkpoint: Option<&Path>, out: &Path) -> Result<usize> {
    let ds = read_dataset(data)?;
    let problem = ds.problem(cfg.weights);
    let params = match checkpoint {
        Some(p) => params_from_hhm(&HhmFile::load(p)?)?,
        None => Params {
            psi: ds.priors.iter().map(|p| p.psi.clone()).collect(),
            omega: ds.priors.iter().map(|p| p.omega.into()).collect(),
            fields: crate::deform::DetailFields::zeros(ds.rig.n_dense(), ds.priors.len(), ds.rig.facial_mask().to_vec()),
        },
    };
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for i in 0..problem.frames() {
        let f = forward(&problem.rig, &problem.camera, params.frame(&problem, i), &params.fields, i).map_err(|e| e.in_frame(i))?;
        io::write_pfm(&out.join(format!("normal_{i:04}.pfm")), &Image::from_normals(&f.buffers))?;
        io::write_pfm(&out.join(format!("depth_{i:04}.pfm")), &Image::from_depth(&f.buffers))?;
        io::write_pgm(&out.join(format!("mask_{i:04}.pgm")), f.buffers.width, f.buffers.height, &io::mask_to_pgm(&f.buffers.coverage))?;
        io::write_obj(&out.join(format!("posed_{i:04}.obj")), &f.posed, &problem.rig.topo.faces)?;
    }
    let inputs: Vec<&Path> = std::iter::once(data).chain(checkpoint).collect();
    record(out, "render", cfg, &inputs)?;
    Ok(problem.frames())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default().resolved();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.schedule.iters += 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn seed_reaches_sub_configs() {
        let c = RunConfig { seed: 9, ..Default::default() }.resolved();
        assert_eq!((c.synth.seed, c.gradcheck.seed, c.corpus.seed, c.transfer.seed), (9, 9, 9, 9));
    }

    #[test]
    fn config_json_round_trip_and_unknown_keys() {
        let c = RunConfig::default();
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&s).unwrap(), c);
        assert!(serde_json::from_str::<RunConfig>(r#"{"sede": 1}"#).is_err());
        let partial: RunConfig = serde_json::from_str(r#"{"seed": 4, "schedule": {"iters": 10}}"#).unwrap();
        assert_eq!(partial.schedule.iters, 10);
        assert_eq!(partial.schedule.lr_fields, Schedule::default().lr_fields);
    }
}
