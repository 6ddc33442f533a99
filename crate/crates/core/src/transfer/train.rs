//! Supervised training of the transfer networks on fitted offsets.

use std::time::Instant;

use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::mlp::Mlp;
use super::net::{NetArch, NeutralIdentity, TransferNet, GEO_FEATURES};
use crate::engine::adam::{cosine_scale, Adam, AdamConfig};
use crate::error::{check_len, Error, Result};
use crate::geom::{is_finite3, Vec3};

/// One fitted frame of one identity.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferSample {
    pub identity: usize,
    pub psi: Vec<f64>,
    pub omega: [f64; 3],
    pub offsets: Vec<Vec3>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferDataset {
    pub identities: Vec<NeutralIdentity>,
    pub samples: Vec<TransferSample>,
}

impl TransferDataset {
    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::invalid("transfer dataset has no samples"));
        }
        let k = self.samples[0].psi.len();
        for id in &self.identities {
            id.validate()?;
        }
        for (i, s) in self.samples.iter().enumerate() {
            let id = self
                .identities
                .get(s.identity)
                .ok_or_else(|| Error::invalid(format!("sample {i} names identity {} of {}", s.identity, self.identities.len())))?;
            check_len("sample psi", k, s.psi.len())?;
            check_len("sample offsets", id.n(), s.offsets.len())?;
            if !s.psi.iter().chain(&s.omega).all(|x| x.is_finite()) || !s.offsets.iter().all(is_finite3) {
                return Err(Error::numerical(format!("sample {i} is not finite")));
            }
        }
        Ok(())
    }

    pub fn k_psi(&self) -> usize {
        self.samples.first().map_or(0, |s| s.psi.len())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub arch: NetArch,
    pub epochs: usize,
    /// Samples per optimizer step.
    pub batch: usize,
    pub lr: f64,
    pub final_lr_ratio: f64,
    pub seed: u64,
    /// Identities kept out of training and scored as validation.
    pub validation_identities: Vec<usize>,
    /// When nonzero, every `k`-th sample of the remaining identities is also held out.
    pub validation_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arch: NetArch::default(),
            epochs: 200,
            batch: 8,
            lr: 1e-3,
            final_lr_ratio: 0.05,
            seed: 0,
            validation_identities: Vec::new(),
            validation_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        AdamConfig::with_lr(self.lr).validate("transfer")?;
        if self.batch == 0 {
            return Err(Error::invalid("batch must be positive"));
        }
        if !(0.0..=1.0).contains(&self.final_lr_ratio) {
            return Err(Error::invalid("final_lr_ratio must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Losses are masked mean-squared errors in units of `out_scale²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub epochs: usize,
    pub n_params: usize,
    pub train_identities: Vec<usize>,
    pub validation_identities: Vec<usize>,
    pub out_scale: f64,
    pub train_curve: Vec<f64>,
    pub validation_curve: Vec<f64>,
    pub train_baseline: f64,
    pub validation_baseline: Option<f64>,
    pub final_train: f64,
    pub final_validation: Option<f64>,
    pub warnings: Vec<String>,
    pub wall_clock_s: f64,
}

impl TrainReport {
    /// Final validation loss over the zero-predictor loss.
    pub fn validation_ratio(&self) -> Option<f64> {
        match (self.final_validation, self.validation_baseline) {
            (Some(v), Some(b)) if b > 0.0 => Some(v / b),
            _ => None,
        }
    }
}

/// `Σ_{v ∈ mask} ‖a_v - b_v‖² / (3 |mask|)`, in the units of the inputs squared.
pub fn masked_mse(a: &[Vec3], b: &[Vec3], mask: &[bool]) -> f64 {
    let mut sum = 0.0;
    let mut m = 0usize;
    for ((x, y), &on) in a.iter().zip(b).zip(mask) {
        if on {
            sum += (x - y).norm_squared();
            m += 1;
        }
    }
    if m == 0 {
        0.0
    } else {
        sum / (3 * m) as f64
    }
}

/// Loss of one sample and, if asked, its parameter gradients.
fn sample_loss(net: &TransferNet, id: &NeutralIdentity, verts: &[usize], s: &TransferSample, grads: bool) -> Result<(f64, Option<(Mlp, Mlp)>)> {
    let xe = net.encoder_input(std::slice::from_ref(&s.psi), &[s.omega])?;
    let te = net.encoder.trace(xe.view())?;
    let q = te.output().row(0).to_owned();
    let xg = net.geo_input(id, verts, q.view())?;
    let tg = net.geo.trace(xg.view())?;
    let y = tg.output();
    let m = verts.len().max(1);
    let inv = 1.0 / net.out_scale;
    let mut dy = Array2::zeros(y.raw_dim());
    let mut loss = 0.0;
    for (r, &v) in verts.iter().enumerate() {
        let t = s.offsets[v] * inv;
        for k in 0..3 {
            let e = y[[r, k]] - t[k];
            loss += e * e;
            dy[[r, k]] = 2.0 * e / (3 * m) as f64;
        }
    }
    loss /= (3 * m) as f64;
    if !grads {
        return Ok((loss, None));
    }
    let mut ge = Mlp::zeros(&net.encoder.sizes(), net.encoder.output);
    let mut gg = Mlp::zeros(&net.geo.sizes(), net.geo.output);
    let dx = net.geo.backward(&tg, dy, &mut gg);
    let dq = dx.slice(s![.., GEO_FEATURES..]).sum_axis(Axis(0)).insert_axis(Axis(0));
    net.encoder.backward(&te, dq, &mut ge);
    Ok((loss, Some((ge, gg))))
}

/// Mean loss over `samples` and its gradient. Per-sample work runs in
/// parallel; the sum is taken in sample order.
pub fn batch_loss(net: &TransferNet, data: &TransferDataset, samples: &[usize], grads: bool) -> Result<(f64, Option<(Mlp, Mlp)>)> {
    let facial: Vec<Vec<usize>> = data.identities.iter().map(NeutralIdentity::facial_vertices).collect();
    let parts: Vec<(f64, Option<(Mlp, Mlp)>)> = samples
        .par_iter()
        .map(|&i| {
            let s = &data.samples[i];
            sample_loss(net, &data.identities[s.identity], &facial[s.identity], s, grads)
        })
        .collect::<Result<_>>()?;
    let inv = 1.0 / samples.len().max(1) as f64;
    let mut loss = 0.0;
    let mut acc: Option<(Mlp, Mlp)> = None;
    for (l, g) in parts {
        loss += l;
        if let Some((ge, gg)) = g {
            match &mut acc {
                None => acc = Some((ge, gg)),
                Some((ae, ag)) => {
                    ae.add_assign(&ge);
                    ag.add_assign(&gg);
                }
            }
        }
    }
    if let Some((ae, ag)) = &mut acc {
        ae.scale(inv);
        ag.scale(inv);
    }
    Ok((loss * inv, acc))
}

fn zero_loss(data: &TransferDataset, samples: &[usize], out_scale: f64) -> f64 {
    let total: f64 = samples
        .iter()
        .map(|&i| {
            let s = &data.samples[i];
            let zeros = vec![Vec3::zeros(); s.offsets.len()];
            masked_mse(&zeros, &s.offsets, &data.identities[s.identity].mask)
        })
        .sum();
    total / (samples.len().max(1) as f64 * out_scale * out_scale)
}

/// Input centering and output scale taken from the training identities and targets.
fn fit_scales(net: &mut TransferNet, data: &TransferDataset, train_ids: &[usize], train: &[usize]) {
    let pts: Vec<Vec3> = train_ids
        .iter()
        .flat_map(|&i| {
            let id = &data.identities[i];
            id.facial_vertices().into_iter().map(move |v| id.positions[v])
        })
        .collect();
    if !pts.is_empty() {
        let c = pts.iter().sum::<Vec3>() / pts.len() as f64;
        let r = (pts.iter().map(|p| (p - c).norm_squared()).sum::<f64>() / pts.len() as f64).sqrt();
        net.pos_center = [c.x, c.y, c.z];
        if r > 0.0 {
            net.pos_scale = r;
        }
    }
    let ms = zero_loss(data, train, 1.0);
    net.out_scale = if ms > 0.0 { ms.sqrt() } else { 1e-3 };
}

pub fn train_transfer(data: &TransferDataset, cfg: &TrainConfig) -> Result<(TransferNet, TrainReport)> {
    data.validate()?;
    cfg.validate()?;
    let start = Instant::now();
    let n_ids = data.identities.len();
    if let Some(&bad) = cfg.validation_identities.iter().find(|&&i| i >= n_ids) {
        return Err(Error::invalid(format!("validation identity {bad} out of range ({n_ids} identities)")));
    }
    let k = cfg.validation_every;
    let is_val = |i: usize| cfg.validation_identities.contains(&data.samples[i].identity) || (k > 0 && i % k == k - 1);
    let train: Vec<usize> = (0..data.samples.len()).filter(|&i| !is_val(i)).collect();
    let val: Vec<usize> = (0..data.samples.len()).filter(|&i| is_val(i)).collect();
    let mut train_ids: Vec<usize> = train.iter().map(|&i| data.samples[i].identity).collect();
    train_ids.sort_unstable();
    train_ids.dedup();
    if train.is_empty() {
        return Err(Error::invalid("no training samples left after the validation split"));
    }
    let mut warnings = Vec::new();
    if train_ids.len() < 2 {
        let msg = "training split has a single identity; cross-identity generalization is untested".to_string();
        log::warn!("{msg}");
        warnings.push(msg);
    }

    let mut net = TransferNet::new(data.k_psi(), &cfg.arch, cfg.seed)?;
    fit_scales(&mut net, data, &train_ids, &train);
    let train_baseline = zero_loss(data, &train, net.out_scale);
    let validation_baseline = (!val.is_empty()).then(|| zero_loss(data, &val, net.out_scale));

    let n_enc = net.encoder.n_params();
    let mut theta: Vec<f64> = net.encoder.flat();
    theta.extend(net.geo.flat());
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), theta.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let steps_per_epoch = train.len().div_ceil(cfg.batch);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut order = train.clone();
    let mut train_curve = Vec::with_capacity(cfg.epochs);
    let mut validation_curve = Vec::new();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch) {
            let (loss, g) = batch_loss(&net, data, batch, true)?;
            let (ge, gg) = g.expect("gradients requested");
            let mut grad = ge.flat();
            grad.extend(gg.flat());
            if !grad.iter().all(|x| x.is_finite()) {
                return Err(Error::numerical("non-finite transfer gradient"));
            }
            adam.step(&mut theta, &grad, cosine_scale(step, total_steps, cfg.final_lr_ratio));
            net.encoder.set_flat(&theta[..n_enc]);
            net.geo.set_flat(&theta[n_enc..]);
            epoch_loss += loss * batch.len() as f64;
            step += 1;
        }
        train_curve.push(epoch_loss / train.len() as f64);
        if !val.is_empty() {
            validation_curve.push(batch_loss(&net, data, &val, false)?.0);
        }
    }
    let net = net.quantized();
    net.validate()?;
    let final_train = batch_loss(&net, data, &train, false)?.0;
    let final_validation = if val.is_empty() { None } else { Some(batch_loss(&net, data, &val, false)?.0) };
    let report = TrainReport {
        seed: cfg.seed,
        epochs: cfg.epochs,
        n_params: net.encoder.n_params() + net.geo.n_params(),
        train_identities: train_ids,
        validation_identities: cfg.validation_identities.clone(),
        out_scale: net.out_scale,
        train_curve,
        validation_curve,
        train_baseline,
        validation_baseline,
        final_train,
        final_validation,
        warnings,
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    Ok((net, report))
}
