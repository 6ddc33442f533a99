//! Driving-signal encoder and per-vertex geometry network.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mlp::{Activation, Layer, Mlp};
use crate::error::{check_len, Error, Result};
use crate::geom::{is_finite3, Vec3};
use crate::hhm::HhmFile;
use crate::mesh::vertex_normals;
use crate::rig::Rig;

pub const NET_KIND: &str = "transfer-net";

/// Per-vertex geometry features ahead of the code: position and normal.
pub const GEO_FEATURES: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetArch {
    pub encoder_hidden: Vec<usize>,
    pub geo_hidden: Vec<usize>,
    pub d_code: usize,
}

impl Default for NetArch {
    fn default() -> Self {
        NetArch { encoder_hidden: vec![128, 128], geo_hidden: vec![128, 128, 128], d_code: 64 }
    }
}

/// Personalized neutral geometry: dense positions with the static field applied.
#[derive(Debug, Clone, PartialEq)]
pub struct NeutralIdentity {
    pub positions: Vec<Vec3>,
    pub normals: Vec<Vec3>,
    pub mask: Vec<bool>,
}

impl NeutralIdentity {
    pub fn new(positions: Vec<Vec3>, normals: Vec<Vec3>, mask: Vec<bool>) -> Result<Self> {
        let id = NeutralIdentity { positions, normals, mask };
        id.validate()?;
        Ok(id)
    }

    pub fn from_rig(rig: &Rig, static_field: &[Vec3]) -> Result<Self> {
        let dense = rig.neutral_dense()?;
        check_len("static field", dense.len(), static_field.len())?;
        let positions: Vec<Vec3> = dense.iter().zip(static_field).map(|(p, d)| p + d).collect();
        let (normals, _) = vertex_normals(&positions, &rig.topo.faces);
        NeutralIdentity::new(positions, normals, rig.facial_mask().to_vec())
    }

    pub fn n(&self) -> usize {
        self.positions.len()
    }

    pub fn facial_vertices(&self) -> Vec<usize> {
        (0..self.n()).filter(|&v| self.mask[v]).collect()
    }

    pub fn validate(&self) -> Result<()> {
        check_len("identity normals", self.n(), self.normals.len())?;
        check_len("identity mask", self.n(), self.mask.len())?;
        if !self.positions.iter().chain(&self.normals).all(is_finite3) {
            return Err(Error::numerical("identity geometry is not finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferNet {
    pub encoder: Mlp,
    pub geo: Mlp,
    pub d_code: usize,
    /// Positions enter the geometry network as `(p - pos_center) / pos_scale`.
    pub pos_center: [f64; 3],
    pub pos_scale: f64,
    /// Raw geometry outputs are multiplied by this to give meters.
    pub out_scale: f64,
}

impl TransferNet {
    /// Random hidden weights and a zero output layer on the geometry network,
    /// so a fresh net predicts zero offsets.
    pub fn new(k_psi: usize, arch: &NetArch, seed: u64) -> Result<Self> {
        if arch.d_code == 0 {
            return Err(Error::invalid("code dimension must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut enc_sizes = vec![k_psi + 3];
        enc_sizes.extend(&arch.encoder_hidden);
        enc_sizes.push(arch.d_code);
        let mut geo_sizes = vec![GEO_FEATURES + arch.d_code];
        geo_sizes.extend(&arch.geo_hidden);
        geo_sizes.push(3);
        let net = TransferNet {
            encoder: Mlp::random(&enc_sizes, Activation::Tanh, false, &mut rng),
            geo: Mlp::random(&geo_sizes, Activation::Identity, true, &mut rng),
            d_code: arch.d_code,
            pos_center: [0.0; 3],
            pos_scale: 1.0,
            out_scale: 1.0,
        };
        net.validate()?;
        Ok(net)
    }

    pub fn k_psi(&self) -> usize {
        self.encoder.n_in().saturating_sub(3)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate("encoder")?;
        self.geo.validate("geometry network")?;
        if self.encoder.output != Activation::Tanh {
            return Err(Error::invalid("encoder output must be tanh"));
        }
        if self.encoder.n_out() != self.d_code {
            return Err(Error::dim("encoder output", self.d_code, self.encoder.n_out()));
        }
        if self.geo.n_in() != GEO_FEATURES + self.d_code {
            return Err(Error::dim("geometry network input", GEO_FEATURES + self.d_code, self.geo.n_in()));
        }
        if self.geo.n_out() != 3 {
            return Err(Error::dim("geometry network output", 3, self.geo.n_out()));
        }
        let scales_ok = self.pos_scale.is_finite()
            && self.pos_scale > 0.0
            && self.out_scale.is_finite()
            && self.out_scale > 0.0
            && self.pos_center.iter().all(|c| c.is_finite());
        if !scales_ok {
            return Err(Error::invalid("network input/output scales must be finite and positive"));
        }
        Ok(())
    }

    /// Same net with every weight rounded through f32, as stored on disk.
    pub fn quantized(&self) -> Self {
        TransferNet { encoder: self.encoder.quantized(), geo: self.geo.quantized(), ..self.clone() }
    }

    /// True when the geometry network cannot produce anything but zero.
    pub fn is_degenerate(&self) -> bool {
        self.geo.layers.last().is_none_or(|l| l.w.iter().chain(l.b.iter()).all(|&w| w == 0.0))
    }

    pub fn encoder_input(&self, psi_seq: &[Vec<f64>], omega_seq: &[[f64; 3]]) -> Result<Array2<f64>> {
        check_len("omega sequence", psi_seq.len(), omega_seq.len())?;
        let k = self.k_psi();
        let mut x = Array2::zeros((psi_seq.len(), k + 3));
        for (i, (psi, om)) in psi_seq.iter().zip(omega_seq).enumerate() {
            check_len("psi", k, psi.len())?;
            for (c, v) in psi.iter().chain(om).enumerate() {
                x[[i, c]] = *v;
            }
        }
        Ok(x)
    }

    /// Geometry-network rows for the given vertices, code appended.
    pub fn geo_input(&self, identity: &NeutralIdentity, vertices: &[usize], q: ArrayView1<f64>) -> Result<Array2<f64>> {
        check_len("code", self.d_code, q.len())?;
        let mut x = Array2::zeros((vertices.len(), GEO_FEATURES + self.d_code));
        let c = Vec3::from(self.pos_center);
        for (r, &v) in vertices.iter().enumerate() {
            let p = (identity.positions[v] - c) / self.pos_scale;
            let n = identity.normals[v];
            for k in 0..3 {
                x[[r, k]] = p[k];
                x[[r, 3 + k]] = n[k];
            }
            for (k, qk) in q.iter().enumerate() {
                x[[r, GEO_FEATURES + k]] = *qk;
            }
        }
        Ok(x)
    }

    pub fn to_hhm(&self) -> HhmFile {
        let mut f = HhmFile::new(NET_KIND);
        let join = |s: Vec<usize>| s.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        f.set_meta("encoder_sizes", join(self.encoder.sizes()));
        f.set_meta("geo_sizes", join(self.geo.sizes()));
        f.set_meta("hidden_activation", "tanh");
        f.set_meta("encoder_output", self.encoder.output.name());
        f.set_meta("geo_output", self.geo.output.name());
        f.set_meta("d_code", self.d_code);
        f.set_meta("pos_center", self.pos_center.map(|c| format!("{c:e}")).join(","));
        f.set_meta("pos_scale", format!("{:e}", self.pos_scale));
        f.set_meta("out_scale", format!("{:e}", self.out_scale));
        for (prefix, net) in [("encoder", &self.encoder), ("geo", &self.geo)] {
            for (l, layer) in net.layers.iter().enumerate() {
                let w: Vec<f32> = layer.w.iter().map(|&x| x as f32).collect();
                let b: Vec<f32> = layer.b.iter().map(|&x| x as f32).collect();
                f.push_f32(&format!("{prefix}.{l}.w"), &[layer.n_out(), layer.n_in()], w);
                f.push_f32(&format!("{prefix}.{l}.b"), &[layer.n_out()], b);
            }
        }
        f
    }

    pub fn from_hhm(f: &HhmFile) -> Result<Self> {
        f.expect_kind(NET_KIND)?;
        let sizes = |key: &str| -> Result<Vec<usize>> {
            f.meta(key)?
                .split(',')
                .map(|s| s.trim().parse().map_err(|_| Error::format("HHM", format!("bad `{key}` entry `{s}`"))))
                .collect()
        };
        let load = |prefix: &str, sizes: &[usize], output: Activation| -> Result<Mlp> {
            let mut layers = Vec::new();
            for (l, pair) in sizes.windows(2).enumerate() {
                let (ws, w) = f.f64s(&format!("{prefix}.{l}.w"))?;
                let (bs, b) = f.f64s(&format!("{prefix}.{l}.b"))?;
                if ws != [pair[1], pair[0]] || bs != [pair[1]] {
                    return Err(Error::format("HHM", format!("{prefix} layer {l} has shape {ws:?}/{bs:?}")));
                }
                layers.push(Layer {
                    w: Array2::from_shape_vec((pair[1], pair[0]), w).map_err(|e| Error::format("HHM", e.to_string()))?,
                    b: b.into(),
                });
            }
            Ok(Mlp { layers, output })
        };
        if f.meta("hidden_activation")? != "tanh" {
            return Err(Error::format("HHM", "only tanh hidden layers are supported"));
        }
        let center: Vec<f64> = f
            .meta("pos_center")?
            .split(',')
            .map(|s| s.trim().parse().map_err(|_| Error::format("HHM", "bad pos_center")))
            .collect::<Result<_>>()?;
        if center.len() != 3 {
            return Err(Error::format("HHM", "pos_center needs three values"));
        }
        let net = TransferNet {
            encoder: load("encoder", &sizes("encoder_sizes")?, Activation::parse(f.meta("encoder_output")?)?)?,
            geo: load("geo", &sizes("geo_sizes")?, Activation::parse(f.meta("geo_output")?)?)?,
            d_code: f.meta_parse("d_code")?,
            pos_center: [center[0], center[1], center[2]],
            pos_scale: f.meta_parse("pos_scale")?,
            out_scale: f.meta_parse("out_scale")?,
        };
        net.validate()?;
        Ok(net)
    }
}

/// Per-frame codes, one row per frame, each entry in (-1, 1).
pub fn encode(net: &TransferNet, psi_seq: &[Vec<f64>], omega_seq: &[[f64; 3]]) -> Result<Array2<f64>> {
    let x = net.encoder_input(psi_seq, omega_seq)?;
    net.encoder.forward(x.view())
}

/// Offsets for one frame code; exactly zero off the facial mask.
pub fn predict_offsets(net: &TransferNet, identity: &NeutralIdentity, q: ArrayView1<f64>) -> Result<Vec<Vec3>> {
    identity.validate()?;
    let verts = identity.facial_vertices();
    let mut out = vec![Vec3::zeros(); identity.n()];
    if verts.is_empty() {
        check_len("code", net.d_code, q.len())?;
        return Ok(out);
    }
    let x = net.geo_input(identity, &verts, q)?;
    let y = net.geo.forward(x.view())?;
    for (r, &v) in verts.iter().enumerate() {
        out[v] = Vec3::new(y[[r, 0]], y[[r, 1]], y[[r, 2]]) * net.out_scale;
    }
    Ok(out)
}

/// Offsets for every row of `codes`.
pub fn predict_sequence(net: &TransferNet, identity: &NeutralIdentity, codes: ArrayView2<f64>) -> Result<Vec<Vec<Vec3>>> {
    codes.rows().into_iter().map(|q| predict_offsets(net, identity, q)).collect()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::geom::v3;
    use ndarray::Array1;
    use rand::Rng;

    pub(crate) fn small_arch() -> NetArch {
        NetArch { encoder_hidden: vec![8, 8], geo_hidden: vec![8, 8, 8], d_code: 4 }
    }

    /// Random weights in every layer, including the geometry output.
    pub(crate) fn busy_net(seed: u64) -> TransferNet {
        let mut net = TransferNet::new(3, &small_arch(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for l in net.encoder.layers.iter_mut().chain(net.geo.layers.iter_mut()) {
            l.w.iter_mut().chain(l.b.iter_mut()).for_each(|w| *w = rng.random_range(-0.6..0.6));
        }
        net.out_scale = 1e-3;
        net
    }

    pub(crate) fn identity(seed: u64, n: usize) -> NeutralIdentity {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let positions: Vec<Vec3> = (0..n).map(|_| v3(rng.random(), rng.random(), rng.random()) * 0.1).collect();
        let normals: Vec<Vec3> = (0..n).map(|_| v3(rng.random(), rng.random(), 1.0).normalize()).collect();
        let mask = (0..n).map(|v| v % 3 != 0).collect();
        NeutralIdentity::new(positions, normals, mask).unwrap()
    }

    #[test]
    fn zero_weights_give_zero_codes() {
        let mut net = busy_net(1);
        net.encoder = Mlp::zeros(&net.encoder.sizes(), Activation::Tanh);
        let q = encode(&net, &[vec![0.3, 0.1, -0.2]], &[[0.1, 0.0, 0.0]]).unwrap();
        assert!(q.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn codes_are_stateless_and_bounded() {
        let net = busy_net(2);
        let psi = vec![vec![5.0, -3.0, 2.0], vec![0.1, 0.2, 0.3], vec![5.0, -3.0, 2.0]];
        let om = [[0.4, 0.0, 0.0], [0.0; 3], [0.4, 0.0, 0.0]];
        let q = encode(&net, &psi, &om).unwrap();
        assert_eq!(q.row(0), q.row(2));
        assert!(q.iter().all(|x| x.abs() < 1.0));
        let mut psi2 = psi.clone();
        psi2[1] = vec![-1.0, 0.0, 1.0];
        let q2 = encode(&net, &psi2, &om).unwrap();
        assert_eq!(q.row(0), q2.row(0));
        assert!(encode(&net, &psi, &om[..2]).is_err());
        assert!(encode(&net, &[vec![0.0; 2]], &[[0.0; 3]]).is_err());
    }

    #[test]
    fn offsets_respect_mask_and_weight_sharing() {
        let net = busy_net(3);
        let mut id = identity(4, 12);
        id.positions[5] = id.positions[4];
        id.normals[5] = id.normals[4];
        let q = Array1::from(vec![0.2, -0.4, 0.9, 0.0]);
        let d = predict_offsets(&net, &id, q.view()).unwrap();
        for (dv, &m) in d.iter().zip(&id.mask) {
            if !m {
                assert_eq!(*dv, Vec3::zeros());
            } else {
                assert!(dv.norm() > 0.0);
            }
        }
        assert_eq!(d[4], d[5]);
        assert!(predict_offsets(&net, &id, Array1::zeros(3).view()).is_err());
    }

    #[test]
    fn fresh_net_is_degenerate() {
        let net = TransferNet::new(6, &NetArch::default(), 0).unwrap();
        assert!(net.is_degenerate());
        assert_eq!(net.encoder.sizes(), vec![9, 128, 128, 64]);
        assert_eq!(net.geo.sizes(), vec![70, 128, 128, 128, 3]);
        let d = predict_offsets(&net, &identity(1, 9), Array1::zeros(64).view()).unwrap();
        assert!(d.iter().all(|v| *v == Vec3::zeros()));
        assert!(!busy_net(1).is_degenerate());
    }

    #[test]
    fn permuting_vertices_permutes_offsets() {
        let net = busy_net(5);
        let id = identity(6, 10);
        let perm = [3, 7, 0, 9, 1, 4, 8, 2, 6, 5];
        let pid = NeutralIdentity::new(
            perm.iter().map(|&v| id.positions[v]).collect(),
            perm.iter().map(|&v| id.normals[v]).collect(),
            perm.iter().map(|&v| id.mask[v]).collect(),
        )
        .unwrap();
        let q = Array1::from(vec![0.1, 0.5, -0.3, 0.7]);
        let a = predict_offsets(&net, &id, q.view()).unwrap();
        let b = predict_offsets(&net, &pid, q.view()).unwrap();
        for (k, &v) in perm.iter().enumerate() {
            assert_eq!(b[k], a[v]);
        }
    }

    #[test]
    fn hhm_round_trip_is_exact_after_quantization() {
        let mut net = busy_net(7).quantized();
        net.pos_center = [0.01, -0.02, 0.5];
        net.pos_scale = 0.123;
        let mut buf = Vec::new();
        net.to_hhm().write_to(&mut buf).unwrap();
        let back = TransferNet::from_hhm(&HhmFile::read_from(buf.as_slice()).unwrap()).unwrap();
        assert_eq!(back, net);
    }
}
