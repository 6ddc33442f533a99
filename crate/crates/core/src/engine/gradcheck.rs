//! Central finite-difference checks of the pipeline gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::pipeline::{evaluate, forward_frame, FitProblem, Gradients, Params};
use crate::error::{Error, Result};
use crate::raster::RenderBuffers;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    Psi,
    Omega,
    StaticField,
    DynamicField,
}

impl Block {
    pub const ALL: [Block; 4] = [Block::Psi, Block::Omega, Block::StaticField, Block::DynamicField];

    pub fn name(self) -> &'static str {
        match self {
            Block::Psi => "psi",
            Block::Omega => "omega",
            Block::StaticField => "static_field",
            Block::DynamicField => "dynamic_field",
        }
    }

    pub fn parse(s: &str) -> Result<Vec<Block>> {
        if s == "all" {
            return Ok(Block::ALL.to_vec());
        }
        s.split(',')
            .map(|t| {
                Block::ALL
                    .into_iter()
                    .find(|b| b.name() == t.trim())
                    .ok_or_else(|| Error::invalid(format!("unknown parameter block `{t}`")))
            })
            .collect()
    }
}

/// One scalar coordinate of [`Params`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coord {
    Psi { frame: usize, k: usize },
    Omega { frame: usize, c: usize },
    StaticField { vertex: usize, c: usize },
    DynamicField { frame: usize, vertex: usize, c: usize },
}

impl Coord {
    pub fn block(&self) -> Block {
        match self {
            Coord::Psi { .. } => Block::Psi,
            Coord::Omega { .. } => Block::Omega,
            Coord::StaticField { .. } => Block::StaticField,
            Coord::DynamicField { .. } => Block::DynamicField,
        }
    }

    /// The only frame whose loss depends on this coordinate, if it is frame-local.
    pub fn frame(&self) -> Option<usize> {
        match *self {
            Coord::Psi { frame, .. } | Coord::Omega { frame, .. } | Coord::DynamicField { frame, .. } => Some(frame),
            Coord::StaticField { .. } => None,
        }
    }

    pub fn get(&self, p: &Params) -> f64 {
        match *self {
            Coord::Psi { frame, k } => p.psi[frame][k],
            Coord::Omega { frame, c } => p.omega[frame][c],
            Coord::StaticField { vertex, c } => p.fields.static_field[vertex][c],
            Coord::DynamicField { frame, vertex, c } => p.fields.dynamic(frame)[vertex][c],
        }
    }

    pub fn set(&self, p: &mut Params, value: f64) {
        match *self {
            Coord::Psi { frame, k } => p.psi[frame][k] = value,
            Coord::Omega { frame, c } => p.omega[frame][c] = value,
            Coord::StaticField { vertex, c } => p.fields.static_field[vertex][c] = value,
            Coord::DynamicField { frame, vertex, c } => p.fields.dynamic_mut_with(frame, |d| d[vertex][c] = value),
        }
    }

    pub fn grad(&self, g: &Gradients) -> f64 {
        match *self {
            Coord::Psi { frame, k } => g.psi[frame][k],
            Coord::Omega { frame, c } => g.omega[frame][c],
            Coord::StaticField { vertex, c } => g.static_field[vertex][c],
            Coord::DynamicField { frame, vertex, c } => g.dynamic[frame][vertex][c],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub h: f64,
    pub tolerance: f64,
    pub samples_per_block: usize,
    pub seed: u64,
    /// Lower bound of the relative-error denominator.
    pub abs_floor: f64,
    /// Denominator floor as a fraction of the block's largest analytic component.
    pub rel_floor: f64,
    /// Combine steps h and h/2 to cancel the second-order truncation term.
    pub richardson: bool,
    pub blocks: Vec<Block>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            h: 1e-5,
            tolerance: 1e-4,
            samples_per_block: 32,
            seed: 0,
            abs_floor: 1e-12,
            rel_floor: 1e-6,
            richardson: true,
            blocks: Block::ALL.to_vec(),
        }
    }
}

impl GradcheckConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1e-7..=1e-3).contains(&self.h) {
            return Err(Error::invalid(format!("probe step {} outside [1e-7, 1e-3]", self.h)));
        }
        if !(self.tolerance > 0.0) || !(self.abs_floor >= 0.0) || !(0.0..1.0).contains(&self.rel_floor) {
            return Err(Error::invalid("tolerance must be positive and the floor non-negative"));
        }
        if self.samples_per_block < 32 {
            return Err(Error::invalid("at least 32 coordinates per block are required"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordCheck {
    pub coord: Coord,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub block: Block,
    pub coords: usize,
    /// Largest analytic component over the whole block.
    pub scale: f64,
    pub max_rel_err: f64,
    pub worst: Option<CoordCheck>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub h: f64,
    pub tolerance: f64,
    pub blocks: Vec<BlockReport>,
    /// Pixels left out of the dense terms per frame.
    pub excluded_pixels: Vec<usize>,
    pub pass: bool,
}

/// `|a - f| / max(|a|, |f|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let d = (analytic - numeric).abs();
    if d == 0.0 {
        return 0.0;
    }
    d / analytic.abs().max(numeric.abs()).max(floor)
}

fn block_scale(g: &Gradients, block: Block) -> f64 {
    let amax = |it: &mut dyn Iterator<Item = f64>| it.fold(0.0f64, |m, x| m.max(x.abs()));
    match block {
        Block::Psi => amax(&mut g.psi.iter().flatten().copied()),
        Block::Omega => amax(&mut g.omega.iter().flat_map(|v| v.iter().copied())),
        Block::StaticField => amax(&mut g.static_field.iter().flat_map(|v| v.iter().copied())),
        Block::DynamicField => amax(&mut g.dynamic.iter().flatten().flat_map(|v| v.iter().copied())),
    }
}

/// Checks `grad` against central differences of `f` at `x` on all coordinates.
pub fn check_function(f: impl Fn(&[f64]) -> f64, grad: &[f64], x: &[f64], h: f64, floor: f64) -> f64 {
    let mut worst = 0.0f64;
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        worst = worst.max(relative_error(grad[i], (fp - fm) / (2.0 * h), floor));
    }
    worst
}

fn sample_coords(problem: &FitProblem, params: &Params, block: Block, n: usize, touched: &[usize], rng: &mut ChaCha8Rng) -> Vec<Coord> {
    let frames = problem.frames();
    let k = problem.rig.k_psi();
    let mask = problem.rig.facial_mask();
    let flat = |total: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
        if total <= n {
            (0..total).collect()
        } else {
            let mut v = sample(rng, total, n).into_vec();
            v.sort_unstable();
            v
        }
    };
    match block {
        Block::Psi => flat(frames * k, rng).into_iter().map(|i| Coord::Psi { frame: i / k, k: i % k }).collect(),
        Block::Omega => flat(frames * 3, rng).into_iter().map(|i| Coord::Omega { frame: i / 3, c: i % 3 }).collect(),
        Block::StaticField | Block::DynamicField => {
            let pool: Vec<usize> = (0..params.fields.n_dense())
                .filter(|&v| block == Block::StaticField || mask[v])
                .collect();
            let touched_pool: Vec<usize> = touched
                .iter()
                .copied()
                .filter(|&v| block == Block::StaticField || mask[v])
                .collect();
            if pool.is_empty() {
                return Vec::new();
            }
            // half from vertices that reach the image, half anywhere
            let mut out = Vec::with_capacity(n);
            for s in 0..n {
                let from = if s % 2 == 0 && !touched_pool.is_empty() { &touched_pool } else { &pool };
                let vertex = from[rng.random_range(0..from.len())];
                let c = rng.random_range(0..3);
                out.push(match block {
                    Block::StaticField => Coord::StaticField { vertex, c },
                    _ => Coord::DynamicField { frame: rng.random_range(0..frames), vertex, c },
                });
            }
            out
        }
    }
}

/// Pixels whose dense-loss contribution is not differentiable between two renders:
/// coverage or winning face changes, or a residual changes sign.
#[allow(clippy::needless_range_loop)]
fn flip_pixels(a: &RenderBuffers, b: &RenderBuffers, problem: &FitProblem, frame: usize, out: &mut [bool]) {
    let t = &problem.targets[frame];
    let sign = |x: f64| if x > 0.0 { 1 } else if x < 0.0 { -1 } else { 0 };
    for p in 0..a.len() {
        if a.coverage[p] != b.coverage[p] || a.face_id[p] != b.face_id[p] {
            out[p] = true;
            continue;
        }
        if !a.coverage[p] {
            continue;
        }
        if t.normal_valid[p] && (0..3).any(|c| sign(a.normal[p][c] - t.normal[p][c]) != sign(b.normal[p][c] - t.normal[p][c])) {
            out[p] = true;
        }
        if t.depth_valid[p] && sign(a.depth[p] - t.depth[p]) != sign(b.depth[p] - t.depth[p]) {
            out[p] = true;
        }
    }
}

/// Checks the full objective gradient block by block on a seeded coordinate sample.
pub fn gradcheck(problem: &FitProblem, params: &Params, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    cfg.validate()?;
    problem.validate()?;
    let frames = problem.frames();
    let h = cfg.h;
    let base: Vec<RenderBuffers> = (0..frames)
        .map(|i| forward_frame(problem, params, i).map(|f| f.buffers))
        .collect::<Result<_>>()?;

    let mut touched = vec![false; params.fields.n_dense()];
    for b in &base {
        for &f in b.face_id.iter().filter(|&&f| f >= 0) {
            for &v in &problem.rig.topo.faces[f as usize] {
                touched[v] = true;
            }
        }
    }
    let touched: Vec<usize> = (0..touched.len()).filter(|&v| touched[v]).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let coords: Vec<(Block, Vec<Coord>)> = cfg
        .blocks
        .iter()
        .map(|&b| (b, sample_coords(problem, params, b, cfg.samples_per_block, &touched, &mut rng)))
        .collect();

    // exclusion: union over every probe
    let dense_on = problem.weights.lambda_normal != 0.0 || problem.weights.lambda_depth != 0.0;
    let n_pix = problem.camera.width * problem.camera.height;
    let mut exclude = vec![vec![false; n_pix]; frames];
    if dense_on {
        let mut probe = params.clone();
        for coord in coords.iter().flat_map(|(_, c)| c) {
            let x0 = coord.get(params);
            let steps: &[f64] = if cfg.richardson { &[h, -h, 0.5 * h, -0.5 * h] } else { &[h, -h] };
            for x in steps.iter().map(|s| x0 + s) {
                coord.set(&mut probe, x);
                let affected: Vec<usize> = coord.frame().map_or_else(|| (0..frames).collect(), |f| vec![f]);
                for i in affected {
                    let b = forward_frame(problem, &probe, i)?.buffers;
                    flip_pixels(&base[i], &b, problem, i, &mut exclude[i]);
                }
            }
            coord.set(&mut probe, x0);
        }
    }

    let analytic = evaluate(problem, params, Some(&exclude))?;
    let mut probe = params.clone();
    let mut central = |coord: &Coord, step: f64| -> Result<f64> {
        let x0 = coord.get(params);
        coord.set(&mut probe, x0 + step);
        let fp = evaluate(problem, &probe, Some(&exclude))?.breakdown.total;
        coord.set(&mut probe, x0 - step);
        let fm = evaluate(problem, &probe, Some(&exclude))?.breakdown.total;
        coord.set(&mut probe, x0);
        Ok((fp - fm) / (2.0 * step))
    };
    let mut blocks = Vec::new();
    for (block, cs) in &coords {
        let scale = block_scale(&analytic.grads, *block);
        let floor = cfg.abs_floor.max(cfg.rel_floor * scale);
        let mut worst: Option<CoordCheck> = None;
        for coord in cs {
            let d1 = central(coord, h)?;
            let numeric = if cfg.richardson { (4.0 * central(coord, 0.5 * h)? - d1) / 3.0 } else { d1 };
            let a = coord.grad(&analytic.grads);
            let rel_err = relative_error(a, numeric, floor);
            if worst.as_ref().is_none_or(|w| rel_err > w.rel_err) {
                worst = Some(CoordCheck { coord: *coord, analytic: a, numeric, rel_err });
            }
        }
        let max_rel_err = worst.as_ref().map_or(0.0, |w| w.rel_err);
        blocks.push(BlockReport {
            block: *block,
            coords: cs.len(),
            scale,
            max_rel_err,
            worst,
            pass: max_rel_err < cfg.tolerance,
        });
    }
    Ok(GradcheckReport {
        h,
        tolerance: cfg.tolerance,
        pass: blocks.iter().all(|b| b.pass),
        blocks,
        excluded_pixels: exclude.iter().map(|e| e.iter().filter(|&&x| x).count()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_matches() {
        let f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let x = [1.0, 1.0];
        let err = check_function(f, &[2.0, 2.0], &x, 1e-5, 1e-12);
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn detects_wrong_gradient() {
        let f = |x: &[f64]| x[0].sin();
        let err = check_function(f, &[0.5], &[0.3], 1e-5, 1e-12);
        assert!(err > 0.1);
    }

    #[test]
    fn relative_error_floor() {
        assert!((relative_error(1e-12, 0.0, 1e-8) - 1e-4).abs() < 1e-18);
        assert_eq!(relative_error(2.0, 2.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1, 0.0) - 0.1 / 1.1).abs() < 1e-15);
    }

    #[test]
    fn block_parse() {
        assert_eq!(Block::parse("all").unwrap().len(), 4);
        assert_eq!(Block::parse("psi,omega").unwrap(), vec![Block::Psi, Block::Omega]);
        assert!(Block::parse("beta").is_err());
    }

    #[test]
    fn config_bounds() {
        assert!(GradcheckConfig { h: 1e-2, ..Default::default() }.validate().is_err());
        assert!(GradcheckConfig { samples_per_block: 8, ..Default::default() }.validate().is_err());
        assert!(GradcheckConfig::default().validate().is_ok());
    }
}
