#![allow(dead_code)]

use headfit::engine::{FitProblem, FitState, Params, Schedule};
use headfit::geom::Vec3;
use headfit::toolkit::synth::{generate, SynthConfig, SynthScene};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Small two-frame scene used by the gradient checks.
pub fn gradient_scene() -> SynthScene {
    generate(&SynthConfig { frames: 2, width: 64, height: 64, levels: 1, seed: 3, ..Default::default() }.noiseless()).unwrap()
}

pub fn random_vec3(rng: &mut ChaCha8Rng, r: f64) -> Vec3 {
    Vec3::new(rng.random_range(-r..r), rng.random_range(-r..r), rng.random_range(-r..r))
}

/// Standard initialization with small random offsets in both fields.
pub fn perturbed_params(problem: &FitProblem, seed: u64) -> Params {
    let mut st = FitState::init(problem, &Schedule::default(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = &mut st.params;
    for d in p.fields.static_field.iter_mut() {
        *d += random_vec3(&mut rng, 2e-4);
    }
    for i in 0..p.fields.frames() {
        let noise: Vec<Vec3> = (0..p.fields.n_dense()).map(|_| random_vec3(&mut rng, 2e-4)).collect();
        p.fields.dynamic_mut_with(i, |d| {
            for (x, e) in d.iter_mut().zip(&noise) {
                *x += e;
            }
        });
    }
    st.params
}
