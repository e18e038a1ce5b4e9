//! Shared helpers for integration tests: finite-difference gradient oracle
//! and small deterministic fixtures.

#![allow(dead_code)]

use ciss::image::{Image, LabelMap};
use ciss::synthscenes::{gen_scene, Domain, Scene};
use ciss::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-5;

/// Uniform random tensor in [lo, hi).
pub fn random_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Reduce an arbitrary op output to a scalar via a fixed random projection:
/// sum(out ⊙ proj). Keeps gradients dense and direction-dependent.
pub fn project_to_scalar(tape: &Tape, out: Var, proj: &Tensor) -> Var {
    let p = tape.leaf(proj.clone(), false);
    let prod = tape.mul(out, p).unwrap();
    tape.sum(prod)
}

/// Max relative error between analytic and central-difference gradients of a
/// scalar-valued function of one tensor input.
///
/// `build` must record the full forward from the given leaf to a scalar root.
pub fn gradcheck(x0: &Tensor, build: &dyn Fn(&Tape, Var) -> Var) -> f64 {
    // analytic
    let tape = Tape::new();
    let x = tape.leaf(x0.clone(), true);
    let root = build(&tape, x);
    assert_eq!(tape.shape_of(root), vec![1], "gradcheck root must be scalar");
    tape.backward(root).unwrap();
    let analytic = tape.grad(x).expect("input must receive a gradient");

    // numeric central differences
    let eval = |t: &Tensor| -> f64 {
        let tape = Tape::new();
        let x = tape.leaf(t.clone(), false);
        let root = build(&tape, x);
        tape.value(root).item()
    };
    let mut worst = 0.0f64;
    for i in 0..x0.numel() {
        let mut plus = x0.clone();
        plus.data_mut()[i] += FD_EPS;
        let mut minus = x0.clone();
        minus.data_mut()[i] -= FD_EPS;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_EPS);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1.0);
        worst = worst.max(rel);
    }
    worst
}

/// Crop the top-left h×w region of an image (channel-major layout).
pub fn crop_image(img: &Image, h: usize, w: usize) -> Image {
    let mut out = Image::zeros(h, w);
    let hw_in = img.height * img.width;
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                out.data_mut()[(c * h + y) * w + x] = img.data()[c * hw_in + y * img.width + x];
            }
        }
    }
    out
}

pub fn crop_labels(lab: &LabelMap, h: usize, w: usize) -> LabelMap {
    let mut out = LabelMap::filled(h, w, 0);
    for y in 0..h {
        for x in 0..w {
            out.data_mut()[y * w + x] = lab.data()[y * lab.width + x];
        }
    }
    out
}

pub fn scene_pair(seed: u64) -> (Scene, Scene) {
    (
        gen_scene(seed, Domain::Source),
        gen_scene(seed + 1, Domain::Target),
    )
}
