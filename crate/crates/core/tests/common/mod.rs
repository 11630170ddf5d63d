#![allow(dead_code)]

pub mod grad_cases;

use std::path::Path;

use maskmatch::autograd::{Graph, Var};
use maskmatch::dataset::{generate_dataset, GenerateParams};
use maskmatch::{Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-3;
pub const FD_TOL: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Worst relative error between analytic and central-difference gradients of
/// the scalar built by `f` over every input. Relative error per input is
/// `|a - n| / max(|a|, |n|)` in the Euclidean norm, or the absolute norm when
/// both gradients are tiny.
pub fn fd_check<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    fd_check_with(inputs, FD_EPS, f)
}

pub fn fd_check_with<F>(inputs: &[Tensor], eps: f64, f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars).expect("forward");
        g.value(out).item().expect("scalar loss")
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars).expect("forward");
    g.backward(out).expect("backward");

    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = g
            .grad(vars[k])
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let mut numeric = vec![0.0; input.numel()];
        let mut work: Vec<Tensor> = inputs.to_vec();
        for i in 0..input.numel() {
            let orig = input.data()[i];
            work[k].data_mut()[i] = orig + eps;
            let plus = eval(&work);
            work[k].data_mut()[i] = orig - eps;
            let minus = eval(&work);
            work[k].data_mut()[i] = orig;
            numeric[i] = (plus - minus) / (2.0 * eps);
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, n)| a - n)
            .collect();
        let scale = norm(analytic.data()).max(norm(&numeric));
        let err = if scale < 1e-6 {
            norm(&diff)
        } else {
            norm(&diff) / scale
        };
        worst = worst.max(err);
    }
    worst
}

/// Values in `[lo, hi]` kept at least `gap` away from zero, so ReLU kinks sit
/// outside the finite-difference stencil.
pub fn away_from_zero(shape: &[usize], gap: f64, seed: u64) -> Tensor {
    let t = Tensor::uniform(shape, -1.0, 1.0, &mut rng(seed));
    t.map(|v| if v >= 0.0 { v + gap } else { v - gap })
}

pub fn small_dataset(root: &Path, seed: u64) -> GenerateParams {
    let params = GenerateParams {
        num_classes: 3,
        height: 32,
        width: 32,
        labeled: 4,
        unlabeled: 8,
        val: 4,
        seed,
    };
    generate_dataset(&params, root).expect("dataset");
    params
}

/// A configuration that trains in well under a second on [`small_dataset`].
pub fn tiny_config(data: &Path, out: &Path) -> maskmatch::config::TrainConfig {
    let mut c = maskmatch::config::TrainConfig::default();
    for (k, v) in [
        ("model.base_width", "4"),
        ("model.depth", "2"),
        ("aug.crop", "16"),
        ("mask.patch_size", "4"),
        ("train.batch_labeled", "2"),
        ("train.batch_unlabeled", "2"),
        ("train.max_iter", "4"),
        ("train.base_lr", "0.01"),
        ("eval.every", "2"),
    ] {
        c.set(k, v).unwrap();
    }
    c.data_dir = data.to_path_buf();
    c.out_dir = out.to_path_buf();
    c
}
