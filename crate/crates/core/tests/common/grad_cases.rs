//! Finite-difference cases, one function per op family. Each returns the
//! worst relative error over its fixtures for one seed.

use maskmatch::autograd::{Graph, Var};
use maskmatch::losses::{self, LcrRegion, LossParts, LossWeights, Objective};
use maskmatch::masking::PatchMask;
use maskmatch::pseudo_label::PseudoLabel;
use maskmatch::segnet::{self, ModelConfig};
use maskmatch::{Result, Tensor};
use rand::Rng;

use super::{away_from_zero, fd_check, fd_check_with, rng};

/// Hidden ReLUs sit at arbitrary pre-activations, so the whole-network check
/// uses a smaller step to keep the stencil off their kinks.
pub const NETWORK_EPS: f64 = 1e-5;

pub type Case = fn(u64) -> f64;

pub const CASES: [(&str, Case); 10] = [
    ("conv2d", conv2d),
    ("elementwise", elementwise),
    ("bilinear", bilinear),
    ("cross-entropy", cross_entropy),
    ("multi-scale consistency", multiscale),
    ("masked consistency", lcr),
    ("ohem", ohem),
    ("reconstruction", reconstruction),
    ("total loss", total),
    ("network", network),
];

/// Reduces a tensor-valued op to a scalar with fixed random weights.
fn project(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let n = g.value(x).numel();
    let mut r = rng(seed ^ 0xABCD);
    let w: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
    g.weighted_sum(x, w)
}

pub fn random_pseudo(n: usize, h: usize, w: usize, classes: usize, seed: u64) -> PseudoLabel {
    let mut r = rng(seed ^ 0x5EED);
    let len = n * h * w;
    let classes: Vec<usize> = (0..len).map(|_| r.gen_range(0..classes)).collect();
    let mut valid: Vec<bool> = (0..len).map(|_| r.gen_bool(0.6)).collect();
    valid[0] = true;
    PseudoLabel {
        batch: n,
        height: h,
        width: w,
        confidence: valid.iter().map(|&v| if v { 0.95 } else { 0.5 }).collect(),
        classes,
        valid,
    }
}

pub fn conv2d(seed: u64) -> f64 {
    let x = Tensor::uniform(&[2, 2, 4, 4], -1.0, 1.0, &mut rng(seed));
    let w = Tensor::uniform(&[3, 2, 3, 3], -0.5, 0.5, &mut rng(seed + 100));
    let b = Tensor::uniform(&[3], -0.5, 0.5, &mut rng(seed + 200));
    let mut worst: f64 = 0.0;
    for (stride, pad) in [(1, 1), (2, 1)] {
        worst = worst.max(fd_check(&[x.clone(), w.clone(), b.clone()], |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], stride, pad)?;
            project(g, y, seed)
        }));
    }
    let w1 = Tensor::uniform(&[2, 2, 1, 1], -0.5, 0.5, &mut rng(seed + 300));
    worst.max(fd_check(&[x, w1, Tensor::zeros(&[2])], |g, v| {
        let y = g.conv2d(v[0], v[1], v[2], 1, 0)?;
        project(g, y, seed)
    }))
}

pub fn elementwise(seed: u64) -> f64 {
    let x = away_from_zero(&[2, 2, 4, 4], 0.01, seed);
    let y = Tensor::uniform(&[2, 2, 4, 4], -1.0, 1.0, &mut rng(seed + 50));
    [
        fd_check(&[x.clone()], |g, v| {
            let r = g.relu(v[0]);
            project(g, r, seed)
        }),
        fd_check(&[x.clone(), y.clone()], |g, v| {
            let s = g.scale(v[1], -0.7);
            let a = g.add(v[0], s)?;
            project(g, a, seed)
        }),
        fd_check(&[x.clone()], |g, v| Ok(g.sum(v[0]))),
        fd_check(&[x.clone()], |g, v| Ok(g.mean(v[0]))),
        fd_check(&[x.clone(), y], |g, v| {
            let c = g.concat_channels(&[v[0], v[1]])?;
            project(g, c, seed)
        }),
        fd_check(&[x], |g, v| {
            let s = g.softmax_channels(v[0])?;
            project(g, s, seed)
        }),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

pub fn bilinear(seed: u64) -> f64 {
    let x = Tensor::uniform(&[2, 2, 4, 4], -1.0, 1.0, &mut rng(seed));
    [(7, 6), (3, 2), (4, 4), (8, 8)]
        .into_iter()
        .map(|(h, w)| {
            fd_check(&[x.clone()], |g, v| {
                let r = g.bilinear_resize(v[0], h, w)?;
                project(g, r, seed)
            })
        })
        .fold(0.0, f64::max)
}

pub fn cross_entropy(seed: u64) -> f64 {
    let logits = Tensor::uniform(&[2, 2, 4, 4], -2.0, 2.0, &mut rng(seed));
    let p = random_pseudo(2, 4, 4, 2, seed);
    let a = fd_check(&[logits.clone()], |g, v| losses::mean_ce(g, v[0], &p.classes));
    let b = fd_check(&[logits], |g, v| losses::masked_ce(g, v[0], &p));
    a.max(b)
}

pub fn multiscale(seed: u64) -> f64 {
    let s1 = Tensor::uniform(&[2, 2, 4, 4], -2.0, 2.0, &mut rng(seed));
    let s07 = Tensor::uniform(&[2, 2, 3, 3], -2.0, 2.0, &mut rng(seed + 1));
    let s15 = Tensor::uniform(&[2, 2, 6, 6], -2.0, 2.0, &mut rng(seed + 2));
    let p = random_pseudo(2, 4, 4, 2, seed);
    fd_check(&[s1, s07, s15], |g, v| {
        let a = g.bilinear_resize(v[1], 4, 4)?;
        let b = g.bilinear_resize(v[2], 4, 4)?;
        losses::msws_from_logits(g, &[v[0], a, b], &p)
    })
}

pub fn lcr(seed: u64) -> f64 {
    let logits = Tensor::uniform(&[2, 2, 4, 4], -2.0, 2.0, &mut rng(seed));
    let p = random_pseudo(2, 4, 4, 2, seed);
    let masks = vec![
        PatchMask::from_patches(4, 4, 2, &[true, false, false, true]),
        PatchMask::from_patches(4, 4, 2, &[false, true, true, true]),
    ];
    [LcrRegion::All, LcrRegion::UnmaskedOnly]
        .into_iter()
        .map(|region| {
            fd_check(&[logits.clone()], |g, v| {
                losses::lcr_from_logits(g, v[0], &p, &masks, region)
            })
        })
        .fold(0.0, f64::max)
}

pub fn ohem(seed: u64) -> f64 {
    let logits = Tensor::uniform(&[2, 2, 4, 4], -2.0, 2.0, &mut rng(seed));
    let p = random_pseudo(2, 4, 4, 2, seed);
    fd_check(&[logits], |g, v| losses::ohem_ce(g, v[0], &p.classes, 0.5, 4))
}

pub fn reconstruction(seed: u64) -> f64 {
    let recon = Tensor::uniform(&[2, 3, 4, 4], 0.0, 1.0, &mut rng(seed));
    let target = Tensor::uniform(&[2, 3, 4, 4], 0.0, 1.0, &mut rng(seed + 9));
    fd_check(&[recon], |g, v| g.mse(v[0], &target))
}

pub fn total(seed: u64) -> f64 {
    let a = Tensor::uniform(&[1, 2, 4, 4], -2.0, 2.0, &mut rng(seed));
    let b = Tensor::uniform(&[1, 2, 4, 4], -2.0, 2.0, &mut rng(seed + 1));
    let c = Tensor::uniform(&[1, 2, 4, 4], -2.0, 2.0, &mut rng(seed + 2));
    let p = random_pseudo(1, 4, 4, 2, seed);
    let weights = LossWeights {
        lambda: 0.6,
        lambda1: 0.8,
        lambda2: 1.3,
    };
    [Objective::Baseline, Objective::MaskMatch]
        .into_iter()
        .map(|objective| {
            fd_check(&[a.clone(), b.clone(), c.clone()], |g, v| {
                let parts = LossParts {
                    labeled: losses::mean_ce(g, v[0], &p.classes)?,
                    unlabeled: Some(losses::masked_ce(g, v[1], &p)?),
                    lcr: Some(losses::masked_ce(g, v[2], &p)?),
                };
                losses::total_loss(g, &weights, objective, &parts)
            })
        })
        .fold(0.0, f64::max)
}

pub fn network(seed: u64) -> f64 {
    let config = ModelConfig {
        in_channels: 3,
        num_classes: 2,
        base_width: 2,
        depth: 1,
        seed,
        recon_head: true,
    };
    let params = segnet::init_model(&config).expect("valid config");
    let image = away_from_zero(&[1, 3, 4, 4], 0.05, seed).map(|v| 0.5 + 0.4 * v);
    let p = random_pseudo(1, 4, 4, 2, seed);
    let target = Tensor::full(&[1, 3, 4, 4], 0.5);
    fd_check_with(&[image], NETWORK_EPS, |g, v| {
        let bound = params.bind(g, false);
        let out = segnet::forward(g, &bound, &config, v[0])?;
        let ce = losses::masked_ce(g, out.logits, &p)?;
        let rec = g.mse(out.recon.expect("head"), &target)?;
        g.add(ce, rec)
    })
}
