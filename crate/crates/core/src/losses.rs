//! Training objectives: supervised CE, thresholded weak-to-strong consistency,
//! its multi-scale variant, masked local consistency, the reconstruction
//! alternative, OHEM, and the weighted totals.
//!
//! Unlabeled terms normalize per image by that image's supervised-pixel
//! count and then average over the batch. An image with no supervised pixels
//! contributes exactly 0 and no gradient.

use std::fmt;
use std::str::FromStr;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::kernels;
use crate::masking::{apply_masks, PatchMask};
use crate::params::BoundParams;
use crate::pseudo_label::{scaled_extent, PseudoLabel, ScaleSet};
use crate::segnet::{self, ModelConfig, SegOutput};
use crate::tensor::Tensor;

/// Student network bound into a graph.
#[derive(Debug, Clone, Copy)]
pub struct Student<'a> {
    pub params: &'a BoundParams,
    pub config: &'a ModelConfig,
}

impl Student<'_> {
    pub fn forward(&self, g: &mut Graph, images: &Tensor) -> Result<SegOutput> {
        let x = g.constant(images.clone());
        segnet::forward(g, self.params, self.config, x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Unlabeled weight of the baseline objective.
    pub lambda: f64,
    /// Multi-scale weak-to-strong weight.
    pub lambda1: f64,
    /// Masked-consistency weight.
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 1.0,
            lambda1: 1.0,
            lambda2: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda", self.lambda),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}

/// Which pixels the masked-consistency term supervises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LcrRegion {
    /// Every confident pixel, masked or not.
    #[default]
    All,
    /// Confident pixels inside kept patches only.
    UnmaskedOnly,
}

impl fmt::Display for LcrRegion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LcrRegion::All => "all",
            LcrRegion::UnmaskedOnly => "unmasked_only",
        })
    }
}

impl FromStr for LcrRegion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(LcrRegion::All),
            "unmasked_only" => Ok(LcrRegion::UnmaskedOnly),
            _ => Err(Error::Config(format!(
                "unknown lcr region `{s}` (expected all or unmasked_only)"
            ))),
        }
    }
}

fn targets_of(g: &Graph, logits: Var, targets: &[usize]) -> Result<()> {
    let [n, _, h, w] = g.value(logits).dims4()?;
    if targets.len() != n * h * w {
        return Err(Error::Shape(format!(
            "{} targets for logits {:?}",
            targets.len(),
            g.value(logits).shape()
        )));
    }
    Ok(())
}

/// Mean per-pixel cross-entropy over the whole batch.
pub fn mean_ce(g: &mut Graph, logits: Var, targets: &[usize]) -> Result<Var> {
    targets_of(g, logits, targets)?;
    if targets.is_empty() {
        return Err(Error::Invalid("cross-entropy over an empty batch".into()));
    }
    let ce = g.ce_pixel(logits, targets)?;
    let w = 1.0 / targets.len() as f64;
    g.weighted_sum(ce, vec![w; targets.len()])
}

/// Supervised loss on weakly augmented labeled images.
pub fn supervised_loss(
    g: &mut Graph,
    student: &Student<'_>,
    images: &Tensor,
    labels: &[usize],
) -> Result<Var> {
    if images.shape().first().copied().unwrap_or(0) == 0 {
        return Err(Error::Invalid("supervised loss on an empty batch".into()));
    }
    let out = student.forward(g, images)?;
    mean_ce(g, out.logits, labels)
}

/// Per-pixel weights implementing per-image normalization over `mask`.
fn per_image_weights(batch: usize, plane: usize, mask: &[bool]) -> Vec<f64> {
    let mut weights = vec![0.0; batch * plane];
    for b in 0..batch {
        let m = &mask[b * plane..(b + 1) * plane];
        let count = m.iter().filter(|&&v| v).count();
        if count == 0 {
            continue;
        }
        let w = 1.0 / (count as f64 * batch as f64);
        for (dst, &keep) in weights[b * plane..(b + 1) * plane].iter_mut().zip(m) {
            if keep {
                *dst = w;
            }
        }
    }
    weights
}

fn check_pseudo(g: &Graph, logits: Var, pseudo: &PseudoLabel) -> Result<[usize; 4]> {
    let dims = g.value(logits).dims4()?;
    let [n, _, h, w] = dims;
    if (pseudo.batch, pseudo.height, pseudo.width) != (n, h, w) {
        return Err(Error::Shape(format!(
            "pseudo-label {}x{}x{} vs logits {:?}",
            pseudo.batch,
            pseudo.height,
            pseudo.width,
            g.value(logits).shape()
        )));
    }
    Ok(dims)
}

/// Cross-entropy against pseudo-label classes over `select`ed pixels.
fn selected_ce(g: &mut Graph, logits: Var, pseudo: &PseudoLabel, select: &[bool]) -> Result<Var> {
    let [n, _, h, w] = check_pseudo(g, logits, pseudo)?;
    let ce = g.ce_pixel(logits, &pseudo.classes)?;
    g.weighted_sum(ce, per_image_weights(n, h * w, select))
}

/// Confidence-masked cross-entropy.
pub fn masked_ce(g: &mut Graph, logits: Var, pseudo: &PseudoLabel) -> Result<Var> {
    selected_ce(g, logits, pseudo, &pseudo.valid)
}

/// Multi-scale consistency from student logits already resized to the
/// pseudo-label resolution, one per scale. All scales share the per-image
/// valid count, so this is the average of the per-scale masked CE terms.
pub fn msws_from_logits(g: &mut Graph, scale_logits: &[Var], pseudo: &PseudoLabel) -> Result<Var> {
    if scale_logits.is_empty() {
        return Err(Error::Invalid("multi-scale loss needs at least one scale".into()));
    }
    let mut total: Option<Var> = None;
    for &logits in scale_logits {
        let term = masked_ce(g, logits, pseudo)?;
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    Ok(g.scale(total.expect("non-empty"), 1.0 / scale_logits.len() as f64))
}

/// Student logits for `images` rescaled by `scale`, resized back to the input size.
pub fn scaled_logits(
    g: &mut Graph,
    student: &Student<'_>,
    images: &Tensor,
    scale: f64,
) -> Result<Var> {
    let [n, c, h, w] = images.dims4()?;
    let m = student.config.stride_multiple();
    let (sh, sw) = (scaled_extent(h, scale, m), scaled_extent(w, scale, m));
    let input = if (sh, sw) == (h, w) {
        images.clone()
    } else {
        Tensor::new(
            vec![n, c, sh, sw],
            kernels::bilinear_forward([n, c, h, w], images.data(), sh, sw),
        )?
    };
    let out = student.forward(g, &input)?;
    if (sh, sw) == (h, w) {
        Ok(out.logits)
    } else {
        g.bilinear_resize(out.logits, h, w)
    }
}

/// Multi-scale weak-to-strong consistency on strong images.
pub fn msws_loss(
    g: &mut Graph,
    student: &Student<'_>,
    strong_images: &Tensor,
    pseudo: &PseudoLabel,
    scales: &ScaleSet,
) -> Result<Var> {
    scales.validate()?;
    let logits = scales
        .scales()
        .iter()
        .map(|&s| scaled_logits(g, student, strong_images, s))
        .collect::<Result<Vec<_>>>()?;
    msws_from_logits(g, &logits, pseudo)
}

/// Pixels supervised by the masked-consistency term.
pub fn lcr_selection(pseudo: &PseudoLabel, masks: &[PatchMask], region: LcrRegion) -> Result<Vec<bool>> {
    let plane = pseudo.height * pseudo.width;
    if masks.len() != pseudo.batch {
        return Err(Error::Shape(format!(
            "{} masks for a batch of {}",
            masks.len(),
            pseudo.batch
        )));
    }
    Ok(match region {
        LcrRegion::All => pseudo.valid.clone(),
        LcrRegion::UnmaskedOnly => pseudo
            .valid
            .iter()
            .enumerate()
            .map(|(i, &v)| v && masks[i / plane].data[i % plane] == 1)
            .collect(),
    })
}

/// Masked-consistency loss from logits predicted on masked images.
pub fn lcr_from_logits(
    g: &mut Graph,
    logits: Var,
    pseudo: &PseudoLabel,
    masks: &[PatchMask],
    region: LcrRegion,
) -> Result<Var> {
    let select = lcr_selection(pseudo, masks, region)?;
    selected_ce(g, logits, pseudo, &select)
}

/// Student predicts the full label map from masked weak images, supervised by
/// pseudo-labels of the complete images.
pub fn lcr_loss(
    g: &mut Graph,
    student: &Student<'_>,
    weak_images: &Tensor,
    masks: &[PatchMask],
    pseudo: &PseudoLabel,
    region: LcrRegion,
) -> Result<Var> {
    let masked = apply_masks(weak_images, masks)?;
    let out = student.forward(g, &masked)?;
    lcr_from_logits(g, out.logits, pseudo, masks, region)
}

/// Mean squared error between the reconstruction branch on masked images and
/// the unmasked weak images, over all pixels.
pub fn reconstruction_loss(
    g: &mut Graph,
    student: &Student<'_>,
    weak_images: &Tensor,
    masks: &[PatchMask],
) -> Result<Var> {
    if !student.config.recon_head {
        return Err(Error::Config(
            "reconstruction loss requires a model with the reconstruction head".into(),
        ));
    }
    let masked = apply_masks(weak_images, masks)?;
    let out = student.forward(g, &masked)?;
    g.mse(out.recon.expect("recon_head set"), weak_images)
}

/// Mean of the `max(min_kept, floor(keep_ratio * count))` largest per-pixel losses.
pub fn ohem_ce(
    g: &mut Graph,
    logits: Var,
    targets: &[usize],
    keep_ratio: f64,
    min_kept: usize,
) -> Result<Var> {
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(Error::Config(format!(
            "ohem keep_ratio {keep_ratio} outside (0, 1]"
        )));
    }
    targets_of(g, logits, targets)?;
    let ce = g.ce_pixel(logits, targets)?;
    let count = targets.len();
    if count == 0 {
        return Err(Error::Invalid("cross-entropy over an empty batch".into()));
    }
    let kept = ((keep_ratio * count as f64).floor() as usize)
        .max(min_kept)
        .clamp(1, count);
    let losses = g.value(ce).data();
    let mut order: Vec<usize> = (0..count).collect();
    order.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]).then(a.cmp(&b)));
    let mut weights = vec![0.0; count];
    let w = 1.0 / kept as f64;
    for &i in &order[..kept] {
        weights[i] = w;
    }
    g.weighted_sum(ce, weights)
}

/// Which weighted combination [`total_loss`] forms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// `L_labeled + lambda * L_unlabeled`.
    Baseline,
    /// `L_labeled + lambda1 * L_msws + lambda2 * L_lcr`.
    MaskMatch,
}

/// Loss terms of one iteration; absent terms count as zero.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub labeled: Var,
    pub unlabeled: Option<Var>,
    pub lcr: Option<Var>,
}

/// Weighted total. Terms with weight exactly zero are left out of the graph.
pub fn total_loss(
    g: &mut Graph,
    weights: &LossWeights,
    objective: Objective,
    parts: &LossParts,
) -> Result<Var> {
    let (w_unlabeled, w_lcr) = match objective {
        Objective::Baseline => (weights.lambda, 0.0),
        Objective::MaskMatch => (weights.lambda1, weights.lambda2),
    };
    let mut total = parts.labeled;
    for (term, w) in [(parts.unlabeled, w_unlabeled), (parts.lcr, w_lcr)] {
        if let Some(t) = term {
            if w != 0.0 {
                let scaled = g.scale(t, w);
                total = g.add(total, scaled)?;
            }
        }
    }
    Ok(total)
}
