//! Teacher pseudo-labels: single-scale and multi-scale ensembles with
//! confidence thresholding.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kernels;
use crate::params::ParamSet;
use crate::segnet::{self, ModelConfig};
use crate::tensor::Tensor;

/// Anything that maps `[N,3,h,w]` images to `[N,C,h,w]` logits without
/// recording gradients.
pub trait Predictor {
    fn predict(&self, images: &Tensor) -> Result<Tensor>;

    /// Spatial extents passed to [`Predictor::predict`] must be multiples of this.
    fn size_multiple(&self) -> usize {
        1
    }
}

/// A network evaluated with fixed parameters.
#[derive(Debug, Clone, Copy)]
pub struct FrozenModel<'a> {
    pub params: &'a ParamSet,
    pub config: &'a ModelConfig,
}

impl Predictor for FrozenModel<'_> {
    fn predict(&self, images: &Tensor) -> Result<Tensor> {
        segnet::predict_logits(self.params, self.config, images)
    }

    fn size_multiple(&self) -> usize {
        self.config.stride_multiple()
    }
}

/// Ensemble scales `[1, sigma1, sigma2]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleSet {
    pub sigma1: f64,
    pub sigma2: f64,
}

impl Default for ScaleSet {
    fn default() -> Self {
        ScaleSet {
            sigma1: 0.7,
            sigma2: 1.5,
        }
    }
}

impl ScaleSet {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma1 > 0.0 && self.sigma1 < 1.0) {
            return Err(Error::Config(format!(
                "sigma1 must lie in (0, 1), got {}",
                self.sigma1
            )));
        }
        if !(self.sigma2 > 1.0 && self.sigma2.is_finite()) {
            return Err(Error::Config(format!(
                "sigma2 must exceed 1, got {}",
                self.sigma2
            )));
        }
        Ok(())
    }

    pub fn scales(&self) -> [f64; 3] {
        [1.0, self.sigma1, self.sigma2]
    }
}

/// Rounds `extent * scale` to the nearest positive multiple of `multiple`.
pub fn scaled_extent(extent: usize, scale: f64, multiple: usize) -> usize {
    let m = multiple.max(1);
    let units = (extent as f64 * scale / m as f64).round() as usize;
    units.max(1) * m
}

/// How per-scale teacher outputs are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Averaging {
    /// Softmax each scale, resize back, average, renormalize.
    #[default]
    Probabilities,
    /// Resize logits back, average, then softmax.
    Logits,
}

impl fmt::Display for Averaging {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Averaging::Probabilities => "prob",
            Averaging::Logits => "logit",
        })
    }
}

impl FromStr for Averaging {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prob" => Ok(Averaging::Probabilities),
            "logit" => Ok(Averaging::Logits),
            _ => Err(Error::Config(format!(
                "unknown averaging `{s}` (expected prob or logit)"
            ))),
        }
    }
}

/// Hard classes, confidences and validity for a batch, each `N*H*W` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub classes: Vec<usize>,
    pub confidence: Vec<f64>,
    /// Exactly `confidence > tau`.
    pub valid: Vec<bool>,
}

impl PseudoLabel {
    /// Per-pixel argmax and max of an `[N,C,H,W]` probability tensor.
    pub fn from_probs(probs: &Tensor, tau: f64) -> Result<Self> {
        let [n, c, h, w] = probs.dims4()?;
        let plane = h * w;
        let data = probs.data();
        let mut classes = Vec::with_capacity(n * plane);
        let mut confidence = Vec::with_capacity(n * plane);
        for b in 0..n {
            for p in 0..plane {
                let (mut best, mut best_p) = (0, f64::NEG_INFINITY);
                for ch in 0..c {
                    let v = data[(b * c + ch) * plane + p];
                    if v > best_p {
                        best = ch;
                        best_p = v;
                    }
                }
                classes.push(best);
                confidence.push(best_p);
            }
        }
        let valid = confidence.iter().map(|&p| p > tau).collect();
        Ok(PseudoLabel {
            batch: n,
            height: h,
            width: w,
            classes,
            confidence,
            valid,
        })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn valid_ratio(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.valid_count() as f64 / self.len() as f64
        }
    }

    /// Re-derives validity for a different threshold.
    pub fn with_threshold(&self, tau: f64) -> Self {
        PseudoLabel {
            valid: self.confidence.iter().map(|&p| p > tau).collect(),
            ..self.clone()
        }
    }

    pub fn sample(&self, index: usize) -> PseudoLabel {
        let plane = self.height * self.width;
        let r = index * plane..(index + 1) * plane;
        PseudoLabel {
            batch: 1,
            height: self.height,
            width: self.width,
            classes: self.classes[r.clone()].to_vec(),
            confidence: self.confidence[r.clone()].to_vec(),
            valid: self.valid[r].to_vec(),
        }
    }

    pub fn stack(parts: &[PseudoLabel]) -> Result<PseudoLabel> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("stack of zero pseudo-labels".into()))?;
        let mut out = PseudoLabel {
            batch: 0,
            height: first.height,
            width: first.width,
            classes: Vec::new(),
            confidence: Vec::new(),
            valid: Vec::new(),
        };
        for p in parts {
            if (p.height, p.width) != (first.height, first.width) {
                return Err(Error::Shape("pseudo-label extents differ".into()));
            }
            out.batch += p.batch;
            out.classes.extend_from_slice(&p.classes);
            out.confidence.extend_from_slice(&p.confidence);
            out.valid.extend_from_slice(&p.valid);
        }
        Ok(out)
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Config(format!("threshold tau {tau} outside [0, 1]")));
    }
    Ok(())
}

/// Pseudo-label from one teacher pass on the weak images.
pub fn single_scale_pseudo<P: Predictor + ?Sized>(
    teacher: &P,
    weak_images: &Tensor,
    tau: f64,
) -> Result<PseudoLabel> {
    check_tau(tau)?;
    let logits = teacher.predict(weak_images)?;
    let probs = Tensor::new(
        logits.shape().to_vec(),
        kernels::softmax_channels(logits.dims4()?, logits.data())?,
    )?;
    PseudoLabel::from_probs(&probs, tau)
}

/// Averaged class distribution over scales `[1, sigma1, sigma2]`, at input resolution.
pub fn multiscale_probs<P: Predictor + ?Sized>(
    teacher: &P,
    weak_images: &Tensor,
    scales: &ScaleSet,
    averaging: Averaging,
) -> Result<Tensor> {
    scales.validate()?;
    let [n, c, h, w] = weak_images.dims4()?;
    let m = teacher.size_multiple();
    let mut acc: Option<Vec<f64>> = None;
    let mut classes = 0;
    for scale in scales.scales() {
        let (sh, sw) = (scaled_extent(h, scale, m), scaled_extent(w, scale, m));
        let input = Tensor::new(
            vec![n, c, sh, sw],
            kernels::bilinear_forward([n, c, h, w], weak_images.data(), sh, sw),
        )?;
        let logits = teacher.predict(&input)?;
        let dims = logits.dims4()?;
        classes = dims[1];
        let per_scale = match averaging {
            Averaging::Probabilities => kernels::softmax_channels(dims, logits.data())?,
            Averaging::Logits => logits.into_data(),
        };
        let back = kernels::bilinear_forward(dims, &per_scale, h, w);
        match acc.as_mut() {
            None => acc = Some(back),
            Some(a) => a.iter_mut().zip(&back).for_each(|(x, y)| *x += y),
        }
    }
    let mut avg = acc.expect("three scales");
    let k = scales.scales().len() as f64;
    avg.iter_mut().for_each(|v| *v /= k);
    let dims = [n, classes, h, w];
    let probs = match averaging {
        Averaging::Logits => kernels::softmax_channels(dims, &avg)?,
        Averaging::Probabilities => {
            let plane = h * w;
            for b in 0..n {
                for p in 0..plane {
                    let total: f64 = (0..classes).map(|ch| avg[(b * classes + ch) * plane + p]).sum();
                    for ch in 0..classes {
                        avg[(b * classes + ch) * plane + p] /= total;
                    }
                }
            }
            avg
        }
    };
    Tensor::new(dims.to_vec(), probs)
}

/// Ensemble pseudo-label: argmax and max of the scale-averaged distribution.
pub fn multiscale_pseudo<P: Predictor + ?Sized>(
    teacher: &P,
    weak_images: &Tensor,
    scales: &ScaleSet,
    tau: f64,
    averaging: Averaging,
) -> Result<PseudoLabel> {
    check_tau(tau)?;
    let probs = multiscale_probs(teacher, weak_images, scales, averaging)?;
    PseudoLabel::from_probs(&probs, tau)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Returns the same per-pixel logits regardless of input size.
    struct Constant(Vec<f64>);

    impl Predictor for Constant {
        fn predict(&self, images: &Tensor) -> Result<Tensor> {
            let [n, _, h, w] = images.dims4()?;
            let c = self.0.len();
            let mut data = Vec::with_capacity(n * c * h * w);
            for _ in 0..n {
                for &l in &self.0 {
                    data.extend(std::iter::repeat(l).take(h * w));
                }
            }
            Tensor::new(vec![n, c, h, w], data)
        }
    }

    #[test]
    fn saturated_and_uncertain_pixels() {
        let img = Tensor::zeros(&[1, 3, 4, 4]);
        let p = single_scale_pseudo(&Constant(vec![10.0, -10.0]), &img, 0.9).unwrap();
        assert!(p.classes.iter().all(|&c| c == 0));
        assert!(p.confidence.iter().all(|&c| c > 0.999_999));
        assert!(p.valid.iter().all(|&v| v));

        let p = single_scale_pseudo(&Constant(vec![0.1, 0.0]), &img, 0.9).unwrap();
        let expected = 1.0 / (1.0 + (-0.1f64).exp());
        assert!((p.confidence[0] - expected).abs() < 1e-12);
        assert!((p.confidence[0] - 0.525).abs() < 1e-3);
        assert_eq!(p.valid_count(), 0);
        assert_eq!(p.with_threshold(0.0).valid_count(), 16);
    }

    #[test]
    fn scaled_extents_round_to_multiple() {
        assert_eq!(scaled_extent(32, 0.7, 8), 24);
        assert_eq!(scaled_extent(32, 1.5, 8), 48);
        assert_eq!(scaled_extent(64, 0.7, 8), 48);
        assert_eq!(scaled_extent(8, 0.1, 8), 8);
    }

    #[test]
    fn scale_set_validation() {
        assert!(ScaleSet { sigma1: 1.0, sigma2: 1.5 }.validate().is_err());
        assert!(ScaleSet { sigma1: 0.5, sigma2: 1.0 }.validate().is_err());
        assert!(ScaleSet::default().validate().is_ok());
    }

    #[test]
    fn tau_out_of_range() {
        let img = Tensor::zeros(&[1, 3, 4, 4]);
        assert!(single_scale_pseudo(&Constant(vec![0.0, 0.0]), &img, 1.5).is_err());
    }
}
