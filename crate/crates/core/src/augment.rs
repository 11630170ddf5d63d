//! Weak (spatial) and strong (photometric) augmentation, and CutMix over
//! images together with their pseudo-labels.

use rand::Rng;

use crate::dataset::{LabelMap, SegSample};
use crate::error::{Error, Result};
use crate::kernels;
use crate::pseudo_label::PseudoLabel;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugConfig {
    /// Side of the square training crop.
    pub crop_size: usize,
    pub scale_min: f64,
    pub scale_max: f64,
    pub flip_prob: f64,
    pub jitter_prob: f64,
    /// Brightness, contrast and saturation factors are drawn from `[1 - s, 1 + s]`.
    pub jitter_strength: f64,
    pub gray_prob: f64,
    pub blur_prob: f64,
    pub blur_sigma_min: f64,
    pub blur_sigma_max: f64,
    pub cutmix_prob: f64,
    pub cutmix_area_min: f64,
    pub cutmix_area_max: f64,
}

impl Default for AugConfig {
    fn default() -> Self {
        AugConfig {
            crop_size: 64,
            scale_min: 0.5,
            scale_max: 2.0,
            flip_prob: 0.5,
            jitter_prob: 0.8,
            jitter_strength: 0.4,
            gray_prob: 0.2,
            blur_prob: 0.5,
            blur_sigma_min: 0.1,
            blur_sigma_max: 2.0,
            cutmix_prob: 0.5,
            cutmix_area_min: 0.2,
            cutmix_area_max: 0.5,
        }
    }
}

/// The realized spatial transform of [`weak_augment`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeakAugRecord {
    pub scale: f64,
    pub resized_h: usize,
    pub resized_w: usize,
    pub top: usize,
    pub left: usize,
    pub crop_h: usize,
    pub crop_w: usize,
    pub flip: bool,
}

impl WeakAugRecord {
    pub fn identity(height: usize, width: usize) -> Self {
        WeakAugRecord {
            scale: 1.0,
            resized_h: height,
            resized_w: width,
            top: 0,
            left: 0,
            crop_h: height,
            crop_w: width,
            flip: false,
        }
    }
}

fn chance<R: Rng + ?Sized>(rng: &mut R, p: f64) -> bool {
    p > 0.0 && rng.gen::<f64>() < p
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Draws a weak transform for an `height x width` sample.
pub fn sample_weak<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    cfg: &AugConfig,
    rng: &mut R,
) -> WeakAugRecord {
    let scale = uniform(rng, cfg.scale_min, cfg.scale_max);
    let crop_h = cfg.crop_size.max(1);
    let crop_w = crop_h;
    let resized_h = ((height as f64 * scale).round() as usize).max(crop_h);
    let resized_w = ((width as f64 * scale).round() as usize).max(crop_w);
    let top = rng.gen_range(0..=resized_h - crop_h);
    let left = rng.gen_range(0..=resized_w - crop_w);
    let flip = chance(rng, cfg.flip_prob);
    WeakAugRecord {
        scale,
        resized_h,
        resized_w,
        top,
        left,
        crop_h,
        crop_w,
        flip,
    }
}

/// Nearest-neighbour resample, crop and optional horizontal flip of one plane.
fn transform_plane_nearest<T: Copy>(src: &[T], h: usize, w: usize, rec: &WeakAugRecord) -> Vec<T> {
    let ty = kernels::nearest_taps(h, rec.resized_h);
    let tx = kernels::nearest_taps(w, rec.resized_w);
    let mut out = Vec::with_capacity(rec.crop_h * rec.crop_w);
    for y in 0..rec.crop_h {
        let sy = ty[rec.top + y];
        for x in 0..rec.crop_w {
            let cx = if rec.flip { rec.crop_w - 1 - x } else { x };
            out.push(src[sy * w + tx[rec.left + cx]]);
        }
    }
    out
}

/// Applies the spatial transform of `rec` to a per-pixel map (nearest neighbour).
pub fn transform_map<T: Copy>(src: &[T], h: usize, w: usize, rec: &WeakAugRecord) -> Vec<T> {
    transform_plane_nearest(src, h, w, rec)
}

/// Applies the spatial transform of `rec` to a `[C,H,W]` image (bilinear).
pub fn transform_image(image: &Tensor, rec: &WeakAugRecord) -> Result<Tensor> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::Shape(format!(
            "expected a [C,H,W] image, got {:?}",
            image.shape()
        )));
    };
    let resized = kernels::bilinear_forward([1, c, h, w], image.data(), rec.resized_h, rec.resized_w);
    let (rh, rw) = (rec.resized_h, rec.resized_w);
    if rec.top + rec.crop_h > rh || rec.left + rec.crop_w > rw {
        return Err(Error::Shape("crop window outside the resized image".into()));
    }
    let mut out = Vec::with_capacity(c * rec.crop_h * rec.crop_w);
    for ch in 0..c {
        let plane = &resized[ch * rh * rw..(ch + 1) * rh * rw];
        for y in 0..rec.crop_h {
            let row = &plane[(rec.top + y) * rw + rec.left..(rec.top + y) * rw + rec.left + rec.crop_w];
            if rec.flip {
                out.extend(row.iter().rev());
            } else {
                out.extend_from_slice(row);
            }
        }
    }
    Tensor::new(vec![c, rec.crop_h, rec.crop_w], out)
}

/// Replays a recorded weak transform on a sample.
pub fn apply_weak(sample: &SegSample, rec: &WeakAugRecord) -> Result<SegSample> {
    let image = transform_image(&sample.image, rec)?;
    let label = match &sample.label {
        Some(l) => Some(LabelMap::new(
            rec.crop_h,
            rec.crop_w,
            transform_map(&l.data, l.height, l.width, rec),
        )?),
        None => None,
    };
    Ok(SegSample {
        id: sample.id.clone(),
        image,
        label,
    })
}

/// Random resize in `[scale_min, scale_max]`, random crop, random horizontal flip.
pub fn weak_augment<R: Rng + ?Sized>(
    sample: &SegSample,
    cfg: &AugConfig,
    rng: &mut R,
) -> Result<(SegSample, WeakAugRecord)> {
    let rec = sample_weak(sample.height(), sample.width(), cfg, rng);
    Ok((apply_weak(sample, &rec)?, rec))
}

fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Photometric parameters realized by one [`strong_augment`] call.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StrongAugRecord {
    pub jitter: Option<[f64; 3]>,
    pub grayscale: bool,
    pub blur_sigma: Option<f64>,
}

pub fn sample_strong<R: Rng + ?Sized>(cfg: &AugConfig, rng: &mut R) -> StrongAugRecord {
    let s = cfg.jitter_strength;
    let jitter = chance(rng, cfg.jitter_prob).then(|| {
        [
            uniform(rng, 1.0 - s, 1.0 + s),
            uniform(rng, 1.0 - s, 1.0 + s),
            uniform(rng, 1.0 - s, 1.0 + s),
        ]
    });
    let grayscale = chance(rng, cfg.gray_prob);
    let blur_sigma =
        chance(rng, cfg.blur_prob).then(|| uniform(rng, cfg.blur_sigma_min, cfg.blur_sigma_max));
    StrongAugRecord {
        jitter,
        grayscale,
        blur_sigma,
    }
}

/// Color jitter, random grayscale and Gaussian blur on a `[3,H,W]` image.
/// Pixel positions are never changed.
pub fn strong_augment<R: Rng + ?Sized>(image: &Tensor, cfg: &AugConfig, rng: &mut R) -> Result<Tensor> {
    apply_strong(image, &sample_strong(cfg, rng))
}

pub fn apply_strong(image: &Tensor, rec: &StrongAugRecord) -> Result<Tensor> {
    let &[3, h, w] = image.shape() else {
        return Err(Error::Shape(format!(
            "strong augmentation expects [3,H,W], got {:?}",
            image.shape()
        )));
    };
    let plane = h * w;
    let mut out = image.clone();
    if let Some([brightness, contrast, saturation]) = rec.jitter {
        color_jitter(out.data_mut(), plane, brightness, contrast, saturation);
    }
    if rec.grayscale {
        let d = out.data_mut();
        for p in 0..plane {
            let y = luma(d[p], d[plane + p], d[2 * plane + p]);
            d[p] = y;
            d[plane + p] = y;
            d[2 * plane + p] = y;
        }
    }
    if let Some(sigma) = rec.blur_sigma {
        out = gaussian_blur(&out, sigma)?;
    }
    Ok(out)
}

fn color_jitter(d: &mut [f64], plane: usize, brightness: f64, contrast: f64, saturation: f64) {
    for v in d.iter_mut() {
        *v = (*v * brightness).clamp(0.0, 1.0);
    }
    let mean_luma =
        (0..plane).map(|p| luma(d[p], d[plane + p], d[2 * plane + p])).sum::<f64>() / plane as f64;
    for v in d.iter_mut() {
        *v = ((*v - mean_luma) * contrast + mean_luma).clamp(0.0, 1.0);
    }
    for p in 0..plane {
        let y = luma(d[p], d[plane + p], d[2 * plane + p]);
        for ch in 0..3 {
            let v = &mut d[ch * plane + p];
            *v = (y + (*v - y) * saturation).clamp(0.0, 1.0);
        }
    }
}

/// Normalized Gaussian taps with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(0.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Half-sample symmetric reflection: `-1 -> 0`, `n -> n - 1`.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Separable Gaussian blur of every channel of a `[C,H,W]` image, reflective borders.
pub fn gaussian_blur(image: &Tensor, sigma: f64) -> Result<Tensor> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::Shape(format!(
            "blur expects [C,H,W], got {:?}",
            image.shape()
        )));
    };
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; c * h * w];
    let mut out = vec![0.0; c * h * w];
    let src = image.data();
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h {
            for x in 0..w {
                tmp[base + y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| kv * src[base + y * w + reflect(x as isize + i as isize - r, w)])
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                out[base + y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| kv * tmp[base + reflect(y as isize + i as isize - r, h) * w + x])
                    .sum();
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// A rectangle pasted from batch element `source`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CutMixBox {
    pub source: usize,
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl CutMixBox {
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.height && x >= self.left && x < self.left + self.width
    }
}

/// Box with area ratio uniform in the configured range and aspect ratio in `[0.5, 2]`.
pub fn sample_cutmix_box<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    source: usize,
    cfg: &AugConfig,
    rng: &mut R,
) -> CutMixBox {
    let area = uniform(rng, cfg.cutmix_area_min, cfg.cutmix_area_max) * (height * width) as f64;
    let aspect = uniform(rng, 0.5, 2.0);
    let bh = ((area * aspect).sqrt().round() as usize).clamp(1, height);
    let bw = ((area / bh as f64).round() as usize).clamp(1, width);
    CutMixBox {
        source,
        top: rng.gen_range(0..=height - bh),
        left: rng.gen_range(0..=width - bw),
        height: bh,
        width: bw,
    }
}

/// Pastes `bx` from `b` into `a` for the image and every pseudo-label field.
pub fn cutmix_pair(
    strong_a: &Tensor,
    strong_b: &Tensor,
    pseudo_a: &PseudoLabel,
    pseudo_b: &PseudoLabel,
    bx: &CutMixBox,
) -> Result<(Tensor, PseudoLabel)> {
    strong_a.check_same_shape(strong_b)?;
    let &[c, h, w] = strong_a.shape() else {
        return Err(Error::Shape(format!(
            "cutmix expects [C,H,W] images, got {:?}",
            strong_a.shape()
        )));
    };
    for p in [pseudo_a, pseudo_b] {
        if (p.batch, p.height, p.width) != (1, h, w) {
            return Err(Error::Shape(format!(
                "pseudo-label {}x{}x{} does not match image {h}x{w}",
                p.batch, p.height, p.width
            )));
        }
    }
    if bx.top + bx.height > h || bx.left + bx.width > w {
        return Err(Error::Invalid(format!(
            "cutmix box {bx:?} outside {h}x{w} image"
        )));
    }
    let mut image = strong_a.clone();
    let mut pseudo = pseudo_a.clone();
    for y in bx.top..bx.top + bx.height {
        for x in bx.left..bx.left + bx.width {
            let p = y * w + x;
            for ch in 0..c {
                image.data_mut()[ch * h * w + p] = strong_b.data()[ch * h * w + p];
            }
            pseudo.classes[p] = pseudo_b.classes[p];
            pseudo.confidence[p] = pseudo_b.confidence[p];
            pseudo.valid[p] = pseudo_b.valid[p];
        }
    }
    Ok((image, pseudo))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(h: usize, w: usize, seed: u64) -> SegSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = Tensor::uniform(&[3, h, w], 0.0, 1.0, &mut rng);
        let label = LabelMap::new(h, w, (0..h * w).map(|_| rng.gen_range(0..4u8)).collect()).unwrap();
        SegSample {
            id: "x".into(),
            image,
            label: Some(label),
        }
    }

    #[test]
    fn identity_record_is_identity() {
        let s = sample(16, 12, 0);
        let out = apply_weak(&s, &WeakAugRecord::identity(16, 12)).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn double_flip_restores() {
        let s = sample(8, 8, 1);
        let flip = WeakAugRecord {
            flip: true,
            ..WeakAugRecord::identity(8, 8)
        };
        let twice = apply_weak(&apply_weak(&s, &flip).unwrap(), &flip).unwrap();
        assert_eq!(twice, s);
    }

    #[test]
    fn replay_reproduces() {
        let s = sample(32, 32, 2);
        let cfg = AugConfig {
            crop_size: 24,
            ..AugConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let (out, rec) = weak_augment(&s, &cfg, &mut rng).unwrap();
            assert!(rec.top + rec.crop_h <= rec.resized_h);
            assert!(rec.left + rec.crop_w <= rec.resized_w);
            assert_eq!(apply_weak(&s, &rec).unwrap(), out);
            assert_eq!(out.image.shape(), &[3, 24, 24]);
        }
    }

    #[test]
    fn strong_probabilities_zero_is_identity() {
        let s = sample(8, 8, 3);
        let cfg = AugConfig {
            jitter_prob: 0.0,
            gray_prob: 0.0,
            blur_prob: 0.0,
            ..AugConfig::default()
        };
        let out = strong_augment(&s.image, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out, s.image);
    }

    #[test]
    fn grayscale_equalizes_channels() {
        let s = sample(8, 8, 4);
        let rec = StrongAugRecord {
            grayscale: true,
            ..StrongAugRecord::default()
        };
        let out = apply_strong(&s.image, &rec).unwrap();
        let d = out.data();
        for p in 0..64 {
            assert_eq!(d[p], d[64 + p]);
            assert_eq!(d[p], d[128 + p]);
        }
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 4), 0);
        assert_eq!(reflect(-2, 4), 1);
        assert_eq!(reflect(4, 4), 3);
        assert_eq!(reflect(5, 4), 2);
        assert_eq!(reflect(2, 4), 2);
    }

    #[test]
    fn gaussian_kernel_radius_and_mass() {
        let k = gaussian_kernel(1.0);
        assert_eq!(k.len(), 7);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cutmix_rejects_out_of_bounds() {
        let a = Tensor::zeros(&[3, 4, 4]);
        let p = PseudoLabel::from_probs(&Tensor::full(&[1, 2, 4, 4], 0.5), 0.9).unwrap();
        let bx = CutMixBox {
            source: 0,
            top: 2,
            left: 0,
            height: 3,
            width: 1,
        };
        assert!(cutmix_pair(&a, &a, &p, &p, &bx).is_err());
    }

    #[test]
    fn cutmix_box_in_range() {
        let cfg = AugConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let b = sample_cutmix_box(32, 32, 1, &cfg, &mut rng);
            assert!(b.top + b.height <= 32 && b.left + b.width <= 32);
            let ratio = b.area() as f64 / 1024.0;
            assert!((0.1..=0.6).contains(&ratio), "{ratio}");
        }
    }
}
