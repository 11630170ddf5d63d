//! Patch masks for the masked-consistency branch.
//!
//! A mask holds 1 for kept pixels and 0 for masked pixels and is constant over
//! each `patch_size x patch_size` patch.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskStrategy {
    /// Each patch masked independently with probability `ratio`.
    Random,
    /// One contiguous rectangle of patches.
    Block,
    /// A regular lattice of kept patches.
    Grid,
}

impl fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskStrategy::Random => "random",
            MaskStrategy::Block => "block",
            MaskStrategy::Grid => "grid",
        })
    }
}

impl FromStr for MaskStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(MaskStrategy::Random),
            "block" => Ok(MaskStrategy::Block),
            "grid" => Ok(MaskStrategy::Grid),
            _ => Err(Error::Config(format!("unknown mask strategy `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskSpec {
    pub patch_size: usize,
    pub ratio: f64,
    pub strategy: MaskStrategy,
}

impl Default for MaskSpec {
    fn default() -> Self {
        MaskSpec {
            patch_size: 8,
            ratio: 0.7,
            strategy: MaskStrategy::Random,
        }
    }
}

impl MaskSpec {
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.patch_size == 0 || height % self.patch_size != 0 || width % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "mask patch size {} must divide the image extents {height}x{width}",
                self.patch_size
            )));
        }
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(Error::Config(format!(
                "mask ratio {} outside [0, 1]",
                self.ratio
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchMask {
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
    /// Row-major, 0 = masked, 1 = kept.
    pub data: Vec<u8>,
}

impl PatchMask {
    pub fn ones(height: usize, width: usize, patch_size: usize) -> Self {
        Self::from_patches(height, width, patch_size, &vec![true; (height / patch_size) * (width / patch_size)])
    }

    pub fn zeros(height: usize, width: usize, patch_size: usize) -> Self {
        Self::from_patches(height, width, patch_size, &vec![false; (height / patch_size) * (width / patch_size)])
    }

    /// Expands a per-patch keep grid (`true` = kept) to pixels.
    pub fn from_patches(height: usize, width: usize, patch_size: usize, keep: &[bool]) -> Self {
        let gw = width / patch_size;
        let mut data = vec![0u8; height * width];
        for y in 0..height {
            for x in 0..width {
                data[y * width + x] = u8::from(keep[(y / patch_size) * gw + x / patch_size]);
            }
        }
        PatchMask {
            height,
            width,
            patch_size,
            data,
        }
    }

    pub fn grid_dims(&self) -> (usize, usize) {
        (self.height / self.patch_size, self.width / self.patch_size)
    }

    /// Per-patch keep flags, read from each patch's top-left pixel.
    pub fn patches(&self) -> Vec<bool> {
        let (gh, gw) = self.grid_dims();
        let p = self.patch_size;
        (0..gh * gw)
            .map(|i| self.data[(i / gw) * p * self.width + (i % gw) * p] == 1)
            .collect()
    }

    pub fn masked_fraction(&self) -> f64 {
        let masked = self.data.iter().filter(|&&v| v == 0).count();
        masked as f64 / self.data.len() as f64
    }

    pub fn is_kept(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }
}

/// Draws a patch mask with the configured strategy.
pub fn generate_mask<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    spec: &MaskSpec,
    rng: &mut R,
) -> Result<PatchMask> {
    spec.validate(height, width)?;
    let p = spec.patch_size;
    let (gh, gw) = (height / p, width / p);
    let n = gh * gw;
    let keep = match spec.strategy {
        MaskStrategy::Random => (0..n).map(|_| rng.gen::<f64>() >= spec.ratio).collect(),
        MaskStrategy::Block => block_keep(gh, gw, spec.ratio, rng),
        MaskStrategy::Grid => grid_keep(gh, gw, spec.ratio, rng),
    };
    Ok(PatchMask::from_patches(height, width, p, &keep))
}

fn block_keep<R: Rng + ?Sized>(gh: usize, gw: usize, ratio: f64, rng: &mut R) -> Vec<bool> {
    let n = gh * gw;
    let target = (ratio * n as f64).round() as usize;
    let mut keep = vec![true; n];
    if target == 0 {
        return keep;
    }
    let aspect = rng.gen_range(0.5..=2.0);
    let mut bh = ((target as f64 * aspect).sqrt().round() as usize).clamp(1, gh);
    let bw = ((target as f64 / bh as f64).round() as usize).clamp(1, gw);
    if bw == gw {
        bh = ((target as f64 / bw as f64).round() as usize).clamp(1, gh);
    }
    let top = rng.gen_range(0..=gh - bh);
    let left = rng.gen_range(0..=gw - bw);
    for y in top..top + bh {
        for x in left..left + bw {
            keep[y * gw + x] = false;
        }
    }
    keep
}

fn grid_keep<R: Rng + ?Sized>(gh: usize, gw: usize, ratio: f64, rng: &mut R) -> Vec<bool> {
    if ratio >= 1.0 {
        return vec![false; gh * gw];
    }
    // One kept patch per period x period cell, so the kept fraction is 1 / period^2.
    let period = ((1.0 / (1.0 - ratio).sqrt()).round() as usize).max(1);
    let oy = rng.gen_range(0..period);
    let ox = rng.gen_range(0..period);
    (0..gh * gw)
        .map(|i| (i / gw) % period == oy && (i % gw) % period == ox)
        .collect()
}

/// Zeroes masked pixels of every `[N,C,H,W]` sample with a shared mask.
pub fn apply_mask(images: &Tensor, mask: &PatchMask) -> Result<Tensor> {
    let n = images.shape().first().copied().unwrap_or(0);
    apply_masks(images, &vec![mask.clone(); n])
}

/// Zeroes masked pixels, one mask per sample.
pub fn apply_masks(images: &Tensor, masks: &[PatchMask]) -> Result<Tensor> {
    let [n, c, h, w] = images.dims4()?;
    if masks.len() != n {
        return Err(Error::Shape(format!(
            "{} masks for a batch of {n}",
            masks.len()
        )));
    }
    if let Some(m) = masks.iter().find(|m| (m.height, m.width) != (h, w)) {
        return Err(Error::Shape(format!(
            "mask {}x{} for images {h}x{w}",
            m.height, m.width
        )));
    }
    let mut out = images.clone();
    let plane = h * w;
    for (b, mask) in masks.iter().enumerate() {
        for ch in 0..c {
            let dst = &mut out.data_mut()[(b * c + ch) * plane..(b * c + ch + 1) * plane];
            for (v, &m) in dst.iter_mut().zip(&mask.data) {
                if m == 0 {
                    *v = 0.0;
                }
            }
        }
    }
    Ok(out)
}
