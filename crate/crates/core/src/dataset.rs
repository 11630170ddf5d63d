//! Seeded synthetic shapes dataset: generation, on-disk layout, and loading.
//!
//! Layout under the dataset root:
//!
//! ```text
//! manifest.json
//! images/<id>.ppm   binary P6, 8-bit RGB
//! labels/<id>.pgm   binary P5, 8-bit class ids (0 = background)
//! ```
//!
//! Unlabeled samples have label files on disk too; they are only reachable
//! through [`Dataset::withheld_label`], never through [`Dataset::load_split`].

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// Per-pixel class ids, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "label map {height}x{width} with {} values",
                data.len()
            )));
        }
        Ok(LabelMap {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        LabelMap {
            height,
            width,
            data: vec![class; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    pub id: String,
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    pub label: Option<LabelMap>,
}

impl SegSample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Labeled,
    Unlabeled,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Labeled => "labeled",
            Split::Unlabeled => "unlabeled",
            Split::Val => "val",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "labeled" => Ok(Split::Labeled),
            "unlabeled" => Ok(Split::Unlabeled),
            "val" => Ok(Split::Val),
            _ => Err(Error::Config(format!(
                "unknown split `{s}` (expected labeled, unlabeled or val)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIds {
    pub labeled: Vec<String>,
    pub unlabeled: Vec<String>,
    pub val: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub labeled_count: usize,
    pub unlabeled_count: usize,
    pub val_count: usize,
    pub seed: u64,
    pub splits: SplitIds,
}

impl DatasetManifest {
    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Labeled => &self.splits.labeled,
            Split::Unlabeled => &self.splits.unlabeled,
            Split::Val => &self.splits.val,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            (Split::Labeled, self.labeled_count),
            (Split::Unlabeled, self.unlabeled_count),
            (Split::Val, self.val_count),
        ];
        for (split, n) in counts {
            if self.ids(split).len() != n {
                return Err(Error::Invalid(format!(
                    "manifest {split} split lists {} ids, count says {n}",
                    self.ids(split).len()
                )));
            }
        }
        let mut all: Vec<&String> = self
            .splits
            .labeled
            .iter()
            .chain(&self.splits.unlabeled)
            .chain(&self.splits.val)
            .collect();
        all.sort();
        if all.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Invalid("manifest splits are not disjoint".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenerateParams {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub labeled: usize,
    pub unlabeled: usize,
    pub val: usize,
    pub seed: u64,
}

impl Default for GenerateParams {
    fn default() -> Self {
        GenerateParams {
            num_classes: 4,
            height: 64,
            width: 64,
            labeled: 20,
            unlabeled: 200,
            val: 50,
            seed: 0,
        }
    }
}

const PIXEL_NOISE: f64 = 0.05;
const HUE_JITTER: f64 = 0.1;
const BACKGROUND_GRID: usize = 5;

/// Base hue in `[0, 1)` for foreground class `class` (1-based).
pub fn class_hue(class: usize, num_classes: usize) -> f64 {
    (class - 1) as f64 / (num_classes - 1) as f64
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Circle { cx: f64, cy: f64, r: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Triangle { v: [(f64, f64); 3] },
}

impl Shape {
    fn random<R: Rng>(rng: &mut R, h: usize, w: usize) -> Self {
        let size = h.min(w) as f64;
        let cx = rng.gen_range(0.0..w as f64);
        let cy = rng.gen_range(0.0..h as f64);
        let r = rng.gen_range(0.12..0.3) * size;
        match rng.gen_range(0..3) {
            0 => Shape::Circle { cx, cy, r },
            1 => {
                let hw = r * rng.gen_range(0.6..1.4);
                let hh = r * rng.gen_range(0.6..1.4);
                Shape::Rect {
                    x0: cx - hw,
                    y0: cy - hh,
                    x1: cx + hw,
                    y1: cy + hh,
                }
            }
            _ => {
                let start = rng.gen_range(0.0..std::f64::consts::TAU);
                let mut v = [(0.0, 0.0); 3];
                for (k, vk) in v.iter_mut().enumerate() {
                    let a = start
                        + k as f64 * std::f64::consts::TAU / 3.0
                        + rng.gen_range(-0.3..0.3);
                    let rr = r * rng.gen_range(1.0..1.5);
                    *vk = (cx + rr * a.cos(), cy + rr * a.sin());
                }
                Shape::Triangle { v }
            }
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Circle { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
            Shape::Triangle { v } => {
                let edge = |(ax, ay): (f64, f64), (bx, by): (f64, f64)| {
                    (bx - ax) * (y - ay) - (by - ay) * (x - ax)
                };
                let d = [edge(v[0], v[1]), edge(v[1], v[2]), edge(v[2], v[0])];
                d.iter().all(|&e| e >= 0.0) || d.iter().all(|&e| e <= 0.0)
            }
        }
    }
}

/// Renders one sample as 8-bit RGB (HWC) plus its label map.
fn render(params: &GenerateParams, index: usize) -> (Vec<u8>, LabelMap) {
    let (h, w, c) = (params.height, params.width, params.num_classes);
    let mut rng = ChaCha8Rng::seed_from_u64(
        params.seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15),
    );

    // Low-frequency, low-saturation background.
    let g = BACKGROUND_GRID;
    let mut coarse = vec![0.0; 3 * g * g];
    for p in 0..g * g {
        let gray = rng.gen_range(0.2..0.8);
        for ch in 0..3 {
            coarse[ch * g * g + p] = gray + rng.gen_range(-0.12..0.12);
        }
    }
    let mut rgb = kernels::bilinear_forward([1, 3, g, g], &coarse, h, w);
    let mut label = LabelMap::filled(h, w, 0);

    let count = rng.gen_range(1..=4);
    for _ in 0..count {
        let class = rng.gen_range(1..c);
        let shape = Shape::random(&mut rng, h, w);
        let hue = class_hue(class, c) + rng.gen_range(-HUE_JITTER..HUE_JITTER);
        let color = hsv_to_rgb(hue, rng.gen_range(0.65..1.0), rng.gen_range(0.6..1.0));
        for y in 0..h {
            for x in 0..w {
                if shape.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    label.data[y * w + x] = class as u8;
                    for ch in 0..3 {
                        rgb[ch * h * w + y * w + x] = color[ch];
                    }
                }
            }
        }
    }

    let noise = Normal::new(0.0, PIXEL_NOISE).expect("valid sigma");
    let mut bytes = vec![0u8; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = (rgb[ch * h * w + y * w + x] + noise.sample(&mut rng)).clamp(0.0, 1.0);
                bytes[(y * w + x) * 3 + ch] = (v * 255.0).round() as u8;
            }
        }
    }
    (bytes, label)
}

pub fn sample_id(index: usize) -> String {
    format!("{index:05}")
}

/// Writes a complete dataset under `out_dir` and returns its manifest.
pub fn generate_dataset(params: &GenerateParams, out_dir: &Path) -> Result<DatasetManifest> {
    if params.height < 32 || params.width < 32 {
        return Err(Error::Config(format!(
            "dataset images must be at least 32x32, got {}x{}",
            params.height, params.width
        )));
    }
    if !(2..=8).contains(&params.num_classes) {
        return Err(Error::Config(format!(
            "dataset class count must be in [2, 8], got {}",
            params.num_classes
        )));
    }
    if params.labeled == 0 || params.val == 0 {
        return Err(Error::Config(
            "labeled and validation splits must be non-empty".into(),
        ));
    }
    let images = out_dir.join("images");
    let labels = out_dir.join("labels");
    for dir in [&images, &labels] {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let total = params.labeled + params.unlabeled + params.val;
    for index in 0..total {
        let (rgb, label) = render(params, index);
        let id = sample_id(index);
        write_file(
            &images.join(format!("{id}.ppm")),
            &encode_pnm(b"P6", params.width, params.height, &rgb),
        )?;
        write_file(
            &labels.join(format!("{id}.pgm")),
            &encode_pnm(b"P5", params.width, params.height, &label.data),
        )?;
    }

    let ids = |range: std::ops::Range<usize>| range.map(sample_id).collect::<Vec<_>>();
    let m = params.labeled;
    let n = params.unlabeled;
    let manifest = DatasetManifest {
        num_classes: params.num_classes,
        height: params.height,
        width: params.width,
        labeled_count: m,
        unlabeled_count: n,
        val_count: params.val,
        seed: params.seed,
        splits: SplitIds {
            labeled: ids(0..m),
            unlabeled: ids(m..m + n),
            val: ids(m + n..total),
        },
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Invalid(format!("serializing manifest: {e}")))?;
    write_file(&out_dir.join("manifest.json"), json.as_bytes())?;
    Ok(manifest)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_pnm(magic: &[u8; 2], width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(pixels.len() + 20);
    out.extend_from_slice(magic);
    out.extend_from_slice(format!("\n{width} {height}\n255\n").as_bytes());
    out.extend_from_slice(pixels);
    out
}

/// Parses a binary 8-bit PPM (`P6`) or PGM (`P5`); returns `(width, height, channels, pixels)`.
pub fn decode_pnm(bytes: &[u8]) -> std::result::Result<(usize, usize, usize, Vec<u8>), String> {
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err("not a binary PPM/PGM file".into()),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err("truncated header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or("malformed header field")?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("missing whitespace after header".into());
    }
    pos += 1;
    let expected = width * height * channels;
    let data = &bytes[pos..];
    if data.len() != expected {
        return Err(format!(
            "expected {expected} pixel bytes, found {}",
            data.len()
        ));
    }
    Ok((width, height, channels, data.to_vec()))
}

/// Read-only handle on a generated dataset directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        manifest.validate()?;
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn read_image(&self, id: &str) -> Result<Tensor> {
        let path = self.root.join("images").join(format!("{id}.ppm"));
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let (w, h, _, px) = decode_pnm(&bytes)
            .ok()
            .filter(|&(_, _, c, _)| c == 3)
            .ok_or_else(|| Error::format(&path, "expected a binary P6 image"))?;
        if (h, w) != (self.manifest.height, self.manifest.width) {
            return Err(Error::format(
                &path,
                format!("image is {h}x{w}, manifest says {}x{}", self.manifest.height, self.manifest.width),
            ));
        }
        let mut data = vec![0.0; 3 * h * w];
        for (p, rgb) in px.chunks_exact(3).enumerate() {
            for ch in 0..3 {
                data[ch * h * w + p] = f64::from(rgb[ch]) / 255.0;
            }
        }
        Tensor::new(vec![3, h, w], data)
    }

    fn read_label(&self, id: &str) -> Result<LabelMap> {
        let path = self.root.join("labels").join(format!("{id}.pgm"));
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let (w, h, _, px) = decode_pnm(&bytes)
            .ok()
            .filter(|&(_, _, c, _)| c == 1)
            .ok_or_else(|| Error::format(&path, "expected a binary P5 label map"))?;
        if let Some(&bad) = px.iter().find(|&&v| v as usize >= self.manifest.num_classes) {
            return Err(Error::format(
                &path,
                format!("class id {bad} >= {}", self.manifest.num_classes),
            ));
        }
        LabelMap::new(h, w, px)
    }

    /// Loads every sample of `split`; unlabeled samples carry no label.
    pub fn load_split(&self, split: Split) -> Result<Vec<SegSample>> {
        self.manifest
            .ids(split)
            .iter()
            .map(|id| {
                let label = match split {
                    Split::Unlabeled => None,
                    _ => Some(self.read_label(id)?),
                };
                Ok(SegSample {
                    id: id.clone(),
                    image: self.read_image(id)?,
                    label,
                })
            })
            .collect()
    }

    /// Ground truth of an unlabeled sample, for pseudo-label accuracy diagnostics only.
    pub fn withheld_label(&self, id: &str) -> Result<LabelMap> {
        self.read_label(id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pnm_round_trip() {
        let px: Vec<u8> = (0..24).collect();
        let enc = encode_pnm(b"P6", 4, 2, &px);
        assert_eq!(decode_pnm(&enc).unwrap(), (4, 2, 3, px));
    }

    #[test]
    fn pnm_header_comments() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[3, 4]);
        assert_eq!(decode_pnm(&bytes).unwrap(), (2, 1, 1, vec![3, 4]));
        assert!(decode_pnm(b"P3\n1 1\n255\n0").is_err());
        assert!(decode_pnm(b"P5\n2 2\n255\n\x00").is_err());
    }

    #[test]
    fn hsv_primaries() {
        assert_eq!(hsv_to_rgb(0.0, 1.0, 1.0), [1.0, 0.0, 0.0]);
        let g = hsv_to_rgb(1.0 / 3.0, 1.0, 1.0);
        assert!((g[1] - 1.0).abs() < 1e-12 && g[0].abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let bad = [
            GenerateParams { height: 16, ..GenerateParams::default() },
            GenerateParams { num_classes: 9, ..GenerateParams::default() },
            GenerateParams { labeled: 0, ..GenerateParams::default() },
        ];
        for p in bad {
            assert!(generate_dataset(&p, dir.path()).is_err());
        }
    }

    #[test]
    fn triangle_contains_centroid() {
        let t = Shape::Triangle {
            v: [(0.0, 0.0), (4.0, 0.0), (0.0, 4.0)],
        };
        assert!(t.contains(1.0, 1.0));
        assert!(!t.contains(3.0, 3.0));
    }
}
