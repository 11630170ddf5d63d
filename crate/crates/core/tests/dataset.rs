mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use maskmatch::dataset::{decode_pnm, generate_dataset, Dataset, GenerateParams, Split};

fn dir_contents(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn same_seed_gives_identical_directories() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    common::small_dataset(a.path(), 11);
    common::small_dataset(b.path(), 11);
    common::small_dataset(c.path(), 12);
    assert_eq!(dir_contents(a.path()), dir_contents(b.path()));
    assert_ne!(dir_contents(a.path()), dir_contents(c.path()));
}

#[test]
fn splits_are_disjoint_and_counted() {
    let dir = tempfile::tempdir().unwrap();
    let params = common::small_dataset(dir.path(), 3);
    let ds = Dataset::open(dir.path()).unwrap();
    let m = ds.manifest();
    assert_eq!(m.ids(Split::Labeled).len(), params.labeled);
    assert_eq!(m.ids(Split::Unlabeled).len(), params.unlabeled);
    assert_eq!(m.ids(Split::Val).len(), params.val);
    let all: Vec<&String> = [Split::Labeled, Split::Unlabeled, Split::Val]
        .iter()
        .flat_map(|&s| m.ids(s))
        .collect();
    let unique: BTreeSet<&String> = all.iter().copied().collect();
    assert_eq!(unique.len(), all.len());

    assert_eq!(ds.load_split(Split::Labeled).unwrap().len(), params.labeled);
    let unlabeled = ds.load_split(Split::Unlabeled).unwrap();
    assert!(unlabeled.iter().all(|s| s.label.is_none()));
    let truth = ds.withheld_label(&unlabeled[0].id).unwrap();
    assert_eq!((truth.height, truth.width), (32, 32));
}

#[test]
fn values_in_range_and_foreground_classes_covered() {
    let dir = tempfile::tempdir().unwrap();
    let params = GenerateParams {
        num_classes: 4,
        height: 32,
        width: 32,
        labeled: 20,
        unlabeled: 80,
        val: 10,
        seed: 5,
    };
    generate_dataset(&params, dir.path()).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    let mut seen = BTreeSet::new();
    for split in [Split::Labeled, Split::Val] {
        for s in ds.load_split(split).unwrap() {
            assert_eq!(s.image.shape(), &[3, 32, 32]);
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            let label = s.label.unwrap();
            assert!(label.data.iter().all(|&c| c < 4));
            seen.extend(label.data);
        }
    }
    for id in ds.manifest().ids(Split::Unlabeled) {
        seen.extend(ds.withheld_label(id).unwrap().data);
    }
    assert_eq!(seen, BTreeSet::from([0, 1, 2, 3]));
}

#[test]
fn loaded_images_match_file_bytes() {
    let dir = tempfile::tempdir().unwrap();
    common::small_dataset(dir.path(), 8);
    let ds = Dataset::open(dir.path()).unwrap();
    let sample = &ds.load_split(Split::Val).unwrap()[0];
    let path = dir.path().join("images").join(format!("{}.ppm", sample.id));
    let (w, h, c, bytes) = decode_pnm(&fs::read(path).unwrap()).unwrap();
    assert_eq!((w, h, c), (32, 32, 3));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let loaded = sample.image.data()[ch * h * w + y * w + x];
                assert_eq!(loaded, bytes[(y * w + x) * 3 + ch] as f64 / 255.0);
            }
        }
    }
}

#[test]
fn missing_file_is_named_in_error() {
    let dir = tempfile::tempdir().unwrap();
    common::small_dataset(dir.path(), 2);
    let ds = Dataset::open(dir.path()).unwrap();
    let id = ds.manifest().ids(Split::Val)[1].clone();
    fs::remove_file(dir.path().join("images").join(format!("{id}.ppm"))).unwrap();
    let err = ds.load_split(Split::Val).unwrap_err().to_string();
    assert!(err.contains(&format!("{id}.ppm")), "{err}");
}

#[test]
fn label_boundaries_coincide_with_color_edges() {
    let dir = tempfile::tempdir().unwrap();
    let params = GenerateParams {
        labeled: 10,
        unlabeled: 1,
        val: 1,
        seed: 21,
        ..GenerateParams::default()
    };
    generate_dataset(&params, dir.path()).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    let (mut boundary, mut near_edge) = (0usize, 0usize);
    for s in ds.load_split(Split::Labeled).unwrap() {
        let (h, w) = (s.height(), s.width());
        let img = s.image.data();
        let label = s.label.unwrap();
        let diff = |a: usize, b: usize| -> f64 {
            (0..3)
                .map(|ch| (img[ch * h * w + a] - img[ch * h * w + b]).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        // Color gradient magnitude: largest difference to a 4-neighbour.
        let mut grad = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let mut g: f64 = 0.0;
                if x + 1 < w {
                    g = g.max(diff(p, p + 1));
                }
                if x > 0 {
                    g = g.max(diff(p, p - 1));
                }
                if y + 1 < h {
                    g = g.max(diff(p, p + w));
                }
                if y > 0 {
                    g = g.max(diff(p, p - w));
                }
                grad[p] = g;
            }
        }
        let is_local_max = |y: usize, x: usize| {
            let p = y * w + x;
            let horiz = (x == 0 || grad[p] >= grad[p - 1]) && (x + 1 == w || grad[p] >= grad[p + 1]);
            let vert = (y == 0 || grad[p] >= grad[p - w]) && (y + 1 == h || grad[p] >= grad[p + w]);
            grad[p] > 0.25 && (horiz || vert)
        };
        for y in 0..h {
            for x in 0..w {
                let c = label.get(y, x);
                let on_boundary = (x + 1 < w && label.get(y, x + 1) != c)
                    || (x > 0 && label.get(y, x - 1) != c)
                    || (y + 1 < h && label.get(y + 1, x) != c)
                    || (y > 0 && label.get(y - 1, x) != c);
                if !on_boundary {
                    continue;
                }
                boundary += 1;
                let found = (y.saturating_sub(1)..(y + 2).min(h))
                    .any(|yy| (x.saturating_sub(1)..(x + 2).min(w)).any(|xx| is_local_max(yy, xx)));
                near_edge += usize::from(found);
            }
        }
    }
    assert!(boundary > 0);
    let frac = near_edge as f64 / boundary as f64;
    assert!(frac >= 0.95, "only {frac:.3} of label boundary pixels near a color edge");
}
