//! Ablation matrix: training variants x seeds on one shared dataset.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::{Mode, TrainConfig};
use crate::error::{Error, Result};
use crate::train;

/// A named set of config overrides applied on top of the base config.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub overrides: Vec<(String, String)>,
}

impl Variant {
    pub fn new(name: &str, overrides: &[(&str, &str)]) -> Self {
        Variant {
            name: name.to_string(),
            overrides: overrides
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }

    fn mode(name: Mode) -> Self {
        Variant::new(&name.to_string(), &[("train.mode", &name.to_string())])
    }

    pub fn apply(&self, base: &TrainConfig) -> Result<TrainConfig> {
        let mut cfg = base.clone();
        for (k, v) in &self.overrides {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationPlan {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
}

impl AblationPlan {
    /// The five component modes.
    pub fn modes(seeds: &[u64]) -> Self {
        AblationPlan {
            variants: Mode::ALL.iter().map(|&m| Variant::mode(m)).collect(),
            seeds: seeds.to_vec(),
        }
    }

    /// Modes plus masked-branch region/task variants and mask strategies.
    /// `full` doubles as the predict-everywhere variant with random masks.
    pub fn extended(seeds: &[u64]) -> Self {
        let mut plan = Self::modes(seeds);
        plan.variants.extend([
            Variant::new("lcr_unmasked_only", &[("train.mode", "full"), ("lcr.region", "unmasked_only")]),
            Variant::new("lcr_reconstruct", &[("train.mode", "full"), ("lcr.task", "reconstruct")]),
            Variant::new("mask_block", &[("train.mode", "full"), ("mask.strategy", "block")]),
            Variant::new("mask_grid", &[("train.mode", "full"), ("mask.strategy", "grid")]),
        ]);
        plan
    }
}

/// Outcome of one (variant, seed) run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub variant: String,
    pub seed: u64,
    /// `(mIoU, boundary F)` or the failure message.
    pub outcome: std::result::Result<(f64, f64), String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantSummary {
    pub name: String,
    pub mode: Mode,
    pub runs: usize,
    pub failed: usize,
    pub miou: (f64, f64),
    pub boundary_f: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub dataset_hash: String,
    pub runs: Vec<RunResult>,
    pub summaries: Vec<VariantSummary>,
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// SHA-256 over the manifest and every image and label file, in sorted order.
pub fn dataset_hash(root: &Path) -> Result<String> {
    let mut files = vec![root.join("manifest.json")];
    for sub in ["images", "labels"] {
        let dir = root.join(sub);
        let mut entries: Vec<_> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(&dir, err)))
            .collect::<Result<_>>()?;
        entries.sort();
        files.extend(entries);
    }
    let mut h = Sha256::new();
    for f in files {
        let bytes = fs::read(&f).map_err(|e| Error::io(&f, e))?;
        h.update(f.strip_prefix(root).unwrap_or(&f).to_string_lossy().as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

impl AblationReport {
    pub fn summary(&self, name: &str) -> Option<&VariantSummary> {
        self.summaries.iter().find(|s| s.name == name)
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("variant,seed,status,miou,boundary_f\n");
        for r in &self.runs {
            match &r.outcome {
                Ok((m, b)) => s.push_str(&format!("{},{},ok,{m},{b}\n", r.variant, r.seed)),
                Err(e) => s.push_str(&format!(
                    "{},{},FAILED,,\"{}\"\n",
                    r.variant,
                    r.seed,
                    e.replace('"', "'")
                )),
            }
        }
        s
    }

    /// Fixed-width table with component columns `MT WS PS MS LCR`.
    pub fn table(&self) -> String {
        let tick = |b: bool| if b { "x" } else { "" };
        let mut s = format!(
            "{:<20} {:>3} {:>3} {:>3} {:>3} {:>4}  {:>16}  {:>16}  {}\n",
            "variant", "MT", "WS", "PS", "MS", "LCR", "mIoU (%)", "boundary F (%)", "runs"
        );
        for v in &self.summaries {
            let c = v.mode.components();
            let stat = |(m, sd): (f64, f64)| {
                if v.failed == v.runs {
                    "FAILED".to_string()
                } else {
                    format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * sd)
                }
            };
            let runs = if v.failed > 0 {
                format!("{} ({} FAILED)", v.runs, v.failed)
            } else {
                v.runs.to_string()
            };
            s.push_str(&format!(
                "{:<20} {:>3} {:>3} {:>3} {:>3} {:>4}  {:>16}  {:>16}  {}\n",
                v.name,
                tick(c.mean_teacher),
                tick(c.weak_strong),
                tick(c.selection),
                tick(c.multi_scale),
                tick(c.lcr),
                stat(v.miou),
                stat(v.boundary_f),
                runs
            ));
        }
        s
    }
}

/// Trains every variant for every seed. Runs write to
/// `<out_dir>/<variant>/seed_<s>`; failed runs are recorded and skipped.
pub fn run_ablation(base: &TrainConfig, plan: &AblationPlan) -> Result<AblationReport> {
    if plan.seeds.is_empty() || plan.variants.is_empty() {
        return Err(Error::Config("ablation needs at least one variant and one seed".into()));
    }
    let hash = dataset_hash(&base.data_dir)?;
    let mut runs = Vec::new();
    let mut summaries = Vec::new();
    for variant in &plan.variants {
        let vcfg = variant.apply(base)?;
        let mut ok = Vec::new();
        let mut failed = 0;
        for &seed in &plan.seeds {
            let mut cfg = vcfg.clone();
            cfg.seed = seed;
            cfg.out_dir = base.out_dir.join(&variant.name).join(format!("seed_{seed}"));
            let outcome = if dataset_hash(&base.data_dir)? != hash {
                Err("dataset changed during the ablation".to_string())
            } else {
                train::train(&cfg)
                    .map(|o| (o.metrics.miou, o.metrics.boundary_f))
                    .map_err(|e| e.to_string())
            };
            match &outcome {
                Ok(r) => {
                    log::info!("{} seed {seed}: mIoU {:.4}", variant.name, r.0);
                    ok.push(*r);
                }
                Err(e) => {
                    log::error!("{} seed {seed} FAILED: {e}", variant.name);
                    failed += 1;
                }
            }
            runs.push(RunResult {
                variant: variant.name.clone(),
                seed,
                outcome,
            });
        }
        let mious: Vec<f64> = ok.iter().map(|r| r.0).collect();
        let bfs: Vec<f64> = ok.iter().map(|r| r.1).collect();
        summaries.push(VariantSummary {
            name: variant.name.clone(),
            mode: vcfg.mode,
            runs: plan.seeds.len(),
            failed,
            miou: mean_std(&mious),
            boundary_f: mean_std(&bfs),
        });
    }
    let report = AblationReport {
        dataset_hash: hash,
        runs,
        summaries,
    };
    fs::create_dir_all(&base.out_dir).map_err(|e| Error::io(&base.out_dir, e))?;
    for (name, body) in [
        ("ablation.csv", report.csv()),
        ("results_table.txt", format!("dataset sha256 {}\n\n{}", report.dataset_hash, report.table())),
    ] {
        let p = base.out_dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    Ok(report)
}
