//! The per-iteration training algorithm, the run loop, evaluation through the
//! teacher, and run artifacts (`metrics.csv`, `trace.csv`, checkpoints).
//!
//! Every random draw of a step comes from a stream keyed by
//! `(seed, step, branch)`, so the labeled branch consumes exactly the same
//! randomness whether or not the unlabeled branches run.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{self, AugConfig, WeakAugRecord};
use crate::autograd::Graph;
use crate::checkpoint::Checkpoint;
use crate::config::{LcrTask, Mode, TrainConfig};
use crate::dataset::{Dataset, LabelMap, SegSample, Split};
use crate::error::{Error, Result};
use crate::losses::{self, LossParts, Objective, Student};
use crate::masking::{self, PatchMask};
use crate::metrics::{Evaluator, MetricsRecord};
use crate::params::{self, ParamSet, SgdConfig};
use crate::pseudo_label::{self, FrozenModel, PseudoLabel};
use crate::segnet::{self, ModelConfig, TeacherState};
use crate::tensor::Tensor;

/// `base_lr * (1 - iter / max_iter)^0.9`, clamped to 0 past `max_iter`.
pub fn poly_lr(base_lr: f64, iter: usize, max_iter: usize) -> f64 {
    if iter > max_iter {
        log::warn!("iteration {iter} past max_iter {max_iter}; learning rate clamped to 0");
        return 0.0;
    }
    if max_iter == 0 {
        return 0.0;
    }
    base_lr * (1.0 - iter as f64 / max_iter as f64).powf(0.9)
}

/// Per-iteration record. Absent unlabeled terms are reported as 0.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationTrace {
    pub step: usize,
    pub lr: f64,
    pub loss_labeled: f64,
    pub loss_unlabeled: f64,
    pub loss_lcr: f64,
    pub loss_total: f64,
    pub valid_ratio: f64,
    /// Pseudo-label accuracy on valid pixels against withheld ground truth.
    pub pseudo_acc: Option<f64>,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Copy)]
enum Branch {
    LabeledOrder = 1,
    UnlabeledOrder,
    LabeledAug,
    UnlabeledWeak,
    Strong,
    CutMix,
    Mask,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream(seed: u64, index: u64, branch: Branch) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(index ^ splitmix(branch as u64))))
}

/// Indices of the `step`-th batch drawn from `n` items by reshuffling every pass.
fn batch_indices(n: usize, batch: usize, step: usize, seed: u64, branch: Branch) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let mut cached: Option<(usize, Vec<usize>)> = None;
    for k in step * batch..(step + 1) * batch {
        let pass = k / n;
        if cached.as_ref().map(|(p, _)| *p) != Some(pass) {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut stream(seed, pass as u64, branch));
            cached = Some((pass, perm));
        }
        out.push(cached.as_ref().expect("filled above").1[k % n]);
    }
    out
}

/// Student, teacher and step counter of a run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub student: ParamSet,
    pub teacher: TeacherState,
    pub step: usize,
    pub max_iter: usize,
}

impl TrainState {
    pub fn new(config: TrainConfig, num_classes: usize, max_iter: usize) -> Result<Self> {
        config.validate()?;
        let model = config.model_config(num_classes);
        let student = segnet::init_model(&model)?;
        let teacher = TeacherState::from_student(&student, config.ema_alpha);
        Ok(TrainState {
            config,
            model,
            student,
            teacher,
            step: 0,
            max_iter,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            step: self.step as u64,
            student: self.student.clone(),
            teacher: self.teacher.clone(),
        }
    }
}

fn stack_images(samples: &[SegSample]) -> Result<Tensor> {
    let parts: Vec<Tensor> = samples
        .iter()
        .map(|s| {
            let mut shape = vec![1];
            shape.extend_from_slice(s.image.shape());
            s.image.clone().reshape(&shape)
        })
        .collect::<Result<_>>()?;
    Tensor::stack_batch(&parts)
}

fn stack_labels(samples: &[SegSample]) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for s in samples {
        let l = s
            .label
            .as_ref()
            .ok_or_else(|| Error::Invalid(format!("sample {} has no label", s.id)))?;
        out.extend(l.data.iter().map(|&c| c as usize));
    }
    Ok(out)
}

fn weak_batch<R: Rng>(samples: &[&SegSample], cfg: &AugConfig, rng: &mut R) -> Result<(Vec<SegSample>, Vec<WeakAugRecord>)> {
    let mut out = Vec::with_capacity(samples.len());
    let mut recs = Vec::with_capacity(samples.len());
    for s in samples {
        let (aug, rec) = augment::weak_augment(s, cfg, rng)?;
        out.push(aug);
        recs.push(rec);
    }
    Ok((out, recs))
}

fn pseudo_accuracy(pseudo: &PseudoLabel, truth: &[usize]) -> Option<f64> {
    let valid = pseudo.valid_count();
    if valid == 0 {
        return None;
    }
    let correct = pseudo
        .classes
        .iter()
        .zip(truth)
        .zip(&pseudo.valid)
        .filter(|((p, t), v)| **v && p == t)
        .count();
    Some(correct as f64 / valid as f64)
}

/// One optimizer step. `truth` optionally holds the withheld labels of the
/// unlabeled samples, used only for the pseudo-label accuracy diagnostic.
pub fn train_step(
    state: &mut TrainState,
    labeled: &[&SegSample],
    unlabeled: &[&SegSample],
    truth: Option<&[&LabelMap]>,
) -> Result<IterationTrace> {
    let started = Instant::now();
    let cfg = state.config.clone();
    let comps = cfg.mode.components();
    let seed = cfg.seed;
    let step = state.step as u64;
    let ctx = |what: &str, e: Error| Error::Invalid(format!("step {}: {what}: {e}", state.step));

    let mut g = Graph::new();
    let bound = state.student.bind(&mut g, true);
    let student = Student {
        params: &bound,
        config: &state.model,
    };

    // Labeled branch.
    let (lab, _) = weak_batch(labeled, &cfg.aug, &mut stream(seed, step, Branch::LabeledAug))
        .map_err(|e| ctx("labeled augmentation", e))?;
    let lab_images = stack_images(&lab)?;
    let lab_targets = stack_labels(&lab)?;
    let loss_labeled = if cfg.ohem {
        let out = student.forward(&mut g, &lab_images)?;
        losses::ohem_ce(&mut g, out.logits, &lab_targets, cfg.ohem_keep_ratio, cfg.ohem_min_kept)
    } else {
        losses::supervised_loss(&mut g, &student, &lab_images, &lab_targets)
    }
    .map_err(|e| ctx("supervised loss", e))?;

    let mut unlabeled_loss = None;
    let mut lcr_loss = None;
    let mut valid_ratio = 0.0;
    let mut pseudo_acc = None;
    if comps.weak_strong && !unlabeled.is_empty() {
        let (weak, recs) = weak_batch(unlabeled, &cfg.aug, &mut stream(seed, step, Branch::UnlabeledWeak))
            .map_err(|e| ctx("unlabeled augmentation", e))?;
        let weak_images = stack_images(&weak)?;
        let teacher = FrozenModel {
            params: &state.teacher.params,
            config: &state.model,
        };
        let pseudo = if comps.multi_scale {
            pseudo_label::multiscale_pseudo(&teacher, &weak_images, &cfg.scales, cfg.tau, cfg.averaging)
        } else {
            pseudo_label::single_scale_pseudo(&teacher, &weak_images, cfg.tau)
        }
        .map_err(|e| ctx("pseudo-labels", e))?;
        valid_ratio = pseudo.valid_ratio();
        if let Some(t) = truth {
            let mut flat = Vec::with_capacity(pseudo.len());
            for (l, rec) in t.iter().zip(&recs) {
                flat.extend(augment::transform_map(&l.data, l.height, l.width, rec).into_iter().map(usize::from));
            }
            pseudo_acc = pseudo_accuracy(&pseudo, &flat);
        }

        // Strong view, optionally mixed.
        let mut rng = stream(seed, step, Branch::Strong);
        let strong: Vec<Tensor> = weak
            .iter()
            .map(|s| augment::strong_augment(&s.image, &cfg.aug, &mut rng))
            .collect::<Result<_>>()
            .map_err(|e| ctx("strong augmentation", e))?;
        let per_sample: Vec<PseudoLabel> = (0..pseudo.batch).map(|i| pseudo.sample(i)).collect();
        let n = strong.len();
        let crop = cfg.aug.crop_size;
        let mut mixed_images = strong.clone();
        let mut mixed_pseudo = per_sample.clone();
        let mut rng = stream(seed, step, Branch::CutMix);
        if n > 1 {
            for i in 0..n {
                if !(cfg.aug.cutmix_prob > 0.0 && rng.gen::<f64>() < cfg.aug.cutmix_prob) {
                    continue;
                }
                let other = rng.gen_range(0..n - 1);
                let source = if other >= i { other + 1 } else { other };
                let bx = augment::sample_cutmix_box(crop, crop, source, &cfg.aug, &mut rng);
                let (img, p) = augment::cutmix_pair(&strong[i], &strong[source], &per_sample[i], &per_sample[source], &bx)
                    .map_err(|e| ctx("cutmix", e))?;
                mixed_images[i] = img;
                mixed_pseudo[i] = p;
            }
        }
        let strong_images = Tensor::stack_batch(
            &mixed_images
                .into_iter()
                .map(|t| {
                    let mut shape = vec![1];
                    shape.extend_from_slice(t.shape());
                    t.reshape(&shape)
                })
                .collect::<Result<Vec<_>>>()?,
        )?;
        let strong_pseudo = PseudoLabel::stack(&mixed_pseudo)?;
        let l = if comps.multi_scale {
            losses::msws_loss(&mut g, &student, &strong_images, &strong_pseudo, &cfg.scales)
        } else {
            student
                .forward(&mut g, &strong_images)
                .and_then(|out| losses::masked_ce(&mut g, out.logits, &strong_pseudo))
        }
        .map_err(|e| ctx("weak-to-strong loss", e))?;
        unlabeled_loss = Some(l);

        if comps.lcr {
            let mut rng = stream(seed, step, Branch::Mask);
            let masks: Vec<PatchMask> = (0..weak.len())
                .map(|_| masking::generate_mask(crop, crop, &cfg.mask, &mut rng))
                .collect::<Result<_>>()
                .map_err(|e| ctx("masks", e))?;
            let l = match cfg.lcr_task {
                LcrTask::Predict => losses::lcr_loss(&mut g, &student, &weak_images, &masks, &pseudo, cfg.lcr_region),
                LcrTask::Reconstruct => losses::reconstruction_loss(&mut g, &student, &weak_images, &masks),
            }
            .map_err(|e| ctx("masked consistency loss", e))?;
            lcr_loss = Some(l);
        }
    }

    let objective = if comps.multi_scale || comps.lcr {
        Objective::MaskMatch
    } else {
        Objective::Baseline
    };
    let parts = LossParts {
        labeled: loss_labeled,
        unlabeled: unlabeled_loss,
        lcr: lcr_loss,
    };
    let total = losses::total_loss(&mut g, &cfg.weights, objective, &parts)?;
    let total_value = g.value(total).item()?;
    if !total_value.is_finite() {
        return Err(Error::NonFinite(format!(
            "step {}: total loss is {total_value}",
            state.step
        )));
    }
    g.backward(total).map_err(|e| ctx("backward", e))?;
    state.student.collect_grads(&g, &bound)?;
    let lr = poly_lr(cfg.base_lr, state.step, state.max_iter);
    params::sgd_momentum_step(
        &mut state.student,
        SgdConfig {
            lr,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
        },
    )?;
    state.teacher.ema_update(&state.student)?;

    let value = |v: Option<crate::autograd::Var>| v.map(|v| g.value(v).item()).transpose();
    let trace = IterationTrace {
        step: state.step,
        lr,
        loss_labeled: g.value(loss_labeled).item()?,
        loss_unlabeled: value(unlabeled_loss)?.unwrap_or(0.0),
        loss_lcr: value(lcr_loss)?.unwrap_or(0.0),
        loss_total: total_value,
        valid_ratio,
        pseudo_acc,
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
    };
    state.step += 1;
    Ok(trace)
}

/// Per-pixel argmax class ids for each image of a `[N,C,H,W]` logit tensor.
pub fn argmax_maps(logits: &Tensor) -> Result<Vec<Vec<u8>>> {
    let [n, c, h, w] = logits.dims4()?;
    let plane = h * w;
    let d = logits.data();
    Ok((0..n)
        .map(|b| {
            (0..plane)
                .map(|p| {
                    let mut best = 0;
                    for ch in 1..c {
                        if d[(b * c + ch) * plane + p] > d[(b * c + best) * plane + p] {
                            best = ch;
                        }
                    }
                    best as u8
                })
                .collect()
        })
        .collect())
}

const EVAL_BATCH: usize = 8;

/// Scale-1 predictions of `params` on labeled samples, accumulated into metrics.
pub fn evaluate_params(
    params: &ParamSet,
    model: &ModelConfig,
    samples: &[SegSample],
    tol_frac: f64,
    split: &str,
    step: u64,
) -> Result<MetricsRecord> {
    let mut ev = Evaluator::new(model.num_classes, tol_frac);
    for chunk in samples.chunks(EVAL_BATCH) {
        let images = stack_images(chunk)?;
        let logits = segnet::predict_logits(params, model, &images)?;
        for (s, pred) in chunk.iter().zip(argmax_maps(&logits)?) {
            let gt = s
                .label
                .as_ref()
                .ok_or_else(|| Error::Invalid(format!("sample {} has no label", s.id)))?;
            ev.add(&pred, &gt.data, gt.height, gt.width)?;
        }
    }
    ev.finish(split, step)
}

/// Evaluates the teacher of a checkpoint on a dataset split.
pub fn evaluate(checkpoint: &Checkpoint, dataset: &Dataset, split: Split, tol_frac: f64) -> Result<MetricsRecord> {
    let classes = dataset.manifest().num_classes;
    if checkpoint.model.num_classes != classes {
        return Err(Error::Config(format!(
            "checkpoint predicts {} classes, dataset has {classes}",
            checkpoint.model.num_classes
        )));
    }
    checkpoint.teacher.params.check_compatible(&segnet::init_model(&checkpoint.model)?)?;
    let mut samples = dataset.load_split(split)?;
    if split == Split::Unlabeled {
        for s in &mut samples {
            s.label = Some(dataset.withheld_label(&s.id)?);
        }
    }
    evaluate_params(
        &checkpoint.teacher.params,
        &checkpoint.model,
        &samples,
        tol_frac,
        &split.to_string(),
        checkpoint.step,
    )
}

/// Result of a completed run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: MetricsRecord,
    pub traces: Vec<IterationTrace>,
    pub state: TrainState,
    pub out_dir: PathBuf,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub const METRICS_HEADER: &str = "iter,L_labeled,L_MSWS,L_LCR,valid_ratio,lr,pseudo_acc,val_miou,val_boundary_f";
pub const TRACE_HEADER: &str = "iter,L_labeled,L_MSWS,L_LCR,L_total,valid_ratio,lr,pseudo_acc,wall_ms";

fn create_writer(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_line(w: &mut impl Write, path: &Path, line: &str) -> Result<()> {
    writeln!(w, "{line}").map_err(|e| Error::io(path, e))
}

/// Trains on the dataset at `config.data_dir`, writing artifacts to `config.out_dir`.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let dataset = Dataset::open(&config.data_dir)?;
    let manifest = dataset.manifest().clone();
    let labeled = dataset.load_split(Split::Labeled)?;
    let unlabeled = dataset.load_split(Split::Unlabeled)?;
    let val = dataset.load_split(Split::Val)?;
    let truth: Vec<LabelMap> = unlabeled
        .iter()
        .map(|s| dataset.withheld_label(&s.id))
        .collect::<Result<_>>()?;
    let crop = config.aug.crop_size;
    if crop > manifest.height.min(manifest.width) * 4 {
        return Err(Error::Config(format!(
            "crop {crop} is far larger than the {}x{} images",
            manifest.height, manifest.width
        )));
    }

    let max_iter = config.total_iterations(labeled.len(), unlabeled.len());
    let mut state = TrainState::new(config.clone(), manifest.num_classes, max_iter)?;
    let out = config.out_dir.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let cfg_path = out.join("config.txt");
    fs::write(&cfg_path, config.to_text()).map_err(|e| Error::io(&cfg_path, e))?;
    let metrics_path = out.join("metrics.csv");
    let trace_path = out.join("trace.csv");
    let mut metrics_csv = create_writer(&metrics_path)?;
    let mut trace_csv = create_writer(&trace_path)?;
    write_line(&mut metrics_csv, &metrics_path, METRICS_HEADER)?;
    write_line(&mut trace_csv, &trace_path, TRACE_HEADER)?;

    let semi = config.mode != Mode::SupervisedOnly;
    let mut traces = Vec::with_capacity(max_iter);
    let mut last_eval = None;
    for step in 0..max_iter {
        let li = batch_indices(labeled.len(), config.batch_labeled, step, config.seed, Branch::LabeledOrder);
        let lab: Vec<&SegSample> = li.iter().map(|&i| &labeled[i]).collect();
        let (unl, tru): (Vec<&SegSample>, Vec<&LabelMap>) = if semi && !unlabeled.is_empty() {
            batch_indices(unlabeled.len(), config.batch_unlabeled, step, config.seed, Branch::UnlabeledOrder)
                .into_iter()
                .map(|i| (&unlabeled[i], &truth[i]))
                .unzip()
        } else {
            (Vec::new(), Vec::new())
        };
        let trace = train_step(&mut state, &lab, &unl, Some(&tru))?;
        let done = step + 1;
        let eval_now = done == max_iter || (config.eval_every > 0 && done % config.eval_every == 0);
        let record = if eval_now {
            let r = evaluate_params(&state.teacher.params, &state.model, &val, config.eval_tol_frac, "val", done as u64)?;
            log::info!("step {done}/{max_iter}: val mIoU {:.4}, boundary F {:.4}", r.miou, r.boundary_f);
            Some(r)
        } else {
            None
        };
        write_line(
            &mut metrics_csv,
            &metrics_path,
            &format!(
                "{},{},{},{},{},{},{},{},{}",
                trace.step,
                trace.loss_labeled,
                trace.loss_unlabeled,
                trace.loss_lcr,
                trace.valid_ratio,
                trace.lr,
                fmt_opt(trace.pseudo_acc),
                fmt_opt(record.as_ref().map(|r| r.miou)),
                fmt_opt(record.as_ref().map(|r| r.boundary_f)),
            ),
        )?;
        write_line(
            &mut trace_csv,
            &trace_path,
            &format!(
                "{},{},{},{},{},{},{},{},{:.3}",
                trace.step,
                trace.loss_labeled,
                trace.loss_unlabeled,
                trace.loss_lcr,
                trace.loss_total,
                trace.valid_ratio,
                trace.lr,
                fmt_opt(trace.pseudo_acc),
                trace.wall_ms
            ),
        )?;
        let ckpt_now = done == max_iter || (config.checkpoint_every > 0 && done % config.checkpoint_every == 0);
        if ckpt_now {
            state
                .checkpoint()
                .save(&out.join("checkpoints").join(format!("step_{done}.bin")))?;
        }
        if let Some(r) = record {
            last_eval = Some(r);
        }
        traces.push(trace);
    }
    metrics_csv.flush().map_err(|e| Error::io(&metrics_path, e))?;
    trace_csv.flush().map_err(|e| Error::io(&trace_path, e))?;
    let metrics = match last_eval {
        Some(r) => r,
        None => evaluate_params(&state.teacher.params, &state.model, &val, config.eval_tol_frac, "val", 0)?,
    };
    Ok(TrainOutcome {
        metrics,
        traces,
        state,
        out_dir: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_schedule() {
        assert_eq!(poly_lr(0.01, 0, 100), 0.01);
        assert_eq!(poly_lr(0.01, 100, 100), 0.0);
        assert_eq!(poly_lr(0.01, 150, 100), 0.0);
        assert!((poly_lr(1.0, 50, 100) - 0.5f64.powf(0.9)).abs() < 1e-15);
        assert!((poly_lr(1.0, 50, 100) - 0.5359).abs() < 1e-4);
        for i in 0..99 {
            assert!(poly_lr(1.0, i + 1, 100) < poly_lr(1.0, i, 100));
        }
    }

    #[test]
    fn batches_cover_each_pass() {
        let mut seen: Vec<usize> = (0..5).flat_map(|s| batch_indices(20, 4, s, 3, Branch::LabeledOrder)).collect();
        seen.sort();
        assert_eq!(seen, (0..20).collect::<Vec<_>>());
        assert_eq!(
            batch_indices(20, 4, 7, 3, Branch::LabeledOrder),
            batch_indices(20, 4, 7, 3, Branch::LabeledOrder)
        );
    }

    #[test]
    fn streams_differ_by_branch() {
        let a: u64 = stream(1, 2, Branch::Strong).gen();
        let b: u64 = stream(1, 2, Branch::Mask).gen();
        let c: u64 = stream(1, 3, Branch::Strong).gen();
        assert_ne!(a, b);
        assert_ne!(a, c);
    }
}
