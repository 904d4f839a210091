//! Gate-selected dual-frequency distillation.
//!
//! Two single-band networks are trained independently with hard-label
//! cross entropy. For the dual-band student, every sample picks the
//! single-band branch with the larger winning softmax probability as its
//! teacher; the student trains on `alpha * KL(teacher || student) +
//! (1 - alpha) * CE(student, label)` over concatenated dual-band input.
//! Teachers stay frozen throughout.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::{
    adam_step, build_forward, learning_rate, softmax_f64, update_running_stats, AdamState,
    CheckpointMeta, ForwardOutput, ModelConfig, ModelParams, Tape, PROB_CLAMP,
};
use crate::polsar::{FeatureNorm, Sample};
use crate::rectify::{forward_batch, sdsr_forward};
use crate::seed::derive_seed;

const TAG_MODEL_INIT: u64 = 0x6d6f_64656c;
const TAG_SHUFFLE: u64 = 0x7368_7566;
const TAG_SDSR_TRAIN: u64 = 0x7364_7372;
const TAG_TEACHER_EVAL: u64 = 0x7465_6163;

/// Rectification draws at inference are keyed by the window origin alone,
/// so classification maps are reproducible for a given checkpoint.
pub const SDSR_EVAL_ROOT: u64 = 0x7364_7372_6576;

/// Hard-label cross entropy over softmax probabilities with the 1/M
/// normalization: `-(1/M) * sum_i y_i ln out_i`, probabilities clamped to
/// `[1e-12, 1]`.
pub fn ce_loss(out: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(out.len(), y.len());
    let m = out.len() as f64;
    -out.iter()
        .zip(y)
        .map(|(&p, &yi)| yi * p.clamp(PROB_CLAMP, 1.0).ln())
        .sum::<f64>()
        / m
}

/// [`ce_loss`] against a one-hot label at `class`.
pub fn ce_loss_index(out: &[f64], class: usize) -> f64 {
    -out[class].clamp(PROB_CLAMP, 1.0).ln() / out.len() as f64
}

/// Soft-label divergence `sum_i t_i (ln t_i - ln s_i)` with `0 ln 0 := 0`
/// and no temperature.
pub fn kl_loss(out_t: &[f64], out_s: &[f64]) -> f64 {
    debug_assert_eq!(out_t.len(), out_s.len());
    out_t
        .iter()
        .zip(out_s)
        .filter(|(&t, _)| t > 0.0)
        .map(|(&t, &s)| t * (t.clamp(PROB_CLAMP, 1.0).ln() - s.clamp(PROB_CLAMP, 1.0).ln()))
        .sum()
}

/// `alpha * KL(teacher || student) + (1 - alpha) * CE(student, y)`.
pub fn combined_loss(out_s: &[f64], out_t: &[f64], y: &[f64], alpha: f64) -> f64 {
    alpha * kl_loss(out_t, out_s) + (1.0 - alpha) * ce_loss(out_s, y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Band {
    Band1,
    Band2,
}

/// Per-sample teacher choice with the two winning probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct GateDecision {
    pub chosen: Band,
    pub max1: f64,
    pub max2: f64,
}

/// Picks the dominant branch: band 1 wins ties.
pub fn select_teacher(out1: &[f64], out2: &[f64]) -> GateDecision {
    let max1 = out1.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let max2 = out2.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let chosen = if max1 >= max2 { Band::Band1 } else { Band::Band2 };
    GateDecision { chosen, max1, max2 }
}

/// Per-class gate statistics over one epoch of teacher picks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GateHistogram {
    /// `(band1 picks, band2 picks)` indexed by class.
    pub per_class: Vec<(u64, u64)>,
}

impl GateHistogram {
    fn new(num_classes: usize) -> Self {
        Self { per_class: vec![(0, 0); num_classes] }
    }

    fn record(&mut self, class: usize, band: Band) {
        match band {
            Band::Band1 => self.per_class[class].0 += 1,
            Band::Band2 => self.per_class[class].1 += 1,
        }
    }

    /// CSV rows `class,band1_fraction,band2_fraction`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,band1_fraction,band2_fraction\n");
        for (class, &(b1, b2)) in self.per_class.iter().enumerate() {
            let total = (b1 + b2).max(1) as f64;
            out.push_str(&format!(
                "{class},{:.6},{:.6}\n",
                b1 as f64 / total,
                b2 as f64 / total
            ));
        }
        out
    }
}

/// Everything the training loops need beyond the data.
#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub alpha: f64,
    pub looks: u32,
    pub sdsr: bool,
    pub seed: u64,
}

/// One line of the training-curve log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub val_oa: f64,
}

pub fn curve_to_csv(curve: &[EpochLog]) -> String {
    let mut out = String::from("epoch,loss,val_oa\n");
    for e in curve {
        out.push_str(&format!("{},{:.8},{:.6}\n", e.epoch, e.loss, e.val_oa));
    }
    out
}

/// A trained branch: weights, checkpoint metadata, and its training curve.
pub struct TrainedModel {
    pub params: ModelParams<f32>,
    pub meta: CheckpointMeta,
    pub curve: Vec<EpochLog>,
}

fn shuffled_indices(n: usize, seed: u64, tags: &[u64]) -> Vec<usize> {
    use rand::Rng;
    let mut rng = crate::seed::stream(seed, tags);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..n.saturating_sub(1) {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    idx
}

/// Sequential inference over one block of samples, with rectification
/// when `sdsr` is set. Rectification draws are keyed by each window's
/// origin, so maps are reproducible for a given checkpoint.
pub fn predict_block(
    params: &ModelParams<f32>,
    norm: &FeatureNorm,
    sdsr: bool,
    looks: u32,
    samples: &[Sample],
) -> Result<Vec<u8>> {
    const CHUNK: usize = 32;
    let mut preds = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(CHUNK) {
        let mut tape = Tape::<f32>::new(false);
        let graph = if sdsr {
            let seeds: Vec<u64> = chunk
                .iter()
                .map(|s| derive_seed(SDSR_EVAL_ROOT, &[s.origin.0 as u64, s.origin.1 as u64]))
                .collect();
            sdsr_forward(&mut tape, params, norm, chunk, looks, &seeds, false)?.graph
        } else {
            forward_batch(&mut tape, params, norm, chunk, false)?
        };
        let out = ForwardOutput::from_graph(&tape, &graph);
        preds.extend((0..chunk.len()).map(|b| out.cls_argmax(b) as u8));
    }
    Ok(preds)
}

/// Inference predictions (argmax class per sample), with rectification
/// active when the checkpoint was trained with it. Blocks run in parallel;
/// per-sample generator streams keep results independent of scheduling.
pub fn predict_samples(
    params: &ModelParams<f32>,
    norm: &FeatureNorm,
    sdsr: bool,
    looks: u32,
    samples: &[Sample],
) -> Result<Vec<u8>> {
    const BLOCK: usize = 64;
    let results: Vec<Vec<u8>> = samples
        .par_chunks(BLOCK)
        .map(|block| predict_block(params, norm, sdsr, looks, block))
        .collect::<Result<_>>()?;
    Ok(results.into_iter().flatten().collect())
}

/// Overall accuracy of a model on labeled samples.
pub fn evaluate_oa(
    params: &ModelParams<f32>,
    norm: &FeatureNorm,
    sdsr: bool,
    looks: u32,
    samples: &[Sample],
) -> Result<f64> {
    if samples.is_empty() {
        return Ok(f64::NAN);
    }
    let preds = predict_samples(params, norm, sdsr, looks, samples)?;
    let hits = preds
        .iter()
        .zip(samples)
        .filter(|(&p, s)| p == s.label)
        .count();
    Ok(hits as f64 / samples.len() as f64)
}

/// Teacher softmax outputs for every sample, recomputed in inference mode
/// with rectification active. Draw streams are keyed by (run seed, band,
/// epoch, sample index) so each epoch sees fresh but reproducible draws.
fn teacher_outputs(
    params: &ModelParams<f32>,
    meta: &CheckpointMeta,
    samples: &[Sample],
    band_tag: u64,
    epoch: usize,
    run_seed: u64,
) -> Result<Vec<Vec<f64>>> {
    const CHUNK: usize = 32;
    let chunks: Vec<(usize, &[Sample])> = samples
        .chunks(CHUNK)
        .enumerate()
        .map(|(i, c)| (i * CHUNK, c))
        .collect();
    let results: Vec<(usize, Vec<Vec<f64>>)> = chunks
        .into_par_iter()
        .map(|(base, chunk)| -> Result<(usize, Vec<Vec<f64>>)> {
            let mut tape = Tape::<f32>::new(false);
            let graph = if meta.sdsr {
                let seeds: Vec<u64> = (0..chunk.len())
                    .map(|i| {
                        derive_seed(
                            run_seed,
                            &[TAG_TEACHER_EVAL, band_tag, epoch as u64, (base + i) as u64],
                        )
                    })
                    .collect();
                sdsr_forward(&mut tape, params, &meta.norm, chunk, meta.looks, &seeds, false)?
                    .graph
            } else {
                forward_batch(&mut tape, params, &meta.norm, chunk, false)?
            };
            let out = ForwardOutput::from_graph(&tape, &graph);
            let probs = (0..chunk.len()).map(|b| out.cls_probs_of(b)).collect();
            Ok((base, probs))
        })
        .collect::<Result<_>>()?;
    let mut all = vec![Vec::new(); samples.len()];
    for (base, chunk) in results {
        for (i, p) in chunk.into_iter().enumerate() {
            all[base + i] = p;
        }
    }
    Ok(all)
}

fn check_finite_loss(loss: f64, epoch: usize) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::numerical(format!(
            "training diverged at epoch {epoch}: loss is {loss}"
        )));
    }
    Ok(())
}

/// Trains one single-band branch with hard-label cross entropy (with
/// rectification when `settings.sdsr`). `band_index` is 0 or 1 and only
/// seeds the substreams and tags the checkpoint.
pub fn train_teacher(
    config: ModelConfig,
    train: &[Sample],
    val: &[Sample],
    band_index: usize,
    settings: &TrainSettings,
) -> Result<TrainedModel> {
    if train.is_empty() {
        return Err(Error::validation("empty training set"));
    }
    config.validate()?;
    let norm = FeatureNorm::fit(train)?;
    let mut params = ModelParams::<f32>::init(
        config.clone(),
        derive_seed(settings.seed, &[TAG_MODEL_INIT, band_index as u64]),
    )?;
    let mut adam = AdamState::new(&params);
    let mut curve = Vec::with_capacity(settings.epochs);

    for epoch in 0..settings.epochs {
        let order = shuffled_indices(
            train.len(),
            settings.seed,
            &[TAG_SHUFFLE, band_index as u64, epoch as u64],
        );
        let lr = learning_rate(settings.base_lr, epoch);
        let mut epoch_loss = 0.0;
        for batch_ids in order.chunks(settings.batch_size) {
            let batch: Vec<Sample> = batch_ids.iter().map(|&i| train[i].clone()).collect();
            let targets: Vec<usize> = batch.iter().map(|s| usize::from(s.label)).collect();
            let mut tape = Tape::<f32>::new(true);
            let graph = if settings.sdsr {
                let seeds: Vec<u64> = batch_ids
                    .iter()
                    .map(|&i| {
                        derive_seed(
                            settings.seed,
                            &[TAG_SDSR_TRAIN, band_index as u64, epoch as u64, i as u64],
                        )
                    })
                    .collect();
                sdsr_forward(&mut tape, &params, &norm, &batch, settings.looks, &seeds, true)?
                    .graph
            } else {
                forward_batch(&mut tape, &params, &norm, &batch, true)?
            };
            let loss = tape.ce_loss_mean(graph.cls_probs, &targets, "ce")?;
            let loss_value = f64::from(tape.value(loss)[0]);
            check_finite_loss(loss_value, epoch)?;
            epoch_loss += loss_value * batch.len() as f64;
            let grads = tape.backward(loss)?;
            adam_step(&mut params, &graph.param_leaves, &grads, &mut adam, lr)?;
            update_running_stats(&mut params, &tape, &graph);
        }
        epoch_loss /= train.len() as f64;
        let val_oa = evaluate_oa(&params, &norm, settings.sdsr, settings.looks, val)?;
        curve.push(EpochLog { epoch, loss: epoch_loss, val_oa });
    }

    let meta = CheckpointMeta {
        config,
        norm,
        input: format!("band{}", band_index + 1),
        looks: settings.looks,
        sdsr: settings.sdsr,
        seed: settings.seed,
    };
    Ok(TrainedModel { params, meta, curve })
}

/// Checks that two single-band sample sets cover the same windows of the
/// same labeled scene.
fn check_aligned(band1: &[Sample], band2: &[Sample]) -> Result<()> {
    if band1.len() != band2.len() {
        return Err(Error::validation(format!(
            "misaligned datasets: {} vs {} samples",
            band1.len(),
            band2.len()
        )));
    }
    for (a, b) in band1.iter().zip(band2) {
        if a.origin != b.origin || a.label != b.label || a.window != b.window {
            return Err(Error::validation(format!(
                "misaligned datasets: window at {:?} (label {}) vs {:?} (label {})",
                a.origin, a.label, b.origin, b.label
            )));
        }
    }
    Ok(())
}

/// Trains the dual-band student against two frozen teachers. Returns the
/// student and the final epoch's gate histogram.
#[allow(clippy::too_many_arguments)]
pub fn train_student(
    config: ModelConfig,
    train1: &[Sample],
    train2: &[Sample],
    val1: &[Sample],
    val2: &[Sample],
    teacher1: (&ModelParams<f32>, &CheckpointMeta),
    teacher2: (&ModelParams<f32>, &CheckpointMeta),
    settings: &TrainSettings,
) -> Result<(TrainedModel, GateHistogram)> {
    check_aligned(train1, train2)?;
    check_aligned(val1, val2)?;
    if !(0.0..=1.0).contains(&settings.alpha) {
        return Err(Error::config(format!(
            "alpha {} outside [0, 1]",
            settings.alpha
        )));
    }
    config.validate()?;
    let num_classes = config.num_classes;

    let train: Vec<Sample> = train1
        .iter()
        .zip(train2)
        .map(|(a, b)| Sample::concat_bands(a, b))
        .collect::<Result<_>>()?;
    let val: Vec<Sample> = val1
        .iter()
        .zip(val2)
        .map(|(a, b)| Sample::concat_bands(a, b))
        .collect::<Result<_>>()?;

    let norm = FeatureNorm::fit(&train)?;
    let mut params = ModelParams::<f32>::init(
        config.clone(),
        derive_seed(settings.seed, &[TAG_MODEL_INIT, 2]),
    )?;
    let mut adam = AdamState::new(&params);
    let mut curve = Vec::with_capacity(settings.epochs);
    let mut histogram = GateHistogram::new(num_classes);
    let use_teachers = settings.alpha > 0.0;

    for epoch in 0..settings.epochs {
        // Per-sample soft labels from the dominant branch, refreshed every
        // epoch from the frozen teachers.
        let mut gates: Vec<Option<GateDecision>> = vec![None; train.len()];
        let mut soft: Vec<Vec<f64>> = vec![Vec::new(); train.len()];
        if use_teachers {
            let out1 = teacher_outputs(teacher1.0, teacher1.1, train1, 0, epoch, settings.seed)?;
            let out2 = teacher_outputs(teacher2.0, teacher2.1, train2, 1, epoch, settings.seed)?;
            histogram = GateHistogram::new(num_classes);
            for i in 0..train.len() {
                let gate = select_teacher(&out1[i], &out2[i]);
                histogram.record(usize::from(train[i].label), gate.chosen);
                soft[i] = match gate.chosen {
                    Band::Band1 => out1[i].clone(),
                    Band::Band2 => out2[i].clone(),
                };
                gates[i] = Some(gate);
            }
        }

        let order = shuffled_indices(train.len(), settings.seed, &[TAG_SHUFFLE, 2, epoch as u64]);
        let lr = learning_rate(settings.base_lr, epoch);
        let mut epoch_loss = 0.0;
        for batch_ids in order.chunks(settings.batch_size) {
            let batch: Vec<Sample> = batch_ids.iter().map(|&i| train[i].clone()).collect();
            let targets: Vec<usize> = batch.iter().map(|s| usize::from(s.label)).collect();
            let mut tape = Tape::<f32>::new(true);
            let graph = if settings.sdsr {
                let seeds: Vec<u64> = batch_ids
                    .iter()
                    .map(|&i| {
                        derive_seed(
                            settings.seed,
                            &[TAG_SDSR_TRAIN, 2, epoch as u64, i as u64],
                        )
                    })
                    .collect();
                sdsr_forward(&mut tape, &params, &norm, &batch, settings.looks, &seeds, true)?
                    .graph
            } else {
                forward_batch(&mut tape, &params, &norm, &batch, true)?
            };
            let ce = tape.ce_loss_mean(graph.cls_probs, &targets, "ce")?;
            let loss = if use_teachers {
                let teacher_probs: Vec<f64> = batch_ids
                    .iter()
                    .flat_map(|&i| soft[i].iter().copied())
                    .collect();
                let kl = tape.kl_loss_mean(graph.cls_probs, &teacher_probs, "kl")?;
                tape.affine_combine(kl, ce, settings.alpha, "combined")?
            } else {
                ce
            };
            let loss_value = f64::from(tape.value(loss)[0]);
            check_finite_loss(loss_value, epoch)?;
            epoch_loss += loss_value * batch.len() as f64;
            let grads = tape.backward(loss)?;
            adam_step(&mut params, &graph.param_leaves, &grads, &mut adam, lr)?;
            update_running_stats(&mut params, &tape, &graph);
        }
        epoch_loss /= train.len() as f64;
        let val_oa = evaluate_oa(&params, &norm, settings.sdsr, settings.looks, &val)?;
        curve.push(EpochLog { epoch, loss: epoch_loss, val_oa });
    }

    let meta = CheckpointMeta {
        config,
        norm,
        input: "dual".into(),
        looks: settings.looks,
        sdsr: settings.sdsr,
        seed: settings.seed,
    };
    Ok((TrainedModel { params, meta, curve }, histogram))
}
