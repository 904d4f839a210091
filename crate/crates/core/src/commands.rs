//! Command implementations behind the CLI: scene synthesis, teacher and
//! student training, full-scene evaluation, map rendering, and the
//! ablation ladder with the balance-factor sweep.
//!
//! Every command validates its inputs up front, writes its outputs into a
//! temporary directory next to the destination, and moves the finished
//! files into place, so interrupted runs never leave partial artifacts.
//! Outputs contain no timestamps: re-running a command with the same seed
//! reproduces byte-identical files.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::RunConfig;
use crate::distill::{
    curve_to_csv, evaluate_oa, predict_block, train_student, train_teacher, TrainSettings,
    TrainedModel,
};
use crate::error::{Error, Result};
use crate::formats::{read_pgm, read_scene, write_pgm, write_ppm, write_scene, Scene};
use crate::metrics::{accumulate, oa_aa_kappa, render_map, Metrics};
use crate::nn::{checkpoint, CheckpointMeta, ModelParams};
use crate::polsar::{extract_samples, window_for_pixel, Sample, UNLABELED};
use crate::scene::{generate_scene, SceneSpec};
use crate::seed::stream;

const TAG_SPLIT: u64 = 0x73706c_6974;

/// Stages output files in a temp dir beside `out_dir`, then moves each into
/// place only after the whole command succeeded.
fn with_staging(out_dir: &Path, f: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let tmp = tempfile::Builder::new()
        .prefix(".staging-")
        .tempdir_in(out_dir)
        .map_err(Error::Io)?;
    f(tmp.path())?;
    for entry in fs::read_dir(tmp.path())? {
        let entry = entry?;
        let dest = out_dir.join(entry.file_name());
        if dest.exists() {
            fs::remove_file(&dest)?;
        }
        fs::rename(entry.path(), dest)?;
    }
    Ok(())
}

/// `synth`: generates a dual-band scene from a spec file and writes the
/// PCV1 bands, PGM labels, manifest, and the resolved spec.
pub fn cmd_synth(spec_path: &Path, out_dir: &Path, seed: Option<u64>) -> Result<()> {
    let text = fs::read_to_string(spec_path)
        .map_err(|e| Error::config(format!("cannot read spec {}: {e}", spec_path.display())))?;
    let mut spec = SceneSpec::from_json(&text)?;
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    let (band1, band2, labels) = generate_scene(&spec)?;
    with_staging(out_dir, |tmp| {
        write_scene(tmp, &band1, &band2, &labels, &spec.class_names, &spec.palette)?;
        fs::write(tmp.join("spec.json"), spec.to_json()?)?;
        Ok(())
    })
}

/// Deterministic per-class split into train and validation sample sets.
/// Returns indices into the extraction order so both bands stay aligned.
fn split_indices(
    samples: &[Sample],
    num_classes: usize,
    train_per_class: usize,
    val_per_class: usize,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, s) in samples.iter().enumerate() {
        by_class[usize::from(s.label)].push(i);
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (class, mut ids) in by_class.into_iter().enumerate() {
        if ids.is_empty() {
            return Err(Error::validation(format!(
                "class {class} has no labeled windows to sample from"
            )));
        }
        use rand::Rng;
        let mut rng = stream(seed, &[TAG_SPLIT, class as u64]);
        for i in 0..ids.len() - 1 {
            let j = rng.random_range(i..ids.len());
            ids.swap(i, j);
        }
        let (n_train, n_val) = if ids.len() >= train_per_class + val_per_class {
            (train_per_class, val_per_class)
        } else {
            // Scarce class: 80/20 split of whatever exists.
            let t = ((ids.len() * 4) / 5).max(1);
            (t, ids.len() - t)
        };
        train.extend_from_slice(&ids[..n_train]);
        val.extend_from_slice(&ids[n_train..n_train + n_val]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

struct SceneData {
    scene: Scene,
    train1: Vec<Sample>,
    train2: Vec<Sample>,
    val1: Vec<Sample>,
    val2: Vec<Sample>,
}

fn load_training_data(config: &RunConfig, scene_path: &Path) -> Result<SceneData> {
    let scene = read_scene(&RunConfig::manifest_path(scene_path))?;
    scene.band1.validate_labels(scene.num_classes())?;
    let all1 = extract_samples(&scene.band1, config.window, config.stride)?;
    let all2 = extract_samples(&scene.band2, config.window, config.stride)?;
    let (train_ids, val_ids) = split_indices(
        &all1,
        scene.num_classes(),
        config.train_per_class,
        config.val_per_class,
        config.seed,
    )?;
    let pick = |ids: &[usize], from: &[Sample]| -> Vec<Sample> {
        ids.iter().map(|&i| from[i].clone()).collect()
    };
    Ok(SceneData {
        train1: pick(&train_ids, &all1),
        train2: pick(&train_ids, &all2),
        val1: pick(&val_ids, &all1),
        val2: pick(&val_ids, &all2),
        scene,
    })
}

fn write_model(tmp: &Path, stem: &str, model: &TrainedModel) -> Result<()> {
    checkpoint::save(&tmp.join(format!("{stem}.skd")), &model.params, &model.meta)?;
    fs::write(tmp.join(format!("{stem}_log.csv")), curve_to_csv(&model.curve))?;
    Ok(())
}

/// `train-teacher`: trains one single-band branch and writes
/// `teacher_band{b}.skd` plus its training-curve log.
pub fn cmd_train_teacher(config: &RunConfig, band: usize, out_dir: &Path) -> Result<()> {
    if band != 1 && band != 2 {
        return Err(Error::config(format!("band must be 1 or 2, got {band}")));
    }
    let data = load_training_data(config, &config.scene)?;
    let (train, val) = if band == 1 {
        (&data.train1, &data.val1)
    } else {
        (&data.train2, &data.val2)
    };
    let model_config = config.model_config(9, data.scene.num_classes());
    let model = train_teacher(model_config, train, val, band - 1, &config.train_settings())?;
    with_staging(out_dir, |tmp| write_model(tmp, &format!("teacher_band{band}"), &model))
}

fn load_checkpoint(path: &Path) -> Result<(ModelParams<f32>, CheckpointMeta)> {
    checkpoint::load(path)
}

/// `train-student`: distills the two frozen teachers into the dual-band
/// student; writes `student.skd`, its log, and the gate histogram.
pub fn cmd_train_student(config: &RunConfig, out_dir: &Path) -> Result<()> {
    let data = load_training_data(config, &config.scene)?;
    let t1_path = config
        .teacher1
        .clone()
        .unwrap_or_else(|| out_dir.join("teacher_band1.skd"));
    let t2_path = config
        .teacher2
        .clone()
        .unwrap_or_else(|| out_dir.join("teacher_band2.skd"));
    let (t1, m1) = load_checkpoint(&t1_path)?;
    let (t2, m2) = load_checkpoint(&t2_path)?;
    let model_config = config.model_config(18, data.scene.num_classes());
    let (model, histogram) = train_student(
        model_config,
        &data.train1,
        &data.train2,
        &data.val1,
        &data.val2,
        (&t1, &m1),
        (&t2, &m2),
        &config.train_settings(),
    )?;
    with_staging(out_dir, |tmp| {
        write_model(tmp, "student", &model)?;
        fs::write(tmp.join("gate_histogram.csv"), histogram.to_csv())?;
        Ok(())
    })
}

/// Sliding-window predictions for every pixel of the scene, with clipped
/// windows at the borders. Row blocks run in parallel.
pub fn predict_scene(
    params: &ModelParams<f32>,
    meta: &CheckpointMeta,
    scene: &Scene,
) -> Result<Vec<u8>> {
    let (h, w) = (scene.band1.height, scene.band1.width);
    let window = meta.config.window;
    if window > h.min(w) {
        return Err(Error::validation(format!(
            "window {window} does not fit the {h}x{w} scene"
        )));
    }
    let rows: Vec<Vec<u8>> = (0..h)
        .into_par_iter()
        .map(|r| -> Result<Vec<u8>> {
            let mut windows = Vec::with_capacity(w);
            for c in 0..w {
                let sample = match meta.input.as_str() {
                    "band1" => window_for_pixel(&scene.band1, r, c, window),
                    "band2" => window_for_pixel(&scene.band2, r, c, window),
                    "dual" => Sample::concat_bands(
                        &window_for_pixel(&scene.band1, r, c, window),
                        &window_for_pixel(&scene.band2, r, c, window),
                    )?,
                    other => {
                        return Err(Error::format(format!(
                            "checkpoint declares unknown input '{other}'"
                        )))
                    }
                };
                windows.push(sample);
            }
            predict_block(params, &meta.norm, meta.sdsr, meta.looks, &windows)
        })
        .collect::<Result<_>>()?;
    Ok(rows.into_iter().flatten().collect())
}

/// `eval`: full-scene inference with one checkpoint; writes the metrics
/// report, the prediction raster, and the rendered map (PPM and PNG).
pub fn cmd_eval(checkpoint_path: &Path, scene_path: &Path, out_dir: &Path) -> Result<()> {
    let (params, meta) = load_checkpoint(checkpoint_path)?;
    let scene = read_scene(&RunConfig::manifest_path(scene_path))?;
    if meta.config.num_classes != scene.num_classes() {
        return Err(Error::validation(format!(
            "checkpoint has {} classes but the scene declares {}",
            meta.config.num_classes,
            scene.num_classes()
        )));
    }
    let preds = predict_scene(&params, &meta, &scene)?;
    let labels = scene.band1.labels.as_deref().unwrap_or(&[]);
    let cm = accumulate(&preds, labels, scene.num_classes())?;
    let metrics = oa_aa_kappa(&cm)?;
    let rgb = render_map(&preds, &scene.manifest.palette)?;
    let (h, w) = (scene.band1.height, scene.band1.width);
    with_staging(out_dir, |tmp| {
        fs::write(
            tmp.join("metrics.json"),
            serde_json::to_string_pretty(&metrics)? + "\n",
        )?;
        write_pgm(&tmp.join("predictions.pgm"), &preds, h, w)?;
        write_ppm(&tmp.join("map.ppm"), &rgb, h, w)?;
        image::save_buffer(
            tmp.join("map.png"),
            &rgb,
            w as u32,
            h as u32,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|e| Error::format(format!("png encoding failed: {e}")))?;
        Ok(())
    })
}

/// `render-map`: colors an 8-bit class raster (predictions or ground
/// truth; 255 renders black) with the scene palette.
pub fn cmd_render_map(raster_path: &Path, scene_path: &Path, out_dir: &Path) -> Result<()> {
    let (classes, h, w) = read_pgm(raster_path)?;
    let scene = read_scene(&RunConfig::manifest_path(scene_path))?;
    let rgb = render_map(&classes, &scene.manifest.palette)?;
    with_staging(out_dir, |tmp| {
        write_ppm(&tmp.join("map.ppm"), &rgb, h, w)?;
        image::save_buffer(
            tmp.join("map.png"),
            &rgb,
            w as u32,
            h as u32,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|e| Error::format(format!("png encoding failed: {e}")))?;
        Ok(())
    })
}

/// Which ablation variants to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Baseline,
    Sdsr,
    Cat,
    Dgsd,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::Sdsr, Variant::Cat, Variant::Dgsd];

    pub fn parse_list(text: &str) -> Result<Vec<Variant>> {
        text.split(',')
            .map(|t| match t.trim() {
                "baseline" => Ok(Variant::Baseline),
                "sdsr" => Ok(Variant::Sdsr),
                "cat" => Ok(Variant::Cat),
                "dgsd" => Ok(Variant::Dgsd),
                other => Err(Error::config(format!(
                    "unknown variant '{other}' (expected baseline, sdsr, cat, dgsd)"
                ))),
            })
            .collect()
    }

    fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Sdsr => "baseline+SDSR",
            Variant::Cat => "baseline+SDSR+cat",
            Variant::Dgsd => "baseline+SDSR+DGSD",
        }
    }
}

#[derive(Default, Clone)]
struct BandMetrics {
    band1: Option<Metrics>,
    band2: Option<Metrics>,
    dual: Option<Metrics>,
}

fn val_metrics(
    params: &ModelParams<f32>,
    meta: &CheckpointMeta,
    val: &[Sample],
    num_classes: usize,
) -> Result<Metrics> {
    let preds = crate::distill::predict_samples(params, &meta.norm, meta.sdsr, meta.looks, val)?;
    let labels: Vec<u8> = val.iter().map(|s| s.label).collect();
    oa_aa_kappa(&accumulate(&preds, &labels, num_classes)?)
}

fn metrics_cells(m: &Option<Metrics>) -> String {
    match m {
        None => ",,".into(),
        Some(m) => format!(
            "{:.6},{:.6},{}",
            m.oa,
            m.aa,
            m.kappa.map_or("undefined".into(), |k| format!("{k:.6}"))
        ),
    }
}

/// `ablate`: the module ladder (baseline, +SDSR, +SDSR+cat, +SDSR+DGSD)
/// over every configured scene, plus the balance-factor sweep
/// alpha in {0.0, 0.1, ..., 1.0} on the first scene. Emits one CSV.
pub fn cmd_ablate(
    config: &RunConfig,
    out_dir: &Path,
    variants: &[Variant],
    alpha_sweep: bool,
) -> Result<()> {
    let scenes: Vec<PathBuf> = if config.ablate_scenes.is_empty() {
        vec![config.scene.clone()]
    } else {
        config.ablate_scenes.clone()
    };

    let mut csv = String::from(
        "scene,variant,alpha,band1_oa,band1_aa,band1_kappa,\
         band2_oa,band2_aa,band2_kappa,dual_oa,dual_aa,dual_kappa\n",
    );

    for (scene_idx, scene_path) in scenes.iter().enumerate() {
        let data = load_training_data(config, scene_path)?;
        let m = data.scene.num_classes();
        let scene_name = scene_path
            .file_name()
            .map_or_else(|| scene_path.display().to_string(), |n| n.to_string_lossy().into_owned());

        let mut sdsr_teachers: Option<(TrainedModel, TrainedModel)> = None;
        let train_pair = |settings: &TrainSettings| -> Result<(TrainedModel, TrainedModel)> {
            let cfg = config.model_config(9, m);
            let t1 = train_teacher(cfg.clone(), &data.train1, &data.val1, 0, settings)?;
            let t2 = train_teacher(cfg, &data.train2, &data.val2, 1, settings)?;
            Ok((t1, t2))
        };

        for &variant in variants {
            let mut row = BandMetrics::default();
            match variant {
                Variant::Baseline => {
                    let mut settings = config.train_settings();
                    settings.sdsr = false;
                    let (t1, t2) = train_pair(&settings)?;
                    row.band1 = Some(val_metrics(&t1.params, &t1.meta, &data.val1, m)?);
                    row.band2 = Some(val_metrics(&t2.params, &t2.meta, &data.val2, m)?);
                }
                Variant::Sdsr => {
                    let mut settings = config.train_settings();
                    settings.sdsr = true;
                    let (t1, t2) = train_pair(&settings)?;
                    row.band1 = Some(val_metrics(&t1.params, &t1.meta, &data.val1, m)?);
                    row.band2 = Some(val_metrics(&t2.params, &t2.meta, &data.val2, m)?);
                    sdsr_teachers = Some((t1, t2));
                }
                Variant::Cat => {
                    // Concatenation baseline: the student architecture
                    // trained on stacked bands with hard labels only.
                    let mut settings = config.train_settings();
                    settings.sdsr = true;
                    settings.alpha = 0.0;
                    let (t1, t2) = teachers_for(&mut sdsr_teachers, &train_pair, config)?;
                    let (model, _) = train_student(
                        config.model_config(18, m),
                        &data.train1,
                        &data.train2,
                        &data.val1,
                        &data.val2,
                        (&t1.params, &t1.meta),
                        (&t2.params, &t2.meta),
                        &settings,
                    )?;
                    let val: Vec<Sample> = data
                        .val1
                        .iter()
                        .zip(&data.val2)
                        .map(|(a, b)| Sample::concat_bands(a, b))
                        .collect::<Result<_>>()?;
                    row.dual = Some(val_metrics(&model.params, &model.meta, &val, m)?);
                }
                Variant::Dgsd => {
                    let mut settings = config.train_settings();
                    settings.sdsr = true;
                    let (t1, t2) = teachers_for(&mut sdsr_teachers, &train_pair, config)?;
                    let (model, histogram) = train_student(
                        config.model_config(18, m),
                        &data.train1,
                        &data.train2,
                        &data.val1,
                        &data.val2,
                        (&t1.params, &t1.meta),
                        (&t2.params, &t2.meta),
                        &settings,
                    )?;
                    let val: Vec<Sample> = data
                        .val1
                        .iter()
                        .zip(&data.val2)
                        .map(|(a, b)| Sample::concat_bands(a, b))
                        .collect::<Result<_>>()?;
                    row.dual = Some(val_metrics(&model.params, &model.meta, &val, m)?);
                    if scene_idx == 0 {
                        with_staging(out_dir, |tmp| {
                            fs::write(tmp.join("gate_histogram.csv"), histogram.to_csv())?;
                            Ok(())
                        })?;
                    }
                }
            }
            csv.push_str(&format!(
                "{scene_name},{},,{},{},{}\n",
                variant.name(),
                metrics_cells(&row.band1),
                metrics_cells(&row.band2),
                metrics_cells(&row.dual),
            ));
        }

        // Balance-factor sweep on the first scene only.
        if alpha_sweep && scene_idx == 0 {
            let (t1, t2) = teachers_for(&mut sdsr_teachers, &train_pair, config)?;
            for step in 0..=10 {
                let alpha = f64::from(step) / 10.0;
                let mut settings = config.train_settings();
                settings.sdsr = true;
                settings.alpha = alpha;
                let (model, _) = train_student(
                    config.model_config(18, m),
                    &data.train1,
                    &data.train2,
                    &data.val1,
                    &data.val2,
                    (&t1.params, &t1.meta),
                    (&t2.params, &t2.meta),
                    &settings,
                )?;
                let val: Vec<Sample> = data
                    .val1
                    .iter()
                    .zip(&data.val2)
                    .map(|(a, b)| Sample::concat_bands(a, b))
                    .collect::<Result<_>>()?;
                let metrics = val_metrics(&model.params, &model.meta, &val, m)?;
                csv.push_str(&format!(
                    "{scene_name},alpha,{alpha:.1},,,,,,,{}\n",
                    metrics_cells(&Some(metrics)),
                ));
            }
        }
    }

    with_staging(out_dir, |tmp| {
        fs::write(tmp.join("ablation.csv"), &csv)?;
        Ok(())
    })
}

/// Lazily trains (or reuses) the SDSR teacher pair needed by the student
/// variants.
fn teachers_for<'a>(
    cache: &'a mut Option<(TrainedModel, TrainedModel)>,
    train_pair: &dyn Fn(&TrainSettings) -> Result<(TrainedModel, TrainedModel)>,
    config: &RunConfig,
) -> Result<(&'a TrainedModel, &'a TrainedModel)> {
    if cache.is_none() {
        let mut settings = config.train_settings();
        settings.sdsr = true;
        *cache = Some(train_pair(&settings)?);
    }
    let (t1, t2) = cache.as_ref().expect("teacher cache populated");
    Ok((t1, t2))
}

/// Quick OA of a checkpoint on a labeled sample set (used by tests and the
/// acceptance suite).
pub fn checkpoint_oa(
    params: &ModelParams<f32>,
    meta: &CheckpointMeta,
    samples: &[Sample],
) -> Result<f64> {
    evaluate_oa(params, &meta.norm, meta.sdsr, meta.looks, samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polsar::CHANNELS;

    fn sample_with(label: u8, origin: (usize, usize)) -> Sample {
        Sample {
            patch: vec![0.5; 4 * CHANNELS],
            window: 2,
            channels: CHANNELS,
            label,
            origin,
            band_tag: "b1".into(),
        }
    }

    #[test]
    fn split_is_deterministic_and_per_class() {
        let samples: Vec<Sample> = (0..30)
            .map(|i| sample_with((i % 3) as u8, (i, 0)))
            .collect();
        let (train, val) = split_indices(&samples, 3, 5, 2, 9).unwrap();
        assert_eq!(train.len(), 15);
        assert_eq!(val.len(), 6);
        let again = split_indices(&samples, 3, 5, 2, 9).unwrap();
        assert_eq!((train.clone(), val.clone()), again);
        // No overlap.
        assert!(train.iter().all(|i| !val.contains(i)));
        // Per-class counts.
        for class in 0..3u8 {
            let n = train.iter().filter(|&&i| samples[i].label == class).count();
            assert_eq!(n, 5);
        }
    }

    #[test]
    fn split_handles_scarce_classes() {
        let mut samples: Vec<Sample> = (0..20).map(|i| sample_with(0, (i, 0))).collect();
        samples.push(sample_with(1, (99, 0)));
        samples.push(sample_with(1, (99, 1)));
        let (train, val) = split_indices(&samples, 2, 10, 5, 1).unwrap();
        let class1_train = train.iter().filter(|&&i| samples[i].label == 1).count();
        let class1_val = val.iter().filter(|&&i| samples[i].label == 1).count();
        assert_eq!(class1_train + class1_val, 2);
        assert!(class1_train >= 1);
    }

    #[test]
    fn variant_parsing() {
        let v = Variant::parse_list("baseline, sdsr,dgsd").unwrap();
        assert_eq!(v, vec![Variant::Baseline, Variant::Sdsr, Variant::Dgsd]);
        assert!(Variant::parse_list("nope").is_err());
    }
}
