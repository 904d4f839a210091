//! Statistical sample rectification.
//!
//! A first inference pass scores every patch with the shared classifier
//! head; the fraction of patches agreeing with the class token sets the
//! sample's purity r and the retained pixel budget topK = r * s^2. Pixels
//! are ranked by Wishart distance to the sample's mean covariance: the
//! topK closest are kept bit-identical, the rest are regenerated as
//! multilook draws around that center, so the rectified sample keeps its
//! shape and batch processing is preserved. A second pass runs on the
//! rectified, re-normalized sample; only that pass records gradients.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{build_forward, ForwardGraph, ForwardOutput, ModelParams, Scalar, Tape};
use crate::polsar::{vectorize_covariance, FeatureNorm, HermitianCov3, Sample, CHANNELS};
use crate::wishart::{sample_center, CenterFactor, WishartParams};

/// Purity of one sample: agreement fraction r and the pixel budget topK.
#[derive(Debug, Clone, PartialEq)]
pub struct PurityReport {
    /// Fraction of patches whose argmax class equals the class token's.
    pub purity: f64,
    /// Retained pixel count, `clamp(round(r * s^2), 1, s^2)`.
    pub top_k: usize,
    /// Per-patch agreement mask.
    pub agreeing: Vec<bool>,
}

/// Purity of sample `b` in a batched forward output. Argmax ties break
/// toward the lower class index.
pub fn assess_purity(fwd: &ForwardOutput, b: usize, window: usize) -> PurityReport {
    let cls = fwd.cls_argmax(b);
    let agreeing: Vec<bool> = (0..fwd.num_patches)
        .map(|n| fwd.patch_argmax(b, n) == cls)
        .collect();
    let agree = agreeing.iter().filter(|&&a| a).count();
    let purity = agree as f64 / fwd.num_patches as f64;
    let pixels = window * window;
    let top_k = (purity * pixels as f64).round().clamp(1.0, pixels as f64) as usize;
    PurityReport { purity, top_k, agreeing }
}

/// Regularized per-band Wishart parameters centered on the sample mean.
pub fn rectification_params(sample: &Sample, looks: u32) -> Result<Vec<WishartParams>> {
    (0..sample.bands())
        .map(|b| WishartParams::new(looks, sample_center(sample, b)?))
        .collect()
}

/// Indices (ascending) of the `top_k` pixels closest to the sample center
/// in Wishart distance, summed over bands for dual-band samples. Distance
/// ties break toward the lower row-major pixel index.
pub fn select_pixels(
    sample: &Sample,
    centers: &[HermitianCov3],
    top_k: usize,
) -> Result<Vec<usize>> {
    if centers.len() != sample.bands() {
        return Err(Error::validation(format!(
            "{} centers for a {}-band sample",
            centers.len(),
            sample.bands()
        )));
    }
    let pixels = sample.pixels();
    if !(1..=pixels).contains(&top_k) {
        return Err(Error::validation(format!(
            "top_k {top_k} outside 1..={pixels}"
        )));
    }
    let factors: Vec<CenterFactor> = centers.iter().map(CenterFactor::new).collect::<Result<_>>()?;
    let mut ranked: Vec<(f64, usize)> = (0..pixels)
        .map(|i| {
            let mut d = 0.0;
            for (b, f) in factors.iter().enumerate() {
                d += f.distance(&sample.pixel_covariance(i, b)?);
            }
            Ok((d, i))
        })
        .collect::<Result<_>>()?;
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut retained: Vec<usize> = ranked[..top_k].iter().map(|&(_, i)| i).collect();
    retained.sort_unstable();
    Ok(retained)
}

/// A sample after rectification: retained pixels are bit-identical to the
/// input, the rest were regenerated.
#[derive(Debug, Clone, PartialEq)]
pub struct RectifiedSample {
    pub patch: Vec<f64>,
    pub retained: Vec<bool>,
    pub generated: usize,
}

/// Replaces the non-retained pixels of `sample` with multilook draws from
/// the per-band sample centers in `params` (one per band, typically from
/// [`rectification_params`]). Draw order is row-major by pixel, band 0
/// first, so a given rng seed yields one well-defined rectification.
pub fn rectify(
    sample: &Sample,
    report: &PurityReport,
    params: &[WishartParams],
    rng: &mut impl Rng,
) -> Result<RectifiedSample> {
    if params.len() != sample.bands() {
        return Err(Error::validation(format!(
            "{} parameter sets for a {}-band sample",
            params.len(),
            sample.bands()
        )));
    }
    let centers: Vec<HermitianCov3> = params.iter().map(|p| p.center).collect();
    let keep = select_pixels(sample, &centers, report.top_k)?;
    let mut retained = vec![false; sample.pixels()];
    for &i in &keep {
        retained[i] = true;
    }
    let factors: Vec<CenterFactor> = centers.iter().map(CenterFactor::new).collect::<Result<_>>()?;
    let mut patch = sample.patch.clone();
    let mut generated = 0;
    for (i, &kept) in retained.iter().enumerate() {
        if kept {
            continue;
        }
        generated += 1;
        for (b, f) in factors.iter().enumerate() {
            let draw = f.sample(params[b].looks, rng);
            let v = vectorize_covariance(&draw);
            let base = i * sample.channels + b * CHANNELS;
            patch[base..base + CHANNELS].copy_from_slice(&v.0);
        }
    }
    Ok(RectifiedSample { patch, retained, generated })
}

/// Standardizes and flattens a batch of samples into one channel-last
/// buffer for the forward pass.
pub fn normalized_batch<T: Scalar>(samples: &[Sample], norm: &FeatureNorm) -> Vec<T> {
    let mut out = Vec::with_capacity(samples.iter().map(|s| s.patch.len()).sum());
    for s in samples {
        out.extend(norm.apply(&s.patch).into_iter().map(T::from_f64));
    }
    out
}

/// Plain (non-rectifying) batched forward pass on normalized samples.
pub fn forward_batch<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
    norm: &FeatureNorm,
    samples: &[Sample],
    training: bool,
) -> Result<ForwardGraph> {
    let input = normalized_batch(samples, norm);
    build_forward(tape, params, input, samples.len(), training)
}

/// Result of the two-pass rectifying forward.
pub struct SdsrOutcome {
    /// Pass-2 graph (the returned output of the protocol).
    pub graph: ForwardGraph,
    /// Pass-1 purity per sample.
    pub reports: Vec<PurityReport>,
    /// Rectified samples fed to pass 2 (raw covariance features).
    pub rectified: Vec<Sample>,
}

/// Two-pass rectifying forward over a batch.
///
/// Pass 1 runs in inference mode on a throwaway tape (no gradients, BN
/// running statistics, no stat updates) to assess purity. Rectification
/// operates on the raw covariance features; pass 2 re-normalizes the
/// rectified batch and runs on `tape` with `training` BN semantics, so
/// gradients flow only through pass 2.
///
/// `seeds[i]` keys sample i's generation stream: training derives it from
/// (run seed, epoch, sample index), inference from the sample origin.
pub fn sdsr_forward<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
    norm: &FeatureNorm,
    samples: &[Sample],
    looks: u32,
    seeds: &[u64],
    training: bool,
) -> Result<SdsrOutcome> {
    debug_assert_eq!(samples.len(), seeds.len());
    let mut pass1 = Tape::<T>::new(false);
    let graph1 = forward_batch(&mut pass1, params, norm, samples, false)?;
    let out1 = ForwardOutput::from_graph(&pass1, &graph1);

    let mut reports = Vec::with_capacity(samples.len());
    let mut rectified = Vec::with_capacity(samples.len());
    for (i, sample) in samples.iter().enumerate() {
        let report = assess_purity(&out1, i, sample.window);
        let wparams = rectification_params(sample, looks)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seeds[i]);
        let r = rectify(sample, &report, &wparams, &mut rng)?;
        let mut s = sample.clone();
        s.patch = r.patch;
        reports.push(report);
        rectified.push(s);
    }

    let graph = forward_batch(tape, params, norm, &rectified, training)?;
    Ok(SdsrOutcome { graph, reports, rectified })
}
