//! PolSAR domain types: per-pixel covariance matrices, their 9-D real
//! vectorization, scene rasters, and sliding-window sample extraction.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative asymmetry tolerated when validating a Hermitian matrix.
const HERMITIAN_TOL: f64 = 1e-9;

/// Negative-diagonal slack tolerated by [`devectorize`]; values in
/// `[-DIAG_TOL, 0)` are clamped to zero.
const DIAG_TOL: f64 = 1e-9;

/// Label value marking an unlabeled pixel.
pub const UNLABELED: u8 = 255;

/// A 3x3 complex Hermitian positive-semidefinite polarimetric covariance
/// matrix, in linear power units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HermitianCov3 {
    m: [[Complex64; 3]; 3],
}

impl HermitianCov3 {
    /// Builds from the six independent upper-triangle entries. The lower
    /// triangle is conjugated from the upper, so the result is Hermitian by
    /// construction. Diagonal entries must be non-negative.
    pub fn from_upper(
        c11: f64,
        c12: Complex64,
        c13: Complex64,
        c22: f64,
        c23: Complex64,
        c33: f64,
    ) -> Result<Self> {
        for (name, d) in [("C11", c11), ("C22", c22), ("C33", c33)] {
            if !d.is_finite() {
                return Err(Error::validation(format!("{name} is not finite")));
            }
            if d < 0.0 {
                return Err(Error::validation(format!("{name} = {d} is negative")));
            }
        }
        if ![c12, c13, c23].iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
            return Err(Error::validation("off-diagonal entry is not finite"));
        }
        Ok(Self {
            m: [
                [Complex64::new(c11, 0.0), c12, c13],
                [c12.conj(), Complex64::new(c22, 0.0), c23],
                [c13.conj(), c23.conj(), Complex64::new(c33, 0.0)],
            ],
        })
    }

    /// Validates a full 3x3 complex matrix as Hermitian (asymmetry within
    /// `1e-9` relative) with a real non-negative diagonal, then stores the
    /// exactly-Hermitian projection built from its upper triangle.
    pub fn from_entries(entries: [[Complex64; 3]; 3]) -> Result<Self> {
        let scale = entries
            .iter()
            .flatten()
            .map(|z| z.norm())
            .fold(0.0_f64, f64::max)
            .max(1e-300);
        for i in 0..3 {
            for j in (i + 1)..3 {
                let asym = (entries[i][j] - entries[j][i].conj()).norm();
                if asym > HERMITIAN_TOL * scale {
                    return Err(Error::validation(format!(
                        "matrix is not Hermitian: |A[{i}][{j}] - conj(A[{j}][{i}])| = {asym:.3e} \
                         exceeds {HERMITIAN_TOL:.0e} relative"
                    )));
                }
            }
            let d = entries[i][i];
            if d.im.abs() > HERMITIAN_TOL * scale {
                return Err(Error::validation(format!(
                    "diagonal entry A[{i}][{i}] has imaginary part {:.3e}",
                    d.im
                )));
            }
            if d.re < -HERMITIAN_TOL * scale {
                return Err(Error::validation(format!(
                    "diagonal entry A[{i}][{i}] = {} is negative",
                    d.re
                )));
            }
        }
        Self::from_upper(
            entries[0][0].re.max(0.0),
            entries[0][1],
            entries[0][2],
            entries[1][1].re.max(0.0),
            entries[1][2],
            entries[2][2].re.max(0.0),
        )
    }

    pub fn identity() -> Self {
        Self::diagonal(1.0, 1.0, 1.0)
    }

    pub fn zero() -> Self {
        Self::diagonal(0.0, 0.0, 0.0)
    }

    /// Diagonal matrix; panics on negative entries (programmer error).
    pub fn diagonal(d1: f64, d2: f64, d3: f64) -> Self {
        let zero = Complex64::new(0.0, 0.0);
        Self::from_upper(d1, zero, zero, d2, zero, d3).expect("negative diagonal")
    }

    pub fn entry(&self, i: usize, j: usize) -> Complex64 {
        self.m[i][j]
    }

    pub fn entries(&self) -> &[[Complex64; 3]; 3] {
        &self.m
    }

    pub fn trace(&self) -> f64 {
        self.m[0][0].re + self.m[1][1].re + self.m[2][2].re
    }

    /// `self + t * I`, used for diagonal-loading regularization.
    pub fn add_scaled_identity(&self, t: f64) -> Self {
        let mut m = self.m;
        for (i, row) in m.iter_mut().enumerate() {
            row[i] += t;
        }
        Self { m }
    }

    pub fn scale(&self, a: f64) -> Self {
        let mut m = self.m;
        for row in &mut m {
            for z in row {
                *z *= a;
            }
        }
        Self { m }
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut m = self.m;
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] += other.m[i][j];
            }
        }
        Self { m }
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.m
            .iter()
            .flatten()
            .map(|z| z.norm_sqr())
            .sum::<f64>()
            .sqrt()
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.scale(-1.0))
    }

    /// Determinant (real for Hermitian input).
    pub fn det(&self) -> f64 {
        let m = &self.m;
        let d = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        d.re
    }

    /// Smallest eigenvalue, via the trigonometric closed form for 3x3
    /// Hermitian matrices.
    pub fn min_eigenvalue(&self) -> f64 {
        let m = &self.m;
        let p1 = m[0][1].norm_sqr() + m[0][2].norm_sqr() + m[1][2].norm_sqr();
        let q = self.trace() / 3.0;
        let p2 = (m[0][0].re - q).powi(2)
            + (m[1][1].re - q).powi(2)
            + (m[2][2].re - q).powi(2)
            + 2.0 * p1;
        if p2 <= 0.0 {
            return q;
        }
        let p = (p2 / 6.0).sqrt();
        let b = Self {
            m: {
                let mut b = self.m;
                for (i, row) in b.iter_mut().enumerate() {
                    row[i] -= q;
                }
                for row in &mut b {
                    for z in row {
                        *z /= p;
                    }
                }
                b
            },
        };
        let r = (b.det() / 2.0).clamp(-1.0, 1.0);
        let phi = r.acos() / 3.0;
        // Smallest root of the characteristic polynomial.
        q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos()
    }

    /// Checks the PSD invariant: eigenvalues >= -1e-9 * trace.
    pub fn validate_psd(&self) -> Result<()> {
        let floor = -1e-9 * self.trace();
        let lo = self.min_eigenvalue();
        if lo < floor {
            return Err(Error::validation(format!(
                "matrix is not positive semidefinite: min eigenvalue {lo:.6e} < {floor:.6e}"
            )));
        }
        Ok(())
    }
}

/// The 9-D real feature vector of one pixel, ordered
/// `[C11, Re(C12), Im(C12), Re(C13), Im(C13), C22, Re(C23), Im(C23), C33]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Feature9(pub [f64; 9]);

impl Feature9 {
    pub fn as_slice(&self) -> &[f64; 9] {
        &self.0
    }
}

/// Flattens a covariance matrix into its 9-D real vector.
pub fn vectorize_covariance(c: &HermitianCov3) -> Feature9 {
    let m = c.entries();
    Feature9([
        m[0][0].re, m[0][1].re, m[0][1].im, m[0][2].re, m[0][2].im, m[1][1].re, m[1][2].re,
        m[1][2].im, m[2][2].re,
    ])
}

/// Rebuilds a covariance matrix from a 9-D feature vector. The lower
/// triangle is conjugated from the upper, so the output is Hermitian by
/// construction. Diagonals below `-1e-9` are rejected; tiny negatives are
/// clamped to zero.
pub fn devectorize(v: &Feature9) -> Result<HermitianCov3> {
    let v = &v.0;
    if !v.iter().all(|x| x.is_finite()) {
        return Err(Error::validation("feature vector contains non-finite values"));
    }
    for (name, x) in [("C11", v[0]), ("C22", v[5]), ("C33", v[8])] {
        if x < -DIAG_TOL {
            return Err(Error::validation(format!(
                "diagonal {name} = {x} is negative beyond tolerance"
            )));
        }
    }
    HermitianCov3::from_upper(
        v[0].max(0.0),
        Complex64::new(v[1], v[2]),
        Complex64::new(v[3], v[4]),
        v[5].max(0.0),
        Complex64::new(v[6], v[7]),
        v[8].max(0.0),
    )
}

/// An H x W grid of 9-D feature vectors plus an optional label map.
///
/// Features are stored row-major, channel-last, as `f32` to mirror the
/// on-disk scene container exactly.
#[derive(Debug, Clone)]
pub struct PolsarRaster {
    pub height: usize,
    pub width: usize,
    pub features: Vec<f32>,
    pub labels: Option<Vec<u8>>,
    pub band_tag: String,
}

/// Number of feature channels per pixel in a single-band raster.
pub const CHANNELS: usize = 9;

impl PolsarRaster {
    pub fn new(
        height: usize,
        width: usize,
        features: Vec<f32>,
        labels: Option<Vec<u8>>,
        band_tag: impl Into<String>,
    ) -> Result<Self> {
        if features.len() != height * width * CHANNELS {
            return Err(Error::validation(format!(
                "feature buffer length {} does not match {height}x{width}x{CHANNELS}",
                features.len()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != height * width {
                return Err(Error::validation(format!(
                    "label buffer length {} does not match {height}x{width}",
                    l.len()
                )));
            }
        }
        Ok(Self { height, width, features, labels, band_tag: band_tag.into() })
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let base = (row * self.width + col) * CHANNELS;
        &self.features[base..base + CHANNELS]
    }

    pub fn label(&self, row: usize, col: usize) -> u8 {
        self.labels
            .as_ref()
            .map_or(UNLABELED, |l| l[row * self.width + col])
    }

    pub fn pixel_covariance(&self, row: usize, col: usize) -> Result<HermitianCov3> {
        let p = self.pixel(row, col);
        let mut v = [0.0f64; 9];
        for (dst, src) in v.iter_mut().zip(p) {
            *dst = f64::from(*src);
        }
        devectorize(&Feature9(v))
    }

    /// Checks that every labeled pixel's class index is below `num_classes`.
    pub fn validate_labels(&self, num_classes: usize) -> Result<()> {
        if let Some(labels) = &self.labels {
            for (i, &l) in labels.iter().enumerate() {
                if l != UNLABELED && usize::from(l) >= num_classes {
                    return Err(Error::validation(format!(
                        "pixel {i} has class {l} >= declared class count {num_classes}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// An s x s training patch with its label and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Row-major, channel-last patch values (un-normalized covariance features).
    pub patch: Vec<f64>,
    /// Window side length s.
    pub window: usize,
    /// 9 for a single band, 18 for a dual-band concatenation.
    pub channels: usize,
    /// Class index of the window's center pixel; [`UNLABELED`] for inference windows.
    pub label: u8,
    /// (row, col) of the window's top-left corner in the source raster.
    pub origin: (usize, usize),
    pub band_tag: String,
}

impl Sample {
    pub fn pixels(&self) -> usize {
        self.window * self.window
    }

    pub fn pixel(&self, idx: usize) -> &[f64] {
        let base = idx * self.channels;
        &self.patch[base..base + self.channels]
    }

    /// Covariance matrix of pixel `idx` (row-major) for the given band slot
    /// (0 for channels 0..9, 1 for channels 9..18).
    pub fn pixel_covariance(&self, idx: usize, band: usize) -> Result<HermitianCov3> {
        let p = self.pixel(idx);
        let base = band * CHANNELS;
        if base + CHANNELS > self.channels {
            return Err(Error::validation(format!(
                "band slot {band} out of range for {}-channel sample",
                self.channels
            )));
        }
        let mut v = [0.0f64; 9];
        v.copy_from_slice(&p[base..base + CHANNELS]);
        devectorize(&Feature9(v))
    }

    /// Number of band slots (1 or 2).
    pub fn bands(&self) -> usize {
        self.channels / CHANNELS
    }

    /// Concatenates two aligned single-band samples channel-wise into one
    /// dual-band sample.
    pub fn concat_bands(a: &Sample, b: &Sample) -> Result<Sample> {
        if a.window != b.window || a.origin != b.origin || a.label != b.label {
            return Err(Error::validation(
                "cannot concatenate samples with different window, origin, or label",
            ));
        }
        if a.channels != CHANNELS || b.channels != CHANNELS {
            return Err(Error::validation("concat_bands expects single-band samples"));
        }
        let pixels = a.pixels();
        let channels = 2 * CHANNELS;
        let mut patch = vec![0.0f64; pixels * channels];
        for i in 0..pixels {
            patch[i * channels..i * channels + CHANNELS].copy_from_slice(a.pixel(i));
            patch[i * channels + CHANNELS..(i + 1) * channels].copy_from_slice(b.pixel(i));
        }
        Ok(Sample {
            patch,
            window: a.window,
            channels,
            label: a.label,
            origin: a.origin,
            band_tag: format!("{}+{}", a.band_tag, b.band_tag),
        })
    }
}

/// Window top-left positions along one axis: multiples of `stride` in
/// `0..=extent-window`, with the final position shifted back to
/// `extent-window` so coverage reaches the image edge (no padding).
fn window_starts(extent: usize, window: usize, stride: usize) -> Vec<usize> {
    let last = extent - window;
    let mut starts: Vec<usize> = (0..=last).step_by(stride).collect();
    if *starts.last().expect("at least one window position") != last {
        starts.push(last);
    }
    starts
}

fn copy_window(raster: &PolsarRaster, top: usize, left: usize, window: usize) -> Vec<f64> {
    let mut patch = vec![0.0f64; window * window * CHANNELS];
    for r in 0..window {
        let src = ((top + r) * raster.width + left) * CHANNELS;
        let dst = r * window * CHANNELS;
        for (d, s) in patch[dst..dst + window * CHANNELS]
            .iter_mut()
            .zip(&raster.features[src..src + window * CHANNELS])
        {
            *d = f64::from(*s);
        }
    }
    patch
}

fn check_window_args(raster: &PolsarRaster, window: usize, stride: usize) -> Result<()> {
    if window == 0 || window > raster.height.min(raster.width) {
        return Err(Error::validation(format!(
            "window size {window} does not fit a {}x{} raster",
            raster.height, raster.width
        )));
    }
    if stride == 0 {
        return Err(Error::validation("stride must be >= 1"));
    }
    Ok(())
}

/// Extracts one labeled training sample per window position whose center
/// pixel carries a label. The sample's label is the center pixel's label;
/// the center of an s x s window is pixel (s/2, s/2) of the window.
pub fn extract_samples(raster: &PolsarRaster, window: usize, stride: usize) -> Result<Vec<Sample>> {
    check_window_args(raster, window, stride)?;
    if raster.labels.is_none() {
        return Err(Error::validation(
            "training extraction requires a labeled raster (labels are missing)",
        ));
    }
    let half = window / 2;
    let mut samples = Vec::new();
    for &top in &window_starts(raster.height, window, stride) {
        for &left in &window_starts(raster.width, window, stride) {
            let label = raster.label(top + half, left + half);
            if label == UNLABELED {
                continue;
            }
            samples.push(Sample {
                patch: copy_window(raster, top, left, window),
                window,
                channels: CHANNELS,
                label,
                origin: (top, left),
                band_tag: raster.band_tag.clone(),
            });
        }
    }
    Ok(samples)
}

/// The inference window whose (possibly shifted) center covers pixel
/// `(row, col)`: top-left is `row - s/2` clamped into bounds, so border
/// pixels reuse an in-bounds window instead of padding.
pub fn window_for_pixel(raster: &PolsarRaster, row: usize, col: usize, window: usize) -> Sample {
    let half = window / 2;
    let top = row.saturating_sub(half).min(raster.height - window);
    let left = col.saturating_sub(half).min(raster.width - window);
    Sample {
        patch: copy_window(raster, top, left, window),
        window,
        channels: CHANNELS,
        label: raster.label(row, col),
        origin: (top, left),
        band_tag: raster.band_tag.clone(),
    }
}

/// Per-channel standardization statistics, estimated on the training split
/// and stored in the checkpoint so inference normalizes identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureNorm {
    /// Fits mean/std per channel over all pixels of all samples.
    pub fn fit(samples: &[Sample]) -> Result<Self> {
        let channels = samples
            .first()
            .ok_or_else(|| Error::validation("cannot fit normalization on an empty sample set"))?
            .channels;
        let mut mean = vec![0.0f64; channels];
        let mut m2 = vec![0.0f64; channels];
        let mut n = 0.0f64;
        for s in samples {
            debug_assert_eq!(s.channels, channels);
            for px in 0..s.pixels() {
                n += 1.0;
                for (c, &x) in s.pixel(px).iter().enumerate() {
                    let delta = x - mean[c];
                    mean[c] += delta / n;
                    m2[c] += delta * (x - mean[c]);
                }
            }
        }
        let std = m2
            .iter()
            .map(|&v| (v / n.max(1.0)).sqrt().max(1e-12))
            .collect();
        Ok(Self { mean, std })
    }

    /// Standardizes a raw patch; output layout matches the input.
    pub fn apply(&self, patch: &[f64]) -> Vec<f64> {
        let c = self.mean.len();
        patch
            .iter()
            .enumerate()
            .map(|(i, &x)| (x - self.mean[i % c]) / self.std[i % c])
            .collect()
    }
}
