//! Synthetic dual-frequency scene generation.
//!
//! Every pixel of class m in band b is an independent multilook Wishart
//! draw around a per-band per-class center matrix. A configurable fraction
//! of pixels per region is resampled from another class's center (at the
//! same positions in both bands) to mimic mixed scatterers. Scenes are
//! reproducible: feature rows derive independent ChaCha8 substreams from
//! (seed, band, row), so (spec, seed) maps to identical bytes across runs,
//! platforms, and thread counts.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::polsar::{
    devectorize, vectorize_covariance, Feature9, HermitianCov3, PolsarRaster, CHANNELS, UNLABELED,
};
use crate::seed::stream;
use crate::wishart::{CenterFactor, WishartParams};

const TAG_FEATURES: u64 = 0x7363656e_65666561; // "scenefea"
const TAG_IMPURITY: u64 = 0x7363656e_65696d70; // "sceneimp"

/// A labeled region of the scene layout.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum RegionShape {
    Rect { row: usize, col: usize, height: usize, width: usize },
    Ellipse { center_row: f64, center_col: f64, radius_rows: f64, radius_cols: f64 },
}

impl RegionShape {
    fn contains(&self, r: usize, c: usize) -> bool {
        match *self {
            RegionShape::Rect { row, col, height, width } => {
                r >= row && r < row + height && c >= col && c < col + width
            }
            RegionShape::Ellipse { center_row, center_col, radius_rows, radius_cols } => {
                let dr = (r as f64 - center_row) / radius_rows;
                let dc = (c as f64 - center_col) / radius_cols;
                dr * dr + dc * dc <= 1.0
            }
        }
    }

    fn within_bounds(&self, h: usize, w: usize) -> bool {
        match *self {
            RegionShape::Rect { row, col, height, width } => {
                height > 0 && width > 0 && row + height <= h && col + width <= w
            }
            RegionShape::Ellipse { center_row, center_col, radius_rows, radius_cols } => {
                radius_rows > 0.0
                    && radius_cols > 0.0
                    && center_row - radius_rows >= -0.5
                    && center_col - radius_cols >= -0.5
                    && center_row + radius_rows <= h as f64 - 0.5
                    && center_col + radius_cols <= w as f64 - 0.5
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Region {
    #[serde(flatten)]
    pub shape: RegionShape,
    pub class: u8,
}

/// Full description of a synthetic dual-band scene. Serialized as JSON for
/// the `synth` command.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Painted in order; a pixel belongs to the last region covering it.
    pub regions: Vec<Region>,
    /// Per-band, per-class center matrices as 9-D feature vectors:
    /// `centers[band][class]`.
    pub centers: Vec<Vec<Feature9>>,
    /// Multilook count for every pixel draw.
    pub looks: u32,
    /// Fraction of each region's pixels resampled from another class.
    pub impurity: f64,
    pub seed: u64,
    pub class_names: Vec<String>,
    pub palette: Vec<[u8; 3]>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::validation("scene dimensions must be positive"));
        }
        if self.num_classes == 0 || self.num_classes > 254 {
            return Err(Error::validation("class count must be in 1..=254"));
        }
        if self.class_names.len() != self.num_classes {
            return Err(Error::validation(format!(
                "{} class names for {} classes",
                self.class_names.len(),
                self.num_classes
            )));
        }
        if self.palette.len() < self.num_classes {
            return Err(Error::validation("palette shorter than class count"));
        }
        if !(0.0..0.5).contains(&self.impurity) {
            return Err(Error::validation(format!(
                "impurity rate {} must lie in [0, 0.5)",
                self.impurity
            )));
        }
        if self.looks == 0 {
            return Err(Error::validation("look count must be >= 1"));
        }
        if self.centers.len() != 2 {
            return Err(Error::validation("centers must cover exactly two bands"));
        }
        for (b, band) in self.centers.iter().enumerate() {
            if band.len() != self.num_classes {
                return Err(Error::validation(format!(
                    "band {} declares {} centers for {} classes",
                    b + 1,
                    band.len(),
                    self.num_classes
                )));
            }
            for (m, v) in band.iter().enumerate() {
                let c = devectorize(v).map_err(|e| {
                    Error::validation(format!("center[{b}][{m}] is invalid: {e}"))
                })?;
                CenterFactor::new(&c).map_err(|_| {
                    Error::validation(format!("center[{b}][{m}] is not positive definite"))
                })?;
            }
        }
        let mut used = vec![false; self.num_classes];
        for (i, region) in self.regions.iter().enumerate() {
            if usize::from(region.class) >= self.num_classes {
                return Err(Error::validation(format!(
                    "region {i} has class {} >= {}",
                    region.class, self.num_classes
                )));
            }
            if !region.shape.within_bounds(self.height, self.width) {
                return Err(Error::validation(format!("region {i} exceeds scene bounds")));
            }
            used[usize::from(region.class)] = true;
        }
        if let Some(missing) = used.iter().position(|&u| !u) {
            return Err(Error::validation(format!(
                "class {missing} is not used by any region"
            )));
        }
        Ok(())
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let spec: SceneSpec = serde_json::from_str(json)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Deterministic label map: regions painted in order, later regions win.
/// Returns the labels and, per pixel, the index of the owning region
/// (usize::MAX when uncovered).
fn paint_labels(spec: &SceneSpec) -> (Vec<u8>, Vec<usize>) {
    let mut labels = vec![UNLABELED; spec.height * spec.width];
    let mut owner = vec![usize::MAX; spec.height * spec.width];
    for (ri, region) in spec.regions.iter().enumerate() {
        for r in 0..spec.height {
            for c in 0..spec.width {
                if region.shape.contains(r, c) {
                    labels[r * spec.width + c] = region.class;
                    owner[r * spec.width + c] = ri;
                }
            }
        }
    }
    (labels, owner)
}

/// Per-pixel effective class after impurity substitution (same positions
/// and substitute classes in both bands). `UNLABELED` where uncovered.
fn effective_classes(spec: &SceneSpec, labels: &[u8], owner: &[usize]) -> Vec<u8> {
    let mut effective = labels.to_vec();
    if spec.impurity <= 0.0 || spec.num_classes < 2 {
        return effective;
    }
    for ri in 0..spec.regions.len() {
        let mut pixels: Vec<usize> = (0..labels.len()).filter(|&p| owner[p] == ri).collect();
        if pixels.is_empty() {
            continue;
        }
        let k = (spec.impurity * pixels.len() as f64).round() as usize;
        let mut rng = stream(spec.seed, &[TAG_IMPURITY, ri as u64]);
        // Partial Fisher-Yates: the first k entries are a uniform subset.
        for i in 0..k.min(pixels.len() - 1) {
            let j = rng.random_range(i..pixels.len());
            pixels.swap(i, j);
        }
        let own_class = spec.regions[ri].class;
        for &p in pixels.iter().take(k) {
            let mut other = rng.random_range(0..spec.num_classes as u32 - 1) as u8;
            if other >= own_class {
                other += 1;
            }
            effective[p] = other;
        }
    }
    effective
}

/// Generates the two band rasters and the shared label map.
pub fn generate_scene(spec: &SceneSpec) -> Result<(PolsarRaster, PolsarRaster, Vec<u8>)> {
    spec.validate()?;
    let (labels, owner) = paint_labels(spec);
    let effective = effective_classes(spec, &labels, &owner);

    let mut bands = Vec::with_capacity(2);
    for b in 0..2usize {
        let factors: Vec<CenterFactor> = spec.centers[b]
            .iter()
            .map(|v| {
                let params = WishartParams::new(spec.looks, devectorize(v)?)?;
                CenterFactor::new(&params.center)
            })
            .collect::<Result<_>>()?;
        let rows: Vec<Vec<f32>> = (0..spec.height)
            .into_par_iter()
            .map(|r| {
                let mut rng = stream(spec.seed, &[TAG_FEATURES, b as u64, r as u64]);
                let mut row = vec![0.0f32; spec.width * CHANNELS];
                for c in 0..spec.width {
                    let class = effective[r * spec.width + c];
                    if class == UNLABELED {
                        continue;
                    }
                    let draw = factors[usize::from(class)].sample(spec.looks, &mut rng);
                    let v = vectorize_covariance(&draw);
                    for (dst, &x) in row[c * CHANNELS..(c + 1) * CHANNELS].iter_mut().zip(&v.0) {
                        *dst = x as f32;
                    }
                }
                row
            })
            .collect();
        let features: Vec<f32> = rows.into_iter().flatten().collect();
        let tag = format!("band{}", b + 1);
        bands.push(PolsarRaster::new(
            spec.height,
            spec.width,
            features,
            Some(labels.clone()),
            tag,
        )?);
    }
    let band2 = bands.pop().expect("two bands");
    let band1 = bands.pop().expect("two bands");
    Ok((band1, band2, labels))
}

fn center(diag: [f64; 3], rho: [(f64, f64); 3]) -> Feature9 {
    let corr = |i: usize, j: usize, (mag, phase): (f64, f64)| {
        let r = mag * (diag[i] * diag[j]).sqrt();
        num_complex::Complex64::from_polar(r, phase)
    };
    let c = HermitianCov3::from_upper(
        diag[0],
        corr(0, 1, rho[0]),
        corr(0, 2, rho[1]),
        diag[1],
        corr(1, 2, rho[2]),
        diag[2],
    )
    .expect("valid center construction");
    vectorize_covariance(&c)
}

fn scale_center(v: &Feature9, factor: f64) -> Feature9 {
    let mut out = v.0;
    for x in &mut out {
        *x *= factor;
    }
    Feature9(out)
}

/// Three-class layout of horizontal stripes cycling 0,1,2,0,1,2 so each
/// class appears in two disjoint regions with near-equal area.
fn striped_regions(height: usize, width: usize) -> Vec<Region> {
    let stripes = 6usize;
    let base = height / stripes;
    let extra = height % stripes;
    let mut regions = Vec::with_capacity(stripes);
    let mut row = 0;
    for s in 0..stripes {
        let h = base + usize::from(s < extra);
        regions.push(Region {
            shape: RegionShape::Rect { row, col: 0, height: h, width },
            class: (s % 3) as u8,
        });
        row += h;
    }
    regions
}

/// Builds a dual-band scene spec whose bands are individually weak on
/// complementary class pairs: band 1 separates class 2 well but classes
/// {0,1} differ only by a 5% scaling, while band 2 separates class 0 well
/// but classes {1,2} differ only by a 5% scaling. Jointly all three classes
/// are separable.
pub fn make_complementary_spec(height: usize, width: usize, seed: u64) -> SceneSpec {
    let near = 1.05;

    // Band 1: classes 0 and 1 share a shape up to 5% scaling.
    let b1_base = center([1.0, 0.45, 0.20], [(0.30, 0.4), (0.15, -0.7), (0.20, 1.1)]);
    let b1 = vec![
        b1_base,
        scale_center(&b1_base, near),
        center([0.25, 0.90, 0.55], [(0.40, -0.3), (0.25, 0.9), (0.10, -1.4)]),
    ];

    // Band 2: classes 1 and 2 share a shape up to 5% scaling.
    let b2_base = center([0.60, 0.80, 0.30], [(0.20, -1.0), (0.35, 0.5), (0.15, 2.0)]);
    let b2 = vec![
        center([1.20, 0.25, 0.70], [(0.10, 1.8), (0.30, -0.6), (0.45, 0.2)]),
        b2_base,
        scale_center(&b2_base, near),
    ];

    SceneSpec {
        height,
        width,
        num_classes: 3,
        regions: striped_regions(height, width),
        centers: vec![b1, b2],
        looks: 4,
        impurity: 0.0,
        seed,
        class_names: vec!["alpha".into(), "bravo".into(), "charlie".into()],
        palette: vec![[204, 51, 51], [51, 153, 51], [51, 102, 204]],
    }
}

/// Like the complementary spec, but with well-separated classes in both
/// bands and a non-zero impurity rate: the stress case for rectification.
pub fn make_impure_spec(height: usize, width: usize, impurity: f64, seed: u64) -> SceneSpec {
    let mut spec = make_complementary_spec(height, width, seed);
    spec.impurity = impurity;
    // Pull the near-identical pairs apart so the only difficulty is impurity.
    spec.centers[0][1] = center([0.30, 1.00, 0.15], [(0.25, 2.2), (0.35, -1.2), (0.20, 0.6)]);
    spec.centers[1][2] = center([0.20, 0.35, 1.10], [(0.45, -2.0), (0.15, 1.5), (0.30, -0.4)]);
    spec
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polsar::Feature9;
    use crate::wishart::wishart_distance;

    #[test]
    fn complementary_spec_passes_validation() {
        let spec = make_complementary_spec(64, 64, 7);
        spec.validate().unwrap();
        let json = spec.to_json().unwrap();
        let back = SceneSpec::from_json(&json).unwrap();
        assert_eq!(spec, back);
    }

    #[test]
    fn label_marginals_match_region_areas_exactly() {
        let spec = make_complementary_spec(64, 64, 7);
        let (labels, _) = paint_labels(&spec);
        let mut counts = [0usize; 3];
        for &l in &labels {
            counts[usize::from(l)] += 1;
        }
        // Stripes of heights 11,11,11,11,10,10 cycling 0,1,2,0,1,2.
        assert_eq!(counts, [(11 + 11) * 64, (11 + 10) * 64, (11 + 10) * 64]);
    }

    #[test]
    fn same_seed_gives_bit_identical_scenes() {
        let spec = make_complementary_spec(32, 32, 9);
        let (a1, a2, al) = generate_scene(&spec).unwrap();
        let (b1, b2, bl) = generate_scene(&spec).unwrap();
        assert_eq!(a1.features, b1.features);
        assert_eq!(a2.features, b2.features);
        assert_eq!(al, bl);
        let mut other = spec.clone();
        other.seed = 10;
        let (c1, _, _) = generate_scene(&other).unwrap();
        assert_ne!(a1.features, c1.features);
    }

    #[test]
    fn pure_single_class_scene_mean_matches_center() {
        let mut spec = make_complementary_spec(64, 64, 3);
        spec.regions = vec![Region {
            shape: RegionShape::Rect { row: 0, col: 0, height: 64, width: 64 },
            class: 0,
        }];
        spec.num_classes = 1;
        spec.centers[0].truncate(1);
        spec.centers[1].truncate(1);
        spec.class_names.truncate(1);
        spec.impurity = 0.0;
        let (b1, _, _) = generate_scene(&spec).unwrap();

        let mut mean = [0.0f64; 9];
        for px in 0..64 * 64 {
            for (m, &x) in mean.iter_mut().zip(b1.pixel(px / 64, px % 64)) {
                *m += f64::from(x);
            }
        }
        for m in &mut mean {
            *m /= 4096.0;
        }
        let target = devectorize(&spec.centers[0][0]).unwrap();
        let got = devectorize(&Feature9(mean)).unwrap();
        let rel = got.sub(&target).norm() / target.norm();
        assert!(rel < 0.02, "empirical scene mean off by {rel}");
    }

    #[test]
    fn impurity_fraction_matches_rate() {
        let spec = make_impure_spec(64, 64, 0.2, 5);
        let (labels, owner) = paint_labels(&spec);
        let effective = effective_classes(&spec, &labels, &owner);
        for ri in 0..spec.regions.len() {
            let region: Vec<usize> = (0..labels.len()).filter(|&p| owner[p] == ri).collect();
            let impure = region.iter().filter(|&&p| effective[p] != labels[p]).count();
            let frac = impure as f64 / region.len() as f64;
            assert!(
                (frac - 0.2).abs() <= 0.02,
                "region {ri}: impurity fraction {frac}"
            );
            // Substitutes really are other classes.
            for &p in &region {
                if effective[p] != labels[p] {
                    assert_ne!(effective[p], labels[p]);
                    assert!(usize::from(effective[p]) < spec.num_classes);
                }
            }
        }
    }

    #[test]
    fn impure_positions_shared_across_bands() {
        // Both bands read the same effective class map, so a pixel whose
        // draw differs from its region center in band 1 is resampled in
        // band 2 as well. Verified structurally: effective_classes is
        // computed once, before any band loop.
        let spec = make_impure_spec(32, 32, 0.3, 5);
        let (labels, owner) = paint_labels(&spec);
        let e1 = effective_classes(&spec, &labels, &owner);
        let e2 = effective_classes(&spec, &labels, &owner);
        assert_eq!(e1, e2);
    }

    /// Maximum-likelihood classification against the true centers: the
    /// independent oracle for band-level separability.
    fn ml_per_class_accuracy(
        raster: &PolsarRaster,
        centers: &[Vec<Feature9>],
        band: usize,
        joint_with: Option<(&PolsarRaster, usize)>,
    ) -> Vec<f64> {
        let m = centers[band].len();
        let mut hits = vec![0usize; m];
        let mut totals = vec![0usize; m];
        for r in 0..raster.height {
            for c in 0..raster.width {
                let truth = raster.label(r, c);
                if truth == UNLABELED {
                    continue;
                }
                let cov = raster.pixel_covariance(r, c).unwrap();
                let mut best = (f64::INFINITY, 0usize);
                for k in 0..m {
                    let sigma = devectorize(&centers[band][k]).unwrap();
                    let mut d = wishart_distance(&cov, &sigma).unwrap();
                    if let Some((other, ob)) = joint_with {
                        let cov2 = other.pixel_covariance(r, c).unwrap();
                        let sigma2 = devectorize(&centers[ob][k]).unwrap();
                        d += wishart_distance(&cov2, &sigma2).unwrap();
                    }
                    if d < best.0 {
                        best = (d, k);
                    }
                }
                totals[usize::from(truth)] += 1;
                if best.1 == usize::from(truth) {
                    hits[usize::from(truth)] += 1;
                }
            }
        }
        hits.iter()
            .zip(&totals)
            .map(|(&h, &t)| h as f64 / t as f64)
            .collect()
    }

    #[test]
    fn complementary_bands_confuse_designed_pairs_but_join_well() {
        let spec = make_complementary_spec(64, 64, 21);
        let (b1, b2, _) = generate_scene(&spec).unwrap();

        let acc1 = ml_per_class_accuracy(&b1, &spec.centers, 0, None);
        let acc2 = ml_per_class_accuracy(&b2, &spec.centers, 1, None);

        // Band 1 confuses {0,1} but separates 2; band 2 confuses {1,2}.
        assert!(acc1[0] < 0.80 && acc1[1] < 0.80, "band1 accuracies {acc1:?}");
        assert!(acc1[2] > 0.90, "band1 accuracies {acc1:?}");
        assert!(acc2[1] < 0.80 && acc2[2] < 0.80, "band2 accuracies {acc2:?}");
        assert!(acc2[0] > 0.90, "band2 accuracies {acc2:?}");

        let joint = ml_per_class_accuracy(&b1, &spec.centers, 0, Some((&b2, 1)));
        let oa = |acc: &[f64]| acc.iter().sum::<f64>() / acc.len() as f64;
        assert!(
            oa(&joint) > oa(&acc1) && oa(&joint) > oa(&acc2),
            "joint {joint:?} vs band1 {acc1:?} band2 {acc2:?}"
        );
    }

    #[test]
    fn validation_rejects_bad_specs() {
        let mut spec = make_complementary_spec(32, 32, 1);
        spec.impurity = 0.6;
        assert!(spec.validate().is_err());

        let mut spec = make_complementary_spec(32, 32, 1);
        spec.regions[0].class = 9;
        assert!(spec.validate().is_err());

        let mut spec = make_complementary_spec(32, 32, 1);
        spec.regions.retain(|r| r.class != 2);
        assert!(spec.validate().is_err(), "unused class must be rejected");

        let mut spec = make_complementary_spec(32, 32, 1);
        spec.regions[0].shape = RegionShape::Rect { row: 30, col: 0, height: 5, width: 32 };
        assert!(spec.validate().is_err(), "out-of-bounds region must be rejected");
    }
}
