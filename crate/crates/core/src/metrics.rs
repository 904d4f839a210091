//! Classification accuracy assessment: confusion matrices, overall and
//! average accuracy, Cohen's kappa, and color-coded map rendering.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::polsar::UNLABELED;

/// Integer confusion counts; `counts[truth * M + pred]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self { num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn record(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.num_classes + pred] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        self.counts[i * self.num_classes..(i + 1) * self.num_classes]
            .iter()
            .sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        (0..self.num_classes)
            .map(|i| self.counts[i * self.num_classes + j])
            .sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        debug_assert_eq!(self.num_classes, other.num_classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        (0..self.num_classes)
            .map(|i| self.counts[i * self.num_classes..(i + 1) * self.num_classes].to_vec())
            .collect()
    }
}

/// Exact counting of (label, prediction) pairs; unlabeled (255) pixels are
/// skipped, out-of-range class indices are rejected.
pub fn accumulate(preds: &[u8], labels: &[u8], num_classes: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::validation(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(num_classes);
    for (i, (&p, &l)) in preds.iter().zip(labels).enumerate() {
        if l == UNLABELED {
            continue;
        }
        if usize::from(l) >= num_classes {
            return Err(Error::validation(format!(
                "label {l} at index {i} exceeds class count {num_classes}"
            )));
        }
        if usize::from(p) >= num_classes {
            return Err(Error::validation(format!(
                "prediction {p} at index {i} exceeds class count {num_classes}"
            )));
        }
        cm.record(usize::from(l), usize::from(p));
    }
    Ok(cm)
}

/// Summary metrics. `kappa` is `None` in the degenerate case `p_e == 1`;
/// classes absent from the reference (zero row sum) are excluded from AA
/// and listed in `excluded_classes`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub per_class_accuracy: Vec<Option<f64>>,
    #[serde(rename = "OA")]
    pub oa: f64,
    #[serde(rename = "AA")]
    pub aa: f64,
    pub kappa: Option<f64>,
    pub confusion: Vec<Vec<u64>>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub excluded_classes: Vec<usize>,
}

/// Overall accuracy, average per-class accuracy, and Cohen's kappa:
/// `OA = sum F(i,i) / N`, `AA = mean_i F(i,i)/rowsum(i)`,
/// `kappa = (OA - p_e) / (1 - p_e)` with
/// `p_e = sum_i rowsum(i) * colsum(i) / N^2`.
pub fn oa_aa_kappa(cm: &ConfusionMatrix) -> Result<Metrics> {
    let n = cm.total();
    if n == 0 {
        return Err(Error::validation("empty confusion matrix"));
    }
    let nf = n as f64;
    let m = cm.num_classes;
    let diag: u64 = (0..m).map(|i| cm.counts[i * m + i]).sum();
    let oa = diag as f64 / nf;

    let mut per_class = Vec::with_capacity(m);
    let mut excluded = Vec::new();
    let mut aa_sum = 0.0;
    let mut aa_count = 0usize;
    for i in 0..m {
        let row = cm.row_sum(i);
        if row == 0 {
            per_class.push(None);
            excluded.push(i);
        } else {
            let acc = cm.counts[i * m + i] as f64 / row as f64;
            per_class.push(Some(acc));
            aa_sum += acc;
            aa_count += 1;
        }
    }
    let aa = aa_sum / aa_count.max(1) as f64;

    let pe: f64 = (0..m)
        .map(|i| cm.row_sum(i) as f64 * cm.col_sum(i) as f64)
        .sum::<f64>()
        / (nf * nf);
    let kappa = if (pe - 1.0).abs() < 1e-15 {
        None
    } else {
        Some((oa - pe) / (1.0 - pe))
    };
    Ok(Metrics {
        per_class_accuracy: per_class,
        oa,
        aa,
        kappa,
        confusion: cm.rows(),
        excluded_classes: excluded,
    })
}

/// Colors a class raster with the palette; unlabeled pixels render black.
/// The palette must cover every class index that appears.
pub fn render_map(preds: &[u8], palette: &[[u8; 3]]) -> Result<Vec<u8>> {
    let mut rgb = Vec::with_capacity(preds.len() * 3);
    for (i, &p) in preds.iter().enumerate() {
        if p == UNLABELED {
            rgb.extend_from_slice(&[0, 0, 0]);
            continue;
        }
        let Some(color) = palette.get(usize::from(p)) else {
            return Err(Error::validation(format!(
                "class {p} at pixel {i} has no palette entry ({} provided)",
                palette.len()
            )));
        };
        rgb.extend_from_slice(color);
    }
    Ok(rgb)
}

/// Inverts [`render_map`] for an injective palette (black maps back to
/// unlabeled).
pub fn parse_map(rgb: &[u8], palette: &[[u8; 3]]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(rgb.len() / 3);
    for px in rgb.chunks_exact(3) {
        if px == [0, 0, 0] {
            out.push(UNLABELED);
            continue;
        }
        let class = palette
            .iter()
            .position(|c| c == px)
            .ok_or_else(|| Error::format(format!("color {px:?} not in palette")))?;
        out.push(class as u8);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use std::collections::HashMap;

    fn from_rows(rows: &[&[u64]]) -> ConfusionMatrix {
        let m = rows.len();
        let mut cm = ConfusionMatrix::new(m);
        for (i, row) in rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                cm.counts[i * m + j] = v;
            }
        }
        cm
    }

    #[test]
    fn perfect_predictions_fill_the_diagonal() {
        let preds = vec![0u8, 1, 2, 0, 1, 2];
        let cm = accumulate(&preds, &preds, 3).unwrap();
        let metrics = oa_aa_kappa(&cm).unwrap();
        assert_eq!(metrics.oa, 1.0);
        assert_eq!(metrics.aa, 1.0);
        assert_eq!(metrics.kappa, Some(1.0));
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(cm.counts[i * 3 + j], u64::from(i == j) * 2);
            }
        }
    }

    #[test]
    fn empty_input_gives_zero_matrix() {
        let cm = accumulate(&[], &[], 3).unwrap();
        assert_eq!(cm.total(), 0);
        assert!(oa_aa_kappa(&cm).is_err());
    }

    #[test]
    fn unlabeled_pixels_are_skipped_and_bad_classes_rejected() {
        let cm = accumulate(&[0, 1, 0], &[0, UNLABELED, 1], 2).unwrap();
        assert_eq!(cm.total(), 2);
        assert!(accumulate(&[5], &[0], 2).is_err());
        assert!(accumulate(&[0], &[4], 2).is_err());
    }

    #[test]
    fn counts_match_hash_map_tally_oracle() {
        let mut rng = crate::seed::stream(31, &[0]);
        let m = 5usize;
        let n = 10_000;
        let labels: Vec<u8> = (0..n)
            .map(|_| {
                if rng.random_range(0..10) == 0 {
                    UNLABELED
                } else {
                    rng.random_range(0..m as u8)
                }
            })
            .collect();
        let preds: Vec<u8> = (0..n).map(|_| rng.random_range(0..m as u8)).collect();
        let cm = accumulate(&preds, &labels, m).unwrap();
        let mut tally: HashMap<(u8, u8), u64> = HashMap::new();
        for (&p, &l) in preds.iter().zip(&labels) {
            if l != UNLABELED {
                *tally.entry((l, p)).or_default() += 1;
            }
        }
        for i in 0..m {
            for j in 0..m {
                let want = tally.get(&(i as u8, j as u8)).copied().unwrap_or(0);
                assert_eq!(cm.counts[i * m + j], want, "cell ({i},{j})");
            }
        }
    }

    #[test]
    fn hand_computed_fixture() {
        let cm = from_rows(&[&[50, 10], &[10, 30]]);
        let metrics = oa_aa_kappa(&cm).unwrap();
        assert!((metrics.oa - 0.8).abs() < 1e-12);
        assert!((metrics.aa - 0.791_666_666_666_666_7).abs() < 1e-6);
        // p_e = (60*60 + 40*40) / 100^2 = 0.52.
        assert!((metrics.kappa.unwrap() - 0.583_333_333_333_333_3).abs() < 1e-6);
    }

    #[test]
    fn kappa_undefined_for_degenerate_agreement() {
        let cm = from_rows(&[&[5, 0], &[0, 0]]);
        let metrics = oa_aa_kappa(&cm).unwrap();
        assert_eq!(metrics.kappa, None);
        assert_eq!(metrics.per_class_accuracy[1], None);
        assert_eq!(metrics.excluded_classes, vec![1]);
        assert_eq!(metrics.aa, 1.0, "absent class excluded from AA");
    }

    #[test]
    fn kappa_bounded_by_oa_and_one_only_on_diagonal() {
        let mut rng = crate::seed::stream(33, &[0]);
        for _ in 0..200 {
            let m = rng.random_range(2..5usize);
            let mut cm = ConfusionMatrix::new(m);
            for i in 0..m {
                for j in 0..m {
                    cm.counts[i * m + j] = rng.random_range(0..20);
                }
            }
            if cm.total() == 0 {
                continue;
            }
            let metrics = oa_aa_kappa(&cm).unwrap();
            let pe_in_range = metrics.kappa.is_some();
            if pe_in_range {
                let kappa = metrics.kappa.unwrap();
                let off_diag: u64 = (0..m)
                    .flat_map(|i| (0..m).map(move |j| (i, j)))
                    .filter(|&(i, j)| i != j)
                    .map(|(i, j)| cm.counts[i * m + j])
                    .sum();
                if off_diag == 0 {
                    assert!((kappa - 1.0).abs() < 1e-12);
                } else {
                    assert!(kappa < 1.0);
                }
                let pe: f64 = (0..m)
                    .map(|i| cm.row_sum(i) as f64 * cm.col_sum(i) as f64)
                    .sum::<f64>()
                    / (cm.total() as f64).powi(2);
                if pe > 0.0 && pe < 1.0 && metrics.oa >= pe {
                    assert!(kappa <= metrics.oa + 1e-12);
                }
            }
        }
    }

    #[test]
    fn metrics_invariant_under_class_permutation() {
        let cm = from_rows(&[&[40, 5, 2], &[7, 30, 3], &[1, 4, 20]]);
        let base = oa_aa_kappa(&cm).unwrap();
        // Permutation (0,1,2) -> (2,0,1) applied to rows and columns.
        let perm = [2usize, 0, 1];
        let mut pcm = ConfusionMatrix::new(3);
        for i in 0..3 {
            for j in 0..3 {
                pcm.counts[perm[i] * 3 + perm[j]] = cm.counts[i * 3 + j];
            }
        }
        let permuted = oa_aa_kappa(&pcm).unwrap();
        assert!((base.oa - permuted.oa).abs() < 1e-15);
        assert!((base.aa - permuted.aa).abs() < 1e-15);
        assert!((base.kappa.unwrap() - permuted.kappa.unwrap()).abs() < 1e-15);
    }

    #[test]
    fn map_rendering_round_trips() {
        let palette = [[200, 30, 30], [30, 200, 30], [30, 30, 200]];
        let preds = vec![0u8, 1, 2, UNLABELED, 1, 0];
        let rgb = render_map(&preds, &palette).unwrap();
        assert_eq!(rgb.len(), preds.len() * 3);
        assert_eq!(&rgb[0..3], &[200, 30, 30]);
        assert_eq!(&rgb[9..12], &[0, 0, 0]);
        let back = parse_map(&rgb, &palette).unwrap();
        assert_eq!(back, preds);

        // Single class renders a uniform color.
        let uni = render_map(&[1, 1, 1, 1], &palette).unwrap();
        assert!(uni.chunks_exact(3).all(|c| c == [30, 200, 30]));

        // Short palette is rejected.
        assert!(render_map(&[2], &palette[..2]).is_err());
    }

    #[test]
    fn metrics_report_serializes_with_expected_keys() {
        let cm = from_rows(&[&[50, 10], &[10, 30]]);
        let metrics = oa_aa_kappa(&cm).unwrap();
        let json = serde_json::to_string(&metrics).unwrap();
        for key in ["per_class_accuracy", "\"OA\"", "\"AA\"", "kappa", "confusion"] {
            assert!(json.contains(key), "missing {key} in {json}");
        }
    }
}
