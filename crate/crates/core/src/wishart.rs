//! Complex Wishart statistics for multilook PolSAR covariance matrices:
//! log-density, the likelihood-derived distance `Tr(S^-1 C) + ln det S`,
//! sample-center estimation, and multilook sampling.
//!
//! All factorizations go through a complex Cholesky decomposition; centers
//! are diagonally loaded before inversion so near-homogeneous patches with
//! rank-deficient means stay factorable.

use num_complex::Complex64;
use rand::Rng;

use crate::error::{Error, Result};
use crate::polsar::{HermitianCov3, Sample};

/// Scattering-vector dimension for full-polarimetric data.
pub const FULL_POL_DIM: usize = 3;

/// Relative diagonal load applied to centers before inversion:
/// `eps = 1e-6 * trace / q`.
const REG_SCALE: f64 = 1e-6;

/// Parameters of a complex Wishart distribution over 3x3 covariance
/// matrices: look count, scattering-vector dimension, and a center that is
/// strictly positive definite after regularization.
#[derive(Debug, Clone)]
pub struct WishartParams {
    pub looks: u32,
    pub q: usize,
    pub center: HermitianCov3,
}

impl WishartParams {
    /// Builds parameters around a regularized copy of `center`.
    pub fn new(looks: u32, center: HermitianCov3) -> Result<Self> {
        if looks == 0 {
            return Err(Error::validation("look count must be >= 1"));
        }
        Ok(Self { looks, q: FULL_POL_DIM, center: regularize(&center) })
    }
}

/// Diagonal loading: `sigma + (1e-6 * trace(sigma) / q) * I`, with an
/// absolute floor for the degenerate all-zero matrix.
pub fn regularize(sigma: &HermitianCov3) -> HermitianCov3 {
    let eps = (REG_SCALE * sigma.trace() / FULL_POL_DIM as f64).max(1e-12);
    sigma.add_scaled_identity(eps)
}

/// Mean covariance matrix of a sample's pixels (for the given band slot),
/// regularized so it is strictly positive definite.
pub fn sample_center(sample: &Sample, band: usize) -> Result<HermitianCov3> {
    let n = sample.pixels();
    let mut acc = HermitianCov3::zero();
    for i in 0..n {
        acc = acc.add(&sample.pixel_covariance(i, band)?);
    }
    Ok(regularize(&acc.scale(1.0 / n as f64)))
}

// ---------------------------------------------------------------------------
// Complex Cholesky machinery (general small n; q is 1 in scalar reductions
// and 3 for full-pol data).
// ---------------------------------------------------------------------------

/// Lower-triangular Cholesky factor of an n x n Hermitian positive-definite
/// matrix given row-major. Fails on a non-positive pivot.
fn cholesky_lower(n: usize, a: &[Complex64]) -> Result<Vec<Complex64>> {
    debug_assert_eq!(a.len(), n * n);
    let mut l = vec![Complex64::new(0.0, 0.0); n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut acc = a[i * n + j];
            for k in 0..j {
                acc -= l[i * n + k] * l[j * n + k].conj();
            }
            if i == j {
                let pivot = acc.re;
                if !(pivot > 0.0) || !pivot.is_finite() {
                    return Err(Error::numerical(format!(
                        "Cholesky pivot {pivot:.6e} at index {i} is not positive"
                    )));
                }
                l[i * n + i] = Complex64::new(pivot.sqrt(), 0.0);
            } else {
                l[i * n + j] = acc / l[j * n + j];
            }
        }
    }
    Ok(l)
}

fn log_det_from_factor(n: usize, l: &[Complex64]) -> f64 {
    (0..n).map(|i| 2.0 * l[i * n + i].re.ln()).sum()
}

/// `Tr(S^-1 C)` given the Cholesky factor L of S: solves L y = c_j and
/// L^H x = y per column and accumulates the diagonal.
fn trace_solve(n: usize, l: &[Complex64], c: &[Complex64]) -> f64 {
    let mut trace = 0.0;
    let mut y = vec![Complex64::new(0.0, 0.0); n];
    let mut x = vec![Complex64::new(0.0, 0.0); n];
    for j in 0..n {
        for i in 0..n {
            let mut acc = c[i * n + j];
            for k in 0..i {
                acc -= l[i * n + k] * y[k];
            }
            y[i] = acc / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut acc = y[i];
            for k in (i + 1)..n {
                acc -= l[k * n + i].conj() * x[k];
            }
            x[i] = acc / l[i * n + i];
        }
        trace += x[j].re;
    }
    trace
}

fn cov_to_slice(c: &HermitianCov3) -> [Complex64; 9] {
    let m = c.entries();
    [
        m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
    ]
}

/// A factored Wishart center: Cholesky lower factor, explicit inverse, and
/// log determinant, precomputed once so per-pixel distances are cheap.
#[derive(Debug, Clone)]
pub struct CenterFactor {
    lower: [Complex64; 9],
    inverse: [Complex64; 9],
    log_det: f64,
}

impl CenterFactor {
    /// Factors a (regularized) center. Fails with a numerical error when the
    /// matrix is not positive definite.
    pub fn new(sigma: &HermitianCov3) -> Result<Self> {
        let a = cov_to_slice(sigma);
        let l = cholesky_lower(3, &a)?;
        let log_det = log_det_from_factor(3, &l);

        // Invert the triangular factor, then S^-1 = T^H T with T = L^-1.
        let mut t = [Complex64::new(0.0, 0.0); 9];
        for i in 0..3 {
            t[i * 3 + i] = Complex64::new(1.0, 0.0) / l[i * 3 + i];
            for j in 0..i {
                let mut acc = Complex64::new(0.0, 0.0);
                for k in j..i {
                    acc -= l[i * 3 + k] * t[k * 3 + j];
                }
                t[i * 3 + j] = acc / l[i * 3 + i];
            }
        }
        let mut inverse = [Complex64::new(0.0, 0.0); 9];
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = Complex64::new(0.0, 0.0);
                for k in 0..3 {
                    acc += t[k * 3 + i].conj() * t[k * 3 + j];
                }
                inverse[i * 3 + j] = acc;
            }
        }
        let mut lower = [Complex64::new(0.0, 0.0); 9];
        lower.copy_from_slice(&l);
        Ok(Self { lower, inverse, log_det })
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// `Tr(S^-1 C)`, real for Hermitian inputs.
    pub fn trace_inv_product(&self, c: &HermitianCov3) -> f64 {
        let m = c.entries();
        let mut acc = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let prod = self.inverse[i * 3 + j] * m[j][i];
                acc += prod.re;
            }
        }
        acc
    }

    /// Wishart distance `Tr(S^-1 C) + ln det S` against this center.
    pub fn distance(&self, c: &HermitianCov3) -> f64 {
        self.trace_inv_product(c) + self.log_det
    }

    /// One multilook draw: the average of `looks` outer products of
    /// circular complex Gaussian scattering vectors with covariance S.
    pub fn sample(&self, looks: u32, rng: &mut impl Rng) -> HermitianCov3 {
        let mut acc = [[Complex64::new(0.0, 0.0); 3]; 3];
        for _ in 0..looks {
            let u = [
                standard_complex_normal(rng),
                standard_complex_normal(rng),
                standard_complex_normal(rng),
            ];
            // z = L u has covariance L L^H = S.
            let mut z = [Complex64::new(0.0, 0.0); 3];
            for i in 0..3 {
                for (k, &uk) in u.iter().enumerate().take(i + 1) {
                    z[i] += self.lower[i * 3 + k] * uk;
                }
            }
            for i in 0..3 {
                for j in 0..3 {
                    acc[i][j] += z[i] * z[j].conj();
                }
            }
        }
        let inv_l = 1.0 / f64::from(looks);
        let diag = |z: Complex64| z.re * inv_l;
        let off = |z: Complex64| z * inv_l;
        HermitianCov3::from_upper(
            diag(acc[0][0]),
            off(acc[0][1]),
            off(acc[0][2]),
            diag(acc[1][1]),
            off(acc[1][2]),
            diag(acc[2][2]),
        )
        .expect("outer-product construction is Hermitian PSD")
    }
}

/// Standard circular complex Gaussian scalar (E[z conj(z)] = 1) via one
/// Box-Muller pair, kept explicit so draws are reproducible across
/// platforms and crate versions.
fn standard_complex_normal(rng: &mut impl Rng) -> Complex64 {
    let u1: f64 = rng.random();
    let u2: f64 = rng.random();
    let r = (-2.0 * (1.0 - u1).ln()).sqrt();
    let theta = std::f64::consts::TAU * u2;
    // Each real component has variance 1/2.
    Complex64::new(r * theta.cos(), r * theta.sin()) * std::f64::consts::FRAC_1_SQRT_2
}

/// Wishart distance `Tr(S^-1 C) + ln det S` (natural log, determinant).
pub fn wishart_distance(c: &HermitianCov3, sigma: &HermitianCov3) -> Result<f64> {
    Ok(CenterFactor::new(sigma)?.distance(c))
}

/// ln Gamma(n) for integer n >= 1, as the log factorial sum.
fn ln_gamma_int(n: u32) -> f64 {
    (2..n).map(|k| f64::from(k).ln()).sum()
}

/// Log normalizer of the complex Wishart density:
/// `ln K(L,q) = q(q-1)/2 * ln pi + sum_{i=1..q} ln Gamma(L-i+1)`.
fn ln_normalizer(looks: u32, q: usize) -> Result<f64> {
    if (looks as usize) < q {
        return Err(Error::validation(format!(
            "look count {looks} < dimension {q}: density is degenerate"
        )));
    }
    let qf = q as f64;
    let mut acc = qf * (qf - 1.0) / 2.0 * std::f64::consts::PI.ln();
    for i in 1..=q {
        acc += ln_gamma_int(looks - i as u32 + 1);
    }
    Ok(acc)
}

/// Log density of the complex Wishart distribution for a general dimension
/// `q` (row-major `q*q` Hermitian matrices):
///
/// `ln p = Lq ln L + (L-q) ln|C| - L Tr(S^-1 C) - ln K(L,q) - L ln|S|`
pub fn wishart_log_pdf_dim(
    c: &[Complex64],
    sigma: &[Complex64],
    q: usize,
    looks: u32,
) -> Result<f64> {
    let ln_k = ln_normalizer(looks, q)?;
    let lc = cholesky_lower(q, c)?;
    let ls = cholesky_lower(q, sigma)?;
    let log_det_c = log_det_from_factor(q, &lc);
    let log_det_s = log_det_from_factor(q, &ls);
    let trace = trace_solve(q, &ls, c);
    let lf = f64::from(looks);
    let qf = q as f64;
    Ok(lf * qf * lf.ln() + (lf - qf) * log_det_c - lf * trace - ln_k - lf * log_det_s)
}

/// Log density of a 3x3 covariance matrix under `params` (Eq. form above
/// with q = 3). `C` must be positive definite and `L >= q`.
pub fn wishart_log_pdf(c: &HermitianCov3, params: &WishartParams) -> Result<f64> {
    wishart_log_pdf_dim(
        &cov_to_slice(c),
        &cov_to_slice(&params.center),
        params.q,
        params.looks,
    )
}

/// Draws one multilook covariance matrix `C = (1/L) sum z_k z_k^H` with
/// `z_k` i.i.d. circular complex Gaussian vectors of covariance `center`.
/// `E[C] = center`; the output is Hermitian PSD by construction.
pub fn sample_wishart(params: &WishartParams, rng: &mut impl Rng) -> Result<HermitianCov3> {
    if (params.looks as usize) < params.q {
        return Err(Error::validation(format!(
            "sampling full-rank matrices requires looks >= {}, got {}",
            params.q, params.looks
        )));
    }
    Ok(CenterFactor::new(&params.center)?.sample(params.looks, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polsar::{vectorize_covariance, CHANNELS};
    use crate::seed::stream;

    fn random_spd(rng: &mut impl Rng, scale: f64) -> HermitianCov3 {
        let mut m = [[Complex64::new(0.0, 0.0); 3]; 3];
        let mut a = [[Complex64::new(0.0, 0.0); 3]; 3];
        for row in &mut a {
            for z in row.iter_mut() {
                *z = Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            }
        }
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = Complex64::new(0.0, 0.0);
                for k in 0..3 {
                    acc += a[i][k] * a[j][k].conj();
                }
                m[i][j] = acc * scale;
            }
            m[i][i] += 0.1 * scale;
        }
        HermitianCov3::from_entries(m).unwrap()
    }

    #[test]
    fn distance_identity_is_exactly_three() {
        let i = HermitianCov3::identity();
        let d = wishart_distance(&i, &i).unwrap();
        assert_eq!(d, 3.0);
    }

    #[test]
    fn distance_halved_center() {
        // Tr((2I)^-1 I) + ln det 2I = 1.5 + 3 ln 2.
        let d = wishart_distance(&HermitianCov3::identity(), &HermitianCov3::diagonal(2.0, 2.0, 2.0))
            .unwrap();
        let expected = 1.5 + 3.0 * 2.0_f64.ln();
        assert!((d - expected).abs() < 1e-12, "d = {d}, expected {expected}");
        assert!((d - 3.5794415416798357).abs() < 1e-12);
    }

    #[test]
    fn distance_ranking_equals_trace_ranking() {
        let mut rng = stream(3, &[0]);
        let sigma = random_spd(&mut rng, 1.0);
        let factor = CenterFactor::new(&sigma).unwrap();
        let pixels: Vec<HermitianCov3> = (0..50).map(|_| random_spd(&mut rng, 1.0)).collect();
        let mut by_distance: Vec<usize> = (0..pixels.len()).collect();
        by_distance.sort_by(|&a, &b| {
            factor
                .distance(&pixels[a])
                .total_cmp(&factor.distance(&pixels[b]))
                .then(a.cmp(&b))
        });
        let mut by_trace: Vec<usize> = (0..pixels.len()).collect();
        by_trace.sort_by(|&a, &b| {
            factor
                .trace_inv_product(&pixels[a])
                .total_cmp(&factor.trace_inv_product(&pixels[b]))
                .then(a.cmp(&b))
        });
        assert_eq!(by_distance, by_trace);
    }

    #[test]
    fn distance_is_affine_in_the_matrix_argument() {
        let mut rng = stream(3, &[1]);
        for _ in 0..50 {
            let sigma = random_spd(&mut rng, 1.0);
            let c1 = random_spd(&mut rng, 1.0);
            let c2 = random_spd(&mut rng, 2.0);
            let a: f64 = rng.random_range(0.0..1.0);
            let mix = c1.scale(a).add(&c2.scale(1.0 - a));
            let lhs = wishart_distance(&mix, &sigma).unwrap();
            let rhs = a * wishart_distance(&c1, &sigma).unwrap()
                + (1.0 - a) * wishart_distance(&c2, &sigma).unwrap();
            assert!((lhs - rhs).abs() < 1e-10, "affine identity violated: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn argmin_distance_equals_argmin_trace() {
        let mut rng = stream(3, &[2]);
        for _ in 0..100 {
            let sigma = random_spd(&mut rng, 1.0);
            let factor = CenterFactor::new(&sigma).unwrap();
            let set: Vec<HermitianCov3> = (0..12).map(|_| random_spd(&mut rng, 1.0)).collect();
            let argmin_d = (0..set.len())
                .min_by(|&a, &b| factor.distance(&set[a]).total_cmp(&factor.distance(&set[b])))
                .unwrap();
            let argmin_t = (0..set.len())
                .min_by(|&a, &b| {
                    factor
                        .trace_inv_product(&set[a])
                        .total_cmp(&factor.trace_inv_product(&set[b]))
                })
                .unwrap();
            assert_eq!(argmin_d, argmin_t);
        }
    }

    #[test]
    fn log_pdf_reduces_to_exponential_for_single_look_scalar() {
        // q = 1, L = 1, sigma = 1: p(c) = exp(-c).
        let sigma = [Complex64::new(1.0, 0.0)];
        for c in [0.1, 0.5, 1.0, 2.5, 7.0] {
            let lp = wishart_log_pdf_dim(&[Complex64::new(c, 0.0)], &sigma, 1, 1).unwrap();
            assert!((lp + c).abs() < 1e-12, "log p({c}) = {lp}, expected {}", -c);
        }
    }

    #[test]
    fn log_pdf_two_look_scalar_value() {
        // q = 1, L = 2, sigma = 1: p(c) = 4 c exp(-2c); log p(1) = ln 4 - 2.
        let lp = wishart_log_pdf_dim(
            &[Complex64::new(1.0, 0.0)],
            &[Complex64::new(1.0, 0.0)],
            1,
            2,
        )
        .unwrap();
        assert!((lp - (4.0_f64.ln() - 2.0)).abs() < 1e-12);
    }

    #[test]
    fn log_pdf_rejects_degenerate_looks() {
        let params = WishartParams::new(2, HermitianCov3::identity()).unwrap();
        assert!(wishart_log_pdf(&HermitianCov3::identity(), &params).is_err());
        assert!(sample_wishart(&params, &mut stream(0, &[])).is_err());
    }

    #[test]
    fn log_pdf_is_maximized_at_the_observed_matrix() {
        // Over scaled centers t*C the density of C peaks at t = 1.
        let mut rng = stream(9, &[4]);
        let c = random_spd(&mut rng, 1.0);
        let mut best_t = 0.0;
        let mut best = f64::NEG_INFINITY;
        let mut t = 0.5;
        while t <= 2.0 {
            let params = WishartParams::new(4, c.scale(t)).unwrap();
            let lp = wishart_log_pdf(&c, &params).unwrap();
            if lp > best {
                best = lp;
                best_t = t;
            }
            t += 0.01;
        }
        assert!(
            (best_t - 1.0).abs() < 0.011,
            "grid argmax at t = {best_t}, expected 1.0"
        );
    }

    #[test]
    fn scalar_density_integrates_to_one() {
        // Composite Simpson over (0, 60] for several look counts.
        for looks in [1u32, 2, 4, 8] {
            let sigma = [Complex64::new(1.0, 0.0)];
            let n = 60_000;
            let h = 60.0 / n as f64;
            let f = |x: f64| -> f64 {
                if x <= 0.0 {
                    return 0.0;
                }
                wishart_log_pdf_dim(&[Complex64::new(x, 0.0)], &sigma, 1, looks)
                    .unwrap()
                    .exp()
            };
            let mut acc = f(1e-300) + f(60.0);
            for k in 1..n {
                let x = k as f64 * h;
                acc += f(x) * if k % 2 == 1 { 4.0 } else { 2.0 };
            }
            let integral = acc * h / 3.0;
            assert!(
                (integral - 1.0).abs() < 1e-4,
                "L = {looks}: integral = {integral}"
            );
        }
    }

    #[test]
    fn draws_are_hermitian_with_nonnegative_diagonal() {
        let mut rng = stream(11, &[0]);
        let params = WishartParams::new(4, random_spd(&mut rng, 2.0)).unwrap();
        for _ in 0..100 {
            let c = sample_wishart(&params, &mut rng).unwrap();
            for i in 0..3 {
                assert!(c.entry(i, i).re >= 0.0);
                assert_eq!(c.entry(i, i).im, 0.0);
                for j in 0..3 {
                    assert_eq!(c.entry(i, j), c.entry(j, i).conj());
                }
            }
            assert!(c.min_eigenvalue() >= -1e-12 * c.trace());
        }
    }

    #[test]
    fn same_seed_gives_identical_draw_sequence() {
        let params = WishartParams::new(4, HermitianCov3::diagonal(1.0, 2.0, 3.0)).unwrap();
        let draws = |seed: u64| -> Vec<HermitianCov3> {
            let mut rng = stream(seed, &[7]);
            (0..20).map(|_| sample_wishart(&params, &mut rng).unwrap()).collect()
        };
        assert_eq!(draws(5), draws(5));
        assert_ne!(draws(5), draws(6));
    }

    #[test]
    fn sampler_mean_matches_center() {
        let center = HermitianCov3::diagonal(1.0, 2.0, 3.0);
        let params = WishartParams::new(4, center).unwrap();
        let mut rng = stream(13, &[0]);
        let mut acc = HermitianCov3::zero();
        let n = 10_000;
        for _ in 0..n {
            acc = acc.add(&sample_wishart(&params, &mut rng).unwrap());
        }
        let mean = acc.scale(1.0 / f64::from(n));
        let rel = mean.sub(&center).norm() / center.norm();
        assert!(rel < 0.05, "relative Frobenius error {rel}");
    }

    #[test]
    fn sampler_diagonal_variance_matches_theory() {
        // Var(C_ii) = sigma_ii^2 / L for the multilook average.
        let center = HermitianCov3::diagonal(1.0, 2.0, 3.0);
        let looks = 4u32;
        let params = WishartParams::new(looks, center).unwrap();
        let mut rng = stream(13, &[1]);
        let n = 10_000;
        let mut sums = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        for _ in 0..n {
            let c = sample_wishart(&params, &mut rng).unwrap();
            for i in 0..3 {
                let d = c.entry(i, i).re;
                sums[i] += d;
                sq[i] += d * d;
            }
        }
        for i in 0..3 {
            let mean = sums[i] / f64::from(n);
            let var = sq[i] / f64::from(n) - mean * mean;
            let expected = center.entry(i, i).re.powi(2) / f64::from(looks);
            let rel = (var - expected).abs() / expected;
            assert!(rel < 0.10, "diagonal {i}: var {var} vs expected {expected}");
        }
    }

    #[test]
    fn sample_center_is_the_pixel_mean() {
        // Identical pixels: center equals the pixel value up to the load.
        let c = HermitianCov3::diagonal(2.0, 2.0, 2.0);
        let v = vectorize_covariance(&c);
        let patch: Vec<f64> = v.0.iter().copied().cycle().take(9 * 16).collect();
        let sample = Sample {
            patch,
            window: 4,
            channels: CHANNELS,
            label: 0,
            origin: (0, 0),
            band_tag: "b1".into(),
        };
        let center = sample_center(&sample, 0).unwrap();
        assert!(center.sub(&c).norm() < 1e-5 * c.norm());

        // Two distinct pixel populations: arithmetic mean.
        let a = vectorize_covariance(&HermitianCov3::diagonal(2.0, 2.0, 2.0));
        let b = vectorize_covariance(&HermitianCov3::diagonal(4.0, 4.0, 4.0));
        let mut patch = Vec::new();
        for v in [&a, &b, &a, &b] {
            patch.extend_from_slice(&v.0);
        }
        let sample = Sample {
            patch,
            window: 2,
            channels: CHANNELS,
            label: 0,
            origin: (0, 0),
            band_tag: "b1".into(),
        };
        let center = sample_center(&sample, 0).unwrap();
        let expected = HermitianCov3::diagonal(3.0, 3.0, 3.0);
        assert!(center.sub(&expected).norm() < 1e-5 * expected.norm());
    }

    #[test]
    fn sample_center_matches_elementwise_mean_oracle() {
        let mut rng = stream(17, &[0]);
        let n = 6;
        let mut patch = Vec::new();
        let mut oracle = HermitianCov3::zero();
        for _ in 0..n * n {
            let c = random_spd(&mut rng, 1.0);
            oracle = oracle.add(&c);
            patch.extend_from_slice(&vectorize_covariance(&c).0);
        }
        // The oracle accumulates f64-rounded features exactly like the sample
        // path, after the same vectorize/devectorize round trip (exact).
        let oracle = regularize(&oracle.scale(1.0 / (n * n) as f64));
        let sample = Sample {
            patch,
            window: n,
            channels: CHANNELS,
            label: 0,
            origin: (0, 0),
            band_tag: "b1".into(),
        };
        let center = sample_center(&sample, 0).unwrap();
        assert!(center.sub(&oracle).norm() <= 1e-12 * oracle.norm().max(1.0));
    }
}
