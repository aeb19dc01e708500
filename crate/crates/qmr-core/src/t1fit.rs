//! Per-pixel three-parameter T1 recovery fitting.
//!
//! The signal model is `y(t) = A - B exp(-t / T1*)` with inversion time `t`
//! in milliseconds. Each pixel is fitted by Levenberg-Marquardt; for
//! magnitude (MOLLI) data the sign of the first k samples in inversion-time
//! order is restored by exhaustive search over k. The per-pixel SD error is
//! the standard error of the Look-Locker-corrected T1, propagated from the
//! Gauss-Newton covariance.

use nalgebra::{Matrix3, Vector3};
use ndarray::Array2;

use crate::error::{QmrError, Result};
use crate::stack::{ImageStack, RoiMask};

#[derive(Debug, Clone)]
pub struct T1FitConfig {
    /// Restore the polarity of magnitude data by exhaustive flip-point search.
    pub polarity_restore: bool,
    /// Emit Look-Locker-corrected T1 = T1* (B/A - 1).
    pub look_locker: bool,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
}

impl Default for T1FitConfig {
    fn default() -> Self {
        Self {
            polarity_restore: true,
            look_locker: true,
            max_iterations: 200,
            gradient_tolerance: 1e-10,
        }
    }
}

/// Result of one pixel fit.
#[derive(Debug, Clone, Copy)]
pub struct PixelFit {
    pub a: f64,
    pub b: f64,
    /// Apparent T1 in ms.
    pub t1_star: f64,
    /// Look-Locker-corrected T1 in ms.
    pub t1: f64,
    /// Standard error of the corrected T1 in ms (0 when not converged).
    pub sd: f64,
    /// RMS residual in signal units.
    pub residual: f64,
    pub converged: bool,
}

/// Per-pixel parameter and error maps.
#[derive(Debug, Clone)]
pub struct T1MapResult {
    pub a_map: Array2<f64>,
    pub b_map: Array2<f64>,
    pub t1_star_map: Array2<f64>,
    /// Present when the config asks for Look-Locker correction.
    pub t1_map: Option<Array2<f64>>,
    pub sd_map: Array2<f64>,
    pub residual_map: Array2<f64>,
    pub converged: Array2<bool>,
}

/// The forward signal model `y(t) = A - B exp(-t/T1*)`.
pub fn forward_signal(a: f64, b: f64, t1_star: f64, t_ms: f64) -> f64 {
    a - b * (-t_ms / t1_star).exp()
}

struct LmFit {
    theta: Vector3<f64>,
    rss: f64,
    jtj: Matrix3<f64>,
    converged: bool,
}

/// Levenberg-Marquardt on the three-parameter model for one sample vector.
fn lm_fit(tis: &[f64], ys: &[f64], config: &T1FitConfig) -> LmFit {
    let n = tis.len();
    let a0 = ys.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let ymin = ys.iter().cloned().fold(f64::INFINITY, f64::min);
    let b0 = a0 - ymin;
    let mut tis_sorted: Vec<f64> = tis.to_vec();
    tis_sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let t0 = tis_sorted[n / 2];
    let mut theta = Vector3::new(a0, b0.max(1e-6 * a0.max(1.0)), t0);

    let cost_of = |th: &Vector3<f64>| -> f64 {
        tis.iter()
            .zip(ys.iter())
            .map(|(&t, &y)| {
                let r = y - forward_signal(th[0], th[1], th[2], t);
                r * r
            })
            .sum()
    };

    let mut lambda = 1e-3;
    let mut cost = cost_of(&theta);
    let mut converged = false;
    let scale = a0.max(1.0);

    for _ in 0..config.max_iterations {
        let mut jtj = Matrix3::<f64>::zeros();
        let mut jtr = Vector3::<f64>::zeros();
        for (&t, &y) in tis.iter().zip(ys.iter()) {
            let e = (-t / theta[2]).exp();
            let f = theta[0] - theta[1] * e;
            let r = y - f;
            let j = Vector3::new(1.0, -e, -theta[1] * e * t / (theta[2] * theta[2]));
            jtj += j * j.transpose();
            jtr += j * r;
        }
        if jtr.amax() <= config.gradient_tolerance * scale {
            converged = true;
            break;
        }
        let mut stepped = false;
        for _ in 0..16 {
            let mut aug = jtj;
            for d in 0..3 {
                aug[(d, d)] += lambda * jtj[(d, d)].max(1e-12);
            }
            let delta = match aug.lu().solve(&jtr) {
                Some(d) => d,
                None => break,
            };
            let cand = theta + delta;
            if cand[2] <= 0.0 || !cand.iter().all(|v| v.is_finite()) {
                lambda *= 10.0;
                continue;
            }
            let cand_cost = cost_of(&cand);
            if cand_cost <= cost {
                let rel_drop = (cost - cand_cost) / cost.max(1e-300);
                theta = cand;
                cost = cand_cost;
                lambda = (lambda / 10.0).max(1e-12);
                stepped = true;
                if rel_drop < 1e-14 {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if converged {
            break;
        }
        if !stepped {
            // no acceptable step at any damping: stationary to solver precision
            converged = true;
            break;
        }
    }

    // final JtJ at the solution, for the covariance
    let mut jtj = Matrix3::<f64>::zeros();
    for &t in tis.iter() {
        let e = (-t / theta[2]).exp();
        let j = Vector3::new(1.0, -e, -theta[1] * e * t / (theta[2] * theta[2]));
        jtj += j * j.transpose();
    }
    LmFit {
        theta,
        rss: cost,
        jtj,
        converged,
    }
}

/// Fit one pixel. For magnitude data (`polarity_restore`), the first
/// k = 0..N-1 samples in inversion-time order are sign-flipped and the
/// best-residual fit wins.
pub fn fit_pixel(
    inversion_times_ms: &[f64],
    intensities: &[f64],
    config: &T1FitConfig,
) -> Result<PixelFit> {
    let n = inversion_times_ms.len();
    if n < 4 {
        return Err(QmrError::Validation(format!(
            "need at least 4 samples for a 3-parameter fit, got {n}"
        )));
    }
    if intensities.len() != n {
        return Err(QmrError::Validation(format!(
            "{} intensities for {} inversion times",
            intensities.len(),
            n
        )));
    }
    for &t in inversion_times_ms {
        if !(t.is_finite() && t > 0.0) {
            return Err(QmrError::Validation(
                "inversion times must be positive".into(),
            ));
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        inversion_times_ms[i]
            .partial_cmp(&inversion_times_ms[j])
            .unwrap()
    });
    for pair in order.windows(2) {
        if inversion_times_ms[pair[0]] == inversion_times_ms[pair[1]] {
            return Err(QmrError::Validation(
                "inversion times must be distinct".into(),
            ));
        }
    }

    let flips = if config.polarity_restore { n } else { 1 };
    let mut best: Option<LmFit> = None;
    for k in 0..flips {
        let mut ys = intensities.to_vec();
        for &idx in order.iter().take(k) {
            ys[idx] = -ys[idx];
        }
        let fit = lm_fit(inversion_times_ms, &ys, config);
        if best.as_ref().is_none_or(|b| fit.rss < b.rss) {
            best = Some(fit);
        }
    }
    let fit = best.expect("at least one candidate");
    Ok(finish_pixel(fit, n))
}

fn finish_pixel(fit: LmFit, n: usize) -> PixelFit {
    let (a, b, t1_star) = (fit.theta[0], fit.theta[1], fit.theta[2]);
    let residual = (fit.rss / n as f64).sqrt();

    // identifiability: B ~ 0 or A ~ 0 leaves T1* or the Look-Locker map
    // undetermined; a singular JtJ has no covariance
    let scale = a.abs().max(b.abs()).max(1.0);
    let identifiable = b.abs() > 1e-6 * scale && a.abs() > 1e-9 * scale && t1_star > 0.0;
    let inv = fit
        .jtj
        .try_inverse()
        .filter(|m| m.iter().all(|v| v.is_finite()));
    if !(fit.converged && identifiable) || inv.is_none() {
        return PixelFit {
            a,
            b,
            t1_star,
            t1: 0.0,
            sd: 0.0,
            residual,
            converged: false,
        };
    }
    let cov = inv.expect("checked") * (fit.rss / (n as f64 - 3.0)).max(0.0);
    let t1 = t1_star * (b / a - 1.0);
    // delta method through T1 = T1* (B/A - 1)
    let g = Vector3::new(-t1_star * b / (a * a), t1_star / a, b / a - 1.0);
    let var = (g.transpose() * cov * g)[(0, 0)];
    PixelFit {
        a,
        b,
        t1_star,
        t1,
        sd: var.max(0.0).sqrt(),
        residual,
        converged: true,
    }
}

/// Fit every pixel of a stack (restricted to `mask` when given). Pixels
/// outside the mask hold zeros and `converged = false`.
pub fn fit_map(
    stack: &ImageStack,
    mask: Option<&RoiMask>,
    config: &T1FitConfig,
) -> Result<T1MapResult> {
    let tis = stack
        .inversion_times_ms()
        .ok_or_else(|| QmrError::Config("stack has no inversion times".into()))?
        .to_vec();
    let (n, h, w) = stack.frames().dim();
    if n < 4 {
        return Err(QmrError::Validation(format!(
            "need at least 4 frames to fit, got {n}"
        )));
    }
    if let Some(m) = mask {
        m.check_dims(h, w)?;
    }
    let mut result = T1MapResult {
        a_map: Array2::zeros((h, w)),
        b_map: Array2::zeros((h, w)),
        t1_star_map: Array2::zeros((h, w)),
        t1_map: config.look_locker.then(|| Array2::zeros((h, w))),
        sd_map: Array2::zeros((h, w)),
        residual_map: Array2::zeros((h, w)),
        converged: Array2::from_elem((h, w), false),
    };
    let mut samples = vec![0.0; n];
    for y in 0..h {
        for x in 0..w {
            if let Some(m) = mask {
                if !m.mask()[[y, x]] {
                    continue;
                }
            }
            for (i, s) in samples.iter_mut().enumerate() {
                *s = stack.frames()[[i, y, x]];
            }
            let fit = fit_pixel(&tis, &samples, config)?;
            result.a_map[[y, x]] = fit.a;
            result.b_map[[y, x]] = fit.b;
            result.t1_star_map[[y, x]] = fit.t1_star;
            if let Some(t1) = result.t1_map.as_mut() {
                t1[[y, x]] = fit.t1;
            }
            result.sd_map[[y, x]] = fit.sd;
            result.residual_map[[y, x]] = fit.residual;
            result.converged[[y, x]] = fit.converged;
        }
    }
    Ok(result)
}

/// Mean and population standard deviation of `map` over the mask,
/// optionally restricted to converged pixels.
pub fn roi_stats(
    map: &Array2<f64>,
    mask: &RoiMask,
    converged: Option<&Array2<bool>>,
) -> Result<(f64, f64, usize)> {
    let (h, w) = map.dim();
    mask.check_dims(h, w)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            if mask.mask()[[y, x]] && converged.is_none_or(|c| c[[y, x]]) {
                sum += map[[y, x]];
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(QmrError::Degenerate(
            "no converged pixels inside the mask".into(),
        ));
    }
    let mean = sum / count as f64;
    let mut var = 0.0;
    for y in 0..h {
        for x in 0..w {
            if mask.mask()[[y, x]] && converged.is_none_or(|c| c[[y, x]]) {
                var += (map[[y, x]] - mean) * (map[[y, x]] - mean);
            }
        }
    }
    Ok((mean, (var / count as f64).sqrt(), count))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    const TIS: [f64; 7] = [100.0, 200.0, 400.0, 800.0, 1600.0, 3200.0, 6400.0];

    fn signed_samples(a: f64, b: f64, t1s: f64, tis: &[f64]) -> Vec<f64> {
        tis.iter().map(|&t| forward_signal(a, b, t1s, t)).collect()
    }

    #[test]
    fn noiseless_recovery_is_exact() {
        let ys = signed_samples(1000.0, 2000.0, 800.0, &TIS);
        let fit = fit_pixel(&TIS, &ys, &T1FitConfig::default()).unwrap();
        assert!(fit.converged);
        assert!((fit.a - 1000.0).abs() / 1000.0 <= 1e-6, "a {}", fit.a);
        assert!((fit.b - 2000.0).abs() / 2000.0 <= 1e-6, "b {}", fit.b);
        assert!(
            (fit.t1_star - 800.0).abs() / 800.0 <= 1e-6,
            "t1* {}",
            fit.t1_star
        );
        assert!((fit.t1 - 800.0).abs() / 800.0 <= 1e-6, "t1 {}", fit.t1);
    }

    #[test]
    fn constant_signal_is_flagged_unconverged() {
        let ys = vec![500.0; 7];
        let fit = fit_pixel(&TIS, &ys, &T1FitConfig::default()).unwrap();
        assert!(!fit.converged);
    }

    #[test]
    fn magnitude_data_matches_signed_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..25 {
            let a = rng.random_range(500.0..1500.0);
            let b = a * rng.random_range(1.7..2.0);
            let t1s = rng.random_range(200.0..2500.0);
            let signed = signed_samples(a, b, t1s, &TIS);
            let magnitude: Vec<f64> = signed.iter().map(|v| v.abs()).collect();
            let f_signed = fit_pixel(&TIS, &signed, &T1FitConfig::default()).unwrap();
            let f_mag = fit_pixel(&TIS, &magnitude, &T1FitConfig::default()).unwrap();
            assert!(f_signed.converged && f_mag.converged);
            assert!(
                (f_signed.t1_star - f_mag.t1_star).abs() / t1s <= 1e-6,
                "signed {} vs magnitude {}",
                f_signed.t1_star,
                f_mag.t1_star
            );
        }
    }

    #[test]
    fn forward_inverse_consistency_over_parameter_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let a = rng.random_range(200.0..2000.0);
            let b = a * rng.random_range(1.5..2.2);
            let t1s = rng.random_range(200.0..2500.0);
            let ys = signed_samples(a, b, t1s, &TIS);
            let fit = fit_pixel(&TIS, &ys, &T1FitConfig::default()).unwrap();
            assert!(fit.converged);
            assert!((fit.a - a).abs() / a <= 1e-6);
            assert!((fit.b - b).abs() / b <= 1e-6);
            assert!((fit.t1_star - t1s).abs() / t1s <= 1e-6);
        }
    }

    #[test]
    fn reported_sd_matches_monte_carlo() {
        let (a, b, t1s) = (1000.0, 1900.0, 1100.0);
        let clean = signed_samples(a, b, t1s, &TIS);
        let sigma = 25.0;
        let normal = Normal::new(0.0, sigma).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let config = T1FitConfig {
            polarity_restore: false,
            ..Default::default()
        };
        let mut t1_fitted = Vec::new();
        let mut sds = Vec::new();
        for _ in 0..2000 {
            let noisy: Vec<f64> = clean.iter().map(|&v| v + normal.sample(&mut rng)).collect();
            let fit = fit_pixel(&TIS, &noisy, &config).unwrap();
            if fit.converged {
                t1_fitted.push(fit.t1);
                sds.push(fit.sd);
            }
        }
        let n = t1_fitted.len() as f64;
        assert!(n > 1900.0);
        let mean = t1_fitted.iter().sum::<f64>() / n;
        let emp_std = (t1_fitted.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        let mean_sd = sds.iter().sum::<f64>() / n;
        let rel = (emp_std - mean_sd).abs() / emp_std;
        assert!(rel <= 0.2, "empirical {emp_std} vs reported {mean_sd}");
    }

    fn uniform_stack(a: f64, b: f64, t1s: f64, magnitude: bool) -> ImageStack {
        let tis: Vec<f64> = TIS.to_vec();
        let frames = Array3::from_shape_fn((tis.len(), 8, 8), |(i, _, _)| {
            let v = forward_signal(a, b, t1s, tis[i]);
            if magnitude {
                v.abs()
            } else {
                v
            }
        });
        ImageStack::new(frames, Some(tis), [1.0, 1.0]).unwrap()
    }

    #[test]
    fn uniform_phantom_map_is_constant() {
        let stack = uniform_stack(1000.0, 2000.0, 900.0, true);
        let result = fit_map(&stack, None, &T1FitConfig::default()).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                assert!(result.converged[[y, x]]);
                assert!((result.t1_star_map[[y, x]] - 900.0).abs() / 900.0 <= 1e-6);
            }
        }
    }

    #[test]
    fn single_pixel_mask_fits_one_pixel() {
        let stack = uniform_stack(800.0, 1500.0, 600.0, false);
        let mut m = Array2::from_elem((8, 8), false);
        m[[4, 5]] = true;
        let mask = RoiMask::new(m, "one").unwrap();
        let result = fit_map(&stack, Some(&mask), &T1FitConfig::default()).unwrap();
        let count = result.converged.iter().filter(|&&c| c).count();
        assert_eq!(count, 1);
        assert!(result.converged[[4, 5]]);
    }

    #[test]
    fn fit_map_requires_inversion_times() {
        let frames = Array3::zeros((5, 8, 8));
        let stack = ImageStack::new(frames, None, [1.0, 1.0]).unwrap();
        assert!(matches!(
            fit_map(&stack, None, &T1FitConfig::default()),
            Err(QmrError::Config(_))
        ));
    }

    #[test]
    fn roi_stats_closed_forms() {
        let mut map = Array2::zeros((8, 8));
        map[[0, 0]] = 1.0;
        map[[0, 1]] = 3.0;
        let mut m = Array2::from_elem((8, 8), false);
        m[[0, 0]] = true;
        m[[0, 1]] = true;
        let mask = RoiMask::new(m, "pair").unwrap();
        let (mean, std, count) = roi_stats(&map, &mask, None).unwrap();
        assert_eq!((mean, std, count), (2.0, 1.0, 2));

        let full = RoiMask::new(Array2::from_elem((8, 8), true), "all").unwrap();
        let cmap = Array2::from_elem((8, 8), 7.5);
        let (mean, std, count) = roi_stats(&cmap, &full, None).unwrap();
        assert_eq!((mean, std, count), (7.5, 0.0, 64));
    }

    #[test]
    fn roi_stats_matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let map = Array2::from_shape_fn((10, 10), |_| rng.random_range(-5.0..5.0));
        let maskbits = Array2::from_shape_fn((10, 10), |_| rng.random::<bool>());
        let mask = RoiMask::new(maskbits.clone(), "rand").unwrap();
        let (mean, std, count) = roi_stats(&map, &mask, None).unwrap();
        let vals: Vec<f64> = map
            .iter()
            .zip(maskbits.iter())
            .filter(|(_, &b)| b)
            .map(|(&v, _)| v)
            .collect();
        let omean = vals.iter().sum::<f64>() / vals.len() as f64;
        let ovar = vals.iter().map(|v| (v - omean) * (v - omean)).sum::<f64>() / vals.len() as f64;
        assert_eq!(count, vals.len());
        assert!((mean - omean).abs() <= 1e-12);
        assert!((std - ovar.sqrt()).abs() <= 1e-12);
    }

    #[test]
    fn roi_stats_empty_intersection_is_an_error() {
        let map = Array2::zeros((8, 8));
        let mut m = Array2::from_elem((8, 8), false);
        m[[0, 0]] = true;
        let mask = RoiMask::new(m, "corner").unwrap();
        let conv = Array2::from_elem((8, 8), false);
        assert!(roi_stats(&map, &mask, Some(&conv)).is_err());
    }

    #[test]
    fn rejects_too_few_or_duplicate_samples() {
        assert!(
            fit_pixel(&[100.0, 200.0, 300.0], &[1.0, 2.0, 3.0], &T1FitConfig::default()).is_err()
        );
        assert!(fit_pixel(
            &[100.0, 100.0, 300.0, 400.0],
            &[1.0, 2.0, 3.0, 4.0],
            &T1FitConfig::default()
        )
        .is_err());
    }
}
