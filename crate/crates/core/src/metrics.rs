//! Image-quality metrics on phase maps and the analytic dose/SNR estimates.

use nalgebra::{Matrix5, Vector5};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{fft2_centered, RealField};
use crate::phantom::{ObjectModel, SupportMask};

/// Pearson correlation of two images over the pixels of `region`.
pub fn correlation_r(img1: &RealField, img2: &RealField, region: &SupportMask) -> Result<f64> {
    check_same(img1.shape(), img2.shape())?;
    check_same(img1.shape(), region.shape())?;
    let n = region.count();
    if n == 0 {
        return Err(Error::EmptyRegion("correlation region has no pixels".into()));
    }
    let pairs = || {
        img1.data()
            .iter()
            .zip(img2.data())
            .zip(region.mask.iter())
            .filter(|(_, &m)| m)
            .map(|((&a, &b), _)| (a, b))
    };
    let (sa, sb) = pairs().fold((0.0, 0.0), |(x, y), (a, b)| (x + a, y + b));
    let (ma, mb) = (sa / n as f64, sb / n as f64);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (a, b) in pairs() {
        cov += (a - ma) * (b - mb);
        va += (a - ma) * (a - ma);
        vb += (b - mb) * (b - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::ZeroVariance("image is constant over the region".into()));
    }
    Ok((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

/// `√(r / (1 − r))`; negative correlations give 0 and `r ≥ 1` gives infinity.
pub fn snr_from_r(r: f64) -> f64 {
    if r >= 1.0 {
        f64::INFINITY
    } else if r <= 0.0 {
        0.0
    } else {
        (r / (1.0 - r)).sqrt()
    }
}

/// Mean squared phase difference over the support, optionally after
/// removing the mean in-support offset.
pub fn smse(truth: &ObjectModel, recon: &ObjectModel, support: &SupportMask, align_offset: bool) -> Result<f64> {
    smse_fields(&truth.phase, &recon.phase, support, align_offset)
}

pub fn smse_fields(truth: &RealField, recon: &RealField, support: &SupportMask, align_offset: bool) -> Result<f64> {
    check_same(truth.shape(), recon.shape())?;
    check_same(truth.shape(), support.shape())?;
    let n = support.count();
    if n == 0 {
        return Err(Error::EmptyRegion("empty support".into()));
    }
    let diffs: Vec<f64> = truth
        .data()
        .iter()
        .zip(recon.data())
        .zip(support.mask.iter())
        .filter(|(_, &m)| m)
        .map(|((&a, &b), _)| a - b)
        .collect();
    let c = if align_offset {
        diffs.iter().sum::<f64>() / n as f64
    } else {
        0.0
    };
    Ok(diffs.iter().map(|d| (d - c) * (d - c)).sum::<f64>() / n as f64)
}

/// Fourier ring correlation with one-frequency-pixel rings from 1 to N/2.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrcCurve {
    /// Ring centers, cycles per pixel.
    pub ring_freqs: Vec<f64>,
    pub frc_values: Vec<f64>,
    pub ring_counts: Vec<usize>,
    pub halfbit_threshold: Vec<f64>,
    /// Where the curve first drops below the threshold, as a fraction of Nyquist.
    pub crossing_fraction_of_nyquist: f64,
}

/// Half-bit threshold for a ring of `n` pixels.
pub fn halfbit_threshold(n: usize) -> f64 {
    let s = (n as f64).sqrt();
    (0.2071 + 1.9102 / s) / (1.2071 + 0.9102 / s)
}

pub fn frc(img1: &RealField, img2: &RealField) -> Result<FrcCurve> {
    check_same(img1.shape(), img2.shape())?;
    let (h, w) = img1.shape();
    if h != w {
        return Err(Error::Dimension(format!("FRC needs square images, got {h}x{w}")));
    }
    let n = h;
    let rings = n / 2;
    if rings == 0 {
        return Err(Error::Dimension("FRC needs at least 2x2 pixels".into()));
    }
    let f1 = fft2_centered(&img1.to_complex());
    let f2 = fft2_centered(&img2.to_complex());
    let c = (n / 2) as f64;
    let mut num = vec![0.0; rings + 1];
    let mut p1 = vec![0.0; rings + 1];
    let mut p2 = vec![0.0; rings + 1];
    let mut counts = vec![0usize; rings + 1];
    for ((i, j), a) in f1.data().indexed_iter() {
        let r = ((i as f64 - c).powi(2) + (j as f64 - c).powi(2)).sqrt().round() as usize;
        if r == 0 || r > rings {
            continue;
        }
        let b = f2.data()[[i, j]];
        num[r] += (a * b.conj()).re;
        p1[r] += a.norm_sqr();
        p2[r] += b.norm_sqr();
        counts[r] += 1;
    }
    let mut curve = FrcCurve {
        ring_freqs: Vec::with_capacity(rings),
        frc_values: Vec::with_capacity(rings),
        ring_counts: Vec::with_capacity(rings),
        halfbit_threshold: Vec::with_capacity(rings),
        crossing_fraction_of_nyquist: 1.0,
    };
    for r in 1..=rings {
        let denom = (p1[r] * p2[r]).sqrt();
        curve.ring_freqs.push(r as f64 / n as f64);
        curve.frc_values.push(if denom > 0.0 { (num[r] / denom).clamp(-1.0, 1.0) } else { 0.0 });
        curve.ring_counts.push(counts[r]);
        curve.halfbit_threshold.push(halfbit_threshold(counts[r].max(1)));
    }
    curve.crossing_fraction_of_nyquist = crossing(&curve);
    Ok(curve)
}

fn crossing(curve: &FrcCurve) -> f64 {
    let nyquist = 0.5;
    let d: Vec<f64> = curve
        .frc_values
        .iter()
        .zip(&curve.halfbit_threshold)
        .map(|(f, t)| f - t)
        .collect();
    for i in 0..d.len() {
        if d[i] < 0.0 {
            if i == 0 {
                return curve.ring_freqs[0] / nyquist;
            }
            let (u0, u1) = (curve.ring_freqs[i - 1], curve.ring_freqs[i]);
            let u = u0 + (u1 - u0) * d[i - 1] / (d[i - 1] - d[i]);
            return (u / nyquist).min(1.0);
        }
    }
    1.0
}

/// Result of a symmetric 2D Gaussian fit `A·exp(−r²/2σ²) + b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureFit {
    pub amplitude: f64,
    /// Row coordinate of the center.
    pub y0: f64,
    /// Column coordinate of the center.
    pub x0: f64,
    pub sigma: f64,
    pub offset: f64,
    /// Root-mean-square residual over the window.
    pub residual_rms: f64,
}

const FIT_MAX_ITERS: usize = 200;
const FIT_SIGMA_STARTS: [f64; 3] = [1.0, 2.5, 5.0];

/// Fits a symmetric Gaussian to the `window × window` square centered on
/// `center_hint = (row, col)`.
pub fn fit_feature_sigma(img: &RealField, center_hint: (usize, usize), window: usize) -> Result<FeatureFit> {
    let (h, w) = img.shape();
    let half = window / 2;
    let (cy, cx) = center_hint;
    if window < 5 || cy < half || cx < half || cy + (window - half) > h || cx + (window - half) > w {
        return Err(Error::OutOfBounds(format!(
            "fit window {window} at {center_hint:?} does not fit in {h}x{w}"
        )));
    }
    let (top, left) = (cy - half, cx - half);
    let mut pts = Vec::with_capacity(window * window);
    for i in 0..window {
        for j in 0..window {
            pts.push(((top + i) as f64, (left + j) as f64, img.data()[[top + i, left + j]]));
        }
    }
    let mean = pts.iter().map(|p| p.2).sum::<f64>() / pts.len() as f64;
    let var = pts.iter().map(|p| (p.2 - mean).powi(2)).sum::<f64>() / pts.len() as f64;
    if var <= 0.0 || !var.is_finite() {
        return Err(Error::NonConvergence("window is flat".into()));
    }
    let min = pts.iter().map(|p| p.2).fold(f64::INFINITY, f64::min);
    let max = pts.iter().map(|p| p.2).fold(f64::NEG_INFINITY, f64::max);

    let mut best: Option<(f64, Vector5<f64>)> = None;
    for &s0 in &FIT_SIGMA_STARTS {
        let start = Vector5::new(max - min, cy as f64, cx as f64, s0, min);
        if let Some((cost, p)) = levenberg_marquardt(&pts, start) {
            if best.as_ref().is_none_or(|(c, _)| cost < *c) {
                best = Some((cost, p));
            }
        }
    }
    let (cost, p) = best.ok_or_else(|| Error::NonConvergence("no restart converged".into()))?;
    let fit = FeatureFit {
        amplitude: p[0],
        y0: p[1],
        x0: p[2],
        sigma: p[3].abs(),
        offset: p[4],
        residual_rms: (cost / pts.len() as f64).sqrt(),
    };
    let inside = (fit.y0 - cy as f64).abs() <= half as f64 && (fit.x0 - cx as f64).abs() <= half as f64;
    if fit.amplitude <= 0.0 || fit.sigma < 0.1 || fit.sigma > window as f64 || !inside {
        return Err(Error::NonConvergence(format!("implausible fit {fit:?}")));
    }
    if fit.amplitude < 2.0 * fit.residual_rms {
        return Err(Error::NonConvergence(format!(
            "amplitude {} not above residual {}",
            fit.amplitude, fit.residual_rms
        )));
    }
    Ok(fit)
}

fn gauss_model(p: &Vector5<f64>, y: f64, x: f64) -> (f64, Vector5<f64>) {
    let (a, y0, x0, s, b) = (p[0], p[1], p[2], p[3], p[4]);
    let r2 = (y - y0).powi(2) + (x - x0).powi(2);
    let e = (-r2 / (2.0 * s * s)).exp();
    let jac = Vector5::new(
        e,
        a * e * (y - y0) / (s * s),
        a * e * (x - x0) / (s * s),
        a * e * r2 / (s * s * s),
        1.0,
    );
    (a * e + b, jac)
}

fn sum_sq(pts: &[(f64, f64, f64)], p: &Vector5<f64>) -> f64 {
    pts.iter().map(|&(y, x, v)| (gauss_model(p, y, x).0 - v).powi(2)).sum()
}

fn levenberg_marquardt(pts: &[(f64, f64, f64)], mut p: Vector5<f64>) -> Option<(f64, Vector5<f64>)> {
    let mut lambda = 1e-3;
    let mut cost = sum_sq(pts, &p);
    for _ in 0..FIT_MAX_ITERS {
        let mut jtj = Matrix5::<f64>::zeros();
        let mut jtr = Vector5::<f64>::zeros();
        for &(y, x, v) in pts {
            let (m, j) = gauss_model(&p, y, x);
            jtj += j * j.transpose();
            jtr += j * (v - m);
        }
        let mut improved = false;
        for _ in 0..20 {
            let mut damped = jtj;
            for d in 0..5 {
                damped[(d, d)] += lambda * jtj[(d, d)].max(1e-12);
            }
            let Some(step) = damped.lu().solve(&jtr) else {
                lambda *= 10.0;
                continue;
            };
            let trial = p + step;
            let c = sum_sq(pts, &trial);
            if c.is_finite() && c < cost && trial[3].abs() > 1e-3 {
                let rel = (cost - c) / cost.max(1e-300);
                p = trial;
                cost = c;
                lambda = (lambda * 0.3).max(1e-12);
                improved = true;
                if rel < 1e-12 || step.norm() < 1e-10 {
                    return Some((cost, p));
                }
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            // no downhill step at any damping: a local minimum
            return cost.is_finite().then_some((cost, p));
        }
    }
    cost.is_finite().then_some((cost, p))
}

/// Photons per pixel needed for a given correlation SNR on a phase object
/// of mean phase `mean_phase`: `SNR² / (2 φ̄²)`.
pub fn fluence_for_snr(target_snr: f64, mean_phase: f64) -> Result<f64> {
    if !(mean_phase > 0.0 && mean_phase.is_finite()) || !target_snr.is_finite() {
        return Err(Error::Domain(format!("snr {target_snr}, mean phase {mean_phase}")));
    }
    Ok(target_snr * target_snr / (2.0 * mean_phase * mean_phase))
}

/// SNR of a Gaussian feature of width `sigma_f` scattering `n_s` photons in
/// propagation-based phase contrast over a field of view `fov`.
pub fn snr_phase_contrast(n_s: f64, b: f64, sigma_f: f64, fov: f64) -> f64 {
    2.0 * n_s.sqrt() * 4.0 / std::f64::consts::PI.sqrt() * b * 2.0 * sigma_f / fov
}

/// SNR of the same feature in coherent diffraction imaging with field of view `fov`.
pub fn snr_cdi(n_s: f64, sigma_f: f64, fov: f64) -> f64 {
    n_s.sqrt() * 2.0 * sigma_f / fov
}

/// SNR advantage of far-field ptychography over holography for a feature
/// of width `sigma_f`, taking the Gaussian probe's equal-area disk
/// (diameter `2√2 σ_f`) as the ptychographic field of view.
pub fn snr_ratio_ffp_nfh(fov_nfh: f64, sigma_f: f64, b: f64) -> Result<f64> {
    for (name, v) in [("fov", fov_nfh), ("sigma_f", sigma_f), ("B", b)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::Domain(format!("{name} = {v}")));
        }
    }
    let fov_ffp = 2.0 * std::f64::consts::SQRT_2 * sigma_f;
    Ok(snr_cdi(1.0, sigma_f, fov_ffp) / snr_phase_contrast(1.0, b, sigma_f, fov_nfh))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub snr: f64,
    pub r: f64,
    pub smse: f64,
    pub frc: FrcCurve,
    pub feature_sigma: Option<f64>,
}

fn check_same(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch { expected: a, actual: b });
    }
    Ok(())
}
