//! Experiment plumbing: containers, previews, metric bundles and sweeps.

pub mod container;
pub mod pgm;
pub mod sweep;

use crate::acquisition::Modality;
use crate::error::Result;
use crate::grid::RealField;
use crate::metrics::{correlation_r, fit_feature_sigma, frc, smse_fields, snr_from_r, MetricsReport};
use crate::phantom::{feature_location, ObjectModel, SupportMask};

/// Looseness of the support mask used for NFH reconstruction and all metrics.
pub const DEFAULT_LOOSENESS: usize = 9;

/// Side of the square window for the Gaussian feature fit.
pub const FEATURE_WINDOW: usize = 15;

/// Whether SMSE removes the mean in-support offset for this modality.
pub fn align_offset_for(modality: Modality) -> bool {
    modality != Modality::Nfh
}

/// Phase map shifted by the mean in-support offset from `truth`, or
/// unchanged when `align` is false.
pub fn aligned_phase(truth: &RealField, recon: &RealField, support: &SupportMask, align: bool) -> RealField {
    if !align {
        return recon.clone();
    }
    let n = support.count().max(1) as f64;
    let c = truth
        .data()
        .iter()
        .zip(recon.data())
        .zip(support.mask.iter())
        .filter(|(_, &m)| m)
        .map(|((t, r), _)| r - t)
        .sum::<f64>()
        / n;
    recon.map(|v| v - c)
}

/// Metrics for a reconstruction `a`, optionally paired with an independent
/// reconstruction `b`. Correlation and FRC compare `a` with `b` when given,
/// otherwise `a` with the truth. Images are masked to the support before FRC.
pub fn compute_metrics(
    truth: &ObjectModel,
    a: &ObjectModel,
    b: Option<&ObjectModel>,
    support: &SupportMask,
    align_offset: bool,
) -> Result<MetricsReport> {
    let smse_a = smse_fields(&truth.phase, &a.phase, support, align_offset)?;
    let smse = match b {
        Some(b) => 0.5 * (smse_a + smse_fields(&truth.phase, &b.phase, support, align_offset)?),
        None => smse_a,
    };
    let other = b.map_or(&truth.phase, |b| &b.phase);
    let r = correlation_r(&a.phase, other, support)?;
    let pa = support.apply(&aligned_phase(&truth.phase, &a.phase, support, align_offset));
    let pb = support.apply(&aligned_phase(&truth.phase, other, support, align_offset && b.is_some()));
    let curve = frc(&pa, &pb)?;
    let (h, _) = a.phase.shape();
    let feature_sigma = fit_feature_sigma(&a.phase, feature_location(h), FEATURE_WINDOW)
        .ok()
        .map(|f| f.sigma);
    Ok(MetricsReport {
        snr: snr_from_r(r),
        r,
        smse,
        frc: curve,
        feature_sigma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, make_support_mask};

    #[test]
    fn perfect_reconstruction_scores_perfectly() {
        let truth = generate_phantom(2, 128, 0.643, 0.194).unwrap();
        let support = make_support_mask(&truth, DEFAULT_LOOSENESS);
        let m = compute_metrics(&truth, &truth, Some(&truth), &support, false).unwrap();
        assert!((m.r - 1.0).abs() < 1e-12);
        assert!(m.snr.is_infinite() || m.snr > 1e5);
        assert_eq!(m.smse, 0.0);
        assert_eq!(m.frc.crossing_fraction_of_nyquist, 1.0);
        let sigma = m.feature_sigma.expect("feature fit");
        assert!((sigma - 2.0).abs() < 0.5, "{sigma}");
    }

    #[test]
    fn alignment_removes_offsets() {
        let truth = generate_phantom(2, 128, 0.643, 0.194).unwrap();
        let support = make_support_mask(&truth, DEFAULT_LOOSENESS);
        let moved = ObjectModel::pure_phase(truth.phase.map(|v| v + 0.3));
        let aligned = aligned_phase(&truth.phase, &moved.phase, &support, true);
        for ((a, b), &m) in aligned.data().iter().zip(truth.phase.data()).zip(support.mask.iter()) {
            if m {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert!(compute_metrics(&truth, &moved, None, &support, true).unwrap().smse < 1e-20);
        assert!((compute_metrics(&truth, &moved, None, &support, false).unwrap().smse - 0.09).abs() < 1e-12);
    }
}
