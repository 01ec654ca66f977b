//! Test objects: a procedurally generated pure-phase "cell" phantom, summary
//! statistics, and the loosened finite-support mask used by holography.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::grid::{gaussian_blur_periodic, ComplexField, RealField};

/// Pixels with phase above this count as part of the object.
pub const SUPPORT_THRESHOLD: f64 = 1e-6;

/// Tolerance on the `[0, 1]` radian box for phantom-role objects.
pub const PHASE_BOUND_TOLERANCE: f64 = 1e-6;

/// Default pixel pitch (10 nm).
pub const DEFAULT_PIXEL_PITCH: f64 = 10e-9;

/// Per-pixel phase and absorption of a thin specimen.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectModel {
    /// Radians.
    pub phase: RealField,
    /// Dimensionless `kβt`; the transmission amplitude is `exp(-absorption)`.
    pub absorption: RealField,
    /// Meters.
    pub pixel_pitch: f64,
}

impl ObjectModel {
    pub fn pure_phase(phase: RealField) -> Self {
        let (h, w) = phase.shape();
        Self {
            phase,
            absorption: RealField::zeros(h, w),
            pixel_pitch: DEFAULT_PIXEL_PITCH,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.phase.shape()
    }

    /// `exp(i·phase − absorption)`.
    pub fn transmission(&self) -> ComplexField {
        let data = ndarray::Zip::from(self.phase.data())
            .and(self.absorption.data())
            .map_collect(|&p, &a| Complex64::from_polar((-a).exp(), p));
        ComplexField::new(data)
    }

    /// Pixels with phase above [`SUPPORT_THRESHOLD`].
    pub fn true_support(&self) -> Array2<bool> {
        self.phase.data().mapv(|p| p > SUPPORT_THRESHOLD)
    }

    /// Checks the pure-phase phantom invariants: zero absorption and phase
    /// within `[0, 1]` radians.
    pub fn check_phantom_role(&self) -> Result<()> {
        let out_of_box = self
            .phase
            .data()
            .iter()
            .filter(|&&p| !(-PHASE_BOUND_TOLERANCE..=1.0 + PHASE_BOUND_TOLERANCE).contains(&p))
            .count();
        if out_of_box > 0 {
            return Err(Error::InvariantViolation {
                what: "phase outside [0, 1] rad".into(),
                count: out_of_box,
            });
        }
        let absorbing = self.absorption.data().iter().filter(|&&a| a != 0.0).count();
        if absorbing > 0 {
            return Err(Error::InvariantViolation {
                what: "non-zero absorption in a pure-phase phantom".into(),
                count: absorbing,
            });
        }
        Ok(())
    }

    /// Checks the invariants enforced when loading from disk: matching shapes,
    /// finite values, phase in `[0, 2π)`.
    pub fn validate(&self) -> Result<()> {
        if self.phase.shape() != self.absorption.shape() {
            return Err(Error::ShapeMismatch {
                expected: self.phase.shape(),
                actual: self.absorption.shape(),
            });
        }
        let bad_phase = self
            .phase
            .data()
            .iter()
            .filter(|&&p| !(p.is_finite() && (0.0..2.0 * PI).contains(&p)))
            .count();
        if bad_phase > 0 {
            return Err(Error::InvariantViolation {
                what: "phase outside [0, 2π)".into(),
                count: bad_phase,
            });
        }
        let bad_abs = self.absorption.data().iter().filter(|a| !a.is_finite()).count();
        if bad_abs > 0 {
            return Err(Error::InvariantViolation {
                what: "non-finite absorption".into(),
                count: bad_abs,
            });
        }
        if !(self.pixel_pitch > 0.0 && self.pixel_pitch.is_finite()) {
            return Err(Error::Domain(format!("pixel pitch {}", self.pixel_pitch)));
        }
        Ok(())
    }
}

/// Region outside which the object is constrained to vanish.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportMask {
    pub mask: Array2<bool>,
    /// Dilation radius in pixels relative to the true support.
    pub looseness: usize,
}

impl SupportMask {
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            mask: Array2::from_elem((height, width), true),
            looseness: 0,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.mask.dim()
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.mask[[i, j]]
    }

    /// `true` when every pixel of `self` is also in `other`.
    pub fn is_subset_of(&self, other: &SupportMask) -> bool {
        self.mask.iter().zip(other.mask.iter()).all(|(&a, &b)| !a || b)
    }

    /// Zeroes every pixel outside the mask.
    pub fn apply(&self, f: &RealField) -> RealField {
        let data = ndarray::Zip::from(f.data())
            .and(&self.mask)
            .map_collect(|&v, &m| if m { v } else { 0.0 });
        RealField::new(data)
    }
}

/// Lattice offsets of the discrete disk `dx² + dy² ≤ r²`.
pub fn disk_offsets(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                out.push((dy, dx));
            }
        }
    }
    out
}

/// Morphological dilation of the true support (`phase > 1e-6`) by a disk of
/// radius `looseness`.
pub fn make_support_mask(obj: &ObjectModel, looseness: usize) -> SupportMask {
    let support = obj.true_support();
    SupportMask {
        mask: dilate(&support, looseness),
        looseness,
    }
}

pub(crate) fn dilate(src: &Array2<bool>, radius: usize) -> Array2<bool> {
    let (h, w) = src.dim();
    let mut out = src.clone();
    if radius == 0 {
        return out;
    }
    let offsets = disk_offsets(radius);
    for ((i, j), &inside) in src.indexed_iter() {
        if !inside {
            continue;
        }
        for &(dy, dx) in &offsets {
            let (a, b) = (i as isize + dy, j as isize + dx);
            if a >= 0 && b >= 0 && (a as usize) < h && (b as usize) < w {
                out[[a as usize, b as usize]] = true;
            }
        }
    }
    out
}

/// Mean and population standard deviation of the phase over the true
/// support, and the support fraction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectStats {
    pub mean_phase: f64,
    pub sigma_phase: f64,
    pub support_fraction: f64,
}

pub fn object_stats(obj: &ObjectModel) -> Result<ObjectStats> {
    let values: Vec<f64> = obj
        .phase
        .data()
        .iter()
        .copied()
        .filter(|&p| p > SUPPORT_THRESHOLD)
        .collect();
    if values.is_empty() {
        return Err(Error::EmptyRegion("object has no pixel above the support threshold".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(ObjectStats {
        mean_phase: mean,
        sigma_phase: var.sqrt(),
        support_fraction: n / obj.phase.len() as f64,
    })
}

/// Knobs of the procedural cell phantom beyond the three headline targets.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomParams {
    pub size: usize,
    pub target_mean_phase: f64,
    pub target_support_fraction: f64,
    /// Standard deviation of the internal texture before the bright feature
    /// is added, radians.
    pub texture_sigma: f64,
    /// Peak phase of the small bright feature above its surroundings.
    pub feature_amplitude: f64,
    /// Width of the small bright feature, pixels.
    pub feature_sigma: f64,
}

impl PhantomParams {
    pub fn new(size: usize, target_mean_phase: f64, target_support_fraction: f64) -> Self {
        Self {
            size,
            target_mean_phase,
            target_support_fraction,
            texture_sigma: 0.037,
            feature_amplitude: 0.25,
            feature_sigma: 2.0,
        }
    }
}

/// Location `(row, col)` of the small bright feature the generator plants
/// in a phantom of the given size.
pub fn feature_location(size: usize) -> (usize, usize) {
    let n = size as f64;
    ((0.5 * n).round() as usize, (0.38 * n).round() as usize)
}

fn unit_noise(rng: &mut ChaCha8Rng, n: usize, smooth: f64) -> Array2<f64> {
    let white = RealField::from_shape_fn(n, n, |_| rng.sample::<f64, _>(StandardNormal));
    let smooth = gaussian_blur_periodic(&white, smooth).into_inner();
    let mean = smooth.mean().unwrap_or(0.0);
    let std = smooth.mapv(|v| (v - mean).powi(2)).mean().unwrap_or(1.0).sqrt();
    smooth.mapv(|v| (v - mean) / std)
}

/// Generates a deterministic pure-phase cell phantom with the requested mean
/// phase (over the support) and support fraction.
pub fn generate_phantom(
    seed: u64,
    size: usize,
    target_mean_phase: f64,
    target_support_fraction: f64,
) -> Result<ObjectModel> {
    generate_phantom_with(seed, &PhantomParams::new(size, target_mean_phase, target_support_fraction))
}

pub fn generate_phantom_with(seed: u64, params: &PhantomParams) -> Result<ObjectModel> {
    let n = params.size;
    if n < 64 {
        return Err(Error::Domain(format!("phantom size must be at least 64, got {n}")));
    }
    let frac = params.target_support_fraction;
    if !(frac > 0.0 && frac < 1.0) {
        return Err(Error::Domain(format!("support fraction {frac} outside (0, 1)")));
    }
    let mean_target = params.target_mean_phase;
    if !(mean_target > 0.0 && mean_target <= 1.0) {
        return Err(Error::Domain(format!("mean phase {mean_target} outside (0, 1]")));
    }
    let nf = n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Outline: a rotated ellipse whose boundary is roughened by smooth noise.
    let boundary_noise = unit_noise(&mut rng, n, nf / 20.0);
    let cy = nf / 2.0 + rng.random_range(-0.02..0.02) * nf;
    let cx = nf / 2.0 + rng.random_range(-0.02..0.02) * nf;
    let a = 0.29 * nf * (1.0 + rng.random_range(-0.05..0.05));
    let b = a * rng.random_range(0.72..0.78);
    let theta = rng.random_range(0.0..PI);
    let (sin_t, cos_t) = theta.sin_cos();
    let score = Array2::from_shape_fn((n, n), |(i, j)| {
        let (y, x) = (i as f64 - cy, j as f64 - cx);
        let u = x * cos_t + y * sin_t;
        let v = -x * sin_t + y * cos_t;
        let rho = ((u / a).powi(2) + (v / b).powi(2)).sqrt();
        if rho > 1.3 {
            f64::NEG_INFINITY
        } else {
            1.0 - rho + 0.1 * boundary_noise[[i, j]]
        }
    });
    let target_count = (frac * nf * nf).round() as usize;
    let mut order: Vec<usize> = (0..n * n).collect();
    order.sort_by(|&p, &q| {
        let (sp, sq) = (score[[p / n, p % n]], score[[q / n, q % n]]);
        sq.partial_cmp(&sp).expect("finite or -inf").then(p.cmp(&q))
    });
    let mut support = Array2::from_elem((n, n), false);
    for &p in order.iter().take(target_count) {
        if score[[p / n, p % n]] == f64::NEG_INFINITY {
            return Err(Error::Unsatisfiable(format!(
                "support fraction {frac} does not fit inside the cell outline"
            )));
        }
        support[[p / n, p % n]] = true;
    }

    // Internal texture: smooth cytoplasm, granules and a nucleus.
    let mut texture = unit_noise(&mut rng, n, nf / 96.0);
    let granules = (60.0 * (nf / 512.0).powi(2)).round().max(8.0) as usize;
    let inside: Vec<usize> = order[..target_count].to_vec();
    for _ in 0..granules {
        let p = inside[rng.random_range(0..inside.len())];
        let (gy, gx) = ((p / n) as f64, (p % n) as f64);
        let gs: f64 = rng.random_range(1.0..2.5);
        let amp: f64 = rng.random_range(0.5..1.5) * if rng.random::<bool>() { 1.0 } else { -1.0 };
        stamp_gaussian(&mut texture, gy, gx, gs, amp);
    }
    let (ny, nx) = (nf * (0.5 + rng.random_range(-0.04..0.04)), nf * 0.6);
    let nucleus_r = 0.07 * nf;
    let mut nucleus = Array2::from_shape_fn((n, n), |(i, j)| {
        let r = ((i as f64 - ny).powi(2) + (j as f64 - nx).powi(2)).sqrt();
        if r <= nucleus_r {
            1.5
        } else {
            0.0
        }
    });
    nucleus = gaussian_blur_periodic(&RealField::new(nucleus), 2.0).into_inner();
    texture += &nucleus;

    let in_support: Vec<f64> = inside.iter().map(|&p| texture[[p / n, p % n]]).collect();
    let t_mean = in_support.iter().sum::<f64>() / in_support.len() as f64;
    let t_std = (in_support.iter().map(|v| (v - t_mean).powi(2)).sum::<f64>()
        / in_support.len() as f64)
        .sqrt();
    let (fy, fx) = feature_location(n);
    let mut phase = Array2::<f64>::zeros((n, n));
    for &p in &inside {
        let (i, j) = (p / n, p % n);
        let r2 = (i as f64 - fy as f64).powi(2) + (j as f64 - fx as f64).powi(2);
        let feature = params.feature_amplitude * (-r2 / (2.0 * params.feature_sigma.powi(2))).exp();
        phase[[i, j]] = params.texture_sigma * (texture[[i, j]] - t_mean) / t_std + feature;
    }

    // Shift to the target mean; refuse when that pushes texture out of the box.
    let lo = 1e-4;
    let raw_mean = inside.iter().map(|&p| phase[[p / n, p % n]]).sum::<f64>() / inside.len() as f64;
    let mut offset = mean_target - raw_mean;
    let clipped = inside
        .iter()
        .filter(|&&p| !(lo..=1.0).contains(&(phase[[p / n, p % n]] + offset)))
        .count();
    if clipped as f64 > 0.01 * inside.len() as f64 {
        return Err(Error::Unsatisfiable(format!(
            "mean phase {mean_target} would push {clipped} support pixels outside [0, 1] rad"
        )));
    }
    for _ in 0..100 {
        let mean = inside
            .iter()
            .map(|&p| (phase[[p / n, p % n]] + offset).clamp(lo, 1.0))
            .sum::<f64>()
            / inside.len() as f64;
        let err = mean_target - mean;
        if err.abs() < 1e-12 {
            break;
        }
        offset += err;
    }
    let mut out = Array2::<f64>::zeros((n, n));
    for &p in &inside {
        out[[p / n, p % n]] = (phase[[p / n, p % n]] + offset).clamp(lo, 1.0);
    }
    let obj = ObjectModel::pure_phase(RealField::new(out));
    let stats = object_stats(&obj)?;
    if (stats.mean_phase - mean_target).abs() > 0.02 * mean_target {
        return Err(Error::Unsatisfiable(format!(
            "mean phase {mean_target} cannot be reached inside [0, 1] (got {:.4})",
            stats.mean_phase
        )));
    }
    Ok(obj)
}

fn stamp_gaussian(target: &mut Array2<f64>, cy: f64, cx: f64, sigma: f64, amp: f64) {
    let (h, w) = target.dim();
    let r = (4.0 * sigma).ceil() as isize;
    for dy in -r..=r {
        for dx in -r..=r {
            let (i, j) = (cy as isize + dy, cx as isize + dx);
            if i < 0 || j < 0 || i as usize >= h || j as usize >= w {
                continue;
            }
            let d2 = (i as f64 - cy).powi(2) + (j as f64 - cx).powi(2);
            target[[i as usize, j as usize]] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
        }
    }
}

/// Reads an object container and validates its invariants.
pub fn load_object(path: impl AsRef<Path>) -> Result<ObjectModel> {
    crate::harness::container::load_object(path.as_ref())
}
