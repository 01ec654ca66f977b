use ndarray::Array2;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::acquisition::{frames_native, Dataset, ForwardModel};
use crate::error::{Error, Result};
use crate::grid::{ComplexField, RealField};
use crate::phantom::ObjectModel;

/// Default Poisson guard in photons; the amplitude guard is its square root.
pub const DEFAULT_POISSON_FLOOR: f64 = 1e-12;

/// Exposures evaluated together before their gradients are summed.
const CHUNK: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostKind {
    Lsq,
    Poisson,
}

impl CostKind {
    pub const ALL: [CostKind; 2] = [CostKind::Lsq, CostKind::Poisson];

    pub fn as_str(&self) -> &'static str {
        match self {
            CostKind::Lsq => "lsq",
            CostKind::Poisson => "poisson",
        }
    }
}

impl fmt::Display for CostKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CostKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lsq" => Ok(CostKind::Lsq),
            "poisson" => Ok(CostKind::Poisson),
            other => Err(Error::Config(format!("unknown cost '{other}'"))),
        }
    }
}

fn check_predicted(predicted: &[ComplexField], measured: &Dataset) -> Result<()> {
    if predicted.len() != measured.frames.len() {
        return Err(Error::ShapeMismatch {
            expected: (measured.frames.len(), 1),
            actual: (predicted.len(), 1),
        });
    }
    for (p, y) in predicted.iter().zip(&measured.frames) {
        if p.shape() != y.shape() {
            return Err(Error::ShapeMismatch {
                expected: y.shape(),
                actual: p.shape(),
            });
        }
    }
    Ok(())
}

fn total_pixels(measured: &Dataset) -> f64 {
    measured.frames.iter().map(|f| f.len()).sum::<usize>() as f64
}

/// Mean of `(|pred| − √y)²` over every detector pixel of every exposure.
pub fn cost_lsq(predicted: &[ComplexField], measured: &Dataset) -> Result<f64> {
    check_predicted(predicted, measured)?;
    let mut sum = 0.0;
    for (p, y) in predicted.iter().zip(&measured.frames) {
        for (g, &y) in p.data().iter().zip(y.data()) {
            sum += lsq_term(g.norm_sqr().sqrt(), y.max(0.0).sqrt());
        }
    }
    Ok(sum / total_pixels(measured))
}

/// Mean of `|pred|² − 2y·log|pred|` with the default floor on `|pred|`.
pub fn cost_poisson(predicted: &[ComplexField], measured: &Dataset) -> Result<f64> {
    cost_poisson_with_floor(predicted, measured, DEFAULT_POISSON_FLOOR)
}

pub fn cost_poisson_with_floor(
    predicted: &[ComplexField],
    measured: &Dataset,
    poisson_floor: f64,
) -> Result<f64> {
    check_predicted(predicted, measured)?;
    let floor = poisson_floor.sqrt();
    let mut sum = 0.0;
    for (p, y) in predicted.iter().zip(&measured.frames) {
        for (g, &y) in p.data().iter().zip(y.data()) {
            sum += poisson_term(g.norm_sqr().sqrt(), y, floor);
        }
    }
    Ok(sum / total_pixels(measured))
}

#[inline]
fn lsq_term(a: f64, s: f64) -> f64 {
    (a - s) * (a - s)
}

#[inline]
fn poisson_term(a: f64, y: f64, floor: f64) -> f64 {
    if y == 0.0 {
        a * a
    } else {
        a * a - 2.0 * y * a.max(floor).ln()
    }
}

/// Cost and phase gradient of a dataset under a fixed forward model.
pub(crate) struct Objective {
    model: ForwardModel,
    /// √y for LSQ, y for Poisson, native layout.
    targets: Vec<Vec<f64>>,
    cost: CostKind,
    floor: f64,
    norm: f64,
    shape: (usize, usize),
}

impl Objective {
    pub(crate) fn new(data: &Dataset, cost: CostKind, poisson_floor: f64) -> Result<Self> {
        let model = ForwardModel::new(&data.geometry, data.illumination_scale)?;
        let (dh, dw) = data.geometry.detector_shape();
        if data.frames.len() != model.num_exposures() {
            return Err(Error::Config(format!(
                "dataset holds {} frames, geometry expects {}",
                data.frames.len(),
                model.num_exposures()
            )));
        }
        for f in &data.frames {
            if f.shape() != (dh, dw) {
                return Err(Error::ShapeMismatch {
                    expected: (dh, dw),
                    actual: f.shape(),
                });
            }
        }
        if !(poisson_floor > 0.0 && poisson_floor.is_finite()) {
            return Err(Error::Config(format!("poisson floor {poisson_floor}")));
        }
        let mut targets = frames_native(data);
        if cost == CostKind::Lsq {
            for t in &mut targets {
                t.iter_mut().for_each(|v| *v = v.max(0.0).sqrt());
            }
        }
        let [h, w] = data.geometry.object_shape;
        Ok(Self {
            norm: total_pixels(data),
            model,
            targets,
            cost,
            floor: poisson_floor.sqrt(),
            shape: (h, w),
        })
    }

    pub(crate) fn num_exposures(&self) -> usize {
        self.model.num_exposures()
    }

    /// Cost of exposure `k` alone (unnormalized) and, if asked, `∂C/∂T*`
    /// over its window.
    fn exposure(&self, t: &Array2<Complex64>, k: usize, want_grad: bool) -> (f64, Option<Array2<Complex64>>) {
        let mut g = self.model.detector_native(t, k);
        let y = &self.targets[k];
        let inv_n = 1.0 / self.norm;
        let mut sum = 0.0;
        match self.cost {
            CostKind::Lsq => {
                for (g, &s) in g.iter_mut().zip(y) {
                    let a = g.norm_sqr().sqrt();
                    sum += lsq_term(a, s);
                    if want_grad {
                        *g = if a > 0.0 { *g * ((a - s) / a * inv_n) } else { Complex64::default() };
                    }
                }
            }
            CostKind::Poisson => {
                for (g, &y) in g.iter_mut().zip(y) {
                    let a = g.norm_sqr().sqrt();
                    sum += poisson_term(a, y, self.floor);
                    if want_grad {
                        let factor = if y == 0.0 || a < self.floor { 1.0 } else { 1.0 - y / (a * a) };
                        *g *= factor * inv_n;
                    }
                }
            }
        }
        let grad = want_grad.then(|| self.model.adjoint_native(k, g));
        (sum, grad)
    }

    /// Normalized cost over `exposures` and its gradient with respect to the
    /// transmission, `∂C/∂T*`. Partial results are summed in exposure order.
    pub(crate) fn evaluate(
        &self,
        t: &Array2<Complex64>,
        exposures: &[usize],
        want_grad: bool,
    ) -> (f64, Option<Array2<Complex64>>) {
        let mut total = 0.0;
        let mut grad = want_grad.then(|| Array2::<Complex64>::zeros(self.shape));
        for chunk in exposures.chunks(CHUNK) {
            let parts: Vec<(f64, Option<Array2<Complex64>>)> = chunk
                .par_iter()
                .map(|&k| self.exposure(t, k, want_grad))
                .collect();
            for (&k, (c, g)) in chunk.iter().zip(parts) {
                total += c;
                if let (Some(acc), Some(g)) = (grad.as_mut(), g) {
                    let (top, left, h, w) = self.model.geometry().exposure_window(k);
                    let mut win = acc.slice_mut(ndarray::s![top..top + h, left..left + w]);
                    win += &g;
                }
            }
        }
        (total / self.norm, grad)
    }

    /// Cost and `∂C/∂φ` for transmission `t`.
    pub(crate) fn phase_gradient(&self, t: &Array2<Complex64>, exposures: &[usize]) -> (f64, Array2<f64>) {
        let (c, g) = self.evaluate(t, exposures, true);
        let g = g.expect("requested");
        let dphi = ndarray::Zip::from(t)
            .and(&g)
            .map_collect(|t, g| 2.0 * (t.conj() * g).im);
        (c, dphi)
    }
}

/// Exact `∂C/∂φ` of the chosen cost at `obj`, by the adjoint of the forward model.
pub fn gradient(obj: &ObjectModel, data: &Dataset, cost: CostKind) -> Result<RealField> {
    gradient_with_floor(obj, data, cost, DEFAULT_POISSON_FLOOR)
}

pub fn gradient_with_floor(
    obj: &ObjectModel,
    data: &Dataset,
    cost: CostKind,
    poisson_floor: f64,
) -> Result<RealField> {
    let objective = Objective::new(data, cost, poisson_floor)?;
    check_shape(obj, data)?;
    let t = obj.transmission().into_inner();
    let all: Vec<usize> = (0..objective.num_exposures()).collect();
    Ok(RealField::new(objective.phase_gradient(&t, &all).1))
}

/// Cost of `obj` against `data`, evaluated through the same path as [`gradient`].
pub fn cost_of(obj: &ObjectModel, data: &Dataset, cost: CostKind) -> Result<f64> {
    let objective = Objective::new(data, cost, DEFAULT_POISSON_FLOOR)?;
    check_shape(obj, data)?;
    let t = obj.transmission().into_inner();
    let all: Vec<usize> = (0..objective.num_exposures()).collect();
    Ok(objective.evaluate(&t, &all, false).0)
}

fn check_shape(obj: &ObjectModel, data: &Dataset) -> Result<()> {
    let (h, w) = obj.shape();
    let [eh, ew] = data.geometry.object_shape;
    if (h, w) != (eh, ew) {
        return Err(Error::ShapeMismatch {
            expected: (eh, ew),
            actual: (h, w),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acquisition::{simulate, scale_to_fluence, add_poisson_noise, AcquisitionGeometry, ScanGrid, ForwardModel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single_pixel_dataset(y: f64) -> Dataset {
        Dataset {
            frames: vec![RealField::constant(1, 1, y)],
            geometry: AcquisitionGeometry::nfh(1, 0, 1e-3).unwrap(),
            fluence: 1.0,
            illumination_scale: 1.0,
            seed: None,
            noise_free: false,
        }
    }

    fn field(v: Complex64) -> Vec<ComplexField> {
        vec![ComplexField::constant(1, 1, v)]
    }

    #[test]
    fn lsq_examples() {
        let d = single_pixel_dataset(1.0);
        assert_eq!(cost_lsq(&field(Complex64::new(2.0, 0.0)), &d).unwrap(), 1.0);
        assert_eq!(cost_lsq(&field(Complex64::new(0.0, 1.0)), &d).unwrap(), 0.0);
    }

    #[test]
    fn poisson_examples() {
        let d = single_pixel_dataset(4.0);
        let c = cost_poisson(&field(Complex64::new(2.0, 0.0)), &d).unwrap();
        assert!((c - (4.0 - 8.0 * 2f64.ln())).abs() < 1e-12);
        assert!((c + 1.545).abs() < 1e-3);
        let dark = single_pixel_dataset(0.0);
        assert_eq!(cost_poisson(&field(Complex64::new(1.0, 0.0)), &dark).unwrap(), 1.0);
        // finite at a zero prediction thanks to the floor
        assert!(cost_poisson(&field(Complex64::default()), &d).unwrap().is_finite());
    }

    #[test]
    fn poisson_minimizer_is_the_measurement() {
        let d = single_pixel_dataset(3.0);
        let c = |a: f64| cost_poisson(&field(Complex64::new(a, 0.0)), &d).unwrap();
        let a0 = 3f64.sqrt();
        let h = 1e-4;
        assert!((c(a0 + h) - c(a0 - h)).abs() / (2.0 * h) < 1e-6);
        assert!(c(a0) < c(a0 * 1.01) && c(a0) < c(a0 * 0.99));
    }

    #[test]
    fn costs_match_scalar_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let frames: Vec<RealField> = (0..3)
            .map(|_| RealField::from_shape_fn(5, 5, |_| rng.random_range(0.0..4.0_f64).floor()))
            .collect();
        let pred: Vec<ComplexField> = (0..3)
            .map(|_| ComplexField::from_shape_fn(5, 5, |_| Complex64::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0))))
            .collect();
        // cost functions only look at the frames, not the geometry
        let d = Dataset {
            frames: frames.clone(),
            geometry: AcquisitionGeometry::nfh(5, 0, 1e-3).unwrap(),
            fluence: 1.0,
            illumination_scale: 1.0,
            seed: None,
            noise_free: false,
        };
        let mut lsq = 0.0;
        let mut poi = 0.0;
        let mut n = 0.0;
        for k in 0..3 {
            for i in 0..5 {
                for j in 0..5 {
                    let a = pred[k].data()[[i, j]].norm();
                    let y = frames[k].data()[[i, j]];
                    lsq += (a - y.sqrt()).powi(2);
                    poi += a * a - if y > 0.0 { 2.0 * y * a.max(1e-6).ln() } else { 0.0 };
                    n += 1.0;
                }
            }
        }
        assert!((cost_lsq(&pred, &d).unwrap() - lsq / n).abs() < 1e-12);
        assert!((cost_poisson(&pred, &d).unwrap() - poi / n).abs() < 1e-12);
        assert!(matches!(cost_lsq(&pred[..2], &d), Err(Error::ShapeMismatch { .. })));
    }

    fn random_phase(seed: u64, n: usize) -> ObjectModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ObjectModel::pure_phase(RealField::from_shape_fn(n, n, |_| rng.random_range(0.0..1.0)))
    }

    fn small_geometries() -> Vec<AcquisitionGeometry> {
        vec![
            AcquisitionGeometry::nfh(32, 8, 0.02).unwrap(),
            AcquisitionGeometry::ffp(32, ScanGrid::centered(4, 4, 4, 16, (32, 32)).unwrap(), 3.0, 0.5).unwrap(),
            AcquisitionGeometry::nfp(32, 48, 2, 0.3, 2.0, 3, 0.02).unwrap(),
        ]
    }

    /// `C(plus) − C(minus)` summed pixel by pixel from the two detector
    /// fields, so the tiny difference is not lost to cancellation between
    /// two large totals.
    fn cost_difference(plus: &ObjectModel, minus: &ObjectModel, data: &Dataset, cost: CostKind) -> f64 {
        let model = ForwardModel::new(&data.geometry, data.illumination_scale).unwrap();
        let mut sum = 0.0;
        let mut n = 0usize;
        for (k, y) in data.frames.iter().enumerate() {
            let gp = model.detector_field(plus, k).unwrap();
            let gm = model.detector_field(minus, k).unwrap();
            for ((p, m), &y) in gp.data().iter().zip(gm.data()).zip(y.data()) {
                let (ap, am) = (p.norm(), m.norm());
                let da = ((p - m) * (p + m).conj()).re / (ap + am);
                sum += match cost {
                    CostKind::Lsq => da * (ap + am - 2.0 * y.sqrt()),
                    CostKind::Poisson => da * (ap + am) - 2.0 * y * (da / am).ln_1p(),
                };
                n += 1;
            }
        }
        sum / n as f64
    }

    /// Central finite difference oracle at 50 random pixels.
    fn check_fd(geom: &AcquisitionGeometry, cost: CostKind, seed: u64) {
        let truth = random_phase(seed, 32);
        let clean = scale_to_fluence(&simulate(&truth, geom).unwrap(), 50.0).unwrap();
        let data = add_poisson_noise(&clean, seed + 100).unwrap();
        let probe = random_phase(seed + 7, 32);
        let g = gradient(&probe, &data, cost).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = 1e-5;
        let scale = g.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for _ in 0..50 {
            let (i, j) = (rng.random_range(0..32), rng.random_range(0..32));
            let mut plus = probe.clone();
            plus.phase.data_mut()[[i, j]] += h;
            let mut minus = probe.clone();
            minus.phase.data_mut()[[i, j]] -= h;
            let fd = cost_difference(&plus, &minus, &data, cost) / (2.0 * h);
            let an = g.data()[[i, j]];
            let err = (fd - an).abs() / an.abs().max(1e-3 * scale);
            assert!(err < 1e-4, "{:?} {cost} ({i},{j}): fd {fd} vs {an}", geom.modality);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for geom in small_geometries() {
            for cost in CostKind::ALL {
                for seed in 0..3 {
                    check_fd(&geom, cost, seed);
                }
            }
        }
    }

    #[test]
    fn cost_of_matches_public_costs() {
        for geom in small_geometries() {
            let truth = random_phase(1, 32);
            let data = add_poisson_noise(&scale_to_fluence(&simulate(&truth, &geom).unwrap(), 20.0).unwrap(), 2).unwrap();
            let probe = random_phase(2, 32);
            let model = ForwardModel::new(&geom, data.illumination_scale).unwrap();
            let pred: Vec<ComplexField> = (0..geom.num_exposures())
                .map(|k| model.detector_field(&probe, k).unwrap())
                .collect();
            let a = cost_of(&probe, &data, CostKind::Lsq).unwrap();
            let b = cost_lsq(&pred, &data).unwrap();
            assert!((a - b).abs() < 1e-9 * b.abs().max(1.0), "{a} {b}");
            let a = cost_of(&probe, &data, CostKind::Poisson).unwrap();
            let b = cost_poisson(&pred, &data).unwrap();
            assert!((a - b).abs() < 1e-9 * b.abs().max(1.0), "{a} {b}");
        }
    }

    #[test]
    fn gradient_vanishes_at_the_truth() {
        for geom in small_geometries() {
            let truth = random_phase(5, 32);
            let data = scale_to_fluence(&simulate(&truth, &geom).unwrap(), 100.0).unwrap();
            let g = gradient(&truth, &data, CostKind::Lsq).unwrap();
            let max = g.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(max < 1e-10, "{:?}: {max}", geom.modality);
        }
    }

    #[test]
    fn unscanned_pixels_have_zero_gradient() {
        let geom = AcquisitionGeometry::ffp(32, ScanGrid { rows: 2, cols: 2, step: 4, origin: [0, 0], patch_size: 16 }, 3.0, 0.5).unwrap();
        let truth = random_phase(8, 32);
        let data = add_poisson_noise(&scale_to_fluence(&simulate(&truth, &geom).unwrap(), 10.0).unwrap(), 1).unwrap();
        let g = gradient(&random_phase(9, 32), &data, CostKind::Poisson).unwrap();
        assert_eq!(g.data()[[31, 31]], 0.0);
        assert_eq!(g.data()[[25, 3]], 0.0);
        assert_ne!(g.data()[[10, 10]], 0.0);
    }
}
