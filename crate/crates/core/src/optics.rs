//! Free-space propagation parameterized by the per-pixel Fresnel number
//! `d = Δ² / (λ z)`.
//!
//! Near-field propagation multiplies the spectrum by the Fresnel transfer
//! function `exp(+iπ (fx² + fy²) / d)` (spatial frequencies in cycles per
//! pixel), which corresponds to the `exp(-ikz)` forward-propagation sign
//! convention with the constant piston dropped. The far field is the `d → 0`
//! limit, realized as one centered unitary FFT.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, OnceLock, RwLock};

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{fft2_centered, ifft2_centered, ComplexField, Fft2Plan};

/// How a field travels from the object plane to the detector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PropagationSpec {
    NearField { fresnel_number: f64 },
    FarField,
    Identity,
}

impl PropagationSpec {
    pub fn near_field(fresnel_number: f64) -> Result<Self> {
        if !(fresnel_number > 0.0 && fresnel_number.is_finite()) {
            return Err(Error::Domain(format!(
                "near-field propagation needs a finite positive Fresnel number, got {fresnel_number}"
            )));
        }
        Ok(PropagationSpec::NearField { fresnel_number })
    }

    /// Maps `d = 0` to the far field and `d = ∞` to the identity.
    pub fn from_fresnel_number(d: f64) -> Result<Self> {
        if d == 0.0 {
            Ok(PropagationSpec::FarField)
        } else if d == f64::INFINITY {
            Ok(PropagationSpec::Identity)
        } else {
            Self::near_field(d)
        }
    }

    pub fn fresnel_number(&self) -> f64 {
        match *self {
            PropagationSpec::NearField { fresnel_number } => fresnel_number,
            PropagationSpec::FarField => 0.0,
            PropagationSpec::Identity => f64::INFINITY,
        }
    }
}

/// `Δ² / (λ z)`.
pub fn fresnel_number(pixel_pitch: f64, wavelength: f64, distance: f64) -> Result<f64> {
    if !(pixel_pitch > 0.0 && wavelength > 0.0 && distance > 0.0) {
        return Err(Error::Domain(format!(
            "pixel pitch, wavelength and distance must be positive (got {pixel_pitch}, {wavelength}, {distance})"
        )));
    }
    Ok(pixel_pitch * pixel_pitch / (wavelength * distance))
}

/// Photon energy in eV to wavelength in meters.
pub fn wavelength_from_energy_ev(energy_ev: f64) -> f64 {
    const HC_EV_M: f64 = 1.239_841_984e-6;
    HC_EV_M / energy_ev
}

/// Spatial frequency in cycles/pixel of DFT bin `k` out of `n`, native layout.
pub(crate) fn native_frequency(k: usize, n: usize) -> f64 {
    let k = k as isize;
    let n_i = n as isize;
    let signed = if k < (n_i + 1) / 2 { k } else { k - n_i };
    signed as f64 / n as f64
}

/// Fresnel transfer function in native FFT layout, with the `1/(h·w)`
/// normalization of the unnormalized inverse FFT folded in.
fn near_field_kernel(h: usize, w: usize, d: f64) -> Vec<Complex64> {
    let norm = 1.0 / (h * w) as f64;
    let fy: Vec<f64> = (0..h).map(|k| native_frequency(k, h)).collect();
    let fx: Vec<f64> = (0..w).map(|k| native_frequency(k, w)).collect();
    let mut kernel = Vec::with_capacity(h * w);
    for &v in &fy {
        for &u in &fx {
            kernel.push(Complex64::from_polar(norm, PI * (u * u + v * v) / d));
        }
    }
    kernel
}

type KernelKey = (usize, usize, u64);

fn kernel_cache() -> &'static RwLock<HashMap<KernelKey, Arc<Vec<Complex64>>>> {
    static CACHE: OnceLock<RwLock<HashMap<KernelKey, Arc<Vec<Complex64>>>>> = OnceLock::new();
    CACHE.get_or_init(Default::default)
}

fn cached_kernel(h: usize, w: usize, d: f64) -> Arc<Vec<Complex64>> {
    let key = (h, w, d.to_bits());
    if let Some(k) = kernel_cache().read().expect("kernel cache").get(&key) {
        return Arc::clone(k);
    }
    let kernel = Arc::new(near_field_kernel(h, w, d));
    kernel_cache()
        .write()
        .expect("kernel cache")
        .entry(key)
        .or_insert(kernel)
        .clone()
}

/// A near-field propagator bound to one grid shape, operating in place on
/// row-major buffers.
#[derive(Clone)]
pub(crate) struct NearFieldPropagator {
    kernel: Arc<Vec<Complex64>>,
    fwd: Fft2Plan,
    inv: Fft2Plan,
}

impl NearFieldPropagator {
    pub(crate) fn new(h: usize, w: usize, d: f64) -> Self {
        Self {
            kernel: cached_kernel(h, w, d),
            fwd: Fft2Plan::forward(h, w),
            inv: Fft2Plan::inverse(h, w),
        }
    }

    pub(crate) fn forward(&self, data: &mut [Complex64]) {
        self.fwd.process(data);
        data.iter_mut().zip(self.kernel.iter()).for_each(|(x, k)| *x *= k);
        self.inv.process(data);
    }

    /// Adjoint, which is also the inverse because the kernel is unimodular.
    pub(crate) fn backward(&self, data: &mut [Complex64]) {
        self.fwd.process(data);
        data.iter_mut()
            .zip(self.kernel.iter())
            .for_each(|(x, k)| *x *= k.conj());
        self.inv.process(data);
    }
}

fn apply_near_field(f: &ComplexField, d: f64, backward: bool) -> ComplexField {
    let (h, w) = f.shape();
    let prop = NearFieldPropagator::new(h, w, d);
    let mut buf: Vec<Complex64> = f.data().iter().copied().collect();
    if backward {
        prop.backward(&mut buf);
    } else {
        prop.forward(&mut buf);
    }
    let mut out = ComplexField::new(Array2::from_shape_vec((h, w), buf).expect("shape"));
    if let Some(p) = f.pixel_pitch() {
        out = out.with_pixel_pitch(p);
    }
    out
}

/// Propagates `f` from the object plane to the detector plane.
pub fn propagate(f: &ComplexField, spec: PropagationSpec) -> ComplexField {
    match spec {
        PropagationSpec::NearField { fresnel_number } => apply_near_field(f, fresnel_number, false),
        PropagationSpec::FarField => fft2_centered(f),
        PropagationSpec::Identity => f.clone(),
    }
}

/// Exact inverse (and adjoint) of [`propagate`].
pub fn propagate_back(f: &ComplexField, spec: PropagationSpec) -> ComplexField {
    match spec {
        PropagationSpec::NearField { fresnel_number } => apply_near_field(f, fresnel_number, true),
        PropagationSpec::FarField => ifft2_centered(f),
        PropagationSpec::Identity => f.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(n: usize, seed: u64) -> ComplexField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ComplexField::from_shape_fn(n, n, |_| {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        })
    }

    fn max_diff(a: &ComplexField, b: &ComplexField) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .fold(0.0, |m, (x, y)| m.max((x - y).norm()))
    }

    #[test]
    fn fresnel_number_soft_and_hard_xray() {
        let pitch = 10e-9;
        let soft = fresnel_number(pitch, wavelength_from_energy_ev(500.0), 40.3e-6).unwrap();
        assert!((soft - 1e-3).abs() < 0.01e-3, "{soft}");
        let hard = fresnel_number(pitch, wavelength_from_energy_ev(10_000.0), 807e-6).unwrap();
        assert!((hard - 1e-3).abs() < 0.01e-3, "{hard}");
        let doubled = fresnel_number(pitch, 1e-9, 2e-6).unwrap();
        let single = fresnel_number(pitch, 1e-9, 1e-6).unwrap();
        assert!((doubled - single / 2.0).abs() < 1e-15);
        assert!(fresnel_number(0.0, 1e-9, 1e-6).is_err());
        assert!(fresnel_number(1e-8, 1e-9, -1.0).is_err());
    }

    #[test]
    fn spec_sentinels() {
        assert_eq!(PropagationSpec::from_fresnel_number(0.0).unwrap(), PropagationSpec::FarField);
        assert_eq!(
            PropagationSpec::from_fresnel_number(f64::INFINITY).unwrap(),
            PropagationSpec::Identity
        );
        assert!(PropagationSpec::near_field(-1.0).is_err());
        assert!(PropagationSpec::near_field(f64::NAN).is_err());
    }

    #[test]
    fn near_field_is_unitary() {
        let f = random_field(64, 1);
        let g = propagate(&f, PropagationSpec::near_field(1e-3).unwrap());
        assert!((f.power() - g.power()).abs() / f.power() < 1e-12);
    }

    #[test]
    fn plane_wave_is_an_eigenfunction() {
        let f = ComplexField::constant(32, 32, Complex64::new(0.5, 0.5));
        for d in [1e-3, 0.2, 7.0] {
            let g = propagate(&f, PropagationSpec::near_field(d).unwrap());
            assert!(max_diff(&f, &g) < 1e-12);
        }
    }

    #[test]
    fn composition_adds_inverse_fresnel_numbers() {
        let f = random_field(64, 2);
        let (d1, d2) = (2e-3, 5e-3);
        let two_step = propagate(
            &propagate(&f, PropagationSpec::near_field(d1).unwrap()),
            PropagationSpec::near_field(d2).unwrap(),
        );
        let total = 1.0 / (1.0 / d1 + 1.0 / d2);
        let one_step = propagate(&f, PropagationSpec::near_field(total).unwrap());
        assert!(max_diff(&two_step, &one_step) < 1e-10);
    }

    #[test]
    fn back_propagation_inverts() {
        let f = random_field(64, 3);
        for spec in [
            PropagationSpec::near_field(1e-3).unwrap(),
            PropagationSpec::FarField,
            PropagationSpec::Identity,
        ] {
            let back = propagate_back(&propagate(&f, spec), spec);
            assert!(max_diff(&f, &back) < 1e-12, "{spec:?}");
        }
    }

    #[test]
    fn far_field_back_propagation_of_delta_is_constant() {
        let mut f = ComplexField::zeros(16, 16);
        f.data_mut()[[8, 8]] = Complex64::new(1.0, 0.0);
        let g = propagate_back(&f, PropagationSpec::FarField);
        assert!(g.data().iter().all(|c| (c - Complex64::new(1.0 / 16.0, 0.0)).norm() < 1e-14));
    }

    #[test]
    fn near_field_round_trip_full_size() {
        let f = random_field(512, 4);
        let spec = PropagationSpec::near_field(1e-3).unwrap();
        let back = propagate_back(&propagate(&f, spec), spec);
        assert!(max_diff(&f, &back) < 1e-10);
    }

    #[test]
    fn linearity() {
        let f = random_field(32, 5);
        let g = random_field(32, 6);
        let (a, b) = (Complex64::new(0.3, -1.2), Complex64::new(-0.7, 0.4));
        let spec = PropagationSpec::near_field(4e-3).unwrap();
        let combo = ComplexField::new(f.data().mapv(|x| x * a) + g.data().mapv(|x| x * b));
        let lhs = propagate(&combo, spec);
        let pf = propagate(&f, spec);
        let pg = propagate(&g, spec);
        let rhs = ComplexField::new(pf.data().mapv(|x| x * a) + pg.data().mapv(|x| x * b));
        assert!(max_diff(&lhs, &rhs) < 1e-12);
    }

    /// Pins the kernel sign. In the exp(-ikz) convention a converging wave
    /// carries exp(+ik r²/2f), so a phase-advanced bump (positive phase,
    /// refractive index below one) is a diverging lens: the on-axis intensity
    /// drops below 1 after a short propagation.
    #[test]
    fn positive_phase_bump_defocuses() {
        let n = 128;
        let c = n as f64 / 2.0;
        let f = ComplexField::from_shape_fn(n, n, |(i, j)| {
            let r2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            Complex64::from_polar(1.0, 0.3 * (-r2 / (2.0 * 16.0)).exp())
        });
        let g = propagate(&f, PropagationSpec::near_field(0.05).unwrap());
        let center = g.data()[[n / 2, n / 2]].norm_sqr();
        assert!(center < 0.95, "on-axis intensity {center}");
        let g_neg = propagate(&ComplexField::new(f.data().mapv(|c| c.conj())), PropagationSpec::near_field(0.05).unwrap());
        assert!(g_neg.data()[[n / 2, n / 2]].norm_sqr() > 1.05);
    }

    proptest::proptest! {
        #[test]
        fn near_field_unitary_on_random_fields(n in 2usize..40, log_d in -4.0f64..0.0, seed in proptest::prelude::any::<u64>()) {
            let f = random_field(n, seed);
            let spec = PropagationSpec::near_field(10f64.powf(log_d)).unwrap();
            let g = propagate(&f, spec);
            let energy = |x: &ComplexField| x.data().iter().map(|c| c.norm_sqr()).sum::<f64>();
            let (ef, eg) = (energy(&f), energy(&g));
            proptest::prop_assert!((ef - eg).abs() <= 1e-12 * ef);
            proptest::prop_assert!(max_diff(&propagate_back(&g, spec), &f) < 1e-12);
        }
    }
}
