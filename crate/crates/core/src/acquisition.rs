//! Forward models for near-field holography (NFH), far-field ptychography
//! (FFP) and near-field ptychography (NFP): noise-free detector intensities,
//! fluence normalization and Poisson noise.
//!
//! Exposure `k` of each modality maps the object transmission `T` to a
//! detector field `g_k` through a chain of linear steps:
//!
//! | modality | exit wave                                   | detector                     |
//! |----------|---------------------------------------------|------------------------------|
//! | NFH      | `T` padded with vacuum (fill 1)             | near-field propagation       |
//! | FFP      | `P · T[patch k]`                            | unitary far-field transform  |
//! | NFP      | illumination frame with `T` embedded at `k` | near field, crop at object   |
//!
//! The same chain run backwards gives the adjoint used by the reconstruction.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{fftshift, gaussian_blur_periodic, ifftshift, ComplexField, Fft2Plan, RealField};
use crate::optics::{NearFieldPropagator, PropagationSpec};
use crate::phantom::ObjectModel;

/// Fresnel number per pixel shared by the near-field modalities.
pub const DEFAULT_FRESNEL_NUMBER: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Nfh,
    Ffp,
    Nfp,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Nfh, Modality::Ffp, Modality::Nfp];

    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::Nfh => "nfh",
            Modality::Ffp => "ffp",
            Modality::Nfp => "nfp",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nfh" => Ok(Modality::Nfh),
            "ffp" => Ok(Modality::Ffp),
            "nfp" => Ok(Modality::Nfp),
            other => Err(Error::Config(format!("unknown modality '{other}'"))),
        }
    }
}

/// Illumination incident on the object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProbeSpec {
    PlaneWave {
        array_size: usize,
    },
    /// Centered Gaussian magnitude with unit peak and a Gaussian phase bump
    /// rising from 0 at the edges to `phase_peak` at the center.
    Gaussian {
        array_size: usize,
        sigma_mag: f64,
        phase_peak: f64,
    },
    /// Unit magnitude with smoothed random phase.
    Structured {
        array_size: usize,
        phase_sigma: f64,
        smooth_sigma: f64,
        seed: u64,
    },
}

impl ProbeSpec {
    pub fn array_size(&self) -> usize {
        match *self {
            ProbeSpec::PlaneWave { array_size }
            | ProbeSpec::Gaussian { array_size, .. }
            | ProbeSpec::Structured { array_size, .. } => array_size,
        }
    }
}

pub fn build_probe(spec: &ProbeSpec) -> ComplexField {
    match *spec {
        ProbeSpec::PlaneWave { array_size } => {
            ComplexField::constant(array_size, array_size, Complex64::new(1.0, 0.0))
        }
        ProbeSpec::Gaussian {
            array_size,
            sigma_mag,
            phase_peak,
        } => {
            let c = (array_size / 2) as f64;
            ComplexField::from_shape_fn(array_size, array_size, |(i, j)| {
                let r2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
                let g = (-r2 / (2.0 * sigma_mag * sigma_mag)).exp();
                Complex64::from_polar(g, phase_peak * g)
            })
        }
        ProbeSpec::Structured {
            array_size,
            phase_sigma,
            smooth_sigma,
            seed,
        } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let white = RealField::from_shape_fn(array_size, array_size, |_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                phase_sigma * z
            });
            let phase = gaussian_blur_periodic(&white, smooth_sigma);
            ComplexField::from_phase(&phase)
        }
    }
}

/// Raster of overlapping probe positions, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanGrid {
    pub rows: usize,
    pub cols: usize,
    pub step: usize,
    /// `[row, col]` of the first patch's top-left corner.
    pub origin: [usize; 2],
    pub patch_size: usize,
}

impl ScanGrid {
    /// Grid centered on an `array.0 × array.1` object, with the origin
    /// rounded up when the slack is odd.
    pub fn centered(
        rows: usize,
        cols: usize,
        step: usize,
        patch_size: usize,
        array: (usize, usize),
    ) -> Result<Self> {
        let origin_for = |count: usize, extent: usize| -> Result<usize> {
            let span = (count.max(1) - 1) * step + patch_size;
            if span > extent {
                return Err(Error::Config(format!(
                    "{count} positions of step {step} with {patch_size}-px patches span {span} > {extent}"
                )));
            }
            Ok((extent - span).div_ceil(2))
        };
        if rows == 0 || cols == 0 || patch_size == 0 {
            return Err(Error::Config("scan grid needs at least one position".into()));
        }
        Ok(Self {
            rows,
            cols,
            step,
            origin: [origin_for(rows, array.0)?, origin_for(cols, array.1)?],
            patch_size,
        })
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn position(&self, k: usize) -> [usize; 2] {
        let (r, c) = (k / self.cols, k % self.cols);
        [self.origin[0] + self.step * r, self.origin[1] + self.step * c]
    }

    pub fn positions(&self) -> Vec<[usize; 2]> {
        (0..self.len()).map(|k| self.position(k)).collect()
    }

    pub fn fits(&self, h: usize, w: usize) -> bool {
        let last = self.position(self.len() - 1);
        last[0] + self.patch_size <= h && last[1] + self.patch_size <= w
    }
}

/// Object offsets for NFP: `per_axis` values spanning `[0, span]`, rounded to
/// the nearest pixel, combined row-major.
pub fn nfp_offsets(per_axis: usize, span: usize) -> Vec<[usize; 2]> {
    let axis: Vec<usize> = if per_axis <= 1 {
        vec![span / 2]
    } else {
        (0..per_axis)
            .map(|i| (i as f64 * span as f64 / (per_axis - 1) as f64).round() as usize)
            .collect()
    };
    axis.iter()
        .flat_map(|&r| axis.iter().map(move |&c| [r, c]))
        .collect()
}

/// Full-size (512² object) or desk-size (256² object) configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Full,
    Desk,
}

impl Scale {
    pub fn object_size(&self) -> usize {
        match self {
            Scale::Full => 512,
            Scale::Desk => 256,
        }
    }

    pub fn for_object_size(size: usize) -> Option<Scale> {
        match size {
            512 => Some(Scale::Full),
            256 => Some(Scale::Desk),
            _ => None,
        }
    }
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(Scale::Full),
            "desk" => Ok(Scale::Desk),
            other => Err(Error::Config(format!("unknown scale '{other}'"))),
        }
    }
}

/// Everything needed to simulate (and invert) one modality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionGeometry {
    pub modality: Modality,
    /// `[rows, cols]` of the object array.
    pub object_shape: [usize; 2],
    pub propagation: PropagationSpec,
    pub probe: ProbeSpec,
    /// FFP only.
    pub grid: Option<ScanGrid>,
    /// NFH only: vacuum margin added on each side before propagation.
    pub pad_margin: usize,
    /// NFP only: `[row, col]` of the object inside the illumination frame.
    pub scan_offsets: Vec<[usize; 2]>,
    /// NFP only: side of the square detector window kept after propagation,
    /// centered on the object.
    pub detector_crop: usize,
}

impl AcquisitionGeometry {
    pub fn nfh(object_size: usize, pad_margin: usize, fresnel_number: f64) -> Result<Self> {
        let geom = Self {
            modality: Modality::Nfh,
            object_shape: [object_size, object_size],
            propagation: PropagationSpec::near_field(fresnel_number)?,
            probe: ProbeSpec::PlaneWave {
                array_size: object_size,
            },
            grid: None,
            pad_margin,
            scan_offsets: Vec::new(),
            detector_crop: 0,
        };
        geom.validate()?;
        Ok(geom)
    }

    pub fn ffp(object_size: usize, grid: ScanGrid, sigma_mag: f64, phase_peak: f64) -> Result<Self> {
        let geom = Self {
            modality: Modality::Ffp,
            object_shape: [object_size, object_size],
            propagation: PropagationSpec::FarField,
            probe: ProbeSpec::Gaussian {
                array_size: grid.patch_size,
                sigma_mag,
                phase_peak,
            },
            grid: Some(grid),
            pad_margin: 0,
            scan_offsets: Vec::new(),
            detector_crop: 0,
        };
        geom.validate()?;
        Ok(geom)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn nfp(
        object_size: usize,
        illumination_size: usize,
        per_axis: usize,
        phase_sigma: f64,
        smooth_sigma: f64,
        probe_seed: u64,
        fresnel_number: f64,
    ) -> Result<Self> {
        if illumination_size < object_size {
            return Err(Error::Config(format!(
                "illumination {illumination_size} smaller than object {object_size}"
            )));
        }
        let geom = Self {
            modality: Modality::Nfp,
            object_shape: [object_size, object_size],
            propagation: PropagationSpec::near_field(fresnel_number)?,
            probe: ProbeSpec::Structured {
                array_size: illumination_size,
                phase_sigma,
                smooth_sigma,
                seed: probe_seed,
            },
            grid: None,
            pad_margin: 0,
            scan_offsets: nfp_offsets(per_axis, illumination_size - object_size),
            detector_crop: object_size,
        };
        geom.validate()?;
        Ok(geom)
    }

    /// Standard configuration for a modality at a given scale.
    pub fn preset(modality: Modality, scale: Scale) -> Self {
        let n = scale.object_size();
        let built = match (modality, scale) {
            (Modality::Nfh, _) => Self::nfh(n, n / 2, DEFAULT_FRESNEL_NUMBER),
            (Modality::Ffp, Scale::Full) => {
                ScanGrid::centered(66, 68, 5, 72, (n, n)).and_then(|g| Self::ffp(n, g, 6.0, 0.5))
            }
            (Modality::Ffp, Scale::Desk) => {
                ScanGrid::centered(34, 34, 5, 72, (n, n)).and_then(|g| Self::ffp(n, g, 6.0, 0.5))
            }
            (Modality::Nfp, _) => Self::nfp(n, n * 3 / 2, 4, 0.3, 5.0, 17, DEFAULT_FRESNEL_NUMBER),
        };
        built.expect("presets are valid")
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.object_shape;
        if h == 0 || w == 0 {
            return Err(Error::Config("empty object shape".into()));
        }
        match self.modality {
            Modality::Nfh => {
                if !matches!(self.propagation, PropagationSpec::NearField { .. }) {
                    return Err(Error::Config("NFH needs near-field propagation".into()));
                }
                if self.probe.array_size() != h || h != w {
                    return Err(Error::Config("NFH plane wave must match a square object".into()));
                }
            }
            Modality::Ffp => {
                let grid = self
                    .grid
                    .as_ref()
                    .ok_or_else(|| Error::Config("FFP needs a scan grid".into()))?;
                if grid.is_empty() || !grid.fits(h, w) {
                    return Err(Error::Config(format!(
                        "scan grid {grid:?} does not fit inside a {h}x{w} object"
                    )));
                }
                if self.probe.array_size() != grid.patch_size {
                    return Err(Error::Config("probe size must equal the patch size".into()));
                }
                if self.propagation != PropagationSpec::FarField {
                    return Err(Error::Config("FFP needs far-field propagation".into()));
                }
            }
            Modality::Nfp => {
                let f = self.probe.array_size();
                if self.scan_offsets.is_empty() {
                    return Err(Error::Config("NFP needs at least one scan offset".into()));
                }
                if self
                    .scan_offsets
                    .iter()
                    .any(|&[r, c]| r + h > f || c + w > f)
                {
                    return Err(Error::Config("NFP object leaves the illumination frame".into()));
                }
                if self.detector_crop == 0 || self.detector_crop > h.min(w) {
                    return Err(Error::Config(format!(
                        "NFP detector crop {} must be within the object size",
                        self.detector_crop
                    )));
                }
                if !matches!(self.propagation, PropagationSpec::NearField { .. }) {
                    return Err(Error::Config("NFP needs near-field propagation".into()));
                }
            }
        }
        Ok(())
    }

    pub fn num_exposures(&self) -> usize {
        match self.modality {
            Modality::Nfh => 1,
            Modality::Ffp => self.grid.as_ref().map_or(0, ScanGrid::len),
            Modality::Nfp => self.scan_offsets.len(),
        }
    }

    /// Shape of one detector frame.
    pub fn detector_shape(&self) -> (usize, usize) {
        let [h, w] = self.object_shape;
        match self.modality {
            Modality::Nfh => (h + 2 * self.pad_margin, w + 2 * self.pad_margin),
            Modality::Ffp => {
                let p = self.probe.array_size();
                (p, p)
            }
            Modality::Nfp => (self.detector_crop, self.detector_crop),
        }
    }

    /// Object-array window `(top, left, height, width)` that exposure `k` sees.
    pub fn exposure_window(&self, k: usize) -> (usize, usize, usize, usize) {
        let [h, w] = self.object_shape;
        match self.modality {
            Modality::Ffp => {
                let grid = self.grid.as_ref().expect("validated");
                let [r, c] = grid.position(k);
                (r, c, grid.patch_size, grid.patch_size)
            }
            Modality::Nfh | Modality::Nfp => (0, 0, h, w),
        }
    }
}

/// Stack of detector frames with everything needed to reproduce them.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Photons per detector pixel, centered layout for far-field frames.
    pub frames: Vec<RealField>,
    pub geometry: AcquisitionGeometry,
    /// Photons per object pixel, summed over all exposures.
    pub fluence: f64,
    /// Incident photons per unit `|probe|²`; the forward model scales the
    /// probe amplitude by its square root.
    pub illumination_scale: f64,
    pub seed: Option<u64>,
    pub noise_free: bool,
}

/// One exposure's forward and adjoint maps, bound to a geometry and an
/// illumination scale.
#[derive(Clone)]
pub struct ForwardModel {
    geometry: AcquisitionGeometry,
    /// Probe already multiplied by the amplitude scale.
    probe: Array2<Complex64>,
    amplitude: f64,
    near: Option<NearFieldPropagator>,
    far: Option<(Fft2Plan, Fft2Plan)>,
}

impl ForwardModel {
    pub fn new(geometry: &AcquisitionGeometry, illumination_scale: f64) -> Result<Self> {
        geometry.validate()?;
        if !(illumination_scale >= 0.0 && illumination_scale.is_finite()) {
            return Err(Error::Domain(format!("illumination scale {illumination_scale}")));
        }
        let amplitude = illumination_scale.sqrt();
        let probe = build_probe(&geometry.probe).into_inner().mapv(|c| c * amplitude);
        let (near, far) = match (geometry.modality, geometry.propagation) {
            (Modality::Nfh, PropagationSpec::NearField { fresnel_number }) => {
                let (fh, fw) = geometry.detector_shape();
                (Some(NearFieldPropagator::new(fh, fw, fresnel_number)), None)
            }
            (Modality::Nfp, PropagationSpec::NearField { fresnel_number }) => {
                let f = geometry.probe.array_size();
                (Some(NearFieldPropagator::new(f, f, fresnel_number)), None)
            }
            (Modality::Ffp, _) => {
                let p = geometry.probe.array_size();
                (None, Some((Fft2Plan::forward(p, p), Fft2Plan::inverse(p, p))))
            }
            _ => unreachable!("validated"),
        };
        Ok(Self {
            geometry: geometry.clone(),
            probe,
            amplitude,
            near,
            far,
        })
    }

    pub fn geometry(&self) -> &AcquisitionGeometry {
        &self.geometry
    }

    pub fn num_exposures(&self) -> usize {
        self.geometry.num_exposures()
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    fn check_k(&self, k: usize) -> Result<()> {
        if k >= self.num_exposures() {
            return Err(Error::OutOfBounds(format!(
                "exposure {k} of {}",
                self.num_exposures()
            )));
        }
        Ok(())
    }

    /// Detector-plane field for exposure `k`. Far-field frames are returned
    /// in native FFT layout (zero frequency at index 0), which differs from
    /// the centered layout only by a shift and a linear phase.
    pub(crate) fn detector_native(&self, transmission: &Array2<Complex64>, k: usize) -> Vec<Complex64> {
        let [h, w] = self.geometry.object_shape;
        match self.geometry.modality {
            Modality::Nfh => {
                let m = self.geometry.pad_margin;
                let (fh, fw) = self.geometry.detector_shape();
                let mut buf = vec![Complex64::new(self.amplitude, 0.0); fh * fw];
                for i in 0..h {
                    let row = &mut buf[(i + m) * fw + m..(i + m) * fw + m + w];
                    for ((v, t), q) in row.iter_mut().zip(transmission.row(i)).zip(self.probe.row(i)) {
                        *v = t * q;
                    }
                }
                self.near.as_ref().expect("near").forward(&mut buf);
                buf
            }
            Modality::Ffp => {
                let (top, left, p, _) = self.geometry.exposure_window(k);
                let mut buf = Vec::with_capacity(p * p);
                for i in 0..p {
                    let t_row = transmission.slice(s![top + i, left..left + p]);
                    buf.extend(t_row.iter().zip(self.probe.row(i)).map(|(t, q)| t * q));
                }
                let (fwd, _) = self.far.as_ref().expect("far");
                fwd.process(&mut buf);
                let norm = 1.0 / (p as f64);
                buf.iter_mut().for_each(|c| *c *= norm);
                buf
            }
            Modality::Nfp => {
                let f = self.geometry.probe.array_size();
                let [or, oc] = self.geometry.scan_offsets[k];
                let mut buf: Vec<Complex64> = self.probe.iter().copied().collect();
                for i in 0..h {
                    let row = &mut buf[(or + i) * f + oc..(or + i) * f + oc + w];
                    for (v, t) in row.iter_mut().zip(transmission.row(i)) {
                        *v *= t;
                    }
                }
                self.near.as_ref().expect("near").forward(&mut buf);
                let (top, left) = self.nfp_crop_origin(k);
                let c = self.geometry.detector_crop;
                let mut out = Vec::with_capacity(c * c);
                for i in 0..c {
                    out.extend_from_slice(&buf[(top + i) * f + left..(top + i) * f + left + c]);
                }
                out
            }
        }
    }

    fn nfp_crop_origin(&self, k: usize) -> (usize, usize) {
        let [h, w] = self.geometry.object_shape;
        let c = self.geometry.detector_crop;
        let [or, oc] = self.geometry.scan_offsets[k];
        (or + (h - c) / 2, oc + (w - c) / 2)
    }

    /// Pulls a detector-plane gradient `∂C/∂g*` back to `∂C/∂T*` over the
    /// object window of exposure `k` (see [`AcquisitionGeometry::exposure_window`]).
    pub(crate) fn adjoint_native(&self, k: usize, mut grad: Vec<Complex64>) -> Array2<Complex64> {
        let [h, w] = self.geometry.object_shape;
        match self.geometry.modality {
            Modality::Nfh => {
                let m = self.geometry.pad_margin;
                let (_, fw) = self.geometry.detector_shape();
                self.near.as_ref().expect("near").backward(&mut grad);
                let mut out = Vec::with_capacity(h * w);
                for i in 0..h {
                    let g_row = &grad[(i + m) * fw + m..(i + m) * fw + m + w];
                    out.extend(g_row.iter().zip(self.probe.row(i)).map(|(g, q)| g * q.conj()));
                }
                Array2::from_shape_vec((h, w), out).expect("shape")
            }
            Modality::Ffp => {
                let p = self.geometry.probe.array_size();
                let (_, inv) = self.far.as_ref().expect("far");
                inv.process(&mut grad);
                let norm = 1.0 / (p as f64);
                for (g, q) in grad.iter_mut().zip(self.probe.iter()) {
                    *g *= q.conj() * norm;
                }
                Array2::from_shape_vec((p, p), grad).expect("shape")
            }
            Modality::Nfp => {
                let f = self.geometry.probe.array_size();
                let c = self.geometry.detector_crop;
                let (top, left) = self.nfp_crop_origin(k);
                let mut buf = vec![Complex64::default(); f * f];
                for i in 0..c {
                    buf[(top + i) * f + left..(top + i) * f + left + c]
                        .copy_from_slice(&grad[i * c..(i + 1) * c]);
                }
                self.near.as_ref().expect("near").backward(&mut buf);
                let [or, oc] = self.geometry.scan_offsets[k];
                let mut out = Vec::with_capacity(h * w);
                for i in 0..h {
                    let b_row = &buf[(or + i) * f + oc..(or + i) * f + oc + w];
                    let q_row = self.probe.slice(s![or + i, oc..oc + w]);
                    out.extend(b_row.iter().zip(q_row).map(|(g, q)| g * q.conj()));
                }
                Array2::from_shape_vec((h, w), out).expect("shape")
            }
        }
    }

    /// Detector field for exposure `k` in the stored (centered) layout.
    pub fn detector_field(&self, obj: &ObjectModel, k: usize) -> Result<ComplexField> {
        self.check_k(k)?;
        check_object_shape(obj, &self.geometry)?;
        if self.geometry.modality == Modality::Ffp {
            // the centered transform carries the exact phases
            let (top, left, p, _) = self.geometry.exposure_window(k);
            let t = obj.transmission().into_inner();
            let exit = Array2::from_shape_fn((p, p), |(i, j)| t[[top + i, left + j]] * self.probe[[i, j]]);
            return Ok(crate::grid::fft2_centered(&ComplexField::new(exit)));
        }
        let t = obj.transmission().into_inner();
        let buf = self.detector_native(&t, k);
        let (dh, dw) = self.geometry.detector_shape();
        Ok(ComplexField::new(Array2::from_shape_vec((dh, dw), buf).expect("shape")))
    }

    /// Noise-free intensity of exposure `k`, centered layout.
    pub fn intensity(&self, obj: &ObjectModel, k: usize) -> Result<RealField> {
        self.check_k(k)?;
        check_object_shape(obj, &self.geometry)?;
        let t = obj.transmission().into_inner();
        Ok(self.intensity_of_transmission(&t, k))
    }

    fn intensity_of_transmission(&self, t: &Array2<Complex64>, k: usize) -> RealField {
        let (dh, dw) = self.geometry.detector_shape();
        let native: Vec<f64> = self.detector_native(t, k).iter().map(|c| c.norm_sqr()).collect();
        let stored = match self.geometry.modality {
            Modality::Ffp => fftshift(&native, dh, dw),
            _ => native,
        };
        RealField::new(Array2::from_shape_vec((dh, dw), stored).expect("shape"))
    }

    /// Incident photons that land on the object array, summed over exposures.
    pub fn incident_on_object(&self) -> f64 {
        let [h, w] = self.geometry.object_shape;
        match self.geometry.modality {
            Modality::Nfh => self
                .probe
                .slice(s![..h, ..w])
                .iter()
                .map(|c| c.norm_sqr())
                .sum(),
            Modality::Ffp => {
                self.probe.iter().map(|c| c.norm_sqr()).sum::<f64>() * self.num_exposures() as f64
            }
            Modality::Nfp => self
                .geometry
                .scan_offsets
                .iter()
                .map(|&[r, c]| {
                    self.probe
                        .slice(s![r..r + h, c..c + w])
                        .iter()
                        .map(|v| v.norm_sqr())
                        .sum::<f64>()
                })
                .sum(),
        }
    }

    /// Incident photons of exposure `k` over its whole propagation frame.
    pub fn incident_in_frame(&self, k: usize) -> f64 {
        match self.geometry.modality {
            Modality::Nfh => {
                let (fh, fw) = self.geometry.detector_shape();
                self.amplitude * self.amplitude * (fh * fw) as f64
            }
            Modality::Ffp => {
                let _ = k;
                self.probe.iter().map(|c| c.norm_sqr()).sum()
            }
            Modality::Nfp => self.probe.iter().map(|c| c.norm_sqr()).sum(),
        }
    }
}

fn check_object_shape(obj: &ObjectModel, geom: &AcquisitionGeometry) -> Result<()> {
    let (h, w) = obj.shape();
    if [h, w] != geom.object_shape {
        return Err(Error::ShapeMismatch {
            expected: (geom.object_shape[0], geom.object_shape[1]),
            actual: (h, w),
        });
    }
    Ok(())
}

/// Noise-free detector intensity of exposure `k` under unit illumination.
pub fn forward(obj: &ObjectModel, geom: &AcquisitionGeometry, k: usize) -> Result<RealField> {
    ForwardModel::new(geom, 1.0)?.intensity(obj, k)
}

/// All noise-free frames under unit illumination.
pub fn simulate(obj: &ObjectModel, geom: &AcquisitionGeometry) -> Result<Dataset> {
    let model = ForwardModel::new(geom, 1.0)?;
    check_object_shape(obj, geom)?;
    let t = obj.transmission().into_inner();
    let frames: Vec<RealField> = (0..model.num_exposures())
        .into_par_iter()
        .map(|k| model.intensity_of_transmission(&t, k))
        .collect();
    Ok(Dataset {
        frames,
        geometry: geom.clone(),
        fluence: f64::NAN,
        illumination_scale: 1.0,
        seed: None,
        noise_free: true,
    })
}

/// Illumination scale that delivers `n_ph` photons per object pixel, summed
/// over every exposure and averaged over the whole object array.
pub fn fluence_scale(geom: &AcquisitionGeometry, n_ph: f64) -> Result<f64> {
    if !(n_ph >= 0.0 && n_ph.is_finite()) {
        return Err(Error::Domain(format!("fluence {n_ph}")));
    }
    let unit = ForwardModel::new(geom, 1.0)?.incident_on_object();
    let [h, w] = geom.object_shape;
    Ok(n_ph * (h * w) as f64 / unit)
}

/// Rescales a noise-free dataset so that it carries `n_ph` photons per object pixel.
pub fn scale_to_fluence(data: &Dataset, n_ph: f64) -> Result<Dataset> {
    if !data.noise_free {
        return Err(Error::Config("cannot rescale a dataset that already carries noise".into()));
    }
    let scale = fluence_scale(&data.geometry, n_ph)?;
    let ratio = if data.illumination_scale > 0.0 {
        scale / data.illumination_scale
    } else {
        return Err(Error::Config("dataset has zero illumination and cannot be rescaled".into()));
    };
    Ok(Dataset {
        frames: data.frames.iter().map(|f| f.map(|v| v * ratio)).collect(),
        geometry: data.geometry.clone(),
        fluence: n_ph,
        illumination_scale: scale,
        seed: None,
        noise_free: true,
    })
}

/// Replaces every pixel with an exact Poisson draw of the same mean.
///
/// Frame `k` draws from ChaCha stream `k` of `seed`, so the result does not
/// depend on how frames are scheduled across threads.
pub fn add_poisson_noise(data: &Dataset, seed: u64) -> Result<Dataset> {
    if !data.noise_free {
        return Err(Error::Config("dataset already carries noise".into()));
    }
    let frames: Vec<RealField> = data
        .frames
        .par_iter()
        .enumerate()
        .map(|(k, frame)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            frame.map(|mean| poisson_draw(mean, &mut rng))
        })
        .collect();
    Ok(Dataset {
        frames,
        geometry: data.geometry.clone(),
        fluence: data.fluence,
        illumination_scale: data.illumination_scale,
        seed: Some(seed),
        noise_free: false,
    })
}

fn poisson_draw(mean: f64, rng: &mut ChaCha8Rng) -> f64 {
    if mean <= 0.0 {
        return 0.0;
    }
    Poisson::new(mean).expect("positive finite mean").sample(rng)
}

/// Measured frames rearranged into the layout used by [`ForwardModel`]
/// internally (native FFT order for far-field frames).
pub(crate) fn frames_native(data: &Dataset) -> Vec<Vec<f64>> {
    let (dh, dw) = data.geometry.detector_shape();
    data.frames
        .iter()
        .map(|f| {
            let flat: Vec<f64> = f.data().iter().copied().collect();
            match data.geometry.modality {
                Modality::Ffp => ifftshift(&flat, dh, dw),
                _ => flat,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::generate_phantom;

    fn small_ffp() -> AcquisitionGeometry {
        let grid = ScanGrid::centered(5, 5, 4, 16, (32, 32)).unwrap();
        AcquisitionGeometry::ffp(32, grid, 3.0, 0.5).unwrap()
    }

    #[test]
    fn gaussian_probe_profile() {
        let p = build_probe(&ProbeSpec::Gaussian {
            array_size: 72,
            sigma_mag: 6.0,
            phase_peak: 0.5,
        });
        assert!((p.data()[[36, 36]].norm() - 1.0).abs() < 1e-15);
        assert!((p.data()[[36, 36]].arg() - 0.5).abs() < 1e-15);
        assert!((p.data()[[36, 42]].norm() - (-0.5f64).exp()).abs() < 1e-12);
        assert!(p.data()[[0, 0]].arg().abs() < 1e-9);
        // Σ|P|² ≈ πσ² (the magnitude itself integrates to 2πσ²)
        let sum_sq: f64 = p.data().iter().map(|c| c.norm_sqr()).sum();
        let sum_abs: f64 = p.data().iter().map(|c| c.norm()).sum();
        let pi = std::f64::consts::PI;
        assert!((sum_sq / (pi * 36.0) - 1.0).abs() < 0.01, "{sum_sq}");
        assert!((sum_abs / (2.0 * pi * 36.0) - 1.0).abs() < 0.01, "{sum_abs}");
    }

    #[test]
    fn structured_probe_statistics() {
        let spec = ProbeSpec::Structured {
            array_size: 768,
            phase_sigma: 0.3,
            smooth_sigma: 5.0,
            seed: 9,
        };
        let p = build_probe(&spec);
        assert!(p.data().iter().all(|c| (c.norm() - 1.0).abs() < 1e-12));
        let phases: Vec<f64> = p.data().iter().map(|c| c.arg()).collect();
        let n = phases.len() as f64;
        let mean = phases.iter().sum::<f64>() / n;
        let std = (phases.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        // σ_out = σ_in / (2√π s) for Gaussian-filtered white noise
        let expected = 0.3 / (2.0 * std::f64::consts::PI.sqrt() * 5.0);
        assert!((std / expected - 1.0).abs() < 0.1, "{std} vs {expected}");
        assert_eq!(build_probe(&spec), p);
    }

    #[test]
    fn plane_wave_is_ones() {
        let p = build_probe(&ProbeSpec::PlaneWave { array_size: 8 });
        assert!(p.data().iter().all(|c| *c == Complex64::new(1.0, 0.0)));
    }

    #[test]
    fn preset_grids_are_centered_and_inside() {
        let full = AcquisitionGeometry::preset(Modality::Ffp, Scale::Full);
        let grid = full.grid.as_ref().unwrap();
        assert_eq!((grid.rows, grid.cols, grid.len()), (66, 68, 4488));
        assert_eq!(grid.origin, [58, 53]);
        assert!(grid.fits(512, 512));
        let nfp = AcquisitionGeometry::preset(Modality::Nfp, Scale::Full);
        assert_eq!(nfp.num_exposures(), 16);
        let rows: Vec<usize> = nfp.scan_offsets.iter().take(4).map(|o| o[1]).collect();
        assert_eq!(rows, vec![0, 85, 171, 256]);
        assert_eq!(nfp.detector_shape(), (512, 512));
        let nfh = AcquisitionGeometry::preset(Modality::Nfh, Scale::Full);
        assert_eq!(nfh.detector_shape(), (1024, 1024));
    }

    #[test]
    fn empty_object_nfh_is_uniform() {
        let geom = AcquisitionGeometry::nfh(64, 32, 1e-3).unwrap();
        let obj = ObjectModel::pure_phase(RealField::zeros(64, 64));
        let frame = forward(&obj, &geom, 0).unwrap();
        assert_eq!(frame.shape(), (128, 128));
        assert!(frame.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn empty_object_ffp_is_probe_spectrum() {
        let geom = small_ffp();
        let obj = ObjectModel::pure_phase(RealField::zeros(32, 32));
        let probe = build_probe(&geom.probe);
        let expected = crate::grid::fft2_centered(&probe).intensity();
        for k in [0, 7, 24] {
            let frame = forward(&obj, &geom, k).unwrap();
            for (a, b) in frame.data().iter().zip(expected.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert!(matches!(forward(&obj, &geom, 25), Err(Error::OutOfBounds(_))));
    }

    #[test]
    fn detector_field_matches_intensity() {
        let obj = generate_phantom(3, 64, 0.6, 0.2).unwrap();
        for geom in [
            AcquisitionGeometry::nfh(64, 16, 2e-3).unwrap(),
            AcquisitionGeometry::ffp(64, ScanGrid::centered(4, 4, 8, 24, (64, 64)).unwrap(), 4.0, 0.5).unwrap(),
            AcquisitionGeometry::nfp(64, 96, 2, 0.3, 3.0, 5, 2e-3).unwrap(),
        ] {
            let model = ForwardModel::new(&geom, 2.5).unwrap();
            for k in 0..geom.num_exposures() {
                let field = model.detector_field(&obj, k).unwrap();
                let inten = model.intensity(&obj, k).unwrap();
                for (a, b) in field.intensity().data().iter().zip(inten.data()) {
                    assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()));
                }
            }
        }
    }

    #[test]
    fn photon_accounting() {
        let obj = generate_phantom(5, 64, 0.643, 0.194).unwrap();
        let nfh = AcquisitionGeometry::nfh(64, 32, 1e-3).unwrap();
        let ds = scale_to_fluence(&simulate(&obj, &nfh).unwrap(), 350.0).unwrap();
        assert!((ds.illumination_scale - 350.0).abs() < 1e-9);
        let incident = 350.0 * 128.0 * 128.0;
        assert!((ds.frames[0].sum() / incident - 1.0).abs() < 1e-9);

        // NFP: the detector window matches the object, so the only photons
        // missing from a frame are those scattered across the window edge
        let obj = generate_phantom(5, 256, 0.643, 0.194).unwrap();
        let nfp = AcquisitionGeometry::preset(Modality::Nfp, Scale::Desk);
        let ds = scale_to_fluence(&simulate(&obj, &nfp).unwrap(), 160.0).unwrap();
        assert!((ds.illumination_scale - 10.0).abs() < 1e-9);
        let model = ForwardModel::new(&nfp, ds.illumination_scale).unwrap();
        let per_exposure = 10.0 * 256.0 * 256.0;
        for (k, frame) in ds.frames.iter().enumerate() {
            let lost = (frame.sum() - per_exposure).abs() / per_exposure;
            assert!(lost < 0.01, "exposure {k}: {lost}");
            assert!((model.incident_in_frame(k) / (10.0 * 384.0 * 384.0) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ffp_per_exposure_budget() {
        let geom = AcquisitionGeometry::preset(Modality::Ffp, Scale::Full);
        let scale = fluence_scale(&geom, 350.0).unwrap();
        let probe = build_probe(&geom.probe);
        let sum_sq: f64 = probe.data().iter().map(|c| c.norm_sqr()).sum();
        let expected = 350.0 * 512.0 * 512.0 / (4488.0 * sum_sq);
        assert!((scale / expected - 1.0).abs() < 1e-12);
        // analytic Σ|P_unit|² = πσ²
        let analytic = 350.0 * 512.0 * 512.0 / (4488.0 * std::f64::consts::PI * 36.0);
        assert!((scale / analytic - 1.0).abs() < 0.01);
        assert_eq!(fluence_scale(&geom, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn zero_fluence_gives_zero_frames() {
        let obj = generate_phantom(5, 64, 0.643, 0.194).unwrap();
        let geom = small_ffp_for(64);
        let ds = scale_to_fluence(&simulate(&obj, &geom).unwrap(), 0.0).unwrap();
        assert!(ds.frames.iter().all(|f| f.data().iter().all(|&v| v == 0.0)));
        let noisy = add_poisson_noise(&ds, 3).unwrap();
        assert!(noisy.frames.iter().all(|f| f.data().iter().all(|&v| v == 0.0)));
    }

    fn small_ffp_for(n: usize) -> AcquisitionGeometry {
        let grid = ScanGrid::centered(3, 3, 8, 24, (n, n)).unwrap();
        AcquisitionGeometry::ffp(n, grid, 4.0, 0.5).unwrap()
    }

    fn constant_dataset(mean: f64, n: usize) -> Dataset {
        Dataset {
            frames: vec![RealField::constant(n, n, mean)],
            geometry: AcquisitionGeometry::nfh(n, 0, 1e-3).unwrap(),
            fluence: mean,
            illumination_scale: mean,
            seed: None,
            noise_free: true,
        }
    }

    #[test]
    fn poisson_mean_and_variance() {
        // 316² ≈ 10⁵ pixels of mean 100: 5σ bounds are ±0.16 on the mean and
        // ±2.3 on the variance, so the stated ±0.5 / ±3 windows are safe.
        let ds = constant_dataset(100.0, 316);
        let noisy = add_poisson_noise(&ds, 77).unwrap();
        let v: Vec<f64> = noisy.frames[0].data().iter().copied().collect();
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((mean - 100.0).abs() < 0.5, "{mean}");
        assert!((var - 100.0).abs() < 3.0, "{var}");
        assert!(v.iter().all(|x| x.fract() == 0.0 && *x >= 0.0));
        assert!(!noisy.noise_free);
        assert!(add_poisson_noise(&noisy, 1).is_err());
    }

    #[test]
    fn poisson_is_deterministic_per_seed() {
        let ds = constant_dataset(0.3, 64);
        let a = add_poisson_noise(&ds, 5).unwrap();
        let b = add_poisson_noise(&ds, 5).unwrap();
        let c = add_poisson_noise(&ds, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn rigid_shift_leaves_far_field_magnitudes_unchanged() {
        // single exposure covering the whole object: a circular shift of the
        // exit wave only changes the far-field phases
        let obj = generate_phantom(11, 64, 0.6, 0.15).unwrap();
        let t = obj.transmission();
        let a = crate::grid::fft2_centered(&t).intensity();
        let b = crate::grid::fft2_centered(&crate::grid::circular_shift(&t, 5, -3)).intensity();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-9 * (1.0 + x));
        }
    }

    #[test]
    fn moving_a_subregion_changes_the_speckle() {
        let geom = AcquisitionGeometry::preset(Modality::Ffp, Scale::Desk);
        let obj = generate_phantom(2, 256, 0.643, 0.194).unwrap();
        let ds = scale_to_fluence(&simulate(&obj, &geom).unwrap(), 350.0).unwrap();
        // move a block straddling the left edge of the object three pixels right
        let mut moved = obj.clone();
        let support = obj.true_support();
        let c = 128;
        let j0 = (0..256).find(|&j| support[[c, j]]).unwrap();
        for i in c - 10..c + 10 {
            for j in (j0 - 10..j0 + 10).rev() {
                moved.phase.data_mut()[[i, j + 3]] = obj.phase.data()[[i, j]];
            }
        }
        let ds2 = scale_to_fluence(&simulate(&moved, &geom).unwrap(), 350.0).unwrap();
        let max_change = ds
            .frames
            .iter()
            .zip(&ds2.frames)
            .map(|(a, b)| {
                a.data()
                    .iter()
                    .zip(b.data())
                    .map(|(x, y)| (x - y).abs() / (x.max(1.0)).sqrt())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        // change exceeds five standard deviations of the shot noise somewhere
        assert!(max_change > 5.0, "{max_change}");
    }
}
