//! Two-dimensional field containers and the array plumbing shared by every
//! other module: centered unitary FFTs, padding, cropping, circular shifts,
//! patch extraction and periodic Gaussian smoothing.
//!
//! All stored spectra use the centered layout (zero frequency at index
//! `(h / 2, w / 2)`), and the DFT is unitary so that `Σ|f|²` is preserved.

use std::cell::RefCell;
use std::sync::Arc;

use ndarray::{s, Array2};
use num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};

use crate::error::{Error, Result};

/// Complex amplitude per pixel on a rectangular grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexField {
    data: Array2<Complex64>,
    pixel_pitch: Option<f64>,
}

/// Real value per pixel (phase in radians, intensity in photons, ...).
#[derive(Clone, Debug, PartialEq)]
pub struct RealField {
    data: Array2<f64>,
}

impl ComplexField {
    /// Wraps an array. Panics on an empty array, which no operation here produces.
    pub fn new(data: Array2<Complex64>) -> Self {
        assert!(data.nrows() >= 1 && data.ncols() >= 1, "empty field");
        Self {
            data,
            pixel_pitch: None,
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::new(Array2::zeros((height, width)))
    }

    pub fn constant(height: usize, width: usize, value: Complex64) -> Self {
        Self::new(Array2::from_elem((height, width), value))
    }

    pub fn from_shape_fn(
        height: usize,
        width: usize,
        f: impl FnMut((usize, usize)) -> Complex64,
    ) -> Self {
        Self::new(Array2::from_shape_fn((height, width), f))
    }

    /// `exp(i·phase)` for every pixel.
    pub fn from_phase(phase: &RealField) -> Self {
        Self::new(phase.data.mapv(|p| Complex64::from_polar(1.0, p)))
    }

    pub fn with_pixel_pitch(mut self, pitch: f64) -> Self {
        self.pixel_pitch = Some(pitch);
        self
    }

    pub fn pixel_pitch(&self) -> Option<f64> {
        self.pixel_pitch
    }

    pub fn height(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn data(&self) -> &Array2<Complex64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array2<Complex64> {
        &mut self.data
    }

    pub fn into_inner(self) -> Array2<Complex64> {
        self.data
    }

    /// Total power `Σ|f|²`.
    pub fn power(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }

    /// `|f|²` per pixel.
    pub fn intensity(&self) -> RealField {
        RealField::new(self.data.mapv(|c| c.norm_sqr()))
    }

    pub fn modulus(&self) -> RealField {
        RealField::new(self.data.mapv(|c| c.norm()))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, c| m.max(c.norm()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }
}

impl RealField {
    pub fn new(data: Array2<f64>) -> Self {
        assert!(data.nrows() >= 1 && data.ncols() >= 1, "empty field");
        Self { data }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::new(Array2::zeros((height, width)))
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        Self::new(Array2::from_elem((height, width), value))
    }

    pub fn from_shape_fn(height: usize, width: usize, f: impl FnMut((usize, usize)) -> f64) -> Self {
        Self::new(Array2::from_shape_fn((height, width), f))
    }

    pub fn height(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array2<f64> {
        &mut self.data
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.data
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn map(&self, f: impl FnMut(f64) -> f64) -> RealField {
        RealField::new(self.data.mapv(f))
    }

    /// Real field promoted to a complex one with zero imaginary part.
    pub fn to_complex(&self) -> ComplexField {
        ComplexField::new(self.data.mapv(|v| Complex64::new(v, 0.0)))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

// ---------------------------------------------------------------------------
// FFT plumbing
// ---------------------------------------------------------------------------

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
    // Reused scratch and transpose buffers for `Fft2Plan::process`.
    static WORK: RefCell<(Vec<Complex64>, Vec<Complex64>)> = const { RefCell::new((Vec::new(), Vec::new())) };
}

fn plan(len: usize, direction: FftDirection) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft(len, direction))
}

/// Unnormalized 2D DFT over a row-major `h × w` buffer, native (uncentered)
/// frequency layout.
#[derive(Clone)]
pub(crate) struct Fft2Plan {
    h: usize,
    w: usize,
    row: Arc<dyn Fft<f64>>,
    col: Arc<dyn Fft<f64>>,
}

impl Fft2Plan {
    pub(crate) fn new(h: usize, w: usize, direction: FftDirection) -> Self {
        Self {
            h,
            w,
            row: plan(w, direction),
            col: plan(h, direction),
        }
    }

    pub(crate) fn forward(h: usize, w: usize) -> Self {
        Self::new(h, w, FftDirection::Forward)
    }

    pub(crate) fn inverse(h: usize, w: usize) -> Self {
        Self::new(h, w, FftDirection::Inverse)
    }

    pub(crate) fn len(&self) -> usize {
        self.h * self.w
    }

    pub(crate) fn process(&self, data: &mut [Complex64]) {
        debug_assert_eq!(data.len(), self.len());
        let scratch_len = self
            .row
            .get_inplace_scratch_len()
            .max(self.col.get_inplace_scratch_len());
        WORK.with(|work| {
            let (scratch, tmp) = &mut *work.borrow_mut();
            if scratch.len() < scratch_len {
                scratch.resize(scratch_len, Complex64::default());
            }
            if tmp.len() < data.len() {
                tmp.resize(data.len(), Complex64::default());
            }
            let scratch = &mut scratch[..scratch_len];
            let tmp = &mut tmp[..data.len()];
            self.row.process_with_scratch(data, scratch);
            transpose(data, tmp, self.h, self.w);
            self.col.process_with_scratch(tmp, scratch);
            transpose(tmp, data, self.w, self.h);
        })
    }
}

fn transpose(src: &[Complex64], dst: &mut [Complex64], h: usize, w: usize) {
    const BLOCK: usize = 16;
    for ib in (0..h).step_by(BLOCK) {
        for jb in (0..w).step_by(BLOCK) {
            for i in ib..(ib + BLOCK).min(h) {
                let row = &src[i * w..(i + 1) * w];
                for j in jb..(jb + BLOCK).min(w) {
                    dst[j * h + i] = row[j];
                }
            }
        }
    }
}

/// Circularly rolls a row-major buffer so that element `(i, j)` lands at
/// `((i + sy) mod h, (j + sx) mod w)`.
pub(crate) fn roll<T: Copy + Default>(src: &[T], h: usize, w: usize, sy: usize, sx: usize) -> Vec<T> {
    let mut out = vec![T::default(); src.len()];
    let (sy, sx) = (sy % h, sx % w);
    for i in 0..h {
        let oi = (i + sy) % h;
        let src_row = &src[i * w..(i + 1) * w];
        let dst_row = &mut out[oi * w..(oi + 1) * w];
        dst_row[sx..].copy_from_slice(&src_row[..w - sx]);
        dst_row[..sx].copy_from_slice(&src_row[w - sx..]);
    }
    out
}

pub(crate) fn fftshift<T: Copy + Default>(src: &[T], h: usize, w: usize) -> Vec<T> {
    roll(src, h, w, h / 2, w / 2)
}

pub(crate) fn ifftshift<T: Copy + Default>(src: &[T], h: usize, w: usize) -> Vec<T> {
    roll(src, h, w, h - h / 2, w - w / 2)
}

fn centered_transform(f: &ComplexField, direction: FftDirection) -> ComplexField {
    let (h, w) = f.shape();
    let flat: Vec<Complex64> = f.data.iter().copied().collect();
    let mut buf = ifftshift(&flat, h, w);
    Fft2Plan::new(h, w, direction).process(&mut buf);
    let norm = 1.0 / ((h * w) as f64).sqrt();
    let out: Vec<Complex64> = fftshift(&buf, h, w).into_iter().map(|c| c * norm).collect();
    let mut field = ComplexField::new(Array2::from_shape_vec((h, w), out).expect("shape"));
    field.pixel_pitch = f.pixel_pitch;
    field
}

/// Unitary 2D DFT with zero frequency at the array center.
pub fn fft2_centered(f: &ComplexField) -> ComplexField {
    centered_transform(f, FftDirection::Forward)
}

/// Inverse of [`fft2_centered`].
pub fn ifft2_centered(f: &ComplexField) -> ComplexField {
    centered_transform(f, FftDirection::Inverse)
}

// ---------------------------------------------------------------------------
// Windowing
// ---------------------------------------------------------------------------

pub(crate) fn pad_array<T: Clone>(a: &Array2<T>, margin: usize, fill: T) -> Array2<T> {
    let (h, w) = a.dim();
    let mut out = Array2::from_elem((h + 2 * margin, w + 2 * margin), fill);
    out.slice_mut(s![margin..margin + h, margin..margin + w]).assign(a);
    out
}

pub(crate) fn window_array<T: Clone>(
    a: &Array2<T>,
    top: usize,
    left: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Array2<T>> {
    let (h, w) = a.dim();
    if top + out_h > h || left + out_w > w {
        return Err(Error::OutOfBounds(format!(
            "window {out_h}x{out_w} at ({top}, {left}) exceeds {h}x{w}"
        )));
    }
    Ok(a.slice(s![top..top + out_h, left..left + out_w]).to_owned())
}

/// Offset of a centered `inner` window inside `outer`.
pub(crate) fn center_offset(outer: usize, inner: usize) -> usize {
    (outer - inner) / 2
}

/// Surrounds `f` with `margin` pixels of `fill` on every side.
pub fn pad_center(f: &ComplexField, margin: usize, fill: Complex64) -> ComplexField {
    let mut out = ComplexField::new(pad_array(&f.data, margin, fill));
    out.pixel_pitch = f.pixel_pitch;
    out
}

/// The centered `out_h × out_w` sub-window. Inverts [`pad_center`] exactly.
pub fn crop_center(f: &ComplexField, out_h: usize, out_w: usize) -> Result<ComplexField> {
    let (h, w) = f.shape();
    if out_h > h || out_w > w || out_h == 0 || out_w == 0 {
        return Err(Error::Dimension(format!(
            "cannot crop {h}x{w} to {out_h}x{out_w}"
        )));
    }
    let top = center_offset(h, out_h);
    let left = center_offset(w, out_w);
    let mut out = ComplexField::new(window_array(&f.data, top, left, out_h, out_w)?);
    out.pixel_pitch = f.pixel_pitch;
    Ok(out)
}

/// Non-wrapping `size × size` window with its top-left corner at `(top, left)`.
pub fn extract_patch(f: &ComplexField, top: usize, left: usize, size: usize) -> Result<ComplexField> {
    if size == 0 {
        return Err(Error::Dimension("patch size must be positive".into()));
    }
    let mut out = ComplexField::new(window_array(&f.data, top, left, size, size)?);
    out.pixel_pitch = f.pixel_pitch;
    Ok(out)
}

/// Circular shift by `(dy, dx)` pixels (negative values shift up/left).
pub fn circular_shift(f: &ComplexField, dy: isize, dx: isize) -> ComplexField {
    let (h, w) = f.shape();
    let flat: Vec<Complex64> = f.data.iter().copied().collect();
    let sy = dy.rem_euclid(h as isize) as usize;
    let sx = dx.rem_euclid(w as isize) as usize;
    let out = roll(&flat, h, w, sy, sx);
    let mut field = ComplexField::new(Array2::from_shape_vec((h, w), out).expect("shape"));
    field.pixel_pitch = f.pixel_pitch;
    field
}

// ---------------------------------------------------------------------------
// Smoothing
// ---------------------------------------------------------------------------

/// Normalized 1D Gaussian taps truncated at 4σ.
pub(crate) fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil() as isize;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);
    taps
}

/// Separable Gaussian smoothing with periodic boundaries. `sigma <= 0` is a no-op.
pub fn gaussian_blur_periodic(f: &RealField, sigma: f64) -> RealField {
    if sigma <= 0.0 {
        return f.clone();
    }
    let taps = gaussian_taps(sigma);
    let radius = (taps.len() / 2) as isize;
    let (h, w) = f.shape();
    let src = &f.data;
    let mut rows = Array2::<f64>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (t, k) in taps.iter().zip(-radius..=radius) {
                let jj = (j as isize + k).rem_euclid(w as isize) as usize;
                acc += t * src[[i, jj]];
            }
            rows[[i, j]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for i in 0..h {
        for (t, k) in taps.iter().zip(-radius..=radius) {
            let ii = (i as isize + k).rem_euclid(h as isize) as usize;
            let src_row = rows.row(ii);
            let mut dst_row = out.row_mut(i);
            dst_row.zip_mut_with(&src_row, |d, s| *d += t * s);
        }
    }
    RealField::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(h: usize, w: usize, seed: u64) -> ComplexField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ComplexField::from_shape_fn(h, w, |_| {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        })
    }

    #[test]
    fn delta_transforms_to_constant() {
        let mut f = ComplexField::zeros(8, 8);
        f.data_mut()[[4, 4]] = Complex64::new(1.0, 0.0);
        let g = fft2_centered(&f);
        for c in g.data() {
            assert!((c - Complex64::new(0.125, 0.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn constant_transforms_to_center_delta() {
        let f = ComplexField::constant(8, 8, Complex64::new(1.0, 0.0));
        let g = fft2_centered(&f);
        for ((i, j), c) in g.data().indexed_iter() {
            let expected = if (i, j) == (4, 4) { 8.0 } else { 0.0 };
            assert!((c - Complex64::new(expected, 0.0)).norm() < 1e-12, "({i},{j}) {c}");
        }
    }

    #[test]
    fn odd_sizes_round_trip() {
        let f = random_field(7, 9, 3);
        let back = ifft2_centered(&fft2_centered(&f));
        for (a, b) in f.data().iter().zip(back.data()) {
            assert!((a - b).norm() < 1e-12);
        }
        // delta at the odd-size center still maps to a constant
        let mut d = ComplexField::zeros(7, 9);
        d.data_mut()[[3, 4]] = Complex64::new(1.0, 0.0);
        let g = fft2_centered(&d);
        let expected = 1.0 / (63.0f64).sqrt();
        assert!(g.data().iter().all(|c| (c.re - expected).abs() < 1e-12 && c.im.abs() < 1e-12));
    }

    #[test]
    fn pad_examples() {
        let ones = ComplexField::constant(2, 2, Complex64::new(1.0, 0.0));
        let padded = pad_center(&ones, 1, Complex64::new(1.0, 0.0));
        assert_eq!(padded.shape(), (4, 4));
        assert!(padded.data().iter().all(|c| *c == Complex64::new(1.0, 0.0)));

        let f = random_field(5, 6, 1);
        assert_eq!(pad_center(&f, 0, Complex64::default()), f);

        let big = ComplexField::zeros(512, 512);
        assert_eq!(pad_center(&big, 256, Complex64::default()).shape(), (1024, 1024));
    }

    #[test]
    fn crop_examples() {
        let f = random_field(16, 16, 9);
        assert_eq!(crop_center(&f, 16, 16).unwrap(), f);
        assert!(matches!(crop_center(&f, 17, 4), Err(Error::Dimension(_))));

        let mut big = ComplexField::zeros(1024, 1024);
        big.data_mut()[[256, 256]] = Complex64::new(2.0, 0.0);
        let c = crop_center(&big, 512, 512).unwrap();
        assert_eq!(c.shape(), (512, 512));
        assert_eq!(c.data()[[0, 0]], Complex64::new(2.0, 0.0));
    }

    #[test]
    fn patch_examples() {
        let f = random_field(512, 512, 5);
        let p = extract_patch(&f, 0, 0, 72).unwrap();
        assert_eq!(p.shape(), (72, 72));
        assert_eq!(p.data()[[71, 71]], f.data()[[71, 71]]);
        assert_eq!(extract_patch(&f, 0, 0, 512).unwrap(), f);
        assert!(matches!(extract_patch(&f, 500, 0, 72), Err(Error::OutOfBounds(_))));

        let a = extract_patch(&f, 10, 10, 72).unwrap();
        let b = extract_patch(&f, 10, 15, 72).unwrap();
        for i in 0..72 {
            for j in 0..67 {
                assert_eq!(a.data()[[i, j + 5]], b.data()[[i, j]]);
                assert_eq!(b.data()[[i, j]], f.data()[[10 + i, 15 + j]]);
            }
        }
    }

    #[test]
    fn blur_preserves_mean_and_reduces_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let f = RealField::from_shape_fn(128, 128, |_| rng.random_range(-1.0..1.0));
        let g = gaussian_blur_periodic(&f, 3.0);
        assert!((f.mean() - g.mean()).abs() < 1e-12);
        let var = |r: &RealField| {
            let m = r.mean();
            r.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / r.len() as f64
        };
        assert!(var(&g) < 0.1 * var(&f));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn parseval_and_round_trip(h in 1usize..24, w in 1usize..24, seed in any::<u64>()) {
            let f = random_field(h, w, seed);
            let g = fft2_centered(&f);
            let p = f.power();
            prop_assert!((p - g.power()).abs() / p < 1e-12);
            let back = ifft2_centered(&g);
            let tol = 1e-12 * f.max_abs();
            for (a, b) in f.data().iter().zip(back.data()) {
                prop_assert!((a - b).norm() < tol);
            }
        }

        #[test]
        fn shift_changes_only_phase(h in 2usize..20, w in 2usize..20, dy in -30isize..30, dx in -30isize..30, seed in any::<u64>()) {
            let f = random_field(h, w, seed);
            let a = fft2_centered(&f);
            let b = fft2_centered(&circular_shift(&f, dy, dx));
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x.norm() - y.norm()).abs() < 1e-10);
            }
        }

        #[test]
        fn pad_crop_round_trip(h in 1usize..20, w in 1usize..20, m in 0usize..8, seed in any::<u64>()) {
            let f = random_field(h, w, seed);
            let padded = pad_center(&f, m, Complex64::new(0.3, -0.2));
            prop_assert_eq!(crop_center(&padded, h, w).unwrap(), f);
        }
    }
}
