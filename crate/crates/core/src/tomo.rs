//! 2D tomographic forward model.
//!
//! The projector is a ray-driven Joseph (linear interpolation) scheme. The
//! back-projector walks exactly the same rays, so the pair is an exact
//! numerical adjoint. Images are centred on the origin with pixel `(i, j)` at
//! `x = (j − (W−1)/2)·s`, `y = ((H−1)/2 − i)·s`.

use std::f64::consts::PI;
use std::str::FromStr;

use ndarray::{Array2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::operators::{dot2, ImageGrid};

/// Attenuation of water at 70 keV, mm⁻¹.
pub const MU_WATER: f64 = 0.0192;

/// Default photon count per ray in an empty scanner.
pub const DEFAULT_INCIDENT_PHOTONS: f64 = 50_000.0;

/// Counts below this are clamped before taking the logarithm.
pub const ZERO_COUNT_CLAMP: f64 = 0.5;

/// Hounsfield units to attenuation (mm⁻¹): `hu · μ₀ / 1000`.
pub fn hu_to_attenuation(hu: f64) -> f64 {
    hu * MU_WATER / 1000.0
}

pub fn attenuation_to_hu(mu: f64) -> f64 {
    mu * 1000.0 / MU_WATER
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GeometryKind {
    Parallel,
    /// Flat-detector fan beam.
    Fan { source_radius: f64, detector_radius: f64 },
}

/// Scanner geometry together with the reconstruction grid it is bound to.
#[derive(Debug, Clone, PartialEq)]
pub struct AcquisitionGeometry {
    pub kind: GeometryKind,
    pub num_angles: usize,
    pub num_bins: usize,
    /// Detector bin width, mm.
    pub detector_spacing: f64,
    /// Angular coverage, radians; angles are `a · range / num_angles`.
    pub angular_range: f64,
    pub image_rows: usize,
    pub image_cols: usize,
    pub pixel_spacing: f64,
}

impl AcquisitionGeometry {
    /// Parallel beam over 180°.
    pub fn parallel(
        num_angles: usize,
        num_bins: usize,
        detector_spacing: f64,
        image_shape: (usize, usize),
        pixel_spacing: f64,
    ) -> Result<Self> {
        let g = Self {
            kind: GeometryKind::Parallel,
            num_angles,
            num_bins,
            detector_spacing,
            angular_range: PI,
            image_rows: image_shape.0,
            image_cols: image_shape.1,
            pixel_spacing,
        };
        g.validate()?;
        Ok(g)
    }

    /// Fan beam over 360° with a flat detector.
    pub fn fan(
        num_angles: usize,
        num_bins: usize,
        detector_spacing: f64,
        source_radius: f64,
        detector_radius: f64,
        image_shape: (usize, usize),
        pixel_spacing: f64,
    ) -> Result<Self> {
        let g = Self {
            kind: GeometryKind::Fan { source_radius, detector_radius },
            num_angles,
            num_bins,
            detector_spacing,
            angular_range: 2.0 * PI,
            image_rows: image_shape.0,
            image_cols: image_shape.1,
            pixel_spacing,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_angles == 0 || self.num_bins == 0 || self.image_rows == 0 || self.image_cols == 0 {
            return Err(Error::Config("geometry counts must be positive".into()));
        }
        for (name, v) in [
            ("detector_spacing", self.detector_spacing),
            ("pixel_spacing", self.pixel_spacing),
            ("angular_range", self.angular_range),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if let GeometryKind::Fan { source_radius, detector_radius } = self.kind {
            let circumradius = 0.5
                * self.pixel_spacing
                * ((self.image_rows * self.image_rows + self.image_cols * self.image_cols) as f64).sqrt();
            if !(source_radius > circumradius && detector_radius > circumradius) {
                return Err(Error::Config(format!(
                    "fan radii ({source_radius}, {detector_radius}) must exceed the image circumradius {circumradius}"
                )));
            }
        }
        Ok(())
    }

    pub fn image_shape(&self) -> (usize, usize) {
        (self.image_rows, self.image_cols)
    }

    pub fn sinogram_shape(&self) -> (usize, usize) {
        (self.num_angles, self.num_bins)
    }

    pub fn angle(&self, a: usize) -> f64 {
        a as f64 * self.angular_range / self.num_angles as f64
    }

    /// Signed detector coordinate of bin `b`, mm.
    pub fn bin_position(&self, b: usize) -> f64 {
        (b as f64 - 0.5 * (self.num_bins as f64 - 1.0)) * self.detector_spacing
    }

    pub fn nyquist(&self) -> f64 {
        0.5 / self.detector_spacing
    }

    pub fn check_image(&self, x: &ImageGrid) -> Result<()> {
        if x.shape() != self.image_shape() {
            return Err(Error::Shape(format!("image {:?} but geometry expects {:?}", x.shape(), self.image_shape())));
        }
        if (x.pixel_spacing() - self.pixel_spacing).abs() > 1e-9 * self.pixel_spacing {
            return Err(Error::Shape(format!(
                "image spacing {} but geometry expects {}",
                x.pixel_spacing(),
                self.pixel_spacing
            )));
        }
        Ok(())
    }

    /// Point on and unit direction of the ray for `(angle, bin)`.
    fn ray(&self, a: usize, b: usize) -> ([f64; 2], [f64; 2]) {
        let th = self.angle(a);
        let (s, c) = th.sin_cos();
        let u = self.bin_position(b);
        match self.kind {
            GeometryKind::Parallel => ([u * c, u * s], [-s, c]),
            GeometryKind::Fan { source_radius, detector_radius } => {
                let src = [source_radius * s, -source_radius * c];
                let det = [-detector_radius * s + u * c, detector_radius * c + u * s];
                let d = [det[0] - src[0], det[1] - src[1]];
                let n = (d[0] * d[0] + d[1] * d[1]).sqrt();
                (src, [d[0] / n, d[1] / n])
            }
        }
    }

    /// Calls `f(flat_pixel_index, weight)` for every Joseph sample of a ray.
    #[inline]
    fn walk_ray(&self, a: usize, b: usize, mut f: impl FnMut(usize, f64)) {
        let (p0, dir) = self.ray(a, b);
        let (h, w) = (self.image_rows, self.image_cols);
        let s = self.pixel_spacing;
        let cx = 0.5 * (w as f64 - 1.0);
        let cy = 0.5 * (h as f64 - 1.0);
        if dir[1].abs() >= dir[0].abs() {
            // One interpolation per image row; column position is affine in the row index.
            let len = s / dir[1].abs();
            let t0 = (cy * s - p0[1]) / dir[1];
            let start = (p0[0] + t0 * dir[0]) / s + cx;
            let slope = -dir[0] / dir[1];
            let (lo, hi) = sample_range(start, slope, h, w);
            for i in lo..hi {
                interp(start + slope * i as f64, w, len, |j, wt| f(i * w + j, wt));
            }
        } else {
            let len = s / dir[0].abs();
            let t0 = (-cx * s - p0[0]) / dir[0];
            // row index grows downward
            let start = cy - (p0[1] + t0 * dir[1]) / s;
            let slope = -dir[1] / dir[0];
            let (lo, hi) = sample_range(start, slope, w, h);
            for j in lo..hi {
                interp(start + slope * j as f64, h, len, |i, wt| f(i * w + j, wt));
            }
        }
    }
}

/// Indices `k` in `0..count` for which `start + slope·k` can lie in `(-1, n)`,
/// padded by one on each side; `interp` rejects the rest exactly.
fn sample_range(start: f64, slope: f64, count: usize, n: usize) -> (usize, usize) {
    if slope == 0.0 {
        return if start > -1.0 && start < n as f64 { (0, count) } else { (0, 0) };
    }
    let k1 = (-1.0 - start) / slope;
    let k2 = (n as f64 - start) / slope;
    let (a, b) = if k1 < k2 { (k1, k2) } else { (k2, k1) };
    let lo = (a.floor() - 1.0).max(0.0);
    let hi = (b.ceil() + 2.0).min(count as f64);
    if hi <= lo {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

#[inline]
fn interp(pos: f64, n: usize, len: f64, mut f: impl FnMut(usize, f64)) {
    if !(pos > -1.0 && pos < n as f64) {
        return;
    }
    let lo = pos.floor();
    let frac = pos - lo;
    let lo = lo as isize;
    if lo >= 0 {
        f(lo as usize, (1.0 - frac) * len);
    }
    if lo + 1 < n as isize && frac > 0.0 {
        f((lo + 1) as usize, frac * len);
    }
}

/// Log-domain line integrals, `num_angles × num_bins`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    values: Array2<f64>,
}

impl Sinogram {
    pub fn new(values: Array2<f64>, geom: &AcquisitionGeometry) -> Result<Self> {
        if values.dim() != geom.sinogram_shape() {
            return Err(Error::Shape(format!(
                "sinogram {:?} but geometry expects {:?}",
                values.dim(),
                geom.sinogram_shape()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("sinogram contains non-finite values".into()));
        }
        Ok(Self { values })
    }

    pub fn zeros(geom: &AcquisitionGeometry) -> Self {
        Self { values: Array2::zeros(geom.sinogram_shape()) }
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn dot(&self, other: &Sinogram) -> f64 {
        dot2(&self.values, &other.values)
    }

    fn check(&self, geom: &AcquisitionGeometry) -> Result<()> {
        if self.values.dim() != geom.sinogram_shape() {
            return Err(Error::Shape(format!(
                "sinogram {:?} but geometry expects {:?}",
                self.values.dim(),
                geom.sinogram_shape()
            )));
        }
        Ok(())
    }
}

/// Photon budget and noise seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    pub incident_photons: f64,
    pub seed: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self { incident_photons: DEFAULT_INCIDENT_PHOTONS, seed: 0 }
    }
}

/// Line integrals `A(x)`.
pub fn forward_project(x: &ImageGrid, geom: &AcquisitionGeometry) -> Result<Sinogram> {
    geom.validate()?;
    geom.check_image(x)?;
    Ok(Sinogram { values: project_raw(x.values(), geom) })
}

pub(crate) fn project_raw(x: &Array2<f64>, geom: &AcquisitionGeometry) -> Array2<f64> {
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let mut out = Array2::zeros(geom.sinogram_shape());
    out.axis_iter_mut(Axis(0)).into_par_iter().enumerate().for_each(|(a, mut row)| {
        for (b, v) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            geom.walk_ray(a, b, |p, w| acc += w * xs[p]);
            *v = acc;
        }
    });
    out
}

/// Angles per partial image in the back-projector. Fixed so the summation
/// order does not depend on the thread count.
const BACKPROJECT_CHUNK: usize = 16;

/// Exact adjoint `Aᵀ` of [`forward_project`].
pub fn back_project(sino: &Sinogram, geom: &AcquisitionGeometry) -> Result<ImageGrid> {
    geom.validate()?;
    sino.check(geom)?;
    Ok(ImageGrid::from_parts(back_project_raw(&sino.values, geom), geom.pixel_spacing))
}

pub(crate) fn back_project_raw(sino: &Array2<f64>, geom: &AcquisitionGeometry) -> Array2<f64> {
    let (h, w) = geom.image_shape();
    let chunks: Vec<usize> = (0..geom.num_angles).step_by(BACKPROJECT_CHUNK).collect();
    let partials: Vec<Vec<f64>> = chunks
        .par_iter()
        .map(|&start| {
            let mut img = vec![0.0; h * w];
            for a in start..(start + BACKPROJECT_CHUNK).min(geom.num_angles) {
                for b in 0..geom.num_bins {
                    let v = sino[[a, b]];
                    if v != 0.0 {
                        geom.walk_ray(a, b, |p, wt| img[p] += wt * v);
                    }
                }
            }
            img
        })
        .collect();
    let mut out = vec![0.0; h * w];
    for part in &partials {
        for (o, p) in out.iter_mut().zip(part) {
            *o += p;
        }
    }
    Array2::from_shape_vec((h, w), out).expect("shape")
}

/// Power-iteration estimate of `‖A‖² = λ_max(AᵀA)`.
pub fn projector_norm_sq(geom: &AcquisitionGeometry, iters: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = Array2::from_shape_simple_fn(geom.image_shape(), || {
        let e: f64 = StandardNormal.sample(&mut rng);
        e.abs()
    });
    let mut est = 0.0;
    for _ in 0..iters.max(1) {
        let n = dot2(&v, &v).sqrt();
        if n == 0.0 {
            return 0.0;
        }
        v.mapv_inplace(|e| e / n);
        let av = project_raw(&v, geom);
        est = dot2(&av, &av);
        v = back_project_raw(&av, geom);
    }
    est
}

/// Reconstruction filter window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Window {
    Ramp,
    Hanning,
}

impl FromStr for Window {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ramp" | "ram-lak" => Ok(Self::Ramp),
            "hann" | "hanning" => Ok(Self::Hanning),
            other => Err(Error::Config(format!("unknown filter window `{other}`"))),
        }
    }
}

/// Frequency response (length `n`, FFT order) of the windowed ramp filter.
///
/// The ramp is the transform of the band-limited spatial kernel
/// `h(0) = 1/(4τ²)`, `h(odd n) = −1/(π²n²τ²)`, times `τ` for the convolution
/// sum. Frequencies above `cutoff · Nyquist` are set to zero.
fn filter_response(n: usize, tau: f64, window: Window, cutoff: f64) -> Vec<f64> {
    let mut kernel = vec![Complex::new(0.0, 0.0); n];
    kernel[0].re = tau / (4.0 * tau * tau);
    for k in 1..n / 2 {
        if k % 2 == 1 {
            let v = -tau / (PI * PI * (k * k) as f64 * tau * tau);
            kernel[k].re = v;
            kernel[n - k].re = v;
        }
    }
    FftPlanner::<f64>::new().plan_fft_forward(n).process(&mut kernel);
    (0..n)
        .map(|k| {
            let freq = k.min(n - k) as f64 / (n as f64 / 2.0);
            if freq > cutoff {
                return 0.0;
            }
            let win = match window {
                Window::Ramp => 1.0,
                Window::Hanning => (PI * freq / (2.0 * cutoff)).cos().powi(2),
            };
            kernel[k].re * win
        })
        .collect()
}

/// Applies the reconstruction filter to every projection row.
pub fn filter_sinogram(sino: &Sinogram, geom: &AcquisitionGeometry, window: Window, cutoff: f64) -> Result<Sinogram> {
    if !(cutoff > 0.0 && cutoff <= 1.0) {
        return Err(Error::Config(format!("cutoff fraction must lie in (0, 1], got {cutoff}")));
    }
    sino.check(geom)?;
    let nb = geom.num_bins;
    let n = (2 * nb).next_power_of_two();
    let response = filter_response(n, geom.detector_spacing, window, cutoff);
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut out = Array2::zeros(sino.values.dim());
    Zip::from(out.rows_mut()).and(sino.values.rows()).par_for_each(|mut dst, src| {
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        for (b, v) in src.iter().enumerate() {
            buf[b].re = *v;
        }
        fwd.process(&mut buf);
        for (c, r) in buf.iter_mut().zip(&response) {
            *c *= r;
        }
        inv.process(&mut buf);
        for (b, d) in dst.iter_mut().enumerate() {
            *d = buf[b].re / n as f64;
        }
    });
    Ok(Sinogram { values: out })
}

/// Filtered back-projection for parallel-beam data.
pub fn fbp(sino: &Sinogram, geom: &AcquisitionGeometry, window: Window, cutoff: f64) -> Result<ImageGrid> {
    if geom.kind != GeometryKind::Parallel {
        return Err(Error::Contract("filtered back-projection is implemented for parallel beam only".into()));
    }
    let filtered = filter_sinogram(sino, geom, window, cutoff)?;
    let mut img = back_project(&filtered, geom)?;
    // dθ = π/N_a; the Joseph adjoint spreads each bin over s²/Δu of image area.
    let scale = PI / geom.num_angles as f64 * geom.detector_spacing
        / (geom.pixel_spacing * geom.pixel_spacing);
    img.values_mut().mapv_inplace(|v| v * scale);
    Ok(img)
}

/// Largest admissible expected count; beyond this `A(x)` is strongly negative.
const MAX_MEAN_COUNT: f64 = 1e15;

/// Expected counts `N₀·exp(−A(x))`.
pub fn expected_counts(x: &ImageGrid, geom: &AcquisitionGeometry, incident_photons: f64) -> Result<Array2<f64>> {
    if !(incident_photons > 0.0) {
        return Err(Error::Config(format!("incident photons must be positive, got {incident_photons}")));
    }
    let sino = forward_project(x, geom)?;
    let mean = sino.values.mapv(|v| incident_photons * (-v).exp());
    if mean.iter().any(|m| !m.is_finite() || *m > MAX_MEAN_COUNT) {
        return Err(Error::Contract("line integrals too negative: expected counts overflow".into()));
    }
    Ok(mean)
}

/// Poisson counts `N_noisy ~ Poisson(N₀·exp(−A(x)))`, row-major draw order.
pub fn simulate_counts(x: &ImageGrid, geom: &AcquisitionGeometry, noise: &NoiseModel) -> Result<Array2<f64>> {
    if x.values().iter().any(|v| *v < 0.0) {
        log::warn!("simulating counts for an image with negative attenuation values");
    }
    let mean = expected_counts(x, geom, noise.incident_photons)?;
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    Ok(mean.mapv(|m| {
        if m <= 0.0 {
            0.0
        } else {
            Poisson::new(m).expect("positive finite mean").sample(&mut rng)
        }
    }))
}

/// `y = −ln(max(counts, 0.5)/N₀)`.
pub fn linearize(counts: &Array2<f64>, incident_photons: f64, geom: &AcquisitionGeometry) -> Result<Sinogram> {
    if counts.iter().any(|c| *c < 0.0 || !c.is_finite()) {
        return Err(Error::Contract("counts must be finite and non-negative".into()));
    }
    Sinogram::new(counts.mapv(|c| -(c.max(ZERO_COUNT_CLAMP) / incident_photons).ln()), geom)
}

/// `wᵢ = exp(−yᵢ)`.
pub fn likelihood_weights(y: &Sinogram) -> Array2<f64> {
    y.values.mapv(|v| (-v).exp())
}

/// Weighted least-squares data term `Σ wᵢ (A(x)ᵢ − yᵢ)²` with weights fixed from `y`.
#[derive(Debug, Clone)]
pub struct WeightedLeastSquares {
    pub y: Array2<f64>,
    pub weights: Array2<f64>,
}

impl WeightedLeastSquares {
    pub fn new(y: &Sinogram) -> Self {
        Self { y: y.values.clone(), weights: likelihood_weights(y) }
    }

    pub fn max_weight(&self) -> f64 {
        self.weights.iter().fold(0.0, |m: f64, w| m.max(*w))
    }

    /// Loss for precomputed projections `A(x)`.
    pub fn loss_from_projection(&self, ax: &Array2<f64>) -> f64 {
        Zip::from(ax).and(&self.y).and(&self.weights).fold(0.0, |acc, a, y, w| acc + w * (a - y) * (a - y))
    }

    /// `2 w ⊙ (A(x) − y)`, to be back-projected for the gradient.
    pub fn residual_weighted(&self, ax: &Array2<f64>) -> Array2<f64> {
        let mut r = ax - &self.y;
        Zip::from(&mut r).and(&self.weights).for_each(|r, w| *r *= 2.0 * w);
        r
    }
}

/// `L(x) = Σ wᵢ(A(x)ᵢ − yᵢ)²` with `w = exp(−y)`, and `∇L = 2Aᵀ(w ⊙ (A(x) − y))`.
pub fn data_loss_and_gradient(x: &ImageGrid, y: &Sinogram, geom: &AcquisitionGeometry) -> Result<(f64, ImageGrid)> {
    geom.check_image(x)?;
    y.check(geom)?;
    let wls = WeightedLeastSquares::new(y);
    let ax = project_raw(x.values(), geom);
    let loss = wls.loss_from_projection(&ax);
    let grad = back_project_raw(&wls.residual_weighted(&ax), geom);
    Ok((loss, x.with_values(grad)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn geom(n: usize, angles: usize, bins: usize) -> AcquisitionGeometry {
        AcquisitionGeometry::parallel(angles, bins, 1.0, (n, n), 1.0).unwrap()
    }

    fn disk(n: usize, radius: f64, value: f64, spacing: f64) -> ImageGrid {
        let c = 0.5 * (n as f64 - 1.0);
        let v = Array2::from_shape_fn((n, n), |(i, j)| {
            let (x, y) = ((j as f64 - c) * spacing, (c - i as f64) * spacing);
            if x * x + y * y <= radius * radius {
                value
            } else {
                0.0
            }
        });
        ImageGrid::new(v, spacing).unwrap()
    }

    fn random_image(n: usize, seed: u64) -> ImageGrid {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        ImageGrid::new(Array2::from_shape_simple_fn((n, n), || r.random_range(-1.0..1.0)), 1.0).unwrap()
    }

    #[test]
    fn zero_in_zero_out() {
        let g = geom(16, 12, 24);
        let zero = ImageGrid::zeros(16, 16, 1.0);
        assert!(forward_project(&zero, &g).unwrap().values().iter().all(|v| *v == 0.0));
        let zs = Sinogram::zeros(&g);
        assert!(back_project(&zs, &g).unwrap().values().iter().all(|v| *v == 0.0));
        assert!(fbp(&zs, &g, Window::Hanning, 0.75).unwrap().values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn central_chord_of_disk() {
        let n = 256;
        let spacing = 0.25;
        let r = 25.0;
        let g = AcquisitionGeometry::parallel(8, 257, 0.25, (n, n), spacing).unwrap();
        let s = forward_project(&disk(n, r, 0.02, spacing), &g).unwrap();
        for a in 0..8 {
            let central = s.values()[[a, 128]];
            assert!((central - 2.0 * r * 0.02).abs() / (2.0 * r * 0.02) < 0.01, "angle {a}: {central}");
        }
    }

    #[test]
    fn adjoint_identity_parallel_and_fan() {
        let fan = AcquisitionGeometry::fan(30, 40, 1.5, 40.0, 30.0, (20, 20), 1.0).unwrap();
        for g in [geom(20, 17, 31), fan] {
            for seed in 0..3 {
                let x = random_image(20, seed);
                let mut r = ChaCha8Rng::seed_from_u64(100 + seed);
                let y = Sinogram::new(
                    Array2::from_shape_simple_fn(g.sinogram_shape(), || r.random_range(-1.0..1.0)),
                    &g,
                )
                .unwrap();
                let lhs = forward_project(&x, &g).unwrap().dot(&y);
                let rhs = x.dot(&back_project(&y, &g).unwrap());
                assert!((lhs - rhs).abs() / lhs.abs().max(rhs.abs()) < 1e-10);
            }
        }
    }

    #[test]
    fn single_angle_streak() {
        let g = geom(16, 4, 24);
        let mut v = Array2::zeros(g.sinogram_shape());
        v[[0, 12]] = 1.0;
        // angle 0: rays run vertically, so the streak is one or two columns, constant down each
        let img = back_project(&Sinogram::new(v, &g).unwrap(), &g).unwrap();
        let cols: Vec<usize> = (0..16).filter(|&j| img.values()[[0, j]] != 0.0).collect();
        assert!(!cols.is_empty() && cols.len() <= 2);
        for &j in &cols {
            let first = img.values()[[0, j]];
            assert!(img.values().column(j).iter().all(|v| (*v - first).abs() < 1e-14));
        }
    }

    #[test]
    fn fbp_is_linear_and_validates_cutoff() {
        let g = geom(24, 20, 36);
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let s1 = Sinogram::new(Array2::from_shape_simple_fn(g.sinogram_shape(), || r.random_range(-1.0..1.0)), &g).unwrap();
        let s2 = Sinogram::new(Array2::from_shape_simple_fn(g.sinogram_shape(), || r.random_range(-1.0..1.0)), &g).unwrap();
        let combo = Sinogram::new(s1.values() * 2.0 - s2.values() * 0.5, &g).unwrap();
        let lhs = fbp(&combo, &g, Window::Hanning, 0.75).unwrap();
        let rhs = fbp(&s1, &g, Window::Hanning, 0.75).unwrap().values() * 2.0
            - fbp(&s2, &g, Window::Hanning, 0.75).unwrap().values() * 0.5;
        for (a, b) in lhs.values().iter().zip(rhs.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!(fbp(&s1, &g, Window::Ramp, 0.0).is_err());
        assert!(fbp(&s1, &g, Window::Ramp, 1.5).is_err());
    }

    #[test]
    fn fbp_recovers_disk_value() {
        let n = 96;
        let g = AcquisitionGeometry::parallel(180, 140, 1.0, (n, n), 1.0).unwrap();
        let x = disk(n, 30.0, 0.02, 1.0);
        let rec = fbp(&forward_project(&x, &g).unwrap(), &g, Window::Ramp, 1.0).unwrap();
        // mean over the inner 15 px, away from the edge ringing
        let (mut sum, mut cnt) = (0.0, 0);
        for ((i, j), v) in rec.values().indexed_iter() {
            let (dx, dy) = (j as f64 - 47.5, i as f64 - 47.5);
            if dx * dx + dy * dy < 225.0 {
                sum += v;
                cnt += 1;
            }
        }
        let mean = sum / cnt as f64;
        assert!((mean - 0.02).abs() < 0.02 * 0.01, "{mean}");
    }

    #[test]
    fn counts_and_linearization() {
        let g = geom(8, 10, 12);
        let zero = ImageGrid::zeros(8, 8, 1.0);
        let noise = NoiseModel { incident_photons: 50_000.0, seed: 3 };
        let counts = simulate_counts(&zero, &g, &noise).unwrap();
        let n = counts.len() as f64;
        let mean = counts.sum() / n;
        assert!((mean - 50_000.0).abs() < 3.0 * 50_000f64.sqrt() / n.sqrt());

        let n0 = 1000.0;
        let full = Array2::from_elem(g.sinogram_shape(), n0);
        assert!(linearize(&full, n0, &g).unwrap().values().iter().all(|v| v.abs() < 1e-15));
        let e1 = Array2::from_elem(g.sinogram_shape(), n0 * (-1.0f64).exp());
        assert!(linearize(&e1, n0, &g).unwrap().values().iter().all(|v| (v - 1.0).abs() < 1e-12));
        let zeros = Array2::zeros(g.sinogram_shape());
        assert!(linearize(&zeros, n0, &g).unwrap().values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn noise_free_pipeline_is_identity() {
        let g = geom(16, 10, 24);
        let x = disk(16, 5.0, 0.02, 1.0);
        let mean = expected_counts(&x, &g, 50_000.0).unwrap();
        let y = linearize(&mean, 50_000.0, &g).unwrap();
        let ax = forward_project(&x, &g).unwrap();
        for (a, b) in y.values().iter().zip(ax.values().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_overflowing_counts() {
        let g = geom(8, 4, 12);
        let x = ImageGrid::new(Array2::from_elem((8, 8), -10.0), 1.0).unwrap();
        assert!(simulate_counts(&x, &g, &NoiseModel::default()).is_err());
    }

    #[test]
    fn poisson_variance_matches_mean() {
        // one ray bucket, 10⁴ draws over seeds; χ² dispersion statistic at the 1% level
        let g = AcquisitionGeometry::parallel(1, 1, 1.0, (4, 4), 1.0).unwrap();
        let x = ImageGrid::new(Array2::from_elem((4, 4), 0.1), 1.0).unwrap();
        let draws: Vec<f64> = (0..10_000)
            .map(|seed| simulate_counts(&x, &g, &NoiseModel { incident_photons: 200.0, seed }).unwrap()[[0, 0]])
            .collect();
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let var = draws.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0);
        let chi2 = (n - 1.0) * var / mean;
        let z = (chi2 - (n - 1.0)) / (2.0 * (n - 1.0)).sqrt();
        assert!(z.abs() < 2.576, "dispersion z = {z}");
    }

    #[test]
    fn weights_and_loss() {
        let g = geom(8, 6, 12);
        let zero = Sinogram::zeros(&g);
        assert!(likelihood_weights(&zero).iter().all(|w| *w == 1.0));
        let ln2 = Sinogram::new(Array2::from_elem(g.sinogram_shape(), 2f64.ln()), &g).unwrap();
        assert!(likelihood_weights(&ln2).iter().all(|w| (w - 0.5).abs() < 1e-15));

        let x = random_image(8, 1);
        let y = forward_project(&x, &g).unwrap();
        let (loss, grad) = data_loss_and_gradient(&x, &y, &g).unwrap();
        assert!(loss.abs() < 1e-20);
        assert!(grad.values().iter().all(|v| v.abs() < 1e-12));

        let mut wls = WeightedLeastSquares::new(&Sinogram::zeros(&g));
        let ax = forward_project(&x, &g).unwrap().into_values();
        let l1 = wls.loss_from_projection(&ax);
        wls.weights.mapv_inplace(|w| 2.0 * w);
        assert!((wls.loss_from_projection(&ax) - 2.0 * l1).abs() < 1e-12 * l1);
    }

    #[test]
    fn data_gradient_matches_finite_differences() {
        let g = geom(8, 9, 14);
        let x = random_image(8, 5);
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let y = Sinogram::new(Array2::from_shape_simple_fn(g.sinogram_shape(), || r.random_range(0.0..2.0)), &g).unwrap();
        let (_, grad) = data_loss_and_gradient(&x, &y, &g).unwrap();
        let h = 1e-5;
        let scale = grad.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for idx in ndarray::indices((8, 8)) {
            let mut p = x.clone();
            p.values_mut()[idx] += h;
            let mut m = x.clone();
            m.values_mut()[idx] -= h;
            let fd = (data_loss_and_gradient(&p, &y, &g).unwrap().0 - data_loss_and_gradient(&m, &y, &g).unwrap().0) / (2.0 * h);
            assert!((fd - grad.values()[idx]).abs() / scale < 1e-4);
        }
    }

    #[test]
    fn hounsfield_rescale_round_trip() {
        for hu in [-1000.0, -123.4, 0.0, 40.0, 1500.0] {
            assert!((attenuation_to_hu(hu_to_attenuation(hu)) - hu).abs() < 1e-12);
        }
        assert!((hu_to_attenuation(1000.0) - MU_WATER).abs() < 1e-15);
    }

    #[test]
    fn geometry_validation() {
        assert!(AcquisitionGeometry::parallel(0, 10, 1.0, (8, 8), 1.0).is_err());
        assert!(AcquisitionGeometry::parallel(10, 10, -1.0, (8, 8), 1.0).is_err());
        assert!(AcquisitionGeometry::fan(10, 10, 1.0, 3.0, 30.0, (8, 8), 1.0).is_err());
        let g = geom(8, 4, 12);
        assert!(forward_project(&ImageGrid::zeros(9, 8, 1.0), &g).is_err());
    }
}
