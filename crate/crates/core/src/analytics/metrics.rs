use ndarray::{s, Array2, Zip};

use crate::error::{Error, Result};
use crate::operators::ImageGrid;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    /// dB; `+∞` for identical images.
    pub psnr: f64,
    pub ssim: f64,
}

fn same_shape(a: &ImageGrid, b: &ImageGrid) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("images {:?} and {:?} differ in shape", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn mse(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    same_shape(a, b)?;
    let sum = Zip::from(a.values()).and(b.values()).fold(0.0, |acc, x, y| acc + (x - y) * (x - y));
    Ok(sum / a.values().len() as f64)
}

/// `10·log10(range² / MSE)`; identical images give `f64::INFINITY`.
pub fn psnr(a: &ImageGrid, b: &ImageGrid, data_range: f64) -> Result<f64> {
    if !(data_range > 0.0) {
        return Err(Error::Config(format!("data range must be positive, got {data_range}")));
    }
    let err = mse(a, b)?;
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / err).log10())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub window_side: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self { window_side: 11, sigma: 1.5, k1: 0.01, k2: 0.03 }
    }
}

fn gaussian_window(side: usize, sigma: f64) -> Vec<f64> {
    let c = 0.5 * (side as f64 - 1.0);
    let w: Vec<f64> = (0..side).map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Separable weighted average over every fully contained window.
fn filter_valid(x: &Array2<f64>, w: &[f64]) -> Array2<f64> {
    let (h, wd) = x.dim();
    let k = w.len();
    let mut rows = Array2::zeros((h - k + 1, wd));
    for i in 0..h - k + 1 {
        for (t, wt) in w.iter().enumerate() {
            rows.row_mut(i).scaled_add(*wt, &x.row(i + t));
        }
    }
    let mut out = Array2::zeros((h - k + 1, wd - k + 1));
    for j in 0..wd - k + 1 {
        for (t, wt) in w.iter().enumerate() {
            out.column_mut(j).scaled_add(*wt, &rows.column(j + t));
        }
    }
    out
}

/// Mean SSIM over all valid Gaussian windows.
pub fn ssim(a: &ImageGrid, b: &ImageGrid, params: &SsimParams, data_range: f64) -> Result<f64> {
    same_shape(a, b)?;
    let (h, w) = a.shape();
    let k = params.window_side;
    if k == 0 || h < k || w < k {
        return Err(Error::Shape(format!("image {h}x{w} is smaller than the {k}x{k} SSIM window")));
    }
    if !(data_range > 0.0) {
        return Err(Error::Config(format!("data range must be positive, got {data_range}")));
    }
    let win = gaussian_window(k, params.sigma);
    let (x, y) = (a.values(), b.values());
    let mu_x = filter_valid(x, &win);
    let mu_y = filter_valid(y, &win);
    let xx = filter_valid(&(x * x), &win);
    let yy = filter_valid(&(y * y), &win);
    let xy = filter_valid(&(x * y), &win);
    let c1 = (params.k1 * data_range).powi(2);
    let c2 = (params.k2 * data_range).powi(2);
    let mut total = 0.0;
    Zip::from(&mu_x).and(&mu_y).and(&xx).and(&yy).and(&xy).for_each(|mx, my, sxx, syy, sxy| {
        let vx = sxx - mx * mx;
        let vy = syy - my * my;
        let cov = sxy - mx * my;
        total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    });
    Ok(total / mu_x.len() as f64)
}

/// PSNR and SSIM against a ground truth, with `data_range = max − min` of the truth.
pub fn evaluate(recon: &ImageGrid, truth: &ImageGrid) -> Result<MetricReport> {
    let (lo, hi) = truth
        .values()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    let range = if hi > lo { hi - lo } else { 1.0 };
    Ok(MetricReport {
        psnr: psnr(recon, truth, range)?,
        ssim: ssim(recon, truth, &SsimParams::default(), range)?,
    })
}

/// Crops an image to its central `rows × cols` region.
pub fn center_crop(x: &ImageGrid, rows: usize, cols: usize) -> Result<ImageGrid> {
    let (h, w) = x.shape();
    if rows > h || cols > w {
        return Err(Error::Shape("center crop larger than image".into()));
    }
    let (r0, c0) = ((h - rows) / 2, (w - cols) / 2);
    Ok(x.with_values(x.values().slice(s![r0..r0 + rows, c0..c0 + cols]).to_owned()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(h: usize, w: usize, seed: u64) -> ImageGrid {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        ImageGrid::new(Array2::from_shape_simple_fn((h, w), || r.random_range(0.0..1.0)), 1.0).unwrap()
    }

    #[test]
    fn psnr_cases() {
        let a = random(16, 16, 1);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b = a.with_values(a.values() + 0.1);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-10);

        let c = random(16, 16, 2);
        let m: f64 = a.values().iter().zip(c.values()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 256.0;
        assert!((psnr(&a, &c, 2.0).unwrap() - 10.0 * (4.0 / m).log10()).abs() < 1e-10);
        assert_eq!(psnr(&a, &c, 1.0).unwrap(), psnr(&c, &a, 1.0).unwrap());
    }

    #[test]
    fn ssim_cases() {
        let p = SsimParams::default();
        let a = random(24, 20, 3);
        assert!((ssim(&a, &a, &p, 1.0).unwrap() - 1.0).abs() < 1e-12);

        let centred = a.with_values(Array2::from_shape_fn((24, 20), |(i, j)| if (i + j) % 2 == 0 { 0.3 } else { -0.3 }));
        let neg = centred.with_values(-centred.values());
        assert!(ssim(&centred, &neg, &p, 1.0).unwrap() < 0.0);

        let b = random(24, 20, 4);
        assert!((ssim(&a, &b, &p, 1.0).unwrap() - ssim(&b, &a, &p, 1.0).unwrap()).abs() < 1e-15);
        assert!(ssim(&random(8, 8, 1), &random(8, 8, 2), &p, 1.0).is_err());
    }

    #[test]
    fn ssim_single_window_direct_formula() {
        let a = random(11, 11, 5);
        let b = random(11, 11, 6);
        let w1 = gaussian_window(11, 1.5);
        let (mut mx, mut my) = (0.0, 0.0);
        for i in 0..11 {
            for j in 0..11 {
                let wt = w1[i] * w1[j];
                mx += wt * a.values()[[i, j]];
                my += wt * b.values()[[i, j]];
            }
        }
        let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
        for i in 0..11 {
            for j in 0..11 {
                let wt = w1[i] * w1[j];
                let (dx, dy) = (a.values()[[i, j]] - mx, b.values()[[i, j]] - my);
                vx += wt * dx * dx;
                vy += wt * dy * dy;
                cxy += wt * dx * dy;
            }
        }
        let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
        let direct = (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        let got = ssim(&a, &b, &SsimParams::default(), 1.0).unwrap();
        assert!((got - direct).abs() < 1e-10);
    }

    #[test]
    fn evaluate_identical() {
        let a = random(16, 16, 7);
        let r = evaluate(&a, &a).unwrap();
        assert_eq!(r.psnr, f64::INFINITY);
        assert!((r.ssim - 1.0).abs() < 1e-12);
    }
}
