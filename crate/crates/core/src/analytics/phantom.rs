use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::operators::{Dictionary, ImageGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Contrast {
    /// Original intensities, values in `[0, 2]`.
    Standard,
    /// Toft's higher-contrast variant, values in `[0, 1]`.
    Modified,
}

impl std::str::FromStr for Contrast {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "standard" => Ok(Contrast::Standard),
            "modified" => Ok(Contrast::Modified),
            other => Err(Error::Config(format!("unknown phantom contrast '{other}'"))),
        }
    }
}

/// Additive ellipse in normalized `[-1, 1]²` coordinates, y pointing up.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub value: f64,
    pub semi_x: f64,
    pub semi_y: f64,
    pub center_x: f64,
    pub center_y: f64,
    /// Counter-clockwise tilt in degrees.
    pub tilt_deg: f64,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.tilt_deg.to_radians().sin_cos();
        let (dx, dy) = (x - self.center_x, y - self.center_y);
        let u = dx * c + dy * s;
        let v = dy * c - dx * s;
        (u / self.semi_x).powi(2) + (v / self.semi_y).powi(2) <= 1.0
    }

    /// Reflection about the vertical axis.
    pub fn mirrored(&self) -> Ellipse {
        Ellipse { center_x: -self.center_x, tilt_deg: -self.tilt_deg, ..*self }
    }
}

const GEOMETRY: [[f64; 5]; 10] = [
    [0.69, 0.92, 0.0, 0.0, 0.0],
    [0.6624, 0.874, 0.0, -0.0184, 0.0],
    [0.11, 0.31, 0.22, 0.0, -18.0],
    [0.16, 0.41, -0.22, 0.0, 18.0],
    [0.21, 0.25, 0.0, 0.35, 0.0],
    [0.046, 0.046, 0.0, 0.1, 0.0],
    [0.046, 0.046, 0.0, -0.1, 0.0],
    [0.046, 0.023, -0.08, -0.605, 0.0],
    [0.023, 0.023, 0.0, -0.606, 0.0],
    [0.023, 0.046, 0.06, -0.605, 0.0],
];

const STANDARD_VALUES: [f64; 10] = [2.0, -0.98, -0.02, -0.02, 0.01, 0.01, 0.01, 0.01, 0.01, 0.01];
const MODIFIED_VALUES: [f64; 10] = [1.0, -0.8, -0.2, -0.2, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1];

pub fn shepp_logan_ellipses(contrast: Contrast) -> Vec<Ellipse> {
    let values = match contrast {
        Contrast::Standard => STANDARD_VALUES,
        Contrast::Modified => MODIFIED_VALUES,
    };
    GEOMETRY
        .iter()
        .zip(values)
        .map(|(g, value)| Ellipse {
            value,
            semi_x: g[0],
            semi_y: g[1],
            center_x: g[2],
            center_y: g[3],
            tilt_deg: g[4],
        })
        .collect()
}

/// Normalized coordinates of the centre of pixel `(i, j)` on an `n × n` grid.
pub fn pixel_coordinates(n: usize, i: usize, j: usize) -> (f64, f64) {
    let h = 2.0 / n as f64;
    let c = 0.5 * (n as f64 - 1.0);
    ((j as f64 - c) * h, (c - i as f64) * h)
}

/// Area-averaged rendering: each pixel is the mean over a regular
/// `supersample × supersample` grid of sub-pixel samples.
pub fn render_ellipses(n: usize, ellipses: &[Ellipse], supersample: usize) -> Array2<f64> {
    let q = supersample.max(1);
    let h = 2.0 / n as f64;
    let offsets: Vec<f64> = (0..q).map(|t| ((t as f64 + 0.5) / q as f64 - 0.5) * h).collect();
    let norm = 1.0 / (q * q) as f64;
    Array2::from_shape_fn((n, n), |(i, j)| {
        let (x, y) = pixel_coordinates(n, i, j);
        let mut acc = 0.0;
        for dy in &offsets {
            for dx in &offsets {
                acc += ellipses.iter().filter(|e| e.contains(x + dx, y + dy)).map(|e| e.value).sum::<f64>();
            }
        }
        acc * norm
    })
}

/// Sub-pixel samples per axis used by the phantom generators.
pub const PHANTOM_SUPERSAMPLE: usize = 4;

/// Classical 10-ellipse head phantom with unit pixel spacing and area-averaged pixels.
pub fn shepp_logan(n: usize, contrast: Contrast) -> Result<ImageGrid> {
    if n < 32 {
        return Err(Error::Config(format!("phantom side must be at least 32, got {n}")));
    }
    ImageGrid::new(render_ellipses(n, &shepp_logan_ellipses(contrast), PHANTOM_SUPERSAMPLE), 1.0)
}

/// Head-like phantom: a skull ring around a random cluster of soft-tissue
/// features, clamped to `[0, 1]`.
pub fn random_ellipse_phantom<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<ImageGrid> {
    if n < 32 {
        return Err(Error::Config(format!("phantom side must be at least 32, got {n}")));
    }
    let sx = rng.random_range(0.6..0.75);
    let sy = rng.random_range(0.78..0.92);
    let tilt = rng.random_range(-10.0..10.0);
    let ring = rng.random_range(0.03..0.06);
    let mut ellipses = vec![
        Ellipse { value: 1.0, semi_x: sx, semi_y: sy, center_x: 0.0, center_y: 0.0, tilt_deg: tilt },
        Ellipse {
            value: -rng.random_range(0.75..0.85),
            semi_x: sx - ring,
            semi_y: sy - ring,
            center_x: 0.0,
            center_y: 0.0,
            tilt_deg: tilt,
        },
    ];
    let features = rng.random_range(4..=10);
    for _ in 0..features {
        let r = rng.random_range(0.0..0.75f64).sqrt();
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        let magnitude = rng.random_range(0.05..0.3);
        ellipses.push(Ellipse {
            value: if rng.random_bool(0.5) { magnitude } else { -magnitude },
            semi_x: rng.random_range(0.02..0.25),
            semi_y: rng.random_range(0.02..0.25),
            center_x: r * phi.cos() * (sx - 0.1),
            center_y: r * phi.sin() * (sy - 0.1),
            tilt_deg: rng.random_range(-90.0..90.0),
        });
    }
    let values = render_ellipses(n, &ellipses, PHANTOM_SUPERSAMPLE).mapv(|v| v.clamp(0.0, 1.0));
    ImageGrid::new(values, 1.0)
}

/// Images built from `generators` placed on the `k`-lattice: each tile holds
/// one randomly chosen generator with probability `density`, scaled by a
/// random sign and a magnitude in `[0.5, 1.5)`.
pub fn planted_atom_images<R: Rng + ?Sized>(
    generators: &Dictionary,
    count: usize,
    side: usize,
    density: f64,
    rng: &mut R,
) -> Result<Vec<ImageGrid>> {
    let k = generators.atom_side();
    if side == 0 || side % k != 0 {
        return Err(Error::Config(format!("image side {side} must be a positive multiple of {k}")));
    }
    if !(0.0..=1.0).contains(&density) {
        return Err(Error::Config(format!("density must lie in [0, 1], got {density}")));
    }
    let tiles = side / k;
    (0..count)
        .map(|_| {
            let mut v = Array2::zeros((side, side));
            for ty in 0..tiles {
                for tx in 0..tiles {
                    if !rng.random_bool(density) {
                        continue;
                    }
                    let g = rng.random_range(0..generators.atom_count());
                    let amp = rng.random_range(0.5..1.5) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    v.slice_mut(ndarray::s![ty * k..(ty + 1) * k, tx * k..(tx + 1) * k])
                        .scaled_add(amp, &generators.atom(g));
                }
            }
            ImageGrid::new(v, 1.0)
        })
        .collect()
}
