//! Flat `key = value` configuration files.
//!
//! One setting per line; `#` starts a comment and blank lines are skipped.
//! Values are parsed on demand, so a typo in a key is only caught by
//! [`ConfigFile::check_known`].

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::learn::TrainConfig;
use crate::recon::{HuberConfig, ReconConfig};
use crate::tomo::{AcquisitionGeometry, GeometryKind};

#[derive(Debug, Clone)]
struct Entry {
    value: String,
    /// Source line, 0 for values set programmatically.
    line: usize,
}

#[derive(Debug, Clone, Default)]
pub struct ConfigFile {
    entries: BTreeMap<String, Entry>,
}

impl FromStr for ConfigFile {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1)));
            };
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", i + 1)));
            }
            let entry = Entry { value: value.trim().to_string(), line: i + 1 };
            if let Some(prev) = entries.insert(key.to_string(), entry) {
                return Err(Error::Config(format!("line {}: `{key}` already set on line {}", i + 1, prev.line)));
            }
        }
        Ok(Self { entries })
    }
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        std::fs::read_to_string(path)?.parse()
    }

    /// Sets or replaces a value, as a command-line flag does.
    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), Entry { value: value.to_string(), line: 0 });
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|e| e.value.as_str())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some(e) => e.value.parse().map(Some).map_err(|err| {
                let place = if e.line > 0 { format!("line {}: ", e.line) } else { String::new() };
                Error::Config(format!("{place}invalid value `{}` for `{key}`: {err}", e.value))
            }),
        }
    }

    /// Overwrites `*slot` when `key` is present.
    pub fn update<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.get(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Rejects keys outside `allowed`.
    pub fn check_known(&self, allowed: &[&str]) -> Result<()> {
        match self.keys().find(|k| !allowed.contains(k)) {
            Some(k) => Err(Error::Config(format!("unknown configuration key `{k}`"))),
            None => Ok(()),
        }
    }

    /// Canonical `key = value` text, sorted by key.
    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, e)| format!("{k} = {}\n", e.value)).collect()
    }
}

pub const TRAIN_KEYS: &[&str] = &[
    "atom_count",
    "atom_side",
    "target_sparsity",
    "adjust_constant",
    "crop_size",
    "crop_stride",
    "steps",
    "learning_rate",
    "beta1",
    "beta2",
    "epsilon",
    "validation_interval",
    "fista_iters",
    "lambda_init",
    "seed",
    "lowpass_cutoff",
];

pub const RECON_KEYS: &[&str] =
    &["lambda1", "lambda2", "iters", "lowpass_cutoff", "seed", "power_iters", "lipschitz_safety"];

pub const HUBER_KEYS: &[&str] = &["huber_lambda", "huber_gamma", "huber_iters", "seed"];

pub const GEOMETRY_KEYS: &[&str] = &[
    "geometry",
    "angles",
    "bins",
    "detector_spacing",
    "image_size",
    "pixel_spacing",
    "source_radius",
    "detector_radius",
];

fn optional(cfg: &ConfigFile, key: &str, slot: &mut Option<f64>) -> Result<()> {
    match cfg.raw(key) {
        Some("auto") => *slot = None,
        Some(_) => *slot = cfg.get(key)?,
        None => {}
    }
    Ok(())
}

/// Training settings over [`TrainConfig::default`]; `auto` clears optional values.
pub fn train_config(cfg: &ConfigFile) -> Result<TrainConfig> {
    let mut t = TrainConfig::default();
    cfg.update("atom_count", &mut t.atom_count)?;
    cfg.update("atom_side", &mut t.atom_side)?;
    cfg.update("target_sparsity", &mut t.target_sparsity)?;
    optional(cfg, "adjust_constant", &mut t.adjust_constant)?;
    cfg.update("crop_size", &mut t.crop_size)?;
    cfg.update("crop_stride", &mut t.crop_stride)?;
    cfg.update("steps", &mut t.steps)?;
    cfg.update("learning_rate", &mut t.adam.learning_rate)?;
    cfg.update("beta1", &mut t.adam.beta1)?;
    cfg.update("beta2", &mut t.adam.beta2)?;
    cfg.update("epsilon", &mut t.adam.epsilon)?;
    cfg.update("validation_interval", &mut t.validation_interval)?;
    cfg.update("fista_iters", &mut t.fista_iters)?;
    optional(cfg, "lambda_init", &mut t.lambda_init)?;
    cfg.update("seed", &mut t.seed)?;
    t.validate()?;
    Ok(t)
}

pub fn recon_config(cfg: &ConfigFile) -> Result<ReconConfig> {
    let mut r = ReconConfig::default();
    cfg.update("lambda1", &mut r.lambda1)?;
    cfg.update("lambda2", &mut r.lambda2)?;
    cfg.update("iters", &mut r.iters)?;
    cfg.update("lowpass_cutoff", &mut r.lowpass_cutoff)?;
    cfg.update("seed", &mut r.seed)?;
    cfg.update("power_iters", &mut r.power_iters)?;
    cfg.update("lipschitz_safety", &mut r.lipschitz_safety)?;
    r.validate()?;
    Ok(r)
}

pub fn huber_config(cfg: &ConfigFile) -> Result<HuberConfig> {
    let mut h = HuberConfig::default();
    cfg.update("huber_lambda", &mut h.lambda)?;
    cfg.update("huber_gamma", &mut h.gamma)?;
    cfg.update("huber_iters", &mut h.iters)?;
    cfg.update("seed", &mut h.seed)?;
    h.validate()?;
    Ok(h)
}

/// Scanner geometry; defaults to 180 parallel views × 192 bins of 2 mm over a
/// 128² grid of 2 mm pixels.
pub fn geometry_config(cfg: &ConfigFile) -> Result<AcquisitionGeometry> {
    let mut angles = 180usize;
    let mut bins = 192usize;
    let mut du = 2.0f64;
    let mut size = 128usize;
    let mut spacing = 2.0f64;
    cfg.update("angles", &mut angles)?;
    cfg.update("bins", &mut bins)?;
    cfg.update("detector_spacing", &mut du)?;
    cfg.update("image_size", &mut size)?;
    cfg.update("pixel_spacing", &mut spacing)?;
    match cfg.raw("geometry").unwrap_or("parallel") {
        "parallel" => AcquisitionGeometry::parallel(angles, bins, du, (size, size), spacing),
        "fan" => {
            let mut source = 4.0 * size as f64 * spacing;
            let mut detector = 2.0 * size as f64 * spacing;
            cfg.update("source_radius", &mut source)?;
            cfg.update("detector_radius", &mut detector)?;
            AcquisitionGeometry::fan(angles, bins, du, source, detector, (size, size), spacing)
        }
        other => Err(Error::Config(format!("unknown geometry `{other}`"))),
    }
}

/// Writes a geometry back as configuration entries.
pub fn geometry_entries(geom: &AcquisitionGeometry, cfg: &mut ConfigFile) {
    match geom.kind {
        GeometryKind::Parallel => cfg.set("geometry", "parallel"),
        GeometryKind::Fan { source_radius, detector_radius } => {
            cfg.set("geometry", "fan");
            cfg.set("source_radius", source_radius);
            cfg.set("detector_radius", detector_radius);
        }
    }
    cfg.set("angles", geom.num_angles);
    cfg.set("bins", geom.num_bins);
    cfg.set("detector_spacing", geom.detector_spacing);
    cfg.set("image_size", geom.image_rows);
    cfg.set("pixel_spacing", geom.pixel_spacing);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_whitespace() {
        let cfg: ConfigFile = "# header\n\n steps = 10 # inline\nlambda_init=auto\ntarget_sparsity = 2.5\n".parse().unwrap();
        assert_eq!(cfg.get::<usize>("steps").unwrap(), Some(10));
        let t = train_config(&cfg).unwrap();
        assert_eq!(t.steps, 10);
        assert_eq!(t.lambda_init, None);
        assert_eq!(t.target_sparsity, 2.5);
        assert_eq!(t.atom_count, TrainConfig::default().atom_count);
    }

    #[test]
    fn rejects_malformed() {
        assert!("no equals sign".parse::<ConfigFile>().is_err());
        assert!("= 3".parse::<ConfigFile>().is_err());
        assert!("a = 1\na = 2".parse::<ConfigFile>().is_err());
        let cfg: ConfigFile = "steps = ten".parse().unwrap();
        let err = train_config(&cfg).unwrap_err().to_string();
        assert!(err.contains("line 1") && err.contains("steps"), "{err}");
        let cfg: ConfigFile = "stpes = 3".parse().unwrap();
        assert!(cfg.check_known(TRAIN_KEYS).is_err());
        assert!(recon_config(&"iters = 0".parse().unwrap()).is_err());
    }

    #[test]
    fn flags_override_file() {
        let mut cfg: ConfigFile = "lambda1 = 10\nhuber_gamma = 0.01".parse().unwrap();
        cfg.set("lambda1", 25);
        let r = recon_config(&cfg).unwrap();
        assert_eq!(r.lambda1, 25.0);
        assert_eq!(r.lambda2, ReconConfig::default().lambda2);
        assert_eq!(huber_config(&cfg).unwrap().gamma, 0.01);
    }

    #[test]
    fn geometry_round_trip() {
        let g = geometry_config(&ConfigFile::default()).unwrap();
        assert_eq!((g.num_angles, g.num_bins, g.image_rows), (180, 192, 128));
        let fan = geometry_config(&"geometry = fan\nimage_size = 32\nangles = 90".parse().unwrap()).unwrap();
        let mut cfg = ConfigFile::default();
        geometry_entries(&fan, &mut cfg);
        assert_eq!(geometry_config(&cfg).unwrap(), fan);
        assert!(cfg.check_known(GEOMETRY_KEYS).is_ok());
        assert!(geometry_config(&"geometry = cone".parse().unwrap()).is_err());
        let text = cfg.to_text();
        assert_eq!(text.parse::<ConfigFile>().unwrap().to_text(), text);
    }
}
