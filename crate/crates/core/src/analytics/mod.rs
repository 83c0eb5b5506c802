//! Image quality metrics, phantoms, atom significance and file formats.

pub mod io;
pub mod metrics;
pub mod phantom;
pub mod significance;

pub use io::{read_dictionary, read_grid, write_dictionary, write_grid, write_pgm16};
pub use metrics::{evaluate, psnr, ssim, MetricReport, SsimParams};
pub use phantom::{planted_atom_images, random_ellipse_phantom, render_ellipses, shepp_logan, shepp_logan_ellipses, Contrast, Ellipse};
pub use significance::{atom_montage, atom_significance, AtomScore};
