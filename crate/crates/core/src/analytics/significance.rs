use ndarray::{s, Array2};

use crate::error::{Error, Result};
use crate::operators::{CoefficientMaps, Dictionary};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AtomScore {
    pub index: usize,
    /// Total absolute coefficient mass of the channel.
    pub score: f64,
}

/// Ranks atoms by summed `|z|` over every supplied map, descending, ties by index.
pub fn atom_significance(dict: &Dictionary, coefficient_sets: &[CoefficientMaps]) -> Result<Vec<AtomScore>> {
    if coefficient_sets.is_empty() {
        return Err(Error::Contract("atom significance needs at least one coefficient map".into()));
    }
    let m = dict.atom_count();
    let mut scores = vec![0.0; m];
    for z in coefficient_sets {
        if z.channel_count() != m {
            return Err(Error::Shape(format!("coefficient map has {} channels, dictionary {m}", z.channel_count())));
        }
        for (i, score) in scores.iter_mut().enumerate() {
            *score += z.data().index_axis(ndarray::Axis(0), i).iter().map(|v| v.abs()).sum::<f64>();
        }
    }
    let mut ranked: Vec<AtomScore> = scores.into_iter().enumerate().map(|(index, score)| AtomScore { index, score }).collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.index.cmp(&b.index)));
    Ok(ranked)
}

/// Tile sheet of atoms in the given order, `ceil(√m)` columns with a one-pixel
/// gap. Each atom is mapped symmetrically so that zero lands at mid-grey (0.5).
pub fn atom_montage(dict: &Dictionary, order: &[usize]) -> Result<Array2<f64>> {
    let k = dict.atom_side();
    let n = order.len();
    if let Some(bad) = order.iter().find(|i| **i >= dict.atom_count()) {
        return Err(Error::Shape(format!("atom index {bad} out of range")));
    }
    let cols = (n as f64).sqrt().ceil().max(1.0) as usize;
    let rows = n.div_ceil(cols).max(1);
    let mut sheet = Array2::from_elem((rows * (k + 1) + 1, cols * (k + 1) + 1), 0.5);
    for (slot, &atom) in order.iter().enumerate() {
        let (r, c) = (slot / cols, slot % cols);
        let a = dict.atom(atom);
        let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let tile = if scale > 0.0 { a.mapv(|v| 0.5 + 0.5 * v / scale) } else { a.mapv(|_| 0.5) };
        let (r0, c0) = (1 + r * (k + 1), 1 + c * (k + 1));
        sheet.slice_mut(s![r0..r0 + k, c0..c0 + k]).assign(&tile);
    }
    Ok(sheet)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::SynthesisMode;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (Dictionary, Vec<CoefficientMaps>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dict = Dictionary::random(6, 3, &mut rng).unwrap();
        let maps = (0..3)
            .map(|_| {
                let data = Array3::from_shape_simple_fn((6, 8, 8), || {
                    if rng.random_bool(0.3) { rng.random_range(-1.0..1.0) } else { 0.0 }
                });
                CoefficientMaps::from_array(SynthesisMode::Convolutional, data, (8, 8), 1.0).unwrap()
            })
            .collect();
        (dict, maps)
    }

    #[test]
    fn zero_maps_identity_order() {
        let (dict, maps) = setup(1);
        let zeros: Vec<_> = maps.iter().map(|z| z.with_data(Array3::zeros(z.data().dim()))).collect();
        let ranked = atom_significance(&dict, &zeros).unwrap();
        assert_eq!(ranked.iter().map(|a| a.index).collect::<Vec<_>>(), (0..6).collect::<Vec<_>>());
        assert!(ranked.iter().all(|a| a.score == 0.0));
    }

    #[test]
    fn single_channel_first() {
        let (dict, maps) = setup(2);
        let mut data = Array3::zeros(maps[0].data().dim());
        data[[3, 2, 2]] = -0.5;
        let ranked = atom_significance(&dict, &[maps[0].with_data(data)]).unwrap();
        assert_eq!(ranked[0], AtomScore { index: 3, score: 0.5 });
    }

    #[test]
    fn brute_force_and_duplication() {
        let (dict, maps) = setup(3);
        let ranked = atom_significance(&dict, &maps).unwrap();
        for a in &ranked {
            let mut s = 0.0;
            for z in &maps {
                for r in 0..8 {
                    for c in 0..8 {
                        s += z.data()[[a.index, r, c]].abs();
                    }
                }
            }
            assert!((a.score - s).abs() < 1e-12);
        }
        assert!(ranked.windows(2).all(|w| w[0].score >= w[1].score));

        let doubled: Vec<_> = maps.iter().chain(maps.iter()).cloned().collect();
        let again = atom_significance(&dict, &doubled).unwrap();
        assert_eq!(
            ranked.iter().map(|a| a.index).collect::<Vec<_>>(),
            again.iter().map(|a| a.index).collect::<Vec<_>>()
        );
    }

    #[test]
    fn errors() {
        let (dict, _) = setup(4);
        assert!(atom_significance(&dict, &[]).is_err());
        let wrong = CoefficientMaps::zeros(SynthesisMode::Convolutional, 2, (8, 8), 3, 1.0).unwrap();
        assert!(atom_significance(&dict, &[wrong]).is_err());
        assert!(atom_montage(&dict, &[7]).is_err());
    }

    #[test]
    fn montage_tiles() {
        let (dict, _) = setup(5);
        let sheet = atom_montage(&dict, &[5, 4, 3, 2, 1, 0]).unwrap();
        assert_eq!(sheet.dim(), (2 * 4 + 1, 3 * 4 + 1));
        let a = dict.atom(5);
        let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((sheet[[1, 1]] - (0.5 + 0.5 * a[[0, 0]] / scale)).abs() < 1e-15);
        assert!(sheet.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
