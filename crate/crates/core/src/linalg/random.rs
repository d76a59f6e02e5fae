use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{decomp, DenseMatrix};

/// Seed for every random draw in the crate.
///
/// Draws come from ChaCha8 seeded through `seed_from_u64`, so identical seeds
/// give bit-identical streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Seed(pub u64);

impl Seed {
    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }

    /// Derives an independent child seed from a label (FNV-1a then splitmix64).
    pub fn derive(self, label: &str) -> Seed {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in label.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        Seed(splitmix64(self.0 ^ splitmix64(h)))
    }

    pub fn derive_index(self, index: u64) -> Seed {
        Seed(splitmix64(self.0 ^ splitmix64(index.wrapping_add(0x5851_f42d_4c95_7f2d))))
    }
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn gaussian_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Haar-distributed rotation: QR of a Gaussian draw with the `R` diagonal made
/// positive, then the first column negated if the determinant came out −1.
pub fn random_rotation(d: usize, seed: Seed) -> Result<DenseMatrix> {
    if d == 0 {
        return Err(Error::UnsupportedDimension {
            dim: 0,
            reason: "rotation dimension must be positive",
        });
    }
    let mut rng = seed.rng();
    let g = gaussian_matrix(d, d, &mut rng);
    let (mut q, _) = decomp::qr(&g)?;
    if decomp::determinant(&q)? < 0.0 {
        for r in 0..d {
            q[(r, 0)] = -q[(r, 0)];
        }
    }
    Ok(q)
}

/// Unnormalized Sylvester Walsh–Hadamard matrix with ±1 entries.
pub fn sylvester_hadamard(d: usize) -> Result<DenseMatrix> {
    if d == 0 || !d.is_power_of_two() {
        return Err(Error::UnsupportedDimension {
            dim: d,
            reason: "Hadamard dimension must be a power of two",
        });
    }
    Ok(DenseMatrix::from_fn(d, d, |r, c| {
        if (r & c).count_ones() % 2 == 0 {
            1.0
        } else {
            -1.0
        }
    }))
}

/// `(1/√d)·H_d·D` with `D` a random ±1 diagonal.
pub fn randomized_hadamard(d: usize, seed: Seed) -> Result<DenseMatrix> {
    let mut rng = seed.rng();
    let signs: Vec<f64> = (0..d)
        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect();
    hadamard_with_signs(d, &signs)
}

pub fn hadamard_with_signs(d: usize, signs: &[f64]) -> Result<DenseMatrix> {
    let h = sylvester_hadamard(d)?;
    if signs.len() != d {
        return Err(Error::Config(format!(
            "expected {d} signs, got {}",
            signs.len()
        )));
    }
    let norm = 1.0 / (d as f64).sqrt();
    Ok(DenseMatrix::from_fn(d, d, |r, c| h[(r, c)] * signs[c] * norm))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotation_of_dimension_one() {
        assert_eq!(random_rotation(1, Seed(3)).unwrap().data(), &[1.0]);
    }

    #[test]
    fn rotations_are_special_orthogonal_and_deterministic() {
        for d in [2, 3, 8, 33] {
            for s in 0..4 {
                let m = random_rotation(d, Seed(s)).unwrap();
                assert!(m.orthogonality_error() <= 1e-10);
                assert!((decomp::determinant(&m).unwrap() - 1.0).abs() < 1e-9);
                let again = random_rotation(d, Seed(s)).unwrap();
                assert_eq!(m.data(), again.data());
            }
        }
        assert_ne!(
            random_rotation(4, Seed(1)).unwrap(),
            random_rotation(4, Seed(2)).unwrap()
        );
    }

    #[test]
    fn base_hadamard_case() {
        let h = hadamard_with_signs(2, &[1.0, 1.0]).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!(h.max_abs_diff(&DenseMatrix::from_rows(&[[s, s], [s, -s]]).unwrap()) < 1e-15);
    }

    #[test]
    fn hadamard_is_orthogonal_and_flattens_one_hot() {
        let mut d = 2;
        while d <= 1024 {
            let h = randomized_hadamard(d, Seed(d as u64)).unwrap();
            assert!(h.orthogonality_error() <= 1e-10, "d={d}");
            let c = 3.5;
            let mut e1 = DenseMatrix::zeros(d, 1);
            e1[(0, 0)] = c;
            let y = h.mul(&e1);
            let target = c / (d as f64).sqrt();
            assert!(y.data().iter().all(|v| (v.abs() - target).abs() <= 1e-12));
            d *= 2;
        }
    }

    #[test]
    fn hadamard_rejects_non_powers_of_two() {
        assert!(matches!(
            randomized_hadamard(12, Seed(0)),
            Err(Error::UnsupportedDimension { dim: 12, .. })
        ));
    }

    #[test]
    fn derived_seeds_differ() {
        let s = Seed(7);
        assert_ne!(s.derive("a"), s.derive("b"));
        assert_eq!(s.derive("a"), Seed(7).derive("a"));
        assert_ne!(s.derive_index(0), s.derive_index(1));
    }
}
