//! Base-2 Sobol low-discrepancy sequence (Joe & Kuo direction numbers).
//!
//! Points are generated in Gray-code order. The all-zeros point at index 0 is
//! skipped by [`SobolSequence::new`], so the first emitted point is `0.5` in
//! every coordinate. A nonzero seed applies a random digital shift (XOR of
//! every coordinate with a fixed random word), which preserves the net
//! structure of the sequence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BITS: u32 = 32;

/// (degree s, coefficient a, initial m_1..m_s) for dimensions 2..=10.
const DIRECTION_TABLE: [(u32, u32, &[u32]); 9] = [
    (1, 0, &[1]),
    (2, 1, &[1, 3]),
    (3, 1, &[1, 3, 1]),
    (3, 2, &[1, 1, 1]),
    (4, 1, &[1, 1, 3, 3]),
    (4, 4, &[1, 3, 5, 13]),
    (5, 2, &[1, 1, 5, 5, 17]),
    (5, 4, &[1, 1, 5, 5, 5]),
    (5, 7, &[1, 1, 7, 11, 19]),
];

pub const MAX_DIM: usize = DIRECTION_TABLE.len() + 1;

#[derive(Debug, Clone)]
pub struct SobolSequence {
    directions: Vec<[u32; BITS as usize]>,
    state: Vec<u32>,
    shift: Vec<u32>,
    index: u64,
}

impl SobolSequence {
    /// Sequence of dimension `dim` (1..=MAX_DIM) positioned after the zero point.
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(
            (1..=MAX_DIM).contains(&dim),
            "sobol dimension must be in 1..={MAX_DIM}"
        );
        let mut directions = Vec::with_capacity(dim);
        directions.push(std::array::from_fn(|i| 1u32 << (BITS - 1 - i as u32)));
        for &(s, a, m_init) in DIRECTION_TABLE.iter().take(dim - 1) {
            let s = s as usize;
            let mut m = [0u32; BITS as usize];
            m[..s].copy_from_slice(m_init);
            for i in s..BITS as usize {
                let mut value = m[i - s] ^ (m[i - s] << s);
                for k in 1..s {
                    let bit = (a >> (s - 1 - k)) & 1;
                    if bit == 1 {
                        value ^= m[i - k] << k;
                    }
                }
                m[i] = value;
            }
            directions.push(std::array::from_fn(|i| m[i] << (BITS - 1 - i as u32)));
        }
        let shift = if seed == 0 {
            vec![0; dim]
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..dim).map(|_| rng.random::<u32>()).collect()
        };
        let mut seq = SobolSequence {
            directions,
            state: vec![0; dim],
            shift,
            index: 0,
        };
        // skip the all-zeros point
        seq.advance();
        seq
    }

    fn advance(&mut self) {
        let c = (!self.index).trailing_zeros() as usize;
        for (x, v) in self.state.iter_mut().zip(&self.directions) {
            *x ^= v[c];
        }
        self.index += 1;
    }

    pub fn next_point(&mut self) -> Vec<f64> {
        let scale = 1.0 / (1u64 << BITS) as f64;
        let point = self
            .state
            .iter()
            .zip(&self.shift)
            .map(|(&x, &s)| (x ^ s) as f64 * scale)
            .collect();
        self.advance();
        point
    }

    pub fn take_points(&mut self, n: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| self.next_point()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Reference values from an independent implementation
    // (scipy.stats.qmc.Sobol, scramble=False), rows 1..=8.
    const REFERENCE: [[f64; 6]; 8] = [
        [0.5, 0.5, 0.5, 0.5, 0.5, 0.5],
        [0.75, 0.25, 0.25, 0.25, 0.75, 0.75],
        [0.25, 0.75, 0.75, 0.75, 0.25, 0.25],
        [0.375, 0.375, 0.625, 0.875, 0.375, 0.125],
        [0.875, 0.875, 0.125, 0.375, 0.875, 0.625],
        [0.625, 0.125, 0.875, 0.625, 0.625, 0.875],
        [0.125, 0.625, 0.375, 0.125, 0.125, 0.375],
        [0.1875, 0.3125, 0.9375, 0.4375, 0.5625, 0.3125],
    ];

    #[test]
    fn matches_reference_points() {
        let mut seq = SobolSequence::new(6, 0);
        for row in REFERENCE {
            assert_eq!(seq.next_point(), row.to_vec());
        }
    }

    #[test]
    fn shifted_sequence_is_deterministic_and_in_unit_cube() {
        let a = SobolSequence::new(4, 7).take_points(64);
        let b = SobolSequence::new(4, 7).take_points(64);
        assert_eq!(a, b);
        assert!(a.iter().flatten().all(|&x| (0.0..1.0).contains(&x)));
        let c = SobolSequence::new(4, 8).take_points(64);
        assert_ne!(a, c);
    }

    #[test]
    fn first_power_of_two_block_is_stratified() {
        // 2^m consecutive points (including the skipped zero) hit every
        // dyadic interval of length 2^-m once per coordinate.
        let mut pts = vec![vec![0.0; MAX_DIM]];
        pts.extend(SobolSequence::new(MAX_DIM, 0).take_points(15));
        for d in 0..MAX_DIM {
            let mut seen = [false; 16];
            for p in &pts {
                seen[(p[d] * 16.0) as usize] = true;
            }
            assert!(seen.iter().all(|&s| s), "dimension {d} not stratified");
        }
    }
}
