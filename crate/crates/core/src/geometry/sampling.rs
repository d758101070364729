//! Uniform with-replacement point index sampling.

use rand::Rng;

use crate::geometry::cloud::Part;

/// Source of indices in `[0, n)`. Blanket-implemented for any `Rng`; tests can
/// substitute a deterministic stub.
pub trait IndexSampler {
    fn draw(&mut self, n: usize) -> usize;
}

impl<R: Rng> IndexSampler for R {
    fn draw(&mut self, n: usize) -> usize {
        self.gen_range(0..n)
    }
}

/// Yields 0, 1, 2, … modulo `n`.
pub struct SequentialSampler {
    next: usize,
}

impl SequentialSampler {
    pub fn new() -> Self {
        Self { next: 0 }
    }
}

impl Default for SequentialSampler {
    fn default() -> Self {
        Self::new()
    }
}

impl IndexSampler for SequentialSampler {
    fn draw(&mut self, n: usize) -> usize {
        let i = self.next % n;
        self.next += 1;
        i
    }
}

/// Draws `m` indices uniformly with replacement from the part's points.
pub fn sample_part_points<S: IndexSampler + ?Sized>(part: &Part, m: usize, sampler: &mut S) -> Vec<usize> {
    let n = part.len();
    (0..m).map(|_| sampler.draw(n)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn part(n: usize) -> Part {
        Part {
            points: (0..n).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect(),
            normals: None,
            part_index: 0,
            anchor: true,
        }
    }

    #[test]
    fn sequential_stub_exhausts_indices() {
        let p = part(16);
        let mut stub = SequentialSampler::new();
        let idx = sample_part_points(&p, 16, &mut stub);
        assert_eq!(idx, (0..16).collect::<Vec<_>>());
    }

    #[test]
    fn deterministic_given_seed() {
        let p = part(100);
        let a = sample_part_points(&p, 64, &mut ChaCha12Rng::seed_from_u64(42));
        let b = sample_part_points(&p, 64, &mut ChaCha12Rng::seed_from_u64(42));
        assert_eq!(a, b);
    }

    #[test]
    fn empirically_uniform() {
        // 3σ binomial bound per bucket over 10⁶ draws.
        let n = 16usize;
        let draws = 1_000_000usize;
        let p = part(n);
        let mut rng = ChaCha12Rng::seed_from_u64(4242);
        let idx = sample_part_points(&p, draws, &mut rng);
        let mut counts = vec![0usize; n];
        for i in idx {
            counts[i] += 1;
        }
        let prob = 1.0 / n as f64;
        let mean = draws as f64 * prob;
        let sigma = (draws as f64 * prob * (1.0 - prob)).sqrt();
        for c in counts {
            assert!(
                (c as f64 - mean).abs() < 3.0 * sigma,
                "count {c} vs mean {mean} (σ={sigma})"
            );
        }
    }
}
