use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffcore::tensor::Tensor;

/// Seeded, splittable source of randomness.
///
/// Identical seed and identical draw sequence produce identical values on
/// every platform. `split` derives child streams from well-mixed child seeds,
/// so a parent and its children (and siblings) consume disjoint ChaCha
/// keystreams and their outputs are independent by construction.
#[derive(Clone, Debug)]
pub struct RandomStream {
    rng: ChaCha8Rng,
    seed: u64,
    children: u64,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RandomStream {
    pub fn new(seed: u64) -> RandomStream {
        RandomStream {
            rng: ChaCha8Rng::seed_from_u64(seed),
            seed,
            children: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derives the next child stream. Never shares state with the parent.
    pub fn split(&mut self) -> RandomStream {
        self.children += 1;
        let child_seed = splitmix64(self.seed ^ splitmix64(self.children));
        RandomStream::new(child_seed)
    }

    pub fn split_n(&mut self, k: usize) -> Vec<RandomStream> {
        (0..k).map(|_| self.split()).collect()
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform draw in `[a, b)`.
    pub fn uniform_in(&mut self, a: f64, b: f64) -> f64 {
        a + (b - a) * self.uniform()
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn normal_vec(&mut self, n: usize, std: f64) -> Vec<f64> {
        (0..n).map(|_| std * self.standard_normal()).collect()
    }

    /// Tensor of i.i.d. normal draws with the given per-entry std.
    pub fn normal_tensor(&mut self, shape: Vec<usize>, std: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, self.normal_vec(n, std))
            .expect("shape product matches generated length")
    }

    /// Tensor of uniform draws in `[lo, hi)`.
    pub fn uniform_tensor(&mut self, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.uniform_in(lo, hi)).collect();
        Tensor::from_vec(shape, data).expect("shape product matches generated length")
    }

    /// Uniform index in `[0, n)`.
    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        // Fisher-Yates, driven by this stream for reproducibility.
        for i in (1..items.len()).rev() {
            let j = self.rng.random_range(0..=i);
            items.swap(i, j);
        }
    }
}
