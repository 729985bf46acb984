use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

/// Named RNG streams. Each experiment knob draws from its own stream so that
/// changing one does not perturb the others.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    World,
    Partition,
    Encoders,
    Keys,
    Init,
    /// Client selection in one round.
    Sampling { round: u64 },
    /// Style transform of one domain.
    DomainStyle(u64),
    /// Samples of one domain.
    DomainSamples(u64),
    /// Local training of one client in one round (shuffles and augmentation).
    Train { round: u64, client: u64 },
    /// Test-only or ad-hoc draws.
    Aux(u64),
}

impl Stream {
    pub fn id(self) -> u64 {
        match self {
            Stream::World => 1,
            Stream::Partition => 2,
            Stream::Encoders => 3,
            Stream::Keys => 4,
            Stream::Init => 5,
            Stream::Sampling { round } => (6u64 << 56) | (round & 0xffff_ffff),
            Stream::DomainStyle(k) => (9u64 << 56) | (k & 0xffff_ffff),
            Stream::DomainSamples(k) => (10u64 << 56) | (k & 0xffff_ffff),
            Stream::Train { round, client } => {
                (7u64 << 56) | ((round & 0xff_ffff) << 32) | (client & 0xffff_ffff)
            }
            Stream::Aux(n) => (8u64 << 56) | (n & 0x00ff_ffff_ffff_ffff),
        }
    }
}

/// Seeded ChaCha8 generator addressed by `(seed, stream)`.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64, stream: Stream) -> Self {
        Self::with_stream_id(seed, stream.id())
    }

    pub fn with_stream_id(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn normal_vec(&mut self, n: usize, std: f64) -> Vec<f64> {
        (0..n).map(|_| std * self.normal()).collect()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Uniform index in `[0, n)`.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    /// `k` distinct indices from `[0, n)`, in draw order.
    pub fn sample_without_replacement(&mut self, n: usize, k: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.inner, n, k).into_vec()
    }

    /// Natural log of a `Gamma(shape, 1)` draw. Stays finite for tiny shapes,
    /// where the draw itself underflows to zero.
    pub fn log_gamma_draw(&mut self, shape: f64) -> f64 {
        debug_assert!(shape > 0.0);
        if shape >= 1.0 {
            let g: f64 = Gamma::new(shape, 1.0).expect("valid gamma").sample(&mut self.inner);
            g.max(f64::MIN_POSITIVE).ln()
        } else {
            // G(a) = G(a + 1) * U^(1/a)
            let g: f64 = Gamma::new(shape + 1.0, 1.0)
                .expect("valid gamma")
                .sample(&mut self.inner);
            let u = 1.0 - self.uniform();
            g.max(f64::MIN_POSITIVE).ln() + u.ln() / shape
        }
    }

    /// One draw from the symmetric Dirichlet `Dir(alpha * 1_n)`.
    pub fn dirichlet(&mut self, alpha: f64, n: usize) -> Vec<f64> {
        let logs: Vec<f64> = (0..n).map(|_| self.log_gamma_draw(alpha)).collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = w.iter().sum();
        w.into_iter().map(|x| x / total).collect()
    }
}
