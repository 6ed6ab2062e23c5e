//! Philox4x32-10 counter-based random numbers.
//!
//! Every random draw in a run is addressed by `(seed, domain, stream, index)`:
//! the seed is the Philox key, the domain and stream id fill the upper two
//! counter words and the draw index the lower two. Streams are therefore
//! independent of the order in which other streams are consumed, which is
//! what makes rollouts identical across worker counts.

const M0: u32 = 0xD251_1F53;
const M1: u32 = 0xCD9E_8D57;
const W0: u32 = 0x9E37_79B9;
const W1: u32 = 0xBB67_AE85;

fn mulhilo(a: u32, b: u32) -> (u32, u32) {
    let p = u64::from(a) * u64::from(b);
    ((p >> 32) as u32, p as u32)
}

/// The Philox4x32 bijection with 10 rounds.
pub fn philox4x32_10(counter: [u32; 4], key: [u32; 2]) -> [u32; 4] {
    let mut ctr = counter;
    let mut k = key;
    for round in 0..10 {
        if round > 0 {
            k[0] = k[0].wrapping_add(W0);
            k[1] = k[1].wrapping_add(W1);
        }
        let (hi0, lo0) = mulhilo(M0, ctr[0]);
        let (hi1, lo1) = mulhilo(M1, ctr[2]);
        ctr = [hi1 ^ ctr[1] ^ k[0], lo1, hi0 ^ ctr[3] ^ k[1], lo0];
    }
    ctr
}

/// Purpose tag occupying the top counter word.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum Domain {
    Init = 1,
    Env = 2,
    Shuffle = 3,
    Eval = 4,
    Check = 5,
}

/// A position in one Philox stream. The whole state is the draw index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngStream {
    key: [u32; 2],
    domain: u32,
    stream: u32,
    index: u64,
}

impl RngStream {
    pub fn new(seed: u64, domain: Domain, stream: u32) -> Self {
        Self::at(seed, domain as u32, stream, 0)
    }

    /// Restores a stream at a saved draw index.
    pub fn at(seed: u64, domain: u32, stream: u32, index: u64) -> Self {
        Self {
            key: [seed as u32, (seed >> 32) as u32],
            domain,
            stream,
            index,
        }
    }

    pub fn index(&self) -> u64 {
        self.index
    }

    pub fn domain(&self) -> u32 {
        self.domain
    }

    pub fn stream(&self) -> u32 {
        self.stream
    }

    pub fn seed(&self) -> u64 {
        u64::from(self.key[0]) | (u64::from(self.key[1]) << 32)
    }

    /// Draw `i` is half `i % 2` of block `i / 2`.
    pub fn next_u64(&mut self) -> u64 {
        let block = self.index / 2;
        let half = (self.index % 2) as usize;
        self.index += 1;
        let out = philox4x32_10(
            [block as u32, (block >> 32) as u32, self.stream, self.domain],
            self.key,
        );
        u64::from(out[2 * half]) | (u64::from(out[2 * half + 1]) << 32)
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box-Muller; consumes two draws per value.
    pub fn normal(&mut self) -> f64 {
        let to_unit = |x: u64| (x >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        let (u1, u2) = if self.index.is_multiple_of(2) {
            // Both draws come from the same block.
            let block = self.index / 2;
            self.index += 2;
            let out = philox4x32_10(
                [block as u32, (block >> 32) as u32, self.stream, self.domain],
                self.key,
            );
            let lo = u64::from(out[0]) | (u64::from(out[1]) << 32);
            let hi = u64::from(out[2]) | (u64::from(out[3]) << 32);
            (1.0 - to_unit(lo), to_unit(hi))
        } else {
            (1.0 - self.uniform(), self.uniform())
        };
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        // Lemire's multiply-shift; the bias is below 2^-64 * n.
        ((u128::from(self.next_u64()) * n as u128) >> 64) as usize
    }

    /// Fisher-Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            p.swap(i, j);
        }
        p
    }
}
