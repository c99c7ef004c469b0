//! Seeded, replayable random streams.
//!
//! Every stochastic unit of every replica owns a [`NoiseStream`] addressed by
//! `(seed, stream_id)`. Streams are ChaCha8 keystreams: the seed picks the
//! key, the stream id picks the nonce, and the draw count maps directly to a
//! keystream position. A stream can therefore be recreated at any point of
//! its sequence from three integers, and streams with different ids never
//! share generator state.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Keystream words consumed by one uniform draw (one `u64`).
const WORDS_PER_DRAW: u128 = 2;

/// Bits reserved for the unit index when deriving per-unit stream ids.
const UNIT_BITS: u32 = 24;

/// Serializable position of a [`NoiseStream`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseState {
    pub seed: u64,
    pub stream_id: u64,
    pub draw_count: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(from = "NoiseState", into = "NoiseState")]
pub struct NoiseStream {
    state: NoiseState,
    rng: ChaCha8Rng,
}

impl NoiseStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self::from_state(NoiseState {
            seed,
            stream_id,
            draw_count: 0,
        })
    }

    /// Stream for `unit` in experiment replica `replica`.
    pub fn for_unit(seed: u64, replica: u64, unit: usize) -> Self {
        debug_assert!((unit as u64) < (1 << UNIT_BITS));
        Self::new(seed, (replica << UNIT_BITS) | unit as u64)
    }

    pub fn from_state(state: NoiseState) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(state.seed);
        rng.set_stream(state.stream_id);
        rng.set_word_pos(state.draw_count as u128 * WORDS_PER_DRAW);
        Self { state, rng }
    }

    pub fn state(&self) -> NoiseState {
        self.state
    }

    pub fn seed(&self) -> u64 {
        self.state.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.state.stream_id
    }

    pub fn draw_count(&self) -> u64 {
        self.state.draw_count
    }

    /// Next uniform variate in `[0, 1)` with 53 bits of resolution.
    pub fn draw_uniform(&mut self) -> f64 {
        self.state.draw_count += 1;
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Zero-mean Gaussian with standard deviation `sigma`.
    ///
    /// Box-Muller on two fresh uniforms, keeping only the cosine branch so
    /// that no variate is cached between calls. Always consumes two draws,
    /// including when `sigma == 0`.
    pub fn draw_gaussian(&mut self, sigma: f64) -> Result<f64> {
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::invalid(format!(
                "gaussian sigma must be finite and >= 0, got {sigma}"
            )));
        }
        // 1 - U lies in (0, 1], so the logarithm is finite.
        let radius_draw = 1.0 - self.draw_uniform();
        let angle_draw = self.draw_uniform();
        if sigma == 0.0 {
            return Ok(0.0);
        }
        let radius = (-2.0 * radius_draw.ln()).sqrt();
        Ok(sigma * radius * (std::f64::consts::TAU * angle_draw).cos())
    }

    /// Uniformly random sign: `+1.0` or `-1.0`.
    pub fn draw_sign(&mut self) -> f64 {
        if self.draw_uniform() < 0.5 {
            1.0
        } else {
            -1.0
        }
    }
}

impl PartialEq for NoiseStream {
    fn eq(&self, other: &Self) -> bool {
        self.state == other.state
    }
}

impl From<NoiseState> for NoiseStream {
    fn from(state: NoiseState) -> Self {
        Self::from_state(state)
    }
}

impl From<NoiseStream> for NoiseState {
    fn from(stream: NoiseStream) -> Self {
        stream.state
    }
}

/// One stream per unit of a network, for a single replica.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitStreams {
    streams: Vec<NoiseStream>,
}

impl UnitStreams {
    pub fn new(seed: u64, replica: u64, unit_count: usize) -> Self {
        Self {
            streams: (0..unit_count)
                .map(|unit| NoiseStream::for_unit(seed, replica, unit))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.streams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.streams.is_empty()
    }

    pub fn get_mut(&mut self, unit: usize) -> Option<&mut NoiseStream> {
        self.streams.get_mut(unit)
    }
}
