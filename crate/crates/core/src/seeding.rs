//! Independent RNG streams derived from one experiment seed.
//!
//! Data generation, unlabeled sampling, model initialization and noise each
//! get their own generator so that changing one knob (say the sampling
//! threshold) never shifts the random numbers another component sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data,
    TaskLayout,
    Order,
    SamplingGate,
    SamplingIndex,
    ClassifierInit,
    LearnerInit,
    TeacherInit,
    Noise,
    Pool,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Data => 0x01,
            Stream::TaskLayout => 0x02,
            Stream::Order => 0x03,
            Stream::SamplingGate => 0x04,
            Stream::SamplingIndex => 0x05,
            Stream::ClassifierInit => 0x06,
            Stream::LearnerInit => 0x07,
            Stream::TeacherInit => 0x08,
            Stream::Noise => 0x09,
            Stream::Pool => 0x0a,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: Stream) -> u64 {
    splitmix64(seed ^ splitmix64(stream.tag()))
}

pub fn rng_for(seed: u64, stream: Stream) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, stream))
}

pub fn rng_from_seed(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
