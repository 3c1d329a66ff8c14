//! Phantom generators and dataset storage.

pub mod arm;
pub mod dataset;
pub mod digits;
pub mod idx;
pub mod mnist;
pub mod noise;
pub mod rods;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::grid::SosMap;

pub use arm::{arm_phantom, ArmConfig, ArmParams};
pub use dataset::{DatasetOptions, PhantomKind, Sample, SampleMeta};
pub use mnist::{mnist_sos_map, AugmentSpec};
pub use noise::{add_noise, empirical_snr_db};
pub use rods::{rod_phantom, RodKind, RodSpec};

/// Background SoS, m/s.
pub const WATER_SOS: f64 = 1500.0;

/// SoS map with a label per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct TissueMap {
    pub sos: SosMap,
    pub labels: Array2<u8>,
    pub arm: Option<ArmParams>,
    pub rods: Option<Vec<RodSpec>>,
}

/// Independent stream `index` of the master `seed`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}
