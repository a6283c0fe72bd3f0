//! Raw series ingestion, chronological splits, normalisation, Siamese pair
//! sampling and the five masking rules.

mod frame;
mod labeled;
mod mask;
mod normalize;
mod sampling;
mod synthetic;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use frame::{
    chronological_split, forecast_starts, load_csv, SplitSizes, SplitSpec, StandardScaler,
    TimeSeriesFrame,
};
pub use labeled::{load_labeled_windows, write_labeled_windows, LabeledWindow};
pub use mask::{apply_mask, MaskRule, MaskSpec};
pub use normalize::{instance_normalize, InstanceStats, NORM_EPS};
pub use sampling::{
    make_pretrain_batch, sample_distance, sample_siamese_pair, sample_siamese_pair_at,
    SiamesePair,
};
pub use synthetic::{synthetic_labeled, synthetic_series};

/// Independent random stream for `(base_seed, a, b)`; e.g. `(seed, step,
/// sample)` or `(seed, worker, 0)`.
pub fn stream_rng(base_seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mixed = base_seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    let mut rng = ChaCha8Rng::seed_from_u64(mixed);
    rng.set_stream(b);
    rng
}
