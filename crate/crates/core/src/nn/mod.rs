pub mod blocks;
pub mod layers;
pub mod loss;

pub use blocks::{predict_offsets_fa, Aggregation, AlignCm, AlignFa, OffsetHead, OffsetPair, Rcb, SegHead};
pub use layers::{BatchNorm, Conv, ConvBn, ConvTranspose, Ctx};
pub use loss::{class_balanced_ce, median_frequency_weights, ohem_ce, ohem_select, softmax_cross_entropy};
