//! Region partitions, pixel-replacement missingness approximations, and
//! removal orderings.

mod approx;
mod order;
mod region;

pub use approx::{
    apply_approximation, apply_mask, gaussian_blur, gaussian_kernel, MissingnessKind,
    MissingnessSpec, DEFAULT_BLUR_KERNEL, DEFAULT_BLUR_SIGMA,
};
pub use order::{
    order_regions, rank_by_score, region_saliency, removal_count, remove_fraction, remove_regions,
    MaskedInput, RemovalOrder,
};
pub use region::{PartitionKind, Region, RegionPartition};
