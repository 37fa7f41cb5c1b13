//! Box algebra, principal orientation, and RoI align.

mod boxes;
mod orientation;
mod roi_align;

pub use boxes::{intersection, iou, scale_jitter, to_rotated, BBox, RotatedBox, ScaleJitter};
pub use orientation::{
    compress_channels, fold_half_turn, principal_orientation, principal_orientation_scaled,
    EIGEN_TIE_RATIO,
};
pub use roi_align::{pool_rois, roi_align, rotated_roi_align, RoiTaps, SAMPLING_RATIO};
