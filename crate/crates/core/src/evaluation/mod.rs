//! Assessment of a defense: pixel and perceptual distances, PSNR, texture
//! codes, success rates and the transfer matrix over target models.

mod baseline;
mod metrics;
mod perceptual;
mod report;
mod visual;

pub use baseline::{pgd_reference, uniform_noise, Perturbation};
pub use metrics::{
    defense_success_rate, distance, lbp_map, psnr, psnr_floor, psnr_from_mse, success_flags, DistanceKind,
    DEFAULT_THRESHOLD,
};
pub use perceptual::{perceptual_distance, PerceptualExtractor, DEFAULT_EXTRACTOR_SEED};
pub use report::{
    evaluate_editing, evaluate_reenactment, evaluation_domains, forge_edits, forge_reenactment, read_summaries,
    transfer_matrix, write_reports, DefenseReport, DomainTag, EvalSet, ImageRow, OutputPair, ReportSummary,
    Setting, TransferTarget,
};
pub use visual::{image_grid, lbp_side_by_side, line_plot};

#[cfg(test)]
mod tests;
