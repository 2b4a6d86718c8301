//! Validation statistics.

pub mod agreement;
pub mod correlation;
pub mod lag;
pub mod loo;
pub mod ordinal;

pub use agreement::{
    krippendorff_alpha_ordinal, quality_control, qwk, AgreementReport, QcStatus, Qwk,
    SessionRatings,
};
pub use correlation::pearson;
pub use lag::{moderator_lag, LagCell, LagSource, ModeratorLagProfile};
pub use loo::{
    condition_mae, human_loo_mae, mean_std, ConditionMae, LooReport, MaeStat, RunScores,
};
pub use ordinal::{fit_ordinal, round_label, standardize, OrdinalModelFit};
