//! Dose suggestion: when the patient's current motion features are close
//! enough to the most recent approved episode, repeat that episode's dose
//! without waiting for a physician.

use serde::{Deserialize, Serialize};

use super::motion::{similarity, FeatureVector};
use crate::castore::ContentHash;

pub const DEFAULT_TAU: f64 = 0.1;

/// Similarity reported when there is nothing comparable to compare against.
pub const NO_MATCH_SIMILARITY: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecisionConfig {
    /// Auto-suggest when similarity to the previous approved episode is at most this.
    pub tau: f64,
    /// Stop auto-approving after this many consecutive automatic doses.
    /// `None` never stops.
    pub max_consecutive_auto: Option<u32>,
}

impl Default for DecisionConfig {
    fn default() -> Self {
        DecisionConfig { tau: DEFAULT_TAU, max_consecutive_auto: None }
    }
}

/// One past episode.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryEntry {
    pub features: FeatureVector,
    pub dose_mg: u64,
    pub approved: bool,
    /// The request file the episode came from.
    pub source: Option<ContentHash>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseSuggestion {
    pub dose_mg: Option<u64>,
    pub similarity: f64,
    pub auto: bool,
    pub basis: Option<ContentHash>,
}

impl DoseSuggestion {
    pub fn cold_start() -> DoseSuggestion {
        DoseSuggestion { dose_mg: None, similarity: NO_MATCH_SIMILARITY, auto: false, basis: None }
    }
}

/// Compares `current` with the most recent approved entry of `history`
/// (ordered oldest first).
///
/// Within `tau` the previous dose is suggested for automatic approval;
/// otherwise it is offered to the physician as a draft.
pub fn suggest_dose(history: &[HistoryEntry], current: &FeatureVector, tau: f64) -> DoseSuggestion {
    let Some(last) = history.iter().rev().find(|h| h.approved) else {
        return DoseSuggestion::cold_start();
    };
    // Vectors over different joint sets are not comparable.
    let sim = similarity(current, &last.features).unwrap_or(NO_MATCH_SIMILARITY);
    DoseSuggestion { dose_mg: Some(last.dose_mg), similarity: sim, auto: sim <= tau, basis: last.source }
}
