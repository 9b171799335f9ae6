//! Experiment harness: augmentation regimes, classifier training and
//! evaluation, ablation sweeps and plots.

pub mod experiment;
pub mod figures;
pub mod metrics;
pub mod plots;
pub mod sweep;
pub mod tsne;

pub use crate::extractor::{flip_horizontal, traditional_augment};
pub use experiment::{evaluate, run_experiment, train_classifier, MetricsReport, RunIndex, RunLayout};
pub use figures::emit_plots;
pub use sweep::{sweep_ablation, AblationCell, AblationGrid};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// How the classifier's training multiset is built.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Baseline,
    Traditional,
    GanAug,
    Selective,
}

impl Regime {
    pub const ALL: [Regime; 4] = [Regime::Baseline, Regime::Traditional, Regime::GanAug, Regime::Selective];

    pub fn as_str(&self) -> &'static str {
        match self {
            Regime::Baseline => "baseline",
            Regime::Traditional => "traditional",
            Regime::GanAug => "gan_aug",
            Regime::Selective => "selective",
        }
    }

    /// Whether the regime adds synthetic images to the training set.
    pub fn uses_synthetic(&self) -> bool {
        matches!(self, Regime::GanAug | Regime::Selective)
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Regime> {
        Regime::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::Validation(format!("unknown regime {s:?}")))
    }
}
