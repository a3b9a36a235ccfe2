//! Active-learning batch selection for object detectors.
//!
//! The engine works purely on detector inference outputs. For every round it
//! trains small per-class logistic classifiers that separate true from false
//! positives using `(pre-NMS count, confidence)`, turns their predictions into
//! instance entropies, splits the annotation budget across classes favouring
//! under-represented ones, and refines each class shortlist with image-level
//! entropy, class diversity and an embedding similarity penalty.
//!
//! Modules map onto pipeline stages:
//!
//! * [`io`]: validated loading and deterministic writing of every artifact.
//! * [`matching`]: IoU, pre-NMS proposal counting and TP/FP labelling.
//! * [`lius`]: classifiers, instance entropy, class ratios, budgets, shortlists.
//! * [`guide`]: image entropy, diversity index and similarity penalty.
//! * [`engine`]: one full selection round and pool bookkeeping.
//! * [`simulator`]: synthetic worlds and multi-round campaigns.

pub mod engine;
pub mod error;
pub mod guide;
pub mod io;
pub mod lius;
pub mod matching;
pub mod simulator;
pub mod types;

pub use engine::{RoundInputs, RoundState, SelectionManifest};
pub use error::{PalError, Result};
pub use io::config::{ClassifierParams, SelectionConfig};
pub use io::embeddings::EmbeddingStore;
pub use io::records::{DetectionDump, GroundTruthSet};
pub use types::{BBox, ClassId, DetectionRecord, ImageId};
