//! Multi-objective reward modeling on frozen backbone features.
//!
//! The pipeline has three trainable stages, all operating on precomputed
//! feature vectors:
//!
//! 1. [`regression_head`]: a linear head predicting `k` absolute ratings per
//!    response, fitted per objective on only the ratings that are present.
//! 2. [`debias`]: per-objective penalties on the verbosity objective that
//!    remove its rank correlation with every other objective.
//! 3. [`gating`] and [`train`]: a prompt-conditioned MLP producing simplex
//!    weights over the debiased objectives, trained with a scaled
//!    Bradley-Terry loss while the head and penalties stay frozen.
//!
//! [`feature_store`] holds the on-disk feature/rating containers, [`eval`]
//! scores preference pairs and decomposes individual scores, and
//! [`synthetic`] generates planted data for end-to-end checks.

mod codec;

pub mod bundle;
pub mod debias;
pub mod error;
pub mod eval;
pub mod feature_store;
pub mod gating;
pub mod optim;
pub mod regression_head;
pub mod synthetic;
pub mod train;

pub use bundle::{BundleMetadata, ModelBundle};
pub use debias::{adjust, calibrate, spearman, CalibrateConfig, DebiasProfile, Metric};
pub use error::{Error, Result};
pub use eval::{decompose, pairwise_accuracy, weighted_score, CategoryResult, DecompositionReport, EvalReport, Gate, Scorer};
pub use feature_store::{
    load_store, merge_stores, normalize_rating, read_store, save_store, write_store, FeatureStore, PairRecord,
    RatedRecord, RatingScale, RecordKind, Records, StoreHeader,
};
pub use gating::{bt_loss, gate_forward, scalar_score, GatingNetwork};
pub use regression_head::{fit_head, predict_rewards, predict_store, RewardHead};
pub use synthetic::{gen_synthetic, ContextRule, SyntheticData, SyntheticSpec};
pub use train::{train_gate, TrainConfig, TrainHistory};
