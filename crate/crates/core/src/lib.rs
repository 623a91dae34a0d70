//! Prototypical cross-domain self-supervised learning for few-shot
//! unsupervised domain adaptation.
//!
//! A small feed-forward encoder maps raw inputs onto the unit sphere. Per-domain
//! memory banks hold one feature per sample and are clustered with spherical
//! k-means every epoch. Training combines a supervised cosine-classifier loss
//! on the few labeled source samples with in-domain prototypical contrast,
//! cross-domain instance-prototype matching and mutual-information
//! maximization, while the classifier columns are periodically reset to
//! class-prototype estimates.
//!
//! ```
//! use pcs_core::{generate_synthetic_fuda, train, SynthConfig, TrainConfig};
//!
//! let data = generate_synthetic_fuda(&SynthConfig {
//!     samples_per_class_source: 20,
//!     samples_per_class_target: 20,
//!     ..SynthConfig::default()
//! })?;
//! let cfg = TrainConfig { epochs: 2, cluster_runs: 2, ..TrainConfig::default() };
//! let (model, metrics) = train(&data, &cfg)?;
//! assert_eq!(metrics.len(), 2);
//! assert_eq!(model.epochs_completed, 2);
//! # Ok::<(), pcs_core::PcsError>(())
//! ```

pub mod bank;
pub mod checkpoint;
pub mod classifier;
pub mod cluster;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod seed;
pub mod trainer;

pub use bank::{Domain, MemoryBank};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use classifier::{
    apcu_update, build_confidence_sets, estimate_class_prototypes, ApcuBranch, ApcuConfig,
    ClassEstimates, ConfidenceSets, CosineClassifier,
};
pub use cluster::{
    cluster_bank, kmeans_pp_init, multi_cluster, purity, spherical_kmeans, spherical_kmeans_from,
    ClusterModel, ClusterSchedule, KMeansParams,
};
pub use config::{Provenance, Settings, KEYS};
pub use data::{
    batch_iterator, epoch_batches, few_shot_split, generate_synthetic_fuda, load_feature_file,
    read_feature_file, save_feature_file, write_feature_file, FudaDataset, Shift, Step,
    SynthConfig, TrainView,
};
pub use encoder::{finite_diff_check, sgd_step, Encoder, ForwardCache, Gradients, OptimizerState};
pub use error::{PcsError, Result};
pub use eval::{
    evaluate, export_embeddings, prototype_similarity_sum, retrieve_topk, target_accuracy,
    weighted_knn_classify, EvalEncoder, EvalOptions, EvalReport,
};
pub use losses::{
    classification_loss, cross_domain_loss, in_domain_proto_loss, mi_identity_check, mim_loss,
    mim_loss_exact, total_loss, LossValue, LossWeights, PriorTracker,
};
pub use trainer::{
    ablation_run, train, write_metrics, Components, MetricsRecord, TrainConfig, TrainedModel,
    Trainer,
};
