//! Surrogate-label supervised contrastive learning.
//!
//! Clinical measurements that are cheap to collect (visual acuity, retinal
//! thickness, eye identity) stand in for scarce biomarker labels when picking
//! contrastive positives. An encoder is pretrained with the supervised
//! contrastive loss on such a label key, then a linear probe on frozen
//! representations predicts the biomarkers.
//!
//! * [`numcore`]: tensors and a reverse-mode autodiff tape.
//! * [`encoder`]: MLP encoder, projection head, linear probe, checkpoints.
//! * [`contrastive`]: views, positive sets, supervised contrastive and NT-Xent losses.
//! * [`theory`]: latent-class Monte-Carlo simulator.
//! * [`dataforge`]: synthetic datasets, manifests, splits, balanced test sets.
//! * [`trainloop`]: pretraining, probing, evaluation.
//! * [`metrics`]: confusion-based rates and AUROC.
//! * [`config`]: flat key-value run configuration.
//!
//! All randomness is ChaCha8 addressed by `(seed, stream, index)`; see [`seed`].

pub mod config;
pub mod contrastive;
pub mod dataforge;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod numcore;
pub mod seed;
pub mod theory;
pub mod trainloop;

pub use config::RunConfig;
pub use contrastive::{ntxent_loss, supcon_loss, AugmentSpec, LabelKey, PosNegSets, ViewBatch};
pub use dataforge::{Dataset, GeneratorConfig, PretrainPool, Sample, Split};
pub use encoder::{Checkpoint, EncoderNet, LinearProbe, ProjectionHead, Stage};
pub use error::{Error, Result};
pub use metrics::{ConfusionCounts, MetricsReport};
pub use numcore::{Graph, NodeId, Tensor};
pub use trainloop::{ProbeConfig, RunRecord, TrainConfig};
