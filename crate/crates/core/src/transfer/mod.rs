//! Identity-adaptive expression transfer: a per-frame encoder of (ψ, ω) and a
//! shared per-vertex network that maps neutral geometry plus code to offsets.

pub mod apply;
pub mod mlp;
pub mod net;
pub mod train;

pub use apply::{apply_transfer, export_control, render_control, ApplyReport, ControlManifest, Subject, Transferred};
pub use net::{encode, predict_offsets, predict_sequence, NetArch, NeutralIdentity, TransferNet};
pub use train::{masked_mse, train_transfer, TrainConfig, TrainReport, TransferDataset, TransferSample};
