//! Volumetric tissue segmentation of multi-echo MR images by maximum a
//! posteriori estimation.
//!
//! The posterior couples three ingredients: a nonparametric (Parzen-window)
//! or log-Gaussian intensity likelihood per tissue, a nearest-neighbor
//! label interaction energy that rewards locally coherent segmentations,
//! and a smoothness-plus-magnitude prior on a multiplicative low-frequency
//! intensity bias field. The `optimize` module maximizes it with simulated
//! annealing or one of two deterministic coordinate-ascent variants; the
//! `phantom`, `metrics`, and `harness` modules generate controlled
//! synthetic volumes and reproduce error-versus-degradation curves.

pub mod energy;
pub mod error;
pub mod harness;
pub mod intensity;
pub mod mat;
pub mod metrics;
pub mod mvol;
pub mod optimize;
pub mod phantom;
pub mod tissue;
pub mod volume;

pub use energy::{
    bias_energy, label_energy, local_bias_energy, local_label_energy, log_posterior, BiasPrior,
    PotentialTable, Temperature,
};
pub use error::CoreError;
pub use harness::{
    run_benchmark, write_csv, BenchmarkSpec, CellSetup, EchoMode, RunRecord, CSV_HEADER,
};
pub use intensity::{
    build_lut, fit_gaussian_model, load_model, load_model_file, log_intensity, save_model,
    save_model_file, DensityLut, GaussianTissueModel, Likelihood, ParzenModel, TissueModels,
    TrainingSet,
};
pub use mat::{Sym2, Vec2};
pub use metrics::{
    contrast_stats, error_rate, mahalanobis, mahalanobis_pairs, thickness_error, ErrorReport,
    THICKNESS_WINDOW_RADIUS,
};
pub use mvol::{
    read_bias_file, read_labels_file, read_volume_file, write_bias_file, write_labels_file,
    write_volume_file,
};
pub use optimize::{
    icm1_iteration, icm2_iteration, initialize, metropolis_accept, sa_run, sa_sweep, segment,
    state_objective, Algorithm, AnnealSchedule, Diagnostics, IterStats, OptState, RunParams,
};
pub use phantom::{
    radial_inhomogeneity, shell_template, sinusoidal_gyrus, synthesize, PhantomSpec, TissueMeans,
};
pub use tissue::Tissue;
pub use volume::{BiasField, Dims, LabelMap, Volume};
