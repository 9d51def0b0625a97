//! Diagnostics: gradient statistics per timestep, frequency content of
//! one-step reconstructions, PCA of decoder features and the search's
//! effect on expected gradient magnitude.

pub mod freq;
pub mod grads;
pub mod pca;
pub mod theorem1;

pub use freq::{
    fft2d, freq_residual_study, radial_profile, residual_csv, ring_count, NoisePredictor, RadialSpectrum,
    ResidualSpectrum, Spectrum, SpectrumStat, RESIDUAL_HEADER,
};
pub use grads::{even_buckets, gradient_stats, BucketStats, GradientStats, GRADIENT_STATS_HEADER};
pub use pca::{pca_features, write_pgm, LayerPca, PcaMap, PCA_HEADER};
pub use theorem1::{pool_expectation, theorem1_csv, theorem1_oracle, Profile, Theorem1Outcome, THEOREM1_HEADER};
