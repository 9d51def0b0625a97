//! Customization harness: procedural subjects, an identity encoder, victim
//! fine-tuning and protection metrics.

pub mod ablation;
pub mod encoder;
pub mod protection;
pub mod subject;

pub use ablation::{
    ablation_csv, ablation_suite, mismatch_eval, tap_group, AblationCell, AblationGrid, AblationRow, MismatchReport,
    ABLATION_HEADER,
};
pub use encoder::{cosine, train_identity_encoder, EncoderConfig, IdentityEncoder, ACCURACY_FLOOR, EMBEDDING_DIM};
pub use protection::{
    artifact_energy, evaluate_arm, evaluate_protection, ism_proxy, protected_arm, recon_error, report_csv, ArmReport,
    EvalConfig, ProtectionReport, REPORT_HEADER,
};
pub use subject::{pixel_distance, synth_corpus, synth_subject, Corpus, Subject, SubjectParams};
