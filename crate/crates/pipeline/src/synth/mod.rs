//! Synthetic cohort generation.

pub mod cohort;
pub mod dataset;
pub mod geometry;
pub mod render;

pub use cohort::{
    generate_patient, patient_seed, plan_cohort, plan_patient, render_patient, CohortConfig,
    PatientPlan, PatientRecord, FFR_THRESHOLD, MAX_ARTERIES, MIN_ARTERIES,
};
pub use dataset::{
    artery_file, format_meta, list_patients, parse_meta, patient_dir, read_meta, read_patient, write_patient, ARTERY_DIR,
    META_FILE, MYO_MASK_FILE, MYO_VOLUME_FILE,
};
pub use geometry::{ffr_oracle, ArteryGeometry, FfrConstants, Stenosis, MAX_LENGTH, MIN_LENGTH, POINT_SPACING_MM};
pub use render::{render_mpr, render_myocardium, MyoLayout, MyoRender, MyoRenderParams, MyoStyle, TERRITORIES};
