//! Compositional diffusion laboratory: closed-form conditional compositions,
//! their exact and local score fields, samplers, and numerical checks.

pub mod distributions;
pub mod error;
pub mod feature_space;
pub mod grid;
pub mod io;
pub mod kl_lab;
pub mod locality;
pub mod sampler;
pub mod scores;

pub use distributions::{
    bump_template, default_cpc, noise_distribution, sample_training_set, ConditionalFamily,
    CpcModel, Gaussian, GaussianMixture, LabelingPolicy, MatchRule, TrainingItem, TrainingSet,
};
pub use error::{Error, Result};
pub use grid::{
    make_subset_map, restrict, scatter, ConditionId, ConditionSet, GridShape, Image, IndexSet,
    Seed, SubsetMap,
};
pub use feature_space::{fcpc_score, CosineMatrix, FcpcModel, InvertibleLinearMap};
pub use kl_lab::{DiscreteJoint, KlValue, LatticeDensity};
pub use locality::{conditional_influence, energy_area, pixel_gradient_map, total_energy, GradientMap, InfluenceVector};
pub use sampler::{kmax_evaluate, sample, GenerationReport, KmaxProtocol, ObjectCounter, SamplerKind, Schedule};
pub use scores::{
    empirical_global_score, lcs_score, lemma1_rule, patch_local_score, EmpiricalScore, GlobalExactScore, LcsScore,
    ScoreField,
};
