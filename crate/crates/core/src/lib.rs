//! Heterogeneous matrix factorization.
//!
//! Given matrices `M_i` (`n1 × n2_i`) from `N` related sources, recovers a
//! shared column factor `U_g` and per-source unique column factors `U_l,i`
//! with `U_gᵀ U_l,i = 0` such that `M_i ≈ U_g V_g,iᵀ + U_l,i V_l,iᵀ`.
//!
//! ```
//! use hmf::{fit, generate_instance, FitConfig, HyperParams, SynthConfig};
//!
//! let synth = SynthConfig::uniform(12, 15, 3, 2, 2, 7).with_unit_spectrum();
//! let (obs, truth) = generate_instance(&synth).unwrap();
//! let mut params = HyperParams::uniform(2, 2, 3);
//! params.max_iters = 50;
//! let mut config = FitConfig::new(params);
//! config.reference = Some(truth);
//! let (_state, trace) = fit(&obs, &config).unwrap();
//! assert_eq!(trace.records.len(), 51);
//! ```

pub mod benchmarks;
pub mod embed;
pub mod error;
pub mod io;
pub mod linalg;
pub mod losses;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod solver;
pub mod synth;

pub use error::{HmfError, Result};
pub use matrix::DenseMatrix;
pub use model::{
    validate, FactorState, FitTrace, GroundTruth, HyperParams, LocalFactors, LossKind, ObservationMask,
    ObservationSet, SourceObservation, StepsizePolicy, TraceRecord, Violation,
};
pub use solver::{fit, Execution, FitConfig};
pub use synth::{apply_missingness, generate_instance, SynthConfig};
