//! Learning vector fields with neural networks that satisfy linear
//! differential-operator constraints by construction.
//!
//! A constraint `C[f] = 0` is enforced by writing the field as `f = G[g]` for
//! an unconstrained network potential `g` and an operator `G` with `C·G ≡ 0`.
//! [`diffops`] holds the operator algebra, [`ansatz`] finds `G` for a given
//! `C`, [`autodiff`] supplies the input and parameter derivatives, and
//! [`training`] fits the resulting models.

pub mod ansatz;
pub mod autodiff;
pub mod diffops;
pub mod error;
pub mod fields;
pub mod model;
pub mod network;
pub mod study;
pub mod training;

pub use diffops::{DiffMonomial, OperatorMatrix, OperatorPoly};
pub use error::{Error, Result};
pub use fields::Dataset;
pub use model::{AffineTail, ConstrainedModel, FieldModel, StandardModel};
pub use network::{Activation, Mlp, MlpSpec, ParamVector};
pub use training::{TrainConfig, TrainReport};
