pub mod corpus;
pub mod error;
pub mod lottery;
pub mod model;
pub mod ops;
pub mod pruning;
pub mod report;
pub mod rng;
pub mod store;
pub mod synthetic;
pub mod tape;
pub mod tensor;
pub mod transfer;
pub mod vocab;

pub use error::{Error, ErrorKind, Result};
pub use lottery::{InitStrategy, RoundRecord, TrainConfig};
pub use model::{ModelConfig, ParamSet};
pub use pruning::{KeepRule, MaskSet, PruneConfig};
pub use store::Ticket;
pub use tape::{GradTape, Gradients, Var};
pub use tensor::{Scalar, Tensor};
pub use transfer::TransferStrategy;
