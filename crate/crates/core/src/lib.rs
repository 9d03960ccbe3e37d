//! Profit-maximizing admission and routing for parallel multi-server
//! queues with exponential patience and an external overflow node.

pub mod bench;
pub mod error;
pub mod exec;
pub mod index;
pub mod instance;
pub mod mdp;
pub mod policy;
pub mod queueing;
pub mod report;
pub mod roots;
pub mod sim;
pub mod split;

pub use error::{Error, Result};
pub use exec::ExecMode;
pub use instance::Instance;
pub use queueing::{AbandonmentEnv, DeadlineRegime, NodeParams};
