//! Subcommand implementations.

pub mod eval;
pub mod gen_task;
pub mod init_model;
pub mod mix;
pub mod quantize;
pub mod report;
pub mod rescore;
pub mod train_selector;

pub use eval::EvalArgs;
pub use gen_task::GenTaskArgs;
pub use init_model::InitModelArgs;
pub use mix::MixArgs;
pub use quantize::QuantizeArgs;
pub use report::ReportArgs;
pub use rescore::RescoreArgs;
pub use train_selector::TrainSelectorArgs;
