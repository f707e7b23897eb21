//! One module per subcommand.

pub mod compare;
pub mod eval;
pub mod gen_data;
pub mod report;
pub mod search;
pub mod train;
