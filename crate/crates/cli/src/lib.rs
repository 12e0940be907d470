//! Experiment harness for `bodyschema`: configuration, result files and one
//! module per subcommand. The `bodyschema` binary is a thin clap front end.

pub mod commands;
pub mod error;
pub mod experiment;
pub mod output;
