//! Library side of the `restorelab` command: the subcommand
//! implementations and the HTTP API the scene editor talks to.

pub mod commands;
pub mod serve;
