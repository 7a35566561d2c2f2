pub mod histlog;
pub mod nncore;
pub mod probes;
pub mod synthlang;
