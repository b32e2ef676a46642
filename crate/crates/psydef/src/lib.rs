//! File formats, live HTTP backends, checkpoints, reports and the staged
//! pipeline around `psydef-core`.

// negated float comparisons deliberately reject NaN
#![allow(clippy::too_many_arguments, clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod io;
pub mod live;
pub mod manifest;
pub mod pipeline;
pub mod report;
