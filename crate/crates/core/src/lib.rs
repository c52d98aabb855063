#![no_std]
//! Core numerics for probabilistic catalog inference from survey images.
//!
//! The crate needs only `alloc`. It holds the generative sky model, the
//! variational objective with exact derivatives, the trust-region Newton
//! optimizer, scheduling arithmetic, spatial ordering, catalog scoring and
//! prior estimation. File formats, data distribution and the command line
//! live in the `celeste-mini` crate.

// NaN-rejecting `!(x > 0.0)` checks and index loops over parallel arrays
// are deliberate.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::type_complexity)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod elbo;
pub mod inference;
pub mod jet;
pub mod priors_fit;
pub mod profiles;
pub mod schedule;
pub mod sky;
pub mod spatial;
pub mod trust_region;
pub mod validate;
