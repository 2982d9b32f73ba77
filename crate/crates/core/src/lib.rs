//! Federated learning over lossy wireless uplinks.
//!
//! Clients send binary32 gradients over a Rayleigh-fading QAM link. The
//! approximate scheme skips FEC and retransmission and masks the exponent MSB
//! of every received word. It is compared against an exact FEC+ARQ baseline
//! (ECRT) and against naive erroneous delivery.

pub mod channel;
pub mod dataset;
pub mod error;
pub mod fl;
pub mod gradbits;
pub mod metrics;
pub mod modem;
pub mod nn;
pub mod seed;
pub mod transport;

pub use error::{Error, Result};
