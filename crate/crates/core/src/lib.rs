// SPDX-License-Identifier: Apache-2.0

#![allow(clippy::needless_range_loop)]

pub mod decode;
pub mod dpo;
pub mod error;
pub mod mathutil;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod prefgen;
pub mod scenegen;
pub mod seed;
pub mod tokenization;

pub use error::{Error, Result};
