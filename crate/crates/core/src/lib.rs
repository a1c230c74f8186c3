// SPDX-License-Identifier: MIT OR Apache-2.0

pub mod archive;
pub mod attribution;
pub mod cli;
pub mod concepts;
pub mod detection;
pub mod distributions;
pub mod error;
pub mod numeric;
pub mod report;
pub mod synth;
