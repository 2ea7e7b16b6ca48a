//! Gradient-check suites over every trainable network.

use std::fmt;

use crate::autodiff::GradCheckReport;
use crate::error::Result;
use crate::{correction, forward, repr};

pub const TOLERANCE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Encoder,
    Decoder,
    Interaction,
    NoInteraction,
    Correction,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::Encoder,
        Suite::Decoder,
        Suite::Interaction,
        Suite::NoInteraction,
        Suite::Correction,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Encoder => "encoder",
            Suite::Decoder => "decoder",
            Suite::Interaction => "interaction-net",
            Suite::NoInteraction => "no-interaction-net",
            Suite::Correction => "correction",
        }
    }

    pub fn run(self, seed: u64) -> Result<GradCheckReport> {
        match self {
            Suite::Encoder => repr::check_encoder_gradients(seed),
            Suite::Decoder => repr::check_decoder_gradients(seed),
            Suite::Interaction => forward::check_gradients(seed, true),
            Suite::NoInteraction => forward::check_gradients(seed, false),
            Suite::Correction => correction::check_gradients(seed),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub suite: Suite,
    pub seed: u64,
    pub report: GradCheckReport,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < TOLERANCE
    }
}

/// Every suite at every seed.
pub fn run_all(seeds: &[u64]) -> Result<Vec<SuiteResult>> {
    let mut out = Vec::new();
    for suite in Suite::ALL {
        for &seed in seeds {
            out.push(SuiteResult {
                suite,
                seed,
                report: suite.run(seed)?,
            });
        }
    }
    Ok(out)
}
