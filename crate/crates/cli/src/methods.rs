//! Method labels: each label pins the loss mode, the per-step sampling
//! strategy, and whether training draws students from a narrowed list.

use anyhow::Result;
use enas_core::{LossMode, SamplingStrategy};

use crate::common::config_error;

/// Everything a method label determines.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Method {
    pub label: &'static str,
    pub loss_mode: LossMode,
    pub sampling: SamplingStrategy,
    /// Students are drawn from a narrowed candidate file.
    pub narrowed: bool,
    /// Trains one fixed architecture instead of a shared network.
    pub single: bool,
}

pub const METHODS: &[Method] = &[
    Method {
        label: "matchnas",
        loss_mode: LossMode::MatchNas,
        sampling: SamplingStrategy::Spos,
        narrowed: false,
        single: false,
    },
    Method {
        label: "spos",
        loss_mode: LossMode::SupervisedNas,
        sampling: SamplingStrategy::Spos,
        narrowed: false,
        single: false,
    },
    Method {
        label: "spos+fixmatch",
        loss_mode: LossMode::NaiveSslNas,
        sampling: SamplingStrategy::Spos,
        narrowed: false,
        single: false,
    },
    Method {
        label: "fixmatch-single",
        loss_mode: LossMode::FixmatchSingle,
        sampling: SamplingStrategy::Spos,
        narrowed: false,
        single: true,
    },
    Method {
        label: "supervised-single",
        loss_mode: LossMode::SupervisedSingle,
        sampling: SamplingStrategy::Spos,
        narrowed: false,
        single: true,
    },
    Method {
        label: "matchnas-narrow",
        loss_mode: LossMode::MatchNas,
        sampling: SamplingStrategy::Spos,
        narrowed: true,
        single: false,
    },
    Method {
        label: "matchnas-sandwich",
        loss_mode: LossMode::MatchNas,
        sampling: SamplingStrategy::Sandwich,
        narrowed: false,
        single: false,
    },
];

pub fn lookup(label: &str) -> Result<Method> {
    match METHODS.iter().find(|m| m.label == label) {
        Some(m) => Ok(*m),
        None => {
            let known: Vec<&str> = METHODS.iter().map(|m| m.label).collect();
            Err(config_error(format!(
                "unknown method `{label}`; known methods: {}",
                known.join(", ")
            )))
        }
    }
}
