//! Information-theoretic annotation cost of classification and correction
//! queries.
//!
//! Picking one of `L` options costs `log2 L` bits. A correction query is a
//! binary question when the shown pseudo label is right (probability `p`)
//! and an `L`-ary one otherwise, so its expected cost is
//! `p + (1 - p) log2 L`.

use thiserror::Error;

use crate::model::BudgetLedger;

#[derive(Debug, Error, PartialEq)]
pub enum CostError {
    #[error("number of classes must be at least 2, got {0}")]
    InvalidL(usize),
    #[error("pseudo-label accuracy must lie in [0, 1], got {0}")]
    InvalidP(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostParams {
    pub num_classes: usize,
    pub pseudo_accuracy: f64,
}

impl CostParams {
    pub fn new(num_classes: usize, pseudo_accuracy: f64) -> Result<Self, CostError> {
        check_l(num_classes)?;
        check_p(pseudo_accuracy)?;
        Ok(Self {
            num_classes,
            pseudo_accuracy,
        })
    }
}

fn check_l(l: usize) -> Result<(), CostError> {
    if l < 2 {
        return Err(CostError::InvalidL(l));
    }
    Ok(())
}

fn check_p(p: f64) -> Result<(), CostError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(CostError::InvalidP(p));
    }
    Ok(())
}

pub fn classification_cost(l: usize) -> Result<f64, CostError> {
    check_l(l)?;
    Ok((l as f64).log2())
}

pub fn correction_cost(l: usize, p: f64) -> Result<f64, CostError> {
    let cls = classification_cost(l)?;
    check_p(p)?;
    Ok(p + (1.0 - p) * cls)
}

/// `1 - C_cor / C_cls`, evaluated through the closed form `(1 - 1/log2 L) p`.
pub fn cost_saving_rate(l: usize, p: f64) -> Result<f64, CostError> {
    let cls = classification_cost(l)?;
    check_p(p)?;
    Ok((1.0 - 1.0 / cls) * p)
}

/// Realized cost of a ledger: 1 bit per confirmation, `log2 L` per correction.
pub fn normalized_click_cost(ledger: &BudgetLedger, l: usize) -> f64 {
    ledger.confirmations as f64 + ledger.corrections as f64 * (l as f64).log2()
}

/// Bits charged for a single answered correction query.
pub fn answer_bits(confirmed: bool, l: usize) -> f64 {
    if confirmed {
        1.0
    } else {
        (l as f64).log2()
    }
}
