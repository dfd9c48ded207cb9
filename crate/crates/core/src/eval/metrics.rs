use serde::{Deserialize, Serialize};
use tracing::warn;

use super::{EvalError, Result};

pub const MAPE_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub mae: f64,
    /// Percent.
    pub mape: f64,
    pub r2: f64,
    /// Targets whose MAPE denominator hit the epsilon guard.
    pub mape_guarded: usize,
}

fn check(y: &[f64], yhat: &[f64]) -> Result<()> {
    if y.len() != yhat.len() {
        return Err(EvalError::LengthMismatch {
            y: y.len(),
            yhat: yhat.len(),
        });
    }
    if y.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(())
}

pub fn mae(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check(y, yhat)?;
    Ok(y.iter().zip(yhat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

fn mape_counted(y: &[f64], yhat: &[f64]) -> Result<(f64, usize)> {
    check(y, yhat)?;
    let mut guarded = 0;
    let sum: f64 = y
        .iter()
        .zip(yhat)
        .map(|(a, b)| {
            if a.abs() < MAPE_EPSILON {
                guarded += 1;
            }
            (a - b).abs() / a.abs().max(MAPE_EPSILON)
        })
        .sum();
    if guarded > 0 {
        warn!(guarded, "MAPE denominator guard triggered");
    }
    Ok((100.0 * sum / y.len() as f64, guarded))
}

pub fn mape(y: &[f64], yhat: &[f64]) -> Result<f64> {
    mape_counted(y, yhat).map(|(m, _)| m)
}

/// Coefficient of determination with the mean of `y` as the reference.
/// Constant `y` gives 0 when every residual is 0 and an error otherwise.
pub fn r2(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check(y, yhat)?;
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_res: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum();
    let ss_tot: f64 = y.iter().map(|a| (a - mean) * (a - mean)).sum();
    if ss_tot == 0.0 {
        return if ss_res == 0.0 {
            Ok(0.0)
        } else {
            Err(EvalError::UndefinedR2)
        };
    }
    Ok(1.0 - ss_res / ss_tot)
}

pub fn compute_metrics(y: &[f64], yhat: &[f64]) -> Result<Metrics> {
    let (mape, mape_guarded) = mape_counted(y, yhat)?;
    Ok(Metrics {
        n: y.len(),
        mae: mae(y, yhat)?,
        mape,
        r2: r2(y, yhat)?,
        mape_guarded,
    })
}
