//! Daily top-k buy-hold-sell evaluation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::{Result, SsptError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BacktestConfig {
    pub k: usize,
    /// Daily risk-free return.
    pub risk_free: f64,
    pub annualize: bool,
    pub periods_per_year: f64,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        BacktestConfig {
            k: 5,
            risk_free: 0.0,
            annualize: true,
            periods_per_year: 252.0,
        }
    }
}

/// Indices of the `k` largest predictions, best first; equal predictions
/// prefer the lower index.
pub fn select_topk(predictions: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > predictions.len() {
        return Err(SsptError::Config(format!(
            "k = {k} must be between 1 and the universe size {}",
            predictions.len()
        )));
    }
    if predictions.iter().any(|p| p.is_nan()) {
        return Err(SsptError::Data("NaN prediction".into()));
    }
    let mut idx: Vec<usize> = (0..predictions.len()).collect();
    idx.sort_by(|&a, &b| predictions[b].total_cmp(&predictions[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// Equal-weight portfolio return of the selected stocks.
pub fn day_return(selected: &[usize], returns: &[f64]) -> f64 {
    selected.iter().map(|&i| returns[i]).sum::<f64>() / selected.len() as f64
}

/// `(mean - rf) / sample std`, times `sqrt(periods_per_year)` when annualized.
pub fn sharpe(returns: &[f64], risk_free: f64, annualize: bool, periods_per_year: f64) -> Result<f64> {
    if returns.len() < 2 {
        return Err(SsptError::Data(format!(
            "Sharpe ratio needs at least two days, got {}",
            returns.len()
        )));
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let std = var.sqrt();
    // spreads this small are rounding noise around a constant series
    if std <= 1e-15 * mean.abs().max(1e-300) || std == 0.0 {
        return Err(SsptError::DegenerateReturns);
    }
    let sr = (mean - risk_free) / std;
    Ok(if annualize { sr * periods_per_year.sqrt() } else { sr })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BacktestReport {
    pub days: usize,
    pub k: usize,
    /// Sum over days of the summed returns of the selected stocks.
    pub irr_sum: f64,
    /// Sum over days of the equal-weight portfolio return.
    pub irr_mean: f64,
    pub sharpe: f64,
    pub annualized: bool,
    pub selections: Vec<Vec<usize>>,
    #[serde(skip)]
    pub day_returns: Vec<f64>,
    #[serde(skip)]
    pub day_sums: Vec<f64>,
}

impl BacktestReport {
    /// Rebuilds the metrics from stored selections and the realized returns.
    pub fn from_selections(selections: Vec<Vec<usize>>, returns: &[Vec<f64>], cfg: &BacktestConfig) -> Result<Self> {
        if selections.len() != returns.len() {
            return Err(SsptError::Data(format!(
                "{} selection days but {} return days",
                selections.len(),
                returns.len()
            )));
        }
        let mut day_returns = Vec::with_capacity(returns.len());
        let mut day_sums = Vec::with_capacity(returns.len());
        for (sel, r) in selections.iter().zip(returns) {
            if sel.is_empty() || sel.iter().any(|&i| i >= r.len()) {
                return Err(SsptError::Data(format!("invalid selection {sel:?} for {} stocks", r.len())));
            }
            day_sums.push(sel.iter().map(|&i| r[i]).sum::<f64>());
            day_returns.push(day_return(sel, r));
        }
        let k = selections.first().map_or(cfg.k, Vec::len);
        Ok(BacktestReport {
            days: returns.len(),
            k,
            irr_sum: day_sums.iter().sum(),
            irr_mean: day_returns.iter().sum(),
            sharpe: sharpe(&day_returns, cfg.risk_free, cfg.annualize, cfg.periods_per_year)?,
            annualized: cfg.annualize,
            selections,
            day_returns,
            day_sums,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// `day,portfolio_return,cumulative_irr`; the cumulative column is the
    /// running `irr_sum`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("day,portfolio_return,cumulative_irr\n");
        let mut cum = 0.0;
        for (d, (r, s)) in self.day_returns.iter().zip(&self.day_sums).enumerate() {
            cum += s;
            writeln!(out, "{d},{r},{cum}").unwrap();
        }
        out
    }
}

/// Top-k backtest over days of predictions and realized next-day returns.
pub fn run_backtest(predictions: &[Vec<f64>], returns: &[Vec<f64>], cfg: &BacktestConfig) -> Result<BacktestReport> {
    if predictions.len() != returns.len() {
        return Err(SsptError::Data(format!(
            "{} prediction days but {} return days",
            predictions.len(),
            returns.len()
        )));
    }
    let selections = predictions
        .iter()
        .zip(returns)
        .map(|(p, r)| {
            if p.len() != r.len() {
                return Err(SsptError::Data(format!("{} predictions for {} stocks", p.len(), r.len())));
            }
            select_topk(p, cfg.k)
        })
        .collect::<Result<Vec<_>>>()?;
    BacktestReport::from_selections(selections, returns, cfg)
}

/// Equal-weight portfolio of every stock, every day.
pub fn market_baseline(returns: &[Vec<f64>], cfg: &BacktestConfig) -> Result<BacktestReport> {
    if returns.is_empty() {
        return Err(SsptError::Data("empty split".into()));
    }
    let selections = returns.iter().map(|r| (0..r.len()).collect()).collect();
    BacktestReport::from_selections(selections, returns, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain() -> BacktestConfig {
        BacktestConfig {
            k: 1,
            annualize: false,
            ..BacktestConfig::default()
        }
    }

    #[test]
    fn topk_cases() {
        assert_eq!(select_topk(&[0.3, 0.1, 0.5], 1).unwrap(), [2]);
        assert_eq!(select_topk(&[0.2, 0.2, 0.1], 1).unwrap(), [0]);
        let mut all = select_topk(&[0.3, 0.1, 0.5], 3).unwrap();
        all.sort();
        assert_eq!(all, [0, 1, 2]);
        assert!(select_topk(&[0.3], 2).is_err());
    }

    #[test]
    fn day_return_cases() {
        assert_eq!(day_return(&[0], &[0.02]), 0.02);
        assert_eq!(day_return(&[0, 1], &[0.02, -0.02]), 0.0);
    }

    #[test]
    fn sharpe_cases() {
        let sr = sharpe(&[0.02, 0.0], 0.0, false, 252.0).unwrap();
        assert!((sr - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(matches!(sharpe(&[0.01; 4], 0.0, false, 252.0), Err(SsptError::DegenerateReturns)));
        let r = [0.01, 0.03, -0.02];
        let mean = r.iter().sum::<f64>() / 3.0;
        assert!(sharpe(&r, mean, true, 252.0).unwrap().abs() < 1e-12);
        let annual = sharpe(&r, 0.0, true, 252.0).unwrap();
        assert!((annual - sharpe(&r, 0.0, false, 252.0).unwrap() * 252f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn baseline_single_stock_follows_the_stock() {
        let returns = vec![vec![0.01], vec![-0.02], vec![0.03]];
        let rep = market_baseline(&returns, &plain()).unwrap();
        assert_eq!(rep.day_returns, [0.01, -0.02, 0.03]);
        assert!((rep.irr_sum - 0.02).abs() < 1e-15);
    }

    #[test]
    fn report_formats() {
        let returns = vec![vec![0.01, 0.02], vec![-0.02, 0.04]];
        let preds = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let rep = run_backtest(&preds, &returns, &plain()).unwrap();
        assert_eq!(rep.selections, [[0], [1]]);
        assert_eq!(rep.to_csv(), "day,portfolio_return,cumulative_irr\n0,0.01,0.01\n1,0.04,0.05\n");
        let json: serde_json::Value = serde_json::from_str(&rep.to_json()).unwrap();
        for field in ["days", "k", "irr_sum", "irr_mean", "sharpe", "annualized", "selections"] {
            assert!(json.get(field).is_some(), "{field}");
        }
        let again = BacktestReport::from_selections(rep.selections.clone(), &returns, &plain()).unwrap();
        assert_eq!(again, rep);
    }
}
