//! Audit budgeting for query-access tests against a priced API.

use anyhow::{ensure, Result};
use serde::Serialize;

/// Pricing and volume for a planned batch of query-test sequences.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct CostModel {
    /// Currency per 1M input tokens.
    pub input_rate: f64,
    /// Currency per 1M output tokens.
    pub output_rate: f64,
    /// Number of scored sequences, in millions.
    pub n_sequences: f64,
    /// Tokens per sequence.
    pub seq_len: usize,
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.input_rate >= 0.0 && self.input_rate.is_finite(),
            "input rate must be a finite non-negative number"
        );
        ensure!(
            self.output_rate >= 0.0 && self.output_rate.is_finite(),
            "output rate must be a finite non-negative number"
        );
        ensure!(
            self.n_sequences >= 0.0 && self.n_sequences.is_finite(),
            "sequence count must be a finite non-negative number"
        );
        ensure!(self.seq_len >= 2, "sequences must have at least 2 tokens");
        Ok(())
    }
}

/// Cost of scoring every token of every sequence one position at a time:
/// position i resubmits i tokens of input and buys one output token, so a
/// length-L sequence costs sum(1..=L-1) input tokens and L-1 output tokens.
pub fn estimate_query_cost(c: &CostModel) -> Result<f64> {
    c.validate()?;
    let l = c.seq_len as f64;
    let input_tokens = l * (l - 1.0) / 2.0;
    let output_tokens = l - 1.0;
    Ok(c.input_rate * c.n_sequences * input_tokens + c.output_rate * c.n_sequences * output_tokens)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn published_price_point() {
        let c = CostModel {
            input_rate: 0.40,
            output_rate: 1.60,
            n_sequences: 8.0,
            seq_len: 8,
        };
        let cost = estimate_query_cost(&c).unwrap();
        assert!((cost - 179.20).abs() < 1e-9, "cost {cost}");
        assert_eq!(format!("{cost:.2}"), "179.20");
    }

    #[test]
    fn zero_rates_cost_nothing() {
        let c = CostModel {
            input_rate: 0.0,
            output_rate: 0.0,
            n_sequences: 8.0,
            seq_len: 8,
        };
        assert_eq!(estimate_query_cost(&c).unwrap(), 0.0);
    }

    #[test]
    fn shortest_sequence_hand_value() {
        let c = CostModel {
            input_rate: 1.0,
            output_rate: 1.0,
            n_sequences: 1.0,
            seq_len: 2,
        };
        assert_eq!(estimate_query_cost(&c).unwrap(), 2.0);
    }

    #[test]
    fn invalid_models_are_rejected() {
        let good = CostModel {
            input_rate: 1.0,
            output_rate: 1.0,
            n_sequences: 1.0,
            seq_len: 2,
        };
        for bad in [
            CostModel { input_rate: -0.1, ..good },
            CostModel { output_rate: f64::NAN, ..good },
            CostModel { n_sequences: f64::INFINITY, ..good },
            CostModel { seq_len: 1, ..good },
        ] {
            assert!(estimate_query_cost(&bad).is_err());
        }
    }
}
