//! Context values and the weighted-sum risk metric.

use alloc::collections::BTreeMap;
use alloc::string::String;

use crate::policy::PolicyError;

/// One sampled context variable (time, location, ...).
#[derive(Clone, Debug, PartialEq)]
pub struct ContextValue {
    pub name: String,
    pub value: f64,
    /// Monotonic acquisition time, non-decreasing per name.
    pub timestamp: u64,
}

impl ContextValue {
    pub fn new(name: impl Into<String>, value: f64, timestamp: u64) -> Self {
        ContextValue { name: name.into(), value, timestamp }
    }
}

/// Per-variable weights and the bound a request's risk must not exceed.
#[derive(Clone, Debug, PartialEq)]
pub struct RiskPolicy {
    pub weights: BTreeMap<String, f64>,
    pub threshold: f64,
}

impl RiskPolicy {
    /// Fails unless the threshold and all weights are finite.
    pub fn new(weights: impl IntoIterator<Item = (String, f64)>, threshold: f64) -> Result<Self, PolicyError> {
        let weights: BTreeMap<String, f64> = weights.into_iter().collect();
        if !threshold.is_finite() || weights.values().any(|w| !w.is_finite()) {
            return Err(PolicyError::InvariantViolation("risk weights and threshold must be finite"));
        }
        Ok(RiskPolicy { weights, threshold })
    }

    pub fn covers(&self, name: &str) -> bool {
        self.weights.contains_key(name)
    }
}

/// Weighted sum of the context values. An empty vector scores 0.
pub fn risk_score(contexts: &[ContextValue], risk: &RiskPolicy) -> Result<f64, PolicyError> {
    contexts.iter().try_fold(0.0, |acc, c| {
        let w = risk.weights.get(c.name.as_str()).ok_or_else(|| PolicyError::UnknownContextVariable(c.name.clone()))?;
        Ok(acc + w * c.value)
    })
}
