use serde::{Deserialize, Serialize};

/// Where to find the completion text and token usage in a provider response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WireFormat {
    pub content_pointer: String,
    pub input_tokens_pointer: String,
    pub output_tokens_pointer: String,
}

impl Default for WireFormat {
    fn default() -> Self {
        Self {
            content_pointer: "/choices/0/message/content".into(),
            input_tokens_pointer: "/usage/prompt_tokens".into(),
            output_tokens_pointer: "/usage/completion_tokens".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay_ms: 500,
            max_delay_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    /// Delay before attempt `attempt + 1`, doubling from the base.
    pub fn backoff_ms(&self, attempt: u32) -> u64 {
        let factor = 1u64.checked_shl(attempt.saturating_sub(1)).unwrap_or(u64::MAX);
        self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderConfig {
    pub endpoint: String,
    pub model_id: String,
    pub max_in_flight: usize,
    pub requests_per_minute: u32,
    pub price_per_1k_input_tokens: f64,
    pub price_per_1k_output_tokens: f64,
    pub budget_cap: f64,
    /// Name of the environment variable holding the API key, if any.
    #[serde(default)]
    pub api_key_env: Option<String>,
    // Decoding is pinned for reproducibility.
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_output_tokens")]
    pub max_output_tokens: u32,
    #[serde(default = "default_timeout")]
    pub request_timeout_secs: u64,
    #[serde(default)]
    pub wire: WireFormat,
    #[serde(default)]
    pub retry: RetryPolicy,
}

fn default_max_output_tokens() -> u32 {
    64
}

fn default_timeout() -> u64 {
    60
}

impl ProviderConfig {
    /// A config for tests and dry runs: mock endpoint, generous limits.
    pub fn mock(model_id: impl Into<String>) -> Self {
        Self {
            endpoint: "mock://".into(),
            model_id: model_id.into(),
            max_in_flight: 8,
            requests_per_minute: 600_000,
            price_per_1k_input_tokens: 0.03,
            price_per_1k_output_tokens: 0.06,
            budget_cap: f64::INFINITY,
            api_key_env: None,
            temperature: 0.0,
            max_output_tokens: default_max_output_tokens(),
            request_timeout_secs: default_timeout(),
            wire: WireFormat::default(),
            retry: RetryPolicy {
                base_delay_ms: 1,
                max_delay_ms: 10,
                ..RetryPolicy::default()
            },
        }
    }

    /// Every violated constraint, as `field: message`.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.endpoint.trim().is_empty() {
            out.push("endpoint: must not be empty".into());
        }
        if self.model_id.trim().is_empty() {
            out.push("model_id: must not be empty".into());
        }
        if self.max_in_flight == 0 {
            out.push("max_in_flight: must be positive".into());
        }
        if self.requests_per_minute == 0 {
            out.push("requests_per_minute: must be positive".into());
        }
        for (name, v) in [
            ("price_per_1k_input_tokens", self.price_per_1k_input_tokens),
            ("price_per_1k_output_tokens", self.price_per_1k_output_tokens),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                out.push(format!("{name}: must be a finite non-negative price, got {v}"));
            }
        }
        if self.budget_cap.is_nan() || self.budget_cap < 0.0 {
            out.push(format!("budget_cap: must be >= 0, got {}", self.budget_cap));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            out.push(format!("temperature: must be >= 0, got {}", self.temperature));
        }
        if self.max_output_tokens == 0 {
            out.push("max_output_tokens: must be positive".into());
        }
        if self.retry.max_attempts == 0 {
            out.push("retry.max_attempts: must be positive".into());
        }
        if let Some(var) = &self.api_key_env {
            if var.trim().is_empty() {
                out.push("api_key_env: must name a variable".into());
            }
        }
        out
    }

    pub fn cost_of(&self, input_tokens: u64, output_tokens: u64) -> f64 {
        (input_tokens as f64 * self.price_per_1k_input_tokens + output_tokens as f64 * self.price_per_1k_output_tokens)
            / 1000.0
    }
}

/// Linear token-priced spend for `n_records`.
///
/// Panics on negative token means.
pub fn estimate_cost(n_records: u64, mean_tokens_in: f64, mean_tokens_out: f64, provider: &ProviderConfig) -> f64 {
    assert!(
        mean_tokens_in >= 0.0 && mean_tokens_out >= 0.0,
        "token means must be non-negative"
    );
    let per_record = (mean_tokens_in * provider.price_per_1k_input_tokens
        + mean_tokens_out * provider.price_per_1k_output_tokens)
        / 1000.0;
    n_records as f64 * per_record
}

/// Mean input tokens that make `n_records` cost `total`, holding output fixed.
pub fn calibrate_input_tokens(n_records: u64, total: f64, mean_tokens_out: f64, provider: &ProviderConfig) -> f64 {
    let per_record = total / n_records as f64;
    (per_record * 1000.0 - mean_tokens_out * provider.price_per_1k_output_tokens) / provider.price_per_1k_input_tokens
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mock_config_is_valid() {
        assert!(ProviderConfig::mock("m").problems().is_empty());
    }

    #[test]
    fn problems_are_all_reported() {
        let mut c = ProviderConfig::mock("m");
        c.max_in_flight = 0;
        c.requests_per_minute = 0;
        c.budget_cap = -1.0;
        let p = c.problems();
        assert_eq!(p.len(), 3, "{p:?}");
        assert!(p[2].starts_with("budget_cap"));
    }

    #[test]
    fn backoff_doubles_and_caps() {
        let r = RetryPolicy::default();
        assert_eq!(r.backoff_ms(1), 500);
        assert_eq!(r.backoff_ms(2), 1000);
        assert_eq!(r.backoff_ms(4), 4000);
        assert_eq!(r.backoff_ms(70), 30_000);
    }

    #[test]
    fn estimate_is_linear() {
        let c = ProviderConfig::mock("m");
        assert_eq!(estimate_cost(0, 500.0, 5.0, &c), 0.0);
        let one = estimate_cost(1000, 500.0, 5.0, &c);
        assert!((estimate_cost(2000, 500.0, 5.0, &c) - 2.0 * one).abs() < 1e-9);
        assert!((one - 1000.0 * (500.0 * 0.03 + 5.0 * 0.06) / 1000.0).abs() < 1e-9);
    }

    #[test]
    fn calibration_inverts_estimate() {
        let c = ProviderConfig::mock("m");
        let tin = calibrate_input_tokens(64_000, 4500.0, 5.0, &c);
        assert!((tin - 2333.75).abs() < 1e-9);
        assert!((estimate_cost(64_000, tin, 5.0, &c) - 4500.0).abs() < 1e-6);
    }

    #[test]
    fn strict_keys() {
        let text = r#"
            endpoint = "https://x"
            model_id = "m"
            max_in_flight = 2
            requests_per_minute = 60
            price_per_1k_input_tokens = 0.03
            price_per_1k_output_tokens = 0.06
            budget_cap = 10.0
            tempreature = 0.5
        "#;
        assert!(toml::from_str::<ProviderConfig>(text).is_err());
    }
}
