use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::budget::{flops_estimate, BudgetLedger};

/// Sample-quality and geometry numbers for one trained generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub n_samples: u64,
    pub outlier_rate: f64,
    /// Log-density threshold used for outliers.
    pub outlier_threshold: f64,
    pub energy_distance: f64,
    /// Mean angle (radians) between the one-step displacement and the
    /// reference flow's ODE displacement from the same noise.
    pub mean_angular_error: f64,
    pub straightness: f64,
    pub lipschitz_estimate: f64,
    pub nfe_per_sample: u64,
}

impl EvalMetrics {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.outlier_rate,
            self.outlier_threshold,
            self.energy_distance,
            self.mean_angular_error,
            self.straightness,
            self.lipschitz_estimate,
        ];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("evaluation metrics".into()));
        }
        if !(0.0..=1.0).contains(&self.outlier_rate) {
            return Err(Error::InvalidArgument(format!("outlier rate {} outside [0, 1]", self.outlier_rate)));
        }
        Ok(())
    }
}

/// Result for one method and seed; failed runs carry the error instead of metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub seed: u64,
    pub config_hash: String,
    pub metrics: Option<EvalMetrics>,
    pub error: Option<String>,
    pub budget: BudgetLedger,
}

impl EvalReport {
    pub fn is_ok(&self) -> bool {
        self.metrics.is_some()
    }

    /// Flat `key = value` text, one entry per line in a fixed order.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        out += &format!("method = {}\n", self.method);
        out += &format!("seed = {}\n", self.seed);
        out += &format!("config_hash = {}\n", self.config_hash);
        match (&self.metrics, &self.error) {
            (Some(m), _) => {
                out += "status = ok\n";
                out += &format!("n_samples = {}\n", m.n_samples);
                out += &format!("outlier_rate = {:?}\n", m.outlier_rate);
                out += &format!("outlier_threshold = {:?}\n", m.outlier_threshold);
                out += &format!("energy_distance = {:?}\n", m.energy_distance);
                out += &format!("mean_angular_error = {:?}\n", m.mean_angular_error);
                out += &format!("straightness = {:?}\n", m.straightness);
                out += &format!("lipschitz_estimate = {:?}\n", m.lipschitz_estimate);
                out += &format!("nfe_per_sample = {}\n", m.nfe_per_sample);
            }
            (None, err) => {
                out += "status = failed\n";
                let msg = err.as_deref().unwrap_or("unknown").replace('\n', " ");
                out += &format!("error = {msg}\n");
            }
        }
        out += &self.budget.to_kv("budget.");
        let flops = flops_estimate(&self.budget, 2.0);
        for (p, f) in &flops.per_phase {
            out += &format!("flops.{} = {:?}\n", p.name(), f);
        }
        out += &format!("flops.total = {:?}\n", flops.total);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::budget::{Phase, FLOW_STEP_COST};

    fn metrics() -> EvalMetrics {
        EvalMetrics {
            n_samples: 10,
            outlier_rate: 0.1,
            outlier_threshold: -12.0,
            energy_distance: 0.02,
            mean_angular_error: 0.3,
            straightness: 0.01,
            lipschitz_estimate: 1.5,
            nfe_per_sample: 1,
        }
    }

    #[test]
    fn kv_contains_every_field() {
        let mut budget = BudgetLedger::new(100.0);
        budget.charge_train(Phase::Stage1Train, 2, 4, FLOW_STEP_COST);
        let r = EvalReport {
            method: "re_meanflow".into(),
            seed: 3,
            config_hash: "ab".into(),
            metrics: Some(metrics()),
            error: None,
            budget,
        };
        let kv = r.to_kv();
        for key in [
            "status = ok",
            "outlier_rate = 0.1",
            "energy_distance = 0.02",
            "flops.stage1_train = 2400.0",
            "budget.stage1_train.train_steps = 2",
        ] {
            assert!(kv.contains(key), "{key} missing from\n{kv}");
        }
        assert!(kv.lines().all(|l| l.contains(" = ")));
    }

    #[test]
    fn failed_report_and_validation() {
        let r = EvalReport {
            method: "m".into(),
            seed: 0,
            config_hash: String::new(),
            metrics: None,
            error: Some("boom\nsecond line".into()),
            budget: BudgetLedger::new(1.0),
        };
        assert!(r.to_kv().contains("status = failed\nerror = boom second line\n"));
        assert!(metrics().validate().is_ok());
        assert!(EvalMetrics { outlier_rate: 1.5, ..metrics() }.validate().is_err());
        assert!(EvalMetrics { straightness: f64::NAN, ..metrics() }.validate().is_err());
    }
}
