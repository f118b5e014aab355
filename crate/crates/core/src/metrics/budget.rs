use serde::{Deserialize, Serialize};

/// Forward + backward per sample for a flow-matching step.
pub const FLOW_STEP_COST: PassCounts = PassCounts { forwards: 1, backwards: 1, jvps: 0 };
/// Forward + JVP + backward per sample for a mean-flow step.
pub const MEANFLOW_STEP_COST: PassCounts = PassCounts { forwards: 1, backwards: 1, jvps: 1 };
/// Extra forwards per sample in a guided mean-flow step.
pub const GUIDED_EXTRA_FORWARDS: u64 = 3;

/// Network passes per training sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassCounts {
    pub forwards: u64,
    pub backwards: u64,
    pub jvps: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Stage1Train,
    ReflowSampling,
    Stage3Train,
    Eval,
}

impl Phase {
    pub const ALL: [Phase; 4] = [Phase::Stage1Train, Phase::ReflowSampling, Phase::Stage3Train, Phase::Eval];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Stage1Train => "stage1_train",
            Phase::ReflowSampling => "reflow_sampling",
            Phase::Stage3Train => "stage3_train",
            Phase::Eval => "eval",
        }
    }
}

/// Per-sample pass counts accumulated in one phase.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseCounts {
    /// Plain forward evaluations outside training (sampling, reflow, eval).
    pub forward_evals: u64,
    pub train_steps: u64,
    pub train_forwards: u64,
    pub train_backwards: u64,
    pub train_jvps: u64,
}

impl PhaseCounts {
    /// Cost in forward-pass units, with backward and JVP passes weighted by
    /// `backward_multiplier`.
    pub fn forward_equivalents(&self, backward_multiplier: f64) -> f64 {
        (self.forward_evals + self.train_forwards) as f64
            + backward_multiplier * (self.train_backwards + self.train_jvps) as f64
    }
}

/// Compute spent by one method, broken down by phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetLedger {
    pub flops_per_forward: f64,
    phases: [PhaseCounts; 4],
}

impl BudgetLedger {
    pub fn new(flops_per_forward: f64) -> Self {
        BudgetLedger { flops_per_forward, phases: [PhaseCounts::default(); 4] }
    }

    fn slot(&mut self, phase: Phase) -> &mut PhaseCounts {
        &mut self.phases[phase as usize]
    }

    pub fn phase(&self, phase: Phase) -> PhaseCounts {
        self.phases[phase as usize]
    }

    pub fn charge_forwards(&mut self, phase: Phase, n: u64) {
        self.slot(phase).forward_evals += n;
    }

    /// `steps` optimizer steps of `batch` samples, each costing `cost` passes.
    pub fn charge_train(&mut self, phase: Phase, steps: u64, batch: u64, cost: PassCounts) {
        let s = self.slot(phase);
        s.train_steps += steps;
        s.train_forwards += steps * batch * cost.forwards;
        s.train_backwards += steps * batch * cost.backwards;
        s.train_jvps += steps * batch * cost.jvps;
    }

    /// Adds every counter of `other` into this ledger.
    pub fn absorb(&mut self, other: &BudgetLedger) {
        for p in Phase::ALL {
            let o = other.phase(p);
            let s = self.slot(p);
            s.forward_evals += o.forward_evals;
            s.train_steps += o.train_steps;
            s.train_forwards += o.train_forwards;
            s.train_backwards += o.train_backwards;
            s.train_jvps += o.train_jvps;
        }
    }

    pub fn forward_evals(&self) -> u64 {
        self.phases.iter().map(|p| p.forward_evals).sum()
    }

    pub fn train_steps(&self) -> u64 {
        self.phases.iter().map(|p| p.train_steps).sum()
    }

    pub fn forward_equivalents(&self, backward_multiplier: f64) -> f64 {
        self.phases.iter().map(|p| p.forward_equivalents(backward_multiplier)).sum()
    }

    /// `key = value` lines, phases in fixed order.
    pub fn to_kv(&self, prefix: &str) -> String {
        let mut out = format!("{prefix}flops_per_forward = {:?}\n", self.flops_per_forward);
        for p in Phase::ALL {
            let c = self.phase(p);
            let n = p.name();
            out += &format!("{prefix}{n}.forward_evals = {}\n", c.forward_evals);
            out += &format!("{prefix}{n}.train_steps = {}\n", c.train_steps);
            out += &format!("{prefix}{n}.train_forwards = {}\n", c.train_forwards);
            out += &format!("{prefix}{n}.train_backwards = {}\n", c.train_backwards);
            out += &format!("{prefix}{n}.train_jvps = {}\n", c.train_jvps);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsBreakdown {
    pub per_phase: Vec<(Phase, f64)>,
    pub total: f64,
}

/// FLOPs per phase: forward-equivalents times the per-forward cost.
pub fn flops_estimate(ledger: &BudgetLedger, backward_multiplier: f64) -> FlopsBreakdown {
    let per_phase: Vec<(Phase, f64)> = Phase::ALL
        .iter()
        .map(|&p| (p, ledger.phase(p).forward_equivalents(backward_multiplier) * ledger.flops_per_forward))
        .collect();
    let total = per_phase.iter().map(|(_, f)| f).sum();
    FlopsBreakdown { per_phase, total }
}

/// `iters × batch × (forward + backward) × flops_per_forward`, the middle
/// factor given in forward-pass units.
pub fn train_flops(iters: f64, batch: f64, forward_equivalents: f64, flops_per_forward: f64) -> f64 {
    iters * batch * forward_equivalents * flops_per_forward
}

/// `samples × steps × forwards per step × flops_per_forward`.
pub fn sample_flops(samples: f64, steps: f64, forwards_per_step: f64, flops_per_forward: f64) -> f64 {
    samples * steps * forwards_per_step * flops_per_forward
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_examples() {
        let sampling = sample_flops(5e6, 63.0, 2.0, 102e9);
        assert!((sampling / 64e18 - 1.0).abs() < 0.02, "{sampling:e}");
        let training = train_flops(50_000.0, 2048.0, 4.0 + 4.0, 102e9);
        assert!((training / 84e18 - 1.0).abs() < 0.02, "{training:e}");
        assert_eq!(train_flops(0.0, 2048.0, 8.0, 102e9), 0.0);
    }

    #[test]
    fn ledger_totals_match_phases() {
        let mut l = BudgetLedger::new(10.0);
        l.charge_train(Phase::Stage1Train, 100, 8, FLOW_STEP_COST);
        l.charge_forwards(Phase::ReflowSampling, 500);
        l.charge_train(Phase::Stage3Train, 50, 8, MEANFLOW_STEP_COST);
        l.charge_forwards(Phase::Eval, 7);
        let f = flops_estimate(&l, 2.0);
        assert_eq!(f.per_phase[0].1, 100.0 * 8.0 * 3.0 * 10.0);
        assert_eq!(f.per_phase[1].1, 5000.0);
        assert_eq!(f.per_phase[2].1, 50.0 * 8.0 * 5.0 * 10.0);
        assert_eq!(f.total, f.per_phase.iter().map(|p| p.1).sum::<f64>());
        assert_eq!(l.forward_evals(), 507);
        assert_eq!(l.train_steps(), 150);

        let mut doubled = BudgetLedger::new(10.0);
        doubled.absorb(&l);
        doubled.absorb(&l);
        assert_eq!(flops_estimate(&doubled, 2.0).total, 2.0 * f.total);
    }
}
