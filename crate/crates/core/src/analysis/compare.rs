//! Side-by-side rollout error of a one-step operator and a flow-marching model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::RolloutReport;

/// What both models were trained with; comparisons require equal budgets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingBudget {
    pub steps: u64,
    pub batch: usize,
    pub param_count: usize,
    /// Checksum of the training data.
    pub data_checksum: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub steps: usize,
    pub n_traj: usize,
    pub l2re_op: Vec<f64>,
    pub l2re_fm: Vec<f64>,
    pub final_op: f64,
    pub final_fm: f64,
    /// `final_fm / final_op`.
    pub ratio: f64,
    /// Flow marching ends no worse than the operator.
    pub pass: bool,
}

impl ComparisonReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,l2re_op_mean,l2re_fm_mean,n_traj\n");
        for (i, (a, b)) in self.l2re_op.iter().zip(&self.l2re_fm).enumerate() {
            out.push_str(&format!("{},{a:e},{b:e},{}\n", i + 1, self.n_traj));
        }
        out
    }
}

/// Compare two rollouts over the same trajectories and horizon.
///
/// A diverged run keeps its truncated curve; the final error is taken at
/// the last step both reached, so a stopped operator still counts as worse
/// only when its recorded error is.
pub fn empirical_rollout_compare(
    op: &RolloutReport,
    op_budget: &TrainingBudget,
    fm: &RolloutReport,
    fm_budget: &TrainingBudget,
) -> Result<ComparisonReport> {
    if op_budget != fm_budget {
        return Err(Error::contract(format!(
            "training budgets differ: operator {op_budget:?}, flow marching {fm_budget:?}"
        )));
    }
    if op.n_traj != fm.n_traj {
        return Err(Error::contract("rollouts cover different trajectory counts"));
    }
    let steps = op.l2re.len().min(fm.l2re.len());
    if steps == 0 {
        return Err(Error::UndefinedMetric("empty rollout"));
    }
    let (l2re_op, l2re_fm) = (op.l2re[..steps].to_vec(), fm.l2re[..steps].to_vec());
    let (final_op, final_fm) = (l2re_op[steps - 1], l2re_fm[steps - 1]);
    // A run that stopped early diverged; it loses against one that did not.
    let pass = match (op.diverged, fm.diverged) {
        (true, false) => true,
        (false, true) => false,
        _ => final_fm <= final_op,
    };
    Ok(ComparisonReport {
        steps,
        n_traj: op.n_traj,
        final_op,
        final_fm,
        ratio: final_fm / final_op,
        pass,
        l2re_op,
        l2re_fm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(l2re: Vec<f64>, diverged: bool) -> RolloutReport {
        RolloutReport {
            vrmse: l2re.clone(),
            per_trajectory: vec![l2re.clone()],
            l2re,
            diverged,
            n_traj: 1,
        }
    }

    fn budget() -> TrainingBudget {
        TrainingBudget {
            steps: 10,
            batch: 4,
            param_count: 100,
            data_checksum: "d".into(),
        }
    }

    #[test]
    fn ratio_and_csv() {
        let r = empirical_rollout_compare(
            &report(vec![0.1, 0.4], false),
            &budget(),
            &report(vec![0.1, 0.2], false),
            &budget(),
        )
        .unwrap();
        assert!(r.pass && (r.ratio - 0.5).abs() < 1e-15);
        assert_eq!(r.to_csv().lines().count(), 3);
        assert!(r.to_csv().starts_with("step,l2re_op_mean,l2re_fm_mean,n_traj\n1,"));
    }

    #[test]
    fn self_comparison_has_unit_ratio() {
        let a = report(vec![0.3, 0.7, 1.1], false);
        let r = empirical_rollout_compare(&a, &budget(), &a, &budget()).unwrap();
        assert_eq!(r.ratio, 1.0);
        assert!(r.pass);
    }

    #[test]
    fn budget_mismatch_is_rejected() {
        let other = TrainingBudget { batch: 8, ..budget() };
        let e = empirical_rollout_compare(&report(vec![1.0], false), &budget(), &report(vec![1.0], false), &other);
        assert!(matches!(e, Err(Error::Contract(_))));
    }

    #[test]
    fn divergence_decides() {
        let r = empirical_rollout_compare(
            &report(vec![0.1, 20.0], true),
            &budget(),
            &report(vec![0.3, 0.5, 0.9], false),
            &budget(),
        )
        .unwrap();
        assert!(r.pass && r.steps == 2);
    }
}
