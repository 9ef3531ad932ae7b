use serde::{Deserialize, Serialize};

use crate::binsim::EpisodeLog;

pub const METRICS_SCHEMA_VERSION: u32 = 1;

/// Picking quality over a fixed set of episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PickingMetrics {
    pub schema_version: u32,
    pub n_episodes: usize,
    /// Fraction of episodes where every object was picked.
    pub completion_rate: f64,
    /// Mean number of objects picked per episode.
    pub avg_picked: f64,
    /// Successful picks over actions, within completion runs only; `None` without any.
    pub success_rate: Option<f64>,
    /// Successful picks over actions across all runs.
    pub success_rate_all_runs: f64,
    pub mean_return: f64,
    pub config_fingerprint: String,
    pub seed: u64,
}

impl PickingMetrics {
    pub fn from_logs(logs: &[EpisodeLog], config_fingerprint: &str, seed: u64) -> PickingMetrics {
        let n = logs.len();
        let nf = n.max(1) as f64;
        let completed: Vec<&EpisodeLog> = logs.iter().filter(|l| l.completed()).collect();
        let picks = |ls: &mut dyn Iterator<Item = &EpisodeLog>| -> (usize, usize) {
            ls.fold((0, 0), |(s, a), l| (s + l.successes(), a + l.attempts()))
        };
        let (cs, ca) = picks(&mut completed.iter().copied());
        let (s, a) = picks(&mut logs.iter());
        PickingMetrics {
            schema_version: METRICS_SCHEMA_VERSION,
            n_episodes: n,
            completion_rate: completed.len() as f64 / nf,
            avg_picked: s as f64 / nf,
            success_rate: (ca > 0).then(|| cs as f64 / ca as f64),
            success_rate_all_runs: if a > 0 { s as f64 / a as f64 } else { 0.0 },
            mean_return: logs.iter().map(|l| l.total_reward()).sum::<f64>() / nf,
            config_fingerprint: config_fingerprint.to_string(),
            seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::binsim::{PickKind, PickOutcome, TerminationReason};

    fn episode(outcomes: &[PickKind], initial: usize, termination: TerminationReason) -> EpisodeLog {
        let mut remaining = initial;
        let steps = outcomes
            .iter()
            .enumerate()
            .map(|(i, k)| {
                if *k == PickKind::Success {
                    remaining -= 1;
                }
                PickOutcome {
                    step: i + 1,
                    action: [0, 0],
                    kind: *k,
                    picked_id: (*k == PickKind::Success).then_some(i as u32 + 1),
                    reward: 0.0,
                    done: i + 1 == outcomes.len(),
                    remaining,
                    point: None,
                    normal: None,
                }
            })
            .collect();
        EpisodeLog {
            seed: 0,
            initial_count: initial,
            steps,
            termination: Some(termination),
        }
    }

    #[test]
    fn hand_built_two_episode_log() {
        use PickKind::*;
        // 10 successes in 12 actions
        let mut a = vec![Success; 10];
        a.insert(3, Miss);
        a.insert(7, PartialSeal);
        let first = episode(&a, 10, TerminationReason::AllPicked);
        // 7 picks, then the step budget runs out
        let mut b = vec![Success; 7];
        b.extend(vec![Miss; 13]);
        let second = episode(&b, 10, TerminationReason::StepBudget);
        let m = PickingMetrics::from_logs(&[first, second], "fp", 1);
        assert_eq!(m.completion_rate, 0.5);
        assert_eq!(m.avg_picked, 8.5);
        assert_eq!(m.success_rate, Some(10.0 / 12.0));
        assert_eq!(m.success_rate_all_runs, 17.0 / 32.0);
        assert_eq!(m.n_episodes, 2);
    }

    #[test]
    fn no_completion_run_leaves_the_success_rate_undefined() {
        let e = episode(&[PickKind::Collision], 5, TerminationReason::Unsafe);
        let m = PickingMetrics::from_logs(&[e], "fp", 0);
        assert_eq!(m.success_rate, None);
        assert_eq!(m.completion_rate, 0.0);
        assert_eq!(m.success_rate_all_runs, 0.0);
    }
}
