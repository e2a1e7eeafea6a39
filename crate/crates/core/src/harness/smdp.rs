//! Enumerable semi-Markov toy used to measure the error of backing up with a
//! fixed per-decision discount instead of `γ_LL^τ`.

use serde::{Deserialize, Serialize};

/// One outcome of executing a subgoal: probability, duration, discounted
/// macro reward and successor state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmdpOutcome {
    pub prob: f64,
    pub duration: usize,
    pub reward: f64,
    pub next: usize,
}

/// `outcomes[s][z]` lists the outcome distribution of subgoal `z` in `s`;
/// `values[s]` is the continuation value used in both backups.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToySmdp {
    pub values: Vec<f64>,
    pub outcomes: Vec<Vec<Vec<SmdpOutcome>>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscountGap {
    pub state: usize,
    pub subgoal: usize,
    pub q_prim: f64,
    pub q_dt: f64,
    pub mean_duration: f64,
    pub var_duration: f64,
    pub bound: f64,
}

impl DiscountGap {
    pub fn gap(&self) -> f64 {
        (self.q_prim - self.q_dt).abs()
    }

    pub fn holds(&self) -> bool {
        self.gap() <= self.bound
    }
}

impl ToySmdp {
    /// Three states, two subgoals, durations 1 to 4.
    pub fn three_state() -> Self {
        let o = |prob, duration, reward, next| SmdpOutcome {
            prob,
            duration,
            reward,
            next,
        };
        Self {
            values: vec![5.0, -2.0, 8.0],
            outcomes: vec![
                vec![
                    vec![o(0.5, 1, 1.0, 1), o(0.5, 3, 2.0, 2)],
                    vec![o(1.0, 2, 0.5, 0)],
                ],
                vec![
                    vec![o(0.2, 1, 0.0, 0), o(0.3, 2, 1.0, 1), o(0.5, 4, 3.0, 2)],
                    vec![o(0.9, 2, 1.5, 2), o(0.1, 4, -1.0, 1)],
                ],
                vec![
                    vec![o(1.0, 4, 4.0, 2)],
                    vec![o(0.25, 1, 0.2, 0), o(0.75, 3, 1.1, 1)],
                ],
            ],
        }
    }

    pub fn v_max(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Both backups and the bound
    /// `V_max·|ln γ_LL|·√(Var τ + (μ − μ̄)²)` for every `(s, z)`, with the
    /// decision discount `γ = γ_LL^μ̄`.
    pub fn discount_gaps(&self, gamma_ll: f64, mu_bar: f64) -> Vec<DiscountGap> {
        let gamma = gamma_ll.powf(mu_bar);
        let v_max = self.v_max();
        let mut out = Vec::new();
        for (s, per_z) in self.outcomes.iter().enumerate() {
            for (z, outcomes) in per_z.iter().enumerate() {
                let mut q_prim = 0.0;
                let mut q_dt = 0.0;
                let mut mean = 0.0;
                let mut second = 0.0;
                for o in outcomes {
                    let v = self.values[o.next];
                    let tau = o.duration as f64;
                    q_prim += o.prob * (o.reward + gamma_ll.powf(tau) * v);
                    q_dt += o.prob * (o.reward + gamma * v);
                    mean += o.prob * tau;
                    second += o.prob * tau * tau;
                }
                let var = (second - mean * mean).max(0.0);
                let bound = v_max * gamma_ll.ln().abs() * (var + (mean - mu_bar).powi(2)).sqrt();
                out.push(DiscountGap {
                    state: s,
                    subgoal: z,
                    q_prim,
                    q_dt,
                    mean_duration: mean,
                    var_duration: var,
                    bound,
                });
            }
        }
        out
    }
}
