//! Latent geometry on the unit sphere and the multi-timescale loss terms.
//!
//! Pull caps the per-step chordal move of the encoder, Push keeps each
//! subgoal's predicted macro move above its learned margin, and Order ranks
//! the subgoal score `σ = d_θ + m_φ` by realised duration.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diff::{softplus, ParamId, ParameterSet, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MtsLossConfig {
    pub kappa: f64,
    pub w_cap: f64,
    pub w_push: f64,
    pub w_order: f64,
    pub lambda_m: f64,
}

impl Default for MtsLossConfig {
    fn default() -> Self {
        Self {
            kappa: 0.10,
            w_cap: 0.10,
            w_push: 0.10,
            w_order: 0.10,
            lambda_m: 1e-4,
        }
    }
}

impl MtsLossConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if !(self.kappa > 0.0 && self.kappa <= 2.0) {
            return Err(crate::Error::Config(format!(
                "kappa must lie in (0, 2], got {}",
                self.kappa
            )));
        }
        if [self.w_cap, self.w_push, self.w_order, self.lambda_m]
            .iter()
            .any(|w| w.is_nan() || *w < 0.0)
        {
            return Err(crate::Error::Config(
                "loss weights must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// `‖u − v‖₂`, which equals the chord length for unit vectors.
pub fn chordal_distance(u: &[f64], v: &[f64]) -> f64 {
    crate::diff::euclidean(u, v)
}

pub fn normalize(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        v.to_vec()
    }
}

/// Per-subgoal margin `m(z) = softplus(raw_z)`, stored as an `M x 1` column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginHead {
    pub raw: ParamId,
    pub subgoals: usize,
}

impl MarginHead {
    pub fn new(ps: &mut ParameterSet, name: &str, subgoals: usize, init: f64) -> Self {
        let raw = ps.add(format!("{name}.raw"), Tensor::filled(subgoals, 1, init));
        Self { raw, subgoals }
    }

    /// All margins as an `M x 1` column on the tape.
    pub fn forward(&self, tape: &mut Tape, ps: &ParameterSet) -> Var {
        let raw = tape.param(ps, self.raw);
        tape.softplus(raw)
    }

    pub fn values(&self, ps: &ParameterSet) -> Vec<f64> {
        ps.value(self.raw)
            .data()
            .iter()
            .map(|&x| softplus(x))
            .collect()
    }
}

/// One-hot selector rows (`len x width`) for gathering rows with `const_matmul`.
pub fn one_hot(indices: &[usize], width: usize) -> Arc<Tensor> {
    let mut t = Tensor::zeros(indices.len(), width);
    for (r, &i) in indices.iter().enumerate() {
        t.set(r, i, 1.0);
    }
    Arc::new(t)
}

/// Mean over rows of `(d(a_r, b_r) − κ)₊²`.
pub fn cap_loss(tape: &mut Tape, a: Var, b: Var, kappa: f64) -> Var {
    let diff = tape.sub(a, b);
    let d = tape.row_norm(diff);
    let over = tape.add_scalar(d, -kappa);
    let hinge = tape.relu(over);
    let sq = tape.square(hinge);
    tape.mean(sq)
}

/// Row-wise chordal distances `d(h_r, g_r)` as a column.
pub fn displacement(tape: &mut Tape, h: Var, g: Var) -> Var {
    let diff = tape.sub(h, g);
    tape.row_norm(diff)
}

/// Mean over rows of `(m_r − d_r)₊` given the displacement column `d`.
pub fn push_loss(tape: &mut Tape, margins: Var, displacement: Var) -> Var {
    let gap = tape.sub(margins, displacement);
    let hinge = tape.relu(gap);
    tape.mean(hinge)
}

/// Mean over pairs of `(1 − Y·(σ_i − σ_j))₊`.
pub fn order_loss(tape: &mut Tape, sigma_i: Var, sigma_j: Var, labels: &[f64]) -> Var {
    let delta = tape.sub(sigma_i, sigma_j);
    let y = tape.input(Tensor::from_vec(labels.len(), 1, labels.to_vec()));
    let prod = tape.mul(y, delta);
    let neg = tape.scale(prod, -1.0);
    let margin = tape.add_scalar(neg, 1.0);
    let hinge = tape.relu(margin);
    tape.mean(hinge)
}

/// `sign(τ_i − τ_j)`.
pub fn duration_label(tau_i: usize, tau_j: usize) -> f64 {
    match tau_i.cmp(&tau_j) {
        std::cmp::Ordering::Greater => 1.0,
        std::cmp::Ordering::Less => -1.0,
        std::cmp::Ordering::Equal => 0.0,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UnifiedBreakdown {
    pub cap: f64,
    pub push: f64,
    pub order: f64,
    pub margin_reg: f64,
    pub total: f64,
}

/// Optional component losses already on the tape; absent ones count as zero.
pub struct UnifiedTerms {
    pub cap: Option<Var>,
    pub push: Option<Var>,
    pub order: Option<Var>,
    /// All margins as an `M x 1` column.
    pub margins: Var,
}

/// `w_cap·cap + w_push·push + w_order·order + λ_m·Σ_z m(z)²`.
pub fn unified_loss(
    tape: &mut Tape,
    terms: &UnifiedTerms,
    config: &MtsLossConfig,
) -> (Var, UnifiedBreakdown) {
    let mut parts = Vec::new();
    let mut bd = UnifiedBreakdown::default();
    for (term, w, slot) in [
        (terms.cap, config.w_cap, &mut bd.cap),
        (terms.push, config.w_push, &mut bd.push),
        (terms.order, config.w_order, &mut bd.order),
    ] {
        if let Some(v) = term {
            *slot = tape.scalar(v);
            if w != 0.0 {
                parts.push(tape.scale(v, w));
            }
        }
    }
    let sq = tape.square(terms.margins);
    let reg = tape.sum(sq);
    bd.margin_reg = tape.scalar(reg);
    parts.push(tape.scale(reg, config.lambda_m));
    let total = tape.add_all(&parts);
    bd.total = tape.scalar(total);
    (total, bd)
}

/// Conditional pairwise hinge risk `η(1 − u)₊ + (1 − η)(1 + u)₊` for a
/// pair whose label is +1 with probability `η` given it is not a tie.
pub fn order_risk(u: f64, eta: f64) -> f64 {
    eta * (1.0 - u).max(0.0) + (1.0 - eta) * (1.0 + u).max(0.0)
}

/// Minimises [`order_risk`] over a grid on `[-bound, bound]` and returns the
/// midpoint of the set of grid minimisers.
pub fn minimize_order_risk(eta: f64, bound: f64, steps: usize) -> f64 {
    let grid: Vec<f64> = (0..=steps)
        .map(|i| -bound + 2.0 * bound * i as f64 / steps as f64)
        .collect();
    let risks: Vec<f64> = grid.iter().map(|&u| order_risk(u, eta)).collect();
    let best = risks.iter().cloned().fold(f64::INFINITY, f64::min);
    let argmins: Vec<f64> = grid
        .iter()
        .zip(&risks)
        .filter(|(_, &r)| r <= best + 1e-12)
        .map(|(&u, _)| u)
        .collect();
    let lo = argmins.first().copied().unwrap_or(0.0);
    let hi = argmins.last().copied().unwrap_or(0.0);
    0.5 * (lo + hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{grad_check, GradCheckConfig};

    #[test]
    fn chordal_examples() {
        let u = [1.0, 0.0, 0.0];
        let v = [0.0, 1.0, 0.0];
        assert_eq!(chordal_distance(&u, &u), 0.0);
        assert_eq!(chordal_distance(&u, &[-1.0, 0.0, 0.0]), 2.0);
        assert!((chordal_distance(&u, &v) - 2f64.sqrt()).abs() < 1e-15);
    }

    fn rows(t: &mut Tape, r: usize, c: usize, data: Vec<f64>) -> Var {
        t.input(Tensor::from_vec(r, c, data))
    }

    #[test]
    fn cap_loss_examples() {
        let mut t = Tape::new();
        let a = rows(&mut t, 2, 2, vec![0.0, 0.0, 1.0, 0.0]);
        let b = rows(&mut t, 2, 2, vec![0.05, 0.0, 1.0, 0.1]);
        let l = cap_loss(&mut t, a, b, 0.1);
        assert_eq!(t.scalar(l), 0.0);
        let a = rows(&mut t, 1, 2, vec![0.0, 0.0]);
        let b = rows(&mut t, 1, 2, vec![0.2, 0.0]);
        let l = cap_loss(&mut t, a, b, 0.1);
        assert!((t.scalar(l) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn push_and_order_examples() {
        let mut t = Tape::new();
        let m = rows(&mut t, 1, 1, vec![0.5]);
        let d = rows(&mut t, 1, 1, vec![0.2]);
        let l = push_loss(&mut t, m, d);
        assert!((t.scalar(l) - 0.3).abs() < 1e-15);
        let zero = rows(&mut t, 1, 1, vec![0.0]);
        let l = push_loss(&mut t, zero, d);
        assert_eq!(t.scalar(l), 0.0);

        let si = rows(&mut t, 3, 1, vec![5.0, 2.0, -7.0]);
        let sj = rows(&mut t, 3, 1, vec![0.0, 0.0, 9.0]);
        let tie = order_loss(&mut t, si, sj, &[0.0, 0.0, 0.0]);
        assert_eq!(t.scalar(tie), 1.0);
        let good = order_loss(&mut t, si, sj, &[1.0, 1.0, -1.0]);
        assert_eq!(t.scalar(good), 0.0);
    }

    #[test]
    fn weights_zero_leaves_only_regulariser() {
        let mut ps = ParameterSet::new();
        let head = MarginHead::new(&mut ps, "m", 3, 0.0);
        let mut t = Tape::new();
        let margins = head.forward(&mut t, &ps);
        let one = t.constant(1.0);
        let cfg = MtsLossConfig {
            w_cap: 0.0,
            w_push: 0.0,
            w_order: 0.0,
            ..MtsLossConfig::default()
        };
        let terms = UnifiedTerms {
            cap: Some(one),
            push: Some(one),
            order: Some(one),
            margins,
        };
        let (total, bd) = unified_loss(&mut t, &terms, &cfg);
        let m = std::f64::consts::LN_2;
        assert!((t.scalar(total) - 1e-4 * 3.0 * m * m).abs() < 1e-15);
        assert_eq!(bd.cap, 1.0);
    }

    #[test]
    fn order_risk_minimiser_sign() {
        for (eta, sign) in [(0.2, -1.0), (0.5, 0.0), (0.8, 1.0)] {
            let u = minimize_order_risk(eta, 3.0, 600);
            assert_eq!(
                u.signum() * (u != 0.0) as u8 as f64,
                sign,
                "eta {eta} gave {u}"
            );
        }
    }

    #[test]
    fn margin_values_are_softplus() {
        let mut ps = ParameterSet::new();
        let head = MarginHead::new(&mut ps, "m", 2, 0.3);
        let v = head.values(&ps);
        assert!((v[0] - softplus(0.3)).abs() < 1e-15);
        assert!(v.iter().all(|&m| m >= 0.0));
    }

    #[test]
    fn geometry_losses_gradient_check() {
        let mut ps = ParameterSet::new();
        let a = ps.add(
            "a",
            Tensor::from_vec(3, 2, vec![0.3, -0.1, 0.5, 0.2, -0.4, 0.1]),
        );
        let b = ps.add(
            "b",
            Tensor::from_vec(3, 2, vec![0.1, 0.2, 0.3, -0.3, 0.2, 0.4]),
        );
        let head = MarginHead::new(&mut ps, "m", 3, 0.4);
        let loss = |ps: &ParameterSet, t: &mut Tape| {
            let av = t.param(ps, a);
            let bv = t.param(ps, b);
            let an = t.l2_normalize_rows(av);
            let bn = t.l2_normalize_rows(bv);
            let cap = cap_loss(t, an, bn, 0.1);
            let margins = head.forward(t, ps);
            let sel = t.const_matmul(&one_hot(&[0, 2, 1], 3), margins);
            let d = displacement(t, an, bn);
            let push = push_loss(t, sel, d);
            let sigma = t.add(d, sel);
            let si = t.const_matmul(&one_hot(&[0, 1], 3), sigma);
            let sj = t.const_matmul(&one_hot(&[2, 0], 3), sigma);
            let order = order_loss(t, si, sj, &[1.0, -1.0]);
            let terms = UnifiedTerms {
                cap: Some(cap),
                push: Some(push),
                order: Some(order),
                margins,
            };
            let cfg = MtsLossConfig {
                w_cap: 1.0,
                w_push: 1.0,
                w_order: 1.0,
                lambda_m: 0.1,
                ..MtsLossConfig::default()
            };
            unified_loss(t, &terms, &cfg).0
        };
        let report = grad_check(&ps, loss, &GradCheckConfig::default());
        assert!(report.passed(), "{report:?}");
    }
}
