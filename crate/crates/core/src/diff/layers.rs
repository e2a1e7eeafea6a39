//! Dense layers and the two-round message-passing graph encoder.
//!
//! Every layer has two forward paths: `forward` records onto a [`Tape`] for
//! training, `infer` computes the same function directly for search and
//! action selection.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ParamId, ParameterSet, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParameterSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let weight = ps.add_glorot(format!("{name}.w"), fan_in, fan_out, rng);
        let bias = ps.add(format!("{name}.b"), Tensor::zeros(1, fan_out));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, ps: &ParameterSet, x: Var) -> Var {
        let w = tape.param(ps, self.weight);
        let b = tape.param(ps, self.bias);
        let xw = tape.matmul(x, w);
        tape.add_row(xw, b)
    }

    pub fn infer(&self, ps: &ParameterSet, x: &Tensor) -> Tensor {
        x.matmul(ps.value(self.weight))
            .add_row_broadcast(ps.value(self.bias))
    }
}

/// Affine layers with ReLU between them; the output layer is linear.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `widths` lists every layer width including input and output.
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParameterSet,
        name: &str,
        widths: &[usize],
        rng: &mut R,
    ) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(ps, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }

    pub fn forward(&self, tape: &mut Tape, ps: &ParameterSet, x: Var) -> Var {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, ps, h);
            if i < last {
                h = tape.relu(h);
            }
        }
        h
    }

    pub fn infer(&self, ps: &ParameterSet, x: &Tensor) -> Tensor {
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.infer(ps, &h);
            if i < last {
                h.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        h
    }
}

/// Two rounds of `h <- ReLU((A h) W + h U + b)` over node rows, followed by a
/// mean pool and a linear projection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphEncoder {
    rounds: Vec<MessageRound>,
    pub projection: Linear,
    pub hidden: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct MessageRound {
    neighbour: ParamId,
    self_loop: ParamId,
    bias: ParamId,
}

impl GraphEncoder {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParameterSet,
        name: &str,
        feature_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let rounds = (0..2)
            .map(|i| {
                let fan_in = if i == 0 { feature_dim } else { hidden };
                MessageRound {
                    neighbour: ps.add_glorot(format!("{name}.mp{i}.w"), fan_in, hidden, rng),
                    self_loop: ps.add_glorot(format!("{name}.mp{i}.u"), fan_in, hidden, rng),
                    bias: ps.add(format!("{name}.mp{i}.b"), Tensor::zeros(1, hidden)),
                }
            })
            .collect();
        let projection = Linear::new(ps, &format!("{name}.proj"), hidden, out_dim, rng);
        Self {
            rounds,
            projection,
            hidden,
        }
    }

    /// Per-node embeddings after both message-passing rounds (`n x hidden`).
    pub fn node_embeddings(
        &self,
        tape: &mut Tape,
        ps: &ParameterSet,
        adjacency: &Arc<Tensor>,
        features: Var,
    ) -> Var {
        let mut h = features;
        for round in &self.rounds {
            let agg = tape.const_matmul(adjacency, h);
            let w = tape.param(ps, round.neighbour);
            let u = tape.param(ps, round.self_loop);
            let b = tape.param(ps, round.bias);
            let msg = tape.matmul(agg, w);
            let own = tape.matmul(h, u);
            let sum = tape.add(msg, own);
            let pre = tape.add_row(sum, b);
            h = tape.relu(pre);
        }
        h
    }

    /// Pooled graph latent before normalisation (`1 x out_dim`).
    pub fn forward(
        &self,
        tape: &mut Tape,
        ps: &ParameterSet,
        adjacency: &Arc<Tensor>,
        features: Var,
    ) -> Var {
        let h = self.node_embeddings(tape, ps, adjacency, features);
        let pooled = tape.mean_rows(h);
        self.projection.forward(tape, ps, pooled)
    }

    pub fn infer_node_embeddings(
        &self,
        ps: &ParameterSet,
        adjacency: &Tensor,
        features: &Tensor,
    ) -> Tensor {
        let mut h = features.clone();
        for round in &self.rounds {
            let agg = adjacency.matmul(&h);
            let mut next = agg.matmul(ps.value(round.neighbour));
            next.add_assign(&h.matmul(ps.value(round.self_loop)));
            let mut next = next.add_row_broadcast(ps.value(round.bias));
            next.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            h = next;
        }
        h
    }

    pub fn infer(&self, ps: &ParameterSet, adjacency: &Tensor, features: &Tensor) -> Tensor {
        let h = self.infer_node_embeddings(ps, adjacency, features);
        self.projection.infer(ps, &h.mean_rows())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tape_and_inference_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParameterSet::new();
        let enc = GraphEncoder::new(&mut ps, "enc", 4, 6, 5, &mut rng);
        let mlp = Mlp::new(&mut ps, "mlp", &[5, 7, 2], &mut rng);
        let adj = Arc::new(Tensor::from_vec(
            3,
            3,
            vec![0.0, 1.0, 0.0, 0.5, 0.0, 0.5, 1.0, 0.0, 0.0],
        ));
        let x: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let feats = Tensor::from_vec(3, 4, x);
        let mut tape = Tape::new();
        let f = tape.input(feats.clone());
        let z = enc.forward(&mut tape, &ps, &adj, f);
        let out = mlp.forward(&mut tape, &ps, z);
        let direct = mlp.infer(&ps, &enc.infer(&ps, &adj, &feats));
        for (a, b) in tape.value(out).data().iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParameterSet::new();
        let mlp = Mlp::new(&mut ps, "m", &[3, 4, 2], &mut rng);
        for p in ps.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let out = mlp.infer(&ps, &Tensor::row(vec![1.0, -2.0, 3.0]));
        assert_eq!(out.data(), &[0.0, 0.0]);
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mut ps = ParameterSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin = Linear::new(&mut ps, "id", 3, 3, &mut rng);
        *ps.value_mut(lin.weight) = Tensor::identity(3);
        let x = Tensor::row(vec![0.5, -1.0, 2.0]);
        assert_eq!(lin.infer(&ps, &x), x);
    }
}
