//! Non-adaptive reference predictors: constant velocity and a small
//! trajectory MLP with no scene input.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{adam_step, AdamParams, AdamState, Tape};
use crate::core::TrajectoryWindow;
use crate::parallel::map_collect;
use crate::predictor::shuffle;

/// Velocity convention for the constant-velocity baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VelocityEstimate {
    /// Last-step velocity (standard convention).
    #[default]
    LastStep,
    /// Mean velocity over the whole history.
    Mean,
}

/// Extrapolate the history with a constant velocity.
pub fn constant_velocity(window: &TrajectoryWindow, estimate: VelocityEstimate) -> Vec<(f64, f64)> {
    let past = &window.past;
    assert!(past.len() >= 2, "constant velocity needs at least 2 history points");
    let last = past[past.len() - 1];
    let v = match estimate {
        VelocityEstimate::LastStep => {
            let prev = past[past.len() - 2];
            (last.0 - prev.0, last.1 - prev.1)
        }
        VelocityEstimate::Mean => {
            let first = past[0];
            let steps = (past.len() - 1) as f64;
            ((last.0 - first.0) / steps, (last.1 - first.1) / steps)
        }
    };
    (1..=window.future.len())
        .map(|k| (last.0 + k as f64 * v.0, last.1 + k as f64 * v.1))
        .collect()
}

/// Two-hidden-layer perceptron over relative offsets: input is the
/// flattened H-1 history offsets, output is T future offsets accumulated
/// from the last observed point. Offset parameterization makes the model
/// translation-equivariant by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryMlp {
    pub hist_len: usize,
    pub pred_len: usize,
    pub hidden: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub w3: Vec<f64>,
    pub b3: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct MlpTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for MlpTrainConfig {
    fn default() -> Self {
        Self { epochs: 50, lr: 1e-3, batch_size: 32, hidden: 32, seed: 0 }
    }
}

impl TrajectoryMlp {
    /// Kaiming-uniform hidden layers; the output layer starts at zero so a
    /// fresh model predicts "stay at the last point".
    pub fn new(hist_len: usize, pred_len: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_in = 2 * (hist_len - 1);
        let n_out = 2 * pred_len;
        let mut layer = |n_in: usize, n_out: usize| -> (Vec<f64>, Vec<f64>) {
            let bound = (6.0 / n_in as f64).sqrt();
            let w = (0..n_out * n_in).map(|_| rng.gen_range(-bound..bound)).collect();
            (w, vec![0.0; n_out])
        };
        let (w1, b1) = layer(n_in, hidden);
        let (w2, b2) = layer(hidden, hidden);
        let (w3, b3) = (vec![0.0; n_out * hidden], vec![0.0; n_out]);
        Self { hist_len, pred_len, hidden, w1, b1, w2, b2, w3, b3 }
    }

    fn offsets(window: &TrajectoryWindow) -> Vec<f64> {
        window
            .past
            .windows(2)
            .flat_map(|p| [p[1].0 - p[0].0, p[1].1 - p[0].1])
            .collect()
    }

    /// Predicted future offsets (flattened), via a throwaway tape.
    fn forward_offsets(&self, input: &[f64]) -> Vec<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(&[input.len()], input.to_vec(), false).unwrap();
        let ids = self.leaves(&mut tape, false);
        let out = self.forward_on_tape(&mut tape, x, &ids);
        tape.values(out).to_vec()
    }

    fn leaves(&self, tape: &mut Tape, track: bool) -> [crate::autograd::TensorId; 6] {
        let n_in = 2 * (self.hist_len - 1);
        let n_out = 2 * self.pred_len;
        [
            tape.leaf(&[self.hidden, n_in], self.w1.clone(), track).unwrap(),
            tape.leaf(&[self.hidden], self.b1.clone(), track).unwrap(),
            tape.leaf(&[self.hidden, self.hidden], self.w2.clone(), track).unwrap(),
            tape.leaf(&[self.hidden], self.b2.clone(), track).unwrap(),
            tape.leaf(&[n_out, self.hidden], self.w3.clone(), track).unwrap(),
            tape.leaf(&[n_out], self.b3.clone(), track).unwrap(),
        ]
    }

    fn forward_on_tape(
        &self,
        tape: &mut Tape,
        x: crate::autograd::TensorId,
        ids: &[crate::autograd::TensorId; 6],
    ) -> crate::autograd::TensorId {
        let h1 = tape.linear(x, ids[0], ids[1]).unwrap();
        let h1 = tape.leaky_relu(h1).unwrap();
        let h2 = tape.linear(h1, ids[2], ids[3]).unwrap();
        let h2 = tape.leaky_relu(h2).unwrap();
        tape.linear(h2, ids[4], ids[5]).unwrap()
    }

    /// Last observed point plus cumulative predicted offsets.
    pub fn predict(&self, window: &TrajectoryWindow) -> Vec<(f64, f64)> {
        let offsets = self.forward_offsets(&Self::offsets(window));
        let mut cur = *window.past.last().unwrap();
        let mut out = Vec::with_capacity(self.pred_len);
        for k in 0..self.pred_len {
            cur.0 += offsets[2 * k];
            cur.1 += offsets[2 * k + 1];
            out.push(cur);
        }
        out
    }

    fn params_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2, &mut self.w3, &mut self.b3]
    }
}

/// Train the MLP with squared error on future offsets. Returns the
/// per-epoch mean loss curve.
pub fn train_mlp(windows: &[TrajectoryWindow], cfg: &MlpTrainConfig) -> (TrajectoryMlp, Vec<f64>) {
    assert!(!windows.is_empty(), "train_mlp requires a non-empty training set");
    let hist_len = windows[0].past.len();
    let pred_len = windows[0].future.len();
    let mut model = TrajectoryMlp::new(hist_len, pred_len, cfg.hidden, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let adam = AdamParams::with_lr(cfg.lr);
    let mut states: [AdamState; 6] = [
        AdamState::new(model.w1.len()),
        AdamState::new(model.b1.len()),
        AdamState::new(model.w2.len()),
        AdamState::new(model.b2.len()),
        AdamState::new(model.w3.len()),
        AdamState::new(model.b3.len()),
    ];
    let mut curve = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        shuffle(&mut order, &mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let refs: Vec<&TrajectoryWindow> = batch.iter().map(|&i| &windows[i]).collect();
            let model_ref = &model;
            let results = map_collect(&refs, |w| {
                let mut tape = Tape::new();
                let x = tape
                    .leaf(&[2 * (hist_len - 1)], TrajectoryMlp::offsets(w), false)
                    .unwrap();
                let ids = model_ref.leaves(&mut tape, true);
                let pred = model_ref.forward_on_tape(&mut tape, x, &ids);
                let last = *w.past.last().unwrap();
                let mut target = Vec::with_capacity(2 * pred_len);
                let mut prev = last;
                for p in &w.future {
                    target.push(p.0 - prev.0);
                    target.push(p.1 - prev.1);
                    prev = *p;
                }
                let y = tape.leaf(&[2 * pred_len], target, false).unwrap();
                let diff = tape.sub(pred, y).unwrap();
                let sq = tape.mul(diff, diff).unwrap();
                let loss = tape.sum(sq).unwrap();
                let loss_value = tape.scalar_value(loss);
                let grads = tape.backward(loss).unwrap();
                let gs: Vec<Vec<f64>> =
                    ids.iter().map(|&id| grads.get(id).unwrap().to_vec()).collect();
                (loss_value, gs)
            });
            let inv = 1.0 / batch.len() as f64;
            let mut sums: Vec<Vec<f64>> = vec![
                vec![0.0; model.w1.len()],
                vec![0.0; model.b1.len()],
                vec![0.0; model.w2.len()],
                vec![0.0; model.b2.len()],
                vec![0.0; model.w3.len()],
                vec![0.0; model.b3.len()],
            ];
            for (loss, gs) in &results {
                epoch_loss += loss;
                for (s, g) in sums.iter_mut().zip(gs) {
                    for (a, &b) in s.iter_mut().zip(g) {
                        *a += b * inv;
                    }
                }
            }
            for ((p, g), st) in model.params_mut().into_iter().zip(&sums).zip(&mut states) {
                adam_step(p, g, st, &adam);
            }
        }
        curve.push(epoch_loss / windows.len() as f64);
    }
    (model, curve)
}
