//! The base trajectory predictor: encoder / decoder / head, its loss,
//! training, and inference.
//!
//! The network is a small U-shaped stack: two 2x downsampling conv blocks
//! into a bottleneck, mirrored upsampling with skip connections, and a 1x1
//! head mapping decoder features to T output heatmap channels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{adam_step, AdamParams, AdamState, AutogradError, Tape, TensorId};
use crate::core::{GridShape, TrajectoryWindow};
use crate::corridor::ApplyMode;
use crate::heatmap::{decode_prediction, trajectory_to_heatmaps, HeatmapStack, ObservationStack};
use crate::ingest::SceneContext;
use crate::parallel::map_collect;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub shape: GridShape,
    pub hist_len: usize,
    pub pred_len: usize,
    pub classes: usize,
}

/// One 3x3 (or 1x1) conv layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub cin: usize,
    pub cout: usize,
    /// 9 taps per (cout, cin) pair for 3x3 layers, 1 for the 1x1 head.
    pub taps: usize,
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    fn kaiming(cin: usize, cout: usize, taps: usize, rng: &mut ChaCha8Rng) -> Self {
        // Kaiming-uniform, fan-in = cin * taps, zero biases.
        let fan_in = (cin * taps) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let kernel = (0..cout * cin * taps).map(|_| rng.gen_range(-bound..bound)).collect();
        Self { cin, cout, taps, kernel, bias: vec![0.0; cout] }
    }

    pub fn param_count(&self) -> usize {
        self.kernel.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FreezeFlags {
    pub encoder: bool,
    pub decoder: bool,
    pub head: bool,
}

/// Base predictor F = (F_E, F_D, F_P) with per-part freeze flags.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictor {
    pub cfg: ModelConfig,
    /// Encoder F_E: channels (H + C) -> 16 -> 32 -> 64 with 2x pooling.
    pub enc1: ConvLayer,
    pub enc2: ConvLayer,
    pub enc3: ConvLayer,
    /// Decoder F_D: mirrored upsampling with skip connections.
    pub dec1: ConvLayer,
    pub dec2: ConvLayer,
    /// Head F_P: 1x1 conv from decoder channels to T channels.
    pub head: ConvLayer,
    pub freeze: FreezeFlags,
}

pub const ENC_WIDTHS: [usize; 3] = [16, 32, 64];

/// Kaiming-initialized model, deterministic in seed. Spatial dims must be
/// divisible by 4 (two pooling levels).
pub fn build_model(shape: GridShape, hist_len: usize, pred_len: usize, classes: usize, seed: u64) -> Predictor {
    assert!(shape.h % 4 == 0 && shape.w % 4 == 0, "h and w must be divisible by 4");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cin = hist_len + classes;
    let [c1, c2, c3] = ENC_WIDTHS;
    Predictor {
        cfg: ModelConfig { shape, hist_len, pred_len, classes },
        enc1: ConvLayer::kaiming(cin, c1, 9, &mut rng),
        enc2: ConvLayer::kaiming(c1, c2, 9, &mut rng),
        enc3: ConvLayer::kaiming(c2, c3, 9, &mut rng),
        dec1: ConvLayer::kaiming(c3 + c2, c2, 9, &mut rng),
        dec2: ConvLayer::kaiming(c2 + c1, c1, 9, &mut rng),
        head: ConvLayer::kaiming(c1, pred_len, 1, &mut rng),
        freeze: FreezeFlags::default(),
    }
}

/// Identifies one parameter tensor within a predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Encoder,
    Decoder,
    Head,
}

pub struct ParamView<'a> {
    pub name: &'static str,
    pub part: Part,
    pub shape: Vec<usize>,
    pub values: &'a [f64],
}

impl Predictor {
    /// Canonical parameter order used by checkpoints, gradients, and Adam
    /// state. Kernel shape for 3x3 layers is [cout, cin, 3, 3]; the head
    /// kernel is [cout, cin].
    pub fn params(&self) -> Vec<ParamView<'_>> {
        let layers: [(&'static str, Part, &ConvLayer); 6] = [
            ("enc1.kernel", Part::Encoder, &self.enc1),
            ("enc2.kernel", Part::Encoder, &self.enc2),
            ("enc3.kernel", Part::Encoder, &self.enc3),
            ("dec1.kernel", Part::Decoder, &self.dec1),
            ("dec2.kernel", Part::Decoder, &self.dec2),
            ("head.kernel", Part::Head, &self.head),
        ];
        let mut out = Vec::with_capacity(12);
        for (name, part, l) in layers {
            let kshape = if l.taps == 9 {
                vec![l.cout, l.cin, 3, 3]
            } else {
                vec![l.cout, l.cin]
            };
            out.push(ParamView { name, part, shape: kshape, values: &l.kernel });
            out.push(ParamView {
                name: kernel_bias_name(name),
                part,
                shape: vec![l.cout],
                values: &l.bias,
            });
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, Part, &mut Vec<f64>)> {
        vec![
            ("enc1.kernel", Part::Encoder, &mut self.enc1.kernel),
            ("enc1.bias", Part::Encoder, &mut self.enc1.bias),
            ("enc2.kernel", Part::Encoder, &mut self.enc2.kernel),
            ("enc2.bias", Part::Encoder, &mut self.enc2.bias),
            ("enc3.kernel", Part::Encoder, &mut self.enc3.kernel),
            ("enc3.bias", Part::Encoder, &mut self.enc3.bias),
            ("dec1.kernel", Part::Decoder, &mut self.dec1.kernel),
            ("dec1.bias", Part::Decoder, &mut self.dec1.bias),
            ("dec2.kernel", Part::Decoder, &mut self.dec2.kernel),
            ("dec2.bias", Part::Decoder, &mut self.dec2.bias),
            ("head.kernel", Part::Head, &mut self.head.kernel),
            ("head.bias", Part::Head, &mut self.head.bias),
        ]
    }

    pub fn param_count(&self) -> usize {
        [&self.enc1, &self.enc2, &self.enc3, &self.dec1, &self.dec2, &self.head]
            .iter()
            .map(|l| l.param_count())
            .sum()
    }

    pub fn part_frozen(&self, part: Part) -> bool {
        match part {
            Part::Encoder => self.freeze.encoder,
            Part::Decoder => self.freeze.decoder,
            Part::Head => self.freeze.head,
        }
    }

    /// Records the forward pass on `tape` from an already-inserted input
    /// tensor and per-layer weight tensors. Returns logits [T, h, w].
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        input: TensorId,
        weights: &PredictorTapeWeights,
    ) -> Result<TensorId, AutogradError> {
        let e1 = tape.conv2d(input, weights.enc1.0, weights.enc1.1)?;
        let e1 = tape.leaky_relu(e1)?;
        let p1 = tape.avg_pool2(e1)?;
        let e2 = tape.conv2d(p1, weights.enc2.0, weights.enc2.1)?;
        let e2 = tape.leaky_relu(e2)?;
        let p2 = tape.avg_pool2(e2)?;
        let e3 = tape.conv2d(p2, weights.enc3.0, weights.enc3.1)?;
        let e3 = tape.leaky_relu(e3)?;
        let u1 = tape.bilinear_up2(e3)?;
        let c1 = tape.concat_channels(&[u1, e2])?;
        let d1 = tape.conv2d(c1, weights.dec1.0, weights.dec1.1)?;
        let d1 = tape.leaky_relu(d1)?;
        let u2 = tape.bilinear_up2(d1)?;
        let c2 = tape.concat_channels(&[u2, e1])?;
        let d2 = tape.conv2d(c2, weights.dec2.0, weights.dec2.1)?;
        let d2 = tape.leaky_relu(d2)?;
        tape.conv2d_1x1(d2, weights.head.0, weights.head.1)
    }

    /// Inserts every weight tensor as a tape leaf; a part's tensors are
    /// tracked only when the part is not frozen.
    pub fn insert_weights(&self, tape: &mut Tape) -> Result<PredictorTapeWeights, AutogradError> {
        let layer = |tape: &mut Tape,
                     l: &ConvLayer,
                     track: bool|
         -> Result<(TensorId, TensorId), AutogradError> {
            let kshape: Vec<usize> =
                if l.taps == 9 { vec![l.cout, l.cin, 3, 3] } else { vec![l.cout, l.cin] };
            let k = tape.leaf(&kshape, l.kernel.clone(), track)?;
            let b = tape.leaf(&[l.cout], l.bias.clone(), track)?;
            Ok((k, b))
        };
        Ok(PredictorTapeWeights {
            enc1: layer(tape, &self.enc1, !self.freeze.encoder)?,
            enc2: layer(tape, &self.enc2, !self.freeze.encoder)?,
            enc3: layer(tape, &self.enc3, !self.freeze.encoder)?,
            dec1: layer(tape, &self.dec1, !self.freeze.decoder)?,
            dec2: layer(tape, &self.dec2, !self.freeze.decoder)?,
            head: layer(tape, &self.head, !self.freeze.head)?,
        })
    }

    /// Like [`Predictor::insert_weights`], but the head tensors come from
    /// `head` (a per-scene copy) with explicit tracking. Base parts stay
    /// untracked, matching the adaptation freeze contract.
    pub fn insert_weights_with_head(
        &self,
        tape: &mut Tape,
        head: &ConvLayer,
        track_head: bool,
    ) -> Result<PredictorTapeWeights, AutogradError> {
        let frozen = |tape: &mut Tape, l: &ConvLayer| -> Result<(TensorId, TensorId), AutogradError> {
            let kshape: Vec<usize> =
                if l.taps == 9 { vec![l.cout, l.cin, 3, 3] } else { vec![l.cout, l.cin] };
            let k = tape.leaf(&kshape, l.kernel.clone(), false)?;
            let b = tape.leaf(&[l.cout], l.bias.clone(), false)?;
            Ok((k, b))
        };
        let head_k = tape.leaf(&[head.cout, head.cin], head.kernel.clone(), track_head)?;
        let head_b = tape.leaf(&[head.cout], head.bias.clone(), track_head)?;
        Ok(PredictorTapeWeights {
            enc1: frozen(tape, &self.enc1)?,
            enc2: frozen(tape, &self.enc2)?,
            enc3: frozen(tape, &self.enc3)?,
            dec1: frozen(tape, &self.dec1)?,
            dec2: frozen(tape, &self.dec2)?,
            head: (head_k, head_b),
        })
    }

    /// Pure inference: logits for one observation, optionally prompted.
    pub fn forward(
        &self,
        obs: &ObservationStack,
        prompt: Option<(&[f64], ApplyMode)>,
    ) -> Result<Vec<f64>, AutogradError> {
        let mut tape = Tape::new();
        let shape = self.cfg.shape;
        if obs.channel_count() != self.cfg.hist_len + self.cfg.classes {
            return Err(AutogradError::ShapeMismatch {
                op: "predictor_forward",
                detail: format!(
                    "observation has {} channels, model expects {}",
                    obs.channel_count(),
                    self.cfg.hist_len + self.cfg.classes
                ),
            });
        }
        let input = tape.leaf(
            &[obs.channel_count(), shape.h, shape.w],
            obs.concat(),
            false,
        )?;
        let input = match prompt {
            Some((grid, mode)) => {
                let g = tape.leaf(&[shape.h, shape.w], grid.to_vec(), false)?;
                mode.apply_on_tape(&mut tape, input, g, self.cfg.hist_len, self.cfg.classes)?
            }
            None => input,
        };
        let weights = self.insert_weights(&mut tape)?;
        let logits = self.forward_on_tape(&mut tape, input, &weights)?;
        Ok(tape.values(logits).to_vec())
    }

    /// Eq-style training loss for one window: BCE-with-logits between the
    /// predicted stack and the target heatmap stack, summed over steps and
    /// pixels.
    pub fn loss(
        &self,
        window: &TrajectoryWindow,
        scene: &SceneContext,
        sigma: f64,
        prompt: Option<(&[f64], ApplyMode)>,
    ) -> Result<f64, AutogradError> {
        let obs = observation_for(window, scene, sigma, self.cfg.hist_len);
        let logits = self.forward(&obs, prompt)?;
        let target = trajectory_to_heatmaps(&window.future, self.cfg.shape, sigma);
        let mut tape = Tape::new();
        let t = self.cfg.pred_len;
        let z = tape.leaf(&[t, self.cfg.shape.h, self.cfg.shape.w], logits, false)?;
        let y = tape.leaf(&[t, self.cfg.shape.h, self.cfg.shape.w], target.grid, false)?;
        let l = tape.bce_with_logits_sum(z, y)?;
        Ok(tape.scalar_value(l))
    }

    /// Forward-then-decode: T predicted points in pixel space.
    pub fn predict_points(
        &self,
        window: &TrajectoryWindow,
        scene: &SceneContext,
        sigma: f64,
        beta: f64,
        prompt: Option<(&[f64], ApplyMode)>,
    ) -> Result<Vec<(f64, f64)>, AutogradError> {
        let obs = observation_for(window, scene, sigma, self.cfg.hist_len);
        let logits = self.forward(&obs, prompt)?;
        let stack = HeatmapStack { steps: self.cfg.pred_len, shape: self.cfg.shape, grid: logits };
        Ok(decode_prediction(&stack, beta))
    }
}

pub struct PredictorTapeWeights {
    pub enc1: (TensorId, TensorId),
    pub enc2: (TensorId, TensorId),
    pub enc3: (TensorId, TensorId),
    pub dec1: (TensorId, TensorId),
    pub dec2: (TensorId, TensorId),
    pub head: (TensorId, TensorId),
}

impl PredictorTapeWeights {
    /// Tensor ids in the canonical parameter order.
    pub fn ids(&self) -> [TensorId; 12] {
        [
            self.enc1.0, self.enc1.1, self.enc2.0, self.enc2.1, self.enc3.0, self.enc3.1,
            self.dec1.0, self.dec1.1, self.dec2.0, self.dec2.1, self.head.0, self.head.1,
        ]
    }
}

fn kernel_bias_name(kernel_name: &'static str) -> &'static str {
    match kernel_name {
        "enc1.kernel" => "enc1.bias",
        "enc2.kernel" => "enc2.bias",
        "enc3.kernel" => "enc3.bias",
        "dec1.kernel" => "dec1.bias",
        "dec2.kernel" => "dec2.bias",
        "head.kernel" => "head.bias",
        _ => unreachable!(),
    }
}

/// Build the (H heatmaps + C seg channels) observation for a window.
pub fn observation_for(
    window: &TrajectoryWindow,
    scene: &SceneContext,
    sigma: f64,
    hist_len: usize,
) -> ObservationStack {
    assert_eq!(window.past.len(), hist_len, "window history does not match model H");
    ObservationStack {
        heatmaps: trajectory_to_heatmaps(&window.past, scene.shape, sigma),
        seg: scene.seg.clone(),
        classes: scene.classes,
    }
}

/// Write the model in the named-tensor checkpoint format. Architecture
/// metadata rides along as a `meta/config` tensor so loading needs no
/// sidecar file.
pub fn save_model(path: &std::path::Path, model: &Predictor) -> std::io::Result<()> {
    let cfg = &model.cfg;
    let meta = vec![
        cfg.shape.h as f64,
        cfg.shape.w as f64,
        cfg.hist_len as f64,
        cfg.pred_len as f64,
        cfg.classes as f64,
    ];
    let mut tensors = vec![crate::autograd::NamedTensor::new("meta/config", vec![5], meta)];
    for p in model.params() {
        tensors.push(crate::autograd::NamedTensor::new(p.name, p.shape.clone(), p.values.to_vec()));
    }
    crate::autograd::save_named_tensors(path, &tensors)
}

pub fn load_model(path: &std::path::Path) -> std::io::Result<Predictor> {
    use std::io::{Error, ErrorKind};
    let bad = |msg: String| Error::new(ErrorKind::InvalidData, msg);
    let tensors = crate::autograd::load_named_tensors(path)?;
    let meta = tensors
        .iter()
        .find(|t| t.name == "meta/config")
        .ok_or_else(|| bad("checkpoint lacks meta/config".into()))?;
    if meta.values.len() != 5 {
        return Err(bad(format!("meta/config has {} entries, expected 5", meta.values.len())));
    }
    let shape = GridShape::new(meta.values[0] as usize, meta.values[1] as usize);
    let mut model = build_model(
        shape,
        meta.values[2] as usize,
        meta.values[3] as usize,
        meta.values[4] as usize,
        0,
    );
    for (name, _, values) in model.params_mut() {
        let t = tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| bad(format!("checkpoint missing tensor {name:?}")))?;
        if t.values.len() != values.len() {
            return Err(bad(format!(
                "tensor {name:?} has {} values, expected {}",
                t.values.len(),
                values.len()
            )));
        }
        *values = t.values.clone();
    }
    Ok(model)
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub sigma: f64,
    pub beta_decode: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 20, lr: 1e-3, batch_size: 16, seed: 0, sigma: 1.5, beta_decode: 30.0 }
    }
}

/// Per-window loss and gradient in the canonical 12-tensor order (frozen
/// parts yield empty gradient slots).
fn window_loss_and_grads(
    model: &Predictor,
    window: &TrajectoryWindow,
    scene: &SceneContext,
    sigma: f64,
) -> (f64, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let shape = model.cfg.shape;
    let obs = observation_for(window, scene, sigma, model.cfg.hist_len);
    let input = tape
        .leaf(&[obs.channel_count(), shape.h, shape.w], obs.concat(), false)
        .expect("finite observation");
    let weights = model.insert_weights(&mut tape).expect("weight leaves");
    let logits = model.forward_on_tape(&mut tape, input, &weights).expect("forward");
    let target = trajectory_to_heatmaps(&window.future, shape, sigma);
    let y = tape
        .leaf(&[model.cfg.pred_len, shape.h, shape.w], target.grid, false)
        .expect("finite target");
    let loss = tape.bce_with_logits_sum(logits, y).expect("loss");
    let loss_value = tape.scalar_value(loss);
    let grads = tape.backward(loss).expect("backward");
    let out = weights
        .ids()
        .iter()
        .map(|&id| grads.get(id).map(|g| g.to_vec()).unwrap_or_default())
        .collect();
    (loss_value, out)
}

/// Mini-batch Adam on the heatmap BCE loss over windows from many scenes.
/// Windows are shuffled each epoch with the run seed; the last partial
/// batch is kept. Gradients are averaged over the batch. Returns the
/// per-epoch mean window loss.
///
/// `scene_of` must resolve every window's scene id.
pub fn pretrain<'a, F>(
    model: &mut Predictor,
    windows: &[TrajectoryWindow],
    scene_of: F,
    cfg: &TrainConfig,
) -> Vec<f64>
where
    F: Fn(&str) -> &'a SceneContext + Sync + Send,
{
    assert!(!windows.is_empty(), "pretrain requires a non-empty training set");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut states: Vec<AdamState> =
        model.params().iter().map(|p| AdamState::new(p.values.len())).collect();
    let adam = AdamParams::with_lr(cfg.lr);
    let mut curve = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        shuffle(&mut order, &mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let refs: Vec<&TrajectoryWindow> = batch.iter().map(|&i| &windows[i]).collect();
            let results = map_collect(&refs, |w| {
                window_loss_and_grads(model, w, scene_of(&w.scene), cfg.sigma)
            });
            let inv = 1.0 / batch.len() as f64;
            let mut sums: Vec<Vec<f64>> =
                model.params().iter().map(|p| vec![0.0; p.values.len()]).collect();
            for (loss, grads) in &results {
                epoch_loss += loss;
                for (sum, g) in sums.iter_mut().zip(grads) {
                    for (s, &gv) in sum.iter_mut().zip(g) {
                        *s += gv * inv;
                    }
                }
            }
            // Frozen parts yield empty gradient slots and are skipped.
            for (((_, _, values), grad), state) in
                model.params_mut().into_iter().zip(&sums).zip(&mut states)
            {
                if grad.len() == values.len() {
                    adam_step(values, grad, state, &adam);
                }
            }
        }
        curve.push(epoch_loss / windows.len() as f64);
    }
    curve
}

/// Fisher-Yates with the run RNG; avoids depending on slice shuffle
/// ordering guarantees across rand versions.
pub fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::GridShape;

    fn tiny_scene(shape: GridShape) -> SceneContext {
        let labels = vec![0i64; shape.len()];
        SceneContext::from_labels("sc", shape, 2, &labels, 2).unwrap()
    }

    fn tiny_window(shape: GridShape, h: usize, t: usize) -> TrajectoryWindow {
        let pts = |n: usize, off: f64| -> Vec<(f64, f64)> {
            (0..n).map(|k| (2.0 + off + k as f64, shape.h as f64 / 2.0)).collect()
        };
        TrajectoryWindow {
            identity: 1,
            scene: "sc".into(),
            past: pts(h, 0.0),
            future: pts(t, h as f64),
            start_frame: 0,
        }
    }

    const SHAPE: GridShape = GridShape { h: 16, w: 16 };

    #[test]
    fn output_shape_contract() {
        let model = build_model(GridShape::new(36, 60), 8, 12, 12, 0);
        let scene = SceneContext::from_labels("sc", GridShape::new(36, 60), 12, &vec![0; 36 * 60], 2)
            .unwrap();
        let mut window = tiny_window(GridShape::new(36, 60), 8, 12);
        window.scene = "sc".into();
        let obs = observation_for(&window, &scene, 1.5, 8);
        let logits = model.forward(&obs, None).unwrap();
        assert_eq!(logits.len(), 12 * 36 * 60);
        assert!(logits.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn build_is_deterministic() {
        let a = build_model(SHAPE, 3, 4, 2, 7);
        let b = build_model(SHAPE, 3, 4, 2, 7);
        assert_eq!(a, b);
    }

    #[test]
    fn model_checkpoint_round_trip_is_bit_exact() {
        let model = build_model(SHAPE, 3, 4, 2, 9);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("base.cltf");
        save_model(&path, &model).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded.cfg, model.cfg);
        for (a, b) in loaded.params().iter().zip(model.params().iter()) {
            assert_eq!(a.name, b.name);
            let ab: Vec<u64> = a.values.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.values.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb, "tensor {}", a.name);
        }
    }

    #[test]
    fn param_count_matches_arithmetic() {
        let model = build_model(SHAPE, 3, 4, 2, 0);
        // enc1: (3+2)->16, enc2: 16->32, enc3: 32->64,
        // dec1: 96->32, dec2: 48->16, head: 16->4 (1x1).
        let expected = (5 * 16 * 9 + 16)
            + (16 * 32 * 9 + 32)
            + (32 * 64 * 9 + 64)
            + (96 * 32 * 9 + 32)
            + (48 * 16 * 9 + 16)
            + (16 * 4 + 4);
        assert_eq!(model.param_count(), expected);
    }

    #[test]
    fn zero_sum_prompt_is_identity() {
        let model = build_model(SHAPE, 3, 4, 2, 0);
        let scene = tiny_scene(SHAPE);
        let window = tiny_window(SHAPE, 3, 4);
        let obs = observation_for(&window, &scene, 1.5, 3);
        let zero = vec![0.0; SHAPE.len()];
        let a = model.forward(&obs, None).unwrap();
        let b = model.forward(&obs, Some((&zero, ApplyMode::SumAllHeatmaps))).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ones_mul_prompt_is_identity() {
        let model = build_model(SHAPE, 3, 4, 2, 0);
        let scene = tiny_scene(SHAPE);
        let window = tiny_window(SHAPE, 3, 4);
        let obs = observation_for(&window, &scene, 1.5, 3);
        let ones = vec![1.0; SHAPE.len()];
        let a = model.forward(&obs, None).unwrap();
        let b = model.forward(&obs, Some((&ones, ApplyMode::MulAllHeatmaps))).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn loss_nonnegative_and_zero_logit_closed_form() {
        let model = build_model(SHAPE, 3, 4, 2, 0);
        let scene = tiny_scene(SHAPE);
        let window = tiny_window(SHAPE, 3, 4);
        let loss = model.loss(&window, &scene, 1.5, None).unwrap();
        assert!(loss >= 0.0);
        // Direct check of the zero-logits closed form against the op.
        let target = trajectory_to_heatmaps(&window.future, SHAPE, 1.5);
        let expected: f64 = target.grid.iter().map(|_| 2f64.ln()).sum();
        let mut tape = Tape::new();
        let z = tape.leaf(&[4, 16, 16], vec![0.0; 4 * 256], false).unwrap();
        let y = tape.leaf(&[4, 16, 16], target.grid.clone(), false).unwrap();
        let l = tape.bce_with_logits_sum(z, y).unwrap();
        assert!((tape.scalar_value(l) - expected).abs() < 1e-9);
    }

    #[test]
    fn pretrain_zero_epochs_is_identity() {
        let mut model = build_model(SHAPE, 3, 4, 2, 0);
        let reference = model.clone();
        let scene = tiny_scene(SHAPE);
        let windows = vec![tiny_window(SHAPE, 3, 4)];
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let curve = pretrain(&mut model, &windows, |_| &scene, &cfg);
        assert!(curve.is_empty());
        assert_eq!(model, reference);
    }

    #[test]
    fn pretrain_reduces_loss_and_is_deterministic() {
        let scene = tiny_scene(SHAPE);
        let windows: Vec<TrajectoryWindow> = (0..8)
            .map(|i| {
                let mut w = tiny_window(SHAPE, 3, 4);
                w.identity = i;
                for p in w.past.iter_mut().chain(w.future.iter_mut()) {
                    p.1 = 4.0 + (i % 4) as f64 * 2.0;
                }
                w
            })
            .collect();
        let cfg = TrainConfig { epochs: 5, lr: 1e-3, batch_size: 4, ..TrainConfig::default() };
        let run = || {
            let mut model = build_model(SHAPE, 3, 4, 2, 1);
            let curve = pretrain(&mut model, &windows, |_| &scene, &cfg);
            (model, curve)
        };
        let (m1, c1) = run();
        let (m2, c2) = run();
        assert_eq!(c1, c2);
        assert_eq!(m1, m2);
        assert!(c1.last().unwrap() < c1.first().unwrap(), "curve: {c1:?}");
    }

    #[test]
    fn overfit_single_window() {
        let scene = tiny_scene(SHAPE);
        let windows = vec![tiny_window(SHAPE, 3, 4)];
        let mut model = build_model(SHAPE, 3, 4, 2, 2);
        let initial = model.loss(&windows[0], &scene, 1.5, None).unwrap();
        let cfg = TrainConfig { epochs: 500, lr: 1e-2, batch_size: 1, ..TrainConfig::default() };
        pretrain(&mut model, &windows, |_| &scene, &cfg);
        let fitted = model.loss(&windows[0], &scene, 1.5, None).unwrap();
        // Soft targets give cross-entropy a nonzero floor (the target
        // entropy); judge progress on the excess above it.
        let target = trajectory_to_heatmaps(&windows[0].future, SHAPE, 1.5);
        let floor: f64 = target
            .grid
            .iter()
            .map(|&y| {
                let h = |p: f64| if p > 0.0 { -p * p.ln() } else { 0.0 };
                h(y) + h(1.0 - y)
            })
            .sum();
        assert!(
            fitted - floor < 0.05 * (initial - floor),
            "initial {initial}, fitted {fitted}, floor {floor}"
        );
        // On the overfit window, decoded points land near ground truth.
        let pts = model.predict_points(&windows[0], &scene, 1.5, 30.0, None).unwrap();
        let ade: f64 = pts
            .iter()
            .zip(&windows[0].future)
            .map(|(p, g)| ((p.0 - g.0).powi(2) + (p.1 - g.1).powi(2)).sqrt())
            .sum::<f64>()
            / pts.len() as f64;
        assert!(ade < 1.0, "overfit ADE {ade}");
    }

    #[test]
    fn frozen_parts_do_not_move() {
        let scene = tiny_scene(SHAPE);
        let windows = vec![tiny_window(SHAPE, 3, 4)];
        let mut model = build_model(SHAPE, 3, 4, 2, 3);
        model.freeze = FreezeFlags { encoder: true, decoder: true, head: false };
        let before = model.clone();
        let cfg = TrainConfig { epochs: 3, batch_size: 1, ..TrainConfig::default() };
        pretrain(&mut model, &windows, |_| &scene, &cfg);
        assert_eq!(model.enc1, before.enc1);
        assert_eq!(model.enc2, before.enc2);
        assert_eq!(model.enc3, before.enc3);
        assert_eq!(model.dec1, before.dec1);
        assert_eq!(model.dec2, before.dec2);
        assert_ne!(model.head, before.head);
    }

    #[test]
    fn prompt_gradient_flows_through_frozen_model() {
        let mut model = build_model(SHAPE, 3, 4, 2, 4);
        model.freeze = FreezeFlags { encoder: true, decoder: true, head: true };
        let scene = tiny_scene(SHAPE);
        let window = tiny_window(SHAPE, 3, 4);
        let obs = observation_for(&window, &scene, 1.5, 3);
        let mut tape = Tape::new();
        let input = tape.leaf(&[5, 16, 16], obs.concat(), false).unwrap();
        let grid = tape.leaf(&[16, 16], vec![0.01; 256], true).unwrap();
        let prompted = ApplyMode::SumAllHeatmaps
            .apply_on_tape(&mut tape, input, grid, 3, 2)
            .unwrap();
        let weights = model.insert_weights(&mut tape).unwrap();
        let logits = model.forward_on_tape(&mut tape, prompted, &weights).unwrap();
        let target = trajectory_to_heatmaps(&window.future, SHAPE, 1.5);
        let y = tape.leaf(&[4, 16, 16], target.grid, false).unwrap();
        let loss = tape.bce_with_logits_sum(logits, y).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(grid).unwrap();
        assert!(g.iter().any(|&v| v != 0.0), "prompt gradient is identically zero");
        for &id in weights.ids().iter() {
            assert!(grads.get(id).is_none(), "frozen weight got a gradient");
        }
    }
}
