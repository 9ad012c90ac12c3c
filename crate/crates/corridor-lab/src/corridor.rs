//! Latent corridor prompts and the scene-adaptation rules.
//!
//! A corridor is a rank-1 spatial prompt: an h-vector and a w-vector whose
//! outer product is combined with the predictor's input heatmaps. Training
//! a corridor (and optionally a per-scene or shared head copy) against a
//! frozen base predictor adapts it to a deployment scene.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autograd::{
    adam_step, load_named_tensors, save_named_tensors, AdamParams, AdamState, NamedTensor, Tape,
    TensorId,
};
use crate::core::{GridShape, SplitDataset, TrajectoryWindow};
use crate::heatmap::{trajectory_to_heatmaps, HeatmapStack, ObservationStack};
use crate::ingest::SceneContext;
use crate::metrics;
use crate::parallel::map_collect;
use crate::predictor::{observation_for, shuffle, ConvLayer, Predictor};

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error("scene {scene} has no train windows at fraction m={fraction}")]
    EmptyTrainSet { scene: String, fraction: f64 },
    #[error("autograd failure during adaptation: {0}")]
    Autograd(#[from] crate::autograd::AutogradError),
    #[error("corridor store: {0}")]
    Store(String),
}

/// Where and how the prompt combines with the predictor input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApplyMode {
    SumAllHeatmaps,
    SumFirstHeatmap,
    SumSeg,
    SumBoth,
    MulAllHeatmaps,
    MulFirstHeatmap,
    MulSeg,
    MulBoth,
}

impl ApplyMode {
    pub const ALL: [ApplyMode; 8] = [
        ApplyMode::SumAllHeatmaps,
        ApplyMode::SumFirstHeatmap,
        ApplyMode::SumSeg,
        ApplyMode::SumBoth,
        ApplyMode::MulAllHeatmaps,
        ApplyMode::MulFirstHeatmap,
        ApplyMode::MulSeg,
        ApplyMode::MulBoth,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ApplyMode::SumAllHeatmaps => "SumAllHeatmaps",
            ApplyMode::SumFirstHeatmap => "SumFirstHeatmap",
            ApplyMode::SumSeg => "SumSeg",
            ApplyMode::SumBoth => "SumBoth",
            ApplyMode::MulAllHeatmaps => "MulAllHeatmaps",
            ApplyMode::MulFirstHeatmap => "MulFirstHeatmap",
            ApplyMode::MulSeg => "MulSeg",
            ApplyMode::MulBoth => "MulBoth",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn is_mul(&self) -> bool {
        matches!(
            self,
            ApplyMode::MulAllHeatmaps | ApplyMode::MulFirstHeatmap | ApplyMode::MulSeg | ApplyMode::MulBoth
        )
    }

    /// Channel mask over the (H heatmaps + C seg) concatenated input.
    pub fn channel_mask(&self, hist_len: usize, classes: usize) -> Vec<bool> {
        let mut mask = vec![false; hist_len + classes];
        match self {
            ApplyMode::SumAllHeatmaps | ApplyMode::MulAllHeatmaps => {
                mask[..hist_len].fill(true);
            }
            ApplyMode::SumFirstHeatmap | ApplyMode::MulFirstHeatmap => {
                mask[0] = true;
            }
            ApplyMode::SumSeg | ApplyMode::MulSeg => {
                mask[hist_len..].fill(true);
            }
            ApplyMode::SumBoth | ApplyMode::MulBoth => {
                mask.fill(true);
            }
        }
        mask
    }

    /// Applies the prompt grid to an input tensor [H+C, h, w] on a tape.
    pub fn apply_on_tape(
        &self,
        tape: &mut Tape,
        input: TensorId,
        grid: TensorId,
        hist_len: usize,
        classes: usize,
    ) -> Result<TensorId, crate::autograd::AutogradError> {
        let mask = self.channel_mask(hist_len, classes);
        if self.is_mul() {
            tape.mul_channels(input, grid, &mask)
        } else {
            tape.add_channels(input, grid, &mask)
        }
    }
}

/// Rank-1 prompt for one scene: parameter count is exactly h + w.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCorridor {
    pub scene: String,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl LatentCorridor {
    pub fn zeros(scene: &str, shape: GridShape) -> Self {
        Self { scene: scene.to_string(), u: vec![0.0; shape.h], v: vec![0.0; shape.w] }
    }

    pub fn param_count(&self) -> usize {
        self.u.len() + self.v.len()
    }

    /// Outer product u vT as a row-major h x w grid.
    pub fn materialize(&self) -> Vec<f64> {
        let mut grid = Vec::with_capacity(self.u.len() * self.v.len());
        for &uv in &self.u {
            for &vv in &self.v {
                grid.push(uv * vv);
            }
        }
        grid
    }
}

/// Kaiming-uniform init, fan-in per vector, deterministic in seed.
pub fn init_corridor(scene: &str, shape: GridShape, seed: u64) -> LatentCorridor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bu = (6.0 / shape.h as f64).sqrt();
    let u = (0..shape.h).map(|_| rng.gen_range(-bu..bu)).collect();
    let bv = (6.0 / shape.w as f64).sqrt();
    let v = (0..shape.w).map(|_| rng.gen_range(-bv..bv)).collect();
    LatentCorridor { scene: scene.to_string(), u, v }
}

/// Pure (non-tape) prompt application on an observation.
pub fn apply_prompt(obs: &ObservationStack, grid: &[f64], mode: ApplyMode) -> ObservationStack {
    let shape = obs.heatmaps.shape;
    assert_eq!(grid.len(), shape.len(), "prompt grid does not match observation shape");
    let hist_len = obs.heatmaps.steps;
    let mask = mode.channel_mask(hist_len, obs.classes);
    let combine = |buf: &mut [f64]| {
        if mode.is_mul() {
            for (o, &g) in buf.iter_mut().zip(grid) {
                *o *= g;
            }
        } else {
            for (o, &g) in buf.iter_mut().zip(grid) {
                *o += g;
            }
        }
    };
    let hw = shape.len();
    let mut heat = obs.heatmaps.grid.clone();
    for step in 0..hist_len {
        if mask[step] {
            combine(&mut heat[step * hw..(step + 1) * hw]);
        }
    }
    let mut seg = obs.seg.clone();
    for ch in 0..obs.classes {
        if mask[hist_len + ch] {
            combine(&mut seg[ch * hw..(ch + 1) * hw]);
        }
    }
    ObservationStack {
        heatmaps: HeatmapStack { steps: hist_len, shape, grid: heat },
        seg,
        classes: obs.classes,
    }
}

/// Prompt parameters as a fraction of the base model's parameter count.
pub fn parameter_overhead(base_param_count: usize, shape: GridShape, scenes: usize) -> f64 {
    assert!(base_param_count > 0 && scenes > 0);
    (scenes * (shape.h + shape.w)) as f64 / base_param_count as f64
}

/// The four adaptation configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdaptMode {
    /// Corridors only; the whole base predictor stays frozen.
    Lc,
    /// Corridors per scene plus one head copy tuned jointly over all scenes.
    LcJointFt,
    /// Corridor plus a private head copy per scene.
    LcPerSceneFt,
    /// Private head copy per scene, no corridor.
    FinetuneOnly,
}

impl AdaptMode {
    pub const ALL: [AdaptMode; 4] =
        [AdaptMode::Lc, AdaptMode::LcJointFt, AdaptMode::LcPerSceneFt, AdaptMode::FinetuneOnly];

    pub fn name(&self) -> &'static str {
        match self {
            AdaptMode::Lc => "LC",
            AdaptMode::LcJointFt => "LCJointFT",
            AdaptMode::LcPerSceneFt => "LCPerSceneFT",
            AdaptMode::FinetuneOnly => "FinetuneOnly",
        }
    }

    /// Case- and separator-insensitive: `LC`, `lc`, `finetune_only`, and
    /// `LCPerSceneFT` all resolve.
    pub fn parse(s: &str) -> Option<Self> {
        let norm = s.to_ascii_lowercase().replace(['_', '-'], "");
        Self::ALL.into_iter().find(|m| m.name().to_ascii_lowercase() == norm)
    }

    pub fn uses_corridor(&self) -> bool {
        !matches!(self, AdaptMode::FinetuneOnly)
    }

    pub fn tunes_head(&self) -> bool {
        !matches!(self, AdaptMode::Lc)
    }

    /// Total trainable parameters over K scenes.
    pub fn trainable_param_count(&self, shape: GridShape, head_params: usize, scenes: usize) -> usize {
        let hw = shape.h + shape.w;
        match self {
            AdaptMode::Lc => scenes * hw,
            AdaptMode::LcJointFt => scenes * hw + head_params,
            AdaptMode::LcPerSceneFt => scenes * (hw + head_params),
            AdaptMode::FinetuneOnly => scenes * head_params,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdaptationConfig {
    pub mode: AdaptMode,
    pub apply_mode: ApplyMode,
    pub prompt_lr: f64,
    pub head_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub fraction: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            mode: AdaptMode::Lc,
            apply_mode: ApplyMode::SumAllHeatmaps,
            prompt_lr: 1e-2,
            head_lr: 1e-3,
            epochs: 10,
            batch_size: 16,
            fraction: 0.8,
            sigma: 1.5,
            seed: 0,
        }
    }
}

/// One scene's training inputs for adaptation.
#[derive(Debug, Clone)]
pub struct SceneBundle {
    pub ctx: SceneContext,
    pub data: SplitDataset,
}

/// Per-scene learned deltas against a shared frozen base.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneAdaptation {
    pub corridor: Option<LatentCorridor>,
    pub head: Option<ConvLayer>,
}

/// A view over the shared base plus per-scene deltas. Frozen parts are
/// stored once; per-scene storage is the corridor vectors and, when the
/// mode tunes it, a head copy.
#[derive(Debug, Clone)]
pub struct AdaptedPredictorSet {
    pub base: Predictor,
    pub mode: AdaptMode,
    pub apply_mode: ApplyMode,
    pub scenes: BTreeMap<String, SceneAdaptation>,
}

impl AdaptedPredictorSet {
    /// Logits for one window under a scene's adaptation.
    pub fn predict_points(
        &self,
        scene: &str,
        window: &TrajectoryWindow,
        ctx: &SceneContext,
        sigma: f64,
        beta: f64,
    ) -> Result<Vec<(f64, f64)>, AdaptError> {
        let adaptation = self.scenes.get(scene);
        let grid = adaptation.and_then(|a| a.corridor.as_ref()).map(|c| c.materialize());
        let obs = observation_for(window, ctx, sigma, self.base.cfg.hist_len);
        let mut tape = Tape::new();
        let shape = self.base.cfg.shape;
        let input =
            tape.leaf(&[obs.channel_count(), shape.h, shape.w], obs.concat(), false)?;
        let input = match &grid {
            Some(g) => {
                let gid = tape.leaf(&[shape.h, shape.w], g.clone(), false)?;
                self.apply_mode.apply_on_tape(
                    &mut tape,
                    input,
                    gid,
                    self.base.cfg.hist_len,
                    self.base.cfg.classes,
                )?
            }
            None => input,
        };
        let head = adaptation.and_then(|a| a.head.as_ref()).unwrap_or(&self.base.head);
        let weights = self.base.insert_weights_with_head(&mut tape, head, false)?;
        let logits = self.base.forward_on_tape(&mut tape, input, &weights)?;
        let stack = HeatmapStack {
            steps: self.base.cfg.pred_len,
            shape,
            grid: tape.values(logits).to_vec(),
        };
        Ok(crate::heatmap::decode_prediction(&stack, beta))
    }

    /// Mean ADE/FDE of this view on a scene's windows.
    pub fn evaluate(
        &self,
        scene: &str,
        windows: &[TrajectoryWindow],
        ctx: &SceneContext,
        sigma: f64,
        beta: f64,
    ) -> Result<metrics::EvalReport, AdaptError> {
        let preds = map_collect(windows, |w| {
            self.predict_points(scene, w, ctx, sigma, beta).map(|p| (p, w.future.clone()))
        });
        let mut pairs = Vec::with_capacity(preds.len());
        for p in preds {
            pairs.push(p?);
        }
        Ok(metrics::report_from_pairs(&pairs))
    }

    /// Serialize corridors and head deltas per scene in the named-tensor
    /// checkpoint format.
    pub fn save_store(&self, path: &Path) -> Result<(), AdaptError> {
        let mut tensors = Vec::new();
        for (scene, a) in &self.scenes {
            if let Some(c) = &a.corridor {
                tensors.push(NamedTensor::new(format!("{scene}/u"), vec![c.u.len()], c.u.clone()));
                tensors.push(NamedTensor::new(format!("{scene}/v"), vec![c.v.len()], c.v.clone()));
            }
            if let Some(h) = &a.head {
                tensors.push(NamedTensor::new(
                    format!("{scene}/head.kernel"),
                    vec![h.cout, h.cin],
                    h.kernel.clone(),
                ));
                tensors.push(NamedTensor::new(
                    format!("{scene}/head.bias"),
                    vec![h.cout],
                    h.bias.clone(),
                ));
            }
        }
        save_named_tensors(path, &tensors).map_err(|e| AdaptError::Store(e.to_string()))
    }

    /// Load per-scene deltas previously written by [`Self::save_store`].
    pub fn load_store(
        base: Predictor,
        mode: AdaptMode,
        apply_mode: ApplyMode,
        path: &Path,
    ) -> Result<Self, AdaptError> {
        let tensors = load_named_tensors(path).map_err(|e| AdaptError::Store(e.to_string()))?;
        let mut scenes: BTreeMap<String, SceneAdaptation> = BTreeMap::new();
        let mut heads: BTreeMap<String, (Option<Vec<f64>>, Option<Vec<f64>>)> = BTreeMap::new();
        for t in tensors {
            let (scene, field) = t
                .name
                .rsplit_once('/')
                .ok_or_else(|| AdaptError::Store(format!("bad tensor name {:?}", t.name)))?;
            let entry = scenes
                .entry(scene.to_string())
                .or_insert(SceneAdaptation { corridor: None, head: None });
            match field {
                "u" => {
                    entry
                        .corridor
                        .get_or_insert_with(|| LatentCorridor::zeros(scene, base.cfg.shape))
                        .u = t.values;
                }
                "v" => {
                    entry
                        .corridor
                        .get_or_insert_with(|| LatentCorridor::zeros(scene, base.cfg.shape))
                        .v = t.values;
                }
                "head.kernel" => heads.entry(scene.to_string()).or_default().0 = Some(t.values),
                "head.bias" => heads.entry(scene.to_string()).or_default().1 = Some(t.values),
                other => return Err(AdaptError::Store(format!("unknown field {other:?}"))),
            }
        }
        for (scene, (kernel, bias)) in heads {
            let (kernel, bias) = match (kernel, bias) {
                (Some(k), Some(b)) => (k, b),
                _ => return Err(AdaptError::Store(format!("scene {scene}: incomplete head"))),
            };
            let head = ConvLayer {
                cin: base.head.cin,
                cout: base.head.cout,
                taps: 1,
                kernel,
                bias,
            };
            scenes.get_mut(&scene).unwrap().head = Some(head);
        }
        Ok(Self { base, mode, apply_mode, scenes })
    }
}

/// Stable per-scene seed derivation (FNV-1a over the scene id).
fn scene_seed(base_seed: u64, scene: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in scene.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    base_seed ^ h
}

/// Adapt a pretrained base to each scene under the configured mode.
///
/// Freeze contract: encoder and decoder are frozen in every mode; the base
/// head is frozen too (modes that tune a head train a copy). The base
/// predictor is never mutated.
pub fn adapt(
    base: &Predictor,
    scenes: &BTreeMap<String, SceneBundle>,
    cfg: &AdaptationConfig,
) -> Result<AdaptedPredictorSet, AdaptError> {
    for (name, bundle) in scenes {
        if bundle.data.train_windows.is_empty() {
            return Err(AdaptError::EmptyTrainSet {
                scene: name.clone(),
                fraction: cfg.fraction,
            });
        }
    }
    let adaptations = match cfg.mode {
        AdaptMode::LcJointFt => adapt_joint(base, scenes, cfg)?,
        _ => {
            // Independent per-scene jobs.
            let entries: Vec<(&String, &SceneBundle)> = scenes.iter().collect();
            let results = map_collect(&entries, |(name, bundle)| {
                adapt_single_scene(base, name, bundle, cfg)
            });
            let mut out = BTreeMap::new();
            for ((name, _), result) in entries.iter().zip(results) {
                out.insert((*name).clone(), result?);
            }
            out
        }
    };
    Ok(AdaptedPredictorSet {
        base: base.clone(),
        mode: cfg.mode,
        apply_mode: cfg.apply_mode,
        scenes: adaptations,
    })
}

struct WindowGrads {
    u: Option<Vec<f64>>,
    v: Option<Vec<f64>>,
    head_kernel: Option<Vec<f64>>,
    head_bias: Option<Vec<f64>>,
}

/// One tape pass for one window: loss plus grads for whichever of
/// (corridor, head copy) are present.
fn window_pass(
    base: &Predictor,
    window: &TrajectoryWindow,
    ctx: &SceneContext,
    corridor: Option<&LatentCorridor>,
    head: &ConvLayer,
    track_head: bool,
    apply_mode: ApplyMode,
    sigma: f64,
) -> Result<WindowGrads, AdaptError> {
    let mut tape = Tape::new();
    let shape = base.cfg.shape;
    let obs = observation_for(window, ctx, sigma, base.cfg.hist_len);
    let input = tape.leaf(&[obs.channel_count(), shape.h, shape.w], obs.concat(), false)?;
    let corridor_ids = match corridor {
        Some(c) => {
            let u = tape.leaf(&[c.u.len()], c.u.clone(), true)?;
            let v = tape.leaf(&[c.v.len()], c.v.clone(), true)?;
            Some((u, v))
        }
        None => None,
    };
    let input = match corridor_ids {
        Some((u, v)) => {
            let grid = tape.outer(u, v)?;
            apply_mode.apply_on_tape(&mut tape, input, grid, base.cfg.hist_len, base.cfg.classes)?
        }
        None => input,
    };
    let weights = base.insert_weights_with_head(&mut tape, head, track_head)?;
    let logits = base.forward_on_tape(&mut tape, input, &weights)?;
    let target = trajectory_to_heatmaps(&window.future, shape, sigma);
    let y = tape.leaf(&[base.cfg.pred_len, shape.h, shape.w], target.grid, false)?;
    let loss = tape.bce_with_logits_sum(logits, y)?;
    let grads = tape.backward(loss)?;
    Ok(WindowGrads {
        u: corridor_ids.and_then(|(u, _)| grads.get(u).map(<[f64]>::to_vec)),
        v: corridor_ids.and_then(|(_, v)| grads.get(v).map(<[f64]>::to_vec)),
        head_kernel: if track_head { grads.get(weights.head.0).map(<[f64]>::to_vec) } else { None },
        head_bias: if track_head { grads.get(weights.head.1).map(<[f64]>::to_vec) } else { None },
    })
}

fn add_scaled(acc: &mut [f64], g: &[f64], scale: f64) {
    for (a, &b) in acc.iter_mut().zip(g) {
        *a += b * scale;
    }
}

fn adapt_single_scene(
    base: &Predictor,
    scene: &str,
    bundle: &SceneBundle,
    cfg: &AdaptationConfig,
) -> Result<SceneAdaptation, AdaptError> {
    let seed = scene_seed(cfg.seed, scene);
    let mut corridor = cfg
        .mode
        .uses_corridor()
        .then(|| init_corridor(scene, base.cfg.shape, seed));
    let mut head = cfg.mode.tunes_head().then(|| base.head.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let windows = &bundle.data.train_windows;
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let prompt_adam = AdamParams::with_lr(cfg.prompt_lr);
    let head_adam = AdamParams::with_lr(cfg.head_lr);
    let shape = base.cfg.shape;
    let mut st_u = AdamState::new(shape.h);
    let mut st_v = AdamState::new(shape.w);
    let mut st_hk = AdamState::new(base.head.kernel.len());
    let mut st_hb = AdamState::new(base.head.bias.len());
    for _ in 0..cfg.epochs {
        shuffle(&mut order, &mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let refs: Vec<&TrajectoryWindow> = batch.iter().map(|&i| &windows[i]).collect();
            let cur_head = head.as_ref().unwrap_or(&base.head);
            let cur_corridor = corridor.as_ref();
            let results = map_collect(&refs, |w| {
                window_pass(
                    base,
                    w,
                    &bundle.ctx,
                    cur_corridor,
                    cur_head,
                    head.is_some(),
                    cfg.apply_mode,
                    cfg.sigma,
                )
            });
            let inv = 1.0 / batch.len() as f64;
            let mut gu = vec![0.0; shape.h];
            let mut gv = vec![0.0; shape.w];
            let mut ghk = vec![0.0; base.head.kernel.len()];
            let mut ghb = vec![0.0; base.head.bias.len()];
            for r in results {
                let r = r?;
                if let Some(g) = &r.u {
                    add_scaled(&mut gu, g, inv);
                }
                if let Some(g) = &r.v {
                    add_scaled(&mut gv, g, inv);
                }
                if let Some(g) = &r.head_kernel {
                    add_scaled(&mut ghk, g, inv);
                }
                if let Some(g) = &r.head_bias {
                    add_scaled(&mut ghb, g, inv);
                }
            }
            if let Some(c) = corridor.as_mut() {
                adam_step(&mut c.u, &gu, &mut st_u, &prompt_adam);
                adam_step(&mut c.v, &gv, &mut st_v, &prompt_adam);
            }
            if let Some(h) = head.as_mut() {
                adam_step(&mut h.kernel, &ghk, &mut st_hk, &head_adam);
                adam_step(&mut h.bias, &ghb, &mut st_hb, &head_adam);
            }
        }
    }
    Ok(SceneAdaptation { corridor, head })
}

/// Joint finetuning: per-scene corridors plus one head copy shared across
/// scenes, trained on mixed-scene batches over the union of train windows.
fn adapt_joint(
    base: &Predictor,
    scenes: &BTreeMap<String, SceneBundle>,
    cfg: &AdaptationConfig,
) -> Result<BTreeMap<String, SceneAdaptation>, AdaptError> {
    let shape = base.cfg.shape;
    let mut corridors: BTreeMap<String, LatentCorridor> = scenes
        .keys()
        .map(|name| {
            (name.clone(), init_corridor(name, shape, scene_seed(cfg.seed, name)))
        })
        .collect();
    let mut head = base.head.clone();
    // Union of (scene, window-index) pairs in deterministic order.
    let pool: Vec<(&String, &SceneBundle, usize)> = scenes
        .iter()
        .flat_map(|(name, b)| (0..b.data.train_windows.len()).map(move |i| (name, b, i)))
        .collect();
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let prompt_adam = AdamParams::with_lr(cfg.prompt_lr);
    let head_adam = AdamParams::with_lr(cfg.head_lr);
    let mut st_prompts: BTreeMap<String, (AdamState, AdamState)> = scenes
        .keys()
        .map(|n| (n.clone(), (AdamState::new(shape.h), AdamState::new(shape.w))))
        .collect();
    let mut st_hk = AdamState::new(head.kernel.len());
    let mut st_hb = AdamState::new(head.bias.len());
    for _ in 0..cfg.epochs {
        shuffle(&mut order, &mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let items: Vec<&(&String, &SceneBundle, usize)> =
                batch.iter().map(|&i| &pool[i]).collect();
            let corridors_ref = &corridors;
            let head_ref = &head;
            let results = map_collect(&items, |(name, bundle, wi)| {
                window_pass(
                    base,
                    &bundle.data.train_windows[*wi],
                    &bundle.ctx,
                    Some(&corridors_ref[*name]),
                    head_ref,
                    true,
                    cfg.apply_mode,
                    cfg.sigma,
                )
            });
            let inv = 1.0 / batch.len() as f64;
            let mut gu: BTreeMap<&String, Vec<f64>> = BTreeMap::new();
            let mut gv: BTreeMap<&String, Vec<f64>> = BTreeMap::new();
            let mut ghk = vec![0.0; head.kernel.len()];
            let mut ghb = vec![0.0; head.bias.len()];
            for ((name, _, _), r) in items.iter().zip(results) {
                let r = r?;
                if let Some(g) = &r.u {
                    add_scaled(gu.entry(name).or_insert_with(|| vec![0.0; shape.h]), g, inv);
                }
                if let Some(g) = &r.v {
                    add_scaled(gv.entry(name).or_insert_with(|| vec![0.0; shape.w]), g, inv);
                }
                if let Some(g) = &r.head_kernel {
                    add_scaled(&mut ghk, g, inv);
                }
                if let Some(g) = &r.head_bias {
                    add_scaled(&mut ghb, g, inv);
                }
            }
            for (name, g) in gu {
                let c = corridors.get_mut(name).unwrap();
                let st = st_prompts.get_mut(name.as_str()).unwrap();
                adam_step(&mut c.u, &g, &mut st.0, &prompt_adam);
            }
            for (name, g) in gv {
                let c = corridors.get_mut(name).unwrap();
                let st = st_prompts.get_mut(name.as_str()).unwrap();
                adam_step(&mut c.v, &g, &mut st.1, &prompt_adam);
            }
            adam_step(&mut head.kernel, &ghk, &mut st_hk, &head_adam);
            adam_step(&mut head.bias, &ghb, &mut st_hb, &head_adam);
        }
    }
    Ok(scenes
        .keys()
        .map(|name| {
            (
                name.clone(),
                SceneAdaptation {
                    corridor: corridors.remove(name),
                    head: Some(head.clone()),
                },
            )
        })
        .collect())
}

/// Largest absolute 2x2 minor of a grid; zero (to fp tolerance) iff the
/// grid has rank <= 1.
pub fn max_minor_2x2(grid: &[f64], shape: GridShape) -> f64 {
    let mut max = 0.0f64;
    for r in 0..shape.h - 1 {
        for c in 0..shape.w - 1 {
            let a = grid[r * shape.w + c];
            let b = grid[r * shape.w + c + 1];
            let d = grid[(r + 1) * shape.w + c];
            let e = grid[(r + 1) * shape.w + c + 1];
            max = max.max((a * e - b * d).abs());
        }
    }
    max
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::{chronological_split, Sample, Tracklet, WindowSpec};
    use crate::predictor::build_model;

    const SHAPE: GridShape = GridShape { h: 16, w: 16 };

    fn test_scene(name: &str) -> SceneContext {
        SceneContext::from_labels(name, SHAPE, 2, &vec![0; SHAPE.len()], 2).unwrap()
    }

    fn test_bundle(name: &str, n_ids: u64) -> SceneBundle {
        let tracklets: Vec<Tracklet> = (0..n_ids)
            .map(|id| Tracklet {
                identity: id,
                scene: name.to_string(),
                samples: (0..10)
                    .map(|k| Sample {
                        frame: id as i64 * 3 + k,
                        x: 2.0 + k as f64 + (id % 3) as f64,
                        y: 3.0 + (id % 5) as f64 * 2.0,
                    })
                    .collect(),
                rate: 2,
            })
            .collect();
        let spec = WindowSpec::new(3, 4, 2, 2);
        let data = chronological_split(&tracklets, 0.8, &spec).unwrap();
        SceneBundle { ctx: test_scene(name), data }
    }

    #[test]
    fn corridor_param_count() {
        let c = init_corridor("sc", GridShape::new(36, 60), 0);
        assert_eq!(c.param_count(), 96);
    }

    #[test]
    fn corridor_deterministic_and_nonzero() {
        let a = init_corridor("sc", SHAPE, 5);
        let b = init_corridor("sc", SHAPE, 5);
        assert_eq!(a, b);
        assert!(a.u.iter().chain(&a.v).all(|v| v.is_finite()));
        assert!(a.u.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn materialize_basis_vectors() {
        let mut c = LatentCorridor::zeros("sc", SHAPE);
        c.u[2] = 1.0;
        c.v[5] = 1.0;
        let grid = c.materialize();
        for (i, &g) in grid.iter().enumerate() {
            let expected = if i == 2 * 16 + 5 { 1.0 } else { 0.0 };
            assert_eq!(g, expected);
        }
    }

    #[test]
    fn materialize_zero_u_gives_zero_grid() {
        let mut c = init_corridor("sc", SHAPE, 1);
        c.u = vec![0.0; SHAPE.h];
        assert!(c.materialize().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn materialize_rank_one_minors() {
        let c = init_corridor("sc", SHAPE, 9);
        let m = max_minor_2x2(&c.materialize(), SHAPE);
        assert!(m < 1e-12, "minor {m}");
    }

    #[test]
    fn apply_prompt_zero_sum_identity() {
        let scene = test_scene("sc");
        let obs = ObservationStack {
            heatmaps: trajectory_to_heatmaps(&[(2.0, 3.0), (3.0, 3.0)], SHAPE, 1.5),
            seg: scene.seg.clone(),
            classes: 2,
        };
        let zero = vec![0.0; SHAPE.len()];
        for mode in [ApplyMode::SumAllHeatmaps, ApplyMode::SumSeg, ApplyMode::SumBoth] {
            assert_eq!(apply_prompt(&obs, &zero, mode), obs);
        }
        let ones = vec![1.0; SHAPE.len()];
        assert_eq!(apply_prompt(&obs, &ones, ApplyMode::MulAllHeatmaps), obs);
    }

    #[test]
    fn apply_prompt_sum_all_differs_by_grid() {
        let scene = test_scene("sc");
        let obs = ObservationStack {
            heatmaps: trajectory_to_heatmaps(&[(2.0, 3.0), (3.0, 3.0)], SHAPE, 1.5),
            seg: scene.seg.clone(),
            classes: 2,
        };
        let grid: Vec<f64> = (0..SHAPE.len()).map(|i| i as f64 * 0.01).collect();
        let out = apply_prompt(&obs, &grid, ApplyMode::SumAllHeatmaps);
        let hw = SHAPE.len();
        for step in 0..2 {
            for px in 0..hw {
                let diff = out.heatmaps.grid[step * hw + px] - obs.heatmaps.grid[step * hw + px];
                assert!((diff - grid[px]).abs() < 1e-15);
            }
        }
        assert_eq!(out.seg, obs.seg);
    }

    #[test]
    fn apply_prompt_first_heatmap_only() {
        let scene = test_scene("sc");
        let obs = ObservationStack {
            heatmaps: trajectory_to_heatmaps(&[(2.0, 3.0), (3.0, 3.0)], SHAPE, 1.5),
            seg: scene.seg.clone(),
            classes: 2,
        };
        let grid = vec![0.5; SHAPE.len()];
        let out = apply_prompt(&obs, &grid, ApplyMode::SumFirstHeatmap);
        let hw = SHAPE.len();
        assert_ne!(&out.heatmaps.grid[..hw], &obs.heatmaps.grid[..hw]);
        assert_eq!(&out.heatmaps.grid[hw..], &obs.heatmaps.grid[hw..]);
    }

    #[test]
    fn overhead_paper_scale() {
        let frac = parameter_overhead(900_000, GridShape::new(288, 480), 1);
        assert!((frac - 768.0 / 900_000.0).abs() < 1e-12);
        assert!(frac < 0.001);
        // Naive full-grid prompt at paper scale.
        assert_eq!(288 * 480, 138_240);
        let naive = 138_240.0 / 900_000.0;
        assert!(naive > 0.15);
    }

    #[test]
    fn trainable_param_counts() {
        let base = build_model(SHAPE, 3, 4, 2, 0);
        let head_params = base.head.param_count();
        let hw = SHAPE.h + SHAPE.w;
        let k = 3;
        assert_eq!(AdaptMode::Lc.trainable_param_count(SHAPE, head_params, k), k * hw);
        assert_eq!(
            AdaptMode::LcJointFt.trainable_param_count(SHAPE, head_params, k),
            k * hw + head_params
        );
        assert_eq!(
            AdaptMode::LcPerSceneFt.trainable_param_count(SHAPE, head_params, k),
            k * (hw + head_params)
        );
        assert_eq!(
            AdaptMode::FinetuneOnly.trainable_param_count(SHAPE, head_params, k),
            k * head_params
        );
    }

    #[test]
    fn lc_mode_leaves_base_untouched_and_zero_prompt_recovers_base() {
        let base = build_model(SHAPE, 3, 4, 2, 0);
        let reference = base.clone();
        let mut scenes = BTreeMap::new();
        scenes.insert("a".to_string(), test_bundle("a", 6));
        let cfg = AdaptationConfig {
            epochs: 2,
            batch_size: 4,
            ..AdaptationConfig::default()
        };
        let adapted = adapt(&base, &scenes, &cfg).unwrap();
        assert_eq!(base, reference);
        assert_eq!(adapted.base, reference);
        let a = &adapted.scenes["a"];
        assert!(a.head.is_none());
        let c = a.corridor.as_ref().unwrap();
        // Corridor moved during training.
        let init = init_corridor("a", SHAPE, scene_seed(cfg.seed, "a"));
        let moved: f64 = c
            .u
            .iter()
            .zip(&init.u)
            .chain(c.v.iter().zip(&init.v))
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(moved > 0.0, "prompt never moved");
        // Rank-1 invariant survives training.
        assert!(max_minor_2x2(&c.materialize(), SHAPE) < 1e-12);
        // Zero corridor reproduces the base predictor bitwise.
        let mut zeroed = adapted.clone();
        zeroed.scenes.get_mut("a").unwrap().corridor = Some(LatentCorridor::zeros("a", SHAPE));
        let w = &scenes["a"].data.test_windows[0];
        let from_view = zeroed.predict_points("a", w, &scenes["a"].ctx, 1.5, 30.0).unwrap();
        let from_base = base.predict_points(w, &scenes["a"].ctx, 1.5, 30.0, None).unwrap();
        assert_eq!(from_view, from_base);
    }

    #[test]
    fn scene_isolation() {
        let base = build_model(SHAPE, 3, 4, 2, 0);
        let mut one = BTreeMap::new();
        one.insert("a".to_string(), test_bundle("a", 6));
        let mut two = one.clone();
        two.insert("b".to_string(), test_bundle("b", 7));
        let cfg = AdaptationConfig { epochs: 1, batch_size: 4, ..AdaptationConfig::default() };
        let only_a = adapt(&base, &one, &cfg).unwrap();
        let both = adapt(&base, &two, &cfg).unwrap();
        assert_eq!(only_a.scenes["a"], both.scenes["a"]);
    }

    #[test]
    fn empty_train_set_names_scene() {
        let base = build_model(SHAPE, 3, 4, 2, 0);
        let mut bundle = test_bundle("empty-scene", 6);
        bundle.data.train_windows.clear();
        let mut scenes = BTreeMap::new();
        scenes.insert("empty-scene".to_string(), bundle);
        let cfg = AdaptationConfig::default();
        let err = adapt(&base, &scenes, &cfg).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("empty-scene") && msg.contains("0.8"), "{msg}");
    }

    #[test]
    fn store_round_trip() {
        let base = build_model(SHAPE, 3, 4, 2, 0);
        let mut scenes = BTreeMap::new();
        scenes.insert("a".to_string(), test_bundle("a", 6));
        let cfg = AdaptationConfig {
            mode: AdaptMode::LcPerSceneFt,
            epochs: 1,
            batch_size: 4,
            ..AdaptationConfig::default()
        };
        let adapted = adapt(&base, &scenes, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.cltf");
        adapted.save_store(&path).unwrap();
        let loaded = AdaptedPredictorSet::load_store(
            base,
            AdaptMode::LcPerSceneFt,
            ApplyMode::SumAllHeatmaps,
            &path,
        )
        .unwrap();
        assert_eq!(adapted.scenes, loaded.scenes);
    }

    #[test]
    fn joint_ft_shares_one_head() {
        let base = build_model(SHAPE, 3, 4, 2, 0);
        let mut scenes = BTreeMap::new();
        scenes.insert("a".to_string(), test_bundle("a", 6));
        scenes.insert("b".to_string(), test_bundle("b", 7));
        let cfg = AdaptationConfig {
            mode: AdaptMode::LcJointFt,
            epochs: 1,
            batch_size: 4,
            ..AdaptationConfig::default()
        };
        let adapted = adapt(&base, &scenes, &cfg).unwrap();
        let ha = adapted.scenes["a"].head.as_ref().unwrap();
        let hb = adapted.scenes["b"].head.as_ref().unwrap();
        assert_eq!(ha, hb);
        assert_ne!(ha, &base.head);
        assert!(adapted.scenes["a"].corridor.is_some());
        assert_ne!(adapted.scenes["a"].corridor, adapted.scenes["b"].corridor);
    }
}
