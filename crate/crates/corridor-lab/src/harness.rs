//! Config-driven pipeline: scene loading or generation, pretraining, the
//! adaptation sweep over identity fractions, and CSV/SVG artifacts.
//!
//! Config files are flat key-value text with `[section]` headers. Unknown
//! sections and keys are errors so typos fail loudly. The full schema is
//! documented in the repository README.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::core::{
    build_windows, chronological_split, downsample_tracklet, person_seconds, CoreError, GridShape,
    Tracklet, TrajectoryWindow, WindowSpec,
};
use crate::corridor::{adapt, AdaptError, AdaptMode, AdaptationConfig, ApplyMode, SceneBundle};
use crate::ingest::{
    load_segmentation_grid, parse_mot_gt, parse_scene_manifest, serialize_mot,
    serialize_segmentation_grid, IngestError, SceneContext,
};
use crate::metrics::{normalize_curves, MetricError, SceneCurve};
use crate::predictor::{build_model, load_model, pretrain, Predictor, TrainConfig};
use crate::synthgen::{
    field_halfplane_x, field_lane_y, field_uniform, generate_scene, simulate_pedestrians, Rect,
    SceneSpec, SimConfig, SynthError, SYNTH_CLASSES,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error at {path}: {msg}")]
    Config { path: String, msg: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Adapt(#[from] AdaptError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

fn cfg_err(path: impl Into<String>, msg: impl Into<String>) -> HarnessError {
    HarnessError::Config { path: path.into(), msg: msg.into() }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

// ---------------------------------------------------------------------------
// Key-value config format
// ---------------------------------------------------------------------------

/// Parsed `[section]` / `key = value` file. Section and key order is
/// preserved; repeated keys are kept (some keys are list-valued).
#[derive(Debug, Clone, Default)]
pub struct KvConfig {
    pub sections: Vec<(String, Vec<(String, String)>)>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut sections: Vec<(String, Vec<(String, String)>)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| cfg_err(format!("line {}", lineno + 1), "unclosed section header"))?
                    .trim();
                if name.is_empty() {
                    return Err(cfg_err(format!("line {}", lineno + 1), "empty section name"));
                }
                sections.push((name.to_string(), Vec::new()));
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .okor_line(lineno, "expected `key = value`")?;
            let section = sections
                .last_mut()
                .ok_or_else(|| cfg_err(format!("line {}", lineno + 1), "key before any [section]"))?;
            section.1.push((key.trim().to_string(), value.trim().to_string()));
        }
        Ok(Self { sections })
    }

    pub fn section(&self, name: &str) -> Option<&[(String, String)]> {
        self.sections.iter().find(|(n, _)| n == name).map(|(_, kv)| kv.as_slice())
    }

    fn section_names(&self) -> Vec<&str> {
        self.sections.iter().map(|(n, _)| n.as_str()).collect()
    }
}

trait OkOrLine<T> {
    fn okor_line(self, lineno: usize, msg: &str) -> Result<T, HarnessError>;
}

impl<T> OkOrLine<T> for Option<T> {
    fn okor_line(self, lineno: usize, msg: &str) -> Result<T, HarnessError> {
        self.ok_or_else(|| cfg_err(format!("line {}", lineno + 1), msg))
    }
}

/// Typed accessor over one section with unknown-key detection.
struct Section<'a> {
    name: &'a str,
    pairs: &'a [(String, String)],
}

impl<'a> Section<'a> {
    fn new(cfg: &'a KvConfig, name: &'a str) -> Self {
        Self { name, pairs: cfg.section(name).unwrap_or(&[]) }
    }

    fn check_keys(&self, allowed: &[&str]) -> Result<(), HarnessError> {
        for (k, _) in self.pairs {
            if !allowed.contains(&k.as_str()) {
                return Err(cfg_err(
                    format!("{}.{}", self.name, k),
                    format!("unknown key (allowed: {})", allowed.join(", ")),
                ));
            }
        }
        Ok(())
    }

    fn get(&self, key: &str) -> Option<&'a str> {
        self.pairs.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn get_all(&self, key: &str) -> Vec<&'a str> {
        self.pairs.iter().filter(|(k, _)| k == key).map(|(_, v)| v.as_str()).collect()
    }

    fn parse<T: FromStr>(&self, key: &str, default: T) -> Result<T, HarnessError> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| cfg_err(format!("{}.{}", self.name, key), format!("bad value {v:?}"))),
        }
    }

}

fn parse_list<T: FromStr>(path: &str, value: &str) -> Result<Vec<T>, HarnessError> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|v| v.trim().parse().map_err(|_| cfg_err(path, format!("bad list item {v:?}"))))
        .collect()
}

// ---------------------------------------------------------------------------
// Synthetic-scene config
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub shape: GridShape,
    pub sim: SimConfig,
    pub scenes: Vec<SceneSpec>,
}

const GRID_KEYS: &[&str] = &["h", "w"];
const SIM_KEYS: &[&str] =
    &["n_agents", "duration_s", "rate", "beta", "speed", "noise_sigma", "stagger"];
const SCENE_KEYS: &[&str] =
    &["seed", "goal", "obstacle", "field", "spawn_box", "despawn_goal", "despawn_x"];

impl SynthConfig {
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let kv = KvConfig::parse(text)?;
        for name in kv.section_names() {
            if name != "grid" && name != "sim" && !name.starts_with("scene:") {
                return Err(cfg_err(name, "unknown section (expected grid, sim, scene:<id>)"));
            }
        }
        let grid = Section::new(&kv, "grid");
        grid.check_keys(GRID_KEYS)?;
        let shape = GridShape::new(grid.parse("h", 24usize)?, grid.parse("w", 32usize)?);
        let sim_s = Section::new(&kv, "sim");
        sim_s.check_keys(SIM_KEYS)?;
        let sim = SimConfig {
            n_agents: sim_s.parse("n_agents", 10usize)?,
            duration_s: sim_s.parse("duration_s", 30.0f64)?,
            rate: sim_s.parse("rate", 2u32)?,
            beta: sim_s.parse("beta", 1.5f64)?,
            speed: sim_s.parse("speed", 1.2f64)?,
            noise_sigma: sim_s.parse("noise_sigma", 0.15f64)?,
            spawn_stagger_frames: sim_s.parse("stagger", 1i64)?,
            spawns: Vec::new(),
        };
        let mut scenes = Vec::new();
        for (name, _) in &kv.sections {
            let Some(id) = name.strip_prefix("scene:") else { continue };
            if id.is_empty() {
                return Err(cfg_err(name, "empty scene id"));
            }
            let s = Section::new(&kv, name);
            s.check_keys(SCENE_KEYS)?;
            let mut spec = SceneSpec::open(id, shape, s.parse("seed", 0u64)?);
            for g in s.get_all("goal") {
                let v: Vec<f64> = parse_list(&format!("{name}.goal"), g)?;
                if v.len() != 2 {
                    return Err(cfg_err(format!("{name}.goal"), "expected x,y"));
                }
                spec.goals.push((v[0], v[1]));
            }
            for o in s.get_all("obstacle") {
                let v: Vec<usize> = parse_list(&format!("{name}.obstacle"), o)?;
                if v.len() != 4 {
                    return Err(cfg_err(format!("{name}.obstacle"), "expected x0,y0,w,h"));
                }
                spec.obstacles.push(Rect { x0: v[0], y0: v[1], w: v[2], h: v[3] });
            }
            spec.corridor_field = parse_field(name, shape, s.get("field"))?;
            if let Some(b) = s.get("spawn_box") {
                let v: Vec<f64> = parse_list(&format!("{name}.spawn_box"), b)?;
                if v.len() != 4 {
                    return Err(cfg_err(format!("{name}.spawn_box"), "expected x0,y0,w,h"));
                }
                spec.spawn_box = Some((v[0], v[1], v[2], v[3]));
            }
            if s.get("despawn_goal").is_some() {
                spec.despawn_goal = Some(s.parse("despawn_goal", 0.0f64)?);
            }
            if s.get("despawn_x").is_some() {
                spec.despawn_x = Some(s.parse("despawn_x", 0.0f64)?);
            }
            scenes.push(spec);
        }
        if scenes.is_empty() {
            return Err(cfg_err("scene:*", "no scenes defined"));
        }
        Ok(Self { shape, sim, scenes })
    }
}

fn parse_field(
    section: &str,
    shape: GridShape,
    value: Option<&str>,
) -> Result<Option<Vec<(f64, f64)>>, HarnessError> {
    let path = format!("{section}.field");
    let Some(value) = value else { return Ok(None) };
    if value == "none" {
        return Ok(None);
    }
    let (kind, args) = value.split_once(':').unwrap_or((value, ""));
    let nums: Vec<f64> = parse_list(&path, args)?;
    match (kind, nums.as_slice()) {
        ("uniform", [dx, dy]) => Ok(Some(field_uniform(shape, *dx, *dy))),
        ("halfplane_x", [x0, dx, dy]) => Ok(Some(field_halfplane_x(shape, *x0, *dx, *dy))),
        ("lane_y", [y0]) => Ok(Some(field_lane_y(shape, *y0))),
        _ => Err(cfg_err(
            path,
            format!("bad field spec {value:?} (none | uniform:dx,dy | halfplane_x:x0,dx,dy | lane_y:y)"),
        )),
    }
}

/// Generate every scene in a synth config into memory.
pub fn generate_synth_scenes(
    cfg: &SynthConfig,
) -> Result<Vec<(SceneContext, Vec<Tracklet>)>, HarnessError> {
    let mut out = Vec::new();
    for spec in &cfg.scenes {
        let ctx = generate_scene(spec, cfg.sim.rate)?;
        let tracklets = simulate_pedestrians(spec, &cfg.sim);
        out.push((ctx, tracklets));
    }
    Ok(out)
}

/// `gen-synth`: write gt + segmentation files per scene plus a scene
/// manifest that `run`/`eval` can consume.
pub fn gen_synth(cfg: &SynthConfig, out_dir: &Path) -> Result<PathBuf, HarnessError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut manifest = String::new();
    for spec in &cfg.scenes {
        let ctx = generate_scene(spec, cfg.sim.rate)?;
        let tracklets = simulate_pedestrians(spec, &cfg.sim);
        let gt = out_dir.join(format!("{}_gt.txt", spec.name));
        let seg = out_dir.join(format!("{}_seg.txt", spec.name));
        fs::write(&gt, serialize_mot(&tracklets)).map_err(io_err(&gt))?;
        fs::write(&seg, serialize_segmentation_grid(spec.shape, ctx.classes, &spec.labels()))
            .map_err(io_err(&seg))?;
        writeln!(
            manifest,
            "[scene:{}]\ngt = {}_gt.txt\nseg = {}_seg.txt\nfps = {}\n",
            spec.name, spec.name, spec.name, cfg.sim.rate
        )
        .unwrap();
    }
    let path = out_dir.join("manifest.txt");
    fs::write(&path, manifest).map_err(io_err(&path))?;
    Ok(path)
}

// ---------------------------------------------------------------------------
// Run config
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum SceneSource {
    Manifest(PathBuf),
    Synth(PathBuf),
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub scenes: SceneSource,
    pub hist_len: usize,
    pub fut_len: usize,
    pub stride: usize,
    /// Optional downsample target in Hz.
    pub rate: Option<u32>,
    pub classes: usize,
    pub sigma: f64,
    pub beta_decode: f64,
    pub checkpoint: Option<PathBuf>,
    pub model_seed: u64,
    pub pretrain_source: Option<SceneSource>,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch: usize,
    pub modes: Vec<AdaptMode>,
    pub apply_mode: ApplyMode,
    pub adapt_epochs: usize,
    pub prompt_lr: f64,
    pub head_lr: f64,
    pub adapt_batch: usize,
    /// Sweep fractions in (0, 0.8].
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    pub plots: bool,
}

const RUN_SECTIONS: &[&str] = &["scenes", "model", "pretrain", "adaptation", "sweep", "output"];
const SCENES_KEYS: &[&str] = &["manifest", "synth", "hist_len", "fut_len", "stride", "rate"];
const MODEL_KEYS: &[&str] = &["classes", "sigma", "beta_decode", "checkpoint", "seed"];
const PRETRAIN_KEYS: &[&str] = &["manifest", "synth", "epochs", "lr", "batch_size"];
const ADAPT_KEYS: &[&str] =
    &["modes", "apply_mode", "epochs", "prompt_lr", "head_lr", "batch_size"];
const SWEEP_KEYS: &[&str] = &["fractions", "seeds"];
const OUTPUT_KEYS: &[&str] = &["plots"];

impl RunConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, HarnessError> {
        let kv = KvConfig::parse(text)?;
        for name in kv.section_names() {
            if !RUN_SECTIONS.contains(&name) {
                return Err(cfg_err(name, format!("unknown section (allowed: {})", RUN_SECTIONS.join(", "))));
            }
        }
        let source = |s: &Section, required: bool| -> Result<Option<SceneSource>, HarnessError> {
            match (s.get("manifest"), s.get("synth")) {
                (Some(_), Some(_)) => {
                    Err(cfg_err(format!("{}.synth", s.name), "give either manifest or synth, not both"))
                }
                (Some(m), None) => Ok(Some(SceneSource::Manifest(base_dir.join(m)))),
                (None, Some(sy)) => Ok(Some(SceneSource::Synth(base_dir.join(sy)))),
                (None, None) if required => {
                    Err(cfg_err(format!("{}.manifest", s.name), "scene source required (manifest or synth)"))
                }
                (None, None) => Ok(None),
            }
        };

        let scenes = Section::new(&kv, "scenes");
        scenes.check_keys(SCENES_KEYS)?;
        let model = Section::new(&kv, "model");
        model.check_keys(MODEL_KEYS)?;
        let pre = Section::new(&kv, "pretrain");
        pre.check_keys(PRETRAIN_KEYS)?;
        let ad = Section::new(&kv, "adaptation");
        ad.check_keys(ADAPT_KEYS)?;
        let sweep = Section::new(&kv, "sweep");
        sweep.check_keys(SWEEP_KEYS)?;
        let output = Section::new(&kv, "output");
        output.check_keys(OUTPUT_KEYS)?;

        let modes_raw: Vec<String> = match ad.get("modes") {
            Some(v) => parse_list("adaptation.modes", v)?,
            None => Vec::new(),
        };
        let mut modes = Vec::new();
        for m in &modes_raw {
            modes.push(
                AdaptMode::parse(m)
                    .ok_or_else(|| cfg_err("adaptation.modes", format!("unknown mode {m:?}")))?,
            );
        }
        let apply_mode = match ad.get("apply_mode") {
            None => ApplyMode::SumAllHeatmaps,
            Some(v) => ApplyMode::parse(v)
                .ok_or_else(|| cfg_err("adaptation.apply_mode", format!("unknown apply mode {v:?}")))?,
        };
        let fractions_pct: Vec<f64> = match sweep.get("fractions") {
            Some(v) => parse_list("sweep.fractions", v)?,
            None => vec![2.0, 4.0, 8.0, 16.0, 32.0, 48.0, 64.0, 80.0],
        };
        let mut fractions: Vec<f64> = fractions_pct.iter().map(|p| p / 100.0).collect();
        fractions.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for f in &fractions {
            if !(*f > 0.0 && *f <= 0.8) {
                return Err(cfg_err("sweep.fractions", format!("fraction {}% out of (0, 80]", f * 100.0)));
            }
        }
        if fractions.is_empty() {
            return Err(cfg_err("sweep.fractions", "at least one fraction required"));
        }
        let seeds: Vec<u64> = match sweep.get("seeds") {
            Some(v) => parse_list("sweep.seeds", v)?,
            None => vec![0],
        };
        if seeds.is_empty() {
            return Err(cfg_err("sweep.seeds", "at least one seed required"));
        }

        Ok(Self {
            scenes: source(&scenes, true)?.unwrap(),
            hist_len: scenes.parse("hist_len", 5usize)?,
            fut_len: scenes.parse("fut_len", 8usize)?,
            stride: scenes.parse("stride", 1usize)?,
            rate: match scenes.get("rate") {
                None => None,
                Some(_) => Some(scenes.parse("rate", 0u32)?),
            },
            classes: model.parse("classes", SYNTH_CLASSES)?,
            sigma: model.parse("sigma", 1.5f64)?,
            beta_decode: model.parse("beta_decode", 30.0f64)?,
            checkpoint: model.get("checkpoint").map(|p| base_dir.join(p)),
            model_seed: model.parse("seed", 0u64)?,
            pretrain_source: source(&pre, false)?,
            pretrain_epochs: pre.parse("epochs", 10usize)?,
            pretrain_lr: pre.parse("lr", 1e-3f64)?,
            pretrain_batch: pre.parse("batch_size", 16usize)?,
            modes,
            apply_mode,
            adapt_epochs: ad.parse("epochs", 10usize)?,
            prompt_lr: ad.parse("prompt_lr", 1e-2f64)?,
            head_lr: ad.parse("head_lr", 1e-3f64)?,
            adapt_batch: ad.parse("batch_size", 16usize)?,
            fractions,
            seeds,
            plots: output.parse("plots", true)?,
        })
    }
}

// ---------------------------------------------------------------------------
// Scene loading
// ---------------------------------------------------------------------------

/// Read the `h w C` header of a segmentation file so callers need not know
/// the grid size in advance.
fn peek_grid_header(path: &Path) -> Result<(GridShape, usize), HarnessError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let header = text.lines().next().unwrap_or("");
    let nums: Vec<usize> = header.split_whitespace().filter_map(|t| t.parse().ok()).collect();
    if nums.len() != 3 {
        return Err(cfg_err(
            path.display().to_string(),
            format!("bad segmentation header {header:?} (expected `h w C`)"),
        ));
    }
    Ok((GridShape::new(nums[0], nums[1]), nums[2]))
}

pub fn load_scene_source(
    source: &SceneSource,
    classes: usize,
) -> Result<Vec<(SceneContext, Vec<Tracklet>)>, HarnessError> {
    match source {
        SceneSource::Synth(path) => {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            generate_synth_scenes(&SynthConfig::parse(&text)?)
        }
        SceneSource::Manifest(path) => {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            let base = path.parent().unwrap_or(Path::new("."));
            let mut out = Vec::new();
            for entry in parse_scene_manifest(&text, base)? {
                let (shape, file_classes) = peek_grid_header(&entry.seg_path)?;
                if file_classes != classes {
                    return Err(cfg_err(
                        entry.seg_path.display().to_string(),
                        format!("scene has {file_classes} classes, model expects {classes}"),
                    ));
                }
                let ctx =
                    load_segmentation_grid(&entry.seg_path, shape, classes, &entry.scene, entry.fps)?;
                let gt = fs::read_to_string(&entry.gt_path).map_err(io_err(&entry.gt_path))?;
                let tracklets = parse_mot_gt(&gt, entry.fps, &entry.scene)?;
                out.push((ctx, tracklets));
            }
            Ok(out)
        }
    }
}

fn prepare_tracklets(
    tracklets: &[Tracklet],
    target_rate: Option<u32>,
) -> Result<Vec<Tracklet>, HarnessError> {
    match target_rate {
        None => Ok(tracklets.to_vec()),
        Some(rate) => tracklets.iter().map(|t| Ok(downsample_tracklet(t, rate)?)).collect(),
    }
}

// ---------------------------------------------------------------------------
// Run pipeline
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub scene: String,
    pub mode: String,
    pub fraction: f64,
    pub person_seconds: f64,
    pub ade: f64,
    pub fde: f64,
    pub n_windows: usize,
    pub seed: u64,
}

pub struct RunOutputs {
    pub rows: Vec<ResultRow>,
    pub artifacts: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from("scene,mode,fraction,person_seconds,ade,fde,n_windows,seed\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.scene, r.mode, r.fraction, r.person_seconds, r.ade, r.fde, r.n_windows, r.seed
        )
        .unwrap();
    }
    out
}

fn median(values: &mut Vec<f64>) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Obtain the base model: load a checkpoint or pretrain from scratch on
/// the configured source (defaulting to the run scenes).
pub fn base_model(cfg: &RunConfig) -> Result<Predictor, HarnessError> {
    if let Some(path) = &cfg.checkpoint {
        return load_model(path).map_err(io_err(path));
    }
    let source = cfg.pretrain_source.as_ref().unwrap_or(&cfg.scenes);
    let scenes = load_scene_source(source, cfg.classes)?;
    pretrain_on(cfg, &scenes).map(|(m, _)| m)
}

/// Pretrain a fresh model on all windows of the given scenes; returns the
/// model and per-epoch loss curve.
pub fn pretrain_on(
    cfg: &RunConfig,
    scenes: &[(SceneContext, Vec<Tracklet>)],
) -> Result<(Predictor, Vec<f64>), HarnessError> {
    let (windows, ctxs) = collect_windows(cfg, scenes)?;
    if windows.is_empty() {
        return Err(cfg_err("pretrain", "no training windows (tracklets too short?)"));
    }
    let shape = ctxs.values().next().unwrap().shape;
    let mut model = build_model(shape, cfg.hist_len, cfg.fut_len, cfg.classes, cfg.model_seed);
    let tc = TrainConfig {
        epochs: cfg.pretrain_epochs,
        lr: cfg.pretrain_lr,
        batch_size: cfg.pretrain_batch,
        seed: cfg.model_seed,
        sigma: cfg.sigma,
        beta_decode: cfg.beta_decode,
    };
    let curve = pretrain(&mut model, &windows, |s| &ctxs[s], &tc);
    Ok((model, curve))
}

fn collect_windows(
    cfg: &RunConfig,
    scenes: &[(SceneContext, Vec<Tracklet>)],
) -> Result<(Vec<TrajectoryWindow>, BTreeMap<String, SceneContext>), HarnessError> {
    let mut windows = Vec::new();
    let mut ctxs = BTreeMap::new();
    for (ctx, tracklets) in scenes {
        let tracklets = prepare_tracklets(tracklets, cfg.rate)?;
        let rate = cfg.rate.unwrap_or(ctx.fps);
        let spec = WindowSpec::new(cfg.hist_len, cfg.fut_len, cfg.stride, rate);
        for t in &tracklets {
            windows.extend(build_windows(t, &spec));
        }
        ctxs.insert(ctx.scene.clone(), ctx.clone());
    }
    Ok((windows, ctxs))
}

pub fn run(cfg: &RunConfig, config_text: &str, out_dir: &Path) -> Result<RunOutputs, HarnessError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut warnings = Vec::new();
    let mut artifacts = Vec::new();

    let scenes = load_scene_source(&cfg.scenes, cfg.classes)?;
    let base = base_model(cfg)?;
    let shape = base.cfg.shape;

    // Fixed per-scene context, tracklets, and window spec.
    struct Prepared {
        ctx: SceneContext,
        tracklets: Vec<Tracklet>,
        spec: WindowSpec,
    }
    let mut prepared: BTreeMap<String, Prepared> = BTreeMap::new();
    for (ctx, tracklets) in &scenes {
        if ctx.shape != shape {
            return Err(cfg_err(
                format!("scenes ({})", ctx.scene),
                format!("scene grid {:?} does not match model grid {:?}", ctx.shape, shape),
            ));
        }
        let tracklets = prepare_tracklets(tracklets, cfg.rate)?;
        let rate = cfg.rate.unwrap_or(ctx.fps);
        let spec = WindowSpec::new(cfg.hist_len, cfg.fut_len, cfg.stride, rate);
        prepared.insert(ctx.scene.clone(), Prepared { ctx: ctx.clone(), tracklets, spec });
    }

    // Baseline: the frozen base on each scene's fixed test split.
    let mut rows = Vec::new();
    let mut baseline_ade: BTreeMap<String, f64> = BTreeMap::new();
    for (name, p) in &prepared {
        let split = chronological_split(&p.tracklets, 0.8, &p.spec)?;
        let report = crate::metrics::evaluate(
            |w| {
                base.predict_points(w, &p.ctx, cfg.sigma, cfg.beta_decode, None)
                    .expect("base forward")
            },
            &split.test_windows,
        )?;
        baseline_ade.insert(name.clone(), report.ade_mean);
        rows.push(ResultRow {
            scene: name.clone(),
            mode: "base".into(),
            fraction: 0.0,
            person_seconds: 0.0,
            ade: report.ade_mean,
            fde: report.fde_mean,
            n_windows: report.n_windows,
            seed: cfg.model_seed,
        });
    }

    // The sweep: seeds x fractions x modes x scenes.
    for &seed in &cfg.seeds {
        for &fraction in &cfg.fractions {
            let mut bundles: BTreeMap<String, SceneBundle> = BTreeMap::new();
            for (name, p) in &prepared {
                let data = chronological_split(&p.tracklets, fraction, &p.spec)?;
                bundles.insert(name.clone(), SceneBundle { ctx: p.ctx.clone(), data });
            }
            for mode in &cfg.modes {
                let ac = AdaptationConfig {
                    mode: *mode,
                    apply_mode: cfg.apply_mode,
                    prompt_lr: cfg.prompt_lr,
                    head_lr: cfg.head_lr,
                    epochs: cfg.adapt_epochs,
                    batch_size: cfg.adapt_batch,
                    fraction,
                    sigma: cfg.sigma,
                    seed,
                };
                let adapted = adapt(&base, &bundles, &ac)?;
                for (name, bundle) in &bundles {
                    let report = adapted.evaluate(
                        name,
                        &bundle.data.test_windows,
                        &bundle.ctx,
                        cfg.sigma,
                        cfg.beta_decode,
                    )?;
                    rows.push(ResultRow {
                        scene: name.clone(),
                        mode: mode.name().into(),
                        fraction,
                        person_seconds: bundle.data.person_seconds_train,
                        ade: report.ade_mean,
                        fde: report.fde_mean,
                        n_windows: report.n_windows,
                        seed,
                    });
                }
            }
        }
    }

    let results_path = out_dir.join("results.csv");
    fs::write(&results_path, results_csv(&rows)).map_err(io_err(&results_path))?;
    artifacts.push(results_path);

    // Normalized aggregate curves (per mode, median over seeds, each scene
    // divided by its frozen-base ADE).
    let mut curves_csv = String::from("mode,fraction,mean,std\n");
    for mode in &cfg.modes {
        let curves: Vec<SceneCurve> = prepared
            .keys()
            .map(|scene| {
                let points = cfg
                    .fractions
                    .iter()
                    .map(|&f| {
                        let mut ades: Vec<f64> = rows
                            .iter()
                            .filter(|r| {
                                r.scene == *scene && r.mode == mode.name() && r.fraction == f
                            })
                            .map(|r| r.ade)
                            .collect();
                        (f, median(&mut ades))
                    })
                    .collect();
                SceneCurve { scene: scene.clone(), points, baseline_ade: baseline_ade[scene] }
            })
            .collect();
        for (fraction, mean, std) in normalize_curves(&curves, &cfg.fractions)? {
            writeln!(curves_csv, "{},{},{},{}", mode.name(), fraction, mean, std).unwrap();
        }
    }
    let curves_path = out_dir.join("normalized_curves.csv");
    fs::write(&curves_path, &curves_csv).map_err(io_err(&curves_path))?;
    artifacts.push(curves_path);

    if cfg.modes.is_empty() {
        warnings.push("no adaptation modes requested; plots skipped".into());
    } else if cfg.plots {
        artifacts.extend(emit_plots(cfg, &rows, &baseline_ade, out_dir)?);
    }

    // Reproducibility manifest.
    let mut manifest = String::new();
    writeln!(manifest, "config_hash = {:016x}", fnv1a(config_text.as_bytes())).unwrap();
    writeln!(manifest, "version = {}", env!("CARGO_PKG_VERSION")).unwrap();
    writeln!(manifest, "model_seed = {}", cfg.model_seed).unwrap();
    let seed_strs: Vec<String> = cfg.seeds.iter().map(|s| s.to_string()).collect();
    writeln!(manifest, "sweep_seeds = {}", seed_strs.join(",")).unwrap();
    for w in &warnings {
        writeln!(manifest, "warning = {w}").unwrap();
    }
    let manifest_path = out_dir.join("manifest.txt");
    fs::write(&manifest_path, manifest).map_err(io_err(&manifest_path))?;
    artifacts.push(manifest_path);

    Ok(RunOutputs { rows, artifacts, warnings })
}

/// Evaluate a frozen checkpoint on each manifest scene's fixed test split.
pub fn eval_checkpoint(
    checkpoint: &Path,
    manifest: &Path,
    cfg: &RunConfig,
) -> Result<Vec<ResultRow>, HarnessError> {
    let base = load_model(checkpoint).map_err(io_err(checkpoint))?;
    let scenes = load_scene_source(&SceneSource::Manifest(manifest.to_path_buf()), cfg.classes)?;
    let mut rows = Vec::new();
    for (ctx, tracklets) in &scenes {
        let tracklets = prepare_tracklets(tracklets, cfg.rate)?;
        let rate = cfg.rate.unwrap_or(ctx.fps);
        let spec = WindowSpec::new(base.cfg.hist_len, base.cfg.pred_len, cfg.stride, rate);
        let split = chronological_split(&tracklets, 0.8, &spec)?;
        let report = crate::metrics::evaluate(
            |w| {
                base.predict_points(w, ctx, cfg.sigma, cfg.beta_decode, None)
                    .expect("base forward")
            },
            &split.test_windows,
        )?;
        rows.push(ResultRow {
            scene: ctx.scene.clone(),
            mode: "base".into(),
            fraction: 0.0,
            person_seconds: person_seconds(&tracklets),
            ade: report.ade_mean,
            fde: report.fde_mean,
            n_windows: report.n_windows,
            seed: cfg.model_seed,
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Plots
// ---------------------------------------------------------------------------

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// One ADE-vs-person-seconds chart per scene plus the normalized aggregate
/// chart. Byte output is deterministic for fixed input.
pub fn emit_plots(
    cfg: &RunConfig,
    rows: &[ResultRow],
    baseline_ade: &BTreeMap<String, f64>,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, HarnessError> {
    assert!(!rows.is_empty());
    let mut paths = Vec::new();
    for (scene, base_ade) in baseline_ade {
        let mut series = Vec::new();
        for mode in &cfg.modes {
            let mut pts: Vec<(f64, f64)> = Vec::new();
            for &f in &cfg.fractions {
                let cell: Vec<&ResultRow> = rows
                    .iter()
                    .filter(|r| r.scene == *scene && r.mode == mode.name() && r.fraction == f)
                    .collect();
                if cell.is_empty() {
                    continue;
                }
                let mut ades: Vec<f64> = cell.iter().map(|r| r.ade).collect();
                pts.push((cell[0].person_seconds, median(&mut ades)));
            }
            series.push((mode.name().to_string(), pts));
        }
        // Flat reference line for the frozen base.
        let ps: Vec<f64> = series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)).collect();
        if let (Some(lo), Some(hi)) = (
            ps.iter().cloned().reduce(f64::min),
            ps.iter().cloned().reduce(f64::max),
        ) {
            series.push(("base".to_string(), vec![(lo, *base_ade), (hi, *base_ade)]));
        }
        let svg = svg_chart(
            &format!("ADE vs person-seconds: {scene}"),
            "person-seconds",
            "ADE (px)",
            &series,
        );
        let path = out_dir.join(format!("ade_{scene}.svg"));
        fs::write(&path, svg).map_err(io_err(&path))?;
        paths.push(path);
    }

    // Normalized aggregate: ADE / base ADE, averaged over scenes.
    let mut series = Vec::new();
    for mode in &cfg.modes {
        let mut pts = Vec::new();
        for &f in &cfg.fractions {
            let mut vals: Vec<f64> = Vec::new();
            for (scene, base_ade) in baseline_ade {
                let mut ades: Vec<f64> = rows
                    .iter()
                    .filter(|r| r.scene == *scene && r.mode == mode.name() && r.fraction == f)
                    .map(|r| r.ade)
                    .collect();
                if !ades.is_empty() {
                    vals.push(median(&mut ades) / base_ade);
                }
            }
            if !vals.is_empty() {
                pts.push((f, vals.iter().sum::<f64>() / vals.len() as f64));
            }
        }
        series.push((mode.name().to_string(), pts));
    }
    let svg = svg_chart("Normalized ADE vs train fraction", "fraction", "ADE / base ADE", &series);
    let path = out_dir.join("ade_normalized.svg");
    fs::write(&path, svg).map_err(io_err(&path))?;
    paths.push(path);
    Ok(paths)
}

/// Minimal deterministic SVG line chart. Data is embedded in comments so
/// tests can parse plotted values back out.
pub fn svg_chart(
    title: &str,
    xlabel: &str,
    ylabel: &str,
    series: &[(String, Vec<(f64, f64)>)],
) -> String {
    const W: f64 = 640.0;
    const H: f64 = 480.0;
    const M: f64 = 60.0;
    let all: Vec<(f64, f64)> = series.iter().flat_map(|(_, p)| p.iter().cloned()).collect();
    let (mut x0, mut x1, mut y0, mut y1) = all.iter().fold(
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY),
        |(a, b, c, d), p| (a.min(p.0), b.max(p.0), c.min(p.1), d.max(p.1)),
    );
    if all.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    // 5% margin around the data bounding box.
    let pad = |lo: &mut f64, hi: &mut f64| {
        let span = (*hi - *lo).max(1e-9);
        *lo -= 0.05 * span;
        *hi += 0.05 * span;
    };
    pad(&mut x0, &mut x1);
    pad(&mut y0, &mut y1);
    let px = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let py = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);

    let mut out = String::new();
    writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">"
    )
    .unwrap();
    for (name, pts) in series {
        let data: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.6},{y:.6}")).collect();
        writeln!(out, "<!-- data {name}: {} -->", data.join(" ")).unwrap();
    }
    writeln!(out, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>").unwrap();
    writeln!(
        out,
        "<text x=\"{:.1}\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">{title}</text>",
        W / 2.0
    )
    .unwrap();
    // Axes.
    writeln!(
        out,
        "<line x1=\"{M}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>",
        H - M,
        W - M,
        H - M
    )
    .unwrap();
    writeln!(out, "<line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{:.1}\" stroke=\"black\"/>", H - M)
        .unwrap();
    writeln!(
        out,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"12\">{xlabel}</text>",
        W / 2.0,
        H - 16.0
    )
    .unwrap();
    writeln!(
        out,
        "<text x=\"16\" y=\"{:.1}\" font-size=\"12\" transform=\"rotate(-90 16 {:.1})\" text-anchor=\"middle\">{ylabel}</text>",
        H / 2.0,
        H / 2.0
    )
    .unwrap();
    // Axis extents.
    writeln!(out, "<text x=\"{M}\" y=\"{:.1}\" font-size=\"10\">{x0:.3}</text>", H - M + 14.0)
        .unwrap();
    writeln!(
        out,
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" text-anchor=\"end\">{x1:.3}</text>",
        W - M,
        H - M + 14.0
    )
    .unwrap();
    writeln!(
        out,
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" text-anchor=\"end\">{y0:.3}</text>",
        M - 4.0,
        H - M
    )
    .unwrap();
    writeln!(
        out,
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" text-anchor=\"end\">{y1:.3}</text>",
        M - 4.0,
        M + 4.0
    )
    .unwrap();
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if !pts.is_empty() {
            let coords: Vec<String> =
                pts.iter().map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y))).collect();
            writeln!(
                out,
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>",
                coords.join(" ")
            )
            .unwrap();
        }
        writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" fill=\"{color}\">{name}</text>",
            W - M + 4.0,
            M + 16.0 * i as f64
        )
        .unwrap();
    }
    writeln!(out, "</svg>").unwrap();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const SYNTH_TWO_SCENES: &str = "\
[grid]
h = 16
w = 16

[sim]
n_agents = 8
duration_s = 20
rate = 2
noise_sigma = 0.05

[scene:alpha]
seed = 1
goal = 14,8

[scene:beta]
seed = 2
goal = 8,14
field = uniform:0,1
";

    #[test]
    fn kv_parser_basics() {
        let kv = KvConfig::parse("[a]\nx = 1 # comment\ny=2\n\n[b]\nx = 3\n").unwrap();
        let a = Section::new(&kv, "a");
        assert_eq!(a.get("x"), Some("1"));
        assert_eq!(a.get("y"), Some("2"));
        assert_eq!(Section::new(&kv, "b").get("x"), Some("3"));
        assert_eq!(a.get("z"), None);
    }

    #[test]
    fn kv_parser_rejects_bad_lines() {
        assert!(KvConfig::parse("x = 1\n").is_err());
        assert!(KvConfig::parse("[a\n").is_err());
        assert!(KvConfig::parse("[a]\nnot a pair\n").is_err());
    }

    #[test]
    fn unknown_key_error_names_path() {
        let text = "[scenes]\nsynth = s.cfg\nhistlen = 5\n";
        let err = RunConfig::parse(text, Path::new(".")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("scenes.histlen"), "{msg}");
    }

    #[test]
    fn unknown_section_errors() {
        let err = RunConfig::parse("[scenery]\nmanifest = m\n", Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("scenery"));
    }

    #[test]
    fn run_config_defaults() {
        let cfg = RunConfig::parse("[scenes]\nsynth = s.cfg\n", Path::new("/d")).unwrap();
        assert_eq!(cfg.hist_len, 5);
        assert_eq!(cfg.fut_len, 8);
        assert_eq!(cfg.fractions.len(), 8);
        assert!((cfg.fractions[0] - 0.02).abs() < 1e-12);
        assert!((cfg.fractions[7] - 0.8).abs() < 1e-12);
        assert_eq!(cfg.seeds, vec![0]);
        assert!(cfg.modes.is_empty());
        assert!(matches!(cfg.scenes, SceneSource::Synth(ref p) if p.as_path() == Path::new("/d/s.cfg")));
    }

    #[test]
    fn bad_fraction_rejected() {
        let text = "[scenes]\nsynth = s.cfg\n\n[sweep]\nfractions = 90\n";
        assert!(RunConfig::parse(text, Path::new(".")).is_err());
    }

    #[test]
    fn mode_list_parses() {
        let text = "[scenes]\nsynth = s\n\n[adaptation]\nmodes = lc, finetune_only\n";
        let cfg = RunConfig::parse(text, Path::new(".")).unwrap();
        assert_eq!(cfg.modes, vec![AdaptMode::Lc, AdaptMode::FinetuneOnly]);
    }

    #[test]
    fn synth_config_parses_scenes_and_fields() {
        let cfg = SynthConfig::parse(SYNTH_TWO_SCENES).unwrap();
        assert_eq!(cfg.scenes.len(), 2);
        assert_eq!(cfg.shape, GridShape::new(16, 16));
        assert!(cfg.scenes[0].corridor_field.is_none());
        let field = cfg.scenes[1].corridor_field.as_ref().unwrap();
        assert_eq!(field[0], (0.0, 1.0));
        assert_eq!(cfg.scenes[0].goals, vec![(14.0, 8.0)]);
    }

    #[test]
    fn synth_config_rejects_unknown_field_kind() {
        let text = "[grid]\nh=16\nw=16\n[scene:a]\nfield = vortex:1\n";
        assert!(SynthConfig::parse(text).is_err());
    }

    #[test]
    fn gen_synth_round_trips_through_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig::parse(SYNTH_TWO_SCENES).unwrap();
        let manifest = gen_synth(&cfg, dir.path()).unwrap();
        let loaded =
            load_scene_source(&SceneSource::Manifest(manifest), SYNTH_CLASSES).unwrap();
        let direct = generate_synth_scenes(&cfg).unwrap();
        assert_eq!(loaded.len(), 2);
        for ((lc, lt), (dc, dt)) in loaded.iter().zip(&direct) {
            assert_eq!(lc.scene, dc.scene);
            assert_eq!(lc.seg, dc.seg);
            // MOT serialization rounds nothing: centers must survive.
            assert_eq!(lt.len(), dt.len());
            for (a, b) in lt.iter().zip(dt) {
                assert_eq!(a.identity, b.identity);
                assert_eq!(a.samples.len(), b.samples.len());
                for (sa, sb) in a.samples.iter().zip(&b.samples) {
                    assert!((sa.x - sb.x).abs() < 1e-9 && (sa.y - sb.y).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn results_csv_header_is_exact() {
        let csv = results_csv(&[]);
        assert_eq!(csv, "scene,mode,fraction,person_seconds,ade,fde,n_windows,seed\n");
    }

    #[test]
    fn median_odd_even() {
        assert_eq!(median(&mut vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut vec![4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(&mut vec![5.0]), 5.0);
    }

    #[test]
    fn svg_chart_is_deterministic_and_embeds_data() {
        let series = vec![("lc".to_string(), vec![(1.0, 2.0), (3.0, 1.0)])];
        let a = svg_chart("t", "x", "y", &series);
        let b = svg_chart("t", "x", "y", &series);
        assert_eq!(a, b);
        assert!(a.contains("<!-- data lc: 1.000000,2.000000 3.000000,1.000000 -->"));
        // Two data points -> polyline with 2 vertices.
        let poly = a.lines().find(|l| l.starts_with("<polyline")).unwrap();
        assert_eq!(poly.matches(',').count(), 2);
    }

    #[test]
    fn svg_axis_margin_is_five_percent() {
        let series = vec![("s".to_string(), vec![(0.0, 0.0), (10.0, 20.0)])];
        let svg = svg_chart("t", "x", "y", &series);
        // x range [0,10] padded 5% each side -> labels -0.500 and 10.500.
        assert!(svg.contains(">-0.500<"), "{svg}");
        assert!(svg.contains(">10.500<"), "{svg}");
        assert!(svg.contains(">-1.000<"));
        assert!(svg.contains(">21.000<"));
    }

    fn small_run_config(dir: &Path) -> (RunConfig, String) {
        let synth_path = dir.join("synth.cfg");
        fs::write(&synth_path, SYNTH_TWO_SCENES).unwrap();
        let text = format!(
            "[scenes]\nsynth = synth.cfg\nhist_len = 3\nfut_len = 4\n\n\
             [pretrain]\nepochs = 1\nbatch_size = 8\n\n\
             [adaptation]\nmodes = lc\nepochs = 1\nbatch_size = 8\n\n\
             [sweep]\nfractions = 80\nseeds = 0\n\n\
             [output]\nplots = true\n"
        );
        (RunConfig::parse(&text, dir).unwrap(), text)
    }

    #[test]
    fn run_row_count_contract_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, text) = small_run_config(dir.path());
        let out1 = dir.path().join("out1");
        let out2 = dir.path().join("out2");
        let r1 = run(&cfg, &text, &out1).unwrap();
        let _r2 = run(&cfg, &text, &out2).unwrap();
        // 2 scenes x 1 mode x 1 fraction x 1 seed, plus 2 baseline rows.
        assert_eq!(r1.rows.len(), 4);
        assert_eq!(r1.rows.iter().filter(|r| r.mode == "base").count(), 2);
        let c1 = fs::read(out1.join("results.csv")).unwrap();
        let c2 = fs::read(out2.join("results.csv")).unwrap();
        assert_eq!(c1, c2, "results.csv must be bitwise identical");
        let n1 = fs::read(out1.join("normalized_curves.csv")).unwrap();
        let n2 = fs::read(out2.join("normalized_curves.csv")).unwrap();
        assert_eq!(n1, n2);
        let csv = String::from_utf8(c1).unwrap();
        assert!(csv.starts_with("scene,mode,fraction,person_seconds,ade,fde,n_windows,seed\n"));
        // Plot files exist and are deterministic.
        let p1 = fs::read(out1.join("ade_alpha.svg")).unwrap();
        let p2 = fs::read(out2.join("ade_alpha.svg")).unwrap();
        assert_eq!(p1, p2);
        assert!(out1.join("ade_normalized.svg").exists());
        assert!(out1.join("manifest.txt").exists());
    }

    #[test]
    fn run_person_seconds_matches_core_oracle() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, text) = small_run_config(dir.path());
        let out = dir.path().join("out");
        let r = run(&cfg, &text, &out).unwrap();
        let scenes = load_scene_source(&cfg.scenes, cfg.classes).unwrap();
        for row in r.rows.iter().filter(|r| r.mode == "LC") {
            let (_, tracklets) = scenes.iter().find(|(c, _)| c.scene == row.scene).unwrap();
            let spec = WindowSpec::new(cfg.hist_len, cfg.fut_len, cfg.stride, 2);
            let split = chronological_split(tracklets, row.fraction, &spec).unwrap();
            assert_eq!(row.person_seconds, split.person_seconds_train);
        }
    }

    #[test]
    fn empty_mode_list_warns_and_skips_plots() {
        let dir = tempfile::tempdir().unwrap();
        let synth_path = dir.path().join("synth.cfg");
        fs::write(&synth_path, SYNTH_TWO_SCENES).unwrap();
        let text = "[scenes]\nsynth = synth.cfg\nhist_len = 3\nfut_len = 4\n\n\
                    [pretrain]\nepochs = 0\n\n[sweep]\nfractions = 80\n";
        let cfg = RunConfig::parse(text, dir.path()).unwrap();
        let out = dir.path().join("out");
        let r = run(&cfg, text, &out).unwrap();
        assert!(!r.warnings.is_empty());
        assert!(!out.join("ade_normalized.svg").exists());
        let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
        assert!(manifest.contains("warning"));
    }
}
