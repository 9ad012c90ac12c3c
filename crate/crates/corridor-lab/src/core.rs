//! Domain types, windowing, chronological identity split, and
//! person-seconds accounting.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("tracklet rate {have} is not divisible by target rate {want}")]
    NonDivisibleRate { have: u32, want: u32 },
    #[error("target rate {want} exceeds tracklet rate {have}")]
    RateTooHigh { have: u32, want: u32 },
    #[error("chronological split needs at least 5 identities, got {0}")]
    TooFewIdentities(usize),
    #[error("split fraction must lie in (0, 0.8], got {0}")]
    BadFraction(f64),
}

/// Spatial grid dimensions in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridShape {
    pub h: usize,
    pub w: usize,
}

impl GridShape {
    pub fn new(h: usize, w: usize) -> Self {
        assert!(h >= 8 && w >= 8, "grid must be at least 8x8, got {h}x{w}");
        Self { h, w }
    }

    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// One timestamped pixel-space sample of an identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub frame: i64,
    pub x: f64,
    pub y: f64,
}

/// One identity's path through a scene, ordered by frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Tracklet {
    pub identity: u64,
    pub scene: String,
    pub samples: Vec<Sample>,
    /// Samples per second.
    pub rate: u32,
}

impl Tracklet {
    /// Frame index of the first sample. Panics on empty tracklets, which
    /// violate the type invariant.
    pub fn first_frame(&self) -> i64 {
        self.samples[0].frame
    }

    pub fn validate(&self) -> bool {
        !self.samples.is_empty()
            && self.samples.windows(2).all(|p| p[0].frame < p[1].frame)
            && self.samples.iter().all(|s| s.x.is_finite() && s.y.is_finite())
    }
}

/// Window geometry: H past steps, T future steps, at a fixed rate.
#[derive(Debug, Clone, Copy)]
pub struct WindowSpec {
    pub hist_len: usize,
    pub pred_len: usize,
    pub stride: usize,
    pub rate: u32,
}

impl WindowSpec {
    pub fn new(hist_len: usize, pred_len: usize, stride: usize, rate: u32) -> Self {
        assert!(hist_len >= 2, "hist_len must be >= 2");
        assert!(pred_len >= 1, "pred_len must be >= 1");
        assert!(stride >= 1, "stride must be >= 1");
        Self { hist_len, pred_len, stride, rate }
    }

    pub fn window_len(&self) -> usize {
        self.hist_len + self.pred_len
    }
}

/// One (past, future) training or evaluation sample for one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryWindow {
    pub identity: u64,
    pub scene: String,
    pub past: Vec<(f64, f64)>,
    pub future: Vec<(f64, f64)>,
    pub start_frame: i64,
}

/// Identity-disjoint train/test partition with person-seconds accounting.
#[derive(Debug, Clone)]
pub struct SplitDataset {
    pub train_windows: Vec<TrajectoryWindow>,
    pub test_windows: Vec<TrajectoryWindow>,
    pub train_fraction: f64,
    pub person_seconds_train: f64,
    pub train_identities: Vec<u64>,
    pub test_identities: Vec<u64>,
}

/// Keep every (rate/target)-th sample starting from the first.
pub fn downsample_tracklet(t: &Tracklet, target_rate: u32) -> Result<Tracklet, CoreError> {
    if t.rate < target_rate {
        return Err(CoreError::RateTooHigh { have: t.rate, want: target_rate });
    }
    if t.rate % target_rate != 0 {
        return Err(CoreError::NonDivisibleRate { have: t.rate, want: target_rate });
    }
    let step = (t.rate / target_rate) as usize;
    Ok(Tracklet {
        identity: t.identity,
        scene: t.scene.clone(),
        samples: t.samples.iter().copied().step_by(step).collect(),
        rate: target_rate,
    })
}

/// Sliding windows of length H+T over frame-contiguous runs of the tracklet.
/// A gap in frame indices splits the tracklet; windows never straddle gaps.
pub fn build_windows(t: &Tracklet, spec: &WindowSpec) -> Vec<TrajectoryWindow> {
    let mut out = Vec::new();
    let mut run_start = 0usize;
    let n = t.samples.len();
    for i in 0..n {
        let run_ends = i + 1 == n || t.samples[i + 1].frame != t.samples[i].frame + 1;
        if run_ends {
            emit_run(&t.samples[run_start..=i], t, spec, &mut out);
            run_start = i + 1;
        }
    }
    out
}

fn emit_run(run: &[Sample], t: &Tracklet, spec: &WindowSpec, out: &mut Vec<TrajectoryWindow>) {
    let len = spec.window_len();
    if run.len() < len {
        return;
    }
    let mut start = 0usize;
    while start + len <= run.len() {
        let window = &run[start..start + len];
        out.push(TrajectoryWindow {
            identity: t.identity,
            scene: t.scene.clone(),
            past: window[..spec.hist_len].iter().map(|s| (s.x, s.y)).collect(),
            future: window[spec.hist_len..].iter().map(|s| (s.x, s.y)).collect(),
            start_frame: window[0].frame,
        });
        start += spec.stride;
    }
}

/// Identities ordered by first appearance (ties broken by ascending id).
pub fn appearance_order(tracklets: &[Tracklet]) -> Vec<u64> {
    let mut ids: Vec<(i64, u64)> =
        tracklets.iter().map(|t| (t.first_frame(), t.identity)).collect();
    ids.sort();
    ids.into_iter().map(|(_, id)| id).collect()
}

/// Split by first appearance: first ceil(m*N) identities train, the final
/// floor(0.2*N) test. The test partition is independent of m.
pub fn chronological_split(
    tracklets: &[Tracklet],
    m: f64,
    spec: &WindowSpec,
) -> Result<SplitDataset, CoreError> {
    if !(m > 0.0 && m <= 0.8) {
        return Err(CoreError::BadFraction(m));
    }
    let order = appearance_order(tracklets);
    let n_ids = order.len();
    if n_ids < 5 {
        return Err(CoreError::TooFewIdentities(n_ids));
    }
    let n_train = (m * n_ids as f64).ceil() as usize;
    let n_test = (0.2 * n_ids as f64).floor() as usize;
    let train_identities: Vec<u64> = order[..n_train].to_vec();
    let test_identities: Vec<u64> = order[n_ids - n_test..].to_vec();

    let windows_of = |ids: &[u64]| -> Vec<TrajectoryWindow> {
        let mut ws = Vec::new();
        // Iterate in appearance order so output is deterministic.
        for id in ids {
            for t in tracklets.iter().filter(|t| t.identity == *id) {
                ws.extend(build_windows(t, spec));
            }
        }
        ws
    };

    let train_tracklets: Vec<Tracklet> = tracklets
        .iter()
        .filter(|t| train_identities.contains(&t.identity))
        .cloned()
        .collect();

    Ok(SplitDataset {
        train_windows: windows_of(&train_identities),
        test_windows: windows_of(&test_identities),
        train_fraction: m,
        person_seconds_train: person_seconds(&train_tracklets),
        train_identities,
        test_identities,
    })
}

/// Sum of elapsed observation time: (sample_count - 1) / rate per tracklet.
pub fn person_seconds(tracklets: &[Tracklet]) -> f64 {
    tracklets
        .iter()
        .map(|t| (t.samples.len().saturating_sub(1)) as f64 / t.rate as f64)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_tracklet(id: u64, start_frame: i64, n: usize, rate: u32) -> Tracklet {
        Tracklet {
            identity: id,
            scene: "s".into(),
            samples: (0..n)
                .map(|i| Sample { frame: start_frame + i as i64, x: i as f64, y: 0.0 })
                .collect(),
            rate,
        }
    }

    #[test]
    fn downsample_10_to_2() {
        let t = linear_tracklet(1, 0, 20, 10);
        let d = downsample_tracklet(&t, 2).unwrap();
        assert_eq!(d.rate, 2);
        let frames: Vec<i64> = d.samples.iter().map(|s| s.frame).collect();
        assert_eq!(frames, vec![0, 5, 10, 15]);
    }

    #[test]
    fn downsample_identity_case() {
        let t = linear_tracklet(1, 0, 7, 2);
        let d = downsample_tracklet(&t, 2).unwrap();
        assert_eq!(d, t);
    }

    #[test]
    fn downsample_non_divisible_errors() {
        let t = linear_tracklet(1, 0, 7, 3);
        let err = downsample_tracklet(&t, 2).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('3') && msg.contains('2'), "{msg}");
    }

    #[test]
    fn windows_minimal_length() {
        let spec = WindowSpec::new(8, 12, 1, 2);
        let t = linear_tracklet(1, 0, 20, 2);
        assert_eq!(build_windows(&t, &spec).len(), 1);
    }

    #[test]
    fn windows_count_25_steps() {
        let spec = WindowSpec::new(8, 12, 1, 2);
        let t = linear_tracklet(1, 0, 25, 2);
        assert_eq!(build_windows(&t, &spec).len(), 6);
    }

    #[test]
    fn windows_too_short() {
        let spec = WindowSpec::new(8, 12, 1, 2);
        let t = linear_tracklet(1, 0, 19, 2);
        assert!(build_windows(&t, &spec).is_empty());
    }

    #[test]
    fn windows_split_at_gap() {
        let spec = WindowSpec::new(2, 2, 1, 2);
        let mut t = linear_tracklet(1, 0, 10, 2);
        // Introduce a gap after sample 4: runs of length 5 and 5.
        for s in &mut t.samples[5..] {
            s.frame += 3;
        }
        let ws = build_windows(&t, &spec);
        assert_eq!(ws.len(), 4); // 2 per run of 5
        for w in &ws {
            assert_eq!(w.past.len(), 2);
            assert_eq!(w.future.len(), 2);
        }
    }

    #[test]
    fn split_first_appearance_order() {
        // 10 identities, appearing in scrambled id order.
        let appearance = [3u64, 7, 1, 9, 2, 8, 4, 6, 5, 10];
        let tracklets: Vec<Tracklet> = appearance
            .iter()
            .enumerate()
            .map(|(i, &id)| linear_tracklet(id, (i * 100) as i64, 25, 2))
            .collect();
        let spec = WindowSpec::new(8, 12, 1, 2);
        let split = chronological_split(&tracklets, 0.8, &spec).unwrap();
        assert_eq!(split.train_identities, appearance[..8].to_vec());
        assert_eq!(split.test_identities, appearance[8..].to_vec());
    }

    #[test]
    fn split_test_set_stable_across_fractions() {
        let tracklets: Vec<Tracklet> =
            (0..10).map(|i| linear_tracklet(i, (i * 50) as i64, 25, 2)).collect();
        let spec = WindowSpec::new(8, 12, 1, 2);
        let a = chronological_split(&tracklets, 0.2, &spec).unwrap();
        let b = chronological_split(&tracklets, 0.8, &spec).unwrap();
        assert_eq!(a.test_identities, b.test_identities);
        assert_eq!(a.test_windows, b.test_windows);
        assert_eq!(a.train_identities.len(), 2);
        assert_eq!(b.train_identities.len(), 8);
    }

    #[test]
    fn split_train_sets_nested() {
        let tracklets: Vec<Tracklet> =
            (0..25).map(|i| linear_tracklet(i, (i * 7) as i64, 25, 2)).collect();
        let spec = WindowSpec::new(8, 12, 1, 2);
        let fractions = [0.02, 0.04, 0.08, 0.16, 0.32, 0.48, 0.64, 0.8];
        let mut prev: Option<Vec<u64>> = None;
        for m in fractions {
            let s = chronological_split(&tracklets, m, &spec).unwrap();
            if let Some(p) = &prev {
                assert!(p.iter().all(|id| s.train_identities.contains(id)), "m={m}");
            }
            prev = Some(s.train_identities);
        }
    }

    #[test]
    fn split_too_few_identities() {
        let tracklets: Vec<Tracklet> =
            (0..4).map(|i| linear_tracklet(i, i as i64, 25, 2)).collect();
        let spec = WindowSpec::new(8, 12, 1, 2);
        assert!(chronological_split(&tracklets, 0.8, &spec).is_err());
    }

    #[test]
    fn split_tiebreak_by_identity() {
        // All appear at frame 0; order must be ascending id.
        let tracklets: Vec<Tracklet> =
            [5u64, 2, 9, 1, 7].iter().map(|&id| linear_tracklet(id, 0, 25, 2)).collect();
        assert_eq!(appearance_order(&tracklets), vec![1, 2, 5, 7, 9]);
    }

    #[test]
    fn person_seconds_worked_example() {
        // 30 people observed for 10 seconds each -> 300 person-seconds.
        let tracklets: Vec<Tracklet> =
            (0..30).map(|i| linear_tracklet(i, 0, 21, 2)).collect();
        assert_eq!(person_seconds(&tracklets), 300.0);
    }

    #[test]
    fn person_seconds_single_sample() {
        let t = linear_tracklet(0, 0, 1, 2);
        assert_eq!(person_seconds(&[t]), 0.0);
    }

    #[test]
    fn person_seconds_61_samples() {
        let ts: Vec<Tracklet> = (0..2).map(|i| linear_tracklet(i, 0, 61, 2)).collect();
        assert_eq!(person_seconds(&ts), 60.0);
    }

    #[test]
    fn person_seconds_additive() {
        let a: Vec<Tracklet> = (0..3).map(|i| linear_tracklet(i, 0, 17, 2)).collect();
        let b: Vec<Tracklet> = (3..8).map(|i| linear_tracklet(i, 0, 9, 2)).collect();
        let both: Vec<Tracklet> = a.iter().chain(b.iter()).cloned().collect();
        assert_eq!(person_seconds(&both), person_seconds(&a) + person_seconds(&b));
    }
}
