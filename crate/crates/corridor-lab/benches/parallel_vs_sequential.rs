//! Batch gradient throughput: rayon map versus the sequential fallback.
//!
//! Run `cargo bench` for the parallel path and
//! `cargo bench --no-default-features` for sequential-only numbers.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use corridor_lab::core::{GridShape, TrajectoryWindow};
use corridor_lab::heatmap::trajectory_to_heatmaps;
use corridor_lab::ingest::SceneContext;
use corridor_lab::parallel::map_collect_seq;
use corridor_lab::predictor::{build_model, observation_for, Predictor};

const SHAPE: GridShape = GridShape { h: 32, w: 32 };
const HIST: usize = 4;
const FUT: usize = 6;

fn fixture() -> (Predictor, SceneContext, Vec<TrajectoryWindow>) {
    let model = build_model(SHAPE, HIST, FUT, 2, 0);
    let scene =
        SceneContext::from_labels("bench", SHAPE, 2, &vec![0; SHAPE.len()], 2).unwrap();
    let windows: Vec<TrajectoryWindow> = (0..16)
        .map(|i| {
            let y = 4.0 + (i % 8) as f64 * 3.0;
            let path: Vec<(f64, f64)> =
                (0..HIST + FUT).map(|k| (2.0 + k as f64 * 1.5, y)).collect();
            TrajectoryWindow {
                identity: i,
                scene: "bench".into(),
                past: path[..HIST].to_vec(),
                future: path[HIST..].to_vec(),
                start_frame: 0,
            }
        })
        .collect();
    (model, scene, windows)
}

/// One full forward/backward pass per window; this is the unit of work the
/// training loops fan out.
fn window_grad_norm(model: &Predictor, scene: &SceneContext, w: &TrajectoryWindow) -> f64 {
    use corridor_lab::autograd::Tape;
    let mut tape = Tape::new();
    let obs = observation_for(w, scene, 1.5, HIST);
    let input = tape
        .leaf(&[obs.channel_count(), SHAPE.h, SHAPE.w], obs.concat(), false)
        .unwrap();
    let weights = model.insert_weights(&mut tape).unwrap();
    let logits = model.forward_on_tape(&mut tape, input, &weights).unwrap();
    let target = trajectory_to_heatmaps(&w.future, SHAPE, 1.5);
    let y = tape.leaf(&[FUT, SHAPE.h, SHAPE.w], target.grid, false).unwrap();
    let loss = tape.bce_with_logits_sum(logits, y).unwrap();
    let grads = tape.backward(loss).unwrap();
    weights
        .ids()
        .iter()
        .filter_map(|&id| grads.get(id))
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

fn bench_batch_gradients(c: &mut Criterion) {
    let (model, scene, windows) = fixture();
    let mut group = c.benchmark_group("batch_gradients");
    group.sample_size(10);

    group.bench_function("sequential", |b| {
        b.iter_batched(
            || windows.clone(),
            |ws| map_collect_seq(&ws, |w| window_grad_norm(&model, &scene, w)),
            BatchSize::SmallInput,
        )
    });

    #[cfg(feature = "parallel")]
    group.bench_function("parallel", |b| {
        use corridor_lab::parallel::map_collect_par;
        b.iter_batched(
            || windows.clone(),
            |ws| map_collect_par(&ws, |w| window_grad_norm(&model, &scene, w)),
            BatchSize::SmallInput,
        )
    });

    group.finish();
}

criterion_group!(benches, bench_batch_gradients);
criterion_main!(benches);
