//! Scratch driver for sizing the synthetic adaptation experiment.
//! Prints per-mode ADE orderings and wall time; not part of the test
//! suite.

use std::fs;
use std::time::Instant;

use corridor_lab::harness::{run, RunConfig};

fn synth_pretrain() -> String {
    let mut s = String::from("[grid]\nh = 16\nw = 16\n\n[sim]\nn_agents = 14\nduration_s = 40\nrate = 2\nnoise_sigma = 0.12\nstagger = 2\nspeed = 1.0\n\n");
    // Straight transits in varied directions: spawn box -> far goal.
    let lanes = [
        ("0,2,3,12", "15,8"),
        ("12,2,3,12", "0,8"),
        ("2,0,12,3", "8,15"),
        ("2,12,12,3", "8,0"),
        ("0,0,4,4", "15,15"),
        ("11,0,4,4", "0,15"),
    ];
    for (i, (spawn, goal)) in lanes.iter().enumerate() {
        s.push_str(&format!(
            "[scene:pre{i}]\nseed = {}\nspawn_box = {spawn}\ngoal = {goal}\ndespawn_goal = 1.5\n\n",
            100 + i
        ));
    }
    s
}

fn synth_adapt() -> String {
    let mut s = String::from("[grid]\nh = 16\nw = 16\n\n[sim]\nn_agents = 14\nduration_s = 40\nrate = 2\nnoise_sigma = 0.12\nstagger = 2\nspeed = 1.0\nbeta = 2.5\n\n");
    // Rightward transit; the hidden field bends futures up or down once
    // agents cross mid-grid.
    let fields = [
        ("a", "halfplane_x:8,0,-1", 201),
        ("b", "halfplane_x:8,0,1", 202),
        ("c", "halfplane_x:8,0,-1", 203),
        ("d", "halfplane_x:8,0,1", 204),
    ];
    for (name, field, seed) in fields {
        s.push_str(&format!(
            "[scene:{name}]\nseed = {seed}\nspawn_box = 0,2,3,12\ngoal = 24,8\nfield = {field}\ndespawn_x = 14\n\n"
        ));
    }
    s
}

fn main() {
    let dir = std::env::temp_dir().join("corridor-tune");
    fs::create_dir_all(&dir).unwrap();
    fs::write(dir.join("pre.cfg"), synth_pretrain()).unwrap();
    fs::write(dir.join("adapt.cfg"), synth_adapt()).unwrap();
    let run_cfg_text = "\
[scenes]
synth = adapt.cfg
hist_len = 4
fut_len = 6
stride = 3

[model]
seed = 0

[pretrain]
synth = pre.cfg
epochs = 8
lr = 0.001
batch_size = 8

[adaptation]
modes = lc,finetune_only,lc_per_scene_ft
epochs = 16
prompt_lr = 0.05
head_lr = 0.001
batch_size = 8

[sweep]
fractions = 2,80
seeds = 0,1,2

[output]
plots = false
";
    fs::write(dir.join("run.cfg"), run_cfg_text).unwrap();
    let cfg = RunConfig::parse(run_cfg_text, &dir).unwrap();
    let t0 = Instant::now();
    let out = run(&cfg, run_cfg_text, &dir.join("out")).unwrap();
    println!("elapsed: {:.1}s", t0.elapsed().as_secs_f64());

    // Median-over-seeds ADE per (mode, fraction), averaged over scenes.
    let median = |mut v: Vec<f64>| -> f64 {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = v.len();
        if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
    };
    for scene in ["a", "b", "c", "d"] {
        let base = out
            .rows
            .iter()
            .find(|r| r.scene == scene && r.mode == "base")
            .map(|r| r.ade)
            .unwrap();
        print!("scene {scene}: base {base:.3}");
        for mode in ["LC", "FinetuneOnly", "LCPerSceneFT"] {
            for frac in [0.02, 0.8] {
                let ades: Vec<f64> = out
                    .rows
                    .iter()
                    .filter(|r| r.scene == scene && r.mode == mode && r.fraction == frac)
                    .map(|r| r.ade)
                    .collect();
                if !ades.is_empty() {
                    print!("  {mode}@{frac}: {:.3}", median(ades));
                }
            }
        }
        println!();
    }
}
