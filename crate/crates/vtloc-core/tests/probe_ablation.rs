//! Scratch harness for the ablation-direction experiments.

use std::time::Instant;

use vtloc_core::config::{ModelConfig, PyramidStyle, Task, TextMode};
use vtloc_core::data::{generate_synthetic, SyntheticSpec};
use vtloc_core::pipeline::{
    evaluate, infer_dims, pretrain_clips_from_samples, pretrain_multilabel, prepare_samples,
    train_model, EvalOptions, Model, TextContext, TrainConfig,
};

fn envf(name: &str, default: f64) -> f64 {
    std::env::var(name).ok().and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn envu(name: &str, default: usize) -> usize {
    std::env::var(name).ok().and_then(|s| s.parse().ok()).unwrap_or(default)
}

#[derive(Clone, Copy, Debug)]
enum Variant {
    Baseline,
    NoPyramid,
    NoText,
    LateFusion,
}

fn run_variant(variant: Variant, seed: u64, n_classes: usize, videos: usize) -> f64 {
    // One fixed dataset; seeds vary initialization and batch order.
    let spec = SyntheticSpec::multi_scale_tal(videos, n_classes, 42);
    let data = generate_synthetic(&spec).unwrap();
    let ctx = TextContext::for_synthetic(n_classes, Task::Tal);
    let samples = prepare_samples(&data, Task::Tal, &ctx, 0.5);

    let mut cfg = ModelConfig::desk_default(Task::Tal);
    cfg.head_blocks = envu("M", 2);
    match variant {
        Variant::Baseline => {}
        Variant::NoPyramid => {
            cfg.pyramid_style = PyramidStyle::None;
            cfg.n_levels = 1;
            cfg.regression_ranges = vtloc_core::config::default_regression_ranges(1);
        }
        Variant::NoText => cfg.text_mode = TextMode::NoText,
        Variant::LateFusion => cfg.text_mode = TextMode::ClsOnly,
    }
    let mut config = TrainConfig::new(cfg);
    config.late_fusion = matches!(variant, Variant::LateFusion);
    config.optim.batch_size = 8;
    config.optim.learning_rate = envf("LR", 0.04);
    config.optim.warmup_steps = 50;
    config.seed = seed;

    let dims = infer_dims(&samples).unwrap();
    let mut model = Model::new(&config.model, dims, config.late_fusion, config.seed).unwrap();

    let pre_steps = envu("PRE", 200);
    if pre_steps > 0 {
        let clips = pretrain_clips_from_samples(&samples);
        let texts: Vec<Vec<u32>> = (0..n_classes).map(|c| ctx.label_ids(c)).collect();
        let mut optim = config.optim;
        optim.steps = pre_steps;
        optim.learning_rate = envf("PRE_LR", 0.05);
        pretrain_multilabel(&mut model, &clips, &texts, &optim, config.seed).unwrap();
    }
    let mut ft = config.clone();
    ft.optim.steps = envu("FT", 600);
    if envu("FREEZE_TEXT", 0) == 1 {
        ft.freeze.text_encoder = vtloc_core::pipeline::FreezeMode::Frozen;
    }
    train_model(&mut model, &ft, &samples).unwrap();
    let report = evaluate(&model, &samples, &EvalOptions::default(), Some(&ctx)).unwrap();
    report.get("mAP@0.5").unwrap()
}

#[test]
#[ignore]
fn ablation_probe() {
    let n_classes = envu("CLASSES", 3);
    let videos = envu("VIDEOS", 100);
    let seeds: Vec<u64> = (1..=envu("SEEDS", 1) as u64).collect();
    for variant in [
        Variant::Baseline,
        Variant::NoPyramid,
        Variant::NoText,
        Variant::LateFusion,
    ] {
        let t0 = Instant::now();
        let scores: Vec<f64> = seeds
            .iter()
            .map(|&s| run_variant(variant, s, n_classes, videos))
            .collect();
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        println!(
            "{variant:?}: mean {mean:.4} scores {scores:?} ({:.1?} total)",
            t0.elapsed()
        );
    }
}
