//! Scratch harness for hyperparameter probing; not part of the test suite.

use std::time::Instant;

use vtloc_core::config::{ModelConfig, Task};
use vtloc_core::data::{generate_synthetic, SyntheticSpec};
use vtloc_core::pipeline::{
    evaluate, infer_dims, oracle_report, prepare_samples, train_model, EvalOptions, Model,
    TextContext, TrainConfig,
};

fn envf(name: &str, default: f64) -> f64 {
    std::env::var(name).ok().and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn envu(name: &str, default: usize) -> usize {
    std::env::var(name).ok().and_then(|s| s.parse().ok()).unwrap_or(default)
}

#[test]
#[ignore]
fn tuning_probe() {
    let spec = SyntheticSpec::multi_scale_tal(envu("VIDEOS", 200), 3, 42);
    let data = generate_synthetic(&spec).unwrap();
    let ctx = TextContext::for_synthetic(3, Task::Tal);
    let samples = prepare_samples(&data, Task::Tal, &ctx, 0.5);
    println!("background fraction: {:.3}", data.background_fraction());
    println!("oracle: {:?}", oracle_report(&samples, Task::Tal).unwrap().metrics);

    let mut config = TrainConfig::new(ModelConfig::desk_default(Task::Tal));
    config.model.head_blocks = envu("M", 2);
    config.model.hidden_size = envu("K", 32);
    config.optim.batch_size = envu("BATCH", 8);
    config.optim.learning_rate = envf("LR", 0.02);
    config.optim.warmup_steps = envu("WARMUP", 50);
    config.seed = envu("SEED", 1) as u64;

    let chunk = envu("CHUNK", 200);
    let chunks = envu("CHUNKS", 5);
    config.optim.steps = chunk * chunks;

    let dims = infer_dims(&samples).unwrap();
    let mut model = Model::new(&config.model, dims, false, config.seed).unwrap();
    let mut done = 0;
    for _ in 0..chunks {
        let mut chunk_cfg = config.clone();
        chunk_cfg.optim.steps = chunk;
        chunk_cfg.optim.warmup_steps = if done == 0 { config.optim.warmup_steps } else { 0 };
        let t0 = Instant::now();
        let curve = train_model(&mut model, &chunk_cfg, &samples).unwrap();
        let dt = t0.elapsed();
        done += chunk;
        let last = curve.last().unwrap();
        let t1 = Instant::now();
        let report = evaluate(&model, &samples, &EvalOptions::default(), Some(&ctx)).unwrap();
        println!(
            "steps {:>5} ({:>4.0} ms/step, eval {:.1?}): cls {:.4} reg {:.4} mAP@0.5 {:.4}",
            done,
            dt.as_millis() as f64 / chunk as f64,
            t1.elapsed(),
            last.cls_loss,
            last.reg_loss,
            report.get("mAP@0.5").unwrap()
        );
    }

    // Candidate quality on a few videos.
    use vtloc_core::data::{sample_frames, SamplingMode};
    use vtloc_core::decode::{expand, soft_nms, top_k};
    use vtloc_core::geom::{iou_unchecked, make_frame_grid};
    use vtloc_core::rng::Rng;
    let mut rng = Rng::new(0);
    for sample in samples.iter().take(3) {
        let clip = sample_frames(&sample.video, SamplingMode::EvenlySpaced, 128, 0.5, &mut rng).unwrap();
        let grid = make_frame_grid(128, 4, clip.seconds_per_frame).unwrap();
        let dense = model.forward_clip(&clip, &sample.texts, None).unwrap();
        println!("video {}:", sample.video_id);
        for g in &clip.gts {
            println!("  gt class {} [{:.1}, {:.1}]", g.class_id, g.start, g.end);
        }
        for per_class in &dense {
            let cands = expand(per_class, &grid, 0.05).unwrap();
            let kept = soft_nms(&cands, 0.5, 0.001).unwrap();
            for c in top_k(&kept, 3).items {
                let best_iou = clip
                    .gts
                    .iter()
                    .filter(|g| g.class_id == c.segment.class_id)
                    .map(|g| iou_unchecked(c.segment.start, c.segment.end, g.start, g.end))
                    .fold(0.0_f64, f64::max);
                println!(
                    "  pred class {} [{:.1}, {:.1}] score {:.3} (level {}, iou {:.2})",
                    c.segment.class_id,
                    c.segment.start,
                    c.segment.end,
                    c.segment.score.unwrap(),
                    c.level,
                    best_iou
                );
            }
        }
    }
}
