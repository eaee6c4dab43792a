use acpo_core::acpo::{anchor_drift, finetune_run, AcpoConfig};
use acpo_core::adapters::{attach_adapters, AdapterMode};
use acpo_core::data::{build_diffusion_dataset, build_iqa_dataset};
use acpo_core::diffusion::{make_schedule, sample_loop, train_base, BaseTrainConfig, NoGradRunner, NoisePredictor, PredictorArch};
use acpo_core::iqa::{train_evaluator, EvaluatorTraining, ScorerConfig};
use acpo_core::metrics::{evaluate_pairwise, SummaryRow};

fn small_arch() -> PredictorArch {
    PredictorArch { image_size: 8, hidden: vec![24], time_dim: 8, cond_dim: 0, num_classes: 4, pixel_hidden: 4 }
}

#[test]
fn tiny_pipeline_end_to_end() {
    let sched = make_schedule(20, 1e-3, 0.3).unwrap();
    let data = build_diffusion_dataset(64, 8, false, 1).unwrap();
    let mut net = NoisePredictor::new(small_arch(), 2).unwrap();
    let losses = train_base(&mut net, &data, &sched, &BaseTrainConfig { steps: 60, batch_size: 8, lr: 3e-3, seed: 3 }).unwrap();
    assert!(losses.iter().all(|l| l.is_finite()));
    let items = build_iqa_dataset(80, false, 8, 4).unwrap();
    let (scorer, _) = train_evaluator(ScorerConfig::two_stream(8), &items, &EvaluatorTraining { epochs: 2, lr: 3e-3, batch_size: 16, seed: 5 }).unwrap();

    attach_adapters(&mut net, 2, 1.0, 6).unwrap();
    let base = sample_loop(&mut NoGradRunner::new(&net, AdapterMode::Base), &sched, &[8, 8], 3, 9, None, false).unwrap();
    let adapted = sample_loop(&mut NoGradRunner::new(&net, AdapterMode::Adapted), &sched, &[8, 8], 3, 9, None, false).unwrap();
    assert_eq!(base.images, adapted.images);

    let frozen = net.params.frozen_checksum();
    let cfg = AcpoConfig {
        t_late_max: 5,
        guided_steps: 2,
        mse_batch: 4,
        guide_batch: 2,
        anchor_batch: 4,
        steps: 6,
        lr: 1e-2,
        seed: 7,
        guide_pool: 8,
        probe_size: 4,
        probe_every: 3,
        ..AcpoConfig::default()
    };
    let out = finetune_run(&mut net, &scorer, &sched, &data, &cfg).unwrap();
    assert_eq!(out.reports.len(), 6);
    assert_eq!(out.reports[0].l_anchor, 0.0);
    assert_eq!(net.params.frozen_checksum(), frozen);
    assert_eq!(out.base_checksum, frozen);
    assert!(out.final_drift > 0.0);
    assert_eq!(anchor_drift(&net, &sched, &data, 5, 11).unwrap(), anchor_drift(&net, &sched, &data, 5, 11).unwrap());

    let ev = evaluate_pairwise(&net, &scorer, &sched, 10, 12).unwrap();
    let row = SummaryRow::from_sample("run", "guide", &ev.sample).unwrap();
    assert!(row.win_rate >= 0.0 && row.win_rate <= 1.0);
    assert_eq!(ev.baseline_images.shape(), &[10, 8, 8]);
}
