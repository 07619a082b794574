use std::time::Instant;
use tse_core::condition::{Strategy, StrategyConfig};
use tse_core::embed::{build_reference_encoders, GapModel, DEFAULT_DIM};
use tse_core::synth::{assign_clip_captions, synth_dataset, world_classes, SynthConfig, WorldKind};
use tse_core::trainer::{train, TrainConfig, TrainResources};

#[test]
fn probe_step_speed() {
    let specs = world_classes(WorldKind::Adjacent);
    let ds = synth_dataset(&specs, &SynthConfig::new(24, 3)).unwrap();
    let (audio, text) =
        build_reference_encoders(&specs, 8000, DEFAULT_DIM, GapModel::zero(DEFAULT_DIM), 7)
            .unwrap();
    let captions = assign_clip_captions(&specs, &ds, 20, 5);
    let res = TrainResources {
        clips: &ds.clips,
        class_ids: &ds.class_ids,
        clip_captions: Some(&captions),
        clip_labels: None,
        audio_encoder: Some(&audio),
        text_encoder: Some(&text),
        cache: None,
        validation: None,
    };
    let cfg = TrainConfig::desk_default(
        StrategyConfig::new(Strategy::VanillaNi, 1e-2, 0.0).unwrap(),
        7,
    )
    .with_steps(30);
    let t0 = Instant::now();
    let out = train(&cfg, &res, None).unwrap();
    let dt = t0.elapsed();
    println!(
        "30 steps B=16: {:.2}s total, {:.1} ms/step, last loss {:.3}",
        dt.as_secs_f64(),
        dt.as_secs_f64() * 1000.0 / 30.0,
        out.log.records.last().unwrap().loss
    );
}
