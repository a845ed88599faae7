use llip::contextualization::PoolingVariant;
use llip::data::{grammar_vocabulary, training_scenes, Dataset};
use llip::model::ModelConfig;
use llip::training::checkpoint::{decode_checkpoint, encode_checkpoint};
use llip::training::{load_checkpoint, save_checkpoint, train_run, TrainConfig, Trainer};
use llip::LlipError;

fn small_model(variant: PoolingVariant) -> ModelConfig {
    let mut c = ModelConfig::desk(grammar_vocabulary().len());
    c.vit.width = 32;
    c.text.width = 32;
    c.vit.depth = 1;
    c.text.depth = 1;
    c.vit.mixture_tokens = if variant == PoolingVariant::SiglipCls { 1 } else { 4 };
    c.variant = variant;
    c
}

fn short_run(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 16,
        warmup_steps: 5,
        lr_peak: 1e-3,
        seed: 11,
        ..TrainConfig::default()
    }
}

fn scenes() -> Dataset {
    training_scenes(256, 11).unwrap()
}

#[test]
fn identical_runs_are_bitwise_identical() {
    let data = scenes();
    let vocab = grammar_vocabulary();
    for variant in [PoolingVariant::Llip, PoolingVariant::LearnedAverage] {
        let a = train_run(small_model(variant), short_run(12), &data, &vocab, None, None).unwrap();
        let b = train_run(small_model(variant), short_run(12), &data, &vocab, None, None).unwrap();
        assert_eq!(encode_checkpoint(&a.checkpoint).unwrap(), encode_checkpoint(&b.checkpoint).unwrap());
        assert_eq!(a.log, b.log);
    }
}

#[test]
fn resumed_run_matches_uninterrupted() {
    let data = scenes();
    let vocab = grammar_vocabulary();
    let full = train_run(small_model(PoolingVariant::Llip), short_run(50), &data, &vocab, None, None).unwrap();

    let mut first = Trainer::new(small_model(PoolingVariant::Llip), short_run(50), &data, &vocab).unwrap();
    first.run(25, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.llip");
    save_checkpoint(&first.checkpoint(), &path).unwrap();
    drop(first);

    let mut second = Trainer::resume(load_checkpoint(&path, None).unwrap(), &data, &vocab).unwrap();
    assert_eq!(second.step_count(), 25);
    let tail = second.run(50, None).unwrap();
    assert_eq!(second.checkpoint(), full.checkpoint);
    assert_eq!(tail.rows, full.log.rows[25..]);
}

#[test]
fn fifty_steps_reduce_the_loss() {
    let data = scenes();
    let vocab = grammar_vocabulary();
    for variant in [PoolingVariant::Llip, PoolingVariant::SiglipCls] {
        let out = train_run(small_model(variant), short_run(50), &data, &vocab, None, None).unwrap();
        let first = out.log.rows[0].loss;
        let last = out.log.final_loss().unwrap();
        assert!(last < first, "{}: {} -> {}", variant, first, last);
    }
}

#[test]
fn checkpoint_files_round_trip() {
    let data = scenes();
    let vocab = grammar_vocabulary();
    let out = train_run(small_model(PoolingVariant::Llip), short_run(6), &data, &vocab, None, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.llip");
    let b = dir.path().join("b.llip");
    save_checkpoint(&out.checkpoint, &a).unwrap();
    let loaded = load_checkpoint(&a, Some(&out.checkpoint.model)).unwrap();
    save_checkpoint(&loaded, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(loaded, out.checkpoint);

    let mut bytes = std::fs::read(&a).unwrap();
    bytes[0] = b'X';
    assert!(matches!(decode_checkpoint(&bytes, None), Err(LlipError::Format(_))));
    let mut other = small_model(PoolingVariant::Llip);
    other.vit.mixture_tokens = 6;
    assert!(matches!(load_checkpoint(&a, Some(&other)), Err(LlipError::Compatibility(_))));
}

#[test]
fn single_pair_batches_are_rejected() {
    let data = scenes();
    let cfg = TrainConfig {
        batch_size: 1,
        ..short_run(5)
    };
    assert!(matches!(
        Trainer::new(small_model(PoolingVariant::Llip), cfg, &data, &grammar_vocabulary()),
        Err(LlipError::Config(_))
    ));
}

#[test]
fn eval_hook_runs_on_schedule() {
    let data = scenes();
    let vocab = grammar_vocabulary();
    let cfg = TrainConfig {
        eval_every: 4,
        ..short_run(10)
    };
    let mut seen = Vec::new();
    let mut hook = |step: usize, _: &llip::model::Model| {
        seen.push(step);
        Ok(vec![("probe".to_string(), step as f64)])
    };
    let out = train_run(small_model(PoolingVariant::UniformAverage), cfg, &data, &vocab, Some(&mut hook), None).unwrap();
    assert_eq!(seen, vec![4, 8, 10]);
    assert_eq!(out.log.evals.len(), 3);
}
