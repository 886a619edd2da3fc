use paec::autodiff::{Adam, AdamState, Tape};
use paec::dsp::{ComplexSpectrogram, FeatureBlock, FEATURE_CHANNELS, N_BINS};
use paec::metrics::{evaluate_testset, Passthrough, Silence};
use paec::model::{checkpoint, spectral_loss, Conditioning, Gtcnn, ModelConfig, Selection};
use paec::scene::{sample_scenes, Scenario, SourceCache, SourcePool, Talk, TalkPlan};
use paec::speaker::{EmbeddingCache, Registry};
use paec::train::{prepare_examples, train, Conditioner, Example, TrainConfig};
use paec::voice::{write_synthetic_pool, PoolSize};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_example(frames: usize, seed: u64, cond: Conditioning) -> Example {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = frames * N_BINS;
    Example {
        id: format!("rand{seed}"),
        features: FeatureBlock {
            data: (0..frames * FEATURE_CHANNELS * N_BINS).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            frames,
        },
        clean: ComplexSpectrogram::from_parts(
            (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            frames,
        )
        .unwrap(),
        cond,
    }
}

fn embedding(seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..512).map(|_| rng.gen_range(-1.0..1.0)).collect();
    paec::speaker::l2_normalize(&mut v);
    v
}

#[test]
fn projection_receives_gradient_after_one_step() {
    let mut model = Gtcnn::<f32>::new(ModelConfig::desk(Selection::Es).with_seed(3)).unwrap();
    let ex = random_example(6, 4, Conditioning::near(embedding(5)));
    let step = |model: &Gtcnn<f32>| {
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &ex.features, &ex.cond).unwrap();
        let loss = spectral_loss(&mut tape, &out, &ex.clean).unwrap();
        tape.backward(loss).unwrap()
    };
    let mut state = AdamState::new(&model.params);
    let g = step(&model);
    Adam::default().step(&mut model.params, &g, &mut state).unwrap();
    let g = step(&model);
    let id = model.params.id("speaker.proj_near.weight").unwrap();
    let w = g.get(id).expect("projection weight takes part in the loss");
    assert!(w.iter().any(|v| *v != 0.0));
    assert!(model.params.id("speaker.proj_far.weight").is_none());
}

fn tiny_config(sel: Selection) -> TrainConfig {
    let mut c = TrainConfig::new(ModelConfig::desk(sel).with_seed(8));
    c.max_epochs = 3;
    c.batch_size = 2;
    c.lr = 1e-3;
    c
}

#[test]
fn training_is_bit_reproducible() {
    let set: Vec<Example> = (0..3).map(|k| random_example(5, 10 + k, Conditioning::none())).collect();
    let cfg = tiny_config(Selection::None);
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Gtcnn::<f32>::new(cfg.model.clone()).unwrap();
        let rec = train(&mut m, &set, &set[..1], &cfg, Some(dir.path()), &mut |_| {}).unwrap();
        let bytes = std::fs::read(rec.checkpoint.clone().unwrap()).unwrap();
        (rec.loss_trace(), rec.lr_trace(), bytes, checkpoint::encode(&m).unwrap())
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert_eq!(a.0.len(), 3);
}

#[test]
fn training_lowers_the_loss_and_keeps_lr_steps_exact() {
    let set: Vec<Example> = (0..2).map(|k| random_example(4, 20 + k, Conditioning::none())).collect();
    let mut cfg = tiny_config(Selection::None);
    cfg.max_epochs = 12;
    cfg.lr = 3e-3;
    let mut m = Gtcnn::<f32>::new(cfg.model.clone()).unwrap();
    let rec = train(&mut m, &set, &[], &cfg, None, &mut |_| {}).unwrap();
    assert!(rec.final_train_loss().unwrap() < rec.initial_train_loss);
    let lrs = rec.lr_trace();
    for w in lrs.windows(2) {
        assert!(w[1] == w[0] || w[1] == 0.5 * w[0], "{lrs:?}");
    }
    assert!(rec.epochs.iter().enumerate().all(|(i, e)| e.epoch == i + 1));
}

#[test]
fn mode_mismatch_is_rejected() {
    let set = vec![random_example(4, 1, Conditioning::none())];
    let cfg = tiny_config(Selection::Es);
    let mut m = Gtcnn::<f32>::new(ModelConfig::desk(Selection::None)).unwrap();
    assert!(train(&mut m, &set, &[], &cfg, None, &mut |_| {}).is_err());
}

#[test]
fn scene_examples_and_baseline_reports() {
    let dir = tempfile::tempdir().unwrap();
    let size = PoolSize {
        speakers: 3,
        utterances: 1,
        utterance_s: 2.0,
        enroll_s: 2.0,
        noises: 2,
        noise_s: 2.0,
    };
    write_synthetic_pool(dir.path(), size, 2).unwrap();
    let pool = SourcePool::open(dir.path()).unwrap();
    let scenes = sample_scenes(3, Scenario::D2, &pool, 4, 1.0, TalkPlan::Cycle).unwrap();

    let reg = Registry::load(dir.path().join("enroll.json")).unwrap();
    let mut cond = Conditioner::new(Selection::Emix, Some(reg), EmbeddingCache::in_memory()).unwrap();
    let mut sources = SourceCache::new();
    let ex = prepare_examples(&scenes, &mut sources, &mut cond, 0.5).unwrap();
    assert_eq!(ex.len(), 6);
    assert_eq!(ex[1].id, "d2-00000#1");
    assert_eq!(ex[0].features.frames, 49);
    assert!(ex[0].cond.near.is_some() && ex[0].cond.far.is_some());
    assert_ne!(ex[0].cond.near, ex[0].cond.far);

    let input = evaluate_testset(&scenes, &mut Passthrough, &mut sources, "input").unwrap();
    let dt = &input.rows[0];
    assert_eq!(dt.talk, Talk::Dt);
    assert_eq!(dt.si_sdr_improvement, Some(0.0));
    assert_eq!(input.rows[2].erle, Some(0.0));
    assert!(input.rows[2].si_sdr.is_none());

    let zero = evaluate_testset(&scenes, &mut Silence, &mut sources, "zero").unwrap();
    assert_eq!(zero.rows[2].erle, Some(f64::INFINITY));
    let json = zero.to_json().unwrap();
    assert!(json.contains("\"inf\""));
    assert_eq!(json, evaluate_testset(&scenes, &mut Silence, &mut sources, "zero").unwrap().to_json().unwrap());

    let empty = evaluate_testset(&[], &mut Silence, &mut sources, "zero").unwrap();
    assert!(empty.rows.is_empty() && empty.summary.is_empty());
}
