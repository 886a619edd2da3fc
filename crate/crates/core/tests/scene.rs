use paec::db::energy;
use paec::dsp::Waveform;
use paec::metrics::{measure_ratios, si_sdr};
use paec::scene::*;
use paec::voice::{write_synthetic_pool, PoolSize};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_pool(dir: &std::path::Path) -> SourcePool {
    let size = PoolSize {
        speakers: 4,
        utterances: 2,
        utterance_s: 3.0,
        enroll_s: 2.0,
        noises: 3,
        noise_s: 3.0,
    };
    write_synthetic_pool(dir, size, 11).unwrap();
    SourcePool::open(dir).unwrap()
}

#[test]
fn rendered_scenes_hit_their_ratios_and_add_up() {
    let dir = tempfile::tempdir().unwrap();
    let pool = small_pool(dir.path());
    let mut cache = SourceCache::new();
    for scenario in [Scenario::D1, Scenario::D2, Scenario::D3] {
        let scenes = sample_scenes(3, scenario, &pool, 5, 1.5, TalkPlan::Only(Talk::Dt)).unwrap();
        for spec in &scenes {
            let rec = render_scene(spec, &mut cache).unwrap();
            let sum = rec.s.samples.iter().zip(&rec.z.samples).zip(&rec.d.samples).zip(&rec.v.samples);
            for (k, (((s, z), d), v)) in sum.enumerate() {
                assert!((rec.y.samples[k] - (s + z + d + v)).abs() <= 1e-9);
            }
            let got = measure_ratios(&rec).unwrap();
            for (g, want) in [(got.sir, spec.ratios.sir), (got.ser, spec.ratios.ser), (got.snr, spec.ratios.snr)] {
                if want.is_infinite() {
                    assert_eq!(g, want);
                } else {
                    assert!((g - want).abs() <= 0.01, "{} {g} vs {want}", spec.scene_id);
                }
            }
        }
    }
}

#[test]
fn single_talk_conventions() {
    let dir = tempfile::tempdir().unwrap();
    let pool = small_pool(dir.path());
    let mut cache = SourceCache::new();
    let scenes = sample_scenes(3, Scenario::D2, &pool, 9, 1.0, TalkPlan::Cycle).unwrap();
    assert_eq!(scenes.iter().map(|s| s.talk).collect::<Vec<_>>(), Talk::ALL.to_vec());

    let ne = render_scene(&scenes[1], &mut cache).unwrap();
    assert_eq!(energy(&ne.x.samples), 0.0);
    assert_eq!(energy(&ne.d.samples), 0.0);
    assert_eq!(measure_ratios(&ne).unwrap().ser, f64::INFINITY);

    let fe = render_scene(&scenes[2], &mut cache).unwrap();
    assert_eq!(energy(&fe.s.samples), 0.0);
    assert!(energy(&fe.d.samples) > 0.0);
    assert!(measure_ratios(&fe).is_err());
    assert!((fe.achieved.ser - fe.spec.ratios.ser).abs() <= 0.01);
    for k in 0..fe.y.len() {
        assert_eq!(fe.y.samples[k], fe.z.samples[k] + fe.d.samples[k] + fe.v.samples[k]);
    }
}

#[test]
fn manifest_round_trip_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let pool = small_pool(dir.path());
    let path = dir.path().join("m.jsonl");
    let a = build_manifest(&path, 4, Scenario::D3, &pool, 3, 1.0, TalkPlan::Cycle).unwrap();
    let b = read_manifest(&path).unwrap();
    assert_eq!(a, b);
    let again = sample_scenes(4, Scenario::D3, &pool, 3, 1.0, TalkPlan::Cycle).unwrap();
    assert_eq!(a, again);
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.contains("\"inf\""));

    let mut c1 = SourceCache::new();
    let mut c2 = SourceCache::new();
    assert_eq!(render_scene(&a[0], &mut c1).unwrap(), render_scene(&b[0], &mut c2).unwrap());
}

#[test]
fn manifest_rejects_future_versions_and_bad_ratios() {
    let dir = tempfile::tempdir().unwrap();
    let pool = small_pool(dir.path());
    let mut scenes = sample_scenes(1, Scenario::D2, &pool, 1, 1.0, TalkPlan::Only(Talk::Dt)).unwrap();
    let path = dir.path().join("m.jsonl");
    scenes[0].format_version = MANIFEST_VERSION + 1;
    write_manifest(&path, &scenes).unwrap();
    assert!(read_manifest(&path).is_err());
    scenes[0].format_version = MANIFEST_VERSION;
    scenes[0].ratios.ser = 50.0;
    write_manifest(&path, &scenes).unwrap();
    assert!(read_manifest(&path).is_err());
}

#[test]
fn too_few_speakers_is_a_pool_error() {
    let dir = tempfile::tempdir().unwrap();
    let size = PoolSize {
        speakers: 2,
        utterances: 1,
        utterance_s: 1.0,
        enroll_s: 1.0,
        noises: 1,
        noise_s: 1.0,
    };
    write_synthetic_pool(dir.path(), size, 1).unwrap();
    let pool = SourcePool::open(dir.path()).unwrap();
    assert!(sample_scene(Scenario::D1, &pool, 0, &SceneOptions::default()).is_ok());
    let err = sample_scene(Scenario::D2, &pool, 0, &SceneOptions::default()).unwrap_err();
    assert!(matches!(err, paec::Error::Pool(_)));
}

#[test]
fn random_rooms_reproduce_their_reverberation_time() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..20 {
        let room = sample_room(&mut rng);
        let t = estimate_rt60(&simulate_rir(&room).unwrap()).unwrap();
        assert!((t - room.rt60).abs() <= 0.2 * room.rt60, "{room:?}: {t}");
    }
}

fn signal(len: usize, seed: u64) -> Waveform {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Waveform::new((0..len).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn mixing_is_additive_and_exact(seed in any::<u64>(), sir in -5.0f64..40.0, ser in -10.0f64..20.0, snr in -5.0f64..40.0) {
        let n = 400;
        let (s, z, d, v) = (signal(n, seed), signal(n, seed ^ 1), signal(n, seed ^ 2), signal(n, seed ^ 3));
        let m = mix_at_ratios(&s, &z, &d, &v, &Ratios { sir, ser, snr }).unwrap();
        for k in 0..n {
            let sum = m.s.samples[k] + m.z.samples[k] + m.d.samples[k] + m.v.samples[k];
            prop_assert!((m.y.samples[k] - sum).abs() <= 1e-12);
        }
        prop_assert!((m.achieved.sir - sir).abs() < 1e-9);
        prop_assert!((m.achieved.ser - ser).abs() < 1e-9);
        prop_assert!((m.achieved.snr - snr).abs() < 1e-9);
    }

    #[test]
    fn energy_decay_curve_never_rises(seed in any::<u64>(), len in 2usize..600) {
        let h = signal(len, seed);
        let edc = schroeder_edc(&h.samples);
        prop_assert!(edc[0].abs() < 1e-12);
        for w in edc.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12);
        }
    }

    #[test]
    fn si_sdr_ignores_estimate_scale(seed in any::<u64>(), gain in 0.01f64..100.0) {
        let r = signal(300, seed);
        let e = Waveform::new(r.samples.iter().zip(&signal(300, seed ^ 7).samples).map(|(a, b)| a + 0.3 * b).collect());
        let base = si_sdr(&r, &e).unwrap();
        let scaled = si_sdr(&r, &e.scaled(gain)).unwrap();
        prop_assert!((base - scaled).abs() < 1e-9);
    }
}
