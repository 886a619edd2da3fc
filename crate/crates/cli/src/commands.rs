use std::path::{Path, PathBuf};

use paec::dsp::Waveform;
use paec::metrics::{self, EvalReport, Enhancer, Passthrough, Silence};
use paec::model::{checkpoint, Conditioning, Gtcnn, Selection};
use paec::scene::{self, SceneSpec, SourceCache, SourcePool};
use paec::selftest as checks;
use paec::speaker::{EmbeddingCache, EmbeddingProvider, Registry, StatsExtractor};
use paec::train::{self, Conditioner, ModelEnhancer};
use paec::voice::{write_synthetic_pool, PoolSize};
use paec::wav::{read_wav, write_wav, WavEncoding};

use crate::args::{Baseline, EvaluateArgs, InferArgs, SelftestArgs, SimulateArgs, TrainArgs};
use crate::settings::Settings;
use crate::Failure;

type Outcome = Result<(), Failure>;

/// Largest magnitude accepted from the network before clipping.
const PRE_CLIP_LIMIT: f64 = 4.0;

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "+inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.2}")
    }
}

pub fn simulate(s: &Settings, a: SimulateArgs) -> Outcome {
    s.ensure_out_dir()?;
    let pool_dir = a.pool.clone().unwrap_or_else(|| s.out_dir.join("pool"));
    if a.synth_pool {
        let size = PoolSize {
            speakers: a.pool_speakers,
            ..PoolSize::default()
        };
        let made = write_synthetic_pool(&pool_dir, size, s.seed)?;
        println!("synthetic pool: {} ({} speakers)", made.root.display(), made.speakers.len());
    }
    let pool = SourcePool::open(&pool_dir)?;
    if pool.speaker_count() < 3 {
        return Err(Failure::Invalid(format!(
            "pool {} has {} speakers, at least 3 are needed",
            pool_dir.display(),
            pool.speaker_count()
        )));
    }
    let manifest = s.out_dir.join(&a.manifest);
    let duration = s.duration_s(a.duration_s);
    let scenes = scene::build_manifest(&manifest, a.count, a.scenario.into(), &pool, s.seed, duration, a.talk.into())?;
    println!("manifest: {} ({} scenes)", manifest.display(), scenes.len());

    let wav_dir = s.out_dir.join("wavs");
    if !a.no_wavs && !scenes.is_empty() {
        std::fs::create_dir_all(&wav_dir).map_err(|e| Failure::Usage(format!("{}: {e}", wav_dir.display())))?;
    }
    let mut cache = SourceCache::new();
    for spec in &scenes {
        let rec = scene::render_scene(spec, &mut cache)?;
        if !a.no_wavs {
            scene::write_scene_wavs(&rec, &wav_dir)?;
        }
        println!(
            "{}  {:<5}  sir {:>7}  ser {:>7}  snr {:>7}  rt60 {:.2}s  delay {:.0}ms",
            spec.scene_id,
            spec.talk.label(),
            fmt_db(rec.achieved.sir),
            fmt_db(rec.achieved.ser),
            fmt_db(rec.achieved.snr),
            spec.room.rt60,
            spec.echo_delay_ms
        );
    }
    Ok(())
}

fn provider(min_enroll_s: f64) -> Box<dyn EmbeddingProvider> {
    let mut p = StatsExtractor::new();
    p.min_duration_s = min_enroll_s;
    Box::new(p)
}

fn conditioner(
    selection: Selection,
    registry: Option<&Path>,
    cache: Option<&Path>,
    min_enroll_s: f64,
) -> Result<Conditioner, Failure> {
    if selection.is_personalized() && registry.is_none() {
        return Err(Failure::Usage(format!("mode {selection} needs --registry")));
    }
    let registry = match (selection.is_personalized(), registry) {
        (true, Some(p)) => Some(Registry::load(p)?),
        _ => None,
    };
    let cache = match cache {
        Some(p) => EmbeddingCache::open(p)?,
        None => EmbeddingCache::in_memory(),
    };
    Ok(Conditioner::new(selection, registry, cache)?.with_provider(provider(min_enroll_s)))
}

fn write_json(path: &Path, text: &str) -> Outcome {
    std::fs::write(path, text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

pub fn train(s: &Settings, a: TrainArgs) -> Outcome {
    let selection: Selection = a.mode.into();
    let mut cond = conditioner(
        selection,
        a.registry.as_deref(),
        a.embedding_cache.as_deref(),
        s.min_enroll_s(a.min_enroll_s),
    )?;
    let mut cfg = s.train_config(selection);
    if let Some(v) = a.epochs {
        cfg.max_epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.segment_s {
        cfg.segment_s = v;
    }
    cfg.shuffle |= a.shuffle;
    cfg.validate()?;

    let scenes = scene::read_manifest(&a.train_manifest)?;
    if scenes.is_empty() {
        return Err(Failure::Usage(format!("{} has no scenes", a.train_manifest.display())));
    }
    cfg.scenario = scenes
        .iter()
        .all(|sc| sc.scenario == scenes[0].scenario)
        .then_some(scenes[0].scenario);
    let (train_scenes, val_scenes) = match &a.val_manifest {
        Some(p) => (scenes, scene::read_manifest(p)?),
        None => train::split_validation(scenes, cfg.val_fraction, cfg.seed),
    };
    s.ensure_out_dir()?;
    let mut sources = SourceCache::new();
    let train_set = train::prepare_examples(&train_scenes, &mut sources, &mut cond, cfg.segment_s)?;
    let val_set = train::prepare_examples(&val_scenes, &mut sources, &mut cond, cfg.segment_s)?;
    cond.flush()?;

    let mut model = Gtcnn::<f32>::new(cfg.model.clone())?;
    let params = model.count_params().total;
    println!(
        "training {} ({params} parameters) on {} segments, validating on {}",
        selection,
        train_set.len(),
        val_set.len()
    );
    let record = train::train(&mut model, &train_set, &val_set, &cfg, Some(&s.out_dir), &mut |e| {
        eprintln!(
            "epoch {:>4}  train {:.6}  val {:.6}  lr {:e}  {:.1}s{}",
            e.epoch,
            e.train_loss,
            e.val_loss,
            e.lr,
            e.wall_s,
            if e.improved { "  *" } else { "" }
        );
    })?;
    let run_path = s.out_dir.join("run.json");
    write_json(&run_path, &(serde_json::to_string_pretty(&record).map_err(paec::Error::from)? + "\n"))?;
    println!(
        "initial loss {:.6}, final loss {:.6}, best epoch {}",
        record.initial_train_loss,
        record.final_train_loss().unwrap_or(f64::NAN),
        record.best_epoch.map_or("-".into(), |e| e.to_string())
    );
    if let Some(p) = &record.checkpoint {
        println!("checkpoint: {}", p.display());
    }
    println!("run record: {}", run_path.display());
    Ok(())
}

fn read_enrollment(path: &Path, min_s: f64) -> Result<Vec<f64>, Failure> {
    let w = read_wav(path)?;
    Ok(provider(min_s).extract(&w)?)
}

pub fn infer(s: &Settings, a: InferArgs) -> Outcome {
    let model = checkpoint::load(&a.ckpt)?;
    let mode = model.config.selection;
    let min_s = s.min_enroll_s(a.min_enroll_s);
    let mut cond = Conditioning::none();
    for (flag, path, used) in [
        ("--enroll-near", &a.enroll_near, mode.uses_near()),
        ("--enroll-far", &a.enroll_far, mode.uses_far()),
    ] {
        match (path, used) {
            (Some(p), true) => {
                let v = read_enrollment(p, min_s)?;
                if flag == "--enroll-near" {
                    cond.near = Some(v);
                } else {
                    cond.far = Some(v);
                }
            }
            (None, true) => return Err(Failure::Usage(format!("checkpoint mode {mode} needs {flag}"))),
            (Some(_), false) => eprintln!("warning: checkpoint mode {mode} ignores {flag}"),
            (None, false) => {}
        }
    }
    let y = read_wav(&a.input)?;
    let x = read_wav(&a.reference)?;
    let out = model.enhance(&y, &x, &cond)?;
    if !out.is_finite() {
        return Err(Failure::Invalid("enhanced signal contains non-finite samples".into()));
    }
    let peak = out.samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > PRE_CLIP_LIMIT {
        return Err(Failure::Invalid(format!("enhanced signal peaks at {peak:.2}, above {PRE_CLIP_LIMIT}")));
    }
    let clipped = out.samples.iter().filter(|v| v.abs() > 1.0).count();
    let out = Waveform::new(out.samples.iter().map(|v| v.clamp(-1.0, 1.0)).collect());
    let path = match a.out {
        Some(p) => p,
        None => {
            s.ensure_out_dir()?;
            s.out_dir.join("enhanced.wav")
        }
    };
    write_wav(&path, &out, WavEncoding::Float32)?;
    println!(
        "wrote {} ({} samples, clipped fraction {:.6})",
        path.display(),
        out.len(),
        clipped as f64 / out.len().max(1) as f64
    );
    if let Some(c) = &a.clean {
        let clean = read_wav(c)?.fit_to(y.len());
        println!("erle {} dB", fmt_db(metrics::erle(&y, &out)?));
        if clean.energy() > 0.0 {
            println!(
                "si-sdr input {} dB, output {} dB",
                fmt_db(metrics::si_sdr(&clean, &y)?),
                fmt_db(metrics::si_sdr(&clean, &out)?)
            );
        }
    }
    Ok(())
}

fn print_summary(report: &EvalReport) {
    println!("{:<6} {:>6} {:>10} {:>10} {:>10} {:>8}", "talk", "scenes", "erle", "si-sdr", "si-sdri", "lsd");
    for (talk, c) in &report.summary {
        let m = |s: &Option<metrics::Summary>| s.map_or("-".to_string(), |s| fmt_db(s.mean));
        println!(
            "{:<6} {:>6} {:>10} {:>10} {:>10} {:>8}",
            talk,
            c.scenes,
            m(&c.erle),
            m(&c.si_sdr),
            m(&c.si_sdr_improvement),
            m(&c.lsd)
        );
    }
}

pub fn evaluate(s: &Settings, a: EvaluateArgs) -> Outcome {
    let scenes: Vec<SceneSpec> = scene::read_manifest(&a.test_manifest)?;
    let (mut enhancer, name): (Box<dyn Enhancer>, String) = match (a.baseline, &a.ckpt) {
        (Some(Baseline::Input), _) => (Box::new(Passthrough), "baseline:input".into()),
        (Some(Baseline::Zero), _) => (Box::new(Silence), "baseline:zero".into()),
        (None, Some(p)) => {
            let model = checkpoint::load(p)?;
            let mode = model.config.selection;
            let cond = conditioner(
                mode,
                a.registry.as_deref(),
                a.embedding_cache.as_deref(),
                s.min_enroll_s(a.min_enroll_s),
            )?;
            let name = format!("{} ({mode})", p.file_name().map_or(PathBuf::new(), PathBuf::from).display());
            (Box::new(ModelEnhancer::new(model, cond)?), name)
        }
        (None, None) => return Err(Failure::Usage("give --ckpt or --baseline".into())),
    };
    let mut sources = SourceCache::new();
    let report = metrics::evaluate_testset(&scenes, enhancer.as_mut(), &mut sources, &name)?;
    s.ensure_out_dir()?;
    let path = s.out_dir.join(&a.report);
    write_json(&path, &report.to_json()?)?;
    print_summary(&report);
    println!("report: {}", path.display());
    Ok(())
}

pub fn selftest(a: SelftestArgs) -> Outcome {
    let mut failed = 0;
    for r in checks::run(a.quick) {
        println!(
            "{} {:<22} {:>7.2}s  {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.seconds,
            r.detail
        );
        failed += usize::from(!r.passed);
    }
    if let Some(p) = &a.ckpt {
        match checks::verify_checkpoint(p) {
            Ok(msg) => println!("PASS {:<22} {msg}", "checkpoint-file"),
            Err(e) => {
                println!("FAIL {:<22} {e}", "checkpoint-file");
                failed += 1;
            }
        }
    }
    if failed > 0 {
        return Err(Failure::Invalid(format!("{failed} check(s) failed")));
    }
    println!("all checks passed");
    Ok(())
}
