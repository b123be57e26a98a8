use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use ndtensor::Tensor;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use stmotion::evalmetrics::{
    evaluate, horizon_frames, longterm_eval, write_longterm_csv, zero_velocity, MetricRow,
};
use stmotion::model::{
    bench_grid, default_bench_grid, dump_attention, predict_workspace, AttentionMaps, BenchConfig, BenchStatus,
    Model, ModelError, Variant,
};
use stmotion::motiondata::{
    synth_motion, synthetic_corpus, write_fk_csv, JointMotion, MotionSequence, Skeleton, SYNTH_NOISE_STD,
};
use stmotion::training::{write_history_csv, TrainError, ValidationSet};

use crate::config::{self, Settings, MODEL_KEYS, TRAIN_KEYS};
use crate::{BenchArgs, CliError, EvalArgs, RolloutArgs, SynthArgs, TrainArgs};

type Result<T> = std::result::Result<T, CliError>;

fn usage<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Usage(e.to_string())
}

fn model_error(e: ModelError) -> CliError {
    match e {
        ModelError::NonFinite { .. } | ModelError::Projection(_) => CliError::Numeric(e.to_string()),
        other => usage(other),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", path.display())))
}

fn write_out(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let mut w = create(path)?;
    f(&mut w).and_then(|_| w.flush()).map_err(|e| CliError::Usage(format!("writing {}: {e}", path.display())))
}

fn load_motion(path: &Path) -> Result<MotionSequence> {
    MotionSequence::load(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn load_checkpoint(path: &Path) -> Result<Model> {
    Model::load(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

/// Loads motion files that must share one skeleton and frame rate.
fn load_motions(paths: &[impl AsRef<Path>]) -> Result<Vec<MotionSequence>> {
    let seqs = paths.iter().map(|p| load_motion(p.as_ref())).collect::<Result<Vec<_>>>()?;
    if let Some(first) = seqs.first() {
        for (s, p) in seqs.iter().zip(paths) {
            if s.skeleton() != first.skeleton() || s.fps() != first.fps() {
                return Err(CliError::Usage(format!(
                    "{} does not share the skeleton and frame rate of the first file",
                    p.as_ref().display()
                )));
            }
        }
    }
    Ok(seqs)
}

fn check_joints(model: &Model, skeleton: &Skeleton) -> Result<()> {
    if model.config.joints != skeleton.joint_count() {
        return Err(CliError::Usage(format!(
            "checkpoint expects {} joints, data has {}",
            model.config.joints,
            skeleton.joint_count()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// synth

#[derive(Deserialize)]
struct SkeletonFile {
    names: Vec<String>,
    parents: Vec<i32>,
    offsets: Vec<[f64; 3]>,
    mirror: Vec<usize>,
}

#[derive(Deserialize)]
struct MotionFileEntry {
    axis: [f64; 3],
    amplitude: f64,
    frequency: f64,
    #[serde(default)]
    phase: f64,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text =
        std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn skeleton_from_arg(arg: &str) -> Result<Skeleton> {
    if arg == "default" {
        return Ok(Skeleton::desk());
    }
    let f: SkeletonFile = read_json(Path::new(arg))?;
    Skeleton::new(f.names, f.parents, f.offsets, f.mirror).map_err(usage)
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let skeleton = Arc::new(skeleton_from_arg(&a.skeleton)?);
    let seq = match &a.spec {
        Some(path) => {
            let entries: Vec<MotionFileEntry> = read_json(path)?;
            let spec: Vec<JointMotion> = entries
                .into_iter()
                .map(|e| JointMotion { axis: e.axis, amplitude: e.amplitude, frequency: e.frequency, phase: e.phase })
                .collect();
            let noise = a.noise.unwrap_or(SYNTH_NOISE_STD);
            synth_motion(skeleton, a.frames, a.fps, &spec, noise, &mut ChaCha8Rng::seed_from_u64(a.seed))
        }
        None => {
            if a.noise.is_some() {
                return Err(CliError::Usage("--noise applies only with --spec".into()));
            }
            synthetic_corpus(skeleton, 1, a.frames, a.fps, a.seed).map(|mut v| v.remove(0))
        }
    }
    .map_err(usage)?;
    seq.save(&a.out).map_err(|e| CliError::Usage(format!("{}: {e}", a.out.display())))?;
    if let Some(path) = &a.fk_csv {
        write_out(path, |w| write_fk_csv(w, &seq).map_err(std::io::Error::other))?;
    }
    println!("{}: {} frames, {} joints, {} fps", a.out.display(), seq.len(), seq.joint_count(), seq.fps());
    Ok(())
}

// ---------------------------------------------------------------------------
// train

/// Splits every sequence in time; the last `fraction` of frames validates.
fn split_tail(seqs: &[MotionSequence], fraction: f64) -> Result<(Vec<MotionSequence>, Vec<MotionSequence>)> {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for s in seqs {
        let cut = ((s.len() as f64) * (1.0 - fraction)).floor() as usize;
        if cut == 0 || cut == s.len() {
            return Err(CliError::Usage(format!("a {}-frame sequence is too short to split", s.len())));
        }
        train.push(s.slice(0, cut).map_err(usage)?);
        val.push(s.slice(cut, s.len() - cut).map_err(usage)?);
    }
    Ok((train, val))
}

fn train_settings(a: &TrainArgs) -> Result<Settings> {
    let keys: Vec<&str> = MODEL_KEYS.iter().chain(TRAIN_KEYS).copied().collect();
    let mut s = match &a.config {
        Some(p) => Settings::load(p, &keys)?,
        None => Settings::default(),
    };
    s.apply_overrides(&a.overrides, &keys)?;
    let flags = [
        ("variant", a.variant.clone()),
        ("tau", a.tau.clone()),
        ("sharing", a.sharing.clone()),
        ("max_steps", a.steps.map(|v| v.to_string())),
        ("seed", a.seed.map(|v| v.to_string())),
        ("memory_budget", a.memory_budget.map(|v| v.to_string())),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            s.set(k, &v, &keys)?;
        }
    }
    Ok(s)
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let settings = train_settings(a)?;
    let data = load_motions(&a.data)?;
    let skeleton = data[0].skeleton().clone();
    let (train_set, val_set) = if a.val_data.is_empty() {
        split_tail(&data, config::val_fraction(&settings)?)?
    } else {
        let val = load_motions(&a.val_data)?;
        if val[0].skeleton() != &skeleton {
            return Err(CliError::Usage("validation data uses a different skeleton".into()));
        }
        (data, val)
    };
    let model_config = config::model_config(&settings, skeleton.joint_count())?;
    let train_config = config::train_config(&settings)?;
    let budget = config::memory_budget(&settings)?;
    let need = predict_workspace(&model_config, model_config.window, train_config.batch_size).map_err(model_error)?;
    if need > budget as u64 {
        return Err(CliError::Usage(format!(
            "{} with window {} and batch {} needs {need} workspace elements, above the budget of {budget}; \
             reduce window, batch_size or layers",
            config::variant_name(model_config.variant),
            model_config.window,
            train_config.batch_size
        )));
    }
    std::fs::create_dir_all(&a.out_dir)
        .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", a.out_dir.display())))?;
    write_out(&a.out_dir.join("config.txt"), |w| w.write_all(settings.render().as_bytes()))?;

    let mut rng = ChaCha8Rng::seed_from_u64(train_config.seed);
    let model = Model::init(model_config, &mut rng).map_err(model_error)?;
    log::info!(
        "training {} ({} parameters) for up to {} steps",
        config::variant_name(model.config.variant),
        model.parameter_count(),
        train_config.max_steps
    );
    let history_path = a.out_dir.join("history.csv");
    match stmotion::training::train(model, &train_set, &val_set, &train_config) {
        Ok(out) => {
            write_out(&history_path, |w| write_history_csv(w, &out.history).map_err(std::io::Error::other))?;
            let save = |m: &Model, name: &str| {
                let p = a.out_dir.join(name);
                m.save(&p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))
            };
            save(&out.best, "best.ckpt")?;
            save(&out.last, "final.ckpt")?;
            let last = out.history.last().map_or(0, |r| r.step);
            println!(
                "trained {last} steps{}; best validation at step {}; wrote {}",
                if out.stopped_early { " (stopped early)" } else { "" },
                out.best_step,
                a.out_dir.display()
            );
            Ok(())
        }
        Err(TrainError::NonFinite { step, last_good, history }) => {
            write_out(&history_path, |w| write_history_csv(w, &history).map_err(std::io::Error::other))?;
            let p = a.out_dir.join("last_good.ckpt");
            last_good.save(&p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            Err(CliError::Numeric(format!(
                "non-finite loss or gradient at step {step}; parameters before it saved to {}",
                p.display()
            )))
        }
        Err(TrainError::Model(e)) => Err(model_error(e)),
        Err(e) => Err(usage(e)),
    }
}

// ---------------------------------------------------------------------------
// eval

fn write_side_by_side<W: Write>(mut w: W, model: &[MetricRow], baseline: &[MetricRow]) -> std::io::Result<()> {
    writeln!(
        w,
        "horizon_ms,euler,geodesic,positional_mm,pck_auc,zv_euler,zv_geodesic,zv_positional_mm,zv_pck_auc"
    )?;
    for (m, z) in model.iter().zip(baseline) {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            m.horizon_ms, m.euler, m.geodesic, m.positional_mm, m.pck_auc, z.euler, z.geodesic, z.positional_mm, z.pck_auc
        )?;
    }
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let data = load_motions(&a.data)?;
    let skeleton = data[0].skeleton().clone();
    check_joints(&model, &skeleton)?;
    let fps = data[0].fps();
    if a.horizons.is_empty() || a.horizons.contains(&0) {
        return Err(CliError::Usage("horizons must be positive milliseconds".into()));
    }
    let longest = a.horizons.iter().map(|&ms| horizon_frames(ms, fps)).max().unwrap_or(1);
    let window = model.config.window;
    let set = ValidationSet::build(&data, window, longest, a.windows).map_err(usage)?;
    let pred = if a.self_check {
        set.targets.clone()
    } else {
        stmotion::model::rollout(&model, &set.seeds, longest, None).map_err(model_error)?
    };
    let baseline = zero_velocity(&set.seeds, longest).map_err(usage)?;
    let rows = evaluate(&pred, &set.targets, &skeleton, &a.horizons, fps).map_err(usage)?;
    let zv_rows = evaluate(&baseline, &set.targets, &skeleton, &a.horizons, fps).map_err(usage)?;
    write_out(&a.out, |w| write_side_by_side(w, &rows, &zv_rows))?;
    for (m, z) in rows.iter().zip(&zv_rows) {
        println!(
            "{:>5} ms  geodesic {:.5} (zero velocity {:.5})  euler {:.5} ({:.5})",
            m.horizon_ms, m.geodesic, z.geodesic, m.euler, z.euler
        );
    }
    if let (Some(seconds), Some(path)) = (a.longterm_seconds, &a.longterm_out) {
        let frames_per_second = fps.round() as usize;
        let steps = seconds * frames_per_second;
        if steps == 0 {
            return Err(CliError::Usage("--longterm-seconds must be positive".into()));
        }
        let frame = set.seeds.numel() / set.seeds.shape()[0];
        let first = Tensor::new(
            vec![1, window, skeleton.joint_count(), 9],
            set.seeds.data()[..frame].to_vec(),
        )
        .map_err(usage)?;
        let poses = stmotion::model::rollout(&model, &first, steps, None).map_err(model_error)?;
        let seq = MotionSequence::new(skeleton.clone(), fps, poses.into_data()).map_err(usage)?;
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        let points = longterm_eval(&seq, &data, 1000, &mut rng).map_err(usage)?;
        write_out(path, |w| write_longterm_csv(w, &points).map_err(std::io::Error::other))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// rollout

pub fn rollout(a: &RolloutArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let seed = load_motion(&a.seed_file)?;
    check_joints(&model, seed.skeleton())?;
    if seed.len() > model.config.window {
        return Err(CliError::Usage(format!(
            "seed has {} frames, the model window is {}",
            seed.len(),
            model.config.window
        )));
    }
    let steps = (a.seconds * seed.fps() as f64).round();
    if !(steps >= 1.0) {
        return Err(CliError::Usage("--seconds must cover at least one frame".into()));
    }
    let steps = steps as usize;
    let n = seed.joint_count();
    let input = Tensor::new(vec![1, seed.len(), n, 9], seed.data().to_vec()).map_err(usage)?;

    let mut attention = a.dump_attention.as_deref().map(create).transpose()?;
    let mut io_error = None;
    if let Some(w) = attention.as_mut() {
        if let Err(e) = writeln!(w, "step,layer,head,kind,row,col,weight") {
            io_error = Some(e);
        }
    }
    let mut record = |step: usize, maps: &AttentionMaps| {
        let Some(w) = attention.as_mut() else { return };
        if io_error.is_some() {
            return;
        }
        let mut rows = Vec::new();
        let res = dump_attention(&mut rows, maps, false).and_then(|_| {
            for line in rows.split(|&b| b == b'\n').filter(|l| !l.is_empty()) {
                write!(w, "{step},")?;
                w.write_all(line)?;
                w.write_all(b"\n")?;
            }
            Ok(())
        });
        if let Err(e) = res {
            io_error = Some(e);
        }
    };
    let callback: Option<&mut dyn FnMut(usize, &AttentionMaps)> =
        if a.dump_attention.is_some() { Some(&mut record) } else { None };
    let poses = stmotion::model::rollout(&model, &input, steps, callback).map_err(model_error)?;
    if let Some(mut w) = attention {
        if let Some(e) = io_error.take().or_else(|| w.flush().err()) {
            return Err(CliError::Usage(format!("writing attention: {e}")));
        }
    }
    let out = MotionSequence::new(seed.skeleton().clone(), seed.fps(), poses.into_data())
        .map_err(|e| CliError::Numeric(format!("rollout left SO(3): {e}")))?;
    out.save(&a.out).map_err(|e| CliError::Usage(format!("{}: {e}", a.out.display())))?;
    println!("{}: {} predicted frames at {} fps", a.out.display(), out.len(), out.fps());
    Ok(())
}

// ---------------------------------------------------------------------------
// bench

fn parse_triple(s: &str) -> Result<BenchConfig> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| CliError::Usage(format!("grid entry `{s}` is not L,W,B"))))
        .collect::<Result<_>>()?;
    match parts[..] {
        [layers, window, batch] if layers > 0 && window > 0 && batch > 0 => Ok(BenchConfig { layers, window, batch }),
        _ => Err(CliError::Usage(format!("grid entry `{s}` needs three positive integers L,W,B"))),
    }
}

pub fn bench(a: &BenchArgs) -> Result<()> {
    let mut s = match &a.config {
        Some(p) => Settings::load(p, MODEL_KEYS)?,
        None => Settings::default(),
    };
    s.apply_overrides(&a.overrides, MODEL_KEYS)?;
    let base = config::model_config(&s, a.joints)?;
    let variants: Vec<Variant> = if a.variant.is_empty() {
        vec![Variant::St, Variant::Full2d]
    } else {
        a.variant.iter().map(|v| config::parse_variant(v)).collect::<Result<_>>()?
    };
    let grid = if a.grid.is_empty() {
        default_bench_grid()
    } else {
        a.grid.iter().map(|g| parse_triple(g)).collect::<Result<_>>()?
    };
    let budget = a.memory_budget.unwrap_or(config::DEFAULT_MEMORY_BUDGET);
    let rows = bench_grid(&base, &variants, &grid, budget, !a.no_time).map_err(model_error)?;
    write_out(&a.out, |w| {
        writeln!(w, "variant,layers,window,batch,scores_per_token,scores_per_layer,peak_workspace,seconds_per_step,status")?;
        for r in &rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                config::variant_name(r.variant),
                r.config.layers,
                r.config.window,
                r.config.batch,
                r.scores_per_token,
                r.scores_per_layer,
                r.peak_workspace,
                r.seconds_per_step.map(|t| t.to_string()).unwrap_or_default(),
                match r.status {
                    BenchStatus::Ok => "ok",
                    BenchStatus::OutOfMemory => "oom",
                }
            )?;
        }
        Ok(())
    })?;
    for r in &rows {
        println!(
            "{:<10} L{} W{} B{}: {} scores/token, peak {} elements{}",
            config::variant_name(r.variant),
            r.config.layers,
            r.config.window,
            r.config.batch,
            r.scores_per_token,
            r.peak_workspace,
            if r.status == BenchStatus::OutOfMemory { " (over budget)" } else { "" }
        );
    }
    Ok(())
}
