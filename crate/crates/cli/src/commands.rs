use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use serde_json::{json, Value};
use wmlab_core::backbone::{Command, Model};
use wmlab_core::checkpoint::load_checkpoint;
use wmlab_core::metrics::{evaluate, MetricConfig, ReferenceStats, Video};
use wmlab_core::noise::NoiseStream;
use wmlab_core::rollout::{rollout_model, RolloutCondition};
use wmlab_core::stcm::memory_len;
use wmlab_core::toyroad::{generate_dataset, read_clip, tokenize, write_clip, ClipRecord, Dataset};
use wmlab_core::trainer::{default_schedule, final_checkpoint, moving_average, run_curriculum, LogEvent, RunOutput};
use wmlab_core::Error;

use crate::config::RunConfig;
use crate::UsageError;

/// Metric names `eval --metrics` accepts.
pub const METRIC_NAMES: [&str; 6] = [
    "fid_proxy",
    "fvd_proxy",
    "mawe",
    "warp_error",
    "flow_score",
    "background_consistency",
];

pub const RUN_FILE: &str = "run.json";
pub const REPORT_FILE: &str = "report.json";
pub const CURVES_FILE: &str = "curves.csv";

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn create_dir(path: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn datagen(a: &crate::DatagenArgs) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    let d = &mut cfg.data;
    if let Some(v) = a.clips {
        d.clips = v as usize;
    }
    if let Some(v) = a.frames {
        d.frames = v as usize;
    }
    if let Some(v) = a.height {
        d.height = v as usize;
    }
    if let Some(v) = a.width {
        d.width = v as usize;
    }
    if let Some(v) = a.fps {
        d.fps = v;
    }
    if let Some(v) = a.seed {
        d.seed = v;
    }
    if d.clips == 0 || d.frames == 0 || d.height == 0 || d.width == 0 || d.fps == 0 {
        return Err(UsageError(format!("dataset dimensions must be positive: {d:?}")).into());
    }
    let d = cfg.data.clone();
    let mut manifest = generate_dataset(&a.out, d.clips, d.height, d.width, d.frames, d.fps, d.seed)
        .with_context(|| format!("generating dataset in {}", a.out.display()))?;
    manifest.config_hash = Some(cfg.hash());
    manifest.write(&a.out)?;
    println!("wrote {} clips of {}x{}x{} to {}", d.clips, d.frames, d.height, d.width, a.out.display());
    Ok(())
}

pub fn train(a: &crate::TrainArgs) -> anyhow::Result<()> {
    let cfg = RunConfig::load(a.config.as_deref())?;
    cfg.validate()?;
    let data = Dataset::open(&a.data).with_context(|| format!("opening dataset {}", a.data.display()))?;
    let m = &data.manifest;
    let longest = cfg.train.curriculum.iter().copied().max().unwrap_or(0);
    if m.frames < longest {
        return Err(Error::Data(format!("dataset clips have {} frames, the curriculum needs {longest}", m.frames)).into());
    }
    if m.channels != cfg.model.channels {
        return Err(Error::Data(format!("dataset has {} channels, the model expects {}", m.channels, cfg.model.channels)).into());
    }
    for &alpha in &cfg.train.alpha_set {
        let (h, w) = (m.height * alpha, m.width * alpha);
        if h % cfg.model.patch != 0 || w % cfg.model.patch != 0 {
            return Err(Error::Data(format!(
                "{h}x{w} frames at alpha {alpha} do not tile into {}-pixel patches",
                cfg.model.patch
            ))
            .into());
        }
    }
    create_dir(&a.out)?;
    let hash = cfg.hash();
    write_json(
        &a.out.join(RUN_FILE),
        &json!({ "config_hash": hash, "data": a.data, "config": cfg }),
    )?;
    let mut model = Model::<f32>::new(cfg.model.clone(), cfg.train.seed)?;
    let total = cfg.train.total_steps();
    let out = RunOutput {
        dir: a.out.clone(),
        config_hash: hash,
    };
    let summary = run_curriculum(&mut model, &data, &cfg.train, Some(&out), &mut |e, _| match e {
        LogEvent::Step { step, phase, loss, seconds, .. } if (step + 1) % 10 == 0 || step + 1 == total => {
            eprintln!("step {:>5}/{total} phase {phase} loss {loss:.5} ({seconds:.0}s)", step + 1);
        }
        LogEvent::PhaseEnd { phase, checkpoint: Some(c), .. } => eprintln!("phase {phase} done: {c}"),
        _ => {}
    })?;
    let n = summary.losses.len();
    if n > 0 {
        println!(
            "trained {n} steps in {:.0}s; loss moving average {:.5} -> {:.5}",
            summary.seconds,
            moving_average(&summary.losses, 9.min(n - 1), 10),
            moving_average(&summary.losses, n - 1, 10)
        );
    }
    println!("final checkpoint {}", final_checkpoint(&a.out, &cfg.train).display());
    Ok(())
}

pub fn rollout(a: &crate::RolloutArgs) -> anyhow::Result<()> {
    let cfg = RunConfig::load(a.config.as_deref())?;
    cfg.validate()?;
    let (model, meta) = load_checkpoint::<f32>(&a.ckpt).with_context(|| format!("loading {}", a.ckpt.display()))?;
    let memory = memory_len(1, meta.memory_span)?;
    let window = meta.frames;
    let shape = [meta.model.channels, meta.height, meta.width];

    let cond = if a.cond == "none" {
        if a.cond_offset.is_some() {
            return Err(UsageError("--cond-offset needs a condition clip".into()).into());
        }
        None
    } else {
        let rec = read_clip(&a.cond).with_context(|| format!("reading condition {}", a.cond))?;
        if [rec.channels, rec.height, rec.width] != shape {
            return Err(Error::Data(format!(
                "condition frames are {}x{}x{}, the checkpoint generates {}x{}x{}",
                rec.channels, rec.height, rec.width, shape[0], shape[1], shape[2]
            ))
            .into());
        }
        let (start, take) = match a.cond_offset {
            Some(o) if o + memory <= rec.len => (o, memory),
            Some(o) => {
                return Err(Error::Contract(format!(
                    "condition has {} frames, cannot take {memory} memory frames from frame {o}",
                    rec.len
                ))
                .into())
            }
            None if rec.len == memory => (0, memory),
            None => {
                return Err(Error::Contract(format!(
                    "condition has {} frames, the rollout memory is {memory}; pass --cond-offset to take a slice",
                    rec.len
                ))
                .into())
            }
        };
        Some((rec, start, take))
    };

    let caption = match (&a.caption, &cond) {
        (Some(c), _) => c.clone(),
        (None, Some((rec, ..))) => rec.caption.clone(),
        (None, None) => "front camera.".to_owned(),
    };
    let text_tokens = tokenize(&caption)?;
    let mut commands: Vec<Command> = match &cond {
        Some((rec, start, take)) => rec.commands[*start..start + take].to_vec(),
        None => Vec::new(),
    };
    let drive = match (a.command, commands.last()) {
        (Some(c), _) => c.into(),
        (None, Some(&c)) => c,
        (None, None) => Command::Straight,
    };
    commands.push(drive);
    let rc = RolloutCondition {
        text_tokens,
        commands,
        fps: meta.fps,
    };
    let cond_clip = match &cond {
        Some((rec, start, take)) => Some(rec.to_clip::<f32>()?.range(*start, *take)?),
        None => None,
    };
    let schedule = default_schedule(meta.model.t_max)?;
    let clip = rollout_model(
        &model,
        cond_clip.as_ref(),
        shape,
        memory,
        window,
        a.iters as usize,
        &rc,
        &schedule,
        &cfg.rollout.sampler(),
        &NoiseStream::new(a.seed),
    )?;
    let record = ClipRecord::from_clip(&clip, caption, rc.commands_at(0, clip.len()))?;
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_clip(&record, &a.out)?;
    let mut side = a.out.as_os_str().to_owned();
    side.push(".json");
    write_json(
        &PathBuf::from(side),
        &json!({
            "config_hash": cfg.hash(),
            "checkpoint": a.ckpt,
            "checkpoint_config_hash": meta.config_hash,
            "seed": a.seed,
            "iterations": a.iters,
            "memory": memory,
            "window": window,
            "frames": record.len,
            "text_only": cond.is_none(),
        }),
    )?;
    println!(
        "wrote {} frames ({:.1}s at {} fps) to {}",
        record.len,
        clip.duration_seconds(),
        record.fps,
        a.out.display()
    );
    Ok(())
}

/// `.toyr` files at `path`: the file itself, or every one in the directory
/// in name order.
pub fn load_videos(path: &Path) -> anyhow::Result<Vec<(String, Video)>> {
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut v: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "toyr"))
            .collect();
        v.sort();
        v
    } else {
        vec![path.to_path_buf()]
    };
    if files.is_empty() {
        return Err(Error::Data(format!("no .toyr clips in {}", path.display())).into());
    }
    files
        .iter()
        .map(|f| {
            let rec = read_clip(f).with_context(|| format!("reading {}", f.display()))?;
            let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((name, Video::from_record(&rec)?))
        })
        .collect()
}

/// Validated metric selection; all metrics when `spec` is absent.
pub fn parse_metrics(spec: Option<&str>) -> anyhow::Result<Vec<&'static str>> {
    let Some(spec) = spec else {
        return Ok(METRIC_NAMES.to_vec());
    };
    let mut out = Vec::new();
    for name in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match METRIC_NAMES.iter().find(|&&m| m == name) {
            Some(&m) if !out.contains(&m) => out.push(m),
            Some(_) => {}
            None => {
                return Err(UsageError(format!(
                    "unknown metric {name:?}; valid names: {}",
                    METRIC_NAMES.join(", ")
                ))
                .into())
            }
        }
    }
    if out.is_empty() {
        return Err(UsageError(format!("no metrics selected; valid names: {}", METRIC_NAMES.join(", "))).into());
    }
    Ok(out)
}

fn drop_unselected(v: &mut Value, keep: &[&str]) {
    if let Value::Object(map) = v {
        map.retain(|k, _| !METRIC_NAMES.contains(&k.as_str()) || keep.contains(&k.as_str()));
    }
}

fn curves_csv(curves: &Value, keep: &[&str]) -> String {
    let cols: Vec<&str> = ["fid_proxy", "fvd_proxy", "mawe", "background_consistency"]
        .into_iter()
        .filter(|c| keep.contains(c))
        .collect();
    let mut s = format!("mark,{}\n", cols.join(","));
    let marks = curves["marks"].as_array().cloned().unwrap_or_default();
    for (i, m) in marks.iter().enumerate() {
        let row: Vec<String> = cols
            .iter()
            .map(|c| match &curves[*c][i] {
                Value::Null => String::new(),
                v => v.to_string(),
            })
            .collect();
        s.push_str(&format!("{m},{}\n", row.join(",")));
    }
    s
}

pub fn eval(a: &crate::EvalArgs) -> anyhow::Result<()> {
    let keep = parse_metrics(a.metrics.as_deref())?;
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(w) = a.window {
        cfg.eval.window = w as usize;
    }
    cfg.eval.validate()?;
    let reference = load_videos(&a.reference)?;
    let generated = load_videos(&a.gen)?;
    let report = evaluate_sets(&generated, &reference, &cfg.eval)?;

    let mut value = serde_json::to_value(&report)?;
    drop_unselected(&mut value["aggregate"], &keep);
    drop_unselected(&mut value["curves"], &keep);
    if let Some(clips) = value["clips"].as_array_mut() {
        clips.iter_mut().for_each(|c| drop_unselected(c, &keep));
    }
    let csv = curves_csv(&value["curves"], &keep);
    let doc = json!({
        "config_hash": cfg.hash(),
        "extractor_checksum": report.extractor_checksum,
        "metrics": keep,
        "generated": a.gen,
        "reference": a.reference,
        "report": value,
    });
    create_dir(&a.out)?;
    write_json(&a.out.join(REPORT_FILE), &doc)?;
    let csv_path = a.out.join(CURVES_FILE);
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    let agg = &doc["report"]["aggregate"];
    for name in &keep {
        println!("{name}: {}", agg.get(*name).map_or("n/a".to_owned(), |v| v.to_string()));
    }
    println!("curve marks: {}", doc["report"]["curves"]["marks"]);
    Ok(())
}

/// Metrics of `generated` against reference statistics fitted on `reference`.
pub fn evaluate_sets(
    generated: &[(String, Video)],
    reference: &[(String, Video)],
    cfg: &MetricConfig,
) -> anyhow::Result<wmlab_core::metrics::EvalReport> {
    let channels = reference[0].1.channels;
    if let Some((name, _)) = generated.iter().chain(reference).find(|(_, v)| v.channels != channels) {
        return Err(Error::Data(format!("{name} does not have {channels} channels like the reference")).into());
    }
    let refs: Vec<Video> = reference.iter().map(|(_, v)| v.clone()).collect();
    let stats = ReferenceStats::from_videos(&refs, &cfg.extractor(channels))?;
    Ok(evaluate(generated, &stats, cfg)?)
}
