use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use objloc_core::geometry::CameraIntrinsics;
use objloc_core::graph::LandmarkId;
use objloc_core::io;
use objloc_core::metrics::SuccessMode;
use objloc_core::pipeline::{
    self, DetectionFrame, EvaluationOptions, FrameResult, MetricsReport, ObjectMap, StampedPose,
};
use objloc_core::simulator::{simulate as run_simulation, SimulatedFrame};
use serde_json::{json, Value};

use crate::config::{RunConfig, TruthSource};

#[derive(Debug)]
pub enum Failure {
    /// Bad arguments, missing files or malformed input.
    Input(String),
    /// A broken internal invariant.
    Internal(String),
    /// Exit immediately with this code (help, version, usage errors).
    Exit(u8),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Input(_) => 1,
            Failure::Internal(_) => 2,
            Failure::Exit(c) => *c,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Input(m) | Failure::Internal(m) => f.write_str(m),
            Failure::Exit(c) => write!(f, "exit {c}"),
        }
    }
}

impl From<objloc_core::Error> for Failure {
    fn from(e: objloc_core::Error) -> Self {
        if e.is_internal() {
            Failure::Internal(e.to_string())
        } else {
            Failure::Input(e.to_string())
        }
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn required(cfg: &RunConfig, explicit: &Option<PathBuf>, name: &str, flag: &str) -> Outcome<PathBuf> {
    cfg.input(explicit, name).ok_or_else(|| {
        Failure::Input(format!("no {name}: pass --{flag} or --dataset"))
    })
}

fn output_dir(cfg: &RunConfig) -> Outcome<PathBuf> {
    let dir = cfg
        .output_dir()
        .ok_or_else(|| Failure::Input("no output directory: pass --output or --dataset".into()))?
        .to_path_buf();
    std::fs::create_dir_all(&dir)
        .map_err(|e| Failure::Input(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn config_json(cfg: &RunConfig) -> Value {
    Value::Object(
        cfg.entries()
            .into_iter()
            .map(|(k, v)| (k.to_string(), Value::String(v)))
            .collect(),
    )
}

/// Records what a command produced and the settings it ran with, plus the
/// resolved settings as a file `--config` accepts. Holds no timestamps, so
/// reruns reproduce both byte for byte.
fn write_manifest(dir: &Path, command: &str, cfg: &RunConfig, outputs: &[&str], extra: Value) -> Outcome {
    let manifest = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cfg.matcher.rng_seed,
        "config": config_json(cfg),
        "outputs": outputs,
        "summary": extra,
    });
    io::write_text(
        &dir.join(format!("manifest-{command}.json")),
        &io::to_pretty_json(&manifest),
    )?;
    io::write_text(&dir.join(format!("config-{command}.conf")), &cfg.to_text())?;
    Ok(())
}

fn detection_frames(frames: &[SimulatedFrame]) -> Vec<DetectionFrame> {
    frames.iter().map(DetectionFrame::from).collect()
}

pub fn simulate(cfg: &RunConfig) -> Outcome {
    let spec = cfg.simulation_spec();
    let data = run_simulation(&spec)?;
    let dir = output_dir(cfg)?;
    let mut all = data.keyframes.clone();
    all.extend(data.queries.iter().cloned());
    let (trajectory, _) = pipeline::simulated_truth(&data);
    let files: [(&str, String); 6] = [
        ("intrinsics.json", io::intrinsics_to_string(&spec.intrinsics)),
        ("keyframes.jsonl", io::detection_log_to_string(&detection_frames(&data.keyframes))),
        ("queries.jsonl", io::detection_log_to_string(&detection_frames(&data.queries))),
        ("groundtruth.txt", io::trajectory_to_string(&trajectory)),
        ("associations.jsonl", io::associations_to_string(&pipeline::frame_associations(&all))),
        ("scene.json", io::scene_to_string(&data.scene)),
    ];
    for (name, text) in &files {
        io::write_text(&dir.join(name), text)?;
    }
    let detections: usize = all.iter().map(|f| f.detections.len()).sum();
    let names: Vec<&str> = files.iter().map(|f| f.0).collect();
    write_manifest(
        &dir,
        "simulate",
        cfg,
        &names,
        json!({
            "landmarks": data.scene.landmarks.len(),
            "keyframes": data.keyframes.len(),
            "queries": data.queries.len(),
            "detections": detections,
        }),
    )?;
    println!(
        "simulated {} landmarks, {} keyframes, {} queries into {}",
        data.scene.landmarks.len(),
        data.keyframes.len(),
        data.queries.len(),
        dir.display()
    );
    Ok(())
}

fn load_map_inputs(cfg: &RunConfig, top_k: usize) -> Outcome<ObjectMap> {
    let keyframes = io::read_detection_log(&required(cfg, &cfg.paths.keyframes, "keyframes.jsonl", "keyframes")?)?;
    let associations = io::read_associations(&required(cfg, &cfg.paths.associations, "associations.jsonl", "associations")?)?;
    let scene = io::read_scene(&required(cfg, &cfg.paths.scene, "scene.json", "scene")?)?;
    Ok(pipeline::build_map(&keyframes, &associations, &scene.landmarks, top_k)?)
}

pub fn build_map(cfg: &RunConfig) -> Outcome {
    let map = load_map_inputs(cfg, cfg.matcher.top_k)?;
    if map.landmarks.is_empty() {
        return Err(Failure::Input("no landmark was observed in any keyframe".into()));
    }
    let dir = output_dir(cfg)?;
    io::write_text(&dir.join("map.json"), &io::map_to_string(&map))?;
    write_manifest(
        &dir,
        "build-map",
        cfg,
        &["map.json"],
        json!({ "landmarks": map.landmarks.len(), "keyframes": map.keyframes.len() }),
    )?;
    println!("map with {} landmarks written to {}", map.landmarks.len(), dir.display());
    Ok(())
}

struct Queries {
    frames: Vec<DetectionFrame>,
    intrinsics: CameraIntrinsics,
}

fn load_queries(cfg: &RunConfig) -> Outcome<Queries> {
    Ok(Queries {
        frames: io::read_detection_log(&required(cfg, &cfg.paths.detections, "queries.jsonl", "detections")?)?,
        intrinsics: io::read_intrinsics(&required(cfg, &cfg.paths.intrinsics, "intrinsics.json", "intrinsics")?)?,
    })
}

fn localize_with(cfg: &RunConfig, map: &ObjectMap, queries: &Queries) -> Outcome<Vec<FrameResult>> {
    let prior = map.graph(&cfg.matcher)?;
    Ok(pipeline::localize_frames(
        &queries.frames,
        &prior,
        &queries.intrinsics,
        &cfg.matcher,
        cfg.depth_scale,
    )?)
}

pub fn localize(cfg: &RunConfig) -> Outcome {
    let map = io::read_map(&required(cfg, &cfg.paths.map, "map.json", "map")?)?;
    let queries = load_queries(cfg)?;
    let results = localize_with(cfg, &map, &queries)?;
    let dir = output_dir(cfg)?;
    io::write_text(&dir.join("results.jsonl"), &io::results_to_string(&results))?;
    let summary = io::ResultsSummary::of(&results);
    write_manifest(&dir, "localize", cfg, &["results.jsonl"], serde_json::to_value(&summary).unwrap_or_default())?;
    println!(
        "localized {}/{} frames, results in {}",
        summary.success,
        summary.frames,
        dir.display()
    );
    Ok(())
}

type Truth = BTreeMap<u64, BTreeMap<usize, LandmarkId>>;

struct GroundTruth {
    trajectory: Vec<StampedPose>,
    truth: Truth,
}

fn load_truth(cfg: &RunConfig, map: Option<&ObjectMap>, queries: Option<&Queries>) -> Outcome<GroundTruth> {
    let trajectory = io::read_trajectory(&required(cfg, &cfg.paths.trajectory, "groundtruth.txt", "groundtruth")?)?;
    let truth = match cfg.truth {
        TruthSource::Associations => {
            let path = required(cfg, &cfg.paths.associations, "associations.jsonl", "associations")?;
            io::associations_by_frame(&io::read_associations(&path)?)
        }
        TruthSource::Projection => {
            let owned_map;
            let map = match map {
                Some(m) => m,
                None => {
                    owned_map = io::read_map(&required(cfg, &cfg.paths.map, "map.json", "map")?)?;
                    &owned_map
                }
            };
            let owned_queries;
            let queries = match queries {
                Some(q) => q,
                None => {
                    owned_queries = load_queries(cfg)?;
                    &owned_queries
                }
            };
            pipeline::projection_truth(
                &queries.frames,
                &trajectory,
                &map.graph(&cfg.matcher)?,
                &queries.intrinsics,
                cfg.matcher.wasserstein_scale,
                cfg.iou_threshold,
            )
        }
    };
    Ok(GroundTruth { trajectory, truth })
}

fn options(cfg: &RunConfig) -> EvaluationOptions {
    EvaluationOptions {
        thresholds: cfg.thresholds.clone(),
        strict_threshold: cfg.strict_threshold,
    }
}

fn headline(report: &MetricsReport, thresholds: &[f64]) -> String {
    let mut line = format!(
        "P {:.4} R {:.4} F1 {:.4}",
        report.precision, report.recall, report.f1
    );
    if let Some(m) = report.mota {
        line += &format!(" MOTA {m:.4}");
    }
    for &t in thresholds {
        if let Some(v) = report.success_rate(SuccessMode::Succ, t) {
            line += &format!(" SR@{t} {v:.4}");
        }
    }
    if let Some(te) = report.te_mean {
        line += &format!(" TE {te:.4}");
    }
    line
}

pub fn evaluate(cfg: &RunConfig) -> Outcome {
    let results = io::read_results(&required(cfg, &cfg.paths.results, "results.jsonl", "results")?)?;
    let gt = load_truth(cfg, None, None)?;
    let report = pipeline::evaluate(&cfg.sequence, &results, &gt.trajectory, &gt.truth, &options(cfg))?;
    let dir = output_dir(cfg)?;
    io::write_text(&dir.join("metrics.json"), &io::report_to_string(&report))?;
    io::write_text(&dir.join("metrics.csv"), &io::report_csv(&report))?;
    write_manifest(&dir, "evaluate", cfg, &["metrics.json", "metrics.csv"], json!({ "frames": report.frames }))?;
    println!("{}", headline(&report, &cfg.thresholds));
    Ok(())
}

/// Parses `KEY=V1,V2,...` specs into their cartesian product of assignments.
fn sweep_variants(specs: &[String]) -> Outcome<Vec<Vec<(String, String)>>> {
    let mut variants: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for spec in specs {
        let (key, values) = spec
            .split_once('=')
            .ok_or_else(|| Failure::Input(format!("--sweep expects KEY=V1,V2,..., got {spec:?}")))?;
        let values: Vec<&str> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
        if values.is_empty() {
            return Err(Failure::Input(format!("--sweep {key}: no values")));
        }
        variants = variants
            .into_iter()
            .flat_map(|base| {
                values.iter().map(move |v| {
                    let mut next = base.clone();
                    next.push((key.trim().to_string(), v.to_string()));
                    next
                })
            })
            .collect();
    }
    Ok(variants)
}

/// Localizes and evaluates every sweep variant. The map is rebuilt from the
/// keyframe log whenever K changes, since label statistics depend on it.
pub fn sweep(cfg: &RunConfig, specs: &[String]) -> Outcome {
    let variants = sweep_variants(specs)?;
    let queries = load_queries(cfg)?;
    let rebuild = variants.iter().flatten().any(|(k, _)| k == "K");
    let fixed_map = if rebuild {
        None
    } else {
        Some(io::read_map(&required(cfg, &cfg.paths.map, "map.json", "map")?)?)
    };
    let mut rows = Vec::new();
    let mut csv = String::new();
    let keys: Vec<&str> = variants[0].iter().map(|(k, _)| k.as_str()).collect();
    csv += &keys.join(",");
    csv += ",frames,success,precision,recall,f1,mota";
    for t in &cfg.thresholds {
        csv += &format!(",sr_succ@{t},sr_all@{t}");
    }
    csv += ",te_mean,entropy_mean\n";
    let cell = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for variant in &variants {
        let mut vc = cfg.clone();
        for (k, v) in variant {
            vc.set(k, v).map_err(Failure::Input)?;
        }
        vc.matcher.validate()?;
        let map = match &fixed_map {
            Some(m) => m.clone(),
            None => load_map_inputs(&vc, vc.matcher.top_k)?,
        };
        let results = localize_with(&vc, &map, &queries)?;
        let gt = load_truth(&vc, Some(&map), Some(&queries))?;
        let report = pipeline::evaluate(&vc.sequence, &results, &gt.trajectory, &gt.truth, &options(&vc))?;
        let summary = io::ResultsSummary::of(&results);
        let label = variant.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" ");
        println!("{label}: {}", headline(&report, &vc.thresholds));
        let values: Vec<&str> = variant.iter().map(|(_, v)| v.as_str()).collect();
        csv += &values.join(",");
        csv += &format!(
            ",{},{},{},{},{},{}",
            summary.frames,
            summary.success,
            report.precision,
            report.recall,
            report.f1,
            cell(report.mota)
        );
        for &t in &vc.thresholds {
            csv += &format!(
                ",{},{}",
                cell(report.success_rate(SuccessMode::Succ, t)),
                cell(report.success_rate(SuccessMode::All, t))
            );
        }
        csv += &format!(",{},{}\n", cell(report.te_mean), cell(report.entropy_mean));
        rows.push(json!({
            "settings": variant.iter().map(|(k, v)| (k.clone(), Value::String(v.clone()))).collect::<serde_json::Map<_, _>>(),
            "summary": summary,
            "metrics": report,
        }));
    }
    let dir = output_dir(cfg)?;
    io::write_text(&dir.join("sweep.json"), &io::to_pretty_json(&json!({ "variants": rows })))?;
    io::write_text(&dir.join("sweep.csv"), &csv)?;
    write_manifest(
        &dir,
        "sweep",
        cfg,
        &["sweep.json", "sweep.csv"],
        json!({ "sweep": specs, "variants": variants.len() }),
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_is_a_cartesian_product() {
        let v = sweep_variants(&["K=1,3".into(), "calp=true,false".into()]).unwrap();
        assert_eq!(v.len(), 4);
        assert_eq!(v[1], vec![("K".into(), "1".into()), ("calp".into(), "false".into())]);
        assert!(sweep_variants(&["K".into()]).is_err());
        assert!(sweep_variants(&["K=".into()]).is_err());
    }
}
