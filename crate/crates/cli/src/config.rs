//! Flat `key = value` run configuration shared by every subcommand.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use objloc_core::graph::PriorEdgeMode;
use objloc_core::pose::{BearingSource, ConnectivityRule, MatcherConfig};
use objloc_core::simulator::{
    NoiseSpec, SceneSpec, SimulationSpec, TrajectoryKind, TrajectorySpec,
};

/// How evaluation finds each detection's true landmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TruthSource {
    /// Ground-truth association file.
    Associations,
    /// Best-matching landmark projected under the ground-truth pose.
    Projection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelSet {
    Unique,
    Clustered,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub labels: LabelSet,
    pub n_landmarks: usize,
    pub confusion: f64,
    pub n_keyframes: usize,
    pub n_frames: usize,
    pub trajectory: TrajectoryKind,
    pub keyframe_radius: f64,
    pub keyframe_height: f64,
    pub query_radius: f64,
    pub query_height: f64,
    pub noise: NoiseSpec,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        let stress = SimulationSpec::stress(30, 200, 0);
        Self {
            labels: LabelSet::Clustered,
            n_landmarks: stress.scene.n_landmarks,
            confusion: stress.scene.confusion_rate,
            n_keyframes: stress.keyframes.n_frames,
            n_frames: stress.queries.n_frames,
            trajectory: stress.queries.kind,
            keyframe_radius: stress.keyframes.radius,
            keyframe_height: stress.keyframes.height,
            query_radius: stress.queries.radius,
            query_height: stress.queries.height,
            noise: stress.noise,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Paths {
    pub dataset: Option<PathBuf>,
    pub map: Option<PathBuf>,
    pub keyframes: Option<PathBuf>,
    pub detections: Option<PathBuf>,
    pub intrinsics: Option<PathBuf>,
    pub trajectory: Option<PathBuf>,
    pub associations: Option<PathBuf>,
    pub scene: Option<PathBuf>,
    pub results: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub matcher: MatcherConfig,
    /// Worker threads for frame-level parallelism; 0 uses every logical core.
    pub threads: usize,
    /// Raw depth units per meter.
    pub depth_scale: f64,
    pub sequence: String,
    pub thresholds: Vec<f64>,
    pub strict_threshold: bool,
    pub truth: TruthSource,
    pub iou_threshold: f64,
    pub simulation: SimulationConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            matcher: MatcherConfig::default(),
            threads: 0,
            depth_scale: 5000.0,
            sequence: "sequence".into(),
            thresholds: vec![0.5, 1.0, 2.0],
            strict_threshold: false,
            truth: TruthSource::Associations,
            iou_threshold: 0.5,
            simulation: SimulationConfig::default(),
            paths: Paths::default(),
        }
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("{key}: cannot parse {value:?}"))
}

fn flag(key: &str, value: &str) -> Result<bool, String> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(format!("{key}: expected true or false, got {value:?}")),
    }
}

fn path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    /// Applies one setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let m = &mut self.matcher;
        let s = &mut self.simulation;
        let p = &mut self.paths;
        match key {
            "K" => m.top_k = num(key, value)?,
            "tau" => m.tau = num(key, value)?,
            "C" => m.wasserstein_scale = num(key, value)?,
            "n_iter" => m.n_iter = num(key, value)?,
            "k_edge" => m.k_edge = num(key, value)?,
            "seed" => m.rng_seed = num(key, value)?,
            "early_exit" => {
                m.early_exit = match value {
                    "off" | "none" => None,
                    v => Some(num(key, v)?),
                }
            }
            "calp" => m.propagate = flag(key, value)?,
            "connectivity" => {
                m.connectivity = match value {
                    "exact" => ConnectivityRule::Exact,
                    "query-subset" => ConnectivityRule::QuerySubset,
                    _ => return Err(format!("{key}: expected exact or query-subset")),
                }
            }
            "one_to_one" => m.one_to_one = flag(key, value)?,
            "bearing" => {
                m.bearing_source = match value {
                    "position" => BearingSource::Position,
                    "bbox-center" => BearingSource::BboxCenter,
                    _ => return Err(format!("{key}: expected position or bbox-center")),
                }
            }
            "clamp_projection" => m.clamp_projection = flag(key, value)?,
            "drop_zero_columns" => m.drop_zero_columns = flag(key, value)?,
            "prior_edges" => {
                m.prior_edge_mode = match value {
                    "per-keyframe" => PriorEdgeMode::PerKeyframe,
                    "global" => PriorEdgeMode::Global,
                    _ => return Err(format!("{key}: expected per-keyframe or global")),
                }
            }
            "workers" => m.workers = num(key, value)?,
            "threads" => self.threads = num(key, value)?,
            "depth_scale" => self.depth_scale = num(key, value)?,
            "sequence" => self.sequence = value.to_string(),
            "thresholds" => {
                self.thresholds = value
                    .split(',')
                    .map(|v| num(key, v.trim()))
                    .collect::<Result<_, _>>()?
            }
            "strict_threshold" => self.strict_threshold = flag(key, value)?,
            "truth" => {
                self.truth = match value {
                    "associations" => TruthSource::Associations,
                    "projection" => TruthSource::Projection,
                    _ => return Err(format!("{key}: expected associations or projection")),
                }
            }
            "iou_threshold" => self.iou_threshold = num(key, value)?,
            "labels" => {
                s.labels = match value {
                    "unique" => LabelSet::Unique,
                    "clustered" => LabelSet::Clustered,
                    _ => return Err(format!("{key}: expected unique or clustered")),
                }
            }
            "n_landmarks" => s.n_landmarks = num(key, value)?,
            "confusion" => s.confusion = num(key, value)?,
            "n_keyframes" => s.n_keyframes = num(key, value)?,
            "n_frames" => s.n_frames = num(key, value)?,
            "trajectory" => s.trajectory = value.parse().map_err(|e| format!("{key}: {e}"))?,
            "keyframe_radius" => s.keyframe_radius = num(key, value)?,
            "keyframe_height" => s.keyframe_height = num(key, value)?,
            "query_radius" => s.query_radius = num(key, value)?,
            "query_height" => s.query_height = num(key, value)?,
            "bbox_sigma" => s.noise.bbox_sigma = num(key, value)?,
            "depth_sigma" => s.noise.depth_sigma = num(key, value)?,
            "dropout" => s.noise.dropout = num(key, value)?,
            "temperature" => s.noise.temperature = num(key, value)?,
            "min_score" => s.noise.min_score = num(key, value)?,
            "max_labels" => s.noise.max_labels = num(key, value)?,
            "dataset" => p.dataset = path(value),
            "map" => p.map = path(value),
            "keyframes" => p.keyframes = path(value),
            "detections" => p.detections = path(value),
            "intrinsics" => p.intrinsics = path(value),
            "groundtruth" => p.trajectory = path(value),
            "associations" => p.associations = path(value),
            "scene" => p.scene = path(value),
            "results" => p.results = path(value),
            "output" => p.output = path(value),
            _ => return Err(format!("unknown setting {key:?}")),
        }
        Ok(())
    }

    /// Applies a `key=value` assignment.
    pub fn assign(&mut self, assignment: &str) -> Result<(), String> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| format!("expected key=value, got {assignment:?}"))?;
        self.set(k.trim(), v.trim())
    }

    /// Applies a config file. Blank lines and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<(), (usize, String)> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.assign(line).map_err(|e| (i + 1, e))?;
        }
        Ok(())
    }

    /// Every setting as `(key, value)`, in a fixed order; unset paths are omitted.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.matcher;
        let s = &self.simulation;
        let onoff = |b: bool| if b { "true" } else { "false" }.to_string();
        let mut out = vec![
            ("K", m.top_k.to_string()),
            ("tau", m.tau.to_string()),
            ("C", m.wasserstein_scale.to_string()),
            ("n_iter", m.n_iter.to_string()),
            ("k_edge", m.k_edge.to_string()),
            ("seed", m.rng_seed.to_string()),
            (
                "early_exit",
                m.early_exit.map_or("off".into(), |v| v.to_string()),
            ),
            ("calp", onoff(m.propagate)),
            (
                "connectivity",
                match m.connectivity {
                    ConnectivityRule::Exact => "exact",
                    ConnectivityRule::QuerySubset => "query-subset",
                }
                .into(),
            ),
            ("one_to_one", onoff(m.one_to_one)),
            (
                "bearing",
                match m.bearing_source {
                    BearingSource::Position => "position",
                    BearingSource::BboxCenter => "bbox-center",
                }
                .into(),
            ),
            ("clamp_projection", onoff(m.clamp_projection)),
            ("drop_zero_columns", onoff(m.drop_zero_columns)),
            (
                "prior_edges",
                match m.prior_edge_mode {
                    PriorEdgeMode::PerKeyframe => "per-keyframe",
                    PriorEdgeMode::Global => "global",
                }
                .into(),
            ),
            ("workers", m.workers.to_string()),
            ("threads", self.threads.to_string()),
            ("depth_scale", self.depth_scale.to_string()),
            ("sequence", self.sequence.clone()),
            (
                "thresholds",
                self.thresholds
                    .iter()
                    .map(f64::to_string)
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("strict_threshold", onoff(self.strict_threshold)),
            (
                "truth",
                match self.truth {
                    TruthSource::Associations => "associations",
                    TruthSource::Projection => "projection",
                }
                .into(),
            ),
            ("iou_threshold", self.iou_threshold.to_string()),
            (
                "labels",
                match s.labels {
                    LabelSet::Unique => "unique",
                    LabelSet::Clustered => "clustered",
                }
                .into(),
            ),
            ("n_landmarks", s.n_landmarks.to_string()),
            ("confusion", s.confusion.to_string()),
            ("n_keyframes", s.n_keyframes.to_string()),
            ("n_frames", s.n_frames.to_string()),
            (
                "trajectory",
                match s.trajectory {
                    TrajectoryKind::Orbit => "orbit",
                    TrajectoryKind::Line => "line",
                    TrajectoryKind::RandomWalk => "random-walk",
                }
                .into(),
            ),
            ("keyframe_radius", s.keyframe_radius.to_string()),
            ("keyframe_height", s.keyframe_height.to_string()),
            ("query_radius", s.query_radius.to_string()),
            ("query_height", s.query_height.to_string()),
            ("bbox_sigma", s.noise.bbox_sigma.to_string()),
            ("depth_sigma", s.noise.depth_sigma.to_string()),
            ("dropout", s.noise.dropout.to_string()),
            ("temperature", s.noise.temperature.to_string()),
            ("min_score", s.noise.min_score.to_string()),
            ("max_labels", s.noise.max_labels.to_string()),
        ];
        let p = &self.paths;
        for (key, value) in [
            ("dataset", &p.dataset),
            ("map", &p.map),
            ("keyframes", &p.keyframes),
            ("detections", &p.detections),
            ("intrinsics", &p.intrinsics),
            ("groundtruth", &p.trajectory),
            ("associations", &p.associations),
            ("scene", &p.scene),
            ("results", &p.results),
            ("output", &p.output),
        ] {
            if let Some(v) = value {
                out.push((key, v.display().to_string()));
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn simulation_spec(&self) -> SimulationSpec {
        let s = &self.simulation;
        let seed = self.matcher.rng_seed;
        let base = SimulationSpec::noise_free(s.n_landmarks, s.n_frames, seed);
        let scene = match s.labels {
            LabelSet::Unique => SceneSpec::unique_labels(s.n_landmarks, seed),
            LabelSet::Clustered => SceneSpec::clustered(s.n_landmarks, s.confusion, seed),
        };
        SimulationSpec {
            scene: SceneSpec {
                confusion_rate: s.confusion,
                ..scene
            },
            keyframes: TrajectorySpec {
                n_frames: s.n_keyframes,
                radius: s.keyframe_radius,
                height: s.keyframe_height,
                ..base.keyframes
            },
            queries: TrajectorySpec {
                kind: s.trajectory,
                n_frames: s.n_frames,
                radius: s.query_radius,
                height: s.query_height,
                ..base.queries
            },
            noise: s.noise.clone(),
            ..base
        }
    }

    /// Resolves an input path: explicit setting first, then `<dataset>/<default_name>`.
    pub fn input(&self, explicit: &Option<PathBuf>, default_name: &str) -> Option<PathBuf> {
        explicit
            .clone()
            .or_else(|| self.paths.dataset.as_ref().map(|d| d.join(default_name)))
    }

    /// Output directory: explicit, else the dataset directory.
    pub fn output_dir(&self) -> Option<&Path> {
        self.paths
            .output
            .as_deref()
            .or(self.paths.dataset.as_deref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        let mut back = RunConfig::default();
        back.set("K", "1").unwrap();
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn file_errors_carry_line_numbers() {
        let mut c = RunConfig::default();
        let err = c.apply_text("# comment\nK = 3\n\ntau = x\n").unwrap_err();
        assert_eq!(err.0, 4);
        assert_eq!(c.matcher.top_k, 3);
        assert!(c.apply_text("bogus = 1").is_err());
        assert!(c.apply_text("K 3").is_err());
    }

    #[test]
    fn special_values() {
        let mut c = RunConfig::default();
        c.assign("early_exit=off").unwrap();
        assert_eq!(c.matcher.early_exit, None);
        c.assign("calp = off").unwrap();
        assert!(!c.matcher.propagate);
        c.assign("thresholds=0.25, 1").unwrap();
        assert_eq!(c.thresholds, vec![0.25, 1.0]);
        c.assign("output=").unwrap();
        assert_eq!(c.paths.output, None);
    }

    fn settings() -> impl Strategy<Value = Vec<(&'static str, String)>> {
        let num = |lo: f64, hi: f64| (lo..hi).prop_map(|v| v.to_string());
        let int = |lo: u64, hi: u64| (lo..hi).prop_map(|v| v.to_string());
        let pick = |opts: &'static [&'static str]| prop::sample::select(opts).prop_map(str::to_string);
        (
            (int(1, 10), int(1, 10), num(1.0, 500.0), int(1, 5000), int(1, 10), any::<u64>().prop_map(|v| v.to_string())),
            (
                prop_oneof![Just("off".to_string()), num(0.0, 1.0)],
                pick(&["true", "false"]),
                pick(&["exact", "query-subset"]),
                pick(&["position", "bbox-center"]),
                pick(&["per-keyframe", "global"]),
                prop::collection::vec(0.01..5.0f64, 1..4)
                    .prop_map(|v| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")),
            ),
            (num(0.0, 1.0), num(0.0, 10.0), pick(&["orbit", "line", "random-walk"]), pick(&["unique", "clustered"]), "[a-z]{1,8}"),
        )
            .prop_map(|((k, tau, c, n_iter, k_edge, seed), (ee, calp, conn, bearing, edges, thr), (conf, temp, traj, labels, dir))| {
                vec![
                    ("K", k), ("tau", tau), ("C", c), ("n_iter", n_iter), ("k_edge", k_edge),
                    ("seed", seed), ("early_exit", ee), ("calp", calp), ("connectivity", conn),
                    ("bearing", bearing), ("prior_edges", edges), ("thresholds", thr),
                    ("confusion", conf), ("temperature", temp), ("trajectory", traj),
                    ("labels", labels), ("dataset", dir),
                ]
            })
    }

    proptest! {
        #[test]
        fn settings_round_trip_through_text(settings in settings()) {
            let mut c = RunConfig::default();
            for (k, v) in &settings {
                c.set(k, v).unwrap();
            }
            let mut back = RunConfig::default();
            back.apply_text(&c.to_text()).unwrap();
            prop_assert_eq!(&back, &c);
            prop_assert_eq!(back.to_text(), c.to_text());
        }
    }
}
