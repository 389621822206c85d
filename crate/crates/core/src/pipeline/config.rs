//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::data::GenConfig;
use crate::error::{Error, Result};
use crate::model::TrainConfig;
use crate::scores::normalize_grid;
use crate::sspb::read_input;
use crate::transforms::{ProbingTask, Transform};

pub const ROTATION: &str = "rotation";
pub const TRANSLATION: &str = "translation";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Synthetic,
    Ingest,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub seed: u64,
    /// Samples per class in the pool that is split into train and validation.
    pub n_train_per_class: usize,
    pub val_fraction: f64,
    pub n_test_per_class: usize,
    pub n_ood_per_class: usize,
    pub noise_sigma: f64,
    pub jitter_px: usize,
}

impl DataConfig {
    pub fn gen_config(&self, n_per_class: usize) -> GenConfig {
        GenConfig {
            seed: self.seed,
            n_per_class,
            noise_sigma: self.noise_sigma,
            jitter_px: self.jitter_px,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub run_dir: PathBuf,
    pub data: DataConfig,
    pub hidden: usize,
    pub train: TrainConfig,
    /// Enabled probing tasks, rotation first.
    pub tasks: Vec<ProbingTask>,
    pub probe: TrainConfig,
    pub fusion_grid: Vec<f64>,
    pub calib_bins: usize,
    pub ablate_rotation: Vec<ProbingTask>,
    pub ablate_translation: Vec<ProbingTask>,
    pub ingest_dir: Option<PathBuf>,
    /// Normalized `key = value` pairs of the resolved configuration.
    resolved: BTreeMap<String, String>,
}

const KEYS: &[&str] = &[
    "mode",
    "run.dir",
    "data.seed",
    "data.n_train_per_class",
    "data.val_fraction",
    "data.n_test_per_class",
    "data.n_ood_per_class",
    "data.noise_sigma",
    "data.jitter_px",
    "model.hidden",
    "train.epochs",
    "train.batch_size",
    "train.lr0",
    "train.seed",
    "probe.rotation",
    "probe.translation",
    "probe.epochs",
    "probe.batch_size",
    "probe.lr0",
    "probe.seed",
    "fusion.grid",
    "calib.bins",
    "ablate.rotation_sets",
    "ablate.translation_sets",
    "ingest.dir",
];

fn default_value(key: &str) -> &'static str {
    match key {
        "mode" => "synthetic",
        "run.dir" => "run",
        "data.seed" => "1",
        "data.n_train_per_class" => "250",
        "data.val_fraction" => "0.2",
        "data.n_test_per_class" => "500",
        "data.n_ood_per_class" => "100",
        "data.noise_sigma" => "0.3",
        "data.jitter_px" => "4",
        "model.hidden" => "64",
        "train.epochs" => "10",
        "train.batch_size" => "32",
        "train.lr0" => "0.05",
        "train.seed" => "1",
        "probe.rotation" => "0,90,180,270",
        "probe.translation" => "0:0,-8:0,8:0,0:-8,0:8",
        "probe.epochs" => "10",
        "probe.batch_size" => "32",
        "probe.lr0" => "0.3",
        "probe.seed" => "1",
        "fusion.grid" => "0,0.01,0.02,0.05,0.1,0.25,0.5,0.75,1,1.5,2",
        "calib.bins" => "15",
        "ablate.rotation_sets" => "0,90|0,90,180,270",
        "ablate.translation_sets" => "0:0,0:-8,0:8|0:0,-8:0,8:0,0:-8,0:8",
        _ => "",
    }
}

/// One raw entry: value and the line it came from (0 for defaults).
struct Entry<'a> {
    line: usize,
    value: &'a str,
}

struct Fields<'a> {
    map: BTreeMap<&'a str, Entry<'a>>,
}

impl<'a> Fields<'a> {
    fn get(&self, key: &'static str) -> Entry<'a> {
        match self.map.get(key) {
            Some(e) => Entry {
                line: e.line,
                value: e.value,
            },
            None => Entry {
                line: 0,
                value: default_value(key),
            },
        }
    }

    fn parse<T: std::str::FromStr>(&self, key: &'static str, what: &str) -> Result<T> {
        let e = self.get(key);
        e.value
            .parse()
            .map_err(|_| bad(e.line, key, format!("expected {what}, got `{}`", e.value)))
    }

    fn positive(&self, key: &'static str) -> Result<usize> {
        let v: usize = self.parse(key, "a positive integer")?;
        if v == 0 {
            return Err(bad(self.get(key).line, key, "must be at least 1".into()));
        }
        Ok(v)
    }

    fn real(&self, key: &'static str) -> Result<f64> {
        let v: f64 = self.parse(key, "a number")?;
        if !v.is_finite() {
            return Err(bad(self.get(key).line, key, "must be finite".into()));
        }
        Ok(v)
    }
}

fn bad(line: usize, key: &str, message: String) -> Error {
    Error::Config {
        line,
        key: key.to_string(),
        message,
    }
}

fn parse_rotation(name: &str, value: &str) -> std::result::Result<ProbingTask, String> {
    let degrees = value
        .split(',')
        .map(|d| {
            d.trim()
                .parse::<u32>()
                .map_err(|_| format!("bad rotation degree `{}`", d.trim()))
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    ProbingTask::rotation(name, &degrees).map_err(|e| e.to_string())
}

fn parse_translation(name: &str, value: &str) -> std::result::Result<ProbingTask, String> {
    let transforms = value
        .split(',')
        .map(|t| t.trim().parse::<Transform>().map_err(|e| e.to_string()))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if transforms.iter().any(|t| matches!(t, Transform::Rotate { .. })) {
        return Err("translation offsets must be written dx:dy".into());
    }
    ProbingTask::new(name, transforms).map_err(|e| e.to_string())
}

type TaskParser = fn(&str, &str) -> std::result::Result<ProbingTask, String>;

fn parse_sets(
    fields: &Fields,
    key: &'static str,
    base: Option<&ProbingTask>,
    parser: TaskParser,
) -> Result<Vec<ProbingTask>> {
    let e = fields.get(key);
    if e.value.is_empty() {
        return Ok(Vec::new());
    }
    let Some(base) = base else {
        if e.line == 0 {
            // Default sets of a disabled task.
            return Ok(Vec::new());
        }
        return Err(bad(e.line, key, "the corresponding probing task is disabled".into()));
    };
    let mut out = Vec::new();
    for set in e.value.split('|') {
        let task = parser(base.name(), set.trim()).map_err(|m| bad(e.line, key, m))?;
        if let Some(t) = task.transforms().iter().find(|t| !base.transforms().contains(t)) {
            return Err(bad(
                e.line,
                key,
                format!("transform {t} is not part of probe.{}", base.name()),
            ));
        }
        out.push(task);
    }
    Ok(out)
}

fn join<T: ToString>(items: impl IntoIterator<Item = T>, sep: &str) -> String {
    items.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(sep)
}

impl RunConfig {
    /// Parse and fully validate a configuration. Relative paths are
    /// resolved against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(bad(line, content, "expected `key = value`".into()));
            };
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(bad(line, key, "unknown key".into()));
            }
            if let Some(prev) = map.insert(key, Entry { line, value }) {
                return Err(bad(
                    line,
                    key,
                    format!("duplicate key, first set on line {}", prev.line),
                ));
            }
        }
        Self::build(&Fields { map }, base_dir)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_input(path)?;
        let text =
            String::from_utf8(bytes).map_err(|_| Error::ConfigGeneral(format!("{} is not UTF-8", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    fn build(f: &Fields, base_dir: &Path) -> Result<Self> {
        let mode = match f.get("mode").value {
            "synthetic" => Mode::Synthetic,
            "ingest" => Mode::Ingest,
            other => {
                return Err(bad(
                    f.get("mode").line,
                    "mode",
                    format!("expected synthetic or ingest, got `{other}`"),
                ))
            }
        };
        let path = |key: &'static str| -> Result<Option<PathBuf>> {
            let e = f.get(key);
            if e.value.is_empty() {
                return Ok(None);
            }
            Ok(Some(base_dir.join(e.value)))
        };
        let run_dir =
            path("run.dir")?.ok_or_else(|| bad(f.get("run.dir").line, "run.dir", "must not be empty".into()))?;

        let data = DataConfig {
            seed: f.parse("data.seed", "an unsigned 64-bit integer")?,
            n_train_per_class: f.positive("data.n_train_per_class")?,
            val_fraction: f.real("data.val_fraction")?,
            n_test_per_class: f.positive("data.n_test_per_class")?,
            n_ood_per_class: f.positive("data.n_ood_per_class")?,
            noise_sigma: f.real("data.noise_sigma")?,
            jitter_px: f.parse("data.jitter_px", "a non-negative integer")?,
        };
        let vf = data.val_fraction;
        let hold = (vf * data.n_train_per_class as f64).ceil() as usize;
        if !(vf > 0.0 && vf < 1.0) || hold >= data.n_train_per_class {
            return Err(bad(
                f.get("data.val_fraction").line,
                "data.val_fraction",
                "must lie in (0,1) and leave training samples in every class".into(),
            ));
        }
        if !(0.0..=1.0).contains(&data.noise_sigma) {
            return Err(bad(
                f.get("data.noise_sigma").line,
                "data.noise_sigma",
                "must lie in [0,1]".into(),
            ));
        }
        if data.jitter_px > 6 {
            return Err(bad(
                f.get("data.jitter_px").line,
                "data.jitter_px",
                "must be at most 6".into(),
            ));
        }

        let hidden = f.positive("model.hidden")?;
        if hidden < crate::data::NUM_DIGITS {
            return Err(bad(
                f.get("model.hidden").line,
                "model.hidden",
                format!("must be at least the class count {}", crate::data::NUM_DIGITS),
            ));
        }
        let train = TrainConfig {
            epochs: f.positive("train.epochs")?,
            batch_size: f.positive("train.batch_size")?,
            lr0: f.real("train.lr0")?,
            seed: f.parse("train.seed", "an unsigned 64-bit integer")?,
        };
        let probe = TrainConfig {
            epochs: f.positive("probe.epochs")?,
            batch_size: f.positive("probe.batch_size")?,
            lr0: f.real("probe.lr0")?,
            seed: f.parse("probe.seed", "an unsigned 64-bit integer")?,
        };
        for (key, cfg) in [("train.lr0", &train), ("probe.lr0", &probe)] {
            if cfg.lr0 <= 0.0 {
                return Err(bad(f.get(key).line, key, "must be positive".into()));
            }
        }

        let task = |key: &'static str, name: &str, parser: TaskParser| -> Result<Option<ProbingTask>> {
            let e = f.get(key);
            if e.value.is_empty() {
                return Ok(None);
            }
            parser(name, e.value).map(Some).map_err(|m| bad(e.line, key, m))
        };
        let rotation = task("probe.rotation", ROTATION, parse_rotation)?;
        let translation = task("probe.translation", TRANSLATION, parse_translation)?;
        let tasks: Vec<ProbingTask> = rotation.iter().chain(translation.iter()).cloned().collect();
        if tasks.is_empty() {
            return Err(Error::ConfigGeneral(
                "at least one probing task must be enabled (probe.rotation or probe.translation)".into(),
            ));
        }

        let e = f.get("fusion.grid");
        let grid: Vec<f64> = e
            .value
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| {
                bad(
                    e.line,
                    "fusion.grid",
                    format!("expected comma-separated numbers, got `{}`", e.value),
                )
            })?;
        let fusion_grid = normalize_grid(&grid).map_err(|err| bad(e.line, "fusion.grid", err.to_string()))?;
        if fusion_grid.iter().any(|&v| v < 0.0) {
            return Err(bad(e.line, "fusion.grid", "weights must be non-negative".into()));
        }
        let calib_bins = f.positive("calib.bins")?;

        let ablate_rotation = parse_sets(f, "ablate.rotation_sets", rotation.as_ref(), parse_rotation)?;
        let ablate_translation = parse_sets(f, "ablate.translation_sets", translation.as_ref(), parse_translation)?;

        let ingest_dir = path("ingest.dir")?;
        if mode == Mode::Ingest && ingest_dir.is_none() {
            return Err(Error::ConfigGeneral("mode = ingest requires ingest.dir".into()));
        }

        let mut resolved = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            resolved.insert(k.to_string(), v);
        };
        put(
            "mode",
            if mode == Mode::Synthetic { "synthetic" } else { "ingest" }.into(),
        );
        put("data.seed", data.seed.to_string());
        put("data.n_train_per_class", data.n_train_per_class.to_string());
        put("data.val_fraction", data.val_fraction.to_string());
        put("data.n_test_per_class", data.n_test_per_class.to_string());
        put("data.n_ood_per_class", data.n_ood_per_class.to_string());
        put("data.noise_sigma", data.noise_sigma.to_string());
        put("data.jitter_px", data.jitter_px.to_string());
        put("model.hidden", hidden.to_string());
        for (p, c) in [("train", &train), ("probe", &probe)] {
            put(&format!("{p}.epochs"), c.epochs.to_string());
            put(&format!("{p}.batch_size"), c.batch_size.to_string());
            put(&format!("{p}.lr0"), c.lr0.to_string());
            put(&format!("{p}.seed"), c.seed.to_string());
        }
        put(
            "probe.rotation",
            rotation.as_ref().map(|t| t.spec_string()).unwrap_or_default(),
        );
        put(
            "probe.translation",
            translation.as_ref().map(|t| t.spec_string()).unwrap_or_default(),
        );
        put("fusion.grid", join(&fusion_grid, ","));
        put("calib.bins", calib_bins.to_string());
        put(
            "ablate.rotation_sets",
            join(ablate_rotation.iter().map(|t| t.spec_string()), "|"),
        );
        put(
            "ablate.translation_sets",
            join(ablate_translation.iter().map(|t| t.spec_string()), "|"),
        );
        if let Some(e) = f.map.get("ingest.dir") {
            put("ingest.dir", e.value.to_string());
        }

        Ok(RunConfig {
            mode,
            run_dir,
            data,
            hidden,
            train,
            tasks,
            probe,
            fusion_grid,
            calib_bins,
            ablate_rotation,
            ablate_translation,
            ingest_dir,
            resolved,
        })
    }

    /// The default configuration with its run directory at `run_dir`.
    pub fn with_run_dir(run_dir: impl Into<PathBuf>) -> Self {
        let mut cfg = Self::parse("", Path::new(".")).expect("defaults are valid");
        cfg.run_dir = run_dir.into();
        cfg
    }

    /// Resolved settings, excluding the run directory, in key order.
    pub fn resolved(&self) -> impl Iterator<Item = (&str, &str)> {
        self.resolved.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn task(&self, name: &str) -> Option<&ProbingTask> {
        self.tasks.iter().find(|t| t.name() == name)
    }
}
