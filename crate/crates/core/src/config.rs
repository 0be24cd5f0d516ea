//! Flat `key = value` configuration files.
//!
//! One key per line, `#` starts a comment, unknown or repeated keys are
//! rejected. Relative paths are resolved against the config file's
//! directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::acquisition::{AcquisitionKind, AcquisitionSpec, Aggregation};
use crate::al_loop::ExperimentConfig;
use crate::error::{Error, Result};
use crate::model::{Architecture, RetrainMode, TrainConfig};
use crate::synth::SceneConfig;

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "master seed (u64); --seed overrides it"),
    ("profile", "scene preset: sugarbeet | corn_weed | pretrain_a | field_b"),
    ("n_images", "number of scenes to generate"),
    ("height", "image height in pixels"),
    ("width", "image width in pixels"),
    ("fraction_background", "target background pixel fraction"),
    ("fraction_crop", "target crop pixel fraction"),
    ("fraction_weed", "target weed pixel fraction"),
    ("crop_radius_min", "smallest crop disk radius"),
    ("crop_radius_max", "largest crop disk radius"),
    ("weed_radius_min", "smallest weed blob radius"),
    ("weed_radius_max", "largest weed blob radius"),
    ("background_level", "mean soil intensity in [0,1]"),
    ("noise_amplitude", "soil texture amplitude"),
    ("smoothing_radius", "box-filter radius of the soil texture"),
    ("crop_intensity", "crop intensity in [0,1]"),
    ("weed_intensity", "weed intensity in [0,1]"),
    ("tag", "distribution tag written to the manifest"),
    ("redundancy", "duplication factor applied after generation (1 = none)"),
    ("jitter_shift", "max translation of duplicates in pixels"),
    ("jitter_noise", "noise half-width added to duplicates"),
    ("in_channels", "image channels (1 or 3)"),
    ("conv_widths", "comma-separated widths of the 3x3 conv layers, e.g. 8,16"),
    ("dropout_probability", "dropout before the final 1x1 conv, in [0,1)"),
    ("epochs", "SGD epochs per training call"),
    ("learning_rate", "SGD step size"),
    ("batch_size", "images per SGD step"),
    ("pretrain_manifest", "dataset used by `pretrain`"),
    ("run_id", "label written to curves.csv"),
    ("preset", "experiment preset: standard (10 + 8x10) | extended (10 + 9x10)"),
    ("acquisitions", "comma-separated list of BALD, PowerBALD, Random"),
    ("iterations", "acquisition rounds after the initial set"),
    ("sample_size", "images acquired per round"),
    ("initial_size", "randomly annotated images before the first round"),
    ("mc_samples", "Monte-Carlo dropout passes per image"),
    ("repetitions", "independent repetitions per acquisition"),
    ("temperature", "PowerBALD temperature"),
    ("aggregation", "pixel-to-image aggregation: mean | topk"),
    ("topk_k", "pixels summed by topk (default 1% of the image)"),
    ("retrain_mode", "restart | continue"),
    ("pool_manifest", "training pool manifest for `run`"),
    ("val_manifest", "validation manifest for `run`"),
    ("warm_start", "optional checkpoint directory to start from"),
    ("threads", "worker threads (0 = all cores); never changes results"),
    ("histograms", "true to write per-round pool scores to scores.csv"),
];

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConfigFile {
    entries: BTreeMap<String, String>,
    base_dir: PathBuf,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ConfigFile {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config_err(format!("line {}: expected `key = value`", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.iter().any(|(known, _)| *known == k) {
                return Err(config_err(format!("line {}: unknown key `{k}`", n + 1)));
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(config_err(format!("line {}: key `{k}` given twice", n + 1)));
            }
        }
        Ok(ConfigFile {
            entries,
            base_dir: base_dir.to_path_buf(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base).map_err(|e| e.context(path.display().to_string()))
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(key.to_string(), value.into());
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.raw(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| config_err(format!("key `{key}`: cannot parse {v:?}")))
            })
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?
            .ok_or_else(|| config_err(format!("missing required key `{key}`")))
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.raw(key).map(|v| {
            let p = PathBuf::from(v);
            if p.is_absolute() {
                p
            } else {
                self.base_dir.join(p)
            }
        })
    }

    pub fn require_path(&self, key: &str) -> Result<PathBuf> {
        self.path(key)
            .ok_or_else(|| config_err(format!("missing required key `{key}`")))
    }

    pub fn seed(&self) -> Result<u64> {
        self.get_or("seed", 0)
    }

    /// Scene settings: the `profile` preset with any explicit overrides.
    pub fn scene(&self) -> Result<SceneConfig> {
        let profile: String = self.require("profile")?;
        let mut s = SceneConfig::preset(&profile).map_err(|e| config_err(e.to_string()))?;
        s.height = self.get_or("height", s.height)?;
        s.width = self.get_or("width", s.width)?;
        s.fractions = [
            self.get_or("fraction_background", s.fractions[0])?,
            self.get_or("fraction_crop", s.fractions[1])?,
            self.get_or("fraction_weed", s.fractions[2])?,
        ];
        s.crop_radius = (
            self.get_or("crop_radius_min", s.crop_radius.0)?,
            self.get_or("crop_radius_max", s.crop_radius.1)?,
        );
        s.weed_radius = (
            self.get_or("weed_radius_min", s.weed_radius.0)?,
            self.get_or("weed_radius_max", s.weed_radius.1)?,
        );
        s.background_level = self.get_or("background_level", s.background_level)?;
        s.noise_amplitude = self.get_or("noise_amplitude", s.noise_amplitude)?;
        s.smoothing_radius = self.get_or("smoothing_radius", s.smoothing_radius)?;
        s.crop_intensity = self.get_or("crop_intensity", s.crop_intensity)?;
        s.weed_intensity = self.get_or("weed_intensity", s.weed_intensity)?;
        s.tag = self.get_or("tag", s.tag)?;
        s.seed = self.seed()?;
        Ok(s)
    }

    pub fn dropout(&self) -> Result<f64> {
        let p: f64 = self.get_or("dropout_probability", 0.5)?;
        if !(0.0..1.0).contains(&p) {
            return Err(config_err(format!(
                "key `dropout_probability`: {p} outside [0,1)"
            )));
        }
        Ok(p)
    }

    pub fn architecture(&self) -> Result<Architecture> {
        let widths: Vec<usize> = match self.raw("conv_widths") {
            None => vec![8, 16],
            Some(v) => v
                .split(',')
                .map(|w| w.trim().parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| config_err(format!("key `conv_widths`: cannot parse {v:?}")))?,
        };
        Architecture::with_widths(
            self.get_or("in_channels", 1)?,
            crate::synth::CLASSES,
            self.dropout()?,
            &widths,
        )
        .map_err(|e| config_err(e.to_string()))
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let seed = self.seed()?;
        Ok(TrainConfig {
            epochs: self.get_or("epochs", d.epochs)?,
            learning_rate: self.get_or("learning_rate", d.learning_rate)?,
            batch_size: self.get_or("batch_size", d.batch_size)?,
            init_seed: seed,
            shuffle_seed: seed,
        })
    }

    pub fn acquisitions(&self) -> Result<Vec<AcquisitionKind>> {
        match self.raw("acquisitions") {
            None => Ok(AcquisitionKind::ALL.to_vec()),
            Some(v) => {
                let kinds: Vec<AcquisitionKind> = v
                    .split(',')
                    .map(|s| s.trim().parse())
                    .collect::<Result<_>>()
                    .map_err(|e| config_err(format!("key `acquisitions`: {e}")))?;
                if kinds.is_empty() {
                    return Err(config_err("key `acquisitions` is empty"));
                }
                for (i, k) in kinds.iter().enumerate() {
                    if kinds[..i].contains(k) {
                        return Err(config_err(format!("acquisition {k} listed twice")));
                    }
                }
                Ok(kinds)
            }
        }
    }

    /// `aggregation`; `pixels` sets the default K of `topk`.
    pub fn aggregation(&self, pixels: usize) -> Result<Aggregation> {
        match self.raw("aggregation").unwrap_or("mean") {
            "mean" => Ok(Aggregation::Mean),
            "topk" => match self.get::<usize>("topk_k")? {
                Some(k) => Ok(Aggregation::TopK(k)),
                None => Ok(Aggregation::top_percent(pixels)),
            },
            other => other
                .parse()
                .map_err(|_| config_err(format!("key `aggregation`: unknown mode {other:?}"))),
        }
    }

    /// Experiment settings for one acquisition.
    pub fn experiment(&self, kind: AcquisitionKind, pixels: usize) -> Result<ExperimentConfig> {
        let base = match self.raw("preset").unwrap_or("standard") {
            "standard" => ExperimentConfig::standard(kind),
            "extended" => ExperimentConfig::extended(kind),
            other => return Err(config_err(format!("key `preset`: unknown preset {other:?}"))),
        };
        let dropout_p = self.dropout()?;
        let spec = AcquisitionSpec {
            kind,
            temperature: self.get_or("temperature", 1.0)?,
            aggregation: self.aggregation(pixels)?,
            seed: 0,
        };
        let cfg = ExperimentConfig {
            run_id: self.get_or("run_id", base.run_id)?,
            acquisition: spec,
            iterations: self.get_or("iterations", base.iterations)?,
            sample_size: self.get_or("sample_size", base.sample_size)?,
            initial_size: self.get_or("initial_size", base.initial_size)?,
            dropout_p,
            mc_samples: self.get_or("mc_samples", base.mc_samples)?,
            repetitions: self.get_or("repetitions", base.repetitions)?,
            arch: self.architecture()?,
            train: self.train()?,
            retrain_mode: self.get_or("retrain_mode", RetrainMode::Restart)?,
            seed: self.seed()?,
        };
        cfg.acquisition
            .validate()
            .and_then(|_| cfg.train.validate())
            .map_err(|e| config_err(e.to_string()))?;
        Ok(cfg)
    }

    /// Canonical `key = value` text, sorted by key.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

/// `--help` text listing every key.
pub fn keys_help() -> String {
    let mut s = String::from("Config keys (flat `key = value`, `#` comments):\n");
    for (k, d) in KEYS {
        let _ = writeln!(s, "  {k:<20} {d}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ConfigFile> {
        ConfigFile::parse(text, Path::new("/base"))
    }

    #[test]
    fn parses_comments_and_paths() {
        let c = parse("# header\nseed = 7  # trailing\n\npool_manifest = pool/manifest.csv\nwarm_start=/abs/ck\n")
            .unwrap();
        assert_eq!(c.seed().unwrap(), 7);
        assert_eq!(c.path("pool_manifest").unwrap(), PathBuf::from("/base/pool/manifest.csv"));
        assert_eq!(c.path("warm_start").unwrap(), PathBuf::from("/abs/ck"));
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed() {
        assert!(matches!(parse("colour = red"), Err(Error::Config(m)) if m.contains("colour")));
        assert!(parse("seed = 1\nseed = 2").is_err());
        assert!(parse("seed 1").is_err());
        let c = parse("seed = x").unwrap();
        assert!(c.seed().is_err());
    }

    #[test]
    fn missing_required_key_is_named() {
        let c = parse("n_images = 3").unwrap();
        match c.scene() {
            Err(Error::Config(m)) => assert!(m.contains("profile")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn scene_overrides_apply() {
        let c = parse("profile = sugarbeet\nheight = 32\nseed = 5\ntag = s").unwrap();
        let s = c.scene().unwrap();
        assert_eq!((s.height, s.width, s.seed), (32, 64, 5));
        assert_eq!(s.fractions, SceneConfig::sugarbeet().fractions);
        assert_eq!(s.tag, "s");
    }

    #[test]
    fn experiment_resolution() {
        let c = parse("acquisitions = bald, random\niterations = 2\naggregation = topk\ndropout_probability = 0.25")
            .unwrap();
        assert_eq!(
            c.acquisitions().unwrap(),
            vec![AcquisitionKind::Bald, AcquisitionKind::Random]
        );
        let e = c.experiment(AcquisitionKind::Bald, 4096).unwrap();
        assert_eq!(e.iterations, 2);
        assert_eq!(e.acquisition.aggregation, Aggregation::TopK(41));
        assert_eq!(e.dropout_p, 0.25);
        assert_eq!(e.arch.dropout_p(), 0.25);
        assert!(parse("dropout_probability = 1.0").unwrap().dropout().is_err());
        assert!(parse("preset = other").unwrap().experiment(AcquisitionKind::Bald, 1).is_err());
    }

    #[test]
    fn text_round_trip() {
        let c = parse("seed = 3\nrun_id = a\n").unwrap();
        assert_eq!(parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn every_key_is_documented_once() {
        let mut names: Vec<&str> = KEYS.iter().map(|(k, _)| *k).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), KEYS.len());
        assert!(keys_help().contains("mc_samples"));
    }
}
