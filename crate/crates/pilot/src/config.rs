//! Plain `key = value` configuration files with strict key validation, plus
//! command-line overrides of the same form.

use crate::encoder::EncoderConfig;
use crate::error::{PilotError, Result};
use crate::extractor::ExtractorConfig;
use crate::model::ModelConfig;
use crate::objective::LossConfig;
use crate::simulator::SceneSpec;
use crate::trainer::TrainConfig;
use std::fmt::Write as _;
use std::path::Path;

/// Everything an invocation can configure. Each field group mirrors the
/// owning module's config struct; unknown keys are an error.
#[derive(Debug, Clone)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub scene: SceneSpec,
    pub num_scenes: usize,
    pub num_folds: usize,
}

impl Default for Config {
    fn default() -> Config {
        Config::defaults()
    }
}

impl Config {
    pub fn defaults() -> Config {
        Config {
            model: ModelConfig {
                extractor: ExtractorConfig::default(),
                encoder: EncoderConfig::default(),
            },
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            scene: SceneSpec::default(),
            num_scenes: 30,
            num_folds: 5,
        }
    }

    pub fn from_file(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PilotError::io(path.display().to_string(), e))?;
        let mut cfg = Config::defaults();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                PilotError::Format(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Apply `key=value` overrides from the command line.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| PilotError::Format(format!("override '{}' is not key=value", o)))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn usize_of(key: &str, v: &str) -> Result<usize> {
            v.parse()
                .map_err(|_| PilotError::Format(format!("'{}': expected integer, got '{}'", key, v)))
        }
        fn u64_of(key: &str, v: &str) -> Result<u64> {
            v.parse()
                .map_err(|_| PilotError::Format(format!("'{}': expected integer, got '{}'", key, v)))
        }
        fn f64_of(key: &str, v: &str) -> Result<f64> {
            v.parse()
                .map_err(|_| PilotError::Format(format!("'{}': expected number, got '{}'", key, v)))
        }
        fn bool_of(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(PilotError::Format(format!(
                    "'{}': expected boolean, got '{}'",
                    key, v
                ))),
            }
        }
        let e = &mut self.model.extractor;
        let n = &mut self.model.encoder;
        match key {
            "extractor.conv_filters" => e.conv_filters = usize_of(key, value)?,
            "extractor.pool_widths" => {
                let parts: Vec<&str> = value.split(',').map(|s| s.trim()).collect();
                if parts.len() != 3 {
                    return Err(PilotError::Format(format!(
                        "'{}': expected three comma-separated integers",
                        key
                    )));
                }
                for (i, p) in parts.iter().enumerate() {
                    e.pool_widths[i] = usize_of(key, p)?;
                }
            }
            "extractor.fc_hidden" => e.fc_hidden = usize_of(key, value)?,
            "extractor.num_sources" => e.num_sources = usize_of(key, value)?,
            "extractor.feature_dim" => e.feature_dim = usize_of(key, value)?,
            "extractor.in_channels" => e.in_channels = usize_of(key, value)?,
            "extractor.frames" => e.frames = usize_of(key, value)?,
            "extractor.freq_bins" => e.freq_bins = usize_of(key, value)?,
            "encoder.layers" => n.layers = usize_of(key, value)?,
            "encoder.heads" => n.heads = usize_of(key, value)?,
            "encoder.model_dim" => n.model_dim = usize_of(key, value)?,
            "encoder.ff_dim" => n.ff_dim = usize_of(key, value)?,
            "train.batch_size" => self.train.batch_size = usize_of(key, value)?,
            "train.base_lr" => self.train.base_lr = f64_of(key, value)?,
            "train.epochs" => self.train.epochs = usize_of(key, value)?,
            "train.warmup_steps" => self.train.warmup_steps = usize_of(key, value)?,
            "train.weight_decay" => self.train.weight_decay = f64_of(key, value)?,
            "train.grad_clip" => self.train.grad_clip = f64_of(key, value)?,
            "train.seed" => self.train.seed = u64_of(key, value)?,
            "loss.alpha" => self.loss.alpha = f64_of(key, value)?,
            "loss.beta" => self.loss.beta = f64_of(key, value)?,
            "loss.conventional_great_circle" => {
                self.loss.conventional_great_circle = bool_of(key, value)?
            }
            "scene.duration_s" => self.scene.duration_s = f64_of(key, value)?,
            "scene.max_overlap" => self.scene.max_overlap = usize_of(key, value)?,
            "scene.num_events" => self.scene.num_events = usize_of(key, value)?,
            "scene.event_duration_min_s" => self.scene.event_duration_s.0 = f64_of(key, value)?,
            "scene.event_duration_max_s" => self.scene.event_duration_s.1 = f64_of(key, value)?,
            "scene.elevation_min_rad" => self.scene.elevation_range_rad.0 = f64_of(key, value)?,
            "scene.elevation_max_rad" => self.scene.elevation_range_rad.1 = f64_of(key, value)?,
            "scene.snr_db" => self.scene.snr_db = f64_of(key, value)?,
            "scene.seed" => self.scene.seed = u64_of(key, value)?,
            "dataset.num_scenes" => self.num_scenes = usize_of(key, value)?,
            "dataset.num_folds" => self.num_folds = usize_of(key, value)?,
            other => {
                return Err(PilotError::Format(format!(
                    "unknown configuration key '{}'",
                    other
                )))
            }
        }
        Ok(())
    }

    /// Render the fully resolved configuration in the same format the parser
    /// accepts; logged at startup so runs are reproducible from the log.
    pub fn render(&self) -> String {
        let e = &self.model.extractor;
        let n = &self.model.encoder;
        let mut s = String::new();
        let _ = writeln!(s, "extractor.conv_filters = {}", e.conv_filters);
        let _ = writeln!(
            s,
            "extractor.pool_widths = {},{},{}",
            e.pool_widths[0], e.pool_widths[1], e.pool_widths[2]
        );
        let _ = writeln!(s, "extractor.fc_hidden = {}", e.fc_hidden);
        let _ = writeln!(s, "extractor.num_sources = {}", e.num_sources);
        let _ = writeln!(s, "extractor.feature_dim = {}", e.feature_dim);
        let _ = writeln!(s, "extractor.in_channels = {}", e.in_channels);
        let _ = writeln!(s, "extractor.frames = {}", e.frames);
        let _ = writeln!(s, "extractor.freq_bins = {}", e.freq_bins);
        let _ = writeln!(s, "encoder.layers = {}", n.layers);
        let _ = writeln!(s, "encoder.heads = {}", n.heads);
        let _ = writeln!(s, "encoder.model_dim = {}", n.model_dim);
        let _ = writeln!(s, "encoder.ff_dim = {}", n.ff_dim);
        let _ = writeln!(s, "train.batch_size = {}", self.train.batch_size);
        let _ = writeln!(s, "train.base_lr = {}", self.train.base_lr);
        let _ = writeln!(s, "train.epochs = {}", self.train.epochs);
        let _ = writeln!(s, "train.warmup_steps = {}", self.train.warmup_steps);
        let _ = writeln!(s, "train.weight_decay = {}", self.train.weight_decay);
        let _ = writeln!(s, "train.grad_clip = {}", self.train.grad_clip);
        let _ = writeln!(s, "train.seed = {}", self.train.seed);
        let _ = writeln!(s, "loss.alpha = {}", self.loss.alpha);
        let _ = writeln!(s, "loss.beta = {}", self.loss.beta);
        let _ = writeln!(
            s,
            "loss.conventional_great_circle = {}",
            self.loss.conventional_great_circle
        );
        let _ = writeln!(s, "scene.duration_s = {}", self.scene.duration_s);
        let _ = writeln!(s, "scene.max_overlap = {}", self.scene.max_overlap);
        let _ = writeln!(s, "scene.num_events = {}", self.scene.num_events);
        let _ = writeln!(
            s,
            "scene.event_duration_min_s = {}",
            self.scene.event_duration_s.0
        );
        let _ = writeln!(
            s,
            "scene.event_duration_max_s = {}",
            self.scene.event_duration_s.1
        );
        let _ = writeln!(
            s,
            "scene.elevation_min_rad = {}",
            self.scene.elevation_range_rad.0
        );
        let _ = writeln!(
            s,
            "scene.elevation_max_rad = {}",
            self.scene.elevation_range_rad.1
        );
        let _ = writeln!(s, "scene.snr_db = {}", self.scene.snr_db);
        let _ = writeln!(s, "scene.seed = {}", self.scene.seed);
        let _ = writeln!(s, "dataset.num_scenes = {}", self.num_scenes);
        let _ = writeln!(s, "dataset.num_folds = {}", self.num_folds);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_module_defaults() {
        let c = Config::defaults();
        assert_eq!(c.model.encoder.model_dim, 64);
        assert_eq!(c.train.batch_size, 256);
        assert_eq!(c.scene.num_events, 12);
    }

    #[test]
    fn parses_keys_comments_and_blanks() {
        let mut c = Config::defaults();
        c.apply_text(
            "# a comment\n\nencoder.model_dim = 32  # inline comment\ntrain.base_lr = 0.01\nloss.conventional_great_circle = true\nextractor.pool_widths = 4, 4, 2\n",
        )
        .unwrap();
        assert_eq!(c.model.encoder.model_dim, 32);
        assert_eq!(c.train.base_lr, 0.01);
        assert!(c.loss.conventional_great_circle);
        assert_eq!(c.model.extractor.pool_widths, [4, 4, 2]);
    }

    #[test]
    fn rejects_unknown_key() {
        let mut c = Config::defaults();
        let err = c.apply_text("encoder.depth = 3\n").unwrap_err();
        assert!(err.to_string().contains("unknown configuration key"));
    }

    #[test]
    fn rejects_bad_value_and_bad_syntax() {
        let mut c = Config::defaults();
        assert!(c.apply_text("train.epochs = many\n").is_err());
        assert!(c.apply_text("just some words\n").is_err());
    }

    #[test]
    fn overrides_win_over_file_values() {
        let mut c = Config::defaults();
        c.apply_text("train.epochs = 10\n").unwrap();
        c.apply_overrides(&["train.epochs=20".to_string()]).unwrap();
        assert_eq!(c.train.epochs, 20);
        assert!(c.apply_overrides(&["nonsense".to_string()]).is_err());
    }

    #[test]
    fn render_round_trips() {
        let mut c = Config::defaults();
        c.set("encoder.model_dim", "32").unwrap();
        c.set("scene.snr_db", "12.5").unwrap();
        let text = c.render();
        let mut d = Config::defaults();
        d.apply_text(&text).unwrap();
        assert_eq!(d.model.encoder.model_dim, 32);
        assert_eq!(d.scene.snr_db, 12.5);
        assert_eq!(d.render(), text);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "encoder.layers = 2\ntrain.seed = 9\n").unwrap();
        let c = Config::from_file(&path).unwrap();
        assert_eq!(c.model.encoder.layers, 2);
        assert_eq!(c.train.seed, 9);
    }
}
