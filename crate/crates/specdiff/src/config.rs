//! Flat `key = value` configuration with train/schedule/denoiser/eval
//! sections. Defaults are written out with inline comments and echoed
//! verbatim into every run manifest.

use crate::denoiser::{DISTORTION_CLIP, FgdConfig};
use crate::error::{Error, Result};
use crate::scheduler::{ScheduleTemplate, SigmaMode, StsWeights};
use crate::training::TrainConfig;

/// How the point forecast is reduced from the sample set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PointForecast {
    #[default]
    Mean,
    Median,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSection {
    pub samples: usize,
    pub point_forecast: PointForecast,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { samples: 100, point_forecast: PointForecast::Mean }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenoiserSection {
    pub bands: usize,
    pub hidden: usize,
    pub gate_hidden: usize,
    pub embed_dim: usize,
    pub r_min: f64,
    pub r_max: f64,
}

impl Default for DenoiserSection {
    fn default() -> Self {
        DenoiserSection {
            bands: 2,
            hidden: 128,
            gate_hidden: 64,
            embed_dim: 64,
            r_min: -DISTORTION_CLIP,
            r_max: DISTORTION_CLIP,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AppConfig {
    pub train: TrainConfig,
    pub sigma_mode: SigmaMode,
    pub clamp_eps: f64,
    pub denoiser: DenoiserSection,
    pub eval: EvalSection,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            train: TrainConfig::default(),
            sigma_mode: SigmaMode::PosteriorBetaTilde,
            clamp_eps: crate::scheduler::DEFAULT_CLAMP_EPS,
            denoiser: DenoiserSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl AppConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.eval.samples < 1 {
            return Err(Error::contract("eval samples must be >= 1"));
        }
        if self.denoiser.r_min != -DISTORTION_CLIP || self.denoiser.r_max != DISTORTION_CLIP {
            return Err(Error::contract(format!(
                "distortion clip bounds are fixed at [{}, {}]",
                -DISTORTION_CLIP,
                DISTORTION_CLIP
            )));
        }
        if !(0.0 < self.clamp_eps && self.clamp_eps < 0.5) {
            return Err(Error::contract("clamp_eps must lie in (0, 0.5)"));
        }
        Ok(())
    }

    pub fn fgd_config(&self, channels: usize) -> FgdConfig {
        FgdConfig {
            history_len: self.train.history_len,
            horizon: self.train.horizon,
            channels,
            bands: self.denoiser.bands,
            hidden: self.denoiser.hidden,
            gate_hidden: self.denoiser.gate_hidden,
            embed_dim: self.denoiser.embed_dim,
        }
    }

    /// Default configuration with inline documentation. Parsing this text
    /// reproduces `AppConfig::default()` exactly.
    pub fn default_text() -> String {
        let d = AppConfig::default();
        let mut out = String::new();
        out.push_str("# training configuration; all values shown are the shipped defaults\n");
        out.push_str("\n[train]\n");
        out.push_str("# optimization\n");
        out.push_str(&format!("epochs = {}\n", d.train.epochs));
        out.push_str("# stage-one alternation rounds (stable for 2..5)\n");
        out.push_str(&format!("alternation_epochs = {}\n", d.train.alternation_epochs));
        out.push_str(&format!("batch_size = {}\n", d.train.batch_size));
        out.push_str(&format!("learning_rate = {}\n", d.train.learning_rate));
        out.push_str(&format!("adam_beta1 = {}\n", d.train.adam_beta1));
        out.push_str(&format!("adam_beta2 = {}\n", d.train.adam_beta2));
        out.push_str(&format!("seed = {}\n", d.train.seed));
        out.push_str("# windowing\n");
        out.push_str(&format!("history_len = {}\n", d.train.history_len));
        out.push_str(&format!("horizon = {}\n", d.train.horizon));
        out.push_str(&format!("stride = {}\n", d.train.stride));
        out.push_str(&format!("split_train = {}\n", d.train.split.0));
        out.push_str(&format!("split_val = {}\n", d.train.split.1));
        out.push_str(&format!("split_test = {}\n", d.train.split.2));
        out.push_str("# early stopping on validation loss\n");
        out.push_str(&format!("patience = {}\n", d.train.patience));
        out.push_str("# set false to keep the template schedule fixed (ablation)\n");
        out.push_str(&format!("learn_schedule = {}\n", d.train.learn_schedule));
        out.push_str("\n[schedule]\n");
        out.push_str(&format!("t_steps = {}\n", d.train.t_steps));
        out.push_str("# template: linear | cosine | quadratic\n");
        out.push_str(&format!("template = {}\n", d.train.template.name()));
        out.push_str(&format!("beta_start = {}\n", d.train.beta_start));
        out.push_str(&format!("beta_end = {}\n", d.train.beta_end));
        out.push_str(&format!("clamp_eps = {}\n", d.clamp_eps));
        out.push_str("# sigma_mode: posterior | beta\n");
        out.push_str("sigma_mode = posterior\n");
        out.push_str("# loss weights (tuning grid: each scanned over {0.1x, 1x, 10x})\n");
        out.push_str(&format!("lambda_smooth = {}\n", d.train.weights.smooth));
        out.push_str(&format!("lambda_init = {}\n", d.train.weights.init));
        out.push_str(&format!("lambda_end = {}\n", d.train.weights.end));
        out.push_str(&format!("lambda_bar = {}\n", d.train.weights.bar));
        out.push_str(&format!("lambda_prog = {}\n", d.train.weights.prog));
        out.push_str(&format!("lambda_obj = {}\n", d.train.weights.obj));
        out.push_str("\n[denoiser]\n");
        out.push_str(&format!("bands = {}\n", d.denoiser.bands));
        out.push_str(&format!("hidden = {}\n", d.denoiser.hidden));
        out.push_str(&format!("gate_hidden = {}\n", d.denoiser.gate_hidden));
        out.push_str(&format!("embed_dim = {}\n", d.denoiser.embed_dim));
        out.push_str("# distortion clip bounds (fixed)\n");
        out.push_str(&format!("r_min = {}\n", d.denoiser.r_min));
        out.push_str(&format!("r_max = {}\n", d.denoiser.r_max));
        out.push_str("\n[eval]\n");
        out.push_str(&format!("samples = {}\n", d.eval.samples));
        out.push_str("# point_forecast: mean | median\n");
        out.push_str("point_forecast = mean\n");
        out
    }

    /// Canonical comment-free echo for manifests: parsing it reproduces the
    /// configuration exactly.
    pub fn echo_text(&self) -> String {
        let mut out = String::new();
        out.push_str("[train]\n");
        out.push_str(&format!("epochs = {}\n", self.train.epochs));
        out.push_str(&format!("alternation_epochs = {}\n", self.train.alternation_epochs));
        out.push_str(&format!("batch_size = {}\n", self.train.batch_size));
        out.push_str(&format!("learning_rate = {}\n", self.train.learning_rate));
        out.push_str(&format!("adam_beta1 = {}\n", self.train.adam_beta1));
        out.push_str(&format!("adam_beta2 = {}\n", self.train.adam_beta2));
        out.push_str(&format!("seed = {}\n", self.train.seed));
        out.push_str(&format!("history_len = {}\n", self.train.history_len));
        out.push_str(&format!("horizon = {}\n", self.train.horizon));
        out.push_str(&format!("stride = {}\n", self.train.stride));
        out.push_str(&format!("split_train = {}\n", self.train.split.0));
        out.push_str(&format!("split_val = {}\n", self.train.split.1));
        out.push_str(&format!("split_test = {}\n", self.train.split.2));
        out.push_str(&format!("patience = {}\n", self.train.patience));
        out.push_str(&format!("learn_schedule = {}\n", self.train.learn_schedule));
        out.push_str("[schedule]\n");
        out.push_str(&format!("t_steps = {}\n", self.train.t_steps));
        out.push_str(&format!("template = {}\n", self.train.template.name()));
        out.push_str(&format!("beta_start = {}\n", self.train.beta_start));
        out.push_str(&format!("beta_end = {}\n", self.train.beta_end));
        out.push_str(&format!("clamp_eps = {}\n", self.clamp_eps));
        out.push_str(&format!(
            "sigma_mode = {}\n",
            match self.sigma_mode {
                SigmaMode::PosteriorBetaTilde => "posterior",
                SigmaMode::Beta => "beta",
            }
        ));
        out.push_str(&format!("lambda_smooth = {}\n", self.train.weights.smooth));
        out.push_str(&format!("lambda_init = {}\n", self.train.weights.init));
        out.push_str(&format!("lambda_end = {}\n", self.train.weights.end));
        out.push_str(&format!("lambda_bar = {}\n", self.train.weights.bar));
        out.push_str(&format!("lambda_prog = {}\n", self.train.weights.prog));
        out.push_str(&format!("lambda_obj = {}\n", self.train.weights.obj));
        out.push_str("[denoiser]\n");
        out.push_str(&format!("bands = {}\n", self.denoiser.bands));
        out.push_str(&format!("hidden = {}\n", self.denoiser.hidden));
        out.push_str(&format!("gate_hidden = {}\n", self.denoiser.gate_hidden));
        out.push_str(&format!("embed_dim = {}\n", self.denoiser.embed_dim));
        out.push_str(&format!("r_min = {}\n", self.denoiser.r_min));
        out.push_str(&format!("r_max = {}\n", self.denoiser.r_max));
        out.push_str("[eval]\n");
        out.push_str(&format!("samples = {}\n", self.eval.samples));
        out.push_str(&format!(
            "point_forecast = {}\n",
            match self.eval.point_forecast {
                PointForecast::Mean => "mean",
                PointForecast::Median => "median",
            }
        ));
        out
    }

    pub fn parse(text: &str) -> Result<AppConfig> {
        let mut cfg = AppConfig::default();
        let mut section = String::new();
        for (line_no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let loc = || format!("config line {}", line_no + 1);
            if line.starts_with('[') && line.ends_with(']') {
                section = line[1..line.len() - 1].to_string();
                match section.as_str() {
                    "train" | "schedule" | "denoiser" | "eval" => continue,
                    other => {
                        return Err(Error::Parse {
                            location: loc(),
                            detail: format!("unknown section '{}'", other),
                        })
                    }
                }
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                location: loc(),
                detail: format!("expected 'key = value', got '{}'", line),
            })?;
            let key = key.trim();
            let value = value.trim();
            apply_key(&mut cfg, &section, key, value).map_err(|e| match e {
                Error::Parse { detail, .. } => Error::Parse { location: loc(), detail },
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<AppConfig> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        AppConfig::parse(&text)
    }
}

fn apply_key(cfg: &mut AppConfig, section: &str, key: &str, value: &str) -> Result<()> {
    let bad = |detail: String| Error::Parse { location: String::new(), detail };
    let as_usize = |v: &str| -> Result<usize> {
        v.parse().map_err(|_| bad(format!("bad integer '{}'", v)))
    };
    let as_f64 =
        |v: &str| -> Result<f64> { v.parse().map_err(|_| bad(format!("bad number '{}'", v))) };
    let as_bool =
        |v: &str| -> Result<bool> { v.parse().map_err(|_| bad(format!("bad boolean '{}'", v))) };
    match (section, key) {
        ("train", "epochs") => cfg.train.epochs = as_usize(value)?,
        ("train", "alternation_epochs") => cfg.train.alternation_epochs = as_usize(value)?,
        ("train", "batch_size") => cfg.train.batch_size = as_usize(value)?,
        ("train", "learning_rate") => cfg.train.learning_rate = as_f64(value)?,
        ("train", "adam_beta1") => cfg.train.adam_beta1 = as_f64(value)?,
        ("train", "adam_beta2") => cfg.train.adam_beta2 = as_f64(value)?,
        ("train", "seed") => cfg.train.seed = as_usize(value)? as u64,
        ("train", "history_len") => cfg.train.history_len = as_usize(value)?,
        ("train", "horizon") => cfg.train.horizon = as_usize(value)?,
        ("train", "stride") => cfg.train.stride = as_usize(value)?,
        ("train", "split_train") => cfg.train.split.0 = as_f64(value)?,
        ("train", "split_val") => cfg.train.split.1 = as_f64(value)?,
        ("train", "split_test") => cfg.train.split.2 = as_f64(value)?,
        ("train", "patience") => cfg.train.patience = as_usize(value)?,
        ("train", "learn_schedule") => cfg.train.learn_schedule = as_bool(value)?,
        ("schedule", "t_steps") => cfg.train.t_steps = as_usize(value)?,
        ("schedule", "template") => cfg.train.template = ScheduleTemplate::parse(value)?,
        ("schedule", "beta_start") => cfg.train.beta_start = as_f64(value)?,
        ("schedule", "beta_end") => cfg.train.beta_end = as_f64(value)?,
        ("schedule", "clamp_eps") => cfg.clamp_eps = as_f64(value)?,
        ("schedule", "sigma_mode") => {
            cfg.sigma_mode = match value {
                "posterior" => SigmaMode::PosteriorBetaTilde,
                "beta" => SigmaMode::Beta,
                other => return Err(bad(format!("unknown sigma_mode '{}'", other))),
            }
        }
        ("schedule", "lambda_smooth") => cfg.train.weights.smooth = as_f64(value)?,
        ("schedule", "lambda_init") => cfg.train.weights.init = as_f64(value)?,
        ("schedule", "lambda_end") => cfg.train.weights.end = as_f64(value)?,
        ("schedule", "lambda_bar") => cfg.train.weights.bar = as_f64(value)?,
        ("schedule", "lambda_prog") => cfg.train.weights.prog = as_f64(value)?,
        ("schedule", "lambda_obj") => cfg.train.weights.obj = as_f64(value)?,
        ("denoiser", "bands") => cfg.denoiser.bands = as_usize(value)?,
        ("denoiser", "hidden") => cfg.denoiser.hidden = as_usize(value)?,
        ("denoiser", "gate_hidden") => cfg.denoiser.gate_hidden = as_usize(value)?,
        ("denoiser", "embed_dim") => cfg.denoiser.embed_dim = as_usize(value)?,
        ("denoiser", "r_min") => cfg.denoiser.r_min = as_f64(value)?,
        ("denoiser", "r_max") => cfg.denoiser.r_max = as_f64(value)?,
        ("eval", "samples") => cfg.eval.samples = as_usize(value)?,
        ("eval", "point_forecast") => {
            cfg.eval.point_forecast = match value {
                "mean" => PointForecast::Mean,
                "median" => PointForecast::Median,
                other => return Err(bad(format!("unknown point_forecast '{}'", other))),
            }
        }
        (s, k) => return Err(bad(format!("unknown key '{}' in section '[{}]'", k, s))),
    }
    Ok(())
}

/// A subset of [`StsWeights`] sanity used by tests and manifest checks.
pub fn default_weights() -> StsWeights {
    StsWeights::default()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_text_parses_to_default_config() {
        let parsed = AppConfig::parse(&AppConfig::default_text()).unwrap();
        assert_eq!(parsed, AppConfig::default());
    }

    #[test]
    fn echo_roundtrip() {
        let mut cfg = AppConfig::default();
        cfg.train.epochs = 20;
        cfg.train.t_steps = 10;
        cfg.train.template = ScheduleTemplate::Cosine;
        cfg.eval.samples = 64;
        cfg.sigma_mode = SigmaMode::Beta;
        let parsed = AppConfig::parse(&cfg.echo_text()).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn defaults_match_shipped_values() {
        let d = AppConfig::default();
        assert_eq!(d.train.weights.smooth, 5.0);
        assert_eq!(d.train.weights.init, 0.5);
        assert_eq!(d.train.weights.end, 0.5);
        assert_eq!(d.train.weights.bar, 5e-3);
        assert_eq!(d.train.weights.prog, 0.5);
        assert_eq!(d.train.weights.obj, 0.01);
        assert_eq!(d.denoiser.r_min, -10.0);
        assert_eq!(d.denoiser.r_max, 10.0);
        assert_eq!(d.denoiser.bands, 2);
        assert_eq!(d.train.learning_rate, 1e-3);
        assert_eq!(d.train.batch_size, 32);
        assert_eq!(d.train.t_steps, 50);
        assert_eq!(d.train.history_len, 168);
        assert_eq!(d.train.beta_start, 1e-5);
        assert_eq!(d.train.beta_end, 0.1);
        assert_eq!(d.eval.samples, 100);
    }

    #[test]
    fn parse_errors_carry_location() {
        let err = AppConfig::parse("[train]\nepochs = banana\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{}", err);
        assert!(AppConfig::parse("[mystery]\n").is_err());
        assert!(AppConfig::parse("[train]\nunknown_key = 1\n").is_err());
        assert!(AppConfig::parse("no equals sign").is_err());
    }

    #[test]
    fn fixed_clip_bounds_enforced() {
        let err = AppConfig::parse("[denoiser]\nr_max = 5\n").unwrap_err();
        assert!(err.to_string().contains("clip"), "{}", err);
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let cfg = AppConfig::parse("# hi\n\n[train]\n# note\nepochs = 7\n").unwrap();
        assert_eq!(cfg.train.epochs, 7);
    }
}
