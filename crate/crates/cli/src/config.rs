//! Flat `section.key=value` run configuration.

use std::fmt::Write as _;
use std::fmt::{self, Display};
use std::path::PathBuf;
use std::str::FromStr;

use msinet_core::data::{Policy, SyntheticConfig};
use msinet_core::losses::{SamMode, TRIPLET_MARGIN};
use msinet_core::space::{Fusion, InteractionOp, SpaceConfig};
use msinet_core::tcm::{Scheme, SplitConfig, DEFAULT_BETA, DEFAULT_TAU};

use crate::CliError;

/// Bundled hyperparameters. `desk` shrinks images, widths and epochs to a
/// CPU; `full` keeps the full resolution, widths and 350-epoch schedules.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Full,
}

impl Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Desk => "desk",
            Preset::Full => "full",
        })
    }
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "desk" => Ok(Preset::Desk),
            "full" => Ok(Preset::Full),
            other => Err(format!("unknown preset {other:?} (expected desk or full)")),
        }
    }
}

/// Which architecture `train` builds.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ArchChoice {
    /// The preset searched architecture.
    Msinet,
    /// A random operation per slot, drawn from the run seed.
    Random,
    /// One operation at every slot.
    Fixed(InteractionOp),
    /// A descriptor file, such as the one written by `search`.
    File(PathBuf),
}

impl Display for ArchChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ArchChoice::Msinet => f.write_str("msinet"),
            ArchChoice::Random => f.write_str("random"),
            ArchChoice::Fixed(op) => write!(f, "fixed:{}", op.code()),
            ArchChoice::File(p) => write!(f, "{}", p.display()),
        }
    }
}

impl FromStr for ArchChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "" => Err("architecture must not be empty".into()),
            "msinet" => Ok(ArchChoice::Msinet),
            "random" => Ok(ArchChoice::Random),
            _ => match s.strip_prefix("fixed:") {
                Some(code) => {
                    let mut chars = code.chars();
                    match (chars.next(), chars.next()) {
                        (Some(c), None) => InteractionOp::from_code(c).map(ArchChoice::Fixed).map_err(|e| e.to_string()),
                        _ => Err(format!("expected fixed:<N|E|G|A>, got {s:?}")),
                    }
                }
                None => Ok(ArchChoice::File(PathBuf::from(s))),
            },
        }
    }
}

/// Ablation axis swept by the `sweep` command.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    /// Depth of the large-scale branch.
    Rho,
    /// Weight of the alignment loss.
    Lambda,
    /// How the two branches are fused.
    Fusion,
    /// Train/val identity percentages, written `train/val`; runs a search per value.
    Overlap,
}

impl Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::Rho => "rho",
            SweepAxis::Lambda => "lambda",
            SweepAxis::Fusion => "fusion",
            SweepAxis::Overlap => "overlap",
        })
    }
}

impl FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "rho" => Ok(SweepAxis::Rho),
            "lambda" => Ok(SweepAxis::Lambda),
            "fusion" => Ok(SweepAxis::Fusion),
            "overlap" => Ok(SweepAxis::Overlap),
            other => Err(format!("unknown sweep axis {other:?} (expected rho, lambda, fusion or overlap)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchSection {
    pub epochs: usize,
    pub lr_weights: f64,
    pub lr_arch: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub arch_beta1: f64,
    pub arch_beta2: f64,
    pub tau: f64,
    pub beta: f64,
    pub p: usize,
    pub k: usize,
    pub scheme: Scheme,
    pub policy: Policy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSection {
    pub arch: ArchChoice,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub margin: f64,
    pub sam_mode: SamMode,
    pub sam_lambda: f64,
    pub p: usize,
    pub k: usize,
    pub policy: Policy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    /// Seed for model initialization, sampling, augmentation and splits.
    pub seed: u64,
    /// Load this manifest instead of generating synthetic data.
    pub manifest: Option<PathBuf>,
    /// Synthetic data; its seed is the `data.seed` key.
    pub data: SyntheticConfig,
    pub split: (u32, u32),
    /// Network shape; image size always comes from the dataset.
    pub space: SpaceConfig,
    pub search: SearchSection,
    pub train: TrainSection,
    pub max_rank: usize,
    /// Checkpoint evaluated by `eval`, relative to the output directory.
    pub checkpoint: PathBuf,
    pub sweep_axis: Option<SweepAxis>,
    pub sweep_values: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let split = SplitConfig::default();
        let (space, data, epochs) = match preset {
            Preset::Desk => (SpaceConfig::desk(), SyntheticConfig::default(), 60),
            Preset::Full => {
                let space = SpaceConfig::full();
                let data = SyntheticConfig { height: space.height, width: space.width, ..SyntheticConfig::default() };
                (space, data, 350)
            }
        };
        RunConfig {
            preset,
            seed: 0,
            manifest: None,
            data,
            split: (split.train_pct, split.val_pct),
            space,
            search: SearchSection {
                epochs,
                lr_weights: 0.025,
                lr_arch: 0.002,
                momentum: 0.9,
                weight_decay: 5e-4,
                arch_beta1: 0.5,
                arch_beta2: 0.999,
                tau: DEFAULT_TAU,
                beta: DEFAULT_BETA,
                p: 8,
                k: 4,
                scheme: Scheme::Tcm,
                policy: Policy::Supervised,
            },
            train: TrainSection {
                arch: ArchChoice::Msinet,
                epochs,
                lr: 0.065,
                momentum: 0.9,
                weight_decay: 5e-4,
                margin: TRIPLET_MARGIN,
                sam_mode: SamMode::PamSelf,
                sam_lambda: 2.0,
                p: 8,
                k: 4,
                policy: Policy::Supervised,
            },
            max_rank: 10,
            checkpoint: PathBuf::from("model.json"),
            sweep_axis: None,
            sweep_values: Vec::new(),
        }
    }

    /// Every key with its current value, in echo order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let d = &self.data;
        let s = &self.search;
        let t = &self.train;
        let w = self.space.widths;
        vec![
            ("preset", self.preset.to_string()),
            ("seed", self.seed.to_string()),
            ("data.manifest", self.manifest.as_ref().map_or(String::new(), |p| p.display().to_string())),
            ("data.seed", d.seed.to_string()),
            ("data.num_ids", d.num_ids.to_string()),
            ("data.num_train_ids", d.num_train_ids.to_string()),
            ("data.imgs_per_id", d.imgs_per_id.to_string()),
            ("data.num_views", d.num_views.to_string()),
            ("data.height", d.height.to_string()),
            ("data.width", d.width.to_string()),
            ("data.brightness", d.brightness.to_string()),
            ("data.translation", d.translation.to_string()),
            ("data.background", d.background.to_string()),
            ("data.noise", d.noise.to_string()),
            ("split.train_pct", self.split.0.to_string()),
            ("split.val_pct", self.split.1.to_string()),
            ("space.stem_width", self.space.stem_width.to_string()),
            ("space.widths", format!("{},{},{}", w[0], w[1], w[2])),
            ("space.embedding", self.space.embedding.to_string()),
            ("space.rho", self.space.rho.to_string()),
            ("space.fusion", self.space.fusion.to_string()),
            ("space.reduction", self.space.reduction.to_string()),
            ("search.epochs", s.epochs.to_string()),
            ("search.lr_weights", s.lr_weights.to_string()),
            ("search.lr_arch", s.lr_arch.to_string()),
            ("search.momentum", s.momentum.to_string()),
            ("search.weight_decay", s.weight_decay.to_string()),
            ("search.arch_beta1", s.arch_beta1.to_string()),
            ("search.arch_beta2", s.arch_beta2.to_string()),
            ("search.tau", s.tau.to_string()),
            ("search.beta", s.beta.to_string()),
            ("search.p", s.p.to_string()),
            ("search.k", s.k.to_string()),
            ("search.scheme", s.scheme.to_string()),
            ("search.policy", s.policy.to_string()),
            ("train.arch", t.arch.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.momentum", t.momentum.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.margin", t.margin.to_string()),
            ("train.sam_mode", t.sam_mode.to_string()),
            ("train.sam_lambda", t.sam_lambda.to_string()),
            ("train.p", t.p.to_string()),
            ("train.k", t.k.to_string()),
            ("train.policy", t.policy.to_string()),
            ("eval.max_rank", self.max_rank.to_string()),
            ("eval.checkpoint", self.checkpoint.display().to_string()),
            ("sweep.axis", self.sweep_axis.map_or(String::new(), |a| a.to_string())),
            ("sweep.values", self.sweep_values.join(",")),
        ]
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn p<T: FromStr>(v: &str) -> Result<T, String>
        where
            T::Err: Display,
        {
            v.parse::<T>().map_err(|e| format!("cannot parse {v:?}: {e}"))
        }
        let d = &mut self.data;
        let s = &mut self.search;
        let t = &mut self.train;
        match key {
            "preset" => {
                let preset: Preset = p(value)?;
                if preset != self.preset {
                    return Err(format!("conflicts with preset {}", self.preset));
                }
            }
            "seed" => self.seed = p(value)?,
            "data.manifest" => self.manifest = (!value.is_empty()).then(|| PathBuf::from(value)),
            "data.seed" => d.seed = p(value)?,
            "data.num_ids" => d.num_ids = p(value)?,
            "data.num_train_ids" => d.num_train_ids = p(value)?,
            "data.imgs_per_id" => d.imgs_per_id = p(value)?,
            "data.num_views" => d.num_views = p(value)?,
            "data.height" => d.height = p(value)?,
            "data.width" => d.width = p(value)?,
            "data.brightness" => d.brightness = p(value)?,
            "data.translation" => d.translation = p(value)?,
            "data.background" => d.background = p(value)?,
            "data.noise" => d.noise = p(value)?,
            "split.train_pct" => self.split.0 = p(value)?,
            "split.val_pct" => self.split.1 = p(value)?,
            "space.stem_width" => self.space.stem_width = p(value)?,
            "space.widths" => {
                let parts = value.split(',').map(|x| p::<usize>(x.trim())).collect::<Result<Vec<_>, _>>()?;
                self.space.widths = parts.try_into().map_err(|_| "expected three comma-separated widths".to_string())?;
            }
            "space.embedding" => self.space.embedding = p(value)?,
            "space.rho" => self.space.rho = p(value)?,
            "space.fusion" => self.space.fusion = p::<Fusion>(value)?,
            "space.reduction" => self.space.reduction = p(value)?,
            "search.epochs" => s.epochs = p(value)?,
            "search.lr_weights" => s.lr_weights = p(value)?,
            "search.lr_arch" => s.lr_arch = p(value)?,
            "search.momentum" => s.momentum = p(value)?,
            "search.weight_decay" => s.weight_decay = p(value)?,
            "search.arch_beta1" => s.arch_beta1 = p(value)?,
            "search.arch_beta2" => s.arch_beta2 = p(value)?,
            "search.tau" => s.tau = p(value)?,
            "search.beta" => s.beta = p(value)?,
            "search.p" => s.p = p(value)?,
            "search.k" => s.k = p(value)?,
            "search.scheme" => s.scheme = p(value)?,
            "search.policy" => s.policy = p(value)?,
            "train.arch" => t.arch = p(value)?,
            "train.epochs" => t.epochs = p(value)?,
            "train.lr" => t.lr = p(value)?,
            "train.momentum" => t.momentum = p(value)?,
            "train.weight_decay" => t.weight_decay = p(value)?,
            "train.margin" => t.margin = p(value)?,
            "train.sam_mode" => t.sam_mode = p(value)?,
            "train.sam_lambda" => t.sam_lambda = p(value)?,
            "train.p" => t.p = p(value)?,
            "train.k" => t.k = p(value)?,
            "train.policy" => t.policy = p(value)?,
            "eval.max_rank" => self.max_rank = p(value)?,
            "eval.checkpoint" => {
                if value.is_empty() {
                    return Err("checkpoint path must not be empty".into());
                }
                self.checkpoint = PathBuf::from(value);
            }
            "sweep.axis" => self.sweep_axis = if value.is_empty() { None } else { Some(p(value)?) },
            "sweep.values" => {
                self.sweep_values =
                    value.split(',').map(str::trim).filter(|v| !v.is_empty()).map(String::from).collect();
            }
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Range checks that single keys cannot express; names the offending key.
    pub fn validate(&self) -> Result<(), (String, String)> {
        let bad = |key: &str, msg: String| Err((key.to_string(), msg));
        if let Err(e) = self.data.validate() {
            return bad("data", e.to_string());
        }
        let split = SplitConfig { train_pct: self.split.0, val_pct: self.split.1, seed: 0 };
        if let Err(e) = split.validate() {
            return bad("split", e.to_string());
        }
        let space = SpaceConfig { height: self.data.height, width: self.data.width, ..self.space.clone() };
        if self.manifest.is_none() {
            if let Err(e) = space.validate() {
                return bad("space", e.to_string());
            }
        }
        for (key, v) in [("search.epochs", self.search.epochs), ("train.epochs", self.train.epochs), ("eval.max_rank", self.max_rank)]
        {
            if v == 0 {
                return bad(key, "must be at least 1".into());
            }
        }
        for (key, p, k) in [("search", self.search.p, self.search.k), ("train", self.train.p, self.train.k)] {
            if p < 2 || k < 2 {
                return bad(&format!("{key}.p"), format!("PK batches need P ≥ 2 and K ≥ 2, got {p}x{k}"));
            }
        }
        let positive = [
            ("search.lr_weights", self.search.lr_weights),
            ("search.lr_arch", self.search.lr_arch),
            ("search.tau", self.search.tau),
            ("train.lr", self.train.lr),
        ];
        for (key, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return bad(key, format!("must be positive, got {v}"));
            }
        }
        let unit = [
            ("search.momentum", self.search.momentum),
            ("search.arch_beta1", self.search.arch_beta1),
            ("search.arch_beta2", self.search.arch_beta2),
            ("train.momentum", self.train.momentum),
        ];
        for (key, v) in unit {
            if !(0.0..1.0).contains(&v) {
                return bad(key, format!("must lie in [0, 1), got {v}"));
            }
        }
        if !(self.search.beta > 0.0 && self.search.beta < 1.0) {
            return bad("search.beta", format!("must lie in (0, 1), got {}", self.search.beta));
        }
        let non_negative = [
            ("search.weight_decay", self.search.weight_decay),
            ("train.weight_decay", self.train.weight_decay),
            ("train.margin", self.train.margin),
            ("train.sam_lambda", self.train.sam_lambda),
        ];
        for (key, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(key, format!("must be non-negative, got {v}"));
            }
        }
        if self.sweep_axis.is_some() != !self.sweep_values.is_empty() {
            return bad("sweep.values", "sweep.axis and sweep.values must be set together".into());
        }
        Ok(())
    }

    /// The resolved configuration, one `key=value` per line. Parsing it
    /// reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            writeln!(out, "{k}={v}").unwrap();
        }
        out
    }

    /// Split percentages with the run seed.
    pub fn split_config(&self) -> SplitConfig {
        SplitConfig { train_pct: self.split.0, val_pct: self.split.1, seed: self.seed }
    }
}

/// One line of config text: blank, a comment, or a setting.
fn setting(raw: &str) -> Option<Result<(&str, &str), String>> {
    let line = raw.trim();
    if line.is_empty() || line.starts_with('#') {
        return None;
    }
    Some(match line.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim(), v.trim())),
        _ => Err(format!("expected key=value, got {line:?}")),
    })
}

/// Parses config text, then applies `overrides` (`key=value` strings) in
/// order. A `preset` line, wherever it appears, chooses the defaults before
/// any other key is applied.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<RunConfig, CliError> {
    let err = |location: String, msg: String| CliError::Config(format!("{location}: {msg}"));
    let mut settings = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        match setting(raw) {
            None => {}
            Some(Ok((k, v))) => settings.push((format!("line {}", n + 1), k.to_string(), v.to_string())),
            Some(Err(msg)) => return Err(err(format!("line {}", n + 1), msg)),
        }
    }
    for o in overrides {
        match setting(o) {
            Some(Ok((k, v))) => settings.push((format!("--set {o}"), k.to_string(), v.to_string())),
            _ => return Err(err(format!("--set {o:?}"), "expected key=value".into())),
        }
    }
    let presets: Vec<_> = settings.iter().filter(|(_, k, _)| k == "preset").collect();
    let mut cfg = match presets.last() {
        Some((loc, _, v)) => RunConfig::preset(v.parse().map_err(|m| err(loc.clone(), format!("preset: {m}")))?),
        None => RunConfig::default(),
    };
    for (loc, k, v) in &settings {
        cfg.set(k, v).map_err(|m| err(loc.clone(), format!("{k}: {m}")))?;
    }
    cfg.validate().map_err(|(k, m)| err(k, m))?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_desk_defaults() {
        let cfg = parse_config("", &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.search.epochs, 60);
        assert_eq!(cfg.split, (60, 80));
    }

    #[test]
    fn echo_round_trips() {
        for preset in [Preset::Desk, Preset::Full] {
            let mut cfg = RunConfig::preset(preset);
            cfg.train.arch = ArchChoice::Fixed(InteractionOp::ChannelGate);
            cfg.sweep_axis = Some(SweepAxis::Lambda);
            cfg.sweep_values = vec!["0".into(), "0.5".into()];
            cfg.search.lr_arch = 0.1 + 0.2;
            cfg.manifest = Some("some/manifest.tsv".into());
            assert_eq!(parse_config(&cfg.to_text(), &[]).unwrap(), cfg);
        }
    }

    #[test]
    fn arch_choices_parse() {
        assert_eq!("msinet".parse::<ArchChoice>().unwrap(), ArchChoice::Msinet);
        assert_eq!("fixed:A".parse::<ArchChoice>().unwrap(), ArchChoice::Fixed(InteractionOp::CrossAttention));
        assert!("fixed:Q".parse::<ArchChoice>().is_err());
        assert!("fixed:GG".parse::<ArchChoice>().is_err());
        assert_eq!("out/descriptor.txt".parse::<ArchChoice>().unwrap(), ArchChoice::File("out/descriptor.txt".into()));
    }
}
