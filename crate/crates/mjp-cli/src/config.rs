//! Flat key=value run configuration.
//!
//! Unknown keys are rejected outright; every run embeds its resolved config
//! (canonical text) in reports and checkpoints, keyed by a content hash.

use sha2::{Digest, Sha256};

use mjp_core::embed::DalVariant;
use mjp_core::model::{TrainHyper, VariantFlags, ViTConfig};

use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    Oblivious,
    Aware,
}

impl EvalMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "oblivious" => Ok(EvalMode::Oblivious),
            "aware" => Ok(EvalMode::Aware),
            other => Err(CliError::config(format!("unknown eval mode {other:?}"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            EvalMode::Oblivious => "oblivious",
            EvalMode::Aware => "aware",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DalChoice {
    None,
    Linear,
    Mlp,
    Pca,
}

impl DalChoice {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(DalChoice::None),
            "ln" => Ok(DalChoice::Linear),
            "nln" => Ok(DalChoice::Mlp),
            "pca" => Ok(DalChoice::Pca),
            other => Err(CliError::config(format!("unknown dal variant {other:?}"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            DalChoice::None => "none",
            DalChoice::Linear => "ln",
            DalChoice::Mlp => "nln",
            DalChoice::Pca => "pca",
        }
    }

    pub fn to_variant(self) -> Option<DalVariant> {
        match self {
            DalChoice::None => None,
            DalChoice::Linear => Some(DalVariant::Linear),
            DalChoice::Mlp => Some(DalVariant::Mlp),
            DalChoice::Pca => Some(DalVariant::Pca),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    // model
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub classes: usize,
    // mjp pipeline
    pub gamma: f64,
    pub lambda: f64,
    pub dal: DalChoice,
    pub jp: bool,
    pub unk: bool,
    pub idx: bool,
    pub spp: bool,
    pub pe_free: bool,
    pub normalized_coords: bool,
    pub dal_all_rows: bool,
    pub min_block_area: usize,
    // optimizer / schedule
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub warmup_epochs: usize,
    // run
    pub seed: u64,
    pub eval_gamma: f64,
    pub eval_mode: EvalMode,
    pub eval_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            image_h: 32,
            image_w: 32,
            channels: 3,
            patch: 4,
            dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            classes: 4,
            gamma: 0.15,
            lambda: 0.01,
            dal: DalChoice::Mlp,
            jp: true,
            unk: true,
            idx: false,
            spp: false,
            pe_free: false,
            normalized_coords: true,
            dal_all_rows: false,
            min_block_area: 2,
            epochs: 30,
            batch_size: 50,
            lr: 1e-3,
            min_lr: 1e-5,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            warmup_epochs: 3,
            seed: 42,
            eval_gamma: 0.15,
            eval_mode: EvalMode::Oblivious,
            eval_seed: 7777,
        }
    }
}

macro_rules! config_keys {
    ($self:ident, $on:ident) => {
        $on!(image_h, usize);
        $on!(image_w, usize);
        $on!(channels, usize);
        $on!(patch, usize);
        $on!(dim, usize);
        $on!(depth, usize);
        $on!(heads, usize);
        $on!(mlp_ratio, usize);
        $on!(classes, usize);
        $on!(gamma, f64);
        $on!(lambda, f64);
        $on!(jp, bool);
        $on!(unk, bool);
        $on!(idx, bool);
        $on!(spp, bool);
        $on!(pe_free, bool);
        $on!(normalized_coords, bool);
        $on!(dal_all_rows, bool);
        $on!(min_block_area, usize);
        $on!(epochs, usize);
        $on!(batch_size, usize);
        $on!(lr, f64);
        $on!(min_lr, f64);
        $on!(weight_decay, f64);
        $on!(beta1, f64);
        $on!(beta2, f64);
        $on!(adam_eps, f64);
        $on!(warmup_epochs, usize);
        $on!(seed, u64);
        $on!(eval_gamma, f64);
        $on!(eval_seed, u64);
    };
}

impl RunConfig {
    /// Parses `key = value` lines (# comments allowed) on top of `base`.
    /// Unknown keys are an error.
    pub fn parse_onto(base: RunConfig, text: &str) -> Result<RunConfig> {
        let mut cfg = base;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::config(format!("line {}: expected key=value", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            cfg.set(key, value)
                .map_err(|e| CliError::config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        Self::parse_onto(RunConfig::default(), text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        macro_rules! on {
            ($field:ident, usize) => {
                if key == stringify!($field) {
                    self.$field = value
                        .parse::<usize>()
                        .map_err(|_| CliError::config(format!("bad usize for {key}: {value}")))?;
                    return Ok(());
                }
            };
            ($field:ident, u64) => {
                if key == stringify!($field) {
                    self.$field = value
                        .parse::<u64>()
                        .map_err(|_| CliError::config(format!("bad u64 for {key}: {value}")))?;
                    return Ok(());
                }
            };
            ($field:ident, f64) => {
                if key == stringify!($field) {
                    self.$field = value
                        .parse::<f64>()
                        .map_err(|_| CliError::config(format!("bad float for {key}: {value}")))?;
                    return Ok(());
                }
            };
            ($field:ident, bool) => {
                if key == stringify!($field) {
                    self.$field = match value {
                        "true" | "1" => true,
                        "false" | "0" => false,
                        _ => {
                            return Err(CliError::config(format!("bad bool for {key}: {value}")))
                        }
                    };
                    return Ok(());
                }
            };
        }
        config_keys!(self, on);
        match key {
            "dal" => {
                self.dal = DalChoice::parse(value)?;
                Ok(())
            }
            "eval_mode" => {
                self.eval_mode = EvalMode::parse(value)?;
                Ok(())
            }
            "variant" => self.apply_variant(value),
            _ => Err(CliError::config(format!("unknown key {key:?}"))),
        }
    }

    /// Canonical text form: every key, fixed order.
    pub fn to_canonical_string(&self) -> String {
        let mut out = String::new();
        macro_rules! on {
            ($field:ident, bool) => {
                out.push_str(&format!("{} = {}\n", stringify!($field), self.$field));
            };
            ($field:ident, $ty:ident) => {
                out.push_str(&format!("{} = {}\n", stringify!($field), self.$field));
            };
        }
        config_keys!(self, on);
        out.push_str(&format!("dal = {}\n", self.dal.as_str()));
        out.push_str(&format!("eval_mode = {}\n", self.eval_mode.as_str()));
        out
    }

    /// Hex-truncated sha256 of the canonical text.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_canonical_string().as_bytes());
        digest
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Ablation rows A..J of the variant matrix.
    pub fn apply_variant(&mut self, letter: &str) -> Result<()> {
        let (jp, unk, idx, spp, pe_free, dal) = match letter {
            "A" | "a" => (false, false, false, false, false, DalChoice::None),
            "B" | "b" => (false, false, false, false, true, DalChoice::None),
            "C" | "c" => (false, false, false, true, false, DalChoice::None),
            "D" | "d" => (false, false, false, false, false, DalChoice::Mlp),
            "E" | "e" => (true, false, false, false, false, DalChoice::None),
            "F" | "f" => (true, false, true, false, false, DalChoice::None),
            "G" | "g" => (true, true, false, false, false, DalChoice::None),
            "H" | "h" => (true, true, false, false, false, DalChoice::Pca),
            "I" | "i" => (true, true, false, false, false, DalChoice::Linear),
            "J" | "j" => (true, true, false, false, false, DalChoice::Mlp),
            other => return Err(CliError::config(format!("unknown variant {other:?}"))),
        };
        self.jp = jp;
        self.unk = unk;
        self.idx = idx;
        self.spp = spp;
        self.pe_free = pe_free;
        self.dal = dal;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.vit_config().validate()?;
        if self.spp && self.dal != DalChoice::None {
            return Err(CliError::config(
                "spp scrambles patch contents; disable dal for this variant",
            ));
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.eval_gamma) {
            return Err(CliError::config("gamma values must lie in [0, 1]"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(CliError::config("batch_size and epochs must be positive"));
        }
        Ok(())
    }

    pub fn vit_config(&self) -> ViTConfig {
        ViTConfig {
            image_h: self.image_h,
            image_w: self.image_w,
            channels: self.channels,
            patch: self.patch,
            dim: self.dim,
            depth: self.depth,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            classes: self.classes,
        }
    }

    pub fn flags(&self) -> VariantFlags {
        VariantFlags {
            jp: self.jp,
            unk: self.unk,
            idx: self.idx,
            spp: self.spp,
        }
    }

    pub fn hyper(&self) -> TrainHyper {
        TrainHyper {
            gamma: self.gamma,
            lambda: self.lambda,
            min_block_area: self.min_block_area,
            dal_all_rows: self.dal_all_rows,
            normalized_coords: self.normalized_coords,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_canonical_text() {
        let cfg = RunConfig::default();
        let text = cfg.to_canonical_string();
        let parsed = RunConfig::parse(&text).unwrap();
        assert_eq!(cfg, parsed);
        assert_eq!(cfg.hash(), parsed.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("learning_rate = 0.1").is_err());
        assert!(RunConfig::parse("gamma = 0.2\nnot_a_key = 3").is_err());
    }

    #[test]
    fn comments_and_blank_lines_are_fine() {
        let cfg = RunConfig::parse("# a comment\n\ngamma = 0.27 # inline\n").unwrap();
        assert_eq!(cfg.gamma, 0.27);
    }

    #[test]
    fn variant_letters_set_the_flag_matrix() {
        let mut cfg = RunConfig::default();
        cfg.apply_variant("B").unwrap();
        assert!(cfg.pe_free && !cfg.jp);
        cfg.apply_variant("G").unwrap();
        assert!(cfg.jp && cfg.unk && cfg.dal == DalChoice::None && !cfg.pe_free);
        cfg.apply_variant("J").unwrap();
        assert!(cfg.jp && cfg.unk && cfg.dal == DalChoice::Mlp);
        assert!(cfg.apply_variant("K").is_err());
    }

    #[test]
    fn spp_with_dal_conflicts() {
        let mut cfg = RunConfig::default();
        cfg.spp = true;
        cfg.dal = DalChoice::Linear;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        b.gamma = 0.27;
        assert_ne!(a.hash(), b.hash());
    }
}
