//! Parsers for the structured flag values: tokenizer choices, template
//! choices, init sources, adapter settings, and shot counts.

use std::path::PathBuf;
use std::str::FromStr;

use bitextlm_core::model::parse_targets;
use bitextlm_core::model::AdapterConfig;
use bitextlm_core::sft::PromptTemplate;
use bitextlm_core::tokenize::{ByteTokenizer, Tokenizer, WordTokenizer};
use bitextlm_core::Result;

/// `byte` or `vocab:PATH` (one word per line).
#[derive(Debug, Clone)]
pub enum TokenizerArg {
    Byte,
    Vocab(PathBuf),
}

impl FromStr for TokenizerArg {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "byte" {
            Ok(TokenizerArg::Byte)
        } else if let Some(path) = s.strip_prefix("vocab:") {
            Ok(TokenizerArg::Vocab(PathBuf::from(path)))
        } else {
            Err(format!("expected `byte` or `vocab:PATH`, got {s:?}"))
        }
    }
}

impl TokenizerArg {
    pub fn build(&self) -> Result<Box<dyn Tokenizer>> {
        Ok(match self {
            TokenizerArg::Byte => Box::new(ByteTokenizer),
            TokenizerArg::Vocab(path) => Box::new(WordTokenizer::load(path)?),
        })
    }
}

/// `enja`, `jaen`, or `file:PATH` (JSON template file).
#[derive(Debug, Clone)]
pub enum TemplateArg {
    EnJa,
    JaEn,
    File(PathBuf),
}

impl FromStr for TemplateArg {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "enja" => Ok(TemplateArg::EnJa),
            "jaen" => Ok(TemplateArg::JaEn),
            _ => match s.strip_prefix("file:") {
                Some(path) => Ok(TemplateArg::File(PathBuf::from(path))),
                None => Err(format!("expected `enja`, `jaen`, or `file:PATH`, got {s:?}")),
            },
        }
    }
}

impl TemplateArg {
    pub fn load(&self) -> Result<PromptTemplate> {
        Ok(match self {
            TemplateArg::EnJa => PromptTemplate::en_to_ja(),
            TemplateArg::JaEn => PromptTemplate::ja_to_en(),
            TemplateArg::File(path) => PromptTemplate::load(path)?,
        })
    }
}

/// `random` or `ckpt:PATH`.
#[derive(Debug, Clone)]
pub enum InitArg {
    Random,
    Ckpt(PathBuf),
}

impl FromStr for InitArg {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "random" {
            Ok(InitArg::Random)
        } else if let Some(path) = s.strip_prefix("ckpt:") {
            Ok(InitArg::Ckpt(PathBuf::from(path)))
        } else {
            Err(format!("expected `random` or `ckpt:PATH`, got {s:?}"))
        }
    }
}

/// `r=16,alpha=32,dropout=0.05[,targets=q/k/v]`; omitted keys keep the
/// defaults (rank 16, alpha 32, dropout 0.05, targets q/k/v).
#[derive(Debug, Clone)]
pub struct AdapterArg(pub AdapterConfig);

impl FromStr for AdapterArg {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let mut cfg = AdapterConfig::default();
        for part in s.split(',').filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| format!("adapter setting {part:?} is not key=value"))?;
            match key {
                "r" => cfg.r = value.parse().map_err(|e| format!("adapter r: {e}"))?,
                "alpha" => cfg.alpha = value.parse().map_err(|e| format!("adapter alpha: {e}"))?,
                "dropout" => {
                    cfg.dropout = value.parse().map_err(|e| format!("adapter dropout: {e}"))?
                }
                "targets" => cfg.targets = parse_targets(value).map_err(|e| e.to_string())?,
                _ => return Err(format!("unknown adapter setting {key:?}")),
            }
        }
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(AdapterArg(cfg))
    }
}

/// `0` for zero-shot or `K:PATH` for K in-context examples from a pair file.
#[derive(Debug, Clone)]
pub enum ShotsArg {
    Zero,
    Few(usize, PathBuf),
}

impl FromStr for ShotsArg {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "0" {
            return Ok(ShotsArg::Zero);
        }
        let (k, path) = s
            .split_once(':')
            .ok_or_else(|| format!("expected `0` or `K:PATH`, got {s:?}"))?;
        let k: usize = k.parse().map_err(|e| format!("shot count: {e}"))?;
        if k == 0 {
            return Err("a shot file needs a positive count; use plain `0` for zero-shot".into());
        }
        Ok(ShotsArg::Few(k, PathBuf::from(path)))
    }
}
