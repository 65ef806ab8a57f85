use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::combiner::{CombinerKind, ModalityMask};
use crate::data::{Split, StyleCatalog};
use crate::error::{Error, Result};
use crate::generative::GenConfig;
use crate::persist::config_hash;
use crate::retrieval::{MaskMode, RetrievalConfig};
use crate::service::ModelKind;

pub const SEED_ENV: &str = "IMAGECHAT_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Tiny,
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    #[default]
    Model,
    Oracle,
    Random,
    Ir,
}

/// Every setting a run can use. Loaded from an optional JSON file, then
/// overridden by `IMAGECHAT_SEED` and finally by command-line flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub catalog: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub gen_checkpoint: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    pub pretrained: Option<PathBuf>,
    pub pairs: Option<PathBuf>,
    pub igc: Option<PathBuf>,
    pub responses_a: Option<PathBuf>,
    pub responses_b: Option<PathBuf>,
    pub preferences: Option<PathBuf>,
    pub transcript: Option<PathBuf>,

    pub preset: Preset,
    pub width: usize,
    pub combiner: CombinerKind,
    pub shared_encoders: bool,
    pub min_freq: usize,

    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub max_steps: usize,
    pub eval_every: usize,
    pub patience: usize,
    pub modality_mask: String,
    pub k_negatives: Option<usize>,
    pub target_loss: Option<f64>,

    pub split: Split,
    pub scorer: ScorerKind,
    pub n_candidates: usize,
    pub zero_fill: bool,
    pub beam_size: Option<usize>,
    pub trigram_block: Option<bool>,
    pub max_decode_len: Option<usize>,

    pub image: Option<String>,
    pub style: Option<String>,
    pub style_human: Option<String>,
    pub kind: ModelKind,
    pub addr: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            command: String::new(),
            seed: 0,
            out_dir: PathBuf::from("out"),
            catalog: None,
            data: None,
            features: None,
            checkpoint: None,
            gen_checkpoint: None,
            checkpoint_dir: None,
            pretrained: None,
            pairs: None,
            igc: None,
            responses_a: None,
            responses_b: None,
            preferences: None,
            transcript: None,
            preset: Preset::Tiny,
            width: 32,
            combiner: CombinerKind::MmSum,
            shared_encoders: false,
            min_freq: 1,
            batch_size: None,
            lr: None,
            max_steps: 1000,
            eval_every: 0,
            patience: 3,
            modality_mask: "full".into(),
            k_negatives: None,
            target_loss: None,
            split: Split::Test,
            scorer: ScorerKind::Model,
            n_candidates: 100,
            zero_fill: false,
            beam_size: None,
            trigram_block: None,
            max_decode_len: None,
            image: None,
            style: None,
            style_human: None,
            kind: ModelKind::Retrieval,
            addr: "127.0.0.1:8080".into(),
        }
    }
}

/// Flags shared by every subcommand; each one overrides the config file.
#[derive(Clone, Debug, Default, Args)]
pub struct Overrides {
    /// JSON config file; flags take precedence over its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub catalog: Option<PathBuf>,
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    #[arg(long, global = true)]
    pub features: Option<PathBuf>,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    pub gen_checkpoint: Option<PathBuf>,
    /// Directory of per-mask checkpoints named `<mask>.ckpt`, e.g. `image+style.ckpt`.
    #[arg(long, global = true)]
    pub checkpoint_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub pretrained: Option<PathBuf>,
    #[arg(long, global = true)]
    pub pairs: Option<PathBuf>,
    #[arg(long, global = true)]
    pub igc: Option<PathBuf>,
    #[arg(long, global = true)]
    pub responses_a: Option<PathBuf>,
    #[arg(long, global = true)]
    pub responses_b: Option<PathBuf>,
    #[arg(long, global = true)]
    pub preferences: Option<PathBuf>,
    #[arg(long, global = true)]
    pub transcript: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long, global = true)]
    pub width: Option<usize>,
    /// mm_sum or mm_att.
    #[arg(long, global = true)]
    pub combiner: Option<String>,
    #[arg(long, global = true)]
    pub shared_encoders: Option<bool>,
    #[arg(long, global = true)]
    pub min_freq: Option<usize>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub max_steps: Option<usize>,
    #[arg(long, global = true)]
    pub eval_every: Option<usize>,
    #[arg(long, global = true)]
    pub patience: Option<usize>,
    /// Comma-separated subset of image, style, dialogue; or `full`.
    #[arg(long, global = true)]
    pub modality_mask: Option<String>,
    #[arg(long, global = true)]
    pub k_negatives: Option<usize>,
    #[arg(long, global = true)]
    pub target_loss: Option<f64>,
    /// train, valid or test.
    #[arg(long, global = true)]
    pub split: Option<String>,
    #[arg(long, global = true, value_enum)]
    pub scorer: Option<ScorerKind>,
    #[arg(long, global = true)]
    pub n_candidates: Option<usize>,
    /// Ablate by zero-filling excluded modalities instead of omitting them.
    #[arg(long, global = true)]
    pub zero_fill: Option<bool>,
    #[arg(long, global = true)]
    pub beam_size: Option<usize>,
    #[arg(long, global = true)]
    pub trigram_block: Option<bool>,
    #[arg(long, global = true)]
    pub max_decode_len: Option<usize>,
    #[arg(long, global = true)]
    pub image: Option<String>,
    #[arg(long, global = true)]
    pub style: Option<String>,
    #[arg(long, global = true)]
    pub style_human: Option<String>,
    /// retrieval or generative.
    #[arg(long, global = true)]
    pub kind: Option<String>,
    #[arg(long, global = true)]
    pub addr: Option<String>,
}

macro_rules! set {
    ($cfg:ident, $o:ident, $($f:ident),*) => {
        $(if let Some(v) = $o.$f.clone() { $cfg.$f = v; })*
    };
}

macro_rules! set_opt {
    ($cfg:ident, $o:ident, $($f:ident),*) => {
        $(if let Some(v) = $o.$f.clone() { $cfg.$f = Some(v); })*
    };
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    /// File, then `env_seed`, then flags.
    pub fn resolve(command: &str, o: &Overrides, env_seed: Option<&str>) -> Result<Self> {
        let mut cfg = match &o.config {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        cfg.command = command.to_string();
        if let Some(s) = env_seed {
            cfg.seed = s.trim().parse().map_err(|_| Error::config(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
        }
        set!(cfg, o, seed, out_dir, width, min_freq, max_steps, eval_every, patience, modality_mask, n_candidates, zero_fill, addr);
        set!(cfg, o, shared_encoders, preset, scorer);
        set_opt!(cfg, o, catalog, data, features, checkpoint, gen_checkpoint, checkpoint_dir, pretrained, pairs, igc);
        set_opt!(cfg, o, responses_a, responses_b, preferences, transcript, batch_size, lr, k_negatives, target_loss);
        set_opt!(cfg, o, beam_size, trigram_block, max_decode_len, image, style, style_human);
        if let Some(c) = &o.combiner {
            cfg.combiner = c.parse()?;
        }
        if let Some(s) = &o.split {
            cfg.split = s.parse()?;
        }
        if let Some(k) = &o.kind {
            cfg.kind = match k.as_str() {
                "retrieval" => ModelKind::Retrieval,
                "generative" => ModelKind::Generative,
                _ => return Err(Error::config(format!("unknown model kind {k:?}"))),
            };
        }
        cfg.mask()?;
        Ok(cfg)
    }

    pub fn mask(&self) -> Result<ModalityMask> {
        self.modality_mask.parse()
    }

    pub fn mask_mode(&self) -> MaskMode {
        if self.zero_fill {
            MaskMode::ZeroFill
        } else {
            MaskMode::Omit
        }
    }

    /// Hash over every setting except the output directory, so reruns
    /// elsewhere produce comparable artifacts.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(m) = &mut v {
            m.remove("out_dir");
        }
        config_hash(&v)
    }

    /// Writes `config.json` into the output directory and returns the hash.
    pub fn write_snapshot(&self) -> Result<String> {
        fs::create_dir_all(&self.out_dir).map_err(|e| Error::io(&self.out_dir, e))?;
        let hash = self.hash();
        let snap = json!({"config": self, "config_hash": hash, "seed": self.seed});
        write_json(&self.out_dir.join("config.json"), &snap)?;
        Ok(hash)
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    pub fn load_catalog(&self) -> Result<StyleCatalog> {
        match &self.catalog {
            Some(p) => StyleCatalog::load(p),
            None => {
                log::warn!("no --catalog given; using the 10-trait miniature catalog");
                Ok(StyleCatalog::miniature())
            }
        }
    }

    pub fn retrieval_config(&self, vocab_size: usize, n_styles: usize) -> Result<RetrievalConfig> {
        let mut c = match self.preset {
            Preset::Tiny => RetrievalConfig::tiny(vocab_size, n_styles, self.width),
            Preset::Full => RetrievalConfig::full(vocab_size, n_styles),
        };
        c.combiner = self.combiner;
        c.text.shared_response_encoder = self.shared_encoders;
        c.validate()?;
        Ok(c)
    }

    pub fn gen_config(&self, vocab_size: usize) -> Result<GenConfig> {
        let mut c = match self.preset {
            Preset::Tiny => GenConfig::tiny(vocab_size, self.width),
            Preset::Full => GenConfig::full(vocab_size),
        };
        if let Some(b) = self.beam_size {
            c.beam_size = b;
        }
        if let Some(t) = self.trigram_block {
            c.trigram_block = t;
        }
        if let Some(m) = self.max_decode_len {
            c.max_decode_len = m;
        }
        if let Some(b) = self.batch_size {
            c.batch_size = b;
        }
        if let Some(lr) = self.lr {
            c.lr = lr;
        }
        c.validate()?;
        Ok(c)
    }
}

/// Path from an optional setting, or a startup error naming the flag.
pub fn require<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::config(format!("missing required input --{flag}")))
}

pub fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn write_jsonl<S: Serialize>(path: &Path, rows: impl IntoIterator<Item = S>) -> Result<()> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(&r)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_env_beat_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"seed": 3, "max_steps": 7, "lr": 0.5}"#).unwrap();
        let mut o = Overrides { config: Some(p), ..Default::default() };
        let c = RunConfig::resolve("eval", &o, None).unwrap();
        assert_eq!((c.seed, c.max_steps, c.lr), (3, 7, Some(0.5)));
        assert_eq!(RunConfig::resolve("eval", &o, Some("9")).unwrap().seed, 9);
        o.seed = Some(11);
        o.max_steps = Some(8);
        let c = RunConfig::resolve("eval", &o, Some("9")).unwrap();
        assert_eq!((c.seed, c.max_steps), (11, 8));
        assert!(RunConfig::resolve("eval", &Overrides::default(), Some("x")).is_err());
    }

    #[test]
    fn unknown_keys_and_bad_masks_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"sead": 3}"#).unwrap();
        assert!(RunConfig::resolve("eval", &Overrides { config: Some(p), ..Default::default() }, None).is_err());
        let o = Overrides { modality_mask: Some("image,smell".into()), ..Default::default() };
        assert!(RunConfig::resolve("eval", &o, None).is_err());
    }

    #[test]
    fn hash_ignores_out_dir_only() {
        let a = RunConfig::default();
        let b = RunConfig { out_dir: "elsewhere".into(), ..RunConfig::default() };
        let c = RunConfig { seed: 1, ..RunConfig::default() };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }
}
