//! Pipeline configuration: `key = value` files plus `--key=value`
//! overrides. Later sources win, so CLI > file > defaults.

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use sha2::{Digest, Sha256};

use crate::data::SplitConfig;
use crate::embed::RemoteConfig;
use crate::error::{Error, Result};
use crate::kg_text::PromptConfig;
use crate::trainer::{AblationFlags, ModelConfig, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbedMode {
    Mock,
    File,
    Remote,
}

impl EmbedMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EmbedMode::Mock => "mock",
            EmbedMode::File => "file",
            EmbedMode::Remote => "remote",
        }
    }
}

impl FromStr for EmbedMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mock" => Ok(EmbedMode::Mock),
            "file" => Ok(EmbedMode::File),
            "remote" => Ok(EmbedMode::Remote),
            _ => Err("expected mock, file or remote".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub interactions: Option<PathBuf>,
    pub triples: Option<PathBuf>,
    pub item_map: Option<PathBuf>,
    pub work_dir: PathBuf,

    pub kcore: usize,
    pub split: SplitConfig,
    pub prompts: PromptConfig,

    pub embed_mode: EmbedMode,
    pub d_s: usize,
    /// Pre-computed table for file mode.
    pub embed_file: Option<PathBuf>,
    /// Pre-computed table without second-order context, file mode only.
    pub embed_file_no_second_order: Option<PathBuf>,
    /// Also build the table used by the second-order ablation.
    pub embed_no_second_order: bool,
    pub cache_dir: Option<PathBuf>,
    pub parallelism: usize,
    pub remote: RemoteConfig,

    pub k: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ks: Vec<usize>,
    pub sweep_ks: Vec<usize>,

    /// 0 lets the thread pool pick.
    pub threads: usize,
    pub deterministic: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let seed = 2024;
        Self {
            interactions: None,
            triples: None,
            item_map: None,
            work_dir: PathBuf::from("work"),
            kcore: 5,
            split: SplitConfig {
                seed,
                ..SplitConfig::default()
            },
            prompts: PromptConfig {
                seed,
                ..PromptConfig::default()
            },
            embed_mode: EmbedMode::Mock,
            d_s: 1024,
            embed_file: None,
            embed_file_no_second_order: None,
            embed_no_second_order: true,
            cache_dir: None,
            parallelism: 4,
            remote: RemoteConfig::default(),
            k: 20,
            model: ModelConfig::default(),
            train: TrainConfig {
                seed,
                ..TrainConfig::default()
            },
            ks: vec![10, 20],
            sweep_ks: vec![0, 5, 10, 20, 50],
            threads: 0,
            deterministic: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key} = {value:?}: {e}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn show_list(xs: &[usize]) -> String {
    xs.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl PipelineConfig {
    /// Defaults, then `file` (if any), then `overrides` in order.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            cfg.apply_text(&text, path)?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(origin, i + 1, "expected `key = value`"))?;
            self.set(k.trim(), v.trim()).map_err(|e| match e {
                Error::Config(msg) => Error::parse(origin, i + 1, msg),
                e => e,
            })?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "interactions" => self.interactions = opt_path(value),
            "triples" => self.triples = opt_path(value),
            "item_map" => self.item_map = opt_path(value),
            "work_dir" => self.work_dir = PathBuf::from(value),
            "seed" => {
                let seed = parse(key, value)?;
                self.split.seed = seed;
                self.prompts.seed = seed;
                self.train.seed = seed;
            }
            "kcore" => self.kcore = parse(key, value)?,
            "train_ratio" => self.split.train_ratio = parse(key, value)?,
            "val_ratio" => self.split.val_ratio_of_train = parse(key, value)?,
            "prompt_m" => self.prompts.m = parse(key, value)?,
            "char_budget" => self.prompts.char_budget = parse(key, value)?,
            "embed_mode" => self.embed_mode = parse(key, value)?,
            "d_s" => {
                self.d_s = parse(key, value)?;
                self.remote.dim = self.d_s;
            }
            "embed_file" => self.embed_file = opt_path(value),
            "embed_file_no_second_order" => self.embed_file_no_second_order = opt_path(value),
            "embed_no_second_order" => self.embed_no_second_order = parse(key, value)?,
            "cache_dir" => self.cache_dir = opt_path(value),
            "parallelism" => self.parallelism = parse(key, value)?,
            "chat_url" => self.remote.chat_url = value.into(),
            "embed_url" => self.remote.embed_url = value.into(),
            "chat_model" => self.remote.chat_model = value.into(),
            "embed_model" => self.remote.embed_model = value.into(),
            "temperature" => self.remote.temperature = parse(key, value)?,
            "top_p" => self.remote.top_p = parse(key, value)?,
            "chat_messages_field" => self.remote.chat_messages_field = value.into(),
            "chat_response_pointer" => self.remote.chat_response_pointer = value.into(),
            "embed_input_field" => self.remote.embed_input_field = value.into(),
            "embed_response_pointer" => self.remote.embed_response_pointer = value.into(),
            "max_attempts" => self.remote.max_attempts = parse(key, value)?,
            "backoff_ms" => self.remote.backoff = Duration::from_millis(parse(key, value)?),
            "timeout_s" => self.remote.timeout = Duration::from_secs(parse(key, value)?),
            "k" => self.k = parse(key, value)?,
            "d" => self.model.d = parse(key, value)?,
            "d_a" => self.model.d_a = parse(key, value)?,
            "layers" => self.model.layers = parse(key, value)?,
            "lr" => self.train.learning_rate = parse(key, value)?,
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "epochs" => self.train.max_epochs = parse(key, value)?,
            "lambda" => self.train.lambda = parse(key, value)?,
            "dropout" => self.train.dropout = parse(key, value)?,
            "patience" => self.train.patience = parse(key, value)?,
            "eval_k" => self.train.eval_k = parse(key, value)?,
            "no_item_semantic" => self.train.flags.no_item_semantic = parse(key, value)?,
            "no_user_semantic" => self.train.flags.no_user_semantic = parse(key, value)?,
            "no_neighbor_aug" => self.train.flags.no_neighbor_aug = parse(key, value)?,
            "no_second_order" => self.train.flags.no_second_order = parse(key, value)?,
            "ks" => self.ks = parse_list(key, value)?,
            "sweep_ks" => self.sweep_ks = parse_list(key, value)?,
            "threads" => self.threads = parse(key, value)?,
            "deterministic" => self.deterministic = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let bad = |msg: String| Err(Error::Config(msg));
        if self.kcore == 0 {
            return bad("kcore must be at least 1".into());
        }
        if self.d_s == 0 || self.model.d == 0 || self.model.d_a == 0 {
            return bad("d_s, d and d_a must be positive".into());
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return bad("ks must list positive cutoffs".into());
        }
        if self.parallelism == 0 {
            return bad("parallelism must be positive".into());
        }
        if self.embed_mode == EmbedMode::File && self.embed_file.is_none() {
            return bad("embed_mode = file requires embed_file".into());
        }
        Ok(())
    }

    /// Every setting as `(key, value)`, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let f = self.train.flags;
        vec![
            ("interactions", show_path(&self.interactions)),
            ("triples", show_path(&self.triples)),
            ("item_map", show_path(&self.item_map)),
            ("work_dir", self.work_dir.display().to_string()),
            ("seed", self.train.seed.to_string()),
            ("kcore", self.kcore.to_string()),
            ("train_ratio", self.split.train_ratio.to_string()),
            ("val_ratio", self.split.val_ratio_of_train.to_string()),
            ("prompt_m", self.prompts.m.to_string()),
            ("char_budget", self.prompts.char_budget.to_string()),
            ("embed_mode", self.embed_mode.as_str().into()),
            ("d_s", self.d_s.to_string()),
            ("embed_file", show_path(&self.embed_file)),
            ("embed_file_no_second_order", show_path(&self.embed_file_no_second_order)),
            ("embed_no_second_order", self.embed_no_second_order.to_string()),
            ("cache_dir", show_path(&self.cache_dir)),
            ("parallelism", self.parallelism.to_string()),
            ("chat_url", self.remote.chat_url.clone()),
            ("embed_url", self.remote.embed_url.clone()),
            ("chat_model", self.remote.chat_model.clone()),
            ("embed_model", self.remote.embed_model.clone()),
            ("temperature", self.remote.temperature.to_string()),
            ("top_p", self.remote.top_p.to_string()),
            ("chat_messages_field", self.remote.chat_messages_field.clone()),
            ("chat_response_pointer", self.remote.chat_response_pointer.clone()),
            ("embed_input_field", self.remote.embed_input_field.clone()),
            ("embed_response_pointer", self.remote.embed_response_pointer.clone()),
            ("max_attempts", self.remote.max_attempts.to_string()),
            ("backoff_ms", self.remote.backoff.as_millis().to_string()),
            ("timeout_s", self.remote.timeout.as_secs().to_string()),
            ("k", self.k.to_string()),
            ("d", self.model.d.to_string()),
            ("d_a", self.model.d_a.to_string()),
            ("layers", self.model.layers.to_string()),
            ("lr", self.train.learning_rate.to_string()),
            ("batch_size", self.train.batch_size.to_string()),
            ("epochs", self.train.max_epochs.to_string()),
            ("lambda", self.train.lambda.to_string()),
            ("dropout", self.train.dropout.to_string()),
            ("patience", self.train.patience.to_string()),
            ("eval_k", self.train.eval_k.to_string()),
            ("no_item_semantic", f.no_item_semantic.to_string()),
            ("no_user_semantic", f.no_user_semantic.to_string()),
            ("no_neighbor_aug", f.no_neighbor_aug.to_string()),
            ("no_second_order", f.no_second_order.to_string()),
            ("ks", show_list(&self.ks)),
            ("sweep_ks", show_list(&self.sweep_ks)),
            ("threads", self.threads.to_string()),
            ("deterministic", self.deterministic.to_string()),
        ]
    }

    /// Round-trips through [`PipelineConfig::apply_text`].
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 over the settings that influence results. Paths and
    /// thread counts are excluded so moving a work dir keeps it fresh.
    pub fn hash(&self) -> String {
        const IGNORED: [&str; 9] = [
            "interactions",
            "triples",
            "item_map",
            "work_dir",
            "embed_file",
            "embed_file_no_second_order",
            "cache_dir",
            "parallelism",
            "threads",
        ];
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if !IGNORED.contains(&k) {
                h.update(format!("{k}={v}\n"));
            }
        }
        hex::encode(h.finalize())
    }

    pub fn flags(&self) -> AblationFlags {
        self.train.flags
    }
}
