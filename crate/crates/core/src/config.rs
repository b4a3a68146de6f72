//! Flat run configuration: UTF-8 `key = value` lines with `#` comments and
//! dotted keys. Every key has a default; unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::bmuf::BmufConfig;
use crate::conditioning::CategoricalSpec;
use crate::corpus::CorpusProfile;
use crate::decode::BeamConfig;
use crate::error::{Error, Result};
use crate::harness::{parse_setups, HarnessConfig, SetupId};
use crate::model::ModelConfig;
use crate::scalar::Precision;
use crate::trainer::{MwerConfig, Optimizer, SpecAugmentConfig, TrainConfig};

/// `(key, default, description)`.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "7", "master seed for corpus, initialization and shuffling"),
    ("out", "runs", "output directory"),
    ("precision", "f64", "training precision: f32 or f64"),
    ("corpus.manifest", "", "existing manifest to load instead of generating"),
    ("corpus.hours_per_utt", "8", "resource-table hours represented by one training utterance"),
    ("corpus.min_train", "12", "minimum training utterances per cell"),
    ("corpus.dev", "15", "dev utterances per cell"),
    ("corpus.test", "40", "test utterances per cell"),
    ("corpus.vocab_size", "16", "synthetic symbol inventory size"),
    ("corpus.ambiguity", "0.5", "fraction of symbols whose sound differs by dialect"),
    ("corpus.noise", "0.8", "frame noise standard deviation"),
    ("corpus.d_feat", "16", "feature dimension"),
    ("corpus.min_tokens", "3", "shortest utterance in symbols"),
    ("corpus.max_tokens", "6", "longest utterance in symbols"),
    ("corpus.branching", "3", "successors per symbol in each domain grammar"),
    ("bpe.merges", "0", "BPE merge operations"),
    ("bpe.model", "", "tokenizer file for decode/eval/finetune"),
    ("model.preset", "desk", "desk or paper"),
    ("model.enc_layers", "", "override encoder layers"),
    ("model.enc_cells", "", "override encoder cells per direction"),
    ("model.enc_proj", "", "override encoder projection"),
    ("model.reduction", "", "override frame reduction factor"),
    ("model.att_heads", "", "override attention heads"),
    ("model.att_dim", "", "override attention dimension"),
    ("model.dec_layers", "", "override decoder layers"),
    ("model.dec_cells", "", "override decoder cells"),
    ("model.vocab_size", "", "override output vocabulary (paper preset only)"),
    ("model.d_feat", "", "override input dimension (paper preset only)"),
    ("model.inject", "none", "none, encoder, decoder or both"),
    ("model.emb_dim", "", "override categorical embedding width"),
    ("model.enc_inj", "", "override encoder injection width"),
    ("model.dec_inj", "", "override decoder injection width"),
    ("train.lr", "0.1", "initial learning rate"),
    ("train.lr_decay", "0.8", "decay factor on validation plateau"),
    ("train.min_lr", "0.0001", "stop once the learning rate falls below this"),
    ("train.momentum", "0.9", "local SGD momentum"),
    ("train.label_smoothing", "0.05", "label smoothing weight"),
    ("train.sched_sampling", "0.1", "scheduled sampling probability"),
    ("train.grad_clip", "5", "global gradient norm threshold (0 disables)"),
    ("train.epochs", "20", "epoch budget"),
    ("train.batch_size", "8", "utterances per step"),
    ("train.dev_cer", "false", "log greedy dev CER every epoch"),
    ("train.specaug.time_masks", "1", "time masks per utterance"),
    ("train.specaug.max_time_frac", "0.1", "largest time mask as a fraction of the length"),
    ("train.specaug.freq_masks", "1", "feature masks per utterance"),
    ("train.specaug.max_freq_frac", "0.25", "largest feature mask as a fraction of the dimension"),
    ("train.mwer.epochs", "0", "MWER epochs after cross-entropy training"),
    ("train.mwer.nbest", "4", "MWER n-best size"),
    ("train.mwer.ce_weight", "0.05", "cross-entropy weight during MWER"),
    ("train.mwer.lr", "0.01", "MWER learning rate"),
    ("train.finetune_epochs", "5", "epoch budget of dialect/domain fine-tuning"),
    ("bmuf.workers", "1", "simulated workers; 1 trains with plain SGD"),
    ("bmuf.block_steps", "8", "local steps per block"),
    ("bmuf.momentum", "auto", "block momentum, auto = 0.9*(1-1/W)"),
    ("bmuf.block_lr", "1", "block learning rate"),
    ("bmuf.nesterov", "false", "Nesterov-style block updates"),
    ("decode.beam", "8", "beam size"),
    ("decode.len_penalty", "0.1", "length penalty exponent"),
    ("decode.max_len", "0", "decode step limit (0 = 2T+10)"),
    ("setup.ids", "S2,S5", "setups for run-matrix"),
    ("setup.warm_start", "", "joint checkpoint for fine-tuned setups"),
    ("checkpoint", "", "model checkpoint for finetune/decode/eval"),
    ("finetune.dialect", "", "dialect id for finetune"),
    ("finetune.domain", "", "optional domain id for finetune"),
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

fn known(key: &str) -> bool {
    KEYS.iter().any(|(k, _, _)| *k == key)
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !known(key) {
            return Err(Error::Config(format!("unknown config key `{key}`")));
        }
        self.values.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    pub fn parse_text(&mut self, text: &str, path: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split_once('#').map_or(raw, |(a, _)| a).trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: "expected `key = value`".into(),
            })?;
            self.set(k.trim(), v).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        self.parse_text(&text, path)
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("all keys have defaults")
    }

    fn typed<V: FromStr>(&self, key: &str) -> Result<V> {
        let v = self.get(key);
        v.parse()
            .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
    }

    fn opt<V: FromStr>(&self, key: &str) -> Result<Option<V>> {
        if self.get(key).is_empty() {
            Ok(None)
        } else {
            self.typed(key).map(Some)
        }
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.get(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    pub fn seed(&self) -> Result<u64> {
        self.typed("seed")
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.get("out"))
    }

    pub fn precision(&self) -> Result<Precision> {
        self.typed("precision")
    }

    pub fn manifest(&self) -> Option<PathBuf> {
        self.path("corpus.manifest")
    }

    pub fn bpe_model(&self) -> Option<PathBuf> {
        self.path("bpe.model")
    }

    pub fn checkpoint(&self) -> Option<PathBuf> {
        self.path("checkpoint")
    }

    pub fn warm_start(&self) -> Option<PathBuf> {
        self.path("setup.warm_start")
    }

    pub fn bpe_merges(&self) -> Result<usize> {
        self.typed("bpe.merges")
    }

    pub fn setups(&self) -> Result<Vec<SetupId>> {
        parse_setups(self.get("setup.ids"))
    }

    pub fn finetune_target(&self) -> Result<(usize, Option<usize>)> {
        let d = self
            .opt("finetune.dialect")?
            .ok_or_else(|| Error::Config("finetune needs `finetune.dialect`".into()))?;
        Ok((d, self.opt("finetune.domain")?))
    }

    pub fn corpus_profile(&self) -> Result<CorpusProfile> {
        let mut p = CorpusProfile::dialect_skew(
            self.typed("corpus.hours_per_utt")?,
            self.typed("corpus.min_train")?,
            self.typed("corpus.dev")?,
            self.typed("corpus.test")?,
        );
        p.vocab_size = self.typed("corpus.vocab_size")?;
        p.ambiguity = self.typed("corpus.ambiguity")?;
        p.noise = self.typed("corpus.noise")?;
        p.d_feat = self.typed("corpus.d_feat")?;
        p.min_tokens = self.typed("corpus.min_tokens")?;
        p.max_tokens = self.typed("corpus.max_tokens")?;
        p.branching = self.typed("corpus.branching")?;
        p.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(p)
    }

    /// Model configuration; `vocab_size` and `d_feat` come from the data for
    /// the desk preset.
    pub fn model_config(&self, vocab_size: usize, d_feat: usize) -> Result<ModelConfig> {
        let mut c = match self.get("model.preset") {
            "desk" => ModelConfig::desk(vocab_size, d_feat),
            "paper" => ModelConfig::paper(),
            other => return Err(Error::Config(format!("unknown model preset `{other}` (desk, paper)"))),
        };
        let fields: [(&str, &mut usize); 10] = [
            ("model.enc_layers", &mut c.enc_layers),
            ("model.enc_cells", &mut c.enc_cells),
            ("model.enc_proj", &mut c.enc_proj),
            ("model.reduction", &mut c.reduction),
            ("model.att_heads", &mut c.att_heads),
            ("model.att_dim", &mut c.att_dim),
            ("model.dec_layers", &mut c.dec_layers),
            ("model.dec_cells", &mut c.dec_cells),
            ("model.enc_inj", &mut c.cond_enc_dim),
            ("model.dec_inj", &mut c.cond_dec_dim),
        ];
        for (k, f) in fields {
            if let Some(v) = self.opt(k)? {
                *f = v;
            }
        }
        if let Some(v) = self.opt("model.vocab_size")? {
            c.vocab_size = v;
        }
        if let Some(v) = self.opt("model.d_feat")? {
            c.d_feat = v;
        }
        if let Some(e) = self.opt::<usize>("model.emb_dim")? {
            c.cond = CategoricalSpec::dialect_domain(e);
        }
        c.inject = self.typed("model.inject")?;
        c.validate()?;
        Ok(c)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let c = TrainConfig {
            lr: self.typed("train.lr")?,
            lr_decay: self.typed("train.lr_decay")?,
            min_lr: self.typed("train.min_lr")?,
            momentum: self.typed("train.momentum")?,
            label_smoothing: self.typed("train.label_smoothing")?,
            sched_sampling: self.typed("train.sched_sampling")?,
            grad_clip: self.typed("train.grad_clip")?,
            specaug: SpecAugmentConfig {
                time_masks: self.typed("train.specaug.time_masks")?,
                max_time_frac: self.typed("train.specaug.max_time_frac")?,
                freq_masks: self.typed("train.specaug.freq_masks")?,
                max_freq_frac: self.typed("train.specaug.max_freq_frac")?,
            },
            mwer: MwerConfig {
                epochs: self.typed("train.mwer.epochs")?,
                nbest: self.typed("train.mwer.nbest")?,
                ce_weight: self.typed("train.mwer.ce_weight")?,
                lr: self.typed("train.mwer.lr")?,
                len_penalty: self.typed("decode.len_penalty")?,
            },
            epochs: self.typed("train.epochs")?,
            batch_size: self.typed("train.batch_size")?,
            seed: self.seed()?,
            log_dev_cer: self.typed("train.dev_cer")?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn optimizer(&self) -> Result<Optimizer> {
        let workers: usize = self.typed("bmuf.workers")?;
        if workers <= 1 {
            return Ok(Optimizer::Sgd);
        }
        let momentum = match self.get("bmuf.momentum") {
            "auto" => None,
            _ => Some(self.typed("bmuf.momentum")?),
        };
        let c = BmufConfig {
            workers,
            block_steps: self.typed("bmuf.block_steps")?,
            momentum,
            block_lr: self.typed("bmuf.block_lr")?,
            nesterov: self.typed("bmuf.nesterov")?,
        };
        c.validate()?;
        Ok(Optimizer::Bmuf(c))
    }

    pub fn beam_config(&self) -> Result<BeamConfig> {
        let max_len: usize = self.typed("decode.max_len")?;
        let c = BeamConfig {
            beam: self.typed("decode.beam")?,
            len_penalty: self.typed("decode.len_penalty")?,
            max_len: (max_len > 0).then_some(max_len),
        };
        if c.beam == 0 {
            return Err(Error::Config("decode.beam must be at least 1".into()));
        }
        Ok(c)
    }

    pub fn harness(&self, vocab_size: usize, d_feat: usize) -> Result<HarnessConfig> {
        Ok(HarnessConfig {
            model: self.model_config(vocab_size, d_feat)?,
            train: self.train_config()?,
            finetune_epochs: self.typed("train.finetune_epochs")?,
            optimizer: self.optimizer()?,
            beam: self.beam_config()?,
            bpe_merges: self.bpe_merges()?,
            seed: self.seed()?,
        })
    }

    /// Fully resolved configuration, one `key = value` per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, _, _) in KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k));
        }
        s
    }

    /// Defaults with their descriptions, as a commented config file.
    pub fn documented_defaults() -> String {
        let mut s = String::new();
        for (k, v, doc) in KEYS {
            let _ = writeln!(s, "# {doc}\n{k} = {v}");
        }
        s
    }
}
