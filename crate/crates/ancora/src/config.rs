//! Flat dotted-key run configuration.
//!
//! The whole surface is one fixed schema: every key has a default, a
//! type, and a doc line. A config file is `key = value` text, `#`
//! starts a comment line, and command-line overrides go through the
//! same validation, so an unknown or ill-typed key fails identically
//! no matter where it came from. `render_resolved` prints the merged
//! result in schema order for the run snapshot.

use std::collections::BTreeMap;
use std::path::Path;

use crate::checkpoint::Precision;
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::eval::{EvalPrompts, ScoreOptions, ScoringMode, ThresholdPolicy};
use crate::model::{BackboneSpec, ModalityFusion, TrainableScope};
use crate::train::{FeatureMode, TrainConfig};

#[derive(Debug, Clone, Copy)]
enum Kind {
    UInt,
    U64,
    Float,
    Bool,
    Text,
    Choice(&'static [&'static str]),
    /// "none" or a positive real.
    ClipNorm,
    /// "penultimate" or an explicit layer index.
    Layer,
    /// "youden" or a real threshold.
    Threshold,
}

struct KeyDef {
    key: &'static str,
    default: &'static str,
    kind: Kind,
    doc: &'static str,
}

const SCHEMA: &[KeyDef] = &[
    KeyDef {
        key: "model.vocab_size",
        default: "256",
        kind: Kind::UInt,
        doc: "tokenizer bucket count and embedding rows; the generator plants motifs in the same space",
    },
    KeyDef {
        key: "model.hidden_dim",
        default: "32",
        kind: Kind::UInt,
        doc: "decoder width",
    },
    KeyDef {
        key: "model.num_layers",
        default: "2",
        kind: Kind::UInt,
        doc: "decoder blocks, at least 2",
    },
    KeyDef {
        key: "model.max_seq_len",
        default: "96",
        kind: Kind::UInt,
        doc: "position budget per branch input",
    },
    KeyDef {
        key: "model.patch_dim",
        default: "8",
        kind: Kind::UInt,
        doc: "feature length of one image patch; shared by the data generator and the vision projection",
    },
    KeyDef {
        key: "model.fusion",
        default: "prefix_patches",
        kind: Kind::Choice(&["prefix_patches", "none"]),
        doc: "how image patches enter the decoder; 'none' builds a text-only model",
    },
    KeyDef {
        key: "model.trainable_scope",
        default: "full",
        kind: Kind::Choice(&["full", "projections_only", "adapters_only"]),
        doc: "which backbone parameters the optimizer may touch; special-token rows are always trainable",
    },
    KeyDef {
        key: "model.image_tokens",
        default: "4",
        kind: Kind::UInt,
        doc: "learned special tokens appended to the image branch",
    },
    KeyDef {
        key: "model.text_tokens",
        default: "8",
        kind: Kind::UInt,
        doc: "learned special tokens appended to the text branch",
    },
    KeyDef {
        key: "model.layer_index",
        default: "penultimate",
        kind: Kind::Layer,
        doc: "hidden layer features are read from: 'penultimate' or an index in [0, num_layers]",
    },
    KeyDef {
        key: "proj.feature_dim",
        default: "32",
        kind: Kind::UInt,
        doc: "output dimension of every projection head",
    },
    KeyDef {
        key: "proj.depth",
        default: "2",
        kind: Kind::UInt,
        doc: "linear layers per projection head, GELU between",
    },
    KeyDef {
        key: "proj.normalize",
        default: "true",
        kind: Kind::Bool,
        doc: "L2-normalize projected feature rows",
    },
    KeyDef {
        key: "proj.separate_local_heads",
        default: "true",
        kind: Kind::Bool,
        doc: "give local features their own heads instead of reusing the global ones",
    },
    KeyDef {
        key: "train.lr",
        default: "0.005",
        kind: Kind::Float,
        doc: "peak learning rate; the bundled decoder trains from scratch, so this is far above a finetuning rate",
    },
    KeyDef {
        key: "train.weight_decay",
        default: "0.0",
        kind: Kind::Float,
        doc: "decoupled weight decay",
    },
    KeyDef {
        key: "train.schedule",
        default: "cosine",
        kind: Kind::Choice(&["cosine"]),
        doc: "learning-rate shape after warmup",
    },
    KeyDef {
        key: "train.warmup_fraction",
        default: "0.03",
        kind: Kind::Float,
        doc: "share of max_steps spent in linear warmup",
    },
    KeyDef {
        key: "train.batch_size",
        default: "16",
        kind: Kind::UInt,
        doc: "samples per step, at least 2 so in-batch contrast exists",
    },
    KeyDef {
        key: "train.max_steps",
        default: "500",
        kind: Kind::UInt,
        doc: "optimizer steps for the full schedule",
    },
    KeyDef {
        key: "train.tau",
        default: "0.05",
        kind: Kind::Float,
        doc: "softmax temperature shared by both losses",
    },
    KeyDef {
        key: "train.lambda",
        default: "0.5",
        kind: Kind::Float,
        doc: "weight of the cross-alignment loss; 1-lambda goes to the knowledge-grounding loss",
    },
    KeyDef {
        key: "train.seed",
        default: "7",
        kind: Kind::U64,
        doc: "seeds model init, batch order, and projection init",
    },
    KeyDef {
        key: "train.precision",
        default: "fp64",
        kind: Kind::Choice(&["fp64", "fp32"]),
        doc: "parameter storage precision; math is always 64-bit",
    },
    KeyDef {
        key: "train.clip_norm",
        default: "1.0",
        kind: Kind::ClipNorm,
        doc: "global gradient-norm clip, or 'none'",
    },
    KeyDef {
        key: "train.feature_mode",
        default: "both",
        kind: Kind::Choice(&["both", "global_only", "local_only"]),
        doc: "which global/local pairings the cross-alignment loss uses",
    },
    KeyDef {
        key: "train.val_interval",
        default: "50",
        kind: Kind::UInt,
        doc: "steps between validation passes for best-checkpoint selection",
    },
    KeyDef {
        key: "data.classes",
        default: "4",
        kind: Kind::UInt,
        doc: "planted classes in a synthesized dataset",
    },
    KeyDef {
        key: "data.per_class",
        default: "50",
        kind: Kind::UInt,
        doc: "samples generated per class",
    },
    KeyDef {
        key: "data.sigma",
        default: "0.1",
        kind: Kind::Float,
        doc: "noise level on the class patch template",
    },
    KeyDef {
        key: "data.multi_label",
        default: "false",
        kind: Kind::Bool,
        doc: "plant two classes per sample instead of one",
    },
    KeyDef {
        key: "data.patch_count",
        default: "16",
        kind: Kind::UInt,
        doc: "patches per generated image",
    },
    KeyDef {
        key: "data.seed",
        default: "7",
        kind: Kind::U64,
        doc: "seeds motif words, templates, and noise",
    },
    KeyDef {
        key: "bank.corpus",
        default: "dataset",
        kind: Kind::Choice(&["dataset", "diseases_14", "entities_75"]),
        doc: "category descriptions: the dataset's own corpus.tsv or a bundled corpus",
    },
    KeyDef {
        key: "bank.corpus_text",
        default: "description",
        kind: Kind::Choice(&["description", "name_only"]),
        doc: "anchor each category on its description or on the bare name (ablation axis)",
    },
    KeyDef {
        key: "prompts.image",
        default: "What disease is indicated by the chest X-ray?",
        kind: Kind::Text,
        doc: "standing question prepended to every image input",
    },
    KeyDef {
        key: "prompts.text",
        default: "What disease is described in this text?",
        kind: Kind::Text,
        doc: "standing question prepended to every report or description",
    },
    KeyDef {
        key: "prompts.knowledge",
        default: "Describe the typical imaging findings of {class}.",
        kind: Kind::Text,
        doc: "asked of backbones that can generate their own category descriptions; the bundled decoder cannot, so the corpus text is used",
    },
    KeyDef {
        key: "prompts.positive",
        default: "Findings suggesting {class}.",
        kind: Kind::Text,
        doc: "positive scoring template; must contain {class}",
    },
    KeyDef {
        key: "prompts.negative",
        default: "No evidence of {class}.",
        kind: Kind::Text,
        doc: "negative scoring template; must contain {class}",
    },
    KeyDef {
        key: "eval.mode",
        default: "pos_neg_softmax",
        kind: Kind::Choice(&["pos_neg_softmax", "bank_cosine"]),
        doc: "zero-shot scoring rule",
    },
    KeyDef {
        key: "eval.threshold",
        default: "0.5",
        kind: Kind::Threshold,
        doc: "decision threshold for F1/ACC: a number, or 'youden' to pick it on the val split",
    },
    KeyDef {
        key: "eval.split",
        default: "test",
        kind: Kind::Choice(&["train", "val", "test"]),
        doc: "dataset split a report is computed on",
    },
];

fn schema_entry(key: &str) -> Option<&'static KeyDef> {
    SCHEMA.iter().find(|d| d.key == key)
}

fn check_value(def: &KeyDef, value: &str) -> Result<()> {
    let bad = |want: &str| {
        Err(Error::config(format!(
            "key '{}' expects {want}, got '{value}'",
            def.key
        )))
    };
    match def.kind {
        Kind::UInt => {
            if value.parse::<usize>().is_err() {
                return bad("a non-negative integer");
            }
        }
        Kind::U64 => {
            if value.parse::<u64>().is_err() {
                return bad("a non-negative integer");
            }
        }
        Kind::Float => match value.parse::<f64>() {
            Ok(v) if v.is_finite() => {}
            _ => return bad("a finite real"),
        },
        Kind::Bool => {
            if value != "true" && value != "false" {
                return bad("true or false");
            }
        }
        Kind::Text => {}
        Kind::Choice(options) => {
            if !options.contains(&value) {
                return bad(&format!("one of {}", options.join(", ")));
            }
        }
        Kind::ClipNorm => {
            if value != "none" {
                match value.parse::<f64>() {
                    Ok(v) if v.is_finite() && v > 0.0 => {}
                    _ => return bad("'none' or a positive real"),
                }
            }
        }
        Kind::Layer => {
            if value != "penultimate" && value.parse::<usize>().is_err() {
                return bad("'penultimate' or a layer index");
            }
        }
        Kind::Threshold => {
            if value != "youden" {
                match value.parse::<f64>() {
                    Ok(v) if v.is_finite() => {}
                    _ => return bad("'youden' or a finite real"),
                }
            }
        }
    }
    Ok(())
}

/// A fully resolved key-value map: defaults, then file values, then
/// overrides, each layer validated against the schema.
#[derive(Debug, Clone)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            values: SCHEMA
                .iter()
                .map(|d| (d.key.to_string(), d.default.to_string()))
                .collect(),
        }
    }
}

impl Config {
    /// Defaults overlaid with a `key = value` file.
    pub fn from_file(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Config::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!(
                    "{}:{}: expected 'key = value', got '{line}'",
                    path.display(),
                    lineno + 1
                ))
            })?;
            cfg.set(key.trim(), value.trim()).map_err(|e| {
                Error::config(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?;
        }
        Ok(cfg)
    }

    /// Validate and store one key. Unknown keys are rejected so typos
    /// cannot silently fall back to defaults.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let def = schema_entry(key)
            .ok_or_else(|| Error::config(format!("unknown config key '{key}'")))?;
        check_value(def, value)?;
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Apply a `key=value` override string from the command line.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (key, value) = spec.split_once('=').ok_or_else(|| {
            Error::config(format!("override '{spec}' is not of the form key=value"))
        })?;
        self.set(key.trim(), value.trim())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("config key '{key}' missing from schema"))
    }

    pub fn get_usize(&self, key: &str) -> usize {
        self.get(key).parse().expect("schema-checked integer")
    }

    pub fn get_u64(&self, key: &str) -> u64 {
        self.get(key).parse().expect("schema-checked integer")
    }

    pub fn get_f64(&self, key: &str) -> f64 {
        self.get(key).parse().expect("schema-checked real")
    }

    pub fn get_bool(&self, key: &str) -> bool {
        self.get(key) == "true"
    }

    /// Schema-ordered text of the merged configuration, suitable both
    /// as the run snapshot and as a commented starter file.
    pub fn render_resolved(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for def in SCHEMA {
            let head = def.key.split('.').next().unwrap_or("");
            if head != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                section = head;
            }
            out.push_str(&format!("# {}\n{} = {}\n", def.doc, def.key, self.get(def.key)));
        }
        out
    }

    pub fn backbone_spec(&self) -> Result<BackboneSpec> {
        let spec = BackboneSpec {
            vocab_size: self.get_usize("model.vocab_size"),
            hidden_dim: self.get_usize("model.hidden_dim"),
            num_layers: self.get_usize("model.num_layers"),
            max_seq_len: self.get_usize("model.max_seq_len"),
            modality_fusion: ModalityFusion::parse(self.get("model.fusion"))?,
            trainable_scope: TrainableScope::parse(self.get("model.trainable_scope"))?,
            patch_dim: self.get_usize("model.patch_dim"),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Feature extraction layer, with "penultimate" resolved against
    /// the configured depth.
    pub fn layer_index(&self) -> Result<usize> {
        self.layer_index_for(self.get_usize("model.num_layers"))
    }

    /// Same resolution against an externally known depth, e.g. a
    /// loaded checkpoint whose spec overrides the config.
    pub fn layer_index_for(&self, layers: usize) -> Result<usize> {
        let raw = self.get("model.layer_index");
        let idx = if raw == "penultimate" {
            layers.saturating_sub(1)
        } else {
            raw.parse::<usize>().expect("schema-checked layer index")
        };
        if idx > layers {
            return Err(Error::config(format!(
                "model.layer_index {idx} exceeds num_layers {layers}"
            )));
        }
        Ok(idx)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let clip = self.get("train.clip_norm");
        let cfg = TrainConfig {
            lr: self.get_f64("train.lr"),
            weight_decay: self.get_f64("train.weight_decay"),
            warmup_fraction: self.get_f64("train.warmup_fraction"),
            batch_size: self.get_usize("train.batch_size"),
            max_steps: self.get_usize("train.max_steps"),
            tau: self.get_f64("train.tau"),
            lambda: self.get_f64("train.lambda"),
            seed: self.get_u64("train.seed"),
            precision: Precision::parse(self.get("train.precision"))?,
            clip_norm: if clip == "none" {
                None
            } else {
                Some(clip.parse().expect("schema-checked clip norm"))
            },
            feature_mode: FeatureMode::parse(self.get("train.feature_mode"))?,
            val_interval: self.get_usize("train.val_interval"),
            image_prompt: self.get("prompts.image").to_string(),
            text_prompt: self.get("prompts.text").to_string(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn synthetic_spec(&self) -> Result<SyntheticSpec> {
        let spec = SyntheticSpec {
            name: "synthetic".to_string(),
            num_classes: self.get_usize("data.classes"),
            per_class: self.get_usize("data.per_class"),
            sigma: self.get_f64("data.sigma"),
            seed: self.get_u64("data.seed"),
            multi_label: self.get_bool("data.multi_label"),
            patch_count: self.get_usize("data.patch_count"),
            patch_dim: self.get_usize("model.patch_dim"),
            vocab_size: self.get_usize("model.vocab_size"),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn score_options(&self) -> Result<ScoreOptions> {
        for key in ["prompts.positive", "prompts.negative"] {
            if !self.get(key).contains("{class}") {
                return Err(Error::config(format!(
                    "{key} must contain the {{class}} placeholder"
                )));
            }
        }
        Ok(ScoreOptions {
            mode: ScoringMode::parse(self.get("eval.mode"))?,
            tau: self.get_f64("train.tau"),
            prompts: EvalPrompts {
                positive: self.get("prompts.positive").to_string(),
                negative: self.get("prompts.negative").to_string(),
            },
            image_prompt: self.get("prompts.image").to_string(),
            text_prompt: self.get("prompts.text").to_string(),
        })
    }

    pub fn threshold_policy(&self) -> ThresholdPolicy {
        let raw = self.get("eval.threshold");
        if raw == "youden" {
            ThresholdPolicy::YoudenOnVal
        } else {
            ThresholdPolicy::Fixed(raw.parse().expect("schema-checked threshold"))
        }
    }
}
