//! Category knowledge bank.
//!
//! Each category carries a short description text. Descriptions are
//! pushed through the text branch, pooled over the special positions
//! at a fixed layer, and projected by the dedicated description head
//! into the shared feature space. The pooled states are cached and
//! treated as constants; only the description head sees gradients, so
//! refreshing after an optimizer step is one cheap projection.
//!
//! Two description sets ship built in: a broad 75-entry radiology
//! entity list and the 14-label chest X-ray disease set. Custom sets
//! load from the same two-column TSV layout.

use std::path::Path;

use crate::autodiff::{Tape, VarId};
use crate::error::{Error, Result};
use crate::features::{pool_global, ProjectionSet, HEAD_DIS};
use crate::model::ParamBinding;
use crate::kv::KvFile;
use crate::linalg::Matrix;
use crate::model::{encode_text_branch, Backbone, OverflowPolicy};
use crate::tensorio::{read_tensors, write_tensors, StorageDtype};

const ENTITIES_75_TSV: &str = include_str!("../data/entities_75.tsv");
const DISEASES_14_TSV: &str = include_str!("../data/diseases_14.tsv");

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusId {
    /// 75 broad radiology entities.
    Entities75,
    /// 14 chest X-ray disease labels.
    Diseases14,
    Custom,
}

impl CorpusId {
    /// Entry count a built-in corpus must have; None for custom sets.
    pub fn expected_len(self) -> Option<usize> {
        match self {
            CorpusId::Entities75 => Some(75),
            CorpusId::Diseases14 => Some(14),
            CorpusId::Custom => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CorpusId::Entities75 => "entities_75",
            CorpusId::Diseases14 => "diseases_14",
            CorpusId::Custom => "custom",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "entities_75" => Ok(CorpusId::Entities75),
            "diseases_14" => Ok(CorpusId::Diseases14),
            "custom" => Ok(CorpusId::Custom),
            other => Err(Error::config(format!("unknown corpus id '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryEntry {
    pub name: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub id: CorpusId,
    pub entries: Vec<CategoryEntry>,
}

impl Corpus {
    pub fn builtin(id: CorpusId) -> Result<Corpus> {
        let text = match id {
            CorpusId::Entities75 => ENTITIES_75_TSV,
            CorpusId::Diseases14 => DISEASES_14_TSV,
            CorpusId::Custom => {
                return Err(Error::config("no built-in text for a custom corpus"))
            }
        };
        Corpus::from_tsv_str(id, text, id.as_str())
    }

    /// Parse `name<TAB>description` lines. Blank lines are skipped.
    pub fn from_tsv_str(id: CorpusId, text: &str, source: &str) -> Result<Corpus> {
        let mut entries = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.splitn(2, '\t');
            let name = parts.next().unwrap_or("").trim();
            let description = parts.next().map(str::trim).unwrap_or("");
            if name.is_empty() || description.is_empty() {
                return Err(Error::data(format!(
                    "{source}:{}: expected 'name<TAB>description', got '{line}'",
                    lineno + 1
                )));
            }
            if entries
                .iter()
                .any(|e: &CategoryEntry| e.name.eq_ignore_ascii_case(name))
            {
                return Err(Error::data(format!(
                    "{source}:{}: duplicate category '{name}'",
                    lineno + 1
                )));
            }
            entries.push(CategoryEntry {
                name: name.to_string(),
                description: description.to_string(),
            });
        }
        if entries.is_empty() {
            return Err(Error::data(format!("{source}: corpus has no entries")));
        }
        if let Some(expected) = id.expected_len() {
            if entries.len() != expected {
                return Err(Error::data(format!(
                    "{source}: corpus '{}' must have {expected} entries, found {}",
                    id.as_str(),
                    entries.len()
                )));
            }
        }
        Ok(Corpus { id, entries })
    }

    pub fn load(id: CorpusId, path: &Path) -> Result<Corpus> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Corpus::from_tsv_str(id, &text, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&e.name);
            out.push('\t');
            out.push_str(&e.description);
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries
            .iter()
            .position(|e| e.name.eq_ignore_ascii_case(name))
    }

    pub fn description_of(&self, name: &str) -> Result<&str> {
        self.index_of(name)
            .map(|i| self.entries[i].description.as_str())
            .ok_or_else(|| Error::config(format!("unknown category '{name}'")))
    }
}

/// Resolve a category's description: ask the backbone to generate one
/// first, fall back to the corpus text.
pub fn describe_category(
    backbone: &dyn Backbone,
    corpus: &Corpus,
    name: &str,
    knowledge_prompt: &str,
) -> Result<String> {
    if let Some(generated) = backbone.generate_description(name, knowledge_prompt) {
        return Ok(generated);
    }
    corpus.description_of(name).map(String::from)
}

#[derive(Debug, Clone)]
pub struct KnowledgeBank {
    pub corpus: Corpus,
    /// N x hidden, pooled special states per category. Frozen: no
    /// gradient flows into the backbone through these rows.
    pub pooled: Matrix,
    /// N x K, description-head projection of `pooled`.
    pub d_hat: Matrix,
    pub layer_index: usize,
    pub backbone_fingerprint: String,
    /// Categories whose description was cut to fit the context.
    pub truncated: usize,
}

impl KnowledgeBank {
    /// Encode every category description and project the pooled rows.
    pub fn build(
        backbone: &dyn Backbone,
        projections: &ProjectionSet,
        corpus: Corpus,
        encode_prompt: &str,
        knowledge_prompt: &str,
        layer_index: usize,
    ) -> Result<KnowledgeBank> {
        let mut rows = Vec::with_capacity(corpus.len());
        let mut truncated = 0;
        for entry in &corpus.entries {
            let text = describe_category(backbone, &corpus, &entry.name, knowledge_prompt)?;
            let (input, cut) =
                encode_text_branch(backbone, &text, encode_prompt, OverflowPolicy::TruncateContent)?;
            if cut {
                truncated += 1;
            }
            let view = backbone.forward_hidden(&input, layer_index)?;
            rows.push(pool_global(&view)?);
        }
        let refs: Vec<&Matrix> = rows.iter().collect();
        let pooled = Matrix::vstack(&refs);
        let d_hat = projections.project(HEAD_DIS, &pooled)?;
        Ok(KnowledgeBank {
            corpus,
            pooled,
            d_hat,
            layer_index,
            backbone_fingerprint: backbone.fingerprint(),
            truncated,
        })
    }

    pub fn num_categories(&self) -> usize {
        self.corpus.len()
    }

    /// Re-project the cached pooled states after the description head
    /// changed. Equivalent to a full rebuild as long as the backbone
    /// is untouched.
    pub fn refresh_projection(&mut self, projections: &ProjectionSet) -> Result<()> {
        self.d_hat = projections.project(HEAD_DIS, &self.pooled)?;
        Ok(())
    }

    /// Recompute the pooled cache against the current backbone, then
    /// re-project.
    pub fn refresh(
        &mut self,
        backbone: &dyn Backbone,
        projections: &ProjectionSet,
        encode_prompt: &str,
        knowledge_prompt: &str,
    ) -> Result<()> {
        let rebuilt = KnowledgeBank::build(
            backbone,
            projections,
            self.corpus.clone(),
            encode_prompt,
            knowledge_prompt,
            self.layer_index,
        )?;
        *self = rebuilt;
        Ok(())
    }

    /// Bank rows on a tape: the pooled cache enters as a constant,
    /// gradients reach only the description head parameters.
    pub fn d_hat_on_tape(
        &self,
        tape: &mut Tape,
        projections: &ProjectionSet,
        binding: &ParamBinding,
    ) -> Result<VarId> {
        let pooled = tape.constant(self.pooled.clone());
        projections.project_on_tape(tape, binding, HEAD_DIS, pooled)
    }

    /// Error unless this bank was built from exactly this backbone.
    pub fn ensure_matches(&self, backbone: &dyn Backbone) -> Result<()> {
        let current = backbone.fingerprint();
        if current != self.backbone_fingerprint {
            return Err(Error::config(format!(
                "knowledge bank was built for backbone {} but the loaded backbone is {current}",
                self.backbone_fingerprint
            )));
        }
        Ok(())
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.corpus.save(&dir.join("corpus.tsv"))?;
        write_tensors(
            &dir.join("bank.bin"),
            &[
                ("pooled".to_string(), &self.pooled),
                ("d_hat".to_string(), &self.d_hat),
            ],
            StorageDtype::F64,
        )?;
        let mut kv = KvFile::new();
        kv.set("corpus_id", self.corpus.id.as_str());
        kv.set("categories", self.corpus.len());
        kv.set("layer_index", self.layer_index);
        kv.set("backbone_fingerprint", &self.backbone_fingerprint);
        kv.set("truncated", self.truncated);
        kv.set("hidden_dim", self.pooled.cols());
        kv.set("feature_dim", self.d_hat.cols());
        kv.save(&dir.join("manifest.txt"))
    }

    pub fn load_dir(dir: &Path) -> Result<KnowledgeBank> {
        let kv = KvFile::load(&dir.join("manifest.txt"))?;
        let id = CorpusId::parse(kv.require("corpus_id")?)?;
        let categories = kv.require_usize("categories")?;
        let layer_index = kv.require_usize("layer_index")?;
        let fingerprint = kv.require("backbone_fingerprint")?.to_string();
        let truncated = kv.require_usize("truncated")?;
        let hidden_dim = kv.require_usize("hidden_dim")?;
        let feature_dim = kv.require_usize("feature_dim")?;

        let corpus = Corpus::load(id, &dir.join("corpus.tsv"))?;
        if corpus.len() != categories {
            return Err(Error::data(format!(
                "manifest lists {categories} categories but corpus.tsv has {}",
                corpus.len()
            )));
        }
        let (_dtype, tensors) = read_tensors(&dir.join("bank.bin"))?;
        let take = |name: &str| -> Result<Matrix> {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, m)| m.clone())
                .ok_or_else(|| Error::data(format!("bank.bin is missing tensor '{name}'")))
        };
        let pooled = take("pooled")?;
        let d_hat = take("d_hat")?;
        if pooled.shape() != (categories, hidden_dim) {
            return Err(Error::data(format!(
                "pooled tensor is {:?}, manifest says {}x{hidden_dim}",
                pooled.shape(),
                categories
            )));
        }
        if d_hat.shape() != (categories, feature_dim) {
            return Err(Error::data(format!(
                "d_hat tensor is {:?}, manifest says {}x{feature_dim}",
                d_hat.shape(),
                categories
            )));
        }
        Ok(KnowledgeBank {
            corpus,
            pooled,
            d_hat,
            layer_index,
            backbone_fingerprint: fingerprint,
            truncated,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::penultimate_layer;
    use crate::model::{
        build_reference_model, BackboneSpec, BranchInput, HiddenStateView, ModalityFusion,
        SpecialTokenPlan, TinyDecoder, TrainableScope,
    };
    use crate::tokenizer::HashTokenizer;

    fn spec() -> BackboneSpec {
        BackboneSpec {
            vocab_size: 96,
            hidden_dim: 12,
            num_layers: 2,
            max_seq_len: 64,
            modality_fusion: ModalityFusion::PrefixPatches,
            trainable_scope: TrainableScope::Full,
            patch_dim: 5,
        }
    }

    fn tiny() -> TinyDecoder {
        build_reference_model(&spec(), 2, 3, 11).unwrap()
    }

    fn projections(hidden: usize, k: usize) -> ProjectionSet {
        ProjectionSet::new(hidden, k, 2, true, false, 5).unwrap()
    }

    #[test]
    fn builtin_corpora_have_the_documented_sizes() {
        let ent = Corpus::builtin(CorpusId::Entities75).unwrap();
        assert_eq!(ent.len(), 75);
        assert_eq!(ent.entries[0].name, "normal");
        assert_eq!(ent.entries[74].name, "Covid-19");

        let dis = Corpus::builtin(CorpusId::Diseases14).unwrap();
        assert_eq!(dis.len(), 14);
        assert_eq!(dis.entries[0].name, "Fibrosis");
        assert_eq!(dis.entries[13].name, "Consolidation");
        assert!(dis.index_of("No Finding").is_some());
        assert!(dis
            .description_of("Cardiomegaly")
            .unwrap()
            .contains("enlargement of the heart"));
    }

    #[test]
    fn tsv_parser_rejects_malformed_input() {
        let dup = "a\tone\na\ttwo\n";
        assert!(Corpus::from_tsv_str(CorpusId::Custom, dup, "t").is_err());
        let no_desc = "a\t\n";
        assert!(Corpus::from_tsv_str(CorpusId::Custom, no_desc, "t").is_err());
        let no_tab = "a description without a tab\n";
        assert!(Corpus::from_tsv_str(CorpusId::Custom, no_tab, "t").is_err());
        assert!(Corpus::from_tsv_str(CorpusId::Custom, "", "t").is_err());
    }

    #[test]
    fn builtin_count_is_enforced() {
        let thirteen: String = (0..13).map(|i| format!("c{i}\tdesc {i}\n")).collect();
        let err = Corpus::from_tsv_str(CorpusId::Diseases14, &thirteen, "t").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("14") && msg.contains("13"), "got: {msg}");
    }

    #[test]
    fn corpus_round_trips_through_tsv() {
        let dir = tempfile::tempdir().unwrap();
        let c = Corpus::builtin(CorpusId::Diseases14).unwrap();
        let path = dir.path().join("c.tsv");
        c.save(&path).unwrap();
        let back = Corpus::load(CorpusId::Diseases14, &path).unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn bank_build_produces_unit_rows_per_category() {
        let model = tiny();
        let proj = projections(12, 8);
        let corpus = Corpus::from_tsv_str(
            CorpusId::Custom,
            "alpha\tthe first pattern\nbeta\tthe second pattern\ngamma\tthe third pattern\n",
            "t",
        )
        .unwrap();
        let layer = penultimate_layer(model.spec());
        let bank =
            KnowledgeBank::build(&model, &proj, corpus, "describe", "", layer).unwrap();
        assert_eq!(bank.pooled.shape(), (3, 12));
        assert_eq!(bank.d_hat.shape(), (3, 8));
        assert_eq!(bank.truncated, 0);
        assert_eq!(bank.backbone_fingerprint, model.fingerprint());
        for r in 0..3 {
            assert!((bank.d_hat.row_l2_norm(r) - 1.0).abs() < 1e-9);
        }
        // distinct descriptions should not collapse to one row
        let d01: f64 = bank
            .d_hat
            .row(0)
            .iter()
            .zip(bank.d_hat.row(1))
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        assert!(d01 > 1e-8);
    }

    #[test]
    fn refresh_projection_equals_full_rebuild() {
        let model = tiny();
        let mut proj = projections(12, 8);
        let corpus = Corpus::from_tsv_str(
            CorpusId::Custom,
            "alpha\tthe first pattern\nbeta\tthe second pattern\n",
            "t",
        )
        .unwrap();
        let layer = penultimate_layer(model.spec());
        let mut bank =
            KnowledgeBank::build(&model, &proj, corpus.clone(), "describe", "", layer).unwrap();

        // perturb the description head, refresh, compare to a rebuild
        let name = crate::features::head_param(HEAD_DIS, 0, "w");
        let w = proj.params.get_mut(&name);
        for v in w.as_mut_slice() {
            *v += 0.05;
        }
        bank.refresh_projection(&proj).unwrap();
        let rebuilt =
            KnowledgeBank::build(&model, &proj, corpus, "describe", "", layer).unwrap();
        let diff = bank.d_hat.sub(&rebuilt.d_hat).max_abs();
        assert!(diff <= 1e-10, "refresh drifted from rebuild by {diff}");
    }

    #[test]
    fn d_hat_on_tape_matches_value_level_projection() {
        let model = tiny();
        let proj = projections(12, 8);
        let corpus = Corpus::from_tsv_str(CorpusId::Custom, "alpha\tsome words\n", "t").unwrap();
        let bank = KnowledgeBank::build(
            &model,
            &proj,
            corpus,
            "describe",
            "",
            penultimate_layer(model.spec()),
        )
        .unwrap();
        let mut tape = Tape::new();
        let binding = proj.bind(&mut tape);
        let v = bank.d_hat_on_tape(&mut tape, &proj, &binding).unwrap();
        let diff = tape.value(v).sub(&bank.d_hat).max_abs();
        assert!(diff < 1e-12);
    }

    #[test]
    fn truncated_descriptions_are_counted() {
        let mut s = spec();
        s.max_seq_len = 12; // 3 text specials + prompt leaves little room
        let model = build_reference_model(&s, 2, 3, 11).unwrap();
        let proj = projections(12, 8);
        let long: String = std::iter::repeat("word").take(60).collect::<Vec<_>>().join(" ");
        let corpus =
            Corpus::from_tsv_str(CorpusId::Custom, &format!("alpha\t{long}\n"), "t").unwrap();
        let bank = KnowledgeBank::build(
            &model,
            &proj,
            corpus,
            "q",
            "",
            penultimate_layer(model.spec()),
        )
        .unwrap();
        assert_eq!(bank.truncated, 1);
    }

    #[test]
    fn bank_round_trips_through_directory() {
        let model = tiny();
        let proj = projections(12, 8);
        let corpus = Corpus::builtin(CorpusId::Diseases14).unwrap();
        let bank = KnowledgeBank::build(
            &model,
            &proj,
            corpus,
            "describe",
            "",
            penultimate_layer(model.spec()),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank");
        bank.save_dir(&path).unwrap();
        let back = KnowledgeBank::load_dir(&path).unwrap();
        assert_eq!(back.corpus, bank.corpus);
        assert_eq!(back.layer_index, bank.layer_index);
        assert_eq!(back.backbone_fingerprint, bank.backbone_fingerprint);
        assert_eq!(back.d_hat.as_slice(), bank.d_hat.as_slice());
        assert_eq!(back.pooled.as_slice(), bank.pooled.as_slice());
        back.ensure_matches(&model).unwrap();

        let other = build_reference_model(&spec(), 2, 3, 999).unwrap();
        assert!(back.ensure_matches(&other).is_err());
    }

    struct GeneratingBackbone {
        inner: TinyDecoder,
    }

    impl Backbone for GeneratingBackbone {
        fn spec(&self) -> &BackboneSpec {
            self.inner.spec()
        }
        fn plan(&self) -> &SpecialTokenPlan {
            self.inner.plan()
        }
        fn tokenizer(&self) -> HashTokenizer {
            self.inner.tokenizer()
        }
        fn forward_hidden(&self, input: &BranchInput, layer: usize) -> Result<HiddenStateView> {
            self.inner.forward_hidden(input, layer)
        }
        fn generate_description(&self, category: &str, _prompt: &str) -> Option<String> {
            Some(format!("generated text about {category}"))
        }
        fn fingerprint(&self) -> String {
            self.inner.fingerprint()
        }
    }

    #[test]
    fn generation_takes_precedence_over_corpus_text() {
        let gen = GeneratingBackbone { inner: tiny() };
        let corpus =
            Corpus::from_tsv_str(CorpusId::Custom, "alpha\tfallback words\n", "t").unwrap();
        let text = describe_category(&gen, &corpus, "alpha", "tell me").unwrap();
        assert_eq!(text, "generated text about alpha");

        let plain = tiny();
        let text = describe_category(&plain, &corpus, "alpha", "tell me").unwrap();
        assert_eq!(text, "fallback words");
        assert!(describe_category(&plain, &corpus, "nope", "tell me").is_err());
    }
}
