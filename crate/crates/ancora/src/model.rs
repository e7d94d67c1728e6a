//! Backbone abstraction and the tiny reference decoder.
//!
//! The adapter layer fixes three contracts that the rest of the crate
//! builds on: how prompts are augmented with learnable special tokens,
//! how hidden states are exposed per layer with special/ordinary
//! position bookkeeping, and which parameters are trainable under a
//! given scope. The reference decoder is a small causal transformer
//! that exists to make those contracts executable and differentiable
//! end to end; it is not meant to be a capable language model.
//!
//! Sequence layout is always `content ++ prompt ++ special tokens`,
//! with image patches (when present) entering as a projected prefix
//! before the tokens. Special tokens sit at the tail, so under causal
//! attention they can read the whole sequence; that is the mechanism
//! by which their hidden states become usable summaries.

use sha2::{Digest, Sha256};
use std::collections::BTreeMap;

use crate::autodiff::{Tape, VarId};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::tokenizer::HashTokenizer;

pub const RMS_EPS: f64 = 1e-6;
const MASK_NEG: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModalityFusion {
    /// Image patch features are linearly projected and prepended.
    PrefixPatches,
    /// Token-only model; image inputs are rejected.
    None,
}

impl ModalityFusion {
    pub fn as_str(self) -> &'static str {
        match self {
            ModalityFusion::PrefixPatches => "prefix_patches",
            ModalityFusion::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "prefix_patches" => Ok(ModalityFusion::PrefixPatches),
            "none" => Ok(ModalityFusion::None),
            other => Err(Error::config(format!("unknown modality fusion '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainableScope {
    Full,
    AdaptersOnly,
    ProjectionsOnly,
}

impl TrainableScope {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainableScope::Full => "full",
            TrainableScope::AdaptersOnly => "adapters_only",
            TrainableScope::ProjectionsOnly => "projections_only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(TrainableScope::Full),
            "adapters_only" => Ok(TrainableScope::AdaptersOnly),
            "projections_only" => Ok(TrainableScope::ProjectionsOnly),
            other => Err(Error::config(format!("unknown trainable scope '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneSpec {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub max_seq_len: usize,
    pub modality_fusion: ModalityFusion,
    pub trainable_scope: TrainableScope,
    /// Feature length of one image patch; used when fusion is
    /// `PrefixPatches`.
    pub patch_dim: usize,
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::config("vocab_size must be at least 2"));
        }
        if self.hidden_dim == 0 {
            return Err(Error::config("hidden_dim must be positive"));
        }
        if self.max_seq_len == 0 {
            return Err(Error::config("max_seq_len must be positive"));
        }
        if self.modality_fusion == ModalityFusion::PrefixPatches && self.patch_dim == 0 {
            return Err(Error::config(
                "patch_dim must be positive with prefix_patches fusion",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Image,
    Text,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Image => "image",
            Branch::Text => "text",
        }
    }
}

/// Ids of the learnable special tokens, one block per branch. Ids live
/// directly above the base vocabulary and never collide with it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpecialTokenPlan {
    pub image_tokens: Vec<u32>,
    pub text_tokens: Vec<u32>,
}

impl SpecialTokenPlan {
    /// Contiguous id blocks: image tokens first, then text tokens.
    pub fn new(vocab_size: usize, image_count: usize, text_count: usize) -> Result<Self> {
        if image_count == 0 || text_count == 0 {
            return Err(Error::config(
                "each branch needs at least one special token",
            ));
        }
        let base = vocab_size as u32;
        let image_tokens: Vec<u32> = (0..image_count as u32).map(|i| base + i).collect();
        let text_tokens: Vec<u32> = (0..text_count as u32)
            .map(|i| base + image_count as u32 + i)
            .collect();
        Ok(SpecialTokenPlan {
            image_tokens,
            text_tokens,
        })
    }

    pub fn validate(&self, spec: &BackboneSpec) -> Result<()> {
        if self.image_tokens.is_empty() || self.text_tokens.is_empty() {
            return Err(Error::config(
                "each branch needs at least one special token",
            ));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &id in self.image_tokens.iter().chain(&self.text_tokens) {
            if (id as usize) < spec.vocab_size {
                return Err(Error::config(format!(
                    "special token id {id} collides with the base vocabulary"
                )));
            }
            if !seen.insert(id) {
                return Err(Error::config(format!("duplicate special token id {id}")));
            }
        }
        Ok(())
    }

    pub fn branch_tokens(&self, branch: Branch) -> &[u32] {
        match branch {
            Branch::Image => &self.image_tokens,
            Branch::Text => &self.text_tokens,
        }
    }

    pub fn contains(&self, id: u32) -> bool {
        self.image_tokens.contains(&id) || self.text_tokens.contains(&id)
    }
}

/// Token sequence with the branch's special tokens appended and their
/// positions recorded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AugmentedPrompt {
    pub tokens: Vec<u32>,
    pub special_positions: Vec<usize>,
}

/// Appends the branch's special tokens to `prompt` in plan order.
pub fn augment_prompt(
    prompt: &[u32],
    plan: &SpecialTokenPlan,
    branch: Branch,
    spec: &BackboneSpec,
) -> Result<AugmentedPrompt> {
    let specials = plan.branch_tokens(branch);
    for (i, &id) in prompt.iter().enumerate() {
        if (id as usize) >= spec.vocab_size {
            return Err(Error::config(format!(
                "prompt position {i} holds id {id}, outside the base vocabulary \
                 (special tokens may not appear in prompts)"
            )));
        }
    }
    let total = prompt.len() + specials.len();
    if total > spec.max_seq_len {
        return Err(Error::config(format!(
            "augmented prompt length {total} exceeds max_seq_len {}",
            spec.max_seq_len
        )));
    }
    let mut tokens = Vec::with_capacity(total);
    tokens.extend_from_slice(prompt);
    tokens.extend_from_slice(specials);
    let special_positions = (prompt.len()..total).collect();
    Ok(AugmentedPrompt {
        tokens,
        special_positions,
    })
}

/// Hidden states at one layer for one sequence. `special_positions`
/// and `ordinary_positions` partition the non-padding positions; any
/// padded tail belongs to neither.
#[derive(Debug, Clone)]
pub struct HiddenStateView {
    /// 0 addresses the embedding output; `num_layers` the final layer.
    pub layer_index: usize,
    /// seq_len x hidden_dim.
    pub states: Matrix,
    pub special_positions: Vec<usize>,
    pub ordinary_positions: Vec<usize>,
}

/// One encoded sequence ready for the forward pass.
#[derive(Debug, Clone)]
pub struct BranchInput {
    pub branch: Branch,
    /// `content ++ prompt ++ specials`; specials form the tail.
    pub tokens: Vec<u32>,
    /// Positions of the special tokens within `tokens`.
    pub special_positions: Vec<usize>,
    /// Patch feature grid (P x patch_dim) for the image branch under
    /// `PrefixPatches`; enters the sequence before the tokens.
    pub patches: Option<Matrix>,
}

/// Hidden states still on the tape, for training-time use.
pub struct TapeHiddenView {
    pub states: VarId,
    pub special_positions: Vec<usize>,
    pub ordinary_positions: Vec<usize>,
}

/// Ordered, named parameter storage. Insertion order is the canonical
/// order used by optimizers, serialization, and fingerprints.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<(String, Matrix)>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, m: Matrix) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter '{name}'"
        );
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, m));
    }

    pub fn get(&self, name: &str) -> &Matrix {
        let i = self.index[name];
        &self.entries[i].1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Matrix {
        let i = self.index[name];
        &mut self.entries[i].1
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.entries.iter().map(|(n, m)| (n.as_str(), m))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Matrix)> {
        self.entries.iter_mut().map(|(n, m)| (n.as_str(), &mut *m))
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total entry count across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, m)| m.len()).sum()
    }

    pub fn fingerprint_update(&self, hasher: &mut Sha256) {
        for (name, m) in &self.entries {
            hasher.update(name.as_bytes());
            hasher.update((m.rows() as u64).to_le_bytes());
            hasher.update((m.cols() as u64).to_le_bytes());
            for v in m.as_slice() {
                hasher.update(v.to_le_bytes());
            }
        }
    }
}

/// Parameter leaves registered on a tape for one forward/backward pass.
pub struct ParamBinding {
    map: BTreeMap<String, VarId>,
}

impl ParamBinding {
    pub fn var(&self, name: &str) -> VarId {
        self.map[name]
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }

    /// Merges bindings from separate stores (backbone + heads) bound
    /// on the same tape.
    pub fn merged(parts: Vec<ParamBinding>) -> Self {
        let mut map = BTreeMap::new();
        for part in parts {
            for (k, v) in part.map {
                assert!(map.insert(k.clone(), v).is_none(), "duplicate binding {k}");
            }
        }
        ParamBinding { map }
    }
}

impl ParamStore {
    /// Registers every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> ParamBinding {
        let mut map = BTreeMap::new();
        for (name, m) in self.iter() {
            map.insert(name.to_string(), tape.leaf(m.clone()));
        }
        ParamBinding { map }
    }
}

/// Anything that can stand in as the frozen-or-tuned backbone.
pub trait Backbone {
    fn spec(&self) -> &BackboneSpec;
    fn plan(&self) -> &SpecialTokenPlan;
    fn tokenizer(&self) -> HashTokenizer;
    fn forward_hidden(&self, input: &BranchInput, layer_index: usize) -> Result<HiddenStateView>;
    /// Free-form description generation. The reference decoder cannot
    /// generate, so callers fall back to a description corpus.
    fn generate_description(&self, _category: &str, _knowledge_prompt: &str) -> Option<String> {
        None
    }
    fn fingerprint(&self) -> String;
}

/// Small causal decoder used for every desk-scale contract in this
/// crate: two or more pre-norm blocks of single-head attention plus a
/// GELU MLP, with fresh special-token embeddings per branch.
#[derive(Debug, Clone)]
pub struct TinyDecoder {
    spec: BackboneSpec,
    plan: SpecialTokenPlan,
    seed: u64,
    pub params: ParamStore,
}

pub const P_EMBED: &str = "backbone.embed";
pub const P_IMG_SPECIAL: &str = "backbone.img_special";
pub const P_TXT_SPECIAL: &str = "backbone.txt_special";
pub const P_VISION_PROJ: &str = "backbone.vision_proj";

fn layer_param(layer: usize, part: &str) -> String {
    format!("backbone.layer{layer}.{part}")
}

/// Builds the reference decoder. Parameters are drawn from a ChaCha
/// stream seeded by `seed`, so equal seeds give bit-identical models.
pub fn build_reference_model(
    spec: &BackboneSpec,
    image_tokens: usize,
    text_tokens: usize,
    seed: u64,
) -> Result<TinyDecoder> {
    spec.validate()?;
    if spec.num_layers < 2 {
        return Err(Error::config(format!(
            "reference decoder requires at least 2 layers, got {}",
            spec.num_layers
        )));
    }
    if spec.trainable_scope == TrainableScope::AdaptersOnly {
        return Err(Error::config(
            "reference decoder has no adapter parameters; \
             use trainable_scope full or projections_only",
        ));
    }
    let plan = SpecialTokenPlan::new(spec.vocab_size, image_tokens, text_tokens)?;
    plan.validate(spec)?;
    let min_len = image_tokens.max(text_tokens) + 1;
    if spec.max_seq_len < min_len {
        return Err(Error::config(format!(
            "max_seq_len {} cannot hold a prompt plus {} special tokens",
            spec.max_seq_len,
            image_tokens.max(text_tokens)
        )));
    }

    use rand_chacha::rand_core::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let d = spec.hidden_dim;
    let ffn = 4 * d;
    let std = 0.02;

    let mut params = ParamStore::new();
    params.insert(
        P_EMBED,
        Matrix::randn_from(&mut rng, spec.vocab_size, d, std),
    );
    // Fresh special-token embeddings; trainable under every scope.
    params.insert(
        P_IMG_SPECIAL,
        Matrix::randn_from(&mut rng, image_tokens, d, std),
    );
    params.insert(
        P_TXT_SPECIAL,
        Matrix::randn_from(&mut rng, text_tokens, d, std),
    );
    params.insert(
        P_VISION_PROJ,
        Matrix::randn_from(&mut rng, spec.patch_dim.max(1), d, std),
    );
    for l in 0..spec.num_layers {
        params.insert(layer_param(l, "norm1"), Matrix::ones(1, d));
        for part in ["wq", "wk", "wv", "wo"] {
            params.insert(layer_param(l, part), Matrix::randn_from(&mut rng, d, d, std));
        }
        params.insert(layer_param(l, "norm2"), Matrix::ones(1, d));
        params.insert(layer_param(l, "w_up"), Matrix::randn_from(&mut rng, d, ffn, std));
        params.insert(layer_param(l, "w_down"), Matrix::randn_from(&mut rng, ffn, d, std));
    }

    Ok(TinyDecoder {
        spec: spec.clone(),
        plan,
        seed,
        params,
    })
}

impl TinyDecoder {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Whether the optimizer may update a parameter under the model's
    /// trainable scope. Special-token embeddings are always trainable.
    pub fn is_trainable(&self, name: &str) -> bool {
        match name {
            P_IMG_SPECIAL | P_TXT_SPECIAL => true,
            P_VISION_PROJ => matches!(
                self.spec.trainable_scope,
                TrainableScope::Full | TrainableScope::ProjectionsOnly
            ),
            _ => self.spec.trainable_scope == TrainableScope::Full,
        }
    }

    /// Registers every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> ParamBinding {
        self.params.bind(tape)
    }

    fn validate_input(&self, input: &BranchInput) -> Result<usize> {
        let vocab = self.spec.vocab_size as u32;
        let specials = self.plan.branch_tokens(input.branch);
        let tail_start = input
            .tokens
            .len()
            .checked_sub(specials.len())
            .ok_or_else(|| Error::config("sequence shorter than its special-token block"))?;
        if input.special_positions != (tail_start..input.tokens.len()).collect::<Vec<_>>() {
            return Err(Error::config(
                "special tokens must form the sequence tail in plan order",
            ));
        }
        for (i, &id) in input.tokens.iter().enumerate() {
            if i < tail_start {
                if id >= vocab {
                    return Err(Error::config(format!(
                        "position {i}: id {id} is not a base-vocabulary token"
                    )));
                }
            } else if id != specials[i - tail_start] {
                return Err(Error::config(format!(
                    "position {i}: expected {} special token {}, found {id}",
                    input.branch.as_str(),
                    specials[i - tail_start]
                )));
            }
        }
        let patch_rows = match (&input.patches, self.spec.modality_fusion, input.branch) {
            (Some(p), ModalityFusion::PrefixPatches, Branch::Image) => {
                if p.cols() != self.spec.patch_dim {
                    return Err(Error::config(format!(
                        "patch feature dim {} does not match spec patch_dim {}",
                        p.cols(),
                        self.spec.patch_dim
                    )));
                }
                p.rows()
            }
            (None, ModalityFusion::PrefixPatches, Branch::Image) => {
                return Err(Error::config(
                    "image branch requires patch features under prefix_patches fusion",
                ));
            }
            (Some(_), _, _) => {
                return Err(Error::config(
                    "patch features are only accepted on the image branch with prefix_patches",
                ));
            }
            (None, _, _) => 0,
        };
        let total = patch_rows + input.tokens.len();
        if total > self.spec.max_seq_len {
            return Err(Error::config(format!(
                "sequence length {total} exceeds max_seq_len {}",
                self.spec.max_seq_len
            )));
        }
        Ok(patch_rows)
    }

    /// Forward pass on a tape. Returns the hidden states at
    /// `layer_index` (0 = embeddings) and the position partition over
    /// the full sequence (patch prefix included).
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        binding: &ParamBinding,
        input: &BranchInput,
        layer_index: usize,
    ) -> Result<TapeHiddenView> {
        if layer_index > self.spec.num_layers {
            return Err(Error::config(format!(
                "layer_index {layer_index} out of range 0..={}",
                self.spec.num_layers
            )));
        }
        let patch_rows = self.validate_input(input)?;
        let tail_start = input.tokens.len() - input.special_positions.len();

        let mut parts: Vec<VarId> = Vec::new();
        if patch_rows > 0 {
            let patches = tape.constant(input.patches.clone().unwrap());
            let proj = tape.matmul(patches, binding.var(P_VISION_PROJ));
            parts.push(proj);
        }
        if tail_start > 0 {
            let base_ids: Vec<usize> =
                input.tokens[..tail_start].iter().map(|&t| t as usize).collect();
            parts.push(tape.gather_rows(binding.var(P_EMBED), base_ids));
        }
        let (table, first_id) = match input.branch {
            Branch::Image => (P_IMG_SPECIAL, self.plan.image_tokens[0]),
            Branch::Text => (P_TXT_SPECIAL, self.plan.text_tokens[0]),
        };
        let special_rows: Vec<usize> = input.tokens[tail_start..]
            .iter()
            .map(|&t| (t - first_id) as usize)
            .collect();
        parts.push(tape.gather_rows(binding.var(table), special_rows));

        let mut x = tape.concat_rows(&parts);
        let seq = patch_rows + input.tokens.len();

        if layer_index > 0 {
            let mask = causal_mask(seq);
            let scale = 1.0 / (self.spec.hidden_dim as f64).sqrt();
            for l in 0..layer_index {
                let n1 = tape.rms_norm(x, binding.var(&layer_param(l, "norm1")), RMS_EPS);
                let q = tape.matmul(n1, binding.var(&layer_param(l, "wq")));
                let k = tape.matmul(n1, binding.var(&layer_param(l, "wk")));
                let v = tape.matmul(n1, binding.var(&layer_param(l, "wv")));
                let scores = tape.matmul_transpose_b(q, k);
                let scaled = tape.scale(scores, scale);
                let masked = tape.add_const(scaled, &mask);
                let attn = tape.softmax_rows(masked);
                let ctx = tape.matmul(attn, v);
                let attn_out = tape.matmul(ctx, binding.var(&layer_param(l, "wo")));
                x = tape.add(x, attn_out);

                let n2 = tape.rms_norm(x, binding.var(&layer_param(l, "norm2")), RMS_EPS);
                let up = tape.matmul(n2, binding.var(&layer_param(l, "w_up")));
                let act = tape.gelu(up);
                let down = tape.matmul(act, binding.var(&layer_param(l, "w_down")));
                x = tape.add(x, down);
            }
        }

        let special_positions: Vec<usize> = input
            .special_positions
            .iter()
            .map(|&p| p + patch_rows)
            .collect();
        let mut ordinary_positions: Vec<usize> = (0..patch_rows).collect();
        ordinary_positions.extend((0..tail_start).map(|p| p + patch_rows));

        Ok(TapeHiddenView {
            states: x,
            special_positions,
            ordinary_positions,
        })
    }
}

impl Backbone for TinyDecoder {
    fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    fn plan(&self) -> &SpecialTokenPlan {
        &self.plan
    }

    fn tokenizer(&self) -> HashTokenizer {
        HashTokenizer::new(self.spec.vocab_size)
    }

    fn forward_hidden(&self, input: &BranchInput, layer_index: usize) -> Result<HiddenStateView> {
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape);
        let view = self.forward_on_tape(&mut tape, &binding, input, layer_index)?;
        Ok(HiddenStateView {
            layer_index,
            states: tape.value(view.states).clone(),
            special_positions: view.special_positions,
            ordinary_positions: view.ordinary_positions,
        })
    }

    fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.spec.vocab_size as u64).to_le_bytes());
        hasher.update((self.spec.hidden_dim as u64).to_le_bytes());
        hasher.update((self.spec.num_layers as u64).to_le_bytes());
        for &id in self.plan.image_tokens.iter().chain(&self.plan.text_tokens) {
            hasher.update(id.to_le_bytes());
        }
        self.params.fingerprint_update(&mut hasher);
        let digest = hasher.finalize();
        hex16(&digest)
    }
}

pub(crate) fn hex16(digest: &[u8]) -> String {
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

fn causal_mask(seq: usize) -> Matrix {
    let mut m = Matrix::zeros(seq, seq);
    for r in 0..seq {
        for c in (r + 1)..seq {
            m.set(r, c, MASK_NEG);
        }
    }
    m
}

/// How sequence assembly treats content that would overflow the
/// context window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OverflowPolicy {
    Error,
    /// Drop trailing content tokens to make room; prompt and special
    /// tokens are never cut.
    TruncateContent,
}

/// `content ++ prompt ++ text specials`, tokenized. Returns the input
/// and whether content was truncated.
pub fn encode_text_branch(
    backbone: &dyn Backbone,
    content: &str,
    prompt: &str,
    policy: OverflowPolicy,
) -> Result<(BranchInput, bool)> {
    let tok = backbone.tokenizer();
    let spec = backbone.spec();
    let plan = backbone.plan();
    let mut content_ids = tok.tokenize(content);
    let prompt_ids = tok.tokenize(prompt);
    let reserved = prompt_ids.len() + plan.text_tokens.len();
    if reserved > spec.max_seq_len {
        return Err(Error::config(format!(
            "prompt plus special tokens ({reserved}) exceed max_seq_len {}",
            spec.max_seq_len
        )));
    }
    let budget = spec.max_seq_len - reserved;
    let mut truncated = false;
    if content_ids.len() > budget {
        match policy {
            OverflowPolicy::Error => {
                return Err(Error::config(format!(
                    "content length {} exceeds budget {budget} \
                     (max_seq_len {} minus prompt and specials)",
                    content_ids.len(),
                    spec.max_seq_len
                )));
            }
            OverflowPolicy::TruncateContent => {
                content_ids.truncate(budget);
                truncated = true;
            }
        }
    }
    let mut seq = content_ids;
    seq.extend_from_slice(&prompt_ids);
    let aug = augment_prompt(&seq, plan, Branch::Text, spec)?;
    Ok((
        BranchInput {
            branch: Branch::Text,
            tokens: aug.tokens,
            special_positions: aug.special_positions,
            patches: None,
        },
        truncated,
    ))
}

/// `patches ++ prompt ++ image specials`.
pub fn encode_image_branch(
    backbone: &dyn Backbone,
    patches: Matrix,
    prompt: &str,
) -> Result<BranchInput> {
    let tok = backbone.tokenizer();
    let spec = backbone.spec();
    let plan = backbone.plan();
    let prompt_ids = tok.tokenize(prompt);
    let aug = augment_prompt(&prompt_ids, plan, Branch::Image, spec)?;
    let total = patches.rows() + aug.tokens.len();
    if total > spec.max_seq_len {
        return Err(Error::config(format!(
            "patch prefix ({}) plus tokens ({}) exceed max_seq_len {}",
            patches.rows(),
            aug.tokens.len(),
            spec.max_seq_len
        )));
    }
    Ok(BranchInput {
        branch: Branch::Image,
        tokens: aug.tokens,
        special_positions: aug.special_positions,
        patches: Some(patches),
    })
}
