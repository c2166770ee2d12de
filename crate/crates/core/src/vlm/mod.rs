//! Toy vision-language model.
//!
//! A patch-embedding visual encoder, a token-embedding text encoder with
//! self-attention, and a fusion encoder whose text queries cross-attend to
//! the visual tokens. The fused `[CLS]` state feeds a linear head that
//! produces an image–text matching logit. De-attention can be placed in
//! the fusion stack, the text stack, or both.
//!
//! The text encoder runs two streams with shared weights: the ordinary
//! stream and a function-word stream whose keys are restricted to
//! `[CLS]` plus dictionary words. Both keep the full sequence length.

mod checkpoint;
mod params;
mod retrieve;
mod train;

use std::collections::HashMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_EXTENSION};
pub use params::{Bound, ParamStore};
pub use retrieve::{rank_descending, rank_of, recall_at_k, retrieve, score_matrix, Direction};
pub use train::{mean_loss, train, Optimizer, TrainConfig, TrainReport};

use crate::corpus::Grammar;
use crate::error::{Error, Result};
use crate::fda::{
    fda_multihead, head_maps, multihead_attention, project, AttentionInputs, AttentionWeights, FdaSite, Gate,
    GateMode, GateTable, HeadLayout, HeadMaps, MinMode, PlacementSpec,
};
use crate::tensor::{Tape, Tensor, Var};
use crate::textproc::{function_word_mask, FunctionWordDictionary, TokenMask, TokenSequence, CLS};

pub const UNK: &str = "[UNK]";
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub width: usize,
    pub max_len: usize,
    pub vision_layers: usize,
    pub text_layers: usize,
    pub fusion_layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub mlp_hidden: usize,
    pub placement: PlacementSpec,
    pub gate_mode: GateMode,
    pub min_mode: MinMode,
    pub vocab: Vec<String>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            patch_size: 8,
            width: 64,
            max_len: 16,
            vision_layers: 1,
            text_layers: 2,
            fusion_layers: 2,
            heads: 8,
            head_dim: 8,
            mlp_hidden: 128,
            placement: PlacementSpec::none(),
            gate_mode: GateMode::Learnable,
            min_mode: MinMode::Elementwise,
            vocab: Grammar::new().vocabulary(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn layout(&self) -> HeadLayout {
        HeadLayout {
            heads: self.heads,
            head_dim: self.head_dim,
        }
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Visual tokens including `[CLS]`.
    pub fn visual_tokens(&self) -> usize {
        self.patches_per_side().pow(2) + 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.width != self.heads * self.head_dim {
            return bad(format!(
                "width {} != heads {} × head_dim {}",
                self.width, self.heads, self.head_dim
            ));
        }
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.channels == 0 || self.max_len == 0 || self.mlp_hidden == 0 {
            return bad("zero-sized channel, length or hidden extent".into());
        }
        for special in [CLS, UNK] {
            if !self.vocab.iter().any(|w| w == special) {
                return bad(format!("vocabulary lacks {special}"));
            }
        }
        if self.placement.site.fusion() {
            self.placement.validate(self.fusion_layers, self.heads)?;
        }
        if self.placement.site.text() {
            self.placement.validate(self.text_layers, self.heads)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Normal(f64),
    Zeros,
}

/// Parameter names, shapes and initializers in serialization order. Gate
/// scalars come last so that the remaining weights are drawn identically
/// with or without de-attention.
fn param_specs(c: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = c.width;
    let patch_dim = c.patch_size * c.patch_size * c.channels;
    let inv = |n: usize| Init::Normal(1.0 / (n as f64).sqrt());
    let mut out = vec![
        ("patch.w".to_string(), vec![patch_dim, d], inv(patch_dim)),
        ("patch.b".to_string(), vec![1, d], Init::Zeros),
        ("vis.cls".to_string(), vec![1, d], Init::Normal(1.0)),
        ("vis.pos".to_string(), vec![c.visual_tokens(), d], Init::Normal(0.1)),
        ("tok.emb".to_string(), vec![c.vocab.len(), d], Init::Normal(1.0)),
        ("tok.pos".to_string(), vec![c.max_len, d], Init::Normal(0.1)),
    ];
    let mut block = |prefix: String| {
        for n in ["wq", "wk", "wv", "wo"] {
            out.push((format!("{prefix}.attn.{n}"), vec![d, d], inv(d)));
            let b = format!("{prefix}.attn.b{}", &n[1..]);
            out.push((b, vec![1, d], Init::Zeros));
        }
        out.push((format!("{prefix}.mlp.w1"), vec![d, c.mlp_hidden], inv(d)));
        out.push((format!("{prefix}.mlp.b1"), vec![1, c.mlp_hidden], Init::Zeros));
        out.push((format!("{prefix}.mlp.w2"), vec![c.mlp_hidden, d], inv(c.mlp_hidden)));
        out.push((format!("{prefix}.mlp.b2"), vec![1, d], Init::Zeros));
    };
    for l in 0..c.vision_layers {
        block(format!("vis.L{l}"));
    }
    for l in 0..c.text_layers {
        block(format!("text.L{l}"));
    }
    for l in 0..c.fusion_layers {
        block(format!("fusion.L{l}"));
    }
    // A zero head starts every logit at 0, so the first updates follow the
    // match/mismatch contrast instead of shrinking random logits.
    out.push(("head.w".to_string(), vec![d, 1], Init::Zeros));
    out.push(("head.b".to_string(), vec![1, 1], Init::Zeros));
    if c.gate_mode == GateMode::Learnable {
        for (site, depth) in gate_sites(c) {
            for (l, h) in c.placement.resolve(depth, c.heads) {
                out.push((gate_name(site, l, h), vec![1], Init::Zeros));
            }
        }
    }
    out
}

fn gate_sites(c: &ModelConfig) -> Vec<(&'static str, usize)> {
    let mut sites = Vec::new();
    if c.placement.site.text() {
        sites.push(("text", c.text_layers));
    }
    if c.placement.site.fusion() {
        sites.push(("fusion", c.fusion_layers));
    }
    sites
}

/// Checkpoint name of a learnable gate.
pub fn gate_name(site: &str, layer: usize, head: usize) -> String {
    format!("gate.{site}.L{layer}.H{head}")
}

/// Text-side operands of the fusion encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct TextFeatures {
    /// ordinary stream `F_T`, `[n_t, d]`
    pub f_t: Arc<Tensor>,
    /// function-word stream `F_Tf`, `[n_t, d]`
    pub f_tf: Arc<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    dictionary: FunctionWordDictionary,
    vocab_index: HashMap<String, usize>,
    patch_index: Arc<Vec<usize>>,
}

impl Model {
    /// Fresh model with weights drawn from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        for (name, shape, init) in param_specs(&config) {
            let t = match init {
                Init::Normal(std) => Tensor::randn(&shape, std, &mut rng),
                Init::Zeros => Tensor::zeros(&shape),
            };
            params.insert(name, t);
        }
        Self::from_parts(config, params, FunctionWordDictionary::builtin())
    }

    /// Assembles a model from stored weights, checking every expected
    /// parameter is present with the right shape.
    pub fn from_parts(
        config: ModelConfig,
        params: ParamStore,
        dictionary: FunctionWordDictionary,
    ) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        for (name, shape, _) in &specs {
            let t = params.require(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        if params.len() != specs.len() {
            return Err(Error::Format(format!(
                "{} parameters stored, {} expected",
                params.len(),
                specs.len()
            )));
        }
        let vocab_index = config
            .vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        let patch_index = Arc::new(patch_index(&config));
        Ok(Self {
            config,
            params,
            dictionary,
            vocab_index,
            patch_index,
        })
    }

    /// Same weights under a different placement / gate mode. Gates that
    /// exist in both keep their values; new learnable gates start at 0.
    pub fn with_placement(&self, placement: PlacementSpec, gate_mode: GateMode) -> Result<Self> {
        let config = ModelConfig {
            placement,
            gate_mode,
            ..self.config.clone()
        };
        config.validate()?;
        let mut params = ParamStore::new();
        for (name, shape, _) in param_specs(&config) {
            let t = self
                .params
                .get(&name)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(&shape));
            params.insert(name, t);
        }
        Self::from_parts(config, params, self.dictionary.clone())
    }

    pub fn with_dictionary(mut self, dictionary: FunctionWordDictionary) -> Self {
        self.dictionary = dictionary;
        self
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Replaces one parameter; the shape must match.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let current = self.params.require(name)?;
        if current.shape() != value.shape() {
            return Err(Error::shape(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                current.shape(),
                value.shape()
            )));
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn dictionary(&self) -> &FunctionWordDictionary {
        &self.dictionary
    }

    /// Number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Effective gate value of every placed `(site, layer, head)`.
    pub fn gate_values(&self) -> Vec<(String, usize, usize, f64)> {
        let c = &self.config;
        let mut out = Vec::new();
        for (site, depth) in gate_sites(c) {
            for (l, h) in c.placement.resolve(depth, c.heads) {
                let g = match c.gate_mode {
                    GateMode::Fixed(g) => g,
                    GateMode::Learnable => {
                        let raw = self.params.get(&gate_name(site, l, h)).map_or(0.0, |t| t.data()[0]);
                        crate::tensor::logistic(raw)
                    }
                };
                out.push((site.to_string(), l, h, g));
            }
        }
        out
    }

    /// Vocabulary ids; unknown tokens map to `[UNK]`.
    pub fn token_ids(&self, seq: &TokenSequence) -> Vec<usize> {
        let unk = self.vocab_index[UNK];
        seq.tokens()
            .iter()
            .map(|t| self.vocab_index.get(t).copied().unwrap_or(unk))
            .collect()
    }

    fn check_image(&self, pixels: &Tensor) -> Result<()> {
        let c = &self.config;
        let want = [c.image_size, c.image_size, c.channels];
        if pixels.shape() != want {
            return Err(Error::shape(format!(
                "image shape {:?}, expected {want:?}",
                pixels.shape()
            )));
        }
        if let Some(v) = pixels.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Range(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(())
    }

    fn check_text(&self, seq: &TokenSequence) -> Result<()> {
        if seq.len() > self.config.max_len {
            return Err(Error::TooLong {
                len: seq.len(),
                max: self.config.max_len,
            });
        }
        Ok(())
    }

    fn attn_weights(&self, w: &Bound<'_>, prefix: &str) -> Result<AttentionWeights<Var>> {
        let v = |n: &str| w.var(&format!("{prefix}.attn.{n}"));
        Ok(AttentionWeights {
            wq: v("wq")?,
            bq: v("bq")?,
            wk: v("wk")?,
            bk: v("bk")?,
            wv: v("wv")?,
            bv: v("bv")?,
            wo: v("wo")?,
            bo: v("bo")?,
        })
    }

    /// `x + W₂·relu(W₁·LN(x) + b₁) + b₂`
    fn mlp(&self, tape: &mut Tape, w: &Bound<'_>, prefix: &str, x: Var) -> Result<Var> {
        let v = |n: &str| w.var(&format!("{prefix}.mlp.{n}"));
        let n = tape.layer_norm(x, LN_EPS)?;
        let h = project(tape, n, v("w1")?, v("b1")?)?;
        let h = tape.relu(h)?;
        let h = project(tape, h, v("w2")?, v("b2")?)?;
        tape.add(x, h)
    }

    fn gate_table(&self, w: &Bound<'_>, site: &str, depth: usize) -> Result<GateTable> {
        let c = &self.config;
        c.placement
            .resolve(depth, c.heads)
            .into_iter()
            .map(|(l, h)| {
                let gate = match c.gate_mode {
                    GateMode::Fixed(g) => Gate::Fixed(g),
                    GateMode::Learnable => Gate::Learned(w.var(&gate_name(site, l, h))?),
                };
                Ok(((l, h), gate))
            })
            .collect()
    }

    /// Visual features `[n_v, d]` of `pixels` recorded on `tape`.
    pub fn image_on(&self, tape: &mut Tape, w: &Bound<'_>, pixels: Var) -> Result<Var> {
        let c = &self.config;
        let n_p = c.patches_per_side().pow(2);
        let patch_dim = c.patch_size * c.patch_size * c.channels;
        let patches = tape.gather(pixels, self.patch_index.to_vec(), &[n_p, patch_dim])?;
        let x = project(tape, patches, w.var("patch.w")?, w.var("patch.b")?)?;
        let x = tape.concat(&[w.var("vis.cls")?, x], 0)?;
        let mut x = tape.add(x, w.var("vis.pos")?)?;
        for l in 0..c.vision_layers {
            let prefix = format!("vis.L{l}");
            let n = tape.layer_norm(x, LN_EPS)?;
            let a = multihead_attention(tape, n, n, &self.attn_weights(w, &prefix)?, c.layout(), None)?;
            x = tape.add(x, a)?;
            x = self.mlp(tape, w, &prefix, x)?;
        }
        tape.layer_norm(x, LN_EPS)
    }

    /// Ordinary and function-word text streams recorded on `tape`.
    /// `fda` enables de-attention in the text stack when the placement
    /// covers it.
    pub fn text_on(
        &self,
        tape: &mut Tape,
        w: &Bound<'_>,
        seq: &TokenSequence,
        fmask: &TokenMask,
        fda: bool,
    ) -> Result<(Var, Var)> {
        self.check_text(seq)?;
        if fmask.len() != seq.len() {
            return Err(Error::LengthMismatch {
                expected: seq.len(),
                got: fmask.len(),
            });
        }
        let c = &self.config;
        let (n, d) = (seq.len(), c.width);
        let ids = self.token_ids(seq);
        let index = ids.iter().flat_map(|&id| (0..d).map(move |j| id * d + j)).collect();
        let emb = tape.gather(w.var("tok.emb")?, index, &[n, d])?;
        let pos = tape.slice(w.var("tok.pos")?, 0, 0, n)?;
        let x0 = tape.add(emb, pos)?;

        let text_site = fda && c.placement.site.text() && !c.placement.is_empty();
        let gates = if text_site {
            self.gate_table(w, "text", c.text_layers)?
        } else {
            GateTable::new()
        };
        // With nothing masked and no text-side de-attention the two streams
        // coincide.
        let shared = fmask.is_all() && !text_site;
        let (mut h, mut hf) = (x0, x0);
        for l in 0..c.text_layers {
            let prefix = format!("text.L{l}");
            let aw = self.attn_weights(w, &prefix)?;
            let nf = tape.layer_norm(hf, LN_EPS)?;
            if !shared {
                let af = multihead_attention(tape, nf, nf, &aw, c.layout(), Some(fmask.bits()))?;
                let hf_next = tape.add(hf, af)?;
                let hf_next = self.mlp(tape, w, &prefix, hf_next)?;
                let nh = tape.layer_norm(h, LN_EPS)?;
                let inputs = AttentionInputs {
                    query: nh,
                    kv: nh,
                    fda_query: Some(nh),
                    fda_kv: Some(nf),
                    key_mask: None,
                };
                let site = text_site.then_some(FdaSite {
                    placement: &c.placement,
                    gates: &gates,
                    layer: l,
                    depth: c.text_layers,
                    min_mode: c.min_mode,
                });
                let a = fda_multihead(tape, inputs, &aw, c.layout(), site)?;
                h = tape.add(h, a)?;
                h = self.mlp(tape, w, &prefix, h)?;
                hf = hf_next;
            } else {
                let a = multihead_attention(tape, nf, nf, &aw, c.layout(), None)?;
                hf = tape.add(hf, a)?;
                hf = self.mlp(tape, w, &prefix, hf)?;
                h = hf;
            }
        }
        let f_t = tape.layer_norm(h, LN_EPS)?;
        let f_tf = if shared { f_t } else { tape.layer_norm(hf, LN_EPS)? };
        Ok((f_t, f_tf))
    }

    /// Fusion stream after the first `layers` fusion layers.
    fn fusion_stream(&self, tape: &mut Tape, w: &Bound<'_>, f_t: Var, f_tf: Var, f_v: Var, layers: usize) -> Result<Var> {
        let c = &self.config;
        let fusion_site = c.placement.site.fusion() && !c.placement.is_empty();
        let gates = if fusion_site {
            self.gate_table(w, "fusion", c.fusion_layers)?
        } else {
            GateTable::new()
        };
        let mut h = f_t;
        for l in 0..layers {
            let prefix = format!("fusion.L{l}");
            let n = tape.layer_norm(h, LN_EPS)?;
            let site = fusion_site.then_some(FdaSite {
                placement: &c.placement,
                gates: &gates,
                layer: l,
                depth: c.fusion_layers,
                min_mode: c.min_mode,
            });
            let a = fda_multihead(
                tape,
                AttentionInputs::fusion(n, f_tf, f_v),
                &self.attn_weights(w, &prefix)?,
                c.layout(),
                site,
            )?;
            h = tape.add(h, a)?;
            h = self.mlp(tape, w, &prefix, h)?;
        }
        Ok(h)
    }

    /// Matching logit `[1, 1]` from the fusion encoder.
    pub fn fuse_on(&self, tape: &mut Tape, w: &Bound<'_>, f_t: Var, f_tf: Var, f_v: Var) -> Result<Var> {
        let h = self.fusion_stream(tape, w, f_t, f_tf, f_v, self.config.fusion_layers)?;
        let n = tape.layer_norm(h, LN_EPS)?;
        let cls = tape.slice(n, 0, 0, 1)?;
        project(tape, cls, w.var("head.w")?, w.var("head.b")?)
    }

    /// Attention probabilities of fusion `(layer, head)` together with the
    /// gate in force there (0 where FDA is not placed).
    pub fn fusion_head_maps(
        &self,
        image: &Tensor,
        seq: &TokenSequence,
        layer: usize,
        head: usize,
    ) -> Result<(HeadMaps, f64)> {
        let c = &self.config;
        if layer >= c.fusion_layers || head >= c.heads {
            return Err(Error::InvalidIndex(format!(
                "fusion L{layer} H{head} (model has {} layers, {} heads)",
                c.fusion_layers, c.heads
            )));
        }
        self.check_image(image)?;
        let text = self.text_features(seq)?;
        let mut tape = Tape::new();
        let w = self.params.bind(&mut tape, false);
        let px = tape.constant(image.clone());
        let fv = self.image_on(&mut tape, &w, px)?;
        let ft = tape.constant(Arc::clone(&text.f_t));
        let ftf = tape.constant(Arc::clone(&text.f_tf));
        let h = self.fusion_stream(&mut tape, &w, ft, ftf, fv, layer)?;
        let n = tape.layer_norm(h, LN_EPS)?;
        let aw = self.attn_weights(&w, &format!("fusion.L{layer}"))?;
        let maps = head_maps(&mut tape, n, ftf, fv, &aw, c.layout(), head)?;
        let gate = self
            .gate_values()
            .into_iter()
            .find(|(s, l, h, _)| s == "fusion" && *l == layer && *h == head)
            .map_or(0.0, |(_, _, _, g)| g);
        Ok((maps, gate))
    }

    /// `F_V`: `[n_v, d]` visual features, `[CLS]` first.
    pub fn encode_image(&self, pixels: &Tensor) -> Result<Tensor> {
        self.check_image(pixels)?;
        let mut tape = Tape::new();
        let w = self.params.bind(&mut tape, false);
        let x = tape.constant(pixels.clone());
        let f = self.image_on(&mut tape, &w, x)?;
        Ok(tape.value(f).clone())
    }

    /// One text stream whose self-attention keys are limited to `mask`.
    /// The all-ones mask gives `F_T`, the function-word mask `F_Tf`.
    /// Text-side de-attention is not applied here; see [`Model::text_features`].
    pub fn encode_text(&self, seq: &TokenSequence, mask: &TokenMask) -> Result<Tensor> {
        let mut tape = Tape::new();
        let w = self.params.bind(&mut tape, false);
        let (_, f) = self.text_on(&mut tape, &w, seq, mask, false)?;
        Ok(tape.value(f).clone())
    }

    /// `F_T` and `F_Tf` using the model's function-word dictionary.
    pub fn text_features(&self, seq: &TokenSequence) -> Result<TextFeatures> {
        let mask = function_word_mask(seq, &self.dictionary);
        self.text_features_with_mask(seq, &mask)
    }

    /// `F_T` and `F_Tf` for an explicit function-word mask.
    pub fn text_features_with_mask(&self, seq: &TokenSequence, mask: &TokenMask) -> Result<TextFeatures> {
        let mut tape = Tape::new();
        let w = self.params.bind(&mut tape, false);
        let (f_t, f_tf) = self.text_on(&mut tape, &w, seq, mask, true)?;
        Ok(TextFeatures {
            f_t: tape.value_arc(f_t),
            f_tf: tape.value_arc(f_tf),
        })
    }

    /// Matching logit from precomputed features.
    pub fn score_features(&self, f_v: &Tensor, text: &TextFeatures) -> Result<f64> {
        let mut tape = Tape::new();
        let w = self.params.bind(&mut tape, false);
        let fv = tape.constant(f_v.clone());
        let ft = tape.constant(Arc::clone(&text.f_t));
        let ftf = tape.constant(Arc::clone(&text.f_tf));
        let s = self.fuse_on(&mut tape, &w, ft, ftf, fv)?;
        tape.value(s).item()
    }

    /// Image–text matching logit; higher means a better match.
    pub fn score(&self, image: &Tensor, seq: &TokenSequence) -> Result<f64> {
        let f_v = self.encode_image(image)?;
        self.score_features(&f_v, &self.text_features(seq)?)
    }

    /// Logit and its gradient with respect to the pixels.
    pub fn score_with_pixel_grad(&self, image: &Tensor, text: &TextFeatures) -> Result<(f64, Tensor)> {
        self.check_image(image)?;
        let mut tape = Tape::new();
        let w = self.params.bind(&mut tape, false);
        let x = tape.param(image.clone());
        let fv = self.image_on(&mut tape, &w, x)?;
        let ft = tape.constant(Arc::clone(&text.f_t));
        let ftf = tape.constant(Arc::clone(&text.f_tf));
        let s = self.fuse_on(&mut tape, &w, ft, ftf, fv)?;
        let score = tape.value(s).item()?;
        let mut grads = tape.backward(s)?;
        let g = grads.take(x).expect("pixels are a trainable leaf");
        Ok((score, g))
    }

    /// Cosine similarity of each text token (`F_T` row) with the visual
    /// `[CLS]` feature.
    pub fn token_image_similarity(&self, image: &Tensor, seq: &TokenSequence) -> Result<Vec<f64>> {
        let f_v = self.encode_image(image)?;
        let f_t = self.encode_text(seq, &TokenMask::all(seq.len()))?;
        let v = f_v.row(0);
        let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        Ok((0..seq.len())
            .map(|i| {
                let t = f_t.row(i);
                t.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / (norm(t) * norm(v))
            })
            .collect())
    }
}

/// Flat pixel index of every patch element, patches in row-major order.
fn patch_index(c: &ModelConfig) -> Vec<usize> {
    let (p, s, ch) = (c.patch_size, c.patches_per_side(), c.channels);
    let mut idx = Vec::with_capacity(c.image_size * c.image_size * ch);
    for pr in 0..s {
        for pc in 0..s {
            for i in 0..p {
                for j in 0..p {
                    let (y, x) = (pr * p + i, pc * p + j);
                    for k in 0..ch {
                        idx.push((y * c.image_size + x) * ch + k);
                    }
                }
            }
        }
    }
    idx
}
