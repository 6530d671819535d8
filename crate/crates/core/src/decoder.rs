//! Autoregressive prompt decoder.
//!
//! Per step `i` every class row runs
//!
//! ```text
//! h'_i = GRU(t_{i-1}, h_{i-1})
//! h_i  = SelfAttn(h'_i)                    (attends across classes)
//! ctx  = CrossAttn(h_i, c')                (attends over the image batch)
//! o_i  = (h_i + ctx) · W_out               (D_h -> D_in, fed back as t_i)
//! ```
//!
//! with `h_0 = 0`, `t_0` the class text features and `c'` a linear map of the
//! batch's global image features duplicated per class. The `n` outputs are
//! projected `D_in -> D_out` to give the pseudo-prompt embedding vectors.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::nn::{gru_step, init_gru, linear, MultiHeadAttention};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor, Var};

pub const POS_PREFIX: &str = "decoder.pos";
pub const NEG_PREFIX: &str = "decoder.neg";
pub const SINGLE_PREFIX: &str = "decoder.single";

/// How generated vectors are turned into text-encoder input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptMode {
    /// The `n` vectors are the whole input sequence.
    FullPrompt,
    /// The `n` vectors are prepended to the class-name token embeddings.
    Prefix,
}

/// Which decoders produce the positive/negative prompts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecoderLayout {
    /// Two independent decoders.
    Dual,
    /// One decoder whose output is split into positive and negative halves.
    Single,
    /// Positive prompts only.
    PosOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub n: usize,
    pub d_h: usize,
    pub heads: usize,
    pub mode: PromptMode,
    pub layout: DecoderLayout,
    pub init_std: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            n: 16,
            d_h: 64,
            heads: 4,
            mode: PromptMode::FullPrompt,
            layout: DecoderLayout::Dual,
            init_std: 0.02,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("prompt length n must be >= 1".into()));
        }
        if self.heads == 0 || self.d_h % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} not divisible by {} heads",
                self.d_h, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

/// Per-class embedding sequences `[N_c, n, D_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoPrompt {
    pub vectors: Tensor,
    pub polarity: Polarity,
}

/// One decoder's parameters live under `prefix`.
#[derive(Debug, Clone)]
pub struct Decoder {
    prefix: String,
    n: usize,
    d_in: usize,
    d_h: usize,
    d_out: usize,
    self_attn: MultiHeadAttention,
    cross_attn: MultiHeadAttention,
}

impl Decoder {
    pub fn new(prefix: &str, cfg: &DecoderConfig, d_in: usize, d_out: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            prefix: prefix.to_string(),
            n: cfg.n,
            d_in,
            d_h: cfg.d_h,
            d_out,
            self_attn: MultiHeadAttention::new(format!("{prefix}.self_attn"), cfg.d_h, cfg.heads)?,
            cross_attn: MultiHeadAttention::new(format!("{prefix}.cross_attn"), cfg.d_h, cfg.heads)?,
        })
    }

    fn name(&self, s: &str) -> String {
        format!("{}.{s}", self.prefix)
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn init(&self, store: &mut ParamStore, std: f64, rng: &mut Rng) {
        init_gru(store, &self.name("gru"), self.d_in, self.d_h, std, rng);
        self.self_attn.init(store, std, rng);
        self.cross_attn.init(store, std, rng);
        store.init_randn(&self.name("context_proj"), &[self.d_in, self.d_h], std, rng);
        store.init_randn(&self.name("out_proj"), &[self.d_h, self.d_in], std, rng);
        store.init_randn(&self.name("prompt_proj"), &[self.d_in, self.d_out], std, rng);
    }

    pub fn gru_cell(&self, g: &mut Graph, store: &ParamStore, t_prev: Var, h_prev: Var) -> Result<Var> {
        let st = g.shape(t_prev)?.to_vec();
        let sh = g.shape(h_prev)?.to_vec();
        if st.len() != 2 || sh.len() != 2 || st[0] != sh[0] || st[1] != self.d_in || sh[1] != self.d_h {
            return dim_err("gru_cell", format!("t {st:?}, h {sh:?}"));
        }
        gru_step(g, store, &self.name("gru"), t_prev, h_prev)
    }

    pub fn self_attention(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Result<Var> {
        self.self_attn.self_attend(g, store, h)
    }

    /// `c' [N_c, B, D_h]`: the batch's global features mapped to `D_h` and
    /// duplicated once per class.
    pub fn context_memory(&self, g: &mut Graph, store: &ParamStore, batch_global: Var, n_classes: usize) -> Result<Var> {
        let s = g.shape(batch_global)?.to_vec();
        if s.len() != 2 || s[1] != self.d_in {
            return dim_err("generate", format!("batch_global {s:?}, expected [B, {}]", self.d_in));
        }
        if s[0] == 0 {
            return dim_err("generate", "empty image batch");
        }
        let c = linear(g, store, batch_global, &self.name("context_proj"), None)?;
        let c = g.reshape(c, &[1, s[0], self.d_h])?;
        g.index_select(c, 0, &vec![0; n_classes])
    }

    pub fn cross_attention_context(&self, g: &mut Graph, store: &ParamStore, h: Var, memory: Var) -> Result<Var> {
        let mem = self.cross_attn.project_memory(g, store, memory)?;
        self.cross_attn.attend(g, store, h, &mem)
    }

    /// Unrolls `n` steps; returns `[N_c, n, D_out]`.
    pub fn generate(&self, g: &mut Graph, store: &ParamStore, class_feats: Var, batch_global: Var) -> Result<Var> {
        let s = g.shape(class_feats)?.to_vec();
        if s.len() != 2 || s[1] != self.d_in || s[0] == 0 {
            return dim_err("generate", format!("class_feats {s:?}, expected [N_c, {}]", self.d_in));
        }
        let n_classes = s[0];
        let memory = self.context_memory(g, store, batch_global, n_classes)?;
        let mem = self.cross_attn.project_memory(g, store, memory)?;

        let mut h = g.constant(Tensor::zeros(&[n_classes, self.d_h]))?;
        let mut t = class_feats;
        let mut outputs = Vec::with_capacity(self.n);
        for _ in 0..self.n {
            let h_pre = self.gru_cell(g, store, t, h)?;
            h = self.self_attention(g, store, h_pre)?;
            let ctx = self.cross_attn.attend(g, store, h, &mem)?;
            let o_pre = g.add(h, ctx)?;
            let o = linear(g, store, o_pre, &self.name("out_proj"), None)?;
            outputs.push(g.reshape(o, &[n_classes, 1, self.d_in])?);
            t = o;
        }
        let seq = g.concat(&outputs, 1)?;
        let flat = g.reshape(seq, &[n_classes * self.n, self.d_in])?;
        let prompts = linear(g, store, flat, &self.name("prompt_proj"), None)?;
        g.reshape(prompts, &[n_classes, self.n, self.d_out])
    }
}

/// Graph handles of generated prompts, each `[N_c, n, D_out]`.
#[derive(Debug, Clone, Copy)]
pub struct GeneratedPrompts {
    pub pos: Var,
    pub neg: Option<Var>,
}

/// The decoder(s) selected by [`DecoderLayout`].
#[derive(Debug, Clone)]
pub struct PromptGenerator {
    cfg: DecoderConfig,
    d_out: usize,
    decoders: Vec<Decoder>,
}

impl PromptGenerator {
    pub fn new(cfg: &DecoderConfig, d_in: usize, d_out: usize) -> Result<Self> {
        cfg.validate()?;
        let decoders = match cfg.layout {
            DecoderLayout::Dual => vec![
                Decoder::new(POS_PREFIX, cfg, d_in, d_out)?,
                Decoder::new(NEG_PREFIX, cfg, d_in, d_out)?,
            ],
            DecoderLayout::Single => vec![Decoder::new(SINGLE_PREFIX, cfg, d_in, 2 * d_out)?],
            DecoderLayout::PosOnly => vec![Decoder::new(POS_PREFIX, cfg, d_in, d_out)?],
        };
        Ok(Self {
            cfg: cfg.clone(),
            d_out,
            decoders,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    pub fn decoders(&self) -> &[Decoder] {
        &self.decoders
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut Rng) {
        for d in &self.decoders {
            d.init(store, self.cfg.init_std, rng);
        }
    }

    pub fn generate(&self, g: &mut Graph, store: &ParamStore, class_feats: Var, batch_global: Var) -> Result<GeneratedPrompts> {
        match self.cfg.layout {
            DecoderLayout::Dual => Ok(GeneratedPrompts {
                pos: self.decoders[0].generate(g, store, class_feats, batch_global)?,
                neg: Some(self.decoders[1].generate(g, store, class_feats, batch_global)?),
            }),
            DecoderLayout::Single => {
                let both = self.decoders[0].generate(g, store, class_feats, batch_global)?;
                let d = self.d_out;
                let pos = g.index_select(both, 2, &(0..d).collect::<Vec<_>>())?;
                let neg = g.index_select(both, 2, &(d..2 * d).collect::<Vec<_>>())?;
                Ok(GeneratedPrompts { pos, neg: Some(neg) })
            }
            DecoderLayout::PosOnly => Ok(GeneratedPrompts {
                pos: self.decoders[0].generate(g, store, class_feats, batch_global)?,
                neg: None,
            }),
        }
    }

    /// Value-level generation.
    pub fn generate_prompts(
        &self,
        store: &ParamStore,
        class_feats: &Tensor,
        batch_global: &Tensor,
    ) -> Result<(PseudoPrompt, Option<PseudoPrompt>)> {
        let mut g = Graph::new();
        let c = g.constant(class_feats.clone())?;
        let b = g.constant(batch_global.clone())?;
        let out = self.generate(&mut g, store, c, b)?;
        let pos = PseudoPrompt {
            vectors: g.value(out.pos)?,
            polarity: Polarity::Positive,
        };
        let neg = out
            .neg
            .map(|v| {
                Ok::<_, Error>(PseudoPrompt {
                    vectors: g.value(v)?,
                    polarity: Polarity::Negative,
                })
            })
            .transpose()?;
        Ok((pos, neg))
    }
}
