//! The assembled PsPG classifier: frozen backbone features, spatial fusion,
//! prompt decoder(s) and the dual-prompt probability head.

use serde::{Deserialize, Serialize};

use crate::backbone::{self, embed_tokens, encode_text_embedded, BackboneConfig, TextTokens};
use crate::classifier::{aggregated_similarity, AggregationMode};
use crate::decoder::{DecoderConfig, DecoderLayout, PromptGenerator, PromptMode};
use crate::error::{dim_err, Error, Result};
use crate::fusion;
use crate::objectives::{asl_loss, cooccurrence_targets, pairwise_prompt_features, pcl_loss, spcl_loss, total_loss, LabelBatch, LossConfig};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor, Var};

/// Which image positions feed the similarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpatialFeatures {
    /// Global feature only.
    Global,
    /// Global and local features, equally weighted.
    GlobalLocal,
    /// Global and local features gated by the spatial fusion kernel.
    Fused,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub decoder: DecoderConfig,
    pub features: SpatialFeatures,
    pub aggregation: AggregationMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            decoder: DecoderConfig::default(),
            features: SpatialFeatures::Fused,
            aggregation: AggregationMode::Mean,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.decoder.validate()?;
        // pairs (2n) and prefix + name (n + n_max) both fit in 2·n_max
        if self.decoder.n > self.backbone.n_max {
            return Err(Error::Config(format!(
                "prompt length {} too long for n_max {}",
                self.decoder.n, self.backbone.n_max
            )));
        }
        Ok(())
    }
}

/// Frozen-backbone inputs for one batch.
#[derive(Debug, Clone)]
pub struct FrozenInputs<'a> {
    /// `[B, d_vlp]`
    pub global: &'a Tensor,
    /// `[B, c_local, d_vlp]`
    pub local: &'a Tensor,
    /// `[N_c, d_vlp]`
    pub class_feats: &'a Tensor,
    pub class_tokens: &'a [TextTokens],
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOut {
    /// `[B, N_c]`
    pub probs: Var,
    pub pos_sim: Var,
    pub neg_sim: Option<Var>,
    /// `[N_c, n, d_embed]`
    pub pos_prompts: Var,
    /// `[B, L, d_vlp]`
    pub positions: Var,
    /// `[B, L]` when fusion is on.
    pub gate: Option<Var>,
    /// `1/τ`
    pub scale: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub asl: Var,
    pub pairwise: Option<Var>,
    pub total: Var,
    pub clamped: usize,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub generator: PromptGenerator,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let generator = PromptGenerator::new(&cfg.decoder, cfg.backbone.d_vlp, cfg.backbone.d_embed)?;
        Ok(Self { cfg, generator })
    }

    /// Adds decoder and fusion parameters to `store`.
    pub fn init_prompt_params(&self, store: &mut ParamStore, rng: &mut Rng) {
        self.generator.init_params(store, rng);
        if self.cfg.features == SpatialFeatures::Fused {
            fusion::init_params(store, rng);
        }
    }

    /// Names of the tensors trained in the prompt-learning phase.
    pub fn prompt_prefixes(&self) -> Vec<String> {
        let mut p: Vec<String> = self.generator.decoders().iter().map(|d| d.prefix().to_string()).collect();
        if self.cfg.features == SpatialFeatures::Fused {
            p.push(fusion::KERNEL.to_string());
        }
        p
    }

    /// Global `[B, d_vlp]` and local `[B, c_local, d_vlp]` features.
    pub fn image_features(&self, store: &ParamStore, images: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let x = g.constant(images.clone())?;
        let out = backbone::encode_images(&mut g, store, &self.cfg.backbone, x)?;
        Ok((g.value(out.global)?, g.value(out.local)?))
    }

    /// Class-name text features `[N_c, d_vlp]`.
    pub fn class_features(&self, store: &ParamStore, class_tokens: &[TextTokens]) -> Result<Tensor> {
        let mut g = Graph::new();
        let refs: Vec<&TextTokens> = class_tokens.iter().collect();
        let out = backbone::encode_texts(&mut g, store, &self.cfg.backbone, &refs)?;
        g.value(out)
    }

    /// Encodes `[N_c, n, d_embed]` prompts through the embedding bypass.
    pub fn encode_prompts(&self, g: &mut Graph, store: &ParamStore, prompts: Var, class_tokens: &[TextTokens]) -> Result<Var> {
        let bcfg = &self.cfg.backbone;
        match self.cfg.decoder.mode {
            PromptMode::FullPrompt => encode_text_embedded(g, store, bcfg, prompts, None),
            PromptMode::Prefix => {
                let refs: Vec<&TextTokens> = class_tokens.iter().collect();
                let (names, lengths) = embed_tokens(g, store, bcfg, &refs)?;
                let seq = g.concat(&[prompts, names], 1)?;
                let n = self.cfg.decoder.n;
                let lengths: Vec<usize> = lengths.iter().map(|l| l + n).collect();
                encode_text_embedded(g, store, bcfg, seq, Some(&lengths))
            }
        }
    }

    /// Image positions `[B, L, d_vlp]` and the optional fusion gate.
    pub fn positions(&self, g: &mut Graph, store: &ParamStore, global: Var, local: Var) -> Result<(Var, Option<Var>)> {
        match self.cfg.features {
            SpatialFeatures::Global => {
                let s = g.shape(global)?.to_vec();
                Ok((g.reshape(global, &[s[0], 1, s[1]])?, None))
            }
            SpatialFeatures::GlobalLocal => Ok((fusion::concat_positions(g, global, local)?, None)),
            SpatialFeatures::Fused => {
                let f = fusion::fuse_batch(g, store, global, local)?;
                Ok((f.features, Some(f.gate)))
            }
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, inputs: &FrozenInputs) -> Result<ForwardOut> {
        let n_classes = inputs.class_tokens.len();
        if inputs.class_feats.rank() != 2 || inputs.class_feats.shape()[0] != n_classes || n_classes == 0 {
            return dim_err(
                "predict",
                format!("{n_classes} class names vs features {:?}", inputs.class_feats.shape()),
            );
        }
        let scale = 1.0 / backbone::temperature(store)?;
        let gl = g.constant(inputs.global.clone())?;
        let lo = g.constant(inputs.local.clone())?;
        let cf = g.constant(inputs.class_feats.clone())?;
        let (positions, gate) = self.positions(g, store, gl, lo)?;

        let prompts = self.generator.generate(g, store, cf, gl)?;
        let mode = self.cfg.aggregation;
        let w_pos = self.encode_prompts(g, store, prompts.pos, inputs.class_tokens)?;
        let pos_sim = aggregated_similarity(g, positions, gate, w_pos, mode)?;
        let neg_sim = match prompts.neg {
            Some(neg) => {
                let w_neg = self.encode_prompts(g, store, neg, inputs.class_tokens)?;
                Some(aggregated_similarity(g, positions, gate, w_neg, mode)?)
            }
            None => None,
        };
        let logit = match neg_sim {
            Some(n) => g.sub(pos_sim, n)?,
            None => pos_sim,
        };
        let logit = g.scale(logit, scale)?;
        let probs = g.sigmoid(logit)?;
        Ok(ForwardOut {
            probs,
            pos_sim,
            neg_sim,
            pos_prompts: prompts.pos,
            positions,
            gate,
            scale,
        })
    }

    /// Pairwise co-occurrence probabilities `[B, C(N_c, 2)]`.
    pub fn pair_probs(&self, g: &mut Graph, store: &ParamStore, out: &ForwardOut) -> Result<Option<Var>> {
        let Some(w_pair) = pairwise_prompt_features(g, store, &self.cfg.backbone, out.pos_prompts)? else {
            return Ok(None);
        };
        let s = aggregated_similarity(g, out.positions, out.gate, w_pair, self.cfg.aggregation)?;
        let s = g.scale(s, out.scale)?;
        g.sigmoid(s).map(Some)
    }

    /// ASL plus the configured pairwise term.
    pub fn loss(&self, g: &mut Graph, store: &ParamStore, out: &ForwardOut, labels: &LabelBatch, cfg: &LossConfig) -> Result<LossTerms> {
        let asl = asl_loss(g, out.probs, labels, cfg)?;
        let mut clamped = asl.clamped;
        let pairwise = if cfg.spcl_enabled {
            match self.pair_probs(g, store, out)? {
                Some(pp) => {
                    let l = if cfg.pcl_variant {
                        pcl_loss(g, pp, labels)?
                    } else {
                        spcl_loss(g, pp, &cooccurrence_targets(labels))?
                    };
                    clamped += l.clamped;
                    Some(l.loss)
                }
                None => None,
            }
        } else {
            None
        };
        let total = total_loss(g, asl.loss, pairwise)?;
        Ok(LossTerms {
            asl: asl.loss,
            pairwise,
            total,
            clamped,
        })
    }

    pub fn layout(&self) -> DecoderLayout {
        self.cfg.decoder.layout
    }
}
