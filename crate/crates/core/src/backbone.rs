//! Small image/text encoder pair playing the role of the vision-language
//! backbone.
//!
//! The image encoder splits a raw vector into `c_local` contiguous patches,
//! maps each through a shared two-layer tanh perceptron (local features) and
//! projects the mean of the locals to a global feature. The text encoder is a
//! token embedding + learned positions + a single GRU pass whose final hidden
//! state is projected into the joint space. Pseudo-prompts enter the text
//! encoder after the embedding lookup ([`encode_text_embedded`]).

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::nn::{gru_step, init_gru, linear};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor, Var};

pub const IMAGE: &str = "image";
pub const TEXT: &str = "text";
pub const LOGIT_SCALE: &str = "logit_scale";

const W1: &str = "image.patch.w1";
const B1: &str = "image.patch.b1";
const W2: &str = "image.patch.w2";
const B2: &str = "image.patch.b2";
const WG: &str = "image.global.w";
const BG: &str = "image.global.b";
const TOKEN_EMB: &str = "text.token_embedding";
const POS_EMB: &str = "text.positional_embedding";
const TEXT_GRU: &str = "text.gru";
const TEXT_PROJ: &str = "text.proj";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub d_raw: usize,
    pub c_local: usize,
    pub d_vlp: usize,
    pub d_embed: usize,
    pub vocab_size: usize,
    pub n_max: usize,
    pub tau_init: f64,
    pub d_img_hidden: usize,
    pub d_text_hidden: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            d_raw: 64,
            c_local: 4,
            d_vlp: 32,
            d_embed: 16,
            vocab_size: 16,
            n_max: 32,
            tau_init: 0.07,
            d_img_hidden: 64,
            d_text_hidden: 32,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            self.d_raw,
            self.c_local,
            self.d_vlp,
            self.d_embed,
            self.vocab_size,
            self.n_max,
            self.d_img_hidden,
            self.d_text_hidden,
        ];
        if extents.contains(&0) {
            return Err(Error::Config("backbone extents must be >= 1".into()));
        }
        if self.d_raw % self.c_local != 0 {
            return Err(Error::Config(format!(
                "d_raw {} not divisible by c_local {}",
                self.d_raw, self.c_local
            )));
        }
        if !(self.tau_init > 0.0) {
            return Err(Error::Config("tau_init must be positive".into()));
        }
        Ok(())
    }

    pub fn patch_len(&self) -> usize {
        self.d_raw / self.c_local
    }

    /// Longest sequence the positional table admits (room for two
    /// concatenated prompts).
    pub fn max_embedded_len(&self) -> usize {
        2 * self.n_max
    }
}

/// Token ids of one text; non-empty, ids below the vocabulary size.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TextTokens(Vec<usize>);

impl TextTokens {
    pub fn new(ids: Vec<usize>, cfg: &BackboneConfig) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Config("empty token sequence".into()));
        }
        if ids.len() > cfg.n_max {
            return Err(Error::Config(format!(
                "token sequence of length {} exceeds n_max {}",
                ids.len(),
                cfg.n_max
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::Token {
                token: bad,
                vocab: cfg.vocab_size,
            });
        }
        Ok(Self(ids))
    }

    /// Unchecked constructor for ids that are validated later.
    pub fn from_ids(ids: Vec<usize>) -> Self {
        Self(ids)
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Global `[1, d_vlp]` and local `[c_local, d_vlp]` features of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedImage {
    pub global: Tensor,
    pub local: Tensor,
}

/// Graph handles for a batch of encoded images.
#[derive(Debug, Clone, Copy)]
pub struct ImageVars {
    /// `[B, d_vlp]`
    pub global: Var,
    /// `[B, c_local, d_vlp]`
    pub local: Var,
}

/// Fresh backbone parameters, all trainable.
pub fn init_params(cfg: &BackboneConfig, rng: &mut Rng) -> Result<ParamStore> {
    cfg.validate()?;
    let mut s = ParamStore::new();
    let p = cfg.patch_len();
    s.init_randn(W1, &[p, cfg.d_img_hidden], 1.0 / (p as f64).sqrt(), rng);
    s.init_zeros(B1, &[cfg.d_img_hidden]);
    s.init_randn(W2, &[cfg.d_img_hidden, cfg.d_vlp], 1.0 / (cfg.d_img_hidden as f64).sqrt(), rng);
    s.init_zeros(B2, &[cfg.d_vlp]);
    s.init_randn(WG, &[cfg.d_vlp, cfg.d_vlp], 1.0 / (cfg.d_vlp as f64).sqrt(), rng);
    s.init_zeros(BG, &[cfg.d_vlp]);

    s.init_randn(TOKEN_EMB, &[cfg.vocab_size, cfg.d_embed], 0.5, rng);
    s.init_randn(POS_EMB, &[cfg.max_embedded_len(), cfg.d_embed], 0.1, rng);
    init_gru(
        &mut s,
        TEXT_GRU,
        cfg.d_embed,
        cfg.d_text_hidden,
        1.0 / (cfg.d_embed as f64).sqrt(),
        rng,
    );
    s.init_randn(
        TEXT_PROJ,
        &[cfg.d_text_hidden, cfg.d_vlp],
        1.0 / (cfg.d_text_hidden as f64).sqrt(),
        rng,
    );
    s.insert(LOGIT_SCALE, Tensor::scalar((1.0 / cfg.tau_init).ln()).with_grad());
    Ok(s)
}

/// Current temperature `τ = exp(−logit_scale)`.
pub fn temperature(store: &ParamStore) -> Result<f64> {
    Ok((-store.get(LOGIT_SCALE)?.item()).exp())
}

/// Encodes a batch of raw images `[B, d_raw]`.
pub fn encode_images(g: &mut Graph, store: &ParamStore, cfg: &BackboneConfig, images: Var) -> Result<ImageVars> {
    let s = g.shape(images)?.to_vec();
    if s.len() != 2 || s[1] != cfg.d_raw {
        return dim_err("encode_image", format!("expected [B, {}], got {s:?}", cfg.d_raw));
    }
    let b = s[0];
    let patches = g.reshape(images, &[b * cfg.c_local, cfg.patch_len()])?;
    let hidden = linear(g, store, patches, W1, Some(B1))?;
    let hidden = g.tanh(hidden)?;
    let local = linear(g, store, hidden, W2, Some(B2))?;
    let local = g.reshape(local, &[b, cfg.c_local, cfg.d_vlp])?;
    let pooled = g.mean_axis(local, 1)?;
    let global = linear(g, store, pooled, WG, Some(BG))?;
    Ok(ImageVars { global, local })
}

/// Value-level encoder for a single raw image vector.
pub fn encode_image(store: &ParamStore, cfg: &BackboneConfig, x: &[f64]) -> Result<EncodedImage> {
    if x.len() != cfg.d_raw {
        return dim_err("encode_image", format!("expected length {}, got {}", cfg.d_raw, x.len()));
    }
    let mut g = Graph::new();
    let xv = g.constant(Tensor::new(vec![1, cfg.d_raw], x.to_vec())?)?;
    let out = encode_images(&mut g, store, cfg, xv)?;
    Ok(EncodedImage {
        global: g.value(out.global)?,
        local: g.value(out.local)?.reshaped(&[cfg.c_local, cfg.d_vlp])?,
    })
}

/// Token-embedding lookup for a batch of texts, right-padded with token 0.
/// Returns `[S, L, d_embed]` and the true lengths.
pub fn embed_tokens(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &BackboneConfig,
    texts: &[&TextTokens],
) -> Result<(Var, Vec<usize>)> {
    if texts.is_empty() {
        return dim_err("embed_tokens", "no texts");
    }
    let max_len = texts.iter().map(|t| t.len()).max().unwrap_or(0);
    if max_len == 0 {
        return Err(Error::Config("empty token sequence".into()));
    }
    let mut ids = Vec::with_capacity(texts.len() * max_len);
    for t in texts {
        for &id in t.ids() {
            if id >= cfg.vocab_size {
                return Err(Error::Token {
                    token: id,
                    vocab: cfg.vocab_size,
                });
            }
            ids.push(id);
        }
        ids.extend(std::iter::repeat(0).take(max_len - t.len()));
    }
    let table = store.bind(g, TOKEN_EMB)?;
    let rows = g.index_select(table, 0, &ids)?;
    let emb = g.reshape(rows, &[texts.len(), max_len, cfg.d_embed])?;
    Ok((emb, texts.iter().map(|t| t.len()).collect()))
}

/// Embedding-bypass entry point: `[S, L, d_embed]` sequences (plus optional
/// true lengths for right-padded batches) to `[S, d_vlp]` features.
pub fn encode_text_embedded(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &BackboneConfig,
    emb: Var,
    lengths: Option<&[usize]>,
) -> Result<Var> {
    let s = g.shape(emb)?.to_vec();
    if s.len() != 3 || s[2] != cfg.d_embed {
        return dim_err("encode_text_embedded", format!("expected [S, L, {}], got {s:?}", cfg.d_embed));
    }
    let (n_seq, len) = (s[0], s[1]);
    if len == 0 {
        return dim_err("encode_text_embedded", "empty sequence");
    }
    if len > cfg.max_embedded_len() {
        return Err(Error::Config(format!(
            "embedded sequence length {len} exceeds {}",
            cfg.max_embedded_len()
        )));
    }
    if let Some(l) = lengths {
        if l.len() != n_seq || l.iter().any(|&x| x == 0 || x > len) {
            return dim_err("encode_text_embedded", "invalid sequence lengths");
        }
    }
    let ragged = lengths.filter(|l| l.iter().any(|&x| x != len));

    let pos_table = store.bind(g, POS_EMB)?;
    let positions: Vec<usize> = (0..len).collect();
    let pos = g.index_select(pos_table, 0, &positions)?;
    let x = g.add_trailing(emb, pos)?;

    let hd = cfg.d_text_hidden;
    let mut h = g.constant(Tensor::zeros(&[n_seq, hd]))?;
    for step in 0..len {
        let xs = g.select(x, 1, step)?;
        let next = gru_step(g, store, TEXT_GRU, xs, h)?;
        h = match ragged {
            Some(l) if l.iter().any(|&x| step >= x) => {
                let mut m = Vec::with_capacity(n_seq * hd);
                for &x in l {
                    let v = if step < x { 1.0 } else { 0.0 };
                    m.extend(std::iter::repeat(v).take(hd));
                }
                let keep: Vec<f64> = m.iter().map(|v| 1.0 - v).collect();
                let mv = g.constant(Tensor::new(vec![n_seq, hd], m)?)?;
                let kv = g.constant(Tensor::new(vec![n_seq, hd], keep)?)?;
                let a = g.mul(mv, next)?;
                let b = g.mul(kv, h)?;
                g.add(a, b)?
            }
            _ => next,
        };
    }
    linear(g, store, h, TEXT_PROJ, None)
}

/// Full text path for a batch: embedding lookup then the bypass path.
pub fn encode_texts(g: &mut Graph, store: &ParamStore, cfg: &BackboneConfig, texts: &[&TextTokens]) -> Result<Var> {
    let (emb, lengths) = embed_tokens(g, store, cfg, texts)?;
    encode_text_embedded(g, store, cfg, emb, Some(&lengths))
}

/// Value-level `encode_text` for one token sequence.
pub fn encode_text(store: &ParamStore, cfg: &BackboneConfig, tokens: &TextTokens) -> Result<Tensor> {
    let mut g = Graph::new();
    let out = encode_texts(&mut g, store, cfg, &[tokens])?;
    g.value(out)?.reshaped(&[cfg.d_vlp])
}

/// Value-level bypass for one `[len, d_embed]` embedding sequence.
pub fn encode_text_embedded_value(store: &ParamStore, cfg: &BackboneConfig, emb: &Tensor) -> Result<Tensor> {
    if emb.rank() != 2 {
        return dim_err("encode_text_embedded", format!("expected [len, d_embed], got {:?}", emb.shape()));
    }
    let mut g = Graph::new();
    let e = g.constant(emb.reshaped(&[1, emb.shape()[0], emb.shape()[1]])?)?;
    let out = encode_text_embedded(&mut g, store, cfg, e, None)?;
    g.value(out)?.reshaped(&[cfg.d_vlp])
}

/// Value-level token-embedding lookup: `[len, d_embed]`.
pub fn embed_lookup(store: &ParamStore, cfg: &BackboneConfig, tokens: &TextTokens) -> Result<Tensor> {
    let mut g = Graph::new();
    let (e, _) = embed_tokens(&mut g, store, cfg, &[tokens])?;
    g.value(e)?.reshaped(&[tokens.len(), cfg.d_embed])
}

/// `u·w / (‖u‖‖w‖)`; zero-norm inputs are rejected.
pub fn cosine_sim(u: &[f64], w: &[f64]) -> Result<f64> {
    if u.len() != w.len() {
        return dim_err("cosine_sim", format!("{} vs {}", u.len(), w.len()));
    }
    let nu = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nw = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(nu > 0.0 && nw > 0.0) {
        return Err(Error::Degenerate("zero-norm feature in cosine_sim".into()));
    }
    let dot: f64 = u.iter().zip(w).map(|(a, b)| a * b).sum();
    Ok(dot / (nu * nw))
}

/// Symmetric InfoNCE over the `B×B` cosine-similarity matrix of matched
/// image/text global features, logits scaled by `exp(logit_scale) = 1/τ`.
pub fn contrastive_loss(g: &mut Graph, image_global: Var, text: Var, logit_scale: Var) -> Result<Var> {
    let si = g.shape(image_global)?.to_vec();
    let st = g.shape(text)?.to_vec();
    if si.len() != 2 || si != st {
        return dim_err("contrastive_loss", format!("{si:?} vs {st:?}"));
    }
    let b = si[0];
    if b == 0 {
        return dim_err("contrastive_loss", "empty batch");
    }
    let img = g.normalize_last(image_global)?;
    let txt = g.normalize_last(text)?;
    let sims = g.matmul_t(img, txt)?;
    let scale = g.exp(logit_scale)?;
    let logits = g.scale_by(sims, scale)?;

    let eye = g.constant(identity(b))?;
    let row_lp = g.log_softmax(logits, 1)?;
    let col_lp = g.log_softmax(logits, 0)?;
    let both = g.add(row_lp, col_lp)?;
    let diag = g.mul(both, eye)?;
    let total = g.sum(diag)?;
    g.scale(total, -0.5 / b as f64)
}

fn identity(n: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n, n]);
    for i in 0..n {
        t.data_mut()[i * n + i] = 1.0;
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{precision_scope, Precision};

    fn small_cfg() -> BackboneConfig {
        BackboneConfig {
            d_raw: 32,
            c_local: 4,
            d_vlp: 16,
            d_embed: 8,
            vocab_size: 10,
            n_max: 6,
            tau_init: 0.07,
            d_img_hidden: 12,
            d_text_hidden: 10,
        }
    }

    fn zeroed(store: &ParamStore) -> ParamStore {
        let mut z = store.clone();
        for (_, t) in z.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    #[test]
    fn config_validation() {
        assert!(BackboneConfig::default().validate().is_ok());
        let mut c = small_cfg();
        c.d_raw = 30;
        assert!(c.validate().is_err());
        let mut c = small_cfg();
        c.tau_init = 0.0;
        assert!(c.validate().is_err());
        let d = BackboneConfig::default();
        assert_ne!(d.d_embed, d.d_vlp);
    }

    #[test]
    fn image_shapes_and_zero_propagation() {
        let cfg = small_cfg();
        let store = init_params(&cfg, &mut Rng::new(1)).unwrap();
        let x: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin()).collect();
        let enc = encode_image(&store, &cfg, &x).unwrap();
        assert_eq!(enc.local.shape(), &[4, 16]);
        assert_eq!(enc.global.shape(), &[1, 16]);

        let mut zb = store.clone();
        for name in [B1, B2, BG] {
            zb.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let enc = encode_image(&zb, &cfg, &[0.0; 32]).unwrap();
        assert!(enc.global.data().iter().chain(enc.local.data()).all(|&v| v == 0.0));

        assert!(encode_image(&store, &cfg, &[0.0; 31]).is_err());
    }

    #[test]
    fn patch_permutation_permutes_locals() {
        let _p = precision_scope(Precision::F64);
        let cfg = small_cfg();
        let store = init_params(&cfg, &mut Rng::new(2)).unwrap();
        let mut rng = Rng::new(3);
        let x: Vec<f64> = (0..32).map(|_| rng.gaussian()).collect();
        let mut swapped = x.clone();
        let p = cfg.patch_len();
        for i in 0..p {
            swapped.swap(i, 2 * p + i);
        }
        let a = encode_image(&store, &cfg, &x).unwrap();
        let b = encode_image(&store, &cfg, &swapped).unwrap();
        assert_eq!(a.local.row(0), b.local.row(2));
        assert_eq!(a.local.row(2), b.local.row(0));
        assert_eq!(a.local.row(1), b.local.row(1));
        assert!(a.global.max_abs_diff(&b.global) < 1e-12);
    }

    #[test]
    fn text_bypass_equivalence() {
        let cfg = small_cfg();
        let store = init_params(&cfg, &mut Rng::new(4)).unwrap();
        let t = TextTokens::new(vec![3, 1, 7], &cfg).unwrap();
        let full = encode_text(&store, &cfg, &t).unwrap();
        let emb = embed_lookup(&store, &cfg, &t).unwrap();
        let bypass = encode_text_embedded_value(&store, &cfg, &emb).unwrap();
        assert_eq!(full.shape(), &[16]);
        assert_eq!(full.data(), bypass.data());
    }

    #[test]
    fn text_token_errors_and_lengths() {
        let cfg = small_cfg();
        assert!(matches!(TextTokens::new(vec![10], &cfg), Err(Error::Token { .. })));
        assert!(TextTokens::new(vec![], &cfg).is_err());
        let store = init_params(&cfg, &mut Rng::new(5)).unwrap();
        for len in [cfg.n_max, 2 * cfg.n_max] {
            let e = Tensor::zeros(&[len, cfg.d_embed]);
            assert!(encode_text_embedded_value(&store, &cfg, &e).is_ok());
        }
        let e = Tensor::zeros(&[2 * cfg.n_max + 1, cfg.d_embed]);
        assert!(encode_text_embedded_value(&store, &cfg, &e).is_err());
    }

    #[test]
    fn zero_weights_give_zero_text_feature() {
        let cfg = small_cfg();
        let store = zeroed(&init_params(&cfg, &mut Rng::new(6)).unwrap());
        let e = Tensor::zeros(&[3, cfg.d_embed]);
        let f = encode_text_embedded_value(&store, &cfg, &e).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn distinct_class_names_distinct_features() {
        let cfg = small_cfg();
        let store = init_params(&cfg, &mut Rng::new(7)).unwrap();
        let a = encode_text(&store, &cfg, &TextTokens::new(vec![2, 4], &cfg).unwrap()).unwrap();
        let b = encode_text(&store, &cfg, &TextTokens::new(vec![2, 5], &cfg).unwrap()).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-4);
    }

    #[test]
    fn ragged_batch_matches_individual_encodings() {
        let _p = precision_scope(Precision::F64);
        let cfg = small_cfg();
        let store = init_params(&cfg, &mut Rng::new(8)).unwrap();
        let texts = [
            TextTokens::new(vec![1, 2, 3], &cfg).unwrap(),
            TextTokens::new(vec![4], &cfg).unwrap(),
            TextTokens::new(vec![5, 6], &cfg).unwrap(),
        ];
        let mut g = Graph::new();
        let refs: Vec<&TextTokens> = texts.iter().collect();
        let batch = encode_texts(&mut g, &store, &cfg, &refs).unwrap();
        let batch = g.value(batch).unwrap();
        for (i, t) in texts.iter().enumerate() {
            let single = encode_text(&store, &cfg, t).unwrap();
            for (a, b) in batch.row(i).iter().zip(single.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_sim(&[3.0, 4.0], &[3.0, 4.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine_sim(&[1.0, 1.0], &[1.0, 0.0]).unwrap() - 0.70711).abs() < 1e-5);
        assert!(matches!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::Degenerate(_))));
    }

    fn contrastive_value(img: Tensor, txt: Tensor, tau: f64) -> f64 {
        let _p = precision_scope(Precision::F64);
        let mut g = Graph::new();
        let i = g.constant(img).unwrap();
        let t = g.constant(txt).unwrap();
        let ls = g.constant(Tensor::scalar((1.0 / tau).ln())).unwrap();
        let l = contrastive_loss(&mut g, i, t, ls).unwrap();
        g.scalar(l).unwrap()
    }

    #[test]
    fn contrastive_examples() {
        let one = Tensor::from_rows(&[vec![0.3, -0.2, 0.9]]).unwrap();
        let other = Tensor::from_rows(&[vec![1.0, 0.5, 0.1]]).unwrap();
        assert_eq!(contrastive_value(one, other, 0.07), 0.0);

        let m = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let l = contrastive_value(m.clone(), m, 1.0);
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((l - expected).abs() < 1e-12);
        assert!((l - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn contrastive_rejects_zero_features() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let t = g.constant(Tensor::full(&[2, 3], 1.0)).unwrap();
        let ls = g.constant(Tensor::scalar(0.0)).unwrap();
        assert!(matches!(contrastive_loss(&mut g, i, t, ls), Err(Error::Degenerate(_))));
    }
}
