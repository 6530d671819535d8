//! Finite-difference checks of every trainable component.
//!
//! Each check flattens the tensors under test into one vector, splits it
//! back into named parameters inside the graph and reduces the component's
//! outputs with fixed random projections, so every gradient entry is O(1).

use serde::Serialize;

use crate::backbone::{self, BackboneConfig, TextTokens};
use crate::classifier::{aggregated_similarity, AggregationMode};
use crate::decoder::{Decoder, DecoderConfig};
use crate::error::Result;
use crate::fusion;
use crate::model::{FrozenInputs, Model, ModelConfig};
use crate::objectives::{asl_loss, spcl_loss, LabelBatch, LossConfig};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::grad_check;
use crate::tensor::{precision_scope, Graph, Precision, Tensor, Var};

pub const TOLERANCE: f64 = 1e-4;
pub const INSTANCES: usize = 10;
pub const EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

type Outputs = Box<dyn Fn(&mut Graph, &ParamStore) -> Result<Vec<Var>>>;

/// A store, the names differentiated and the component under test.
pub struct Instance {
    store: ParamStore,
    wrt: Vec<String>,
    outputs: Outputs,
    /// Check derivatives along this many random directions instead of per
    /// entry. Deep compositions have entries far below the finite-difference
    /// noise floor of an O(1) loss.
    directions: Option<usize>,
}

fn flatten(store: &ParamStore, names: &[String]) -> Result<Tensor> {
    let mut v = Vec::new();
    for n in names {
        v.extend_from_slice(store.get(n)?.data());
    }
    Ok(Tensor::from_vec(v))
}

fn bind_flat(g: &mut Graph, store: &ParamStore, names: &[String], x: Var) -> Result<()> {
    let mut off = 0;
    for n in names {
        let t = store.get(n)?;
        let idx: Vec<usize> = (off..off + t.numel()).collect();
        let part = g.index_select(x, 0, &idx)?;
        let part = g.reshape(part, t.shape())?;
        g.bind_param(n, part)?;
        off += t.numel();
    }
    Ok(())
}

fn run_instance(inst: &Instance, rng: &mut Rng) -> Result<f64> {
    let _p = precision_scope(Precision::F64);
    let x0 = flatten(&inst.store, &inst.wrt)?;
    let n = x0.numel();
    let (x, basis) = match inst.directions {
        None => (x0.clone(), None),
        Some(k) => {
            let v: Vec<f64> = (0..k * n).map(|_| rng.gaussian()).collect();
            (Tensor::zeros(&[k]), Some(Tensor::new(vec![k, n], v)?))
        }
    };
    let shapes: Vec<Vec<usize>> = {
        let mut g = Graph::new();
        let outs = (inst.outputs)(&mut g, &inst.store)?;
        outs.iter().map(|&o| g.shape(o).map(|s| s.to_vec())).collect::<Result<_>>()?
    };
    let proj: Vec<Tensor> = shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            Tensor::new(s.clone(), (0..n).map(|_| rng.gaussian()).collect())
        })
        .collect::<Result<_>>()?;
    grad_check(
        |g, xv| {
            let xv = match &basis {
                None => xv,
                Some(b) => {
                    // x0 + Vᵀt
                    let bv = g.constant(b.clone())?;
                    let t = g.reshape(xv, &[1, b.shape()[0]])?;
                    let d = g.matmul(t, bv)?;
                    let d = g.reshape(d, &[n])?;
                    let base = g.constant(x0.clone())?;
                    g.add(base, d)?
                }
            };
            bind_flat(g, &inst.store, &inst.wrt, xv)?;
            let outs = (inst.outputs)(g, &inst.store)?;
            let mut acc: Option<Var> = None;
            for (o, r) in outs.into_iter().zip(&proj) {
                let rv = g.constant(r.clone())?;
                let m = g.mul(o, rv)?;
                let s = g.sum(m)?;
                acc = Some(match acc {
                    Some(a) => g.add(a, s)?,
                    None => s,
                });
            }
            Ok(acc.expect("component has outputs"))
        },
        &x,
        EPS,
    )
}

fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        d_raw: 8,
        c_local: 2,
        d_vlp: 4,
        d_embed: 3,
        vocab_size: 7,
        n_max: 4,
        d_img_hidden: 5,
        d_text_hidden: 4,
        tau_init: 0.5,
    }
}

fn tiny_decoder() -> DecoderConfig {
    DecoderConfig {
        n: 2,
        d_h: 4,
        heads: 2,
        init_std: 0.4,
        ..DecoderConfig::default()
    }
}

fn names_with(store: &ParamStore, prefix: &str) -> Vec<String> {
    store.names().filter(|n| n.starts_with(prefix)).map(String::from).collect()
}

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng).with_grad()
}

fn image_encoder(rng: &mut Rng) -> Result<Instance> {
    let cfg = tiny_backbone();
    let mut store = backbone::init_params(&cfg, rng)?;
    store.insert("input.images", randn(&[3, cfg.d_raw], rng));
    let mut wrt = names_with(&store, backbone::IMAGE);
    wrt.push("input.images".into());
    Ok(Instance {
        store,
        wrt,
        directions: None,
        outputs: Box::new(move |g, s| {
            let x = s.bind(g, "input.images")?;
            let out = backbone::encode_images(g, s, &cfg, x)?;
            Ok(vec![out.global, out.local])
        }),
    })
}

fn text_encoder(rng: &mut Rng) -> Result<Instance> {
    let cfg = tiny_backbone();
    let mut store = backbone::init_params(&cfg, rng)?;
    store.insert("input.embedded", randn(&[2, 3, cfg.d_embed], rng));
    let mut wrt = names_with(&store, backbone::TEXT);
    wrt.push("input.embedded".into());
    let texts = vec![TextTokens::from_ids(vec![1, 4, 5]), TextTokens::from_ids(vec![2, 6])];
    Ok(Instance {
        store,
        wrt,
        directions: None,
        outputs: Box::new(move |g, s| {
            let refs: Vec<&TextTokens> = texts.iter().collect();
            let tok = backbone::encode_texts(g, s, &cfg, &refs)?;
            let e = s.bind(g, "input.embedded")?;
            let emb = backbone::encode_text_embedded(g, s, &cfg, e, Some(&[3, 2]))?;
            Ok(vec![tok, emb])
        }),
    })
}

fn decoder_instance(rng: &mut Rng, inputs: &[(&str, &[usize])]) -> Result<(ParamStore, Decoder, Vec<String>)> {
    let dcfg = tiny_decoder();
    let dec = Decoder::new("decoder.pos", &dcfg, 4, 3)?;
    let mut store = ParamStore::new();
    dec.init(&mut store, dcfg.init_std, rng);
    let mut wrt = Vec::new();
    for (name, shape) in inputs {
        store.insert(*name, randn(shape, rng));
        wrt.push(name.to_string());
    }
    Ok((store, dec, wrt))
}

fn gru_cell(rng: &mut Rng) -> Result<Instance> {
    let (store, dec, mut wrt) = decoder_instance(rng, &[("input.t", &[3, 4]), ("input.h", &[3, 4])])?;
    wrt.extend(names_with(&store, "decoder.pos.gru"));
    Ok(Instance {
        store,
        wrt,
        directions: None,
        outputs: Box::new(move |g, s| {
            let t = s.bind(g, "input.t")?;
            let h = s.bind(g, "input.h")?;
            Ok(vec![dec.gru_cell(g, s, t, h)?])
        }),
    })
}

fn self_attention(rng: &mut Rng) -> Result<Instance> {
    let (store, dec, mut wrt) = decoder_instance(rng, &[("input.h", &[3, 4])])?;
    wrt.extend(names_with(&store, "decoder.pos.self_attn"));
    Ok(Instance {
        store,
        wrt,
        directions: None,
        outputs: Box::new(move |g, s| {
            let h = s.bind(g, "input.h")?;
            Ok(vec![dec.self_attention(g, s, h)?])
        }),
    })
}

fn cross_attention(rng: &mut Rng) -> Result<Instance> {
    let (store, dec, mut wrt) = decoder_instance(rng, &[("input.h", &[3, 4]), ("input.global", &[2, 4])])?;
    wrt.extend(names_with(&store, "decoder.pos.cross_attn"));
    wrt.push("decoder.pos.context_proj".into());
    Ok(Instance {
        store,
        wrt,
        directions: None,
        outputs: Box::new(move |g, s| {
            let h = s.bind(g, "input.h")?;
            let gl = s.bind(g, "input.global")?;
            let mem = dec.context_memory(g, s, gl, 3)?;
            Ok(vec![dec.cross_attention_context(g, s, h, mem)?])
        }),
    })
}

fn fusion_kernel(rng: &mut Rng) -> Result<Instance> {
    let mut store = ParamStore::new();
    store.insert(fusion::KERNEL, randn(&[3], rng));
    store.insert("input.global", randn(&[2, 4], rng));
    store.insert("input.local", randn(&[2, 3, 4], rng));
    store.insert("input.prompts", randn(&[3, 4], rng));
    let wrt = ["input.global", "input.local", "input.prompts", fusion::KERNEL].map(String::from).to_vec();
    Ok(Instance {
        store,
        wrt,
        directions: None,
        outputs: Box::new(|g, s| {
            let gl = s.bind(g, "input.global")?;
            let lo = s.bind(g, "input.local")?;
            let w = s.bind(g, "input.prompts")?;
            let f = fusion::fuse_batch(g, s, gl, lo)?;
            let sim = aggregated_similarity(g, f.features, Some(f.gate), w, AggregationMode::Mean)?;
            Ok(vec![f.features, f.gate, sim])
        }),
    })
}

fn random_labels(rows: usize, classes: usize, rng: &mut Rng) -> Result<LabelBatch> {
    let v = (0..rows * classes)
        .map(|_| match rng.below(5) {
            0 => -1,
            1 | 2 => 1,
            _ => 0,
        })
        .collect();
    LabelBatch::new(rows, classes, v)
}

fn asl(rng: &mut Rng) -> Result<Instance> {
    let mut store = ParamStore::new();
    store.insert("input.logits", randn(&[4, 3], rng));
    let labels = random_labels(4, 3, rng)?;
    let cfg = LossConfig {
        gamma_plus: 1.0 + rng.uniform(),
        gamma_minus: 2.0 + 2.0 * rng.uniform(),
        clip: 0.05,
        ..LossConfig::default()
    };
    Ok(Instance {
        store,
        wrt: vec!["input.logits".into()],
        directions: None,
        outputs: Box::new(move |g, s| {
            let z = s.bind(g, "input.logits")?;
            let p = g.sigmoid(z)?;
            Ok(vec![asl_loss(g, p, &labels, &cfg)?.loss])
        }),
    })
}

fn spcl(rng: &mut Rng) -> Result<Instance> {
    let mut store = ParamStore::new();
    store.insert("input.pair_logits", randn(&[4, 6], rng));
    let q: Vec<u8> = (0..6).map(|_| rng.below(2) as u8).collect();
    Ok(Instance {
        store,
        wrt: vec!["input.pair_logits".into()],
        directions: None,
        outputs: Box::new(move |g, s| {
            let z = s.bind(g, "input.pair_logits")?;
            let p = g.sigmoid(z)?;
            Ok(vec![spcl_loss(g, p, &q)?.loss])
        }),
    })
}

fn full_path(rng: &mut Rng) -> Result<Instance> {
    let bcfg = tiny_backbone();
    let model = Model::new(ModelConfig {
        backbone: bcfg.clone(),
        decoder: tiny_decoder(),
        ..ModelConfig::default()
    })?;
    let mut store = backbone::init_params(&bcfg, rng)?;
    store.set_trainable("", false);
    model.init_prompt_params(&mut store, rng);
    let kernel = Tensor::randn(&[3], 0.5, rng).with_grad();
    store.insert(fusion::KERNEL, kernel);
    let wrt: Vec<String> = model.prompt_prefixes().iter().flat_map(|p| names_with(&store, p)).collect();

    let images = Tensor::randn(&[3, bcfg.d_raw], 1.0, rng);
    let class_tokens: Vec<TextTokens> = (0..3).map(|k| TextTokens::from_ids(vec![4 + k])).collect();
    let (global, local) = model.image_features(&store, &images)?;
    let class_feats = model.class_features(&store, &class_tokens)?;
    let labels = random_labels(3, 3, rng)?;
    let cfg = LossConfig::default();
    Ok(Instance {
        store,
        wrt,
        directions: Some(8),
        outputs: Box::new(move |g, s| {
            let inputs = FrozenInputs {
                global: &global,
                local: &local,
                class_feats: &class_feats,
                class_tokens: &class_tokens,
            };
            let out = model.forward(g, s, &inputs)?;
            let terms = model.loss(g, s, &out, &labels, &cfg)?;
            Ok(vec![terms.total])
        }),
    })
}

type Builder = fn(&mut Rng) -> Result<Instance>;

pub const CHECKS: [(&str, Builder); 9] = [
    ("image_encoder", image_encoder),
    ("text_encoder", text_encoder),
    ("gru_cell", gru_cell),
    ("self_attention", self_attention),
    ("cross_attention", cross_attention),
    ("fusion_kernel", fusion_kernel),
    ("asl", asl),
    ("spcl", spcl),
    ("generate_to_loss", full_path),
];

/// Runs `instances` seeded instances of one named check.
pub fn run_check(name: &'static str, build: Builder, instances: usize, seed: u64) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    for i in 0..instances {
        let mut rng = Rng::new(seed ^ (i as u64).wrapping_mul(0x9E37_79B9));
        let inst = {
            let _p = precision_scope(Precision::F64);
            build(&mut rng)?
        };
        worst = worst.max(run_instance(&inst, &mut rng)?);
    }
    Ok(CheckResult {
        name,
        instances,
        max_rel_err: worst,
        passed: worst < TOLERANCE,
    })
}

pub fn run_all(instances: usize, seed: u64) -> Result<Vec<CheckResult>> {
    CHECKS.iter().map(|&(n, b)| run_check(n, b, instances, seed)).collect()
}
