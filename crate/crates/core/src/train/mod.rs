//! Two-phase training: contrastive backbone pretraining, then prompt
//! learning on top of the frozen backbone.

pub mod checkpoint;
pub mod optim;
pub mod schedule;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::backbone::{self, TextTokens, LOGIT_SCALE};
use crate::classifier::{baseline_frozen, predict_frozen};
use crate::error::{Error, Result};
use crate::metrics::macro_auc;
use crate::model::{FrozenInputs, Model, ModelConfig};
use crate::objectives::{LabelBatch, LossConfig};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::synth::{gzsl_split, Dataset};
use crate::tensor::{Graph, Tensor};

pub use optim::{Optimizer, OptimizerKind};
pub use schedule::{lr_at, Schedule};

/// Upper bound on `logit_scale` (τ ≥ 0.01).
pub const MAX_LOGIT_SCALE: f64 = 4.605_170_185_988_092;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Prompt,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Pretrain => "pretrain",
            Phase::Prompt => "prompt",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub phase: Phase,
    pub optimizer: OptimizerKind,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub warmup_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub model: ModelConfig,
    /// Images per forward pass during validation.
    pub eval_batch_size: usize,
    /// Joint gradient-norm ceiling applied before each step.
    pub grad_clip: Option<f64>,
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self {
            phase: Phase::Pretrain,
            optimizer: OptimizerKind::AdamW { weight_decay: 0.05 },
            base_lr: 3e-3,
            warmup_epochs: 5,
            warmup_lr: 1e-6,
            epochs: 15,
            batch_size: 64,
            seed: 42,
            loss: LossConfig::default(),
            model: ModelConfig::default(),
            eval_batch_size: 256,
            grad_clip: None,
        }
    }

    pub fn prompt() -> Self {
        Self {
            phase: Phase::Prompt,
            optimizer: OptimizerKind::Sgd,
            base_lr: 1.0,
            warmup_epochs: 5,
            warmup_lr: 1e-6,
            epochs: 50,
            grad_clip: Some(1.0),
            ..Self::pretrain()
        }
    }

    pub fn for_phase(phase: Phase) -> Self {
        match phase {
            Phase::Pretrain => Self::pretrain(),
            Phase::Prompt => Self::prompt(),
        }
    }

    /// Phase defaults overlaid with the (possibly partial) JSON object `over`.
    pub fn from_json(phase: Phase, over: serde_json::Value) -> Result<Self> {
        let mut base = serde_json::to_value(Self::for_phase(phase))?;
        merge_json(&mut base, over);
        let cfg: Self = serde_json::from_value(base)?;
        if cfg.phase != phase {
            return Err(Error::Config(format!("config is for phase {}, expected {phase}", cfg.phase)));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            base_lr: self.base_lr,
            warmup_epochs: self.warmup_epochs,
            warmup_lr: self.warmup_lr,
            epochs: self.epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule().validate()?;
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be at least 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("invalid gradient clip {c}")));
            }
        }
        if let OptimizerKind::AdamW { weight_decay } = self.optimizer {
            if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
                return Err(Error::Config(format!("invalid weight decay {weight_decay}")));
            }
        }
        self.loss.validate()?;
        self.model.validate()
    }
}

/// Recursively overwrites `base` with the entries of `over`.
pub fn merge_json(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// One training-log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: Phase,
    pub lr: f64,
    pub loss_asl: Option<f64>,
    pub loss_spcl: Option<f64>,
    pub loss_total: f64,
    pub val_macro_auc: Option<f64>,
}

pub const LOG_HEADER: &str = "epoch,phase,lr,loss_asl,loss_spcl,loss_total,val_macro_auc";

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        write!(
            f,
            "{},{},{},{},{},{},{}",
            self.epoch,
            self.phase,
            self.lr,
            opt(self.loss_asl),
            opt(self.loss_spcl),
            self.loss_total,
            opt(self.val_macro_auc)
        )
    }
}

/// Metadata stored next to a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub phase: Phase,
    pub model: ModelConfig,
    pub n_classes: usize,
    pub seen_classes: Vec<usize>,
    pub best_epoch: Option<usize>,
    pub val_macro_auc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub store: ParamStore,
    pub log: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub best_val: Option<f64>,
}

impl TrainOutput {
    pub fn meta(&self, cfg: &TrainConfig, ds: &Dataset) -> CheckpointMeta {
        CheckpointMeta {
            phase: cfg.phase,
            model: cfg.model.clone(),
            n_classes: ds.n_classes(),
            seen_classes: ds.seen().to_vec(),
            best_epoch: self.best_epoch,
            val_macro_auc: self.best_val,
        }
    }
}

fn shuffled(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    Rng::new(seed ^ epoch as u64).shuffle(&mut idx);
    idx
}

fn require_phase(cfg: &TrainConfig, phase: Phase) -> Result<()> {
    cfg.validate()?;
    if cfg.phase != phase {
        return Err(Error::Config(format!("config phase is {}, expected {phase}", cfg.phase)));
    }
    Ok(())
}

/// Mean-aggregated template baseline AUC on the validation split's seen classes.
fn baseline_val_auc(model: &Model, store: &ParamStore, ds: &Dataset) -> Result<f64> {
    let seen = ds.seen();
    let (global, local) = model.image_features(store, &ds.val.images)?;
    let (pos, neg) = ds.templates(seen);
    let out = baseline_frozen(model, store, &global, &local, &pos, &neg, model.cfg.aggregation)?;
    Ok(macro_auc(&out.probs, &ds.val.labels.select_classes(seen))?.0)
}

/// Contrastive image/report pretraining of both encoders and the temperature.
pub fn train_pretrain(cfg: &TrainConfig, ds: &Dataset) -> Result<TrainOutput> {
    require_phase(cfg, Phase::Pretrain)?;
    let train = &ds.train;
    if train.is_empty() || train.reports.len() != train.len() {
        return Err(Error::Config("pretraining needs one report per training image".into()));
    }
    let bcfg = &cfg.model.backbone;
    if bcfg.d_raw != ds.config.d_raw {
        return Err(Error::Config(format!(
            "backbone expects d_raw {}, dataset has {}",
            bcfg.d_raw, ds.config.d_raw
        )));
    }
    let model = Model::new(cfg.model.clone())?;
    let mut store = backbone::init_params(bcfg, &mut Rng::new(cfg.seed))?;
    let mut opt = Optimizer::new(cfg.optimizer);
    let sched = cfg.schedule();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, &sched)?;
        let order = shuffled(train.len(), cfg.seed, epoch);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            // InfoNCE needs negatives
            if chunk.len() < 2 {
                continue;
            }
            let images = train.images.select_rows(chunk)?;
            let reports: Vec<&TextTokens> = chunk.iter().map(|&i| &train.reports[i]).collect();
            let mut g = Graph::new();
            let x = g.constant(images)?;
            let img = backbone::encode_images(&mut g, &store, bcfg, x)?;
            let txt = backbone::encode_texts(&mut g, &store, bcfg, &reports)?;
            let ls = store.bind(&mut g, LOGIT_SCALE)?;
            let loss = backbone::contrastive_loss(&mut g, img.global, txt, ls)?;
            total += g.scalar(loss)?;
            batches += 1;
            let mut grads = g.backward(loss)?.named();
            if let Some(c) = cfg.grad_clip {
                optim::clip_grad_norm(&mut grads, c);
            }
            opt.step(&mut store, &grads, lr)?;
            let s = store.get_mut(LOGIT_SCALE)?;
            if s.item() > MAX_LOGIT_SCALE {
                s.data_mut()[0] = MAX_LOGIT_SCALE;
            }
        }
        if batches == 0 {
            return Err(Error::Config("no training batch has two or more samples".into()));
        }
        log.push(EpochLog {
            epoch,
            phase: Phase::Pretrain,
            lr,
            loss_asl: None,
            loss_spcl: None,
            loss_total: total / batches as f64,
            val_macro_auc: baseline_val_auc(&model, &store, ds).ok(),
        });
    }
    Ok(TrainOutput {
        store,
        log,
        best_epoch: None,
        best_val: None,
    })
}

/// Backbone features of one split, computed once.
struct FrozenSplit {
    global: Tensor,
    local: Tensor,
    labels: LabelBatch,
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

/// Prompt learning with the backbone frozen. Trains the decoder(s) and, when
/// enabled, the fusion kernel on the seen classes; the returned store holds
/// the backbone plus the best-validation-epoch prompt parameters.
pub fn train_prompt(
    cfg: &TrainConfig,
    backbone_store: &ParamStore,
    ds: &Dataset,
    resume: Option<&ParamStore>,
) -> Result<TrainOutput> {
    require_phase(cfg, Phase::Prompt)?;
    let bcfg = &cfg.model.backbone;
    let expected = backbone::init_params(bcfg, &mut Rng::new(0))?;
    checkpoint::check_compatible(&expected, backbone_store)?;
    if bcfg.vocab_size < crate::synth::vocab::size(ds.n_classes()) {
        return Err(Error::Config(format!(
            "vocabulary of {} tokens cannot hold {} classes",
            bcfg.vocab_size,
            ds.n_classes()
        )));
    }
    let model = Model::new(cfg.model.clone())?;

    let mut store = ParamStore::new();
    for (name, t) in backbone_store.iter() {
        if name.starts_with(backbone::IMAGE) || name.starts_with(backbone::TEXT) || name == LOGIT_SCALE {
            store.insert(name.clone(), t.clone());
        }
    }
    store.set_trainable("", false);
    let frozen: Vec<(String, Vec<u64>)> = store.iter().map(|(k, t)| (k.clone(), bits(t))).collect();

    let mut prompt = ParamStore::new();
    model.init_prompt_params(&mut prompt, &mut Rng::new(cfg.seed));
    if let Some(prev) = resume {
        checkpoint::check_compatible(&prompt, prev)?;
        for (name, t) in prev.iter() {
            if prompt.contains(name) {
                prompt.insert(name.clone(), t.clone().with_grad());
            }
        }
    }
    store.extend(&prompt);

    let seen = ds.seen().to_vec();
    let class_tokens: Vec<TextTokens> = seen.iter().map(|&k| ds.class_tokens[k].clone()).collect();
    let class_feats = model.class_features(&store, &class_tokens)?;
    let (train_labels, _) = gzsl_split(&ds.train.labels, &ds.test.labels, &seen)?;
    let freeze = |images: &Tensor, labels: LabelBatch| -> Result<FrozenSplit> {
        let (global, local) = model.image_features(&store, images)?;
        Ok(FrozenSplit { global, local, labels })
    };
    let train = freeze(&ds.train.images, train_labels.select_classes(&seen))?;
    let val = freeze(&ds.val.images, ds.val.labels.select_classes(&seen))?;

    let mut opt = Optimizer::new(cfg.optimizer);
    let sched = cfg.schedule();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let n = train.labels.rows();

    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, &sched)?;
        let order = shuffled(n, cfg.seed, epoch);
        let (mut asl_sum, mut pair_sum, mut total_sum) = (0.0, 0.0, 0.0);
        let mut pair_batches = 0usize;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let global = train.global.select_rows(chunk)?;
            let local = train.local.select_rows(chunk)?;
            let labels = train.labels.select_rows(chunk);
            let inputs = FrozenInputs {
                global: &global,
                local: &local,
                class_feats: &class_feats,
                class_tokens: &class_tokens,
            };
            let mut g = Graph::new();
            let out = model.forward(&mut g, &store, &inputs)?;
            let terms = model.loss(&mut g, &store, &out, &labels, &cfg.loss)?;
            asl_sum += g.scalar(terms.asl)?;
            if let Some(p) = terms.pairwise {
                pair_sum += g.scalar(p)?;
                pair_batches += 1;
            }
            total_sum += g.scalar(terms.total)?;
            batches += 1;
            let mut grads = g.backward(terms.total)?.named();
            if let Some(c) = cfg.grad_clip {
                optim::clip_grad_norm(&mut grads, c);
            }
            opt.step(&mut store, &grads, lr)?;
        }
        let scores = predict_frozen(
            &model,
            &store,
            &val.global,
            &val.local,
            &class_feats,
            &class_tokens,
            Some(cfg.eval_batch_size),
        )?;
        let auc = macro_auc(&scores.probs, &val.labels)?.0;
        log.push(EpochLog {
            epoch,
            phase: Phase::Prompt,
            lr,
            loss_asl: Some(asl_sum / batches as f64),
            loss_spcl: (pair_batches > 0).then(|| pair_sum / pair_batches as f64),
            loss_total: total_sum / batches as f64,
            val_macro_auc: Some(auc),
        });
        if best.as_ref().map_or(true, |b| auc > b.1) {
            let snapshot = model
                .prompt_prefixes()
                .iter()
                .fold(ParamStore::new(), |mut acc, p| {
                    acc.extend(&store.subset(p));
                    acc
                });
            best = Some((epoch, auc, snapshot));
        }
    }

    for (name, b) in &frozen {
        if bits(store.get(name)?) != *b {
            return Err(Error::Optimizer(format!("frozen tensor `{name}` changed during prompt learning")));
        }
    }
    let (best_epoch, best_val) = match best {
        Some((e, v, snapshot)) => {
            store.extend(&snapshot);
            (Some(e), Some(v))
        }
        None => (None, None),
    };
    Ok(TrainOutput {
        store,
        log,
        best_epoch,
        best_val,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::decoder::DecoderConfig;
    use crate::synth::SynthConfig;

    fn small_data() -> Dataset {
        crate::synth::generate(&SynthConfig {
            n_classes: 4,
            d_raw: 16,
            n_train: 96,
            n_val: 32,
            n_test: 32,
            seen_classes: vec![0, 1, 2],
            pair_boost: vec![],
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn small_model() -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                d_raw: 16,
                c_local: 2,
                d_vlp: 8,
                d_embed: 6,
                vocab_size: 8,
                n_max: 8,
                d_img_hidden: 12,
                d_text_hidden: 8,
                ..BackboneConfig::default()
            },
            decoder: DecoderConfig {
                n: 4,
                d_h: 8,
                heads: 2,
                ..DecoderConfig::default()
            },
            ..ModelConfig::default()
        }
    }

    fn cfgs() -> (TrainConfig, TrainConfig) {
        let pre = TrainConfig {
            epochs: 6,
            warmup_epochs: 1,
            batch_size: 32,
            model: small_model(),
            ..TrainConfig::pretrain()
        };
        let prompt = TrainConfig {
            epochs: 4,
            warmup_epochs: 1,
            batch_size: 32,
            model: small_model(),
            ..TrainConfig::prompt()
        };
        (pre, prompt)
    }

    #[test]
    fn pretrain_reduces_loss_and_is_deterministic() {
        let ds = small_data();
        let (pre, _) = cfgs();
        let a = train_pretrain(&pre, &ds).unwrap();
        assert!(a.log[5].loss_total < a.log[0].loss_total, "{:?}", a.log);
        assert!(a.store.names().all(|n| n.starts_with("image") || n.starts_with("text") || n == LOGIT_SCALE));
        assert!(a.store.contains(LOGIT_SCALE));
        let b = train_pretrain(&pre, &ds).unwrap();
        assert_eq!(
            checkpoint::encode(&a.store, checkpoint::Dtype::F64).unwrap(),
            checkpoint::encode(&b.store, checkpoint::Dtype::F64).unwrap()
        );
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn prompt_phase_contracts() {
        let ds = small_data();
        let (pre, prompt) = cfgs();
        let bb = train_pretrain(&pre, &ds).unwrap().store;
        let out = train_prompt(&prompt, &bb, &ds, None).unwrap();
        for (name, t) in bb.iter() {
            let after = out.store.get(name).unwrap();
            assert_eq!(bits(after), bits(t), "{name}");
        }
        let best = out.best_val.unwrap();
        assert!(out.log.iter().all(|l| l.val_macro_auc.unwrap() <= best));
        assert_eq!(out.log[out.best_epoch.unwrap()].val_macro_auc, Some(best));
        assert!(out.store.contains(crate::fusion::KERNEL));

        let off = TrainConfig {
            loss: LossConfig {
                spcl_enabled: false,
                ..LossConfig::default()
            },
            ..prompt.clone()
        };
        let out2 = train_prompt(&off, &bb, &ds, None).unwrap();
        let dec = |s: &ParamStore| checkpoint::encode(&s.subset("decoder"), checkpoint::Dtype::F64).unwrap();
        assert_ne!(dec(&out.store), dec(&out2.store));
        assert!(out2.log.iter().all(|l| l.loss_spcl.is_none()));
        assert!(out.log.iter().all(|l| l.loss_spcl.is_some()));
    }

    #[test]
    fn resume_checks_shapes() {
        let ds = small_data();
        let (pre, prompt) = cfgs();
        let pre = TrainConfig { epochs: 2, ..pre };
        let bb = train_pretrain(&pre, &ds).unwrap().store;
        let short = TrainConfig { epochs: 2, ..prompt.clone() };
        let first = train_prompt(&short, &bb, &ds, None).unwrap();
        assert!(train_prompt(&short, &bb, &ds, Some(&first.store)).is_ok());

        let mut bigger = prompt.clone();
        bigger.model.decoder.d_h = 12;
        bigger.epochs = 2;
        assert!(matches!(
            train_prompt(&bigger, &bb, &ds, Some(&first.store)),
            Err(Error::Checkpoint(_))
        ));
        let mut bad_bb = bb.clone();
        bad_bb.insert(LOGIT_SCALE, Tensor::zeros(&[2]));
        assert!(matches!(train_prompt(&short, &bad_bb, &ds, None), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn config_merge_and_validation() {
        let c = TrainConfig::from_json(Phase::Prompt, serde_json::json!({"epochs": 7, "model": {"decoder": {"n": 8}}})).unwrap();
        assert_eq!(c.epochs, 7);
        assert_eq!(c.model.decoder.n, 8);
        assert_eq!(c.model.decoder.d_h, 64);
        assert_eq!(c.optimizer, OptimizerKind::Sgd);
        assert!(TrainConfig::from_json(Phase::Prompt, serde_json::json!({"epochs": 3, "warmup_epochs": 3})).is_err());
        assert!(TrainConfig::from_json(Phase::Prompt, serde_json::json!({"batch_size": 0})).is_err());
        assert!(TrainConfig::from_json(Phase::Prompt, serde_json::json!({"phase": "pretrain"})).is_err());
        assert!(TrainConfig::from_json(Phase::Pretrain, serde_json::json!({"bogus": 1})).is_err());
        let p = TrainConfig::pretrain();
        assert_eq!(p.optimizer, OptimizerKind::AdamW { weight_decay: 0.05 });
        assert_eq!((p.epochs, p.warmup_epochs, p.batch_size), (15, 5, 64));
    }

    #[test]
    fn log_line_format() {
        let l = EpochLog {
            epoch: 3,
            phase: Phase::Pretrain,
            lr: 0.5,
            loss_asl: None,
            loss_spcl: None,
            loss_total: 1.25,
            val_macro_auc: Some(0.75),
        };
        assert_eq!(l.to_string(), "3,pretrain,0.5,,,1.25,0.75");
        assert_eq!(LOG_HEADER.split(',').count(), l.to_string().split(',').count());
    }
}
