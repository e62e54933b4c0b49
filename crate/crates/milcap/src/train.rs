//! Optimization harness: classifier pre-training on the synthetic
//! single-label set, transfer of those weights into the multi-scale
//! captioner, SGD with momentum under a global gradient-norm clip,
//! teacher-forced caption training with validation-BLEU model selection,
//! greedy evaluation, and the scale-set ablation driver.
//!
//! With the default freeze policy everything up to and including the
//! second 1x1 stage is constant, so per-(video, frame, scale) feature maps
//! are computed once and replayed as tape constants on every step.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bleu::{self, BleuReport};
use crate::checkpoint;
use crate::corpus::{Corpus, Split, CLASS_COUNT};
use crate::error::{Error, Result};
use crate::image::resize_bilinear;
use crate::lstm::{self, Caption, LstmDims, LstmParams};
use crate::mil;
use crate::model::{self, LayerParams, NetParams};
use crate::net::{self, NetworkSpec};
use crate::ops;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vocab::{self, Vocabulary};

// ── optimizer ────────────────────────────────────────────────────────────

pub fn global_norm(grads: &[Vec<f32>]) -> f32 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt() as f32
}

/// SGD with momentum. Raw gradients are first rescaled so their global norm
/// stays within `clip` (clip <= 0 disables), then folded into the velocity:
/// v = momentum*v + g, p -= lr*v.
pub struct SgdMomentum {
    lr: f32,
    momentum: f32,
    clip: f32,
    velocity: Vec<Vec<f32>>,
}

impl SgdMomentum {
    pub fn new(lr: f32, momentum: f32, clip: f32) -> SgdMomentum {
        SgdMomentum { lr, momentum, clip, velocity: Vec::new() }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &mut [Vec<f32>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::InvalidArg(format!(
                "{} parameter tensors but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        }
        if self.velocity.len() != grads.len()
            || self.velocity.iter().zip(grads.iter()).any(|(v, g)| v.len() != g.len())
        {
            return Err(Error::InvalidArg("parameter set changed between optimizer steps".into()));
        }
        if self.clip > 0.0 {
            let norm = global_norm(grads);
            if norm > self.clip {
                let s = self.clip / norm;
                for g in grads.iter_mut() {
                    for v in g.iter_mut() {
                        *v *= s;
                    }
                }
            }
        }
        for ((p, g), vel) in params.iter_mut().zip(grads.iter()).zip(&mut self.velocity) {
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g).zip(vel.iter_mut()) {
                *vv = self.momentum * *vv + gv;
                *pv -= self.lr * *vv;
            }
        }
        Ok(())
    }
}

// ── config files ─────────────────────────────────────────────────────────

fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Format(format!("config line {}: expected key=value", i + 1)));
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse_val<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Format(format!("config key {key}: bad value {v:?}")))
}

fn parse_scales(v: &str) -> Result<Vec<usize>> {
    let scales: Vec<usize> = v
        .split(',')
        .map(|s| parse_val("scales", s.trim()))
        .collect::<Result<_>>()?;
    if scales.is_empty() {
        return Err(Error::Format("scales must name at least one input size".into()));
    }
    Ok(scales)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FreezePolicy {
    /// Everything before the per-scale final layer stays fixed (default).
    ThroughFc7,
    /// Fine-tune the whole network.
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fc8Init {
    /// Per-scale final layers start from the converted classifier weights.
    Transfer,
    /// Per-scale final layers start at zero.
    Zero,
}

#[derive(Clone, Debug)]
pub struct PretrainConfig {
    /// Classification-set container path, used by the command layer.
    pub set: Option<PathBuf>,
    pub lr: f32,
    pub momentum: f32,
    pub clip: f32,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub holdout_per_class: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            set: None,
            lr: 0.01,
            momentum: 0.9,
            clip: 5.0,
            batch: 16,
            steps: 2000,
            seed: 0,
            eval_every: 100,
            holdout_per_class: 2,
        }
    }
}

impl PretrainConfig {
    pub fn from_text(text: &str) -> Result<PretrainConfig> {
        let mut cfg = PretrainConfig::default();
        for (k, v) in parse_kv(text)? {
            match k.as_str() {
                "set" => cfg.set = Some(PathBuf::from(v)),
                "lr" => cfg.lr = parse_val(&k, &v)?,
                "momentum" => cfg.momentum = parse_val(&k, &v)?,
                "clip" => cfg.clip = parse_val(&k, &v)?,
                "batch" => cfg.batch = parse_val(&k, &v)?,
                "steps" => cfg.steps = parse_val(&k, &v)?,
                "seed" => cfg.seed = parse_val(&k, &v)?,
                "eval_every" => cfg.eval_every = parse_val(&k, &v)?,
                "holdout_per_class" => cfg.holdout_per_class = parse_val(&k, &v)?,
                other => return Err(Error::Format(format!("unknown pretrain config key {other:?}"))),
            }
        }
        if cfg.batch == 0 || cfg.steps == 0 || cfg.eval_every == 0 {
            return Err(Error::Format("batch, steps and eval_every must be positive".into()));
        }
        Ok(cfg)
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub scales: Vec<usize>,
    pub freeze: FreezePolicy,
    pub fc8_init: Fc8Init,
    pub lr: f32,
    pub momentum: f32,
    pub clip: f32,
    pub steps: usize,
    pub seed: u64,
    pub hidden: usize,
    pub embed: usize,
    pub val_every: usize,
    pub five_crop: bool,
    pub max_decode_len: usize,
    /// Gain applied to the concept vector before the language model. Raw
    /// concept logits reach tens; left unscaled they saturate the gates at
    /// initialization, while a very small gain throttles the concept-head
    /// gradients by the same factor. 0.1 balances the two on the bundled
    /// 40-concept corpus.
    pub visual_scale: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            scales: vec![35, 91],
            freeze: FreezePolicy::ThroughFc7,
            fc8_init: Fc8Init::Transfer,
            lr: 0.01,
            momentum: 0.9,
            clip: 5.0,
            steps: 2000,
            seed: 0,
            hidden: 64,
            embed: 32,
            val_every: 100,
            five_crop: false,
            max_decode_len: 12,
            visual_scale: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn from_text(text: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for (k, v) in parse_kv(text)? {
            match k.as_str() {
                "scales" => cfg.scales = parse_scales(&v)?,
                "freeze" => {
                    cfg.freeze = match v.as_str() {
                        "through_fc7" => FreezePolicy::ThroughFc7,
                        "none" => FreezePolicy::None,
                        other => {
                            return Err(Error::Format(format!(
                                "freeze must be through_fc7 or none, got {other:?}"
                            )))
                        }
                    }
                }
                "fc8_init" => {
                    cfg.fc8_init = match v.as_str() {
                        "transfer" => Fc8Init::Transfer,
                        "zero" => Fc8Init::Zero,
                        other => {
                            return Err(Error::Format(format!(
                                "fc8_init must be transfer or zero, got {other:?}"
                            )))
                        }
                    }
                }
                "lr" => cfg.lr = parse_val(&k, &v)?,
                "momentum" => cfg.momentum = parse_val(&k, &v)?,
                "clip" => cfg.clip = parse_val(&k, &v)?,
                "steps" => cfg.steps = parse_val(&k, &v)?,
                "seed" => cfg.seed = parse_val(&k, &v)?,
                "hidden" => cfg.hidden = parse_val(&k, &v)?,
                "embed" => cfg.embed = parse_val(&k, &v)?,
                "val_every" => cfg.val_every = parse_val(&k, &v)?,
                "five_crop" => cfg.five_crop = parse_val(&k, &v)?,
                "max_decode_len" => cfg.max_decode_len = parse_val(&k, &v)?,
                "visual_scale" => cfg.visual_scale = parse_val(&k, &v)?,
                other => return Err(Error::Format(format!("unknown train config key {other:?}"))),
            }
        }
        if cfg.steps == 0 || cfg.val_every == 0 || cfg.hidden == 0 || cfg.embed == 0 {
            return Err(Error::Format("steps, val_every, hidden and embed must be positive".into()));
        }
        if cfg.max_decode_len == 0 {
            return Err(Error::Format("max_decode_len must be positive".into()));
        }
        if !(cfg.visual_scale > 0.0) {
            return Err(Error::Format("visual_scale must be positive".into()));
        }
        Ok(cfg)
    }
}

// ── classifier pre-training ──────────────────────────────────────────────

fn image_at(images: &Tensor, i: usize) -> Tensor {
    let shape = images.shape();
    let per: usize = shape[1..].iter().product();
    Tensor::new(shape[1..].to_vec(), images.data()[i * per..(i + 1) * per].to_vec())
        .expect("image slice shape")
}

fn net_param_grads(tape: &Tape, taped: &model::TapedNet) -> Vec<Vec<f32>> {
    let mut grads = Vec::new();
    for layer in taped.layers.iter().flatten() {
        grads.push(grad_or_zero(tape, layer.weight));
        grads.push(grad_or_zero(tape, layer.bias));
    }
    grads
}

/// A leaf that no downstream winner selected gets a zero gradient rather
/// than a missing one.
fn grad_or_zero(tape: &Tape, v: Var) -> Vec<f32> {
    tape.grad(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; tape.value(v).numel()])
}

pub struct PretrainOutcome {
    pub params: NetParams,
    pub holdout_accuracy: f64,
    pub log: String,
}

fn accuracy(spec: &NetworkSpec, params: &NetParams, images: &Tensor, labels: &[usize], idx: &[usize]) -> Result<f64> {
    let mut hits = 0usize;
    for &i in idx {
        let logits = model::classifier_logits(spec, params, &image_at(images, i))?;
        let best = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
            .map(|(j, _)| j)
            .unwrap();
        if best == labels[i] {
            hits += 1;
        }
    }
    Ok(hits as f64 / idx.len() as f64)
}

/// Train the classifier on the labeled single-object set. The last
/// `holdout_per_class` images of every class are held out for accuracy.
pub fn pretrain_classifier(cfg: &PretrainConfig, images: &Tensor, labels: &[usize]) -> Result<PretrainOutcome> {
    let spec = net::mininet(CLASS_COUNT);
    if images.rank() != 4 || images.shape()[0] != labels.len() {
        return Err(Error::InvalidArg(format!(
            "images {:?} do not pair with {} labels",
            images.shape(),
            labels.len()
        )));
    }
    if images.shape()[2] != spec.canonical_input || images.shape()[3] != spec.canonical_input {
        return Err(Error::InvalidArg(format!(
            "classifier wants {0}x{0} inputs, images are {1}x{2}",
            spec.canonical_input,
            images.shape()[2],
            images.shape()[3]
        )));
    }
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); CLASS_COUNT];
    for (i, &l) in labels.iter().enumerate() {
        per_class[l].push(i);
    }
    let mut pool = Vec::new();
    let mut holdout = Vec::new();
    for (c, members) in per_class.iter().enumerate() {
        if !members.is_empty() && members.len() <= cfg.holdout_per_class {
            return Err(Error::InvalidArg(format!(
                "class {c} has {} images, not enough to hold out {}",
                members.len(),
                cfg.holdout_per_class
            )));
        }
        let cut = members.len() - cfg.holdout_per_class.min(members.len());
        pool.extend_from_slice(&members[..cut]);
        holdout.extend_from_slice(&members[cut..]);
    }
    if pool.is_empty() || holdout.is_empty() {
        return Err(Error::InvalidArg("both the training pool and the holdout must be non-empty".into()));
    }

    let mut params = model::build_classifier(&spec, cfg.seed)?;
    let mut opt = SgdMomentum::new(cfg.lr, cfg.momentum, cfg.clip);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(0xC1A5);
    let mut log = String::new();
    let mut acc = 0.0;
    for step in 1..=cfg.steps {
        let mut tape = Tape::new();
        let taped = model::register(&mut tape, &params, |_| true);
        let mut total: Option<Var> = None;
        for _ in 0..cfg.batch {
            let i = pool[rng.gen_range(0..pool.len())];
            let x = tape.constant(image_at(images, i));
            let logits = model::classifier_forward_taped(&mut tape, &spec, &taped, x)?;
            let loss = ops::softmax_cross_entropy(&mut tape, logits, labels[i])?;
            total = Some(match total {
                None => loss,
                Some(t) => ops::add(&mut tape, t, loss)?,
            });
        }
        let mean = ops::scale(&mut tape, total.expect("batch is non-empty"), 1.0 / cfg.batch as f32)?;
        let loss_val = tape.value(mean).data()[0];
        if !loss_val.is_finite() {
            return Err(Error::Diverged(format!("pre-training loss {loss_val} at step {step}")));
        }
        tape.backward(mean)?;
        let mut grads = net_param_grads(&tape, &taped);
        let mut refs: Vec<&mut Tensor> = Vec::new();
        for lp in params.layers.iter_mut().flatten() {
            refs.push(&mut lp.weight);
            refs.push(&mut lp.bias);
        }
        opt.step(&mut refs, &mut grads)?;
        if step % cfg.eval_every == 0 || step == cfg.steps {
            acc = accuracy(&spec, &params, images, labels, &holdout)?;
            writeln!(log, "step={step} train_loss={loss_val:.6} holdout_acc={acc:.4}").unwrap();
        } else {
            writeln!(log, "step={step} train_loss={loss_val:.6}").unwrap();
        }
    }
    Ok(PretrainOutcome { params, holdout_accuracy: acc, log })
}

// ── classifier checkpoint naming ─────────────────────────────────────────

pub fn save_net_params(path: &Path, params: &NetParams) -> Result<()> {
    let mut tensors = Vec::new();
    for (i, lp) in params.layers.iter().enumerate() {
        if let Some(lp) = lp {
            tensors.push((format!("layer{i:02}.weight"), lp.weight.clone()));
            tensors.push((format!("layer{i:02}.bias"), lp.bias.clone()));
        }
    }
    checkpoint::write_tensors(path, &tensors)
}

pub fn load_net_params(path: &Path, spec: &NetworkSpec) -> Result<NetParams> {
    let mut by_name: HashMap<String, Tensor> = checkpoint::read_tensors(path)?.into_iter().collect();
    let mut layers = Vec::with_capacity(spec.layers.len());
    for (i, layer) in spec.layers.iter().enumerate() {
        if !layer.has_params() {
            layers.push(None);
            continue;
        }
        let w = by_name
            .remove(&format!("layer{i:02}.weight"))
            .ok_or_else(|| Error::Format(format!("checkpoint lacks layer{i:02}.weight")))?;
        let b = by_name
            .remove(&format!("layer{i:02}.bias"))
            .ok_or_else(|| Error::Format(format!("checkpoint lacks layer{i:02}.bias")))?;
        layers.push(Some(LayerParams { weight: w, bias: b }));
    }
    if let Some(name) = by_name.keys().next() {
        return Err(Error::Format(format!("checkpoint tensor {name:?} matches no spec layer")));
    }
    Ok(NetParams { layers })
}

// ── caption model ────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct CaptionModel {
    pub spec: NetworkSpec,
    pub scales: Vec<usize>,
    /// Converted shared layers; the final layer's slot is empty.
    pub shared: NetParams,
    /// One final filter bank per scale, in `scales` order.
    pub fc8s: Vec<LayerParams>,
    pub lstm: LstmParams,
    pub vocab: Vocabulary,
    pub five_crop: bool,
    /// Gain on the concept vector before the language model.
    pub visual_scale: f32,
}

impl CaptionModel {
    /// Build a fresh captioner from a pre-trained classifier: shared layers
    /// are the converted classifier weights, per-scale final layers start
    /// per `fc8_init`, the language model starts from the config seed.
    pub fn from_transfer(
        cfg: &TrainConfig,
        classifier: &NetParams,
        vocab: Vocabulary,
    ) -> Result<CaptionModel> {
        let spec = net::mininet(CLASS_COUNT);
        let mut shared = model::convert_to_fcn(&spec, classifier)?;
        let last = spec.layers.len() - 1;
        let fc8 = shared.layers[last]
            .take()
            .ok_or_else(|| Error::Spec("classifier lacks a final layer".into()))?;
        let fc8s = cfg
            .scales
            .iter()
            .map(|_| match cfg.fc8_init {
                Fc8Init::Transfer => fc8.clone(),
                Fc8Init::Zero => LayerParams {
                    weight: Tensor::zeros(fc8.weight.shape().to_vec()),
                    bias: Tensor::zeros(fc8.bias.shape().to_vec()),
                },
            })
            .collect();
        let dims = LstmDims {
            visual: CLASS_COUNT,
            hidden: cfg.hidden,
            embed: cfg.embed,
            vocab: vocab.len(),
        };
        let lstm = LstmParams::init(dims, cfg.seed)?;
        for &s in &cfg.scales {
            spec.geometry(s)?; // rejects scales below the canonical input
        }
        Ok(CaptionModel {
            spec,
            scales: cfg.scales.clone(),
            shared,
            fc8s,
            lstm,
            vocab,
            five_crop: cfg.five_crop,
            visual_scale: cfg.visual_scale,
        })
    }

    fn sidecar(path: &Path, ext: &str) -> PathBuf {
        PathBuf::from(format!("{}.{ext}", path.display()))
    }

    /// Write the model as a tensor container plus two sidecars: the network
    /// manifest (<path>.spec) and the vocabulary (<path>.vocab).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = Vec::new();
        tensors.push((
            "meta.scales".to_string(),
            Tensor::vector(self.scales.iter().map(|&s| s as f32).collect()),
        ));
        let d = self.lstm.dims;
        tensors.push((
            "meta.lstm_dims".to_string(),
            Tensor::vector(vec![d.visual as f32, d.hidden as f32, d.embed as f32, d.vocab as f32]),
        ));
        tensors.push(("meta.five_crop".to_string(), Tensor::vector(vec![self.five_crop as u8 as f32])));
        tensors.push(("meta.visual_scale".to_string(), Tensor::vector(vec![self.visual_scale])));
        for (i, lp) in self.shared.layers.iter().enumerate() {
            if let Some(lp) = lp {
                tensors.push((format!("shared.layer{i:02}.weight"), lp.weight.clone()));
                tensors.push((format!("shared.layer{i:02}.bias"), lp.bias.clone()));
            }
        }
        for (s, lp) in self.scales.iter().zip(&self.fc8s) {
            tensors.push((format!("scale{s}.fc8.weight"), lp.weight.clone()));
            tensors.push((format!("scale{s}.fc8.bias"), lp.bias.clone()));
        }
        tensors.push(("lstm.l1.weight".to_string(), self.lstm.l1.weight.clone()));
        tensors.push(("lstm.l1.bias".to_string(), self.lstm.l1.bias.clone()));
        tensors.push(("lstm.l2.weight".to_string(), self.lstm.l2.weight.clone()));
        tensors.push(("lstm.l2.bias".to_string(), self.lstm.l2.bias.clone()));
        tensors.push(("lstm.embedding".to_string(), self.lstm.embedding.clone()));
        tensors.push(("lstm.output".to_string(), self.lstm.output.clone()));
        checkpoint::write_tensors(path, &tensors)?;
        std::fs::write(Self::sidecar(path, "spec"), net::format_manifest(&self.spec))?;
        self.vocab.save(&Self::sidecar(path, "vocab"))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<CaptionModel> {
        let spec_text = std::fs::read_to_string(Self::sidecar(path, "spec"))?;
        let spec = net::parse_manifest(&spec_text)?;
        let vocab = Vocabulary::load(&Self::sidecar(path, "vocab"))?;
        let mut by_name: HashMap<String, Tensor> = checkpoint::read_tensors(path)?.into_iter().collect();
        let mut need = |name: &str| -> Result<Tensor> {
            by_name.remove(name).ok_or_else(|| Error::Format(format!("model lacks tensor {name:?}")))
        };
        let scales: Vec<usize> = need("meta.scales")?.data().iter().map(|&v| v as usize).collect();
        let dims_raw = need("meta.lstm_dims")?;
        if dims_raw.numel() != 4 {
            return Err(Error::Format("meta.lstm_dims must hold 4 values".into()));
        }
        let dims = LstmDims {
            visual: dims_raw.data()[0] as usize,
            hidden: dims_raw.data()[1] as usize,
            embed: dims_raw.data()[2] as usize,
            vocab: dims_raw.data()[3] as usize,
        };
        let five_crop = need("meta.five_crop")?.data()[0] != 0.0;
        let visual_scale = need("meta.visual_scale")?.data()[0];
        if dims.vocab != vocab.len() {
            return Err(Error::Format(format!(
                "model says {} vocabulary entries, sidecar has {}",
                dims.vocab,
                vocab.len()
            )));
        }
        let last = spec.layers.len() - 1;
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (i, layer) in spec.layers.iter().enumerate() {
            if i == last || !layer.has_params() {
                layers.push(None);
            } else {
                layers.push(Some(LayerParams {
                    weight: need(&format!("shared.layer{i:02}.weight"))?,
                    bias: need(&format!("shared.layer{i:02}.bias"))?,
                }));
            }
        }
        let shared = NetParams { layers };
        let fc8s = scales
            .iter()
            .map(|s| {
                Ok(LayerParams {
                    weight: need(&format!("scale{s}.fc8.weight"))?,
                    bias: need(&format!("scale{s}.fc8.bias"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let lstm = LstmParams {
            dims,
            l1: lstm::CellParams { weight: need("lstm.l1.weight")?, bias: need("lstm.l1.bias")? },
            l2: lstm::CellParams { weight: need("lstm.l2.weight")?, bias: need("lstm.l2.bias")? },
            embedding: need("lstm.embedding")?,
            output: need("lstm.output")?,
        };
        if let Some(name) = by_name.keys().next() {
            return Err(Error::Format(format!("model tensor {name:?} is not part of the format")));
        }
        Ok(CaptionModel { spec, scales, shared, fc8s, lstm, vocab, five_crop, visual_scale })
    }
}

// ── shared-feature cache ─────────────────────────────────────────────────

/// Feature maps after the frozen prefix, keyed by (video, frame, scale,
/// five-crop). The value holds one map per crop: a single entry normally,
/// five at the canonical scale under five-crop.
#[derive(Default)]
pub struct FeatureCache {
    map: HashMap<(String, usize, usize, bool), Vec<Tensor>>,
}

fn frame_features(
    spec: &NetworkSpec,
    shared: &NetParams,
    frame: &Tensor,
    scale: usize,
    five: bool,
) -> Result<Vec<Tensor>> {
    if five {
        let offsets = model::five_crop_offsets(frame.shape()[1], spec.canonical_input)?;
        offsets
            .iter()
            .map(|&(y0, x0)| {
                let patch = model::crop(frame, y0, x0, spec.canonical_input)?;
                model::shared_features(spec, shared, &patch)
            })
            .collect()
    } else {
        let resized = resize_bilinear(frame, scale)?;
        Ok(vec![model::shared_features(spec, shared, &resized)?])
    }
}

impl FeatureCache {
    pub fn new() -> FeatureCache {
        FeatureCache::default()
    }

    fn is_five(spec: &NetworkSpec, scale: usize, five_crop: bool) -> bool {
        five_crop && scale == spec.canonical_input
    }

    pub fn ensure_video(
        &mut self,
        spec: &NetworkSpec,
        shared: &NetParams,
        corpus: &Corpus,
        id: &str,
        scales: &[usize],
        five_crop: bool,
    ) -> Result<()> {
        let rec = corpus.record(id)?;
        let missing = (0..rec.frames).any(|t| {
            scales.iter().any(|&s| {
                !self.map.contains_key(&(id.to_string(), t, s, Self::is_five(spec, s, five_crop)))
            })
        });
        if !missing {
            return Ok(());
        }
        let frames = corpus.load_frames(id)?;
        for (t, frame) in frames.iter().enumerate() {
            for &s in scales {
                let five = Self::is_five(spec, s, five_crop);
                let key = (id.to_string(), t, s, five);
                if self.map.contains_key(&key) {
                    continue;
                }
                self.map.insert(key, frame_features(spec, shared, frame, s, five)?);
            }
        }
        Ok(())
    }

    pub fn get(&self, id: &str, t: usize, scale: usize, five: bool) -> Result<&Vec<Tensor>> {
        self.map
            .get(&(id.to_string(), t, scale, five))
            .ok_or_else(|| Error::InvalidArg(format!("no cached features for {id:?} frame {t} scale {scale}")))
    }
}

// ── the per-frame visual vector ──────────────────────────────────────────

fn spatial_max_pure(map: &Tensor) -> Vec<f32> {
    let (n, h, w) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    (0..n)
        .map(|c| {
            map.data()[c * h * w..(c + 1) * h * w]
                .iter()
                .fold(f32::NEG_INFINITY, |a, &b| if b > a { b } else { a })
        })
        .collect()
}

/// Pure evaluation of the visual vector from cached crop features, one
/// feature list per scale in model order: final conv, max over locations,
/// max over crops, max over scales (earliest wins ties, matching the taped
/// path).
pub fn visual_vector(model: &CaptionModel, crops_per_scale: &[&Vec<Tensor>]) -> Result<Tensor> {
    if crops_per_scale.len() != model.fc8s.len() {
        return Err(Error::InvalidArg(format!(
            "{} feature lists for {} scales",
            crops_per_scale.len(),
            model.fc8s.len()
        )));
    }
    let mut combined: Option<Vec<f32>> = None;
    for (crops, fc8) in crops_per_scale.iter().zip(&model.fc8s) {
        let mut scale_vec: Option<Vec<f32>> = None;
        for feat in crops.iter() {
            let logits = ops::conv2d_forward(feat, &fc8.weight, &fc8.bias, 1, 0);
            let v = spatial_max_pure(&logits);
            scale_vec = Some(match scale_vec {
                None => v,
                Some(mut acc) => {
                    for (a, x) in acc.iter_mut().zip(&v) {
                        if *x > *a {
                            *a = *x;
                        }
                    }
                    acc
                }
            });
        }
        let v = scale_vec.ok_or_else(|| Error::InvalidArg("a scale has no feature maps".into()))?;
        combined = Some(match combined {
            None => v,
            Some(mut acc) => {
                for (a, x) in acc.iter_mut().zip(&v) {
                    if *x > *a {
                        *a = *x;
                    }
                }
                acc
            }
        });
    }
    let mut v = combined.expect("at least one scale");
    for x in &mut v {
        *x *= model.visual_scale;
    }
    Ok(Tensor::vector(v))
}

fn visual_taped(
    tape: &mut Tape,
    crops_per_scale: &[Vec<Var>],
    fc8_vars: &[(Var, Var)],
    visual_scale: f32,
) -> Result<Var> {
    let mut scale_vecs = Vec::with_capacity(crops_per_scale.len());
    for (crops, &(w, b)) in crops_per_scale.iter().zip(fc8_vars) {
        let mut cur: Option<Var> = None;
        for &c in crops {
            let logits = ops::conv2d(tape, c, w, b, 1, 0)?;
            let (v, _) = mil::mil_over_locations(tape, logits)?;
            cur = Some(match cur {
                None => v,
                Some(acc) => ops::elementwise_max(tape, acc, v)?.0,
            });
        }
        scale_vecs.push(cur.ok_or_else(|| Error::InvalidArg("a scale has no feature maps".into()))?);
    }
    let pooled = if scale_vecs.len() == 1 {
        scale_vecs[0]
    } else {
        mil::mil_over_scales(tape, &scale_vecs)?.0
    };
    ops::scale(tape, pooled, visual_scale)
}

// ── greedy captioning and evaluation ─────────────────────────────────────

/// Caption raw frames with a trained model (no cache): full multi-scale
/// forward per frame, then greedy decoding.
pub fn caption_frames(model: &CaptionModel, frames: &[Tensor], max_len: usize) -> Result<String> {
    let visuals = frames
        .iter()
        .map(|frame| {
            let feats = model
                .scales
                .iter()
                .map(|&s| frame_features(&model.spec, &model.shared, frame, s, FeatureCache::is_five(&model.spec, s, model.five_crop)))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Vec<Tensor>> = feats.iter().collect();
            visual_vector(model, &refs)
        })
        .collect::<Result<Vec<_>>>()?;
    let cap = lstm::decode_greedy(&model.lstm, &visuals, max_len)?;
    Ok(model.vocab.decode_to_text(cap.tokens()))
}

fn decode_split(
    model: &CaptionModel,
    corpus: &Corpus,
    split: Split,
    cache: &mut FeatureCache,
    max_len: usize,
) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for rec in corpus.split_records(split) {
        cache.ensure_video(&model.spec, &model.shared, corpus, &rec.id, &model.scales, model.five_crop)?;
        let visuals = (0..rec.frames)
            .map(|t| {
                let feats = model
                    .scales
                    .iter()
                    .map(|&s| cache.get(&rec.id, t, s, FeatureCache::is_five(&model.spec, s, model.five_crop)))
                    .collect::<Result<Vec<_>>>()?;
                visual_vector(model, &feats)
            })
            .collect::<Result<Vec<_>>>()?;
        let cap = lstm::decode_greedy(&model.lstm, &visuals, max_len)?;
        out.push((rec.id.clone(), model.vocab.decode_to_text(cap.tokens())));
    }
    Ok(out)
}

/// Greedy-decode a split and score it against all references.
pub fn eval_bleu(
    model: &CaptionModel,
    corpus: &Corpus,
    split: Split,
    cache: &mut FeatureCache,
    max_len: usize,
) -> Result<(BleuReport, Vec<(String, String)>)> {
    let decoded = decode_split(model, corpus, split, cache, max_len)?;
    let cands: Vec<Vec<String>> = decoded.iter().map(|(_, text)| vocab::tokenize(text)).collect();
    let refs: Vec<Vec<Vec<String>>> = corpus
        .split_records(split)
        .iter()
        .map(|r| r.captions.iter().map(|c| vocab::tokenize(c)).collect())
        .collect();
    let report = bleu::corpus_bleu(&cands, &refs)?;
    Ok((report, decoded))
}

/// Token-weighted mean teacher-forced loss over every (video, reference)
/// pair in a split, evaluated with frozen weights through the cache.
pub fn split_loss(
    model: &CaptionModel,
    corpus: &Corpus,
    split: Split,
    cache: &mut FeatureCache,
) -> Result<f64> {
    let mut total = 0.0f64;
    let mut steps = 0usize;
    for rec in corpus.split_records(split) {
        cache.ensure_video(&model.spec, &model.shared, corpus, &rec.id, &model.scales, model.five_crop)?;
        let visuals = (0..rec.frames)
            .map(|t| {
                let feats = model
                    .scales
                    .iter()
                    .map(|&s| cache.get(&rec.id, t, s, FeatureCache::is_five(&model.spec, s, model.five_crop)))
                    .collect::<Result<Vec<_>>>()?;
                visual_vector(model, &feats)
            })
            .collect::<Result<Vec<_>>>()?;
        for text in &rec.captions {
            let caption = Caption::new(model.vocab.encode(text))?;
            let mut tape = Tape::new();
            let lstm_vars = lstm::register(&mut tape, &model.lstm, false);
            let vis_vars: Vec<Var> = visuals.iter().map(|v| tape.constant(v.clone())).collect();
            let states = lstm::encode(&mut tape, &lstm_vars, &vis_vars)?;
            let tf = lstm::decode_teacher_forced(&mut tape, &lstm_vars, states, &caption)?;
            total += tape.value(tf.mean_loss).data()[0] as f64 * caption.step_count() as f64;
            steps += caption.step_count();
        }
    }
    if steps == 0 {
        return Err(Error::InvalidArg(format!("split {:?} has no captions", split.name())));
    }
    Ok(total / steps as f64)
}

// ── caption training ─────────────────────────────────────────────────────

pub struct TrainOutcome {
    /// The best-validation model.
    pub model: CaptionModel,
    pub best_val_bleu: f64,
    pub log: String,
}

/// One optimization run: transfer, then `steps` single-video steps with one
/// uniformly sampled reference each; validation BLEU every `val_every`
/// steps (and at the end) selects the returned model, earlier step winning
/// ties.
pub fn train_captioner(
    cfg: &TrainConfig,
    corpus: &Corpus,
    classifier: &NetParams,
    cache: &mut FeatureCache,
) -> Result<TrainOutcome> {
    let train_recs = corpus.split_records(Split::Train);
    if train_recs.is_empty() {
        return Err(Error::InvalidArg("corpus has no training videos".into()));
    }
    let vocab = Vocabulary::build(
        train_recs.iter().flat_map(|r| r.captions.iter().map(String::as_str)),
    );
    let mut model = CaptionModel::from_transfer(cfg, classifier, vocab)?;
    let spec = model.spec.clone();
    let last = spec.layers.len() - 1;

    // gold captions, encoded once
    let train_caps: Vec<Vec<Caption>> = train_recs
        .iter()
        .map(|r| {
            r.captions
                .iter()
                .map(|c| Caption::new(model.vocab.encode(c)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let train_ids: Vec<String> = train_recs.iter().map(|r| r.id.clone()).collect();
    let frames_per: Vec<usize> = train_recs.iter().map(|r| r.frames).collect();

    let frozen = cfg.freeze == FreezePolicy::ThroughFc7;
    let mut opt = SgdMomentum::new(cfg.lr, cfg.momentum, cfg.clip);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(0x7EAC);
    let mut log = String::new();
    let mut best_bleu = f64::NEG_INFINITY;
    let mut best: Option<CaptionModel> = None;

    for step in 1..=cfg.steps {
        let vi = rng.gen_range(0..train_ids.len());
        let ri = rng.gen_range(0..train_caps[vi].len());
        let id = &train_ids[vi];

        let mut tape = Tape::new();
        let taped_shared = if frozen {
            cache.ensure_video(&spec, &model.shared, corpus, id, &model.scales, model.five_crop)?;
            None
        } else {
            Some(model::register(&mut tape, &model.shared, |_| true))
        };
        let fc8_vars: Vec<(Var, Var)> = model
            .fc8s
            .iter()
            .map(|lp| {
                (
                    tape.leaf(lp.weight.clone().with_grad()),
                    tape.leaf(lp.bias.clone().with_grad()),
                )
            })
            .collect();
        let lstm_vars = lstm::register(&mut tape, &model.lstm, true);

        let raw_frames = if frozen { None } else { Some(corpus.load_frames(id)?) };
        let mut visuals = Vec::with_capacity(frames_per[vi]);
        for t in 0..frames_per[vi] {
            let crops_per_scale: Vec<Vec<Var>> = if let Some(frames) = &raw_frames {
                let taped_net = taped_shared.as_ref().expect("unfrozen path registers the net");
                let mut per_scale = Vec::with_capacity(model.scales.len());
                for &s in &model.scales {
                    let five = FeatureCache::is_five(&spec, s, model.five_crop);
                    let mut crops = Vec::new();
                    if five {
                        for (y0, x0) in model::five_crop_offsets(frames[t].shape()[1], spec.canonical_input)? {
                            let patch = tape.constant(model::crop(&frames[t], y0, x0, spec.canonical_input)?);
                            crops.push(model::fcn_forward_taped(&mut tape, &spec, taped_net, patch, 0, last)?);
                        }
                    } else {
                        let resized = tape.constant(resize_bilinear(&frames[t], s)?);
                        crops.push(model::fcn_forward_taped(&mut tape, &spec, taped_net, resized, 0, last)?);
                    }
                    per_scale.push(crops);
                }
                per_scale
            } else {
                model
                    .scales
                    .iter()
                    .map(|&s| {
                        let five = FeatureCache::is_five(&spec, s, model.five_crop);
                        Ok(cache
                            .get(id, t, s, five)?
                            .iter()
                            .map(|f| tape.constant(f.clone()))
                            .collect())
                    })
                    .collect::<Result<_>>()?
            };
            visuals.push(visual_taped(&mut tape, &crops_per_scale, &fc8_vars, model.visual_scale)?);
        }

        let states = lstm::encode(&mut tape, &lstm_vars, &visuals)?;
        let tf = lstm::decode_teacher_forced(&mut tape, &lstm_vars, states, &train_caps[vi][ri])?;
        let loss_val = tape.value(tf.mean_loss).data()[0];
        if !loss_val.is_finite() {
            return Err(Error::Diverged(format!("training loss {loss_val} at step {step}")));
        }
        tape.backward(tf.mean_loss)?;

        let mut grads: Vec<Vec<f32>> = Vec::new();
        if let Some(taped_net) = &taped_shared {
            grads.extend(net_param_grads(&tape, taped_net));
        }
        for &(w, b) in &fc8_vars {
            grads.push(grad_or_zero(&tape, w));
            grads.push(grad_or_zero(&tape, b));
        }
        for v in [
            lstm_vars.l1.weight,
            lstm_vars.l1.bias,
            lstm_vars.l2.weight,
            lstm_vars.l2.bias,
            lstm_vars.embedding,
            lstm_vars.output,
        ] {
            grads.push(grad_or_zero(&tape, v));
        }
        let mut refs: Vec<&mut Tensor> = Vec::new();
        if !frozen {
            for lp in model.shared.layers.iter_mut().flatten() {
                refs.push(&mut lp.weight);
                refs.push(&mut lp.bias);
            }
        }
        for lp in &mut model.fc8s {
            refs.push(&mut lp.weight);
            refs.push(&mut lp.bias);
        }
        refs.push(&mut model.lstm.l1.weight);
        refs.push(&mut model.lstm.l1.bias);
        refs.push(&mut model.lstm.l2.weight);
        refs.push(&mut model.lstm.l2.bias);
        refs.push(&mut model.lstm.embedding);
        refs.push(&mut model.lstm.output);
        opt.step(&mut refs, &mut grads)?;

        if step % cfg.val_every == 0 || step == cfg.steps {
            // the cache serves validation only under the default freeze
            // policy; after fine-tuning the shared stack it would be stale
            let mut scratch;
            let val_cache = if frozen {
                &mut *cache
            } else {
                scratch = FeatureCache::new();
                &mut scratch
            };
            let (report, _) = eval_bleu(&model, corpus, Split::Val, val_cache, cfg.max_decode_len)?;
            writeln!(log, "step={step} train_loss={loss_val:.6} val_bleu={:.4}", report.bleu).unwrap();
            if report.bleu > best_bleu {
                best_bleu = report.bleu;
                best = Some(model.clone());
            }
        } else {
            writeln!(log, "step={step} train_loss={loss_val:.6}").unwrap();
        }
    }
    Ok(TrainOutcome {
        model: best.expect("at least one validation pass ran"),
        best_val_bleu: best_bleu,
        log,
    })
}

// ── ablation ─────────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub scales: Vec<usize>,
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

fn scales_label(scales: &[usize]) -> String {
    scales.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")
}

/// Train every (scale set, seed) pair and score its best model on the test
/// split. The shared feature cache is reused across runs because the frozen
/// prefix is identical in all of them.
pub fn run_ablation(
    base: &TrainConfig,
    corpus: &Corpus,
    classifier: &NetParams,
    scale_sets: &[Vec<usize>],
    seeds: &[u64],
    cache: &mut FeatureCache,
) -> Result<(Vec<AblationRow>, String)> {
    if scale_sets.len() < 2 {
        return Err(Error::InvalidArg("an ablation needs at least two scale sets".into()));
    }
    if seeds.is_empty() {
        return Err(Error::InvalidArg("an ablation needs at least one seed".into()));
    }
    let mut rows = Vec::new();
    let mut text = String::from("scales\tmean\tmin\tmax\tper_seed\n");
    for set in scale_sets {
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.scales = set.clone();
            cfg.seed = seed;
            let outcome = train_captioner(&cfg, corpus, classifier, cache)?;
            let (report, _) = eval_bleu(&outcome.model, corpus, Split::Test, cache, cfg.max_decode_len)?;
            per_seed.push(report.bleu);
        }
        let mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
        let min = per_seed.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = per_seed.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        writeln!(
            text,
            "{}\t{mean:.4}\t{min:.4}\t{max:.4}\t{}",
            scales_label(set),
            per_seed.iter().map(|b| format!("{b:.4}")).collect::<Vec<_>>().join(","),
        )
        .unwrap();
        rows.push(AblationRow { scales: set.clone(), per_seed, mean, min, max });
    }
    Ok((rows, text))
}
