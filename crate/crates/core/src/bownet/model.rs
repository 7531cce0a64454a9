use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, PretextRouting, Vocabulary};
use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::synthgen::Image;

/// Update sets named by the gradient-routing policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    Vocabulary,
    PostBlock,
    GoalHead,
    PretextHead,
}

impl ParamGroup {
    /// ψ = vocabulary + post-block.
    pub fn is_psi(self) -> bool {
        matches!(self, ParamGroup::Vocabulary | ParamGroup::PostBlock)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ConvBlock {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
struct Affine {
    w: ParamId,
    b: ParamId,
}

/// Outputs of one forward pass, as handles on the caller's tape.
#[derive(Clone, Debug)]
pub struct Forward {
    /// Feature map after each instantiated backbone block.
    pub taps: Vec<Var>,
    /// Soft word-histogram field φ(x), `[N, K, H, W]`.
    pub histogram: Option<Var>,
    /// Vector fed to the goal head: ψ(x) with the vocabulary, GAP(h(x)) without.
    pub features: Option<Var>,
    pub goal_logits: Option<Var>,
    pub pretext_logits: Option<Var>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Want {
    pub goal: bool,
    pub pretext: bool,
    /// Stop after the histogram field (or the last tap without ψ).
    pub histogram_only: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub num_classes: usize,
    pub grid_size: usize,
    pub params: ParamStore,
    groups: Vec<ParamGroup>,
    blocks: Vec<ConvBlock>,
    vocab: Option<ParamId>,
    post: Option<ConvBlock>,
    goal_head: Affine,
    pretext_head: Affine,
}

fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| { let z: f64 = StandardNormal.sample(rng); std * z })
        .collect::<Vec<f64>>();
    Tensor::new(shape, v).unwrap()
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect()).unwrap()
}

pub fn images_to_tensor(images: &[&Image]) -> Tensor {
    let (h, w) = (images[0].h, images[0].w);
    let mut v = Vec::with_capacity(images.len() * h * w);
    for img in images {
        v.extend_from_slice(&img.pixels);
    }
    Tensor::new(&[images.len(), 1, h, w], v).expect("uniform image sizes")
}

struct Builder {
    params: ParamStore,
    groups: Vec<ParamGroup>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn add(&mut self, name: &str, t: Tensor, g: ParamGroup, lr_mult: f64) -> ParamId {
        self.groups.push(g);
        self.params.add(name, t, lr_mult)
    }

    fn conv_block(&mut self, name: &str, cin: usize, cout: usize, g: ParamGroup, lr: f64) -> ConvBlock {
        let w1 = he_normal(&mut self.rng, &[cout, cin, 3, 3], cin * 9);
        let w2 = he_normal(&mut self.rng, &[cout, cout, 3, 3], cout * 9);
        ConvBlock {
            w1: self.add(&format!("{name}.conv1.weight"), w1, g, lr),
            b1: self.add(&format!("{name}.conv1.bias"), Tensor::zeros(&[cout]), g, lr),
            w2: self.add(&format!("{name}.conv2.weight"), w2, g, lr),
            b2: self.add(&format!("{name}.conv2.bias"), Tensor::zeros(&[cout]), g, lr),
        }
    }

    fn affine(&mut self, name: &str, din: usize, dout: usize, g: ParamGroup) -> Affine {
        let bound = 1.0 / (din as f64).sqrt();
        let w = uniform(&mut self.rng, &[din, dout], bound);
        let bias = uniform(&mut self.rng, &[dout], bound);
        Affine {
            w: self.add(&format!("{name}.weight"), w, g, 1.0),
            b: self.add(&format!("{name}.bias"), bias, g, 1.0),
        }
    }
}

impl Model {
    pub fn new(
        config: ModelConfig,
        num_classes: usize,
        grid_size: usize,
        seed: u64,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        if num_classes == 0 || grid_size == 0 {
            return Err(ModelError::Config("head widths must be positive".into()));
        }
        let mut b = Builder {
            params: ParamStore::new(),
            groups: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let bb_lr = config.backbone_lr_mult;
        let mut blocks = Vec::new();
        let mut cin = 1;
        for (i, &w) in config.widths[..config.backbone_depth()].iter().enumerate() {
            let name = format!("backbone.block{}", i + 1);
            blocks.push(b.conv_block(&name, cin, w, ParamGroup::Backbone, bb_lr));
            cin = w;
        }
        let k = config.vocab_size;
        let (vocab, post) = if config.use_psi {
            let nd = config.feature_dim();
            let mut v = vec![0.0; k * nd];
            for row in v.chunks_mut(nd) {
                let raw: Vec<f64> = (0..nd).map(|_| StandardNormal.sample(&mut b.rng)).collect();
                let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
                row.iter_mut().zip(&raw).for_each(|(d, r)| *d = r / norm);
            }
            let t = Tensor::new(&[k, nd, 1, 1], v).unwrap();
            let vid = b.add("psi.vocabulary", t, ParamGroup::Vocabulary, 1.0);
            let pb = b.conv_block("psi.post", k, k, ParamGroup::PostBlock, 1.0);
            (Some(vid), Some(pb))
        } else {
            (None, None)
        };
        let last_width = *config.widths.last().unwrap();
        let feat_dim = if config.use_psi { k } else { last_width };
        let goal_head = b.affine("head.goal", feat_dim, num_classes, ParamGroup::GoalHead);
        let pre_dim = match (config.use_psi, config.pretext_routing) {
            (true, PretextRouting::ThroughPsi) => k,
            (true, PretextRouting::Backbone) => config.feature_dim(),
            (false, _) => last_width,
        };
        let pretext_head = b.affine("head.pretext", pre_dim, grid_size, ParamGroup::PretextHead);
        let Builder { params, groups, .. } = b;
        Ok(Self {
            config,
            num_classes,
            grid_size,
            params,
            groups,
            blocks,
            vocab,
            post,
            goal_head,
            pretext_head,
        })
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.groups[id.0]
    }

    pub fn ids_in(&self, pred: impl Fn(ParamGroup) -> bool) -> Vec<ParamId> {
        self.params.ids().filter(|&id| pred(self.group(id))).collect()
    }

    pub fn has_psi(&self) -> bool {
        self.vocab.is_some()
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn vocabulary(&self) -> Option<Vocabulary> {
        self.vocab.map(|id| {
            let t = &self.params.get(id).tensor;
            Vocabulary::from_rows(t.shape()[0], t.shape()[1], t.values().to_vec())
                .expect("vocabulary tensor is well formed")
        })
    }

    /// Rescales every prototype to norm `sqrt(N_d) / mean‖h^u‖`, measured on
    /// `warmup` at the adaptation tap, so that initial prototype responses
    /// have roughly unit spread.
    pub fn calibrate_vocabulary(&mut self, warmup: &[&Image]) -> Result<(), ModelError> {
        let Some(vid) = self.vocab else {
            return Ok(());
        };
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, |_| false);
        let x = tape.constant(images_to_tensor(warmup));
        let taps = self.backbone(&mut tape, &bound, x, self.config.adapt_layer)?;
        let f = tape.value(*taps.last().unwrap());
        let (n, c) = (f.shape()[0], f.shape()[1]);
        let s = f.shape()[2] * f.shape()[3];
        let vals = f.values();
        let mut total = 0.0;
        for ni in 0..n {
            for si in 0..s {
                let sq: f64 = (0..c).map(|ci| vals[(ni * c + ci) * s + si].powi(2)).sum();
                total += sq.sqrt();
            }
        }
        let mean_norm = total / (n * s) as f64;
        if mean_norm <= 0.0 {
            return Ok(());
        }
        let target = (c as f64).sqrt() / mean_norm;
        let t = &mut self.params.get_mut(vid).tensor;
        for row in t.values_mut().chunks_mut(c) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            row.iter_mut().for_each(|x| *x *= target / norm);
        }
        Ok(())
    }

    /// Binds every parameter into `tape`; groups for which `trainable`
    /// returns false enter as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(ParamGroup) -> bool) -> Vec<Var> {
        self.params
            .ids()
            .map(|id| tape.bind(&self.params, id, trainable(self.group(id))))
            .collect()
    }

    fn block(
        tape: &mut Tape,
        p: &[Var],
        b: &ConvBlock,
        x: Var,
    ) -> Result<Var, ModelError> {
        let h = tape.conv2d(x, p[b.w1.0], Some(p[b.b1.0]), 1, 1)?;
        let h = tape.relu(h)?;
        let h = tape.conv2d(h, p[b.w2.0], Some(p[b.b2.0]), 1, 1)?;
        let h = tape.relu(h)?;
        Ok(tape.avg_pool2(h)?)
    }

    /// Taps 1..=`upto`.
    pub fn backbone(
        &self,
        tape: &mut Tape,
        p: &[Var],
        x: Var,
        upto: usize,
    ) -> Result<Vec<Var>, ModelError> {
        if upto == 0 || upto > self.depth() {
            return Err(ModelError::LayerOutOfRange {
                layer: upto,
                max: self.depth(),
            });
        }
        let mut taps = Vec::with_capacity(upto);
        let mut h = x;
        for b in &self.blocks[..upto] {
            h = Self::block(tape, p, b, h)?;
            taps.push(h);
        }
        Ok(taps)
    }

    fn affine(tape: &mut Tape, p: &[Var], a: &Affine, x: Var) -> Result<Var, ModelError> {
        let z = tape.matmul(x, p[a.w.0])?;
        Ok(tape.add_bias(z, p[a.b.0])?)
    }

    /// Histogram field of the adaptation tap: channel softmax of the 1×1
    /// prototype responses.
    pub fn histogram_field(&self, tape: &mut Tape, p: &[Var], tap: Var) -> Result<Var, ModelError> {
        let vid = self.vocab.ok_or(ModelError::NoVocabulary)?;
        soft_quantize_var(tape, tap, p[vid.0])
    }

    /// ψ applied to a histogram field: post-block then global pooling.
    pub fn psi_pool(&self, tape: &mut Tape, p: &[Var], hist: Var) -> Result<Var, ModelError> {
        let post = self.post.as_ref().ok_or(ModelError::NoVocabulary)?;
        let h = Self::block(tape, p, post, hist)?;
        Ok(tape.global_avg_pool(h)?)
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var, want: Want) -> Result<Forward, ModelError> {
        let taps = self.backbone(tape, p, x, self.depth())?;
        let last = *taps.last().unwrap();
        let mut out = Forward {
            taps,
            histogram: None,
            features: None,
            goal_logits: None,
            pretext_logits: None,
        };
        if self.has_psi() {
            let hist = self.histogram_field(tape, p, last)?;
            out.histogram = Some(hist);
            if want.histogram_only {
                return Ok(out);
            }
            let needs_psi = want.goal
                || (want.pretext && self.config.pretext_routing == PretextRouting::ThroughPsi);
            if needs_psi {
                out.features = Some(self.psi_pool(tape, p, hist)?);
            }
        } else {
            if want.histogram_only {
                return Ok(out);
            }
            out.features = Some(tape.global_avg_pool(last)?);
        }
        if want.goal {
            out.goal_logits = Some(Self::affine(tape, p, &self.goal_head, out.features.unwrap())?);
        }
        if want.pretext {
            let feat = match (self.has_psi(), self.config.pretext_routing) {
                (true, PretextRouting::Backbone) => tape.global_avg_pool(last)?,
                _ => out.features.unwrap(),
            };
            out.pretext_logits = Some(Self::affine(tape, p, &self.pretext_head, feat)?);
        }
        Ok(out)
    }

    /// Inference-only forward in chunks; returns goal logits row by row.
    pub fn goal_logits(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>, ModelError> {
        self.logits(images, true)
    }

    pub fn pretext_logits(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>, ModelError> {
        self.logits(images, false)
    }

    fn logits(&self, images: &[&Image], goal: bool) -> Result<Vec<Vec<f64>>, ModelError> {
        let mut rows = Vec::with_capacity(images.len());
        for chunk in images.chunks(EVAL_CHUNK) {
            let mut tape = Tape::new();
            let p = self.bind(&mut tape, |_| false);
            let x = tape.constant(images_to_tensor(chunk));
            let f = self.forward(&mut tape, &p, x, Want { goal, pretext: !goal, histogram_only: false })?;
            let z = tape.value(if goal { f.goal_logits.unwrap() } else { f.pretext_logits.unwrap() });
            let c = z.shape()[1];
            rows.extend(z.values().chunks(c).map(<[f64]>::to_vec));
        }
        Ok(rows)
    }

    /// Pooled tap(`layer`) features, one vector per image.
    pub fn pooled_tap(&self, images: &[&Image], layer: usize) -> Result<Vec<Vec<f64>>, ModelError> {
        let mut rows = Vec::with_capacity(images.len());
        for chunk in images.chunks(EVAL_CHUNK) {
            let mut tape = Tape::new();
            let p = self.bind(&mut tape, |_| false);
            let x = tape.constant(images_to_tensor(chunk));
            let taps = self.backbone(&mut tape, &p, x, layer)?;
            let g = tape.global_avg_pool(*taps.last().unwrap())?;
            let z = tape.value(g);
            rows.extend(z.values().chunks(z.shape()[1]).map(<[f64]>::to_vec));
        }
        Ok(rows)
    }

    /// Raw tap(`layer`) maps, `[N, C, H, W]` per chunk, concatenated.
    pub fn tap_values(&self, images: &[&Image], layer: usize) -> Result<Tensor, ModelError> {
        let mut shape = Vec::new();
        let mut vals = Vec::new();
        for chunk in images.chunks(EVAL_CHUNK) {
            let mut tape = Tape::new();
            let p = self.bind(&mut tape, |_| false);
            let x = tape.constant(images_to_tensor(chunk));
            let taps = self.backbone(&mut tape, &p, x, layer)?;
            let t = tape.value(*taps.last().unwrap());
            shape = t.shape().to_vec();
            vals.extend_from_slice(t.values());
        }
        shape[0] = images.len();
        Ok(Tensor::new(&shape, vals)?)
    }

    /// Histogram fields φ(x) of `images`, `[N, K, H, W]`.
    pub fn histograms(&self, images: &[&Image]) -> Result<Tensor, ModelError> {
        if !self.has_psi() {
            return Err(ModelError::NoVocabulary);
        }
        let mut shape = Vec::new();
        let mut vals = Vec::new();
        for chunk in images.chunks(EVAL_CHUNK) {
            let mut tape = Tape::new();
            let p = self.bind(&mut tape, |_| false);
            let x = tape.constant(images_to_tensor(chunk));
            let f = self.forward(&mut tape, &p, x, Want { histogram_only: true, ..Want::default() })?;
            let t = tape.value(f.histogram.unwrap());
            shape = t.shape().to_vec();
            vals.extend_from_slice(t.values());
        }
        shape[0] = images.len();
        Ok(Tensor::new(&shape, vals)?)
    }
}

const EVAL_CHUNK: usize = 64;

pub(crate) fn soft_quantize_var(tape: &mut Tape, features: Var, vocab: Var) -> Result<Var, ModelError> {
    let (fc, vc) = (tape.value(features).shape()[1], tape.value(vocab).shape()[1]);
    if fc != vc {
        return Err(ModelError::ChannelMismatch { expected: vc, got: fc });
    }
    let logits = tape.conv2d(features, vocab, None, 1, 0)?;
    Ok(tape.softmax(logits)?)
}
