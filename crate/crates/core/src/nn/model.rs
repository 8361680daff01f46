use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layers::{
    avgpool2, gap, maxpool2, ChannelNorm, FeatureNorm, NormCache, maxpool2_backward, relu_backward, relu_inplace, Conv3x3, Linear, Param, Tensor,
};
use crate::error::{Error, Result};
use crate::incdp::{
    cam, center_loss, center_loss_grad, child_focal_loss_logits, efdmix, focal_loss_logits, softmax, Cam,
    Centers, ChildWeights, EfdMix,
};
use crate::stain::RgbImage;

/// Anything that turns a prepared input into final convolutional maps
/// (`K × h × w`) can drive CAM-based detection.
pub trait Backbone {
    fn out_channels(&self) -> usize;
    fn feature_maps(&self, input: &Tensor) -> Tensor;
}

/// Convolutional blocks (conv 3×3 → batch norm → ReLU → optional 2×2 max
/// pool) behind a fixed 2×2 average-pool stem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyCnn {
    pub blocks: Vec<Conv3x3>,
    pub norms: Vec<ChannelNorm>,
    pub pool_after: Vec<bool>,
    /// Feature mixing is applied to the output of this block.
    pub mix_after: usize,
}

struct BlockCache {
    cols: Vec<Vec<f32>>,
    act: Vec<Tensor>,
    pool: Option<Vec<Vec<u32>>>,
    norm: NormCache,
}

impl TinyCnn {
    pub fn new(channels: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 3;
        let mut blocks = Vec::new();
        for &cout in channels {
            let std = (2.0 / (cin * 9) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            let w = (0..cin * cout * 9).map(|_| normal.sample(&mut rng) as f32).collect();
            blocks.push(Conv3x3::new(cin, cout, w));
            cin = cout;
        }
        let n = channels.len();
        Self {
            blocks,
            norms: channels.iter().map(|&c| ChannelNorm::new(c)).collect(),
            pool_after: (0..n).map(|i| i + 1 < n).collect(),
            mix_after: n.saturating_sub(2),
        }
    }

    fn block_eval(&self, i: usize, x: &Tensor) -> Tensor {
        let mut y = self.blocks[i].forward(x).0;
        self.norms[i].apply(&mut y);
        relu_inplace(&mut y);
        if self.pool_after[i] {
            maxpool2(&y).0
        } else {
            y
        }
    }

    /// Training forward of one block over a whole batch.
    fn block_forward(&mut self, i: usize, xs: &[Tensor]) -> (Vec<Tensor>, BlockCache) {
        let (mut act, cols): (Vec<Tensor>, Vec<Vec<f32>>) = xs.iter().map(|x| self.blocks[i].forward(x)).unzip();
        let norm = self.norms[i].forward_batch(&mut act);
        act.iter_mut().for_each(relu_inplace);
        if self.pool_after[i] {
            let (out, idx) = act.iter().map(maxpool2).unzip();
            (
                out,
                BlockCache {
                    cols,
                    act,
                    pool: Some(idx),
                    norm,
                },
            )
        } else {
            (
                act.clone(),
                BlockCache {
                    cols,
                    act,
                    pool: None,
                    norm,
                },
            )
        }
    }

    /// Returns input gradients except for the first block.
    fn block_backward(&mut self, i: usize, cache: &BlockCache, grad_out: &[Tensor]) -> Option<Vec<Tensor>> {
        let mut g: Vec<Tensor> = match &cache.pool {
            Some(idx) => grad_out
                .iter()
                .zip(idx)
                .zip(&cache.act)
                .map(|((g, ix), a)| maxpool2_backward(g, ix, a.c, a.h, a.w))
                .collect(),
            None => grad_out.to_vec(),
        };
        for (gi, a) in g.iter_mut().zip(&cache.act) {
            relu_backward(a, gi);
        }
        self.norms[i].backward_batch(&cache.norm, &mut g);
        let out: Vec<Option<Tensor>> = g
            .iter()
            .zip(&cache.cols)
            .map(|(gi, cols)| self.blocks[i].backward(cols, gi, i > 0))
            .collect();
        out.into_iter().collect()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.blocks
            .iter_mut()
            .zip(self.norms.iter_mut())
            .flat_map(|(b, n)| [&mut b.weight, &mut b.bias, &mut n.gamma, &mut n.beta])
    }
}

impl Backbone for TinyCnn {
    fn out_channels(&self) -> usize {
        self.blocks.last().map_or(3, |b| b.cout)
    }

    fn feature_maps(&self, input: &Tensor) -> Tensor {
        let mut x = input.clone();
        for i in 0..self.blocks.len() {
            x = self.block_eval(i, &x);
        }
        x
    }
}

/// Geometric augmentation: optional horizontal flip then `rot` quarter turns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Flip {
    pub mirror: bool,
    pub rot: u8,
}

impl Flip {
    pub fn random(rng: &mut impl Rng) -> Self {
        Self {
            mirror: rng.random(),
            rot: rng.random_range(0..4),
        }
    }
}

/// Converts a patch into network input: absorbance-like `1 − I/255`,
/// average-pooled by 2.
pub fn prepare_input(img: &RgbImage, flip: Flip) -> Tensor {
    let (w, h) = (img.width(), img.height());
    assert_eq!(w, h, "patches are square");
    let mut t = Tensor::zeros(3, h, w);
    let plane = h * w;
    for y in 0..h {
        for x in 0..w {
            let (mut sx, mut sy) = (x, y);
            for _ in 0..flip.rot {
                (sx, sy) = (sy, w - 1 - sx);
            }
            if flip.mirror {
                sx = w - 1 - sx;
            }
            let p = img.get(sx, sy);
            for c in 0..3 {
                t.data[c * plane + y * w + x] = 1.0 - p[c] as f32 / 255.0;
            }
        }
    }
    avgpool2(&t)
}

/// Backbone plus a parent head (2 logits) and an optional child head (2T).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub backbone: TinyCnn,
    pub norm: FeatureNorm,
    pub parent_head: Linear,
    pub child_head: Option<Linear>,
}

/// Output of a forward pass on one patch.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub pos_prob: f64,
    pub features: Vec<f32>,
    pub maps: Tensor,
}

fn head_init(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Linear {
    let normal = Normal::new(0.0, (1.0 / inputs as f64).sqrt()).expect("positive std");
    let w = (0..inputs * outputs).map(|_| normal.sample(rng) as f32).collect();
    Linear::new(inputs, outputs, w)
}

impl Classifier {
    pub fn new(channels: &[usize], seed: u64) -> Self {
        let backbone = TinyCnn::new(channels, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_4ead);
        let k = backbone.out_channels();
        Self {
            backbone,
            norm: FeatureNorm::new(k),
            parent_head: head_init(k, 2, &mut rng),
            child_head: None,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.out_channels()
    }

    /// Adds a freshly initialized child head with `classes` outputs.
    pub fn attach_child_head(&mut self, classes: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.child_head = Some(head_init(self.feature_dim(), classes, &mut rng));
    }

    pub fn predict(&self, patch: &RgbImage) -> Prediction {
        let maps = self.backbone.feature_maps(&prepare_input(patch, Flip::default()));
        let features = self.norm.apply(&gap(&maps));
        let logits = self.parent_head.forward(&features);
        Prediction {
            pos_prob: softmax(&logits)[1],
            features,
            maps,
        }
    }

    /// Positive-class activation map of a prediction.
    pub fn cam(&self, pred: &Prediction, patch_size: usize) -> Result<Cam> {
        let m = &pred.maps;
        let maps = Array3::from_shape_vec((m.c, m.h, m.w), m.data.iter().map(|&v| v as f64).collect())
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        // fold the feature normalization into the head; the offset it adds is
        // uniform over the map
        let inv = self.norm.inv_std();
        let k = self.parent_head.inputs;
        let w = &self.parent_head.weight.data;
        let head = Array2::from_shape_fn((2, k), |(r, j)| w[r * k + j] as f64 * inv[j]);
        cam(maps.view(), head.view(), 1, patch_size)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = self.backbone.params_mut().collect();
        out.push(&mut self.parent_head.weight);
        out.push(&mut self.parent_head.bias);
        if let Some(h) = self.child_head.as_mut() {
            out.push(&mut h.weight);
            out.push(&mut h.bias);
        }
        out
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}

/// One labelled training input.
#[derive(Debug, Clone)]
pub struct Example {
    pub input: Tensor,
    pub parent: u8,
    pub child: Option<usize>,
}

/// Loss settings for a training step.
#[derive(Debug, Clone)]
pub struct LossSettings<'a> {
    pub gamma: f64,
    pub lambda: f64,
    pub center_rate: f64,
    pub child_weights: Option<&'a ChildWeights>,
}

/// Batch mixing plan: partner index and mixing weight per sample.
#[derive(Debug, Clone)]
pub struct MixPlan {
    pub partner: Vec<usize>,
    pub mu: Vec<f64>,
    pub sorted: bool,
}

impl MixPlan {
    pub fn sample(batch: usize, beta: f64, sorted: bool, rng: &mut ChaCha8Rng) -> Self {
        let mut partner: Vec<usize> = (0..batch).collect();
        partner.shuffle(rng);
        let dist = Beta::new(beta, beta).expect("positive beta parameter");
        let mu = (0..batch).map(|_| dist.sample(rng)).collect();
        Self {
            partner,
            mu,
            sorted,
        }
    }
}

/// Summed loss terms of one step (child terms absent without a child head).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub focal_p: f64,
    pub center_p: f64,
    pub focal_c: Option<f64>,
    pub center_c: Option<f64>,
}

/// Forward and backward over a batch. Gradients are accumulated into the
/// model parameters (call `zero_grad` first); centres are updated in place
/// after the losses are evaluated.
pub fn forward_backward(
    model: &mut Classifier,
    batch: &[Example],
    centers_p: &mut Centers,
    mut centers_c: Option<&mut Centers>,
    loss: &LossSettings<'_>,
    mix: Option<&MixPlan>,
) -> Result<LossTerms> {
    let n = batch.len();
    let nblocks = model.backbone.blocks.len();
    let split = model.backbone.mix_after + 1;

    // lower blocks
    let mut x: Vec<Tensor> = batch.iter().map(|e| e.input.clone()).collect();
    let mut lower: Vec<BlockCache> = Vec::with_capacity(split);
    for i in 0..split {
        let (y, c) = model.backbone.block_forward(i, &x);
        lower.push(c);
        x = y;
    }
    let mid = x;

    let mixes: Option<Vec<EfdMix>> = match mix {
        Some(plan) => Some(
            (0..n)
                .map(|i| {
                    let u = &mid[i];
                    let v = &mid[plan.partner[i]];
                    let uf: Vec<f64> = u.data.iter().map(|&a| a as f64).collect();
                    let vf: Vec<f64> = v.data.iter().map(|&a| a as f64).collect();
                    efdmix(&uf, &vf, u.c, plan.mu[i], plan.sorted)
                })
                .collect::<Result<_>>()?,
        ),
        None => None,
    };

    // upper blocks
    let mut x: Vec<Tensor> = match &mixes {
        Some(m) => mid
            .iter()
            .zip(m)
            .map(|(t, mi)| Tensor {
                data: mi.values.iter().map(|&a| a as f32).collect(),
                ..t.clone()
            })
            .collect(),
        None => mid.clone(),
    };
    let mut upper: Vec<BlockCache> = Vec::with_capacity(nblocks - split);
    for i in split..nblocks {
        let (y, c) = model.backbone.block_forward(i, &x);
        upper.push(c);
        x = y;
    }
    let map_shape = (x[0].c, x[0].h, x[0].w);
    let mut feats = Array2::<f64>::zeros((n, model.feature_dim()));
    for (i, maps) in x.iter().enumerate() {
        for (k, v) in gap(maps).into_iter().enumerate() {
            feats[[i, k]] = v as f64;
        }
    }
    // a single sample has no batch statistics; it uses the running ones
    let norm_inv = if n > 1 {
        model.norm.forward_batch(&mut feats)
    } else {
        let inv = model.norm.inv_std();
        for (k, v) in feats.row_mut(0).iter_mut().enumerate() {
            *v = (*v - model.norm.mean[k]) * inv[k];
        }
        inv
    };
    let feats32: Vec<Vec<f32>> = feats.rows().into_iter().map(|r| r.iter().map(|&v| v as f32).collect()).collect();
    let parents: Vec<u8> = batch.iter().map(|e| e.parent).collect();
    let parent_idx: Vec<usize> = parents.iter().map(|&p| p as usize).collect();
    let logits: Vec<[f64; 2]> = feats32
        .iter()
        .map(|f| {
            let z = model.parent_head.forward(f);
            [z[0], z[1]]
        })
        .collect();
    let (focal_p, dlogits) = focal_loss_logits(&logits, &parents, loss.gamma);
    let center_p = center_loss(feats.view(), &parent_idx, centers_p)?;
    let mut dfeat = center_loss_grad(feats.view(), &parent_idx, centers_p)?;

    let mut terms = LossTerms {
        focal_p,
        center_p,
        ..Default::default()
    };
    let mut child_grad = None;
    if let (Some(head), Some(cc), Some(weights)) =
        (model.child_head.as_ref(), centers_c.as_deref(), loss.child_weights)
    {
        let labels: Vec<usize> = batch
            .iter()
            .map(|e| {
                e.child
                    .ok_or_else(|| Error::InvalidArgument {
                        arg: "batch",
                        reason: "child head is active but a sample has no child label".into(),
                    })
            })
            .collect::<Result<_>>()?;
        let mut zc = Array2::<f64>::zeros((n, head.outputs));
        for (i, f) in feats32.iter().enumerate() {
            for (k, v) in head.forward(f).into_iter().enumerate() {
                zc[[i, k]] = v;
            }
        }
        let (focal_c, dzc) = child_focal_loss_logits(zc.view(), &labels, weights, loss.gamma)?;
        let center_c = center_loss(feats.view(), &labels, cc)?;
        let dcc = center_loss_grad(feats.view(), &labels, cc)?;
        dfeat.scaled_add(loss.lambda, &dcc);
        terms.focal_c = Some(focal_c);
        terms.center_c = Some(center_c);
        child_grad = Some((dzc * loss.lambda, labels));
    }

    // heads
    for i in 0..n {
        let mut dx = vec![0.0f64; model.feature_dim()];
        model.parent_head.backward(&feats32[i], &dlogits[i], &mut dx);
        if let (Some((dzc, _)), Some(head)) = (&child_grad, model.child_head.as_mut()) {
            let row: Vec<f64> = dzc.row(i).to_vec();
            head.backward(&feats32[i], &row, &mut dx);
        }
        for (k, v) in dx.into_iter().enumerate() {
            dfeat[[i, k]] += v;
        }
    }

    // centre maintenance
    *centers_p = crate::incdp::update_centers(centers_p, feats.view(), &parent_idx, loss.center_rate)?;
    if let (Some(cc), Some((_, labels))) = (centers_c.as_deref_mut(), &child_grad) {
        *cc = crate::incdp::update_centers(cc, feats.view(), labels, loss.center_rate)?;
    }

    if n > 1 {
        FeatureNorm::backward_batch(&feats, &norm_inv, &mut dfeat);
    } else {
        for (k, g) in dfeat.row_mut(0).iter_mut().enumerate() {
            *g *= norm_inv[k];
        }
    }

    // upper backward
    let (mc, mh, mw) = map_shape;
    let scale = 1.0 / (mh * mw) as f64;
    let mut g: Vec<Tensor> = (0..n)
        .map(|i| {
            let mut t = Tensor::zeros(mc, mh, mw);
            for k in 0..mc {
                let v = (dfeat[[i, k]] * scale) as f32;
                t.data[k * mh * mw..(k + 1) * mh * mw].iter_mut().for_each(|x| *x = v);
            }
            t
        })
        .collect();
    for (j, b) in (split..nblocks).enumerate().rev() {
        g = model
            .backbone
            .block_backward(b, &upper[j], &g)
            .expect("upper blocks always propagate");
    }

    if let (Some(plan), Some(mixes)) = (mix, &mixes) {
        let mut routed: Vec<Tensor> = mid.iter().map(|t| Tensor::zeros(t.c, t.h, t.w)).collect();
        for i in 0..n {
            let gw: Vec<f64> = g[i].data.iter().map(|&a| a as f64).collect();
            let (gu, gv) = mixes[i].backward(&gw);
            let p = plan.partner[i];
            for (d, s) in routed[i].data.iter_mut().zip(&gu) {
                *d += *s as f32;
            }
            for (d, s) in routed[p].data.iter_mut().zip(&gv) {
                *d += *s as f32;
            }
        }
        g = routed;
    }

    // lower backward
    for b in (0..split).rev() {
        match model.backbone.block_backward(b, &lower[b], &g) {
            Some(next) => g = next,
            None => break,
        }
    }
    Ok(terms)
}

/// SGD with optional momentum and L2 weight decay:
/// `v ← m·v + g + wd·θ`, `θ ← θ − lr·v`.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, model: &mut Classifier) {
        let params = model.params_mut();
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        let (lr, m, wd) = (self.lr as f32, self.momentum as f32, self.weight_decay as f32);
        for (p, v) in params.into_iter().zip(self.velocity.iter_mut()) {
            if v.len() != p.len() {
                *v = vec![0.0; p.len()];
            }
            for ((w, g), vel) in p.data.iter_mut().zip(&p.grad).zip(v.iter_mut()) {
                *vel = m * *vel + g + wd * *w;
                *w -= lr * *vel;
            }
        }
    }
}
