//! Slide-level models over bags of tile features.
//!
//! [`GmaModel`] is a gated-attention MIL network: every tile `h_k` gets a
//! score `w_attn · (tanh(V h_k + b_v) ⊙ σ(U h_k + b_u))`, the scores are
//! softmax-normalised across the bag, and the attention-weighted mean of the
//! tiles is classified by a linear two-class head. An optional fusion layer
//! takes the head's class probabilities concatenated with clinical
//! covariates. [`TileScorer`] is the tile-supervised baseline whose slide
//! score is the mean per-tile probability.
//!
//! Gradients are derived by hand; `gma_backward` is checked against central
//! finite differences in the test suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{self, check_finite, dot, matmul, matmul_transposed, Tensor2D};

/// Tile group tag for background tiles.
pub const GROUP_BACKGROUND: u8 = 0;
/// Tile group tag for planted witness tiles.
pub const GROUP_WITNESS: u8 = 1;

pub fn group_name(tag: u8) -> String {
    match tag {
        GROUP_BACKGROUND => "background".to_string(),
        GROUP_WITNESS => "witness".to_string(),
        other => format!("group{other}"),
    }
}

/// One slide: `B × D1` tile features plus slide metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBag {
    pub slide_id: String,
    pub patient_id: String,
    /// 0 = wild-type, 1 = mutant.
    pub label: u8,
    pub features: Tensor2D,
    pub covariates: Vec<f64>,
    pub tile_groups: Option<Vec<u8>>,
    /// Tissue tiles on the whole slide, used for the tissue-area QC.
    pub tile_count_total: u32,
}

impl FeatureBag {
    pub fn n_tiles(&self) -> usize {
        self.features.rows()
    }

    pub fn d1(&self) -> usize {
        self.features.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.rows() == 0 {
            return Err(Error::EmptyBag);
        }
        if self.label > 1 {
            return Err(Error::InvalidArgument(format!(
                "slide {}: label must be 0 or 1, got {}",
                self.slide_id, self.label
            )));
        }
        if let Some(g) = &self.tile_groups {
            if g.len() != self.n_tiles() {
                return Err(Error::Dimension(format!(
                    "slide {}: {} group tags for {} tiles",
                    self.slide_id,
                    g.len(),
                    self.n_tiles()
                )));
            }
        }
        Ok(())
    }
}

fn uniform_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor2D {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor2D::from_vec(rows, cols, data).expect("finite by construction")
}

/// Gated-attention network with classifier head and covariate fusion layer.
///
/// The same struct doubles as the gradient container returned by
/// [`gma_backward`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmaModel {
    /// `D2 × D1`, tanh branch.
    pub v: Tensor2D,
    /// `1 × D2`
    pub b_v: Tensor2D,
    /// `D2 × D1`, sigmoid gate.
    pub u: Tensor2D,
    /// `1 × D2`
    pub b_u: Tensor2D,
    /// `1 × D2`
    pub w_attn: Tensor2D,
    /// `2 × D1`
    pub w_cls: Tensor2D,
    /// `1 × 2`
    pub b_cls: Tensor2D,
    /// `2 × (2 + n_covariates)`
    pub w_fuse: Tensor2D,
    /// `1 × 2`
    pub b_fuse: Tensor2D,
}

pub const GMA_PARAM_NAMES: [&str; 9] = [
    "V", "b_V", "U", "b_U", "w_attn", "W_cls", "b_cls", "W_fuse", "b_fuse",
];

impl GmaModel {
    /// Seeded uniform(±1/√fan_in) initialisation.
    pub fn new(d1: usize, d2: usize, n_covariates: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nf = 2 + n_covariates;
        GmaModel {
            v: uniform_init(&mut rng, d2, d1, d1),
            b_v: uniform_init(&mut rng, 1, d2, d1),
            u: uniform_init(&mut rng, d2, d1, d1),
            b_u: uniform_init(&mut rng, 1, d2, d1),
            w_attn: uniform_init(&mut rng, 1, d2, d2),
            w_cls: uniform_init(&mut rng, 2, d1, d1),
            b_cls: uniform_init(&mut rng, 1, 2, d1),
            w_fuse: uniform_init(&mut rng, 2, nf, nf),
            b_fuse: uniform_init(&mut rng, 1, 2, nf),
        }
    }

    pub fn zeros(d1: usize, d2: usize, n_covariates: usize) -> Self {
        GmaModel {
            v: Tensor2D::zeros(d2, d1),
            b_v: Tensor2D::zeros(1, d2),
            u: Tensor2D::zeros(d2, d1),
            b_u: Tensor2D::zeros(1, d2),
            w_attn: Tensor2D::zeros(1, d2),
            w_cls: Tensor2D::zeros(2, d1),
            b_cls: Tensor2D::zeros(1, 2),
            w_fuse: Tensor2D::zeros(2, 2 + n_covariates),
            b_fuse: Tensor2D::zeros(1, 2),
        }
    }

    pub fn d1(&self) -> usize {
        self.v.cols()
    }

    pub fn d2(&self) -> usize {
        self.v.rows()
    }

    pub fn n_covariates(&self) -> usize {
        self.w_fuse.cols() - 2
    }

    pub fn tensors(&self) -> [&Tensor2D; 9] {
        [
            &self.v,
            &self.b_v,
            &self.u,
            &self.b_u,
            &self.w_attn,
            &self.w_cls,
            &self.b_cls,
            &self.w_fuse,
            &self.b_fuse,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor2D; 9] {
        [
            &mut self.v,
            &mut self.b_v,
            &mut self.u,
            &mut self.b_u,
            &mut self.w_attn,
            &mut self.w_cls,
            &mut self.b_cls,
            &mut self.w_fuse,
            &mut self.b_fuse,
        ]
    }

    /// Checks that the parameter shapes agree with each other.
    pub fn validate(&self) -> Result<()> {
        let (d1, d2) = (self.d1(), self.d2());
        let expect = [
            (d2, d1),
            (1, d2),
            (d2, d1),
            (1, d2),
            (1, d2),
            (2, d1),
            (1, 2),
            (2, self.w_fuse.cols()),
            (1, 2),
        ];
        for ((t, want), name) in self.tensors().iter().zip(expect).zip(GMA_PARAM_NAMES) {
            if t.shape() != want {
                return Err(Error::Dimension(format!(
                    "parameter {name} has shape {:?}, expected {want:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::NonFinite);
            }
        }
        if self.w_fuse.cols() < 2 {
            return Err(Error::Dimension("fusion layer needs at least 2 inputs".into()));
        }
        Ok(())
    }

    fn check_bag(&self, bag: &FeatureBag) -> Result<()> {
        if bag.n_tiles() == 0 {
            return Err(Error::EmptyBag);
        }
        if bag.d1() != self.d1() {
            return Err(Error::Dimension(format!(
                "bag {} has D1={} but model expects D1={}",
                bag.slide_id,
                bag.d1(),
                self.d1()
            )));
        }
        Ok(())
    }
}

/// Intermediate values of a gated-attention forward pass.
#[derive(Debug, Clone)]
pub struct GmaOutput {
    pub logits: [f64; 2],
    pub attention: Vec<f64>,
    pub embedding: Vec<f64>,
    /// Pre-softmax attention scores.
    pub scores: Vec<f64>,
    tanh_branch: Tensor2D,
    gate_branch: Tensor2D,
}

fn add_row_bias(t: &mut Tensor2D, bias: &Tensor2D) {
    let b = bias.data().to_vec();
    for r in 0..t.rows() {
        for (x, bv) in t.row_mut(r).iter_mut().zip(&b) {
            *x += bv;
        }
    }
}

fn linear2(w: &Tensor2D, b: &Tensor2D, x: &[f64]) -> [f64; 2] {
    [
        dot(w.row(0), x) + b.get(0, 0),
        dot(w.row(1), x) + b.get(0, 1),
    ]
}

/// Gated-attention forward pass for one bag.
pub fn gma_forward(bag: &FeatureBag, model: &GmaModel) -> Result<GmaOutput> {
    model.check_bag(bag)?;
    let h = &bag.features;
    let mut pre_v = matmul_transposed(h, &model.v)?;
    add_row_bias(&mut pre_v, &model.b_v);
    let mut pre_u = matmul_transposed(h, &model.u)?;
    add_row_bias(&mut pre_u, &model.b_u);
    let tanh_branch = numkit::activate(&pre_v, numkit::Activation::Tanh)?;
    let gate_branch = numkit::activate(&pre_u, numkit::Activation::Sigmoid)?;

    let w = model.w_attn.row(0);
    let scores: Vec<f64> = (0..h.rows())
        .map(|k| {
            tanh_branch
                .row(k)
                .iter()
                .zip(gate_branch.row(k))
                .zip(w)
                .map(|((t, g), wv)| t * g * wv)
                .sum()
        })
        .collect();
    let attention = numkit::softmax(&scores)?;

    let mut embedding = vec![0.0; h.cols()];
    for (k, a) in attention.iter().enumerate() {
        for (z, hv) in embedding.iter_mut().zip(h.row(k)) {
            *z += a * hv;
        }
    }
    let logits = linear2(&model.w_cls, &model.b_cls, &embedding);
    check_finite(&logits)?;
    Ok(GmaOutput {
        logits,
        attention,
        embedding,
        scores,
        tanh_branch,
        gate_branch,
    })
}

fn fusion_input(probs: &[f64], covariates: &[f64]) -> Vec<f64> {
    let mut x = Vec::with_capacity(2 + covariates.len());
    x.extend_from_slice(probs);
    x.extend_from_slice(covariates);
    x
}

fn check_covariates(bag: &FeatureBag, model: &GmaModel) -> Result<()> {
    if bag.covariates.len() != model.n_covariates() {
        return Err(Error::Dimension(format!(
            "bag {} has {} covariates but the fusion layer expects {}",
            bag.slide_id,
            bag.covariates.len(),
            model.n_covariates()
        )));
    }
    check_finite(&bag.covariates)
}

/// Fusion-layer logits from already computed histology logits.
pub fn fuse_logits(hist_logits: [f64; 2], covariates: &[f64], model: &GmaModel) -> Result<[f64; 2]> {
    if covariates.len() != model.n_covariates() {
        return Err(Error::Dimension(format!(
            "{} covariates given, fusion layer expects {}",
            covariates.len(),
            model.n_covariates()
        )));
    }
    let s = numkit::softmax(&hist_logits)?;
    let x = fusion_input(&s, covariates);
    Ok(linear2(&model.w_fuse, &model.b_fuse, &x))
}

/// Histology class probabilities concatenated with the covariates, fed
/// through the fusion layer.
pub fn multimodal_forward(bag: &FeatureBag, model: &GmaModel) -> Result<[f64; 2]> {
    check_covariates(bag, model)?;
    let out = gma_forward(bag, model)?;
    fuse_logits(out.logits, &bag.covariates, model)
}

/// Positive-class probability from a pair of logits.
pub fn positive_probability(logits: [f64; 2]) -> f64 {
    numkit::sigmoid(logits[1] - logits[0])
}

/// Class-weighted cross-entropy on two logits. Positives carry `pos_weight`,
/// negatives `1 - pos_weight`. Returns the loss and its gradient.
pub fn weighted_ce_loss(logits: [f64; 2], label: u8, pos_weight: f64) -> Result<(f64, [f64; 2])> {
    check_finite(&logits)?;
    if !(pos_weight > 0.0 && pos_weight < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "pos_weight must lie in (0, 1), got {pos_weight}"
        )));
    }
    if label > 1 {
        return Err(Error::InvalidArgument(format!("label must be 0 or 1, got {label}")));
    }
    let weight = if label == 1 { pos_weight } else { 1.0 - pos_weight };
    let y = label as usize;
    let lse = numkit::log_sum_exp(&logits);
    let loss = weight * (lse - logits[y]);
    let p = numkit::softmax(&logits)?;
    let mut grad = [weight * p[0], weight * p[1]];
    grad[y] -= weight;
    Ok((loss, grad))
}

/// Which head(s) the training loss is attached to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Objective {
    /// Loss on the histology head only.
    Histology,
    /// Loss on the fusion head only.
    Fused,
    /// `alpha · L_hist + alpha · L_fused`: the joint loss without an
    /// auxiliary branch.
    Joint { alpha: f64 },
}

impl Objective {
    fn weights(self) -> (f64, f64) {
        match self {
            Objective::Histology => (1.0, 0.0),
            Objective::Fused => (0.0, 1.0),
            Objective::Joint { alpha } => (alpha, alpha),
        }
    }
}

/// Loss and exact gradient of the chosen objective with respect to every
/// model parameter.
pub fn gma_backward(
    bag: &FeatureBag,
    model: &GmaModel,
    label: u8,
    pos_weight: f64,
    objective: Objective,
) -> Result<(f64, GmaModel)> {
    let (w_hist, w_fused) = objective.weights();
    let fwd = gma_forward(bag, model)?;
    let mut grads = GmaModel::zeros(model.d1(), model.d2(), model.n_covariates());
    let mut loss = 0.0;
    let mut d_logits = [0.0; 2];

    if w_hist != 0.0 {
        let (l, g) = weighted_ce_loss(fwd.logits, label, pos_weight)?;
        loss += w_hist * l;
        d_logits[0] += w_hist * g[0];
        d_logits[1] += w_hist * g[1];
    }
    if w_fused != 0.0 {
        check_covariates(bag, model)?;
        let s = numkit::softmax(&fwd.logits)?;
        let x = fusion_input(&s, &bag.covariates);
        let fused = linear2(&model.w_fuse, &model.b_fuse, &x);
        let (l, g) = weighted_ce_loss(fused, label, pos_weight)?;
        loss += w_fused * l;
        let df = [w_fused * g[0], w_fused * g[1]];
        for (c, dfc) in df.iter().enumerate() {
            for (gw, xv) in grads.w_fuse.row_mut(c).iter_mut().zip(&x) {
                *gw += dfc * xv;
            }
            grads.b_fuse.set(0, c, *dfc);
        }
        // back through the probability inputs and the softmax Jacobian
        let ds = [
            df[0] * model.w_fuse.get(0, 0) + df[1] * model.w_fuse.get(1, 0),
            df[0] * model.w_fuse.get(0, 1) + df[1] * model.w_fuse.get(1, 1),
        ];
        let inner = s[0] * ds[0] + s[1] * ds[1];
        d_logits[0] += s[0] * (ds[0] - inner);
        d_logits[1] += s[1] * (ds[1] - inner);
    }

    // classifier head
    let h = &bag.features;
    let d1 = model.d1();
    let mut d_embed = vec![0.0; d1];
    for (c, dl) in d_logits.iter().enumerate() {
        for (gw, z) in grads.w_cls.row_mut(c).iter_mut().zip(&fwd.embedding) {
            *gw = dl * z;
        }
        grads.b_cls.set(0, c, *dl);
        for (de, wv) in d_embed.iter_mut().zip(model.w_cls.row(c)) {
            *de += dl * wv;
        }
    }

    // attention pooling: z = Σ a_k h_k, a = softmax(scores)
    let b = h.rows();
    if b > 1 {
        let d_attn: Vec<f64> = (0..b).map(|k| dot(&d_embed, h.row(k))).collect();
        let mean: f64 = fwd.attention.iter().zip(&d_attn).map(|(a, d)| a * d).sum();
        let d_scores: Vec<f64> = fwd
            .attention
            .iter()
            .zip(&d_attn)
            .map(|(a, d)| a * (d - mean))
            .collect();

        let d2 = model.d2();
        let w = model.w_attn.row(0);
        let mut d_pre_v = Tensor2D::zeros(b, d2);
        let mut d_pre_u = Tensor2D::zeros(b, d2);
        for k in 0..b {
            let ds = d_scores[k];
            let t = fwd.tanh_branch.row(k);
            let g = fwd.gate_branch.row(k);
            let gw_attn = grads.w_attn.row_mut(0);
            for j in 0..d2 {
                gw_attn[j] += ds * t[j] * g[j];
            }
            let dv = d_pre_v.row_mut(k);
            for j in 0..d2 {
                dv[j] = ds * w[j] * g[j] * (1.0 - t[j] * t[j]);
            }
            let du = d_pre_u.row_mut(k);
            for j in 0..d2 {
                du[j] = ds * w[j] * t[j] * g[j] * (1.0 - g[j]);
            }
        }
        grads.v = matmul(&d_pre_v.transpose(), h)?;
        grads.u = matmul(&d_pre_u.transpose(), h)?;
        for k in 0..b {
            for j in 0..d2 {
                grads.b_v.data_mut()[j] += d_pre_v.get(k, j);
                grads.b_u.data_mut()[j] += d_pre_u.get(k, j);
            }
        }
    }
    Ok((loss, grads))
}

/// Sign and attention of one tile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignedTile {
    pub positive: bool,
    pub attention: f64,
}

/// Classifier direction used for tile signs: positive row minus negative row.
pub fn classifier_direction(model: &GmaModel) -> Vec<f64> {
    model
        .w_cls
        .row(1)
        .iter()
        .zip(model.w_cls.row(0))
        .map(|(p, n)| p - n)
        .collect()
}

/// Per-tile attention with the sign of the tile's projection on the
/// classifier direction. An exact zero projection counts as negative.
pub fn signed_attention(bag: &FeatureBag, model: &GmaModel) -> Result<Vec<SignedTile>> {
    let out = gma_forward(bag, model)?;
    let dir = classifier_direction(model);
    Ok(out
        .attention
        .iter()
        .enumerate()
        .map(|(k, &a)| SignedTile {
            positive: dot(bag.features.row(k), &dir) > 0.0,
            attention: a,
        })
        .collect())
}

/// Linear per-tile classifier used by the tile-supervised baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileScorer {
    /// `2 × D1`
    pub w: Tensor2D,
    /// `1 × 2`
    pub b: Tensor2D,
}

impl TileScorer {
    pub fn new(d1: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TileScorer {
            w: uniform_init(&mut rng, 2, d1, d1),
            b: uniform_init(&mut rng, 1, 2, d1),
        }
    }

    pub fn zeros(d1: usize) -> Self {
        TileScorer {
            w: Tensor2D::zeros(2, d1),
            b: Tensor2D::zeros(1, 2),
        }
    }

    pub fn d1(&self) -> usize {
        self.w.cols()
    }

    pub fn tile_logits(&self, tile: &[f64]) -> [f64; 2] {
        linear2(&self.w, &self.b, tile)
    }

    /// Positive-class probability of every tile in the bag.
    pub fn tile_probabilities(&self, bag: &FeatureBag) -> Result<Vec<f64>> {
        if bag.n_tiles() == 0 {
            return Err(Error::EmptyBag);
        }
        if bag.d1() != self.d1() {
            return Err(Error::Dimension(format!(
                "bag {} has D1={} but tile scorer expects D1={}",
                bag.slide_id,
                bag.d1(),
                self.d1()
            )));
        }
        Ok((0..bag.n_tiles())
            .map(|k| positive_probability(self.tile_logits(bag.features.row(k))))
            .collect())
    }

    /// Mean weighted cross-entropy over the given tiles, all carrying the
    /// slide label, and its gradient.
    pub fn backward(
        &self,
        tiles: &[&[f64]],
        label: u8,
        pos_weight: f64,
    ) -> Result<(f64, TileScorer)> {
        let mut grads = TileScorer::zeros(self.d1());
        if tiles.is_empty() {
            return Ok((0.0, grads));
        }
        let scale = 1.0 / tiles.len() as f64;
        let mut loss = 0.0;
        for tile in tiles {
            let (l, g) = weighted_ce_loss(self.tile_logits(tile), label, pos_weight)?;
            loss += scale * l;
            for (c, gc) in g.iter().enumerate() {
                for (gw, x) in grads.w.row_mut(c).iter_mut().zip(tile.iter()) {
                    *gw += scale * gc * x;
                }
                grads.b.data_mut()[c] += scale * gc;
            }
        }
        Ok((loss, grads))
    }
}

/// Slide score of the tile-supervised baseline: mean positive probability
/// over the kept tiles.
pub fn tile_supervised_score(
    bag: &FeatureBag,
    scorer: &TileScorer,
    tile_mask: Option<&[bool]>,
) -> Result<f64> {
    let probs = scorer.tile_probabilities(bag)?;
    match tile_mask {
        None => Ok(probs.iter().sum::<f64>() / probs.len() as f64),
        Some(mask) => {
            if mask.len() != probs.len() {
                return Err(Error::Dimension(format!(
                    "mask has {} entries for {} tiles",
                    mask.len(),
                    probs.len()
                )));
            }
            let kept: Vec<f64> = probs
                .iter()
                .zip(mask)
                .filter(|(_, &m)| m)
                .map(|(p, _)| *p)
                .collect();
            if kept.is_empty() {
                return Err(Error::NoTilesAfterMask);
            }
            Ok(kept.iter().sum::<f64>() / kept.len() as f64)
        }
    }
}
