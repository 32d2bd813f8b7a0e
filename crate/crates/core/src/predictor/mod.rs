//! Toy transformer that maps one image to body parameters and grouped
//! Gaussian attributes.
//!
//! Image patches are embedded and encoded; `5K + 1` learned queries (one
//! body query, then five per vertex group in the order rotation, offset,
//! scale, colour, opacity) cross-attend to the encoded patches. Each
//! attribute type has one linear head shared by all groups that emits the
//! raw values of every Gaussian in a group.

mod checkpoint;
pub mod nn;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use nalgebra::{Vector3, Vector4};
use rayon::prelude::*;
use ndarray::s;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::body_model::{BodyModel, PoseParams};
use crate::dataio::SceneDataset;
use crate::error::{Error, Result};
use crate::gaussian::{logit, GaussianAttributes, ScaffoldConfig, INIT_OPACITY};
use crate::image::Image;
use crate::losses::{LossReport, LossWeights};
use crate::optim::{Adam, AdamConfig};
use crate::pipeline::{objective, Avatar, Objective};
use crate::rotation::{rot6_backward, rot6_to_matrix, Rot6, IDENTITY_ROT6};
use nn::{gelu, gelu_backward, normal_matrix, DecoderBlock, EncoderBlock, Grads, LayerNorm, Linear, Mat, ParamId, ParamStore};

/// Attribute types decoded from the grouped queries, in query order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttributeKind {
    Rotation,
    Offset,
    Scale,
    Color,
    Opacity,
}

impl AttributeKind {
    pub const ALL: [AttributeKind; 5] = [
        AttributeKind::Rotation,
        AttributeKind::Offset,
        AttributeKind::Scale,
        AttributeKind::Color,
        AttributeKind::Opacity,
    ];

    pub fn dim(self) -> usize {
        match self {
            AttributeKind::Rotation => 4,
            AttributeKind::Offset | AttributeKind::Scale | AttributeKind::Color => 3,
            AttributeKind::Opacity => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AttributeKind::Rotation => "rotation",
            AttributeKind::Offset => "offset",
            AttributeKind::Scale => "scale",
            AttributeKind::Color => "color",
            AttributeKind::Opacity => "opacity",
        }
    }
}

pub const QUERIES_PER_GROUP: usize = AttributeKind::ALL.len();

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    /// Hidden width of the block MLPs as a multiple of `embed_dim`.
    pub mlp_ratio: usize,
    /// Number of vertex groups `K`.
    pub groups: usize,
    /// Vertices per group; `groups * group_size` must equal the vertex count.
    pub group_size: usize,
    pub gaussians_per_vertex: usize,
    pub num_joints: usize,
    pub num_betas: usize,
    /// Initial isotropic Gaussian scale in meters.
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            embed_dim: 128,
            encoder_layers: 4,
            decoder_layers: 2,
            heads: 4,
            mlp_ratio: 4,
            groups: 26,
            group_size: 265,
            gaussians_per_vertex: 1,
            num_joints: 24,
            num_betas: 10,
            init_scale: 0.01,
            seed: 0,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image size {} is not a multiple of the patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!(
                "embed_dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            ));
        }
        if self.groups == 0 || self.group_size == 0 {
            return bad("group count and size must be positive".into());
        }
        if !(1..=3).contains(&self.gaussians_per_vertex) {
            return bad("gaussians_per_vertex must be 1, 2 or 3".into());
        }
        if self.num_joints == 0 || self.mlp_ratio == 0 {
            return bad("num_joints and mlp_ratio must be positive".into());
        }
        if !(self.init_scale.is_finite() && self.init_scale > 0.0) {
            return bad(format!("invalid init_scale {}", self.init_scale));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    pub fn num_queries(&self) -> usize {
        QUERIES_PER_GROUP * self.groups + 1
    }

    pub fn num_vertices(&self) -> usize {
        self.groups * self.group_size
    }

    pub fn num_gaussians(&self) -> usize {
        self.num_vertices() * self.gaussians_per_vertex
    }

    /// Outputs of the body head: 6D rotations, shape, root translation and
    /// a weak-perspective placement `(s, tx, ty)`.
    pub fn body_outputs(&self) -> usize {
        self.num_joints * 6 + self.num_betas + 3 + 3
    }

    /// Checks that the configuration matches a body model.
    pub fn check_model(&self, model: &BodyModel) -> Result<()> {
        if self.num_vertices() != model.num_vertices() {
            return Err(Error::invalid(format!(
                "{} groups x {} vertices = {} does not match the body model's {} vertices",
                self.groups,
                self.group_size,
                self.num_vertices(),
                model.num_vertices()
            )));
        }
        if self.num_joints != model.num_joints() || self.num_betas != model.num_betas() {
            return Err(Error::invalid("predictor joint or shape count does not match the body model"));
        }
        Ok(())
    }
}

/// Decoded parameters in raw (pre-activation) form.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorOutput {
    pub rot6: Vec<Rot6>,
    pub betas: Vec<f64>,
    pub root_translation: Vector3<f64>,
    /// Weak-perspective `(s, tx, ty)`; unused when calibrated cameras exist.
    pub weak_perspective: [f64; 3],
    pub attrs: GaussianAttributes,
}

impl PredictorOutput {
    pub fn to_avatar(&self) -> Avatar {
        Avatar {
            pose: PoseParams {
                joint_rotations: self.rot6.iter().map(rot6_to_matrix).collect(),
                root_translation: self.root_translation,
            },
            betas: self.betas.clone(),
            attrs: self.attrs.clone(),
        }
    }
}

/// Gradients with respect to the decoded raw outputs.
#[derive(Clone, Debug)]
pub struct OutputGrads {
    pub rot6: Vec<Rot6>,
    pub betas: Vec<f64>,
    pub root_translation: Vector3<f64>,
    pub attrs: GaussianAttributes,
}

/// Intermediates of one forward pass.
pub struct ForwardCache {
    patches: Mat,
    enc: Vec<nn::EncoderCache>,
    enc_ln: nn::LayerNormCache,
    memory: Mat,
    dec: Vec<nn::DecoderCache>,
    dec_ln: nn::LayerNormCache,
    decoded: Mat,
    body_pre: Mat,
    body_act: Mat,
    group_inputs: Vec<Mat>,
}

impl ForwardCache {
    /// Number of query tokens the decoder produced.
    pub fn decoded_queries(&self) -> usize {
        self.decoded.nrows()
    }
}

#[derive(Clone, Debug)]
pub struct Predictor {
    pub config: PredictorConfig,
    pub params: ParamStore,
    patch_embed: Linear,
    pos_embed: ParamId,
    encoder: Vec<EncoderBlock>,
    enc_norm: LayerNorm,
    queries: ParamId,
    decoder: Vec<DecoderBlock>,
    dec_norm: LayerNorm,
    body_fc1: Linear,
    body_fc2: Linear,
    heads: [Linear; 5],
}

impl Predictor {
    pub fn new(config: PredictorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut p = ParamStore::default();
        let d = config.embed_dim;
        let hidden = d * config.mlp_ratio;
        let patch_dim = config.patch_size * config.patch_size * 3;
        let patch_embed = Linear::new(&mut p, "patch_embed", patch_dim, d, &mut rng);
        let pos_embed = p.add("pos_embed", normal_matrix(&mut rng, config.num_patches(), d, 0.02));
        let encoder = (0..config.encoder_layers)
            .map(|i| EncoderBlock::new(&mut p, &format!("encoder.{i}"), d, config.heads, hidden, &mut rng))
            .collect();
        let enc_norm = LayerNorm::new(&mut p, "encoder.norm", d);
        let queries = p.add("queries", normal_matrix(&mut rng, config.num_queries(), d, 1.0));
        let decoder = (0..config.decoder_layers)
            .map(|i| DecoderBlock::new(&mut p, &format!("decoder.{i}"), d, config.heads, hidden, &mut rng))
            .collect();
        let dec_norm = LayerNorm::new(&mut p, "decoder.norm", d);

        let body_fc1 = Linear::new(&mut p, "body_head.fc1", d, d, &mut rng);
        let mut body_bias = Mat::zeros((1, config.body_outputs()));
        for j in 0..config.num_joints {
            for (k, v) in IDENTITY_ROT6.iter().enumerate() {
                body_bias[(0, j * 6 + k)] = *v;
            }
        }
        body_bias[(0, config.num_joints * 6 + config.num_betas + 3)] = 1.0;
        let body_fc2 = Linear::with_init(
            &mut p,
            "body_head.fc2",
            normal_matrix(&mut rng, d, config.body_outputs(), 1e-3),
            body_bias,
        );

        let rows = config.group_size * config.gaussians_per_vertex;
        let heads = AttributeKind::ALL.map(|kind| {
            let dim = kind.dim();
            let width = rows * dim;
            let (w, bias_row): (Mat, Vec<f64>) = match kind {
                AttributeKind::Offset => (Mat::zeros((d, width)), vec![0.0; 3]),
                AttributeKind::Rotation => (normal_matrix(&mut rng, d, width, 0.01), vec![1.0, 0.0, 0.0, 0.0]),
                AttributeKind::Scale => (
                    normal_matrix(&mut rng, d, width, 0.01),
                    vec![config.init_scale.ln(); 3],
                ),
                AttributeKind::Color => (normal_matrix(&mut rng, d, width, 0.01), vec![0.0; 3]),
                AttributeKind::Opacity => (normal_matrix(&mut rng, d, width, 0.01), vec![logit(INIT_OPACITY)]),
            };
            let b = Mat::from_shape_fn((1, width), |(_, c)| bias_row[c % dim]);
            Linear::with_init(&mut p, &format!("head.{}", kind.name()), w, b)
        });

        Ok(Self {
            config,
            params: p,
            patch_embed,
            pos_embed,
            encoder,
            enc_norm,
            queries,
            decoder,
            dec_norm,
            body_fc1,
            body_fc2,
            heads,
        })
    }

    /// Flattens non-overlapping patches, each in (row, column, channel) order.
    pub fn patchify(&self, image: &Image) -> Result<Mat> {
        let c = &self.config;
        if image.width != c.image_size || image.height != c.image_size || image.channels != 3 {
            return Err(Error::invalid(format!(
                "predictor expects a {0}x{0} RGB image, got {1}x{2}x{3}",
                c.image_size, image.width, image.height, image.channels
            )));
        }
        let p = c.patch_size;
        let per_row = c.image_size / p;
        Ok(Mat::from_shape_fn((c.num_patches(), p * p * 3), |(i, k)| {
            let (py, px) = (i / per_row, i % per_row);
            let (y, x, ch) = (k / (p * 3), (k / 3) % p, k % 3);
            image.get(px * p + x, py * p + y, ch)
        }))
    }

    /// Image tokens after the encoder, before the final norm.
    pub fn encode(&self, image: &Image) -> Result<Mat> {
        let patches = self.patchify(image)?;
        let mut x = self.patch_embed.forward(&self.params, &patches) + self.params.get(self.pos_embed);
        for blk in &self.encoder {
            x = blk.forward(&self.params, &x).0;
        }
        Ok(x)
    }

    pub fn forward(&self, image: &Image) -> Result<(PredictorOutput, ForwardCache)> {
        let p = &self.params;
        let c = &self.config;
        let patches = self.patchify(image)?;
        let mut x = self.patch_embed.forward(p, &patches) + p.get(self.pos_embed);
        let mut enc = Vec::with_capacity(self.encoder.len());
        for blk in &self.encoder {
            let (y, cache) = blk.forward(p, &x);
            enc.push(cache);
            x = y;
        }
        let (memory, enc_ln) = self.enc_norm.forward(p, &x);

        let mut q = p.get(self.queries).clone();
        let mut dec = Vec::with_capacity(self.decoder.len());
        for blk in &self.decoder {
            let (y, cache) = blk.forward(p, &q, &memory);
            dec.push(cache);
            q = y;
        }
        let (decoded, dec_ln) = self.dec_norm.forward(p, &q);

        let body_in = decoded.slice(s![0..1, ..]).to_owned();
        let body_pre = self.body_fc1.forward(p, &body_in);
        let body_act = gelu(&body_pre);
        let body = self.body_fc2.forward(p, &body_act);
        let body = body.row(0);
        let nj = c.num_joints;
        let rot6 = (0..nj)
            .map(|j| std::array::from_fn(|k| body[j * 6 + k]))
            .collect();
        let betas = (0..c.num_betas).map(|k| body[nj * 6 + k]).collect();
        let at = nj * 6 + c.num_betas;
        let root_translation = Vector3::new(body[at], body[at + 1], body[at + 2]);
        let weak_perspective = [body[at + 3], body[at + 4], body[at + 5]];

        let n = c.num_gaussians();
        let rows = c.group_size * c.gaussians_per_vertex;
        let mut attrs = GaussianAttributes::zeros(n);
        let mut group_inputs = Vec::with_capacity(5);
        for (t, kind) in AttributeKind::ALL.iter().enumerate() {
            let input = Mat::from_shape_fn((c.groups, c.embed_dim), |(k, e)| {
                decoded[(1 + k * QUERIES_PER_GROUP + t, e)]
            });
            let out = self.heads[t].forward(p, &input);
            let dim = kind.dim();
            for k in 0..c.groups {
                for r in 0..rows {
                    let row = k * rows + r;
                    let v = |i: usize| out[(k, r * dim + i)];
                    match kind {
                        AttributeKind::Rotation => attrs.rotations[row] = Vector4::new(v(0), v(1), v(2), v(3)),
                        AttributeKind::Offset => attrs.offsets[row] = Vector3::new(v(0), v(1), v(2)),
                        AttributeKind::Scale => attrs.log_scales[row] = Vector3::new(v(0), v(1), v(2)),
                        AttributeKind::Color => attrs.colors_raw[row] = Vector3::new(v(0), v(1), v(2)),
                        AttributeKind::Opacity => attrs.opacity_logits[row] = v(0),
                    }
                }
            }
            group_inputs.push(input);
        }

        Ok((
            PredictorOutput {
                rot6,
                betas,
                root_translation,
                weak_perspective,
                attrs,
            },
            ForwardCache {
                patches,
                enc,
                enc_ln,
                memory,
                dec,
                dec_ln,
                decoded,
                body_pre,
                body_act,
                group_inputs,
            },
        ))
    }

    /// Reverse pass from output gradients to every parameter.
    pub fn backward(&self, cache: &ForwardCache, d_out: &OutputGrads) -> Grads {
        let p = &self.params;
        let c = &self.config;
        let mut g = p.zero_grads();
        let mut d_decoded = Mat::zeros(cache.decoded.raw_dim());

        let nj = c.num_joints;
        let mut d_body = Mat::zeros((1, c.body_outputs()));
        for j in 0..nj {
            for k in 0..6 {
                d_body[(0, j * 6 + k)] = d_out.rot6[j][k];
            }
        }
        for k in 0..c.num_betas {
            d_body[(0, nj * 6 + k)] = d_out.betas[k];
        }
        for k in 0..3 {
            d_body[(0, nj * 6 + c.num_betas + k)] = d_out.root_translation[k];
        }
        let d_act = self.body_fc2.backward(p, &mut g, &cache.body_act, &d_body);
        let d_pre = gelu_backward(&cache.body_pre, &d_act);
        let body_in = cache.decoded.slice(s![0..1, ..]).to_owned();
        let d_body_in = self.body_fc1.backward(p, &mut g, &body_in, &d_pre);
        d_decoded.slice_mut(s![0..1, ..]).assign(&d_body_in);

        let rows = c.group_size * c.gaussians_per_vertex;
        for (t, kind) in AttributeKind::ALL.iter().enumerate() {
            let dim = kind.dim();
            let mut d_head = Mat::zeros((c.groups, rows * dim));
            for k in 0..c.groups {
                for r in 0..rows {
                    let row = k * rows + r;
                    let vals: &[f64] = match kind {
                        AttributeKind::Rotation => d_out.attrs.rotations[row].as_slice(),
                        AttributeKind::Offset => d_out.attrs.offsets[row].as_slice(),
                        AttributeKind::Scale => d_out.attrs.log_scales[row].as_slice(),
                        AttributeKind::Color => d_out.attrs.colors_raw[row].as_slice(),
                        AttributeKind::Opacity => std::slice::from_ref(&d_out.attrs.opacity_logits[row]),
                    };
                    for (i, v) in vals.iter().enumerate() {
                        d_head[(k, r * dim + i)] = *v;
                    }
                }
            }
            let d_in = self.heads[t].backward(p, &mut g, &cache.group_inputs[t], &d_head);
            for k in 0..c.groups {
                d_decoded
                    .row_mut(1 + k * QUERIES_PER_GROUP + t)
                    .assign(&d_in.row(k));
            }
        }

        let mut dq = self.dec_norm.backward(p, &mut g, &cache.dec_ln, &d_decoded);
        let mut d_memory = Mat::zeros(cache.memory.raw_dim());
        for (i, blk) in self.decoder.iter().enumerate().rev() {
            let (dx, dm) = blk.backward(p, &mut g, &cache.dec[i], &cache.memory, &dq);
            d_memory += &dm;
            dq = dx;
        }
        g.0[self.queries] += &dq;

        let mut dx = self.enc_norm.backward(p, &mut g, &cache.enc_ln, &d_memory);
        for (i, blk) in self.encoder.iter().enumerate().rev() {
            dx = blk.backward(p, &mut g, &cache.enc[i], &dx);
        }
        g.0[self.pos_embed] += &dx;
        self.patch_embed.backward(p, &mut g, &cache.patches, &dx);
        g
    }
}


#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Samples per Adam update; batches cycle through the training set in order.
    pub batch_size: usize,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            lr: 1e-4,
            batch_size: 1,
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        self.weights.validate()
    }
}

/// One training example: the network input and the views that supervise
/// its prediction.
#[derive(Clone, Copy)]
pub struct TrainSample<'a> {
    pub input: &'a Image,
    pub scene: &'a SceneDataset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub report: LossReport,
    pub grad_norm: f64,
}

/// Loss, decoded output and parameter gradients for one sample.
pub struct SampleEval {
    pub objective: Objective,
    pub output: PredictorOutput,
    pub grads: Option<Grads>,
}

/// Predictor plus optimizer state for end-to-end training through the
/// renderer.
pub struct Trainer {
    pub predictor: Predictor,
    pub scaffold: ScaffoldConfig,
    pub weights: LossWeights,
    adam: Adam,
}

impl Trainer {
    pub fn new(predictor: Predictor, scaffold: ScaffoldConfig, weights: LossWeights, adam: AdamConfig) -> Result<Self> {
        scaffold.validate()?;
        weights.validate()?;
        if scaffold.gaussians_per_vertex != predictor.config.gaussians_per_vertex {
            return Err(Error::invalid("scaffold and predictor disagree on Gaussians per vertex"));
        }
        let n = predictor.params.num_scalars();
        Ok(Self {
            predictor,
            scaffold,
            weights,
            adam: Adam::new(n, adam),
        })
    }

    /// Trainer with the learning rate and loss weights of `cfg`.
    pub fn from_config(predictor: Predictor, scaffold: ScaffoldConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Self::new(predictor, scaffold, cfg.weights, AdamConfig::with_lr(cfg.lr))
    }

    pub fn evaluate(&self, model: &BodyModel, sample: TrainSample<'_>, want_grad: bool) -> Result<SampleEval> {
        self.predictor.config.check_model(model)?;
        if sample.scene.views.is_empty() {
            return Err(Error::invalid("training sample has no supervision views"));
        }
        let (output, cache) = self.predictor.forward(sample.input)?;
        let avatar = output.to_avatar();
        let objective = objective(
            model,
            &avatar,
            &self.scaffold,
            &sample.scene.cameras(),
            &sample.scene.targets(),
            &sample.scene.background,
            &self.weights,
            want_grad,
        )?;
        let grads = objective.grads.as_ref().map(|g| {
            let d_out = OutputGrads {
                rot6: output
                    .rot6
                    .iter()
                    .zip(&g.joint_rotations)
                    .map(|(r, gr)| rot6_backward(r, gr))
                    .collect(),
                betas: g.betas.clone(),
                root_translation: g.root_translation,
                attrs: g.attrs.clone(),
            };
            self.predictor.backward(&cache, &d_out)
        });
        Ok(SampleEval {
            objective,
            output,
            grads,
        })
    }

    /// One Adam update on the mean loss of `batch`. Samples are evaluated in
    /// parallel and reduced in batch order.
    pub fn step(&mut self, model: &BodyModel, batch: &[TrainSample<'_>]) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::invalid("empty training batch"));
        }
        let evals = batch
            .par_iter()
            .map(|s| self.evaluate(model, *s, true))
            .collect::<Result<Vec<_>>>()?;
        let n = batch.len() as f64;
        let mut flat = vec![0.0; self.adam.len()];
        let mut report = LossReport::default();
        for e in &evals {
            let g = e.grads.as_ref().expect("gradients requested").to_flat();
            for (a, b) in flat.iter_mut().zip(&g) {
                *a += b / n;
            }
            let r = &e.objective.report;
            report.mse += r.mse / n;
            report.perceptual += r.perceptual / n;
            report.alpha_mask += r.alpha_mask / n;
            report.tight += r.tight / n;
            report.beta_reg += r.beta_reg / n;
            report.total += r.total / n;
            report.per_view.extend(r.per_view.iter().cloned());
        }
        report.check_finite()?;
        let grad_norm = flat.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite("predictor gradient".into()));
        }
        let mut params = self.predictor.params.to_flat();
        self.adam.step(&mut params, &flat);
        self.predictor.params.set_flat(&params);
        Ok(StepReport { report, grad_norm })
    }

    /// Mean PSNR over the supervision views of the current prediction.
    pub fn psnr(&self, model: &BodyModel, sample: TrainSample<'_>) -> Result<f64> {
        let e = self.evaluate(model, sample, false)?;
        let mut total = 0.0;
        for (r, v) in e.objective.forward.renders.iter().zip(&sample.scene.views) {
            total += crate::metrics::psnr(&r.rgb, &v.image)?;
        }
        Ok(total / sample.scene.views.len() as f64)
    }
}

/// Runs up to `cfg.steps` updates. Batch `i` holds samples
/// `i * batch_size ..` taken cyclically. `on_step` sees each report (the
/// loss before that update) and stops training by returning `false`.
pub fn train(
    trainer: &mut Trainer,
    model: &BodyModel,
    samples: &[TrainSample<'_>],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, &StepReport, &Trainer) -> bool,
) -> Result<Vec<StepReport>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("no training samples"));
    }
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<TrainSample<'_>> = (0..cfg.batch_size)
            .map(|k| samples[(step * cfg.batch_size + k) % samples.len()])
            .collect();
        let r = trainer.step(model, &batch)?;
        let go_on = on_step(step, &r, trainer);
        trace.push(r);
        if !go_on {
            break;
        }
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body_model::SyntheticBodyConfig;

    fn toy_config() -> PredictorConfig {
        PredictorConfig {
            image_size: 16,
            patch_size: 8,
            embed_dim: 16,
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 2,
            mlp_ratio: 2,
            groups: 4,
            group_size: 15,
            ..Default::default()
        }
    }

    #[test]
    fn token_and_row_counts() {
        for (k, gs) in [(4, 15), (13, 530), (26, 265)] {
            let cfg = PredictorConfig {
                groups: k,
                group_size: gs,
                embed_dim: 16,
                heads: 2,
                encoder_layers: 1,
                decoder_layers: 1,
                mlp_ratio: 1,
                ..Default::default()
            };
            let p = Predictor::new(cfg.clone()).unwrap();
            assert_eq!(p.params.get(p.queries).nrows(), 5 * k + 1);
            let (out, _) = p.forward(&Image::filled(64, 64, 3, 0.3)).unwrap();
            assert_eq!(out.attrs.len(), k * gs);
        }
    }

    #[test]
    fn patch_counts() {
        let p = Predictor::new(toy_config()).unwrap();
        assert_eq!(p.encode(&Image::new(16, 16, 3)).unwrap().dim(), (4, 16));
        let cfg = PredictorConfig {
            image_size: 256,
            patch_size: 16,
            embed_dim: 8,
            heads: 2,
            encoder_layers: 1,
            decoder_layers: 0,
            groups: 1,
            group_size: 1,
            ..Default::default()
        };
        let p = Predictor::new(cfg).unwrap();
        assert_eq!(p.encode(&Image::new(256, 256, 3)).unwrap().nrows(), 256);
        assert!(p.encode(&Image::new(128, 128, 3)).is_err());
    }

    #[test]
    fn initial_outputs() {
        let p = Predictor::new(toy_config()).unwrap();
        let img = Image::filled(16, 16, 3, 0.7);
        let (a, _) = p.forward(&img).unwrap();
        let (b, _) = p.forward(&img).unwrap();
        assert_eq!(a, b);
        assert!(a.attrs.offsets.iter().all(|o| *o == Vector3::zeros()));
        for r in &a.rot6 {
            let m = rot6_to_matrix(r);
            assert!(crate::rotation::rotation_angle(&m) < 0.05);
        }
    }

    #[test]
    fn invalid_configs() {
        let mut c = toy_config();
        c.image_size = 20;
        assert!(Predictor::new(c).is_err());
        let mut c = toy_config();
        c.heads = 3;
        assert!(Predictor::new(c).is_err());
        let model = SyntheticBodyConfig {
            vertices: 61,
            ..Default::default()
        }
        .build()
        .unwrap();
        assert!(toy_config().check_model(&model).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = Predictor::new(toy_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.gstp");
        write_checkpoint(&p, &path).unwrap();
        let q = read_checkpoint(&path).unwrap();
        assert_eq!(q.config, p.config);
        for (a, b) in p.params.values().iter().zip(q.params.values()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(read_checkpoint(&path).is_err());
    }
}
