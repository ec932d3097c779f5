//! Backbone, transformer and the two heads: point-conditioned box regression
//! and set prediction with a no-object class.

use std::fmt;

use candle_core::{DType, Device, Tensor, D};
use pointq_core::geometry::{decode_offsets, BBox, OffsetQuad, PointAnnotation};
use pointq_core::seeding::rng_for;
use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::loss::{cxcywh_to_corners_tensor, decode_offsets_tensor, tensor_to_boxes, LossWeights};
use crate::nn::{padding_bias, Conv2d, GroupNorm, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamStore};
use crate::point_encoder::{grid_positional_map, rows_to_tensor, PointEncoder, PointEncoderConfig};

const INIT_STREAM: u64 = 0x1_4171;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectorMode {
    /// One query per annotated point, box regression only.
    Point,
    /// Learned queries, class and box heads.
    Set,
}

impl fmt::Display for DetectorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DetectorMode::Point => "point",
            DetectorMode::Set => "set",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regression {
    /// Distances from the point to the four sides.
    Relative,
    /// `(cx, cy, w, h)` predicted directly, independent of the point.
    Absolute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub mode: DetectorMode,
    pub canvas_size: usize,
    pub backbone_channels: Vec<usize>,
    pub backbone_strides: Vec<usize>,
    pub d_model: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn_dim: usize,
    pub num_categories: usize,
    /// Set mode only.
    pub num_queries: usize,
    /// Point mode only.
    pub regression: Regression,
    pub point_encoder: PointEncoderConfig,
    pub loss: LossWeights,
    /// Supervise every decoder layer instead of the last one only.
    pub aux_loss: bool,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mode: DetectorMode::Point,
            canvas_size: 64,
            backbone_channels: vec![16, 32, 48, 64],
            backbone_strides: vec![2, 2, 2, 1],
            d_model: 64,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            ffn_dim: 128,
            num_categories: 4,
            num_queries: 25,
            regression: Regression::Relative,
            point_encoder: PointEncoderConfig::default(),
            loss: LossWeights::default(),
            aux_loss: false,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn set_prediction() -> Self {
        Self {
            mode: DetectorMode::Set,
            ..Self::default()
        }
    }

    pub fn stride(&self) -> usize {
        self.backbone_strides.iter().product()
    }

    pub fn feature_size(&self) -> usize {
        self.canvas_size / self.stride().max(1)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.backbone_channels.is_empty() || self.backbone_channels.len() != self.backbone_strides.len() {
            return bad("backbone_channels and backbone_strides must be non-empty and equally long".into());
        }
        if self.backbone_strides.iter().any(|&s| s == 0) || self.backbone_channels.iter().any(|&c| c == 0) {
            return bad("backbone strides and channels must be positive".into());
        }
        let s = self.stride();
        if self.canvas_size == 0 || self.canvas_size % s != 0 {
            return bad(format!("canvas_size {} is not a multiple of stride {s}", self.canvas_size));
        }
        if self.d_model == 0 || self.d_model % 4 != 0 {
            return bad(format!("d_model {} must be a positive multiple of 4", self.d_model));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        if self.decoder_layers == 0 || self.ffn_dim == 0 || self.num_categories == 0 {
            return bad("decoder_layers, ffn_dim and num_categories must be positive".into());
        }
        if self.mode == DetectorMode::Set && self.num_queries == 0 {
            return bad("set mode needs at least one query".into());
        }
        Ok(())
    }
}

/// Box for one annotated point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointPrediction {
    /// Present under relative regression.
    pub offsets: Option<OffsetQuad>,
    pub bbox: BBox,
}

/// Output slot of the set-prediction head.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryPrediction {
    /// Class distribution, no-object last.
    pub probs: Vec<f64>,
    pub bbox: BBox,
}

impl QueryPrediction {
    /// `(class, prob)` when the arg-max over all classes is a foreground class.
    pub fn foreground(&self) -> Option<(usize, f64)> {
        let (best, p) = self
            .probs
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &p)| if p > acc.1 { (i, p) } else { acc });
        (best + 1 < self.probs.len()).then_some((best, p))
    }
}

#[derive(Clone)]
struct EncoderLayer {
    attn: MultiHeadAttention,
    norm1: LayerNorm,
    ffn: Mlp,
    norm2: LayerNorm,
}

impl EncoderLayer {
    fn new(ps: &mut ParamStore, name: &str, c: &ModelConfig) -> candle_core::Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(ps, &format!("{name}.self_attn"), c.d_model, c.heads)?,
            norm1: LayerNorm::new(ps, &format!("{name}.norm1"), c.d_model)?,
            ffn: Mlp::new(ps, &format!("{name}.ffn"), &[c.d_model, c.ffn_dim, c.d_model])?,
            norm2: LayerNorm::new(ps, &format!("{name}.norm2"), c.d_model)?,
        })
    }

    fn forward(&self, src: &Tensor, pos: &Tensor) -> candle_core::Result<Tensor> {
        let qk = src.broadcast_add(pos)?;
        let src = self.norm1.forward(&(src + self.attn.forward(&qk, &qk, src, None)?)?)?;
        self.norm2.forward(&(&src + self.ffn.forward(&src)?)?)
    }
}

#[derive(Clone)]
struct DecoderLayer {
    self_attn: MultiHeadAttention,
    norm1: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm2: LayerNorm,
    ffn: Mlp,
    norm3: LayerNorm,
}

impl DecoderLayer {
    fn new(ps: &mut ParamStore, name: &str, c: &ModelConfig) -> candle_core::Result<Self> {
        Ok(Self {
            self_attn: MultiHeadAttention::new(ps, &format!("{name}.self_attn"), c.d_model, c.heads)?,
            norm1: LayerNorm::new(ps, &format!("{name}.norm1"), c.d_model)?,
            cross_attn: MultiHeadAttention::new(ps, &format!("{name}.cross_attn"), c.d_model, c.heads)?,
            norm2: LayerNorm::new(ps, &format!("{name}.norm2"), c.d_model)?,
            ffn: Mlp::new(ps, &format!("{name}.ffn"), &[c.d_model, c.ffn_dim, c.d_model])?,
            norm3: LayerNorm::new(ps, &format!("{name}.norm3"), c.d_model)?,
        })
    }

    fn forward(
        &self,
        tgt: &Tensor,
        query_pos: &Tensor,
        memory: &Tensor,
        memory_key: &Tensor,
        self_bias: Option<&Tensor>,
    ) -> candle_core::Result<Tensor> {
        let qk = (tgt + query_pos)?;
        let tgt = self
            .norm1
            .forward(&(tgt + self.self_attn.forward(&qk, &qk, tgt, self_bias)?)?)?;
        let q = (&tgt + query_pos)?;
        let tgt = self
            .norm2
            .forward(&(&tgt + self.cross_attn.forward(&q, memory_key, memory, None)?)?)?;
        self.norm3.forward(&(&tgt + self.ffn.forward(&tgt)?)?)
    }
}

/// Largest group count up to 8 that divides `channels`.
fn backbone_groups(channels: usize) -> usize {
    (1..=8).rev().find(|g| channels % g == 0).unwrap_or(1)
}

pub struct Detector {
    config: ModelConfig,
    params: ParamStore,
    backbone: Vec<(Conv2d, GroupNorm)>,
    input_proj: Linear,
    pos: Tensor,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    decoder_norm: LayerNorm,
    point_encoder: Option<PointEncoder>,
    query_embed: Option<Tensor>,
    box_head: Mlp,
    class_head: Option<Linear>,
}

/// Map raw box-head outputs `(N, 4)` to corner boxes; `points (N, 2)` is used
/// by relative regression only.
pub fn decode_head_output(raw: &Tensor, points: &Tensor, regression: Regression) -> candle_core::Result<Tensor> {
    let s = candle_nn::ops::sigmoid(raw)?;
    match regression {
        Regression::Relative => decode_offsets_tensor(points, &s),
        Regression::Absolute => cxcywh_to_corners_tensor(&s),
    }
}

impl Detector {
    /// Fresh model with parameters drawn from `config.init_seed`.
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut ps = ParamStore::new(rng_for(config.init_seed, INIT_STREAM));
        let c = &config;
        let mut backbone = Vec::new();
        let mut c_in = 1;
        for (i, (&ch, &s)) in c.backbone_channels.iter().zip(&c.backbone_strides).enumerate() {
            let conv = Conv2d::new(&mut ps, &format!("backbone.{i}"), c_in, ch, 3, s)?;
            let norm = GroupNorm::new(&mut ps, &format!("backbone.{i}.norm"), ch, backbone_groups(ch))?;
            backbone.push((conv, norm));
            c_in = ch;
        }
        let input_proj = Linear::new(&mut ps, "input_proj", c_in, c.d_model)?;
        let fs = c.feature_size();
        let pos = rows_to_tensor(
            &grid_positional_map(fs, fs, c.d_model, c.point_encoder.temperature),
            c.d_model,
            ps.device(),
        )?;
        let encoder = (0..c.encoder_layers)
            .map(|i| EncoderLayer::new(&mut ps, &format!("encoder.{i}"), c))
            .collect::<candle_core::Result<_>>()?;
        let decoder = (0..c.decoder_layers)
            .map(|i| DecoderLayer::new(&mut ps, &format!("decoder.{i}"), c))
            .collect::<candle_core::Result<_>>()?;
        let decoder_norm = LayerNorm::new(&mut ps, "decoder.norm", c.d_model)?;
        let box_head = Mlp::new(&mut ps, "box_head", &[c.d_model, c.d_model, c.d_model, 4])?;
        let (point_encoder, query_embed, class_head) = match c.mode {
            DetectorMode::Point => (
                Some(PointEncoder::new(&mut ps, c.point_encoder.clone(), c.d_model, c.num_categories)?),
                None,
                None,
            ),
            DetectorMode::Set => (
                None,
                Some(ps.normal("query_embed", &[c.num_queries, c.d_model], 1.0)?),
                Some(Linear::new(&mut ps, "class_head", c.d_model, c.num_categories + 1)?),
            ),
        };
        Ok(Self {
            config,
            params: ps,
            backbone,
            input_proj,
            pos,
            encoder,
            decoder,
            decoder_norm,
            point_encoder,
            query_embed,
            box_head,
            class_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    pub fn point_encoder(&self) -> Option<&PointEncoder> {
        self.point_encoder.as_ref()
    }

    fn require(&self, mode: DetectorMode) -> Result<(), ModelError> {
        if self.config.mode != mode {
            return Err(ModelError::ModeMismatch {
                expected: mode,
                actual: self.config.mode,
            });
        }
        Ok(())
    }

    /// Stack grayscale images into a normalized `(B, H, W, 1)` tensor, mirroring
    /// those with `hflip[i]` set.
    pub fn image_tensor(&self, images: &[&[u8]], hflip: &[bool]) -> Result<Tensor, ModelError> {
        let n = self.config.canvas_size;
        let mut data = Vec::with_capacity(images.len() * n * n);
        for (i, img) in images.iter().enumerate() {
            if img.len() != n * n {
                return Err(ModelError::ImageSize {
                    index: i,
                    got: img.len(),
                    expected: n * n,
                });
            }
            let flip = hflip.get(i).copied().unwrap_or(false);
            for row in img.chunks(n) {
                let px = |v: &u8| *v as f32 / 127.5 - 1.0;
                if flip {
                    data.extend(row.iter().rev().map(px));
                } else {
                    data.extend(row.iter().map(px));
                }
            }
        }
        Ok(Tensor::from_vec(data, (images.len(), n, n, 1), self.device())?)
    }

    /// `(B, H, W, 1)` to a `(B, H/s, W/s, d_model)` feature map.
    pub fn backbone_forward(&self, images: &Tensor) -> Result<Tensor, ModelError> {
        let (_, h, w, c) = images.dims4()?;
        let n = self.config.canvas_size;
        if h != n || w != n || c != 1 {
            return Err(ModelError::ImageSize {
                index: 0,
                got: h * w * c,
                expected: n * n,
            });
        }
        let mut x = images.clone();
        for (conv, norm) in &self.backbone {
            x = norm.forward(&conv.forward(&x)?)?.relu()?;
        }
        Ok(self.input_proj.forward(&x)?)
    }

    fn encode(&self, images: &Tensor) -> Result<Tensor, ModelError> {
        let f = self.backbone_forward(images)?;
        let (b, h, w, d) = f.dims4()?;
        let mut src = f.reshape((b, h * w, d))?;
        let pos = self.pos.unsqueeze(0)?;
        for layer in &self.encoder {
            src = layer.forward(&src, &pos)?;
        }
        Ok(src)
    }

    /// Normalized decoder outputs, all layers with `aux_loss`, else the last.
    fn decode(&self, memory: &Tensor, query_pos: &Tensor, self_bias: Option<&Tensor>) -> Result<Vec<Tensor>, ModelError> {
        let memory_key = memory.broadcast_add(&self.pos.unsqueeze(0)?)?;
        let mut tgt = query_pos.clone();
        let mut outs = Vec::new();
        for (i, layer) in self.decoder.iter().enumerate() {
            tgt = layer.forward(&tgt, query_pos, memory, &memory_key, self_bias)?;
            if self.config.aux_loss || i + 1 == self.decoder.len() {
                outs.push(self.decoder_norm.forward(&tgt)?);
            }
        }
        Ok(outs)
    }

    fn point_queries(&self, points: &[Vec<PointAnnotation>]) -> Result<(Tensor, usize), ModelError> {
        let enc = self.point_encoder.as_ref().expect("point mode");
        let n = points.iter().map(Vec::len).max().unwrap_or(0);
        let d = self.config.d_model;
        let rows = points
            .iter()
            .map(|p| {
                let q = enc.encode_points(p)?;
                if p.len() < n {
                    let pad = Tensor::zeros((n - p.len(), d), DType::F32, self.device())?;
                    Ok(Tensor::cat(&[q, pad], 0)?)
                } else {
                    Ok(q)
                }
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        Ok((Tensor::stack(&rows, 0)?, n))
    }

    /// Raw box-head outputs `(V, 4)` per supervised decoder layer, for the `V`
    /// annotated points in image-major order.
    fn point_raw(&self, images: &Tensor, points: &[Vec<PointAnnotation>]) -> Result<Vec<Tensor>, ModelError> {
        self.require(DetectorMode::Point)?;
        let b = images.dim(0)?;
        if points.len() != b {
            return Err(ModelError::Config(format!("{b} images but {} point lists", points.len())));
        }
        let (queries, n) = self.point_queries(points)?;
        let valid: Vec<u32> = points
            .iter()
            .enumerate()
            .flat_map(|(i, p)| (0..p.len()).map(move |j| (i * n + j) as u32))
            .collect();
        if valid.is_empty() {
            return Ok(Vec::new());
        }
        let memory = self.encode(images)?;
        let counts: Vec<usize> = points.iter().map(Vec::len).collect();
        let bias = padding_bias(&counts, n, self.device())?;
        let idx = Tensor::from_vec(valid.clone(), valid.len(), self.device())?;
        self.decode(&memory, &queries, Some(&bias))?
            .iter()
            .map(|out| {
                let raw = self.box_head.forward(out)?.reshape((b * n, 4))?;
                Ok(raw.index_select(&idx, 0)?)
            })
            .collect()
    }

    fn points_tensor(&self, points: &[Vec<PointAnnotation>]) -> Result<Tensor, ModelError> {
        let xy: Vec<f32> = points.iter().flatten().flat_map(|p| [p.x as f32, p.y as f32]).collect();
        let v = xy.len() / 2;
        Ok(Tensor::from_vec(xy, (v, 2), self.device())?)
    }

    /// Corner boxes `(V, 4)` per supervised decoder layer, last layer last.
    /// Empty when no image carries a point.
    pub fn point_forward_train(
        &self,
        images: &Tensor,
        points: &[Vec<PointAnnotation>],
    ) -> Result<Vec<Tensor>, ModelError> {
        let raws = self.point_raw(images, points)?;
        if raws.is_empty() {
            return Ok(raws);
        }
        let pts = self.points_tensor(points)?;
        raws.iter()
            .map(|r| Ok(decode_head_output(r, &pts, self.config.regression)?))
            .collect()
    }

    /// One prediction per point, per image.
    pub fn predict_points(
        &self,
        images: &[&[u8]],
        points: &[Vec<PointAnnotation>],
    ) -> Result<Vec<Vec<PointPrediction>>, ModelError> {
        let x = self.image_tensor(images, &[])?;
        let raws = self.point_raw(&x, points)?;
        let Some(raw) = raws.last() else {
            return Ok(points.iter().map(|_| Vec::new()).collect());
        };
        let s: Vec<Vec<f64>> = candle_nn::ops::sigmoid(raw)?.to_dtype(DType::F64)?.to_vec2()?;
        let mut rows = s.into_iter();
        let mut out = Vec::with_capacity(points.len());
        for p in points {
            let mut preds = Vec::with_capacity(p.len());
            for pt in p {
                let r = rows.next().expect("one row per point");
                preds.push(match self.config.regression {
                    Regression::Relative => {
                        let q = OffsetQuad::new(r[0], r[1], r[2], r[3]).expect("sigmoid output lies in [0, 1]");
                        PointPrediction {
                            offsets: Some(q),
                            bbox: decode_offsets(pt, &q),
                        }
                    }
                    Regression::Absolute => PointPrediction {
                        offsets: None,
                        bbox: BBox::from_cxcywh(r[0], r[1], r[2], r[3]),
                    },
                });
            }
            out.push(preds);
        }
        Ok(out)
    }

    /// Point DETR on a single image.
    pub fn point_detr_forward(&self, image: &[u8], points: &[PointAnnotation]) -> Result<Vec<PointPrediction>, ModelError> {
        Ok(self.predict_points(&[image], &[points.to_vec()])?.pop().unwrap_or_default())
    }

    /// `(logits (B, Q, C + 1), boxes (B, Q, 4))` per supervised decoder layer.
    pub fn set_forward_train(&self, images: &Tensor) -> Result<Vec<(Tensor, Tensor)>, ModelError> {
        self.require(DetectorMode::Set)?;
        let b = images.dim(0)?;
        let q = self.config.num_queries;
        let queries = self
            .query_embed
            .as_ref()
            .expect("set mode")
            .unsqueeze(0)?
            .broadcast_as((b, q, self.config.d_model))?
            .contiguous()?;
        let memory = self.encode(images)?;
        let class_head = self.class_head.as_ref().expect("set mode");
        self.decode(&memory, &queries, None)?
            .iter()
            .map(|out| {
                let logits = class_head.forward(out)?;
                let raw = self.box_head.forward(out)?.reshape((b * q, 4))?;
                let boxes = cxcywh_to_corners_tensor(&candle_nn::ops::sigmoid(&raw)?)?.reshape((b, q, 4))?;
                Ok((logits, boxes))
            })
            .collect()
    }

    pub fn predict_set(&self, images: &[&[u8]]) -> Result<Vec<Vec<QueryPrediction>>, ModelError> {
        let x = self.image_tensor(images, &[])?;
        let outs = self.set_forward_train(&x)?;
        let (logits, boxes) = outs.last().expect("at least one decoder layer");
        let probs = candle_nn::ops::softmax(logits, D::Minus1)?;
        let mut out = Vec::with_capacity(images.len());
        for i in 0..images.len() {
            let p: Vec<Vec<f64>> = probs.get(i)?.to_dtype(DType::F64)?.to_vec2()?;
            let bx = tensor_to_boxes(&boxes.get(i)?)?;
            out.push(
                p.into_iter()
                    .zip(bx)
                    .map(|(probs, bbox)| QueryPrediction { probs, bbox })
                    .collect(),
            );
        }
        Ok(out)
    }

    /// Set prediction on a single image.
    pub fn detr_forward(&self, image: &[u8]) -> Result<Vec<QueryPrediction>, ModelError> {
        Ok(self.predict_set(&[image])?.pop().unwrap_or_default())
    }
}
