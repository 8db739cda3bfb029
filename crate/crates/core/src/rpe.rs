//! Set-prediction decoder with 8-vertex 3D relative position encoding.
//!
//! Each decoder layer runs self-attention over object queries, then
//! cross-attention over feature tokens whose logits are biased by a
//! per-head term derived from the offsets between every token position
//! and all 8 vertices of each query's current box. Boxes refine layer by
//! layer: the heads' outputs re-parameterize the next layer's encoding.

use serde::{Deserialize, Serialize};
use voxdet_tensor::ops::concat;
use voxdet_tensor::rng::Rng;
use voxdet_tensor::{DType, Tensor, TensorError};

use crate::geometry::BBox3D;
use crate::networks::{Linear, NetworkError, PredictionHeads, TokenSet};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    /// Object queries K.
    pub queries: usize,
    /// Embedding width d (divisible by `heads`).
    pub dim: usize,
    /// Attention heads h.
    pub heads: usize,
    /// Decoder layers L.
    pub layers: usize,
    /// Hidden width of the feed-forward block.
    pub ffn_hidden: usize,
    /// Hidden width of each per-vertex MLP (3 -> hidden -> h).
    pub rpe_hidden: usize,
    /// Offset-compression scale of F(d) = sign(d) ln(1 + |d|/tau).
    pub rpe_tau: f64,
    /// Real categories C (logits get one extra no-object column).
    pub num_classes: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            queries: 16,
            dim: 32,
            heads: 2,
            layers: 2,
            ffn_hidden: 64,
            rpe_hidden: 16,
            rpe_tau: 0.1,
            num_classes: 7,
        }
    }
}

/// Query embeddings plus current box state (centers in (0,1), sizes > 0).
pub struct QueryState {
    pub embeddings: Tensor,
    pub centers: Tensor,
    pub sizes: Tensor,
}

/// One layer's predictions.
pub struct DetectionOutput {
    /// `[K, C+1]` category logits, last column is no-object.
    pub logits: Tensor,
    /// `[K, 3]` box centers in (0, 1).
    pub centers: Tensor,
    /// `[K, 3]` box sizes > 0.
    pub sizes: Tensor,
}

impl DetectionOutput {
    pub fn num_queries(&self) -> usize {
        self.logits.shape()[0]
    }

    pub fn boxes(&self) -> Vec<BBox3D> {
        let c = self.centers.to_vec();
        let s = self.sizes.to_vec();
        (0..self.num_queries())
            .map(|k| BBox3D {
                center: [c[k * 3], c[k * 3 + 1], c[k * 3 + 2]],
                size: [s[k * 3], s[k * 3 + 1], s[k * 3 + 2]],
            })
            .collect()
    }

    /// Detached copy (teacher predictions carry no gradient).
    pub fn detach(&self) -> DetectionOutput {
        DetectionOutput {
            logits: self.logits.detach(),
            centers: self.centers.detach(),
            sizes: self.sizes.detach(),
        }
    }
}

/// Offsets from all 8 vertices of each box to every position:
/// `out[k, n, i, :] = positions[n, :] - vertex_i(box_k)`, vertex order
/// matching [`BBox3D::vertices`].
pub fn vertex_offsets(
    centers: &Tensor,
    sizes: &Tensor,
    positions: &Tensor,
) -> Result<Tensor, TensorError> {
    let k = centers.shape()[0];
    let n = positions.shape()[0];
    let dtype = centers.dtype();
    let half = sizes.mul_scalar(0.5);
    let mut per_vertex = Vec::with_capacity(8);
    for i in 0..8 {
        let mut signs = Vec::with_capacity(k * 3);
        for _ in 0..k {
            for a in 0..3 {
                let bit = (i >> (2 - a)) & 1;
                signs.push(if bit == 1 { 1.0 } else { -1.0 });
            }
        }
        let sign_t = Tensor::from_vec(signs, &[k, 3], dtype)?;
        let vertex = centers.add(&half.mul(&sign_t)?)?;
        let dp = vertex.offsets_to(positions)?; // [K, N, 3]
        per_vertex.push(dp.reshape(&[k, n, 1, 3])?);
    }
    let refs: Vec<&Tensor> = per_vertex.iter().collect();
    concat(&refs, 2)
}

/// One per-vertex MLP: 3 -> hidden -> h.
pub struct VertexMlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

/// The position-encoding block: 8 independent vertex MLPs summed into a
/// per-head attention bias.
pub struct RpeBias {
    pub mlps: Vec<VertexMlp>,
    pub tau: f64,
    pub heads: usize,
}

impl RpeBias {
    pub fn new(cfg: &DecoderConfig, dtype: DType, rng: &mut Rng) -> RpeBias {
        let mlps = (0..8)
            .map(|_| VertexMlp {
                fc1: Linear::new(3, cfg.rpe_hidden, dtype, rng),
                fc2: Linear::new(cfg.rpe_hidden, cfg.heads, dtype, rng),
            })
            .collect();
        RpeBias {
            mlps,
            tau: cfg.rpe_tau,
            heads: cfg.heads,
        }
    }

    /// `R = sum_i MLP_i(F(dP_i))` over the 8 vertices; `[K, N, h]`.
    pub fn forward(&self, offsets: &Tensor) -> Result<Tensor, TensorError> {
        let (k, n) = (offsets.shape()[0], offsets.shape()[1]);
        let mut total: Option<Tensor> = None;
        for (i, mlp) in self.mlps.iter().enumerate() {
            let dp = offsets
                .slice(2, i, 1)?
                .reshape(&[k * n, 3])?
                .log_compress(self.tau);
            let h = mlp.fc1.forward(&dp)?.relu();
            let bias = mlp.fc2.forward(&h)?;
            total = Some(match total {
                Some(t) => t.add(&bias)?,
                None => bias,
            });
        }
        total.expect("8 vertices").reshape(&[k, n, self.heads])
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, mlp) in self.mlps.iter().enumerate() {
            mlp.fc1.collect(&format!("{prefix}/vertex{i}/fc1"), out);
            mlp.fc2.collect(&format!("{prefix}/vertex{i}/fc2"), out);
        }
    }
}

/// Multi-head attention with optional per-head additive bias on the
/// pre-softmax logits: `A = softmax(QK^T / sqrt(d/h) + R)`.
pub fn biased_cross_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    bias: Option<&Tensor>,
    heads: usize,
    out_proj: &Linear,
) -> Result<Tensor, TensorError> {
    let d = q.shape()[1];
    if !d.is_multiple_of(heads) {
        return Err(TensorError::Dimension(format!(
            "embedding width {d} not divisible by {heads} heads"
        )));
    }
    let (kq, n) = (q.shape()[0], k.shape()[0]);
    if let Some(r) = bias {
        if r.shape() != [kq, n, heads] {
            return Err(TensorError::ShapeMismatch {
                op: "biased_cross_attention",
                lhs: r.shape().to_vec(),
                rhs: vec![kq, n, heads],
            });
        }
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.slice(1, h * dh, dh)?;
        let kh = k.slice(1, h * dh, dh)?;
        let vh = v.slice(1, h * dh, dh)?;
        let mut logits = qh.matmul(&kh.transpose2d()?)?.mul_scalar(scale);
        if let Some(r) = bias {
            let rh = r.slice(2, h, 1)?.reshape(&[kq, n])?;
            logits = logits.add(&rh)?;
        }
        let attn = logits.softmax(1)?;
        head_outputs.push(attn.matmul(&vh)?);
    }
    let refs: Vec<&Tensor> = head_outputs.iter().collect();
    out_proj.forward(&concat(&refs, 1)?)
}

/// Q/K/V/O projections for one attention block.
pub struct Mha {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl Mha {
    fn new(dim: usize, heads: usize, dtype: DType, rng: &mut Rng) -> Mha {
        Mha {
            wq: Linear::new(dim, dim, dtype, rng),
            wk: Linear::new(dim, dim, dtype, rng),
            wv: Linear::new(dim, dim, dtype, rng),
            wo: Linear::new(dim, dim, dtype, rng),
            heads,
        }
    }

    pub fn forward(
        &self,
        q_in: &Tensor,
        kv_in: &Tensor,
        bias: Option<&Tensor>,
    ) -> Result<Tensor, TensorError> {
        let q = self.wq.forward(q_in)?;
        let k = self.wk.forward(kv_in)?;
        let v = self.wv.forward(kv_in)?;
        biased_cross_attention(&q, &k, &v, bias, self.heads, &self.wo)
    }

    fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.wq.collect(&format!("{prefix}/wq"), out);
        self.wk.collect(&format!("{prefix}/wk"), out);
        self.wv.collect(&format!("{prefix}/wv"), out);
        self.wo.collect(&format!("{prefix}/wo"), out);
    }
}

pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNormParams {
    fn new(dim: usize, dtype: DType) -> LayerNormParams {
        LayerNormParams {
            gamma: Tensor::full(&[dim], 1.0, dtype),
            beta: Tensor::zeros(&[dim], dtype),
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        x.layer_norm(&self.gamma, &self.beta, 1e-5)
    }

    fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}/gamma"), self.gamma.clone()));
        out.push((format!("{prefix}/beta"), self.beta.clone()));
    }
}

pub struct DecoderLayer {
    pub self_attn: Mha,
    pub cross_attn: Mha,
    pub rpe: RpeBias,
    pub ffn1: Linear,
    pub ffn2: Linear,
    pub ln1: LayerNormParams,
    pub ln2: LayerNormParams,
    pub ln3: LayerNormParams,
}

impl DecoderLayer {
    fn new(cfg: &DecoderConfig, dtype: DType, rng: &mut Rng) -> DecoderLayer {
        DecoderLayer {
            self_attn: Mha::new(cfg.dim, cfg.heads, dtype, rng),
            cross_attn: Mha::new(cfg.dim, cfg.heads, dtype, rng),
            rpe: RpeBias::new(cfg, dtype, rng),
            ffn1: Linear::new(cfg.dim, cfg.ffn_hidden, dtype, rng),
            ffn2: Linear::new(cfg.ffn_hidden, cfg.dim, dtype, rng),
            ln1: LayerNormParams::new(cfg.dim, dtype),
            ln2: LayerNormParams::new(cfg.dim, dtype),
            ln3: LayerNormParams::new(cfg.dim, dtype),
        }
    }

    /// Self-attention, RPE-biased cross-attention over the incoming boxes,
    /// feed-forward (each with residual + layer norm), then fresh boxes
    /// from the prediction heads.
    pub fn forward(
        &self,
        state: &QueryState,
        tokens_projected: &Tensor,
        positions: &Tensor,
        heads: &PredictionHeads,
    ) -> Result<(QueryState, DetectionOutput), TensorError> {
        let x = &state.embeddings;
        let x = self
            .ln1
            .forward(&x.add(&self.self_attn.forward(x, x, None)?)?)?;
        let offsets = vertex_offsets(&state.centers, &state.sizes, positions)?;
        let r = self.rpe.forward(&offsets)?;
        let x = self.ln2.forward(&x.add(&self.cross_attn.forward(
            &x,
            tokens_projected,
            Some(&r),
        )?)?)?;
        let ff = self.ffn2.forward(&self.ffn1.forward(&x)?.relu())?;
        let x = self.ln3.forward(&x.add(&ff)?)?;
        let (logits, centers, sizes) = heads.forward(&x)?;
        Ok((
            QueryState {
                embeddings: x,
                centers: centers.clone(),
                sizes: sizes.clone(),
            },
            DetectionOutput {
                logits,
                centers,
                sizes,
            },
        ))
    }

    fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.self_attn.collect(&format!("{prefix}/self"), out);
        self.cross_attn.collect(&format!("{prefix}/cross"), out);
        self.rpe.collect(&format!("{prefix}/rpe"), out);
        self.ffn1.collect(&format!("{prefix}/ffn1"), out);
        self.ffn2.collect(&format!("{prefix}/ffn2"), out);
        self.ln1.collect(&format!("{prefix}/ln1"), out);
        self.ln2.collect(&format!("{prefix}/ln2"), out);
        self.ln3.collect(&format!("{prefix}/ln3"), out);
    }
}

/// The full decoder stack: token projection, learned query embeddings and
/// initial boxes, L layers, shared prediction heads.
pub struct RpeDecoder {
    pub cfg: DecoderConfig,
    pub input_proj: Linear,
    pub query_embed: Tensor,
    pub init_center_raw: Tensor,
    pub init_size_raw: Tensor,
    pub layers: Vec<DecoderLayer>,
    pub heads: PredictionHeads,
}

impl RpeDecoder {
    pub fn new(cfg: DecoderConfig, token_dim: usize, dtype: DType, rng: &mut Rng) -> RpeDecoder {
        let input_proj = Linear::new(token_dim, cfg.dim, dtype, rng);
        let query_embed = Tensor::randn(&[cfg.queries, cfg.dim], 0.5, dtype, rng);
        // Logistic(0) = 0.5 centers; softplus raw for 0.25 sizes.
        let init_center_raw = Tensor::zeros(&[cfg.queries, 3], dtype);
        let softplus_inv = (0.25f64.exp() - 1.0).ln();
        let init_size_raw = Tensor::full(&[cfg.queries, 3], softplus_inv, dtype);
        let layers = (0..cfg.layers)
            .map(|_| DecoderLayer::new(&cfg, dtype, rng))
            .collect();
        let heads = PredictionHeads::new(cfg.dim, cfg.num_classes, dtype, rng);
        RpeDecoder {
            cfg,
            input_proj,
            query_embed,
            init_center_raw,
            init_size_raw,
            layers,
            heads,
        }
    }

    pub fn initial_state(&self) -> QueryState {
        QueryState {
            embeddings: self.query_embed.mul_scalar(1.0),
            centers: self.init_center_raw.sigmoid(),
            sizes: self.init_size_raw.softplus(),
        }
    }

    /// Run all layers; outputs of every layer are returned (the last one
    /// is the inference output, all are eligible for auxiliary losses).
    pub fn forward(&self, tokens: &TokenSet) -> Result<Vec<DetectionOutput>, NetworkError> {
        let projected = self.input_proj.forward(&tokens.features)?;
        let mut state = self.initial_state();
        let mut outputs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, out) = layer.forward(&state, &projected, &tokens.positions, &self.heads)?;
            state = next;
            outputs.push(out);
        }
        Ok(outputs)
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.input_proj.collect("decoder/input_proj", &mut out);
        out.push(("decoder/query_embed".into(), self.query_embed.clone()));
        out.push((
            "decoder/init_center_raw".into(),
            self.init_center_raw.clone(),
        ));
        out.push(("decoder/init_size_raw".into(), self.init_size_raw.clone()));
        for (i, layer) in self.layers.iter().enumerate() {
            layer.collect(&format!("decoder/layer{i}"), &mut out);
        }
        self.heads.collect("decoder/heads", &mut out);
        out
    }
}
