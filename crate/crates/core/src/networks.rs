//! Learnable architectures: the 3D U-Net encoder-decoder, feature-token
//! sampling, detection prediction heads, and the pooled classification
//! head.

use serde::{Deserialize, Serialize};
use voxdet_tensor::ops::{concat, conv3d, conv_transpose3d, max_pool3d};
use voxdet_tensor::rng::Rng;
use voxdet_tensor::{no_grad, DType, Tensor, TensorError};

use crate::volume::Volume;

#[derive(Debug, thiserror::Error)]
pub enum NetworkError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Fully-connected layer, weight `[in, out]`.
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(inputs: usize, outputs: usize, dtype: DType, rng: &mut Rng) -> Linear {
        let std = (2.0 / inputs as f64).sqrt();
        Linear {
            weight: Tensor::randn(&[inputs, outputs], std, dtype, rng),
            bias: Tensor::zeros(&[outputs], dtype),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        x.matmul(&self.weight)?.add_bias_rows(&self.bias)
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}/weight"), self.weight.clone()));
        out.push((format!("{prefix}/bias"), self.bias.clone()));
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }
}

/// 3D conv layer with per-channel bias.
pub struct Conv3 {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv3 {
    pub fn new(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        dtype: DType,
        rng: &mut Rng,
    ) -> Conv3 {
        let fan_in = c_in * k * k * k;
        let std = (2.0 / fan_in as f64).sqrt();
        Conv3 {
            weight: Tensor::randn(&[c_out, c_in, k, k, k], std, dtype, rng),
            bias: Tensor::zeros(&[c_out], dtype),
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        conv3d(x, &self.weight, self.stride, self.padding)?.add_bias_channels(&self.bias)
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}/weight"), self.weight.clone()));
        out.push((format!("{prefix}/bias"), self.bias.clone()));
    }
}

/// Stride-2 transposed conv used for U-Net upsampling.
pub struct Deconv2 {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Deconv2 {
    pub fn new(c_in: usize, c_out: usize, dtype: DType, rng: &mut Rng) -> Deconv2 {
        let std = (2.0 / (c_in * 8) as f64).sqrt();
        Deconv2 {
            weight: Tensor::randn(&[c_in, c_out, 2, 2, 2], std, dtype, rng),
            bias: Tensor::zeros(&[c_out], dtype),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        conv_transpose3d(x, &self.weight, 2)?.add_bias_channels(&self.bias)
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}/weight"), self.weight.clone()));
        out.push((format!("{prefix}/bias"), self.bias.clone()));
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub bottleneck_channels: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            levels: 2,
            base_channels: 4,
            bottleneck_channels: 16,
        }
    }
}

impl UNetConfig {
    /// Channels at encoder level `i`.
    fn level_channels(&self, i: usize) -> usize {
        self.base_channels << i
    }

    /// Bottleneck grid extents for an input, or a configuration error when
    /// the input is not divisible by `2^levels`.
    pub fn bottleneck_dims(&self, dims: [usize; 3]) -> Result<[usize; 3], NetworkError> {
        let div = 1usize << self.levels;
        let mut out = [0; 3];
        for a in 0..3 {
            if !dims[a].is_multiple_of(div) || dims[a] == 0 {
                return Err(NetworkError::Config(format!(
                    "input dims {dims:?} not divisible by 2^levels = {div}; center_pad_crop upstream"
                )));
            }
            out[a] = dims[a] / div;
        }
        Ok(out)
    }
}

/// Bottleneck features on a spatial grid, `values: [C, dz, dy, dx]`.
pub struct FeatureGrid {
    pub values: Tensor,
}

impl FeatureGrid {
    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn dims(&self) -> [usize; 3] {
        let s = self.values.shape();
        [s[1], s[2], s[3]]
    }

    pub fn voxel_count(&self) -> usize {
        self.dims().iter().product()
    }

    /// Voxel-center coordinates in normalized [0,1]^3 model space, row-major
    /// over the grid, `[V, 3]` in (z, y, x) order.
    pub fn positions(&self) -> Tensor {
        let [dz, dy, dx] = self.dims();
        let mut data = Vec::with_capacity(dz * dy * dx * 3);
        for z in 0..dz {
            for y in 0..dy {
                for x in 0..dx {
                    data.push((z as f64 + 0.5) / dz as f64);
                    data.push((y as f64 + 0.5) / dy as f64);
                    data.push((x as f64 + 0.5) / dx as f64);
                }
            }
        }
        Tensor::from_vec(data, &[dz * dy * dx, 3], self.values.dtype()).expect("shape")
    }
}

/// Sampled feature tokens with their normalized positions.
pub struct TokenSet {
    pub features: Tensor,
    pub positions: Tensor,
}

impl TokenSet {
    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Uniform seeded token sampling without replacement. When `n` covers the
/// whole grid the tokens come out in row-major order.
pub fn sample_tokens(grid: &FeatureGrid, n: usize, key: u64) -> Result<TokenSet, NetworkError> {
    if n == 0 {
        return Err(NetworkError::Config("token count must be >= 1".into()));
    }
    let v = grid.voxel_count();
    let c = grid.channels();
    let flat = grid.values.reshape(&[c, v])?.transpose2d()?; // [V, C]
    let positions = grid.positions();
    let indices: Vec<usize> = if n >= v {
        (0..v).collect()
    } else {
        Rng::new(key).sample_without_replacement(v, n)
    };
    Ok(TokenSet {
        features: flat.select_rows(&indices)?,
        positions: positions.select_rows(&indices)?,
    })
}

/// 3D U-Net with skip connections. Encoder levels are conv+relu+pool; a
/// bottleneck conv maps to `bottleneck_channels`; the decoder mirrors with
/// transposed convs and skip concatenation down to a linear 1x1x1 output.
pub struct UNet3d {
    pub cfg: UNetConfig,
    enc: Vec<Conv3>,
    bottleneck: Conv3,
    ups: Vec<Deconv2>,
    dec: Vec<Conv3>,
    out: Conv3,
    dtype: DType,
}

impl UNet3d {
    pub fn new(cfg: UNetConfig, dtype: DType, rng: &mut Rng) -> UNet3d {
        let mut enc = Vec::with_capacity(cfg.levels);
        let mut c_in = 1;
        for i in 0..cfg.levels {
            let c_out = cfg.level_channels(i);
            enc.push(Conv3::new(c_in, c_out, 3, 1, 1, dtype, rng));
            c_in = c_out;
        }
        let bottleneck = Conv3::new(c_in, cfg.bottleneck_channels, 3, 1, 1, dtype, rng);
        let mut ups = Vec::with_capacity(cfg.levels);
        let mut dec = Vec::with_capacity(cfg.levels);
        let mut deep = cfg.bottleneck_channels;
        for i in (0..cfg.levels).rev() {
            let skip = cfg.level_channels(i);
            ups.push(Deconv2::new(deep, skip, dtype, rng));
            dec.push(Conv3::new(2 * skip, skip, 3, 1, 1, dtype, rng));
            deep = skip;
        }
        let out = Conv3::new(cfg.base_channels, 1, 1, 1, 0, dtype, rng);
        UNet3d {
            cfg,
            enc,
            bottleneck,
            ups,
            dec,
            out,
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn encode_steps(&self, x: &Tensor) -> Result<(Vec<Tensor>, Tensor), NetworkError> {
        let mut skips = Vec::with_capacity(self.cfg.levels);
        let mut h = x.clone();
        for conv in &self.enc {
            h = conv.forward(&h)?.relu();
            skips.push(h.clone());
            h = max_pool3d(&h)?;
        }
        let bott = self.bottleneck.forward(&h)?.relu();
        Ok((skips, bott))
    }

    /// Encoder path only. With `frozen` set no gradients are recorded.
    pub fn encoder_only(&self, vol: &Volume, frozen: bool) -> Result<FeatureGrid, NetworkError> {
        let x = volume_to_tensor(vol, self.dtype);
        self.cfg.bottleneck_dims(vol.dims())?;
        let run = || {
            self.encode_steps(&x)
                .map(|(_, b)| FeatureGrid { values: b })
        };
        if frozen {
            no_grad(run)
        } else {
            run()
        }
    }

    /// Full forward: bottleneck feature grid plus reconstruction at input
    /// dims. The reconstruction path reuses the same encoder activations.
    pub fn forward(&self, x: &Tensor) -> Result<(FeatureGrid, Tensor), NetworkError> {
        let dims = [x.shape()[1], x.shape()[2], x.shape()[3]];
        self.cfg.bottleneck_dims(dims)?;
        let (skips, bott) = self.encode_steps(x)?;
        let mut h = bott.clone();
        for (i, (up, conv)) in self.ups.iter().zip(&self.dec).enumerate() {
            let skip = &skips[self.cfg.levels - 1 - i];
            h = up.forward(&h)?;
            h = concat(&[&h, skip], 0)?;
            h = conv.forward(&h)?.relu();
        }
        let recon = self.out.forward(&h)?;
        Ok((FeatureGrid { values: bott }, recon))
    }

    pub fn encoder_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, conv) in self.enc.iter().enumerate() {
            conv.collect(&format!("encoder/level{i}/conv"), &mut out);
        }
        self.bottleneck.collect("encoder/bottleneck/conv", &mut out);
        out
    }

    pub fn decoder_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, (up, conv)) in self.ups.iter().zip(&self.dec).enumerate() {
            let level = self.cfg.levels - 1 - i;
            up.collect(&format!("decoder/level{level}/up"), &mut out);
            conv.collect(&format!("decoder/level{level}/conv"), &mut out);
        }
        self.out.collect("decoder/out", &mut out);
        out
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = self.encoder_params();
        out.extend(self.decoder_params());
        out
    }
}

/// `[1, Z, Y, X]` tensor view of a volume.
pub fn volume_to_tensor(vol: &Volume, dtype: DType) -> Tensor {
    let [z, y, x] = vol.dims();
    Tensor::from_vec(vol.voxels.clone(), &[1, z, y, x], dtype).expect("dims match")
}

/// Detection heads: category logits (with one extra no-object column),
/// logistic-squashed centers, softplus-positive sizes.
pub struct PredictionHeads {
    pub cls: Linear,
    pub center: Linear,
    pub size: Linear,
    pub num_classes: usize,
}

impl PredictionHeads {
    pub fn new(dim: usize, num_classes: usize, dtype: DType, rng: &mut Rng) -> PredictionHeads {
        PredictionHeads {
            cls: Linear::new(dim, num_classes + 1, dtype, rng),
            center: Linear::new(dim, 3, dtype, rng),
            size: Linear::new(dim, 3, dtype, rng),
            num_classes,
        }
    }

    /// `(logits [K, C+1], centers [K, 3] in (0,1), sizes [K, 3] > 0)`.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor, Tensor), TensorError> {
        Ok((
            self.cls.forward(x)?,
            self.center.forward(x)?.sigmoid(),
            self.size.forward(x)?.softplus(),
        ))
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.cls.collect(&format!("{prefix}/cls"), out);
        self.center.collect(&format!("{prefix}/center"), out);
        self.size.collect(&format!("{prefix}/size"), out);
    }
}

/// Two-layer classification head: in -> hidden (relu, dropout 0.5) -> 7.
pub struct ClassificationHead {
    pub fc1: Linear,
    pub fc2: Linear,
    pub dropout: f64,
}

impl ClassificationHead {
    pub fn new(
        inputs: usize,
        hidden: usize,
        outputs: usize,
        dtype: DType,
        rng: &mut Rng,
    ) -> ClassificationHead {
        ClassificationHead {
            fc1: Linear::new(inputs, hidden, dtype, rng),
            fc2: Linear::new(hidden, outputs, dtype, rng),
            dropout: 0.5,
        }
    }

    pub fn forward(&self, x: &Tensor, train: bool, key: u64) -> Result<Tensor, NetworkError> {
        let w = self.fc1.weight.shape()[0];
        if x.rank() != 2 || x.shape()[1] != w {
            return Err(NetworkError::Config(format!(
                "classification head expects [B, {w}] features, got {:?}",
                x.shape()
            )));
        }
        let h = self
            .fc1
            .forward(x)?
            .relu()
            .dropout(self.dropout, train, key);
        Ok(self.fc2.forward(&h)?)
    }

    pub fn param_count(&self) -> usize {
        self.fc1.param_count() + self.fc2.param_count()
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.fc1.collect(&format!("{prefix}/fc1"), out);
        self.fc2.collect(&format!("{prefix}/fc2"), out);
    }
}

/// Per-channel spatial mean of a feature grid, `[C]`.
pub fn global_avg_pool(grid: &FeatureGrid) -> Result<Tensor, TensorError> {
    let c = grid.channels();
    let v = grid.voxel_count();
    grid.values.reshape(&[c, v])?.row_mean()
}
