use std::fmt;
use std::str::FromStr;

use sdsnet_tensor::kernels::{conv3d_output_dims, maxpool3d_output_dims};
use sdsnet_tensor::{Conv3dSpec, Rounding};
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::{ANSWER_LEVELS, QUESTIONS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    /// Stacked 3D convolutions over the whole clip.
    Q3dcnn,
    /// Per-frame 2D features fed to a bidirectional LSTM.
    Bilstm,
    /// Per-frame 2D features with temporal self-attention.
    Nonlocal,
    /// No video branch.
    None,
}

impl EncoderKind {
    pub fn name(self) -> &'static str {
        match self {
            EncoderKind::Q3dcnn => "q3dcnn",
            EncoderKind::Bilstm => "bilstm",
            EncoderKind::Nonlocal => "nonlocal",
            EncoderKind::None => "none",
        }
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EncoderKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "q3dcnn" => Ok(EncoderKind::Q3dcnn),
            "bilstm" => Ok(EncoderKind::Bilstm),
            "nonlocal" => Ok(EncoderKind::Nonlocal),
            "none" => Ok(EncoderKind::None),
            _ => Err(format!("unknown encoder {s:?} (expected q3dcnn, bilstm, nonlocal or none)")),
        }
    }
}

/// Serializable mirror of [`Rounding`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Floor,
    Ceil,
}

impl From<PoolMode> for Rounding {
    fn from(m: PoolMode) -> Rounding {
        match m {
            PoolMode::Floor => Rounding::Floor,
            PoolMode::Ceil => Rounding::Ceil,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// Architecture of the screening model.
///
/// For `q3dcnn`, `channel_widths[i]` is the width of the i-th 3x3x3 conv
/// block (each followed by ReLU and 2x2x2 pooling with `pool_rounding[i]`
/// on `(T, H, W)`); the last width belongs to a final convolution whose
/// kernel spans the remaining extent. For `bilstm` and `nonlocal` the first
/// two widths are the per-frame strided conv stages and `temporal_dim` is
/// the frame embedding and recurrent state size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderKind,
    pub frames: usize,
    /// `(height, width)` of every clip.
    pub spatial: (usize, usize),
    pub channel_widths: Vec<usize>,
    pub pool_rounding: Vec<[PoolMode; 3]>,
    pub feature_dim: usize,
    pub temporal_dim: usize,
    pub fusion_hidden: Vec<usize>,
    pub use_sds: bool,
    pub use_time: bool,
    pub dtype: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full()
    }
}

/// One row of a shape trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stage {
    pub name: String,
    pub dims: Vec<usize>,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<12} {:?}", self.name, self.dims)
    }
}

/// Frame-encoder conv stages used by the sequence encoders.
pub(crate) const FRAME_STRIDE: usize = 2;
pub(crate) const FRAME_KERNEL: usize = 3;

/// Width of one question's slot in the fusion input when the video branch
/// is off: four answer levels plus the response time.
pub const TABULAR_DIM: usize = ANSWER_LEVELS + 1;

impl ModelConfig {
    /// Full-scale 3D-CNN: 100 frames of 110x110, pooled 100→50→25→13→6.
    pub fn full() -> Self {
        use PoolMode::*;
        ModelConfig {
            encoder: EncoderKind::Q3dcnn,
            frames: 100,
            spatial: (110, 110),
            channel_widths: vec![16, 32, 64, 128, 256],
            pool_rounding: vec![[Floor; 3], [Floor; 3], [Ceil, Floor, Floor], [Floor; 3]],
            feature_dim: 128,
            temporal_dim: 128,
            fusion_hidden: vec![1024, 256],
            use_sds: true,
            use_time: true,
            dtype: Precision::F32,
        }
    }

    /// Desk-scale model: 16 frames of 32x32, ceil pooling throughout.
    pub fn tiny() -> Self {
        ModelConfig {
            encoder: EncoderKind::Q3dcnn,
            frames: 16,
            spatial: (32, 32),
            channel_widths: vec![4, 8, 16, 32, 64],
            pool_rounding: vec![[PoolMode::Ceil; 3]; 4],
            feature_dim: 16,
            temporal_dim: 16,
            fusion_hidden: vec![64, 16],
            use_sds: true,
            use_time: true,
            dtype: Precision::F32,
        }
    }

    pub fn preset(name: &str) -> Result<Self, ModelError> {
        match name {
            "full" => Ok(Self::full()),
            "tiny" => Ok(Self::tiny()),
            _ => Err(ModelError::Config(format!("unknown preset {name:?} (expected full or tiny)"))),
        }
    }

    pub fn has_video(&self) -> bool {
        self.encoder != EncoderKind::None
    }

    /// Width of one question's `[a_q, s_q, t_q]` slot.
    pub fn question_dim(&self) -> usize {
        TABULAR_DIM + if self.has_video() { self.feature_dim } else { 0 }
    }

    pub fn fusion_input_dim(&self) -> usize {
        QUESTIONS * self.question_dim()
    }

    /// Checks the configuration and returns the encoder's shape trace.
    pub fn validate(&self) -> Result<Vec<Stage>, ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.fusion_hidden.contains(&0) {
            return bad("fusion_hidden widths must be positive".into());
        }
        if !self.has_video() && !self.use_sds && !self.use_time {
            return bad("model has no inputs: encoder is none and both use_sds and use_time are off".into());
        }
        if !self.has_video() {
            return Ok(Vec::new());
        }
        if self.frames == 0 || self.spatial.0 == 0 || self.spatial.1 == 0 {
            return bad("frames and spatial dims must be positive".into());
        }
        if self.feature_dim == 0 || self.temporal_dim == 0 {
            return bad("feature_dim and temporal_dim must be positive".into());
        }
        if self.channel_widths.contains(&0) {
            return bad("channel widths must be positive".into());
        }
        match self.encoder {
            EncoderKind::Q3dcnn => self.q3dcnn_trace(),
            EncoderKind::Bilstm | EncoderKind::Nonlocal => self.frame_trace(),
            EncoderKind::None => unreachable!(),
        }
    }

    fn input_dims(&self) -> Vec<usize> {
        vec![1, self.frames, self.spatial.0, self.spatial.1]
    }

    fn q3dcnn_trace(&self) -> Result<Vec<Stage>, ModelError> {
        let blocks = self.channel_widths.len().checked_sub(1).filter(|&b| b > 0).ok_or_else(|| {
            ModelError::Config("q3dcnn needs at least two channel widths (conv blocks plus the final conv)".into())
        })?;
        if self.pool_rounding.len() != blocks {
            return Err(ModelError::Config(format!(
                "{blocks} conv blocks need {blocks} pool_rounding entries, got {}",
                self.pool_rounding.len()
            )));
        }
        let shape_err = |stage: &str, e: sdsnet_tensor::TensorError| ModelError::Config(format!("{stage}: {e}"));
        let mut dims = self.input_dims();
        let mut trace = vec![Stage { name: "input".into(), dims: dims.clone() }];
        for (i, (&width, rounding)) in self.channel_widths.iter().zip(&self.pool_rounding).enumerate() {
            let name = format!("conv{}", i + 1);
            let kernel = [width, dims[0], 3, 3, 3];
            dims = conv3d_output_dims(&dims, &kernel, Conv3dSpec::padded(1)).map_err(|e| shape_err(&name, e))?.to_vec();
            trace.push(Stage { name, dims: dims.clone() });
            let name = format!("pool{}", i + 1);
            let r = rounding.map(Rounding::from);
            dims = maxpool3d_output_dims(&dims, r).map_err(|e| shape_err(&name, e))?.to_vec();
            trace.push(Stage { name, dims: dims.clone() });
        }
        let width = *self.channel_widths.last().expect("non-empty");
        let kernel = [width, dims[0], dims[1], dims[2], dims[3]];
        dims = conv3d_output_dims(&dims, &kernel, Conv3dSpec::default()).map_err(|e| shape_err("conv_final", e))?.to_vec();
        trace.push(Stage { name: "conv_final".into(), dims });
        trace.push(Stage { name: "flatten".into(), dims: vec![width] });
        trace.push(Stage { name: "fc".into(), dims: vec![self.feature_dim] });
        Ok(trace)
    }

    /// Kernel dims `[C_out, C_in, kT, kH, kW]` of the final q3dcnn conv.
    pub(crate) fn final_kernel(&self) -> Result<Vec<usize>, ModelError> {
        let trace = self.validate()?;
        let last_pool = &trace[trace.len() - 4].dims;
        let width = *self.channel_widths.last().expect("validated");
        Ok(vec![width, last_pool[0], last_pool[1], last_pool[2], last_pool[3]])
    }

    fn frame_trace(&self) -> Result<Vec<Stage>, ModelError> {
        if self.channel_widths.len() < 2 {
            return Err(ModelError::Config(format!("{} needs two frame conv widths", self.encoder)));
        }
        let mut dims = self.input_dims();
        let mut trace = vec![Stage { name: "input".into(), dims: dims.clone() }];
        for (i, &width) in self.channel_widths[..2].iter().enumerate() {
            let name = format!("frame_conv{}", i + 1);
            let kernel = [width, dims[0], 1, FRAME_KERNEL, FRAME_KERNEL];
            dims = conv3d_output_dims(&dims, &kernel, Conv3dSpec::strided(FRAME_STRIDE))
                .map_err(|e| ModelError::Config(format!("{name}: {e}")))?
                .to_vec();
            trace.push(Stage { name, dims: dims.clone() });
        }
        trace.push(Stage { name: "frames".into(), dims: vec![self.frames, dims[0] * dims[2] * dims[3]] });
        trace.push(Stage { name: "embed".into(), dims: vec![self.frames, self.temporal_dim] });
        let pooled = match self.encoder {
            EncoderKind::Bilstm => ("bilstm", 2 * self.temporal_dim),
            _ => ("nonlocal", self.temporal_dim),
        };
        trace.push(Stage { name: pooled.0.into(), dims: vec![pooled.1] });
        trace.push(Stage { name: "fc".into(), dims: vec![self.feature_dim] });
        Ok(trace)
    }

    /// Inner width of the attention projections.
    pub(crate) fn attention_dim(&self) -> usize {
        (self.temporal_dim / 2).max(1)
    }

    /// Names and dims of every parameter tensor, with Glorot fans for
    /// weights (`None` marks a bias).
    pub(crate) fn param_specs(&self) -> Result<Vec<ParamSpec>, ModelError> {
        let trace = self.validate()?;
        let mut specs = Vec::new();
        match self.encoder {
            EncoderKind::Q3dcnn => {
                let mut c_in = 1;
                for (i, &w) in self.channel_widths[..self.channel_widths.len() - 1].iter().enumerate() {
                    specs.extend(ParamSpec::conv(&format!("enc.conv{}", i + 1), vec![w, c_in, 3, 3, 3]));
                    c_in = w;
                }
                specs.extend(ParamSpec::conv("enc.conv_final", self.final_kernel()?));
                let width = *self.channel_widths.last().expect("validated");
                specs.extend(ParamSpec::dense("enc.fc", self.feature_dim, width));
            }
            EncoderKind::Bilstm | EncoderKind::Nonlocal => {
                let (c1, c2) = (self.channel_widths[0], self.channel_widths[1]);
                specs.extend(ParamSpec::conv("enc.frame_conv1", vec![c1, 1, 1, FRAME_KERNEL, FRAME_KERNEL]));
                specs.extend(ParamSpec::conv("enc.frame_conv2", vec![c2, c1, 1, FRAME_KERNEL, FRAME_KERNEL]));
                let flat = trace[3].dims[1];
                let d = self.temporal_dim;
                specs.push(ParamSpec::weight("enc.embed.w", vec![flat, d], flat, d));
                specs.push(ParamSpec::bias("enc.embed.b", d));
                if self.encoder == EncoderKind::Bilstm {
                    for dir in ["fwd", "bwd"] {
                        specs.push(ParamSpec::weight(&format!("enc.lstm.{dir}.w"), vec![4 * d, 2 * d], 2 * d, 4 * d));
                        specs.push(ParamSpec::bias(&format!("enc.lstm.{dir}.b"), 4 * d));
                    }
                    specs.extend(ParamSpec::dense("enc.fc", self.feature_dim, 2 * d));
                } else {
                    let k = self.attention_dim();
                    for name in ["theta", "phi", "g"] {
                        specs.push(ParamSpec::weight(&format!("enc.nl.{name}"), vec![d, k], d, k));
                    }
                    specs.push(ParamSpec::weight("enc.nl.out", vec![k, d], k, d));
                    specs.extend(ParamSpec::dense("enc.fc", self.feature_dim, d));
                }
            }
            EncoderKind::None => {}
        }
        let mut n_in = self.fusion_input_dim();
        for (i, &h) in self.fusion_hidden.iter().enumerate() {
            specs.extend(ParamSpec::dense(&format!("fusion.fc{}", i + 1), h, n_in));
            n_in = h;
        }
        specs.extend(ParamSpec::dense("fusion.out", 1, n_in));
        Ok(specs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub dims: Vec<usize>,
    /// `(fan_in, fan_out)` for weights, `None` for zero-initialized biases.
    pub fans: Option<(usize, usize)>,
}

impl ParamSpec {
    fn weight(name: &str, dims: Vec<usize>, fan_in: usize, fan_out: usize) -> Self {
        ParamSpec { name: name.into(), dims, fans: Some((fan_in, fan_out)) }
    }

    fn bias(name: &str, n: usize) -> Self {
        ParamSpec { name: name.into(), dims: vec![n], fans: None }
    }

    /// `w: [m, n]` and `b: [m]`.
    fn dense(prefix: &str, m: usize, n: usize) -> [Self; 2] {
        [Self::weight(&format!("{prefix}.w"), vec![m, n], n, m), Self::bias(&format!("{prefix}.b"), m)]
    }

    /// Convolution kernel `[C_out, C_in, kT, kH, kW]` plus bias.
    fn conv(prefix: &str, dims: Vec<usize>) -> [Self; 2] {
        let field: usize = dims[2..].iter().product();
        let bias = Self::bias(&format!("{prefix}.b"), dims[0]);
        [ParamSpec { name: format!("{prefix}.w"), fans: Some((dims[1] * field, dims[0] * field)), dims }, bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        assert_eq!(ModelConfig::full().fusion_input_dim(), 2660);
        let tiny = ModelConfig::tiny().validate().unwrap();
        assert_eq!(tiny.last().unwrap().dims, vec![16]);
        for enc in [EncoderKind::Bilstm, EncoderKind::Nonlocal] {
            ModelConfig { encoder: enc, ..ModelConfig::tiny() }.validate().unwrap();
            ModelConfig { encoder: enc, ..ModelConfig::full() }.validate().unwrap();
        }
    }

    #[test]
    fn infeasible_configs_rejected_at_construction() {
        let floor_tiny = ModelConfig { pool_rounding: vec![[PoolMode::Floor; 3]; 4], ..ModelConfig::tiny() };
        assert!(floor_tiny.validate().is_err());
        let short = ModelConfig { pool_rounding: vec![[PoolMode::Ceil; 3]; 3], ..ModelConfig::tiny() };
        assert!(short.validate().is_err());
        let blind = ModelConfig { encoder: EncoderKind::None, use_sds: false, use_time: false, ..ModelConfig::tiny() };
        assert!(blind.validate().is_err());
        let small = ModelConfig { spatial: (4, 4), encoder: EncoderKind::Bilstm, ..ModelConfig::tiny() };
        assert!(small.validate().is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ModelConfig { encoder: EncoderKind::Nonlocal, ..ModelConfig::tiny() };
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(toml::from_str::<ModelConfig>(&text).unwrap(), cfg);
        assert!(toml::from_str::<ModelConfig>(&format!("{text}\nbogus = 1")).is_err());
    }
}
