//! Network configuration and the named parameter store.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, S3poError};

/// Horizontal boundary handling of every 3×3 convolution. Rows are always
/// zero padded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvPadding {
    Zero,
    /// Circular in the horizontal direction, matching the continuity of an
    /// equirectangular frame across its left and right edges.
    Wrap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub num_blocks: usize,
    pub scale: usize,
    pub attention_enabled: bool,
    pub hidden_state_enabled: bool,
    pub mutual_exchange_enabled: bool,
    pub cyclic_enabled: bool,
    /// Squash the channel-attention map with a sigmoid. Turning this off
    /// evaluates the attention gate exactly as the bare sum of the two
    /// descriptor branches.
    pub channel_attention_sigmoid: bool,
    /// Channel reduction ratio of the channel-attention bottleneck.
    pub attention_reduction: usize,
    pub conv_padding: ConvPadding,
    pub seed: u64,
}

/// Channel width of the paper-scale preset, chosen so the parameter count lands
/// near 8.89M.
pub const PAPER_SCALE_CHANNELS: usize = 104;

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_channels: 32,
            num_blocks: 10,
            scale: 4,
            attention_enabled: true,
            hidden_state_enabled: true,
            mutual_exchange_enabled: true,
            cyclic_enabled: false,
            channel_attention_sigmoid: true,
            attention_reduction: 16,
            conv_padding: ConvPadding::Zero,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Laptop-sized network: 32 channels, ten dual-duct blocks.
    pub fn desk() -> Self {
        Self::default()
    }

    pub fn paper_scale() -> Self {
        ModelConfig {
            base_channels: PAPER_SCALE_CHANNELS,
            ..Self::default()
        }
    }

    pub fn tiny(channels: usize, num_blocks: usize) -> Self {
        ModelConfig {
            base_channels: channels,
            num_blocks,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(S3poError::invalid("base_channels must be positive"));
        }
        if self.num_blocks == 0 {
            return Err(S3poError::invalid("num_blocks must be at least 1"));
        }
        if self.scale == 0 {
            return Err(S3poError::invalid("scale must be at least 1"));
        }
        if self.attention_reduction == 0 {
            return Err(S3poError::invalid("attention_reduction must be positive"));
        }
        Ok(())
    }

    pub fn attention_hidden(&self) -> usize {
        (self.base_channels / self.attention_reduction).max(1)
    }

    /// Depth of the global-fusion input: frame, hidden state, unshuffled HR.
    pub fn fusion_depth(&self) -> usize {
        3 + self.base_channels + 3 * self.scale * self.scale
    }
}

/// Index of a parameter array inside a [`ParameterSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// A 3×3 convolution: weight `[3, 3, in, out]` and bias `[out]`.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
}

/// `R(x) = conv2(relu(conv1(x)))`.
#[derive(Clone, Copy, Debug)]
pub struct Residual {
    pub conv1: Conv,
    pub conv2: Conv,
}

/// Parameters of one dual-duct block.
#[derive(Clone, Copy, Debug)]
pub struct DualDuct {
    /// Local duct refining itself.
    pub local_self: Residual,
    /// Global features injected into the local duct.
    pub local_cross: Residual,
    pub global_self: Residual,
    /// Local features injected into the global duct.
    pub global_cross: Residual,
}

/// Where every layer's parameters live. Derived from a [`ModelConfig`] alone.
#[derive(Clone, Debug)]
pub struct Layers {
    pub joint: [Conv; 3],
    pub correlate: Conv,
    pub local: [Conv; 2],
    pub spatial_attention: Conv,
    pub channel_reduce: Conv,
    pub channel_expand: Conv,
    pub fuse: Conv,
    pub blocks: Vec<DualDuct>,
    pub hidden_local: Conv,
    pub hidden_global: Conv,
    pub head_local: Conv,
    pub head_global: Conv,
    pub duct_local: Conv,
    pub duct_global: Conv,
    pub merge: [Conv; 2],
}

struct LayoutBuilder {
    entries: Vec<(String, Vec<usize>)>,
}

impl LayoutBuilder {
    fn conv(&mut self, name: &str, cin: usize, cout: usize) -> Conv {
        let weight = ParamId(self.entries.len());
        self.entries.push((format!("{name}.weight"), vec![3, 3, cin, cout]));
        let bias = ParamId(self.entries.len());
        self.entries.push((format!("{name}.bias"), vec![cout]));
        Conv {
            weight,
            bias,
            in_channels: cin,
            out_channels: cout,
        }
    }

    fn residual(&mut self, name: &str, c: usize) -> Residual {
        Residual {
            conv1: self.conv(&format!("{name}.conv1"), c, c),
            conv2: self.conv(&format!("{name}.conv2"), c, c),
        }
    }
}

/// Builds the layer table and the ordered `(name, shape)` list of a config.
pub fn layout(cfg: &ModelConfig) -> (Layers, Vec<(String, Vec<usize>)>) {
    let c = cfg.base_channels;
    let s2 = cfg.scale * cfg.scale;
    let mut b = LayoutBuilder { entries: Vec::new() };
    let joint = [
        b.conv("extract.joint_prev", 3, c),
        b.conv("extract.joint_curr", 3, c),
        b.conv("extract.joint_next", 3, c),
    ];
    let correlate = b.conv("extract.correlate", 3, c);
    let local = [
        b.conv("extract.local1", 2 * c, c),
        b.conv("extract.local2", 2 * c, c),
    ];
    let spatial_attention = b.conv("attention.spatial", 2, 1);
    let hidden = cfg.attention_hidden();
    let channel_reduce = b.conv("attention.channel_reduce", c, hidden);
    let channel_expand = b.conv("attention.channel_expand", hidden, c);
    let fuse = b.conv("fuse", cfg.fusion_depth(), c);
    let blocks = (0..cfg.num_blocks)
        .map(|k| DualDuct {
            local_self: b.residual(&format!("refine.block{k:02}.local_self"), c),
            local_cross: b.residual(&format!("refine.block{k:02}.local_cross"), c),
            global_self: b.residual(&format!("refine.block{k:02}.global_self"), c),
            global_cross: b.residual(&format!("refine.block{k:02}.global_cross"), c),
        })
        .collect();
    let hidden_local = b.conv("head.hidden_local", c, c);
    let hidden_global = b.conv("head.hidden_global", c, c);
    let head_local = b.conv("head.local", c, c);
    let head_global = b.conv("head.global", c, c);
    let duct_local = b.conv("reconstruct.duct_local", c, 3 * s2);
    let duct_global = b.conv("reconstruct.duct_global", c, 3 * s2);
    let merge = [
        b.conv("reconstruct.merge1", 6, c),
        b.conv("reconstruct.merge2", c, 3),
    ];
    let layers = Layers {
        joint,
        correlate,
        local,
        spatial_attention,
        channel_reduce,
        channel_expand,
        fuse,
        blocks,
        hidden_local,
        hidden_global,
        head_local,
        head_global,
        duct_local,
        duct_global,
        merge,
    };
    (layers, b.entries)
}

/// A named real array.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Every convolution kernel and bias, in a fixed order with unique names.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet {
    arrays: Vec<ParamArray>,
    by_name: BTreeMap<String, usize>,
}

impl ParameterSet {
    pub fn from_arrays(arrays: Vec<ParamArray>) -> Result<Self> {
        let mut by_name = BTreeMap::new();
        for (i, a) in arrays.iter().enumerate() {
            let expected: usize = a.shape.iter().product();
            if expected != a.values.len() {
                return Err(S3poError::shape(format!(
                    "`{}` has shape {:?} but {} values",
                    a.name,
                    a.shape,
                    a.values.len()
                )));
            }
            if by_name.insert(a.name.clone(), i).is_some() {
                return Err(S3poError::invalid(format!("duplicate parameter `{}`", a.name)));
            }
        }
        Ok(ParameterSet { arrays, by_name })
    }

    /// All-zero parameters for `cfg`.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (_, entries) = layout(cfg);
        let arrays = entries
            .into_iter()
            .map(|(name, shape)| {
                let n = shape.iter().product();
                ParamArray {
                    name,
                    shape,
                    values: vec![0.0; n],
                }
            })
            .collect();
        Self::from_arrays(arrays).expect("layout names are unique")
    }

    /// Fan-in scaled uniform initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    /// for weights and biases alike, seeded by `cfg.seed`. Values are rounded
    /// to single precision so they survive a checkpoint round trip unchanged.
    pub fn init(cfg: &ModelConfig) -> Self {
        let mut set = Self::zeros(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut fan_in = 1;
        for a in &mut set.arrays {
            if a.shape.len() == 4 {
                fan_in = a.shape[0] * a.shape[1] * a.shape[2];
            }
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in &mut a.values {
                *v = ((rng.gen::<f64>() * 2.0 - 1.0) * bound) as f32 as f64;
            }
        }
        set
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn arrays(&self) -> &[ParamArray] {
        &self.arrays
    }

    pub fn arrays_mut(&mut self) -> &mut [ParamArray] {
        &mut self.arrays
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.arrays[id.0].values
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.arrays[id.0].values
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&ParamArray> {
        self.id(name).map(|id| &self.arrays[id.0])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut ParamArray> {
        self.id(name).map(move |id| &mut self.arrays[id.0])
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.arrays.iter().map(|a| a.values.len()).sum()
    }

    /// Zeroes every array whose name starts with one of `prefixes`.
    pub fn zero_prefixed(&mut self, prefixes: &[&str]) {
        for a in &mut self.arrays {
            if prefixes.iter().any(|p| a.name.starts_with(p)) {
                a.values.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    /// Rounds every value to the nearest single-precision float.
    pub fn quantize_f32(&mut self) {
        for a in &mut self.arrays {
            a.values.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    /// Checks that names, order and shapes match the layout of `cfg`, listing
    /// every offending array.
    pub fn check_layout(&self, cfg: &ModelConfig) -> Result<()> {
        let (_, entries) = layout(cfg);
        let mut problems = Vec::new();
        for (name, shape) in &entries {
            match self.by_name(name) {
                None => problems.push(format!("{name} (missing)")),
                Some(a) if &a.shape != shape => {
                    problems.push(format!("{name} (expected {shape:?}, found {:?})", a.shape))
                }
                Some(_) => {}
            }
        }
        for a in &self.arrays {
            if !entries.iter().any(|(n, _)| n == &a.name) {
                problems.push(format!("{} (unexpected)", a.name));
            }
        }
        if !problems.is_empty() {
            return Err(S3poError::shape(format!(
                "parameters do not fit the model configuration: {}",
                problems.join(", ")
            )));
        }
        if self
            .arrays
            .iter()
            .zip(&entries)
            .any(|(a, (name, _))| &a.name != name)
        {
            return Err(S3poError::shape("parameter arrays are out of layout order"));
        }
        Ok(())
    }
}

/// Closed-form parameter count of a configuration, computed layer by layer
/// from the architecture rather than from a built [`ParameterSet`].
pub fn closed_form_count(cfg: &ModelConfig) -> usize {
    let c = cfg.base_channels;
    let s2 = cfg.scale * cfg.scale;
    let conv = |cin: usize, cout: usize| 9 * cin * cout + cout;
    let extractor = 3 * conv(3, c) + conv(3, c) + 2 * conv(2 * c, c);
    let attention = conv(2, 1) + conv(c, cfg.attention_hidden()) + conv(cfg.attention_hidden(), c);
    let fusion = conv(cfg.fusion_depth(), c);
    let refinement = cfg.num_blocks * 8 * conv(c, c);
    let heads = 4 * conv(c, c);
    let reconstruction = 2 * conv(c, 3 * s2) + conv(6, c) + conv(c, 3);
    extractor + attention + fusion + refinement + heads + reconstruction
}
