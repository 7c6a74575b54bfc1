//! Translation generator.
//!
//! `3x3 conv -> f_s` at full resolution, two stride-2 encoder stages down to
//! `f_e` at quarter resolution, a stack of residual blocks, then two decoder
//! stages. Each decoder stage upsamples (nearest + 3x3 conv), gates the
//! matching encoder feature through [`Ammfi`], concatenates, and fuses with
//! a 3x3 conv. A final 3x3 conv and `tanh` produce the image, mapped to
//! `[0, 1]`.

pub mod attention;
pub mod embed;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{bilinear_resize, upsample_nearest, BatchNorm, Conv2d, InstanceNorm, NormMode};
use crate::nn::params::{ParamBuilder, ParamStore};
use crate::tile::{ImageTile, StainDomain};

pub use attention::{Ammfi, AmmfiConfig, AmmfiTrace, ChannelAttention, SpatialAttention};
pub use embed::{EmbeddingConfig, LayerPatches, PatchEmbeddingSet, PatchHead};

/// Real-valued `(N, C, H, W)` activation tagged with its downsampling power
/// relative to the input (`scale = 2` means quarter resolution).
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub data: Tensor,
    pub scale: u32,
}

impl FeatureMap {
    pub fn new(data: Tensor, scale: u32) -> Result<Self> {
        data.dims4()?;
        Ok(Self { data, scale })
    }

    pub fn channels(&self) -> usize {
        self.data.dims()[1]
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.data.dims()[2], self.data.dims()[3])
    }

    /// `(C, H, W)` of the first batch item.
    pub fn shape_chw(&self) -> (usize, usize, usize) {
        let d = self.data.dims();
        (d[1], d[2], d[3])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub base_channels: usize,
    pub n_resblocks: usize,
    /// Junctions carrying AMMFI: `1` = full-resolution skip (`f_s`),
    /// `2` = half-resolution skip (first encoder stage). Empty disables
    /// attention; the skip is then concatenated as is.
    pub ammfi_levels: Vec<u8>,
    pub ammfi: AmmfiConfig,
    pub embedding: EmbeddingConfig,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            base_channels: 64,
            n_resblocks: 6,
            ammfi_levels: vec![1, 2],
            ammfi: AmmfiConfig::default(),
            embedding: EmbeddingConfig::default(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 2 || self.base_channels % 2 != 0 {
            return Err(Error::Config(format!(
                "base_channels {} must be even and >= 2",
                self.base_channels
            )));
        }
        if self.n_resblocks == 0 {
            return Err(Error::Config("n_resblocks must be >= 1".into()));
        }
        if self.ammfi_levels.iter().any(|l| !matches!(l, 1 | 2)) {
            return Err(Error::Config(format!("ammfi_levels {:?} must be a subset of {{1, 2}}", self.ammfi_levels)));
        }
        self.embedding.validate()
    }

    pub fn uses_attention(&self) -> bool {
        !self.ammfi_levels.is_empty()
    }

    /// Channel counts of the four instrumented encoder layers
    /// (shallow conv, encoder stage 1, encoder stage 2, residual block).
    pub fn layer_channels(&self) -> [usize; 4] {
        let b = self.base_channels;
        [b, 2 * b, 4 * b, 4 * b]
    }
}

#[derive(Debug, Clone)]
struct ConvNormRelu {
    conv: Conv2d,
    norm: InstanceNorm,
}

impl ConvNormRelu {
    fn new(pb: &mut ParamBuilder<'_>, in_ch: usize, out_ch: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&mut pb.pp("conv"), in_ch, out_ch, 3, stride, 1, true)?,
            norm: InstanceNorm::new(&mut pb.pp("norm"), out_ch)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.norm.forward(&self.conv.forward(x)?)?.relu()?)
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv2d,
    norm1: InstanceNorm,
    conv2: Conv2d,
    norm2: InstanceNorm,
}

impl ResBlock {
    fn new(pb: &mut ParamBuilder<'_>, ch: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(&mut pb.pp("conv1"), ch, ch, 3, 1, 1, true)?,
            norm1: InstanceNorm::new(&mut pb.pp("norm1"), ch)?,
            conv2: Conv2d::new(&mut pb.pp("conv2"), ch, ch, 3, 1, 1, true)?,
            norm2: InstanceNorm::new(&mut pb.pp("norm2"), ch)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.norm1.forward(&self.conv1.forward(x)?)?.relu()?;
        let h = self.norm2.forward(&self.conv2.forward(&h)?)?;
        Ok((x + h)?)
    }
}

/// One decoder stage: upsample, gate the encoder skip, fuse.
#[derive(Debug, Clone)]
struct DecoderStage {
    up: ConvNormRelu,
    ammfi: Option<Ammfi>,
    fuse: Conv2d,
    fuse_norm: BatchNorm,
}

impl DecoderStage {
    fn new(
        pb: &mut ParamBuilder<'_>,
        coarse_ch: usize,
        skip_ch: usize,
        attention: Option<AmmfiConfig>,
    ) -> Result<Self> {
        let ammfi = match attention {
            Some(cfg) => Some(Ammfi::new(&mut pb.pp("ammfi"), skip_ch, coarse_ch, cfg)?),
            None => None,
        };
        Ok(Self {
            up: ConvNormRelu::new(&mut pb.pp("up"), coarse_ch, skip_ch, 1)?,
            ammfi,
            fuse: Conv2d::new(&mut pb.pp("fuse"), 2 * skip_ch, skip_ch, 3, 1, 1, true)?,
            fuse_norm: BatchNorm::new(&mut pb.pp("fuse_norm"), skip_ch)?,
        })
    }

    fn forward(&self, coarse: &Tensor, skip: &Tensor) -> Result<(Tensor, Option<Tensor>)> {
        let up = self.up.forward(&upsample_nearest(coarse, 2)?)?;
        let (gated, mask) = match &self.ammfi {
            Some(ammfi) => {
                let (_, _, h, w) = skip.dims4()?;
                let gating = bilinear_resize(coarse, h, w)?;
                let trace = ammfi.forward_trace(skip, &gating)?;
                (trace.output, Some(trace.mask))
            }
            None => (skip.clone(), None),
        };
        let merged = Tensor::cat(&[&gated, &up], 1)?;
        // batch statistics in every mode: the generator has no train/eval split
        let fused = self.fuse_norm.forward(&self.fuse.forward(&merged)?, NormMode::Train)?.relu()?;
        Ok((fused, mask))
    }
}

/// Every intermediate of one generator forward pass.
#[derive(Debug, Clone)]
pub struct GeneratorTrace {
    /// Shallow features `f_s`, full resolution.
    pub shallow: FeatureMap,
    /// First encoder stage, half resolution.
    pub enc1: FeatureMap,
    /// Deep features `f_e`, quarter resolution.
    pub deep: FeatureMap,
    /// Residual stack outputs, in order.
    pub resblocks: Vec<FeatureMap>,
    /// Decoder stage outputs (half, then full resolution).
    pub decoder: Vec<FeatureMap>,
    /// AMMFI masks per decoder stage (`None` where attention is off).
    pub masks: Vec<Option<Tensor>>,
    /// Output image in `[0, 1]`, `(N, 3, H, W)`.
    pub output: Tensor,
}

#[derive(Debug, Clone)]
pub struct Generator {
    config: GeneratorConfig,
    store: ParamStore,
    shallow: ConvNormRelu,
    enc1: ConvNormRelu,
    enc2: ConvNormRelu,
    resblocks: Vec<ResBlock>,
    dec_half: DecoderStage,
    dec_full: DecoderStage,
    out: Conv2d,
    heads: Vec<PatchHead>,
}

impl Generator {
    pub fn new(config: GeneratorConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(seed, dtype, device.clone());
        let b = config.base_channels;
        let att = |level: u8| config.ammfi_levels.contains(&level).then_some(config.ammfi);
        let mut root = store.root();
        let mut g = root.pp("gen");
        let shallow = ConvNormRelu::new(&mut g.pp("shallow"), 3, b, 1)?;
        let enc1 = ConvNormRelu::new(&mut g.pp("enc1"), b, 2 * b, 2)?;
        let enc2 = ConvNormRelu::new(&mut g.pp("enc2"), 2 * b, 4 * b, 2)?;
        let resblocks = (0..config.n_resblocks)
            .map(|i| ResBlock::new(&mut g.pp(&format!("res{i}")), 4 * b))
            .collect::<Result<Vec<_>>>()?;
        let dec_half = DecoderStage::new(&mut g.pp("dec_half"), 4 * b, 2 * b, att(2))?;
        let dec_full = DecoderStage::new(&mut g.pp("dec_full"), 2 * b, b, att(1))?;
        let out = Conv2d::new(&mut g.pp("out"), b, 3, 3, 1, 1, true)?;
        let mut h = root.pp("nce_head");
        let heads = config
            .layer_channels()
            .iter()
            .enumerate()
            .map(|(i, c)| PatchHead::new(&mut h.pp(&format!("l{i}")), *c, config.embedding.head_dim))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            store,
            shallow,
            enc1,
            enc2,
            resblocks,
            dec_half,
            dec_full,
            out,
            heads,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Number of AMMFI modules actually instantiated.
    pub fn ammfi_count(&self) -> usize {
        [&self.dec_half, &self.dec_full].iter().filter(|d| d.ammfi.is_some()).count()
    }

    /// AMMFI of the half-resolution (`level = 2`) or full-resolution (`level = 1`) junction.
    pub fn ammfi(&self, level: u8) -> Option<&Ammfi> {
        match level {
            2 => self.dec_half.ammfi.as_ref(),
            1 => self.dec_full.ammfi.as_ref(),
            _ => None,
        }
    }

    fn check_input(x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("generator expects 3 input channels, got {c}")));
        }
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("generator input {h}x{w} must be divisible by 4")));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_trace(x)?.output)
    }

    pub fn forward_trace(&self, x: &Tensor) -> Result<GeneratorTrace> {
        Self::check_input(x)?;
        let shallow = self.shallow.forward(x)?;
        let enc1 = self.enc1.forward(&shallow)?;
        let deep = self.enc2.forward(&enc1)?;
        let mut h = deep.clone();
        let mut res = Vec::with_capacity(self.resblocks.len());
        for block in &self.resblocks {
            h = block.forward(&h)?;
            res.push(FeatureMap { data: h.clone(), scale: 2 });
        }
        let (d_half, m_half) = self.dec_half.forward(&h, &enc1)?;
        let (d_full, m_full) = self.dec_full.forward(&d_half, &shallow)?;
        let output = self.out.forward(&d_full)?.tanh()?.affine(0.5, 0.5)?;
        Ok(GeneratorTrace {
            shallow: FeatureMap { data: shallow, scale: 0 },
            enc1: FeatureMap { data: enc1, scale: 1 },
            deep: FeatureMap { data: deep, scale: 2 },
            resblocks: res,
            decoder: vec![
                FeatureMap { data: d_half, scale: 1 },
                FeatureMap { data: d_full, scale: 0 },
            ],
            masks: vec![m_half, m_full],
            output,
        })
    }

    /// Encoder activations for the instrumented layer ids
    /// (0 = shallow, 1 = encoder stage 1, 2 = encoder stage 2,
    /// 3 = third residual block, or the last one when fewer exist).
    /// Stops as soon as the deepest requested layer is reached.
    pub fn encode_layers(&self, x: &Tensor, layers: &[usize]) -> Result<Vec<Tensor>> {
        Self::check_input(x)?;
        let deepest = layers.iter().copied().max().unwrap_or(0);
        if deepest > 3 {
            return Err(Error::Config(format!("encoder layer id {deepest} is not instrumented")));
        }
        let mut acts: Vec<Tensor> = Vec::with_capacity(4);
        acts.push(self.shallow.forward(x)?);
        if deepest >= 1 {
            acts.push(self.enc1.forward(&acts[0])?);
        }
        if deepest >= 2 {
            acts.push(self.enc2.forward(&acts[1])?);
        }
        if deepest >= 3 {
            let upto = self.resblocks.len().min(3);
            let mut h = acts[2].clone();
            for block in &self.resblocks[..upto] {
                h = block.forward(&h)?;
            }
            acts.push(h);
        }
        Ok(layers.iter().map(|l| acts[*l].clone()).collect())
    }

    pub(crate) fn heads(&self) -> &[PatchHead] {
        &self.heads
    }

    /// Translates one H&E tile to a synthetic IHC tile, without recording
    /// a backward graph.
    pub fn translate(&self, tile: &ImageTile) -> Result<ImageTile> {
        let _guard = crate::nn::no_grad();
        let x = tile.to_tensor(self.store.dtype(), self.store.device())?;
        let y = self.forward(&x)?;
        ImageTile::from_tensor(&y, StainDomain::Ihc, tile.source_id())
    }
}
