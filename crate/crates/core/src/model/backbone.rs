//! Residual backbones with configurable freezing.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{maxpool_backward, maxpool_forward, Conv2d, ConvBn, Param};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Basic,
    Bottleneck,
}

impl BlockKind {
    pub fn expansion(self) -> usize {
        match self {
            BlockKind::Basic => 1,
            BlockKind::Bottleneck => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub maxpool: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    /// Inner width; the stage outputs `width · expansion` channels.
    pub width: usize,
    pub blocks: usize,
    pub stride: usize,
}

/// Residual network descriptor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneArch {
    pub name: String,
    pub block: BlockKind,
    pub stem: StemSpec,
    pub stages: [StageSpec; 4],
}

impl BackboneArch {
    /// The 50-layer bottleneck network (3, 4, 6, 3 blocks).
    pub fn resnet50() -> Self {
        Self::standard("resnet50", BlockKind::Bottleneck, [3, 4, 6, 3])
    }

    pub fn resnet18() -> Self {
        Self::standard("resnet18", BlockKind::Basic, [2, 2, 2, 2])
    }

    fn standard(name: &str, block: BlockKind, blocks: [usize; 4]) -> Self {
        let widths = [64, 128, 256, 512];
        let strides = [1, 2, 2, 2];
        BackboneArch {
            name: name.into(),
            block,
            stem: StemSpec {
                channels: 64,
                kernel: 7,
                stride: 2,
                maxpool: true,
            },
            stages: std::array::from_fn(|i| StageSpec {
                width: widths[i],
                blocks: blocks[i],
                stride: strides[i],
            }),
        }
    }

    /// Reduced-depth network for desk-scale experiments: one basic block per
    /// stage, total stride 8.
    pub fn tiny() -> Self {
        let widths = [12, 24, 32, 32];
        let strides = [2, 2, 1, 1];
        BackboneArch {
            name: "tiny".into(),
            block: BlockKind::Basic,
            stem: StemSpec {
                channels: 12,
                kernel: 3,
                stride: 2,
                maxpool: false,
            },
            stages: std::array::from_fn(|i| StageSpec {
                width: widths[i],
                blocks: 1,
                stride: strides[i],
            }),
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "resnet50" => Some(Self::resnet50()),
            "resnet18" => Some(Self::resnet18()),
            "tiny" => Some(Self::tiny()),
            _ => None,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.stages[3].width * self.block.expansion()
    }

    pub fn total_stride(&self) -> usize {
        let mut s = self.stem.stride * if self.stem.maxpool { 2 } else { 1 };
        for st in &self.stages {
            s *= st.stride;
        }
        s
    }

    /// Feature map side for a square input.
    pub fn feature_size(&self, input: usize) -> usize {
        let conv = |n: usize, k: usize, s: usize, p: usize| (n + 2 * p - k) / s + 1;
        let mut n = conv(input, self.stem.kernel, self.stem.stride, self.stem.kernel / 2);
        if self.stem.maxpool {
            n = conv(n, 3, 2, 1);
        }
        for st in &self.stages {
            n = conv(n, 3, st.stride, 1);
        }
        n
    }
}

/// How much of the backbone is held fixed during fine-tuning, counted in
/// units: the stem, then each of the four stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FreezeLevel {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "stem")]
    Stem,
    #[serde(rename = "stem+block1")]
    StemBlock1,
    #[serde(rename = "stem+block2")]
    StemBlock2,
    #[serde(rename = "stem+block3")]
    StemBlock3,
    #[serde(rename = "all_backbone")]
    AllBackbone,
}

impl FreezeLevel {
    pub const ALL: [FreezeLevel; 6] = [
        FreezeLevel::None,
        FreezeLevel::Stem,
        FreezeLevel::StemBlock1,
        FreezeLevel::StemBlock2,
        FreezeLevel::StemBlock3,
        FreezeLevel::AllBackbone,
    ];

    /// Number of leading backbone units that are frozen.
    pub fn frozen_units(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FreezeLevel::None => "none",
            FreezeLevel::Stem => "stem",
            FreezeLevel::StemBlock1 => "stem+block1",
            FreezeLevel::StemBlock2 => "stem+block2",
            FreezeLevel::StemBlock3 => "stem+block3",
            FreezeLevel::AllBackbone => "all_backbone",
        }
    }
}

impl fmt::Display for FreezeLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FreezeLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FreezeLevel::ALL
            .into_iter()
            .find(|l| l.as_str() == s.trim())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown freeze level {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub main: Vec<ConvBn>,
    pub shortcut: Option<ConvBn>,
    out: Option<Tensor>,
}

impl ResidualBlock {
    fn new(kind: BlockKind, in_c: usize, width: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let out_c = width * kind.expansion();
        let main = match kind {
            BlockKind::Basic => vec![
                ConvBn::new(Conv2d::new(in_c, width, 3, stride, 1, rng), true),
                ConvBn::new(Conv2d::new(width, width, 3, 1, 1, rng), false),
            ],
            BlockKind::Bottleneck => vec![
                ConvBn::new(Conv2d::new(in_c, width, 1, 1, 0, rng), true),
                ConvBn::new(Conv2d::new(width, width, 3, stride, 1, rng), true),
                ConvBn::new(Conv2d::new(width, out_c, 1, 1, 0, rng), false),
            ],
        };
        let shortcut =
            (stride != 1 || in_c != out_c).then(|| ConvBn::new(Conv2d::new(in_c, out_c, 1, stride, 0, rng), false));
        ResidualBlock {
            main,
            shortcut,
            out: None,
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let mut y = self.main.iter().fold(x.clone(), |h, u| u.forward(&h));
        match &self.shortcut {
            Some(s) => y.add_assign(&s.forward(x)),
            None => y.add_assign(x),
        }
        y.data.iter_mut().for_each(|v| *v = v.max(0.0));
        y
    }

    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let mut h = x.clone();
        for u in &mut self.main {
            h = u.forward_train(&h);
        }
        match &mut self.shortcut {
            Some(s) => h.add_assign(&s.forward_train(x)),
            None => h.add_assign(x),
        }
        h.data.iter_mut().for_each(|v| *v = v.max(0.0));
        self.out = Some(h.clone());
        h
    }

    fn backward(&mut self, mut dy: Tensor, need_dx: bool) -> Option<Tensor> {
        let out = self.out.take().expect("backward after forward_train");
        for (d, &o) in dy.data.iter_mut().zip(&out.data) {
            if o <= 0.0 {
                *d = 0.0;
            }
        }
        let mut dmain = dy.clone();
        for i in (0..self.main.len()).rev() {
            match self.main[i].backward(dmain, i > 0 || need_dx) {
                Some(d) => dmain = d,
                None => {
                    if let Some(s) = &mut self.shortcut {
                        s.backward(dy, false);
                    }
                    return None;
                }
            }
        }
        let dskip = match &mut self.shortcut {
            Some(s) => s.backward(dy, need_dx),
            None => Some(dy),
        };
        if !need_dx {
            return None;
        }
        let mut dx = dmain;
        dx.add_assign(&dskip.expect("shortcut gradient"));
        Some(dx)
    }

    fn units(&self) -> impl Iterator<Item = &ConvBn> {
        self.main.iter().chain(self.shortcut.iter())
    }

    fn units_mut(&mut self) -> impl Iterator<Item = &mut ConvBn> {
        self.main.iter_mut().chain(self.shortcut.iter_mut())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stem {
    pub conv: ConvBn,
    pub maxpool: bool,
    pool_cache: Option<([usize; 4], Vec<u32>)>,
}

/// A freezable unit: the stem or one stage of residual blocks.
#[derive(Debug, Clone, PartialEq)]
pub enum Unit {
    Stem(Stem),
    Stage(Vec<ResidualBlock>),
}

impl Unit {
    fn forward(&self, x: &Tensor) -> Tensor {
        match self {
            Unit::Stem(s) => {
                let y = s.conv.forward(x);
                if s.maxpool {
                    maxpool_forward(&y).0
                } else {
                    y
                }
            }
            Unit::Stage(blocks) => blocks.iter().fold(x.clone(), |h, b| b.forward(&h)),
        }
    }

    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        match self {
            Unit::Stem(s) => {
                let y = s.conv.forward_train(x);
                if s.maxpool {
                    let (p, arg) = maxpool_forward(&y);
                    s.pool_cache = Some((y.shape(), arg));
                    p
                } else {
                    y
                }
            }
            Unit::Stage(blocks) => {
                let mut h = x.clone();
                for b in blocks.iter_mut() {
                    h = b.forward_train(&h);
                }
                h
            }
        }
    }

    fn backward(&mut self, dy: Tensor, need_dx: bool) -> Option<Tensor> {
        match self {
            Unit::Stem(s) => {
                let dy = match s.pool_cache.take() {
                    Some((shape, arg)) => maxpool_backward(shape, &arg, &dy),
                    None => dy,
                };
                s.conv.backward(dy, need_dx)
            }
            Unit::Stage(blocks) => {
                let mut d = dy;
                let n = blocks.len();
                for (i, b) in blocks.iter_mut().enumerate().rev() {
                    match b.backward(d, i > 0 || need_dx) {
                        Some(next) => d = next,
                        None => {
                            debug_assert!(i == 0 || n == 0);
                            return None;
                        }
                    }
                }
                Some(d)
            }
        }
    }

    pub fn conv_units(&self) -> Vec<&ConvBn> {
        match self {
            Unit::Stem(s) => vec![&s.conv],
            Unit::Stage(blocks) => blocks.iter().flat_map(|b| b.units()).collect(),
        }
    }

    pub fn conv_units_mut(&mut self) -> Vec<&mut ConvBn> {
        match self {
            Unit::Stem(s) => vec![&mut s.conv],
            Unit::Stage(blocks) => blocks.iter_mut().flat_map(|b| b.units_mut()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub arch: BackboneArch,
    /// Unit 0 is the stem, units 1 to 4 the residual stages.
    pub units: Vec<Unit>,
}

impl Backbone {
    /// Randomly initialized backbone.
    pub fn new(arch: &BackboneArch, rng: &mut impl Rng) -> Self {
        let st = &arch.stem;
        let mut units = vec![Unit::Stem(Stem {
            conv: ConvBn::new(Conv2d::new(3, st.channels, st.kernel, st.stride, st.kernel / 2, rng), true),
            maxpool: st.maxpool,
            pool_cache: None,
        })];
        let mut in_c = st.channels;
        for spec in &arch.stages {
            let mut blocks = Vec::with_capacity(spec.blocks);
            for b in 0..spec.blocks {
                let stride = if b == 0 { spec.stride } else { 1 };
                blocks.push(ResidualBlock::new(arch.block, in_c, spec.width, stride, rng));
                in_c = spec.width * arch.block.expansion();
            }
            units.push(Unit::Stage(blocks));
        }
        Backbone {
            arch: arch.clone(),
            units,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        self.units.iter().fold(x.clone(), |h, u| u.forward(&h))
    }

    /// Forward pass where the first `frozen` units run in inference mode and
    /// the rest cache activations for [`Backbone::backward`].
    pub fn forward_train(&mut self, x: &Tensor, frozen: usize) -> Tensor {
        let mut h = x.clone();
        for (i, u) in self.units.iter_mut().enumerate() {
            h = if i < frozen { u.forward(&h) } else { u.forward_train(&h) };
        }
        h
    }

    /// Runs only the frozen prefix.
    pub fn forward_frozen(&self, x: &Tensor, frozen: usize) -> Tensor {
        self.units[..frozen].iter().fold(x.clone(), |h, u| u.forward(&h))
    }

    /// Runs the trainable suffix in training mode on frozen-prefix output.
    pub fn forward_train_from(&mut self, h: &Tensor, frozen: usize) -> Tensor {
        let mut h = h.clone();
        for u in &mut self.units[frozen..] {
            h = u.forward_train(&h);
        }
        h
    }

    /// Accumulates gradients for the trainable units; frozen units get no
    /// backward pass at all.
    pub fn backward(&mut self, dy: Tensor, frozen: usize) {
        let mut d = dy;
        for i in (frozen..self.units.len()).rev() {
            match self.units[i].backward(d, i > frozen) {
                Some(next) => d = next,
                None => break,
            }
        }
    }

    pub fn trainable_params(&mut self, frozen: usize) -> Vec<&mut Param> {
        self.units[frozen..]
            .iter_mut()
            .flat_map(|u| u.conv_units_mut())
            .flat_map(|c| c.params_mut())
            .collect()
    }

    pub fn conv_units(&self) -> Vec<&ConvBn> {
        self.units.iter().flat_map(|u| u.conv_units()).collect()
    }

    pub fn weights(&self) -> BackboneWeights {
        BackboneWeights {
            arch: self.arch.clone(),
            arrays: self
                .conv_units()
                .into_iter()
                .flat_map(|c| c.arrays().map(|a| a.clone()))
                .collect(),
        }
    }

    /// Builds a backbone from stored weights, checking every array length
    /// against the architecture.
    pub fn from_weights(weights: &BackboneWeights) -> Result<Self> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut bb = Backbone::new(&weights.arch, &mut rng);
        bb.load(weights)?;
        Ok(bb)
    }

    pub fn load(&mut self, weights: &BackboneWeights) -> Result<()> {
        if weights.arch != self.arch {
            return Err(Error::WeightMismatch(format!(
                "weights are for {} but the model is {}",
                weights.arch.name, self.arch.name
            )));
        }
        let mut slots: Vec<&mut Vec<f32>> = self
            .units
            .iter_mut()
            .flat_map(|u| u.conv_units_mut())
            .flat_map(|c| c.arrays_mut())
            .collect();
        if slots.len() != weights.arrays.len() {
            return Err(Error::WeightMismatch(format!(
                "expected {} arrays, found {}",
                slots.len(),
                weights.arrays.len()
            )));
        }
        for (i, (slot, src)) in slots.iter().zip(&weights.arrays).enumerate() {
            if slot.len() != src.len() {
                return Err(Error::WeightMismatch(format!(
                    "array {i} has {} values, expected {}",
                    src.len(),
                    slot.len()
                )));
            }
        }
        for (slot, src) in slots.iter_mut().zip(&weights.arrays) {
            slot.copy_from_slice(src);
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        self.conv_units().iter().map(|c| c.conv.weight.value.len() + 2 * c.bn.channels()).sum()
    }
}

/// Every backbone array (conv weight, BN scale, shift, running mean and
/// variance per conv unit, in traversal order).
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneWeights {
    pub arch: BackboneArch,
    pub arrays: Vec<Vec<f32>>,
}

const BACKBONE_MAGIC: &[u8] = b"iconoforge-backbone-v1\n";

impl BackboneWeights {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.arch).expect("architecture serializes");
        let mut out = BACKBONE_MAGIC.to_vec();
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.arrays.len() as u64).to_le_bytes());
        for a in &self.arrays {
            out.extend_from_slice(&(a.len() as u64).to_le_bytes());
            for v in a {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::WeightMismatch(m.to_string());
        let rest = bytes.strip_prefix(BACKBONE_MAGIC).ok_or_else(|| bad("not a backbone weight file"))?;
        let mut r = super::checkpoint::Reader::new(rest);
        let header = r.chunk().map_err(|_| bad("truncated header"))?;
        let arch: BackboneArch = serde_json::from_slice(header)?;
        let n = r.u64().map_err(|_| bad("truncated array count"))? as usize;
        let mut arrays = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            arrays.push(r.f32_array().map_err(|_| bad("truncated array"))?);
        }
        if !r.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(BackboneWeights { arch, arrays })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
