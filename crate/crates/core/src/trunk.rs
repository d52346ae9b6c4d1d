//! Frozen task-agnostic feature extractor and the spatial feature map type.
//!
//! The trunk is a stack of stride-2 `3x3` convolutions with ReLU, initialised
//! from a seed and never trained. Externally computed feature maps can be
//! loaded from FKT files instead.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Graph, ParameterStore, Tensor};

const FKT_MAGIC: &[u8; 4] = b"FKT1";
const FKT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrunkConfig {
    pub in_channels: usize,
    /// Output width of each stride-2 block.
    pub widths: Vec<usize>,
    pub downsample: usize,
    pub seed: u64,
}

impl Default for TrunkConfig {
    fn default() -> Self {
        TrunkConfig {
            in_channels: 3,
            widths: vec![16, 32, 64, 64],
            downsample: 16,
            seed: 0,
        }
    }
}

impl TrunkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config("trunk channel counts must be positive".into()));
        }
        let product = 1usize
            .checked_shl(self.widths.len() as u32)
            .ok_or_else(|| Error::Config("too many trunk blocks".into()))?;
        if product != self.downsample {
            return Err(Error::Config(format!(
                "{} stride-2 blocks downsample by {product}, not {}",
                self.widths.len(),
                self.downsample
            )));
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        *self.widths.last().expect("validated")
    }
}

/// `C x H' x W'` grid of feature vectors with the pixel stride of one cell.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    /// Unpadded source image extents.
    pub source_height: usize,
    pub source_width: usize,
    /// Channel-major, row-major values.
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, stride: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape {
                op: "feature_map",
                lhs: vec![channels, height, width],
                rhs: vec![data.len()],
            });
        }
        Ok(FeatureMap {
            channels,
            height,
            width,
            stride,
            source_height: height * stride,
            source_width: width * stride,
            data,
        })
    }

    /// From a `[1, C, H, W]` or `[C, H, W]` tensor.
    pub fn from_tensor(t: &Tensor<f32>, stride: usize) -> Result<Self> {
        let s = t.shape();
        let (c, h, w) = match s {
            [1, c, h, w] | [c, h, w] => (*c, *h, *w),
            _ => {
                return Err(Error::Shape {
                    op: "feature_map",
                    lhs: s.to_vec(),
                    rhs: vec![1, 0, 0, 0],
                })
            }
        };
        Self::new(c, h, w, stride, t.data().to_vec())
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(vec![1, self.channels, self.height, self.width], self.data.clone()).expect("shape")
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn at(&self, c: usize, row: usize, col: usize) -> f32 {
        self.data[(c * self.height + row) * self.width + col]
    }

    pub fn vector(&self, row: usize, col: usize) -> Vec<f32> {
        (0..self.channels).map(|c| self.at(c, row, col)).collect()
    }

    /// Dot product of `v` with the feature at every cell, row-major.
    pub fn scores(&self, v: &[f32]) -> Vec<f32> {
        let p = self.cells();
        let mut out = vec![0.0f32; p];
        for (c, &vc) in v.iter().enumerate() {
            for (o, &x) in out.iter_mut().zip(&self.data[c * p..][..p]) {
                *o += vc * x;
            }
        }
        out
    }

    /// Per-cell L2 normalisation across channels.
    pub fn l2_normalized(&self) -> Self {
        let p = self.cells();
        let mut out = self.clone();
        for cell in 0..p {
            let norm = (0..self.channels)
                .map(|c| self.data[c * p + cell].powi(2))
                .sum::<f32>()
                .sqrt()
                .max(1e-12);
            for c in 0..self.channels {
                out.data[c * p + cell] /= norm;
            }
        }
        out
    }

    /// Mean over the spatial grid, one value per channel.
    pub fn spatial_mean(&self) -> Vec<f32> {
        let p = self.cells();
        (0..self.channels)
            .map(|c| self.data[c * p..][..p].iter().map(|&v| v as f64).sum::<f64>() as f32 / p as f32)
            .collect()
    }

    /// Serializes into the FKT layout (little-endian header then floats).
    pub fn to_fkt_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + 4 * self.data.len());
        out.extend_from_slice(FKT_MAGIC);
        for v in [
            FKT_VERSION,
            self.channels as u32,
            self.height as u32,
            self.width as u32,
            self.stride as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_fkt_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 24 {
            return Err(Error::Truncated(format!("FKT header needs 24 bytes, got {}", bytes.len())));
        }
        if &bytes[..4] != FKT_MAGIC {
            return Err(Error::Format("bad FKT magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        if word(0) != FKT_VERSION as usize {
            return Err(Error::Format(format!("unsupported FKT version {}", word(0))));
        }
        let (c, h, w, stride) = (word(1), word(2), word(3), word(4));
        let expected = c * h * w;
        let body = &bytes[24..];
        if body.len() != expected * 4 {
            return Err(Error::Truncated(format!(
                "header declares {c}x{h}x{w} = {expected} floats, found {} bytes",
                body.len()
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Self::new(c, h, w, stride, data)
    }

    pub fn save_fkt(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_fkt_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Reads an externally computed feature map from an FKT file.
pub fn load_external_features(path: &Path) -> Result<FeatureMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureMap::from_fkt_bytes(&bytes)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trunk {
    config: TrunkConfig,
    params: ParameterStore,
}

impl Trunk {
    /// Deterministic frozen parameters for `config.seed`.
    pub fn init(config: &TrunkConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(config.seed, "trunk");
        let mut params = ParameterStore::new();
        let mut cin = config.in_channels;
        for (i, &cout) in config.widths.iter().enumerate() {
            let w = rng::kaiming(&mut rng, &[cout, cin, 3, 3], cin * 9);
            params.insert(format!("trunk.b{i}.weight"), w, false)?;
            params.insert(format!("trunk.b{i}.bias"), Tensor::zeros(&[1, cout, 1, 1]), false)?;
            cin = cout;
        }
        Ok(Trunk {
            config: config.clone(),
            params,
        })
    }

    pub fn config(&self) -> &TrunkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }

    pub fn out_channels(&self) -> usize {
        self.config.out_channels()
    }

    pub fn stride(&self) -> usize {
        self.config.downsample
    }

    /// `3 x H x W` image to a feature map. Images whose sides are not a
    /// multiple of the stride are zero-padded on the right and bottom.
    pub fn forward(&self, image: &Tensor<f32>) -> Result<FeatureMap> {
        let s = image.shape();
        if s.len() != 3 || s[0] != self.config.in_channels {
            return Err(Error::Shape {
                op: "trunk_forward",
                lhs: s.to_vec(),
                rhs: vec![self.config.in_channels, 0, 0],
            });
        }
        let (h, w) = (s[1], s[2]);
        if h == 0 || w == 0 {
            return Err(Error::Shape {
                op: "trunk_forward",
                lhs: s.to_vec(),
                rhs: vec![self.config.in_channels, 1, 1],
            });
        }
        let stride = self.stride();
        let (ph, pw) = (h.div_ceil(stride) * stride, w.div_ceil(stride) * stride);
        let input = if (ph, pw) == (h, w) {
            image.clone().reshaped(&[1, s[0], h, w])?
        } else {
            let mut padded = vec![0.0f32; s[0] * ph * pw];
            for c in 0..s[0] {
                for y in 0..h {
                    padded[(c * ph + y) * pw..][..w].copy_from_slice(&image.data()[(c * h + y) * w..][..w]);
                }
            }
            Tensor::new(vec![1, s[0], ph, pw], padded)?
        };

        let mut g = Graph::<f32>::new();
        let mut x = g.constant(input);
        for i in 0..self.config.widths.len() {
            let k = g.constant(self.params.value(&format!("trunk.b{i}.weight"))?.clone());
            let b = g.constant(self.params.value(&format!("trunk.b{i}.bias"))?.clone());
            x = g.conv2d(x, k, 2, 1)?;
            x = g.add(x, b)?;
            x = g.relu(x)?;
        }
        let mut fm = FeatureMap::from_tensor(g.value(x), stride)?;
        fm.source_height = h;
        fm.source_width = w;
        Ok(fm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn probe(h: usize, w: usize) -> Tensor<f32> {
        let data = (0..3 * h * w).map(|i| ((i * 31 % 17) as f32) / 17.0 - 0.5).collect();
        Tensor::new(vec![3, h, w], data).unwrap()
    }

    #[test]
    fn default_trunk_downsamples_by_sixteen() {
        let t = Trunk::init(&TrunkConfig::default()).unwrap();
        let fm = t.forward(&probe(64, 64)).unwrap();
        assert_eq!((fm.channels, fm.height, fm.width, fm.stride), (64, 4, 4, 16));
        assert_eq!(t.params().len(), 8);
        assert!(t.params().iter().all(|(_, p)| !p.trainable));
    }

    #[test]
    fn same_seed_same_parameters_different_seed_differs() {
        let a = Trunk::init(&TrunkConfig::default()).unwrap();
        let b = Trunk::init(&TrunkConfig::default()).unwrap();
        assert_eq!(a, b);
        let c = Trunk::init(&TrunkConfig {
            seed: 1,
            ..TrunkConfig::default()
        })
        .unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn forward_is_pure() {
        let t = Trunk::init(&TrunkConfig::default()).unwrap();
        let zero = Tensor::zeros(&[3, 64, 64]);
        assert_eq!(t.forward(&zero).unwrap(), t.forward(&zero).unwrap());
        let img = probe(64, 64);
        assert_eq!(t.forward(&img).unwrap(), t.forward(&img).unwrap());
    }

    #[test]
    fn wrong_channel_count_rejected() {
        let t = Trunk::init(&TrunkConfig::default()).unwrap();
        assert!(matches!(t.forward(&Tensor::zeros(&[1, 32, 32])), Err(Error::Shape { .. })));
    }

    #[test]
    fn invalid_configs_rejected() {
        let zero = TrunkConfig {
            widths: vec![16, 0, 64, 64],
            ..TrunkConfig::default()
        };
        assert!(matches!(Trunk::init(&zero), Err(Error::Config(_))));
        let bad_stride = TrunkConfig {
            downsample: 8,
            ..TrunkConfig::default()
        };
        assert!(matches!(Trunk::init(&bad_stride), Err(Error::Config(_))));
    }

    #[test]
    fn fkt_round_trip_is_bit_exact() {
        let data: Vec<f32> = (0..32).map(|i| (i as f32).sin() * 1e3).collect();
        let fm = FeatureMap::new(8, 2, 2, 16, data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.fkt");
        fm.save_fkt(&p).unwrap();
        let back = load_external_features(&p).unwrap();
        assert_eq!(back, fm);
        assert_eq!(back.to_fkt_bytes(), fm.to_fkt_bytes());
    }

    #[test]
    fn fkt_short_body_is_truncation() {
        let fm = FeatureMap::new(8, 2, 2, 16, vec![0.5; 32]).unwrap();
        let mut bytes = fm.to_fkt_bytes();
        bytes.truncate(bytes.len() - 4);
        assert!(matches!(FeatureMap::from_fkt_bytes(&bytes), Err(Error::Truncated(_))));
    }

    #[test]
    fn fkt_bad_magic_and_version() {
        let fm = FeatureMap::new(1, 1, 1, 16, vec![1.0]).unwrap();
        let mut bytes = fm.to_fkt_bytes();
        bytes[0] = b'X';
        assert!(matches!(FeatureMap::from_fkt_bytes(&bytes), Err(Error::Format(_))));
        let mut bytes = fm.to_fkt_bytes();
        bytes[4] = 2;
        assert!(matches!(FeatureMap::from_fkt_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn fkt_stride_gives_source_extent() {
        let fm = FeatureMap::new(1, 4, 3, 16, vec![0.0; 12]).unwrap();
        let back = FeatureMap::from_fkt_bytes(&fm.to_fkt_bytes()).unwrap();
        assert_eq!((back.source_height, back.source_width), (64, 48));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn output_extent_is_ceil_of_sixteenth(h in 16usize..=512, w in 16usize..=512) {
            let cfg = TrunkConfig { widths: vec![2, 2, 2, 2], ..TrunkConfig::default() };
            let t = Trunk::init(&cfg).unwrap();
            let fm = t.forward(&Tensor::zeros(&[3, h, w])).unwrap();
            prop_assert_eq!((fm.height, fm.width), (h.div_ceil(16), w.div_ceil(16)));
            prop_assert_eq!((fm.source_height, fm.source_width), (h, w));
        }
    }
}
