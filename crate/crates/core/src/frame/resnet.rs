//! Bottleneck ResNet-50 (stages of 3, 4, 6 and 3 blocks) with torchvision
//! parameter names, so torchvision state dicts converted to safetensors
//! load directly. The base width is configurable: 64 gives the standard
//! network and 2048-wide embeddings; narrower widths keep the topology and
//! scale every channel count, for CPU-sized experiments.

use candle_core::Tensor;

use crate::error::Result;
use crate::nn::{self, BufferUpdates, ParamStore};
use crate::rng::SeededRng;

pub const STAGE_DEPTHS: [usize; 4] = [3, 4, 6, 3];
const EXPANSION: usize = 4;
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

pub fn embedding_dim(width: usize) -> usize {
    width * 8 * EXPANSION
}

/// Which block a parameter belongs to: 0 for the stem, 1-4 for the residual
/// stages, 5 for the classification head.
pub fn block_of(name: &str) -> usize {
    if let Some(rest) = name.strip_prefix("layer") {
        rest[..1].parse().unwrap_or(0)
    } else if name.starts_with("fc.") {
        5
    } else {
        0
    }
}

fn init_conv(store: &mut ParamStore, name: &str, out_c: usize, in_c: usize, k: usize, rng: &mut SeededRng) -> Result<()> {
    // He-normal with fan_out, as torchvision initializes ResNets
    let w = nn::kaiming_normal(&[out_c, in_c, k, k], out_c * k * k, rng)?;
    store.insert_param(format!("{name}.weight"), &w)
}

/// Randomly initialized backbone and head.
pub fn init(width: usize, num_classes: usize, rng: &mut SeededRng) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    init_conv(&mut store, "conv1", width, 3, 7, rng)?;
    nn::init_batch_norm(&mut store, "bn1", width)?;
    let mut inplanes = width;
    for (stage, &depth) in STAGE_DEPTHS.iter().enumerate() {
        let planes = width << stage;
        for block in 0..depth {
            let p = format!("layer{}.{block}", stage + 1);
            init_conv(&mut store, &format!("{p}.conv1"), planes, inplanes, 1, rng)?;
            nn::init_batch_norm(&mut store, &format!("{p}.bn1"), planes)?;
            init_conv(&mut store, &format!("{p}.conv2"), planes, planes, 3, rng)?;
            nn::init_batch_norm(&mut store, &format!("{p}.bn2"), planes)?;
            init_conv(&mut store, &format!("{p}.conv3"), planes * EXPANSION, planes, 1, rng)?;
            nn::init_batch_norm(&mut store, &format!("{p}.bn3"), planes * EXPANSION)?;
            if block == 0 {
                init_conv(&mut store, &format!("{p}.downsample.0"), planes * EXPANSION, inplanes, 1, rng)?;
                nn::init_batch_norm(&mut store, &format!("{p}.downsample.1"), planes * EXPANSION)?;
            }
            inplanes = planes * EXPANSION;
        }
    }
    init_head(&mut store, width, num_classes, rng)?;
    Ok(store)
}

pub fn init_head(store: &mut ParamStore, width: usize, num_classes: usize, rng: &mut SeededRng) -> Result<()> {
    nn::init_linear(store, "fc", embedding_dim(width), num_classes, rng)
}

/// Forward-pass context: which blocks normalize with batch statistics.
pub struct Pass<'a> {
    pub store: &'a ParamStore,
    /// Indexed by [`block_of`]; true means training-mode batch norm.
    pub batch_stats: [bool; 5],
    pub updates: BufferUpdates,
}

impl<'a> Pass<'a> {
    pub fn eval(store: &'a ParamStore) -> Self {
        Self { store, batch_stats: [false; 5], updates: Vec::new() }
    }

    fn conv(&self, x: &Tensor, name: &str, stride: usize, padding: usize) -> Result<Tensor> {
        let w = self.store.param(&format!("{name}.weight"))?;
        Ok(x.conv2d(&w, padding, stride, 1, 1)?)
    }

    fn bn(&mut self, x: &Tensor, name: &str, block: usize) -> Result<Tensor> {
        if self.batch_stats[block] {
            nn::batch_norm_train(x, self.store, name, BN_EPS, BN_MOMENTUM, &mut self.updates)
        } else {
            nn::batch_norm_eval(x, self.store, name, BN_EPS)
        }
    }

    fn bottleneck(&mut self, x: &Tensor, p: &str, block: usize, stride: usize, downsample: bool) -> Result<Tensor> {
        let y = self.conv(x, &format!("{p}.conv1"), 1, 0)?;
        let y = self.bn(&y, &format!("{p}.bn1"), block)?.relu()?;
        let y = self.conv(&y, &format!("{p}.conv2"), stride, 1)?;
        let y = self.bn(&y, &format!("{p}.bn2"), block)?.relu()?;
        let y = self.conv(&y, &format!("{p}.conv3"), 1, 0)?;
        let y = self.bn(&y, &format!("{p}.bn3"), block)?;
        let shortcut = if downsample {
            let s = self.conv(x, &format!("{p}.downsample.0"), stride, 0)?;
            self.bn(&s, &format!("{p}.downsample.1"), block)?
        } else {
            x.clone()
        };
        Ok((y + shortcut)?.relu()?)
    }

    /// Pooled penultimate features, `(N, embedding_dim)`.
    pub fn features(&mut self, x: &Tensor) -> Result<Tensor> {
        let x = self.conv(x, "conv1", 2, 3)?;
        let x = self.bn(&x, "bn1", 0)?.relu()?;
        // zero padding is equivalent to -inf padding after a ReLU
        let mut x = nn::max_pool_3x3_s2(&x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?)?;
        for (stage, &depth) in STAGE_DEPTHS.iter().enumerate() {
            for block in 0..depth {
                let stride = if stage > 0 && block == 0 { 2 } else { 1 };
                x = self.bottleneck(&x, &format!("layer{}.{block}", stage + 1), stage + 1, stride, block == 0)?;
            }
        }
        Ok(x.flatten_from(2)?.mean(2)?)
    }

    pub fn head(&self, features: &Tensor) -> Result<Tensor> {
        nn::linear(features, self.store, "fc")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_assignment() {
        assert_eq!(block_of("conv1.weight"), 0);
        assert_eq!(block_of("bn1.running_mean"), 0);
        assert_eq!(block_of("layer3.5.bn2.weight"), 3);
        assert_eq!(block_of("layer1.0.downsample.0.weight"), 1);
        assert_eq!(block_of("fc.bias"), 5);
    }

    #[test]
    fn standard_width_matches_resnet50_parameter_count() {
        let store = init(64, 1000, &mut SeededRng::new(0)).unwrap();
        assert_eq!(store.num_params(), 25_557_032);
        assert_eq!(embedding_dim(64), 2048);
    }
}
