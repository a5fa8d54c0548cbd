//! Network architecture configuration.
//!
//! Tensors are laid out `(batch, channel, spatial..., time)`. The batch
//! dimension is never partitioned; the spectral transform covers every
//! spatial dimension plus time.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FnoConfig {
    /// Worker grid over (batch, channel, spatial..., time); the input and
    /// output tensors live on this partition.
    pub partition: Vec<usize>,
    pub spatial_shape: Vec<usize>,
    pub in_channels: usize,
    #[serde(default = "default_out_channels")]
    pub out_channels: usize,
    pub out_timesteps: usize,
    /// Lifted channel count.
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_blocks")]
    pub num_blocks: usize,
    /// Retained frequency count per transformed dimension (spatial..., time).
    /// Empty means the default of 8 per dimension.
    #[serde(default)]
    pub modes: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

fn default_out_channels() -> usize {
    1
}

fn default_width() -> usize {
    20
}

fn default_blocks() -> usize {
    4
}

impl FnoConfig {
    pub fn ndim(&self) -> usize {
        2 + self.spatial_shape.len() + 1
    }

    pub fn batch_dim(&self) -> usize {
        0
    }

    pub fn channel_dim(&self) -> usize {
        1
    }

    pub fn time_dim(&self) -> usize {
        self.ndim() - 1
    }

    pub fn spatial_dims(&self) -> Vec<usize> {
        (2..2 + self.spatial_shape.len()).collect()
    }

    /// Dimensions the spectral convolution transforms: spatial plus time.
    pub fn transform_dims(&self) -> Vec<usize> {
        (2..self.ndim()).collect()
    }

    /// `(1, in_channels, spatial..., 1)`
    pub fn input_shape(&self) -> Vec<usize> {
        let mut s = vec![1, self.in_channels];
        s.extend_from_slice(&self.spatial_shape);
        s.push(1);
        s
    }

    /// `(1, in_channels, spatial..., out_timesteps)`
    pub fn time_lifted_shape(&self) -> Vec<usize> {
        let mut s = self.input_shape();
        let last = s.len() - 1;
        s[last] = self.out_timesteps;
        s
    }

    /// `(1, width, spatial..., out_timesteps)`
    pub fn lifted_shape(&self) -> Vec<usize> {
        let mut s = self.time_lifted_shape();
        s[1] = self.width;
        s
    }

    /// `(1, out_channels, spatial..., out_timesteps)`
    pub fn output_shape(&self) -> Vec<usize> {
        let mut s = self.lifted_shape();
        s[1] = self.out_channels;
        s
    }

    /// Extent of each transformed dimension in the lifted tensor.
    pub fn transform_sizes(&self) -> Vec<usize> {
        let mut s = self.spatial_shape.clone();
        s.push(self.out_timesteps);
        s
    }

    /// Modes with the documented default of 8 per transformed dimension.
    pub fn resolved_modes(&self) -> Vec<usize> {
        if self.modes.is_empty() {
            vec![8; self.spatial_shape.len() + 1]
        } else {
            self.modes.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 {
            return Err(Error::invalid("num_blocks must be at least 1"));
        }
        if self.width == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid("channel counts must be positive"));
        }
        if self.out_timesteps == 0 {
            return Err(Error::invalid("out_timesteps must be positive"));
        }
        if self.spatial_shape.is_empty() || self.spatial_shape.iter().any(|&n| n == 0) {
            return Err(Error::invalid("spatial shape entries must be positive"));
        }
        if self.partition.len() != self.ndim() {
            return Err(Error::invalid(format!(
                "partition has {} dims but tensors have {}",
                self.partition.len(),
                self.ndim()
            )));
        }
        if self.partition.iter().any(|&p| p == 0) {
            return Err(Error::invalid("partition entries must be positive"));
        }
        if self.partition[self.batch_dim()] != 1 {
            return Err(Error::invalid("the batch dimension is never partitioned"));
        }
        let modes = self.resolved_modes();
        let sizes = self.transform_sizes();
        if modes.len() != sizes.len() {
            return Err(Error::invalid(format!(
                "{} mode counts for {} transformed dimensions",
                modes.len(),
                sizes.len()
            )));
        }
        for (&m, &n) in modes.iter().zip(&sizes) {
            if m == 0 {
                return Err(Error::invalid("mode counts must be at least 1"));
            }
            if 2 * m > n {
                return Err(Error::invalid(format!(
                    "mode count {m} exceeds half the extent {n}"
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> FnoConfig {
        FnoConfig {
            partition: vec![1, 1, 2, 2, 2, 1],
            spatial_shape: vec![16, 16, 16],
            in_channels: 2,
            out_channels: 1,
            out_timesteps: 10,
            width: 20,
            num_blocks: 4,
            modes: vec![4, 4, 4, 2],
            activation: Activation::Relu,
        }
    }

    #[test]
    fn shapes_follow_the_layout() {
        let c = base();
        assert_eq!(c.input_shape(), vec![1, 2, 16, 16, 16, 1]);
        assert_eq!(c.lifted_shape(), vec![1, 20, 16, 16, 16, 10]);
        assert_eq!(c.output_shape(), vec![1, 1, 16, 16, 16, 10]);
        assert_eq!(c.transform_dims(), vec![2, 3, 4, 5]);
        c.validate().unwrap();
    }

    #[test]
    fn validation_rejects_oversized_modes() {
        let mut c = base();
        c.modes = vec![4, 4, 4, 6]; // 2*6 > 10
        assert!(c.validate().is_err());
        c.modes = vec![4, 4, 4];
        assert!(c.validate().is_err());
        let mut c = base();
        c.partition = vec![2, 1, 2, 2, 2, 1];
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_json_rejects_unknown_keys() {
        let good = r#"{"partition":[1,1,2,1],"spatial_shape":[16],"in_channels":1,
                       "out_timesteps":4,"modes":[4,2]}"#;
        let c: FnoConfig = serde_json::from_str(good).unwrap();
        assert_eq!(c.width, 20);
        assert_eq!(c.num_blocks, 4);
        assert_eq!(c.activation, Activation::Relu);
        let bad = r#"{"partition":[1,1,2,1],"spatial_shape":[16],"in_channels":1,
                      "out_timesteps":4,"mystery":3}"#;
        assert!(serde_json::from_str::<FnoConfig>(bad).is_err());
    }
}
