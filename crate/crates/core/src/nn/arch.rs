use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{CLASSES, SIDE};
use crate::error::Error;

pub const KERNEL: usize = 5;
pub const KERNEL_AREA: usize = KERNEL * KERNEL;
pub const PAD: usize = 2;

/// The six parameterized layers, in network order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerTag {
    Conv1,
    Conv2,
    Conv3,
    Fc1,
    Fc2,
    Out,
}

impl LayerTag {
    pub const ALL: [LayerTag; 6] = [
        LayerTag::Conv1,
        LayerTag::Conv2,
        LayerTag::Conv3,
        LayerTag::Fc1,
        LayerTag::Fc2,
        LayerTag::Out,
    ];

    /// Layers whose post-activation values make up the activation matrix.
    pub const HIDDEN: [LayerTag; 5] = [
        LayerTag::Conv1,
        LayerTag::Conv2,
        LayerTag::Conv3,
        LayerTag::Fc1,
        LayerTag::Fc2,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_conv(self) -> bool {
        matches!(self, LayerTag::Conv1 | LayerTag::Conv2 | LayerTag::Conv3)
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerTag::Conv1 => "conv1",
            LayerTag::Conv2 => "conv2",
            LayerTag::Conv3 => "conv3",
            LayerTag::Fc1 => "fc1",
            LayerTag::Fc2 => "fc2",
            LayerTag::Out => "out",
        }
    }
}

impl fmt::Display for LayerTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LayerTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LayerTag::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::UnknownLayer(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv5x5,
    Maxpool2x2,
    FullyConnected,
    Output,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LogSoftmax,
    None,
}

/// One row of the layer table. `inputs`/`outputs` are channel counts for
/// conv and pool layers, unit counts for dense layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

/// Widths of the fixed 3-conv / 2-fc / output topology.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub conv: [usize; 3],
    pub fc: [usize; 2],
    pub classes: usize,
}

impl Default for Arch {
    fn default() -> Self {
        Self::canonical()
    }
}

impl Arch {
    /// 64 kernels per conv layer, 512 neurons per hidden dense layer.
    pub const fn canonical() -> Self {
        Arch {
            conv: [64, 64, 64],
            fc: [512, 512],
            classes: CLASSES,
        }
    }

    /// Same topology with `kernels` channels and `units` dense neurons.
    pub const fn tiny(kernels: usize, units: usize) -> Self {
        Arch {
            conv: [kernels; 3],
            fc: [units; 2],
            classes: CLASSES,
        }
    }

    /// Spatial side of the input to conv layer `i` (0-based): 28, 14, 7.
    pub fn conv_input_side(i: usize) -> usize {
        let mut s = SIDE;
        for _ in 0..i {
            s /= 2;
        }
        s
    }

    /// Spatial side after conv `i` and its pooling: 14, 7, 3.
    pub fn pooled_side(i: usize) -> usize {
        Self::conv_input_side(i) / 2
    }

    pub fn conv_in_channels(&self, i: usize) -> usize {
        if i == 0 {
            1
        } else {
            self.conv[i - 1]
        }
    }

    pub fn flat_features(&self) -> usize {
        let s = Self::pooled_side(2);
        self.conv[2] * s * s
    }

    /// `(fan_in, fan_out)` of a parameterized layer.
    pub fn fan(&self, tag: LayerTag) -> (usize, usize) {
        match tag {
            LayerTag::Conv1 | LayerTag::Conv2 | LayerTag::Conv3 => {
                let i = tag.index();
                (self.conv_in_channels(i) * KERNEL_AREA, self.conv[i])
            }
            LayerTag::Fc1 => (self.flat_features(), self.fc[0]),
            LayerTag::Fc2 => (self.fc[0], self.fc[1]),
            LayerTag::Out => (self.fc[1], self.classes),
        }
    }

    /// Weight tensor shape in declaration order.
    pub fn weight_shape(&self, tag: LayerTag) -> Vec<usize> {
        let (fan_in, fan_out) = self.fan(tag);
        if tag.is_conv() {
            vec![fan_out, fan_in / KERNEL_AREA, KERNEL, KERNEL]
        } else {
            vec![fan_out, fan_in]
        }
    }

    /// Ablatable units: kernels for conv layers, neurons for dense ones.
    pub fn units(&self, tag: LayerTag) -> usize {
        self.fan(tag).1
    }

    /// Recorded activations per image for a layer (conv: post-pool map size).
    pub fn activation_width(&self, tag: LayerTag) -> usize {
        if tag.is_conv() {
            let s = Self::pooled_side(tag.index());
            self.conv[tag.index()] * s * s
        } else {
            self.units(tag)
        }
    }

    /// Width of the activation matrix (hidden layers only).
    pub fn hidden_activation_width(&self) -> usize {
        LayerTag::HIDDEN
            .iter()
            .map(|&t| self.activation_width(t))
            .sum()
    }

    pub fn param_count(&self) -> usize {
        LayerTag::ALL
            .iter()
            .map(|&t| {
                let (i, o) = self.fan(t);
                i * o + o
            })
            .sum()
    }

    /// Full layer table including pooling stages.
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let mut v = Vec::with_capacity(9);
        for i in 0..3 {
            v.push(LayerSpec {
                kind: LayerKind::Conv5x5,
                inputs: self.conv_in_channels(i),
                outputs: self.conv[i],
                activation: Activation::Relu,
            });
            v.push(LayerSpec {
                kind: LayerKind::Maxpool2x2,
                inputs: self.conv[i],
                outputs: self.conv[i],
                activation: Activation::None,
            });
        }
        v.push(LayerSpec {
            kind: LayerKind::FullyConnected,
            inputs: self.flat_features(),
            outputs: self.fc[0],
            activation: Activation::Relu,
        });
        v.push(LayerSpec {
            kind: LayerKind::FullyConnected,
            inputs: self.fc[0],
            outputs: self.fc[1],
            activation: Activation::Relu,
        });
        v.push(LayerSpec {
            kind: LayerKind::Output,
            inputs: self.fc[1],
            outputs: self.classes,
            activation: Activation::LogSoftmax,
        });
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_unit_count_is_17280() {
        let a = Arch::canonical();
        let widths: Vec<usize> = LayerTag::HIDDEN
            .iter()
            .map(|&t| a.activation_width(t))
            .collect();
        assert_eq!(widths, vec![12_544, 3_136, 576, 512, 512]);
        assert_eq!(a.hidden_activation_width(), 17_280);
    }

    #[test]
    fn pooled_sides_floor() {
        assert_eq!(
            (0..3).map(Arch::pooled_side).collect::<Vec<_>>(),
            vec![14, 7, 3]
        );
        assert_eq!(Arch::canonical().flat_features(), 576);
    }

    #[test]
    fn shapes() {
        let a = Arch::canonical();
        assert_eq!(a.weight_shape(LayerTag::Conv1), vec![64, 1, 5, 5]);
        assert_eq!(a.weight_shape(LayerTag::Conv2), vec![64, 64, 5, 5]);
        assert_eq!(a.weight_shape(LayerTag::Fc1), vec![512, 576]);
        assert_eq!(a.weight_shape(LayerTag::Out), vec![10, 512]);
        assert_eq!(a.layer_specs().len(), 9);
    }

    #[test]
    fn tag_parse_round_trip() {
        for t in LayerTag::ALL {
            assert_eq!(t.name().parse::<LayerTag>().unwrap(), t);
        }
        assert!("conv4".parse::<LayerTag>().is_err());
    }
}
