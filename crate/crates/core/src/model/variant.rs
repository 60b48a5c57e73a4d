use std::fmt;
use std::str::FromStr;

use crate::error::Error;

/// Layer ordering inside a residual block. One variant per network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockVariant {
    /// Conv-BN-ReLU-Conv-BN, ReLU after the addition.
    BaselineReluBn,
    /// Conv-ELU-Conv-ELU, plain addition.
    ConvEluConvElu,
    /// ELU-Conv-ELU-Conv (full pre-activation), plain addition.
    EluConvEluConv,
    /// Conv-ELU-Conv-BN, ELU after the addition.
    ConvEluConvBnEluAfterAdd,
    /// Conv-ELU-Conv-BN, plain addition.
    ConvEluConvBnNoEluAfterAdd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Elu,
    Relu,
}

/// One layer on the residual branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Step {
    Conv1,
    Conv2,
    Bn1,
    Bn2,
    Act(Activation),
}

use Activation::{Elu, Relu};
use Step::{Act, Bn1, Bn2, Conv1, Conv2};

impl BlockVariant {
    pub const ALL: [BlockVariant; 5] = [
        BlockVariant::BaselineReluBn,
        BlockVariant::ConvEluConvElu,
        BlockVariant::EluConvEluConv,
        BlockVariant::ConvEluConvBnEluAfterAdd,
        BlockVariant::ConvEluConvBnNoEluAfterAdd,
    ];

    /// Short CLI tag: `baseline`, `a`, `b`, `c` or `d`.
    pub fn tag(self) -> &'static str {
        match self {
            BlockVariant::BaselineReluBn => "baseline",
            BlockVariant::ConvEluConvElu => "a",
            BlockVariant::EluConvEluConv => "b",
            BlockVariant::ConvEluConvBnEluAfterAdd => "c",
            BlockVariant::ConvEluConvBnNoEluAfterAdd => "d",
        }
    }

    pub fn branch(self) -> &'static [Step] {
        match self {
            BlockVariant::BaselineReluBn => &[Conv1, Bn1, Act(Relu), Conv2, Bn2],
            BlockVariant::ConvEluConvElu => &[Conv1, Act(Elu), Conv2, Act(Elu)],
            BlockVariant::EluConvEluConv => &[Act(Elu), Conv1, Act(Elu), Conv2],
            BlockVariant::ConvEluConvBnEluAfterAdd | BlockVariant::ConvEluConvBnNoEluAfterAdd => {
                &[Conv1, Act(Elu), Conv2, Bn2]
            }
        }
    }

    pub fn post_add(self) -> Option<Activation> {
        match self {
            BlockVariant::BaselineReluBn => Some(Relu),
            BlockVariant::ConvEluConvBnEluAfterAdd => Some(Elu),
            _ => None,
        }
    }

    /// Activation family used by the stem.
    pub fn activation(self) -> Activation {
        match self {
            BlockVariant::BaselineReluBn => Relu,
            _ => Elu,
        }
    }

    pub fn has_bn1(self) -> bool {
        self.branch().contains(&Bn1)
    }

    pub fn has_bn2(self) -> bool {
        self.branch().contains(&Bn2)
    }

    /// A convolution carries a bias unless a BN follows it directly.
    pub fn conv_bias(self, conv: Step) -> bool {
        let steps = self.branch();
        let at = steps.iter().position(|&s| s == conv).expect("conv step present");
        !matches!(steps.get(at + 1), Some(Bn1 | Bn2))
    }

    pub fn default_head_elu(self) -> bool {
        self != BlockVariant::BaselineReluBn
    }
}

impl fmt::Display for BlockVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for BlockVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let v = match s.to_ascii_lowercase().as_str() {
            "baseline" | "relu-bn" => BlockVariant::BaselineReluBn,
            "a" | "conv-elu-conv-elu" => BlockVariant::ConvEluConvElu,
            "b" | "elu-conv-elu-conv" => BlockVariant::EluConvEluConv,
            "c" | "conv-elu-conv-bn-elu" => BlockVariant::ConvEluConvBnEluAfterAdd,
            "d" | "conv-elu-conv-bn" => BlockVariant::ConvEluConvBnNoEluAfterAdd,
            other => {
                return Err(Error::invalid(
                    "variant",
                    format!("unknown block variant '{other}', expected baseline|a|b|c|d"),
                ))
            }
        };
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tags_round_trip() {
        for v in BlockVariant::ALL {
            assert_eq!(v.tag().parse::<BlockVariant>().unwrap(), v);
        }
        assert!("e".parse::<BlockVariant>().is_err());
    }

    #[test]
    fn bias_follows_bn_placement() {
        use BlockVariant::*;
        assert!(!BaselineReluBn.conv_bias(Conv1) && !BaselineReluBn.conv_bias(Conv2));
        assert!(ConvEluConvElu.conv_bias(Conv1) && ConvEluConvElu.conv_bias(Conv2));
        assert!(EluConvEluConv.conv_bias(Conv1) && EluConvEluConv.conv_bias(Conv2));
        for v in [ConvEluConvBnEluAfterAdd, ConvEluConvBnNoEluAfterAdd] {
            assert!(v.conv_bias(Conv1) && !v.conv_bias(Conv2));
            assert!(!v.has_bn1() && v.has_bn2());
        }
    }

    #[test]
    fn head_elu_defaults() {
        assert!(!BlockVariant::BaselineReluBn.default_head_elu());
        assert!(BlockVariant::ConvEluConvBnNoEluAfterAdd.default_head_elu());
        assert!(BlockVariant::ConvEluConvBnEluAfterAdd.default_head_elu());
    }
}
