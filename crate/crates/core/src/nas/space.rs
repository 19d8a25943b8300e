use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arch::{Activation, ArchitectureSpec, ConvSpec, FcSpec};
use crate::error::{Error, Result};
use crate::quant::QuantSpec;

/// What a single decision slot selects.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    Channels,
    Filter,
    IntBits,
    FracBits,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Fc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    pub kind: LayerKind,
    pub layer: usize,
    pub dimension: Dimension,
}

/// Per-layer choice lists. Every convolution decides channels, filter size and
/// a fixed-point format; every FC layer decides only its fixed-point format
/// (hidden widths are fixed, the last FC layer emits the class logits).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub conv_layers: usize,
    pub fc_layers: usize,
    pub fc_hidden: usize,
    pub channels: Vec<usize>,
    pub filters: Vec<usize>,
    pub int_bits: Vec<u8>,
    pub frac_bits: Vec<u8>,
    #[serde(default)]
    pub activation: Activation,
}

impl SearchSpace {
    /// The full quantized-CNN space: six convolutions, two FC layers.
    pub fn standard() -> Self {
        SearchSpace {
            conv_layers: 6,
            fc_layers: 2,
            fc_hidden: 1024,
            channels: vec![24, 36, 48, 64],
            filters: vec![1, 3, 5, 7],
            int_bits: vec![0, 1, 2, 3],
            frac_bits: (0..=6).collect(),
            activation: Activation::Relu,
        }
    }

    /// Two convolutions with two options per dimension, for quick searches.
    pub fn micro() -> Self {
        SearchSpace {
            conv_layers: 2,
            fc_layers: 2,
            fc_hidden: 16,
            channels: vec![4, 8],
            filters: vec![1, 3],
            int_bits: vec![1, 2],
            frac_bits: vec![2, 6],
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fc_layers == 0 {
            return Err(Error::InvalidArgument(
                "search space needs at least one FC layer".into(),
            ));
        }
        if self.fc_layers > 1 && self.fc_hidden == 0 {
            return Err(Error::InvalidArgument("fc_hidden must be positive".into()));
        }
        let lists: [(&str, bool); 4] = [
            ("channels", self.conv_layers > 0 && self.channels.is_empty()),
            ("filters", self.conv_layers > 0 && self.filters.is_empty()),
            ("int_bits", self.int_bits.is_empty()),
            ("frac_bits", self.frac_bits.is_empty()),
        ];
        if let Some((name, _)) = lists.iter().find(|(_, empty)| *empty) {
            return Err(Error::InvalidArgument(format!("choice list `{name}` is empty")));
        }
        if self.channels.contains(&0) {
            return Err(Error::InvalidArgument("channel choices must be positive".into()));
        }
        if let Some(f) = self.filters.iter().find(|&&f| f % 2 == 0) {
            return Err(Error::InvalidArgument(format!("filter sizes must be odd, got {f}")));
        }
        for &i in &self.int_bits {
            for &f in &self.frac_bits {
                QuantSpec::new(i, f)?;
            }
        }
        Ok(())
    }

    pub fn slots(&self) -> Vec<Slot> {
        let conv = (0..self.conv_layers).flat_map(|layer| {
            [
                Dimension::Channels,
                Dimension::Filter,
                Dimension::IntBits,
                Dimension::FracBits,
            ]
            .map(|dimension| Slot {
                kind: LayerKind::Conv,
                layer,
                dimension,
            })
        });
        let fc = (0..self.fc_layers).flat_map(|layer| {
            [Dimension::IntBits, Dimension::FracBits].map(|dimension| Slot {
                kind: LayerKind::Fc,
                layer,
                dimension,
            })
        });
        conv.chain(fc).collect()
    }

    fn choices(&self, d: Dimension) -> usize {
        match d {
            Dimension::Channels => self.channels.len(),
            Dimension::Filter => self.filters.len(),
            Dimension::IntBits => self.int_bits.len(),
            Dimension::FracBits => self.frac_bits.len(),
        }
    }

    /// Number of options per slot, in token order.
    pub fn cardinalities(&self) -> Vec<usize> {
        self.slots().iter().map(|s| self.choices(s.dimension)).collect()
    }

    pub fn num_tokens(&self) -> usize {
        4 * self.conv_layers + 2 * self.fc_layers
    }

    /// Number of distinct architectures (saturating).
    pub fn size(&self) -> u128 {
        self.cardinalities()
            .iter()
            .fold(1u128, |acc, &c| acc.saturating_mul(c as u128))
    }

    pub fn decode(&self, tokens: &[usize], input_shape: [usize; 3], classes: usize) -> Result<ArchitectureSpec> {
        let cards = self.cardinalities();
        if tokens.len() != cards.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} tokens, got {}",
                cards.len(),
                tokens.len()
            )));
        }
        if let Some(i) = (0..tokens.len()).find(|&i| tokens[i] >= cards[i]) {
            return Err(Error::InvalidArgument(format!(
                "token {i} is {} but the slot has {} options",
                tokens[i], cards[i]
            )));
        }
        let quant = |t: &[usize]| QuantSpec::new(self.int_bits[t[0]], self.frac_bits[t[1]]);
        let (conv_tokens, fc_tokens) = tokens.split_at(4 * self.conv_layers);
        let conv = conv_tokens
            .chunks(4)
            .map(|t| {
                Ok(ConvSpec {
                    channels: self.channels[t[0]],
                    filter: self.filters[t[1]],
                    quant: Some(quant(&t[2..])?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let fc = fc_tokens
            .chunks(2)
            .enumerate()
            .map(|(i, t)| {
                Ok(FcSpec {
                    units: if i + 1 == self.fc_layers {
                        classes
                    } else {
                        self.fc_hidden
                    },
                    quant: Some(quant(t)?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ArchitectureSpec {
            input_shape,
            activation: self.activation,
            conv,
            fc,
            tokens: Some(tokens.to_vec()),
        })
    }

    /// Inverse of [`decode`](Self::decode); fails if the architecture is not
    /// a member of this space.
    pub fn encode(&self, arch: &ArchitectureSpec) -> Result<Vec<usize>> {
        fn index<T: PartialEq + std::fmt::Debug>(list: &[T], v: &T, what: &str) -> Result<usize> {
            list.iter()
                .position(|x| x == v)
                .ok_or_else(|| Error::InvalidArgument(format!("{what} {v:?} is not in the search space")))
        }
        if arch.conv.len() != self.conv_layers || arch.fc.len() != self.fc_layers || arch.activation != self.activation
        {
            return Err(Error::InvalidArgument(
                "architecture does not match the search space layout".into(),
            ));
        }
        let mut tokens = Vec::with_capacity(self.num_tokens());
        let push_quant = |tokens: &mut Vec<usize>, q: Option<QuantSpec>| -> Result<()> {
            let q = q.ok_or_else(|| Error::InvalidArgument("searched layers must be quantized".into()))?;
            tokens.push(index(&self.int_bits, &q.int_bits(), "int_bits")?);
            tokens.push(index(&self.frac_bits, &q.frac_bits(), "frac_bits")?);
            Ok(())
        };
        for c in &arch.conv {
            tokens.push(index(&self.channels, &c.channels, "channels")?);
            tokens.push(index(&self.filters, &c.filter, "filter")?);
            push_quant(&mut tokens, c.quant)?;
        }
        for (i, f) in arch.fc.iter().enumerate() {
            if i + 1 < self.fc_layers && f.units != self.fc_hidden {
                return Err(Error::InvalidArgument(format!(
                    "fc{i} has {} units, expected {}",
                    f.units, self.fc_hidden
                )));
            }
            push_quant(&mut tokens, f.quant)?;
        }
        Ok(tokens)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let space: SearchSpace = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        space.validate()?;
        Ok(space)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn standard_space_token_count() {
        let s = SearchSpace::standard();
        s.validate().unwrap();
        assert_eq!(s.num_tokens(), 28);
        assert_eq!(s.cardinalities().len(), 28);
        // 6 conv layers: 4 * 4 * 4 * 7 options each; 2 FC layers: 4 * 7 each
        let expected = 448u128.pow(6) * 28u128.pow(2);
        assert_eq!(s.size(), expected);
    }

    #[test]
    fn decode_builds_network() {
        let s = SearchSpace::micro();
        let tokens = vec![1, 1, 0, 1, 0, 0, 1, 0, 1, 1, 0, 0];
        let arch = s.decode(&tokens, [1, 28, 28], 10).unwrap();
        assert_eq!(arch.conv[0].channels, 8);
        assert_eq!(arch.conv[0].filter, 3);
        assert_eq!(arch.conv[0].quant, Some(QuantSpec::new(1, 6).unwrap()));
        assert_eq!(arch.fc[0].units, 16);
        assert_eq!(arch.fc[1].units, 10);
        let net = arch.build().unwrap();
        assert_eq!(net.classes(), 10);
        assert!(s.decode(&tokens[1..], [1, 28, 28], 10).is_err());
        let mut bad = tokens.clone();
        bad[0] = 2;
        assert!(s.decode(&bad, [1, 28, 28], 10).is_err());
    }

    #[test]
    fn single_choice_space_has_one_member() {
        let s = SearchSpace {
            conv_layers: 1,
            fc_layers: 1,
            fc_hidden: 0,
            channels: vec![2],
            filters: vec![3],
            int_bits: vec![1],
            frac_bits: vec![2],
            activation: Activation::Relu,
        };
        s.validate().unwrap();
        assert_eq!(s.size(), 1);
        assert_eq!(s.cardinalities(), vec![1; 6]);
    }

    #[test]
    fn invalid_spaces() {
        let mut s = SearchSpace::micro();
        s.filters = vec![2];
        assert!(s.validate().is_err());
        let mut s = SearchSpace::micro();
        s.int_bits.clear();
        assert!(s.validate().is_err());
        let mut s = SearchSpace::micro();
        s.frac_bits = vec![9];
        assert!(s.validate().is_err());
    }

    fn tokens_for(s: &SearchSpace) -> impl Strategy<Value = Vec<usize>> {
        s.cardinalities().into_iter().map(|c| 0..c).collect::<Vec<_>>()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn encode_decode_round_trip(tokens in tokens_for(&SearchSpace::standard())) {
            let s = SearchSpace::standard();
            let arch = s.decode(&tokens, [3, 32, 32], 10).unwrap();
            prop_assert_eq!(s.encode(&arch).unwrap(), tokens.clone());
            let again = s.decode(&s.encode(&arch).unwrap(), [3, 32, 32], 10).unwrap();
            prop_assert_eq!(again, arch);
        }
    }
}
