use std::fmt;

/// Kernel size and stride of one layer on the path to the output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kernel: usize,
    pub stride: usize,
}

impl LayerSpec {
    pub const fn new(kernel: usize, stride: usize) -> Self {
        Self { kernel, stride }
    }

    pub const fn conv3() -> Self {
        Self::new(3, 1)
    }
}

/// Theoretical receptive field `r0` of a chain of layers ordered from input
/// to output, folding `r_{l-1} = s_l r_l + (k_l - s_l)` back from `r_L = 1`.
pub fn receptive_field(layers: &[LayerSpec]) -> usize {
    layers
        .iter()
        .rev()
        .fold(1, |r, l| l.stride * r + l.kernel - l.stride)
}

/// Receptive field of a full network: finite, or the whole image when a
/// global operation (self-attention) sits on the path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReceptiveField {
    Finite(usize),
    Global { conv_only: usize },
}

impl ReceptiveField {
    /// Whether every pixel of a `side x side` image can reach every other.
    pub fn covers(&self, side: usize) -> bool {
        match *self {
            ReceptiveField::Finite(r) => r > 2 * side,
            ReceptiveField::Global { .. } => true,
        }
    }
}

impl fmt::Display for ReceptiveField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReceptiveField::Finite(r) => write!(f, "{r}"),
            ReceptiveField::Global { conv_only } => write!(f, "global (conv path {conv_only})"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_conv() {
        assert_eq!(receptive_field(&[LayerSpec::conv3()]), 3);
    }

    #[test]
    fn conv_then_strided_conv() {
        assert_eq!(receptive_field(&[LayerSpec::new(3, 1), LayerSpec::new(3, 2)]), 5);
    }

    #[test]
    fn pointwise_layers_add_nothing() {
        assert_eq!(receptive_field(&[LayerSpec::new(1, 1); 10]), 1);
    }

    proptest! {
        #[test]
        fn monotone_in_every_kernel(
            layers in proptest::collection::vec((1usize..8, 1usize..4), 1..8),
            which in 0usize..8,
        ) {
            let specs: Vec<LayerSpec> = layers.iter().map(|&(k, s)| LayerSpec::new(k, s)).collect();
            let i = which % specs.len();
            let mut bigger = specs.clone();
            bigger[i].kernel += 1;
            prop_assert!(receptive_field(&bigger) >= receptive_field(&specs));
        }
    }
}
