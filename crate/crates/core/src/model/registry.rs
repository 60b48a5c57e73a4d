use crate::tensor::Dims;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    ConvWeight,
    ConvBias,
    BnGamma,
    BnBeta,
    FcWeight,
    FcBias,
}

impl ParamKind {
    /// Convolution and fully-connected weight matrices; these are the
    /// "weighted layers" of the depth count and the only entries subject to
    /// weight decay by default.
    pub fn is_weight(self) -> bool {
        matches!(self, ParamKind::ConvWeight | ParamKind::FcWeight)
    }
}

/// One learnable tensor in registry order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub kind: ParamKind,
    pub dims: Dims,
}

impl ParamInfo {
    pub fn new(name: String, kind: ParamKind, dims: Dims) -> Self {
        ParamInfo { name, kind, dims }
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Gradients aligned entry-for-entry with the parameter registry.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub entries: Vec<Vec<T>>,
}

impl<T: Copy> Gradients<T> {
    pub fn flatten(&self) -> Vec<T> {
        self.entries.iter().flatten().copied().collect()
    }
}
