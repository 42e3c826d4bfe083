//! Core domain types: modalities, hierarchical code bundles, identity pair batches.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// An image as a value tensor `[H, W, 3]` with entries in `[-1, 1]`.
pub type ImageTensor<S> = Tensor<S>;

/// The two capture domains. Index 0 is visible light, index 1 is infrared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Visible,
    Infrared,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::Visible, Modality::Infrared];

    pub fn index(self) -> usize {
        match self {
            Modality::Visible => 0,
            Modality::Infrared => 1,
        }
    }

    pub fn from_index(i: usize) -> Modality {
        match i {
            0 => Modality::Visible,
            1 => Modality::Infrared,
            _ => panic!("modality index {i} out of range"),
        }
    }

    pub fn other(self) -> Modality {
        match self {
            Modality::Visible => Modality::Infrared,
            Modality::Infrared => Modality::Visible,
        }
    }

    /// Directory name used in dataset layouts.
    pub fn dir_name(self) -> &'static str {
        match self {
            Modality::Visible => "visible",
            Modality::Infrared => "infrared",
        }
    }

    pub fn parse_dir(name: &str) -> Option<Modality> {
        match name {
            "visible" => Some(Modality::Visible),
            "infrared" => Some(Modality::Infrared),
            _ => None,
        }
    }
}

/// Hierarchical factor codes of one image: an identity prototype (spatial map)
/// plus three attribute vectors — style (identity-discriminative), and
/// illumination + pose (identity-excluded).
#[derive(Debug, Clone, PartialEq)]
pub struct CodeBundle<S> {
    /// `[h, w, c]` identity prototype.
    pub prototype: Tensor<S>,
    /// `[d_s]` identity-discriminative style code.
    pub style: Tensor<S>,
    /// `[d_c]` illumination code.
    pub illum: Tensor<S>,
    /// `[d_p]` pose code.
    pub pose: Tensor<S>,
}

impl<S: Scalar> CodeBundle<S> {
    /// Identity-excluded half: `[illum; pose]` in that fixed order.
    pub fn id_excluded(&self) -> Tensor<S> {
        let mut data = Vec::with_capacity(self.illum.numel() + self.pose.numel());
        data.extend_from_slice(self.illum.data());
        data.extend_from_slice(self.pose.data());
        Tensor::new(vec![data.len()], data)
    }

    /// Full attribute vector: `[style; illum; pose]` — always equal to
    /// `[style; id_excluded()]`.
    pub fn attribute(&self) -> Tensor<S> {
        let mut data =
            Vec::with_capacity(self.style.numel() + self.illum.numel() + self.pose.numel());
        data.extend_from_slice(self.style.data());
        data.extend_from_slice(self.illum.data());
        data.extend_from_slice(self.pose.data());
        Tensor::new(vec![data.len()], data)
    }
}

/// One identity observed in both modalities.
#[derive(Debug, Clone)]
pub struct IdentityPair<S> {
    /// Contiguous class label in `[0, n_classes)`.
    pub label: usize,
    pub visible: ImageTensor<S>,
    pub infrared: ImageTensor<S>,
}

/// A training batch of identity pairs; identities are pairwise distinct so the
/// triplet loss always has at least one negative per anchor.
#[derive(Debug, Clone)]
pub struct PairBatch<S> {
    pairs: Vec<IdentityPair<S>>,
}

#[derive(Debug, thiserror::Error)]
pub enum BatchError {
    #[error("a pair batch needs at least 2 identity pairs, got {0}")]
    TooSmall(usize),
    #[error("duplicate identity label {0} in pair batch")]
    DuplicateIdentity(usize),
    #[error("image shape mismatch in pair batch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
}

impl<S: Scalar> PairBatch<S> {
    pub fn new(pairs: Vec<IdentityPair<S>>) -> Result<Self, BatchError> {
        if pairs.len() < 2 {
            return Err(BatchError::TooSmall(pairs.len()));
        }
        let shape = pairs[0].visible.shape().to_vec();
        for (i, p) in pairs.iter().enumerate() {
            for q in &pairs[..i] {
                if q.label == p.label {
                    return Err(BatchError::DuplicateIdentity(p.label));
                }
            }
            for img in [&p.visible, &p.infrared] {
                if img.shape() != shape.as_slice() {
                    return Err(BatchError::ShapeMismatch(shape, img.shape().to_vec()));
                }
            }
        }
        Ok(PairBatch { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[IdentityPair<S>] {
        &self.pairs
    }

    pub fn labels(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.label).collect()
    }

    /// Stacks the images of one modality into `[B, H, W, 3]`.
    pub fn stacked(&self, m: Modality) -> Tensor<S> {
        let mut shape = vec![self.pairs.len()];
        shape.extend_from_slice(self.pairs[0].visible.shape());
        let mut data = Vec::with_capacity(shape.iter().product());
        for p in &self.pairs {
            let img = match m {
                Modality::Visible => &p.visible,
                Modality::Infrared => &p.infrared,
            };
            data.extend_from_slice(img.data());
        }
        Tensor::new(shape, data)
    }
}
