//! Input-space transforms shared by the training methods.
//!
//! The masked view of an image keeps every pixel inside the segmentation and
//! replaces the background with a fresh random permutation of its own
//! values: spatial structure outside the mask is destroyed while the global
//! intensity distribution is untouched.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::BitGrid;
use crate::tensor::{Scalar, Tensor};

/// Permutes the pixel values outside `seg` uniformly at random, in place on
/// a copy. Pixels inside `seg` are returned unchanged.
pub fn shuffle_outside_mask<T: Scalar>(
    image: &Tensor<T>,
    seg: &BitGrid,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<T>> {
    let shape = image.shape();
    if shape.len() != 2 || shape[0] != seg.height() || shape[1] != seg.width() {
        return Err(Error::Shape(format!(
            "image {:?} vs seg {}x{}",
            shape,
            seg.height(),
            seg.width()
        )));
    }
    let mut out = image.clone();
    let positions: Vec<usize> =
        (0..image.len()).filter(|&p| !seg.bits()[p]).collect();
    let mut values: Vec<T> = positions.iter().map(|&p| image.data()[p]).collect();
    values.shuffle(rng);
    for (&p, &v) in positions.iter().zip(&values) {
        out.data_mut()[p] = v;
    }
    Ok(out)
}

/// A clean image together with one masked presentation of it.
#[derive(Clone, Debug)]
pub struct MaskedPair<T> {
    pub clean: Tensor<T>,
    pub masked: Tensor<T>,
}

/// Builds the masked view `clean*seg + shuffle(clean)*(1-seg)`. Because the
/// shuffle only permutes background positions, this equals the shuffled
/// image directly.
pub fn masked_pair<T: Scalar>(
    image: &Tensor<T>,
    seg: &BitGrid,
    rng: &mut ChaCha8Rng,
) -> Result<MaskedPair<T>> {
    let masked = shuffle_outside_mask(image, seg, rng)?;
    Ok(MaskedPair { clean: image.clone(), masked })
}
