//! U-Net with one denoising channel and three class-score channels.

mod layers;
mod optim;
mod unet;

use std::fmt::Debug;

use ndarray::{s, Array2, Array3, Array4, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

pub use optim::{Adam, AdamConfig};
pub use unet::{Mode, Tape, UNet};

/// Channel 0 is the denoised image, channels 1..=3 the class scores
/// (background, foreground, border).
pub const OUTPUT_CHANNELS: usize = 4;

/// Floating point types the network can be instantiated with.
pub trait Scalar:
    Float + FromPrimitive + LinalgScalar + ScalarOperand + Default + Debug + Send + Sync + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub depth: usize,
    pub kernel_size: usize,
    pub initial_features: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub batch_norm: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            kernel_size: 3,
            initial_features: 32,
            in_channels: 1,
            out_channels: OUTPUT_CHANNELS,
            batch_norm: true,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.depth >= 1, Config, "network depth must be >= 1");
        ensure!(
            self.kernel_size % 2 == 1,
            Config,
            "kernel size must be odd for same padding, got {}",
            self.kernel_size
        );
        ensure!(self.initial_features >= 1, Config, "need at least one feature map");
        ensure!(self.in_channels == 1, Config, "only single-channel input is supported");
        ensure!(
            self.out_channels == OUTPUT_CHANNELS,
            Config,
            "output must have {OUTPUT_CHANNELS} channels, got {}",
            self.out_channels
        );
        Ok(())
    }

    /// Feature width of encoder level `level`; level `depth` is the bottleneck.
    pub fn width(&self, level: usize) -> usize {
        self.initial_features << level
    }

    /// Spatial sides must be a multiple of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }
}

/// Learnable tensor stored flat, with its gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Scalar> Param<T> {
    pub(crate) fn new(name: String, shape: Vec<usize>, value: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![T::zero(); value.len()];
        Self {
            name,
            shape,
            value,
            grad,
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Network prediction for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkOutput {
    /// Channel 0, in standardized intensity units.
    pub denoised: Array2<f32>,
    /// Unnormalized scores, `[3, rows, cols]`.
    pub class_scores: Array3<f32>,
}

impl NetworkOutput {
    pub fn from_channels(channels: ndarray::ArrayView3<f32>) -> Self {
        Self {
            denoised: channels.slice(s![0, .., ..]).to_owned(),
            class_scores: channels.slice(s![1..4, .., ..]).to_owned(),
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.denoised.dim()
    }

    /// Stacks outputs into a `[m, 4, rows, cols]` array.
    pub fn stack(outputs: &[NetworkOutput]) -> Result<Array4<f32>> {
        ensure!(!outputs.is_empty(), Contract, "no outputs to stack");
        let (rows, cols) = outputs[0].dim();
        let mut out = Array4::zeros((outputs.len(), OUTPUT_CHANNELS, rows, cols));
        for (i, o) in outputs.iter().enumerate() {
            ensure!(o.dim() == (rows, cols), Contract, "outputs differ in shape");
            out.slice_mut(s![i, 0, .., ..]).assign(&o.denoised);
            out.slice_mut(s![i, 1..4, .., ..]).assign(&o.class_scores);
        }
        Ok(out)
    }
}

/// Builds a network with deterministic initial weights.
pub fn build_unet(config: &NetworkConfig, seed: u64) -> Result<UNet<f32>> {
    UNet::new(config.clone(), seed)
}

/// Eval-mode prediction for a single 2D image.
pub fn forward(model: &UNet<f32>, patch: &Array2<f32>) -> Result<NetworkOutput> {
    let (rows, cols) = patch.dim();
    let input = patch
        .clone()
        .into_shape_with_order((1, 1, rows, cols))
        .expect("contiguous");
    let out = model.forward_eval(&input)?;
    Ok(NetworkOutput::from_channels(out.slice(s![0, .., .., ..])))
}
