//! Siamese encoder, classifier head, and per-family transform decoders.
//!
//! The backbone is a small pre-activation residual network: a stem
//! convolution, three residual stages for the encoder, and a fourth
//! residual block as the classifier. Every decoder reuses the classifier's
//! architecture template, reading the channel-concatenated feature maps of
//! an (original, transformed) image pair and emitting one regression value
//! per transform parameter. Widths are configuration, not code, so the same
//! network scales from throwaway test sizes up to paper-like widths.

mod checkpoint;
mod net;

pub use checkpoint::{read_archive, write_archive, ArchiveEntry};
pub use net::{Forward, ForwardMode, Network, PendingBnUpdate};

use std::rc::Rc;

use rand::RngCore;

use crate::autodiff::Tensor;

pub const DECODER_DOFS: [usize; 5] = [8, 6, 4, 3, 4];

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub num_classes: usize,
    pub image_hw: (usize, usize),
    /// Stem convolution stride; 2 halves every later feature map for speed.
    pub stem_stride: usize,
    /// Channel widths: stem, the three encoder stages, and the head blocks.
    pub widths: [usize; 5],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_channels: 3,
            num_classes: 4,
            image_hw: (32, 32),
            stem_stride: 1,
            widths: [16, 16, 32, 64, 64],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.widths.iter().any(|&w| w == 0) {
            return Err(ModelError::InvalidConfig("zero channel width".into()));
        }
        if !(self.stem_stride == 1 || self.stem_stride == 2) {
            return Err(ModelError::InvalidConfig(format!(
                "stem_stride must be 1 or 2, got {}",
                self.stem_stride
            )));
        }
        if self.num_classes < 2 {
            return Err(ModelError::InvalidConfig("need at least two classes".into()));
        }
        let min_side = 8 * self.stem_stride;
        if self.image_hw.0 < min_side || self.image_hw.1 < min_side {
            return Err(ModelError::InvalidConfig(format!(
                "image {}x{} too small for the downsampling chain",
                self.image_hw.0, self.image_hw.1
            )));
        }
        Ok(())
    }
}

/// Flat, name-addressed parameter storage. Layers hold indices into it;
/// values are `Rc` so a forward pass can alias them onto a tape without
/// copying, and the optimizer can mutate in place between passes.
#[derive(Debug, Default)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub values: Vec<Rc<Tensor>>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.names.push(name.into());
        self.values.push(Rc::new(value));
        self.names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Tensor {
        Rc::make_mut(&mut self.values[id])
    }
}

/// Non-trained per-layer state (batchnorm running statistics).
#[derive(Debug, Default)]
pub struct BufferStore {
    pub names: Vec<String>,
    pub values: Vec<Tensor>,
}

impl BufferStore {
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.names.len() - 1
    }
}

/// First- and second-moment slots per parameter. The trainer uses the Adam
/// slots for encoder/classifier ids and the momentum slot for decoder ids;
/// unused slots stay zero.
#[derive(Debug)]
pub struct OptimizerState {
    pub adam_m: Vec<Tensor>,
    pub adam_v: Vec<Tensor>,
    pub momentum: Vec<Tensor>,
    pub adam_steps: u64,
}

impl OptimizerState {
    fn zeros_like(store: &ParamStore) -> Self {
        let z: Vec<Tensor> = store.values.iter().map(|v| Tensor::zeros(v.raw_dim())).collect();
        Self { adam_m: z.clone(), adam_v: z.clone(), momentum: z, adam_steps: 0 }
    }
}

/// Everything the trainer owns about the model: student parameters, the EMA
/// teacher copy of the encoder+classifier prefix, batchnorm buffers,
/// optimizer slots, and the step counter.
#[derive(Debug)]
pub struct ModelState {
    pub config: ModelConfig,
    pub net: Network,
    pub params: ParamStore,
    pub buffers: BufferStore,
    /// EMA copies of `params.values[..net.teacher_len]` (encoder+classifier;
    /// decoders have no teacher). Shares the student's batchnorm buffers.
    pub teacher: Vec<Rc<Tensor>>,
    pub opt: OptimizerState,
    pub step_counter: u64,
}

/// Builds a freshly initialized model: He-scaled convolution weights, unit
/// batchnorm scales, zeroed head projections (so an untrained classifier is
/// exactly uniform), and the teacher as a bit-for-bit copy of the student.
pub fn init_model(config: &ModelConfig, rng: &mut dyn RngCore) -> Result<ModelState, ModelError> {
    config.validate()?;
    let mut params = ParamStore::default();
    let mut buffers = BufferStore::default();
    let net = Network::build(config, &mut params, &mut buffers, rng);
    let teacher: Vec<Rc<Tensor>> =
        params.values[..net.teacher_len].iter().map(Rc::clone).collect();
    let opt = OptimizerState::zeros_like(&params);
    Ok(ModelState { config: config.clone(), net, params, buffers, teacher, opt, step_counter: 0 })
}

impl ModelState {
    pub fn teacher_value(&self, id: usize) -> &Tensor {
        &self.teacher[id]
    }

    /// Applies buffered batch statistics to the running estimates with
    /// momentum 0.99, in forward order.
    pub fn apply_bn_updates(&mut self, pending: Vec<PendingBnUpdate>) {
        const MOMENTUM: f64 = 0.99;
        for u in pending {
            for (buf, new) in [(u.mean_buf, u.stats.mean), (u.var_buf, u.stats.var)] {
                let old = &mut self.buffers.values[buf];
                let blended = old.mapv(|v| v * MOMENTUM)
                    + &(new.into_dyn().mapv(|v| v * (1.0 - MOMENTUM)));
                *old = blended;
            }
        }
    }
}
