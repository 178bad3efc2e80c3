//! GDCUnet: a U-Net whose middle levels use offset-field deformable
//! convolutions (SAFDConv), with tape autodiff, training, metrics and data I/O.

pub mod autodiff;
pub mod container;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod grid;
pub mod kernels;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod offset;
pub mod optim;
pub mod safdconv;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod warp;

pub use error::{Error, Result};
pub use loss::LossConfig;
pub use metrics::{BinaryMask, MetricsReport};
pub use layers::ConvInit;
pub use model::{GdcUnetConfig, GdcUnetModel};
pub use safdconv::{SafdConvConfig, SafdHyper};
pub use scalar::Scalar;
pub use tensor::{Shape, Tensor};
pub use train::{cosine_lr, train, train_with, TrainConfig};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
