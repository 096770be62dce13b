//! Cloud-type recognition from geostationary imagery: projection and
//! reprojection, scene matching, dataset preparation, a small autodiff
//! engine, the DIAnet segmentation network and its training and evaluation.

pub mod geo;
pub mod loss;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod prep;
pub mod scalar;
pub mod scene;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph32 = tensor::Graph<f32>;
pub type Graph64 = tensor::Graph<f64>;
pub type ParamStore32 = tensor::ParamStore<f32>;
pub type GeosParams64 = geo::GeosParams<f64>;
