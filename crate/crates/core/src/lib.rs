pub mod autodiff;
pub mod decode;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod synth;
pub mod training;
pub mod transcript;
pub mod vocab;
