//! Text-guided infrared/visible image fusion under adverse weather.

pub mod autodiff;
pub mod backbone;
pub mod commands;
pub mod decoder;
pub mod error;
pub mod gtpm;
pub mod imagecore;
pub mod losses;
pub mod ltpm;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod textcond;
pub mod trainer;
pub mod weathersim;

pub use error::{Error, Result};
pub use tensor::Tensor;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/images.md")]
    mod images {}
    #[doc = include_str!("../../../book/src/text.md")]
    mod text {}
    #[doc = include_str!("../../../book/src/global-branch.md")]
    mod global_branch {}
    #[doc = include_str!("../../../book/src/backbone.md")]
    mod backbone {}
    #[doc = include_str!("../../../book/src/local-branch.md")]
    mod local_branch {}
    #[doc = include_str!("../../../book/src/decoder.md")]
    mod decoder {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/weather.md")]
    mod weather {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../README.md")]
    mod readme {}
}
