pub mod cli;
pub mod energy;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod partition;
pub mod sampler;
pub mod sphere;
pub mod synthgen;
pub mod runner;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/sphere.md")]
    mod sphere {}
    #[doc = include_str!("../../../book/src/energy.md")]
    mod energy {}
    #[doc = include_str!("../../../book/src/sampler.md")]
    mod sampler {}
    #[doc = include_str!("../../../book/src/partition.md")]
    mod partition {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/synthgen.md")]
    mod synthgen {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
}
