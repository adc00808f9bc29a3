//! Stereo radargrammetry: elevation maps from pairs of slant-range SAR
//! amplitude images.
//!
//! The reference image is cut into overlapping patches ([`tiling`]), each
//! patch is matched against the source image ([`poc`] or an external
//! matcher through [`bridge`]), the resulting flows are triangulated and
//! fused onto a latitude/longitude grid ([`reconstruct`]) and the map is
//! scored against a DSM ([`evalm`]). [`pipeline`] chains the stages.

pub mod geo;
pub mod poc;
pub mod raster;
pub mod synth;
pub mod tiling;
pub mod bridge;
pub mod reconstruct;
pub mod gtruth;
pub mod evalm;
pub mod pipeline;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    struct Overview;
    #[doc = include_str!("../../../book/src/geometry.md")]
    struct Geometry;
    #[doc = include_str!("../../../book/src/tiling.md")]
    struct Tiling;
    #[doc = include_str!("../../../book/src/matching.md")]
    struct Matching;
    #[doc = include_str!("../../../book/src/bridge.md")]
    struct Bridge;
    #[doc = include_str!("../../../book/src/reconstruction.md")]
    struct Reconstruction;
    #[doc = include_str!("../../../book/src/groundtruth.md")]
    struct GroundTruth;
    #[doc = include_str!("../../../book/src/evaluation.md")]
    struct Evaluation;
    #[doc = include_str!("../../../book/src/synthetic.md")]
    struct Synthetic;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
}
