use alloc::string::String;

/// Errors raised by the layout model and diffusion algebra.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("unknown class index {index} (taxonomy has {classes} classes)")]
    UnknownClass { index: usize, classes: usize },
    #[error("unknown class name `{0}`")]
    UnknownClassName(String),
    #[error("{tier} tier holds at most {cap} objects, got {count}")]
    Overflow {
        tier: &'static str,
        cap: usize,
        count: usize,
    },
    #[error("layout shape mismatch: expected {expected} values, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("normalization scale must be positive, got {0}")]
    BadScale(f64),
    #[error("timestep {t} outside [1, {steps}]")]
    Timestep { t: usize, steps: usize },
    #[error("invalid noise schedule: {0}")]
    Schedule(&'static str),
    #[error("relation type {0} outside [0, 7)")]
    RelationType(u8),
    #[error("invalid edge {src} -> {dst} over {vertices} vertices")]
    Edge {
        src: usize,
        dst: usize,
        vertices: usize,
    },
    #[error("invalid room: {0}")]
    Room(&'static str),
    #[error("invalid taxonomy: {0}")]
    Taxonomy(&'static str),
}

pub type Result<T> = core::result::Result<T, Error>;
