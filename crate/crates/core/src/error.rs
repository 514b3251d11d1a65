use alloc::string::String;
use alloc::vec::Vec;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("lora rank {rank} exceeds min(d_in = {d_in}, d_out = {d_out})")]
    RankTooLarge {
        rank: usize,
        d_in: usize,
        d_out: usize,
    },
    #[error("lora rank must be at least 1")]
    ZeroRank,
    #[error("shape mismatch in {context}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("missing parameter `{0}`")]
    MissingParameter(String),
    #[error("non-finite loss at step {step}: cycle_l1 = {cycle_l1}, perceptual = {perceptual}, separation = {separation}")]
    NonFiniteLoss {
        step: u64,
        cycle_l1: f64,
        perceptual: f64,
        separation: f64,
    },
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn shape_mismatch(context: &str, expected: &[usize], found: &[usize]) -> Error {
    Error::ShapeMismatch {
        context: context.into(),
        expected: expected.to_vec(),
        found: found.to_vec(),
    }
}
