use dext_core::detector::DetectorError;
use dext_core::eval::EvalError;
use dext_core::formats::FormatError;
use dext_core::image::ImageError;
use dext_core::movis::MovisError;
use dext_core::ranking::RankingError;
use dext_core::saliency::SaliencyError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AppError {
    #[error("{0} not found")]
    NotFound(String),
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("{0}")]
    Internal(String),
}

impl AppError {
    pub fn internal(e: impl std::fmt::Display) -> Self {
        Self::Internal(e.to_string())
    }
}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> Self {
        Self::Internal(format!("io: {e}"))
    }
}

impl From<serde_json::Error> for AppError {
    fn from(e: serde_json::Error) -> Self {
        Self::Internal(format!("json: {e}"))
    }
}

impl From<ImageError> for AppError {
    fn from(e: ImageError) -> Self {
        match e {
            ImageError::Decode(_) | ImageError::BadLength { .. } => Self::Invalid(e.to_string()),
            ImageError::Encode(_) => Self::Internal(e.to_string()),
        }
    }
}

impl From<DetectorError> for AppError {
    fn from(e: DetectorError) -> Self {
        match e {
            DetectorError::InputSizeMismatch { .. } | DetectorError::InvalidConfig(_) => Self::Invalid(e.to_string()),
            DetectorError::Tensor(_) => Self::Internal(e.to_string()),
        }
    }
}

impl From<SaliencyError> for AppError {
    fn from(e: SaliencyError) -> Self {
        match e {
            SaliencyError::InvalidParams(_) | SaliencyError::TargetUnreachable(_) => Self::Invalid(e.to_string()),
            _ => Self::Internal(e.to_string()),
        }
    }
}

impl From<EvalError> for AppError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::BadFraction(_) | EvalError::BadCode(_) => Self::Invalid(e.to_string()),
            _ => Self::Internal(e.to_string()),
        }
    }
}

impl From<MovisError> for AppError {
    fn from(e: MovisError) -> Self {
        match e {
            MovisError::BadQuantile(_) | MovisError::InvalidParam(_) => Self::Invalid(e.to_string()),
            _ => Self::Internal(e.to_string()),
        }
    }
}

impl From<RankingError> for AppError {
    fn from(e: RankingError) -> Self {
        match e {
            RankingError::EmptyLedger => Self::NotFound("ranking".into()),
            RankingError::Log { .. } => Self::Internal(e.to_string()),
            _ => Self::Invalid(e.to_string()),
        }
    }
}

impl From<FormatError> for AppError {
    fn from(e: FormatError) -> Self {
        Self::Invalid(e.to_string())
    }
}

pub type AppResult<T> = Result<T, AppError>;
