//! Errors carrying their process exit status.

use panohdr::datagen::DatagenError;
use panohdr::eval::MatchError;
use panohdr::itmo::ItmoError;
use panohdr::net::NetError;
use panohdr::pano::io::ImageIoError;
use panohdr::pano::PanoError;
use panohdr::sun::SunError;
use panohdr::training::TrainError;
use panohdr::transport::TransportError;

pub const USAGE: i32 = 1;
pub const DATA: i32 = 2;
pub const NUMERICAL: i32 = 3;

#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub error: anyhow::Error,
}

pub type Fallible<T> = Result<T, Failure>;

impl Failure {
    pub fn usage(e: impl Into<anyhow::Error>) -> Self {
        Self { code: USAGE, error: e.into() }
    }

    pub fn data(e: impl Into<anyhow::Error>) -> Self {
        Self { code: DATA, error: e.into() }
    }

    pub fn numerical(e: impl Into<anyhow::Error>) -> Self {
        Self { code: NUMERICAL, error: e.into() }
    }
}

impl From<DatagenError> for Failure {
    fn from(e: DatagenError) -> Self {
        match e {
            DatagenError::Params(_) | DatagenError::Fractions(_) => Self::usage(e),
            _ => Self::data(e),
        }
    }
}

impl From<NetError> for Failure {
    fn from(e: NetError) -> Self {
        match e {
            NetError::Config(_) => Self::usage(e),
            _ => Self::data(e),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => Self::numerical(e),
            TrainError::Config(_) => Self::usage(e),
            TrainError::Net(n) => n.into(),
            _ => Self::data(e),
        }
    }
}

impl From<MatchError> for Failure {
    fn from(e: MatchError) -> Self {
        match e {
            MatchError::EmptyCorpus | MatchError::DuplicateId(_) => Self::data(e),
            _ => Self::usage(e),
        }
    }
}

macro_rules! data_errors {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Self::data(e)
            }
        }
    )*};
}

data_errors!(ImageIoError, TransportError, ItmoError, SunError, PanoError, std::io::Error, csv::Error);
