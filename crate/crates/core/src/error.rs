use thiserror::Error;

use crate::{analysis, btpde, btspec, eig, fem, mesh, mf, seq};

/// Any failure raised by the simulation engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Mesh(#[from] mesh::MeshError),
    #[error(transparent)]
    Fem(#[from] fem::FemError),
    #[error(transparent)]
    Eig(#[from] eig::EigError),
    #[error(transparent)]
    Sequence(#[from] seq::SequenceError),
    #[error(transparent)]
    Signal(#[from] mf::SignalError),
    #[error(transparent)]
    Btpde(#[from] btpde::BtpdeError),
    #[error(transparent)]
    Spectral(#[from] btspec::SpectralError),
    #[error(transparent)]
    Analysis(#[from] analysis::AnalysisError),
}

impl Error {
    /// True for failures caused by bad inputs rather than numerics or IO.
    pub fn is_input_error(&self) -> bool {
        match self {
            Error::Mesh(e) => !matches!(e, mesh::MeshError::Io { .. }),
            Error::Sequence(_) | Error::Analysis(_) | Error::Fem(_) => true,
            Error::Eig(e) => matches!(e, eig::EigError::InvalidLengthScale(_)),
            _ => false,
        }
    }

    pub fn is_io_error(&self) -> bool {
        matches!(
            self,
            Error::Mesh(mesh::MeshError::Io { .. }) | Error::Eig(eig::EigError::Io(_))
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
