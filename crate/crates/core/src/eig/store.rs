//! Little-endian binary container for [`LaplaceEig`].
//!
//! Layout: magic `MFEIG001`, u64 N_v, u64 N_eig, f64 D₀, f64 l_s_min,
//! 32-byte mesh fingerprint, f64 λ[N_eig], f64 P column-major.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use super::{EigError, LaplaceEig};

pub const MAGIC: &[u8; 8] = b"MFEIG001";

const HEADER_LEN: usize = 8 + 8 + 8 + 8 + 8 + 32;

pub fn write_eig(eig: &LaplaceEig, mut out: impl Write) -> Result<(), EigError> {
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * eig.neig() * (eig.n_nodes() + 1));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(eig.n_nodes() as u64).to_le_bytes());
    buf.extend_from_slice(&(eig.neig() as u64).to_le_bytes());
    buf.extend_from_slice(&eig.d0.to_le_bytes());
    buf.extend_from_slice(&eig.ls_min.to_le_bytes());
    buf.extend_from_slice(&eig.fingerprint);
    for l in &eig.lambdas {
        buf.extend_from_slice(&l.to_le_bytes());
    }
    for v in eig.vectors.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Parses a container. With `expected` set, refuses a different mesh.
pub fn read_eig(mut input: impl Read, expected: Option<&[u8; 32]>) -> Result<LaplaceEig, EigError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < HEADER_LEN {
        return Err(EigError::Format("truncated header".into()));
    }
    if &bytes[..8] != MAGIC {
        return Err(EigError::Format("bad magic or version".into()));
    }
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let nv = u64_at(8) as usize;
    let neig = u64_at(16) as usize;
    let d0 = f64_at(24);
    let ls_min = f64_at(32);
    let fingerprint: [u8; 32] = bytes[40..72].try_into().unwrap();
    let body = neig
        .checked_mul(nv.checked_add(1).ok_or_else(|| EigError::Format("size overflow".into()))?)
        .and_then(|v| v.checked_mul(8))
        .ok_or_else(|| EigError::Format("size overflow".into()))?;
    if bytes.len() != HEADER_LEN + body {
        return Err(EigError::Format(format!(
            "expected {} bytes, found {}",
            HEADER_LEN + body,
            bytes.len()
        )));
    }
    if let Some(fp) = expected {
        if fp != &fingerprint {
            return Err(EigError::FingerprintMismatch);
        }
    }
    let lambdas = (0..neig).map(|i| f64_at(HEADER_LEN + 8 * i)).collect();
    let base = HEADER_LEN + 8 * neig;
    let vectors = DMatrix::from_iterator(nv, neig, (0..nv * neig).map(|i| f64_at(base + 8 * i)));
    Ok(LaplaceEig {
        lambdas,
        vectors,
        d0,
        ls_min,
        fingerprint,
    })
}

pub fn save_eig(eig: &LaplaceEig, path: &Path) -> Result<(), EigError> {
    let mut buf = Vec::new();
    write_eig(eig, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_eig(path: &Path, expected: Option<&[u8; 32]>) -> Result<LaplaceEig, EigError> {
    read_eig(fs::File::open(path)?, expected)
}
