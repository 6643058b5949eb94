//! Receive combining: conjugate (CBF) and zero-forcing (ZF) weights and
//! the distributed combiner ŝ_k = Σ_m w_kmᴴ y_m.

use nalgebra::SymmetricEigen;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::{write_binary_blocks, write_csv_blocks, CMatrix, CVector};
use crate::error::{Error, Result};

/// Largest Gram-matrix condition number accepted by ZF.
pub const ZF_CONDITION_LIMIT: f64 = 1e10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[default]
    Cbf,
    /// Pseudo-inverse of the stacked channel across all dAPs.
    ZfCentral,
    /// Per-dAP pseudo-inverse of H_m.
    ZfLocal,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Cbf => "cbf",
            Method::ZfCentral => "zf-central",
            Method::ZfLocal => "zf-local",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cbf" => Ok(Method::Cbf),
            "zf" | "zf-central" => Ok(Method::ZfCentral),
            "zf-local" => Ok(Method::ZfLocal),
            other => Err(Error::InvalidConfig(format!(
                "unknown beamformer `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CbfNormalization {
    /// w_km = h_km / ‖h_km‖
    #[default]
    UnitNorm,
    /// w_km = h_km
    None,
}

/// Stacked `(M·N) × K` weights; column k holds w_k1, …, w_kM.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamformerWeights {
    pub method: Method,
    num_daps: usize,
    antennas_per_dap: usize,
    w: CMatrix,
}

impl BeamformerWeights {
    pub fn from_matrix(method: Method, num_daps: usize, w: CMatrix) -> Result<Self> {
        if num_daps == 0 || w.nrows() % num_daps != 0 {
            return Err(Error::DimensionMismatch(format!(
                "{} weight rows do not split into {num_daps} dAPs",
                w.nrows()
            )));
        }
        Ok(Self {
            method,
            num_daps,
            antennas_per_dap: w.nrows() / num_daps,
            w,
        })
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.w
    }

    pub fn num_daps(&self) -> usize {
        self.num_daps
    }

    pub fn antennas_per_dap(&self) -> usize {
        self.antennas_per_dap
    }

    pub fn num_users(&self) -> usize {
        self.w.ncols()
    }

    pub fn w_km(&self, k: usize, m: usize) -> CVector {
        let n = self.antennas_per_dap;
        self.w.view((m * n, k), (n, 1)).column(0).into_owned()
    }

    /// Same layout as [`ChannelMatrix::write_binary`](crate::channel::ChannelMatrix::write_binary)
    /// with N_sc = 1.
    pub fn write_binary<W: std::io::Write>(&self, mut out: W) -> Result<()> {
        write_binary_blocks(
            &mut out,
            self.num_daps,
            self.antennas_per_dap,
            1,
            std::iter::once(&self.w),
        )
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        write_csv_blocks(out, std::iter::once(&self.w))
    }
}

fn split(h: &CMatrix, num_daps: usize) -> Result<usize> {
    if num_daps == 0 || h.nrows() % num_daps != 0 {
        return Err(Error::DimensionMismatch(format!(
            "{} channel rows do not split into {num_daps} dAPs",
            h.nrows()
        )));
    }
    Ok(h.nrows() / num_daps)
}

pub fn cbf_weights(
    h: &CMatrix,
    num_daps: usize,
    norm: CbfNormalization,
) -> Result<BeamformerWeights> {
    let n = split(h, num_daps)?;
    let mut w = h.clone();
    for k in 0..h.ncols() {
        for m in 0..num_daps {
            let mut block = w.view_mut((m * n, k), (n, 1));
            let len = block.norm();
            if len == 0.0 {
                return Err(Error::ZeroChannel { user: k, dap: m });
            }
            if norm == CbfNormalization::UnitNorm {
                block /= Complex64::new(len, 0.0);
            }
        }
    }
    BeamformerWeights::from_matrix(Method::Cbf, num_daps, w)
}

/// H (HᴴH)⁻¹, rejecting ill-conditioned Gram matrices.
fn pseudo_inverse_columns(h: &CMatrix) -> Result<CMatrix> {
    if h.nrows() < h.ncols() {
        return Err(Error::Singular {
            cond: f64::INFINITY,
        });
    }
    let gram = h.adjoint() * h;
    let eig = SymmetricEigen::new(gram.clone());
    let max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let min = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let cond = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(cond <= ZF_CONDITION_LIMIT) {
        return Err(Error::Singular { cond });
    }
    let inv = gram.cholesky().ok_or(Error::Singular { cond })?.inverse();
    Ok(h * inv)
}

pub fn zf_weights(h: &CMatrix, num_daps: usize, method: Method) -> Result<BeamformerWeights> {
    let n = split(h, num_daps)?;
    let w = match method {
        Method::ZfCentral => pseudo_inverse_columns(h)?,
        Method::ZfLocal => {
            let mut w = CMatrix::zeros(h.nrows(), h.ncols());
            for m in 0..num_daps {
                let wm = pseudo_inverse_columns(&h.rows(m * n, n).into_owned())?;
                w.rows_mut(m * n, n).copy_from(&wm);
            }
            w
        }
        Method::Cbf => {
            return Err(Error::InvalidConfig("zf_weights called with CBF".into()));
        }
    };
    BeamformerWeights::from_matrix(method, num_daps, w)
}

pub fn compute_weights(
    method: Method,
    h: &CMatrix,
    num_daps: usize,
    cbf_norm: CbfNormalization,
) -> Result<BeamformerWeights> {
    match method {
        Method::Cbf => cbf_weights(h, num_daps, cbf_norm),
        _ => zf_weights(h, num_daps, method),
    }
}

/// ŝ = Wᴴ y.
pub fn combine(weights: &BeamformerWeights, y: &CVector) -> Result<CVector> {
    if y.len() != weights.w.nrows() {
        return Err(Error::LengthMismatch {
            expected: weights.w.nrows(),
            actual: y.len(),
        });
    }
    Ok(weights.w.ad_mul(y))
}
