//! Closed-form conditional SINR for a known channel.
//!
//! With a_m = w_kmᴴ h_km the desired power is
//! `p·[e2·Σ|a_m|² + e1²·Σ_{m≠m'} a_m a_m'^*]`, and the cross sum equals
//! `|Σa|² − Σ|a|²`, which is how it is evaluated here (the conjugate pairs
//! make it real).

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::beamform::{compute_weights, BeamformerWeights, CbfNormalization, Method};
use crate::cfo::{closed_moments, moments_empirical, CfoSpec, OmegaModel};
use crate::channel::{CMatrix, ChannelMatrix};
use crate::error::{Error, Result};
use crate::ofdm::Numerology;

/// dB floor used when a power or ratio is zero.
pub const DB_FLOOR: f64 = -100.0;

pub fn to_db(x: f64) -> f64 {
    if x.is_infinite() && x > 0.0 {
        f64::INFINITY
    } else if x > 0.0 {
        (10.0 * x.log10()).max(DB_FLOOR)
    } else {
        DB_FLOOR
    }
}

pub fn from_db(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MomentSource {
    ClosedUniform,
    ClosedNormal,
    ClosedFixed,
    Empirical,
}

/// e1 = E{Ω} (real), e2 = E{|Ω|²}.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentPair {
    pub e1: f64,
    pub e2: f64,
    pub source: MomentSource,
}

impl MomentPair {
    /// No CFO: e1 = e2 = 1.
    pub fn ideal() -> Self {
        Self {
            e1: 1.0,
            e2: 1.0,
            source: MomentSource::ClosedFixed,
        }
    }

    pub fn new(e1: f64, e2: f64, source: MomentSource) -> Self {
        Self { e1, e2, source }
    }

    pub fn closed(spec: &CfoSpec, n: usize, num: Numerology) -> Result<Self> {
        let (e1, e2) = closed_moments(spec, n, num)?;
        let source = match spec {
            CfoSpec::Fixed { .. } => MomentSource::ClosedFixed,
            CfoSpec::Uniform { .. } => MomentSource::ClosedUniform,
            CfoSpec::Normal { .. } => MomentSource::ClosedNormal,
        };
        Ok(Self { e1, e2, source })
    }

    pub fn empirical(
        spec: &CfoSpec,
        n: usize,
        num: Numerology,
        trials: usize,
        seed: u64,
        model: OmegaModel,
    ) -> Result<Self> {
        let m = moments_empirical(spec, n, num, trials, seed, model)?;
        Ok(Self {
            e1: m.e1,
            e2: m.e2,
            source: MomentSource::Empirical,
        })
    }

    /// 0 ≤ e1² ≤ e2 ≤ 1, with a small slack for sampled moments.
    pub fn is_consistent(&self) -> bool {
        let tol = 1e-9;
        self.e2 <= 1.0 + tol && self.e1 * self.e1 <= self.e2 + tol && self.e2 >= 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinrBreakdown {
    pub p_signal: f64,
    pub p_interference: f64,
    pub p_noise: f64,
    /// `f64::INFINITY` when both interference and noise vanish.
    pub sinr: f64,
    pub sinr_db: f64,
}

impl SinrBreakdown {
    pub fn from_powers(p_signal: f64, p_interference: f64, p_noise: f64) -> Self {
        let den = p_interference + p_noise;
        let sinr = if den > 0.0 {
            p_signal / den
        } else if p_signal > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        Self {
            p_signal,
            p_interference,
            p_noise,
            sinr,
            sinr_db: to_db(sinr),
        }
    }

    pub fn is_infinite(&self) -> bool {
        self.sinr.is_infinite()
    }

    /// dB value clamped into `[-100, +∞)`, with +∞ replaced by +100 for CSV.
    pub fn sinr_db_finite(&self) -> f64 {
        self.sinr_db.min(-DB_FLOOR)
    }
}

/// How the inter-user double sum is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InterferenceForm {
    /// Double sum over u, u' ≠ k as written, cross-user products included.
    #[default]
    Literal,
    /// Cross-user products dropped, as for independent zero-mean symbols.
    Independent,
}

fn check(h: &CMatrix, w: &BeamformerWeights, k: usize) -> Result<()> {
    if h.shape() != w.matrix().shape() {
        return Err(Error::DimensionMismatch(format!(
            "channel {:?} vs weights {:?}",
            h.shape(),
            w.matrix().shape()
        )));
    }
    if k >= h.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "user {k} of {}",
            h.ncols()
        )));
    }
    Ok(())
}

/// w_kmᴴ h_um for every dAP.
fn per_dap_gains(h: &CMatrix, w: &BeamformerWeights, k: usize, u: usize) -> Vec<Complex64> {
    let n = w.antennas_per_dap();
    (0..w.num_daps())
        .map(|m| {
            let wk = w.matrix().view((m * n, k), (n, 1));
            let hu = h.view((m * n, u), (n, 1));
            wk.dotc(&hu)
        })
        .collect()
}

/// `e2·Σ|x_m|² + e1²·(|Σx|² − Σ|x|²)`
fn coherence_form(x: &[Complex64], moments: &MomentPair) -> f64 {
    let sq: f64 = x.iter().map(|v| v.norm_sqr()).sum();
    let total = x.iter().sum::<Complex64>().norm_sqr();
    moments.e2 * sq + moments.e1 * moments.e1 * (total - sq)
}

pub fn signal_power(
    h: &CMatrix,
    w: &BeamformerWeights,
    k: usize,
    moments: &MomentPair,
    p_ul: f64,
) -> Result<f64> {
    check(h, w, k)?;
    Ok(p_ul * coherence_form(&per_dap_gains(h, w, k, k), moments))
}

pub fn interference_power(
    h: &CMatrix,
    w: &BeamformerWeights,
    k: usize,
    moments: &MomentPair,
    p_ul: f64,
) -> Result<f64> {
    interference_power_with(h, w, k, moments, p_ul, InterferenceForm::Literal)
}

pub fn interference_power_with(
    h: &CMatrix,
    w: &BeamformerWeights,
    k: usize,
    moments: &MomentPair,
    p_ul: f64,
    form: InterferenceForm,
) -> Result<f64> {
    check(h, w, k)?;
    let others = (0..h.ncols()).filter(|&u| u != k);
    let p = match form {
        InterferenceForm::Literal => {
            let mut v = vec![Complex64::new(0.0, 0.0); w.num_daps()];
            for u in others {
                for (acc, g) in v.iter_mut().zip(per_dap_gains(h, w, k, u)) {
                    *acc += g;
                }
            }
            coherence_form(&v, moments)
        }
        InterferenceForm::Independent => others
            .map(|u| coherence_form(&per_dap_gains(h, w, k, u), moments))
            .sum(),
    };
    Ok(p_ul * p.max(0.0))
}

/// σ_z²·Σ_m ‖w_km‖²
pub fn noise_power(w: &BeamformerWeights, k: usize, noise_var: f64) -> f64 {
    noise_var * w.matrix().column(k).norm_squared()
}

pub fn conditional_sinr(
    h: &CMatrix,
    w: &BeamformerWeights,
    k: usize,
    moments: &MomentPair,
    p_ul: f64,
    noise_var: f64,
) -> Result<SinrBreakdown> {
    conditional_sinr_with(h, w, k, moments, p_ul, noise_var, InterferenceForm::Literal)
}

pub fn conditional_sinr_with(
    h: &CMatrix,
    w: &BeamformerWeights,
    k: usize,
    moments: &MomentPair,
    p_ul: f64,
    noise_var: f64,
    form: InterferenceForm,
) -> Result<SinrBreakdown> {
    Ok(SinrBreakdown::from_powers(
        signal_power(h, w, k, moments, p_ul)?,
        interference_power_with(h, w, k, moments, p_ul, form)?,
        noise_power(w, k, noise_var),
    ))
}

/// Large-spread limit: E{Ω}² → 0.
///
/// The ratio equals `Σ|a_m|² / (Σ|v_m|² + σ²/(p·e2)·Σ‖w_km‖²)`; the
/// breakdown reports the undivided powers so that
/// `sinr = p_signal / (p_interference + p_noise)` still holds.
pub fn asymptotic_sinr(
    h: &CMatrix,
    w: &BeamformerWeights,
    k: usize,
    e2: f64,
    p_ul: f64,
    noise_var: f64,
) -> Result<SinrBreakdown> {
    let m = MomentPair::new(0.0, e2, MomentSource::Empirical);
    conditional_sinr(h, w, k, &m, p_ul, noise_var)
}

/// Per-user conditional SINR with powers averaged over `tones`, the
/// weights computed from the channel itself at each tone.
#[allow(clippy::too_many_arguments)]
pub fn tone_averaged_sinr(
    channel: &ChannelMatrix,
    tones: &[usize],
    method: Method,
    norm: CbfNormalization,
    moments: &MomentPair,
    p_ul: f64,
    noise_var: f64,
    form: InterferenceForm,
) -> Result<Vec<SinrBreakdown>> {
    if tones.is_empty() {
        return Err(Error::Empty);
    }
    let k_users = channel.num_users();
    let mut acc = vec![[0.0; 3]; k_users];
    for &l in tones {
        let h = channel.at(l);
        let w = compute_weights(method, h, channel.num_daps(), norm)?;
        for (k, a) in acc.iter_mut().enumerate() {
            let b = conditional_sinr_with(h, &w, k, moments, p_ul, noise_var, form)?;
            a[0] += b.p_signal;
            a[1] += b.p_interference;
            a[2] += b.p_noise;
        }
    }
    let t = tones.len() as f64;
    Ok(acc
        .iter()
        .map(|a| SinrBreakdown::from_powers(a[0] / t, a[1] / t, a[2] / t))
        .collect())
}
