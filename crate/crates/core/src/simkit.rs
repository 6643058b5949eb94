//! Monte Carlo link-level engine.
//!
//! A trial draws a channel, per-dAP offsets and user data, sends each
//! user's two LTS symbols in its own pilot slot at the synchronization
//! instant, then a slot of data symbols from all users at once. Data symbol
//! `n` starts `n·(N_sc+L_cp)` samples after that instant and carries the
//! phase accumulated since.
//!
//! SINR is measured genie-style: the combiner output of user k is split
//! into the coherent desired term `(Σ_m Ω_m w_kmᴴ h_km)·s_k`, the residue of
//! user k's own signal (ICI), the other users' terms (IUI) and noise. Point
//! SINR is the ratio of trial-averaged powers.

use std::io::Write;

use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytic::{
    asymptotic_sinr, conditional_sinr_with, InterferenceForm, MomentPair, SinrBreakdown,
};
use crate::beamform::{combine, compute_weights, BeamformerWeights, CbfNormalization, Method};
use crate::cfo::{omega_exact, CfoSpec};
use crate::channel::{
    complex_gaussian, propagate_exact, rayleigh_channel_with, CMatrix, CVector, CfoRealization,
    ChannelMatrix, Correlation, Fading, NoiseSpec,
};
use crate::error::{Error, Result};
use crate::ofdm::{
    lts_spectrum, subcarrier_map, MapProfile, Modulation, Numerology, OfdmModem, SubcarrierGrid,
    SubcarrierMap, SystemConfig, TimeSignal,
};
use crate::seed::{derive_seed, rng_for, KahanSum};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PropagationModel {
    /// Time-domain CFO, full ICI.
    #[default]
    Exact,
    /// Per-subcarrier Ω gain.
    Simplified,
}

impl PropagationModel {
    pub fn name(&self) -> &'static str {
        match self {
            PropagationModel::Exact => "exact",
            PropagationModel::Simplified => "simplified",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Csi {
    /// LS estimate from the received LTS pilots.
    #[default]
    Estimated,
    /// The true channel.
    Perfect,
}

/// Everything needed to run a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    pub config: SystemConfig,
    /// Distribution family; its parameter is replaced by each entry of `params`.
    pub cfo: CfoSpec,
    pub params: Vec<f64>,
    /// Data-symbol indices to report, each below `config.slot_symbols`.
    pub symbols: Vec<usize>,
    pub method: Method,
    pub cbf_normalization: CbfNormalization,
    pub trials: usize,
    pub seed: u64,
    pub model: PropagationModel,
    pub csi: Csi,
    pub phase_correction: bool,
    pub fading: Fading,
    pub map: MapProfile,
    pub interference: InterferenceForm,
    /// Reuse one channel for every trial instead of redrawing it.
    pub fixed_channel: bool,
    /// Channel used by every trial when set (implies `fixed_channel`).
    #[serde(skip)]
    pub channel: Option<ChannelMatrix>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            config: SystemConfig::default().with_snr_db(20.0),
            cfo: CfoSpec::Normal { beta: 0.0 },
            params: vec![0.005, 0.01, 0.02, 0.03, 0.05],
            symbols: vec![1, 5, 9],
            method: Method::Cbf,
            cbf_normalization: CbfNormalization::UnitNorm,
            trials: 1000,
            seed: 1,
            model: PropagationModel::Exact,
            csi: Csi::Estimated,
            phase_correction: false,
            fading: Fading::Flat,
            map: MapProfile::Ieee80211,
            interference: InterferenceForm::Literal,
            fixed_channel: false,
            channel: None,
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.trials == 0 {
            return Err(Error::InvalidConfig("trials must be >= 1".into()));
        }
        if self.params.is_empty() {
            return Err(Error::InvalidConfig("params must not be empty".into()));
        }
        if self.symbols.is_empty() {
            return Err(Error::InvalidConfig("symbols must not be empty".into()));
        }
        for &p in &self.params {
            self.cfo.with_param(p).validate()?;
        }
        if let Some(&n) = self
            .symbols
            .iter()
            .find(|&&n| n >= self.config.slot_symbols)
        {
            return Err(Error::InvalidConfig(format!(
                "symbol index {n} is outside the slot of {} data symbols",
                self.config.slot_symbols
            )));
        }
        if matches!(self.method, Method::ZfCentral)
            && self.config.total_antennas() < self.config.num_users
        {
            return Err(Error::InvalidConfig("central ZF needs M·N >= K".into()));
        }
        if matches!(self.method, Method::ZfLocal)
            && self.config.antennas_per_dap < self.config.num_users
        {
            return Err(Error::InvalidConfig("local ZF needs N >= K".into()));
        }
        if let Some(h) = &self.channel {
            let c = &self.config;
            if h.num_daps() != c.num_daps
                || h.antennas_per_dap() != c.antennas_per_dap
                || h.num_users() != c.num_users
                || h.num_subcarriers() != c.num_subcarriers
            {
                return Err(Error::DimensionMismatch(
                    "supplied channel does not match config".into(),
                ));
            }
        }
        subcarrier_map(self.config.num_subcarriers, &self.map)?;
        Ok(())
    }
}

/// Genie decomposition of one combiner output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenieParts {
    pub signal: Complex64,
    pub ici: Complex64,
    pub iui: Complex64,
    pub noise: Complex64,
}

impl GenieParts {
    pub fn total(&self) -> Complex64 {
        self.signal + self.ici + self.iui + self.noise
    }
}

/// Splits user k's combiner output into its genie components.
///
/// `per_user[u]` is user u's received vector and `coherent` is
/// Σ_m Ω_m w_kmᴴ h_km.
pub fn genie_split(
    w: &BeamformerWeights,
    k: usize,
    per_user: &[CVector],
    noise: &CVector,
    coherent: Complex64,
    s_k: Complex64,
) -> GenieParts {
    let wk = w.matrix().column(k);
    let own = wk.dotc(&per_user[k]);
    let signal = coherent * s_k;
    let iui = per_user
        .iter()
        .enumerate()
        .filter(|(u, _)| *u != k)
        .map(|(_, y)| wk.dotc(y))
        .sum();
    GenieParts {
        signal,
        ici: own - signal,
        iui,
        noise: wk.dotc(noise),
    }
}

/// Σ_m Ω_m[n] w_kmᴴ h_km with exact Ω.
fn coherent_gain(
    h: &CMatrix,
    w: &BeamformerWeights,
    k: usize,
    cfo: &CfoRealization,
    n: usize,
    num: Numerology,
) -> Complex64 {
    let np = w.antennas_per_dap();
    (0..w.num_daps())
        .map(|m| {
            let om = omega_exact(cfo.eps(k, m), n, num).omega;
            let wk = w.matrix().view((m * np, k), (np, 1));
            om * wk.dotc(&h.view((m * np, k), (np, 1)))
        })
        .sum()
}

/// Genie SINR per user on one data symbol of the simplified model, averaged
/// over the data subcarriers of `map`. Symbols are random QPSK scaled to
/// `ul_power`.
pub fn measure_sinr_genie(
    channel: &ChannelMatrix,
    weights: &BeamformerWeights,
    cfo: &CfoRealization,
    noise: &NoiseSpec,
    n: usize,
    map: &SubcarrierMap,
    config: &SystemConfig,
) -> Result<Vec<SinrBreakdown>> {
    let k_users = channel.num_users();
    let num = config.numerology();
    let mut rng = noise.rng();
    let amp = config.ul_power.sqrt();
    let mut acc = vec![[KahanSum::default(); 3]; k_users];
    for &l in map.data_indices() {
        let h = channel.at(l);
        let s: Vec<Complex64> = (0..k_users).map(|_| random_qpsk(&mut rng) * amp).collect();
        let per_user = simplified_components(h, channel.antennas_per_dap(), cfo, n, num, &s);
        let z = CVector::from_fn(h.nrows(), |_, _| complex_gaussian(&mut rng, noise.variance));
        for (k, a) in acc.iter_mut().enumerate() {
            let c = coherent_gain(h, weights, k, cfo, n, num);
            let g = genie_split(weights, k, &per_user, &z, c, s[k]);
            a[0].add(g.signal.norm_sqr());
            a[1].add((g.iui + g.ici).norm_sqr());
            a[2].add(g.noise.norm_sqr());
        }
    }
    let cnt = map.data_indices().len().max(1) as f64;
    Ok(acc
        .iter()
        .map(|a| {
            SinrBreakdown::from_powers(a[0].value() / cnt, a[1].value() / cnt, a[2].value() / cnt)
        })
        .collect())
}

fn simplified_components(
    h: &CMatrix,
    np: usize,
    cfo: &CfoRealization,
    n: usize,
    num: Numerology,
    s: &[Complex64],
) -> Vec<CVector> {
    (0..h.ncols())
        .map(|u| {
            CVector::from_fn(h.nrows(), |r, _| {
                omega_exact(cfo.eps(u, r / np), n, num).omega * h[(r, u)] * s[u]
            })
        })
        .collect()
}

fn random_qpsk<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    Modulation::Qpsk.map(&[rng.random(), rng.random()]).unwrap()[0]
}

/// Root-mean-square error vector magnitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvmReport {
    pub evm_rms: f64,
    /// 10·log10(1/EVM_rms); +∞ when the error is zero.
    pub evm_snr_db: f64,
    pub avg_energy: f64,
    pub num_symbols: usize,
    pub modulation_order: usize,
}

impl EvmReport {
    fn from_error(err_sum: f64, count: usize, modulation: Modulation) -> Self {
        let p0 = modulation.average_energy();
        let evm = (err_sum / (p0 * count as f64)).sqrt();
        Self {
            evm_rms: evm,
            evm_snr_db: if evm > 0.0 {
                -20.0 * evm.log10()
            } else {
                f64::INFINITY
            },
            avg_energy: p0,
            num_symbols: count,
            modulation_order: modulation.order(),
        }
    }
}

pub fn evm_rms(tx: &[Complex64], rx: &[Complex64], modulation: Modulation) -> Result<EvmReport> {
    if tx.is_empty() {
        return Err(Error::Empty);
    }
    if tx.len() != rx.len() {
        return Err(Error::LengthMismatch {
            expected: tx.len(),
            actual: rx.len(),
        });
    }
    let err: KahanSum = tx.iter().zip(rx).map(|(a, b)| (a - b).norm_sqr()).collect();
    Ok(EvmReport::from_error(err.value(), tx.len(), modulation))
}

/// Common phase of one symbol from its pilot tones.
fn pilot_phase(row: &[Complex64], map: &SubcarrierMap) -> Result<Complex64> {
    if map.pilot_indices().is_empty() {
        return Err(Error::ZeroPilots);
    }
    let corr: Complex64 = map
        .pilot_indices()
        .iter()
        .zip(map.pilot_values())
        .map(|(&l, r)| row[l] * r.conj())
        .sum();
    if corr.norm() == 0.0 {
        return Err(Error::ZeroPilots);
    }
    Ok(corr / corr.norm())
}

pub(crate) fn derotate_row(row: &mut [Complex64], map: &SubcarrierMap) -> Result<()> {
    let rot = pilot_phase(row, map)?.conj();
    row.iter_mut().for_each(|v| *v *= rot);
    Ok(())
}

/// De-rotates every symbol by the phase of Σ pilot_rx·pilot_ref*.
pub fn residual_phase_correction(grid: &SubcarrierGrid) -> Result<SubcarrierGrid> {
    let mut out = grid.clone();
    for row in out.symbols.iter_mut() {
        derotate_row(row, &grid.map)?;
    }
    Ok(out)
}

/// Accumulated results of one trial at one (symbol, user).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PointStats {
    /// Mean over data subcarriers of |signal|², |IUI|², |ICI|², |noise|².
    pub sim: [f64; 4],
    /// Mean |ŝ_k|² of the full combiner output.
    pub total: f64,
    /// Closed-form powers (signal, interference, noise), same averaging.
    pub anlt: [f64; 3],
    pub asym: [f64; 3],
    /// Σ|s/√p − ŝ_eq|² over data subcarriers and its count.
    pub evm_err: f64,
    pub evm_count: usize,
}

impl PointStats {
    pub fn sim_sinr(&self) -> SinrBreakdown {
        SinrBreakdown::from_powers(self.sim[0], self.sim[1] + self.sim[2], self.sim[3])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    /// `stats[i][k]` for symbol index `symbols[i]` and user `k`.
    pub stats: Vec<Vec<PointStats>>,
    pub symbols: Vec<usize>,
    pub cfo: CfoRealization,
}

impl TrialResult {
    pub fn user_sinr(&self, i: usize, k: usize) -> SinrBreakdown {
        self.stats[i][k].sim_sinr()
    }

    pub fn evm(&self, i: usize, k: usize) -> f64 {
        let s = &self.stats[i][k];
        (s.evm_err / s.evm_count.max(1) as f64).sqrt()
    }
}

/// Static per-sweep data shared by trials.
pub struct TrialSetup {
    pub config: SystemConfig,
    pub map: SubcarrierMap,
    pub modem: OfdmModem,
    pub method: Method,
    pub cbf_normalization: CbfNormalization,
    pub model: PropagationModel,
    pub csi: Csi,
    pub phase_correction: bool,
    pub fading: Fading,
    pub interference: InterferenceForm,
    pub symbols: Vec<usize>,
    pub channel: Option<ChannelMatrix>,
    pilot: Vec<Complex64>,
}

impl TrialSetup {
    pub fn from_spec(spec: &SweepSpec) -> Result<Self> {
        spec.validate()?;
        let cfg = spec.config.clone();
        let map = subcarrier_map(cfg.num_subcarriers, &spec.map)?;
        let channel = match (&spec.channel, spec.fixed_channel) {
            (Some(h), _) => Some(h.clone()),
            (None, true) => {
                let mut rng = rng_for(spec.seed, STREAM_FIXED_CHANNEL, 0);
                Some(rayleigh_channel_with(
                    &cfg,
                    spec.fading,
                    &Correlation::None,
                    &mut rng,
                )?)
            }
            (None, false) => None,
        };
        let pilot = pilot_reference(&cfg, &map);
        Ok(Self {
            modem: OfdmModem::from_config(&cfg),
            map,
            method: spec.method,
            cbf_normalization: spec.cbf_normalization,
            model: spec.model,
            csi: spec.csi,
            phase_correction: spec.phase_correction,
            fading: spec.fading,
            interference: spec.interference,
            symbols: spec.symbols.clone(),
            channel,
            config: cfg,
            pilot,
        })
    }
}

/// LTS when the map occupies exactly the LTS tones, otherwise all-ones on
/// the occupied tones.
pub(crate) fn pilot_reference(cfg: &SystemConfig, map: &SubcarrierMap) -> Vec<Complex64> {
    let occ = map.occupied_indices();
    if cfg.num_subcarriers == 64 {
        let lts = lts_spectrum();
        let lts_occ: Vec<usize> = (0..64).filter(|&l| lts[l] != ZERO).collect();
        if lts_occ == occ {
            return lts;
        }
    }
    (0..cfg.num_subcarriers)
        .map(|l| {
            if occ.contains(&l) {
                Complex64::new(1.0, 0.0)
            } else {
                ZERO
            }
        })
        .collect()
}

const STREAM_CHANNEL: u64 = 1;
const STREAM_CFO: u64 = 2;
const STREAM_DATA: u64 = 3;
const STREAM_PILOT_NOISE: u64 = 4;
const STREAM_DATA_NOISE: u64 = 5;
const STREAM_FIXED_CHANNEL: u64 = 6;

/// LS estimate from two received pilot spectra: ((y0 + y1)/2)/x. Tones whose
/// reference is zero are `None`.
pub fn ls_estimate(
    y0: &[Complex64],
    y1: &[Complex64],
    reference: &[Complex64],
) -> Vec<Option<Complex64>> {
    y0.iter()
        .zip(y1)
        .zip(reference)
        .map(|((a, b), x)| {
            if *x == ZERO {
                None
            } else {
                Some((a + b) / (2.0 * x))
            }
        })
        .collect()
}

pub(crate) fn user_grid<R: Rng + ?Sized>(
    rng: &mut R,
    map: &SubcarrierMap,
    n_sym: usize,
    amp: f64,
) -> Vec<Vec<Complex64>> {
    (0..n_sym)
        .map(|_| {
            let mut row = vec![ZERO; map.len()];
            for &l in map.data_indices() {
                row[l] = random_qpsk(rng) * amp;
            }
            for (&l, v) in map.pilot_indices().iter().zip(map.pilot_values()) {
                row[l] = v * amp;
            }
            row
        })
        .collect()
}

/// One Monte Carlo trial at the CFO distribution `cfo_spec`.
pub fn run_trial(setup: &TrialSetup, cfo_spec: &CfoSpec, seed: u64) -> Result<TrialResult> {
    let cfg = &setup.config;
    let num = cfg.numerology();
    let (k_users, m_daps, np) = (cfg.num_users, cfg.num_daps, cfg.antennas_per_dap);
    let n_ant = m_daps * np;
    let n_sc = cfg.num_subcarriers;
    let amp = cfg.ul_power.sqrt();
    let sigma2 = cfg.noise_var;

    let channel = match &setup.channel {
        Some(h) => h.clone(),
        None => {
            let mut rng = rng_for(seed, STREAM_CHANNEL, 0);
            rayleigh_channel_with(cfg, setup.fading, &Correlation::None, &mut rng)?
        }
    };
    let cfo = CfoRealization::draw(cfo_spec, m_daps, &mut rng_for(seed, STREAM_CFO, 0));
    let mut data_rng = rng_for(seed, STREAM_DATA, 0);
    let grids: Vec<Vec<Vec<Complex64>>> = (0..k_users)
        .map(|_| user_grid(&mut data_rng, &setup.map, cfg.slot_symbols, amp))
        .collect();

    // channel state used for the weights, per subcarrier
    let tones = setup.map.occupied_indices();
    let h_est: Vec<Option<CMatrix>> = match setup.csi {
        Csi::Perfect => (0..n_sc)
            .map(|l| tones.contains(&l).then(|| channel.at(l).clone()))
            .collect(),
        Csi::Estimated => estimate_trial_channel(setup, &channel, amp, seed)?,
    };
    let weights: Vec<Option<BeamformerWeights>> = h_est
        .iter()
        .map(|h| {
            h.as_ref()
                .map(|h| compute_weights(setup.method, h, m_daps, setup.cbf_normalization))
                .transpose()
        })
        .collect::<Result<_>>()?;

    // received data, split per user, on every needed symbol
    let max_n = *setup.symbols.iter().max().unwrap();
    let noise_seed = derive_seed(seed, STREAM_DATA_NOISE, 0);
    let received: Vec<ReceivedSymbol> = match setup.model {
        PropagationModel::Exact => {
            let tx: Vec<TimeSignal> = grids
                .iter()
                .map(|g| setup.modem.modulate_rows(g))
                .collect::<Result<_>>()?;
            let noise = NoiseSpec::new(sigma2, noise_seed)?;
            let comps = propagate_exact(&tx, &channel, &cfo, &noise, num, 0)?;
            let demod = |sig: &TimeSignal, n: usize| setup.modem.demodulate_symbol(sig.symbol(n));
            setup
                .symbols
                .iter()
                .map(|&n| {
                    let per_user = comps
                        .per_user
                        .iter()
                        .map(|ants| ants.iter().map(|a| demod(a, n)).collect::<Result<Vec<_>>>())
                        .collect::<Result<Vec<_>>>()?;
                    let noise = comps
                        .noise
                        .iter()
                        .map(|a| demod(a, n))
                        .collect::<Result<Vec<_>>>()?;
                    Ok(ReceivedSymbol::Spectra { per_user, noise })
                })
                .collect::<Result<_>>()?
        }
        PropagationModel::Simplified => {
            let mut rng = rng_for(noise_seed, 0, 0);
            // draw noise for every symbol up to max_n so the stream does not
            // depend on which symbols are reported
            let all: Vec<Vec<CVector>> = (0..=max_n)
                .map(|_| {
                    (0..n_sc)
                        .map(|_| CVector::from_fn(n_ant, |_, _| complex_gaussian(&mut rng, sigma2)))
                        .collect()
                })
                .collect();
            setup
                .symbols
                .iter()
                .map(|&n| ReceivedSymbol::Noise(all[n].clone()))
                .collect()
        }
    };

    let mut stats = Vec::with_capacity(setup.symbols.len());
    for (i, &n) in setup.symbols.iter().enumerate() {
        let moments = MomentPair::closed(cfo_spec, n, num)?;
        let mut acc = vec![StatAcc::default(); k_users];
        let mut eq_rows = vec![vec![ZERO; n_sc]; k_users];
        for &l in &tones {
            let w = weights[l].as_ref().unwrap();
            let h = channel.at(l);
            let s_l: Vec<Complex64> = (0..k_users).map(|k| grids[k][n][l]).collect();
            let (per_user, z) = match &received[i] {
                ReceivedSymbol::Spectra { per_user, noise } => (
                    per_user
                        .iter()
                        .map(|ants| CVector::from_fn(n_ant, |a, _| ants[a][l]))
                        .collect::<Vec<_>>(),
                    CVector::from_fn(n_ant, |a, _| noise[a][l]),
                ),
                ReceivedSymbol::Noise(noise) => (
                    simplified_components(h, np, &cfo, n, num, &s_l),
                    noise[l].clone(),
                ),
            };
            let y = per_user.iter().fold(z.clone(), |acc, v| acc + v);
            let s_hat = combine(w, &y)?;
            let h_w = h_est[l].as_ref().unwrap();
            let is_data = setup.map.role(l) == crate::ofdm::SubcarrierRole::Data;
            for k in 0..k_users {
                // receiver-side equalization by the estimated coherent gain
                let c_hat: Complex64 = w.matrix().column(k).dotc(&h_w.column(k));
                eq_rows[k][l] = s_hat[k] / (c_hat * amp);
                if !is_data {
                    continue;
                }
                let c = coherent_gain(h, w, k, &cfo, n, num);
                let g = genie_split(w, k, &per_user, &z, c, s_l[k]);
                let a = &mut acc[k];
                a.sim[0].add(g.signal.norm_sqr());
                a.sim[1].add(g.iui.norm_sqr());
                a.sim[2].add(g.ici.norm_sqr());
                a.sim[3].add(g.noise.norm_sqr());
                a.total.add(s_hat[k].norm_sqr());
                let an = conditional_sinr_with(
                    h,
                    w,
                    k,
                    &moments,
                    cfg.ul_power,
                    sigma2,
                    setup.interference,
                )?;
                a.anlt[0].add(an.p_signal);
                a.anlt[1].add(an.p_interference);
                a.anlt[2].add(an.p_noise);
                let asy = asymptotic_sinr(h, w, k, moments.e2, cfg.ul_power, sigma2)?;
                a.asym[0].add(asy.p_signal);
                a.asym[1].add(asy.p_interference);
                a.asym[2].add(asy.p_noise);
            }
        }
        let cnt = setup.map.data_indices().len() as f64;
        let mut row_stats = Vec::with_capacity(k_users);
        for (k, a) in acc.iter().enumerate() {
            if setup.phase_correction {
                derotate_row(&mut eq_rows[k], &setup.map)?;
            }
            let mut err = KahanSum::default();
            for &l in setup.map.data_indices() {
                err.add((eq_rows[k][l] - grids[k][n][l] / amp).norm_sqr());
            }
            row_stats.push(PointStats {
                sim: a.sim.map(|s| s.value() / cnt),
                total: a.total.value() / cnt,
                anlt: a.anlt.map(|s| s.value() / cnt),
                asym: a.asym.map(|s| s.value() / cnt),
                evm_err: err.value(),
                evm_count: setup.map.data_indices().len(),
            });
        }
        stats.push(row_stats);
    }
    Ok(TrialResult {
        stats,
        symbols: setup.symbols.clone(),
        cfo,
    })
}

enum ReceivedSymbol {
    /// Demodulated exact-model components: `per_user[u][antenna][l]`, `noise[antenna][l]`.
    Spectra {
        per_user: Vec<Vec<Vec<Complex64>>>,
        noise: Vec<Vec<Complex64>>,
    },
    /// Simplified model: noise vectors per subcarrier; signal built on the fly.
    Noise(Vec<CVector>),
}

#[derive(Debug, Clone, Copy, Default)]
struct StatAcc {
    sim: [KahanSum; 4],
    total: KahanSum,
    anlt: [KahanSum; 3],
    asym: [KahanSum; 3],
}

/// Per-user pilot slots at the synchronization instant (no CFO), two LTS
/// symbols each, LS-estimated per antenna.
fn estimate_trial_channel(
    setup: &TrialSetup,
    channel: &ChannelMatrix,
    amp: f64,
    seed: u64,
) -> Result<Vec<Option<CMatrix>>> {
    let cfg = &setup.config;
    let num = cfg.numerology();
    let (k_users, n_ant, n_sc) = (cfg.num_users, cfg.total_antennas(), cfg.num_subcarriers);
    let pilot: Vec<Complex64> = setup.pilot.iter().map(|v| v * amp).collect();
    let mut est: Vec<CMatrix> = vec![CMatrix::zeros(n_ant, k_users); n_sc];
    let mut rng = rng_for(seed, STREAM_PILOT_NOISE, 0);
    match setup.model {
        PropagationModel::Exact => {
            let sig = setup.modem.modulate_rows(&[pilot.clone(), pilot.clone()])?;
            let tx = vec![sig; k_users];
            let comps = propagate_exact(
                &tx,
                channel,
                &CfoRealization::zero(cfg.num_daps),
                &NoiseSpec::noiseless(),
                num,
                0,
            )?;
            for (k, ants) in comps.per_user.iter().enumerate() {
                for (a, rx) in ants.iter().enumerate() {
                    let noisy: Vec<Complex64> = rx
                        .samples
                        .iter()
                        .map(|v| v + complex_gaussian(&mut rng, cfg.noise_var))
                        .collect();
                    let y0 = setup
                        .modem
                        .demodulate_symbol(&noisy[..rx.samples_per_symbol])?;
                    let y1 = setup
                        .modem
                        .demodulate_symbol(&noisy[rx.samples_per_symbol..])?;
                    for (l, v) in ls_estimate(&y0, &y1, &pilot).into_iter().enumerate() {
                        if let Some(v) = v {
                            est[l][(a, k)] = v;
                        }
                    }
                }
            }
        }
        PropagationModel::Simplified => {
            for k in 0..k_users {
                for a in 0..n_ant {
                    for l in 0..n_sc {
                        let h = channel.at(l)[(a, k)];
                        let y0 = pilot[l] * h + complex_gaussian(&mut rng, cfg.noise_var);
                        let y1 = pilot[l] * h + complex_gaussian(&mut rng, cfg.noise_var);
                        if let Some(v) = ls_estimate(&[y0], &[y1], &[pilot[l]])[0] {
                            est[l][(a, k)] = v;
                        }
                    }
                }
            }
        }
    }
    let tones = setup.map.occupied_indices();
    Ok(est
        .into_iter()
        .enumerate()
        .map(|(l, h)| tones.contains(&l).then_some(h))
        .collect())
}

/// One CSV row of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub method: String,
    pub model: String,
    pub dist: String,
    pub param: f64,
    pub n: usize,
    /// User index, or "all" for the pooled row.
    pub user: String,
    pub sinr_sim_db: f64,
    pub sinr_anlt_db: f64,
    pub sinr_asym_db: f64,
    pub evm_pct: f64,
    /// 95% half-width of `sinr_sim_db`, in dB.
    pub ci_halfwidth: f64,
}

/// Trial-level sums for one (param, n, user-or-pooled) cell.
#[derive(Debug, Clone, Copy, Default)]
struct Cell {
    s: KahanSum,
    d: KahanSum,
    ss: KahanSum,
    dd: KahanSum,
    sd: KahanSum,
    anlt: [KahanSum; 3],
    asym: [KahanSum; 3],
    evm_err: KahanSum,
    evm_count: usize,
    trials: usize,
}

impl Cell {
    fn add(&mut self, p: &PointStats) {
        let s = p.sim[0];
        let d = p.sim[1] + p.sim[2] + p.sim[3];
        self.s.add(s);
        self.d.add(d);
        self.ss.add(s * s);
        self.dd.add(d * d);
        self.sd.add(s * d);
        for i in 0..3 {
            self.anlt[i].add(p.anlt[i]);
            self.asym[i].add(p.asym[i]);
        }
        self.evm_err.add(p.evm_err);
        self.evm_count += p.evm_count;
    }

    fn ratio_db(num: f64, den: f64) -> f64 {
        SinrBreakdown::from_powers(num, den, 0.0).sinr_db_finite()
    }

    /// Delta-method 95% half-width of 10·log10(S̄/D̄).
    fn ci_db(&self) -> f64 {
        let t = self.trials as f64;
        if self.trials < 2 {
            return f64::NAN;
        }
        let (ms, md) = (self.s.value() / t, self.d.value() / t);
        if md <= 0.0 || ms <= 0.0 {
            return 0.0;
        }
        let vs = (self.ss.value() / t - ms * ms) * t / (t - 1.0);
        let vd = (self.dd.value() / t - md * md) * t / (t - 1.0);
        let cov = (self.sd.value() / t - ms * md) * t / (t - 1.0);
        let r = ms / md;
        let var_r = (vs - 2.0 * r * cov + r * r * vd).max(0.0) / (md * md * t);
        1.96 * var_r.sqrt() / r * 10.0 / std::f64::consts::LN_10
    }
}

/// Aggregated output of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Pooled row for (param, n).
    pub fn pooled(&self, param: f64, n: usize) -> Option<&SweepRow> {
        self.rows
            .iter()
            .find(|r| r.param == param && r.n == n && r.user == "all")
    }
}

/// Runs every (param, trial) and aggregates per (param, n, user).
///
/// Trial seeds are `derive_seed(seed, param index, trial index)`; results
/// are collected in trial order and reduced sequentially, so the output is
/// identical for any rayon pool size.
pub fn sweep(spec: &SweepSpec) -> Result<SweepResult> {
    let setup = TrialSetup::from_spec(spec)?;
    let k_users = spec.config.num_users;
    let mut rows = Vec::new();
    for (pi, &param) in spec.params.iter().enumerate() {
        let cfo = spec.cfo.with_param(param);
        let trials: Vec<TrialResult> = (0..spec.trials)
            .into_par_iter()
            .map(|t| run_trial(&setup, &cfo, derive_seed(spec.seed, pi as u64, t as u64)))
            .collect::<Result<_>>()?;
        for (i, &n) in spec.symbols.iter().enumerate() {
            let mut cells = vec![Cell::default(); k_users + 1];
            for tr in &trials {
                let mut pooled = PointStats::default();
                for (k, p) in tr.stats[i].iter().enumerate() {
                    cells[k].add(p);
                    cells[k].trials += 1;
                    for j in 0..4 {
                        pooled.sim[j] += p.sim[j];
                    }
                    for j in 0..3 {
                        pooled.anlt[j] += p.anlt[j];
                        pooled.asym[j] += p.asym[j];
                    }
                    pooled.evm_err += p.evm_err;
                    pooled.evm_count += p.evm_count;
                }
                cells[k_users].add(&pooled);
                cells[k_users].trials += 1;
            }
            for (k, c) in cells.iter().enumerate() {
                let user = if k == k_users {
                    "all".to_string()
                } else {
                    k.to_string()
                };
                let evm = (c.evm_err.value() / c.evm_count.max(1) as f64).sqrt();
                rows.push(SweepRow {
                    method: spec.method.name().into(),
                    model: spec.model.name().into(),
                    dist: spec.cfo.kind_name().into(),
                    param,
                    n,
                    user,
                    sinr_sim_db: Cell::ratio_db(c.s.value(), c.d.value()),
                    sinr_anlt_db: Cell::ratio_db(
                        c.anlt[0].value(),
                        c.anlt[1].value() + c.anlt[2].value(),
                    ),
                    sinr_asym_db: Cell::ratio_db(
                        c.asym[0].value(),
                        c.asym[1].value() + c.asym[2].value(),
                    ),
                    evm_pct: 100.0 * evm,
                    ci_halfwidth: c.ci_db(),
                });
            }
        }
    }
    Ok(SweepResult { rows })
}
