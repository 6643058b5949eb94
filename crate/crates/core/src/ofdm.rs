//! OFDM symbol construction and recovery.
//!
//! Both transform directions are scaled by `1/sqrt(N_sc)` so the forward
//! and inverse transforms are unitary. The cyclic prefix is the last
//! `L_cp` samples of the IFFT output, prepended.
//!
//! Subcarriers are indexed in FFT order: index 0 is DC, indices
//! `1..N_sc/2` are the positive tones and `N_sc/2..N_sc` the negative
//! tones (`-N_sc/2..-1`).

use std::io::Write;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalar system parameters shared by every workflow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemConfig {
    /// M
    pub num_daps: usize,
    /// N
    pub antennas_per_dap: usize,
    /// K
    pub num_users: usize,
    pub num_subcarriers: usize,
    pub cp_len: usize,
    pub subcarrier_spacing_hz: f64,
    pub carrier_freq_hz: f64,
    /// Per-user uplink transmit power (linear).
    pub ul_power: f64,
    /// Noise variance per receive antenna and sample (linear).
    pub noise_var: f64,
    /// Data OFDM symbols per uplink slot.
    pub slot_symbols: usize,
    /// Frame duration in seconds. Informational only.
    pub frame_duration_s: Option<f64>,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            num_daps: 4,
            antennas_per_dap: 16,
            num_users: 4,
            num_subcarriers: 64,
            cp_len: 16,
            subcarrier_spacing_hz: 78_125.0,
            carrier_freq_hz: 3.6e9,
            ul_power: 1.0,
            noise_var: 0.01,
            slot_symbols: 10,
            frame_duration_s: None,
        }
    }
}

impl SystemConfig {
    pub fn bandwidth_hz(&self) -> f64 {
        self.num_subcarriers as f64 * self.subcarrier_spacing_hz
    }

    pub fn sample_period_s(&self) -> f64 {
        1.0 / self.bandwidth_hz()
    }

    pub fn samples_per_symbol(&self) -> usize {
        self.num_subcarriers + self.cp_len
    }

    pub fn total_antennas(&self) -> usize {
        self.num_daps * self.antennas_per_dap
    }

    /// γ = p_ul / σ_z²
    pub fn transmit_snr(&self) -> f64 {
        self.ul_power / self.noise_var
    }

    pub fn transmit_snr_db(&self) -> f64 {
        10.0 * self.transmit_snr().log10()
    }

    /// Sets `noise_var` so that `ul_power / noise_var` equals `snr_db`.
    pub fn with_snr_db(mut self, snr_db: f64) -> Self {
        self.noise_var = self.ul_power / 10f64.powf(snr_db / 10.0);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if self.num_daps == 0 {
            return bad("num_daps must be >= 1");
        }
        if self.antennas_per_dap == 0 {
            return bad("antennas_per_dap must be >= 1");
        }
        if self.num_users == 0 {
            return bad("num_users must be >= 1");
        }
        if self.num_subcarriers == 0 {
            return bad("num_subcarriers must be >= 1");
        }
        if !(self.subcarrier_spacing_hz > 0.0) || !self.subcarrier_spacing_hz.is_finite() {
            return bad("subcarrier_spacing_hz must be > 0");
        }
        if !(self.carrier_freq_hz > 0.0) {
            return bad("carrier_freq_hz must be > 0");
        }
        if !(self.ul_power > 0.0) {
            return bad("ul_power must be > 0");
        }
        if !(self.noise_var > 0.0) {
            return bad("noise_var must be > 0");
        }
        if let Some(t) = self.frame_duration_s {
            if !(t > 0.0) {
                return bad("frame_duration_s must be > 0");
            }
        }
        Ok(())
    }

    pub fn numerology(&self) -> Numerology {
        Numerology {
            num_subcarriers: self.num_subcarriers,
            cp_len: self.cp_len,
        }
    }
}

/// Just the symbol-timing part of the configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Numerology {
    pub num_subcarriers: usize,
    pub cp_len: usize,
}

impl Numerology {
    pub fn new(num_subcarriers: usize, cp_len: usize) -> Self {
        Self {
            num_subcarriers,
            cp_len,
        }
    }

    pub fn samples_per_symbol(&self) -> usize {
        self.num_subcarriers + self.cp_len
    }
}

impl From<&SystemConfig> for Numerology {
    fn from(c: &SystemConfig) -> Self {
        c.numerology()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubcarrierRole {
    Data,
    Pilot,
    Null,
}

/// Named subcarrier layouts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MapProfile {
    /// 48 data, 4 pilot (tones ±7, ±21), 12 null (DC and the band edges).
    #[serde(alias = "802.11")]
    Ieee80211,
    AllData,
    Custom(Vec<SubcarrierRole>),
}

impl std::str::FromStr for MapProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "802.11" | "ieee80211" | "ieee-80211" => Ok(MapProfile::Ieee80211),
            "all-data" => Ok(MapProfile::AllData),
            other => Err(Error::UnknownProfile(other.to_string())),
        }
    }
}

/// 802.11 pilot tones (signed tone offset, BPSK value).
const IEEE80211_PILOTS: [(i32, f64); 4] = [(-21, 1.0), (-7, 1.0), (7, 1.0), (21, -1.0)];

/// FFT-order index of a signed tone offset.
pub fn tone_index(tone: i32, n_sc: usize) -> usize {
    tone.rem_euclid(n_sc as i32) as usize
}

/// Role assignment for every subcarrier plus the pilot reference values.
#[derive(Debug, Clone, PartialEq)]
pub struct SubcarrierMap {
    roles: Vec<SubcarrierRole>,
    data: Vec<usize>,
    pilots: Vec<usize>,
    pilot_values: Vec<Complex64>,
}

impl SubcarrierMap {
    pub fn from_roles(roles: Vec<SubcarrierRole>) -> Self {
        let pilots: Vec<usize> = indices_with(&roles, SubcarrierRole::Pilot);
        let pilot_values = vec![Complex64::new(1.0, 0.0); pilots.len()];
        Self {
            data: indices_with(&roles, SubcarrierRole::Data),
            pilots,
            pilot_values,
            roles,
        }
    }

    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    pub fn roles(&self) -> &[SubcarrierRole] {
        &self.roles
    }

    pub fn role(&self, l: usize) -> SubcarrierRole {
        self.roles[l]
    }

    pub fn data_indices(&self) -> &[usize] {
        &self.data
    }

    pub fn pilot_indices(&self) -> &[usize] {
        &self.pilots
    }

    /// Known values transmitted on the pilot tones, aligned with
    /// [`pilot_indices`](Self::pilot_indices).
    pub fn pilot_values(&self) -> &[Complex64] {
        &self.pilot_values
    }

    /// Data and pilot tones, in index order.
    pub fn occupied_indices(&self) -> Vec<usize> {
        (0..self.roles.len())
            .filter(|&l| self.roles[l] != SubcarrierRole::Null)
            .collect()
    }

    pub fn count(&self, role: SubcarrierRole) -> usize {
        self.roles.iter().filter(|&&r| r == role).count()
    }
}

fn indices_with(roles: &[SubcarrierRole], role: SubcarrierRole) -> Vec<usize> {
    roles
        .iter()
        .enumerate()
        .filter(|(_, &r)| r == role)
        .map(|(i, _)| i)
        .collect()
}

pub fn subcarrier_map(n_sc: usize, profile: &MapProfile) -> Result<SubcarrierMap> {
    match profile {
        MapProfile::Ieee80211 => {
            if n_sc != 64 {
                return Err(Error::UnsupportedSubcarriers(n_sc));
            }
            let mut roles = vec![SubcarrierRole::Null; 64];
            for tone in (-26..=26).filter(|&t| t != 0) {
                roles[tone_index(tone, 64)] = SubcarrierRole::Data;
            }
            let mut pilots: Vec<(usize, f64)> = IEEE80211_PILOTS
                .iter()
                .map(|&(t, v)| (tone_index(t, 64), v))
                .collect();
            pilots.sort_by_key(|p| p.0);
            for &(idx, _) in &pilots {
                roles[idx] = SubcarrierRole::Pilot;
            }
            let mut map = SubcarrierMap::from_roles(roles);
            map.pilot_values = pilots.iter().map(|p| Complex64::new(p.1, 0.0)).collect();
            Ok(map)
        }
        MapProfile::AllData => Ok(SubcarrierMap::from_roles(vec![SubcarrierRole::Data; n_sc])),
        MapProfile::Custom(roles) => {
            if roles.len() != n_sc {
                return Err(Error::BadPartition {
                    expected: n_sc,
                    actual: roles.len(),
                });
            }
            Ok(SubcarrierMap::from_roles(roles.clone()))
        }
    }
}

/// Frequency-domain samples, `symbols[n][l]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubcarrierGrid {
    pub symbols: Vec<Vec<Complex64>>,
    pub map: SubcarrierMap,
}

impl SubcarrierGrid {
    /// Builds a grid, rejecting rows of the wrong width or energy on null tones.
    pub fn new(symbols: Vec<Vec<Complex64>>, map: SubcarrierMap) -> Result<Self> {
        for row in &symbols {
            if row.len() != map.len() {
                return Err(Error::LengthMismatch {
                    expected: map.len(),
                    actual: row.len(),
                });
            }
            for (l, v) in row.iter().enumerate() {
                if map.role(l) == SubcarrierRole::Null && *v != Complex64::new(0.0, 0.0) {
                    return Err(Error::InvalidConfig(format!(
                        "null subcarrier {l} carries a nonzero value"
                    )));
                }
            }
        }
        Ok(Self { symbols, map })
    }

    pub fn num_symbols(&self) -> usize {
        self.symbols.len()
    }

    /// CSV with header `symbol,subcarrier,re,im`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["symbol", "subcarrier", "re", "im"])?;
        for (n, row) in self.symbols.iter().enumerate() {
            for (l, v) in row.iter().enumerate() {
                w.write_record(&[
                    n.to_string(),
                    l.to_string(),
                    v.re.to_string(),
                    v.im.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Time-domain samples of consecutive CP-extended OFDM symbols.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSignal {
    pub samples: Vec<Complex64>,
    pub samples_per_symbol: usize,
}

impl TimeSignal {
    pub fn new(samples: Vec<Complex64>, samples_per_symbol: usize) -> Result<Self> {
        if samples_per_symbol == 0 || samples.len() % samples_per_symbol != 0 {
            return Err(Error::LengthMismatch {
                expected: samples.len().div_ceil(samples_per_symbol.max(1)) * samples_per_symbol,
                actual: samples.len(),
            });
        }
        Ok(Self {
            samples,
            samples_per_symbol,
        })
    }

    pub fn zeros(num_symbols: usize, samples_per_symbol: usize) -> Self {
        Self {
            samples: vec![Complex64::new(0.0, 0.0); num_symbols * samples_per_symbol],
            samples_per_symbol,
        }
    }

    pub fn num_symbols(&self) -> usize {
        self.samples.len() / self.samples_per_symbol
    }

    pub fn symbol(&self, n: usize) -> &[Complex64] {
        &self.samples[n * self.samples_per_symbol..(n + 1) * self.samples_per_symbol]
    }
}

/// Planned forward/inverse transforms for one numerology.
#[derive(Clone)]
pub struct OfdmModem {
    num: Numerology,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    scale: f64,
}

impl std::fmt::Debug for OfdmModem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OfdmModem").field("num", &self.num).finish()
    }
}

impl OfdmModem {
    pub fn new(num: Numerology) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            forward: planner.plan_fft_forward(num.num_subcarriers),
            inverse: planner.plan_fft_inverse(num.num_subcarriers),
            scale: 1.0 / (num.num_subcarriers as f64).sqrt(),
            num,
        }
    }

    pub fn from_config(config: &SystemConfig) -> Self {
        Self::new(config.numerology())
    }

    pub fn numerology(&self) -> Numerology {
        self.num
    }

    /// Unitary IFFT of one spectrum followed by cyclic-prefix insertion.
    pub fn modulate_symbol(&self, spectrum: &[Complex64]) -> Result<Vec<Complex64>> {
        let n = self.num.num_subcarriers;
        if spectrum.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                actual: spectrum.len(),
            });
        }
        let mut body = spectrum.to_vec();
        self.inverse.process(&mut body);
        let cp = self.num.cp_len;
        let mut out = Vec::with_capacity(n + cp);
        // CP longer than the symbol wraps around repeatedly
        out.extend((0..cp).map(|i| body[(n - cp % n + i) % n] * self.scale));
        out.extend(body.iter().map(|v| v * self.scale));
        Ok(out)
    }

    /// Cyclic-prefix removal followed by the unitary FFT.
    pub fn demodulate_symbol(&self, samples: &[Complex64]) -> Result<Vec<Complex64>> {
        let expected = self.num.samples_per_symbol();
        if samples.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                actual: samples.len(),
            });
        }
        let mut body = samples[self.num.cp_len..].to_vec();
        self.forward.process(&mut body);
        body.iter_mut().for_each(|v| *v *= self.scale);
        Ok(body)
    }

    pub fn modulate_grid(&self, grid: &SubcarrierGrid) -> Result<TimeSignal> {
        self.modulate_rows(&grid.symbols)
    }

    pub fn modulate_rows(&self, rows: &[Vec<Complex64>]) -> Result<TimeSignal> {
        let sps = self.num.samples_per_symbol();
        let mut samples = Vec::with_capacity(rows.len() * sps);
        for row in rows {
            samples.extend(self.modulate_symbol(row)?);
        }
        TimeSignal::new(samples, sps)
    }

    /// Spectrum of every symbol in `signal`.
    pub fn demodulate_signal(&self, signal: &TimeSignal) -> Result<Vec<Vec<Complex64>>> {
        if signal.samples_per_symbol != self.num.samples_per_symbol() {
            return Err(Error::LengthMismatch {
                expected: self.num.samples_per_symbol(),
                actual: signal.samples_per_symbol,
            });
        }
        (0..signal.num_symbols())
            .map(|n| self.demodulate_symbol(signal.symbol(n)))
            .collect()
    }
}

/// Constellations. Only QPSK is used by the workflows; the enum is the hook
/// for adding more.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modulation {
    #[default]
    Qpsk,
}

impl Modulation {
    pub fn bits_per_symbol(&self) -> usize {
        match self {
            Modulation::Qpsk => 2,
        }
    }

    /// `M_mod`
    pub fn order(&self) -> usize {
        1 << self.bits_per_symbol()
    }

    pub fn constellation(&self) -> Vec<Complex64> {
        match self {
            Modulation::Qpsk => (0..4u8)
                .map(|v| qpsk_point(v & 2 != 0, v & 1 != 0))
                .collect(),
        }
    }

    /// `P_0`, the mean symbol energy of the constellation.
    pub fn average_energy(&self) -> f64 {
        let pts = self.constellation();
        pts.iter().map(|p| p.norm_sqr()).sum::<f64>() / pts.len() as f64
    }

    /// Nearest constellation point (hard decision).
    pub fn slice(&self, symbol: Complex64) -> Complex64 {
        match self {
            Modulation::Qpsk => qpsk_point(symbol.re < 0.0, symbol.im < 0.0),
        }
    }

    pub fn map(&self, bits: &[bool]) -> Result<Vec<Complex64>> {
        match self {
            Modulation::Qpsk => qpsk_map(bits),
        }
    }

    pub fn demap(&self, symbols: &[Complex64]) -> Vec<bool> {
        match self {
            Modulation::Qpsk => qpsk_demap(symbols),
        }
    }
}

fn qpsk_point(b0: bool, b1: bool) -> Complex64 {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    Complex64::new(if b0 { -s } else { s }, if b1 { -s } else { s })
}

/// Gray-mapped QPSK: the first bit of each pair selects the sign of the
/// in-phase part, the second the sign of the quadrature part, `0 -> +`.
/// So `00 -> (1+j)/√2`, `01 -> (1-j)/√2`, `10 -> (-1+j)/√2`, `11 -> (-1-j)/√2`.
pub fn qpsk_map(bits: &[bool]) -> Result<Vec<Complex64>> {
    if bits.len() % 2 != 0 {
        return Err(Error::OddBitCount(bits.len()));
    }
    Ok(bits
        .chunks_exact(2)
        .map(|b| qpsk_point(b[0], b[1]))
        .collect())
}

pub fn qpsk_demap(symbols: &[Complex64]) -> Vec<bool> {
    symbols
        .iter()
        .flat_map(|s| [s.re < 0.0, s.im < 0.0])
        .collect()
}

/// 802.11 long training sequence for tones -26..=26 (DC included as 0).
const LTS_TONES: [i8; 53] = [
    1, 1, -1, -1, 1, 1, -1, 1, -1, 1, 1, 1, 1, 1, 1, -1, -1, 1, 1, -1, 1, -1, 1, 1, 1, 1, 0, 1, -1,
    -1, 1, 1, -1, 1, -1, 1, -1, -1, -1, -1, -1, 1, 1, -1, -1, 1, -1, 1, -1, 1, 1, 1, 1,
];

/// LTS spectrum in FFT order.
pub fn lts_spectrum() -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); 64];
    for (i, &v) in LTS_TONES.iter().enumerate() {
        let tone = i as i32 - 26;
        out[tone_index(tone, 64)] = Complex64::new(v as f64, 0.0);
    }
    out
}

/// Two identical LTS symbols on the 802.11 layout.
pub fn lts_pilot(config: &SystemConfig) -> Result<SubcarrierGrid> {
    if config.num_subcarriers != 64 {
        return Err(Error::UnsupportedSubcarriers(config.num_subcarriers));
    }
    let map = subcarrier_map(64, &MapProfile::Ieee80211)?;
    let lts = lts_spectrum();
    SubcarrierGrid::new(vec![lts.clone(), lts], map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn random_spectrum(n: usize, seed: u64) -> Vec<Complex64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn ieee_map_counts_and_pilot_positions() {
        let map = subcarrier_map(64, &MapProfile::Ieee80211).unwrap();
        assert_eq!(map.count(SubcarrierRole::Data), 48);
        assert_eq!(map.count(SubcarrierRole::Pilot), 4);
        assert_eq!(map.count(SubcarrierRole::Null), 12);
        assert_eq!(map.pilot_indices(), &[7, 21, 43, 57]);
        assert_eq!(map.role(0), SubcarrierRole::Null);
        for l in 27..=37 {
            assert_eq!(map.role(l), SubcarrierRole::Null);
        }
        assert_eq!(map.occupied_indices().len(), 52);
    }

    #[test]
    fn all_data_profile() {
        let map = subcarrier_map(64, &MapProfile::AllData).unwrap();
        assert_eq!(map.count(SubcarrierRole::Data), 64);
        assert_eq!(map.count(SubcarrierRole::Pilot), 0);
        assert_eq!(
            subcarrier_map(8, &MapProfile::AllData)
                .unwrap()
                .data_indices()
                .len(),
            8
        );
    }

    #[test]
    fn map_errors() {
        assert!(matches!(
            subcarrier_map(32, &MapProfile::Ieee80211),
            Err(Error::UnsupportedSubcarriers(32))
        ));
        assert!(matches!(
            "bogus".parse::<MapProfile>(),
            Err(Error::UnknownProfile(_))
        ));
        let short = MapProfile::Custom(vec![SubcarrierRole::Data; 7]);
        assert!(matches!(
            subcarrier_map(8, &short),
            Err(Error::BadPartition {
                expected: 8,
                actual: 7
            })
        ));
    }

    #[test]
    fn zero_spectrum_gives_zero_samples() {
        let modem = OfdmModem::new(Numerology::new(64, 16));
        let out = modem.modulate_symbol(&[c(0.0, 0.0); 64]).unwrap();
        assert_eq!(out.len(), 80);
        assert!(out.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn single_tone_matches_idft_definition() {
        let (n, cp, q) = (16usize, 4usize, 3usize);
        let modem = OfdmModem::new(Numerology::new(n, cp));
        let mut x = vec![c(0.0, 0.0); n];
        x[q] = c(1.0, 0.0);
        let out = modem.modulate_symbol(&x).unwrap();
        for (i, v) in out.iter().enumerate() {
            // CP samples continue the periodic waveform backwards
            let zeta = i as f64 - cp as f64;
            let want = Complex64::from_polar(
                1.0 / (n as f64).sqrt(),
                2.0 * std::f64::consts::PI * q as f64 * zeta / n as f64,
            );
            assert!((v - want).norm() < 1e-14, "sample {i}");
        }
    }

    #[test]
    fn length_mismatch_errors() {
        let modem = OfdmModem::new(Numerology::new(8, 2));
        assert!(matches!(
            modem.modulate_symbol(&[c(0.0, 0.0); 7]),
            Err(Error::LengthMismatch {
                expected: 8,
                actual: 7
            })
        ));
        assert!(matches!(
            modem.demodulate_symbol(&[c(0.0, 0.0); 8]),
            Err(Error::LengthMismatch {
                expected: 10,
                actual: 8
            })
        ));
    }

    #[test]
    fn null_tones_stay_zero() {
        let map = subcarrier_map(64, &MapProfile::Ieee80211).unwrap();
        let mut x = random_spectrum(64, 3);
        for l in 0..64 {
            if map.role(l) == SubcarrierRole::Null {
                x[l] = c(0.0, 0.0);
            }
        }
        let modem = OfdmModem::new(Numerology::new(64, 16));
        let y = modem
            .demodulate_symbol(&modem.modulate_symbol(&x).unwrap())
            .unwrap();
        for l in 0..64 {
            if map.role(l) == SubcarrierRole::Null {
                assert!(y[l].norm() < 1e-15);
            }
        }
    }

    #[test]
    fn grid_rejects_energy_on_null() {
        let map = subcarrier_map(64, &MapProfile::Ieee80211).unwrap();
        let mut row = vec![c(0.0, 0.0); 64];
        row[0] = c(1.0, 0.0);
        assert!(SubcarrierGrid::new(vec![row], map).is_err());
    }

    #[test]
    fn qpsk_convention_and_identity() {
        let s = qpsk_map(&[false, false]).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((s[0] - c(h, h)).norm() < 1e-15);
        assert!(matches!(qpsk_map(&[true]), Err(Error::OddBitCount(1))));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let bits: Vec<bool> = (0..1000).map(|_| rng.random()).collect();
        assert_eq!(qpsk_demap(&qpsk_map(&bits).unwrap()), bits);
        assert!((Modulation::Qpsk.average_energy() - 1.0).abs() < 1e-15);
        assert_eq!(Modulation::Qpsk.order(), 4);
    }

    #[test]
    fn lts_values_and_repetition() {
        let cfg = SystemConfig::default();
        let grid = lts_pilot(&cfg).unwrap();
        assert_eq!(grid.num_symbols(), 2);
        assert_eq!(grid.symbols[0], grid.symbols[1]);
        for l in 0..64 {
            let v = grid.symbols[0][l];
            match grid.map.role(l) {
                SubcarrierRole::Null => assert_eq!(v, c(0.0, 0.0)),
                _ => assert!(v == c(1.0, 0.0) || v == c(-1.0, 0.0)),
            }
        }
        // Known structure of the standard sequence.
        let lts = lts_spectrum();
        assert_eq!(lts.iter().map(|v| v.norm_sqr()).sum::<f64>(), 52.0);
        assert_eq!(lts[tone_index(1, 64)].re, 1.0);
        assert_eq!(lts[tone_index(2, 64)].re, -1.0);
        assert_eq!(lts[tone_index(-26, 64)].re, 1.0);
        assert_eq!(lts[tone_index(26, 64)].re, 1.0);

        // Time-domain LTS demodulates back to unit-magnitude occupied tones.
        let modem = OfdmModem::from_config(&cfg);
        let sig = modem.modulate_grid(&grid).unwrap();
        let back = modem.demodulate_signal(&sig).unwrap();
        for l in grid.map.occupied_indices() {
            assert!((back[1][l].norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_csv_has_header_and_rows() {
        let map = subcarrier_map(8, &MapProfile::AllData).unwrap();
        let grid = SubcarrierGrid::new(vec![vec![c(1.0, -2.0); 8]], map).unwrap();
        let mut buf = Vec::new();
        grid.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("symbol,subcarrier,re,im"));
        assert_eq!(lines.next(), Some("0,0,1,-2"));
        assert_eq!(text.lines().count(), 9);
    }

    proptest! {
        #[test]
        fn round_trip_and_parseval(seed in any::<u64>(), n_idx in 0usize..4, cp in 0usize..40) {
            let n = [8usize, 16, 64, 128][n_idx];
            let modem = OfdmModem::new(Numerology::new(n, cp));
            let x = random_spectrum(n, seed);
            let t = modem.modulate_symbol(&x).unwrap();
            let y = modem.demodulate_symbol(&t).unwrap();
            let ex: f64 = x.iter().map(|v| v.norm_sqr()).sum();
            let err: f64 = x.iter().zip(&y).map(|(a, b)| (a - b).norm_sqr()).sum();
            prop_assert!((err / ex).sqrt() <= 1e-12);
            let et: f64 = t[cp..].iter().map(|v| v.norm_sqr()).sum();
            prop_assert!(((et - ex) / ex).abs() <= 1e-12);
        }
    }
}
