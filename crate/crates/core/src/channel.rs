//! Channels and the uplink propagation models.
//!
//! Antenna rows of the stacked `(M·N) × K` matrix are ordered dAP-major:
//! row `m·N + i` is antenna `i` of dAP `m`.
//!
//! Two propagation models are provided. The exact model works on time
//! samples and applies each dAP's CFO as a phase ramp over the absolute
//! sample index, so the FFT at the receiver produces the full ICI. The
//! simplified model works on one subcarrier and replaces the CFO by the
//! scalar gain Ω.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cfo::{CfoSpec, OmegaModel};
use crate::error::{Error, Result};
use crate::ofdm::{Numerology, OfdmModem, SystemConfig, TimeSignal};
use crate::seed::{rng_for, SimRng};

pub type CMatrix = DMatrix<Complex64>;
pub type CVector = DVector<Complex64>;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// One CN(0, var) draw.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, var: f64) -> Complex64 {
    let s = (var / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re * s, im * s)
}

/// Uplink channel, one `(M·N) × K` matrix per subcarrier or a single one
/// shared by all subcarriers.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMatrix {
    num_daps: usize,
    antennas_per_dap: usize,
    num_subcarriers: usize,
    mats: Vec<CMatrix>,
}

impl ChannelMatrix {
    /// Frequency-flat channel.
    pub fn flat(
        num_daps: usize,
        antennas_per_dap: usize,
        num_subcarriers: usize,
        h: CMatrix,
    ) -> Result<Self> {
        Self::check(num_daps, antennas_per_dap, &h)?;
        Ok(Self {
            num_daps,
            antennas_per_dap,
            num_subcarriers,
            mats: vec![h],
        })
    }

    pub fn per_subcarrier(
        num_daps: usize,
        antennas_per_dap: usize,
        mats: Vec<CMatrix>,
    ) -> Result<Self> {
        let first = mats.first().ok_or(Error::Empty)?;
        let k = first.ncols();
        for h in &mats {
            Self::check(num_daps, antennas_per_dap, h)?;
            if h.ncols() != k {
                return Err(Error::DimensionMismatch(format!(
                    "user count differs across subcarriers ({} vs {k})",
                    h.ncols()
                )));
            }
        }
        Ok(Self {
            num_daps,
            antennas_per_dap,
            num_subcarriers: mats.len(),
            mats,
        })
    }

    fn check(m: usize, n: usize, h: &CMatrix) -> Result<()> {
        if h.nrows() != m * n {
            return Err(Error::DimensionMismatch(format!(
                "channel has {} rows, expected M·N = {}",
                h.nrows(),
                m * n
            )));
        }
        if h.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::InvalidConfig(
                "channel has non-finite entries".into(),
            ));
        }
        Ok(())
    }

    pub fn num_daps(&self) -> usize {
        self.num_daps
    }

    pub fn antennas_per_dap(&self) -> usize {
        self.antennas_per_dap
    }

    /// The same channel seen by the first `m` dAPs only.
    pub fn first_daps(&self, m: usize) -> Result<Self> {
        if m == 0 || m > self.num_daps {
            return Err(Error::InvalidConfig(format!(
                "dAP subset {m} of {}",
                self.num_daps
            )));
        }
        let rows = m * self.antennas_per_dap;
        Ok(Self {
            num_daps: m,
            antennas_per_dap: self.antennas_per_dap,
            num_subcarriers: self.num_subcarriers,
            mats: self
                .mats
                .iter()
                .map(|h| h.rows(0, rows).into_owned())
                .collect(),
        })
    }

    pub fn num_antennas(&self) -> usize {
        self.num_daps * self.antennas_per_dap
    }

    pub fn num_users(&self) -> usize {
        self.mats[0].ncols()
    }

    pub fn num_subcarriers(&self) -> usize {
        self.num_subcarriers
    }

    pub fn is_flat(&self) -> bool {
        self.mats.len() == 1
    }

    /// H^ul at subcarrier `l`.
    pub fn at(&self, l: usize) -> &CMatrix {
        if self.is_flat() {
            &self.mats[0]
        } else {
            &self.mats[l]
        }
    }

    /// h_km at subcarrier `l`.
    pub fn h_km(&self, l: usize, k: usize, m: usize) -> CVector {
        let n = self.antennas_per_dap;
        self.at(l).view((m * n, k), (n, 1)).column(0).into_owned()
    }

    /// H_m at subcarrier `l`, the `N × K` block of dAP `m`.
    pub fn h_m(&self, l: usize, m: usize) -> CMatrix {
        let n = self.antennas_per_dap;
        self.at(l).rows(m * n, n).into_owned()
    }

    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.mats
            .iter_mut()
            .for_each(|h| *h *= Complex64::new(c, 0.0));
        out
    }

    /// Binary layout: four little-endian `u32` (M, N, K, N_sc), then for
    /// every subcarrier the `(M·N) × K` matrix row-major as `f64` LE
    /// (re, im) pairs.
    pub fn write_binary<W: Write>(&self, mut out: W) -> Result<()> {
        write_binary_blocks(
            &mut out,
            self.num_daps,
            self.antennas_per_dap,
            self.num_subcarriers,
            (0..self.num_subcarriers).map(|l| self.at(l)),
        )
    }

    /// Inverse of [`write_binary`](Self::write_binary). Channels whose
    /// subcarriers are all identical come back flat.
    pub fn read_binary<R: Read>(mut input: R) -> Result<Self> {
        let (m, n, n_sc, mats) = read_binary_blocks(&mut input)?;
        if mats.iter().all(|h| *h == mats[0]) {
            Self::flat(m, n, n_sc, mats.into_iter().next().unwrap())
        } else {
            Self::per_subcarrier(m, n, mats)
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        if path.extension().is_some_and(|e| e == "csv") {
            self.write_csv(f)
        } else {
            self.write_binary(f)
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_binary(f)
    }

    /// CSV with header `subcarrier,antenna,user,re,im`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_csv_blocks(out, (0..self.num_subcarriers).map(|l| self.at(l)))
    }
}

pub(crate) fn write_binary_blocks<'a, W: Write>(
    out: &mut W,
    m: usize,
    n: usize,
    n_sc: usize,
    mats: impl Iterator<Item = &'a CMatrix>,
) -> Result<()> {
    let mut mats = mats.peekable();
    let k = mats.peek().map(|h| h.ncols()).unwrap_or(0);
    for v in [m, n, k, n_sc] {
        out.write_all(&(v as u32).to_le_bytes())?;
    }
    for h in mats {
        for r in 0..h.nrows() {
            for c in 0..h.ncols() {
                out.write_all(&h[(r, c)].re.to_le_bytes())?;
                out.write_all(&h[(r, c)].im.to_le_bytes())?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

pub(crate) fn read_binary_blocks<R: Read>(
    input: &mut R,
) -> Result<(usize, usize, usize, Vec<CMatrix>)> {
    let mut word = [0u8; 4];
    let mut header = [0usize; 4];
    for h in header.iter_mut() {
        input
            .read_exact(&mut word)
            .map_err(|_| Error::MalformedFile("truncated header".into()))?;
        *h = u32::from_le_bytes(word) as usize;
    }
    let [m, n, k, n_sc] = header;
    if m == 0 || n == 0 || k == 0 || n_sc == 0 {
        return Err(Error::MalformedFile(format!(
            "zero dimension in header {header:?}"
        )));
    }
    let mut payload = Vec::new();
    input.read_to_end(&mut payload)?;
    let expected = m * n * k * n_sc * 16;
    if payload.len() != expected {
        return Err(Error::MalformedFile(format!(
            "expected {expected} payload bytes, found {}",
            payload.len()
        )));
    }
    let mut vals = payload
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()));
    let mut mats = Vec::with_capacity(n_sc);
    for _ in 0..n_sc {
        let entries: Vec<Complex64> = (0..m * n * k)
            .map(|_| Complex64::new(vals.next().unwrap(), vals.next().unwrap()))
            .collect();
        mats.push(CMatrix::from_row_slice(m * n, k, &entries));
    }
    Ok((m, n, n_sc, mats))
}

pub(crate) fn write_csv_blocks<'a, W: Write>(
    out: W,
    mats: impl Iterator<Item = &'a CMatrix>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["subcarrier", "antenna", "user", "re", "im"])?;
    for (l, h) in mats.enumerate() {
        for r in 0..h.nrows() {
            for c in 0..h.ncols() {
                w.write_record(&[
                    l.to_string(),
                    r.to_string(),
                    c.to_string(),
                    h[(r, c)].re.to_string(),
                    h[(r, c)].im.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Receive-side spatial correlation.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Correlation {
    /// i.i.d. entries.
    #[default]
    None,
    /// `(M·N) × (M·N)` Hermitian PSD matrix R; columns are drawn as R^{1/2} g.
    Fixed(CMatrix),
}

impl Correlation {
    /// R^{1/2}, or `None` for the i.i.d. case.
    pub fn sqrt(&self) -> Result<Option<CMatrix>> {
        match self {
            Correlation::None => Ok(None),
            Correlation::Fixed(r) => psd_sqrt(r).map(Some),
        }
    }
}

fn psd_sqrt(r: &CMatrix) -> Result<CMatrix> {
    if !r.is_square() {
        return Err(Error::DimensionMismatch(
            "correlation matrix must be square".into(),
        ));
    }
    let herm_err = (r - r.adjoint()).norm();
    if herm_err > 1e-9 * r.norm().max(1.0) {
        return Err(Error::InvalidConfig(
            "correlation matrix is not Hermitian".into(),
        ));
    }
    let eig = nalgebra::SymmetricEigen::new(r.clone());
    let max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let min = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if min < -1e-10 * max.max(1.0) {
        return Err(Error::NotPsd(min));
    }
    let d = CMatrix::from_diagonal(
        &eig.eigenvalues
            .map(|v| Complex64::new(v.max(0.0).sqrt(), 0.0)),
    );
    Ok(&eig.eigenvectors * d * eig.eigenvectors.adjoint())
}

/// How the channel varies across subcarriers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fading {
    /// One draw shared by all subcarriers.
    #[default]
    Flat,
    /// Independent draws per subcarrier.
    PerSubcarrier,
}

/// CN(0, 1) Rayleigh channel, optionally spatially correlated.
pub fn rayleigh_channel(
    config: &SystemConfig,
    fading: Fading,
    correlation: &Correlation,
    seed: u64,
) -> Result<ChannelMatrix> {
    let mut rng = rng_for(seed, 0x4348_414e, 0);
    rayleigh_channel_with(config, fading, correlation, &mut rng)
}

/// [`rayleigh_channel`] drawing from a caller-supplied generator.
pub fn rayleigh_channel_with<R: Rng + ?Sized>(
    config: &SystemConfig,
    fading: Fading,
    correlation: &Correlation,
    rng: &mut R,
) -> Result<ChannelMatrix> {
    let rows = config.total_antennas();
    let k = config.num_users;
    let root = correlation.sqrt()?;
    if let Some(r) = &root {
        if r.nrows() != rows {
            return Err(Error::DimensionMismatch(format!(
                "correlation is {}x{}, expected {rows}x{rows}",
                r.nrows(),
                r.ncols()
            )));
        }
    }
    let mut draw = || {
        let g = CMatrix::from_fn(rows, k, |_, _| complex_gaussian(rng, 1.0));
        match &root {
            Some(r) => r * g,
            None => g,
        }
    };
    match fading {
        Fading::Flat => ChannelMatrix::flat(
            config.num_daps,
            config.antennas_per_dap,
            config.num_subcarriers,
            draw(),
        ),
        Fading::PerSubcarrier => {
            let mats = (0..config.num_subcarriers).map(|_| draw()).collect();
            ChannelMatrix::per_subcarrier(config.num_daps, config.antennas_per_dap, mats)
        }
    }
}

/// Realized offsets: one ε per dAP, shared by its antennas, plus optional
/// per-user transmitter offsets.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CfoRealization {
    pub dap_eps: Vec<f64>,
    pub user_eps: Option<Vec<f64>>,
}

impl CfoRealization {
    pub fn zero(num_daps: usize) -> Self {
        Self::common(0.0, num_daps)
    }

    pub fn common(eps: f64, num_daps: usize) -> Self {
        Self {
            dap_eps: vec![eps; num_daps],
            user_eps: None,
        }
    }

    pub fn per_dap(dap_eps: Vec<f64>) -> Self {
        Self {
            dap_eps,
            user_eps: None,
        }
    }

    /// Independent per-dAP draws from `spec`.
    pub fn draw<R: Rng + ?Sized>(spec: &CfoSpec, num_daps: usize, rng: &mut R) -> Self {
        Self::per_dap((0..num_daps).map(|_| spec.sample(rng)).collect())
    }

    pub fn num_daps(&self) -> usize {
        self.dap_eps.len()
    }

    /// Net normalized offset seen for user `k` at dAP `m`.
    pub fn eps(&self, k: usize, m: usize) -> f64 {
        self.dap_eps[m] + self.user_eps.as_ref().map_or(0.0, |u| u[k])
    }

    pub fn validate(&self, num_daps: usize, num_users: usize) -> Result<()> {
        if self.dap_eps.len() != num_daps {
            return Err(Error::LengthMismatch {
                expected: num_daps,
                actual: self.dap_eps.len(),
            });
        }
        if let Some(u) = &self.user_eps {
            if u.len() != num_users {
                return Err(Error::LengthMismatch {
                    expected: num_users,
                    actual: u.len(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    /// σ_z² per complex sample.
    pub variance: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(variance: f64, seed: u64) -> Result<Self> {
        if !(variance >= 0.0) {
            return Err(Error::NegativeParameter(variance));
        }
        Ok(Self { variance, seed })
    }

    pub fn noiseless() -> Self {
        Self {
            variance: 0.0,
            seed: 0,
        }
    }

    pub fn rng(&self) -> SimRng {
        rng_for(self.seed, 0x4e4f_4953_45, 0)
    }
}

/// Exact-model received signal split by origin.
#[derive(Debug, Clone, PartialEq)]
pub struct UplinkComponents {
    /// `per_user[k][antenna]`: user k's contribution at each antenna.
    pub per_user: Vec<Vec<TimeSignal>>,
    /// Noise at each antenna.
    pub noise: Vec<TimeSignal>,
}

impl UplinkComponents {
    pub fn total(&self) -> Vec<TimeSignal> {
        let mut out = self.noise.clone();
        for user in &self.per_user {
            for (acc, sig) in out.iter_mut().zip(user) {
                acc.samples
                    .iter_mut()
                    .zip(&sig.samples)
                    .for_each(|(a, b)| *a += b);
            }
        }
        out
    }
}

/// Exact time-domain uplink with its components kept separate.
///
/// `first_symbol` is the symbol index of the first OFDM symbol in `tx`
/// relative to the CFO reference instant; it may be negative (for pilots
/// sent before it). Sample `i` of symbol `n` is rotated by
/// `exp(j2π ε t / N_sc)` with `t = n(N_sc+L_cp) + i − L_cp`.
pub fn propagate_exact(
    tx: &[TimeSignal],
    channel: &ChannelMatrix,
    cfo: &CfoRealization,
    noise: &NoiseSpec,
    num: Numerology,
    first_symbol: i64,
) -> Result<UplinkComponents> {
    let k_users = channel.num_users();
    if tx.len() != k_users {
        return Err(Error::DimensionMismatch(format!(
            "{} transmit signals for {k_users} users",
            tx.len()
        )));
    }
    let sps = num.samples_per_symbol();
    let len = tx[0].samples.len();
    for t in tx {
        if t.samples.len() != len || t.samples_per_symbol != sps {
            return Err(Error::LengthMismatch {
                expected: len,
                actual: t.samples.len(),
            });
        }
    }
    if channel.num_subcarriers() != num.num_subcarriers {
        return Err(Error::DimensionMismatch(format!(
            "channel has {} subcarriers, numerology {}",
            channel.num_subcarriers(),
            num.num_subcarriers
        )));
    }
    cfo.validate(channel.num_daps(), k_users)?;
    let n_ant = channel.num_antennas();
    let n_per = channel.antennas_per_dap();
    let modem = OfdmModem::new(num);
    let n_sym = len / sps;

    // frequency-selective channels need each user's spectrum
    let spectra: Option<Vec<Vec<Vec<Complex64>>>> = if channel.is_flat() {
        None
    } else {
        Some(
            tx.iter()
                .map(|t| modem.demodulate_signal(t))
                .collect::<Result<_>>()?,
        )
    };

    let nf = num.num_subcarriers as f64;
    let phase_ramp = |eps: f64| -> Vec<Complex64> {
        (0..len)
            .map(|idx| {
                let n = (idx / sps) as i64 + first_symbol;
                let zeta = (idx % sps) as i64 - num.cp_len as i64;
                let t = (n * sps as i64 + zeta) as f64;
                Complex64::from_polar(1.0, 2.0 * std::f64::consts::PI * eps * t / nf)
            })
            .collect()
    };

    let mut per_user = Vec::with_capacity(k_users);
    for k in 0..k_users {
        let mut ants = Vec::with_capacity(n_ant);
        let mut ramp_cache: Option<(f64, Vec<Complex64>)> = None;
        for a in 0..n_ant {
            let m = a / n_per;
            let eps = cfo.eps(k, m);
            let mut samples = match &spectra {
                None => {
                    let h = channel.at(0)[(a, k)];
                    tx[k].samples.iter().map(|s| s * h).collect::<Vec<_>>()
                }
                Some(sp) => {
                    let rows: Vec<Vec<Complex64>> = (0..n_sym)
                        .map(|n| {
                            (0..num.num_subcarriers)
                                .map(|l| sp[k][n][l] * channel.at(l)[(a, k)])
                                .collect()
                        })
                        .collect();
                    modem.modulate_rows(&rows)?.samples
                }
            };
            if eps != 0.0 {
                if ramp_cache.as_ref().is_none_or(|(e, _)| *e != eps) {
                    ramp_cache = Some((eps, phase_ramp(eps)));
                }
                let ramp = &ramp_cache.as_ref().unwrap().1;
                samples.iter_mut().zip(ramp).for_each(|(s, r)| *s *= r);
            }
            ants.push(TimeSignal::new(samples, sps)?);
        }
        per_user.push(ants);
    }

    let mut rng = noise.rng();
    let noise_sig = (0..n_ant)
        .map(|_| {
            let samples = if noise.variance > 0.0 {
                (0..len)
                    .map(|_| complex_gaussian(&mut rng, noise.variance))
                    .collect()
            } else {
                vec![ZERO; len]
            };
            TimeSignal::new(samples, sps)
        })
        .collect::<Result<_>>()?;
    Ok(UplinkComponents {
        per_user,
        noise: noise_sig,
    })
}

/// Per-antenna received signal of the exact model.
pub fn apply_uplink_exact(
    tx: &[TimeSignal],
    channel: &ChannelMatrix,
    cfo: &CfoRealization,
    noise: &NoiseSpec,
    config: &SystemConfig,
) -> Result<Vec<TimeSignal>> {
    Ok(propagate_exact(tx, channel, cfo, noise, config.numerology(), 0)?.total())
}

/// y_m = Σ_k Ω_m[n]·h_km·s_k + z_m at one subcarrier.
///
/// Noise is CN(0, `noise_var`) per antenna drawn from `rng`.
#[allow(clippy::too_many_arguments)]
pub fn apply_uplink_simplified<R: Rng + ?Sized>(
    s: &[Complex64],
    channel: &ChannelMatrix,
    l: usize,
    cfo: &CfoRealization,
    n: usize,
    noise_var: f64,
    rng: &mut R,
    num: Numerology,
    model: OmegaModel,
) -> Result<CVector> {
    let h = channel.at(l);
    if s.len() != h.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "{} symbols for {} users",
            s.len(),
            h.ncols()
        )));
    }
    cfo.validate(channel.num_daps(), h.ncols())?;
    let n_per = channel.antennas_per_dap();
    let mut y = CVector::zeros(h.nrows());
    for k in 0..h.ncols() {
        for m in 0..channel.num_daps() {
            let om = model.evaluate(cfo.eps(k, m), n, num)?.omega * s[k];
            for i in 0..n_per {
                y[m * n_per + i] += om * h[(m * n_per + i, k)];
            }
        }
    }
    if noise_var > 0.0 {
        y.iter_mut()
            .for_each(|v| *v += complex_gaussian(rng, noise_var));
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cfo::ici_gain;
    use rand::SeedableRng;

    fn small_config() -> SystemConfig {
        SystemConfig {
            num_daps: 2,
            antennas_per_dap: 3,
            num_users: 2,
            num_subcarriers: 16,
            cp_len: 4,
            ..SystemConfig::default()
        }
    }

    #[test]
    fn rayleigh_power_and_determinism() {
        let cfg = SystemConfig::default();
        let a = rayleigh_channel(&cfg, Fading::Flat, &Correlation::None, 3).unwrap();
        let b = rayleigh_channel(&cfg, Fading::Flat, &Correlation::None, 3).unwrap();
        assert_eq!(a, b);
        let mut rng = SimRng::seed_from_u64(1);
        let draws = 100_000;
        let p: f64 = (0..draws)
            .map(|_| complex_gaussian(&mut rng, 1.0).norm_sqr())
            .sum::<f64>()
            / draws as f64;
        assert!((p - 1.0).abs() < 0.02);
        let sel = rayleigh_channel(&cfg, Fading::PerSubcarrier, &Correlation::None, 3).unwrap();
        assert!(!sel.is_flat());
        assert_ne!(sel.at(0), sel.at(1));
    }

    #[test]
    fn degenerate_correlation_gives_zero_channel() {
        let cfg = small_config();
        let r = CMatrix::zeros(6, 6);
        let h = rayleigh_channel(&cfg, Fading::Flat, &Correlation::Fixed(r), 9).unwrap();
        assert!(h.at(0).iter().all(|v| v.norm() == 0.0));
        let mut bad = CMatrix::identity(6, 6);
        bad[(0, 0)] = Complex64::new(-1.0, 0.0);
        assert!(matches!(
            rayleigh_channel(&cfg, Fading::Flat, &Correlation::Fixed(bad), 9),
            Err(Error::NotPsd(_))
        ));
    }

    #[test]
    fn correlation_sqrt_squares_back() {
        let mut rng = SimRng::seed_from_u64(4);
        let a = CMatrix::from_fn(6, 6, |_, _| complex_gaussian(&mut rng, 1.0));
        let r = &a * a.adjoint();
        let s = psd_sqrt(&r).unwrap();
        assert!((&s * &s - &r).norm() < 1e-9 * r.norm());
    }

    #[test]
    fn block_accessors() {
        let cfg = small_config();
        let h = rayleigh_channel(&cfg, Fading::Flat, &Correlation::None, 1).unwrap();
        let hm = h.h_m(0, 1);
        assert_eq!(hm.shape(), (3, 2));
        assert_eq!(hm[(2, 1)], h.at(0)[(5, 1)]);
        assert_eq!(h.h_km(0, 1, 1)[0], h.at(0)[(3, 1)]);
    }

    #[test]
    fn binary_and_csv_round_trip() {
        let cfg = small_config();
        for fading in [Fading::Flat, Fading::PerSubcarrier] {
            let h = rayleigh_channel(&cfg, fading, &Correlation::None, 2).unwrap();
            let mut buf = Vec::new();
            h.write_binary(&mut buf).unwrap();
            assert_eq!(buf.len(), 16 + 6 * 2 * 16 * 16);
            assert_eq!(&buf[0..4], &2u32.to_le_bytes());
            let back = ChannelMatrix::read_binary(&buf[..]).unwrap();
            assert_eq!(back, h);
        }
        let h = rayleigh_channel(&cfg, Fading::Flat, &Correlation::None, 2).unwrap();
        let mut buf = Vec::new();
        h.write_binary(&mut buf).unwrap();
        buf.pop();
        assert!(matches!(
            ChannelMatrix::read_binary(&buf[..]),
            Err(Error::MalformedFile(_))
        ));
        let mut csv = Vec::new();
        h.write_csv(&mut csv).unwrap();
        assert_eq!(
            String::from_utf8(csv).unwrap().lines().count(),
            1 + 16 * 6 * 2
        );
    }

    fn tone_signal(num: Numerology, q: usize, n_sym: usize) -> TimeSignal {
        let modem = OfdmModem::new(num);
        let mut x = vec![ZERO; num.num_subcarriers];
        x[q] = Complex64::new(1.0, 0.0);
        modem.modulate_rows(&vec![x; n_sym]).unwrap()
    }

    #[test]
    fn zero_cfo_single_user_scales_by_channel() {
        let cfg = SystemConfig {
            num_users: 1,
            ..small_config()
        };
        let num = cfg.numerology();
        let modem = OfdmModem::new(num);
        let mut rng = SimRng::seed_from_u64(7);
        let rows: Vec<Vec<Complex64>> = (0..3)
            .map(|_| (0..16).map(|_| complex_gaussian(&mut rng, 1.0)).collect())
            .collect();
        let tx = modem.modulate_rows(&rows).unwrap();
        for fading in [Fading::Flat, Fading::PerSubcarrier] {
            let h = rayleigh_channel(&cfg, fading, &Correlation::None, 5).unwrap();
            let rx = apply_uplink_exact(
                std::slice::from_ref(&tx),
                &h,
                &CfoRealization::zero(2),
                &NoiseSpec::noiseless(),
                &cfg,
            )
            .unwrap();
            for (a, sig) in rx.iter().enumerate() {
                let y = modem.demodulate_signal(sig).unwrap();
                for n in 0..3 {
                    for l in 0..16 {
                        let want = rows[n][l] * h.at(l)[(a, 0)];
                        assert!((y[n][l] - want).norm() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn cfo_tone_matches_kernel_expansion() {
        let cfg = SystemConfig {
            num_daps: 1,
            antennas_per_dap: 1,
            num_users: 1,
            ..SystemConfig::default()
        };
        let num = cfg.numerology();
        let h = ChannelMatrix::flat(
            1,
            1,
            64,
            CMatrix::from_element(1, 1, Complex64::new(1.0, 0.0)),
        )
        .unwrap();
        let (q, eps) = (5usize, 0.037);
        let tx = tone_signal(num, q, 4);
        let rx = apply_uplink_exact(
            &[tx],
            &h,
            &CfoRealization::common(eps, 1),
            &NoiseSpec::noiseless(),
            &cfg,
        )
        .unwrap();
        let y = OfdmModem::new(num).demodulate_signal(&rx[0]).unwrap();
        for (n, row) in y.iter().enumerate() {
            let pb = crate::cfo::phase_bar(eps, n, num);
            for (l, v) in row.iter().enumerate() {
                let want = Complex64::from_polar(1.0, pb) * ici_gain(eps, q as i64 - l as i64, 64);
                assert!((v - want).norm() < 1e-12, "n={n} l={l}");
            }
        }
    }

    #[test]
    fn noise_only_variance() {
        let cfg = SystemConfig {
            num_users: 1,
            ..small_config()
        };
        let h = ChannelMatrix::flat(2, 3, 16, CMatrix::zeros(6, 1)).unwrap();
        let tx = TimeSignal::zeros(500, 20);
        let noise = NoiseSpec::new(0.25, 11).unwrap();
        let rx = apply_uplink_exact(&[tx], &h, &CfoRealization::zero(2), &noise, &cfg).unwrap();
        for sig in &rx {
            let v =
                sig.samples.iter().map(|s| s.norm_sqr()).sum::<f64>() / sig.samples.len() as f64;
            assert!((v - 0.25).abs() < 0.02);
        }
    }

    #[test]
    fn simplified_reduces_to_linear_model() {
        let cfg = small_config();
        let num = cfg.numerology();
        let h = rayleigh_channel(&cfg, Fading::Flat, &Correlation::None, 8).unwrap();
        let s = [Complex64::new(0.3, -1.0), Complex64::new(-0.7, 0.2)];
        let mut rng = SimRng::seed_from_u64(0);
        let y = apply_uplink_simplified(
            &s,
            &h,
            0,
            &CfoRealization::zero(2),
            4,
            0.0,
            &mut rng,
            num,
            OmegaModel::Exact,
        )
        .unwrap();
        let want = h.at(0) * CVector::from_column_slice(&s);
        assert!((y - want).norm() < 1e-12);

        // shared Ω across the antennas of a dAP; received power Σ|h|²ω²
        let cfo = CfoRealization::per_dap(vec![0.02, -0.04]);
        let y = apply_uplink_simplified(
            &[Complex64::new(1.0, 0.0), ZERO],
            &h,
            0,
            &cfo,
            3,
            0.0,
            &mut rng,
            num,
            OmegaModel::Exact,
        )
        .unwrap();
        let mut want = 0.0;
        for m in 0..2 {
            let om = crate::cfo::omega_exact(cfo.dap_eps[m], 3, num);
            want += h.h_km(0, 0, m).norm_squared() * om.magnitude.powi(2);
            for i in 0..3 {
                let ratio = y[m * 3 + i] / h.at(0)[(m * 3 + i, 0)];
                assert!((ratio - om.omega).norm() < 1e-12);
            }
        }
        assert!((y.norm_squared() - want).abs() < 1e-12);
    }

    #[test]
    fn exact_equals_simplified_without_cfo() {
        let cfg = small_config();
        let num = cfg.numerology();
        let modem = OfdmModem::new(num);
        let h = rayleigh_channel(&cfg, Fading::PerSubcarrier, &Correlation::None, 6).unwrap();
        let mut rng = SimRng::seed_from_u64(3);
        let grids: Vec<Vec<Vec<Complex64>>> = (0..2)
            .map(|_| {
                (0..2)
                    .map(|_| (0..16).map(|_| complex_gaussian(&mut rng, 1.0)).collect())
                    .collect()
            })
            .collect();
        let tx: Vec<TimeSignal> = grids
            .iter()
            .map(|g| modem.modulate_rows(g).unwrap())
            .collect();
        let cfo = CfoRealization::zero(2);
        let rx = apply_uplink_exact(&tx, &h, &cfo, &NoiseSpec::noiseless(), &cfg).unwrap();
        for n in 0..2 {
            for l in 0..16 {
                let s = [grids[0][n][l], grids[1][n][l]];
                let y = apply_uplink_simplified(
                    &s,
                    &h,
                    l,
                    &cfo,
                    n,
                    0.0,
                    &mut rng,
                    num,
                    OmegaModel::Exact,
                )
                .unwrap();
                for a in 0..6 {
                    let ye = modem.demodulate_symbol(rx[a].symbol(n)).unwrap()[l];
                    assert!((ye - y[a]).norm() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn dimension_errors() {
        let cfg = small_config();
        let h = rayleigh_channel(&cfg, Fading::Flat, &Correlation::None, 1).unwrap();
        let tx = vec![TimeSignal::zeros(1, 20)];
        assert!(matches!(
            apply_uplink_exact(
                &tx,
                &h,
                &CfoRealization::zero(2),
                &NoiseSpec::noiseless(),
                &cfg
            ),
            Err(Error::DimensionMismatch(_))
        ));
        let tx = vec![TimeSignal::zeros(1, 20), TimeSignal::zeros(1, 20)];
        assert!(matches!(
            apply_uplink_exact(
                &tx,
                &h,
                &CfoRealization::zero(3),
                &NoiseSpec::noiseless(),
                &cfg
            ),
            Err(Error::LengthMismatch { .. })
        ));
    }
}
