//! Recorded IQ captures: HDF5 ingest, LTS channel and CFO estimates,
//! inter-dAP offset statistics and the EVM-SNR pipeline.
//!
//! Default layout (every name and offset is overridable via [`SchemaMap`]):
//!
//! - `/Data/Pilot_Samples`: int16 `[frame, cell, user, antenna, 2·samples]`,
//!   interleaved I/Q. Each record holds two LTS symbols with their prefixes.
//! - `/Data/UplinkData`: int16 `[frame, cell, slot, antenna, 2·samples]`.
//! - `/Data/TxData` (optional): f64 `[frame, user, symbol, 2·N_sc]`, the
//!   transmitted unit-energy spectra.
//! - Root attributes `FREQ`, `RATE`, `FFT_SIZE`, `CP_LEN`, `NUM_DAPS`,
//!   `ANT_PER_DAP`, `SYMS_PER_SLOT` and `SCENARIO`.

use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use hdf5::types::VarLenUnicode;
use ndarray::{s, Array3, Array4, Ix3};
use num_complex::Complex64;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::beamform::{combine, compute_weights, CbfNormalization, Method};
use crate::channel::{
    complex_gaussian, propagate_exact, rayleigh_channel_with, CMatrix, CVector, CfoRealization,
    ChannelMatrix, Correlation, Fading, NoiseSpec,
};
use crate::error::{Error, Result};
use crate::ofdm::{
    subcarrier_map, MapProfile, Modulation, Numerology, OfdmModem, SubcarrierMap, SystemConfig,
    TimeSignal,
};
use crate::seed::{derive_seed, rng_for, KahanSum};
use crate::simkit::{derotate_row, pilot_reference, user_grid};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Frames read from the file per parallel batch.
const BATCH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    #[serde(rename = "Cent-HUB")]
    CentHub,
    #[serde(rename = "Cent-LO")]
    CentLo,
    #[serde(rename = "Dist-HUB")]
    DistHub,
    #[serde(rename = "Dist-LO")]
    DistLo,
}

impl Scenario {
    pub fn name(&self) -> &'static str {
        match self {
            Scenario::CentHub => "Cent-HUB",
            Scenario::CentLo => "Cent-LO",
            Scenario::DistHub => "Dist-HUB",
            Scenario::DistLo => "Dist-LO",
        }
    }

    /// Independent oscillator per dAP.
    pub fn is_lo(&self) -> bool {
        matches!(self, Scenario::CentLo | Scenario::DistLo)
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let all = [
            Scenario::CentHub,
            Scenario::CentLo,
            Scenario::DistHub,
            Scenario::DistLo,
        ];
        all.into_iter()
            .find(|sc| sc.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown scenario `{s}`")))
    }
}

/// Attribute names for the metadata read from the file root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttrNames {
    pub carrier_freq: String,
    pub sample_rate: String,
    pub fft_size: String,
    pub cp_len: String,
    pub num_daps: String,
    pub antennas_per_dap: String,
    pub symbols_per_slot: String,
    pub scenario: String,
}

impl Default for AttrNames {
    fn default() -> Self {
        Self {
            carrier_freq: "FREQ".into(),
            sample_rate: "RATE".into(),
            fft_size: "FFT_SIZE".into(),
            cp_len: "CP_LEN".into(),
            num_daps: "NUM_DAPS".into(),
            antennas_per_dap: "ANT_PER_DAP".into(),
            symbols_per_slot: "SYMS_PER_SLOT".into(),
            scenario: "SCENARIO".into(),
        }
    }
}

/// Values that take precedence over (or stand in for) file attributes.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaOverrides {
    pub carrier_freq_hz: Option<f64>,
    pub sample_rate_hz: Option<f64>,
    pub num_subcarriers: Option<usize>,
    pub cp_len: Option<usize>,
    pub num_daps: Option<usize>,
    pub antennas_per_dap: Option<usize>,
    pub symbols_per_slot: Option<usize>,
    pub scenario: Option<Scenario>,
}

/// Where things live in a capture file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchemaMap {
    pub pilot_path: String,
    pub data_path: String,
    /// Optional; absence just disables the known-symbol EVM reference.
    pub tx_path: String,
    pub cell: usize,
    /// Samples to skip at the start of each pilot record.
    pub pilot_offset: usize,
    /// Samples to skip at the start of each data slot.
    pub data_offset: usize,
    /// Full-scale conversion from int16 to float.
    pub iq_scale: f64,
    pub map: MapProfile,
    pub attrs: AttrNames,
    pub overrides: MetaOverrides,
}

impl Default for SchemaMap {
    fn default() -> Self {
        Self {
            pilot_path: "/Data/Pilot_Samples".into(),
            data_path: "/Data/UplinkData".into(),
            tx_path: "/Data/TxData".into(),
            cell: 0,
            pilot_offset: 0,
            data_offset: 0,
            iq_scale: 1.0 / 32768.0,
            map: MapProfile::Ieee80211,
            attrs: AttrNames::default(),
            overrides: MetaOverrides::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetMeta {
    pub num_frames: usize,
    pub num_daps: usize,
    pub antennas_per_dap: usize,
    pub num_users: usize,
    pub num_subcarriers: usize,
    pub cp_len: usize,
    pub sample_rate_hz: f64,
    pub subcarrier_spacing_hz: f64,
    pub carrier_freq_hz: f64,
    /// Two-LTS pilot slots per user per frame.
    pub pilot_slots_per_user: usize,
    pub data_slots: usize,
    pub symbols_per_slot: usize,
    pub scenario: Option<Scenario>,
    pub has_tx: bool,
}

impl DatasetMeta {
    pub fn num_antennas(&self) -> usize {
        self.num_daps * self.antennas_per_dap
    }

    /// Data OFDM symbols per frame.
    pub fn data_symbols(&self) -> usize {
        self.data_slots * self.symbols_per_slot
    }

    pub fn numerology(&self) -> Numerology {
        Numerology::new(self.num_subcarriers, self.cp_len)
    }

    pub fn sample_period_s(&self) -> f64 {
        1.0 / self.sample_rate_hz
    }

    pub fn dap_of(&self, antenna: usize) -> usize {
        antenna / self.antennas_per_dap
    }

    pub fn cfo_from_hz(&self, hz: f64) -> CfoEstimate {
        CfoEstimate::from_hz(hz, self.subcarrier_spacing_hz, self.carrier_freq_hz)
    }

    pub fn system_config(&self) -> SystemConfig {
        SystemConfig {
            num_daps: self.num_daps,
            antennas_per_dap: self.antennas_per_dap,
            num_users: self.num_users,
            num_subcarriers: self.num_subcarriers,
            cp_len: self.cp_len,
            subcarrier_spacing_hz: self.subcarrier_spacing_hz,
            carrier_freq_hz: self.carrier_freq_hz,
            slot_symbols: self.data_symbols(),
            ..SystemConfig::default()
        }
    }
}

/// A frequency offset in the three customary units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CfoEstimate {
    pub hz: f64,
    /// Normalized by the subcarrier spacing.
    pub eps: f64,
    /// Parts per billion of the carrier.
    pub ppb: f64,
}

impl CfoEstimate {
    pub fn from_hz(hz: f64, subcarrier_spacing_hz: f64, carrier_freq_hz: f64) -> Self {
        Self {
            hz,
            eps: hz / subcarrier_spacing_hz,
            ppb: hz / carrier_freq_hz * 1e9,
        }
    }
}

/// Time-domain two-LTS pilot of one user at one antenna, prefix included.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotRecord {
    pub user: usize,
    pub antenna: usize,
    pub samples: Vec<Complex64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub index: usize,
    /// `pilots[user][antenna]`.
    pub pilots: Vec<Vec<PilotRecord>>,
    /// All data symbols of the frame, one signal per antenna.
    pub data: Vec<TimeSignal>,
    /// `tx[user][symbol][subcarrier]` when the file carries it.
    pub tx: Option<Vec<Vec<Vec<Complex64>>>>,
}

/// An open capture. Frames are read on demand.
pub struct DatasetReader {
    meta: DatasetMeta,
    schema: SchemaMap,
    pilots: hdf5::Dataset,
    data: hdf5::Dataset,
    tx: Option<hdf5::Dataset>,
}

impl std::fmt::Debug for DatasetReader {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DatasetReader")
            .field("meta", &self.meta)
            .finish()
    }
}

/// Checks every prefix so HDF5 never reports a missing intermediate group.
fn path_exists(file: &hdf5::File, path: &str) -> bool {
    let mut cur = String::new();
    path.trim_matches('/').split('/').all(|part| {
        cur.push('/');
        cur.push_str(part);
        file.link_exists(&cur)
    })
}

fn open_dataset(file: &hdf5::File, path: &str) -> Result<hdf5::Dataset> {
    if !path_exists(file, path) {
        return Err(Error::MissingDataset(path.to_string()));
    }
    file.dataset(path)
        .map_err(|_| Error::MissingDataset(path.to_string()))
}

fn has_attr(file: &hdf5::File, name: &str) -> Result<bool> {
    Ok(file.attr_names()?.iter().any(|a| a == name))
}

fn read_num_attr(file: &hdf5::File, name: &str) -> Result<Option<f64>> {
    if !has_attr(file, name)? {
        return Ok(None);
    }
    let v = file.attr(name)?.read_raw::<f64>()?;
    Ok(v.first().copied())
}

fn require(value: Option<f64>, name: &str) -> Result<f64> {
    value.ok_or_else(|| Error::MissingDataset(format!("attribute {name}")))
}

fn shape_err(path: &str, frame: Option<usize>, detail: String) -> Error {
    Error::ShapeMismatch {
        path: path.to_string(),
        frame,
        detail,
    }
}

/// Opens a capture and validates its shapes against the metadata.
pub fn load_hdf5(path: &Path, schema: &SchemaMap) -> Result<DatasetReader> {
    if !path.exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} not found", path.display()),
        )));
    }
    let file = hdf5::File::open(path)?;
    let pilots = open_dataset(&file, &schema.pilot_path)?;
    let data = open_dataset(&file, &schema.data_path)?;
    let tx = open_dataset(&file, &schema.tx_path).ok();

    let a = &schema.attrs;
    let o = &schema.overrides;
    let num = |ov: Option<f64>, name: &str| -> Result<f64> {
        match ov {
            Some(v) => Ok(v),
            None => require(read_num_attr(&file, name)?, name),
        }
    };
    let carrier_freq_hz = num(o.carrier_freq_hz, &a.carrier_freq)?;
    let sample_rate_hz = num(o.sample_rate_hz, &a.sample_rate)?;
    let num_subcarriers = num(o.num_subcarriers.map(|v| v as f64), &a.fft_size)? as usize;
    let cp_len = num(o.cp_len.map(|v| v as f64), &a.cp_len)? as usize;
    let symbols_per_slot = match o.symbols_per_slot {
        Some(v) => v,
        None => read_num_attr(&file, &a.symbols_per_slot)?.map_or(1, |v| v as usize),
    };
    let scenario = match o.scenario {
        Some(s) => Some(s),
        None if has_attr(&file, &a.scenario)? => file
            .attr(&a.scenario)?
            .read_scalar::<VarLenUnicode>()
            .ok()
            .and_then(|s| Scenario::from_str(s.as_str()).ok()),
        None => None,
    };

    let ps = pilots.shape();
    if ps.len() != 5 {
        return Err(shape_err(
            &schema.pilot_path,
            None,
            format!("expected 5 dimensions, got {ps:?}"),
        ));
    }
    let (num_frames, cells, num_users, num_ant, p_len) = (ps[0], ps[1], ps[2], ps[3], ps[4]);
    if schema.cell >= cells {
        return Err(shape_err(
            &schema.pilot_path,
            None,
            format!("cell {} of {cells}", schema.cell),
        ));
    }
    let num_daps = match o.num_daps {
        Some(v) => v,
        None => read_num_attr(&file, &a.num_daps)?.map_or(1, |v| v as usize),
    };
    let antennas_per_dap = match o.antennas_per_dap {
        Some(v) => v,
        None => read_num_attr(&file, &a.antennas_per_dap)?
            .map_or(num_ant / num_daps.max(1), |v| v as usize),
    };
    if num_daps == 0 || antennas_per_dap == 0 {
        return Err(Error::InvalidConfig(
            "dataset needs at least one dAP and antenna".into(),
        ));
    }
    if num_daps * antennas_per_dap != num_ant {
        return Err(Error::MissingAntennas {
            expected: num_daps * antennas_per_dap,
            actual: num_ant,
        });
    }
    let sps = num_subcarriers + cp_len;
    if p_len % 2 != 0 || p_len / 2 < schema.pilot_offset + 2 * sps {
        return Err(shape_err(
            &schema.pilot_path,
            None,
            format!(
                "{p_len} values per record, need 2·({} + 2·{sps})",
                schema.pilot_offset
            ),
        ));
    }

    let ds = data.shape();
    if ds.len() != 5 {
        return Err(shape_err(
            &schema.data_path,
            None,
            format!("expected 5 dimensions, got {ds:?}"),
        ));
    }
    if ds[0] != num_frames {
        return Err(shape_err(
            &schema.data_path,
            Some(ds[0].min(num_frames)),
            format!("{} data frames for {num_frames} pilot frames", ds[0]),
        ));
    }
    if schema.cell >= ds[1] || ds[3] != num_ant {
        return Err(shape_err(
            &schema.data_path,
            None,
            format!("shape {ds:?} does not match {cells} cells and {num_ant} antennas"),
        ));
    }
    if ds[4] % 2 != 0 || ds[4] / 2 < schema.data_offset + symbols_per_slot * sps {
        return Err(shape_err(
            &schema.data_path,
            None,
            format!(
                "{} values per slot, need 2·({} + {symbols_per_slot}·{sps})",
                ds[4], schema.data_offset
            ),
        ));
    }
    let data_slots = ds[2];

    if let Some(t) = &tx {
        let ts = t.shape();
        let want = [
            num_frames,
            num_users,
            data_slots * symbols_per_slot,
            2 * num_subcarriers,
        ];
        if ts.len() != 4 || ts[1..] != want[1..] {
            return Err(shape_err(
                &schema.tx_path,
                None,
                format!("shape {ts:?}, expected {want:?}"),
            ));
        }
        if ts[0] != num_frames {
            return Err(shape_err(
                &schema.tx_path,
                Some(ts[0].min(num_frames)),
                format!("{} frames, expected {num_frames}", ts[0]),
            ));
        }
    }

    let meta = DatasetMeta {
        num_frames,
        num_daps,
        antennas_per_dap,
        num_users,
        num_subcarriers,
        cp_len,
        sample_rate_hz,
        subcarrier_spacing_hz: sample_rate_hz / num_subcarriers as f64,
        carrier_freq_hz,
        pilot_slots_per_user: 1,
        data_slots,
        symbols_per_slot,
        scenario,
        has_tx: tx.is_some(),
    };
    Ok(DatasetReader {
        meta,
        schema: schema.clone(),
        pilots,
        data,
        tx,
    })
}

fn iq(raw: &[i16], scale: f64) -> Vec<Complex64> {
    raw.chunks_exact(2)
        .map(|p| Complex64::new(p[0] as f64 * scale, p[1] as f64 * scale))
        .collect()
}

impl DatasetReader {
    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn schema(&self) -> &SchemaMap {
        &self.schema
    }

    /// Reads and converts one frame.
    pub fn frame(&self, index: usize) -> Result<Frame> {
        let m = &self.meta;
        if index >= m.num_frames {
            return Err(shape_err(
                &self.schema.pilot_path,
                Some(index),
                format!("frame out of range (file has {})", m.num_frames),
            ));
        }
        let cell = self.schema.cell;
        let scale = self.schema.iq_scale;
        let sps = m.numerology().samples_per_symbol();

        let p: Array3<i16> = self
            .pilots
            .read_slice::<i16, _, Ix3>(s![index, cell, .., .., ..])?;
        let (p0, p1) = (self.schema.pilot_offset, self.schema.pilot_offset + 2 * sps);
        let pilots = (0..m.num_users)
            .map(|k| {
                (0..m.num_antennas())
                    .map(|a| {
                        let row = p.slice(s![k, a, 2 * p0..2 * p1]);
                        PilotRecord {
                            user: k,
                            antenna: a,
                            samples: iq(&row.to_vec(), scale),
                        }
                    })
                    .collect()
            })
            .collect();

        let d: Array3<i16> = self
            .data
            .read_slice::<i16, _, Ix3>(s![index, cell, .., .., ..])?;
        let (d0, d1) = (
            self.schema.data_offset,
            self.schema.data_offset + m.symbols_per_slot * sps,
        );
        let data = (0..m.num_antennas())
            .map(|a| {
                let mut samples = Vec::with_capacity(m.data_symbols() * sps);
                for slot in 0..m.data_slots {
                    samples.extend(iq(&d.slice(s![slot, a, 2 * d0..2 * d1]).to_vec(), scale));
                }
                TimeSignal::new(samples, sps)
            })
            .collect::<Result<_>>()?;

        let tx = match &self.tx {
            Some(ds) => {
                let t: Array3<f64> = ds.read_slice::<f64, _, Ix3>(s![index, .., .., ..])?;
                Some(
                    (0..m.num_users)
                        .map(|k| {
                            (0..m.data_symbols())
                                .map(|n| {
                                    (0..m.num_subcarriers)
                                        .map(|l| {
                                            Complex64::new(t[[k, n, 2 * l]], t[[k, n, 2 * l + 1]])
                                        })
                                        .collect()
                                })
                                .collect()
                        })
                        .collect(),
                )
            }
            None => None,
        };
        Ok(Frame {
            index,
            pilots,
            data,
            tx,
        })
    }

    pub fn frames(&self) -> impl Iterator<Item = Result<Frame>> + '_ {
        (0..self.meta.num_frames).map(move |f| self.frame(f))
    }
}

/// Reads frames sequentially in batches and processes each batch in
/// parallel; results come back in frame order.
fn map_frames<T, F>(reader: &DatasetReader, max_frames: Option<usize>, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&Frame) -> Result<T> + Sync,
{
    let total = max_frames.map_or(reader.meta.num_frames, |n| n.min(reader.meta.num_frames));
    let mut out = Vec::with_capacity(total);
    let mut start = 0;
    while start < total {
        let end = (start + BATCH).min(total);
        let batch: Vec<Frame> = (start..end)
            .map(|i| reader.frame(i))
            .collect::<Result<_>>()?;
        let res: Vec<T> = batch.par_iter().map(&f).collect::<Result<_>>()?;
        out.extend(res);
        start = end;
    }
    Ok(out)
}

/// Demodulation context for the known-LTS pilots of a capture.
#[derive(Debug)]
pub struct LtsReceiver {
    pub modem: OfdmModem,
    pub map: SubcarrierMap,
    /// Known pilot spectrum (zero off the occupied tones).
    pub reference: Vec<Complex64>,
}

impl LtsReceiver {
    pub fn new(meta: &DatasetMeta, profile: &MapProfile) -> Result<Self> {
        let cfg = meta.system_config();
        let map = subcarrier_map(meta.num_subcarriers, profile)?;
        let reference = pilot_reference(&cfg, &map);
        Ok(Self {
            modem: OfdmModem::new(meta.numerology()),
            map,
            reference,
        })
    }
}

/// Per-tone LS channel: the two demodulated LTS symbols averaged and
/// divided by the known tone value. Null tones are `None`.
pub fn estimate_channel_ls(
    pilot: &PilotRecord,
    rx: &LtsReceiver,
) -> Result<Vec<Option<Complex64>>> {
    let sps = rx.modem.numerology().samples_per_symbol();
    if pilot.samples.len() != 2 * sps {
        return Err(Error::LengthMismatch {
            expected: 2 * sps,
            actual: pilot.samples.len(),
        });
    }
    let y0 = rx.modem.demodulate_symbol(&pilot.samples[..sps])?;
    let y1 = rx.modem.demodulate_symbol(&pilot.samples[sps..])?;
    let mut out = vec![None; rx.map.len()];
    for l in rx.map.occupied_indices() {
        let x = rx.reference[l];
        if x == ZERO {
            return Err(Error::ZeroReference(l));
        }
        out[l] = Some((y0[l] + y1[l]) / (2.0 * x));
    }
    Ok(out)
}

/// Phase slope between the two LTS repetitions:
/// `angle(Σ y[t+N+L]·y*[t]) / (2π(N+L)T_s)`. Unambiguous for
/// `|δ| < 1/(2(N+L)T_s)`.
pub fn estimate_cfo(pilot: &PilotRecord, meta: &DatasetMeta) -> Result<CfoEstimate> {
    Ok(cfo_from_correlation(pilot_correlation(pilot, meta)?, meta))
}

/// Lag-one-symbol correlation Σ y₂·y₁* of the two LTS repetitions.
pub fn pilot_correlation(pilot: &PilotRecord, meta: &DatasetMeta) -> Result<Complex64> {
    let sps = meta.numerology().samples_per_symbol();
    if pilot.samples.len() != 2 * sps {
        return Err(Error::LengthMismatch {
            expected: 2 * sps,
            actual: pilot.samples.len(),
        });
    }
    let (a, b) = pilot.samples.split_at(sps);
    let corr: Complex64 = b.iter().zip(a).map(|(y2, y1)| y2 * y1.conj()).sum();
    let energy: f64 = pilot.samples.iter().map(|v| v.norm_sqr()).sum();
    if energy == 0.0 || corr.norm() <= 1e-12 * energy {
        return Err(Error::NoSignal);
    }
    Ok(corr)
}

fn cfo_from_correlation(corr: Complex64, meta: &DatasetMeta) -> CfoEstimate {
    let lag = meta.numerology().samples_per_symbol() as f64 * meta.sample_period_s();
    meta.cfo_from_hz(corr.arg() / (2.0 * std::f64::consts::PI * lag))
}

/// Offsets of one frame, `est[user][antenna]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameCfo {
    pub frame: usize,
    pub est: Vec<Vec<CfoEstimate>>,
    /// The pilot correlations behind `est`.
    pub corr: Vec<Vec<Complex64>>,
}

pub fn estimate_frame_cfo(frame: &Frame, meta: &DatasetMeta) -> Result<FrameCfo> {
    let corr: Vec<Vec<Complex64>> = frame
        .pilots
        .iter()
        .map(|ants| {
            ants.iter()
                .map(|p| pilot_correlation(p, meta))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let est = corr
        .iter()
        .map(|ants| {
            ants.iter()
                .map(|&c| cfo_from_correlation(c, meta))
                .collect()
        })
        .collect();
    Ok(FrameCfo {
        frame: frame.index,
        est,
        corr,
    })
}

/// Per-antenna offset of the whole capture: the phase of the pilot
/// correlations summed over frames, which weights each frame by its received
/// energy. An arithmetic mean of per-frame estimates is dominated by the few
/// deeply faded frames.
pub fn mean_frame_cfo(frames: &[FrameCfo], meta: &DatasetMeta) -> Vec<Vec<CfoEstimate>> {
    let Some(first) = frames.first() else {
        return Vec::new();
    };
    first
        .corr
        .iter()
        .enumerate()
        .map(|(k, ants)| {
            (0..ants.len())
                .map(|a| cfo_from_correlation(frames.iter().map(|f| f.corr[k][a]).sum(), meta))
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DapStats {
    pub dap: usize,
    /// Mean over frames and users of the dAP-average offset relative to the
    /// reference antenna.
    pub mean_rel_eps: f64,
    /// Across-frame STD of that dAP average.
    pub std_rel_eps: f64,
    /// Mean absolute (user-to-antenna) offset over the dAP.
    pub mean_abs_eps: f64,
    /// STD across the dAP's antennas of their frame-averaged relative offsets.
    pub intra_std_eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InterDapStats {
    pub reference_antenna: usize,
    pub per_dap: Vec<DapStats>,
    /// STD of the per-dAP means across dAPs, pooled over frames and users.
    pub beta_hat: f64,
    /// Diagnostic: RMS over dAPs of the across-frame STD.
    pub beta_frames: f64,
    pub samples: usize,
}

fn sample_var(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

/// Inter-dAP statistics of offsets measured relative to `reference`.
pub fn inter_dap_cfo_stats(
    frames: &[FrameCfo],
    meta: &DatasetMeta,
    reference: usize,
) -> Result<InterDapStats> {
    let n_ant = meta.num_antennas();
    if frames.is_empty() {
        return Err(Error::Empty);
    }
    if reference >= n_ant {
        return Err(Error::InvalidConfig(format!(
            "reference antenna {reference} of {n_ant}"
        )));
    }
    let (m_daps, np) = (meta.num_daps, meta.antennas_per_dap);
    let mut var_across = KahanSum::default();
    let mut ant_sum = vec![KahanSum::default(); n_ant];
    let mut dap_means: Vec<Vec<f64>> = vec![Vec::new(); m_daps];
    let mut abs_sum = vec![KahanSum::default(); m_daps];
    let mut count = 0usize;
    for fc in frames {
        for ants in &fc.est {
            if ants.len() != n_ant {
                return Err(Error::MissingAntennas {
                    expected: n_ant,
                    actual: ants.len(),
                });
            }
            let r = ants[reference].eps;
            let means: Vec<f64> = (0..m_daps)
                .map(|m| {
                    let rel: Vec<f64> = ants[m * np..(m + 1) * np]
                        .iter()
                        .map(|e| e.eps - r)
                        .collect();
                    for (acc, v) in ant_sum[m * np..(m + 1) * np].iter_mut().zip(&rel) {
                        acc.add(*v);
                    }
                    abs_sum[m].add(
                        ants[m * np..(m + 1) * np]
                            .iter()
                            .map(|e| e.eps)
                            .sum::<f64>()
                            / np as f64,
                    );
                    rel.iter().sum::<f64>() / np as f64
                })
                .collect();
            var_across.add(sample_var(&means));
            for (m, v) in means.into_iter().enumerate() {
                dap_means[m].push(v);
            }
            count += 1;
        }
    }
    let c = count as f64;
    let per_dap: Vec<DapStats> = (0..m_daps)
        .map(|m| DapStats {
            dap: m,
            mean_rel_eps: dap_means[m].iter().sum::<f64>() / c,
            std_rel_eps: sample_var(&dap_means[m]).sqrt(),
            mean_abs_eps: abs_sum[m].value() / c,
            intra_std_eps: sample_var(
                &ant_sum[m * np..(m + 1) * np]
                    .iter()
                    .map(|a| a.value() / c)
                    .collect::<Vec<_>>(),
            )
            .sqrt(),
        })
        .collect();
    let beta_frames =
        (per_dap.iter().map(|d| d.std_rel_eps.powi(2)).sum::<f64>() / m_daps as f64).sqrt();
    Ok(InterDapStats {
        reference_antenna: reference,
        per_dap,
        beta_hat: (var_across.value() / c).sqrt(),
        beta_frames,
        samples: count,
    })
}

impl InterDapStats {
    pub fn write_csv<W: Write>(&self, meta: &DatasetMeta, out: W) -> Result<()> {
        let ppb = |eps: f64| meta.cfo_from_hz(eps * meta.subcarrier_spacing_hz).ppb;
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "dap",
            "mean_rel_eps",
            "std_rel_eps",
            "mean_rel_ppb",
            "std_rel_ppb",
            "mean_abs_ppb",
            "intra_std_ppb",
        ])?;
        for d in &self.per_dap {
            w.serialize((
                d.dap,
                d.mean_rel_eps,
                d.std_rel_eps,
                ppb(d.mean_rel_eps),
                ppb(d.std_rel_eps),
                ppb(d.mean_abs_eps),
                ppb(d.intra_std_eps),
            ))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One row per (frame, user, antenna) estimate, in frame order.
pub fn write_cfo_csv<W: Write>(frames: &[FrameCfo], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["antenna", "user", "hz", "ppb", "eps"])?;
    for fc in frames {
        for (k, ants) in fc.est.iter().enumerate() {
            for (a, e) in ants.iter().enumerate() {
                w.serialize((a, k, e.hz, e.ppb, e.eps))?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvmReference {
    /// Hard QPSK decisions on the equalized symbols.
    #[default]
    Decision,
    /// The transmitted symbols stored in the file.
    Known,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineOptions {
    pub method: Method,
    pub cbf_normalization: CbfNormalization,
    pub phase_correction: bool,
    pub reference: EvmReference,
    pub max_frames: Option<usize>,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            method: Method::ZfCentral,
            cbf_normalization: CbfNormalization::default(),
            phase_correction: true,
            reference: EvmReference::Decision,
            max_frames: None,
        }
    }
}

/// Squared-error sums of one frame, `err[user][symbol]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameEvm {
    pub frame: usize,
    pub err: Vec<Vec<f64>>,
    pub count: usize,
}

impl FrameEvm {
    pub fn evm_rms(&self, user: usize) -> f64 {
        let e: f64 = self.err[user].iter().sum();
        (e / (self.count * self.err[user].len()) as f64).sqrt()
    }
}

/// Channel estimates → weights → combining → equalization by `ŵ_kᴴĥ_k` →
/// optional pilot phase correction → EVM against the chosen reference.
pub fn process_frame(
    frame: &Frame,
    meta: &DatasetMeta,
    rx: &LtsReceiver,
    opts: &PipelineOptions,
) -> Result<FrameEvm> {
    let (k_users, n_ant, n_sc) = (meta.num_users, meta.num_antennas(), meta.num_subcarriers);
    let tx = match (opts.reference, &frame.tx) {
        (EvmReference::Known, None) => {
            return Err(Error::MissingDataset(
                "transmitted symbols (known EVM reference)".into(),
            ))
        }
        (EvmReference::Known, Some(t)) => Some(t),
        (EvmReference::Decision, _) => None,
    };
    let mut h: Vec<CMatrix> = vec![CMatrix::zeros(n_ant, k_users); n_sc];
    for (k, ants) in frame.pilots.iter().enumerate() {
        for (a, p) in ants.iter().enumerate() {
            for (l, v) in estimate_channel_ls(p, rx)?.into_iter().enumerate() {
                if let Some(v) = v {
                    h[l][(a, k)] = v;
                }
            }
        }
    }
    let tones = rx.map.occupied_indices();
    let mut weights = vec![None; n_sc];
    for &l in &tones {
        weights[l] = Some(compute_weights(
            opts.method,
            &h[l],
            meta.num_daps,
            opts.cbf_normalization,
        )?);
    }
    let gains: Vec<Vec<Complex64>> = (0..n_sc)
        .map(|l| match &weights[l] {
            Some(w) => (0..k_users)
                .map(|k| w.matrix().column(k).dotc(&h[l].column(k)))
                .collect(),
            None => vec![ZERO; k_users],
        })
        .collect();

    let n_sym = meta.data_symbols();
    let mut err = vec![vec![0.0; n_sym]; k_users];
    for n in 0..n_sym {
        let spectra: Vec<Vec<Complex64>> = frame
            .data
            .iter()
            .map(|sig| rx.modem.demodulate_symbol(sig.symbol(n)))
            .collect::<Result<_>>()?;
        let mut rows = vec![vec![ZERO; n_sc]; k_users];
        for &l in &tones {
            let y = CVector::from_fn(n_ant, |a, _| spectra[a][l]);
            let s_hat = combine(weights[l].as_ref().unwrap(), &y)?;
            for k in 0..k_users {
                rows[k][l] = s_hat[k] / gains[l][k];
            }
        }
        for (k, row) in rows.iter_mut().enumerate() {
            if opts.phase_correction {
                derotate_row(row, &rx.map)?;
            }
            let mut e = KahanSum::default();
            for &l in rx.map.data_indices() {
                let r = match tx {
                    Some(t) => t[k][n][l],
                    None => Modulation::Qpsk.slice(row[l]),
                };
                e.add((row[l] - r).norm_sqr());
            }
            err[k][n] = e.value();
        }
    }
    Ok(FrameEvm {
        frame: frame.index,
        err,
        count: rx.map.data_indices().len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UserEvm {
    pub user: usize,
    pub frames: usize,
    /// Pooled over frames, symbols and data tones.
    pub evm_rms: f64,
    /// Mean over frames of the per-frame EVM-SNR in dB.
    pub evm_snr_db: f64,
    pub evm_snr_pooled_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvmTable {
    pub method: Method,
    pub users: Vec<UserEvm>,
    /// Pooled EVM at each data symbol, `per_symbol[symbol][user]`.
    pub per_symbol: Vec<Vec<f64>>,
}

impl EvmTable {
    pub fn from_frames(method: Method, frames: &[FrameEvm]) -> Result<Self> {
        let first = frames.first().ok_or(Error::Empty)?;
        let (k_users, n_sym, cnt) = (first.err.len(), first.err[0].len(), first.count as f64);
        let f = frames.len() as f64;
        let users = (0..k_users)
            .map(|k| {
                let tot: KahanSum = frames
                    .iter()
                    .flat_map(|fe| fe.err[k].iter().copied())
                    .collect();
                let evm = (tot.value() / (f * n_sym as f64 * cnt)).sqrt();
                let snr: KahanSum = frames
                    .iter()
                    .map(|fe| -20.0 * fe.evm_rms(k).log10())
                    .collect();
                UserEvm {
                    user: k,
                    frames: frames.len(),
                    evm_rms: evm,
                    evm_snr_db: snr.value() / f,
                    evm_snr_pooled_db: -20.0 * evm.log10(),
                }
            })
            .collect();
        let per_symbol = (0..n_sym)
            .map(|n| {
                (0..k_users)
                    .map(|k| {
                        let e: KahanSum = frames.iter().map(|fe| fe.err[k][n]).collect();
                        (e.value() / (f * cnt)).sqrt()
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            method,
            users,
            per_symbol,
        })
    }

    /// Mean over users of the per-user mean EVM-SNR.
    pub fn mean_evm_snr_db(&self) -> f64 {
        self.users.iter().map(|u| u.evm_snr_db).sum::<f64>() / self.users.len() as f64
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "method",
            "user",
            "frames",
            "evm_pct",
            "evm_snr_db",
            "evm_snr_pooled_db",
        ])?;
        for u in &self.users {
            w.serialize((
                self.method.name(),
                u.user,
                u.frames,
                100.0 * u.evm_rms,
                u.evm_snr_db,
                u.evm_snr_pooled_db,
            ))?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn evm_snr_pipeline(reader: &DatasetReader, opts: &PipelineOptions) -> Result<EvmTable> {
    let meta = reader.meta();
    let rx = LtsReceiver::new(meta, &reader.schema().map)?;
    let frames = map_frames(reader, opts.max_frames, |f| {
        process_frame(f, meta, &rx, opts)
    })?;
    EvmTable::from_frames(opts.method, &frames)
}

/// All per-frame CFO estimates of a capture.
pub fn estimate_dataset_cfo(
    reader: &DatasetReader,
    max_frames: Option<usize>,
) -> Result<Vec<FrameCfo>> {
    map_frames(reader, max_frames, |f| estimate_frame_cfo(f, reader.meta()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Analysis {
    pub cfo: Vec<FrameCfo>,
    /// Capture-wide offsets, `[user][antenna]`.
    pub mean_cfo: Vec<Vec<CfoEstimate>>,
    pub stats: InterDapStats,
    pub evm: EvmTable,
}

/// CFO estimates, inter-dAP statistics and EVM-SNR in one pass over the file.
pub fn analyze(
    reader: &DatasetReader,
    opts: &PipelineOptions,
    reference: usize,
) -> Result<Analysis> {
    let meta = reader.meta();
    let rx = LtsReceiver::new(meta, &reader.schema().map)?;
    let out = map_frames(reader, opts.max_frames, |f| {
        Ok((
            estimate_frame_cfo(f, meta)?,
            process_frame(f, meta, &rx, opts)?,
        ))
    })?;
    let (cfo, evm): (Vec<_>, Vec<_>) = out.into_iter().unzip();
    Ok(Analysis {
        stats: inter_dap_cfo_stats(&cfo, meta, reference)?,
        mean_cfo: mean_frame_cfo(&cfo, meta),
        evm: EvmTable::from_frames(opts.method, &evm)?,
        cfo,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PilotTiming {
    /// User k's pilot occupies symbols `2k − 2K` and `2k − 2K + 1` before
    /// the first data symbol, carrying the offsets accumulated there.
    #[default]
    Scheduled,
    /// Pilots carry no offset, as in the Monte Carlo engine.
    Synchronized,
}

/// Parameters of a synthetic capture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    /// `slot_symbols` is the number of data symbols per frame.
    pub config: SystemConfig,
    pub scenario: Scenario,
    pub frames: usize,
    /// LO modes: STD of the normalized per-dAP offset.
    pub beta: f64,
    /// Redraw the per-dAP offsets every frame instead of once per file.
    pub redraw_per_frame: bool,
    /// LO modes: normalized per-dAP offsets instead of draws. One row is
    /// used for every frame; otherwise there must be one row per frame.
    pub dap_offsets: Option<Vec<Vec<f64>>>,
    /// Transmitter offset of each user in Hz (empty: none).
    pub user_offsets_hz: Vec<f64>,
    pub pilot_timing: PilotTiming,
    pub fading: Fading,
    /// One channel for the whole file instead of one per frame.
    pub fixed_channel: bool,
    pub symbols_per_slot: usize,
    /// Scale applied before int16 quantization.
    pub digital_gain: f64,
    pub write_tx: bool,
    pub map: MapProfile,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            config: SystemConfig::default(),
            scenario: Scenario::DistLo,
            frames: 100,
            beta: 0.0078,
            redraw_per_frame: true,
            dap_offsets: None,
            user_offsets_hz: Vec::new(),
            pilot_timing: PilotTiming::Scheduled,
            fading: Fading::Flat,
            fixed_channel: false,
            symbols_per_slot: 1,
            digital_gain: 1.0 / 32.0,
            write_tx: true,
            map: MapProfile::Ieee80211,
            seed: 1,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.frames == 0 {
            return Err(Error::InvalidConfig("frames must be positive".into()));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::NegativeParameter(self.beta));
        }
        if self.symbols_per_slot == 0 || self.config.slot_symbols % self.symbols_per_slot != 0 {
            return Err(Error::InvalidConfig(format!(
                "{} data symbols do not split into slots of {}",
                self.config.slot_symbols, self.symbols_per_slot
            )));
        }
        if let Some(rows) = &self.dap_offsets {
            if rows.len() != 1 && rows.len() != self.frames {
                return Err(Error::LengthMismatch {
                    expected: self.frames,
                    actual: rows.len(),
                });
            }
            if let Some(d) = rows.iter().find(|d| d.len() != self.config.num_daps) {
                return Err(Error::LengthMismatch {
                    expected: self.config.num_daps,
                    actual: d.len(),
                });
            }
        }
        if !self.user_offsets_hz.is_empty() && self.user_offsets_hz.len() != self.config.num_users {
            return Err(Error::LengthMismatch {
                expected: self.config.num_users,
                actual: self.user_offsets_hz.len(),
            });
        }
        if !(self.digital_gain > 0.0) {
            return Err(Error::InvalidConfig("digital_gain must be positive".into()));
        }
        Ok(())
    }
}

/// Ground truth of a synthetic capture.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTruth {
    /// Offsets applied in each frame.
    pub cfo: Vec<CfoRealization>,
    /// Samples that hit the int16 rails.
    pub clipped: usize,
}

const SYN_CHANNEL: u64 = 1;
const SYN_CFO: u64 = 2;
const SYN_DATA: u64 = 3;
const SYN_PILOT_NOISE: u64 = 4;
const SYN_DATA_NOISE: u64 = 5;

fn create_parents(file: &hdf5::File, path: &str) -> Result<()> {
    let parts: Vec<&str> = path.trim_matches('/').split('/').collect();
    let mut cur = String::new();
    for p in &parts[..parts.len().saturating_sub(1)] {
        cur.push('/');
        cur.push_str(p);
        if !file.link_exists(&cur) {
            file.create_group(&cur)?;
        }
    }
    Ok(())
}

fn quantize(v: Complex64, gain: f64, scale: f64, clipped: &mut usize) -> [i16; 2] {
    let mut q = |x: f64| {
        let r = (x * gain / scale).round();
        if !(i16::MIN as f64..=i16::MAX as f64).contains(&r) {
            *clipped += 1;
        }
        r.clamp(i16::MIN as f64, i16::MAX as f64) as i16
    };
    [q(v.re), q(v.im)]
}

/// Writes a capture in the layout described by `schema`.
pub fn write_synthetic(
    path: &Path,
    spec: &SyntheticSpec,
    schema: &SchemaMap,
) -> Result<SyntheticTruth> {
    spec.validate()?;
    let cfg = &spec.config;
    let num = cfg.numerology();
    let sps = num.samples_per_symbol();
    let (k_users, m_daps, n_ant, n_sc) = (
        cfg.num_users,
        cfg.num_daps,
        cfg.total_antennas(),
        cfg.num_subcarriers,
    );
    let n_data = cfg.slot_symbols;
    let slots = n_data / spec.symbols_per_slot;
    let p_len = schema.pilot_offset + 2 * sps;
    let d_len = schema.data_offset + spec.symbols_per_slot * sps;
    let map = subcarrier_map(n_sc, &spec.map)?;
    let modem = OfdmModem::new(num);
    let amp = cfg.ul_power.sqrt();
    let pilot_spec: Vec<Complex64> = pilot_reference(cfg, &map).iter().map(|v| v * amp).collect();
    let pilot_sig = modem.modulate_rows(&[pilot_spec.clone(), pilot_spec])?;
    let silent = TimeSignal::zeros(2, sps);

    let file = hdf5::File::create(path)?;
    let cell = schema.cell;
    let cells = cell + 1;
    for p in [&schema.pilot_path, &schema.data_path, &schema.tx_path] {
        create_parents(&file, p)?;
    }
    let pilots_ds = file
        .new_dataset::<i16>()
        .shape([spec.frames, cells, k_users, n_ant, 2 * p_len])
        .create(schema.pilot_path.as_str())?;
    let data_ds = file
        .new_dataset::<i16>()
        .shape([spec.frames, cells, slots, n_ant, 2 * d_len])
        .create(schema.data_path.as_str())?;
    let tx_ds = if spec.write_tx {
        Some(
            file.new_dataset::<f64>()
                .shape([spec.frames, k_users, n_data, 2 * n_sc])
                .create(schema.tx_path.as_str())?,
        )
    } else {
        None
    };
    let a = &schema.attrs;
    let bandwidth = cfg.bandwidth_hz();
    for (name, v) in [
        (&a.carrier_freq, cfg.carrier_freq_hz),
        (&a.sample_rate, bandwidth),
    ] {
        file.new_attr::<f64>()
            .create(name.as_str())?
            .write_scalar(&v)?;
    }
    for (name, v) in [
        (&a.fft_size, n_sc),
        (&a.cp_len, cfg.cp_len),
        (&a.num_daps, m_daps),
        (&a.antennas_per_dap, cfg.antennas_per_dap),
        (&a.symbols_per_slot, spec.symbols_per_slot),
    ] {
        file.new_attr::<i64>()
            .create(name.as_str())?
            .write_scalar(&(v as i64))?;
    }
    let tag = VarLenUnicode::from_str(spec.scenario.name())
        .map_err(|e| Error::InvalidConfig(format!("scenario tag: {e}")))?;
    file.new_attr::<VarLenUnicode>()
        .shape(())
        .create(a.scenario.as_str())?
        .write_scalar(&tag)?;

    let user_eps: Option<Vec<f64>> = (!spec.user_offsets_hz.is_empty()).then(|| {
        spec.user_offsets_hz
            .iter()
            .map(|hz| hz / cfg.subcarrier_spacing_hz)
            .collect()
    });
    let dap_normal =
        Normal::new(0.0, spec.beta).map_err(|_| Error::NegativeParameter(spec.beta))?;
    let draw_daps = |f: u64| -> Vec<f64> {
        if !spec.scenario.is_lo() {
            return vec![0.0; m_daps];
        }
        if let Some(rows) = &spec.dap_offsets {
            return rows[if rows.len() == 1 { 0 } else { f as usize }].clone();
        }
        let mut rng = rng_for(
            spec.seed,
            SYN_CFO,
            if spec.redraw_per_frame { f } else { 0 },
        );
        (0..m_daps).map(|_| dap_normal.sample(&mut rng)).collect()
    };
    let fixed = if spec.fixed_channel {
        let mut rng = rng_for(spec.seed, SYN_CHANNEL, u64::MAX);
        Some(rayleigh_channel_with(
            cfg,
            spec.fading,
            &Correlation::None,
            &mut rng,
        )?)
    } else {
        None
    };

    let mut truth = SyntheticTruth {
        cfo: Vec::with_capacity(spec.frames),
        clipped: 0,
    };
    for f in 0..spec.frames {
        let fi = f as u64;
        let channel: ChannelMatrix = match &fixed {
            Some(h) => h.clone(),
            None => {
                let mut rng = rng_for(spec.seed, SYN_CHANNEL, fi);
                rayleigh_channel_with(cfg, spec.fading, &Correlation::None, &mut rng)?
            }
        };
        let cfo = CfoRealization {
            dap_eps: draw_daps(fi),
            user_eps: user_eps.clone(),
        };

        // pilots: one slot per user, that user alone on the air
        let mut pilot_rng = rng_for(spec.seed, SYN_PILOT_NOISE, fi);
        let mut parr = Array3::<i16>::zeros((k_users, n_ant, 2 * p_len));
        for k in 0..k_users {
            let (first, pcfo) = match spec.pilot_timing {
                PilotTiming::Scheduled => (2 * k as i64 - 2 * k_users as i64, cfo.clone()),
                PilotTiming::Synchronized => (0, CfoRealization::zero(m_daps)),
            };
            let tx: Vec<TimeSignal> = (0..k_users)
                .map(|u| {
                    if u == k {
                        pilot_sig.clone()
                    } else {
                        silent.clone()
                    }
                })
                .collect();
            let comps = propagate_exact(&tx, &channel, &pcfo, &NoiseSpec::noiseless(), num, first)?;
            for (ant, sig) in comps.per_user[k].iter().enumerate() {
                for (i, v) in sig.samples.iter().enumerate() {
                    let y = v + complex_gaussian(&mut pilot_rng, cfg.noise_var);
                    let q = quantize(y, spec.digital_gain, schema.iq_scale, &mut truth.clipped);
                    let j = schema.pilot_offset + i;
                    parr[[k, ant, 2 * j]] = q[0];
                    parr[[k, ant, 2 * j + 1]] = q[1];
                }
            }
        }
        pilots_ds.write_slice(&parr, s![f, cell, .., .., ..])?;

        // data: all users at once from symbol 0
        let mut data_rng = rng_for(spec.seed, SYN_DATA, fi);
        let grids: Vec<Vec<Vec<Complex64>>> = (0..k_users)
            .map(|_| user_grid(&mut data_rng, &map, n_data, amp))
            .collect();
        let tx: Vec<TimeSignal> = grids
            .iter()
            .map(|g| modem.modulate_rows(g))
            .collect::<Result<_>>()?;
        let noise = NoiseSpec::new(cfg.noise_var, derive_seed(spec.seed, SYN_DATA_NOISE, fi))?;
        let rx = propagate_exact(&tx, &channel, &cfo, &noise, num, 0)?.total();
        let mut darr = Array3::<i16>::zeros((slots, n_ant, 2 * d_len));
        for (ant, sig) in rx.iter().enumerate() {
            for (i, v) in sig.samples.iter().enumerate() {
                let (slot, r) = (
                    i / (spec.symbols_per_slot * sps),
                    i % (spec.symbols_per_slot * sps),
                );
                let q = quantize(*v, spec.digital_gain, schema.iq_scale, &mut truth.clipped);
                let j = schema.data_offset + r;
                darr[[slot, ant, 2 * j]] = q[0];
                darr[[slot, ant, 2 * j + 1]] = q[1];
            }
        }
        data_ds.write_slice(&darr, s![f, cell, .., .., ..])?;

        if let Some(ds) = &tx_ds {
            let mut tarr = Array3::<f64>::zeros((k_users, n_data, 2 * n_sc));
            for (k, g) in grids.iter().enumerate() {
                for (n, row) in g.iter().enumerate() {
                    for (l, v) in row.iter().enumerate() {
                        tarr[[k, n, 2 * l]] = v.re / amp;
                        tarr[[k, n, 2 * l + 1]] = v.im / amp;
                    }
                }
            }
            ds.write_slice(&tarr, s![f, .., .., ..])?;
        }
        truth.cfo.push(cfo);
    }
    Ok(truth)
}

/// Raw int16 pilot block of one frame, `[cell, user, antenna, 2·samples]`.
pub fn read_raw_pilots(path: &Path, schema: &SchemaMap, frame: usize) -> Result<Array4<i16>> {
    let file = hdf5::File::open(path)?;
    let ds = open_dataset(&file, &schema.pilot_path)?;
    Ok(ds.read_slice::<i16, _, ndarray::Ix4>(s![frame, .., .., .., ..])?)
}
