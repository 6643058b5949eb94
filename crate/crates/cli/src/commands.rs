use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use dmubf::analytic::{tone_averaged_sinr, InterferenceForm, MomentPair};
use dmubf::beamform::{CbfNormalization, Method};
use dmubf::cfo::{closed_moments, moments_sampled, CfoSpec, OmegaModel, Sampling};
use dmubf::channel::{rayleigh_channel, ChannelMatrix, Correlation, Fading};
use dmubf::dataset::{
    analyze, load_hdf5, write_cfo_csv, write_synthetic, PipelineOptions, SchemaMap, SyntheticSpec,
};
use dmubf::ofdm::{subcarrier_map, MapProfile, SystemConfig};
use dmubf::simkit::{sweep, SweepSpec, TrialSetup};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::config::{
    check_cfo, check_params, check_symbols, check_system, from_table, load_table, take,
};
use crate::error::{CliError, CliResult};

/// Shared run context.
pub struct Ctx {
    pub config_path: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub verbose: u8,
    pub dry_run: bool,
}

/// What a subcommand produced, for the manifest.
pub struct Report {
    pub resolved: Value,
    pub seed: Option<u64>,
    pub outputs: Vec<PathBuf>,
    pub extra: Map<String, Value>,
}

impl Report {
    fn dry(resolved: Value, seed: Option<u64>) -> Self {
        Self {
            resolved,
            seed,
            outputs: Vec::new(),
            extra: Map::new(),
        }
    }
}

impl Ctx {
    fn table(&self, subcommand: &str) -> CliResult<(PathBuf, Map<String, Value>)> {
        match &self.config_path {
            Some(p) => Ok((p.clone(), load_table(p, subcommand)?)),
            None => Ok((PathBuf::from("<defaults>"), Map::new())),
        }
    }

    fn create(&self, name: &str) -> CliResult<(PathBuf, BufWriter<File>)> {
        let path = self.out.join(name);
        let f = File::create(&path).map_err(|e| CliError::io(&path, e))?;
        Ok((path, BufWriter::new(f)))
    }

    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose > 0 {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn flush(path: &Path, mut w: BufWriter<File>) -> CliResult<()> {
    w.flush().map_err(|e| CliError::io(path, e))
}

fn core(path: &Path) -> impl Fn(dmubf::Error) -> CliError + '_ {
    move |e| CliError::from_core(path, e)
}

fn write_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::io(path, e)
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("config types serialize to JSON")
}

fn apply_snr(cfg: &mut SystemConfig, snr_db: Option<f64>) -> CliResult<()> {
    if let Some(s) = snr_db {
        if !s.is_finite() {
            return Err(CliError::invalid("snr_db", format!("{s} is not finite")));
        }
        *cfg = cfg.clone().with_snr_db(s);
    }
    Ok(())
}

fn load_channel(path: &Path, cfg: &SystemConfig) -> CliResult<ChannelMatrix> {
    let h = ChannelMatrix::load(path).map_err(core(path))?;
    let expect = (
        cfg.num_daps * cfg.antennas_per_dap,
        cfg.num_users,
        cfg.num_subcarriers,
    );
    let got = (h.num_antennas(), h.num_users(), h.num_subcarriers());
    // a flat channel reports one subcarrier
    if got.0 != expect.0 || got.1 != expect.1 || (!h.is_flat() && got.2 != expect.2) {
        return Err(CliError::invalid(
            "channel_file",
            format!(
                "{} holds {}x{} over {} tones, config needs {}x{} over {}",
                path.display(),
                got.0,
                got.1,
                got.2,
                expect.0,
                expect.1,
                expect.2
            ),
        ));
    }
    Ok(h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Uniform,
    Normal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MomentsConfig {
    pub config: SystemConfig,
    pub distributions: Vec<Family>,
    pub params: Vec<f64>,
    /// Read each parameter as the STD of ε, so a uniform half-width is √3 times it.
    pub match_std: bool,
    pub symbols: Vec<usize>,
    /// Monte Carlo draws per point; 0 reports the closed forms only.
    pub trials: usize,
    pub model: OmegaModel,
    pub sampling: Sampling,
    pub seed: u64,
}

impl Default for MomentsConfig {
    fn default() -> Self {
        Self {
            config: SystemConfig::default(),
            distributions: vec![Family::Uniform, Family::Normal],
            params: vec![0.005, 0.01, 0.02, 0.03, 0.05],
            match_std: false,
            symbols: (0..10).collect(),
            trials: 1_000_000,
            model: OmegaModel::Exact,
            sampling: Sampling::Iid,
            seed: 1,
        }
    }
}

pub fn moments(ctx: &Ctx) -> CliResult<Report> {
    let (path, table) = ctx.table("moments")?;
    let mut cfg: MomentsConfig = from_table(&path, table)?;
    if let Some(s) = ctx.seed {
        cfg.seed = s;
    }
    check_system(&cfg.config)?;
    check_params("params", &cfg.params)?;
    if cfg.distributions.is_empty() {
        return Err(CliError::invalid("distributions", "must not be empty"));
    }
    if cfg.symbols.is_empty() {
        return Err(CliError::invalid("symbols", "must not be empty"));
    }
    if ctx.dry_run {
        return Ok(Report::dry(to_value(&cfg), Some(cfg.seed)));
    }
    let num = cfg.config.numerology();
    let (out_path, mut w) = ctx.create("moments.csv")?;
    let io = write_err(&out_path);
    writeln!(
        w,
        "distribution,param,n,E_omega_closed,E_omega2_closed,E_omega_mc,E_omega2_mc"
    )
    .map_err(&io)?;
    for &fam in &cfg.distributions {
        for &p in &cfg.params {
            let spec = match fam {
                Family::Uniform if cfg.match_std => CfoSpec::Uniform {
                    alpha: p * 3f64.sqrt(),
                },
                Family::Uniform => CfoSpec::Uniform { alpha: p },
                Family::Normal => CfoSpec::Normal { beta: p },
            };
            for &n in &cfg.symbols {
                let (c1, c2) = closed_moments(&spec, n, num).map_err(core(&path))?;
                let (m1, m2) = if cfg.trials > 0 {
                    let m = moments_sampled(
                        &spec,
                        n,
                        num,
                        cfg.trials,
                        cfg.seed,
                        cfg.model,
                        cfg.sampling,
                    )
                    .map_err(core(&path))?;
                    (format!("{:.10e}", m.e1), format!("{:.10e}", m.e2))
                } else {
                    (String::new(), String::new())
                };
                writeln!(
                    w,
                    "{},{},{},{:.10e},{:.10e},{},{}",
                    spec.kind_name(),
                    spec.param(),
                    n,
                    c1,
                    c2,
                    m1,
                    m2
                )
                .map_err(&io)?;
            }
            ctx.log(format!("moments: {} {p} done", spec.kind_name()));
        }
    }
    flush(&out_path, w)?;
    Ok(Report {
        resolved: to_value(&cfg),
        seed: Some(cfg.seed),
        outputs: vec![out_path.clone()],
        extra: Map::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyticConfig {
    pub config: SystemConfig,
    /// Overrides `config.noise_var` relative to `config.ul_power`.
    pub snr_db: Option<f64>,
    /// Channel written by a previous run; drawn from `seed` when absent.
    pub channel_file: Option<PathBuf>,
    pub fading: Fading,
    pub cfo: CfoSpec,
    pub params: Vec<f64>,
    pub symbols: Vec<usize>,
    /// Evaluate on the first M dAPs for each entry; empty means all.
    pub daps: Vec<usize>,
    pub method: Method,
    pub cbf_normalization: CbfNormalization,
    pub interference: InterferenceForm,
    pub map: MapProfile,
    pub seed: u64,
}

impl Default for AnalyticConfig {
    fn default() -> Self {
        let sweep = SweepSpec::default();
        Self {
            config: sweep.config,
            snr_db: None,
            channel_file: None,
            fading: Fading::Flat,
            cfo: sweep.cfo,
            params: sweep.params,
            symbols: sweep.symbols,
            daps: Vec::new(),
            method: sweep.method,
            cbf_normalization: sweep.cbf_normalization,
            interference: sweep.interference,
            map: sweep.map,
            seed: sweep.seed,
        }
    }
}

pub fn analytic_sinr(ctx: &Ctx) -> CliResult<Report> {
    let (path, table) = ctx.table("analytic-sinr")?;
    let mut cfg: AnalyticConfig = from_table(&path, table)?;
    if let Some(s) = ctx.seed {
        cfg.seed = s;
    }
    apply_snr(&mut cfg.config, cfg.snr_db)?;
    check_system(&cfg.config)?;
    check_cfo(&cfg.cfo)?;
    check_params("params", &cfg.params)?;
    check_symbols(&cfg.symbols, cfg.config.slot_symbols)?;
    let daps = if cfg.daps.is_empty() {
        vec![cfg.config.num_daps]
    } else {
        cfg.daps.clone()
    };
    for (i, &m) in daps.iter().enumerate() {
        if m == 0 || m > cfg.config.num_daps {
            return Err(CliError::invalid(
                format!("daps[{i}]"),
                format!("{m} is not in 1..={}", cfg.config.num_daps),
            ));
        }
    }
    let map = subcarrier_map(cfg.config.num_subcarriers, &cfg.map).map_err(core(&path))?;
    if ctx.dry_run {
        return Ok(Report::dry(to_value(&cfg), Some(cfg.seed)));
    }
    let channel = match &cfg.channel_file {
        Some(f) => load_channel(f, &cfg.config)?,
        None => rayleigh_channel(&cfg.config, cfg.fading, &Correlation::None, cfg.seed)
            .map_err(core(&path))?,
    };
    let mut outputs = Vec::new();
    let ch_path = ctx.out.join("channel.bin");
    channel.save(&ch_path).map_err(core(&ch_path))?;
    outputs.push(ch_path);

    let num = cfg.config.numerology();
    let (out_path, mut w) = ctx.create("analytic_sinr.csv")?;
    let io = write_err(&out_path);
    writeln!(
        w,
        "dist,param,n,M,user,p_signal,p_interference,p_noise,sinr_db"
    )
    .map_err(&io)?;
    for &m in &daps {
        let h = channel.first_daps(m).map_err(core(&path))?;
        for &p in &cfg.params {
            let spec = cfg.cfo.with_param(p);
            for &n in &cfg.symbols {
                let moments = MomentPair::closed(&spec, n, num).map_err(core(&path))?;
                let per_user = tone_averaged_sinr(
                    &h,
                    map.data_indices(),
                    cfg.method,
                    cfg.cbf_normalization,
                    &moments,
                    cfg.config.ul_power,
                    cfg.config.noise_var,
                    cfg.interference,
                )
                .map_err(core(&path))?;
                for (k, s) in per_user.iter().enumerate() {
                    writeln!(
                        w,
                        "{},{},{},{},{},{:.10e},{:.10e},{:.10e},{:.6}",
                        spec.kind_name(),
                        p,
                        n,
                        m,
                        k,
                        s.p_signal,
                        s.p_interference,
                        s.p_noise,
                        s.sinr_db_finite()
                    )
                    .map_err(&io)?;
                }
            }
        }
    }
    flush(&out_path, w)?;
    outputs.push(out_path.clone());
    Ok(Report {
        resolved: to_value(&cfg),
        seed: Some(cfg.seed),
        outputs,
        extra: Map::new(),
    })
}

pub fn simulate(ctx: &Ctx) -> CliResult<Report> {
    let (path, mut table) = ctx.table("simulate")?;
    let channel_file: Option<PathBuf> = take(&path, &mut table, "channel_file")?;
    let snr_db: Option<f64> = take(&path, &mut table, "snr_db")?;
    let mut spec: SweepSpec = from_table(&path, table)?;
    if let Some(s) = ctx.seed {
        spec.seed = s;
    }
    apply_snr(&mut spec.config, snr_db)?;
    check_system(&spec.config)?;
    check_cfo(&spec.cfo)?;
    check_params("params", &spec.params)?;
    check_symbols(&spec.symbols, spec.config.slot_symbols)?;
    if spec.trials == 0 {
        return Err(CliError::invalid("trials", "must be positive"));
    }
    if let Some(f) = &channel_file {
        spec.channel = Some(load_channel(f, &spec.config)?);
    }
    spec.validate().map_err(core(&path))?;
    let mut resolved = to_value(&spec);
    if let (Value::Object(obj), Some(f)) = (&mut resolved, &channel_file) {
        obj.insert("channel_file".into(), to_value(f));
    }
    if ctx.dry_run {
        return Ok(Report::dry(resolved, Some(spec.seed)));
    }

    let mut outputs = Vec::new();
    if spec.channel.is_some() || spec.fixed_channel {
        let setup = TrialSetup::from_spec(&spec).map_err(core(&path))?;
        let h = setup
            .channel
            .expect("fixed channel is resolved by the setup");
        let ch_path = ctx.out.join("channel.bin");
        h.save(&ch_path).map_err(core(&ch_path))?;
        outputs.push(ch_path);
        spec.channel = Some(h);
    }
    ctx.log(format!(
        "simulate: {} params x {} symbols x {} trials",
        spec.params.len(),
        spec.symbols.len(),
        spec.trials
    ));
    let result = sweep(&spec).map_err(core(&path))?;
    let (out_path, w) = ctx.create("sweep.csv")?;
    result.write_csv(w).map_err(core(&out_path))?;
    outputs.push(out_path);
    Ok(Report {
        resolved,
        seed: Some(spec.seed),
        outputs,
        extra: Map::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeConfig {
    pub input: Option<PathBuf>,
    pub schema: SchemaMap,
    pub pipeline: PipelineOptions,
    /// Antenna the relative offsets are measured against.
    pub reference_antenna: usize,
}

pub fn dataset_analyze(ctx: &Ctx, input: Option<PathBuf>) -> CliResult<Report> {
    let (path, table) = ctx.table("dataset analyze")?;
    let mut cfg: AnalyzeConfig = from_table(&path, table)?;
    if input.is_some() {
        cfg.input = input;
    }
    let Some(file) = cfg.input.clone() else {
        return Err(CliError::invalid("input", "no dataset file given"));
    };
    if cfg.pipeline.max_frames == Some(0) {
        return Err(CliError::invalid("pipeline.max_frames", "must be positive"));
    }
    if ctx.dry_run {
        return Ok(Report::dry(to_value(&cfg), None));
    }
    if !file.exists() {
        return Err(CliError::io(
            &file,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset file not found"),
        ));
    }
    let reader = load_hdf5(&file, &cfg.schema).map_err(core(&file))?;
    let meta = reader.meta().clone();
    if cfg.reference_antenna >= meta.num_antennas() {
        return Err(CliError::invalid(
            "reference_antenna",
            format!(
                "{} is not below the antenna count {}",
                cfg.reference_antenna,
                meta.num_antennas()
            ),
        ));
    }
    ctx.log(format!(
        "dataset: {} frames, {} dAPs x {} antennas, {} users",
        meta.num_frames, meta.num_daps, meta.antennas_per_dap, meta.num_users
    ));
    let result = analyze(&reader, &cfg.pipeline, cfg.reference_antenna).map_err(core(&file))?;

    let mut outputs = Vec::new();
    let (p, w) = ctx.create("cfo_estimates.csv")?;
    write_cfo_csv(&result.cfo, w).map_err(core(&p))?;
    outputs.push(p);
    let (p, w) = ctx.create("dap_stats.csv")?;
    result.stats.write_csv(&meta, w).map_err(core(&p))?;
    outputs.push(p);
    let (p, w) = ctx.create("evm_snr.csv")?;
    result.evm.write_csv(w).map_err(core(&p))?;
    outputs.push(p);

    let to_ppb = |eps: f64| meta.cfo_from_hz(eps * meta.subcarrier_spacing_hz).ppb;
    let summary = json!({
        "input": file,
        "meta": meta,
        "frames_processed": result.cfo.len(),
        "beta_hat": result.stats.beta_hat,
        "beta_hat_ppb": to_ppb(result.stats.beta_hat),
        "beta_frames": result.stats.beta_frames,
        "inter_dap": result.stats,
        "method": result.evm.method,
        "mean_evm_snr_db": result.evm.mean_evm_snr_db(),
        "users": result.evm.users,
        "antenna_cfo_ppb": result
            .mean_cfo
            .iter()
            .map(|ants| ants.iter().map(|e| e.ppb).collect::<Vec<_>>())
            .collect::<Vec<_>>(),
    });
    let (p, mut w) = ctx.create("summary.json")?;
    serde_json::to_writer_pretty(&mut w, &summary).map_err(|e| CliError::io(&p, e.into()))?;
    flush(&p, w)?;
    outputs.push(p);

    let mut extra = Map::new();
    extra.insert("beta_hat".into(), json!(result.stats.beta_hat));
    extra.insert(
        "mean_evm_snr_db".into(),
        json!(result.evm.mean_evm_snr_db()),
    );
    Ok(Report {
        resolved: to_value(&cfg),
        seed: None,
        outputs,
        extra,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// File name inside the output directory.
    pub file_name: String,
    /// Overrides `synthetic.config.noise_var` relative to its `ul_power`.
    pub snr_db: Option<f64>,
    pub synthetic: SyntheticSpec,
    pub schema: SchemaMap,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let mut synthetic = SyntheticSpec::default();
        synthetic.config = synthetic.config.with_snr_db(20.0);
        Self {
            file_name: "synthetic.h5".into(),
            snr_db: None,
            synthetic,
            schema: SchemaMap::default(),
        }
    }
}

fn plain_file_name(name: &str) -> bool {
    let p = Path::new(name);
    !name.is_empty()
        && p.file_name().is_some_and(|f| f == p.as_os_str())
        && name != ".."
        && name != "."
}

pub fn dataset_synth(ctx: &Ctx) -> CliResult<Report> {
    let (path, table) = ctx.table("dataset synth")?;
    let mut cfg: SynthConfig = from_table(&path, table)?;
    if let Some(s) = ctx.seed {
        cfg.synthetic.seed = s;
    }
    if !plain_file_name(&cfg.file_name) {
        return Err(CliError::invalid(
            "file_name",
            format!("`{}` must be a bare file name", cfg.file_name),
        ));
    }
    apply_snr(&mut cfg.synthetic.config, cfg.snr_db)?;
    check_system(&cfg.synthetic.config).map_err(|e| match e {
        CliError::Validation { key, message } => CliError::Validation {
            key: format!("synthetic.{key}"),
            message,
        },
        e => e,
    })?;
    if !(cfg.synthetic.beta.is_finite() && cfg.synthetic.beta >= 0.0) {
        return Err(CliError::invalid(
            "synthetic.beta",
            format!(
                "{} must be a finite non-negative number",
                cfg.synthetic.beta
            ),
        ));
    }
    cfg.synthetic.validate().map_err(core(&path))?;
    if ctx.dry_run {
        return Ok(Report::dry(to_value(&cfg), Some(cfg.synthetic.seed)));
    }

    let file = ctx.out.join(&cfg.file_name);
    let truth = write_synthetic(&file, &cfg.synthetic, &cfg.schema).map_err(core(&file))?;
    let (tp, mut w) = ctx.create("synthetic_truth.csv")?;
    let io = write_err(&tp);
    writeln!(w, "frame,dap,eps").map_err(&io)?;
    for (f, r) in truth.cfo.iter().enumerate() {
        for (m, e) in r.dap_eps.iter().enumerate() {
            writeln!(w, "{f},{m},{e:.10e}").map_err(&io)?;
        }
    }
    flush(&tp, w)?;
    if truth.clipped > 0 {
        eprintln!(
            "warning: {} samples clipped at int16 full scale; lower synthetic.digital_gain",
            truth.clipped
        );
    }
    let mut extra = Map::new();
    extra.insert("clipped".into(), json!(truth.clipped));
    Ok(Report {
        resolved: to_value(&cfg),
        seed: Some(cfg.synthetic.seed),
        outputs: vec![file, tp.clone()],
        extra,
    })
}

pub fn ensure_out_dir(out: &Path) -> CliResult<()> {
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))
}
