//! CFO mathematics: the ICI kernel, the per-symbol gain Ω and its moments.
//!
//! ε is the residual offset as a fraction of the subcarrier spacing. Time is
//! measured in samples from the FFT window start of data symbol 0, so the
//! cyclic prefix of symbol `n` occupies `ζ ∈ [-L_cp, 0)` and the window
//! `ζ ∈ [0, N_sc)`, each offset by `n·(N_sc + L_cp)`.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use crate::ofdm::Numerology;
use crate::ofdm::SystemConfig;
use crate::seed::{rng_for, KahanSum};

/// Largest |ε| for which the quadratic approximation of ω is trusted.
pub const APPROX_REGIME: f64 = 0.1;

/// Hard limit on |ε| for [`omega_approx`].
pub const APPROX_LIMIT: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedCfo {
    pub eps: f64,
}

impl NormalizedCfo {
    pub fn new(eps: f64) -> Self {
        Self { eps }
    }

    pub fn from_hz(hz: f64, config: &SystemConfig) -> Self {
        Self {
            eps: hz / config.subcarrier_spacing_hz,
        }
    }

    pub fn from_ppb(ppb: f64, config: &SystemConfig) -> Self {
        Self::from_hz(ppb * 1e-9 * config.carrier_freq_hz, config)
    }

    /// δ_f = ε·Δf
    pub fn hz(&self, config: &SystemConfig) -> f64 {
        self.eps * config.subcarrier_spacing_hz
    }

    pub fn ppb(&self, config: &SystemConfig) -> f64 {
        self.hz(config) / config.carrier_freq_hz * 1e9
    }
}

/// Distribution of the per-dAP normalized CFO.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CfoSpec {
    Fixed {
        eps: f64,
    },
    /// ε ~ U[-α, α]
    Uniform {
        alpha: f64,
    },
    /// ε ~ N(0, β²)
    Normal {
        beta: f64,
    },
}

impl CfoSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            CfoSpec::Fixed { eps } if !eps.is_finite() => Err(Error::InvalidConfig(format!(
                "eps must be finite, got {eps}"
            ))),
            CfoSpec::Uniform { alpha: p } | CfoSpec::Normal { beta: p } if !(p >= 0.0) => {
                Err(Error::NegativeParameter(p))
            }
            _ => Ok(()),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            CfoSpec::Fixed { .. } => "fixed",
            CfoSpec::Uniform { .. } => "uniform",
            CfoSpec::Normal { .. } => "normal",
        }
    }

    /// The distribution parameter (ε, α or β).
    pub fn param(&self) -> f64 {
        match *self {
            CfoSpec::Fixed { eps } => eps,
            CfoSpec::Uniform { alpha } => alpha,
            CfoSpec::Normal { beta } => beta,
        }
    }

    /// Same family with a different parameter.
    pub fn with_param(&self, p: f64) -> Self {
        match self {
            CfoSpec::Fixed { .. } => CfoSpec::Fixed { eps: p },
            CfoSpec::Uniform { .. } => CfoSpec::Uniform { alpha: p },
            CfoSpec::Normal { .. } => CfoSpec::Normal { beta: p },
        }
    }

    pub fn std_dev(&self) -> f64 {
        match *self {
            CfoSpec::Fixed { .. } => 0.0,
            CfoSpec::Uniform { alpha } => alpha / 3f64.sqrt(),
            CfoSpec::Normal { beta } => beta,
        }
    }

    /// Whether effectively all draws fall inside |ε| ≤ 0.1.
    pub fn in_regime(&self) -> bool {
        match *self {
            CfoSpec::Fixed { eps } => eps.abs() <= APPROX_REGIME,
            CfoSpec::Uniform { alpha } => alpha <= APPROX_REGIME,
            CfoSpec::Normal { beta } => 3.0 * beta <= APPROX_REGIME,
        }
    }

    /// Whether symbol `n` lies in the regime where E{Ω}² has decayed
    /// (nα/√3 > 0.25 or nβ > 0.25).
    pub fn asymptotic_at(&self, n: usize) -> bool {
        match self {
            CfoSpec::Fixed { .. } => false,
            _ => n as f64 * self.std_dev() > 0.25,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            CfoSpec::Fixed { eps } => eps,
            CfoSpec::Uniform { alpha } if alpha > 0.0 => {
                Uniform::new_inclusive(-alpha, alpha).unwrap().sample(rng)
            }
            CfoSpec::Normal { beta } if beta > 0.0 => Normal::new(0.0, beta).unwrap().sample(rng),
            _ => 0.0,
        }
    }
}

/// Ω for one dAP and one symbol, with its polar parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CfoComponent {
    pub omega: Complex64,
    /// ω = |Ω|
    pub magnitude: f64,
    /// φ = arg Ω (unwrapped: g_n·π·ε)
    pub phase: f64,
    pub symbol_index: usize,
    pub g_n: f64,
    /// |ε| ≤ 0.1 and N_sc ≥ 8.
    pub in_regime: bool,
}

impl CfoComponent {
    fn from_polar(magnitude: f64, phase: f64, n: usize, g: f64, in_regime: bool) -> Self {
        Self {
            omega: Complex64::from_polar(magnitude, phase),
            magnitude,
            phase,
            symbol_index: n,
            g_n: g,
            in_regime,
        }
    }
}

/// sin(πx) with the argument reduced exactly to [-1/2, 1/2] first, so
/// integers give exact zeros and values near them keep full precision.
fn sin_pi(x: f64) -> f64 {
    let mut r = x % 2.0;
    if r > 1.0 {
        r -= 2.0;
    } else if r < -1.0 {
        r += 2.0;
    }
    if r > 0.5 {
        r = 1.0 - r;
    } else if r < -0.5 {
        r = -1.0 - r;
    }
    if r == 0.0 {
        0.0
    } else {
        (PI * r).sin()
    }
}

/// Real Dirichlet ratio sin(πx)/(N·sin(πx/N)), equal to ±1 where the
/// denominator vanishes.
pub fn dirichlet(x: f64, n_sc: usize) -> f64 {
    let nf = n_sc as f64;
    let den = sin_pi(x / nf);
    if den == 0.0 {
        // x = kN: the limit is cos(πkN)/cos(πk) = (-1)^{k(N-1)}
        let k = (x / nf).round() as i64;
        if (k * (n_sc as i64 - 1)).rem_euclid(2) == 0 {
            1.0
        } else {
            -1.0
        }
    } else {
        sin_pi(x) / (nf * den)
    }
}

/// G_ε[d]: leakage from a tone at `l + d` into bin `l`.
pub fn ici_gain(eps: f64, d: i64, n_sc: usize) -> Complex64 {
    let x = eps + d as f64;
    let nf = n_sc as f64;
    if x % nf == 0.0 {
        return Complex64::new(1.0, 0.0);
    }
    let mag = dirichlet(x, n_sc);
    Complex64::from_polar(1.0, PI * x * (nf - 1.0) / nf) * mag
}

/// φ̄[n] = 2π(1 + L_cp/N_sc)·n·ε
pub fn phase_bar(eps: f64, n: usize, num: Numerology) -> f64 {
    let ratio = 1.0 + num.cp_len as f64 / num.num_subcarriers as f64;
    2.0 * PI * ratio * n as f64 * eps
}

/// g_n = 2n(1 + L_cp/N_sc) + (N_sc − 1)/N_sc
pub fn g_n(n: usize, num: Numerology) -> f64 {
    let nf = num.num_subcarriers as f64;
    2.0 * n as f64 * (1.0 + num.cp_len as f64 / nf) + (nf - 1.0) / nf
}

fn regime(eps: f64, num: Numerology) -> bool {
    eps.abs() <= APPROX_REGIME && num.num_subcarriers >= 8
}

/// Ω_m[n] from the exact Dirichlet magnitude.
pub fn omega_exact(eps: f64, n: usize, num: Numerology) -> CfoComponent {
    let g = g_n(n, num);
    let mag = dirichlet(eps, num.num_subcarriers);
    // keep ω ≥ 0; a negative ratio (|ε| beyond one bin) becomes a π shift
    let (m, extra) = if mag < 0.0 { (-mag, PI) } else { (mag, 0.0) };
    CfoComponent::from_polar(m, g * PI * eps + extra, n, g, regime(eps, num))
}

/// Ω_m[n] ≈ (1 − π²ε²/6)·e^{j g_n π ε}.
pub fn omega_approx(eps: f64, n: usize, num: Numerology) -> Result<CfoComponent> {
    if eps.abs() >= APPROX_LIMIT {
        return Err(Error::OutsideApproximation(format!(
            "|eps| = {} must be below {APPROX_LIMIT}",
            eps.abs()
        )));
    }
    if num.num_subcarriers < 8 {
        return Err(Error::OutsideApproximation(format!(
            "N_sc = {} must be at least 8",
            num.num_subcarriers
        )));
    }
    let g = g_n(n, num);
    let mag = 1.0 - PI * PI * eps * eps / 6.0;
    Ok(CfoComponent::from_polar(
        mag,
        g * PI * eps,
        n,
        g,
        regime(eps, num),
    ))
}

fn non_negative(p: f64) -> Result<()> {
    if p >= 0.0 {
        Ok(())
    } else {
        Err(Error::NegativeParameter(p))
    }
}

/// E{Ω} for ε ~ U[-α, α].
pub fn moment1_uniform(alpha: f64, n: usize, num: Numerology) -> Result<f64> {
    non_negative(alpha)?;
    let g = g_n(n, num);
    let pa = PI * alpha;
    let x = g * pa;
    if x < 1e-2 {
        // fourth-order series; the closed form cancels badly here
        let a2 = alpha * alpha;
        let a4 = a2 * a2;
        let g2p2 = g * g * PI * PI;
        let cos_mean = 1.0 - g2p2 * a2 / 6.0 + g2p2 * g2p2 * a4 / 120.0;
        let sq_cos_mean = a2 / 3.0 - g2p2 * a4 / 10.0;
        return Ok(cos_mean - PI * PI / 6.0 * sq_cos_mean);
    }
    let g2 = g * g;
    Ok((1.0 / g) * (1.0 / pa - pa / 6.0 + 1.0 / (3.0 * pa * g2)) * x.sin() - x.cos() / (3.0 * g2))
}

/// E{|Ω|²} for ε ~ U[-α, α]. Independent of n.
pub fn moment2_uniform(alpha: f64) -> Result<f64> {
    non_negative(alpha)?;
    let p2 = PI * PI * alpha * alpha;
    Ok(p2 * p2 / 180.0 - p2 / 9.0 + 1.0)
}

/// E{Ω} for ε ~ N(0, β²).
pub fn moment1_normal(beta: f64, n: usize, num: Numerology) -> Result<f64> {
    non_negative(beta)?;
    let g = g_n(n, num);
    let p2 = PI * PI * beta * beta;
    let gp2 = g * g * p2;
    Ok((1.0 - p2 / 6.0 * (1.0 - gp2)) * (-gp2 / 2.0).exp())
}

/// E{|Ω|²} for ε ~ N(0, β²). Independent of n.
pub fn moment2_normal(beta: f64) -> Result<f64> {
    non_negative(beta)?;
    let p2 = PI * PI * beta * beta;
    Ok(p2 * p2 / 12.0 - p2 / 3.0 + 1.0)
}

/// Closed-form (E{Ω}, E{|Ω|²}).
///
/// A fixed offset is common to all dAPs, so its phase cancels between dAP
/// pairs and the pair reduces to (ω, ω²) with the exact ω.
pub fn closed_moments(spec: &CfoSpec, n: usize, num: Numerology) -> Result<(f64, f64)> {
    spec.validate()?;
    match *spec {
        CfoSpec::Fixed { eps } => {
            let w = omega_exact(eps, n, num).magnitude;
            Ok((w, w * w))
        }
        CfoSpec::Uniform { alpha } => {
            Ok((moment1_uniform(alpha, n, num)?, moment2_uniform(alpha)?))
        }
        CfoSpec::Normal { beta } => Ok((moment1_normal(beta, n, num)?, moment2_normal(beta)?)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OmegaModel {
    #[default]
    Exact,
    Approx,
}

impl OmegaModel {
    pub fn evaluate(&self, eps: f64, n: usize, num: Numerology) -> Result<CfoComponent> {
        match self {
            OmegaModel::Exact => Ok(omega_exact(eps, n, num)),
            OmegaModel::Approx => omega_approx(eps, n, num),
        }
    }
}

/// Sample moments of Ω.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmpiricalMoments {
    /// Real part of the sample mean of Ω.
    pub e1: f64,
    /// Imaginary part of the sample mean, reported for diagnostics only.
    pub e1_imag: f64,
    pub e2: f64,
    pub trials: usize,
}

const MOMENT_CHUNK: usize = 1 << 15;
const MOMENT_STREAM: u64 = 0x4d4f_4d45_4e54;

/// How [`moments_sampled`] draws ε.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampling {
    /// Independent draws.
    #[default]
    Iid,
    /// One draw per equal-probability stratum of the ε distribution, placed by
    /// inverse CDF. Unbiased, with error O(1/trials^1.5) for smooth integrands.
    Stratified,
}

impl CfoSpec {
    /// Quantile function of ε.
    fn quantile(&self, u: f64) -> f64 {
        use statrs::distribution::ContinuousCDF;
        match *self {
            CfoSpec::Fixed { eps } => eps,
            CfoSpec::Uniform { alpha } => alpha * (2.0 * u - 1.0),
            CfoSpec::Normal { beta: 0.0 } => 0.0,
            CfoSpec::Normal { beta } => statrs::distribution::Normal::new(0.0, beta)
                .map(|d| d.inverse_cdf(u))
                .unwrap_or(0.0),
        }
    }
}

/// Monte Carlo estimate of (E{Ω}, E{|Ω|²}) from independent draws.
pub fn moments_empirical(
    spec: &CfoSpec,
    n: usize,
    num: Numerology,
    trials: usize,
    seed: u64,
    model: OmegaModel,
) -> Result<EmpiricalMoments> {
    moments_sampled(spec, n, num, trials, seed, model, Sampling::Iid)
}

/// Monte Carlo estimate of (E{Ω}, E{|Ω|²}).
pub fn moments_sampled(
    spec: &CfoSpec,
    n: usize,
    num: Numerology,
    trials: usize,
    seed: u64,
    model: OmegaModel,
    sampling: Sampling,
) -> Result<EmpiricalMoments> {
    spec.validate()?;
    if trials == 0 {
        return Err(Error::Empty);
    }
    let chunks = trials.div_ceil(MOMENT_CHUNK);
    let partial: Vec<(f64, f64, f64)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = rng_for(seed, MOMENT_STREAM, c as u64);
            let first = c * MOMENT_CHUNK;
            let count = MOMENT_CHUNK.min(trials - first);
            let (mut re, mut im, mut sq) = (
                KahanSum::default(),
                KahanSum::default(),
                KahanSum::default(),
            );
            for i in first..first + count {
                let eps = match sampling {
                    Sampling::Iid => spec.sample(&mut rng),
                    Sampling::Stratified => {
                        // Open interval keeps the normal quantile finite.
                        let u: f64 = rng.random_range(f64::EPSILON..1.0);
                        spec.quantile((i as f64 + u) / trials as f64)
                    }
                };
                let om = model.evaluate(eps, n, num)?.omega;
                re.add(om.re);
                im.add(om.im);
                sq.add(om.norm_sqr());
            }
            Ok((re.value(), im.value(), sq.value()))
        })
        .collect::<Result<_>>()?;
    let t = trials as f64;
    let sum = |f: fn(&(f64, f64, f64)) -> f64| partial.iter().map(f).collect::<KahanSum>().value();
    Ok(EmpiricalMoments {
        e1: sum(|p| p.0) / t,
        e1_imag: sum(|p| p.1) / t,
        e2: sum(|p| p.2) / t,
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const NUM: Numerology = Numerology {
        num_subcarriers: 64,
        cp_len: 16,
    };

    /// (1/N)·Σ_ζ e^{j2π(ε+d)ζ/N}, the DFT definition.
    fn ici_bruteforce(eps: f64, d: i64, n_sc: usize) -> Complex64 {
        let nf = n_sc as f64;
        (0..n_sc)
            .map(|z| Complex64::from_polar(1.0, 2.0 * PI * (eps + d as f64) * z as f64 / nf))
            .sum::<Complex64>()
            / nf
    }

    #[test]
    fn ici_kernel_known_points() {
        assert_eq!(ici_gain(0.0, 0, 64), Complex64::new(1.0, 0.0));
        assert!(ici_gain(0.0, 3, 64).norm() < 1e-15);
        assert_eq!(ici_gain(0.0, 64, 64), Complex64::new(1.0, 0.0));
        let g = ici_gain(0.05, 0, 64);
        assert!((g.norm_sqr() - 0.99).abs() < 2e-3);
        assert!((g.arg() - 0.05 * PI * 63.0 / 64.0).abs() < 1e-12);
    }

    #[test]
    fn ici_matches_bruteforce() {
        for &n in &[8usize, 16, 64] {
            for &eps in &[-0.37, -0.05, 0.0, 0.013, 0.25, 1.5] {
                for d in -3..=3 {
                    let a = ici_gain(eps, d, n);
                    let b = ici_bruteforce(eps, d, n);
                    assert!((a - b).norm() < 1e-12, "n={n} eps={eps} d={d}");
                }
            }
        }
    }

    #[test]
    fn adjacent_leakage_bound_positive_side() {
        for i in 0..=50 {
            let eps = i as f64 * 1e-3;
            assert!(ici_gain(eps, 1, 64).norm_sqr() < 2.3e-3, "eps={eps}");
        }
        // the mirrored neighbour at d = -1 plays that role for negative ε
        for i in 0..=50 {
            let eps = -(i as f64) * 1e-3;
            assert!(ici_gain(eps, -1, 64).norm_sqr() < 2.3e-3, "eps={eps}");
        }
    }

    #[test]
    fn phase_terms() {
        assert_eq!(phase_bar(0.0, 5, NUM), 0.0);
        assert!((phase_bar(0.02, 1, NUM) - 0.05 * PI).abs() < 1e-15);
        let p = phase_bar(0.013, 7, NUM);
        assert!((phase_bar(0.013, 14, NUM) - 2.0 * p).abs() < 1e-14);
        assert!((g_n(0, NUM) - 63.0 / 64.0).abs() < 1e-15);
    }

    #[test]
    fn omega_exact_identity_and_limit() {
        let z = omega_exact(0.0, 9, NUM);
        assert_eq!(z.omega, Complex64::new(1.0, 0.0));
        assert_eq!(z.phase, 0.0);
        for &eps in &[-0.3, -0.02, 0.004, 0.1, 0.45] {
            for n in [0usize, 1, 7, 20] {
                let a = omega_exact(eps, n, NUM).omega;
                let b = ici_gain(eps, 0, 64) * Complex64::from_polar(1.0, phase_bar(eps, n, NUM));
                assert!((a - b).norm() < 1e-12);
            }
        }
        let w = omega_exact(0.1, 0, NUM).magnitude;
        assert!((w - 0.98356).abs() < 1e-3);
    }

    #[test]
    fn omega_approx_close_to_exact_in_regime() {
        assert_eq!(
            omega_approx(0.0, 3, NUM).unwrap().omega,
            Complex64::new(1.0, 0.0)
        );
        for &n_sc in &[8usize, 16, 64, 256] {
            let num = Numerology::new(n_sc, n_sc / 4);
            for i in -100..=100 {
                let eps = i as f64 * 1e-3;
                let a = omega_approx(eps, 4, num).unwrap();
                let e = omega_exact(eps, 4, num);
                assert!((a.magnitude - e.magnitude).abs() <= 1e-3);
                assert!((a.phase - e.phase).abs() < 1e-15);
                assert!(a.in_regime);
            }
        }
        assert!(!omega_approx(0.2, 0, NUM).unwrap().in_regime);
        assert!(omega_approx(0.4, 0, NUM).is_err());
        assert!(omega_approx(0.01, 0, Numerology::new(4, 1)).is_err());
    }

    #[test]
    fn moments_at_zero_and_known_values() {
        assert_eq!(moment1_uniform(0.0, 5, NUM).unwrap(), 1.0);
        assert_eq!(moment2_uniform(0.0).unwrap(), 1.0);
        assert_eq!(moment1_normal(0.0, 5, NUM).unwrap(), 1.0);
        assert_eq!(moment2_normal(0.0).unwrap(), 1.0);
        assert!((moment2_uniform(0.05).unwrap() - 0.99726).abs() < 1e-5);
        assert!((moment2_normal(0.02).unwrap() - 0.99868).abs() < 1e-5);
        assert!(matches!(
            moment2_uniform(-0.1),
            Err(Error::NegativeParameter(_))
        ));
        assert!(matches!(
            moment1_normal(-0.1, 0, NUM),
            Err(Error::NegativeParameter(_))
        ));
    }

    /// E{(1 − π²ε²/6) cos(gπε)} for ε ~ U[-α, α] by composite Simpson.
    fn uniform_m1_quadrature(alpha: f64, g: f64) -> f64 {
        let steps = 20_000;
        let h = 2.0 * alpha / steps as f64;
        let f = |e: f64| (1.0 - PI * PI * e * e / 6.0) * (g * PI * e).cos();
        let mut s = f(-alpha) + f(alpha);
        for i in 1..steps {
            let e = -alpha + i as f64 * h;
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(e);
        }
        s * h / 3.0 / (2.0 * alpha)
    }

    #[test]
    fn uniform_m1_matches_quadrature_including_series_branch() {
        for &alpha in &[1e-6, 3e-5, 1e-3, 0.01, 0.05, 0.0866, 0.1] {
            for n in [0usize, 1, 10, 20] {
                let cf = moment1_uniform(alpha, n, NUM).unwrap();
                let q = uniform_m1_quadrature(alpha, g_n(n, NUM));
                assert!((cf - q).abs() < 1e-9, "alpha={alpha} n={n}: {cf} vs {q}");
            }
        }
    }

    #[test]
    fn normal_first_moment_decays_past_threshold() {
        for i in 1..=50 {
            let beta = i as f64 * 1e-3;
            for n in 1..=40usize {
                if n as f64 * beta > 0.25 {
                    let e1 = moment1_normal(beta, n, NUM).unwrap();
                    let e2 = moment2_normal(beta).unwrap();
                    assert!(e1 * e1 <= 0.05 * e2, "beta={beta} n={n}");
                }
            }
        }
    }

    #[test]
    fn empirical_fixed_spec_is_omega() {
        let spec = CfoSpec::Fixed { eps: 0.03 };
        let m = moments_empirical(&spec, 4, NUM, 10, 1, OmegaModel::Exact).unwrap();
        let om = omega_exact(0.03, 4, NUM).omega;
        assert!((m.e1 - om.re).abs() < 1e-12);
        assert!((m.e1_imag - om.im).abs() < 1e-12);
        assert!((m.e2 - om.norm_sqr()).abs() < 1e-12);
    }

    #[test]
    fn empirical_is_deterministic() {
        let spec = CfoSpec::Normal { beta: 0.02 };
        let a = moments_empirical(&spec, 3, NUM, 100_000, 42, OmegaModel::Approx).unwrap();
        let b = moments_empirical(&spec, 3, NUM, 100_000, 42, OmegaModel::Approx).unwrap();
        assert_eq!(a, b);
        assert!(moments_empirical(&spec, 3, NUM, 0, 42, OmegaModel::Approx).is_err());
    }

    #[test]
    fn exact_vs_approx_second_moment() {
        let spec = CfoSpec::Normal { beta: 0.05 };
        let a = moments_empirical(&spec, 0, NUM, 200_000, 5, OmegaModel::Approx).unwrap();
        let e = moments_empirical(&spec, 0, NUM, 200_000, 5, OmegaModel::Exact).unwrap();
        assert!((a.e2 - e.e2).abs() <= 2e-3);
    }

    #[test]
    fn conversions_round_trip() {
        let cfg = SystemConfig::default();
        let c = NormalizedCfo::from_hz(2520.0, &cfg);
        assert!((c.ppb(&cfg) - 700.0).abs() < 1e-9);
        assert!((c.eps - 0.032256).abs() < 1e-12);
        let back = NormalizedCfo::from_ppb(c.ppb(&cfg), &cfg);
        assert!(((back.eps - c.eps) / c.eps).abs() < 1e-12);
    }

    #[test]
    fn spec_serde_and_validation() {
        let s: CfoSpec = serde_json::from_str(r#"{"kind":"normal","beta":0.02}"#).unwrap();
        assert_eq!(s, CfoSpec::Normal { beta: 0.02 });
        assert!(CfoSpec::Normal { beta: -0.01 }.validate().is_err());
        assert!(CfoSpec::Uniform { alpha: 0.1 }.in_regime());
        assert!(!CfoSpec::Normal { beta: 0.05 }.in_regime());
    }

    proptest! {
        #[test]
        fn ici_energy_conserved(eps in -3.0f64..3.0, n_idx in 0usize..4) {
            let n = [8usize, 16, 64, 128][n_idx];
            let total: f64 = (0..n as i64).map(|d| ici_gain(eps, d, n).norm_sqr()).sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn omega_exact_even_and_bounded(eps in 1e-9f64..0.5) {
            let p = omega_exact(eps, 0, NUM).magnitude;
            let m = omega_exact(-eps, 0, NUM).magnitude;
            prop_assert!((p - m).abs() < 1e-15);
            prop_assert!(p < 1.0);
            let further = omega_exact((eps * 1.01).min(0.5), 0, NUM).magnitude;
            prop_assert!(eps * 1.01 > 0.5 || further < p);
        }

        #[test]
        fn second_moments_do_not_depend_on_n(beta in 0.0f64..0.05, n in 0usize..30) {
            let a = closed_moments(&CfoSpec::Normal { beta }, n, NUM).unwrap().1;
            let b = closed_moments(&CfoSpec::Normal { beta }, 0, NUM).unwrap().1;
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn stratified_moments_hit_closed_form() {
        for spec in [
            CfoSpec::Uniform { alpha: 0.087 },
            CfoSpec::Normal { beta: 0.05 },
            CfoSpec::Normal { beta: 0.01 },
        ] {
            for n in [0, 10, 20] {
                let closed = closed_moments(&spec, n, NUM).unwrap();
                let m = moments_sampled(
                    &spec,
                    n,
                    NUM,
                    100_000,
                    3,
                    OmegaModel::Approx,
                    Sampling::Stratified,
                )
                .unwrap();
                assert!(
                    (m.e1 - closed.0).abs() < 1e-5,
                    "{spec:?} n={n}: {} vs {}",
                    m.e1,
                    closed.0
                );
                assert!((m.e2 - closed.1).abs() < 1e-6, "{spec:?} n={n}");
            }
        }
    }
}
