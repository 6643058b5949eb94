use dmubf::analytic::{from_db, to_db, DB_FLOOR};
use dmubf::beamform::{compute_weights, CbfNormalization, Method};
use dmubf::cfo::{closed_moments, ici_gain, CfoSpec, Numerology};
use dmubf::channel::{complex_gaussian, rayleigh_channel, CMatrix, Correlation, Fading};
use dmubf::dataset::{estimate_cfo, DatasetMeta, PilotRecord};
use dmubf::ofdm::{OfdmModem, SystemConfig};
use num_complex::Complex64;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn meta(n_sc: usize, cp: usize) -> DatasetMeta {
    DatasetMeta {
        num_frames: 1,
        num_daps: 1,
        antennas_per_dap: 1,
        num_users: 1,
        num_subcarriers: n_sc,
        cp_len: cp,
        sample_rate_hz: n_sc as f64 * 78_125.0,
        subcarrier_spacing_hz: 78_125.0,
        carrier_freq_hz: 3.6e9,
        pilot_slots_per_user: 1,
        data_slots: 1,
        symbols_per_slot: 1,
        scenario: None,
        has_tx: false,
    }
}

proptest! {
    #[test]
    fn ici_gains_conserve_energy(eps in -0.5f64..0.5, log_n in 3u32..8) {
        let n = 1usize << log_n;
        let total: f64 = (0..n as i64).map(|d| ici_gain(eps, d, n).norm_sqr()).sum();
        prop_assert!((total - 1.0).abs() < 1e-10);
    }

    #[test]
    fn modem_round_trip_is_unitary(seed in any::<u64>(), log_n in 3u32..8, cp in 0usize..9) {
        let n = 1usize << log_n;
        let modem = OfdmModem::new(Numerology::new(n, cp));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Complex64> = (0..n).map(|_| complex_gaussian(&mut rng, 1.0)).collect();
        let t = modem.modulate_symbol(&x).unwrap();
        prop_assert_eq!(t.len(), n + cp);
        let e_freq: f64 = x.iter().map(|v| v.norm_sqr()).sum();
        let e_time: f64 = t[cp..].iter().map(|v| v.norm_sqr()).sum();
        prop_assert!((e_freq - e_time).abs() < 1e-9 * e_freq.max(1.0));
        let back = modem.demodulate_symbol(&t).unwrap();
        for (a, b) in x.iter().zip(&back) {
            prop_assert!((a - b).norm() < 1e-10);
        }
    }

    #[test]
    fn closed_moments_are_valid_moments(p in 0.0f64..0.1, n in 0usize..40, uniform in any::<bool>()) {
        let spec = if uniform { CfoSpec::Uniform { alpha: p } } else { CfoSpec::Normal { beta: p } };
        let (e1, e2) = closed_moments(&spec, n, Numerology::new(64, 16)).unwrap();
        prop_assert!(e2 <= 1.0 + 1e-12 && e2 > 0.0);
        prop_assert!(e1.abs() <= 1.0 + 1e-12);
        prop_assert!(e1 * e1 <= e2 + 1e-12);
    }

    #[test]
    fn zero_forcing_inverts_the_channel(seed in any::<u64>(), k in 1usize..5, local in any::<bool>()) {
        let cfg = SystemConfig {
            num_daps: 2,
            antennas_per_dap: 6,
            num_users: k,
            ..SystemConfig::default()
        };
        let h = rayleigh_channel(&cfg, Fading::Flat, &Correlation::None, seed).unwrap();
        let method = if local { Method::ZfLocal } else { Method::ZfCentral };
        let h0 = h.at(0);
        let w = compute_weights(method, h0, 2, CbfNormalization::default()).unwrap();
        let eye = CMatrix::identity(k, k);
        if local {
            for m in 0..2 {
                let wm = w.matrix().rows(m * 6, 6).into_owned();
                let hm = h0.rows(m * 6, 6).into_owned();
                prop_assert!((wm.adjoint() * hm - &eye).norm() < 1e-9);
            }
        } else {
            prop_assert!((w.matrix().adjoint() * h0 - eye).norm() < 1e-9);
        }
    }

    #[test]
    fn noiseless_pilot_yields_its_offset(
        seed in any::<u64>(),
        frac in -0.99f64..0.99,
        gain_re in -2.0f64..2.0,
        gain_im in 0.1f64..2.0,
    ) {
        let m = meta(64, 16);
        let sps = m.numerology().samples_per_symbol();
        let limit = 1.0 / (2.0 * sps as f64 * m.sample_period_s());
        let hz = frac * limit;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Complex64> = (0..sps).map(|_| complex_gaussian(&mut rng, 1.0)).collect();
        let g = Complex64::new(gain_re, gain_im);
        let samples = (0..2 * sps)
            .map(|t| {
                let ph = 2.0 * std::f64::consts::PI * hz * t as f64 * m.sample_period_s();
                g * x[t % sps] * Complex64::from_polar(1.0, ph)
            })
            .collect();
        let est = estimate_cfo(&PilotRecord { user: 0, antenna: 0, samples }, &m).unwrap();
        prop_assert!((est.hz - hz).abs() < 1e-6 * limit);
        prop_assert!((est.eps - hz / m.subcarrier_spacing_hz).abs() < 1e-9);
    }

    #[test]
    fn decibel_conversions_invert_above_the_floor(db in -200.0f64..200.0) {
        prop_assert!((to_db(from_db(db)) - db.max(DB_FLOOR)).abs() < 1e-9);
    }
}
