//! Trace-class Q-Wiener increments and keyed, random-access noise streams.
//!
//! Every random number in the crate is addressed by a [`StreamKey`] plus a step
//! index, never by the order in which threads happen to consume a shared generator.
//! A key is hashed into a ChaCha8 seed; the step index selects the ChaCha stream
//! (the 64-bit nonce), so the draws for `(key, step)` are available without
//! replaying earlier steps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Result};
use crate::spectral::SpectralField;

/// Particle id reserved for the reference ("true") signal and its observations.
pub const REFERENCE_PARTICLE: u64 = u64::MAX;
/// Oracle ensemble members use ids `ORACLE_PARTICLE_BASE + j`.
pub const ORACLE_PARTICLE_BASE: u64 = 1 << 48;

/// Eigenvalues of the noise covariance Q in the sine basis, `q_k = c k^{-2α}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QSpectrum {
    eigenvalues: Vec<f64>,
    alpha: f64,
    trace: f64,
}

impl QSpectrum {
    /// Power-law spectrum normalised so the truncated trace equals `trace`.
    pub fn power_law(modes: usize, alpha: f64, trace: f64) -> Result<Self> {
        if modes == 0 {
            return invalid("Q spectrum needs at least one mode");
        }
        if !(alpha > 0.5) || !alpha.is_finite() {
            return invalid(format!("decay exponent must exceed 1/2, got {alpha}"));
        }
        if !(trace > 0.0) || !trace.is_finite() {
            return invalid(format!("trace target must be positive, got {trace}"));
        }
        let raw: Vec<f64> = (1..=modes).map(|k| (k as f64).powf(-2.0 * alpha)).collect();
        let total: f64 = raw.iter().sum();
        let eigenvalues = raw.into_iter().map(|r| trace * r / total).collect();
        Ok(Self { eigenvalues, alpha, trace })
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Target trace τ_Q.
    pub fn trace(&self) -> f64 {
        self.trace
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StreamRole {
    SignalNoise,
    ObsNoise,
    Init,
    /// Resampling and bootstrap draws that are not part of any dynamics.
    Auxiliary,
}

impl StreamRole {
    fn tag(self) -> u8 {
        match self {
            StreamRole::SignalNoise => 1,
            StreamRole::ObsNoise => 2,
            StreamRole::Init => 3,
            StreamRole::Auxiliary => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamKey {
    pub experiment_seed: u64,
    pub replicate_id: u64,
    pub particle_id: u64,
    pub role: StreamRole,
}

impl StreamKey {
    pub fn new(experiment_seed: u64, replicate_id: u64, particle_id: u64, role: StreamRole) -> Self {
        Self { experiment_seed, replicate_id, particle_id, role }
    }

    pub fn with_particle(self, particle_id: u64) -> Self {
        Self { particle_id, ..self }
    }

    pub fn with_role(self, role: StreamRole) -> Self {
        Self { role, ..self }
    }
}

/// Handle onto the family of random streams owned by one key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NoiseStream {
    seed: [u8; 32],
}

pub fn derive_stream(key: StreamKey) -> NoiseStream {
    let mut hasher = Sha256::new();
    hasher.update(b"enkbf-stream-v1");
    hasher.update(key.experiment_seed.to_le_bytes());
    hasher.update(key.replicate_id.to_le_bytes());
    hasher.update(key.particle_id.to_le_bytes());
    hasher.update([key.role.tag()]);
    NoiseStream { seed: hasher.finalize().into() }
}

impl NoiseStream {
    /// Generator positioned at the start of the sub-stream for `step`.
    pub fn rng_at(&self, step: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(step);
        rng
    }

    pub fn normals(&self, step: u64, count: usize) -> Vec<f64> {
        let mut rng = self.rng_at(step);
        (0..count).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
    }

    pub fn normal(&self, step: u64) -> f64 {
        self.rng_at(step).sample(StandardNormal)
    }

    /// Q-Wiener increment over one step: component k is `sqrt(q_k dt) ξ_k`.
    pub fn wiener_increment(&self, step: u64, dt: f64, q: &QSpectrum) -> SpectralField {
        let mut rng = self.rng_at(step);
        let coeffs = q
            .eigenvalues()
            .iter()
            .map(|&qk| (qk * dt).sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect::<Vec<_>>();
        SpectralField::from_vec(coeffs)
    }
}

pub fn sample_wiener_increment(
    key: StreamKey,
    step_index: u64,
    dt: f64,
    q: &QSpectrum,
) -> Result<SpectralField> {
    if !(dt > 0.0) || !dt.is_finite() {
        return invalid(format!("time step must be positive, got {dt}"));
    }
    Ok(derive_stream(key).wiener_increment(step_index, dt, q))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(particle: u64, role: StreamRole) -> StreamKey {
        StreamKey::new(7, 0, particle, role)
    }

    #[test]
    fn spectrum_matches_trace_and_decays() {
        let q = QSpectrum::power_law(32, 1.0, 1.0).unwrap();
        let total: f64 = q.eigenvalues().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(q.eigenvalues().windows(2).all(|w| w[1] < w[0]));
        let mut partial = 0.0;
        for &qk in q.eigenvalues() {
            partial += qk;
            assert!(partial <= 1.0 + 1e-12);
        }
        // q_k k^{2α} is constant
        let c = q.eigenvalues()[0];
        assert!((q.eigenvalues()[9] * 100.0 - c).abs() < 1e-14);
    }

    #[test]
    fn spectrum_rejects_bad_parameters() {
        assert!(QSpectrum::power_law(0, 1.0, 1.0).is_err());
        assert!(QSpectrum::power_law(4, 0.5, 1.0).is_err());
        assert!(QSpectrum::power_law(4, 1.0, 0.0).is_err());
    }

    #[test]
    fn same_key_same_draws() {
        let a = derive_stream(key(3, StreamRole::SignalNoise)).normals(0, 100);
        let b = derive_stream(key(3, StreamRole::SignalNoise)).normals(0, 100);
        assert_eq!(a, b);
    }

    #[test]
    fn role_and_ids_change_the_stream() {
        let base = key(0, StreamRole::SignalNoise);
        let first = derive_stream(base).normal(0);
        assert_ne!(first, derive_stream(base.with_role(StreamRole::ObsNoise)).normal(0));
        assert_ne!(first, derive_stream(base.with_particle(1)).normal(0));
        assert_ne!(first, derive_stream(StreamKey { replicate_id: 1, ..base }).normal(0));
        assert_ne!(first, derive_stream(StreamKey { experiment_seed: 8, ..base }).normal(0));
        assert_ne!(first, derive_stream(base).normal(1));
    }

    #[test]
    fn neighbouring_particles_are_uncorrelated() {
        let n = 100_000;
        let a = derive_stream(key(0, StreamRole::SignalNoise));
        let b = derive_stream(key(1, StreamRole::SignalNoise));
        let xs: Vec<f64> = (0..n).map(|s| a.normal(s as u64)).collect();
        let ys: Vec<f64> = (0..n).map(|s| b.normal(s as u64)).collect();
        let mx = xs.iter().sum::<f64>() / n as f64;
        let my = ys.iter().sum::<f64>() / n as f64;
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        for (x, y) in xs.iter().zip(&ys) {
            sxy += (x - mx) * (y - my);
            sxx += (x - mx) * (x - mx);
            syy += (y - my) * (y - my);
        }
        let corr = sxy / (sxx * syy).sqrt();
        assert!(corr.abs() < 0.01, "correlation {corr}");
    }

    #[test]
    fn increment_scales_with_sqrt_dt() {
        let q = QSpectrum::power_law(4, 1.0, 1.0).unwrap();
        let s = derive_stream(key(0, StreamRole::SignalNoise));
        let small = s.wiener_increment(5, 1e-12, &q);
        let unit = s.wiener_increment(5, 1.0, &q);
        for k in 0..4 {
            assert!((small[k] - 1e-6 * unit[k]).abs() <= 1e-18 * unit[k].abs().max(1.0));
        }
        assert!(sample_wiener_increment(key(0, StreamRole::SignalNoise), 0, 0.0, &q).is_err());
    }

    #[test]
    fn increment_variance_matches_q_dt() {
        let q = QSpectrum::power_law(6, 1.0, 1.0).unwrap();
        let dt = 0.01;
        let draws = 100_000;
        let s = derive_stream(key(2, StreamRole::SignalNoise));
        let mut sumsq = [0.0; 6];
        let mut fourth = [0.0; 6];
        for step in 0..draws {
            let dw = s.wiener_increment(step, dt, &q);
            for ((sq, f), d) in sumsq.iter_mut().zip(&mut fourth).zip(dw.as_slice()) {
                *sq += d * d;
                *f += d.powi(4);
            }
        }
        let mut total = 0.0;
        for (k, sq) in sumsq.iter().enumerate() {
            let var = sq / draws as f64;
            let target = q.eigenvalues()[k] * dt;
            // SE of the second moment of a centred Gaussian: sqrt(2) σ² / sqrt(n)
            let se = (2.0f64).sqrt() * target / (draws as f64).sqrt();
            assert!((var - target).abs() < 3.0 * se, "mode {k}: {var} vs {target}");
            total += var;
        }
        assert!((total - dt).abs() < 0.01 * dt);
    }

    #[test]
    fn draws_pass_a_jarque_bera_test() {
        let n = 100_000;
        let s = derive_stream(key(9, StreamRole::ObsNoise));
        let xs: Vec<f64> = (0..n).map(|i| s.normal(i as u64)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let m2 = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        let m3 = xs.iter().map(|x| (x - mean).powi(3)).sum::<f64>() / n as f64;
        let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n as f64;
        let skew = m3 / m2.powf(1.5);
        let kurt = m4 / (m2 * m2);
        let jb = n as f64 / 6.0 * (skew * skew + (kurt - 3.0).powi(2) / 4.0);
        // chi-square(2) upper 1e-3 quantile: -2 ln(1e-3)
        assert!(jb < -2.0 * (1e-3f64).ln(), "JB statistic {jb}");
    }

    #[test]
    fn streams_do_not_depend_on_consumption_order() {
        let q = QSpectrum::power_law(8, 1.0, 1.0).unwrap();
        let sequential: Vec<_> = (0..16u64)
            .map(|p| derive_stream(key(p, StreamRole::SignalNoise)).wiener_increment(3, 0.1, &q))
            .collect();
        let reversed: Vec<_> = (0..16u64)
            .rev()
            .map(|p| derive_stream(key(p, StreamRole::SignalNoise)).wiener_increment(3, 0.1, &q))
            .collect();
        for (p, field) in sequential.iter().enumerate() {
            assert_eq!(field, &reversed[15 - p]);
        }
    }
}
