//! Perturbation probes: losses under Gaussian noise at fixed SNRs, and losses
//! under sign-gradient (PGD) perturbations inside L∞ balls.
//!
//! The frame matrix plays the role of the input signal.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::TokenSeq;
use crate::model::{frame_gradient, loss_pair, Checkpoint};
use crate::tensor::Tensor;
use crate::util::{mean_std, rng_for};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaussianConfig {
    pub snrs_db: Vec<f64>,
    pub runs_per_snr: usize,
    pub seed: u64,
}

impl Default for GaussianConfig {
    fn default() -> Self {
        GaussianConfig {
            snrs_db: (0..8).map(|i| 50.0 * i as f64 / 7.0).collect(),
            runs_per_snr: 4,
            seed: 0,
        }
    }
}

impl GaussianConfig {
    pub fn validate(&self) -> Result<()> {
        if self.snrs_db.is_empty() || self.runs_per_snr == 0 {
            return Err(Error::invalid("gaussian probe needs at least one SNR and one run"));
        }
        if self.snrs_db.iter().any(|s| !s.is_finite()) {
            return Err(Error::invalid("SNR values must be finite"));
        }
        Ok(())
    }

    /// Feature count: mean and stddev of both losses per SNR.
    pub fn width(&self) -> usize {
        4 * self.snrs_db.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdvConfig {
    pub radii: Vec<f64>,
    pub step_size: f64,
    pub steps: usize,
    pub seed: u64,
}

impl Default for AdvConfig {
    fn default() -> Self {
        let fine = (1..=9).map(|i| i as f64 * 0.001);
        let coarse = (1..=7).map(|i| i as f64 * 0.01);
        AdvConfig {
            radii: fine.chain(coarse).collect(),
            step_size: 1.0,
            steps: 1,
            seed: 0,
        }
    }
}

impl AdvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.radii.is_empty() || self.radii.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) {
            return Err(Error::invalid("radii must be nonempty, finite and non-negative"));
        }
        if self.radii.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("radii must be strictly increasing"));
        }
        if !(self.step_size > 0.0) || self.steps == 0 {
            return Err(Error::invalid("PGD needs a positive step size and at least one step"));
        }
        Ok(())
    }

    /// Feature count: both losses per radius.
    pub fn width(&self) -> usize {
        2 * self.radii.len()
    }
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Scales `delta` so that `‖x‖² / ‖δ‖²` equals `snr_linear`.
pub fn scale_noise_to_snr(x: &[f64], delta: &[f64], snr_linear: f64) -> Result<Vec<f64>> {
    let ex: f64 = x.iter().map(|v| v * v).sum();
    let ed: f64 = delta.iter().map(|v| v * v).sum();
    if ex <= 0.0 || ed <= 0.0 {
        return Err(Error::invalid("signal and noise must both have nonzero energy"));
    }
    if !(snr_linear > 0.0) || !snr_linear.is_finite() {
        return Err(Error::invalid(format!("snr {snr_linear} must be positive and finite")));
    }
    let k = (ex / (snr_linear * ed)).sqrt();
    Ok(delta.iter().map(|d| k * d).collect())
}

fn add(frames: &Tensor, delta: &[f64]) -> Tensor {
    let data = frames.data().iter().zip(delta).map(|(a, b)| a + b).collect();
    Tensor::new(frames.shape().to_vec(), data).expect("same shape")
}

/// Per SNR in ascending config order:
/// `[att_mean, att_std, ctc_mean, ctc_std]` over the noisy runs.
pub fn gaussian_features(
    model: &Checkpoint,
    utterance_id: &str,
    frames: &Tensor,
    target: &TokenSeq,
    cfg: &GaussianConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let label = format!("gaussian/{utterance_id}");
    let mut out = Vec::with_capacity(cfg.width());
    for (si, &db) in cfg.snrs_db.iter().enumerate() {
        let snr = db_to_linear(db);
        let mut att = Vec::with_capacity(cfg.runs_per_snr);
        let mut ctc = Vec::with_capacity(cfg.runs_per_snr);
        for run in 0..cfg.runs_per_snr {
            let mut rng = rng_for(cfg.seed, &label, &[si as u64, run as u64]);
            let noise: Vec<f64> = (0..frames.numel())
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let delta = scale_noise_to_snr(frames.data(), &noise, snr)?;
            let [a, c] = loss_pair(model, &add(frames, &delta), target)?.clamped();
            att.push(a);
            ctc.push(c);
        }
        let (am, asd) = mean_std(&att);
        let (cm, csd) = mean_std(&ctc);
        out.extend_from_slice(&[am, asd, cm, csd]);
    }
    Ok(out)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Sign-gradient ascent on the combined loss from a uniform start inside the
/// ball, projected back onto `[-ε, ε]` after every step.
pub fn pgd_perturb(
    model: &Checkpoint,
    frames: &Tensor,
    target: &TokenSeq,
    epsilon: f64,
    eta: f64,
    steps: usize,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    if !(epsilon >= 0.0) || !epsilon.is_finite() {
        return Err(Error::invalid(format!("radius {epsilon} must be finite and >= 0")));
    }
    let n = frames.numel();
    let mut delta: Vec<f64> = if epsilon > 0.0 {
        (0..n).map(|_| rng.random_range(-epsilon..=epsilon)).collect()
    } else {
        vec![0.0; n]
    };
    for _ in 0..steps {
        let (_, grad) = frame_gradient(model, &add(frames, &delta), target)?;
        if !grad.all_finite() {
            return Err(Error::Numerical("non-finite input gradient during PGD".into()));
        }
        for (d, g) in delta.iter_mut().zip(grad.data()) {
            *d = (*d + eta * sign(*g)).clamp(-epsilon, epsilon);
        }
    }
    Tensor::new(frames.shape().to_vec(), delta)
}

/// Per radius in ascending order: `[att, ctc]` at `x + δ_ε`.
pub fn adversarial_features(
    model: &Checkpoint,
    utterance_id: &str,
    frames: &Tensor,
    target: &TokenSeq,
    cfg: &AdvConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let label = format!("pgd/{utterance_id}");
    let mut out = Vec::with_capacity(cfg.width());
    for (ri, &eps) in cfg.radii.iter().enumerate() {
        let mut rng = rng_for(cfg.seed, &label, &[ri as u64]);
        let delta = pgd_perturb(model, frames, target, eps, cfg.step_size, cfg.steps, &mut rng)?;
        out.extend_from_slice(&loss_pair(model, &add(frames, delta.data()), target)?.clamped());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};

    fn setup() -> (Checkpoint, Tensor, TokenSeq) {
        let m = init_model(&ModelConfig {
            hidden_dim: 8,
            seed: 2,
            ..ModelConfig::default()
        })
        .unwrap();
        let data = (0..48).map(|i| ((i * 7 % 13) as f64 - 6.0) / 4.0).collect();
        let x = Tensor::new(vec![6, 8], data).unwrap();
        (m, x, TokenSeq::new(vec![2, 5]).unwrap())
    }

    #[test]
    fn default_layouts() {
        let g = GaussianConfig::default();
        assert_eq!(g.snrs_db.len(), 8);
        assert_eq!(g.snrs_db[7], 50.0);
        assert_eq!(g.width(), 32);
        let a = AdvConfig::default();
        assert_eq!(a.radii.len(), 16);
        assert_eq!(a.width(), 32);
        a.validate().unwrap();
    }

    #[test]
    fn snr_scaling_formula() {
        let x = vec![10.0; 1];
        let d = scale_noise_to_snr(&x, &[3.0], db_to_linear(10.0)).unwrap();
        assert!((d[0] * d[0] - 10.0).abs() < 1e-9);
        let d = scale_noise_to_snr(&[1.0, 2.0], &[0.5, -0.5], 1.0).unwrap();
        assert!((d.iter().map(|v| v * v).sum::<f64>() - 5.0).abs() < 1e-12);
        assert!(scale_noise_to_snr(&[0.0], &[1.0], 1.0).is_err());
        assert!(scale_noise_to_snr(&[1.0], &[0.0], 1.0).is_err());
    }

    #[test]
    fn single_run_has_zero_spread() {
        let (m, x, y) = setup();
        let cfg = GaussianConfig {
            snrs_db: vec![0.0, 20.0],
            runs_per_snr: 1,
            seed: 1,
        };
        let f = gaussian_features(&m, "u", &x, &y, &cfg).unwrap();
        assert_eq!(f.len(), 8);
        assert_eq!((f[1], f[3], f[5], f[7]), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn vanishing_noise_recovers_clean_losses() {
        let (m, x, y) = setup();
        let clean = loss_pair(&m, &x, &y).unwrap();
        let cfg = GaussianConfig {
            snrs_db: vec![300.0],
            runs_per_snr: 2,
            seed: 1,
        };
        let f = gaussian_features(&m, "u", &x, &y, &cfg).unwrap();
        assert!((f[0] - clean.attention_kl).abs() < 1e-3);
        assert!((f[2] - clean.ctc).abs() < 1e-3);
    }

    #[test]
    fn zero_radius_is_clean() {
        let (m, x, y) = setup();
        let cfg = AdvConfig {
            radii: vec![0.0],
            ..AdvConfig::default()
        };
        let f = adversarial_features(&m, "u", &x, &y, &cfg).unwrap();
        assert_eq!(f, loss_pair(&m, &x, &y).unwrap().clamped().to_vec());
    }

    #[test]
    fn unit_step_lands_on_the_ball_surface() {
        let (m, x, y) = setup();
        let eps = 0.01;
        let mut rng = rng_for(0, "t", &[]);
        let d = pgd_perturb(&m, &x, &y, eps, 1.0, 1, &mut rng).unwrap();
        assert!(d.data().iter().all(|v| v.abs() <= eps));
        assert!(d.data().iter().filter(|v| v.abs() == eps).count() > 40);
    }

    #[test]
    fn features_are_deterministic() {
        let (m, x, y) = setup();
        let cfg = AdvConfig {
            radii: vec![0.001, 0.05],
            ..AdvConfig::default()
        };
        let a = adversarial_features(&m, "u", &x, &y, &cfg).unwrap();
        let b = adversarial_features(&m, "u", &x, &y, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(AdvConfig {
            radii: vec![0.02, 0.01],
            ..AdvConfig::default()
        }
        .validate()
        .is_err());
    }
}
