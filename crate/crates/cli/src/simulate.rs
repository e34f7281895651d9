//! Synthetic motion captures: a sinusoidal tremor plus Gaussian noise on
//! each joint.

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

use careledger_core::careflow::motion::{MotionCapture, MotionSample};

#[derive(Debug, Clone, PartialEq)]
pub struct Tremor {
    pub device_id: String,
    pub patient_id: String,
    pub joints: Vec<String>,
    pub rate_hz: f64,
    pub seconds: f64,
    pub tremor_hz: f64,
    pub amplitude_deg: f64,
    pub noise_deg: f64,
    pub seed: u64,
}

/// Resting angle of joint `j`, so joints are distinguishable.
fn rest_angle(j: usize) -> f64 {
    20.0 + 30.0 * j as f64
}

pub fn synthesize(p: &Tremor) -> Result<MotionCapture, String> {
    if !(p.rate_hz > 0.0 && p.seconds > 0.0) {
        return Err("rate and seconds must be positive".into());
    }
    let noise = Normal::new(0.0, p.noise_deg).map_err(|e| format!("noise: {e}"))?;
    let mut rng = rand::rngs::StdRng::seed_from_u64(p.seed);
    let n = (p.rate_hz * p.seconds).round() as usize;
    let omega = 2.0 * std::f64::consts::PI * p.tremor_hz;
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / p.rate_hz;
            let angles = (0..p.joints.len()).map(|j| rest_angle(j) + p.amplitude_deg * (omega * t).sin() + noise.sample(&mut rng)).collect();
            MotionSample { t_s: t, angles_deg: angles }
        })
        .collect();
    let mc = MotionCapture { device_id: p.device_id.clone(), patient_id: p.patient_id.clone(), joint_names: p.joints.clone(), samples, sample_rate_hz: p.rate_hz };
    mc.validate().map_err(|e| e.to_string())?;
    Ok(mc)
}
