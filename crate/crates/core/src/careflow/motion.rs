//! Joint-angle captures from motion devices and the summary features the
//! dose suggestion compares.

use serde::{Deserialize, Serialize};

use crate::canonical;

pub const MOTION_HEADER: &str = "#careledger-motion v1";

/// Denominator guard in [`similarity`].
pub const SIMILARITY_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MotionError {
    #[error("invalid motion capture: {0}")]
    Invalid(String),
    #[error("malformed motion file: {0}")]
    Malformed(String),
    #[error("feature vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionSample {
    pub t_s: f64,
    pub angles_deg: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionCapture {
    pub device_id: String,
    pub patient_id: String,
    pub joint_names: Vec<String>,
    pub samples: Vec<MotionSample>,
    pub sample_rate_hz: f64,
}

/// Wire layout: each sample is `[t_s, a1, a2, …]`.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MotionWire {
    device_id: String,
    patient_id: String,
    sample_rate_hz: f64,
    joint_names: Vec<String>,
    samples: Vec<Vec<f64>>,
}

impl MotionCapture {
    pub fn validate(&self) -> Result<(), MotionError> {
        let bad = |m: String| Err(MotionError::Invalid(m));
        if self.joint_names.is_empty() {
            return bad("no joints".into());
        }
        if self.samples.len() < 2 {
            return bad(format!("need at least 2 samples, got {}", self.samples.len()));
        }
        if !(self.sample_rate_hz.is_finite() && self.sample_rate_hz > 0.0) {
            return bad(format!("sample rate {} is not positive", self.sample_rate_hz));
        }
        let joints = self.joint_names.len();
        let mut prev_t = f64::NEG_INFINITY;
        for (i, s) in self.samples.iter().enumerate() {
            if s.angles_deg.len() != joints {
                return bad(format!("sample {i} has {} angles for {joints} joints", s.angles_deg.len()));
            }
            if !s.t_s.is_finite() || s.angles_deg.iter().any(|a| !a.is_finite()) {
                return bad(format!("sample {i} has a non-finite value"));
            }
            if s.t_s <= prev_t {
                return bad(format!("sample {i} time {} does not increase", s.t_s));
            }
            prev_t = s.t_s;
        }
        Ok(())
    }

    /// The canonical motion file: header line, then canonical JSON.
    pub fn to_canonical(&self) -> Result<Vec<u8>, MotionError> {
        self.validate()?;
        let wire = MotionWire {
            device_id: self.device_id.clone(),
            patient_id: self.patient_id.clone(),
            sample_rate_hz: self.sample_rate_hz,
            joint_names: self.joint_names.clone(),
            samples: self
                .samples
                .iter()
                .map(|s| std::iter::once(s.t_s).chain(s.angles_deg.iter().copied()).collect())
                .collect(),
        };
        let body = canonical::to_string(&wire).map_err(|e| MotionError::Malformed(e.to_string()))?;
        Ok(format!("{MOTION_HEADER}\n{body}").into_bytes())
    }

    pub fn parse(bytes: &[u8]) -> Result<MotionCapture, MotionError> {
        let text = std::str::from_utf8(bytes).map_err(|e| MotionError::Malformed(e.to_string()))?;
        let (header, body) = text.split_once('\n').ok_or_else(|| MotionError::Malformed("missing header line".into()))?;
        if header.trim_end_matches('\r') != MOTION_HEADER {
            return Err(MotionError::Malformed(format!("unexpected header {header:?}")));
        }
        let wire: MotionWire = serde_json::from_str(body).map_err(|e| MotionError::Malformed(e.to_string()))?;
        let mut samples = Vec::with_capacity(wire.samples.len());
        for (i, row) in wire.samples.into_iter().enumerate() {
            let Some((&t_s, angles)) = row.split_first() else {
                return Err(MotionError::Malformed(format!("sample {i} is empty")));
            };
            samples.push(MotionSample { t_s, angles_deg: angles.to_vec() });
        }
        let mc = MotionCapture {
            device_id: wire.device_id,
            patient_id: wire.patient_id,
            joint_names: wire.joint_names,
            samples,
            sample_rate_hz: wire.sample_rate_hz,
        };
        mc.validate()?;
        Ok(mc)
    }
}

/// Per-joint summary statistics, flattened in joint order as
/// `[mean_deg, std_deg, mean_abs_delta_deg]` per joint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn joint(&self, j: usize) -> JointFeatures {
        JointFeatures { mean_deg: self.0[3 * j], std_deg: self.0[3 * j + 1], mean_abs_delta_deg: self.0[3 * j + 2] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointFeatures {
    pub mean_deg: f64,
    /// Population standard deviation.
    pub std_deg: f64,
    /// Mean absolute first difference; a tremor-intensity proxy.
    pub mean_abs_delta_deg: f64,
}

pub fn extract_features(mc: &MotionCapture) -> FeatureVector {
    let n = mc.samples.len() as f64;
    let mut out = Vec::with_capacity(3 * mc.joint_names.len());
    for j in 0..mc.joint_names.len() {
        let series = mc.samples.iter().map(|s| s.angles_deg[j]);
        let mean = series.clone().sum::<f64>() / n;
        let var = series.clone().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
        let deltas: f64 = mc.samples.windows(2).map(|w| (w[1].angles_deg[j] - w[0].angles_deg[j]).abs()).sum();
        out.extend([mean, var.sqrt(), deltas / (n - 1.0)]);
    }
    FeatureVector(out)
}

/// Root-mean-square of per-component relative differences. 0 means
/// identical; the result lies in `[0, 1]` and is symmetric.
pub fn similarity(a: &FeatureVector, b: &FeatureVector) -> Result<f64, MotionError> {
    if a.len() != b.len() {
        return Err(MotionError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = a
        .0
        .iter()
        .zip(&b.0)
        .map(|(x, y)| ((x - y) / (x.abs() + y.abs() + SIMILARITY_EPSILON)).powi(2))
        .sum();
    Ok((sum / a.len() as f64).sqrt())
}
