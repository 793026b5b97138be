//! Channel statistics and assistant generation (AG).
//!
//! AG re-normalizes a student feature map to statistics interpolated between
//! the teacher's and its own:
//!
//! ```text
//! beta  = eps * mu(z)    + (1 - eps) * mu(z')
//! gamma = eps * sigma(z) + (1 - eps) * sigma(z')
//! AG(z') = gamma * (z' - mu(z')) / max(sigma(z'), 1e-6) + beta
//! ```
//!
//! with `eps ~ Beta(rho, rho)` drawn once per teacher–student pair. The
//! assistant branch never carries gradient.

use thiserror::Error;

use crate::graph::{Graph, Var};
use crate::model::{Model, ModelError, ModelVars};
use crate::rng::{self, Rng};
use crate::tensor::{channel_moments, Tensor, TensorError};

/// Floor on the student deviation in the AG denominator.
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum StyleError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("feature statistics need a C×H×W map, got shape {0:?}")]
    NotAFeatureMap(Vec<usize>),
    #[error("channel mismatch: feature has {feature} channels, statistics have {stats}")]
    ChannelMismatch { feature: usize, stats: usize },
    #[error("{what}: expected {expected} entries, got {actual}")]
    BatchMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("Beta concentration must be positive, got {0}")]
    InvalidConcentration(f64),
    #[error("blend coefficient {0} outside [0, 1]")]
    InvalidEpsilon(f64),
    #[error("no teacher statistics for hooked block {0}")]
    MissingHookStats(usize),
}

/// Per-channel spatial mean and population standard deviation of one feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Statistics of one sample at every block output, indexed by block.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub layers: Vec<ChannelStats>,
}

/// `(mu, sigma)` of a `C×H×W` map (a leading batch axis of 1 is accepted).
pub fn feature_stats(z: &Tensor) -> Result<ChannelStats, StyleError> {
    let z4 = match z.rank() {
        3 => z.reshape(&[1, z.shape()[0], z.shape()[1], z.shape()[2]])?,
        4 if z.shape()[0] == 1 => z.clone(),
        _ => return Err(StyleError::NotAFeatureMap(z.shape().to_vec())),
    };
    let (mean, std) = channel_moments(&z4);
    Ok(ChannelStats { mean, std })
}

/// Statistics of every sample in a `[B, C, H, W]` batch.
pub fn batch_feature_stats(z: &Tensor) -> Result<Vec<ChannelStats>, StyleError> {
    if z.rank() != 4 {
        return Err(StyleError::NotAFeatureMap(z.shape().to_vec()));
    }
    let c = z.shape()[1];
    let (mean, std) = channel_moments(z);
    Ok(mean
        .chunks_exact(c)
        .zip(std.chunks_exact(c))
        .map(|(m, s)| ChannelStats {
            mean: m.to_vec(),
            std: s.to_vec(),
        })
        .collect())
}

fn gamma_draw(shape: f64, rng: &mut Rng) -> f64 {
    if shape < 1.0 {
        // Gamma(a) = Gamma(a + 1) * U^(1/a)
        let u = 1.0 - rng::uniform(rng);
        return gamma_draw(shape + 1.0, rng) * libm::pow(u, 1.0 / shape);
    }
    // Marsaglia–Tsang
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / libm::sqrt(9.0 * d);
    loop {
        let x = rng::standard_normal(rng);
        let v = 1.0 + c * x;
        if v <= 0.0 {
            continue;
        }
        let v = v * v * v;
        let u = rng::uniform(rng);
        if u < 1.0 - 0.0331 * x.powi(4) || libm::log(u) < 0.5 * x * x + d * (1.0 - v + libm::log(v)) {
            return d * v;
        }
    }
}

/// Draws the blend coefficient `eps ~ Beta(rho, rho)`.
pub fn sample_epsilon(rho: f64, rng: &mut Rng) -> Result<f64, StyleError> {
    if !(rho > 0.0) || !rho.is_finite() {
        return Err(StyleError::InvalidConcentration(rho));
    }
    loop {
        let a = gamma_draw(rho, rng);
        let b = gamma_draw(rho, rng);
        if a + b > 0.0 {
            return Ok(a / (a + b));
        }
    }
}

/// AG over a `[B, C, H, W]` student batch: sample `i` is re-styled toward
/// `teacher[i]` with coefficient `eps[i]`.
pub fn ag_blend(z_student: &Tensor, teacher: &[&ChannelStats], eps: &[f64]) -> Result<Tensor, StyleError> {
    if z_student.rank() != 4 {
        return Err(StyleError::NotAFeatureMap(z_student.shape().to_vec()));
    }
    let s = z_student.shape();
    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
    for (what, len) in [("teacher statistics", teacher.len()), ("blend coefficients", eps.len())] {
        if len != b {
            return Err(StyleError::BatchMismatch {
                what,
                expected: b,
                actual: len,
            });
        }
    }
    if let Some(e) = eps.iter().find(|e| !(0.0..=1.0).contains(*e)) {
        return Err(StyleError::InvalidEpsilon(*e));
    }
    if let Some(t) = teacher.iter().find(|t| t.channels() != c) {
        return Err(StyleError::ChannelMismatch {
            feature: c,
            stats: t.channels(),
        });
    }
    let (mu, sigma) = channel_moments(z_student);
    let mut out = z_student.clone();
    for (i, plane) in out.data_mut().chunks_exact_mut(hw).enumerate() {
        let (n, ch) = (i / c, i % c);
        let e = eps[n];
        let beta = e * teacher[n].mean[ch] + (1.0 - e) * mu[i];
        let gamma = e * teacher[n].std[ch] + (1.0 - e) * sigma[i];
        let denom = sigma[i].max(STD_FLOOR);
        for v in plane.iter_mut() {
            *v = gamma * (*v - mu[i]) / denom + beta;
        }
    }
    Ok(out)
}

/// Assistant prediction `softmax(g(f'(x'; theta, phi)) / T)` built on `g`.
///
/// Each hooked block output of the student pass is replaced by its AG blend,
/// inserted as a constant, so no gradient reaches the parameters through the
/// assistant; the returned probabilities are detached as well.
pub fn assistant_forward(
    model: &Model,
    g: &mut Graph,
    vars: &ModelVars,
    x_student: Var,
    teacher_stats: &[FeatureStats],
    eps: &[f64],
) -> Result<Var, StyleError> {
    let hooks = &model.config().hooks;
    for (block, _) in hooks.iter().enumerate().filter(|(_, &on)| on) {
        if teacher_stats.iter().any(|t| t.layers.len() <= block) {
            return Err(StyleError::MissingHookStats(block));
        }
    }
    let features = model.extract_with(g, vars, x_student, |block, g, z| {
        if !hooks[block] {
            return Ok(z);
        }
        let layer: Vec<&ChannelStats> = teacher_stats.iter().map(|t| &t.layers[block]).collect();
        let blended = ag_blend(g.value(z), &layer, eps)?;
        Ok::<_, StyleError>(g.constant(blended)?)
    })?;
    let probs = model.classify(g, vars, features.embedding)?;
    Ok(g.detach(probs)?)
}
