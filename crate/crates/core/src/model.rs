//! Convolutional feature extractor with style hooks, and the cosine classifier.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, Var};
use crate::rng::{self, Rng};
use crate::tensor::{Tensor, TensorError};

const CHECKPOINT_MAGIC: &[u8; 8] = b"S3DCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;
const INFERENCE_CHUNK: usize = 256;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid architecture: {0}")]
    InvalidConfig(String),
    #[error("input shape {actual:?} does not match the configured {expected:?}")]
    InputShape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// `[C, H, W]` of the input images.
    pub input_shape: [usize; 3],
    /// Output channels of each conv(3×3) + ReLU + avgpool(2) block.
    pub block_channels: Vec<usize>,
    pub embedding_dim: usize,
    pub num_classes: usize,
    pub temperature: f64,
    /// Which block outputs receive assistant generation.
    pub hooks: Vec<bool>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            input_shape: [3, 16, 16],
            block_channels: vec![16, 32],
            embedding_dim: 64,
            num_classes: 5,
            temperature: 0.05,
            hooks: vec![true, true],
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.block_channels.is_empty() {
            return bad("at least one block is required".into());
        }
        if self.hooks.len() != self.block_channels.len() {
            return bad(format!(
                "hook mask has {} entries for {} blocks",
                self.hooks.len(),
                self.block_channels.len()
            ));
        }
        let [c, h, w] = self.input_shape;
        if c == 0 || self.block_channels.contains(&0) || self.embedding_dim == 0 {
            return bad("channel counts and embedding width must be positive".into());
        }
        let div = 1usize << self.block_channels.len();
        if h % div != 0 || w % div != 0 || h < div || w < div {
            return bad(format!(
                "input {h}x{w} cannot be halved {} times",
                self.block_channels.len()
            ));
        }
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2".into());
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        Ok(())
    }

    /// `[C, H, W]` of every block output.
    pub fn block_shapes(&self) -> Vec<[usize; 3]> {
        let [_, mut h, mut w] = self.input_shape;
        self.block_channels
            .iter()
            .map(|&c| {
                h /= 2;
                w /= 2;
                [c, h, w]
            })
            .collect()
    }

    fn flat_dim(&self) -> usize {
        self.block_shapes().last().map_or(0, |s| s.iter().product())
    }

    /// Names and shapes of every parameter tensor, in storage order.
    pub fn parameter_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut layout = Vec::new();
        let mut in_c = self.input_shape[0];
        for (i, &out_c) in self.block_channels.iter().enumerate() {
            layout.push((format!("block{}.conv.weight", i + 1), vec![out_c, in_c, 3, 3]));
            layout.push((format!("block{}.conv.bias", i + 1), vec![out_c]));
            in_c = out_c;
        }
        layout.push(("head.weight".into(), vec![self.flat_dim(), self.embedding_dim]));
        layout.push(("head.bias".into(), vec![self.embedding_dim]));
        layout.push(("classifier.weight".into(), vec![self.embedding_dim, self.num_classes]));
        layout
    }
}

/// He-normal standard deviation `sqrt(2 / fan_in)`.
pub fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ArchConfig,
    params: Vec<Tensor>,
}

/// Parameter handles of a model bound onto one graph.
#[derive(Clone, Debug)]
pub struct ModelVars {
    blocks: Vec<(Var, Var)>,
    head_weight: Var,
    head_bias: Var,
    classifier: Var,
    all: Vec<Var>,
}

impl ModelVars {
    /// Handles in the model's parameter storage order.
    pub fn params(&self) -> &[Var] {
        &self.all
    }
}

/// Output of the feature extractor for one batch.
#[derive(Clone, Debug)]
pub struct Features {
    pub embedding: Var,
    /// Output of every block, hooked or not.
    pub block_outputs: Vec<Var>,
}

/// Temperature-scaled cosine logits and their softmax for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub scaled_logits: Tensor,
    pub probs: Tensor,
}

impl Model {
    /// Gaussian `N(0, 2/fan_in)` weights, zero biases.
    pub fn init(config: ArchConfig, rng: &mut Rng) -> Result<Self, ModelError> {
        config.validate()?;
        let params = config
            .parameter_layout()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data = if name.ends_with(".bias") {
                    vec![0.0; n]
                } else {
                    let fan_in: usize = if shape.len() == 4 {
                        shape[1..].iter().product()
                    } else {
                        shape[0]
                    };
                    let std = he_std(fan_in);
                    (0..n).map(|_| std * rng::standard_normal(rng)).collect()
                };
                Tensor::new(shape, data)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { config, params })
    }

    pub fn from_parameters(config: ArchConfig, params: Vec<Tensor>) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = config.parameter_layout();
        if layout.len() != params.len()
            || layout.iter().zip(&params).any(|((_, s), p)| s.as_slice() != p.shape())
        {
            return Err(ModelError::InvalidConfig(
                "parameter shapes do not match the architecture".into(),
            ));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn parameters(&self) -> &[Tensor] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn parameter_names(&self) -> Vec<String> {
        self.config.parameter_layout().into_iter().map(|(n, _)| n).collect()
    }

    /// Flattened copy of every parameter, in storage order.
    pub fn flat_parameters(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.data().iter().copied()).collect()
    }

    /// Adds the parameters to `g` as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<ModelVars, ModelError> {
        let all = self
            .params
            .iter()
            .map(|p| g.leaf(p.clone(), trainable))
            .collect::<Result<Vec<_>, _>>()?;
        self.vars_from(g, all)
    }

    /// Uses existing graph nodes, in storage order, as the parameters.
    pub fn vars_from(&self, g: &Graph, all: Vec<Var>) -> Result<ModelVars, ModelError> {
        let layout = self.config.parameter_layout();
        if all.len() != layout.len() {
            return Err(ModelError::InvalidConfig(format!(
                "expected {} parameter nodes, got {}",
                layout.len(),
                all.len()
            )));
        }
        for ((name, shape), &v) in layout.iter().zip(&all) {
            let actual = g.try_value(v)?.shape();
            if actual != shape.as_slice() {
                return Err(ModelError::InvalidConfig(format!(
                    "node for `{name}` has shape {actual:?}, expected {shape:?}"
                )));
            }
        }
        let nb = self.config.block_channels.len();
        Ok(ModelVars {
            blocks: (0..nb).map(|i| (all[2 * i], all[2 * i + 1])).collect(),
            head_weight: all[2 * nb],
            head_bias: all[2 * nb + 1],
            classifier: all[2 * nb + 2],
            all,
        })
    }

    fn check_input(&self, shape: &[usize]) -> Result<(), ModelError> {
        let expected = self.config.input_shape;
        if shape.len() != 4 || shape[1..] != expected {
            return Err(ModelError::InputShape {
                expected: expected.to_vec(),
                actual: shape.to_vec(),
            });
        }
        Ok(())
    }

    pub fn extract(&self, g: &mut Graph, vars: &ModelVars, x: Var) -> Result<Features, ModelError> {
        self.extract_with(g, vars, x, |_, _, z| Ok::<_, ModelError>(z))
    }

    /// Feature extractor where `inject(block, graph, z)` may replace the output
    /// of each block before the next block consumes it.
    pub fn extract_with<E, F>(&self, g: &mut Graph, vars: &ModelVars, x: Var, mut inject: F) -> Result<Features, E>
    where
        E: From<ModelError> + From<TensorError>,
        F: FnMut(usize, &mut Graph, Var) -> Result<Var, E>,
    {
        self.check_input(g.value(x).shape())?;
        let batch = g.value(x).shape()[0];
        let mut z = x;
        let mut block_outputs = Vec::with_capacity(vars.blocks.len());
        for (i, &(w, b)) in vars.blocks.iter().enumerate() {
            let conv = g.conv2d(z, w, Some(b), 1)?;
            let act = g.relu(conv)?;
            let pooled = g.avg_pool2(act)?;
            z = inject(i, g, pooled)?;
            block_outputs.push(z);
        }
        let flat = g.reshape(z, &[batch, self.config.flat_dim()])?;
        let lin = g.matmul(flat, vars.head_weight)?;
        let embedding = g.add_bias(lin, vars.head_bias)?;
        Ok(Features {
            embedding,
            block_outputs,
        })
    }

    /// `cos(h, w_k) / T` for every class.
    pub fn scaled_logits(&self, g: &mut Graph, vars: &ModelVars, h: Var) -> Result<Var, ModelError> {
        let hn = g.l2_normalize(h, 1)?;
        let wn = g.l2_normalize(vars.classifier, 0)?;
        let cos = g.matmul(hn, wn)?;
        Ok(g.scale(cos, 1.0 / self.config.temperature)?)
    }

    /// Class probabilities `softmax(cos(h, w) / T)`.
    pub fn classify(&self, g: &mut Graph, vars: &ModelVars, h: Var) -> Result<Var, ModelError> {
        let logits = self.scaled_logits(g, vars, h)?;
        Ok(g.softmax(logits)?)
    }

    /// Inference on a `[B, C, H, W]` batch, in fixed-size chunks.
    pub fn predict(&self, x: &Tensor) -> Result<Prediction, ModelError> {
        self.check_input(x.shape())?;
        let mut logits = Vec::new();
        let mut probs = Vec::new();
        for rows in chunks(x.shape()[0]) {
            let mut g = Graph::new();
            let vars = self.bind(&mut g, false)?;
            let xb = g.constant(x.select_rows(&rows)?)?;
            let f = self.extract(&mut g, &vars, xb)?;
            let l = self.scaled_logits(&mut g, &vars, f.embedding)?;
            let p = g.softmax(l)?;
            logits.extend_from_slice(g.value(l).data());
            probs.extend_from_slice(g.value(p).data());
        }
        let shape = vec![x.shape()[0], self.config.num_classes];
        Ok(Prediction {
            scaled_logits: Tensor::new(shape.clone(), logits)?,
            probs: Tensor::new(shape, probs)?,
        })
    }

    /// Embeddings `h` of a `[B, C, H, W]` batch as `[B, E]`.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        self.check_input(x.shape())?;
        let mut out = Vec::new();
        for rows in chunks(x.shape()[0]) {
            let mut g = Graph::new();
            let vars = self.bind(&mut g, false)?;
            let xb = g.constant(x.select_rows(&rows)?)?;
            let f = self.extract(&mut g, &vars, xb)?;
            out.extend_from_slice(g.value(f.embedding).data());
        }
        Ok(Tensor::new(vec![x.shape()[0], self.config.embedding_dim], out)?)
    }
}

fn chunks(n: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n)
        .step_by(INFERENCE_CHUNK)
        .map(move |s| (s..(s + INFERENCE_CHUNK).min(n)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// JSON header stored in front of the parameter blob.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub arch: ArchConfig,
    pub iteration: u64,
    pub seed: u64,
    /// Frozen reliability margin, once computed from the pre-trained model.
    #[serde(default)]
    pub average_margin: Option<f64>,
    pub parameters: Vec<ParameterEntry>,
}

/// Writes `magic ‖ u64 header length ‖ JSON header ‖ f64 parameters`, all little-endian.
pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    iteration: u64,
    seed: u64,
    average_margin: Option<f64>,
) -> Result<(), ModelError> {
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        arch: model.config.clone(),
        iteration,
        seed,
        average_margin,
        parameters: model
            .config
            .parameter_layout()
            .into_iter()
            .map(|(name, shape)| ParameterEntry { name, shape })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| ModelError::Checkpoint {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut bytes = Vec::with_capacity(16 + json.len() + 8 * model.flat_parameters().len());
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for p in &model.params {
        for v in p.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| ModelError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, bytes).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointHeader), ModelError> {
    let fail = |reason: String| ModelError::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    let bytes = fs::read(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(fail("missing checkpoint magic".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = 16usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| fail("header length exceeds file size".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[16..body]).map_err(|e| fail(e.to_string()))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(fail(format!(
            "unsupported version {} (expected {CHECKPOINT_VERSION})",
            header.format_version
        )));
    }
    let total: usize = header.parameters.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    let blob = &bytes[body..];
    if blob.len() != total * 8 {
        return Err(fail(format!(
            "parameter blob holds {} bytes, header declares {}",
            blob.len(),
            total * 8
        )));
    }
    let mut values = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let params = header
        .parameters
        .iter()
        .map(|p| {
            let n = p.shape.iter().product();
            Tensor::new(p.shape.clone(), values.by_ref().take(n).collect())
        })
        .collect::<Result<Vec<_>, _>>()?;
    let model = Model::from_parameters(header.arch.clone(), params)?;
    Ok((model, header))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(seed: u64) -> Model {
        Model::init(ArchConfig::default(), &mut rng::stream(seed, "init")).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        assert_eq!(model(3), model(3));
        assert_ne!(model(3).flat_parameters(), model(4).flat_parameters());
        let m = model(3);
        assert_eq!(m.parameters().last().unwrap().shape(), &[64, 5]);
        assert_eq!(m.parameters()[0].shape(), &[16, 3, 3, 3]);
        assert_eq!(m.parameters()[4].shape(), &[512, 64]);
    }

    #[test]
    fn he_std_formula() {
        assert_eq!(he_std(576), (2.0f64 / 576.0).sqrt());
        assert!((he_std(576) - 0.058_925_565).abs() < 1e-9);
    }

    #[test]
    fn init_weights_follow_he_scale() {
        let m = Model::init(
            ArchConfig {
                block_channels: vec![64, 64],
                ..ArchConfig::default()
            },
            &mut rng::stream(0, "init"),
        )
        .unwrap();
        // block2 conv: fan_in = 64 * 3 * 3 = 576
        let w = &m.parameters()[2];
        let n = w.len() as f64;
        let mean = w.sum() / n;
        let std = (w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std / he_std(576) - 1.0).abs() < 0.03, "{std}");
        assert!(m.parameters()[3].data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn block_shapes_trace_the_architecture() {
        let m = model(0);
        let mut g = Graph::new();
        let vars = m.bind(&mut g, false).unwrap();
        let x = g.constant(Tensor::full(&[2, 3, 16, 16], 0.5)).unwrap();
        let f = m.extract(&mut g, &vars, x).unwrap();
        assert_eq!(g.value(f.block_outputs[0]).shape(), &[2, 16, 8, 8]);
        assert_eq!(g.value(f.block_outputs[1]).shape(), &[2, 32, 4, 4]);
        assert_eq!(g.value(f.embedding).shape(), &[2, 64]);
    }

    #[test]
    fn zero_input_gives_zero_embedding() {
        let m = model(0);
        let h = m.embed(&Tensor::zeros(&[1, 3, 16, 16])).unwrap();
        assert!(h.data().iter().all(|&v| v == 0.0));
        let p = m.predict(&Tensor::zeros(&[1, 3, 16, 16])).unwrap();
        assert!(p.probs.data().iter().all(|&v| (v - 0.2).abs() < 1e-12));
    }

    #[test]
    fn batching_preserves_order() {
        let m = model(1);
        let mut r = rng::stream(9, "x");
        let x = Tensor::new(
            vec![3, 3, 16, 16],
            (0..3 * 768).map(|_| rng::standard_normal(&mut r)).collect(),
        )
        .unwrap();
        let all = m.embed(&x).unwrap();
        for i in 0..3 {
            let one = m.embed(&x.select_rows(&[i]).unwrap()).unwrap();
            assert_eq!(one.data(), all.row(i));
        }
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let m = model(0);
        assert!(matches!(
            m.predict(&Tensor::zeros(&[1, 3, 8, 8])),
            Err(ModelError::InputShape { .. })
        ));
    }

    #[test]
    fn cosine_classifier_hand_example() {
        let config = ArchConfig {
            embedding_dim: 2,
            num_classes: 2,
            ..ArchConfig::default()
        };
        let mut m = Model::init(config, &mut rng::stream(0, "init")).unwrap();
        *m.parameters_mut().last_mut().unwrap() = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut g = Graph::new();
        let vars = m.bind(&mut g, false).unwrap();
        let h = g.constant(Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap()).unwrap();
        let logits = m.scaled_logits(&mut g, &vars, h).unwrap();
        let p = g.softmax(logits).unwrap();
        let l = g.value(logits).data();
        assert!((l[0] - 12.0).abs() < 1e-12 && (l[1] - 16.0).abs() < 1e-12, "{l:?}");
        let p = g.value(p).data();
        assert!((p[0] - 0.017_986).abs() < 1e-5 && (p[1] - 0.982_014).abs() < 1e-5, "{p:?}");

        // h parallel to w_2
        let h2 = g.constant(Tensor::new(vec![1, 2], vec![0.0, 7.5]).unwrap()).unwrap();
        let hn = g.l2_normalize(h2, 1).unwrap();
        let wn = g.l2_normalize(vars.classifier, 0).unwrap();
        let cos = g.matmul(hn, wn).unwrap();
        assert_eq!(g.value(cos).data()[1], 1.0);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = model(5);
        save_checkpoint(&path, &m, 42, 5, Some(2.5)).unwrap();
        let (back, header) = load_checkpoint(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(header.iteration, 42);
        assert_eq!(header.average_margin, Some(2.5));

        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(ModelError::Checkpoint { .. })));
    }
}
