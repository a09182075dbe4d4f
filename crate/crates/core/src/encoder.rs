//! Encoder, projection head and linear probe, plus the checkpoint format.
//!
//! Networks hold plain [`Tensor`] parameters. To train, a network is bound to
//! a fresh [`Graph`] with [`Mlp::bind`], which registers every parameter as a
//! leaf and returns their ids in a fixed order (`w0, b0, w1, b1, ...`); that
//! same order is used by [`Mlp::params_mut`] and by the checkpoint blob.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Graph, NodeId, Tensor};
use crate::seed::{self, Stream};

/// Fully connected layer `y = x W + b` with `W: [in x out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Uniform in `+-sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn glorot(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        Self {
            weight: Tensor::matrix(fan_in, fan_out, data).expect("dims are non-zero"),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }

    /// Affine map on values, no graph.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut out = x.matmul(&self.weight)?;
        let d = out.cols();
        for row in out.data_mut().chunks_exact_mut(d) {
            for (v, b) in row.iter_mut().zip(self.bias.data()) {
                *v += b;
            }
        }
        Ok(out)
    }
}

/// Stack of [`Linear`] layers with ReLU between consecutive layers (none
/// after the last).
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(dims: &[usize], rng: &mut impl Rng) -> Result<Self> {
        check_dims(dims)?;
        Ok(Self {
            layers: dims
                .windows(2)
                .map(|w| Linear::glorot(w[0], w[1], rng))
                .collect(),
        })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        check_dims(dims)?;
        Ok(Self {
            layers: dims.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect(),
        })
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].fan_in()];
        dims.extend(self.layers.iter().map(Linear::fan_out));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").fan_out()
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Registers all parameters as gradient-tracking leaves.
    pub fn bind(&self, g: &mut Graph) -> Vec<NodeId> {
        self.params()
            .into_iter()
            .map(|p| g.param(p.clone()))
            .collect()
    }

    pub fn forward(&self, g: &mut Graph, bound: &[NodeId], x: NodeId) -> Result<NodeId> {
        if bound.len() != 2 * self.layers.len() {
            return Err(Error::Contract(format!(
                "{} bound parameters for {} layers",
                bound.len(),
                self.layers.len()
            )));
        }
        let cols = g.value(x).cols();
        if cols != self.input_dim() {
            return Err(Error::dim(
                "mlp",
                format!("input has {cols} columns, expected {}", self.input_dim()),
            ));
        }
        let mut h = x;
        for (i, pair) in bound.chunks_exact(2).enumerate() {
            h = g.matmul(h, pair[0])?;
            h = g.add_row_bias(h, pair[1])?;
            if i + 1 < self.layers.len() {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Forward pass on values only.
    pub fn forward_values(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.input_dim() {
            return Err(Error::dim(
                "mlp",
                format!(
                    "input has {} columns, expected {}",
                    x.cols(),
                    self.input_dim()
                ),
            ));
        }
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.apply(&h)?;
            if i + 1 < self.layers.len() {
                h.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        h.ensure_finite("mlp")
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.params()
            .iter()
            .flat_map(|p| p.data().iter().copied())
            .collect()
    }

    pub fn from_flat(dims: &[usize], flat: &[f64]) -> Result<Self> {
        let mut mlp = Self::zeros(dims)?;
        if flat.len() != mlp.param_count() {
            return Err(Error::dim(
                "from_flat",
                format!(
                    "dims {dims:?} need {} parameters, got {}",
                    mlp.param_count(),
                    flat.len()
                ),
            ));
        }
        let mut offset = 0;
        for p in mlp.params_mut() {
            let n = p.len();
            p.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(mlp)
    }

    /// Hash of every parameter bit.
    pub fn checksum(&self) -> String {
        let bytes: Vec<u8> = self
            .flatten()
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        seed::short_hash(&bytes)
    }
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(Error::dim("mlp", format!("invalid layer dims {dims:?}")));
    }
    Ok(())
}

/// Encoder `f`: input features to representation `r`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderNet {
    mlp: Mlp,
}

pub const DEFAULT_HIDDEN: usize = 256;
pub const DEFAULT_REPR_DIM: usize = 64;
pub const DEFAULT_PROJ_DIM: usize = 32;

impl EncoderNet {
    /// `dims` = `[input_dim, hidden..., repr_dim]`.
    pub fn new(dims: &[usize], seed: u64) -> Result<Self> {
        let mut rng = seed::rng_for(seed, Stream::Init, 0);
        Ok(Self {
            mlp: Mlp::new(dims, &mut rng)?,
        })
    }

    pub fn from_mlp(mlp: Mlp) -> Self {
        Self { mlp }
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn repr_dim(&self) -> usize {
        self.mlp.output_dim()
    }

    pub fn bind(&self, g: &mut Graph) -> Vec<NodeId> {
        self.mlp.bind(g)
    }

    pub fn encode(&self, g: &mut Graph, bound: &[NodeId], x: NodeId) -> Result<NodeId> {
        self.mlp.forward(g, bound, x)
    }

    /// Representations of a batch with the encoder frozen.
    pub fn encode_values(&self, x: &Tensor) -> Result<Tensor> {
        self.mlp.forward_values(x)
    }

    pub fn checksum(&self) -> String {
        self.mlp.checksum()
    }
}

/// Projection head `G`: one hidden layer, output always unit-normalised.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead {
    mlp: Mlp,
}

impl ProjectionHead {
    pub fn new(repr_dim: usize, hidden: usize, proj_dim: usize, seed: u64) -> Result<Self> {
        let mut rng = seed::rng_for(seed, Stream::Init, 1);
        Ok(Self {
            mlp: Mlp::new(&[repr_dim, hidden, proj_dim], &mut rng)?,
        })
    }

    pub fn from_mlp(mlp: Mlp) -> Result<Self> {
        if mlp.layers().len() != 2 {
            return Err(Error::dim(
                "projection_head",
                format!("needs exactly one hidden layer, got dims {:?}", mlp.dims()),
            ));
        }
        Ok(Self { mlp })
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }

    pub fn proj_dim(&self) -> usize {
        self.mlp.output_dim()
    }

    pub fn bind(&self, g: &mut Graph) -> Vec<NodeId> {
        self.mlp.bind(g)
    }

    pub fn project(&self, g: &mut Graph, bound: &[NodeId], r: NodeId) -> Result<NodeId> {
        let h = self.mlp.forward(g, bound, r)?;
        g.l2_normalize(h)
    }

    pub fn project_values(&self, r: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound: Vec<NodeId> = self
            .mlp
            .params()
            .into_iter()
            .map(|p| g.constant(p.clone()))
            .collect();
        let r = g.constant(r.clone());
        let z = self.project(&mut g, &bound, r)?;
        Ok(g.value(z).clone())
    }
}

/// Affine classifier on frozen representations.
///
/// Inputs are standardised with per-feature `shift`/`scale` fitted on the
/// probe training set, so the whole map stays affine in `r`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub linear: Linear,
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl LinearProbe {
    pub fn zeros(repr_dim: usize, num_outputs: usize) -> Self {
        Self {
            linear: Linear::zeros(repr_dim, num_outputs),
            shift: vec![0.0; repr_dim],
            scale: vec![1.0; repr_dim],
        }
    }

    pub fn repr_dim(&self) -> usize {
        self.linear.fan_in()
    }

    pub fn num_outputs(&self) -> usize {
        self.linear.fan_out()
    }

    /// Sets `shift`/`scale` to the column means and standard deviations of `r`.
    pub fn fit_standardization(&mut self, r: &Tensor) {
        let (n, d) = (r.rows() as f64, r.cols());
        for j in 0..d {
            let col = (0..r.rows()).map(|i| r.row(i)[j]);
            let mean = col.clone().sum::<f64>() / n;
            let var = col.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            self.shift[j] = mean;
            self.scale[j] = if var.sqrt() > 1e-12 {
                1.0 / var.sqrt()
            } else {
                1.0
            };
        }
    }

    pub fn standardize(&self, r: &Tensor) -> Result<Tensor> {
        if r.cols() != self.repr_dim() {
            return Err(Error::dim(
                "probe_logits",
                format!(
                    "representation has {} columns, probe expects {}",
                    r.cols(),
                    self.repr_dim()
                ),
            ));
        }
        let d = r.cols();
        let mut out = r.clone();
        for row in out.data_mut().chunks_exact_mut(d) {
            for ((v, s), k) in row.iter_mut().zip(&self.shift).zip(&self.scale) {
                *v = (*v - s) * k;
            }
        }
        Ok(out)
    }

    pub fn logits(&self, r: &Tensor) -> Result<Tensor> {
        self.linear.apply(&self.standardize(r)?)
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.shift.clone();
        out.extend(&self.scale);
        out.extend(self.linear.weight.data());
        out.extend(self.linear.bias.data());
        out
    }

    pub fn from_flat(repr_dim: usize, num_outputs: usize, flat: &[f64]) -> Result<Self> {
        let need = 2 * repr_dim + repr_dim * num_outputs + num_outputs;
        if flat.len() != need {
            return Err(Error::dim(
                "probe_from_flat",
                format!("need {need} values, got {}", flat.len()),
            ));
        }
        let (shift, rest) = flat.split_at(repr_dim);
        let (scale, rest) = rest.split_at(repr_dim);
        let (w, b) = rest.split_at(repr_dim * num_outputs);
        Ok(Self {
            linear: Linear {
                weight: Tensor::matrix(repr_dim, num_outputs, w.to_vec())?,
                bias: Tensor::vector(b.to_vec())?,
            },
            shift: shift.to_vec(),
            scale: scale.to_vec(),
        })
    }
}

/// Logits of a probe on frozen representations.
pub fn probe_logits(probe: &LinearProbe, r: &Tensor) -> Result<Tensor> {
    probe.logits(r)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Probe,
}

pub const CHECKPOINT_FORMAT: &str = "surrocon-checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub stage: Stage,
    pub seed: u64,
    pub config_hash: String,
    pub encoder_dims: Vec<usize>,
    pub head_dims: Vec<usize>,
    /// `[repr_dim, num_outputs]` for probe checkpoints, empty otherwise.
    pub probe_dims: Vec<usize>,
    /// Biomarker slots a probe predicts, in output order.
    pub slots: Vec<usize>,
    pub param_count: usize,
}

/// One JSON header line, `\n`, then `param_count` little-endian `f64`s.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn pretrain(
        encoder: &EncoderNet,
        head: &ProjectionHead,
        seed: u64,
        config_hash: &str,
    ) -> Self {
        let mut params = encoder.mlp().flatten();
        params.extend(head.mlp().flatten());
        Self {
            header: CheckpointHeader {
                format: CHECKPOINT_FORMAT.into(),
                version: 1,
                stage: Stage::Pretrain,
                seed,
                config_hash: config_hash.into(),
                encoder_dims: encoder.mlp().dims(),
                head_dims: head.mlp().dims(),
                probe_dims: vec![],
                slots: vec![],
                param_count: params.len(),
            },
            params,
        }
    }

    pub fn probe(probe: &LinearProbe, slots: &[usize], seed: u64, config_hash: &str) -> Self {
        let params = probe.flatten();
        Self {
            header: CheckpointHeader {
                format: CHECKPOINT_FORMAT.into(),
                version: 1,
                stage: Stage::Probe,
                seed,
                config_hash: config_hash.into(),
                encoder_dims: vec![],
                head_dims: vec![],
                probe_dims: vec![probe.repr_dim(), probe.num_outputs()],
                slots: slots.to_vec(),
                param_count: params.len(),
            },
            params,
        }
    }

    pub fn networks(&self) -> Result<(EncoderNet, ProjectionHead)> {
        if self.header.stage != Stage::Pretrain {
            return Err(Error::Contract("not a pretraining checkpoint".into()));
        }
        let enc_count = Mlp::zeros(&self.header.encoder_dims)?.param_count();
        if enc_count > self.params.len() {
            return Err(Error::dim("checkpoint", "blob shorter than encoder"));
        }
        let (enc, head) = self.params.split_at(enc_count);
        Ok((
            EncoderNet::from_mlp(Mlp::from_flat(&self.header.encoder_dims, enc)?),
            ProjectionHead::from_mlp(Mlp::from_flat(&self.header.head_dims, head)?)?,
        ))
    }

    pub fn linear_probe(&self) -> Result<LinearProbe> {
        match (self.header.stage, self.header.probe_dims.as_slice()) {
            (Stage::Probe, &[d, k]) => LinearProbe::from_flat(d, k, &self.params),
            _ => Err(Error::Contract("not a probe checkpoint".into())),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec(&self.header)?;
        out.push(b'\n');
        for v in &self.params {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Parse {
                line: 1,
                detail: "missing checkpoint header".into(),
            })?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[..newline])?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::Parse {
                line: 1,
                detail: format!("unexpected format `{}`", header.format),
            });
        }
        let blob = &bytes[newline + 1..];
        if blob.len() != header.param_count * 8 {
            return Err(Error::dim(
                "checkpoint",
                format!(
                    "header declares {} parameters, blob holds {} bytes",
                    header.param_count,
                    blob.len()
                ),
            ));
        }
        let params = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Self { header, params })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&self.to_bytes()?)
            .map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
