//! Fully connected generator mapping Gaussian noise to one-hot rows.
//!
//! Each feature block of the output is produced by a straight-through
//! Gumbel-softmax head: the forward value is the exact one-hot argmax of the
//! perturbed logits, while gradients follow the tempered softmax.

use std::path::Path;
use std::sync::Arc;

use ndarray::{s, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::grad::{GradError, Tape, Tensor, Var};
use crate::schema::{EncodedTable, Schema};

const MAGIC: &[u8; 8] = b"TSYNGEN\0";
const VERSION: u32 = 1;
const SAMPLE_CHUNK: usize = 4096;

#[derive(Debug, Error)]
pub enum GeneratorError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint schema hash {found} does not match schema {expected}")]
    SchemaHashMismatch { expected: String, found: String },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Grad(#[from] GradError),
}

pub type Result<T, E = GeneratorError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub noise_dim: usize,
    pub hidden: Vec<usize>,
    pub temperature: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            noise_dim: 100,
            hidden: vec![100, 200, 200, 200],
            temperature: 1.0,
        }
    }
}

impl GeneratorConfig {
    fn validate(&self) -> Result<()> {
        if self.noise_dim == 0 {
            return Err(GeneratorError::InvalidConfig("noise_dim must be positive".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(GeneratorError::InvalidConfig("hidden widths must be positive".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(GeneratorError::InvalidConfig("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Generator parameters bound to a schema.
///
/// Parameters are stored as `[W0, b0, W1, b1, ..., W_out, b_out]` with
/// weights shaped `in x out` and biases `1 x out`.
#[derive(Debug, Clone)]
pub struct Generator {
    schema: Arc<Schema>,
    config: GeneratorConfig,
    params: Vec<Tensor>,
}

/// Tape handles for one generator's parameters, in storage order.
#[derive(Debug, Clone)]
pub struct GeneratorVars(pub Vec<Var>);

impl Generator {
    /// Fan-in scaled uniform initialisation, `U(-1/sqrt(in), 1/sqrt(in))`.
    pub fn new(schema: Arc<Schema>, config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for (fan_in, fan_out) in layer_dims(&config, schema.q()) {
            let bound = 1.0 / (fan_in as f64).sqrt();
            params.push(Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..bound)));
            params.push(Array2::from_shape_fn((1, fan_out), |_| rng.random_range(-bound..bound)));
        }
        Ok(Self { schema, config, params })
    }

    pub fn schema(&self) -> &Arc<Schema> {
        &self.schema
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    fn n_layers(&self) -> usize {
        self.params.len() / 2
    }

    /// Identity skips on hidden-to-hidden layers of matching width.
    fn is_residual(&self, layer: usize) -> bool {
        let w = &self.params[2 * layer];
        layer > 0 && layer + 1 < self.n_layers() && w.nrows() == w.ncols()
    }

    /// Puts every parameter on the tape as a tracked variable.
    pub fn register(&self, tape: &mut Tape) -> GeneratorVars {
        GeneratorVars(self.params.iter().map(|p| tape.variable(p.clone())).collect())
    }

    pub fn draw_noise<R: Rng>(&self, n: usize, rng: &mut R) -> Tensor {
        Array2::from_shape_fn((n, self.config.noise_dim), |_| rng.sample(StandardNormal))
    }

    /// `-log(-log u)` with `u ~ U(0, 1)`.
    pub fn draw_gumbel<R: Rng>(&self, n: usize, rng: &mut R) -> Tensor {
        Array2::from_shape_fn((n, self.schema.q()), |_| {
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            -(-u.ln()).ln()
        })
    }

    /// Differentiable forward pass for given noise and Gumbel perturbations.
    pub fn forward(&self, tape: &mut Tape, vars: &GeneratorVars, z: &Tensor, gumbel: &Tensor) -> Result<Var> {
        let mut h = tape.constant(z.clone());
        let last = self.n_layers() - 1;
        for layer in 0..last {
            let (w, b) = (vars.0[2 * layer], vars.0[2 * layer + 1]);
            let lin = tape.matmul(h, w)?;
            let lin = tape.add(lin, b)?;
            let act = tape.relu(lin);
            h = if self.is_residual(layer) { tape.add(h, act)? } else { act };
        }
        let lin = tape.matmul(h, vars.0[2 * last])?;
        let logits = tape.add(lin, vars.0[2 * last + 1])?;
        let g = tape.constant(gumbel.clone());
        let perturbed = tape.add(logits, g)?;
        let tempered = tape.scale(perturbed, 1.0 / self.config.temperature);
        let soft = tape.softmax_blocks(tempered, self.schema.block_offsets())?;
        let hard = self.hard_one_hot(tape.value(tempered));
        Ok(tape.straight_through(soft, hard)?)
    }

    /// Draws fresh noise and Gumbel perturbations, then runs [`Self::forward`].
    pub fn forward_batch<R: Rng>(&self, tape: &mut Tape, vars: &GeneratorVars, n: usize, rng: &mut R) -> Result<Var> {
        let z = self.draw_noise(n, rng);
        let g = self.draw_gumbel(n, rng);
        self.forward(tape, vars, &z, &g)
    }

    /// Output logits without tape bookkeeping.
    pub fn logits(&self, z: &Tensor) -> Tensor {
        let mut h = z.clone();
        let last = self.n_layers() - 1;
        for layer in 0..last {
            let mut lin = h.dot(&self.params[2 * layer]);
            lin += &self.params[2 * layer + 1];
            lin.mapv_inplace(|x| x.max(0.0));
            h = if self.is_residual(layer) { h + lin } else { lin };
        }
        let mut out = h.dot(&self.params[2 * last]);
        out += &self.params[2 * last + 1];
        out
    }

    fn hard_one_hot(&self, scores: &Tensor) -> Tensor {
        let offsets = self.schema.block_offsets();
        let mut out = Array2::zeros(scores.dim());
        for (mut o, row) in out.outer_iter_mut().zip(scores.outer_iter()) {
            for w in offsets.windows(2) {
                let block = row.slice(s![w[0]..w[1]]);
                let mut best = 0;
                for (j, v) in block.iter().enumerate() {
                    if *v > block[best] {
                        best = j;
                    }
                }
                o[w[0] + best] = 1.0;
            }
        }
        out
    }

    /// Samples `n` rows with a generator seeded from `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> EncodedTable {
        self.sample_with_rng(n, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn sample_with_rng<R: Rng>(&self, n: usize, rng: &mut R) -> EncodedTable {
        let mut chunks = Vec::new();
        let mut left = n;
        while left > 0 {
            let m = left.min(SAMPLE_CHUNK);
            let z = self.draw_noise(m, rng);
            let g = self.draw_gumbel(m, rng);
            let scores = self.logits(&z) + &g;
            chunks.push(self.hard_one_hot(&scores));
            left -= m;
        }
        let data = if chunks.is_empty() {
            Array2::zeros((0, self.schema.q()))
        } else {
            let views: Vec<_> = chunks.iter().map(|c| c.view()).collect();
            ndarray::concatenate(Axis(0), &views).expect("chunks share width")
        };
        EncodedTable::from_one_hot_unchecked(data, self.schema.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.schema.hash());
        out.extend_from_slice(&(self.config.noise_dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.config.hidden.len() as u32).to_le_bytes());
        for h in &self.config.hidden {
            out.extend_from_slice(&(*h as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.config.temperature.to_le_bytes());
        out.extend_from_slice(&(self.schema.q() as u32).to_le_bytes());
        out.extend_from_slice(&(self.n_params() as u64).to_le_bytes());
        for p in &self.params {
            for v in p.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8], schema: Arc<Schema>) -> Result<Self> {
        let corrupt = |m: &str| GeneratorError::CorruptCheckpoint(m.to_string());
        if bytes.len() < MAGIC.len() + 4 + 32 + 32 {
            return Err(corrupt("truncated header"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(8).ok_or_else(|| corrupt("truncated"))? != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = r.u32().ok_or_else(|| corrupt("truncated"))?;
        if version != VERSION {
            return Err(corrupt(&format!("unsupported version {version}")));
        }
        let hash = r.take(32).ok_or_else(|| corrupt("truncated"))?;
        if hash != schema.hash() {
            return Err(GeneratorError::SchemaHashMismatch {
                expected: schema.hash_hex(),
                found: hex::encode(hash),
            });
        }
        let noise_dim = r.u32().ok_or_else(|| corrupt("truncated"))? as usize;
        let n_hidden = r.u32().ok_or_else(|| corrupt("truncated"))? as usize;
        if n_hidden > 1024 {
            return Err(corrupt("implausible layer count"));
        }
        let hidden = (0..n_hidden)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| corrupt("truncated"))?;
        let temperature = f64::from_le_bytes(r.take(8).ok_or_else(|| corrupt("truncated"))?.try_into().unwrap());
        let q = r.u32().ok_or_else(|| corrupt("truncated"))? as usize;
        if q != schema.q() {
            return Err(corrupt("output width differs from schema"));
        }
        let config = GeneratorConfig {
            noise_dim,
            hidden,
            temperature,
        };
        config.validate().map_err(|e| corrupt(&e.to_string()))?;
        let count = r.u64().ok_or_else(|| corrupt("truncated"))? as usize;
        let dims = layer_dims(&config, q);
        let expected: usize = dims.iter().map(|(i, o)| i * o + o).sum();
        if count != expected || r.remaining() != 8 * expected {
            return Err(corrupt("parameter blob size mismatch"));
        }
        let mut params = Vec::with_capacity(2 * dims.len());
        for (fan_in, fan_out) in dims {
            for shape in [(fan_in, fan_out), (1, fan_out)] {
                let n = shape.0 * shape.1;
                let vals: Vec<f64> = r
                    .take(8 * n)
                    .expect("size checked")
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                params.push(Array2::from_shape_vec(shape, vals).expect("size checked"));
            }
        }
        Ok(Self { schema, config, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, schema: Arc<Schema>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes, schema)
    }
}

fn layer_dims(config: &GeneratorConfig, q: usize) -> Vec<(usize, usize)> {
    let mut widths = vec![config.noise_dim];
    widths.extend(&config.hidden);
    widths.push(q);
    widths.windows(2).map(|w| (w[0], w[1])).collect()
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let out = self.buf.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}
