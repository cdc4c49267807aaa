use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::continuous_graph::FEATURE_DIM;
use crate::error::{Error, Result};

/// Number of edge types after rewiring.
pub const EDGE_TYPES: usize = 4;

pub const CHECKPOINT_VERSION: &str = "1";

/// Shape of the graph network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub leaky_slope: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            hidden_dim: 32,
            n_layers: 4,
            n_heads: 4,
            leaky_slope: 0.2,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return Err(Error::InvalidArgument(format!(
                "hidden_dim, n_layers and n_heads must be positive, got {self:?}"
            )));
        }
        if !self.leaky_slope.is_finite() {
            return Err(Error::InvalidArgument("leaky_slope must be finite".into()));
        }
        Ok(())
    }

    /// Width of the per-node actor input, `2 (L + 1) H`.
    pub fn actor_input_dim(&self) -> usize {
        2 * (self.n_layers + 1) * self.hidden_dim
    }
}

/// Positions of one layer's arrays inside a [`ParameterSet`].
#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerSlots {
    /// `3H x KH`: row blocks act on source state, edge state, destination state.
    pub attn: usize,
    pub attn_bias: usize,
    /// `1 x KH`: one scoring vector per head.
    pub attn_score: usize,
    /// `H x KH`: per-head value transform.
    pub value: usize,
    pub node_ffn: [usize; 4],
    pub edge_ffn: [usize; 4],
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub embed: [usize; 4],
    pub edge_type: usize,
    pub layers: Vec<LayerSlots>,
    pub actor_w: usize,
    pub actor_b: usize,
    pub critic_w: usize,
    pub critic_b: usize,
}

/// Named arrays with their Glorot fan (`fan_in + fan_out`, `None` for biases).
fn plan(config: &NetworkConfig) -> (Layout, Vec<(String, usize, usize, Option<usize>)>) {
    let h = config.hidden_dim;
    let k = config.n_heads;
    let depth = (config.n_layers + 1) * h;
    let mut arrays = Vec::new();
    let mut add = |name: String, rows: usize, cols: usize, fan: Option<usize>| {
        arrays.push((name, rows, cols, fan));
        arrays.len() - 1
    };
    let ffn = |add: &mut dyn FnMut(String, usize, usize, Option<usize>) -> usize, prefix: &str, input: usize| {
        [
            add(format!("{prefix}.w1"), input, h, Some(input + h)),
            add(format!("{prefix}.b1"), 1, h, None),
            add(format!("{prefix}.w2"), h, h, Some(2 * h)),
            add(format!("{prefix}.b2"), 1, h, None),
        ]
    };
    let embed = ffn(&mut add, "embed", FEATURE_DIM);
    let edge_type = add("edge_type".into(), EDGE_TYPES, h, Some(EDGE_TYPES + h));
    let mut layers = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let p = format!("layer{l}");
        let attn = add(format!("{p}.attn"), 3 * h, k * h, Some(4 * h));
        let attn_bias = add(format!("{p}.attn_bias"), 1, k * h, None);
        let attn_score = add(format!("{p}.attn_score"), 1, k * h, Some(h + 1));
        let value = add(format!("{p}.value"), h, k * h, Some(2 * h));
        let node_ffn = ffn(&mut add, &format!("{p}.node_ffn"), k * h);
        let edge_ffn = ffn(&mut add, &format!("{p}.edge_ffn"), k * h);
        layers.push(LayerSlots {
            attn,
            attn_bias,
            attn_score,
            value,
            node_ffn,
            edge_ffn,
        });
    }
    let actor_w = add("actor.w".into(), 2 * depth, 1, Some(2 * depth + 1));
    let actor_b = add("actor.b".into(), 1, 1, None);
    let critic_w = add("critic.w".into(), depth, 1, Some(depth + 1));
    let critic_b = add("critic.b".into(), 1, 1, None);
    let layout = Layout {
        embed,
        edge_type,
        layers,
        actor_w,
        actor_b,
        critic_w,
        critic_b,
    };
    (layout, arrays)
}

/// All learnable arrays of the network.
///
/// Values are kept representable in 32-bit floats so that checkpoints,
/// which store `f32`, reload to exactly the same network.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    config: NetworkConfig,
    names: Vec<String>,
    tensors: Vec<Matrix>,
}

impl ParameterSet {
    /// All arrays zero.
    pub fn zeros(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let (_, arrays) = plan(&config);
        Ok(ParameterSet {
            config,
            names: arrays.iter().map(|s| s.0.clone()).collect(),
            tensors: arrays.iter().map(|s| Matrix::zeros(s.1, s.2)).collect(),
        })
    }

    /// Glorot-uniform matrices and zero biases from a seeded generator.
    pub fn init(config: NetworkConfig, seed: u64) -> Result<Self> {
        let mut set = Self::zeros(config)?;
        let (_, arrays) = plan(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (t, entry) in set.tensors.iter_mut().zip(&arrays) {
            if let Some(fan) = entry.3 {
                let bound = (6.0 / fan as f64).sqrt();
                for x in &mut t.data {
                    *x = rng.gen_range(-bound..bound) as f32 as f64;
                }
            }
        }
        Ok(set)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub(crate) fn layout(&self) -> Layout {
        plan(&self.config).0
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Matrix] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Matrix] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    /// Zero arrays shaped like the parameters, for gradient accumulation.
    pub fn zeros_like(&self) -> Vec<Matrix> {
        self.tensors.iter().map(|t| Matrix::zeros(t.rows, t.cols)).collect()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    /// Rounds every value to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut manifest = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for (name, t) in self.names.iter().zip(&self.tensors) {
            manifest.push(ManifestEntry {
                name: name.clone(),
                shape: [t.rows, t.cols],
                offset,
            });
            offset += t.data.len();
        }
        let header = Header {
            version: CHECKPOINT_VERSION.into(),
            config: self.config,
            manifest,
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(8 + header.len() + 4 * offset);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for &x in &t.data {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        let len_bytes: [u8; 8] = bytes
            .get(..8)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| bad("file too short for header length"))?;
        let header_len = usize::try_from(u64::from_le_bytes(len_bytes)).map_err(|_| bad("header too large"))?;
        let header_bytes = bytes
            .get(8..8usize.saturating_add(header_len))
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(header_bytes)
            .map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version `{}`", header.version)));
        }
        let mut set = Self::zeros(header.config)?;
        if header.manifest.len() != set.tensors.len() {
            return Err(bad("manifest does not match the network configuration"));
        }
        let payload = &bytes[8 + header_len..];
        let mut expected_offset = 0;
        for ((entry, name), t) in header.manifest.iter().zip(&set.names).zip(&mut set.tensors) {
            if &entry.name != name || entry.shape != [t.rows, t.cols] || entry.offset != expected_offset {
                return Err(Error::Checkpoint(format!("manifest entry `{}` does not match", entry.name)));
            }
            let start = entry.offset * 4;
            let chunk = payload
                .get(start..start + 4 * t.data.len())
                .ok_or_else(|| bad("truncated payload"))?;
            for (x, b) in t.data.iter_mut().zip(chunk.chunks_exact(4)) {
                *x = f32::from_le_bytes(b.try_into().expect("4-byte chunk")) as f64;
            }
            expected_offset += t.data.len();
        }
        if payload.len() != expected_offset * 4 {
            return Err(bad("payload length does not match the manifest"));
        }
        if set.tensors.iter().any(|t| !t.is_finite()) {
            return Err(bad("non-finite parameter value"));
        }
        Ok(set)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: String,
    config: NetworkConfig,
    manifest: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: [usize; 2],
    offset: usize,
}
