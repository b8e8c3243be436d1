//! Named parameter storage with deterministic seeded initialization.

use std::collections::HashMap;
use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// All model parameters in declaration order. Order is the contract for
/// checkpoint layout and optimizer state, so it never depends on hashing.
#[derive(Clone, Debug)]
pub struct ParamRegistry {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

/// Standard normal draw via Box-Muller; uses `1 - u` to keep the log
/// argument strictly positive.
fn randn(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (TAU * u2).cos()
}

struct Builder {
    reg: ParamRegistry,
    rng: ChaCha8Rng,
}

impl Builder {
    fn normal(&mut self, name: String, shape: Vec<usize>, std: f64) -> Result<()> {
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| randn(&mut self.rng) * std).collect();
        self.reg.insert(Param { name, shape, data })
    }

    fn linear(&mut self, name: String, rows: usize, cols: usize) -> Result<()> {
        self.normal(name, vec![rows, cols], 1.0 / (rows as f64).sqrt())
    }

    fn ones(&mut self, name: String, len: usize) -> Result<()> {
        self.reg.insert(Param {
            name,
            shape: vec![len],
            data: vec![1.0; len],
        })
    }

    /// The three weights of one gated MLP under a common prefix.
    fn mlp(&mut self, prefix: &str, d: usize, ff: usize) -> Result<()> {
        self.linear(format!("{prefix}.gate.weight"), d, ff)?;
        self.linear(format!("{prefix}.up.weight"), d, ff)?;
        self.linear(format!("{prefix}.down.weight"), ff, d)
    }
}

/// Expert weight name prefix, respecting cross-layer tying: tied experts
/// drop the layer qualifier because one set serves every MoE layer.
pub fn expert_prefix(config: &ModelConfig, layer: usize, shared: bool, idx: usize) -> String {
    let kind = if shared { "shared" } else { "expert" };
    if config.tie_experts_across_layers {
        format!("moe.{kind}.{idx}")
    } else {
        format!("layers.{layer}.moe.{kind}.{idx}")
    }
}

impl ParamRegistry {
    /// Builds and initializes all parameters: embeddings and routers from
    /// N(0, 0.02), linear maps from N(0, 1/sqrt(fan_in)), norm weights at 1.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            reg: ParamRegistry {
                params: Vec::new(),
                index: HashMap::new(),
            },
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let d = config.d_model;
        let hd = config.head_dim();

        b.normal("embed.weight".into(), vec![config.vocab_size, d], 0.02)?;

        for layer in 0..config.n_layers {
            b.ones(format!("layers.{layer}.attn_norm.weight"), d)?;
            b.linear(format!("layers.{layer}.attn.wq.weight"), d, config.n_heads * hd)?;
            b.linear(format!("layers.{layer}.attn.wk.weight"), d, config.n_kv_heads * hd)?;
            b.linear(format!("layers.{layer}.attn.wv.weight"), d, config.n_kv_heads * hd)?;
            b.linear(format!("layers.{layer}.attn.wo.weight"), config.n_heads * hd, d)?;
            b.ones(format!("layers.{layer}.ffn_norm.weight"), d)?;

            if layer == 0 {
                let ff = config.d_ff_first;
                b.linear("layers.0.mlp.gate.weight".into(), d, ff)?;
                b.linear("layers.0.mlp.up.weight".into(), d, ff)?;
                b.linear("layers.0.mlp.down.weight".into(), ff, d)?;
            } else {
                b.normal(
                    format!("layers.{layer}.moe.router.weight"),
                    vec![d, config.n_routed_experts],
                    0.02,
                )?;
                if !config.tie_experts_across_layers || layer == 1 {
                    let ff = config.d_ff_expert;
                    for s in 0..config.n_shared_experts {
                        let p = expert_prefix(config, layer, true, s);
                        b.mlp(&p, d, ff)?;
                    }
                    for j in 0..config.n_routed_experts {
                        let p = expert_prefix(config, layer, false, j);
                        b.mlp(&p, d, ff)?;
                    }
                }
            }
        }

        b.ones("final_norm.weight".into(), d)?;
        b.linear("lm_head.weight".into(), d, config.vocab_size)?;
        Ok(b.reg)
    }

    #[cfg(test)]
    pub(crate) fn from_params(params: Vec<Param>) -> Result<Self> {
        let mut reg = ParamRegistry {
            params: Vec::new(),
            index: HashMap::new(),
        };
        for p in params {
            reg.insert(p)?;
        }
        Ok(reg)
    }

    fn insert(&mut self, param: Param) -> Result<()> {
        if self.index.contains_key(&param.name) {
            return Err(Error::contract(format!("duplicate parameter {:?}", param.name)));
        }
        self.index.insert(param.name.clone(), self.params.len());
        self.params.push(param);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn param(&self, idx: usize) -> &Param {
        &self.params[idx]
    }

    pub fn param_mut(&mut self, idx: usize) -> &mut Param {
        &mut self.params[idx]
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("unknown parameter {name:?}")))
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        Ok(self.param(self.id(name)?))
    }

    /// Total stored f64 values across all parameters.
    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }
}
