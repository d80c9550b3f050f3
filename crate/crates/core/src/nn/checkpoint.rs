//! JSON checkpoints for networks and their optimizer moments.
//!
//! Document layout:
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "networks": {
//!     "<name>": {
//!       "layer_specs": [{"input_dim": 14, "output_dim": 800, "activation": "elu"}, ...],
//!       "weights": [[row-major output_dim x input_dim], ...],
//!       "biases": [[output_dim], ...]
//!     }
//!   },
//!   "optimizers": { "<name>": { "config": {...}, "step_count": 0, "first_moment": [...], "second_moment": [...] } },
//!   "metadata": { "<key>": "<value>" }
//! }
//! ```
//!
//! A critic is stored as three networks named `<name>.state`, `<name>.action`
//! and `<name>.head`. Floats are written in shortest round-trip form, so
//! `load(save(net))` is bit-exact.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamConfig, AdamState, CriticNet, Dense, Mlp};
use crate::error::{Error, Result};
use crate::nn::LayerSpec;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkRecord {
    pub layer_specs: Vec<LayerSpec>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl From<&Mlp> for NetworkRecord {
    fn from(net: &Mlp) -> Self {
        Self {
            layer_specs: net.specs(),
            weights: net.layers().iter().map(|l| l.weights().to_vec()).collect(),
            biases: net.layers().iter().map(|l| l.biases().to_vec()).collect(),
        }
    }
}

impl NetworkRecord {
    pub fn to_mlp(&self) -> Result<Mlp> {
        if self.weights.len() != self.layer_specs.len() || self.biases.len() != self.layer_specs.len() {
            return Err(Error::Shape("record arrays do not match layer count".into()));
        }
        let layers = self
            .layer_specs
            .iter()
            .zip(&self.weights)
            .zip(&self.biases)
            .map(|((&s, w), b)| Dense::from_parts(s, w.clone(), b.clone()))
            .collect::<Result<Vec<_>>>()?;
        Mlp::from_layers(layers)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamRecord {
    pub config: AdamConfig,
    pub step_count: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl From<&AdamState> for AdamRecord {
    fn from(opt: &AdamState) -> Self {
        Self {
            config: opt.config,
            step_count: opt.step_count(),
            first_moment: opt.first_moment().to_vec(),
            second_moment: opt.second_moment().to_vec(),
        }
    }
}

impl AdamRecord {
    pub fn to_state(&self) -> Result<AdamState> {
        AdamState::from_parts(
            self.config,
            self.step_count,
            self.first_moment.clone(),
            self.second_moment.clone(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub networks: BTreeMap<String, NetworkRecord>,
    #[serde(default)]
    pub optimizers: BTreeMap<String, AdamRecord>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl Default for Checkpoint {
    fn default() -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            networks: BTreeMap::new(),
            optimizers: BTreeMap::new(),
            metadata: BTreeMap::new(),
        }
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_mlp(&mut self, name: &str, net: &Mlp) {
        self.networks.insert(name.to_string(), NetworkRecord::from(net));
    }

    pub fn mlp(&self, name: &str) -> Result<Mlp> {
        self.networks
            .get(name)
            .ok_or_else(|| Error::Config(format!("checkpoint has no network '{name}'")))?
            .to_mlp()
    }

    pub fn insert_critic(&mut self, name: &str, q: &CriticNet) {
        self.insert_mlp(&format!("{name}.state"), q.state_branch());
        self.insert_mlp(&format!("{name}.action"), q.action_branch());
        self.insert_mlp(&format!("{name}.head"), q.head());
    }

    pub fn critic(&self, name: &str) -> Result<CriticNet> {
        CriticNet::from_parts(
            self.mlp(&format!("{name}.state"))?,
            self.mlp(&format!("{name}.action"))?,
            self.mlp(&format!("{name}.head"))?,
        )
    }

    pub fn insert_optimizer(&mut self, name: &str, opt: &AdamState) {
        self.optimizers.insert(name.to_string(), AdamRecord::from(opt));
    }

    pub fn optimizer(&self, name: &str) -> Result<AdamState> {
        self.optimizers
            .get(name)
            .ok_or_else(|| Error::Config(format!("checkpoint has no optimizer '{name}'")))?
            .to_state()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint format_version {}",
                ck.format_version
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, CriticLayout, Parameters};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mlp_and_critic_round_trip_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = Mlp::new(
            &[
                LayerSpec::new(4, 7, Activation::Elu),
                LayerSpec::new(7, 1, Activation::Sigmoid),
            ],
            &mut rng,
        )
        .unwrap();
        let layout = CriticLayout {
            state_widths: vec![5, 3],
            action_widths: vec![3],
            head_widths: vec![2],
        };
        let q = CriticNet::new(4, 1, &layout, &mut rng).unwrap();
        let mut opt = AdamState::new(&net, AdamConfig::default());
        let mut g = crate::nn::Gradients::zeros_like(&net);
        g.slices_mut()[0][3] = 0.123456789;
        let mut stepped = net.clone();
        opt.step(&mut stepped, &g).unwrap();

        let mut ck = Checkpoint::new();
        ck.insert_mlp("actor", &stepped);
        ck.insert_critic("q_d", &q);
        ck.insert_optimizer("actor", &opt);
        let text = ck.to_json().unwrap();
        let back = Checkpoint::from_json(&text).unwrap();

        let net2 = back.mlp("actor").unwrap();
        let bits = |net: &Mlp| -> Vec<u64> {
            net.param_slices().concat().iter().map(|v| v.to_bits()).collect()
        };
        assert_eq!(bits(&stepped), bits(&net2));
        assert_eq!(back.critic("q_d").unwrap(), q);
        assert_eq!(back.optimizer("actor").unwrap(), opt);
        assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn wrong_version_rejected() {
        let mut ck = Checkpoint::new();
        ck.format_version = 99;
        let text = serde_json::to_string(&ck).unwrap();
        assert!(matches!(Checkpoint::from_json(&text), Err(Error::Config(_))));
    }

    #[test]
    fn missing_network_is_reported() {
        assert!(Checkpoint::new().mlp("base").is_err());
    }
}
