//! Trained-policy artifacts and the `Policy` trait used by evaluation.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dialogue::{fnv1a, ActionMask, DialogueState, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::{masked_argmax, Mlp};
use crate::world::World;

/// Derive an independent sub-seed from a root seed and a label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut z = seed ^ fnv1a(label.as_bytes());
    // splitmix64 finaliser
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of any serialisable configuration.
pub fn config_digest<T: Serialize>(config: &T) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(config)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algo {
    Dqn,
    Ppo,
    Sft,
    RewardModel,
    Rlhf,
}

impl Algo {
    pub fn as_str(self) -> &'static str {
        match self {
            Algo::Dqn => "dqn",
            Algo::Ppo => "ppo",
            Algo::Sft => "sft",
            Algo::RewardModel => "reward-model",
            Algo::Rlhf => "rlhf",
        }
    }
}

/// Network key holding action values (DQN).
pub const Q_NET: &str = "q";
/// Network key holding policy logits (PPO, SFT, RLHF).
pub const POLICY_NET: &str = "policy";
pub const VALUE_NET: &str = "value";
/// Network key holding a reward model over `encoding ++ one-hot(action)`.
pub const REWARD_NET: &str = "reward";

/// Serialized trained networks plus what is needed to use them safely:
/// the encoder config and fingerprint, and the catalog order they index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyArtifact {
    pub algo: Algo,
    pub encoder: EncoderConfig,
    pub encoder_fingerprint: String,
    pub catalog_ids: Vec<String>,
    pub networks: BTreeMap<String, Mlp>,
    pub config_digest: String,
    pub seed: u64,
}

impl PolicyArtifact {
    pub fn new(algo: Algo, world: &World, networks: BTreeMap<String, Mlp>, config_digest: String, seed: u64) -> Self {
        Self {
            algo,
            encoder: *world.encoder(),
            encoder_fingerprint: world.encoder().fingerprint(),
            catalog_ids: world.catalog().ids(),
            networks,
            config_digest,
            seed,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let artifact: Self = serde_json::from_str(json)?;
        artifact.validate()?;
        Ok(artifact)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// SHA-256 of the serialized artifact.
    pub fn digest(&self) -> Result<String> {
        Ok(sha256_hex(self.to_json()?.as_bytes()))
    }

    fn validate(&self) -> Result<()> {
        if self.encoder.fingerprint() != self.encoder_fingerprint {
            return Err(Error::FingerprintMismatch {
                artifact: self.encoder_fingerprint.clone(),
                runtime: self.encoder.fingerprint(),
            });
        }
        let key = self.scoring_key();
        let net = self
            .networks
            .get(key)
            .ok_or_else(|| Error::Data(format!("artifact is missing network `{key}`")))?;
        let (inputs, outputs) = self.scoring_shape();
        if net.input_dim() != inputs || net.output_dim() != outputs {
            return Err(Error::Data(format!(
                "network `{key}` has shape {}->{}, expected {inputs}->{outputs}",
                net.input_dim(),
                net.output_dim()
            )));
        }
        Ok(())
    }

    fn scoring_key(&self) -> &'static str {
        match self.algo {
            Algo::Dqn => Q_NET,
            Algo::RewardModel => REWARD_NET,
            Algo::Ppo | Algo::Sft | Algo::Rlhf => POLICY_NET,
        }
    }

    fn scoring_shape(&self) -> (usize, usize) {
        let n = self.catalog_ids.len();
        match self.algo {
            Algo::RewardModel => (self.encoder.dimension + n, 1),
            _ => (self.encoder.dimension, n),
        }
    }

    pub fn network(&self, key: &str) -> Option<&Mlp> {
        self.networks.get(key)
    }

    /// Refuse to run against a world whose encoder or catalog differs from
    /// the one the artifact was trained with.
    pub fn check_compatible(&self, world: &World) -> Result<()> {
        let runtime = world.encoder().fingerprint();
        if runtime != self.encoder_fingerprint {
            return Err(Error::FingerprintMismatch {
                artifact: self.encoder_fingerprint.clone(),
                runtime,
            });
        }
        if world.catalog().ids() != self.catalog_ids {
            return Err(Error::config("catalog", "catalog ids differ from those the artifact was trained on"));
        }
        Ok(())
    }

    /// Per-action scores: Q-values, policy logits or reward-model scores.
    pub fn action_scores(&self, encoding: &[f64]) -> Result<Vec<f64>> {
        let net = &self.networks[self.scoring_key()];
        match self.algo {
            Algo::RewardModel => {
                let n = self.catalog_ids.len();
                let mut input = encoding.to_vec();
                input.resize(encoding.len() + n, 0.0);
                (0..n)
                    .map(|a| {
                        input[encoding.len()..].iter_mut().for_each(|v| *v = 0.0);
                        input[encoding.len() + a] = 1.0;
                        Ok(net.predict(&input)?[0])
                    })
                    .collect()
            }
            _ => net.predict(encoding),
        }
    }
}

impl Policy for PolicyArtifact {
    fn act(&self, _state: &DialogueState, encoding: &[f64], allowed: &ActionMask) -> Result<usize> {
        let scores = self.action_scores(encoding)?;
        masked_argmax(&scores, allowed.as_slice()).ok_or_else(|| Error::Precondition("empty allowed set".into()))
    }
}

/// Anything that picks an action given a state and its allowed set.
pub trait Policy: Sync {
    fn act(&self, state: &DialogueState, encoding: &[f64], allowed: &ActionMask) -> Result<usize>;
}

/// Always plays the catalog fallback.
#[derive(Debug, Clone, Copy)]
pub struct FallbackPolicy {
    pub fallback: usize,
}

impl Policy for FallbackPolicy {
    fn act(&self, _state: &DialogueState, _encoding: &[f64], _allowed: &ActionMask) -> Result<usize> {
        Ok(self.fallback)
    }
}

/// Closure-backed policy, handy for tests and examples.
pub struct FnPolicy<F>(pub F);

impl<F> Policy for FnPolicy<F>
where
    F: Fn(&DialogueState, &ActionMask) -> usize + Sync,
{
    fn act(&self, state: &DialogueState, _encoding: &[f64], allowed: &ActionMask) -> Result<usize> {
        Ok((self.0)(state, allowed))
    }
}
