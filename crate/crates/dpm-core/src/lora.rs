//! Low-rank adapter lifecycle.
//!
//! Two adapters matter here: the persistent training adapter (the only thing
//! the training loop updates) and the per-sample temporary adapter that DPM
//! inference creates, updates once per sentence, and discards. Adapters stack:
//! a temporary adapter sits on top of the frozen base + frozen training pair.

use sha2::{Digest, Sha256};

use crate::error::{DpmError, Result};
use crate::model::Model;
use crate::numerics::{Scalar, Tensor};

pub const TRAINING_ADAPTER: &str = "training";
pub const TEMP_ADAPTER: &str = "temp";

const LORA_INIT_STD: f64 = 0.02;

/// One target layer's low-rank pair. `a` is `[in, rank]` (Gaussian init) and
/// `b` is `[rank, out]` (zero init), so the delta `(alpha/rank) * a @ b` is
/// exactly zero at creation.
pub struct LoraEntry<F: Scalar> {
    pub layer: String,
    pub a: Tensor<F>,
    pub b: Tensor<F>,
}

pub struct LoraAdapter<F: Scalar> {
    pub name: String,
    pub rank: usize,
    pub alpha: f64,
    trainable: bool,
    entries: Vec<LoraEntry<F>>,
}

impl<F: Scalar> LoraAdapter<F> {
    pub fn scaling(&self) -> F {
        F::from_f64(self.alpha / self.rank as f64)
    }

    pub fn entry(&self, layer: &str) -> Option<&LoraEntry<F>> {
        self.entries.iter().find(|e| e.layer == layer)
    }

    pub fn entries(&self) -> &[LoraEntry<F>] {
        &self.entries
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
        for e in &self.entries {
            e.a.set_requires_grad(trainable);
            e.b.set_requires_grad(trainable);
        }
    }

    /// Adapter parameters in a fixed (name, tensor) order.
    pub fn parameters(&self) -> Vec<(String, Tensor<F>)> {
        let mut out = Vec::with_capacity(self.entries.len() * 2);
        for e in &self.entries {
            out.push((format!("{}.{}.a", self.name, e.layer), e.a.clone()));
            out.push((format!("{}.{}.b", self.name, e.layer), e.b.clone()));
        }
        out
    }

    /// Total adapter parameter count: sum over layers of `rank * (in + out)`.
    pub fn parameter_count(&self) -> usize {
        self.entries
            .iter()
            .map(|e| e.a.numel() + e.b.numel())
            .sum()
    }
}

/// Attach a named adapter covering every linear layer of the model.
pub fn attach_adapter<F: Scalar>(
    model: &mut Model<F>,
    name: &str,
    rank: usize,
    alpha: f64,
    seed: u64,
    trainable: bool,
) -> Result<()> {
    if rank == 0 || alpha <= 0.0 {
        return Err(DpmError::InvalidConfig(format!(
            "lora rank must be positive and alpha > 0 (rank {rank}, alpha {alpha})"
        )));
    }
    if model.adapter(name).is_some() {
        return Err(DpmError::AdapterLifecycle(format!(
            "adapter '{name}' is already attached"
        )));
    }
    let mut rng = crate::seeded_rng(seed, 1);
    let mut entries = Vec::new();
    for lin in model.linear_layers() {
        let a = Tensor::randn(
            vec![lin.in_dim(), rank],
            F::from_f64(LORA_INIT_STD),
            &mut rng,
            trainable,
        )?;
        let b = Tensor::zeros(vec![rank, lin.out_dim()], trainable)?;
        entries.push(LoraEntry {
            layer: lin.name.clone(),
            a,
            b,
        });
    }
    model.adapters.push(LoraAdapter {
        name: name.to_string(),
        rank,
        alpha,
        trainable,
        entries,
    });
    Ok(())
}

/// Attach the persistent training adapter; base stays frozen, adapter
/// parameters are the only trainable group.
pub fn attach_training_lora<F: Scalar>(
    model: &mut Model<F>,
    rank: usize,
    alpha: f64,
    seed: u64,
) -> Result<()> {
    attach_adapter(model, TRAINING_ADAPTER, rank, alpha, seed, true)
}

/// Create the per-sample temporary adapter on top of the frozen stack.
///
/// Requires that every already-attached adapter is frozen, and that no
/// temporary adapter is still attached from a previous sample.
pub fn create_temp_lora<F: Scalar>(
    model: &mut Model<F>,
    rank: usize,
    alpha: f64,
    seed: u64,
) -> Result<()> {
    if model.adapter(TEMP_ADAPTER).is_some() {
        return Err(DpmError::AdapterLifecycle(
            "a previous temporary adapter is still attached".into(),
        ));
    }
    if let Some(unfrozen) = model.adapters.iter().find(|a| a.is_trainable()) {
        return Err(DpmError::AdapterLifecycle(format!(
            "adapter '{}' must be frozen before creating a temporary adapter",
            unfrozen.name
        )));
    }
    attach_adapter(model, TEMP_ADAPTER, rank, alpha, seed, true)
}

/// Drop the temporary adapter; model outputs return bitwise to the
/// pre-attachment state.
pub fn discard_temp_lora<F: Scalar>(model: &mut Model<F>) -> Result<()> {
    discard_adapter(model, TEMP_ADAPTER)
}

pub fn discard_adapter<F: Scalar>(model: &mut Model<F>, name: &str) -> Result<()> {
    let idx = model
        .adapters
        .iter()
        .position(|a| a.name == name)
        .ok_or_else(|| DpmError::AdapterLifecycle(format!("adapter '{name}' is not attached")))?;
    model.adapters.remove(idx);
    Ok(())
}

pub fn freeze_adapter<F: Scalar>(model: &mut Model<F>, name: &str) -> Result<()> {
    let adapter = model
        .adapters
        .iter_mut()
        .find(|a| a.name == name)
        .ok_or_else(|| DpmError::AdapterLifecycle(format!("adapter '{name}' is not attached")))?;
    adapter.set_trainable(false);
    Ok(())
}

/// SHA-256 over base parameters plus the named adapters, in enumeration
/// order. Used to audit that frozen groups never move.
pub fn audit_hash<F: Scalar>(model: &Model<F>, adapter_names: &[&str]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    let mut push = |params: Vec<(String, Tensor<F>)>| {
        for (name, t) in params {
            hasher.update(name.as_bytes());
            let mut bytes = Vec::with_capacity(t.numel() * F::BYTES);
            for &v in t.data().iter() {
                v.write_le(&mut bytes);
            }
            hasher.update(&bytes);
        }
    };
    push(model.base_parameters());
    for name in adapter_names {
        if let Some(a) = model.adapter(name) {
            push(a.parameters());
        }
    }
    hasher.finalize().into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Vocabulary};
    use crate::numerics::{Optimizer, OptimizerKind};

    fn model() -> Model<f32> {
        Model::build(ModelConfig {
            embed_dim: 16,
            num_layers: 2,
            num_heads: 2,
            n_limit: 24,
            vocab: Vocabulary::new(0, 32, 4).unwrap(),
            seed: 5,
        })
        .unwrap()
    }

    fn bits(model: &Model<f32>, tokens: &[u32]) -> Vec<u32> {
        model
            .forward(tokens, 0)
            .unwrap()
            .to_vec()
            .iter()
            .map(|v| v.to_bits())
            .collect()
    }

    #[test]
    fn fresh_adapter_leaves_outputs_bitwise_unchanged() {
        let mut m = model();
        let tokens: Vec<u32> = (0..10).collect();
        let before = bits(&m, &tokens);
        attach_training_lora(&mut m, 8, 8.0, 42).unwrap();
        assert_eq!(before, bits(&m, &tokens));
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let mut m = model();
        attach_training_lora(&mut m, 4, 4.0, 1).unwrap();
        let adapter = m.adapter(TRAINING_ADAPTER).unwrap();
        // closed form: sum over linears of rank*(in+out)
        let expect: usize = m
            .linear_layers()
            .iter()
            .map(|l| 4 * (l.in_dim() + l.out_dim()))
            .sum();
        assert_eq!(adapter.parameter_count(), expect);
        // enumeration oracle
        let by_enum: usize = adapter.parameters().iter().map(|(_, t)| t.numel()).sum();
        assert_eq!(adapter.parameter_count(), by_enum);
    }

    #[test]
    fn desk_model_rank8_count_matches_frozen_oracle() {
        // d=128, 4 layers, vocab total 361, rank 8: value fixed before the build.
        let mut m = Model::<f32>::build(ModelConfig {
            embed_dim: 128,
            num_layers: 4,
            num_heads: 4,
            n_limit: 8,
            vocab: Vocabulary::new(100, 256, 4).unwrap(),
            seed: 0,
        })
        .unwrap();
        attach_training_lora(&mut m, 8, 8.0, 0).unwrap();
        assert_eq!(m.adapter(TRAINING_ADAPTER).unwrap().parameter_count(), 77640);
    }

    #[test]
    fn duplicate_attach_rejected() {
        let mut m = model();
        attach_training_lora(&mut m, 8, 8.0, 1).unwrap();
        assert!(attach_training_lora(&mut m, 8, 8.0, 2).is_err());
    }

    #[test]
    fn temp_lora_requires_frozen_stack_and_unique_instance() {
        let mut m = model();
        attach_training_lora(&mut m, 8, 8.0, 1).unwrap();
        // training adapter still trainable
        assert!(create_temp_lora(&mut m, 8, 8.0, 3).is_err());
        freeze_adapter(&mut m, TRAINING_ADAPTER).unwrap();
        create_temp_lora(&mut m, 8, 8.0, 3).unwrap();
        // second temporary adapter while one is attached
        assert!(create_temp_lora(&mut m, 8, 8.0, 4).is_err());
    }

    #[test]
    fn discard_restores_outputs_bitwise_and_twice_errors() {
        let mut m = model();
        attach_training_lora(&mut m, 8, 8.0, 1).unwrap();
        freeze_adapter(&mut m, TRAINING_ADAPTER).unwrap();
        let tokens: Vec<u32> = (5..17).collect();
        let before = bits(&m, &tokens);

        create_temp_lora(&mut m, 8, 8.0, 9).unwrap();
        // push the temp adapter away from zero with real update steps
        let params: Vec<_> = m
            .adapter(TEMP_ADAPTER)
            .unwrap()
            .parameters()
            .into_iter()
            .map(|(_, t)| t)
            .collect();
        let mut opt = Optimizer::new(OptimizerKind::Adam, 1e-2);
        for _ in 0..3 {
            let logits = m.forward(&tokens, 0).unwrap();
            let loss = logits.sum_all();
            opt.zero_grad(&params);
            loss.backward().unwrap();
            opt.step(&params).unwrap();
        }
        assert_ne!(before, bits(&m, &tokens), "updates should move outputs");

        discard_temp_lora(&mut m).unwrap();
        assert_eq!(before, bits(&m, &tokens));
        assert!(discard_temp_lora(&mut m).is_err());
    }

    #[test]
    fn repeated_create_discard_cycles_leave_no_residue() {
        let mut m = model();
        attach_training_lora(&mut m, 8, 8.0, 1).unwrap();
        freeze_adapter(&mut m, TRAINING_ADAPTER).unwrap();
        let baseline = audit_hash(&m, &[TRAINING_ADAPTER]);
        for _ in 0..2 {
            create_temp_lora(&mut m, 8, 8.0, 9).unwrap();
            discard_temp_lora(&mut m).unwrap();
        }
        assert_eq!(m.adapter_names(), vec![TRAINING_ADAPTER.to_string()]);
        assert_eq!(baseline, audit_hash(&m, &[TRAINING_ADAPTER]));
    }

    #[test]
    fn frozen_groups_unchanged_by_temp_updates() {
        let mut m = model();
        attach_training_lora(&mut m, 8, 8.0, 1).unwrap();
        freeze_adapter(&mut m, TRAINING_ADAPTER).unwrap();
        let frozen = audit_hash(&m, &[TRAINING_ADAPTER]);

        create_temp_lora(&mut m, 8, 8.0, 9).unwrap();
        let params: Vec<_> = m
            .adapter(TEMP_ADAPTER)
            .unwrap()
            .parameters()
            .into_iter()
            .map(|(_, t)| t)
            .collect();
        let mut opt = Optimizer::new(OptimizerKind::Adam, 1e-2);
        let tokens: Vec<u32> = (0..12).collect();
        for _ in 0..5 {
            let loss = m.forward(&tokens, 0).unwrap().sum_all();
            opt.zero_grad(&params);
            loss.backward().unwrap();
            opt.step(&params).unwrap();
        }
        // frozen groups never receive gradients at all
        for (_, p) in m.base_parameters() {
            assert!(p.grad().is_none());
        }
        for (_, p) in m.adapter(TRAINING_ADAPTER).unwrap().parameters() {
            assert!(p.grad().is_none());
        }
        assert_eq!(frozen, audit_hash(&m, &[TRAINING_ADAPTER]));
        discard_temp_lora(&mut m).unwrap();
    }

    #[test]
    fn stacked_deltas_compose_additively() {
        let mut m = model();
        attach_training_lora(&mut m, 4, 4.0, 11).unwrap();
        freeze_adapter(&mut m, TRAINING_ADAPTER).unwrap();
        create_temp_lora(&mut m, 4, 4.0, 13).unwrap();
        // randomize both adapters' b matrices so deltas are nonzero
        let mut rng = crate::seeded_rng(55, 0);
        for name in [TRAINING_ADAPTER, TEMP_ADAPTER] {
            for (_, t) in m.adapter(name).unwrap().parameters() {
                let n = t.numel();
                let fresh = Tensor::<f32>::randn(vec![n], 0.05, &mut rng, false).unwrap();
                t.data_mut().copy_from_slice(&fresh.to_vec());
            }
        }
        let tokens: Vec<u32> = (0..9).collect();
        let stacked = m.forward(&tokens, 0).unwrap().to_vec();

        // merge both deltas into the base weights, then drop the adapters
        let deltas: Vec<(String, Vec<f32>)> = m
            .adapters
            .iter()
            .flat_map(|ad| {
                ad.entries().iter().map(move |e| {
                    let delta = e.a.matmul(&e.b).unwrap().scale(ad.scaling());
                    (e.layer.clone(), delta.to_vec())
                })
            })
            .collect();
        for (layer, delta) in deltas {
            let lin = m
                .linear_layers()
                .into_iter()
                .find(|l| l.name == layer)
                .unwrap();
            let w = lin.weight.clone();
            let mut data = w.data_mut();
            for (v, d) in data.iter_mut().zip(delta) {
                *v += d;
            }
        }
        discard_temp_lora(&mut m).unwrap();
        discard_adapter(&mut m, TRAINING_ADAPTER).unwrap();
        let merged = m.forward(&tokens, 0).unwrap().to_vec();

        for (s, g) in stacked.iter().zip(&merged) {
            let rel = (s - g).abs() / s.abs().max(g.abs()).max(1.0);
            assert!(rel < 1e-5, "stacked {s} vs merged {g}");
        }
    }
}
