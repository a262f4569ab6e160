//! Source-model pretraining on the clean synthetic task.

use crate::backprop::{batch_loss_and_grads, batch_predict, minibatch_order, Adam, Params};
use crate::{HarnessError, Result};
use fozo::model::{Checkpoint, FrozenModel, ModelSpec, ModelWeights};
use fozo::stream::{generate_source, TaskSpec};
use fozo::{predict, PromptModel, SeedStream, Tensor64};

/// Pretraining knobs. The defaults train the toy model well past the 95%
/// held-out gate in a few hundred Adam steps.
#[derive(Debug, Clone)]
pub struct PretrainOptions {
    pub n_train: usize,
    pub n_heldout: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub max_steps: usize,
    /// Train at least this many steps even after the accuracy target is met.
    /// Training past accuracy convergence saturates the softmax on clean
    /// data, which keeps the entropy term's gradient well scaled during
    /// adaptation.
    pub min_steps: usize,
    /// Stop early once held-out accuracy reaches this (and `min_steps` have
    /// run).
    pub target_accuracy: f64,
    /// Below this at the step cap, pretraining is considered failed.
    pub min_accuracy: f64,
    /// Evaluate held-out accuracy every this many steps.
    pub eval_every: usize,
    /// Prompt-noise augmentation: training batches cycle through 0..=max
    /// random prompt tokens drawn iid N(0, sigma^2). The model learns to
    /// hold its predictions under uninformative prompt content, which keeps
    /// loss variation under test-time prompt perturbations concentrated in
    /// the few directions that actually matter.
    pub prompt_noise_max: usize,
    pub prompt_noise_sigma: f64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            n_train: 2048,
            n_heldout: 512,
            batch_size: 64,
            lr: 3e-3,
            max_steps: 1200,
            min_steps: 500,
            target_accuracy: 0.97,
            min_accuracy: 0.60,
            eval_every: 25,
            prompt_noise_max: 3,
            prompt_noise_sigma: 0.5,
        }
    }
}

/// Result of a pretraining run.
pub struct PretrainOutcome {
    pub model: FrozenModel,
    pub heldout_accuracy: f64,
    pub steps: usize,
}

/// Train the toy model on clean source data until the held-out gate is met
/// (or fail loudly below the minimum). Deterministic under the seed: same
/// seed, same checkpoint bytes.
pub fn pretrain_source(
    spec: &ModelSpec,
    task: &TaskSpec,
    seed: u64,
    opts: &PretrainOptions,
) -> Result<PretrainOutcome> {
    spec.validate()?;
    task.validate()?;
    if spec.n_classes != task.n_classes
        || spec.input_dim != task.input_dim
        || spec.n_patches != task.n_patches
    {
        return Err(HarnessError::InvalidConfig(format!(
            "model spec ({}x{}x{}) does not match task ({}x{}x{})",
            spec.n_classes,
            spec.input_dim,
            spec.n_patches,
            task.n_classes,
            task.input_dim,
            task.n_patches
        )));
    }

    let (train_x, train_y) = generate_source(task, opts.n_train, SeedStream::derive(seed, &[10]))?;
    let (held_x, held_y) = generate_source(task, opts.n_heldout, SeedStream::derive(seed, &[11]))?;

    let weights = ModelWeights::random_init(spec, seed)?;
    let mut params = Params::from_weights(spec, &weights);
    let mut opt = Adam::new(opts.lr, &params);

    let sample_len = task.n_patches * task.input_dim;
    let heldout_acc = |params: &Params| -> f64 {
        let preds = batch_predict(params, &held_x);
        let correct = preds.iter().zip(held_y.iter()).filter(|(p, l)| p == l).count();
        correct as f64 / held_y.len() as f64
    };

    let mut steps = 0usize;
    let mut accuracy = heldout_acc(&params);
    let batches_per_epoch = opts.n_train / opts.batch_size;
    let mut noise_stream = SeedStream::new(SeedStream::derive(seed, &[12]));
    'train: for epoch in 0.. {
        let order = minibatch_order(opts.n_train, epoch, seed);
        for bi in 0..batches_per_epoch {
            let idx = &order[bi * opts.batch_size..(bi + 1) * opts.batch_size];
            let mut data = Vec::with_capacity(opts.batch_size * sample_len);
            let mut labels = Vec::with_capacity(opts.batch_size);
            for &i in idx {
                data.extend_from_slice(train_x.plane(i));
                labels.push(train_y[i]);
            }
            let inputs =
                Tensor64::new(vec![opts.batch_size, task.n_patches, task.input_dim], data)?;

            // cycle prompt-noise counts 0..=max across steps
            let n_aug = if opts.prompt_noise_max == 0 {
                0
            } else {
                steps % (opts.prompt_noise_max + 1)
            };
            let mut prompt_rows = vec![0.0; n_aug * spec.embed_dim];
            noise_stream.fill_gaussian(&mut prompt_rows);
            for v in prompt_rows.iter_mut() {
                *v *= opts.prompt_noise_sigma;
            }

            let (_, grads) = batch_loss_and_grads(&params, &inputs, &labels, &prompt_rows)?;
            opt.step(&mut params, &grads);
            steps += 1;

            if steps % opts.eval_every == 0 || steps >= opts.max_steps {
                accuracy = heldout_acc(&params);
                let satisfied = accuracy >= opts.target_accuracy && steps >= opts.min_steps;
                if satisfied || steps >= opts.max_steps {
                    break 'train;
                }
            }
        }
    }

    if accuracy < opts.min_accuracy {
        return Err(HarnessError::PretrainingFailure {
            accuracy,
            required: opts.min_accuracy,
            cap: opts.max_steps,
        });
    }

    let model = FrozenModel::from_weights(spec.clone(), params.to_weights()?)?;
    // authoritative accuracy: the frozen model's own forward on held-out data
    let out = model.forward(&held_x)?;
    let preds = predict(&out.logits)?;
    let correct = preds.iter().zip(held_y.iter()).filter(|(p, l)| p == l).count();
    let heldout_accuracy = correct as f64 / held_y.len() as f64;

    Ok(PretrainOutcome {
        model,
        heldout_accuracy,
        steps,
    })
}

/// Pretrain and wrap into a checkpoint.
pub fn pretrain_checkpoint(
    spec: &ModelSpec,
    task: &TaskSpec,
    seed: u64,
    opts: &PretrainOptions,
) -> Result<Checkpoint> {
    let outcome = pretrain_source(spec, task, seed, opts)?;
    Ok(Checkpoint::new(
        &outcome.model,
        seed,
        Some(outcome.heldout_accuracy),
    ))
}

/// Evaluate a model's accuracy on a labeled batch list.
pub fn accuracy_on<M: PromptModel + ?Sized>(
    model: &M,
    batches: &[(Tensor64, Vec<usize>)],
) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for (inputs, labels) in batches {
        let out = model.forward_with_prompts(
            &fozo::PromptSet::empty(model.spec().embed_dim),
            inputs,
        )?;
        let preds = predict(&out.logits)?;
        correct += preds.iter().zip(labels.iter()).filter(|(p, l)| p == l).count();
        total += labels.len();
    }
    Ok(correct as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_class_separable_task_trains_to_99() {
        let task = TaskSpec {
            n_classes: 2,
            input_dim: 6,
            n_patches: 4,
            prototype_seed: 3,
            noise_scale: 0.15,
        };
        let spec = ModelSpec {
            n_layers: 2,
            embed_dim: 8,
            n_heads: 2,
            n_patches: 4,
            n_classes: 2,
            input_dim: 6,
        };
        let opts = PretrainOptions {
            n_train: 512,
            n_heldout: 256,
            max_steps: 400,
            min_steps: 0,
            target_accuracy: 0.995,
            ..PretrainOptions::default()
        };
        let outcome = pretrain_source(&spec, &task, 1, &opts).unwrap();
        assert!(
            outcome.heldout_accuracy >= 0.99,
            "accuracy {}",
            outcome.heldout_accuracy
        );
    }

    #[test]
    fn same_seed_same_checkpoint() {
        let task = TaskSpec {
            n_classes: 2,
            input_dim: 4,
            n_patches: 3,
            prototype_seed: 3,
            noise_scale: 0.2,
        };
        let spec = ModelSpec {
            n_layers: 2,
            embed_dim: 4,
            n_heads: 2,
            n_patches: 3,
            n_classes: 2,
            input_dim: 4,
        };
        let opts = PretrainOptions {
            n_train: 128,
            n_heldout: 64,
            batch_size: 32,
            max_steps: 60,
            min_steps: 0,
            target_accuracy: 2.0, // never early-stop: exercise the full loop
            min_accuracy: 0.0,
            ..PretrainOptions::default()
        };
        let a = pretrain_source(&spec, &task, 9, &opts).unwrap();
        let b = pretrain_source(&spec, &task, 9, &opts).unwrap();
        assert_eq!(a.model.weight_hash(), b.model.weight_hash());
        assert_eq!(a.steps, b.steps);
    }

    #[test]
    fn mismatched_spec_and_task_rejected() {
        let task = TaskSpec::toy();
        let spec = ModelSpec {
            n_classes: task.n_classes + 1,
            ..ModelSpec::toy()
        };
        assert!(matches!(
            pretrain_source(&spec, &task, 1, &PretrainOptions::default()),
            Err(HarnessError::InvalidConfig(_))
        ));
    }
}
