//! Mini-batch Adam training of the hypernetwork weights.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::geometry::{norm, sample_ball, PointCloud, Rng};
use crate::model::{
    encode, hyper_decode, loss_on_tape, target_forward, HyperModel, LossKind, TrainConfig,
};
use crate::setdist::{chamfer, emd_exact};

/// Adam with bias correction, one (m, v) pair per parameter block.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(block_sizes: &[usize], lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update over parallel slices of parameters and gradients.
    pub fn update(&mut self, params: &mut [&mut Vec<f64>], grads: &[Vec<f64>]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (bi, p) in params.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[bi], &mut self.v[bi], &grads[bi]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// One training step's batch-mean losses, recorded before the update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    pub step: usize,
    pub total: f64,
    pub err: f64,
    pub kl: f64,
}

fn check_dataset(dataset: &[PointCloud]) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::EmptyCloud("training dataset has no clouds".into()));
    }
    for (i, pc) in dataset.iter().enumerate() {
        if pc.is_empty() {
            return Err(Error::EmptyCloud(format!("training cloud {} is empty", i)));
        }
        if !pc.all_finite() {
            return Err(Error::NonFinite {
                op: "train",
                details: format!("training cloud {} has a non-finite coordinate", i),
            });
        }
        if pc.iter().any(|p| norm(p) > 1.0 + 1e-9) {
            return Err(Error::InvalidArg(format!(
                "training cloud {} is not normalized into the unit ball",
                i
            )));
        }
    }
    Ok(())
}

/// Minimize `err + lambda * kl` with Adam over shuffled mini-batches.
///
/// Per step: draw fresh unit-ball prior points and latent noise for each
/// batch cloud, build one tape over the whole batch, take the batch means,
/// and apply one Adam update. Everything (init, shuffling, sampling) runs
/// off one seeded stream, so a seed fixes the entire run. Aborts with the
/// step number if the loss goes non-finite.
pub fn train(dataset: &[PointCloud], config: &TrainConfig) -> Result<(HyperModel, Vec<HistoryRow>)> {
    config.validate()?;
    check_dataset(dataset)?;

    let mut rng = crate::geometry::rng_from_seed(config.seed);
    let mut model = HyperModel::init(config, &mut rng)?;
    let block_sizes: Vec<usize> = model
        .layers()
        .iter()
        .flat_map(|l| [l.w.len(), l.b.len()])
        .collect();
    let mut adam = Adam::new(
        &block_sizes,
        config.learning_rate,
        config.beta1,
        config.beta2,
        config.epsilon,
    );

    let batch = config.batch_size.min(dataset.len());
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut cursor = order.len(); // force a shuffle before the first batch
    let mut history = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let mut indices = Vec::with_capacity(batch);
        while indices.len() < batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            indices.push(order[cursor]);
            cursor += 1;
        }

        let mut tape = Tape::new();
        let leaves = model.register_leaves(&mut tape);
        let mut err_acc = None;
        let mut kl_acc = None;
        for &ci in &indices {
            let pc = &dataset[ci];
            let n_prior = config.prior_samples.unwrap_or(pc.len());
            let prior = sample_ball(n_prior, &mut rng)?;
            let eps: Vec<f64> =
                (0..model.latent_dim).map(|_| rng.sample(StandardNormal)).collect();
            let nodes = loss_on_tape(
                &model,
                &leaves,
                &mut tape,
                pc,
                &prior,
                Some(&eps),
                config.loss,
                config.lambda,
            )?;
            err_acc = Some(match err_acc {
                None => nodes.err,
                Some(acc) => tape.add(acc, nodes.err)?,
            });
            kl_acc = Some(match kl_acc {
                None => nodes.kl,
                Some(acc) => tape.add(acc, nodes.kl)?,
            });
        }
        let inv_b = tape.leaf(Tensor::scalar(1.0 / batch as f64));
        let err_mean = tape.mul(inv_b, err_acc.expect("batch >= 1"))?;
        let kl_mean = tape.mul(inv_b, kl_acc.expect("batch >= 1"))?;
        let lam = tape.leaf(Tensor::scalar(config.lambda));
        let reg = tape.mul(lam, kl_mean)?;
        let total = tape.add(err_mean, reg)?;

        let total_v = tape.value(total).item();
        let err_v = tape.value(err_mean).item();
        let kl_v = tape.value(kl_mean).item();
        if !total_v.is_finite() {
            return Err(Error::Diverged { step });
        }
        history.push(HistoryRow { step, total: total_v, err: err_v, kl: kl_v });

        let grads = tape.backward(total)?;
        let grad_blocks: Vec<Vec<f64>> = leaves
            .all()
            .iter()
            .flat_map(|&(w, b)| {
                let gw = grads
                    .get(w)
                    .map(|t| t.data().to_vec())
                    .unwrap_or_else(|| vec![0.0; tape.value(w).numel()]);
                let gb = grads
                    .get(b)
                    .map(|t| t.data().to_vec())
                    .unwrap_or_else(|| vec![0.0; tape.value(b).numel()]);
                [gw, gb]
            })
            .collect();
        let mut param_blocks: Vec<&mut Vec<f64>> = Vec::with_capacity(grad_blocks.len());
        for layer in model.layers_mut() {
            param_blocks.push(&mut layer.w);
            param_blocks.push(&mut layer.b);
        }
        adam.update(&mut param_blocks, &grad_blocks);
    }

    Ok((model, history))
}

/// Dataset-mean reconstruction error with deterministic encodings (z = mu)
/// and per-cloud prior samples drawn from the given seed. Used to compare a
/// model against its own starting point.
pub fn mean_reconstruction_err(
    model: &HyperModel,
    dataset: &[PointCloud],
    kind: LossKind,
    seed: u64,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyCloud("mean_reconstruction_err".into()));
    }
    let mut rng = crate::geometry::rng_from_seed(seed);
    let mut acc = 0.0;
    for pc in dataset {
        let code = encode(model, pc)?;
        let theta = hyper_decode(model, &code.mu)?;
        let prior = sample_ball(pc.len(), &mut rng)?;
        let recon = target_forward(&model.target_arch, &theta, &prior)?;
        acc += match kind {
            LossKind::Chamfer => chamfer(pc, &recon)?,
            LossKind::Emd => emd_exact(pc, &recon)?.0,
        };
    }
    Ok(acc / dataset.len() as f64)
}
