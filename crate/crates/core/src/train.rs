//! Loss computation, the Adam optimizer, and the epoch loop.
//!
//! The objective sums, over every prediction stage, a frame-mean
//! cross-entropy plus `lambda` times a temporal smoothing penalty on the
//! stage's probabilities. Sequences vary in length, so training steps one
//! sequence at a time.

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::model::{argmax_rows, Model, ModelError, StagePrediction};
use crate::scalar::Scalar;
use crate::tensor::ops::{add_scaled, adjacent_sq_mean, cross_entropy_mean, row_softmax};
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty dataset: training needs at least one sequence")]
    EmptyDataset,
    #[error("sequence {index}: {frames} frames but {labels} labels")]
    LabelCountMismatch {
        index: usize,
        frames: usize,
        labels: usize,
    },
    #[error("sequence {index}: {source}")]
    Sequence {
        index: usize,
        #[source]
        source: ModelError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Mean over frames of the negative log-probability of the true class.
pub fn classification_loss<S: Scalar>(
    tape: &mut Tape<S>,
    logits: &Tensor<S>,
    labels: &[usize],
) -> Result<Tensor<S>> {
    Ok(cross_entropy_mean(tape, logits, labels)?)
}

/// Mean squared difference between the probability rows of adjacent frames:
/// `(1/(T*C)) * sum_{t>=2,c} (p[t,c] - p[t-1,c])^2`.
pub fn smoothing_loss<S: Scalar>(tape: &mut Tape<S>, logits: &Tensor<S>) -> Result<Tensor<S>> {
    let probs = row_softmax(tape, logits)?;
    Ok(adjacent_sq_mean(tape, &probs)?)
}

/// The per-stage loss terms of one sequence, plus their weighted total as a
/// live scalar for backpropagation.
pub struct LossBreakdown<S: Scalar> {
    /// Classification loss per stage, in stage order.
    pub cls: Vec<f64>,
    /// Smoothing loss per stage, in stage order.
    pub smo: Vec<f64>,
    /// `sum over stages of (cls + lambda * smo)`, still on the tape.
    pub total: Tensor<S>,
}

impl<S: Scalar> LossBreakdown<S> {
    pub fn total_value(&self) -> f64 {
        Scalar::to_f64(self.total.item())
    }

    pub fn cls_sum(&self) -> f64 {
        self.cls.iter().sum()
    }

    pub fn smo_sum(&self) -> f64 {
        self.smo.iter().sum()
    }
}

/// Combined objective over all prediction stages.
pub fn total_loss<S: Scalar>(
    tape: &mut Tape<S>,
    stages: &[StagePrediction<S>],
    labels: &[usize],
    lambda: f64,
) -> Result<LossBreakdown<S>> {
    let mut cls = Vec::with_capacity(stages.len());
    let mut smo = Vec::with_capacity(stages.len());
    let mut total = Tensor::scalar(S::zero());
    let lambda_s = S::from_f64(lambda);
    for stage in stages {
        let c = classification_loss(tape, &stage.logits, labels)?;
        let s = smoothing_loss(tape, &stage.logits)?;
        cls.push(Scalar::to_f64(c.item()));
        smo.push(Scalar::to_f64(s.item()));
        total = add_scaled(tape, &total, &c, S::one())?;
        total = add_scaled(tape, &total, &s, lambda_s)?;
    }
    Ok(LossBreakdown { cls, smo, total })
}

/// Adam with bias correction. Moment buffers are allocated per parameter on
/// construction and match the parameter order of [`Model::parameters`].
pub struct Adam<S: Scalar> {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    steps: u64,
    first_moment: Vec<Vec<S>>,
    second_moment: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(params: &[(String, Tensor<S>)], learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            steps: 0,
            first_moment: params.iter().map(|(_, p)| vec![S::zero(); p.len()]).collect(),
            second_moment: params.iter().map(|(_, p)| vec![S::zero(); p.len()]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update from the gradients currently accumulated on `params`.
    /// A parameter with no gradient is treated as having a zero gradient.
    pub fn step(&mut self, params: &[(String, Tensor<S>)]) -> Result<()> {
        assert_eq!(
            params.len(),
            self.first_moment.len(),
            "optimizer was built for a different parameter list"
        );
        self.steps += 1;
        let t = self.steps as i32;
        let lr = S::from_f64(self.learning_rate);
        let b1 = S::from_f64(self.beta1);
        let b2 = S::from_f64(self.beta2);
        let one_minus_b1 = S::from_f64(1.0 - self.beta1);
        let one_minus_b2 = S::from_f64(1.0 - self.beta2);
        let correction1 = S::from_f64(1.0 / (1.0 - self.beta1.powi(t)));
        let correction2 = S::from_f64(1.0 / (1.0 - self.beta2.powi(t)));
        let eps = S::from_f64(self.epsilon);

        for ((_, param), (m, v)) in params
            .iter()
            .zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()))
        {
            let grad = param.grad_or_zeros();
            param.update_values(|values| {
                for i in 0..values.len() {
                    let g = grad[i];
                    m[i] = b1 * m[i] + one_minus_b1 * g;
                    v[i] = b2 * v[i] + one_minus_b2 * g * g;
                    let m_hat = m[i] * correction1;
                    let v_hat = v[i] * correction2;
                    values[i] = values[i] - lr * m_hat / (v_hat.sqrt() + eps);
                }
            });
        }
        Ok(())
    }
}

/// Epoch-loop hyperparameters.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
}

fn default_epochs() -> usize {
    120
}
fn default_learning_rate() -> f64 {
    5e-4
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: default_epochs(),
            learning_rate: default_learning_rate(),
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean total loss over the epoch's sequences.
    pub total_loss: f64,
    /// Mean summed classification loss.
    pub cls_loss: f64,
    /// Mean summed smoothing loss.
    pub smo_loss: f64,
    /// Frame accuracy of the final stage, pooled over the epoch (measured
    /// on the training passes themselves, dropout included).
    pub train_acc: f64,
}

/// Trains `model` in place: per epoch, visit the sequences in a freshly
/// shuffled order and take one optimizer step per sequence. Everything —
/// shuffling, dropout, updates — is driven by `rng`, so one seed fixes the
/// whole run.
pub fn fit<S: Scalar, R: Rng>(
    model: &Model<S>,
    dataset: &[(Tensor<S>, Vec<usize>)],
    config: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<EpochStats>> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    for (index, (features, labels)) in dataset.iter().enumerate() {
        let frames = features.rows();
        if labels.len() != frames {
            return Err(TrainError::LabelCountMismatch {
                index,
                frames,
                labels: labels.len(),
            });
        }
        let dim = features.cols();
        let expected = model.config().feature_dim;
        if dim != expected {
            return Err(TrainError::Sequence {
                index,
                source: ModelError::FeatureDimMismatch { expected, got: dim },
            });
        }
    }

    let params = model.parameters();
    let mut optimizer = Adam::new(&params, config.learning_rate);
    let lambda = model.config().lambda;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        let mut cls = 0.0;
        let mut smo = 0.0;
        let mut correct = 0usize;
        let mut frames = 0usize;
        for &index in &order {
            let (features, labels) = &dataset[index];
            let mut tape = Tape::recording();
            let output = model
                .forward(&mut tape, features, true, rng, None)
                .map_err(|source| TrainError::Sequence { index, source })?;
            let loss = total_loss(&mut tape, &output.stages, labels, lambda)?;
            model.zero_grads();
            tape.backward(&loss.total)?;
            optimizer.step(&params)?;

            total += loss.total_value();
            cls += loss.cls_sum();
            smo += loss.smo_sum();
            let predicted = argmax_rows(output.final_logits());
            correct += predicted
                .iter()
                .zip(labels)
                .filter(|(p, l)| p == l)
                .count();
            frames += labels.len();
        }
        let n = dataset.len() as f64;
        log.push(EpochStats {
            epoch,
            total_loss: total / n,
            cls_loss: cls / n,
            smo_loss: smo / n,
            train_acc: 100.0 * correct as f64 / frames as f64,
        });
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    #[test]
    fn classification_loss_uniform_is_ln_c() {
        let mut tape = Tape::inference();
        let logits = Tensor::<f64>::zeros(7, 4);
        let loss = classification_loss(&mut tape, &logits, &[0, 1, 2, 3, 0, 1, 2]).unwrap();
        assert!((loss.item() - 4.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn classification_loss_hand_value() {
        let mut tape = Tape::inference();
        let logits = Tensor::from_vec(
            2,
            2,
            vec![0.8f64.ln(), 0.2f64.ln(), 0.4f64.ln(), 0.6f64.ln()],
        )
        .unwrap();
        let loss = classification_loss(&mut tape, &logits, &[0, 1]).unwrap();
        assert!((loss.item() - 0.3670).abs() < 5e-5);
    }

    #[test]
    fn smoothing_loss_constant_logits_is_zero() {
        let mut tape = Tape::<f64>::inference();
        let row = vec![1.25f64, -0.5, 3.0];
        let mut values = Vec::new();
        for _ in 0..6 {
            values.extend(&row);
        }
        let logits = Tensor::from_vec(6, 3, values).unwrap();
        let loss = smoothing_loss(&mut tape, &logits).unwrap();
        assert_eq!(loss.item(), 0.0);
    }

    #[test]
    fn smoothing_loss_saturated_flip_is_half() {
        // logits of +-40 saturate softmax to (1, 0) within f64 precision, so
        // probs [[1,0],[0,1]] give ((1)^2 + (1)^2)/(2*2) = 0.5.
        let mut tape = Tape::inference();
        let logits = Tensor::from_vec(2, 2, vec![40.0f64, -40.0, -40.0, 40.0]).unwrap();
        let loss = smoothing_loss(&mut tape, &logits).unwrap();
        assert!((loss.item() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn total_loss_composition() {
        // lambda = 0.25 checked by hand on a 2-frame, 2-class instance.
        let mut tape = Tape::inference();
        let logits = Tensor::from_vec(2, 2, vec![40.0f64, -40.0, -40.0, 40.0]).unwrap();
        let stages = vec![StagePrediction {
            name: "encoder".to_string(),
            logits: logits.clone(),
        }];
        // correct labels: cls ~ 0; smo = 0.5 -> total = 0 + 0.25*0.5 = 0.125
        let loss = total_loss(&mut tape, &stages, &[0, 1], 0.25).unwrap();
        assert!((loss.total_value() - 0.125).abs() < 1e-9);
        assert!(loss.cls[0] < 1e-12);
        assert!((loss.smo[0] - 0.5).abs() < 1e-12);

        // lambda = 0 keeps only the classification terms
        let loss0 = total_loss(&mut tape, &stages, &[0, 1], 0.0).unwrap();
        assert!((loss0.total_value() - loss0.cls_sum()).abs() < 1e-15);

        // four identical stages quadruple the total
        let four: Vec<StagePrediction<f64>> = (0..4)
            .map(|i| StagePrediction {
                name: format!("stage{i}"),
                logits: logits.clone(),
            })
            .collect();
        let loss4 = total_loss(&mut tape, &four, &[0, 1], 0.25).unwrap();
        assert!((loss4.total_value() - 4.0 * loss.total_value()).abs() < 1e-12);
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        let mut r = rng(5);
        let logits = Tensor::param(
            4,
            3,
            (0..12).map(|_| r.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let labels = [0usize, 2, 1, 1];
        let run = |tape: &mut Tape<f64>| {
            let stages = vec![StagePrediction {
                name: "s".to_string(),
                logits: logits.clone(),
            }];
            total_loss(tape, &stages, &labels, 0.25).unwrap().total
        };
        let mut tape = Tape::recording();
        let loss = run(&mut tape);
        tape.backward(&loss).unwrap();
        let analytic = logits.grad().unwrap();
        let base = logits.to_vec();
        let h = 1e-6;
        for i in 0..base.len() {
            let mut up = base.clone();
            up[i] += h;
            logits.set_values(&up);
            let mut t = Tape::inference();
            let plus = run(&mut t).item();
            let mut down = base.clone();
            down[i] -= h;
            logits.set_values(&down);
            let mut t = Tape::inference();
            let minus = run(&mut t).item();
            logits.set_values(&base);
            let fd = (plus - minus) / (2.0 * h);
            assert!(
                (analytic[i] - fd).abs() / (analytic[i].abs() + 1e-8) < 1e-4,
                "index {i}: {} vs {fd}",
                analytic[i]
            );
        }
    }

    #[test]
    fn adam_first_step_magnitude() {
        let param = Tensor::param(1, 1, vec![0.0f64]).unwrap();
        let params = vec![("p".to_string(), param.clone())];
        let mut adam = Adam::new(&params, 5e-4);
        param.accumulate_grad(&[1.0]);
        adam.step(&params).unwrap();
        let delta = param.item();
        assert!((delta + 5e-4).abs() < 1e-10, "first step was {delta}");
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let param = Tensor::param(2, 2, vec![0.5f32, -0.25, 1.0, 0.0]).unwrap();
        let before = param.to_vec();
        let params = vec![("p".to_string(), param.clone())];
        let mut adam = Adam::new(&params, 5e-4);
        adam.step(&params).unwrap();
        let after = param.to_vec();
        assert!(before
            .iter()
            .zip(&after)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn adam_identical_runs_update_identically() {
        let build = || Tensor::param(1, 3, vec![0.1f64, 0.2, 0.3]).unwrap();
        let (a, b) = (build(), build());
        let pa = vec![("p".to_string(), a.clone())];
        let pb = vec![("p".to_string(), b.clone())];
        let (mut oa, mut ob) = (Adam::new(&pa, 1e-3), Adam::new(&pb, 1e-3));
        for step in 0..5 {
            let g = vec![0.3 * (step as f64 + 1.0); 3];
            a.accumulate_grad(&g);
            b.accumulate_grad(&g);
            oa.step(&pa).unwrap();
            ob.step(&pb).unwrap();
            a.zero_grad();
            b.zero_grad();
        }
        assert_eq!(a.to_vec(), b.to_vec());
    }

    fn tiny_dataset(seed: u64, sequences: usize, frames: usize) -> Vec<(Tensor<f32>, Vec<usize>)> {
        // two well-separated class means in 4-d
        let mut r = rng(seed);
        let means = [[2.0f32, 2.0, -2.0, -2.0], [-2.0, -2.0, 2.0, 2.0]];
        (0..sequences)
            .map(|_| {
                let mut labels = Vec::with_capacity(frames);
                let mut values = Vec::with_capacity(frames * 4);
                let mut label = r.random_range(0..2usize);
                for t in 0..frames {
                    if t % 10 == 0 && t > 0 {
                        label = 1 - label;
                    }
                    labels.push(label);
                    for c in 0..4 {
                        values.push(means[label][c] + 0.3 * (r.random::<f32>() - 0.5));
                    }
                }
                (Tensor::from_vec(frames, 4, values).unwrap(), labels)
            })
            .collect()
    }

    fn tiny_model(seed: u64) -> Model<f32> {
        let config = ModelConfig {
            num_blocks: 3,
            num_decoders: 1,
            feature_dim: 4,
            model_dim: 8,
            num_classes: 2,
            input_dropout: 0.1,
            ..ModelConfig::new(4, 2)
        };
        Model::init(config, &mut rng(seed)).unwrap()
    }

    #[test]
    fn fit_rejects_empty_and_mismatched_data() {
        let model = tiny_model(1);
        let mut r = rng(2);
        assert!(matches!(
            fit(&model, &[], &TrainConfig::default(), &mut r),
            Err(TrainError::EmptyDataset)
        ));
        let features = Tensor::<f32>::zeros(5, 4);
        let bad = vec![(features, vec![0usize; 4])];
        assert!(matches!(
            fit(&model, &bad, &TrainConfig::default(), &mut r),
            Err(TrainError::LabelCountMismatch { index: 0, frames: 5, labels: 4 })
        ));
    }

    #[test]
    fn fit_zero_epochs_leaves_weights_untouched() {
        let model = tiny_model(3);
        let before: Vec<Vec<f32>> = model.parameters().iter().map(|(_, p)| p.to_vec()).collect();
        let dataset = tiny_dataset(4, 2, 30);
        let config = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let log = fit(&model, &dataset, &config, &mut rng(5)).unwrap();
        assert!(log.is_empty());
        for ((_, p), b) in model.parameters().iter().zip(&before) {
            let now = p.to_vec();
            assert!(now.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn fit_loss_trends_down() {
        let model = tiny_model(6);
        let dataset = tiny_dataset(7, 3, 40);
        let config = TrainConfig {
            epochs: 30,
            learning_rate: 1e-3,
        };
        let log = fit(&model, &dataset, &config, &mut rng(8)).unwrap();
        assert_eq!(log.len(), 30);
        // non-increasing over 10-epoch windows, not per step
        let window = |range: std::ops::Range<usize>| {
            log[range].iter().map(|e| e.total_loss).sum::<f64>() / 10.0
        };
        let (w0, w1, w2) = (window(0..10), window(10..20), window(20..30));
        assert!(w1 <= w0, "{w0} -> {w1}");
        assert!(w2 <= w1, "{w1} -> {w2}");
        for stats in &log {
            assert!(stats.total_loss >= 0.0);
            assert!(stats.cls_loss >= 0.0);
            assert!(stats.smo_loss >= 0.0);
        }
    }

    #[test]
    fn fit_same_seed_identical_curves() {
        let run = || {
            let model = tiny_model(9);
            let dataset = tiny_dataset(10, 2, 30);
            let config = TrainConfig {
                epochs: 5,
                learning_rate: 1e-3,
            };
            fit(&model, &dataset, &config, &mut rng(11)).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
    }
}
