//! Attacker knowledge levels as distinct types.
//!
//! [`WhiteBoxOracle`] exposes losses, logits and input gradients.
//! [`ScoreOracle`] exposes output probabilities only and counts every
//! query. [`DecisionOracle`] exposes hard labels only. An attack
//! written against [`ScoreAccess`] cannot reach gradients by
//! construction.

use crate::error::{Error, Result};
use crate::models::{argmax, Model};
use crate::tensor::{Tape, Tensor};
use crate::{derive_rng, Rng};
use ndarray::{Array1, Array3, Axis};
use std::cell::Cell;

/// White-box access: loss values and input gradients.
pub trait GradientAccess {
    fn classes(&self) -> usize;

    /// Cross-entropy loss at `(x, y)` and its gradient w.r.t. `x`.
    fn loss_and_grad(&self, x: &Array3<f64>, y: usize) -> Result<(f64, Array3<f64>)>;

    /// Logits at `x` and the input gradient of every class logit.
    fn logits_and_grads(&self, x: &Array3<f64>) -> Result<(Array1<f64>, Vec<Array3<f64>>)>;

    fn predicted_label(&self, x: &Array3<f64>) -> Result<usize>;

    /// Margin `z_y - max_{j != y} z_j` and its input gradient.
    /// Negative margin means `x` is already misclassified.
    fn margin_and_grad(&self, x: &Array3<f64>, y: usize) -> Result<(f64, Array3<f64>)> {
        let (logits, grads) = self.logits_and_grads(x)?;
        if y >= logits.len() {
            return Err(Error::InvalidLabel { label: y, classes: logits.len() });
        }
        let mut runner_up = None;
        for j in 0..logits.len() {
            if j == y {
                continue;
            }
            match runner_up {
                None => runner_up = Some(j),
                Some(r) if logits[j] > logits[r] => runner_up = Some(j),
                _ => {}
            }
        }
        let j = runner_up.ok_or_else(|| Error::InvalidParam("margin needs >= 2 classes".into()))?;
        Ok((logits[y] - logits[j], &grads[y] - &grads[j]))
    }
}

/// Score-based black-box access: output probabilities only.
/// Every probability lookup counts as one attacker query.
pub trait ScoreAccess {
    fn classes(&self) -> usize;

    /// Mean predictive distribution at `x`; increments the query count.
    fn probabilities(&self, x: &Array3<f64>) -> Result<Array1<f64>>;

    fn queries(&self) -> usize;

    /// Predicted label for scoring an attack's outcome; this is the
    /// evaluator's check, not an attacker query, and is not counted.
    fn evaluation_label(&self, x: &Array3<f64>) -> Result<usize>;

    /// Cross-entropy of the predictive distribution; one query.
    fn cross_entropy(&self, x: &Array3<f64>, y: usize) -> Result<f64> {
        let p = self.probabilities(x)?;
        if y >= p.len() {
            return Err(Error::InvalidLabel { label: y, classes: p.len() });
        }
        Ok(-(p[y].max(1e-300)).ln())
    }
}

/// Decision-based black-box access: hard labels only.
pub trait DecisionAccess {
    fn classes(&self) -> usize;
    /// Predicted label at `x`; increments the query count.
    fn label(&self, x: &Array3<f64>) -> Result<usize>;
    fn queries(&self) -> usize;
}

/// Full-knowledge view of a fixed model. Stochastic models are
/// attacked through `mc_samples`-sample Monte Carlo estimates; the
/// noise stream is derived from `seed` per call, so an oracle's call
/// sequence is reproducible.
pub struct WhiteBoxOracle<'m> {
    model: &'m Model,
    mc_samples: usize,
    seed: u64,
    calls: Cell<u64>,
}

impl<'m> WhiteBoxOracle<'m> {
    pub fn new(model: &'m Model, mc_samples: usize, seed: u64) -> Self {
        WhiteBoxOracle { model, mc_samples: mc_samples.max(1), seed, calls: Cell::new(0) }
    }

    fn next_rng(&self) -> Rng {
        let id = self.calls.get();
        self.calls.set(id + 1);
        derive_rng(self.seed, id)
    }

    /// Builds a fresh tape with `x` as the only gradient leaf and
    /// returns the per-sample logit tensors (shape `(1, classes)`).
    fn taped_logits(&self, x: &Array3<f64>, rng: &mut Rng) -> Result<(Tensor, Vec<Tensor>)> {
        let tape = Tape::new();
        let leaf = tape.leaf(x.clone().insert_axis(Axis(0)).into_dyn());
        let bound = self.model.bind(None);
        let mut samples = Vec::with_capacity(self.mc_samples);
        for _ in 0..self.mc_samples {
            samples.push(bound.forward(&leaf, rng)?);
        }
        Ok((leaf, samples))
    }

    fn grad_of(leaf: &Tensor, loss: &Tensor) -> Result<Array3<f64>> {
        let grads = loss.backward()?;
        let g = grads
            .get(leaf)?
            .unwrap_or_else(|| ndarray::ArrayD::zeros(leaf.data().raw_dim()));
        let g4 = g.into_dimensionality::<ndarray::Ix4>().expect("input rank 4");
        Ok(g4.index_axis_move(Axis(0), 0).as_standard_layout().to_owned())
    }
}

impl GradientAccess for WhiteBoxOracle<'_> {
    fn classes(&self) -> usize {
        self.model.classes
    }

    fn loss_and_grad(&self, x: &Array3<f64>, y: usize) -> Result<(f64, Array3<f64>)> {
        let mut rng = self.next_rng();
        let (leaf, samples) = self.taped_logits(x, &mut rng)?;
        let mut loss: Option<Tensor> = None;
        for z in &samples {
            let l = z.softmax_cross_entropy(&[y])?;
            loss = Some(match loss {
                Some(acc) => acc.add(&l)?,
                None => l,
            });
        }
        let loss = loss.expect("mc_samples >= 1").scale(1.0 / self.mc_samples as f64);
        let value = loss.scalar()?;
        Ok((value, Self::grad_of(&leaf, &loss)?))
    }

    fn logits_and_grads(&self, x: &Array3<f64>) -> Result<(Array1<f64>, Vec<Array3<f64>>)> {
        // one backward per class; replay the same noise for each so
        // every gradient linearizes the same sampled network
        let base = self.next_rng();
        let k = self.model.classes;
        let mut logits = Array1::zeros(k);
        let mut grads = Vec::with_capacity(k);
        for class in 0..k {
            let mut rng = base.clone();
            let (leaf, samples) = self.taped_logits(x, &mut rng)?;
            let mut onehot = ndarray::Array2::<f64>::zeros((1, k));
            onehot[[0, class]] = 1.0;
            let mask = Tensor::constant(onehot.into_dyn());
            let mut picked: Option<Tensor> = None;
            for z in &samples {
                let zk = z.mul(&mask)?.sum();
                picked = Some(match picked {
                    Some(acc) => acc.add(&zk)?,
                    None => zk,
                });
            }
            let zk = picked.expect("mc_samples >= 1").scale(1.0 / self.mc_samples as f64);
            logits[class] = zk.scalar()?;
            grads.push(Self::grad_of(&leaf, &zk)?);
        }
        Ok((logits, grads))
    }

    fn predicted_label(&self, x: &Array3<f64>) -> Result<usize> {
        let mut rng = self.next_rng();
        let (probs, _) = self.model.predict_mc(&x.view(), self.mc_samples, &mut rng)?;
        Ok(argmax(probs.as_slice().expect("contiguous")))
    }
}

/// Probability-only view of a fixed model with query accounting.
pub struct ScoreOracle<'m> {
    model: &'m Model,
    mc_samples: usize,
    seed: u64,
    calls: Cell<u64>,
    queries: Cell<usize>,
}

impl<'m> ScoreOracle<'m> {
    pub fn new(model: &'m Model, mc_samples: usize, seed: u64) -> Self {
        ScoreOracle { model, mc_samples: mc_samples.max(1), seed, calls: Cell::new(0), queries: Cell::new(0) }
    }

    fn next_rng(&self) -> Rng {
        let id = self.calls.get();
        self.calls.set(id + 1);
        derive_rng(self.seed, id)
    }
}

impl ScoreAccess for ScoreOracle<'_> {
    fn classes(&self) -> usize {
        self.model.classes
    }

    fn probabilities(&self, x: &Array3<f64>) -> Result<Array1<f64>> {
        self.queries.set(self.queries.get() + 1);
        let mut rng = self.next_rng();
        let (probs, _) = self.model.predict_mc(&x.view(), self.mc_samples, &mut rng)?;
        Ok(probs)
    }

    fn queries(&self) -> usize {
        self.queries.get()
    }

    fn evaluation_label(&self, x: &Array3<f64>) -> Result<usize> {
        let mut rng = self.next_rng();
        let (probs, _) = self.model.predict_mc(&x.view(), self.mc_samples, &mut rng)?;
        Ok(argmax(probs.as_slice().expect("contiguous")))
    }
}

/// Hard-label-only view of a fixed model with query accounting.
pub struct DecisionOracle<'m> {
    inner: ScoreOracle<'m>,
}

impl<'m> DecisionOracle<'m> {
    pub fn new(model: &'m Model, mc_samples: usize, seed: u64) -> Self {
        DecisionOracle { inner: ScoreOracle::new(model, mc_samples, seed) }
    }
}

impl DecisionAccess for DecisionOracle<'_> {
    fn classes(&self) -> usize {
        self.inner.classes()
    }

    fn label(&self, x: &Array3<f64>) -> Result<usize> {
        let probs = self.inner.probabilities(x)?;
        Ok(argmax(probs.as_slice().expect("contiguous")))
    }

    fn queries(&self) -> usize {
        self.inner.queries()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_model, LayerSpec, ModelConfig, StochasticMode};
    use crate::tensor::finite_difference_check;
    use crate::variational::{PriorSpec, ViMethod};

    fn tiny_model(seed: u64) -> Model {
        build_model(&ModelConfig {
            layers: vec![
                LayerSpec::Conv2d { filters: 4, kernel: 3, stride: 1, padding: 1 },
                LayerSpec::Dense { units: 3 },
            ],
            stochastic_mode: StochasticMode::Deterministic,
            method: ViMethod::Bbb,
            classes: 3,
            input: (3, 8, 8),
            seed,
            prior: PriorSpec::default(),
        })
        .unwrap()
    }

    fn test_image(seed: u64) -> Array3<f64> {
        let mut rng = crate::derive_rng(seed, 1);
        use rand::Rng as _;
        Array3::from_shape_simple_fn((3, 8, 8), || rng.random_range(0.05..0.95))
    }

    #[test]
    fn white_box_gradient_matches_finite_differences() {
        let model = tiny_model(5);
        let oracle = WhiteBoxOracle::new(&model, 1, 0);
        let x = test_image(2);
        let (_, grad) = oracle.loss_and_grad(&x, 1).unwrap();

        let err = finite_difference_check(
            |t| {
                let x4 = t.data().clone().into_shape_with_order(ndarray::IxDyn(&[1, 3, 8, 8])).unwrap();
                let logits = model
                    .bind(None)
                    .forward(&Tensor::constant(x4), &mut crate::derive_rng(0, 0))?;
                logits.softmax_cross_entropy(&[1])
            },
            &x.clone().into_dyn(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "oracle model loss gradient error {err}");

        // spot-check the oracle grad against one finite difference
        let mut xp = x.clone();
        xp[[0, 3, 3]] += 1e-5;
        let mut xm = x.clone();
        xm[[0, 3, 3]] -= 1e-5;
        let (lp, _) = oracle.loss_and_grad(&xp, 1).unwrap();
        let (lm, _) = oracle.loss_and_grad(&xm, 1).unwrap();
        let fd = (lp - lm) / 2e-5;
        assert!((grad[[0, 3, 3]] - fd).abs() / (fd.abs() + 1e-9) < 1e-3);
    }

    #[test]
    fn logit_gradients_sum_consistency() {
        // d(sum_k z_k)/dx equals the sum of per-class gradients
        let model = tiny_model(6);
        let oracle = WhiteBoxOracle::new(&model, 1, 0);
        let x = test_image(3);
        let (logits, grads) = oracle.logits_and_grads(&x).unwrap();
        assert_eq!(logits.len(), 3);
        assert_eq!(grads.len(), 3);
        let (margin, mg) = oracle.margin_and_grad(&x, 0).unwrap();
        assert!(margin.is_finite());
        // margin grad must equal g_y - g_runner_up for some runner up
        let diff01 = (&grads[0] - &grads[1] - &mg).iter().map(|v| v.abs()).fold(0.0, f64::max);
        let diff02 = (&grads[0] - &grads[2] - &mg).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(diff01 < 1e-12 || diff02 < 1e-12);
    }

    #[test]
    fn score_oracle_counts_queries() {
        let model = tiny_model(7);
        let oracle = ScoreOracle::new(&model, 1, 0);
        let x = test_image(4);
        assert_eq!(oracle.queries(), 0);
        let p = oracle.probabilities(&x).unwrap();
        assert!((p.sum() - 1.0).abs() < 1e-9);
        let _ = oracle.cross_entropy(&x, 0).unwrap();
        assert_eq!(oracle.queries(), 2);
        let _ = oracle.evaluation_label(&x).unwrap();
        assert_eq!(oracle.queries(), 2, "evaluation label is not an attacker query");
    }

    #[test]
    fn decision_oracle_exposes_labels_only() {
        let model = tiny_model(8);
        let oracle = DecisionOracle::new(&model, 1, 0);
        let x = test_image(5);
        let label = oracle.label(&x).unwrap();
        assert!(label < 3);
        assert_eq!(oracle.queries(), 1);
    }
}
