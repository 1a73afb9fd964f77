//! Training objectives: cross-entropy, the feature/prediction conditioning
//! map, the conditional adversarial loss, the metric-constraint loss, and
//! the combined per-step objective.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Probabilities are clamped into this range before every log or division,
/// so saturated softmax/discriminator outputs cannot produce infinities.
pub const PROB_CLAMP_LO: f64 = 1e-12;
pub const PROB_CLAMP_HI: f64 = 1.0 - 1e-12;

/// Combines a feature vector with a predicted class-probability vector for
/// discriminator input. While `feature_dim * prob_dim <= d0` the map is the
/// exact outer product (flattened row-major); above the threshold it is the
/// randomized approximation `(R_f f) ⊙ (R_p p) / sqrt(d_r)` whose inner
/// products match the outer product in expectation. The projection matrices
/// are sampled once per run and persist in checkpoints.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Conditioner<T> {
    pub feature_dim: usize,
    pub prob_dim: usize,
    pub d0: usize,
    pub d_r: usize,
    pub proj_feat: Option<Tensor<T>>,
    pub proj_prob: Option<Tensor<T>>,
}

/// Tape handles for the projection matrices (absent on the outer branch).
#[derive(Clone, Copy, Debug)]
pub struct BoundConditioner {
    pub feat: Option<Var>,
    pub prob: Option<Var>,
}

impl<T: Real> Conditioner<T> {
    pub fn new<R: Rng + ?Sized>(
        feature_dim: usize,
        prob_dim: usize,
        d0: usize,
        d_r: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if feature_dim == 0 || prob_dim == 0 {
            return Err(Error::Shape("conditioner dimensions must be positive".into()));
        }
        if d_r == 0 {
            return Err(Error::Config("d_r must be positive".into()));
        }
        let (proj_feat, proj_prob) = if feature_dim * prob_dim <= d0 {
            (None, None)
        } else {
            // Feature matrix first, then probability matrix, each row-major:
            // the draw order is part of the reproducibility contract.
            let gauss = |rows: usize, rng: &mut R| -> Result<Tensor<T>> {
                let values = (0..rows * d_r).map(|_| T::sample_standard_normal(rng)).collect();
                Tensor::new(vec![rows, d_r], values)
            };
            (Some(gauss(feature_dim, rng)?), Some(gauss(prob_dim, rng)?))
        };
        Ok(Conditioner { feature_dim, prob_dim, d0, d_r, proj_feat, proj_prob })
    }

    /// True while the exact outer-product branch is active. A pure function
    /// of (feature_dim, prob_dim, d0).
    pub fn uses_outer(&self) -> bool {
        self.proj_feat.is_none()
    }

    pub fn output_dim(&self) -> usize {
        if self.uses_outer() {
            self.feature_dim * self.prob_dim
        } else {
            self.d_r
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> BoundConditioner {
        BoundConditioner {
            feat: self.proj_feat.as_ref().map(|t| tape.leaf(t)),
            prob: self.proj_prob.as_ref().map(|t| tape.leaf(t)),
        }
    }

    fn check_prob_rows(&self, rows: &[T], what: &str) -> Result<()> {
        let tol = T::of_f64(1e-6);
        for row in rows.chunks(self.prob_dim) {
            let sum: T = row.iter().cloned().sum();
            if (sum - T::one()).abs() > tol {
                return Err(Error::Numeric(format!(
                    "{what}: probability row sums to {sum}, expected 1"
                )));
            }
        }
        Ok(())
    }

    /// Applies the map to a batch: `f` is `[B, feature_dim]`, `p` is
    /// `[B, prob_dim]` with rows summing to 1.
    pub fn apply(&self, tape: &mut Tape<T>, bound: &BoundConditioner, f: Var, p: Var) -> Result<Var> {
        let fs = tape.shape(f).to_vec();
        let ps = tape.shape(p).to_vec();
        match (fs.as_slice(), ps.as_slice()) {
            ([bf, df], [bp, dp]) if bf == bp && *df == self.feature_dim && *dp == self.prob_dim => {}
            _ => {
                return Err(Error::Shape(format!(
                    "conditioning expects [B, {}] and [B, {}], got {fs:?} and {ps:?}",
                    self.feature_dim, self.prob_dim
                )))
            }
        }
        self.check_prob_rows(tape.values(p), "conditioning input")?;
        if self.uses_outer() {
            tape.row_outer(f, p)
        } else {
            let rf = tape.matmul(f, bound.feat.expect("randomized branch has matrices"))?;
            let rp = tape.matmul(p, bound.prob.expect("randomized branch has matrices"))?;
            let prod = tape.mul(rf, rp)?;
            Ok(tape.scale(prod, T::one() / T::of_usize(self.d_r).sqrt()))
        }
    }

    /// Single-vector version of the map, for diagnostics and oracles.
    pub fn map_vec(&self, f: &[T], p: &[T]) -> Result<Vec<T>> {
        if f.len() != self.feature_dim || p.len() != self.prob_dim {
            return Err(Error::Shape(format!(
                "conditioning expects dims ({}, {}), got ({}, {})",
                self.feature_dim,
                self.prob_dim,
                f.len(),
                p.len()
            )));
        }
        self.check_prob_rows(p, "conditioning input")?;
        if self.uses_outer() {
            let mut out = Vec::with_capacity(f.len() * p.len());
            for &fv in f {
                for &pv in p {
                    out.push(fv * pv);
                }
            }
            Ok(out)
        } else {
            let rf = self.proj_feat.as_ref().expect("randomized branch has matrices");
            let rp = self.proj_prob.as_ref().expect("randomized branch has matrices");
            let scale = T::one() / T::of_usize(self.d_r).sqrt();
            let mut out = vec![T::zero(); self.d_r];
            for (k, o) in out.iter_mut().enumerate() {
                let mut uf = T::zero();
                for (i, &fv) in f.iter().enumerate() {
                    uf = uf + fv * rf.values()[i * self.d_r + k];
                }
                let mut up = T::zero();
                for (j, &pv) in p.iter().enumerate() {
                    up = up + pv * rp.values()[j * self.d_r + k];
                }
                *o = uf * up * scale;
            }
            Ok(out)
        }
    }
}

fn clamp_probs<T: Real>(tape: &mut Tape<T>, v: Var) -> Result<Var> {
    tape.clamp(v, T::of_f64(PROB_CLAMP_LO), T::of_f64(PROB_CLAMP_HI))
}

/// Mean negative log-probability of the true class:
/// `-(1/B) Σ log softmax(logits)[label]`.
pub fn cross_entropy<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    let [b, c] = shape.as_slice() else {
        return Err(Error::Shape(format!("logits must be 2-D, got {shape:?}")));
    };
    if labels.len() != *b {
        return Err(Error::Shape(format!(
            "{} labels for a batch of {b}",
            labels.len()
        )));
    }
    let mut one_hot = vec![T::zero(); b * c];
    for (i, &label) in labels.iter().enumerate() {
        if label >= *c {
            return Err(Error::Data(format!(
                "label {label} out of range for {c} classes"
            )));
        }
        one_hot[i * c + label] = T::one();
    }
    let sm = tape.softmax_rows(logits)?;
    let clamped = clamp_probs(tape, sm)?;
    let lg = tape.log(clamped)?;
    let mask = tape.constant(vec![*b, *c], one_hot)?;
    let picked = tape.mul(lg, mask)?;
    let total = tape.sum_all(picked);
    Ok(tape.scale(total, -T::one() / T::of_usize(*b)))
}

/// Conditional adversarial loss over discriminator outputs:
/// `-mean log(1 - d_source) - mean log(d_target)`. Outputs are clamped into
/// the open unit interval first. Zero only at perfect discrimination.
pub fn adversarial_domain_loss<T: Real>(
    tape: &mut Tape<T>,
    d_source: Var,
    d_target: Var,
) -> Result<Var> {
    for (v, what) in [(d_source, "source"), (d_target, "target")] {
        match tape.shape(v) {
            [_, 1] => {}
            other => {
                return Err(Error::Shape(format!(
                    "{what} discriminator outputs must be [B, 1], got {other:?}"
                )))
            }
        }
    }
    let neg_src = tape.neg(d_source);
    let one_minus = tape.add_scalar(neg_src, T::one());
    let one_minus = clamp_probs(tape, one_minus)?;
    let log_src = tape.log(one_minus)?;
    let mean_src = tape.mean_all(log_src);

    let d_tgt = clamp_probs(tape, d_target)?;
    let log_tgt = tape.log(d_tgt)?;
    let mean_tgt = tape.mean_all(log_tgt);

    let s = tape.add(mean_src, mean_tgt)?;
    Ok(tape.neg(s))
}

/// Metric-constraint loss. With `D` the pairwise squared distances and
/// `Trm = (1/B) Σ_{m<n} D[m,n]`, the loss is the log-ratio of summed
/// `exp(-D/Trm)` over cross-class pairs to within-class pairs. The
/// implementation sums ordered pairs; the doubling cancels in the ratio and
/// `Trm` uses `sum/2B`. Gradients flow through `Trm`.
///
/// Returns `None` when the batch has no within-class pair, no cross-class
/// pair, or all features identical (`Trm = 0`); callers count skips.
pub fn mc_loss<T: Real>(tape: &mut Tape<T>, features: Var, labels: &[usize]) -> Result<Option<Var>> {
    let shape = tape.shape(features).to_vec();
    let [b, _d] = shape.as_slice() else {
        return Err(Error::Shape(format!("features must be 2-D, got {shape:?}")));
    };
    if labels.len() != *b {
        return Err(Error::Shape(format!(
            "{} labels for a batch of {b}",
            labels.len()
        )));
    }
    let mut n_within = 0usize;
    let mut n_cross = 0usize;
    for m in 0..*b {
        for n in (m + 1)..*b {
            if labels[m] == labels[n] {
                n_within += 1;
            } else {
                n_cross += 1;
            }
        }
    }
    if n_within == 0 || n_cross == 0 {
        return Ok(None);
    }

    let dist = tape.pairwise_sqdist(features)?;
    let total = tape.sum_all(dist);
    let norm = tape.scale(total, T::one() / (T::of_f64(2.0) * T::of_usize(*b)));
    if !(tape.scalar_value(norm)? > T::zero()) {
        return Ok(None);
    }

    let mut within_mask = vec![T::zero(); b * b];
    let mut cross_mask = vec![T::zero(); b * b];
    for m in 0..*b {
        for n in 0..*b {
            if m == n {
                continue;
            }
            if labels[m] == labels[n] {
                within_mask[m * b + n] = T::one();
            } else {
                cross_mask[m * b + n] = T::one();
            }
        }
    }

    let ratio = tape.div(dist, norm)?;
    let neg = tape.neg(ratio);
    let kernel = tape.exp(neg);
    let wm = tape.constant(vec![*b, *b], within_mask)?;
    let cm = tape.constant(vec![*b, *b], cross_mask)?;
    let within_kernel = tape.mul(kernel, wm)?;
    let cross_kernel = tape.mul(kernel, cm)?;
    let within_sum = tape.sum_all(within_kernel);
    let cross_sum = tape.sum_all(cross_kernel);
    let log_cross = tape.log(cross_sum)?;
    let log_within = tape.log(within_sum)?;
    Ok(Some(tape.sub(log_cross, log_within)?))
}

/// The single scalar each step minimizes:
/// `cls + adv + lambda * mc`, where `adv` is already routed through a
/// gradient reversal layer whose coefficient carries the schedule weight.
/// Descending it trains the discriminator at full rate on its own loss,
/// pushes the extractor to confuse the discriminator at strength λ (the
/// reversal scales as it negates), and keeps classification and the metric
/// constraint as plain minimizations. At the schedule origin (λ = 0) the
/// regularizers are dropped structurally, so the first step is pure
/// classification. `adv`/`mc` are optional so skipped or disabled terms
/// vanish structurally.
pub fn stage_objective<T: Real>(
    tape: &mut Tape<T>,
    cls: Var,
    adv: Option<Var>,
    mc: Option<Var>,
    lambda: T,
) -> Result<Var> {
    if lambda < T::zero() {
        return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    if lambda == T::zero() {
        return Ok(cls);
    }
    let mut total = cls;
    if let Some(a) = adv {
        total = tape.add(total, a)?;
    }
    if let Some(m) = mc {
        let scaled = tape.scale(m, lambda);
        total = tape.add(total, scaled)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grl;
    use crate::rng::stream;

    fn tensor2(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    mod conditioner {
        use super::*;

        #[test]
        fn outer_branch_matches_hand_example() {
            let mut rng = stream(0, "phi");
            let c = Conditioner::<f64>::new(3, 2, 4096, 1024, &mut rng).unwrap();
            assert!(c.uses_outer());
            let out = c.map_vec(&[1.0, 0.0, 2.0], &[0.5, 0.5]).unwrap();
            assert_eq!(out, vec![0.5, 0.5, 0.0, 0.0, 1.0, 1.0]);
        }

        #[test]
        fn branch_selection_is_pure_in_dims() {
            let mut rng = stream(0, "phi");
            // 64 * 10 = 640 <= 4096.
            assert!(Conditioner::<f64>::new(64, 10, 4096, 64, &mut rng).unwrap().uses_outer());
            // 512 * 10 = 5120 > 4096.
            let c = Conditioner::<f64>::new(512, 10, 4096, 64, &mut rng).unwrap();
            assert!(!c.uses_outer());
            assert_eq!(c.output_dim(), 64);
            // Boundary: 4096 * 1 = 4096 is still outer.
            assert!(Conditioner::<f64>::new(4096, 1, 4096, 64, &mut rng).unwrap().uses_outer());
        }

        #[test]
        fn probability_rows_are_validated() {
            let mut rng = stream(0, "phi");
            let c = Conditioner::<f64>::new(2, 2, 4096, 8, &mut rng).unwrap();
            assert!(c.map_vec(&[1.0, 2.0], &[0.7, 0.3]).is_ok());
            assert!(c.map_vec(&[1.0, 2.0], &[0.7, 0.7]).is_err());
        }

        #[test]
        fn batch_apply_matches_vector_map() {
            let mut rng = stream(3, "phi");
            let c = Conditioner::<f64>::new(3, 2, 0, 8, &mut rng).unwrap();
            assert!(!c.uses_outer());
            let f = tensor2(&[vec![0.5, -1.0, 2.0], vec![1.0, 1.0, 0.0]]);
            let p = tensor2(&[vec![0.9, 0.1], vec![0.4, 0.6]]);
            let mut tape = Tape::new();
            let bound = c.bind(&mut tape);
            let fv = tape.leaf(&f);
            let pv = tape.leaf(&p);
            let phi = c.apply(&mut tape, &bound, fv, pv).unwrap();
            assert_eq!(tape.shape(phi), &[2, 8]);
            for (row, out) in tape.values(phi).chunks(8).enumerate() {
                let expect = c
                    .map_vec(
                        &f.values()[row * 3..(row + 1) * 3],
                        &p.values()[row * 2..(row + 1) * 2],
                    )
                    .unwrap();
                for (a, b) in out.iter().zip(&expect) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn randomized_inner_product_is_unbiased() {
            // E over fresh matrices of <phi(f,p), phi(f',p')> approximates
            // <f,f'> * <p,p'>. Small resample count here; the acceptance
            // suite runs the full 10^4 version.
            let f1 = [1.0, 2.0, -1.0];
            let f2 = [0.5, -1.0, 2.0];
            let p1 = [0.7, 0.2, 0.1];
            let p2 = [0.5, 0.3, 0.2];
            let expect = (0.5 - 2.0 - 2.0) * (0.35 + 0.06 + 0.02);
            let draws = 4000;
            let mut mean = 0.0;
            for i in 0..draws {
                let mut rng = stream(i as u64, "phi-mc-test");
                let c = Conditioner::<f64>::new(3, 3, 0, 64, &mut rng).unwrap();
                let a = c.map_vec(&f1, &p1).unwrap();
                let b = c.map_vec(&f2, &p2).unwrap();
                mean += a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>();
            }
            mean /= draws as f64;
            let rel = (mean - expect).abs() / expect.abs();
            assert!(rel < 0.10, "relative deviation {rel}, mean {mean}, expect {expect}");
        }
    }

    mod ce {
        use super::*;

        #[test]
        fn perfect_prediction_is_near_zero() {
            let mut tape = Tape::new();
            let logits = tape.leaf(&tensor2(&[vec![100.0, 0.0]]).with_grad());
            let loss = cross_entropy(&mut tape, logits, &[0]).unwrap();
            assert!(tape.scalar_value(loss).unwrap().abs() < 1e-9);
        }

        #[test]
        fn uniform_prediction_is_ln_two() {
            let mut tape = Tape::new();
            let logits = tape.leaf(&tensor2(&[vec![0.0, 0.0]]).with_grad());
            let loss = cross_entropy(&mut tape, logits, &[1]).unwrap();
            assert!((tape.scalar_value(loss).unwrap() - 2f64.ln()).abs() < 1e-12);
        }

        #[test]
        fn matches_per_sample_loop_oracle() {
            let mut rng = stream(11, "ce-oracle");
            use rand::Rng;
            let rows: Vec<Vec<f64>> =
                (0..4).map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
            let labels = [2usize, 0, 1, 0];
            let mut oracle = 0.0;
            for (row, &label) in rows.iter().zip(&labels) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                let p = (exps[label] / z).clamp(PROB_CLAMP_LO, PROB_CLAMP_HI);
                oracle -= p.ln();
            }
            oracle /= 4.0;
            let mut tape = Tape::new();
            let logits = tape.leaf(&tensor2(&rows).with_grad());
            let loss = cross_entropy(&mut tape, logits, &labels).unwrap();
            assert!((tape.scalar_value(loss).unwrap() - oracle).abs() < 1e-12);
        }

        #[test]
        fn out_of_range_label_rejected() {
            let mut tape = Tape::new();
            let logits = tape.leaf(&tensor2(&[vec![0.0, 0.0]]));
            assert!(cross_entropy(&mut tape, logits, &[2]).is_err());
        }

        #[test]
        fn gradient_passes_check() {
            let logits = tensor2(&[vec![0.4, -0.9, 0.3], vec![-0.1, 0.8, 0.2]]);
            let err = crate::autodiff::grad_check(
                |tape, vars| cross_entropy(tape, vars[0], &[1, 2]),
                &[logits],
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-4, "relative error {err}");
        }
    }

    mod adv {
        use super::*;

        fn col(vals: &[f64]) -> Tensor<f64> {
            Tensor::from_rows(&vals.iter().map(|v| vec![*v]).collect::<Vec<_>>()).unwrap()
        }

        #[test]
        fn maximal_confusion_is_two_ln_two() {
            let mut tape = Tape::new();
            let ds = tape.leaf(&col(&[0.5]).with_grad());
            let dt = tape.leaf(&col(&[0.5]).with_grad());
            let loss = adversarial_domain_loss(&mut tape, ds, dt).unwrap();
            assert!((tape.scalar_value(loss).unwrap() - 2.0 * 2f64.ln()).abs() < 1e-12);
        }

        #[test]
        fn perfect_discrimination_is_zero() {
            let mut tape = Tape::new();
            let ds = tape.leaf(&col(&[0.0]));
            let dt = tape.leaf(&col(&[1.0]));
            let loss = adversarial_domain_loss(&mut tape, ds, dt).unwrap();
            assert!(tape.scalar_value(loss).unwrap().abs() < 1e-9);
        }

        #[test]
        fn arithmetic_oracle() {
            let mut tape = Tape::new();
            let ds = tape.leaf(&col(&[0.2, 0.4]).with_grad());
            let dt = tape.leaf(&col(&[0.9]).with_grad());
            let loss = adversarial_domain_loss(&mut tape, ds, dt).unwrap();
            let oracle = -(0.8f64.ln() + 0.6f64.ln()) / 2.0 - 0.9f64.ln();
            let got = tape.scalar_value(loss).unwrap();
            assert!((got - oracle).abs() < 1e-12);
            assert!((got - 0.4724).abs() < 1e-3);
        }

        #[test]
        fn loss_is_nonnegative() {
            let mut rng = stream(5, "adv-prop");
            use rand::Rng;
            for _ in 0..50 {
                let ds: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();
                let dt: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
                let mut tape = Tape::new();
                let dsv = tape.leaf(&col(&ds));
                let dtv = tape.leaf(&col(&dt));
                let loss = adversarial_domain_loss(&mut tape, dsv, dtv).unwrap();
                assert!(tape.scalar_value(loss).unwrap() >= -1e-12);
            }
        }

        #[test]
        fn gradient_passes_check() {
            // Keep outputs away from the clamp boundaries so the finite
            // difference stays inside the differentiable region.
            let ds = col(&[0.3, 0.6, 0.2]);
            let dt = col(&[0.7, 0.4]);
            let err = crate::autodiff::grad_check(
                |tape, vars| adversarial_domain_loss(tape, vars[0], vars[1]),
                &[ds, dt],
                1e-6,
            )
            .unwrap();
            assert!(err <= 1e-4, "relative error {err}");
        }
    }

    mod mc {
        use super::*;

        /// Unordered-pair reference implementation, straight from the
        /// definition.
        pub fn oracle(features: &[Vec<f64>], labels: &[usize]) -> Option<f64> {
            let b = features.len();
            let mut t = 0.0;
            let mut pairs = Vec::new();
            for m in 0..b {
                for n in (m + 1)..b {
                    let d: f64 = features[m]
                        .iter()
                        .zip(&features[n])
                        .map(|(a, z)| (a - z) * (a - z))
                        .sum();
                    t += d;
                    pairs.push((d, labels[m] == labels[n]));
                }
            }
            t /= b as f64;
            if t <= 0.0 {
                return None;
            }
            let within: f64 =
                pairs.iter().filter(|(_, w)| *w).map(|(d, _)| (-d / t).exp()).sum();
            let cross: f64 =
                pairs.iter().filter(|(_, w)| !*w).map(|(d, _)| (-d / t).exp()).sum();
            if within == 0.0 || cross == 0.0 {
                return None;
            }
            Some((cross / within).ln())
        }

        fn eval(features: &[Vec<f64>], labels: &[usize]) -> Option<f64> {
            let mut tape = Tape::new();
            let f = tape.leaf(&tensor2(features).with_grad());
            mc_loss(&mut tape, f, labels)
                .unwrap()
                .map(|v| tape.scalar_value(v).unwrap())
        }

        #[test]
        fn worked_example_two_classes() {
            // 1-D features: class 0 at {0, 0}, class 1 at {1, 1}.
            // T = (0+0+1+1+1+1)/4 = 1; loss = ln(4 e^{-1} / 2) = ln 2 - 1.
            let features = vec![vec![0.0], vec![0.0], vec![1.0], vec![1.0]];
            let labels = [0, 0, 1, 1];
            let got = eval(&features, &labels).unwrap();
            let expect = 2f64.ln() - 1.0;
            assert!((got - expect).abs() < 1e-12, "got {got}, expect {expect}");
            assert!((got - -0.3069).abs() < 1e-3);
            let reference = oracle(&features, &labels).unwrap();
            assert!((got - reference).abs() < 1e-12);
        }

        #[test]
        fn equal_distances_reduce_to_pair_count_ratio() {
            // Equilateral triangle in 2-D, two classes: all three pairwise
            // distances equal, one within pair (the duplicate class) and two
            // cross pairs -> loss = ln(2/1).
            let s3 = 3f64.sqrt() / 2.0;
            let features = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.5, s3]];
            let labels = [0, 0, 1];
            let got = eval(&features, &labels).unwrap();
            assert!((got - 2f64.ln()).abs() < 1e-12);
        }

        #[test]
        fn matches_loop_oracle_on_random_batches() {
            use rand::Rng;
            for seed in 0..20 {
                let mut rng = stream(seed, "mc-oracle");
                let features: Vec<Vec<f64>> = (0..8)
                    .map(|_| (0..4).map(|_| rng.random_range(-3.0..3.0)).collect())
                    .collect();
                let labels: Vec<usize> = (0..8).map(|_| rng.random_range(0..3)).collect();
                match (eval(&features, &labels), oracle(&features, &labels)) {
                    (Some(got), Some(want)) => {
                        assert!((got - want).abs() < 1e-10, "seed {seed}: {got} vs {want}")
                    }
                    (None, None) => {}
                    other => panic!("seed {seed}: skip disagreement {other:?}"),
                }
            }
        }

        #[test]
        fn scale_invariant() {
            let features = vec![
                vec![0.3, -1.2],
                vec![2.0, 0.4],
                vec![-0.5, 0.9],
                vec![1.1, 1.1],
            ];
            let labels = [0, 1, 0, 1];
            let base = eval(&features, &labels).unwrap();
            for c in [0.1, 10.0] {
                let scaled: Vec<Vec<f64>> =
                    features.iter().map(|r| r.iter().map(|v| v * c).collect()).collect();
                let got = eval(&scaled, &labels).unwrap();
                assert!((got - base).abs() < 1e-10, "c={c}: {got} vs {base}");
            }
        }

        #[test]
        fn moving_cross_pair_apart_decreases_loss() {
            let near = vec![vec![0.0, 0.0], vec![0.1, 0.0], vec![1.0, 0.0], vec![1.1, 0.0]];
            let labels = [0, 0, 1, 1];
            let base = eval(&near, &labels).unwrap();
            let mut far = near.clone();
            far[2][0] += 2.0;
            far[3][0] += 2.0;
            let moved = eval(&far, &labels).unwrap();
            assert!(moved < base, "moved {moved} >= base {base}");
        }

        #[test]
        fn degenerate_batches_skip() {
            // Single class: no cross pair.
            assert!(eval(&[vec![0.0], vec![1.0]], &[0, 0]).is_none());
            // All classes distinct: no within pair.
            assert!(eval(&[vec![0.0], vec![1.0]], &[0, 1]).is_none());
            // All features identical: T = 0.
            assert!(eval(&[vec![2.0], vec![2.0], vec![2.0], vec![2.0]], &[0, 0, 1, 1]).is_none());
        }

        #[test]
        fn gradient_passes_check() {
            let features = tensor2(&[
                vec![0.5, -0.2, 1.0],
                vec![-1.0, 0.3, 0.1],
                vec![0.2, 0.8, -0.5],
                vec![1.2, -0.4, 0.6],
                vec![-0.3, -0.9, 0.2],
                vec![0.7, 0.1, -1.1],
            ]);
            let labels = [0usize, 1, 0, 2, 1, 2];
            let err = crate::autodiff::grad_check(
                |tape, vars| {
                    mc_loss(tape, vars[0], &labels)?
                        .ok_or_else(|| Error::Numeric("unexpected skip".into()))
                },
                &[features],
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-4, "relative error {err}");
        }
    }

    mod objective {
        use super::*;

        #[test]
        fn lambda_zero_equals_cls_exactly() {
            let mut tape = Tape::new();
            let cls = tape.leaf(&Tensor::scalar(0.73).with_grad());
            let adv = tape.leaf(&Tensor::scalar(1.9).with_grad());
            let mc = tape.leaf(&Tensor::scalar(-0.4).with_grad());
            let total = stage_objective(&mut tape, cls, Some(adv), Some(mc), 0.0).unwrap();
            assert_eq!(tape.scalar_value(total).unwrap(), 0.73);
        }

        #[test]
        fn negative_lambda_rejected() {
            let mut tape = Tape::new();
            let cls = tape.leaf(&Tensor::scalar(1.0));
            assert!(stage_objective(&mut tape, cls, None, None, -0.1).is_err());
        }

        /// Discriminator parameters: the objective's gradient equals the
        /// plain adversarial gradient (the reversal sits below the
        /// discriminator input, not above it).
        #[test]
        fn discriminator_gradient_matches_plain_adversarial() {
            let w = tensor2(&[vec![0.4], vec![-0.7]]);
            let phi_s = tensor2(&[vec![0.5, 1.0], vec![-0.3, 0.2]]);
            let phi_t = tensor2(&[vec![1.5, -0.4], vec![0.1, 0.8]]);

            let run = |with_objective: bool| -> Vec<f64> {
                let mut tape = Tape::new();
                let wv = tape.leaf(&w.clone().with_grad());
                let fs = tape.leaf(&phi_s);
                let ft = tape.leaf(&phi_t);
                let rs = grl(&mut tape, fs, 1.0).unwrap();
                let rt = grl(&mut tape, ft, 1.0).unwrap();
                let ls = tape.matmul(rs, wv).unwrap();
                let lt = tape.matmul(rt, wv).unwrap();
                let ds = tape.sigmoid(ls);
                let dt = tape.sigmoid(lt);
                let adv = adversarial_domain_loss(&mut tape, ds, dt).unwrap();
                let loss = if with_objective {
                    let cls = tape.constant_scalar(0.37);
                    stage_objective(&mut tape, cls, Some(adv), None, 1.0).unwrap()
                } else {
                    adv
                };
                tape.backward(loss).unwrap().get(wv).unwrap().to_vec()
            };

            let from_objective = run(true);
            let plain = run(false);
            for (a, b) in from_objective.iter().zip(&plain) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }

        /// Extractor parameters: routing through the reversal makes the
        /// adversarial gradient exactly the negation of the non-reversed
        /// one.
        #[test]
        fn extractor_gradient_is_reversed() {
            let wg = tensor2(&[vec![0.6, -0.2], vec![0.3, 0.9]]);
            let x_s = tensor2(&[vec![0.5, 1.0], vec![-0.3, 0.2]]);
            let x_t = tensor2(&[vec![1.5, -0.4], vec![0.1, 0.8]]);
            let wd = tensor2(&[vec![0.4], vec![-0.7]]);

            let run = |reversed: bool| -> Vec<f64> {
                let mut tape = Tape::new();
                let wgv = tape.leaf(&wg.clone().with_grad());
                let wdv = tape.leaf(&wd); // discriminator frozen
                let xs = tape.leaf(&x_s);
                let xt = tape.leaf(&x_t);
                let fs = tape.matmul(xs, wgv).unwrap();
                let ft = tape.matmul(xt, wgv).unwrap();
                let (fs, ft) = if reversed {
                    (grl(&mut tape, fs, 1.0).unwrap(), grl(&mut tape, ft, 1.0).unwrap())
                } else {
                    (fs, ft)
                };
                let ds = tape.matmul(fs, wdv).unwrap();
                let dt = tape.matmul(ft, wdv).unwrap();
                let ds = tape.sigmoid(ds);
                let dt = tape.sigmoid(dt);
                let adv = adversarial_domain_loss(&mut tape, ds, dt).unwrap();
                tape.backward(adv).unwrap().get(wgv).unwrap().to_vec()
            };

            let reversed = run(true);
            let plain = run(false);
            for (a, b) in reversed.iter().zip(&plain) {
                assert!((a + b).abs() < 1e-12, "{a} is not -({b})");
            }
        }

        /// Full objective over a miniature two-branch graph. A plain finite
        /// difference cannot see the reversal (its forward is the identity),
        /// so the check is blockwise: parameters downstream of the reversal
        /// (discriminator) or outside the adversarial path (classifier) are
        /// checked against the real forward, while extractor parameters are
        /// checked against a surrogate with the adversarial term subtracted
        /// instead of reversed — precisely the function whose derivative
        /// the real backward computes for that block.
        #[test]
        fn gradient_passes_check_end_to_end() {
            let wg = tensor2(&[vec![0.6, -0.2], vec![0.3, 0.9]]);
            let wd = tensor2(&[vec![0.4], vec![-0.7]]);
            let wc = tensor2(&[vec![0.2, -0.5], vec![0.8, 0.1]]);
            let x_s = tensor2(&[vec![0.5, 1.0], vec![-0.3, 0.2], vec![0.9, -0.9]]);
            let x_t = tensor2(&[vec![1.5, -0.4], vec![0.1, 0.8]]);
            let labels = [0usize, 1, 0];
            let lambda = 0.7;

            // adv_mode: 0 = reversed (the real graph), 1 = added plainly,
            // -1 = subtracted (surrogate for extractor parameters).
            let build = |adv_mode: i32| {
                let x_s = x_s.clone();
                let x_t = x_t.clone();
                move |tape: &mut Tape<f64>, vars: &[Var]| -> Result<Var> {
                    let (wgv, wdv, wcv) = (vars[0], vars[1], vars[2]);
                    let xs = tape.leaf(&x_s);
                    let xt = tape.leaf(&x_t);
                    let fs = tape.matmul(xs, wgv)?;
                    let ft = tape.matmul(xt, wgv)?;
                    let logits = tape.matmul(fs, wcv)?;
                    let cls = cross_entropy(tape, logits, &labels)?;
                    let mc = mc_loss(tape, fs, &labels)?;
                    let (is, it) = if adv_mode == 0 {
                        (grl(tape, fs, 1.0)?, grl(tape, ft, 1.0)?)
                    } else {
                        (fs, ft)
                    };
                    let ds = tape.matmul(is, wdv)?;
                    let dt = tape.matmul(it, wdv)?;
                    let ds = tape.sigmoid(ds);
                    let dt = tape.sigmoid(dt);
                    let adv = adversarial_domain_loss(tape, ds, dt)?;
                    if adv_mode < 0 {
                        let partial = stage_objective(tape, cls, None, mc, lambda)?;
                        tape.sub(partial, adv)
                    } else {
                        stage_objective(tape, cls, Some(adv), mc, lambda)
                    }
                }
            };

            let inputs = [wg, wd, wc];
            let err_downstream = crate::autodiff::grad_check_against(
                build(0),
                build(1),
                &inputs,
                1e-5,
                &[1, 2],
            )
            .unwrap();
            assert!(err_downstream <= 1e-4, "relative error {err_downstream}");
            let err_extractor = crate::autodiff::grad_check_against(
                build(0),
                build(-1),
                &inputs,
                1e-5,
                &[0],
            )
            .unwrap();
            assert!(err_extractor <= 1e-4, "relative error {err_extractor}");
        }
    }
}
