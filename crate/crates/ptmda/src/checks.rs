//! Seeded gradient-check battery. Every loss family and normalization
//! layer is checked against central finite differences on small random
//! instances; graphs containing the gradient reversal are checked
//! blockwise against surrogate builds whose true derivatives equal what
//! the reversed graph's backward pass is meant to produce.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_check, grad_check_against, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::losses::{adversarial_domain_loss, cross_entropy, mc_loss, stage_objective, Conditioner};
use crate::nn::{grl, BnLayer, BoundNorm, MnLayer};
use crate::rng::stream;

/// Maximum relative error any family may reach.
pub const GRADCHECK_TOL: f64 = 1e-4;

const FD_EPS: f64 = 1e-5;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FamilyResult {
    pub family: String,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SuiteReport {
    pub tolerance: f64,
    pub instances: usize,
    pub seed: u64,
    pub families: Vec<FamilyResult>,
    pub max_rel_err: f64,
    pub pass: bool,
    pub wall_time_secs: f64,
}

fn randn(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let values = (0..n)
        .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng) * scale)
        .collect();
    Tensor::new(shape, values).expect("shape matches value count")
}

/// Random labels guaranteed to contain at least one within-class and one
/// cross-class pair, so the metric-constraint term never skips.
fn mc_labels(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
    let mut y: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
    y[0] = 0;
    y[1] = 0;
    y[2] = 1;
    y
}

/// Row-normalized positive matrix: a valid batch of class probabilities.
fn rand_probs(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    let mut vals = vec![0.0f64; rows * cols];
    for r in 0..rows {
        let row = &mut vals[r * cols..(r + 1) * cols];
        for v in row.iter_mut() {
            *v = rng.random_range(0.1..1.0);
        }
        let sum: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    vals
}

fn check_ce(rng: &mut ChaCha8Rng) -> Result<f64> {
    let b = rng.random_range(3..=6);
    let c = rng.random_range(2..=5);
    let logits = randn(rng, vec![b, c], 1.0);
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
    grad_check(
        |tape, vars| cross_entropy(tape, vars[0], &labels),
        &[logits],
        FD_EPS,
    )
}

fn check_mc(rng: &mut ChaCha8Rng) -> Result<f64> {
    let b = rng.random_range(4..=6);
    let d = rng.random_range(2..=4);
    let feats = randn(rng, vec![b, d], 1.0);
    let labels = mc_labels(rng, b, 2);
    grad_check(
        |tape, vars| {
            mc_loss(tape, vars[0], &labels)?
                .ok_or_else(|| Error::Numeric("mc term unexpectedly skipped".into()))
        },
        &[feats],
        FD_EPS,
    )
}

/// Adversarial loss with the reversal between the conditioning map and the
/// discriminator. Discriminator parameters see the loss's own derivative;
/// pre-reversal features see its negation, checked against a negated build.
fn check_adv(rng: &mut ChaCha8Rng, mode_outer: bool) -> Result<f64> {
    let b = rng.random_range(3..=5);
    let df = rng.random_range(2..=4);
    let c = rng.random_range(2..=3);
    let d0 = if mode_outer { df * c } else { 0 };
    let cond = Conditioner::<f64>::new(df, c, d0, 8, &mut stream(rng.random(), "check/phi"))?;
    assert_eq!(cond.uses_outer(), mode_outer);
    let dphi = cond.output_dim();

    let f_s = randn(rng, vec![b, df], 1.0);
    let f_t = randn(rng, vec![b, df], 1.0);
    let w = randn(rng, vec![dphi, 1], 0.8);
    let bias = randn(rng, vec![1], 0.3);
    let p_s = rand_probs(rng, b, c);
    let p_t = rand_probs(rng, b, c);

    // adv_mode: 0 = real graph with reversal, 1 = plain, -1 = negated.
    let build = |adv_mode: i32| {
        let cond = cond.clone();
        let p_s = p_s.clone();
        let p_t = p_t.clone();
        move |tape: &mut Tape<f64>, vars: &[Var]| -> Result<Var> {
            let bc = cond.bind(tape);
            let ps = tape.constant(vec![tape.shape(vars[0])[0], cond.prob_dim], p_s.clone())?;
            let pt = tape.constant(vec![tape.shape(vars[1])[0], cond.prob_dim], p_t.clone())?;
            let mut phi_s = cond.apply(tape, &bc, vars[0], ps)?;
            let mut phi_t = cond.apply(tape, &bc, vars[1], pt)?;
            if adv_mode == 0 {
                phi_s = grl(tape, phi_s, 1.0)?;
                phi_t = grl(tape, phi_t, 1.0)?;
            }
            let score = |tape: &mut Tape<f64>, phi: Var| -> Result<Var> {
                let lin = tape.matmul(phi, vars[2])?;
                let lin = tape.add(lin, vars[3])?;
                Ok(tape.sigmoid(lin))
            };
            let ds = score(tape, phi_s)?;
            let dt = score(tape, phi_t)?;
            let adv = adversarial_domain_loss(tape, ds, dt)?;
            Ok(if adv_mode < 0 { tape.scale(adv, -1.0) } else { adv })
        }
    };
    let inputs = [f_s, f_t, w, bias];
    let err_disc = grad_check_against(build(0), build(1), &inputs, FD_EPS, &[2, 3])?;
    let err_feat = grad_check_against(build(0), build(-1), &inputs, FD_EPS, &[0, 1])?;
    Ok(err_disc.max(err_feat))
}

/// Full per-step objective: classification plus weighted adversarial and
/// metric terms, with a shared linear extractor ahead of everything.
/// Extractor weights are the only pre-reversal parameters, so they are
/// checked against a build where the adversarial term enters negated.
fn check_objective(rng: &mut ChaCha8Rng) -> Result<f64> {
    let b = rng.random_range(4..=6);
    let dx = rng.random_range(2..=3);
    let df = rng.random_range(2..=3);
    let c = 2;
    let lambda = rng.random_range(0.3..0.9);
    let cond = Conditioner::<f64>::new(df, c, df * c, 8, &mut stream(rng.random(), "check/phi"))?;
    let dphi = cond.output_dim();

    let x_s = randn(rng, vec![b, dx], 1.0);
    let x_t = randn(rng, vec![b, dx], 1.0);
    let y_s = mc_labels(rng, b, c);
    let w_g = randn(rng, vec![dx, df], 0.8);
    let w_c = randn(rng, vec![df, c], 0.8);
    let b_c = randn(rng, vec![c], 0.3);
    let w_d = randn(rng, vec![dphi, 1], 0.8);
    let b_d = randn(rng, vec![1], 0.3);

    // Unperturbed class probabilities. The real graph detaches its
    // predictions before the conditioning map, so the surrogate builds must
    // hold them frozen at these values or finite differences would see the
    // severed path.
    let frozen = |x: &Tensor<f64>| -> Vec<f64> {
        let mut out = vec![0.0f64; b * c];
        for r in 0..b {
            let mut logits = vec![0.0f64; c];
            for (k, l) in logits.iter_mut().enumerate() {
                let mut f = vec![0.0f64; df];
                for (j, fj) in f.iter_mut().enumerate() {
                    for i in 0..dx {
                        *fj += x.values()[r * dx + i] * w_g.values()[i * df + j];
                    }
                }
                *l = f.iter().zip(w_c.values()[k..].iter().step_by(c)).map(|(a, w)| a * w).sum::<f64>()
                    + b_c.values()[k];
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for (k, e) in exps.iter().enumerate() {
                out[r * c + k] = e / sum;
            }
        }
        out
    };
    let ps_frozen = frozen(&x_s);
    let pt_frozen = frozen(&x_t);

    let build = |adv_mode: i32| {
        let cond = cond.clone();
        let x_s = x_s.clone();
        let x_t = x_t.clone();
        let y_s = y_s.clone();
        let ps_frozen = ps_frozen.clone();
        let pt_frozen = pt_frozen.clone();
        move |tape: &mut Tape<f64>, vars: &[Var]| -> Result<Var> {
            let xs = tape.constant(x_s.shape().to_vec(), x_s.values().to_vec())?;
            let xt = tape.constant(x_t.shape().to_vec(), x_t.values().to_vec())?;
            let f_s = tape.matmul(xs, vars[0])?;
            let f_t = tape.matmul(xt, vars[0])?;
            let logits = |tape: &mut Tape<f64>, f: Var| -> Result<Var> {
                let l = tape.matmul(f, vars[1])?;
                tape.add(l, vars[2])
            };
            let ls = logits(tape, f_s)?;
            let lt = logits(tape, f_t)?;
            let cls = cross_entropy(tape, ls, &y_s)?;
            let mc = mc_loss(tape, f_s, &y_s)?
                .ok_or_else(|| Error::Numeric("mc term unexpectedly skipped".into()))?;

            let bc = cond.bind(tape);
            let (ps, pt) = if adv_mode == 0 {
                let probs = |tape: &mut Tape<f64>, l: Var| -> Var {
                    let p = tape.softmax_rows(l).expect("logits are 2-D");
                    tape.detach(p)
                };
                (probs(tape, ls), probs(tape, lt))
            } else {
                (
                    tape.constant(vec![b, c], ps_frozen.clone())?,
                    tape.constant(vec![b, c], pt_frozen.clone())?,
                )
            };
            let mut phi_s = cond.apply(tape, &bc, f_s, ps)?;
            let mut phi_t = cond.apply(tape, &bc, f_t, pt)?;
            if adv_mode == 0 {
                phi_s = grl(tape, phi_s, 1.0)?;
                phi_t = grl(tape, phi_t, 1.0)?;
            }
            let score = |tape: &mut Tape<f64>, phi: Var| -> Result<Var> {
                let lin = tape.matmul(phi, vars[3])?;
                let lin = tape.add(lin, vars[4])?;
                Ok(tape.sigmoid(lin))
            };
            let ds = score(tape, phi_s)?;
            let dt = score(tape, phi_t)?;
            let adv = adversarial_domain_loss(tape, ds, dt)?;

            if adv_mode < 0 {
                // cls + λ·mc − adv: the true derivative the reversed graph
                // assigns to pre-reversal parameters (the reversal here has
                // unit coefficient; training carries λ in the reversal).
                let reg = tape.scale(mc, lambda);
                let reg = tape.sub(reg, adv)?;
                tape.add(cls, reg)
            } else {
                stage_objective(tape, cls, Some(adv), Some(mc), lambda)
            }
        }
    };
    let inputs = [w_g, w_c, b_c, w_d, b_d];
    let err_heads = grad_check_against(build(0), build(1), &inputs, FD_EPS, &[1, 2, 3, 4])?;
    let err_extractor = grad_check_against(build(0), build(-1), &inputs, FD_EPS, &[0])?;
    Ok(err_heads.max(err_extractor))
}

/// Matching normalization. Activations see ordinary derivatives; the
/// shared affine pair must receive gradient exclusively through the target
/// branch, so it is checked against a build whose source branch uses
/// frozen affine constants.
fn check_mn(rng: &mut ChaCha8Rng) -> Result<f64> {
    let bs = rng.random_range(3..=5);
    let bt = rng.random_range(3..=5);
    let d = rng.random_range(2..=4);
    let h_s = randn(rng, vec![bs, d], 1.0);
    let h_t = randn(rng, vec![bt, d], 1.0);
    let gamma = randn(rng, vec![d], 0.5);
    let beta = randn(rng, vec![d], 0.5);
    let eps = 1e-3; // large eps keeps the FD surface well conditioned

    let sq_sum = |tape: &mut Tape<f64>, a: Var, b: Var| -> Result<Var> {
        let aa = tape.mul(a, a)?;
        let bb = tape.mul(b, b)?;
        let sa = tape.sum_all(aa);
        let sb = tape.sum_all(bb);
        tape.add(sa, sb)
    };

    let real = move |tape: &mut Tape<f64>, vars: &[Var]| -> Result<Var> {
        let mut layer = MnLayer::new(d, eps, 0.1)?;
        let bound = BoundNorm { gamma: vars[2], beta: vars[3] };
        let (zs, zt) = layer.forward_train(tape, &bound, Some(vars[0]), Some(vars[1]))?;
        sq_sum(tape, zs.expect("source branch"), zt.expect("target branch"))
    };

    // Surrogate: identical arithmetic, but the source branch's affine is a
    // constant, so finite differences only see the target path.
    let gamma_vals = gamma.values().to_vec();
    let beta_vals = beta.values().to_vec();
    let surrogate = move |tape: &mut Tape<f64>, vars: &[Var]| -> Result<Var> {
        let standardize = |tape: &mut Tape<f64>, h: Var| -> Result<Var> {
            let mean = tape.mean_axis(h, 0)?;
            let centered = tape.sub(h, mean)?;
            let sq = tape.mul(centered, centered)?;
            let var = tape.mean_axis(sq, 0)?;
            let var_eps = tape.add_scalar(var, eps);
            let denom = tape.sqrt(var_eps)?;
            tape.div(centered, denom)
        };
        let xhat_s = standardize(tape, vars[0])?;
        let xhat_t = standardize(tape, vars[1])?;
        let g_const = tape.constant(vec![d], gamma_vals.clone())?;
        let b_const = tape.constant(vec![d], beta_vals.clone())?;
        let zs = tape.mul(xhat_s, g_const)?;
        let zs = tape.add(zs, b_const)?;
        let zt = tape.mul(xhat_t, vars[2])?;
        let zt = tape.add(zt, vars[3])?;
        sq_sum(tape, zs, zt)
    };

    let inputs = [h_s, h_t, gamma, beta];
    // Activations have ordinary derivatives; the affine pair must be held
    // against the surrogate because its backward is intentionally partial.
    let err_acts = grad_check_against(&real, &real, &inputs, FD_EPS, &[0, 1])?;
    let err_affine = grad_check_against(&real, surrogate, &inputs, FD_EPS, &[2, 3])?;
    Ok(err_acts.max(err_affine))
}

/// Batch normalization over one combined batch: everything is an ordinary
/// derivative.
fn check_bn(rng: &mut ChaCha8Rng) -> Result<f64> {
    let b = rng.random_range(4..=8);
    let d = rng.random_range(2..=4);
    let h = randn(rng, vec![b, d], 1.0);
    let gamma = randn(rng, vec![d], 0.5);
    let beta = randn(rng, vec![d], 0.5);
    let eps = 1e-3;
    grad_check(
        |tape, vars| {
            let mut layer = BnLayer::new(d, eps, 0.1)?;
            let bound = BoundNorm { gamma: vars[1], beta: vars[2] };
            let z = layer.forward_train(tape, &bound, vars[0])?;
            let sq = tape.mul(z, z)?;
            Ok(tape.sum_all(sq))
        },
        &[h, gamma, beta],
        FD_EPS,
    )
}

/// Runs `instances` seeded instances of every family and reports the worst
/// relative error per family.
pub fn run_gradient_suite(instances: usize, seed: u64) -> Result<SuiteReport> {
    if instances == 0 {
        return Err(Error::Config("gradient suite needs at least one instance".into()));
    }
    let start = std::time::Instant::now();
    let mut families = Vec::new();
    type Family = (&'static str, fn(&mut ChaCha8Rng, usize) -> Result<f64>);
    let table: [Family; 6] = [
        ("cross_entropy", |rng, _| check_ce(rng)),
        ("adversarial", |rng, i| check_adv(rng, i % 2 == 0)),
        ("metric_constraint", |rng, _| check_mc(rng)),
        ("stage_objective", |rng, _| check_objective(rng)),
        ("matching_norm", |rng, _| check_mn(rng)),
        ("batch_norm", |rng, _| check_bn(rng)),
    ];
    let mut overall = 0.0f64;
    for (name, f) in table {
        let mut worst = 0.0f64;
        for i in 0..instances {
            let mut rng = stream(seed, &format!("check/{name}/{i}"));
            let err = f(&mut rng, i)
                .map_err(|e| Error::Numeric(format!("{name} instance {i}: {e}")))?;
            worst = worst.max(err);
        }
        overall = overall.max(worst);
        families.push(FamilyResult { family: name.to_string(), max_rel_err: worst });
    }
    Ok(SuiteReport {
        tolerance: GRADCHECK_TOL,
        instances,
        seed,
        families,
        max_rel_err: overall,
        pass: overall <= GRADCHECK_TOL,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_at_tolerance() {
        let report = run_gradient_suite(5, 0).unwrap();
        assert!(report.pass, "max relative error {} over families {:?}", report.max_rel_err, report.families);
        assert_eq!(report.families.len(), 6);
        for f in &report.families {
            assert!(f.max_rel_err <= GRADCHECK_TOL, "{}: {}", f.family, f.max_rel_err);
        }
    }

    #[test]
    fn zero_instances_is_an_error() {
        assert!(run_gradient_suite(0, 0).is_err());
    }
}
