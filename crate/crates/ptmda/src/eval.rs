//! Metrics, the desk-scale ablation grid, and a proxy A-distance
//! diagnostic for inspecting how well domains have been aligned.

use std::collections::BTreeMap;
use std::path::Path;

use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Tensor};
use crate::data::Domain;
use crate::error::{Error, Result};
use crate::nn::{ModelBundle, NormKind};
use crate::trainer::{run_ptmda, TrainConfig};

/// Fraction of exact matches between two label vectors.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::Data("accuracy over empty label vectors".into()));
    }
    if pred.len() != truth.len() {
        return Err(Error::Data(format!(
            "accuracy length mismatch: {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}

const PAD_MIN_SAMPLES: usize = 10;
const PAD_GD_STEPS: usize = 300;
const PAD_GD_LR: f64 = 0.5;
const PAD_GD_L2: f64 = 1e-3;

/// FNV-1a over a tensor's shape and value bits; ties a split permutation to
/// the data itself so that swapping the two feature sets cannot reassign it.
fn content_seed<T: Real>(t: &Tensor<T>) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    let eat = |x: u64, h: &mut u64| {
        for b in x.to_le_bytes() {
            *h ^= b as u64;
            *h = h.wrapping_mul(0x100000001b3);
        }
    };
    for &s in t.shape() {
        eat(s as u64, &mut h);
    }
    for v in t.values() {
        eat(v.as_f64().to_bits(), &mut h);
    }
    h
}

/// One domain's rows as f64, split into train/test by a content-keyed
/// permutation.
struct PadSide {
    rows: Vec<Vec<f64>>,
    train: Vec<usize>,
    test: Vec<usize>,
}

impl PadSide {
    fn new<T: Real>(feats: &Tensor<T>, split_ratio: f64, base: u64) -> Result<Self> {
        let &[n, d] = feats.shape() else {
            return Err(Error::Shape(format!("features must be [n, d], got {:?}", feats.shape())));
        };
        if n < PAD_MIN_SAMPLES {
            return Err(Error::Data(format!(
                "proxy A-distance needs at least {PAD_MIN_SAMPLES} samples per side, got {n}"
            )));
        }
        let rows: Vec<Vec<f64>> = feats
            .values()
            .chunks(d)
            .map(|r| r.iter().map(|v| v.as_f64()).collect())
            .collect();
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(base ^ content_seed(feats));
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let n_train = ((split_ratio * n as f64).round() as usize).clamp(1, n - 1);
        let (train, test) = order.split_at(n_train);
        Ok(PadSide { rows, train: train.to_vec(), test: test.to_vec() })
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Proxy A-distance between two feature sets: 2·(1 − 2ε) for the held-out
/// error ε of a linear domain classifier, clamped to [0, 2]. Swapping the
/// arguments flips every label and (with zero-initialized weights) exactly
/// negates every intermediate, so the result is bit-identical; all
/// cross-domain reductions add one partial sum per side to stay order-free.
pub fn proxy_a_distance<T: Real>(
    feats_a: &Tensor<T>,
    feats_b: &Tensor<T>,
    split_ratio: f64,
    rng: &mut impl RngCore,
) -> Result<f64> {
    if !(split_ratio > 0.0 && split_ratio < 1.0) {
        return Err(Error::Config(format!("split_ratio must lie in (0, 1), got {split_ratio}")));
    }
    if feats_a.shape().get(1) != feats_b.shape().get(1) {
        return Err(Error::Shape(format!(
            "feature dims differ: {:?} vs {:?}",
            feats_a.shape(),
            feats_b.shape()
        )));
    }
    let base = rng.next_u64();
    let a = PadSide::new(feats_a, split_ratio, base)?;
    let b = PadSide::new(feats_b, split_ratio, base)?;
    let d = a.rows[0].len();
    let n_train = a.train.len() + b.train.len();

    // Standardize by combined train statistics, one partial sum per side.
    let moments = |side: &PadSide| {
        let mut sum = vec![0.0f64; d];
        let mut sumsq = vec![0.0f64; d];
        for &i in &side.train {
            for (j, &x) in side.rows[i].iter().enumerate() {
                sum[j] += x;
                sumsq[j] += x * x;
            }
        }
        (sum, sumsq)
    };
    let (sum_a, sumsq_a) = moments(&a);
    let (sum_b, sumsq_b) = moments(&b);
    let mut mean = vec![0.0f64; d];
    let mut scale = vec![0.0f64; d];
    for j in 0..d {
        mean[j] = (sum_a[j] + sum_b[j]) / n_train as f64;
        let var = (sumsq_a[j] + sumsq_b[j]) / n_train as f64 - mean[j] * mean[j];
        scale[j] = 1.0 / (var.max(0.0) + 1e-8).sqrt();
    }
    let std_row = |row: &[f64], out: &mut Vec<f64>| {
        out.clear();
        out.extend(row.iter().enumerate().map(|(j, &x)| (x - mean[j]) * scale[j]));
    };

    // Logistic regression with labels a → −1, b → +1.
    let mut w = vec![0.0f64; d];
    let mut bias = 0.0f64;
    let mut buf = Vec::with_capacity(d);
    for _ in 0..PAD_GD_STEPS {
        let mut grad_parts = Vec::with_capacity(2);
        for (side, y) in [(&a, -1.0f64), (&b, 1.0f64)] {
            let mut gw = vec![0.0f64; d];
            let mut gb = 0.0f64;
            for &i in &side.train {
                std_row(&side.rows[i], &mut buf);
                let s = buf.iter().zip(&w).map(|(x, wi)| x * wi).sum::<f64>() + bias;
                let c = -y * sigmoid(-y * s);
                for (g, x) in gw.iter_mut().zip(&buf) {
                    *g += c * x;
                }
                gb += c;
            }
            grad_parts.push((gw, gb));
        }
        let (gw_a, gb_a) = &grad_parts[0];
        let (gw_b, gb_b) = &grad_parts[1];
        for j in 0..d {
            let g = (gw_a[j] + gw_b[j]) / n_train as f64 + PAD_GD_L2 * w[j];
            w[j] -= PAD_GD_LR * g;
        }
        bias -= PAD_GD_LR * ((gb_a + gb_b) / n_train as f64);
    }

    // Held-out error with half credit on exact ties.
    let mut credit = 0.0f64;
    let mut n_test = 0usize;
    for (side, y) in [(&a, -1.0f64), (&b, 1.0f64)] {
        for &i in &side.test {
            std_row(&side.rows[i], &mut buf);
            let s = buf.iter().zip(&w).map(|(x, wi)| x * wi).sum::<f64>() + bias;
            let m = y * s;
            credit += if m > 0.0 {
                1.0
            } else if m == 0.0 {
                0.5
            } else {
                0.0
            };
            n_test += 1;
        }
    }
    let eps = 1.0 - credit / n_test as f64;
    Ok((2.0 * (1.0 - 2.0 * eps)).clamp(0.0, 2.0))
}

/// Held-out accuracy of one trained domain discriminator at inference:
/// rows of `x_source`/`x_target` count as correct when the head assigns
/// them probability ≤ 0.5 / > 0.5 of being target-side.
pub fn discriminator_accuracy<T: Real>(
    bundle: &ModelBundle<T>,
    head: usize,
    x_source: &Tensor<T>,
    x_target: &Tensor<T>,
) -> Result<f64> {
    if head >= bundle.n_sources() {
        return Err(Error::Config(format!(
            "head {head} out of range for {} sources",
            bundle.n_sources()
        )));
    }
    let mut tape: Tape<T> = Tape::new();
    let bound = bundle.bind(&mut tape);
    let bc = bundle.conditioner.bind(&mut tape);
    let mut scores = |x: &Tensor<T>| -> Result<Vec<f64>> {
        let v = tape.leaf(x);
        let f = bundle.extractor.forward_infer(&mut tape, &bound.extractor, v)?;
        let logits = bound.classifiers[head].forward(&mut tape, f)?;
        let p = tape.softmax_rows(logits)?;
        let phi = bundle.conditioner.apply(&mut tape, &bc, f, p)?;
        let dout = bound.discriminators[head].forward(&mut tape, phi)?;
        Ok(tape.values(dout).iter().map(|v| v.as_f64()).collect())
    };
    let ds = scores(x_source)?;
    let dt = scores(x_target)?;
    let hits = ds.iter().filter(|&&v| v <= 0.5).count() + dt.iter().filter(|&&v| v > 0.5).count();
    Ok(hits as f64 / (ds.len() + dt.len()) as f64)
}

/// One cell of the ablation grid: which loss terms and which normalization
/// a run uses.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VariantSpec {
    pub name: String,
    pub use_adv: bool,
    pub use_pt: bool,
    pub use_mc: bool,
    pub norm: NormKind,
}

impl VariantSpec {
    pub fn configure(&self, base: &TrainConfig, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            use_adv: self.use_adv,
            use_pt: self.use_pt,
            use_mc: self.use_mc,
            norm: self.norm,
            ..base.clone()
        }
    }
}

/// The standard grid: a source-only baseline, the pseudo-target method
/// under either normalization with and without the metric constraint, the
/// full method, and the full method minus pseudo targets.
pub fn standard_variants() -> Vec<VariantSpec> {
    let v = |name: &str, use_adv, use_pt, use_mc, norm| VariantSpec {
        name: name.to_string(),
        use_adv,
        use_pt,
        use_mc,
        norm,
    };
    vec![
        v("source-only", false, false, false, NormKind::Bn),
        v("pt-bn", true, true, false, NormKind::Bn),
        v("pt-mn", true, true, false, NormKind::Mn),
        v("pt-mc", true, true, true, NormKind::Bn),
        v("ptmda", true, true, true, NormKind::Mn),
        v("mn-mc-no-pt", true, false, true, NormKind::Mn),
    ]
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub accuracy: f64,
    /// Target accuracy after stage 1 only (diagnostic; not in the CSV).
    pub accuracy_stage1: Option<f64>,
    pub wall_time_secs: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VariantStats {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub summary: BTreeMap<String, VariantStats>,
}

impl AblationTable {
    fn summarize(rows: &[AblationRow]) -> BTreeMap<String, VariantStats> {
        let mut grouped: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in rows {
            grouped.entry(r.variant.clone()).or_default().push(r.accuracy);
        }
        grouped
            .into_iter()
            .map(|(name, accs)| {
                let n = accs.len();
                let mean = accs.iter().sum::<f64>() / n as f64;
                let std = if n > 1 {
                    (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
                } else {
                    0.0
                };
                (name, VariantStats { mean, std, n })
            })
            .collect()
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["variant", "seed", "accuracy", "wall_time"])?;
        for r in &self.rows {
            w.write_record([
                r.variant.clone(),
                r.seed.to_string(),
                format!("{}", r.accuracy),
                format!("{}", r.wall_time_secs),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Runs every (variant, seed) cell; cells are independent and may run in
/// parallel up to `jobs` threads, each run single-threaded inside.
pub fn run_ablation<T: Real>(
    sources: &[Domain<T>],
    target: &Domain<T>,
    base: &TrainConfig,
    variants: &[VariantSpec],
    seeds: &[u64],
    jobs: usize,
) -> Result<AblationTable> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one variant and one seed".into()));
    }
    if target.y.is_none() {
        return Err(Error::Data("ablation target must be labeled".into()));
    }
    let cells: Vec<(&VariantSpec, u64)> =
        variants.iter().flat_map(|v| seeds.iter().map(move |&s| (v, s))).collect();
    let run_cell = |(variant, seed): &(&VariantSpec, u64)| -> Result<AblationRow> {
        let cfg = variant.configure(base, *seed);
        let (_, report) = run_ptmda(sources, target, &cfg)?;
        Ok(AblationRow {
            variant: variant.name.clone(),
            seed: *seed,
            accuracy: report
                .target_accuracy
                .ok_or_else(|| Error::Data("run produced no target accuracy".into()))?,
            accuracy_stage1: report.target_accuracy_stage1,
            wall_time_secs: report.wall_time_secs,
        })
    };
    let rows: Vec<AblationRow> = if jobs <= 1 {
        cells.iter().map(run_cell).collect::<Result<_>>()?
    } else {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| cells.par_iter().map(run_cell).collect::<Result<_>>())?
    };
    let summary = AblationTable::summarize(&rows);
    Ok(AblationTable { rows, summary })
}
