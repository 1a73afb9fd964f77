//! Two-stage training: per-source conditional adversarial alignment against
//! the target, then construction of pseudo target domains and pairwise
//! re-alignment between them and the remaining sources.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Sgd, Tape, Tensor, Var};
use crate::data::{BatchStream, Domain, DomainRole};
use crate::error::{Error, Result};
use crate::eval::accuracy;
use crate::losses::{adversarial_domain_loss, cross_entropy, mc_loss, stage_objective};
use crate::nn::{grl, predict_average, ArchConfig, ModelBundle, NormKind};
use crate::pseudo_target::{
    assign_pseudo_labels, build_pseudo_target, select_confident, PseudoTargetDomain,
};
use crate::rng::stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("unknown precision {other:?} (f32|f64)"))),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Precision::F32 => write!(f, "f32"),
            Precision::F64 => write!(f, "f64"),
        }
    }
}

/// Everything a run needs beyond the data itself. Architecture fields are
/// here too so one flat config file describes a whole experiment.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub kappa: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub norm: NormKind,
    pub use_adv: bool,
    pub use_mc: bool,
    pub use_pt: bool,
    /// Detach predicted probabilities before the conditioning map (no
    /// adversarial gradient into the classifiers through φ).
    pub detach_phi: bool,
    /// Recompute pseudo labels at every stage-2 epoch instead of freezing
    /// them once after stage 1.
    pub refresh_pseudo_labels: bool,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub disc_hidden: usize,
    pub d0: usize,
    pub d_r: usize,
    pub norm_eps: f64,
    pub norm_momentum: f64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            kappa: 0.98,
            epochs_stage1: 30,
            epochs_stage2: 30,
            batch_size: 64,
            seed: 0,
            norm: NormKind::Mn,
            use_adv: true,
            use_mc: true,
            use_pt: true,
            detach_phi: true,
            refresh_pseudo_labels: false,
            hidden_dims: vec![64, 64],
            feature_dim: 16,
            disc_hidden: 32,
            d0: 4096,
            d_r: 1024,
            norm_eps: 1e-5,
            norm_momentum: 0.1,
            precision: Precision::F64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if !(self.kappa >= 0.0 && self.kappa <= 1.0) {
            return Err(Error::Config(format!("kappa must lie in [0, 1], got {}", self.kappa)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.feature_dim == 0 || self.disc_hidden == 0 {
            return Err(Error::Config("feature_dim and disc_hidden must be positive".into()));
        }
        if self.d_r == 0 {
            return Err(Error::Config("d_r must be positive".into()));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::Config(format!("norm_eps must be > 0, got {}", self.norm_eps)));
        }
        if !(self.norm_momentum >= 0.0 && self.norm_momentum <= 1.0) {
            return Err(Error::Config(format!(
                "norm_momentum must lie in [0, 1], got {}",
                self.norm_momentum
            )));
        }
        Ok(())
    }

    pub fn arch(&self, input_dim: usize, n_classes: usize) -> ArchConfig {
        ArchConfig {
            input_dim,
            hidden_dims: self.hidden_dims.clone(),
            feature_dim: self.feature_dim,
            disc_hidden: self.disc_hidden,
            n_classes,
            norm: self.norm,
            norm_eps: self.norm_eps,
            norm_momentum: self.norm_momentum,
            d0: self.d0,
            d_r: self.d_r,
        }
    }

    /// Target batches are needed whenever the adversarial term is on or the
    /// normalization has a dedicated target branch; a plain source-only
    /// baseline never touches target data during training.
    fn needs_target_batches(&self) -> bool {
        self.use_adv || self.norm == NormKind::Mn
    }
}

/// Adversarial weight schedule: ramps from 0 toward 2/(1+e⁻¹⁰)−1 as
/// `epoch` advances through `total`.
pub fn lambda_schedule(epoch: usize, total: usize) -> Result<f64> {
    if total == 0 {
        return Err(Error::Config("schedule needs total >= 1".into()));
    }
    if epoch > total {
        return Err(Error::Config(format!("epoch {epoch} beyond total {total}")));
    }
    let progress = epoch as f64 / total as f64;
    Ok(2.0 / (1.0 + (-10.0 * progress).exp()) - 1.0)
}

/// One row of the loss trace: averages over the batches of one
/// (epoch, pair). `adv` is absent when the adversarial term is disabled,
/// `mc` when every batch of the pair skipped the term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub stage: u8,
    pub pair: String,
    pub cls: f64,
    pub adv: Option<f64>,
    pub mc: Option<f64>,
    pub lambda: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub source_names: Vec<String>,
    pub target_name: String,
    pub records: Vec<LossRecord>,
    pub mc_skipped_batches: usize,
    /// Number of target rows admitted into the pseudo targets (absent when
    /// stage 2 is disabled).
    pub pseudo_label_count: Option<usize>,
    /// Accuracy of the admitted pseudo labels against target ground truth,
    /// when that truth is available.
    pub pseudo_label_accuracy: Option<f64>,
    /// Ensemble accuracy on every labeled domain after training.
    pub domain_accuracy: BTreeMap<String, f64>,
    pub target_accuracy: Option<f64>,
    /// Target accuracy measured right after stage 1 (equals
    /// `target_accuracy` when stage 2 is disabled).
    pub target_accuracy_stage1: Option<f64>,
    pub wall_time_secs: f64,
}

impl TrainReport {
    /// JSON with the wall time zeroed: the representation two runs of the
    /// same seed must agree on bit-for-bit.
    pub fn canonical_json(&self) -> Result<String> {
        let mut copy = self.clone();
        copy.wall_time_secs = 0.0;
        Ok(serde_json::to_string_pretty(&copy)?)
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

    /// Loss trace as CSV: epoch,stage,pair,cls,adv,mc,lambda.
    pub fn save_loss_trace_csv(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "stage", "pair", "cls", "adv", "mc", "lambda"])?;
        for r in &self.records {
            w.write_record([
                r.epoch.to_string(),
                r.stage.to_string(),
                r.pair.clone(),
                format!("{}", r.cls),
                r.adv.map(|v| format!("{v}")).unwrap_or_default(),
                r.mc.map(|v| format!("{v}")).unwrap_or_default(),
                format!("{}", r.lambda),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Records plus the count of batches whose MC term was skipped.
pub struct StageOutcome {
    pub records: Vec<LossRecord>,
    pub mc_skipped: usize,
}

/// Losses of one optimizer step (batch means, f64 for reporting).
struct StepLosses {
    cls: f64,
    adv: Option<f64>,
    mc: Option<f64>,
    mc_skipped: usize,
}

/// One labeled batch on its way into the graph.
struct LabeledBatch<T> {
    x: Tensor<T>,
    y: Vec<usize>,
}

/// Builds the per-step objective for one (source-role, target-role) pair
/// and applies one SGD step. `head` picks the classifier/discriminator
/// column. The target-role batch is optional (plain supervised step) and
/// its labels are optional (stage 2 trains on pseudo-target labels too).
#[allow(clippy::too_many_arguments)]
fn pair_step<T: Real>(
    bundle: &mut ModelBundle<T>,
    sgd: &mut Sgd<T>,
    cfg: &TrainConfig,
    head: usize,
    src: &LabeledBatch<T>,
    tgt: Option<(&Tensor<T>, Option<&[usize]>)>,
    lambda: f64,
) -> Result<StepLosses> {
    let mut tape: Tape<T> = Tape::new();
    let bound = bundle.bind(&mut tape);
    let xs = tape.leaf(&src.x);
    let xt = tgt.map(|(x, _)| tape.leaf(x));

    let (fs, ft) = bundle.extractor.forward_train(&mut tape, &bound.extractor, Some(xs), xt)?;
    let fs = fs.expect("source branch present");

    // Classification: source-role batch, plus the target-role batch when it
    // carries labels.
    let logits_s = bound.classifiers[head].forward(&mut tape, fs)?;
    let mut cls = cross_entropy(&mut tape, logits_s, &src.y)?;
    let mut logits_t = None;
    if let (Some(ft), Some((_, y))) = (ft, tgt) {
        let lt = bound.classifiers[head].forward(&mut tape, ft)?;
        logits_t = Some(lt);
        if let Some(y) = y {
            let ce_t = cross_entropy(&mut tape, lt, y)?;
            cls = tape.add(cls, ce_t)?;
        }
    }

    // Metric constraint on each labeled batch, summed.
    let mut mc_skipped = 0usize;
    let mut mc: Option<Var> = None;
    if cfg.use_mc {
        let add_term = |tape: &mut Tape<T>, term: Option<Var>, acc: Option<Var>| match (
            acc, term,
        ) {
            (Some(a), Some(t)) => tape.add(a, t).map(Some),
            (None, t) => Ok(t),
            (a, None) => Ok(a),
        };
        let term_s = mc_loss(&mut tape, fs, &src.y)?;
        if term_s.is_none() {
            mc_skipped += 1;
        }
        mc = add_term(&mut tape, term_s, mc)?;
        if let (Some(ft), Some((_, Some(y)))) = (ft, tgt) {
            let term_t = mc_loss(&mut tape, ft, y)?;
            if term_t.is_none() {
                mc_skipped += 1;
            }
            mc = add_term(&mut tape, term_t, mc)?;
        }
    }

    // Conditional adversarial term: φ(f, ỹ) through the reversal into this
    // pair's discriminator.
    let mut adv = None;
    if cfg.use_adv {
        let ft = ft.ok_or_else(|| {
            Error::Config("adversarial term requires a target-role batch".into())
        })?;
        let lt = match logits_t {
            Some(lt) => lt,
            None => bound.classifiers[head].forward(&mut tape, ft)?,
        };
        let mut ps = tape.softmax_rows(logits_s)?;
        let mut pt = tape.softmax_rows(lt)?;
        if cfg.detach_phi {
            ps = tape.detach(ps);
            pt = tape.detach(pt);
        }
        let bc = bundle.conditioner.bind(&mut tape);
        let phi_s = bundle.conditioner.apply(&mut tape, &bc, fs, ps)?;
        let phi_t = bundle.conditioner.apply(&mut tape, &bc, ft, pt)?;
        // The schedule weight rides the reversal: the discriminator trains
        // at full rate on its own loss while the extractor's confusion
        // pressure ramps with λ.
        let rs = grl(&mut tape, phi_s, T::of_f64(lambda))?;
        let rt = grl(&mut tape, phi_t, T::of_f64(lambda))?;
        let ds = bound.discriminators[head].forward(&mut tape, rs)?;
        let dt = bound.discriminators[head].forward(&mut tape, rt)?;
        adv = Some(adversarial_domain_loss(&mut tape, ds, dt)?);
    }

    let objective = stage_objective(&mut tape, cls, adv, mc, T::of_f64(lambda))?;
    let value = tape.scalar_value(objective)?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {value}")));
    }
    let losses = StepLosses {
        cls: tape.scalar_value(cls)?.as_f64(),
        adv: adv.map(|v| tape.scalar_value(v)).transpose()?.map(Real::as_f64),
        mc: mc.map(|v| tape.scalar_value(v)).transpose()?.map(Real::as_f64),
        mc_skipped,
    };

    let grads = tape.backward(objective)?;
    bundle.apply_grads(&bound, &grads)?;
    let mut params = bundle.named_params_mut();
    sgd.step(&mut params)?;
    Ok(losses)
}

/// Per-(epoch, pair) loss accumulator.
#[derive(Default)]
struct PairTotals {
    steps: usize,
    cls: f64,
    adv: f64,
    adv_n: usize,
    mc: f64,
    mc_n: usize,
}

impl PairTotals {
    fn add(&mut self, l: &StepLosses) {
        self.steps += 1;
        self.cls += l.cls;
        if let Some(a) = l.adv {
            self.adv += a;
            self.adv_n += 1;
        }
        if let Some(m) = l.mc {
            self.mc += m;
            self.mc_n += 1;
        }
    }

    fn record(&self, epoch: usize, stage: u8, pair: String, lambda: f64) -> LossRecord {
        LossRecord {
            epoch,
            stage,
            pair,
            cls: self.cls / self.steps as f64,
            adv: (self.adv_n > 0).then(|| self.adv / self.adv_n as f64),
            mc: (self.mc_n > 0).then(|| self.mc / self.mc_n as f64),
            lambda,
        }
    }
}

fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b).max(1)
}

fn sorted_sources<'a, T: Real>(
    bundle: &ModelBundle<T>,
    sources: &'a [Domain<T>],
) -> Result<Vec<&'a Domain<T>>> {
    bundle
        .source_names
        .iter()
        .map(|name| {
            sources
                .iter()
                .find(|d| &d.name == name)
                .ok_or_else(|| Error::Data(format!("no source domain named {name}")))
        })
        .collect()
}

fn check_domains<T: Real>(sources: &[Domain<T>], target: &Domain<T>) -> Result<usize> {
    if sources.is_empty() {
        return Err(Error::Data("need at least one source domain".into()));
    }
    if target.role != DomainRole::Target {
        return Err(Error::Data(format!("domain {} is not a target", target.name)));
    }
    let dim = target.dim();
    let mut n_classes = 0usize;
    for s in sources {
        if s.role != DomainRole::Source {
            return Err(Error::Data(format!("domain {} is not a source", s.name)));
        }
        if s.dim() != dim {
            return Err(Error::Data(format!(
                "source {} has dim {}, target has {dim}",
                s.name,
                s.dim()
            )));
        }
        if s.y.is_none() {
            return Err(Error::Data(format!("source {} is unlabeled", s.name)));
        }
        let c = s.n_classes();
        if n_classes == 0 {
            n_classes = c;
        } else if c != n_classes {
            return Err(Error::Data(format!(
                "source {} spans {c} classes, expected {n_classes}",
                s.name
            )));
        }
    }
    if n_classes < 2 {
        return Err(Error::Data("sources must span at least 2 classes".into()));
    }
    if let Some(y) = &target.y {
        if let Some(&max) = y.iter().max() {
            if max >= n_classes {
                return Err(Error::Data(format!(
                    "target label {max} outside the shared space of {n_classes} classes"
                )));
            }
        }
    }
    Ok(n_classes)
}

/// Stage 1: every epoch round-robins over the sources; each step aligns one
/// source batch against one target batch through that source's own
/// classifier and discriminator.
pub fn stage1_train<T: Real>(
    bundle: &mut ModelBundle<T>,
    sources: &[Domain<T>],
    target: &Domain<T>,
    cfg: &TrainConfig,
) -> Result<StageOutcome> {
    cfg.validate()?;
    check_domains(sources, target)?;
    let ordered = sorted_sources(bundle, sources)?;
    let mut outcome = StageOutcome { records: Vec::new(), mc_skipped: 0 };
    if cfg.epochs_stage1 == 0 {
        return Ok(outcome);
    }

    let mut sgd = Sgd::new(T::of_f64(cfg.lr), T::of_f64(cfg.momentum), T::of_f64(cfg.weight_decay));
    let mut src_streams: Vec<BatchStream> = ordered
        .iter()
        .map(|d| {
            BatchStream::new(d.len(), cfg.batch_size, stream(cfg.seed, &format!("stage1/src/{}", d.name)))
        })
        .collect::<Result<_>>()?;
    // Each pair draws its own target stream so source order cannot shuffle
    // batches between pairs.
    let mut tgt_streams: Vec<BatchStream> = ordered
        .iter()
        .map(|d| {
            BatchStream::new(
                target.len(),
                cfg.batch_size,
                stream(cfg.seed, &format!("stage1/tgt/{}/for/{}", target.name, d.name)),
            )
        })
        .collect::<Result<_>>()?;

    let max_len = ordered.iter().map(|d| d.len()).chain([target.len()]).max().unwrap();
    let steps_per_epoch = ceil_div(max_len, cfg.batch_size);
    let draw_target = cfg.needs_target_batches();

    for epoch in 0..cfg.epochs_stage1 {
        let lambda = lambda_schedule(epoch, cfg.epochs_stage1)?;
        let mut totals: Vec<PairTotals> =
            (0..ordered.len()).map(|_| PairTotals::default()).collect();
        for _ in 0..steps_per_epoch {
            for (j, domain) in ordered.iter().enumerate() {
                let (x, y) = domain.gather(&src_streams[j].next_batch())?;
                let src = LabeledBatch { x, y: y.expect("sources are labeled") };
                let tgt_batch = if draw_target {
                    let (xt, _) = target.gather(&tgt_streams[j].next_batch())?;
                    Some(xt)
                } else {
                    None
                };
                let losses = pair_step(
                    bundle,
                    &mut sgd,
                    cfg,
                    j,
                    &src,
                    tgt_batch.as_ref().map(|x| (x, None)),
                    lambda,
                )
                .map_err(|e| {
                    Error::Numeric(format!(
                        "stage 1, epoch {epoch}, pair {}: {e}",
                        domain.name
                    ))
                })?;
                outcome.mc_skipped += losses.mc_skipped;
                totals[j].add(&losses);
            }
        }
        for (j, t) in totals.iter().enumerate() {
            outcome.records.push(t.record(epoch, 1, ordered[j].name.clone(), lambda));
        }
    }
    Ok(outcome)
}

/// Stage 2: every epoch round-robins over ordered pairs (pseudo-target p,
/// remainder source r ≠ p); each step classifies both batches, aligns them
/// adversarially through the head indexed by p, and applies the metric
/// constraint to both.
pub fn stage2_train<T: Real>(
    bundle: &mut ModelBundle<T>,
    sources: &[Domain<T>],
    pseudo_targets: &[PseudoTargetDomain<T>],
    cfg: &TrainConfig,
) -> Result<StageOutcome> {
    stage2_epochs(bundle, sources, pseudo_targets, cfg, 0, cfg.epochs_stage2)
}

/// Runs stage-2 epochs [from, to) of a schedule spanning
/// `cfg.epochs_stage2`; split out so pseudo-label refresh can re-enter per
/// epoch without disturbing λ′.
fn stage2_epochs<T: Real>(
    bundle: &mut ModelBundle<T>,
    sources: &[Domain<T>],
    pseudo_targets: &[PseudoTargetDomain<T>],
    cfg: &TrainConfig,
    from: usize,
    to: usize,
) -> Result<StageOutcome> {
    cfg.validate()?;
    let ordered = sorted_sources(bundle, sources)?;
    let mut outcome = StageOutcome { records: Vec::new(), mc_skipped: 0 };
    if from >= to || ordered.len() < 2 {
        return Ok(outcome);
    }
    if pseudo_targets.len() != ordered.len() {
        return Err(Error::Data(format!(
            "{} pseudo targets for {} sources",
            pseudo_targets.len(),
            ordered.len()
        )));
    }
    for (p, pt) in pseudo_targets.iter().enumerate() {
        if pt.source_index != p {
            return Err(Error::Data(format!(
                "pseudo target {p} carries source_index {}",
                pt.source_index
            )));
        }
    }

    let mut sgd = Sgd::new(T::of_f64(cfg.lr), T::of_f64(cfg.momentum), T::of_f64(cfg.weight_decay));
    // (p, r) pairs in canonical order with streams keyed by both names.
    let mut pairs = Vec::new();
    for p in 0..ordered.len() {
        for r in 0..ordered.len() {
            if r == p {
                continue;
            }
            let name_p = &ordered[p].name;
            let name_r = &ordered[r].name;
            let src_stream = BatchStream::new(
                ordered[r].len(),
                cfg.batch_size,
                stream(cfg.seed, &format!("stage2/src/{name_r}/vs/{name_p}")),
            )?;
            let pt_stream = BatchStream::new(
                pseudo_targets[p].len(),
                cfg.batch_size,
                stream(cfg.seed, &format!("stage2/pt/{name_p}/vs/{name_r}")),
            )?;
            pairs.push((p, r, src_stream, pt_stream));
        }
    }

    let max_len = ordered
        .iter()
        .map(|d| d.len())
        .chain(pseudo_targets.iter().map(|pt| pt.len()))
        .max()
        .unwrap();
    let steps_per_epoch = ceil_div(max_len, cfg.batch_size);

    for epoch in from..to {
        let lambda = lambda_schedule(epoch, cfg.epochs_stage2)?;
        let mut totals: Vec<PairTotals> = (0..pairs.len()).map(|_| PairTotals::default()).collect();
        for _ in 0..steps_per_epoch {
            for (k, (p, r, src_stream, pt_stream)) in pairs.iter_mut().enumerate() {
                let (x_r, y_r) = ordered[*r].gather(&src_stream.next_batch())?;
                let src = LabeledBatch { x: x_r, y: y_r.expect("sources are labeled") };
                let (x_p, y_p) = pseudo_targets[*p].gather(&pt_stream.next_batch())?;
                let losses = pair_step(
                    bundle,
                    &mut sgd,
                    cfg,
                    *p,
                    &src,
                    Some((&x_p, Some(&y_p[..]))),
                    lambda,
                )
                .map_err(|e| {
                    Error::Numeric(format!(
                        "stage 2, epoch {epoch}, pair {}|{}: {e}",
                        ordered[*p].name, ordered[*r].name
                    ))
                })?;
                outcome.mc_skipped += losses.mc_skipped;
                totals[k].add(&losses);
            }
        }
        for ((p, r, ..), t) in pairs.iter().zip(&totals) {
            let pair = format!("{}|{}", ordered[*p].name, ordered[*r].name);
            outcome.records.push(t.record(epoch, 2, pair, lambda));
        }
    }
    Ok(outcome)
}

fn eval_accuracy<T: Real>(bundle: &ModelBundle<T>, domain: &Domain<T>) -> Result<Option<f64>> {
    let Some(y) = &domain.y else { return Ok(None) };
    let (pred, _) = predict_average(bundle, &domain.x)?;
    Ok(Some(accuracy(&pred, y)?))
}

/// Matching normalization standardizes inference inputs with the real
/// target's statistics; stage 2 trains against pseudo target unions, so the
/// running statistics must be re-derived from the target before anything is
/// measured or pseudo-labeled.
fn refresh_inference_stats<T: Real>(
    bundle: &mut ModelBundle<T>,
    target: &Domain<T>,
    cfg: &TrainConfig,
) -> Result<()> {
    if cfg.norm == NormKind::Mn && target.len() >= 2 {
        bundle.recalibrate_norms(&target.x)?;
    }
    Ok(())
}

/// Builds one pseudo target per source from the current model state.
fn build_pseudo_targets<T: Real>(
    bundle: &ModelBundle<T>,
    ordered: &[&Domain<T>],
    target: &Domain<T>,
    cfg: &TrainConfig,
) -> Result<(Vec<PseudoTargetDomain<T>>, usize, Option<f64>)> {
    let (labels, confidences) = assign_pseudo_labels(bundle, &target.x)?;
    let selected = select_confident(&confidences, T::of_f64(cfg.kappa))?;
    let pseudo_accuracy = match &target.y {
        Some(truth) if !selected.is_empty() => {
            let pred: Vec<usize> = selected.iter().map(|&i| labels[i]).collect();
            let gold: Vec<usize> = selected.iter().map(|&i| truth[i]).collect();
            Some(accuracy(&pred, &gold)?)
        }
        _ => None,
    };
    let mut pts = Vec::with_capacity(ordered.len());
    for (j, domain) in ordered.iter().enumerate() {
        let pt = build_pseudo_target(domain, j, &target.x, &labels, &confidences, &selected)?;
        if pt.n_pseudo() == 0 {
            log::warn!(
                "pseudo target for source {} admitted no target rows; stage 2 aligns sources only",
                domain.name
            );
        }
        pts.push(pt);
    }
    Ok((pts, selected.len(), pseudo_accuracy))
}

/// The full two-stage procedure. Returns the trained model and a report
/// whose canonical JSON is bit-reproducible from (sources, target, cfg).
pub fn run_ptmda<T: Real>(
    sources: &[Domain<T>],
    target: &Domain<T>,
    cfg: &TrainConfig,
) -> Result<(ModelBundle<T>, TrainReport)> {
    let start = Instant::now();
    cfg.validate()?;
    let n_classes = check_domains(sources, target)?;
    let input_dim = target.dim();
    let names: Vec<String> = sources.iter().map(|d| d.name.clone()).collect();
    let mut bundle =
        ModelBundle::<T>::new(cfg.arch(input_dim, n_classes), &names, cfg.seed)?;
    let ordered = sorted_sources(&bundle, sources)?;

    let stage1 = stage1_train(&mut bundle, sources, target, cfg)?;
    let mut records = stage1.records;
    let mut mc_skipped = stage1.mc_skipped;
    refresh_inference_stats(&mut bundle, target, cfg)?;
    let target_accuracy_stage1 = eval_accuracy(&bundle, target)?;

    let mut pseudo_label_count = None;
    let mut pseudo_label_accuracy = None;
    if cfg.use_pt && ordered.len() >= 2 && cfg.epochs_stage2 > 0 {
        if cfg.refresh_pseudo_labels {
            for epoch in 0..cfg.epochs_stage2 {
                let (pts, count, acc) = build_pseudo_targets(&bundle, &ordered, target, cfg)?;
                pseudo_label_count = Some(count);
                pseudo_label_accuracy = acc;
                let out = stage2_epochs(&mut bundle, sources, &pts, cfg, epoch, epoch + 1)?;
                records.extend(out.records);
                mc_skipped += out.mc_skipped;
                refresh_inference_stats(&mut bundle, target, cfg)?;
            }
        } else {
            let (pts, count, acc) = build_pseudo_targets(&bundle, &ordered, target, cfg)?;
            pseudo_label_count = Some(count);
            pseudo_label_accuracy = acc;
            let out = stage2_train(&mut bundle, sources, &pts, cfg)?;
            records.extend(out.records);
            mc_skipped += out.mc_skipped;
            refresh_inference_stats(&mut bundle, target, cfg)?;
        }
    } else if cfg.use_pt && ordered.len() >= 2 {
        // Stage 2 enabled but zero epochs: still report the pseudo-label
        // census so ablations can audit the filter.
        let (_, count, acc) = build_pseudo_targets(&bundle, &ordered, target, cfg)?;
        pseudo_label_count = Some(count);
        pseudo_label_accuracy = acc;
    }

    let mut domain_accuracy = BTreeMap::new();
    for d in ordered.iter().copied().chain([target]) {
        if let Some(acc) = eval_accuracy(&bundle, d)? {
            domain_accuracy.insert(d.name.clone(), acc);
        }
    }
    let target_accuracy = eval_accuracy(&bundle, target)?;

    let report = TrainReport {
        seed: cfg.seed,
        source_names: bundle.source_names.clone(),
        target_name: target.name.clone(),
        records,
        mc_skipped_batches: mc_skipped,
        pseudo_label_count,
        pseudo_label_accuracy,
        domain_accuracy,
        target_accuracy,
        target_accuracy_stage1,
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    Ok((bundle, report))
}
