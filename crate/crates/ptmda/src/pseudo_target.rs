//! Pseudo-labeling of target samples and construction of pseudo target
//! domains: one source's labeled rows merged with the confidently
//! pseudo-labeled target rows.

use std::fmt;
use std::path::Path;

use crate::autodiff::{Real, Tensor};
use crate::data::{Domain, DomainRole};
use crate::error::{Error, Result};
use crate::nn::{predict_average, ModelBundle};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Source,
    Pseudo,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Source => write!(f, "source"),
            Provenance::Pseudo => write!(f, "pseudo"),
        }
    }
}

/// One source domain extended by confident target rows. Source rows come
/// first and keep their ground-truth labels bit-exactly; every pseudo row
/// records the confidence that admitted it.
#[derive(Clone, Debug)]
pub struct PseudoTargetDomain<T> {
    pub source_index: usize,
    pub x: Tensor<T>,
    pub y: Vec<usize>,
    pub provenance: Vec<Provenance>,
    /// Per-row; `None` exactly on source rows.
    pub confidences: Vec<Option<T>>,
}

impl<T: Real> PseudoTargetDomain<T> {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn n_pseudo(&self) -> usize {
        self.provenance.iter().filter(|p| **p == Provenance::Pseudo).count()
    }

    /// Gathers rows into a labeled batch.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let d = self.dim();
        let mut values = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Data(format!(
                    "row {i} out of range for pseudo target of {} rows",
                    self.len()
                )));
            }
            values.extend_from_slice(&self.x.values()[i * d..(i + 1) * d]);
            labels.push(self.y[i]);
        }
        Ok((Tensor::new(vec![indices.len(), d], values)?, labels))
    }
}

/// Ensemble pseudo-labels for target samples: argmax of the mean softmax
/// over all classifiers, with the mean max probability as confidence.
pub fn assign_pseudo_labels<T: Real>(
    bundle: &ModelBundle<T>,
    x_t: &Tensor<T>,
) -> Result<(Vec<usize>, Vec<T>)> {
    predict_average(bundle, x_t)
}

/// Indices whose confidence strictly exceeds `kappa`, in ascending order.
pub fn select_confident<T: Real>(confidences: &[T], kappa: T) -> Result<Vec<usize>> {
    if kappa < T::zero() || kappa > T::one() {
        return Err(Error::Config(format!("kappa must lie in [0, 1], got {kappa}")));
    }
    Ok(confidences
        .iter()
        .enumerate()
        .filter(|(_, c)| **c > kappa)
        .map(|(i, _)| i)
        .collect())
}

/// Merges a source domain with the selected target rows. `labels` and
/// `confidences` cover the full target set; `selected` (typically from
/// [`select_confident`]) picks the rows to admit. An empty selection yields
/// the source content with all-source provenance.
pub fn build_pseudo_target<T: Real>(
    source: &Domain<T>,
    source_index: usize,
    x_t: &Tensor<T>,
    labels: &[usize],
    confidences: &[T],
    selected: &[usize],
) -> Result<PseudoTargetDomain<T>> {
    if source.role != DomainRole::Source {
        return Err(Error::Data(format!("domain {} is not a source", source.name)));
    }
    let Some(source_y) = &source.y else {
        return Err(Error::Data(format!("source domain {} has no labels", source.name)));
    };
    let [t_rows, t_dim] = x_t.shape() else {
        return Err(Error::Shape(format!("target samples must be 2-D, got {:?}", x_t.shape())));
    };
    if *t_dim != source.dim() {
        return Err(Error::Shape(format!(
            "target dim {t_dim} differs from source dim {}",
            source.dim()
        )));
    }
    if labels.len() != *t_rows || confidences.len() != *t_rows {
        return Err(Error::Data(format!(
            "{} labels / {} confidences for {t_rows} target rows",
            labels.len(),
            confidences.len()
        )));
    }
    let n_classes = source.n_classes();
    let d = source.dim();

    let mut values = source.x.values().to_vec();
    let mut y = source_y.clone();
    let mut provenance = vec![Provenance::Source; source.len()];
    let mut conf: Vec<Option<T>> = vec![None; source.len()];
    for &i in selected {
        if i >= *t_rows {
            return Err(Error::Data(format!(
                "selected row {i} out of range for {t_rows} target rows"
            )));
        }
        if labels[i] >= n_classes {
            return Err(Error::Data(format!(
                "pseudo label {} outside the source label space of {n_classes} classes",
                labels[i]
            )));
        }
        values.extend_from_slice(&x_t.values()[i * d..(i + 1) * d]);
        y.push(labels[i]);
        provenance.push(Provenance::Pseudo);
        conf.push(Some(confidences[i]));
    }
    let rows = y.len();
    Ok(PseudoTargetDomain {
        source_index,
        x: Tensor::new(vec![rows, d], values)?,
        y,
        provenance,
        confidences: conf,
    })
}

/// Audit dump: `features…, label, provenance, confidence` (confidence empty
/// on source rows).
pub fn dump_pseudo_target_csv<T: Real>(path: &Path, pt: &PseudoTargetDomain<T>) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut w = csv::Writer::from_path(path)?;
    let d = pt.dim();
    let mut header: Vec<String> = (0..d).map(|j| format!("f{j}")).collect();
    header.extend(["label".into(), "provenance".into(), "confidence".into()]);
    w.write_record(&header)?;
    for i in 0..pt.len() {
        let mut record: Vec<String> =
            pt.x.values()[i * d..(i + 1) * d].iter().map(|v| format!("{v}")).collect();
        record.push(pt.y[i].to_string());
        record.push(pt.provenance[i].to_string());
        record.push(pt.confidences[i].map(|c| format!("{c}")).unwrap_or_default());
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ArchConfig, NormKind};

    fn source() -> Domain<f64> {
        Domain::new(
            "s",
            Tensor::from_rows(&[
                vec![0.0, 0.0],
                vec![1.0, 0.0],
                vec![0.0, 1.0],
                vec![1.0, 1.0],
            ])
            .unwrap(),
            Some(vec![0, 1, 1, 0]),
            DomainRole::Source,
        )
        .unwrap()
    }

    fn target_x() -> Tensor<f64> {
        Tensor::from_rows(&[vec![2.0, 2.0], vec![3.0, 3.0], vec![4.0, 4.0]]).unwrap()
    }

    #[test]
    fn assignment_delegates_to_ensemble_prediction() {
        let arch = ArchConfig {
            input_dim: 2,
            hidden_dims: vec![6],
            feature_dim: 4,
            disc_hidden: 5,
            n_classes: 2,
            norm: NormKind::Mn,
            norm_eps: 1e-5,
            norm_momentum: 0.1,
            d0: 4096,
            d_r: 16,
        };
        let bundle =
            ModelBundle::<f64>::new(arch, &["a".into(), "b".into()], 13).unwrap();
        let x = target_x();
        let (labels, conf) = assign_pseudo_labels(&bundle, &x).unwrap();
        let (labels2, conf2) = predict_average(&bundle, &x).unwrap();
        assert_eq!(labels, labels2);
        assert_eq!(conf, conf2);
    }

    #[test]
    fn selection_is_strict_and_monotone() {
        let conf = [0.99, 0.5, 0.98, 0.981, 1.0];
        let selected = select_confident(&conf, 0.98).unwrap();
        assert_eq!(selected, vec![0, 3, 4]);
        // Strictness: exactly-at-threshold is rejected.
        assert!(!selected.contains(&2));
        // Monotone non-increasing cardinality across a kappa sweep.
        let sweep = [0.5, 0.8, 0.9, 0.98, 1.0];
        let counts: Vec<usize> =
            sweep.iter().map(|&k| select_confident(&conf, k).unwrap().len()).collect();
        for w in counts.windows(2) {
            assert!(w[0] >= w[1], "{counts:?}");
        }
        // kappa = 1.0 admits nothing (confidences never exceed 1).
        assert_eq!(*counts.last().unwrap(), 0);
        assert!(select_confident(&conf, 1.5).is_err());
    }

    #[test]
    fn build_concatenates_source_first() {
        let s = source();
        let x_t = target_x();
        let labels = [1, 0, 1];
        let conf = [0.99, 0.97, 0.995];
        let pt = build_pseudo_target(&s, 2, &x_t, &labels, &conf, &[0, 2]).unwrap();
        assert_eq!(pt.source_index, 2);
        assert_eq!(pt.len(), 6);
        assert_eq!(pt.n_pseudo(), 2);
        assert_eq!(pt.y, vec![0, 1, 1, 0, 1, 1]);
        assert_eq!(&pt.x.values()[8..], &[2.0, 2.0, 4.0, 4.0]);
        assert_eq!(pt.provenance[..4], [Provenance::Source; 4]);
        assert_eq!(pt.provenance[4..], [Provenance::Pseudo; 2]);
        assert_eq!(pt.confidences[4..], [Some(0.99), Some(0.995)]);
        // Source labels pass through bit-exactly.
        assert_eq!(&pt.y[..4], s.y.as_ref().unwrap().as_slice());
    }

    #[test]
    fn empty_selection_reproduces_source() {
        let s = source();
        let pt = build_pseudo_target(&s, 0, &target_x(), &[0, 0, 0], &[0.1, 0.1, 0.1], &[])
            .unwrap();
        assert_eq!(pt.len(), s.len());
        assert_eq!(pt.x.values(), s.x.values());
        assert!(pt.provenance.iter().all(|p| *p == Provenance::Source));
        assert!(pt.confidences.iter().all(Option::is_none));
    }

    #[test]
    fn selection_order_only_permutes_rows() {
        let s = source();
        let x_t = target_x();
        let labels = [1, 0, 1];
        let conf = [0.99, 0.985, 0.995];
        let a = build_pseudo_target(&s, 0, &x_t, &labels, &conf, &[0, 1, 2]).unwrap();
        let b = build_pseudo_target(&s, 0, &x_t, &labels, &conf, &[2, 0, 1]).unwrap();
        let rowset = |pt: &PseudoTargetDomain<f64>| {
            let d = pt.dim();
            let mut rows: Vec<(Vec<u64>, usize, bool)> = (0..pt.len())
                .map(|i| {
                    (
                        pt.x.values()[i * d..(i + 1) * d].iter().map(|v| v.to_bits()).collect(),
                        pt.y[i],
                        pt.provenance[i] == Provenance::Pseudo,
                    )
                })
                .collect();
            rows.sort();
            rows
        };
        assert_eq!(rowset(&a), rowset(&b));
    }

    #[test]
    fn foreign_pseudo_label_rejected() {
        let s = source(); // binary label space
        let err =
            build_pseudo_target(&s, 0, &target_x(), &[2, 0, 0], &[0.99; 3], &[0]).unwrap_err();
        assert!(err.to_string().contains("label space"), "{err}");
    }

    #[test]
    fn audit_csv_has_provenance_and_confidence() {
        let s = source();
        let pt = build_pseudo_target(&s, 0, &target_x(), &[1, 0, 1], &[0.99; 3], &[1]).unwrap();
        let dir = std::env::temp_dir().join(format!("ptmda-pt-test-{}", std::process::id()));
        let path = dir.join("pt.csv");
        dump_pseudo_target_csv(&path, &pt).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "f0,f1,label,provenance,confidence");
        assert_eq!(lines.clone().count(), 5);
        assert_eq!(lines.next().unwrap(), "0,0,0,source,");
        assert_eq!(text.lines().last().unwrap(), "3,3,0,pseudo,0.99");
        std::fs::remove_dir_all(&dir).ok();
    }
}
