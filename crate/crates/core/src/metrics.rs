//! Accuracy bookkeeping for an incremental run.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::classifier::CosineClassifier;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-class hit counts of one evaluation pass.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub correct: usize,
    pub total: usize,
    /// class id → (correct, total)
    pub per_class: BTreeMap<usize, (usize, usize)>,
}

impl Evaluation {
    /// Top-1 accuracy in percent; 0 for an empty evaluation.
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            100.0 * self.correct as f64 / self.total as f64
        }
    }

    pub fn class_accuracy(&self, class: usize) -> Option<f64> {
        self.per_class
            .get(&class)
            .filter(|(_, n)| *n > 0)
            .map(|&(c, n)| 100.0 * c as f64 / n as f64)
    }

    /// Accuracy over the samples of `classes`.
    pub fn group_accuracy(&self, classes: &[usize]) -> f64 {
        let (c, n) = classes
            .iter()
            .filter_map(|k| self.per_class.get(k))
            .fold((0, 0), |(a, b), &(c, n)| (a + c, b + n));
        if n == 0 {
            0.0
        } else {
            100.0 * c as f64 / n as f64
        }
    }
}

/// Scores class-token `features` `[n, d]` against every row of `classifier`.
pub fn evaluate(classifier: &CosineClassifier, features: &Tensor, labels: &[usize]) -> Result<Evaluation> {
    if features.rows() != labels.len() && !labels.is_empty() {
        return Err(Error::dim("evaluate", labels.len(), features.rows()));
    }
    let mut out = Evaluation::default();
    for (i, &label) in labels.iter().enumerate() {
        let hit = classifier.predict(features.row(i))? == label;
        let e = out.per_class.entry(label).or_insert((0, 0));
        e.0 += usize::from(hit);
        e.1 += 1;
        out.correct += usize::from(hit);
        out.total += 1;
    }
    Ok(out)
}

/// Accuracy after every task of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Accuracy over all seen classes after each task, in percent.
    pub accuracies: Vec<f64>,
    pub average_accuracy: f64,
    pub final_accuracy: f64,
    /// `[after task][class id]`, `None` while the class is unseen.
    pub class_accuracy: Vec<Vec<Option<f64>>>,
    /// `[after task][task group]`, `None` for groups not yet trained.
    pub group_accuracy: Vec<Vec<Option<f64>>>,
}

/// Builds the record from one evaluation per task. `groups` lists the class
/// ids of every task; `classes` is the total class count.
pub fn summarize(evaluations: &[Evaluation], groups: &[Vec<usize>], classes: usize) -> Result<MetricsRecord> {
    if evaluations.is_empty() {
        return Err(Error::usage("no evaluations to summarize"));
    }
    let accuracies: Vec<f64> = evaluations.iter().map(Evaluation::accuracy).collect();
    let class_accuracy = evaluations
        .iter()
        .map(|e| (0..classes).map(|k| e.class_accuracy(k)).collect())
        .collect();
    let group_accuracy = evaluations
        .iter()
        .enumerate()
        .map(|(t, e)| {
            groups
                .iter()
                .enumerate()
                .map(|(g, cls)| (g <= t).then(|| e.group_accuracy(cls)))
                .collect()
        })
        .collect();
    Ok(MetricsRecord {
        average_accuracy: mean(&accuracies),
        final_accuracy: *accuracies.last().expect("non-empty"),
        accuracies,
        class_accuracy,
        group_accuracy,
    })
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Median of a non-empty slice; the mean of the middle pair for even lengths.
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

impl MetricsRecord {
    /// `task,accuracy,average_accuracy` with tasks counted from 1.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["task", "accuracy", "average_accuracy"])?;
        for t in 0..self.accuracies.len() {
            let avg = mean(&self.accuracies[..=t]);
            w.write_record([(t + 1).to_string(), self.accuracies[t].to_string(), avg.to_string()])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::usage(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::{self, Purpose};
    use rand::Rng;

    fn eval_of(pairs: &[(usize, bool)]) -> Evaluation {
        let mut e = Evaluation::default();
        for &(k, hit) in pairs {
            let s = e.per_class.entry(k).or_insert((0, 0));
            s.0 += usize::from(hit);
            s.1 += 1;
            e.correct += usize::from(hit);
            e.total += 1;
        }
        e
    }

    #[test]
    fn average_is_the_plain_mean() {
        let groups = vec![vec![0], vec![1]];
        let evals = [eval_of(&[(0, true), (0, true), (0, false), (0, false), (0, true)]), eval_of(&[(0, true), (1, true), (1, false)])];
        let r = summarize(&evals, &groups, 2).unwrap();
        assert_eq!(r.accuracies, vec![60.0, 200.0 / 3.0]);
        assert_eq!(r.average_accuracy, (60.0 + 200.0 / 3.0) / 2.0);
        assert_eq!(r.group_accuracy[0], vec![Some(60.0), None]);
        assert_eq!(r.class_accuracy[1][1], Some(50.0));
        let single = summarize(&evals[..1], &groups, 2).unwrap();
        assert_eq!(single.average_accuracy, single.accuracies[0]);
        assert!(summarize(&[], &groups, 2).is_err());
    }

    #[test]
    fn csv_has_running_average() {
        let r = MetricsRecord {
            accuracies: vec![80.0, 60.0],
            average_accuracy: 70.0,
            final_accuracy: 60.0,
            class_accuracy: vec![],
            group_accuracy: vec![],
        };
        assert_eq!(r.to_csv().unwrap(), "task,accuracy,average_accuracy\n1,80,80\n2,60,70\n");
    }

    #[test]
    fn median_handles_both_parities() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn single_correct_sample_scores_100() {
        let mut w = CosineClassifier::new(2);
        w.add_classes(&[4, 9], &mut seeds::stream(0, Purpose::Probes, &[])).unwrap();
        w.set_rows(&Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        let e = evaluate(&w, &Tensor::matrix(1, 2, vec![0.1, 3.0]).unwrap(), &[9]).unwrap();
        assert_eq!(e.accuracy(), 100.0);
    }

    #[test]
    fn random_classifier_is_near_chance() {
        let (m, d, n) = (5usize, 6usize, 400usize);
        let mut accs = Vec::new();
        for seed in 0..30 {
            let mut rng = seeds::stream(seed, Purpose::Probes, &[]);
            let mut w = CosineClassifier::new(d);
            w.add_classes(&(0..m).collect::<Vec<_>>(), &mut rng).unwrap();
            let feats: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..m)).collect();
            accs.push(evaluate(&w, &Tensor::matrix(n, d, feats).unwrap(), &labels).unwrap().accuracy());
        }
        let avg = mean(&accs);
        assert!((avg - 100.0 / m as f64).abs() < 3.0, "{avg}");
    }
}
