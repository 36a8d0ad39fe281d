//! Cosine classifier with an old/new row partition and the scaled
//! additive-margin cross-entropy.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::optim::Sgd;
use crate::tape::{Tape, Var};
use crate::tensor::{self, Tensor};

/// Scale `s` and additive margin `m` of the cross-entropy. A scale of 0 means
/// "no scaling" and behaves as 1, so `(0, 0)` is plain cross-entropy over
/// cosine logits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarginLossConfig {
    pub scale: f64,
    pub margin: f64,
}

impl MarginLossConfig {
    pub const PLAIN: Self = Self { scale: 0.0, margin: 0.0 };

    pub fn effective_scale(&self) -> f64 {
        if self.scale == 0.0 {
            1.0
        } else {
            self.scale
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale >= 0.0 && self.scale.is_finite()) {
            return Err(Error::Config {
                key: "train.scale".into(),
                detail: "must be finite and non-negative".into(),
            });
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::Config {
                key: "train.margin".into(),
                detail: "must be finite and non-negative".into(),
            });
        }
        Ok(())
    }
}

/// `-log(e^{s(x_y - m)} / (e^{s(x_y - m)} + Σ_{c≠y, allowed} e^{s x_c}))`.
pub fn margin_ce_loss(logits: &[f64], target: usize, allowed: Option<&[bool]>, cfg: MarginLossConfig) -> Result<f64> {
    if target >= logits.len() || allowed.is_some_and(|m| m.len() != logits.len() || !m[target]) {
        return Err(Error::usage(format!("invalid target class index {target}")));
    }
    let s = cfg.effective_scale();
    let z: Vec<f64> = logits
        .iter()
        .enumerate()
        .filter(|(c, _)| allowed.is_none_or(|m| m[*c]))
        .map(|(c, &x)| if c == target { s * (x - cfg.margin) } else { s * x })
        .collect();
    let zy = s * (logits[target] - cfg.margin);
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(lse - zy)
}

/// `[B, C]` cosines between feature rows `[B, d]` and class rows `[C, d]`.
pub fn cosine_logits_tape(tape: &mut Tape, features: Var, rows: Var) -> Result<Var> {
    let f = tape.l2_normalize(features)?;
    let w = tape.l2_normalize(rows)?;
    let wt = tape.transpose(w)?;
    tape.matmul(f, wt)
}

/// One weight row per seen class. Rows `..old_count` belong to classes of
/// earlier tasks, the rest to the current task.
#[derive(Clone, Debug, PartialEq)]
pub struct CosineClassifier {
    dim: usize,
    class_ids: Vec<usize>,
    rows: Vec<f64>,
    old_count: usize,
}

impl CosineClassifier {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            class_ids: Vec::new(),
            rows: Vec::new(),
            old_count: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    pub fn class_ids(&self) -> &[usize] {
        &self.class_ids
    }

    pub fn old_count(&self) -> usize {
        self.old_count
    }

    pub fn index_of(&self, class: usize) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == class)
    }

    pub fn rows(&self) -> Tensor {
        Tensor::from_parts(vec![self.len(), self.dim], self.rows.clone())
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    /// Rows of the current task's classes.
    pub fn new_rows(&self) -> Tensor {
        let n = self.len() - self.old_count;
        Tensor::from_parts(vec![n, self.dim], self.rows[self.old_count * self.dim..].to_vec())
    }

    pub fn set_new_rows(&mut self, rows: &Tensor) -> Result<()> {
        let start = self.old_count * self.dim;
        if rows.numel() != self.rows.len() - start {
            return Err(Error::dim("set_new_rows", self.rows.len() - start, rows.numel()));
        }
        self.rows[start..].copy_from_slice(rows.data());
        Ok(())
    }

    pub fn set_rows(&mut self, rows: &Tensor) -> Result<()> {
        if rows.numel() != self.rows.len() {
            return Err(Error::dim("set_rows", self.rows.len(), rows.numel()));
        }
        self.rows.copy_from_slice(rows.data());
        Ok(())
    }

    /// Moves every existing row to the old partition and appends randomly
    /// initialized rows for `classes`.
    pub fn add_classes<R: Rng>(&mut self, classes: &[usize], rng: &mut R) -> Result<()> {
        let rows = Self::initial_rows(classes.len(), self.dim, rng);
        self.append_classes(classes, &rows)
    }

    /// `n` rows drawn from `N(0, 1/d)`.
    pub fn initial_rows<R: Rng>(n: usize, dim: usize, rng: &mut R) -> Tensor {
        let scale = 1.0 / (dim as f64).sqrt();
        let data = (0..n * dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * scale
            })
            .collect();
        Tensor::from_parts(vec![n, dim], data)
    }

    /// Like [`CosineClassifier::add_classes`] with the new rows given.
    pub fn append_classes(&mut self, classes: &[usize], rows: &Tensor) -> Result<()> {
        if rows.shape() != [classes.len(), self.dim] {
            return Err(Error::dim("append_classes", format!("[{}, {}]", classes.len(), self.dim), format!("{:?}", rows.shape())));
        }
        for (i, &c) in classes.iter().enumerate() {
            if self.index_of(c).is_some() || classes[..i].contains(&c) {
                return Err(Error::Dataset(format!("class {c} already has a classifier row")));
            }
        }
        self.old_count = self.len();
        self.class_ids.extend_from_slice(classes);
        self.rows.extend_from_slice(rows.data());
        Ok(())
    }

    /// Cosine between `feature` and every class row.
    pub fn cosine_logits(&self, feature: &[f64]) -> Result<Tensor> {
        if feature.len() != self.dim {
            return Err(Error::dim("cosine_logits", self.dim, feature.len()));
        }
        let fnorm = tensor::checked_norm("cosine_logits", feature)?;
        let mut out = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            let row = self.row(i);
            let rnorm = tensor::checked_norm("cosine_logits (class row)", row)?;
            out.push((tensor::dot(feature, row) / (fnorm * rnorm)).clamp(-1.0, 1.0));
        }
        Tensor::new([out.len()], out)
    }

    /// Class id with the largest logit; ties go to the earlier row.
    pub fn predict(&self, feature: &[f64]) -> Result<usize> {
        let logits = self.cosine_logits(feature)?;
        let mut best = 0;
        for (i, &v) in logits.data().iter().enumerate() {
            if v > logits.data()[best] {
                best = i;
            }
        }
        self.class_ids
            .get(best)
            .copied()
            .ok_or_else(|| Error::usage("classifier has no classes"))
    }

    /// One cross-entropy step without margin over all rows on `features`
    /// `[n, d]` with class ids `labels`, logits scaled by `scale`. Returns the
    /// loss before the update.
    pub fn align_step(&mut self, features: &Tensor, labels: &[usize], scale: f64, opt: &mut Sgd, lr: f64) -> Result<f64> {
        let targets = labels
            .iter()
            .map(|&c| self.index_of(c).ok_or_else(|| Error::usage(format!("no classifier row for class {c}"))))
            .collect::<Result<Vec<usize>>>()?;
        let mut tape = Tape::new();
        let x = tape.constant(features.clone());
        let w = tape.param(self.rows());
        let logits = cosine_logits_tape(&mut tape, x, w)?;
        let cfg = MarginLossConfig { scale, margin: 0.0 };
        let loss = tape.margin_cross_entropy(logits, &targets, cfg.effective_scale(), cfg.margin, None)?;
        let value = tape.value(loss).data()[0];
        tape.backward(loss)?;
        let mut rows = self.rows();
        opt.step(vec![&mut rows], &[tape.grad(w)], lr)?;
        self.set_rows(&rows)?;
        Ok(value)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new();
        if !self.is_empty() {
            c.insert("rows", self.rows())?;
        }
        let ids: Vec<String> = self.class_ids.iter().map(usize::to_string).collect();
        c.set_meta("class_ids", ids.join(","));
        c.set_meta("old_count", self.old_count.to_string());
        c.set_meta("dim", self.dim.to_string());
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let parse = |s: &str| -> Result<usize> {
            s.parse().map_err(|_| Error::usage(format!("bad classifier metadata `{s}`")))
        };
        let dim = parse(c.meta("dim")?)?;
        let class_ids = c
            .meta("class_ids")?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(parse)
            .collect::<Result<Vec<usize>>>()?;
        let rows = if class_ids.is_empty() {
            Vec::new()
        } else {
            let t = c.get("rows")?;
            if t.shape() != [class_ids.len(), dim] {
                return Err(Error::dim("classifier checkpoint", format!("[{}, {dim}]", class_ids.len()), format!("{:?}", t.shape())));
            }
            t.data().to_vec()
        };
        Ok(Self {
            dim,
            class_ids,
            rows,
            old_count: parse(c.meta("old_count")?)?,
        })
    }
}

/// A batch of features with class ids used to fine-tune the classifier.
#[derive(Clone, Debug)]
pub struct AlignmentBatch {
    pub features: Tensor,
    pub labels: Vec<usize>,
}

/// Cross-entropy fine-tuning of every row over `epochs` passes through
/// `batches`. Returns the mean loss of each epoch.
pub fn align_classifier(
    w: &mut CosineClassifier,
    batches: &[AlignmentBatch],
    scale: f64,
    epochs: usize,
    lr: f64,
    momentum: f64,
) -> Result<Vec<f64>> {
    let mut opt = Sgd::new(momentum);
    let total = epochs * batches.len();
    let mut curve = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut sum = 0.0;
        for (i, b) in batches.iter().enumerate() {
            let step_lr = crate::optim::cosine_lr(lr, epoch * batches.len() + i, total);
            sum += w.align_step(&b.features, &b.labels, scale, &mut opt, step_lr)?;
        }
        curve.push(sum / batches.len().max(1) as f64);
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::random_tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn classifier(rows: Vec<Vec<f64>>) -> CosineClassifier {
        let dim = rows[0].len();
        CosineClassifier {
            dim,
            class_ids: (0..rows.len()).collect(),
            rows: rows.concat(),
            old_count: 0,
        }
    }

    #[test]
    fn logits_cases() {
        let w = classifier(vec![vec![1.0, 2.0], vec![-2.0, 1.0]]);
        let l = w.cosine_logits(&[2.0, 4.0]).unwrap();
        assert!((l.data()[0] - 1.0).abs() < 1e-15);
        assert!(l.data()[1].abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows = random_tensor(&mut rng, &[4, 5]);
        let w = classifier((0..4).map(|i| rows.row(i).to_vec()).collect());
        let f = random_tensor(&mut rng, &[5]);
        let got = w.cosine_logits(f.data()).unwrap();
        for i in 0..4 {
            let r = rows.row(i);
            let want = tensor::dot(r, f.data()) / (tensor::norm(r) * tensor::norm(f.data()));
            assert!((got.data()[i] - want).abs() < 1e-15);
        }
        let zero = classifier(vec![vec![0.0, 0.0]]);
        assert!(matches!(zero.cosine_logits(&[1.0, 0.0]), Err(Error::DegenerateInput { .. })));
        // prediction ignores feature scale
        assert_eq!(w.predict(f.data()).unwrap(), w.predict(&f.data().iter().map(|x| x * 7.5).collect::<Vec<_>>()).unwrap());
    }

    #[test]
    fn margin_loss_cases() {
        let e = std::f64::consts::E;
        let cfg = MarginLossConfig { scale: 1.0, margin: 0.0 };
        let got = margin_ce_loss(&[1.0, -1.0], 0, None, cfg).unwrap();
        assert!((got - -(e / (e + 1.0 / e)).ln()).abs() < 1e-15);
        // sentinel scale equals scale 1
        assert_eq!(margin_ce_loss(&[1.0, -1.0], 0, None, MarginLossConfig::PLAIN).unwrap(), got);
        // m = 0 is softmax cross-entropy on scaled logits
        let x = [0.3f64, -0.2, 0.9];
        let s = 16.0f64;
        let z: f64 = x.iter().map(|v| (s * v).exp()).sum();
        let want = -((s * x[1]).exp() / z).ln();
        let got = margin_ce_loss(&x, 1, None, MarginLossConfig { scale: s, margin: 0.0 }).unwrap();
        assert!((got - want).abs() < 1e-12);
        let mut last = got;
        for m in [0.05, 0.1, 0.3] {
            let l = margin_ce_loss(&x, 1, None, MarginLossConfig { scale: s, margin: m }).unwrap();
            assert!(l > last);
            last = l;
        }
        // masked classes leave the normalizer
        let mask = [false, true, true];
        let z2: f64 = x[1..].iter().map(|v| (s * v).exp()).sum();
        let got = margin_ce_loss(&x, 1, Some(&mask), MarginLossConfig { scale: s, margin: 0.0 }).unwrap();
        assert!((got - -((s * x[1]).exp() / z2).ln()).abs() < 1e-12);
        assert!(margin_ce_loss(&x, 3, None, cfg).is_err());
        assert!(margin_ce_loss(&x, 0, Some(&mask), cfg).is_err());
    }

    #[test]
    fn tape_loss_agrees_with_scalar_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let feats = random_tensor(&mut rng, &[3, 4]);
        let rows = random_tensor(&mut rng, &[5, 4]);
        let w = classifier((0..5).map(|i| rows.row(i).to_vec()).collect());
        let cfg = MarginLossConfig { scale: 16.0, margin: 0.1 };
        let targets = [4, 0, 2];
        let mask = vec![true, false, true, true, true];
        let mut tape = Tape::new();
        let f = tape.constant(feats.clone());
        let r = tape.param(rows);
        let logits = cosine_logits_tape(&mut tape, f, r).unwrap();
        let loss = tape.margin_cross_entropy(logits, &targets, 16.0, 0.1, Some(mask.clone())).unwrap();
        let want: f64 = targets
            .iter()
            .enumerate()
            .map(|(b, &y)| margin_ce_loss(w.cosine_logits(feats.row(b)).unwrap().data(), y, Some(&mask), cfg).unwrap())
            .sum::<f64>()
            / 3.0;
        assert!((tape.value(loss).data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn add_classes_moves_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut w = CosineClassifier::new(4);
        w.add_classes(&[7, 3], &mut rng).unwrap();
        assert_eq!((w.len(), w.old_count()), (2, 0));
        w.add_classes(&[5], &mut rng).unwrap();
        assert_eq!((w.len(), w.old_count()), (3, 2));
        assert_eq!(w.index_of(5), Some(2));
        assert_eq!(w.new_rows().shape(), &[1, 4]);
        assert!(w.add_classes(&[3], &mut rng).is_err());
        let back = CosineClassifier::from_checkpoint(&w.to_checkpoint().unwrap()).unwrap();
        assert_eq!(back, w);
    }

    #[test]
    fn alignment_zero_epochs_and_monotone_sanity() {
        let mut w = classifier(vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]);
        let batch = AlignmentBatch {
            features: Tensor::new([2, 3], vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap(),
            labels: vec![0, 0],
        };
        let before = w.clone();
        align_classifier(&mut w, std::slice::from_ref(&batch), 1.0, 0, 0.1, 0.9).unwrap();
        assert_eq!(w, before);
        let curve = align_classifier(&mut w, &[batch], 1.0, 20, 0.05, 0.0).unwrap();
        for pair in curve.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12, "{curve:?}");
        }
        assert!(w.align_step(&Tensor::zeros([1, 3]), &[9], 1.0, &mut Sgd::new(0.0), 0.1).is_err());
    }
}
