//! Image datasets: the binary file format, a synthetic generator, and task
//! splits.
//!
//! Binary layout (integers little-endian):
//!
//! | offset          | size        | content                       |
//! |-----------------|-------------|-------------------------------|
//! | 0               | 8           | magic `DIADSET1`              |
//! | 8               | 4 × 5       | `u32` N, H, W, C, M           |
//! | 28              | N·H·W·C     | `u8` pixels, image-major HWC  |
//! | 28 + N·H·W·C    | 4 × N       | `u32` labels in `[0, M)`      |

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds::{self, Purpose};

pub const MAGIC: &[u8; 8] = b"DIADSET1";
const HEADER: usize = 28;

/// Labelled `u8` images of a common geometry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
    pixels: Vec<u8>,
    labels: Vec<u32>,
}

impl Dataset {
    pub fn new(height: usize, width: usize, channels: usize, classes: usize, pixels: Vec<u8>, labels: Vec<u32>) -> Result<Self> {
        let per = height * width * channels;
        if per == 0 {
            return Err(Error::Dataset("image dimensions must be positive".into()));
        }
        if pixels.len() != per * labels.len() {
            return Err(Error::Dataset(format!(
                "{} pixel bytes do not match {} images of {per} bytes",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::Dataset(format!("label {l} outside [0, {classes})")));
        }
        Ok(Self {
            height,
            width,
            channels,
            classes,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// Indices of samples whose label is in `classes`, in dataset order.
    pub fn indices_of(&self, classes: &[usize]) -> Vec<usize> {
        (0..self.len()).filter(|&i| classes.contains(&self.label(i))).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER + self.pixels.len() + 4 * self.labels.len());
        out.extend_from_slice(MAGIC);
        for v in [self.len(), self.height, self.width, self.channels, self.classes] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.pixels);
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let need = |want: usize, what: &str| -> Result<()> {
            if bytes.len() < want {
                Err(Error::Format {
                    offset: bytes.len() as u64,
                    detail: format!("truncated {what}: missing {} bytes", want - bytes.len()),
                })
            } else {
                Ok(())
            }
        };
        need(8, "magic")?;
        if &bytes[..8] != MAGIC {
            return Err(Error::Format {
                offset: 0,
                detail: "bad dataset magic".into(),
            });
        }
        need(HEADER, "header")?;
        let field = |k: usize| u32::from_le_bytes(bytes[8 + 4 * k..12 + 4 * k].try_into().expect("4 bytes")) as usize;
        let (n, h, w, c, m) = (field(0), field(1), field(2), field(3), field(4));
        let pix = n * h * w * c;
        need(HEADER + pix, "pixel block")?;
        need(HEADER + pix + 4 * n, "label block")?;
        let pixels = bytes[HEADER..HEADER + pix].to_vec();
        let labels = bytes[HEADER + pix..HEADER + pix + 4 * n]
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        Self::new(h, w, c, m, pixels, labels).map_err(|e| Error::Format {
            offset: HEADER as u64,
            detail: e.to_string(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load_raw(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Pixel values mapped to `[-0.5, 0.5]`, in image layout.
    pub fn normalized(&self, i: usize) -> Vec<f64> {
        self.image(i).iter().map(|&p| f64::from(p) / 255.0 - 0.5).collect()
    }
}

/// Parameters of the synthetic image world.
///
/// Images are grids of cells, each showing one motif out of a shared
/// dictionary. Every class owns a palette of `palette` motifs and a fixed
/// layout drawn from it. Each cell of a sample keeps its layout motif, is
/// redrawn from the palette with probability `layout_jitter`, or from the
/// whole dictionary with probability `corruption`. The image is then shifted by up to
/// `max_shift` pixels, its contrast scaled by a random factor in
/// `1 ± contrast_jitter`, and Gaussian pixel noise of standard deviation
/// `noise` added.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub eval_per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    pub cell_size: usize,
    pub motifs: usize,
    pub palette: usize,
    pub layout_jitter: f64,
    pub noise: f64,
    pub corruption: f64,
    pub max_shift: usize,
    pub contrast_jitter: f64,
    pub world_seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            train_per_class: 200,
            eval_per_class: 50,
            image_size: 16,
            channels: 1,
            cell_size: 4,
            motifs: 16,
            palette: 3,
            layout_jitter: 1.0,
            noise: 0.1,
            corruption: 0.25,
            max_shift: 0,
            contrast_jitter: 0.2,
            world_seed: 1,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, detail: &str| {
            Err(Error::Config {
                key: format!("data.synthetic.{key}"),
                detail: detail.into(),
            })
        };
        if self.classes == 0 {
            return bad("classes", "must be positive");
        }
        if self.cell_size == 0 || self.image_size % self.cell_size != 0 {
            return bad("cell_size", "must be positive and divide image_size");
        }
        if self.channels == 0 {
            return bad("channels", "must be positive");
        }
        if self.motifs < 2 {
            return bad("motifs", "need at least two motifs");
        }
        if self.palette == 0 || self.palette > self.motifs {
            return bad("palette", "must lie in [1, motifs]");
        }
        if !(0.0..=1.0).contains(&self.layout_jitter) {
            return bad("layout_jitter", "must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.corruption) {
            return bad("corruption", "must lie in [0, 1]");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise", "must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.contrast_jitter) {
            return bad("contrast_jitter", "must lie in [0, 1)");
        }
        if self.max_shift >= self.image_size {
            return bad("max_shift", "must be smaller than image_size");
        }
        Ok(())
    }
}

/// Motif dictionary and class templates fixed by `world_seed`.
#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    spec: SyntheticSpec,
    /// `motifs × cell² × channels` intensities in `[0, 1]`.
    motifs: Vec<Vec<f64>>,
}

impl SyntheticWorld {
    pub fn new(spec: SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = seeds::stream(spec.world_seed, Purpose::Dataset, &[0]);
        let n = spec.cell_size * spec.cell_size * spec.channels;
        let motifs = (0..spec.motifs)
            .map(|_| (0..n).map(|_| if rng.random_bool(0.5) { rng.random_range(0.6..1.0) } else { rng.random_range(0.0..0.3) }).collect())
            .collect();
        Ok(Self { spec, motifs })
    }

    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }

    fn cells(&self) -> usize {
        (self.spec.image_size / self.spec.cell_size).pow(2)
    }

    /// Motif palette and per-cell layout of class `class` (any non-negative
    /// id; ids past `spec.classes` give further classes of the same world).
    pub fn template(&self, class: usize) -> (Vec<usize>, Vec<usize>) {
        let mut rng = seeds::stream(self.spec.world_seed, Purpose::Dataset, &[1, class as u64]);
        let palette = rand::seq::index::sample(&mut rng, self.spec.motifs, self.spec.palette).into_vec();
        let layout = (0..self.cells()).map(|_| palette[rng.random_range(0..palette.len())]).collect();
        (palette, layout)
    }

    fn render<R: Rng>(&self, (palette, layout): &(Vec<usize>, Vec<usize>), rng: &mut R) -> Vec<u8> {
        let s = &self.spec;
        let (size, cell, ch) = (s.image_size, s.cell_size, s.channels);
        let per_side = size / cell;
        let cells: Vec<usize> = layout
            .iter()
            .map(|&m| {
                if rng.random_bool(s.corruption) {
                    rng.random_range(0..s.motifs)
                } else if rng.random_bool(s.layout_jitter) {
                    palette[rng.random_range(0..palette.len())]
                } else {
                    m
                }
            })
            .collect();
        let shift = s.max_shift as i64;
        let (dy, dx) = if shift > 0 {
            (rng.random_range(-shift..=shift), rng.random_range(-shift..=shift))
        } else {
            (0, 0)
        };
        let contrast = if s.contrast_jitter > 0.0 {
            rng.random_range(1.0 - s.contrast_jitter..=1.0 + s.contrast_jitter)
        } else {
            1.0
        };
        let noise = Normal::new(0.0, s.noise.max(0.0)).expect("finite std");
        let mut out = Vec::with_capacity(size * size * ch);
        for y in 0..size {
            for x in 0..size {
                let (sy, sx) = (y as i64 - dy, x as i64 - dx);
                for c in 0..ch {
                    let base = if (0..size as i64).contains(&sy) && (0..size as i64).contains(&sx) {
                        let (sy, sx) = (sy as usize, sx as usize);
                        let m = cells[(sy / cell) * per_side + sx / cell];
                        self.motifs[m][((sy % cell) * cell + sx % cell) * ch + c]
                    } else {
                        0.0
                    };
                    let mut v = 0.5 + (base - 0.5) * contrast;
                    if s.noise > 0.0 {
                        v += noise.sample(rng);
                    }
                    out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        out
    }

    /// `per_class` samples for each class in `classes`, labelled by position
    /// in `classes`, drawn from the stream keyed by `seed` and `tag`.
    pub fn sample(&self, classes: &[usize], per_class: usize, seed: u64, tag: u64) -> Result<Dataset> {
        let s = &self.spec;
        let mut pixels = Vec::with_capacity(classes.len() * per_class * s.image_size * s.image_size * s.channels);
        let mut labels = Vec::with_capacity(classes.len() * per_class);
        for (label, &class) in classes.iter().enumerate() {
            let template = self.template(class);
            let mut rng = seeds::stream(seed, Purpose::Dataset, &[2, tag, class as u64]);
            for _ in 0..per_class {
                pixels.extend(self.render(&template, &mut rng));
                labels.push(label as u32);
            }
        }
        Dataset::new(s.image_size, s.image_size, s.channels, classes.len().max(1), pixels, labels)
    }

    /// Train and eval sets for the classes `0..spec.classes`.
    pub fn generate(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        let classes: Vec<usize> = (0..self.spec.classes).collect();
        Ok((
            self.sample(&classes, self.spec.train_per_class, seed, 0)?,
            self.sample(&classes, self.spec.eval_per_class, seed, 1)?,
        ))
    }
}

/// Train and eval sets for `spec` with sampling seed `seed`.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    SyntheticWorld::new(spec.clone())?.generate(seed)
}

/// An ordered partition of class ids into disjoint task groups.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSplit {
    groups: Vec<Vec<usize>>,
}

impl TaskSplit {
    /// Shuffles `0..classes` with `seed` and cuts it into `tasks` groups
    /// whose sizes differ by at most one.
    pub fn new(classes: usize, tasks: usize, seed: u64) -> Result<Self> {
        if tasks == 0 || tasks > classes {
            return Err(Error::Dataset(format!("cannot split {classes} classes into {tasks} tasks")));
        }
        let mut order: Vec<usize> = (0..classes).collect();
        order.shuffle(&mut seeds::stream(seed, Purpose::ClassOrder, &[]));
        let mut groups = Vec::with_capacity(tasks);
        let mut start = 0;
        for t in 0..tasks {
            let size = classes / tasks + usize::from(t < classes % tasks);
            groups.push(order[start..start + size].to_vec());
            start += size;
        }
        Self::from_groups(groups, classes)
    }

    /// Validates that `groups` are non-empty, disjoint and cover `0..classes`.
    pub fn from_groups(groups: Vec<Vec<usize>>, classes: usize) -> Result<Self> {
        let mut seen = vec![None; classes];
        for (t, g) in groups.iter().enumerate() {
            if g.is_empty() {
                return Err(Error::Dataset(format!("task {t} has no classes")));
            }
            for &c in g {
                match seen.get(c) {
                    None => return Err(Error::Dataset(format!("class {c} outside [0, {classes})"))),
                    Some(Some(other)) => {
                        return Err(Error::Dataset(format!("class {c} appears in tasks {other} and {t}")))
                    }
                    Some(None) => seen[c] = Some(t),
                }
            }
        }
        if let Some(c) = seen.iter().position(Option::is_none) {
            return Err(Error::Dataset(format!("class {c} belongs to no task")));
        }
        Ok(Self { groups })
    }

    pub fn tasks(&self) -> usize {
        self.groups.len()
    }

    pub fn classes(&self, task: usize) -> &[usize] {
        &self.groups[task]
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    /// Classes of tasks `0..=task`.
    pub fn seen(&self, task: usize) -> Vec<usize> {
        self.groups[..=task].concat()
    }

    pub fn task_of(&self, class: usize) -> Option<usize> {
        self.groups.iter().position(|g| g.contains(&class))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            classes: 4,
            train_per_class: 20,
            eval_per_class: 10,
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_and_layout() {
        let (train, _) = generate_synthetic(&small_spec(), 3).unwrap();
        let bytes = train.to_bytes();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 80);
        assert_eq!(Dataset::from_bytes(&bytes).unwrap(), train);
        let last = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        assert_eq!(last, 3);
    }

    #[test]
    fn truncation_names_missing_bytes() {
        let (train, _) = generate_synthetic(&small_spec(), 3).unwrap();
        let bytes = train.to_bytes();
        let err = Dataset::from_bytes(&bytes[..bytes.len() - 6]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("missing 6 bytes") && msg.contains("label block"), "{msg}");
        assert!(matches!(err, Error::Format { .. }));
        let err = Dataset::from_bytes(&bytes[..100]).unwrap_err().to_string();
        assert!(err.contains("pixel block"), "{err}");
        let mut bad = bytes.clone();
        bad[3] = 0;
        assert!(Dataset::from_bytes(&bad).unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn empty_dataset_is_valid() {
        let d = Dataset::new(2, 2, 1, 3, vec![], vec![]).unwrap();
        let back = Dataset::from_bytes(&d.to_bytes()).unwrap();
        assert!(back.is_empty());
        assert_eq!(back, d);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic(&small_spec(), 9).unwrap();
        let b = generate_synthetic(&small_spec(), 9).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&small_spec(), 10).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn noiseless_samples_of_a_class_are_identical() {
        let spec = SyntheticSpec {
            noise: 0.0,
            corruption: 0.0,
            layout_jitter: 0.0,
            max_shift: 0,
            contrast_jitter: 0.0,
            ..small_spec()
        };
        let (train, _) = generate_synthetic(&spec, 1).unwrap();
        for c in 0..4 {
            let idx = train.indices_of(&[c]);
            assert!(idx.iter().all(|&i| train.image(i) == train.image(idx[0])));
        }
        assert_ne!(train.image(0), train.image(train.indices_of(&[1])[0]));
    }

    #[test]
    fn nearest_neighbour_beats_chance() {
        let spec = SyntheticSpec {
            classes: 10,
            train_per_class: 30,
            eval_per_class: 10,
            ..Default::default()
        };
        let (train, eval) = generate_synthetic(&spec, 2).unwrap();
        let dist = |a: &[u8], b: &[u8]| -> i64 { a.iter().zip(b).map(|(&x, &y)| (i64::from(x) - i64::from(y)).pow(2)).sum() };
        let mut correct = 0;
        for i in 0..eval.len() {
            let best = (0..train.len()).min_by_key(|&j| dist(eval.image(i), train.image(j))).unwrap();
            correct += usize::from(train.label(best) == eval.label(i));
        }
        let acc = correct as f64 / eval.len() as f64;
        assert!(acc > 0.1 + 0.1, "1-NN accuracy {acc}");
    }

    #[test]
    fn split_rejects_overlap_and_gaps() {
        assert!(TaskSplit::from_groups(vec![vec![0, 1], vec![1, 2]], 3).is_err());
        assert!(TaskSplit::from_groups(vec![vec![0], vec![2]], 3).is_err());
        assert!(TaskSplit::from_groups(vec![vec![0], vec![]], 1).is_err());
        assert!(TaskSplit::new(3, 4, 0).is_err());
        let s = TaskSplit::new(10, 5, 0).unwrap();
        assert_eq!(s.seen(1).len(), 4);
        assert_eq!(s.task_of(s.classes(3)[1]), Some(3));
    }

    proptest! {
        #[test]
        fn splits_are_disjoint_and_exhaustive(classes in 1usize..40, tasks in 1usize..10, seed in any::<u64>()) {
            prop_assume!(tasks <= classes);
            let s = TaskSplit::new(classes, tasks, seed).unwrap();
            let mut all: Vec<usize> = s.groups().concat();
            all.sort_unstable();
            prop_assert_eq!(all, (0..classes).collect::<Vec<_>>());
            let sizes: Vec<usize> = s.groups().iter().map(Vec::len).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }
    }
}
