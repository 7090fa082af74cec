//! Episodic few-shot tasks: sine regression, synthetic Gaussian-cluster
//! classification, and image-folder classification.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{shape_err, Error, Result};
use crate::ndtensor::Tensor;

pub const SINE_AMPLITUDE: (f64, f64) = (0.1, 5.0);
pub const SINE_PHASE: (f64, f64) = (0.0, PI);
pub const SINE_INPUT: (f64, f64) = (-5.0, 5.0);
pub const SINE_DEFAULT_QUERIES: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Sine,
    Synthetic,
    Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskMeta {
    pub kind: TaskKind,
    pub n_way: usize,
    pub k_shot: usize,
    pub amplitude: Option<f64>,
    pub phase: Option<f64>,
    /// Source class behind each episode label (image episodes).
    pub source_classes: Vec<usize>,
    /// `(class, image index)` of every support then query example (image episodes).
    pub source_items: Vec<(usize, usize)>,
}

impl TaskMeta {
    fn new(kind: TaskKind, n_way: usize, k_shot: usize) -> Self {
        Self { kind, n_way, k_shot, amplitude: None, phase: None, source_classes: vec![], source_items: vec![] }
    }
}

/// One episode: support and query sets stored as row matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub support_x: Tensor,
    pub support_y: Tensor,
    pub query_x: Tensor,
    pub query_y: Tensor,
    pub meta: TaskMeta,
}

impl Task {
    pub fn new(support_x: Tensor, support_y: Tensor, query_x: Tensor, query_y: Tensor, meta: TaskMeta) -> Result<Self> {
        if support_x.rank() != 2 || support_y.rank() != 2 || query_x.rank() != 2 || query_y.rank() != 2 {
            return shape_err("task sets must be row matrices");
        }
        if support_x.rows() == 0 {
            return Err(Error::Contract("task support set is empty".into()));
        }
        if support_x.rows() != support_y.rows() || query_x.rows() != query_y.rows() {
            return shape_err("inputs and targets disagree in count");
        }
        if support_x.cols() != query_x.cols() || support_y.cols() != query_y.cols() {
            return shape_err("support and query disagree in width");
        }
        Ok(Self { support_x, support_y, query_x, query_y, meta })
    }

    pub fn support_len(&self) -> usize {
        self.support_x.rows()
    }

    pub fn query_len(&self) -> usize {
        self.query_x.rows()
    }

    pub fn x_dim(&self) -> usize {
        self.support_x.cols()
    }

    pub fn y_dim(&self) -> usize {
        self.support_y.cols()
    }

    pub fn is_classification(&self) -> bool {
        self.meta.kind != TaskKind::Sine
    }

    pub fn support_pairs(&self) -> impl Iterator<Item = (&[f64], &[f64])> {
        (0..self.support_len()).map(|i| (self.support_x.row(i), self.support_y.row(i)))
    }

    pub fn query_pairs(&self) -> impl Iterator<Item = (&[f64], &[f64])> {
        (0..self.query_len()).map(|i| (self.query_x.row(i), self.query_y.row(i)))
    }

    /// The same task with support rows reordered by `order`.
    pub fn with_support_order(&self, order: &[usize]) -> Result<Task> {
        check_permutation(order, self.support_len())?;
        let pick = |t: &Tensor| {
            Tensor::from_rows(&order.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>())
        };
        Ok(Task { support_x: pick(&self.support_x)?, support_y: pick(&self.support_y)?, ..self.clone() })
    }

    /// The same task with the query set replaced.
    pub fn with_query(&self, query_x: Tensor, query_y: Tensor) -> Result<Task> {
        Task::new(self.support_x.clone(), self.support_y.clone(), query_x, query_y, self.meta.clone())
    }
}

pub(crate) fn check_permutation(order: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if order.len() != n || order.iter().any(|&i| i >= n || std::mem::replace(&mut seen[i], true)) {
        return Err(Error::Contract(format!("order is not a permutation of 0..{n}")));
    }
    Ok(())
}

pub fn sine_target(amplitude: f64, phase: f64, x: f64) -> f64 {
    amplitude * (x - phase).sin()
}

/// Builds a sine task from explicit inputs.
pub fn sine_task(amplitude: f64, phase: f64, support: &[f64], query: &[f64]) -> Result<Task> {
    let col = |xs: &[f64]| Tensor::matrix(xs.len(), 1, xs.to_vec());
    let ys = |xs: &[f64]| xs.iter().map(|&x| sine_target(amplitude, phase, x)).collect::<Vec<_>>();
    let mut meta = TaskMeta::new(TaskKind::Sine, 0, support.len());
    meta.amplitude = Some(amplitude);
    meta.phase = Some(phase);
    Task::new(col(support)?, col(&ys(support))?, col(query)?, col(&ys(query))?, meta)
}

/// `A ~ U[0.1, 5]`, `p ~ U[0, π]`, inputs `x ~ U[-5, 5]`, targets `A sin(x - p)`.
pub fn sample_sine_task<R: Rng + ?Sized>(rng: &mut R, k: usize, q: usize) -> Result<Task> {
    if k == 0 || q == 0 {
        return Err(Error::Contract("sine task needs k ≥ 1 and q ≥ 1".into()));
    }
    let amplitude = rng.gen_range(SINE_AMPLITUDE.0..=SINE_AMPLITUDE.1);
    let phase = rng.gen_range(SINE_PHASE.0..=SINE_PHASE.1);
    let mut draw = |n: usize| (0..n).map(|_| rng.gen_range(SINE_INPUT.0..=SINE_INPUT.1)).collect::<Vec<_>>();
    let support = draw(k);
    let query = draw(q);
    sine_task(amplitude, phase, &support, &query)
}

fn one_hot_rows(labels: &[usize], n: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), n]);
    for (r, &l) in labels.iter().enumerate() {
        t.data_mut()[r * n + l] = 1.0;
    }
    t
}

/// Episode from labelled support and query inputs; labels must be in `0..n_way`.
pub fn classification_task(
    kind: TaskKind,
    n_way: usize,
    k_shot: usize,
    support: (Vec<Vec<f64>>, Vec<usize>),
    query: (Vec<Vec<f64>>, Vec<usize>),
) -> Result<Task> {
    if support.1.iter().chain(&query.1).any(|&l| l >= n_way) {
        return Err(Error::Contract(format!("label outside 0..{n_way}")));
    }
    let dim = support.0.first().map_or(0, Vec::len);
    let rows = |xs: &[Vec<f64>]| {
        if xs.is_empty() {
            Ok(Tensor::zeros(&[0, dim]))
        } else {
            Tensor::from_rows(xs)
        }
    };
    Task::new(
        rows(&support.0)?,
        one_hot_rows(&support.1, n_way),
        rows(&query.0)?,
        one_hot_rows(&query.1, n_way),
        TaskMeta::new(kind, n_way, k_shot),
    )
}

/// `N` random unit-norm centers; examples are `center + spread·N(0, I)`.
/// `q` is the number of query examples per class.
pub fn sample_synthetic_episode<R: Rng + ?Sized>(
    rng: &mut R,
    n_way: usize,
    k: usize,
    q: usize,
    dim: usize,
    spread: f64,
) -> Result<Task> {
    if n_way < 2 || k == 0 || dim == 0 {
        return Err(Error::Contract("synthetic episode needs N ≥ 2, k ≥ 1, dim ≥ 1".into()));
    }
    let centers: Vec<Vec<f64>> = (0..n_way)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / n).collect()
        })
        .collect();
    let mut labels: Vec<usize> = (0..n_way).collect();
    labels.shuffle(rng);
    let mut draw = |count: usize| {
        let mut xs = Vec::with_capacity(count * n_way);
        let mut ys = Vec::with_capacity(count * n_way);
        for (c, center) in centers.iter().enumerate() {
            for _ in 0..count {
                xs.push(center.iter().map(|&m| m + spread * rng.sample::<f64, _>(StandardNormal)).collect());
                ys.push(labels[c]);
            }
        }
        (xs, ys)
    };
    let support = draw(k);
    let query = draw(q);
    classification_task(TaskKind::Synthetic, n_way, k, support, query)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Flattened grayscale images in `[0, 1]`, grouped by class.
#[derive(Clone, Debug)]
pub struct ImageDataset {
    pub class_names: Vec<String>,
    pub images: Vec<Vec<Vec<f64>>>,
    pub width: u32,
    pub height: u32,
    pub split: Split,
}

impl ImageDataset {
    pub fn pixel_count(&self) -> usize {
        (self.width * self.height) as usize
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    /// Partitions classes (in name order) into disjoint train/val/test datasets.
    pub fn split_classes(self, val_frac: f64, test_frac: f64) -> Result<(ImageDataset, ImageDataset, ImageDataset)> {
        let n = self.class_count();
        let n_test = ((n as f64) * test_frac).round() as usize;
        let n_val = ((n as f64) * val_frac).round() as usize;
        if n_test + n_val >= n {
            return Err(Error::Contract(format!("{n} classes cannot be split {val_frac}/{test_frac}")));
        }
        let n_train = n - n_val - n_test;
        let mut names = self.class_names.into_iter();
        let mut images = self.images.into_iter();
        let mut take = |count: usize, split: Split| ImageDataset {
            class_names: names.by_ref().take(count).collect(),
            images: images.by_ref().take(count).collect(),
            width: self.width,
            height: self.height,
            split,
        };
        let train = take(n_train, Split::Train);
        let val = take(n_val, Split::Val);
        let test = take(n_test, Split::Test);
        Ok((train, val, test))
    }
}

fn is_image_file(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "pgm" | "pnm")
    )
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Dataset { path: dir.to_path_buf(), msg: e.to_string() })?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    out.sort();
    Ok(out)
}

/// Loads `root/<class_name>/<image files>`; class and file order are lexicographic.
pub fn load_image_dataset(root: &Path, split: Split) -> Result<ImageDataset> {
    let mut class_names = Vec::new();
    let mut images = Vec::new();
    let mut size: Option<(u32, u32)> = None;
    for class_dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let mut class_images = Vec::new();
        for file in sorted_entries(&class_dir)?.into_iter().filter(|p| is_image_file(p)) {
            let img = image::open(&file)
                .map_err(|e| Error::Dataset { path: file.clone(), msg: e.to_string() })?
                .into_luma8();
            let dims = img.dimensions();
            match size {
                None => size = Some(dims),
                Some(s) if s != dims => {
                    return Err(Error::Dataset {
                        path: file,
                        msg: format!("image is {}x{}, dataset uses {}x{}", dims.0, dims.1, s.0, s.1),
                    })
                }
                _ => {}
            }
            class_images.push(img.into_raw().into_iter().map(|p| p as f64 / 255.0).collect());
        }
        if class_images.is_empty() {
            continue;
        }
        class_names.push(class_dir.file_name().unwrap_or_default().to_string_lossy().into_owned());
        images.push(class_images);
    }
    let (width, height) = size.ok_or_else(|| Error::Dataset { path: root.to_path_buf(), msg: "no images found".into() })?;
    Ok(ImageDataset { class_names, images, width, height, split })
}

/// Samples `n_way` classes without replacement, then `k + q` distinct images
/// per class; `q` counts query images per class.
pub fn sample_image_episode<R: Rng + ?Sized>(ds: &ImageDataset, rng: &mut R, n_way: usize, k: usize, q: usize) -> Result<Task> {
    if n_way < 2 || n_way > ds.class_count() || k == 0 {
        return Err(Error::Contract(format!("cannot sample {n_way}-way episodes from {} classes", ds.class_count())));
    }
    let classes: Vec<usize> = rand::seq::index::sample(rng, ds.class_count(), n_way).into_vec();
    let mut support = (Vec::new(), Vec::new());
    let mut query = (Vec::new(), Vec::new());
    let mut items_s = Vec::new();
    let mut items_q = Vec::new();
    for (label, &c) in classes.iter().enumerate() {
        let pool = &ds.images[c];
        if pool.len() < k + q {
            return Err(Error::Dataset {
                path: PathBuf::from(&ds.class_names[c]),
                msg: format!("class has {} images, episode needs {}", pool.len(), k + q),
            });
        }
        let picks = rand::seq::index::sample(rng, pool.len(), k + q).into_vec();
        for (n, &idx) in picks.iter().enumerate() {
            if n < k {
                support.0.push(pool[idx].clone());
                support.1.push(label);
                items_s.push((c, idx));
            } else {
                query.0.push(pool[idx].clone());
                query.1.push(label);
                items_q.push((c, idx));
            }
        }
    }
    let mut task = classification_task(TaskKind::Image, n_way, k, support, query)?;
    task.meta.source_classes = classes;
    items_s.extend(items_q);
    task.meta.source_items = items_s;
    Ok(task)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sine_targets() {
        assert_eq!(sine_target(1.0, 0.0, 0.0), 0.0);
        assert!(sine_target(2.0, PI / 2.0, PI / 2.0).abs() < 1e-15);
    }

    #[test]
    fn sine_parameter_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 10_000;
        let (mut a, mut p) = (0.0, 0.0);
        for _ in 0..n {
            let t = sample_sine_task(&mut rng, 1, 1).unwrap();
            a += t.meta.amplitude.unwrap();
            p += t.meta.phase.unwrap();
        }
        // E[A] = 2.55, E[p] = π/2
        assert!((a / n as f64 - 2.55).abs() < 0.05);
        assert!((p / n as f64 - PI / 2.0).abs() < 0.03);
    }

    #[test]
    fn sine_task_shapes_and_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = sample_sine_task(&mut rng, 5, SINE_DEFAULT_QUERIES).unwrap();
        assert_eq!((t.support_len(), t.query_len(), t.x_dim(), t.y_dim()), (5, 50, 1, 1));
        let amp = t.meta.amplitude.unwrap();
        assert!(t.support_y.data().iter().chain(t.query_y.data()).all(|y| y.abs() <= amp && amp <= 5.0));
        assert!(sample_sine_task(&mut rng, 0, 5).is_err());
    }

    #[test]
    fn synthetic_counts_and_relabeling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = sample_synthetic_episode(&mut rng, 2, 1, 4, 8, 0.1).unwrap();
        assert_eq!(t.support_len(), 2);
        assert_eq!(t.query_len(), 8);
        let mut labels: Vec<usize> =
            t.support_pairs().map(|(_, y)| y.iter().position(|&v| v == 1.0).unwrap()).collect();
        labels.sort();
        assert_eq!(labels, vec![0, 1]);
        assert!(sample_synthetic_episode(&mut rng, 1, 1, 1, 4, 0.1).is_err());
    }

    #[test]
    fn noiseless_synthetic_is_separable() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let t = sample_synthetic_episode(&mut rng, 5, 1, 3, 16, 0.0).unwrap();
            for (x, y) in t.query_pairs() {
                let nearest = t
                    .support_pairs()
                    .map(|(s, sy)| (s.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), sy))
                    .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
                    .unwrap();
                assert_eq!(nearest.1, y);
            }
        }
    }

    #[test]
    fn samplers_are_deterministic() {
        let a = sample_synthetic_episode(&mut ChaCha8Rng::seed_from_u64(9), 5, 2, 3, 4, 0.3).unwrap();
        let b = sample_synthetic_episode(&mut ChaCha8Rng::seed_from_u64(9), 5, 2, 3, 4, 0.3).unwrap();
        assert_eq!(a, b);
        let a = sample_sine_task(&mut ChaCha8Rng::seed_from_u64(9), 5, 10).unwrap();
        let b = sample_sine_task(&mut ChaCha8Rng::seed_from_u64(9), 5, 10).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn support_reordering_checks_permutation() {
        let t = sine_task(1.0, 0.0, &[0.0, 1.0, 2.0], &[0.5]).unwrap();
        let r = t.with_support_order(&[2, 0, 1]).unwrap();
        assert_eq!(r.support_x.data(), &[2.0, 0.0, 1.0]);
        assert!(t.with_support_order(&[0, 0, 1]).is_err());
        assert!(t.with_support_order(&[0, 1]).is_err());
    }

    #[test]
    fn empty_support_is_rejected() {
        assert!(sine_task(1.0, 0.0, &[], &[0.5]).is_err());
    }
}
