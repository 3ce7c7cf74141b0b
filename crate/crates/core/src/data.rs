//! Synthetic source/target domains, zero padding with the reprogramming
//! mask, pair construction for the similarity encoder, and the `RPGD`
//! dataset container.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use reprog_kernel::io::{read_header, read_tensor, read_u32, write_header, write_tensor, write_u32};
use reprog_kernel::{KernelError, Tensor};

use crate::error::{config_err, CoreError, Result};
use crate::seeded_rng;

pub const DATASET_MAGIC: [u8; 4] = *b"RPGD";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    fn tag(self) -> &'static str {
        match self {
            Domain::Source => "domain:source",
            Domain::Target => "domain:target",
        }
    }
}

/// Images in `[-1, 1]^{d x d x c}` (HWC, row-major) with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub samples: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub domain: Domain,
}

impl LabeledDataset {
    pub fn new(
        samples: Vec<Tensor>,
        labels: Vec<usize>,
        num_classes: usize,
        domain: Domain,
    ) -> Result<Self> {
        if samples.len() != labels.len() {
            return Err(CoreError::InvalidInput(format!(
                "{} samples but {} labels",
                samples.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(CoreError::InvalidInput(format!(
                "label {bad} outside 0..{num_classes}"
            )));
        }
        if let Some(first) = samples.first() {
            if samples.iter().any(|s| s.dims() != first.dims()) {
                return Err(CoreError::InvalidInput("samples have mixed dims".into()));
            }
            if samples.iter().any(|s| s.max_abs() > 1.0) {
                return Err(CoreError::InvalidInput("sample value outside [-1, 1]".into()));
            }
        }
        Ok(Self {
            samples,
            labels,
            num_classes,
            domain,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_dims(&self) -> Option<&[usize]> {
        self.samples.first().map(|s| s.dims())
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            domain: self.domain,
        }
    }

    /// First `n` samples and the rest.
    pub fn split_at(&self, n: usize) -> (LabeledDataset, LabeledDataset) {
        let n = n.min(self.len());
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        (self.subset(&head), self.subset(&tail))
    }

    /// Seeded permutation of the samples.
    pub fn shuffled(&self, seed: u64) -> LabeledDataset {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut seeded_rng(seed, 0x5f));
        self.subset(&idx)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

fn finish_image(values: Vec<f64>, dims: &[usize]) -> Tensor {
    let clipped = values.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect();
    Tensor::new(dims.to_vec(), clipped).expect("generator emits finite values")
}

/// Fixed (seed-independent) pattern parameters of source class `k`.
struct GaborClass {
    freq: f64,
    orientation: f64,
    phase: f64,
    color: [f64; 3],
}

fn gabor_class(k: usize, classes: usize) -> GaborClass {
    // Alternate two spatial frequencies so that consecutive label blocks mix them.
    let freq = [2.0, 4.5][k % 2];
    let orientation = PI * (k / 2) as f64 / (classes.div_ceil(2)) as f64;
    let phase = 0.7 * k as f64;
    let hue = 2.0 * PI * k as f64 / classes as f64;
    let color = [
        0.65 + 0.35 * hue.cos(),
        0.65 + 0.35 * (hue + 2.0 * PI / 3.0).cos(),
        0.65 + 0.35 * (hue + 4.0 * PI / 3.0).cos(),
    ];
    GaborClass {
        freq,
        orientation,
        phase,
        color,
    }
}

/// Source-domain stand-in: oriented Gabor-like gratings whose frequency,
/// orientation, phase and color depend on the class, with per-sample jitter
/// and additive noise.
pub fn gen_source_dataset(
    seed: u64,
    classes: usize,
    per_class: usize,
    d: usize,
    c: usize,
) -> Result<LabeledDataset> {
    if classes < 1 || d == 0 || c == 0 {
        return config_err("source dataset needs >= 1 class and positive dims");
    }
    let mut rng = seeded_rng(seed, 0x50);
    let noise = Normal::new(0.0, 0.12).unwrap();
    let jitter = Normal::new(0.0, 0.2).unwrap();
    let dims = [d, d, c];
    let mut samples = Vec::with_capacity(classes * per_class);
    let mut labels = Vec::with_capacity(classes * per_class);
    for k in 0..classes {
        let class = gabor_class(k, classes);
        for _ in 0..per_class {
            let amp = rng.random_range(0.55..0.95);
            let phase = class.phase + jitter.sample(&mut rng);
            let theta = class.orientation + 0.1 * jitter.sample(&mut rng);
            let cx = d as f64 / 2.0 + rng.random_range(-0.5..0.5);
            let cy = d as f64 / 2.0 + rng.random_range(-0.5..0.5);
            let env_scale = (d as f64 / 2.5).powi(2);
            let (ct, st) = (theta.cos(), theta.sin());
            let mut values = Vec::with_capacity(d * d * c);
            for i in 0..d {
                for j in 0..d {
                    let (y, x) = (i as f64 - cy, j as f64 - cx);
                    let env = (-(x * x + y * y) / (2.0 * env_scale)).exp();
                    let wave = (2.0 * PI * class.freq * (x * ct + y * st) / d as f64 + phase).cos();
                    for ch in 0..c {
                        let tint = class.color[ch % 3];
                        values.push(amp * tint * env * wave + noise.sample(&mut rng));
                    }
                }
            }
            samples.push(finish_image(values, &dims));
            labels.push(k);
        }
    }
    LabeledDataset::new(samples, labels, classes, Domain::Source)
}

/// Target-domain stand-in: faint soft blobs on a dim background. Class `k`
/// has `1 + 3k` smaller blobs at a layout fixed per class, and a cooler
/// tint; samples differ by per-blob jitter, brightness and noise that are
/// small next to the class signal.
pub fn gen_target_dataset(
    seed: u64,
    classes: usize,
    per_class: usize,
    d: usize,
    c: usize,
) -> Result<LabeledDataset> {
    if classes < 1 || d == 0 || c == 0 {
        return config_err("target dataset needs >= 1 class and positive dims");
    }
    let mut rng = seeded_rng(seed, 0x7a);
    let noise = Normal::new(0.0, 0.03).unwrap();
    let dims = [d, d, c];
    let size = d as f64;
    let jitter = size / 16.0;
    let mut samples = Vec::with_capacity(classes * per_class);
    let mut labels = Vec::with_capacity(classes * per_class);
    for k in 0..classes {
        let level = if classes > 1 {
            k as f64 / (classes - 1) as f64
        } else {
            0.0
        };
        let tint = [0.015 - 0.03 * level, 0.0, -0.015 + 0.03 * level];
        let radius = size * 0.28 / (1.0 + 0.6 * k as f64);
        // layout depends on the class only, so every split shares it
        let mut layout_rng = seeded_rng(k as u64, 0x7b);
        let layout: Vec<(f64, f64)> = (0..1 + 3 * k)
            .map(|_| {
                (
                    layout_rng.random_range(0.2 * size..0.8 * size),
                    layout_rng.random_range(0.2 * size..0.8 * size),
                )
            })
            .collect();
        for _ in 0..per_class {
            let blobs: Vec<(f64, f64)> = layout
                .iter()
                .map(|&(y, x)| {
                    (
                        y + rng.random_range(-jitter..=jitter),
                        x + rng.random_range(-jitter..=jitter),
                    )
                })
                .collect();
            let brightness = rng.random_range(-0.05..0.05);
            let mut values = Vec::with_capacity(d * d * c);
            for i in 0..d {
                for j in 0..d {
                    let mut blob = 0.0;
                    for &(by, bx) in &blobs {
                        let dist2 = (i as f64 - by).powi(2) + (j as f64 - bx).powi(2);
                        blob += 0.075 * (-dist2 / (2.0 * radius * radius)).exp();
                    }
                    for ch in 0..c {
                        let v = -0.3 + brightness + blob + tint[ch % 3] + noise.sample(&mut rng);
                        values.push(v);
                    }
                }
            }
            samples.push(finish_image(values, &dims));
            labels.push(k);
        }
    }
    LabeledDataset::new(samples, labels, classes, Domain::Target)
}

/// Centered placement of a `d' x d' x c` target image inside a `d x d x c` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PaddingSpec {
    pub inner: usize,
    pub outer: usize,
    pub channels: usize,
}

impl PaddingSpec {
    pub fn new(inner: usize, outer: usize, channels: usize) -> Result<Self> {
        if inner == 0 || channels == 0 || inner >= outer {
            return config_err(format!(
                "padding needs 0 < inner ({inner}) < outer ({outer}) and channels > 0"
            ));
        }
        Ok(Self {
            inner,
            outer,
            channels,
        })
    }

    pub fn offset(&self) -> usize {
        (self.outer - self.inner) / 2
    }

    pub fn outer_dims(&self) -> [usize; 3] {
        [self.outer, self.outer, self.channels]
    }

    pub fn inner_dims(&self) -> [usize; 3] {
        [self.inner, self.inner, self.channels]
    }

    fn in_center(&self, i: usize, j: usize) -> bool {
        let o = self.offset();
        (o..o + self.inner).contains(&i) && (o..o + self.inner).contains(&j)
    }

    /// 1 on the frame, 0 over the embedded image, in every channel.
    pub fn mask(&self) -> Tensor {
        let (d, c) = (self.outer, self.channels);
        let mut m = Vec::with_capacity(d * d * c);
        for i in 0..d {
            for j in 0..d {
                let v = if self.in_center(i, j) { 0.0 } else { 1.0 };
                m.extend(std::iter::repeat_n(v, c));
            }
        }
        Tensor::new(self.outer_dims().to_vec(), m).unwrap()
    }

    /// Zero-pad `x` into the center of the outer frame.
    pub fn pad(&self, x: &Tensor) -> Result<Tensor> {
        if x.dims() != self.inner_dims() {
            return Err(CoreError::InvalidInput(format!(
                "expected target sample {:?}, got {:?}",
                self.inner_dims(),
                x.dims()
            )));
        }
        let (d, dp, c, o) = (self.outer, self.inner, self.channels, self.offset());
        let mut out = vec![0.0; d * d * c];
        for i in 0..dp {
            let src = &x.data()[i * dp * c..(i + 1) * dp * c];
            let start = ((i + o) * d + o) * c;
            out[start..start + dp * c].copy_from_slice(src);
        }
        Ok(Tensor::new(self.outer_dims().to_vec(), out)?)
    }

    /// Cells per channel that lie on the frame.
    pub fn frame_cells_per_channel(&self) -> usize {
        self.outer * self.outer - self.inner * self.inner
    }
}

pub fn pad_and_mask(x: &Tensor, spec: &PaddingSpec) -> Result<(Tensor, Tensor)> {
    Ok((spec.pad(x)?, spec.mask()))
}

/// 0 = same class ("similar"), 1 = different classes ("dissimilar").
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Pair {
    pub first: usize,
    pub second: usize,
    pub label: u8,
}

/// Sample pairs referencing a shared pool of source samples.
#[derive(Debug, Clone)]
pub struct PairDataset {
    pub samples: Vec<Tensor>,
    pub class_labels: Vec<usize>,
    pub pairs: Vec<Pair>,
}

impl PairDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn get(&self, j: usize) -> (&Tensor, &Tensor, u8) {
        let p = self.pairs[j];
        (&self.samples[p.first], &self.samples[p.second], p.label)
    }

    pub fn count_label(&self, label: u8) -> usize {
        self.pairs.iter().filter(|p| p.label == label).count()
    }
}

fn draw_pairs(
    ds: &LabeledDataset,
    want_same: bool,
    count: usize,
    available: usize,
    rng: &mut impl Rng,
) -> Vec<Pair> {
    let label = if want_same { 0 } else { 1 };
    let matches = |i: usize, j: usize| (ds.labels[i] == ds.labels[j]) == want_same;
    if count == 0 {
        return Vec::new();
    }
    if count * 2 > available {
        let mut all: Vec<Pair> = (0..ds.len())
            .flat_map(|i| (i + 1..ds.len()).map(move |j| (i, j)))
            .filter(|&(i, j)| matches(i, j))
            .map(|(first, second)| Pair {
                first,
                second,
                label,
            })
            .collect();
        all.shuffle(rng);
        all.truncate(count);
        return all;
    }
    let mut seen = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let i = rng.random_range(0..ds.len());
        let j = rng.random_range(0..ds.len());
        if i == j || !matches(i, j) || !seen.insert((i.min(j), i.max(j))) {
            continue;
        }
        out.push(Pair {
            first: i,
            second: j,
            label,
        });
    }
    out
}

/// Exactly `p` distinct pairs, `round(balance * p)` of them same-class.
pub fn make_pairs(ds: &LabeledDataset, seed: u64, p: usize, balance: f64) -> Result<PairDataset> {
    if !(0.0..=1.0).contains(&balance) {
        return config_err(format!("balance {balance} outside [0, 1]"));
    }
    let counts = ds.class_counts();
    let same_available: usize = counts.iter().map(|&n| n * n.saturating_sub(1) / 2).sum();
    let total = ds.len() * ds.len().saturating_sub(1) / 2;
    let diff_available = total - same_available;
    let n_same = (balance * p as f64).round() as usize;
    let n_diff = p - n_same;
    if n_same > same_available || n_diff > diff_available {
        return config_err(format!(
            "requested {n_same} similar / {n_diff} dissimilar pairs but only \
             {same_available} / {diff_available} exist"
        ));
    }
    let mut rng = seeded_rng(seed, 0x9a);
    let mut pairs = draw_pairs(ds, true, n_same, same_available, &mut rng);
    pairs.extend(draw_pairs(ds, false, n_diff, diff_available, &mut rng));
    pairs.shuffle(&mut rng);
    Ok(PairDataset {
        samples: ds.samples.clone(),
        class_labels: ds.labels.clone(),
        pairs,
    })
}

/// `RPGD` file: tensor container whose first record is the domain tag
/// holding `[num_classes]`, followed by one tensor per sample, then one
/// `u32` label per sample.
pub fn write_dataset(w: &mut impl Write, ds: &LabeledDataset) -> Result<()> {
    write_header(w, DATASET_MAGIC, ds.len() + 1)?;
    let meta = Tensor::vector(vec![ds.num_classes as f64])?;
    write_tensor(w, ds.domain.tag(), &meta)?;
    for s in &ds.samples {
        write_tensor(w, "x", s)?;
    }
    for &l in &ds.labels {
        write_u32(w, l as u32)?;
    }
    Ok(())
}

pub fn read_dataset(r: &mut impl Read) -> Result<LabeledDataset> {
    let fmt = |m: String| CoreError::Kernel(KernelError::Format(m));
    let count = read_header(r, DATASET_MAGIC)?;
    if count == 0 {
        return Err(fmt("dataset lacks its domain record".into()));
    }
    let (tag, meta) = read_tensor(r)?;
    let domain = match tag.as_str() {
        "domain:source" => Domain::Source,
        "domain:target" => Domain::Target,
        other => return Err(fmt(format!("unknown domain tag {other:?}"))),
    };
    let num_classes = meta.data()[0] as usize;
    let mut samples = Vec::with_capacity(count - 1);
    for _ in 1..count {
        samples.push(read_tensor(r)?.1);
    }
    let labels = (0..samples.len())
        .map(|_| read_u32(r).map(|v| v as usize))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    LabeledDataset::new(samples, labels, num_classes, domain)
        .map_err(|e| fmt(format!("inconsistent dataset: {e}")))
}

pub fn save_dataset(path: impl AsRef<Path>, ds: &LabeledDataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(&mut w, ds)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    read_dataset(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_and_sized() {
        let a = gen_source_dataset(3, 12, 5, 32, 3).unwrap();
        let b = gen_source_dataset(3, 12, 5, 32, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 60);
        assert_eq!(a.sample_dims().unwrap(), &[32, 32, 3]);
        let t1 = gen_target_dataset(9, 2, 200, 16, 3).unwrap();
        assert_eq!(t1, gen_target_dataset(9, 2, 200, 16, 3).unwrap());
        assert_eq!(t1.len(), 400);
        assert_eq!(t1.sample_dims().unwrap(), &[16, 16, 3]);
        assert_ne!(t1, gen_target_dataset(10, 2, 200, 16, 3).unwrap());
    }

    #[test]
    fn full_scale_frame_has_10176_cells_per_channel() {
        let spec = PaddingSpec::new(200, 224, 3).unwrap();
        assert_eq!(spec.frame_cells_per_channel(), 10_176);
        let ones = spec.mask().sum() as usize;
        assert_eq!(ones, 3 * 10_176);
    }

    #[test]
    fn tiny_mask_geometry() {
        let spec = PaddingSpec::new(2, 4, 1).unwrap();
        let m = spec.mask();
        assert_eq!(m.sum(), 12.0);
        #[rustfmt::skip]
        let want = [1., 1., 1., 1.,
                    1., 0., 0., 1.,
                    1., 0., 0., 1.,
                    1., 1., 1., 1.];
        assert_eq!(m.data(), &want);
        let x = Tensor::new(vec![2, 2, 1], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let (padded, _) = pad_and_mask(&x, &spec).unwrap();
        assert_eq!(padded.data()[5..7], [0.1, 0.2]);
        assert_eq!(padded.data()[9..11], [0.3, 0.4]);
        assert_eq!(padded.hadamard(&m).unwrap().sum(), 0.0);
    }

    #[test]
    fn padding_rejects_inner_not_smaller() {
        assert!(PaddingSpec::new(16, 16, 3).is_err());
        assert!(PaddingSpec::new(20, 16, 3).is_err());
        let spec = PaddingSpec::new(2, 4, 1).unwrap();
        assert!(spec.pad(&Tensor::zeros(&[3, 3, 1])).is_err());
    }

    #[test]
    fn pair_counts_and_errors() {
        let ds = gen_source_dataset(1, 3, 4, 4, 1).unwrap();
        let p = make_pairs(&ds, 0, 10, 0.5).unwrap();
        assert_eq!(p.len(), 10);
        assert_eq!(p.count_label(0), 5);
        let all_same = make_pairs(&ds, 0, 18, 1.0).unwrap();
        assert_eq!(all_same.count_label(0), 18);
        // only 3 * C(4, 2) = 18 same-class pairs exist
        assert!(make_pairs(&ds, 0, 19, 1.0).is_err());
        let uniq: HashSet<(usize, usize)> = all_same
            .pairs
            .iter()
            .map(|p| (p.first.min(p.second), p.first.max(p.second)))
            .collect();
        assert_eq!(uniq.len(), 18);
    }

    #[test]
    fn dataset_codec_round_trips_and_rejects_corruption() {
        let ds = gen_target_dataset(4, 2, 3, 4, 3).unwrap();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &ds).unwrap();
        assert_eq!(read_dataset(&mut buf.as_slice()).unwrap(), ds);

        let mut bad = buf.clone();
        bad[..4].copy_from_slice(b"RPGW");
        assert!(read_dataset(&mut bad.as_slice()).is_err());
        assert!(read_dataset(&mut &buf[..buf.len() - 2]).is_err());

        let empty = LabeledDataset::new(vec![], vec![], 5, Domain::Source).unwrap();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &empty).unwrap();
        assert_eq!(read_dataset(&mut buf.as_slice()).unwrap(), empty);
    }
}
