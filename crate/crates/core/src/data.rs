//! Datasets, input encoding and batching.

use std::fs;
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ReadBytesExt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SnasError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How a sample becomes one input tensor per timestep.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Encoding {
    /// Repeat a static real-valued input; the stem produces spikes.
    #[default]
    Direct,
    /// Binary temporal frames passed through unchanged.
    Spike,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    SyntheticPatterns(SyntheticSpec),
    IdxImages {
        images: PathBuf,
        labels: PathBuf,
    },
    /// Headered CSV; every column except `label_column` is a feature.
    CsvTable {
        path: PathBuf,
        label_column: String,
    },
}

/// Class-conditional spike motifs with bit-flip noise; see
/// [`synthetic_patterns`]. Evidence for the class grows frame by frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub samples_per_class: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub density: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::SyntheticPatterns(SyntheticSpec::default())
    }
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 3,
            samples_per_class: 300,
            channels: 2,
            height: 8,
            width: 8,
            frames: 4,
            density: 0.25,
            noise: 0.05,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    /// `[frames, channels, height, width]`.
    pub x: Tensor<T>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub samples: Vec<Sample<T>>,
    pub classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// Inputs for one pass: `[batch, c, h, w]` per timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub steps: Vec<Tensor<T>>,
    pub labels: Vec<usize>,
}

impl<T> Batch<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub fn load_dataset<T: Scalar>(spec: &DatasetSpec) -> Result<Dataset<T>> {
    match spec {
        DatasetSpec::SyntheticPatterns(p) => synthetic_patterns(
            p.classes,
            p.samples_per_class,
            [p.channels, p.height, p.width],
            p.frames,
            p.density,
            p.noise,
            p.seed,
        ),
        DatasetSpec::IdxImages { images, labels } => load_idx(images, labels),
        DatasetSpec::CsvTable { path, label_column } => load_csv(path, label_column),
    }
}

/// Side of the square motif tiled by synthetic classes.
const MOTIF: usize = 3;

/// Class-conditional spike frames: frame `f` of `frames` takes each bit from
/// the class motif with probability `(f + 1) / frames` and from a shared
/// motif otherwise, under a random per-sample phase, then flips it with
/// probability `noise`.
pub fn synthetic_patterns<T: Scalar>(
    classes: usize,
    samples_per_class: usize,
    shape: [usize; 3],
    frames: usize,
    density: f64,
    noise: f64,
    seed: u64,
) -> Result<Dataset<T>> {
    if classes < 2 || samples_per_class == 0 || frames == 0 || shape.contains(&0) {
        return Err(SnasError::Dataset(
            "synthetic patterns need ≥2 classes and positive sizes".into(),
        ));
    }
    if !(0.0..=1.0).contains(&density) || !(0.0..=1.0).contains(&noise) {
        return Err(SnasError::Dataset(
            "density and noise must lie in [0, 1]".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [c, h, w] = shape;
    let n = frames * c * h * w;
    // each class tiles its own small motif over the frame; the shared motif
    // is the distractor that early frames mostly show
    let motif_len = c * MOTIF * MOTIF;
    let draw = |rng: &mut ChaCha8Rng| -> Vec<bool> {
        (0..motif_len).map(|_| rng.gen_bool(density)).collect()
    };
    let shared = draw(&mut rng);
    let motifs: Vec<Vec<bool>> = (0..classes).map(|_| draw(&mut rng)).collect();
    let mut samples = Vec::with_capacity(classes * samples_per_class);
    for _ in 0..samples_per_class {
        for (label, motif) in motifs.iter().enumerate() {
            let (oy, ox) = (rng.gen_range(0..MOTIF), rng.gen_range(0..MOTIF));
            let mut data = Vec::with_capacity(n);
            for f in 0..frames {
                let own = (f + 1) as f64 / frames as f64;
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            let m = (ch * MOTIF + (y + oy) % MOTIF) * MOTIF + (x + ox) % MOTIF;
                            let bit = if rng.gen_bool(own) {
                                motif[m]
                            } else {
                                shared[m]
                            };
                            data.push(if bit ^ rng.gen_bool(noise) {
                                T::one()
                            } else {
                                T::zero()
                            });
                        }
                    }
                }
            }
            samples.push(Sample {
                x: Tensor::new(vec![frames, c, h, w], data)?,
                label,
            });
        }
    }
    Ok(Dataset {
        samples,
        classes,
        channels: shape[0],
        height: shape[1],
        width: shape[2],
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| SnasError::Dataset(format!("{}: {e}", path.display())))
}

/// Parses an IDX container of unsigned bytes; returns dims and payload.
pub fn parse_idx(bytes: &[u8]) -> Result<(Vec<usize>, &[u8])> {
    let mut cur = bytes;
    let magic = cur
        .read_u32::<BigEndian>()
        .map_err(|_| SnasError::Dataset("IDX file shorter than its magic number".into()))?;
    if magic >> 16 != 0 || (magic >> 8) & 0xff != 0x08 {
        return Err(SnasError::Dataset(format!(
            "unsupported IDX magic {magic:#010x} (expected unsigned bytes)"
        )));
    }
    let ndim = (magic & 0xff) as usize;
    if ndim == 0 {
        return Err(SnasError::Dataset(
            "IDX file declares zero dimensions".into(),
        ));
    }
    let dims = (0..ndim)
        .map(|_| cur.read_u32::<BigEndian>().map(|d| d as usize))
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|_| SnasError::Dataset("IDX header truncated".into()))?;
    let expect: usize = dims.iter().product();
    if cur.len() != expect {
        return Err(SnasError::Dataset(format!(
            "IDX payload has {} bytes, header promises {expect}",
            cur.len()
        )));
    }
    Ok((dims, cur))
}

/// Image file `[n, h, w]` (or `[n, c, h, w]`) plus label file `[n]`;
/// pixels scaled to `[0, 1]`.
pub fn load_idx<T: Scalar>(images: &Path, labels: &Path) -> Result<Dataset<T>> {
    let img_bytes = read_file(images)?;
    let lbl_bytes = read_file(labels)?;
    let (dims, pixels) = parse_idx(&img_bytes)?;
    let (ldims, lbls) = parse_idx(&lbl_bytes)?;
    let (n, c, h, w) = match dims.as_slice() {
        [n, h, w] => (*n, 1, *h, *w),
        [n, c, h, w] => (*n, *c, *h, *w),
        _ => {
            return Err(SnasError::Dataset(format!(
                "IDX images need 3 or 4 dims, got {dims:?}"
            )))
        }
    };
    if ldims != [n] {
        return Err(SnasError::Dataset(format!(
            "{n} images but label dims {ldims:?}"
        )));
    }
    let per = c * h * w;
    let scale = T::lit(1.0 / 255.0);
    let samples = (0..n)
        .map(|i| {
            let data = pixels[i * per..(i + 1) * per]
                .iter()
                .map(|&p| T::lit(f64::from(p)) * scale)
                .collect();
            Ok(Sample {
                x: Tensor::new(vec![1, c, h, w], data)?,
                label: lbls[i] as usize,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let classes = lbls.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    Ok(Dataset {
        samples,
        classes,
        channels: c,
        height: h,
        width: w,
    })
}

/// Features become a `1 × 1 × F` input.
pub fn load_csv<T: Scalar>(path: &Path, label_column: &str) -> Result<Dataset<T>> {
    let text = fs::read_to_string(path)
        .map_err(|e| SnasError::Dataset(format!("{}: {e}", path.display())))?;
    parse_csv(&text, label_column)
}

pub fn parse_csv<T: Scalar>(text: &str, label_column: &str) -> Result<Dataset<T>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| SnasError::Dataset(e.to_string()))?
        .clone();
    let label_idx = headers
        .iter()
        .position(|h| h.trim() == label_column)
        .ok_or_else(|| SnasError::Dataset(format!("CSV has no label column {label_column:?}")))?;
    let features = headers.len() - 1;
    if features == 0 {
        return Err(SnasError::Dataset("CSV has no feature columns".into()));
    }
    let mut samples = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| SnasError::Dataset(format!("CSV row {}: {e}", row + 2)))?;
        let mut data = Vec::with_capacity(features);
        let mut label = 0;
        for (i, field) in rec.iter().enumerate() {
            let bad = || SnasError::Dataset(format!("CSV row {}: cannot parse {field:?}", row + 2));
            if i == label_idx {
                label = field.trim().parse::<usize>().map_err(|_| bad())?;
            } else {
                data.push(T::lit(field.trim().parse::<f64>().map_err(|_| bad())?));
            }
        }
        samples.push(Sample {
            x: Tensor::new(vec![1, 1, 1, features], data)?,
            label,
        });
    }
    let classes = samples.iter().map(|s| s.label + 1).max().unwrap_or(0);
    Ok(Dataset {
        samples,
        classes,
        channels: 1,
        height: 1,
        width: features,
    })
}

/// Per-timestep inputs for one sample `[frames, c, h, w]`.
pub fn encode_input<T: Scalar>(
    x: &Tensor<T>,
    steps: usize,
    mode: Encoding,
) -> Result<Vec<Tensor<T>>> {
    let s = x.shape();
    if s.len() != 4 || steps == 0 {
        return Err(SnasError::invalid(format!(
            "encode_input expects [frames, c, h, w] and steps > 0, got {s:?}"
        )));
    }
    let frame = s[1..].to_vec();
    let per: usize = frame.iter().product();
    let take = |f: usize| Tensor::new(frame.clone(), x.data()[f * per..(f + 1) * per].to_vec());
    match mode {
        Encoding::Direct => {
            if s[0] != 1 {
                return Err(SnasError::invalid(
                    "direct encoding expects a single static frame",
                ));
            }
            (0..steps).map(|_| take(0)).collect()
        }
        Encoding::Spike => {
            if !x.is_binary() {
                return Err(SnasError::invalid("spike encoding expects binary input"));
            }
            if s[0] < steps {
                return Err(SnasError::invalid(format!(
                    "{} frames cannot feed {steps} timesteps",
                    s[0]
                )));
            }
            (0..steps).map(take).collect()
        }
    }
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset<T> {
        Dataset {
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
            classes: self.classes,
            channels: self.channels,
            height: self.height,
            width: self.width,
        }
    }

    /// Seeded shuffle into `(train, test)` with `round(len · test_fraction)`
    /// test samples.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Dataset<T>, Dataset<T>)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(SnasError::Config(format!(
                "test fraction {test_fraction} outside [0, 1)"
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_test = (self.len() as f64 * test_fraction).round() as usize;
        Ok((self.subset(&idx[n_test..]), self.subset(&idx[..n_test])))
    }

    /// Stacks the selected samples into per-timestep batch tensors.
    pub fn batch(&self, idx: &[usize], steps: usize, mode: Encoding) -> Result<Batch<T>> {
        if idx.is_empty() {
            return Err(SnasError::invalid("empty batch"));
        }
        let frame = self.channels * self.height * self.width;
        let mut data = vec![Vec::with_capacity(idx.len() * frame); steps];
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            let s = self
                .samples
                .get(i)
                .ok_or_else(|| SnasError::invalid(format!("sample {i} out of range")))?;
            for (t, x) in encode_input(&s.x, steps, mode)?.into_iter().enumerate() {
                data[t].extend_from_slice(x.data());
            }
            labels.push(s.label);
        }
        let shape = vec![idx.len(), self.channels, self.height, self.width];
        let steps = data
            .into_iter()
            .map(|d| Tensor::new(shape.clone(), d))
            .collect::<Result<Vec<_>>>()?;
        Ok(Batch { steps, labels })
    }
}
