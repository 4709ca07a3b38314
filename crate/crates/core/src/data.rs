//! Synthetic live / physical-attack / digital-attack image benchmark.
//!
//! Every class has a base pattern in pixel space:
//!
//! * live: a smooth radial gradient with a per-channel tint;
//! * physical attack: live plus a coarse blocky checkerboard (print/moiré proxy);
//! * digital attack: live plus a pixel-level checkerboard (generator-artifact proxy).
//!
//! With unit-RMS textures `B` (blocky) and `K` (fine) and amplitude `A`, the
//! fake patterns are `live + A[(½ + g/4)B + (½ − g/4)K]` and the same with `B`
//! and `K` swapped, where `g` is the gap. The fake-class centroid then sits at
//! `live + A(B + K)/2` and the two fake modes are `g` times that centroid's
//! distance from live apart: `g = 0` collapses them, `g = 2` places each fake
//! exactly on its own texture.
//!
//! A sample is its class pattern plus a per-subject offset (shared by all of
//! that subject's samples, whatever their class) plus i.i.d. pixel noise,
//! clipped to `[0, 1]` and rounded to `f32`.

use std::fmt;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 8] = b"UADS0001";
pub const SPLIT_NAMES: [&str; 3] = ["train", "eval", "test"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Fake,
    Live,
}

impl Label {
    /// Row order used when class prompts are stacked: live first.
    pub const BY_INDEX: [Label; 2] = [Label::Live, Label::Fake];

    pub fn index(self) -> usize {
        match self {
            Label::Live => 0,
            Label::Fake => 1,
        }
    }

    /// On-disk code: live = 1, fake = 0.
    pub fn code(self) -> u8 {
        match self {
            Label::Live => 1,
            Label::Fake => 0,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(Label::Live),
            0 => Some(Label::Fake),
            _ => None,
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            Label::Live => "live",
            Label::Fake => "fake",
        }
    }

    pub fn is_live(self) -> bool {
        self == Label::Live
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subtype {
    Live,
    Phys,
    Digital,
}

impl Subtype {
    pub const ALL: [Subtype; 3] = [Subtype::Live, Subtype::Phys, Subtype::Digital];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn label(self) -> Label {
        match self {
            Subtype::Live => Label::Live,
            _ => Label::Fake,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Subtype::Live => "live",
            Subtype::Phys => "phys",
            Subtype::Digital => "digital",
        }
    }
}

impl fmt::Display for Subtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    /// `H×W×C`, values in `[0, 1]`, each exactly representable as `f32`.
    pub image: Tensor<f64>,
    pub label: Label,
    pub subtype: Subtype,
    pub subject_id: u32,
}

/// One split of samples sharing an image geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub samples: Vec<LabeledSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn count(&self, subtype: Subtype) -> usize {
        self.samples.iter().filter(|s| s.subtype == subtype).count()
    }

    pub fn count_label(&self, label: Label) -> usize {
        self.samples.iter().filter(|s| s.label == label).count()
    }

    pub fn subject_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.samples.iter().map(|s| s.subject_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub eval: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub fn get(&self, name: &str) -> Option<&Dataset> {
        match name {
            "train" => Some(&self.train),
            "eval" => Some(&self.eval),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, &Dataset)> {
        SPLIT_NAMES.into_iter().zip([&self.train, &self.eval, &self.test])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDatasetSpec {
    pub seed: u64,
    /// Subjects in the train, eval and test splits.
    pub subjects: [usize; 3],
    /// Samples per subject for live, physical and digital subtypes.
    pub per_subject: [usize; 3],
    pub image_size: usize,
    pub channels: usize,
    pub noise_sigma: f64,
    /// Separation of the two fake modes relative to the live-to-fake-centroid distance.
    pub gap: f64,
    /// Texture amplitude `A` in pixel units.
    pub amplitude: f64,
    /// Scale of the per-subject offset field.
    pub subject_sigma: f64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            subjects: [20, 5, 5],
            per_subject: [2, 2, 2],
            image_size: 32,
            channels: 3,
            noise_sigma: 0.05,
            gap: 2.0,
            amplitude: 0.05,
            subject_sigma: 0.1,
        }
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset spec: {0}")]
    Spec(String),
    #[error("dataset I/O: {0}")]
    Io(#[from] io::Error),
    #[error("bad dataset magic at offset 0")]
    BadMagic,
    #[error("dataset truncated at offset {offset}: header declares {declared} samples, {found} present")]
    Truncated { offset: usize, declared: usize, found: usize },
    #[error("dataset has {extra} trailing bytes at offset {offset} beyond the declared {declared} samples")]
    CountMismatch { offset: usize, declared: usize, extra: usize },
    #[error("invalid {what} at offset {offset}")]
    Field { offset: usize, what: &'static str },
    #[error("batching: {0}")]
    Batch(String),
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Spec(m.to_string()));
        if self.subjects.iter().any(|&c| c == 0) || self.per_subject.iter().any(|&c| c == 0) {
            return bad("subject and per-subject counts must be positive");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be >= 0");
        }
        if !(self.gap >= 0.0 && self.gap.is_finite()) {
            return bad("gap must be >= 0");
        }
        if !(self.amplitude > 0.0 && self.amplitude.is_finite()) {
            return bad("amplitude must be > 0");
        }
        if !(self.subject_sigma >= 0.0 && self.subject_sigma.is_finite()) {
            return bad("subject_sigma must be >= 0");
        }
        // Block texture needs an even number of pixels per block edge to stay
        // orthogonal to the pixel checkerboard.
        if self.image_size < 8 || self.image_size % 8 != 0 {
            return bad("image_size must be a positive multiple of 8");
        }
        if self.channels == 0 {
            return bad("channels must be positive");
        }
        if self.subjects.iter().sum::<usize>() > u32::MAX as usize {
            return bad("too many subjects");
        }
        Ok(())
    }

    /// Samples per split per class: `[split][live, fake]`.
    pub fn class_counts(&self) -> [[usize; 2]; 3] {
        let live = self.per_subject[0];
        let fake = self.per_subject[1] + self.per_subject[2];
        self.subjects.map(|s| [s * live, s * fake])
    }

    fn pixels(&self) -> usize {
        self.image_size * self.image_size * self.channels
    }

    /// Live, blocky and fine textures: the live pattern and two unit-RMS,
    /// zero-mean, mutually orthogonal textures.
    pub fn textures(&self) -> [Vec<f64>; 3] {
        let (n, c) = (self.image_size, self.channels);
        let block = 2 * (n / 16).max(1);
        let center = (n as f64 - 1.0) / 2.0;
        let radius = center * std::f64::consts::SQRT_2;
        let mut live = Vec::with_capacity(self.pixels());
        let mut blocky = Vec::with_capacity(self.pixels());
        let mut fine = Vec::with_capacity(self.pixels());
        for y in 0..n {
            for x in 0..n {
                let r = ((y as f64 - center).powi(2) + (x as f64 - center).powi(2)).sqrt() / radius;
                for ch in 0..c {
                    let tint = 0.05 * (ch as f64 - (c as f64 - 1.0) / 2.0);
                    live.push(0.5 + 0.25 * (std::f64::consts::PI * r).cos() + tint);
                    let b = if ((y / block) + (x / block)) % 2 == 0 { 1.0 } else { -1.0 };
                    blocky.push(b);
                    fine.push(if (y + x) % 2 == 0 { 1.0 } else { -1.0 });
                }
            }
        }
        [live, blocky, fine]
    }

    /// Noise-free, offset-free pattern of each subtype, in `Subtype::ALL` order.
    pub fn base_patterns(&self) -> [Vec<f64>; 3] {
        let [live, blocky, fine] = self.textures();
        let a = self.amplitude;
        let (major, minor) = (0.5 + self.gap / 4.0, 0.5 - self.gap / 4.0);
        let mix = |p: &[f64], q: &[f64]| -> Vec<f64> {
            live.iter()
                .zip(p.iter().zip(q))
                .map(|(&l, (&pv, &qv))| l + a * (major * pv + minor * qv))
                .collect()
        };
        let phys = mix(&blocky, &fine);
        let digital = mix(&fine, &blocky);
        [live, phys, digital]
    }

    fn subject_offset(&self, rng: &Rng, subject: u32) -> Vec<f64> {
        let mut r = rng.derive(&format!("subject{subject}"));
        let (n, c) = (self.image_size, self.channels);
        let coef: Vec<f64> = (0..3 + c).map(|_| r.normal() * self.subject_sigma).collect();
        let mut out = Vec::with_capacity(self.pixels());
        for y in 0..n {
            let fy = 2.0 * y as f64 / (n as f64 - 1.0) - 1.0;
            for x in 0..n {
                let fx = 2.0 * x as f64 / (n as f64 - 1.0) - 1.0;
                for ch in 0..c {
                    out.push(coef[0] + 0.5 * coef[1] * fx + 0.5 * coef[2] * fy + 0.5 * coef[3 + ch]);
                }
            }
        }
        out
    }
}

/// Generates the three splits. Subject ids are consecutive across splits, so
/// splits never share a subject; every subject has samples of all subtypes.
pub fn generate(spec: &SyntheticDatasetSpec) -> Result<Splits, DataError> {
    spec.validate()?;
    let rng = Rng::new(spec.seed);
    let patterns = spec.base_patterns();
    let n = spec.image_size;
    let shape = [n, n, spec.channels];
    let mut next_subject = 0u32;
    let mut splits = Vec::with_capacity(3);
    for &count in &spec.subjects {
        let mut samples = Vec::new();
        for _ in 0..count {
            let subject = next_subject;
            next_subject += 1;
            let offset = spec.subject_offset(&rng, subject);
            for (st, &per) in Subtype::ALL.iter().zip(&spec.per_subject) {
                for k in 0..per {
                    let mut noise = rng.derive(&format!("noise{subject}.{}.{k}", st.name()));
                    let data = patterns[st.code() as usize]
                        .iter()
                        .zip(&offset)
                        .map(|(&p, &o)| {
                            let v = p + o + spec.noise_sigma * noise.normal();
                            v.clamp(0.0, 1.0) as f32 as f64
                        })
                        .collect();
                    samples.push(LabeledSample {
                        image: Tensor::new(&shape, data).expect("pattern size"),
                        label: st.label(),
                        subtype: *st,
                        subject_id: subject,
                    });
                }
            }
        }
        splits.push(Dataset {
            height: n,
            width: n,
            channels: spec.channels,
            samples,
        });
    }
    let test = splits.pop().expect("three splits");
    let eval = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(Splits { train, eval, test })
}

pub fn encode_dataset(d: &Dataset) -> Vec<u8> {
    let px = d.height * d.width * d.channels;
    let mut buf = Vec::with_capacity(24 + d.len() * (6 + 4 * px));
    buf.extend_from_slice(DATASET_MAGIC);
    for v in [d.len(), d.height, d.width, d.channels] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for s in &d.samples {
        buf.push(s.label.code());
        buf.push(s.subtype.code());
        buf.extend_from_slice(&s.subject_id.to_le_bytes());
        for &v in s.image.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    buf
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset, DataError> {
    if bytes.len() < 8 || &bytes[..8] != DATASET_MAGIC {
        return Err(DataError::BadMagic);
    }
    let u32_at = |off: usize| -> Option<u32> {
        bytes.get(off..off + 4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    };
    let mut header = [0usize; 4];
    for (i, h) in header.iter_mut().enumerate() {
        let off = 8 + 4 * i;
        *h = u32_at(off).ok_or(DataError::Truncated {
            offset: off,
            declared: 0,
            found: 0,
        })? as usize;
    }
    let [count, height, width, channels] = header;
    let px = height * width * channels;
    let record = 6 + 4 * px;
    let mut pos = 24;
    let mut samples = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        if bytes.len() < pos + record {
            return Err(DataError::Truncated {
                offset: pos,
                declared: count,
                found: i,
            });
        }
        let label = Label::from_code(bytes[pos]).ok_or(DataError::Field {
            offset: pos,
            what: "label",
        })?;
        let subtype = Subtype::from_code(bytes[pos + 1]).ok_or(DataError::Field {
            offset: pos + 1,
            what: "subtype",
        })?;
        if subtype.label() != label {
            return Err(DataError::Field {
                offset: pos,
                what: "label/subtype combination",
            });
        }
        let subject_id = u32_at(pos + 2).expect("bounds checked");
        let start = pos + 6;
        let mut data = Vec::with_capacity(px);
        for (k, chunk) in bytes[start..start + 4 * px].chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            if !(0.0..=1.0).contains(&v) {
                return Err(DataError::Field {
                    offset: start + 4 * k,
                    what: "pixel value",
                });
            }
            data.push(v as f64);
        }
        samples.push(LabeledSample {
            image: Tensor::new(&[height, width, channels], data).expect("record size"),
            label,
            subtype,
            subject_id,
        });
        pos += record;
    }
    if pos != bytes.len() {
        return Err(DataError::CountMismatch {
            offset: pos,
            declared: count,
            extra: bytes.len() - pos,
        });
    }
    Ok(Dataset {
        height,
        width,
        channels,
        samples,
    })
}

pub fn write_dataset(d: &Dataset, path: &Path) -> Result<(), DataError> {
    fs::write(path, encode_dataset(d))?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset, DataError> {
    decode_dataset(&fs::read(path)?)
}

/// Writes `train.uads`, `eval.uads` and `test.uads` into `dir`, creating it.
pub fn write_splits(splits: &Splits, dir: &Path) -> Result<(), DataError> {
    fs::create_dir_all(dir)?;
    for (name, d) in splits.iter() {
        write_dataset(d, &dir.join(format!("{name}.uads")))?;
    }
    Ok(())
}

pub fn read_splits(dir: &Path) -> Result<Splits, DataError> {
    let read = |name: &str| read_dataset(&dir.join(format!("{name}.uads")));
    Ok(Splits {
        train: read("train")?,
        eval: read("eval")?,
        test: read("test")?,
    })
}

/// Sample indices of one minibatch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn images<'a>(&self, d: &'a Dataset) -> Vec<&'a Tensor<f64>> {
        self.indices.iter().map(|&i| &d.samples[i].image).collect()
    }

    pub fn labels(&self, d: &Dataset) -> Vec<Label> {
        self.indices.iter().map(|&i| d.samples[i].label).collect()
    }

    pub fn subtypes(&self, d: &Dataset) -> Vec<Subtype> {
        self.indices.iter().map(|&i| d.samples[i].subtype).collect()
    }
}

/// One epoch of minibatches.
///
/// The split is shuffled by a stream keyed on `(seed, epoch)`. Live and fake
/// samples are spread over batches in proportion to their counts, and inside a
/// batch labels alternate (live first) while both remain. The final batch may
/// be short; every sample appears exactly once.
pub fn batches(split: &Dataset, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Batch>, DataError> {
    if batch_size < 2 || batch_size % 2 != 0 {
        return Err(DataError::Batch(format!("batch size {batch_size} must be even and >= 2")));
    }
    let n = split.len();
    if batch_size > n {
        return Err(DataError::Batch(format!(
            "batch size {batch_size} exceeds split size {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed).derive(&format!("epoch{epoch}")).shuffle(&mut order);
    let (live, fake): (Vec<usize>, Vec<usize>) = order.iter().partition(|&&i| split.samples[i].label.is_live());
    let (mut li, mut fi) = (live.into_iter(), fake.into_iter());
    let n_live = li.len();
    let mut out = Vec::with_capacity(n.div_ceil(batch_size));
    let (mut done, mut live_done) = (0usize, 0usize);
    while done < n {
        let size = batch_size.min(n - done);
        let target = ((n_live * (done + size)) as f64 / n as f64).round() as usize;
        let mut want_live = target.saturating_sub(live_done).min(size).min(li.len());
        if size - want_live > fi.len() {
            want_live = size - fi.len();
        }
        let mut take_live = want_live;
        let mut take_fake = size - want_live;
        let mut indices = Vec::with_capacity(size);
        let mut live_turn = true;
        while take_live + take_fake > 0 {
            let use_live = (live_turn && take_live > 0) || take_fake == 0;
            if use_live {
                indices.push(li.next().expect("counted"));
                take_live -= 1;
            } else {
                indices.push(fi.next().expect("counted"));
                take_fake -= 1;
            }
            live_turn = !use_live;
        }
        done += size;
        live_done += want_live;
        out.push(Batch { indices });
    }
    Ok(out)
}
