//! Planted-keyframe video-QA generator.
//!
//! Every frame shows, in each patch, the code vector of one attribute value.
//! Patch `p` shows attribute `p mod n_attributes`. Keyframes show the
//! sample's true values plus a per-patch marker; every other frame shows
//! values drawn uniformly at random, so distractors look like plausible
//! answers but carry no information about the true one. A question names one
//! attribute; the choices are `A` values of that attribute.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::par::Execution;

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const QMARK: usize = 2;
const FIRST_ATTRIBUTE_TOKEN: usize = 3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    UniformRandom,
    /// Keyframe `i` lies in the `i`-th of `K` equal contiguous segments.
    #[default]
    OnePerSegment,
    /// `K` consecutive frames at a random offset.
    Clustered,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub num_train: usize,
    pub num_val: usize,
    pub frames: usize,
    pub patches: usize,
    pub raw_dim: usize,
    pub choices: usize,
    pub keyframes: usize,
    pub num_attributes: usize,
    pub num_values: usize,
    pub noise_std: f64,
    /// Marker norm per raw dimension, relative to the unit-variance codes.
    pub marker_gain: f64,
    pub placement: Placement,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_train: 4000,
            num_val: 1000,
            frames: 32,
            patches: 4,
            raw_dim: 16,
            choices: 4,
            keyframes: 4,
            num_attributes: 2,
            num_values: 8,
            noise_std: 0.6,
            marker_gain: 3.0,
            placement: Placement::OnePerSegment,
            seed: 7,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.keyframes > self.frames {
            return Err(Error::config("keyframes", "K must not exceed T"));
        }
        if self.keyframes == 0 {
            return Err(Error::config("keyframes", "K must be >= 1"));
        }
        if self.num_train == 0 || self.num_val == 0 {
            return Err(Error::config("num_train/num_val", "counts must be >= 1"));
        }
        if self.choices < 2 || self.choices > self.num_values {
            return Err(Error::config("choices", "must satisfy 2 <= A <= num_values"));
        }
        if self.num_attributes == 0 || self.patches < self.num_attributes {
            return Err(Error::config("patches", "need at least one patch per attribute"));
        }
        if self.raw_dim == 0 {
            return Err(Error::config("raw_dim", "must be >= 1"));
        }
        if self.placement == Placement::OnePerSegment && self.frames % self.keyframes != 0 {
            return Err(Error::config("keyframes", "one_per_segment needs T divisible by K"));
        }
        if !(self.noise_std >= 0.0) || !(self.marker_gain > 0.0) {
            return Err(Error::config("noise_std/marker_gain", "must be >= 0 and > 0"));
        }
        Ok(())
    }

    /// Smallest vocabulary holding every token the generator emits.
    pub fn vocab_size(&self) -> usize {
        FIRST_ATTRIBUTE_TOKEN + self.num_attributes * (1 + self.num_values)
    }

    pub fn attribute_token(&self, a: usize) -> usize {
        FIRST_ATTRIBUTE_TOKEN + a
    }

    pub fn value_token(&self, a: usize, v: usize) -> usize {
        FIRST_ATTRIBUTE_TOKEN + self.num_attributes + a * self.num_values + v
    }

    pub fn question_len(&self) -> usize {
        3
    }

    pub fn choice_len(&self) -> usize {
        2
    }
}

fn empty_video() -> Tensor {
    Tensor::zeros(&[0, 0, 0])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSample {
    /// `[T, N, raw_dim]`, every entry exactly representable as `f32`.
    #[serde(skip, default = "empty_video")]
    pub raw_video: Tensor,
    pub question_tokens: Vec<usize>,
    pub choice_tokens: Vec<Vec<usize>>,
    pub answer_idx: usize,
    pub keyframes: Vec<usize>,
    pub seed: u64,
    /// Queried attribute.
    pub attribute: usize,
    /// True value of every attribute.
    pub values: Vec<usize>,
}

/// Code vectors per (attribute, value) and marker vectors per patch.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub codes: Vec<Vec<Vec<f64>>>,
    pub markers: Vec<Vec<f64>>,
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Split::Train => 0x7472_6169_6e00_0001,
            Split::Val => 0x7661_6c00_0000_0002,
        }
    }
}

/// Seed of sample `index` in `split`; distinct splits use distinct streams.
pub fn sample_seed(seed: u64, split: Split, index: usize) -> u64 {
    mix(mix(seed ^ split.tag()).wrapping_add(index as u64))
}

fn f32_normal<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    (z * std) as f32 as f64
}

impl Codebook {
    pub fn new(spec: &DatasetSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed ^ 0x636f_6465_626f_6f6b));
        let codes = (0..spec.num_attributes)
            .map(|_| {
                (0..spec.num_values)
                    .map(|_| (0..spec.raw_dim).map(|_| f32_normal(&mut rng, 1.0)).collect())
                    .collect()
            })
            .collect();
        let markers = (0..spec.patches)
            .map(|_| (0..spec.raw_dim).map(|_| f32_normal(&mut rng, spec.marker_gain)).collect())
            .collect();
        Self { codes, markers }
    }
}

fn place_keyframes<R: Rng + ?Sized>(spec: &DatasetSpec, rng: &mut R) -> Vec<usize> {
    let (t, k) = (spec.frames, spec.keyframes);
    match spec.placement {
        Placement::UniformRandom => {
            let mut all: Vec<usize> = (0..t).collect();
            all.shuffle(rng);
            let mut picked = all[..k].to_vec();
            picked.sort_unstable();
            picked
        }
        Placement::OnePerSegment => {
            let len = t / k;
            (0..k).map(|i| i * len + rng.random_range(0..len)).collect()
        }
        Placement::Clustered => {
            let start = rng.random_range(0..=t - k);
            (start..start + k).collect()
        }
    }
}

/// One sample from its own seed. Returns `None` if the noise draw defeats the
/// self-decoder (the caller then re-draws with the next attempt index).
fn try_generate(spec: &DatasetSpec, book: &Codebook, seed: u64) -> Option<SynthSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t, n, r) = (spec.frames, spec.patches, spec.raw_dim);
    let keyframes = place_keyframes(spec, &mut rng);
    let values: Vec<usize> = (0..spec.num_attributes).map(|_| rng.random_range(0..spec.num_values)).collect();
    let attribute = rng.random_range(0..spec.num_attributes);

    let truth = values[attribute];
    let others: Vec<usize> = (0..spec.num_values).filter(|&v| v != truth).collect();
    let mut candidates: Vec<usize> = others.choose_multiple(&mut rng, spec.choices - 1).copied().collect();
    candidates.push(truth);
    candidates.shuffle(&mut rng);
    let answer_idx = candidates.iter().position(|&v| v == truth).unwrap();

    let mut data = Vec::with_capacity(t * n * r);
    for frame in 0..t {
        let key = keyframes.contains(&frame);
        for p in 0..n {
            let a = p % spec.num_attributes;
            let v = if key { values[a] } else { rng.random_range(0..spec.num_values) };
            let code = &book.codes[a][v];
            for i in 0..r {
                let marker = if key { book.markers[p][i] } else { 0.0 };
                let noise: f64 = StandardNormal.sample(&mut rng);
                data.push((code[i] + marker + spec.noise_std * noise) as f32 as f64);
            }
        }
    }
    let sample = SynthSample {
        raw_video: Tensor::new(vec![t, n, r], data).ok()?,
        question_tokens: vec![CLS, spec.attribute_token(attribute), QMARK],
        choice_tokens: candidates
            .iter()
            .map(|&v| vec![spec.attribute_token(attribute), spec.value_token(attribute, v)])
            .collect(),
        answer_idx,
        keyframes,
        seed,
        attribute,
        values,
    };
    let all: Vec<usize> = (0..t).collect();
    let ok = self_decode(spec, book, &sample, &all) == answer_idx
        && self_decode(spec, book, &sample, &sample.keyframes) == answer_idx;
    ok.then_some(sample)
}

pub fn generate_sample(spec: &DatasetSpec, book: &Codebook, split: Split, index: usize) -> SynthSample {
    let base = sample_seed(spec.seed, split, index);
    (0u64..)
        .find_map(|attempt| try_generate(spec, book, mix(base.wrapping_add(attempt.wrapping_mul(0x9e37_79b9_7f4a_7c15)))))
        .expect("generation eventually succeeds")
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Vec<SynthSample>,
    pub val: Vec<SynthSample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[SynthSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }
}

pub fn generate(spec: &DatasetSpec, exec: Execution) -> Result<Dataset> {
    spec.validate()?;
    let book = Codebook::new(spec);
    let train = exec.map_range(spec.num_train, |i| generate_sample(spec, &book, Split::Train, i));
    let val = exec.map_range(spec.num_val, |i| generate_sample(spec, &book, Split::Val, i));
    Ok(Dataset {
        spec: spec.clone(),
        train,
        val,
    })
}

/// Mean over patches of `⟨x_p, m_p⟩ / |m_p|²`: about 1 on keyframes, about 0
/// elsewhere.
pub fn marker_score(book: &Codebook, frame: &[f64], raw_dim: usize) -> f64 {
    let n = book.markers.len();
    let mut total = 0.0;
    for (p, m) in book.markers.iter().enumerate() {
        let x = &frame[p * raw_dim..][..raw_dim];
        let dot: f64 = x.iter().zip(m).map(|(a, b)| a * b).sum();
        let norm: f64 = m.iter().map(|v| v * v).sum();
        total += dot / norm;
    }
    total / n as f64
}

/// Reads the answer from `frames` alone: frames that carry the marker are
/// decoded to the nearest code of the queried attribute and vote; without a
/// marked frame the answer is a fixed per-sample guess.
pub fn self_decode(spec: &DatasetSpec, book: &Codebook, sample: &SynthSample, frames: &[usize]) -> usize {
    let (n, r) = (spec.patches, spec.raw_dim);
    let raw = sample.raw_video.data();
    let a = sample.attribute;
    let mut votes = vec![0usize; spec.num_values];
    for &f in frames {
        let frame = &raw[f * n * r..][..n * r];
        if marker_score(book, frame, r) <= 0.5 {
            continue;
        }
        let mut avg = vec![0.0; r];
        let mut count = 0.0;
        for p in (0..n).filter(|p| p % spec.num_attributes == a) {
            for i in 0..r {
                avg[i] += frame[p * r + i] - book.markers[p][i];
            }
            count += 1.0;
        }
        let best = (0..spec.num_values)
            .map(|v| {
                let d: f64 = book.codes[a][v].iter().zip(&avg).map(|(c, x)| (c - x / count).powi(2)).sum();
                (v, d)
            })
            .min_by(|x, y| x.1.total_cmp(&y.1))
            .map(|(v, _)| v)
            .unwrap();
        votes[best] += 1;
    }
    let chance = (mix(sample.seed ^ 0x6775_6573_73) % spec.choices as u64) as usize;
    let top = votes.iter().max().copied().unwrap_or(0);
    if top == 0 {
        return chance;
    }
    let value = votes.iter().position(|&c| c == top).unwrap();
    sample
        .choice_tokens
        .iter()
        .position(|c| c[1] == spec.value_token(a, value))
        .unwrap_or(chance)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    KeyframeOracle,
    UniformK,
    RandomK,
}

/// Segment-centre picks `floor((i + 0.5)·T/k)`.
pub fn uniform_indices(frames: usize, k: usize) -> Vec<usize> {
    (0..k).map(|i| ((2 * i + 1) * frames) / (2 * k)).collect()
}

pub fn strategy_indices(strategy: Strategy, sample: &SynthSample, frames: usize, k: usize) -> Vec<usize> {
    match strategy {
        Strategy::KeyframeOracle => {
            let mut picked: Vec<usize> = sample.keyframes.iter().copied().take(k).collect();
            let mut fill = (0..frames).filter(|f| !sample.keyframes.contains(f));
            while picked.len() < k {
                picked.push(fill.next().expect("k <= T"));
            }
            picked.sort_unstable();
            picked
        }
        Strategy::UniformK => uniform_indices(frames, k),
        Strategy::RandomK => {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(sample.seed ^ 0x7261_6e64));
            let mut all: Vec<usize> = (0..frames).collect();
            all.shuffle(&mut rng);
            let mut picked = all[..k].to_vec();
            picked.sort_unstable();
            picked
        }
    }
}

/// Accuracy of the self-decoder restricted to the frames a strategy picks.
pub fn oracle_accuracy(strategy: Strategy, data: &Dataset, split: Split, k: usize) -> Result<f64> {
    let spec = &data.spec;
    if k > spec.frames || k == 0 {
        return Err(Error::config("k", "must satisfy 1 <= k <= T"));
    }
    let book = Codebook::new(spec);
    let samples = data.split(split);
    let correct = samples
        .iter()
        .filter(|s| self_decode(spec, &book, s, &strategy_indices(strategy, s, spec.frames, k)) == s.answer_idx)
        .count();
    Ok(correct as f64 / samples.len() as f64)
}

/// Mean of `|picks ∩ keyframes| / K` over every keyframe placement the dataset spec
/// can produce (all equally likely), for fixed `picks`.
pub fn expected_recall_by_enumeration(spec: &DatasetSpec, picks: &[usize]) -> f64 {
    let (t, k) = (spec.frames, spec.keyframes);
    let picks: BTreeSet<usize> = picks.iter().copied().collect();
    let hits = |kf: &[usize]| kf.iter().filter(|f| picks.contains(f)).count() as f64 / k as f64;
    match spec.placement {
        Placement::OnePerSegment => {
            // Each segment is independent; the mean factorises per segment
            // but we enumerate the full product to stay a plain oracle.
            let len = t / k;
            let total = len.pow(k as u32);
            let mut sum = 0.0;
            let mut kf = vec![0; k];
            for code in 0..total {
                let mut c = code;
                for (i, slot) in kf.iter_mut().enumerate() {
                    *slot = i * len + c % len;
                    c /= len;
                }
                sum += hits(&kf);
            }
            sum / total as f64
        }
        Placement::Clustered => {
            let starts = t - k + 1;
            (0..starts).map(|s| hits(&(s..s + k).collect::<Vec<_>>())).sum::<f64>() / starts as f64
        }
        Placement::UniformRandom => {
            let mut sum = 0.0;
            let mut count = 0usize;
            let mut kf: Vec<usize> = (0..k).collect();
            loop {
                sum += hits(&kf);
                count += 1;
                // Next k-combination of 0..t in lexicographic order.
                let mut i = k;
                while i > 0 && kf[i - 1] == t - k + i - 1 {
                    i -= 1;
                }
                if i == 0 {
                    break;
                }
                kf[i - 1] += 1;
                for j in i..k {
                    kf[j] = kf[j - 1] + 1;
                }
            }
            sum / count as f64
        }
    }
}

/// Probability that fixed `picks` contain at least one keyframe, by the same
/// enumeration.
pub fn expected_any_hit_by_enumeration(spec: &DatasetSpec, picks: &[usize]) -> f64 {
    let (t, k) = (spec.frames, spec.keyframes);
    match spec.placement {
        Placement::OnePerSegment => {
            let len = t / k;
            let total = len.pow(k as u32);
            let mut any = 0usize;
            for code in 0..total {
                let mut c = code;
                let mut hit = false;
                for i in 0..k {
                    hit |= picks.contains(&(i * len + c % len));
                    c /= len;
                }
                any += hit as usize;
            }
            any as f64 / total as f64
        }
        Placement::Clustered => {
            let starts = t - k + 1;
            (0..starts).filter(|&s| (s..s + k).any(|f| picks.contains(&f))).count() as f64 / starts as f64
        }
        Placement::UniformRandom => {
            // P(no hit) = C(T - |picks|, K) / C(T, K).
            let m = picks.iter().collect::<BTreeSet<_>>().len();
            let mut none = 1.0;
            for i in 0..k {
                none *= (t - m).saturating_sub(i) as f64 / (t - i) as f64;
            }
            1.0 - none
        }
    }
}

// ---- persistence --------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct SplitManifest {
    count: usize,
    shape: Vec<usize>,
    blob: String,
    samples: Vec<SynthSample>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    spec: DatasetSpec,
    train: SplitManifest,
    val: SplitManifest,
}

const FORMAT: &str = "framedistill-dataset-v1";

fn blob_bytes(samples: &[SynthSample]) -> Vec<u8> {
    let mut out = Vec::with_capacity(samples.iter().map(|s| s.raw_video.numel() * 4).sum());
    for s in samples {
        for &v in s.raw_video.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

const FILES: [&str; 3] = ["manifest.json", "train.bin", "val.bin"];

/// File contents in [`FILES`] order.
fn encode_dataset(data: &Dataset) -> Result<[Vec<u8>; 3]> {
    let shape = vec![data.spec.frames, data.spec.patches, data.spec.raw_dim];
    let split = |samples: &[SynthSample], name: &str| SplitManifest {
        count: samples.len(),
        shape: shape.clone(),
        blob: format!("{name}.bin"),
        samples: samples.to_vec(),
    };
    let manifest = Manifest {
        format: FORMAT.to_string(),
        spec: data.spec.clone(),
        train: split(&data.train, "train"),
        val: split(&data.val, "val"),
    };
    Ok([
        serde_json::to_string_pretty(&manifest)?.into_bytes(),
        blob_bytes(&data.train),
        blob_bytes(&data.val),
    ])
}

/// Writes `manifest.json`, `train.bin` and `val.bin` into `dir`. The
/// manifest goes last, so a directory with a manifest is complete.
pub fn save_dataset(data: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let [manifest, train, val] = encode_dataset(data)?;
    write_atomic(&dir.join(FILES[1]), &train)?;
    write_atomic(&dir.join(FILES[2]), &val)?;
    write_atomic(&dir.join(FILES[0]), &manifest)?;
    Ok(())
}

/// Names of the files [`save_dataset`] writes.
pub fn dataset_files() -> [&'static str; 3] {
    FILES
}

fn read_split(dir: &Path, m: SplitManifest) -> Result<Vec<SynthSample>> {
    let path = dir.join(&m.blob);
    let bytes = fs::read(&path)?;
    let per = m.shape.iter().product::<usize>();
    let bad = |reason: String| Error::Format {
        path: path.display().to_string(),
        reason,
    };
    if bytes.len() != m.count * per * 4 || m.samples.len() != m.count {
        return Err(bad(format!("expected {} samples of {per} floats, found {} bytes", m.count, bytes.len())));
    }
    let mut out = m.samples;
    for (i, s) in out.iter_mut().enumerate() {
        let data = bytes[i * per * 4..][..per * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        s.raw_video = Tensor::new(m.shape.clone(), data)?;
    }
    Ok(out)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path)?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT {
        return Err(Error::Format {
            path: path.display().to_string(),
            reason: format!("unknown format {:?}", manifest.format),
        });
    }
    manifest.spec.validate()?;
    let train = read_split(dir, manifest.train)?;
    let val = read_split(dir, manifest.val)?;
    Ok(Dataset {
        spec: manifest.spec,
        train,
        val,
    })
}

/// SHA-256 over the manifest and both blobs, hex encoded.
pub fn dataset_digest(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for name in FILES {
        h.update(fs::read(dir.join(name))?);
    }
    Ok(hex::encode(h.finalize()))
}

/// The digest [`dataset_digest`] would report after [`save_dataset`].
pub fn dataset_digest_in_memory(data: &Dataset) -> Result<String> {
    let mut h = Sha256::new();
    for bytes in encode_dataset(data)? {
        h.update(bytes);
    }
    Ok(hex::encode(h.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(placement: Placement) -> DatasetSpec {
        DatasetSpec {
            num_train: 60,
            num_val: 20,
            placement,
            ..Default::default()
        }
    }

    #[test]
    fn regeneration_is_bitwise_identical() {
        let spec = small(Placement::OnePerSegment);
        let a = generate(&spec, Execution::Sequential).unwrap();
        let b = generate(&spec, Execution::Parallel).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.val, b.val);
    }

    #[test]
    fn keyframe_invariants_hold_for_every_placement() {
        for placement in [Placement::UniformRandom, Placement::OnePerSegment, Placement::Clustered] {
            let data = generate(&small(placement), Execution::Sequential).unwrap();
            for s in data.train.iter().chain(&data.val) {
                assert_eq!(s.keyframes.len(), 4);
                assert!(s.keyframes.windows(2).all(|w| w[0] < w[1]));
                assert!(s.keyframes.iter().all(|&k| k < 32));
                assert!(s.answer_idx < 4);
                assert!(s.raw_video.data().iter().all(|&v| v as f32 as f64 == v));
            }
            if placement == Placement::OnePerSegment {
                for s in &data.train {
                    for (i, &k) in s.keyframes.iter().enumerate() {
                        assert_eq!(k / 8, i);
                    }
                }
            }
        }
    }

    #[test]
    fn self_decoder_recovers_every_answer_from_keyframes() {
        let data = generate(&small(Placement::OnePerSegment), Execution::default()).unwrap();
        assert_eq!(oracle_accuracy(Strategy::KeyframeOracle, &data, Split::Train, 4).unwrap(), 1.0);
        assert_eq!(oracle_accuracy(Strategy::KeyframeOracle, &data, Split::Val, 4).unwrap(), 1.0);
    }

    #[test]
    fn rejects_more_keyframes_than_frames() {
        let spec = DatasetSpec { keyframes: 40, ..Default::default() };
        let err = spec.validate().unwrap_err().to_string();
        assert!(err.contains("K must not exceed T"), "{err}");
    }

    #[test]
    fn full_information_case_needs_one_frame() {
        let spec = DatasetSpec {
            num_train: 50,
            num_val: 10,
            keyframes: 32,
            noise_std: 0.0,
            placement: Placement::UniformRandom,
            ..Default::default()
        };
        let data = generate(&spec, Execution::default()).unwrap();
        assert_eq!(oracle_accuracy(Strategy::UniformK, &data, Split::Train, 1).unwrap(), 1.0);
    }

    #[test]
    fn zeroing_keyframes_drops_to_chance() {
        let spec = DatasetSpec {
            num_train: 5000,
            num_val: 1,
            ..Default::default()
        };
        let data = generate(&spec, Execution::default()).unwrap();
        let book = Codebook::new(&spec);
        let all: Vec<usize> = (0..32).collect();
        let stride = 4 * 16;
        let correct = data
            .train
            .iter()
            .filter(|s| {
                let mut z = (*s).clone();
                for &k in &s.keyframes {
                    z.raw_video.data_mut()[k * stride..][..stride].fill(0.0);
                }
                self_decode(&spec, &book, &z, &all) == s.answer_idx
            })
            .count();
        let acc = correct as f64 / 5000.0;
        assert!((acc - 0.25).abs() < 0.02, "{acc}");
    }

    #[test]
    fn zeroing_non_keyframes_never_changes_the_answer() {
        let spec = small(Placement::UniformRandom);
        let data = generate(&spec, Execution::default()).unwrap();
        let book = Codebook::new(&spec);
        let all: Vec<usize> = (0..32).collect();
        let stride = 4 * 16;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for s in &data.train {
            let before = self_decode(&spec, &book, s, &all);
            let mut z = s.clone();
            for f in (0..32).filter(|f| !s.keyframes.contains(f)) {
                if rng.random_bool(0.5) {
                    z.raw_video.data_mut()[f * stride..][..stride].fill(0.0);
                }
            }
            assert_eq!(self_decode(&spec, &book, &z, &all), before);
        }
    }

    #[test]
    fn splits_share_vocabulary_but_not_seeds() {
        let data = generate(&small(Placement::OnePerSegment), Execution::default()).unwrap();
        let train: BTreeSet<u64> = data.train.iter().map(|s| s.seed).collect();
        let val: BTreeSet<u64> = data.val.iter().map(|s| s.seed).collect();
        assert_eq!(train.len(), data.train.len());
        assert!(train.is_disjoint(&val));
        let vocab = data.spec.vocab_size();
        for s in data.train.iter().chain(&data.val) {
            assert!(s.question_tokens.iter().chain(s.choice_tokens.iter().flatten()).all(|&t| t < vocab));
        }
    }

    #[test]
    fn enumeration_oracle_uniform_hit_rates() {
        let one = DatasetSpec { keyframes: 1, ..Default::default() };
        let picks = uniform_indices(32, 4);
        assert_eq!(picks, vec![4, 12, 20, 28]);
        assert!((expected_recall_by_enumeration(&one, &picks) - 0.125).abs() < 1e-15);
        let four = DatasetSpec::default();
        assert!((expected_recall_by_enumeration(&four, &picks) - 0.125).abs() < 1e-15);
        let any = expected_any_hit_by_enumeration(&four, &picks);
        assert!((any - (1.0 - (7.0f64 / 8.0).powi(4))).abs() < 1e-15);
        let uniform = DatasetSpec { placement: Placement::UniformRandom, ..Default::default() };
        assert!((expected_recall_by_enumeration(&uniform, &picks) - 0.125).abs() < 1e-12);
        let clustered = DatasetSpec { placement: Placement::Clustered, ..Default::default() };
        let r = expected_recall_by_enumeration(&clustered, &picks);
        assert!(r > 0.0 && r < 0.2);
    }

    #[test]
    fn random_never_beats_keyframe_oracle() {
        let data = generate(&small(Placement::OnePerSegment), Execution::default()).unwrap();
        let oracle = oracle_accuracy(Strategy::KeyframeOracle, &data, Split::Train, 4).unwrap();
        for k in [1, 2, 4, 8] {
            let random = oracle_accuracy(Strategy::RandomK, &data, Split::Train, k).unwrap();
            let key = oracle_accuracy(Strategy::KeyframeOracle, &data, Split::Train, k).unwrap();
            assert!(random <= key + 1e-12, "k={k}");
            assert!(random <= oracle);
        }
    }

    #[test]
    fn dataset_round_trips_bit_exactly() {
        let spec = small(Placement::Clustered);
        let data = generate(&spec, Execution::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&data, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.spec, spec);
        assert_eq!(back.train, data.train);
        assert_eq!(back.val, data.val);
        let d1 = dataset_digest(dir.path()).unwrap();
        save_dataset(&back, dir.path()).unwrap();
        assert_eq!(dataset_digest(dir.path()).unwrap(), d1);
        assert_eq!(dataset_digest_in_memory(&data).unwrap(), d1);
    }
}
