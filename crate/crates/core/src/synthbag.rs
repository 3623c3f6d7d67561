//! Synthetic bag datasets with planted evidence, and their on-disk format.
//!
//! Generative model, per dataset:
//!
//! * `M` concept prototypes are drawn as Gaussian vectors in feature space and
//!   orthonormalized with Gram-Schmidt. The same unit vectors form the
//!   [`AnchorBank`].
//! * Concepts are partitioned over classes in contiguous index blocks
//!   (`class(m) = m * C / M`), so every class owns at least one concept.
//! * A bag of class `y` holds `n_e` evidence patches (prototype of a class-`y`
//!   concept plus noise), distractor patches (prototype of a concept owned by
//!   another class plus noise, at rate `distractor_rate` among the remaining
//!   patches) and background patches (isotropic noise).
//!
//! Noise is drawn per coordinate with standard deviation `noise_sigma / sqrt(d)`
//! so that the expected noise norm is `noise_sigma` independent of `d`.
//! Background patches use per-coordinate standard deviation `1 / sqrt(d)`.
//! Feature values are rounded through `f32` at generation time, which makes
//! the binary file format an exact round trip.
//!
//! ## Random streams
//!
//! All draws come from `Xoshiro256PlusPlus::seed_from_u64` (SplitMix64 seed
//! expansion). Prototypes use the stream seeded with `seed`. Bag `b` uses the
//! stream seeded with `seed + (b + 1) * 0x9E3779B97F4A7C15` (wrapping), and
//! draws, in order: label, patch count `N`, evidence count, evidence
//! positions, then per patch its content, then `2N` coordinates.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::math::fnv1a64;

pub const META_FILE: &str = "meta.json";
pub const BAGS_FILE: &str = "bags.bin";
pub const INDEX_FILE: &str = "index.tsv";
pub const DATASET_SCHEMA_VERSION: u32 = 1;

const STREAM_STRIDE: u64 = 0x9E37_79B9_7F4A_7C15;

pub type Rng64 = Xoshiro256PlusPlus;

/// Seeded generator for stream `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> Rng64 {
    Rng64::seed_from_u64(seed.wrapping_add(stream.wrapping_mul(STREAM_STRIDE)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub num_bags: usize,
    pub patches_per_bag: [usize; 2],
    pub feature_dim: usize,
    pub num_classes: usize,
    pub num_concepts: usize,
    pub evidence_per_bag: [usize; 2],
    pub noise_sigma: f64,
    pub distractor_rate: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    /// The desk-scale configuration.
    fn default() -> Self {
        Self {
            num_bags: 600,
            patches_per_bag: [40, 120],
            feature_dim: 64,
            num_classes: 4,
            num_concepts: 8,
            evidence_per_bag: [3, 10],
            noise_sigma: 0.3,
            distractor_rate: 0.1,
            seed: 42,
        }
    }
}

impl GenConfig {
    /// Desk configuration with noiseless evidence and no distractors.
    pub fn noiseless() -> Self {
        Self {
            noise_sigma: 0.0,
            distractor_rate: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [pmin, pmax] = self.patches_per_bag;
        let [emin, emax] = self.evidence_per_bag;
        ensure!(pmin <= pmax, Config, "patches_per_bag: min {pmin} > max {pmax}");
        ensure!(pmin >= 1, Config, "patches_per_bag: bags need at least one patch");
        ensure!(emin <= emax, Config, "evidence_per_bag: min {emin} > max {emax}");
        ensure!(self.num_classes >= 2, Config, "num_classes must be >= 2");
        ensure!(self.num_concepts >= 1, Config, "num_concepts must be >= 1");
        ensure!(
            self.num_concepts >= self.num_classes,
            Config,
            "num_concepts ({}) must be >= num_classes ({}) so every class owns a concept",
            self.num_concepts,
            self.num_classes
        );
        ensure!(
            self.feature_dim >= self.num_concepts,
            Config,
            "feature_dim ({}) must be >= num_concepts ({})",
            self.feature_dim,
            self.num_concepts
        );
        ensure!(
            self.noise_sigma >= 0.0 && self.noise_sigma.is_finite(),
            Config,
            "noise_sigma must be a finite nonnegative number"
        );
        ensure!(
            (0.0..=1.0).contains(&self.distractor_rate),
            Config,
            "distractor_rate must lie in [0, 1]"
        );
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    /// Deterministic split from the bag id: 60% train, 20% val, 20% test.
    pub fn from_id(id: &str) -> Self {
        match fnv1a64(id.as_bytes()) % 10 {
            0..=5 => Split::Train,
            6 | 7 => Split::Val,
            _ => Split::Test,
        }
    }

    fn code(self) -> u32 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Split::Train),
            1 => Some(Split::Val),
            2 => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub id: String,
    /// `N x d` patch features.
    pub features: Array2<f64>,
    /// `N x 2` patch coordinates.
    pub coords: Array2<f64>,
    pub label: usize,
    /// Sorted indices of planted evidence patches; empty when unknown.
    pub planted: Vec<usize>,
    pub split: Split,
}

impl Bag {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// The bag restricted to `rows`, in the given order. Planted indices are
    /// remapped to the new positions.
    pub fn restrict(&self, rows: &[usize]) -> Bag {
        let d = self.dim();
        let mut features = Array2::zeros((rows.len(), d));
        let mut coords = Array2::zeros((rows.len(), 2));
        let mut planted = Vec::new();
        for (new, &old) in rows.iter().enumerate() {
            features.row_mut(new).assign(&self.features.row(old));
            coords.row_mut(new).assign(&self.coords.row(old));
            if self.planted.binary_search(&old).is_ok() {
                planted.push(new);
            }
        }
        planted.sort_unstable();
        Bag {
            id: self.id.clone(),
            features,
            coords,
            label: self.label,
            planted,
            split: self.split,
        }
    }

    fn check(&self, num_classes: usize, dim: usize) -> std::result::Result<(), String> {
        let n = self.len();
        if n == 0 {
            return Err("bag has no patches (N = 0)".into());
        }
        if self.dim() != dim {
            return Err(format!("feature dim {} != dataset dim {dim}", self.dim()));
        }
        if self.coords.dim() != (n, 2) {
            return Err("coordinate matrix must be N x 2".into());
        }
        if self.label >= num_classes {
            return Err(format!("label {} out of range (C = {num_classes})", self.label));
        }
        if let Some(&bad) = self.planted.iter().find(|&&i| i >= n) {
            return Err(format!("planted index {bad} >= N = {n}"));
        }
        if self.features.iter().chain(self.coords.iter()).any(|x| !x.is_finite()) {
            return Err("non-finite feature or coordinate".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorBank {
    pub names: Vec<String>,
    /// One unit-norm anchor per row.
    #[serde(with = "matrix_serde")]
    pub vectors: Array2<f64>,
}

impl AnchorBank {
    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn anchor(&self, m: usize) -> ArrayView1<'_, f64> {
        self.vectors.row(m)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.is_empty(), Contract, "anchor bank is empty");
        ensure!(
            self.names.len() == self.len(),
            Contract,
            "anchor bank has {} names for {} anchors",
            self.names.len(),
            self.len()
        );
        for (m, row) in self.vectors.rows().into_iter().enumerate() {
            let n = row.dot(&row).sqrt();
            ensure!((n - 1.0).abs() <= 1e-9, Contract, "anchor {m} has norm {n}");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Generator configuration, when the dataset came from [`generate_dataset`].
    pub config: Option<GenConfig>,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub anchors: AnchorBank,
    /// Owning class of every concept / anchor.
    pub concept_to_class: Vec<usize>,
    pub bags: Vec<Bag>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Bag> {
        self.bags.iter().filter(|b| b.split == split).collect()
    }

    pub fn has_planted(&self) -> bool {
        self.bags.iter().any(|b| !b.planted.is_empty())
    }

    /// Concepts owned by `class`.
    pub fn class_concepts(&self, class: usize) -> Vec<usize> {
        concepts_of(&self.concept_to_class, class)
    }
}

fn concepts_of(map: &[usize], class: usize) -> Vec<usize> {
    map.iter()
        .enumerate()
        .filter(|(_, &c)| c == class)
        .map(|(m, _)| m)
        .collect()
}

/// Contiguous, as-even-as-possible assignment of concepts to classes.
pub fn concept_class_map(num_concepts: usize, num_classes: usize) -> Vec<usize> {
    (0..num_concepts).map(|m| m * num_classes / num_concepts).collect()
}

fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

fn gram_schmidt(rng: &mut Rng64, count: usize, dim: usize) -> Array2<f64> {
    let mut basis = Array2::<f64>::zeros((count, dim));
    let mut m = 0;
    while m < count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for prev in 0..m {
            let p = basis.row(prev);
            let proj: f64 = v.iter().zip(p.iter()).map(|(a, b)| a * b).sum();
            for (x, b) in v.iter_mut().zip(p.iter()) {
                *x -= proj * b;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        // Degenerate draws are astronomically unlikely; redraw to stay exact.
        if n < 1e-8 {
            continue;
        }
        for (dst, x) in basis.row_mut(m).iter_mut().zip(&v) {
            *dst = x / n;
        }
        m += 1;
    }
    basis
}

/// Generates a dataset deterministically from `cfg`.
pub fn generate_dataset(cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let d = cfg.feature_dim;
    let c = cfg.num_classes;
    let mut proto_rng = stream_rng(cfg.seed, 0);
    let prototypes = gram_schmidt(&mut proto_rng, cfg.num_concepts, d);
    let concept_to_class = concept_class_map(cfg.num_concepts, c);
    let anchors = AnchorBank {
        names: (0..cfg.num_concepts)
            .map(|m| format!("concept_{m}_class_{}", concept_to_class[m]))
            .collect(),
        vectors: prototypes.clone(),
    };

    let noise_scale = cfg.noise_sigma / (d as f64).sqrt();
    let background_scale = 1.0 / (d as f64).sqrt();
    let mut bags = Vec::with_capacity(cfg.num_bags);
    for b in 0..cfg.num_bags {
        let mut rng = stream_rng(cfg.seed, b as u64 + 1);
        let label = rng.random_range(0..c);
        let n = rng.random_range(cfg.patches_per_bag[0]..=cfg.patches_per_bag[1]);
        let n_e = rng
            .random_range(cfg.evidence_per_bag[0]..=cfg.evidence_per_bag[1])
            .min(n);
        let mut planted = index::sample(&mut rng, n, n_e).into_vec();
        planted.sort_unstable();

        let own = concepts_of(&concept_to_class, label);
        let other: Vec<usize> = (0..cfg.num_concepts)
            .filter(|m| concept_to_class[*m] != label)
            .collect();

        let mut features = Array2::<f64>::zeros((n, d));
        for i in 0..n {
            let concept = if planted.binary_search(&i).is_ok() {
                Some(own[rng.random_range(0..own.len())])
            } else if rng.random::<f64>() < cfg.distractor_rate && !other.is_empty() {
                Some(other[rng.random_range(0..other.len())])
            } else {
                None
            };
            let mut row = features.row_mut(i);
            match concept {
                Some(m) => {
                    for (k, x) in row.iter_mut().enumerate() {
                        let z: f64 = rng.sample(StandardNormal);
                        *x = round_f32(prototypes[[m, k]] + noise_scale * z);
                    }
                }
                None => {
                    for x in row.iter_mut() {
                        let z: f64 = rng.sample(StandardNormal);
                        *x = round_f32(background_scale * z);
                    }
                }
            }
        }
        let mut coords = Array2::<f64>::zeros((n, 2));
        for x in coords.iter_mut() {
            *x = round_f32(rng.random::<f64>());
        }
        let id = format!("bag{b:05}");
        let split = Split::from_id(&id);
        bags.push(Bag {
            id,
            features,
            coords,
            label,
            planted,
            split,
        });
    }

    Ok(Dataset {
        config: Some(cfg.clone()),
        num_classes: c,
        feature_dim: d,
        anchors,
        concept_to_class,
        bags,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    schema_version: u32,
    config: Option<GenConfig>,
    num_classes: usize,
    feature_dim: usize,
    num_bags: usize,
    anchors: AnchorBank,
    concept_to_class: Vec<usize>,
}

/// Writes `meta.json`, `bags.bin` and `index.tsv` into `dir` (created if needed).
///
/// Each record in `bags.bin` is a little-endian `u32` byte length followed by
/// `u32` fields `N, d, label, split, n_planted`, the planted indices as `u32`,
/// then `N*d` feature and `N*2` coordinate values as `f32`, row-major.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for bag in &ds.bags {
        bag.check(ds.num_classes, ds.feature_dim)
            .map_err(|reason| Error::Parse {
                bag_id: bag.id.clone(),
                reason,
            })?;
        ensure!(
            !bag.id.contains(['\t', '\n']),
            Contract,
            "bag id `{}` contains a tab or newline",
            bag.id
        );
    }
    let meta = Meta {
        schema_version: DATASET_SCHEMA_VERSION,
        config: ds.config.clone(),
        num_classes: ds.num_classes,
        feature_dim: ds.feature_dim,
        num_bags: ds.bags.len(),
        anchors: ds.anchors.clone(),
        concept_to_class: ds.concept_to_class.clone(),
    };
    let meta_path = dir.join(META_FILE);
    fs::write(&meta_path, serde_json::to_string_pretty(&meta)?)
        .map_err(|e| Error::io(&meta_path, e))?;

    let bags_path = dir.join(BAGS_FILE);
    let file = fs::File::create(&bags_path).map_err(|e| Error::io(&bags_path, e))?;
    let mut out = BufWriter::new(file);
    let mut index = String::from("bag_id\toffset\tn_patches\n");
    let mut offset: u64 = 0;
    for bag in &ds.bags {
        let record = encode_bag(bag);
        index.push_str(&format!("{}\t{}\t{}\n", bag.id, offset, bag.len()));
        out.write_all(&(record.len() as u32).to_le_bytes())
            .and_then(|_| out.write_all(&record))
            .map_err(|e| Error::io(&bags_path, e))?;
        offset += 4 + record.len() as u64;
    }
    out.flush().map_err(|e| Error::io(&bags_path, e))?;
    let index_path = dir.join(INDEX_FILE);
    fs::write(&index_path, index).map_err(|e| Error::io(&index_path, e))?;
    Ok(())
}

fn encode_bag(bag: &Bag) -> Vec<u8> {
    let n = bag.len();
    let d = bag.dim();
    let mut buf = Vec::with_capacity(20 + 4 * (bag.planted.len() + n * (d + 2)));
    for v in [n as u32, d as u32, bag.label as u32, bag.split.code(), bag.planted.len() as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &i in &bag.planted {
        buf.extend_from_slice(&(i as u32).to_le_bytes());
    }
    for &x in bag.features.iter().chain(bag.coords.iter()) {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    buf
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn u32(&mut self) -> Option<u32> {
        let b = self.buf.get(self.pos..self.pos + 4)?;
        self.pos += 4;
        Some(u32::from_le_bytes(b.try_into().ok()?))
    }

    fn f32(&mut self) -> Option<f64> {
        self.u32().map(|bits| f32::from_bits(bits) as f64)
    }
}

fn decode_bag(id: &str, record: &[u8]) -> std::result::Result<Bag, String> {
    let truncated = || "record truncated".to_string();
    let mut cur = Cursor { buf: record, pos: 0 };
    let n = cur.u32().ok_or_else(truncated)? as usize;
    let d = cur.u32().ok_or_else(truncated)? as usize;
    let label = cur.u32().ok_or_else(truncated)? as usize;
    let split_code = cur.u32().ok_or_else(truncated)?;
    let split = Split::from_code(split_code).ok_or_else(|| format!("unknown split code {split_code}"))?;
    let n_planted = cur.u32().ok_or_else(truncated)? as usize;
    if n == 0 {
        return Err("bag has no patches (N = 0)".into());
    }
    let expected = 20 + 4 * (n_planted + n * (d + 2));
    if record.len() != expected {
        return Err(format!("record length {} != expected {expected}", record.len()));
    }
    let mut planted = Vec::with_capacity(n_planted);
    for _ in 0..n_planted {
        planted.push(cur.u32().ok_or_else(truncated)? as usize);
    }
    if planted.windows(2).any(|w| w[0] >= w[1]) {
        return Err("planted indices must be strictly increasing".into());
    }
    let mut features = Array2::zeros((n, d));
    for x in features.iter_mut() {
        *x = cur.f32().ok_or_else(truncated)?;
    }
    let mut coords = Array2::zeros((n, 2));
    for x in coords.iter_mut() {
        *x = cur.f32().ok_or_else(truncated)?;
    }
    Ok(Bag {
        id: id.to_string(),
        features,
        coords,
        label,
        planted,
        split,
    })
}

/// Reads a dataset written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join(META_FILE);
    let meta_text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: Meta = serde_json::from_str(&meta_text).map_err(|e| Error::Format {
        file: META_FILE.into(),
        reason: e.to_string(),
    })?;
    let format_err = |file: &str, reason: String| Error::Format {
        file: file.into(),
        reason,
    };
    if meta.schema_version != DATASET_SCHEMA_VERSION {
        return Err(format_err(
            META_FILE,
            format!("unsupported schema_version {}", meta.schema_version),
        ));
    }
    meta.anchors
        .validate()
        .map_err(|e| format_err(META_FILE, e.to_string()))?;
    if meta.concept_to_class.len() != meta.anchors.len()
        || meta.concept_to_class.iter().any(|&c| c >= meta.num_classes)
    {
        return Err(format_err(META_FILE, "inconsistent concept_to_class".into()));
    }

    let index_path = dir.join(INDEX_FILE);
    let index_text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let bags_path = dir.join(BAGS_FILE);
    let mut blob = Vec::new();
    fs::File::open(&bags_path)
        .and_then(|mut f| f.read_to_end(&mut blob))
        .map_err(|e| Error::io(&bags_path, e))?;

    let mut bags = Vec::with_capacity(meta.num_bags);
    for (lineno, line) in index_text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(format_err(INDEX_FILE, format!("line {}: expected 3 columns", lineno + 1)));
        }
        let id = cols[0];
        let parse_err = |reason: String| Error::Parse {
            bag_id: id.to_string(),
            reason,
        };
        let offset: usize = cols[1]
            .parse()
            .map_err(|_| parse_err(format!("bad offset `{}`", cols[1])))?;
        let n_index: usize = cols[2]
            .parse()
            .map_err(|_| parse_err(format!("bad patch count `{}`", cols[2])))?;
        let len_bytes = blob
            .get(offset..offset + 4)
            .ok_or_else(|| parse_err("offset beyond end of bags.bin".into()))?;
        let len = u32::from_le_bytes(len_bytes.try_into().unwrap()) as usize;
        let record = blob
            .get(offset + 4..offset + 4 + len)
            .ok_or_else(|| parse_err("record extends beyond end of bags.bin".into()))?;
        let bag = decode_bag(id, record).map_err(parse_err)?;
        if bag.len() != n_index {
            return Err(parse_err(format!(
                "index says N = {n_index}, record says N = {}",
                bag.len()
            )));
        }
        bag.check(meta.num_classes, meta.feature_dim).map_err(parse_err)?;
        bags.push(bag);
    }
    if bags.len() != meta.num_bags {
        return Err(format_err(
            INDEX_FILE,
            format!("{} bags indexed, meta.json declares {}", bags.len(), meta.num_bags),
        ));
    }
    Ok(Dataset {
        config: meta.config,
        num_classes: meta.num_classes,
        feature_dim: meta.feature_dim,
        anchors: meta.anchors,
        concept_to_class: meta.concept_to_class,
        bags,
    })
}

pub(crate) mod matrix_serde {
    use ndarray::Array2;
    use serde::{de::Error, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Array2<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.rows().into_iter().map(|r| r.to_vec()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Array2<f64>, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(D::Error::custom("ragged matrix"));
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        let nrows = if ncols == 0 { 0 } else { flat.len() / ncols };
        Array2::from_shape_vec((nrows, ncols), flat).map_err(D::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GenConfig {
        GenConfig {
            num_bags: 30,
            patches_per_bag: [5, 12],
            feature_dim: 16,
            ..GenConfig::default()
        }
    }

    #[test]
    fn rejects_invalid_ranges() {
        let mut cfg = small();
        cfg.patches_per_bag = [10, 5];
        assert!(matches!(generate_dataset(&cfg), Err(Error::Config(_))));
        let mut cfg = small();
        cfg.evidence_per_bag = [4, 2];
        assert!(matches!(generate_dataset(&cfg), Err(Error::Config(_))));
        let mut cfg = small();
        cfg.num_classes = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = small();
        cfg.feature_dim = 4;
        assert!(cfg.validate().is_err());
        let mut cfg = small();
        cfg.noise_sigma = -0.1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn empty_dataset_has_valid_anchor_bank() {
        let cfg = GenConfig {
            num_bags: 0,
            ..small()
        };
        let ds = generate_dataset(&cfg).unwrap();
        assert!(ds.bags.is_empty());
        ds.anchors.validate().unwrap();
        assert_eq!(ds.anchors.len(), cfg.num_concepts);
    }

    #[test]
    fn anchors_are_orthonormal() {
        let ds = generate_dataset(&small()).unwrap();
        let a = &ds.anchors.vectors;
        let gram = a.dot(&a.t());
        for i in 0..a.nrows() {
            for j in 0..a.nrows() {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((gram[[i, j]] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn concept_partition_is_even_and_covers_every_class() {
        assert_eq!(concept_class_map(8, 4), vec![0, 0, 1, 1, 2, 2, 3, 3]);
        let map = concept_class_map(7, 3);
        for c in 0..3 {
            let count = map.iter().filter(|&&x| x == c).count();
            assert!((2..=3).contains(&count));
        }
    }

    #[test]
    fn noiseless_evidence_equals_prototype() {
        let cfg = GenConfig {
            noise_sigma: 0.0,
            distractor_rate: 0.0,
            ..small()
        };
        let ds = generate_dataset(&cfg).unwrap();
        for bag in &ds.bags {
            let own = ds.class_concepts(bag.label);
            for &i in &bag.planted {
                let row = bag.features.row(i);
                let hit = own.iter().any(|&m| {
                    row.iter()
                        .zip(ds.anchors.anchor(m).iter())
                        .all(|(x, a)| *x == round_f32(*a))
                });
                assert!(hit, "evidence patch {i} of {} is not a prototype", bag.id);
            }
        }
    }

    #[test]
    fn restrict_remaps_planted() {
        let ds = generate_dataset(&small()).unwrap();
        let bag = &ds.bags[0];
        let rows: Vec<usize> = (0..bag.len()).rev().collect();
        let r = bag.restrict(&rows);
        assert_eq!(r.len(), bag.len());
        let mut expect: Vec<usize> = bag.planted.iter().map(|&i| bag.len() - 1 - i).collect();
        expect.sort_unstable();
        assert_eq!(r.planted, expect);
    }

    #[test]
    fn splits_are_disjoint_and_cover() {
        let ds = generate_dataset(&small()).unwrap();
        let total: usize = [Split::Train, Split::Val, Split::Test]
            .iter()
            .map(|&s| ds.split(s).len())
            .sum();
        assert_eq!(total, ds.bags.len());
        for bag in &ds.bags {
            assert_eq!(bag.split, Split::from_id(&bag.id));
        }
    }
}
