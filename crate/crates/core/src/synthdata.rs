//! Deterministic synthetic identities with a long-tailed instance count.
//!
//! Each identity is a unit-norm center in `d_in` dimensions; an instance is
//! the center plus isotropic Gaussian noise. Every vector is a pure function
//! of `(seed, identity, instance)`, so nothing here depends on call order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{norm, Tensor};
use crate::rng::{self, Domain};

/// Identities with fewer instances than this count as tail classes.
pub const TAIL_THRESHOLD: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct IdentityUniverse {
    classes: usize,
    reserved: usize,
    d_in: usize,
    sigma: f64,
    seed: u64,
    centers: Vec<Vec<f64>>,
}

/// Builds `classes` training identities plus an equally sized reserved range
/// used for distractors.
pub fn build_universe(classes: usize, d_in: usize, sigma: f64, seed: u64) -> Result<IdentityUniverse> {
    build_universe_with_reserved(classes, classes, d_in, sigma, seed)
}

pub fn build_universe_with_reserved(
    classes: usize,
    reserved: usize,
    d_in: usize,
    sigma: f64,
    seed: u64,
) -> Result<IdentityUniverse> {
    if classes == 0 {
        return Err(Error::config("universe needs at least one identity"));
    }
    if d_in < 2 {
        return Err(Error::config(format!("input dimension must be >= 2, got {d_in}")));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::config(format!("sigma must be finite and >= 0, got {sigma}")));
    }
    let centers = (0..classes).map(|id| center_vector(seed, id, d_in)).collect();
    Ok(IdentityUniverse {
        classes,
        reserved,
        d_in,
        sigma,
        seed,
        centers,
    })
}

fn center_vector(seed: u64, id: usize, d_in: usize) -> Vec<f64> {
    let mut s = rng::stream(seed, Domain::Center, &[id as u64]);
    loop {
        let mut v = rng::gaussian_vec(&mut s, d_in);
        let n = norm(&v);
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            return v;
        }
    }
}

impl IdentityUniverse {
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn reserved(&self) -> usize {
        self.reserved
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Training identity centers, `classes × d_in`.
    pub fn centers(&self) -> &[Vec<f64>] {
        &self.centers
    }

    /// Center of any identity, training or reserved.
    pub fn center(&self, id: usize) -> Result<Vec<f64>> {
        if id < self.classes {
            Ok(self.centers[id].clone())
        } else if id < self.classes + self.reserved {
            Ok(center_vector(self.seed, id, self.d_in))
        } else {
            Err(Error::Index {
                what: "identity universe",
                index: id,
                len: self.classes + self.reserved,
            })
        }
    }

    /// `center(id) + sigma · noise`, noise keyed by `(domain, id, view)`.
    pub(crate) fn view(&self, id: usize, domain: Domain, view: &[u64]) -> Result<Vec<f64>> {
        let mut v = self.center(id)?;
        if self.sigma > 0.0 {
            let mut parts = vec![id as u64];
            parts.extend_from_slice(view);
            let mut s = rng::stream(self.seed, domain, &parts);
            for (x, n) in v.iter_mut().zip(rng::gaussian_vec(&mut s, self.d_in)) {
                *x += self.sigma * n;
            }
        }
        Ok(v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LongTailSpec {
    pub zipf_exponent: f64,
    pub min_count: usize,
    pub max_count: usize,
}

impl LongTailSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.zipf_exponent >= 0.0) {
            return Err(Error::config("zipf exponent must be >= 0"));
        }
        if self.min_count == 0 || self.min_count > self.max_count {
            return Err(Error::config(format!(
                "need 1 <= min_count <= max_count, got {}..{}",
                self.min_count, self.max_count
            )));
        }
        Ok(())
    }
}

/// Instance count per identity; identity `i` has rank `i + 1`.
///
/// `count(r) = round(max_count · r^(−exponent))`, clamped to
/// `[min_count, max_count]`.
pub fn assign_longtail_counts(spec: &LongTailSpec, classes: usize) -> Result<Vec<usize>> {
    spec.validate()?;
    Ok((1..=classes)
        .map(|rank| {
            let raw = spec.max_count as f64 * (rank as f64).powf(-spec.zipf_exponent);
            (raw.round() as usize).clamp(spec.min_count, spec.max_count)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountSummary {
    pub classes: usize,
    pub total_instances: usize,
    pub mean_count: f64,
    /// Fraction of identities with fewer than [`TAIL_THRESHOLD`] instances.
    pub tail_fraction: f64,
    /// `(count, number of identities with that count)`, ascending by count.
    pub histogram: Vec<(usize, usize)>,
}

pub fn summarize_counts(counts: &[usize]) -> CountSummary {
    let total: usize = counts.iter().sum();
    let tail = counts.iter().filter(|&&c| c < TAIL_THRESHOLD).count();
    let mut hist = std::collections::BTreeMap::new();
    for &c in counts {
        *hist.entry(c).or_insert(0usize) += 1;
    }
    let n = counts.len().max(1) as f64;
    CountSummary {
        classes: counts.len(),
        total_instances: total,
        mean_count: total as f64 / n,
        tail_fraction: tail as f64 / n,
        histogram: hist.into_iter().collect(),
    }
}

/// Training instance `instance_index` of `identity`. Not re-normalized.
pub fn draw_instance(
    universe: &IdentityUniverse,
    counts: &[usize],
    identity: usize,
    instance_index: usize,
) -> Result<Vec<f64>> {
    let count = *counts.get(identity).ok_or(Error::Index {
        what: "identity counts",
        index: identity,
        len: counts.len(),
    })?;
    if instance_index >= count {
        return Err(Error::Index {
            what: "identity instances",
            index: instance_index,
            len: count,
        });
    }
    universe.view(identity, Domain::Instance, &[instance_index as u64])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    /// Every instance equally likely; identities weighted by size.
    Instance,
    /// Every identity equally likely.
    Class,
}

/// Identities eligible for sampling and their instance counts.
#[derive(Clone, Debug, PartialEq)]
pub struct Population {
    ids: Vec<usize>,
    counts: Vec<usize>,
    cumulative: Vec<usize>,
}

impl Population {
    pub fn all(counts: &[usize]) -> Self {
        Self::subset(counts, (0..counts.len()).collect())
    }

    pub fn subset(counts: &[usize], ids: Vec<usize>) -> Self {
        let sub: Vec<usize> = ids.iter().map(|&i| counts[i]).collect();
        let mut acc = 0;
        let cumulative = sub
            .iter()
            .map(|&c| {
                acc += c;
                acc
            })
            .collect();
        Self {
            ids,
            counts: sub,
            cumulative,
        }
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn total_instances(&self) -> usize {
        self.cumulative.last().copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Maps a flat instance number to `(position in population, instance)`.
    fn locate(&self, flat: usize) -> (usize, usize) {
        let pos = self.cumulative.partition_point(|&c| c <= flat);
        let start = if pos == 0 { 0 } else { self.cumulative[pos - 1] };
        (pos, flat - start)
    }
}

/// One training batch: query `x_t`, reference `x_w`, shared labels `y`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub x_t: Tensor,
    pub x_w: Tensor,
    pub y: Vec<usize>,
    pub query_instance: Vec<usize>,
    /// `None` when the identity has a single instance and the reference is
    /// a separately drawn view of its center.
    pub reference_instance: Vec<Option<usize>>,
}

/// Position in the batch stream. Batch `t` depends only on `(seed, t)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerState {
    pub seed: u64,
    pub counter: u64,
}

impl SamplerState {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }
}

/// Draws `batch` pairs with replacement and advances the sampler.
pub fn make_pair_batch(
    universe: &IdentityUniverse,
    population: &Population,
    batch: usize,
    mode: SamplingMode,
    state: &mut SamplerState,
) -> Result<PairBatch> {
    if population.is_empty() || population.total_instances() == 0 {
        return Err(Error::config("cannot sample from an empty population"));
    }
    let t = state.counter;
    state.counter += 1;
    let mut s = rng::stream(state.seed, Domain::Batch, &[t]);
    let d = universe.d_in();
    let mut x_t = Vec::with_capacity(batch * d);
    let mut x_w = Vec::with_capacity(batch * d);
    let mut y = Vec::with_capacity(batch);
    let mut qi = Vec::with_capacity(batch);
    let mut ri = Vec::with_capacity(batch);
    for slot in 0..batch {
        let (pos, query) = match mode {
            SamplingMode::Instance => population.locate(s.random_range(0..population.total_instances())),
            SamplingMode::Class => {
                let pos = s.random_range(0..population.len());
                (pos, s.random_range(0..population.counts[pos]))
            }
        };
        let id = population.ids[pos];
        let count = population.counts[pos];
        x_t.extend(universe.view(id, Domain::Instance, &[query as u64])?);
        if count >= 2 {
            let mut r = s.random_range(0..count - 1);
            if r >= query {
                r += 1;
            }
            x_w.extend(universe.view(id, Domain::Instance, &[r as u64])?);
            ri.push(Some(r));
        } else {
            x_w.extend(universe.view(id, Domain::Reference, &[t, slot as u64])?);
            ri.push(None);
        }
        y.push(id);
        qi.push(query);
    }
    Ok(PairBatch {
        x_t: Tensor::new(vec![batch, d], x_t)?,
        x_w: Tensor::new(vec![batch, d], x_w)?,
        y,
        query_instance: qi,
        reference_instance: ri,
    })
}

/// A held-out view of an identity used only for evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalSample {
    pub identity: usize,
    pub view: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerificationPair {
    pub a: usize,
    pub b: usize,
    pub genuine: bool,
}

/// Verification pairs plus a probe/gallery split with distractors.
///
/// All indices point into `samples`. Distractor identities come from the
/// universe's reserved range and never appear in training.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalProtocol {
    pub samples: Vec<EvalSample>,
    pub pairs: Vec<VerificationPair>,
    pub probes: Vec<usize>,
    pub gallery: Vec<usize>,
    pub distractor_labels: Vec<usize>,
}

impl EvalProtocol {
    pub fn label(&self, sample: usize) -> usize {
        self.samples[sample].identity
    }

    /// Stacks every sample into a `samples × d_in` matrix.
    pub fn inputs(&self, universe: &IdentityUniverse) -> Result<Tensor> {
        let d = universe.d_in();
        let mut data = Vec::with_capacity(self.samples.len() * d);
        for s in &self.samples {
            data.extend(universe.view(s.identity, Domain::Eval, &[s.view])?);
        }
        Tensor::new(vec![self.samples.len(), d], data)
    }
}

pub fn build_eval_protocol(
    universe: &IdentityUniverse,
    n_pairs: usize,
    n_probe: usize,
    n_distractors: usize,
    seed: u64,
) -> Result<EvalProtocol> {
    let classes = universe.classes();
    if n_probe > classes {
        return Err(Error::config(format!(
            "{n_probe} probes requested but only {classes} training identities exist"
        )));
    }
    if n_distractors > universe.reserved() {
        return Err(Error::config(format!(
            "{n_distractors} distractors requested but the reserved range holds {}",
            universe.reserved()
        )));
    }
    if n_pairs > 0 && classes < 2 {
        return Err(Error::config("impostor pairs need at least two identities"));
    }
    let mut s = rng::stream(seed, Domain::Eval, &[universe.seed()]);
    let mut samples = Vec::new();
    let mut next_view = 0u64;
    let mut add = |samples: &mut Vec<EvalSample>, identity: usize| {
        samples.push(EvalSample {
            identity,
            view: next_view,
        });
        next_view += 1;
        samples.len() - 1
    };

    let genuine = n_pairs / 2;
    let mut pairs = Vec::with_capacity(n_pairs);
    for i in 0..n_pairs {
        if i < genuine {
            let id = s.random_range(0..classes);
            let a = add(&mut samples, id);
            let b = add(&mut samples, id);
            pairs.push(VerificationPair { a, b, genuine: true });
        } else {
            let ia = s.random_range(0..classes);
            let mut ib = s.random_range(0..classes - 1);
            if ib >= ia {
                ib += 1;
            }
            let a = add(&mut samples, ia);
            let b = add(&mut samples, ib);
            pairs.push(VerificationPair { a, b, genuine: false });
        }
    }

    // partial Fisher-Yates for distinct probe identities
    let mut ids: Vec<usize> = (0..classes).collect();
    for i in 0..n_probe {
        let j = s.random_range(i..classes);
        ids.swap(i, j);
    }
    let mut probes = Vec::with_capacity(n_probe);
    let mut gallery = Vec::with_capacity(n_probe + n_distractors);
    for &id in &ids[..n_probe] {
        gallery.push(add(&mut samples, id));
        probes.push(add(&mut samples, id));
    }
    let distractor_labels: Vec<usize> = (classes..classes + n_distractors).collect();
    for &id in &distractor_labels {
        gallery.push(add(&mut samples, id));
    }
    Ok(EvalProtocol {
        samples,
        pairs,
        probes,
        gallery,
        distractor_labels,
    })
}

const DATA_MAGIC: &[u8; 4] = b"DCQD";
const DATA_VERSION: u32 = 1;

/// Writes every training instance as a flat little-endian record file.
pub fn write_dataset(path: &Path, universe: &IdentityUniverse, counts: &[usize]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let total: usize = counts.iter().sum();
    w.write_all(DATA_MAGIC)?;
    w.write_all(&DATA_VERSION.to_le_bytes())?;
    w.write_all(&(counts.len() as u32).to_le_bytes())?;
    w.write_all(&(universe.d_in() as u32).to_le_bytes())?;
    w.write_all(&(total as u64).to_le_bytes())?;
    for (id, &count) in counts.iter().enumerate() {
        for idx in 0..count {
            w.write_all(&(id as u32).to_le_bytes())?;
            w.write_all(&(idx as u32).to_le_bytes())?;
            for v in draw_instance(universe, counts, id, idx)? {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub identity: u32,
    pub instance: u32,
    pub features: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetFile {
    pub classes: u32,
    pub d_in: u32,
    pub records: Vec<DatasetRecord>,
}

pub fn read_dataset(path: &Path) -> Result<DatasetFile> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DATA_MAGIC {
        return Err(Error::Integrity("bad dataset magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != DATA_VERSION {
        return Err(Error::Version {
            found: version,
            expected: DATA_VERSION,
        });
    }
    let classes = read_u32(&mut r)?;
    let d_in = read_u32(&mut r)?;
    let mut buf8 = [0u8; 8];
    r.read_exact(&mut buf8)?;
    let total = u64::from_le_bytes(buf8);
    let mut records = Vec::with_capacity(total as usize);
    for _ in 0..total {
        let identity = read_u32(&mut r)?;
        let instance = read_u32(&mut r)?;
        let mut features = Vec::with_capacity(d_in as usize);
        for _ in 0..d_in {
            r.read_exact(&mut buf8)?;
            features.push(f64::from_le_bytes(buf8));
        }
        records.push(DatasetRecord {
            identity,
            instance,
            features,
        });
    }
    Ok(DatasetFile {
        classes,
        d_in,
        records,
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
