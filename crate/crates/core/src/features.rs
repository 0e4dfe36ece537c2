//! Per-point network outputs: semantic probabilities, centre offsets and 5D
//! embeddings, either read from file columns or emulated from ground truth.

use std::collections::{BTreeSet, HashMap};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::{ClassId, InstanceId, Labeling, SemanticTaxonomy, UNASSIGNED};
use crate::pcio::FeatureColumns;
use crate::rng::{derived_rng, STREAM_FEATURES};
use crate::sampling::Block;

pub const EMBEDDING_DIM: usize = 5;
pub type Embedding = [f64; EMBEDDING_DIM];

/// Minimum pairwise distance between codebook vectors.
pub const CODEBOOK_SEPARATION: f64 = 3.0;

const PROB_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    num_classes: usize,
    sem_probs: Vec<f64>,
    offsets: Vec<[f64; 3]>,
    embeddings: Vec<Embedding>,
}

impl FeatureSet {
    /// `sem_probs` is row-major, one row of `num_classes` per point.
    pub fn new(
        num_classes: usize,
        sem_probs: Vec<f64>,
        offsets: Vec<[f64; 3]>,
        embeddings: Vec<Embedding>,
    ) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::invalid("feature set needs at least one class"));
        }
        let n = offsets.len();
        if embeddings.len() != n || sem_probs.len() != n * num_classes {
            return Err(Error::invalid(format!(
                "feature shapes disagree: {} offsets, {} embeddings, {} probabilities for {num_classes} classes",
                n,
                embeddings.len(),
                sem_probs.len()
            )));
        }
        if !offsets
            .iter()
            .flatten()
            .chain(embeddings.iter().flatten())
            .all(|v| v.is_finite())
        {
            return Err(Error::Data("non-finite offset or embedding".into()));
        }
        for (i, row) in sem_probs.chunks(num_classes).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Data(format!("probability row {i} is not a distribution")));
            }
        }
        Ok(Self {
            num_classes,
            sem_probs,
            offsets,
            embeddings,
        })
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn probs(&self, i: usize) -> &[f64] {
        &self.sem_probs[i * self.num_classes..(i + 1) * self.num_classes]
    }

    pub fn offsets(&self) -> &[[f64; 3]] {
        &self.offsets
    }

    pub fn embeddings(&self) -> &[Embedding] {
        &self.embeddings
    }

    /// Predicted class of point `i`; ties go to the lower class id.
    pub fn predicted_class(&self, i: usize) -> ClassId {
        let row = self.probs(i);
        let mut best = 0;
        for (c, &p) in row.iter().enumerate().skip(1) {
            if p > row[best] {
                best = c;
            }
        }
        best as ClassId
    }

    pub fn max_prob(&self, i: usize) -> f64 {
        self.probs(i).iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OracleNoise {
    pub sem_flip_prob: f64,
    pub offset_sigma: f64,
    pub embedding_sigma: f64,
}

impl OracleNoise {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.sem_flip_prob) {
            return Err(Error::invalid("sem_flip_prob must lie in [0, 1]"));
        }
        if !(self.offset_sigma >= 0.0 && self.embedding_sigma >= 0.0)
            || !self.offset_sigma.is_finite()
            || !self.embedding_sigma.is_finite()
        {
            return Err(Error::invalid("noise sigmas must be finite and >= 0"));
        }
        Ok(())
    }
}

/// The first `n` embedding cluster centres: nonzero points of the D5 lattice
/// (integer vectors with even coordinate sum) scaled so neighbouring points
/// sit exactly [`CODEBOOK_SEPARATION`] apart, taken shell by shell from the
/// origin in lexicographic order. The origin itself is left for stuff.
pub fn codebook(n: usize) -> Vec<Embedding> {
    let scale = CODEBOOK_SEPARATION / 2f64.sqrt();
    let mut r: i64 = 1;
    loop {
        let mut pts: Vec<(i64, [i64; EMBEDDING_DIM])> = Vec::new();
        let side = 2 * r + 1;
        for code in 0..side.pow(EMBEDDING_DIM as u32) {
            let mut v = [0i64; EMBEDDING_DIM];
            let mut c = code;
            for x in v.iter_mut() {
                *x = c % side - r;
                c /= side;
            }
            let norm2: i64 = v.iter().map(|x| x * x).sum();
            if norm2 > 0 && norm2 <= r * r && v.iter().sum::<i64>() % 2 == 0 {
                pts.push((norm2, v));
            }
        }
        if pts.len() >= n {
            pts.sort_unstable();
            return pts[..n].iter().map(|(_, v)| v.map(|x| x as f64 * scale)).collect();
        }
        r += 1;
    }
}

/// Emulates the network branches from ground truth with controllable noise.
#[derive(Debug, Clone)]
pub struct OracleProvider {
    gt: Labeling,
    taxonomy: SemanticTaxonomy,
    noise: OracleNoise,
    codes: HashMap<InstanceId, Embedding>,
}

impl OracleProvider {
    /// `gt` labels the cloud that blocks index into.
    pub fn new(gt: Labeling, taxonomy: SemanticTaxonomy, noise: OracleNoise) -> Result<Self> {
        noise.validate()?;
        gt.validate(&taxonomy, false)?;
        let ids: BTreeSet<InstanceId> = gt
            .semantic()
            .iter()
            .zip(gt.instance())
            .filter(|&(&c, &i)| i != UNASSIGNED && taxonomy.is_thing(c))
            .map(|(_, &i)| i)
            .collect();
        let codes = ids.iter().copied().zip(codebook(ids.len())).collect();
        Ok(Self {
            gt,
            taxonomy,
            noise,
            codes,
        })
    }

    pub fn noise(&self) -> OracleNoise {
        self.noise
    }

    /// Codebook vector of instance `id`, if it is a thing instance.
    pub fn code(&self, id: InstanceId) -> Option<Embedding> {
        self.codes.get(&id).copied()
    }

    /// Features for one block; `stream` separates the random draws of
    /// different blocks under one seed.
    pub fn provide(&self, block: &Block, seed: u64, stream: u64) -> Result<FeatureSet> {
        let ids = block.global_ids().as_slice();
        if ids.last().is_some_and(|&i| i >= self.gt.len()) {
            return Err(Error::contract("block points lack ground-truth labels"));
        }
        let c = self.taxonomy.len();
        let local = block.local_positions();
        let sem = |k: usize| self.gt.semantic()[ids[k]];
        let thing_instance = |k: usize| {
            let ins = self.gt.instance()[ids[k]];
            (ins != UNASSIGNED && self.taxonomy.is_thing(sem(k))).then_some(ins)
        };

        let mut sums: HashMap<InstanceId, ([f64; 3], usize)> = HashMap::new();
        for k in 0..ids.len() {
            if let Some(ins) = thing_instance(k) {
                let e = sums.entry(ins).or_insert(([0.0; 3], 0));
                for a in 0..3 {
                    e.0[a] += local[k][a];
                }
                e.1 += 1;
            }
        }
        let centroid = |ins: InstanceId| {
            let (s, n) = sums[&ins];
            [s[0] / n as f64, s[1] / n as f64, s[2] / n as f64]
        };

        let mut rng = derived_rng(seed, &[STREAM_FEATURES, stream]);
        let offset_noise = Normal::new(0.0, self.noise.offset_sigma).map_err(|e| Error::invalid(e.to_string()))?;
        let emb_noise = Normal::new(0.0, self.noise.embedding_sigma).map_err(|e| Error::invalid(e.to_string()))?;

        let mut probs = vec![0.0; ids.len() * c];
        let mut offsets = Vec::with_capacity(ids.len());
        let mut embeddings = Vec::with_capacity(ids.len());
        for k in 0..ids.len() {
            let mut class = sem(k) as usize;
            if c > 1 && self.noise.sem_flip_prob > 0.0 && rng.random_bool(self.noise.sem_flip_prob) {
                let other = rng.random_range(0..c - 1);
                class = if other >= class { other + 1 } else { other };
            }
            probs[k * c + class] = 1.0;

            let ins = thing_instance(k);
            let mut off = match ins {
                Some(i) => {
                    let m = centroid(i);
                    [m[0] - local[k][0], m[1] - local[k][1], m[2] - local[k][2]]
                }
                None => [0.0; 3],
            };
            if self.noise.offset_sigma > 0.0 {
                for v in &mut off {
                    *v += offset_noise.sample(&mut rng);
                }
            }
            offsets.push(off);

            let mut emb = ins.map_or([0.0; EMBEDDING_DIM], |i| self.codes[&i]);
            if self.noise.embedding_sigma > 0.0 {
                for v in &mut emb {
                    *v += emb_noise.sample(&mut rng);
                }
            }
            embeddings.push(emb);
        }
        FeatureSet::new(c, probs, offsets, embeddings)
    }
}

/// Features read from file columns indexed by the cloud that `block` points
/// into. Probability rows within 1e-3 of summing to one are renormalized.
pub fn file_provide(block: &Block, columns: &FeatureColumns, num_classes: usize) -> Result<FeatureSet> {
    let column = |name: String| -> Result<&[f64]> {
        columns
            .get(&name)
            .ok_or_else(|| Error::Format(format!("missing feature column `{name}`")))
    };
    let off: Vec<&[f64]> = ["off_x", "off_y", "off_z"]
        .into_iter()
        .map(|n| column(n.to_string()))
        .collect::<Result<_>>()?;
    let emb: Vec<&[f64]> = (0..EMBEDDING_DIM)
        .map(|d| column(format!("emb_{d}")))
        .collect::<Result<_>>()?;
    let prob: Vec<&[f64]> = (0..num_classes)
        .map(|c| column(format!("p_{c}")))
        .collect::<Result<_>>()?;
    let ids = block.global_ids().as_slice();
    if ids
        .last()
        .is_some_and(|&i| off.iter().chain(&emb).chain(&prob).any(|col| i >= col.len()))
    {
        return Err(Error::contract("feature columns are shorter than the cloud"));
    }

    let mut probs = Vec::with_capacity(ids.len() * num_classes);
    for &i in ids {
        let row: Vec<f64> = prob.iter().map(|col| col[i]).collect();
        let sum: f64 = row.iter().sum();
        if row.iter().any(|p| !p.is_finite() || *p < 0.0) || !((sum - 1.0).abs() <= PROB_TOLERANCE) {
            return Err(Error::Data(format!("probabilities of point {i} sum to {sum}")));
        }
        probs.extend(row.iter().map(|p| p / sum));
    }
    let offsets = ids.iter().map(|&i| [off[0][i], off[1][i], off[2][i]]).collect();
    let embeddings = ids.iter().map(|&i| std::array::from_fn(|d| emb[d][i])).collect();
    FeatureSet::new(num_classes, probs, offsets, embeddings).map_err(|e| match e {
        Error::InvalidArgument(m) => Error::Data(m),
        e => e,
    })
}
