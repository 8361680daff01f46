//! Diversity-guided sample balancing.
//!
//! The first sampler clusters negative patches in an embedding space and
//! draws the same number from every cluster; the second drops negatives a
//! short-trained classifier already rejects with confidence.

use ndarray::{Array2, ArrayView1};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::localize::Patch;
use crate::stain::{intensity_to_od, StainMatrix};

pub const KMEANS_MAX_ITER: usize = 300;
pub const KMEANS_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DgsbConfig {
    pub k: usize,
    /// Samples per cluster; `None` means `ceil(positives / k)`.
    pub m: Option<usize>,
    pub epsilon: f64,
    /// Training budget of the difficulty classifier.
    pub diff_epochs: usize,
}

impl Default for DgsbConfig {
    fn default() -> Self {
        Self {
            k: 10,
            m: None,
            epsilon: 0.5,
            diff_epochs: 5,
        }
    }
}

impl DgsbConfig {
    pub fn samples_per_cluster(&self, positives: usize) -> usize {
        self.m.unwrap_or_else(|| positives.div_ceil(self.k)).max(1)
    }
}

/// Maps a patch to a fixed-length feature vector.
pub trait Embedder {
    fn dim(&self) -> usize;
    fn embed(&self, patch: &Patch) -> Result<Vec<f64>>;
}

/// Training-free embedder: 8×8 pooled grey levels, 8×8 pooled hematoxylin
/// concentration and a 32-bin hematoxylin histogram, each block L2-normalized.
#[derive(Debug, Clone)]
pub struct DefaultEmbedder {
    pub stain: StainMatrix,
    /// Upper edge of the histogram range; larger values land in the last bin.
    pub hist_max: f64,
}

impl Default for DefaultEmbedder {
    fn default() -> Self {
        Self {
            stain: StainMatrix::default(),
            hist_max: 2.0,
        }
    }
}

pub const POOL: usize = 8;
pub const HIST_BINS: usize = 32;

impl Embedder for DefaultEmbedder {
    fn dim(&self) -> usize {
        2 * POOL * POOL + HIST_BINS
    }

    fn embed(&self, patch: &Patch) -> Result<Vec<f64>> {
        let img = &patch.pixels;
        let (w, h) = (img.width(), img.height());
        let mut grey = vec![0.0; POOL * POOL];
        let mut hema = vec![0.0; POOL * POOL];
        let mut count = vec![0.0; POOL * POOL];
        let mut hist = vec![0.0; HIST_BINS];
        for y in 0..h {
            for x in 0..w {
                let cell = (y * POOL / h) * POOL + x * POOL / w;
                let p = img.get(x, y);
                let g = (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) / 255.0;
                let od = [intensity_to_od(p[0]), intensity_to_od(p[1]), intensity_to_od(p[2])];
                let hc = self.stain.unmix(od)[0].max(0.0);
                grey[cell] += g;
                hema[cell] += hc;
                count[cell] += 1.0;
                let b = ((hc / self.hist_max) * HIST_BINS as f64) as usize;
                hist[b.min(HIST_BINS - 1)] += 1.0;
            }
        }
        for i in 0..POOL * POOL {
            if count[i] > 0.0 {
                grey[i] /= count[i];
                hema[i] /= count[i];
            }
        }
        let mut out = Vec::with_capacity(self.dim());
        for mut block in [grey, hema, hist] {
            l2_normalize(&mut block);
            out.extend(block);
        }
        Ok(out)
    }
}

fn l2_normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Embeds every patch; row `i` of the result is patch `i`.
pub fn embed(patches: &[Patch], embedder: &dyn Embedder) -> Result<Array2<f64>> {
    if patches.is_empty() {
        return Err(Error::InvalidArgument {
            arg: "patches",
            reason: "cannot embed an empty patch list".into(),
        });
    }
    let d = embedder.dim();
    let mut out = Array2::zeros((patches.len(), d));
    for (i, p) in patches.iter().enumerate() {
        let v = embedder.embed(p)?;
        if v.len() != d {
            return Err(Error::Embedder(format!(
                "embedder declared dimension {d} but returned {}",
                v.len()
            )));
        }
        out.row_mut(i).assign(&ArrayView1::from(&v));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub centroids: Array2<f64>,
    pub inertia: f64,
    /// Inertia after every assignment step, oldest first.
    pub inertia_history: Vec<f64>,
}

impl ClusterAssignment {
    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k()];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn plus_plus_init(x: &Array2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = x.nrows();
    let mut chosen = Vec::with_capacity(k);
    chosen.push(rng.random_range(0..n));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), x.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 {
                    pick = Some(i);
                    if r < d {
                        break;
                    }
                    r -= d;
                }
            }
            pick.expect("positive total implies a positive weight")
        } else {
            // all remaining points coincide with a chosen centre
            (0..n).find(|i| !chosen.contains(i)).expect("n >= k")
        };
        chosen.push(next);
        for i in 0..n {
            d2[i] = d2[i].min(sq_dist(x.row(i), x.row(next)));
        }
    }
    let mut c = Array2::zeros((k, x.ncols()));
    for (j, &i) in chosen.iter().enumerate() {
        c.row_mut(j).assign(&x.row(i));
    }
    c
}

fn assign(x: &Array2<f64>, c: &Array2<f64>, labels: &mut [usize]) -> f64 {
    let mut inertia = 0.0;
    for i in 0..x.nrows() {
        let mut best = (f64::INFINITY, 0);
        for j in 0..c.nrows() {
            let d = sq_dist(x.row(i), c.row(j));
            if d < best.0 {
                best = (d, j);
            }
        }
        labels[i] = best.1;
        inertia += best.0;
    }
    inertia
}

/// Lloyd's algorithm from a k-means++ start. Deterministic for a given seed.
pub fn kmeans(features: &Array2<f64>, k: usize, seed: u64) -> Result<ClusterAssignment> {
    let n = features.nrows();
    if k == 0 {
        return Err(Error::InvalidArgument {
            arg: "k",
            reason: "need at least one cluster".into(),
        });
    }
    if n < k {
        return Err(Error::TooFewSamples(format!("{n} samples for {k} clusters")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(features, k, &mut rng);
    let mut labels = vec![0usize; n];
    let mut history = Vec::new();

    for _ in 0..KMEANS_MAX_ITER {
        let inertia = assign(features, &centroids, &mut labels);
        history.push(inertia);

        let mut sums = Array2::<f64>::zeros(centroids.raw_dim());
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            sums.row_mut(l).scaled_add(1.0, &features.row(i));
            counts[l] += 1;
        }
        let mut next = centroids.clone();
        for j in 0..k {
            if counts[j] > 0 {
                next.row_mut(j).assign(&(&sums.row(j) / counts[j] as f64));
            }
        }
        // refill empty clusters with the points farthest from their centroid
        let mut taken = Vec::new();
        for j in (0..k).filter(|&j| counts[j] == 0) {
            let far = (0..n)
                .filter(|i| !taken.contains(i))
                .max_by(|&a, &b| {
                    let da = sq_dist(features.row(a), next.row(labels[a]));
                    let db = sq_dist(features.row(b), next.row(labels[b]));
                    da.total_cmp(&db).then(b.cmp(&a))
                })
                .expect("n >= k");
            taken.push(far);
            next.row_mut(j).assign(&features.row(far));
        }
        let shift = (0..k)
            .map(|j| sq_dist(next.row(j), centroids.row(j)).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        if shift < KMEANS_TOL {
            break;
        }
    }
    let inertia = assign(features, &centroids, &mut labels);
    history.push(inertia);
    Ok(ClusterAssignment {
        labels,
        centroids,
        inertia,
        inertia_history: history,
    })
}

/// Draws `min(m, |cluster|)` members uniformly without replacement from
/// every cluster. Output is sorted ascending.
pub fn sample_balanced(assign: &ClusterAssignment, m: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for j in 0..assign.k() {
        let members: Vec<usize> = assign
            .labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == j)
            .map(|(i, _)| i)
            .collect();
        let take = m.min(members.len());
        out.extend(sample(&mut rng, members.len(), take).into_iter().map(|i| members[i]));
    }
    out.sort_unstable();
    out
}

/// Indices whose positive-class probability is at least `epsilon`; the
/// confidently rejected (easy) negatives are dropped.
pub fn difficulty_filter(pos_probs: &[f64], epsilon: f64) -> Vec<usize> {
    pos_probs
        .iter()
        .enumerate()
        .filter(|(_, &p)| p >= epsilon)
        .map(|(i, _)| i)
        .collect()
}
