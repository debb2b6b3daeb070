//! k-means codebooks over frame features and nearest-centroid assignment.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

pub const CODEBOOK_MAGIC: &[u8; 4] = b"DSUK";
pub const CODEBOOK_VERSION: u32 = 1;

/// Cluster count used for full-scale unit inventories.
pub const DEFAULT_K: usize = 2000;

#[derive(Debug, Clone, PartialEq)]
pub struct KmeansConfig {
    pub k: usize,
    pub max_iters: usize,
    /// Stop once the relative distortion improvement drops below this.
    pub tolerance: f64,
    pub seed: u64,
    /// Uniformly subsample at most this many frames before training.
    pub sample_cap: Option<usize>,
}

impl Default for KmeansConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            max_iters: 100,
            tolerance: 1e-6,
            seed: 0,
            sample_cap: None,
        }
    }
}

/// `K × D` centroid matrix; distances are squared Euclidean.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook<T> {
    centroids: Matrix<T>,
}

impl<T: Scalar> Codebook<T> {
    pub fn new(centroids: Matrix<T>) -> Result<Self> {
        if centroids.rows() == 0 || centroids.cols() == 0 {
            return Err(Error::arg("codebook needs K >= 1 and D >= 1"));
        }
        if !centroids.all_finite() {
            return Err(Error::arg("codebook centroids must be finite"));
        }
        Ok(Self { centroids })
    }

    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }

    pub fn centroids(&self) -> &Matrix<T> {
        &self.centroids
    }

    pub fn centroid(&self, k: usize) -> &[T] {
        self.centroids.row(k)
    }

    /// Nearest centroid and its squared distance; ties go to the lowest index.
    pub fn nearest(&self, frame: &[T]) -> (usize, T) {
        let mut best = (0, T::infinity());
        for (k, c) in self.centroids.iter_rows().enumerate() {
            let d = sq_dist(frame, c);
            if d < best.1 {
                best = (k, d);
            }
        }
        best
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CODEBOOK_MAGIC)?;
        w.write_u32::<LittleEndian>(CODEBOOK_VERSION)?;
        w.write_u32::<LittleEndian>(self.k() as u32)?;
        w.write_u32::<LittleEndian>(self.dim() as u32)?;
        for &v in self.centroids.as_slice() {
            w.write_f32::<LittleEndian>(v.as_f32())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::format("codebook shorter than its magic"))?;
        if &magic != CODEBOOK_MAGIC {
            return Err(Error::format("bad codebook magic, expected \"DSUK\""));
        }
        let truncated = |_| Error::Corruption("codebook truncated".into());
        let version = r.read_u32::<LittleEndian>().map_err(truncated)?;
        if version != CODEBOOK_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: CODEBOOK_VERSION,
            });
        }
        let k = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        let d = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        let mut data = Vec::with_capacity(k * d);
        for _ in 0..k * d {
            data.push(T::of(r.read_f32::<LittleEndian>().map_err(truncated)? as f64));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Corruption("trailing bytes after codebook".into()));
        }
        Self::new(Matrix::from_vec(k, d, data)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }

    /// Centroids rounded to the `f32` storage precision of the file format.
    pub fn to_storage_precision(&self) -> Self {
        let centroids = self.centroids.cast::<f32>().cast::<T>();
        Self { centroids }
    }
}

#[inline]
fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

fn check_dim<T: Scalar>(features: &Matrix<T>, codebook: &Codebook<T>) -> Result<()> {
    if features.rows() > 0 && features.cols() != codebook.dim() {
        return Err(Error::arg(format!(
            "features have dimension {}, codebook has {}",
            features.cols(),
            codebook.dim()
        )));
    }
    Ok(())
}

fn nearest_all<T: Scalar>(features: &Matrix<T>, codebook: &Codebook<T>) -> Vec<(usize, T)> {
    (0..features.rows())
        .into_par_iter()
        .map(|r| codebook.nearest(features.row(r)))
        .collect()
}

/// Unit index of every frame.
pub fn assign<T: Scalar>(features: &Matrix<T>, codebook: &Codebook<T>) -> Result<Vec<u32>> {
    check_dim(features, codebook)?;
    Ok(nearest_all(features, codebook)
        .into_iter()
        .map(|(k, _)| k as u32)
        .collect())
}

/// Sum over frames of the squared distance to the nearest centroid.
pub fn distortion<T: Scalar>(features: &Matrix<T>, codebook: &Codebook<T>) -> Result<T> {
    check_dim(features, codebook)?;
    Ok(nearest_all(features, codebook).into_iter().map(|(_, d)| d).sum())
}

fn sample_d2(d2: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let n = d2.len();
    let total: f64 = d2.iter().sum();
    if total <= 0.0 {
        // Fewer distinct points than K: duplicates are unavoidable.
        return rng.random_range(0..n);
    }
    let mut target = rng.random::<f64>() * total;
    let mut chosen = n - 1;
    for (i, &w) in d2.iter().enumerate() {
        if w > 0.0 && target < w {
            chosen = i;
            break;
        }
        target -= w;
    }
    // Rounding can leave `chosen` on a zero-weight point.
    if d2[chosen] == 0.0 {
        chosen = d2.iter().rposition(|&w| w > 0.0).unwrap_or(chosen);
    }
    chosen
}

/// Greedy k-means++: each new centre is the best of `2 + ln K` D²-sampled
/// candidates, judged by the resulting potential.
fn kmeans_plus_plus<T: Scalar>(data: &Matrix<T>, k: usize, rng: &mut ChaCha8Rng) -> Matrix<T> {
    let n = data.rows();
    let trials = 2 + (k as f64).ln().floor() as usize;
    let mut centroids = Matrix::zeros(k, data.cols());
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(data.row(first));
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(data.row(i), data.row(first)).as_f64())
        .collect();
    for c in 1..k {
        let candidates: Vec<usize> = (0..trials).map(|_| sample_d2(&d2, rng)).collect();
        let mut best: Option<(f64, Vec<f64>, usize)> = None;
        for &cand in &candidates {
            let next: Vec<f64> = (0..n)
                .into_par_iter()
                .map(|i| d2[i].min(sq_dist(data.row(i), data.row(cand)).as_f64()))
                .collect();
            let potential: f64 = next.iter().sum();
            if best.as_ref().is_none_or(|(p, _, _)| potential < *p) {
                best = Some((potential, next, cand));
            }
        }
        let (_, next, pick) = best.expect("at least two trials");
        centroids.row_mut(c).copy_from_slice(data.row(pick));
        d2 = next;
    }
    centroids
}

/// Train a codebook with k-means++ seeding and Lloyd iterations.
///
/// Returns the codebook and the distortion recorded after every assignment
/// step; the history is non-increasing and its last entry is the distortion
/// of the returned codebook on the (possibly subsampled) training frames.
pub fn kmeans_train<T: Scalar>(features: &Matrix<T>, config: &KmeansConfig) -> Result<(Codebook<T>, Vec<T>)> {
    if features.rows() == 0 {
        return Err(Error::arg("k-means needs at least one frame"));
    }
    if config.k == 0 {
        return Err(Error::arg("k must be at least 1"));
    }
    if features.cols() == 0 {
        return Err(Error::arg("features have zero dimension"));
    }
    if !features.all_finite() {
        return Err(Error::arg("features contain non-finite values"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let sampled;
    let data = match config.sample_cap {
        Some(cap) if cap < features.rows() => {
            if cap == 0 {
                return Err(Error::arg("sample_cap must be positive"));
            }
            let mut picks = index::sample(&mut rng, features.rows(), cap).into_vec();
            picks.sort_unstable();
            let rows: Vec<Vec<T>> = picks.iter().map(|&i| features.row(i).to_vec()).collect();
            sampled = Matrix::from_rows(&rows)?;
            &sampled
        }
        _ => features,
    };

    let (n, dim, k) = (data.rows(), data.cols(), config.k);
    let mut codebook = Codebook {
        centroids: kmeans_plus_plus(data, k, &mut rng),
    };
    let mut history: Vec<T> = Vec::new();
    let mut previous: Option<Codebook<T>> = None;

    for _ in 0..config.max_iters.max(1) {
        let nearest = nearest_all(data, &codebook);
        let current: T = nearest.iter().map(|&(_, d)| d).sum();
        if let Some(&last) = history.last() {
            if current > last {
                // Floating-point noise only; keep the better codebook.
                codebook = previous.take().expect("previous codebook kept");
                break;
            }
        }
        history.push(current);
        if history.len() >= 2 {
            let prev = history[history.len() - 2].as_f64();
            let improvement = if prev > 0.0 { (prev - current.as_f64()) / prev } else { 0.0 };
            if improvement < config.tolerance {
                break;
            }
        }
        if history.len() >= config.max_iters {
            break;
        }

        let mut sums = Matrix::<T>::zeros(k, dim);
        let mut counts = vec![0usize; k];
        for (i, &(c, _)) in nearest.iter().enumerate() {
            counts[c] += 1;
            for (s, &v) in sums.row_mut(c).iter_mut().zip(data.row(i)) {
                *s += v;
            }
        }
        let mut next = Matrix::zeros(k, dim);
        for c in 0..k {
            if counts[c] > 0 {
                let inv = T::one() / T::of_usize(counts[c]);
                for (dst, &s) in next.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s * inv;
                }
            }
        }
        // Empty clusters move onto the point farthest from its new centroid.
        let mut dist_to_own: Vec<T> = nearest
            .iter()
            .enumerate()
            .map(|(i, &(c, _))| sq_dist(data.row(i), next.row(c)))
            .collect();
        for c in (0..k).filter(|&c| counts[c] == 0) {
            let far = (0..n)
                .max_by(|&a, &b| {
                    dist_to_own[a]
                        .partial_cmp(&dist_to_own[b])
                        .expect("finite distances")
                        .then(b.cmp(&a))
                })
                .expect("n > 0");
            next.row_mut(c).copy_from_slice(data.row(far));
            dist_to_own[far] = T::zero();
        }
        previous = Some(std::mem::replace(&mut codebook, Codebook { centroids: next }));
    }
    Ok((codebook, history))
}
