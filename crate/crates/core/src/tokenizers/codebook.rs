//! Vector-quantization codebooks learned with seeded k-means.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SPCB";
const VERSION: u32 = 1;

/// `K x D` table of codewords, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    k: usize,
    d: usize,
    codewords: Vec<f32>,
}

/// Result of [`train_codebook`]: the codebook and the mean squared
/// quantization error (per component) measured at each iteration.
#[derive(Clone, Debug)]
pub struct KMeansFit {
    pub codebook: Codebook,
    pub errors: Vec<f64>,
}

impl Codebook {
    pub fn new(k: usize, d: usize, codewords: Vec<f32>) -> Result<Self> {
        if k == 0 || d == 0 || codewords.len() != k * d {
            return Err(Error::Shape(format!(
                "codebook {k}x{d} cannot hold {} values",
                codewords.len()
            )));
        }
        Ok(Self { k, d, codewords })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn codewords(&self) -> &[f32] {
        &self.codewords
    }

    pub fn codeword(&self, i: usize) -> &[f32] {
        &self.codewords[i * self.d..(i + 1) * self.d]
    }

    /// Nearest codeword by Euclidean distance; ties go to the lowest id.
    pub fn nearest(&self, v: &[f32]) -> u32 {
        debug_assert_eq!(v.len(), self.d);
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for i in 0..self.k {
            let d = sq_dist(v, self.codeword(i));
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best as u32
    }

    /// Mean squared error per component of quantizing `vectors` (flat `N x D`).
    pub fn quantization_error(&self, vectors: &[f32]) -> f64 {
        let n = vectors.len() / self.d;
        let total: f64 = vectors
            .chunks_exact(self.d)
            .map(|v| sq_dist(v, self.codeword(self.nearest(v) as usize)))
            .sum();
        total / (n * self.d) as f64
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.codewords.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.k as u32).to_le_bytes());
        out.extend_from_slice(&(self.d as u32).to_le_bytes());
        for x in &self.codewords {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Format("codebook file truncated in header".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format("codebook file has wrong magic bytes".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let version = word(4);
        if version != VERSION {
            return Err(Error::Format(format!(
                "codebook version {version} unsupported (expected {VERSION})"
            )));
        }
        let (k, d) = (word(8) as usize, word(12) as usize);
        let body = &bytes[16..];
        if body.len() != k * d * 4 {
            return Err(Error::Format(format!(
                "codebook body holds {} bytes, expected {} for {k}x{d}",
                body.len(),
                k * d * 4
            )));
        }
        let codewords = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(k, d, codewords)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

#[inline]
fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

#[inline]
fn sq_dist64(a: &[f32], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y;
            d * d
        })
        .sum()
}

fn nearest64(v: &[f32], centers: &[f64], d: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.chunks_exact(d).enumerate() {
        let dist = sq_dist64(v, c);
        if dist < best.1 {
            best = (i, dist);
        }
    }
    best
}

/// Lloyd's k-means over `vectors` (flat `N x d`), initialized from `k`
/// distinct seeded samples.
///
/// Empty or duplicated clusters are re-seeded from the points farthest from
/// their current codeword. Fails when `N < k` or when fewer than `k` distinct
/// vectors exist.
pub fn train_codebook(vectors: &[f32], d: usize, k: usize, iters: usize, seed: u64) -> Result<KMeansFit> {
    if d == 0 || k == 0 || !vectors.len().is_multiple_of(d) {
        return Err(Error::Shape(format!(
            "{} values do not form vectors of width {d}",
            vectors.len()
        )));
    }
    let n = vectors.len() / d;
    if n < k {
        return Err(Error::InsufficientData(format!(
            "{n} vectors cannot train {k} codewords"
        )));
    }
    let point = |i: usize| &vectors[i * d..(i + 1) * d];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = sample(&mut rng, n, k).into_vec();
    picks.sort_unstable();
    let mut centers: Vec<f64> = picks
        .iter()
        .flat_map(|&i| point(i).iter().map(|&x| x as f64))
        .collect();

    let mut assign = vec![0usize; n];
    let mut dist = vec![0.0f64; n];
    let mut errors = Vec::with_capacity(iters);
    for _ in 0..iters.max(1) {
        let mut total = 0.0;
        for i in 0..n {
            let (c, dd) = nearest64(point(i), &centers, d);
            assign[i] = c;
            dist[i] = dd;
            total += dd;
        }
        errors.push(total / (n * d) as f64);

        let mut sums = vec![0.0f64; k * d];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = assign[i];
            counts[c] += 1;
            for (s, &x) in sums[c * d..(c + 1) * d].iter_mut().zip(point(i)) {
                *s += x as f64;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centers[c * d..(c + 1) * d].iter_mut().zip(&sums[c * d..(c + 1) * d]) {
                    *dst = s * inv;
                }
            }
        }
        let mut vacant: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
        for c in 1..k {
            if counts[c] > 0 && (0..c).any(|o| centers[o * d..(o + 1) * d] == centers[c * d..(c + 1) * d]) {
                vacant.push(c);
            }
        }
        if !vacant.is_empty() {
            vacant.sort_unstable();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
            let mut next = order.into_iter();
            for c in vacant {
                let p = loop {
                    match next.next() {
                        Some(p) if dist[p] > 0.0 => {
                            let v = point(p);
                            let dup = centers
                                .chunks_exact(d)
                                .any(|cw| cw.iter().zip(v).all(|(a, &b)| *a == b as f64));
                            if !dup {
                                break p;
                            }
                        }
                        _ => {
                            return Err(Error::InsufficientData(format!(
                                "fewer than {k} distinct vectors available"
                            )))
                        }
                    }
                };
                for (dst, &x) in centers[c * d..(c + 1) * d].iter_mut().zip(point(p)) {
                    *dst = x as f64;
                }
                dist[p] = 0.0;
            }
        }
    }
    let codebook = Codebook::new(k, d, centers.iter().map(|&x| x as f32).collect())?;
    Ok(KMeansFit { codebook, errors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn n_equal_k_reproduces_the_data() {
        let v: Vec<f32> = (0..12).map(|i| i as f32 * 0.5).collect();
        let fit = train_codebook(&v, 3, 4, 5, 1).unwrap();
        assert_eq!(*fit.errors.last().unwrap(), 0.0);
        for p in v.chunks_exact(3) {
            let c = fit.codebook.nearest(p) as usize;
            assert_eq!(fit.codebook.codeword(c), p);
        }
    }

    #[test]
    fn two_blobs_recover_blob_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let noise = Normal::new(0.0, 0.05).unwrap();
        let means = [[0.0f32, 0.0], [3.0, 3.0]];
        let mut v = Vec::new();
        for i in 0..400 {
            let m = means[i % 2];
            v.push(m[0] + noise.sample(&mut rng) as f32);
            v.push(m[1] + noise.sample(&mut rng) as f32);
        }
        let fit = train_codebook(&v, 2, 2, 20, 3).unwrap();
        for m in means {
            let c = fit.codebook.codeword(fit.codebook.nearest(&m) as usize);
            let err = ((c[0] - m[0]).powi(2) + (c[1] - m[1]).powi(2)).sqrt();
            assert!(err < 0.1, "codeword {c:?} vs mean {m:?}");
        }
    }

    #[test]
    fn error_is_non_increasing() {
        for run in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + run);
            let v: Vec<f32> = (0..300 * 4).map(|_| rng.random::<f32>()).collect();
            let fit = train_codebook(&v, 4, 8, 15, run).unwrap();
            for w in fit.errors.windows(2) {
                assert!(w[1] <= w[0], "run {run}: {} > {}", w[1], w[0]);
            }
        }
    }

    #[test]
    fn codewords_are_distinct_with_duplicated_data() {
        // 40 copies of 6 distinct points: duplicates force re-seeding.
        let base: Vec<f32> = (0..6).flat_map(|i| [i as f32, (i * i) as f32]).collect();
        let v: Vec<f32> = base.iter().copied().cycle().take(6 * 2 * 40).collect();
        let fit = train_codebook(&v, 2, 6, 10, 0).unwrap();
        let cb = &fit.codebook;
        for i in 0..6 {
            for j in i + 1..6 {
                assert_ne!(cb.codeword(i), cb.codeword(j));
            }
        }
    }

    #[test]
    fn too_few_vectors_is_an_error() {
        let v = vec![0.0f32; 6];
        assert!(matches!(
            train_codebook(&v, 2, 4, 3, 0),
            Err(Error::InsufficientData(_))
        ));
        let same = vec![1.0f32; 20];
        assert!(matches!(
            train_codebook(&same, 2, 4, 3, 0),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn nearest_breaks_ties_to_lowest_id() {
        let cb = Codebook::new(3, 1, vec![1.0, -1.0, 1.0]).unwrap();
        assert_eq!(cb.nearest(&[0.0]), 0);
        assert_eq!(cb.nearest(&[2.0]), 0);
    }

    #[test]
    fn file_format_round_trips_and_rejects_defects() {
        let cb = Codebook::new(2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let bytes = cb.to_bytes();
        assert_eq!(&bytes[..4], b"SPCB");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
        assert_eq!(bytes.len(), 16 + 6 * 4);
        assert_eq!(Codebook::from_bytes(&bytes).unwrap(), cb);

        let mut v2 = bytes.clone();
        v2[4] = 9;
        assert!(Codebook::from_bytes(&v2).unwrap_err().to_string().contains("version"));
        assert!(Codebook::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
