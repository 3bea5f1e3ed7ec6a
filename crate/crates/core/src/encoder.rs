//! Hashed bag-of-words features and a linear text encoder.
//!
//! The encoder is an affine map `v = Wᵀx + b` over hashed token counts,
//! optionally L2-normalized. It plays the role of the query/document towers:
//! queries and documents go through the same parameters, and the document
//! outputs are the rows of the document matrix that atomic decoding scores.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{write_file, ByteReader, Collection, EmbeddingMatrix, FORMAT_VERSION, MAGIC};
use crate::error::{Error, Result};

pub const DEFAULT_FEATURES: usize = 4096;
pub const DEFAULT_DIM: usize = 64;
pub const DEFAULT_INIT_SCALE: f64 = 0.05;

/// Header `kind` value that marks an encoder parameter file.
pub const PARAMS_KIND: u32 = 2;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Lowercased alphanumeric runs. Shared by the featurizer and BM25.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub fn bucket(token: &str, features: usize) -> u32 {
    (fnv1a64(token.as_bytes()) % features as u64) as u32
}

/// Sparse bucket counts, sorted by bucket index.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FeatureVector {
    features: usize,
    entries: Vec<(u32, u32)>,
}

impl FeatureVector {
    pub fn from_entries(features: usize, mut entries: Vec<(u32, u32)>) -> Result<Self> {
        entries.sort_unstable();
        for w in entries.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::arg(format!("bucket {} listed twice", w[0].0)));
            }
        }
        if let Some(&(i, _)) = entries.iter().find(|(i, c)| *c == 0 || *i as usize >= features) {
            return Err(Error::arg(format!("bucket {i} is zero or out of range")));
        }
        Ok(FeatureVector { features, entries })
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn entries(&self) -> &[(u32, u32)] {
        &self.entries
    }

    pub fn count(&self, bucket: u32) -> u32 {
        self.entries
            .binary_search_by_key(&bucket, |e| e.0)
            .map(|i| self.entries[i].1)
            .unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }
}

pub fn featurize(text: &str, features: usize) -> FeatureVector {
    assert!(features >= 1, "feature dimension must be positive");
    let mut buckets: Vec<u32> = tokenize(text).iter().map(|t| bucket(t, features)).collect();
    buckets.sort_unstable();
    let mut entries: Vec<(u32, u32)> = Vec::new();
    for b in buckets {
        match entries.last_mut() {
            Some((last, c)) if *last == b => *c += 1,
            _ => entries.push((b, 1)),
        }
    }
    FeatureVector { features, entries }
}

/// Weights of the linear encoder. `weight` is row-major F×d: row `f` is the
/// contribution of one count in bucket `f`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    features: usize,
    dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub normalize: bool,
}

impl EncoderParams {
    pub fn new(
        features: usize,
        dim: usize,
        weight: Vec<f64>,
        bias: Vec<f64>,
        normalize: bool,
    ) -> Result<Self> {
        if features == 0 || dim == 0 {
            return Err(Error::arg("feature and output dimensions must be positive"));
        }
        if weight.len() != features * dim || bias.len() != dim {
            return Err(Error::arg("weight/bias shape does not match dimensions"));
        }
        if weight.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::arg("encoder parameters must be finite"));
        }
        Ok(EncoderParams {
            features,
            dim,
            weight,
            bias,
            normalize,
        })
    }

    pub fn zeros(features: usize, dim: usize, normalize: bool) -> Result<Self> {
        Self::new(
            features,
            dim,
            vec![0.0; features * dim],
            vec![0.0; dim],
            normalize,
        )
    }

    /// Weights uniform in `[-scale, scale]`, zero bias.
    pub fn random(features: usize, dim: usize, scale: f64, normalize: bool, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weight = (0..features * dim)
            .map(|_| rng.random_range(-scale..=scale))
            .collect();
        Self::new(features, dim, weight, vec![0.0; dim], normalize)
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weight_row(&self, f: usize) -> &[f64] {
        &self.weight[f * self.dim..(f + 1) * self.dim]
    }

    /// `Wᵀx + b` before any normalization.
    pub fn affine(&self, x: &FeatureVector) -> Result<Vec<f64>> {
        let mut v = self.bias.clone();
        for &(f, c) in x.entries() {
            let f = f as usize;
            if f >= self.features {
                return Err(Error::arg(format!(
                    "feature index {f} outside encoder input size {}",
                    self.features
                )));
            }
            let c = c as f64;
            for (out, w) in v.iter_mut().zip(self.weight_row(f)) {
                *out += c * w;
            }
        }
        Ok(v)
    }

    pub fn encode(&self, x: &FeatureVector) -> Result<Vec<f64>> {
        let mut v = self.affine(x)?;
        if self.normalize {
            let norm = l2_norm(&v);
            if norm > 0.0 {
                v.iter_mut().for_each(|x| *x /= norm);
            }
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("encoder output is not finite".into()));
        }
        Ok(v)
    }

    pub fn encode_text(&self, text: &str) -> Result<Vec<f64>> {
        self.encode(&featurize(text, self.features))
    }

    /// Encodes every document into an embedding matrix aligned with the
    /// collection order.
    pub fn encode_collection(&self, collection: &Collection) -> Result<EmbeddingMatrix> {
        let mut rows = Vec::with_capacity(collection.len() * self.dim);
        for doc in collection.iter() {
            rows.extend(self.encode_text(&doc.full_text())?.iter().map(|&v| v as f32));
        }
        let ids = collection.iter().map(|d| d.doc_id.clone()).collect();
        EmbeddingMatrix::new(self.dim, ids, rows)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + 8 * (self.weight.len() + self.bias.len()));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&PARAMS_KIND.to_le_bytes());
        out.extend_from_slice(&(self.features as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.normalize as u32).to_le_bytes());
        for v in self.weight.iter().chain(&self.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic()?;
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::format(format!("unsupported version {version}")));
        }
        let kind = r.u32()?;
        if kind != PARAMS_KIND {
            return Err(Error::format(format!("not an encoder parameter file (kind {kind})")));
        }
        let features = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let normalize = match r.u32()? {
            0 => false,
            1 => true,
            other => return Err(Error::format(format!("bad normalize flag {other}"))),
        };
        let n = features * dim + dim;
        if r.remaining() != n * 8 {
            return Err(Error::format("parameter payload has the wrong length"));
        }
        let mut values = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let bias = values.split_off(features * dim);
        Self::new(features, dim, values, bias, normalize).map_err(|e| Error::format(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn featurize_counts() {
        let fv = featurize("The the cat", 4096);
        assert_eq!(fv.nnz(), 2);
        assert_eq!(fv.count(bucket("the", 4096)), 2);
        assert_eq!(fv.count(bucket("cat", 4096)), 1);
        assert!(featurize("", 4096).is_empty());

        let fv = featurize("a-b a.b", 4096);
        assert_eq!(fv.count(bucket("a", 4096)), 2);
        assert_eq!(fv.count(bucket("b", 4096)), 2);
    }

    #[test]
    fn encode_identity() {
        let p = EncoderParams::new(2, 2, vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], false).unwrap();
        let x = FeatureVector::from_entries(2, vec![(0, 3), (1, 1)]).unwrap();
        assert_eq!(p.encode(&x).unwrap(), vec![3.0, 1.0]);

        let p = EncoderParams { normalize: true, ..p };
        let v = p.encode(&x).unwrap();
        let norm = 10f64.sqrt();
        assert!((v[0] - 3.0 / norm).abs() < 1e-15);
        assert!((v[1] - 1.0 / norm).abs() < 1e-15);
    }

    #[test]
    fn encode_zero_params() {
        let p = EncoderParams::zeros(8, 3, false).unwrap();
        let x = featurize("anything at all", 8);
        assert_eq!(p.encode(&x).unwrap(), vec![0.0; 3]);
        // normalize leaves the zero vector alone
        let p = EncoderParams::zeros(8, 3, true).unwrap();
        assert_eq!(p.encode(&x).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn encode_rejects_out_of_range_feature() {
        let p = EncoderParams::zeros(4, 2, false).unwrap();
        let x = FeatureVector::from_entries(8, vec![(6, 1)]).unwrap();
        assert!(matches!(p.encode(&x), Err(Error::Argument(_))));
    }

    #[test]
    fn encode_overflow_is_numeric_error() {
        let p = EncoderParams::new(1, 1, vec![f64::MAX], vec![0.0], false).unwrap();
        let x = FeatureVector::from_entries(1, vec![(0, 4)]).unwrap();
        assert!(matches!(p.encode(&x), Err(Error::Numeric(_))));
    }

    #[test]
    fn params_roundtrip() {
        let p = EncoderParams::random(16, 4, 0.5, true, 9).unwrap();
        let back = EncoderParams::from_bytes(&p.to_bytes()).unwrap();
        assert_eq!(back, p);
        let mut bytes = p.to_bytes();
        bytes[8] = 1; // kind field
        assert!(EncoderParams::from_bytes(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn homogeneous_without_bias(seed in any::<u64>(), counts in proptest::collection::vec(1u32..5, 1..6)) {
            let p = EncoderParams::random(32, 5, 1.0, false, seed).unwrap();
            let entries: Vec<(u32, u32)> = counts.iter().enumerate().map(|(i, &c)| (i as u32 * 5, c)).collect();
            let doubled: Vec<(u32, u32)> = entries.iter().map(|&(i, c)| (i, 2 * c)).collect();
            let x = FeatureVector::from_entries(32, entries).unwrap();
            let x2 = FeatureVector::from_entries(32, doubled).unwrap();
            let v = p.encode(&x).unwrap();
            let v2 = p.encode(&x2).unwrap();
            for (a, b) in v.iter().zip(&v2) {
                prop_assert!((2.0 * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }

        #[test]
        fn normalized_outputs_are_unit_or_zero(seed in any::<u64>(), text in "[a-z ]{0,40}") {
            let p = EncoderParams::random(64, 6, 1.0, true, seed).unwrap();
            let v = p.encode_text(&text).unwrap();
            let n = l2_norm(&v);
            prop_assert!(n == 0.0 || (n - 1.0).abs() <= 1e-6);
        }

        #[test]
        fn featurize_is_deterministic(text in "\\PC{0,60}") {
            prop_assert_eq!(featurize(&text, 97), featurize(&text, 97));
        }
    }
}
