//! Precomputed visual features.
//!
//! File layout (little-endian):
//!
//! ```text
//! "NTFC" | version u32 = 1 | d_embed u32 | dtype u8 (0 = f32) | count u64
//! count × { key_len u16 | key (UTF-8) | d_embed × f32 }
//! ```
//!
//! Entries are sorted by key bytes, ascending and unique.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};

use super::{FrozenDualEncoder, Media};
use crate::error::{Error, Result};
use crate::io::atomic::write_atomic;
use crate::io::bytes::ByteReader;
use crate::space::{EmbeddingSpace, Similarity};
use crate::tokens::TokenSequence;

pub const CACHE_MAGIC: &[u8; 4] = b"NTFC";
pub const CACHE_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCache {
    d_embed: usize,
    entries: BTreeMap<String, Vec<f32>>,
}

impl FeatureCache {
    pub fn new(d_embed: usize) -> Self {
        Self {
            d_embed,
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, key: impl Into<String>, value: Vec<f32>) -> Result<()> {
        let key = key.into();
        if value.len() != self.d_embed {
            return Err(Error::dim(format!(
                "feature for {key:?} has width {}, cache width is {}",
                value.len(),
                self.d_embed
            )));
        }
        if key.len() > u16::MAX as usize {
            return Err(Error::Format(format!("key longer than {} bytes", u16::MAX)));
        }
        self.entries.insert(key, value);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&[f32]> {
        self.entries.get(key).map(Vec::as_slice)
    }

    pub fn d_embed(&self) -> usize {
        self.d_embed
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &write_feature_cache(self))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        read_feature_cache(&bytes)
    }
}

pub fn write_feature_cache(cache: &FeatureCache) -> Vec<u8> {
    let mut out = Vec::with_capacity(21 + cache.len() * (2 + 16 + 4 * cache.d_embed));
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.extend_from_slice(&(cache.d_embed as u32).to_le_bytes());
    out.push(DTYPE_F32);
    out.extend_from_slice(&(cache.len() as u64).to_le_bytes());
    // BTreeMap<String, _> iterates in byte order of the keys
    for (key, values) in &cache.entries {
        out.extend_from_slice(&(key.len() as u16).to_le_bytes());
        out.extend_from_slice(key.as_bytes());
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn read_feature_cache(bytes: &[u8]) -> Result<FeatureCache> {
    let mut r = ByteReader::new(bytes);
    if r.bytes(4)? != CACHE_MAGIC {
        return Err(Error::Format("not a feature cache (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CACHE_VERSION {
        return Err(Error::Format(format!("unsupported cache version {version}")));
    }
    let d_embed = r.u32()? as usize;
    let dtype = r.u8()?;
    if dtype != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype code {dtype}")));
    }
    let count = r.u64()?;
    let mut cache = FeatureCache::new(d_embed);
    let mut prev: Option<String> = None;
    for _ in 0..count {
        let klen = r.u16()? as usize;
        let key = std::str::from_utf8(r.bytes(klen)?)
            .map_err(|e| Error::Format(format!("key is not UTF-8: {e}")))?
            .to_string();
        if let Some(p) = &prev {
            if p.as_bytes() >= key.as_bytes() {
                return Err(Error::Format(format!(
                    "keys not strictly ascending: {p:?} then {key:?}"
                )));
            }
        }
        let values = (0..d_embed).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        prev = Some(key.clone());
        cache.entries.insert(key, values);
    }
    r.finish()?;
    Ok(cache)
}

/// Visual-only encoder backed by a [`FeatureCache`]. Text methods return
/// [`Error::Unsupported`].
#[derive(Debug, Clone)]
pub struct FeatureCacheEncoder {
    cache: FeatureCache,
    space: EmbeddingSpace,
}

impl FeatureCacheEncoder {
    pub fn new(cache: FeatureCache) -> Self {
        let space = EmbeddingSpace {
            d_token: 1,
            d_embed: cache.d_embed(),
            similarity: Similarity::Cosine,
            temperature: 1.0,
            max_seq_len: 2,
        };
        Self { cache, space }
    }

    /// Uses the similarity and temperature of the text-side space.
    pub fn with_space(cache: FeatureCache, space: EmbeddingSpace) -> Result<Self> {
        if space.d_embed != cache.d_embed() {
            return Err(Error::dim(format!(
                "cache width {} does not match space width {}",
                cache.d_embed(),
                space.d_embed
            )));
        }
        Ok(Self { cache, space })
    }

    pub fn open(path: &Path) -> Result<Self> {
        Ok(Self::new(FeatureCache::load(path)?))
    }

    pub fn cache(&self) -> &FeatureCache {
        &self.cache
    }

    pub fn lookup(&self, key: &str) -> Result<Array1<f64>> {
        self.cache
            .get(key)
            .map(|v| v.iter().map(|&x| x as f64).collect())
            .ok_or_else(|| Error::Integrity(format!("no cached feature for {key:?}")))
    }
}

impl FrozenDualEncoder for FeatureCacheEncoder {
    fn space(&self) -> &EmbeddingSpace {
        &self.space
    }

    fn tokenize(&self, _text: &str) -> Result<TokenSequence> {
        Err(Error::Unsupported("feature cache has no text tower".into()))
    }

    fn encode_text(&self, _tokens: &TokenSequence) -> Result<Array1<f64>> {
        Err(Error::Unsupported("feature cache has no text tower".into()))
    }

    fn text_input_gradient(
        &self,
        _tokens: &TokenSequence,
        _cotangent: ArrayView1<'_, f64>,
    ) -> Result<Array2<f64>> {
        Err(Error::Unsupported("feature cache has no text tower".into()))
    }

    fn encode_visual(&self, media: &Media) -> Result<Array1<f64>> {
        match media {
            Media::CacheKey(key) => self.lookup(key),
            Media::Pixels(_) => Err(Error::Unsupported(
                "feature cache only resolves cache keys".into(),
            )),
        }
    }

    fn weight_digest(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(write_feature_cache(&self.cache)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn random_cache(n: usize, d: usize, seed: u64) -> FeatureCache {
        let mut rng = SeededRng::new(seed);
        let mut c = FeatureCache::new(d);
        for i in 0..n {
            let key = format!("item-{:05}-{}", rng.below(100_000), i);
            let v = (0..d).map(|_| rng.normal(0.0, 3.0) as f32).collect();
            c.insert(key, v).unwrap();
        }
        c
    }

    #[test]
    fn header_layout() {
        let mut c = FeatureCache::new(2);
        c.insert("b", vec![1.0, 2.0]).unwrap();
        c.insert("a", vec![-1.0, 0.5]).unwrap();
        let bytes = write_feature_cache(&c);
        assert_eq!(&bytes[..4], b"NTFC");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(bytes[12], 0);
        assert_eq!(u64::from_le_bytes(bytes[13..21].try_into().unwrap()), 2);
        // first entry is "a"
        assert_eq!(u16::from_le_bytes(bytes[21..23].try_into().unwrap()), 1);
        assert_eq!(bytes[23], b'a');
        assert_eq!(f32::from_le_bytes(bytes[24..28].try_into().unwrap()), -1.0);
        assert_eq!(bytes.len(), 21 + 2 * (2 + 1 + 8));
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = random_cache(1000, 8, 11);
        let bytes = write_feature_cache(&c);
        let back = read_feature_cache(&bytes).unwrap();
        assert_eq!(back.len(), 1000);
        for (k, v) in c.iter() {
            let w = back.get(k).unwrap();
            assert!(v.iter().zip(w).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        assert_eq!(write_feature_cache(&back), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let c = random_cache(3, 4, 1);
        let bytes = write_feature_cache(&c);
        assert!(read_feature_cache(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(read_feature_cache(&extra).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(read_feature_cache(&bad).is_err());
        let mut ver = bytes;
        ver[4] = 2;
        assert!(read_feature_cache(&ver).is_err());
    }

    #[test]
    fn encoder_lookup() {
        let mut c = FeatureCache::new(3);
        c.insert("v1", vec![0.25, -1.5, 3.0]).unwrap();
        let enc = FeatureCacheEncoder::new(c);
        let v = enc.encode_visual(&Media::CacheKey("v1".into())).unwrap();
        assert_eq!(v.to_vec(), vec![0.25, -1.5, 3.0]);
        assert!(enc.encode_visual(&Media::CacheKey("nope".into())).is_err());
        assert!(enc.tokenize("x").is_err());
    }
}
