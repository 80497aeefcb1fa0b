//! On-disk store of precomputed embeddings.
//!
//! ```text
//! <root>/<key>/manifest                                 owner spec hash + fingerprint
//! <root>/<key>/<dataset>/<split>/<level>/shard_<k>.tnsr
//! <root>/<key>/<dataset>/<split>/<level>/index          "sample shard offset" per line
//! <root>/<key>/<dataset>/<split>/<level>/checksums      sha256 per shard
//! ```
//!
//! `key` names the producing job and stays stable when the producer is
//! retrained; the manifest's fingerprint (spec plus weights) is what detects
//! stale contents.

use std::fs;
use std::path::{Path, PathBuf};

use mlfd_numerics::{io as tio, Tensor};

use crate::data::Split;
use crate::error::{Error, IoContext, Result};
use crate::util::{sha256_hex, Hasher};

pub const SHARD_ROWS: usize = 512;

#[derive(Clone, Debug)]
pub struct EmbeddingCache {
    root: PathBuf,
}

/// Identity of whatever produced a cache entry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Owner {
    pub spec_hash: String,
    pub fingerprint: String,
}

/// A section of the cache owned by one producer.
#[derive(Clone, Debug)]
pub struct CacheEntry {
    dir: PathBuf,
    owner: Owner,
}

/// Stable directory key for a producer job.
pub fn cache_key(spec_hash: &str, job: &str) -> String {
    let mut h = Hasher::new();
    h.update(spec_hash.as_bytes()).update(job.as_bytes());
    h.finish()[..24].to_string()
}

impl EmbeddingCache {
    pub fn open(root: impl Into<PathBuf>) -> Self {
        EmbeddingCache { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Binds `key` to `owner`. A key already bound to a different owner is
    /// stale and refused.
    pub fn entry(&self, key: &str, owner: Owner) -> Result<CacheEntry> {
        let dir = self.root.join(key);
        let mp = dir.join("manifest");
        if mp.exists() {
            let found = read_manifest(&mp)?;
            if found != owner {
                return Err(Error::StaleCache(format!(
                    "{} was written for spec {} / weights {}, current producer is spec {} / weights {}",
                    dir.display(),
                    short(&found.spec_hash),
                    short(&found.fingerprint),
                    short(&owner.spec_hash),
                    short(&owner.fingerprint)
                )));
            }
        } else {
            fs::create_dir_all(&dir).at(&dir)?;
            let text = format!("spec_hash = \"{}\"\nfingerprint = \"{}\"\n", owner.spec_hash, owner.fingerprint);
            fs::write(&mp, text).at(&mp)?;
        }
        Ok(CacheEntry { dir, owner })
    }

    /// Opens an existing entry for reading; missing entries are a precondition error.
    pub fn existing(&self, key: &str, owner: Owner) -> Result<CacheEntry> {
        if !self.root.join(key).join("manifest").exists() {
            return Err(Error::Precondition(format!("no cache entry at {}", self.root.join(key).display())));
        }
        self.entry(key, owner)
    }

    /// Deletes an entry so it can be rebuilt for a new producer.
    pub fn invalidate(&self, key: &str) -> Result<()> {
        let dir = self.root.join(key);
        if dir.exists() {
            fs::remove_dir_all(&dir).at(&dir)?;
        }
        Ok(())
    }
}

fn short(h: &str) -> &str {
    &h[..h.len().min(12)]
}

fn read_manifest(p: &Path) -> Result<Owner> {
    #[derive(serde::Deserialize)]
    #[serde(deny_unknown_fields)]
    struct M {
        spec_hash: String,
        fingerprint: String,
    }
    let text = fs::read_to_string(p).at(p)?;
    let m: M = toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", p.display())))?;
    Ok(Owner { spec_hash: m.spec_hash, fingerprint: m.fingerprint })
}

impl CacheEntry {
    pub fn owner(&self) -> &Owner {
        &self.owner
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn slot(&self, dataset: &str, split: Split, level: &str) -> PathBuf {
        self.dir.join(dataset).join(split.as_str()).join(level)
    }

    /// Whether a complete slot exists (its index is written last).
    pub fn has(&self, dataset: &str, split: Split, level: &str) -> bool {
        self.slot(dataset, split, level).join("index").exists()
    }

    /// Stores rows of `values` (row `r` belongs to dataset sample `samples[r]`).
    pub fn write(&self, dataset: &str, split: Split, level: &str, samples: &[usize], values: &Tensor) -> Result<()> {
        if values.shape()[0] != samples.len() {
            return Err(Error::Precondition(format!("{} rows for {} samples", values.shape()[0], samples.len())));
        }
        let slot = self.slot(dataset, split, level);
        if slot.exists() {
            fs::remove_dir_all(&slot).at(&slot)?;
        }
        fs::create_dir_all(&slot).at(&slot)?;
        let mut index = String::new();
        let mut sums = String::new();
        for (k, start) in (0..samples.len()).step_by(SHARD_ROWS).enumerate() {
            let end = (start + SHARD_ROWS).min(samples.len());
            let shard = values.slice_rows(start, end)?;
            let bytes = tio::encode(&shard)?;
            let name = format!("shard_{k}.tnsr");
            fs::write(slot.join(&name), &bytes).at(slot.join(&name))?;
            sums.push_str(&format!("{name} {}\n", sha256_hex(&bytes)));
            for (off, s) in samples[start..end].iter().enumerate() {
                index.push_str(&format!("{s} {k} {off}\n"));
            }
        }
        fs::write(slot.join("checksums"), sums).at(slot.join("checksums"))?;
        fs::write(slot.join("index"), index).at(slot.join("index"))
    }

    /// Reads a slot back: sample indices in stored order and their rows.
    pub fn read(&self, dataset: &str, split: Split, level: &str) -> Result<(Vec<usize>, Tensor)> {
        let slot = self.slot(dataset, split, level);
        let ip = slot.join("index");
        if !ip.exists() {
            return Err(Error::Precondition(format!("cache slot {} is not populated", slot.display())));
        }
        let cp = slot.join("checksums");
        let sums = fs::read_to_string(&cp).at(&cp)?;
        let mut shards = Vec::new();
        for (k, line) in sums.lines().enumerate() {
            let (name, sum) = line.split_once(' ').ok_or_else(|| Error::Format(format!("{}: bad line", cp.display())))?;
            if name != format!("shard_{k}.tnsr") {
                return Err(Error::Format(format!("{}: unexpected shard {name}", cp.display())));
            }
            let p = slot.join(name);
            let bytes = fs::read(&p).at(&p)?;
            if sha256_hex(&bytes) != sum {
                return Err(Error::Corruption(format!("{}: checksum mismatch", p.display())));
            }
            shards.push(tio::decode(&bytes).map_err(|e| Error::Corruption(format!("{}: {e}", p.display())))?.0);
        }
        let text = fs::read_to_string(&ip).at(&ip)?;
        let mut samples = Vec::new();
        let mut rows: Vec<&[f64]> = Vec::new();
        for line in text.lines() {
            let bad = || Error::Format(format!("{}: bad line '{line}'", ip.display()));
            let f: Vec<usize> = line.split_whitespace().map(|t| t.parse().map_err(|_| bad())).collect::<Result<_>>()?;
            let [s, k, off] = f[..] else { return Err(bad()) };
            let shard = shards.get(k).ok_or_else(bad)?;
            if off >= shard.shape()[0] {
                return Err(bad());
            }
            let w = shard.row_len();
            samples.push(s);
            rows.push(&shard.data()[off * w..(off + 1) * w]);
        }
        let first = shards.first().ok_or_else(|| Error::Format(format!("{}: no shards", slot.display())))?;
        let mut shape = first.shape().to_vec();
        shape[0] = rows.len();
        let data: Vec<f64> = rows.concat();
        Ok((samples, Tensor::new(shape, data)?))
    }

    /// Rows for every sample `0..n` of a dataset, gathered from all splits.
    pub fn read_all(&self, dataset: &str, level: &str, n: usize) -> Result<Tensor> {
        let mut parts = Vec::new();
        for split in Split::ALL {
            if self.has(dataset, split, level) {
                parts.push(self.read(dataset, split, level)?);
            }
        }
        let mut order: Vec<(usize, usize, usize)> = Vec::with_capacity(n);
        for (p, (samples, _)) in parts.iter().enumerate() {
            order.extend(samples.iter().enumerate().map(|(r, &s)| (s, p, r)));
        }
        order.sort_unstable();
        if order.len() != n || order.iter().enumerate().any(|(i, o)| o.0 != i) {
            return Err(Error::Precondition(format!(
                "cache {}: {dataset}/{level} covers {} of {n} samples",
                self.dir.display(),
                order.len()
            )));
        }
        let w = parts[0].1.row_len();
        let mut data = Vec::with_capacity(n * w);
        for (_, p, r) in order {
            data.extend_from_slice(&parts[p].1.data()[r * w..(r + 1) * w]);
        }
        let mut shape = parts[0].1.shape().to_vec();
        shape[0] = n;
        Ok(Tensor::new(shape, data)?)
    }

    /// Number of stored rows across every slot.
    pub fn count_rows(&self) -> Result<usize> {
        let mut total = 0;
        for ds in read_dirs(&self.dir)? {
            for split in read_dirs(&ds)? {
                for level in read_dirs(&split)? {
                    let ip = level.join("index");
                    if ip.exists() {
                        total += fs::read_to_string(&ip).at(&ip)?.lines().count();
                    }
                }
            }
        }
        Ok(total)
    }
}

fn read_dirs(p: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in fs::read_dir(p).at(p)? {
        let e = e.at(p)?;
        if e.path().is_dir() {
            out.push(e.path());
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn owner(f: &str) -> Owner {
        Owner { spec_hash: "spec".into(), fingerprint: f.into() }
    }

    #[test]
    fn round_trip_across_shards_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let cache = EmbeddingCache::open(dir.path());
        let e = cache.entry("k", owner("a")).unwrap();
        let n = SHARD_ROWS + 7;
        let data: Vec<f64> = (0..n * 3).map(|i| (i as f64).sin() * 1e-3 + 1.0 / 3.0).collect();
        let t = Tensor::new(vec![n, 3], data).unwrap();
        let samples: Vec<usize> = (0..n).map(|i| 2 * i).collect();
        e.write("d1", Split::Train, "top", &samples, &t).unwrap();
        let (s, back) = e.read("d1", Split::Train, "top").unwrap();
        assert_eq!(s, samples);
        assert!(back.bit_eq(&t));
        assert_eq!(e.count_rows().unwrap(), n);
    }

    #[test]
    fn different_owner_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let cache = EmbeddingCache::open(dir.path());
        cache.entry("k", owner("a")).unwrap();
        assert!(matches!(cache.entry("k", owner("b")), Err(Error::StaleCache(_))));
        cache.invalidate("k").unwrap();
        cache.entry("k", owner("b")).unwrap();
    }

    #[test]
    fn flipped_byte_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let cache = EmbeddingCache::open(dir.path());
        let e = cache.entry("k", owner("a")).unwrap();
        e.write("d", Split::Test, "top", &[0, 1], &Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let p = e.dir().join("d/test/top/shard_0.tnsr");
        let mut bytes = fs::read(&p).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        fs::write(&p, bytes).unwrap();
        assert!(matches!(e.read("d", Split::Test, "top"), Err(Error::Corruption(_))));
    }
}
