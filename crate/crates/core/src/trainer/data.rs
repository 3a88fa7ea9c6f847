//! Byte-level corpus ingestion and batch sampling.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};

/// Byte vocabulary: one id per byte value, no special tokens.
pub const BYTE_VOCAB: usize = 256;

pub fn tokenize(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().map(|&b| b as u32).collect()
}

/// One corpus source: `tag=path:ratio`.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSpec {
    pub tag: String,
    pub path: PathBuf,
    pub ratio: f64,
}

impl FromStr for DataSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad =
            |msg: &str| Error::config("data", format!("`{s}`: {msg} (expected tag=path:ratio)"));
        let (tag, rest) = s.trim().split_once('=').ok_or_else(|| bad("missing `=`"))?;
        let (path, ratio) = rest
            .rsplit_once(':')
            .ok_or_else(|| bad("missing `:ratio`"))?;
        let ratio: f64 = ratio
            .trim()
            .parse()
            .map_err(|_| bad("ratio is not a number"))?;
        if tag.trim().is_empty() || path.trim().is_empty() {
            return Err(bad("empty tag or path"));
        }
        if !(ratio > 0.0 && ratio.is_finite()) {
            return Err(bad("ratio must be positive"));
        }
        Ok(DataSpec {
            tag: tag.trim().to_string(),
            path: PathBuf::from(path.trim()),
            ratio,
        })
    }
}

impl fmt::Display for DataSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}={}:{}", self.tag, self.path.display(), self.ratio)
    }
}

#[derive(Clone, Debug)]
pub struct SourceStream {
    pub tag: String,
    /// Sampling weight, normalized over all sources.
    pub weight: f64,
    pub train: Vec<u32>,
    pub val: Vec<u32>,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub sources: Vec<SourceStream>,
}

/// A token window tagged with the index of its source.
#[derive(Clone, Debug, PartialEq)]
pub struct TaggedSequence {
    pub source: usize,
    pub tokens: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `batch × seq` input ids, sequences back to back.
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    pub sources: Vec<usize>,
    pub batch: usize,
}

/// Reads every source file and splits each into a training head and a
/// validation tail of `val_fraction` of its bytes.
pub fn ingest_corpus(specs: &[DataSpec], val_fraction: f64) -> Result<Corpus> {
    let texts = specs
        .iter()
        .map(|s| std::fs::read(&s.path).map_err(|e| Error::io(&s.path, e)))
        .collect::<Result<Vec<_>>>()?;
    let named: Vec<(String, f64, Vec<u8>)> = specs
        .iter()
        .zip(texts)
        .map(|(s, t)| (s.tag.clone(), s.ratio, t))
        .collect();
    Corpus::from_bytes(named, val_fraction)
}

impl Corpus {
    pub fn from_bytes(sources: Vec<(String, f64, Vec<u8>)>, val_fraction: f64) -> Result<Self> {
        if sources.is_empty() {
            return Err(Error::Data("empty corpus: no sources configured".into()));
        }
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::config("val_fraction", "must lie in [0, 1)"));
        }
        let total: f64 = sources.iter().map(|s| s.1).sum();
        let mut out = Vec::with_capacity(sources.len());
        for (tag, ratio, bytes) in sources {
            if bytes.is_empty() {
                return Err(Error::Data(format!("source `{tag}` is empty")));
            }
            if out.iter().any(|s: &SourceStream| s.tag == tag) {
                return Err(Error::Data(format!("duplicate source tag `{tag}`")));
            }
            let ids = tokenize(&bytes);
            let split = ids.len() - (ids.len() as f64 * val_fraction).floor() as usize;
            out.push(SourceStream {
                tag,
                weight: ratio / total,
                train: ids[..split].to_vec(),
                val: ids[split..].to_vec(),
            });
        }
        Ok(Corpus { sources: out })
    }

    pub fn tags(&self) -> Vec<String> {
        self.sources.iter().map(|s| s.tag.clone()).collect()
    }

    /// Picks a source by weight from one uniform draw.
    pub fn pick_source<R: Rng>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, s) in self.sources.iter().enumerate() {
            acc += s.weight;
            if u < acc {
                return i;
            }
        }
        self.sources.len() - 1
    }

    /// `batch` random training windows of `seq + 1` tokens, source chosen by
    /// weight, offset uniform within the source.
    pub fn sample_batch<R: Rng>(&self, rng: &mut R, batch: usize, seq: usize) -> Result<Batch> {
        let mut inputs = Vec::with_capacity(batch * seq);
        let mut targets = Vec::with_capacity(batch * seq);
        let mut sources = Vec::with_capacity(batch);
        for _ in 0..batch {
            let s = self.pick_source(rng);
            let stream = &self.sources[s].train;
            if stream.len() < seq + 1 {
                return Err(Error::Data(format!(
                    "source `{}` has {} training tokens, needs at least {}",
                    self.sources[s].tag,
                    stream.len(),
                    seq + 1
                )));
            }
            let start = rng.random_range(0..=stream.len() - seq - 1);
            inputs.extend_from_slice(&stream[start..start + seq]);
            targets.extend_from_slice(&stream[start + 1..start + seq + 1]);
            sources.push(s);
        }
        Ok(Batch {
            inputs,
            targets,
            sources,
            batch,
        })
    }

    /// Non-overlapping validation windows of `seq + 1` tokens, at most
    /// `max_tokens_per_source` tokens from each source.
    pub fn eval_windows(&self, seq: usize, max_tokens_per_source: usize) -> Vec<TaggedSequence> {
        let mut out = Vec::new();
        for (i, s) in self.sources.iter().enumerate() {
            let limit = s.val.len().min(max_tokens_per_source.max(seq + 1));
            for chunk in s.val[..limit].chunks_exact(seq + 1) {
                out.push(TaggedSequence {
                    source: i,
                    tokens: chunk.to_vec(),
                });
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bytes_are_token_ids() {
        assert_eq!(tokenize(b"AB"), vec![65, 66]);
        assert_eq!(tokenize("é".as_bytes()), vec![0xC3, 0xA9]);
    }

    #[test]
    fn parses_data_spec() {
        let d: DataSpec = "prose=/tmp/a:b.txt:0.7".parse().unwrap();
        assert_eq!(d.tag, "prose");
        assert_eq!(d.path, PathBuf::from("/tmp/a:b.txt"));
        assert_eq!(d.ratio, 0.7);
        assert!("prose=/tmp/a.txt".parse::<DataSpec>().is_err());
        assert!("=/tmp/a.txt:1".parse::<DataSpec>().is_err());
        assert!("x=/tmp/a.txt:-1".parse::<DataSpec>().is_err());
    }

    #[test]
    fn single_source_tags_every_sequence() {
        let c = Corpus::from_bytes(vec![("src1".into(), 1.0, vec![7u8; 100])], 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let b = c.sample_batch(&mut rng, 4, 8).unwrap();
            assert!(b.sources.iter().all(|&s| s == 0));
            assert_eq!(b.inputs.len(), 32);
        }
    }

    #[test]
    fn targets_are_inputs_shifted_by_one() {
        let bytes: Vec<u8> = (0..=255).collect();
        let c = Corpus::from_bytes(vec![("a".into(), 1.0, bytes)], 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = c.sample_batch(&mut rng, 3, 10).unwrap();
        for s in 0..3 {
            for t in 0..10 {
                assert_eq!(b.targets[s * 10 + t], b.inputs[s * 10 + t] + 1);
            }
        }
    }

    #[test]
    fn empty_inputs_are_rejected() {
        assert!(matches!(
            Corpus::from_bytes(vec![], 0.1),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            Corpus::from_bytes(vec![("a".into(), 1.0, vec![])], 0.1),
            Err(Error::Data(_))
        ));
        let missing = DataSpec {
            tag: "x".into(),
            path: "/definitely/not/here.txt".into(),
            ratio: 1.0,
        };
        assert!(matches!(
            ingest_corpus(&[missing], 0.1),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn split_and_windows() {
        let c = Corpus::from_bytes(vec![("a".into(), 1.0, vec![1u8; 1000])], 0.1).unwrap();
        assert_eq!(c.sources[0].train.len(), 900);
        assert_eq!(c.sources[0].val.len(), 100);
        let w = c.eval_windows(9, 1_000_000);
        assert_eq!(w.len(), 10);
        assert!(w.iter().all(|s| s.tokens.len() == 10));
        assert_eq!(c.eval_windows(9, 35).len(), 3);
    }
}
