//! Deterministic synthetic mixed-text corpus.
//!
//! Three sources with distinct byte statistics: English-like prose from a
//! small grammar, Rust-like source code from templates, and arithmetic with
//! correct results. Used when no real corpus is at hand.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::trainer::data::DataSpec;

const SUBJECTS: &[&str] = &[
    "the river",
    "a small boat",
    "the old teacher",
    "my neighbour",
    "the committee",
    "every student",
    "the engine",
    "a quiet village",
    "the garden",
    "our team",
    "the northern wind",
    "a young doctor",
    "the library",
    "the market",
    "a tired traveller",
    "the orchestra",
    "the city council",
    "her brother",
];
const VERBS: &[&str] = &[
    "carried",
    "remembered",
    "described",
    "followed",
    "repaired",
    "visited",
    "ignored",
    "painted",
    "answered",
    "measured",
    "collected",
    "crossed",
    "opened",
    "watched",
    "explained",
    "protected",
];
const OBJECTS: &[&str] = &[
    "the letter",
    "a long story",
    "the broken bridge",
    "three baskets of apples",
    "the evening news",
    "an old map",
    "the mountain path",
    "a heavy suitcase",
    "the winter harvest",
    "the last train",
    "a strange sound",
    "the wooden door",
    "the first chapter",
    "a bright lantern",
    "the empty field",
];
const ADVERBS: &[&str] = &[
    "slowly",
    "carefully",
    "before dawn",
    "without a word",
    "in the rain",
    "after lunch",
    "again",
    "with great patience",
    "for many years",
    "at the end of the day",
    "quietly",
    "once more",
];
const CONNECTIVES: &[&str] = &[
    "and then",
    "but",
    "because",
    "while",
    "so",
    "although",
    "after that",
];

const IDENTS: &[&str] = &[
    "count", "total", "buffer", "index", "value", "result", "offset", "len", "acc", "item", "node",
    "weight", "limit", "state", "cursor", "sum",
];
const TYPES: &[&str] = &[
    "usize",
    "u32",
    "i64",
    "f64",
    "bool",
    "String",
    "Vec<u8>",
    "Option<usize>",
];
const FN_NAMES: &[&str] = &[
    "parse_header",
    "update_state",
    "compute_total",
    "find_index",
    "merge_nodes",
    "read_buffer",
    "apply_weight",
    "check_limit",
    "next_item",
    "reset_cursor",
    "encode_value",
    "split_items",
];

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

fn clause<R: Rng>(rng: &mut R) -> String {
    let mut s = format!(
        "{} {} {}",
        SUBJECTS.choose(rng).unwrap(),
        VERBS.choose(rng).unwrap(),
        OBJECTS.choose(rng).unwrap()
    );
    if rng.random_bool(0.5) {
        s.push(' ');
        s.push_str(ADVERBS.choose(rng).unwrap());
    }
    s
}

fn prose<R: Rng>(rng: &mut R, bytes: usize) -> String {
    let mut out = String::with_capacity(bytes + 256);
    while out.len() < bytes {
        let sentences = rng.random_range(3..7);
        for _ in 0..sentences {
            let mut s = capitalize(&clause(rng));
            if rng.random_bool(0.4) {
                write!(s, ", {} {}", CONNECTIVES.choose(rng).unwrap(), clause(rng)).unwrap();
            }
            s.push(if rng.random_bool(0.9) { '.' } else { '?' });
            out.push_str(&s);
            out.push(' ');
        }
        out.pop();
        out.push_str("\n\n");
    }
    out
}

fn code<R: Rng>(rng: &mut R, bytes: usize) -> String {
    let mut out = String::with_capacity(bytes + 512);
    while out.len() < bytes {
        let name = FN_NAMES.choose(rng).unwrap();
        let arg = IDENTS.choose(rng).unwrap();
        let ty = TYPES.choose(rng).unwrap();
        writeln!(out, "fn {name}({arg}: &[{ty}], limit: usize) -> usize {{").unwrap();
        let acc = IDENTS.choose(rng).unwrap();
        writeln!(out, "    let mut {acc} = {};", rng.random_range(0..10)).unwrap();
        for _ in 0..rng.random_range(1..4) {
            match rng.random_range(0..3) {
                0 => {
                    writeln!(out, "    for i in 0..{arg}.len() {{").unwrap();
                    writeln!(out, "        if i >= limit {{").unwrap();
                    writeln!(out, "            break;").unwrap();
                    writeln!(out, "        }}").unwrap();
                    writeln!(out, "        {acc} += {};", rng.random_range(1..5)).unwrap();
                    writeln!(out, "    }}").unwrap();
                }
                1 => {
                    let v = IDENTS.choose(rng).unwrap();
                    writeln!(
                        out,
                        "    let {v} = {acc} * {} + limit;",
                        rng.random_range(2..9)
                    )
                    .unwrap();
                    writeln!(
                        out,
                        "    {acc} = {acc}.max({v} % {});",
                        rng.random_range(3..17)
                    )
                    .unwrap();
                }
                _ => {
                    writeln!(out, "    if {arg}.is_empty() {{").unwrap();
                    writeln!(out, "        return {acc};").unwrap();
                    writeln!(out, "    }}").unwrap();
                }
            }
        }
        writeln!(out, "    {acc}").unwrap();
        out.push_str("}\n\n");
    }
    out
}

fn math<R: Rng>(rng: &mut R, bytes: usize) -> String {
    let mut out = String::with_capacity(bytes + 128);
    while out.len() < bytes {
        let a: i64 = rng.random_range(0..1000);
        let b: i64 = rng.random_range(1..100);
        match rng.random_range(0..5) {
            0 => writeln!(out, "{a} + {b} = {}", a + b),
            1 => writeln!(out, "{a} - {b} = {}", a - b),
            2 => writeln!(out, "{b} * {} = {}", a % 50, b * (a % 50)),
            3 => writeln!(out, "{a} / {b} = {} remainder {}", a / b, a % b),
            _ => {
                let x: i64 = rng.random_range(-20..20);
                writeln!(out, "solve {b}x + {a} = {}: x = {x}", b * x + a)
            }
        }
        .unwrap();
    }
    out
}

/// Generated sources as `(tag, text)`, roughly `total_bytes` overall split
/// 50/30/20 between prose, code and math.
pub fn generate(seed: u64, total_bytes: usize) -> Vec<(String, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vec![
        ("prose".to_string(), prose(&mut rng, total_bytes / 2)),
        ("code".to_string(), code(&mut rng, total_bytes * 3 / 10)),
        ("math".to_string(), math(&mut rng, total_bytes / 5)),
    ]
}

/// Writes the generated sources as `<tag>.txt` under `dir` and returns the
/// matching data specs with ratios 0.5/0.3/0.2.
pub fn write_corpus(dir: &Path, seed: u64, total_bytes: usize) -> Result<Vec<DataSpec>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ratios = [0.5, 0.3, 0.2];
    generate(seed, total_bytes)
        .into_iter()
        .zip(ratios)
        .map(|((tag, text), ratio)| {
            let path: PathBuf = dir.join(format!("{tag}.txt"));
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            Ok(DataSpec { tag, path, ratio })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_sized() {
        let a = generate(3, 30_000);
        assert_eq!(a, generate(3, 30_000));
        assert_ne!(a, generate(4, 30_000));
        let total: usize = a.iter().map(|(_, t)| t.len()).sum();
        assert!((30_000..32_000).contains(&total), "{total}");
        assert!(a.iter().all(|(_, t)| t.is_ascii()));
    }

    #[test]
    fn arithmetic_is_correct() {
        for line in generate(1, 5_000)[2].1.lines() {
            if line.starts_with("solve") {
                let (eq, x) = line[6..].split_once(": x = ").unwrap();
                let (lhs, r) = eq.split_once(" = ").unwrap();
                let (bx, a) = lhs.split_once("x + ").unwrap();
                let (b, a, r, x): (i64, i64, i64, i64) = (
                    bx.parse().unwrap(),
                    a.parse().unwrap(),
                    r.parse().unwrap(),
                    x.parse().unwrap(),
                );
                assert_eq!(b * x + a, r, "{line}");
            } else if let Some((lhs, rhs)) = line.split_once(" + ") {
                let b: i64 = rhs.split(' ').next().unwrap().parse().unwrap();
                let r: i64 = rhs.rsplit(' ').next().unwrap().parse().unwrap();
                assert_eq!(lhs.parse::<i64>().unwrap() + b, r);
            }
        }
    }
}
