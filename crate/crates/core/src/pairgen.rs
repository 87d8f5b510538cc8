//! Expands rankings into ordered comparison pairs.
//!
//! Every caption in a better rank group is paired with every caption in
//! each worse group; captions sharing a group produce nothing. A total order
//! over `k` captions therefore yields `k(k-1)/2` pairs.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::ids::validate_id;
use crate::store::{PreferenceDataset, PreferenceRecord};

#[derive(Debug, Error)]
pub enum PairgenError {
    #[error("DegenerateRecord: record {0} has all captions tied")]
    DegenerateRecord(String),
    #[error("EmptyStore: the store has no preference records")]
    EmptyStore,
    #[error("InvalidFraction: holdout fraction {0} outside [0, 1)")]
    InvalidFraction(f64),
    #[error("CorruptPairFile: line {line}: {reason}")]
    CorruptPairFile { line: usize, reason: String },
    #[error("Io: {0}")]
    Io(#[from] io::Error),
}

impl PairgenError {
    pub fn name(&self) -> &'static str {
        match self {
            PairgenError::DegenerateRecord(_) => "DegenerateRecord",
            PairgenError::EmptyStore => "EmptyStore",
            PairgenError::InvalidFraction(_) => "InvalidFraction",
            PairgenError::CorruptPairFile { .. } => "CorruptPairFile",
            PairgenError::Io(_) => "Io",
        }
    }
}

/// `(image, preferred caption, dispreferred caption)`, tagged with the
/// record it came from.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ComparisonPair {
    pub image_id: String,
    pub preferred: String,
    pub dispreferred: String,
    pub record_id: String,
}

/// Pairs for one record, ordered by rank group and then caption id.
pub fn generate_pairs(rec: &PreferenceRecord) -> Result<Vec<ComparisonPair>, PairgenError> {
    if rec.is_degenerate() {
        return Err(PairgenError::DegenerateRecord(rec.record_id.clone()));
    }
    let groups: Vec<Vec<&str>> = rec
        .ranking
        .iter()
        .map(|g| {
            let mut g: Vec<&str> = g.iter().map(String::as_str).collect();
            g.sort_unstable();
            g
        })
        .collect();
    let mut out = Vec::with_capacity(pair_count(rec.ranking.iter().map(Vec::len)));
    for (p, better) in groups.iter().enumerate() {
        for &pref in better {
            for worse in &groups[p + 1..] {
                for &disp in worse {
                    out.push(ComparisonPair {
                        image_id: rec.image_id.clone(),
                        preferred: pref.to_owned(),
                        dispreferred: disp.to_owned(),
                        record_id: rec.record_id.clone(),
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Number of pairs produced by rank groups of the given sizes:
/// the sum over group pairs `p < q` of `g_p * g_q`.
pub fn pair_count(group_sizes: impl IntoIterator<Item = usize>) -> usize {
    let mut total = 0;
    let mut before = 0;
    for g in group_sizes {
        total += before * g;
        before += g;
    }
    total
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitOptions {
    pub seed: u64,
    pub holdout_fraction: f64,
    /// Cap on pairs kept per image across all its records; `None` keeps all.
    pub max_pairs_per_image: Option<usize>,
}

impl Default for SplitOptions {
    fn default() -> Self {
        SplitOptions {
            seed: 0,
            holdout_fraction: 0.0,
            max_pairs_per_image: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PairSplit {
    pub train: Vec<ComparisonPair>,
    pub holdout: Vec<ComparisonPair>,
    pub holdout_images: BTreeSet<String>,
}

/// Generates pairs for every non-degenerate record and splits them by image.
///
/// Images with at least one pair are sorted, shuffled with `seed`, and the
/// first `round(fraction * n)` go to the holdout side. Pair order on each
/// side follows record append order.
pub fn generate_dataset_pairs(
    store: &PreferenceDataset,
    opts: &SplitOptions,
) -> Result<PairSplit, PairgenError> {
    if store.record_count() == 0 {
        return Err(PairgenError::EmptyStore);
    }
    if !(0.0..1.0).contains(&opts.holdout_fraction) {
        return Err(PairgenError::InvalidFraction(opts.holdout_fraction));
    }

    let mut per_image: HashMap<&str, Vec<ComparisonPair>> = HashMap::new();
    let mut image_order: Vec<&str> = Vec::new();
    for rec in store.records() {
        let pairs = match generate_pairs(rec) {
            Ok(p) => p,
            Err(PairgenError::DegenerateRecord(_)) => continue,
            Err(e) => return Err(e),
        };
        let slot = per_image.entry(rec.image_id.as_str()).or_insert_with(|| {
            image_order.push(rec.image_id.as_str());
            Vec::new()
        });
        slot.extend(pairs);
    }

    if let Some(cap) = opts.max_pairs_per_image {
        for (image_id, pairs) in per_image.iter_mut() {
            if pairs.len() > cap {
                let mut idx: Vec<usize> = (0..pairs.len()).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ stable_hash(image_id));
                idx.shuffle(&mut rng);
                idx.truncate(cap);
                idx.sort_unstable();
                *pairs = idx.into_iter().map(|i| pairs[i].clone()).collect();
            }
        }
    }

    let mut images: Vec<&str> = image_order.clone();
    images.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    images.shuffle(&mut rng);
    let n_holdout = (opts.holdout_fraction * images.len() as f64).round() as usize;
    let holdout_images: BTreeSet<String> = images[..n_holdout]
        .iter()
        .map(|s| s.to_string())
        .collect();

    // Emit in record order, with each image's (possibly capped) pairs kept together
    // at the position of its first record.
    let mut split = PairSplit {
        holdout_images,
        ..PairSplit::default()
    };
    for image_id in image_order {
        let pairs = per_image.remove(image_id).unwrap_or_default();
        if split.holdout_images.contains(image_id) {
            split.holdout.extend(pairs);
        } else {
            split.train.extend(pairs);
        }
    }
    Ok(split)
}

fn stable_hash(s: &str) -> u64 {
    // FNV-1a; only used to derive per-image sub-seeds.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Pair file: one `image_id\tpreferred\tdispreferred\trecord_id` line per pair.
pub fn write_pairs(pairs: &[ComparisonPair], w: impl Write) -> io::Result<()> {
    let mut w = BufWriter::new(w);
    for p in pairs {
        writeln!(
            w,
            "{}\t{}\t{}\t{}",
            p.image_id, p.preferred, p.dispreferred, p.record_id
        )?;
    }
    w.flush()
}

pub fn write_pair_file(pairs: &[ComparisonPair], path: impl AsRef<Path>) -> io::Result<()> {
    write_pairs(pairs, File::create(path)?)
}

pub fn read_pairs(r: impl BufRead) -> Result<Vec<ComparisonPair>, PairgenError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(PairgenError::CorruptPairFile {
                line: lineno,
                reason: format!("expected 4 columns, found {}", cols.len()),
            });
        }
        for c in &cols {
            validate_id("pair column", c).map_err(|e| PairgenError::CorruptPairFile {
                line: lineno,
                reason: e.to_string(),
            })?;
        }
        if cols[1] == cols[2] {
            return Err(PairgenError::CorruptPairFile {
                line: lineno,
                reason: "preferred equals dispreferred".into(),
            });
        }
        out.push(ComparisonPair {
            image_id: cols[0].to_owned(),
            preferred: cols[1].to_owned(),
            dispreferred: cols[2].to_owned(),
            record_id: cols[3].to_owned(),
        });
    }
    Ok(out)
}

pub fn read_pair_file(path: impl AsRef<Path>) -> Result<Vec<ComparisonPair>, PairgenError> {
    read_pairs(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{TimeZone, Utc};
    use std::collections::BTreeMap;

    fn rec(ranking: &[&[&str]]) -> PreferenceRecord {
        PreferenceRecord {
            record_id: "r".into(),
            image_id: "img".into(),
            labeler_id: "l".into(),
            ranking: ranking
                .iter()
                .map(|g| g.iter().map(|s| s.to_string()).collect())
                .collect(),
            criteria: BTreeMap::new(),
            timestamp: Utc.timestamp_opt(0, 0).unwrap(),
        }
    }

    fn total_order(k: usize) -> PreferenceRecord {
        let names: Vec<String> = (0..k).map(|i| format!("c{i:02}")).collect();
        let groups: Vec<Vec<&str>> = names.iter().map(|n| vec![n.as_str()]).collect();
        let refs: Vec<&[&str]> = groups.iter().map(|g| g.as_slice()).collect();
        rec(&refs)
    }

    #[test]
    fn total_orders_give_k_choose_2() {
        assert_eq!(generate_pairs(&total_order(8)).unwrap().len(), 28);
        assert_eq!(generate_pairs(&total_order(10)).unwrap().len(), 45);
    }

    #[test]
    fn ties_produce_no_pair() {
        let pairs = generate_pairs(&rec(&[&["b", "a"], &["c"]])).unwrap();
        let got: Vec<(&str, &str)> = pairs
            .iter()
            .map(|p| (p.preferred.as_str(), p.dispreferred.as_str()))
            .collect();
        assert_eq!(got, vec![("a", "c"), ("b", "c")]);
    }

    #[test]
    fn single_caption_is_degenerate() {
        assert!(matches!(
            generate_pairs(&rec(&[&["a"]])),
            Err(PairgenError::DegenerateRecord(_))
        ));
        assert!(matches!(
            generate_pairs(&rec(&[&["a", "b", "c"]])),
            Err(PairgenError::DegenerateRecord(_))
        ));
    }

    #[test]
    fn group_sizes_3_2_1() {
        let r = rec(&[&["a", "b", "c"], &["d", "e"], &["f"]]);
        assert_eq!(generate_pairs(&r).unwrap().len(), 11);
        assert_eq!(pair_count([3, 2, 1]), 11);
    }

    #[test]
    fn output_order_is_group_then_id() {
        let pairs = generate_pairs(&rec(&[&["z"], &["y", "x"], &["w"]])).unwrap();
        let got: Vec<(&str, &str)> = pairs
            .iter()
            .map(|p| (p.preferred.as_str(), p.dispreferred.as_str()))
            .collect();
        assert_eq!(
            got,
            vec![("z", "x"), ("z", "y"), ("z", "w"), ("x", "w"), ("y", "w")]
        );
    }

    #[test]
    fn pair_file_round_trip() {
        let pairs = generate_pairs(&total_order(4)).unwrap();
        let mut buf = Vec::new();
        write_pairs(&pairs, &mut buf).unwrap();
        assert_eq!(read_pairs(&buf[..]).unwrap(), pairs);
        assert!(read_pairs(&b"a\tb\tc\n"[..]).is_err());
        assert!(read_pairs(&b"a\tb\tb\tr\n"[..]).is_err());
    }
}
