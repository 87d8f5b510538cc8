use std::cmp::Ordering;

use rand::Rng;

use super::{CompressedManifest, CompressorError, KeepRatio, ScoreTable};
use crate::rng::{self, Domain};

/// Rank order: higher score first, then smaller pair id.
fn rank(table: &ScoreTable, a: usize, b: usize) -> Ordering {
    table.scores[b]
        .total_cmp(&table.scores[a])
        .then_with(|| table.ids[a].cmp(&table.ids[b]))
}

/// Keeps exactly `floor(ratio × N)` entries: those ranked first by score
/// descending, ties broken by pair id ascending.
///
/// The boundary element is found with a linear-time selection over indices
/// and the kept ids are then emitted in a single pass in table order.
pub fn select_top(table: &ScoreTable, ratio: KeepRatio) -> Result<CompressedManifest, CompressorError> {
    if table.is_empty() {
        return Err(CompressorError::EmptyTable);
    }
    let n = table.len();
    let m = ratio.kept(n as u64) as usize;
    let mut manifest = CompressedManifest {
        keep_ratio: ratio,
        exact: true,
        input_count: n as u64,
        kept_count: m as u64,
        threshold: None,
        threshold_pair_id: None,
        provenance: table.provenance.clone(),
        selected: Vec::with_capacity(m),
    };
    if m == 0 {
        return Ok(manifest);
    }
    let boundary = if m == n {
        (0..n).max_by(|&a, &b| rank(table, a, b)).expect("non-empty")
    } else {
        let mut idx: Vec<usize> = (0..n).collect();
        let (_, nth, _) = idx.select_nth_unstable_by(m - 1, |&a, &b| rank(table, a, b));
        *nth
    };
    manifest.threshold = Some(table.scores[boundary]);
    manifest.threshold_pair_id = Some(table.ids[boundary].clone());
    for i in 0..n {
        if rank(table, i, boundary) != Ordering::Greater {
            manifest.selected.push(table.ids[i].clone());
        }
    }
    debug_assert_eq!(manifest.selected.len(), m);
    Ok(manifest)
}

/// Estimates the threshold from a uniform reservoir sample of `sample_size`
/// scores and keeps every entry scoring at or above it. The kept count is
/// only approximately `floor(ratio × N)`; the manifest is marked non-exact.
pub fn select_top_approximate(
    table: &ScoreTable,
    ratio: KeepRatio,
    sample_size: usize,
    seed: u64,
) -> Result<CompressedManifest, CompressorError> {
    if table.is_empty() {
        return Err(CompressorError::EmptyTable);
    }
    let sample_size = sample_size.max(1);
    let mut rng = rng::stream(seed, Domain::Reservoir, 0);
    let mut sample: Vec<f64> = Vec::with_capacity(sample_size.min(table.len()));
    for (i, &s) in table.scores.iter().enumerate() {
        if sample.len() < sample_size {
            sample.push(s);
        } else {
            let j = rng.random_range(0..=i);
            if j < sample_size {
                sample[j] = s;
            }
        }
    }
    sample.sort_by(|a, b| b.total_cmp(a));
    let k = ratio.kept(sample.len() as u64) as usize;
    let n = table.len();
    let mut manifest = CompressedManifest {
        keep_ratio: ratio,
        exact: false,
        input_count: n as u64,
        kept_count: 0,
        threshold: None,
        threshold_pair_id: None,
        provenance: table.provenance.clone(),
        selected: Vec::new(),
    };
    if k == 0 {
        return Ok(manifest);
    }
    let thr = sample[k - 1];
    manifest.threshold = Some(thr);
    manifest.selected = table
        .iter()
        .filter(|&(_, s)| s >= thr)
        .map(|(id, _)| id.to_string())
        .collect();
    manifest.kept_count = manifest.selected.len() as u64;
    Ok(manifest)
}

/// Reference selection by full sort, returned in table order.
pub fn sort_oracle(table: &ScoreTable, ratio: KeepRatio) -> Vec<String> {
    let mut idx: Vec<usize> = (0..table.len()).collect();
    idx.sort_by(|&a, &b| rank(table, a, b));
    let m = ratio.kept(table.len() as u64) as usize;
    let mut kept: Vec<usize> = idx[..m].to_vec();
    kept.sort_unstable();
    kept.into_iter().map(|i| table.ids[i].clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compressor::ScoreProvenance;

    fn table(entries: &[(&str, f64)]) -> ScoreTable {
        ScoreTable::from_entries(
            ScoreProvenance::default(),
            entries.iter().map(|(a, s)| (a.to_string(), *s)),
        )
        .unwrap()
    }

    fn ratio(s: &str) -> KeepRatio {
        s.parse().unwrap()
    }

    #[test]
    fn half_of_ten() {
        let entries: Vec<(String, f64)> = (0..10).map(|i| (format!("p{i}"), i as f64)).collect();
        let t = ScoreTable::from_entries(ScoreProvenance::default(), entries).unwrap();
        let m = select_top(&t, ratio("0.5")).unwrap();
        assert_eq!(m.kept_count, 5);
        assert_eq!(m.selected, ["p5", "p6", "p7", "p8", "p9"]);
        assert_eq!(m.threshold, Some(5.0));
    }

    #[test]
    fn equal_scores_keep_smallest_ids() {
        let t = table(&[("d", 1.0), ("b", 1.0), ("c", 1.0), ("a", 1.0)]);
        let m = select_top(&t, ratio("0.5")).unwrap();
        assert_eq!(m.selected, ["b", "a"]);
        assert_eq!(m.threshold_pair_id.as_deref(), Some("b"));
    }

    #[test]
    fn floor_to_zero_and_full() {
        let t = table(&[("a", 1.0)]);
        let m = select_top(&t, ratio("0.8")).unwrap();
        assert!(m.selected.is_empty() && m.threshold.is_none());
        assert_eq!(select_top(&t, ratio("1")).unwrap().selected, ["a"]);
        assert!(matches!(
            select_top(&table(&[]), ratio("0.5")),
            Err(CompressorError::EmptyTable)
        ));
    }

    #[test]
    fn approximate_is_close() {
        let entries: Vec<(String, f64)> = (0..20_000)
            .map(|i| (format!("p{i}"), ((i * 7919) % 20_000) as f64))
            .collect();
        let t = ScoreTable::from_entries(ScoreProvenance::default(), entries).unwrap();
        let m = select_top_approximate(&t, ratio("0.3"), 4096, 1).unwrap();
        assert!(!m.exact);
        let kept = m.kept_count as f64;
        assert!((kept - 6000.0).abs() < 600.0, "{kept}");
    }
}
