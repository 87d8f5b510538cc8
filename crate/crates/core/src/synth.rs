//! Synthetic data with a known ground truth.
//!
//! A hidden unit vector `w` defines the "true" alignment score `w·e` of an
//! embedding `e`. Preference datasets rank each image's captions by that
//! score. Captions are unit isotropic noise plus an extra quality offset
//! along `w`, so candidates for one image differ in quality more than in
//! any single nuisance direction. Mixed corpora shift half of the pairs
//! along `+w` (aligned) and half along `−w` (corrupted).

use chrono::{DateTime, TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::embedding::{EmbeddingKey, EmbeddingRecord};
use crate::rng::{self, Domain};
use crate::store::{
    CaptionCandidate, CaptionSource, ImageEntry, ImageSource, PreferenceDataset, PreferenceRecord,
};

#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceSpec {
    pub images: usize,
    pub captions_per_image: usize,
    pub dimension: usize,
    /// Minimum gap between the true scores of two captions of one image.
    pub margin: f64,
    /// Extra standard deviation of caption quality along the hidden
    /// direction, on top of the unit isotropic noise. 0 gives isotropic
    /// captions.
    pub quality_spread: f64,
    pub seed: u64,
    /// Replace every ranking by a uniformly random order.
    pub random_labels: bool,
}

impl Default for PreferenceSpec {
    fn default() -> Self {
        PreferenceSpec {
            images: 500,
            captions_per_image: 8,
            dimension: 32,
            margin: 0.1,
            quality_spread: 2.0,
            seed: 0,
            random_labels: false,
        }
    }
}

pub struct SyntheticPreferences {
    pub store: PreferenceDataset,
    /// One record per caption, keyed by `(image_id, caption_id)`.
    pub embeddings: Vec<EmbeddingRecord>,
    pub direction: Vec<f64>,
}

pub fn hidden_direction(dimension: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng::stream(seed, Domain::Synth, 0);
    loop {
        let v: Vec<f64> = (0..dimension).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

pub fn true_score(direction: &[f64], e: &[f32]) -> f64 {
    direction.iter().zip(e).map(|(w, &x)| w * x as f64).sum()
}

fn epoch_time(i: usize) -> DateTime<Utc> {
    Utc.timestamp_opt(1_700_000_000 + i as i64, 0)
        .single()
        .expect("valid timestamp")
}

pub fn image_id(i: usize) -> String {
    format!("img-{i:05}")
}

pub fn caption_id(j: usize) -> String {
    format!("c{j:02}")
}

pub fn preferences(spec: &PreferenceSpec) -> SyntheticPreferences {
    let w = hidden_direction(spec.dimension, spec.seed);
    let mut rng = rng::stream(spec.seed, Domain::Synth, 1);
    let mut store = PreferenceDataset::new(format!("synthetic-{}", spec.seed));
    let mut embeddings = Vec::with_capacity(spec.images * spec.captions_per_image);

    for i in 0..spec.images {
        let img = image_id(i);
        store
            .add_image(ImageEntry {
                image_id: img.clone(),
                uri: format!("synthetic://{img}"),
                source_tag: ImageSource::DatasetNative,
            })
            .expect("generated image is valid");
        let mut scored: Vec<(f64, String)> = Vec::with_capacity(spec.captions_per_image);
        for j in 0..spec.captions_per_image {
            let (vector, s) = loop {
                let q = spec.quality_spread * rng.sample::<f64, _>(StandardNormal);
                let v: Vec<f32> = w
                    .iter()
                    .map(|wk| (rng.sample::<f64, _>(StandardNormal) + q * wk) as f32)
                    .collect();
                let s = true_score(&w, &v);
                if scored.iter().all(|(t, _)| (t - s).abs() >= spec.margin) {
                    break (v, s);
                }
            };
            let cap = caption_id(j);
            store
                .add_caption(CaptionCandidate {
                    caption_id: cap.clone(),
                    image_id: img.clone(),
                    text: format!("synthetic caption {j} of image {i}"),
                    source: CaptionSource::DatasetSampled,
                })
                .expect("generated caption is valid");
            embeddings.push(EmbeddingRecord::new(EmbeddingKey::caption(&img, &cap), vector));
            scored.push((s, cap));
        }
        if spec.random_labels {
            scored.shuffle(&mut rng);
        } else {
            scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        }
        store
            .append_record(PreferenceRecord {
                record_id: format!("rec-{i:05}"),
                image_id: img,
                labeler_id: "oracle".into(),
                ranking: scored.into_iter().map(|(_, c)| vec![c]).collect(),
                criteria: Default::default(),
                timestamp: epoch_time(i),
            })
            .expect("generated record is valid");
    }
    SyntheticPreferences {
        store,
        embeddings,
        direction: w,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub pairs: usize,
    pub dimension: usize,
    /// Distance moved along `+w` (aligned) or `−w` (corrupted).
    pub shift: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            pairs: 10_000,
            dimension: 32,
            shift: 2.0,
            seed: 0,
        }
    }
}

pub struct SyntheticCorpus {
    pub records: Vec<EmbeddingRecord>,
    /// `aligned[i]` tells whether `records[i]` is an aligned pair.
    pub aligned: Vec<bool>,
}

pub fn pair_id(i: usize) -> String {
    format!("pair-{i:07}")
}

/// A corpus whose first half (after shuffling) is aligned and the rest
/// corrupted. The hidden direction matches [`preferences`] for the same seed.
pub fn mixed_corpus(spec: &CorpusSpec) -> SyntheticCorpus {
    let w = hidden_direction(spec.dimension, spec.seed);
    let mut rng = rng::stream(spec.seed, Domain::Synth, 2);
    let mut aligned: Vec<bool> = (0..spec.pairs).map(|i| i < spec.pairs / 2).collect();
    aligned.shuffle(&mut rng);
    let records = aligned
        .iter()
        .enumerate()
        .map(|(i, &ok)| {
            let sign = if ok { spec.shift } else { -spec.shift };
            let v: Vec<f32> = w
                .iter()
                .map(|&wk| (rng.sample::<f64, _>(StandardNormal) + sign * wk) as f32)
                .collect();
            EmbeddingRecord::new(EmbeddingKey::pair(pair_id(i)), v)
        })
        .collect();
    SyntheticCorpus { records, aligned }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pairgen::generate_pairs;

    #[test]
    fn rankings_follow_hidden_scorer_with_margin() {
        let spec = PreferenceSpec {
            images: 20,
            seed: 4,
            ..PreferenceSpec::default()
        };
        let data = preferences(&spec);
        assert_eq!(data.store.record_count(), 20);
        assert_eq!(data.embeddings.len(), 160);
        let lookup = |img: &str, cap: &str| {
            data.embeddings
                .iter()
                .find(|r| r.key == EmbeddingKey::caption(img, cap))
                .unwrap()
        };
        for rec in data.store.records() {
            assert_eq!(generate_pairs(rec).unwrap().len(), 28);
            let scores: Vec<f64> = rec
                .ranking
                .iter()
                .map(|g| true_score(&data.direction, &lookup(&rec.image_id, &g[0]).vector))
                .collect();
            for w in scores.windows(2) {
                assert!(w[0] - w[1] >= 0.1 - 1e-9);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = PreferenceSpec {
            images: 5,
            ..PreferenceSpec::default()
        };
        let a = preferences(&spec);
        let b = preferences(&spec);
        assert_eq!(a.store.to_log_string(), b.store.to_log_string());
        assert_eq!(a.embeddings, b.embeddings);
    }

    #[test]
    fn mixed_corpus_halves() {
        let c = mixed_corpus(&CorpusSpec {
            pairs: 1000,
            ..CorpusSpec::default()
        });
        assert_eq!(c.aligned.iter().filter(|&&a| a).count(), 500);
        let w = hidden_direction(32, 0);
        let mean = |want: bool| {
            let xs: Vec<f64> = c
                .records
                .iter()
                .zip(&c.aligned)
                .filter(|(_, &a)| a == want)
                .map(|(r, _)| true_score(&w, &r.vector))
                .collect();
            xs.iter().sum::<f64>() / xs.len() as f64
        };
        assert!(mean(true) > 1.5 && mean(false) < -1.5);
    }
}
