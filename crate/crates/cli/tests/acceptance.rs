//! Acceptance checks. Each criterion prints one `PASS` or `FAIL` line; the
//! process exits nonzero if any failed.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use sift_core::compressor::{
    score_records, select_top, sort_oracle, KeepRatio, ScoreProvenance, ScoreTable,
};
use sift_core::embedding::EmbeddingTable;
use sift_core::evaluator::{evaluate_preferences, reward_head_scores, EvalOptions};
use sift_core::head::{
    pair_loss, pair_loss_from_delta, train, Activation, HeadArchitecture, HeadParameters,
    PairData, RewardHead, TrainConfig,
};
use sift_core::pairgen::{generate_dataset_pairs, generate_pairs, pair_count, SplitOptions};
use sift_core::rng::{self, Domain};
use sift_core::store::{PreferenceDataset, PreferenceRecord};
use sift_core::synth::{self, CorpusSpec, PreferenceSpec};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

// ---------------------------------------------------------------- gradients

/// Signs of every hidden pre-activation, for detecting ReLU kinks.
fn relu_pattern(params: &HeadParameters, x: &[f64]) -> Vec<bool> {
    let mut pattern = Vec::new();
    let mut a = x.to_vec();
    let hidden = params.layers.len() - 1;
    for layer in &params.layers[..hidden] {
        let z: Vec<f64> = (0..layer.out_dim)
            .map(|j| {
                let row = &layer.weight[j * layer.in_dim..(j + 1) * layer.in_dim];
                layer.bias[j] + row.iter().zip(&a).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect();
        pattern.extend(z.iter().map(|&v| v > 0.0));
        a = z.into_iter().map(|v| v.max(0.0)).collect();
    }
    pattern
}

fn gradient_check() -> Outcome {
    const H: f64 = 1e-5;
    // Gradients below this magnitude are compared on an absolute scale.
    const FLOOR: f64 = 1e-6;
    let mut rng = rng::stream(2024, Domain::Task, 0);
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    let mut skipped = 0usize;
    for trial in 0..25 {
        let input = rng.random_range(4..=32);
        let hidden = rng.random_range(1..=3);
        let mut widths = vec![input];
        widths.extend((0..hidden).map(|_| rng.random_range(2..=64)));
        let activation = [Activation::Relu, Activation::Gelu, Activation::Tanh][trial % 3];
        let arch = HeadArchitecture {
            dropout_rates: vec![0.1; hidden],
            layer_widths: widths,
            activation,
        };
        let head = RewardHead::init(arch.clone(), rng.next_u64()).map_err(|e| e.to_string())?;
        let x: Vec<f64> = (0..input).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..input).map(|_| rng.random_range(-1.0..1.0)).collect();
        let analytic = pair_loss(&head, &x, &y).map_err(|e| e.to_string())?.grads.flatten();
        let base = head.parameters().flatten();
        let loss_at = |flat: &[f64]| {
            let p = HeadParameters::from_flat(&arch, flat).expect("same shape");
            let pattern = (relu_pattern(&p, &x), relu_pattern(&p, &y));
            let h = RewardHead::new(arch.clone(), p).expect("valid");
            (pair_loss(&h, &x, &y).expect("finite").loss, pattern)
        };
        let (_, pattern0) = loss_at(&base);
        let mut flat = base.clone();
        for i in 0..base.len() {
            flat[i] = base[i] + H;
            let (up, pu) = loss_at(&flat);
            flat[i] = base[i] - H;
            let (down, pd) = loss_at(&flat);
            flat[i] = base[i];
            if activation == Activation::Relu && (pu != pattern0 || pd != pattern0) {
                // The step crosses a ReLU kink; a central difference is
                // meaningless there.
                skipped += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * H);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    check(worst < 1e-4, format!("max relative error {worst:.3e}"))?;
    check(
        skipped * 100 < checked,
        format!("{skipped} coordinates skipped at kinks"),
    )?;
    Ok(format!(
        "25 architectures, {checked} coordinates, max relative error {worst:.2e}, {skipped} kink coordinates skipped"
    ))
}

// ---------------------------------------------------------------- loss

fn loss_closed_forms() -> Outcome {
    let ln2 = std::f64::consts::LN_2;
    let at_zero = pair_loss_from_delta(0.0).map_err(|e| e.to_string())?.0;
    check((at_zero - ln2).abs() < 1e-12, format!("loss(0) = {at_zero}"))?;
    let at_ln3 = pair_loss_from_delta(-(3.0f64).ln()).map_err(|e| e.to_string())?.0;
    check(
        (at_ln3 - (4.0f64).ln()).abs() < 1e-12,
        format!("loss(-ln 3) = {at_ln3}"),
    )?;
    for d in [50.0, -50.0] {
        let (l, g) = pair_loss_from_delta(d).map_err(|e| e.to_string())?;
        check(l.is_finite() && g.is_finite(), format!("loss({d}) not finite"))?;
    }
    Ok("loss(0) = ln 2, loss(-ln 3) = ln 4, finite at +-50".into())
}

// ---------------------------------------------------------------- pairs

fn record(groups: &[usize]) -> PreferenceRecord {
    let mut next = 0;
    let ranking = groups
        .iter()
        .map(|&g| {
            (0..g)
                .map(|_| {
                    next += 1;
                    format!("c{next}")
                })
                .collect()
        })
        .collect();
    PreferenceRecord {
        record_id: "r".into(),
        image_id: "img".into(),
        labeler_id: "lab".into(),
        ranking,
        criteria: Default::default(),
        timestamp: Default::default(),
    }
}

fn pair_counting() -> Outcome {
    for (groups, want) in [(vec![1; 8], 28), (vec![1; 10], 45), (vec![3, 2, 1], 11)] {
        let produced = generate_pairs(&record(&groups))
            .map_err(|e| e.to_string())?
            .len();
        let formula = pair_count(groups.iter().copied());
        check(
            produced == want && formula == want,
            format!("{groups:?}: produced {produced}, formula {formula}, want {want}"),
        )?;
    }
    Ok("8 ranked -> 28, 10 ranked -> 45, groups (3,2,1) -> 11".into())
}

// ---------------------------------------------------------------- learning

struct Learned {
    head: RewardHead,
    summary: String,
}

fn subset(data: &PreferenceDataset, images: &BTreeSet<String>) -> PreferenceDataset {
    let mut out = PreferenceDataset::new("holdout");
    for img in data.images().filter(|i| images.contains(&i.image_id)) {
        out.add_image(img.clone()).expect("image");
        for c in data.captions_of(&img.image_id).unwrap_or_default() {
            out.add_caption(c.clone()).expect("caption");
        }
    }
    for rec in data.records().iter().filter(|r| images.contains(&r.image_id)) {
        out.append_record(rec.clone()).expect("record");
    }
    out
}

/// Trains the default head for 5,000 updates on synthetic preferences and
/// returns (holdout pairwise accuracy, holdout best-caption accuracy, head).
fn train_synthetic(random_labels: bool) -> Result<(f64, f64, RewardHead), String> {
    let spec = PreferenceSpec {
        random_labels,
        ..PreferenceSpec::default()
    };
    let prefs = synth::preferences(&spec);
    let split = generate_dataset_pairs(
        &prefs.store,
        &SplitOptions {
            seed: 0,
            holdout_fraction: 0.2,
            max_pairs_per_image: None,
        },
    )
    .map_err(|e| e.to_string())?;
    let table = EmbeddingTable::from_records(prefs.embeddings).map_err(|e| e.to_string())?;
    let train_data = PairData::build(&split.train, &table).map_err(|e| e.to_string())?;
    let holdout = PairData::build(&split.holdout, &table).map_err(|e| e.to_string())?;
    let config = TrainConfig {
        total_updates: 5_000,
        log_every: 1_000,
        ..TrainConfig::default()
    };
    let arch = HeadArchitecture::default_for_input(spec.dimension);
    let (ckpt, _) =
        train(arch, config, &train_data, Some(&holdout)).map_err(|e| e.to_string())?;
    let head = ckpt.head().map_err(|e| e.to_string())?;
    let pairwise = holdout.pairwise_accuracy(&head).map_err(|e| e.to_string())?;

    let held = subset(&prefs.store, &split.holdout_images);
    let scores = reward_head_scores(&head, &held, &table).map_err(|e| e.to_string())?;
    let report = evaluate_preferences(
        &held,
        "reward-head",
        |i, c| scores.get(&(i.to_string(), c.to_string())).copied(),
        EvalOptions::default(),
    )
    .map_err(|e| e.to_string())?;
    Ok((pairwise, report.best_caption_accuracy, head))
}

fn learnability(slot: &mut Option<Learned>) -> Outcome {
    let t = Instant::now();
    let (pairwise, best, head) = train_synthetic(false)?;
    let (control, _, _) = train_synthetic(true)?;
    let secs = t.elapsed().as_secs_f64();
    let summary = format!(
        "holdout pairwise {pairwise:.4}, best-caption {best:.4}, random-label control {control:.4}, {secs:.0}s"
    );
    *slot = Some(Learned {
        head,
        summary: summary.clone(),
    });
    check(pairwise >= 0.95, format!("pairwise {pairwise:.4} < 0.95"))?;
    check(best >= 0.90, format!("best-caption {best:.4} < 0.90"))?;
    check(
        (0.45..=0.55).contains(&control),
        format!("control {control:.4} outside [0.45, 0.55]"),
    )?;
    check(secs < 300.0, format!("took {secs:.0}s"))?;
    Ok(summary)
}

// ---------------------------------------------------------------- compression

fn table_of(scores: Vec<f64>) -> ScoreTable {
    let ids: Vec<String> = (0..scores.len()).map(|i| format!("p{i:06}")).collect();
    ScoreTable::new(
        ScoreProvenance {
            scorer: "test".into(),
            checkpoint_sha256: None,
        },
        ids,
        scores,
    )
    .expect("valid table")
}

fn selected(table: &ScoreTable, ratio: KeepRatio) -> Result<Vec<String>, String> {
    Ok(select_top(table, ratio).map_err(|e| e.to_string())?.selected)
}

fn compression_laws() -> Outcome {
    let mut rng = rng::stream(7, Domain::Task, 1);
    for n in [1usize, 10, 100_000] {
        let table = table_of((0..n).map(|_| rng.random_range(-3.0..3.0)).collect());
        for (num, den) in [(1, 5), (1, 2), (4, 5)] {
            let ratio = KeepRatio::new(num, den).map_err(|e| e.to_string())?;
            let got = selected(&table, ratio)?;
            let want = n as u64 * num / den;
            check(
                got.len() as u64 == want,
                format!("N={n} ratio {ratio}: kept {} want {want}", got.len()),
            )?;
            check(
                got == sort_oracle(&table, ratio),
                format!("N={n} ratio {ratio}: differs from full sort"),
            )?;
        }
    }

    // Integer-valued scores with many ties; every transform below is exact
    // and strictly increasing on them.
    let transforms: [fn(f64) -> f64; 4] = [
        |x| 2.0 * x,
        |x| x + 7.0,
        |x| x * x * x,
        |x| x / 1024.0 - 5.0,
    ];
    for trial in 0..100 {
        let n = rng.random_range(1..=2_000);
        let spread = [3, 50, 1_000][trial % 3];
        let scores: Vec<f64> = (0..n)
            .map(|_| rng.random_range(-spread..=spread) as f64)
            .collect();
        let mut table = table_of(scores);
        if trial % 2 == 1 {
            // Table order should not matter either.
            let mut entries: Vec<(String, f64)> =
                table.iter().map(|(i, s)| (i.to_string(), s)).collect();
            entries.shuffle(&mut rng);
            table = ScoreTable::from_entries(table.provenance.clone(), entries)
                .map_err(|e| e.to_string())?;
        }
        let den = rng.random_range(1..=100u64);
        let a = rng.random_range(1..=den);
        let b = rng.random_range(a..=den);
        let small = KeepRatio::new(a, den).map_err(|e| e.to_string())?;
        let large = KeepRatio::new(b, den).map_err(|e| e.to_string())?;
        let s_small = selected(&table, small)?;
        let s_large = selected(&table, large)?;
        let large_set: BTreeSet<&String> = s_large.iter().collect();
        check(
            s_small.iter().all(|id| large_set.contains(id)),
            format!("trial {trial}: {small} selection not inside {large}"),
        )?;
        check(
            s_small == sort_oracle(&table, small),
            format!("trial {trial}: differs from full sort"),
        )?;
        let f = transforms[trial % transforms.len()];
        let mapped = table.map_scores(f).map_err(|e| e.to_string())?;
        check(
            selected(&mapped, small)? == s_small,
            format!("trial {trial}: changed under a monotone transform"),
        )?;
    }
    Ok("cardinality and full-sort agreement for N in {1, 10, 1e5} x {1/5, 1/2, 4/5}; nesting, order and monotone-transform invariance over 100 trials".into())
}

// ---------------------------------------------------------------- filtering

fn filtering(learned: Option<&Learned>) -> Outcome {
    let learned = learned.ok_or("no trained head (learnability check failed to train)")?;
    let corpus = synth::mixed_corpus(&CorpusSpec::default());
    let table = score_records(
        &learned.head,
        &corpus.records,
        ScoreProvenance {
            scorer: "reward-head".into(),
            checkpoint_sha256: None,
        },
    )
    .map_err(|e| e.to_string())?;
    let manifest = select_top(&table, KeepRatio::new(1, 2).unwrap()).map_err(|e| e.to_string())?;
    let kept: BTreeSet<&str> = manifest.selected.iter().map(String::as_str).collect();
    let (mut aligned_total, mut aligned_kept) = (0usize, 0usize);
    for (rec, &aligned) in corpus.records.iter().zip(&corpus.aligned) {
        if aligned {
            aligned_total += 1;
            aligned_kept += kept.contains(rec.key.pair_id().unwrap()) as usize;
        }
    }
    let recovered = aligned_kept as f64 / aligned_total as f64;
    check(
        recovered >= 0.90,
        format!("recovered {recovered:.4} of aligned pairs"),
    )?;
    Ok(format!(
        "top 50% keeps {aligned_kept}/{aligned_total} aligned pairs ({recovered:.4}); head: {}",
        learned.summary
    ))
}

// ---------------------------------------------------------------- determinism

fn sift(dir: &Path, args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_sift"))
        .current_dir(dir)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "sift {}: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn pipeline(dir: &Path, workers: &str) -> Result<(Vec<u8>, Vec<u8>), String> {
    let w = ["--workers", workers];
    sift(dir, &[&w[..], &["demo", "--out-dir", "d", "--seed", "11"]].concat())?;
    sift(
        dir,
        &[
            &w[..],
            &[
                "pairgen", "--store", "d/store.log", "--out", "train.pairs", "--holdout-out",
                "holdout.pairs", "--holdout-fraction", "0.2", "--seed", "11",
            ],
        ]
        .concat(),
    )?;
    let lines = |p: &str| -> Result<usize, String> {
        Ok(std::fs::read_to_string(dir.join(p))
            .map_err(|e| e.to_string())?
            .lines()
            .count())
    };
    let total = lines("train.pairs")? + lines("holdout.pairs")?;
    check(total == 500 * 28, format!("{total} pair lines, want 14000"))?;
    sift(
        dir,
        &[
            &w[..],
            &[
                "train", "--pairs", "train.pairs", "--holdout-pairs", "holdout.pairs",
                "--embeddings", "d/captions.emb", "--out", "head.ckpt", "--total-updates", "300",
                "--seed", "11",
            ],
        ]
        .concat(),
    )?;
    sift(
        dir,
        &[&w[..], &["score", "--checkpoint", "head.ckpt", "--shards", "d/corpus.emb", "--out", "scores.bin"]]
            .concat(),
    )?;
    sift(
        dir,
        &[&w[..], &["compress", "--scores", "scores.bin", "--keep-ratio", "0.5", "--out", "manifest.txt"]]
            .concat(),
    )?;
    let manifest = std::fs::read(dir.join("manifest.txt")).map_err(|e| e.to_string())?;
    let ids = String::from_utf8_lossy(&manifest)
        .lines()
        .filter(|l| !l.starts_with('#'))
        .count();
    check(ids == 5_000, format!("manifest lists {ids} ids, want 5000"))?;
    for artifact in ["head.ckpt", "scores.bin", "manifest.txt", "d/corpus.emb"] {
        check(
            dir.join(format!("{artifact}.provenance.json")).exists(),
            format!("{artifact} has no provenance stamp"),
        )?;
    }
    let ckpt = std::fs::read(dir.join("head.ckpt")).map_err(|e| e.to_string())?;
    Ok((manifest, ckpt))
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (m1, c1) = pipeline(a.path(), "1")?;
    let (m2, c2) = pipeline(b.path(), "3")?;
    check(m1 == m2, "manifests differ")?;
    check(c1 == c2, "checkpoints differ")?;
    Ok(format!(
        "demo -> pairgen -> train -> score -> compress twice (1 and 3 workers): identical {}-byte manifest and {}-byte checkpoint",
        m1.len(),
        c1.len()
    ))
}

// ---------------------------------------------------------------- main

fn report(name: &str, outcome: std::thread::Result<Outcome>) -> bool {
    match outcome {
        Ok(Ok(detail)) => {
            println!("[acceptance] PASS {name}: {detail}");
            true
        }
        Ok(Err(why)) => {
            println!("[acceptance] FAIL {name}: {why}");
            false
        }
        Err(panic) => {
            let why = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            println!("[acceptance] FAIL {name}: panic: {why}");
            false
        }
    }
}

fn main() {
    let mut ok = true;
    ok &= report("gradient-correctness", catch_unwind(gradient_check));
    ok &= report("loss-closed-forms", catch_unwind(loss_closed_forms));
    ok &= report("pair-counting", catch_unwind(pair_counting));
    let mut learned = None;
    ok &= report(
        "synthetic-learnability",
        catch_unwind(AssertUnwindSafe(|| learnability(&mut learned))),
    );
    ok &= report("compression-laws", catch_unwind(compression_laws));
    ok &= report(
        "filtering-efficacy",
        catch_unwind(AssertUnwindSafe(|| filtering(learned.as_ref()))),
    );
    ok &= report("pipeline-determinism", catch_unwind(determinism));
    println!(
        "[acceptance] NOTE not-reproduced: published human-alignment accuracies for the reward \
         model and the image-text similarity baselines, downstream retrieval, captioning and \
         classification results, and the web-scale compression outcome need the original \
         backbones, labeled validation images and corpora; they are represented here only by \
         the synthetic and property checks above"
    );
    if !ok {
        std::process::exit(1);
    }
}
