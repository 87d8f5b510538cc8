use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::json;
use sift_annotate::ServiceConfig;
use sift_core::compressor::{
    apply_manifest, score_corpus, select_top, select_top_approximate, CompressedManifest,
    KeepRatio, ScoreProvenance, ScoreTable,
};
use sift_core::digest::file_sha256_hex;
use sift_core::embedding::{
    fetch_embeddings, write_shard, ClientConfig, EmbeddingKey, EmbeddingTable,
};
use sift_core::evaluator::{
    cosine_scores, evaluate_preferences, reward_head_scores, score_stats, EvalOptions,
    STANDARD_QUANTILES,
};
use sift_core::head::{
    load_checkpoint, save_checkpoint, HeadArchitecture, HeadError, PairData, TrainConfig,
    TrainLog, Trainer,
};
use sift_core::pairgen::{generate_dataset_pairs, read_pair_file, write_pair_file, SplitOptions};
use sift_core::store::{export_store, load_store, PreferenceStore};
use sift_core::synth::{self, CorpusSpec, PreferenceSpec};

use crate::error::CliError;
use crate::provenance::write_stamps;
use crate::settings::{List, Resolver};
use crate::{
    ApplyArgs, CompressArgs, DemoArgs, EmbedArgs, EvalArgs, ExportArgs, ImportArgs,
    InitStoreArgs, PairgenArgs, ScoreArgs, ServeArgs, StatsArgs, TrainArgs,
};

type Cfg<'a> = Option<&'a Path>;

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::io(path, e))
}

/// Fails early, naming the path, when an input is missing.
fn check_inputs<'a>(paths: impl IntoIterator<Item = &'a Path>) -> Result<(), CliError> {
    for p in paths {
        if !p.exists() {
            return Err(CliError::io(
                p,
                std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
            ));
        }
    }
    Ok(())
}

fn paths(v: &[PathBuf]) -> impl Iterator<Item = &Path> {
    v.iter().map(PathBuf::as_path)
}

pub fn init_store(cfg: Cfg, a: InitStoreArgs) -> Result<(), CliError> {
    let mut r = Resolver::new(cfg, "init-store")?;
    let id = r.get("store_id", a.store_id, "default".to_string())?;
    PreferenceStore::create(&a.store, id)?;
    write_stamps("init-store", &r.resolved, &[], &[&a.store])
}

pub fn import(cfg: Cfg, a: ImportArgs) -> Result<(), CliError> {
    check_inputs([a.from.as_path()])?;
    let r = Resolver::new(cfg, "import")?;
    let source = load_store(&a.from)?;
    let mut store = if a.store.exists() {
        PreferenceStore::open(&a.store)?
    } else {
        PreferenceStore::create(&a.store, source.store_id())?
    };
    let n = store.import(&source)?;
    drop(store);
    println!("imported {n} entries");
    write_stamps("import", &r.resolved, &[&a.from], &[&a.store])
}

pub fn export(cfg: Cfg, a: ExportArgs) -> Result<(), CliError> {
    check_inputs([a.store.as_path()])?;
    let r = Resolver::new(cfg, "export")?;
    export_store(&load_store(&a.store)?, &a.out)?;
    write_stamps("export", &r.resolved, &[&a.store], &[&a.out])
}

pub fn embed(cfg: Cfg, a: EmbedArgs) -> Result<(), CliError> {
    check_inputs([a.store.as_path()])?;
    let mut r = Resolver::new(cfg, "embed")?;
    let d = ClientConfig::default();
    let config = ClientConfig {
        endpoint: r.get("endpoint", a.endpoint, d.endpoint.clone())?,
        batch_size: r.get("batch_size", a.batch_size, d.batch_size)?,
        expected_dimension: r.get_opt("expected_dimension", a.expected_dimension)?,
        max_retries: r.get("max_retries", a.max_retries, d.max_retries)?,
        timeout_secs: r.get("timeout_secs", a.timeout_secs, d.timeout_secs)?,
        ..d
    };
    if config.endpoint.is_empty() {
        return Err(CliError::Usage(
            "no embedding endpoint; pass --endpoint or set it in [embed]".into(),
        ));
    }
    let data = load_store(&a.store)?;
    let keys: Vec<EmbeddingKey> = data
        .captions()
        .map(|c| EmbeddingKey::caption(&c.image_id, &c.caption_id))
        .collect();
    let records = fetch_embeddings(&config, &keys)?;
    let dimension = records.first().map_or(0, |r| r.vector.len());
    write_shard(&records, &a.out, dimension)?;
    println!("wrote {} embeddings of width {dimension}", records.len());
    write_stamps("embed", &r.resolved, &[&a.store], &[&a.out])
}

pub fn pairgen(cfg: Cfg, a: PairgenArgs) -> Result<(), CliError> {
    check_inputs([a.store.as_path()])?;
    let mut r = Resolver::new(cfg, "pairgen")?;
    let opts = SplitOptions {
        seed: r.get("seed", a.seed, 0)?,
        holdout_fraction: r.get("holdout_fraction", a.holdout_fraction, 0.0)?,
        max_pairs_per_image: r.get_opt("max_pairs_per_image", a.max_pairs_per_image)?,
    };
    if opts.holdout_fraction > 0.0 && a.holdout_out.is_none() {
        return Err(CliError::Usage(
            "a positive holdout fraction needs --holdout-out".into(),
        ));
    }
    let data = load_store(&a.store)?;
    let split = generate_dataset_pairs(&data, &opts)?;
    write_pair_file(&split.train, &a.out).map_err(|e| CliError::io(&a.out, e))?;
    let mut outputs: Vec<&Path> = vec![&a.out];
    if let Some(h) = &a.holdout_out {
        write_pair_file(&split.holdout, h).map_err(|e| CliError::io(h, e))?;
        outputs.push(h);
    }
    println!(
        "{} training pairs, {} holdout pairs from {} held-out images",
        split.train.len(),
        split.holdout.len(),
        split.holdout_images.len()
    );
    write_stamps("pairgen", &r.resolved, &[&a.store], &outputs)
}

fn load_pair_data(pairs: &Path, table: &EmbeddingTable) -> Result<PairData, CliError> {
    Ok(PairData::build(&read_pair_file(pairs)?, table)?)
}

pub fn train(cfg: Cfg, a: TrainArgs) -> Result<(), CliError> {
    check_inputs(
        [a.pairs.as_path()]
            .into_iter()
            .chain(paths(&a.embeddings))
            .chain(a.holdout_pairs.as_deref())
            .chain(a.resume.as_deref()),
    )?;
    let mut r = Resolver::new(cfg, "train")?;
    let table = EmbeddingTable::load(&a.embeddings)?;
    let train_data = load_pair_data(&a.pairs, &table)?;
    let holdout = a
        .holdout_pairs
        .as_deref()
        .map(|p| load_pair_data(p, &table))
        .transpose()?;
    let dim = train_data.dimension();

    let mut trainer = match &a.resume {
        Some(path) => {
            let mut t = Trainer::from_checkpoint(load_checkpoint(path)?)?;
            if let Some(total) = r.get_opt("total_updates", a.total_updates)? {
                t.set_total_updates(total);
            }
            t
        }
        None => {
            let d = TrainConfig::default();
            let config = TrainConfig {
                learning_rate: r.get("learning_rate", a.learning_rate, d.learning_rate)?,
                adam_beta1: r.get("adam_beta1", a.adam_beta1, d.adam_beta1)?,
                adam_beta2: r.get("adam_beta2", a.adam_beta2, d.adam_beta2)?,
                adam_epsilon: r.get("adam_epsilon", a.adam_epsilon, d.adam_epsilon)?,
                weight_decay: r.get("weight_decay", a.weight_decay, d.weight_decay)?,
                batch_size: r.get("batch_size", a.batch_size, d.batch_size)?,
                total_updates: r.get("total_updates", a.total_updates, d.total_updates)?,
                seed: r.get("seed", a.seed, d.seed)?,
                dropout_enabled: r.get("dropout_enabled", a.dropout_enabled, d.dropout_enabled)?,
                shared_dropout_mask: r.get(
                    "shared_dropout_mask",
                    a.shared_dropout_mask,
                    d.shared_dropout_mask,
                )?,
                per_image_weighting: r.get(
                    "per_image_weighting",
                    a.per_image_weighting,
                    d.per_image_weighting,
                )?,
                log_every: r.get("log_every", a.log_every, d.log_every)?,
            };
            let mut arch = HeadArchitecture::default_for_input(dim);
            if let Some(List(w)) = r.get_opt("layer_widths", a.layer_widths)? {
                arch.layer_widths = w;
            }
            if let Some(List(rates)) = r.get_opt("dropout_rates", a.dropout_rates)? {
                arch.dropout_rates = rates;
            }
            if let Some(act) = r.get_opt::<String>("activation", a.activation)? {
                arch.activation = act.parse()?;
            }
            Trainer::new(arch, config)?
        }
    };
    if trainer.head().input_dim() != dim {
        return Err(HeadError::DimensionMismatch {
            expected: trainer.head().input_dim(),
            found: dim,
        }
        .into());
    }

    // The stamp records the effective settings, which for a resumed run
    // come from the checkpoint.
    let mut settings = serde_json::Map::new();
    settings.insert("architecture".into(), json!(trainer.head().architecture()));
    settings.insert("train".into(), json!(trainer.config()));
    settings.insert("resumed_at".into(), json!(trainer.update_count()));

    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut s = a.out.clone().into_os_string();
        s.push(".log.jsonl");
        PathBuf::from(s)
    });
    let mut log = TrainLog::default();
    let outcome = trainer.run(&train_data, holdout.as_ref(), &mut log);
    write_file(&log_path, log.to_jsonl())?;
    match outcome {
        Ok(()) => save_checkpoint(&trainer.checkpoint(), &a.out)?,
        Err(HeadError::DivergedTraining {
            update,
            last_finite,
        }) => {
            save_checkpoint(&last_finite, &a.out)?;
            return Err(HeadError::DivergedTraining {
                update,
                last_finite,
            }
            .into());
        }
        Err(e) => return Err(e.into()),
    }

    if let Some(last) = log.entries.last() {
        match last.holdout_pairwise_accuracy {
            Some(acc) => println!(
                "update {} loss {:.6} holdout pairwise accuracy {:.4}",
                last.update, last.mean_loss, acc
            ),
            None => println!("update {} loss {:.6}", last.update, last.mean_loss),
        }
    }
    let mut inputs: Vec<&Path> = vec![&a.pairs];
    inputs.extend(paths(&a.embeddings));
    inputs.extend(a.holdout_pairs.as_deref());
    inputs.extend(a.resume.as_deref());
    write_stamps("train", &settings, &inputs, &[&a.out, &log_path])
}

pub fn score(cfg: Cfg, a: ScoreArgs) -> Result<(), CliError> {
    check_inputs([a.checkpoint.as_path()].into_iter().chain(paths(&a.shards)))?;
    let r = Resolver::new(cfg, "score")?;
    let head = load_checkpoint(&a.checkpoint)?.head()?;
    let provenance = ScoreProvenance {
        scorer: "reward-head".into(),
        checkpoint_sha256: Some(
            file_sha256_hex(&a.checkpoint).map_err(|e| CliError::io(&a.checkpoint, e))?,
        ),
    };
    let table = score_corpus(&head, &a.shards, provenance)?;
    table.write(&a.out)?;
    let mut outputs: Vec<&Path> = vec![&a.out];
    if let Some(t) = &a.text_out {
        let mut w = create(t)?;
        table.write_text(&mut w)?;
        w.flush().map_err(|e| CliError::io(t, e))?;
        outputs.push(t);
    }
    println!("scored {} pairs", table.len());
    let mut inputs: Vec<&Path> = vec![&a.checkpoint];
    inputs.extend(paths(&a.shards));
    write_stamps("score", &r.resolved, &inputs, &outputs)
}

pub fn compress(cfg: Cfg, a: CompressArgs) -> Result<(), CliError> {
    check_inputs([a.scores.as_path()])?;
    let mut r = Resolver::new(cfg, "compress")?;
    let Some(ratio) = r.get_opt::<String>("keep_ratio", a.keep_ratio)? else {
        return Err(CliError::Usage("--keep-ratio is required".into()));
    };
    let ratio: KeepRatio = ratio.parse()?;
    let approximate = r.get_opt("approximate_sample", a.approximate_sample)?;
    let table = ScoreTable::read(&a.scores)?;
    let manifest = match approximate {
        Some(n) => {
            let seed = r.get("seed", a.seed, 0)?;
            select_top_approximate(&table, ratio, n, seed)?
        }
        None => select_top(&table, ratio)?,
    };
    write_file(&a.out, manifest.to_text())?;
    println!("kept {} of {}", manifest.kept_count, manifest.input_count);
    write_stamps("compress", &r.resolved, &[&a.scores], &[&a.out])
}

pub fn apply(cfg: Cfg, a: ApplyArgs) -> Result<(), CliError> {
    check_inputs([a.manifest.as_path(), a.listing.as_path()])?;
    let r = Resolver::new(cfg, "apply")?;
    let manifest = CompressedManifest::parse(open(&a.manifest)?)?;
    let mut out = create(&a.out)?;
    let written = apply_manifest(&manifest.selected, open(&a.listing)?, &mut out)
        .and_then(|n| out.flush().map(|_| n).map_err(Into::into));
    let written = match written {
        Ok(n) => n,
        Err(e) => {
            drop(out);
            let _ = std::fs::remove_file(&a.out);
            return Err(e.into());
        }
    };
    println!("wrote {written} listing lines");
    write_stamps("apply", &r.resolved, &[&a.manifest, &a.listing], &[&a.out])
}

pub fn eval_preference(cfg: Cfg, a: EvalArgs) -> Result<(), CliError> {
    check_inputs(
        [a.store.as_path()]
            .into_iter()
            .chain(a.checkpoint.as_deref())
            .chain(paths(&a.embeddings))
            .chain(paths(&a.image_embeddings))
            .chain(paths(&a.text_embeddings)),
    )?;
    let mut r = Resolver::new(cfg, "eval-preference")?;
    let opts = EvalOptions {
        strict_best: r.get("strict_best", a.strict_best, false)?,
    };
    let data = load_store(&a.store)?;
    let mut inputs: Vec<&Path> = vec![&a.store];
    let (scorer, scores) = match &a.checkpoint {
        Some(ck) => {
            let head = load_checkpoint(ck)?.head()?;
            let table = EmbeddingTable::load(&a.embeddings)?;
            let sha = file_sha256_hex(ck).map_err(|e| CliError::io(ck, e))?;
            inputs.push(ck);
            inputs.extend(paths(&a.embeddings));
            (
                format!("reward-head:{}", &sha[..16]),
                reward_head_scores(&head, &data, &table)?,
            )
        }
        None => {
            let images = EmbeddingTable::load(&a.image_embeddings)?;
            let texts = EmbeddingTable::load(&a.text_embeddings)?;
            inputs.extend(paths(&a.image_embeddings));
            inputs.extend(paths(&a.text_embeddings));
            ("cosine".to_string(), cosine_scores(&data, &images, &texts)?)
        }
    };
    let report = evaluate_preferences(
        &data,
        &scorer,
        |image, caption| scores.get(&(image.to_string(), caption.to_string())).copied(),
        opts,
    )?;
    let text = report.to_text();
    write_file(&a.out, &text)?;
    let mut outputs: Vec<&Path> = vec![&a.out];
    if let Some(s) = &a.summary_out {
        let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
        json.push('\n');
        write_file(s, json)?;
        outputs.push(s);
    }
    print!("{text}");
    write_stamps("eval-preference", &r.resolved, &inputs, &outputs)
}

pub fn stats(cfg: Cfg, a: StatsArgs) -> Result<(), CliError> {
    check_inputs([a.scores.as_path()])?;
    let mut r = Resolver::new(cfg, "stats")?;
    let List(levels) = r.get("levels", a.levels, List(STANDARD_QUANTILES.to_vec()))?;
    let table = ScoreTable::read(&a.scores)?;
    let scores: Vec<f64> = table.iter().map(|(_, s)| s).collect();
    let stats = score_stats(&scores, &levels)?;
    let text = stats.to_text();
    write_file(&a.out, &text)?;
    print!("{text}");
    write_stamps("stats", &r.resolved, &[&a.scores], &[&a.out])
}

pub fn serve(cfg: Cfg, a: ServeArgs) -> Result<(), CliError> {
    let mut r = Resolver::new(cfg, "serve")?;
    let d = ServiceConfig::default();
    let config = ServiceConfig {
        bind: r.get("bind", a.bind, d.bind)?,
        port: r.get("port", a.port, d.port)?,
        store_path: a.store,
        lease_ttl_secs: r.get("lease_ttl_secs", a.lease_ttl_secs, d.lease_ttl_secs)?,
        replication: r.get("replication", a.replication, d.replication)?,
        shuffle_seed: r.get("shuffle_seed", a.shuffle_seed, d.shuffle_seed)?,
        labelers: r.get("labelers", a.labelers, List(d.labelers))?.0,
        ui_dir: r.get_opt("ui_dir", a.ui_dir)?,
    };
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::io(Path::new("<runtime>"), e))?;
    rt.block_on(sift_annotate::serve(config))?;
    Ok(())
}

pub fn demo(cfg: Cfg, a: DemoArgs) -> Result<(), CliError> {
    let mut r = Resolver::new(cfg, "demo")?;
    let dp = PreferenceSpec::default();
    let dc = CorpusSpec::default();
    let seed = r.get("seed", a.seed, dp.seed)?;
    let dimension = r.get("dimension", a.dimension, dp.dimension)?;
    let spec = PreferenceSpec {
        images: r.get("images", a.images, dp.images)?,
        captions_per_image: r.get("captions_per_image", a.captions_per_image, dp.captions_per_image)?,
        dimension,
        margin: r.get("margin", a.margin, dp.margin)?,
        quality_spread: r.get("quality_spread", a.quality_spread, dp.quality_spread)?,
        seed,
        random_labels: r.get("random_labels", a.random_labels, dp.random_labels)?,
    };
    let corpus_spec = CorpusSpec {
        pairs: r.get("corpus_pairs", a.corpus_pairs, dc.pairs)?,
        dimension,
        shift: r.get("shift", a.shift, dc.shift)?,
        seed,
    };
    if spec.images == 0 || corpus_spec.pairs == 0 || dimension == 0 {
        return Err(CliError::Usage(
            "images, corpus pairs and dimension must be positive".into(),
        ));
    }
    if !(2..=16).contains(&spec.captions_per_image) {
        return Err(CliError::Usage("captions per image must be within 2..=16".into()));
    }
    if !(spec.margin.is_finite() && spec.margin >= 0.0) {
        return Err(CliError::Usage("margin must be finite and non-negative".into()));
    }
    if !(spec.quality_spread.is_finite() && spec.quality_spread >= 0.0) {
        return Err(CliError::Usage("quality spread must be finite and non-negative".into()));
    }

    let dir = &a.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let store_path = dir.join("store.log");
    let captions_path = dir.join("captions.emb");
    let corpus_path = dir.join("corpus.emb");
    let listing_path = dir.join("corpus.tsv");

    let prefs = synth::preferences(&spec);
    export_store(&prefs.store, &store_path)?;
    write_shard(&prefs.embeddings, &captions_path, dimension)?;

    let corpus = synth::mixed_corpus(&corpus_spec);
    write_shard(&corpus.records, &corpus_path, dimension)?;
    let mut listing = create(&listing_path)?;
    for (rec, aligned) in corpus.records.iter().zip(&corpus.aligned) {
        let label = if *aligned { "aligned" } else { "corrupted" };
        writeln!(listing, "{}\t{label}", rec.key).map_err(|e| CliError::io(&listing_path, e))?;
    }
    listing.flush().map_err(|e| CliError::io(&listing_path, e))?;

    println!(
        "{} images, {} records, {} corpus pairs in {}",
        spec.images,
        prefs.store.record_count(),
        corpus_spec.pairs,
        dir.display()
    );
    write_stamps(
        "demo",
        &r.resolved,
        &[],
        &[&store_path, &captions_path, &corpus_path, &listing_path],
    )
}
