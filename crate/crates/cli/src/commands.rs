//! Subcommand implementations. Each returns `true` when every document succeeded.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::json;
use writer_retrieval::codebook::Codebook;
use writer_retrieval::container::{write_atomic, TensorContainer};
use writer_retrieval::encoder::PcaModel;
use writer_retrieval::preproc::foreground_fraction;
use writer_retrieval::synthetic::{generate, SyntheticSpec};
use writer_retrieval::vit::{VitConfig, VitWeights};

use crate::config::PipelineConfig;
use crate::manifest::{Entry, Manifest, Split};
use crate::pipeline::{
    descriptors_from_container, descriptors_to_container, evaluate_descriptors, load_document, metrics_csv, Failures,
    RunDir, Session,
};

fn report(failed: &Failures) -> bool {
    for (doc, reason) in failed {
        eprintln!("failed: {doc}: {reason}");
    }
    failed.is_empty()
}

fn config_record(cfg: &PipelineConfig) -> serde_json::Value {
    let map: serde_json::Map<String, serde_json::Value> = cfg
        .to_text()
        .lines()
        .filter_map(|l| l.split_once(" = "))
        .map(|(k, v)| (k.to_string(), json!(v)))
        .collect();
    serde_json::Value::Object(map)
}

pub fn binarize(run: &RunDir, manifest: &Manifest, cfg: &PipelineConfig, split: Option<Split>) -> Result<bool> {
    cfg.validate()?;
    let out_dir = run.binarized();
    let mut out = Manifest::default();
    let mut failed = Failures::new();
    for e in manifest.entries.iter().filter(|e| split.is_none_or(|s| e.split == s)) {
        let result = load_document(&e.path, cfg).and_then(|img| {
            let path = out_dir.join(format!("{}.pbm", e.doc_id.replace(['/', '\\'], "_")));
            img.write_pbm(&path)?;
            log::info!("{}: foreground {:.4}", e.doc_id, foreground_fraction(&img)?);
            Ok(path)
        });
        match result {
            Ok(path) => out.entries.push(Entry { path, ..e.clone() }),
            Err(err) => {
                log::error!("{}: {err:#}", e.doc_id);
                failed.push((e.doc_id.clone(), format!("{err:#}")));
            }
        }
    }
    let manifest_path = out_dir.join("manifest.jsonl");
    out.save(&manifest_path)?;
    println!("wrote {} binarized documents; manifest {}", out.entries.len(), manifest_path.display());
    Ok(report(&failed))
}

fn read_keyed(path: &Path, key: &str) -> Option<TensorContainer> {
    TensorContainer::read(path).ok().filter(|c| c.attr("key") == Some(key))
}

/// Fits (or reuses) the codebook and returns it with its key.
fn ensure_codebook(session: &Session, force: bool) -> Result<(Codebook, String, Failures)> {
    let cfg = &session.cfg;
    let key = session.codebook_key(cfg);
    let path = session.run.codebook();
    if !force {
        if let Some(c) = read_keyed(&path, &key) {
            log::info!("codebook is up to date ({})", path.display());
            return Ok((Codebook::from_container(&c)?, key, Failures::new()));
        }
    }
    let (codebook, failed) = session.fit_codebook(cfg)?;
    let mut c = codebook.to_container(&[
        ("key", key.clone()),
        ("seed", cfg.kmeans_seed.to_string()),
        ("train_manifest", session.manifest.hash(Split::Train)),
    ])?;
    c.set_attr("t_fg", cfg.t_fg.to_string());
    c.write(&path)?;
    session.run.record(
        "codebook",
        json!({ "key": key, "clusters": codebook.clusters(), "dim": codebook.dim(), "config": config_record(cfg) }),
    )?;
    Ok((codebook, key, failed))
}

pub fn codebook(session: &Session, force: bool) -> Result<bool> {
    let (codebook, _, failed) = ensure_codebook(session, force)?;
    println!(
        "codebook: {} clusters x {} dims -> {}",
        codebook.clusters(),
        codebook.dim(),
        session.run.codebook().display()
    );
    Ok(report(&failed))
}

fn load_codebook(session: &Session) -> Result<Option<(Codebook, String)>> {
    if !Session::needs_codebook(&session.cfg) {
        return Ok(None);
    }
    let path = session.run.codebook();
    let c = TensorContainer::read(&path)
        .with_context(|| format!("no codebook at {}; run `wretrieve codebook` first", path.display()))?;
    let key = c.attr("key").unwrap_or_default().to_string();
    if key != session.codebook_key(&session.cfg) {
        log::warn!("{} was built with different settings than the current config", path.display());
    }
    Ok(Some((Codebook::from_container(&c)?, key)))
}

pub fn encode(session: &Session, split: Split, refit_pca: bool) -> Result<bool> {
    let cfg = &session.cfg;
    let codebook = load_codebook(session)?;
    let cb_key = codebook.as_ref().map(|(_, k)| k.clone()).unwrap_or_else(|| session.codebook_key(cfg));
    let codebook = codebook.map(|(c, _)| c);
    let pca_key = session.pca_key(cfg, &cb_key);
    let pca_path = session.run.pca();
    let mut failed = Failures::new();
    let pca = match read_keyed(&pca_path, &pca_key).filter(|_| !refit_pca) {
        Some(c) => PcaModel::from_container(&c)?,
        None => {
            let (pca, f) = session.fit_pca(codebook.as_ref(), cfg)?;
            failed.extend(f);
            let mut c = pca.to_container()?;
            c.set_attr("key", pca_key.clone());
            c.write(&pca_path)?;
            session.run.record("pca", json!({ "key": pca_key, "dim": pca.output_dim(), "input_dim": pca.input_dim() }))?;
            pca
        }
    };
    let (descriptors, f) = session.encode_split(split, codebook.as_ref(), &pca, cfg)?;
    failed.extend(f);
    let key = crate::pipeline::sha256_hex(&[
        pca_key.as_bytes(),
        session.manifest.hash(split).as_bytes(),
        cfg.s_eval.to_string().as_bytes(),
        format!("{:?}", cfg.blank).as_bytes(),
    ]);
    let path = session.run.descriptors(split);
    let written = descriptors_to_container(&descriptors, &key)?.write(&path)?;
    session.run.record(
        &format!("encode_{split}"),
        json!({ "key": key, "documents": descriptors.len(), "failed": failed.len(), "config": config_record(cfg) }),
    )?;
    println!(
        "encoded {} {split} documents -> {}{}",
        descriptors.len(),
        path.display(),
        if written { "" } else { " (unchanged)" }
    );
    Ok(report(&failed))
}

pub fn evaluate(run: &RunDir, manifest: &Manifest, cfg: &PipelineConfig, split: Split, out: Option<&Path>) -> Result<bool> {
    cfg.validate()?;
    let path = run.descriptors(split);
    let c = TensorContainer::read(&path)
        .with_context(|| format!("no descriptors at {}; run `wretrieve encode` first", path.display()))?;
    let descriptors = descriptors_from_container(&c)?;
    let (corpus, eval) = evaluate_descriptors(&descriptors, manifest, cfg)?;
    let csv_path = out.map(Path::to_path_buf).unwrap_or_else(|| run.metrics(split));
    write_atomic(&csv_path, &metrics_csv(&corpus, &eval)?)?;
    run.record(
        &format!("evaluate_{split}"),
        json!({ "map": eval.map, "top1": eval.top1, "queries": eval.per_query.len(), "config": config_record(cfg) }),
    )?;
    println!("mAP={:.4} top1={:.4}", eval.map, eval.top1);
    Ok(true)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    TFg,
    Stride,
    Clusters,
    Dim,
}

impl std::str::FromStr for SweepParam {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "t_fg" => Ok(Self::TFg),
            "stride" | "s_eval" => Ok(Self::Stride),
            "clusters" => Ok(Self::Clusters),
            "dim" => Ok(Self::Dim),
            other => bail!("cannot sweep `{other}` (t_fg, stride, clusters, dim)"),
        }
    }
}

impl SweepParam {
    fn key(self) -> &'static str {
        match self {
            Self::TFg => "t_fg",
            Self::Stride => "s_eval",
            Self::Clusters => "clusters",
            Self::Dim => "dim",
        }
    }
}

/// One evaluation per value. Cached tokens are reused; only a stride change runs the
/// model again. A failing value yields an `error` row and the sweep continues.
pub fn sweep(session: &Session, param: SweepParam, values: &[String], split: Split, out: Option<&Path>) -> Result<bool> {
    let mut codebooks: HashMap<String, Codebook> = HashMap::new();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["param", "value", "map", "top1", "status", "message"])?;
    let mut all_ok = true;
    for value in values {
        let mut cfg = session.cfg.clone();
        let result = (|| -> Result<(f64, f64, usize)> {
            cfg.set(param.key(), value)?;
            cfg.validate()?;
            let cb_key = session.codebook_key(&cfg);
            let codebook = if Session::needs_codebook(&cfg) {
                if !codebooks.contains_key(&cb_key) {
                    let (cb, failed) = session.fit_codebook(&cfg)?;
                    if !failed.is_empty() {
                        bail!("{} training documents failed", failed.len());
                    }
                    codebooks.insert(cb_key.clone(), cb);
                }
                codebooks.get(&cb_key)
            } else {
                None
            };
            let (pca, _) = session.fit_pca(codebook, &cfg)?;
            let (descriptors, failed) = session.encode_split(split, codebook, &pca, &cfg)?;
            let (_, eval) = evaluate_descriptors(&descriptors, &session.manifest, &cfg)?;
            Ok((eval.map, eval.top1, failed.len()))
        })();
        match result {
            Ok((map, top1, failed)) => {
                let message = if failed > 0 { format!("{failed} documents failed") } else { String::new() };
                all_ok &= failed == 0;
                println!("{}={value} mAP={map:.4} top1={top1:.4}", param.key());
                w.write_record([param.key(), value, &format!("{map:.6}"), &format!("{top1:.6}"), "ok", &message])?;
            }
            Err(e) => {
                log::error!("{}={value}: {e:#}", param.key());
                println!("{}={value} error: {e:#}", param.key());
                w.write_record([param.key(), value, "", "", "error", &format!("{e:#}")])?;
            }
        }
    }
    let path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| session.run.root.join(format!("sweep_{}.csv", param.key())));
    write_atomic(&path, &w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?)?;
    println!("sweep results -> {}", path.display());
    Ok(all_ok)
}

pub struct WeightsSpec {
    pub vit: VitConfig,
    pub seed: u64,
    pub std: f32,
}

/// Writes randomly initialized weights; real checkpoints use the same container layout.
pub fn init_weights(spec: &WeightsSpec, out: &Path) -> Result<bool> {
    let weights = VitWeights::random(&spec.vit, spec.seed, spec.std)?;
    let mut c = weights.to_container(&spec.vit)?;
    c.set_attr("init", format!("random seed={} std={}", spec.seed, spec.std));
    c.write(out)?;
    println!("weights -> {}", out.display());
    Ok(true)
}

pub struct SynthSpec {
    pub train_writers: usize,
    pub train_pages: usize,
    pub test_writers: usize,
    pub test_pages: usize,
    pub width: usize,
    pub height: usize,
    pub flip_fraction: f64,
    pub seed: u64,
}

/// Generates a synthetic corpus of PBM pages plus `manifest.jsonl` in `dir`.
pub fn synth(spec: &SynthSpec, dir: &Path) -> Result<bool> {
    let mut manifest = Manifest::default();
    let splits = [
        (Split::Train, spec.train_writers, spec.train_pages, spec.seed, "train"),
        (Split::Test, spec.test_writers, spec.test_pages, spec.seed.wrapping_add(1), "test"),
    ];
    for (split, writers, pages, seed, prefix) in splits {
        if writers == 0 || pages == 0 {
            continue;
        }
        let s = SyntheticSpec {
            writers,
            pages_per_writer: pages,
            width: spec.width,
            height: spec.height,
            flip_fraction: spec.flip_fraction,
            seed,
        };
        for page in generate(&s, prefix)? {
            let path = PathBuf::from(format!("{}.pbm", page.doc_id));
            page.image.write_pbm(&dir.join(&path))?;
            manifest.entries.push(Entry { path, doc_id: page.doc_id, writer_id: page.writer_id, split });
        }
    }
    let path = dir.join("manifest.jsonl");
    manifest.save(&path)?;
    println!("{} pages -> {}", manifest.entries.len(), path.display());
    Ok(true)
}

pub fn import(dir: &Path, split: Split, out: &Path, append: bool) -> Result<bool> {
    let mut manifest = if append && out.exists() { Manifest::load(out)? } else { Manifest::default() };
    let imported = Manifest::import_dir(dir, split)?;
    let n = imported.entries.len();
    manifest.entries.extend(imported.entries);
    let text = manifest.to_jsonl();
    Manifest::parse(&text, Path::new(""))?;
    write_atomic(out, text.as_bytes())?;
    println!("imported {n} documents -> {}", out.display());
    Ok(true)
}
