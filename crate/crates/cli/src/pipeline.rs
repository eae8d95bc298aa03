//! Stage orchestration over a run directory with content-keyed caching.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use ndarray::Array2;
use sha2::{Digest, Sha256};
use writer_retrieval::codebook::{minibatch_kmeans, stack_features, Codebook, KMeansParams};
use writer_retrieval::container::{write_atomic, TensorContainer};
use writer_retrieval::encoder::{aggregate, pca_fit, Aggregation, EncodeParams, PageDescriptor, PcaModel};
use writer_retrieval::features::{extract_document_tokens, DocumentTokens, ExtractParams};
use writer_retrieval::preproc::{load_binary, load_gray, sauvola_binarize, BinaryImage, SauvolaParams};
use writer_retrieval::retrieval::{evaluate, graph_rerank, krnn_rerank, rank_all, Corpus, Evaluation};
use writer_retrieval::vit::{Vit, VitConfig, VitWeights};
use writer_retrieval::Error as CoreError;

use crate::config::{BlankPolicy, PipelineConfig, Rerank};
use crate::manifest::{Entry, Manifest, Split};

/// Layout of a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

fn file_stem_for(doc_id: &str) -> String {
    doc_id.chars().map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' }).collect()
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn features(&self, doc_id: &str) -> PathBuf {
        self.root.join("features").join(format!("{}.wrv", file_stem_for(doc_id)))
    }

    pub fn descriptors(&self, split: Split) -> PathBuf {
        self.root.join("descriptors").join(format!("{split}.wrv"))
    }

    pub fn codebook(&self) -> PathBuf {
        self.root.join("codebook.wrv")
    }

    pub fn pca(&self) -> PathBuf {
        self.root.join("pca.wrv")
    }

    pub fn weights(&self) -> PathBuf {
        self.root.join("weights.wrv")
    }

    pub fn binarized(&self) -> PathBuf {
        self.root.join("binarized")
    }

    pub fn metrics(&self, split: Split) -> PathBuf {
        self.root.join(format!("metrics_{split}.csv"))
    }

    pub fn run_json(&self) -> PathBuf {
        self.root.join("run.json")
    }

    /// Merges `record` under `stage` into `run.json`.
    pub fn record(&self, stage: &str, record: serde_json::Value) -> Result<()> {
        let path = self.run_json();
        let mut doc: BTreeMap<String, serde_json::Value> = match std::fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
            Err(_) => BTreeMap::new(),
        };
        doc.insert(stage.to_string(), record);
        let text = serde_json::to_string_pretty(&doc)? + "\n";
        write_atomic(&path, text.as_bytes())?;
        Ok(())
    }
}

pub fn sha256_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&[&bytes]))
}

/// Reads a document and binarizes it according to `cfg`.
pub fn load_document(path: &Path, cfg: &PipelineConfig) -> Result<BinaryImage> {
    let is_pbm = path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("pbm"));
    let img = if cfg.already_binary || is_pbm {
        load_binary(path)?
    } else {
        let params = SauvolaParams { window: cfg.sauvola_window, k: cfg.sauvola_k, r: cfg.sauvola_r };
        sauvola_binarize(&load_gray(path)?, &params)?
    };
    Ok(if cfg.invert { img.invert() } else { img })
}

pub fn load_vit(path: &Path) -> Result<Vit> {
    let c = TensorContainer::read(path).with_context(|| format!("loading weights {}", path.display()))?;
    let cfg = VitConfig::from_attrs(&c)?;
    Ok(Vit::new(cfg, VitWeights::from_container(&c, &cfg)?)?)
}

/// Documents that failed to load or encode, with the reason.
pub type Failures = Vec<(String, String)>;

pub struct Session {
    pub run: RunDir,
    pub cfg: PipelineConfig,
    pub manifest: Manifest,
    vit: Vit,
    weights_hash: String,
}

impl Session {
    pub fn new(run: RunDir, cfg: PipelineConfig, manifest: Manifest, weights: &Path) -> Result<Self> {
        cfg.validate()?;
        let vit = load_vit(weights)?;
        if vit.config().input_size != cfg.window_size {
            bail!(
                "window_size = {} but the model in {} takes {} px inputs",
                cfg.window_size,
                weights.display(),
                vit.config().input_size
            );
        }
        Ok(Self { run, cfg, manifest, vit, weights_hash: hash_file(weights)? })
    }

    fn extract_params(&self, cfg: &PipelineConfig, stride: usize) -> ExtractParams {
        ExtractParams { window: cfg.window_size, stride, min_window_fg: cfg.min_window_fg }
    }

    fn tokens_key(&self, entry: &Entry, cfg: &PipelineConfig, stride: usize) -> Result<String> {
        let image = hash_file(&entry.path)?;
        let settings = format!(
            "{}|{}|{}|{}|{}|{}|{}|{}|{}",
            cfg.window_size,
            stride,
            cfg.min_window_fg,
            cfg.already_binary,
            cfg.invert,
            cfg.sauvola_window,
            cfg.sauvola_k,
            cfg.sauvola_r,
            entry.doc_id
        );
        Ok(sha256_hex(&[image.as_bytes(), self.weights_hash.as_bytes(), settings.as_bytes()]))
    }

    /// Tokens for one document, served from the feature cache when its key matches.
    pub fn tokens(&self, entry: &Entry, cfg: &PipelineConfig, stride: usize) -> Result<DocumentTokens> {
        let key = self.tokens_key(entry, cfg, stride)?;
        let path = self.run.features(&entry.doc_id);
        if let Ok(c) = TensorContainer::read(&path) {
            if c.attr("key") == Some(key.as_str()) {
                return Ok(DocumentTokens::from_container(&c)?);
            }
        }
        let doc = load_document(&entry.path, cfg)?;
        let tokens = extract_document_tokens(&entry.doc_id, &doc, &self.vit, &self.extract_params(cfg, stride))?;
        let mut c = tokens.to_container()?;
        c.set_attr("key", key);
        c.set_attr("stride", stride.to_string());
        c.write(&path)?;
        log::debug!("{}: {} windows", entry.doc_id, tokens.num_windows());
        Ok(tokens)
    }

    fn tokens_for(&self, entries: &[&Entry], cfg: &PipelineConfig, stride: usize) -> (Vec<DocumentTokens>, Failures) {
        let mut ok = Vec::new();
        let mut failed = Vec::new();
        for (i, e) in entries.iter().enumerate() {
            match self.tokens(e, cfg, stride) {
                Ok(t) => ok.push(t),
                Err(err) => {
                    log::error!("{}: {err:#}", e.doc_id);
                    failed.push((e.doc_id.clone(), format!("{err:#}")));
                }
            }
            if (i + 1) % 50 == 0 {
                log::info!("tokens: {}/{} documents", i + 1, entries.len());
            }
        }
        (ok, failed)
    }

    pub fn codebook_key(&self, cfg: &PipelineConfig) -> String {
        let settings = format!(
            "{}|{}|{}|{}|{}|{}|{}|{}|{}|{}|{}|{}",
            cfg.window_size,
            cfg.codebook_stride,
            cfg.min_window_fg,
            cfg.already_binary,
            cfg.invert,
            cfg.sauvola_window,
            cfg.sauvola_k,
            cfg.sauvola_r,
            cfg.t_fg,
            cfg.clusters,
            cfg.kmeans_batch,
            cfg.kmeans_epochs,
        );
        let seed = cfg.kmeans_seed.to_string();
        sha256_hex(&[
            self.manifest.hash(Split::Train).as_bytes(),
            self.weights_hash.as_bytes(),
            settings.as_bytes(),
            seed.as_bytes(),
        ])
    }

    /// Clusters the foreground tokens of the training split.
    pub fn fit_codebook(&self, cfg: &PipelineConfig) -> Result<(Codebook, Failures)> {
        let train = self.manifest.split(Split::Train);
        if train.is_empty() {
            bail!("the manifest has no training documents");
        }
        let (tokens, failed) = self.tokens_for(&train, cfg, cfg.codebook_stride);
        let fg: Vec<Array2<f64>> = tokens.iter().map(|t| t.foreground(cfg.t_fg)).collect();
        let features = stack_features(fg.iter())?;
        log::info!("codebook: {} foreground tokens from {} documents", features.nrows(), tokens.len());
        let params = KMeansParams {
            clusters: cfg.clusters,
            batch_size: cfg.kmeans_batch,
            iterations: KMeansParams::iterations_for_epochs(features.nrows(), cfg.kmeans_batch, cfg.kmeans_epochs),
            seed: cfg.kmeans_seed,
        };
        Ok((minibatch_kmeans(features.view(), &params)?, failed))
    }

    fn encode_params(&self, cfg: &PipelineConfig, stride: usize) -> EncodeParams {
        EncodeParams {
            extract: self.extract_params(cfg, stride),
            t_fg: cfg.t_fg,
            power: cfg.power,
            aggregation: cfg.aggregation,
        }
    }

    /// Power/L2-normalized vectors of `entries` before PCA. Blank documents follow the
    /// blank policy; for `skip_blank` they are left out instead.
    fn aggregated(
        &self,
        entries: &[&Entry],
        codebook: Option<&Codebook>,
        cfg: &PipelineConfig,
        stride: usize,
        skip_blank: bool,
    ) -> Result<(Vec<(String, Option<ndarray::Array1<f64>>)>, Failures)> {
        let params = self.encode_params(cfg, stride);
        let (tokens, mut failed) = self.tokens_for(entries, cfg, stride);
        let mut out = Vec::new();
        for t in &tokens {
            match aggregate(t, codebook, &params) {
                Ok(v) => out.push((t.doc_id.clone(), Some(v))),
                Err(CoreError::NoForegroundTokens(_)) if skip_blank => {
                    log::warn!("{}: no foreground tokens, left out of PCA training", t.doc_id);
                }
                Err(e @ CoreError::NoForegroundTokens(_)) => match cfg.blank {
                    BlankPolicy::Zero => {
                        log::warn!("{}: no foreground tokens, using a zero descriptor", t.doc_id);
                        out.push((t.doc_id.clone(), None));
                    }
                    BlankPolicy::Error => {
                        log::error!("{}: {e}", t.doc_id);
                        failed.push((t.doc_id.clone(), e.to_string()));
                    }
                },
                Err(e) => return Err(e.into()),
            }
        }
        Ok((out, failed))
    }

    pub fn pca_key(&self, cfg: &PipelineConfig, codebook_key: &str) -> String {
        let settings = format!(
            "{}|{}|{}|{}|{:?}",
            cfg.dim,
            cfg.pca_epsilon,
            cfg.power,
            cfg.t_fg,
            cfg.aggregation
        );
        sha256_hex(&[codebook_key.as_bytes(), settings.as_bytes()])
    }

    /// Whitened PCA fitted on the training split's aggregated vectors.
    pub fn fit_pca(&self, codebook: Option<&Codebook>, cfg: &PipelineConfig) -> Result<(PcaModel, Failures)> {
        let train = self.manifest.split(Split::Train);
        let (rows, failed) = self.aggregated(&train, codebook, cfg, cfg.codebook_stride, true)?;
        let rows: Vec<ndarray::Array1<f64>> = rows.into_iter().filter_map(|(_, v)| v).collect();
        if rows.is_empty() {
            bail!("no training document produced a descriptor");
        }
        let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
        let data = ndarray::stack(ndarray::Axis(0), &views)?;
        log::info!("pca: {} training vectors of width {}", data.nrows(), data.ncols());
        Ok((pca_fit(data.view(), cfg.dim, cfg.pca_epsilon)?, failed))
    }

    /// Final descriptors of one split at the evaluation stride.
    pub fn encode_split(
        &self,
        split: Split,
        codebook: Option<&Codebook>,
        pca: &PcaModel,
        cfg: &PipelineConfig,
    ) -> Result<(Vec<PageDescriptor>, Failures)> {
        let entries = self.manifest.split(split);
        if entries.is_empty() {
            bail!("the manifest has no {split} documents");
        }
        let (rows, failed) = self.aggregated(&entries, codebook, cfg, cfg.s_eval, false)?;
        let descriptors = rows
            .into_iter()
            .map(|(doc_id, v)| {
                let values = match v {
                    Some(v) => pca.transform(v.view())?,
                    None => ndarray::Array1::zeros(pca.output_dim()),
                };
                Ok(PageDescriptor { doc_id, values })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((descriptors, failed))
    }

    pub fn needs_codebook(cfg: &PipelineConfig) -> bool {
        cfg.aggregation == Aggregation::Vlad
    }
}

pub fn descriptors_to_container(descriptors: &[PageDescriptor], key: &str) -> Result<TensorContainer> {
    let mut c = TensorContainer::new();
    c.set_attr("key", key);
    for d in descriptors {
        c.insert_f64(d.doc_id.clone(), &[d.values.len()], d.values.to_vec())?;
    }
    Ok(c)
}

pub fn descriptors_from_container(c: &TensorContainer) -> Result<Vec<PageDescriptor>> {
    c.names()
        .map(|name| {
            let (_, data) = c.f64(name)?;
            Ok(PageDescriptor { doc_id: name.to_string(), values: ndarray::Array1::from(data.to_vec()) })
        })
        .collect()
}

/// Labels descriptors with their writers, applies reranking and evaluates.
pub fn evaluate_descriptors(
    descriptors: &[PageDescriptor],
    manifest: &Manifest,
    cfg: &PipelineConfig,
) -> Result<(Corpus, Evaluation)> {
    let writers: BTreeMap<&str, &str> =
        manifest.entries.iter().map(|e| (e.doc_id.as_str(), e.writer_id.as_str())).collect();
    let labels = descriptors
        .iter()
        .map(|d| {
            writers
                .get(d.doc_id.as_str())
                .map(|w| w.to_string())
                .ok_or_else(|| anyhow!("descriptor `{}` is not in the manifest", d.doc_id))
        })
        .collect::<Result<Vec<_>>>()?;
    let corpus = Corpus::from_descriptors(descriptors, labels)?;
    let corpus = match cfg.rerank {
        Rerank::None => corpus,
        Rerank::Krnn => krnn_rerank(&corpus, cfg.krnn_k)?,
        Rerank::Graph => graph_rerank(&corpus, cfg.graph_k1, cfg.graph_k2, cfg.graph_iterations)?,
    };
    let rankings = rank_all(&corpus)?;
    let eval = evaluate(&rankings, &corpus.labels, cfg.singletons)?;
    Ok((corpus, eval))
}

/// Per-query rows followed by one summary row.
pub fn metrics_csv(corpus: &Corpus, eval: &Evaluation) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["kind", "doc_id", "writer_id", "average_precision", "top1"])?;
    for q in &eval.per_query {
        let ap = q.average_precision.map(|v| format!("{v:.6}")).unwrap_or_default();
        let top1 = if q.top1_correct { "1" } else { "0" };
        w.write_record(["query", &corpus.ids[q.query], &corpus.labels[q.query], &ap, top1])?;
    }
    w.write_record(["summary", "", "", &format!("{:.6}", eval.map), &format!("{:.6}", eval.top1)])?;
    w.into_inner().map_err(|e| anyhow!("{e}"))
}
