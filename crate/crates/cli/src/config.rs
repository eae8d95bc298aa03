//! Pipeline configuration as `key = value` text.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use writer_retrieval::encoder::Aggregation;
use writer_retrieval::retrieval::SingletonPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rerank {
    None,
    Krnn,
    Graph,
}

impl FromStr for Rerank {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "krnn" => Ok(Self::Krnn),
            "graph" => Ok(Self::Graph),
            other => bail!("unknown rerank method `{other}` (none, krnn, graph)"),
        }
    }
}

impl Rerank {
    fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Krnn => "krnn",
            Self::Graph => "graph",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlankPolicy {
    /// Abort encoding on a document without foreground tokens.
    Error,
    /// Substitute a zero descriptor and log a warning.
    Zero,
}

fn parse_aggregation(s: &str) -> Result<Aggregation> {
    match s {
        "vlad" => Ok(Aggregation::Vlad),
        "fg-sum" => Ok(Aggregation::ForegroundSum),
        "cls-sum" => Ok(Aggregation::ClsSum),
        other => bail!("unknown aggregation `{other}` (vlad, fg-sum, cls-sum)"),
    }
}

fn aggregation_name(a: Aggregation) -> &'static str {
    match a {
        Aggregation::Vlad => "vlad",
        Aggregation::ForegroundSum => "fg-sum",
        Aggregation::ClsSum => "cls-sum",
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub window_size: usize,
    pub s_eval: usize,
    pub codebook_stride: usize,
    pub t_fg: u32,
    pub min_window_fg: f64,
    pub clusters: usize,
    pub dim: usize,
    pub power: f64,
    pub pca_epsilon: f64,
    pub aggregation: Aggregation,
    pub sauvola_window: usize,
    pub sauvola_k: f64,
    pub sauvola_r: f64,
    pub already_binary: bool,
    pub invert: bool,
    pub kmeans_batch: usize,
    pub kmeans_epochs: usize,
    pub kmeans_seed: u64,
    pub rerank: Rerank,
    pub krnn_k: usize,
    pub graph_k1: usize,
    pub graph_k2: usize,
    pub graph_iterations: usize,
    pub singletons: SingletonPolicy,
    pub blank: BlankPolicy,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            window_size: 224,
            s_eval: 224,
            codebook_stride: 224,
            t_fg: 10,
            min_window_fg: 0.025,
            clusters: 100,
            dim: 384,
            power: 0.5,
            pca_epsilon: 1e-8,
            aggregation: Aggregation::Vlad,
            sauvola_window: 51,
            sauvola_k: 0.2,
            sauvola_r: 128.0,
            already_binary: false,
            invert: false,
            kmeans_batch: 10_000,
            kmeans_epochs: 10,
            kmeans_seed: 0,
            rerank: Rerank::None,
            krnn_k: 2,
            graph_k1: 4,
            graph_k2: 2,
            graph_iterations: 3,
            singletons: SingletonPolicy::Exclude,
            blank: BlankPolicy::Error,
        }
    }
}

impl PipelineConfig {
    /// `default` (stride 224, no reranking) or `best` (stride 56 with kRNN, k = 2).
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "best" => Ok(Self { s_eval: 56, rerank: Rerank::Krnn, ..Self::default() }),
            other => bail!("unknown preset `{other}` (default, best)"),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| anyhow!("invalid value `{v}` for `{key}`"))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "yes" | "1" => Ok(true),
                "false" | "no" | "0" => Ok(false),
                _ => bail!("invalid boolean `{v}` for `{key}`"),
            }
        }
        match key {
            "window_size" => self.window_size = p(key, value)?,
            "s_eval" => self.s_eval = p(key, value)?,
            "codebook_stride" => self.codebook_stride = p(key, value)?,
            "t_fg" => self.t_fg = p(key, value)?,
            "min_window_fg" => self.min_window_fg = p(key, value)?,
            "clusters" => self.clusters = p(key, value)?,
            "dim" => self.dim = p(key, value)?,
            "power" => self.power = p(key, value)?,
            "pca_epsilon" => self.pca_epsilon = p(key, value)?,
            "aggregation" => self.aggregation = parse_aggregation(value)?,
            "sauvola_window" => self.sauvola_window = p(key, value)?,
            "sauvola_k" => self.sauvola_k = p(key, value)?,
            "sauvola_r" => self.sauvola_r = p(key, value)?,
            "already_binary" => self.already_binary = flag(key, value)?,
            "invert" => self.invert = flag(key, value)?,
            "kmeans_batch" => self.kmeans_batch = p(key, value)?,
            "kmeans_epochs" => self.kmeans_epochs = p(key, value)?,
            "kmeans_seed" => self.kmeans_seed = p(key, value)?,
            "rerank" => self.rerank = value.parse()?,
            "krnn_k" => self.krnn_k = p(key, value)?,
            "graph_k1" => self.graph_k1 = p(key, value)?,
            "graph_k2" => self.graph_k2 = p(key, value)?,
            "graph_iterations" => self.graph_iterations = p(key, value)?,
            "singletons" => {
                self.singletons = match value {
                    "exclude" => SingletonPolicy::Exclude,
                    "zero" => SingletonPolicy::CountAsZero,
                    _ => bail!("invalid value `{value}` for `singletons` (exclude, zero)"),
                }
            }
            "blank" => {
                self.blank = match value {
                    "error" => BlankPolicy::Error,
                    "zero" => BlankPolicy::Zero,
                    _ => bail!("invalid value `{value}` for `blank` (error, zero)"),
                }
            }
            other => bail!("unknown config key `{other}`"),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| anyhow!("line {}: expected `key = value`", n + 1))?;
            self.set(k.trim(), v.trim()).with_context(|| format!("line {}", n + 1))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let singletons = match self.singletons {
            SingletonPolicy::Exclude => "exclude",
            SingletonPolicy::CountAsZero => "zero",
        };
        let blank = match self.blank {
            BlankPolicy::Error => "error",
            BlankPolicy::Zero => "zero",
        };
        let pairs: Vec<(&str, String)> = vec![
            ("window_size", self.window_size.to_string()),
            ("s_eval", self.s_eval.to_string()),
            ("codebook_stride", self.codebook_stride.to_string()),
            ("t_fg", self.t_fg.to_string()),
            ("min_window_fg", self.min_window_fg.to_string()),
            ("clusters", self.clusters.to_string()),
            ("dim", self.dim.to_string()),
            ("power", self.power.to_string()),
            ("pca_epsilon", format!("{:e}", self.pca_epsilon)),
            ("aggregation", aggregation_name(self.aggregation).to_string()),
            ("sauvola_window", self.sauvola_window.to_string()),
            ("sauvola_k", self.sauvola_k.to_string()),
            ("sauvola_r", self.sauvola_r.to_string()),
            ("already_binary", self.already_binary.to_string()),
            ("invert", self.invert.to_string()),
            ("kmeans_batch", self.kmeans_batch.to_string()),
            ("kmeans_epochs", self.kmeans_epochs.to_string()),
            ("kmeans_seed", self.kmeans_seed.to_string()),
            ("rerank", self.rerank.name().to_string()),
            ("krnn_k", self.krnn_k.to_string()),
            ("graph_k1", self.graph_k1.to_string()),
            ("graph_k2", self.graph_k2.to_string()),
            ("graph_iterations", self.graph_iterations.to_string()),
            ("singletons", singletons.to_string()),
            ("blank", blank.to_string()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Checks values against the preconditions of the stages they feed.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("window_size", self.window_size),
            ("s_eval", self.s_eval),
            ("codebook_stride", self.codebook_stride),
            ("clusters", self.clusters),
            ("dim", self.dim),
            ("kmeans_batch", self.kmeans_batch),
            ("kmeans_epochs", self.kmeans_epochs),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            bail!("`{k}` must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.min_window_fg) {
            bail!("`min_window_fg` must lie in [0, 1]");
        }
        if !(self.power > 0.0) {
            bail!("`power` must be positive");
        }
        if !(self.pca_epsilon >= 0.0) {
            bail!("`pca_epsilon` must be non-negative");
        }
        if self.graph_k2 > self.graph_k1 {
            bail!("`graph_k1` must be >= `graph_k2`");
        }
        writer_retrieval::preproc::SauvolaParams { window: self.sauvola_window, k: self.sauvola_k, r: self.sauvola_r }
            .validate()?;
        Ok(())
    }
}
