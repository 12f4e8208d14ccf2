//! Subtoken length statistics of a corpus under one or two vocabularies.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bpe::{tokenize_text, TokenizerConfig, Vocabulary};
use crate::model_io::write_atomic;

pub const DEFAULT_BUCKET_WIDTH: usize = 16;

/// Per-document length-ratio quantiles reported by [`compare_vocabularies`].
pub const RATIO_QUANTILES: [f64; 7] = [0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0];

#[derive(Debug, thiserror::Error)]
pub enum StatsError {
    #[error("no documents")]
    NoDocuments,
    #[error("bucket width must be positive")]
    ZeroBucketWidth,
    #[error("unknown report format {0:?} (expected csv, json or svg)")]
    UnknownFormat(String),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthDistribution {
    pub bucket_width: usize,
    pub count: usize,
    pub mean: f64,
    /// Lower middle value when `count` is even.
    pub median: f64,
    pub min: usize,
    pub max: usize,
    /// Bucket start → number of documents.
    pub histogram: BTreeMap<usize, usize>,
}

impl LengthDistribution {
    pub fn from_lengths(lengths: &[usize], bucket_width: usize) -> Result<Self, StatsError> {
        if bucket_width == 0 {
            return Err(StatsError::ZeroBucketWidth);
        }
        if lengths.is_empty() {
            return Err(StatsError::NoDocuments);
        }
        let mut sorted = lengths.to_vec();
        sorted.sort_unstable();
        let total: u64 = lengths.iter().map(|&l| l as u64).sum();
        let mut histogram = BTreeMap::new();
        for &l in lengths {
            *histogram.entry(l / bucket_width * bucket_width).or_insert(0) += 1;
        }
        Ok(Self {
            bucket_width,
            count: lengths.len(),
            mean: total as f64 / lengths.len() as f64,
            median: sorted[(sorted.len() - 1) / 2] as f64,
            min: sorted[0],
            max: sorted[sorted.len() - 1],
            histogram,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bucket_start,count\n");
        for (b, c) in &self.histogram {
            let _ = writeln!(out, "{b},{c}");
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable distribution") + "\n"
    }

    pub fn to_svg(&self) -> String {
        histogram_svg(&[("lengths", self)])
    }
}

/// Subtoken count of every document. Blank lines are not documents.
pub fn document_lengths<S: AsRef<str> + Sync>(
    corpus: &[S],
    vocab: &Vocabulary,
    tokenizer: &TokenizerConfig,
) -> Vec<usize> {
    corpus
        .par_iter()
        .filter(|line| !line.as_ref().trim().is_empty())
        .map(|line| tokenize_text(line.as_ref(), vocab, tokenizer).len())
        .collect()
}

pub fn sequence_length_stats<S: AsRef<str> + Sync>(
    corpus: &[S],
    vocab: &Vocabulary,
    tokenizer: &TokenizerConfig,
    bucket_width: usize,
) -> Result<LengthDistribution, StatsError> {
    LengthDistribution::from_lengths(&document_lengths(corpus, vocab, tokenizer), bucket_width)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioQuantile {
    pub q: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub dist_a: LengthDistribution,
    pub dist_b: LengthDistribution,
    /// `dist_a.mean / dist_b.mean`; above 1 means `b` segments more compactly.
    pub mean_ratio: f64,
    /// Quantiles of per-document `len_a / len_b`, nearest lower rank.
    pub ratio_quantiles: Vec<RatioQuantile>,
}

pub fn compare_vocabularies<S: AsRef<str> + Sync>(
    corpus: &[S],
    vocab_a: &Vocabulary,
    vocab_b: &Vocabulary,
    tokenizer: &TokenizerConfig,
    bucket_width: usize,
) -> Result<ComparisonReport, StatsError> {
    let la = document_lengths(corpus, vocab_a, tokenizer);
    let lb = document_lengths(corpus, vocab_b, tokenizer);
    let dist_a = LengthDistribution::from_lengths(&la, bucket_width)?;
    let dist_b = LengthDistribution::from_lengths(&lb, bucket_width)?;
    let mut ratios: Vec<f64> = la.iter().zip(&lb).map(|(&a, &b)| a as f64 / b as f64).collect();
    ratios.sort_by(f64::total_cmp);
    let ratio_quantiles = RATIO_QUANTILES
        .iter()
        .map(|&q| RatioQuantile {
            q,
            ratio: ratios[(q * (ratios.len() - 1) as f64).floor() as usize],
        })
        .collect();
    Ok(ComparisonReport {
        mean_ratio: dist_a.mean / dist_b.mean,
        dist_a,
        dist_b,
        ratio_quantiles,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
    Svg,
}

impl FromStr for ReportFormat {
    type Err = StatsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            "svg" => Ok(Self::Svg),
            other => Err(StatsError::UnknownFormat(other.to_string())),
        }
    }
}

impl ComparisonReport {
    /// One row per bucket occupied in either distribution.
    pub fn to_csv(&self) -> String {
        let mut buckets: Vec<usize> = self.dist_a.histogram.keys().chain(self.dist_b.histogram.keys()).copied().collect();
        buckets.sort_unstable();
        buckets.dedup();
        let mut out = String::from("bucket_start,count_a,count_b\n");
        for b in buckets {
            let ca = self.dist_a.histogram.get(&b).copied().unwrap_or(0);
            let cb = self.dist_b.histogram.get(&b).copied().unwrap_or(0);
            let _ = writeln!(out, "{b},{ca},{cb}");
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable report") + "\n"
    }

    /// Two histograms side by side, each with a vertical mean marker.
    pub fn to_svg(&self) -> String {
        histogram_svg(&[("vocabulary a", &self.dist_a), ("vocabulary b", &self.dist_b)])
    }

    pub fn render(&self, format: ReportFormat) -> String {
        match format {
            ReportFormat::Csv => self.to_csv(),
            ReportFormat::Json => self.to_json(),
            ReportFormat::Svg => self.to_svg(),
        }
    }
}

pub fn emit_report(report: &ComparisonReport, format: ReportFormat, path: &Path) -> Result<(), StatsError> {
    write_atomic(path, report.render(format).as_bytes()).map_err(|source| StatsError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Histogram panels sharing one x range. Axes are paths and bars are
/// rects, so the only `<line>` elements are the mean markers.
fn histogram_svg(panels: &[(&str, &LengthDistribution)]) -> String {
    let (pw, ph, pad) = (360.0, 300.0, 40.0);
    let width = pw * panels.len() as f64;
    let bw = panels[0].1.bucket_width;
    let x_max = panels.iter().map(|(_, d)| (d.max / bw + 1) * bw).max().unwrap_or(bw) as f64;
    let y_max = panels
        .iter()
        .flat_map(|(_, d)| d.histogram.values())
        .copied()
        .max()
        .unwrap_or(1) as f64;

    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{ph}" viewBox="0 0 {width} {ph}">"#);
    let _ = writeln!(svg, r#"<rect width="{width}" height="{ph}" fill="white"/>"#);
    for (i, (title, dist)) in panels.iter().enumerate() {
        let x0 = pw * i as f64 + pad;
        let plot_w = pw - 2.0 * pad;
        let plot_h = ph - 2.0 * pad;
        let sx = |x: f64| x0 + x / x_max * plot_w;
        let sy = |y: f64| ph - pad - y / y_max * plot_h;
        let _ = writeln!(svg, r#"<text x="{:.1}" y="20" font-size="13" text-anchor="middle">{title}</text>"#, x0 + plot_w / 2.0);
        let _ = writeln!(svg, r#"<path d="M{x0:.1} {pad} V{:.1} H{:.1}" stroke="black" fill="none"/>"#, ph - pad, x0 + plot_w);
        let _ = writeln!(svg, r#"<text x="{x0:.1}" y="{:.1}" font-size="10">0</text>"#, ph - pad + 14.0);
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{x_max}</text>"#, x0 + plot_w, ph - pad + 14.0);
        for (&start, &count) in &dist.histogram {
            let _ = writeln!(
                svg,
                r##"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="#4c72b0"/>"##,
                sx(start as f64),
                sy(count as f64),
                (sx((start + bw) as f64) - sx(start as f64) - 1.0).max(0.5),
                ph - pad - sy(count as f64)
            );
        }
        let mx = sx(dist.mean);
        let _ = writeln!(
            svg,
            r#"<line class="mean" x1="{mx:.1}" y1="{pad}" x2="{mx:.1}" y2="{:.1}" stroke="red" stroke-width="2"/>"#,
            ph - pad
        );
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" font-size="10" fill="red">mean {:.2}</text>"#, mx + 3.0, pad + 10.0, dist.mean);
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(tokens: &[&str]) -> Vocabulary {
        Vocabulary::from_regular_tokens(tokens.iter().copied()).unwrap()
    }

    #[test]
    fn singleton_and_pair() {
        let d = LengthDistribution::from_lengths(&[5], 16).unwrap();
        assert_eq!((d.mean, d.median, d.count), (5.0, 5.0, 1));
        assert_eq!(d.histogram, BTreeMap::from([(0, 1)]));
        let d = LengthDistribution::from_lengths(&[2, 4], 16).unwrap();
        assert_eq!(d.mean, 3.0);
        assert_eq!(d.median, 2.0);
        let d = LengthDistribution::from_lengths(&[1, 16, 17, 40], 16).unwrap();
        assert_eq!(d.histogram, BTreeMap::from([(0, 1), (16, 2), (32, 1)]));
    }

    #[test]
    fn empty_corpus_errors() {
        let v = vocab(&["a"]);
        let err = sequence_length_stats(&["", "  "], &v, &TokenizerConfig::default(), 16).unwrap_err();
        assert_eq!(err.to_string(), "no documents");
    }

    #[test]
    fn bird_ratio() {
        let a = vocab(&["bi", "##rd"]);
        let b = vocab(&["bird"]);
        let r = compare_vocabularies(&["bird"], &a, &b, &TokenizerConfig::default(), 16).unwrap();
        assert_eq!(r.mean_ratio, 2.0);
        let same = compare_vocabularies(&["bird bird"], &a, &a, &TokenizerConfig::default(), 16).unwrap();
        assert_eq!(same.mean_ratio, 1.0);
    }

    #[test]
    fn formats() {
        let a = vocab(&["a", "##a"]);
        let b = vocab(&["a", "##a", "aa", "aaaa"]);
        let corpus = ["aaaa aaaa", "a", "aaaaaaaaaaaaaaaaaaaaaaaaaaaa"];
        let r = compare_vocabularies(&corpus, &a, &b, &TokenizerConfig::default(), 16).unwrap();
        let csv = r.to_csv();
        assert!(csv.starts_with("bucket_start,count_a,count_b\n"));
        assert_eq!(csv.lines().count() - 1, 2);
        assert_eq!(r.to_svg().matches("<line").count(), 2);
        assert_eq!(r.to_json(), r.clone().to_json());
        assert!(matches!("xml".parse::<ReportFormat>(), Err(StatsError::UnknownFormat(_))));
    }
}
