//! Embedding analysis: CLS embedding export, PCA projection, density
//! clustering and class-based TF-IDF topic words.
//!
//! The topic score of word `x` in cluster `i` is
//! `(t_i / w_i) · ln(m / Σ_j t_j)` where `t_i` counts `x` in the
//! concatenated text of cluster `i`, `w_i` is the number of words in that
//! text, the sum runs over clusters and `m` is the number of sampled
//! documents (outliers included).

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::corpus::{hash_order, Document};
use crate::error::{invalid, Error, Result};
use crate::tensor::Matrix;
use crate::tokenizer::{to_hex, Tokenizer};
use crate::training::encode_for_classification;

const EMBEDDING_HEADER: &str = "#dapt-embeddings v1";

/// One row per document.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub ids: Vec<String>,
    pub rows: Matrix,
    /// SHA-256 of the checkpoint the embeddings came from.
    pub source_hash: String,
}

impl EmbeddingMatrix {
    pub fn new(ids: Vec<String>, rows: Matrix, source_hash: impl Into<String>) -> Result<Self> {
        if ids.len() != rows.rows() {
            return Err(Error::Shape(format!(
                "{} ids for {} rows",
                ids.len(),
                rows.rows()
            )));
        }
        if !rows.is_finite() {
            return Err(invalid("embedding matrix has non-finite entries"));
        }
        Ok(EmbeddingMatrix {
            ids,
            rows,
            source_hash: source_hash.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Path of the id sidecar written next to `path`.
    pub fn ids_path(path: &Path) -> PathBuf {
        let mut name = path.as_os_str().to_owned();
        name.push(".ids");
        PathBuf::from(name)
    }

    /// Text matrix (header line, then one row of values per line) plus an
    /// `.ids` sidecar with one document id per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = format!(
            "{EMBEDDING_HEADER} rows={} cols={} source={}\n",
            self.rows.rows(),
            self.rows.cols(),
            self.source_hash
        );
        for r in 0..self.rows.rows() {
            let line: Vec<String> = self.rows.row(r).iter().map(|v| v.to_string()).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))?;
        let ids_path = Self::ids_path(path);
        let mut ids = self.ids.join("\n");
        ids.push('\n');
        fs::write(&ids_path, ids).map_err(|e| Error::io(&ids_path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        let fields: BTreeMap<&str, &str> = header
            .strip_prefix(EMBEDDING_HEADER)
            .ok_or_else(|| Error::Format(format!("{}: missing embedding header", path.display())))?
            .split_whitespace()
            .filter_map(|kv| kv.split_once('='))
            .collect();
        let parse = |k: &str| -> Result<usize> {
            fields
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Format(format!("embedding header lacks {k}")))
        };
        let (rows, cols) = (parse("rows")?, parse("cols")?);
        let mut data = Vec::with_capacity(rows * cols);
        for (i, line) in lines.enumerate() {
            let before = data.len();
            for tok in line.split_whitespace() {
                data.push(tok.parse::<f64>().map_err(|_| Error::MalformedRecord {
                    line: i + 2,
                    message: format!("bad value {tok}"),
                })?);
            }
            if data.len() - before != cols {
                return Err(Error::MalformedRecord {
                    line: i + 2,
                    message: format!("expected {cols} values"),
                });
            }
        }
        if data.len() != rows * cols {
            return Err(Error::Format(format!("expected {rows} rows")));
        }
        let ids_path = Self::ids_path(path);
        let ids: Vec<String> = fs::read_to_string(&ids_path)
            .map_err(|e| Error::io(&ids_path, e))?
            .lines()
            .map(str::to_string)
            .collect();
        Self::new(
            ids,
            Matrix::from_vec(rows, cols, data),
            fields.get("source").copied().unwrap_or(""),
        )
    }
}

/// Final-layer CLS vectors (dropout off) for a seeded sample of
/// `sample_size` documents.
pub fn export_cls_embeddings(
    checkpoint: &Checkpoint,
    tokenizer: &Tokenizer,
    documents: &[Document],
    sample_size: usize,
    seed: u64,
    max_seq_len: usize,
) -> Result<EmbeddingMatrix> {
    checkpoint.check_tokenizer(tokenizer)?;
    if sample_size == 0 || sample_size > documents.len() {
        return Err(invalid(format!(
            "sample size {sample_size} must be between 1 and the {} available documents",
            documents.len()
        )));
    }
    let refs: Vec<&Document> = documents.iter().collect();
    let sample = &hash_order(&refs, seed, "sample")[..sample_size];
    let model = &checkpoint.model;
    let hidden = model.config.hidden_dim;
    let mut data = Vec::with_capacity(sample_size * hidden);
    let mut ids = Vec::with_capacity(sample_size);
    for doc in sample {
        let input = encode_for_classification(
            tokenizer,
            &doc.text,
            max_seq_len.min(model.config.max_positions),
        );
        let out = model.forward_encoder(&input)?;
        data.extend_from_slice(out.cls_vector());
        ids.push(doc.id.clone());
    }
    let source = to_hex(&Sha256::digest(checkpoint.to_bytes()?));
    EmbeddingMatrix::new(ids, Matrix::from_vec(sample_size, hidden, data), source)
}

/// Principal axes of a set of rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// One unit-length component per row, by decreasing variance. Each
    /// component's largest-magnitude loading is positive.
    pub components: Matrix,
    pub explained_variance: Vec<f64>,
}

impl Pca {
    pub fn fit(data: &Matrix, k: usize) -> Result<Pca> {
        let (n, d) = data.shape();
        if n == 0 || k == 0 || k > d {
            return Err(invalid(format!(
                "cannot fit {k} components to a {n}x{d} matrix"
            )));
        }
        let mut mean = vec![0.0; d];
        data.sum_rows_into(&mut mean);
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for r in 0..n {
            let row = data.row(r);
            for i in 0..d {
                let ci = row[i] - mean[i];
                for j in i..d {
                    cov[(i, j)] += ci * (row[j] - mean[j]);
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                let v = cov[(i, j)] / n as f64;
                cov[(i, j)] = v;
                cov[(j, i)] = v;
            }
        }
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .total_cmp(&eig.eigenvalues[a])
                .then(a.cmp(&b))
        });
        let mut components = Matrix::zeros(k, d);
        let mut explained = Vec::with_capacity(k);
        for (c, &idx) in order.iter().take(k).enumerate() {
            let v = eig.eigenvectors.column(idx);
            let pivot = (0..d).fold(0, |b, i| if v[i].abs() > v[b].abs() { i } else { b });
            let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
            for i in 0..d {
                components.set(c, i, sign * v[i]);
            }
            explained.push(eig.eigenvalues[idx].max(0.0));
        }
        Ok(Pca {
            mean,
            components,
            explained_variance: explained,
        })
    }

    pub fn transform(&self, data: &Matrix) -> Matrix {
        let (n, d) = data.shape();
        let k = self.components.rows();
        let mut out = Matrix::zeros(n, k);
        for r in 0..n {
            let centred: Vec<f64> = data
                .row(r)
                .iter()
                .zip(&self.mean)
                .map(|(x, m)| x - m)
                .collect();
            for c in 0..k {
                let comp = &self.components.row(c)[..d];
                out.set(r, c, comp.iter().zip(&centred).map(|(a, b)| a * b).sum());
            }
        }
        out
    }
}

/// Projects onto the top two principal components.
pub fn project_2d(matrix: &EmbeddingMatrix) -> Result<Vec<(f64, f64)>> {
    let (n, d) = matrix.rows.shape();
    if n < 3 || d < 2 {
        return Err(invalid(format!(
            "projection needs at least 3 rows and 2 columns, got {n}x{d}"
        )));
    }
    let pca = Pca::fit(&matrix.rows, 2)?;
    if pca.explained_variance.iter().all(|&v| v <= f64::EPSILON) {
        log::warn!("all embeddings are identical; every point projects to the origin");
        return Ok(vec![(0.0, 0.0); n]);
    }
    let p = pca.transform(&matrix.rows);
    Ok((0..n).map(|r| (p.get(r, 0), p.get(r, 1))).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterParams {
    pub min_cluster_size: usize,
    /// Neighbourhood radius. `None` picks the median distance to the
    /// `min_cluster_size`-th nearest neighbour.
    pub radius: Option<f64>,
    /// Dimensions kept by PCA before clustering.
    pub reduce_to: usize,
}

impl Default for ClusterParams {
    fn default() -> Self {
        ClusterParams {
            min_cluster_size: 10,
            radius: None,
            reduce_to: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub ids: Vec<String>,
    /// Cluster number from 1, or `None` for an outlier.
    pub labels: Vec<Option<usize>>,
    pub n_clusters: usize,
}

impl ClusterAssignment {
    pub fn outliers(&self) -> usize {
        self.labels.iter().filter(|l| l.is_none()).count()
    }

    pub fn members(&self, cluster: usize) -> Vec<&str> {
        self.ids
            .iter()
            .zip(&self.labels)
            .filter(|(_, l)| **l == Some(cluster))
            .map(|(id, _)| id.as_str())
            .collect()
    }
}

fn squared_distances(points: &Matrix) -> Vec<Vec<f64>> {
    let n = points.rows();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = points
                .row(i)
                .iter()
                .zip(points.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d[i][j] = s;
            d[j][i] = s;
        }
    }
    d
}

/// DBSCAN: a point with at least `min_points` neighbours within `radius`
/// (itself included) is a core point; clusters are the density-connected
/// components around core points. Returns 0-based cluster indices ordered
/// by each cluster's first point.
pub fn dbscan(points: &Matrix, radius: f64, min_points: usize) -> Vec<Option<usize>> {
    let n = points.rows();
    let dist = squared_distances(points);
    let r2 = radius * radius;
    let neighbours: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| dist[i][j] <= r2).collect())
        .collect();
    let core: Vec<bool> = neighbours.iter().map(|nb| nb.len() >= min_points).collect();
    let mut labels: Vec<Option<usize>> = vec![None; n];
    let mut next = 0;
    for start in 0..n {
        if labels[start].is_some() || !core[start] {
            continue;
        }
        labels[start] = Some(next);
        let mut stack = vec![start];
        while let Some(p) = stack.pop() {
            if !core[p] {
                continue;
            }
            for &q in &neighbours[p] {
                if labels[q].is_none() {
                    labels[q] = Some(next);
                    stack.push(q);
                }
            }
        }
        next += 1;
    }
    // Renumber by first member so labels do not depend on visiting order.
    let mut first: Vec<(usize, usize)> = Vec::new();
    for (i, l) in labels.iter().enumerate() {
        if let Some(c) = l {
            if !first.iter().any(|(cc, _)| cc == c) {
                first.push((*c, i));
            }
        }
    }
    let remap: HashMap<usize, usize> = first
        .iter()
        .enumerate()
        .map(|(new, (old, _))| (*old, new))
        .collect();
    labels.into_iter().map(|l| l.map(|c| remap[&c])).collect()
}

fn auto_radius(points: &Matrix, k: usize) -> f64 {
    let dist = squared_distances(points);
    let mut kth: Vec<f64> = dist
        .into_iter()
        .map(|mut row| {
            row.sort_by(f64::total_cmp);
            row[k.min(row.len() - 1)].sqrt()
        })
        .collect();
    kth.sort_by(f64::total_cmp);
    kth[kth.len() / 2]
}

/// Density clustering of embeddings after PCA reduction. Groups smaller
/// than `min_cluster_size` are marked as outliers.
pub fn cluster_embeddings(
    matrix: &EmbeddingMatrix,
    params: &ClusterParams,
) -> Result<ClusterAssignment> {
    if params.min_cluster_size < 2 {
        return Err(invalid("min_cluster_size must be at least 2"));
    }
    let (n, d) = matrix.rows.shape();
    if n < params.min_cluster_size {
        return Err(invalid(format!(
            "{n} points cannot form a cluster of {}",
            params.min_cluster_size
        )));
    }
    let points = if params.reduce_to > 0 && d > params.reduce_to {
        let pca = Pca::fit(&matrix.rows, params.reduce_to)?;
        pca.transform(&matrix.rows)
    } else {
        matrix.rows.clone()
    };
    let radius = params
        .radius
        .unwrap_or_else(|| auto_radius(&points, params.min_cluster_size - 1));
    if !(radius >= 0.0) {
        return Err(invalid("radius must be non-negative"));
    }
    let raw = dbscan(&points, radius, params.min_cluster_size);
    let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for c in raw.iter().flatten() {
        *sizes.entry(*c).or_default() += 1;
    }
    let kept: BTreeMap<usize, usize> = sizes
        .iter()
        .filter(|(_, &s)| s >= params.min_cluster_size)
        .enumerate()
        .map(|(new, (&old, _))| (old, new + 1))
        .collect();
    let labels: Vec<Option<usize>> = raw
        .into_iter()
        .map(|l| l.and_then(|c| kept.get(&c).copied()))
        .collect();
    Ok(ClusterAssignment {
        ids: matrix.ids.clone(),
        labels,
        n_clusters: kept.len(),
    })
}

const STOP_WORDS: &[&str] = &[
    "an", "and", "are", "as", "at", "be", "by", "for", "from", "in", "is", "it", "its", "of", "on",
    "or", "that", "the", "this", "to", "was", "we", "were", "which", "with",
];

/// Lowercased alphanumeric runs of at least two characters, minus stop words.
pub fn topic_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| w.chars().count() >= 2 && !STOP_WORDS.contains(w))
        .map(str::to_string)
        .collect()
}

/// Eq.-style cb-TF-IDF over classes given as word lists. Returns, per class,
/// the score of every word seen in any class.
pub fn cbtfidf_scores(classes: &[Vec<String>], m: usize) -> Result<Vec<BTreeMap<String, f64>>> {
    if m == 0 {
        return Err(invalid("document count m must be positive"));
    }
    let counts: Vec<BTreeMap<&str, usize>> = classes
        .iter()
        .map(|words| {
            let mut c = BTreeMap::new();
            for w in words {
                *c.entry(w.as_str()).or_default() += 1;
            }
            c
        })
        .collect();
    let mut across: BTreeMap<&str, usize> = BTreeMap::new();
    for c in &counts {
        for (w, n) in c {
            *across.entry(w).or_default() += n;
        }
    }
    classes
        .iter()
        .zip(&counts)
        .enumerate()
        .map(|(i, (words, c))| {
            if words.is_empty() {
                return Err(invalid(format!("class {} has no words", i + 1)));
            }
            let w_i = words.len() as f64;
            Ok(across
                .iter()
                .map(|(word, &total)| {
                    let t_i = c.get(word).copied().unwrap_or(0) as f64;
                    (word.to_string(), t_i / w_i * (m as f64 / total as f64).ln())
                })
                .collect())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterTopics {
    pub cluster: usize,
    /// `(word, score)` by decreasing score, ties broken alphabetically.
    pub words: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopicSummary {
    pub clusters: Vec<ClusterTopics>,
    pub documents: usize,
}

/// Top `top_k` words per cluster. Outlier documents count towards `m` but
/// are left out of the per-cluster text.
pub fn cbtfidf_topics(
    assignment: &ClusterAssignment,
    documents: &[Document],
    top_k: usize,
) -> Result<TopicSummary> {
    if top_k == 0 {
        return Err(invalid("top_k must be at least 1"));
    }
    let by_id: HashMap<&str, &Document> = documents.iter().map(|d| (d.id.as_str(), d)).collect();
    let mut classes = vec![Vec::new(); assignment.n_clusters];
    for (id, label) in assignment.ids.iter().zip(&assignment.labels) {
        let doc = by_id
            .get(id.as_str())
            .ok_or_else(|| invalid(format!("no text for document {id}")))?;
        if let Some(c) = label {
            classes[c - 1].extend(topic_words(&doc.text));
        }
    }
    let scores = cbtfidf_scores(&classes, assignment.ids.len())?;
    let clusters = scores
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut words: Vec<(String, f64)> = s
                .into_iter()
                .filter(|(w, _)| classes[i].iter().any(|x| x == w))
                .collect();
            words.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            words.truncate(top_k);
            ClusterTopics {
                cluster: i + 1,
                words,
            }
        })
        .collect();
    Ok(TopicSummary {
        clusters,
        documents: assignment.ids.len(),
    })
}

/// One line per cluster: its number, then its words comma-joined.
pub fn topic_report(summary: &TopicSummary) -> String {
    let mut s = String::from("cluster\twords\n");
    for c in &summary.clusters {
        let words: Vec<&str> = c.words.iter().map(|(w, _)| w.as_str()).collect();
        let _ = writeln!(s, "{}\t{}", c.cluster, words.join(", "));
    }
    s
}

pub fn write_topic_csv(path: &Path, summary: &TopicSummary) -> Result<()> {
    let mut s = String::from("cluster,rank,word,score\n");
    for c in &summary.clusters {
        for (rank, (w, score)) in c.words.iter().enumerate() {
            let _ = writeln!(s, "{},{},{},{}", c.cluster, rank + 1, w, score);
        }
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// `id,x,y,cluster,true_label`; outliers get cluster `-1`, unlabeled
/// documents an empty label.
pub fn write_projection_csv(
    path: &Path,
    assignment: &ClusterAssignment,
    coords: &[(f64, f64)],
    true_labels: &[Option<String>],
) -> Result<()> {
    if coords.len() != assignment.ids.len() || true_labels.len() != assignment.ids.len() {
        return Err(Error::Shape(
            "projection rows do not match the assignment".into(),
        ));
    }
    let mut s = String::from("id,x,y,cluster,true_label\n");
    for i in 0..coords.len() {
        let cluster = assignment.labels[i].map_or(-1, |c| c as i64);
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            assignment.ids[i],
            coords[i].0,
            coords[i].1,
            cluster,
            true_labels[i].as_deref().unwrap_or("")
        );
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}
