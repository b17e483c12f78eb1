//! Retrieval and clustering metrics, and embedding dumps.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{squared_distance, Matrix};

/// For each query, whether one of its `k` nearest neighbours (self excluded,
/// Euclidean, lower index first on ties) shares its label; averaged.
pub fn recall_at_k(emb: &Matrix, labels: &[usize], ks: &[usize]) -> Result<BTreeMap<usize, f64>> {
    let n = emb.rows();
    if labels.len() != n {
        return Err(Error::shape("recall_at_k", format!("{} labels for {n} rows", labels.len())));
    }
    if n < 2 {
        return Err(Error::invalid("recall needs at least two samples"));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k >= n) {
        return Err(Error::invalid(format!("k = {k} must be in 1..{n}")));
    }
    let kmax = ks.iter().copied().max().unwrap_or(0);
    // first_hit[i] = rank (1-based) of the first same-label neighbour.
    let mut first_hit = vec![usize::MAX; n];
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for (i, hit) in first_hit.iter_mut().enumerate() {
        order.clear();
        order.extend(
            (0..n)
                .filter(|&j| j != i)
                .map(|j| (squared_distance(emb.row(i), emb.row(j)), j)),
        );
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if kmax < order.len() {
            order.select_nth_unstable_by(kmax - 1, cmp);
            order.truncate(kmax);
        }
        order.sort_by(cmp);
        if let Some(r) = order.iter().position(|&(_, j)| labels[j] == labels[i]) {
            *hit = r + 1;
        }
    }
    Ok(ks
        .iter()
        .map(|&k| {
            let hits = first_hit.iter().filter(|&&r| r <= k).count();
            (k, hits as f64 / n as f64)
        })
        .collect())
}

type Counts<K> = BTreeMap<K, f64>;

fn joint_counts(a: &[usize], b: &[usize]) -> (Counts<(usize, usize)>, Counts<usize>, Counts<usize>) {
    let mut joint = BTreeMap::new();
    let mut ca = BTreeMap::new();
    let mut cb = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_insert(0.0) += 1.0;
        *ca.entry(x).or_insert(0.0) += 1.0;
        *cb.entry(y).or_insert(0.0) += 1.0;
    }
    (joint, ca, cb)
}

fn entropy(counts: &BTreeMap<usize, f64>, n: f64) -> f64 {
    counts
        .values()
        .map(|&c| {
            let p = c / n;
            -p * p.ln()
        })
        .sum()
}

/// `I(A;B) / sqrt(H(A)·H(B))` with natural logarithms. Two single-cluster
/// labelings score 1; exactly one single-cluster labeling scores 0.
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("nmi", format!("lengths {} and {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::invalid("nmi of empty labelings"));
    }
    let n = a.len() as f64;
    let (joint, ca, cb) = joint_counts(a, b);
    let (ha, hb) = (entropy(&ca, n), entropy(&cb, n));
    if ha == 0.0 && hb == 0.0 {
        return Ok(1.0);
    }
    if ha == 0.0 || hb == 0.0 {
        return Ok(0.0);
    }
    let mi: f64 = joint
        .iter()
        .map(|(&(x, y), &c)| c / n * (c * n / (ca[&x] * cb[&y])).ln())
        .sum();
    Ok((mi / (ha * hb).sqrt()).clamp(0.0, 1.0))
}

/// Adjusted Rand index. Identical trivial partitions score 1.
pub fn ari(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("ari", format!("lengths {} and {}", a.len(), b.len())));
    }
    let (joint, ca, cb) = joint_counts(a, b);
    let c2 = |x: f64| x * (x - 1.0) / 2.0;
    let index: f64 = joint.values().map(|&c| c2(c)).sum();
    let sa: f64 = ca.values().map(|&c| c2(c)).sum();
    let sb: f64 = cb.values().map(|&c| c2(c)).sum();
    let total = c2(a.len() as f64);
    let expected = if total > 0.0 { sa * sb / total } else { 0.0 };
    let max = 0.5 * (sa + sb);
    if max == expected {
        return Ok(if index == max { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / (max - expected))
}

/// Aggregation of class-center distances in the denominator of
/// [`intra_class_variance_ratio`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InterClassNorm {
    #[default]
    MeanPairs,
    MinPair,
}

impl fmt::Display for InterClassNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InterClassNorm::MeanPairs => "mean-pairs",
            InterClassNorm::MinPair => "min-pair",
        })
    }
}

impl std::str::FromStr for InterClassNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean-pairs" => Ok(InterClassNorm::MeanPairs),
            "min-pair" => Ok(InterClassNorm::MinPair),
            _ => Err(Error::invalid(format!("unknown inter-class norm {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceRatio {
    pub ratio: f64,
    pub intra: f64,
    pub inter: f64,
    /// Singleton classes left out of the numerator.
    pub excluded_singletons: usize,
}

/// Mean within-class pairwise distance (averaged over classes) divided by
/// the class-center distance aggregated by `norm`.
pub fn intra_class_variance_ratio(emb: &Matrix, labels: &[usize], norm: InterClassNorm) -> Result<VarianceRatio> {
    if labels.len() != emb.rows() {
        return Err(Error::shape("intra_class_variance_ratio", "label count differs from rows"));
    }
    let groups: Vec<Vec<usize>> = crate::data::group_by_label(labels)
        .into_iter()
        .filter(|g| !g.is_empty())
        .collect();
    if groups.len() < 2 {
        return Err(Error::invalid("variance ratio needs at least two classes"));
    }
    let mut intra_sum = 0.0;
    let mut counted = 0;
    for g in &groups {
        if g.len() < 2 {
            continue;
        }
        let mut s = 0.0;
        for (a, &i) in g.iter().enumerate() {
            for &j in &g[a + 1..] {
                s += squared_distance(emb.row(i), emb.row(j)).sqrt();
            }
        }
        let pairs = g.len() * (g.len() - 1) / 2;
        intra_sum += s / pairs as f64;
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::invalid("every class is a singleton"));
    }
    let centers: Vec<Vec<f64>> = groups
        .iter()
        .map(|g| {
            let mut c = vec![0.0; emb.cols()];
            for &i in g {
                c.iter_mut().zip(emb.row(i)).for_each(|(a, b)| *a += b);
            }
            c.iter_mut().for_each(|a| *a /= g.len() as f64);
            c
        })
        .collect();
    let mut dists = Vec::new();
    for a in 0..centers.len() {
        for b in a + 1..centers.len() {
            dists.push(squared_distance(&centers[a], &centers[b]).sqrt());
        }
    }
    let inter = match norm {
        InterClassNorm::MeanPairs => dists.iter().sum::<f64>() / dists.len() as f64,
        InterClassNorm::MinPair => dists.iter().copied().fold(f64::INFINITY, f64::min),
    };
    let intra = intra_sum / counted as f64;
    Ok(VarianceRatio {
        ratio: if inter > 0.0 { intra / inter } else { f64::INFINITY },
        intra,
        inter,
        excluded_singletons: groups.len() - counted,
    })
}

/// Which embedding a report describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderTag {
    Alpha,
    Beta,
    Concatenated,
}

impl fmt::Display for EncoderTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderTag::Alpha => "alpha",
            EncoderTag::Beta => "beta",
            EncoderTag::Concatenated => "concatenated",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub encoder: EncoderTag,
    pub recall_at: BTreeMap<usize, f64>,
    pub nmi: f64,
    pub intra_class_variance_ratio: f64,
}

impl EvalReport {
    pub fn recall1(&self) -> f64 {
        self.recall_at.get(&1).copied().unwrap_or(f64::NAN)
    }
}

/// One row of an embedding dump.
#[derive(Clone, Debug, PartialEq)]
pub struct DumpRow {
    pub id: usize,
    pub label: usize,
    pub surrogate: usize,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Writes `id,label,surrogate,a0..,b0..`; the `b` columns are omitted when
/// `e_beta` has no columns.
pub fn write_embeddings_csv(
    path: impl AsRef<Path>,
    ids: &[usize],
    labels: &[usize],
    surrogate: &[usize],
    e_alpha: &Matrix,
    e_beta: &Matrix,
) -> Result<()> {
    let path = path.as_ref();
    let n = ids.len();
    if labels.len() != n || surrogate.len() != n || e_alpha.rows() != n || e_beta.rows() != n {
        return Err(Error::shape("dump_embeddings", "column lengths differ"));
    }
    let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["id".to_string(), "label".into(), "surrogate".into()];
    header.extend((0..e_alpha.cols()).map(|k| format!("a{k}")));
    header.extend((0..e_beta.cols()).map(|k| format!("b{k}")));
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..n {
        let mut rec = vec![ids[i].to_string(), labels[i].to_string(), surrogate[i].to_string()];
        rec.extend(e_alpha.row(i).iter().map(|v| v.to_string()));
        rec.extend(e_beta.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Embeddings of every sample of `ds` under `params`, written with
/// [`write_embeddings_csv`].
pub fn dump_embeddings(
    params: &crate::model::ModelParams,
    ds: &crate::data::Dataset,
    path: impl AsRef<Path>,
) -> Result<()> {
    let emb = params.embed(&ds.features)?;
    write_embeddings_csv(path, &ds.ids, &ds.labels, &ds.surrogate, &emb.e_alpha, &emb.e_beta)
}

/// Reads a dump written by [`write_embeddings_csv`].
pub fn read_embeddings_csv(path: impl AsRef<Path>) -> Result<Vec<DumpRow>> {
    let path = path.as_ref();
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let header = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let a_cols = header.iter().filter(|h| h.starts_with('a')).count();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            parse_err(e.position().map_or(0, |p| p.line() as usize), e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let int = |k: usize| -> Result<usize> {
            record[k]
                .parse()
                .map_err(|_| parse_err(line, format!("column {k} is not an integer")))
        };
        let floats = record
            .iter()
            .skip(3)
            .map(|c| c.parse::<f64>().map_err(|_| parse_err(line, format!("{c:?} is not a number"))))
            .collect::<Result<Vec<f64>>>()?;
        let (alpha, beta) = floats.split_at(a_cols.min(floats.len()));
        rows.push(DumpRow {
            id: int(0)?,
            label: int(1)?,
            surrogate: int(2)?,
            alpha: alpha.to_vec(),
            beta: beta.to_vec(),
        });
    }
    Ok(rows)
}
