//! Binarization, packed Hamming ranking, MAP@TopK, and precision-recall
//! curves.
//!
//! Codes are binarized with `sign(0) = +1` and packed into 64-bit words so
//! distances reduce to XOR plus popcount. Rankings break distance ties by
//! ascending gallery position, so results are deterministic; callers that
//! need id-ordered ties pass galleries in ascending-id row order.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::losses::label_sets_intersect;
use crate::matrix::Matrix;

/// Magic bytes opening a packed-codes file.
pub const CODES_MAGIC: [u8; 4] = *b"DBHC";
/// Current codes file format version.
pub const CODES_VERSION: u8 = 1;

/// Sign-binarized codes packed into 64-bit words.
///
/// Bit `j` of a sample's word stream is 1 iff code bit `j` is `+1`; padding
/// bits beyond `k` are zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedCodes {
    n: usize,
    k: usize,
    words_per_code: usize,
    words: Vec<u64>,
}

impl PackedCodes {
    #[inline]
    pub fn len(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Code length in bits.
    #[inline]
    pub fn code_length(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn words_per_code(&self) -> usize {
        self.words_per_code
    }

    #[inline]
    pub fn row_words(&self, i: usize) -> &[u64] {
        &self.words[i * self.words_per_code..(i + 1) * self.words_per_code]
    }

    /// Unpacks sample `i` back to `{-1, +1}` bits.
    pub fn unpack_row(&self, i: usize) -> Vec<i8> {
        let words = self.row_words(i);
        (0..self.k)
            .map(|j| {
                if words[j / 64] >> (j % 64) & 1 == 1 {
                    1
                } else {
                    -1
                }
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(21 + self.words.len() * 8);
        out.extend_from_slice(&CODES_MAGIC);
        out.push(CODES_VERSION);
        out.extend_from_slice(&(self.n as u64).to_le_bytes());
        out.extend_from_slice(&(self.k as u64).to_le_bytes());
        for w in &self.words {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 21 {
            return Err(Error::data("codes file truncated"));
        }
        if bytes[..4] != CODES_MAGIC {
            return Err(Error::data("not a codes file (bad magic)"));
        }
        if bytes[4] != CODES_VERSION {
            return Err(Error::data(format!(
                "unsupported codes file version {}",
                bytes[4]
            )));
        }
        let n = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
        let k = u64::from_le_bytes(bytes[13..21].try_into().unwrap()) as usize;
        let words_per_code = k.div_ceil(64);
        let expected = 21 + n * words_per_code * 8;
        if bytes.len() != expected {
            return Err(Error::data(format!(
                "codes file length {} does not match header (expected {expected})",
                bytes.len()
            )));
        }
        let words = bytes[21..]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(PackedCodes {
            n,
            k,
            words_per_code,
            words,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

/// Binarizes continuous codes: `b = sign(h)` with `sign(0) = +1`, packed.
pub fn binarize(codes: &Matrix) -> Result<PackedCodes> {
    if !codes.is_finite() {
        return Err(Error::data("non-finite code value"));
    }
    let (n, k) = codes.shape();
    let words_per_code = k.div_ceil(64).max(1);
    let mut words = vec![0u64; n * words_per_code];
    for i in 0..n {
        let row = codes.row(i);
        let out = &mut words[i * words_per_code..(i + 1) * words_per_code];
        for (j, &h) in row.iter().enumerate() {
            if h >= 0.0 {
                out[j / 64] |= 1u64 << (j % 64);
            }
        }
    }
    Ok(PackedCodes {
        n,
        k,
        words_per_code,
        words,
    })
}

#[inline]
fn hamming_words(a: &[u64], b: &[u64]) -> u32 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x ^ y).count_ones())
        .sum()
}

/// Hamming distance between sample `ia` of `a` and sample `ib` of `b`.
pub fn hamming(a: &PackedCodes, ia: usize, b: &PackedCodes, ib: usize) -> Result<u32> {
    if a.k != b.k {
        return Err(Error::config(format!(
            "code lengths differ: {} vs {}",
            a.k, b.k
        )));
    }
    Ok(hamming_words(a.row_words(ia), b.row_words(ib)))
}

/// One query's gallery ranking: positions ordered by ascending Hamming
/// distance, ties broken by ascending gallery position.
#[derive(Debug, Clone)]
pub struct RankingResult {
    pub query_index: usize,
    /// Gallery row indices in rank order.
    pub ranked: Vec<usize>,
    /// Distance of each ranked entry (non-decreasing).
    pub distances: Vec<u32>,
    /// Whether each ranked entry shares a label with the query.
    pub relevance: Vec<bool>,
}

/// Ranks the whole gallery for one query via counting sort over distances.
pub fn rank_gallery(
    query_codes: &PackedCodes,
    query_index: usize,
    query_labels: &[u32],
    gallery_codes: &PackedCodes,
    gallery_labels: &[Vec<u32>],
) -> Result<RankingResult> {
    if query_codes.k != gallery_codes.k {
        return Err(Error::config("query/gallery code lengths differ"));
    }
    let n = gallery_codes.len();
    let k = gallery_codes.code_length();
    let q = query_codes.row_words(query_index);

    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); k + 1];
    for j in 0..n {
        let d = hamming_words(q, gallery_codes.row_words(j)) as usize;
        buckets[d].push(j);
    }
    let mut ranked = Vec::with_capacity(n);
    let mut distances = Vec::with_capacity(n);
    for (d, bucket) in buckets.iter().enumerate() {
        for &j in bucket {
            ranked.push(j);
            distances.push(d as u32);
        }
    }
    let relevance = ranked
        .iter()
        .map(|&j| label_sets_intersect(query_labels, &gallery_labels[j]))
        .collect();
    Ok(RankingResult {
        query_index,
        ranked,
        distances,
        relevance,
    })
}

fn check_eval_inputs(
    query_codes: &PackedCodes,
    query_labels: &[Vec<u32>],
    gallery_codes: &PackedCodes,
    gallery_labels: &[Vec<u32>],
) -> Result<()> {
    if query_codes.is_empty() {
        return Err(Error::config("query set is empty"));
    }
    if query_codes.k != gallery_codes.k {
        return Err(Error::config(format!(
            "query/gallery code lengths differ: {} vs {}",
            query_codes.k, gallery_codes.k
        )));
    }
    if query_labels.len() != query_codes.len() || gallery_labels.len() != gallery_codes.len() {
        return Err(Error::config("label count does not match code count"));
    }
    Ok(())
}

/// Mean average precision over the top `top_k` Hamming-ranked gallery items.
///
/// Per query, `AP = (sum over relevant ranks r of precision@r) / (number of
/// relevant items within the top_k)`, and 0 when nothing relevant shows up.
/// The mean is accumulated in ascending query order.
pub fn map_at_k(
    query_codes: &PackedCodes,
    query_labels: &[Vec<u32>],
    gallery_codes: &PackedCodes,
    gallery_labels: &[Vec<u32>],
    top_k: usize,
) -> Result<f64> {
    check_eval_inputs(query_codes, query_labels, gallery_codes, gallery_labels)?;
    if top_k == 0 || top_k > gallery_codes.len() {
        return Err(Error::config(format!(
            "top_k must be in 1..={}, got {top_k}",
            gallery_codes.len()
        )));
    }

    let aps: Vec<f64> = (0..query_codes.len())
        .into_par_iter()
        .map(|qi| {
            let ranking = rank_gallery(
                query_codes,
                qi,
                &query_labels[qi],
                gallery_codes,
                gallery_labels,
            )?;
            let mut hits = 0u64;
            let mut precision_sum = 0.0;
            for r in 0..top_k {
                if ranking.relevance[r] {
                    hits += 1;
                    precision_sum += hits as f64 / (r + 1) as f64;
                }
            }
            Ok(if hits > 0 {
                precision_sum / hits as f64
            } else {
                0.0
            })
        })
        .collect::<Result<_>>()?;

    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// One point of a Hamming-radius precision-recall sweep.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PrPoint {
    pub radius: usize,
    pub recall: f64,
    pub precision: f64,
}

/// Precision and recall of the lookup set `{gallery : distance <= radius}`
/// for every radius `0..=k`, averaged over queries.
///
/// Queries retrieving nothing at a radius are excluded from that radius's
/// precision average (precision defaults to 1.0 if no query retrieves
/// anything); queries with no relevant gallery item at all are excluded
/// from recall.
pub fn pr_curve(
    query_codes: &PackedCodes,
    query_labels: &[Vec<u32>],
    gallery_codes: &PackedCodes,
    gallery_labels: &[Vec<u32>],
) -> Result<Vec<PrPoint>> {
    check_eval_inputs(query_codes, query_labels, gallery_codes, gallery_labels)?;
    let k = gallery_codes.code_length();
    let gn = gallery_codes.len();

    // Per query: cumulative retrieved and relevant-retrieved counts by radius.
    struct QueryCounts {
        retrieved: Vec<u64>,
        hits: Vec<u64>,
        relevant_total: u64,
    }

    let per_query: Vec<QueryCounts> = (0..query_codes.len())
        .into_par_iter()
        .map(|qi| {
            let q = query_codes.row_words(qi);
            let mut retrieved = vec![0u64; k + 1];
            let mut hits = vec![0u64; k + 1];
            let mut relevant_total = 0u64;
            for j in 0..gn {
                let d = hamming_words(q, gallery_codes.row_words(j)) as usize;
                retrieved[d] += 1;
                if label_sets_intersect(&query_labels[qi], &gallery_labels[j]) {
                    hits[d] += 1;
                    relevant_total += 1;
                }
            }
            for r in 1..=k {
                retrieved[r] += retrieved[r - 1];
                hits[r] += hits[r - 1];
            }
            QueryCounts {
                retrieved,
                hits,
                relevant_total,
            }
        })
        .collect();

    let mut points = Vec::with_capacity(k + 1);
    for r in 0..=k {
        let mut precision_sum = 0.0;
        let mut precision_n = 0u64;
        let mut recall_sum = 0.0;
        let mut recall_n = 0u64;
        for q in &per_query {
            if q.retrieved[r] > 0 {
                precision_sum += q.hits[r] as f64 / q.retrieved[r] as f64;
                precision_n += 1;
            }
            if q.relevant_total > 0 {
                recall_sum += q.hits[r] as f64 / q.relevant_total as f64;
                recall_n += 1;
            }
        }
        points.push(PrPoint {
            radius: r,
            precision: if precision_n > 0 {
                precision_sum / precision_n as f64
            } else {
                1.0
            },
            recall: if recall_n > 0 {
                recall_sum / recall_n as f64
            } else {
                0.0
            },
        });
    }
    Ok(points)
}

/// One `metric,k,value` row of the metrics output.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub k: usize,
    pub value: f64,
}

/// Renders metric rows as CSV with the header `metric,k,value`.
pub fn metrics_csv_string(rows: &[MetricRow]) -> String {
    let mut out = String::from("metric,k,value\n");
    for row in rows {
        out.push_str(&format!("{},{},{}\n", row.metric, row.k, row.value));
    }
    out
}

/// JSON mirror of the metrics CSV.
pub fn metrics_json_string(rows: &[MetricRow]) -> String {
    serde_json::to_string_pretty(rows).expect("metric rows serialize")
}

pub fn write_metrics(rows: &[MetricRow], csv_path: impl AsRef<Path>, json_path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(csv_path, metrics_csv_string(rows))?;
    std::fs::write(json_path, metrics_json_string(rows))?;
    Ok(())
}
