//! Exact Euclidean top-K search over image descriptors, plus the NAR and
//! MAP@K evaluation metrics.
//!
//! Ranking order everywhere is ascending distance, ties broken by ascending
//! gallery id (byte-wise string order).

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor_io::{norm, DescriptorSet};

pub const DEFAULT_TOPK: usize = 100;
/// Gallery rows scanned per block by batched search.
const SCAN_BLOCK: usize = 2048;
const NORM_TOL: f64 = 1e-3;

/// Squared Euclidean distance with eight independent accumulators.
#[inline]
pub fn squared_distance(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            let d = x[i] - y[i];
            acc[i] += d * d;
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ra.iter().zip(rb) {
        let d = x - y;
        tail += d * d;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[derive(Debug)]
pub struct DescriptorIndex {
    dim: usize,
    ids: Vec<String>,
    data: Vec<f32>,
    /// Position of each id in sorted id order; the tie-break key.
    id_rank: Vec<u32>,
    lookup: HashMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub index: usize,
    pub id: String,
    pub distance: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult {
    pub query_id: String,
    pub hits: Vec<Hit>,
}

/// Heap entry ordered worst-first: larger distance, then larger id rank.
#[derive(Clone, Copy, PartialEq)]
struct Candidate {
    dist2: f32,
    rank: u32,
    index: u32,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.rank.cmp(&other.rank))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct TopK {
    k: usize,
    heap: BinaryHeap<Candidate>,
}

impl TopK {
    fn new(k: usize) -> Self {
        Self {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    #[inline]
    fn offer(&mut self, c: Candidate) {
        if self.heap.len() < self.k {
            self.heap.push(c);
        } else if let Some(worst) = self.heap.peek() {
            if c < *worst {
                self.heap.pop();
                self.heap.push(c);
            }
        }
    }

    fn into_sorted(self) -> Vec<Candidate> {
        self.heap.into_sorted_vec()
    }
}

/// Build an index, taking ownership of the descriptor storage.
pub fn build_index(set: DescriptorSet) -> Result<DescriptorIndex> {
    DescriptorIndex::build(set)
}

impl DescriptorIndex {
    pub fn build(set: DescriptorSet) -> Result<Self> {
        let (dim, ids, data) = set.into_parts();
        if ids.len() > u32::MAX as usize {
            return Err(Error::Contract("gallery exceeds 2^32 descriptors".into()));
        }
        let mut lookup = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if lookup.insert(id.clone(), i).is_some() {
                return Err(Error::Contract(format!("duplicate gallery id `{id}`")));
            }
        }
        if dim > 0 {
            for (i, v) in data.chunks_exact(dim).enumerate() {
                let n = norm(v);
                if n != 0.0 && (n - 1.0).abs() > NORM_TOL {
                    return Err(Error::Contract(format!(
                        "descriptor `{}` has norm {n}, expected 1 or 0",
                        ids[i]
                    )));
                }
            }
        }
        let mut order: Vec<u32> = (0..ids.len() as u32).collect();
        order.sort_unstable_by(|&a, &b| ids[a as usize].cmp(&ids[b as usize]));
        let mut id_rank = vec![0u32; ids.len()];
        for (r, &i) in order.iter().enumerate() {
            id_rank[i as usize] = r as u32;
        }
        Ok(Self {
            dim,
            ids,
            data,
            id_rank,
            lookup,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.lookup.get(id).copied()
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.position(id).map(|i| self.vector(i))
    }

    fn check_query(&self, q: &[f32]) -> Result<()> {
        if q.len() != self.dim {
            return Err(Error::Contract(format!(
                "query dim {} != index dim {}",
                q.len(),
                self.dim
            )));
        }
        Ok(())
    }

    fn candidate(&self, i: usize, dist2: f32) -> Candidate {
        Candidate {
            dist2,
            rank: self.id_rank[i],
            index: i as u32,
        }
    }

    fn hits(&self, sorted: Vec<Candidate>) -> Vec<Hit> {
        sorted
            .into_iter()
            .map(|c| Hit {
                index: c.index as usize,
                id: self.ids[c.index as usize].clone(),
                distance: c.dist2.sqrt(),
            })
            .collect()
    }

    /// Exact top-`k` neighbours of `query`.
    pub fn search(&self, query: &[f32], k: usize) -> Result<Vec<Hit>> {
        self.search_excluding(query, k, None)
    }

    /// Exact top-`k`, skipping gallery position `exclude` (the query itself).
    pub fn search_excluding(
        &self,
        query: &[f32],
        k: usize,
        exclude: Option<usize>,
    ) -> Result<Vec<Hit>> {
        self.check_query(query)?;
        let mut top = TopK::new(k);
        if k > 0 {
            for (i, v) in self.data.chunks_exact(self.dim.max(1)).enumerate() {
                if Some(i) == exclude {
                    continue;
                }
                top.offer(self.candidate(i, squared_distance(query, v)));
            }
        }
        Ok(self.hits(top.into_sorted()))
    }

    /// Top-`k` for many queries in one blocked pass over the gallery.
    /// `queries[i].1` is an optional gallery position to exclude.
    pub fn search_batch(
        &self,
        queries: &[(&[f32], Option<usize>)],
        k: usize,
    ) -> Result<Vec<Vec<Hit>>> {
        for (q, _) in queries {
            self.check_query(q)?;
        }
        let workers = rayon::current_num_threads().max(1);
        let per = queries.len().div_ceil(workers).max(1);
        let results: Vec<Vec<Vec<Hit>>> = queries
            .par_chunks(per)
            .map(|group| {
                let mut tops: Vec<TopK> = group.iter().map(|_| TopK::new(k)).collect();
                if k > 0 && self.dim > 0 {
                    for (b, block) in self.data.chunks(SCAN_BLOCK * self.dim).enumerate() {
                        let base = b * SCAN_BLOCK;
                        for ((q, exclude), top) in group.iter().zip(tops.iter_mut()) {
                            for (j, v) in block.chunks_exact(self.dim).enumerate() {
                                let i = base + j;
                                if Some(i) == *exclude {
                                    continue;
                                }
                                top.offer(self.candidate(i, squared_distance(q, v)));
                            }
                        }
                    }
                }
                tops.into_iter()
                    .map(|t| self.hits(t.into_sorted()))
                    .collect()
            })
            .collect();
        Ok(results.into_iter().flatten().collect())
    }

    /// 1-based ranks that the gallery positions `targets` would receive in the
    /// full ranking for `query` (with `exclude` removed from the gallery).
    pub fn ranks_of(
        &self,
        query: &[f32],
        targets: &[usize],
        exclude: Option<usize>,
    ) -> Result<Vec<usize>> {
        self.check_query(query)?;
        let dists: Vec<f32> = self
            .data
            .chunks_exact(self.dim.max(1))
            .map(|v| squared_distance(query, v))
            .collect();
        let keys: Vec<Candidate> = targets
            .iter()
            .map(|&t| self.candidate(t, dists[t]))
            .collect();
        let mut ranks = vec![1usize; targets.len()];
        for (i, &d) in dists.iter().enumerate() {
            if Some(i) == exclude {
                continue;
            }
            let c = self.candidate(i, d);
            for (r, key) in ranks.iter_mut().zip(&keys) {
                if c < *key {
                    *r += 1;
                }
            }
        }
        Ok(ranks)
    }
}

/// Query id to the set of relevant gallery ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruth {
    relevant: BTreeMap<String, BTreeSet<String>>,
}

impl GroundTruth {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query: impl Into<String>, relevant: impl Into<String>) {
        self.relevant
            .entry(query.into())
            .or_default()
            .insert(relevant.into());
    }

    /// Every member of each group is a query whose relevant set is the
    /// whole group (including itself).
    pub fn from_groups<I, G, S>(groups: I) -> Self
    where
        I: IntoIterator<Item = G>,
        G: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut gt = Self::new();
        for g in groups {
            let members: Vec<String> = g.into_iter().map(Into::into).collect();
            for q in &members {
                for r in &members {
                    gt.insert(q.clone(), r.clone());
                }
            }
        }
        gt
    }

    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.relevant.keys().map(String::as_str)
    }

    pub fn relevant(&self, query: &str) -> Option<&BTreeSet<String>> {
        self.relevant.get(query)
    }

    pub fn len(&self) -> usize {
        self.relevant.len()
    }

    pub fn is_empty(&self) -> bool {
        self.relevant.is_empty()
    }

    /// Parse `query_id,relevant_id` lines. A leading `query_id,relevant_id`
    /// header is skipped; blank lines are ignored.
    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .flexible(true)
            .from_reader(text.as_bytes());
        let mut gt = Self::new();
        for (line, rec) in reader.records().enumerate() {
            let rec =
                rec.map_err(|e| Error::Eval(format!("ground truth line {}: {e}", line + 1)))?;
            if rec.iter().all(|f| f.is_empty()) {
                continue;
            }
            if rec.len() != 2 {
                return Err(Error::Eval(format!(
                    "ground truth line {}: expected `query_id,relevant_id`",
                    line + 1
                )));
            }
            if line == 0 && &rec[0] == "query_id" && &rec[1] == "relevant_id" {
                continue;
            }
            gt.insert(&rec[0], &rec[1]);
        }
        Ok(gt)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("query_id,relevant_id\n");
        for (q, rel) in &self.relevant {
            for r in rel {
                out.push_str(&format!("{q},{r}\n"));
            }
        }
        out
    }

    /// Every referenced id must exist in the gallery.
    pub fn validate(&self, index: &DescriptorIndex) -> Result<()> {
        for (q, rel) in &self.relevant {
            if let Some(missing) = rel.iter().find(|r| index.position(r).is_none()) {
                return Err(Error::Eval(format!(
                    "relevant id `{missing}` for query `{q}` is not in the gallery"
                )));
            }
        }
        Ok(())
    }
}

/// NAR from the 1-based ranks of the relevant items in a ranking of `n` items.
pub fn nar_from_ranks(ranks: &[usize], n: usize) -> Result<f64> {
    let nr = ranks.len();
    if nr == 0 {
        return Err(Error::Eval("NAR needs at least one relevant item".into()));
    }
    if n == 0 || ranks.iter().any(|&r| r == 0 || r > n) {
        return Err(Error::Eval(format!("ranks {ranks:?} out of range 1..={n}")));
    }
    let sum: f64 = ranks.iter().map(|&r| r as f64).sum();
    let ideal = (nr * (nr + 1)) as f64 / 2.0;
    Ok((sum - ideal) / (n as f64 * nr as f64))
}

/// NAR of a full gallery ranking of `n` items.
pub fn nar<S: AsRef<str>>(ranking: &[S], relevant: &BTreeSet<String>, n: usize) -> Result<f64> {
    let mut ranks = Vec::with_capacity(relevant.len());
    for (i, id) in ranking.iter().enumerate() {
        if relevant.contains(id.as_ref()) {
            ranks.push(i + 1);
        }
    }
    if ranks.len() != relevant.len() {
        return Err(Error::Eval(format!(
            "{} of {} relevant items missing from the ranking",
            relevant.len() - ranks.len(),
            relevant.len()
        )));
    }
    nar_from_ranks(&ranks, n)
}

/// Average precision over the first `k` ranked ids, normalized by
/// `min(|relevant|, k)`.
pub fn average_precision_at_k<S: AsRef<str>>(
    ranking: &[S],
    relevant: &BTreeSet<String>,
    k: usize,
) -> f64 {
    if relevant.is_empty() || k == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, id) in ranking.iter().take(k).enumerate() {
        if relevant.contains(id.as_ref()) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / relevant.len().min(k) as f64
}

/// Mean AP@K over the queries in `rankings` (query id, ranked gallery ids).
/// Queries without relevant items are skipped with a warning.
pub fn map_at_k<S: AsRef<str>>(
    rankings: &[(String, Vec<S>)],
    gt: &GroundTruth,
    k: usize,
) -> Result<f64> {
    if k == 0 {
        return Err(Error::Eval("MAP@K needs K >= 1".into()));
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    for (q, ranking) in rankings {
        match gt.relevant(q) {
            Some(rel) if !rel.is_empty() => {
                total += average_precision_at_k(ranking, rel, k);
                counted += 1;
            }
            _ => log::warn!("query `{q}` has no relevant items; excluded from MAP"),
        }
    }
    if counted == 0 {
        return Err(Error::Eval("no query with relevant items".into()));
    }
    Ok(total / counted as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    pub topk: usize,
    /// Remove a query's own gallery entry from its ranking.
    pub exclude_self: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            topk: DEFAULT_TOPK,
            exclude_self: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QueryEval {
    pub query_id: String,
    pub nar: f64,
    pub ap: f64,
    pub relevant: usize,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub rankings: Vec<RankingResult>,
    pub per_query: Vec<QueryEval>,
    pub nar: f64,
    pub map: f64,
    pub topk: usize,
}

impl Evaluation {
    /// `metric<TAB>value` lines.
    pub fn report(&self) -> String {
        format!(
            "queries\t{}\nNAR\t{:.6}\nMAP@{}\t{:.6}\n",
            self.per_query.len(),
            self.nar,
            self.topk,
            self.map
        )
    }

    /// `query_id<TAB>rank<TAB>gallery_id<TAB>distance` lines.
    pub fn write_rankings<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        write_rankings(w, &self.rankings)
    }
}

pub fn write_rankings<W: Write>(w: &mut W, rankings: &[RankingResult]) -> std::io::Result<()> {
    for r in rankings {
        for (i, h) in r.hits.iter().enumerate() {
            writeln!(w, "{}\t{}\t{}\t{}", r.query_id, i + 1, h.id, h.distance)?;
        }
    }
    Ok(())
}

/// Parse rankings written by [`write_rankings`].
pub fn parse_rankings(text: &str) -> Result<Vec<RankingResult>> {
    let mut out: Vec<RankingResult> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let bad = || Error::Eval(format!("rankings line {}: malformed `{line}`", n + 1));
        if f.len() != 4 {
            return Err(bad());
        }
        let distance: f32 = f[3].parse().map_err(|_| bad())?;
        let hit = Hit {
            index: usize::MAX,
            id: f[2].to_owned(),
            distance,
        };
        match out.last_mut() {
            Some(r) if r.query_id == f[0] => r.hits.push(hit),
            _ => out.push(RankingResult {
                query_id: f[0].to_owned(),
                hits: vec![hit],
            }),
        }
    }
    Ok(out)
}

/// Rank the gallery for every ground-truth query and compute NAR (over the
/// full gallery) and MAP@`topk`.
///
/// Query vectors come from `queries` when given, else from the index by id.
pub fn evaluate(
    index: &DescriptorIndex,
    queries: Option<&DescriptorSet>,
    gt: &GroundTruth,
    opts: EvalOptions,
) -> Result<Evaluation> {
    gt.validate(index)?;
    let query_lookup: Option<HashMap<&str, usize>> = queries.map(|q| {
        q.ids()
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect()
    });

    struct Prepared<'a> {
        id: &'a str,
        vector: &'a [f32],
        exclude: Option<usize>,
        relevant: Vec<usize>,
        relevant_ids: BTreeSet<String>,
    }
    let mut prepared = Vec::new();
    for q in gt.queries() {
        let vector = match (&query_lookup, queries) {
            (Some(l), Some(set)) => l.get(q).map(|&i| set.get(i)),
            _ => index.get(q),
        }
        .ok_or_else(|| Error::Eval(format!("no descriptor for query `{q}`")))?;
        let exclude = if opts.exclude_self {
            index.position(q)
        } else {
            None
        };
        let relevant_ids: BTreeSet<String> = gt
            .relevant(q)
            .into_iter()
            .flatten()
            .filter(|r| !(opts.exclude_self && r.as_str() == q))
            .cloned()
            .collect();
        if relevant_ids.is_empty() {
            log::warn!("query `{q}` has no relevant items besides itself; skipped");
            continue;
        }
        let relevant = relevant_ids
            .iter()
            .map(|r| index.position(r).expect("validated"))
            .collect();
        prepared.push(Prepared {
            id: q,
            vector,
            exclude,
            relevant,
            relevant_ids,
        });
    }
    if prepared.is_empty() {
        return Err(Error::Eval("no evaluable queries".into()));
    }

    let batch: Vec<(&[f32], Option<usize>)> =
        prepared.iter().map(|p| (p.vector, p.exclude)).collect();
    let hits = index.search_batch(&batch, opts.topk)?;
    let per_query = prepared
        .par_iter()
        .zip(&hits)
        .map(|(p, h)| {
            let n = index.len() - usize::from(p.exclude.is_some());
            let ranks = index.ranks_of(p.vector, &p.relevant, p.exclude)?;
            let ids: Vec<&str> = h.iter().map(|x| x.id.as_str()).collect();
            Ok(QueryEval {
                query_id: p.id.to_owned(),
                nar: nar_from_ranks(&ranks, n)?,
                ap: average_precision_at_k(&ids, &p.relevant_ids, opts.topk),
                relevant: p.relevant.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let count = per_query.len() as f64;
    let nar = per_query.iter().map(|q| q.nar).sum::<f64>() / count;
    let map = per_query.iter().map(|q| q.ap).sum::<f64>() / count;
    let rankings = prepared
        .iter()
        .zip(hits)
        .map(|(p, hits)| RankingResult {
            query_id: p.id.to_owned(),
            hits,
        })
        .collect();
    Ok(Evaluation {
        rankings,
        per_query,
        nar,
        map,
        topk: opts.topk,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(rows: &[(&str, [f32; 2])]) -> DescriptorSet {
        let mut s = DescriptorSet::new(2);
        for (id, v) in rows {
            s.push(*id, v).unwrap();
        }
        s
    }

    fn rel(ids: &[&str]) -> BTreeSet<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn empty_and_small_index() {
        let idx = build_index(DescriptorSet::new(4)).unwrap();
        assert_eq!(idx.len(), 0);
        assert!(idx.search(&[0.0; 4], 5).unwrap().is_empty());
        let idx = build_index(set(&[
            ("a", [1.0, 0.0]),
            ("b", [0.0, 1.0]),
            ("c", [0.6, 0.8]),
        ]))
        .unwrap();
        assert_eq!(idx.len(), 3);
        assert_eq!(idx.get("c").unwrap(), &[0.6, 0.8]);
        assert_eq!(idx.position("b"), Some(1));
    }

    #[test]
    fn duplicate_ids_fail_build() {
        let s = set(&[("a", [1.0, 0.0]), ("a", [0.0, 1.0])]);
        assert!(matches!(build_index(s), Err(Error::Contract(_))));
    }

    #[test]
    fn non_unit_vectors_rejected() {
        assert!(build_index(set(&[("a", [3.0, 4.0])])).is_err());
        assert!(build_index(set(&[("z", [0.0, 0.0])])).is_ok());
    }

    #[test]
    fn exact_match_first_and_ties_by_id() {
        let idx = build_index(set(&[
            ("d", [0.0, 1.0]),
            ("b", [0.0, 1.0]),
            ("a", [1.0, 0.0]),
            ("c", [0.0, 1.0]),
        ]))
        .unwrap();
        let hits = idx.search(&[1.0, 0.0], 4).unwrap();
        assert_eq!(hits[0].id, "a");
        assert_eq!(hits[0].distance, 0.0);
        let order: Vec<&str> = hits.iter().map(|h| h.id.as_str()).collect();
        assert_eq!(order, vec!["a", "b", "c", "d"]);
        assert_eq!(idx.search(&[1.0, 0.0], 2).unwrap().len(), 2);
        assert!(matches!(idx.search(&[1.0], 2), Err(Error::Contract(_))));
    }

    #[test]
    fn exclude_self() {
        let idx = build_index(set(&[("a", [1.0, 0.0]), ("b", [0.0, 1.0])])).unwrap();
        let hits = idx.search_excluding(&[1.0, 0.0], 5, Some(0)).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].id, "b");
        assert_eq!(idx.ranks_of(&[1.0, 0.0], &[1], Some(0)).unwrap(), vec![1]);
        assert_eq!(idx.ranks_of(&[1.0, 0.0], &[1], None).unwrap(), vec![2]);
    }

    #[test]
    fn nar_worked_examples() {
        assert_eq!(nar_from_ranks(&[1, 2, 3], 50).unwrap(), 0.0);
        assert!((nar_from_ranks(&[9, 10], 10).unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(nar_from_ranks(&[1], 7).unwrap(), 0.0);
        let ranking: Vec<String> = (0..10).map(|i| format!("g{i}")).collect();
        let v = nar(&ranking, &rel(&["g8", "g9"]), 10).unwrap();
        assert!((v - 0.8).abs() < 1e-12);
        assert!(matches!(
            nar(&ranking, &rel(&["zz"]), 10),
            Err(Error::Eval(_))
        ));
    }

    #[test]
    fn ap_worked_examples() {
        let ranking = ["r1", "x", "r2", "y"];
        let ap = average_precision_at_k(&ranking, &rel(&["r1", "r2"]), 100);
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(
            average_precision_at_k(&["r1", "r2"], &rel(&["r1", "r2"]), 100),
            1.0
        );
        assert_eq!(
            average_precision_at_k(&["x", "y", "r1"], &rel(&["r1"]), 2),
            0.0
        );
        // relevant count above K: normalized by K
        assert_eq!(
            average_precision_at_k(&["a", "b"], &rel(&["a", "b", "c"]), 2),
            1.0
        );
    }

    #[test]
    fn map_skips_queries_without_relevance() {
        let mut gt = GroundTruth::new();
        gt.insert("q1", "a");
        let rankings = vec![
            ("q1".to_string(), vec!["a", "b"]),
            ("q2".to_string(), vec!["b", "a"]),
        ];
        assert_eq!(map_at_k(&rankings, &gt, 100).unwrap(), 1.0);
        assert!(map_at_k(&rankings, &gt, 0).is_err());
    }

    #[test]
    fn ground_truth_csv() {
        let gt = GroundTruth::parse_csv("query_id,relevant_id\nq1,a\nq1, b\n\nq2,c\n").unwrap();
        assert_eq!(gt.len(), 2);
        assert_eq!(gt.relevant("q1").unwrap(), &rel(&["a", "b"]));
        assert_eq!(GroundTruth::parse_csv(&gt.to_csv()).unwrap(), gt);
        assert!(GroundTruth::parse_csv("q1,a,b\n").is_err());
    }

    #[test]
    fn rankings_tsv_roundtrip() {
        let r = vec![RankingResult {
            query_id: "q".into(),
            hits: vec![
                Hit {
                    index: 0,
                    id: "a".into(),
                    distance: 0.0,
                },
                Hit {
                    index: 1,
                    id: "b".into(),
                    distance: 0.25,
                },
            ],
        }];
        let mut buf = Vec::new();
        write_rankings(&mut buf, &r).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "q\t1\ta\t0\nq\t2\tb\t0.25\n");
        let back = parse_rankings(&text).unwrap();
        assert_eq!(back[0].hits[1].id, "b");
    }

    #[test]
    fn evaluate_small_gallery() {
        let idx = build_index(set(&[
            ("a1", [1.0, 0.0]),
            ("a2", [0.995, 0.0998]),
            ("b1", [0.0, 1.0]),
            ("b2", [0.0998, 0.995]),
        ]))
        .unwrap();
        let gt = GroundTruth::from_groups([vec!["a1", "a2"], vec!["b1", "b2"]]);
        let ev = evaluate(
            &idx,
            None,
            &gt,
            EvalOptions {
                topk: 10,
                exclude_self: true,
            },
        )
        .unwrap();
        assert_eq!(ev.per_query.len(), 4);
        assert_eq!(ev.map, 1.0);
        assert_eq!(ev.nar, 0.0);
        assert!(ev.report().contains("MAP@10\t1.000000"));
    }
}
