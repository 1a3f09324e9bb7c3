//! IBM Model 1 word alignment in both directions, symmetrization into a
//! per-target alignment, the reorder vector, and Pharaoh-format I/O.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Per target position, the aligned source index or `None` for NULL.
pub type Alignment = Vec<Option<usize>>;

/// Sentinel source id standing for the NULL word.
pub const NULL_ID: u32 = u32::MAX;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TranslationTable {
    /// t(f | e), keyed by (e, f); `e` may be `NULL_ID`.
    probs: HashMap<(u32, u32), f64>,
    /// Corpus log-likelihood after each EM iteration.
    pub log_likelihood: Vec<f64>,
}

impl TranslationTable {
    pub fn prob(&self, e: u32, f: u32) -> f64 {
        self.probs.get(&(e, f)).copied().unwrap_or(0.0)
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// `e<TAB>f<TAB>prob` lines sorted by `(e, f)`; NULL is written as `NULL`.
    pub fn to_tsv(&self) -> String {
        let mut keys: Vec<&(u32, u32)> = self.probs.keys().collect();
        keys.sort();
        let mut s = String::new();
        for k in keys {
            let e = if k.0 == NULL_ID { "NULL".to_string() } else { k.0.to_string() };
            let _ = writeln!(s, "{e}\t{}\t{:e}", k.1, self.probs[k]);
        }
        s
    }

    pub fn from_tsv(text: &str, path: &Path) -> Result<Self> {
        let mut probs = HashMap::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
            let perr = |msg: &str| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                msg: msg.to_string(),
            };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(perr("expected e, f and probability"));
            }
            let e = if f[0] == "NULL" { NULL_ID } else { f[0].parse().map_err(|_| perr("bad source id"))? };
            let t = f[1].parse().map_err(|_| perr("bad target id"))?;
            let p: f64 = f[2].parse().map_err(|_| perr("bad probability"))?;
            probs.insert((e, t), p);
        }
        Ok(TranslationTable {
            probs,
            log_likelihood: Vec::new(),
        })
    }

    /// Sum of t(·|e) over every f observed with `e`.
    pub fn row_sum(&self, e: u32) -> f64 {
        self.probs.iter().filter(|((s, _), _)| *s == e).map(|(_, p)| p).sum()
    }
}

/// Trains t(f|e) where `e` ranges over the first side of each pair plus
/// NULL, and `f` over the second side.
pub fn train_ibm1(pairs: &[(&[u32], &[u32])], iterations: usize) -> Result<TranslationTable> {
    if pairs.is_empty() || pairs.iter().all(|(e, f)| e.is_empty() || f.is_empty()) {
        return Err(Error::EmptyCorpus("parallel corpus has no usable pairs".into()));
    }

    // uniform over co-occurring f for each e
    let mut cooc: HashMap<u32, BTreeSet<u32>> = HashMap::new();
    for (e, f) in pairs {
        for &ei in e.iter().chain(std::iter::once(&NULL_ID)) {
            cooc.entry(ei).or_default().extend(f.iter().copied());
        }
    }
    let mut probs = HashMap::new();
    for (e, fs) in &cooc {
        let u = 1.0 / fs.len() as f64;
        for &f in fs {
            probs.insert((*e, f), u);
        }
    }

    let mut table = TranslationTable {
        probs,
        log_likelihood: Vec::with_capacity(iterations),
    };
    let mut counts: HashMap<(u32, u32), f64> = HashMap::with_capacity(table.probs.len());
    let mut totals: HashMap<u32, f64> = HashMap::new();
    let mut src = Vec::new();
    for _ in 0..iterations {
        counts.clear();
        totals.clear();
        let mut ll = 0.0;
        for (e, f) in pairs {
            if e.is_empty() || f.is_empty() {
                continue;
            }
            src.clear();
            src.push(NULL_ID);
            src.extend_from_slice(e);
            let norm = (src.len() as f64).ln();
            for &fj in f.iter() {
                let z: f64 = src.iter().map(|&ei| table.prob(ei, fj)).sum();
                ll += z.ln() - norm;
                for &ei in &src {
                    let c = table.prob(ei, fj) / z;
                    *counts.entry((ei, fj)).or_insert(0.0) += c;
                    *totals.entry(ei).or_insert(0.0) += c;
                }
            }
        }
        for (key, p) in table.probs.iter_mut() {
            let tot = totals.get(&key.0).copied().unwrap_or(0.0);
            *p = if tot > 0.0 {
                counts.get(key).copied().unwrap_or(0.0) / tot
            } else {
                0.0
            };
        }
        table.log_likelihood.push(ll);
    }
    Ok(table)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Symmetrize {
    Intersect,
    #[default]
    GrowDiag,
}

impl std::str::FromStr for Symmetrize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "intersect" => Ok(Symmetrize::Intersect),
            "grow-diag" => Ok(Symmetrize::GrowDiag),
            other => Err(Error::Config(format!("unknown symmetrization `{other}`"))),
        }
    }
}

fn diag_dist(i: usize, j: usize, src_len: usize, tgt_len: usize) -> f64 {
    (i as f64 / src_len as f64 - j as f64 / tgt_len as f64).abs()
}

/// Best link per position in one direction. `scores[k][c]` is the score of
/// candidate `c` for position `k` and `null[k]` that of NULL; a word tied with
/// NULL beats it. Positions with a unique best candidate are anchors, and a
/// least-squares line through them (in relative coordinates) orients the
/// sentence. Positions tied across several candidates (repeated words) are
/// paired monotonically along that line when the counts agree, and otherwise
/// take the candidate nearest to it. Without two distinct anchors the line is
/// the main diagonal.
fn directional_links(scores: &[Vec<f64>], null: &[f64], n_cand: usize) -> Vec<Option<usize>> {
    let n = scores.len();
    let ties: Vec<Option<Vec<usize>>> = scores
        .iter()
        .zip(null)
        .map(|(row, &z)| {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if row.is_empty() || z > m {
                return None;
            }
            Some((0..n_cand).filter(|&c| row[c] == m).collect())
        })
        .collect();
    let rel = |k: usize, len: usize| if len > 1 { k as f64 / (len - 1) as f64 } else { 0.5 };
    let anchors: Vec<(f64, f64)> = ties
        .iter()
        .enumerate()
        .filter_map(|(k, t)| match t.as_deref() {
            Some([c]) => Some((rel(k, n), rel(*c, n_cand))),
            _ => None,
        })
        .collect();
    let (mut icpt, mut slope) = (0.0, 1.0);
    if anchors.len() >= 2 {
        let m = anchors.len() as f64;
        let mx = anchors.iter().map(|p| p.0).sum::<f64>() / m;
        let my = anchors.iter().map(|p| p.1).sum::<f64>() / m;
        let sxx: f64 = anchors.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let sxy: f64 = anchors.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        if sxx > 0.0 {
            slope = sxy / sxx;
            icpt = my - slope * mx;
        }
    }

    let mut out = vec![None; n];
    let mut groups: BTreeMap<Vec<usize>, Vec<usize>> = BTreeMap::new();
    for (k, t) in ties.into_iter().enumerate() {
        match t {
            Some(t) if t.len() == 1 => out[k] = Some(t[0]),
            Some(t) => groups.entry(t).or_default().push(k),
            None => {}
        }
    }
    for (mut cands, positions) in groups {
        if cands.len() == positions.len() {
            if slope < 0.0 {
                cands.reverse();
            }
            for (k, c) in positions.into_iter().zip(cands) {
                out[k] = Some(c);
            }
            continue;
        }
        for k in positions {
            let want = icpt + slope * rel(k, n);
            out[k] = cands.iter().copied().min_by(|&a, &b| {
                let (da, db) = ((rel(a, n_cand) - want).abs(), (rel(b, n_cand) - want).abs());
                da.partial_cmp(&db).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
            });
        }
    }
    out
}

/// Aligns one sentence pair. `fwd` is t(y|x) trained source→target and
/// `rev` is t(x|y) trained target→source.
pub fn align_pair(
    x: &[u32],
    y: &[u32],
    fwd: &TranslationTable,
    rev: &TranslationTable,
    mode: Symmetrize,
) -> Result<Alignment> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::Invalid("cannot align an empty sentence".into()));
    }
    let (t, tp) = (x.len(), y.len());

    // forward: each target position picks a source word
    let scores: Vec<Vec<f64>> = y.iter().map(|&yj| x.iter().map(|&xi| fwd.prob(xi, yj)).collect()).collect();
    let null: Vec<f64> = y.iter().map(|&yj| fwd.prob(NULL_ID, yj)).collect();
    let fwd_links: BTreeSet<(usize, usize)> = directional_links(&scores, &null, t)
        .into_iter()
        .enumerate()
        .filter_map(|(j, i)| i.map(|i| (i, j)))
        .collect();
    // reverse: each source position picks a target word
    let scores: Vec<Vec<f64>> = x.iter().map(|&xi| y.iter().map(|&yj| rev.prob(yj, xi)).collect()).collect();
    let null: Vec<f64> = x.iter().map(|&xi| rev.prob(NULL_ID, xi)).collect();
    let rev_links: BTreeSet<(usize, usize)> = directional_links(&scores, &null, tp)
        .into_iter()
        .enumerate()
        .filter_map(|(i, j)| j.map(|j| (i, j)))
        .collect();

    let mut links: BTreeSet<(usize, usize)> = fwd_links.intersection(&rev_links).copied().collect();
    if mode == Symmetrize::GrowDiag {
        let union: BTreeSet<(usize, usize)> = fwd_links.union(&rev_links).copied().collect();
        loop {
            let mut added = false;
            let snapshot: Vec<(usize, usize)> = links.iter().copied().collect();
            for (i, j) in snapshot {
                for (di, dj) in [(-1i64, 0i64), (0, -1), (1, 0), (0, 1), (-1, -1), (-1, 1), (1, -1), (1, 1)] {
                    let (ni, nj) = (i as i64 + di, j as i64 + dj);
                    if ni < 0 || nj < 0 || ni >= t as i64 || nj >= tp as i64 {
                        continue;
                    }
                    let cand = (ni as usize, nj as usize);
                    if links.contains(&cand) || !union.contains(&cand) {
                        continue;
                    }
                    let src_free = !links.iter().any(|&(a, _)| a == cand.0);
                    let tgt_free = !links.iter().any(|&(_, b)| b == cand.1);
                    if src_free || tgt_free {
                        links.insert(cand);
                        added = true;
                    }
                }
            }
            if !added {
                break;
            }
        }
    }

    // one source per target position
    let mut out = vec![None; tp];
    for (j, slot) in out.iter_mut().enumerate() {
        let cands: Vec<usize> = links.iter().filter(|&&(_, b)| b == j).map(|&(a, _)| a).collect();
        *slot = cands.into_iter().min_by(|&a, &b| {
            diag_dist(a, j, t, tp)
                .partial_cmp(&diag_dist(b, j, t, tp))
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
    }
    Ok(out)
}

/// O[j] = aligned source index, or `src_len` (the [P] slot) for NULL.
pub fn to_order(a: &[Option<usize>], src_len: usize) -> Result<Vec<usize>> {
    a.iter()
        .map(|&link| match link {
            Some(i) if i >= src_len => Err(Error::AlignmentIndex { index: i, len: src_len }),
            Some(i) => Ok(i),
            None => Ok(src_len),
        })
        .collect()
}

/// `i-j` pairs separated by spaces; NULL targets are omitted.
pub fn emit_pharaoh(a: &[Option<usize>]) -> String {
    let mut s = String::new();
    for (j, link) in a.iter().enumerate() {
        if let Some(i) = link {
            if !s.is_empty() {
                s.push(' ');
            }
            let _ = write!(s, "{i}-{j}");
        }
    }
    s
}

/// Raw `(i, j)` pairs from one Pharaoh line.
pub fn parse_pharaoh_pairs(line: &str, line_no: usize, path: &Path) -> Result<Vec<(usize, usize)>> {
    line.split_whitespace()
        .map(|tok| {
            let bad = || Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                msg: format!("malformed alignment token `{tok}`"),
            };
            let (i, j) = tok.split_once('-').ok_or_else(bad)?;
            Ok((i.parse().map_err(|_| bad())?, j.parse().map_err(|_| bad())?))
        })
        .collect()
}

/// Parses one line against a known target length, restoring NULLs.
pub fn parse_pharaoh(line: &str, tgt_len: usize, line_no: usize, path: &Path) -> Result<Alignment> {
    let mut a = vec![None; tgt_len];
    for (i, j) in parse_pharaoh_pairs(line, line_no, path)? {
        if j >= tgt_len {
            return Err(Error::AlignmentIndex { index: j, len: tgt_len });
        }
        // keep the first link when several sources point at one target
        if a[j].is_none() {
            a[j] = Some(i);
        }
    }
    Ok(a)
}

pub fn write_pharaoh_file(path: &Path, alignments: &[Alignment]) -> Result<()> {
    let mut s = String::new();
    for a in alignments {
        s.push_str(&emit_pharaoh(a));
        s.push('\n');
    }
    crate::datakit::write_atomic(path, s.as_bytes())
}

pub fn read_pharaoh_file(path: &Path, tgt_lens: &[usize]) -> Result<Vec<Alignment>> {
    let text = crate::datakit::read_utf8(path)?;
    let lines: Vec<&str> = text.lines().collect();
    if lines.len() != tgt_lens.len() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: lines.len(),
            msg: format!("expected {} alignment lines, found {}", tgt_lens.len(), lines.len()),
        });
    }
    lines
        .iter()
        .zip(tgt_lens)
        .enumerate()
        .map(|(n, (l, &len))| parse_pharaoh(l, len, n + 1, path))
        .collect()
}

/// Trains both directions and aligns every pair.
pub fn align_corpus(
    pairs: &[(&[u32], &[u32])],
    iterations: usize,
    mode: Symmetrize,
) -> Result<(Vec<Alignment>, TranslationTable, TranslationTable)> {
    let fwd = train_ibm1(pairs, iterations)?;
    let flipped: Vec<(&[u32], &[u32])> = pairs.iter().map(|&(x, y)| (y, x)).collect();
    let rev = train_ibm1(&flipped, iterations)?;
    let aligned = pairs
        .iter()
        .map(|&(x, y)| align_pair(x, y, &fwd, &rev, mode))
        .collect::<Result<Vec<_>>>()?;
    Ok((aligned, fwd, rev))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn table_tsv_round_trip() {
        let pairs: Vec<(&[u32], &[u32])> = vec![(&[1, 2], &[5, 6]), (&[1], &[5])];
        let t = train_ibm1(&pairs, 3).unwrap();
        let back = TranslationTable::from_tsv(&t.to_tsv(), Path::new("t.tsv")).unwrap();
        assert_eq!(back.probs, t.probs);
        assert!(t.to_tsv().contains("NULL\t"));
        assert!(TranslationTable::from_tsv("1\t2\n", Path::new("t.tsv")).is_err());
    }

    /// Plain EM over string tokens with an explicit NULL word.
    fn reference_em(pairs: &[(Vec<&'static str>, Vec<&'static str>)], iters: usize) -> HashMap<(String, String), f64> {
        let mut t: HashMap<(String, String), f64> = HashMap::new();
        let with_null = |e: &Vec<&'static str>| {
            let mut v = vec!["<null>"];
            v.extend(e.iter().copied());
            v
        };
        let mut fanout: HashMap<String, BTreeSet<String>> = HashMap::new();
        for (e, f) in pairs {
            for a in with_null(e) {
                for b in f {
                    fanout.entry(a.to_string()).or_default().insert(b.to_string());
                }
            }
        }
        for (a, bs) in &fanout {
            for b in bs {
                t.insert((a.clone(), b.clone()), 1.0 / bs.len() as f64);
            }
        }
        for _ in 0..iters {
            let mut c: HashMap<(String, String), f64> = HashMap::new();
            let mut tot: HashMap<String, f64> = HashMap::new();
            for (e, f) in pairs {
                let ee = with_null(e);
                for b in f {
                    let z: f64 = ee.iter().map(|a| t[&(a.to_string(), b.to_string())]).sum();
                    for a in &ee {
                        let k = (a.to_string(), b.to_string());
                        let share = t[&k] / z;
                        *c.entry(k).or_default() += share;
                        *tot.entry(a.to_string()).or_default() += share;
                    }
                }
            }
            for (k, v) in t.iter_mut() {
                *v = c[k] / tot[&k.0];
            }
        }
        t
    }

    #[test]
    fn em_hand_case() {
        let pairs = vec![(vec!["a", "b"], vec!["x", "y"]), (vec!["a"], vec!["x"])];
        let oracle = reference_em(&pairs, 10);
        // a=1 b=2, x=11 y=12
        let p1 = ([1u32, 2], [11u32, 12]);
        let p2 = ([1u32], [11u32]);
        let ids: Vec<(&[u32], &[u32])> = vec![(&p1.0, &p1.1), (&p2.0, &p2.1)];
        let t = train_ibm1(&ids, 10).unwrap();
        let key = |a: &str, b: &str| oracle[&(a.to_string(), b.to_string())];
        assert!((t.prob(1, 11) - key("a", "x")).abs() < 1e-12);
        assert!((t.prob(2, 12) - key("b", "y")).abs() < 1e-12);
        assert!((t.prob(NULL_ID, 11) - key("<null>", "x")).abs() < 1e-12);
        assert!(t.prob(1, 11) > 0.94 && t.prob(1, 11) > t.prob(1, 12));
        for w in t.log_likelihood.windows(2) {
            assert!(w[1] >= w[0] - 1e-12);
        }
    }

    #[test]
    fn zero_iterations_is_uniform() {
        let p = ([1u32, 2], [11u32, 12, 13]);
        let t = train_ibm1(&[(&p.0[..], &p.1[..])], 0).unwrap();
        assert!((t.prob(1, 11) - 1.0 / 3.0).abs() < 1e-15);
        assert!((t.prob(NULL_ID, 13) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn rows_normalize() {
        let a = [1u32, 2, 3];
        let b = [7u32, 8];
        let c = [2u32, 3];
        let d = [8u32, 9, 9];
        let t = train_ibm1(&[(&a[..], &b[..]), (&c[..], &d[..])], 4).unwrap();
        for e in [1, 2, 3, NULL_ID] {
            assert!((t.row_sum(e) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_corpus_errors() {
        assert!(train_ibm1(&[], 3).is_err());
    }

    #[test]
    fn dictionary_corpus_aligns_diagonally() {
        let sents: Vec<Vec<u32>> = (0..200u32).map(|k| (0..5).map(|i| (k * 7 + i * 3) % 20).collect()).collect();
        let tgt: Vec<Vec<u32>> = sents.iter().map(|s| s.iter().map(|w| w + 100).collect()).collect();
        let pairs: Vec<(&[u32], &[u32])> = sents.iter().zip(&tgt).map(|(a, b)| (&a[..], &b[..])).collect();
        let (al, _, _) = align_corpus(&pairs, 8, Symmetrize::GrowDiag).unwrap();
        let total: usize = al.iter().map(Vec::len).sum();
        let hits: usize = al
            .iter()
            .map(|a| a.iter().enumerate().filter(|(j, l)| **l == Some(*j)).count())
            .sum();
        assert!(hits as f64 >= 0.99 * total as f64, "{hits}/{total}");
    }

    #[test]
    fn particle_aligns_to_null() {
        // target inserts particle 500 after the first word
        let mut src = Vec::new();
        let mut tgt = Vec::new();
        for k in 0..300u32 {
            let s: Vec<u32> = (0..4).map(|i| (k * 5 + i * 7) % 25).collect();
            let mut t: Vec<u32> = s.iter().map(|w| w + 100).collect();
            t.insert(1, 500);
            src.push(s);
            tgt.push(t);
        }
        let pairs: Vec<(&[u32], &[u32])> = src.iter().zip(&tgt).map(|(a, b)| (&a[..], &b[..])).collect();
        let (al, _, _) = align_corpus(&pairs, 10, Symmetrize::GrowDiag).unwrap();
        let nulls = al.iter().filter(|a| a[1].is_none()).count();
        assert!(nulls as f64 > 0.95 * al.len() as f64, "{nulls}");
    }

    #[test]
    fn repeated_words_follow_reverse_order() {
        let mut src: Vec<Vec<u32>> = (0..300u32).map(|k| (0..5).map(|i| (k * 7 + i * 3) % 20).collect()).collect();
        src.push(vec![1, 2, 1, 3, 4, 1]);
        let tgt: Vec<Vec<u32>> = src.iter().map(|s| s.iter().rev().map(|w| w + 100).collect()).collect();
        let pairs: Vec<(&[u32], &[u32])> = src.iter().zip(&tgt).map(|(a, b)| (&a[..], &b[..])).collect();
        let (al, _, _) = align_corpus(&pairs, 8, Symmetrize::GrowDiag).unwrap();
        let want: Alignment = (0..6).rev().map(Some).collect();
        assert_eq!(al.last().unwrap(), &want);
    }

    #[test]
    fn intersect_of_identical_directions() {
        let x = [1u32, 2];
        let y = [11u32, 12];
        let mut fwd = TranslationTable::default();
        fwd.probs.insert((1, 11), 0.9);
        fwd.probs.insert((2, 12), 0.9);
        let mut rev = TranslationTable::default();
        rev.probs.insert((11, 1), 0.9);
        rev.probs.insert((12, 2), 0.9);
        let a = align_pair(&x, &y, &fwd, &rev, Symmetrize::Intersect).unwrap();
        assert_eq!(a, vec![Some(0), Some(1)]);
    }

    #[test]
    fn order_vector_cases() {
        assert_eq!(to_order(&[Some(2), Some(0), None], 3).unwrap(), vec![2, 0, 3]);
        assert_eq!(to_order(&[Some(0), Some(1)], 2).unwrap(), vec![0, 1]);
        assert_eq!(to_order(&[None, None], 4).unwrap(), vec![4, 4]);
        assert!(to_order(&[Some(3)], 3).is_err());
    }

    #[test]
    fn pharaoh_cases() {
        let p = Path::new("x.align");
        assert_eq!(parse_pharaoh_pairs("0-1 1-0", 1, p).unwrap(), vec![(0, 1), (1, 0)]);
        assert!(parse_pharaoh_pairs("", 1, p).unwrap().is_empty());
        let err = parse_pharaoh_pairs("0-1 x", 7, p).unwrap_err();
        assert!(err.to_string().contains(":7:"), "{err}");
        let a = parse_pharaoh("2-0 0-2", 3, 1, p).unwrap();
        assert_eq!(a, vec![Some(2), None, Some(0)]);
        assert_eq!(emit_pharaoh(&a), "2-0 0-2");
    }

    proptest! {
        #[test]
        fn pharaoh_round_trip(a in proptest::collection::vec(proptest::option::of(0usize..20), 1..15)) {
            let line = emit_pharaoh(&a);
            let back = parse_pharaoh(&line, a.len(), 1, Path::new("p")).unwrap();
            prop_assert_eq!(&back, &a);
            prop_assert_eq!(emit_pharaoh(&back), line);
        }

        #[test]
        fn order_has_target_length(a in proptest::collection::vec(proptest::option::of(0usize..6), 0..12)) {
            let o = to_order(&a, 6).unwrap();
            prop_assert_eq!(o.len(), a.len());
            prop_assert!(o.iter().all(|&i| i <= 6));
        }

        #[test]
        fn em_log_likelihood_monotone(seed in 0u64..50) {
            let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
            let mut next = || { s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); (s >> 33) as u32 };
            let src: Vec<Vec<u32>> = (0..12).map(|_| { let n = 1 + next() % 5; (0..n).map(|_| next() % 8).collect() }).collect();
            let tgt: Vec<Vec<u32>> = (0..12).map(|_| { let n = 1 + next() % 5; (0..n).map(|_| 20 + next() % 8).collect() }).collect();
            let pairs: Vec<(&[u32], &[u32])> = src.iter().zip(&tgt).map(|(a, b)| (&a[..], &b[..])).collect();
            let t = train_ibm1(&pairs, 6).unwrap();
            for w in t.log_likelihood.windows(2) {
                prop_assert!(w[1] >= w[0] - 1e-9);
            }
        }
    }
}
