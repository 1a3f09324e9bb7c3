//! Skipgram embeddings with negative sampling over the joint vocabulary.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One vector per vocabulary token.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSpace {
    pub tokens: Vec<String>,
    pub matrix: Tensor,
    pub normalized: bool,
}

impl EmbeddingSpace {
    pub fn new(tokens: Vec<String>, matrix: Tensor) -> Result<Self> {
        if matrix.ndim() != 2 || matrix.shape()[0] != tokens.len() {
            return Err(Error::Invalid(format!(
                "embedding matrix {:?} does not match {} tokens",
                matrix.shape(),
                tokens.len()
            )));
        }
        Ok(EmbeddingSpace {
            tokens,
            matrix,
            normalized: false,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrix.last_dim()
    }

    pub fn row(&self, id: usize) -> &[f64] {
        self.matrix.row(id)
    }

    /// Copy with every row scaled to unit length (zero rows stay zero).
    pub fn normalized(&self) -> EmbeddingSpace {
        EmbeddingSpace {
            tokens: self.tokens.clone(),
            matrix: normalize_rows(&self.matrix),
            normalized: true,
        }
    }

    pub fn mean_norm(&self) -> f64 {
        let n = self.len().max(1) as f64;
        (0..self.len())
            .map(|i| self.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
            .sum::<f64>()
            / n
    }

    /// Text format: `n d` header, then `token v1 .. vd` per line.
    pub fn to_text(&self) -> String {
        let mut s = format!("{} {}\n", self.len(), self.dim());
        for (i, t) in self.tokens.iter().enumerate() {
            s.push_str(t);
            for v in self.row(i) {
                let _ = write!(s, " {v}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let perr = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| perr(1, "missing header".into()))?;
        let mut hs = header.split_whitespace().map(str::parse::<usize>);
        let (n, d) = match (hs.next(), hs.next()) {
            (Some(Ok(n)), Some(Ok(d))) => (n, d),
            _ => return Err(perr(1, "header must be `n d`".into())),
        };
        let mut tokens = Vec::with_capacity(n);
        let mut data = Vec::with_capacity(n * d);
        for (i, line) in lines.enumerate() {
            let mut parts = line.split(' ');
            let tok = parts.next().unwrap_or_default();
            let vals: std::result::Result<Vec<f64>, _> = parts.map(str::parse::<f64>).collect();
            let vals = vals.map_err(|e| perr(i + 2, e.to_string()))?;
            if vals.len() != d {
                return Err(perr(i + 2, format!("expected {d} values, found {}", vals.len())));
            }
            tokens.push(tok.to_string());
            data.extend(vals);
        }
        if tokens.len() != n {
            return Err(perr(1, format!("header promises {n} rows, found {}", tokens.len())));
        }
        Self::new(tokens, Tensor::new(vec![n, d], data)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::datakit::write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::datakit::read_utf8(path)?;
        Self::from_text(&text, path)
    }
}

pub fn normalize_rows(m: &Tensor) -> Tensor {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let r = out.row_mut(i);
        let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            r.iter_mut().for_each(|x| *x /= n);
        }
    }
    out
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SkipgramConfig {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for SkipgramConfig {
    fn default() -> Self {
        SkipgramConfig {
            dim: 64,
            window: 5,
            negatives: 5,
            epochs: 5,
            lr: 0.025,
            seed: 1,
        }
    }
}

fn fast_sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x.clamp(-30.0, 30.0)).exp())
}

/// Trains input vectors for every token id in `[0, vocab_size)`.
/// Tokens that never occur keep their small random initialization.
pub fn train_skipgram(corpus: &[Vec<u32>], tokens: &[String], cfg: &SkipgramConfig) -> Result<EmbeddingSpace> {
    let n = tokens.len();
    let d = cfg.dim;
    if d < 4 {
        return Err(Error::Invalid(format!("skipgram dimension {d} must be at least 4")));
    }
    let total: usize = corpus.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::EmptyCorpus("skipgram corpus has no tokens".into()));
    }
    let mut counts = vec![0u64; n];
    for s in corpus {
        for &t in s {
            let t = t as usize;
            if t >= n {
                return Err(Error::TokenOutOfRange { id: t as u32, size: n });
            }
            counts[t] += 1;
        }
    }
    // unigram^0.75 noise, sampled by binary search over the cumulative mass
    let mut cum = Vec::with_capacity(n);
    let mut acc = 0.0;
    for &c in &counts {
        acc += (c as f64).powf(0.75);
        cum.push(acc);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut input: Vec<f64> = (0..n * d).map(|_| (rng.gen::<f64>() - 0.5) / d as f64).collect();
    let mut output = vec![0.0; n * d];
    let mut grad = vec![0.0; d];
    let steps_total = (total * cfg.epochs) as f64;
    let mut seen = 0usize;
    let min_lr = cfg.lr * 1e-4;
    for _ in 0..cfg.epochs {
        for sent in corpus {
            for (pos, &center) in sent.iter().enumerate() {
                let lr = (cfg.lr * (1.0 - seen as f64 / steps_total)).max(min_lr);
                seen += 1;
                let b = rng.gen_range(1..=cfg.window.max(1));
                let lo = pos.saturating_sub(b);
                let hi = (pos + b).min(sent.len() - 1);
                for ctx_pos in lo..=hi {
                    if ctx_pos == pos {
                        continue;
                    }
                    let ctx = sent[ctx_pos] as usize;
                    let inp = &mut input[center as usize * d..(center as usize + 1) * d];
                    grad.iter_mut().for_each(|g| *g = 0.0);
                    for k in 0..=cfg.negatives {
                        let (target, label) = if k == 0 {
                            (ctx, 1.0)
                        } else {
                            let r = rng.gen::<f64>() * acc;
                            let t = cum.partition_point(|&c| c <= r).min(n - 1);
                            if t == ctx {
                                continue;
                            }
                            (t, 0.0)
                        };
                        let out = &mut output[target * d..(target + 1) * d];
                        let dot: f64 = inp.iter().zip(out.iter()).map(|(a, b)| a * b).sum();
                        let g = (label - fast_sigmoid(dot)) * lr;
                        for j in 0..d {
                            grad[j] += g * out[j];
                            out[j] += g * inp[j];
                        }
                    }
                    inp.iter_mut().zip(&grad).for_each(|(x, g)| *x += g);
                }
            }
        }
    }
    EmbeddingSpace::new(tokens.to_vec(), Tensor::new(vec![n, d], input)?)
}

/// Top-`k` tokens by cosine similarity to `token`, excluding the token
/// itself; ties keep the smaller id first.
pub fn nearest_neighbors(space: &EmbeddingSpace, token: usize, k: usize) -> Result<Vec<(usize, f64)>> {
    let n = space.len();
    if token >= n {
        return Err(Error::TokenOutOfRange {
            id: token as u32,
            size: n,
        });
    }
    if k >= n {
        return Err(Error::Invalid(format!("k = {k} must be below the {n} rows")));
    }
    let q = space.row(token);
    let mut scored: Vec<(usize, f64)> = (0..n)
        .filter(|&i| i != token)
        .map(|i| (i, cosine(q, space.row(i))))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space(rows: &[Vec<f64>]) -> EmbeddingSpace {
        let tokens = (0..rows.len()).map(|i| format!("t{i}")).collect();
        EmbeddingSpace::new(tokens, Tensor::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn cooccurring_tokens_are_closer() {
        let tokens: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
        let mut corpus = Vec::new();
        for _ in 0..10000 {
            corpus.push(vec![0, 1]);
            corpus.push(vec![2, 3]);
        }
        let mut margins = Vec::new();
        for seed in 0..3 {
            let cfg = SkipgramConfig {
                dim: 16,
                epochs: 1,
                seed,
                ..Default::default()
            };
            let sp = train_skipgram(&corpus, &tokens, &cfg).unwrap();
            assert_eq!(sp.matrix.shape(), &[4, 16]);
            margins.push(cosine(sp.row(0), sp.row(1)) - cosine(sp.row(0), sp.row(2)));
        }
        margins.sort_by(f64::total_cmp);
        assert!(margins[1] > 0.0, "{margins:?}");
    }

    #[test]
    fn same_seed_same_matrix() {
        let tokens: Vec<String> = (0..5).map(|i| i.to_string()).collect();
        let corpus = vec![vec![0, 1, 2, 3, 4]; 50];
        let cfg = SkipgramConfig {
            dim: 8,
            epochs: 2,
            ..Default::default()
        };
        let a = train_skipgram(&corpus, &tokens, &cfg).unwrap();
        let b = train_skipgram(&corpus, &tokens, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(matches!(train_skipgram(&[], &tokens, &cfg), Err(Error::EmptyCorpus(_))));
    }

    #[test]
    fn duplicate_row_ranks_first() {
        let sp = space(&[vec![1.0, 2.0, 0.5], vec![0.0, 1.0, 0.0], vec![1.0, 2.0, 0.5]]);
        let nn = nearest_neighbors(&sp, 0, 2).unwrap();
        assert_eq!(nn[0].0, 2);
        assert!((nn[0].1 - 1.0).abs() < 1e-12);
        assert!(nearest_neighbors(&sp, 3, 1).is_err());
        assert!(nearest_neighbors(&sp, 0, 3).is_err());
    }

    #[test]
    fn hand_computed_cosines() {
        let sp = space(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        assert_eq!(cosine(sp.row(0), sp.row(1)), 0.0);
        let nn = nearest_neighbors(&sp, 0, 2).unwrap();
        assert_eq!(nn[0].0, 2);
        assert!((nn[0].1 - 1.0 / 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(nn[1], (1, 0.0));
    }

    #[test]
    fn ranking_invariant_under_scaling() {
        let rows = vec![vec![0.3, -1.0, 2.0], vec![1.0, 1.0, 1.0], vec![-0.5, 0.2, 0.9], vec![2.0, 0.0, -1.0]];
        let scaled: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|x| x * 7.5).collect()).collect();
        let a = nearest_neighbors(&space(&rows), 0, 3).unwrap();
        let b = nearest_neighbors(&space(&scaled), 0, 3).unwrap();
        let ids = |v: &[(usize, f64)]| v.iter().map(|x| x.0).collect::<Vec<_>>();
        assert_eq!(ids(&a), ids(&b));
        assert!((cosine(&rows[0], &rows[0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn text_round_trip() {
        let sp = space(&[vec![0.1, -2.5e-7], vec![3.0, 1.0 / 3.0]]);
        let back = EmbeddingSpace::from_text(&sp.to_text(), Path::new("mem")).unwrap();
        assert_eq!(back, sp);
        assert!(EmbeddingSpace::from_text("2 2\nx 1 2\n", Path::new("mem")).is_err());
    }
}
