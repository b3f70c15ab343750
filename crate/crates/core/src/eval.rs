//! Translation metrics and evaluation reports.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tasks::Corpus;

const MAX_ORDER: usize = 4;

fn ngram_counts(tokens: &[u32], n: usize) -> HashMap<&[u32], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU over token-id sequences: clipped 1..4-gram precisions,
/// brevity penalty, and exponential smoothing of zero-match orders (each
/// successive zero count gets precision `1 / (2^k * total)`).
pub fn bleu(hypotheses: &[Vec<u32>], references: &[Vec<u32>]) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(Error::Empty("BLEU corpus"));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::Config(format!(
            "{} hypotheses but {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut correct = [0usize; MAX_ORDER];
    let mut total = [0usize; MAX_ORDER];
    let (mut sys_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        sys_len += h.len();
        ref_len += r.len();
        for n in 1..=MAX_ORDER {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                correct[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
            total[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    let mut log_sum = 0.0;
    let mut smooth = 1.0;
    for n in 0..MAX_ORDER {
        if total[n] == 0 {
            // no n-grams of this order at all: precision 0
            return Ok(0.0);
        }
        let p = if correct[n] == 0 {
            smooth *= 2.0;
            1.0 / (smooth * total[n] as f64)
        } else {
            correct[n] as f64 / total[n] as f64
        };
        log_sum += p.ln();
    }
    let bp = if sys_len == 0 {
        0.0
    } else if sys_len < ref_len {
        (1.0 - ref_len as f64 / sys_len as f64).exp()
    } else {
        1.0
    };
    Ok((100.0 * bp * (log_sum / MAX_ORDER as f64).exp()).clamp(0.0, 100.0))
}

/// Position-wise matches over `Σ max(len_h, len_r)`, so length mismatches
/// count as errors.
pub fn token_accuracy(hypotheses: &[Vec<u32>], references: &[Vec<u32>]) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(Error::Empty("token accuracy corpus"));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::Config(format!(
            "{} hypotheses but {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut hits = 0usize;
    let mut slots = 0usize;
    for (h, r) in hypotheses.iter().zip(references) {
        hits += h.iter().zip(r).filter(|(a, b)| a == b).count();
        slots += h.len().max(r.len());
    }
    Ok(if slots == 0 { 1.0 } else { hits as f64 / slots as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Previous,
    New,
    ZeroShot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionMetrics {
    pub role: Role,
    pub bleu: f64,
    /// Token accuracy in percent.
    pub accuracy: f64,
    pub sentences: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Averages {
    pub bleu: f64,
    pub accuracy: f64,
}

impl Averages {
    fn of<'a>(ms: impl Iterator<Item = &'a DirectionMetrics>) -> Option<Self> {
        let ms: Vec<_> = ms.collect();
        if ms.is_empty() {
            return None;
        }
        let n = ms.len() as f64;
        Some(Self {
            bleu: ms.iter().map(|m| m.bleu).sum::<f64>() / n,
            accuracy: ms.iter().map(|m| m.accuracy).sum::<f64>() / n,
        })
    }

    /// `(a + b) / 2`, the combined previous/new score.
    pub fn combine(a: Self, b: Self) -> Self {
        Self {
            bleu: (a.bleu + b.bleu) / 2.0,
            accuracy: (a.accuracy + b.accuracy) / 2.0,
        }
    }
}

/// Drop of the previous-task averages relative to a baseline report
/// (positive means forgetting).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Forgetting {
    pub bleu: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunInfo {
    pub method: String,
    pub hyper: BTreeMap<String, f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub run: RunInfo,
    /// Keyed by corpus id; every evaluated direction appears once.
    pub directions: BTreeMap<String, DirectionMetrics>,
    pub avg1: Option<Averages>,
    pub avg2: Option<Averages>,
    pub avg: Option<Averages>,
    pub zero_avg: Option<Averages>,
    pub forgetting: Option<Forgetting>,
}

impl EvalReport {
    /// Builds a report, deriving every average from the direction table.
    pub fn from_directions(run: RunInfo, directions: BTreeMap<String, DirectionMetrics>, baseline: Option<&EvalReport>) -> Self {
        let by = |role| Averages::of(directions.values().filter(|m| m.role == role));
        let avg1 = by(Role::Previous);
        let avg2 = by(Role::New);
        let avg = match (avg1, avg2) {
            (Some(a), Some(b)) => Some(Averages::combine(a, b)),
            _ => None,
        };
        let forgetting = match (baseline.and_then(|b| b.avg1), avg1) {
            (Some(b), Some(a)) => Some(Forgetting {
                bleu: b.bleu - a.bleu,
                accuracy: b.accuracy - a.accuracy,
            }),
            _ => None,
        };
        Self {
            run,
            avg1,
            avg2,
            avg,
            zero_avg: by(Role::ZeroShot),
            forgetting,
            directions,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Config(format!("report serialization: {e}")))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Config(format!("report parse: {e}")))
    }
}

/// A group of test corpora evaluated under one role.
#[derive(Debug, Clone, Copy)]
pub struct SuiteEntry<'a> {
    pub role: Role,
    pub corpora: &'a [Corpus],
}

/// Sentences decoded per batch.
const DECODE_CHUNK: usize = 64;

/// Greedy translations (content tokens) of every source in a corpus.
pub fn translate_corpus(model: &Model, corpus: &Corpus) -> Result<Vec<Vec<u32>>> {
    let max_len = model.config.max_len.saturating_sub(1);
    let mut out = Vec::with_capacity(corpus.len());
    for chunk in corpus.pairs.chunks(DECODE_CHUNK) {
        let srcs: Vec<Vec<u32>> = chunk.iter().map(|p| p.src.clone()).collect();
        let langs: Vec<u32> = chunk.iter().map(|p| p.tgt[0]).collect();
        out.extend(model.greedy_decode(&srcs, &langs, max_len)?);
    }
    Ok(out)
}

pub fn evaluate_corpus(model: &Model, corpus: &Corpus, role: Role) -> Result<DirectionMetrics> {
    if corpus.is_empty() {
        return Err(Error::Missing(format!("test data for direction `{}`", corpus.id)));
    }
    let hyps = translate_corpus(model, corpus)?;
    let refs: Vec<Vec<u32>> = corpus.pairs.iter().map(|p| p.tgt[1..].to_vec()).collect();
    Ok(DirectionMetrics {
        role,
        bleu: bleu(&hyps, &refs)?,
        accuracy: 100.0 * token_accuracy(&hyps, &refs)?,
        sentences: corpus.len(),
    })
}

/// Decodes every direction of every entry and assembles the report.
pub fn evaluate_suite(model: &Model, suite: &[SuiteEntry<'_>], run: RunInfo, baseline: Option<&EvalReport>) -> Result<EvalReport> {
    let jobs: Vec<(&Corpus, Role)> = suite
        .iter()
        .flat_map(|e| e.corpora.iter().map(move |c| (c, e.role)))
        .collect();
    let metrics: Vec<DirectionMetrics> = jobs
        .par_iter()
        .map(|(c, role)| evaluate_corpus(model, c, *role))
        .collect::<Result<_>>()?;
    let mut directions = BTreeMap::new();
    for ((c, _), m) in jobs.iter().zip(metrics) {
        if directions.insert(c.id.clone(), m).is_some() {
            return Err(Error::Config(format!("direction `{}` listed twice", c.id)));
        }
    }
    Ok(EvalReport::from_directions(run, directions, baseline))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Bleu,
    Accuracy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub knob: f64,
    pub prev: f64,
    pub new: f64,
}

/// `(previous, new)` averages of each report, ordered by knob value.
pub fn tradeoff_curve(points: &[(f64, &EvalReport)], metric: Metric) -> Vec<CurvePoint> {
    let pick = |a: Option<Averages>| {
        a.map_or(f64::NAN, |a| match metric {
            Metric::Bleu => a.bleu,
            Metric::Accuracy => a.accuracy,
        })
    };
    let mut out: Vec<CurvePoint> = points
        .iter()
        .map(|(k, r)| CurvePoint {
            knob: *k,
            prev: pick(r.avg1),
            new: pick(r.avg2),
        })
        .collect();
    out.sort_by(|a, b| a.knob.total_cmp(&b.knob));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(xs: &[u32]) -> Vec<u32> {
        xs.to_vec()
    }

    #[test]
    fn bleu_hand_case() {
        // a b c d e f vs a b c d x f: precisions 5/6, 3/5, 2/4, 1/3, BP = 1
        let h = vec![s(&[1, 2, 3, 4, 5, 6])];
        let r = vec![s(&[1, 2, 3, 4, 9, 6])];
        let expected = 100.0 * (5.0 / 6.0 * 3.0 / 5.0 * 2.0 / 4.0 * 1.0 / 3.0f64).powf(0.25);
        assert!((bleu(&h, &r).unwrap() - expected).abs() < 1e-9);
        assert!((expected - 53.7284965911771).abs() < 1e-9);
    }

    #[test]
    fn bleu_bounds() {
        let r = vec![s(&[1, 2, 3, 4, 5]), s(&[6, 7, 8, 9])];
        assert_eq!(bleu(&r, &r).unwrap(), 100.0);
        // smoothed precisions shrink with corpus size; 20 sentences is plenty
        let r: Vec<Vec<u32>> = (0..20).map(|i| (0..8).map(|j| i * 8 + j).collect()).collect();
        let d: Vec<Vec<u32>> = (0..20).map(|i| (0..8).map(|j| 1000 + i * 8 + j).collect()).collect();
        let v = bleu(&d, &r).unwrap();
        assert!(v < 1.0 && v > 0.0);
        assert!(bleu(&[], &[]).is_err());
    }

    #[test]
    fn bleu_exp_smoothing_and_brevity() {
        // 4 unigram hits of 4, no bigram hits: p2 = 1/(2*3), p3 = 1/(4*2), p4 = 1/(8*1)
        let h = vec![s(&[1, 3, 2, 4])];
        let r = vec![s(&[1, 2, 3, 4])];
        let expected = 100.0 * (1.0 * (1.0 / 6.0) * (1.0 / 8.0) * (1.0 / 8.0f64)).powf(0.25);
        assert!((bleu(&h, &r).unwrap() - expected).abs() < 1e-9);
        let short = vec![s(&[1, 2, 3, 4])];
        let long = vec![s(&[1, 2, 3, 4, 5, 6, 7, 8])];
        let bp = (1.0 - 8.0 / 4.0f64).exp();
        assert!((bleu(&short, &long).unwrap() - 100.0 * bp).abs() < 1e-9);
        // too short for 4-grams
        assert_eq!(bleu(&[s(&[1, 2])], &[s(&[1, 2])]).unwrap(), 0.0);
    }

    #[test]
    fn accuracy_cases() {
        let r = vec![s(&[1, 2, 3])];
        assert_eq!(token_accuracy(&r, &r).unwrap(), 1.0);
        assert_eq!(token_accuracy(&[s(&[4, 5, 6])], &r).unwrap(), 0.0);
        assert_eq!(token_accuracy(&[s(&[1, 2, 3, 7, 7])], &r).unwrap(), 3.0 / 5.0);
    }

    fn metrics(role: Role, bleu: f64) -> DirectionMetrics {
        DirectionMetrics { role, bleu, accuracy: bleu, sentences: 1 }
    }

    #[test]
    fn averages_and_forgetting() {
        let dirs: BTreeMap<String, DirectionMetrics> = [
            ("p1".to_string(), metrics(Role::Previous, 23.66)),
            ("n1".to_string(), metrics(Role::New, 31.64)),
        ]
        .into();
        let base = EvalReport::from_directions(RunInfo::default(), dirs.clone(), None);
        assert!((base.avg.unwrap().bleu - 27.65).abs() < 1e-12);
        let again = EvalReport::from_directions(RunInfo::default(), dirs, Some(&base));
        assert_eq!(again.forgetting.unwrap().bleu, 0.0);
        let back = EvalReport::from_json(&again.to_json().unwrap()).unwrap();
        assert_eq!(back, again);
    }

    #[test]
    fn curve_is_sorted_by_knob() {
        let mk = |p, n| {
            EvalReport::from_directions(
                RunInfo::default(),
                [("a".to_string(), metrics(Role::Previous, p)), ("b".to_string(), metrics(Role::New, n))].into(),
                None,
            )
        };
        let (a, b) = (mk(90.0, 10.0), mk(80.0, 30.0));
        let c = tradeoff_curve(&[(0.4, &b), (0.1, &a)], Metric::Bleu);
        assert_eq!(c[0].knob, 0.1);
        assert_eq!((c[1].prev, c[1].new), (80.0, 30.0));
    }
}
