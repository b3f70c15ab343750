use rand::Rng as _;

use crate::error::{Error, Result};
use crate::tasks::Pair;
use crate::tensor::rng::{self, Rng};

/// `p_i ∝ n_i^(1/T)`.
pub fn temperature_probabilities(sizes: &[usize], temperature: f64) -> Result<Vec<f64>> {
    if sizes.is_empty() {
        return Err(Error::Empty("corpus list"));
    }
    if !(temperature >= 1.0) {
        return Err(Error::Config(format!("temperature must be >= 1, got {temperature}")));
    }
    let w: Vec<f64> = sizes.iter().map(|&n| (n as f64).powf(1.0 / temperature)).collect();
    let total: f64 = w.iter().sum();
    if total == 0.0 {
        return Err(Error::Empty("all corpora"));
    }
    Ok(w.iter().map(|x| x / total).collect())
}

/// Picks a corpus per batch by temperature sampling, then examples uniformly
/// (with replacement) inside it.
#[derive(Debug, Clone)]
pub struct MixedSampler<'a> {
    corpora: Vec<&'a [Pair]>,
    probs: Vec<f64>,
    rng: Rng,
}

impl<'a> MixedSampler<'a> {
    /// Sampling weights use `sizes`, which default to the corpus lengths.
    pub fn new(corpora: Vec<&'a [Pair]>, sizes: Option<Vec<usize>>, temperature: f64, seed: u64) -> Result<Self> {
        let sizes = sizes.unwrap_or_else(|| corpora.iter().map(|c| c.len()).collect());
        if sizes.len() != corpora.len() {
            return Err(Error::Config("one size per corpus required".into()));
        }
        let mut probs = temperature_probabilities(&sizes, temperature)?;
        for (p, c) in probs.iter_mut().zip(&corpora) {
            if c.is_empty() {
                *p = 0.0;
            }
        }
        let total: f64 = probs.iter().sum();
        if total == 0.0 {
            return Err(Error::Empty("all corpora"));
        }
        probs.iter_mut().for_each(|p| *p /= total);
        Ok(Self {
            corpora,
            probs,
            rng: rng::stream(seed, "mixed-sampler"),
        })
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    pub fn choose_corpus(&mut self) -> usize {
        let live = self.probs.iter().filter(|p| **p > 0.0).count();
        if live == 1 {
            // no draw, so a single live corpus samples exactly like plain training
            return self.probs.iter().position(|p| *p > 0.0).unwrap_or(0);
        }
        let mut u: f64 = self.rng.random();
        for (i, &p) in self.probs.iter().enumerate() {
            if u < p {
                return i;
            }
            u -= p;
        }
        self.probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
    }

    pub fn next_batch(&mut self, batch_size: usize) -> Vec<&'a Pair> {
        let i = self.choose_corpus();
        let c: &'a [Pair] = self.corpora[i];
        let rng = &mut self.rng;
        (0..batch_size).map(|_| &c[rng.random_range(0..c.len())]).collect()
    }
}
