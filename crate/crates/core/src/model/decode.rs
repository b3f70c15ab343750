use super::transformer::Tokens;
use super::{Bindings, Model};
use crate::error::{Error, Result};
use crate::tasks::{EOS, PAD};
use crate::tensor::Graph;

impl Model {
    /// Batched greedy decoding. Each source is language-id prefixed; the
    /// decoder is primed with the matching entry of `target_langs`. Returns
    /// content tokens only (no language id, no eos), at most `max_len` each.
    pub fn greedy_decode(&self, srcs: &[Vec<u32>], target_langs: &[u32], max_len: usize) -> Result<Vec<Vec<u32>>> {
        if srcs.len() != target_langs.len() {
            return Err(Error::Config(format!(
                "{} sources but {} target languages",
                srcs.len(),
                target_langs.len()
            )));
        }
        if srcs.is_empty() {
            return Ok(Vec::new());
        }
        let rows = srcs.len();
        let src_len = srcs.iter().map(|s| s.len() + 1).max().unwrap_or(1);
        let mut src_ids = vec![PAD as usize; rows * src_len];
        let mut src_mask = vec![false; rows * src_len];
        for (i, s) in srcs.iter().enumerate() {
            for (j, &t) in s.iter().chain([&EOS]).enumerate() {
                src_ids[i * src_len + j] = t as usize;
                src_mask[i * src_len + j] = true;
            }
        }
        let src = Tokens {
            ids: &src_ids,
            mask: &src_mask,
            rows,
            len: src_len,
        };
        let steps = max_len.min(self.config.max_len.saturating_sub(1));
        let vocab = self.vocab_size();

        let mut g = Graph::new();
        let b = Bindings::constant(&mut g, &self.params);
        let memory = self.encode(&mut g, &b, &src, &mut None)?;

        let mut prefixes: Vec<Vec<usize>> = target_langs.iter().map(|&t| vec![t as usize]).collect();
        let mut done = vec![false; rows];
        let mut out = vec![Vec::new(); rows];
        for _ in 0..steps {
            if done.iter().all(|d| *d) {
                break;
            }
            let len = prefixes[0].len();
            let ids: Vec<usize> = prefixes.iter().flatten().copied().collect();
            let mask = vec![true; rows * len];
            let tgt = Tokens {
                ids: &ids,
                mask: &mask,
                rows,
                len,
            };
            let logits = self.decode(&mut g, &b, memory, &src, &tgt, &mut None)?;
            let data = g.value(logits).data();
            for i in 0..rows {
                let row = &data[(i * len + len - 1) * vocab..(i * len + len) * vocab];
                // first maximum wins, so ties resolve to the lower id
                let mut best = 0;
                for (k, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = k;
                    }
                }
                if !done[i] {
                    if best == EOS as usize {
                        done[i] = true;
                    } else {
                        out[i].push(best as u32);
                    }
                }
                prefixes[i].push(best);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use crate::model::tests::tiny;
    use crate::model::{Model, ModelConfig};

    #[test]
    fn decode_is_deterministic_and_bounded() {
        let m = Model::new(tiny(), 7).unwrap();
        let srcs = vec![vec![4, 8, 9], vec![5, 10, 11, 12, 13]];
        let a = m.greedy_decode(&srcs, &[5, 4], 6).unwrap();
        let b = m.greedy_decode(&srcs, &[5, 4], 6).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|s| s.len() <= 6 && !s.contains(&2)));
    }

    #[test]
    fn batched_matches_single() {
        let m = Model::new(tiny(), 3).unwrap();
        let srcs = vec![vec![4, 8, 9], vec![5, 10, 11, 12, 13], vec![6, 14]];
        let langs = [5, 4, 7];
        let all = m.greedy_decode(&srcs, &langs, 8).unwrap();
        for i in 0..3 {
            let one = m.greedy_decode(&srcs[i..=i], &langs[i..=i], 8).unwrap();
            assert_eq!(one[0], all[i]);
        }
    }

    #[test]
    fn respects_model_max_len() {
        let m = Model::new(ModelConfig { max_len: 4, ..tiny() }, 3).unwrap();
        let out = m.greedy_decode(&[vec![4, 8]], &[5], 100).unwrap();
        assert!(out[0].len() <= 3);
        assert!(m.greedy_decode(&[vec![4]], &[5, 6], 3).is_err());
    }
}
