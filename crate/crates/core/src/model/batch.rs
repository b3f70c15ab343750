use crate::error::{Error, Result};
use crate::tasks::{Pair, EOS, NUM_SPECIALS, PAD};

/// A padded, teacher-forced batch.
///
/// Source rows are `[src_lang, x1 .. xI, eos]`. The decoder reads
/// `[tgt_lang, y1 .. yJ]` and is trained to emit `[y1 .. yJ, eos]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    pub src: Vec<usize>,
    pub src_mask: Vec<bool>,
    pub tgt_in: Vec<usize>,
    pub tgt_out: Vec<usize>,
    pub tgt_mask: Vec<bool>,
}

impl Batch {
    pub fn from_pairs<'a, I>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a Pair>,
    {
        let pairs: Vec<&Pair> = pairs.into_iter().collect();
        if pairs.is_empty() {
            return Err(Error::Empty("batch"));
        }
        for p in &pairs {
            if p.src.is_empty() || p.tgt.is_empty() {
                return Err(Error::Config("pair without language-id token".into()));
            }
            if (p.src[0] as usize) < NUM_SPECIALS || (p.tgt[0] as usize) < NUM_SPECIALS {
                return Err(Error::Config(format!(
                    "pair must start with language-id tokens, got {} / {}",
                    p.src[0], p.tgt[0]
                )));
            }
        }
        let src_len = pairs.iter().map(|p| p.src.len() + 1).max().unwrap_or(0);
        let tgt_len = pairs.iter().map(|p| p.tgt.len()).max().unwrap_or(0);
        let b = pairs.len();
        let mut batch = Batch {
            size: b,
            src_len,
            tgt_len,
            src: vec![PAD as usize; b * src_len],
            src_mask: vec![false; b * src_len],
            tgt_in: vec![PAD as usize; b * tgt_len],
            tgt_out: vec![PAD as usize; b * tgt_len],
            tgt_mask: vec![false; b * tgt_len],
        };
        for (i, p) in pairs.iter().enumerate() {
            for (j, &t) in p.src.iter().chain([&EOS]).enumerate() {
                batch.src[i * src_len + j] = t as usize;
                batch.src_mask[i * src_len + j] = true;
            }
            for j in 0..p.tgt.len() {
                batch.tgt_in[i * tgt_len + j] = p.tgt[j] as usize;
                batch.tgt_out[i * tgt_len + j] = p.tgt.get(j + 1).copied().unwrap_or(EOS) as usize;
                batch.tgt_mask[i * tgt_len + j] = true;
            }
        }
        Ok(batch)
    }

    /// Number of scored (non-pad) target positions.
    pub fn target_tokens(&self) -> usize {
        self.tgt_mask.iter().filter(|m| **m).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout() {
        let p1 = Pair {
            src: vec![4, 10, 11],
            tgt: vec![5, 20, 21, 22],
        };
        let p2 = Pair {
            src: vec![4, 10],
            tgt: vec![5, 20],
        };
        let b = Batch::from_pairs([&p1, &p2]).unwrap();
        assert_eq!(b.src_len, 4);
        assert_eq!(b.tgt_len, 4);
        assert_eq!(&b.src[..4], &[4, 10, 11, 2]);
        assert_eq!(&b.src[4..], &[4, 10, 2, 0]);
        assert_eq!(&b.tgt_in[..4], &[5, 20, 21, 22]);
        assert_eq!(&b.tgt_out[..4], &[20, 21, 22, 2]);
        assert_eq!(&b.tgt_out[4..], &[20, 2, 0, 0]);
        assert_eq!(b.target_tokens(), 6);
    }

    #[test]
    fn rejects_missing_language_token() {
        let p = Pair {
            src: vec![2, 10],
            tgt: vec![5],
        };
        assert!(Batch::from_pairs([&p]).is_err());
        assert!(Batch::from_pairs(std::iter::empty::<&Pair>()).is_err());
    }
}
