//! Seeded synthetic translation tasks.
//!
//! Every language renders a shared space of abstract *concepts* through a
//! bijective concept-to-token mapping followed by a fixed local reordering
//! (adjacent pairs swapped at seeded positions). Translating between two
//! languages therefore has a unique correct answer, which an oracle
//! translator can always produce.
//!
//! Vocabulary layout: ids `0..4` are `pad`, `bos`, `eos`, `unk`; the
//! language-id tokens of the base languages follow; then each base
//! language's content inventory as a contiguous id range. Languages added
//! later take ids past the base vocabulary.

use std::collections::HashSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::rng::{self, Rng};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const NUM_SPECIALS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticLanguage {
    pub name: String,
    pub lang_token: u32,
    /// Tokens introduced by this language.
    pub inventory: Vec<u32>,
    /// Concept index -> surface token.
    pub mapping: Vec<u32>,
    /// `swaps[k]` swaps positions `2k` and `2k + 1` when both exist.
    pub swaps: Vec<bool>,
}

impl SyntheticLanguage {
    fn reorder<T: Copy>(&self, seq: &mut [T]) {
        for (k, &s) in self.swaps.iter().enumerate() {
            if s && 2 * k + 1 < seq.len() {
                seq.swap(2 * k, 2 * k + 1);
            }
        }
    }

    /// Surface form of a concept sequence (without the language-id token).
    pub fn render(&self, concepts: &[u32]) -> Vec<u32> {
        let mut out: Vec<u32> = concepts.iter().map(|&c| self.mapping[c as usize]).collect();
        self.reorder(&mut out);
        out
    }

    /// Inverse of [`render`](Self::render); `None` if a token is foreign.
    pub fn parse(&self, tokens: &[u32]) -> Option<Vec<u32>> {
        let mut seq = tokens.to_vec();
        // adjacent swaps are involutions
        self.reorder(&mut seq);
        seq.iter()
            .map(|t| self.mapping.iter().position(|m| m == t).map(|c| c as u32))
            .collect()
    }
}

/// A phrase-distribution variant: concept sampling weights plus a
/// concept-to-concept remapping applied on the target side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub tag: String,
    pub weights: Vec<f64>,
    pub remap: Vec<u32>,
}

impl Domain {
    pub fn is_identity_remap(&self) -> bool {
        self.remap.iter().enumerate().all(|(i, &r)| i as u32 == r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Direction {
    pub src: usize,
    pub tgt: usize,
}

impl Direction {
    pub fn new(src: usize, tgt: usize) -> Self {
        Self { src, tgt }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sizes {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub languages: usize,
    pub concepts: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Zipf exponent of the previous-task concept distribution.
    pub zipf: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            languages: 4,
            concepts: 64,
            min_len: 4,
            max_len: 16,
            zipf: 1.0,
        }
    }
}

/// The set of languages and the base domain shared by all tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub config: WorldConfig,
    pub seed: u64,
    pub languages: Vec<SyntheticLanguage>,
    /// Index of the hub language every previous-task direction touches.
    pub hub: usize,
    pub base_domain: Domain,
    /// Size of the base vocabulary (specials, base language ids, base inventories).
    pub base_vocab: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub directions: Vec<Direction>,
    pub domain: Domain,
    pub sizes: Sizes,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pair {
    /// Language-id token followed by content tokens.
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub id: String,
    pub direction: Direction,
    pub pairs: Vec<Pair>,
    pub seed: u64,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// One line per pair: space-separated source ids, a tab, target ids.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for p in &self.pairs {
            let join = |v: &[u32]| v.iter().map(u32::to_string).collect::<Vec<_>>().join(" ");
            s.push_str(&join(&p.src));
            s.push('\t');
            s.push_str(&join(&p.tgt));
            s.push('\n');
        }
        s
    }

    pub fn from_text(id: &str, direction: Direction, seed: u64, text: &str) -> Result<Self> {
        let parse = |field: &str, line: usize| -> Result<Vec<u32>> {
            field
                .split_whitespace()
                .map(|t| {
                    t.parse::<u32>()
                        .map_err(|_| Error::Config(format!("{id}:{line}: bad token `{t}`")))
                })
                .collect()
        };
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (s, t) = line
                .split_once('\t')
                .ok_or_else(|| Error::Config(format!("{id}:{}: missing tab", i + 1)))?;
            pairs.push(Pair {
                src: parse(s, i + 1)?,
                tgt: parse(t, i + 1)?,
            });
        }
        Ok(Self {
            id: id.to_string(),
            direction,
            pairs,
            seed,
        })
    }
}

/// Train/valid/test corpora for a task, one corpus per direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub train: Vec<Corpus>,
    pub valid: Vec<Corpus>,
    pub test: Vec<Corpus>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Familiarity {
    Distant,
    Related,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}-L{}", self.src, self.tgt)
    }
}

fn zipf_weights(n: usize, exponent: f64, order: &[usize]) -> Vec<f64> {
    let mut w = vec![0.0; n];
    for (rank, &c) in order.iter().enumerate() {
        w[c] = 1.0 / ((rank + 1) as f64).powf(exponent);
    }
    let s: f64 = w.iter().sum();
    w.iter().map(|x| x / s).collect()
}

fn sample_categorical(weights: &[f64], rng: &mut Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

impl World {
    pub fn generate(seed: u64, config: WorldConfig) -> Result<Self> {
        if config.languages < 3 {
            return Err(Error::Config(format!(
                "need at least 3 languages, got {}",
                config.languages
            )));
        }
        if config.concepts < 2 || config.min_len == 0 || config.min_len > config.max_len {
            return Err(Error::Config(format!("bad world config {config:?}")));
        }
        let k = config.languages;
        let c = config.concepts;
        let content_base = NUM_SPECIALS + k;
        let mut languages = Vec::with_capacity(k);
        for i in 0..k {
            let mut r = rng::stream(seed, &format!("language{i}"));
            let inventory: Vec<u32> = (0..c).map(|j| (content_base + i * c + j) as u32).collect();
            let mut mapping = inventory.clone();
            mapping.shuffle(&mut r);
            let swaps = (0..config.max_len / 2).map(|_| r.random_bool(0.5)).collect();
            languages.push(SyntheticLanguage {
                name: format!("L{i}"),
                lang_token: (NUM_SPECIALS + i) as u32,
                inventory,
                mapping,
                swaps,
            });
        }
        let mut order: Vec<usize> = (0..c).collect();
        order.shuffle(&mut rng::stream(seed, "base-domain"));
        let base_domain = Domain {
            tag: "base".into(),
            weights: zipf_weights(c, config.zipf, &order),
            remap: (0..c as u32).collect(),
        };
        Ok(Self {
            base_vocab: content_base + k * c,
            config,
            seed,
            languages,
            hub: 0,
            base_domain,
        })
    }

    /// Total vocabulary needed to cover every language currently defined.
    pub fn vocab_size(&self) -> usize {
        self.languages
            .iter()
            .flat_map(|l| l.inventory.iter().copied().chain([l.lang_token]))
            .max()
            .map_or(NUM_SPECIALS, |m| m as usize + 1)
            .max(self.base_vocab)
    }

    pub fn language(&self, idx: usize) -> Result<&SyntheticLanguage> {
        self.languages
            .get(idx)
            .ok_or_else(|| Error::Config(format!("no language with index {idx}")))
    }

    /// The correct translation of a source sentence (language-id prefixed),
    /// returned without the target language-id token.
    pub fn translate(&self, src: &[u32], dir: Direction, domain: &Domain) -> Result<Vec<u32>> {
        let sl = self.language(dir.src)?;
        let tl = self.language(dir.tgt)?;
        let body = src.get(1..).unwrap_or(&[]);
        let concepts = sl
            .parse(body)
            .ok_or_else(|| Error::Config(format!("sentence not in {}", sl.name)))?;
        let shifted: Vec<u32> = concepts.iter().map(|&c| domain.remap[c as usize]).collect();
        Ok(tl.render(&shifted))
    }

    fn sample_pair(&self, dir: Direction, domain: &Domain, r: &mut Rng) -> Pair {
        let len = r.random_range(self.config.min_len..=self.config.max_len);
        let concepts: Vec<u32> = (0..len)
            .map(|_| sample_categorical(&domain.weights, r) as u32)
            .collect();
        let sl = &self.languages[dir.src];
        let tl = &self.languages[dir.tgt];
        let mut src = vec![sl.lang_token];
        src.extend(sl.render(&concepts));
        let shifted: Vec<u32> = concepts.iter().map(|&c| domain.remap[c as usize]).collect();
        let mut tgt = vec![tl.lang_token];
        tgt.extend(tl.render(&shifted));
        Pair { src, tgt }
    }

    /// Draws `n` pairs not present in `exclude`, inserting them into it.
    fn sample_unique(
        &self,
        dir: Direction,
        domain: &Domain,
        n: usize,
        r: &mut Rng,
        exclude: &mut HashSet<Pair>,
    ) -> Result<Vec<Pair>> {
        let mut out = Vec::with_capacity(n);
        let budget = 50 * n + 1000;
        let mut tries = 0;
        while out.len() < n {
            tries += 1;
            if tries > budget {
                return Err(Error::Config(format!(
                    "cannot draw {n} distinct pairs for {dir}: sentence space too small"
                )));
            }
            let p = self.sample_pair(dir, domain, r);
            if exclude.insert(p.clone()) {
                out.push(p);
            }
        }
        Ok(out)
    }

    /// Generates train/valid/test corpora for a task. Held-out splits never
    /// contain a pair that occurs in train (or in each other).
    pub fn generate_task(&self, spec: &TaskSpec) -> Result<TaskData> {
        let mut train = Vec::new();
        let mut valid = Vec::new();
        let mut test = Vec::new();
        for &dir in &spec.directions {
            self.language(dir.src)?;
            self.language(dir.tgt)?;
            let mut seen = HashSet::new();
            let mk = |split: &str, pairs: Vec<Pair>| Corpus {
                id: format!("{}.{split}.{dir}", spec.name),
                direction: dir,
                pairs,
                seed: rng::derive_seed(spec.seed, &format!("{split}/{dir}")),
            };
            for (split, n, out) in [
                ("train", spec.sizes.train, &mut train),
                ("valid", spec.sizes.valid, &mut valid),
                ("test", spec.sizes.test, &mut test),
            ] {
                let mut r = rng::stream(spec.seed, &format!("{split}/{dir}"));
                let pairs = self.sample_unique(dir, &spec.domain, n, &mut r, &mut seen)?;
                out.push(mk(split, pairs));
            }
        }
        Ok(TaskData {
            spec: spec.clone(),
            train,
            valid,
            test,
        })
    }

    /// Directions of the previous task: hub <-> every other base language.
    pub fn previous_directions(&self) -> Vec<Direction> {
        let mut dirs = Vec::new();
        for i in 0..self.config.languages {
            if i != self.hub {
                dirs.push(Direction::new(i, self.hub));
                dirs.push(Direction::new(self.hub, i));
            }
        }
        dirs
    }

    /// Adds a new language and returns its index. `Distant` languages get a
    /// fresh inventory and an unrelated mapping; `Related` ones reuse the
    /// sibling's token (and reorder rule) for `shared_fraction` of concepts.
    pub fn add_language(
        &mut self,
        seed: u64,
        familiarity: Familiarity,
        sibling: usize,
        shared_fraction: f64,
    ) -> Result<usize> {
        if !(0.0..=1.0).contains(&shared_fraction) {
            return Err(Error::Config(format!(
                "shared fraction {shared_fraction} outside [0, 1]"
            )));
        }
        let sib = self.language(sibling)?.clone();
        let c = self.config.concepts;
        let mut next = self.vocab_size() as u32;
        let lang_token = next;
        next += 1;
        let idx = self.languages.len();
        let mut r = rng::stream(seed, &format!("new-language{idx}"));
        let (mapping, inventory, swaps) = match familiarity {
            Familiarity::Distant => {
                let inventory: Vec<u32> = (0..c as u32).map(|j| next + j).collect();
                let mut mapping = inventory.clone();
                mapping.shuffle(&mut r);
                let swaps = (0..self.config.max_len / 2).map(|_| r.random_bool(0.5)).collect();
                (mapping, inventory, swaps)
            }
            Familiarity::Related => {
                let n_shared = (shared_fraction * c as f64).round() as usize;
                let mut concepts: Vec<usize> = (0..c).collect();
                concepts.shuffle(&mut r);
                let mut mapping = sib.mapping.clone();
                let fresh = &concepts[n_shared..];
                let mut inventory = Vec::with_capacity(fresh.len());
                for (j, &concept) in fresh.iter().enumerate() {
                    let tok = next + j as u32;
                    mapping[concept] = tok;
                    inventory.push(tok);
                }
                (mapping, inventory, sib.swaps.clone())
            }
        };
        let existing: HashSet<u32> = self
            .languages
            .iter()
            .flat_map(|l| l.inventory.iter().copied().chain([l.lang_token]))
            .collect();
        if inventory.iter().chain([&lang_token]).any(|t| existing.contains(t)) {
            return Err(Error::Invariant("new language inventory collides".into()));
        }
        self.languages.push(SyntheticLanguage {
            name: format!("L{idx}"),
            lang_token,
            inventory,
            mapping,
            swaps,
        });
        Ok(idx)
    }
}

/// Builds the world and the previous (multilingual) task.
pub fn gen_previous_task(seed: u64, world: WorldConfig, sizes: Sizes) -> Result<(World, TaskData)> {
    let world = World::generate(seed, world)?;
    let spec = TaskSpec {
        name: "prev".into(),
        directions: world.previous_directions(),
        domain: world.base_domain.clone(),
        sizes,
        seed: rng::derive_seed(seed, "previous-task"),
    };
    let data = world.generate_task(&spec)?;
    Ok((world, data))
}

/// Domain-shift task on one known direction. The concept distribution
/// moves from the base Zipf ranking towards the reversed ranking, and the
/// `shift_strength` fraction of concepts that the new domain favours most
/// are cyclically remapped on the target side.
pub fn gen_domain_shift(
    world: &World,
    direction: Direction,
    seed: u64,
    shift_strength: f64,
    sizes: Sizes,
) -> Result<TaskSpec> {
    if !(0.0..=1.0).contains(&shift_strength) {
        return Err(Error::Config(format!(
            "shift strength {shift_strength} outside [0, 1]"
        )));
    }
    if direction.src >= world.config.languages || direction.tgt >= world.config.languages {
        return Err(Error::Config(format!(
            "domain shift must use previous-task languages, got {direction}"
        )));
    }
    let base = &world.base_domain;
    let c = base.weights.len();
    let mut base_order: Vec<usize> = (0..c).collect();
    base_order.sort_by(|&a, &b| base.weights[b].total_cmp(&base.weights[a]).then(a.cmp(&b)));
    let reversed: Vec<usize> = base_order.iter().rev().copied().collect();
    let shifted = zipf_weights(c, world.config.zipf, &reversed);
    let weights: Vec<f64> = base
        .weights
        .iter()
        .zip(&shifted)
        .map(|(b, s)| (1.0 - shift_strength) * b + shift_strength * s)
        .collect();
    let n_remap = (shift_strength * c as f64).round() as usize;
    let mut remap: Vec<u32> = (0..c as u32).collect();
    if n_remap >= 2 {
        let chosen = &reversed[..n_remap];
        for (i, &concept) in chosen.iter().enumerate() {
            remap[concept] = chosen[(i + 1) % n_remap] as u32;
        }
    }
    Ok(TaskSpec {
        name: format!("shift{}", direction),
        directions: vec![direction],
        domain: Domain {
            tag: format!("shift{shift_strength}"),
            weights,
            remap,
        },
        sizes,
        seed: rng::derive_seed(seed, "domain-shift"),
    })
}

/// Language-adaptation task between `lang` and the hub, both directions,
/// in the base domain.
pub fn language_task(world: &World, lang: usize, seed: u64, sizes: Sizes) -> Result<TaskSpec> {
    world.language(lang)?;
    Ok(TaskSpec {
        name: format!("lang{lang}"),
        directions: vec![Direction::new(lang, world.hub), Direction::new(world.hub, lang)],
        domain: world.base_domain.clone(),
        sizes,
        seed: rng::derive_seed(seed, &format!("language-task{lang}")),
    })
}

/// Zero-shot evaluation set between `lang` and each non-hub base language.
pub fn zero_shot_task(world: &World, lang: usize, seed: u64, test_size: usize) -> Result<TaskSpec> {
    world.language(lang)?;
    let mut directions = Vec::new();
    for other in 0..world.config.languages {
        if other != world.hub && other != lang {
            directions.push(Direction::new(lang, other));
            directions.push(Direction::new(other, lang));
        }
    }
    Ok(TaskSpec {
        name: format!("zero{lang}"),
        directions,
        domain: world.base_domain.clone(),
        sizes: Sizes {
            train: 0,
            valid: 0,
            test: test_size,
        },
        seed: rng::derive_seed(seed, &format!("zero-shot{lang}")),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorldConfig {
        WorldConfig {
            languages: 3,
            concepts: 12,
            min_len: 3,
            max_len: 6,
            zipf: 1.0,
        }
    }

    fn sizes() -> Sizes {
        Sizes {
            train: 200,
            valid: 40,
            test: 40,
        }
    }

    #[test]
    fn previous_task_is_deterministic() {
        let a = gen_previous_task(5, small(), sizes()).unwrap();
        let b = gen_previous_task(5, small(), sizes()).unwrap();
        assert_eq!(a, b);
        let c = gen_previous_task(6, small(), sizes()).unwrap();
        assert_ne!(a.1.train, c.1.train);
    }

    #[test]
    fn needs_three_languages() {
        let cfg = WorldConfig {
            languages: 2,
            ..small()
        };
        assert!(gen_previous_task(1, cfg, sizes()).is_err());
    }

    #[test]
    fn render_parse_round_trip() {
        let (world, data) = gen_previous_task(3, small(), sizes()).unwrap();
        for corpus in &data.train {
            let sl = &world.languages[corpus.direction.src];
            let tl = &world.languages[corpus.direction.tgt];
            for p in &corpus.pairs {
                assert_eq!(p.src[0], sl.lang_token);
                assert_eq!(p.tgt[0], tl.lang_token);
                let cs = sl.parse(&p.src[1..]).unwrap();
                let ct = tl.parse(&p.tgt[1..]).unwrap();
                assert_eq!(cs, ct);
            }
        }
    }

    #[test]
    fn oversized_request_fails() {
        let cfg = WorldConfig {
            concepts: 2,
            min_len: 1,
            max_len: 1,
            ..small()
        };
        assert!(gen_previous_task(1, cfg, sizes()).is_err());
    }

    #[test]
    fn shift_zero_is_base_and_one_remaps_everything() {
        let (world, _) = gen_previous_task(2, small(), sizes()).unwrap();
        let d = Direction::new(1, 0);
        let s0 = gen_domain_shift(&world, d, 9, 0.0, sizes()).unwrap();
        assert_eq!(s0.domain.weights, world.base_domain.weights);
        assert!(s0.domain.is_identity_remap());
        let s1 = gen_domain_shift(&world, d, 9, 1.0, sizes()).unwrap();
        assert!(s1.domain.remap.iter().enumerate().all(|(i, &r)| i as u32 != r));
        assert!(gen_domain_shift(&world, d, 9, 1.5, sizes()).is_err());
    }

    #[test]
    fn distant_language_is_disjoint_related_shares_fraction() {
        let (mut world, _) = gen_previous_task(2, small(), sizes()).unwrap();
        let old: HashSet<u32> = world
            .languages
            .iter()
            .flat_map(|l| l.mapping.iter().copied())
            .collect();
        let d = world.add_language(4, Familiarity::Distant, 1, 0.0).unwrap();
        assert!(world.languages[d].mapping.iter().all(|t| !old.contains(t)));
        let r = world.add_language(4, Familiarity::Related, 1, 0.75).unwrap();
        let agree = world.languages[r]
            .mapping
            .iter()
            .zip(&world.languages[1].mapping)
            .filter(|(a, b)| a == b)
            .count();
        assert_eq!(agree, 9);
        assert_eq!(world.languages[r].swaps, world.languages[1].swaps);
        assert_eq!(world.vocab_size(), world.base_vocab + 1 + 12 + 1 + 3);
    }

    #[test]
    fn text_round_trip() {
        let (_, data) = gen_previous_task(2, small(), sizes()).unwrap();
        let c = &data.valid[0];
        let back = Corpus::from_text(&c.id, c.direction, c.seed, &c.to_text()).unwrap();
        assert_eq!(&back, c);
        assert!(Corpus::from_text("x", c.direction, 0, "1 2 3\n").is_err());
    }
}
