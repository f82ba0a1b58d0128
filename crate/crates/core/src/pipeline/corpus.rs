//! Seeded probabilistic grammar producing agreement-structured sentences.
//!
//! Every category draws words from a Zipf distribution over a fixed list.
//! `Shift::Frequency` reverses the Zipf ranks and `Shift::Agreement` breaks
//! determiner and subject-verb agreement, giving two out-of-distribution
//! variants of the same language.

use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::vocab::tokenize;
use crate::error::{Result, TcdError};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shift {
    #[default]
    None,
    /// Shifted word frequencies.
    Ood1,
    /// Altered agreement rules.
    Ood2,
}

impl Shift {
    fn tag(self) -> u64 {
        match self {
            Shift::None => 0,
            Shift::Ood1 => 1,
            Shift::Ood2 => 2,
        }
    }
}

impl FromStr for Shift {
    type Err = TcdError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Shift::None),
            "ood1" => Ok(Shift::Ood1),
            "ood2" => Ok(Shift::Ood2),
            other => Err(TcdError::Config(format!("unknown shift {other:?}; expected none, ood1 or ood2"))),
        }
    }
}

const NOUNS: [(&str, &str); 16] = [
    ("cat", "cats"),
    ("dog", "dogs"),
    ("child", "children"),
    ("teacher", "teachers"),
    ("bird", "birds"),
    ("farmer", "farmers"),
    ("robot", "robots"),
    ("king", "kings"),
    ("student", "students"),
    ("horse", "horses"),
    ("baker", "bakers"),
    ("city", "cities"),
    ("pilot", "pilots"),
    ("poet", "poets"),
    ("river", "rivers"),
    ("doctor", "doctors"),
];
const DET_SINGULAR: [&str; 4] = ["a", "this", "every", "that"];
const DET_PLURAL: [&str; 4] = ["these", "many", "some", "those"];
const INTRANSITIVE: [(&str, &str); 6] = [
    ("sleeps", "sleep"),
    ("runs", "run"),
    ("waits", "wait"),
    ("sings", "sing"),
    ("laughs", "laugh"),
    ("falls", "fall"),
];
const TRANSITIVE: [(&str, &str); 8] = [
    ("sees", "see"),
    ("likes", "like"),
    ("follows", "follow"),
    ("helps", "help"),
    ("finds", "find"),
    ("watches", "watch"),
    ("carries", "carry"),
    ("visits", "visit"),
];
const ADJECTIVES: [&str; 10] = ["old", "young", "small", "big", "quiet", "happy", "red", "green", "brave", "tired"];
const ADVERBS: [&str; 6] = ["slowly", "today", "often", "again", "quickly", "quietly"];
const PREPOSITIONS: [&str; 5] = ["near", "with", "behind", "under", "beside"];

const ZIPF_EXPONENT: f64 = 1.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub seed: u64,
    /// Generation stops at the first sentence boundary at or past this count.
    pub tokens: usize,
    pub shift: Shift,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            tokens: 200_000,
            shift: Shift::None,
        }
    }
}

struct Zipf(WeightedIndex<f64>);

impl Zipf {
    fn new(n: usize, reversed: bool) -> Self {
        let w = (0..n).map(|r| {
            let rank = if reversed { n - r } else { r + 1 };
            1.0 / (rank as f64).powf(ZIPF_EXPONENT)
        });
        Zipf(WeightedIndex::new(w).expect("nonempty word list"))
    }

    fn pick(&self, rng: &mut ChaCha8Rng) -> usize {
        self.0.sample(rng)
    }
}

struct Grammar {
    shift: Shift,
    noun: Zipf,
    det: Zipf,
    vi: Zipf,
    vt: Zipf,
    adj: Zipf,
    adv: Zipf,
    prep: Zipf,
}

impl Grammar {
    fn new(shift: Shift) -> Self {
        let rev = shift == Shift::Ood1;
        Self {
            shift,
            noun: Zipf::new(NOUNS.len(), rev),
            det: Zipf::new(DET_SINGULAR.len() + 1, rev),
            vi: Zipf::new(INTRANSITIVE.len(), rev),
            vt: Zipf::new(TRANSITIVE.len(), rev),
            adj: Zipf::new(ADJECTIVES.len(), rev),
            adv: Zipf::new(ADVERBS.len(), rev),
            prep: Zipf::new(PREPOSITIONS.len(), rev),
        }
    }

    fn noun_phrase(&self, rng: &mut ChaCha8Rng, out: &mut Vec<&'static str>) -> bool {
        let plural = rng.random_bool(0.4);
        let det_plural = if self.shift == Shift::Ood2 { !plural } else { plural };
        let d = self.det.pick(rng);
        out.push(match d {
            0 => "the",
            _ if det_plural => DET_PLURAL[d - 1],
            _ => DET_SINGULAR[d - 1],
        });
        if rng.random_bool(0.35) {
            out.push(ADJECTIVES[self.adj.pick(rng)]);
        }
        let (s, p) = NOUNS[self.noun.pick(rng)];
        out.push(if plural { p } else { s });
        plural
    }

    fn clause(&self, rng: &mut ChaCha8Rng, out: &mut Vec<&'static str>) {
        let plural = self.noun_phrase(rng, out);
        if rng.random_bool(0.25) {
            out.push(PREPOSITIONS[self.prep.pick(rng)]);
            self.noun_phrase(rng, out);
        }
        let verb_plural = if self.shift == Shift::Ood2 { !plural } else { plural };
        if rng.random_bool(0.4) {
            let (s, p) = INTRANSITIVE[self.vi.pick(rng)];
            out.push(if verb_plural { p } else { s });
        } else {
            let (s, p) = TRANSITIVE[self.vt.pick(rng)];
            out.push(if verb_plural { p } else { s });
            self.noun_phrase(rng, out);
        }
        if rng.random_bool(0.3) {
            out.push(ADVERBS[self.adv.pick(rng)]);
        }
    }

    fn sentence(&self, rng: &mut ChaCha8Rng) -> Vec<&'static str> {
        let mut out = Vec::with_capacity(16);
        self.clause(rng, &mut out);
        if rng.random_bool(0.15) {
            out.push(",");
            out.push("and");
            self.clause(rng, &mut out);
        }
        out.push(".");
        out
    }
}

/// One sentence per line, space-separated tokens.
pub fn generate(cfg: &CorpusConfig) -> String {
    let grammar = Grammar::new(cfg.shift);
    let mut rng = seed::rng(cfg.seed, &[seed::CORPUS, cfg.shift.tag()]);
    let mut text = String::new();
    let mut count = 0;
    while count < cfg.tokens {
        let s = grammar.sentence(&mut rng);
        count += s.len();
        text.push_str(&s.join(" "));
        text.push('\n');
    }
    text
}

pub fn token_count(text: &str) -> usize {
    tokenize(text).len()
}

pub fn unigram_counts(text: &str) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for t in tokenize(text) {
        *counts.entry(t.to_string()).or_insert(0) += 1;
    }
    counts
}

/// Pearson chi-squared test of homogeneity between two unigram distributions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    /// `p_value < 0.01`.
    pub shifted: bool,
}

pub fn unigram_shift(a: &str, b: &str) -> Result<ShiftReport> {
    let (ca, cb) = (unigram_counts(a), unigram_counts(b));
    let (na, nb) = (ca.values().sum::<usize>() as f64, cb.values().sum::<usize>() as f64);
    if na == 0.0 || nb == 0.0 {
        return Err(TcdError::Empty("unigram_shift needs two nonempty corpora".into()));
    }
    let words: BTreeSet<&String> = ca.keys().chain(cb.keys()).collect();
    let total = na + nb;
    let mut stat = 0.0;
    for w in &words {
        let (oa, ob) = (*ca.get(*w).unwrap_or(&0) as f64, *cb.get(*w).unwrap_or(&0) as f64);
        let col = oa + ob;
        let (ea, eb) = (col * na / total, col * nb / total);
        stat += (oa - ea).powi(2) / ea + (ob - eb).powi(2) / eb;
    }
    let dof = words.len().saturating_sub(1);
    let p_value = if dof == 0 {
        1.0
    } else {
        let dist = ChiSquared::new(dof as f64).map_err(|e| TcdError::Numeric(e.to_string()))?;
        1.0 - dist.cdf(stat)
    };
    Ok(ShiftReport {
        statistic: stat,
        dof,
        p_value,
        shifted: p_value < 0.01,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(seed: u64, tokens: usize, shift: Shift) -> String {
        generate(&CorpusConfig { seed, tokens, shift })
    }

    #[test]
    fn deterministic_and_sized() {
        let a = corpus(3, 10_000, Shift::None);
        assert_eq!(a, corpus(3, 10_000, Shift::None));
        assert_ne!(a, corpus(4, 10_000, Shift::None));
        let n = token_count(&a);
        assert!((10_000..10_040).contains(&n), "{n}");
    }

    #[test]
    fn agreement_holds_in_distribution() {
        let text = corpus(0, 5_000, Shift::None);
        for line in text.lines() {
            let toks: Vec<&str> = line.split(' ').collect();
            // first noun phrase: det [adj] noun, followed by its agreeing form
            let noun_at = if ADJECTIVES.contains(&toks[1]) { 2 } else { 1 };
            let plural = NOUNS.iter().any(|(_, p)| *p == toks[noun_at]);
            if DET_PLURAL.contains(&toks[0]) {
                assert!(plural, "{line}");
            }
            if DET_SINGULAR.contains(&toks[0]) {
                assert!(!plural, "{line}");
            }
        }
    }

    #[test]
    fn shifts_are_detected() {
        let base = corpus(1, 20_000, Shift::None);
        let same = corpus(2, 20_000, Shift::None);
        let ood1 = corpus(1, 20_000, Shift::Ood1);
        assert!(unigram_shift(&base, &ood1).unwrap().shifted);
        assert!(!unigram_shift(&base, &same).unwrap().shifted);
        assert_eq!("ood2".parse::<Shift>().unwrap(), Shift::Ood2);
        assert!("x".parse::<Shift>().is_err());
    }
}
