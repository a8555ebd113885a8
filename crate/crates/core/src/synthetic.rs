//! A small templated grammar with number agreement and verb/object
//! selection, plus an N-best generator that corrupts its sentences.
//!
//! The grammar gives a learnable corpus with a known vocabulary of about
//! 200 words. The N-best lists mimic decoder output: the true sentence plus
//! variants with one to three substituted words, with acoustic scores that
//! let a corrupted variant outrank the truth in a chosen fraction of lists.

use std::collections::HashSet;

use rand::seq::IndexedRandom;

use crate::rescoring::{NBestEntry, NBestList};
use crate::tensor::RngState;

const DETERMINERS_SG: &[&str] = &["a", "this", "that", "every", "one"];
const DETERMINERS_PL: &[&str] = &["these", "those", "some", "many", "two"];
const DETERMINER_ANY: &str = "the";

const ADJECTIVES: &[&str] = &[
    "big", "small", "old", "young", "red", "green", "blue", "hot", "cold", "quiet", "loud", "happy", "sad", "tall",
    "short", "heavy", "light", "dark", "bright", "clever", "lazy", "strong", "gentle", "wild", "brown", "white",
    "black", "round", "clean", "dirty",
];

/// (singular, plural) pairs.
const ANIMATE: &[(&str, &str)] = &[
    ("man", "men"),
    ("woman", "women"),
    ("child", "children"),
    ("dog", "dogs"),
    ("cat", "cats"),
    ("farmer", "farmers"),
    ("teacher", "teachers"),
    ("baker", "bakers"),
    ("boy", "boys"),
    ("girl", "girls"),
    ("horse", "horses"),
    ("bird", "birds"),
    ("king", "kings"),
    ("queen", "queens"),
    ("cook", "cooks"),
    ("sailor", "sailors"),
    ("doctor", "doctors"),
    ("student", "students"),
    ("friend", "friends"),
    ("neighbor", "neighbors"),
];

const FOOD: &[(&str, &str)] = &[
    ("apple", "apples"),
    ("cake", "cakes"),
    ("pie", "pies"),
    ("fish", "fishes"),
    ("egg", "eggs"),
    ("carrot", "carrots"),
    ("pear", "pears"),
    ("plum", "plums"),
    ("onion", "onions"),
    ("potato", "potatoes"),
];

const THINGS: &[(&str, &str)] = &[
    ("box", "boxes"),
    ("vat", "vats"),
    ("stone", "stones"),
    ("chair", "chairs"),
    ("table", "tables"),
    ("basket", "baskets"),
    ("barrel", "barrels"),
    ("rope", "ropes"),
    ("bag", "bags"),
    ("cart", "carts"),
];

const TEXTS: &[(&str, &str)] = &[
    ("book", "books"),
    ("letter", "letters"),
    ("story", "stories"),
    ("poem", "poems"),
    ("note", "notes"),
    ("song", "songs"),
];

const PLACES: &[&str] = &[
    "house", "river", "city", "market", "field", "kitchen", "garden", "forest", "school", "village", "hill", "fire",
];

#[derive(Clone, Copy, PartialEq, Eq)]
enum ObjectClass {
    Food,
    Thing,
    Text,
    Any,
}

/// (3rd singular, plural, object class).
const TRANSITIVE: &[(&str, &str, ObjectClass)] = &[
    ("eats", "eat", ObjectClass::Food),
    ("boils", "boil", ObjectClass::Food),
    ("buys", "buy", ObjectClass::Food),
    ("reads", "read", ObjectClass::Text),
    ("writes", "write", ObjectClass::Text),
    ("carries", "carry", ObjectClass::Thing),
    ("moves", "move", ObjectClass::Thing),
    ("lifts", "lift", ObjectClass::Thing),
    ("sees", "see", ObjectClass::Any),
    ("likes", "like", ObjectClass::Any),
];

const INTRANSITIVE: &[(&str, &str)] = &[
    ("sleeps", "sleep"),
    ("runs", "run"),
    ("sings", "sing"),
    ("waits", "wait"),
    ("laughs", "laugh"),
    ("works", "work"),
    ("dances", "dance"),
    ("rests", "rest"),
];

const ADVERBS: &[&str] = &[
    "quickly", "slowly", "often", "never", "today", "again", "quietly", "happily", "early", "late",
];
const PREPOSITIONS: &[&str] = &["in", "near", "under", "over", "behind", "beside"];
const CONJUNCTIONS: &[&str] = &["and", "but", "while", "because"];

pub const MIN_WORDS: usize = 4;
pub const MAX_WORDS: usize = 16;

/// Every word the grammar can produce, in a fixed order.
pub fn lexicon() -> Vec<&'static str> {
    let mut words: Vec<&'static str> = Vec::new();
    words.extend(DETERMINERS_SG);
    words.extend(DETERMINERS_PL);
    words.push(DETERMINER_ANY);
    words.extend(ADJECTIVES);
    for table in [ANIMATE, FOOD, THINGS, TEXTS] {
        for &(s, p) in table {
            words.push(s);
            words.push(p);
        }
    }
    words.extend(PLACES);
    for &(s, p, _) in TRANSITIVE {
        words.push(s);
        words.push(p);
    }
    for &(s, p) in INTRANSITIVE {
        words.push(s);
        words.push(p);
    }
    words.extend(ADVERBS);
    words.extend(PREPOSITIONS);
    words.extend(CONJUNCTIONS);
    let mut seen = HashSet::new();
    words.retain(|w| seen.insert(*w));
    words
}

/// Broad word class, used to draw plausible confusions.
fn word_class(word: &str) -> usize {
    let in_pairs = |t: &[(&str, &str)]| t.iter().any(|&(s, p)| s == word || p == word);
    if DETERMINERS_SG.contains(&word) || DETERMINERS_PL.contains(&word) || word == DETERMINER_ANY {
        0
    } else if ADJECTIVES.contains(&word) {
        1
    } else if in_pairs(ANIMATE) || in_pairs(FOOD) || in_pairs(THINGS) || in_pairs(TEXTS) || PLACES.contains(&word) {
        2
    } else if TRANSITIVE.iter().any(|&(s, p, _)| s == word || p == word) || in_pairs(INTRANSITIVE) {
        3
    } else if ADVERBS.contains(&word) {
        4
    } else if PREPOSITIONS.contains(&word) {
        5
    } else {
        6
    }
}

fn pick<'a, T>(rng: &mut RngState, items: &'a [T]) -> &'a T {
    items.choose(rng).expect("word lists are non-empty")
}

fn chance(rng: &mut RngState, p: f64) -> bool {
    rng.uniform() < p
}

fn determiner(rng: &mut RngState, plural: bool) -> &'static str {
    if chance(rng, 0.4) {
        DETERMINER_ANY
    } else if plural {
        pick(rng, DETERMINERS_PL)
    } else {
        pick(rng, DETERMINERS_SG)
    }
}

fn noun_phrase(rng: &mut RngState, nouns: &[(&'static str, &'static str)], out: &mut Vec<&'static str>) -> bool {
    let plural = chance(rng, 0.5);
    out.push(determiner(rng, plural));
    if chance(rng, 0.4) {
        out.push(pick(rng, ADJECTIVES));
    }
    let &(s, p) = pick(rng, nouns);
    out.push(if plural { p } else { s });
    plural
}

fn clause(rng: &mut RngState, out: &mut Vec<&'static str>) {
    let plural = noun_phrase(rng, ANIMATE, out);
    if chance(rng, 0.65) {
        let &(s, p, class) = pick(rng, TRANSITIVE);
        out.push(if plural { p } else { s });
        let class = if class == ObjectClass::Any {
            *pick(rng, &[ObjectClass::Food, ObjectClass::Thing, ObjectClass::Text])
        } else {
            class
        };
        let nouns = match class {
            ObjectClass::Food => FOOD,
            ObjectClass::Thing => THINGS,
            ObjectClass::Text | ObjectClass::Any => TEXTS,
        };
        noun_phrase(rng, nouns, out);
    } else {
        let &(s, p) = pick(rng, INTRANSITIVE);
        out.push(if plural { p } else { s });
    }
    if chance(rng, 0.35) {
        out.push(pick(rng, PREPOSITIONS));
        out.push(DETERMINER_ANY);
        out.push(pick(rng, PLACES));
    }
    if chance(rng, 0.3) {
        out.push(pick(rng, ADVERBS));
    }
}

/// One grammatical sentence of `MIN_WORDS..=MAX_WORDS` words.
pub fn sentence(rng: &mut RngState) -> Vec<&'static str> {
    loop {
        let mut out = Vec::new();
        clause(rng, &mut out);
        if chance(rng, 0.35) {
            out.push(pick(rng, CONJUNCTIONS));
            clause(rng, &mut out);
        }
        if (MIN_WORDS..=MAX_WORDS).contains(&out.len()) {
            return out;
        }
    }
}

/// `n` sentences as space-joined strings.
pub fn corpus(n: usize, rng: &mut RngState) -> Vec<String> {
    (0..n).map(|_| sentence(rng).join(" ")).collect()
}

/// Where corruptions land in a hypothesis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorruptionPositions {
    /// Any word position, uniformly.
    Uniform,
    /// Only the first `n` words.
    Early(usize),
}

#[derive(Clone, Copy, Debug)]
pub struct NBestConfig {
    /// Hypotheses per list, the truth included.
    pub list_size: usize,
    pub min_substitutions: usize,
    pub max_substitutions: usize,
    pub positions: CorruptionPositions,
    /// Fraction of lists where a corrupted hypothesis gets a better
    /// acoustic score than the truth.
    pub flip_rate: f64,
    /// Probability that a substitute comes from the same word class.
    pub same_class: f64,
}

impl Default for NBestConfig {
    fn default() -> Self {
        Self {
            list_size: 10,
            min_substitutions: 1,
            max_substitutions: 3,
            positions: CorruptionPositions::Uniform,
            flip_rate: 0.4,
            same_class: 0.7,
        }
    }
}

fn corrupt(words: &[&'static str], cfg: &NBestConfig, lexicon: &[&'static str], rng: &mut RngState) -> Vec<&'static str> {
    let span = match cfg.positions {
        CorruptionPositions::Uniform => words.len(),
        CorruptionPositions::Early(n) => n.min(words.len()),
    };
    let k = cfg.min_substitutions + rng.below(cfg.max_substitutions - cfg.min_substitutions + 1);
    let k = k.min(span);
    let positions = rand::seq::index::sample(rng, span, k).into_vec();
    let mut out = words.to_vec();
    for p in positions {
        let original = words[p];
        let pool: Vec<&'static str> = if chance(rng, cfg.same_class) {
            lexicon
                .iter()
                .copied()
                .filter(|w| *w != original && word_class(w) == word_class(original))
                .collect()
        } else {
            lexicon.iter().copied().filter(|w| *w != original).collect()
        };
        out[p] = pick(rng, &pool);
    }
    out
}

/// A list whose reference is `words`: the truth plus `list_size − 1`
/// distinct corruptions, ordered by acoustic score.
pub fn nbest_list(
    utt_id: String,
    words: &[&'static str],
    cfg: &NBestConfig,
    lexicon: &[&'static str],
    rng: &mut RngState,
) -> NBestList {
    let truth = words.join(" ");
    let mut texts = vec![truth.clone()];
    let mut seen: HashSet<String> = texts.iter().cloned().collect();
    let mut attempts = 0;
    while texts.len() < cfg.list_size && attempts < 50 * cfg.list_size {
        attempts += 1;
        let text = corrupt(words, cfg, lexicon, rng).join(" ");
        if seen.insert(text.clone()) {
            texts.push(text);
        }
    }

    // Acoustic scores: a length-dependent base for the truth, corrupted
    // variants below it by a random margin, except in flipped lists where
    // one of them is placed above it.
    let truth_score = -(words.len() as f64) * (2.0 + rng.uniform());
    let flipped = texts.len() > 1 && chance(rng, cfg.flip_rate);
    let winner = if flipped { 1 + rng.below(texts.len() - 1) } else { 0 };
    let mut entries: Vec<NBestEntry> = texts
        .into_iter()
        .enumerate()
        .map(|(i, text)| {
            let am_score = if i == 0 {
                truth_score
            } else if i == winner {
                truth_score + 0.5 + 2.5 * rng.uniform()
            } else {
                truth_score - 0.5 - 4.5 * rng.uniform()
            };
            NBestEntry { text, am_score }
        })
        .collect();
    entries.sort_by(|a, b| b.am_score.total_cmp(&a.am_score));
    NBestList::new(utt_id, Some(truth), entries).expect("generated lists are non-empty")
}

/// `n` lists drawn from fresh grammar sentences.
pub fn nbest_lists(prefix: &str, n: usize, cfg: &NBestConfig, rng: &mut RngState) -> Vec<NBestList> {
    let lexicon = lexicon();
    (0..n)
        .map(|i| {
            let words = sentence(rng);
            nbest_list(format!("{prefix}-{i:05}"), &words, cfg, &lexicon, rng)
        })
        .collect()
}
