//! A small template-grammar sentiment task.
//!
//! Every sentence is built from a template whose adjective slots all take
//! words from one polarity's synonym pool; the label is that polarity. The
//! unlabeled corpus draws from the full pools, while the labeled training
//! split only sees the first `seen_fraction` of each pool. Test sentences
//! draw from the full pools again, so a classifier has to generalize from
//! seen synonyms to unseen ones, which is exactly what a language model
//! trained on the corpus knows about.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::text::{Dataset, LabelSet, RawExample, Vocabulary};

const POSITIVE: &[&str] = &[
    "great", "good", "superb", "excellent", "wonderful", "brilliant", "fine", "lovely", "delightful", "terrific",
    "splendid", "marvelous", "charming", "fantastic", "stunning", "gorgeous", "moving", "clever", "fresh", "vivid",
    "elegant", "touching", "witty", "joyful", "rich", "warm", "gripping", "inventive", "smart", "bold", "tender",
    "graceful", "lively", "sharp", "heartfelt", "magical", "thrilling", "beautiful", "polished", "sincere", "radiant",
    "masterful", "uplifting", "dazzling",
];

const NEGATIVE: &[&str] = &[
    "bad", "poor", "awful", "terrible", "dreadful", "dull", "boring", "weak", "lame", "tedious", "clumsy", "bland",
    "dismal", "stale", "sloppy", "hollow", "shallow", "flat", "tiresome", "messy", "lifeless", "forgettable", "muddled",
    "grating", "cheap", "sour", "limp", "crude", "ugly", "silly", "clunky", "soggy", "murky", "plodding",
    "pointless", "trite", "vapid", "cynical", "bloated", "awkward", "sluggish", "hackneyed", "lazy", "pretentious",
    "insipid", "tepid",
];

const NOUNS: &[&str] = &[
    "film", "movie", "plot", "story", "cast", "acting", "script", "score", "music", "ending", "opening", "scene",
    "director", "camera", "lighting", "dialogue", "pacing", "hero", "villain", "sequel", "premise", "effects", "editing",
    "soundtrack", "finale", "twist", "romance", "comedy", "drama", "thriller", "character", "performance", "setting",
    "costume", "set", "writer", "lead", "actor", "actress", "screenplay", "chase", "battle", "montage", "voice", "mood",
    "tone", "theme", "world", "city", "journey", "family", "friendship", "war", "mystery", "tale", "cinema", "season",
    "episode", "show", "series",
];

const VERBS: &[&str] = &[
    "has", "shows", "offers", "delivers", "brings", "gives", "features", "contains", "presents", "carries", "keeps",
    "holds", "makes", "builds", "finds", "uses", "tells", "reveals", "follows", "explores",
];

const ADVERBS: &[&str] = &[
    "really", "very", "truly", "quite", "rather", "simply", "pretty", "so", "fairly", "mostly", "often", "always",
];

/// Template tokens; `A` adjective of the sentence polarity, `N` noun, `V` verb, `D` adverb.
const TEMPLATES: &[&str] = &[
    "the N was D A and A , the N A",
    "a A , A N that V a A N",
    "the N was A , the N A and the N D A",
    "this N V a D A N and A , A N",
    "the N and the N were both A , A and A",
    "what a A N , D A and A",
    "the N V some A N but the N is D A",
    "overall a A N with A N and a A N",
    "A , A and A",
    "D A , D A , D A",
    "simply A , A and A N",
    "A N , A N , A N",
];

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub seed: u64,
    /// Approximate vocabulary size including reserved tokens.
    pub vocab_size: usize,
    pub n_corpus: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Fraction of each adjective pool visible to the labeled training split.
    pub seen_fraction: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seed: 7,
            vocab_size: 200,
            n_corpus: 3000,
            n_train: 400,
            n_test: 1000,
            seen_fraction: 0.3,
        }
    }
}

pub const NEGATIVE_LABEL: &str = "negative";
pub const POSITIVE_LABEL: &str = "positive";

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    /// Unlabeled sentences for MLM pretraining.
    pub corpus: Vec<String>,
    pub train: Vec<RawExample>,
    pub test: Vec<RawExample>,
    pub positive_pool: Vec<String>,
    pub negative_pool: Vec<String>,
}

struct Pools {
    positive: Vec<String>,
    negative: Vec<String>,
    nouns: Vec<String>,
    verbs: Vec<String>,
    adverbs: Vec<String>,
}

/// Takes real words first, then invents `{stem}{n}` fillers.
fn pool(words: &[&str], size: usize, stem: &str) -> Vec<String> {
    (0..size)
        .map(|i| words.get(i).map_or_else(|| format!("{stem}{i}"), |w| w.to_string()))
        .collect()
}

fn pools(vocab_size: usize) -> Result<Pools> {
    // fixed template words plus reserved tokens
    let fixed = 5 + 20;
    if vocab_size < fixed + 20 {
        return Err(Error::Config(format!("synthetic vocab_size {vocab_size} is too small (minimum {})", fixed + 20)));
    }
    let free = vocab_size - fixed;
    let adjectives = (free / 10).max(4);
    let adverbs = (free / 16).max(2);
    let verbs = (free / 12).max(2);
    let nouns = free - 2 * adjectives - adverbs - verbs;
    Ok(Pools {
        positive: pool(POSITIVE, adjectives, "posadj"),
        negative: pool(NEGATIVE, adjectives, "negadj"),
        nouns: pool(NOUNS, nouns, "noun"),
        verbs: pool(VERBS, verbs, "verb"),
        adverbs: pool(ADVERBS, adverbs, "adv"),
    })
}

fn sentence(rng: &mut impl Rng, pools: &Pools, adjectives: &[String]) -> String {
    let template = TEMPLATES[rng.random_range(0..TEMPLATES.len())];
    let pick = |rng: &mut dyn rand::RngCore, from: &[String]| from[rng.random_range(0..from.len())].clone();
    template
        .split(' ')
        .map(|slot| match slot {
            "A" => pick(rng, adjectives),
            "N" => pick(rng, &pools.nouns),
            "V" => pick(rng, &pools.verbs),
            "D" => pick(rng, &pools.adverbs),
            w => w.to_string(),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Balanced labeled examples, shuffled.
fn labeled(rng: &mut impl Rng, pools: &Pools, n: usize, seen: Option<usize>) -> Vec<RawExample> {
    let cut = |p: &[String]| p[..seen.unwrap_or(p.len()).min(p.len())].to_vec();
    let pos = cut(&pools.positive);
    let neg = cut(&pools.negative);
    let mut out: Vec<RawExample> = (0..n)
        .map(|i| {
            let positive = i % 2 == 1;
            RawExample {
                label: if positive { POSITIVE_LABEL } else { NEGATIVE_LABEL }.to_string(),
                text_a: sentence(rng, pools, if positive { &pos } else { &neg }),
                text_b: None,
            }
        })
        .collect();
    out.shuffle(rng);
    out
}

/// Generates corpus, train and test splits; deterministic in `config.seed`.
pub fn make_synthetic_task(config: &SyntheticConfig) -> Result<SyntheticTask> {
    if config.n_corpus == 0 || config.n_train == 0 || config.n_test == 0 {
        return Err(Error::Config("synthetic split sizes must be positive".into()));
    }
    if !(0.0..=1.0).contains(&config.seen_fraction) || config.seen_fraction == 0.0 {
        return Err(Error::Config(format!("seen_fraction {} outside (0, 1]", config.seen_fraction)));
    }
    let pools = pools(config.vocab_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let corpus = (0..config.n_corpus)
        .map(|_| {
            let adj = if rng.random_bool(0.5) { &pools.positive } else { &pools.negative };
            sentence(&mut rng, &pools, adj)
        })
        .collect();
    let seen = ((pools.positive.len() as f64 * config.seen_fraction).round() as usize).max(1);
    let train = labeled(&mut rng, &pools, config.n_train, Some(seen));
    let test = labeled(&mut rng, &pools, config.n_test, None);
    Ok(SyntheticTask {
        corpus,
        train,
        test,
        positive_pool: pools.positive,
        negative_pool: pools.negative,
    })
}

impl SyntheticTask {
    /// Vocabulary over the unlabeled corpus.
    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::build(&self.corpus, 1)
    }

    pub fn labels() -> LabelSet {
        LabelSet::new([NEGATIVE_LABEL.to_string(), POSITIVE_LABEL.to_string()])
    }

    /// Encoded corpus (single label), train and test datasets.
    pub fn encode(&self, vocab: &Vocabulary, max_seq_len: usize) -> Result<(Dataset, Dataset, Dataset)> {
        let corpus: Vec<RawExample> = self
            .corpus
            .iter()
            .map(|t| RawExample {
                label: "text".into(),
                text_a: t.clone(),
                text_b: None,
            })
            .collect();
        let labels = Self::labels();
        Ok((
            Dataset::from_examples(&corpus, vocab, max_seq_len, None)?,
            Dataset::from_examples(&self.train, vocab, max_seq_len, Some(&labels))?,
            Dataset::from_examples(&self.test, vocab, max_seq_len, Some(&labels))?,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::format_examples;

    #[test]
    fn deterministic_under_seed() {
        let cfg = SyntheticConfig::default();
        let a = make_synthetic_task(&cfg).unwrap();
        let b = make_synthetic_task(&cfg).unwrap();
        assert_eq!(format_examples(&a.train), format_examples(&b.train));
        assert_eq!(format_examples(&a.test), format_examples(&b.test));
        assert_eq!(a.corpus, b.corpus);
        let c = make_synthetic_task(&SyntheticConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a.corpus, c.corpus);
    }

    #[test]
    fn vocabulary_size_is_close_to_target() {
        let task = make_synthetic_task(&SyntheticConfig::default()).unwrap();
        let v = task.vocabulary().unwrap();
        assert!((190..=205).contains(&v.len()), "{}", v.len());
        let longest = task.corpus.iter().map(|t| crate::text::tokenize(t).len()).max().unwrap();
        assert!(longest + 2 <= 16, "{longest}");
    }

    #[test]
    fn train_only_sees_part_of_each_pool() {
        let task = make_synthetic_task(&SyntheticConfig::default()).unwrap();
        let half = (task.positive_pool.len() as f64 * SyntheticConfig::default().seen_fraction).round() as usize;
        let unseen: Vec<&String> = task.positive_pool[half..].iter().chain(&task.negative_pool[half..]).collect();
        for ex in &task.train {
            let toks = crate::text::tokenize(&ex.text_a);
            assert!(unseen.iter().all(|u| !toks.contains(u)), "{}", ex.text_a);
        }
        assert!(task.test.iter().any(|ex| unseen.iter().any(|u| crate::text::tokenize(&ex.text_a).contains(u))));
    }

    #[test]
    fn rejects_degenerate_configs() {
        let cfg = SyntheticConfig {
            n_train: 0,
            ..SyntheticConfig::default()
        };
        assert!(make_synthetic_task(&cfg).is_err());
        let cfg = SyntheticConfig {
            vocab_size: 30,
            ..SyntheticConfig::default()
        };
        assert!(make_synthetic_task(&cfg).is_err());
    }
}
