//! Synthetic parallel languages.
//!
//! Every language renders the same concept inventory with its own lexicon,
//! so a template realization has one meaning and `L` disjoint surface forms.
//! The fragmenting language draws its words uniformly from a large alphabet;
//! its character bigrams are rare, so subword training leaves them split.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CorpusSpec, LabeledSequence, LanguageId};
use crate::error::{bail, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Func {
    The,
    And,
    To,
    Is,
    Opposite,
    Of,
    In,
    With,
    Then,
    A,
}

const FUNCS: [Func; 10] = [
    Func::The,
    Func::And,
    Func::To,
    Func::Is,
    Func::Opposite,
    Func::Of,
    Func::In,
    Func::With,
    Func::Then,
    Func::A,
];

const LIST_LENGTHS: [usize; 2] = [7, 10];
const N_FIXED: usize = FUNCS.len() + 7 + 10;
const MIN_LEXICON: usize = N_FIXED + 20;

pub(super) fn check_lexicon_demand(lexicon_size: usize) -> Result<()> {
    if lexicon_size < MIN_LEXICON {
        bail!(
            Config,
            "lexicon_size {lexicon_size} below the template slot demand of {MIN_LEXICON} words"
        );
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Class {
    Noun,
    Verb,
    Adj,
    Place,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Func(Func),
    Content(Class),
    /// Antonym of the adjective filled at the given slot index.
    Antonym(usize),
    /// Start of a run through ordered list `list`.
    ListStart(usize),
    /// `offset` items after the list start at the given slot index.
    ListNext(usize, usize),
    Period,
}

/// A template with concrete fillers: one meaning, renderable in every language.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Realization {
    pub template: usize,
    /// Concept id per slot (`usize::MAX` for punctuation).
    pub concepts: Vec<usize>,
}

/// Concept inventory, per-language lexicons and the shared template set.
#[derive(Debug, Clone)]
pub struct SyntheticLanguages {
    lexicons: Vec<Vec<String>>,
    templates: Vec<Vec<Slot>>,
    func_base: usize,
    list_base: [usize; 2],
    classes: Vec<(Class, Vec<usize>)>,
    antonym: Vec<usize>,
    zipf_s: f64,
}

struct Script {
    consonants: &'static str,
    vowels: &'static str,
}

const SCRIPTS: [Script; 6] = [
    Script { consonants: "ptkmnsl", vowels: "aeiou" },
    Script { consonants: "bdgvzrh", vowels: "aeiouy" },
    Script { consonants: "fcjqwxy", vowels: "àèìòù" },
    Script { consonants: "βγδζθκλμνξπρστφχψ", vowels: "αεηιουω" },
    Script { consonants: "бвгджзклмнпрстфхцчшщ", vowels: "аеиоуыэюя" },
    Script { consonants: "բգդզթժլխծկհձղճմյնշչպջռսվտրցփքֆ", vowels: "աեէըիոօ" },
];

const FRAGMENT_ALPHABET: &str = "ابتثجحخدذرزسشصضطظعغفقكلمنهوي";

impl SyntheticLanguages {
    pub fn new(spec: &CorpusSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5EED_1E81_C0);
        let n_lang = spec.languages.len();
        if n_lang > 10 {
            bail!(Config, "at most 10 synthetic languages are supported, got {n_lang}");
        }

        // Concept layout: function words, two ordered lists, then content classes.
        let func_base = 0;
        let list_base = [FUNCS.len(), FUNCS.len() + LIST_LENGTHS[0]];
        let free = spec.lexicon_size - N_FIXED;
        let n_adj = ((free as f64 * 0.2) as usize / 2 * 2).max(4);
        let n_verb = ((free as f64 * 0.25) as usize).max(4);
        let n_place = ((free as f64 * 0.15) as usize).max(4);
        let n_noun = free - n_adj - n_verb - n_place;
        let mut next = N_FIXED;
        let mut classes = Vec::new();
        for (class, n) in [
            (Class::Noun, n_noun),
            (Class::Verb, n_verb),
            (Class::Adj, n_adj),
            (Class::Place, n_place),
        ] {
            classes.push((class, (next..next + n).collect::<Vec<_>>()));
            next += n;
        }
        let mut antonym: Vec<usize> = (0..spec.lexicon_size).collect();
        let adjs = &classes[2].1;
        for pair in adjs.chunks_exact(2) {
            antonym[pair[0]] = pair[1];
            antonym[pair[1]] = pair[0];
        }

        let mut seen: HashSet<String> = HashSet::new();
        let mut lexicons = Vec::with_capacity(n_lang);
        let mut syllabic = 0;
        for lang in &spec.languages {
            let fragmenting = spec.fragmenting_language == Some(lang.id);
            let mut lex = Vec::with_capacity(spec.lexicon_size);
            for concept in 0..spec.lexicon_size {
                let short = concept < N_FIXED;
                let word = loop {
                    let w = if fragmenting {
                        fragment_word(&mut rng, short)
                    } else {
                        syllabic_word(&mut rng, &SCRIPTS[syllabic % SCRIPTS.len()], short)
                    };
                    if seen.insert(w.clone()) {
                        break w;
                    }
                };
                lex.push(word);
            }
            if !fragmenting {
                syllabic += 1;
            }
            lexicons.push(lex);
        }

        let templates = (0..spec.templates)
            .map(|_| random_template(&mut rng))
            .collect();

        Ok(Self {
            lexicons,
            templates,
            func_base,
            list_base,
            classes,
            antonym,
            zipf_s: 0.9,
        })
    }

    pub fn n_languages(&self) -> usize {
        self.lexicons.len()
    }

    pub fn lexicon(&self, lang: LanguageId) -> &[String] {
        &self.lexicons[lang.0]
    }

    /// Content words (nouns, verbs, adjectives, places) of a language.
    pub fn content_words(&self, lang: LanguageId) -> Vec<&str> {
        self.classes
            .iter()
            .flat_map(|(_, ids)| ids.iter().map(|&c| self.lexicons[lang.0][c].as_str()))
            .collect()
    }

    fn pick(&self, rng: &mut impl Rng, class: Class) -> usize {
        let ids = &self
            .classes
            .iter()
            .find(|(c, _)| *c == class)
            .expect("class exists")
            .1;
        // Zipf-like preference for low ranks.
        let weights: Vec<f64> = (0..ids.len())
            .map(|r| 1.0 / ((r + 1) as f64).powf(self.zipf_s))
            .collect();
        let total: f64 = weights.iter().sum();
        let mut u = rng.random::<f64>() * total;
        for (i, w) in weights.iter().enumerate() {
            if u < *w {
                return ids[i];
            }
            u -= w;
        }
        *ids.last().unwrap()
    }

    pub fn sample_realization(&self, rng: &mut impl Rng) -> Realization {
        let template = rng.random_range(0..self.templates.len());
        let slots = &self.templates[template];
        let mut concepts = vec![usize::MAX; slots.len()];
        for (i, slot) in slots.iter().enumerate() {
            concepts[i] = match *slot {
                Slot::Func(f) => self.func_base + FUNCS.iter().position(|&g| g == f).unwrap(),
                Slot::Content(class) => self.pick(rng, class),
                Slot::Antonym(j) => self.antonym[concepts[j]],
                Slot::ListStart(list) => {
                    // Leave room for up to four following items.
                    let len = LIST_LENGTHS[list];
                    self.list_base[list] + rng.random_range(0..len - 4)
                }
                Slot::ListNext(j, off) => concepts[j] + off,
                Slot::Period => usize::MAX,
            };
        }
        Realization { template, concepts }
    }

    pub fn render(&self, r: &Realization, lang: LanguageId) -> String {
        let lex = &self.lexicons[lang.0];
        let words: Vec<&str> = r
            .concepts
            .iter()
            .map(|&c| if c == usize::MAX { "." } else { lex[c].as_str() })
            .collect();
        words.join(" ")
    }

    /// `n` realizations rendered in every language, for validation and
    /// language-swap prompts.
    pub fn parallel_set(&self, n: usize, seed: u64) -> Vec<Realization> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| self.sample_realization(&mut rng)).collect()
    }
}

fn syllabic_word(rng: &mut impl Rng, script: &Script, short: bool) -> String {
    let cons: Vec<char> = script.consonants.chars().collect();
    let vows: Vec<char> = script.vowels.chars().collect();
    let n_syll = if short { 1 } else { rng.random_range(2..=3) };
    let mut w = String::new();
    for _ in 0..n_syll {
        w.push(cons[rng.random_range(0..cons.len())]);
        w.push(vows[rng.random_range(0..vows.len())]);
    }
    if short && rng.random_bool(0.5) {
        w.push(cons[rng.random_range(0..cons.len())]);
    }
    w
}

fn fragment_word(rng: &mut impl Rng, short: bool) -> String {
    let alphabet: Vec<char> = FRAGMENT_ALPHABET.chars().collect();
    let len = if short { 3 } else { rng.random_range(5..=8) };
    (0..len)
        .map(|_| alphabet[rng.random_range(0..alphabet.len())])
        .collect()
}

fn random_template(rng: &mut impl Rng) -> Vec<Slot> {
    let n_frames = rng.random_range(2..=3);
    let mut slots = Vec::new();
    for _ in 0..n_frames {
        let kind = rng.random_range(0..7);
        push_frame(&mut slots, kind, rng);
    }
    slots
}

fn push_frame(slots: &mut Vec<Slot>, kind: usize, rng: &mut impl Rng) {
    use Class::*;
    use Func::*;
    let base = slots.len();
    let f = Slot::Func;
    let c = Slot::Content;
    match kind {
        0 => slots.extend([f(The), c(Noun), c(Verb), f(The), c(Noun), Slot::Period]),
        1 => slots.extend([f(The), c(Adj), c(Noun), c(Verb), f(To), f(The), c(Place), Slot::Period]),
        2 => slots.extend([c(Noun), f(And), c(Noun), c(Verb), f(In), f(The), c(Place), Slot::Period]),
        3 => {
            let list = rng.random_range(0..LIST_LENGTHS.len());
            slots.extend([
                Slot::ListStart(list),
                Slot::ListNext(base, 1),
                Slot::ListNext(base, 2),
                f(And),
                Slot::ListNext(base, 3),
                Slot::Period,
            ]);
        }
        4 => slots.extend([
            f(The),
            f(Opposite),
            f(Of),
            c(Adj),
            f(Is),
            Slot::Antonym(base + 3),
            Slot::Period,
        ]),
        5 => slots.extend([
            f(The),
            c(Noun),
            f(Is),
            c(Adj),
            f(And),
            f(The),
            c(Noun),
            f(Is),
            Slot::Antonym(base + 3),
            Slot::Period,
        ]),
        _ => slots.extend([
            f(Then),
            f(The),
            c(Noun),
            c(Verb),
            f(With),
            f(A),
            c(Adj),
            c(Noun),
            Slot::Period,
        ]),
    }
}

/// Deterministic corpus: per-language counts follow the mixture by largest
/// remainder, and sequence order is a seeded shuffle.
pub fn generate_synthetic_corpus(spec: &CorpusSpec) -> Result<Vec<LabeledSequence>> {
    let langs = SyntheticLanguages::new(spec)?;
    let counts = spec.sequence_counts();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut labels: Vec<LanguageId> = counts
        .iter()
        .enumerate()
        .flat_map(|(l, &n)| std::iter::repeat_n(LanguageId(l), n))
        .collect();
    labels.shuffle(&mut rng);
    Ok(labels
        .into_iter()
        .map(|language| {
            let r = langs.sample_realization(&mut rng);
            LabeledSequence {
                text: langs.render(&r, language),
                language,
                tokens: Vec::new(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{count_by_language, default_languages};

    fn spec(mixture: Vec<f64>, n: usize) -> CorpusSpec {
        CorpusSpec {
            mixture,
            n_sequences: n,
            ..Default::default()
        }
    }

    #[test]
    fn dominant_mixture_counts() {
        let corpus = generate_synthetic_corpus(&spec(CorpusSpec::dominant_mixture(5, 0.9), 1000)).unwrap();
        assert_eq!(corpus.len(), 1000);
        assert_eq!(count_by_language(&corpus, 5)[0], 900);
    }

    #[test]
    fn balanced_mixture_counts() {
        let corpus = generate_synthetic_corpus(&spec(vec![0.2; 5], 1000)).unwrap();
        assert_eq!(count_by_language(&corpus, 5), vec![200; 5]);
    }

    #[test]
    fn identical_seed_gives_identical_corpus() {
        let s = spec(vec![0.2; 5], 300);
        let a = serde_json::to_vec(&generate_synthetic_corpus(&s).unwrap()).unwrap();
        let b = serde_json::to_vec(&generate_synthetic_corpus(&s).unwrap()).unwrap();
        assert_eq!(a, b);
        let other = generate_synthetic_corpus(&CorpusSpec { seed: 8, ..s }).unwrap();
        assert_ne!(a, serde_json::to_vec(&other).unwrap());
    }

    #[test]
    fn lexicons_are_disjoint_and_parallel() {
        let s = spec(vec![0.2; 5], 10);
        let langs = SyntheticLanguages::new(&s).unwrap();
        let mut all = HashSet::new();
        for l in 0..5 {
            for w in langs.lexicon(LanguageId(l)) {
                assert!(all.insert(w.clone()), "word {w} shared across languages");
            }
        }
        let r = langs.parallel_set(1, 3).remove(0);
        let n_words: Vec<usize> = (0..5)
            .map(|l| langs.render(&r, LanguageId(l)).split(' ').count())
            .collect();
        assert!(n_words.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn mixture_error_is_configuration_error() {
        let err = generate_synthetic_corpus(&spec(vec![0.5, 0.1, 0.1, 0.1, 0.1], 10)).unwrap_err();
        assert!(matches!(err, crate::error::Error::Config(_)));
    }

    #[test]
    fn small_lexicon_rejected() {
        let s = CorpusSpec {
            lexicon_size: 10,
            languages: default_languages(5),
            ..Default::default()
        };
        assert!(s.validate().is_err());
    }
}
