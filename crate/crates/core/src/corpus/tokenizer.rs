//! Byte-pair-encoding tokenizer trained on a language-balanced sample.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{count_by_language, LabeledSequence, Language};
use crate::error::{bail, Error, Result};

pub const TOKENIZER_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Specials {
    pub bos: u32,
    pub eos: u32,
    pub pad: u32,
    pub unk: u32,
}

const SPECIAL_STRINGS: [&str; 4] = ["<|bos|>", "<|eos|>", "<|pad|>", "<|unk|>"];

#[derive(Debug, Clone)]
pub struct Tokenizer {
    specials: Specials,
    vocab: Vec<String>,
    index: HashMap<String, u32>,
    merges: Vec<(u32, u32)>,
    /// pair → (rank, merged id)
    ranks: HashMap<(u32, u32), (usize, u32)>,
}

#[derive(Serialize, Deserialize)]
struct TokenizerFile {
    version: u32,
    specials: Specials,
    vocab: BTreeMap<String, u32>,
    merges: Vec<[String; 2]>,
}

/// Characters contributed by each language to merge learning.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub per_language_chars: Vec<usize>,
}

impl BalanceReport {
    /// `(max − min) / max` over languages.
    pub fn relative_spread(&self) -> f64 {
        let max = *self.per_language_chars.iter().max().unwrap_or(&0) as f64;
        let min = *self.per_language_chars.iter().min().unwrap_or(&0) as f64;
        if max == 0.0 {
            0.0
        } else {
            (max - min) / max
        }
    }
}

/// Splits text into pre-tokens: runs of non-whitespace with at most one
/// leading space, and whitespace runs. Concatenating the pieces gives the
/// input back.
pub fn pre_tokenize(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let bytes: Vec<(usize, char)> = text.char_indices().collect();
    let n = bytes.len();
    let end_of = |i: usize| if i < n { bytes[i].0 } else { text.len() };
    let mut i = 0;
    while i < n {
        let start = i;
        let c = bytes[i].1;
        if !c.is_whitespace() || (c == ' ' && i + 1 < n && !bytes[i + 1].1.is_whitespace()) {
            i += 1;
            while i < n && !bytes[i].1.is_whitespace() {
                i += 1;
            }
        } else {
            while i < n && bytes[i].1.is_whitespace() {
                // Leave a final space to prefix the following word.
                if bytes[i].1 == ' ' && i + 1 < n && !bytes[i + 1].1.is_whitespace() && i > start {
                    break;
                }
                i += 1;
            }
        }
        out.push(&text[end_of(start)..end_of(i)]);
    }
    out
}

/// Equalizes per-language character mass by truncating over-represented
/// languages (in corpus order) to the smallest language's mass.
pub fn rebalance_by_char_mass(
    corpus: &[LabeledSequence],
    languages: &[Language],
) -> Result<(Vec<Vec<String>>, BalanceReport)> {
    let counts = count_by_language(corpus, languages.len());
    if let Some(missing) = counts.iter().position(|&c| c == 0) {
        bail!(
            Validation,
            "corpus has no sequences for declared language `{}`",
            languages[missing].name
        );
    }
    let mut mass = vec![0usize; languages.len()];
    for s in corpus {
        mass[s.language.0] += s.text.chars().count();
    }
    let target = *mass.iter().min().unwrap();
    let mut texts = vec![Vec::new(); languages.len()];
    let mut taken = vec![0usize; languages.len()];
    for s in corpus {
        let l = s.language.0;
        let room = target - taken[l];
        if room == 0 {
            continue;
        }
        let len = s.text.chars().count();
        if len <= room {
            texts[l].push(s.text.clone());
            taken[l] += len;
        } else {
            texts[l].push(s.text.chars().take(room).collect());
            taken[l] += room;
        }
    }
    Ok((texts, BalanceReport { per_language_chars: taken }))
}

/// Trains BPE on the balanced sample. `vocab_size` counts the four specials.
pub fn train_tokenizer(
    corpus: &[LabeledSequence],
    languages: &[Language],
    vocab_size: usize,
) -> Result<(Tokenizer, BalanceReport)> {
    let (texts, report) = rebalance_by_char_mass(corpus, languages)?;

    let mut chunk_counts: HashMap<&str, u64> = HashMap::new();
    for t in texts.iter().flatten() {
        for chunk in pre_tokenize(t) {
            *chunk_counts.entry(chunk).or_default() += 1;
        }
    }
    let alphabet: Vec<char> = {
        let mut set: Vec<char> = chunk_counts
            .keys()
            .flat_map(|c| c.chars())
            .collect::<HashSet<_>>()
            .into_iter()
            .collect();
        set.sort_unstable();
        set
    };
    if vocab_size < alphabet.len() + SPECIAL_STRINGS.len() {
        bail!(
            Config,
            "vocab_size {vocab_size} is smaller than the alphabet ({}) plus {} specials",
            alphabet.len(),
            SPECIAL_STRINGS.len()
        );
    }

    let mut vocab: Vec<String> = SPECIAL_STRINGS.iter().map(|s| s.to_string()).collect();
    vocab.extend(alphabet.iter().map(|c| c.to_string()));
    let mut index: HashMap<String, u32> = vocab
        .iter()
        .enumerate()
        .map(|(i, s)| (s.clone(), i as u32))
        .collect();

    // Sorted for a deterministic word order.
    let mut words: Vec<(Vec<u32>, u64)> = {
        let mut v: Vec<(&str, u64)> = chunk_counts.into_iter().collect();
        v.sort_unstable();
        v.into_iter()
            .map(|(c, n)| (c.chars().map(|ch| index[&ch.to_string()]).collect(), n))
            .collect()
    };

    let mut merges = Vec::new();
    let mut blocked: HashSet<(u32, u32)> = HashSet::new();
    while vocab.len() < vocab_size {
        let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
        for (syms, n) in &words {
            for w in syms.windows(2) {
                let p = (w[0], w[1]);
                if !blocked.contains(&p) {
                    *pair_counts.entry(p).or_default() += n;
                }
            }
        }
        let Some((&best, _)) = pair_counts
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
        else {
            break;
        };
        let merged = format!("{}{}", vocab[best.0 as usize], vocab[best.1 as usize]);
        let id = match index.get(&merged) {
            Some(&id) if (id as usize) < SPECIAL_STRINGS.len() => {
                blocked.insert(best);
                continue;
            }
            Some(&id) => id,
            None => {
                let id = vocab.len() as u32;
                vocab.push(merged.clone());
                index.insert(merged, id);
                id
            }
        };
        merges.push(best);
        for (syms, _) in words.iter_mut() {
            merge_pair(syms, best, id);
        }
    }

    let tok = Tokenizer::from_parts(vocab, merges)?;
    Ok((tok, report))
}

fn merge_pair(syms: &mut Vec<u32>, pair: (u32, u32), id: u32) {
    if syms.len() < 2 {
        return;
    }
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && syms[i] == pair.0 && syms[i + 1] == pair.1 {
            out.push(id);
            i += 2;
        } else {
            out.push(syms[i]);
            i += 1;
        }
    }
    *syms = out;
}

impl Tokenizer {
    fn from_parts(vocab: Vec<String>, merges: Vec<(u32, u32)>) -> Result<Self> {
        let index: HashMap<String, u32> = vocab
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as u32))
            .collect();
        if index.len() != vocab.len() {
            bail!(Format, "duplicate token strings in vocabulary");
        }
        for (i, s) in SPECIAL_STRINGS.iter().enumerate() {
            if vocab.get(i).map(String::as_str) != Some(*s) {
                bail!(Format, "special token {s} must have id {i}");
            }
        }
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, &(a, b)) in merges.iter().enumerate() {
            let merged = format!("{}{}", vocab[a as usize], vocab[b as usize]);
            let id = *index
                .get(&merged)
                .ok_or_else(|| Error::Format(format!("merge result {merged:?} not in vocabulary")))?;
            ranks.entry((a, b)).or_insert((rank, id));
        }
        Ok(Self {
            specials: Specials {
                bos: 0,
                eos: 1,
                pad: 2,
                unk: 3,
            },
            vocab,
            index,
            merges,
            ranks,
        })
    }

    pub fn specials(&self) -> Specials {
        self.specials
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn token_str(&self, id: u32) -> &str {
        self.vocab.get(id as usize).map(String::as_str).unwrap_or("")
    }

    pub fn token_id(&self, s: &str) -> Option<u32> {
        self.index.get(s).copied()
    }

    pub fn num_merges(&self) -> usize {
        self.merges.len()
    }

    fn encode_chunk(&self, chunk: &str, out: &mut Vec<u32>) {
        let mut syms: Vec<u32> = chunk
            .chars()
            .map(|c| {
                let mut buf = [0u8; 4];
                self.index
                    .get(c.encode_utf8(&mut buf) as &str)
                    .copied()
                    .filter(|&id| id >= 4)
                    .unwrap_or(self.specials.unk)
            })
            .collect();
        loop {
            let best = syms
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&(r, id)| (r, (w[0], w[1]), id)))
                .min_by_key(|&(r, _, _)| r);
            match best {
                Some((_, pair, id)) => merge_pair(&mut syms, pair, id),
                None => break,
            }
        }
        out.extend(syms);
    }

    /// Greedy application of merges in learned order. Unknown characters map to UNK.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for chunk in pre_tokenize(text) {
            self.encode_chunk(chunk, &mut out);
        }
        out
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        let mut s = String::new();
        for &id in ids {
            if id == self.specials.unk {
                s.push('\u{FFFD}');
            } else if id >= 4 {
                s.push_str(self.token_str(id));
            }
        }
        s
    }

    pub fn encode_corpus(&self, corpus: &mut [LabeledSequence]) {
        for s in corpus {
            s.tokens = self.encode(&s.text);
        }
    }

    /// Mean subword tokens per whitespace-separated word.
    pub fn mean_subtokens_per_word<'a>(&self, words: impl IntoIterator<Item = &'a str>) -> f64 {
        let (mut tokens, mut n) = (0usize, 0usize);
        for w in words {
            tokens += self.encode(&format!(" {w}")).len();
            n += 1;
        }
        if n == 0 {
            0.0
        } else {
            tokens as f64 / n as f64
        }
    }

    pub fn to_json(&self) -> String {
        let file = TokenizerFile {
            version: TOKENIZER_VERSION,
            specials: self.specials,
            vocab: self
                .vocab
                .iter()
                .enumerate()
                .map(|(i, s)| (s.clone(), i as u32))
                .collect(),
            merges: self
                .merges
                .iter()
                .map(|&(a, b)| [self.vocab[a as usize].clone(), self.vocab[b as usize].clone()])
                .collect(),
        };
        serde_json::to_string(&file).expect("tokenizer serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: TokenizerFile = serde_json::from_str(s)?;
        if file.version != TOKENIZER_VERSION {
            bail!(Format, "unsupported tokenizer version {}", file.version);
        }
        let mut vocab = vec![String::new(); file.vocab.len()];
        for (s, id) in file.vocab {
            let slot = vocab
                .get_mut(id as usize)
                .ok_or_else(|| Error::Format(format!("token id {id} out of range")))?;
            *slot = s;
        }
        let index: HashMap<&str, u32> = vocab
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i as u32))
            .collect();
        let merges = file
            .merges
            .iter()
            .map(|[a, b]| match (index.get(a.as_str()), index.get(b.as_str())) {
                (Some(&x), Some(&y)) => Ok((x, y)),
                _ => Err(Error::Format(format!("merge ({a:?}, {b:?}) references unknown tokens"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(vocab, merges)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}
