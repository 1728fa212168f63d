//! Vocabulary, word-level tokenization and pseudo-language surface forms.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Sequence cap for captions and queries.
pub const SHORT_T_MAX: usize = 24;
/// Sequence cap for chunks; also the size of the text encoder position table.
pub const LONG_T_MAX: usize = 96;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocab {
    fn from_words(words: Vec<String>) -> Self {
        let ids = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Vocab { words, ids }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Id of `word`, or [`UNK`] when absent.
    pub fn id_of(&self, word: &str) -> u32 {
        self.ids.get(word).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.ids.contains_key(word)
    }

    pub fn word_of(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// `word<TAB>id` lines sorted by id.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (i, w) in self.words.iter().enumerate() {
            let _ = writeln!(s, "{w}\t{i}");
        }
        s
    }

    pub fn write_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(self.to_tsv().as_bytes())?;
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(r: R) -> Result<Self> {
        let mut words = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            let (word, id) = line
                .split_once('\t')
                .ok_or_else(|| Error::Config(format!("vocab line {} lacks a tab", lineno + 1)))?;
            let id: usize = id
                .parse()
                .map_err(|_| Error::Config(format!("vocab line {} has a bad id", lineno + 1)))?;
            if id != words.len() {
                return Err(Error::Config(format!(
                    "vocab ids must be contiguous; line {} has id {id}",
                    lineno + 1
                )));
            }
            words.push(word.to_string());
        }
        if words.len() < SPECIALS.len() || words[..4] != SPECIALS {
            return Err(Error::Config("vocab lacks the special tokens".into()));
        }
        Ok(Vocab::from_words(words))
    }
}

/// Specials first, then every word with frequency ≥ `min_count`, ordered by
/// descending count and ascending word.
pub fn build_vocab<S: AsRef<str>>(corpus: &[Vec<S>], min_count: usize) -> Result<Vocab> {
    if corpus.is_empty() || corpus.iter().all(Vec::is_empty) {
        return Err(Error::EmptyCorpus);
    }
    if min_count == 0 {
        return Err(Error::Config("min_count must be at least 1".into()));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for sentence in corpus {
        for w in sentence {
            *counts.entry(w.as_ref()).or_default() += 1;
        }
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(w, c)| c >= min_count && !SPECIALS.contains(&w))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let words = SPECIALS
        .iter()
        .map(|s| s.to_string())
        .chain(kept.into_iter().map(|(w, _)| w.to_string()))
        .collect();
    Ok(Vocab::from_words(words))
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LanguageTag {
    pub index: usize,
    pub name: String,
}

impl LanguageTag {
    pub fn new(index: usize) -> Self {
        LanguageTag {
            index,
            name: format!("lang{index:02}"),
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        let idx = name.strip_prefix("lang")?.parse().ok()?;
        Some(Self::new(idx))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq {
    ids: Vec<u32>,
}

impl TokenSeq {
    /// Validates ids against the vocabulary size and length cap.
    pub fn new(ids: Vec<u32>, vocab_size: usize, t_max: usize) -> Result<Self> {
        if ids.len() > t_max {
            return Err(Error::SequenceTooLong {
                len: ids.len(),
                max: t_max,
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: vocab_size,
            });
        }
        Ok(TokenSeq { ids })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// `true` for every non-PAD position.
    pub fn mask(&self) -> Vec<bool> {
        self.ids.iter().map(|&id| id != PAD).collect()
    }
}

/// `[BOS] + ids + [EOS]`, unknown words mapping to UNK.
pub fn tokenize<S: AsRef<str>>(text: &[S], vocab: &Vocab, t_max: usize) -> Result<TokenSeq> {
    if text.len() + 2 > t_max {
        return Err(Error::SequenceTooLong {
            len: text.len() + 2,
            max: t_max,
        });
    }
    let mut ids = Vec::with_capacity(text.len() + 2);
    ids.push(BOS);
    ids.extend(text.iter().map(|w| vocab.id_of(w.as_ref())));
    ids.push(EOS);
    TokenSeq::new(ids, vocab.len(), t_max)
}

pub fn detokenize(seq: &TokenSeq, vocab: &Vocab) -> Vec<String> {
    seq.ids()
        .iter()
        .filter(|&&id| id >= SPECIALS.len() as u32)
        .filter_map(|&id| vocab.word_of(id).map(str::to_string))
        .collect()
}

/// Deterministic per-language re-lexification of a closed base wordlist.
///
/// Language 0 is the base language. Language `k` sends the base word at
/// index `i` to `base[perm_k[i]] + "_" + name_k`.
#[derive(Clone, Debug)]
pub struct SurfaceMap {
    base: Vec<String>,
    index: HashMap<String, usize>,
    perms: Vec<Vec<usize>>,
}

impl SurfaceMap {
    pub fn new<S: AsRef<str>>(base: &[S], n_langs: usize, seed: u64) -> Self {
        let base: Vec<String> = base.iter().map(|s| s.as_ref().to_string()).collect();
        let index = base
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        let perms = (0..n_langs)
            .map(|k| {
                let mut p: Vec<usize> = (0..base.len()).collect();
                if k > 0 {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                    p.shuffle(&mut rng);
                }
                p
            })
            .collect();
        SurfaceMap { base, index, perms }
    }

    pub fn n_langs(&self) -> usize {
        self.perms.len()
    }

    pub fn base_words(&self) -> &[String] {
        &self.base
    }

    pub fn map(&self, word: &str, lang: &LanguageTag) -> Result<String> {
        let i = *self
            .index
            .get(word)
            .ok_or_else(|| Error::UnknownBaseWord(word.to_string()))?;
        let perm = self.perms.get(lang.index).ok_or(Error::UnknownLanguage {
            index: lang.index,
            count: self.perms.len(),
        })?;
        if lang.index == 0 {
            return Ok(word.to_string());
        }
        Ok(format!("{}_{}", self.base[perm[i]], lang.name))
    }

    pub fn map_all<S: AsRef<str>>(&self, words: &[S], lang: &LanguageTag) -> Result<Vec<String>> {
        words.iter().map(|w| self.map(w.as_ref(), lang)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn dog_vocab() -> Vocab {
        build_vocab(&[vec!["dog", "dog", "cat"]], 2).unwrap()
    }

    #[test]
    fn min_count_keeps_only_frequent_words() {
        let v = dog_vocab();
        assert_eq!(v.len(), 5);
        assert_eq!(v.id_of("dog"), 4);
        assert_eq!(v.id_of("cat"), UNK);
        assert_eq!(v.word_of(4), Some("dog"));
    }

    #[test]
    fn build_is_deterministic() {
        let a = build_vocab(&[vec!["a"]], 1).unwrap();
        let b = build_vocab(&[vec!["a"]], 1).unwrap();
        assert_eq!(a.to_tsv(), b.to_tsv());
    }

    #[test]
    fn ordering_is_count_desc_then_word_asc() {
        let v = build_vocab(&[vec!["b", "a", "c", "c"]], 1).unwrap();
        assert_eq!(&v.words()[4..], &["c", "a", "b"]);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let empty: Vec<Vec<&str>> = vec![];
        assert!(matches!(build_vocab(&empty, 1), Err(Error::EmptyCorpus)));
        let err = build_vocab(&[Vec::<&str>::new()], 1).unwrap_err();
        assert_eq!(err.to_string(), "empty corpus");
    }

    #[test]
    fn tokenize_wraps_and_maps_unknowns() {
        let v = dog_vocab();
        assert_eq!(tokenize(&["dog"], &v, 24).unwrap().ids(), &[2, 4, 3]);
        assert_eq!(tokenize(&["zebra"], &v, 24).unwrap().ids(), &[2, 1, 3]);
        let long = vec!["dog"; 23];
        let err = tokenize(&long, &v, 24).unwrap_err();
        assert!(err.to_string().starts_with("sequence too long"));
        assert!(tokenize(&vec!["dog"; 22], &v, 24).is_ok());
    }

    #[test]
    fn detokenize_strips_specials() {
        let v = dog_vocab();
        let s = TokenSeq::new(vec![2, 4, 3], v.len(), 24).unwrap();
        assert_eq!(detokenize(&s, &v), vec!["dog"]);
        let e = TokenSeq::new(vec![2, 3], v.len(), 24).unwrap();
        assert!(detokenize(&e, &v).is_empty());
    }

    #[test]
    fn token_seq_rejects_out_of_range_ids() {
        assert!(TokenSeq::new(vec![2, 9, 3], 5, 24).is_err());
    }

    #[test]
    fn tsv_round_trip() {
        let v = build_vocab(&[vec!["x", "y", "y"]], 1).unwrap();
        let back = Vocab::read_tsv(v.to_tsv().as_bytes()).unwrap();
        assert_eq!(v, back);
        assert!(v.to_tsv().starts_with("<pad>\t0\n<unk>\t1\n<bos>\t2\n<eos>\t3\n"));
    }

    const BASE: [&str; 6] = ["dog", "cat", "red", "blue", "find", "please"];

    #[test]
    fn surface_map_identity_and_determinism() {
        let m = SurfaceMap::new(&BASE, 3, 7);
        assert_eq!(m.map("dog", &LanguageTag::new(0)).unwrap(), "dog");
        let l1 = LanguageTag::new(1);
        assert_eq!(m.map("dog", &l1).unwrap(), m.map("dog", &l1).unwrap());
        assert!(m.map("dog", &l1).unwrap().ends_with("_lang01"));
        assert!(matches!(
            m.map("zebra", &l1),
            Err(Error::UnknownBaseWord(_))
        ));
    }

    #[test]
    fn surface_forms_are_injective_and_disjoint_across_languages() {
        let m = SurfaceMap::new(&BASE, 4, 11);
        let mut seen: HashSet<String> = HashSet::new();
        for k in 1..4 {
            let lang = LanguageTag::new(k);
            let forms: HashSet<String> = BASE.iter().map(|w| m.map(w, &lang).unwrap()).collect();
            assert_eq!(forms.len(), BASE.len(), "injective in language {k}");
            assert!(seen.is_disjoint(&forms), "language {k} overlaps another");
            seen.extend(forms);
        }
    }

    proptest! {
        #[test]
        fn in_vocab_round_trip(idx in proptest::collection::vec(0usize..6, 0..20)) {
            let corpus = vec![BASE.to_vec()];
            let v = build_vocab(&corpus, 1).unwrap();
            let words: Vec<&str> = idx.iter().map(|&i| BASE[i]).collect();
            let seq = tokenize(&words, &v, 24).unwrap();
            prop_assert_eq!(detokenize(&seq, &v), words);
        }
    }
}
