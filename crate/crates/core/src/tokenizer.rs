//! Byte-level BPE tokenizer with reserved special tokens.
//!
//! Ids are laid out as: special tokens `0..5`, the 256 single bytes
//! `5..261`, then one id per learned merge. Text is first cut into
//! whitespace-aware chunks (a single leading space sticks to the word that
//! follows it) and merges never cross chunk boundaries.
//!
//! On disk a tokenizer is two files, `vocab.txt` (`token<TAB>id`) and
//! `merges.txt` (`left right` in rank order). Byte strings are written with
//! the usual printable byte-to-unicode mapping, so a leading space shows up
//! as `Ġ`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};

pub const CLS_ID: u32 = 0;
pub const PAD_ID: u32 = 1;
pub const SEP_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
pub const MASK_ID: u32 = 4;
pub const NUM_SPECIAL: u32 = 5;
pub const BYTE_OFFSET: u32 = NUM_SPECIAL;
/// Smallest legal vocabulary: specials plus every byte.
pub const MIN_VOCAB_SIZE: usize = 256 + NUM_SPECIAL as usize;

pub const ROBERTA_VOCAB_SIZE: usize = 50_000;
pub const SCIBERT_VOCAB_SIZE: usize = 30_000;
pub const TOY_VOCAB_SIZE: usize = 4096;

const VOCAB_HEADER: &str = "#dapt-vocab v1";
const MERGES_HEADER: &str = "#dapt-merges v1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpecialTokens {
    pub cls: String,
    pub pad: String,
    pub sep: String,
    pub unk: String,
    pub mask: String,
}

impl Default for SpecialTokens {
    fn default() -> Self {
        SpecialTokens {
            cls: "<s>".into(),
            pad: "<pad>".into(),
            sep: "</s>".into(),
            unk: "<unk>".into(),
            mask: "<mask>".into(),
        }
    }
}

impl SpecialTokens {
    /// Token strings indexed by their reserved id.
    pub fn by_id(&self) -> [&str; NUM_SPECIAL as usize] {
        [&self.cls, &self.pad, &self.sep, &self.unk, &self.mask]
    }
}

pub fn is_special(id: u32) -> bool {
    id < NUM_SPECIAL
}

/// Named vocabulary-size presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Case-preserving, 50K tokens.
    Roberta,
    /// Lower-cases its input, 30K tokens.
    SciBert,
    /// Desk-scale default.
    Toy,
}

impl Preset {
    pub fn vocab_size(self) -> usize {
        match self {
            Preset::Roberta => ROBERTA_VOCAB_SIZE,
            Preset::SciBert => SCIBERT_VOCAB_SIZE,
            Preset::Toy => TOY_VOCAB_SIZE,
        }
    }

    pub fn lowercase(self) -> bool {
        matches!(self, Preset::SciBert)
    }
}

/// Bijective map between token byte strings and ids. Special tokens have no
/// byte string; they are addressed by id only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    id_to_bytes: Vec<Vec<u8>>,
    bytes_to_id: HashMap<Vec<u8>, u32>,
    specials: SpecialTokens,
}

impl Vocabulary {
    fn base() -> Self {
        let mut v = Vocabulary {
            id_to_bytes: vec![Vec::new(); NUM_SPECIAL as usize],
            bytes_to_id: HashMap::new(),
            specials: SpecialTokens::default(),
        };
        for b in 0..=255u8 {
            v.push(vec![b]);
        }
        v
    }

    fn push(&mut self, bytes: Vec<u8>) -> u32 {
        let id = self.id_to_bytes.len() as u32;
        self.bytes_to_id.insert(bytes.clone(), id);
        self.id_to_bytes.push(bytes);
        id
    }

    pub fn len(&self) -> usize {
        self.id_to_bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_bytes.is_empty()
    }

    pub fn specials(&self) -> &SpecialTokens {
        &self.specials
    }

    pub fn id_of(&self, bytes: &[u8]) -> Option<u32> {
        self.bytes_to_id.get(bytes).copied()
    }

    /// Byte string of a non-special token.
    pub fn bytes_of(&self, id: u32) -> Option<&[u8]> {
        if is_special(id) {
            return None;
        }
        self.id_to_bytes.get(id as usize).map(Vec::as_slice)
    }

    /// Display form of a token: the literal special string, or the token's
    /// bytes through the printable byte mapping.
    pub fn token_string(&self, id: u32) -> Option<String> {
        if is_special(id) {
            return Some(self.specials.by_id()[id as usize].to_string());
        }
        self.bytes_of(id).map(bytes_to_printable)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Merge {
    pub left: u32,
    pub right: u32,
    pub result: u32,
}

/// Merge rules in rank order (index = rank).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MergeTable {
    rules: Vec<Merge>,
    ranks: HashMap<(u32, u32), usize>,
}

impl MergeTable {
    fn push(&mut self, merge: Merge) {
        self.ranks
            .insert((merge.left, merge.right), self.rules.len());
        self.rules.push(merge);
    }

    pub fn rules(&self) -> &[Merge] {
        &self.rules
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn rank(&self, left: u32, right: u32) -> Option<usize> {
        self.ranks.get(&(left, right)).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum CharClass {
    Letter,
    Number,
    Space,
    Other,
}

fn classify(c: char) -> CharClass {
    if c.is_whitespace() {
        CharClass::Space
    } else if c.is_alphabetic() {
        CharClass::Letter
    } else if c.is_numeric() {
        CharClass::Number
    } else {
        CharClass::Other
    }
}

/// Cuts text into chunks that concatenate back to the input. Each chunk is
/// a run of one character class; a single `' '` directly before a
/// non-space run is attached to the front of that run.
pub fn pretokenize(text: &str) -> Vec<&str> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut chunks = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let start = chars[i].0;
        let (_, c) = chars[i];
        let mut j = i;
        if c == ' ' && i + 1 < chars.len() && classify(chars[i + 1].1) != CharClass::Space {
            j += 1;
        }
        let class = classify(chars[j].1);
        j += 1;
        while j < chars.len() && classify(chars[j].1) == class {
            j += 1;
        }
        if class == CharClass::Space && j < chars.len() && j - i > 1 && chars[j - 1].1 == ' ' {
            // leave the final space for the word that follows
            j -= 1;
        }
        let end = chars.get(j).map_or(text.len(), |c| c.0);
        chunks.push(&text[start..end]);
        i = j;
    }
    chunks
}

/// Learns a vocabulary and merge table from `corpus`.
///
/// Each round merges the most frequent adjacent pair, breaking ties by the
/// byte strings of the pair. Training stops at `target_vocab_size` or when
/// no pair is left.
pub fn train_bpe<S: AsRef<str>>(
    corpus: &[S],
    target_vocab_size: usize,
) -> Result<(Vocabulary, MergeTable)> {
    if target_vocab_size < MIN_VOCAB_SIZE {
        return Err(invalid(format!(
            "target vocabulary size {target_vocab_size} is below the minimum {MIN_VOCAB_SIZE}"
        )));
    }
    let mut word_counts: BTreeMap<&[u8], u64> = BTreeMap::new();
    let mut total_bytes = 0usize;
    for text in corpus {
        for chunk in pretokenize(text.as_ref()) {
            total_bytes += chunk.len();
            *word_counts.entry(chunk.as_bytes()).or_default() += 1;
        }
    }
    if total_bytes == 0 {
        return Err(invalid("training corpus contains no bytes"));
    }

    let mut vocab = Vocabulary::base();
    let mut merges = MergeTable::default();
    let mut words: Vec<(Vec<u32>, u64)> = word_counts
        .into_iter()
        .map(|(w, n)| (w.iter().map(|&b| BYTE_OFFSET + b as u32).collect(), n))
        .collect();

    while vocab.len() < target_vocab_size {
        let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
        for (symbols, n) in &words {
            for w in symbols.windows(2) {
                *pair_counts.entry((w[0], w[1])).or_default() += n;
            }
        }
        let best = pair_counts.into_iter().max_by(|a, b| {
            a.1.cmp(&b.1).then_with(|| {
                // lexicographically smallest pair wins a tie
                let ka = (vocab.bytes_of(a.0 .0), vocab.bytes_of(a.0 .1));
                let kb = (vocab.bytes_of(b.0 .0), vocab.bytes_of(b.0 .1));
                kb.cmp(&ka)
            })
        });
        let Some(((left, right), _)) = best else {
            break;
        };
        let mut merged = vocab.bytes_of(left).unwrap_or_default().to_vec();
        merged.extend_from_slice(vocab.bytes_of(right).unwrap_or_default());
        let result = match vocab.id_of(&merged) {
            Some(id) => id,
            None => vocab.push(merged),
        };
        merges.push(Merge {
            left,
            right,
            result,
        });
        for (symbols, _) in &mut words {
            apply_merge(symbols, left, right, result);
        }
    }
    Ok((vocab, merges))
}

fn apply_merge(symbols: &mut Vec<u32>, left: u32, right: u32, result: u32) {
    if symbols.len() < 2 {
        return;
    }
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(result);
            i += 2;
        } else {
            out.push(symbols[i]);
            i += 1;
        }
    }
    *symbols = out;
}

/// A trained tokenizer. Immutable once built and safe to share across threads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    vocab: Vocabulary,
    merges: MergeTable,
    lowercase: bool,
}

impl Tokenizer {
    pub fn new(vocab: Vocabulary, merges: MergeTable) -> Self {
        Tokenizer {
            vocab,
            merges,
            lowercase: false,
        }
    }

    pub fn train<S: AsRef<str>>(corpus: &[S], target_vocab_size: usize) -> Result<Self> {
        let (vocab, merges) = train_bpe(corpus, target_vocab_size)?;
        Ok(Self::new(vocab, merges))
    }

    /// Trains with a preset's vocabulary size and casing.
    pub fn train_preset<S: AsRef<str>>(corpus: &[S], preset: Preset) -> Result<Self> {
        Self::train_with_casing(corpus, preset.vocab_size(), preset.lowercase())
    }

    /// Trains with an explicit size; a lower-casing tokenizer sees the
    /// corpus lower-cased and lower-cases everything it later encodes.
    pub fn train_with_casing<S: AsRef<str>>(
        corpus: &[S],
        target_vocab_size: usize,
        lowercase: bool,
    ) -> Result<Self> {
        let mut tok = if lowercase {
            let lowered: Vec<String> = corpus.iter().map(|s| s.as_ref().to_lowercase()).collect();
            Self::train(&lowered, target_vocab_size)?
        } else {
            Self::train(corpus, target_vocab_size)?
        };
        tok.lowercase = lowercase;
        Ok(tok)
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn merges(&self) -> &MergeTable {
        &self.merges
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn lowercase(&self) -> bool {
        self.lowercase
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        if self.lowercase {
            return self.encode_cased(&text.to_lowercase());
        }
        self.encode_cased(text)
    }

    fn encode_cased(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::with_capacity(text.len());
        for chunk in pretokenize(text) {
            let mut symbols: Vec<u32> = chunk.bytes().map(|b| BYTE_OFFSET + b as u32).collect();
            loop {
                let best = symbols
                    .windows(2)
                    .filter_map(|w| self.merges.rank(w[0], w[1]))
                    .min();
                let Some(rank) = best else { break };
                let m = self.merges.rules[rank];
                apply_merge(&mut symbols, m.left, m.right, m.result);
            }
            ids.extend(symbols);
        }
        ids
    }

    /// Encodes raw bytes, rejecting anything that is not UTF-8.
    pub fn encode_bytes(&self, bytes: &[u8]) -> Result<Vec<u32>> {
        let text = std::str::from_utf8(bytes).map_err(|e| Error::InvalidUtf8(e.valid_up_to()))?;
        Ok(self.encode(text))
    }

    /// Inverse of [`Tokenizer::encode`]. Special ids are rendered as their
    /// token strings when `allow_special` is set and rejected otherwise.
    pub fn decode(&self, ids: &[u32], allow_special: bool) -> Result<String> {
        let mut bytes = Vec::with_capacity(ids.len() * 2);
        for &id in ids {
            if id as usize >= self.vocab.len() {
                return Err(Error::UnknownTokenId(id));
            }
            if is_special(id) {
                if !allow_special {
                    return Err(invalid(format!(
                        "special token id {id} ({}) in sequence",
                        self.vocab.specials.by_id()[id as usize]
                    )));
                }
                bytes.extend_from_slice(self.vocab.specials.by_id()[id as usize].as_bytes());
            } else {
                bytes.extend_from_slice(self.vocab.bytes_of(id).unwrap_or_default());
            }
        }
        String::from_utf8(bytes).map_err(|e| Error::InvalidUtf8(e.utf8_error().valid_up_to()))
    }

    /// Human-readable token: special string, or the decoded bytes with
    /// invalid UTF-8 replaced.
    pub fn display_token(&self, id: u32) -> String {
        if is_special(id) {
            return self.vocab.specials.by_id()[id as usize].to_string();
        }
        self.vocab
            .bytes_of(id)
            .map(|b| String::from_utf8_lossy(b).into_owned())
            .unwrap_or_default()
    }

    pub fn vocab_file_contents(&self) -> String {
        let mut out = format!("{VOCAB_HEADER} lowercase={}\n", self.lowercase);
        for id in 0..self.vocab.len() as u32 {
            let token = self.vocab.token_string(id).unwrap_or_default();
            out.push_str(&format!("{token}\t{id}\n"));
        }
        out
    }

    pub fn merges_file_contents(&self) -> String {
        let mut out = format!("{MERGES_HEADER}\n");
        for m in &self.merges.rules {
            let left = self.vocab.token_string(m.left).unwrap_or_default();
            let right = self.vocab.token_string(m.right).unwrap_or_default();
            out.push_str(&format!("{left} {right}\n"));
        }
        out
    }

    /// SHA-256 over both serialized files, hex encoded. Checkpoints record
    /// this to catch tokenizer/model mismatches.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.vocab_file_contents().as_bytes());
        h.update(self.merges_file_contents().as_bytes());
        to_hex(&h.finalize())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let vocab_path = dir.join("vocab.txt");
        fs::write(&vocab_path, self.vocab_file_contents())
            .map_err(|e| Error::io(&vocab_path, e))?;
        let merges_path = dir.join("merges.txt");
        fs::write(&merges_path, self.merges_file_contents())
            .map_err(|e| Error::io(&merges_path, e))?;
        Ok(())
    }

    /// Loads a tokenizer saved by [`Tokenizer::save`]. The merge file is
    /// authoritative; the vocabulary file must agree with it.
    pub fn load(dir: &Path) -> Result<Self> {
        let vocab_path = dir.join("vocab.txt");
        let vocab_text = fs::read_to_string(&vocab_path).map_err(|e| Error::io(&vocab_path, e))?;
        let merges_path = dir.join("merges.txt");
        let merges_text =
            fs::read_to_string(&merges_path).map_err(|e| Error::io(&merges_path, e))?;
        Self::from_files(&vocab_text, &merges_text)
    }

    pub fn from_files(vocab_text: &str, merges_text: &str) -> Result<Self> {
        let fmt = |line: usize, msg: String| Error::MalformedRecord { line, message: msg };
        let mut merge_lines = merges_text.lines();
        if merge_lines.next() != Some(MERGES_HEADER) {
            return Err(fmt(
                1,
                format!("merges file must start with {MERGES_HEADER:?}"),
            ));
        }
        let mut vocab = Vocabulary::base();
        let mut merges = MergeTable::default();
        for (i, line) in merge_lines.enumerate() {
            let line_no = i + 2;
            let (l, r) = line
                .split_once(' ')
                .ok_or_else(|| fmt(line_no, format!("expected `left right`, got {line:?}")))?;
            let lb =
                printable_to_bytes(l).ok_or_else(|| fmt(line_no, format!("bad token {l:?}")))?;
            let rb =
                printable_to_bytes(r).ok_or_else(|| fmt(line_no, format!("bad token {r:?}")))?;
            let left = vocab
                .id_of(&lb)
                .ok_or_else(|| fmt(line_no, format!("merge uses unknown token {l:?}")))?;
            let right = vocab
                .id_of(&rb)
                .ok_or_else(|| fmt(line_no, format!("merge uses unknown token {r:?}")))?;
            if merges.rank(left, right).is_some() {
                return Err(fmt(line_no, format!("duplicate merge {l:?} {r:?}")));
            }
            let mut merged = lb;
            merged.extend_from_slice(&rb);
            let result = match vocab.id_of(&merged) {
                Some(id) => id,
                None => vocab.push(merged),
            };
            merges.push(Merge {
                left,
                right,
                result,
            });
        }

        let mut vocab_lines = vocab_text.lines();
        let header = vocab_lines.next().unwrap_or_default();
        let lowercase = match header.strip_prefix(VOCAB_HEADER).map(str::trim) {
            Some("lowercase=true") => true,
            Some("lowercase=false") | Some("") => false,
            _ => {
                return Err(fmt(
                    1,
                    format!("vocab file must start with {VOCAB_HEADER:?}"),
                ))
            }
        };
        let mut count = 0usize;
        for (i, line) in vocab_lines.enumerate() {
            let line_no = i + 2;
            let (token, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| fmt(line_no, format!("expected `token<TAB>id`, got {line:?}")))?;
            let id: u32 = id
                .parse()
                .map_err(|_| fmt(line_no, format!("bad id {id:?}")))?;
            if vocab.token_string(id).as_deref() != Some(token) {
                return Err(fmt(
                    line_no,
                    format!("vocabulary entry {token:?} = {id} disagrees with merges"),
                ));
            }
            count += 1;
        }
        if count != vocab.len() {
            return Err(Error::Format(format!(
                "vocabulary lists {count} tokens, merges imply {}",
                vocab.len()
            )));
        }
        Ok(Tokenizer {
            vocab,
            merges,
            lowercase,
        })
    }
}

pub(crate) fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn byte_to_char_table() -> &'static [char; 256] {
    static TABLE: OnceLock<[char; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut table = ['\0'; 256];
        let mut extra = 0u32;
        for b in 0..=255u32 {
            let printable =
                (33..=126).contains(&b) || (161..=172).contains(&b) || (174..=255).contains(&b);
            let c = if printable {
                b
            } else {
                extra += 1;
                255 + extra
            };
            table[b as usize] = char::from_u32(c).expect("valid scalar");
        }
        table
    })
}

fn char_to_byte_table() -> &'static HashMap<char, u8> {
    static TABLE: OnceLock<HashMap<char, u8>> = OnceLock::new();
    TABLE.get_or_init(|| {
        byte_to_char_table()
            .iter()
            .enumerate()
            .map(|(b, &c)| (c, b as u8))
            .collect()
    })
}

fn bytes_to_printable(bytes: &[u8]) -> String {
    let table = byte_to_char_table();
    bytes.iter().map(|&b| table[b as usize]).collect()
}

fn printable_to_bytes(s: &str) -> Option<Vec<u8>> {
    let inverse = char_to_byte_table();
    s.chars().map(|c| inverse.get(&c).copied()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn byte_id(c: char) -> u32 {
        BYTE_OFFSET + c as u32
    }

    #[test]
    fn pretokenize_attaches_single_space() {
        assert_eq!(pretokenize("heavy water"), vec!["heavy", " water"]);
        assert_eq!(pretokenize("a  b"), vec!["a", " ", " b"]);
        assert_eq!(
            pretokenize("U-235, fuel\n"),
            vec!["U", "-", "235", ",", " fuel", "\n"]
        );
        assert!(pretokenize("").is_empty());
    }

    #[test]
    fn first_merge_on_repeated_letters() {
        // chunks "aaaa" and " aaaa": (a,a) occurs 6 times, (Ġ,a) once
        let (vocab, merges) = train_bpe(&["aaaa aaaa"], MIN_VOCAB_SIZE + 1).unwrap();
        assert_eq!(merges.len(), 1);
        let m = merges.rules()[0];
        assert_eq!((m.left, m.right), (byte_id('a'), byte_id('a')));
        assert_eq!(vocab.len(), MIN_VOCAB_SIZE + 1);
    }

    #[test]
    fn minimum_vocab_learns_nothing() {
        let (vocab, merges) = train_bpe(&["aaaa aaaa"], MIN_VOCAB_SIZE).unwrap();
        assert!(merges.is_empty());
        assert_eq!(vocab.len(), MIN_VOCAB_SIZE);
        assert!(train_bpe(&["aaaa"], MIN_VOCAB_SIZE - 1).is_err());
        assert!(train_bpe(&[""], 300).is_err());
    }

    #[test]
    fn tie_breaks_lexicographically() {
        // "ab" and "cd" each occur once: (a,b) sorts first
        let (_, merges) = train_bpe(&["cd", "ab"], MIN_VOCAB_SIZE + 1).unwrap();
        let m = merges.rules()[0];
        assert_eq!((m.left, m.right), (byte_id('a'), byte_id('b')));
    }

    #[test]
    fn merged_pair_encodes_to_single_id() {
        let tok = Tokenizer::train(&["aaaa aaaa"], MIN_VOCAB_SIZE + 1).unwrap();
        let merged = tok.merges().rules()[0].result;
        assert_eq!(tok.encode("aa"), vec![merged]);
        assert_eq!(tok.encode(""), Vec::<u32>::new());
    }

    #[test]
    fn decode_contract() {
        let tok = Tokenizer::train(&["heavy water heavy metal"], 300).unwrap();
        assert_eq!(tok.decode(&[], false).unwrap(), "");
        let ids = tok.encode("heavy water");
        assert_eq!(tok.decode(&ids, false).unwrap(), "heavy water");
        assert!(tok.decode(&[MASK_ID], false).is_err());
        assert_eq!(tok.decode(&[MASK_ID], true).unwrap(), "<mask>");
        assert!(matches!(
            tok.decode(&[100_000], false),
            Err(Error::UnknownTokenId(100_000))
        ));
    }

    #[test]
    fn rejects_invalid_utf8() {
        let tok = Tokenizer::train(&["abc"], 270).unwrap();
        assert!(matches!(
            tok.encode_bytes(&[0x61, 0xff]),
            Err(Error::InvalidUtf8(1))
        ));
    }

    #[test]
    fn file_roundtrip_preserves_fingerprint() {
        let tok =
            Tokenizer::train(&["the reactor core", "a fuel rod\tassembly", "é ü 中"], 330).unwrap();
        let dir = tempfile::tempdir().unwrap();
        tok.save(dir.path()).unwrap();
        let loaded = Tokenizer::load(dir.path()).unwrap();
        assert_eq!(loaded, tok);
        assert_eq!(loaded.fingerprint(), tok.fingerprint());
        let vocab = fs::read_to_string(dir.path().join("vocab.txt")).unwrap();
        assert!(vocab.starts_with(VOCAB_HEADER));
        assert!(vocab.contains("Ġ"));
    }

    #[test]
    fn tampered_vocab_is_rejected() {
        let tok = Tokenizer::train(&["abc abc"], 265).unwrap();
        let vocab = tok.vocab_file_contents().replace("<mask>\t4", "<MASK>\t4");
        assert!(Tokenizer::from_files(&vocab, &tok.merges_file_contents()).is_err());
    }

    #[test]
    fn scibert_preset_lowercases() {
        let tok = Tokenizer::train_preset(&["Heavy Water"], Preset::SciBert).unwrap();
        assert!(tok.lowercase());
        assert_eq!(tok.encode("HEAVY"), tok.encode("heavy"));
        assert_eq!(Preset::Roberta.vocab_size(), 50_000);
        assert_eq!(Preset::SciBert.vocab_size(), 30_000);
    }

    #[test]
    fn specials_never_merged() {
        let tok = Tokenizer::train(&["<s> <mask> </s> <pad>"], 400).unwrap();
        let ids = tok.encode("<mask>");
        assert!(ids.iter().all(|&i| !is_special(i)));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn roundtrip_and_compression(s in "\\PC*") {
                let tok = Tokenizer::train(&["the quick brown fox", "jumps over the lazy dog"], 320).unwrap();
                let ids = tok.encode(&s);
                prop_assert!(ids.len() <= s.len());
                prop_assert_eq!(tok.decode(&ids, false).unwrap(), s);
            }

            #[test]
            fn pretokenize_concatenates(s in any::<String>()) {
                prop_assert_eq!(pretokenize(&s).concat(), s);
            }
        }
    }
}
