//! Byte-pair-encoding tokenizer with a fixed special-token protocol.
//!
//! Ids 0, 1, 2 are reserved for `[PAD]`, `[END]`, `[UNK]`. Training
//! lowercases, splits on whitespace, and appends a `</w>` end-of-word symbol
//! to each word before counting merge pairs. Merge selection is
//! deterministic: highest pair count wins, ties broken by lexicographically
//! smallest pair. After the merge table is fixed, pieces whose corpus
//! frequency (as finally encoded) falls below `min_freq` are dropped from
//! the vocabulary and fall back to `[UNK]` at encode time.
//!
//! Encoding pads every sequence to a fixed length `l`: the token ids are
//! followed by `[END]` and then `[PAD]`s; a sequence that doesn't fit is
//! truncated to `l` with no `[END]`. The per-position loss mask is false
//! exactly where the id is `[UNK]`.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const END_ID: usize = 1;
pub const UNK_ID: usize = 2;

pub const PAD_TOKEN: &str = "[PAD]";
pub const END_TOKEN: &str = "[END]";
pub const UNK_TOKEN: &str = "[UNK]";

const WORD_END: &str = "</w>";

/// Fixed-length encoded sequence plus its loss mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<usize>,
    /// False exactly at `[UNK]` positions.
    pub loss_mask: Vec<bool>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct VocabFile {
    merges: Vec<(String, String)>,
    tokens: Vec<String>,
    specials: BTreeMap<String, usize>,
}

/// Trained BPE vocabulary.
#[derive(Debug, Clone)]
pub struct Vocab {
    merges: Vec<(String, String)>,
    tokens: Vec<String>,
    token_to_id: HashMap<String, usize>,
    merge_rank: HashMap<(String, String), usize>,
}

impl Vocab {
    /// Train a vocabulary. `vocab_size` is the total token budget including
    /// the three specials and the base symbols; `min_freq` drops pieces
    /// rarer than that in the finally-encoded corpus.
    pub fn train(corpus: &[String], vocab_size: usize, min_freq: usize) -> Result<Self> {
        if corpus.iter().all(|s| s.trim().is_empty()) {
            return Err(Error::Data("cannot train a vocabulary on an empty corpus".into()));
        }
        if vocab_size < 4 {
            return Err(Error::Config(format!(
                "vocab_size {vocab_size} leaves no room beyond the specials"
            )));
        }

        // Word frequencies (BTreeMap: deterministic iteration).
        let mut word_freq: BTreeMap<String, usize> = BTreeMap::new();
        for line in corpus {
            for word in normalize(line).split_whitespace() {
                *word_freq.entry(word.to_string()).or_insert(0) += 1;
            }
        }

        // Each distinct word as a symbol sequence: chars + end-of-word.
        let mut words: Vec<(Vec<String>, usize)> = word_freq
            .iter()
            .map(|(w, &f)| {
                let mut syms: Vec<String> = w.chars().map(|c| c.to_string()).collect();
                syms.push(WORD_END.to_string());
                (syms, f)
            })
            .collect();

        // Base alphabet, sorted for stable ids.
        let mut base: Vec<String> = {
            let mut set: Vec<String> = words
                .iter()
                .flat_map(|(syms, _)| syms.iter().cloned())
                .collect();
            set.sort();
            set.dedup();
            set
        };

        let budget = vocab_size.saturating_sub(3 + base.len());
        let mut merges: Vec<(String, String)> = Vec::new();
        for _ in 0..budget {
            // Count adjacent pairs, weighted by word frequency.
            let mut pair_counts: HashMap<(String, String), usize> = HashMap::new();
            for (syms, freq) in &words {
                for pair in syms.windows(2) {
                    *pair_counts
                        .entry((pair[0].clone(), pair[1].clone()))
                        .or_insert(0) += freq;
                }
            }
            // Highest count wins; ties break toward the lexicographically
            // smallest pair, so training is independent of map order.
            let best = pair_counts.into_iter().fold(
                None::<((String, String), usize)>,
                |acc, (pair, count)| match &acc {
                    None => Some((pair, count)),
                    Some((bp, bc)) => {
                        if count > *bc || (count == *bc && pair < *bp) {
                            Some((pair, count))
                        } else {
                            acc
                        }
                    }
                },
            );
            let Some((pair, count)) = best else { break };
            if count < 2 {
                break; // nothing left worth merging
            }
            for (syms, _) in &mut words {
                merge_in_place(syms, &pair);
            }
            merges.push(pair);
        }

        // Piece frequencies under the final merge table, for min_freq.
        let mut piece_freq: BTreeMap<String, usize> = BTreeMap::new();
        for (syms, freq) in &words {
            for s in syms {
                *piece_freq.entry(s.clone()).or_insert(0) += freq;
            }
        }

        let keep = |tok: &String| piece_freq.get(tok).copied().unwrap_or(0) >= min_freq.max(1);
        base.retain(&keep);
        let merged_tokens: Vec<String> = merges
            .iter()
            .map(|(a, b)| format!("{a}{b}"))
            .filter(|tok| keep(tok) && !base.contains(tok))
            .collect();

        let mut tokens = vec![
            PAD_TOKEN.to_string(),
            END_TOKEN.to_string(),
            UNK_TOKEN.to_string(),
        ];
        tokens.extend(base);
        tokens.extend(merged_tokens);

        Self::from_parts(merges, tokens)
    }

    fn from_parts(merges: Vec<(String, String)>, tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 3
            || tokens[PAD_ID] != PAD_TOKEN
            || tokens[END_ID] != END_TOKEN
            || tokens[UNK_ID] != UNK_TOKEN
        {
            return Err(Error::Data(
                "vocabulary must start with [PAD], [END], [UNK]".into(),
            ));
        }
        let mut token_to_id = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if token_to_id.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate token '{t}' in vocabulary")));
            }
        }
        let merge_rank = merges
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i))
            .collect();
        Ok(Vocab {
            merges,
            tokens,
            token_to_id,
            merge_rank,
        })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    /// Split one word (no whitespace) into BPE pieces.
    fn word_pieces(&self, word: &str) -> Vec<String> {
        let mut syms: Vec<String> = word.chars().map(|c| c.to_string()).collect();
        syms.push(WORD_END.to_string());
        loop {
            // Lowest-rank adjacent pair merges first.
            let mut best: Option<(usize, usize)> = None; // (rank, position)
            for i in 0..syms.len() - 1 {
                let key = (syms[i].clone(), syms[i + 1].clone());
                if let Some(&rank) = self.merge_rank.get(&key) {
                    if best.map_or(true, |(r, _)| rank < r) {
                        best = Some((rank, i));
                    }
                }
            }
            match best {
                Some((_, i)) => {
                    let joined = format!("{}{}", syms[i], syms[i + 1]);
                    syms.splice(i..=i + 1, [joined]);
                }
                None => break,
            }
            if syms.len() < 2 {
                break;
            }
        }
        syms
    }

    /// Token ids for `text` without padding or `[END]`; unknown pieces map
    /// to `[UNK]`.
    pub fn encode_raw(&self, text: &str) -> Vec<usize> {
        let mut ids = Vec::new();
        for word in normalize(text).split_whitespace() {
            for piece in self.word_pieces(word) {
                ids.push(self.id(&piece).unwrap_or(UNK_ID));
            }
        }
        ids
    }

    /// Encode to exactly `l` positions: ids, then `[END]`, then `[PAD]`s.
    /// Sequences longer than `l - 1` are truncated to `l` with no `[END]`.
    pub fn encode(&self, text: &str, l: usize) -> Result<TokenSeq> {
        if l < 2 {
            return Err(Error::Config(format!("sequence length {l} is too short")));
        }
        let mut ids = self.encode_raw(text);
        if ids.len() >= l {
            ids.truncate(l);
        } else {
            ids.push(END_ID);
            ids.resize(l, PAD_ID);
        }
        let loss_mask = ids.iter().map(|&id| id != UNK_ID).collect();
        Ok(TokenSeq { ids, loss_mask })
    }

    /// Text for a sequence of ids: stops at the first `[END]`, skips
    /// `[PAD]`, renders `[UNK]` literally, and turns end-of-word markers
    /// into spaces.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut glued = String::new();
        for &id in ids {
            if id == END_ID {
                break;
            }
            if id == PAD_ID {
                continue;
            }
            match self.tokens.get(id) {
                Some(tok) if id == UNK_ID => {
                    glued.push_str(tok);
                    glued.push_str(WORD_END);
                }
                Some(tok) => glued.push_str(tok),
                None => {
                    return Err(Error::Data(format!(
                        "id {} outside vocabulary of {} tokens",
                        id,
                        self.size()
                    )))
                }
            }
        }
        let words: Vec<&str> = glued.split(WORD_END).filter(|w| !w.is_empty()).collect();
        Ok(words.join(" "))
    }

    pub fn to_json(&self) -> String {
        let mut specials = BTreeMap::new();
        specials.insert("pad".to_string(), PAD_ID);
        specials.insert("end".to_string(), END_ID);
        specials.insert("unk".to_string(), UNK_ID);
        let file = VocabFile {
            merges: self.merges.clone(),
            tokens: self.tokens.clone(),
            specials,
        };
        serde_json::to_string_pretty(&file).expect("vocab serializes")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let file: VocabFile =
            serde_json::from_str(json).map_err(|e| Error::Data(format!("bad vocab JSON: {e}")))?;
        for (name, want) in [("pad", PAD_ID), ("end", END_ID), ("unk", UNK_ID)] {
            match file.specials.get(name) {
                Some(&id) if id == want => {}
                other => {
                    return Err(Error::Data(format!(
                        "special '{name}' must have id {want}, got {other:?}"
                    )))
                }
            }
        }
        Self::from_parts(file.merges, file.tokens)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let json = std::fs::read_to_string(path)?;
        Self::from_json(&json)
    }
}

fn normalize(text: &str) -> String {
    text.to_lowercase()
}

fn merge_in_place(syms: &mut Vec<String>, pair: &(String, String)) {
    let mut i = 0;
    while i + 1 < syms.len() {
        if syms[i] == pair.0 && syms[i + 1] == pair.1 {
            let joined = format!("{}{}", syms[i], syms[i + 1]);
            syms.splice(i..=i + 1, [joined]);
        } else {
            i += 1;
        }
    }
}
