//! Multi-level lookup over the qualified data pool.
//!
//! Four maps, one per kind of duration key. Every indexed pool word appears
//! once in each map. Words and phones are interned so keys are small integer
//! sequences; the hash maps compare full keys, so a hash collision can never
//! produce a false candidate.

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

use crate::corpus::{validate_utterance, StopList, UtteranceRecord, Violation, WordAlign, WordOccurrence};
use crate::matcher::phone_distance_unchecked;

#[derive(Debug, Error, PartialEq)]
pub enum IndexError {
    #[error("pool record {utt_id}: {violation}")]
    InvalidRecord { utt_id: String, violation: Violation },
    #[error("pool contains utt_id {0} more than once")]
    DuplicateUttId(String),
    #[error("phone margin must be finite and >= 0, got {0}")]
    InvalidMargin(f64),
}

/// How a phone-margin distance is thresholded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MarginMode {
    /// Mean absolute per-phone frame difference must not exceed the margin.
    #[default]
    Average,
    /// Every single phone must differ by at most the margin.
    PerPhoneCap,
}

/// Which duration agreement a pool word needs to qualify as a candidate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ConstraintLevel {
    /// Same word, same total frame count.
    WordExact,
    /// Same word and pronunciation, per-phone durations within `margin`.
    PhoneMargin { margin: f64, mode: MarginMode },
    /// Same word and pronunciation, identical per-phone durations.
    PhoneExact,
    /// Same as `PhoneExact` plus identical HMM-state durations.
    StateExact,
}

impl ConstraintLevel {
    pub fn phone_margin(margin: f64) -> Result<Self, IndexError> {
        Self::phone_margin_with(margin, MarginMode::Average)
    }

    pub fn phone_margin_with(margin: f64, mode: MarginMode) -> Result<Self, IndexError> {
        if !margin.is_finite() || margin < 0.0 {
            return Err(IndexError::InvalidMargin(margin));
        }
        Ok(ConstraintLevel::PhoneMargin { margin, mode })
    }

    /// Margin in frames; zero for the exact kinds.
    pub fn margin(&self) -> f64 {
        match self {
            ConstraintLevel::PhoneMargin { margin, .. } => *margin,
            _ => 0.0,
        }
    }

    /// Short name used in reports and match files.
    pub fn kind_name(&self) -> &'static str {
        match self {
            ConstraintLevel::WordExact => "word",
            ConstraintLevel::PhoneMargin { .. } => "phone-margin",
            ConstraintLevel::PhoneExact => "phone",
            ConstraintLevel::StateExact => "state",
        }
    }
}

impl fmt::Display for ConstraintLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConstraintLevel::PhoneMargin { margin, mode } => {
                write!(f, "phone-margin-{margin}")?;
                if *mode == MarginMode::PerPhoneCap {
                    write!(f, "-cap")?;
                }
                Ok(())
            }
            other => f.write_str(other.kind_name()),
        }
    }
}

type Sym = u32;

#[derive(Default)]
struct Interner {
    ids: HashMap<String, Sym>,
}

impl Interner {
    fn intern(&mut self, s: &str) -> Sym {
        if let Some(&id) = self.ids.get(s) {
            return id;
        }
        let id = self.ids.len() as Sym;
        self.ids.insert(s.to_owned(), id);
        id
    }

    fn get(&self, s: &str) -> Option<Sym> {
        self.ids.get(s).copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Entry {
    record: u32,
    word: u32,
}

#[derive(Hash, PartialEq, Eq)]
struct SeqKey {
    word: Sym,
    phones: Box<[Sym]>,
    durations: Box<[u32]>,
}

#[derive(Hash, PartialEq, Eq)]
struct PronKey {
    word: Sym,
    phones: Box<[Sym]>,
}

/// A resolved candidate: the pool record and the word inside it.
#[derive(Clone, Copy, Debug)]
pub struct Candidate<'a> {
    pub record: &'a UtteranceRecord,
    pub word_index: usize,
    pub word: &'a WordAlign,
}

impl Candidate<'_> {
    pub fn occurrence(&self) -> WordOccurrence {
        WordOccurrence::new(self.record.utt_id.clone(), self.word_index)
    }
}

/// Immutable index over the qualified pool. Safe to share across threads.
pub struct PoolIndex {
    records: Vec<UtteranceRecord>,
    by_id: HashMap<String, usize>,
    stop_list: StopList,
    states_per_phone: usize,
    words: Interner,
    phones: Interner,
    by_word_duration: HashMap<(Sym, u32), Vec<Entry>>,
    by_phone_seq: HashMap<SeqKey, Vec<Entry>>,
    by_phone_identity: HashMap<PronKey, Vec<Entry>>,
    by_state_seq: HashMap<SeqKey, Vec<Entry>>,
    occurrences: usize,
}

impl fmt::Debug for PoolIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PoolIndex")
            .field("records", &self.records.len())
            .field("occurrences", &self.occurrences)
            .finish()
    }
}

impl PoolIndex {
    /// Validates and indexes the pool. Stop-listed words are not indexed.
    pub fn build(
        mut pool: Vec<UtteranceRecord>,
        stop_list: StopList,
        states_per_phone: usize,
    ) -> Result<Self, IndexError> {
        for rec in &pool {
            if let Some(violation) = validate_utterance(rec, states_per_phone).into_iter().next() {
                return Err(IndexError::InvalidRecord {
                    utt_id: rec.utt_id.clone(),
                    violation,
                });
            }
        }
        // Record order defines candidate order: (utt_id, word_index).
        pool.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));
        let mut by_id = HashMap::with_capacity(pool.len());
        for (i, rec) in pool.iter().enumerate() {
            if by_id.insert(rec.utt_id.clone(), i).is_some() {
                return Err(IndexError::DuplicateUttId(rec.utt_id.clone()));
            }
        }

        let mut idx = PoolIndex {
            records: Vec::new(),
            by_id,
            stop_list,
            states_per_phone,
            words: Interner::default(),
            phones: Interner::default(),
            by_word_duration: HashMap::new(),
            by_phone_seq: HashMap::new(),
            by_phone_identity: HashMap::new(),
            by_state_seq: HashMap::new(),
            occurrences: 0,
        };
        for (ri, rec) in pool.iter().enumerate() {
            for (wi, w) in rec.words.iter().enumerate() {
                if idx.stop_list.contains(&w.word) {
                    continue;
                }
                let entry = Entry {
                    record: ri as u32,
                    word: wi as u32,
                };
                let word = idx.words.intern(&w.word);
                let phones: Box<[Sym]> = w.phones.iter().map(|p| idx.phones.intern(&p.phone)).collect();
                idx.by_word_duration
                    .entry((word, w.num_frames))
                    .or_default()
                    .push(entry);
                idx.by_phone_seq
                    .entry(SeqKey {
                        word,
                        phones: phones.clone(),
                        durations: w.phone_durations().collect(),
                    })
                    .or_default()
                    .push(entry);
                idx.by_state_seq
                    .entry(SeqKey {
                        word,
                        phones: phones.clone(),
                        durations: w.state_durations().collect(),
                    })
                    .or_default()
                    .push(entry);
                idx.by_phone_identity
                    .entry(PronKey { word, phones })
                    .or_default()
                    .push(entry);
                idx.occurrences += 1;
            }
        }
        idx.records = pool;
        Ok(idx)
    }

    /// Number of indexed (non stop-listed) pool word occurrences.
    pub fn len(&self) -> usize {
        self.occurrences
    }

    pub fn is_empty(&self) -> bool {
        self.occurrences == 0
    }

    /// Total entries held by each map, in the order
    /// word-duration, phone-sequence, phone-identity, state-sequence.
    pub fn map_entry_counts(&self) -> [usize; 4] {
        fn total<K>(m: &HashMap<K, Vec<Entry>>) -> usize {
            m.values().map(Vec::len).sum()
        }
        [
            total(&self.by_word_duration),
            total(&self.by_phone_seq),
            total(&self.by_phone_identity),
            total(&self.by_state_seq),
        ]
    }

    pub fn records(&self) -> &[UtteranceRecord] {
        &self.records
    }

    pub fn record(&self, utt_id: &str) -> Option<&UtteranceRecord> {
        self.by_id.get(utt_id).map(|&i| &self.records[i])
    }

    pub fn resolve(&self, occ: &WordOccurrence) -> Option<&WordAlign> {
        self.record(&occ.utt_id)?.words.get(occ.word_index)
    }

    pub fn stop_list(&self) -> &StopList {
        &self.stop_list
    }

    pub fn states_per_phone(&self) -> usize {
        self.states_per_phone
    }

    /// Candidates for `target` at `level`, in `(utt_id, word_index)` order.
    /// Pool words from the target's own utterance (`utt_id`) are skipped.
    pub fn candidates<'a>(
        &'a self,
        utt_id: &'a str,
        target: &WordAlign,
        level: ConstraintLevel,
    ) -> Vec<Candidate<'a>> {
        let Some(word) = self.words.get(&target.word) else {
            return Vec::new();
        };
        let phones = || -> Option<Box<[Sym]>> {
            target.phones.iter().map(|p| self.phones.get(&p.phone)).collect()
        };
        let bucket: &[Entry] = match level {
            ConstraintLevel::WordExact => self
                .by_word_duration
                .get(&(word, target.num_frames))
                .map_or(&[], Vec::as_slice),
            ConstraintLevel::PhoneExact | ConstraintLevel::StateExact => {
                let Some(phones) = phones() else {
                    return Vec::new();
                };
                let (map, durations): (_, Box<[u32]>) = if level == ConstraintLevel::PhoneExact {
                    (&self.by_phone_seq, target.phone_durations().collect())
                } else {
                    (&self.by_state_seq, target.state_durations().collect())
                };
                map.get(&SeqKey {
                    word,
                    phones,
                    durations,
                })
                .map_or(&[], Vec::as_slice)
            }
            ConstraintLevel::PhoneMargin { .. } => {
                let Some(phones) = phones() else {
                    return Vec::new();
                };
                self.by_phone_identity
                    .get(&PronKey { word, phones })
                    .map_or(&[], Vec::as_slice)
            }
        };

        bucket
            .iter()
            .map(|e| {
                let record = &self.records[e.record as usize];
                Candidate {
                    record,
                    word_index: e.word as usize,
                    word: &record.words[e.word as usize],
                }
            })
            .filter(|c| c.record.utt_id != utt_id)
            .filter(|c| match level {
                ConstraintLevel::PhoneMargin { margin, mode } => {
                    within_margin(target, c.word, margin, mode)
                }
                _ => true,
            })
            .collect()
    }

    /// Candidate addresses for `target` at `level`.
    pub fn query_candidates(
        &self,
        utt_id: &str,
        target: &WordAlign,
        level: ConstraintLevel,
    ) -> Vec<WordOccurrence> {
        self.candidates(utt_id, target, level)
            .iter()
            .map(Candidate::occurrence)
            .collect()
    }
}

fn within_margin(target: &WordAlign, cand: &WordAlign, margin: f64, mode: MarginMode) -> bool {
    match mode {
        MarginMode::Average => phone_distance_unchecked(target, cand) <= margin,
        MarginMode::PerPhoneCap => target
            .phone_durations()
            .zip(cand.phone_durations())
            .all(|(a, b)| f64::from(a.abs_diff(b)) <= margin),
    }
}

/// Linear-scan reference for [`PoolIndex::query_candidates`].
///
/// Applies each constraint definition directly to every pool word, then sorts.
pub fn brute_force_candidates(
    pool: &[UtteranceRecord],
    stop_list: &StopList,
    utt_id: &str,
    target: &WordAlign,
    level: ConstraintLevel,
) -> Vec<WordOccurrence> {
    let mut out = Vec::new();
    for rec in pool {
        if rec.utt_id == utt_id {
            continue;
        }
        for (wi, w) in rec.words.iter().enumerate() {
            if stop_list.contains(&w.word) || w.word != target.word {
                continue;
            }
            let same_pron = w.phones.len() == target.phones.len()
                && w.phones
                    .iter()
                    .zip(&target.phones)
                    .all(|(a, b)| a.phone == b.phone);
            let same_phone_durs = same_pron
                && w.phones
                    .iter()
                    .zip(&target.phones)
                    .all(|(a, b)| a.num_frames == b.num_frames);
            let ok = match level {
                ConstraintLevel::WordExact => w.num_frames == target.num_frames,
                ConstraintLevel::PhoneExact => same_phone_durs,
                ConstraintLevel::StateExact => {
                    same_phone_durs
                        && w.phones
                            .iter()
                            .zip(&target.phones)
                            .all(|(a, b)| a.state_durations == b.state_durations)
                }
                ConstraintLevel::PhoneMargin { margin, mode } => {
                    same_pron && {
                        let diffs = w
                            .phones
                            .iter()
                            .zip(&target.phones)
                            .map(|(a, b)| (i64::from(a.num_frames) - i64::from(b.num_frames)).abs());
                        match mode {
                            MarginMode::Average => {
                                let total: i64 = diffs.sum();
                                total as f64 / target.phones.len() as f64 <= margin
                            }
                            MarginMode::PerPhoneCap => diffs.into_iter().all(|d| d as f64 <= margin),
                        }
                    }
                }
            };
            if ok {
                out.push(WordOccurrence::new(rec.utt_id.clone(), wi));
            }
        }
    }
    out.sort();
    out
}
