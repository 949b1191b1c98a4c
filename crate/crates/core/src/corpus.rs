//! Forced-alignment data model: utterance → words → phones → HMM-state durations.
//!
//! All durations are integer counts of 10 ms frames. Records are plain values;
//! nothing here mutates after construction.

use std::collections::{BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Length of one analysis frame in milliseconds.
pub const FRAME_MS: u32 = 10;

/// Beginning / middle / end.
pub const DEFAULT_STATES_PER_PHONE: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum CorpusError {
    #[error("no phones")]
    NoPhones,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Female,
    Male,
    Unknown,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Close,
    Far,
    Telephone,
    Unknown,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Style {
    Read,
    Spontaneous,
    Unknown,
}

/// Recording attributes used to break ties between equally close pool words.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceMeta {
    pub gender: Gender,
    pub channel: Channel,
    pub style: Style,
    #[serde(rename = "domain")]
    pub domain_tag: String,
}

impl UtteranceMeta {
    pub fn unknown() -> Self {
        Self {
            gender: Gender::Unknown,
            channel: Channel::Unknown,
            style: Style::Unknown,
            domain_tag: String::new(),
        }
    }

    /// Number of attributes (out of 4) equal between `self` and `other`.
    pub fn similarity(&self, other: &UtteranceMeta) -> u32 {
        u32::from(self.gender == other.gender)
            + u32::from(self.channel == other.channel)
            + u32::from(self.style == other.style)
            + u32::from(self.domain_tag == other.domain_tag)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhoneAlign {
    #[serde(rename = "p")]
    pub phone: String,
    #[serde(rename = "frames")]
    pub num_frames: u32,
    #[serde(rename = "states")]
    pub state_durations: Vec<u32>,
}

impl PhoneAlign {
    pub fn new(phone: impl Into<String>, state_durations: Vec<u32>) -> Self {
        let num_frames = state_durations.iter().sum();
        Self {
            phone: phone.into(),
            num_frames,
            state_durations,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WordAlign {
    #[serde(rename = "w")]
    pub word: String,
    #[serde(rename = "start")]
    pub start_frame: u32,
    #[serde(rename = "frames")]
    pub num_frames: u32,
    pub phones: Vec<PhoneAlign>,
}

impl WordAlign {
    /// Builds a word whose frame count is the sum of its phones.
    pub fn new(word: impl Into<String>, start_frame: u32, phones: Vec<PhoneAlign>) -> Self {
        let num_frames = phones.iter().map(|p| p.num_frames).sum();
        Self {
            word: word.into(),
            start_frame,
            num_frames,
            phones,
        }
    }

    /// One past the last frame covered by the word.
    pub fn end_frame(&self) -> u32 {
        self.start_frame + self.num_frames
    }

    pub fn phone_durations(&self) -> impl Iterator<Item = u32> + '_ {
        self.phones.iter().map(|p| p.num_frames)
    }

    pub fn phone_identities(&self) -> impl Iterator<Item = &str> + '_ {
        self.phones.iter().map(|p| p.phone.as_str())
    }

    pub fn state_durations(&self) -> impl Iterator<Item = u32> + '_ {
        self.phones
            .iter()
            .flat_map(|p| p.state_durations.iter().copied())
    }

    /// True when both words have the same phone identity sequence.
    pub fn same_pronunciation(&self, other: &WordAlign) -> bool {
        self.phones.len() == other.phones.len()
            && self.phone_identities().eq(other.phone_identities())
    }
}

/// l(w): total frames of a word.
pub fn word_total_frames(w: &WordAlign) -> u32 {
    w.num_frames
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceRecord {
    pub utt_id: String,
    #[serde(rename = "speaker")]
    pub speaker_id: String,
    pub meta: UtteranceMeta,
    pub num_frames: u32,
    pub words: Vec<WordAlign>,
}

impl UtteranceRecord {
    pub fn word(&self, index: usize) -> Option<&WordAlign> {
        self.words.get(index)
    }

    pub fn num_phones(&self) -> usize {
        self.words.iter().map(|w| w.phones.len()).sum()
    }
}

/// Address of one word inside a corpus. Orders by `(utt_id, word_index)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct WordOccurrence {
    pub utt_id: String,
    pub word_index: usize,
}

impl WordOccurrence {
    pub fn new(utt_id: impl Into<String>, word_index: usize) -> Self {
        Self {
            utt_id: utt_id.into(),
            word_index,
        }
    }

    /// Resolves the occurrence against its record.
    pub fn resolve<'a>(&self, record: &'a UtteranceRecord) -> Option<&'a WordAlign> {
        if record.utt_id != self.utt_id {
            return None;
        }
        record.words.get(self.word_index)
    }
}

impl fmt::Display for WordOccurrence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.utt_id, self.word_index)
    }
}

/// Words excluded from matching and from the training manifest (silences etc).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StopList(BTreeSet<String>);

impl StopList {
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self(words.into_iter().map(Into::into).collect())
    }

    pub fn empty() -> Self {
        Self::default()
    }

    /// `<sil>` and `<sp>`.
    pub fn silences() -> Self {
        Self::new(["<sil>", "<sp>"])
    }

    /// One word per line; blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Self {
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#')),
        )
    }

    pub fn contains(&self, word: &str) -> bool {
        self.0.contains(word)
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }
}

/// One broken invariant, located by word / phone index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    EmptyWord { word: usize },
    NoPhones { word: usize },
    WordFrameSum { word: usize, declared: u32, phone_sum: u32 },
    WordOutOfBounds { word: usize, end: u32, num_frames: u32 },
    WordOverlap { word: usize, start: u32, previous_end: u32 },
    StateCount { word: usize, phone: usize, expected: usize, found: usize },
    ZeroState { word: usize, phone: usize, state: usize },
    PhoneFrameSum { word: usize, phone: usize, declared: u32, state_sum: u32 },
    DuplicateUttId { utt_id: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyWord { word } => write!(f, "word {word}: zero frames"),
            Violation::NoPhones { word } => write!(f, "word {word}: no phones"),
            Violation::WordFrameSum {
                word,
                declared,
                phone_sum,
            } => write!(
                f,
                "word {word}: declares {declared} frames but phones sum to {phone_sum}"
            ),
            Violation::WordOutOfBounds {
                word,
                end,
                num_frames,
            } => write!(
                f,
                "word {word}: ends at frame {end}, beyond utterance length {num_frames}"
            ),
            Violation::WordOverlap {
                word,
                start,
                previous_end,
            } => write!(
                f,
                "word {word}: starts at frame {start}, before previous word ends ({previous_end})"
            ),
            Violation::StateCount {
                word,
                phone,
                expected,
                found,
            } => write!(
                f,
                "word {word} phone {phone}: {found} states, expected {expected}"
            ),
            Violation::ZeroState { word, phone, state } => {
                write!(f, "word {word} phone {phone}: state {state} has zero frames")
            }
            Violation::PhoneFrameSum {
                word,
                phone,
                declared,
                state_sum,
            } => write!(
                f,
                "word {word} phone {phone}: declares {declared} frames but states sum to {state_sum}"
            ),
            Violation::DuplicateUttId { utt_id } => write!(f, "duplicate utt_id {utt_id}"),
        }
    }
}

/// Checks every record-level invariant. An empty result means the record is valid.
pub fn validate_utterance(rec: &UtteranceRecord, states_per_phone: usize) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut previous_end = 0u64;
    for (wi, w) in rec.words.iter().enumerate() {
        if w.num_frames == 0 {
            out.push(Violation::EmptyWord { word: wi });
        }
        if w.phones.is_empty() {
            out.push(Violation::NoPhones { word: wi });
        }
        let phone_sum: u64 = w.phones.iter().map(|p| u64::from(p.num_frames)).sum();
        if phone_sum != u64::from(w.num_frames) {
            out.push(Violation::WordFrameSum {
                word: wi,
                declared: w.num_frames,
                phone_sum: phone_sum.min(u64::from(u32::MAX)) as u32,
            });
        }
        let start = u64::from(w.start_frame);
        let end = start + u64::from(w.num_frames);
        if wi > 0 && start < previous_end {
            out.push(Violation::WordOverlap {
                word: wi,
                start: w.start_frame,
                previous_end: previous_end as u32,
            });
        }
        if end > u64::from(rec.num_frames) {
            out.push(Violation::WordOutOfBounds {
                word: wi,
                end: end.min(u64::from(u32::MAX)) as u32,
                num_frames: rec.num_frames,
            });
        }
        previous_end = previous_end.max(end);

        for (pi, p) in w.phones.iter().enumerate() {
            if p.state_durations.len() != states_per_phone {
                out.push(Violation::StateCount {
                    word: wi,
                    phone: pi,
                    expected: states_per_phone,
                    found: p.state_durations.len(),
                });
            }
            for (si, &d) in p.state_durations.iter().enumerate() {
                if d == 0 {
                    out.push(Violation::ZeroState {
                        word: wi,
                        phone: pi,
                        state: si,
                    });
                }
            }
            let state_sum: u64 = p.state_durations.iter().map(|&d| u64::from(d)).sum();
            if state_sum != u64::from(p.num_frames) {
                out.push(Violation::PhoneFrameSum {
                    word: wi,
                    phone: pi,
                    declared: p.num_frames,
                    state_sum: state_sum.min(u64::from(u32::MAX)) as u32,
                });
            }
        }
    }
    out
}

/// Record-level validation plus utt_id uniqueness across the corpus.
/// Each violation is paired with the offending utt_id.
pub fn validate_corpus(
    records: &[UtteranceRecord],
    states_per_phone: usize,
) -> Vec<(String, Violation)> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for rec in records {
        if !seen.insert(rec.utt_id.as_str()) {
            out.push((
                rec.utt_id.clone(),
                Violation::DuplicateUttId {
                    utt_id: rec.utt_id.clone(),
                },
            ));
        }
        out.extend(
            validate_utterance(rec, states_per_phone)
                .into_iter()
                .map(|v| (rec.utt_id.clone(), v)),
        );
    }
    out
}

/// Mean phone duration in frames over every phone of the corpus.
pub fn phone_duration_mean(corpus: &[UtteranceRecord]) -> Result<f64, CorpusError> {
    let (count, total) = corpus
        .iter()
        .flat_map(|r| r.words.iter())
        .flat_map(|w| w.phones.iter())
        .fold((0u64, 0u64), |(n, s), p| (n + 1, s + u64::from(p.num_frames)));
    if count == 0 {
        return Err(CorpusError::NoPhones);
    }
    Ok(total as f64 / count as f64)
}

/// Splits a phone duration across states: equal shares, remainder to the middle state.
///
/// `split_states(5, 3) == [1, 3, 1]`. Returns `None` when `duration < states`.
pub fn split_states(duration: u32, states: usize) -> Option<Vec<u32>> {
    if states == 0 || (duration as usize) < states {
        return None;
    }
    let base = duration / states as u32;
    let rem = duration % states as u32;
    let mut out = vec![base; states];
    out[states / 2] += rem;
    Some(out)
}
