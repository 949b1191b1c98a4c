//! Best-alternative selection per original word, corpus matching statistics,
//! and frame reorganization of the selected word onto the original's length.

use std::cmp::Ordering;

use rayon::prelude::*;
use thiserror::Error;

use crate::corpus::{UtteranceRecord, WordAlign, WordOccurrence};
use crate::index::{ConstraintLevel, PoolIndex};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MatchError {
    #[error("incomparable words: {0} vs {1}")]
    IncomparableWords(String, String),
}

/// Normalized L1 distance between per-phone durations:
/// `(1/N) * sum_i |l(p_i^a) - l(p_i^b)|`.
///
/// Both words must be the same word with the same phone identity sequence.
pub fn phone_distance(a: &WordAlign, b: &WordAlign) -> Result<f64, MatchError> {
    if a.word != b.word || !a.same_pronunciation(b) || a.phones.is_empty() {
        return Err(incomparable(a, b));
    }
    Ok(phone_distance_unchecked(a, b))
}

pub(crate) fn phone_distance_unchecked(a: &WordAlign, b: &WordAlign) -> f64 {
    let total: u64 = a
        .phone_durations()
        .zip(b.phone_durations())
        .map(|(x, y)| u64::from(x.abs_diff(y)))
        .sum();
    total as f64 / a.phones.len() as f64
}

fn incomparable(a: &WordAlign, b: &WordAlign) -> MatchError {
    let describe = |w: &WordAlign| format!("{}({})", w.word, w.phone_identities().collect::<Vec<_>>().join("-"));
    MatchError::IncomparableWords(describe(a), describe(b))
}

/// Maps `target_len` frames onto `source_len` frames: offset `k` reads source
/// frame `floor(k * source_len / target_len)`. Stretching repeats frames,
/// shrinking drops them; the map is non-decreasing.
pub fn resample_span(source_len: u32, target_len: u32) -> Vec<u32> {
    (0..u64::from(target_len))
        .map(|k| (k * u64::from(source_len) / u64::from(target_len)) as u32)
        .collect()
}

/// Per-phone frame map from the original word onto the selected word.
///
/// Entry `k` is the offset (inside `selected`) whose soft label fills frame
/// `k` of `original`. Each phone is resampled within its own span.
pub fn reorganize_frames(selected: &WordAlign, original: &WordAlign) -> Result<Vec<u32>, MatchError> {
    if !selected.same_pronunciation(original) {
        return Err(incomparable(original, selected));
    }
    let mut map = Vec::with_capacity(original.num_frames as usize);
    let mut source_start = 0u32;
    for (src, dst) in selected.phones.iter().zip(&original.phones) {
        map.extend(
            resample_span(src.num_frames, dst.num_frames)
                .into_iter()
                .map(|o| source_start + o),
        );
        source_start += src.num_frames;
    }
    Ok(map)
}

/// Frame map treating each word as one pseudo-phone.
pub fn reorganize_whole_word(selected: &WordAlign, original: &WordAlign) -> Vec<u32> {
    resample_span(selected.num_frames, original.num_frames)
}

/// The pool word chosen for one original word.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub original: WordOccurrence,
    pub selected: WordOccurrence,
    pub level: ConstraintLevel,
    /// Normalized phone distance; 0 for the exact levels.
    pub distance: f64,
    /// Count of equal meta attributes between the two utterances.
    pub meta_score: u32,
    pub frame_map: Vec<u32>,
}

/// Selection order: smaller distance, then larger meta score, then smaller id.
/// Candidates arrive id-sorted, so the first best one wins the final clause.
fn better(a: (f64, u32), b: (f64, u32)) -> bool {
    match a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal) {
        Ordering::Less => true,
        Ordering::Greater => false,
        Ordering::Equal => a.1 > b.1,
    }
}

/// Selects the best pool word for `record.words[word_index]`, or `None` when
/// no candidate satisfies `level`.
pub fn match_word(
    idx: &PoolIndex,
    record: &UtteranceRecord,
    word_index: usize,
    level: ConstraintLevel,
) -> Option<MatchResult> {
    let target = record.words.get(word_index)?;
    let candidates = idx.candidates(&record.utt_id, target, level);

    let mut best: Option<(usize, (f64, u32))> = None;
    for (i, c) in candidates.iter().enumerate() {
        let distance = match level {
            ConstraintLevel::PhoneMargin { .. } => phone_distance_unchecked(target, c.word),
            _ => 0.0,
        };
        let score = (distance, record.meta.similarity(&c.record.meta));
        if best.is_none_or(|(_, b)| better(score, b)) {
            best = Some((i, score));
        }
    }

    let (i, (distance, meta_score)) = best?;
    let chosen = candidates[i];
    let frame_map = match level {
        ConstraintLevel::WordExact => reorganize_whole_word(chosen.word, target),
        _ => reorganize_frames(chosen.word, target).expect("index guarantees pronunciation"),
    };
    Some(MatchResult {
        original: WordOccurrence::new(record.utt_id.clone(), word_index),
        selected: chosen.occurrence(),
        level,
        distance,
        meta_score,
        frame_map,
    })
}

/// Outcome for one non-stop-listed original word.
#[derive(Clone, Debug, PartialEq)]
pub struct WordOutcome {
    pub original: WordOccurrence,
    pub matched: Option<MatchResult>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchReport {
    pub level: ConstraintLevel,
    pub outcomes: Vec<WordOutcome>,
    pub matched_count: usize,
    pub total_count: usize,
}

impl MatchReport {
    pub fn from_outcomes(level: ConstraintLevel, outcomes: Vec<WordOutcome>) -> Self {
        let matched_count = outcomes.iter().filter(|o| o.matched.is_some()).count();
        let total_count = outcomes.len();
        Self {
            level,
            outcomes,
            matched_count,
            total_count,
        }
    }

    /// matched / total; 0 for an empty corpus.
    pub fn matching_ratio(&self) -> f64 {
        if self.total_count == 0 {
            0.0
        } else {
            self.matched_count as f64 / self.total_count as f64
        }
    }

    pub fn matches(&self) -> impl Iterator<Item = &MatchResult> {
        self.outcomes.iter().filter_map(|o| o.matched.as_ref())
    }
}

/// Matches every non-stop-listed word of `originals`. Outcomes follow corpus
/// order regardless of how the work is split across threads.
pub fn match_corpus(originals: &[UtteranceRecord], idx: &PoolIndex, level: ConstraintLevel) -> MatchReport {
    let per_utt: Vec<Vec<WordOutcome>> = originals
        .par_iter()
        .map(|rec| {
            rec.words
                .iter()
                .enumerate()
                .filter(|(_, w)| !idx.stop_list().contains(&w.word))
                .map(|(wi, _)| WordOutcome {
                    original: WordOccurrence::new(rec.utt_id.clone(), wi),
                    matched: match_word(idx, rec, wi, level),
                })
                .collect()
        })
        .collect();
    MatchReport::from_outcomes(level, per_utt.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::fixtures::{question, utterance};
    use crate::corpus::{split_states, Channel, Gender, PhoneAlign, StopList, Style, UtteranceMeta};

    fn with_durations(word: &str, phones: &[&str], durs: &[u32]) -> WordAlign {
        WordAlign::new(
            word,
            0,
            phones
                .iter()
                .zip(durs)
                .map(|(p, &d)| PhoneAlign::new(*p, split_states(d, 3).unwrap()))
                .collect(),
        )
    }

    const Q: [&str; 7] = ["K", "W", "EH", "S", "CH", "IH", "N"];

    #[test]
    fn distance_examples() {
        let a = with_durations("question", &Q, &[3, 3, 4, 3, 5, 3, 3]);
        assert_eq!(phone_distance(&a, &a).unwrap(), 0.0);
        let b = with_durations("question", &Q, &[3, 4, 4, 3, 5, 3, 3]);
        assert!((phone_distance(&a, &b).unwrap() - 1.0 / 7.0).abs() < 1e-12);
        assert_eq!(phone_distance(&b, &a).unwrap(), phone_distance(&a, &b).unwrap());

        let short = with_durations("ab", &["A", "B"], &[3, 3]);
        let long = with_durations("ab", &["A", "B"], &[5, 5]);
        assert_eq!(phone_distance(&short, &long).unwrap(), 2.0);

        let cat = with_durations("cat", &["K", "AE", "T"], &[3, 3, 3]);
        let cot = with_durations("cat", &["K", "AO", "T"], &[3, 3, 3]);
        assert!(matches!(phone_distance(&cat, &cot), Err(MatchError::IncomparableWords(..))));
        let dog = with_durations("dog", &["K", "AE", "T"], &[3, 3, 3]);
        assert!(phone_distance(&cat, &dog).is_err());
    }

    #[test]
    fn resampling_examples() {
        assert_eq!(resample_span(4, 4), vec![0, 1, 2, 3]);
        assert_eq!(resample_span(3, 4), vec![0, 0, 1, 2]);
        assert_eq!(resample_span(5, 3), vec![0, 1, 3]);
        assert!(resample_span(3, 0).is_empty());
    }

    #[test]
    fn reorganize_per_phone() {
        let orig = with_durations("ab", &["A", "B"], &[4, 3]);
        let sel = with_durations("ab", &["A", "B"], &[3, 5]);
        // A: 3 -> 4 frames, B: 5 -> 3 frames offset by 3
        assert_eq!(reorganize_frames(&sel, &orig).unwrap(), vec![0, 0, 1, 2, 3, 4, 6]);
        assert_eq!(reorganize_frames(&orig, &orig).unwrap(), (0..7).collect::<Vec<_>>());
        let other = with_durations("ab", &["A", "C"], &[4, 3]);
        assert!(reorganize_frames(&other, &orig).is_err());
    }

    #[test]
    fn single_word_exact_candidate() {
        let pool = vec![utterance("p", vec![question(0)])];
        let idx = PoolIndex::build(pool, StopList::empty(), 3).unwrap();
        let orig = utterance("o", vec![question(0)]);
        let m = match_word(&idx, &orig, 0, ConstraintLevel::WordExact).unwrap();
        assert_eq!(m.distance, 0.0);
        assert_eq!(m.selected, WordOccurrence::new("p", 0));
        assert_eq!(m.frame_map, (0..24).collect::<Vec<_>>());
    }

    #[test]
    fn smaller_distance_wins_over_id_order() {
        let far = with_durations("question", &Q, &[3, 3, 4, 3, 5, 3, 6]); // 3/7
        let near = question(0);
        // "a" sorts first but is farther
        let pool = vec![utterance("a", vec![far]), utterance("b", vec![near])];
        let idx = PoolIndex::build(pool, StopList::empty(), 3).unwrap();
        let orig = utterance("o", vec![question(0)]);
        let m = match_word(&idx, &orig, 0, ConstraintLevel::phone_margin(2.0).unwrap()).unwrap();
        assert_eq!(m.selected.utt_id, "b");
        assert_eq!(m.distance, 0.0);
    }

    #[test]
    fn meta_breaks_distance_ties() {
        let target_meta = UtteranceMeta {
            gender: Gender::Female,
            channel: Channel::Far,
            style: Style::Spontaneous,
            domain_tag: "interview".into(),
        };
        let sharing = UtteranceMeta {
            gender: Gender::Female,
            channel: Channel::Close,
            style: Style::Spontaneous,
            domain_tag: "news".into(),
        };
        let none = UtteranceMeta {
            gender: Gender::Male,
            channel: Channel::Close,
            style: Style::Read,
            domain_tag: "news".into(),
        };
        let mut a = utterance("a", vec![question(0)]);
        a.meta = none;
        let mut b = utterance("b", vec![question(0)]);
        b.meta = sharing;
        let idx = PoolIndex::build(vec![a, b], StopList::empty(), 3).unwrap();
        let mut orig = utterance("o", vec![question(0)]);
        orig.meta = target_meta;
        for level in [ConstraintLevel::WordExact, ConstraintLevel::StateExact] {
            let m = match_word(&idx, &orig, 0, level).unwrap();
            assert_eq!(m.selected.utt_id, "b");
            assert_eq!(m.meta_score, 2);
        }
        // without any meta difference, smallest id wins
        orig.meta = UtteranceMeta::unknown();
        let idx = PoolIndex::build(
            vec![utterance("a", vec![question(0)]), utterance("b", vec![question(0)])],
            StopList::empty(),
            3,
        )
        .unwrap();
        assert_eq!(match_word(&idx, &orig, 0, ConstraintLevel::StateExact).unwrap().selected.utt_id, "a");
    }

    #[test]
    fn absent_word_is_unmatched() {
        let idx = PoolIndex::build(vec![utterance("p", vec![question(0)])], StopList::empty(), 3).unwrap();
        let orig = utterance("o", vec![with_durations("other", &["O"], &[3])]);
        assert!(match_word(&idx, &orig, 0, ConstraintLevel::WordExact).is_none());
        assert!(match_word(&idx, &orig, 5, ConstraintLevel::WordExact).is_none());
    }

    #[test]
    fn corpus_report_counts_and_skips_stop_words() {
        let sil = WordAlign::new("<sil>", 0, vec![PhoneAlign::new("sil", vec![1, 1, 1])]);
        let orig = vec![
            utterance("o1", vec![sil.clone(), question(3)]),
            utterance("o2", vec![with_durations("x", &["X"], &[4])]),
        ];
        let pool = vec![utterance("p", vec![sil, question(3)])];
        let idx = PoolIndex::build(pool, StopList::silences(), 3).unwrap();
        let report = match_corpus(&orig, &idx, ConstraintLevel::StateExact);
        assert_eq!(report.total_count, 2);
        assert_eq!(report.matched_count, 1);
        assert_eq!(report.matching_ratio(), 0.5);
        assert_eq!(report.outcomes[0].original, WordOccurrence::new("o1", 1));
        let empty = match_corpus(&[], &idx, ConstraintLevel::WordExact);
        assert_eq!(empty.matching_ratio(), 0.0);
    }

    #[test]
    fn full_twin_corpus_matches_everything() {
        let orig: Vec<_> = (0..5).map(|i| utterance(&format!("o{i}"), vec![question(0)])).collect();
        let pool: Vec<_> = (0..5).map(|i| utterance(&format!("p{i}"), vec![question(0)])).collect();
        let idx = PoolIndex::build(pool, StopList::empty(), 3).unwrap();
        for level in [
            ConstraintLevel::WordExact,
            ConstraintLevel::phone_margin(2.0).unwrap(),
            ConstraintLevel::PhoneExact,
            ConstraintLevel::StateExact,
        ] {
            assert_eq!(match_corpus(&orig, &idx, level).matching_ratio(), 1.0);
        }
    }
}
