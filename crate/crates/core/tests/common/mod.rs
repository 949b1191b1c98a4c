//! Shared helpers for the integration tests: hand-built records, proptest
//! strategies, and reference implementations written independently of the
//! library.
#![allow(dead_code)]

use std::cmp::Reverse;

use kdpool::corpus::{
    Channel, Gender, PhoneAlign, StopList, Style, UtteranceMeta, UtteranceRecord, WordAlign, WordOccurrence,
};
use kdpool::index::ConstraintLevel;
use proptest::prelude::*;

/// The 24-frame "question" word: K W EH S CH IH N.
pub fn question(start: u32) -> WordAlign {
    let phones = [
        ("K", vec![1, 1, 1]),
        ("W", vec![1, 1, 1]),
        ("EH", vec![1, 2, 1]),
        ("S", vec![1, 1, 1]),
        ("CH", vec![1, 3, 1]),
        ("IH", vec![1, 1, 1]),
        ("N", vec![1, 1, 1]),
    ];
    WordAlign::new(
        "question",
        start,
        phones.into_iter().map(|(p, s)| PhoneAlign::new(p, s)).collect(),
    )
}

pub fn record(utt_id: &str, words: Vec<WordAlign>) -> UtteranceRecord {
    let num_frames = words.last().map_or(0, WordAlign::end_frame);
    UtteranceRecord {
        utt_id: utt_id.into(),
        speaker_id: format!("spk-{utt_id}"),
        meta: UtteranceMeta::unknown(),
        num_frames,
        words,
    }
}

pub fn levels() -> Vec<ConstraintLevel> {
    vec![
        ConstraintLevel::WordExact,
        ConstraintLevel::phone_margin(2.0).unwrap(),
        ConstraintLevel::PhoneExact,
        ConstraintLevel::StateExact,
    ]
}

fn phone_durs(w: &WordAlign) -> Vec<u32> {
    w.phones.iter().map(|p| p.state_durations.iter().sum()).collect()
}

/// Mean absolute per-phone duration difference, from the state durations.
pub fn reference_distance(a: &WordAlign, b: &WordAlign) -> f64 {
    let (da, db) = (phone_durs(a), phone_durs(b));
    let total: u32 = da.iter().zip(&db).map(|(x, y)| x.abs_diff(*y)).sum();
    f64::from(total) / da.len() as f64
}

fn same_phones(a: &WordAlign, b: &WordAlign) -> bool {
    let ids = |w: &WordAlign| w.phones.iter().map(|p| p.phone.clone()).collect::<Vec<_>>();
    ids(a) == ids(b)
}

pub fn qualifies(target: &WordAlign, cand: &WordAlign, level: ConstraintLevel) -> bool {
    if target.word != cand.word {
        return false;
    }
    let total = |w: &WordAlign| phone_durs(w).iter().sum::<u32>();
    let states = |w: &WordAlign| w.phones.iter().map(|p| p.state_durations.clone()).collect::<Vec<_>>();
    match level {
        ConstraintLevel::WordExact => total(target) == total(cand),
        ConstraintLevel::PhoneMargin { margin, .. } => {
            same_phones(target, cand) && reference_distance(target, cand) <= margin
        }
        ConstraintLevel::PhoneExact => same_phones(target, cand) && phone_durs(target) == phone_durs(cand),
        ConstraintLevel::StateExact => same_phones(target, cand) && states(target) == states(cand),
    }
}

/// Every qualifying pool word, sorted by address.
pub fn reference_candidates(
    pool: &[UtteranceRecord],
    stop: &StopList,
    utt_id: &str,
    target: &WordAlign,
    level: ConstraintLevel,
) -> Vec<WordOccurrence> {
    let mut out: Vec<WordOccurrence> = pool
        .iter()
        .filter(|r| r.utt_id != utt_id)
        .flat_map(|r| {
            r.words
                .iter()
                .enumerate()
                .filter(|(_, w)| !stop.contains(&w.word) && qualifies(target, w, level))
                .map(|(i, _)| WordOccurrence::new(r.utt_id.clone(), i))
        })
        .collect();
    out.sort();
    out
}

fn meta_agreement(a: &UtteranceMeta, b: &UtteranceMeta) -> u32 {
    u32::from(a.gender == b.gender)
        + u32::from(a.channel == b.channel)
        + u32::from(a.style == b.style)
        + u32::from(a.domain_tag == b.domain_tag)
}

/// Winner under (distance asc, meta agreement desc, address asc).
pub fn reference_select(
    pool: &[UtteranceRecord],
    stop: &StopList,
    original: &UtteranceRecord,
    word_index: usize,
    level: ConstraintLevel,
) -> Option<(WordOccurrence, f64, u32)> {
    let target = &original.words[word_index];
    let distance = |w: &WordAlign| match level {
        ConstraintLevel::PhoneMargin { .. } => reference_distance(target, w),
        _ => 0.0,
    };
    reference_candidates(pool, stop, &original.utt_id, target, level)
        .into_iter()
        .map(|occ| {
            let rec = pool.iter().find(|r| r.utt_id == occ.utt_id).unwrap();
            let w = &rec.words[occ.word_index];
            (occ, distance(w), meta_agreement(&original.meta, &rec.meta))
        })
        .min_by(|a, b| {
            a.1.total_cmp(&b.1)
                .then(Reverse(a.2).cmp(&Reverse(b.2)))
                .then(a.0.cmp(&b.0))
        })
}

// ---------------------------------------------------------------------------
// proptest strategies

pub fn arb_meta() -> impl Strategy<Value = UtteranceMeta> {
    (
        prop_oneof![Just(Gender::Female), Just(Gender::Male), Just(Gender::Unknown)],
        prop_oneof![Just(Channel::Close), Just(Channel::Far), Just(Channel::Telephone)],
        prop_oneof![Just(Style::Read), Just(Style::Spontaneous)],
        prop_oneof![Just("news".to_string()), Just("talk".to_string())],
    )
        .prop_map(|(gender, channel, style, domain_tag)| UtteranceMeta {
            gender,
            channel,
            style,
            domain_tag,
        })
}

/// A word spec: (word id, pronunciation variant, per-phone state durations).
/// Small alphabets make collisions between records likely.
fn arb_word_spec() -> impl Strategy<Value = (usize, usize, Vec<Vec<u32>>)> {
    (0usize..3, 0usize..2, 1usize..4).prop_flat_map(|(w, v, n)| {
        (
            Just(w),
            Just(v),
            prop::collection::vec(prop::collection::vec(1u32..3, 3), n),
        )
    })
}

const WORDS: [&str; 4] = ["go", "stop", "<sil>", "wait"];

fn build_word(start: u32, (w, v, states): (usize, usize, Vec<Vec<u32>>)) -> WordAlign {
    let phones = states
        .into_iter()
        .enumerate()
        .map(|(i, s)| PhoneAlign::new(format!("{}{}{}", WORDS[w].to_uppercase(), v, i), s))
        .collect();
    WordAlign::new(WORDS[w], start, phones)
}

pub fn arb_record(utt_id: String) -> impl Strategy<Value = UtteranceRecord> {
    (
        arb_meta(),
        prop::collection::vec((0u32..3, arb_word_spec()), 0..5),
        0u32..4,
    )
        .prop_map(move |(meta, specs, tail)| {
            let mut frame = 0;
            let words = specs
                .into_iter()
                .map(|(gap, spec)| {
                    let w = build_word(frame + gap, spec);
                    frame = w.end_frame();
                    w
                })
                .collect();
            UtteranceRecord {
                utt_id: utt_id.clone(),
                speaker_id: format!("s{}", utt_id.len()),
                meta,
                num_frames: frame + tail,
                words,
            }
        })
}

/// Records with ids `{prefix}0..{prefix}n`.
pub fn arb_corpus(prefix: &'static str, max: usize) -> impl Strategy<Value = Vec<UtteranceRecord>> {
    (1..=max).prop_flat_map(move |n| {
        (0..n)
            .map(|i| arb_record(format!("{prefix}{i}")))
            .collect::<Vec<_>>()
    })
}

/// A probability vector with at least one positive entry.
pub fn arb_distribution(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, len)
        .prop_filter("some mass", |v| v.iter().sum::<f64>() > 1e-3)
        .prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
}

// ---------------------------------------------------------------------------
// malformed-input mutations

pub const MUTATION_KINDS: usize = 8;

fn nth_match(text: &str, pat: &str, pick: usize) -> Option<usize> {
    let hits: Vec<usize> = text.match_indices(pat).map(|(i, _)| i).collect();
    (!hits.is_empty()).then(|| hits[pick % hits.len()] + pat.len())
}

fn number_at(text: &str, at: usize) -> (usize, u64) {
    let len = text[at..].bytes().take_while(u8::is_ascii_digit).count();
    (len, text[at..at + len].parse().unwrap())
}

/// Damages a serialized alignment corpus so that it must be rejected.
/// `kind < MUTATION_KINDS` selects the damage, `pick` where it lands.
pub fn mutate_alignments(text: &str, kind: usize, pick: usize) -> Vec<u8> {
    let lines: Vec<&str> = text.lines().collect();
    let line = lines[pick % lines.len()];
    let rebuilt = |new_line: &str| {
        let mut out: Vec<String> = lines.iter().map(|l| l.to_string()).collect();
        out[pick % lines.len()] = new_line.to_string();
        out.join("\n").into_bytes()
    };
    match kind {
        // cut a line short
        0 => rebuilt(&line[..1 + pick % (line.len() - 1)]),
        // word or phone frame count off by one
        1 => {
            let at = nth_match(line, "\"frames\":", pick).unwrap();
            let (len, n) = number_at(line, at);
            rebuilt(&format!("{}{}{}", &line[..at], n + 1, &line[at + len..]))
        }
        // zero-length state
        2 => {
            let at = nth_match(line, "\"states\":[", pick).unwrap();
            let (len, _) = number_at(line, at);
            rebuilt(&format!("{}0{}", &line[..at], &line[at + len..]))
        }
        // unknown field name
        3 => rebuilt(&line.replacen("\"speaker\"", "\"speakr\"", 1)),
        // duplicate record
        4 => {
            let mut out = text.as_bytes().to_vec();
            out.push(b'\n');
            out.extend_from_slice(line.as_bytes());
            out
        }
        // invalid UTF-8
        5 => {
            let mut bytes = line.as_bytes().to_vec();
            bytes.insert(pick % bytes.len(), 0xFF);
            let mut out = text.as_bytes().to_vec();
            out.push(b'\n');
            out.extend_from_slice(&bytes);
            out
        }
        // missing state
        6 => {
            let at = nth_match(line, "\"states\":[", pick).unwrap();
            let (len, _) = number_at(line, at);
            rebuilt(&format!("{}{}", &line[..at], &line[at + len + 1..]))
        }
        // negative frame index
        _ => {
            let at = nth_match(line, "\"start\":", pick).unwrap();
            rebuilt(&format!("{}-1{}", &line[..at], &line[at..]))
        }
    }
}
