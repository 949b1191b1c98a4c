//! Line-delimited JSON readers and writers.
//!
//! One record per line for alignments, soft labels, per-frame features, match
//! results, manifests, and loss traces. Writers are deterministic: equal
//! inputs give byte-identical output. Probabilities are written with 8
//! significant digits; everything else round-trips exactly.

use std::collections::HashSet;
use std::io::{self, BufRead, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{validate_utterance, UtteranceRecord, Violation, WordOccurrence};
use crate::distill::{LabeledFrame, StudentModel, TraceRecord};
use crate::index::{ConstraintLevel, MarginMode};
use crate::matcher::{MatchReport, MatchResult, WordOutcome};
use crate::targets::{
    FrameTable, SoftLabelTable, SoftTargetFrame, SoftView, TargetError, TrainingExample, UtteranceFrames,
    ViewSource,
};

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: duplicate utt_id {utt_id}")]
    DuplicateUttId { line: usize, utt_id: String },
    #[error("line {line}: record {utt_id}: {violation}")]
    InvalidRecord {
        line: usize,
        utt_id: String,
        violation: Violation,
    },
    #[error("line {line}: unknown utt_id {utt_id}")]
    UnknownUttId { line: usize, utt_id: String },
    #[error("line {line}: utterance {utt_id}: frame-count mismatch (expected {expected}, found {found})")]
    FrameCountMismatch {
        line: usize,
        utt_id: String,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: frame {frame}: {source}")]
    InvalidDistribution {
        line: usize,
        frame: usize,
        source: TargetError,
    },
    #[error("cannot write record {what}: {reason}")]
    InvalidInput { what: String, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Rounds to 8 significant decimal digits.
pub fn round_sig8(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.7e}").parse().unwrap_or(x)
}

/// Iterates non-blank lines as `(1-based line number, text)`.
fn lines<R: BufRead>(mut source: R) -> impl Iterator<Item = Result<(usize, String), FormatError>> {
    let mut line_no = 0usize;
    let mut buf = Vec::new();
    std::iter::from_fn(move || loop {
        buf.clear();
        line_no += 1;
        match source.read_until(b'\n', &mut buf) {
            Ok(0) => return None,
            Ok(_) => {}
            Err(e) => return Some(Err(e.into())),
        }
        let text = match std::str::from_utf8(&buf) {
            Ok(t) => t.trim(),
            Err(e) => {
                return Some(Err(FormatError::Malformed {
                    line: line_no,
                    reason: e.to_string(),
                }))
            }
        };
        if !text.is_empty() {
            return Some(Ok((line_no, text.to_owned())));
        }
    })
}

fn parse_line<T: DeserializeOwned>(line: usize, text: &str) -> Result<T, FormatError> {
    serde_json::from_str(text).map_err(|e| FormatError::Malformed {
        line,
        reason: e.to_string(),
    })
}

fn write_line<W: Write, T: Serialize>(out: &mut W, value: &T) -> Result<(), FormatError> {
    serde_json::to_writer(&mut *out, value).map_err(io::Error::from)?;
    out.write_all(b"\n")?;
    Ok(())
}

// ---------------------------------------------------------------------------
// alignments

/// Reads an alignment corpus. Every record must pass validation and utt_ids
/// must be unique.
pub fn parse_alignments<R: BufRead>(
    source: R,
    states_per_phone: usize,
) -> Result<Vec<UtteranceRecord>, FormatError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for item in lines(source) {
        let (line, text) = item?;
        let rec: UtteranceRecord = parse_line(line, &text)?;
        if let Some(violation) = validate_utterance(&rec, states_per_phone).into_iter().next() {
            return Err(FormatError::InvalidRecord {
                line,
                utt_id: rec.utt_id,
                violation,
            });
        }
        if !seen.insert(rec.utt_id.clone()) {
            return Err(FormatError::DuplicateUttId {
                line,
                utt_id: rec.utt_id,
            });
        }
        out.push(rec);
    }
    Ok(out)
}

/// Validates every record first; nothing is written if any is invalid.
pub fn write_alignments<W: Write>(
    out: &mut W,
    records: &[UtteranceRecord],
    states_per_phone: usize,
) -> Result<(), FormatError> {
    let mut seen = HashSet::new();
    for rec in records {
        if let Some(v) = validate_utterance(rec, states_per_phone).into_iter().next() {
            return Err(FormatError::InvalidInput {
                what: rec.utt_id.clone(),
                reason: v.to_string(),
            });
        }
        if !seen.insert(rec.utt_id.as_str()) {
            return Err(FormatError::InvalidInput {
                what: rec.utt_id.clone(),
                reason: "duplicate utt_id".into(),
            });
        }
    }
    for rec in records {
        write_line(out, rec)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// soft labels

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SoftLine {
    utt_id: String,
    frames: Vec<Vec<(u32, f64)>>,
}

/// Rounded entries in the order the parser will store them, so rounding
/// ties cannot reorder a rewrite.
fn wire_dist(f: &SoftTargetFrame) -> Vec<(u32, f64)> {
    let mut out: Vec<(u32, f64)> = f.entries().iter().map(|&(l, p)| (l, round_sig8(p))).collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    out
}

fn check_dist(line: usize, frame: usize, entries: Vec<(u32, f64)>, k: usize) -> Result<SoftTargetFrame, FormatError> {
    let dist = SoftTargetFrame::new(entries).and_then(|d| d.check(k).map(|_| d));
    dist.map_err(|source| FormatError::InvalidDistribution { line, frame, source })
}

/// Reads soft labels and joins them against `companion` alignments: every
/// utt_id must exist there and carry one distribution per frame.
pub fn parse_soft_labels<R: BufRead>(
    source: R,
    companion: &[UtteranceRecord],
    k: usize,
) -> Result<SoftLabelTable, FormatError> {
    let frames_of: std::collections::HashMap<&str, u32> =
        companion.iter().map(|r| (r.utt_id.as_str(), r.num_frames)).collect();
    let mut out = SoftLabelTable::new();
    for item in lines(source) {
        let (line, text) = item?;
        let wire: SoftLine = parse_line(line, &text)?;
        let Some(&expected) = frames_of.get(wire.utt_id.as_str()) else {
            return Err(FormatError::UnknownUttId {
                line,
                utt_id: wire.utt_id,
            });
        };
        if wire.frames.len() != expected as usize {
            return Err(FormatError::FrameCountMismatch {
                line,
                utt_id: wire.utt_id,
                expected: expected as usize,
                found: wire.frames.len(),
            });
        }
        let frames = wire
            .frames
            .into_iter()
            .enumerate()
            .map(|(i, e)| check_dist(line, i, e, k))
            .collect::<Result<Vec<_>, _>>()?;
        if out.contains_key(&wire.utt_id) {
            return Err(FormatError::DuplicateUttId {
                line,
                utt_id: wire.utt_id,
            });
        }
        out.insert(wire.utt_id, frames);
    }
    Ok(out)
}

/// Writes one line per utterance, in utt_id order.
pub fn write_soft_labels<W: Write>(out: &mut W, table: &SoftLabelTable) -> Result<(), FormatError> {
    let mut ids: Vec<&String> = table.keys().collect();
    ids.sort();
    for id in ids {
        let line = SoftLine {
            utt_id: id.clone(),
            frames: table[id].iter().map(wire_dist).collect(),
        };
        write_line(out, &line)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// per-frame features + hard labels

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FramesLine {
    utt_id: String,
    feats: Vec<Vec<f64>>,
    hard: Vec<u32>,
}

/// Reads per-frame features and hard labels, joined against `companion`.
pub fn parse_frames<R: BufRead>(source: R, companion: &[UtteranceRecord]) -> Result<FrameTable, FormatError> {
    let frames_of: std::collections::HashMap<&str, u32> =
        companion.iter().map(|r| (r.utt_id.as_str(), r.num_frames)).collect();
    let mut out = FrameTable::new();
    for item in lines(source) {
        let (line, text) = item?;
        let wire: FramesLine = parse_line(line, &text)?;
        let Some(&expected) = frames_of.get(wire.utt_id.as_str()) else {
            return Err(FormatError::UnknownUttId {
                line,
                utt_id: wire.utt_id,
            });
        };
        for found in [wire.feats.len(), wire.hard.len()] {
            if found != expected as usize {
                return Err(FormatError::FrameCountMismatch {
                    line,
                    utt_id: wire.utt_id,
                    expected: expected as usize,
                    found,
                });
            }
        }
        if out.contains_key(&wire.utt_id) {
            return Err(FormatError::DuplicateUttId {
                line,
                utt_id: wire.utt_id,
            });
        }
        out.insert(
            wire.utt_id,
            UtteranceFrames {
                feats: wire.feats,
                hard: wire.hard,
            },
        );
    }
    Ok(out)
}

pub fn write_frames<W: Write>(out: &mut W, table: &FrameTable) -> Result<(), FormatError> {
    let mut ids: Vec<&String> = table.keys().collect();
    ids.sort();
    for id in &ids {
        let f = &table[*id];
        if f.feats.iter().flatten().any(|x| !x.is_finite()) {
            return Err(FormatError::InvalidInput {
                what: (*id).clone(),
                reason: "non-finite feature".into(),
            });
        }
    }
    for id in ids {
        let f = &table[id];
        write_line(
            out,
            &FramesLine {
                utt_id: id.clone(),
                feats: f.feats.clone(),
                hard: f.hard.clone(),
            },
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// manifest

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ViewLine {
    src: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pool_utt: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pool_word: Option<usize>,
    dist: Vec<(u32, f64)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestLine {
    utt_id: String,
    frame: u32,
    feat: Vec<f64>,
    hard: u32,
    views: Vec<ViewLine>,
}

/// Reads a training manifest. Views must be well-formed and every
/// distribution a valid top-`k` target.
pub fn parse_manifest<R: BufRead>(source: R, k: usize) -> Result<Vec<TrainingExample>, FormatError> {
    let mut out = Vec::new();
    for item in lines(source) {
        let (line, text) = item?;
        let wire: ManifestLine = parse_line(line, &text)?;
        let malformed = |reason: &str| FormatError::Malformed {
            line,
            reason: reason.to_owned(),
        };
        let mut views = Vec::with_capacity(wire.views.len());
        for v in wire.views {
            let source = match (v.src.as_str(), v.pool_utt, v.pool_word) {
                ("orig", None, None) => ViewSource::Orig,
                ("pool", Some(u), Some(w)) => ViewSource::Pool(WordOccurrence::new(u, w)),
                ("orig", _, _) => return Err(malformed("orig view with pool provenance")),
                ("pool", _, _) => return Err(malformed("pool view without provenance")),
                _ => return Err(malformed("view src must be \"orig\" or \"pool\"")),
            };
            let dist = check_dist(line, wire.frame as usize, v.dist, k)?;
            views.push(SoftView { source, dist });
        }
        let ex = TrainingExample {
            utt_id: wire.utt_id,
            frame: wire.frame,
            feat: wire.feat,
            hard: wire.hard,
            views,
        };
        if !ex.views_well_formed() {
            return Err(malformed("need 1-2 views, at most one per source"));
        }
        out.push(ex);
    }
    Ok(out)
}

pub fn write_manifest<W: Write>(out: &mut W, examples: &[TrainingExample]) -> Result<(), FormatError> {
    for ex in examples {
        if !ex.views_well_formed() {
            return Err(FormatError::InvalidInput {
                what: format!("{}@{}", ex.utt_id, ex.frame),
                reason: "need 1-2 views, at most one per source".into(),
            });
        }
        if ex.feat.iter().any(|x| !x.is_finite()) {
            return Err(FormatError::InvalidInput {
                what: format!("{}@{}", ex.utt_id, ex.frame),
                reason: "non-finite feature".into(),
            });
        }
    }
    for ex in examples {
        let views = ex
            .views
            .iter()
            .map(|v| {
                let (src, pool_utt, pool_word) = match &v.source {
                    ViewSource::Orig => ("orig", None, None),
                    ViewSource::Pool(occ) => ("pool", Some(occ.utt_id.clone()), Some(occ.word_index)),
                };
                ViewLine {
                    src: src.to_owned(),
                    pool_utt,
                    pool_word,
                    dist: wire_dist(&v.dist),
                }
            })
            .collect();
        write_line(
            out,
            &ManifestLine {
                utt_id: ex.utt_id.clone(),
                frame: ex.frame,
                feat: ex.feat.clone(),
                hard: ex.hard,
                views,
            },
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// match results

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SelectedLine {
    utt_id: String,
    word: usize,
    distance: f64,
    meta_score: u32,
    frame_map: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MatchLine {
    utt_id: String,
    word: usize,
    level: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    margin: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    margin_mode: Option<String>,
    selected: Option<SelectedLine>,
}

fn level_to_wire(level: ConstraintLevel) -> (String, Option<f64>, Option<String>) {
    match level {
        ConstraintLevel::PhoneMargin { margin, mode } => (
            level.kind_name().into(),
            Some(margin),
            Some(
                match mode {
                    MarginMode::Average => "average",
                    MarginMode::PerPhoneCap => "cap",
                }
                .into(),
            ),
        ),
        other => (other.kind_name().into(), None, None),
    }
}

fn level_from_wire(kind: &str, margin: Option<f64>, mode: Option<&str>) -> Result<ConstraintLevel, String> {
    match (kind, margin) {
        ("word", None) => Ok(ConstraintLevel::WordExact),
        ("phone", None) => Ok(ConstraintLevel::PhoneExact),
        ("state", None) => Ok(ConstraintLevel::StateExact),
        ("phone-margin", Some(m)) => {
            let mode = match mode {
                None | Some("average") => MarginMode::Average,
                Some("cap") => MarginMode::PerPhoneCap,
                Some(other) => return Err(format!("unknown margin mode {other}")),
            };
            ConstraintLevel::phone_margin_with(m, mode).map_err(|e| e.to_string())
        }
        ("phone-margin", None) => Err("phone-margin level without margin".into()),
        (_, Some(_)) if ["word", "phone", "state"].contains(&kind) => {
            Err(format!("margin is only valid for phone-margin, not {kind}"))
        }
        _ => Err(format!("unknown constraint level {kind}")),
    }
}

/// One line per original word outcome, in report order.
pub fn write_matches<W: Write>(out: &mut W, report: &MatchReport) -> Result<(), FormatError> {
    let (level, margin, margin_mode) = level_to_wire(report.level);
    for o in &report.outcomes {
        let selected = o.matched.as_ref().map(|m| SelectedLine {
            utt_id: m.selected.utt_id.clone(),
            word: m.selected.word_index,
            distance: m.distance,
            meta_score: m.meta_score,
            frame_map: m.frame_map.clone(),
        });
        write_line(
            out,
            &MatchLine {
                utt_id: o.original.utt_id.clone(),
                word: o.original.word_index,
                level: level.clone(),
                margin,
                margin_mode: margin_mode.clone(),
                selected,
            },
        )?;
    }
    Ok(())
}

/// Reads a match file back into a report. All lines must share one level;
/// an empty file yields an empty word-level report.
pub fn parse_matches<R: BufRead>(source: R) -> Result<MatchReport, FormatError> {
    let mut level: Option<ConstraintLevel> = None;
    let mut outcomes = Vec::new();
    for item in lines(source) {
        let (line, text) = item?;
        let wire: MatchLine = parse_line(line, &text)?;
        let this = level_from_wire(&wire.level, wire.margin, wire.margin_mode.as_deref())
            .map_err(|reason| FormatError::Malformed { line, reason })?;
        match level {
            None => level = Some(this),
            Some(l) if l != this => {
                return Err(FormatError::Malformed {
                    line,
                    reason: format!("level {this} differs from earlier {l}"),
                })
            }
            _ => {}
        }
        let original = WordOccurrence::new(wire.utt_id, wire.word);
        let matched = match wire.selected {
            None => None,
            Some(s) => {
                if !(s.distance.is_finite() && s.distance >= 0.0) {
                    return Err(FormatError::Malformed {
                        line,
                        reason: format!("invalid distance {}", s.distance),
                    });
                }
                if s.frame_map.windows(2).any(|w| w[0] > w[1]) {
                    return Err(FormatError::Malformed {
                        line,
                        reason: "frame map must be non-decreasing".into(),
                    });
                }
                Some(MatchResult {
                    original: original.clone(),
                    selected: WordOccurrence::new(s.utt_id, s.word),
                    level: this,
                    distance: s.distance,
                    meta_score: s.meta_score,
                    frame_map: s.frame_map,
                })
            }
        };
        outcomes.push(WordOutcome { original, matched });
    }
    Ok(MatchReport::from_outcomes(
        level.unwrap_or(ConstraintLevel::WordExact),
        outcomes,
    ))
}

// ---------------------------------------------------------------------------
// training artifacts

pub fn write_trace<W: Write>(out: &mut W, trace: &[TraceRecord]) -> Result<(), FormatError> {
    for r in trace {
        write_line(out, r)?;
    }
    Ok(())
}

pub fn parse_trace<R: BufRead>(source: R) -> Result<Vec<TraceRecord>, FormatError> {
    lines(source)
        .map(|item| item.and_then(|(line, text)| parse_line(line, &text)))
        .collect()
}

/// Evaluation frames: `{"feat":[...],"label":n}` per line.
pub fn write_labeled_frames<W: Write>(out: &mut W, frames: &[LabeledFrame]) -> Result<(), FormatError> {
    for f in frames {
        write_line(out, f)?;
    }
    Ok(())
}

pub fn parse_labeled_frames<R: BufRead>(source: R) -> Result<Vec<LabeledFrame>, FormatError> {
    lines(source)
        .map(|item| item.and_then(|(line, text)| parse_line(line, &text)))
        .collect()
}

pub fn write_model<W: Write>(out: &mut W, model: &StudentModel) -> Result<(), FormatError> {
    write_line(out, model)
}

pub fn parse_model<R: BufRead>(source: R) -> Result<StudentModel, FormatError> {
    let mut it = lines(source);
    let (line, text) = it.next().transpose()?.ok_or(FormatError::Malformed {
        line: 1,
        reason: "empty model file".into(),
    })?;
    let model: StudentModel = parse_line(line, &text)?;
    model
        .check()
        .map_err(|e| FormatError::Malformed { line, reason: e.to_string() })?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::fixtures::{question, utterance};

    fn bytes<F: FnOnce(&mut Vec<u8>) -> Result<(), FormatError>>(f: F) -> Vec<u8> {
        let mut v = Vec::new();
        f(&mut v).unwrap();
        v
    }

    #[test]
    fn question_line_parses() {
        let line = r#"{"utt_id":"u1","speaker":"s1","meta":{"gender":"female","channel":"close","style":"read","domain":"news"},"num_frames":24,"words":[{"w":"question","start":0,"frames":24,"phones":[{"p":"K","frames":3,"states":[1,1,1]},{"p":"W","frames":3,"states":[1,1,1]},{"p":"EH","frames":4,"states":[1,2,1]},{"p":"S","frames":3,"states":[1,1,1]},{"p":"CH","frames":5,"states":[1,3,1]},{"p":"IH","frames":3,"states":[1,1,1]},{"p":"N","frames":3,"states":[1,1,1]}]}]}"#;
        let recs = parse_alignments(line.as_bytes(), 3).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(crate::corpus::word_total_frames(&recs[0].words[0]), 24);
        assert_eq!(recs[0].words[0], question(0));
        // writing reproduces the exact line
        assert_eq!(
            String::from_utf8(bytes(|b| write_alignments(b, &recs, 3))).unwrap(),
            format!("{line}\n")
        );
    }

    #[test]
    fn empty_and_bad_alignment_inputs() {
        assert!(parse_alignments(&b""[..], 3).unwrap().is_empty());
        assert!(parse_alignments(&b"\n\n"[..], 3).unwrap().is_empty());

        let mut rec = utterance("u1", vec![question(0)]);
        let good = serde_json::to_string(&rec).unwrap();
        rec.words[0].num_frames = 23;
        rec.num_frames = 24;
        let bad = serde_json::to_string(&rec).unwrap();
        let text = format!("{good}\n{bad}\n").replace("\"u1\"", "\"X\"");
        // first line fine, second line: duplicate id is not reached, invariant fails first
        let err = parse_alignments(text.as_bytes(), 3).unwrap_err();
        assert!(matches!(err, FormatError::InvalidRecord { line: 2, .. }), "{err}");

        let dup = format!("{good}\n{good}\n");
        assert!(matches!(
            parse_alignments(dup.as_bytes(), 3),
            Err(FormatError::DuplicateUttId { line: 2, .. })
        ));
        assert!(matches!(
            parse_alignments(&b"{not json"[..], 3),
            Err(FormatError::Malformed { line: 1, .. })
        ));
        assert!(matches!(
            parse_alignments(&b"\xff\xfe\n"[..], 3),
            Err(FormatError::Malformed { line: 1, .. })
        ));
    }

    #[test]
    fn invalid_records_are_not_written() {
        let mut rec = utterance("u1", vec![question(0)]);
        rec.words[0].num_frames = 3;
        let mut out = Vec::new();
        assert!(write_alignments(&mut out, &[utterance("ok", vec![question(0)]), rec], 3).is_err());
        assert!(out.is_empty());
    }

    fn three_frame_corpus() -> Vec<UtteranceRecord> {
        let w = crate::corpus::WordAlign::new(
            "a",
            0,
            vec![crate::corpus::PhoneAlign::new("A", vec![1, 1, 1])],
        );
        vec![utterance("u", vec![w])]
    }

    #[test]
    fn soft_label_checks() {
        let recs = three_frame_corpus();
        let ok = r#"{"utt_id":"u","frames":[[[0,1.0]],[[1,0.5],[2,0.5]],[[3,0.25],[4,0.75]]]}"#;
        let table = parse_soft_labels(ok.as_bytes(), &recs, 50).unwrap();
        assert_eq!(table.len(), 1);
        assert_eq!(table["u"][2].entries(), &[(4, 0.75), (3, 0.25)]);

        let short = r#"{"utt_id":"u","frames":[[[0,1.0]],[[1,1.0]]]}"#;
        let err = parse_soft_labels(short.as_bytes(), &recs, 50).unwrap_err();
        assert!(err.to_string().contains("frame-count mismatch"));

        let unknown = r#"{"utt_id":"v","frames":[]}"#;
        assert!(matches!(
            parse_soft_labels(unknown.as_bytes(), &recs, 50),
            Err(FormatError::UnknownUttId { .. })
        ));
        for bad in ["0.0", "1.5", "-0.2"] {
            let line = format!(r#"{{"utt_id":"u","frames":[[[0,{bad}]],[[1,1.0]],[[2,1.0]]]}}"#);
            assert!(matches!(
                parse_soft_labels(line.as_bytes(), &recs, 50),
                Err(FormatError::InvalidDistribution { frame: 0, .. })
            ));
        }
    }

    #[test]
    fn fifty_entries_at_default_k() {
        let recs = three_frame_corpus();
        let frame: Vec<String> = (0..50).map(|l| format!("[{l},0.02]")).collect();
        let frame = format!("[{}]", frame.join(","));
        let line = format!(r#"{{"utt_id":"u","frames":[{frame},{frame},{frame}]}}"#);
        let t = parse_soft_labels(line.as_bytes(), &recs, crate::targets::DEFAULT_TOP_K).unwrap();
        assert_eq!(t["u"][0].len(), 50);
        assert!(parse_soft_labels(line.as_bytes(), &recs, 49).is_err());
    }

    #[test]
    fn sig8_rounding_idempotent() {
        for x in [0.1, 1.0 / 3.0, 0.625, 1e-9 / 7.0, 0.999_999_999_9] {
            let r = round_sig8(x);
            assert_eq!(round_sig8(r), r);
            assert!((r - x).abs() <= x * 1e-7);
        }
        assert_eq!(round_sig8(1.0 / 3.0), 0.33333333);
    }

    #[test]
    fn match_level_wire_rules() {
        assert!(level_from_wire("word", Some(2.0), None).is_err());
        assert!(level_from_wire("phone-margin", None, None).is_err());
        assert!(level_from_wire("bogus", None, None).is_err());
        assert_eq!(
            level_from_wire("phone-margin", Some(2.0), Some("cap")).unwrap(),
            ConstraintLevel::phone_margin_with(2.0, MarginMode::PerPhoneCap).unwrap()
        );
    }
}
