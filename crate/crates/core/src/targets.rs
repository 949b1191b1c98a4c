//! Soft targets from a teacher posterior source, and the multi-view training
//! manifest: each frame of an original word carries its own soft label plus,
//! when the word matched, the reorganized soft label of the selected pool word.

use std::collections::{HashMap, HashSet};

use rayon::prelude::*;
use thiserror::Error;

use crate::corpus::{StopList, UtteranceRecord, WordOccurrence};
use crate::matcher::{MatchReport, MatchResult};

/// Default top-K truncation of teacher posteriors.
pub const DEFAULT_TOP_K: usize = 50;

/// Tolerance on "sums to one" for posteriors and soft targets.
pub const SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum TargetError {
    #[error("top-K must be at least 1")]
    InvalidTopK,
    #[error("probability {prob} for label {label} outside (0, 1]")]
    ProbabilityOutOfRange { label: u32, prob: f64 },
    #[error("label {0} appears twice")]
    DuplicateLabel(u32),
    #[error("distribution sums to {0}, not 1")]
    NotNormalized(f64),
    #[error("{entries} entries exceed top-K of {k}")]
    TooManyEntries { entries: usize, k: usize },
    #[error("teacher output for frame {frame}: {reason}")]
    TeacherContract { frame: usize, reason: String },
    #[error("no soft labels for utterance {0}")]
    MissingSoftLabels(String),
    #[error("no frame data for utterance {0}")]
    MissingFrames(String),
    #[error("utterance {utt_id}: {what} has {found} frames, expected {expected}")]
    FrameCountMismatch {
        utt_id: String,
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("match references unknown pool word {0}")]
    UnknownPoolWord(WordOccurrence),
    #[error("frame map of {0} does not fit the words it connects")]
    InvalidFrameMap(WordOccurrence),
}

/// Sparse distribution over labels for one frame, sorted by descending
/// probability (ties by ascending label).
#[derive(Clone, Debug, PartialEq)]
pub struct SoftTargetFrame {
    entries: Vec<(u32, f64)>,
}

impl SoftTargetFrame {
    /// Checks ranges and label uniqueness, then sorts. Does not renormalize.
    pub fn new(mut entries: Vec<(u32, f64)>) -> Result<Self, TargetError> {
        for &(label, prob) in &entries {
            if !(prob > 0.0 && prob <= 1.0) {
                return Err(TargetError::ProbabilityOutOfRange { label, prob });
            }
        }
        entries.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut seen = HashSet::with_capacity(entries.len());
        for &(label, _) in &entries {
            if !seen.insert(label) {
                return Err(TargetError::DuplicateLabel(label));
            }
        }
        Ok(Self { entries })
    }

    pub fn one_hot(label: u32) -> Self {
        Self {
            entries: vec![(label, 1.0)],
        }
    }

    pub fn entries(&self) -> &[(u32, f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.entries.iter().map(|e| e.1).sum()
    }

    pub fn argmax(&self) -> Option<u32> {
        self.entries.first().map(|e| e.0)
    }

    /// Full invariant check: sum within tolerance and at most `k` entries.
    pub fn check(&self, k: usize) -> Result<(), TargetError> {
        if self.entries.len() > k {
            return Err(TargetError::TooManyEntries {
                entries: self.entries.len(),
                k,
            });
        }
        let total = self.total();
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(TargetError::NotNormalized(total));
        }
        Ok(())
    }

    pub fn to_dense(&self, num_labels: usize) -> Vec<f64> {
        let mut out = vec![0.0; num_labels];
        for &(l, p) in &self.entries {
            if let Some(slot) = out.get_mut(l as usize) {
                *slot = p;
            }
        }
        out
    }
}

/// A teacher: maps a feature vector to a full posterior over labels.
pub trait PosteriorSource {
    fn num_labels(&self) -> usize;
    fn posterior(&self, feat: &[f64]) -> Vec<f64>;
}

/// Top-K teacher posteriors per frame, renormalized to sum to one.
pub fn extract_soft_targets<T: PosteriorSource + ?Sized>(
    teacher: &T,
    feats: &[Vec<f64>],
    k: usize,
) -> Result<Vec<SoftTargetFrame>, TargetError> {
    if k == 0 {
        return Err(TargetError::InvalidTopK);
    }
    feats
        .iter()
        .enumerate()
        .map(|(frame, feat)| {
            let post = teacher.posterior(feat);
            let contract = |reason: String| TargetError::TeacherContract { frame, reason };
            if post.len() != teacher.num_labels() {
                return Err(contract(format!(
                    "{} values for {} labels",
                    post.len(),
                    teacher.num_labels()
                )));
            }
            if let Some(bad) = post.iter().find(|p| !p.is_finite() || **p < 0.0) {
                return Err(contract(format!("invalid probability {bad}")));
            }
            let total: f64 = post.iter().sum();
            if (total - 1.0).abs() > SUM_TOLERANCE {
                return Err(contract(format!("sums to {total}")));
            }
            Ok(top_k(&post, k))
        })
        .collect()
}

/// Keeps the `k` most likely labels (ties to the smaller label) and renormalizes.
pub fn top_k(posterior: &[f64], k: usize) -> SoftTargetFrame {
    let mut order: Vec<u32> = (0..posterior.len() as u32).collect();
    order.sort_by(|&a, &b| {
        posterior[b as usize]
            .total_cmp(&posterior[a as usize])
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order.retain(|&l| posterior[l as usize] > 0.0);
    let kept: f64 = order.iter().map(|&l| posterior[l as usize]).sum();
    SoftTargetFrame {
        entries: order
            .into_iter()
            .map(|l| (l, (posterior[l as usize] / kept).min(1.0)))
            .collect(),
    }
}

/// Per-frame features and hard labels of one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceFrames {
    pub feats: Vec<Vec<f64>>,
    pub hard: Vec<u32>,
}

impl UtteranceFrames {
    pub fn len(&self) -> usize {
        self.feats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.feats.is_empty()
    }
}

pub type FrameTable = HashMap<String, UtteranceFrames>;
pub type SoftLabelTable = HashMap<String, Vec<SoftTargetFrame>>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ViewSource {
    Orig,
    Pool(WordOccurrence),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SoftView {
    pub source: ViewSource,
    pub dist: SoftTargetFrame,
}

/// One frame of training data: degraded feature, hard label, soft views.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub utt_id: String,
    pub frame: u32,
    pub feat: Vec<f64>,
    pub hard: u32,
    pub views: Vec<SoftView>,
}

impl TrainingExample {
    pub fn pool_view(&self) -> Option<&SoftView> {
        self.views
            .iter()
            .find(|v| matches!(v.source, ViewSource::Pool(_)))
    }

    /// At least one view, at most one of each source, pool provenance present.
    pub fn views_well_formed(&self) -> bool {
        let orig = self.views.iter().filter(|v| v.source == ViewSource::Orig).count();
        let pool = self.views.len() - orig;
        !self.views.is_empty() && orig <= 1 && pool <= 1
    }
}

/// Drops every pool view, leaving the single-view (original soft label) manifest.
pub fn without_pool_views(manifest: &[TrainingExample]) -> Vec<TrainingExample> {
    manifest
        .iter()
        .map(|ex| TrainingExample {
            views: ex
                .views
                .iter()
                .filter(|v| v.source == ViewSource::Orig)
                .cloned()
                .collect(),
            ..ex.clone()
        })
        .collect()
}

/// Everything the manifest is assembled from, apart from the matches.
pub struct ManifestSources<'a> {
    pub originals: &'a [UtteranceRecord],
    pub original_frames: &'a FrameTable,
    pub original_soft: &'a SoftLabelTable,
    pub pool: &'a [UtteranceRecord],
    pub pool_soft: &'a SoftLabelTable,
    pub stop_list: &'a StopList,
}

/// One example per frame under a non-stop-listed original word, ordered by
/// `(utt_id, frame)`. Frames of matched words gain a pool view read through
/// the match's frame map.
pub fn build_manifest(
    src: &ManifestSources<'_>,
    matches: &MatchReport,
) -> Result<Vec<TrainingExample>, TargetError> {
    let pool_by_id: HashMap<&str, &UtteranceRecord> =
        src.pool.iter().map(|r| (r.utt_id.as_str(), r)).collect();
    let by_original: HashMap<&WordOccurrence, &MatchResult> =
        matches.matches().map(|m| (&m.original, m)).collect();

    let mut order: Vec<&UtteranceRecord> = src.originals.iter().collect();
    order.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));

    let per_utt: Vec<Vec<TrainingExample>> = order
        .par_iter()
        .map(|rec| utterance_examples(src, rec, &pool_by_id, &by_original))
        .collect::<Result<_, _>>()?;
    Ok(per_utt.into_iter().flatten().collect())
}

fn utterance_examples(
    src: &ManifestSources<'_>,
    rec: &UtteranceRecord,
    pool_by_id: &HashMap<&str, &UtteranceRecord>,
    by_original: &HashMap<&WordOccurrence, &MatchResult>,
) -> Result<Vec<TrainingExample>, TargetError> {
    let n = rec.num_frames as usize;
    let frames = src
        .original_frames
        .get(&rec.utt_id)
        .ok_or_else(|| TargetError::MissingFrames(rec.utt_id.clone()))?;
    let soft = src
        .original_soft
        .get(&rec.utt_id)
        .ok_or_else(|| TargetError::MissingSoftLabels(rec.utt_id.clone()))?;
    for (what, found) in [
        ("features", frames.feats.len()),
        ("hard labels", frames.hard.len()),
        ("soft labels", soft.len()),
    ] {
        if found != n {
            return Err(TargetError::FrameCountMismatch {
                utt_id: rec.utt_id.clone(),
                what,
                expected: n,
                found,
            });
        }
    }

    let mut out = Vec::new();
    for (wi, word) in rec.words.iter().enumerate() {
        if src.stop_list.contains(&word.word) {
            continue;
        }
        let key = WordOccurrence::new(rec.utt_id.clone(), wi);
        let pool_source = match by_original.get(&key) {
            Some(m) => Some(pool_frames(src, pool_by_id, m, word.num_frames)?),
            None => None,
        };
        for k in 0..word.num_frames {
            let frame = word.start_frame + k;
            let mut views = vec![SoftView {
                source: ViewSource::Orig,
                dist: soft[frame as usize].clone(),
            }];
            if let Some((selected, pool_soft, start, map)) = &pool_source {
                views.push(SoftView {
                    source: ViewSource::Pool((*selected).clone()),
                    dist: pool_soft[(start + map[k as usize]) as usize].clone(),
                });
            }
            out.push(TrainingExample {
                utt_id: rec.utt_id.clone(),
                frame,
                feat: frames.feats[frame as usize].clone(),
                hard: frames.hard[frame as usize],
                views,
            });
        }
    }
    Ok(out)
}

type PoolFrames<'a> = (&'a WordOccurrence, &'a [SoftTargetFrame], u32, &'a [u32]);

/// Resolves a match to the selected word's soft labels and checks the frame
/// map stays inside the selected word.
fn pool_frames<'a>(
    src: &ManifestSources<'a>,
    pool_by_id: &HashMap<&str, &'a UtteranceRecord>,
    m: &'a MatchResult,
    original_len: u32,
) -> Result<PoolFrames<'a>, TargetError> {
    let selected = &m.selected;
    let word = pool_by_id
        .get(selected.utt_id.as_str())
        .and_then(|r| r.words.get(selected.word_index))
        .ok_or_else(|| TargetError::UnknownPoolWord(selected.clone()))?;
    let soft = src
        .pool_soft
        .get(&selected.utt_id)
        .ok_or_else(|| TargetError::MissingSoftLabels(selected.utt_id.clone()))?;
    let fits = m.frame_map.len() == original_len as usize
        && m.frame_map.iter().all(|&o| o < word.num_frames)
        && (word.end_frame() as usize) <= soft.len();
    if !fits {
        return Err(TargetError::InvalidFrameMap(m.original.clone()));
    }
    Ok((selected, soft.as_slice(), word.start_frame, m.frame_map.as_slice()))
}
