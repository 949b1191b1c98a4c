//! Deterministic synthetic corpora: alignments, per-frame features, hard
//! labels, and a prototype-distance teacher.
//!
//! Frame labels are (phone, HMM state) pairs. Features are the label's
//! prototype plus Gaussian noise; the pool gets the clean noise level, the
//! original corpus the degraded one (plus an optional fixed channel shift the
//! teacher does not know about). A `duration_correlation` fraction of
//! original words get a duration twin in the pool, which sets the matching
//! ratios.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    split_states, Channel, Gender, PhoneAlign, StopList, Style, UtteranceMeta, UtteranceRecord, WordAlign,
};
use crate::distill::LabeledFrame;
use crate::targets::{FrameTable, PosteriorSource, UtteranceFrames};

pub const SILENCE_WORD: &str = "<sil>";
pub const SILENCE_PHONE: &str = "sil";

#[derive(Debug, Error, PartialEq)]
#[error("invalid simulation config: {0}")]
pub struct SimError(String);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub seed: u64,
    pub lexicon_size: usize,
    pub phone_inventory: usize,
    pub states_per_phone: usize,
    /// Mean phone duration in frames.
    pub mean_phone_duration: f64,
    /// Variance-to-mean ratio of the random part of a phone duration; 1 is Poisson.
    pub duration_dispersion: f64,
    /// Upper bound on lexical word occurrences in the pool: `pool_size -
    /// original_size` random filler words plus one twin slot per original word.
    pub pool_size: usize,
    /// Lexical word occurrences in the original corpus.
    pub original_size: usize,
    pub words_per_utterance: usize,
    /// Probability that an original word gets a duration twin in the pool.
    pub duration_correlation: f64,
    /// Probability that a twin's phone durations are perturbed by one frame.
    pub twin_jitter: f64,
    /// Probability that a twin's state split differs from the original's.
    pub twin_state_jitter: f64,
    /// Originals draw from the first half of the lexicon, pool filler from the second.
    pub disjoint_lexicons: bool,
    pub feature_dim: usize,
    pub prototype_scale: f64,
    pub clean_sigma: f64,
    pub degraded_sigma: f64,
    /// Norm of a fixed offset added to every degraded feature.
    pub channel_shift: f64,
    /// Probability that an original frame's hard label is replaced by another label.
    pub hard_label_noise: f64,
    /// Teacher posterior is softmax(-sharpness * squared distance).
    pub teacher_sharpness: f64,
    /// Lexical word occurrences in the held-out evaluation utterances.
    pub eval_size: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        let phone_inventory = 12;
        let states_per_phone = 3;
        Self {
            seed: 42,
            lexicon_size: 4000,
            phone_inventory,
            states_per_phone,
            mean_phone_duration: 7.6,
            duration_dispersion: 1.0,
            pool_size: 10_000,
            original_size: 2_000,
            words_per_utterance: 8,
            duration_correlation: 0.7,
            twin_jitter: 0.0,
            twin_state_jitter: 0.0,
            disjoint_lexicons: false,
            feature_dim: (phone_inventory + 1) * states_per_phone,
            prototype_scale: 1.0,
            clean_sigma: 0.2,
            degraded_sigma: 0.5,
            channel_shift: 0.0,
            hard_label_noise: 0.0,
            teacher_sharpness: 2.0,
            eval_size: 300,
        }
    }
}

impl SimConfig {
    /// Degraded, label-noisy originals against a clean pool; small enough to
    /// train several students in seconds.
    pub fn mismatch_task(seed: u64) -> Self {
        Self {
            seed,
            original_size: 1000,
            pool_size: 5000,
            degraded_sigma: 0.4,
            hard_label_noise: 0.4,
            ..Self::default()
        }
    }

    /// Twins that often differ from their original by one frame, which puts
    /// the word-level matching ratio near 0.65 and phone level near 0.5.
    pub fn jittered_twins(seed: u64) -> Self {
        Self {
            seed,
            duration_correlation: 0.7,
            twin_jitter: 0.3,
            twin_state_jitter: 0.2,
            ..Self::default()
        }
    }

    /// Labels: one per (phone, state), including the silence phone.
    pub fn num_labels(&self) -> usize {
        (self.phone_inventory + 1) * self.states_per_phone
    }

    pub fn silence_label(&self) -> u32 {
        (self.phone_inventory * self.states_per_phone + self.states_per_phone / 2) as u32
    }

    pub fn stop_list(&self) -> StopList {
        StopList::new([SILENCE_WORD])
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let fail = |m: String| Err(SimError(m));
        for (name, v) in [
            ("lexicon_size", self.lexicon_size),
            ("phone_inventory", self.phone_inventory),
            ("states_per_phone", self.states_per_phone),
            ("pool_size", self.pool_size),
            ("original_size", self.original_size),
            ("words_per_utterance", self.words_per_utterance),
            ("feature_dim", self.feature_dim),
            ("eval_size", self.eval_size),
        ] {
            if v == 0 {
                return fail(format!("{name} must be >= 1"));
            }
        }
        if self.pool_size < self.original_size {
            return fail("pool_size must be >= original_size".into());
        }
        if self.disjoint_lexicons && self.lexicon_size < 2 {
            return fail("disjoint lexicons need at least 2 words".into());
        }
        if !(self.mean_phone_duration >= self.states_per_phone as f64) {
            return fail(format!(
                "mean phone duration {} below one frame per state",
                self.mean_phone_duration
            ));
        }
        if !(self.duration_dispersion >= 1.0 && self.duration_dispersion.is_finite()) {
            return fail("duration_dispersion must be >= 1".into());
        }
        for (name, p) in [
            ("duration_correlation", self.duration_correlation),
            ("twin_jitter", self.twin_jitter),
            ("twin_state_jitter", self.twin_state_jitter),
            ("hard_label_noise", self.hard_label_noise),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} must lie in [0, 1]"));
            }
        }
        for (name, s) in [
            ("clean_sigma", self.clean_sigma),
            ("degraded_sigma", self.degraded_sigma),
            ("prototype_scale", self.prototype_scale),
            ("teacher_sharpness", self.teacher_sharpness),
        ] {
            if !(s > 0.0 && s.is_finite()) {
                return fail(format!("{name} must be > 0"));
            }
        }
        if self.degraded_sigma <= self.clean_sigma {
            return fail("degraded_sigma must exceed clean_sigma".into());
        }
        if !(self.channel_shift >= 0.0 && self.channel_shift.is_finite()) {
            return fail("channel_shift must be >= 0".into());
        }
        if self.feature_dim < self.num_labels() {
            return fail(format!(
                "feature_dim {} smaller than label count {}",
                self.feature_dim,
                self.num_labels()
            ));
        }
        Ok(())
    }
}

/// Prototype of `label`: `prototype_scale` along coordinate `label`.
pub fn prototype(cfg: &SimConfig, label: u32) -> Vec<f64> {
    let mut v = vec![0.0; cfg.feature_dim];
    v[label as usize] = cfg.prototype_scale;
    v
}

/// Stands in for a teacher trained on clean data.
#[derive(Clone, Debug)]
pub struct SynthTeacher {
    prototypes: Vec<Vec<f64>>,
    sharpness: f64,
}

impl PosteriorSource for SynthTeacher {
    fn num_labels(&self) -> usize {
        self.prototypes.len()
    }

    fn posterior(&self, feat: &[f64]) -> Vec<f64> {
        let scores: Vec<f64> = self
            .prototypes
            .iter()
            .map(|mu| -self.sharpness * mu.iter().zip(feat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .collect();
        crate::distill::softmax(&scores)
    }
}

pub fn synth_teacher(cfg: &SimConfig) -> SynthTeacher {
    SynthTeacher {
        prototypes: (0..cfg.num_labels() as u32).map(|l| prototype(cfg, l)).collect(),
        sharpness: cfg.teacher_sharpness,
    }
}

/// Everything a generated scenario provides.
#[derive(Clone, Debug, PartialEq)]
pub struct SimCorpus {
    pub originals: Vec<UtteranceRecord>,
    pub pool: Vec<UtteranceRecord>,
    /// Degraded features and (possibly noisy) hard labels.
    pub original_frames: FrameTable,
    /// Clean features and true labels.
    pub pool_frames: FrameTable,
    /// Held-out degraded frames under lexical words, with true labels.
    pub eval_frames: Vec<LabeledFrame>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy)]
enum Stream {
    Lexicon = 1,
    Originals,
    Twins,
    Filler,
    PoolLayout,
    OriginalFeatures,
    PoolFeatures,
    Eval,
    EvalFeatures,
    Channel,
}

/// Independent generator per (seed, stream, index).
fn rng_for(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let s = splitmix64(seed ^ splitmix64(((stream as u64) << 48) ^ index));
    ChaCha8Rng::seed_from_u64(s)
}

/// A word before it is placed in an utterance: lexicon entry and per-phone state durations.
#[derive(Clone, Debug)]
struct WordSpec {
    word: usize,
    states: Vec<Vec<u32>>,
}

struct Lexicon {
    pronunciations: Vec<Vec<usize>>,
}

impl Lexicon {
    fn generate(cfg: &SimConfig) -> Self {
        let mut rng = rng_for(cfg.seed, Stream::Lexicon, 0);
        let pronunciations = (0..cfg.lexicon_size)
            .map(|_| {
                let n = rng.random_range(2..=6);
                (0..n).map(|_| rng.random_range(0..cfg.phone_inventory)).collect()
            })
            .collect();
        Self { pronunciations }
    }
}

fn word_name(i: usize) -> String {
    format!("w{i:04}")
}

fn phone_name(i: usize) -> String {
    format!("ph{i:02}")
}

/// Phone durations: `states + X` with `E[X] = mean - states`; X is Poisson, or
/// gamma-mixed Poisson when dispersion exceeds 1.
struct DurationSampler {
    states: u32,
    rate: f64,
    gamma: Option<Gamma<f64>>,
}

impl DurationSampler {
    fn new(cfg: &SimConfig) -> Self {
        let rate = cfg.mean_phone_duration - cfg.states_per_phone as f64;
        let gamma = (cfg.duration_dispersion > 1.0 && rate > 0.0).then(|| {
            let shape = rate / (cfg.duration_dispersion - 1.0);
            Gamma::new(shape, rate / shape).expect("positive gamma parameters")
        });
        Self {
            states: cfg.states_per_phone as u32,
            rate,
            gamma,
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> u32 {
        let lambda = match &self.gamma {
            Some(g) => g.sample(rng),
            None => self.rate,
        };
        let extra = if lambda > 0.0 {
            Poisson::new(lambda).map_or(0.0, |p| p.sample(rng))
        } else {
            0.0
        };
        self.states + extra as u32
    }
}

fn random_word<R: Rng>(
    rng: &mut R,
    lex: &Lexicon,
    words: std::ops::Range<usize>,
    durations: &DurationSampler,
    spp: usize,
) -> WordSpec {
    let word = rng.random_range(words);
    let states = lex.pronunciations[word]
        .iter()
        .map(|_| split_states(durations.sample(rng), spp).expect("duration >= states"))
        .collect();
    WordSpec { word, states }
}

fn original_words(cfg: &SimConfig) -> std::ops::Range<usize> {
    if cfg.disjoint_lexicons {
        0..cfg.lexicon_size / 2
    } else {
        0..cfg.lexicon_size
    }
}

fn filler_words(cfg: &SimConfig) -> std::ops::Range<usize> {
    if cfg.disjoint_lexicons {
        cfg.lexicon_size / 2..cfg.lexicon_size
    } else {
        0..cfg.lexicon_size
    }
}

/// Copies `spec`, then optionally perturbs phone or state durations.
fn make_twin<R: Rng>(rng: &mut R, spec: &WordSpec, cfg: &SimConfig) -> WordSpec {
    let spp = cfg.states_per_phone;
    let mut twin = spec.clone();
    if rng.random::<f64>() < cfg.twin_jitter {
        let durs: Vec<u32> = twin.states.iter().map(|s| s.iter().sum()).collect();
        let mut durs2 = durs.clone();
        let n = durs.len();
        let i = rng.random_range(0..n);
        let preserve_total = rng.random::<bool>() && n >= 2;
        if preserve_total {
            // move a frame from phone i to another phone
            let j = (i + rng.random_range(1..n)) % n;
            let (donor, receiver) = if durs[i] > spp as u32 { (i, j) } else { (j, i) };
            if durs2[donor] > spp as u32 {
                durs2[donor] -= 1;
                durs2[receiver] += 1;
            }
        } else if rng.random::<bool>() || durs[i] <= spp as u32 {
            durs2[i] += 1;
        } else {
            durs2[i] -= 1;
        }
        for (k, (&a, &b)) in durs.iter().zip(&durs2).enumerate() {
            if a != b {
                twin.states[k] = split_states(b, spp).expect("duration >= states");
            }
        }
    }
    if rng.random::<f64>() < cfg.twin_state_jitter {
        let candidates: Vec<usize> = (0..twin.states.len())
            .filter(|&k| twin.states[k].iter().any(|&d| d >= 2) && spp >= 2)
            .collect();
        if let Some(&k) = candidates.choose(rng) {
            let states = &mut twin.states[k];
            let from = *(0..spp).filter(|&s| states[s] >= 2).collect::<Vec<_>>().choose(rng).expect("nonempty");
            let to = (from + rng.random_range(1..spp)) % spp;
            states[from] -= 1;
            states[to] += 1;
        }
    }
    twin
}

fn silence(cfg: &SimConfig, durations: &DurationSampler, rng: &mut ChaCha8Rng, start: u32) -> WordAlign {
    let states = split_states(durations.sample(rng), cfg.states_per_phone).expect("duration >= states");
    WordAlign::new(SILENCE_WORD, start, vec![PhoneAlign::new(SILENCE_PHONE, states)])
}

/// Lays words out as `<sil> w1 ... wn` followed by 0-5 unaligned frames.
fn layout(
    cfg: &SimConfig,
    lex: &Lexicon,
    durations: &DurationSampler,
    rng: &mut ChaCha8Rng,
    utt_id: String,
    speaker_id: String,
    meta: UtteranceMeta,
    specs: &[WordSpec],
) -> UtteranceRecord {
    let mut words = vec![silence(cfg, durations, rng, 0)];
    let mut frame = words[0].end_frame();
    for spec in specs {
        let phones = lex.pronunciations[spec.word]
            .iter()
            .zip(&spec.states)
            .map(|(&p, s)| PhoneAlign::new(phone_name(p), s.clone()))
            .collect();
        let w = WordAlign::new(word_name(spec.word), frame, phones);
        frame = w.end_frame();
        words.push(w);
    }
    let gap = rng.random_range(0..=5);
    UtteranceRecord {
        utt_id,
        speaker_id,
        meta,
        num_frames: frame + gap,
        words,
    }
}

fn original_meta(rng: &mut ChaCha8Rng) -> UtteranceMeta {
    UtteranceMeta {
        gender: if rng.random() { Gender::Female } else { Gender::Male },
        channel: *[Channel::Far, Channel::Telephone, Channel::Close].choose(rng).expect("nonempty"),
        style: Style::Spontaneous,
        domain_tag: "interview".into(),
    }
}

fn pool_meta(rng: &mut ChaCha8Rng) -> UtteranceMeta {
    UtteranceMeta {
        gender: if rng.random() { Gender::Female } else { Gender::Male },
        channel: Channel::Close,
        style: Style::Read,
        domain_tag: "news".into(),
    }
}

/// Per-frame labels: (phone, state) inside words, silence elsewhere.
pub fn frame_labels(cfg: &SimConfig, rec: &UtteranceRecord) -> Vec<u32> {
    let spp = cfg.states_per_phone;
    let mut labels = vec![cfg.silence_label(); rec.num_frames as usize];
    for w in &rec.words {
        let mut f = w.start_frame as usize;
        for p in &w.phones {
            let phone = if p.phone == SILENCE_PHONE {
                cfg.phone_inventory
            } else {
                p.phone[2..].parse::<usize>().unwrap_or(0)
            };
            for (s, &d) in p.state_durations.iter().enumerate() {
                for _ in 0..d {
                    labels[f] = (phone * spp + s) as u32;
                    f += 1;
                }
            }
        }
    }
    labels
}

fn channel_vector(cfg: &SimConfig) -> Vec<f64> {
    if cfg.channel_shift == 0.0 {
        return vec![0.0; cfg.feature_dim];
    }
    let mut rng = rng_for(cfg.seed, Stream::Channel, 0);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let v: Vec<f64> = (0..cfg.feature_dim).map(|_| normal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter()
        .map(|x| x / norm * cfg.channel_shift * cfg.prototype_scale)
        .collect()
}

struct FeatureSpec<'a> {
    sigma: f64,
    offset: &'a [f64],
    label_noise: f64,
}

/// Features (prototype + offset + noise) and hard labels for one utterance.
fn frames_for(cfg: &SimConfig, rec: &UtteranceRecord, spec: &FeatureSpec<'_>, mut rng: ChaCha8Rng) -> (UtteranceFrames, Vec<u32>) {
    let truth = frame_labels(cfg, rec);
    let noise = Normal::new(0.0, spec.sigma).expect("positive sigma");
    let n_labels = cfg.num_labels() as u32;
    let mut feats = Vec::with_capacity(truth.len());
    let mut hard = Vec::with_capacity(truth.len());
    for &label in &truth {
        let mut f = prototype(cfg, label);
        for (x, o) in f.iter_mut().zip(spec.offset) {
            *x += o + noise.sample(&mut rng);
        }
        feats.push(f);
        let flip = rng.random::<f64>() < spec.label_noise;
        hard.push(if flip {
            (label + rng.random_range(1..n_labels)) % n_labels
        } else {
            label
        });
    }
    (UtteranceFrames { feats, hard }, truth)
}

/// Generates originals, pool, their frames, and a held-out evaluation set.
pub fn gen_corpus(cfg: &SimConfig) -> Result<SimCorpus, SimError> {
    cfg.validate()?;
    let lex = Lexicon::generate(cfg);
    let durations = DurationSampler::new(cfg);
    let spp = cfg.states_per_phone;
    let wpu = cfg.words_per_utterance;

    let utterances = |prefix: &str, speakers: &str, total: usize, stream: Stream, words: std::ops::Range<usize>| {
        let n_utts = total.div_ceil(wpu);
        (0..n_utts)
            .map(|u| {
                let mut rng = rng_for(cfg.seed, stream, u as u64);
                let n = wpu.min(total - u * wpu);
                let specs: Vec<WordSpec> = (0..n)
                    .map(|_| random_word(&mut rng, &lex, words.clone(), &durations, spp))
                    .collect();
                let meta = original_meta(&mut rng);
                let speaker = format!("{speakers}{:03}", rng.random_range(0..50));
                let rec = layout(cfg, &lex, &durations, &mut rng, format!("{prefix}{u:06}"), speaker, meta, &specs);
                (rec, specs)
            })
            .collect::<Vec<_>>()
    };

    let originals_with_specs = utterances("orig-", "spk-o", cfg.original_size, Stream::Originals, original_words(cfg));

    // twins are decided per original word and fillers do not depend on the
    // twin count, so raising duration_correlation only ever adds pool words
    let mut pool_specs: Vec<WordSpec> = Vec::with_capacity(cfg.pool_size);
    let mut rng = rng_for(cfg.seed, Stream::Filler, 0);
    for _ in 0..cfg.pool_size - cfg.original_size {
        pool_specs.push(random_word(&mut rng, &lex, filler_words(cfg), &durations, spp));
    }
    for (w, spec) in originals_with_specs.iter().flat_map(|(_, s)| s).enumerate() {
        let mut rng = rng_for(cfg.seed, Stream::Twins, w as u64);
        if rng.random::<f64>() < cfg.duration_correlation {
            pool_specs.push(make_twin(&mut rng, spec, cfg));
        }
    }
    let mut rng = rng_for(cfg.seed, Stream::PoolLayout, 0);
    pool_specs.shuffle(&mut rng);
    let pool: Vec<UtteranceRecord> = pool_specs
        .chunks(wpu)
        .enumerate()
        .map(|(u, specs)| {
            let meta = pool_meta(&mut rng);
            let speaker = format!("spk-q{:03}", rng.random_range(0..50));
            layout(cfg, &lex, &durations, &mut rng, format!("pool-{u:06}"), speaker, meta, specs)
        })
        .collect();
    let originals: Vec<UtteranceRecord> = originals_with_specs.into_iter().map(|(r, _)| r).collect();

    let channel = channel_vector(cfg);
    let degraded = FeatureSpec {
        sigma: cfg.degraded_sigma,
        offset: &channel,
        label_noise: cfg.hard_label_noise,
    };
    let zero = vec![0.0; cfg.feature_dim];
    let clean = FeatureSpec {
        sigma: cfg.clean_sigma,
        offset: &zero,
        label_noise: 0.0,
    };
    let original_frames: FrameTable = originals
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let (frames, _) = frames_for(cfg, r, &degraded, rng_for(cfg.seed, Stream::OriginalFeatures, i as u64));
            (r.utt_id.clone(), frames)
        })
        .collect();
    let pool_frames: FrameTable = pool
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let (frames, _) = frames_for(cfg, r, &clean, rng_for(cfg.seed, Stream::PoolFeatures, i as u64));
            (r.utt_id.clone(), frames)
        })
        .collect();

    let eval_utts = utterances("eval-", "spk-e", cfg.eval_size, Stream::Eval, original_words(cfg));
    let eval_frames: Vec<LabeledFrame> = eval_utts
        .par_iter()
        .enumerate()
        .map(|(i, (r, _))| {
            let (frames, truth) = frames_for(cfg, r, &degraded, rng_for(cfg.seed, Stream::EvalFeatures, i as u64));
            r.words
                .iter()
                .filter(|w| w.word != SILENCE_WORD)
                .flat_map(|w| w.start_frame as usize..w.end_frame() as usize)
                .map(|f| LabeledFrame {
                    feat: frames.feats[f].clone(),
                    label: truth[f],
                })
                .collect::<Vec<_>>()
        })
        .flatten()
        .collect();

    Ok(SimCorpus {
        originals,
        pool,
        original_frames,
        pool_frames,
        eval_frames,
    })
}
