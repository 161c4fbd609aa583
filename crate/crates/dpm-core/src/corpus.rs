//! Synthetic conversational-emotion token corpora.
//!
//! Each dialogue carries a latent emotion chain with configurable inertia
//! (stay-probability). Sentence tokens come from emotion-conditioned
//! categorical distributions: 70% of the mass sits in a band of codebook ids
//! reserved for that emotion, the rest in a shared topic band. A dialogue may
//! additionally carry a trigger motif — a reserved 4-token pattern in its
//! first sentence that deterministically sets the final sentence's emotion
//! label to the dialogue's opening emotion while the final sentence's tokens
//! keep following the latent chain. That construction is what makes the final
//! label unrecoverable from a truncated tail.
//!
//! File format: line-delimited JSON records with a one-line header carrying
//! the schema version, the generator config, and the record count.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DpmError, Result};
use crate::model::Vocabulary;

pub const SCHEMA_VERSION: u32 = 1;
/// Nominal speech-token rate used for bookkeeping (tokens per second).
pub const TOKENS_PER_SECOND: f64 = 25.0;
const MOTIF_LEN: usize = 4;
const IN_BAND_MASS: f64 = 0.7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueSample {
    pub dialogue_id: u64,
    pub seed: u64,
    /// Audio-codebook indices per sentence (not yet vocabulary ids).
    pub sentences: Vec<Vec<u32>>,
    /// Emotion label per sentence, in `[0, E)`.
    pub sentence_emotions: Vec<usize>,
}

impl DialogueSample {
    pub fn num_sentences(&self) -> usize {
        self.sentences.len()
    }

    /// Evaluation target: the final sentence's emotion.
    pub fn final_label(&self) -> usize {
        *self.sentence_emotions.last().expect("nonempty dialogue")
    }

    pub fn token_count(&self) -> usize {
        self.sentences.iter().map(|s| s.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub num_dialogues: usize,
    /// Inclusive range of sentences per dialogue.
    pub sentences_per_dialogue: (usize, usize),
    /// Inclusive range of tokens per sentence.
    pub tokens_per_sentence: (usize, usize),
    pub num_emotions: usize,
    pub codebook_size: usize,
    /// Emotion inertia: probability the latent chain keeps its state.
    pub p_stay: f64,
    /// Probability a dialogue carries the long-range trigger motif.
    pub trigger_strength: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            num_dialogues: 100,
            sentences_per_dialogue: (6, 12),
            tokens_per_sentence: (16, 32),
            num_emotions: 4,
            codebook_size: 256,
            p_stay: 0.85,
            trigger_strength: 1.0,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let (s_lo, s_hi) = self.sentences_per_dialogue;
        let (t_lo, t_hi) = self.tokens_per_sentence;
        if s_lo == 0 || s_lo > s_hi || t_lo == 0 || t_lo > t_hi {
            return Err(DpmError::InvalidConfig(format!(
                "empty range: sentences {s_lo}..={s_hi}, tokens {t_lo}..={t_hi}"
            )));
        }
        if self.num_emotions == 0 {
            return Err(DpmError::InvalidConfig("need at least one emotion".into()));
        }
        if !(self.p_stay > 0.0 && self.p_stay <= 1.0) {
            return Err(DpmError::InvalidConfig(format!(
                "p_stay must lie in (0, 1], got {}",
                self.p_stay
            )));
        }
        if !(0.0..=1.0).contains(&self.trigger_strength) {
            return Err(DpmError::InvalidConfig(format!(
                "trigger_strength must lie in [0, 1], got {}",
                self.trigger_strength
            )));
        }
        if self.trigger_strength > 0.0 && t_lo < MOTIF_LEN {
            return Err(DpmError::InvalidConfig(format!(
                "trigger motifs need sentences of at least {MOTIF_LEN} tokens"
            )));
        }
        band_layout(self.codebook_size, self.num_emotions)?;
        Ok(())
    }
}

/// Partition of the codebook into a shared topic band, per-emotion bands,
/// and reserved motif 4-grams that emission noise never produces.
#[derive(Debug, Clone)]
pub struct BandLayout {
    pub topic: (u32, u32),
    pub bands: Vec<(u32, u32)>,
    pub motifs: Vec<[u32; MOTIF_LEN]>,
}

pub fn band_layout(codebook_size: usize, num_emotions: usize) -> Result<BandLayout> {
    let motif_block = MOTIF_LEN * num_emotions;
    let usable = codebook_size.saturating_sub(motif_block);
    let topic_len = (usable / 6).max(4);
    let band_width = usable.saturating_sub(topic_len) / num_emotions.max(1);
    if band_width < 4 {
        return Err(DpmError::InvalidConfig(format!(
            "codebook of {codebook_size} too small for {num_emotions} disjoint emotion bands"
        )));
    }
    let bands = (0..num_emotions)
        .map(|e| {
            let start = (topic_len + e * band_width) as u32;
            (start, start + band_width as u32)
        })
        .collect();
    let motifs = (0..num_emotions)
        .map(|e| {
            let base = (usable + e * MOTIF_LEN) as u32;
            [base, base + 1, base + 2, base + 3]
        })
        .collect();
    Ok(BandLayout {
        topic: (0, topic_len as u32),
        bands,
        motifs,
    })
}

fn emit_token(layout: &BandLayout, emotion: usize, rng: &mut rand_chacha::ChaCha12Rng) -> u32 {
    let (lo, hi) = if rng.gen::<f64>() < IN_BAND_MASS {
        layout.bands[emotion]
    } else {
        layout.topic
    };
    rng.gen_range(lo..hi)
}

fn generate_dialogue(
    cfg: &GeneratorConfig,
    layout: &BandLayout,
    dialogue_id: u64,
) -> DialogueSample {
    let mut rng = crate::seeded_rng(cfg.seed, dialogue_id);
    let (s_lo, s_hi) = cfg.sentences_per_dialogue;
    let num_sentences = rng.gen_range(s_lo..=s_hi);
    let e = cfg.num_emotions;

    // latent sticky chain
    let mut chain = Vec::with_capacity(num_sentences);
    let first = rng.gen_range(0..e);
    chain.push(first);
    for _ in 1..num_sentences {
        let prev = *chain.last().unwrap();
        let next = if e > 1 && rng.gen::<f64>() >= cfg.p_stay {
            let step = rng.gen_range(1..e);
            (prev + step) % e
        } else {
            prev
        };
        chain.push(next);
    }

    let triggered = cfg.trigger_strength > 0.0 && rng.gen::<f64>() < cfg.trigger_strength;

    // Labels follow the chain; a trigger overrides only the final label.
    let mut labels = chain.clone();
    if triggered {
        labels[num_sentences - 1] = first;
    }

    let (t_lo, t_hi) = cfg.tokens_per_sentence;
    let mut sentences = Vec::with_capacity(num_sentences);
    for (i, &chain_emotion) in chain.iter().enumerate() {
        let len = rng.gen_range(t_lo..=t_hi);
        let mut tokens: Vec<u32> = (0..len)
            .map(|_| emit_token(layout, chain_emotion, &mut rng))
            .collect();
        if triggered && i == 0 {
            tokens[..MOTIF_LEN].copy_from_slice(&layout.motifs[first]);
        }
        sentences.push(tokens);
    }

    DialogueSample {
        dialogue_id,
        seed: cfg.seed,
        sentences,
        sentence_emotions: labels,
    }
}

/// Generate the full corpus. Dialogues use counter-mode split seeds, so the
/// output is a pure function of the config.
pub fn generate_corpus(cfg: &GeneratorConfig) -> Result<Vec<DialogueSample>> {
    cfg.validate()?;
    let layout = band_layout(cfg.codebook_size, cfg.num_emotions)?;
    Ok((0..cfg.num_dialogues as u64)
        .map(|id| generate_dialogue(cfg, &layout, id))
        .collect())
}

/// Token stream after marker insertion, plus the boundary bookkeeping every
/// consumer needs.
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessedSample {
    pub dialogue_id: u64,
    /// Vocabulary ids: per sentence `[tokens.., audio_end, emotion?]`.
    pub tokens: Vec<u32>,
    /// Position of each sentence's audio_end marker.
    pub sentence_ends: Vec<usize>,
    /// Last stream index belonging to each sentence's segment (the emotion
    /// identifier when kept, the audio_end otherwise).
    pub segment_ends: Vec<usize>,
    pub labels: Vec<usize>,
    pub keep_emotion_ids: bool,
}

impl PreprocessedSample {
    pub fn num_sentences(&self) -> usize {
        self.sentence_ends.len()
    }

    pub fn final_label(&self) -> usize {
        *self.labels.last().expect("nonempty sample")
    }

    /// The stream consumed at inference time: everything up to and including
    /// the final audio_end. The final emotion identifier is the prediction
    /// target and never part of the input.
    pub fn inference_tokens(&self) -> &[u32] {
        let last = *self.sentence_ends.last().expect("nonempty sample");
        &self.tokens[..=last]
    }
}

/// Insert `audio_end` after each sentence, followed by its emotion
/// identifier (when `keep_emotion_ids`), mapping codebook indices to
/// vocabulary ids.
pub fn preprocess_sample(
    sample: &DialogueSample,
    vocab: &Vocabulary,
    keep_emotion_ids: bool,
) -> Result<PreprocessedSample> {
    if sample.sentences.is_empty() || sample.sentences.len() != sample.sentence_emotions.len() {
        return Err(DpmError::InvalidConfig(format!(
            "dialogue {} has {} sentences but {} labels",
            sample.dialogue_id,
            sample.sentences.len(),
            sample.sentence_emotions.len()
        )));
    }
    let mut tokens = Vec::new();
    let mut sentence_ends = Vec::new();
    let mut segment_ends = Vec::new();
    for (sentence, &label) in sample.sentences.iter().zip(&sample.sentence_emotions) {
        for &code in sentence {
            if code as usize >= vocab.codebook_size {
                return Err(DpmError::IndexRange {
                    context: "preprocess_sample",
                    index: code as usize,
                    bound: vocab.codebook_size,
                });
            }
            tokens.push(vocab.audio_token(code));
        }
        tokens.push(vocab.audio_end_id());
        sentence_ends.push(tokens.len() - 1);
        if keep_emotion_ids {
            tokens.push(vocab.emotion_id(label)?);
        } else {
            vocab.emotion_id(label)?; // still validates the label range
        }
        segment_ends.push(tokens.len() - 1);
    }
    Ok(PreprocessedSample {
        dialogue_id: sample.dialogue_id,
        tokens,
        sentence_ends,
        segment_ends,
        labels: sample.sentence_emotions.clone(),
        keep_emotion_ids,
    })
}

/// Strip markers back out; inverse of [`preprocess_sample`].
pub fn recover_sentences(pre: &PreprocessedSample, vocab: &Vocabulary) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, &end) in pre.sentence_ends.iter().enumerate() {
        let codes = pre.tokens[start..end]
            .iter()
            .map(|&id| id - vocab.audio_token(0))
            .collect();
        out.push(codes);
        start = pre.segment_ends[i] + 1;
    }
    out
}

/// All sentence prefixes of a dialogue: view k holds the first k sentences
/// and its evaluation target is sentence k's emotion. The full-dialogue
/// setting corresponds to the last view alone.
pub fn make_prefix_views(sample: &DialogueSample) -> Vec<DialogueSample> {
    (1..=sample.num_sentences())
        .map(|k| DialogueSample {
            dialogue_id: sample.dialogue_id,
            seed: sample.seed,
            sentences: sample.sentences[..k].to_vec(),
            sentence_emotions: sample.sentence_emotions[..k].to_vec(),
        })
        .collect()
}

/// Nominal audio seconds represented by a token count at the fixed 25
/// tokens-per-second rate.
pub fn nominal_seconds(token_count: usize) -> f64 {
    token_count as f64 / TOKENS_PER_SECOND
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusHeader {
    schema_version: u32,
    count: usize,
    generator: GeneratorConfig,
}

pub fn write_corpus(
    path: impl AsRef<Path>,
    cfg: &GeneratorConfig,
    samples: &[DialogueSample],
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    let header = CorpusHeader {
        schema_version: SCHEMA_VERSION,
        count: samples.len(),
        generator: cfg.clone(),
    };
    serde_json::to_writer(&mut w, &header)
        .map_err(|e| DpmError::DataFormat { record: None, msg: e.to_string() })?;
    w.write_all(b"\n")?;
    for s in samples {
        serde_json::to_writer(&mut w, s)
            .map_err(|e| DpmError::DataFormat { record: None, msg: e.to_string() })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<(GeneratorConfig, Vec<DialogueSample>)> {
    let reader = BufReader::new(File::open(path.as_ref())?);
    let mut lines = reader.lines();
    let header_line = lines.next().ok_or_else(|| DpmError::DataFormat {
        record: None,
        msg: "empty corpus file".into(),
    })??;
    let header: CorpusHeader =
        serde_json::from_str(&header_line).map_err(|e| DpmError::DataFormat {
            record: None,
            msg: format!("bad header: {e}"),
        })?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(DpmError::DataFormat {
            record: None,
            msg: format!(
                "schema version {} not supported (expected {SCHEMA_VERSION})",
                header.schema_version
            ),
        });
    }
    let mut samples = Vec::with_capacity(header.count);
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: DialogueSample =
            serde_json::from_str(&line).map_err(|e| DpmError::DataFormat {
                record: Some(i + 1),
                msg: e.to_string(),
            })?;
        samples.push(sample);
    }
    if samples.len() != header.count {
        return Err(DpmError::DataFormat {
            record: Some(samples.len()),
            msg: format!(
                "truncated corpus: header declares {} records, found {}",
                header.count,
                samples.len()
            ),
        });
    }
    Ok((header.generator, samples))
}

/// Hex SHA-256 of a corpus file's bytes.
pub fn content_hash(path: impl AsRef<Path>) -> Result<String> {
    let bytes = std::fs::read(path.as_ref())?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub schema_version: u32,
    pub sha256: String,
    pub dialogues: usize,
    pub total_tokens: usize,
    pub nominal_seconds: f64,
}

/// Write the reproducibility sidecar next to a corpus file.
pub fn write_manifest(corpus_path: impl AsRef<Path>, samples: &[DialogueSample]) -> Result<CorpusManifest> {
    let corpus_path = corpus_path.as_ref();
    let total_tokens: usize = samples.iter().map(|s| s.token_count()).sum();
    let manifest = CorpusManifest {
        schema_version: SCHEMA_VERSION,
        sha256: content_hash(corpus_path)?,
        dialogues: samples.len(),
        total_tokens,
        nominal_seconds: nominal_seconds(total_tokens),
    };
    let sidecar = corpus_path.with_extension("manifest.json");
    let mut w = BufWriter::new(File::create(sidecar)?);
    serde_json::to_writer_pretty(&mut w, &manifest)
        .map_err(|e| DpmError::DataFormat { record: None, msg: e.to_string() })?;
    w.flush()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(seed: u64) -> GeneratorConfig {
        GeneratorConfig {
            num_dialogues: 20,
            sentences_per_dialogue: (3, 8),
            tokens_per_sentence: (5, 12),
            num_emotions: 4,
            codebook_size: 256,
            p_stay: 0.8,
            trigger_strength: 0.5,
            seed,
        }
    }

    fn vocab() -> Vocabulary {
        Vocabulary::new(0, 256, 4).unwrap()
    }

    #[test]
    fn absorbing_chain_when_p_stay_is_one() {
        let mut c = cfg(3);
        c.p_stay = 1.0;
        c.trigger_strength = 0.0;
        for s in generate_corpus(&c).unwrap() {
            let first = s.sentence_emotions[0];
            assert!(s.sentence_emotions.iter().all(|&e| e == first));
        }
    }

    #[test]
    fn trigger_sets_final_label_deterministically() {
        let mut c = cfg(9);
        c.trigger_strength = 1.0;
        let corpus = generate_corpus(&c).unwrap();
        let layout = band_layout(c.codebook_size, c.num_emotions).unwrap();
        for s in &corpus {
            let motif = &s.sentences[0][..4];
            let emotion = layout
                .motifs
                .iter()
                .position(|m| m == motif)
                .expect("first sentence starts with a motif");
            assert_eq!(s.final_label(), emotion);
            assert_eq!(s.sentence_emotions[0], emotion);
        }
        // regeneration with the same seed reproduces the construction
        assert_eq!(corpus, generate_corpus(&c).unwrap());
    }

    #[test]
    fn motif_tokens_never_emitted_as_noise() {
        let mut c = cfg(4);
        c.trigger_strength = 0.0;
        c.num_dialogues = 50;
        let layout = band_layout(c.codebook_size, c.num_emotions).unwrap();
        let reserved: Vec<u32> = layout.motifs.iter().flatten().copied().collect();
        for s in generate_corpus(&c).unwrap() {
            for sentence in &s.sentences {
                assert!(sentence.iter().all(|t| !reserved.contains(t)));
            }
        }
    }

    #[test]
    fn monte_carlo_stay_rate_matches_p_stay() {
        let mut c = cfg(7);
        c.p_stay = 0.8;
        c.trigger_strength = 0.0;
        c.num_dialogues = 2000;
        c.sentences_per_dialogue = (6, 8);
        let corpus = generate_corpus(&c).unwrap();
        let mut stays = 0usize;
        let mut transitions = 0usize;
        for s in &corpus {
            for w in s.sentence_emotions.windows(2) {
                transitions += 1;
                if w[0] == w[1] {
                    stays += 1;
                }
            }
        }
        assert!(transitions > 10_000, "need at least 10k transitions");
        let rate = stays as f64 / transitions as f64;
        assert!((0.78..=0.82).contains(&rate), "stay rate {rate}");
    }

    #[test]
    fn class_marginals_near_stationary_distribution() {
        let mut c = cfg(13);
        c.trigger_strength = 0.0;
        c.num_dialogues = 500;
        let corpus = generate_corpus(&c).unwrap();
        let mut counts = vec![0usize; c.num_emotions];
        let mut total = 0usize;
        for s in &corpus {
            for &e in &s.sentence_emotions {
                counts[e] += 1;
                total += 1;
            }
        }
        let stationary = 1.0 / c.num_emotions as f64;
        for (e, &n) in counts.iter().enumerate() {
            let freq = n as f64 / total as f64;
            assert!(
                (freq - stationary).abs() <= stationary * 0.1,
                "class {e} marginal {freq}"
            );
        }
    }

    #[test]
    fn codebook_too_small_for_bands_rejected() {
        let mut c = cfg(0);
        c.codebook_size = 20; // 16 ids eaten by motifs, nothing left for bands
        assert!(generate_corpus(&c).is_err());
    }

    #[test]
    fn preprocess_inserts_one_marker_pair_per_sentence() {
        let sample = DialogueSample {
            dialogue_id: 0,
            seed: 0,
            sentences: vec![vec![1, 2, 3]; 50],
            sentence_emotions: vec![2; 50],
        };
        let pre = preprocess_sample(&sample, &vocab(), true).unwrap();
        let end = vocab().audio_end_id();
        let emo = vocab().emotion_id(2).unwrap();
        assert_eq!(pre.tokens.iter().filter(|&&t| t == end).count(), 50);
        assert_eq!(pre.tokens.iter().filter(|&&t| t == emo).count(), 50);
        assert_eq!(pre.tokens.len(), 50 * 5);
        assert_eq!(pre.sentence_ends.len(), 50);
    }

    #[test]
    fn single_sentence_layout_and_inference_cut() {
        let sample = DialogueSample {
            dialogue_id: 1,
            seed: 0,
            sentences: vec![vec![10, 11, 12]],
            sentence_emotions: vec![1],
        };
        let pre = preprocess_sample(&sample, &vocab(), true).unwrap();
        assert_eq!(pre.tokens.len(), 5); // 3 + audio_end + emotion id
        assert_eq!(pre.sentence_ends, vec![3]);
        assert_eq!(pre.segment_ends, vec![4]);
        // the final emotion identifier is not part of the inference stream
        assert_eq!(pre.inference_tokens().len(), 4);

        let stripped = preprocess_sample(&sample, &vocab(), false).unwrap();
        assert_eq!(stripped.tokens.len(), 4);
        assert_eq!(stripped.segment_ends, vec![3]);
    }

    #[test]
    fn stripping_markers_recovers_sentences() {
        let c = cfg(21);
        for s in generate_corpus(&c).unwrap() {
            for keep in [true, false] {
                let pre = preprocess_sample(&s, &vocab(), keep).unwrap();
                assert_eq!(recover_sentences(&pre, &vocab()), s.sentences);
            }
        }
    }

    #[test]
    fn label_out_of_range_rejected() {
        let sample = DialogueSample {
            dialogue_id: 0,
            seed: 0,
            sentences: vec![vec![1]],
            sentence_emotions: vec![4],
        };
        assert!(preprocess_sample(&sample, &vocab(), true).is_err());
    }

    #[test]
    fn prefix_views_cover_every_length() {
        let c = cfg(31);
        let corpus = generate_corpus(&c).unwrap();
        let single = DialogueSample {
            dialogue_id: 9,
            seed: 0,
            sentences: vec![vec![1, 2]],
            sentence_emotions: vec![0],
        };
        assert_eq!(make_prefix_views(&single), vec![single.clone()]);

        let five = &corpus.iter().find(|s| s.num_sentences() == 5);
        if let Some(s) = five {
            let views = make_prefix_views(s);
            assert_eq!(views.len(), 5);
            for (k, v) in views.iter().enumerate() {
                assert_eq!(v.num_sentences(), k + 1);
                assert_eq!(v.final_label(), s.sentence_emotions[k]);
            }
        }
        // counting oracle over the corpus
        let total_views: usize = corpus.iter().map(|s| make_prefix_views(s).len()).sum();
        let total_sentences: usize = corpus.iter().map(|s| s.num_sentences()).sum();
        assert_eq!(total_views, total_sentences);
    }

    #[test]
    fn corpus_roundtrip_and_content_hash() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(77);
        let corpus = generate_corpus(&c).unwrap();
        let p1 = dir.path().join("a.jsonl");
        let p2 = dir.path().join("b.jsonl");
        write_corpus(&p1, &c, &corpus).unwrap();
        let (rc, rs) = read_corpus(&p1).unwrap();
        assert_eq!(rc, c);
        assert_eq!(rs, corpus);
        write_corpus(&p2, &rc, &rs).unwrap();
        assert_eq!(content_hash(&p1).unwrap(), content_hash(&p2).unwrap());

        let manifest = write_manifest(&p1, &corpus).unwrap();
        assert_eq!(manifest.dialogues, corpus.len());
    }

    #[test]
    fn generator_is_deterministic_across_runs() {
        let c = cfg(123);
        assert_eq!(generate_corpus(&c).unwrap(), generate_corpus(&c).unwrap());
    }

    #[test]
    fn corrupted_final_record_names_its_index() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(5);
        let corpus = generate_corpus(&c).unwrap();
        let p = dir.path().join("c.jsonl");
        write_corpus(&p, &c, &corpus).unwrap();
        let mut text = std::fs::read_to_string(&p).unwrap();
        text.truncate(text.len() - 30); // mangle the last record
        std::fs::write(&p, text).unwrap();
        match read_corpus(&p) {
            Err(DpmError::DataFormat { record: Some(r), .. }) => assert_eq!(r, corpus.len()),
            other => panic!("expected data format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_detected_via_header_count() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(6);
        let corpus = generate_corpus(&c).unwrap();
        let p = dir.path().join("t.jsonl");
        write_corpus(&p, &c, &corpus).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let kept: Vec<&str> = text.lines().take(corpus.len()).collect(); // drop last record
        std::fs::write(&p, kept.join("\n")).unwrap();
        assert!(matches!(
            read_corpus(&p),
            Err(DpmError::DataFormat { record: Some(_), .. })
        ));
    }

    #[test]
    fn schema_version_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.jsonl");
        std::fs::write(&p, "{\"schema_version\":99,\"count\":0,\"generator\":{}}\n").unwrap();
        assert!(read_corpus(&p).is_err());
    }

    #[test]
    fn nominal_seconds_at_25_tokens_per_second() {
        assert_eq!(nominal_seconds(3000), 120.0);
        assert_eq!(nominal_seconds(0), 0.0);
    }
}
