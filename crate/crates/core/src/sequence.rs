//! The interleaved text/speech format, its unified vocabulary, and prompt
//! builders.
//!
//! Flattened grammar, one id per position:
//!
//! ```text
//! sequence := segment* open?
//! segment  := SPK TEXT+ EOT FRAME* EOA
//! open     := SPK TEXT+ EOT
//! ```
//!
//! `SPK` is one of `[S1]..[S5]` and `FRAME` is the layer-1 code of one
//! token frame, with all of its layers carried alongside.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{MAX_SPEAKERS, N_TEXT_TOKENS};
use crate::error::{Error, Result};
use crate::rvq::TokenGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenKind {
    Text(u16),
    Speaker(u8),
    Bos,
    Eot,
    Eoa,
    Pad,
    Audio(u16),
}

/// Id layout: text, speaker tags, BOS/EOT/EOA/PAD, then layer-1 codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub n_text: usize,
    pub n_speakers: usize,
    pub n_audio: usize,
    pub n_layers: usize,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new(2048, 16)
    }
}

impl Vocab {
    pub fn new(n_audio: usize, n_layers: usize) -> Self {
        Self {
            n_text: N_TEXT_TOKENS,
            n_speakers: MAX_SPEAKERS as usize,
            n_audio,
            n_layers,
        }
    }

    fn control_base(&self) -> u32 {
        (self.n_text + self.n_speakers) as u32
    }

    pub fn audio_base(&self) -> u32 {
        self.control_base() + 4
    }

    pub fn size(&self) -> usize {
        self.audio_base() as usize + self.n_audio
    }

    pub fn text(&self, t: u16) -> u32 {
        debug_assert!((t as usize) < self.n_text);
        t as u32
    }

    pub fn speaker(&self, k: u8) -> Result<u32> {
        if k == 0 || k as usize > self.n_speakers {
            return Err(Error::invalid(format!("speaker tag [S{k}] outside [S1]..[S{}]", self.n_speakers)));
        }
        Ok(self.n_text as u32 + k as u32 - 1)
    }

    pub fn bos(&self) -> u32 {
        self.control_base()
    }

    pub fn eot(&self) -> u32 {
        self.control_base() + 1
    }

    pub fn eoa(&self) -> u32 {
        self.control_base() + 2
    }

    pub fn pad(&self) -> u32 {
        self.control_base() + 3
    }

    pub fn audio(&self, code: u16) -> u32 {
        debug_assert!((code as usize) < self.n_audio);
        self.audio_base() + code as u32
    }

    pub fn is_audio(&self, id: u32) -> bool {
        id >= self.audio_base() && (id as usize) < self.size()
    }

    pub fn kind(&self, id: u32) -> Result<TokenKind> {
        let i = id as usize;
        let c = self.control_base() as usize;
        Ok(if i < self.n_text {
            TokenKind::Text(i as u16)
        } else if i < c {
            TokenKind::Speaker((i - self.n_text + 1) as u8)
        } else if i == c {
            TokenKind::Bos
        } else if i == c + 1 {
            TokenKind::Eot
        } else if i == c + 2 {
            TokenKind::Eoa
        } else if i == c + 3 {
            TokenKind::Pad
        } else if i < self.size() {
            TokenKind::Audio((i - c - 4) as u16)
        } else {
            return Err(Error::invalid(format!("id {id} outside a vocabulary of {}", self.size())));
        })
    }

    pub fn id(&self, kind: TokenKind) -> Result<u32> {
        Ok(match kind {
            TokenKind::Text(t) if (t as usize) < self.n_text => self.text(t),
            TokenKind::Speaker(k) => self.speaker(k)?,
            TokenKind::Bos => self.bos(),
            TokenKind::Eot => self.eot(),
            TokenKind::Eoa => self.eoa(),
            TokenKind::Pad => self.pad(),
            TokenKind::Audio(c) if (c as usize) < self.n_audio => self.audio(c),
            other => return Err(Error::invalid(format!("{other:?} is outside the vocabulary"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub speaker: u8,
    pub text: Vec<u16>,
    /// `None` for a turn whose audio is still to be generated.
    pub audio: Option<TokenGrid>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InterleavedSequence {
    pub segments: Vec<Segment>,
}

/// Backbone ids plus, at audio positions, the full frame of codes.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Flattened {
    pub ids: Vec<u32>,
    pub frames: Vec<Option<Vec<u16>>>,
}

impl Flattened {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn push(&mut self, id: u32, frame: Option<Vec<u16>>) {
        self.ids.push(id);
        self.frames.push(frame);
    }

    pub fn extend(&mut self, other: &Flattened) {
        self.ids.extend_from_slice(&other.ids);
        self.frames.extend(other.frames.iter().cloned());
    }
}

fn check_segment(s: &Segment, v: &Vocab) -> Result<()> {
    v.speaker(s.speaker)?;
    if s.text.is_empty() {
        return Err(Error::invalid("segment with empty text"));
    }
    if let Some(t) = s.text.iter().find(|t| **t as usize >= v.n_text) {
        return Err(Error::invalid(format!("text token {t} out of range")));
    }
    if let Some(g) = &s.audio {
        if g.n_layers != v.n_layers {
            return Err(Error::invalid(format!("segment audio has {} layers, expected {}", g.n_layers, v.n_layers)));
        }
        if g.n_entries > v.n_audio {
            return Err(Error::invalid(format!("segment audio has {} entries, vocabulary {}", g.n_entries, v.n_audio)));
        }
    }
    Ok(())
}

impl Segment {
    pub fn flatten_into(&self, v: &Vocab, out: &mut Flattened) -> Result<()> {
        check_segment(self, v)?;
        out.push(v.speaker(self.speaker)?, None);
        for t in &self.text {
            out.push(v.text(*t), None);
        }
        out.push(v.eot(), None);
        if let Some(g) = &self.audio {
            for f in 0..g.n_frames {
                out.push(v.audio(g.get(f, 0)), Some(g.frame(f).to_vec()));
            }
            out.push(v.eoa(), None);
        }
        Ok(())
    }

    pub fn flat_len(&self) -> usize {
        2 + self.text.len() + self.audio.as_ref().map_or(0, |g| g.n_frames + 1)
    }
}

impl InterleavedSequence {
    pub fn new(segments: Vec<Segment>) -> Self {
        Self { segments }
    }

    pub fn n_audio_segments(&self) -> usize {
        self.segments.iter().filter(|s| s.audio.is_some()).count()
    }

    pub fn flat_len(&self) -> usize {
        self.segments.iter().map(Segment::flat_len).sum()
    }
}

/// Flattens `seq`. Only the last segment may lack audio.
pub fn flatten(seq: &InterleavedSequence, v: &Vocab) -> Result<Flattened> {
    let mut out = Flattened::default();
    let n = seq.segments.len();
    for (i, s) in seq.segments.iter().enumerate() {
        if s.audio.is_none() && i + 1 != n {
            return Err(Error::invalid(format!("segment {i} has no audio but is not the last")));
        }
        s.flatten_into(v, &mut out)?;
    }
    Ok(out)
}

/// Inverse of [`flatten`]; pattern errors report the offending position.
pub fn unflatten(ids: &[u32], frames: &[Option<Vec<u16>>], v: &Vocab) -> Result<InterleavedSequence> {
    if ids.len() != frames.len() {
        return Err(Error::invalid(format!("{} ids but {} frame slots", ids.len(), frames.len())));
    }
    let err = |pos: usize, msg: &str| Error::Pattern { pos, msg: msg.to_string() };
    let mut segments = vec![];
    let mut pos = 0;
    while pos < ids.len() {
        let speaker = match v.kind(ids[pos]) {
            Ok(TokenKind::Speaker(k)) => k,
            _ => return Err(err(pos, "expected a speaker tag")),
        };
        pos += 1;
        let mut text = vec![];
        while pos < ids.len() {
            match v.kind(ids[pos]) {
                Ok(TokenKind::Text(t)) => text.push(t),
                Ok(TokenKind::Eot) => break,
                _ => return Err(err(pos, "expected text or EOT")),
            }
            pos += 1;
        }
        if text.is_empty() {
            return Err(err(pos, "segment has no text"));
        }
        if pos == ids.len() {
            return Err(err(pos, "missing EOT"));
        }
        pos += 1;
        if pos == ids.len() {
            segments.push(Segment { speaker, text, audio: None });
            break;
        }
        let mut grid = TokenGrid::empty(v.n_layers, v.n_audio);
        loop {
            if pos == ids.len() {
                return Err(err(pos, "missing EOA"));
            }
            match v.kind(ids[pos]) {
                Ok(TokenKind::Audio(c)) => {
                    let frame = frames[pos].as_ref().ok_or_else(|| err(pos, "audio position without a frame"))?;
                    if frame.len() != v.n_layers || frame[0] != c || frame.iter().any(|x| *x as usize >= v.n_audio) {
                        return Err(err(pos, "frame does not match its audio id"));
                    }
                    grid.push_frame(frame);
                }
                Ok(TokenKind::Eoa) => break,
                _ => return Err(err(pos, "expected an audio frame or EOA")),
            }
            pos += 1;
        }
        pos += 1;
        segments.push(Segment {
            speaker,
            text,
            audio: Some(grid),
        });
    }
    if let Some(p) = frames.iter().zip(ids).position(|(f, id)| f.is_some() && !v.is_audio(*id)) {
        return Err(err(p, "frame attached to a non-audio position"));
    }
    Ok(InterleavedSequence { segments })
}

/// A single-speaker prompt `[S1] prompt_text target_text EOT prompt_frames`
/// left open for generation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CloningPrompt {
    pub flat: Flattened,
    pub text: Vec<u16>,
    pub prompt_audio: TokenGrid,
    /// Frames to drop from the front of the generated grid.
    pub prompt_frames: usize,
}

pub fn build_cloning_prompt(prompt_text: &[u16], target_text: &[u16], prompt_audio: &TokenGrid, v: &Vocab) -> Result<CloningPrompt> {
    if target_text.is_empty() {
        return Err(Error::invalid("empty target text"));
    }
    if prompt_text.is_empty() {
        return Err(Error::invalid("empty prompt text"));
    }
    if prompt_audio.n_frames == 0 {
        return Err(Error::invalid("empty prompt audio"));
    }
    let text: Vec<u16> = prompt_text.iter().chain(target_text).copied().collect();
    let seg = Segment {
        speaker: 1,
        text: text.clone(),
        audio: Some(prompt_audio.clone()),
    };
    let mut flat = Flattened::default();
    seg.flatten_into(v, &mut flat)?;
    flat.ids.pop();
    flat.frames.pop();
    Ok(CloningPrompt {
        flat,
        text,
        prompt_audio: prompt_audio.clone(),
        prompt_frames: prompt_audio.n_frames,
    })
}

/// Two finished turns of context and the turns to generate one by one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PodcastPlan {
    pub context: InterleavedSequence,
    pub steps: Vec<(u8, Vec<u16>)>,
}

pub fn build_podcast_prompt(history: &[Segment], next_turns: &[(u8, Vec<u16>)], v: &Vocab) -> Result<PodcastPlan> {
    if history.len() != 2 {
        return Err(Error::invalid(format!("podcast prompts take 2 history turns, got {}", history.len())));
    }
    for (i, s) in history.iter().enumerate() {
        if s.audio.as_ref().is_none_or(|g| g.n_frames == 0) {
            return Err(Error::invalid(format!("history turn {i} has no audio")));
        }
        check_segment(s, v)?;
    }
    for (k, text) in next_turns {
        check_segment(
            &Segment {
                speaker: *k,
                text: text.clone(),
                audio: None,
            },
            v,
        )?;
    }
    Ok(PodcastPlan {
        context: InterleavedSequence::new(history.to_vec()),
        steps: next_turns.to_vec(),
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SegmentRecord {
    speaker: u8,
    text_ids: Vec<u16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    codes: Option<Vec<Vec<u16>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    token_grid_path: Option<String>,
}

/// One JSON record per segment. Codes are written inline; on reading, a
/// `token_grid_path` relative to the file is accepted instead.
pub fn write_sequence_file(seq: &InterleavedSequence, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for s in &seq.segments {
        let rec = SegmentRecord {
            speaker: s.speaker,
            text_ids: s.text.clone(),
            codes: s.audio.as_ref().map(|g| (0..g.n_frames).map(|t| g.frame(t).to_vec()).collect()),
            token_grid_path: None,
        };
        let line = serde_json::to_string(&rec).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_sequence_file(path: &Path, v: &Vocab) -> Result<InterleavedSequence> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut segments = vec![];
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let rec: SegmentRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let audio = match (rec.codes, rec.token_grid_path) {
            (Some(rows), _) => {
                let n = rows.len();
                if rows.iter().any(|r| r.len() != v.n_layers) {
                    return Err(bad(format!("frames must have {} codes", v.n_layers)));
                }
                Some(TokenGrid::new(n, v.n_layers, v.n_audio, rows.concat()).map_err(|e| bad(e.to_string()))?)
            }
            (None, Some(p)) => {
                let p = path.parent().unwrap_or(Path::new(".")).join(p);
                Some(TokenGrid::load(&p)?)
            }
            (None, None) => None,
        };
        let seg = Segment {
            speaker: rec.speaker,
            text: rec.text_ids,
            audio,
        };
        check_segment(&seg, v).map_err(|e| bad(e.to_string()))?;
        segments.push(seg);
    }
    Ok(InterleavedSequence { segments })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(frames: &[[u16; 2]]) -> TokenGrid {
        TokenGrid::new(frames.len(), 2, 8, frames.concat()).unwrap()
    }

    fn vocab() -> Vocab {
        Vocab::new(8, 2)
    }

    #[test]
    fn vocabulary_is_a_bijection() {
        let v = Vocab::default();
        assert_eq!(v.size(), 64 + 5 + 4 + 2048);
        for id in 0..v.size() as u32 {
            assert_eq!(v.id(v.kind(id).unwrap()).unwrap(), id);
        }
        assert!(v.kind(v.size() as u32).is_err());
    }

    #[test]
    fn eight_position_example() {
        let v = vocab();
        let seq = InterleavedSequence::new(vec![Segment {
            speaker: 1,
            text: vec![3, 9],
            audio: Some(grid(&[[1, 2], [3, 4], [5, 6]])),
        }]);
        let f = flatten(&seq, &v).unwrap();
        let want = vec![v.speaker(1).unwrap(), 3, 9, v.eot(), v.audio(1), v.audio(3), v.audio(5), v.eoa()];
        assert_eq!(f.ids, want);
        assert_eq!(f.frames[5], Some(vec![3, 4]));
        assert_eq!(unflatten(&f.ids, &f.frames, &v).unwrap(), seq);
    }

    #[test]
    fn rejects_bad_segments_and_patterns() {
        let v = vocab();
        let bad_tag = InterleavedSequence::new(vec![Segment {
            speaker: 6,
            text: vec![1],
            audio: None,
        }]);
        assert!(flatten(&bad_tag, &v).is_err());
        let empty = InterleavedSequence::new(vec![Segment {
            speaker: 1,
            text: vec![],
            audio: None,
        }]);
        assert!(flatten(&empty, &v).is_err());
        // audio frame before EOT
        let ids = vec![v.speaker(1).unwrap(), 2, v.audio(1), v.eot(), v.eoa()];
        let frames = vec![None, None, Some(vec![1, 0]), None, None];
        match unflatten(&ids, &frames, &v) {
            Err(Error::Pattern { pos, .. }) => assert_eq!(pos, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn cloning_prompt_layout() {
        let v = vocab();
        let p = build_cloning_prompt(&[1, 2], &[3, 4, 5], &grid(&[[0, 0]; 5]), &v).unwrap();
        assert_eq!(p.flat.len(), 12);
        assert_eq!(p.prompt_frames, 5);
        assert_eq!(*p.flat.ids.last().unwrap(), v.audio(0));
        assert!(build_cloning_prompt(&[1], &[2], &TokenGrid::empty(2, 8), &v).is_err());
        assert!(build_cloning_prompt(&[1], &[], &grid(&[[0, 0]]), &v).is_err());
    }

    #[test]
    fn podcast_plans() {
        let v = vocab();
        let turn = |k| Segment {
            speaker: k,
            text: vec![1],
            audio: Some(grid(&[[1, 1]])),
        };
        let next: Vec<(u8, Vec<u16>)> = (1..=4).map(|k| (k, vec![k as u16])).collect();
        let plan = build_podcast_prompt(&[turn(1), turn(2)], &next, &v).unwrap();
        assert_eq!(plan.steps.len(), 4);
        assert!(build_podcast_prompt(&[turn(1), turn(2)], &[], &v).unwrap().steps.is_empty());
        let mut silent = turn(2);
        silent.audio = None;
        assert!(build_podcast_prompt(&[turn(1), silent], &next, &v).is_err());
        assert!(build_podcast_prompt(&[turn(1)], &next, &v).is_err());
    }

    #[test]
    fn sequence_file_round_trip() {
        let v = vocab();
        let dir = tempfile::tempdir().unwrap();
        let seq = InterleavedSequence::new(vec![
            Segment {
                speaker: 2,
                text: vec![1, 2],
                audio: Some(grid(&[[1, 2], [7, 0]])),
            },
            Segment {
                speaker: 1,
                text: vec![5],
                audio: None,
            },
        ]);
        let p = dir.path().join("s.jsonl");
        write_sequence_file(&seq, &p).unwrap();
        assert_eq!(read_sequence_file(&p, &v).unwrap(), seq);

        let gp = dir.path().join("g.bin");
        grid(&[[3, 3]]).save(&gp).unwrap();
        std::fs::write(&p, "{\"speaker\":1,\"text_ids\":[4],\"token_grid_path\":\"g.bin\"}\n").unwrap();
        assert_eq!(read_sequence_file(&p, &v).unwrap().segments[0].audio, Some(grid(&[[3, 3]])));
    }
}
