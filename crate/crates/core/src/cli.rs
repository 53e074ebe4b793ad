use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use duotts::audio::{read_wav, write_wav, AudioSignal};
use duotts::config::{CorpusKind, RunConfig};
use duotts::corpus::{gen_dialogue, gen_monologue, read_dialogue_manifest, read_manifest, write_dialogue_manifest, write_manifest, N_TEXT_TOKENS};
use duotts::engine::{benchmark_latency, clone_voice, encode_turns, run_podcast, ScheduleMode};
use duotts::eval::{intelligibility, roundtrip};
use duotts::model::{train, DualModel, ModelConfig, SamplingConfig, Stage, Subsample};
use duotts::oracle::{decode_text, identify_speaker, token_accuracy};
use duotts::rvq::TokenGrid;
use duotts::sequence::{build_podcast_prompt, InterleavedSequence};
use duotts::tokenizer::{train_stage1, train_stage2, TokenizerConfig, TokenizerModel};

/// Speech tokenizer and dual-transformer dialogue TTS at desk scale.
///
/// Settings come from built-in defaults, then `--config`, then flags.
/// Every output carries a stamp (sha256 of the resolved config, plus the
/// seed). Wall-clock numbers go to a separate timing.json so the other
/// artifacts can be compared byte for byte.
#[derive(Debug, Parser)]
#[command(name = "duotts", version)]
struct Cli {
    /// TOML run config. Unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed; copied into every component seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Synthetic corpora.
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Speech tokenizer training and coding.
    #[command(subcommand)]
    Tokenizer(TokCmd),
    /// Dual-transformer training and synthesis.
    #[command(subcommand)]
    Tts(TtsCmd),
    #[command(subcommand)]
    Bench(BenchCmd),
    #[command(subcommand)]
    Eval(EvalCmd),
}

#[derive(Debug, Subcommand)]
enum CorpusCmd {
    /// Render a corpus and write manifest.jsonl plus wav/.
    Gen {
        #[arg(long, value_enum)]
        kind: Option<CorpusKind>,
        /// Utterances, or dialogues for --kind dialogue.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        speakers: Option<u8>,
        #[arg(long)]
        min_turns: Option<usize>,
        #[arg(long)]
        max_turns: Option<usize>,
        #[arg(long)]
        max_tokens: Option<usize>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum TokCmd {
    /// Stage 1 trains everything; stage 2 retrains the decoder for
    /// streaming with the encoder and codebooks frozen.
    Train {
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Stage-1 checkpoint, needed for stage 2.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// WAV to token grid.
    Encode {
        #[arg(long)]
        tokenizer: Option<PathBuf>,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Token grid to WAV.
    Decode {
        #[arg(long)]
        tokenizer: Option<PathBuf>,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
enum TtsCmd {
    /// One curriculum stage. Monologue manifests feed pretrain, dialogue
    /// manifests feed posttrain and sft.
    Train {
        #[arg(long, value_enum)]
        stage: Option<Stage>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        tokenizer: Option<PathBuf>,
        /// Checkpoint to continue from.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        /// Which frames get decoder loss: 1/8 of segments or of frames.
        #[arg(long, value_enum)]
        decoder_subsample: Option<Subsample>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Speak --text in the voice of --prompt-wav.
    Clone {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        tokenizer: Option<PathBuf>,
        #[arg(long)]
        prompt_wav: PathBuf,
        /// Text tokens of the prompt, e.g. "3,17,40".
        #[arg(long)]
        prompt_text: String,
        #[arg(long)]
        text: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        synth: SynthFlags,
    },
    /// Continue a manifest dialogue from its first two turns.
    Dialogue {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        tokenizer: Option<PathBuf>,
        /// Dialogue manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Index of the dialogue in the manifest.
        #[arg(long, default_value_t = 0)]
        dialogue: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        synth: SynthFlags,
    },
}

#[derive(Debug, Args)]
struct SynthFlags {
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    top_k: Option<usize>,
    /// Argmax decoding.
    #[arg(long)]
    greedy: bool,
    #[arg(long)]
    max_frames: Option<usize>,
    /// Decode audio chunk by chunk while generating.
    #[arg(long)]
    stream: bool,
    #[arg(long)]
    chunk_frames: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum BenchCmd {
    /// Steps before the first audio packet, on an untrained model.
    Latency {
        #[arg(long, value_enum, default_value = "dual")]
        mode: ScheduleMode,
        #[arg(long, default_value_t = 16)]
        layers: usize,
        #[arg(long, default_value_t = 4)]
        frames: usize,
        /// JSON report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum EvalCmd {
    /// Encode and decode every manifest utterance, score with the oracle.
    /// Without --tokenizer an untrained one is built from the config.
    Roundtrip {
        #[arg(long)]
        tokenizer: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Matched-filter oracle on one WAV.
    Intelligibility {
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long)]
        speaker: u8,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses, runs, and maps the outcome to 0 (ok), 1 (runtime) or 2 (usage).
pub fn main<I: IntoIterator<Item = OsString>>(argv: I) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            1
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match cli.cmd {
        Cmd::Corpus(c) => corpus_cmd(cfg, c),
        Cmd::Tokenizer(c) => tok_cmd(cfg, c),
        Cmd::Tts(c) => tts_cmd(cfg, c),
        Cmd::Bench(c) => bench_cmd(cfg, c),
        Cmd::Eval(c) => eval_cmd(cfg, c),
    }
}

fn pick(flag: Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| anyhow!("no {what} path: pass --{what} or set paths.{what}"))
}

fn parse_text(s: &str) -> Result<Vec<u16>> {
    let ids = s
        .split([',', ' '])
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<u16>().with_context(|| format!("bad text token {t:?}")))
        .collect::<Result<Vec<_>>>()?;
    if let Some(t) = ids.iter().find(|t| **t as usize >= N_TEXT_TOKENS) {
        bail!("text token {t} out of range 0..{N_TEXT_TOKENS}");
    }
    Ok(ids)
}

fn json_line<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("serialisable")
}

/// Directory outputs: stamp.json, config.toml and timing.json.
struct OutDir {
    dir: PathBuf,
    started: Instant,
}

impl OutDir {
    fn create(dir: PathBuf, cfg: &RunConfig) -> Result<Self> {
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        cfg.stamp().write(&dir)?;
        fs::write(dir.join("config.toml"), cfg.to_toml())?;
        Ok(Self {
            dir,
            started: Instant::now(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write_lines<T: Serialize>(&self, name: &str, rows: &[T]) -> Result<()> {
        let mut text = String::new();
        for r in rows {
            text.push_str(&json_line(r));
            text.push('\n');
        }
        fs::write(self.path(name), text)?;
        Ok(())
    }

    fn finish(self) -> Result<()> {
        let t = serde_json::json!({ "wall_seconds": self.started.elapsed().as_secs_f64() });
        fs::write(self.path("timing.json"), t.to_string() + "\n")?;
        println!("wrote {}", self.dir.display());
        Ok(())
    }
}

/// Single-file outputs get `<file>.stamp.json` beside them.
fn stamp_beside(cfg: &RunConfig, file: &Path) -> Result<()> {
    let mut name = file.as_os_str().to_owned();
    name.push(".stamp.json");
    fs::write(PathBuf::from(name), serde_json::to_string_pretty(&cfg.stamp())? + "\n")?;
    Ok(())
}

fn report<T: Serialize>(cfg: &RunConfig, value: &T, out: Option<&Path>) -> Result<()> {
    let doc = serde_json::json!({ "stamp": cfg.stamp(), "report": value });
    let text = serde_json::to_string_pretty(&doc)? + "\n";
    match out {
        Some(p) => fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn load_tokenizer(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<TokenizerModel> {
    let p = pick(flag, &cfg.paths.tokenizer, "tokenizer")?;
    TokenizerModel::load(&p).with_context(|| format!("loading tokenizer {}", p.display()))
}

fn load_model(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<DualModel> {
    let p = pick(flag, &cfg.paths.model, "model")?;
    DualModel::load(&p).with_context(|| format!("loading model {}", p.display()))
}

fn corpus_cmd(mut cfg: RunConfig, c: CorpusCmd) -> Result<()> {
    let CorpusCmd::Gen {
        kind,
        n,
        speakers,
        min_turns,
        max_turns,
        max_tokens,
        out,
    } = c;
    let cc = &mut cfg.corpus;
    cc.kind = kind.unwrap_or(cc.kind);
    cc.n = n.unwrap_or(cc.n);
    cc.n_speakers = speakers.unwrap_or(cc.n_speakers);
    cc.min_turns = min_turns.unwrap_or(cc.min_turns);
    cc.max_turns = max_turns.unwrap_or(cc.max_turns);
    cc.max_tokens = max_tokens.unwrap_or(cc.max_tokens);
    if cc.n == 0 || cc.max_tokens == 0 {
        bail!("corpus needs n >= 1 and max_tokens >= 1");
    }
    cfg.propagate_seed();
    let out = OutDir::create(pick(out, &cfg.paths.out, "out")?, &cfg)?;
    let cc = &cfg.corpus;
    match cc.kind {
        CorpusKind::Monologue => write_manifest(&gen_monologue(cfg.seed, cc.n, cc.max_tokens), &out.path("manifest.jsonl"))?,
        CorpusKind::Dialogue => {
            let d = gen_dialogue(cfg.seed, cc.n, cc.n_speakers, (cc.min_turns, cc.max_turns), cc.max_tokens)?;
            write_dialogue_manifest(&d, &out.path("manifest.jsonl"))?
        }
    }
    out.finish()
}

fn tok_cmd(mut cfg: RunConfig, c: TokCmd) -> Result<()> {
    match c {
        TokCmd::Train {
            stage,
            manifest,
            init,
            steps,
            out,
        } => {
            if let Some(s) = steps {
                if stage == 1 {
                    cfg.tokenizer_train.steps = s;
                } else {
                    cfg.tokenizer_stage2.steps = s;
                }
            }
            cfg.propagate_seed();
            let utts = read_manifest(&pick(manifest, &cfg.paths.manifest, "manifest")?)?;
            let audio: Vec<AudioSignal> = utts.into_iter().map(|u| u.audio).collect();
            let s1 = match (stage, &init) {
                (1, Some(_)) => bail!("--init is only used by stage 2"),
                (1, None) => None,
                (_, Some(p)) => Some(TokenizerModel::load(p).with_context(|| format!("loading {}", p.display()))?),
                (_, None) => bail!("stage 2 needs --init <stage-1 checkpoint>"),
            };
            let out = OutDir::create(pick(out, &cfg.paths.out, "out")?, &cfg)?;
            let (m, log) = match s1 {
                None => train_stage1(&audio, &cfg.tokenizer, &cfg.tokenizer_train)?,
                Some(s1) => {
                    let mut tc = cfg.tokenizer_train.clone();
                    tc.steps = cfg.tokenizer_stage2.steps;
                    train_stage2(&s1, &audio, &tc)?
                }
            };
            m.save(&out.path("tokenizer.ckpt"))?;
            out.write_lines("train_log.jsonl", &log)?;
            out.finish()
        }
        TokCmd::Encode { tokenizer, input, out } => {
            let tok = load_tokenizer(tokenizer, &cfg)?;
            let g = tok.encode(&read_wav(&input)?)?;
            g.save(&out)?;
            stamp_beside(&cfg, &out)?;
            println!("{} frames x {} layers -> {}", g.n_frames, g.n_layers, out.display());
            Ok(())
        }
        TokCmd::Decode { tokenizer, input, out } => {
            let tok = load_tokenizer(tokenizer, &cfg)?;
            let g = TokenGrid::load(&input)?;
            let a = tok.decode(&g, tok.samples_for(g.n_frames))?;
            write_wav(&out, &a)?;
            stamp_beside(&cfg, &out)?;
            println!("{} samples -> {}", a.len(), out.display());
            Ok(())
        }
    }
}

/// A manifest whose ids are all dialogue-turn ids is read as dialogues.
fn load_sequences(path: &Path, tok: &TokenizerModel) -> Result<Vec<InterleavedSequence>> {
    let utts = read_manifest(path)?;
    let dialogue = !utts.is_empty() && utts.iter().all(|u| u.id.starts_with('d') && u.id.contains("_t"));
    if dialogue {
        let ds = read_dialogue_manifest(path)?;
        Ok(ds.iter().map(|d| encode_turns(tok, &d.turns, false)).collect::<duotts::error::Result<_>>()?)
    } else {
        Ok(utts
            .iter()
            .map(|u| encode_turns(tok, std::slice::from_ref(u), true))
            .collect::<duotts::error::Result<_>>()?)
    }
}

fn apply_synth(cfg: &mut RunConfig, f: &SynthFlags) {
    let e = &mut cfg.engine;
    if f.greedy {
        e.sampling = SamplingConfig::greedy();
    }
    if let Some(t) = f.temperature {
        e.sampling.temperature = t;
    }
    if let Some(k) = f.top_k {
        e.sampling.top_k = k;
    }
    e.max_frames = f.max_frames.unwrap_or(e.max_frames);
    e.stream |= f.stream;
    e.chunk_frames = f.chunk_frames.unwrap_or(e.chunk_frames);
}

#[derive(Serialize)]
struct TurnRecord {
    turn: usize,
    speaker: u8,
    text: Vec<u16>,
    frames: usize,
    samples: usize,
    truncated: bool,
    wav: String,
    oracle_text: Vec<u16>,
    oracle_token_accuracy: f64,
    oracle_speaker: Option<u8>,
}

fn tts_cmd(mut cfg: RunConfig, c: TtsCmd) -> Result<()> {
    match c {
        TtsCmd::Train {
            stage,
            manifest,
            tokenizer,
            init,
            steps,
            decoder_subsample,
            out,
        } => {
            cfg.stage = stage.unwrap_or(cfg.stage);
            cfg.train.steps = steps.unwrap_or(cfg.train.steps);
            cfg.train.subsample = decoder_subsample.unwrap_or(cfg.train.subsample);
            cfg.propagate_seed();
            let tok = load_tokenizer(tokenizer, &cfg)?;
            let mut m = match &init {
                Some(p) => DualModel::load(p).with_context(|| format!("loading {}", p.display()))?,
                None => DualModel::new(&cfg.model, cfg.seed)?,
            };
            if m.cfg.n_layers != tok.cfg.n_layers || m.cfg.n_entries != tok.cfg.n_entries {
                bail!("model and tokenizer disagree on codebook shape");
            }
            let data = load_sequences(&pick(manifest, &cfg.paths.manifest, "manifest")?, &tok)?;
            let out = OutDir::create(pick(out, &cfg.paths.out, "out")?, &cfg)?;
            let log = train(&mut m, &data, cfg.stage, &cfg.train)?;
            m.save(&out.path("model.ckpt"))?;
            out.write_lines("train_log.jsonl", &log)?;
            out.finish()
        }
        TtsCmd::Clone {
            model,
            tokenizer,
            prompt_wav,
            prompt_text,
            text,
            out,
            synth,
        } => {
            apply_synth(&mut cfg, &synth);
            cfg.propagate_seed();
            let (m, tok) = (load_model(model, &cfg)?, load_tokenizer(tokenizer, &cfg)?);
            let r = clone_voice(&m, &tok, &read_wav(&prompt_wav)?, &parse_text(&prompt_text)?, &parse_text(&text)?, &cfg.engine)?;
            write_wav(&out, &r.audio)?;
            stamp_beside(&cfg, &out)?;
            println!(
                "{} frames, {} samples{} -> {}",
                r.grid.n_frames,
                r.audio.len(),
                if r.truncated { " (truncated)" } else { "" },
                out.display()
            );
            Ok(())
        }
        TtsCmd::Dialogue {
            model,
            tokenizer,
            manifest,
            dialogue,
            out,
            synth,
        } => {
            apply_synth(&mut cfg, &synth);
            cfg.propagate_seed();
            let (m, tok) = (load_model(model, &cfg)?, load_tokenizer(tokenizer, &cfg)?);
            let ds = read_dialogue_manifest(&pick(manifest, &cfg.paths.manifest, "manifest")?)?;
            let d = ds.get(dialogue).ok_or_else(|| anyhow!("dialogue {dialogue} not in manifest ({} dialogues)", ds.len()))?;
            if d.turns.len() < 3 {
                bail!("dialogue {dialogue} has {} turns; two are prompt, at least one must remain", d.turns.len());
            }
            let seq = encode_turns(&tok, &d.turns, false)?;
            let next: Vec<(u8, Vec<u16>)> = seq.segments[2..].iter().map(|s| (s.speaker, s.text.clone())).collect();
            let plan = build_podcast_prompt(&seq.segments[..2], &next, &m.vocab())?;
            let out = OutDir::create(pick(out, &cfg.paths.out, "out")?, &cfg)?;
            let results = run_podcast(&m, &tok, &plan, &cfg.engine)?;
            let mut rows = Vec::new();
            for (i, r) in results.iter().enumerate() {
                let turn = i + 2;
                let wav = format!("turn_{turn:02}_s{}.wav", r.speaker);
                write_wav(&out.path(&wav), &r.audio)?;
                let oracle_text = decode_text(&r.audio);
                rows.push(TurnRecord {
                    turn,
                    speaker: r.speaker,
                    oracle_token_accuracy: token_accuracy(&oracle_text, &r.text),
                    text: r.text.clone(),
                    frames: r.grid.n_frames,
                    samples: r.audio.len(),
                    truncated: r.truncated,
                    wav,
                    oracle_text,
                    oracle_speaker: identify_speaker(&r.audio),
                });
            }
            out.write_lines("turns.jsonl", &rows)?;
            out.finish()
        }
    }
}

fn bench_cmd(mut cfg: RunConfig, c: BenchCmd) -> Result<()> {
    let BenchCmd::Latency {
        mode,
        layers,
        frames,
        out,
    } = c;
    cfg.propagate_seed();
    let mc = ModelConfig {
        n_layers: layers,
        ..cfg.model.clone()
    };
    let model = DualModel::new(&mc, cfg.seed)?;
    let mut tok = TokenizerModel::new(
        &TokenizerConfig {
            n_layers: layers,
            n_entries: mc.n_entries,
            ..cfg.tokenizer.clone()
        },
        cfg.seed,
    )?;
    tok.set_streaming();
    let (r, _) = benchmark_latency(&model, &tok, mode, layers, &[1, 2, 3], frames)?;
    println!(
        "first packet: backbone={} decoder={}",
        r.first_packet_steps_backbone, r.first_packet_steps_decoder
    );
    println!("per frame: backbone={} decoder={}", r.backbone_steps_per_frame, r.decoder_steps_per_frame);
    println!("wall: {:.2} ms first packet, {:.1} frames/s", r.first_packet_wall_ms, r.frames_per_second);
    if let Some(p) = out {
        report(&cfg, &r, Some(&p))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct IntelligibilityReport {
    oracle_text: Vec<u16>,
    token_accuracy: f64,
    speaker_correct: bool,
}

fn eval_cmd(mut cfg: RunConfig, c: EvalCmd) -> Result<()> {
    cfg.propagate_seed();
    match c {
        EvalCmd::Roundtrip { tokenizer, manifest, out } => {
            let tok = match tokenizer.or_else(|| cfg.paths.tokenizer.clone()) {
                Some(p) => TokenizerModel::load(&p).with_context(|| format!("loading tokenizer {}", p.display()))?,
                None => TokenizerModel::new(&cfg.tokenizer, cfg.seed)?,
            };
            let utts = read_manifest(&pick(manifest, &cfg.paths.manifest, "manifest")?)?;
            let r = roundtrip(&tok, &utts)?;
            report(&cfg, &r, out.as_deref())
        }
        EvalCmd::Intelligibility { wav, text, speaker, out } => {
            let audio = read_wav(&wav)?;
            let i = intelligibility(&audio, &parse_text(&text)?, speaker);
            let r = IntelligibilityReport {
                oracle_text: decode_text(&audio),
                token_accuracy: i.token_accuracy,
                speaker_correct: i.speaker_correct,
            };
            report(&cfg, &r, out.as_deref())
        }
    }
}
