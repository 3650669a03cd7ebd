//! Command line front end.
//!
//! Every command reads `key = value` settings from an optional `--config`
//! file, then `--set key=value` overrides, then its dedicated flags, in that
//! order; later values win. Keys a command does not know are rejected.
//! Relative paths are taken relative to the working directory.

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::audio::{load_wav_canonical, save_wav, spectral_denoise, Waveform};
use crate::checkpoint::{load_codec, save_codec};
use crate::codec::{codebook_usage, finetune_decoder, pretrain_codec, reconstruction_l1, CodecConfig, FinetuneConfig, Level, PretrainConfig};
use crate::data::{load_manifest, load_motion, load_visual_features, save_json, synth_toy_dataset, DatasetManifest, Split, ToyConfig};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_run, AudioEmbedder, MelStatsEmbedder, RandomEmbedder, DEFAULT_TOLERANCE};
use crate::model::{MotionRepr, VisualFeatureSequence};
use crate::training::{clip_visual, generate_music, load_split_clips, load_train_set, parse_kv, train_level, Checkpoint, TrainConfig, TrainSinks, TRAIN_KEYS};

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "D2M_OUT_ROOT";

#[derive(Debug, Parser)]
#[command(name = "d2m", version, about = "Dance-to-music generation: codec pretraining, training, generation and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// File of `key = value` lines; `#` starts a comment.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one setting; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Output directory [default: $D2M_OUT_ROOT/<command>, else runs/<command>].
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize the toy corpus (audio/, motion/, visual/, manifests/).
    ///
    /// Keys: genres, clips, clip_seconds, clips_per_song, ratios (three
    /// comma-separated fractions), seed.
    MakeToyData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        genres: Option<usize>,
        #[arg(long)]
        clips: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pretrain one codec level on train-split audio.
    ///
    /// Keys: manifest, level (high|low), channels, codebook_size, steps,
    /// batch_size, crop_samples, lr, commitment, ema_decay, dead_code_steps,
    /// init_clips, seed.
    PretrainCodec {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        level: Option<String>,
    },
    /// Fine-tune the codec decoder (unless no_finetune) and train one level.
    ///
    /// Keys: manifest, codec, and the training keys: level, clip_seconds,
    /// batch_size, g_lr, d_lr, beta1, beta2, grad_clip, finetune_lr,
    /// finetune_steps, max_steps, seed, lambda_fm, lambda_code, lambda_wav,
    /// lambda_mel, sigma, width_div, disc_width_div, motion
    /// (keypoints2d|smpl), wave_crop_seconds, random_offsets, log_tail.
    /// Ablations: no_motion, no_visual, d_layers (1-3), no_scaling,
    /// no_reshape, no_finetune, disable_fm, disable_code, disable_wav,
    /// disable_mel.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        codec: Option<PathBuf>,
        #[arg(long)]
        level: Option<String>,
    },
    /// Generate music for manifest clips or for one motion file.
    ///
    /// Keys: checkpoint, codec, manifest, split, clip (comma-separated ids),
    /// motion, motion_repr, visual, denoise.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        codec: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        motion: Option<PathBuf>,
        #[arg(long)]
        visual: Option<PathBuf>,
        #[arg(long)]
        denoise: bool,
    },
    /// Score generated music: beat coverage, beat hit and genre accuracy.
    ///
    /// Keys: checkpoint, codec, manifest, split, tolerance, embedder
    /// (mel-stats|random), embed_seed, denoise.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        codec: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        tolerance: Option<f64>,
        #[arg(long)]
        embedder: Option<String>,
        #[arg(long)]
        denoise: bool,
    },
    /// Spectral noise reduction of a wav file.
    ///
    /// Keys: input.
    Denoise {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::MakeToyData { .. } => "make-toy-data",
            Command::PretrainCodec { .. } => "pretrain-codec",
            Command::Train { .. } => "train",
            Command::Generate { .. } => "generate",
            Command::Evaluate { .. } => "evaluate",
            Command::Denoise { .. } => "denoise",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::MakeToyData { common, .. }
            | Command::PretrainCodec { common, .. }
            | Command::Train { common, .. }
            | Command::Generate { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Denoise { common, .. } => common,
        }
    }

    fn keys(&self) -> Vec<&'static str> {
        match self {
            Command::MakeToyData { .. } => vec!["genres", "clips", "clip_seconds", "clips_per_song", "ratios", "seed"],
            Command::PretrainCodec { .. } => vec![
                "manifest",
                "level",
                "channels",
                "codebook_size",
                "steps",
                "batch_size",
                "crop_samples",
                "lr",
                "commitment",
                "ema_decay",
                "dead_code_steps",
                "init_clips",
                "seed",
            ],
            Command::Train { .. } => {
                let mut k = vec!["manifest", "codec"];
                k.extend_from_slice(TRAIN_KEYS);
                k
            }
            Command::Generate { .. } => vec![
                "checkpoint",
                "codec",
                "manifest",
                "split",
                "clip",
                "motion",
                "motion_repr",
                "visual",
                "denoise",
            ],
            Command::Evaluate { .. } => vec![
                "checkpoint",
                "codec",
                "manifest",
                "split",
                "tolerance",
                "embedder",
                "embed_seed",
                "denoise",
            ],
            Command::Denoise { .. } => vec!["input"],
        }
    }

    fn flag_settings(&self) -> Vec<(&'static str, String)> {
        let mut v: Vec<(&'static str, String)> = Vec::new();
        let mut put = |k: &'static str, x: Option<String>| {
            if let Some(x) = x {
                v.push((k, x));
            }
        };
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let flag = |b: bool| b.then(|| "true".to_string());
        match self {
            Command::MakeToyData { genres, clips, seed, .. } => {
                put("genres", genres.map(|x| x.to_string()));
                put("clips", clips.map(|x| x.to_string()));
                put("seed", seed.map(|x| x.to_string()));
            }
            Command::PretrainCodec { manifest, level, .. } => {
                put("manifest", path(manifest));
                put("level", level.clone());
            }
            Command::Train { manifest, codec, level, .. } => {
                put("manifest", path(manifest));
                put("codec", path(codec));
                put("level", level.clone());
            }
            Command::Generate {
                checkpoint,
                codec,
                manifest,
                split,
                motion,
                visual,
                denoise,
                ..
            } => {
                put("checkpoint", path(checkpoint));
                put("codec", path(codec));
                put("manifest", path(manifest));
                put("split", split.clone());
                put("motion", path(motion));
                put("visual", path(visual));
                put("denoise", flag(*denoise));
            }
            Command::Evaluate {
                checkpoint,
                codec,
                manifest,
                split,
                tolerance,
                embedder,
                denoise,
                ..
            } => {
                put("checkpoint", path(checkpoint));
                put("codec", path(codec));
                put("manifest", path(manifest));
                put("split", split.clone());
                put("tolerance", tolerance.map(|x| x.to_string()));
                put("embedder", embedder.clone());
                put("denoise", flag(*denoise));
            }
            Command::Denoise { input, .. } => put("input", path(input)),
        }
        v
    }
}

/// Ordered settings of one invocation; later entries win.
#[derive(Debug, Clone, Default)]
pub struct Settings {
    pairs: Vec<(String, String)>,
}

impl Settings {
    fn push(&mut self, key: &str, value: &str) {
        self.pairs.retain(|(k, _)| k != key);
        self.pairs.push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.pairs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::Config(format!("missing setting {key:?}")))
    }

    fn path(&self, key: &str) -> Result<PathBuf> {
        self.require(key).map(PathBuf::from)
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key)
            .map(|v| v.parse().map_err(|_| Error::Config(format!("bad value {v:?} for {key}"))))
            .transpose()
    }

    fn flag(&self, key: &str) -> Result<bool> {
        Ok(self.parse::<bool>(key)?.unwrap_or(false))
    }

    fn echo(&self, command: &str) -> String {
        let mut s = format!("# d2m {command}\n");
        for (k, v) in &self.pairs {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }
}

/// Collects settings from the config file, overrides and flags of `cmd`,
/// rejecting unknown keys.
pub fn collect_settings(cmd: &Command) -> Result<Settings> {
    let common = cmd.common();
    let mut s = Settings::default();
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (k, v) in parse_kv(&text)? {
            s.push(&k, &v);
        }
    }
    for o in &common.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
        s.push(k.trim(), v.trim());
    }
    for (k, v) in cmd.flag_settings() {
        s.push(k, &v);
    }
    let known = cmd.keys();
    if let Some((k, _)) = s.pairs.iter().find(|(k, _)| !known.contains(&k.as_str())) {
        return Err(Error::Config(format!("unknown key {k:?} for {}", cmd.name())));
    }
    Ok(s)
}

fn out_dir(cmd: &Command) -> PathBuf {
    if let Some(o) = &cmd.common().out {
        return o.clone();
    }
    let root = std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
    root.join(cmd.name())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn open_log(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?))
}

/// Parses `args` (program name first) and runs the command; returns the
/// process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{e}");
            e.exit_code()
        }
    }
}

/// Executes one command; artifacts go under its output directory.
pub fn run(cmd: &Command) -> Result<()> {
    let settings = collect_settings(cmd)?;
    let out = out_dir(cmd);
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    log::info!("{} -> {}", cmd.name(), out.display());
    match cmd {
        Command::MakeToyData { .. } => make_toy_data(&settings, &out),
        Command::PretrainCodec { .. } => pretrain(&settings, &out),
        Command::Train { .. } => train(&settings, &out),
        Command::Generate { .. } => generate(&settings, &out),
        Command::Evaluate { .. } => evaluate(&settings, &out),
        Command::Denoise { .. } => denoise(&settings, &out),
    }
}

fn make_toy_data(s: &Settings, out: &Path) -> Result<()> {
    let genres = s.parse("genres")?.unwrap_or(2);
    let clips = s.parse("clips")?.unwrap_or(40);
    let mut cfg = ToyConfig::preset(genres, clips)?;
    if let Some(v) = s.parse("clip_seconds")? {
        cfg.clip_seconds = v;
    }
    if let Some(v) = s.parse("clips_per_song")? {
        cfg.clips_per_song = v;
    }
    if let Some(v) = s.parse("seed")? {
        cfg.seed = v;
    }
    if let Some(r) = s.get("ratios") {
        let parts: Vec<f64> = r
            .split(',')
            .map(|p| p.trim().parse().map_err(|_| Error::Config(format!("bad ratios {r:?}"))))
            .collect::<Result<_>>()?;
        cfg.ratios = parts
            .try_into()
            .map_err(|_| Error::Config(format!("ratios needs three values, got {r:?}")))?;
    }
    write_text(&out.join("config.txt"), &s.echo("make-toy-data"))?;
    save_json(&out.join("toy_config.json"), &cfg)?;
    let m = synth_toy_dataset(&cfg, out)?;
    log::info!(
        "wrote {} train, {} val, {} test clips to {}",
        m.train.len(),
        m.val.len(),
        m.test.len(),
        out.join("manifests/manifest.json").display()
    );
    Ok(())
}

fn manifest_clip_config(m: &DatasetManifest) -> TrainConfig {
    TrainConfig {
        clip_seconds: m.clip_seconds,
        ..TrainConfig::default()
    }
}

fn split_audio(m: &DatasetManifest, split: Split) -> Result<Vec<Waveform>> {
    let (_, clips) = load_split_clips(m, split, &manifest_clip_config(m))?;
    Ok(clips.into_iter().map(|c| c.audio).collect())
}

#[derive(Serialize)]
struct PretrainStep {
    step: usize,
    reconstruction: f64,
    commitment: f64,
}

#[derive(Serialize)]
struct PretrainReport {
    level: Level,
    steps: usize,
    codebook_resets: usize,
    val_reconstruction_l1: Option<f64>,
    val_codebook_usage: Option<f64>,
    checkpoint: String,
    checkpoint_sha256: String,
}

fn pretrain(s: &Settings, out: &Path) -> Result<()> {
    let manifest = load_manifest(&s.path("manifest")?)?;
    let mut codec_cfg = CodecConfig::new(s.parse("level")?.unwrap_or(Level::High));
    let mut cfg = PretrainConfig::default();
    macro_rules! opt {
        ($key:literal, $field:expr) => {
            if let Some(v) = s.parse($key)? {
                $field = v;
            }
        };
    }
    opt!("channels", codec_cfg.channels);
    opt!("codebook_size", codec_cfg.codebook_size);
    opt!("steps", cfg.steps);
    opt!("batch_size", cfg.batch_size);
    opt!("crop_samples", cfg.crop_samples);
    opt!("lr", cfg.lr);
    opt!("commitment", cfg.commitment);
    opt!("ema_decay", cfg.ema_decay);
    opt!("dead_code_steps", cfg.dead_code_steps);
    opt!("init_clips", cfg.init_clips);
    opt!("seed", cfg.seed);
    codec_cfg.seed = cfg.seed;
    if codec_cfg.channels == 0 || codec_cfg.codebook_size == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("channels, codebook_size and batch_size must be positive".into()));
    }
    write_text(&out.join("config.txt"), &s.echo("pretrain-codec"))?;

    let corpus = split_audio(&manifest, Split::Train)?;
    log::info!("pretraining the {} codec on {} clips for {} steps", codec_cfg.level, corpus.len(), cfg.steps);
    let (codec, stats) = pretrain_codec(&corpus, codec_cfg, &cfg)?;
    let mut log = open_log(&out.join("metrics.jsonl"))?;
    for (i, (r, c)) in stats.reconstruction.iter().zip(&stats.commitment).enumerate() {
        let line = serde_json::to_string(&PretrainStep {
            step: i + 1,
            reconstruction: *r,
            commitment: *c,
        })?;
        writeln!(log, "{line}").map_err(|e| Error::io("metrics.jsonl", e))?;
    }
    log.flush().map_err(|e| Error::io("metrics.jsonl", e))?;
    let path = out.join("codec.ckpt");
    let hash = save_codec(&codec, &path)?;
    let val = if manifest.val.is_empty() { None } else { Some(split_audio(&manifest, Split::Val)?) };
    let report = PretrainReport {
        level: codec_cfg.level,
        steps: cfg.steps,
        codebook_resets: stats.resets,
        val_reconstruction_l1: val.as_deref().map(|v| reconstruction_l1(&codec, v)).transpose()?,
        val_codebook_usage: val.as_deref().map(|v| codebook_usage(&codec, v)).transpose()?,
        checkpoint: "codec.ckpt".into(),
        checkpoint_sha256: hash,
    };
    save_json(&out.join("report.json"), &report)?;
    Ok(())
}

#[derive(Serialize)]
struct TrainReport {
    steps: u64,
    finetune_steps: usize,
    checkpoint: String,
    checkpoint_sha256: String,
    codec: String,
    codec_sha256: String,
}

fn train(s: &Settings, out: &Path) -> Result<()> {
    let mut cfg = TrainConfig::default();
    for (k, v) in &s.pairs {
        if TRAIN_KEYS.contains(&k.as_str()) {
            cfg.set(k, v)?;
        }
    }
    cfg.validate()?;
    let mut echo = s.echo("train");
    echo.push_str("\n# resolved training config\n");
    echo.push_str(&cfg.to_text());
    write_text(&out.join("config.txt"), &echo)?;

    let mut codec = match s.get("codec") {
        Some(p) => load_codec(Path::new(p))?,
        None if cfg.max_steps == 0 => {
            log::warn!("no codec given; writing an untrained codec alongside the initial checkpoint");
            crate::codec::CodecLevel::new(CodecConfig::new(cfg.level))
        }
        None => return Err(Error::Config("missing setting \"codec\"".into())),
    };
    let mut finetuned = 0;
    let manifest = match s.get("manifest") {
        Some(p) => Some(load_manifest(Path::new(p))?),
        None => None,
    };
    if cfg.max_steps > 0 {
        let manifest = manifest.ok_or_else(|| Error::Config("missing setting \"manifest\"".into()))?;
        if !cfg.no_finetune && cfg.finetune_steps > 0 {
            let ft = FinetuneConfig {
                steps: cfg.finetune_steps,
                lr: cfg.finetune_lr,
                disc_width_div: cfg.disc_width_div,
                seed: cfg.seed,
                ..FinetuneConfig::default()
            };
            log::info!("fine-tuning the codec decoder for {} steps", ft.steps);
            let corpus = split_audio(&manifest, Split::Train)?;
            let (tuned, stats) = finetune_decoder(&codec, &corpus, &ft)?;
            let mut log = open_log(&out.join("finetune_metrics.jsonl"))?;
            for (i, ((g, d), m)) in stats.g_loss.iter().zip(&stats.d_loss).zip(&stats.mel).enumerate() {
                let line = serde_json::json!({"step": i + 1, "g_loss": g, "d_loss": d, "mel": m});
                writeln!(log, "{line}").map_err(|e| Error::io("finetune_metrics.jsonl", e))?;
            }
            log.flush().map_err(|e| Error::io("finetune_metrics.jsonl", e))?;
            codec = tuned;
            finetuned = ft.steps;
        }
        let set = load_train_set(&manifest, Split::Train, &cfg, &codec)?;
        log::info!("training the {} level on {} clips for {} steps", cfg.level, set.len(), cfg.max_steps);
        let mut log = open_log(&out.join("metrics.jsonl"))?;
        let abort = out.join("aborted.ckpt");
        let ck = train_level(
            &cfg,
            &set,
            &codec,
            TrainSinks {
                metrics: Some(&mut log),
                abort_checkpoint: Some(&abort),
            },
        );
        log.flush().map_err(|e| Error::io("metrics.jsonl", e))?;
        return finish_train(ck?, &codec, finetuned, out);
    }
    fs::File::create(out.join("metrics.jsonl")).map_err(|e| Error::io(out.join("metrics.jsonl"), e))?;
    finish_train(Checkpoint::init(&cfg)?, &codec, finetuned, out)
}

fn finish_train(ck: Checkpoint, codec: &crate::codec::CodecLevel, finetuned: usize, out: &Path) -> Result<()> {
    let checkpoint_sha256 = ck.save(&out.join("model.ckpt"))?;
    let codec_sha256 = save_codec(codec, &out.join("codec.ckpt"))?;
    save_json(
        &out.join("report.json"),
        &TrainReport {
            steps: ck.step,
            finetune_steps: finetuned,
            checkpoint: "model.ckpt".into(),
            checkpoint_sha256,
            codec: "codec.ckpt".into(),
            codec_sha256,
        },
    )
}

#[derive(Serialize)]
struct GeneratedClip {
    clip_id: String,
    file: String,
    indices: Vec<usize>,
}

fn generate(s: &Settings, out: &Path) -> Result<()> {
    write_text(&out.join("config.txt"), &s.echo("generate"))?;
    let ck = Checkpoint::load(&s.path("checkpoint")?)?;
    let codec = load_codec(&s.path("codec")?)?;
    let denoise = s.flag("denoise")?;
    let mut produced = Vec::new();
    let mut emit = |id: &str, motion, visual: &VisualFeatureSequence| -> Result<()> {
        let g = generate_music(&ck, &codec, motion, visual, denoise)?;
        let file = format!("{id}.wav");
        save_wav(&g.audio, out.join(&file))?;
        produced.push(GeneratedClip {
            clip_id: id.to_string(),
            file,
            indices: g.indices.indices,
        });
        Ok(())
    };
    if let Some(motion) = s.get("motion") {
        let repr = match s.get("motion_repr").unwrap_or("keypoints2d") {
            "keypoints2d" => MotionRepr::Keypoints2d,
            "smpl" => MotionRepr::Smpl,
            other => return Err(Error::Config(format!("unknown motion representation {other:?}"))),
        };
        let m = load_motion(Path::new(motion), repr)?;
        let v = match s.get("visual") {
            Some(p) => load_visual_features(Path::new(p))?,
            None if ck.config.no_visual => VisualFeatureSequence::zeros((ck.config.clip_seconds / 0.5).ceil() as usize),
            None => return Err(Error::Config("the model uses visual features; pass --visual".into())),
        };
        let id = Path::new(motion).file_stem().and_then(|x| x.to_str()).unwrap_or("generated").to_string();
        emit(&id, &m, &v)?;
    } else {
        let manifest = load_manifest(&s.path("manifest")?)?;
        let split: Split = s.get("split").unwrap_or("test").parse()?;
        let wanted: Option<Vec<&str>> = s.get("clip").map(|c| c.split(',').map(str::trim).collect());
        let (recut, clips) = load_split_clips(&manifest, split, &ck.config)?;
        for c in &clips {
            if wanted.as_ref().is_some_and(|w| !w.contains(&c.record.clip_id.as_str())) {
                continue;
            }
            let v = clip_visual(c, &recut, ck.config.no_visual)?;
            emit(&c.record.clip_id, &c.motion, &v)?;
        }
    }
    if produced.is_empty() {
        return Err(Error::Data("no clip matched the selection".into()));
    }
    log::info!("generated {} clips", produced.len());
    save_json(&out.join("generated.json"), &produced)
}

fn evaluate(s: &Settings, out: &Path) -> Result<()> {
    write_text(&out.join("config.txt"), &s.echo("evaluate"))?;
    let ck = Checkpoint::load(&s.path("checkpoint")?)?;
    let codec = load_codec(&s.path("codec")?)?;
    let manifest = load_manifest(&s.path("manifest")?)?;
    let split: Split = s.get("split").unwrap_or("test").parse()?;
    let tolerance = s.parse("tolerance")?.unwrap_or(DEFAULT_TOLERANCE);
    if !(tolerance > 0.0) {
        return Err(Error::Config(format!("tolerance must be positive, got {tolerance}")));
    }
    let embedder: Box<dyn AudioEmbedder> = match s.get("embedder").unwrap_or("mel-stats") {
        "mel-stats" => Box::new(MelStatsEmbedder::default()),
        "random" => Box::new(RandomEmbedder {
            dim: 160,
            seed: s.parse("embed_seed")?.unwrap_or(0),
        }),
        other => return Err(Error::Config(format!("unknown embedder {other:?}"))),
    };
    let report = evaluate_run(&ck, &codec, &manifest, split, tolerance, embedder.as_ref(), s.flag("denoise")?)?;
    log::info!(
        "coverage {:.3}, hit {:.3}, genre accuracy {:.3}",
        report.coverage,
        report.hit,
        report.genre_accuracy
    );
    save_json(&out.join("report.json"), &report)
}

fn denoise(s: &Settings, out: &Path) -> Result<()> {
    write_text(&out.join("config.txt"), &s.echo("denoise"))?;
    let input = s.path("input")?;
    let w = load_wav_canonical(&input)?;
    let name = input.file_stem().and_then(|x| x.to_str()).unwrap_or("audio");
    save_wav(&spectral_denoise(&w), out.join(format!("{name}_denoised.wav")))
}
