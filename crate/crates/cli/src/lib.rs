//! `objdino` command-line driver. [`run`] is the whole program; the binary
//! only forwards process arguments and the exit code.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use objdino_core::decoding::{greedy_decode, read_logits, Branch, GuidanceMode};
use objdino_core::discovery::{aggregate_affinity, discover, Prediction};
use objdino_core::heads::{active_heads_per_layer, select_over_dataset};
use objdino_core::metrics::{
    chair, corloc, pope_scores, BBox, BinaryOutcome, CaptionRecord, GroundTruthLine, Synonyms,
};
use objdino_core::similarity::{saliency, EnsembleWeights, SaliencyMap, DEFAULT_TAU};
use objdino_core::store::{read_dump, write_dump, write_ground_truth};
use objdino_core::synthetic::{default_planted, CorpusSpec, DEFAULT_NOISE_SIGMA};
use objdino_core::{ActivationDump, AffinityScale, HeadId, HeadSelection, PipelineConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const DUMP_EXTENSION: &str = "objdump";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.jsonl";

#[derive(Parser, Debug)]
#[command(name = "objdino", version, about = "Object-centric head analysis and discovery over ViT activation dumps")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a seeded synthetic corpus of dumps with planted object heads.
    Gen(GenArgs),
    /// Cluster heads per image and write the dataset-level head selection.
    Analyze(AnalyzeArgs),
    /// Predict one object box per dump.
    Discover(DiscoverArgs),
    /// Score predictions (CorLoc) and optionally CHAIR / POPE records.
    Eval(EvalArgs),
    /// Write the inverted saliency of one dump as a binary PGM.
    Render(RenderArgs),
    /// Greedy guided decoding over recorded logit streams.
    Decode(DecodeArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ScaleArg {
    Cosine,
    Raw,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Additive,
    Convex,
}

/// Pipeline parameters shared by the analysis commands.
#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// Softmax temperature of the component similarity maps.
    #[arg(long, env = "OBJDINO_TAU", default_value_t = DEFAULT_TAU)]
    pub tau: f32,
    #[arg(long, env = "OBJDINO_WQ", default_value_t = 1.0 / 3.0)]
    pub wq: f64,
    #[arg(long, env = "OBJDINO_WK", default_value_t = 1.0 / 3.0)]
    pub wk: f64,
    #[arg(long, env = "OBJDINO_WV", default_value_t = 1.0 / 3.0)]
    pub wv: f64,
    /// Number of k-means clusters over heads.
    #[arg(long = "k", env = "OBJDINO_K", default_value_t = 5)]
    pub k: usize,
    /// Minimum per-image selection frequency for the dataset head set.
    #[arg(long, env = "OBJDINO_THETA", default_value_t = 0.5)]
    pub theta: f64,
    #[arg(long = "tau-cut", env = "OBJDINO_TAU_CUT", default_value_t = 0.2)]
    pub tau_cut: f64,
    #[arg(long, env = "OBJDINO_EPSILON", default_value_t = 1e-5)]
    pub epsilon: f64,
    /// Scale on which edges are thresholded.
    #[arg(long, env = "OBJDINO_AFFINITY", value_enum, default_value_t = ScaleArg::Cosine)]
    pub affinity: ScaleArg,
    #[arg(long, env = "OBJDINO_ALPHA", default_value_t = 0.4)]
    pub alpha: f64,
    #[arg(long, env = "OBJDINO_MODE", value_enum, default_value_t = ModeArg::Additive)]
    pub mode: ModeArg,
    #[arg(long = "max-new-tokens", env = "OBJDINO_MAX_NEW_TOKENS", default_value_t = 64)]
    pub max_new_tokens: usize,
    #[arg(long, env = "OBJDINO_SEED", default_value_t = 0)]
    pub seed: u64,
}

impl ConfigArgs {
    pub fn to_config(&self) -> anyhow::Result<PipelineConfig> {
        let weights = EnsembleWeights::new(self.wq, self.wk, self.wv).map_err(usage)?;
        let cfg = PipelineConfig {
            tau: self.tau,
            weights,
            k_clusters: self.k,
            theta: self.theta,
            tau_cut: self.tau_cut,
            epsilon: self.epsilon,
            affinity_scale: match self.affinity {
                ScaleArg::Cosine => AffinityScale::Cosine,
                ScaleArg::Raw => AffinityScale::Raw,
            },
            alpha: self.alpha,
            mode: match self.mode {
                ModeArg::Additive => GuidanceMode::Additive,
                ModeArg::Convex => GuidanceMode::Convex,
            },
            max_new_tokens: self.max_new_tokens,
            seed: self.seed,
        };
        cfg.validate().map_err(usage)?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long, env = "OBJDINO_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub images: usize,
    /// Patch grid side length.
    #[arg(long, default_value_t = 14)]
    pub grid: usize,
    #[arg(long, default_value_t = 12)]
    pub layers: usize,
    #[arg(long, default_value_t = 12)]
    pub heads: usize,
    #[arg(long = "head-dim", default_value_t = 16)]
    pub head_dim: usize,
    #[arg(long = "patch-size", default_value_t = 16)]
    pub patch_size: usize,
    /// Planted heads as `layer:head` pairs, e.g. "11:0,11:1,9:3" (0-based).
    #[arg(long, value_parser = parse_head_list)]
    pub planted: Option<HeadList>,
    /// A group of distractor heads sharing one positional pattern; repeatable.
    #[arg(long = "distractor", value_parser = parse_head_list)]
    pub distractors: Vec<HeadList>,
    #[arg(long, default_value_t = DEFAULT_NOISE_SIGMA)]
    pub noise: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    /// Dump files, or directories searched for `*.objdump`.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Head-selection JSON output.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-layer histogram CSV; defaults next to `--out` as `<stem>.layers.csv`.
    #[arg(long)]
    pub histogram: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DiscoverArgs {
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Head-selection JSON written by `analyze`.
    #[arg(long)]
    pub selection: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Predictions JSON lines output.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long = "pred", requires = "ground_truth")]
    pub predictions: Option<PathBuf>,
    #[arg(long = "gt", requires = "predictions")]
    pub ground_truth: Option<PathBuf>,
    /// Caption records, one `{"mentioned": [...], "truth": [...]}` per line.
    #[arg(long)]
    pub chair: Option<PathBuf>,
    /// JSON object mapping surface words to canonical object names.
    #[arg(long, requires = "chair")]
    pub synonyms: Option<PathBuf>,
    /// Probe outcomes, one `{"predicted": "yes", "actual": "no"}` per line.
    #[arg(long)]
    pub pope: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    pub input: PathBuf,
    #[arg(long)]
    pub selection: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct DecodeArgs {
    /// Standard-branch LOGITS01 stream.
    #[arg(long)]
    pub standard: PathBuf,
    /// Guidance-branch LOGITS01 stream.
    #[arg(long)]
    pub guidance: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeadList(pub Vec<HeadId>);

fn parse_head_list(s: &str) -> Result<HeadList, String> {
    let heads = s
        .split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| t.parse::<HeadId>().map_err(|e| e.to_string()))
        .collect::<Result<Vec<_>, _>>()?;
    if heads.is_empty() {
        return Err("head list is empty".into());
    }
    Ok(HeadList(heads))
}

/// Marks an error as a usage problem (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(e: impl fmt::Display) -> anyhow::Error {
    UsageError(e.to_string()).into()
}

fn exit_code(e: &anyhow::Error) -> i32 {
    use objdino_core::Error as E;
    for cause in e.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if let Some(
            E::InvalidPlanted(_)
            | E::InvalidConfig(_)
            | E::InvalidTemperature(_)
            | E::InvalidClusterCount(_)
            | E::TooManyClusters { .. },
        ) = cause.downcast_ref::<E>()
        {
            return EXIT_USAGE;
        }
    }
    EXIT_RUNTIME
}

/// Parses `args` (program name first) and runs the command, writing reports
/// to `out` and diagnostics to `err`. Returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            let _ = if code == 0 {
                out.write_all(text.as_bytes())
            } else {
                err.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            exit_code(&e)
        }
    }
}

pub fn execute(command: Command, out: &mut dyn Write) -> anyhow::Result<()> {
    match command {
        Command::Gen(a) => cmd_gen(&a, out),
        Command::Analyze(a) => cmd_analyze(&a, out),
        Command::Discover(a) => cmd_discover(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Render(a) => cmd_render(&a),
        Command::Decode(a) => cmd_decode(&a, out),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn read_text(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<Vec<T>> {
    read_text(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1))
        })
        .collect()
}

fn to_jsonl<T: serde::Serialize>(items: &[T]) -> anyhow::Result<Vec<u8>> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item)?;
        buf.push(b'\n');
    }
    Ok(buf)
}

/// Image id of a dump: its file name without the extension.
pub fn image_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Expands directories to their `*.objdump` files (sorted by name), keeping
/// the argument order otherwise.
pub fn expand_inputs(inputs: &[PathBuf]) -> anyhow::Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .with_context(|| format!("listing {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == DUMP_EXTENSION))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    if files.is_empty() {
        bail!("no dump files found");
    }
    Ok(files)
}

fn load_dumps(paths: &[PathBuf]) -> anyhow::Result<Vec<ActivationDump>> {
    paths
        .par_iter()
        .map(|p| read_dump(p).with_context(|| format!("loading {}", p.display())))
        .collect()
}

fn load_selection(path: &Path) -> anyhow::Result<HeadSelection> {
    HeadSelection::from_json(&read_text(path)?)
        .with_context(|| format!("parsing head selection {}", path.display()))
}

fn cmd_gen(a: &GenArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    if a.images == 0 {
        return Err(usage("--images must be at least 1"));
    }
    if a.grid < 4 {
        return Err(usage("--grid must be at least 4"));
    }
    if a.layers == 0 || a.heads == 0 || a.head_dim == 0 || a.patch_size == 0 {
        return Err(usage("model sizes must be at least 1"));
    }
    let planted = match &a.planted {
        Some(list) => list.0.clone(),
        None => default_planted(a.layers, a.heads),
    };
    let corpus = CorpusSpec {
        seed: a.seed,
        images: a.images,
        layers: a.layers,
        heads: a.heads,
        grid: a.grid,
        head_dim: a.head_dim,
        patch_size: a.patch_size,
        planted_heads: planted,
        distractor_groups: a.distractors.iter().map(|g| g.0.clone()).collect(),
        noise_sigma: a.noise,
    };
    let items = corpus.generate()?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let width = a.images.to_string().len().max(4);
    let mut gt_lines = Vec::with_capacity(items.len());
    for (i, (dump, gt)) in items.iter().enumerate() {
        let id = format!("img_{i:0width$}");
        write_dump(dump, a.out.join(format!("{id}.{DUMP_EXTENSION}")))?;
        write_ground_truth(gt, a.out.join(format!("{id}.gt.json")))?;
        let pb = gt.pixel_box(dump.header().patch_size);
        gt_lines.push(GroundTruthLine {
            image_id: id,
            boxes: vec![BBox::try_from(pb)?],
        });
    }
    write_file(&a.out.join(GROUND_TRUTH_FILE), &to_jsonl(&gt_lines)?)?;
    writeln!(out, "wrote {} images to {}", items.len(), a.out.display())?;
    Ok(())
}

/// CSV rows `layer,active_heads,mean_frequency` for the selection.
pub fn layer_histogram_csv(sel: &HeadSelection, layers: usize, heads: usize, theta: f64) -> String {
    let active = active_heads_per_layer(sel, layers, theta);
    let mut csv = String::from("layer,active_heads,mean_frequency\n");
    for (layer, count) in active.iter().enumerate() {
        let mean = (0..heads)
            .map(|h| sel.frequency(HeadId::new(layer, h)))
            .sum::<f64>()
            / heads as f64;
        csv.push_str(&format!("{layer},{count},{mean:.6}\n"));
    }
    csv
}

fn cmd_analyze(a: &AnalyzeArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let cfg = a.config.to_config()?;
    let paths = expand_inputs(&a.inputs)?;
    let dumps = load_dumps(&paths)?;
    let header = *dumps[0].header();
    let total = header.layers * header.heads;
    if cfg.k_clusters > total {
        return Err(usage(format!(
            "--k {} exceeds the {total} heads of the model",
            cfg.k_clusters
        )));
    }
    let sel = select_over_dataset(&dumps, &cfg)?;
    let mut json = sel.to_json()?;
    json.push('\n');
    write_file(&a.out, json.as_bytes())?;
    let hist_path = a.histogram.clone().unwrap_or_else(|| {
        let stem = a.out.file_stem().unwrap_or_default().to_string_lossy();
        a.out.with_file_name(format!("{stem}.layers.csv"))
    });
    let csv = layer_histogram_csv(&sel, header.layers, header.heads, cfg.theta);
    write_file(&hist_path, csv.as_bytes())?;
    writeln!(
        out,
        "selected {} heads over {} images (object cluster {})",
        sel.heads.len(),
        sel.images,
        sel.object_cluster
    )?;
    Ok(())
}

fn cmd_discover(a: &DiscoverArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let cfg = a.config.to_config()?;
    let selection = load_selection(&a.selection)?;
    let paths = expand_inputs(&a.inputs)?;
    let preds = paths
        .par_iter()
        .map(|p| {
            let dump = read_dump(p).with_context(|| format!("loading {}", p.display()))?;
            let res = discover(&dump, &selection, &cfg)
                .with_context(|| format!("discovering in {}", p.display()))?;
            Ok(Prediction {
                image_id: image_id(p),
                bbox: res.bbox_pixels.map(|v| v as f64),
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    write_file(&a.out, &to_jsonl(&preds)?)?;
    writeln!(out, "wrote {} predictions to {}", preds.len(), a.out.display())?;
    Ok(())
}

fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    if a.predictions.is_none() && a.chair.is_none() && a.pope.is_none() {
        return Err(usage("nothing to evaluate: pass --pred/--gt, --chair or --pope"));
    }
    if let (Some(pred_path), Some(gt_path)) = (&a.predictions, &a.ground_truth) {
        let mut preds = HashMap::new();
        for p in read_jsonl::<Prediction>(pred_path)? {
            let b = BBox::try_from(p.bbox)
                .with_context(|| format!("prediction for {}", p.image_id))?;
            if preds.insert(p.image_id.clone(), b).is_some() {
                bail!("duplicate prediction for {}", p.image_id);
            }
        }
        let mut gts: HashMap<String, Vec<BBox>> = HashMap::new();
        for g in read_jsonl::<GroundTruthLine>(gt_path)? {
            gts.entry(g.image_id).or_default().extend(g.boxes);
        }
        writeln!(out, "CorLoc: {:.2}", corloc(&preds, &gts)?)?;
    }
    if let Some(path) = &a.chair {
        let mut records: Vec<CaptionRecord> = read_jsonl(path)?;
        if let Some(syn_path) = &a.synonyms {
            let syn: Synonyms = serde_json::from_str(&read_text(syn_path)?)
                .with_context(|| format!("parsing {}", syn_path.display()))?;
            records = records.iter().map(|r| syn.canonicalize(r)).collect();
        }
        let s = chair(&records)?;
        writeln!(out, "CHAIR_S: {:.2}", s.chair_s)?;
        writeln!(out, "CHAIR_I: {:.2}", s.chair_i)?;
    }
    if let Some(path) = &a.pope {
        let outcomes: Vec<BinaryOutcome> = read_jsonl(path)?;
        let s = pope_scores(&outcomes)?;
        writeln!(out, "POPE accuracy: {:.2}", s.accuracy)?;
        writeln!(out, "POPE precision: {:.2}", s.precision)?;
        writeln!(out, "POPE recall: {:.2}", s.recall)?;
        writeln!(out, "POPE F1: {:.2}", s.f1)?;
    }
    Ok(())
}

/// Binary P5 PGM of `map`, each cell blown up to a `patch × patch` block.
pub fn render_pgm(map: &SaliencyMap, patch_size: usize) -> Vec<u8> {
    let (w, h) = (map.grid_w * patch_size, map.grid_h * patch_size);
    let mut buf = format!("P5\n{w} {h}\n255\n").into_bytes();
    buf.reserve(w * h);
    for y in 0..h {
        for x in 0..w {
            let v = map.get(y / patch_size, x / patch_size);
            buf.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    buf
}

fn cmd_render(a: &RenderArgs) -> anyhow::Result<()> {
    let cfg = a.config.to_config()?;
    let selection = load_selection(&a.selection)?;
    let dump = read_dump(&a.input).with_context(|| format!("loading {}", a.input.display()))?;
    let header = dump.header();
    let sim = aggregate_affinity(&dump, &selection, &cfg)?;
    let map = saliency(&sim, header.grid_h, header.grid_w, true)?;
    write_file(&a.out, &render_pgm(&map, header.patch_size))
}

fn cmd_decode(a: &DecodeArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let cfg = a.config.to_config()?;
    let standard = read_logits(&a.standard, Branch::Standard)?;
    let guidance = read_logits(&a.guidance, Branch::Guidance)?;
    let tokens = greedy_decode(&standard, &guidance, &cfg.guidance())?;
    let text: Vec<String> = tokens.iter().map(usize::to_string).collect();
    writeln!(out, "{}", text.join(" "))?;
    Ok(())
}
