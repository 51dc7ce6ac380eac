//! `vlkit` command-line front end. Every subcommand prints `key=value`
//! lines (or the layout dump) computed by library calls alone.

use std::fmt::Display;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use clap::{CommandFactory, Parser, Subcommand};
use rand::Rng;
use vlkit_core::adaptor::{layout_visual_tokens, visual_token_count, PRODUCTION_SIDE};
use vlkit_core::attention::{kv_cache_floats_per_token, AttnMode};
use vlkit_core::grounding::{parse_grounded, serialize_span, BoundingBox, GroundedSpan, Segment};
use vlkit_core::imaging::load_ppm;
use vlkit_core::model::{build_config, next_token_batch, Model, ModelConfig, Variant};
use vlkit_core::numcore::seeded;
use vlkit_core::schedsim::{balance_tiles, split_pipeline_stages};
use vlkit_core::tiling::{candidate_resolutions, select_resolution, TilingPlan, BASE_TILE};
use vlkit_core::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_DATA: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "vlkit", about = "Desk-scale vision-language model toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Choose a tiling grid for an image size or a PPM file.
    Tile {
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..), required_unless_present = "image", requires = "width")]
        height: Option<u64>,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..), required_unless_present = "image", requires = "height")]
        width: Option<u64>,
        #[arg(long, conflicts_with_all = ["height", "width"])]
        image: Option<PathBuf>,
        #[arg(long, default_value_t = 9, value_parser = clap::value_parser!(u64).range(1..))]
        max_tiles: u64,
    },
    /// Dump the visual token layout of an m×n grid.
    Layout {
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        m: u64,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
        images: u64,
    },
    /// Run the Toy model on one image followed by a seeded prompt.
    Forward {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        prompt_len: usize,
    },
    /// Parse or render grounding markup.
    Ground {
        #[command(subcommand)]
        action: GroundAction,
    },
    /// Assign per-sample tile counts to ranks.
    Balance {
        #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
        counts: Vec<u64>,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        ranks: u64,
    },
    /// Split layer costs into contiguous pipeline stages.
    Stages {
        #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
        costs: Vec<f64>,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        stages: u64,
    },
    /// Print the architecture of a variant.
    Config {
        #[arg(long)]
        variant: String,
    },
}

#[derive(Debug, Subcommand)]
enum GroundAction {
    /// Read grounded text on stdin and list its spans.
    Parse,
    /// Read `ref<TAB>x1,y1,x2,y2;...` lines on stdin and print one span per line.
    Render,
}

enum Failure {
    Usage(String),
    Data(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

type Outcome = std::result::Result<(), Failure>;

fn kv(out: &mut dyn Write, key: &str, value: impl Display) -> std::io::Result<()> {
    writeln!(out, "{key}={value}")
}

fn join<T: Display>(items: &[T], sep: &str) -> String {
    items
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(sep)
}

/// Runs one invocation; `args[0]` is the program name.
pub fn run<I, T>(
    args: I,
    stdin: &mut dyn Read,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = stdout.write_all(text.as_bytes());
                    EXIT_OK
                }
                _ => {
                    let _ = stderr.write_all(text.as_bytes());
                    if !text.contains("Usage:") {
                        let _ = writeln!(stderr, "\n{}", Cli::command().render_usage());
                    }
                    EXIT_USAGE
                }
            };
        }
    };
    match dispatch(cli.command, stdin, stdout) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(stderr, "error: {msg}\n\n{}", Cli::command().render_usage());
            EXIT_USAGE
        }
        Err(Failure::Data(msg)) => {
            let _ = writeln!(stderr, "error: {msg}");
            EXIT_DATA
        }
    }
}

fn dispatch(cmd: Command, stdin: &mut dyn Read, out: &mut dyn Write) -> Outcome {
    match cmd {
        Command::Tile {
            height,
            width,
            image,
            max_tiles,
        } => {
            let (h, w) = match (image, height, width) {
                (Some(path), _, _) => {
                    let img = load_ppm(&read_file(&path)?)?;
                    (img.height(), img.width())
                }
                (None, Some(h), Some(w)) => (h as usize, w as usize),
                _ => {
                    return Err(Failure::Usage(
                        "tile needs --height and --width, or --image".into(),
                    ))
                }
            };
            let plan =
                select_resolution(h, w, &candidate_resolutions(BASE_TILE, max_tiles as usize))?;
            print_plan(out, h, w, &plan)?;
        }
        Command::Layout { m, n, images } => {
            let layout = layout_visual_tokens(m as usize, n as usize, images as usize)?;
            out.write_all(layout.dump().as_bytes())?;
        }
        Command::Forward {
            config,
            seed,
            image,
            prompt_len,
        } => forward(out, &config, seed, &image, prompt_len)?,
        Command::Ground { action } => {
            let mut text = String::new();
            stdin
                .read_to_string(&mut text)
                .map_err(|e| Failure::Data(format!("stdin is not UTF-8 text: {e}")))?;
            match action {
                GroundAction::Parse => ground_parse(out, &text)?,
                GroundAction::Render => ground_render(out, &text)?,
            }
        }
        Command::Balance { counts, ranks } => {
            let a = balance_tiles(&counts, ranks as usize)?;
            kv(out, "loads", join(&a.loads, ","))?;
            kv(out, "max_load", a.max_load())?;
            for (r, samples) in a.assignments.iter().enumerate() {
                kv(out, &format!("rank.{r}"), join(samples, ","))?;
            }
        }
        Command::Stages { costs, stages } => {
            let p = split_pipeline_stages(&costs, stages as usize)?;
            kv(out, "boundaries", join(&p.boundaries, ","))?;
            kv(out, "stage_costs", join(&p.stage_costs, ","))?;
            kv(out, "max_cost", p.max_cost())?;
            let ranges: Vec<String> = p
                .ranges(costs.len())
                .iter()
                .map(|(a, b)| format!("{a}..{b}"))
                .collect();
            kv(out, "ranges", ranges.join(","))?;
        }
        Command::Config { variant } => {
            let v: Variant = variant
                .parse()
                .map_err(|e: Error| Failure::Usage(e.to_string()))?;
            print_config(out, &build_config(v))?;
        }
    }
    Ok(())
}

fn read_file(path: &Path) -> std::result::Result<Vec<u8>, Failure> {
    std::fs::read(path).map_err(|e| Failure::Data(format!("cannot read {}: {e}", path.display())))
}

fn print_plan(out: &mut dyn Write, h: usize, w: usize, plan: &TilingPlan) -> Outcome {
    let c = plan.candidate;
    kv(out, "height", h)?;
    kv(out, "width", w)?;
    kv(out, "m", c.m)?;
    kv(out, "n", c.n)?;
    kv(out, "scale", plan.scale)?;
    kv(out, "resized_h", plan.resized_h)?;
    kv(out, "resized_w", plan.resized_w)?;
    kv(out, "padding", plan.padding_area)?;
    kv(out, "tiles", plan.tile_count())?;
    kv(
        out,
        "tokens",
        visual_token_count(c.m, c.n, PRODUCTION_SIDE, true),
    )?;
    Ok(())
}

fn print_config(out: &mut dyn Write, cfg: &ModelConfig) -> Outcome {
    kv(out, "variant", cfg.variant)?;
    kv(out, "vocab_size", cfg.vocab_size)?;
    kv(out, "d_model", cfg.d_model)?;
    kv(out, "n_heads", cfg.n_heads)?;
    kv(out, "n_layers", cfg.n_layers)?;
    match cfg.attention {
        AttnMode::Mha => kv(out, "attention", "mha")?,
        AttnMode::Mla { rank, d_rope } => {
            kv(out, "attention", "mla")?;
            kv(out, "mla_rank", rank)?;
            kv(out, "d_rope", d_rope)?;
        }
    }
    kv(out, "n_routed", cfg.n_routed)?;
    kv(out, "n_shared", cfg.n_shared)?;
    kv(out, "top_k", cfg.top_k)?;
    kv(out, "routing", format!("{:?}", cfg.routing).to_lowercase())?;
    kv(out, "bias_correction", cfg.bias_correction)?;
    kv(
        out,
        "kv_floats_per_token",
        kv_cache_floats_per_token(&cfg.attn_config()),
    )?;
    Ok(())
}

fn forward(
    out: &mut dyn Write,
    config: &Path,
    seed: u64,
    image: &Path,
    prompt_len: usize,
) -> Outcome {
    let text = String::from_utf8(read_file(config)?)
        .map_err(|_| Failure::Data(format!("{} is not UTF-8", config.display())))?;
    let cfg = ModelConfig::from_json(&text)?;
    if cfg.variant != Variant::Toy {
        return Err(Failure::Data(format!(
            "forward runs the toy variant only, config is `{}`",
            cfg.variant
        )));
    }
    let img = load_ppm(&read_file(image)?)?;
    let model = Model::new(cfg, seed)?;
    let prepared = model.prepare_image(&img, 1)?;

    let mut rng = seeded(seed);
    let mut ids = vec![model.config.image_token_id];
    ids.extend((0..prompt_len).map(|_| rng.random_range(0..model.config.vocab_size)));
    let len = ids.len();
    let layout = prepared.layout.clone();
    let batch = next_token_batch(ids, vec![0], &[layout], &vec![true; len])?;
    let inf = model.infer(&batch, std::slice::from_ref(&prepared))?;

    let last = inf.logits.row(inf.logits.rows() - 1);
    let next = last
        .iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v > last[best] { i } else { best });
    let c = prepared.plan.candidate;
    kv(out, "m", c.m)?;
    kv(out, "n", c.n)?;
    kv(out, "visual_tokens", prepared.layout.len())?;
    kv(out, "seq_len", inf.logits.rows())?;
    kv(
        out,
        "logits_shape",
        format!("{}x{}", inf.logits.rows(), inf.logits.cols()),
    )?;
    kv(out, "next_token", next)?;
    kv(out, "kv_floats_per_token", inf.kv_floats_per_token)?;
    kv(out, "kv_total_floats", inf.kv_total_floats)?;
    Ok(())
}

fn format_boxes(boxes: &[BoundingBox]) -> String {
    boxes
        .iter()
        .map(|b| format!("{},{},{},{}", b.x1, b.y1, b.x2, b.y2))
        .collect::<Vec<_>>()
        .join(";")
}

fn ground_parse(out: &mut dyn Write, text: &str) -> Outcome {
    let msg = parse_grounded(text.strip_suffix('\n').unwrap_or(text))?;
    kv(out, "grounding", msg.grounding_prefix)?;
    let texts = msg
        .segments
        .iter()
        .filter(|s| matches!(s, Segment::Text(_)))
        .count();
    kv(out, "text_segments", texts)?;
    let spans: Vec<&GroundedSpan> = msg.spans().collect();
    kv(out, "spans", spans.len())?;
    for (i, s) in spans.iter().enumerate() {
        kv(out, &format!("span.{i}.ref"), &s.ref_text)?;
        kv(out, &format!("span.{i}.boxes"), format_boxes(&s.boxes))?;
    }
    Ok(())
}

fn parse_coord(field: &str, line_no: usize) -> std::result::Result<u16, Failure> {
    let v: u64 = field
        .trim()
        .parse()
        .map_err(|_| Failure::Data(format!("line {line_no}: `{field}` is not a coordinate")))?;
    u16::try_from(v).map_err(|_| Failure::Data(Error::Range { value: v }.to_string()))
}

fn ground_render(out: &mut dyn Write, text: &str) -> Outcome {
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (ref_text, boxes) = line
            .split_once('\t')
            .ok_or_else(|| Failure::Data(format!("line {line_no}: expected `ref<TAB>boxes`")))?;
        if ref_text.is_empty() {
            return Err(Failure::Data(format!(
                "line {line_no}: empty reference text"
            )));
        }
        let mut parsed = Vec::new();
        for b in boxes.split(';').map(str::trim).filter(|b| !b.is_empty()) {
            let v: Vec<&str> = b.split(',').collect();
            if v.len() != 4 {
                return Err(Failure::Data(format!(
                    "line {line_no}: box `{b}` needs 4 coordinates"
                )));
            }
            parsed.push(BoundingBox::new(
                parse_coord(v[0], line_no)?,
                parse_coord(v[1], line_no)?,
                parse_coord(v[2], line_no)?,
                parse_coord(v[3], line_no)?,
            )?);
        }
        let span = GroundedSpan {
            ref_text: ref_text.to_string(),
            boxes: parsed,
        };
        let rendered = serialize_span(&span);
        // The rendered text must read back as exactly this span.
        let back = parse_grounded(&rendered)?;
        if back.spans().next() != Some(&span) || back.segments.len() != 1 {
            return Err(Failure::Data(format!(
                "line {line_no}: reference text contains grammar tokens"
            )));
        }
        writeln!(out, "{rendered}")?;
    }
    Ok(())
}
