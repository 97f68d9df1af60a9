//! `ddgen` command line: ingest, train, generate, eval and report.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use ddgen::clustering::{build_profile, read_profile_csv, write_profile_csv, ProfileRow};
use ddgen::data::{load_csv, read_dds, window_series, write_dds, Normalization, WindowSpec};
use ddgen::ddm::{read_ddm, write_ddm};
use ddgen::divergence::path_dual_values;
use ddgen::error::{Error, Result};
use ddgen::image::ImageSet;
use ddgen::metrics::{evaluate, EvalConfig};
use ddgen::trainer::{generate, train, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "ddgen", version, about = "Dual divergence sampling for image-shaped data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Norm {
    Global,
    PerImage,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Window a CSV time series into an image set.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        window: usize,
        #[arg(long)]
        stride: usize,
        #[arg(long, value_enum, default_value = "global")]
        norm: Norm,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a dual function on an image set.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Config override, `key=value`; may repeat.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Generate samples by gradient walks between dual-space clusters.
    Generate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compute every metric for a generated set against the real set.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        gen: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Walk failures reported by `generate`, carried into the report.
        #[arg(long, default_value_t = 0)]
        walk_failures: u64,
        /// Also write the dual profile of the real set as CSV.
        #[arg(long)]
        profile: Option<PathBuf>,
    },
    /// Write PGM heatmaps of sample images and an SVG of the dual profile.
    Report {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        gen: PathBuf,
        #[arg(long)]
        profile: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 8)]
        max_images: usize,
        #[arg(long, default_value_t = 4)]
        cuts: usize,
    },
}

fn load_config(path: Option<&Path>, seed: Option<u64>, overrides: &[String]) -> Result<TrainConfig<f64>> {
    let mut cfg = TrainConfig::default();
    if let Some(p) = path {
        cfg.apply_text(&std::fs::read_to_string(p)?)?;
    }
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Argument(format!("override `{o}` is not key=value")))?;
        cfg.set(k.trim(), v.trim()).map_err(Error::Argument)?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Binary PGM (P5, maxval 255) of one image.
pub fn pgm_bytes(image: &[f64], rows: usize, cols: usize) -> Vec<u8> {
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(image.iter().map(|&v| (255.0 * v.clamp(0.0, 1.0)).round() as u8));
    out
}

/// Scatter of dual value against rank with vertical lines at `cuts`.
pub fn profile_svg(rows: &[ProfileRow], cuts: &[usize]) -> String {
    let (w, h, pad) = (640.0, 400.0, 40.0);
    let n = rows.len().max(2) as f64;
    let lo = rows.iter().map(|r| r.dual_value).fold(f64::INFINITY, f64::min);
    let hi = rows.iter().map(|r| r.dual_value).fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let x = |rank: f64| pad + (w - 2.0 * pad) * rank / (n - 1.0);
    let y = |v: f64| h - pad - (h - 2.0 * pad) * (v - lo) / span;
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<line x1="{pad}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/><line x1="{pad}" y1="{pad}" x2="{pad}" y2="{0}" stroke="black"/>"#,
        h - pad,
        w - pad
    );
    for &c in cuts {
        let cx = x(c as f64 - 0.5);
        let _ = writeln!(svg, r#"<line x1="{cx:.2}" y1="{pad}" x2="{cx:.2}" y2="{:.2}" stroke="red" stroke-dasharray="4 3"/>"#, h - pad);
    }
    for r in rows {
        let _ = writeln!(
            svg,
            r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="steelblue"/>"#,
            x(r.rank as f64),
            y(r.dual_value)
        );
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">rank</text>"#, w / 2.0, h - 8.0);
    let _ = writeln!(
        svg,
        r#"<text x="12" y="{}" font-size="12" transform="rotate(-90 12 {})" text-anchor="middle">dual value</text>"#,
        h / 2.0,
        h / 2.0
    );
    svg.push_str("</svg>\n");
    svg
}

fn write_pgms(set: &ImageSet<f64>, prefix: &str, dir: &Path, max: usize) -> Result<()> {
    for (i, im) in set.iter().take(max).enumerate() {
        std::fs::write(dir.join(format!("{prefix}_{i:03}.pgm")), pgm_bytes(im, set.rows(), set.cols()))?;
    }
    Ok(())
}

fn cut_ranks(rows: &[ProfileRow], c: usize) -> Vec<usize> {
    let mut interior: Vec<&ProfileRow> = rows.iter().filter(|r| r.d_knn.is_some()).collect();
    interior.sort_by(|a, b| {
        b.d_knn.partial_cmp(&a.d_knn).unwrap_or(std::cmp::Ordering::Equal).then(a.rank.cmp(&b.rank))
    });
    let mut ranks: Vec<usize> = interior.iter().take(c).map(|r| r.rank).collect();
    ranks.sort_unstable();
    ranks
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Ingest { input, window, stride, norm, out } => {
            let series = load_csv::<f64>(&input)?;
            let normalization = match norm {
                Norm::Global => Normalization::GlobalMinMax,
                Norm::PerImage => Normalization::PerImageMinMax,
            };
            let set = window_series(&series, &WindowSpec { window, stride, normalization })?;
            write_dds(&set, &out)?;
            eprintln!("wrote {} images of {}x{} to {}", set.len(), set.rows(), set.cols(), out.display());
        }
        Command::Train { data, config, out, trace, seed, overrides } => {
            let cfg = load_config(config.as_deref(), seed, &overrides)?;
            let x = read_dds::<f64>(&data)?;
            let res = train(&x, &cfg)?;
            write_ddm(&res.model, &res.offsets, &out)?;
            if let Some(t) = trace {
                std::fs::write(t, res.trace.to_csv())?;
            }
            eprintln!(
                "trained {} iterations{}",
                res.trace.records.len(),
                if res.stopped_early { " (early stop)" } else { "" }
            );
        }
        Command::Generate { model, data, count, seed, out, config } => {
            let mut cfg = load_config(config.as_deref(), None, &[])?;
            cfg.walk.seed = seed;
            let (m, offsets) = read_ddm::<f64>(&model)?;
            let x = read_dds::<f64>(&data)?;
            let outcome = if count == 0 {
                None
            } else {
                Some(generate(&m, &offsets, &x, &cfg, count)?)
            };
            match outcome {
                Some(o) => {
                    write_dds(&o.images, &out)?;
                    eprintln!(
                        "retained {} of {} walks ({} exhausted, {} out of range)",
                        o.images.len(),
                        o.attempts,
                        o.walk_failures,
                        o.ood_rejections
                    );
                }
                None => write_dds(&ImageSet::<f64>::empty(x.rows(), x.cols(), ddgen::image::SetTag::Generated), &out)?,
            }
        }
        Command::Eval { model, real, gen, out, config, seed, walk_failures, profile } => {
            let cfg = load_config(config.as_deref(), None, &[])?;
            let (m, offsets) = read_ddm::<f64>(&model)?;
            let x = read_dds::<f64>(&real)?;
            let xg = read_dds::<f64>(&gen)?;
            let eval_cfg = EvalConfig { knn_k: cfg.knn_k, seed, walk_failure_count: walk_failures, ..EvalConfig::default() };
            let report = evaluate(&m, &offsets, &x, &xg, &eval_cfg)?;
            std::fs::write(&out, report.to_csv())?;
            if let Some(p) = profile {
                let values = path_dual_values(&m, &x, &offsets)?;
                let prof = build_profile(&values, cfg.knn_k)?;
                let mut buf = Vec::new();
                write_profile_csv(&prof, &mut buf)?;
                std::fs::write(p, buf)?;
            }
        }
        Command::Report { real, gen, profile, out_dir, max_images, cuts } => {
            let x = read_dds::<f64>(&real)?;
            let xg = read_dds::<f64>(&gen)?;
            let text = std::fs::read(&profile)?;
            let rows = read_profile_csv(text.as_slice())?;
            std::fs::create_dir_all(&out_dir)?;
            write_pgms(&x, "real", &out_dir, max_images)?;
            write_pgms(&xg, "gen", &out_dir, max_images)?;
            std::fs::write(out_dir.join("profile.svg"), profile_svg(&rows, &cut_ranks(&rows, cuts)))?;
        }
    }
    Ok(())
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("DDGEN_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Argument(format!("DDGEN_THREADS must be a positive integer, got `{raw}`")))?;
    // a pool built earlier in this process stays in place
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Runs one command; returns the process exit status.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match configure_threads().and_then(|()| execute(cli.command)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_and_payload() {
        let bytes = pgm_bytes(&[0.0, 0.5, 1.0, 0.2], 2, 2);
        assert_eq!(&bytes[..11], b"P5\n2 2\n255\n");
        assert_eq!(&bytes[11..], &[0, 128, 255, 51]);
    }

    #[test]
    fn svg_marks_cuts() {
        let rows: Vec<ProfileRow> = (0..6)
            .map(|r| ProfileRow { rank: r, dual_value: r as f64, original_index: r, d_knn: (r == 3).then_some(1.0) })
            .collect();
        let svg = profile_svg(&rows, &cut_ranks(&rows, 1));
        assert_eq!(svg.matches("<circle").count(), 6);
        assert_eq!(svg.matches("stroke=\"red\"").count(), 1);
        assert!(svg.starts_with("<svg"));
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["ddgen"]), 2);
        assert_eq!(run(["ddgen", "train", "--bogus"]), 2);
        assert_eq!(run(["ddgen", "--help"]), 0);
    }
}
