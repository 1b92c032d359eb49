//! Command-line front end.
//!
//! Exit codes: 0 success, 1 validation/usage failure, 2 numeric check failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crkit::crselector::crselector_forward_traced;
use crkit::eval::{evaluate, EvalConfig, Interpolation};
use crkit::gradcheck::{check_all, check_named, GradCheckReport};
use crkit::rng::RngState;
use crkit::sca::{sca_forward, PyramidFeatures};
use crkit::{fixtures, io, Error, Result};

#[derive(Parser)]
#[command(name = "crkit", version, about = "Critical-region attention, scale gating, gradient checks, and detection metrics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the critical-region selector on a feature map and guidance image.
    Crselector {
        /// Input feature map (CRT1).
        #[arg(long)]
        features: PathBuf,
        /// Guidance image (CRT1).
        #[arg(long)]
        image: PathBuf,
        /// Parameter bundle (CRP1).
        #[arg(long)]
        params: PathBuf,
        /// Output directory.
        #[arg(long)]
        out_dir: PathBuf,
        /// Override the seed stored in the parameter bundle.
        #[arg(long)]
        seed: Option<u64>,
        /// Use soft (probabilistic) key masks instead of hard 0/1 masks.
        #[arg(long)]
        soft_mask: bool,
        /// Override the mask temperature.
        #[arg(long)]
        tau: Option<f32>,
        /// Override the window size.
        #[arg(long)]
        window_size: Option<usize>,
        /// Override the offset range.
        #[arg(long)]
        r: Option<f32>,
    },
    /// Apply scale-aware gating to a feature pyramid.
    Sca {
        /// Gate parameters (SCA1).
        #[arg(long)]
        params: PathBuf,
        /// Output directory.
        #[arg(long)]
        out_dir: PathBuf,
        /// Echoed in output metadata; the gating itself is deterministic.
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Pyramid level tensors (CRT1), coarsest-to-finest order is up to the caller.
        #[arg(required = true)]
        levels: Vec<PathBuf>,
    },
    /// Check analytic gradients against central finite differences.
    Gradcheck {
        /// Module to check: all, tensor-core, crselector, or sca-head.
        #[arg(long, default_value = "all")]
        module: String,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Override the pass threshold on relative error (applies to every
        /// report line; the built-in per-op tolerances are used by default).
        #[arg(long)]
        threshold: Option<f64>,
        /// Also write the report into this directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Score detections against ground truth (COCO-style mAP).
    Eval {
        /// Detection records: image_id class_id x1 y1 x2 y2 score.
        #[arg(long)]
        dets: PathBuf,
        /// Ground-truth records: image_id class_id x1 y1 x2 y2.
        #[arg(long)]
        gts: PathBuf,
        /// Use 11-point interpolation instead of 101-point.
        #[arg(long)]
        voc11: bool,
        /// Echoed in output metadata; scoring is deterministic.
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Also write the report into this directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Generate the deterministic fixture set.
    GenFixtures {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Crselector {
            features,
            image,
            params,
            out_dir,
            seed,
            soft_mask,
            tau,
            window_size,
            r,
        } => cmd_crselector(
            &features,
            &image,
            &params,
            &out_dir,
            seed,
            soft_mask,
            tau,
            window_size,
            r,
        ),
        Command::Sca {
            params,
            out_dir,
            seed,
            levels,
        } => cmd_sca(&params, &out_dir, seed, &levels),
        Command::Gradcheck {
            module,
            seed,
            threshold,
            out_dir,
        } => cmd_gradcheck(&module, seed, threshold, out_dir.as_deref()),
        Command::Eval {
            dets,
            gts,
            voc11,
            seed,
            out_dir,
        } => cmd_eval(&dets, &gts, voc11, seed, out_dir.as_deref()),
        Command::GenFixtures { seed, out_dir } => {
            ensure_dir(&out_dir)?;
            let manifest = fixtures::generate(&out_dir, seed)?;
            print!("{manifest}");
            Ok(ExitCode::SUCCESS)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_crselector(
    features: &Path,
    image: &Path,
    params: &Path,
    out_dir: &Path,
    seed: Option<u64>,
    soft_mask: bool,
    tau: Option<f32>,
    window_size: Option<usize>,
    r: Option<f32>,
) -> Result<ExitCode> {
    ensure_dir(out_dir)?;
    let x = io::load_tensor(features)?;
    let img = io::load_tensor(image)?;
    let (mut p, stored_seed) = io::load_crselector_params(params)?;
    let seed = seed.unwrap_or(stored_seed);
    if soft_mask {
        p.hard_mask = false;
    }
    if let Some(t) = tau {
        p.tau = t;
    }
    if let Some(m) = window_size {
        p.m = m;
    }
    if let Some(rv) = r {
        p.r = rv;
    }
    p.validate()?;

    let trace = crselector_forward_traced(&x, &img, &p, &RngState::new(seed))?;
    io::save_tensor(&out_dir.join("output.crt1"), &trace.out)?;

    let km = &trace.keymask;
    let mut mask_text = String::new();
    for n in 0..km.batch {
        mask_text.push_str(&format!("batch {n}\n"));
        for wi in 0..km.grid_h {
            let row: Vec<String> = (0..km.grid_w)
                .map(|wj| format!("{:.4}", km.at(n, wi, wj)))
                .collect();
            mask_text.push_str(&row.join(" "));
            mask_text.push('\n');
        }
    }
    io::write_text(&out_dir.join("keymask.txt"), &mask_text)?;

    let xs = x.shape();
    let os = trace.out.shape();
    io::atomic_write(
        &out_dir.join("input_heatmap.pgm"),
        &io::encode_pgm(xs.w, xs.h, &io::channel_mean_heatmap(&x, 0)),
    )?;
    io::atomic_write(
        &out_dir.join("output_heatmap.pgm"),
        &io::encode_pgm(os.w, os.h, &io::channel_mean_heatmap(&trace.out, 0)),
    )?;

    let kept: usize = km.values.iter().filter(|v| **v > 0.5).count();
    let meta = format!(
        "command=crselector\nseed={}\ninput_shape={}\noutput_shape={}\nwindow_size={}\nr={}\ntau={}\nmask={}\nwindows_kept={}/{}\n",
        seed,
        xs,
        os,
        p.m,
        p.r,
        p.tau,
        if p.hard_mask { "hard" } else { "soft" },
        kept,
        km.values.len(),
    );
    io::write_text(&out_dir.join("meta.txt"), &meta)?;
    print!("{meta}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_sca(params: &Path, out_dir: &Path, seed: u64, levels: &[PathBuf]) -> Result<ExitCode> {
    ensure_dir(out_dir)?;
    let p = io::load_sca_params(params)?;
    let mut tensors = Vec::new();
    for path in levels {
        tensors.push(io::load_tensor(path)?);
    }
    let pyramid = PyramidFeatures::new(tensors)?;
    let (out, gamma) = sca_forward(&pyramid, &p)?;

    let mut gamma_text = String::new();
    for n in 0..gamma.batch {
        let row: Vec<String> = (0..gamma.num_levels)
            .map(|h| format!("{:.6}", gamma.gamma[n * gamma.num_levels + h]))
            .collect();
        gamma_text.push_str(&format!("batch {n}: {}\n", row.join(" ")));
    }
    io::write_text(&out_dir.join("gamma.txt"), &gamma_text)?;

    for (i, level) in out.levels().iter().enumerate() {
        io::save_tensor(&out_dir.join(format!("level{i}_out.crt1")), level)?;
    }

    let meta = format!(
        "command=sca\nseed={seed}\nlevels={}\nbatch={}\nchannels={}\n{}",
        levels.len(),
        gamma.batch,
        p.gate_conv.c_in,
        gamma_text,
    );
    io::write_text(&out_dir.join("meta.txt"), &meta)?;
    print!("{meta}");
    Ok(ExitCode::SUCCESS)
}

fn format_report_line(r: &GradCheckReport) -> String {
    format!(
        "op={} path={} coord={} analytic={:.9e} numeric={:.9e} rel_err={:.3e} pass={}",
        r.op_name, r.param_path, r.coord, r.analytic, r.numeric, r.rel_err, r.pass
    )
}

fn cmd_gradcheck(
    module: &str,
    seed: u64,
    threshold: Option<f64>,
    out_dir: Option<&Path>,
) -> Result<ExitCode> {
    let mut reports = if module == "all" {
        check_all(seed)
    } else {
        check_named(module, seed)?
    };
    if let Some(t) = threshold {
        for r in &mut reports {
            r.pass = r.rel_err < t;
        }
    }
    let mut text = String::new();
    for r in &reports {
        text.push_str(&format_report_line(r));
        text.push('\n');
    }
    let failures = reports.iter().filter(|r| !r.pass).count();
    text.push_str(&format!(
        "checked={} failed={} seed={}\n",
        reports.len(),
        failures,
        seed
    ));
    print!("{text}");
    if let Some(dir) = out_dir {
        ensure_dir(dir)?;
        io::write_text(&dir.join("gradcheck.txt"), &text)?;
    }
    Ok(if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.4}"),
        None => "n/a".into(),
    }
}

fn cmd_eval(
    dets: &Path,
    gts: &Path,
    voc11: bool,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<ExitCode> {
    let det_text =
        std::fs::read_to_string(dets).map_err(|e| Error::io(dets.display().to_string(), e))?;
    let gt_text =
        std::fs::read_to_string(gts).map_err(|e| Error::io(gts.display().to_string(), e))?;
    let detections = io::parse_detections(&det_text)?;
    let ground_truth = io::parse_ground_truth(&gt_text)?;
    let config = EvalConfig {
        interpolation: if voc11 {
            Interpolation::Voc11
        } else {
            Interpolation::Coco101
        },
    };
    let result = evaluate(&detections, &ground_truth, &config);

    let mut text = String::new();
    text.push_str(&format!(
        "{:<10} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
        "class", "AP", "AP50", "APs", "APm", "APl"
    ));
    for (class_id, ap) in &result.per_class {
        text.push_str(&format!(
            "{:<10} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
            class_id,
            fmt_opt(*ap),
            "-",
            "-",
            "-",
            "-"
        ));
    }
    text.push_str(&format!(
        "{:<10} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
        "all",
        fmt_opt(result.map),
        fmt_opt(result.map50),
        fmt_opt(result.map_s),
        fmt_opt(result.map_m),
        fmt_opt(result.map_l)
    ));
    text.push('\n');
    text.push_str(&format!("seed={seed}\n"));
    text.push_str(&format!("map={}\n", fmt_opt(result.map)));
    text.push_str(&format!("map50={}\n", fmt_opt(result.map50)));
    text.push_str(&format!("map_small={}\n", fmt_opt(result.map_s)));
    text.push_str(&format!("map_medium={}\n", fmt_opt(result.map_m)));
    text.push_str(&format!("map_large={}\n", fmt_opt(result.map_l)));
    for (class_id, ap) in &result.per_class {
        text.push_str(&format!("ap_class_{class_id}={}\n", fmt_opt(*ap)));
    }
    print!("{text}");
    if let Some(dir) = out_dir {
        ensure_dir(dir)?;
        io::write_text(&dir.join("eval.txt"), &text)?;
    }
    Ok(ExitCode::SUCCESS)
}
