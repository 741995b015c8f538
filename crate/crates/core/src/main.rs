use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use svtrv2::backbone::Variant;
use svtrv2::ctc::greedy_decode;
use svtrv2::frm::{effective_rearrangement, head_mean};
use svtrv2::model::images_to_batch;
use svtrv2::msr::{load_manifest, pnm, resize_bilinear, Charset, RawSample, ResizeMode};
use svtrv2::synth::{make_dataset, GlyphFont, Profile, DEFAULT_ALPHABET};
use svtrv2::tensor::{Tape, Tensor};
use svtrv2::train::{
    bench_inference, evaluate, load_checkpoint, load_checkpoint_for, train, Checkpoint, Event, TrainConfig, WallTimer,
};
use svtrv2::{gradcheck, Error, Result};

#[derive(Parser)]
#[command(name = "svtrv2", version, about = "CTC scene-text recognizer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Two-phase training from a key = value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        resize: Option<ResizeMode>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        model: Option<Variant>,
    },
    /// Word accuracy overall, per bucket and per profile.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "msr")]
        resize: ResizeMode,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        /// CSV report path.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Batch-size-1 timing averaged per text length.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "msr")]
        resize: ResizeMode,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Writes a synthetic dataset: images/, manifest.tsv, charset.txt.
    Synth {
        #[arg(long)]
        profile: Profile,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = DEFAULT_ALPHABET)]
        alphabet: String,
    },
    /// Runs the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Recognizes one PGM image.
    Decode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value = "msr")]
        resize: ResizeMode,
        /// Writes the row-wise and column-wise rearrangement weights as CSV.
        #[arg(long)]
        dump_rearrangement: Option<PathBuf>,
        /// Writes per-character guidance attention maps as CSV (needs a
        /// checkpoint with the guidance branch and `--label`).
        #[arg(long)]
        dump_sgm_attn: Option<PathBuf>,
        #[arg(long)]
        label: Option<String>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train {
            config,
            data,
            out,
            resize,
            batch_size,
            seed,
            model,
        } => {
            let mut cfg = TrainConfig::load(&config)?;
            cfg.data = data.or(cfg.data);
            cfg.out_dir = out.or(cfg.out_dir);
            cfg.resize = resize.unwrap_or(cfg.resize);
            cfg.batch_size = batch_size.unwrap_or(cfg.batch_size);
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.variant = model.unwrap_or(cfg.variant);
            cfg.validate()?;
            cmd_train(&cfg)
        }
        Command::Eval {
            ckpt,
            data,
            resize,
            batch_size,
            report,
        } => {
            let (ckpt, samples) = load_eval_inputs(&ckpt, &data)?;
            let (model, store) = ckpt.to_model()?;
            let r = evaluate(&model, &store, &ckpt.charset, &samples, resize, batch_size)?;
            print!("{}", r.to_csv());
            if let Some(p) = report {
                r.write_csv(&p)?;
            }
            Ok(())
        }
        Command::Bench {
            ckpt,
            data,
            resize,
            report,
        } => {
            let (ckpt, samples) = load_eval_inputs(&ckpt, &data)?;
            let (model, store) = ckpt.to_model()?;
            let r = bench_inference(&model, &store, &samples, resize, &mut WallTimer)?;
            print!("{}", r.to_csv());
            println!("fps,,{:.3}", r.fps);
            if let Some(p) = report {
                fs::write(&p, r.to_csv()).map_err(|e| Error::io(&p, e))?;
            }
            Ok(())
        }
        Command::Synth {
            profile,
            n,
            seed,
            out,
            alphabet,
        } => {
            let font = GlyphFont::new(&alphabet)?;
            let manifest = make_dataset(profile, n, seed, &font, &out)?;
            println!("{}", manifest.display());
            Ok(())
        }
        Command::Gradcheck { seed } => {
            let entries = gradcheck::run_suite(seed)?;
            let mut failed = 0;
            for e in &entries {
                let ok = e.passes();
                failed += usize::from(!ok);
                println!(
                    "{} {:<16} max_rel_err={:.3e} tol={:.0e} checked={}",
                    if ok { "PASS" } else { "FAIL" },
                    e.name,
                    e.report.max_rel_err,
                    e.tolerance,
                    e.report.checked
                );
            }
            if failed > 0 {
                return Err(Error::Contract(format!("{failed} gradient checks failed")));
            }
            Ok(())
        }
        Command::Decode {
            ckpt,
            image,
            resize,
            dump_rearrangement,
            dump_sgm_attn,
            label,
        } => cmd_decode(&ckpt, &image, resize, dump_rearrangement, dump_sgm_attn, label),
    }
}

fn charset_for(manifest: &Path) -> Result<Option<Charset>> {
    let p = manifest.parent().unwrap_or(Path::new(".")).join("charset.txt");
    if p.exists() {
        Charset::load(&p).map(Some)
    } else {
        Ok(None)
    }
}

fn load_eval_inputs(ckpt: &Path, data: &Path) -> Result<(Checkpoint, Vec<RawSample>)> {
    let ckpt = match charset_for(data)? {
        Some(cs) => load_checkpoint_for(ckpt, &cs)?,
        None => load_checkpoint(ckpt)?,
    };
    let samples = load_manifest(data, &ckpt.charset)?;
    if samples.is_empty() {
        return Err(Error::Input(format!("{} lists no samples", data.display())));
    }
    Ok((ckpt, samples))
}

fn cmd_train(cfg: &TrainConfig) -> Result<()> {
    let data = cfg
        .data
        .as_deref()
        .ok_or_else(|| Error::Config("no training manifest (set data = ... or --data)".into()))?;
    let charset = match &cfg.charset {
        Some(p) => Charset::load(p)?,
        None => charset_for(data)?.ok_or_else(|| Error::Config("no charset.txt next to the manifest".into()))?,
    };
    let samples = load_manifest(data, &charset)?;
    let outcome = train(cfg, &samples, &charset, &mut |e| match e {
        Event::Step(s) => log::info!(
            "phase {} step {} lr {:.3e} loss {:.5} ctc {:.4} sgm {} grad {:.3}{}",
            s.phase,
            s.step,
            s.lr,
            s.loss,
            s.ctc,
            s.sgm.map_or("-".into(), |v| format!("{v:.4}")),
            s.grad_norm,
            if s.clipped { " (clipped)" } else { "" }
        ),
        Event::Epoch(e) => log::info!(
            "phase {} epoch {} mean loss {:.5} val acc {}",
            e.phase,
            e.epoch,
            e.mean_loss,
            e.val_accuracy.map_or("-".into(), |a| format!("{a:.4}"))
        ),
        Event::Saved(phase, p) => log::info!("saved phase {phase} checkpoint to {}", p.display()),
    })?;
    if outcome.skipped > 0 {
        log::warn!("{} samples skipped as unalignable", outcome.skipped);
    }
    if outcome.excluded_long > 0 {
        log::info!(
            "{} samples above the label length cap were excluded",
            outcome.excluded_long
        );
    }
    if cfg.out_dir.is_none() {
        log::warn!("no out_dir set; checkpoints were not written");
    }
    Ok(())
}

fn cmd_decode(
    ckpt: &Path,
    image: &Path,
    resize: ResizeMode,
    dump_rearrangement: Option<PathBuf>,
    dump_sgm_attn: Option<PathBuf>,
    label: Option<String>,
) -> Result<()> {
    let ckpt = load_checkpoint(ckpt)?;
    let (model, store) = ckpt.to_model()?;
    let raw = pnm::read(image)?;
    let (h, w) = (raw.shape()[1], raw.shape()[2]);
    let img = resize_bilinear(&raw, resize.target(h, w)?)?;
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(images_to_batch(&[&img])?);
    let fwd = model.forward(&mut tape, &store, x)?;
    let logits = tape.value(fwd.logits);
    let (frames, classes) = (logits.shape()[1], logits.shape()[2]);
    let decoded = greedy_decode(&logits.reshape(&[frames, classes])?)?;
    println!("{}\t{:.4}", ckpt.charset.decode(&decoded.indices), decoded.confidence);

    if let Some(path) = dump_rearrangement {
        let (gh, gw) = fwd.features.grid;
        let (Some(hv), Some(vv)) = (fwd.sequence.horizontal, fwd.sequence.vertical) else {
            return Err(Error::Config(format!(
                "sequence head {} has no rearrangement",
                model.config.head
            )));
        };
        let heads = model.config.backbone.heads[2];
        let mh = head_mean(&tape.value(hv).cast::<f64>(), 1, gh, heads, 0)?;
        let mv = tape.value(vv).cast::<f64>().reshape(&[gw, gh])?;
        let eff = effective_rearrangement(&mh, &mv)?;
        let mut s = String::from("matrix,grid_row,row,col,value\n");
        for i in 0..gh {
            for r in 0..gw {
                for c in 0..gw {
                    let _ = writeln!(s, "horizontal,{i},{r},{c},{:.8}", mh.data()[(i * gw + r) * gw + c]);
                }
            }
        }
        for r in 0..gw {
            for c in 0..gh {
                let _ = writeln!(s, "vertical,,{r},{c},{:.8}", mv.data()[r * gh + c]);
            }
        }
        for r in 0..gw {
            for c in 0..gh * gw {
                let _ = writeln!(s, "effective,,{r},{c},{:.8}", eff.data()[r * gh * gw + c]);
            }
        }
        fs::write(&path, s).map_err(|e| Error::io(&path, e))?;
    }

    if let Some(path) = dump_sgm_attn {
        let text = label.ok_or_else(|| Error::Config("--dump-sgm-attn needs --label".into()))?;
        let idx = ckpt
            .charset
            .encode(&text)
            .ok_or_else(|| Error::Input(format!("label {text:?} has characters outside the charset")))?;
        let out = model.sgm_loss(&mut tape, &store, &fwd.features, &[idx])?;
        let (gh, gw) = fwd.features.grid;
        let chars: Vec<char> = text.chars().collect();
        let mut s = String::from("side,position,char,cell_row,cell_col,value\n");
        for (side, sv) in [("left", out.left), ("right", out.right)] {
            let a: Tensor<f32> = tape.value(sv.visual_attn);
            for (p, ch) in chars.iter().enumerate() {
                for cell in 0..gh * gw {
                    let v = a.data()[p * gh * gw + cell];
                    let _ = writeln!(s, "{side},{p},{ch},{},{},{v:.8}", cell / gw, cell % gw);
                }
            }
        }
        fs::write(&path, s).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
