//! Command-line driver: train, translate, eval, ablate-tr, make-synth.
//!
//! Exit codes: 0 success, 1 usage/configuration error, 2 runtime numeric
//! failure. Every command echoes its effective configuration into the
//! output directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dualdiff::checkpoint::{write_container, ContainerHeader, TensorRecord, FORMAT_VERSION};
use dualdiff::config::RunConfig;
use dualdiff::data::{
    load_folder, load_folder_native, make_synthetic_domains, save_image, DomainTag, SyntheticKind,
};
use dualdiff::fid::fid_report;
use dualdiff::rng::{mix_seed, Prng};
use dualdiff::sample::{
    ablate_release_time, format_ablation_table, translate_with, write_trajectory, SamplerConfig,
};
use dualdiff::train::{train_loop, TrainState};
use dualdiff::{Error, Result};

#[derive(Parser)]
#[command(name = "dualdiff", version, about = "Unpaired image translation with dual-domain diffusion models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Flat key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, repeatable: --set key=value.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Shorthand for --set seed=N.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train the dual-domain models on an unpaired dataset.
    Train {
        #[command(flatten)]
        common: ConfigArgs,
        /// Resume from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Translate a folder of images with a trained checkpoint.
    Translate {
        #[command(flatten)]
        common: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Folder of source-domain images.
        #[arg(long)]
        input: PathBuf,
        /// a2b or b2a.
        #[arg(long)]
        direction: String,
        /// Release time override (defaults to the configured value).
        #[arg(long)]
        release_time: Option<usize>,
    },
    /// Frechet-style distance between a real and a generated folder.
    Eval {
        #[command(flatten)]
        common: ConfigArgs,
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        generated: PathBuf,
        /// Row label for the report.
        #[arg(long, default_value = "a2b")]
        direction: String,
    },
    /// Sweep the release time and score each setting.
    AblateTr {
        #[command(flatten)]
        common: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Folder of source-domain images.
        #[arg(long)]
        input: PathBuf,
        /// Folder of real target-domain images scored against.
        #[arg(long)]
        reference: PathBuf,
        /// Comma-separated release times, e.g. 1,12,25.
        #[arg(long)]
        release_times: String,
        #[arg(long, default_value = "a2b")]
        direction: String,
    },
    /// Generate a synthetic unpaired domain pair in the four-folder layout.
    MakeSynth {
        #[command(flatten)]
        common: ConfigArgs,
        /// invert, shift_bright or blobs_to_edges.
        #[arg(long)]
        kind: String,
        /// Images per folder.
        #[arg(long)]
        count: usize,
        /// Square image size.
        #[arg(long)]
        size: usize,
    },
}

fn effective_config(common: &ConfigArgs, base: Option<RunConfig>) -> Result<RunConfig> {
    let mut run = base.unwrap_or_default();
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        run.apply_str(&text)?;
    }
    for set in &common.sets {
        let (key, value) = set
            .split_once('=')
            .ok_or_else(|| Error::config(format!("--set wants key=value, got {set:?}")))?;
        run.set(key.trim(), value.trim())?;
    }
    if let Some(seed) = common.seed {
        run.seed = seed;
    }
    run.validate()?;
    Ok(run)
}

fn write_config_echo(out: &Path, run: &RunConfig) -> Result<()> {
    fs::create_dir_all(out)?;
    let echo = format!("# dualdiff {}\n{}", env!("CARGO_PKG_VERSION"), run.echo());
    fs::write(out.join("config.txt"), echo)?;
    Ok(())
}

fn cmd_train(common: &ConfigArgs, resume: Option<&Path>) -> Result<()> {
    let (mut state, run) = match resume {
        Some(path) => {
            let (state, embedded) = TrainState::load(path)?;
            // overrides on top of the checkpoint's configuration
            let run = effective_config(common, Some(embedded))?;
            (state, run)
        }
        None => {
            let run = effective_config(common, None)?;
            (TrainState::init(&run)?, run)
        }
    };
    if run.data_root.is_empty() {
        return Err(Error::config("data_root must point at a dataset".to_string()));
    }
    write_config_echo(&common.out, &run)?;

    let root = PathBuf::from(&run.data_root);
    let ds_a = load_folder(&root.join("trainA"), run.image_size, run.channels, DomainTag::A)?;
    let ds_b = load_folder(&root.join("trainB"), run.image_size, run.channels, DomainTag::B)?;
    let sched = run.schedule()?;

    let metrics_path = common.out.join("metrics.txt");
    let mut metrics = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)?;

    let outcome = train_loop(
        &mut state,
        &run,
        &ds_a.dataset,
        &ds_b.dataset,
        &sched,
        Some(&common.out),
        &mut metrics,
    );
    match outcome {
        Err(err) => {
            if matches!(err, Error::NonFinite(_)) {
                // diagnostic dump of the aborted state
                let dump = common.out.join("abort-state.bin");
                let _ = state.save(&dump, &run);
                eprintln!("state dumped to {}", dump.display());
            }
            Err(err)
        }
        Ok(written) => {
            println!("trained to step {} ({} checkpoints)", state.step, written.len());
            Ok(())
        }
    }
}

fn cmd_translate(
    common: &ConfigArgs,
    checkpoint: &Path,
    input: &Path,
    direction: &str,
    release_time: Option<usize>,
) -> Result<()> {
    let (state, embedded) = TrainState::load(checkpoint)?;
    let mut run = effective_config(common, Some(embedded))?;
    if let Some(tr) = release_time {
        run.release_time = tr;
        run.validate()?;
    }
    write_config_echo(&common.out, &run)?;

    let (den_src, den_tgt) = match direction {
        "a2b" => (&state.denoiser_a, &state.denoiser_b),
        "b2a" => (&state.denoiser_b, &state.denoiser_a),
        other => return Err(Error::config(format!("direction {other:?} (use a2b or b2a)"))),
    };

    let loaded = load_folder_native(input, run.channels, DomainTag::A)?;
    let want = [run.channels, run.image_size, run.image_size];
    if loaded.dataset.item_shape() != want {
        return Err(Error::shape(format!(
            "input images are {:?} but the checkpoint was trained on {want:?}",
            loaded.dataset.item_shape()
        )));
    }

    let sched = run.schedule()?;
    fs::create_dir_all(&common.out)?;
    for (i, (item, name)) in loaded
        .dataset
        .items
        .iter()
        .zip(&loaded.dataset.names)
        .enumerate()
    {
        let shape = item.shape();
        let batched = dualdiff::tensor::Array::new(
            vec![1, shape[0], shape[1], shape[2]],
            item.data().to_vec(),
        )?;
        let cfg = run.sampler_config(mix_seed(run.seed, i as u64));
        let result = match translate_with(den_src, den_tgt, &batched, &cfg, &sched) {
            Ok(r) => r,
            Err(Error::SamplerAbort { message, dump }) => {
                let path = common.out.join(format!("trajectory-abort-{name}.bin"));
                dump_abort(&path, &cfg, &run, &dump)?;
                eprintln!("trajectory dumped to {}", path.display());
                return Err(Error::SamplerAbort { message, dump: Vec::new() });
            }
            Err(other) => return Err(other),
        };
        let out_item = dualdiff::tensor::Array::new(
            vec![shape[0], shape[1], shape[2]],
            result.output.into_data(),
        )?;
        // chain outputs can overshoot the image range slightly
        let out_item = out_item.map(|v| v.clamp(-1.0, 1.0));
        save_image(&out_item, &common.out.join(format!("{name}_{direction}.png")))?;
        if let Some(traj) = &result.trajectory {
            write_trajectory(
                &common.out.join(format!("trajectory-{name}.bin")),
                traj,
                &cfg,
                &run.echo(),
            )?;
        }
    }
    println!("translated {} images", loaded.dataset.len());
    Ok(())
}

fn dump_abort(
    path: &Path,
    cfg: &SamplerConfig,
    run: &RunConfig,
    dump: &[(String, dualdiff::tensor::Array)],
) -> Result<()> {
    let records: Vec<TensorRecord> = dump
        .iter()
        .map(|(name, value)| TensorRecord { name: name.clone(), value: value.clone() })
        .collect();
    let header = ContainerHeader {
        version: FORMAT_VERSION,
        step: cfg.chain_len as u64,
        config_echo: run.echo(),
        rng_state: Prng::seed_from(cfg.seed).state(),
    };
    write_container(path, &header, &records)
}

fn cmd_eval(common: &ConfigArgs, real: &Path, generated: &Path, direction: &str) -> Result<()> {
    let run = effective_config(common, None)?;
    write_config_echo(&common.out, &run)?;
    let extractor = run.fid_extractor()?;
    let report = fid_report(
        real,
        generated,
        &extractor,
        run.channels,
        direction,
        &common.out.join("fid-report.txt"),
    )?;
    print!("{}", report.render());
    Ok(())
}

fn cmd_ablate(
    common: &ConfigArgs,
    checkpoint: &Path,
    input: &Path,
    reference: &Path,
    release_times: &str,
    direction: &str,
) -> Result<()> {
    let (state, embedded) = TrainState::load(checkpoint)?;
    let run = effective_config(common, Some(embedded))?;
    write_config_echo(&common.out, &run)?;

    let t_r_list: Vec<usize> = release_times
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::config(format!("bad release time {s:?}")))
        })
        .collect::<Result<Vec<_>>>()?;

    let (den_src, den_tgt) = match direction {
        "a2b" => (&state.denoiser_a, &state.denoiser_b),
        "b2a" => (&state.denoiser_b, &state.denoiser_a),
        other => return Err(Error::config(format!("direction {other:?} (use a2b or b2a)"))),
    };

    let loaded = load_folder_native(input, run.channels, DomainTag::A)?;
    let want = [run.channels, run.image_size, run.image_size];
    if loaded.dataset.item_shape() != want {
        return Err(Error::shape(format!(
            "input images are {:?} but the checkpoint was trained on {want:?}",
            loaded.dataset.item_shape()
        )));
    }
    let reference = load_folder_native(reference, run.channels, DomainTag::B)?;
    let extractor = run.fid_extractor()?;
    let sched = run.schedule()?;
    let cfg = run.sampler_config(run.seed);

    let rows = ablate_release_time(
        den_src,
        den_tgt,
        &loaded.dataset.items,
        &t_r_list,
        &cfg,
        &sched,
        |outputs| dualdiff::fid::fid_between(&reference.dataset.items, outputs, &extractor),
    )?;

    let (table, csv) = format_ablation_table(&rows);
    fs::write(common.out.join("ablation.txt"), &table)?;
    fs::write(common.out.join("ablation.csv"), &csv)?;
    print!("{table}");
    Ok(())
}

fn cmd_make_synth(common: &ConfigArgs, kind: &str, count: usize, size: usize) -> Result<()> {
    let mut run = effective_config(common, None)?;
    run.image_size = size;
    write_config_echo(&common.out, &run)?;
    let kind = SyntheticKind::parse(kind)?;

    let (train_a, train_b) = make_synthetic_domains(kind, count, size, run.seed)?;
    let (test_a, test_b) = make_synthetic_domains(kind, count, size, mix_seed(run.seed, 0x7e57))?;
    for (sub, ds) in [
        ("trainA", &train_a),
        ("trainB", &train_b),
        ("testA", &test_a),
        ("testB", &test_b),
    ] {
        let dir = common.out.join(sub);
        fs::create_dir_all(&dir)?;
        for (item, name) in ds.items.iter().zip(&ds.names) {
            save_image(item, &dir.join(format!("{name}.png")))?;
        }
    }
    println!("wrote 4 x {count} {kind} images under {}", common.out.display());
    Ok(())
}

fn run() -> Result<()> {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // render clap's message but keep our exit-code contract
            let is_help = matches!(
                err.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = err.print();
            std::process::exit(if is_help { 0 } else { 1 });
        }
    };
    match &cli.command {
        Command::Train { common, resume } => cmd_train(common, resume.as_deref()),
        Command::Translate { common, checkpoint, input, direction, release_time } => {
            cmd_translate(common, checkpoint, input, direction, *release_time)
        }
        Command::Eval { common, real, generated, direction } => {
            cmd_eval(common, real, generated, direction)
        }
        Command::AblateTr { common, checkpoint, input, reference, release_times, direction } => {
            cmd_ablate(common, checkpoint, input, reference, release_times, direction)
        }
        Command::MakeSynth { common, kind, count, size } => {
            cmd_make_synth(common, kind, *count, *size)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::NonFinite(_) | Error::SamplerAbort { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
