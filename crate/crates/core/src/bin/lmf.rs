use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lmf_core::cmsr::{build_scale2mods_table, cmsr_render_detailed, Scale2ModsTable};
use lmf_core::cost::{CostReport, LmfDims, VanillaDims};
use lmf_core::decoder::{DecoderKind, LmfModel, Model, ModelConfig, VanillaModel};
use lmf_core::encoder::Encoder;
use lmf_core::pnm::{read_pnm, read_pnm_dir, write_pnm};
use lmf_core::tensor::Mlp;
use lmf_core::train::{mse, psnr, train_with, TrainConfig};
use lmf_core::{load_model, save_model, Error, Image, ModelFile, Result, TrainingMeta};

#[derive(Parser)]
#[command(name = "lmf", version, about = "Latent-modulated arbitrary-scale upsampling")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Decoder {
    Lmf,
    Vanilla,
    C2f,
}

impl From<Decoder> for DecoderKind {
    fn from(d: Decoder) -> Self {
        match d {
            Decoder::Lmf => DecoderKind::Lmf,
            Decoder::Vanilla => DecoderKind::Vanilla,
            Decoder::C2f => DecoderKind::C2f,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Liif,
    LmLiif,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a desk-scale model on every netpbm image in a directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        patch: usize,
        #[arg(long, default_value_t = 1.0)]
        scale_min: f64,
        #[arg(long, default_value_t = 4.0)]
        scale_max: f64,
        #[arg(long, value_enum, default_value_t = Decoder::Lmf)]
        decoder: Decoder,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long)]
        flips: bool,
        /// write the loss curve as CSV
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    Upsample {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        scale: f64,
        #[arg(long)]
        out: PathBuf,
        /// fail unless the model file holds this decoder
        #[arg(long, value_enum)]
        decoder: Option<Decoder>,
        #[arg(long)]
        count_macs: bool,
    },
    BuildTable {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 2e-5)]
        tau: f64,
        #[arg(long, value_delimiter = ',', default_value = "2,3,4,6,8")]
        scales: Vec<f64>,
        #[arg(long, default_value_t = 0.01)]
        u: f64,
        #[arg(long)]
        out: PathBuf,
    },
    Cmsr {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        table: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        scale: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count_macs: bool,
    },
    /// Closed-form decoder cost, optionally checked against an instrumented run.
    Profile {
        #[arg(long, value_enum)]
        dims_preset: Preset,
        #[arg(long)]
        h: usize,
        #[arg(long)]
        w: usize,
        #[arg(long)]
        scale: f64,
        /// also run a randomly initialized decoder of those dims and count
        #[arg(long)]
        execute: bool,
        #[arg(long)]
        key_values: bool,
    },
    Eval {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
    CompareCmsr {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        table: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        scale: f64,
    },
}

fn load_table(path: &Path) -> Result<Scale2ModsTable> {
    Scale2ModsTable::from_text(&std::fs::read_to_string(path)?)
}

fn load_lmf(path: &Path) -> Result<LmfModel> {
    match load_model(path)?.model {
        Model::Lmf(m) => Ok(m),
        other => Err(Error::InvalidModel(format!(
            "CMSR needs an lmf model, file holds {}",
            other.kind().name()
        ))),
    }
}

fn print_macs(label: &str, costs: &lmf_core::StageCosts) {
    println!("{label} encoder_macs={}", costs.encoder.linear);
    println!("{label} latent_macs={}", costs.latent.linear);
    println!("{label} render_macs={}", costs.render.linear);
    println!("{label} overhead={}", costs.overhead());
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Train {
            data,
            out,
            steps,
            seed,
            patch,
            scale_min,
            scale_max,
            decoder,
            lr,
            batch,
            flips,
            loss_csv,
        } => {
            let images: Vec<Image> = read_pnm_dir(&data)?.into_iter().map(|(_, i)| i).collect();
            if images.is_empty() {
                return Err(Error::Data(format!("no .ppm/.pgm images in {}", data.display())));
            }
            let mut cfg_model = ModelConfig::DESK;
            cfg_model.channels = images[0].channels();
            let model = Model::init(decoder.into(), &cfg_model, &mut ChaCha8Rng::seed_from_u64(seed))?;
            let cfg = TrainConfig {
                scale_min,
                scale_max,
                patch,
                pixels_per_patch: patch * patch,
                batch,
                lr,
                steps,
                decay_every: (steps / 2).max(1),
                seed,
                flips,
                ..TrainConfig::default()
            };
            let every = (steps / 20).max(1);
            let outcome = train_with(model, &images, &cfg, |r| {
                if r.step % every == 0 {
                    log::info!("step {} loss {:.6} lr {:e}", r.step, r.loss, r.lr);
                }
            })?;
            if let Some(p) = loss_csv {
                std::fs::write(p, outcome.curve.to_csv())?;
            }
            let (first, last) = outcome.curve.first_last_mean(20);
            println!("loss_first={first:.6} loss_last={last:.6}");
            save_model(
                &ModelFile {
                    model: outcome.model,
                    meta: TrainingMeta {
                        seed,
                        steps: steps as u64,
                    },
                },
                &out,
            )?;
        }
        Cmd::Upsample {
            model,
            input,
            scale,
            out,
            decoder,
            count_macs,
        } => {
            let file = load_model(&model)?;
            if let Some(d) = decoder {
                let want: DecoderKind = d.into();
                if want != file.model.kind() {
                    return Err(Error::Domain(format!(
                        "--decoder {} but model holds {}",
                        want.name(),
                        file.model.kind().name()
                    )));
                }
            }
            let img = read_pnm(&input)?;
            let (sr, stats) = file.model.upsample_counted(&img, scale)?;
            write_pnm(&sr.clamp01(), &out)?;
            if count_macs {
                print_macs(file.model.kind().name(), &stats.costs);
            }
        }
        Cmd::BuildTable {
            model,
            data,
            tau,
            scales,
            u,
            out,
        } => {
            let m = load_lmf(&model)?;
            let images: Vec<Image> = read_pnm_dir(&data)?.into_iter().map(|(_, i)| i).collect();
            let table = build_scale2mods_table(&m, &images, tau, &scales, u)?;
            for e in table.entries() {
                println!("s={} m=[{}, {})", e.scale, e.m_min, e.m_max);
            }
            std::fs::write(out, table.to_text())?;
        }
        Cmd::Cmsr {
            model,
            table,
            input,
            scale,
            out,
            count_macs,
        } => {
            let m = load_lmf(&model)?;
            let t = load_table(&table)?;
            let o = cmsr_render_detailed(&m, &read_pnm(&input)?, scale, &t)?;
            write_pnm(&o.image.clamp01(), &out)?;
            if count_macs {
                println!("rendered_pixels={} full_pixels={}", o.rendered_pixels, o.full_pixels);
                print_macs("cmsr", &o.costs);
            }
        }
        Cmd::Profile {
            dims_preset,
            h,
            w,
            scale,
            execute,
            key_values,
        } => {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut report = match dims_preset {
                Preset::Liif => CostReport::vanilla(&VanillaDims::LIIF, h, w, scale)?,
                Preset::LmLiif => CostReport::lmf(&LmfDims::LM_LIIF, h, w, scale)?,
            };
            if execute {
                let cfg = ModelConfig::LM_LIIF;
                let model = match dims_preset {
                    Preset::Liif => {
                        let enc = Encoder::tiny_conv(cfg.channels, cfg.encoder_width.unwrap(), cfg.encoder_layers, &mut rng);
                        Model::Vanilla(VanillaModel::new(
                            enc,
                            Mlp::init(&VanillaDims::LIIF.widths(), vec![], &mut rng)?,
                        )?)
                    }
                    Preset::LmLiif => Model::Lmf(LmfModel::init(&cfg, &mut rng)?),
                };
                let img = Image::from_fn(h, w, cfg.channels, |_, _, _| rng.gen());
                let (_, stats) = model.upsample_counted(&img, scale)?;
                report = report.with_instrumented(stats.costs);
            }
            if key_values {
                print!("{}", report.to_key_values());
            } else {
                print!("{}", report.to_report());
            }
            if report.matches() == Some(false) {
                return Err(Error::Numeric("instrumented count disagrees with the closed form".into()));
            }
        }
        Cmd::Eval { reference, test } => {
            let (a, b) = (read_pnm(&reference)?, read_pnm(&test)?);
            println!("mse={:.10e}", mse(&a, &b)?);
            println!("psnr_rgb_db={:.6}", psnr(&a, &b)?);
        }
        Cmd::CompareCmsr {
            model,
            table,
            input,
            scale,
        } => {
            let m = load_lmf(&model)?;
            let t = load_table(&table)?;
            let img = read_pnm(&input)?;
            let (full, full_stats) = lmf_core::decoder::upsample_counted(&m, &img, scale)?;
            let o = cmsr_render_detailed(&m, &img, scale, &t)?;
            let full_macs = full_stats.costs.decoder_linear();
            let cmsr_macs = o.costs.decoder_linear();
            println!("psnr_cmsr_vs_full_db={:.6}", psnr(&full, &o.image)?);
            println!("mse_cmsr_vs_full={:.10e}", mse(&full, &o.image)?);
            println!("rendered_pixels={} full_pixels={}", o.rendered_pixels, o.full_pixels);
            for (s, n) in &o.stages {
                println!("stage s={s} rendered={n}");
            }
            println!("decoder_macs_full={full_macs} decoder_macs_cmsr={cmsr_macs}");
            println!(
                "mac_savings_pct={:.4}",
                100.0 * (1.0 - cmsr_macs as f64 / full_macs as f64)
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
