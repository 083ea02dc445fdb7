//! `ndf`: corpus generation, training, evaluation, PCA fitting, synthesis and
//! serving, one subcommand each.
//!
//! Exit codes: 0 success, 1 usage or other error, 2 missing artifact,
//! 3 numeric failure.

use std::io::ErrorKind;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use log::info;
use ndf_core::training::{
    evaluate, gen_synthetic_corpus, train_cwae, train_mcnn, write_curve_csv, Corpus, PreparedData, Split,
};
use ndf_core::{
    fit_pca, sample_prior, Checkpoint, CwaeModel, McnnModel, NdfError, Profile, N_CONTROLS,
};
use ndf_server::{Server, ServerConfig, ServerError, DEFAULT_UDP_PORT, DEFAULT_WS_PORT};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{0}")]
    Missing(String),

    #[error(transparent)]
    Core(#[from] NdfError),

    #[error(transparent)]
    Server(#[from] ServerError),
}

impl CliError {
    pub const USAGE: u8 = 1;
    pub const MISSING: u8 = 2;
    pub const NUMERIC: u8 = 3;

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Missing(_) => Self::MISSING,
            CliError::Core(NdfError::NumericFailure(_) | NdfError::NonFinite(_)) => Self::NUMERIC,
            CliError::Core(NdfError::Io(e)) if e.kind() == ErrorKind::NotFound => Self::MISSING,
            _ => Self::USAGE,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser, Serialize)]
#[command(name = "ndf", version, about = "Neural drum synthesis pipeline")]
pub struct Cli {
    /// Log more detail (repeat for trace output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

impl Cli {
    pub fn log_level(&self) -> &'static str {
        match self.verbose {
            0 => "info",
            1 => "debug",
            _ => "trace",
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct Common {
    /// Size and budget profile.
    #[arg(long, env = "NDF_PROFILE", default_value = "desk")]
    pub profile: Profile,

    /// Seed for every random choice the command makes.
    #[arg(long, env = "NDF_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Render a synthetic drum corpus (WAV files plus manifest.csv).
    GenData {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Items per class; the profile's default if omitted.
        #[arg(long)]
        per_class: Option<usize>,
    },
    /// Train the autoencoder and store it with the scaling statistics.
    TrainCwae(TrainArgs),
    /// Train the spectrogram inverter.
    TrainMcnn(TrainArgs),
    /// Print validation metrics for a trained checkpoint as JSON.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, env = "NDF_CHECKPOINT")]
        checkpoint: PathBuf,
    },
    /// Fit the three-knob PCA basis on training-split latent codes.
    PcaFit {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, env = "NDF_CHECKPOINT")]
        checkpoint: PathBuf,
    },
    /// Generate one clip from control values or a random prior draw.
    Synth(SynthArgs),
    /// Run the UDP and WebSocket generation service until interrupted.
    Serve {
        #[arg(long, env = "NDF_CHECKPOINT")]
        checkpoint: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        #[arg(long, env = "NDF_UDP_PORT", default_value_t = DEFAULT_UDP_PORT)]
        udp_port: u16,
        #[arg(long, env = "NDF_WS_PORT", default_value_t = DEFAULT_WS_PORT)]
        ws_port: u16,
    },
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Checkpoint to create or update.
    #[arg(long, env = "NDF_CHECKPOINT")]
    pub checkpoint: PathBuf,
    /// Override the profile's iteration budget.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Loss-curve CSV; next to the checkpoint if omitted.
    #[arg(long)]
    pub curve: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, env = "NDF_CHECKPOINT")]
    pub checkpoint: PathBuf,
    #[arg(long, allow_negative_numbers = true, required_unless_present = "random")]
    pub p1: Option<f64>,
    #[arg(long, allow_negative_numbers = true, required_unless_present = "random")]
    pub p2: Option<f64>,
    #[arg(long, allow_negative_numbers = true, required_unless_present = "random")]
    pub p3: Option<f64>,
    /// Class index (0 kick, 1 snare, 2 hat for the synthetic corpus).
    #[arg(long)]
    pub cat: usize,
    /// Draw the latent code from the prior instead of the control surface.
    #[arg(long, conflicts_with_all = ["p1", "p2", "p3"])]
    pub random: bool,
    #[arg(long, env = "NDF_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Output WAV path.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    eprintln!(
        "resolved config: {}",
        serde_json::to_string(&cli).expect("arguments always serialize")
    );
    match cli.command {
        Command::GenData {
            common,
            out,
            per_class,
        } => gen_data(&common, &out, per_class),
        Command::TrainCwae(args) => train(&args, Stage::Cwae),
        Command::TrainMcnn(args) => train(&args, Stage::Mcnn),
        Command::Eval {
            common,
            corpus,
            checkpoint,
        } => eval(&common, &corpus, &checkpoint),
        Command::PcaFit { corpus, checkpoint } => pca_fit(&corpus, &checkpoint),
        Command::Synth(args) => synth(&args),
        Command::Serve {
            checkpoint,
            host,
            udp_port,
            ws_port,
        } => serve(&checkpoint, host, udp_port, ws_port),
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Missing(format!("{what} not found at {}", path.display())))
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    require_file(path, "checkpoint")?;
    Ok(Checkpoint::load(path)?)
}

fn load_data(corpus: &Path, profile: Profile) -> Result<PreparedData> {
    require_file(&corpus.join(ndf_core::training::MANIFEST), "corpus manifest")?;
    let dsp = profile.dsp();
    let corpus = Corpus::load(corpus, dsp.canonical_len)?;
    Ok(PreparedData::new(&corpus, dsp)?)
}

fn gen_data(common: &Common, out: &Path, per_class: Option<usize>) -> Result<()> {
    let n = per_class.unwrap_or_else(|| common.profile.items_per_class());
    let corpus = gen_synthetic_corpus(n, common.profile.dsp().canonical_len, common.seed)?;
    corpus.save(out)?;
    println!("wrote {} clips to {}", corpus.items.len(), out.display());
    Ok(())
}

#[derive(Debug, Clone, Copy)]
enum Stage {
    Cwae,
    Mcnn,
}

fn train(args: &TrainArgs, stage: Stage) -> Result<()> {
    let profile = args.common.profile;
    let data = load_data(&args.corpus, profile)?;
    let mut ck = if args.checkpoint.exists() {
        let ck = Checkpoint::load(&args.checkpoint)?;
        if ck.profile != profile {
            return Err(CliError::Usage(format!(
                "{} holds a {} checkpoint; --profile is {profile}",
                args.checkpoint.display(),
                ck.profile
            )));
        }
        ck
    } else {
        Checkpoint::new(profile)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(args.common.seed);
    let (report, name) = match stage {
        Stage::Cwae => {
            let mut cfg = profile.cwae_training();
            cfg.iterations = args.iterations.unwrap_or(cfg.iterations);
            let mut model = CwaeModel::new(profile.cwae(data.n_classes), &mut rng)?;
            let report = train_cwae(&mut model, &data, &cfg, args.common.seed)?;
            ck.cwae = Some(model);
            ck.stats = Some(data.stats.clone());
            // A basis fitted to a previous encoder no longer describes this one.
            ck.pca = None;
            (report, "cwae")
        }
        Stage::Mcnn => {
            let mut cfg = profile.mcnn_training();
            cfg.iterations = args.iterations.unwrap_or(cfg.iterations);
            let mut model = McnnModel::new(profile.mcnn(), &mut rng)?;
            let report = train_mcnn(&mut model, &data, &cfg, args.common.seed)?;
            ck.mcnn = Some(model);
            (report, "mcnn")
        }
    };
    ck.save(&args.checkpoint)?;
    let curve = args
        .curve
        .clone()
        .unwrap_or_else(|| args.checkpoint.with_extension(format!("{name}.csv")));
    write_curve_csv(&curve, &report.curve)?;
    println!(
        "{name}: validation loss {:.5} -> {:.5} (metric {:.5} -> {:.5}) over {} iterations; curve in {}",
        report.initial_val_loss,
        report.best_val_loss,
        report.initial_val_metric,
        report.best_val_metric,
        report.iterations,
        curve.display()
    );
    Ok(())
}

fn eval(common: &Common, corpus: &Path, checkpoint: &Path) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let data = load_data(corpus, ck.profile)?;
    let cwae = ck
        .cwae
        .as_ref()
        .ok_or_else(|| CliError::Missing("checkpoint has no CWAE; run train-cwae first".into()))?;
    let mcnn = ck
        .mcnn
        .as_ref()
        .ok_or_else(|| CliError::Missing("checkpoint has no MCNN; run train-mcnn first".into()))?;
    let report = evaluate(cwae, mcnn, &data, common.seed)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("reports always serialize"));
    if !report.is_finite() {
        return Err(NdfError::NumericFailure("evaluation produced non-finite metrics".into()).into());
    }
    Ok(())
}

fn pca_fit(corpus: &Path, checkpoint: &Path) -> Result<()> {
    let mut ck = load_checkpoint(checkpoint)?;
    let data = load_data(corpus, ck.profile)?;
    let cwae = ck
        .cwae
        .as_ref()
        .ok_or_else(|| CliError::Missing("checkpoint has no CWAE; run train-cwae first".into()))?;
    let idx = data.indices(Split::Train);
    let z = cwae.encode(&data.scaled_batch(&idx)?, &data.labels_of(&idx))?;
    let codes: Vec<Vec<f64>> = (0..idx.len()).map(|i| z.outer(i).to_vec()).collect();
    let basis = fit_pca(&codes, N_CONTROLS)?;
    println!(
        "pca: {} codes, explained variance {:?}, {} meaningful components",
        codes.len(),
        basis.explained_variance,
        basis.meaningful
    );
    ck.pca = Some(basis);
    ck.save(checkpoint)?;
    Ok(())
}

fn synth(args: &SynthArgs) -> Result<()> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let synth = ck.synthesizer()?;
    if args.cat >= synth.n_classes() {
        return Err(CliError::Usage(format!(
            "--cat {} out of range for {} classes",
            args.cat,
            synth.n_classes()
        )));
    }
    let z = if args.random {
        sample_prior(synth.d_z(), args.seed)
    } else {
        let p = [args.p1, args.p2, args.p3].map(|v| v.expect("clap enforces the control values"));
        if synth.pca().is_none() {
            return Err(CliError::Missing("checkpoint has no PCA basis; run pca-fit first".into()));
        }
        synth.latent_for(&p)?
    };
    let clip = synth.generate(&z, args.cat)?;
    ndf_core::dsp::save_wav(&args.out, clip.samples())?;
    info!("latent code {z:?}");
    println!(
        "wrote {} samples (peak {:.4}) to {}",
        clip.len(),
        clip.peak(),
        args.out.display()
    );
    Ok(())
}

fn serve(checkpoint: &Path, host: std::net::IpAddr, udp_port: u16, ws_port: u16) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let synth = ck.synthesizer()?;
    if synth.pca().is_none() {
        return Err(CliError::Missing("checkpoint has no PCA basis; run pca-fit first".into()));
    }
    let config = ServerConfig {
        udp_addr: SocketAddr::new(host, udp_port),
        ws_addr: SocketAddr::new(host, ws_port),
        temp_root: None,
    };
    let server = Server::start(Arc::new(synth), &config)?;
    println!(
        "listening on udp {} and websocket {}; Ctrl-C to stop",
        server.udp_addr(),
        server.ws_addr()
    );
    let (tx, rx) = mpsc::channel();
    ctrlc::set_handler(move || {
        let _ = tx.send(());
    })
    .map_err(|e| CliError::Usage(format!("cannot install signal handler: {e}")))?;
    let _ = rx.recv();
    let summary = server.shutdown();
    println!("latency: {summary}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_code_contract() {
        let missing = std::io::Error::new(ErrorKind::NotFound, "gone");
        let denied = std::io::Error::new(ErrorKind::PermissionDenied, "no");
        assert_eq!(CliError::Usage("x".into()).exit_code(), 1);
        assert_eq!(CliError::Missing("x".into()).exit_code(), 2);
        assert_eq!(CliError::Core(NdfError::Io(missing)).exit_code(), 2);
        assert_eq!(CliError::Core(NdfError::Io(denied)).exit_code(), 1);
        assert_eq!(CliError::Core(NdfError::NumericFailure("nan".into())).exit_code(), 3);
        assert_eq!(CliError::Core(NdfError::NonFinite(0)).exit_code(), 3);
        assert_eq!(CliError::Core(NdfError::Config("x".into())).exit_code(), 1);
    }

    #[test]
    fn arguments_parse() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
        let cli = Cli::try_parse_from(["ndf", "synth", "--checkpoint", "c", "--p1", "-1.5", "--p2", "0", "--p3", "2", "--cat", "1", "--out", "o.wav"]).unwrap();
        match cli.command {
            Command::Synth(a) => assert_eq!((a.p1, a.cat, a.random), (Some(-1.5), 1, false)),
            other => panic!("parsed as {other:?}"),
        }
        assert!(Cli::try_parse_from(["ndf", "synth", "--checkpoint", "c", "--random", "--p1", "0", "--cat", "0", "--out", "o"]).is_err());
    }
}
