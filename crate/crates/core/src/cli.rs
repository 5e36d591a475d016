//! Command-line front end.
//!
//! Exit status: 0 on success, 1 for usage or configuration errors, 2 when a
//! run fails. A `--config FILE` of `key=value` lines supplies flags that the
//! command line can still override.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::cost::{device_memory_estimate, iteration_time_estimate, ModelSpec, Mode};
use crate::device::{run_device_tcp, BackboneSource, CutSpec, DeviceConfig, DeviceReport, TaskSpec};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::gradcheck::{run_gradcheck, GRADCHECK_TOLERANCE};
use crate::quant::{dequantize_with, payload_bytes, quantize_with, QuantScheme};
use crate::rng::Rng;
use crate::server::{local_mode, run_server, ServerConfig, ServerReport};
use crate::side::{combined_infer, SideParams};
use crate::tensor::{Activation, Tensor};
use crate::train::{accuracy, AdamConfig, LossKind};

#[derive(Debug, Parser)]
#[command(name = "sidetune", version, about = "Split side-tuning of a frozen transformer between a device and a server")]
#[command(arg_required_else_help = true, args_override_self = true)]
pub struct Cli {
    /// key=value file of flags for the subcommand; command-line flags win
    #[arg(long, global = true, value_name = "FILE", default_value = "none")]
    config: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Accept one device session and train the side-network
    Server(ServerCmd),
    /// Run the frozen backbone and stream activations to a server
    Device(DeviceCmd),
    /// Run device and server in one process over an in-memory transport
    Local(LocalCmd),
    /// Check analytic side-network gradients against finite differences
    Gradcheck(GradcheckCmd),
    /// Print memory, payload and timing estimates as JSON
    Estimate(EstimateCmd),
    /// Round-trip error and payload size of every quantization scheme
    Quantbench(QuantbenchCmd),
}

#[derive(Debug, Args)]
struct ServerCmd {
    /// Address to listen on; ":PORT" binds every interface
    #[arg(long, default_value = "127.0.0.1:7878")]
    listen: String,
    #[command(flatten)]
    train: TrainArgs,
    /// Side-network initialization seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Adapter bottleneck width m
    #[arg(long, default_value_t = 16)]
    bottleneck: usize,
    /// Standard deviation of adapter projection init
    #[arg(long, default_value_t = 0.02)]
    std: f64,
    /// Adapter nonlinearity (gelu|relu)
    #[arg(long, default_value = "gelu")]
    activation: Activation,
    /// Adam learning rate
    #[arg(long, default_value_t = 5e-4)]
    lr: f64,
    /// Loss (ce|mse)
    #[arg(long, default_value = "ce")]
    loss: LossKind,
    /// Final side-network checkpoint path, or "none"
    #[arg(long, value_name = "PATH", default_value = "side.ckpt")]
    ckpt: String,
    /// Per-iteration metrics JSONL path, or "none"
    #[arg(long, value_name = "PATH", default_value = "metrics.jsonl")]
    metrics: String,
    /// Inbound activation queue depth
    #[arg(long, default_value_t = 4)]
    inbound_queue: usize,
    /// Send a metrics snapshot every N iterations (0 disables)
    #[arg(long, value_name = "N", default_value_t = 10)]
    snapshot_every: u64,
    /// Refuse devices whose backbone config digest differs (hex), or "any"
    #[arg(long, value_name = "HEX", default_value = "any")]
    expect_digest: String,
    /// Refuse devices sending a different tap count (0 accepts any)
    #[arg(long, value_name = "N", default_value_t = 0)]
    expect_gamma: usize,
}

#[derive(Debug, Args)]
struct DeviceCmd {
    /// Server address HOST:PORT
    #[arg(long, default_value = "127.0.0.1:7878")]
    server: String,
    #[command(flatten)]
    run: DeviceArgs,
    /// Seed for the synthetic task
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct DeviceArgs {
    /// Activation quantization (fp16|fp8|fp4|nf4)
    #[arg(long, default_value = "nf4")]
    scheme: QuantScheme,
    /// Mini-batch size B
    #[arg(long, default_value_t = 16)]
    batch: usize,
    /// Sequence length S
    #[arg(long, default_value_t = 256)]
    seq: usize,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    /// Batches per epoch for the synthetic task
    #[arg(long, value_name = "N", default_value_t = 25)]
    batches_per_epoch: usize,
    /// Block grouping: uniform:M or ascending layer counts like 1,3,4
    #[arg(long, default_value = "uniform:4")]
    cuts: CutSpec,
    /// Also transmit the embedding output as a leading tap
    #[arg(long)]
    tap_embedding: bool,
    /// Data source: synth or csv:PATH (token ids then label per row)
    #[arg(long, default_value = "synth")]
    task: TaskSpec,
    /// Number of output classes
    #[arg(long, default_value_t = 2)]
    classes: usize,
    /// Backbone weights: seed:N for random init or an MBWT file path
    #[arg(long, value_name = "SOURCE", default_value = "seed:0")]
    weights: String,
    /// Backbone vocabulary size (seeded weights only)
    #[arg(long, default_value_t = 16)]
    vocab: usize,
    /// Backbone hidden width H (seeded weights only)
    #[arg(long, default_value_t = 32)]
    hidden: usize,
    /// Backbone layer count L (seeded weights only)
    #[arg(long, default_value_t = 4)]
    layers: usize,
    /// Backbone attention heads (seeded weights only)
    #[arg(long, default_value_t = 4)]
    heads: usize,
    /// Outbound queue depth between compute and send
    #[arg(long, default_value_t = 4)]
    queue: usize,
    /// Device JSONL log path, or "none"
    #[arg(long, value_name = "PATH", default_value = "device.jsonl")]
    log: String,
    /// Compute and send one batch at a time without overlap
    #[arg(long)]
    serial: bool,
    /// Limit the outbound link to this many Mbit/s (0 is unlimited)
    #[arg(long, value_name = "MBPS", default_value_t = 0.0)]
    rate_mbps: f64,
    /// After training, fetch the side-network and save it here, or "none"
    #[arg(long, value_name = "PATH", default_value = "none")]
    fetch_ckpt: String,
    /// Seconds to wait for the server during the handshake
    #[arg(long, value_name = "SECS", default_value_t = 10.0)]
    handshake_timeout: f64,
}

#[derive(Debug, Args)]
struct LocalCmd {
    #[command(flatten)]
    run: DeviceArgs,
    #[command(flatten)]
    train: TrainArgs,
    /// Seed for the task and side-network init
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct GradcheckCmd {
    /// Comma-separated seeds, one tiny random case each
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    seeds: Vec<u64>,
    /// Run the finite-difference sweep sequentially
    #[arg(long)]
    sequential: bool,
}

#[derive(Debug, Args)]
struct EstimateCmd {
    /// Model preset (opt350m|opt1.3b|custom)
    #[arg(long, default_value = "opt350m")]
    preset: String,
    /// Accounting mode (full_ft|side_local|mobillm|inference)
    #[arg(long, default_value = "mobillm")]
    mode: Mode,
    /// Activation quantization for the payload (fp16|fp8|fp4|nf4)
    #[arg(long, default_value = "nf4")]
    scheme: QuantScheme,
    /// Backbone parameter count [default: from preset]
    #[arg(long)]
    params: Option<f64>,
    /// Layer count L [default: from preset]
    #[arg(long)]
    layers: Option<usize>,
    /// Hidden width H [default: from preset]
    #[arg(long)]
    hidden: Option<usize>,
    /// Attention heads [default: from preset]
    #[arg(long)]
    heads: Option<usize>,
    /// Sequence length S [default: from preset]
    #[arg(long)]
    seq: Option<usize>,
    /// Mini-batch size B [default: from preset]
    #[arg(long)]
    batch: Option<usize>,
    /// Taps per iteration [default: from preset]
    #[arg(long)]
    gamma: Option<usize>,
    /// Bytes per weight and activation element, 2 or 4 [default: from preset]
    #[arg(long)]
    dtype_bytes: Option<usize>,
    /// Optimizer state bytes per trainable parameter [default: from preset]
    #[arg(long)]
    optimizer_bytes: Option<f64>,
    /// Trainable side-network parameters [default: from preset]
    #[arg(long)]
    side_params: Option<f64>,
    /// Device forward seconds per iteration
    #[arg(long, value_name = "SECS", default_value_t = 0.0)]
    t_fwd: f64,
    /// Server seconds per iteration
    #[arg(long, value_name = "SECS", default_value_t = 0.0)]
    t_server: f64,
    /// Link rate for the time estimate in Mbit/s (0 skips it)
    #[arg(long, value_name = "MBPS", default_value_t = 0.0)]
    rate_mbps: f64,
}

#[derive(Debug, Args)]
struct QuantbenchCmd {
    /// Tensor shape B,S,H
    #[arg(long, value_delimiter = ',', default_value = "16,256,1024")]
    shape: Vec<usize>,
    /// Seed for the Gaussian test tensor
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run quantization sequentially
    #[arg(long)]
    sequential: bool,
}

fn optional_path(s: &str) -> Option<PathBuf> {
    (s != "none" && !s.is_empty()).then(|| PathBuf::from(s))
}

fn print_json(value: &impl Serialize) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{}", serde_json::to_string_pretty(value)?) {
        // a closed downstream pipe (`| head`) is not a failure
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

impl DeviceArgs {
    fn config(&self, seed: u64) -> Result<DeviceConfig> {
        let backbone = match self.weights.strip_prefix("seed:") {
            Some(n) => BackboneSource::Seed(
                n.parse()
                    .map_err(|_| Error::Config(format!("bad weights seed {n:?}")))?,
            ),
            None => BackboneSource::File(PathBuf::from(&self.weights)),
        };
        if !(self.handshake_timeout > 0.0) || !(self.rate_mbps >= 0.0) {
            return Err(Error::Config("timeouts and rates must be positive".into()));
        }
        let cfg = DeviceConfig {
            backbone,
            vocab_size: self.vocab,
            hidden: self.hidden,
            layers: self.layers,
            heads: self.heads,
            cuts: self.cuts.clone(),
            tap_embedding: self.tap_embedding,
            scheme: self.scheme,
            batch: self.batch,
            seq: self.seq,
            epochs: self.epochs,
            batches_per_epoch: self.batches_per_epoch,
            classes: self.classes,
            task: self.task.clone(),
            seed,
            queue_depth: self.queue,
            log: optional_path(&self.log),
            serial: self.serial,
            rate_bps: (self.rate_mbps > 0.0).then_some(self.rate_mbps * 1e6),
            min_compute: None,
            fetch_checkpoint: optional_path(&self.fetch_ckpt).is_some(),
            handshake_timeout: Duration::from_secs_f64(self.handshake_timeout),
            ..DeviceConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl TrainArgs {
    fn config(&self, listen: String, seed: u64) -> Result<ServerConfig> {
        let expect_digest = match self.expect_digest.as_str() {
            "any" => None,
            hex => Some(
                u64::from_str_radix(hex.trim_start_matches("0x"), 16)
                    .map_err(|_| Error::Config(format!("bad digest {hex:?}")))?,
            ),
        };
        let cfg = ServerConfig {
            listen,
            bottleneck: self.bottleneck,
            init_std: self.std,
            activation: self.activation,
            adam: AdamConfig { lr: self.lr, ..AdamConfig::default() },
            loss: self.loss,
            seed,
            checkpoint: optional_path(&self.ckpt),
            metrics: optional_path(&self.metrics),
            queue_depth: self.inbound_queue,
            snapshot_every: self.snapshot_every,
            expect_digest,
            expect_gamma: (self.expect_gamma > 0).then_some(self.expect_gamma),
            ..ServerConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn server_summary(r: &ServerReport) -> serde_json::Value {
    let last = r.metrics.last();
    json!({
        "session_id": format!("{:#018x}", r.session_id),
        "iterations": r.metrics.len(),
        "dropped": r.dropped,
        "checkpoints_served": r.checkpoints_served,
        "final_loss": last.map(|m| m.loss),
        "final_acc": last.map(|m| m.acc),
        "peak_inbound_bytes": r.inbound.peak_bytes,
    })
}

/// Device summary; with a fetched checkpoint, also its accuracy over one
/// epoch of the device's own data.
fn device_summary(cfg: &DeviceConfig, r: &DeviceReport) -> Result<serde_json::Value> {
    let mut v = json!({
        "session_id": format!("{:#018x}", r.session_id),
        "iterations": r.iterations,
        "act_bytes": r.act_bytes,
        "bytes_sent": r.bytes_sent,
        "wall_s": r.wall.as_secs_f64(),
        "peak_queue_bytes": r.queue.peak_bytes,
        "compute_blocked_s": r.queue.push_wait.as_secs_f64(),
        "last_metrics": r.last_metrics.map(|m| json!({
            "iterations": m.iterations, "last_batch_id": m.last_batch_id, "loss": m.loss, "acc": m.acc,
        })),
    });
    if let Some(side) = &r.checkpoint {
        v["eval_acc"] = json!(epoch_accuracy(cfg, side)?);
    }
    Ok(v)
}

/// Accuracy of backbone plus side-network over the first epoch's batches.
pub fn epoch_accuracy(cfg: &DeviceConfig, side: &SideParams<f32>) -> Result<f64> {
    let backbone = cfg.load_backbone()?;
    let data = cfg.dataset()?;
    let batches = match &data {
        crate::device::Dataset::Csv(d) => d.rows.len() / cfg.batch,
        crate::device::Dataset::Synthetic(_) => cfg.batches_per_epoch,
    };
    let mut hits = 0.0;
    for i in 0..batches {
        let (tokens, labels) = data.make_batch(i as u64, cfg.batch);
        let logits = combined_infer(&backbone, side, &tokens, cfg.scheme)?;
        hits += accuracy(&logits, &labels) * labels.len() as f64;
    }
    Ok(hits / (batches * cfg.batch) as f64)
}

fn save_fetched(path: Option<PathBuf>, r: &DeviceReport) -> Result<()> {
    if let (Some(p), Some(side)) = (path, &r.checkpoint) {
        side.save(&p)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Server(cmd) => {
            let cfg = cmd.train.config(cmd.listen, cmd.seed)?;
            let report = run_server(&cfg)?;
            print_json(&server_summary(&report))
        }
        Command::Device(cmd) => {
            let cfg = cmd.run.config(cmd.seed)?;
            let report = run_device_tcp(&cfg, &cmd.server)?;
            save_fetched(optional_path(&cmd.run.fetch_ckpt), &report)?;
            print_json(&device_summary(&cfg, &report)?)
        }
        Command::Local(cmd) => {
            let dev = cmd.run.config(cmd.seed)?;
            let srv = cmd.train.config(String::new(), cmd.seed)?;
            let (d, s) = local_mode(&dev, &srv)?;
            save_fetched(optional_path(&cmd.run.fetch_ckpt), &d)?;
            print_json(&json!({
                "device": device_summary(&dev, &d)?,
                "server": server_summary(&s),
                "train_acc": epoch_accuracy(&dev, &s.params)?,
            }))
        }
        Command::Gradcheck(cmd) => {
            let exec = if cmd.sequential { Exec::Sequential } else { Exec::default() };
            let report = run_gradcheck(&cmd.seeds, exec)?;
            for c in &report.cases {
                println!("seed {}: {} coordinates, max relative error {:.3e}", c.seed, c.coordinates, c.max_rel_err);
            }
            println!("max relative error: {:.3e} (tolerance {GRADCHECK_TOLERANCE:e})", report.max_rel_err);
            if report.passed {
                Ok(())
            } else {
                Err(Error::State(format!("gradient check failed: {:.3e}", report.max_rel_err)))
            }
        }
        Command::Estimate(cmd) => estimate(cmd),
        Command::Quantbench(cmd) => quantbench(cmd),
    }
}

fn estimate(cmd: EstimateCmd) -> Result<()> {
    let mut spec = match cmd.preset.as_str() {
        "custom" => {
            let need = |what: &str| Error::Config(format!("--preset custom needs --{what}"));
            let layers = cmd.layers.ok_or_else(|| need("layers"))?;
            let hidden = cmd.hidden.ok_or_else(|| need("hidden"))?;
            ModelSpec {
                name: "custom".into(),
                params: cmd.params.ok_or_else(|| need("params"))?,
                layers,
                hidden,
                heads: cmd.heads.ok_or_else(|| need("heads"))?,
                ffn_dim: 4 * hidden,
                seq: cmd.seq.ok_or_else(|| need("seq"))?,
                batch: cmd.batch.ok_or_else(|| need("batch"))?,
                dtype_bytes: 2,
                gamma: layers,
                side_params: 0.0,
                optimizer_bytes_per_param: 8.0,
            }
        }
        name => ModelSpec::preset(name)?,
    };
    macro_rules! apply {
        ($($field:ident <- $flag:ident),*) => { $(if let Some(v) = cmd.$flag { spec.$field = v; })* };
    }
    apply!(params <- params, layers <- layers, hidden <- hidden, heads <- heads, seq <- seq,
        batch <- batch, gamma <- gamma, dtype_bytes <- dtype_bytes,
        optimizer_bytes_per_param <- optimizer_bytes, side_params <- side_params);

    let mut report = device_memory_estimate(&spec, cmd.mode, cmd.scheme)?;
    if cmd.rate_mbps > 0.0 {
        report.est_iter_time_s = Some(iteration_time_estimate(
            cmd.t_fwd,
            report.payload_bytes_per_iter,
            cmd.rate_mbps * 1e6,
            cmd.t_server,
        )?);
    }
    print_json(&json!({ "spec": spec, "scheme": cmd.scheme.name(), "report": report }))
}

#[derive(Serialize)]
struct QuantRow {
    scheme: &'static str,
    bits: usize,
    payload_bytes: usize,
    rmse: f64,
    max_abs_err: f64,
    relative_rmse: f64,
    quantize_ms: f64,
    dequantize_ms: f64,
}

fn quantbench(cmd: QuantbenchCmd) -> Result<()> {
    let shape: [usize; 3] = cmd
        .shape
        .as_slice()
        .try_into()
        .map_err(|_| Error::Config(format!("--shape needs three sizes, got {:?}", cmd.shape)))?;
    let exec = if cmd.sequential { Exec::Sequential } else { Exec::default() };
    let x = Tensor::<f32>::randn(&shape, 1.0, &mut Rng::new(cmd.seed));
    let norm = (x.data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / x.len() as f64).sqrt();
    let mut rows = Vec::new();
    for scheme in QuantScheme::ALL {
        let t = Instant::now();
        let q = quantize_with(&x, scheme, exec)?;
        let quantize_ms = t.elapsed().as_secs_f64() * 1e3;
        let t = Instant::now();
        let back = dequantize_with(&q, exec)?;
        let dequantize_ms = t.elapsed().as_secs_f64() * 1e3;
        let (mut se, mut worst) = (0.0f64, 0.0f64);
        for (a, b) in x.data().iter().zip(back.data()) {
            let d = (*a as f64 - *b as f64).abs();
            se += d * d;
            worst = worst.max(d);
        }
        let rmse = (se / x.len() as f64).sqrt();
        rows.push(QuantRow {
            scheme: scheme.name(),
            bits: scheme.bits(),
            payload_bytes: payload_bytes(shape, scheme),
            rmse,
            max_abs_err: worst,
            relative_rmse: rmse / norm,
            quantize_ms,
            dequantize_ms,
        });
    }
    print_json(&rows)
}

/// Splice `key=value` lines from `--config FILE` in front of the
/// subcommand's own flags so later command-line flags take precedence.
fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let strs: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let mut path = None;
    let mut rest = Vec::with_capacity(args.len());
    let mut i = 0;
    while i < args.len() {
        if let Some(p) = strs[i].strip_prefix("--config=") {
            path = Some(p.to_string());
        } else if strs[i] == "--config" && i + 1 < args.len() {
            path = Some(strs[i + 1].clone());
            i += 1;
        } else {
            rest.push(args[i].clone());
        }
        i += 1;
    }
    let Some(path) = path.filter(|p| p != "none") else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(Path::new(&path))
        .map_err(|e| Error::Config(format!("cannot read config {path}: {e}")))?;
    let mut flags = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("{path}:{}: expected key=value", n + 1)))?;
        let (k, v) = (k.trim().replace('_', "-"), v.trim());
        match v {
            "true" => flags.push(format!("--{k}")),
            "false" => {}
            _ => flags.extend([format!("--{k}"), v.to_string()]),
        }
    }
    // first non-flag argument after the program name is the subcommand
    let at = rest
        .iter()
        .skip(1)
        .position(|a| !a.to_string_lossy().starts_with('-'))
        .map_or(rest.len(), |p| p + 2);
    rest.splice(at..at, flags.into_iter().map(OsString::from));
    Ok(rest)
}

/// Parse, run and map the outcome to an exit status.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args = match expand_config(argv.into_iter().map(Into::into).collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                1
            } else {
                2
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn config_file_flags_come_first() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.conf");
        std::fs::write(&p, "# comment\nbatch = 4\nserial=true\ntap_embedding=false\n").unwrap();
        let args = expand_config(os(&["st", "device", "--config", p.to_str().unwrap(), "--batch", "8"])).unwrap();
        assert_eq!(args, os(&["st", "device", "--batch", "4", "--serial", "--batch", "8"]));
        let cli = Cli::try_parse_from(args).unwrap();
        let Command::Device(d) = cli.command else { panic!() };
        assert_eq!(d.run.batch, 8);
        assert!(d.run.serial);
    }

    #[test]
    fn config_file_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.conf");
        std::fs::write(&p, "batch\n").unwrap();
        assert!(expand_config(os(&["st", "device", &format!("--config={}", p.display())])).is_err());
        assert!(expand_config(os(&["st", "device", "--config", "/nonexistent/x"])).is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(dispatch(["st"]), 1);
        assert_eq!(dispatch(["st", "bogus"]), 1);
        assert_eq!(dispatch(["st", "estimate", "--nope"]), 1);
        assert_eq!(dispatch(["st", "estimate", "--preset", "gpt9"]), 1);
        assert_eq!(dispatch(["st", "estimate", "--scheme", "int3"]), 1);
        assert_eq!(dispatch(["st", "estimate", "--preset", "opt350m", "--scheme", "nf4"]), 0);
        assert_eq!(dispatch(["st", "device", "--queue", "0"]), 1);
        assert_eq!(dispatch(["st", "gradcheck", "--seeds", "1"]), 0);
    }
}
