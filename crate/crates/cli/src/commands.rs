use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::info;

use spa_core::accounting::{self, curve_csv, default_grid, tradeoff_curve};
use spa_core::data::Dataset;
use spa_core::network::compact::compact_network;
use spa_core::network::{ArchitectureManifest, Mode, Network};
use spa_core::persistence::{self, TaskSwitcher};
use spa_core::pruning::{metrics_tsv, run_schedule, Criterion, METRICS_HEADER};
use spa_core::train;
use spa_core::{Error, Result};

use crate::config::RunConfig;

const EVAL_BATCH: usize = 128;

/// Command-line values that take precedence over the config file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<String>,
    pub rank: Option<usize>,
    pub criterion: Option<String>,
    pub density: Option<f64>,
    pub out: Option<PathBuf>,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(m) = &self.mode {
            cfg.mode = m.clone();
        }
        if let Some(r) = self.rank {
            cfg.rank = r;
        }
        if let Some(c) = &self.criterion {
            cfg.criterion = c.clone();
        }
        if let Some(d) = self.density {
            cfg.schedule.final_density = d;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
    }
}

fn check_data(manifest: &ArchitectureManifest, data: &Dataset, what: &str) -> Result<()> {
    if data.sample_shape() != manifest.input_shape.as_slice() {
        return Err(Error::Config(format!(
            "{what} samples have shape {:?}, manifest `{}` expects {:?}",
            data.sample_shape(),
            manifest.name,
            manifest.input_shape
        )));
    }
    if data.num_classes() > manifest.num_classes {
        return Err(Error::Config(format!(
            "{what} has {} classes, manifest `{}` has {} outputs",
            data.num_classes(),
            manifest.name,
            manifest.num_classes
        )));
    }
    Ok(())
}

fn load_base(cfg: &RunConfig, manifest: &ArchitectureManifest) -> Result<Network> {
    if let Some(path) = &cfg.base {
        let base = persistence::load_model(path)?;
        if base.manifest().architecture_hash() != manifest.architecture_hash() {
            return Err(Error::Config(format!(
                "base model `{}` was built for `{}`, not `{}`",
                path.display(),
                base.manifest().name,
                manifest.name
            )));
        }
        return Ok(base);
    }
    let mut base = Network::build(manifest, cfg.seed)?;
    if let Some(p) = &cfg.pretrain {
        let (train_set, eval_set) = p.dataset.load()?;
        check_data(manifest, &train_set, "pretraining data")?;
        train::pretrain(&mut base, &train_set, &p.train, cfg.seed)?;
        info!("source accuracy {:.4}", train::accuracy(&base, &eval_set, EVAL_BATCH)?);
    }
    Ok(base)
}

/// Adapts a base to the configured task while pruning it; writes the base,
/// one SPAD file per checkpoint, `metrics.tsv`, and the effective config.
pub fn train_prune(config: &Path, overrides: &Overrides) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    overrides.apply(&mut cfg);
    cfg.validate()?;
    let manifest = ArchitectureManifest::load(&cfg.manifest)?;
    let mode = Mode::parse(&cfg.mode, cfg.rank)?;
    let criterion: Criterion = cfg.criterion.parse()?;
    let (train_set, eval_set) = cfg.dataset.load()?;
    check_data(&manifest, &train_set, "dataset")?;

    let ckpt_dir = cfg.out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    fs::write(
        cfg.out.join("run.toml"),
        toml::to_string(&cfg).map_err(|e| Error::Config(e.to_string()))?,
    )?;
    let base = load_base(&cfg, &manifest)?;
    persistence::save_delta(&base, None, cfg.out.join("base.spad"))?;

    let mut net = base.adapt(mode, cfg.seed)?;
    let mut stdout = std::io::stdout().lock();
    let _ = writeln!(stdout, "{METRICS_HEADER}");
    let mut save_error = None;
    let checkpoints = run_schedule(&mut net, &criterion, &cfg.schedule, &train_set, &eval_set, cfg.seed, |cp| {
        let _ = writeln!(stdout, "{}", cp.metrics_line());
        let path = ckpt_dir.join(format!("step-{:02}.spad", cp.step));
        if let Err(e) = persistence::save_delta(&cp.network, Some(&criterion), &path) {
            save_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = save_error {
        return Err(e);
    }
    fs::write(cfg.out.join("metrics.tsv"), metrics_tsv(&checkpoints))?;
    info!("{} checkpoints written to {}", checkpoints.len(), ckpt_dir.display());
    Ok(())
}

/// Static ΔParams/FLOPs row with every group keeping `density` of its
/// channels.
pub fn report(manifest: &Path, mode: &str, rank: usize, density: f64) -> Result<String> {
    let m = ArchitectureManifest::load(manifest)?;
    let topo = m.validate()?;
    let mode = Mode::parse(mode, rank)?;
    let masks = accounting::uniform_masks(&m, &topo, density)?;
    Ok(accounting::report_masks(&m, mode, &masks)?.to_string())
}

/// Learned fraction against density for one n×m weight.
pub fn curve(n: usize, m: usize, rank: usize) -> Result<String> {
    if n == 0 || m == 0 || rank == 0 {
        return Err(Error::InvalidArgument("n, m, and rank must be positive".into()));
    }
    let grid = default_grid();
    let mut points = vec![];
    for mode in [Mode::Finetune, Mode::Lora { rank }, Mode::Splora { rank }] {
        points.extend(tradeoff_curve(n, m, mode, &grid));
    }
    Ok(curve_csv(&points))
}

fn eval_set(config: Option<&Path>) -> Result<Option<Dataset>> {
    config
        .map(|c| {
            let cfg = RunConfig::load(c)?;
            Ok(cfg.dataset.load()?.1)
        })
        .transpose()
}

/// Loads `delta` on `base`, compacts it into a dense model, and writes it.
pub fn fuse(base: &Path, delta: &Path, out: &Path, config: Option<&Path>) -> Result<String> {
    let base = persistence::load_model(base)?;
    let net = persistence::load_delta(&base, delta)?;
    let (manifest, fused) = compact_network(&net)?;
    let criterion = persistence::read_header(&fs::read(delta)?)?.criterion;
    let bytes = persistence::encode(&fused, criterion.as_ref(), true)?;
    fs::write(out, &bytes)?;
    let mut msg = format!(
        "{}: {} weights in {} bytes ({} → {} FLOPs)",
        out.display(),
        fused.surviving_weights(),
        bytes.len(),
        accounting::report(&net)?.flops,
        spa_core::network::count_flops(&manifest, None, &manifest.input_shape)?
    );
    if let Some(data) = eval_set(config)? {
        msg += &format!(
            "\nmasked accuracy {:.4}\nfused accuracy {:.4}",
            train::accuracy(&net, &data, EVAL_BATCH)?,
            train::accuracy(&fused, &data, EVAL_BATCH)?
        );
    }
    Ok(msg)
}

/// Activates each delta in turn on one shared base.
pub fn switch(base: &Path, deltas: &[PathBuf], config: Option<&Path>) -> Result<String> {
    let base = persistence::load_model(base)?;
    let before = persistence::fingerprint_hex(&base);
    let data = eval_set(config)?;
    let mut switcher = TaskSwitcher::new(base);
    let mut lines = vec![format!("base {}", &before[..16])];
    for d in deltas {
        let net = switcher.switch_task(d)?;
        let mut line = format!(
            "{}\t{}\tdensity {:.4}\tfused {}",
            d.display(),
            net.mode(),
            net.weight_density(),
            &persistence::fingerprint_hex(net)[..16]
        );
        if let Some(data) = &data {
            line += &format!("\taccuracy {:.4}", train::accuracy(net, data, EVAL_BATCH)?);
        }
        lines.push(line);
    }
    let after = persistence::fingerprint_hex(switcher.base());
    if after != before {
        return Err(Error::Malformed("base weights changed while switching tasks".into()));
    }
    Ok(lines.join("\n"))
}
