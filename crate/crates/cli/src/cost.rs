use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use tabmlm::cost_meter::{carbon_with_factor, FlopsReport, DEFAULT_G_PER_KM, DEFAULT_INTENSITY};
use tabmlm::model::ModelConfig;

use crate::config::{ConfigFile, Resolver, UsageError};
use crate::manifest::{self, Manifest};
use crate::{ConfigArg, Format};

#[derive(clap::Args, Debug)]
pub struct FlopsArgs {
    /// paper, desk or tiny.
    #[arg(long)]
    preset: Option<String>,
    /// Tokens per sequence [default: the preset's maximum].
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
    /// Also write the report (and a manifest) here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(clap::Args, Debug)]
pub struct CarbonArgs {
    #[arg(long)]
    kwh: Option<f64>,
    /// Grams of CO2 per kWh.
    #[arg(long)]
    intensity: Option<f64>,
    #[arg(long)]
    multiplier: Option<f64>,
    /// Grams of CO2 per car kilometre.
    #[arg(long)]
    g_per_km: Option<f64>,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArg,
}

fn emit(text: &str, out: Option<&PathBuf>, manifest: &Manifest) -> Result<()> {
    print!("{text}");
    if let Some(path) = out {
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
        manifest.write(&manifest::beside(path))?;
    }
    Ok(())
}

pub fn flops(args: FlopsArgs) -> Result<()> {
    let file = ConfigFile::load(args.config.config.as_deref())?;
    file.check_keys(&["preset", "seq_len", "batch"])?;
    let mut r = Resolver::new(&file);
    let preset: String = r.get("preset", args.preset, "paper".into())?;
    let Some(model) = ModelConfig::preset(&preset) else {
        bail!(UsageError(format!("unknown preset {preset:?} (paper, desk, tiny)")));
    };
    let seq_len = r.get("seq_len", args.seq_len, model.max_seq_len())?;
    let batch = r.get("batch", args.batch, 1usize)?;
    let report = FlopsReport::new(&model, seq_len, batch)?;
    let text = match args.format {
        Format::Text => report.to_text(preset == "paper"),
        Format::Csv => report.to_csv(),
    };
    let mut m = Manifest::new("flops");
    m.config(&r.resolved);
    if let Some(p) = &args.out {
        m.path("output", p);
    }
    emit(&text, args.out.as_ref(), &m)
}

pub fn carbon(args: CarbonArgs) -> Result<()> {
    let file = ConfigFile::load(args.config.config.as_deref())?;
    file.check_keys(&["kwh", "intensity", "multiplier", "g_per_km"])?;
    let mut r = Resolver::new(&file);
    let Some(kwh) = r.get_opt("kwh", args.kwh)? else {
        bail!(UsageError("--kwh is required".into()));
    };
    let intensity = r.get("intensity", args.intensity, DEFAULT_INTENSITY)?;
    let multiplier = r.get("multiplier", args.multiplier, 1.0)?;
    let g_per_km = r.get("g_per_km", args.g_per_km, DEFAULT_G_PER_KM)?;
    let report = carbon_with_factor(kwh, intensity, multiplier, g_per_km)?;
    let text = match args.format {
        Format::Text => report.to_text(),
        Format::Csv => report.to_csv(),
    };
    let mut m = Manifest::new("carbon");
    m.config(&r.resolved);
    if let Some(p) = &args.out {
        m.path("output", p);
    }
    emit(&text, args.out.as_ref(), &m)
}
