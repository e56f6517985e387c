use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use caforge_core::auction::{ComplementarityScope, Setting, ValuationProfile};
use caforge_core::rng::{SeedStreams, DATASET};
use clap::Args;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};
use crate::experiment::{create_dir, write_json, AuctionArgs};

pub const DATASET_FORMAT: &str = "caforge-profiles v1";
const CACHE_FILE: &str = "profiles.bin";
const PREVIEW_FILE: &str = "preview.csv";
const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub auction: AuctionArgs,
    /// Number of profiles to sample.
    #[arg(long, env = "CAFORGE_COUNT", default_value_t = 640_000)]
    pub count: usize,
    /// Profiles written to the CSV preview.
    #[arg(long, env = "CAFORGE_PREVIEW", default_value_t = 100)]
    pub preview: usize,
    #[arg(long, env = "CAFORGE_OUT_DIR")]
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub setting: Setting,
    pub scope: ComplementarityScope,
    pub bidders: usize,
    pub items: usize,
    pub bundles: usize,
    pub count: usize,
    pub seed: u64,
    pub file: String,
    pub sha256: String,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn run(args: &GenArgs, out: &mut dyn Write) -> CliResult<()> {
    let (config, distribution) = args.auction.resolve()?;
    if args.count == 0 {
        return Err(CliError::Config(
            "count must be at least 1; an empty cache is useless".into(),
        ));
    }
    create_dir(&args.out_dir)?;
    let mut rng = SeedStreams::new(args.auction.seed()).stream(DATASET);
    let profiles = distribution.sample(&config, args.count, &mut rng)?;

    let cache = args.out_dir.join(CACHE_FILE);
    let file = File::create(&cache).map_err(|e| CliError::io(&cache, e))?;
    profiles
        .write_binary(BufWriter::new(file))
        .map_err(|e| CliError::io(&cache, e))?;

    let preview = args.out_dir.join(PREVIEW_FILE);
    let file = File::create(&preview).map_err(|e| CliError::io(&preview, e))?;
    profiles.write_csv(BufWriter::new(file), args.preview)?;

    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        setting: distribution.setting,
        scope: distribution.scope,
        bidders: config.bidders(),
        items: config.items(),
        bundles: config.bundles(),
        count: profiles.len(),
        seed: args.auction.seed(),
        file: CACHE_FILE.into(),
        sha256: sha256_file(&cache)?,
    };
    let path = args.out_dir.join(MANIFEST_FILE);
    write_json(&path, &manifest)?;
    log::info!(
        "wrote {} profiles ({config}, setting {}) to {}",
        profiles.len(),
        distribution.setting,
        cache.display()
    );
    writeln!(out, "{}", path.display()).map_err(|e| CliError::io(Path::new("<stdout>"), e))?;
    Ok(())
}

/// Loads a cache through its manifest, verifying the checksum.
pub fn load_dataset(manifest_path: &Path) -> CliResult<(DatasetManifest, ValuationProfile)> {
    let text = fs::read_to_string(manifest_path).map_err(|e| CliError::io(manifest_path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    if manifest.format != DATASET_FORMAT {
        return Err(CliError::Config(format!(
            "unsupported dataset format {:?}",
            manifest.format
        )));
    }
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let cache = dir.join(&manifest.file);
    let digest = sha256_file(&cache)?;
    if digest != manifest.sha256 {
        return Err(CliError::Config(format!("{} checksum mismatch", cache.display())));
    }
    let profiles = ValuationProfile::load(&cache)?;
    Ok((manifest, profiles))
}
