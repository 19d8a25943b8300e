use std::path::{Path, PathBuf};

use anyhow::Result;
use clap::{Args, ValueEnum};
use serde::Serialize;

use cimnas_core::data::{self, Dataset, DatasetKind, Split};
use cimnas_core::noise::derive_seed;

const SUBSET_TRAIN: u64 = 0x5355_4254;
const SUBSET_TEST: u64 = 0x5355_4245;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetChoice {
    Mnist,
    Cifar10,
    /// Generated 3x32x32 ten-class images (no files needed).
    SyntheticCifar,
}

impl DatasetChoice {
    fn default_sizes(self) -> (usize, usize) {
        match self {
            DatasetChoice::Mnist => (10_000, 2_000),
            DatasetChoice::Cifar10 | DatasetChoice::SyntheticCifar => (8_000, 2_000),
        }
    }

    fn dir_name(self) -> &'static str {
        match self {
            DatasetChoice::Mnist => "mnist",
            DatasetChoice::Cifar10 => "cifar10",
            DatasetChoice::SyntheticCifar => "synthetic-cifar",
        }
    }
}

#[derive(Args, Clone, Debug, Serialize)]
pub struct DataArgs {
    #[arg(long, value_enum, default_value_t = DatasetChoice::Mnist)]
    pub dataset: DatasetChoice,
    /// Training examples (stratified subset; default 10000 for MNIST, 8000 for CIFAR-10).
    #[arg(long)]
    pub train_size: Option<usize>,
    /// Test examples (stratified subset; default 2000).
    #[arg(long)]
    pub test_size: Option<usize>,
    /// Seed for subsetting and for generated data, independent of --seed.
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
}

pub struct LoadedData {
    pub train: Option<Dataset>,
    pub test: Dataset,
    /// Files read, for provenance.
    pub files: Vec<PathBuf>,
    pub description: String,
}

fn resolve_dir(data_dir: &Path, choice: DatasetChoice) -> PathBuf {
    let nested = data_dir.join(choice.dir_name());
    if nested.is_dir() {
        nested
    } else {
        data_dir.to_path_buf()
    }
}

fn files_for(kind: DatasetKind, dir: &Path, split: Split) -> Vec<PathBuf> {
    match kind {
        DatasetKind::Mnist => {
            let (i, l) = data::mnist_paths(dir, split);
            vec![i, l]
        }
        DatasetKind::Cifar10 => data::cifar10_paths(dir, split)
            .into_iter()
            .filter(|p| p.exists())
            .collect(),
    }
}

fn shrink(ds: Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n >= ds.len() {
        if n > ds.len() {
            log::info!("requested {n} examples, using all {}", ds.len());
        }
        return Ok(ds);
    }
    Ok(data::subset(&ds, n, seed)?)
}

pub fn load(data_dir: &Path, args: &DataArgs, need_train: bool) -> Result<LoadedData> {
    let (default_train, default_test) = args.dataset.default_sizes();
    let n_train = args.train_size.unwrap_or(default_train);
    let n_test = args.test_size.unwrap_or(default_test);
    let kind = match args.dataset {
        DatasetChoice::Mnist => DatasetKind::Mnist,
        DatasetChoice::Cifar10 => DatasetKind::Cifar10,
        DatasetChoice::SyntheticCifar => {
            let train = need_train
                .then(|| data::synthetic_cifar(n_train, derive_seed(args.data_seed, SUBSET_TRAIN), Split::Train))
                .transpose()?;
            let test = data::synthetic_cifar(n_test, derive_seed(args.data_seed, SUBSET_TEST), Split::Test)?;
            return Ok(LoadedData {
                train,
                test,
                files: Vec::new(),
                description: format!("synthetic-cifar (data seed {})", args.data_seed),
            });
        }
    };
    let dir = resolve_dir(data_dir, args.dataset);
    let mut files = Vec::new();
    let train = if need_train {
        files.extend(files_for(kind, &dir, Split::Train));
        let full = data::load_split(kind, &dir, Split::Train)?;
        Some(shrink(full, n_train, derive_seed(args.data_seed, SUBSET_TRAIN))?)
    } else {
        None
    };
    files.extend(files_for(kind, &dir, Split::Test));
    let test = shrink(
        data::load_split(kind, &dir, Split::Test)?,
        n_test,
        derive_seed(args.data_seed, SUBSET_TEST),
    )?;
    Ok(LoadedData {
        train,
        test,
        files,
        description: format!("{} ({})", args.dataset.dir_name(), dir.display()),
    })
}
