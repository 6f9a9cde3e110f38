use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{generate_strong_dataset, generate_weak_dataset, Bag, GenConfig, Instance};
use crate::error::{Error, Result};

pub const DATASET_FORMAT: &str = "weakstrong-dataset";
pub const DATASET_VERSION: u32 = 1;

/// A generated corpus: weak bags plus strong instances, with the config that
/// produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub gen: GenConfig,
    pub weak: Vec<Bag>,
    pub strong: Vec<Instance>,
}

impl Dataset {
    pub fn generate(gen: &GenConfig) -> Result<Self> {
        Ok(Dataset {
            gen: gen.clone(),
            weak: generate_weak_dataset(gen)?,
            strong: generate_strong_dataset(gen)?,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    format: String,
    version: u32,
    seed: u64,
    gen: GenConfig,
    weak_bags: Vec<Bag>,
    strong_instances: Vec<Instance>,
}

pub fn dataset_to_string(ds: &Dataset) -> Result<String> {
    let file = DatasetFile {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        seed: ds.gen.seed,
        gen: ds.gen.clone(),
        weak_bags: ds.weak.clone(),
        strong_instances: ds.strong.clone(),
    };
    serde_json::to_string(&file).map_err(|e| Error::Format(format!("dataset serialization: {e}")))
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, dataset_to_string(ds)? + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: DatasetFile =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if file.format != DATASET_FORMAT || file.version != DATASET_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported dataset {} v{}",
            path.display(),
            file.format,
            file.version
        )));
    }
    if file.seed != file.gen.seed {
        return Err(Error::Format("dataset header seed disagrees with its config".into()));
    }
    file.gen.validate()?;
    let d = file.gen.input_dim;
    for bag in &file.weak_bags {
        bag.validate()?;
    }
    let all = file.weak_bags.iter().flat_map(|b| &b.instances).chain(&file.strong_instances);
    if all.into_iter().any(|i| i.features.len() != d) {
        return Err(Error::Format(format!("instance feature width differs from input_dim {d}")));
    }
    Ok(Dataset {
        gen: file.gen,
        weak: file.weak_bags,
        strong: file.strong_instances,
    })
}

/// One row per instance: source, bag_id, true_pattern, strong_label,
/// weak_label, gleason_group, f0..f{d−1}. Absent values are empty fields.
pub fn export_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut header: Vec<String> = ["source", "bag_id", "true_pattern", "strong_label", "weak_label", "gleason_group"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..ds.gen.input_dim).map(|j| format!("f{j}")));
    let csv_err = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    w.write_record(&header).map_err(csv_err)?;
    let label = |l: Option<super::BinaryLabel>| l.map(|l| l.name().to_string()).unwrap_or_default();
    for bag in &ds.weak {
        for inst in &bag.instances {
            let mut rec = vec![
                "weak".to_string(),
                bag.bag_id.to_string(),
                inst.true_pattern.name().into(),
                label(inst.strong_label),
                label(inst.weak_label),
                bag.gleason_group.name().into(),
            ];
            rec.extend(inst.features.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    for inst in &ds.strong {
        let mut rec = vec![
            "strong".to_string(),
            String::new(),
            inst.true_pattern.name().into(),
            label(inst.strong_label),
            label(inst.weak_label),
            String::new(),
        ];
        rec.extend(inst.features.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
