//! Corpus on disk: one tensor container per split plus a plain-text manifest.
//!
//! Container entries: `images` f32 `[N, 2, H, W]`, `masks` and `foreground` u8 `[N, H, W]`,
//! `labels` u8 `[N]` (condition index) and `patient_ids` u8 `[N, 8]` (little-endian u64).

use std::path::{Path, PathBuf};

use super::container::TensorContainer;
use crate::condition::Condition;
use crate::error::{Error, Result};
use crate::synth::{stack_images, Corpus, LabelledSlice, Split};

pub const MANIFEST: &str = "manifest.txt";

pub fn split_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{}.cfd", split.name()))
}

pub fn split_container(slices: &[&LabelledSlice]) -> Result<TensorContainer> {
    if slices.is_empty() {
        return Err(Error::invalid("cannot store an empty split"));
    }
    let mut c = TensorContainer::new();
    c.push_image("images", &stack_images(slices)?)?;
    c.push_masks("masks", &slices.iter().map(|s| s.mask.clone()).collect::<Vec<_>>())?;
    c.push_masks(
        "foreground",
        &slices.iter().map(|s| s.foreground.clone()).collect::<Vec<_>>(),
    )?;
    c.push_u8(
        "labels",
        &[slices.len()],
        slices.iter().map(|s| s.label.index() as u8).collect(),
    )?;
    c.push_u8(
        "patient_ids",
        &[slices.len(), 8],
        slices.iter().flat_map(|s| s.patient_id.to_le_bytes()).collect(),
    )?;
    Ok(c)
}

pub fn slices_from_container(c: &TensorContainer, split: Split) -> Result<Vec<LabelledSlice>> {
    let images = c.image("images")?;
    let masks = c.masks("masks")?;
    let fg = c.masks("foreground")?;
    let (_, labels) = c.u8_values("labels")?;
    let (id_dims, ids) = c.u8_values("patient_ids")?;
    let n = images.batch();
    if masks.len() != n || fg.len() != n || labels.len() != n || id_dims != [n, 8] {
        return Err(Error::Format("split container entries disagree on slice count".into()));
    }
    (0..n)
        .map(|i| {
            Ok(LabelledSlice {
                image: images.item(i),
                mask: masks[i].clone(),
                foreground: fg[i].clone(),
                label: Condition::from_index(labels[i] as usize)
                    .ok_or_else(|| Error::Format(format!("bad label code {}", labels[i])))?,
                patient_id: u64::from_le_bytes(ids[i * 8..i * 8 + 8].try_into().unwrap()),
                split,
            })
        })
        .collect()
}

/// One line per slice: `id label split row mask_offset`, where `mask_offset` is the element
/// offset of the slice's mask inside the split's `masks` payload.
pub fn manifest_text(corpus: &Corpus) -> String {
    let mut out = String::from("# id label split row mask_offset\n");
    for split in Split::ALL {
        for (row, s) in corpus.split(split).iter().enumerate() {
            let plane = s.mask.height() * s.mask.width();
            out.push_str(&format!(
                "{} {} {} {} {}\n",
                s.patient_id,
                s.label,
                split.name(),
                row,
                row * plane
            ));
        }
    }
    out
}

/// Writes the three split containers and the manifest; returns the paths written.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for split in Split::ALL {
        let path = split_path(dir, split);
        split_container(&corpus.split(split))?.write(&path)?;
        written.push(path);
    }
    let manifest = dir.join(MANIFEST);
    super::write_atomic(&manifest, manifest_text(corpus).as_bytes())?;
    written.push(manifest);
    Ok(written)
}

pub fn read_split(dir: &Path, split: Split) -> Result<Vec<LabelledSlice>> {
    let path = split_path(dir, split);
    if !path.exists() {
        return Err(Error::Config(format!("corpus split not found: {}", path.display())));
    }
    slices_from_container(&TensorContainer::read(&path)?, split)
}
