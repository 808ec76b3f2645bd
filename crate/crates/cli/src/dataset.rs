//! `images/` + `masks/` dataset directories.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub id: String,
    pub image: PathBuf,
    pub mask: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    /// Sorted by id.
    pub entries: Vec<Entry>,
    pub pairs: Vec<Vec<String>>,
}

fn is_image(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Image files in `dir` keyed by file stem.
fn scan(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let rd = std::fs::read_dir(dir).with_context(|| format!("cannot list {}", dir.display()))?;
    for e in rd {
        let p = e?.path();
        if !p.is_file() || !is_image(&p) {
            continue;
        }
        let Some(stem) = p.file_stem().and_then(|s| s.to_str()) else {
            bail!("non-UTF-8 file name {}", p.display());
        };
        if let Some(prev) = out.insert(stem.to_string(), p.clone()) {
            bail!("{} and {} share the basename {stem:?}", prev.display(), p.display());
        }
    }
    Ok(out)
}

impl Dataset {
    /// Reads the layout. With `need_masks` every image must have a mask.
    pub fn open(root: &Path, need_masks: bool) -> Result<Self> {
        let images_dir = root.join("images");
        if !images_dir.is_dir() {
            bail!("dataset {} has no images/ directory", root.display());
        }
        let images = scan(&images_dir)?;
        if images.is_empty() {
            bail!("dataset {} contains no images in {}", root.display(), images_dir.display());
        }
        let masks_dir = root.join("masks");
        let masks = if masks_dir.is_dir() { scan(&masks_dir)? } else { BTreeMap::new() };
        if let Some(orphan) = masks.keys().find(|k| !images.contains_key(*k)) {
            bail!("mask {orphan:?} in {} has no image", masks_dir.display());
        }
        let entries: Vec<Entry> = images
            .into_iter()
            .map(|(id, image)| Entry { mask: masks.get(&id).cloned(), id, image })
            .collect();
        if need_masks {
            if let Some(e) = entries.iter().find(|e| e.mask.is_none()) {
                bail!("image {} has no mask in {}", e.image.display(), masks_dir.display());
            }
        }
        let pairs_path = root.join("pairs.txt");
        let pairs = if pairs_path.is_file() { read_pairs(&pairs_path)? } else { Vec::new() };
        for p in &pairs {
            for id in p {
                if !entries.iter().any(|e| &e.id == id) {
                    bail!("{} names unknown image {id:?}", pairs_path.display());
                }
            }
        }
        Ok(Self { root: root.to_path_buf(), entries, pairs })
    }

    pub fn ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.id.clone()).collect()
    }

    pub fn get(&self, id: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.id == id)
    }
}

/// One group per non-empty line; `#` starts a comment.
pub fn read_pairs(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let groups: Vec<Vec<String>> = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .map(|l| l.split_whitespace().map(|t| basename(t).to_string()).collect::<Vec<_>>())
        .filter(|g| !g.is_empty())
        .collect();
    if let Some(g) = groups.iter().find(|g| g.len() < 2) {
        bail!("{}: group {:?} needs at least two images", path.display(), g);
    }
    Ok(groups)
}

/// `images/a.png`, `a.png` and `a` all name image `a`.
fn basename(token: &str) -> &str {
    let name = token.rsplit('/').next().unwrap_or(token);
    match name.rsplit_once('.') {
        Some((stem, ext)) if IMAGE_EXTENSIONS.contains(&ext.to_ascii_lowercase().as_str()) => stem,
        _ => name,
    }
}
