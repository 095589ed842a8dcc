//! Sample files, the dataset manifest, and split lists.
//!
//! A sample file is the magic `HMS1\n`, one header line
//! `H W M C kind visible`, the image as little-endian f64 (M·H·W values),
//! then the full label map as u8 (H·W values). Images are stored raw —
//! normalization happens at load time in consumers that feed the network —
//! so the on-disk intensities stay usable for distribution audits.
//!
//! The manifest is `manifest.csv` with columns `id,kind,visible,path`
//! (paths relative to the dataset directory); split lists are `split.csv`
//! with columns `id,split`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hmseg_core::labels::{ClassTaxonomy, LabelMap};
use hmseg_core::network::ModalityMask;
use hmseg_core::phantom::{normalize, Sample, SampleKind, VisibleLabels};
use hmseg_core::sampling::{Split, SplitAssignment};
use hmseg_core::Tensor;

pub const MAGIC: &[u8; 5] = b"HMS1\n";
pub const MANIFEST_HEADER: &str = "id,kind,visible,path";
pub const SPLIT_HEADER: &str = "id,split";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub id: u64,
    pub kind: SampleKind,
    pub visible: VisibleLabels,
    pub path: String,
}

pub fn write_sample(path: &Path, sample: &Sample, tax: &ClassTaxonomy) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    let (h, w_) = (sample.height(), sample.width());
    let m = sample.mask.n_modalities();
    w.write_all(MAGIC)?;
    writeln!(
        w,
        "{h} {w_} {m} {} {} {}",
        tax.n_classes(),
        sample.kind.as_str(),
        sample.visible.as_str()
    )?;
    for x in sample.image.data() {
        w.write_all(&x.to_le_bytes())?;
    }
    w.write_all(sample.labels_full.values())?;
    w.flush()?;
    Ok(())
}

pub fn read_sample(path: &Path, tax: &ClassTaxonomy) -> Result<Sample> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut r = BufReader::new(file);
    read_sample_from(&mut r, tax).with_context(|| format!("reading sample {}", path.display()))
}

fn read_sample_from<R: BufRead>(r: &mut R, tax: &ClassTaxonomy) -> Result<Sample> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic).context("reading sample magic")?;
    if &magic != MAGIC {
        bail!("bad sample magic {:?}", String::from_utf8_lossy(&magic));
    }
    let mut header = String::new();
    r.by_ref()
        .take(256)
        .read_line(&mut header)
        .context("reading sample header")?;
    if !header.ends_with('\n') {
        bail!("sample header unterminated");
    }
    let tokens: Vec<&str> = header.split_whitespace().collect();
    let [h, w, m, c, kind, visible] = tokens.as_slice() else {
        bail!("sample header needs 6 fields, found {}", tokens.len());
    };
    let h: usize = h.parse().context("sample height")?;
    let w: usize = w.parse().context("sample width")?;
    let m: usize = m.parse().context("sample modality count")?;
    let c: usize = c.parse().context("sample class count")?;
    if c != tax.n_classes() {
        bail!(
            "sample declares {c} classes, taxonomy has {}",
            tax.n_classes()
        );
    }
    let kind = SampleKind::parse(kind).with_context(|| format!("unknown sample kind {kind:?}"))?;
    let visible = VisibleLabels::parse(visible)
        .with_context(|| format!("unknown annotation visibility {visible:?}"))?;

    let numel = m
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .context("sample dimensions overflow")?;
    let mut buf = vec![0u8; numel * 8];
    r.read_exact(&mut buf).context("sample image truncated")?;
    let data: Vec<f64> = buf
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
        .collect();
    let image = Tensor::new(vec![m, h, w], data).context("sample image shape")?;

    let mut labels = vec![0u8; h * w];
    r.read_exact(&mut labels)
        .context("sample labels truncated")?;
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        bail!("trailing bytes after sample payload");
    }
    let labels = LabelMap::new(h, w, labels, tax).context("sample labels rejected")?;

    let mask = match kind {
        SampleKind::Control => ModalityMask::only(0, m),
        SampleKind::Lesion => ModalityMask::all(m),
    }
    .context("sample modality mask")?;
    Sample::new(image, labels, visible, mask, kind, tax).context("sample invariants")
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.csv")
}

pub fn write_manifest(dir: &Path, rows: &[ManifestRow]) -> Result<PathBuf> {
    let path = manifest_path(dir);
    let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{MANIFEST_HEADER}")?;
    for row in rows {
        writeln!(
            w,
            "{},{},{},{}",
            row.id,
            row.kind.as_str(),
            row.visible.as_str(),
            row.path
        )?;
    }
    w.flush()?;
    Ok(path)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRow>> {
    let path = manifest_path(dir);
    let file = File::open(&path)
        .with_context(|| format!("opening {} (is this a dataset directory?)", path.display()))?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .context("manifest is empty")?
        .context("reading manifest header")?;
    if header != MANIFEST_HEADER {
        bail!("manifest header {header:?}, expected {MANIFEST_HEADER:?}");
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.context("reading manifest row")?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let [id, kind, visible, file_path] = fields.as_slice() else {
            bail!("manifest row {} needs 4 fields: {line:?}", i + 2);
        };
        rows.push(ManifestRow {
            id: id
                .parse()
                .with_context(|| format!("manifest row {} id", i + 2))?,
            kind: SampleKind::parse(kind)
                .with_context(|| format!("manifest row {} kind {kind:?}", i + 2))?,
            visible: VisibleLabels::parse(visible)
                .with_context(|| format!("manifest row {} visibility {visible:?}", i + 2))?,
            path: (*file_path).to_string(),
        });
    }
    Ok(rows)
}

pub fn split_path(dir: &Path) -> PathBuf {
    dir.join("split.csv")
}

pub fn write_split(dir: &Path, assignment: &SplitAssignment) -> Result<PathBuf> {
    let path = split_path(dir);
    let mut rows: Vec<(u64, Split)> = Vec::new();
    for (ids, split) in [
        (&assignment.train, Split::Train),
        (&assignment.val, Split::Val),
        (&assignment.test, Split::Test),
    ] {
        rows.extend(ids.iter().map(|&id| (id, split)));
    }
    rows.sort_unstable_by_key(|&(id, _)| id);
    let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{SPLIT_HEADER}")?;
    for (id, split) in rows {
        writeln!(w, "{id},{}", split.as_str())?;
    }
    w.flush()?;
    Ok(path)
}

pub fn read_split(dir: &Path) -> Result<BTreeMap<u64, Split>> {
    let path = split_path(dir);
    let file = File::open(&path)
        .with_context(|| format!("opening {} (run `hmseg split` first)", path.display()))?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .context("split list is empty")?
        .context("reading split header")?;
    if header != SPLIT_HEADER {
        bail!("split header {header:?}, expected {SPLIT_HEADER:?}");
    }
    let mut map = BTreeMap::new();
    for (i, line) in lines.enumerate() {
        let line = line.context("reading split row")?;
        if line.is_empty() {
            continue;
        }
        let (id, split) = line
            .split_once(',')
            .with_context(|| format!("split row {} needs 2 fields: {line:?}", i + 2))?;
        let id: u64 = id
            .parse()
            .with_context(|| format!("split row {} id", i + 2))?;
        let split =
            Split::parse(split).with_context(|| format!("split row {} name {split:?}", i + 2))?;
        if map.insert(id, split).is_some() {
            bail!("split row {}: duplicate id {id}", i + 2);
        }
    }
    Ok(map)
}

/// Load the samples behind the given manifest rows, in row order. Each
/// payload is checked against its manifest entry, and `normalize_images`
/// applies the per-channel intensity normalization a network expects.
pub fn load_samples(
    dir: &Path,
    rows: &[&ManifestRow],
    tax: &ClassTaxonomy,
    normalize_images: bool,
) -> Result<Vec<(u64, Sample)>> {
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        let mut sample = read_sample(&dir.join(&row.path), tax)?;
        if sample.kind != row.kind || sample.visible != row.visible {
            bail!(
                "sample {} disagrees with its manifest row: file says {}/{}, manifest says {}/{}",
                row.path,
                sample.kind.as_str(),
                sample.visible.as_str(),
                row.kind.as_str(),
                row.visible.as_str()
            );
        }
        if normalize_images {
            sample.image = normalize(&sample.image)
                .with_context(|| format!("normalizing sample {}", row.id))?;
        }
        out.push((row.id, sample));
    }
    Ok(out)
}
