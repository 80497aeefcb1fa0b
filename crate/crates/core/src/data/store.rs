//! Dataset directory: `manifest` (TOML), `inputs.tnsr`, `labels.tnsr`, `splits`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use mlfd_numerics::{io as tio, Tensor};
use serde::{Deserialize, Serialize};

use super::{LabeledDataset, Split, Splits};
use crate::error::{Error, IoContext, Result};
use crate::util::sha256_hex;

const MANIFEST: &str = "manifest";
const INPUTS: &str = "inputs.tnsr";
const LABELS: &str = "labels.tnsr";
const SPLITS: &str = "splits";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    name: String,
    samples: usize,
    classes: usize,
    sample_shape: Vec<usize>,
    train: usize,
    val: usize,
    test: usize,
    /// file name -> sha256 hex
    checksums: BTreeMap<String, String>,
}

fn splits_text(s: &Splits) -> String {
    let mut out = String::new();
    for k in Split::ALL {
        out.push_str(k.as_str());
        out.push(':');
        for i in s.get(k) {
            out.push(' ');
            out.push_str(&i.to_string());
        }
        out.push('\n');
    }
    out
}

fn parse_splits(text: &str, file: &Path) -> Result<Splits> {
    let mut s = Splits::default();
    let mut seen = [false; 3];
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (key, rest) = line
            .split_once(':')
            .ok_or_else(|| Error::Format(format!("{}: line without 'split:' prefix", file.display())))?;
        let kind = Split::parse(key.trim()).map_err(|_| Error::Format(format!("{}: unknown split '{key}'", file.display())))?;
        let idx = rest
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format(format!("{}: bad index in {key}: {e}", file.display())))?;
        seen[kind as usize] = true;
        match kind {
            Split::Train => s.train = idx,
            Split::Val => s.val = idx,
            Split::Test => s.test = idx,
        }
    }
    if let Some(k) = Split::ALL.iter().find(|k| !seen[**k as usize]) {
        return Err(Error::Format(format!("{}: missing '{k}' line", file.display())));
    }
    Ok(s)
}

pub fn save_dataset(d: &LabeledDataset, dir: &Path) -> Result<()> {
    d.validate()?;
    fs::create_dir_all(dir).at(dir)?;
    let labels = Tensor::new(vec![d.len()], d.labels.iter().map(|&y| y as f64).collect())?;
    let files: [(&str, Vec<u8>); 3] = [
        (INPUTS, tio::encode(&d.inputs)?),
        (LABELS, tio::encode(&labels)?),
        (SPLITS, splits_text(&d.splits).into_bytes()),
    ];
    let mut checksums = BTreeMap::new();
    for (name, bytes) in &files {
        let p = dir.join(name);
        fs::write(&p, bytes).at(&p)?;
        checksums.insert((*name).to_string(), sha256_hex(bytes));
    }
    let m = Manifest {
        name: d.name.clone(),
        samples: d.len(),
        classes: d.classes,
        sample_shape: d.sample_shape().to_vec(),
        train: d.splits.train.len(),
        val: d.splits.val.len(),
        test: d.splits.test.len(),
        checksums,
    };
    let text = toml::to_string(&m).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    let p = dir.join(MANIFEST);
    fs::write(&p, text).at(&p)
}

fn read_checked(dir: &Path, name: &str, m: &Manifest) -> Result<Vec<u8>> {
    let p = dir.join(name);
    let bytes = fs::read(&p).at(&p)?;
    let expected = m
        .checksums
        .get(name)
        .ok_or_else(|| Error::Format(format!("{}: no checksum for {name}", dir.join(MANIFEST).display())))?;
    if &sha256_hex(&bytes) != expected {
        return Err(Error::Corruption(format!("{}: checksum mismatch", p.display())));
    }
    Ok(bytes)
}

pub fn load_dataset(dir: &Path) -> Result<LabeledDataset> {
    let mp = dir.join(MANIFEST);
    let text = fs::read_to_string(&mp).at(&mp)?;
    let m: Manifest = toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", mp.display())))?;
    if m.classes == 0 {
        return Err(Error::Format(format!("{}: classes must be >= 1", mp.display())));
    }

    let decode = |name: &str| -> Result<Tensor> {
        let bytes = read_checked(dir, name, &m)?;
        let (t, used) = tio::decode(&bytes).map_err(|e| Error::Corruption(format!("{}: {e}", dir.join(name).display())))?;
        if used != bytes.len() {
            return Err(Error::Corruption(format!("{}: trailing bytes", dir.join(name).display())));
        }
        Ok(t)
    };
    let inputs = decode(INPUTS)?;
    let label_t = decode(LABELS)?;
    let splits_bytes = read_checked(dir, SPLITS, &m)?;
    let splits_path = dir.join(SPLITS);
    let splits_str =
        String::from_utf8(splits_bytes).map_err(|_| Error::Format(format!("{}: not UTF-8", splits_path.display())))?;
    let splits = parse_splits(&splits_str, &splits_path)?;

    let labels: Vec<usize> = label_t
        .data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Format(format!("{}: non-integer label {v}", dir.join(LABELS).display())))
            }
        })
        .collect::<Result<_>>()?;

    if inputs.shape()[1..] != m.sample_shape[..] || labels.len() != m.samples {
        return Err(Error::Format(format!("{}: shapes disagree with the manifest", mp.display())));
    }
    if (splits.train.len(), splits.val.len(), splits.test.len()) != (m.train, m.val, m.test) {
        return Err(Error::Format(format!("{}: split sizes disagree with the manifest", mp.display())));
    }
    LabeledDataset::new(m.name, inputs, labels, m.classes, splits)
}
