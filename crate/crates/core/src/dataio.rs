//! On-disk formats: CSV tables, 8-bit PGM images, the JSON manifest and
//! subject splits.
//!
//! Layout under a dataset root:
//!
//! ```text
//! manifest.json
//! latents.csv              id,z0..z{d-1}
//! eta.csv                  id,eta1,eta2,eta3
//! split.csv                id,split
//! images/{id:06}.pgm
//! levels/s2_{σ²}/eta_hat.csv        id,sigma2,eta1,eta2,eta3
//! levels/s2_{σ²}/observations.csv   id,sigma2,time,y
//! ```
//!
//! Later stages add their own files and register them in the manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nlme::ObservationSet;
use crate::renderer::Image;
use crate::rng::{self, Stream};
use crate::sampling::{LatentVector, N_EFFECTS};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let name = path.file_name().ok_or_else(|| Error::invalid(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// 17 significant digits; parses back to the identical `f64`.
pub fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_real(s: &str, what: &str) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|e| Error::format(what, format!("bad number {s:?}: {e}")))
}

fn parse_id(s: &str, what: &str) -> Result<u64> {
    s.trim().parse::<u64>().map_err(|e| Error::format(what, format!("bad id {s:?}: {e}")))
}

/// Directory name of a noise level, e.g. `s2_0`, `s2_18`, `s2_0.5`.
pub fn level_dir(sigma2: f64) -> String {
    format!("s2_{sigma2}")
}

pub fn level_path(sigma2: f64, file: &str) -> String {
    format!("levels/{}/{file}", level_dir(sigma2))
}

pub fn image_path(id: u64) -> String {
    format!("images/{id:06}.pgm")
}

// ---------------------------------------------------------------- CSV

fn csv_bytes(header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| Error::format("csv", e.to_string()))
}

fn csv_records(bytes: &[u8], what: &str, expected_header: &[String]) -> Result<Vec<csv::StringRecord>> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let header = r.headers()?.clone();
    if header.iter().ne(expected_header.iter().map(String::as_str)) {
        return Err(Error::format(what, format!("unexpected header {:?}", header.iter().collect::<Vec<_>>())));
    }
    Ok(r.records().collect::<std::result::Result<Vec<_>, _>>()?)
}

fn effect_header(prefix: &[&str]) -> Vec<String> {
    prefix.iter().map(|s| s.to_string()).chain((1..=N_EFFECTS).map(|k| format!("eta{k}"))).collect()
}

pub fn latents_to_csv(rows: &[(u64, &LatentVector)]) -> Result<Vec<u8>> {
    let d = rows.first().map_or(0, |r| r.1.dim());
    if rows.iter().any(|r| r.1.dim() != d) {
        return Err(Error::invalid("latent vectors of differing dimension"));
    }
    let header: Vec<String> = std::iter::once("id".to_string()).chain((0..d).map(|j| format!("z{j}"))).collect();
    csv_bytes(
        &header,
        rows.iter().map(|(id, z)| std::iter::once(id.to_string()).chain(z.values().iter().map(|&v| fmt_real(v))).collect()),
    )
}

pub fn latents_from_csv(bytes: &[u8]) -> Result<Vec<(u64, LatentVector)>> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let d = r.headers()?.len().saturating_sub(1);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != d + 1 {
            return Err(Error::format("latents csv", format!("row has {} fields, expected {}", rec.len(), d + 1)));
        }
        let id = parse_id(&rec[0], "latents csv")?;
        let z = (1..=d).map(|j| parse_real(&rec[j], "latents csv")).collect::<Result<Vec<_>>>()?;
        out.push((id, LatentVector::new(z)?));
    }
    Ok(out)
}

pub fn effects_to_csv(rows: &[(u64, [f64; N_EFFECTS])]) -> Result<Vec<u8>> {
    csv_bytes(
        &effect_header(&["id"]),
        rows.iter().map(|(id, e)| std::iter::once(id.to_string()).chain(e.iter().map(|&v| fmt_real(v))).collect()),
    )
}

pub fn effects_from_csv(bytes: &[u8]) -> Result<Vec<(u64, [f64; N_EFFECTS])>> {
    csv_records(bytes, "effects csv", &effect_header(&["id"]))?
        .iter()
        .map(|rec| {
            let mut e = [0.0; N_EFFECTS];
            for k in 0..N_EFFECTS {
                e[k] = parse_real(&rec[1 + k], "effects csv")?;
            }
            Ok((parse_id(&rec[0], "effects csv")?, e))
        })
        .collect()
}

/// Effects at a noise level (`id,sigma2,eta1..3`).
pub fn level_effects_to_csv(sigma2: f64, rows: &[(u64, [f64; N_EFFECTS])]) -> Result<Vec<u8>> {
    csv_bytes(
        &effect_header(&["id", "sigma2"]),
        rows.iter().map(|(id, e)| {
            [id.to_string(), fmt_real(sigma2)].into_iter().chain(e.iter().map(|&v| fmt_real(v))).collect()
        }),
    )
}

pub fn level_effects_from_csv(bytes: &[u8]) -> Result<(Option<f64>, Vec<(u64, [f64; N_EFFECTS])>)> {
    let recs = csv_records(bytes, "level effects csv", &effect_header(&["id", "sigma2"]))?;
    let mut sigma2 = None;
    let mut rows = Vec::with_capacity(recs.len());
    for rec in &recs {
        let s = parse_real(&rec[1], "level effects csv")?;
        if *sigma2.get_or_insert(s) != s {
            return Err(Error::format("level effects csv", "mixed noise levels in one file"));
        }
        let mut e = [0.0; N_EFFECTS];
        for k in 0..N_EFFECTS {
            e[k] = parse_real(&rec[2 + k], "level effects csv")?;
        }
        rows.push((parse_id(&rec[0], "level effects csv")?, e));
    }
    Ok((sigma2, rows))
}

pub fn observations_to_csv(obs: &[ObservationSet]) -> Result<Vec<u8>> {
    let header: Vec<String> = ["id", "sigma2", "time", "y"].map(String::from).to_vec();
    csv_bytes(
        &header,
        obs.iter().flat_map(|o| {
            o.times
                .iter()
                .zip(&o.y)
                .map(move |(t, y)| vec![o.subject_id.to_string(), fmt_real(o.sigma2), fmt_real(*t), fmt_real(*y)])
        }),
    )
}

/// Groups consecutive rows by subject id.
pub fn observations_from_csv(bytes: &[u8]) -> Result<Vec<ObservationSet>> {
    let header: Vec<String> = ["id", "sigma2", "time", "y"].map(String::from).to_vec();
    let mut out: Vec<ObservationSet> = Vec::new();
    for rec in csv_records(bytes, "observations csv", &header)? {
        let id = parse_id(&rec[0], "observations csv")?;
        let s = parse_real(&rec[1], "observations csv")?;
        let t = parse_real(&rec[2], "observations csv")?;
        let y = parse_real(&rec[3], "observations csv")?;
        match out.last_mut() {
            Some(o) if o.subject_id == id && o.sigma2 == s => {
                o.times.push(t);
                o.y.push(y);
            }
            _ => {
                if out.iter().any(|o| o.subject_id == id && o.sigma2 == s) {
                    return Err(Error::format("observations csv", format!("rows of subject {id} are not contiguous")));
                }
                out.push(ObservationSet::new(id, s, vec![t], vec![y])?);
            }
        }
    }
    Ok(out)
}

/// One empirical-Bayes fit as stored on disk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EbRecord {
    pub subject_id: u64,
    pub sigma2: f64,
    pub eta: [f64; N_EFFECTS],
    pub objective: f64,
    pub converged: bool,
}

fn eb_header() -> Vec<String> {
    let mut h = effect_header(&["subject_id", "sigma2"]);
    h.push("objective".into());
    h.push("converged".into());
    h
}

pub fn eb_to_csv(rows: &[EbRecord]) -> Result<Vec<u8>> {
    csv_bytes(
        &eb_header(),
        rows.iter().map(|r| {
            let mut v = vec![r.subject_id.to_string(), fmt_real(r.sigma2)];
            v.extend(r.eta.iter().map(|&x| fmt_real(x)));
            v.push(fmt_real(r.objective));
            v.push(u8::from(r.converged).to_string());
            v
        }),
    )
}

pub fn eb_from_csv(bytes: &[u8]) -> Result<Vec<EbRecord>> {
    csv_records(bytes, "eb csv", &eb_header())?
        .iter()
        .map(|rec| {
            let mut eta = [0.0; N_EFFECTS];
            for k in 0..N_EFFECTS {
                eta[k] = parse_real(&rec[2 + k], "eb csv")?;
            }
            let converged = match rec[6].trim() {
                "1" => true,
                "0" => false,
                other => return Err(Error::format("eb csv", format!("bad converged flag {other:?}"))),
            };
            Ok(EbRecord {
                subject_id: parse_id(&rec[0], "eb csv")?,
                sigma2: parse_real(&rec[1], "eb csv")?,
                eta,
                objective: parse_real(&rec[5], "eb csv")?,
                converged,
            })
        })
        .collect()
}

// ---------------------------------------------------------------- PGM

/// Binary greyscale PGM (`P5`, maxval 255).
pub fn image_to_pgm(img: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.to_u8());
    out
}

pub fn image_from_pgm(bytes: &[u8]) -> Result<Image> {
    let bad = |d: &str| Error::format("pgm", d.to_string());
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad(&format!("magic {:?}, expected P5", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad(&format!("bad header field {s:?}")));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(bad(&format!("maxval {maxval}, only 255 is supported")));
    }
    // exactly one whitespace byte separates the header from the raster
    let data = bytes.get(pos + 1..).ok_or_else(|| bad("missing raster"))?;
    if data.len() != w * h {
        return Err(bad(&format!("raster has {} bytes, expected {}", data.len(), w * h)));
    }
    Image::from_u8(h, w, data)
}

// ---------------------------------------------------------------- splits

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SplitSpec {
    /// Val and test sizes are `round(n · fraction)`; the remainder goes to train.
    Fractions { train: f64, val: f64, test: f64 },
    /// Exact subject counts; they must sum to `n`.
    Counts { train: usize, val: usize, test: usize },
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::Fractions { train: 0.8636, val: 0.0455, test: 0.0909 }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SplitSpec::Fractions { train, val, test } => {
                if !(train > 0.0 && val > 0.0 && test > 0.0) {
                    return Err(Error::invalid("split fractions must be positive"));
                }
                // the default fractions are four-decimal roundings of 950/50/100 over 1100
                if (train + val + test - 1.0).abs() > 1e-9 {
                    return Err(Error::invalid(format!("split fractions sum to {}, not 1", train + val + test)));
                }
            }
            SplitSpec::Counts { train, val, test } => {
                if train == 0 || val == 0 || test == 0 {
                    return Err(Error::invalid("split counts must be positive"));
                }
            }
        }
        Ok(())
    }

    /// `(train, val, test)` sizes for `n` subjects.
    pub fn sizes(&self, n: usize) -> Result<(usize, usize, usize)> {
        self.validate()?;
        if n < 3 {
            return Err(Error::invalid(format!("cannot split {n} subjects three ways")));
        }
        match *self {
            SplitSpec::Fractions { val, test, .. } => {
                let v = ((n as f64 * val).round() as usize).max(1);
                let t = ((n as f64 * test).round() as usize).max(1);
                if v + t >= n {
                    return Err(Error::invalid(format!("split of {n} subjects leaves no training subjects")));
                }
                Ok((n - v - t, v, t))
            }
            SplitSpec::Counts { train, val, test } => {
                if train + val + test != n {
                    return Err(Error::invalid(format!(
                        "split counts {train}+{val}+{test} do not sum to {n} subjects"
                    )));
                }
                Ok((train, val, test))
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
}

impl Splits {
    pub fn counts(&self) -> SplitCounts {
        SplitCounts { train: self.train.len(), val: self.val.len(), test: self.test.len() }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Seeded shuffle, then consecutive blocks; each block is returned sorted.
pub fn split(ids: &[u64], spec: &SplitSpec, seed: u64) -> Result<Splits> {
    let (n_train, n_val, _) = spec.sizes(ids.len())?;
    let mut seen = ids.to_vec();
    seen.sort_unstable();
    if seen.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::invalid("split: duplicate subject ids"));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut rng::stream_rng(seed, Stream::Split, 0));
    let mut train = shuffled[..n_train].to_vec();
    let mut val = shuffled[n_train..n_train + n_val].to_vec();
    let mut test = shuffled[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(Splits { train, val, test })
}

pub fn splits_to_csv(s: &Splits) -> Result<Vec<u8>> {
    let mut rows: Vec<(u64, &str)> = s
        .train
        .iter()
        .map(|&i| (i, "train"))
        .chain(s.val.iter().map(|&i| (i, "val")))
        .chain(s.test.iter().map(|&i| (i, "test")))
        .collect();
    rows.sort_unstable();
    csv_bytes(&["id".into(), "split".into()], rows.into_iter().map(|(i, k)| vec![i.to_string(), k.to_string()]))
}

pub fn splits_from_csv(bytes: &[u8]) -> Result<Splits> {
    let mut s = Splits::default();
    for rec in csv_records(bytes, "split csv", &["id".into(), "split".into()])? {
        let id = parse_id(&rec[0], "split csv")?;
        match &rec[1] {
            "train" => s.train.push(id),
            "val" => s.val.push(id),
            "test" => s.test.push(id),
            other => return Err(Error::format("split csv", format!("unknown split {other:?}"))),
        }
    }
    Ok(s)
}

// ---------------------------------------------------------------- manifest

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub master_seed: u64,
    pub config_digest: String,
    pub n_subjects: usize,
    pub latent_dim: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub counts: SplitCounts,
    pub levels: Vec<f64>,
    pub effect_indices: [usize; N_EFFECTS],
    /// Relative path → checksum, sorted by path.
    pub files: BTreeMap<String, FileEntry>,
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::UnsupportedVersion { found: self.schema_version, supported: SCHEMA_VERSION });
        }
        let c = self.counts;
        if c.train + c.val + c.test != self.n_subjects {
            return Err(Error::format(
                "manifest",
                format!("split counts {}+{}+{} do not sum to {} subjects", c.train, c.val, c.test, self.n_subjects),
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        // check the version before the full shape so old layouts get a clear error
        let raw: serde_json::Value = serde_json::from_str(text)?;
        let found = raw.get("schema_version").and_then(|v| v.as_u64()).ok_or_else(|| {
            Error::format("manifest", "missing schema_version")
        })?;
        if found != u64::from(SCHEMA_VERSION) {
            return Err(Error::UnsupportedVersion { found: found as u32, supported: SCHEMA_VERSION });
        }
        let m: Manifest = serde_json::from_value(raw)?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(root: &Path) -> Result<Self> {
        let bytes = read_file(&root.join(MANIFEST_FILE))?;
        Self::from_json(&String::from_utf8_lossy(&bytes))
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        self.validate()?;
        write_atomic(&root.join(MANIFEST_FILE), self.to_json()?.as_bytes())
    }

    /// Writes a file under `root` and records its checksum.
    pub fn put(&mut self, root: &Path, rel: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&root.join(rel), bytes)?;
        self.files.insert(rel.to_string(), FileEntry { sha256: sha256_hex(bytes), bytes: bytes.len() as u64 });
        Ok(())
    }

    /// Reads a registered file and checks it against its recorded checksum.
    pub fn read_verified(&self, root: &Path, rel: &str) -> Result<Vec<u8>> {
        let entry = self.files.get(rel).ok_or_else(|| Error::MissingFile(root.join(rel)))?;
        let bytes = read_file(&root.join(rel))?;
        let found = sha256_hex(&bytes);
        if found != entry.sha256 {
            return Err(Error::ChecksumMismatch { path: root.join(rel), expected: entry.sha256.clone(), found });
        }
        Ok(bytes)
    }

    pub fn has(&self, rel: &str) -> bool {
        self.files.contains_key(rel)
    }

    /// Checks every registered file; the first failure is returned.
    pub fn verify(&self, root: &Path) -> Result<()> {
        for rel in self.files.keys() {
            self.read_verified(root, rel)?;
        }
        Ok(())
    }
}

/// Verifies the manifest under `root` and all files it lists.
pub fn verify(root: &Path) -> Result<Manifest> {
    let m = Manifest::load(root)?;
    m.verify(root)?;
    Ok(m)
}

// ---------------------------------------------------------------- datasets

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub id: u64,
    pub latent: LatentVector,
    pub image: Image,
    pub eta: [f64; N_EFFECTS],
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelRecord {
    pub sigma2: f64,
    pub eta_hat: Vec<(u64, [f64; N_EFFECTS])>,
    pub observations: Vec<ObservationSet>,
}

/// Provenance written into the manifest alongside the data.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub master_seed: u64,
    pub config_digest: String,
    pub effect_indices: [usize; N_EFFECTS],
    pub latent_dim: usize,
    pub image_height: usize,
    pub image_width: usize,
}

/// Writes every generated artifact and commits the manifest last. If any
/// write fails no manifest is produced.
pub fn write_dataset(
    root: &Path,
    subjects: &[SubjectRecord],
    levels: &[LevelRecord],
    splits: &Splits,
    meta: &DatasetMeta,
) -> Result<Manifest> {
    let mut ids: Vec<u64> = subjects.iter().map(|s| s.id).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::invalid("duplicate subject ids"));
    }
    let mut split_ids: Vec<u64> = splits.train.iter().chain(&splits.val).chain(&splits.test).copied().collect();
    split_ids.sort_unstable();
    if split_ids != ids {
        return Err(Error::invalid("split ids do not match subject ids"));
    }
    for s in subjects {
        if s.latent.dim() != meta.latent_dim || s.image.height() != meta.image_height || s.image.width() != meta.image_width {
            return Err(Error::invalid(format!("subject {} does not match the dataset shape", s.id)));
        }
    }
    for l in levels {
        let mut a: Vec<u64> = l.eta_hat.iter().map(|r| r.0).collect();
        let mut b: Vec<u64> = l.observations.iter().map(|o| o.subject_id).collect();
        a.sort_unstable();
        b.sort_unstable();
        if a != ids || b != ids {
            return Err(Error::invalid(format!("level {} does not cover the same subject ids", l.sigma2)));
        }
    }
    let stale = root.join(MANIFEST_FILE);
    if stale.exists() {
        fs::remove_file(&stale).map_err(|e| Error::io(&stale, e))?;
    }

    let mut m = Manifest {
        schema_version: SCHEMA_VERSION,
        master_seed: meta.master_seed,
        config_digest: meta.config_digest.clone(),
        n_subjects: subjects.len(),
        latent_dim: meta.latent_dim,
        image_height: meta.image_height,
        image_width: meta.image_width,
        counts: splits.counts(),
        levels: levels.iter().map(|l| l.sigma2).collect(),
        effect_indices: meta.effect_indices,
        files: BTreeMap::new(),
    };
    let lat: Vec<(u64, &LatentVector)> = subjects.iter().map(|s| (s.id, &s.latent)).collect();
    m.put(root, "latents.csv", &latents_to_csv(&lat)?)?;
    let eta: Vec<(u64, [f64; N_EFFECTS])> = subjects.iter().map(|s| (s.id, s.eta)).collect();
    m.put(root, "eta.csv", &effects_to_csv(&eta)?)?;
    m.put(root, "split.csv", &splits_to_csv(splits)?)?;
    for s in subjects {
        m.put(root, &image_path(s.id), &image_to_pgm(&s.image))?;
    }
    for l in levels {
        m.put(root, &level_path(l.sigma2, "eta_hat.csv"), &level_effects_to_csv(l.sigma2, &l.eta_hat)?)?;
        m.put(root, &level_path(l.sigma2, "observations.csv"), &observations_to_csv(&l.observations)?)?;
    }
    m.save(root)?;
    Ok(m)
}

/// Read access to a dataset on disk. Files are loaded (and checksummed)
/// on demand.
#[derive(Debug, Clone)]
pub struct DatasetHandle {
    root: PathBuf,
    manifest: Manifest,
}

/// Opens the dataset whose manifest is at `manifest_path` (or in the
/// directory `manifest_path`). Every listed file must exist.
pub fn read_dataset(manifest_path: &Path) -> Result<DatasetHandle> {
    let root = if manifest_path.is_dir() {
        manifest_path.to_path_buf()
    } else {
        manifest_path.parent().map(Path::to_path_buf).unwrap_or_default()
    };
    let bytes = read_file(&root.join(MANIFEST_FILE))?;
    let manifest = Manifest::from_json(&String::from_utf8_lossy(&bytes))?;
    for rel in manifest.files.keys() {
        if !root.join(rel).is_file() {
            return Err(Error::MissingFile(root.join(rel)));
        }
    }
    Ok(DatasetHandle { root, manifest })
}

impl DatasetHandle {
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn manifest_mut(&mut self) -> &mut Manifest {
        &mut self.manifest
    }

    pub fn read(&self, rel: &str) -> Result<Vec<u8>> {
        self.manifest.read_verified(&self.root, rel)
    }

    pub fn latents(&self) -> Result<Vec<(u64, LatentVector)>> {
        latents_from_csv(&self.read("latents.csv")?)
    }

    pub fn eta(&self) -> Result<Vec<(u64, [f64; N_EFFECTS])>> {
        effects_from_csv(&self.read("eta.csv")?)
    }

    pub fn splits(&self) -> Result<Splits> {
        splits_from_csv(&self.read("split.csv")?)
    }

    pub fn image(&self, id: u64) -> Result<Image> {
        image_from_pgm(&self.read(&image_path(id))?)
    }

    fn check_level(&self, sigma2: f64) -> Result<()> {
        if self.manifest.levels.contains(&sigma2) {
            Ok(())
        } else {
            Err(Error::invalid(format!("noise level {sigma2} is not part of this dataset")))
        }
    }

    pub fn eta_hat(&self, sigma2: f64) -> Result<Vec<(u64, [f64; N_EFFECTS])>> {
        self.check_level(sigma2)?;
        Ok(level_effects_from_csv(&self.read(&level_path(sigma2, "eta_hat.csv"))?)?.1)
    }

    pub fn observations(&self, sigma2: f64) -> Result<Vec<ObservationSet>> {
        self.check_level(sigma2)?;
        observations_from_csv(&self.read(&level_path(sigma2, "observations.csv"))?)
    }

    /// Writes a stage output, registers it and re-commits the manifest.
    pub fn put(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        self.manifest.put(&self.root, rel, bytes)?;
        self.manifest.save(&self.root)
    }
}
