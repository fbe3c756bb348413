//! Cohorts of paired FC/SC connectivity matrices, anatomical prior masks,
//! the on-disk cohort layout and the planted-signal cohort generator.
//!
//! A cohort directory holds `manifest.toml` plus one CSV file per matrix:
//! `fc_<id>.csv`, `sc_<id>.csv` and `prior_<name>.csv`. Each CSV file has
//! N lines of N comma-separated decimal values and no header.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const MANIFEST_FORMAT: &str = "braintap-cohort";
pub const MANIFEST_VERSION: u32 = 1;

const SYMMETRY_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// One participant: functional and structural connectivity plus a label.
#[derive(Clone, Debug, PartialEq)]
pub struct Subject {
    pub id: String,
    pub fc: Tensor,
    pub sc: Tensor,
    pub label: u8,
}

impl Subject {
    pub fn n_rois(&self) -> usize {
        self.fc.rows()
    }
}

/// K expert prior masks plus the derived complement `free`.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorSet {
    pub names: Vec<String>,
    pub masks: Vec<Tensor>,
    pub free_mask: Tensor,
}

impl PriorSet {
    pub fn new(n_rois: usize, names: Vec<String>, masks: Vec<Tensor>) -> Result<Self> {
        if names.len() != masks.len() {
            return Err(Error::Parameter(format!(
                "{} prior names for {} masks",
                names.len(),
                masks.len()
            )));
        }
        for (name, mask) in names.iter().zip(&masks) {
            validate_mask(mask, n_rois)
                .map_err(|msg| Error::Parameter(format!("prior '{name}': {msg}")))?;
        }
        let free_mask = derive_free_mask(&masks, n_rois);
        Ok(Self {
            names,
            masks,
            free_mask,
        })
    }

    /// Number of expert priors (excluding the free region).
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn n_rois(&self) -> usize {
        self.free_mask.rows()
    }

    /// All K + 1 masks with the free region last.
    pub fn all_masks(&self) -> impl Iterator<Item = &Tensor> {
        self.masks.iter().chain(std::iter::once(&self.free_mask))
    }

    /// Names of the priors containing edge (i, j); empty for free edges.
    pub fn membership(&self, i: usize, j: usize) -> Vec<&str> {
        self.names
            .iter()
            .zip(&self.masks)
            .filter(|(_, m)| m.get(i, j) == 1.0)
            .map(|(n, _)| n.as_str())
            .collect()
    }
}

/// `1 − max_k Π_k` off the diagonal, zero on it.
pub fn derive_free_mask(masks: &[Tensor], n_rois: usize) -> Tensor {
    Tensor::from_fn(n_rois, n_rois, |i, j| {
        if i != j && masks.iter().all(|m| m.get(i, j) == 0.0) {
            1.0
        } else {
            0.0
        }
    })
}

fn validate_mask(mask: &Tensor, n: usize) -> std::result::Result<(), String> {
    if mask.shape() != [n, n] {
        return Err(format!("dimension {:?}, expected {n}x{n}", mask.shape()));
    }
    if let Some(v) = mask.data().iter().find(|v| **v != 0.0 && **v != 1.0) {
        return Err(format!("non-binary prior entry {v}"));
    }
    validate_connectivity(mask)
}

fn validate_connectivity(m: &Tensor) -> std::result::Result<(), String> {
    if m.rows() != m.cols() {
        return Err(format!("non-square matrix {:?}", m.shape()));
    }
    for i in 0..m.rows() {
        if m.get(i, i).abs() > SYMMETRY_TOL {
            return Err(format!(
                "nonzero diagonal entry {} at ({i},{i})",
                m.get(i, i)
            ));
        }
        for j in (i + 1)..m.cols() {
            if (m.get(i, j) - m.get(j, i)).abs() > SYMMETRY_TOL {
                return Err(format!(
                    "asymmetric entries at ({i},{j}): {} vs {}",
                    m.get(i, j),
                    m.get(j, i)
                ));
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: String,
    pub label: u8,
    pub fc: String,
    pub sc: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorRecord {
    pub name: String,
    pub path: String,
}

/// Contents of `manifest.toml`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortManifest {
    pub format: String,
    pub version: u32,
    pub n_rois: usize,
    #[serde(default = "default_task")]
    pub task: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub priors: Vec<PriorRecord>,
    pub subjects: Vec<SubjectRecord>,
}

fn default_task() -> String {
    "unspecified".to_string()
}

/// A loaded, validated cohort.
#[derive(Clone, Debug)]
pub struct Cohort {
    pub manifest: CohortManifest,
    pub subjects: Vec<Subject>,
    pub priors: PriorSet,
}

impl Cohort {
    pub fn n_rois(&self) -> usize {
        self.manifest.n_rois
    }

    /// Subjects assigned to `split`, in manifest order.
    pub fn split(&self, split: Split) -> Vec<&Subject> {
        self.manifest
            .subjects
            .iter()
            .zip(&self.subjects)
            .filter(|(r, _)| r.split == split)
            .map(|(_, s)| s)
            .collect()
    }
}

pub fn read_matrix(path: &Path) -> Result<Tensor> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::load(path, format!("line {}: {e}", line_no + 1)))?;
        rows.push(row);
    }
    let cols = rows.first().map_or(0, Vec::len);
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != cols) {
        return Err(Error::load(
            path,
            format!(
                "dimension mismatch: row {} has {} values, row 1 has {cols}",
                i + 1,
                r.len()
            ),
        ));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::load(path, "non-finite value"));
    }
    Tensor::from_rows(&rows).map_err(|e| Error::load(path, e.to_string()))
}

pub fn write_matrix(path: &Path, m: &Tensor) -> Result<()> {
    let mut out = String::with_capacity(m.len() * 10);
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&format_value(m.get(i, j)));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn format_value(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{v}")
    } else {
        format!("{v:.6}")
    }
}

fn read_square(path: &Path, n: usize) -> Result<Tensor> {
    let m = read_matrix(path)?;
    if m.shape() != [n, n] {
        return Err(Error::load(
            path,
            format!(
                "dimension mismatch: {}x{}, manifest declares N={n}",
                m.rows(),
                m.cols()
            ),
        ));
    }
    Ok(m)
}

/// Reads and validates a cohort directory.
pub fn load_cohort(dir: &Path) -> Result<Cohort> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: CohortManifest =
        toml::from_str(&text).map_err(|e| Error::load(&manifest_path, e.to_string()))?;
    if manifest.format != MANIFEST_FORMAT || manifest.version != MANIFEST_VERSION {
        return Err(Error::load(
            &manifest_path,
            format!(
                "unsupported format {} v{}",
                manifest.format, manifest.version
            ),
        ));
    }
    let n = manifest.n_rois;
    if n < 2 {
        return Err(Error::load(&manifest_path, format!("n_rois {n} too small")));
    }

    let mut names = Vec::new();
    let mut masks = Vec::new();
    for rec in &manifest.priors {
        let path = dir.join(&rec.path);
        if names.contains(&rec.name) {
            return Err(Error::load(
                &manifest_path,
                format!("duplicate prior '{}'", rec.name),
            ));
        }
        let mask = read_square(&path, n)?;
        validate_mask(&mask, n).map_err(|msg| Error::load(&path, msg))?;
        names.push(rec.name.clone());
        masks.push(mask);
    }
    let priors = PriorSet::new(n, names, masks)?;

    let mut subjects = Vec::with_capacity(manifest.subjects.len());
    let mut seen = std::collections::BTreeSet::new();
    for rec in &manifest.subjects {
        if !seen.insert(rec.id.as_str()) {
            return Err(Error::load(
                &manifest_path,
                format!("duplicate subject id '{}'", rec.id),
            ));
        }
        if rec.label > 1 {
            return Err(Error::load(
                &manifest_path,
                format!("invalid label {} for subject '{}'", rec.label, rec.id),
            ));
        }
        let load = |file: &str| -> Result<Tensor> {
            let path = dir.join(file);
            let m = read_square(&path, n)?;
            validate_connectivity(&m).map_err(|msg| Error::load(&path, msg))?;
            Ok(m)
        };
        subjects.push(Subject {
            id: rec.id.clone(),
            fc: load(&rec.fc)?,
            sc: load(&rec.sc)?,
            label: rec.label,
        });
    }
    Ok(Cohort {
        manifest,
        subjects,
        priors,
    })
}

/// Writes `cohort` as a cohort directory (manifest plus CSV matrices).
pub fn save_cohort(dir: &Path, cohort: &Cohort) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (rec, mask) in cohort.manifest.priors.iter().zip(&cohort.priors.masks) {
        write_matrix(&dir.join(&rec.path), mask)?;
    }
    for (rec, s) in cohort.manifest.subjects.iter().zip(&cohort.subjects) {
        write_matrix(&dir.join(&rec.fc), &s.fc)?;
        write_matrix(&dir.join(&rec.sc), &s.sc)?;
    }
    let text = toml::to_string(&cohort.manifest)
        .map_err(|e| Error::Config(format!("serializing manifest: {e}")))?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Settings of the planted-signal generator.
///
/// Every subject's matrices are `background + label · signal + noise`:
/// a shared population template plus subject-specific low-rank variation,
/// the class signal added uniformly inside one prior block per modality,
/// and i.i.d. symmetric Gaussian noise of standard deviation `noise_sd`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub n_subjects: usize,
    pub n_rois: usize,
    pub n_priors: usize,
    pub signal_strength: f64,
    pub noise_sd: f64,
    pub seed: u64,
    /// Zero-based prior receiving the FC signal.
    pub fc_signal_prior: usize,
    /// Zero-based prior receiving the SC signal.
    pub sc_signal_prior: usize,
    /// Scale of the subject-specific low-rank background.
    pub background_sd: f64,
    pub task: String,
}

impl GeneratorConfig {
    pub fn new(
        n_subjects: usize,
        n_rois: usize,
        n_priors: usize,
        signal_strength: f64,
        noise_sd: f64,
        seed: u64,
    ) -> Self {
        Self {
            n_subjects,
            n_rois,
            n_priors,
            signal_strength,
            noise_sd,
            seed,
            fc_signal_prior: 0,
            sc_signal_prior: if n_priors > 1 { 1 } else { 0 },
            background_sd: DEFAULT_BACKGROUND_SD,
            task: "synthetic".to_string(),
        }
    }

    /// ROIs per prior block.
    pub fn block_size(&self) -> usize {
        self.n_rois / (self.n_priors + 1)
    }

    fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Parameter(m));
        if self.n_rois < 6 {
            return fail(format!("n_rois must be >= 6, got {}", self.n_rois));
        }
        if self.n_priors < 1 {
            return fail("n_priors must be >= 1".into());
        }
        if self.block_size() < 2 {
            return fail(format!(
                "{} priors do not fit as blocks of >= 2 ROIs in N={}",
                self.n_priors, self.n_rois
            ));
        }
        if self.n_subjects == 0 || self.n_subjects % 2 != 0 {
            return fail(format!(
                "n_subjects must be even and positive, got {}",
                self.n_subjects
            ));
        }
        if self.fc_signal_prior >= self.n_priors || self.sc_signal_prior >= self.n_priors {
            return fail("signal prior index out of range".into());
        }
        if !(self.noise_sd >= 0.0)
            || !(self.background_sd >= 0.0)
            || !self.signal_strength.is_finite()
        {
            return fail("signal and noise scales must be finite and noise non-negative".into());
        }
        Ok(())
    }
}

pub const DEFAULT_BACKGROUND_SD: f64 = 0.0;

/// Block masks: prior k covers ROIs `k·b .. (k+1)·b`.
pub fn block_priors(n_rois: usize, n_priors: usize) -> Result<PriorSet> {
    let b = n_rois / (n_priors + 1);
    let masks = (0..n_priors)
        .map(|k| {
            Tensor::from_fn(n_rois, n_rois, |i, j| {
                let inside = |r: usize| r >= k * b && r < (k + 1) * b;
                if i != j && inside(i) && inside(j) {
                    1.0
                } else {
                    0.0
                }
            })
        })
        .collect();
    let names = (1..=n_priors).map(|k| format!("prior{k}")).collect();
    PriorSet::new(n_rois, names, masks)
}

/// Builds a synthetic cohort in memory. Deterministic in `cfg.seed`.
pub fn synthesize_cohort(cfg: &GeneratorConfig) -> Result<Cohort> {
    cfg.validate()?;
    let n = cfg.n_rois;
    let priors = block_priors(n, cfg.n_priors)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    let fc_template = random_symmetric(n, 0.1, &mut rng, &normal);
    let sc_template = random_symmetric(n, 0.1, &mut rng, &normal).map(|v| v + 1.0);

    let mut labels: Vec<u8> = (0..cfg.n_subjects)
        .map(|i| u8::from(i >= cfg.n_subjects / 2))
        .collect();
    labels.shuffle(&mut rng);

    let mut subjects = Vec::with_capacity(cfg.n_subjects);
    for (idx, &label) in labels.iter().enumerate() {
        let y = f64::from(label);
        let draw = |template: &Tensor, signal_mask: &Tensor, rng: &mut ChaCha8Rng| {
            let background = low_rank_background(n, cfg.background_sd, rng, &normal);
            let noise = random_symmetric(n, cfg.noise_sd, rng, &normal);
            Tensor::from_fn(n, n, |i, j| {
                if i == j {
                    0.0
                } else {
                    template.get(i, j)
                        + background.get(i, j)
                        + y * cfg.signal_strength * signal_mask.get(i, j)
                        + noise.get(i, j)
                }
            })
        };
        let fc = draw(&fc_template, &priors.masks[cfg.fc_signal_prior], &mut rng);
        let sc =
            draw(&sc_template, &priors.masks[cfg.sc_signal_prior], &mut rng).map(|v| v.max(0.0));
        subjects.push(Subject {
            id: format!("s{idx:04}"),
            fc,
            sc,
            label,
        });
    }

    let splits = stratified_splits(&labels, &mut rng);
    let manifest = CohortManifest {
        format: MANIFEST_FORMAT.to_string(),
        version: MANIFEST_VERSION,
        n_rois: n,
        task: cfg.task.clone(),
        seed: Some(cfg.seed),
        priors: priors
            .names
            .iter()
            .map(|name| PriorRecord {
                name: name.clone(),
                path: format!("prior_{name}.csv"),
            })
            .collect(),
        subjects: subjects
            .iter()
            .zip(&splits)
            .map(|(s, &split)| SubjectRecord {
                id: s.id.clone(),
                label: s.label,
                fc: format!("fc_{}.csv", s.id),
                sc: format!("sc_{}.csv", s.id),
                split,
            })
            .collect(),
    };
    // round-trip through the on-disk precision so in-memory and loaded
    // cohorts agree exactly
    let subjects = subjects
        .into_iter()
        .map(|s| Subject {
            fc: quantize(&s.fc),
            sc: quantize(&s.sc),
            ..s
        })
        .collect();
    Ok(Cohort {
        manifest,
        subjects,
        priors,
    })
}

fn quantize(m: &Tensor) -> Tensor {
    m.map(|v| format_value(v).parse().expect("formatted float parses"))
}

/// Generates a synthetic cohort and writes it to `dir`.
pub fn generate_synthetic_cohort(cfg: &GeneratorConfig, dir: &Path) -> Result<PathBuf> {
    let cohort = synthesize_cohort(cfg)?;
    save_cohort(dir, &cohort)?;
    Ok(dir.to_path_buf())
}

fn random_symmetric(n: usize, sd: f64, rng: &mut ChaCha8Rng, normal: &Normal<f64>) -> Tensor {
    let mut m = Tensor::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = sd * normal.sample(rng);
            m.set(i, j, v);
            m.set(j, i, v);
        }
    }
    m
}

const BACKGROUND_RANK: usize = 2;

fn low_rank_background(n: usize, sd: f64, rng: &mut ChaCha8Rng, normal: &Normal<f64>) -> Tensor {
    let mut m = Tensor::zeros(n, n);
    if sd == 0.0 {
        return m;
    }
    for _ in 0..BACKGROUND_RANK {
        let u: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
        for i in 0..n {
            for j in 0..n {
                let v = m.get(i, j) + sd * u[i] * u[j] / BACKGROUND_RANK as f64;
                m.set(i, j, v);
            }
        }
    }
    m
}

/// 60/20/20 split within each class.
fn stratified_splits(labels: &[u8], rng: &mut ChaCha8Rng) -> Vec<Split> {
    let mut splits = vec![Split::Train; labels.len()];
    for class in [0u8, 1] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(rng);
        let n = idx.len();
        let n_train = ((n as f64) * 0.6).round() as usize;
        let n_val = ((n as f64) * 0.2).round() as usize;
        for (rank, &i) in idx.iter().enumerate() {
            splits[i] = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    splits
}
