//! Dataset ingestion and synthetic two-domain task generation.
//!
//! On-disk layout is `root/<domain>/<class>/<sample file>`. For the mock
//! backend a sample file is a `.vec` text file of whitespace-separated floats
//! (a precomputed image embedding). An optional `class_anchors.txt` at the
//! root gives one `name<TAB>floats` line per class, used to align the mock
//! text encoder's class-name tokens.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::{MockImageEncoder, SampleId};
use crate::error::{CdbnError, Result};
use crate::math::{argmax, cosine_matrix, l2_norm};

pub const EMBEDDING_EXT: &str = "vec";
pub const ANCHORS_FILE: &str = "class_anchors.txt";
pub const TASK_FILE: &str = "task.toml";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub domain: String,
    pub class: usize,
    pub id: SampleId,
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainDataset {
    pub root: PathBuf,
    pub domains: Vec<String>,
    pub classes: Vec<String>,
    pub manifest: Vec<ManifestRow>,
}

impl DomainDataset {
    pub fn domain_rows<'a>(&'a self, domain: &'a str) -> impl Iterator<Item = &'a ManifestRow> + 'a {
        self.manifest.iter().filter(move |r| r.domain == domain)
    }

    pub fn labeled_pool(&self, domain: &str) -> Result<Vec<(SampleId, usize)>> {
        if !self.domains.iter().any(|d| d == domain) {
            return Err(CdbnError::EmptyDomain(domain.to_owned()));
        }
        Ok(self.domain_rows(domain).map(|r| (r.id.clone(), r.class)).collect())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IngestOptions {
    /// Only files with one of these extensions count as samples; empty = all.
    pub extensions: Vec<String>,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.retain(|p| {
        p.file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| !n.starts_with('.'))
    });
    entries.sort();
    Ok(entries)
}

fn file_name(p: &Path) -> String {
    p.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_owned()
}

/// Walks `root/<domain>/<class>/<file>` and checks that every domain exposes
/// the same class set.
pub fn ingest_dataset(root: &Path, options: &IngestOptions) -> Result<DomainDataset> {
    let mut domains = Vec::new();
    let mut classes: Option<Vec<String>> = None;
    let mut manifest = Vec::new();
    for domain_dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let domain = file_name(&domain_dir);
        let class_dirs: Vec<PathBuf> = sorted_entries(&domain_dir)?.into_iter().filter(|p| p.is_dir()).collect();
        let names: Vec<String> = class_dirs.iter().map(|p| file_name(p)).collect();
        match &classes {
            None => classes = Some(names.clone()),
            Some(expected) if *expected != names => {
                return Err(CdbnError::ClassMismatchAcrossDomains {
                    domain,
                    expected: expected.clone(),
                    found: names,
                });
            }
            Some(_) => {}
        }
        let before = manifest.len();
        for (class, class_dir) in class_dirs.iter().enumerate() {
            for file in sorted_entries(class_dir)? {
                if !file.is_file() {
                    continue;
                }
                let ext = file.extension().and_then(|e| e.to_str()).unwrap_or_default();
                if !options.extensions.is_empty() && !options.extensions.iter().any(|x| x == ext) {
                    continue;
                }
                let rel = file.strip_prefix(root).unwrap_or(&file).to_path_buf();
                manifest.push(ManifestRow {
                    domain: domain.clone(),
                    class,
                    id: SampleId(rel.to_string_lossy().replace('\\', "/")),
                    path: file,
                });
            }
        }
        if manifest.len() == before {
            return Err(CdbnError::EmptyDomain(domain));
        }
        domains.push(domain);
    }
    if domains.is_empty() {
        return Err(CdbnError::EmptyDomain(root.display().to_string()));
    }
    Ok(DomainDataset {
        root: root.to_path_buf(),
        domains,
        classes: classes.unwrap_or_default(),
        manifest,
    })
}

pub fn parse_embedding(text: &str) -> std::result::Result<Array1<f64>, String> {
    text.split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|e| format!("`{t}`: {e}")))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map(Array1::from)
}

pub fn format_embedding(v: &Array1<f64>) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:?}")).collect();
    parts.join(" ")
}

/// Loads the `.vec` embeddings of the given rows into a mock image encoder.
pub fn load_embeddings<'a, I>(rows: I, encoder: &mut MockImageEncoder) -> Result<()>
where
    I: IntoIterator<Item = &'a ManifestRow>,
{
    for row in rows {
        let ext = row.path.extension().and_then(|e| e.to_str()).unwrap_or_default();
        if ext != EMBEDDING_EXT {
            return Err(CdbnError::DecodeError {
                id: row.id.to_string(),
                reason: format!("mock backend reads .{EMBEDDING_EXT} embedding files"),
            });
        }
        let text = fs::read_to_string(&row.path)?;
        let v = parse_embedding(&text).map_err(|reason| CdbnError::DecodeError {
            id: row.id.to_string(),
            reason,
        })?;
        encoder.insert(row.id.clone(), v)?;
    }
    Ok(())
}

/// Reads `class_anchors.txt` if present, in the dataset's class order.
pub fn load_class_anchors(root: &Path, classes: &[String]) -> Result<Option<Array2<f64>>> {
    let path = root.join(ANCHORS_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path)?;
    let mut rows: Vec<(String, Array1<f64>)> = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (name, rest) = line
            .split_once('\t')
            .ok_or_else(|| CdbnError::malformed(&path, "expected `name<TAB>values`"))?;
        let v = parse_embedding(rest).map_err(|e| CdbnError::malformed(&path, e))?;
        rows.push((name.to_owned(), v));
    }
    let dim = rows.first().map(|(_, v)| v.len()).unwrap_or(0);
    let mut out = Array2::zeros((classes.len(), dim));
    for (c, name) in classes.iter().enumerate() {
        let (_, v) = rows
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| CdbnError::malformed(&path, format!("missing class `{name}`")))?;
        if v.len() != dim {
            return Err(CdbnError::malformed(&path, "ragged anchor rows"));
        }
        out.row_mut(c).assign(v);
    }
    Ok(Some(out))
}

/// Parameters of a generated two-domain classification task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTaskSpec {
    pub classes: usize,
    pub dim: usize,
    pub source_per_class: usize,
    pub target_per_class: usize,
    /// Rotation applied to every class mean, in degrees.
    pub rotation_deg: f64,
    /// Norm of the shared translation added to target class means.
    pub translation: f64,
    /// Expected norm of the per-sample isotropic noise.
    pub noise: f64,
    /// Fraction of source labels reassigned to a random other class.
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            classes: 5,
            dim: 16,
            source_per_class: 40,
            target_per_class: 60,
            rotation_deg: 60.0,
            translation: 0.6,
            noise: 0.5,
            label_noise: 0.0,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub id: SampleId,
    pub embedding: Array1<f64>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    pub spec: SyntheticTaskSpec,
    pub class_names: Vec<String>,
    /// Unit-norm source class means, `[C, D]`.
    pub anchors: Array2<f64>,
    /// Target class means after rotation and translation, `[C, D]`.
    pub target_means: Array2<f64>,
    pub source: Vec<LabeledSample>,
    /// Labels are held out from training; they are only read by evaluation.
    pub target: Vec<LabeledSample>,
}

impl SyntheticTask {
    pub fn source_pool(&self) -> Vec<(SampleId, usize)> {
        self.source.iter().map(|s| (s.id.clone(), s.label)).collect()
    }

    pub fn target_ids(&self) -> Vec<SampleId> {
        self.target.iter().map(|s| s.id.clone()).collect()
    }

    pub fn target_labels(&self) -> Vec<usize> {
        self.target.iter().map(|s| s.label).collect()
    }

    pub fn stack(samples: &[LabeledSample]) -> Array2<f64> {
        let d = samples.first().map_or(0, |s| s.embedding.len());
        let mut m = Array2::zeros((samples.len(), d));
        for (mut row, s) in m.axis_iter_mut(Axis(0)).zip(samples) {
            row.assign(&s.embedding);
        }
        m
    }

    pub fn image_encoder(&self) -> Result<MockImageEncoder> {
        let mut enc = MockImageEncoder::new(self.spec.dim);
        for s in self.source.iter().chain(&self.target) {
            enc.insert(s.id.clone(), s.embedding.clone())?;
        }
        Ok(enc)
    }
}

fn random_orthonormal(d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = Normal::new(0.0, 1.0).expect("valid normal");
    let mut q = Array2::from_shape_fn((d, d), |_| n.sample(rng));
    for j in 0..d {
        for i in 0..j {
            let prev = q.column(i).to_owned();
            let p = prev.dot(&q.column(j));
            q.column_mut(j).scaled_add(-p, &prev);
        }
        let norm = l2_norm(q.column(j));
        q.column_mut(j).mapv_inplace(|x| x / norm);
    }
    q
}

/// Rotation by `angle` in each consecutive plane of a random orthonormal basis,
/// so every vector is turned by exactly `angle` when `d` is even.
fn plane_rotation(d: usize, angle: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let q = random_orthonormal(d, rng);
    let mut block = Array2::<f64>::eye(d);
    let (s, c) = angle.sin_cos();
    for p in 0..d / 2 {
        let (i, j) = (2 * p, 2 * p + 1);
        block[[i, i]] = c;
        block[[i, j]] = -s;
        block[[j, i]] = s;
        block[[j, j]] = c;
    }
    q.dot(&block).dot(&q.t())
}

pub fn generate_synthetic_task(spec: &SyntheticTaskSpec) -> Result<SyntheticTask> {
    if spec.classes < 2 || spec.dim < 2 {
        return Err(CdbnError::DegenerateSpec(format!(
            "need at least 2 classes and 2 dimensions, got C={} D={}",
            spec.classes, spec.dim
        )));
    }
    if spec.source_per_class == 0 || spec.target_per_class == 0 {
        return Err(CdbnError::DegenerateSpec("empty domain".into()));
    }
    if !(0.0..1.0).contains(&spec.label_noise) || spec.noise < 0.0 || spec.translation < 0.0 {
        return Err(CdbnError::DegenerateSpec(format!("invalid noise settings in {spec:?}")));
    }
    let (c, d) = (spec.classes, spec.dim);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = Normal::new(0.0, 1.0).expect("valid normal");

    let mut anchors = Array2::from_shape_fn((c, d), |_| n.sample(&mut rng));
    for mut row in anchors.axis_iter_mut(Axis(0)) {
        let norm = l2_norm(row.view());
        row.mapv_inplace(|x| x / norm);
    }
    let rotation = plane_rotation(d, spec.rotation_deg * PI / 180.0, &mut rng);
    let mut shift = Array1::from_shape_fn(d, |_| n.sample(&mut rng));
    let shift_norm = l2_norm(shift.view());
    shift.mapv_inplace(|x| x * spec.translation / shift_norm);
    let mut target_means = anchors.dot(&rotation.t());
    for mut row in target_means.axis_iter_mut(Axis(0)) {
        row += &shift;
    }

    let per_coord = spec.noise / (d as f64).sqrt();
    let class_names: Vec<String> = (0..c).map(|i| format!("class_{i:02}")).collect();
    let draw = |domain: &str, means: &Array2<f64>, per_class: usize, rng: &mut ChaCha8Rng| {
        let mut out = Vec::with_capacity(c * per_class);
        for class in 0..c {
            for i in 0..per_class {
                let noise = Array1::from_shape_fn(d, |_| n.sample(rng) * per_coord);
                out.push(LabeledSample {
                    id: SampleId(format!("{domain}/{}/{i:04}.{EMBEDDING_EXT}", class_names[class])),
                    embedding: &means.row(class) + &noise,
                    label: class,
                });
            }
        }
        out
    };
    let mut source = draw("source", &anchors, spec.source_per_class, &mut rng);
    let target = draw("target", &target_means, spec.target_per_class, &mut rng);

    for s in source.iter_mut() {
        if rng.random::<f64>() < spec.label_noise {
            let other = rng.random_range(0..c - 1);
            s.label = if other >= s.label { other + 1 } else { other };
        }
    }

    Ok(SyntheticTask {
        spec: spec.clone(),
        class_names,
        anchors,
        target_means,
        source,
        target,
    })
}

/// Accuracy of cosine nearest-anchor classification on `(source, target)`.
/// This is the source-only oracle: it only knows the source class means.
pub fn nearest_anchor_accuracy(task: &SyntheticTask) -> Result<(f64, f64)> {
    let acc = |samples: &[LabeledSample]| -> Result<f64> {
        let x = SyntheticTask::stack(samples);
        let sims = cosine_matrix(x.view(), task.anchors.view())?;
        let hits = sims
            .axis_iter(Axis(0))
            .zip(samples)
            .filter(|(row, s)| argmax(*row) == s.label)
            .count();
        Ok(hits as f64 / samples.len() as f64)
    };
    Ok((acc(&task.source)?, acc(&task.target)?))
}

/// Writes a task in the directory layout read by [`ingest_dataset`].
pub fn write_synthetic_task(task: &SyntheticTask, root: &Path) -> Result<()> {
    fs::create_dir_all(root)?;
    let mut classes_seen = BTreeSet::new();
    for s in task.source.iter().chain(&task.target) {
        let path = root.join(s.id.as_str());
        if let Some(parent) = path.parent() {
            if classes_seen.insert(parent.to_path_buf()) {
                fs::create_dir_all(parent)?;
            }
        }
        fs::write(path, format_embedding(&s.embedding) + "\n")?;
    }
    let mut anchors = String::new();
    for (name, row) in task.class_names.iter().zip(task.anchors.axis_iter(Axis(0))) {
        anchors.push_str(name);
        anchors.push('\t');
        anchors.push_str(&format_embedding(&row.to_owned()));
        anchors.push('\n');
    }
    fs::write(root.join(ANCHORS_FILE), anchors)?;
    let spec = toml::to_string_pretty(&task.spec).expect("spec serializes");
    fs::write(root.join(TASK_FILE), spec)?;
    Ok(())
}
