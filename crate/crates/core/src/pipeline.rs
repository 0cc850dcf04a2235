//! The repeated-resample experiment: subsample, preprocess, select with each
//! method over a grid of p, cluster over a grid of k, and score.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autoencoder::{encode, train, AeArchitecture, AeHyperparams, LatentRepresentation};
use crate::baselines::{sparse_kmeans, spec_scores, FeatureRanking};
use crate::clustering::{adjusted_rand_index, kmeans, rand_index, write_assignment, ClusterAssignment};
use crate::dataio::{
    load_labels, load_matrix, preprocess, subsample, write_file, ExpressionMatrix, LabelVector,
    Orientation, PreprocessConfig,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    aggregate, pca_2d, projection_svg, red_score, write_projection, ClusterRecord,
    EvaluationReport, Method, Projection2d, RepetitionRecord, SolutionDump,
};
use crate::kernel::{feature_kernels, target_kernel, BandwidthMode};
use crate::mkl::{greedy_path, MklConfig, MklSolution};
use crate::seed::{self, stream};

/// Sparse k-means settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SkmConfig {
    /// Number of clusters used while learning weights.
    pub k: usize,
    /// L1 bound; √p when absent.
    pub s: Option<f64>,
    pub restarts: usize,
}

impl SkmConfig {
    /// The configured bound, else √p kept inside (1, √d].
    pub fn bound_for(&self, p: usize, d: usize) -> f64 {
        self.s
            .unwrap_or_else(|| (p as f64).sqrt().max(2f64.sqrt()).min((d as f64).sqrt()))
    }
}

impl Default for SkmConfig {
    fn default() -> Self {
        Self {
            k: 2,
            s: None,
            restarts: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub orientation: Orientation,
    /// Report identifier; the input file stem when absent.
    pub dataset: Option<String>,
    pub preprocess: PreprocessConfig,
    pub ae: AeHyperparams,
    /// Encoder widths after the input layer; the decoder mirrors them.
    pub hidden_layers: Vec<usize>,
    pub bandwidth: BandwidthMode,
    /// `p` is taken from `p_grid`; the other fields apply.
    pub mkl: MklConfig,
    pub skm: SkmConfig,
    /// SPEC similarity bandwidth; median heuristic when absent.
    pub spec_sigma: Option<f64>,
    pub methods: Vec<Method>,
    pub p_grid: Vec<usize>,
    pub k_grid: Vec<usize>,
    pub kmeans_restarts: usize,
    pub output: PathBuf,
    /// Master seed. Every other seed in the run is derived from it.
    pub seed: u64,
    /// Write 2-D projection tables for repetition 0.
    pub projections: bool,
    pub svg: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            input: None,
            labels: None,
            orientation: Orientation::Rows,
            dataset: None,
            preprocess: PreprocessConfig::default(),
            ae: AeHyperparams::default(),
            hidden_layers: vec![200, 100, 50],
            bandwidth: BandwidthMode::PerFeature,
            mkl: MklConfig::default(),
            skm: SkmConfig::default(),
            spec_sigma: None,
            methods: Method::ALL.to_vec(),
            p_grid: vec![10, 20, 30, 40, 50],
            k_grid: vec![2, 3, 4, 5],
            kmeans_restarts: 10,
            output: PathBuf::from("lkfs-out"),
            seed: 0,
            projections: true,
            svg: false,
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn architecture(&self, input_dim: usize) -> AeArchitecture {
        let mut widths = vec![input_dim];
        widths.extend(&self.hidden_layers);
        AeArchitecture::mirrored(&widths)
    }

    pub fn dataset_id(&self) -> String {
        self.dataset
            .clone()
            .or_else(|| {
                self.input
                    .as_ref()
                    .and_then(|p| p.file_stem())
                    .map(|s| s.to_string_lossy().into_owned())
            })
            .unwrap_or_else(|| "dataset".to_string())
    }

    pub fn validate(&self) -> Result<()> {
        self.preprocess.validate()?;
        self.ae.validate()?;
        self.mkl.validate()?;
        if self.hidden_layers.is_empty() || self.hidden_layers.contains(&0) {
            return Err(Error::invalid_arg("hidden_layers must be non-empty positive widths"));
        }
        if self.methods.is_empty() {
            return Err(Error::invalid_arg("at least one method is required"));
        }
        let mut m = self.methods.clone();
        m.sort_unstable();
        m.dedup();
        if m.len() != self.methods.len() {
            return Err(Error::invalid_arg("methods must not repeat"));
        }
        check_grid("p_grid", &self.p_grid, 1)?;
        check_grid("k_grid", &self.k_grid, 2)?;
        if self.kmeans_restarts == 0 || self.skm.restarts == 0 {
            return Err(Error::invalid_arg("k-means restarts must be >= 1"));
        }
        if self.skm.k < 2 {
            return Err(Error::invalid_arg("skm.k must be >= 2"));
        }
        if let Some(s) = self.spec_sigma {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::invalid_arg("spec_sigma must be positive"));
            }
        }
        Ok(())
    }
}

fn check_grid(name: &str, grid: &[usize], min: usize) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::invalid_arg(format!("{name} must not be empty")));
    }
    if let Some(v) = grid.iter().find(|&&v| v < min) {
        return Err(Error::invalid_arg(format!("{name} value {v} is below {min}")));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != grid.len() {
        return Err(Error::invalid_arg(format!("{name} contains duplicates")));
    }
    Ok(())
}

/// LKFS on a preprocessed matrix for each size in `sizes`, sharing one
/// autoencoder and one greedy run.
pub fn run_lkfs_path(
    x: &ExpressionMatrix,
    config: &RunConfig,
    seed: u64,
    sizes: &[usize],
) -> Result<(Vec<MklSolution>, LatentRepresentation)> {
    let hp = AeHyperparams {
        seed: seed::derive(seed, stream::AUTOENCODER),
        ..config.ae.clone()
    };
    let model = train(x, &config.architecture(x.n_features()), &hp)?;
    let latent = encode(&model, x)?;
    let kz = target_kernel(latent.z_values.view())?;
    let candidates = feature_kernels(x, config.bandwidth)?;
    let mkl = MklConfig {
        p: sizes.iter().copied().max().unwrap_or(config.mkl.p),
        seed: seed::derive(seed, stream::MKL),
        ..config.mkl.clone()
    };
    let solutions = greedy_path(&candidates, &kz, &mkl, sizes)?;
    Ok((solutions, latent))
}

/// Train, encode, build kernels and select at most `config.mkl.p` features.
pub fn run_lkfs_once(
    x: &ExpressionMatrix,
    config: &RunConfig,
    seed: u64,
) -> Result<(MklSolution, LatentRepresentation)> {
    let (mut path, latent) = run_lkfs_path(x, config, seed, &[config.mkl.p])?;
    Ok((path.pop().expect("one size requested"), latent))
}

/// One method's selection at one p within one repetition.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionRun {
    pub method: Method,
    pub repetition: usize,
    pub p: usize,
    pub selected: Vec<usize>,
    pub dump: SolutionDump,
    /// Null when fewer than two features were selected.
    pub red: Option<f64>,
    /// Aligned with the configured k grid.
    pub clusters: Vec<ClusterRecord>,
    pub assignments: Vec<ClusterAssignment>,
    pub projection: Option<Projection2d>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepetitionOutput {
    pub repetition: usize,
    pub seed: u64,
    pub sample_ids: Vec<String>,
    pub n_features: usize,
    pub runs: Vec<SelectionRun>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    /// One per configured method, in configuration order.
    pub reports: Vec<EvaluationReport>,
    pub repetitions: Vec<RepetitionOutput>,
    pub warnings: Vec<String>,
}

/// Emitted once per (repetition, method, p) after clustering finishes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Progress {
    pub repetition: usize,
    pub method: Method,
    pub p: usize,
}

pub fn load_inputs(config: &RunConfig) -> Result<(ExpressionMatrix, Option<LabelVector>)> {
    let input = config
        .input
        .as_ref()
        .ok_or_else(|| Error::invalid_arg("no input matrix given"))?;
    let x = load_matrix(input, config.orientation)?;
    let labels = config.labels.as_ref().map(load_labels).transpose()?;
    Ok((x, labels))
}

/// Loads the configured inputs and runs the experiment.
pub fn run_experiment(
    config: &RunConfig,
    progress: &(dyn Fn(&Progress) + Sync),
) -> Result<ExperimentResult> {
    config.validate()?;
    let (x, labels) = load_inputs(config)?;
    run_experiment_on(&x, labels.as_ref(), config, progress)
}

/// Runs every repetition on an in-memory raw matrix. Repetitions run in
/// parallel; results are merged by repetition index.
pub fn run_experiment_on(
    raw: &ExpressionMatrix,
    labels: Option<&LabelVector>,
    config: &RunConfig,
    progress: &(dyn Fn(&Progress) + Sync),
) -> Result<ExperimentResult> {
    config.validate()?;
    let mut warnings = Vec::new();
    if labels.is_none() {
        warnings.push("no labels given; rand fields will be null".to_string());
    } else if let Some(l) = labels {
        let covered = raw.sample_ids().iter().filter(|id| l.get(id).is_some()).count();
        if covered < raw.n_samples() {
            warnings.push(format!(
                "labels cover {covered} of {} samples; scoring uses the intersection",
                raw.n_samples()
            ));
        }
    }
    let reps = config.preprocess.repetitions;
    let outputs: Vec<RepetitionOutput> = (0..reps)
        .into_par_iter()
        .map(|r| run_repetition(raw, labels, config, r, progress))
        .collect::<Result<_>>()?;

    let dataset = config.dataset_id();
    let mut reports = Vec::new();
    for &method in &config.methods {
        let records: Vec<RepetitionRecord> = outputs
            .iter()
            .flat_map(|o| o.runs.iter().filter(|s| s.method == method).map(move |s| (o, s)))
            .map(|(o, s)| record_for(o, s))
            .collect();
        reports.push(aggregate(method, &dataset, records)?);
    }
    Ok(ExperimentResult {
        reports,
        repetitions: outputs,
        warnings,
    })
}

fn record_for(out: &RepetitionOutput, run: &SelectionRun) -> RepetitionRecord {
    RepetitionRecord {
        repetition: out.repetition,
        seed: out.seed,
        p: run.p,
        selected: run.dump.selected.clone(),
        red: run.red,
        clusters: run.clusters.clone(),
    }
}

pub fn repetition_seed(config: &RunConfig, r: usize) -> u64 {
    seed::derive(config.seed, r as u64)
}

/// The subsampled, scaled and variance-filtered matrix of repetition `r`.
pub fn prepare_repetition(raw: &ExpressionMatrix, config: &RunConfig, r: usize) -> Result<ExpressionMatrix> {
    let seed_r = repetition_seed(config, r);
    let sub = subsample(
        raw,
        config.preprocess.subsample_fraction,
        seed::derive(seed_r, stream::SUBSAMPLE),
    )?;
    preprocess(&sub, &config.preprocess)
}

fn run_repetition(
    raw: &ExpressionMatrix,
    labels: Option<&LabelVector>,
    config: &RunConfig,
    r: usize,
    progress: &(dyn Fn(&Progress) + Sync),
) -> Result<RepetitionOutput> {
    let seed_r = repetition_seed(config, r);
    let ctx = |e: Error| e.context(format!("repetition {r}"));
    let x = prepare_repetition(raw, config, r).map_err(ctx)?;
    let max_p = *config.p_grid.iter().max().expect("validated");
    if max_p > x.n_features() {
        return Err(ctx(Error::invalid_arg(format!(
            "p = {max_p} exceeds the {} features left after preprocessing",
            x.n_features()
        ))));
    }
    if let Some(&k) = config.k_grid.iter().find(|&&k| k > x.n_samples()) {
        return Err(ctx(Error::invalid_arg(format!(
            "k = {k} exceeds the {} subsampled samples",
            x.n_samples()
        ))));
    }
    let truth = labels.map(|l| l.intersect(x.sample_ids()));

    let mut runs = Vec::new();
    for &method in &config.methods {
        let mctx = |e: Error| e.context(format!("repetition {r}, method {method}"));
        let selections = select_features(&x, config, method, seed_r, &config.p_grid).map_err(mctx)?;
        for (p, selected, dump) in selections {
            let pctx = |e: Error| e.context(format!("repetition {r}, method {method}, p = {p}"));
            let red = if selected.len() >= 2 {
                Some(red_score(&x, &selected).map_err(pctx)?)
            } else {
                None
            };
            let sub_x = x.select_features(&selected).map_err(pctx)?;
            let mut assignments = Vec::with_capacity(config.k_grid.len());
            let mut clusters = Vec::with_capacity(config.k_grid.len());
            for &k in &config.k_grid {
                let kctx =
                    |e: Error| e.context(format!("repetition {r}, method {method}, p = {p}, k = {k}"));
                let a = kmeans(
                    sub_x.values().view(),
                    k,
                    config.kmeans_restarts,
                    seed::derive(seed_r, stream::KMEANS),
                )
                .map_err(kctx)?;
                let (ri, ari) = match &truth {
                    Some((positions, codes)) if positions.len() >= 2 => {
                        let pred: Vec<usize> = positions.iter().map(|&i| a.labels[i]).collect();
                        (
                            Some(rand_index(&pred, codes).map_err(kctx)?),
                            Some(adjusted_rand_index(&pred, codes).map_err(kctx)?),
                        )
                    }
                    _ => (None, None),
                };
                clusters.push(ClusterRecord {
                    k,
                    rand_index: ri,
                    adjusted_rand_index: ari,
                    inertia: a.inertia,
                });
                assignments.push(a);
            }
            let projection = if r == 0 && config.projections {
                Some(pca_2d(sub_x.values().view()).map_err(pctx)?)
            } else {
                None
            };
            progress(&Progress {
                repetition: r,
                method,
                p,
            });
            runs.push(SelectionRun {
                method,
                repetition: r,
                p,
                selected,
                dump,
                assignments,
                projection,
                red,
                clusters,
            });
        }
    }
    Ok(RepetitionOutput {
        repetition: r,
        seed: seed_r,
        sample_ids: x.sample_ids().to_vec(),
        n_features: x.n_features(),
        runs,
    })
}

/// (p, selected feature indices, dump)
pub type Selection = (usize, Vec<usize>, SolutionDump);

/// Feature subsets from `method` for every p in `sizes`, in that order.
pub fn select_features(
    x: &ExpressionMatrix,
    config: &RunConfig,
    method: Method,
    seed_r: u64,
    sizes: &[usize],
) -> Result<Vec<Selection>> {
    let names = |idx: &[usize]| -> Vec<String> {
        idx.iter().map(|&j| x.feature_names()[j].clone()).collect()
    };
    match method {
        Method::Lkfs => {
            let (solutions, _) = run_lkfs_path(x, config, seed_r, sizes)?;
            Ok(sizes
                .iter()
                .zip(solutions)
                .map(|(&p, sol)| {
                    let dump = SolutionDump {
                        method,
                        selected: names(&sol.selected),
                        weights: sol.selected_weights(),
                        alignment_trajectory: Some(sol.alignment_trajectory.clone()),
                        target_alignment: Some(sol.target_alignment),
                        stop_reason: Some(
                            serde_json::to_value(sol.stop_reason)?
                                .as_str()
                                .unwrap_or_default()
                                .to_string(),
                        ),
                    };
                    Ok((p, sol.selected, dump))
                })
                .collect::<Result<_>>()?)
        }
        Method::Skm => {
            sizes
                .iter()
                .map(|&p| {
                    let s = config.skm.bound_for(p, x.n_features());
                    let seed = seed::derive(seed::derive(seed_r, stream::SKM), p as u64);
                    let res = sparse_kmeans(x, config.skm.k, s, config.skm.restarts, seed)
                        .map_err(|e| e.context(format!("p = {p}")))?;
                    let selected = res.select_top_p(p)?;
                    let dump = SolutionDump {
                        method,
                        selected: names(&selected),
                        weights: selected.iter().map(|&j| res.weights[j]).collect(),
                        alignment_trajectory: None,
                        target_alignment: None,
                        stop_reason: None,
                    };
                    Ok((p, selected, dump))
                })
                .collect()
        }
        Method::Spec => {
            let res = spec_scores(x, config.spec_sigma)?;
            sizes
                .iter()
                .map(|&p| {
                    let selected = res.select_top_p(p)?;
                    let dump = SolutionDump {
                        method,
                        selected: names(&selected),
                        weights: selected.iter().map(|&j| res.scores[j]).collect(),
                        alignment_trajectory: None,
                        target_alignment: None,
                        stop_reason: None,
                    };
                    Ok((p, selected, dump))
                })
                .collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactIndex {
    pub files: Vec<ArtifactEntry>,
}

pub const INDEX_FILE: &str = "index.json";

struct Emitter<'a> {
    dir: &'a Path,
    entries: Vec<ArtifactEntry>,
}

impl Emitter<'_> {
    fn write(&mut self, name: String, bytes: &[u8]) -> Result<()> {
        write_file(&self.dir.join(&name), bytes)?;
        self.record(name, bytes);
        Ok(())
    }

    fn record(&mut self, name: String, bytes: &[u8]) {
        self.entries.push(ArtifactEntry {
            path: name,
            bytes: bytes.len() as u64,
            sha256: hex::encode(Sha256::digest(bytes)),
        });
    }

    fn written(&mut self, name: String) -> Result<()> {
        let path = self.dir.join(&name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        self.record(name, &bytes);
        Ok(())
    }
}

/// Writes reports, selections, assignments and projections into `dir`,
/// then an index of every file with its SHA-256. Refuses to overwrite a
/// previous run unless `force` is set.
pub fn emit_outputs(
    result: &ExperimentResult,
    labels: Option<&LabelVector>,
    dir: &Path,
    force: bool,
    svg: bool,
) -> Result<ArtifactIndex> {
    let index_path = dir.join(INDEX_FILE);
    if index_path.exists() && !force {
        return Err(Error::invalid_arg(format!(
            "{} already holds a run; pass --force to overwrite",
            dir.display()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut em = Emitter {
        dir,
        entries: Vec::new(),
    };
    for report in &result.reports {
        em.write(format!("report_{}.json", report.method), report.to_json()?.as_bytes())?;
    }
    for rep in &result.repetitions {
        let r = rep.repetition;
        let truth: Option<Vec<Option<String>>> = labels.map(|l| {
            rep.sample_ids
                .iter()
                .map(|id| l.get(id).map(str::to_string))
                .collect()
        });
        for run in &rep.runs {
            let (m, p) = (run.method, run.p);
            let mut text = run.dump.selected.join("\n");
            text.push('\n');
            em.write(format!("selected_{m}_p{p}_rep{r}.txt"), text.as_bytes())?;
            for a in &run.assignments {
                let name = format!("clusters_{m}_p{p}_k{}_rep{r}.tsv", a.k);
                write_assignment(dir.join(&name), &rep.sample_ids, a)?;
                em.written(name)?;
            }
            if let Some(proj) = &run.projection {
                for a in &run.assignments {
                    let stem = format!("proj_{m}_p{p}_k{}_rep{r}", a.k);
                    let name = format!("{stem}.tsv");
                    write_projection(dir.join(&name), &rep.sample_ids, proj, truth.as_deref(), &a.labels)?;
                    em.written(name)?;
                    if svg {
                        let title = format!("{m} p={p} k={} rep={r}", a.k);
                        em.write(format!("{stem}.svg"), projection_svg(proj, &a.labels, &title).as_bytes())?;
                    }
                }
            }
        }
    }
    em.entries.sort_by(|a, b| a.path.cmp(&b.path));
    let index = ArtifactIndex { files: em.entries };
    let mut json = serde_json::to_string_pretty(&index)?;
    json.push('\n');
    write_file(&index_path, json.as_bytes())?;
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::generate_synthetic;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn small_config() -> RunConfig {
        RunConfig {
            preprocess: PreprocessConfig {
                repetitions: 2,
                ..Default::default()
            },
            ae: AeHyperparams {
                epochs: 5,
                batch_size: 16,
                ..Default::default()
            },
            hidden_layers: vec![16, 8],
            p_grid: vec![3, 5],
            k_grid: vec![2, 3],
            kmeans_restarts: 3,
            seed: 11,
            ..Default::default()
        }
    }

    fn fixture() -> (ExpressionMatrix, LabelVector) {
        generate_synthetic(50, 24, 4, 4.0, 3).unwrap()
    }

    #[test]
    fn grid_is_fully_enumerated() {
        let (x, labels) = fixture();
        let config = small_config();
        let calls = AtomicUsize::new(0);
        let res = run_experiment_on(&x, Some(&labels), &config, &|_| {
            calls.fetch_add(1, Ordering::Relaxed);
        })
        .unwrap();
        assert_eq!(calls.load(Ordering::Relaxed), 2 * 3 * 2);
        assert_eq!(res.reports.len(), 3);
        for report in &res.reports {
            assert_eq!(report.records.len(), 2 * 2);
            assert_eq!(report.cluster_record_count(), 2 * 2 * 2);
            assert_eq!(report.aggregates.len(), 4);
            assert!(report.aggregates.iter().all(|c| c.repetitions == 2));
            for rec in &report.records {
                assert!(rec.selected.len() <= rec.p);
                for c in &rec.clusters {
                    let ri = c.rand_index.unwrap();
                    assert!((0.0..=1.0).contains(&ri));
                }
            }
        }
        assert!(res.warnings.is_empty());
    }

    #[test]
    fn unlabeled_run_has_null_rand_and_is_deterministic() {
        let (x, _) = fixture();
        let config = RunConfig {
            methods: vec![Method::Lkfs, Method::Spec],
            ..small_config()
        };
        let a = run_experiment_on(&x, None, &config, &|_| {}).unwrap();
        let b = run_experiment_on(&x, None, &config, &|_| {}).unwrap();
        assert_eq!(a.warnings.len(), 1);
        for (ra, rb) in a.reports.iter().zip(&b.reports) {
            assert_eq!(ra.to_json().unwrap(), rb.to_json().unwrap());
            assert!(ra.records.iter().all(|r| r.clusters.iter().all(|c| c.rand_index.is_none())));
        }
    }

    #[test]
    fn adding_repetitions_keeps_earlier_ones() {
        let (x, labels) = fixture();
        let one = RunConfig {
            methods: vec![Method::Spec],
            ..small_config()
        };
        let three = RunConfig {
            preprocess: PreprocessConfig {
                repetitions: 3,
                ..Default::default()
            },
            ..one.clone()
        };
        let a = run_experiment_on(&x, Some(&labels), &one, &|_| {}).unwrap();
        let b = run_experiment_on(&x, Some(&labels), &three, &|_| {}).unwrap();
        assert_eq!(a.reports[0].records[..], b.reports[0].records[..4]);
    }

    #[test]
    fn config_errors() {
        let (x, labels) = fixture();
        let too_big = RunConfig {
            p_grid: vec![20],
            ..small_config()
        };
        let err = run_experiment_on(&x, Some(&labels), &too_big, &|_| {}).unwrap_err();
        assert!(err.to_string().contains("repetition"), "{err}");
        for bad in [
            RunConfig { k_grid: vec![1], ..small_config() },
            RunConfig { p_grid: vec![], ..small_config() },
            RunConfig { methods: vec![Method::Skm, Method::Skm], ..small_config() },
        ] {
            assert!(bad.validate().is_err());
        }
        let json = small_config().to_json().unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, small_config());
        let partial: RunConfig = serde_json::from_str(r#"{"seed": 3, "methods": ["spec"]}"#).unwrap();
        assert_eq!(partial.p_grid, vec![10, 20, 30, 40, 50]);
        assert!(serde_json::from_str::<RunConfig>(r#"{"sead": 3}"#).is_err());
    }

    #[test]
    fn lkfs_once_contract() {
        let (x, _) = fixture();
        let x = preprocess(&x, &PreprocessConfig::default()).unwrap();
        let config = RunConfig {
            mkl: MklConfig { p: 4, ..Default::default() },
            ..small_config()
        };
        let (sol, latent) = run_lkfs_once(&x, &config, 5).unwrap();
        assert!(sol.selected.len() <= 4);
        assert!(sol.alignment_trajectory.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(latent.z_values.dim(), (50, 8));
        assert_eq!(run_lkfs_once(&x, &config, 5).unwrap().0, sol);
    }

    #[test]
    fn outputs_and_index() {
        let (x, labels) = fixture();
        let config = RunConfig {
            methods: vec![Method::Lkfs],
            ..small_config()
        };
        let res = run_experiment_on(&x, Some(&labels), &config, &|_| {}).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let index = emit_outputs(&res, Some(&labels), &out, false, true).unwrap();
        let names: Vec<&str> = index.files.iter().map(|f| f.path.as_str()).collect();
        for expected in [
            "report_lkfs.json",
            "selected_lkfs_p5_rep0.txt",
            "clusters_lkfs_p3_k2_rep1.tsv",
            "proj_lkfs_p5_k3_rep0.tsv",
            "proj_lkfs_p5_k3_rep0.svg",
        ] {
            assert!(names.contains(&expected), "missing {expected}");
        }
        assert!(!names.iter().any(|n| n.starts_with("proj_") && n.contains("rep1")));
        for f in &index.files {
            let bytes = fs::read(out.join(&f.path)).unwrap();
            assert_eq!(hex::encode(Sha256::digest(&bytes)), f.sha256);
        }
        let err = emit_outputs(&res, Some(&labels), &out, false, false).unwrap_err();
        assert!(err.to_string().contains("--force"));
        emit_outputs(&res, Some(&labels), &out, true, false).unwrap();
    }
}
