//! Run configuration and the files exchanged between subcommands.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{mean_aligned_positions, DiagnosticsReport, PosteriorSummary, DEFAULT_THRESHOLD};
use crate::domain::{ColumnSpec, SpatialDomain};
use crate::error::{Error, Result};
use crate::inference::{monitored_parameters, ChainDraws, Frozen, Hyperparams, RunSettings, StepSizes, Variant};

/// Input tables of a fit.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputFiles {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub units: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub edges: Option<PathBuf>,
}

/// Everything needed to reproduce one fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub variant: Variant,
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub n_chains: usize,
    pub seed: u64,
    pub adapt: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flip_proposals: Option<usize>,
    pub threshold: f64,
    /// Also write every retained position draw.
    pub save_positions: bool,
    pub output_dir: PathBuf,
    pub step_sizes: StepSizes,
    pub hyperparams: Hyperparams,
    pub frozen: Frozen,
    pub input: InputFiles,
    pub columns: ColumnSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        let run = RunSettings::default();
        Self {
            variant: Variant::Nnsd,
            iterations: run.iterations,
            burn_in: run.burn_in,
            thin: run.thin,
            n_chains: 2,
            seed: run.seed,
            adapt: run.adapt,
            flip_proposals: None,
            threshold: DEFAULT_THRESHOLD,
            save_positions: false,
            output_dir: PathBuf::from("nnsd_out"),
            step_sizes: run.step_sizes,
            hyperparams: Hyperparams::default(),
            frozen: Frozen::default(),
            input: InputFiles::default(),
            columns: ColumnSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(one_line(&e.to_string())))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn hyperparams(&self) -> Hyperparams {
        Hyperparams {
            variant: self.variant,
            ..self.hyperparams.clone()
        }
    }

    pub fn run_settings(&self) -> RunSettings {
        RunSettings {
            iterations: self.iterations,
            burn_in: self.burn_in,
            thin: self.thin,
            seed: self.seed,
            step_sizes: self.step_sizes,
            adapt: self.adapt,
            flip_proposals: self.flip_proposals,
            frozen: self.frozen,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.run_settings().validate()?;
        self.hyperparams().validate()?;
        if self.n_chains == 0 {
            return Err(Error::invalid("n_chains", "must be at least 1"));
        }
        if !(self.threshold.is_finite() && self.threshold > 1.0) {
            return Err(Error::invalid("threshold", format!("{} must exceed 1", self.threshold)));
        }
        Ok(())
    }
}

/// Command-line values that replace configuration-file values.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct ConfigOverrides {
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub burn_in: Option<usize>,
    #[arg(long)]
    pub thin: Option<usize>,
    #[arg(long = "chains")]
    pub n_chains: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub flip_proposals: Option<usize>,
    /// Units table.
    #[arg(long)]
    pub units: Option<PathBuf>,
    /// Geographic edge list.
    #[arg(long)]
    pub edges: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub save_positions: bool,
    /// Keep the initial step sizes.
    #[arg(long)]
    pub no_adapt: bool,
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Reads `path` (if any), applies `overrides` and validates the result.
/// Relative input paths in the file are taken relative to the file.
pub fn parse_config(path: Option<&Path>, overrides: &ConfigOverrides) -> Result<RunConfig> {
    let mut config = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let mut c = RunConfig::from_toml_str(&text)?;
            let base = p.parent().unwrap_or(Path::new(""));
            for slot in [&mut c.input.units, &mut c.input.edges] {
                if let Some(f) = slot.as_mut() {
                    if f.is_relative() {
                        *f = base.join(&*f);
                    }
                }
            }
            c
        }
        None => RunConfig::default(),
    };
    let o = overrides;
    if let Some(v) = o.variant {
        config.variant = v;
    }
    if let Some(v) = o.iterations {
        config.iterations = v;
    }
    if let Some(v) = o.burn_in {
        config.burn_in = v;
    }
    if let Some(v) = o.thin {
        config.thin = v;
    }
    if let Some(v) = o.n_chains {
        config.n_chains = v;
    }
    if let Some(v) = o.seed {
        config.seed = v;
    }
    if let Some(v) = o.threshold {
        config.threshold = v;
    }
    if let Some(v) = o.flip_proposals {
        config.flip_proposals = Some(v);
    }
    if let Some(v) = &o.units {
        config.input.units = Some(v.clone());
    }
    if let Some(v) = &o.edges {
        config.input.edges = Some(v.clone());
    }
    if let Some(v) = &o.out {
        config.output_dir = v.clone();
    }
    if o.save_positions {
        config.save_positions = true;
    }
    if o.no_adapt {
        config.adapt = false;
    }
    config.validate()?;
    Ok(config)
}

/// Seventeen significant digits.
pub fn fmt_num(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_file(path: &Path, contents: &str) -> Result<PathBuf> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

/// Diagnostics as written to the bundle.
#[derive(Debug, Clone, Serialize)]
#[serde(untagged)]
pub enum DiagnosticsOutcome {
    Report(DiagnosticsReport),
    Failed { error: String },
}

impl DiagnosticsOutcome {
    pub fn passed(&self) -> bool {
        matches!(self, DiagnosticsOutcome::Report(r) if r.passed)
    }

    pub fn report(&self) -> Option<&DiagnosticsReport> {
        match self {
            DiagnosticsOutcome::Report(r) => Some(r),
            DiagnosticsOutcome::Failed { .. } => None,
        }
    }
}

/// `100 (1 - post_sd / design_se)`.
pub fn pct_se_reduction(post_sd: f64, design_se: f64) -> f64 {
    100.0 * (1.0 - post_sd / design_se)
}

/// Writes the output bundle of a fit into `dir` and returns the file paths.
pub fn write_outputs(
    dir: &Path,
    config: &RunConfig,
    domain: &SpatialDomain,
    chains: &[ChainDraws],
    diagnostics: &DiagnosticsOutcome,
    summary: &PosteriorSummary,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ids = &domain.unit_ids;
    let mut files = Vec::new();

    let psrf: HashMap<&str, f64> = diagnostics
        .report()
        .map(|r| r.parameters.iter().map(String::as_str).zip(r.psrf.iter().copied()).collect())
        .unwrap_or_default();
    let mut out = String::from("parameter,mean,median,sd,q025,q975,psrf\n");
    for (name, s) in &summary.parameters {
        let r = psrf.get(name.as_str()).map_or_else(|| "NA".to_string(), |v| fmt_num(*v));
        let _ = writeln!(
            out,
            "{name},{},{},{},{},{},{r}",
            fmt_num(s.mean),
            fmt_num(s.median),
            fmt_num(s.sd),
            fmt_num(s.q025),
            fmt_num(s.q975)
        );
    }
    files.push(write_file(&dir.join("posterior_summary.csv"), &out)?);

    let mut out = String::from("unit_id,post_median,post_sd,design_se,pct_se_reduction\n");
    for (i, s) in summary.units.iter().enumerate() {
        let design_se = domain.var_y[i].sqrt();
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            ids[i],
            fmt_num(s.median),
            fmt_num(s.sd),
            fmt_num(design_se),
            fmt_num(pct_se_reduction(s.sd, design_se))
        );
    }
    files.push(write_file(&dir.join("unit_estimates.csv"), &out)?);

    let mut out = String::from("id_i,id_j,inclusion_freq\n");
    let n = domain.n();
    for i in 0..n {
        for j in (i + 1)..n {
            let _ = writeln!(out, "{},{},{}", ids[i], ids[j], fmt_num(summary.edge_freq[(i, j)]));
        }
    }
    files.push(write_file(&dir.join("edge_probs.csv"), &out)?);

    let positions = mean_aligned_positions(chains)?;
    let mut out = String::from("unit_id,z1,z2\n");
    for (id, z) in ids.iter().zip(&positions) {
        let _ = writeln!(out, "{id},{},{}", fmt_num(z[0]), fmt_num(z[1]));
    }
    files.push(write_file(&dir.join("latent_positions.csv"), &out)?);

    files.push(write_file(&dir.join("traces.csv"), &traces_csv(chains)?)?);

    let json = serde_json::to_string_pretty(diagnostics).map_err(|e| Error::Config(e.to_string()))?;
    files.push(write_file(&dir.join("diagnostics.json"), &(json + "\n"))?);

    files.push(write_file(&dir.join("resolved_config.toml"), &config.to_toml_string()?)?);

    if config.save_positions {
        let mut out = String::from("chain,draw,unit_id,z1,z2\n");
        for c in chains {
            for (t, d) in c.draws.iter().enumerate() {
                for (id, z) in ids.iter().zip(&d.positions) {
                    let _ = writeln!(out, "{},{t},{id},{},{}", c.chain_index, fmt_num(z[0]), fmt_num(z[1]));
                }
            }
        }
        files.push(write_file(&dir.join("position_draws.csv"), &out)?);
    }
    Ok(files)
}

/// Trace columns that are not convergence-monitored.
const TRACE_EXTRAS: [&str; 2] = ["log_posterior", "edge_count"];

/// `chain,draw`, the monitored parameters, then the extras.
pub fn traces_csv(chains: &[ChainDraws]) -> Result<String> {
    let first = chains
        .iter()
        .find_map(|c| c.draws.first())
        .ok_or_else(|| Error::InsufficientDraws("no retained draws".into()))?;
    let mut names = monitored_parameters(chains[0].variant, first.beta.len(), first.delta.len());
    names.extend(TRACE_EXTRAS.iter().map(|s| s.to_string()));
    let mut out = format!("chain,draw,{}\n", names.join(","));
    for c in chains {
        for (t, d) in c.draws.iter().enumerate() {
            let _ = write!(out, "{},{t}", c.chain_index);
            for name in &names {
                let v = d
                    .scalar(name)
                    .ok_or_else(|| Error::invalid("parameter", format!("unknown scalar {name:?}")))?;
                let _ = write!(out, ",{}", fmt_num(v));
            }
            out.push('\n');
        }
    }
    Ok(out)
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

fn parse_f64(text: &str, field: &str) -> Result<f64> {
    text.parse()
        .map_err(|_| Error::invalid(field, format!("{text:?} is not a number")))
}

/// Monitored parameter names and one draws-by-parameter matrix per chain,
/// in order of first appearance.
pub fn read_traces(path: &Path) -> Result<(Vec<String>, Vec<DMatrix<f64>>)> {
    let mut reader = csv_reader(path)?;
    let headers = reader.headers()?.clone();
    if headers.get(0) != Some("chain") || headers.get(1) != Some("draw") {
        return Err(Error::MissingColumn("chain,draw".into()));
    }
    let cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .skip(2)
        .filter(|(_, h)| !TRACE_EXTRAS.contains(h))
        .map(|(i, h)| (i, h.to_string()))
        .collect();
    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, Vec<Vec<f64>>> = HashMap::new();
    for record in reader.records() {
        let record = record?;
        let chain = record.get(0).unwrap_or_default().to_string();
        let row = cols
            .iter()
            .map(|(i, name)| parse_f64(record.get(*i).unwrap_or_default(), name))
            .collect::<Result<Vec<_>>>()?;
        if !rows.contains_key(&chain) {
            order.push(chain.clone());
        }
        rows.entry(chain).or_default().push(row);
    }
    let mats = order
        .iter()
        .map(|c| {
            let r = &rows[c];
            DMatrix::from_fn(r.len(), cols.len(), |t, j| r[t][j])
        })
        .collect();
    Ok((cols.into_iter().map(|(_, n)| n).collect(), mats))
}

/// `(unit id, value)` pairs from a table keyed by its first column. Without
/// `column` the second column is used.
pub fn read_keyed_column(path: &Path, column: Option<&str>) -> Result<Vec<(String, f64)>> {
    let mut reader = csv_reader(path)?;
    let headers = reader.headers()?.clone();
    let idx = match column {
        Some(name) => headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))?,
        None if headers.len() >= 2 => 1,
        None => return Err(Error::MissingColumn("value column".into())),
    };
    let name = headers.get(idx).unwrap_or_default().to_string();
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record?;
        let id = record.get(0).unwrap_or_default().to_string();
        out.push((id, parse_f64(record.get(idx).unwrap_or_default(), &name)?));
    }
    Ok(out)
}

/// Scores `estimates` against `truth`, matching rows by unit id.
pub fn score_files(
    truth: &Path,
    estimates: &Path,
    truth_column: Option<&str>,
    estimate_column: Option<&str>,
) -> Result<(f64, f64)> {
    let t = read_keyed_column(truth, truth_column)?;
    let e: HashMap<String, f64> = read_keyed_column(estimates, estimate_column)?.into_iter().collect();
    if e.len() != t.len() {
        return Err(Error::LengthMismatch {
            left: t.len(),
            right: e.len(),
        });
    }
    let mut tv = Vec::with_capacity(t.len());
    let mut ev = Vec::with_capacity(t.len());
    for (id, v) in t {
        ev.push(*e.get(&id).ok_or_else(|| Error::UnknownUnit(id.clone()))?);
        tv.push(v);
    }
    crate::simulation::score(&tv, &ev)
}

/// A units table readable with [`ColumnSpec`] `columns`.
pub fn write_units_table(
    path: &Path,
    columns: &ColumnSpec,
    ids: &[String],
    centroids: &[[f64; 2]],
    response: &[f64],
    response_se: &[f64],
    extra: &[(String, Vec<f64>)],
) -> Result<PathBuf> {
    let mut out = format!(
        "{},{},{},{},{}",
        columns.id, columns.centroid_x, columns.centroid_y, columns.response, columns.response_se
    );
    for (name, _) in extra {
        let _ = write!(out, ",{name}");
    }
    out.push('\n');
    for i in 0..ids.len() {
        let _ = write!(
            out,
            "{},{},{},{},{}",
            ids[i],
            fmt_num(centroids[i][0]),
            fmt_num(centroids[i][1]),
            fmt_num(response[i]),
            fmt_num(response_se[i])
        );
        for (_, v) in extra {
            let _ = write!(out, ",{}", fmt_num(v[i]));
        }
        out.push('\n');
    }
    write_file(path, &out)
}

/// `id_i,id_j` rows for the upper triangle of `adjacency`.
pub fn write_edge_list(path: &Path, ids: &[String], adjacency: &DMatrix<u8>) -> Result<PathBuf> {
    let mut out = String::from("id_i,id_j\n");
    let n = ids.len();
    for i in 0..n {
        for j in (i + 1)..n {
            if adjacency[(i, j)] != 0 {
                let _ = writeln!(out, "{},{}", ids[i], ids[j]);
            }
        }
    }
    write_file(path, &out)
}

/// `unit_id` followed by named value columns.
pub fn write_keyed_table(path: &Path, ids: &[String], columns: &[(&str, &[f64])]) -> Result<PathBuf> {
    let mut out = String::from("unit_id");
    for (name, _) in columns {
        let _ = write!(out, ",{name}");
    }
    out.push('\n');
    for (i, id) in ids.iter().enumerate() {
        out.push_str(id);
        for (_, v) in columns {
            let _ = write!(out, ",{}", fmt_num(v[i]));
        }
        out.push('\n');
    }
    write_file(path, &out)
}

/// Config file pointing at a units table and edge list in the same directory.
pub fn write_input_config(path: &Path, columns: &ColumnSpec, has_edges: bool) -> Result<PathBuf> {
    let config = RunConfig {
        input: InputFiles {
            units: Some(PathBuf::from("units.csv")),
            edges: has_edges.then(|| PathBuf::from("edges.csv")),
        },
        columns: columns.clone(),
        ..RunConfig::default()
    };
    write_file(path, &config.to_toml_string()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use tempfile::tempdir;

    #[test]
    fn empty_config_materializes_defaults() {
        let c = parse_config(None, &ConfigOverrides::default()).unwrap();
        let hp = c.hyperparams();
        assert_eq!(
            (hp.sigma2_alpha, hp.sigma2_beta, hp.sigma2_delta, hp.sigma2_z),
            (3.0, 100.0, 100.0, 1.0)
        );
        assert_eq!((hp.a_mu, hp.b_mu, hp.a_eps, hp.b_eps), (2.0, 1.0, 2.0, 1.0));
        assert_eq!((c.iterations, c.burn_in), (20_000, 10_000));
        assert_eq!(c.seed, 1);
        let echoed = RunConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap();
        assert_eq!(echoed, c);
    }

    #[test]
    fn burn_in_not_below_iterations_names_both() {
        let o = ConfigOverrides {
            iterations: Some(100),
            burn_in: Some(100),
            ..ConfigOverrides::default()
        };
        let msg = parse_config(None, &o).unwrap_err().to_string();
        assert!(msg.contains("100") && msg.contains("burn_in") && msg.contains("iterations"), "{msg}");
    }

    #[test]
    fn flag_overrides_file() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "iterations = 500\nburn_in = 100\nseed = 9\n[input]\nunits = \"u.csv\"\n").unwrap();
        let o = ConfigOverrides {
            seed: Some(4),
            ..ConfigOverrides::default()
        };
        let c = parse_config(Some(&path), &o).unwrap();
        assert_eq!((c.iterations, c.burn_in, c.seed), (500, 100, 4));
        assert_eq!(c.input.units.as_deref(), Some(dir.path().join("u.csv").as_path()));
        assert!(c.to_toml_string().unwrap().contains("seed = 4"));
    }

    #[test]
    fn unknown_key_is_listed() {
        let err = RunConfig::from_toml_str("iteratons = 5\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("iteratons"), "{err}");
        let err = RunConfig::from_toml_str("[hyperparams]\nsigma2_a = 1.0\n").unwrap_err();
        assert!(err.to_string().contains("sigma2_a"), "{err}");
    }

    #[test]
    fn se_reduction_zero_when_equal() {
        assert_eq!(pct_se_reduction(0.3, 0.3), 0.0);
        assert_abs_diff_eq!(pct_se_reduction(0.05, 1.0), 95.0, epsilon = 1e-12);
    }

    #[test]
    fn number_format_round_trips() {
        for x in [0.1, -1.0 / 3.0, 6.02e23, 1e-300, 0.0] {
            assert_eq!(fmt_num(x).parse::<f64>().unwrap(), x);
        }
        assert_eq!(fmt_num(0.1), "1.0000000000000001e-1");
    }

    #[test]
    fn score_files_join_by_id() {
        let dir = tempdir().unwrap();
        let t = dir.path().join("t.csv");
        let e = dir.path().join("e.csv");
        fs::write(&t, "unit_id,y\na,1\nb,2\nc,3\n").unwrap();
        fs::write(&e, "unit_id,post_median\nc,3\na,2\nb,2\n").unwrap();
        let (mse, mae) = score_files(&t, &e, None, None).unwrap();
        assert_abs_diff_eq!(mse, 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(mae, 1.0 / 3.0, epsilon = 1e-15);
        assert_eq!(score_files(&t, &t, None, None).unwrap(), (0.0, 0.0));
        fs::write(&e, "unit_id,post_median\na,1\nb,2\nz,3\n").unwrap();
        assert!(matches!(score_files(&t, &e, None, None), Err(Error::UnknownUnit(_))));
    }

    #[test]
    fn traces_read_back_by_chain() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("traces.csv");
        fs::write(
            &p,
            "chain,draw,alpha,sigma2_mu,log_posterior,edge_count\n0,0,1,2,-5,3\n0,1,1.5,2.5,-5,3\n1,0,0,1,-4,2\n",
        )
        .unwrap();
        let (names, mats) = read_traces(&p).unwrap();
        assert_eq!(names, vec!["alpha", "sigma2_mu"]);
        assert_eq!(mats.len(), 2);
        assert_eq!(mats[0].shape(), (2, 2));
        assert_eq!(mats[0][(1, 1)], 2.5);
        assert_eq!(mats[1][(0, 0)], 0.0);
    }
}
