//! Areal-unit inputs: identifiers, centroids mapped onto the unit disk,
//! geographic distances, responses with known sampling variances and the
//! two covariate layers (data covariates `X`, position covariates `S_i`).

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column selection for the units table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnSpec {
    pub id: String,
    pub centroid_x: String,
    pub centroid_y: String,
    pub response: String,
    pub response_se: String,
    /// Data covariates; an intercept column is always prepended.
    pub covariates: Vec<String>,
    /// Scalar position covariates `s`; each contributes `s * I_2` to `S_i`.
    pub position_covariates: Vec<String>,
    /// Model `ln(response)`, with the sampling variance from the delta method.
    pub log_response: bool,
    /// Take the natural log of every data covariate.
    pub log_covariates: bool,
}

impl Default for ColumnSpec {
    fn default() -> Self {
        Self {
            id: "id".into(),
            centroid_x: "x".into(),
            centroid_y: "y".into(),
            response: "response".into(),
            response_se: "response_se".into(),
            covariates: Vec::new(),
            position_covariates: Vec::new(),
            log_response: false,
            log_covariates: false,
        }
    }
}

/// The fixed inputs of one analysis. Immutable once built.
#[derive(Debug, Clone)]
pub struct SpatialDomain {
    pub unit_ids: Vec<String>,
    /// Centroids after [`normalize_to_unit_disk`].
    pub centroids: Vec<[f64; 2]>,
    /// Geographic distances between normalized centroids.
    pub d1: DMatrix<f64>,
    pub y: DVector<f64>,
    pub var_y: DVector<f64>,
    /// `N x p` design, first column all ones.
    pub x: DMatrix<f64>,
    /// Per-unit `2 x k` position covariate matrices (`k` may be 0).
    pub s: Vec<DMatrix<f64>>,
    pub geo_adjacency: Option<DMatrix<u8>>,
}

impl SpatialDomain {
    /// Validates inputs, maps centroids onto the unit disk and computes `d1`.
    ///
    /// `x` must already contain the intercept column. `position_covariates`
    /// is `N x m`; each column becomes a `s * I_2` block so `k = 2m`.
    pub fn new(
        unit_ids: Vec<String>,
        raw_centroids: &[[f64; 2]],
        y: DVector<f64>,
        var_y: DVector<f64>,
        x: DMatrix<f64>,
        position_covariates: Option<&DMatrix<f64>>,
        geo_adjacency: Option<DMatrix<u8>>,
    ) -> Result<Self> {
        let n = unit_ids.len();
        if n < 3 {
            return Err(Error::TooFewUnits(n));
        }
        for (name, len) in [
            ("centroids", raw_centroids.len()),
            ("response", y.len()),
            ("sampling variance", var_y.len()),
            ("covariate rows", x.nrows()),
        ] {
            if len != n {
                return Err(Error::invalid(name, format!("expected {n} rows, got {len}")));
            }
        }
        let mut seen = HashMap::with_capacity(n);
        for (i, id) in unit_ids.iter().enumerate() {
            if seen.insert(id.as_str(), i).is_some() {
                return Err(Error::DuplicateUnit(id.clone()));
            }
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("response".into()));
        }
        if let Some(k) = var_y.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::invalid(
                "sampling variance",
                format!("unit {:?} has non-positive SE", unit_ids[k]),
            ));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("covariates".into()));
        }
        if !has_full_column_rank(&x) {
            return Err(Error::invalid("covariates", "design matrix X is rank deficient"));
        }

        let centroids = normalize_to_unit_disk(raw_centroids)?;
        let d1 = pairwise_distances(&centroids)?;

        let s = match position_covariates {
            None => vec![DMatrix::zeros(2, 0); n],
            Some(cov) => {
                if cov.nrows() != n {
                    return Err(Error::invalid(
                        "position covariates",
                        format!("expected {n} rows, got {}", cov.nrows()),
                    ));
                }
                if cov.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("position covariates".into()));
                }
                (0..n).map(|i| position_block(&cov.row(i).transpose())).collect()
            }
        };

        if let Some(adj) = &geo_adjacency {
            crate::gmrf::validate_binary(adj)?;
            if adj.nrows() != n {
                return Err(Error::InvalidAdjacency(format!(
                    "adjacency is {}x{}, expected {n}x{n}",
                    adj.nrows(),
                    adj.ncols()
                )));
            }
        }

        Ok(Self {
            unit_ids,
            centroids,
            d1,
            y,
            var_y,
            x,
            s,
            geo_adjacency,
        })
    }

    pub fn n(&self) -> usize {
        self.unit_ids.len()
    }

    /// Number of data covariates including the intercept.
    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Number of position-covariate weights.
    pub fn k(&self) -> usize {
        self.s.first().map_or(0, |m| m.ncols())
    }

    /// Same geometry and covariates with a different response vector.
    pub fn with_response(&self, y: DVector<f64>) -> Result<Self> {
        if y.len() != self.n() {
            return Err(Error::LengthMismatch {
                left: y.len(),
                right: self.n(),
            });
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("response".into()));
        }
        Ok(Self { y, ..self.clone() })
    }
}

/// `[s_1 I_2, s_2 I_2, ...]` for the scalar covariates of one unit.
fn position_block(values: &DVector<f64>) -> DMatrix<f64> {
    let m = values.len();
    let mut out = DMatrix::zeros(2, 2 * m);
    for (c, v) in values.iter().enumerate() {
        out[(0, 2 * c)] = *v;
        out[(1, 2 * c + 1)] = *v;
    }
    out
}

fn has_full_column_rank(x: &DMatrix<f64>) -> bool {
    if x.ncols() == 0 || x.nrows() < x.ncols() {
        return false;
    }
    let sv = x.clone().svd(false, false).singular_values;
    let max = sv.max();
    max > 0.0 && sv.iter().all(|s| *s > 1e-10 * max)
}

/// Centers points on their mean and divides by the largest centered norm.
///
/// All points coinciding (including a single point) yields all zeros.
pub fn normalize_to_unit_disk(raw: &[[f64; 2]]) -> Result<Vec<[f64; 2]>> {
    Ok(normalize_with_scale(raw)?.0)
}

/// [`normalize_to_unit_disk`] that also returns the divisor that was used
/// (`0` when every point coincides).
pub fn normalize_with_scale(raw: &[[f64; 2]]) -> Result<(Vec<[f64; 2]>, f64)> {
    if raw.is_empty() {
        return Err(Error::invalid("centroids", "no points"));
    }
    if raw.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("centroids".into()));
    }
    let n = raw.len() as f64;
    let cx = raw.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = raw.iter().map(|p| p[1]).sum::<f64>() / n;
    let centered: Vec<[f64; 2]> = raw.iter().map(|p| [p[0] - cx, p[1] - cy]).collect();
    let scale = centered
        .iter()
        .map(|p| p[0].hypot(p[1]))
        .fold(0.0_f64, f64::max);
    if scale == 0.0 {
        return Ok((vec![[0.0, 0.0]; raw.len()], 0.0));
    }
    Ok((
        centered.iter().map(|p| [p[0] / scale, p[1] / scale]).collect(),
        scale,
    ))
}

/// Euclidean distance matrix.
pub fn pairwise_distances(points: &[[f64; 2]]) -> Result<DMatrix<f64>> {
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("points".into()));
    }
    let n = points.len();
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = (points[i][0] - points[j][0]).hypot(points[i][1] - points[j][1]);
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    Ok(d)
}

/// First-order variance of `ln(estimate)`: `(se / estimate)^2`.
pub fn delta_method_log_variance(estimate: f64, se: f64) -> Result<f64> {
    if !(estimate.is_finite() && estimate > 0.0) {
        return Err(Error::invalid("estimate", format!("{estimate} is not positive")));
    }
    if !(se.is_finite() && se > 0.0) {
        return Err(Error::invalid("standard error", format!("{se} is not positive")));
    }
    Ok((se / estimate).powi(2))
}

/// Reads a units table and an optional undirected edge list.
pub fn load_domain(
    units_file: &Path,
    adjacency_file: Option<&Path>,
    spec: &ColumnSpec,
) -> Result<SpatialDomain> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(units_file)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(units_file, io),
            other => Error::Csv(csv::Error::from(std::io::Error::other(format!("{other:?}")))),
        })?;
    let headers = reader.headers()?.clone();
    let column = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let id_col = column(&spec.id)?;
    let cx_col = column(&spec.centroid_x)?;
    let cy_col = column(&spec.centroid_y)?;
    let resp_col = column(&spec.response)?;
    let se_col = column(&spec.response_se)?;
    let cov_cols = spec
        .covariates
        .iter()
        .map(|c| column(c))
        .collect::<Result<Vec<_>>>()?;
    let pos_cols = spec
        .position_covariates
        .iter()
        .map(|c| column(c))
        .collect::<Result<Vec<_>>>()?;

    let mut ids = Vec::new();
    let mut centroids = Vec::new();
    let mut y = Vec::new();
    let mut var_y = Vec::new();
    let mut cov_rows: Vec<Vec<f64>> = Vec::new();
    let mut pos_rows: Vec<Vec<f64>> = Vec::new();

    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let field = |col: usize, name: &str| -> Result<f64> {
            let raw = record.get(col).unwrap_or("");
            raw.parse::<f64>().map_err(|_| {
                Error::invalid(name, format!("row {}: cannot parse {raw:?} as a number", line + 1))
            })
        };
        let id = record.get(id_col).unwrap_or("").to_string();
        centroids.push([field(cx_col, &spec.centroid_x)?, field(cy_col, &spec.centroid_y)?]);
        let response = field(resp_col, &spec.response)?;
        let se = field(se_col, &spec.response_se)?;
        if !(se > 0.0) {
            return Err(Error::invalid(
                &spec.response_se,
                format!("unit {id:?} has non-positive SE {se}"),
            ));
        }
        if spec.log_response {
            var_y.push(delta_method_log_variance(response, se)?);
            y.push(response.ln());
        } else {
            var_y.push(se * se);
            y.push(response);
        }
        let mut row = Vec::with_capacity(cov_cols.len());
        for (col, name) in cov_cols.iter().zip(&spec.covariates) {
            let v = field(*col, name)?;
            if spec.log_covariates {
                if !(v > 0.0) {
                    return Err(Error::invalid(name, format!("cannot take log of {v}")));
                }
                row.push(v.ln());
            } else {
                row.push(v);
            }
        }
        cov_rows.push(row);
        pos_rows.push(
            pos_cols
                .iter()
                .zip(&spec.position_covariates)
                .map(|(col, name)| field(*col, name))
                .collect::<Result<Vec<_>>>()?,
        );
        ids.push(id);
    }

    let n = ids.len();
    if n < 3 {
        return Err(Error::TooFewUnits(n));
    }
    let p = cov_cols.len() + 1;
    let x = DMatrix::from_fn(n, p, |i, j| if j == 0 { 1.0 } else { cov_rows[i][j - 1] });
    let pos = (!pos_cols.is_empty())
        .then(|| DMatrix::from_fn(n, pos_cols.len(), |i, j| pos_rows[i][j]));

    let mut index = HashMap::with_capacity(n);
    for (i, id) in ids.iter().enumerate() {
        if index.insert(id.clone(), i).is_some() {
            return Err(Error::DuplicateUnit(id.clone()));
        }
    }
    let geo = match adjacency_file {
        Some(path) => Some(read_edge_list(path, &index)?),
        None => None,
    };

    SpatialDomain::new(
        ids,
        &centroids,
        DVector::from_vec(y),
        DVector::from_vec(var_y),
        x,
        pos.as_ref(),
        geo,
    )
}

/// Parses `id_i,id_j` lines. Blank lines, `#` comments and an optional
/// `id_i,id_j` header are skipped; duplicate edges are ignored.
pub fn read_edge_list(path: &Path, index: &HashMap<String, usize>) -> Result<DMatrix<u8>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let n = index.len();
    let mut adj = DMatrix::<u8>::zeros(n, n);
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split(',').map(str::trim);
        let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::InvalidAdjacency(format!(
                "line {}: expected `id_i,id_j`",
                lineno + 1
            )));
        };
        if lineno == 0 && a == "id_i" && b == "id_j" {
            continue;
        }
        let i = *index.get(a).ok_or_else(|| Error::UnknownUnit(a.to_string()))?;
        let j = *index.get(b).ok_or_else(|| Error::UnknownUnit(b.to_string()))?;
        if i == j {
            return Err(Error::InvalidAdjacency(format!("self-loop on unit {a:?}")));
        }
        adj[(i, j)] = 1;
        adj[(j, i)] = 1;
    }
    Ok(adj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::io::Write;

    #[test]
    fn normalize_symmetric_pair() {
        let out = normalize_to_unit_disk(&[[0.0, 0.0], [2.0, 0.0]]).unwrap();
        assert_eq!(out, vec![[-1.0, 0.0], [1.0, 0.0]]);
    }

    #[test]
    fn normalize_single_point_is_origin() {
        assert_eq!(normalize_to_unit_disk(&[[5.0, 7.0]]).unwrap(), vec![[0.0, 0.0]]);
    }

    #[test]
    fn normalize_three_collinear() {
        let out = normalize_to_unit_disk(&[[0.0, 0.0], [0.0, 1.0], [0.0, 3.0]]).unwrap();
        let expected = [[0.0, -0.8], [0.0, -0.2], [0.0, 1.0]];
        for (a, b) in out.iter().zip(expected.iter()) {
            assert_abs_diff_eq!(a[0], b[0], epsilon = 1e-15);
            assert_abs_diff_eq!(a[1], b[1], epsilon = 1e-15);
        }
    }

    #[test]
    fn normalize_rejects_nan() {
        assert!(matches!(
            normalize_to_unit_disk(&[[f64::NAN, 0.0]]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn distances_small_cases() {
        let d = pairwise_distances(&[[0.0, 0.0], [1.0, 0.0]]).unwrap();
        assert_eq!(d, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]));
        let d = pairwise_distances(&[[0.0, 0.0], [3.0, 4.0]]).unwrap();
        assert_eq!(d[(0, 1)], 5.0);
    }

    #[test]
    fn distances_match_double_loop() {
        let pts = [[0.3, -1.2], [2.5, 0.7], [-0.4, 0.1], [1.1, 1.9], [-2.0, -0.6]];
        let d = pairwise_distances(&pts).unwrap();
        for (i, a) in pts.iter().enumerate() {
            for (j, b) in pts.iter().enumerate() {
                let reference = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
                assert_abs_diff_eq!(d[(i, j)], reference, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn delta_method_values() {
        assert_abs_diff_eq!(delta_method_log_variance(100.0, 10.0).unwrap(), 0.01, epsilon = 1e-15);
        assert_abs_diff_eq!(
            delta_method_log_variance(50000.0, 1500.0).unwrap(),
            0.0009,
            epsilon = 1e-15
        );
        let e = std::f64::consts::E;
        assert_eq!(delta_method_log_variance(e, e).unwrap(), 1.0);
        assert!(delta_method_log_variance(0.0, 1.0).is_err());
        assert!(delta_method_log_variance(-3.0, 1.0).is_err());
    }

    fn write_file(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let path = dir.path().join(name);
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        path
    }

    #[test]
    fn load_minimal_without_adjacency() {
        let dir = tempfile::tempdir().unwrap();
        let units = write_file(
            &dir,
            "units.csv",
            "id,x,y,response,response_se\na,0,0,1.0,0.1\nb,1,0,2.0,0.1\nc,0,1,1.5,0.2\n",
        );
        let d = load_domain(&units, None, &ColumnSpec::default()).unwrap();
        assert_eq!(d.n(), 3);
        assert_eq!(d.p(), 1);
        assert!(d.geo_adjacency.is_none());
        assert_abs_diff_eq!(d.var_y[2], 0.04, epsilon = 1e-15);
    }

    #[test]
    fn load_with_covariate_log_scale_and_edges() {
        let dir = tempfile::tempdir().unwrap();
        let units = write_file(
            &dir,
            "units.csv",
            "id,x,y,income,income_se,housing\n\
             a,0,0,50000,1500,900\nb,1,0,60000,2000,1000\nc,0,1,40000,1000,800\nd,1,1,45000,900,850\n",
        );
        let edges = write_file(&dir, "edges.csv", "id_i,id_j\na,b\nb,a\nb,c\nc,d\n");
        let spec = ColumnSpec {
            response: "income".into(),
            response_se: "income_se".into(),
            covariates: vec!["housing".into()],
            log_response: true,
            log_covariates: true,
            ..ColumnSpec::default()
        };
        let d = load_domain(&units, Some(&edges), &spec).unwrap();
        assert_eq!(d.p(), 2);
        assert_abs_diff_eq!(d.y[0], 50000f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(d.var_y[0], 0.0009, epsilon = 1e-15);
        assert_abs_diff_eq!(d.x[(1, 1)], 1000f64.ln(), epsilon = 1e-12);
        let adj = d.geo_adjacency.unwrap();
        assert_eq!(adj.iter().map(|v| *v as usize).sum::<usize>(), 6);
        assert_eq!(adj[(0, 1)], 1);
        assert_eq!(adj[(0, 2)], 0);
    }

    #[test]
    fn load_errors() {
        let dir = tempfile::tempdir().unwrap();
        let dup = write_file(
            &dir,
            "dup.csv",
            "id,x,y,response,response_se\na,0,0,1,1\na,1,0,1,1\nc,0,1,1,1\n",
        );
        let err = load_domain(&dup, None, &ColumnSpec::default()).unwrap_err();
        assert!(err.to_string().contains("duplicate unit id"));

        let missing = write_file(&dir, "missing.csv", "id,x,y,response\na,0,0,1\n");
        assert!(matches!(
            load_domain(&missing, None, &ColumnSpec::default()),
            Err(Error::MissingColumn(c)) if c == "response_se"
        ));

        let small = write_file(
            &dir,
            "small.csv",
            "id,x,y,response,response_se\na,0,0,1,1\nb,1,0,1,1\n",
        );
        assert!(matches!(
            load_domain(&small, None, &ColumnSpec::default()),
            Err(Error::TooFewUnits(2))
        ));

        let zero_se = write_file(
            &dir,
            "zero.csv",
            "id,x,y,response,response_se\na,0,0,1,1\nb,1,0,1,0\nc,0,1,1,1\n",
        );
        assert!(load_domain(&zero_se, None, &ColumnSpec::default())
            .unwrap_err()
            .to_string()
            .contains("non-positive SE"));

        let ok = write_file(
            &dir,
            "ok.csv",
            "id,x,y,response,response_se\na,0,0,1,1\nb,1,0,1,1\nc,0,1,1,1\n",
        );
        let bad_edges = write_file(&dir, "edges.csv", "a,zz\n");
        assert!(matches!(
            load_domain(&ok, Some(&bad_edges), &ColumnSpec::default()),
            Err(Error::UnknownUnit(u)) if u == "zz"
        ));
    }

    #[test]
    fn position_covariates_become_scaled_identity() {
        let d = SpatialDomain::new(
            vec!["a".into(), "b".into(), "c".into()],
            &[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
            DVector::from_vec(vec![0.0, 1.0, 2.0]),
            DVector::from_element(3, 1.0),
            DMatrix::from_element(3, 1, 1.0),
            Some(&DMatrix::from_column_slice(3, 1, &[0.5, 1.5, 2.5])),
            None,
        )
        .unwrap();
        assert_eq!(d.k(), 2);
        assert_eq!(d.s[1], DMatrix::from_row_slice(2, 2, &[1.5, 0.0, 0.0, 1.5]));
    }

    #[test]
    fn rank_deficient_design_rejected() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let err = SpatialDomain::new(
            vec!["a".into(), "b".into(), "c".into()],
            &[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
            DVector::zeros(3),
            DVector::from_element(3, 1.0),
            x,
            None,
            None,
        )
        .unwrap_err();
        assert!(err.to_string().contains("rank deficient"));
    }

    fn points() -> impl Strategy<Value = Vec<[f64; 2]>> {
        prop::collection::vec(
            (-100.0f64..100.0, -100.0f64..100.0).prop_map(|(a, b)| [a, b]),
            2..12,
        )
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(pts in points()) {
            let once = normalize_to_unit_disk(&pts).unwrap();
            let twice = normalize_to_unit_disk(&once).unwrap();
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
            }
        }

        #[test]
        fn normalized_distances_bounded_and_equivariant(pts in points()) {
            let (norm, scale) = normalize_with_scale(&pts).unwrap();
            let d_norm = pairwise_distances(&norm).unwrap();
            let d_raw = pairwise_distances(&pts).unwrap();
            prop_assert!(d_norm.iter().all(|v| *v <= 2.0 + 1e-12));
            if scale > 0.0 {
                for (a, b) in d_norm.iter().zip(d_raw.iter()) {
                    prop_assert!((a - b / scale).abs() < 1e-10);
                }
            }
        }

        #[test]
        fn distances_satisfy_triangle_inequality(pts in points()) {
            let d = pairwise_distances(&pts).unwrap();
            let n = pts.len();
            for i in 0..n { for j in 0..n { for k in 0..n {
                prop_assert!(d[(i, j)] <= d[(i, k)] + d[(k, j)] + 1e-9);
            }}}
        }
    }
}
