use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{BgError, Result};
use crate::tensor::Tensor2;

const BUNDLE_MAGIC: &[u8; 4] = b"BGD1";

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum InputFormat {
    MatrixMarket,
    DenseCsv,
}

/// Count matrix with cells as rows, plus the derived preprocessing state.
#[derive(Clone, Debug)]
pub struct ExpressionMatrix {
    /// n x d' non-negative integral counts.
    pub raw_counts: Tensor2,
    /// n x d model input; empty (0 x 0) until `normalize_log` runs.
    pub processed: Tensor2,
    pub gene_names: Vec<String>,
    /// Indices into `gene_names` chosen by `select_hvg`, ascending.
    pub selected_genes: Vec<usize>,
    pub cell_ids: Vec<String>,
    /// Per-cell library size divided by the median library size.
    pub size_factors: Vec<f64>,
}

impl ExpressionMatrix {
    pub(crate) fn from_raw(raw: Tensor2, gene_names: Vec<String>, cell_ids: Vec<String>) -> Self {
        ExpressionMatrix {
            raw_counts: raw,
            processed: Tensor2::zeros(0, 0),
            gene_names,
            selected_genes: Vec::new(),
            cell_ids,
            size_factors: Vec::new(),
        }
    }

    pub fn n_cells(&self) -> usize {
        self.raw_counts.rows()
    }

    pub fn n_genes(&self) -> usize {
        self.raw_counts.cols()
    }
}

pub fn load_counts(path: &Path, format: InputFormat) -> Result<ExpressionMatrix> {
    let em = match format {
        InputFormat::DenseCsv => load_csv(path)?,
        InputFormat::MatrixMarket => load_matrix_market(path)?,
    };
    if em.n_cells() == 0 || em.n_genes() == 0 {
        return Err(BgError::EmptyMatrix {
            stage: "load",
            rows: em.n_cells(),
            cols: em.n_genes(),
        });
    }
    Ok(em)
}

fn parse_err(path: &Path, line: usize, detail: impl Into<String>) -> BgError {
    BgError::ParseError {
        path: path.to_path_buf(),
        line,
        detail: detail.into(),
    }
}

fn check_count(path: &Path, line: usize, row: usize, col: usize, v: f64) -> Result<f64> {
    if v < 0.0 {
        return Err(BgError::NegativeCount { row, col, value: v });
    }
    if !v.is_finite() || v.fract() != 0.0 {
        return Err(parse_err(path, line, format!("count {v} is not an integer")));
    }
    Ok(v)
}

fn load_csv(path: &Path) -> Result<ExpressionMatrix> {
    let file = std::fs::File::open(path).map_err(|e| BgError::io(path, e))?;
    let reader = BufReader::new(file);
    let mut gene_names: Vec<String> = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut n_cols = None;
    for (li, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| BgError::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        // a first line with any non-numeric token is a gene-name header
        if rows.is_empty() && gene_names.is_empty() && tokens.iter().any(|t| t.parse::<f64>().is_err())
        {
            gene_names = tokens.iter().map(|t| t.to_string()).collect();
            n_cols = Some(tokens.len());
            continue;
        }
        match n_cols {
            Some(c) if c != tokens.len() => {
                return Err(parse_err(
                    path,
                    li + 1,
                    format!("expected {c} columns, found {}", tokens.len()),
                ));
            }
            None => n_cols = Some(tokens.len()),
            _ => {}
        }
        let mut row = Vec::with_capacity(tokens.len());
        for (ci, tok) in tokens.iter().enumerate() {
            let v: f64 = tok
                .parse()
                .map_err(|_| parse_err(path, li + 1, format!("bad number {tok:?}")))?;
            row.push(check_count(path, li + 1, rows.len(), ci, v)?);
        }
        rows.push(row);
    }
    let d = n_cols.unwrap_or(0);
    if gene_names.is_empty() {
        gene_names = (0..d).map(|j| format!("gene{j}")).collect();
    }
    let cell_ids = (0..rows.len()).map(|i| format!("cell{i}")).collect();
    Ok(ExpressionMatrix::from_raw(
        Tensor2::from_nested(&rows),
        gene_names,
        cell_ids,
    ))
}

fn load_matrix_market(path: &Path) -> Result<ExpressionMatrix> {
    let file = std::fs::File::open(path).map_err(|e| BgError::io(path, e))?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let (first_no, first) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let first = first.map_err(|e| BgError::io(path, e))?;
    let header: Vec<String> = first.split_whitespace().map(str::to_lowercase).collect();
    if header.first().map(String::as_str) != Some("%%matrixmarket")
        || !header.contains(&"matrix".to_string())
        || !header.contains(&"coordinate".to_string())
        || !header.contains(&"general".to_string())
    {
        return Err(parse_err(
            path,
            first_no + 1,
            "expected '%%MatrixMarket matrix coordinate integer general'",
        ));
    }

    let mut dims: Option<(usize, usize, usize)> = None;
    let mut raw = Tensor2::zeros(0, 0);
    let mut seen = 0usize;
    for (li, line) in lines {
        let line = line.map_err(|e| BgError::io(path, e))?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('%') {
            continue;
        }
        let fields: Vec<&str> = t.split_whitespace().collect();
        match dims {
            None => {
                if fields.len() != 3 {
                    return Err(parse_err(path, li + 1, "size line must be 'rows cols nnz'"));
                }
                let parse = |s: &str| -> Result<usize> {
                    s.parse()
                        .map_err(|_| parse_err(path, li + 1, format!("bad size {s:?}")))
                };
                let (n, d, nnz) = (parse(fields[0])?, parse(fields[1])?, parse(fields[2])?);
                raw = Tensor2::zeros(n, d);
                dims = Some((n, d, nnz));
            }
            Some((n, d, nnz)) => {
                if fields.len() != 3 {
                    return Err(parse_err(path, li + 1, "entry must be 'row col value'"));
                }
                let i: usize = fields[0]
                    .parse()
                    .map_err(|_| parse_err(path, li + 1, "bad row index"))?;
                let j: usize = fields[1]
                    .parse()
                    .map_err(|_| parse_err(path, li + 1, "bad col index"))?;
                let v: f64 = fields[2]
                    .parse()
                    .map_err(|_| parse_err(path, li + 1, "bad value"))?;
                if i < 1 || i > n || j < 1 || j > d {
                    return Err(parse_err(path, li + 1, format!("index ({i},{j}) out of range")));
                }
                let v = check_count(path, li + 1, i - 1, j - 1, v)?;
                raw.set(i - 1, j - 1, raw.get(i - 1, j - 1) + v);
                seen += 1;
                if seen > nnz {
                    return Err(parse_err(path, li + 1, "more entries than declared"));
                }
            }
        }
    }
    let (n, d, nnz) = dims.ok_or_else(|| parse_err(path, 2, "missing size line"))?;
    if seen != nnz {
        return Err(parse_err(
            path,
            0,
            format!("declared {nnz} entries, found {seen}"),
        ));
    }
    let gene_names = (0..d).map(|j| format!("gene{j}")).collect();
    let cell_ids = (0..n).map(|i| format!("cell{i}")).collect();
    Ok(ExpressionMatrix::from_raw(raw, gene_names, cell_ids))
}

/// Drops cells expressing fewer than `min_genes_per_cell` genes, then genes
/// detected in fewer than `min_cells_per_gene` of the surviving cells. Each
/// pass runs exactly once, in that order.
pub fn filter_qc(
    em: &ExpressionMatrix,
    min_genes_per_cell: usize,
    min_cells_per_gene: usize,
) -> Result<ExpressionMatrix> {
    let raw = &em.raw_counts;
    let keep_cells: Vec<usize> = (0..raw.rows())
        .filter(|&i| raw.row(i).iter().filter(|&&v| v > 0.0).count() >= min_genes_per_cell)
        .collect();
    let keep_genes: Vec<usize> = (0..raw.cols())
        .filter(|&j| {
            keep_cells
                .iter()
                .filter(|&&i| raw.get(i, j) > 0.0)
                .count()
                >= min_cells_per_gene
        })
        .collect();
    if keep_cells.is_empty() || keep_genes.is_empty() {
        return Err(BgError::EmptyMatrix {
            stage: "filter_qc",
            rows: keep_cells.len(),
            cols: keep_genes.len(),
        });
    }
    let mut out = Tensor2::zeros(keep_cells.len(), keep_genes.len());
    for (r, &i) in keep_cells.iter().enumerate() {
        for (c, &j) in keep_genes.iter().enumerate() {
            out.set(r, c, raw.get(i, j));
        }
    }
    Ok(ExpressionMatrix::from_raw(
        out,
        keep_genes.iter().map(|&j| em.gene_names[j].clone()).collect(),
        keep_cells.iter().map(|&i| em.cell_ids[i].clone()).collect(),
    ))
}

/// Picks the `d` genes with the highest dispersion (variance / mean of raw
/// counts). Genes with zero mean rank last; ties break toward the lower index.
/// The chosen indices are stored in ascending order so a full selection keeps
/// the original column order.
pub fn select_hvg(em: &ExpressionMatrix, d: usize) -> Result<ExpressionMatrix> {
    let d_prime = em.n_genes();
    if d == 0 || d > d_prime {
        return Err(BgError::InsufficientGenes {
            requested: d,
            available: d_prime,
        });
    }
    let n = em.n_cells() as f64;
    let mut scored: Vec<(usize, f64)> = (0..d_prime)
        .map(|j| {
            let mut sum = 0.0;
            let mut sumsq = 0.0;
            for i in 0..em.n_cells() {
                let v = em.raw_counts.get(i, j);
                sum += v;
                sumsq += v * v;
            }
            let mean = sum / n;
            let var = sumsq / n - mean * mean;
            let dispersion = if mean > 0.0 { var / mean } else { f64::NEG_INFINITY };
            (j, dispersion)
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut selected: Vec<usize> = scored[..d].iter().map(|&(j, _)| j).collect();
    selected.sort_unstable();
    let mut out = em.clone();
    out.selected_genes = selected;
    out.processed = Tensor2::zeros(0, 0);
    out.size_factors = Vec::new();
    Ok(out)
}

/// Library-size normalization over all genes, log1p, then per-gene
/// standardization of the selected columns. Constant columns stay at zero.
pub fn normalize_log(em: &ExpressionMatrix) -> Result<ExpressionMatrix> {
    assert!(
        !em.selected_genes.is_empty(),
        "select_hvg must run before normalize_log"
    );
    let n = em.n_cells();
    let mut totals = Vec::with_capacity(n);
    for i in 0..n {
        let t: f64 = em.raw_counts.row(i).iter().sum();
        if t == 0.0 {
            return Err(BgError::ZeroLibrary { row: i });
        }
        totals.push(t);
    }
    let mut sorted = totals.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let size_factors: Vec<f64> = totals.iter().map(|t| t / median).collect();

    let d = em.selected_genes.len();
    let mut processed = Tensor2::zeros(n, d);
    for (c, &j) in em.selected_genes.iter().enumerate() {
        for i in 0..n {
            let v = em.raw_counts.get(i, j) / size_factors[i];
            processed.set(i, c, v.ln_1p());
        }
    }
    for c in 0..d {
        let mut mn = f64::INFINITY;
        let mut mx = f64::NEG_INFINITY;
        let mut sum = 0.0;
        for i in 0..n {
            let v = processed.get(i, c);
            mn = mn.min(v);
            mx = mx.max(v);
            sum += v;
        }
        if mx == mn {
            for i in 0..n {
                processed.set(i, c, 0.0);
            }
            continue;
        }
        let mean = sum / n as f64;
        let var: f64 = (0..n)
            .map(|i| {
                let z = processed.get(i, c) - mean;
                z * z
            })
            .sum::<f64>()
            / n as f64;
        let sd = var.sqrt();
        for i in 0..n {
            processed.set(i, c, (processed.get(i, c) - mean) / sd);
        }
    }
    let mut out = em.clone();
    out.processed = processed;
    out.size_factors = size_factors;
    Ok(out)
}

/// Runs select_hvg then normalize_log and keeps the raw counts of the selected
/// columns for the reconstruction losses.
#[derive(Clone, Debug, PartialEq)]
pub struct ProcessedBundle {
    pub d_prime: usize,
    pub selected: Vec<usize>,
    pub size_factors: Vec<f64>,
    /// n x d standardized log counts (model input X).
    pub processed: Tensor2,
    /// n x d raw counts of the selected genes (integral values).
    pub raw_hvg: Tensor2,
}

impl ProcessedBundle {
    pub fn from_processed(em: &ExpressionMatrix) -> Self {
        let n = em.n_cells();
        let d = em.selected_genes.len();
        assert!(d > 0 && em.processed.rows() == n, "matrix not processed yet");
        let mut raw_hvg = Tensor2::zeros(n, d);
        for (c, &j) in em.selected_genes.iter().enumerate() {
            for i in 0..n {
                raw_hvg.set(i, c, em.raw_counts.get(i, j));
            }
        }
        ProcessedBundle {
            d_prime: em.n_genes(),
            selected: em.selected_genes.clone(),
            size_factors: em.size_factors.clone(),
            processed: em.processed.clone(),
            raw_hvg,
        }
    }

    pub fn n_cells(&self) -> usize {
        self.processed.rows()
    }

    pub fn n_genes(&self) -> usize {
        self.processed.cols()
    }

    /// Binary layout after the "BGD1" magic, all little-endian: u32 n, u32 d,
    /// u32 d', d u32 selected indices, n f64 size factors, n*d f64 processed
    /// values row-major, n*d u32 raw counts row-major.
    pub fn save(&self, path: &Path) -> Result<()> {
        let (n, d) = (self.n_cells(), self.n_genes());
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(BUNDLE_MAGIC);
        buf.extend_from_slice(&(n as u32).to_le_bytes());
        buf.extend_from_slice(&(d as u32).to_le_bytes());
        buf.extend_from_slice(&(self.d_prime as u32).to_le_bytes());
        for &j in &self.selected {
            buf.extend_from_slice(&(j as u32).to_le_bytes());
        }
        for &s in &self.size_factors {
            buf.extend_from_slice(&s.to_le_bytes());
        }
        for &v in self.processed.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for &v in self.raw_hvg.data() {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        let mut f = std::fs::File::create(path).map_err(|e| BgError::io(path, e))?;
        f.write_all(&buf).map_err(|e| BgError::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ProcessedBundle> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| BgError::io(path, e))?
            .read_to_end(&mut bytes)
            .map_err(|e| BgError::io(path, e))?;
        if bytes.len() < 16 || &bytes[0..4] != BUNDLE_MAGIC {
            return Err(BgError::Checkpoint("bad bundle magic".into()));
        }
        fn take(bytes: &[u8], pos: &mut usize, n: usize) -> Result<usize> {
            let start = *pos;
            if start + n > bytes.len() {
                return Err(BgError::Checkpoint("truncated bundle".into()));
            }
            *pos += n;
            Ok(start)
        }
        let read_u32 = |pos: &mut usize| -> Result<usize> {
            let at = take(&bytes, pos, 4)?;
            Ok(u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize)
        };
        let read_f64 = |pos: &mut usize| -> Result<f64> {
            let at = take(&bytes, pos, 8)?;
            Ok(f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()))
        };
        let mut pos = 4usize;
        let n = read_u32(&mut pos)?;
        let d = read_u32(&mut pos)?;
        let d_prime = read_u32(&mut pos)?;
        let mut selected = Vec::with_capacity(d);
        for _ in 0..d {
            selected.push(read_u32(&mut pos)?);
        }
        let mut size_factors = Vec::with_capacity(n);
        for _ in 0..n {
            size_factors.push(read_f64(&mut pos)?);
        }
        let mut processed = Vec::with_capacity(n * d);
        for _ in 0..n * d {
            processed.push(read_f64(&mut pos)?);
        }
        let mut raw = Vec::with_capacity(n * d);
        for _ in 0..n * d {
            raw.push(read_u32(&mut pos)? as f64);
        }
        Ok(ProcessedBundle {
            d_prime,
            selected,
            size_factors,
            processed: Tensor2::from_vec(n, d, processed),
            raw_hvg: Tensor2::from_vec(n, d, raw),
        })
    }
}

/// One label per line; blank lines are skipped.
pub fn read_labels(path: &Path) -> Result<Vec<String>> {
    let file = std::fs::File::open(path).map_err(|e| BgError::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| BgError::io(path, e))?;
        let t = line.trim();
        if !t.is_empty() {
            out.push(t.to_string());
        }
    }
    Ok(out)
}

/// Maps string labels to dense 0..K codes in first-appearance order.
pub fn encode_labels(labels: &[String]) -> (Vec<usize>, usize) {
    let mut codes = Vec::with_capacity(labels.len());
    let mut seen: Vec<&str> = Vec::new();
    for l in labels {
        let code = match seen.iter().position(|s| s == l) {
            Some(p) => p,
            None => {
                seen.push(l);
                seen.len() - 1
            }
        };
        codes.push(code);
    }
    (codes, seen.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(content: &str, name: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(name);
        std::fs::write(&path, content).unwrap();
        (dir, path)
    }

    fn em_from(rows: &[Vec<f64>]) -> ExpressionMatrix {
        let t = Tensor2::from_nested(rows);
        let g = (0..t.cols()).map(|j| format!("gene{j}")).collect();
        let c = (0..t.rows()).map(|i| format!("cell{i}")).collect();
        ExpressionMatrix::from_raw(t, g, c)
    }

    #[test]
    fn test_load_csv_plain() {
        let (_d, path) = write_tmp("1,0,2\n0,5,0\n", "counts.csv");
        let em = load_counts(&path, InputFormat::DenseCsv).unwrap();
        assert_eq!(em.n_cells(), 2);
        assert_eq!(em.n_genes(), 3);
        assert_eq!(em.raw_counts.row(0), &[1.0, 0.0, 2.0]);
        assert_eq!(em.raw_counts.row(1), &[0.0, 5.0, 0.0]);
    }

    #[test]
    fn test_load_csv_header_detected() {
        let (_d, path) = write_tmp("gA,gB\n3,4\n", "counts.csv");
        let em = load_counts(&path, InputFormat::DenseCsv).unwrap();
        assert_eq!(em.gene_names, vec!["gA", "gB"]);
        assert_eq!(em.n_cells(), 1);
    }

    #[test]
    fn test_load_csv_negative_count() {
        let (_d, path) = write_tmp("1,2\n0,-1\n", "counts.csv");
        match load_counts(&path, InputFormat::DenseCsv) {
            Err(BgError::NegativeCount { row: 1, col: 1, .. }) => {}
            other => panic!("expected NegativeCount, got {other:?}"),
        }
    }

    #[test]
    fn test_load_csv_rejects_fraction() {
        let (_d, path) = write_tmp("1.5,2\n", "counts.csv");
        assert!(matches!(
            load_counts(&path, InputFormat::DenseCsv),
            Err(BgError::ParseError { .. })
        ));
    }

    #[test]
    fn test_load_csv_empty_is_error() {
        let (_d, path) = write_tmp("", "counts.csv");
        assert!(matches!(
            load_counts(&path, InputFormat::DenseCsv),
            Err(BgError::EmptyMatrix { .. })
        ));
    }

    #[test]
    fn test_load_matrix_market_single_entry() {
        let (_d, path) = write_tmp(
            "%%MatrixMarket matrix coordinate integer general\n% comment\n2 2 1\n1 1 7\n",
            "m.mtx",
        );
        let em = load_counts(&path, InputFormat::MatrixMarket).unwrap();
        assert_eq!(em.raw_counts.row(0), &[7.0, 0.0]);
        assert_eq!(em.raw_counts.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn test_load_matrix_market_bad_header() {
        let (_d, path) = write_tmp("%%MatrixMarket matrix array real general\n1 1\n3\n", "m.mtx");
        assert!(matches!(
            load_counts(&path, InputFormat::MatrixMarket),
            Err(BgError::ParseError { .. })
        ));
    }

    #[test]
    fn test_load_matrix_market_out_of_range() {
        let (_d, path) = write_tmp(
            "%%MatrixMarket matrix coordinate integer general\n2 2 1\n3 1 4\n",
            "m.mtx",
        );
        assert!(matches!(
            load_counts(&path, InputFormat::MatrixMarket),
            Err(BgError::ParseError { .. })
        ));
    }

    #[test]
    fn test_filter_qc_zero_thresholds_identity() {
        let em = em_from(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
        let out = filter_qc(&em, 0, 0).unwrap();
        assert_eq!(out.raw_counts, em.raw_counts);
    }

    #[test]
    fn test_filter_qc_removes_empty_cell() {
        let em = em_from(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
        let out = filter_qc(&em, 1, 0).unwrap();
        assert_eq!(out.n_cells(), 1);
        assert_eq!(out.cell_ids, vec!["cell0"]);
    }

    #[test]
    fn test_filter_qc_matches_brute_force() {
        let mut rng = crate::seeded_rng(42);
        use rand::Rng;
        let rows: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..5).map(|_| rng.gen_range(0..3) as f64).collect())
            .collect();
        let em = em_from(&rows);
        match filter_qc(&em, 2, 2) {
            Ok(out) => {
                // oracle: recount nonzeros directly
                let keep_cells: Vec<usize> = (0..5)
                    .filter(|&i| rows[i].iter().filter(|&&v| v > 0.0).count() >= 2)
                    .collect();
                let keep_genes: Vec<usize> = (0..5)
                    .filter(|&j| keep_cells.iter().filter(|&&i| rows[i][j] > 0.0).count() >= 2)
                    .collect();
                assert_eq!(out.n_cells(), keep_cells.len());
                assert_eq!(out.n_genes(), keep_genes.len());
                for (r, &i) in keep_cells.iter().enumerate() {
                    for (c, &j) in keep_genes.iter().enumerate() {
                        assert_eq!(out.raw_counts.get(r, c), rows[i][j]);
                    }
                }
            }
            Err(BgError::EmptyMatrix { .. }) => panic!("fixture should survive (2,2)"),
            Err(e) => panic!("{e}"),
        }
    }

    #[test]
    fn test_filter_qc_all_removed() {
        let em = em_from(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(matches!(
            filter_qc(&em, 3, 0),
            Err(BgError::EmptyMatrix { .. })
        ));
    }

    #[test]
    fn test_select_hvg_full_keeps_order() {
        let em = em_from(&[vec![1.0, 5.0, 2.0], vec![3.0, 0.0, 2.0]]);
        let out = select_hvg(&em, 3).unwrap();
        assert_eq!(out.selected_genes, vec![0, 1, 2]);
    }

    #[test]
    fn test_select_hvg_prefers_varying_gene() {
        let em = em_from(&[vec![2.0, 1.0], vec![2.0, 9.0]]);
        let out = select_hvg(&em, 1).unwrap();
        assert_eq!(out.selected_genes, vec![1]);
    }

    #[test]
    fn test_select_hvg_six_gene_oracle() {
        // columns: g0 constant 2, g1 = {0,8}, g2 = {1,3}, g3 zero, g4 = {4,4}, g5 = {0,2}
        let em = em_from(&[
            vec![2.0, 0.0, 1.0, 0.0, 4.0, 0.0],
            vec![2.0, 8.0, 3.0, 0.0, 4.0, 2.0],
        ]);
        // dispersions: g0 0, g1 16/4=4, g2 1/2, g3 last (mean 0), g4 0, g5 1
        let out = select_hvg(&em, 3).unwrap();
        assert_eq!(out.selected_genes, vec![1, 2, 5]);
    }

    #[test]
    fn test_select_hvg_too_many() {
        let em = em_from(&[vec![1.0, 2.0]]);
        assert!(matches!(
            select_hvg(&em, 5),
            Err(BgError::InsufficientGenes {
                requested: 5,
                available: 2
            })
        ));
    }

    #[test]
    fn test_normalize_single_cell_zeroes() {
        let em = em_from(&[vec![1.0, 1.0]]);
        let sel = select_hvg(&em, 2).unwrap();
        let out = normalize_log(&sel).unwrap();
        assert_eq!(out.size_factors, vec![1.0]);
        assert_eq!(out.processed.row(0), &[0.0, 0.0]);
    }

    #[test]
    fn test_normalize_three_by_two_oracle() {
        let em = em_from(&[vec![1.0, 3.0], vec![2.0, 2.0], vec![0.0, 8.0]]);
        let sel = select_hvg(&em, 2).unwrap();
        let out = normalize_log(&sel).unwrap();
        // oracle: totals (4, 4, 8), median 4, size factors (1, 1, 2)
        assert_eq!(out.size_factors, vec![1.0, 1.0, 2.0]);
        let mut oracle = [
            [(1.0_f64).ln_1p(), 3.0_f64.ln_1p()],
            [2.0_f64.ln_1p(), 2.0_f64.ln_1p()],
            [0.0_f64.ln_1p(), 4.0_f64.ln_1p()],
        ];
        for c in 0..2 {
            let mean = (oracle[0][c] + oracle[1][c] + oracle[2][c]) / 3.0;
            let var = (0..3).map(|i| (oracle[i][c] - mean).powi(2)).sum::<f64>() / 3.0;
            for row in oracle.iter_mut() {
                row[c] = (row[c] - mean) / var.sqrt();
            }
        }
        for i in 0..3 {
            for c in 0..2 {
                assert!((out.processed.get(i, c) - oracle[i][c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn test_normalize_zero_library_detected() {
        let em = em_from(&[vec![1.0, 1.0], vec![0.0, 0.0]]);
        let sel = select_hvg(&em, 2).unwrap();
        assert!(matches!(
            normalize_log(&sel),
            Err(BgError::ZeroLibrary { row: 1 })
        ));
    }

    #[test]
    fn test_normalize_columns_standardized() {
        let mut rng = crate::seeded_rng(7);
        use rand::Rng;
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..6).map(|_| rng.gen_range(0..20) as f64).collect())
            .collect();
        let em = em_from(&rows);
        let em = filter_qc(&em, 1, 1).unwrap();
        let sel = select_hvg(&em, 4).unwrap();
        let out = normalize_log(&sel).unwrap();
        let p = &out.processed;
        for c in 0..p.cols() {
            let n = p.rows() as f64;
            let mean: f64 = (0..p.rows()).map(|i| p.get(i, c)).sum::<f64>() / n;
            let var: f64 = (0..p.rows()).map(|i| (p.get(i, c) - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-9, "col {c} mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "col {c} var {var}");
        }
        assert!(p.all_finite());
    }

    #[test]
    fn test_pipeline_permutation_equivariant() {
        let rows = vec![
            vec![1.0, 4.0, 0.0],
            vec![2.0, 1.0, 3.0],
            vec![5.0, 0.0, 1.0],
            vec![1.0, 1.0, 1.0],
        ];
        let perm = [2usize, 0, 3, 1];
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
        let run = |r: &[Vec<f64>]| {
            let em = em_from(r);
            let sel = select_hvg(&em, 3).unwrap();
            normalize_log(&sel).unwrap()
        };
        let a = run(&rows);
        let b = run(&permuted);
        for (out_row, &src) in perm.iter().enumerate() {
            assert_eq!(b.processed.row(out_row), a.processed.row(src));
            assert_eq!(b.size_factors[out_row], a.size_factors[src]);
        }
    }

    #[test]
    fn test_pipeline_deterministic() {
        let (_d, path) = write_tmp("3,1,0\n2,2,1\n9,0,4\n1,1,1\n", "counts.csv");
        let run = || {
            let em = load_counts(&path, InputFormat::DenseCsv).unwrap();
            let em = filter_qc(&em, 1, 1).unwrap();
            let sel = select_hvg(&em, 2).unwrap();
            normalize_log(&sel).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.processed, b.processed);
        assert_eq!(a.size_factors, b.size_factors);
    }

    #[test]
    fn test_bundle_round_trip_bit_identical() {
        let em = em_from(&[vec![1.0, 4.0, 0.0], vec![2.0, 1.0, 3.0], vec![5.0, 0.0, 1.0]]);
        let sel = select_hvg(&em, 2).unwrap();
        let out = normalize_log(&sel).unwrap();
        let bundle = ProcessedBundle::from_processed(&out);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.bgd");
        bundle.save(&path).unwrap();
        let loaded = ProcessedBundle::load(&path).unwrap();
        assert_eq!(bundle, loaded);
    }

    #[test]
    fn test_bundle_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.bgd");
        std::fs::write(&path, b"BGD1\x05\x00\x00\x00").unwrap();
        assert!(matches!(
            ProcessedBundle::load(&path),
            Err(BgError::Checkpoint(_))
        ));
    }

    #[test]
    fn test_labels_round_trip() {
        let (_d, path) = write_tmp("alpha\nbeta\nalpha\n\ngamma\n", "labels.txt");
        let labels = read_labels(&path).unwrap();
        assert_eq!(labels.len(), 4);
        let (codes, k) = encode_labels(&labels);
        assert_eq!(codes, vec![0, 1, 0, 2]);
        assert_eq!(k, 3);
    }

    #[test]
    fn test_missing_file_is_io_error() {
        let err = load_counts(Path::new("/nonexistent/file.csv"), InputFormat::DenseCsv)
            .unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("/nonexistent/file.csv"));
    }
}
