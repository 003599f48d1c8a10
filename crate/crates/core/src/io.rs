//! On-disk formats for matrices, permutations and their sidecars.
//!
//! Matrix files are a single text line `WMAT1 n=<n>` followed by `n*n`
//! little-endian `f64` values in row-major order. Permutation files hold one
//! index per line; line `i` is `pi(i)`.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CorrelatedPair, DirectedPair};

const MAGIC: &str = "WMAT1";

pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::param("only square matrices are stored"));
    }
    let n = m.nrows();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut body = Vec::with_capacity(n * n * 8);
    for r in 0..n {
        for c in 0..n {
            body.extend_from_slice(&m[(r, c)].to_le_bytes());
        }
    }
    writeln!(w, "{MAGIC} n={n}")
        .and_then(|_| w.write_all(&body))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut header = String::new();
    r.read_line(&mut header).map_err(|e| Error::io(path, e))?;
    let format_err = |message: String| Error::Format {
        path: path.display().to_string(),
        message,
    };
    let n: usize = header
        .trim_end()
        .strip_prefix(MAGIC)
        .and_then(|rest| rest.trim_start().strip_prefix("n="))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| format_err(format!("bad header {:?}", header.trim_end())))?;
    let mut body = Vec::new();
    r.read_to_end(&mut body).map_err(|e| Error::io(path, e))?;
    if body.len() != n * n * 8 {
        return Err(format_err(format!(
            "expected {} payload bytes, found {}",
            n * n * 8,
            body.len()
        )));
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok(DMatrix::from_row_slice(n, n, &values))
}

pub fn write_permutation(path: &Path, pi: &[usize]) -> Result<()> {
    let mut text = String::with_capacity(pi.len() * 6);
    for p in pi {
        text.push_str(&p.to_string());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_permutation(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.trim().parse().map_err(|_| Error::Format {
                path: path.display().to_string(),
                message: format!("line {}: not an index: {l:?}", i + 1),
            })
        })
        .collect()
}

/// JSON sidecar stored next to the matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub n: usize,
    pub epsilon: f64,
    pub seed: u64,
    pub stage: String,
}

pub const STAGE_GENERATED: &str = "generated";
pub const STAGE_PREPROCESSED: &str = "preprocessed";

fn write_sidecar(path: &Path, sidecar: &Sidecar) -> Result<()> {
    let text = serde_json::to_string_pretty(sidecar).expect("sidecar serialises");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_sidecar(path: &Path) -> Result<Sidecar> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Writes `g.wmat`, `gs.wmat`, `pi.txt` and `pair.json` into `dir`.
pub fn save_pair(dir: &Path, pair: &CorrelatedPair) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_matrix(&dir.join("g.wmat"), pair.g())?;
    write_matrix(&dir.join("gs.wmat"), pair.gs())?;
    write_permutation(&dir.join("pi.txt"), pair.pi())?;
    write_sidecar(
        &dir.join("pair.json"),
        &Sidecar {
            n: pair.n(),
            epsilon: pair.epsilon(),
            seed: pair.seed(),
            stage: STAGE_GENERATED.into(),
        },
    )
}

pub fn load_pair(dir: &Path) -> Result<CorrelatedPair> {
    let meta = read_sidecar(&dir.join("pair.json"))?;
    let g = read_matrix(&dir.join("g.wmat"))?;
    let gs = read_matrix(&dir.join("gs.wmat"))?;
    let pi = read_permutation(&dir.join("pi.txt"))?;
    if g.nrows() != meta.n {
        return Err(Error::Format {
            path: dir.display().to_string(),
            message: format!("sidecar n={} but matrix has n={}", meta.n, g.nrows()),
        });
    }
    CorrelatedPair::from_parts(meta.epsilon, g, gs, pi, meta.seed)
}

/// Writes `gh.wmat`, `gsh.wmat`, `pi.txt` and `directed.json` into `dir`.
pub fn save_directed(dir: &Path, pair: &DirectedPair, seed: u64) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_matrix(&dir.join("gh.wmat"), pair.gh())?;
    write_matrix(&dir.join("gsh.wmat"), pair.gsh())?;
    write_permutation(&dir.join("pi.txt"), pair.pi())?;
    write_sidecar(
        &dir.join("directed.json"),
        &Sidecar {
            n: pair.n(),
            epsilon: pair.epsilon(),
            seed,
            stage: STAGE_PREPROCESSED.into(),
        },
    )
}
