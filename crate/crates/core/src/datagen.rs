//! Synthetic ground truth for the Lorenz and Lotka-Volterra experiments,
//! sequence splitting and dataset files.
//!
//! Both generators integrate the true SDE with a fine Euler-Maruyama step,
//! keep every `stride`-th state, then cut the observation stream into
//! train and test windows. Sequence `i` of a split starts where sequence
//! `i-1` ended, so concatenating a split gives back the stream.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::priors::{lorenz_drift, lotka_volterra_drift, LORENZ_PARAMS, LOTKA_VOLTERRA_PARAMS};
use crate::sde::TimeGrid;

/// One observed trajectory: row `j` of `values` was observed at `grid[j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationSequence {
    pub id: usize,
    pub grid: TimeGrid,
    pub values: Tensor,
}

impl ObservationSequence {
    pub fn new(id: usize, grid: TimeGrid, values: Tensor) -> Result<Self> {
        if values.rank() != 2 || values.rows() != grid.times().len() {
            return Err(Error::invalid(format!(
                "sequence {id}: {} time points but values of shape {:?}",
                grid.times().len(),
                values.shape()
            )));
        }
        Ok(Self { id, grid, values })
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    /// Rows `start..start+len` as a new sequence with the same id.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.len() {
            return Err(Error::invalid(format!(
                "window {start}..{} outside a sequence of length {}",
                start + len,
                self.len()
            )));
        }
        let d = self.dim();
        let grid = TimeGrid::new(self.grid.times()[start..start + len].to_vec())?;
        let values = Tensor::from_parts(
            vec![len, d],
            self.values.data()[start * d..(start + len) * d].to_vec(),
        )?;
        Self::new(self.id, grid, values)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Train,
    Test,
    Stream,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub role: Role,
    pub sequences: Vec<ObservationSequence>,
}

impl Dataset {
    pub fn new(role: Role, sequences: Vec<ObservationSequence>) -> Result<Self> {
        if let Some(first) = sequences.first() {
            if let Some(bad) = sequences.iter().find(|s| s.dim() != first.dim()) {
                return Err(Error::invalid(format!(
                    "sequence {} has dimension {}, expected {}",
                    bad.id,
                    bad.dim(),
                    first.dim()
                )));
            }
        }
        Ok(Self { role, sequences })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.sequences.first().map_or(0, |s| s.dim())
    }

    /// Row-wise concatenation of every sequence.
    pub fn concat(&self) -> Tensor {
        let data: Vec<f64> = self
            .sequences
            .iter()
            .flat_map(|s| s.values.data().iter().copied())
            .collect();
        let rows = self.sequences.iter().map(|s| s.len()).sum();
        Tensor::raw(vec![rows, self.dim()], data)
    }
}

/// Train, test and the whole downsampled stream of one generator run.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedData {
    pub train: Dataset,
    pub test: Dataset,
    pub stream: ObservationSequence,
    pub manifest: Manifest,
}

/// Fine-step simulation and splitting protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub fine_dt: f64,
    pub fine_steps: usize,
    pub stride: usize,
    pub start: Vec<f64>,
    pub diffusion: Vec<f64>,
    pub params: Vec<f64>,
    pub train_sequences: usize,
    pub train_length: usize,
    pub test_sequences: usize,
    pub test_length: usize,
}

impl Protocol {
    pub fn lorenz() -> Self {
        Self {
            fine_dt: 1e-4,
            fine_steps: 200_000,
            stride: 100,
            start: vec![1.0, 1.0, 28.0],
            diffusion: vec![1.0; 3],
            params: LORENZ_PARAMS.to_vec(),
            train_sequences: 20,
            train_length: 50,
            test_sequences: 10,
            test_length: 100,
        }
    }

    pub fn lotka_volterra() -> Self {
        Self {
            fine_dt: 1e-4,
            fine_steps: 100_000,
            stride: 100,
            start: vec![5.0, 3.0],
            diffusion: vec![0.2, 0.3],
            params: LOTKA_VOLTERRA_PARAMS.to_vec(),
            train_sequences: 10,
            train_length: 50,
            test_sequences: 10,
            test_length: 50,
        }
    }

    pub fn observations(&self) -> usize {
        self.fine_steps / self.stride
    }

    pub fn spacing(&self) -> f64 {
        self.fine_dt * self.stride as f64
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if self.start.len() != dim || self.diffusion.len() != dim {
            return Err(Error::invalid(format!(
                "start and diffusion must have dimension {dim}"
            )));
        }
        if !(self.fine_dt > 0.0) || self.stride == 0 || !self.fine_steps.is_multiple_of(self.stride)
        {
            return Err(Error::invalid(
                "fine steps must be a positive multiple of the stride",
            ));
        }
        if self.diffusion.iter().any(|g| !(*g >= 0.0)) {
            return Err(Error::invalid("diffusion scales must be non-negative"));
        }
        let need =
            self.train_sequences * self.train_length + self.test_sequences * self.test_length;
        if need > self.observations() || self.train_length == 0 || self.test_length == 0 {
            return Err(Error::invalid(format!(
                "splits need {need} observations, the stream has {}",
                self.observations()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub system: String,
    pub seed: u64,
    pub dim: usize,
    pub spacing: f64,
    pub observations: usize,
    pub train_sequences: usize,
    pub train_length: usize,
    pub test_sequences: usize,
    pub test_length: usize,
    /// Fine-step simulations discarded by the positivity guard.
    pub rejected_paths: usize,
    pub protocol: Protocol,
}

impl Manifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Euler-Maruyama with diagonal constant diffusion, keeping every
/// `stride`-th state starting with the initial one.
fn integrate(
    drift: impl Fn(&[f64]) -> Vec<f64>,
    protocol: &Protocol,
    rng: &mut ChaCha8Rng,
    reject: impl Fn(&[f64]) -> bool,
) -> Option<Vec<f64>> {
    let dim = protocol.start.len();
    let sqrt_dt = protocol.fine_dt.sqrt();
    let mut x = protocol.start.clone();
    let mut kept = Vec::with_capacity(protocol.observations() * dim);
    for step in 0..protocol.fine_steps {
        if step % protocol.stride == 0 {
            kept.extend_from_slice(&x);
        }
        let f = drift(&x);
        for d in 0..dim {
            let z: f64 = StandardNormal.sample(rng);
            x[d] += f[d] * protocol.fine_dt + protocol.diffusion[d] * sqrt_dt * z;
        }
        if reject(&x) {
            return None;
        }
    }
    Some(kept)
}

fn cut(
    stream: &ObservationSequence,
    start: usize,
    count: usize,
    len: usize,
) -> Result<Vec<ObservationSequence>> {
    (0..count)
        .map(|i| {
            let mut w = stream.window(start + i * len, len)?;
            w.id = i;
            Ok(w)
        })
        .collect()
}

fn split(stream: &ObservationSequence, protocol: &Protocol) -> Result<(Dataset, Dataset)> {
    let train_total = protocol.train_sequences * protocol.train_length;
    let train = cut(stream, 0, protocol.train_sequences, protocol.train_length)?;
    // The test split starts at the midpoint of the stream unless the
    // training split runs past it.
    let latest = protocol.observations() - protocol.test_sequences * protocol.test_length;
    let test_start = train_total.max(protocol.observations() / 2).min(latest);
    let test = cut(
        stream,
        test_start,
        protocol.test_sequences,
        protocol.test_length,
    )?;
    Ok((
        Dataset::new(Role::Train, train)?,
        Dataset::new(Role::Test, test)?,
    ))
}

fn build(
    system: &str,
    seed: u64,
    protocol: &Protocol,
    drift: impl Fn(&[f64]) -> Vec<f64>,
    reject: impl Fn(&[f64]) -> bool,
) -> Result<GeneratedData> {
    const MAX_ATTEMPTS: usize = 100;
    let dim = protocol.start.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rejected = 0;
    let data = loop {
        if let Some(d) = integrate(&drift, protocol, &mut rng, &reject) {
            break d;
        }
        rejected += 1;
        if rejected == MAX_ATTEMPTS {
            return Err(Error::invalid(format!(
                "{system}: no admissible path in {MAX_ATTEMPTS} attempts"
            )));
        }
    };
    let n = protocol.observations();
    let times = (0..n).map(|j| j as f64 * protocol.spacing()).collect();
    let stream = ObservationSequence::new(
        0,
        TimeGrid::new(times)?,
        Tensor::from_parts(vec![n, dim], data)?,
    )?;
    let (train, test) = split(&stream, protocol)?;
    let manifest = Manifest {
        system: system.to_string(),
        seed,
        dim,
        spacing: protocol.spacing(),
        observations: n,
        train_sequences: protocol.train_sequences,
        train_length: protocol.train_length,
        test_sequences: protocol.test_sequences,
        test_length: protocol.test_length,
        rejected_paths: rejected,
        protocol: protocol.clone(),
    };
    Ok(GeneratedData {
        train,
        test,
        stream,
        manifest,
    })
}

/// Stochastic Lorenz system under `protocol` (see [`Protocol::lorenz`]).
pub fn generate_lorenz_with(seed: u64, protocol: &Protocol) -> Result<GeneratedData> {
    protocol.validate(3)?;
    let params = protocol.params.clone();
    if params.len() != 3 {
        return Err(Error::invalid("Lorenz takes 3 parameters"));
    }
    build(
        "lorenz",
        seed,
        protocol,
        |x| lorenz_drift(x, &params).to_vec(),
        |x| x.iter().any(|v| !v.is_finite()),
    )
}

pub fn generate_lorenz(seed: u64) -> Result<GeneratedData> {
    generate_lorenz_with(seed, &Protocol::lorenz())
}

/// Stochastic Lotka-Volterra system; a fine path that leaves the positive
/// quadrant is discarded and redrawn from the continuing random stream.
pub fn generate_lotka_volterra_with(seed: u64, protocol: &Protocol) -> Result<GeneratedData> {
    protocol.validate(2)?;
    let params = protocol.params.clone();
    if params.len() != 4 {
        return Err(Error::invalid("Lotka-Volterra takes 4 parameters"));
    }
    build(
        "lotka_volterra",
        seed,
        protocol,
        |x| lotka_volterra_drift(x, &params).to_vec(),
        |x| x.iter().any(|v| !(*v > 0.0) || !v.is_finite()),
    )
}

pub fn generate_lotka_volterra(seed: u64) -> Result<GeneratedData> {
    generate_lotka_volterra_with(seed, &Protocol::lotka_volterra())
}

/// Writes `seq_id,t,dim0,..` rows with 17 significant digits.
pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    let mut out = std::io::BufWriter::new(File::create(path)?);
    let mut header = vec!["seq_id".to_string(), "t".to_string()];
    header.extend((0..dataset.dim()).map(|d| format!("dim{d}")));
    writeln!(out, "{}", header.join(","))?;
    for seq in &dataset.sequences {
        for (j, t) in seq.grid.times().iter().enumerate() {
            write!(out, "{},{t:.16e}", seq.id)?;
            for v in seq.values.row(j) {
                write!(out, ",{v:.16e}")?;
            }
            writeln!(out)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads a file written by [`write_dataset`]. Rows of one sequence must be
/// contiguous and in time order.
pub fn read_dataset(path: &Path, role: Role) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)?;
    let header = reader.headers()?.clone();
    if header.len() < 2 || &header[0] != "seq_id" || &header[1] != "t" {
        return Err(Error::Parse {
            line: 1,
            message: "header must start with `seq_id,t`".into(),
        });
    }
    let dim = header.len() - 2;
    for (d, name) in header.iter().skip(2).enumerate() {
        if name != format!("dim{d}") {
            return Err(Error::Parse {
                line: 1,
                message: format!("column {} should be `dim{d}`, found `{name}`", d + 2),
            });
        }
    }

    let mut sequences = Vec::new();
    let mut current: Option<(usize, Vec<f64>, Vec<f64>, u64)> = None;
    let finish = |(id, times, values, line): (usize, Vec<f64>, Vec<f64>, u64)| -> Result<ObservationSequence> {
        let grid = TimeGrid::new(times).map_err(|e| Error::Parse {
            line,
            message: format!("sequence {id}: {e}"),
        })?;
        let rows = values.len() / dim.max(1);
        ObservationSequence::new(id, grid, Tensor::from_parts(vec![rows, dim], values)?)
    };
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let parse_err = |message: String| Error::Parse { line, message };
        if record.len() != dim + 2 {
            return Err(parse_err(format!(
                "expected {} fields, found {}",
                dim + 2,
                record.len()
            )));
        }
        let id: usize = record[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("bad sequence id `{}`", &record[0])))?;
        let mut nums = Vec::with_capacity(dim + 1);
        for field in record.iter().skip(1) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(format!("bad number `{field}`")))?;
            if !v.is_finite() {
                return Err(parse_err(format!("non-finite value `{field}`")));
            }
            nums.push(v);
        }
        match &mut current {
            Some((cid, times, values, _)) if *cid == id => {
                times.push(nums[0]);
                values.extend_from_slice(&nums[1..]);
            }
            _ => {
                if let Some(done) = current.take() {
                    if sequences.iter().any(|s: &ObservationSequence| s.id == id) {
                        return Err(parse_err(format!(
                            "rows of sequence {id} are not contiguous"
                        )));
                    }
                    sequences.push(finish(done)?);
                }
                current = Some((id, vec![nums[0]], nums[1..].to_vec(), line));
            }
        }
    }
    if let Some(done) = current.take() {
        sequences.push(finish(done)?);
    }
    Dataset::new(role, sequences)
}
