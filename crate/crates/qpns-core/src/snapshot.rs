//! On-disk formats: binary field snapshots, trajectory dumps with a JSON
//! sidecar, particle-measure directories, and pullback-table directories.
//!
//! A field snapshot is a 12-byte header (the magic bytes "QPNS", a format
//! version, and the truncation radius N, the integers little-endian u32)
//! followed by the half-plane coefficients in canonical lattice order as
//! little-endian f64 (re, im) pairs. Directory formats pair snapshots with
//! a JSON manifest; JSON floats use shortest round-trip printing, so every
//! save and load below restores bit-identical values.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::attractor::PullbackSolution;
use crate::error::CoreError;
use crate::forcing::TorusPoint;
use crate::integrator::{Sample, Trajectory};
use crate::spectral::{ModeLattice, SpectralVorticity};
use crate::transport::EmpiricalMeasure;
use crate::Result;

pub const MAGIC: [u8; 4] = *b"QPNS";
pub const FORMAT_VERSION: u32 = 1;

/// Guard against allocating a lattice from a corrupt header.
const MAX_RADIUS: u32 = 1024;

fn format_err(detail: impl Into<String>) -> CoreError {
    CoreError::Format {
        detail: detail.into(),
    }
}

fn open_named(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| format_err(format!("{}: {e}", path.display())))
}

fn create_named(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| format_err(format!("{}: {e}", path.display())))
}

/// Write one field snapshot to a stream.
pub fn write_field(out: &mut impl Write, field: &SpectralVorticity) -> Result<()> {
    out.write_all(&MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&field.lattice().radius().to_le_bytes())?;
    for c in field.coeffs() {
        out.write_all(&c.re.to_le_bytes())?;
        out.write_all(&c.im.to_le_bytes())?;
    }
    Ok(())
}

/// Read one field snapshot from a stream. The caller may pass a lattice to
/// share; a header radius differing from it is a mismatch error. Without
/// one, the lattice is built from the header.
pub fn read_field(
    input: &mut impl Read,
    lattice: Option<&Arc<ModeLattice>>,
) -> Result<SpectralVorticity> {
    let mut header = [0u8; 12];
    input.read_exact(&mut header).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            format_err("truncated snapshot header")
        } else {
            CoreError::Io(e)
        }
    })?;
    if header[..4] != MAGIC {
        return Err(format_err("bad magic bytes"));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(format_err(format!(
            "unsupported snapshot version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let radius = u32::from_le_bytes(header[8..12].try_into().expect("4 bytes"));
    if radius == 0 || radius > MAX_RADIUS {
        return Err(format_err(format!("implausible truncation radius {radius}")));
    }
    let lattice = match lattice {
        Some(l) => {
            if l.radius() != radius {
                return Err(CoreError::LatticeMismatch {
                    left: l.radius(),
                    right: radius,
                });
            }
            l.clone()
        }
        None => ModeLattice::new(radius),
    };
    let mut payload = vec![0u8; 16 * lattice.half_count()];
    input.read_exact(&mut payload).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            format_err("truncated snapshot payload")
        } else {
            CoreError::Io(e)
        }
    })?;
    let mut field = SpectralVorticity::zeros(&lattice);
    for (i, chunk) in payload.chunks_exact(16).enumerate() {
        let re = f64::from_le_bytes(chunk[..8].try_into().expect("8 bytes"));
        let im = f64::from_le_bytes(chunk[8..].try_into().expect("8 bytes"));
        if !(re.is_finite() && im.is_finite()) {
            return Err(format_err(format!("non-finite coefficient at index {i}")));
        }
        field.coeffs_mut()[i] = num_complex::Complex64::new(re, im);
    }
    Ok(field)
}

/// Save one field snapshot as a file.
pub fn save_field(path: &Path, field: &SpectralVorticity) -> Result<()> {
    let mut out = BufWriter::new(create_named(path)?);
    write_field(&mut out, field)?;
    out.flush()?;
    Ok(())
}

/// Load one field snapshot from a file holding exactly one record.
pub fn load_field(path: &Path) -> Result<SpectralVorticity> {
    let mut input = BufReader::new(open_named(path)?);
    let field = read_field(&mut input, None)?;
    let mut tail = [0u8; 1];
    match input.read(&mut tail)? {
        0 => Ok(field),
        _ => Err(format_err(format!(
            "{}: trailing bytes after snapshot",
            path.display()
        ))),
    }
}

/// Sidecar metadata of a trajectory dump: the run window, the step size,
/// the start angle, the seeds, and one entry per stored frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectorySidecar {
    pub s: f64,
    pub t: f64,
    pub dt: f64,
    pub h: Vec<f64>,
    pub seed: u64,
    pub config_hash: u64,
    pub enstrophy_integral: f64,
    pub frames: Vec<FrameMeta>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameMeta {
    pub t: f64,
    pub h: Vec<f64>,
    pub file: String,
}

/// Trajectory dump read back from disk.
#[derive(Debug, Clone)]
pub struct SavedTrajectory {
    pub trajectory: Trajectory,
    pub seed: u64,
    pub config_hash: u64,
}

/// Dump a trajectory as one snapshot per sampled frame plus
/// `trajectory.json`.
pub fn save_trajectory(
    dir: &Path,
    trajectory: &Trajectory,
    seed: u64,
    config_hash: u64,
) -> Result<()> {
    if trajectory.samples.is_empty() {
        return Err(CoreError::invalid("cannot dump a trajectory with no samples"));
    }
    fs::create_dir_all(dir)?;
    let mut frames = Vec::with_capacity(trajectory.samples.len());
    for (i, sample) in trajectory.samples.iter().enumerate() {
        let name = format!("frame_{i:05}.qpns");
        save_field(&dir.join(&name), &sample.w)?;
        frames.push(FrameMeta {
            t: sample.t,
            h: sample.h.components().to_vec(),
            file: name,
        });
    }
    let sidecar = TrajectorySidecar {
        s: trajectory.s,
        t: trajectory.samples.last().expect("nonempty").t,
        dt: trajectory.dt,
        h: trajectory.h_start.components().to_vec(),
        seed,
        config_hash,
        enstrophy_integral: trajectory.enstrophy_integral,
        frames,
    };
    write_json(&dir.join("trajectory.json"), &sidecar)
}

/// Load a trajectory dump written by `save_trajectory`.
pub fn load_trajectory(dir: &Path) -> Result<SavedTrajectory> {
    let sidecar: TrajectorySidecar = read_json(&dir.join("trajectory.json"))?;
    if sidecar.frames.is_empty() {
        return Err(format_err("trajectory sidecar lists no frames"));
    }
    let mut lattice: Option<Arc<ModeLattice>> = None;
    let mut samples = Vec::with_capacity(sidecar.frames.len());
    for frame in &sidecar.frames {
        if frame.h.len() != sidecar.h.len() {
            return Err(format_err("frame angle dimension differs from start angle"));
        }
        let mut input = BufReader::new(open_named(&dir.join(&frame.file))?);
        let w = read_field(&mut input, lattice.as_ref())?;
        lattice.get_or_insert_with(|| w.lattice().clone());
        samples.push(Sample {
            t: frame.t,
            h: TorusPoint::new(frame.h.clone()),
            w,
        });
    }
    Ok(SavedTrajectory {
        trajectory: Trajectory {
            s: sidecar.s,
            dt: sidecar.dt,
            h_start: TorusPoint::new(sidecar.h),
            samples,
            enstrophy_integral: sidecar.enstrophy_integral,
        },
        seed: sidecar.seed,
        config_hash: sidecar.config_hash,
    })
}

/// Manifest of a particle-measure directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeasureManifest {
    pub count: usize,
    pub lattice: u32,
    pub weights: Vec<f64>,
    pub particles_file: String,
    pub config_hash: u64,
}

/// Save a particle measure as `measure.json` plus one packed snapshot file
/// holding the particles back to back.
pub fn save_measure(dir: &Path, measure: &EmpiricalMeasure, config_hash: u64) -> Result<()> {
    fs::create_dir_all(dir)?;
    let particles_file = "particles.qpns".to_string();
    let mut out = BufWriter::new(create_named(&dir.join(&particles_file))?);
    for particle in measure.particles() {
        write_field(&mut out, particle)?;
    }
    out.flush()?;
    let manifest = MeasureManifest {
        count: measure.len(),
        lattice: measure.particles()[0].lattice().radius(),
        weights: measure.weights().to_vec(),
        particles_file,
        config_hash,
    };
    write_json(&dir.join("measure.json"), &manifest)
}

/// Load a particle measure written by `save_measure`.
pub fn load_measure(dir: &Path) -> Result<(EmpiricalMeasure, u64)> {
    let manifest: MeasureManifest = read_json(&dir.join("measure.json"))?;
    if manifest.count == 0 || manifest.weights.len() != manifest.count {
        return Err(format_err(
            "measure manifest count and weight list disagree",
        ));
    }
    let lattice = ModeLattice::new(manifest.lattice);
    let mut input = BufReader::new(open_named(&dir.join(&manifest.particles_file))?);
    let mut particles = Vec::with_capacity(manifest.count);
    for _ in 0..manifest.count {
        particles.push(read_field(&mut input, Some(&lattice))?);
    }
    let mut tail = [0u8; 1];
    if input.read(&mut tail)? != 0 {
        return Err(format_err("trailing bytes after packed particles"));
    }
    let measure = EmpiricalMeasure::new(particles, manifest.weights)?;
    Ok((measure, manifest.config_hash))
}

/// Manifest of a pullback-table directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PullbackManifest {
    pub lattice: u32,
    pub h_points: Vec<Vec<f64>>,
    pub trajectories: Vec<u64>,
    pub depths: Vec<f64>,
    pub deltas: Vec<Vec<f64>>,
    pub converged: Vec<bool>,
    pub tolerance: f64,
    pub config_hash: u64,
    /// Snapshot filenames, row-major over (grid point, path).
    pub states: Vec<String>,
}

/// Save a pullback table as `pullback.json` plus one snapshot per
/// (grid point, path) state.
pub fn save_pullback(dir: &Path, solution: &PullbackSolution, config_hash: u64) -> Result<()> {
    fs::create_dir_all(dir)?;
    let n_traj = solution.trajectories.len();
    let mut states = Vec::with_capacity(solution.states.len());
    for (i, state) in solution.states.iter().enumerate() {
        let name = format!("state_h{:03}_w{:03}.qpns", i / n_traj, i % n_traj);
        save_field(&dir.join(&name), state)?;
        states.push(name);
    }
    let manifest = PullbackManifest {
        lattice: solution.states[0].lattice().radius(),
        h_points: solution
            .h_points
            .iter()
            .map(|h| h.components().to_vec())
            .collect(),
        trajectories: solution.trajectories.clone(),
        depths: solution.depths.clone(),
        deltas: solution.deltas.clone(),
        converged: solution.converged.clone(),
        tolerance: solution.tolerance,
        config_hash,
        states,
    };
    write_json(&dir.join("pullback.json"), &manifest)
}

/// Load a pullback table written by `save_pullback`, checking that the
/// manifest and the snapshot set agree.
pub fn load_pullback(dir: &Path) -> Result<(PullbackSolution, u64)> {
    let manifest: PullbackManifest = read_json(&dir.join("pullback.json"))?;
    let jobs = manifest.h_points.len() * manifest.trajectories.len();
    if jobs == 0 || manifest.states.len() != jobs {
        return Err(format_err(format!(
            "pullback manifest names {} states for {} jobs",
            manifest.states.len(),
            jobs
        )));
    }
    if manifest.deltas.len() != jobs || manifest.converged.len() != jobs {
        return Err(format_err("pullback manifest gap tables do not match jobs"));
    }
    if manifest.depths.is_empty() {
        return Err(format_err("pullback manifest lists no depths"));
    }
    let lattice = ModeLattice::new(manifest.lattice);
    let mut states = Vec::with_capacity(jobs);
    for name in &manifest.states {
        states.push(load_field_on(&dir.join(name), &lattice)?);
    }
    let solution = PullbackSolution {
        h_points: manifest.h_points.into_iter().map(TorusPoint::new).collect(),
        trajectories: manifest.trajectories,
        states,
        depths: manifest.depths,
        deltas: manifest.deltas,
        converged: manifest.converged,
        tolerance: manifest.tolerance,
    };
    Ok((solution, manifest.config_hash))
}

fn load_field_on(path: &Path, lattice: &Arc<ModeLattice>) -> Result<SpectralVorticity> {
    let mut input = BufReader::new(open_named(path)?);
    let field = read_field(&mut input, Some(lattice))?;
    let mut tail = [0u8; 1];
    match input.read(&mut tail)? {
        0 => Ok(field),
        _ => Err(format_err(format!(
            "{}: trailing bytes after snapshot",
            path.display()
        ))),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = BufWriter::new(create_named(path)?);
    serde_json::to_writer_pretty(&mut out, value)
        .map_err(|e| format_err(format!("{}: {e}", path.display())))?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let input = BufReader::new(open_named(path)?);
    serde_json::from_reader(input).map_err(|e| format_err(format!("{}: {e}", path.display())))
}
