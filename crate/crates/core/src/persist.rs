//! On-disk formats: the binary dataset, grid checkpoints and CSV outputs.
//!
//! Dataset layout (little-endian): `LD3D`, version `u32 = 1`, `d u32`,
//! `count u32`, schedule fingerprint `u64`, seed `u64`, then `count` records
//! of `3 * d` f64 values in the order `x_T, x', y`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::discretize::Discretization;
use crate::error::{Error, Result};
use crate::ld3::{Dataset, TrainPair, TrainReport};
use crate::schedule::NoiseSchedule;
use crate::solvers::{validate_grid, SolverFamily, SolverSpec};

pub const DATASET_MAGIC: &[u8; 4] = b"LD3D";
pub const DATASET_VERSION: u32 = 1;
pub const DATASET_HEADER_BYTES: usize = 32;

pub fn dataset_bytes(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(DATASET_HEADER_BYTES + ds.pairs.len() * 3 * ds.d * 8);
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(ds.d as u32).to_le_bytes());
    out.extend_from_slice(&(ds.pairs.len() as u32).to_le_bytes());
    out.extend_from_slice(&ds.schedule_hash.to_le_bytes());
    out.extend_from_slice(&ds.seed.to_le_bytes());
    for p in &ds.pairs {
        for v in p.x_t.iter().chain(&p.x_prime).chain(&p.y) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn take<const N: usize>(bytes: &[u8], at: &mut usize) -> Result<[u8; N]> {
    let end = *at + N;
    let chunk = bytes
        .get(*at..end)
        .ok_or_else(|| Error::Format(format!("truncated dataset at byte {}", *at)))?;
    *at = end;
    Ok(chunk.try_into().expect("slice length checked"))
}

pub fn dataset_from_bytes(bytes: &[u8]) -> Result<Dataset> {
    let mut at = 0;
    if &take::<4>(bytes, &mut at)? != DATASET_MAGIC {
        return Err(Error::Format("not a dataset file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(bytes, &mut at)?);
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let d = u32::from_le_bytes(take(bytes, &mut at)?) as usize;
    let count = u32::from_le_bytes(take(bytes, &mut at)?) as usize;
    let schedule_hash = u64::from_le_bytes(take(bytes, &mut at)?);
    let seed = u64::from_le_bytes(take(bytes, &mut at)?);
    let expected = DATASET_HEADER_BYTES + count * 3 * d * 8;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "dataset with d={d}, count={count} should be {expected} bytes, file has {}",
            bytes.len()
        )));
    }
    let read_vec = |at: &mut usize| -> Result<Vec<f64>> {
        (0..d).map(|_| Ok(f64::from_le_bytes(take(bytes, at)?))).collect()
    };
    let mut pairs = Vec::with_capacity(count);
    for _ in 0..count {
        let x_t = read_vec(&mut at)?;
        let x_prime = read_vec(&mut at)?;
        let y = read_vec(&mut at)?;
        pairs.push(TrainPair { x_t, x_prime, y });
    }
    Ok(Dataset {
        d,
        seed,
        schedule_hash,
        pairs,
    })
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    fs::write(path, dataset_bytes(ds))?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    dataset_from_bytes(&fs::read(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverTag {
    pub family: String,
    pub order: usize,
}

/// Learned grid as written to `checkpoint.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCheckpoint {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "T")]
    pub t_max: f64,
    pub t_min: f64,
    pub xi: Vec<f64>,
    pub xi_c: Vec<f64>,
    pub times: Vec<f64>,
    pub times_c: Vec<f64>,
    pub solver: SolverTag,
}

impl GridCheckpoint {
    pub fn new(disc: &Discretization, spec: SolverSpec) -> Self {
        GridCheckpoint {
            n: disc.steps(),
            t_max: disc.t_max,
            t_min: disc.t_min,
            xi: disc.xi.clone(),
            xi_c: disc.xi_c.clone(),
            times: disc.tau(),
            times_c: disc.tau_c(),
            solver: SolverTag {
                family: spec.family.to_string(),
                order: spec.order,
            },
        }
    }

    pub fn solver_spec(&self) -> Result<SolverSpec> {
        let family: SolverFamily = self.solver.family.parse()?;
        SolverSpec::new(family, self.solver.order, self.n)
    }

    /// Rebuilds the grid after checking it against `sched`.
    pub fn discretization(&self, sched: &NoiseSchedule) -> Result<Discretization> {
        if self.t_max != sched.t_max || self.t_min != sched.t_min {
            return Err(Error::config(
                "schedule",
                format!(
                    "checkpoint spans [{}, {}] but the schedule spans [{}, {}]",
                    self.t_min, self.t_max, sched.t_min, sched.t_max
                ),
            ));
        }
        if self.xi.len() != self.n + 1 {
            return Err(Error::Format(format!("checkpoint N={} but {} logits", self.n, self.xi.len())));
        }
        validate_grid(sched, self.n, &self.times, &self.times_c)?;
        let disc = Discretization::new(self.xi.clone(), self.xi_c.clone(), sched)?;
        let (times, times_c) = (disc.tau(), disc.tau_c());
        let off = times
            .iter()
            .chain(&times_c)
            .zip(self.times.iter().chain(&self.times_c))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if off > 1e-9 * sched.t_max {
            return Err(Error::Format(format!("stored times disagree with the logits by {off:e}")));
        }
        Ok(disc)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

pub const METRICS_HEADER: &str = "iter,epoch,phase,train_loss,val_loss,lr_xi,lr_xic,wall_s";

/// One row per iteration, then one row per validation pass (including the
/// pass before training, epoch 0). Epoch rows carry the number of
/// iterations completed so far in `iter`.
pub fn metrics_csv(report: &TrainReport) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    let mut iters = report.iters.iter().peekable();
    let mut done = 0;
    for e in &report.epochs {
        while let Some(it) = iters.next_if(|it| it.epoch <= e.epoch) {
            let _ = writeln!(
                s,
                "{},{},{},{},,{},{},",
                it.iter, it.epoch, it.phase, it.train_loss, it.lr_xi, it.lr_xi_c
            );
            done += 1;
        }
        let wall = e.wall_s.map(|w| w.to_string()).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},,{},{},{},{}",
            done, e.epoch, e.phase, e.val_loss, e.lr_xi, e.lr_xi_c, wall
        );
    }
    s
}

pub fn samples_csv(samples: &[Vec<f64>]) -> String {
    let d = samples.first().map_or(0, Vec::len);
    let mut s = (0..d).map(|j| format!("x{j}")).collect::<Vec<_>>().join(",");
    s.push('\n');
    for row in samples {
        s.push_str(&row.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","));
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Dataset {
        Dataset {
            d: 2,
            seed: 9,
            schedule_hash: 0xdead_beef,
            pairs: vec![
                TrainPair {
                    x_t: vec![1.0, -2.0],
                    x_prime: vec![1.5, f64::MIN_POSITIVE],
                    y: vec![0.1 + 0.2, -0.0],
                },
                TrainPair {
                    x_t: vec![3.0, 4.0],
                    x_prime: vec![3.0, 4.0],
                    y: vec![1e-300, 7.0],
                },
            ],
        }
    }

    #[test]
    fn dataset_bit_exact_round_trip() {
        let ds = toy();
        let bytes = dataset_bytes(&ds);
        assert_eq!(bytes.len(), 32 + 2 * 3 * 2 * 8);
        assert_eq!(&bytes[..4], b"LD3D");
        let back = dataset_from_bytes(&bytes).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.pairs[0].y[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn dataset_rejects_bad_files() {
        let bytes = dataset_bytes(&toy());
        assert!(dataset_from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(dataset_from_bytes(&bad).is_err());
        let mut bad = bytes;
        bad[4] = 2;
        assert!(dataset_from_bytes(&bad).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_validation() {
        let sched = NoiseSchedule::ve_edm();
        let mut disc = Discretization::new(vec![0.3, -0.2, 0.5, 0.1, 0.0], vec![0.0; 5], &sched).unwrap();
        disc.xi_c[1] = 0.25;
        let spec = SolverSpec::new(SolverFamily::Ipndm, 3, 4).unwrap();
        let ck = GridCheckpoint::new(&disc, spec);
        let json = ck.to_json().unwrap();
        assert!(json.contains("\"N\": 4") && json.contains("\"T\": 80.0"));
        let back = GridCheckpoint::from_json(&json).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.discretization(&sched).unwrap(), disc);
        assert_eq!(back.solver_spec().unwrap(), spec);

        let mut broken = ck.clone();
        broken.times.swap(1, 2);
        assert!(broken.discretization(&sched).is_err());
        assert!(ck.discretization(&NoiseSchedule::vp_linear()).is_err());
        let mut broken = ck;
        broken.solver.family = "heun".into();
        assert!(broken.solver_spec().is_err());
    }

    #[test]
    fn samples_csv_shape() {
        let s = samples_csv(&[vec![1.0, 2.5], vec![-0.5, 0.0]]);
        assert_eq!(s, "x0,x1\n1,2.5\n-0.5,0\n");
    }
}
