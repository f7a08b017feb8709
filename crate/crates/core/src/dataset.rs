//! Trajectory ingestion, min–max scaling, contiguous splitting and the
//! NRMSE metric shared by the identification, control and imitation code.
//!
//! One row of a [`Trajectory`] is one engine cycle.

use std::collections::HashMap;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column names of the trajectory CSV, in canonical write order.
pub const TRAJECTORY_COLUMNS: [&str; 8] = [
    "cycle",
    "fq_mg",
    "soi_cad",
    "vgt_pct",
    "tout_nm",
    "pman_bar",
    "nox_ppm",
    "speed_rpm",
];

/// Column names of an input-only CSV (trajectory schema minus the states).
pub const INPUT_COLUMNS: [&str; 5] = ["cycle", "fq_mg", "soi_cad", "vgt_pct", "speed_rpm"];

/// Time-indexed record of engine inputs, states and speed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub cycle: Vec<i64>,
    /// Fuel quantity, mg/cycle.
    pub fq: Vec<f64>,
    /// Start of main injection, CAD aTDC.
    pub soi: Vec<f64>,
    /// VGT vane position, percent.
    pub vgt: Vec<f64>,
    /// Output torque, N·m.
    pub t_out: Vec<f64>,
    /// Intake manifold pressure, bar.
    pub p_man: Vec<f64>,
    /// Engine-out NOx, ppm.
    pub nox: Vec<f64>,
    pub speed: Vec<f64>,
}

impl Trajectory {
    /// Builds a trajectory and checks its invariants.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        cycle: Vec<i64>,
        fq: Vec<f64>,
        soi: Vec<f64>,
        vgt: Vec<f64>,
        t_out: Vec<f64>,
        p_man: Vec<f64>,
        nox: Vec<f64>,
        speed: Vec<f64>,
    ) -> Result<Self> {
        let traj = Trajectory {
            cycle,
            fq,
            soi,
            vgt,
            t_out,
            p_man,
            nox,
            speed,
        };
        traj.validate()?;
        Ok(traj)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.cycle.len();
        for (name, col) in TRAJECTORY_COLUMNS[1..].iter().zip(self.value_columns()) {
            if col.len() != n {
                return Err(Error::LengthMismatch {
                    what: name,
                    left: n,
                    right: col.len(),
                });
            }
        }
        if n < 2 {
            return Err(Error::invalid(format!(
                "trajectory needs at least 2 rows, got {n}"
            )));
        }
        for (k, w) in self.cycle.windows(2).enumerate() {
            if w[1] != w[0] + 1 {
                return Err(Error::invalid(format!(
                    "cycle index not consecutive at row {}",
                    k + 2
                )));
            }
        }
        for (name, col) in TRAJECTORY_COLUMNS[1..].iter().zip(self.value_columns()) {
            if let Some(row) = col.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    row: row + 1,
                    column: name.to_string(),
                });
            }
        }
        Ok(())
    }

    fn value_columns(&self) -> [&[f64]; 7] {
        [
            &self.fq,
            &self.soi,
            &self.vgt,
            &self.t_out,
            &self.p_man,
            &self.nox,
            &self.speed,
        ]
    }

    pub fn len(&self) -> usize {
        self.cycle.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cycle.is_empty()
    }

    /// Input vector `(FQ, SOI, VGT)` at row `k`.
    pub fn input(&self, k: usize) -> [f64; 3] {
        [self.fq[k], self.soi[k], self.vgt[k]]
    }

    /// State vector `(T_out, P_man, NOx)` at row `k`.
    pub fn state(&self, k: usize) -> [f64; 3] {
        [self.t_out[k], self.p_man[k], self.nox[k]]
    }

    /// Rows in `range`, without re-validation (a sub-range of a valid
    /// trajectory is valid as long as it keeps two rows).
    pub fn slice(&self, range: Range<usize>) -> Trajectory {
        Trajectory {
            cycle: self.cycle[range.clone()].to_vec(),
            fq: self.fq[range.clone()].to_vec(),
            soi: self.soi[range.clone()].to_vec(),
            vgt: self.vgt[range.clone()].to_vec(),
            t_out: self.t_out[range.clone()].to_vec(),
            p_man: self.p_man[range.clone()].to_vec(),
            nox: self.nox[range.clone()].to_vec(),
            speed: self.speed[range].to_vec(),
        }
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(std::io::BufWriter::new(file))
            .map_err(|e| Error::io(path, e))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", TRAJECTORY_COLUMNS.join(","))?;
        for k in 0..self.len() {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                self.cycle[k],
                self.fq[k],
                self.soi[k],
                self.vgt[k],
                self.t_out[k],
                self.p_man[k],
                self.nox[k],
                self.speed[k]
            )?;
        }
        w.flush()
    }
}

/// Reads a header-matched CSV, returning the requested columns in order.
/// Extra columns are ignored.
pub(crate) fn read_columns(path: &Path, names: &[&str]) -> Result<Vec<Vec<String>>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(std::io::BufReader::new(file));
    let header: HashMap<String, usize> = rdr
        .headers()?
        .iter()
        .enumerate()
        .map(|(i, h)| (h.to_string(), i))
        .collect();
    let idx = names
        .iter()
        .map(|n| {
            header
                .get(*n)
                .copied()
                .ok_or_else(|| Error::MissingColumn(n.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut cols = vec![Vec::new(); names.len()];
    for rec in rdr.records() {
        let rec = rec.map_err(|e| match e.kind() {
            csv::ErrorKind::UnequalLengths { expected_len, len, .. } => Error::LengthMismatch {
                what: "csv row field count",
                left: *expected_len as usize,
                right: *len as usize,
            },
            _ => Error::Csv(e),
        })?;
        for (c, &i) in idx.iter().enumerate() {
            cols[c].push(rec[i].to_string());
        }
    }
    Ok(cols)
}

pub(crate) fn parse_f64_column(name: &str, cells: &[String]) -> Result<Vec<f64>> {
    cells
        .iter()
        .enumerate()
        .map(|(row, s)| {
            let v: f64 = s.parse().map_err(|_| Error::NonNumeric {
                row: row + 1,
                column: name.to_string(),
                value: s.clone(),
            })?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::NonFinite {
                    row: row + 1,
                    column: name.to_string(),
                })
            }
        })
        .collect()
}

pub(crate) fn parse_cycle_column(cells: &[String]) -> Result<Vec<i64>> {
    cells
        .iter()
        .enumerate()
        .map(|(row, s)| {
            s.parse::<i64>().map_err(|_| Error::NonNumeric {
                row: row + 1,
                column: "cycle".to_string(),
                value: s.clone(),
            })
        })
        .collect()
}

/// Loads a trajectory CSV. Columns are matched by header name, so their
/// order in the file does not matter.
pub fn load_trajectory(path: impl AsRef<Path>) -> Result<Trajectory> {
    let path = path.as_ref();
    let cols = read_columns(path, &TRAJECTORY_COLUMNS)?;
    let cycle = parse_cycle_column(&cols[0])?;
    let mut values = Vec::with_capacity(7);
    for (name, cells) in TRAJECTORY_COLUMNS[1..].iter().zip(&cols[1..]) {
        values.push(parse_f64_column(name, cells)?);
    }
    let mut it = values.into_iter();
    let mut next = || it.next().unwrap();
    Trajectory::new(
        cycle,
        next(),
        next(),
        next(),
        next(),
        next(),
        next(),
        next(),
    )
}

/// Input schedule for open-loop plant simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct InputProfile {
    pub cycle: Vec<i64>,
    pub fq: Vec<f64>,
    pub soi: Vec<f64>,
    pub vgt: Vec<f64>,
    pub speed: Vec<f64>,
}

impl InputProfile {
    pub fn len(&self) -> usize {
        self.cycle.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cycle.is_empty()
    }
}

pub fn load_input_profile(path: impl AsRef<Path>) -> Result<InputProfile> {
    let path = path.as_ref();
    let cols = read_columns(path, &INPUT_COLUMNS)?;
    Ok(InputProfile {
        cycle: parse_cycle_column(&cols[0])?,
        fq: parse_f64_column(INPUT_COLUMNS[1], &cols[1])?,
        soi: parse_f64_column(INPUT_COLUMNS[2], &cols[2])?,
        vgt: parse_f64_column(INPUT_COLUMNS[3], &cols[3])?,
        speed: parse_f64_column(INPUT_COLUMNS[4], &cols[4])?,
    })
}

/// Contiguous prefix/suffix split of a time series. The first part holds
/// `round(len * train_fraction)` rows.
pub fn split(traj: &Trajectory, train_fraction: f64) -> Result<(Trajectory, Trajectory)> {
    let n_train = split_point(traj.len(), train_fraction)?;
    Ok((traj.slice(0..n_train), traj.slice(n_train..traj.len())))
}

/// Number of leading rows that go to the first part of a split.
pub fn split_point(len: usize, train_fraction: f64) -> Result<usize> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let n = (len as f64 * train_fraction).round() as usize;
    Ok(n.min(len))
}

/// Root-mean-square error normalized by the range of `measured`, in percent.
pub fn nrmse(predicted: &[f64], measured: &[f64]) -> Result<f64> {
    let (lo, hi) = min_max(measured);
    nrmse_by(predicted, measured, hi - lo)
}

/// Root-mean-square error normalized by a given positive `range`, in percent.
pub fn nrmse_by(predicted: &[f64], measured: &[f64], range: f64) -> Result<f64> {
    if predicted.len() != measured.len() {
        return Err(Error::LengthMismatch {
            what: "nrmse series",
            left: predicted.len(),
            right: measured.len(),
        });
    }
    if measured.len() < 2 {
        return Err(Error::invalid("nrmse needs at least 2 samples"));
    }
    if !(range > 0.0) {
        return Err(Error::ZeroRange);
    }
    let mse = predicted
        .iter()
        .zip(measured)
        .map(|(p, m)| (p - m) * (p - m))
        .sum::<f64>()
        / measured.len() as f64;
    Ok(100.0 * mse.sqrt() / range)
}

pub(crate) fn min_max(xs: &[f64]) -> (f64, f64) {
    xs.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        })
}

/// Per-channel min–max scaling to `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub offset: Vec<f64>,
    pub span: Vec<f64>,
}

impl Scaler {
    pub fn new(offset: Vec<f64>, span: Vec<f64>) -> Result<Self> {
        if offset.len() != span.len() {
            return Err(Error::LengthMismatch {
                what: "scaler offset/span",
                left: offset.len(),
                right: span.len(),
            });
        }
        if let Some(ch) = span.iter().position(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::invalid(format!(
                "scaler channel {ch} has non-positive span"
            )));
        }
        Ok(Scaler { offset, span })
    }

    /// Identity scaling for `channels` channels.
    pub fn identity(channels: usize) -> Self {
        Scaler {
            offset: vec![0.0; channels],
            span: vec![1.0; channels],
        }
    }

    /// Fits offset = min and span = max − min for each column.
    pub fn fit(columns: &[&[f64]]) -> Result<Self> {
        let (offset, span) = columns
            .iter()
            .map(|c| {
                let (lo, hi) = min_max(c);
                (lo, hi - lo)
            })
            .unzip();
        Scaler::new(offset, span)
    }

    pub fn channels(&self) -> usize {
        self.offset.len()
    }

    #[inline]
    pub fn scale(&self, ch: usize, v: f64) -> f64 {
        (v - self.offset[ch]) / self.span[ch]
    }

    #[inline]
    pub fn unscale(&self, ch: usize, v: f64) -> f64 {
        v * self.span[ch] + self.offset[ch]
    }

    pub fn scale_slice(&self, v: &[f64]) -> Vec<f64> {
        v.iter().enumerate().map(|(i, &x)| self.scale(i, x)).collect()
    }

    pub fn unscale_slice(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .enumerate()
            .map(|(i, &x)| self.unscale(i, x))
            .collect()
    }

    pub fn scale3(&self, v: [f64; 3]) -> [f64; 3] {
        [self.scale(0, v[0]), self.scale(1, v[1]), self.scale(2, v[2])]
    }

    pub fn unscale3(&self, v: [f64; 3]) -> [f64; 3] {
        [
            self.unscale(0, v[0]),
            self.unscale(1, v[1]),
            self.unscale(2, v[2]),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn ramp(n: usize) -> Trajectory {
        let v: Vec<f64> = (0..n).map(|k| k as f64).collect();
        Trajectory::new(
            (0..n as i64).collect(),
            v.clone(),
            v.clone(),
            v.clone(),
            v.clone(),
            v.clone(),
            v.clone(),
            vec![1500.0; n],
        )
        .unwrap()
    }

    #[test]
    fn loads_three_rows_in_any_column_order() {
        let f = write_tmp(
            "nox_ppm,cycle,fq_mg,soi_cad,vgt_pct,tout_nm,pman_bar,speed_rpm\n\
             300,0,40,3,85,200,1.8,1500\n\
             310,1,41,3,85,201,1.8,1500\n\
             320,2,42,3,85,202,1.8,1500\n",
        );
        let t = load_trajectory(f.path()).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.nox, vec![300.0, 310.0, 320.0]);
        assert_eq!(t.fq[2], 42.0);
    }

    #[test]
    fn missing_column_is_named() {
        let f = write_tmp(
            "cycle,fq_mg,soi_cad,vgt_pct,tout_nm,pman_bar,speed_rpm\n0,1,1,1,1,1,1\n1,1,1,1,1,1,1\n",
        );
        match load_trajectory(f.path()) {
            Err(Error::MissingColumn(c)) => assert_eq!(c, "nox_ppm"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn nan_cell_reports_row() {
        let f = write_tmp(
            "cycle,fq_mg,soi_cad,vgt_pct,tout_nm,pman_bar,nox_ppm,speed_rpm\n\
             0,1,1,1,1,1,1,1\n1,1,1,1,NaN,1,1,1\n2,1,1,1,1,1,1,1\n",
        );
        match load_trajectory(f.path()) {
            Err(Error::NonFinite { row, column }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "tout_nm");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_numeric_cell_is_rejected() {
        let f = write_tmp(
            "cycle,fq_mg,soi_cad,vgt_pct,tout_nm,pman_bar,nox_ppm,speed_rpm\n\
             0,1,1,1,1,1,1,1\n1,1,abc,1,1,1,1,1\n",
        );
        assert!(matches!(
            load_trajectory(f.path()),
            Err(Error::NonNumeric { row: 2, .. })
        ));
    }

    #[test]
    fn csv_round_trip() {
        let t = ramp(5);
        let f = tempfile::NamedTempFile::new().unwrap();
        t.write_csv(f.path()).unwrap();
        assert_eq!(load_trajectory(f.path()).unwrap(), t);
    }

    #[test]
    fn split_lengths() {
        let (a, b) = split(&ramp(2000), 0.8).unwrap();
        assert_eq!((a.len(), b.len()), (1600, 400));
        let (a, b) = split(&ramp(10), 0.5).unwrap();
        assert_eq!((a.len(), b.len()), (5, 5));
        assert!(split(&ramp(10), 1.0).is_err());
        assert!(split(&ramp(10), 0.0).is_err());
    }

    #[test]
    fn nrmse_examples() {
        assert_eq!(nrmse(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        // sqrt((0.01 + 0.01) / 2) / 1 = 0.1
        let v = nrmse(&[0.1, 0.9], &[0.0, 1.0]).unwrap();
        assert!((v - 10.0).abs() < 1e-12);
        assert!(matches!(nrmse(&[1.0, 2.0], &[3.0, 3.0]), Err(Error::ZeroRange)));
        assert!(nrmse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn scaler_rejects_flat_channel() {
        assert!(Scaler::fit(&[&[1.0, 1.0]]).is_err());
    }

    proptest! {
        #[test]
        fn split_is_lossless(n in 2usize..300, frac in 0.05f64..0.95) {
            let t = ramp(n);
            let (a, b) = split(&t, frac).unwrap();
            prop_assert_eq!(a.len() + b.len(), n);
            let mut fq = a.fq.clone();
            fq.extend_from_slice(&b.fq);
            prop_assert_eq!(fq, t.fq);
            let mut cyc = a.cycle.clone();
            cyc.extend_from_slice(&b.cycle);
            prop_assert_eq!(cyc, t.cycle);
        }

        #[test]
        fn nrmse_shift_and_scale_invariant(
            m in prop::collection::vec(-100.0f64..100.0, 2..40),
            noise in prop::collection::vec(-5.0f64..5.0, 40),
            shift in -1e3f64..1e3,
            scale in 0.01f64..100.0,
        ) {
            let (lo, hi) = min_max(&m);
            prop_assume!(hi - lo > 1e-3);
            let p: Vec<f64> = m.iter().zip(&noise).map(|(a, b)| a + b).collect();
            let base = nrmse(&p, &m).unwrap();
            let ps: Vec<f64> = p.iter().map(|v| v + shift).collect();
            let ms: Vec<f64> = m.iter().map(|v| v + shift).collect();
            prop_assert!((nrmse(&ps, &ms).unwrap() - base).abs() <= 1e-8 * (1.0 + base));
            let pk: Vec<f64> = p.iter().map(|v| v * scale).collect();
            let mk: Vec<f64> = m.iter().map(|v| v * scale).collect();
            prop_assert!((nrmse(&pk, &mk).unwrap() - base).abs() <= 1e-9 * (1.0 + base));
            prop_assert!(base >= 0.0);
        }

        #[test]
        fn scaler_round_trip(cols in prop::collection::vec(prop::collection::vec(-1e4f64..1e4, 3..30), 1..6)) {
            let n = cols.iter().map(Vec::len).min().unwrap();
            let cols: Vec<Vec<f64>> = cols.into_iter().map(|c| c[..n].to_vec()).collect();
            let refs: Vec<&[f64]> = cols.iter().map(Vec::as_slice).collect();
            prop_assume!(refs.iter().all(|c| { let (lo, hi) = min_max(c); hi - lo > 1e-6 }));
            let s = Scaler::fit(&refs).unwrap();
            for k in 0..n {
                let row: Vec<f64> = cols.iter().map(|c| c[k]).collect();
                let back = s.unscale_slice(&s.scale_slice(&row));
                for (c, (a, b)) in row.iter().zip(&back).enumerate() {
                    prop_assert!((a - b).abs() <= 1e-12 * (a.abs() + s.span[c] + s.offset[c].abs()));
                }
            }
        }
    }
}
