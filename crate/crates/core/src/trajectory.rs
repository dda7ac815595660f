use std::io::{BufRead, Write};

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::io::format_significant;
use crate::pose::Pose;

/// Timestamped camera-to-world poses with strictly increasing timestamps (seconds).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub samples: Vec<(f64, Pose)>,
}

impl Trajectory {
    pub fn new(samples: Vec<(f64, Pose)>) -> Result<Self> {
        let t = Self { samples };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        for w in self.samples.windows(2) {
            if !(w[1].0 > w[0].0) {
                return Err(Error::Validation(format!(
                    "trajectory timestamps not strictly increasing at {}",
                    w[1].0
                )));
            }
        }
        for (t, p) in &self.samples {
            let n = p.rotation.quaternion().norm();
            if !t.is_finite() || !p.translation.iter().all(|v| v.is_finite()) || (n - 1.0).abs() > 1e-6
            {
                return Err(Error::Validation(format!("invalid pose at t={t}")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn timestamps(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.0).collect()
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.samples.iter().map(|s| s.1.translation).collect()
    }

    pub fn path_length(&self) -> f64 {
        self.samples
            .windows(2)
            .map(|w| (w[1].1.translation - w[0].1.translation).norm())
            .sum()
    }

    /// Writes `t tx ty tz qx qy qz qw` lines with 9 significant digits.
    pub fn write_tum<W: Write>(&self, w: &mut W) -> Result<()> {
        for (t, p) in &self.samples {
            let q = p.rotation.quaternion();
            let vals = [
                *t,
                p.translation.x,
                p.translation.y,
                p.translation.z,
                q.i,
                q.j,
                q.k,
                q.w,
            ];
            let line: Vec<String> = vals.iter().map(|v| format_significant(*v, 9)).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
        Ok(())
    }

    pub fn to_tum_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_tum(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii output")
    }

    pub fn read_tum<R: BufRead>(r: R) -> Result<Self> {
        let mut samples = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let vals: Vec<f64> = line
                .split_ascii_whitespace()
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Parse {
                    line: i + 1,
                    msg: "non-numeric field".into(),
                })?;
            if vals.len() != 8 {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("expected 8 fields, found {}", vals.len()),
                });
            }
            samples.push((
                vals[0],
                Pose::from_parts([vals[1], vals[2], vals[3]], [vals[4], vals[5], vals[6], vals[7]]),
            ));
        }
        Self::new(samples)
    }
}
