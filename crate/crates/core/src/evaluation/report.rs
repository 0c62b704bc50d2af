//! Evaluation report: canonical `key = value` text plus raw f32 arrays.
//!
//! ```text
//! <dir>/report.txt     kind = eval_report, then sorted keys
//! <dir>/<name>.f32     little-endian f32, row-major; shape given by `array.<name>` in report.txt
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;

use super::{CovarianceComparison, EvokedReport, ForecastMetrics, PsdComparison, StateStats};
use crate::error::{Error, Result};
use crate::signal::io::{read_text, write_file};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub values: BTreeMap<String, String>,
    pub arrays: BTreeMap<String, Array2<f64>>,
}

fn valid_key(k: &str) -> bool {
    !k.is_empty() && k.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-'))
}

impl EvalReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put(&mut self, key: &str, value: impl std::fmt::Display) -> &mut Self {
        assert!(valid_key(key), "bad report key {key:?}");
        self.values.insert(key.to_string(), value.to_string());
        self
    }

    pub fn put_opt(&mut self, key: &str, value: Option<f64>) -> &mut Self {
        match value {
            Some(v) => self.put(key, v),
            None => self.put(key, "absent"),
        }
    }

    pub fn put_array(&mut self, name: &str, a: Array2<f64>) -> &mut Self {
        assert!(valid_key(name), "bad array name {name:?}");
        self.arrays.insert(name.to_string(), a);
        self
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.values.get(key)?.parse().ok()
    }

    pub fn add_forecast(&mut self, prefix: &str, m: &ForecastMetrics) -> &mut Self {
        for (who, s) in [("model", &m.model), ("repeat", &m.repeat)] {
            self.put(&format!("{prefix}.{who}.mse"), s.mse);
            self.put(&format!("{prefix}.{who}.top1"), s.top1);
            self.put(&format!("{prefix}.{who}.top5"), s.top5);
            self.put(&format!("{prefix}.{who}.n"), s.n);
        }
        self
    }

    pub fn add_psd(&mut self, prefix: &str, p: &PsdComparison) -> &mut Self {
        self.put(&format!("{prefix}.mean_log_spectral_distance_db"), p.mean_distance());
        for (c, ((d, g), r)) in p.log_spectral_distance.iter().zip(&p.peak_generated).zip(&p.peak_reference).enumerate() {
            self.put(&format!("{prefix}.ch{c:03}.log_spectral_distance_db"), d);
            self.put(&format!("{prefix}.ch{c:03}.peak_generated_hz"), g);
            self.put(&format!("{prefix}.ch{c:03}.peak_reference_hz"), r);
        }
        let f = Array2::from_shape_vec((1, p.freqs.len()), p.freqs.clone()).expect("one row");
        self.put_array(&format!("{prefix}.freqs"), f);
        self.put_array(&format!("{prefix}.generated"), p.generated.clone());
        self.put_array(&format!("{prefix}.reference"), p.reference.clone());
        self
    }

    pub fn add_covariance(&mut self, prefix: &str, c: &CovarianceComparison) -> &mut Self {
        self.put(&format!("{prefix}.frobenius"), c.frobenius);
        self.put(&format!("{prefix}.relative_frobenius"), c.relative_frobenius);
        self.put(&format!("{prefix}.mean_abs_offdiag_generated"), c.mean_abs_offdiag_generated);
        self.put(&format!("{prefix}.mean_abs_offdiag_reference"), c.mean_abs_offdiag_reference);
        self.put_array(&format!("{prefix}.generated"), c.generated.clone());
        self.put_array(&format!("{prefix}.reference"), c.reference.clone());
        self
    }

    pub fn add_evoked(&mut self, prefix: &str, e: &EvokedReport) -> &mut Self {
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        self.put(
            &format!("{prefix}.excluded"),
            e.excluded.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(","),
        );
        self.put(&format!("{prefix}.grand.mean_corr"), mean(&e.grand_mean_corr));
        self.put(&format!("{prefix}.grand.var_corr"), mean(&e.grand_var_corr));
        for c in &e.conditions {
            let p = format!("{prefix}.cond{}", c.condition);
            self.put(&format!("{p}.n_generated"), c.n_generated);
            self.put(&format!("{p}.n_reference"), c.n_reference);
            self.put(&format!("{p}.mean_corr"), mean(&c.mean_corr));
            self.put(&format!("{p}.var_corr"), mean(&c.var_corr));
            self.put_array(&format!("{p}.mean_generated"), c.mean_generated.clone());
            self.put_array(&format!("{p}.mean_reference"), c.mean_reference.clone());
            self.put_array(&format!("{p}.var_generated"), c.var_generated.clone());
            self.put_array(&format!("{p}.var_reference"), c.var_reference.clone());
            let corr = Array2::from_shape_vec((2, c.mean_corr.len()), [c.mean_corr.clone(), c.var_corr.clone()].concat())
                .expect("two rows");
            self.put_array(&format!("{p}.channel_corr"), corr);
        }
        self
    }

    pub fn add_state_stats(&mut self, prefix: &str, s: &StateStats) -> &mut Self {
        self.put(&format!("{prefix}.switching_rate"), s.switching_rate);
        for k in 0..s.fractional_occupancy.len() {
            self.put(&format!("{prefix}.state{k:02}.fractional_occupancy"), s.fractional_occupancy[k]);
            self.put_opt(&format!("{prefix}.state{k:02}.mean_lifetime_s"), s.mean_lifetime_s[k]);
            self.put_opt(&format!("{prefix}.state{k:02}.mean_interval_s"), s.mean_interval_s[k]);
        }
        self
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("kind = eval_report\n");
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k} = {v}");
        }
        for (k, a) in &self.arrays {
            let _ = writeln!(s, "array.{k} = {}x{}", a.nrows(), a.ncols());
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_file(&dir.join("report.txt"), self.to_text().as_bytes())?;
        for (k, a) in &self.arrays {
            let mut bytes = Vec::with_capacity(a.len() * 4);
            for &v in a.iter() {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
            write_file(&dir.join(format!("{k}.f32")), &bytes)?;
        }
        Ok(())
    }

    /// Reads a report written by [`EvalReport::write`]; arrays come back at f32 precision.
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("report.txt");
        let text = read_text(&path)?;
        let mut lines = text.lines();
        if lines.next() != Some("kind = eval_report") {
            return Err(Error::format(&path, "not an evaluation report"));
        }
        let mut out = Self::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| Error::format(&path, format!("malformed line {line:?}")))?;
            if let Some(name) = k.strip_prefix("array.") {
                let (r, c) = v
                    .split_once('x')
                    .and_then(|(r, c)| Some((r.parse::<usize>().ok()?, c.parse::<usize>().ok()?)))
                    .ok_or_else(|| Error::format(&path, format!("bad array shape {v:?}")))?;
                let apath = dir.join(format!("{name}.f32"));
                let bytes = std::fs::read(&apath).map_err(|e| Error::io(&apath, e))?;
                if bytes.len() != r * c * 4 {
                    return Err(Error::format(&apath, format!("expected {} bytes", r * c * 4)));
                }
                let vals: Vec<f64> = bytes
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                    .collect();
                out.arrays.insert(name.to_string(), Array2::from_shape_vec((r, c), vals).expect("size checked"));
            } else {
                out.values.insert(k.to_string(), v.to_string());
            }
        }
        Ok(out)
    }

    /// Tab-separated table of one array with a header row of column indices.
    pub fn array_tsv(&self, name: &str) -> Option<String> {
        let a = self.arrays.get(name)?;
        let mut s = String::new();
        let header: Vec<String> = (0..a.ncols()).map(|j| j.to_string()).collect();
        let _ = writeln!(s, "row\t{}", header.join("\t"));
        for (i, r) in a.rows().into_iter().enumerate() {
            let cells: Vec<String> = r.iter().map(|v| (*v as f32).to_string()).collect();
            let _ = writeln!(s, "{i}\t{}", cells.join("\t"));
        }
        Some(s)
    }
}
