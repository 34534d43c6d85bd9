use std::fmt::Write as _;

use crate::error::{Result, SalientError};
use crate::morph::Mask;
use crate::wavelet::{dwt2, mean_std, Slice};

pub const HIST_BINS: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct BandRow {
    pub ll_std: f64,
    /// LH, HL, HH coefficient variances.
    pub detail_var: [f64; 3],
    pub roi_pixels: usize,
    pub hist: [u64; HIST_BINS],
}

impl BandRow {
    pub fn roi_empty(&self) -> bool {
        self.roi_pixels == 0
    }
}

/// Bin of `v` among 64 equal bins over `[-1, 1]`; the top edge falls in the last.
pub fn hist_bin(v: f64) -> usize {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5 * HIST_BINS as f64) as usize).min(HIST_BINS - 1)
}

pub fn band_row(s: &Slice<f32>, mask: Option<&Mask>) -> Result<BandRow> {
    let c = dwt2(s)?;
    let mut row = BandRow { ll_std: mean_std(c.band(0)).1, detail_var: [0.0; 3], roi_pixels: 0, hist: [0; HIST_BINS] };
    for b in 0..3 {
        row.detail_var[b] = mean_std(c.band(b + 1)).1.powi(2);
    }
    if let Some(m) = mask {
        if m.h != s.h || m.w != s.w {
            return Err(SalientError::invalid(format!("mask {}x{} for a {}x{} slice", m.h, m.w, s.h, s.w)));
        }
        for (&v, &k) in s.data.iter().zip(&m.data) {
            if k != 0 {
                row.hist[hist_bin(v as f64)] += 1;
                row.roi_pixels += 1;
            }
        }
    }
    Ok(row)
}

/// Per-slice rows plus `mean` and `std` summary rows. Floats use the
/// shortest representation that parses back to the same value.
#[derive(Clone, Debug, PartialEq)]
pub struct BandReport {
    pub rows: Vec<BandRow>,
}

pub fn band_report(slices: &[Slice<f32>], masks: Option<&[Mask]>) -> Result<BandReport> {
    if let Some(m) = masks {
        if m.len() != slices.len() {
            return Err(SalientError::invalid(format!("{} masks for {} slices", m.len(), slices.len())));
        }
    }
    let rows = slices.iter().enumerate().map(|(i, s)| band_row(s, masks.map(|m| &m[i]))).collect::<Result<_>>()?;
    Ok(BandReport { rows })
}

fn header() -> String {
    let mut h = String::from("slice,ll_std,lh_var,hl_var,hh_var,roi_pixels,roi_empty");
    for b in 0..HIST_BINS {
        write!(h, ",hist_{:02}", b).unwrap();
    }
    h
}

impl BandReport {
    /// Column-wise `(mean, std)` over rows, in CSV column order after `slice`.
    pub fn summary(&self) -> Vec<(f64, f64)> {
        let cols = self.rows.iter().map(|r| {
            let mut v = vec![r.ll_std, r.detail_var[0], r.detail_var[1], r.detail_var[2], r.roi_pixels as f64];
            v.push(if r.roi_empty() { 1.0 } else { 0.0 });
            v.extend(r.hist.iter().map(|&c| c as f64));
            v
        });
        let table: Vec<Vec<f64>> = cols.collect();
        let width = 6 + HIST_BINS;
        (0..width)
            .map(|j| {
                let col: Vec<f64> = table.iter().map(|r| r[j]).collect();
                if col.is_empty() {
                    (0.0, 0.0)
                } else {
                    mean_std(&col)
                }
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = header();
        out.push('\n');
        for (i, r) in self.rows.iter().enumerate() {
            write!(
                out,
                "{},{},{},{},{},{},{}",
                i,
                r.ll_std,
                r.detail_var[0],
                r.detail_var[1],
                r.detail_var[2],
                r.roi_pixels,
                u8::from(r.roi_empty())
            )
            .unwrap();
            for c in &r.hist {
                write!(out, ",{}", c).unwrap();
            }
            out.push('\n');
        }
        let summary = self.summary();
        for (name, pick) in [("mean", 0usize), ("std", 1)] {
            out.push_str(name);
            for s in &summary {
                write!(out, ",{}", if pick == 0 { s.0 } else { s.1 }).unwrap();
            }
            out.push('\n');
        }
        out
    }

    /// Parse per-slice rows; the summary rows are checked for shape only.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(header().as_str()) {
            return Err(SalientError::format("header", "band report header does not match"));
        }
        let mut rows = Vec::new();
        for line in lines {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 + HIST_BINS {
                return Err(SalientError::format("line", format!("{} fields", f.len())));
            }
            if f[0] == "mean" || f[0] == "std" {
                continue;
            }
            let num = |s: &str, field: &'static str| {
                s.parse::<f64>().map_err(|_| SalientError::format(field, format!("`{}` is not a number", s)))
            };
            let int = |s: &str, field: &'static str| {
                s.parse::<u64>().map_err(|_| SalientError::format(field, format!("`{}` is not a count", s)))
            };
            let mut hist = [0u64; HIST_BINS];
            for (b, h) in hist.iter_mut().enumerate() {
                *h = int(f[7 + b], "hist")?;
            }
            rows.push(BandRow {
                ll_std: num(f[1], "ll_std")?,
                detail_var: [num(f[2], "lh_var")?, num(f[3], "hl_var")?, num(f[4], "hh_var")?],
                roi_pixels: int(f[5], "roi_pixels")? as usize,
                hist,
            });
        }
        Ok(Self { rows })
    }
}
