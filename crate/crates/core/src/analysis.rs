//! Offline analysis of experiment logs: frequency-response estimation,
//! cut-off extraction, energy audit and task metrics.

use crate::experiment_log::{LogError, LogTable};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

/// Tracking errors below this (m) are treated as zero by the overshoot metric.
pub const ERROR_FLOOR: f64 = 1e-9;

/// Coherence below which a bin is not trusted.
pub const COHERENCE_GATE: f64 = 0.6;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("input and output lengths differ ({0} vs {1})")]
    Length(usize, usize),
    #[error("series of {len} samples is shorter than one window of {window}")]
    TooShort { len: usize, window: usize },
    #[error("window length must be at least 4, got {0}")]
    Window(usize),
    #[error("sample rate must be positive")]
    SampleRate,
    #[error("no -3 dB crossing with coherence >= {COHERENCE_GATE} in the analysed band")]
    OutOfBand,
    #[error("reference band holds no usable bins")]
    EmptyBand,
    #[error(transparent)]
    Log(#[from] LogError),
}

/// Nonparametric transfer function estimate on linear frequency bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyResponse {
    pub freqs: Vec<f64>,
    pub magnitude: Vec<f64>,
    pub phase: Vec<f64>,
    pub coherence: Vec<f64>,
}

impl FrequencyResponse {
    pub fn magnitude_db(&self) -> Vec<f64> {
        self.magnitude.iter().map(|m| 20.0 * m.log10()).collect()
    }

    /// Phase with 2 pi jumps removed.
    pub fn unwrapped_phase(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.phase.len());
        let mut offset = 0.0;
        for (i, &p) in self.phase.iter().enumerate() {
            if i > 0 {
                let d = p - self.phase[i - 1];
                if d > PI {
                    offset -= 2.0 * PI;
                } else if d < -PI {
                    offset += 2.0 * PI;
                }
            }
            out.push(p + offset);
        }
        out
    }

    /// Averages bins into `n` logarithmically spaced bands between the first
    /// and last frequency. Empty bands are dropped.
    pub fn log_binned(&self, n: usize) -> FrequencyResponse {
        let (lo, hi) = match (self.freqs.first(), self.freqs.last()) {
            (Some(&a), Some(&b)) if a > 0.0 && b > a && n > 0 => (a.ln(), b.ln()),
            _ => return self.clone(),
        };
        let mut out = FrequencyResponse {
            freqs: Vec::new(),
            magnitude: Vec::new(),
            phase: Vec::new(),
            coherence: Vec::new(),
        };
        let unwrapped = self.unwrapped_phase();
        let edge = |k: usize| (lo + (hi - lo) * k as f64 / n as f64).exp();
        for k in 0..n {
            let (a, b) = (edge(k), edge(k + 1));
            let idx: Vec<usize> = (0..self.freqs.len())
                .filter(|&i| {
                    self.freqs[i] >= a && (self.freqs[i] < b || (k + 1 == n && self.freqs[i] <= b))
                })
                .collect();
            if idx.is_empty() {
                continue;
            }
            let m = idx.len() as f64;
            out.freqs
                .push((idx.iter().map(|&i| self.freqs[i].ln()).sum::<f64>() / m).exp());
            out.magnitude
                .push(idx.iter().map(|&i| self.magnitude[i]).sum::<f64>() / m);
            out.phase
                .push(idx.iter().map(|&i| unwrapped[i]).sum::<f64>() / m);
            out.coherence
                .push(idx.iter().map(|&i| self.coherence[i]).sum::<f64>() / m);
        }
        out
    }
}

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Welch estimate `H = S_xy / S_xx` with Hann windows and 50% overlap.
/// Each segment has its mean removed. Bins run from `fs / window_len` to
/// the Nyquist frequency.
pub fn estimate_frf(
    input: &[f64],
    output: &[f64],
    sample_rate: f64,
    window_len: usize,
) -> Result<FrequencyResponse, AnalysisError> {
    if input.len() != output.len() {
        return Err(AnalysisError::Length(input.len(), output.len()));
    }
    if window_len < 4 {
        return Err(AnalysisError::Window(window_len));
    }
    if !(sample_rate > 0.0 && sample_rate.is_finite()) {
        return Err(AnalysisError::SampleRate);
    }
    if input.len() < window_len {
        return Err(AnalysisError::TooShort {
            len: input.len(),
            window: window_len,
        });
    }
    let w = hann(window_len);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(window_len);
    let half = window_len / 2;
    let mut sxx = vec![0.0; half + 1];
    let mut syy = vec![0.0; half + 1];
    let mut sxy = vec![Complex::new(0.0, 0.0); half + 1];
    let hop = window_len / 2;
    let windowed = |s: &[f64]| -> Vec<Complex<f64>> {
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        s.iter()
            .zip(&w)
            .map(|(v, wi)| Complex::new((v - mean) * wi, 0.0))
            .collect()
    };
    let mut start = 0;
    while start + window_len <= input.len() {
        let mut x = windowed(&input[start..start + window_len]);
        let mut y = windowed(&output[start..start + window_len]);
        fft.process(&mut x);
        fft.process(&mut y);
        for k in 0..=half {
            sxx[k] += x[k].norm_sqr();
            syy[k] += y[k].norm_sqr();
            sxy[k] += x[k].conj() * y[k];
        }
        start += hop;
    }
    let df = sample_rate / window_len as f64;
    let mut frf = FrequencyResponse {
        freqs: Vec::with_capacity(half),
        magnitude: Vec::with_capacity(half),
        phase: Vec::with_capacity(half),
        coherence: Vec::with_capacity(half),
    };
    for k in 1..=half {
        let h = if sxx[k] > 0.0 {
            sxy[k] / sxx[k]
        } else {
            Complex::new(0.0, 0.0)
        };
        let coh = if sxx[k] > 0.0 && syy[k] > 0.0 {
            (sxy[k].norm_sqr() / (sxx[k] * syy[k])).clamp(0.0, 1.0)
        } else {
            0.0
        };
        frf.freqs.push(k as f64 * df);
        frf.magnitude.push(h.norm());
        frf.phase.push(h.arg());
        frf.coherence.push(coh);
    }
    Ok(frf)
}

/// Frequency above `reference_band` where the magnitude first falls 3 dB
/// below the band's mean level (in dB). Bins with coherence under the gate
/// are skipped; the crossing is interpolated linearly in dB.
pub fn cutoff_frequency(
    frf: &FrequencyResponse,
    reference_band: (f64, f64),
) -> Result<f64, AnalysisError> {
    let db = frf.magnitude_db();
    let usable = |i: usize| frf.coherence[i] >= COHERENCE_GATE && db[i].is_finite();
    let band: Vec<f64> = (0..frf.freqs.len())
        .filter(|&i| {
            frf.freqs[i] >= reference_band.0 && frf.freqs[i] <= reference_band.1 && usable(i)
        })
        .map(|i| db[i])
        .collect();
    if band.is_empty() {
        return Err(AnalysisError::EmptyBand);
    }
    let level = band.iter().sum::<f64>() / band.len() as f64 - 3.0;
    let mut prev: Option<usize> = None;
    for i in 0..frf.freqs.len() {
        if frf.freqs[i] <= reference_band.1 || !usable(i) {
            if frf.freqs[i] <= reference_band.1 && usable(i) {
                prev = Some(i);
            }
            continue;
        }
        if db[i] < level {
            return Ok(match prev {
                Some(p) if db[p] >= level => {
                    let s = (db[p] - level) / (db[p] - db[i]);
                    frf.freqs[p] + s * (frf.freqs[i] - frf.freqs[p])
                }
                _ => frf.freqs[i],
            });
        }
        prev = Some(i);
    }
    Err(AnalysisError::OutOfBand)
}

/// Least-squares slope of the unwrapped phase over bins with coherence
/// above the gate, between `f_lo` and `f_hi` (rad/Hz).
pub fn phase_slope(frf: &FrequencyResponse, f_lo: f64, f_hi: f64) -> Option<f64> {
    let ph = frf.unwrapped_phase();
    let pts: Vec<(f64, f64)> = (0..frf.freqs.len())
        .filter(|&i| {
            frf.freqs[i] >= f_lo && frf.freqs[i] <= f_hi && frf.coherence[i] >= COHERENCE_GATE
        })
        .map(|i| (frf.freqs[i], ph[i]))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Some(sxy / sxx)
}

/// Cumulative energy bookkeeping of the replica controller.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EnergyLedger {
    pub t: Vec<f64>,
    /// Energy absorbed by the controller (J).
    pub injected: Vec<f64>,
    /// Energy released by the controller (J).
    pub extracted: Vec<f64>,
    /// Energy held in the controller's hysteresis memory (J).
    pub stored: Vec<f64>,
}

impl EnergyLedger {
    /// Largest excess of extracted over injected energy.
    pub fn max_violation(&self) -> f64 {
        self.injected
            .iter()
            .zip(&self.extracted)
            .map(|(i, e)| e - i)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_passive(&self, tolerance: f64) -> bool {
        self.injected.is_empty() || self.max_violation() <= tolerance
    }
}

/// Integrates the controller power over a log.
///
/// Simulation logs carry per-interval `work_in` / `work_out` columns
/// accumulated at the simulation rate, which are summed directly. Other logs
/// fall back to trapezoidal integration of `P = f_ctrl . v` over rows.
pub fn energy_audit(log: &LogTable) -> Result<EnergyLedger, AnalysisError> {
    let t = log.column("t")?;
    let mut ledger = EnergyLedger {
        t: t.to_vec(),
        ..EnergyLedger::default()
    };
    let stored_cols = log.indexed("stored");
    ledger.stored = (0..t.len())
        .map(|k| stored_cols.iter().map(|c| c[k]).sum())
        .collect();
    if log.has("work_in") && log.has("work_out") {
        let (wi, wo) = (log.column("work_in")?, log.column("work_out")?);
        let (mut a, mut b) = (0.0, 0.0);
        for k in 0..t.len() {
            a += wi[k];
            b += wo[k];
            ledger.injected.push(a);
            ledger.extracted.push(b);
        }
        return Ok(ledger);
    }
    let f = log.indexed("f_ctrl");
    let v = log.indexed("v");
    if f.is_empty() || f.len() != v.len() {
        return Err(AnalysisError::Log(LogError::MissingColumn(
            "f_ctrl_* / v_*".into(),
        )));
    }
    let power = |k: usize| -> f64 { (0..f.len()).map(|i| f[i][k] * v[i][k]).sum() };
    let (mut a, mut b) = (0.0, 0.0);
    for k in 0..t.len() {
        if k > 0 {
            let w = 0.5 * (power(k - 1) + power(k)) * (t[k] - t[k - 1]);
            if w >= 0.0 {
                b += w;
            } else {
                a -= w;
            }
        }
        ledger.injected.push(a);
        ledger.extracted.push(b);
    }
    Ok(ledger)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub success: bool,
    /// Time of the final button release, for button tasks.
    pub completion_time: Option<f64>,
    /// Largest contact force magnitude (N).
    pub peak_force: f64,
    /// Worst overshoot fraction across excitations.
    pub overshoot: Option<f64>,
    /// Largest replica tracking error norm (m).
    pub max_tracking_error: f64,
}

fn parse_events(log: &LogTable) -> Vec<(f64, String)> {
    let mut out = Vec::new();
    for (_, cell) in &log.events {
        for item in cell.split(';') {
            if let Some((text, t)) = item.rsplit_once('@') {
                if let Ok(t) = t.parse::<f64>() {
                    out.push((t, text.to_string()));
                }
            }
        }
    }
    out
}

/// Overshoot of the tracking error after each excitation: the largest
/// excursion opposite to the peak displacement, relative to the peak.
fn overshoot(err: &[&[f64]], starts: &[usize], len: usize) -> Option<f64> {
    let mut worst: Option<f64> = None;
    for (s, &a) in starts.iter().enumerate() {
        let b = starts.get(s + 1).copied().unwrap_or(len);
        let norm = |k: usize| err.iter().map(|c| c[k] * c[k]).sum::<f64>().sqrt();
        let Some(peak) = (a..b).max_by(|&i, &j| norm(i).total_cmp(&norm(j))) else {
            continue;
        };
        let p = norm(peak);
        if p <= ERROR_FLOOR {
            continue;
        }
        let u: Vec<f64> = err.iter().map(|c| c[peak] / p).collect();
        let back = (peak..b)
            .map(|k| -err.iter().zip(&u).map(|(c, ui)| c[k] * ui).sum::<f64>())
            .fold(0.0, f64::max);
        let ratio = back / p;
        worst = Some(worst.map_or(ratio, |w: f64| w.max(ratio)));
    }
    worst
}

/// Release from an initial error: the largest excursion past zero along the
/// initial error direction, relative to the initial error.
fn step_overshoot(err: &[&[f64]], len: usize) -> Option<f64> {
    let e0 = err.iter().map(|c| c[0] * c[0]).sum::<f64>().sqrt();
    if e0 <= ERROR_FLOOR {
        return None;
    }
    let back = (0..len)
        .map(|k| -err.iter().map(|c| c[k] * c[0]).sum::<f64>() / e0)
        .fold(0.0, f64::max);
    Some(back / e0)
}

pub fn task_metrics(log: &LogTable) -> Result<TaskMetrics, AnalysisError> {
    let n = log.len();
    let events = parse_events(log);
    let failed = events.iter().any(|(_, e)| e == "task:failed");
    let buttons = log
        .names
        .iter()
        .filter(|c| c.starts_with("button_"))
        .count();
    let contact = log.indexed("contact");
    let peak_force = (0..n)
        .map(|k| contact.iter().map(|c| c[k] * c[k]).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let err = log.indexed("err");
    let max_tracking_error = (0..n)
        .map(|k| err.iter().map(|c| c[k] * c[k]).sum::<f64>().sqrt())
        .fold(0.0, f64::max);

    let (success, completion_time) = if buttons > 0 {
        let ids: std::collections::BTreeSet<&str> = events
            .iter()
            .filter_map(|(_, e)| {
                e.split_once(':')
                    .filter(|(_, s)| *s == "on" || *s == "off")
                    .map(|(id, _)| id)
            })
            .collect();
        let all_pressed = ids.len() == buttons
            && ids.iter().all(|id| {
                let on = events.iter().any(|(_, e)| e == &format!("{id}:on"));
                let off = events.iter().any(|(_, e)| e == &format!("{id}:off"));
                on && off
            });
        let last_off = events
            .iter()
            .filter(|(_, e)| e.ends_with(":off"))
            .map(|(t, _)| *t)
            .fold(None, |a: Option<f64>, t| Some(a.map_or(t, |a| a.max(t))));
        let ok = all_pressed && !failed;
        (ok, if ok { last_off } else { None })
    } else {
        (!failed, None)
    };

    let impulse = log.indexed("impulse");
    let mut starts = Vec::new();
    if !impulse.is_empty() {
        let active = |k: usize| impulse.iter().any(|c| c[k] != 0.0);
        for k in 0..n {
            if active(k) && (k == 0 || !active(k - 1)) {
                starts.push(k);
            }
        }
    }
    let overshoot = if err.is_empty() || n == 0 {
        None
    } else if starts.is_empty() {
        step_overshoot(&err, n)
    } else {
        overshoot(&err, &starts, n)
    };
    Ok(TaskMetrics {
        success,
        completion_time,
        peak_force,
        overshoot,
        max_tracking_error,
    })
}

/// Interaction-force to master-velocity response of one axis of a log.
pub fn log_frf(
    log: &LogTable,
    axis: usize,
    window_len: usize,
) -> Result<FrequencyResponse, AnalysisError> {
    let t = log.column("t")?;
    if t.len() < 2 {
        return Err(AnalysisError::TooShort {
            len: t.len(),
            window: window_len,
        });
    }
    let fs = 1.0 / (t[1] - t[0]);
    let f = log.column(&format!("ffb_pre_{axis}"))?;
    let v = log.column(&format!("master_vel_{axis}"))?;
    estimate_frf(f, v, fs, window_len)
}
