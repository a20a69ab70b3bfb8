//! Subject-level records, counting-process expansion and risk sets.
//!
//! A subject is observed on `[0, U]`. Treatment is adopted at `A` (possibly
//! never, `A = inf`) and, once adopted, stays on. The treatment indicator at
//! time `t` is `W(t) = 1(A < t)`, so a subject's follow-up splits into at most
//! two episodes: untreated on `[0, min(A, U)]` and treated on `(A, U]`.

use std::collections::{BTreeSet, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: u64,
    pub x: Vec<f64>,
    /// `f64::INFINITY` for subjects that never adopt.
    pub adoption_time: f64,
    pub observed_time: f64,
    pub event: bool,
}

impl SubjectRecord {
    pub fn validate(&self) -> Result<()> {
        if !(self.observed_time > 0.0 && self.observed_time.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "subject {}: observed_time must be positive and finite, got {}",
                self.id, self.observed_time
            )));
        }
        if self.adoption_time.is_nan() || self.adoption_time < 0.0 {
            return Err(Error::InvalidInput(format!(
                "subject {}: adoption_time must be >= 0 or inf, got {}",
                self.id, self.adoption_time
            )));
        }
        if self.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "subject {}: covariates must be finite",
                self.id
            )));
        }
        Ok(())
    }

    /// `W(t) = 1(A < t)`.
    pub fn treated_at(&self, t: f64) -> bool {
        self.adoption_time < t
    }

    /// Adoption observed strictly inside follow-up.
    pub fn adopts_during_followup(&self) -> bool {
        self.adoption_time < self.observed_time
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub subject_id: u64,
    pub start: f64,
    pub stop: f64,
    pub event: bool,
    pub treated: bool,
    pub z: Vec<f64>,
    pub offset: f64,
}

/// Splits a subject into counting-process episodes.
///
/// Episode covariates default to the subject's `x` with a zero offset; callers
/// building a specific design overwrite `z` and `offset`.
pub fn expand_to_episodes(subject: &SubjectRecord) -> Vec<EpisodeRow> {
    let u = subject.observed_time;
    let a = subject.adoption_time;
    let row = |start: f64, stop: f64, event: bool, treated: bool| EpisodeRow {
        subject_id: subject.id,
        start,
        stop,
        event,
        treated,
        z: subject.x.clone(),
        offset: 0.0,
    };
    if a >= u {
        vec![row(0.0, u, subject.event, false)]
    } else if a == 0.0 {
        vec![row(0.0, u, subject.event, true)]
    } else {
        vec![row(0.0, a, false, false), row(a, u, subject.event, true)]
    }
}

/// Subject ids with an episode satisfying `start < t <= stop`.
pub fn risk_set(episodes: &[EpisodeRow], t: f64) -> BTreeSet<u64> {
    episodes
        .iter()
        .filter(|e| e.start < t && t <= e.stop)
        .map(|e| e.subject_id)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub subjects: Vec<SubjectRecord>,
    pub p: usize,
    pub column_names: Vec<String>,
}

impl Dataset {
    pub fn new(subjects: Vec<SubjectRecord>, column_names: Vec<String>) -> Result<Self> {
        let p = column_names.len();
        let mut seen = HashSet::with_capacity(subjects.len());
        for s in &subjects {
            s.validate()?;
            if s.x.len() != p {
                return Err(Error::InvalidInput(format!(
                    "subject {} has {} covariates, expected {p}",
                    s.id,
                    s.x.len()
                )));
            }
            if !seen.insert(s.id) {
                return Err(Error::InvalidInput(format!("duplicate subject id {}", s.id)));
            }
        }
        Ok(Self {
            subjects,
            p,
            column_names,
        })
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn n_events(&self) -> usize {
        self.subjects.iter().filter(|s| s.event).count()
    }

    pub fn episodes(&self) -> Vec<EpisodeRow> {
        self.subjects.iter().flat_map(expand_to_episodes).collect()
    }

    /// Keeps the subjects for which `keep` returns true, preserving order.
    pub fn filter(&self, mut keep: impl FnMut(&SubjectRecord) -> bool) -> Dataset {
        Dataset {
            subjects: self.subjects.iter().filter(|s| keep(s)).cloned().collect(),
            p: self.p,
            column_names: self.column_names.clone(),
        }
    }

    /// Projects covariates onto the given column indices.
    pub fn select_columns(&self, columns: &[usize]) -> Result<Dataset> {
        if let Some(&bad) = columns.iter().find(|&&c| c >= self.p) {
            return Err(Error::InvalidInput(format!(
                "column index {bad} out of range for p = {}",
                self.p
            )));
        }
        let subjects = self
            .subjects
            .iter()
            .map(|s| SubjectRecord {
                x: columns.iter().map(|&c| s.x[c]).collect(),
                ..s.clone()
            })
            .collect();
        Ok(Dataset {
            subjects,
            p: columns.len(),
            column_names: columns.iter().map(|&c| self.column_names[c].clone()).collect(),
        })
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path)?;
        Self::read_csv_from(file, path)
    }

    pub fn read_csv_from<R: Read>(reader: R, path: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
        let ncol = header.len();
        if ncol < 4
            || header[0] != "id"
            || header[ncol - 3] != "adoption_time"
            || header[ncol - 2] != "observed_time"
            || header[ncol - 1] != "event"
        {
            return Err(Error::Parse {
                path: path.to_owned(),
                line: 1,
                message: "header must be `id, <covariates...>, adoption_time, observed_time, event`"
                    .into(),
            });
        }
        let column_names = header[1..ncol - 3].to_vec();
        let mut subjects = Vec::new();
        for (i, record) in rdr.records().enumerate() {
            let line = i as u64 + 2;
            let record = record?;
            let bad = |message: String| Error::Parse {
                path: path.to_owned(),
                line,
                message,
            };
            if record.len() != ncol {
                return Err(bad(format!("expected {ncol} fields, found {}", record.len())));
            }
            let num = |j: usize| -> Result<f64> {
                parse_time(&record[j]).ok_or_else(|| {
                    bad(format!("column `{}`: cannot parse `{}`", header[j], &record[j]))
                })
            };
            let id: u64 = record[0]
                .parse()
                .map_err(|_| bad(format!("id `{}` is not a non-negative integer", &record[0])))?;
            let x = (1..ncol - 3).map(num).collect::<Result<Vec<_>>>()?;
            let event = match &record[ncol - 1] {
                "1" => true,
                "0" => false,
                other => return Err(bad(format!("event must be 0 or 1, got `{other}`"))),
            };
            let subject = SubjectRecord {
                id,
                x,
                adoption_time: num(ncol - 3)?,
                observed_time: num(ncol - 2)?,
                event,
            };
            subject.validate().map_err(|e| bad(e.to_string()))?;
            subjects.push(subject);
        }
        Dataset::new(subjects, column_names)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv_to(std::io::BufWriter::new(file))
    }

    pub fn write_csv_to<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["id".to_string()];
        header.extend(self.column_names.iter().cloned());
        header.extend(["adoption_time", "observed_time", "event"].map(String::from));
        w.write_record(&header)?;
        for s in &self.subjects {
            let mut rec = vec![s.id.to_string()];
            rec.extend(s.x.iter().map(|v| format_time(*v)));
            rec.push(format_time(s.adoption_time));
            rec.push(format_time(s.observed_time));
            rec.push(if s.event { "1" } else { "0" }.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn parse_time(s: &str) -> Option<f64> {
    match s {
        "inf" | "Inf" | "INF" | "infinity" | "Infinity" => Some(f64::INFINITY),
        _ => s.parse::<f64>().ok().filter(|v| v.is_finite()),
    }
}

/// Shortest representation that round-trips; infinity is written as `inf`.
pub(crate) fn format_time(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".to_string()
    } else {
        format!("{v}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub beta: Vec<f64>,
    pub log_pl: f64,
    pub n_iterations: usize,
    pub converged: bool,
    pub gradient_norm: f64,
    pub standard_errors: Option<Vec<f64>>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn subject(id: u64, u: f64, event: bool, a: f64) -> SubjectRecord {
        SubjectRecord {
            id,
            x: vec![0.5],
            adoption_time: a,
            observed_time: u,
            event,
        }
    }

    fn spans(rows: &[EpisodeRow]) -> Vec<(f64, f64, bool, bool)> {
        rows.iter().map(|r| (r.start, r.stop, r.event, r.treated)).collect()
    }

    #[test]
    fn adoption_inside_followup_splits() {
        let rows = expand_to_episodes(&subject(1, 5.0, true, 2.0));
        assert_eq!(spans(&rows), vec![(0.0, 2.0, false, false), (2.0, 5.0, true, true)]);
    }

    #[test]
    fn never_adopter_has_single_untreated_row() {
        let rows = expand_to_episodes(&subject(1, 5.0, true, f64::INFINITY));
        assert_eq!(spans(&rows), vec![(0.0, 5.0, true, false)]);
    }

    #[test]
    fn adoption_after_censoring_is_ignored() {
        let rows = expand_to_episodes(&subject(1, 5.0, false, 7.0));
        assert_eq!(spans(&rows), vec![(0.0, 5.0, false, false)]);
    }

    #[test]
    fn adoption_at_observed_time_is_untreated() {
        let rows = expand_to_episodes(&subject(1, 5.0, true, 5.0));
        assert_eq!(spans(&rows), vec![(0.0, 5.0, true, false)]);
    }

    #[test]
    fn adoption_at_zero_is_one_treated_row() {
        let rows = expand_to_episodes(&subject(1, 5.0, true, 0.0));
        assert_eq!(spans(&rows), vec![(0.0, 5.0, true, true)]);
    }

    #[test]
    fn risk_set_examples() {
        let subjects = [
            subject(1, 3.0, true, 1.0),
            subject(2, 5.0, true, f64::INFINITY),
            subject(3, 7.0, false, 4.0),
        ];
        let rows: Vec<_> = subjects.iter().flat_map(expand_to_episodes).collect();
        assert_eq!(risk_set(&rows, 5.0), BTreeSet::from([2, 3]));
        assert_eq!(risk_set(&rows, 7.0), BTreeSet::from([3]));
        assert_eq!(risk_set(&rows, 0.5), BTreeSet::from([1, 2, 3]));
    }

    #[test]
    fn csv_rejects_bad_event_with_line_number() {
        let text = "id,x1,adoption_time,observed_time,event\n1,0.5,inf,2.0,1\n2,0.1,1.0,3.0,2\n";
        let err = Dataset::read_csv_from(text.as_bytes(), Path::new("d.csv")).unwrap_err();
        assert!(err.to_string().contains("d.csv:3"), "{err}");
    }

    #[test]
    fn csv_round_trip_preserves_infinity() {
        let data = Dataset::new(
            vec![subject(1, 2.5, true, f64::INFINITY), subject(2, 1.25, false, 0.75)],
            vec!["x1".into()],
        )
        .unwrap();
        let mut buf = Vec::new();
        data.write_csv_to(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.contains(",inf,"));
        let back = Dataset::read_csv_from(buf.as_slice(), Path::new("mem")).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let err = Dataset::new(
            vec![subject(1, 1.0, true, 0.5), subject(1, 2.0, true, 0.5)],
            vec!["x1".into()],
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }
}
