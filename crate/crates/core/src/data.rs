//! Subjects and the validated dataset the estimator works on.

use crate::error::{Error, Result};
use crate::ordinal::{ItemLevelCounts, ResponseSet};
use crate::survival::{SurvivalRecord, TimeGrid};

/// One subject: identifier, ordinal responses and survival outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub id: String,
    pub responses: ResponseSet,
    pub survival: SurvivalRecord,
}

/// Validated subjects plus cached per-subject response counts and the survival time grid.
#[derive(Debug, Clone)]
pub struct Dataset {
    subjects: Vec<SubjectRecord>,
    n_items: usize,
    n_levels: usize,
    counts: Vec<ItemLevelCounts>,
    survival: Vec<SurvivalRecord>,
    grid: TimeGrid,
}

impl Dataset {
    pub fn new(subjects: Vec<SubjectRecord>, n_items: usize, n_levels: usize) -> Result<Self> {
        if subjects.is_empty() {
            return Err(Error::InvalidData("dataset has no subjects".into()));
        }
        if n_items < 1 || n_levels < 2 {
            return Err(Error::InvalidData(format!(
                "need at least one item and two levels, got J={n_items}, L={n_levels}"
            )));
        }
        for s in &subjects {
            s.responses
                .check_dims(n_items, n_levels)
                .map_err(|e| Error::InvalidData(format!("subject {}: {e}", s.id)))?;
        }
        let counts = subjects.iter().map(|s| s.responses.counts(n_items, n_levels)).collect();
        let survival: Vec<SurvivalRecord> = subjects.iter().map(|s| s.survival).collect();
        let grid = TimeGrid::new(&survival)?;
        Ok(Self { subjects, n_items, n_levels, counts, survival, grid })
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn n_levels(&self) -> usize {
        self.n_levels
    }

    pub fn subjects(&self) -> &[SubjectRecord] {
        &self.subjects
    }

    pub fn survival(&self) -> &[SurvivalRecord] {
        &self.survival
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub(crate) fn counts(&self, subject: usize) -> &ItemLevelCounts {
        &self.counts[subject]
    }

    /// Fraction of subjects with a censored time.
    pub fn censoring_fraction(&self) -> f64 {
        self.survival.iter().filter(|r| !r.event).count() as f64 / self.len() as f64
    }

    /// The dataset repeated `times` times (used to check average-invariance of statistics).
    pub fn repeated(&self, times: usize) -> Result<Self> {
        let subjects = (0..times)
            .flat_map(|copy| {
                self.subjects.iter().map(move |s| SubjectRecord { id: format!("{}_{copy}", s.id), ..s.clone() })
            })
            .collect();
        Self::new(subjects, self.n_items, self.n_levels)
    }
}
