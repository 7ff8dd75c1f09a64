//! Confidence-weighted class templates over semantic features and the
//! nearest-template correction rule for low-confidence samples.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::numcore::cosine_similarity;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticTemplates {
    pub templates: Vec<Vec<f64>>,
    pub valid: Vec<bool>,
    pub last_update_epoch: Vec<Option<usize>>,
}

/// One high-confidence member contributing to its class template.
#[derive(Debug, Clone, Copy)]
pub struct TemplateEntry<'a> {
    pub semantic: &'a [f64],
    pub alpha: f64,
    pub label: usize,
}

impl SemanticTemplates {
    pub fn new(classes: usize, aus: usize) -> Self {
        SemanticTemplates {
            templates: vec![vec![0.0; aus]; classes],
            valid: vec![false; classes],
            last_update_epoch: vec![None; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.templates.len()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Replaces `T_j` by `(1/K_j) Σ alpha_k s_k` over the entries labelled
    /// `j`. Classes with no entries keep their previous template.
    pub fn update(&mut self, entries: &[TemplateEntry<'_>], epoch: usize) {
        let aus = self.templates.first().map_or(0, Vec::len);
        let mut sums = vec![vec![0.0; aus]; self.classes()];
        let mut counts = vec![0usize; self.classes()];
        for e in entries {
            counts[e.label] += 1;
            for (acc, &s) in sums[e.label].iter_mut().zip(e.semantic) {
                *acc += e.alpha * s;
            }
        }
        for (j, (sum, k)) in sums.into_iter().zip(counts).enumerate() {
            if k == 0 {
                continue;
            }
            self.templates[j] = sum.into_iter().map(|v| v / k as f64).collect();
            self.valid[j] = true;
            self.last_update_epoch[j] = Some(epoch);
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,valid,last_update_epoch,template\n");
        for j in 0..self.classes() {
            let t: Vec<String> = self.templates[j].iter().map(|v| format!("{v:?}")).collect();
            let epoch = self.last_update_epoch[j].map_or(String::new(), |e| e.to_string());
            let _ = writeln!(out, "{j},{},{epoch},{}", self.valid[j], t.join(" "));
        }
        out
    }
}

/// `SP_j = 1 - cos(t_j, s)` for every valid class; `None` for invalid or
/// zero-norm templates. A zero-norm `s` is an error.
pub fn semantic_distance(s: &[f64], templates: &SemanticTemplates) -> Result<Vec<Option<f64>>> {
    if s.iter().all(|&v| v == 0.0) {
        return Err(Error::DegenerateVector);
    }
    templates
        .templates
        .iter()
        .zip(&templates.valid)
        .map(|(t, &valid)| {
            if !valid {
                return Ok(None);
            }
            match cosine_similarity(t, s) {
                Ok(c) => Ok(Some(1.0 - c)),
                Err(Error::DegenerateVector) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect()
}

/// Nearest other class when it is strictly closer than `org`, else `org`.
/// Ties among the closest others go to the smallest class index.
pub fn relabel(distances: &[Option<f64>], org: usize) -> usize {
    let Some(sp_org) = distances.get(org).copied().flatten() else {
        return org;
    };
    let best = distances
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != org)
        .filter_map(|(j, d)| d.map(|d| (j, d)))
        .fold(None, |acc: Option<(usize, f64)>, (j, d)| match acc {
            Some((_, bd)) if bd <= d => acc,
            _ => Some((j, d)),
        });
    match best {
        Some((j, d)) if sp_org - d > 0.0 => j,
        _ => org,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelabelRecord {
    pub id: usize,
    pub original: usize,
    pub corrected: usize,
    pub distances: Vec<Option<f64>>,
    pub epoch: usize,
}

impl RelabelRecord {
    pub fn changed(&self) -> bool {
        self.corrected != self.original
    }

    fn sp(&self, class: usize) -> f64 {
        self.distances.get(class).copied().flatten().unwrap_or(f64::NAN)
    }
}

/// Evaluates one low-confidence sample against the templates.
pub fn propose(
    id: usize,
    semantic: &[f64],
    original: usize,
    templates: &SemanticTemplates,
    epoch: usize,
) -> Result<RelabelRecord> {
    let distances = semantic_distance(semantic, templates)?;
    let corrected = relabel(&distances, original);
    Ok(RelabelRecord {
        id,
        original,
        corrected,
        distances,
        epoch,
    })
}

/// Writes corrected labels into `ds`, returning how many labels changed.
/// All ids are checked before anything is written.
pub fn apply_corrections(ds: &mut Dataset, records: &[RelabelRecord]) -> Result<usize> {
    if let Some(r) = records.iter().find(|r| r.id >= ds.samples.len()) {
        return Err(Error::Integrity(format!(
            "relabel record references unknown sample id {}",
            r.id
        )));
    }
    if let Some(r) = records.iter().find(|r| r.corrected >= ds.classes) {
        return Err(Error::Integrity(format!(
            "sample {} corrected to class {} but C={}",
            r.id, r.corrected, ds.classes
        )));
    }
    let mut changed = 0;
    for r in records {
        let s = &mut ds.samples[r.id];
        if s.observed_label != r.corrected {
            s.observed_label = r.corrected;
            changed += 1;
        }
    }
    Ok(changed)
}

pub const AUDIT_HEADER: &str = "epoch,id,org,new,sp_org,sp_new";

/// One line per changed label.
pub fn audit_csv(records: &[RelabelRecord]) -> String {
    let mut out = format!("{AUDIT_HEADER}\n");
    for r in records.iter().filter(|r| r.changed()) {
        let _ = writeln!(
            out,
            "{},{},{},{},{:?},{:?}",
            r.epoch,
            r.id,
            r.original,
            r.corrected,
            r.sp(r.original),
            r.sp(r.corrected)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, GenParams};

    fn templates(ts: &[&[f64]]) -> SemanticTemplates {
        SemanticTemplates {
            templates: ts.iter().map(|t| t.to_vec()).collect(),
            valid: vec![true; ts.len()],
            last_update_epoch: vec![Some(1); ts.len()],
        }
    }

    #[test]
    fn single_member_template() {
        let mut t = SemanticTemplates::new(3, 2);
        t.update(
            &[TemplateEntry {
                semantic: &[1.0, 0.0],
                alpha: 0.8,
                label: 1,
            }],
            4,
        );
        assert_eq!(t.templates[1], vec![0.8, 0.0]);
        assert_eq!(t.valid, vec![false, true, false]);
        assert_eq!(t.last_update_epoch[1], Some(4));
    }

    #[test]
    fn unweighted_mean_of_two() {
        let mut t = SemanticTemplates::new(1, 2);
        let e = [
            TemplateEntry {
                semantic: &[1.0, 0.0],
                alpha: 1.0,
                label: 0,
            },
            TemplateEntry {
                semantic: &[0.0, 1.0],
                alpha: 1.0,
                label: 0,
            },
        ];
        t.update(&e, 1);
        assert_eq!(t.templates[0], vec![0.5, 0.5]);
    }

    #[test]
    fn absent_class_keeps_template() {
        let mut t = SemanticTemplates::new(2, 2);
        t.update(
            &[TemplateEntry {
                semantic: &[2.0, 1.0],
                alpha: 0.5,
                label: 0,
            }],
            1,
        );
        let before = t.templates[0].clone();
        t.update(
            &[TemplateEntry {
                semantic: &[0.0, 1.0],
                alpha: 0.5,
                label: 1,
            }],
            2,
        );
        assert_eq!(t.templates[0], before);
        assert_eq!(t.last_update_epoch[0], Some(1));
    }

    #[test]
    fn distance_extremes() {
        let t = templates(&[&[1.0, 2.0]]);
        assert!(semantic_distance(&[2.0, 4.0], &t).unwrap()[0].unwrap().abs() < 1e-15);
        assert!((semantic_distance(&[-2.0, 1.0], &t).unwrap()[0].unwrap() - 1.0).abs() < 1e-15);
        assert!((semantic_distance(&[-1.0, -2.0], &t).unwrap()[0].unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn invalid_templates_are_excluded() {
        let mut t = templates(&[&[1.0, 0.0], &[0.0, 1.0]]);
        t.valid[1] = false;
        assert_eq!(semantic_distance(&[1.0, 1.0], &t).unwrap()[1], None);
    }

    #[test]
    fn zero_semantic_is_degenerate() {
        let t = templates(&[&[1.0, 0.0]]);
        assert!(matches!(
            semantic_distance(&[0.0, 0.0], &t),
            Err(Error::DegenerateVector)
        ));
    }

    #[test]
    fn relabel_rule_cases() {
        assert_eq!(relabel(&[Some(0.4), Some(0.25), Some(0.3)], 0), 1);
        assert_eq!(relabel(&[Some(0.2), Some(0.3), Some(0.5)], 0), 0);
        assert_eq!(relabel(&[Some(0.3), Some(0.3)], 0), 0);
        // ties among others: smallest index
        assert_eq!(relabel(&[Some(0.1), Some(0.9), Some(0.1)], 1), 0);
    }

    #[test]
    fn relabel_needs_two_valid_templates() {
        assert_eq!(relabel(&[Some(0.9), None, None], 0), 0);
        assert_eq!(relabel(&[None, Some(0.1)], 0), 0);
    }

    #[test]
    fn exact_template_match_is_relabelled() {
        let t = templates(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.5]]);
        let r = propose(7, &[0.0, 1.0, 0.5], 0, &t, 3).unwrap();
        assert_eq!(r.corrected, 1);
        assert!(r.changed());
    }

    #[test]
    fn corrections_are_applied_and_counted() {
        let mut ds = generate(&GenParams {
            classes: 3,
            aus: 6,
            n: 9,
            ..GenParams::default()
        })
        .unwrap();
        assert_eq!(apply_corrections(&mut ds, &[]).unwrap(), 0);
        let same = RelabelRecord {
            id: 0,
            original: 0,
            corrected: 0,
            distances: vec![],
            epoch: 1,
        };
        assert_eq!(apply_corrections(&mut ds, &[same]).unwrap(), 0);
        let moved = RelabelRecord {
            id: 1,
            original: 1,
            corrected: 2,
            distances: vec![],
            epoch: 1,
        };
        assert_eq!(apply_corrections(&mut ds, &[moved]).unwrap(), 1);
        assert_eq!(ds.samples[1].observed_label, 2);
    }

    #[test]
    fn unknown_id_is_integrity_error() {
        let mut ds = generate(&GenParams {
            classes: 3,
            aus: 6,
            n: 9,
            ..GenParams::default()
        })
        .unwrap();
        let before = ds.clone();
        let recs = [
            RelabelRecord {
                id: 1,
                original: 1,
                corrected: 2,
                distances: vec![],
                epoch: 1,
            },
            RelabelRecord {
                id: 99,
                original: 0,
                corrected: 1,
                distances: vec![],
                epoch: 1,
            },
        ];
        assert!(matches!(
            apply_corrections(&mut ds, &recs),
            Err(Error::Integrity(_))
        ));
        assert_eq!(ds, before);
    }

    #[test]
    fn audit_lists_only_changes() {
        let recs = [
            RelabelRecord {
                id: 3,
                original: 0,
                corrected: 2,
                distances: vec![Some(0.5), None, Some(0.25)],
                epoch: 11,
            },
            RelabelRecord {
                id: 4,
                original: 1,
                corrected: 1,
                distances: vec![],
                epoch: 11,
            },
        ];
        let csv = audit_csv(&recs);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines, vec![AUDIT_HEADER, "11,3,0,2,0.5,0.25"]);
    }
}
