use serde::{Deserialize, Serialize};

use crate::attacks::total_variation;
use crate::error::{Error, Result};
use crate::evaluation::{Outcome, TrialRecord};
use crate::smoothing::Decision;
use crate::tensor::Image;

fn completed(records: &[TrialRecord]) -> Result<Vec<&TrialRecord>> {
    let done: Vec<&TrialRecord> = records.iter().filter(|r| r.is_completed()).collect();
    if done.is_empty() {
        return Err(Error::Empty("no completed trial records".into()));
    }
    Ok(done)
}

fn fraction(records: &[TrialRecord], pred: impl Fn(&TrialRecord) -> bool) -> Result<f64> {
    let done = completed(records)?;
    Ok(done.iter().filter(|r| pred(r)).count() as f64 / done.len() as f64)
}

/// Fraction of trials not certified as the source label; abstentions count
/// as successes.
pub fn asr_untargeted(records: &[TrialRecord]) -> Result<f64> {
    fraction(records, |r| r.outcome() != Some(Outcome::Source))
}

/// Fraction of targeted trials certified as their target label.
pub fn asr_targeted(records: &[TrialRecord]) -> Result<f64> {
    if records.iter().any(|r| r.target_label.is_none()) {
        return Err(Error::Domain("targeted ASR over untargeted records".into()));
    }
    fraction(records, |r| r.outcome() == Some(Outcome::Target))
}

pub fn dos_rate(records: &[TrialRecord]) -> Result<f64> {
    fraction(records, |r| r.outcome() == Some(Outcome::Abstain))
}

fn spoofed(r: &TrialRecord) -> bool {
    match r.outcome() {
        Some(Outcome::Target) => true,
        Some(Outcome::Other) => r.target_label.is_none(),
        _ => false,
    }
}

/// Mean post-attack radius over trials that were certified as a wrong label
/// (the target label, for targeted trials). `None` without successes.
pub fn mean_spoofing_radius(records: &[TrialRecord]) -> Option<f64> {
    let radii: Vec<f64> = records
        .iter()
        .filter(|r| r.is_completed() && spoofed(r))
        .map(|r| r.post.expect("completed").radius)
        .collect();
    (!radii.is_empty()).then(|| radii.iter().sum::<f64>() / radii.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Imperceptibility {
    pub l2: f64,
    pub linf: f64,
    pub tv: f64,
}

pub fn imperceptibility_metrics(x: &Image, x_adv: &Image) -> Result<Imperceptibility> {
    x_adv.ensure_shape(x.shape())?;
    let d = x_adv.sub(x);
    Ok(Imperceptibility {
        l2: d.l2_norm(),
        linf: d.linf_norm(),
        tv: total_variation(&d),
    })
}

/// Post-attack outcomes of completed trials.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeCounts {
    pub source: usize,
    pub target: usize,
    pub other: usize,
    pub abstain: usize,
}

impl OutcomeCounts {
    pub fn tally(records: &[TrialRecord]) -> Self {
        let mut c = Self::default();
        for o in records.iter().filter(|r| r.is_completed()).filter_map(TrialRecord::outcome) {
            match o {
                Outcome::Source => c.source += 1,
                Outcome::Target => c.target += 1,
                Outcome::Other => c.other += 1,
                Outcome::Abstain => c.abstain += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.source + self.target + self.other + self.abstain
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub trials: usize,
    pub failed: usize,
    pub targeted: bool,
    /// Targeted ASR for targeted cells, untargeted ASR otherwise.
    pub asr: f64,
    pub asr_untargeted: f64,
    /// Certified as some label other than the source; abstentions excluded.
    pub asr_strict: f64,
    pub dos: f64,
    pub counts: OutcomeCounts,
    pub mean_spoofing_radius: Option<f64>,
    pub spoofed: usize,
    pub mean_source_radius: f64,
    pub mean_l2: f64,
    pub mean_linf: f64,
    pub mean_tv: f64,
}

/// Summarises one cell. All records must share a goal kind.
pub fn summarize(records: &[TrialRecord]) -> Result<MetricsSummary> {
    let targeted = records.first().is_some_and(|r| r.target_label.is_some());
    if records.iter().any(|r| r.target_label.is_some() != targeted) {
        return Err(Error::Domain("cannot summarise targeted and untargeted records together".into()));
    }
    let done = completed(records)?;
    let n = done.len() as f64;
    let mean = |f: fn(&TrialRecord) -> f64| done.iter().map(|r| f(r)).sum::<f64>() / n;
    let asr_untargeted = asr_untargeted(records)?;
    Ok(MetricsSummary {
        trials: done.len(),
        failed: records.len() - done.len(),
        targeted,
        asr: if targeted { asr_targeted(records)? } else { asr_untargeted },
        asr_untargeted,
        asr_strict: fraction(records, |r| matches!(r.post.map(|p| p.decision), Some(Decision::Class(c)) if c != r.source_label))?,
        dos: dos_rate(records)?,
        counts: OutcomeCounts::tally(records),
        mean_spoofing_radius: mean_spoofing_radius(records),
        spoofed: done.iter().filter(|r| spoofed(r)).count(),
        mean_source_radius: mean(|r| r.source.radius),
        mean_l2: mean(|r| r.l2_norm),
        mean_linf: mean(|r| r.linf_norm),
        mean_tv: mean(|r| r.total_variation),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::{AttackKind, CertRecord, DefenseKind, MaskStrategy, RECORD_SCHEMA_VERSION};
    use crate::smoothing::SmoothingConfig;
    use crate::tensor::Shape;

    fn record(source: usize, target: Option<usize>, post: Decision, radius: f64) -> TrialRecord {
        TrialRecord {
            schema_version: RECORD_SCHEMA_VERSION,
            image_id: 0,
            source_label: source,
            target_label: target,
            defense: DefenseKind::Single,
            sigma: 0.25,
            epsilon: 10.0,
            budget: 10.0,
            attack: AttackKind::Ghostcert,
            mask: MaskStrategy::default(),
            mask_area: None,
            smoothing: SmoothingConfig::default(),
            step_size: 0.1,
            steps: 1,
            noise_batch: 1,
            source: CertRecord { decision: Decision::Class(source), radius: 0.5, pa_lower: 0.9, seed: 0 },
            post: Some(CertRecord { decision: post, radius, pa_lower: 0.9, seed: 1 }),
            l2_norm: 0.0,
            linf_norm: 0.0,
            total_variation: 0.0,
            skipped_steps: 0,
            attack_seed: 0,
            adversarial: None,
            error: None,
            wall_time_secs: 0.0,
        }
    }

    #[test]
    fn untargeted_asr_examples() {
        let all_source: Vec<_> = (0..5).map(|_| record(1, None, Decision::Class(1), 0.3)).collect();
        assert_eq!(asr_untargeted(&all_source).unwrap(), 0.0);
        let all_abstain: Vec<_> = (0..5).map(|_| record(1, None, Decision::Abstain, 0.0)).collect();
        assert_eq!(asr_untargeted(&all_abstain).unwrap(), 1.0);
        let six_of_twenty: Vec<_> = (0..20)
            .map(|i| record(1, None, if i < 6 { Decision::Class(2) } else { Decision::Class(1) }, 0.3))
            .collect();
        assert_eq!(asr_untargeted(&six_of_twenty).unwrap(), 0.30);
        assert!(asr_untargeted(&[]).is_err());
    }

    #[test]
    fn targeted_and_dos_examples() {
        let abstain: Vec<_> = (0..4).map(|_| record(1, Some(2), Decision::Abstain, 0.0)).collect();
        assert_eq!(asr_targeted(&abstain).unwrap(), 0.0);
        assert_eq!(dos_rate(&abstain).unwrap(), 1.0);
        let hit: Vec<_> = (0..4).map(|_| record(1, Some(2), Decision::Class(2), 0.4)).collect();
        assert_eq!(asr_targeted(&hit).unwrap(), 1.0);
        assert_eq!(dos_rate(&hit).unwrap(), 0.0);
        let eight: Vec<_> = (0..100)
            .map(|i| record(1, Some(2), if i < 8 { Decision::Abstain } else { Decision::Class(1) }, 0.0))
            .collect();
        assert_eq!(dos_rate(&eight).unwrap(), 0.08);
        assert!(asr_targeted(&[record(1, None, Decision::Class(2), 0.1)]).is_err());
    }

    #[test]
    fn spoofing_radius_only_counts_certified_successes() {
        assert_eq!(mean_spoofing_radius(&[record(1, None, Decision::Class(0), 1.23)]), Some(1.23));
        let zeros = [record(1, None, Decision::Class(0), 0.0), record(1, None, Decision::Class(3), 0.0)];
        assert_eq!(mean_spoofing_radius(&zeros), Some(0.0));
        assert_eq!(mean_spoofing_radius(&[record(1, None, Decision::Abstain, 0.0)]), None);
        // a targeted trial landing on a third label is not a spoof
        assert_eq!(mean_spoofing_radius(&[record(1, Some(2), Decision::Class(3), 0.7)]), None);
    }

    #[test]
    fn targeted_partition_is_exhaustive() {
        let decisions = [Decision::Class(1), Decision::Class(2), Decision::Class(3), Decision::Abstain, Decision::Class(2)];
        let recs: Vec<_> = decisions.iter().map(|d| record(1, Some(2), *d, 0.2)).collect();
        let s = summarize(&recs).unwrap();
        assert_eq!(s.counts, OutcomeCounts { source: 1, target: 2, other: 1, abstain: 1 });
        assert_eq!(s.counts.total(), s.trials);
        assert!(s.asr <= s.asr_untargeted);
        assert!(summarize(&[record(1, Some(2), Decision::Abstain, 0.0), record(1, None, Decision::Abstain, 0.0)]).is_err());
    }

    #[test]
    fn imperceptibility_examples() {
        let x = Image::filled(Shape::new(2, 2, 1), 0.25);
        assert_eq!(imperceptibility_metrics(&x, &x).unwrap(), Imperceptibility { l2: 0.0, linf: 0.0, tv: 0.0 });
        let mut adv = x.clone();
        adv.set(1, 0, 0, 0.75);
        let m = imperceptibility_metrics(&x, &adv).unwrap();
        assert_eq!((m.l2, m.linf), (0.5, 0.5));
    }
}
