//! Trial scoring, EER, DET points and per-attack breakdowns.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::corpus::{AttackFamily, Label};
use crate::data::Example;
use crate::model::ModelParams;
use crate::{Error, Result};

pub const SCORE_HEADER: &str = "# prosdd-scores v1 polarity=bonafide-high";

#[derive(Debug, Clone, PartialEq)]
pub struct TrialScore {
    pub trial_id: String,
    pub label: Label,
    pub attack_family: AttackFamily,
    /// Higher means more bona fide.
    pub score: f64,
}

/// `logit(bonafide) - logit(spoof)` in evaluation mode, in input order.
pub fn score_trials(params: &ModelParams, examples: &[Example]) -> Result<Vec<TrialScore>> {
    examples
        .par_iter()
        .map(|e| {
            let logits = params.logits(&e.samples)?;
            let score = logits[0] - logits[1];
            if !score.is_finite() {
                return Err(Error::InvalidArgument(format!("non-finite score for {}", e.utterance_id)));
            }
            Ok(TrialScore { trial_id: e.utterance_id.clone(), label: e.label, attack_family: e.attack_family, score })
        })
        .collect()
}

/// (FAR, FRR) at thresholds `-inf`, every distinct score ascending, `+inf`.
/// FRR is the fraction of bona fide trials scoring below the threshold, FAR
/// the fraction of spoof trials scoring at or above it.
pub fn det_points(scores: &[TrialScore]) -> Result<Vec<(f64, f64)>> {
    let mut bona: Vec<f64> = scores.iter().filter(|s| s.label == Label::Bonafide).map(|s| s.score).collect();
    let mut spoof: Vec<f64> = scores.iter().filter(|s| s.label == Label::Spoof).map(|s| s.score).collect();
    if bona.is_empty() || spoof.is_empty() {
        return Err(Error::SingleClass);
    }
    if scores.iter().any(|s| s.score.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    bona.sort_by(f64::total_cmp);
    spoof.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = bona.iter().chain(&spoof).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let (nb, ns) = (bona.len() as f64, spoof.len() as f64);
    let mut points = Vec::with_capacity(thresholds.len() + 2);
    points.push((1.0, 0.0));
    // two pointers over the sorted score lists
    let (mut ib, mut is) = (0, 0);
    for &t in &thresholds {
        while ib < bona.len() && bona[ib] < t {
            ib += 1;
        }
        while is < spoof.len() && spoof[is] < t {
            is += 1;
        }
        points.push(((spoof.len() - is) as f64 / ns, ib as f64 / nb));
    }
    points.push((0.0, 1.0));
    Ok(points)
}

/// Interpolated crossing of FAR and FRR over consecutive operating points.
pub fn eer_from_points(points: &[(f64, f64)]) -> f64 {
    let d = |p: &(f64, f64)| p.0 - p.1;
    for i in 0..points.len() {
        let di = d(&points[i]);
        if di <= 0.0 {
            if di == 0.0 || i == 0 {
                return points[i].0;
            }
            let (prev, cur) = (points[i - 1], points[i]);
            let dp = d(&prev);
            return prev.0 + (cur.0 - prev.0) * dp / (dp - di);
        }
    }
    points.last().map_or(0.0, |p| p.0)
}

pub fn compute_eer(scores: &[TrialScore]) -> Result<f64> {
    Ok(eer_from_points(&det_points(scores)?))
}

/// EER of each spoof family present against all bona fide trials.
pub fn per_attack_report(scores: &[TrialScore]) -> Result<BTreeMap<AttackFamily, f64>> {
    let bona: Vec<&TrialScore> = scores.iter().filter(|s| s.label == Label::Bonafide).collect();
    if bona.is_empty() {
        return Err(Error::NoBonafide);
    }
    let mut families: BTreeMap<AttackFamily, Vec<TrialScore>> = BTreeMap::new();
    for s in scores.iter().filter(|s| s.label == Label::Spoof) {
        families.entry(s.attack_family).or_default().push(s.clone());
    }
    families
        .into_iter()
        .map(|(fam, mut trials)| {
            trials.extend(bona.iter().map(|&b| b.clone()));
            Ok((fam, compute_eer(&trials)?))
        })
        .collect()
}

/// `%.9g`-style formatting.
pub fn format_score(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-5..9).contains(&exp) {
        let m = trim_zeros(mantissa);
        return format!("{m}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs());
    }
    let decimals = (8 - exp).max(0) as usize;
    trim_zeros(&format!("{v:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn format_score_file(scores: &[TrialScore]) -> String {
    let mut out = String::with_capacity(scores.len() * 48 + SCORE_HEADER.len() + 1);
    out.push_str(SCORE_HEADER);
    out.push('\n');
    for s in scores {
        let _ = writeln!(out, "{}\t{}\t{}\t{}", s.trial_id, s.label.as_str(), s.attack_family, format_score(s.score));
    }
    out
}

pub fn parse_score_file(text: &str, origin: &str) -> Result<Vec<TrialScore>> {
    let bad = |line: usize, msg: &str| Error::Parse { path: origin.into(), msg: format!("line {line}: {msg}") };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == SCORE_HEADER => {}
        _ => return Err(bad(1, "missing score header")),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(bad(i + 1, "expected 4 tab-separated fields"));
        }
        let label = match f[1] {
            "bonafide" => Label::Bonafide,
            "spoof" => Label::Spoof,
            other => return Err(bad(i + 1, &format!("unknown label {other:?}"))),
        };
        let attack_family: AttackFamily = f[2].parse().map_err(|e: Error| bad(i + 1, &e.to_string()))?;
        let score: f64 = f[3].parse().map_err(|_| bad(i + 1, "score is not a number"))?;
        if !score.is_finite() {
            return Err(bad(i + 1, "score is not finite"));
        }
        out.push(TrialScore { trial_id: f[0].to_string(), label, attack_family, score });
    }
    Ok(out)
}

pub fn write_score_file(scores: &[TrialScore], path: &Path) -> Result<()> {
    std::fs::write(path, format_score_file(scores)).map_err(|e| Error::io(path, e))
}

pub fn read_score_file(path: &Path) -> Result<Vec<TrialScore>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_score_file(&text, &path.display().to_string())
}

/// Pooled EER and per-family EERs as percentages with two decimals.
pub fn metrics_report(scores: &[TrialScore]) -> Result<String> {
    let pooled = compute_eer(scores)?;
    let mut out = format!("EER {:.2}%\n", pooled * 100.0);
    for (fam, eer) in per_attack_report(scores)? {
        let _ = writeln!(out, "EER {fam} {:.2}%", eer * 100.0);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trials(bona: &[f64], spoof: &[f64]) -> Vec<TrialScore> {
        let mk = |i: usize, s: f64, label, fam| TrialScore { trial_id: format!("t{i}"), label, attack_family: fam, score: s };
        bona.iter()
            .enumerate()
            .map(|(i, &s)| mk(i, s, Label::Bonafide, AttackFamily::None))
            .chain(spoof.iter().enumerate().map(|(i, &s)| mk(100 + i, s, Label::Spoof, AttackFamily::FlatPitch)))
            .collect()
    }

    #[test]
    fn eer_examples() {
        assert_eq!(compute_eer(&trials(&[0.9, 0.8], &[0.1, 0.2])).unwrap(), 0.0);
        assert_eq!(compute_eer(&trials(&[0.9, 0.8, 0.7, 0.3], &[0.6, 0.4, 0.2, 0.1])).unwrap(), 0.25);
        assert_eq!(compute_eer(&trials(&[0.1, 0.2], &[0.9, 0.8])).unwrap(), 1.0);
        assert!(matches!(compute_eer(&trials(&[0.1], &[])), Err(Error::SingleClass)));
    }

    #[test]
    fn det_endpoints_and_monotonicity() {
        let pts = det_points(&trials(&[0.9, 0.8, 0.5], &[0.1, 0.5, 0.3])).unwrap();
        assert_eq!(pts[0], (1.0, 0.0));
        assert_eq!(*pts.last().unwrap(), (0.0, 1.0));
        for w in pts.windows(2) {
            assert!(w[1].0 <= w[0].0 && w[1].1 >= w[0].1);
        }
        let perfect = det_points(&trials(&[0.9, 0.8], &[0.1, 0.2])).unwrap();
        assert!(perfect.contains(&(0.0, 0.0)));
    }

    #[test]
    fn score_formatting() {
        assert_eq!(format_score(0.0), "0");
        assert_eq!(format_score(1.5), "1.5");
        assert_eq!(format_score(-2.0), "-2");
        assert_eq!(format_score(1.0 / 3.0), "0.333333333");
        assert_eq!(format_score(123456.789012), "123456.789");
        assert_eq!(format_score(1.25e-7), "1.25e-07");
        assert_eq!(format_score(6.02214076e23), "6.02214076e+23");
        assert_eq!(format_score(0.000123456789123), "0.000123456789");
    }

    #[test]
    fn score_file_round_trip() {
        let t = trials(&[0.9, -1.25], &[0.1]);
        let text = format_score_file(&t);
        assert!(text.starts_with(SCORE_HEADER));
        let back = parse_score_file(&text, "mem").unwrap();
        assert_eq!(back, t);
        assert!(parse_score_file("t\tbonafide\tnone\t1\n", "mem").is_err());
    }

    #[test]
    fn report_lines() {
        let mut t = trials(&[0.9, 0.8], &[0.1, 0.2]);
        t[3].attack_family = AttackFamily::CrossSpeakerProsody;
        let r = metrics_report(&t).unwrap();
        assert_eq!(r, "EER 0.00%\nEER A_flat_pitch 0.00%\nEER C_cross_speaker_prosody 0.00%\n");
        assert!(matches!(per_attack_report(&trials(&[], &[0.1])), Err(Error::NoBonafide)));
    }
}
