//! Runs the three Stage II variants over several seeds and prints EERs on
//! the expressive-shift split.
//!
//! cargo run --release --example ablation -- SEEDS [key=value ...]

use std::time::Instant;

use prosdd::config::RunConfig;
use prosdd::corpus::{generate, Split};
use prosdd::data::split_from_memory;
use prosdd::eval::{compute_eer, per_attack_report, score_trials};
use prosdd::speaker::SpeakerEncoder;
use prosdd::targets::corpus_targets;
use prosdd::trainer::{train_stage1, train_stage2, StageTwoMode};

fn main() -> prosdd::Result<()> {
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().map_or(3, |s| s.parse().expect("seed count"));
    let overrides: Vec<String> = args.collect();
    let cfg = RunConfig::load(None, &overrides)?;
    let (manifest, utts) = generate(&cfg.corpus, cfg.seed)?;
    let trip: Vec<_> = utts.iter().map(|u| (u.utterance_id.clone(), u.speaker_id.clone(), u.samples.clone())).collect();
    let targets = corpus_targets(&trip, &SpeakerEncoder::new(cfg.speaker.expansion_seed), &cfg.pitch)?;
    let split = |s| split_from_memory(&manifest, &utts, Some(&targets), s);
    let (s1, train, dev, eval) =
        (split(Split::Stage1Real)?, split(Split::Stage2Train)?, split(Split::Stage2Dev)?, split(Split::EvalExpressiveShift)?);
    let tc = cfg.trainer();
    let mut wins = [0, 0];
    for k in 0..seeds {
        let seed = cfg.train_seed + k;
        let t = Instant::now();
        let modes: Vec<StageTwoMode> = match std::env::var("MODES") {
            Ok(m) => m.split(',').map(|s| s.parse()).collect::<prosdd::Result<_>>()?,
            Err(_) => StageTwoMode::ALL.to_vec(),
        };
        let st1 = if modes.contains(&StageTwoMode::Full) {
            let st1 = train_stage1(&s1, &cfg.model, &tc, seed)?;
            let losses: Vec<String> = st1.history.iter().map(|h| format!("{:.3}", h.train_loss)).collect();
            println!("seed {seed} stage1 losses {}", losses.join(" "));
            Some(st1)
        } else {
            None
        };
        let mut means = Vec::new();
        for &mode in &modes {
            let out = train_stage2(&train, &dev, st1.as_ref().map(|o| o.selected()), mode, &cfg.model, &tc, seed)?;
            let scores = score_trials(out.selected(), &eval)?;
            let fam = per_attack_report(&scores)?;
            let mean = fam.values().sum::<f64>() / fam.len() as f64;
            let accs: Vec<String> =
                out.history.iter().map(|h| format!("{:.2}/{:.2}", h.train_loss, h.dev_accuracy.unwrap_or(f64::NAN))).collect();
            println!(
                "seed {seed} {mode:<10} pooled {:.3} mean {mean:.3} {fam:?} sel {} [{}]",
                compute_eer(&scores)?,
                out.selected_epoch,
                accs.join(" ")
            );
            means.push(mean);
        }
        if means.len() < 3 {
            continue;
        }
        if means[0] < means[2] {
            wins[0] += 1;
        }
        if means[0] <= means[1] {
            wins[1] += 1;
        }
        println!("seed {seed} done in {:?}; wins vs no_mp {} vs no_stage1 {}", t.elapsed(), wins[0], wins[1]);
    }
    Ok(())
}
