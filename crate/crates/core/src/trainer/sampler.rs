//! Speaker-interleaved batching.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::rng::{rng_for, tag};
use crate::{Error, Result};

/// Splits item indices into batches for one epoch. Items of each speaker
/// are shuffled, speakers are visited round-robin in a shuffled order, and
/// any batch that ends up with a single speaker is merged into the previous
/// one, so every batch holds at least two speakers.
pub fn speaker_batches(speakers: &[&str], batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::InvalidArgument("batch_size must be at least 2".into()));
    }
    let mut by_speaker: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in speakers.iter().enumerate() {
        by_speaker.entry(s).or_default().push(i);
    }
    if by_speaker.len() < 2 {
        return Err(Error::InterSpeakerNegativesUnavailable);
    }
    let mut rng = rng_for(seed, &[tag::SAMPLER, epoch as u64]);
    let mut queues: Vec<Vec<usize>> = by_speaker.into_values().collect();
    for q in &mut queues {
        q.shuffle(&mut rng);
    }
    queues.shuffle(&mut rng);
    let mut order = Vec::with_capacity(speakers.len());
    let mut cursor = vec![0usize; queues.len()];
    while order.len() < speakers.len() {
        for (q, c) in queues.iter().zip(cursor.iter_mut()) {
            if *c < q.len() {
                order.push(q[*c]);
                *c += 1;
            }
        }
    }
    let mut batches: Vec<Vec<usize>> = Vec::new();
    for chunk in order.chunks(batch_size) {
        let distinct = {
            let first = speakers[chunk[0]];
            chunk.iter().any(|&i| speakers[i] != first)
        };
        match batches.last_mut() {
            Some(prev) if !distinct || chunk.len() < 2 => prev.extend_from_slice(chunk),
            _ => batches.push(chunk.to_vec()),
        }
    }
    Ok(batches)
}
