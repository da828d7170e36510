use std::collections::BTreeMap;

use rand::Rng;

use super::{AudioClip, BlendshapeSequence, ClipLabels, Dataset};
use crate::error::{Error, Result};

/// Two clips with swapped factors plus the targets of all four combinations.
///
/// `audio_a` carries content `c1` and emotion `e2`; `audio_b` carries content
/// `c2` and emotion `e1`. Both share speaker and emotion level.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossPair {
    pub audio_a: AudioClip,
    pub audio_b: AudioClip,
    pub gt_c1e1: BlendshapeSequence,
    pub gt_c2e2: BlendshapeSequence,
    pub gt_c1e2: BlendshapeSequence,
    pub gt_c2e1: BlendshapeSequence,
}

impl CrossPair {
    /// Labels of the recombined target `(c1, e1)`.
    pub fn labels_c1e1(&self) -> ClipLabels {
        self.audio_a
            .labels
            .with_content_emotion(self.audio_a.labels.content_id, self.audio_b.labels.emotion_id)
    }

    /// Labels of the recombined target `(c2, e2)`.
    pub fn labels_c2e2(&self) -> ClipLabels {
        self.audio_b
            .labels
            .with_content_emotion(self.audio_b.labels.content_id, self.audio_a.labels.emotion_id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct Candidate {
    a: ClipLabels,
    b: ClipLabels,
    c1e1: ClipLabels,
    c2e2: ClipLabels,
}

/// Precomputed enumeration of every valid `(c1, c2, e1, e2)` combination.
#[derive(Clone, Debug)]
pub struct PairSampler {
    cells: BTreeMap<ClipLabels, Vec<usize>>,
    candidates: Vec<Candidate>,
}

impl PairSampler {
    pub fn new(dataset: &Dataset) -> Result<Self> {
        let mut cells: BTreeMap<ClipLabels, Vec<usize>> = BTreeMap::new();
        for (i, s) in dataset.samples.iter().enumerate() {
            cells.entry(s.clip.labels).or_default().push(i);
        }
        let mut candidates = Vec::new();
        for a in cells.keys() {
            for b in cells.keys() {
                let same_group = a.speaker_id == b.speaker_id && a.level == b.level;
                if !same_group || a.content_id == b.content_id || a.emotion_id == b.emotion_id {
                    continue;
                }
                let c1e1 = a.with_content_emotion(a.content_id, b.emotion_id);
                let c2e2 = a.with_content_emotion(b.content_id, a.emotion_id);
                if cells.contains_key(&c1e1) && cells.contains_key(&c2e2) {
                    candidates.push(Candidate {
                        a: *a,
                        b: *b,
                        c1e1,
                        c2e2,
                    });
                }
            }
        }
        if candidates.is_empty() {
            return Err(Error::Exhausted(
                "need two contents and two emotions sharing a speaker and level".into(),
            ));
        }
        Ok(Self { cells, candidates })
    }

    pub fn n_candidates(&self) -> usize {
        self.candidates.len()
    }

    /// Every candidate using the first clip of each cell, in a fixed order.
    pub fn enumerate_indices(&self) -> Vec<[usize; 4]> {
        let first = |labels: &ClipLabels| self.cells[labels][0];
        self.candidates
            .iter()
            .map(|c| [first(&c.a), first(&c.b), first(&c.c1e1), first(&c.c2e2)])
            .collect()
    }

    /// Dataset indices `(a, b, c1e1, c2e2)` for one draw.
    pub fn sample_indices<R: Rng + ?Sized>(&self, rng: &mut R) -> [usize; 4] {
        let cand = self.candidates[rng.gen_range(0..self.candidates.len())];
        let mut pick = |labels: &ClipLabels| {
            let cell = &self.cells[labels];
            cell[rng.gen_range(0..cell.len())]
        };
        [pick(&cand.a), pick(&cand.b), pick(&cand.c1e1), pick(&cand.c2e2)]
    }

    pub fn sample<R: Rng + ?Sized>(&self, dataset: &Dataset, rng: &mut R) -> CrossPair {
        let [a, b, c1e1, c2e2] = self.sample_indices(rng);
        let s = &dataset.samples;
        CrossPair {
            audio_a: s[a].clip.clone(),
            audio_b: s[b].clip.clone(),
            gt_c1e1: s[c1e1].target.clone(),
            gt_c2e2: s[c2e2].target.clone(),
            gt_c1e2: s[a].target.clone(),
            gt_c2e1: s[b].target.clone(),
        }
    }
}

/// Draws one cross-reconstruction pair with `c1 != c2`, `e1 != e2`, same speaker.
pub fn sample_cross_pair<R: Rng + ?Sized>(dataset: &Dataset, rng: &mut R) -> Result<CrossPair> {
    Ok(PairSampler::new(dataset)?.sample(dataset, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_clip, FactorRanges, Sample};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(contents: usize, emotions: usize, speakers: usize) -> Dataset {
        let ranges = FactorRanges {
            n_contents: contents,
            n_emotions: emotions,
            n_levels: 1,
            n_speakers: speakers,
        };
        let mut samples = Vec::new();
        for s in 0..speakers {
            for c in 0..contents {
                for e in 0..emotions {
                    let (clip, target) = synth_clip(ClipLabels::new(c, e, 0, s), 0.2, 5, &ranges).unwrap();
                    samples.push(Sample {
                        clip,
                        target,
                        clip_index: 0,
                    });
                }
            }
        }
        Dataset::new(samples)
    }

    #[test]
    fn two_by_two_uses_both_factors() {
        let ds = grid(2, 2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let p = sample_cross_pair(&ds, &mut rng).unwrap();
            let (a, b) = (p.audio_a.labels, p.audio_b.labels);
            assert_ne!(a.content_id, b.content_id);
            assert_ne!(a.emotion_id, b.emotion_id);
            assert_eq!(a.speaker_id, b.speaker_id);
            let c1e1 = p.labels_c1e1();
            assert_eq!(c1e1.content_id, a.content_id);
            assert_eq!(c1e1.emotion_id, b.emotion_id);
        }
    }

    #[test]
    fn targets_match_recombined_labels() {
        let ds = grid(3, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ranges = FactorRanges {
            n_contents: 3,
            n_emotions: 3,
            n_levels: 1,
            n_speakers: 2,
        };
        for _ in 0..10 {
            let p = sample_cross_pair(&ds, &mut rng).unwrap();
            let (_, want) = synth_clip(p.labels_c1e1(), 0.2, 5, &ranges).unwrap();
            assert_eq!(p.gt_c1e1, want);
            let (_, want) = synth_clip(p.labels_c2e2(), 0.2, 5, &ranges).unwrap();
            assert_eq!(p.gt_c2e2, want);
        }
    }

    #[test]
    fn single_content_is_exhausted() {
        let ds = grid(1, 3, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(sample_cross_pair(&ds, &mut rng), Err(Error::Exhausted(_))));
    }

    #[test]
    fn seeded_sequence_is_reproducible() {
        let ds = grid(3, 3, 1);
        let sampler = PairSampler::new(&ds).unwrap();
        // 3 choices of content ordered pairs (6) times emotion ordered pairs (6)
        assert_eq!(sampler.n_candidates(), 36);
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..8).map(|_| sampler.sample_indices(&mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(42), draw(42));
        assert_ne!(draw(42), draw(43));
    }
}
