//! Versioned FIFO experience buffer and staleness bookkeeping.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{domain, Error, Result};
use crate::stats::nearest_rank;

/// Default buffer capacity.
pub const DEFAULT_CAPACITY: usize = 50_000;

/// One environment step recorded by an actor.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    /// The episode terminated at `next_obs` (no bootstrap).
    pub done: bool,
    pub behavior_logprob: f64,
    pub behavior_version: u64,
    /// Number of transitions that follow this one in its rollout segment.
    pub segment_remaining: u32,
}

impl Transition {
    pub fn validate(&self) -> Result<()> {
        if !self.behavior_logprob.is_finite() || self.behavior_logprob > 0.0 {
            return Err(domain(format!("behavior log-prob must be finite and <= 0, got {}", self.behavior_logprob)));
        }
        if !self.reward.is_finite() || self.obs.iter().chain(&self.next_obs).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("transition contains non-finite values".into()));
        }
        Ok(())
    }
}

/// `learner_version - behavior_version`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VersionGap(u64);

impl VersionGap {
    pub fn new(learner_version: u64, behavior_version: u64) -> Result<Self> {
        learner_version
            .checked_sub(behavior_version)
            .map(Self)
            .ok_or_else(|| domain(format!("behavior version {behavior_version} is ahead of learner version {learner_version}")))
    }

    pub fn get(self) -> u64 {
        self.0
    }
}

/// A transition drawn from the buffer together with its rollout suffix.
#[derive(Clone, Debug, PartialEq)]
pub struct Sampled {
    /// Global insertion index.
    pub seq: u64,
    pub gap: VersionGap,
    /// The sampled transition followed by the rest of its segment.
    pub suffix: Vec<Transition>,
}

impl Sampled {
    pub fn transition(&self) -> &Transition {
        &self.suffix[0]
    }
}

/// Ring buffer with oldest-first eviction and a monotone insertion counter.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
    inserted: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(domain("replay capacity must be positive"));
        }
        Ok(Self {
            capacity,
            items: VecDeque::with_capacity(capacity.min(1 << 20)),
            inserted: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Total number of transitions ever appended.
    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    /// Insertion index of the oldest stored transition.
    pub fn first_seq(&self) -> u64 {
        self.inserted - self.items.len() as u64
    }

    pub fn get(&self, seq: u64) -> Option<&Transition> {
        let offset = seq.checked_sub(self.first_seq())?;
        self.items.get(usize::try_from(offset).ok()?)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    pub fn append(&mut self, transition: Transition) -> Result<()> {
        transition.validate()?;
        self.push_unchecked(transition);
        Ok(())
    }

    fn push_unchecked(&mut self, transition: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(transition);
        self.inserted += 1;
    }

    /// Appends a whole rollout segment. Segment bookkeeping
    /// (`segment_remaining`) is filled in here.
    pub fn append_segment(&mut self, mut segment: Vec<Transition>) -> Result<()> {
        if segment.len() > self.capacity {
            return Err(domain(format!(
                "segment of length {} exceeds capacity {}",
                segment.len(),
                self.capacity
            )));
        }
        let n = segment.len();
        for (i, t) in segment.iter_mut().enumerate() {
            t.validate()?;
            t.segment_remaining = (n - 1 - i) as u32;
        }
        for t in segment {
            self.push_unchecked(t);
        }
        Ok(())
    }

    /// The transition at `seq` and the rest of its segment.
    pub fn suffix(&self, seq: u64) -> Result<Vec<Transition>> {
        let first = self
            .get(seq)
            .ok_or_else(|| Error::Index(format!("sequence {seq} is not in the buffer")))?;
        let n = first.segment_remaining as u64 + 1;
        (seq..seq + n)
            .map(|s| {
                self.get(s)
                    .cloned()
                    .ok_or_else(|| Error::Index(format!("segment continuation {s} missing")))
            })
            .collect()
    }

    /// Draws insertion indices uniformly with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<Vec<u64>> {
        if self.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        let first = self.first_seq();
        let n = self.items.len() as u64;
        Ok((0..batch_size).map(|_| first + rng.random_range(0..n)).collect())
    }

    /// Uniform sample with replacement; version gaps are computed against
    /// `learner_version` at sample time.
    pub fn sample_uniform<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        learner_version: u64,
        rng: &mut R,
    ) -> Result<Vec<Sampled>> {
        self.sample_indices(batch_size, rng)?
            .into_iter()
            .map(|seq| {
                let suffix = self.suffix(seq)?;
                let gap = VersionGap::new(learner_version, suffix[0].behavior_version)?;
                Ok(Sampled { seq, gap, suffix })
            })
            .collect()
    }

    /// Writes the buffer as a line-delimited binary log: a text header line
    /// followed by one length-prefixed, newline-terminated record per entry.
    pub fn dump<W: Write>(&self, out: W) -> Result<()> {
        let mut out = BufWriter::new(out);
        writeln!(out, "gipo-replay 1 {} {} {}", self.capacity, self.inserted, self.items.len())?;
        let mut rec = Vec::new();
        for t in &self.items {
            rec.clear();
            encode(t, &mut rec);
            out.write_all(&(rec.len() as u32).to_le_bytes())?;
            out.write_all(&rec)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load<R: Read>(input: R) -> Result<Self> {
        let mut input = BufReader::new(input);
        let mut header = Vec::new();
        let mut byte = [0u8; 1];
        loop {
            input.read_exact(&mut byte)?;
            if byte[0] == b'\n' {
                break;
            }
            header.push(byte[0]);
            if header.len() > 256 {
                return Err(Error::Format("replay header too long".into()));
            }
        }
        let header = String::from_utf8(header).map_err(|_| Error::Format("replay header is not UTF-8".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        let parse = |i: usize| -> Result<u64> {
            fields
                .get(i)
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| Error::Format(format!("bad replay header {header:?}")))
        };
        if fields.len() != 5 || fields[0] != "gipo-replay" || fields[1] != "1" {
            return Err(Error::Format(format!("bad replay header {header:?}")));
        }
        let (capacity, inserted, len) = (parse(2)? as usize, parse(3)?, parse(4)? as usize);
        if len > capacity || len as u64 > inserted {
            return Err(Error::Format("replay header counts are inconsistent".into()));
        }
        let mut buffer = Self::new(capacity)?;
        for _ in 0..len {
            let mut len_bytes = [0u8; 4];
            input.read_exact(&mut len_bytes)?;
            let mut rec = vec![0u8; u32::from_le_bytes(len_bytes) as usize];
            input.read_exact(&mut rec)?;
            input.read_exact(&mut byte)?;
            if byte[0] != b'\n' {
                return Err(Error::Format("replay record is not newline-terminated".into()));
            }
            buffer.items.push_back(decode(&rec)?);
        }
        if input.read(&mut byte)? != 0 {
            return Err(Error::Format("trailing bytes after replay records".into()));
        }
        buffer.inserted = inserted;
        Ok(buffer)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.dump(File::create(path)?)
    }

    pub fn load_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::load(File::open(path)?)
    }
}

fn encode(t: &Transition, out: &mut Vec<u8>) {
    out.extend((t.action as u64).to_le_bytes());
    out.extend(t.reward.to_le_bytes());
    out.push(t.done as u8);
    out.extend(t.behavior_logprob.to_le_bytes());
    out.extend(t.behavior_version.to_le_bytes());
    out.extend(t.segment_remaining.to_le_bytes());
    for v in [&t.obs, &t.next_obs] {
        out.extend((v.len() as u32).to_le_bytes());
        for x in v.iter() {
            out.extend(x.to_le_bytes());
        }
    }
}

struct Cursor<'a>(&'a [u8]);

impl Cursor<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        if self.0.len() < N {
            return Err(Error::Format("truncated replay record".into()));
        }
        let (head, rest) = self.0.split_at(N);
        self.0 = rest;
        Ok(head.try_into().expect("length checked"))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    fn vec(&mut self) -> Result<Vec<f64>> {
        let n = self.u32()? as usize;
        (0..n).map(|_| self.f64()).collect()
    }
}

fn decode(rec: &[u8]) -> Result<Transition> {
    let mut c = Cursor(rec);
    let action = c.u64()? as usize;
    let reward = c.f64()?;
    let done = match c.take::<1>()?[0] {
        0 => false,
        1 => true,
        other => return Err(Error::Format(format!("bad done flag {other}"))),
    };
    let t = Transition {
        action,
        reward,
        done,
        behavior_logprob: c.f64()?,
        behavior_version: c.u64()?,
        segment_remaining: c.u32()?,
        obs: c.vec()?,
        next_obs: c.vec()?,
    };
    if !c.0.is_empty() {
        return Err(Error::Format("replay record has trailing bytes".into()));
    }
    t.validate()?;
    Ok(t)
}

/// Fraction of stale samples and the 0.95 nearest-rank quantile of the gaps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StalenessSummary {
    pub old_frac: f64,
    pub old_gap_p95: f64,
}

pub fn staleness_summary(gaps: &[VersionGap], t_old: u64) -> Result<StalenessSummary> {
    if gaps.is_empty() {
        return Err(domain("staleness summary of an empty batch"));
    }
    let old = gaps.iter().filter(|g| g.get() >= t_old).count();
    let values: Vec<f64> = gaps.iter().map(|g| g.get() as f64).collect();
    Ok(StalenessSummary {
        old_frac: old as f64 / gaps.len() as f64,
        old_gap_p95: nearest_rank(&values, 0.95).expect("nonempty"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn tr(id: usize, version: u64) -> Transition {
        Transition {
            obs: vec![id as f64],
            action: id % 4,
            reward: -1.0,
            next_obs: vec![id as f64 + 1.0],
            done: false,
            behavior_logprob: -1.386,
            behavior_version: version,
            segment_remaining: 0,
        }
    }

    fn gaps(v: &[u64]) -> Vec<VersionGap> {
        v.iter().map(|&g| VersionGap(g)).collect()
    }

    #[test]
    fn append_and_evict() {
        let mut b = ReplayBuffer::new(3).unwrap();
        b.append(tr(0, 0)).unwrap();
        assert_eq!(b.len(), 1);
        for i in 1..4 {
            b.append(tr(i, 0)).unwrap();
        }
        assert_eq!(b.len(), 3);
        assert_eq!(b.iter().next().unwrap().obs, vec![1.0]);
        assert_eq!(b.first_seq(), 1);
        assert!(b.get(0).is_none());
        assert_eq!(DEFAULT_CAPACITY, 50_000);
    }

    #[test]
    fn rejects_bad_transitions() {
        let mut b = ReplayBuffer::new(3).unwrap();
        let mut t = tr(0, 0);
        t.behavior_logprob = f64::NAN;
        assert!(b.append(t).is_err());
        assert!(ReplayBuffer::new(0).is_err());
        assert!(VersionGap::new(3, 4).is_err());
    }

    #[test]
    fn sampling_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let empty = ReplayBuffer::new(4).unwrap();
        assert!(matches!(empty.sample_uniform(3, 0, &mut rng), Err(Error::EmptyBuffer)));

        let mut b = ReplayBuffer::new(4).unwrap();
        b.append(tr(7, 5)).unwrap();
        let batch = b.sample_uniform(5, 5, &mut rng).unwrap();
        assert!(batch.iter().all(|s| s.seq == 0 && s.gap.get() == 0 && s.transition() == &tr(7, 5)));
        let batch = b.sample_uniform(5, 9, &mut rng).unwrap();
        assert!(batch.iter().all(|s| s.gap.get() == 4));
    }

    #[test]
    fn segments_and_suffixes() {
        let mut b = ReplayBuffer::new(5).unwrap();
        b.append_segment((0..3).map(|i| tr(i, 0)).collect()).unwrap();
        b.append_segment((3..6).map(|i| tr(i, 1)).collect()).unwrap();
        // seq 0 evicted; segment [3,4,5] intact
        assert!(b.suffix(0).is_err());
        let s = b.suffix(1).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[1].obs, vec![2.0]);
        let s = b.suffix(3).unwrap();
        assert_eq!(s.iter().map(|t| t.segment_remaining).collect::<Vec<_>>(), vec![2, 1, 0]);
        assert!(b.append_segment((0..6).map(|i| tr(i, 0)).collect()).is_err());
    }

    #[test]
    fn chi_square_uniformity() {
        let mut b = ReplayBuffer::new(100).unwrap();
        for i in 0..150 {
            b.append(tr(i, 0)).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let draws = b.sample_indices(100_000, &mut rng).unwrap();
        let mut counts = [0u64; 100];
        for seq in draws {
            counts[(seq - b.first_seq()) as usize] += 1;
        }
        let expected = 1000.0;
        let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        let p = 1.0 - ChiSquared::new(99.0).unwrap().cdf(stat);
        assert!(p > 1e-3, "chi2 = {stat}, p = {p}");
    }

    #[test]
    fn staleness_examples() {
        let s = staleness_summary(&gaps(&[0; 10]), 10_000).unwrap();
        assert_eq!((s.old_frac, s.old_gap_p95), (0.0, 0.0));
        let s = staleness_summary(&gaps(&[20_000; 10]), 10_000).unwrap();
        assert_eq!((s.old_frac, s.old_gap_p95), (1.0, 20_000.0));
        let mut v = vec![0; 90];
        v.extend([20_000; 10]);
        let s = staleness_summary(&gaps(&v), 10_000).unwrap();
        assert_eq!(s.old_frac, 0.1);
        // ceil(0.95 * 100) = 95th order statistic
        assert_eq!(s.old_gap_p95, 20_000.0);
        assert!(staleness_summary(&[], 1).is_err());
    }

    #[test]
    fn dump_round_trip() {
        let mut b = ReplayBuffer::new(4).unwrap();
        let mut t = tr(1, 3);
        t.done = true;
        t.obs = vec![0.5, 10.0, -2.25];
        t.next_obs = vec![];
        b.append(t).unwrap();
        for i in 0..4 {
            b.append(tr(i, 4)).unwrap();
        }
        b.append_segment(vec![tr(10, 5), tr(11, 5)]).unwrap();
        let mut bytes = Vec::new();
        b.dump(&mut bytes).unwrap();
        let back = ReplayBuffer::load(bytes.as_slice()).unwrap();
        assert_eq!(back.inserted(), b.inserted());
        assert_eq!(back.capacity(), 4);
        assert!(back.iter().eq(b.iter()));
        assert!(ReplayBuffer::load(&bytes[..bytes.len() - 3]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(ReplayBuffer::load(extra.as_slice()).is_err());
    }

    proptest! {
        #[test]
        fn eviction_is_fifo(cap in 1usize..20, n in 0usize..60) {
            let mut b = ReplayBuffer::new(cap).unwrap();
            for i in 0..n {
                b.append(tr(i, 0)).unwrap();
            }
            let kept: Vec<usize> = b.iter().map(|t| t.obs[0] as usize).collect();
            let expected: Vec<usize> = (n.saturating_sub(cap)..n).collect();
            prop_assert_eq!(kept, expected);
            prop_assert_eq!(b.len(), n.min(cap));
        }

        #[test]
        fn gaps_are_monotone(learner in 0u64..1000, mut versions in proptest::collection::vec(0u64..1000, 1..20)) {
            versions.retain(|&v| v <= learner);
            versions.sort_unstable();
            let g: Vec<u64> = versions.iter().map(|&v| VersionGap::new(learner, v).unwrap().get()).collect();
            prop_assert!(g.windows(2).all(|w| w[0] >= w[1]));
        }

        #[test]
        fn summary_is_permutation_invariant(
            mut v in proptest::collection::vec(0u64..50, 1..40),
            t_old in 0u64..60,
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let a = staleness_summary(&gaps(&v), t_old).unwrap();
            v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let b = staleness_summary(&gaps(&v), t_old).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
