//! Interleaved fixed/arbitrary-timestep batch streams.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{augment_sample, sample_triplet_arbitrary, sample_triplet_fixed, AugmentConfig, SequenceRef, TripletSample};
use crate::error::{ensure, Result};
use crate::imaging::Frame;
use crate::scalar::Real;

/// Random-access collection of frame sequences.
pub trait SequenceSource<T: Real>: Send + Sync {
    fn len(&self) -> usize;
    fn load(&self, index: usize) -> Result<Vec<Frame<T>>>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<T: Real> SequenceSource<T> for Vec<Vec<Frame<T>>> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn load(&self, index: usize) -> Result<Vec<Frame<T>>> {
        Ok(self[index].clone())
    }
}

/// Sequences decoded from disk on demand.
pub struct DiskSource(pub Vec<SequenceRef>);

impl<T: Real> SequenceSource<T> for DiskSource {
    fn len(&self) -> usize {
        self.0.len()
    }

    fn load(&self, index: usize) -> Result<Vec<Frame<T>>> {
        self.0[index].load()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchSource {
    Fixed,
    Arbitrary,
}

#[derive(Debug, Clone)]
pub struct Batch<T: Real> {
    pub source: BatchSource,
    pub samples: Vec<TripletSample<T>>,
}

struct Cursor<T: Real> {
    kind: BatchSource,
    source: Box<dyn SequenceSource<T>>,
    order: Vec<usize>,
    next: usize,
    passes: u64,
}

/// Alternates batches between its sources, reshuffling each source when it is exhausted.
/// The stream is a pure function of the seed.
pub struct BatchStream<T: Real> {
    cursors: Vec<Cursor<T>>,
    turn: usize,
    batch_size: usize,
    augment: AugmentConfig,
    rng: ChaCha8Rng,
}

/// Stream that alternates F, A, F, A, ... between a fixed-timestep and an arbitrary-timestep source.
pub fn interleave_batches<T: Real>(
    fixed: Box<dyn SequenceSource<T>>,
    arbitrary: Box<dyn SequenceSource<T>>,
    batch_size: usize,
    augment: AugmentConfig,
    seed: u64,
) -> Result<BatchStream<T>> {
    BatchStream::new(Some(fixed), Some(arbitrary), batch_size, augment, seed)
}

impl<T: Real> BatchStream<T> {
    /// At least one source is required; a missing source is simply left out of the rotation.
    pub fn new(
        fixed: Option<Box<dyn SequenceSource<T>>>,
        arbitrary: Option<Box<dyn SequenceSource<T>>>,
        batch_size: usize,
        augment: AugmentConfig,
        seed: u64,
    ) -> Result<Self> {
        ensure!(batch_size >= 1, "batch size must be positive");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cursors = Vec::new();
        for (kind, src) in [(BatchSource::Fixed, fixed), (BatchSource::Arbitrary, arbitrary)] {
            if let Some(source) = src {
                ensure!(!source.is_empty(), "{kind:?} source is empty");
                let mut order: Vec<usize> = (0..source.len()).collect();
                order.shuffle(&mut rng);
                cursors.push(Cursor {
                    kind,
                    source,
                    order,
                    next: 0,
                    passes: 0,
                });
            }
        }
        ensure!(!cursors.is_empty(), "a batch stream needs at least one source");
        Ok(Self {
            cursors,
            turn: 0,
            batch_size,
            augment,
            rng,
        })
    }

    /// Batches needed to see every sequence of the largest source once.
    pub fn batches_per_epoch(&self) -> usize {
        let largest = self.cursors.iter().map(|c| c.source.len()).max().unwrap_or(0);
        largest.div_ceil(self.batch_size) * self.cursors.len()
    }

    pub fn next_batch(&mut self) -> Result<Batch<T>> {
        let idx = self.turn % self.cursors.len();
        self.turn += 1;
        let cursor = &mut self.cursors[idx];
        let mut samples = Vec::with_capacity(self.batch_size);
        for _ in 0..self.batch_size {
            if cursor.next == cursor.order.len() {
                cursor.order.shuffle(&mut self.rng);
                cursor.next = 0;
                cursor.passes += 1;
            }
            let frames = cursor.source.load(cursor.order[cursor.next])?;
            cursor.next += 1;
            let sample = match cursor.kind {
                BatchSource::Fixed => sample_triplet_fixed(&frames)?,
                BatchSource::Arbitrary => sample_triplet_arbitrary(&frames, &mut self.rng)?,
            };
            samples.push(augment_sample(sample, &mut self.rng, &self.augment)?);
        }
        Ok(Batch {
            source: cursor.kind,
            samples,
        })
    }
}

impl<T: Real> Iterator for BatchStream<T> {
    type Item = Result<Batch<T>>;

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.next_batch())
    }
}
