use std::marker::PhantomData;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, LabeledDataset};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Augment {
    /// Mirror left-right with probability 0.5.
    pub hflip: bool,
    /// Zero-pad by this many pixels, then crop back at a random offset.
    pub crop_pad: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchOptions {
    pub batch_size: usize,
    pub seed: u64,
    pub epoch: u64,
    pub shuffle: bool,
    pub augment: Augment,
    /// Pairwise loss terms are in use, so a batch size below 2 is rejected.
    pub require_pairs: bool,
}

impl BatchOptions {
    pub fn sequential(batch_size: usize) -> Self {
        Self { batch_size, seed: 0, epoch: 0, shuffle: false, augment: Augment::default(), require_pairs: false }
    }
}

/// `inputs` is `[N, C, H, W]`, normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch<T> {
    pub inputs: Tensor<T>,
    pub labels: Vec<usize>,
    /// Dataset indices of the rows, in order.
    pub indices: Vec<usize>,
}

impl<T> LabeledBatch<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub struct Batches<'a, T> {
    ds: &'a LabeledDataset,
    order: Vec<usize>,
    pos: usize,
    opts: BatchOptions,
    flip_rng: ChaCha8Rng,
    crop_rng: ChaCha8Rng,
    _scalar: PhantomData<T>,
}

/// One epoch of batches. With `shuffle`, the order is a permutation keyed by
/// `(seed, epoch)`; the final short batch is kept.
pub fn batches<T: Scalar>(ds: &LabeledDataset, opts: BatchOptions) -> Result<Batches<'_, T>, DataError> {
    if opts.batch_size == 0 {
        return Err(DataError::Config("batch size must be positive".into()));
    }
    if opts.require_pairs && opts.batch_size < 2 {
        return Err(DataError::Config("batch size must be ≥ 2 for cc".into()));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    if opts.shuffle {
        order.shuffle(&mut stream_rng(opts.seed, Stream::Shuffle, opts.epoch));
    }
    Ok(Batches {
        ds,
        order,
        pos: 0,
        opts,
        flip_rng: stream_rng(opts.seed, Stream::Flip, opts.epoch),
        crop_rng: stream_rng(opts.seed, Stream::Crop, opts.epoch),
        _scalar: PhantomData,
    })
}

impl<T: Scalar> Batches<'_, T> {
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    fn write_image(&mut self, idx: usize, out: &mut [T]) {
        let ds = self.ds;
        let (h, w, c) = (ds.height(), ds.width(), ds.channels());
        let img = ds.image(idx);
        let norm = ds.normalization();
        let flip = self.opts.augment.hflip && self.flip_rng.random_bool(0.5);
        let (oy, ox, pad) = match self.opts.augment.crop_pad {
            Some(p) if p > 0 => (self.crop_rng.random_range(0..=2 * p), self.crop_rng.random_range(0..=2 * p), p),
            _ => (0, 0, 0),
        };
        for ch in 0..c {
            let pad_value = T::of(norm.apply(0, ch));
            for y in 0..h {
                for x in 0..w {
                    let sy = (y + oy) as isize - pad as isize;
                    let sx0 = (x + ox) as isize - pad as isize;
                    let sx = if flip { w as isize - 1 - sx0 } else { sx0 };
                    let v = if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                        pad_value
                    } else {
                        T::of(norm.apply(img[(sy as usize * w + sx as usize) * c + ch], ch))
                    };
                    out[ch * h * w + y * w + x] = v;
                }
            }
        }
    }
}

impl<T: Scalar> Iterator for Batches<'_, T> {
    type Item = LabeledBatch<T>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.opts.batch_size).min(self.order.len());
        let indices: Vec<usize> = self.order[self.pos..end].to_vec();
        self.pos = end;
        let ds = self.ds;
        let per = ds.image_len();
        let mut data = vec![T::zero(); indices.len() * per];
        for (row, &idx) in indices.iter().enumerate() {
            self.write_image(idx, &mut data[row * per..(row + 1) * per]);
        }
        let inputs = Tensor::new(vec![indices.len(), ds.channels(), ds.height(), ds.width()], data)
            .expect("batch shape matches buffer");
        let labels = indices.iter().map(|&i| ds.labels()[i]).collect();
        Some(LabeledBatch { inputs, labels, indices })
    }
}
