//! Semantic and autoregressive context: lockstep cropping and resizing of
//! image/label pairs, and streaming mean aggregation of per-pair features.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{invalid, Result};
use crate::volume::{crop, resample, Interpolation, Region3, Shape3, Volume};

/// An image and its label from another subject.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextPair {
    image: Volume,
    label: Volume,
}

impl ContextPair {
    pub fn new(image: Volume, label: Volume) -> Result<Self> {
        if image.channels() != 1 || label.channels() != 1 {
            return Err(invalid("context image and label must be single-channel"));
        }
        if image.shape() != label.shape() {
            return Err(invalid(format!(
                "context image {} and label {} differ in shape",
                image.shape(),
                label.shape()
            )));
        }
        Ok(Self { image, label })
    }

    pub fn image(&self) -> &Volume {
        &self.image
    }

    pub fn label(&self) -> &Volume {
        &self.label
    }

    pub fn shape(&self) -> Shape3 {
        self.image.shape()
    }

    /// Image and label stacked as a two-channel volume.
    pub fn stacked(&self) -> Volume {
        Volume::concat_channels(&[&self.image, &self.label]).expect("congruent by construction")
    }
}

/// A non-empty ordered set of mutually congruent context pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextSet {
    pairs: Vec<ContextPair>,
}

impl ContextSet {
    pub fn new(pairs: Vec<ContextPair>) -> Result<Self> {
        let first = pairs.first().ok_or_else(|| invalid("context set is empty"))?;
        let shape = first.shape();
        if let Some(p) = pairs.iter().find(|p| p.shape() != shape) {
            return Err(invalid(format!("context pair shape {} differs from {}", p.shape(), shape)));
        }
        Ok(Self { pairs })
    }

    pub fn pairs(&self) -> &[ContextPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn shape(&self) -> Shape3 {
        self.pairs[0].shape()
    }

    fn map(&self, f: impl Fn(&Volume) -> Volume) -> Self {
        let pairs = self
            .pairs
            .iter()
            .map(|p| ContextPair { image: f(&p.image), label: f(&p.label) })
            .collect();
        Self { pairs }
    }
}

/// The previous step's downsampled image and prediction, or nothing at the
/// first step.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum ArContext {
    #[default]
    Empty,
    Pair { image: Volume, prediction: Volume },
}

impl ArContext {
    pub fn new(image: Volume, prediction: Volume) -> Result<Self> {
        if image.channels() != 1 || prediction.channels() != 1 || image.shape() != prediction.shape() {
            return Err(invalid("autoregressive image and prediction must be congruent single-channel volumes"));
        }
        Ok(Self::Pair { image, prediction })
    }

    pub fn is_empty(&self) -> bool {
        matches!(self, Self::Empty)
    }

    pub fn stacked(&self) -> Option<Volume> {
        match self {
            Self::Empty => None,
            Self::Pair { image, prediction } => {
                Some(Volume::concat_channels(&[image, prediction]).expect("congruent by construction"))
            }
        }
    }
}

/// Crops every pair with the same region and pad value.
pub fn crop_context(set: &ContextSet, r: Region3, pad: f32) -> ContextSet {
    set.map(|v| crop(v, r, pad))
}

/// Resizes images and labels alike with trilinear interpolation, keeping
/// labels soft.
pub fn resize_context(set: &ContextSet, target: Shape3) -> ContextSet {
    set.map(|v| resample(v, target, Interpolation::Trilinear))
}

/// Live/peak byte counter for feature buffers held during aggregation.
#[derive(Debug, Default)]
pub struct MemoryProbe {
    live: AtomicUsize,
    peak: AtomicUsize,
}

impl MemoryProbe {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn acquire(&self, bytes: usize) {
        let now = self.live.fetch_add(bytes, Ordering::SeqCst) + bytes;
        self.peak.fetch_max(now, Ordering::SeqCst);
    }

    pub fn release(&self, bytes: usize) {
        self.live.fetch_sub(bytes, Ordering::SeqCst);
    }

    pub fn live(&self) -> usize {
        self.live.load(Ordering::SeqCst)
    }

    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }
}

/// Bytes held by a set of `f32` feature maps.
pub fn feature_set_bytes(set: &[Volume]) -> usize {
    set.iter().map(|v| v.as_slice().len() * std::mem::size_of::<f32>()).sum()
}

/// Running mean over per-pair feature sets.
///
/// Holds a single double-precision accumulator; each pushed set is folded
/// in and dropped, so residency does not grow with the number of pairs.
/// Folding happens in push order.
#[derive(Debug)]
pub struct FeatureAggregator<'p> {
    layout: Vec<(usize, Shape3)>,
    acc: Vec<Vec<f64>>,
    count: usize,
    probe: Option<&'p MemoryProbe>,
}

impl<'p> FeatureAggregator<'p> {
    pub fn new(probe: Option<&'p MemoryProbe>) -> Self {
        Self { layout: Vec::new(), acc: Vec::new(), count: 0, probe }
    }

    fn acc_bytes(&self) -> usize {
        self.acc.iter().map(|a| a.len() * std::mem::size_of::<f64>()).sum()
    }

    /// Reports a set that was just materialized and will be pushed.
    pub fn note_in_flight(&self, set: &[Volume]) {
        if let Some(p) = self.probe {
            p.acquire(feature_set_bytes(set));
        }
    }

    pub fn push(&mut self, set: Vec<Volume>) -> Result<()> {
        let layout: Vec<(usize, Shape3)> = set.iter().map(|v| (v.channels(), v.shape())).collect();
        if self.count == 0 {
            self.layout = layout;
            self.acc = set.iter().map(|v| vec![0.0; v.as_slice().len()]).collect();
            if let Some(p) = self.probe {
                p.acquire(self.acc_bytes());
            }
        } else if layout != self.layout {
            return Err(invalid("feature sets being aggregated are not congruent"));
        }
        for (acc, v) in self.acc.iter_mut().zip(&set) {
            for (a, &x) in acc.iter_mut().zip(v.as_slice()) {
                *a += x as f64;
            }
        }
        self.count += 1;
        if let Some(p) = self.probe {
            p.release(feature_set_bytes(&set));
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn finish(self) -> Result<Vec<Volume>> {
        if self.count == 0 {
            return Err(invalid("no context features were aggregated (k = 0)"));
        }
        if let Some(p) = self.probe {
            p.release(self.acc_bytes());
        }
        let k = self.count as f64;
        self.acc
            .into_iter()
            .zip(&self.layout)
            .map(|(acc, &(c, shape))| Volume::new(c, shape, acc.into_iter().map(|a| (a / k) as f32).collect()))
            .collect()
    }
}

/// Mean of `k` congruent feature sets drawn from `sets`.
pub fn aggregate_features<I>(sets: I, k: usize) -> Result<Vec<Volume>>
where
    I: IntoIterator<Item = Vec<Volume>>,
{
    if k == 0 {
        return Err(invalid("aggregation needs k >= 1"));
    }
    let mut agg = FeatureAggregator::new(None);
    for set in sets.into_iter().take(k) {
        agg.push(set)?;
    }
    if agg.count() != k {
        return Err(invalid(format!("expected {k} feature sets, received {}", agg.count())));
    }
    agg.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vol(c: usize, s: Shape3, seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume::from_fn(c, s, |_, _, _, _| rng.gen_range(0.0..1.0))
    }

    fn set(k: usize, s: Shape3, seed: u64) -> ContextSet {
        ContextSet::new(
            (0..k as u64)
                .map(|i| ContextPair::new(rand_vol(1, s, seed + 2 * i), rand_vol(1, s, seed + 2 * i + 1)).unwrap())
                .collect(),
        )
        .unwrap()
    }

    fn features(seed: u64) -> Vec<Volume> {
        vec![rand_vol(2, Shape3::cube(4).unwrap(), seed), rand_vol(4, Shape3::cube(2).unwrap(), seed + 99)]
    }

    #[test]
    fn construction_checks() {
        let a = Shape3::cube(3).unwrap();
        let b = Shape3::cube(4).unwrap();
        assert!(ContextPair::new(rand_vol(1, a, 1), rand_vol(1, b, 1)).is_err());
        assert!(ContextPair::new(rand_vol(2, a, 1), rand_vol(2, a, 1)).is_err());
        assert!(ContextSet::new(vec![]).is_err());
        let pa = ContextPair::new(rand_vol(1, a, 1), rand_vol(1, a, 2)).unwrap();
        let pb = ContextPair::new(rand_vol(1, b, 1), rand_vol(1, b, 2)).unwrap();
        assert!(ContextSet::new(vec![pa, pb]).is_err());
        assert!(ArContext::new(rand_vol(1, a, 1), rand_vol(1, b, 1)).is_err());
        assert!(ArContext::default().is_empty());
    }

    #[test]
    fn crop_context_examples() {
        let s = Shape3::new(5, 4, 6).unwrap();
        let ctx = set(3, s, 10);
        assert_eq!(crop_context(&ctx, Region3::whole(s), 0.0), ctx);
        let out = crop_context(&ctx, Region3::new([9, 9, 9], Shape3::cube(2).unwrap()), 0.5);
        for p in out.pairs() {
            assert!(p.image().as_slice().iter().chain(p.label().as_slice()).all(|&v| v == 0.5));
        }
        let r = Region3::new([3, 1, 2], Shape3::new(4, 4, 4).unwrap());
        let got = crop_context(&ctx, r, 0.0);
        for (g, p) in got.pairs().iter().zip(ctx.pairs()) {
            assert_eq!(g.image(), &crop(p.image(), r, 0.0));
            assert_eq!(g.label(), &crop(p.label(), r, 0.0));
        }
    }

    #[test]
    fn resize_context_examples() {
        let s = Shape3::new(5, 4, 6).unwrap();
        let ctx = set(2, s, 20);
        assert_eq!(resize_context(&ctx, s), ctx);
        let c = Volume::filled(1, s, 0.3);
        let constant = ContextSet::new(vec![ContextPair::new(c.clone(), c).unwrap()]).unwrap();
        let t = Shape3::new(9, 2, 3).unwrap();
        let out = resize_context(&constant, t);
        assert!(out.pairs()[0].label().as_slice().iter().all(|&v| v == 0.3));
        let got = resize_context(&ctx, t);
        for (g, p) in got.pairs().iter().zip(ctx.pairs()) {
            let want = resample(p.label(), t, Interpolation::Trilinear);
            assert!(g.label().max_abs_diff(&want) <= 1e-6);
        }
    }

    #[test]
    fn aggregation_examples() {
        let one = features(1);
        assert_eq!(aggregate_features(vec![one.clone()], 1).unwrap(), one);
        let copies = aggregate_features(std::iter::repeat(one.clone()), 6).unwrap();
        for (a, b) in copies.iter().zip(&one) {
            assert!(a.max_abs_diff(b) <= 1e-7);
        }
        assert!(aggregate_features(vec![one.clone()], 0).is_err());
        let mismatched = vec![one.clone(), vec![one[0].clone()]];
        assert!(aggregate_features(mismatched, 2).is_err());
    }

    #[test]
    fn streaming_mean_matches_batch_oracle() {
        let sets: Vec<Vec<Volume>> = (0..5).map(|i| features(100 + i)).collect();
        let got = aggregate_features(sets.clone(), 5).unwrap();
        for (site, g) in got.iter().enumerate() {
            let n = g.as_slice().len();
            for idx in 0..n {
                let want: f64 = sets.iter().map(|s| s[site].as_slice()[idx] as f64).sum::<f64>() / 5.0;
                assert!((g.as_slice()[idx] as f64 - want).abs() <= 1e-6);
            }
        }
        let mut rev = sets.clone();
        rev.reverse();
        let back = aggregate_features(rev, 5).unwrap();
        for (a, b) in got.iter().zip(&back) {
            assert!(a.max_abs_diff(b) <= 1e-6);
        }
    }

    #[test]
    fn probe_peak_is_independent_of_k() {
        let peaks: Vec<usize> = [1usize, 4, 16]
            .iter()
            .map(|&k| {
                let probe = MemoryProbe::new();
                let mut agg = FeatureAggregator::new(Some(&probe));
                for i in 0..k {
                    let f = features(i as u64);
                    agg.note_in_flight(&f);
                    agg.push(f).unwrap();
                }
                agg.finish().unwrap();
                assert_eq!(probe.live(), 0);
                probe.peak()
            })
            .collect();
        assert!(peaks.windows(2).all(|w| w[0] == w[1]), "{peaks:?}");
    }
}
