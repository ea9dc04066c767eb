use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DatasetError, DatasetItem, Result, Split};

/// Train/val/test fractions; positive and summing to 1 within 1e-9.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitRatios {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let all = [train, val, test];
        let ok = all.iter().all(|r| r.is_finite() && *r > 0.0) && ((train + val + test) - 1.0).abs() <= 1e-9;
        if !ok {
            return Err(DatasetError::Ratios(all));
        }
        Ok(Self { train, val, test })
    }

    /// Parse `a,b,c`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>().unwrap_or(f64::NAN))
            .collect();
        match parts[..] {
            [a, b, c] => Self::new(a, b, c),
            _ => Err(DatasetError::Ratios([f64::NAN; 3])),
        }
    }

    /// `(train, val, test)` sizes for `n` items: val and test are floored,
    /// the remainder goes to train.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        // The epsilon keeps products like 10 * 0.6 from flooring to 5.
        let floor = |r: f64| ((n as f64) * r + 1e-9).floor() as usize;
        let val = floor(self.val);
        let test = floor(self.test).min(n - val);
        (n - val - test, val, test)
    }
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

/// Stems per split.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn get_mut(&mut self, split: Split) -> &mut Vec<String> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }

    pub fn split_of(&self, stem: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|s| self.get(*s).iter().any(|x| x == stem))
    }
}

/// Seeded shuffle followed by a contiguous train/val/test partition.
pub fn split_dataset(items: &[DatasetItem], ratios: SplitRatios, seed: u64) -> Result<Splits> {
    if items.is_empty() {
        return Err(DatasetError::Empty);
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (train, val, _) = ratios.sizes(items.len());
    let stems = |range: &[usize]| range.iter().map(|&i| items[i].stem.clone()).collect();
    Ok(Splits {
        train: stems(&order[..train]),
        val: stems(&order[train..train + val]),
        test: stems(&order[train + val..]),
    })
}
