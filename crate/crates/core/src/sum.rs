//! Compensated (Neumaier) accumulation and the fixed-chunk ordered
//! reduction used for every average over Monte-Carlo realizations.

use rayon::prelude::*;

use crate::linalg::C64;

/// Realizations per reduction chunk. Fixed so that results do not depend on
/// the worker count.
pub const CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NeumaierSum {
    sum: f64,
    comp: f64,
}

impl NeumaierSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn merge(&mut self, other: &Self) {
        self.add(other.sum);
        self.add(other.comp);
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ComplexSum {
    re: NeumaierSum,
    im: NeumaierSum,
}

impl ComplexSum {
    pub fn add(&mut self, z: C64) {
        self.re.add(z.re);
        self.im.add(z.im);
    }

    pub fn merge(&mut self, other: &Self) {
        self.re.merge(&other.re);
        self.im.merge(&other.im);
    }

    pub fn value(&self) -> C64 {
        C64::new(self.re.value(), self.im.value())
    }
}

/// Accumulator that can be filled per chunk and merged in index order.
pub trait Accumulator: Send {
    fn merge(&mut self, other: Self);
}

/// Folds `0..n` with `fold` inside fixed-size chunks (in parallel) and merges
/// the chunk results in ascending chunk order.
pub fn ordered_reduce<A, I, F>(n: usize, init: I, fold: F) -> A
where
    A: Accumulator,
    I: Fn() -> A + Sync,
    F: Fn(&mut A, usize) + Sync,
{
    let n_chunks = n.div_ceil(CHUNK);
    let partials: Vec<A> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = init();
            for i in (c * CHUNK)..((c + 1) * CHUNK).min(n) {
                fold(&mut acc, i);
            }
            acc
        })
        .collect();
    let mut out = init();
    for p in partials {
        out.merge(p);
    }
    out
}
