//! Tensor grids, interpolation stencils and tabulated value functions.

use std::sync::atomic::{AtomicU64, Ordering};

static CLAMP_EVENTS: AtomicU64 = AtomicU64::new(0);

/// Number of lookups that fell outside a grid and were clamped to its edge.
pub fn clamp_events() -> u64 {
    CLAMP_EVENTS.load(Ordering::Relaxed)
}

fn note_clamp(v: f64, lo: f64, hi: f64) {
    CLAMP_EVENTS.fetch_add(1, Ordering::Relaxed);
    log::warn!("value {v:?} outside grid [{lo:?}, {hi:?}] clamped to the boundary");
}

/// One coordinate of a product grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Axis {
    values: Vec<f64>,
    /// Linear interpolation between neighbours; otherwise snap to the nearest value.
    interpolate: bool,
}

impl Axis {
    pub fn new(values: Vec<f64>, interpolate: bool) -> Axis {
        Axis {
            values,
            interpolate,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn interpolates(&self) -> bool {
        self.interpolate
    }

    /// Up to two (index, weight) pairs whose weighted values reproduce `v`.
    pub fn stencil(&self, v: f64, interpolate: bool) -> [(usize, f64); 2] {
        let n = self.values.len();
        let lo = self.values[0];
        let hi = self.values[n - 1];
        if n == 1 || v.is_nan() {
            return [(0, 1.0), (0, 0.0)];
        }
        if v < lo || v > hi {
            let span = hi - lo;
            if (v < lo && lo - v > 1e-9 * (1.0 + span)) || (v > hi && v - hi > 1e-9 * (1.0 + span))
            {
                note_clamp(v, lo, hi);
            }
            return if v < lo {
                [(0, 1.0), (0, 0.0)]
            } else {
                [(n - 1, 1.0), (0, 0.0)]
            };
        }
        // First index with value > v, minus one.
        let i = self
            .values
            .partition_point(|&x| x <= v)
            .saturating_sub(1)
            .min(n - 2);
        let (a, b) = (self.values[i], self.values[i + 1]);
        let t = (v - a) / (b - a);
        if interpolate && self.interpolate {
            if t <= 1e-12 {
                [(i, 1.0), (0, 0.0)]
            } else if t >= 1.0 - 1e-12 {
                [(i + 1, 1.0), (0, 0.0)]
            } else {
                [(i, 1.0 - t), (i + 1, t)]
            }
        } else if t <= 0.5 {
            [(i, 1.0), (0, 0.0)]
        } else {
            [(i + 1, 1.0), (0, 0.0)]
        }
    }
}

/// Row-major tensor product of axes; the last axis varies fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductGrid {
    names: Vec<String>,
    axes: Vec<Axis>,
    strides: Vec<usize>,
    len: usize,
}

impl ProductGrid {
    pub fn new(names: Vec<String>, axes: Vec<Axis>) -> ProductGrid {
        let mut strides = vec![1; axes.len()];
        let mut len = 1usize;
        for i in (0..axes.len()).rev() {
            strides[i] = len;
            len = len.saturating_mul(axes[i].len());
        }
        ProductGrid {
            names,
            axes,
            strides,
            len,
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dims(&self) -> usize {
        self.axes.len()
    }

    pub fn coords(&self, flat: usize) -> Vec<usize> {
        self.strides
            .iter()
            .zip(&self.axes)
            .map(|(s, a)| (flat / s) % a.len())
            .collect()
    }

    pub fn point(&self, flat: usize) -> Vec<f64> {
        self.coords(flat)
            .iter()
            .zip(&self.axes)
            .map(|(&c, a)| a.values[c])
            .collect()
    }

    pub fn flat(&self, coords: &[usize]) -> usize {
        coords.iter().zip(&self.strides).map(|(c, s)| c * s).sum()
    }

    /// Human-readable `name=value` listing of a grid point.
    pub fn describe(&self, flat: usize) -> String {
        self.names
            .iter()
            .zip(self.point(flat))
            .map(|(n, v)| format!("{n}={v:?}"))
            .collect::<Vec<_>>()
            .join(", ")
    }

    /// Multilinear stencil (or nearest point when `interpolate` is false).
    /// Entries with zero weight are dropped.
    pub fn stencil(&self, point: &[f64], interpolate: bool) -> Vec<(usize, f64)> {
        let mut out = vec![(0usize, 1.0f64)];
        for (d, axis) in self.axes.iter().enumerate() {
            let s = axis.stencil(point[d], interpolate);
            let mut next = Vec::with_capacity(out.len() * 2);
            for &(base, w) in &out {
                for &(i, wi) in &s {
                    if wi > 0.0 {
                        next.push((base + i * self.strides[d], w * wi));
                    }
                }
            }
            out = next;
        }
        out
    }
}

/// A function tabulated on a product grid, read back by multilinear interpolation.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueFunction {
    pub grid: ProductGrid,
    pub values: Vec<f64>,
}

impl ValueFunction {
    pub fn new(grid: ProductGrid, values: Vec<f64>) -> ValueFunction {
        assert_eq!(grid.len(), values.len(), "value table must cover the grid");
        ValueFunction { grid, values }
    }

    pub fn zeros(grid: ProductGrid) -> ValueFunction {
        let n = grid.len();
        ValueFunction::new(grid, vec![0.0; n])
    }

    pub fn over(&self) -> &[String] {
        self.grid.names()
    }

    pub fn eval(&self, point: &[f64]) -> f64 {
        self.eval_by(|d| point[d])
    }

    /// Multilinear lookup with coordinate `d` supplied by `coord(d)`.
    /// Any undefined corner makes the result negative infinity.
    pub fn eval_by(&self, coord: impl Fn(usize) -> f64) -> f64 {
        const MAX_DIMS: usize = 16;
        let dims = self.grid.dims();
        if dims > MAX_DIMS {
            let point: Vec<f64> = (0..dims).map(coord).collect();
            return self.eval_stencil(&self.grid.stencil(&point, true));
        }
        let mut sten = [[(0usize, 0.0f64); 2]; MAX_DIMS];
        let mut width = [1usize; MAX_DIMS];
        for (d, axis) in self.grid.axes.iter().enumerate() {
            let s = axis.stencil(coord(d), true);
            width[d] = if s[1].1 > 0.0 { 2 } else { 1 };
            sten[d] = s;
        }
        let mut acc = 0.0;
        let mut corner = [0usize; MAX_DIMS];
        loop {
            let mut flat = 0;
            let mut w = 1.0;
            for d in 0..dims {
                let (i, wi) = sten[d][corner[d]];
                flat += i * self.grid.strides[d];
                w *= wi;
            }
            let v = self.values[flat];
            if v == f64::NEG_INFINITY || v.is_nan() {
                return f64::NEG_INFINITY;
            }
            acc += w * v;
            // Odometer over the corners with nonzero weight.
            let mut d = 0;
            while d < dims {
                corner[d] += 1;
                if corner[d] < width[d] {
                    break;
                }
                corner[d] = 0;
                d += 1;
            }
            if d == dims {
                return acc;
            }
        }
    }

    fn eval_stencil(&self, st: &[(usize, f64)]) -> f64 {
        let mut acc = 0.0;
        for &(i, w) in st {
            let v = self.values[i];
            if v == f64::NEG_INFINITY || v.is_nan() {
                return f64::NEG_INFINITY;
            }
            acc += w * v;
        }
        acc
    }

    pub fn sup_distance(&self, other: &ValueFunction) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| if a == b { 0.0 } else { (a - b).abs() })
            .fold(0.0, f64::max)
    }
}
