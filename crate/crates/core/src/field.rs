//! Grid functions on `D`: storage, bilinear interpolation, log-gradients and
//! the CSV exchange format.

use crate::geometry::{Point, Shape};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use thiserror::Error;

/// Values of a field below this are clamped before taking logarithms.
pub const LOG_CLAMP: f64 = 1e-300;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("grids differ")]
    GridMismatch,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad field header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Regular node lattice `origin + (i·h, j·h)`, `0 ≤ i < nx`, `0 ≤ j < ny`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub origin: Point,
    pub h: f64,
    pub nx: usize,
    pub ny: usize,
}

impl Grid {
    /// Lattice covering the bounding box of `shape` with a two-cell margin.
    pub fn covering(shape: &Shape, h: f64) -> Self {
        let (lo, hi) = shape.bounding_box();
        let margin = 2.0 * h;
        let nx = ((hi.x - lo.x + 2.0 * margin) / h).ceil() as usize + 1;
        let ny = ((hi.y - lo.y + 2.0 * margin) / h).ceil() as usize + 1;
        Self {
            origin: Point::new(lo.x - margin, lo.y - margin),
            h,
            nx,
            ny,
        }
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    pub fn coords(&self, idx: usize) -> (usize, usize) {
        (idx % self.nx, idx / self.nx)
    }

    pub fn point(&self, idx: usize) -> Point {
        let (i, j) = self.coords(idx);
        Point::new(
            self.origin.x + i as f64 * self.h,
            self.origin.y + j as f64 * self.h,
        )
    }

    /// Lower-left cell corner and local coordinates in `[0, 1]²`.
    fn locate(&self, p: Point) -> (usize, usize, f64, f64) {
        let fx = (p.x - self.origin.x) / self.h;
        let fy = (p.y - self.origin.y) / self.h;
        let i = (fx.floor().max(0.0) as usize).min(self.nx - 2);
        let j = (fy.floor().max(0.0) as usize).min(self.ny - 2);
        let tx = (fx - i as f64).clamp(0.0, 1.0);
        let ty = (fy - j as f64).clamp(0.0, 1.0);
        (i, j, tx, ty)
    }

    fn bilinear(&self, values: &[f64], p: Point) -> f64 {
        let (i, j, tx, ty) = self.locate(p);
        let k = self.index(i, j);
        let v00 = values[k];
        let v10 = values[k + 1];
        let v01 = values[k + self.nx];
        let v11 = values[k + self.nx + 1];
        (1.0 - ty) * ((1.0 - tx) * v00 + tx * v10) + ty * ((1.0 - tx) * v01 + tx * v11)
    }
}

/// Where a field's values are meaningful: the region `{dist(x, ∂D) > offset}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldDomain {
    pub shape: Shape,
    pub offset: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    grid: Grid,
    values: Vec<f64>,
    domain: FieldDomain,
    label: String,
}

impl ScalarField {
    pub fn from_values(grid: Grid, values: Vec<f64>, domain: FieldDomain, label: impl Into<String>) -> Self {
        assert_eq!(grid.len(), values.len(), "value count must match grid");
        Self {
            grid,
            values,
            domain,
            label: label.into(),
        }
    }

    pub fn from_fn(grid: Grid, domain: FieldDomain, label: impl Into<String>, f: impl Fn(Point) -> f64) -> Self {
        let values = (0..grid.len()).map(|k| f(grid.point(k))).collect();
        Self::from_values(grid, values, domain, label)
    }

    pub fn constant(grid: Grid, domain: FieldDomain, c: f64) -> Self {
        let n = grid.len();
        Self::from_values(grid, vec![c; n], domain, format!("const({c})"))
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn domain(&self) -> &FieldDomain {
        &self.domain
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    /// Bilinear interpolation; points outside the grid are clamped to it.
    pub fn at(&self, p: Point) -> f64 {
        self.grid.bilinear(&self.values, p)
    }

    /// Catmull–Rom bicubic interpolation; falls back to bilinear in the
    /// outermost cell ring.
    pub fn at_cubic(&self, p: Point) -> f64 {
        let g = &self.grid;
        let fx = (p.x - g.origin.x) / g.h;
        let fy = (p.y - g.origin.y) / g.h;
        let i = fx.floor();
        let j = fy.floor();
        if i < 1.0 || j < 1.0 || i + 2.0 > (g.nx - 1) as f64 || j + 2.0 > (g.ny - 1) as f64 {
            return self.at(p);
        }
        let (i, j) = (i as usize, j as usize);
        let (tx, ty) = (fx - i as f64, fy - j as f64);
        let wx = catmull_rom(tx);
        let wy = catmull_rom(ty);
        let mut acc = 0.0;
        for (b, wyb) in wy.iter().enumerate() {
            let row = g.index(i - 1, j + b - 1);
            let mut r = 0.0;
            for (a, wxa) in wx.iter().enumerate() {
                r += wxa * self.values[row + a];
            }
            acc += wyb * r;
        }
        acc
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Max/min over nodes strictly inside the field's own region.
    pub fn interior_extrema(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (k, &v) in self.values.iter().enumerate() {
            if self.domain.shape.signed_distance(self.grid.point(k), self.domain.offset) > 0.0 {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        (lo, hi)
    }

    pub fn map(&self, label: impl Into<String>, f: impl Fn(f64) -> f64) -> ScalarField {
        ScalarField {
            grid: self.grid.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
            domain: self.domain.clone(),
            label: label.into(),
        }
    }

    pub fn zip_with(
        &self,
        other: &ScalarField,
        label: impl Into<String>,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<ScalarField, FieldError> {
        if self.grid != other.grid {
            return Err(FieldError::GridMismatch);
        }
        Ok(ScalarField {
            grid: self.grid.clone(),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            domain: self.domain.clone(),
            label: label.into(),
        })
    }

    /// Integer linear combination `Σ c_i f_i` over fields sharing one grid.
    pub fn combination(terms: &[(i64, &ScalarField)], label: impl Into<String>) -> Result<ScalarField, FieldError> {
        let first = terms.first().expect("at least one term").1;
        let mut values = vec![0.0; first.values.len()];
        for (c, f) in terms {
            if f.grid != first.grid {
                return Err(FieldError::GridMismatch);
            }
            let c = *c as f64;
            for (acc, v) in values.iter_mut().zip(&f.values) {
                *acc += c * v;
            }
        }
        Ok(ScalarField {
            grid: first.grid.clone(),
            values,
            domain: first.domain.clone(),
            label: label.into(),
        })
    }

    /// Writes the field as a JSON header line followed by `x,y,value` rows.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<(), FieldError> {
        let header = CsvHeader {
            grid: self.grid.clone(),
            domain: self.domain.clone(),
            label: self.label.clone(),
        };
        writeln!(out, "{}", serde_json::to_string(&header)?)?;
        writeln!(out, "x,y,value")?;
        for (k, v) in self.values.iter().enumerate() {
            let p = self.grid.point(k);
            writeln!(out, "{},{},{}", p.x, p.y, v)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<ScalarField, FieldError> {
        let mut lines = input.lines().peekable();
        // leading `#` lines carry provenance and are ignored
        let mut skipped = 0;
        while let Some(Ok(l)) = lines.peek() {
            if !l.starts_with('#') {
                break;
            }
            lines.next();
            skipped += 1;
        }
        let header_line = lines.next().ok_or(FieldError::Parse {
            line: skipped + 1,
            message: "missing header".into(),
        })??;
        let header: CsvHeader = serde_json::from_str(&header_line)?;
        match lines.next() {
            Some(Ok(l)) if l.trim() == "x,y,value" => {}
            _ => {
                return Err(FieldError::Parse {
                    line: 2,
                    message: "expected column names x,y,value".into(),
                })
            }
        }
        let mut values = Vec::with_capacity(header.grid.len());
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let value = line
                .rsplit(',')
                .next()
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| FieldError::Parse {
                    line: n + 3,
                    message: format!("unparseable row {line:?}"),
                })?;
            values.push(value);
        }
        if values.len() != header.grid.len() {
            return Err(FieldError::Parse {
                line: values.len() + 2,
                message: format!("expected {} rows, found {}", header.grid.len(), values.len()),
            });
        }
        Ok(ScalarField {
            grid: header.grid,
            values,
            domain: header.domain,
            label: header.label,
        })
    }
}

fn catmull_rom(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    ]
}

#[derive(Serialize, Deserialize)]
struct CsvHeader {
    grid: Grid,
    domain: FieldDomain,
    label: String,
}

/// Node-wise vector field with bilinear interpolation.
#[derive(Clone, Debug)]
pub struct VectorField {
    grid: Grid,
    gx: Vec<f64>,
    gy: Vec<f64>,
}

impl VectorField {
    pub fn zero(grid: Grid) -> Self {
        let n = grid.len();
        Self {
            grid,
            gx: vec![0.0; n],
            gy: vec![0.0; n],
        }
    }

    pub fn at(&self, p: Point) -> Point {
        Point::new(self.grid.bilinear(&self.gx, p), self.grid.bilinear(&self.gy, p))
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn max_norm(&self) -> f64 {
        self.gx
            .iter()
            .zip(&self.gy)
            .map(|(a, b)| a.hypot(*b))
            .fold(0.0, f64::max)
    }
}

/// Central-difference gradient of `log(max(field, floor))`, one-sided at the
/// grid edge.
pub fn grad_log(field: &ScalarField, floor: f64) -> VectorField {
    let floor = floor.max(LOG_CLAMP);
    let grid = field.grid.clone();
    let logs: Vec<f64> = field.values.iter().map(|&v| v.max(floor).ln()).collect();
    let (nx, ny, h) = (grid.nx, grid.ny, grid.h);
    let mut gx = vec![0.0; grid.len()];
    let mut gy = vec![0.0; grid.len()];
    for j in 0..ny {
        for i in 0..nx {
            let k = grid.index(i, j);
            gx[k] = if i == 0 {
                (logs[k + 1] - logs[k]) / h
            } else if i == nx - 1 {
                (logs[k] - logs[k - 1]) / h
            } else {
                (logs[k + 1] - logs[k - 1]) / (2.0 * h)
            };
            gy[k] = if j == 0 {
                (logs[k + nx] - logs[k]) / h
            } else if j == ny - 1 {
                (logs[k] - logs[k - nx]) / h
            } else {
                (logs[k + nx] - logs[k - nx]) / (2.0 * h)
            };
        }
    }
    VectorField { grid, gx, gy }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn square_grid(h: f64) -> (Grid, FieldDomain) {
        let shape = Shape::Rect {
            min: Point::new(0.0, 0.0),
            max: Point::new(1.0, 1.0),
        };
        (Grid::covering(&shape, h), FieldDomain { shape, offset: 0.0 })
    }

    #[test]
    fn bilinear_reproduces_affine_functions() {
        let (grid, dom) = square_grid(0.1);
        let f = ScalarField::from_fn(grid, dom, "affine", |p| 2.0 * p.x - 3.0 * p.y + 1.0);
        for p in [Point::new(0.33, 0.71), Point::new(0.0, 0.0), Point::new(0.999, 0.5)] {
            assert_abs_diff_eq!(f.at(p), 2.0 * p.x - 3.0 * p.y + 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn grad_log_of_constant_vanishes() {
        let (grid, dom) = square_grid(0.05);
        let f = ScalarField::constant(grid, dom, 3.5);
        assert_eq!(grad_log(&f, 1e-12).max_norm(), 0.0);
    }

    #[test]
    fn grad_log_of_exponential() {
        // log(exp(a x)) = a x, so the central difference is exact up to rounding
        let a = 1.7;
        for h in [0.05, 0.025] {
            let (grid, dom) = square_grid(h);
            let f = ScalarField::from_fn(grid, dom, "exp", |p| (a * p.x).exp());
            let g = grad_log(&f, 1e-12);
            let v = g.at(Point::new(0.41, 0.63));
            assert_abs_diff_eq!(v.x, a, epsilon = 1e-9);
            assert_abs_diff_eq!(v.y, 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn grad_log_floor_bounds_gradient() {
        let (grid, dom) = square_grid(0.05);
        // zero on the left half, linear ramp on the right
        let f = ScalarField::from_fn(grid, dom, "ramp", |p| (p.x - 0.5).max(0.0));
        let floor = 1e-3;
        let g = grad_log(&f, floor);
        assert!(g.max_norm().is_finite());
        // |∇ log max(f, floor)| ≤ |∇f| / floor with |∇f| = 1, plus one-cell slack
        assert!(g.max_norm() <= 1.0 / floor * 1.0001);
    }

    proptest! {
        #[test]
        fn csv_round_trip_is_bit_exact(seed in any::<u64>(), h in 0.05f64..0.3) {
            let (grid, dom) = square_grid(h);
            let s = seed as f64 / u64::MAX as f64;
            let f = ScalarField::from_fn(grid, dom, "wiggle", |p| (p.x * 13.0 + s).sin() * (p.y * 7.3).exp() / 3.0);
            let mut buf = b"# config_hash=abc seed=7\n".to_vec();
            f.write_csv(&mut buf).unwrap();
            let back = ScalarField::read_csv(buf.as_slice()).unwrap();
            prop_assert_eq!(back, f);
        }
    }
}
