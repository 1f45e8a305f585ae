//! Tensor-product Lagrange interpolation on the cell-centred velocity grid.

use super::grid::VelocityGrid;

/// Widest supported stencil per axis.
pub const MAX_STENCIL: usize = 8;

#[derive(Debug, Clone, Copy)]
struct Axis {
    start: usize,
    w: [f64; MAX_STENCIL],
}

/// Local Lagrange interpolation of width `width` per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interpolator {
    n: usize,
    dim: usize,
    width: usize,
}

impl Interpolator {
    pub fn new(grid: &VelocityGrid, width: usize) -> Self {
        assert!((2..=MAX_STENCIL).contains(&width) && width <= grid.n());
        Self {
            n: grid.n(),
            dim: grid.dim(),
            width,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Points per output stencil (`width^dim`).
    pub fn stencil_len(&self) -> usize {
        self.width.pow(self.dim as u32)
    }

    fn axis(&self, t: f64) -> Axis {
        let s = self.width;
        let start = ((t - s as f64 / 2.0).ceil().max(0.0) as usize).min(self.n - s);
        let mut w = [0.0; MAX_STENCIL];
        for a in 0..s {
            let xa = (start + a) as f64;
            let mut p = 1.0;
            for b in 0..s {
                if a != b {
                    let xb = (start + b) as f64;
                    p *= (t - xb) / (xa - xb);
                }
            }
            w[a] = p;
        }
        Axis { start, w }
    }

    /// Fills `out` with `(node index, weight)` pairs for the point `x`
    /// given in grid units (`t = (x + L)/h - 1/2` per axis).
    pub fn stencil_units(&self, t: &[f64; 3], out: &mut Vec<(usize, f64)>) {
        out.clear();
        let s = self.width;
        let n = self.n;
        let ax = self.axis(t[0]);
        let ay = self.axis(t[1]);
        if self.dim == 2 {
            for a in 0..s {
                let row = (ax.start + a) * n;
                for b in 0..s {
                    out.push((row + ay.start + b, ax.w[a] * ay.w[b]));
                }
            }
        } else {
            let az = self.axis(t[2]);
            for a in 0..s {
                for b in 0..s {
                    let base = ((ax.start + a) * n + ay.start + b) * n;
                    let wab = ax.w[a] * ay.w[b];
                    for c in 0..s {
                        out.push((base + az.start + c, wab * az.w[c]));
                    }
                }
            }
        }
    }

    /// Interpolated value of nodal data at grid-unit coordinates.
    pub fn eval_units(&self, values: &[f64], t: &[f64; 3], buf: &mut Vec<(usize, f64)>) -> f64 {
        self.stencil_units(t, buf);
        buf.iter().map(|&(i, w)| w * values[i]).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collision::grid::GridSpec;
    use approx::assert_abs_diff_eq;

    fn units(g: &VelocityGrid, x: [f64; 3]) -> [f64; 3] {
        let h = g.spacing();
        let l = g.spec().half_width;
        [
            (x[0] + l) / h - 0.5,
            (x[1] + l) / h - 0.5,
            (x[2] + l) / h - 0.5,
        ]
    }

    #[test]
    fn reproduces_tensor_cubics() {
        let g = VelocityGrid::new(GridSpec::new(2, 12, 6.0)).unwrap();
        let ip = Interpolator::new(&g, 4);
        let p = |v: [f64; 3]| 1.0 + v[0] - 0.3 * v[0].powi(3) * v[1].powi(2) + 0.2 * v[1].powi(3);
        let vals: Vec<f64> = g.nodes().iter().map(|&v| p(v)).collect();
        let mut buf = Vec::new();
        for x in [
            [0.3, -1.7, 0.0],
            [5.4, 5.5, 0.0],
            [-5.5, 2.25, 0.0],
            [-4.1, 0.0, 0.0],
        ] {
            let got = ip.eval_units(&vals, &units(&g, x), &mut buf);
            assert_abs_diff_eq!(got, p(x), epsilon = 1e-10);
            assert_abs_diff_eq!(buf.iter().map(|b| b.1).sum::<f64>(), 1.0, epsilon = 1e-13);
        }
    }

    #[test]
    fn nodes_are_reproduced_exactly() {
        let g = VelocityGrid::new(GridSpec::new(3, 8, 6.0)).unwrap();
        let ip = Interpolator::new(&g, 4);
        let vals: Vec<f64> = (0..g.len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut buf = Vec::new();
        for i in [0, 17, 200, 511] {
            let got = ip.eval_units(&vals, &units(&g, g.node(i)), &mut buf);
            assert_abs_diff_eq!(got, vals[i], epsilon = 1e-14);
        }
    }
}
