//! Stationary-velocity-field diffeomorphisms on a periodic grid.
//!
//! Fields are stored channel-first: a `d`-dimensional field on extents
//! `[n0, n1, ...]` is a tensor of shape `[d, n0, n1, ...]`, component `i`
//! being the displacement along axis `i`. A deformation is kept as its
//! displacement `u`, with `φ(x) = x + u(x)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Periodic sampling grid with unit spacing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    extents: Vec<usize>,
}

impl Grid {
    pub fn new(extents: impl Into<Vec<usize>>) -> Result<Self> {
        let extents = extents.into();
        if !(2..=3).contains(&extents.len()) {
            return Err(Error::contract("grid", format!("dimension must be 2 or 3, got {}", extents.len())));
        }
        if extents.iter().any(|&e| e < 4) {
            return Err(Error::contract("grid", format!("extents must be >= 4, got {extents:?}")));
        }
        Ok(Self { extents })
    }

    pub fn dim(&self) -> usize {
        self.extents.len()
    }

    pub fn extents(&self) -> &[usize] {
        &self.extents
    }

    pub fn num_points(&self) -> usize {
        self.extents.iter().product()
    }

    /// Shape of a vector field on this grid.
    pub fn field_shape(&self) -> Vec<usize> {
        let mut s = vec![self.dim()];
        s.extend_from_slice(&self.extents);
        s
    }

    fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.dim()];
        for a in (0..self.dim() - 1).rev() {
            strides[a] = strides[a + 1] * self.extents[a + 1];
        }
        strides
    }

    /// Coordinates of flat point index `p`.
    fn coords(&self, mut p: usize, out: &mut [usize]) {
        for a in (0..self.dim()).rev() {
            out[a] = p % self.extents[a];
            p /= self.extents[a];
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VelocityField<T> {
    grid: Grid,
    field: Tensor<T>,
}

impl<T: Real> VelocityField<T> {
    pub fn new(grid: Grid, field: Tensor<T>) -> Result<Self> {
        if field.shape() != grid.field_shape() {
            return Err(Error::shape("velocity field", field.shape(), &grid.field_shape()));
        }
        Ok(Self { grid, field })
    }

    pub fn zeros(grid: Grid) -> Self {
        let field = Tensor::zeros(grid.field_shape());
        Self { grid, field }
    }

    /// The same vector `c` at every grid point.
    pub fn constant(grid: Grid, c: &[T]) -> Result<Self> {
        if c.len() != grid.dim() {
            return Err(Error::shape("velocity field", &[c.len()], &[grid.dim()]));
        }
        let n = grid.num_points();
        let field = Tensor::from_fn(grid.field_shape(), |i| c[i / n]);
        Ok(Self { grid, field })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.field
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.field
    }

    /// Largest vector norm over the grid.
    pub fn max_norm(&self) -> T {
        max_vector_norm(&self.grid, self.field.data())
    }

    pub fn scaled(&self, s: T) -> Self {
        Self {
            grid: self.grid.clone(),
            field: self.field.map(|x| x * s),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField<T> {
    grid: Grid,
    disp: Tensor<T>,
    from_exponential: bool,
}

impl<T: Real> DeformationField<T> {
    pub fn identity(grid: Grid) -> Self {
        let disp = Tensor::zeros(grid.field_shape());
        Self {
            grid,
            disp,
            from_exponential: false,
        }
    }

    pub fn from_displacement(grid: Grid, disp: Tensor<T>) -> Result<Self> {
        if disp.shape() != grid.field_shape() {
            return Err(Error::shape("deformation field", disp.shape(), &grid.field_shape()));
        }
        if !disp.all_finite() {
            return Err(Error::NonFinite("deformation field"));
        }
        Ok(Self {
            grid,
            disp,
            from_exponential: false,
        })
    }

    /// Uniform translation by `c`.
    pub fn translation(grid: Grid, c: &[T]) -> Result<Self> {
        let v = VelocityField::constant(grid, c)?;
        let mut d = Self::from_displacement(v.grid.clone(), v.field)?;
        d.wrap();
        Ok(d)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn displacement(&self) -> &Tensor<T> {
        &self.disp
    }

    pub fn into_displacement(self) -> Tensor<T> {
        self.disp
    }

    pub fn from_exponential(&self) -> bool {
        self.from_exponential
    }

    pub fn max_displacement(&self) -> T {
        max_vector_norm(&self.grid, self.disp.data())
    }

    /// Wrap every component into `(-extent/2, extent/2]`.
    fn wrap(&mut self) {
        let n = self.grid.num_points();
        for (a, chunk) in self.disp.data_mut().chunks_mut(n).enumerate() {
            let e = self.grid.extents[a];
            for v in chunk {
                *v = wrap_component(*v, e);
            }
        }
    }
}

fn wrap_component<T: Real>(x: T, extent: usize) -> T {
    let e = T::lit(extent as f64);
    let half = e * T::lit(0.5);
    // result in (-e/2, e/2]
    let shifted = (x + half) % e;
    let shifted = if shifted <= T::zero() { shifted + e } else { shifted };
    shifted - half
}

fn max_vector_norm<T: Real>(grid: &Grid, data: &[T]) -> T {
    let n = grid.num_points();
    (0..n)
        .map(|p| {
            (0..grid.dim())
                .map(|a| data[a * n + p] * data[a * n + p])
                .fold(T::zero(), |s, x| s + x)
                .sqrt()
        })
        .fold(T::zero(), T::max)
}

/// Periodic multilinear interpolation of a `channels`-channel field at a
/// continuous point, written into `out`.
fn interpolate<T: Real>(grid: &Grid, strides: &[usize], data: &[T], channels: usize, point: &[T], out: &mut [T]) {
    let d = grid.dim();
    let n = grid.num_points();
    let mut base = [0usize; 3];
    let mut frac = [T::zero(); 3];
    for a in 0..d {
        let f = point[a].floor();
        frac[a] = point[a] - f;
        let e = grid.extents[a] as i64;
        base[a] = f.to_i64().unwrap_or(0).rem_euclid(e) as usize;
    }
    for o in out.iter_mut().take(channels) {
        *o = T::zero();
    }
    for corner in 0..(1usize << d) {
        let mut weight = T::one();
        let mut index = 0;
        for a in 0..d {
            let hi = (corner >> (d - 1 - a)) & 1 == 1;
            let ix = if hi { (base[a] + 1) % grid.extents[a] } else { base[a] };
            weight *= if hi { frac[a] } else { T::one() - frac[a] };
            index += ix * strides[a];
        }
        for (c, o) in out.iter_mut().enumerate().take(channels) {
            *o += weight * data[c * n + index];
        }
    }
}

/// `outer ∘ inner` on raw displacement buffers: `u(x) = u_in(x) + u_out(x + u_in(x))`.
fn compose_raw<T: Real>(grid: &Grid, outer: &[T], inner: &[T]) -> Vec<T> {
    let (d, n) = (grid.dim(), grid.num_points());
    let strides = grid.strides();
    let mut out = vec![T::zero(); d * n];
    let mut coords = [0usize; 3];
    let mut point = [T::zero(); 3];
    let mut sample = [T::zero(); 3];
    for p in 0..n {
        grid.coords(p, &mut coords);
        for a in 0..d {
            point[a] = T::lit(coords[a] as f64) + inner[a * n + p];
        }
        interpolate(grid, &strides, outer, d, &point, &mut sample);
        for a in 0..d {
            out[a * n + p] = inner[a * n + p] + sample[a];
        }
    }
    out
}

/// Smallest number of squarings with `max_norm / 2^K ≤ 0.5` and `K ≥ 4`.
pub fn min_squarings(max_norm: f64) -> u32 {
    let mut k = 4;
    while max_norm / f64::powi(2.0, k as i32) > 0.5 && k < 60 {
        k += 1;
    }
    k
}

/// Group exponential `φ₁ = exp(v)` by scaling and squaring.
pub fn exponentiate<T: Real>(v: &VelocityField<T>, squarings: u32) -> Result<DeformationField<T>> {
    if !v.field.all_finite() {
        return Err(Error::NonFinite("exponentiate"));
    }
    let scale = T::lit(f64::powi(0.5, squarings as i32));
    let mut u: Vec<T> = v.field.data().iter().map(|&x| x * scale).collect();
    for _ in 0..squarings {
        u = compose_raw(&v.grid, &u, &u);
    }
    let mut phi = DeformationField {
        grid: v.grid.clone(),
        disp: Tensor::new(v.grid.field_shape(), u)?,
        from_exponential: true,
    };
    phi.wrap();
    Ok(phi)
}

/// `exp(v)` with the number of squarings picked by [`min_squarings`].
pub fn exponentiate_auto<T: Real>(v: &VelocityField<T>) -> Result<DeformationField<T>> {
    exponentiate(v, min_squarings(v.max_norm().f64()))
}

/// Inverse map of `exp(v)`, i.e. `exp(-v)`.
pub fn invert<T: Real>(v: &VelocityField<T>, squarings: u32) -> Result<DeformationField<T>> {
    exponentiate(&v.scaled(-T::one()), squarings)
}

pub fn compose<T: Real>(outer: &DeformationField<T>, inner: &DeformationField<T>) -> Result<DeformationField<T>> {
    if outer.grid != inner.grid {
        return Err(Error::shape("compose", outer.grid.extents(), inner.grid.extents()));
    }
    let u = compose_raw(&outer.grid, outer.disp.data(), inner.disp.data());
    let mut phi = DeformationField {
        grid: outer.grid.clone(),
        disp: Tensor::new(outer.grid.field_shape(), u)?,
        from_exponential: outer.from_exponential && inner.from_exponential,
    };
    phi.wrap();
    Ok(phi)
}

/// `out(x) = image(φ(x))` for an image of shape `[C, extents...]`.
pub fn warp<T: Real>(image: &Tensor<T>, phi: &DeformationField<T>) -> Result<Tensor<T>> {
    let grid = &phi.grid;
    if image.shape().len() != grid.dim() + 1 || image.shape()[1..] != *grid.extents() {
        return Err(Error::shape("warp", image.shape(), grid.extents()));
    }
    let (d, n, c) = (grid.dim(), grid.num_points(), image.shape()[0]);
    let strides = grid.strides();
    let u = phi.disp.data();
    let mut out = vec![T::zero(); c * n];
    let mut coords = [0usize; 3];
    let mut point = [T::zero(); 3];
    let mut sample = vec![T::zero(); c];
    for p in 0..n {
        grid.coords(p, &mut coords);
        for a in 0..d {
            point[a] = T::lit(coords[a] as f64) + u[a * n + p];
        }
        interpolate(grid, &strides, image.data(), c, &point, &mut sample);
        for ch in 0..c {
            out[ch * n + p] = sample[ch];
        }
    }
    Tensor::new(image.shape().to_vec(), out)
}

/// Determinant of `I + ∇u` at every grid point, periodic central differences.
pub fn jacobian_determinant<T: Real>(phi: &DeformationField<T>) -> Tensor<T> {
    let grid = &phi.grid;
    let (d, n) = (grid.dim(), grid.num_points());
    let strides = grid.strides();
    let u = phi.disp.data();
    let half = T::lit(0.5);
    let mut coords = [0usize; 3];
    let mut det = Vec::with_capacity(n);
    for p in 0..n {
        grid.coords(p, &mut coords);
        let mut j = [[T::zero(); 3]; 3];
        for b in 0..d {
            let e = grid.extents[b];
            let up = p - coords[b] * strides[b] + ((coords[b] + 1) % e) * strides[b];
            let dn = p - coords[b] * strides[b] + ((coords[b] + e - 1) % e) * strides[b];
            for a in 0..d {
                let diff = wrap_component(u[a * n + up] - u[a * n + dn], grid.extents[a]);
                j[a][b] = diff * half + if a == b { T::one() } else { T::zero() };
            }
        }
        det.push(if d == 2 {
            j[0][0] * j[1][1] - j[0][1] * j[1][0]
        } else {
            j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
                - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
                + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0])
        });
    }
    Tensor::new(grid.extents().to_vec(), det).expect("grid shape")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopologyReport {
    pub min_det: f64,
    pub frac_nonpositive: f64,
}

impl TopologyReport {
    pub fn preserved(&self) -> bool {
        self.frac_nonpositive == 0.0
    }
}

pub fn topology_report<T: Real>(phi: &DeformationField<T>) -> TopologyReport {
    let det = jacobian_determinant(phi);
    let n = det.numel();
    let nonpos = det.data().iter().filter(|&&x| x <= T::zero()).count();
    TopologyReport {
        min_det: det.data().iter().fold(f64::INFINITY, |m, &x| m.min(x.f64())),
        frac_nonpositive: nonpos as f64 / n as f64,
    }
}

/// Random band-limited field: a sum of Fourier modes with integer
/// frequency vectors `0 < |k|₂ ≤ max_freq`, rescaled so the largest vector
/// norm is exactly `max_norm`.
pub fn random_smooth_velocity<T: Real>(
    grid: &Grid,
    max_norm: f64,
    max_freq: usize,
    rng: &mut impl Rng,
) -> VelocityField<T> {
    let (d, n) = (grid.dim(), grid.num_points());
    let f = max_freq as i64;
    let range: Vec<i64> = (-f..=f).collect();
    let mut freqs: Vec<[i64; 3]> = Vec::new();
    for &a in &range {
        for &b in &range {
            let cs: &[i64] = if d == 3 { &range } else { &[0] };
            for &c in cs {
                let k2 = a * a + b * b + c * c;
                if k2 > 0 && k2 <= f * f {
                    freqs.push([a, b, c]);
                }
            }
        }
    }
    let mut data = vec![0.0f64; d * n];
    let mut coords = [0usize; 3];
    for comp in 0..d {
        for k in &freqs {
            let amp: f64 = rng.random_range(-1.0..1.0);
            let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            for p in 0..n {
                grid.coords(p, &mut coords);
                let arg: f64 = (0..d)
                    .map(|a| k[a] as f64 * coords[a] as f64 / grid.extents[a] as f64)
                    .sum::<f64>()
                    * std::f64::consts::TAU;
                data[comp * n + p] += amp * (arg + phase).cos();
            }
        }
    }
    let current = max_vector_norm(grid, &data);
    let s = if current > 0.0 { max_norm / current } else { 0.0 };
    let field = Tensor::from_fn(grid.field_shape(), |i| T::lit(data[i] * s));
    VelocityField {
        grid: grid.clone(),
        field,
    }
}

/// Grid-line image (every `spacing`-th row and column set to 1) pulled back
/// through `φ`; a 2-D visual check for folding.
pub fn deformation_grid_overlay<T: Real>(phi: &DeformationField<T>, spacing: usize) -> Result<Tensor<T>> {
    let grid = &phi.grid;
    if grid.dim() != 2 {
        return Err(Error::contract("render", "deformation grid overlay is 2-d only"));
    }
    let (h, w) = (grid.extents[0], grid.extents[1]);
    let lines = Tensor::from_fn(vec![1, h, w], |i| {
        let (y, x) = (i / w, i % w);
        if y % spacing == 0 || x % spacing == 0 {
            T::one()
        } else {
            T::zero()
        }
    });
    let warped = warp(&lines, phi)?;
    warped.reshape(vec![h, w])
}
