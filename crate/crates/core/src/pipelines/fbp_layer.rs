use crate::error::{shape, Result};
use crate::geometry::{FanBeamGeometry, ImageGrid};
use crate::nn::{Scalar, Tensor};
use crate::projector::{FbpOperator, Image, Sinogram};

/// Differentiable FBP node: `(N, 1, n_views, n_dets) → (N, 1, ny, nx)`.
/// Computation runs in double precision whatever the tensor type.
#[derive(Clone)]
pub struct FbpLayer {
    op: FbpOperator,
}

impl FbpLayer {
    pub fn new(grid: ImageGrid, geom: FanBeamGeometry) -> Result<Self> {
        Ok(Self { op: FbpOperator::new(grid, geom)? })
    }

    pub fn from_operator(op: FbpOperator) -> Self {
        Self { op }
    }

    pub fn operator(&self) -> &FbpOperator {
        &self.op
    }

    pub fn forward<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let geom = *self.op.geometry();
        let grid = *self.op.grid();
        let [n, c, h, w] = x.dims();
        if c != 1 || h != geom.n_views || w != geom.n_dets {
            return shape(format!("FBP layer expects (N, 1, {}, {}), got {:?}", geom.n_views, geom.n_dets, x.dims()));
        }
        let mut out = Vec::with_capacity(n * grid.len());
        for i in 0..n {
            let sino = Sinogram::from_values(geom, x.item(i).iter().map(|v| v.as_f64()).collect())?;
            out.extend(self.op.apply(&sino)?.values.into_iter().map(T::from_f64));
        }
        Tensor::from_vec([n, 1, grid.ny, grid.nx], out)
    }

    /// Transpose of [`FbpLayer::forward`], mapping image gradients to sinogram gradients.
    pub fn backward<T: Scalar>(&self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let geom = *self.op.geometry();
        let grid = *self.op.grid();
        let [n, c, h, w] = g.dims();
        if c != 1 || h != grid.ny || w != grid.nx {
            return shape(format!("FBP layer gradient must be (N, 1, {}, {}), got {:?}", grid.ny, grid.nx, g.dims()));
        }
        let mut out = Vec::with_capacity(n * geom.len());
        for i in 0..n {
            let img = Image::from_values(grid, g.item(i).iter().map(|v| v.as_f64()).collect())?;
            out.extend(self.op.adjoint(&img)?.values.into_iter().map(T::from_f64));
        }
        Tensor::from_vec([n, 1, geom.n_views, geom.n_dets], out)
    }
}
