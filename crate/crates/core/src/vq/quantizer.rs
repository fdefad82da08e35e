//! Nearest-neighbour vector quantization against a learnable codebook.

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};
use crate::params::{Init, Scope};

/// `K x d` matrix of code vectors.
#[derive(Debug, Clone)]
pub struct Codebook {
    vectors: Tensor,
}

impl Codebook {
    pub fn new(vs: &Scope, size: usize, dim: usize) -> Result<Self> {
        if size == 0 || dim == 0 {
            return Err(Error::Config("codebook must not be empty".into()));
        }
        let bound = 1.0 / size as f64;
        Ok(Self {
            vectors: vs.get("vectors", &[size, dim], Init::Uniform(bound))?,
        })
    }

    pub fn from_tensor(vectors: Tensor) -> Result<Self> {
        let (k, d) = vectors.dims2()?;
        if k == 0 || d == 0 {
            return Err(Error::Config("codebook must not be empty".into()));
        }
        Ok(Self { vectors })
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub fn size(&self) -> usize {
        self.vectors.dim(0).unwrap_or(0)
    }

    pub fn dim(&self) -> usize {
        self.vectors.dim(1).unwrap_or(0)
    }

    /// Rows `cb[i]` for each index, keeping the autograd link to the codebook.
    pub fn lookup(&self, indices: &[u32]) -> Result<Tensor> {
        let idx = Tensor::from_slice(indices, indices.len(), self.vectors.device())?;
        Ok(self.vectors.index_select(&idx, 0)?)
    }
}

/// `argmin_i ||row - cb_i||^2` per row, lowest index on ties.
pub fn nearest_indices(rows: &[Vec<f32>], codebook: &[Vec<f32>]) -> Vec<u32> {
    rows.iter()
        .map(|row| {
            let mut best = (f32::INFINITY, 0u32);
            for (i, code) in codebook.iter().enumerate() {
                let dist: f32 = row.iter().zip(code).map(|(a, b)| (a - b) * (a - b)).sum();
                if dist < best.0 {
                    best = (dist, i as u32);
                }
            }
            best.1
        })
        .collect()
}

/// Quantizes `latents` (`[N, d]`) row by row. Returns the exact codebook rows
/// and their indices.
pub fn quantize_rows(latents: &Tensor, cb: &Codebook) -> Result<(Tensor, Vec<u32>)> {
    let (_, d) = latents.dims2()?;
    if cb.size() == 0 {
        return Err(Error::Config("codebook must not be empty".into()));
    }
    if d != cb.dim() {
        return Err(Error::Dimension(format!(
            "latent dim {d} does not match codebook dim {}",
            cb.dim()
        )));
    }
    let rows: Vec<Vec<f32>> = latents.detach().to_dtype(DType::F32)?.to_vec2()?;
    let codes: Vec<Vec<f32>> = cb.vectors().detach().to_dtype(DType::F32)?.to_vec2()?;
    let indices = nearest_indices(&rows, &codes);
    let quantized = cb.lookup(&indices)?;
    Ok((quantized, indices))
}

/// Quantizes a `[B, d, h, w]` latent map; indices come back in `(b, y, x)` order.
pub fn quantize_map(latents: &Tensor, cb: &Codebook) -> Result<(Tensor, Vec<u32>)> {
    let (b, d, h, w) = latents.dims4()?;
    let rows = latents.permute((0, 2, 3, 1))?.reshape((b * h * w, d))?;
    let (q, idx) = quantize_rows(&rows, cb)?;
    let q = q.reshape((b, h, w, d))?.permute((0, 3, 1, 2))?;
    Ok((q, idx))
}

/// Forward value is exactly `quantized`; the backward pass copies the incoming
/// gradient onto `latents` and sends nothing to the codebook.
pub fn straight_through(latents: &Tensor, quantized: &Tensor) -> Result<Tensor> {
    if latents.dims() != quantized.dims() {
        return Err(Error::Dimension(format!(
            "straight-through shapes differ: {:?} vs {:?}",
            latents.dims(),
            quantized.dims()
        )));
    }
    // (l - sg(l)) is exactly zero for finite l, so the sum is bit-equal to q.
    let zero_with_grad = (latents - latents.detach())?;
    Ok((quantized.detach() + zero_with_grad)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use candle_core::{Device, Var};

    #[test]
    fn exact_row_maps_to_itself() {
        let store = ParamStore::new(0, &Device::Cpu);
        let cb = Codebook::new(&store.root(), 8, 4).unwrap();
        let row5 = cb.vectors().narrow(0, 5, 1).unwrap();
        let (q, idx) = quantize_rows(&row5, &cb).unwrap();
        assert_eq!(idx, vec![5]);
        assert_eq!(q.to_vec2::<f32>().unwrap(), row5.to_vec2::<f32>().unwrap());
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let mut codes = vec![vec![10.0f32, 10.0]; 8];
        codes[2] = vec![1.0, 0.0];
        codes[7] = vec![-1.0, 0.0];
        assert_eq!(nearest_indices(&[vec![0.0, 0.0]], &codes), vec![2]);
        codes[2] = vec![-1.0, 0.0];
        codes[7] = vec![1.0, 0.0];
        assert_eq!(nearest_indices(&[vec![0.0, 0.0]], &codes), vec![2]);
    }

    #[test]
    fn dimension_mismatch() {
        let store = ParamStore::new(0, &Device::Cpu);
        let cb = Codebook::new(&store.root(), 8, 4).unwrap();
        let z = Tensor::zeros((3, 5), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(quantize_rows(&z, &cb), Err(Error::Dimension(_))));
        assert!(Codebook::new(&store.root().pp("e"), 0, 4).is_err());
    }

    #[test]
    fn straight_through_forward_and_gradient() {
        let dev = Device::Cpu;
        let zt = Var::from_tensor(&Tensor::randn(0f32, 1., (4, 3), &dev).unwrap()).unwrap();
        let cbv = Var::from_tensor(&Tensor::randn(0f32, 1., (4, 3), &dev).unwrap()).unwrap();
        let out = straight_through(zt.as_tensor(), cbv.as_tensor()).unwrap();
        assert_eq!(
            out.to_vec2::<f32>().unwrap(),
            cbv.as_tensor().to_vec2::<f32>().unwrap()
        );
        let grads = out.sum_all().unwrap().backward().unwrap();
        let g = grads.get(&zt).unwrap().to_vec2::<f32>().unwrap();
        assert!(g.iter().flatten().all(|&v| v == 1.0));
        // no gradient path into the codebook
        assert!(grads.get(&cbv).is_none());
    }

    #[test]
    fn quantize_map_layout() {
        let store = ParamStore::new(1, &Device::Cpu);
        let cb = Codebook::new(&store.root(), 16, 3).unwrap();
        let z = Tensor::randn(0f32, 0.1, (2, 3, 2, 2), &Device::Cpu).unwrap();
        let (q, idx) = quantize_map(&z, &cb).unwrap();
        assert_eq!(q.dims(), &[2, 3, 2, 2]);
        // element (b=1, y=0, x=1) -> flat index 5
        let col: Vec<f32> = q.get(1).unwrap().permute((1, 2, 0)).unwrap().get(0).unwrap().get(1).unwrap().to_vec1().unwrap();
        let code: Vec<f32> = cb.vectors().get(idx[5] as usize).unwrap().to_vec1().unwrap();
        assert_eq!(col, code);
    }
}
