//! Token sequences with optional spatial annotations.

use candle_core::Tensor;

use crate::{Result, UdfaError};

/// `(B, T, D)` tokens. `grid` marks a stream laid out on one `(h, w)` grid;
/// `scale_layout` marks a concatenation of several grids in order.
#[derive(Debug, Clone)]
pub struct TokenStream {
    pub data: Tensor,
    pub grid: Option<(usize, usize)>,
    pub scale_layout: Option<Vec<(usize, usize)>>,
}

impl TokenStream {
    pub fn plain(data: Tensor) -> Result<Self> {
        data.dims3()?;
        Ok(TokenStream {
            data,
            grid: None,
            scale_layout: None,
        })
    }

    pub fn with_grid(data: Tensor, grid: (usize, usize)) -> Result<Self> {
        let (_, t, _) = data.dims3()?;
        if grid.0 * grid.1 != t {
            return Err(UdfaError::Shape(format!(
                "grid {grid:?} holds {} tokens, stream has {t}",
                grid.0 * grid.1
            )));
        }
        Ok(TokenStream {
            data,
            grid: Some(grid),
            scale_layout: None,
        })
    }

    pub fn with_layout(data: Tensor, layout: Vec<(usize, usize)>) -> Result<Self> {
        let (_, t, _) = data.dims3()?;
        let total: usize = layout.iter().map(|(h, w)| h * w).sum();
        if total != t {
            return Err(UdfaError::Shape(format!(
                "scale layout {layout:?} holds {total} tokens, stream has {t}"
            )));
        }
        Ok(TokenStream {
            data,
            grid: None,
            scale_layout: Some(layout),
        })
    }

    /// Same annotations, new data of identical shape.
    pub fn replace(&self, data: Tensor) -> Result<Self> {
        if data.dims() != self.data.dims() {
            return Err(UdfaError::Shape(format!(
                "replacement {:?} differs from {:?}",
                data.dims(),
                self.data.dims()
            )));
        }
        Ok(TokenStream {
            data,
            grid: self.grid,
            scale_layout: self.scale_layout.clone(),
        })
    }

    pub fn dims(&self) -> Result<(usize, usize, usize)> {
        Ok(self.data.dims3()?)
    }

    pub fn len(&self) -> usize {
        self.data.dims().get(1).copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.data.dims().get(2).copied().unwrap_or(0)
    }

    /// Fails if any entry is NaN or infinite.
    pub fn check_finite(&self) -> Result<()> {
        let bad = self
            .data
            .flatten_all()?
            .to_dtype(candle_core::DType::F32)?
            .to_vec1::<f32>()?
            .iter()
            .any(|v| !v.is_finite());
        if bad {
            Err(UdfaError::Shape("non-finite token values".into()))
        } else {
            Ok(())
        }
    }

    /// Reshapes a grid-annotated stream to `(B, D, h, w)`.
    pub fn to_map(&self) -> Result<Tensor> {
        let (h, w) = self
            .grid
            .ok_or_else(|| UdfaError::Shape("stream has no grid annotation".into()))?;
        grid_tokens_to_map(&self.data, h, w)
    }

    /// The tokens of scale `index` of a layout-annotated stream, as `(B, D, h, w)`.
    pub fn scale_map(&self, index: usize) -> Result<Tensor> {
        let layout = self
            .scale_layout
            .as_ref()
            .ok_or_else(|| UdfaError::Shape("stream has no scale layout".into()))?;
        let &(h, w) = layout
            .get(index)
            .ok_or_else(|| UdfaError::Shape(format!("scale {index} not in layout")))?;
        let start: usize = layout[..index].iter().map(|(a, b)| a * b).sum();
        let part = self.data.narrow(1, start, h * w)?;
        grid_tokens_to_map(&part, h, w)
    }
}

/// `(B, h·w, D)` → `(B, D, h, w)`.
pub fn grid_tokens_to_map(tokens: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, t, d) = tokens.dims3()?;
    if t != h * w {
        return Err(UdfaError::Shape(format!("{t} tokens cannot fill a {h}x{w} grid")));
    }
    Ok(tokens.transpose(1, 2)?.reshape((b, d, h, w))?)
}

/// `(B, C, h, w)` → `(B, h·w, C)`.
pub fn map_to_tokens(map: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = map.dims4()?;
    Ok(map.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn annotations_are_checked() {
        let t = Tensor::zeros((2, 6, 4), candle_core::DType::F32, &Device::Cpu).unwrap();
        assert!(TokenStream::with_grid(t.clone(), (2, 3)).is_ok());
        assert!(TokenStream::with_grid(t.clone(), (2, 2)).is_err());
        assert!(TokenStream::with_layout(t.clone(), vec![(2, 2), (1, 2)]).is_ok());
        assert!(TokenStream::with_layout(t, vec![(2, 2)]).is_err());
    }

    #[test]
    fn map_round_trip() {
        let m = Tensor::arange(0f32, 24.0, &Device::Cpu)
            .unwrap()
            .reshape((1, 4, 2, 3))
            .unwrap();
        let tokens = map_to_tokens(&m).unwrap();
        assert_eq!(tokens.dims(), &[1, 6, 4]);
        let back = grid_tokens_to_map(&tokens, 2, 3).unwrap();
        assert_eq!(
            back.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            m.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn scale_slices() {
        let t = Tensor::arange(0f32, 10.0, &Device::Cpu)
            .unwrap()
            .reshape((1, 5, 2))
            .unwrap();
        let s = TokenStream::with_layout(t, vec![(2, 2), (1, 1)]).unwrap();
        let last = s.scale_map(1).unwrap();
        assert_eq!(last.dims(), &[1, 2, 1, 1]);
        assert_eq!(last.flatten_all().unwrap().to_vec1::<f32>().unwrap(), [8.0, 9.0]);
    }
}
