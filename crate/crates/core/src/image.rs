use ndarray::Array4;

use crate::error::{CdmError, Result};

/// Value convention an image batch currently lives in.
///
/// Storage and metrics use `Unit` ([0,1]); networks see `Signed` ([-1,1]).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueRange {
    Unit,
    Signed,
}

/// A batch of multi-channel 2D images, layout `[batch, channel, height, width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    pub data: Array4<f64>,
    pub range: ValueRange,
}

impl ImageBatch {
    pub fn new(data: Array4<f64>, range: ValueRange) -> Self {
        ImageBatch { data, range }
    }

    pub fn zeros(n: usize, c: usize, h: usize, w: usize, range: ValueRange) -> Self {
        ImageBatch {
            data: Array4::zeros((n, c, h, w)),
            range,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[3]
    }

    pub fn same_shape(&self, other: &ImageBatch) -> Result<()> {
        if self.data.shape() != other.data.shape() {
            return Err(CdmError::shape(
                format!("{:?}", self.data.shape()),
                format!("{:?}", other.data.shape()),
            ));
        }
        Ok(())
    }
}
