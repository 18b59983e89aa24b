//! In-memory labeled image dataset.

use crate::error::{Error, Result};

/// Channels × height × width of one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        ImageShape {
            channels,
            height,
            width,
        }
    }

    pub fn square(channels: usize, side: usize) -> Self {
        Self::new(channels, side, side)
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Images stored contiguously, channel-major within each image, pixel values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    shape: ImageShape,
    pixels: Vec<f64>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(
        shape: ImageShape,
        pixels: Vec<f64>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::invalid("num_classes must be positive"));
        }
        if shape.numel() == 0 {
            return Err(Error::invalid("image shape has a zero dimension"));
        }
        if pixels.len() != labels.len() * shape.numel() {
            return Err(Error::invalid(format!(
                "{} pixels do not form {} images of {:?}",
                pixels.len(),
                labels.len(),
                shape
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::invalid(format!("label {bad} >= num_classes {num_classes}")));
        }
        Ok(Dataset {
            shape,
            pixels,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.shape.numel();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// New dataset holding the given examples, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let n = self.shape.numel();
        let mut pixels = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!("index {i} out of range {}", self.len())));
            }
            pixels.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Dataset::new(self.shape, pixels, labels, self.num_classes)
    }

    /// Flattened pixel vectors, used as raw features by the clustering selectors.
    pub fn features(&self, indices: &[usize]) -> Vec<Vec<f64>> {
        indices.iter().map(|&i| self.image(i).to_vec()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_label_out_of_range() {
        let s = ImageShape::square(1, 1);
        assert!(Dataset::new(s, vec![0.0, 0.0], vec![0, 2], 2).is_err());
    }

    #[test]
    fn rejects_ragged_pixels() {
        let s = ImageShape::square(1, 2);
        assert!(Dataset::new(s, vec![0.0; 7], vec![0, 1], 2).is_err());
    }

    #[test]
    fn subset_preserves_order() {
        let s = ImageShape::square(1, 1);
        let d = Dataset::new(s, vec![0.1, 0.2, 0.3], vec![0, 1, 0], 2).unwrap();
        let sub = d.subset(&[2, 0]).unwrap();
        assert_eq!(sub.pixels(), &[0.3, 0.1]);
        assert_eq!(sub.labels(), &[0, 0]);
    }
}
