use crate::raster::Raster;

use super::PocError;

/// Dense correspondence for one patch pair.
///
/// Reference patch pixel `(r, c)` corresponds to source patch pixel
/// `(r + Δrow, c + Δcol)`. Unmatched pixels have confidence 0 and NaN
/// displacement.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowGrid {
    /// Two channels: Δrow, Δcol.
    pub displacement: Raster,
    pub confidence: Raster,
}

impl FlowGrid {
    /// All pixels unmatched.
    pub fn unmatched(rows: usize, cols: usize) -> Self {
        Self {
            displacement: Raster::empty(rows, cols, 2),
            confidence: Raster::zeros(rows, cols, 1),
        }
    }

    pub fn uniform(rows: usize, cols: usize, drow: f32, dcol: f32, confidence: f32) -> Self {
        let mut f = Self::unmatched(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                f.set(r, c, drow, dcol, confidence);
            }
        }
        f
    }

    pub fn rows(&self) -> usize {
        self.confidence.rows()
    }

    pub fn cols(&self) -> usize {
        self.confidence.cols()
    }

    pub fn set(&mut self, row: usize, col: usize, drow: f32, dcol: f32, confidence: f32) {
        self.displacement.set(row, col, 0, drow);
        self.displacement.set(row, col, 1, dcol);
        self.confidence.set(row, col, 0, confidence);
    }

    pub fn confidence_at(&self, row: usize, col: usize) -> f32 {
        self.confidence.get(row, col, 0)
    }

    /// `(Δrow, Δcol, confidence)` where matched.
    pub fn get(&self, row: usize, col: usize) -> Option<(f64, f64, f64)> {
        let conf = self.confidence.get(row, col, 0);
        let dr = self.displacement.get(row, col, 0);
        let dc = self.displacement.get(row, col, 1);
        (conf > 0.0 && dr.is_finite() && dc.is_finite()).then_some((dr as f64, dc as f64, conf as f64))
    }

    pub fn matched_fraction(&self, threshold: f64) -> f64 {
        let n = self.rows() * self.cols();
        let matched = self.confidence.values().iter().filter(|v| **v as f64 >= threshold && **v > 0.0).count();
        matched as f64 / n as f64
    }

    pub fn mean_confidence(&self) -> f64 {
        let v = self.confidence.values();
        v.iter().map(|x| *x as f64).sum::<f64>() / v.len() as f64
    }

    /// Three-channel raster `(Δrow, Δcol, confidence)`, the on-disk form.
    pub fn to_raster(&self) -> Raster {
        let mut values = Vec::with_capacity(self.rows() * self.cols() * 3);
        for r in 0..self.rows() {
            for c in 0..self.cols() {
                values.push(self.displacement.get(r, c, 0));
                values.push(self.displacement.get(r, c, 1));
                values.push(self.confidence.get(r, c, 0));
            }
        }
        Raster::from_vec(self.rows(), self.cols(), 3, values).expect("flow shape")
    }

    pub fn from_raster(r: &Raster) -> Result<Self, PocError> {
        if r.channels() != 3 {
            return Err(PocError::MalformedFlow(format!("expected 3 channels, found {}", r.channels())));
        }
        let mut f = Self::unmatched(r.rows(), r.cols());
        for row in 0..r.rows() {
            for col in 0..r.cols() {
                f.set(row, col, r.get(row, col, 0), r.get(row, col, 1), r.get(row, col, 2));
            }
        }
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<(), PocError> {
        if self.displacement.channels() != 2
            || self.displacement.rows() != self.rows()
            || self.displacement.cols() != self.cols()
        {
            return Err(PocError::MalformedFlow("displacement and confidence shapes differ".into()));
        }
        for row in 0..self.rows() {
            for col in 0..self.cols() {
                let conf = self.confidence.get(row, col, 0);
                if !(0.0..=1.0).contains(&conf) {
                    return Err(PocError::MalformedFlow("confidence out of range".into()));
                }
                if conf > 0.0
                    && !(self.displacement.get(row, col, 0).is_finite() && self.displacement.get(row, col, 1).is_finite())
                {
                    return Err(PocError::MalformedFlow(format!(
                        "non-finite displacement with positive confidence at ({row}, {col})"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raster_round_trip_is_bit_exact() {
        let mut f = FlowGrid::unmatched(3, 4);
        f.set(1, 2, 0.125, -3.75, 0.5);
        f.set(0, 0, 1e-7, 2.0, 1.0);
        let back = FlowGrid::from_raster(&f.to_raster()).unwrap();
        let bits = |r: &Raster| r.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.displacement), bits(&f.displacement));
        assert_eq!(bits(&back.confidence), bits(&f.confidence));
        assert_eq!(back.get(1, 2), Some((0.125, -3.75, 0.5)));
        assert_eq!(back.get(2, 2), None);
    }

    #[test]
    fn out_of_range_confidence_is_malformed() {
        let mut f = FlowGrid::uniform(2, 2, 0.0, 0.0, 1.0);
        f.confidence.set(1, 1, 0, 1.5);
        assert_eq!(
            FlowGrid::from_raster(&f.to_raster()),
            Err(PocError::MalformedFlow("confidence out of range".into()))
        );
        let mut f = FlowGrid::uniform(2, 2, 0.0, 0.0, 1.0);
        f.displacement.set(0, 1, 1, f32::NAN);
        assert!(f.validate().is_err());
        assert!(FlowGrid::from_raster(&Raster::zeros(2, 2, 2)).is_err());
    }
}
