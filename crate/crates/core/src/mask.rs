use crate::error::{Error, Result};

/// Binary keep/prune flags over the channels of one dimension.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ChannelMask(Vec<bool>);

impl ChannelMask {
    pub fn full(len: usize) -> Self {
        Self(vec![true; len])
    }

    pub fn from_bools(flags: Vec<bool>) -> Self {
        Self(flags)
    }

    /// Accepts exactly `0.0` and `1.0`.
    pub fn from_values(values: &[f64]) -> Result<Self> {
        values
            .iter()
            .enumerate()
            .map(|(index, &value)| {
                if value == 1.0 {
                    Ok(true)
                } else if value == 0.0 {
                    Ok(false)
                } else {
                    Err(Error::NonBinaryMask { index, value })
                }
            })
            .collect::<Result<Vec<_>>>()
            .map(Self)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// ‖m‖₀
    pub fn count(&self) -> usize {
        self.0.iter().filter(|k| **k).count()
    }

    pub fn get(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn prune(&mut self, i: usize) {
        self.0[i] = false;
    }

    pub fn kept(&self) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .filter_map(|(i, k)| k.then_some(i))
            .collect()
    }

    pub fn as_bools(&self) -> &[bool] {
        &self.0
    }

    pub fn to_values(&self) -> Vec<f64> {
        self.0.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect()
    }

    pub fn value(&self, i: usize) -> f64 {
        if self.0[i] {
            1.0
        } else {
            0.0
        }
    }

    pub fn expect_len(&self, expected: usize) -> Result<()> {
        if self.len() != expected {
            return Err(Error::MaskLength {
                expected,
                found: self.len(),
            });
        }
        Ok(())
    }
}
