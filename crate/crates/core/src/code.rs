use std::fmt;

/// Binary latent code `z ∈ {0,1}^K`.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SparseCode {
    bits: Vec<bool>,
}

impl SparseCode {
    pub fn zeros(width: usize) -> Self {
        Self {
            bits: vec![false; width],
        }
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    /// Panics if any index is out of range.
    pub fn from_active(width: usize, active: &[usize]) -> Self {
        let mut code = Self::zeros(width);
        for &j in active {
            code.set(j, true);
        }
        code
    }

    /// Code whose bit `k` is bit `k` of `mask`.
    pub fn from_mask(width: usize, mask: u64) -> Self {
        Self {
            bits: (0..width).map(|k| (mask >> k) & 1 == 1).collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.bits.len()
    }

    pub fn get(&self, k: usize) -> bool {
        self.bits[k]
    }

    pub fn set(&mut self, k: usize, on: bool) {
        self.bits[k] = on;
    }

    pub fn with(&self, k: usize) -> Self {
        let mut next = self.clone();
        next.set(k, true);
        next
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn active(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(k, &b)| b.then_some(k))
            .collect()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn to_csv_row(&self) -> String {
        let mut row = String::with_capacity(2 * self.bits.len());
        for (k, &b) in self.bits.iter().enumerate() {
            if k > 0 {
                row.push(',');
            }
            row.push(if b { '1' } else { '0' });
        }
        row
    }
}

impl fmt::Debug for SparseCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SparseCode(")?;
        for &b in &self.bits {
            write!(f, "{}", b as u8)?;
        }
        write!(f, ")")
    }
}
