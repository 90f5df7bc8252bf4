//! Extended-precision accumulation helpers.
//!
//! Used by test oracles that need results noticeably more accurate than a
//! plain f64 loop, e.g. reference softmax values checked to 1e-12.

/// Error-free transformation of a + b (Knuth two-sum).
#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    let err = (a - (s - bb)) + (b - bb);
    (s, err)
}

/// Neumaier compensated summation; exact to well below 1 ulp of the result
/// for the vector lengths used here.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, v: f64) {
        let (s, e) = two_sum(self.sum, v);
        self.sum = s;
        self.comp += e;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Sum a slice with compensation.
pub fn sum(values: &[f64]) -> f64 {
    let mut acc = CompensatedSum::default();
    for &v in values {
        acc.add(v);
    }
    acc.value()
}

/// Dot product with compensated accumulation.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = CompensatedSum::default();
    for (&x, &y) in a.iter().zip(b) {
        acc.add(x * y);
    }
    acc.value()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensation_beats_naive() {
        // 1 + 1e-16 repeated: naive summation loses the small terms.
        let mut vals = vec![1.0];
        vals.extend(std::iter::repeat(1e-16).take(1000));
        let naive: f64 = vals.iter().sum();
        let comp = sum(&vals);
        assert_eq!(naive, 1.0); // demonstrates the loss
        assert!((comp - (1.0 + 1e-13)).abs() < 1e-16);
    }
}
