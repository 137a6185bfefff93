//! Neumaier-compensated accumulation, used for every pooled mean so results do not
//! drift with summation order.

#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub(crate) fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub(crate) fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

/// Element-wise compensated accumulator for fixed-length vectors (flattened matrices).
#[derive(Debug, Clone)]
pub(crate) struct CompensatedVec {
    acc: Vec<CompensatedSum>,
    count: usize,
}

impl CompensatedVec {
    pub(crate) fn zeros(len: usize) -> Self {
        Self {
            acc: vec![CompensatedSum::default(); len],
            count: 0,
        }
    }

    pub(crate) fn add_slice(&mut self, xs: &[f64]) {
        debug_assert_eq!(xs.len(), self.acc.len());
        for (a, &x) in self.acc.iter_mut().zip(xs) {
            a.add(x);
        }
        self.count += 1;
    }

    pub(crate) fn count(&self) -> usize {
        self.count
    }

    pub(crate) fn mean(&self) -> Vec<f64> {
        let n = self.count.max(1) as f64;
        self.acc.iter().map(|a| a.value() / n).collect()
    }
}

pub(crate) fn compensated_mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut acc = CompensatedSum::default();
    let mut n = 0usize;
    for x in xs {
        acc.add(x);
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        acc.value() / n as f64
    }
}
