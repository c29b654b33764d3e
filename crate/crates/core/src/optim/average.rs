use crate::params::ParameterVector;

/// Running mean of snapshots, gated by start epoch and frequency.
#[derive(Debug, Clone)]
pub struct AveragedState {
    pub params: Option<ParameterVector>,
    pub count: u64,
    pub start_epoch: usize,
    pub freq: usize,
}

impl AveragedState {
    pub fn new(start_epoch: usize, freq: usize) -> Self {
        Self { params: None, count: 0, start_epoch, freq: freq.max(1) }
    }

    /// `iteration` counts completed steps (1-based). Returns whether an
    /// averaging event happened.
    pub fn average_update(&mut self, current: &ParameterVector, epoch: usize, iteration: u64) -> bool {
        if epoch < self.start_epoch || iteration % self.freq as u64 != 0 {
            return false;
        }
        self.push(current);
        true
    }

    /// Unconditional averaging event.
    pub fn push(&mut self, current: &ParameterVector) {
        let k = self.count as f64;
        match &mut self.params {
            None => self.params = Some(current.clone()),
            Some(avg) => {
                for (a, c) in avg.values_mut().iter_mut().zip(current.values()) {
                    *a = (*a * k + c) / (k + 1.0);
                }
            }
        }
        self.count += 1;
    }
}
